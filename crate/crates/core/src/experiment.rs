//! Experiment configuration and the pipeline commands behind the binary.
//!
//! Every command reads an [`ExperimentConfig`], works inside its output
//! directory and writes JSON reports wrapped in an [`Envelope`] that carries
//! the resolved configuration. The layout under `out_dir` is
//!
//! ```text
//! data/{train.csv, test.csv, stats.json}
//! model/{original.json, train.json}
//! unlearn/<strategy>_a<alpha>/{model.json, outcome.json}
//! attack/<label>_a<alpha>/{attack.json, samples.csv}
//! eval/<label>_a<alpha>/{ranking.json, ranking.csv}
//! cka/{cka.json, cka.csv}
//! run/{summary.json, summary.csv, timing.json, cells/...}
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, DatasetStats, InteractionSet, SplitMode, SplitSpec};
use crate::error::{Error, Result};
use crate::influence::{Curvature, SolverConfig};
use crate::metrics::{self, CkaBlock, MetricValues, RankingReport, RelativeCka};
use crate::mio::{self, AttackReport, MioConfig};
use crate::model::{self, EpochStats, ModelHyper, ModelParams};
use crate::seed::derive_seed;
use crate::synthetic::{self, SyntheticSpec};
use crate::unlearner::{self, OutcomeReport, RetrainSeed, Strategy, StrategyConfig, UnlearnRequest};

pub const CONFIG_SCHEMA: &str = "recunlearn.config/v1";
/// Prefix of the environment variables the binary reads, e.g. `RECUNLEARN_SEED`.
pub const ENV_PREFIX: &str = "RECUNLEARN_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    /// `user::item::rating::timestamp` (MovieLens 1M).
    Movielens,
    /// Tab separated (MovieLens 100K `u.data`).
    Tsv,
    /// The canonical CSV written by `prepare`.
    Csv,
    Synthetic,
}

impl DataFormat {
    pub fn name(self) -> &'static str {
        match self {
            DataFormat::Movielens => "movielens",
            DataFormat::Tsv => "tsv",
            DataFormat::Csv => "csv",
            DataFormat::Synthetic => "synthetic",
        }
    }

    fn default_separator(self) -> &'static str {
        match self {
            DataFormat::Tsv => "\t",
            DataFormat::Csv => ",",
            _ => "::",
        }
    }
}

impl fmt::Display for DataFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "movielens" | "ml1m" => Ok(DataFormat::Movielens),
            "tsv" | "ml100k" => Ok(DataFormat::Tsv),
            "csv" => Ok(DataFormat::Csv),
            "synthetic" => Ok(DataFormat::Synthetic),
            other => Err(Error::Config(format!("unknown data format {other:?}; expected movielens, tsv, csv or synthetic"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub format: DataFormat,
    pub path: Option<PathBuf>,
    /// Overrides the format's separator.
    pub separator: Option<String>,
    pub min_interactions: usize,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            format: DataFormat::Synthetic,
            path: None,
            separator: None,
            min_interactions: 5,
            synthetic: SyntheticSpec { users: 1000, items: 300, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CkaConfig {
    /// Number of independently trained original models.
    pub models: usize,
    pub alpha: f64,
    pub repetitions: usize,
}

impl Default for CkaConfig {
    fn default() -> Self {
        CkaConfig { models: 3, alpha: 10.0, repetitions: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub split: SplitSpec,
    pub model: ModelHyper,
    pub solver: SolverConfig,
    pub retrain_seed: RetrainSeed,
    pub strategies: Vec<Strategy>,
    pub alphas: Vec<f64>,
    /// Seeds per (strategy, alpha) cell.
    pub repeats: usize,
    pub mio: MioConfig,
    pub ks: Vec<usize>,
    pub cka: CkaConfig,
    /// Run grid cells concurrently. Wall times are then not comparable.
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    /// Desk-scale defaults: a 1000 × 300 synthetic set and a 16-dimensional
    /// model with damping equal to the ridge penalty.
    fn default() -> Self {
        ExperimentConfig {
            schema: CONFIG_SCHEMA.to_string(),
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            split: SplitSpec {
                train_fraction: 0.8,
                seed: 0,
                mode: SplitMode::PerUserRandom,
                holdout_user_fraction: 0.2,
            },
            model: ModelHyper {
                embed_dim: 16,
                learning_rate: 0.01,
                reg_lambda: 2.0,
                epochs: 200,
                init_std: 0.01,
                batch_size: 256,
                seed: 0,
            },
            solver: SolverConfig {
                damping: 2.0,
                cg_tol: 1e-6,
                cg_max_iter: 300,
                use_compensation: true,
                curvature: Curvature::GaussNewton,
            },
            retrain_seed: RetrainSeed::Fresh,
            strategies: vec![Strategy::Retrain, Strategy::IfFull, Strategy::Scif],
            alphas: vec![2.5, 5.0],
            repeats: 5,
            mio: MioConfig::default(),
            ks: metrics::DEFAULT_KS.to_vec(),
            cka: CkaConfig::default(),
            parallel: false,
        }
    }
}

/// Values that take precedence over the config file, typically from flags
/// or `RECUNLEARN_*` variables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub alphas: Option<Vec<f64>>,
    pub strategies: Option<Vec<Strategy>>,
    pub data: Option<PathBuf>,
    pub format: Option<DataFormat>,
}

impl ExperimentConfig {
    /// Parse a TOML config. Keys absent from the file keep the values of
    /// [`ExperimentConfig::default`], also inside nested tables.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let bad = |e: &dyn fmt::Display| Error::Config(format!("config: {e}"));
        let file: toml::Table = toml::from_str(text).map_err(|e| bad(&e))?;
        let mut merged = toml::Table::try_from(ExperimentConfig::default()).map_err(|e| bad(&e))?;
        merge_tables(&mut merged, file);
        let cfg: ExperimentConfig = merged.try_into().map_err(|e| bad(&e))?;
        if cfg.schema != CONFIG_SCHEMA {
            return Err(Error::Config(format!("config schema {:?} is not {CONFIG_SCHEMA:?}", cfg.schema)));
        }
        Ok(cfg)
    }

    /// Read `path`, or start from the defaults when there is none.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(ExperimentConfig::default()),
            Some(p) => Self::from_toml_str(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out_dir {
            self.out_dir = p.clone();
        }
        if let Some(a) = &o.alphas {
            self.alphas = a.clone();
        }
        if let Some(s) = &o.strategies {
            self.strategies = s.clone();
        }
        if let Some(p) = &o.data {
            self.data.path = Some(p.clone());
        }
        if let Some(f) = o.format {
            self.data.format = f;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.model.validate()?;
        self.solver.validate()?;
        self.mio.validate()?;
        if self.data.format == DataFormat::Synthetic {
            self.data.synthetic.validate()?;
        } else if self.data.path.is_none() {
            return Err(Error::Config(format!("data format {} needs a path", self.data.format)));
        }
        if self.strategies.is_empty() || self.alphas.is_empty() {
            return Err(Error::Config("need at least one strategy and one alpha".into()));
        }
        if let Some(a) = self.alphas.iter().chain([&self.cka.alpha]).find(|a| !(**a > 0.0 && **a <= 100.0)) {
            return Err(Error::Config(format!("alpha must be in (0, 100], got {a}")));
        }
        if self.repeats == 0 || self.cka.repetitions == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        if self.cka.models < 2 {
            return Err(Error::Config("cka.models must be >= 2: the pairwise denominator needs two originals".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("ks must be non-empty and >= 1".into()));
        }
        Ok(())
    }

    /// Copy with every sub-seed derived from the global seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.split.seed = derive_seed(self.seed, "split");
        c.model.seed = derive_seed(self.seed, "model");
        c.data.synthetic.seed = derive_seed(self.seed, "synthetic");
        c.mio.seed = derive_seed(self.seed, "mio");
        c
    }

    pub fn layout(&self) -> Layout {
        Layout { root: self.out_dir.clone() }
    }

    /// Seeds of repetition `rep` at `alpha`, shared by every strategy.
    pub fn cell_seeds(&self, alpha: f64, rep: usize) -> CellSeeds {
        let tag = |stage: &str| derive_seed(self.seed, &format!("{stage}/a{alpha}/r{rep}"));
        CellSeeds {
            request: tag("request"),
            mio: tag("mio"),
            retrain: tag("retrain"),
        }
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSeeds {
    pub request: u64,
    pub mio: u64,
    /// Retrain hyper seed; the retrain policy may derive from it again.
    pub retrain: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

fn alpha_tag(alpha: f64) -> String {
    format!("a{alpha}")
}

impl Layout {
    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn train_csv(&self) -> PathBuf {
        self.data_dir().join("train.csv")
    }
    pub fn test_csv(&self) -> PathBuf {
        self.data_dir().join("test.csv")
    }
    pub fn stats_json(&self) -> PathBuf {
        self.data_dir().join("stats.json")
    }
    pub fn original_model(&self) -> PathBuf {
        self.root.join("model").join("original.json")
    }
    pub fn train_report(&self) -> PathBuf {
        self.root.join("model").join("train.json")
    }
    pub fn unlearn_dir(&self, strategy: Strategy, alpha: f64) -> PathBuf {
        self.root.join("unlearn").join(format!("{}_{}", strategy.name(), alpha_tag(alpha)))
    }
    pub fn attack_dir(&self, label: &str, alpha: f64) -> PathBuf {
        self.root.join("attack").join(format!("{label}_{}", alpha_tag(alpha)))
    }
    pub fn eval_dir(&self, label: &str, alpha: f64) -> PathBuf {
        self.root.join("eval").join(format!("{label}_{}", alpha_tag(alpha)))
    }
    pub fn cka_dir(&self) -> PathBuf {
        self.root.join("cka")
    }
    pub fn run_dir(&self) -> PathBuf {
        self.root.join("run")
    }
    pub fn cell_dir(&self, label: &str, alpha: f64, rep: usize) -> PathBuf {
        self.run_dir().join("cells").join(format!("{label}_{}_r{rep}", alpha_tag(alpha)))
    }
}

/// Self-describing report: the body plus the configuration that made it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub schema: String,
    pub config: ExperimentConfig,
    pub report: T,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_report<T: Serialize + Clone>(path: &Path, schema: &str, cfg: &ExperimentConfig, report: &T) -> Result<()> {
    write_json(
        path,
        &Envelope {
            schema: schema.to_string(),
            config: cfg.clone(),
            report: report.clone(),
        },
    )
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn create_out_dir(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))
}

pub const STATS_SCHEMA: &str = "recunlearn.stats/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareReport {
    pub raw: DatasetStats,
    pub filtered: DatasetStats,
    pub duplicates: usize,
    pub train_ratings: usize,
    pub test_ratings: usize,
    pub train_users: usize,
    pub test_only_users: usize,
}

fn is_canonical_csv(path: &Path) -> Result<bool> {
    use std::io::BufRead;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut first = String::new();
    std::io::BufReader::new(file).read_line(&mut first).map_err(|e| Error::io(path, e))?;
    Ok(first.starts_with("# recunlearn-interactions"))
}

fn load_raw(cfg: &ExperimentConfig) -> Result<(InteractionSet, usize)> {
    let d = &cfg.data;
    match d.format {
        DataFormat::Synthetic => Ok((synthetic::generate(&d.synthetic)?, 0)),
        format => {
            let path = d.path.as_ref().ok_or_else(|| Error::Config(format!("data format {format} needs a path")))?;
            if format == DataFormat::Csv && is_canonical_csv(path)? {
                return Ok((InteractionSet::read_csv(path)?, 0));
            }
            let sep = d.separator.as_deref().unwrap_or(format.default_separator());
            let loaded = dataset::load_movielens(path, sep)?;
            Ok((loaded.data, loaded.duplicates))
        }
    }
}

/// Load, filter and split the dataset, then write canonical CSVs and stats.
pub fn cmd_prepare(cfg: &ExperimentConfig) -> Result<PrepareReport> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    create_out_dir(&cfg)?;
    let (raw, duplicates) = load_raw(&cfg)?;
    let filtered = if cfg.data.min_interactions > 1 {
        dataset::filter_min_interactions(&raw, cfg.data.min_interactions)?
    } else {
        raw.clone()
    };
    let (train, test) = dataset::split(&filtered, &cfg.split)?;
    let layout = cfg.layout();
    fs::create_dir_all(layout.data_dir()).map_err(|e| Error::io(layout.data_dir(), e))?;
    train.write_csv(layout.train_csv())?;
    test.write_csv(layout.test_csv())?;
    let report = PrepareReport {
        raw: DatasetStats::of(&raw),
        filtered: DatasetStats::of(&filtered),
        duplicates,
        train_ratings: train.len(),
        test_ratings: test.len(),
        train_users: train.active_users().len(),
        test_only_users: (0..test.num_users() as u32).filter(|&u| train.user_degree(u) == 0 && test.user_degree(u) > 0).count(),
    };
    write_report(&layout.stats_json(), STATS_SCHEMA, &cfg, &report)?;
    log::info!(
        "prepared {} ratings ({} users, {} items, sparsity {:.3}%)",
        report.filtered.ratings,
        report.filtered.users,
        report.filtered.items,
        report.filtered.sparsity_percent
    );
    Ok(report)
}

/// Train and test sets written by [`cmd_prepare`].
pub fn load_prepared(cfg: &ExperimentConfig) -> Result<(InteractionSet, InteractionSet)> {
    let layout = cfg.layout();
    let train = InteractionSet::read_csv(layout.train_csv())?;
    let test = InteractionSet::read_csv(layout.test_csv())?;
    if (train.num_users(), train.num_items()) != (test.num_users(), test.num_items()) {
        return Err(Error::InvalidData("train and test index spaces differ".into()));
    }
    Ok((train, test))
}

fn ensure_prepared(cfg: &ExperimentConfig) -> Result<(InteractionSet, InteractionSet)> {
    let layout = cfg.layout();
    if !layout.train_csv().exists() || !layout.test_csv().exists() {
        cmd_prepare(cfg)?;
    }
    load_prepared(cfg)
}

pub const TRAIN_SCHEMA: &str = "recunlearn.train/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub history: Vec<EpochStats>,
    /// Ranking quality over every user with train and test data.
    pub ranking: RankingReport,
    pub wall_time_seconds: f64,
}

/// Train the original model on the prepared train split.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let (train, test) = load_prepared(&cfg)?;
    let (params, report) = train_original(&cfg, &train, &test)?;
    let layout = cfg.layout();
    params.save(layout.original_model())?;
    write_report(&layout.train_report(), TRAIN_SCHEMA, &cfg, &report)?;
    Ok((params, report))
}

fn train_original(cfg: &ExperimentConfig, train: &InteractionSet, test: &InteractionSet) -> Result<(ModelParams, TrainReport)> {
    let start = std::time::Instant::now();
    let trained = model::train(train, &cfg.model)?;
    let wall_time_seconds = start.elapsed().as_secs_f64();
    let users = metrics::rankable_users(train, test, &HashSet::new());
    let ranking = metrics::evaluate_ranking(&trained.params, train, test, &users, &cfg.ks)?;
    log::info!("trained original model: objective {:.4}", trained.history.last().map_or(f64::NAN, |h| h.objective));
    Ok((
        trained.params,
        TrainReport {
            seed: cfg.model.seed,
            history: trained.history,
            ranking,
            wall_time_seconds,
        },
    ))
}

fn load_original(cfg: &ExperimentConfig) -> Result<ModelParams> {
    let path = cfg.layout().original_model();
    if !path.exists() {
        return Err(Error::Config(format!("{} not found; run `train` first", path.display())));
    }
    ModelParams::load(path)
}

fn strategy_config(cfg: &ExperimentConfig, strategy: Strategy, seeds: &CellSeeds) -> StrategyConfig {
    StrategyConfig {
        strategy,
        solver: cfg.solver,
        retrain_hyper: ModelHyper { seed: seeds.retrain, ..cfg.model },
        retrain_seed: cfg.retrain_seed,
    }
}

fn request_for(cfg: &ExperimentConfig, train: &InteractionSet, alpha: f64, rep: usize) -> Result<UnlearnRequest> {
    unlearner::make_rand_at(train, alpha, cfg.cell_seeds(alpha, rep).request)
}

pub const OUTCOME_SCHEMA: &str = "recunlearn.unlearn/v1";

/// Execute repetition 0 of every configured (strategy, alpha) pair against
/// the saved original model.
pub fn cmd_unlearn(cfg: &ExperimentConfig) -> Result<Vec<OutcomeReport>> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let (train, _) = load_prepared(&cfg)?;
    let original = load_original(&cfg)?;
    let layout = cfg.layout();
    let mut out = Vec::new();
    for &alpha in &cfg.alphas {
        let request = request_for(&cfg, &train, alpha, 0)?;
        let seeds = cfg.cell_seeds(alpha, 0);
        for &strategy in &cfg.strategies {
            let outcome = unlearner::unlearn(&original, &train, &request, &strategy_config(&cfg, strategy, &seeds))?;
            let dir = layout.unlearn_dir(strategy, alpha);
            outcome.params_after.save(dir.join("model.json"))?;
            let report = outcome.report(&original);
            write_report(&dir.join("outcome.json"), OUTCOME_SCHEMA, &cfg, &report)?;
            log::info!("{strategy} at rand@{alpha}: {:.4}s", report.wall_time_seconds);
            out.push(report);
        }
    }
    Ok(out)
}

/// The original model plus each configured strategy's unlearned model at
/// `alpha`, as written by [`cmd_unlearn`].
fn saved_models(cfg: &ExperimentConfig, alpha: f64) -> Result<Vec<(String, ModelParams)>> {
    let mut models = vec![("original".to_string(), load_original(cfg)?)];
    for &s in &cfg.strategies {
        let path = cfg.layout().unlearn_dir(s, alpha).join("model.json");
        if !path.exists() {
            return Err(Error::Config(format!("{} not found; run `unlearn` first", path.display())));
        }
        models.push((s.name().to_string(), ModelParams::load(path)?));
    }
    Ok(models)
}

pub const ATTACK_SCHEMA: &str = "recunlearn.attack/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelledAttack {
    pub label: String,
    pub alpha: f64,
    pub attack: AttackReport,
}

/// Audit the original and every unlearned model with the oracle.
pub fn cmd_attack(cfg: &ExperimentConfig) -> Result<Vec<LabelledAttack>> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let (train, test) = load_prepared(&cfg)?;
    let mut out = Vec::new();
    for &alpha in &cfg.alphas {
        let targets = request_for(&cfg, &train, alpha, 0)?.users();
        let mio_cfg = MioConfig { seed: cfg.cell_seeds(alpha, 0).mio, ..cfg.mio };
        for (label, params) in saved_models(&cfg, alpha)? {
            let run = mio::run_attack(&params, &train, &test, &targets, &mio_cfg)?;
            let dir = cfg.layout().attack_dir(&label, alpha);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            mio::write_attack_csv(&run.samples, dir.join("samples.csv"))?;
            let entry = LabelledAttack { label, alpha, attack: run.report };
            write_report(&dir.join("attack.json"), ATTACK_SCHEMA, &cfg, &entry)?;
            out.push(entry);
        }
    }
    Ok(out)
}

pub const EVAL_SCHEMA: &str = "recunlearn.eval/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelledRanking {
    pub label: String,
    pub alpha: f64,
    pub ranking: RankingReport,
}

/// Ranking metrics over the remaining users for the original and every
/// unlearned model.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<Vec<LabelledRanking>> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let (train, test) = load_prepared(&cfg)?;
    let mut out = Vec::new();
    for &alpha in &cfg.alphas {
        let targets: HashSet<u32> = request_for(&cfg, &train, alpha, 0)?.users().into_iter().collect();
        let users = metrics::rankable_users(&train, &test, &targets);
        for (label, params) in saved_models(&cfg, alpha)? {
            let ranking = metrics::evaluate_ranking(&params, &train, &test, &users, &cfg.ks)?;
            let dir = cfg.layout().eval_dir(&label, alpha);
            write_text(&dir.join("ranking.csv"), &ranking.to_csv())?;
            let entry = LabelledRanking { label, alpha, ranking };
            write_report(&dir.join("ranking.json"), EVAL_SCHEMA, &cfg, &entry)?;
            out.push(entry);
        }
    }
    Ok(out)
}

pub const CKA_SCHEMA: &str = "recunlearn.cka/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaRepetition {
    pub rep: usize,
    pub request_seed: u64,
    pub retrain_seed: u64,
    pub unlearned_users: usize,
    pub blocks: BTreeMap<String, RelativeCka>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaReport {
    pub alpha: f64,
    pub original_seeds: Vec<u64>,
    pub repetitions: Vec<CkaRepetition>,
    /// Mean relative CKA per block over repetitions.
    pub mean: BTreeMap<String, f64>,
}

impl CkaReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rep,block,relative,relative_single,numerator,denominator\n");
        for r in &self.repetitions {
            for (block, v) in &r.blocks {
                out.push_str(&format!("{},{block},{},{},{},{}\n", r.rep, v.relative, v.relative_single, v.numerator, v.denominator));
            }
        }
        out
    }
}

/// Relative CKA of each embedding block between independently trained
/// originals and models retrained after rand@alpha.
pub fn cmd_cka(cfg: &ExperimentConfig) -> Result<CkaReport> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let (train, _) = ensure_prepared(&cfg)?;
    let original_seeds: Vec<u64> = (0..cfg.cka.models).map(|m| derive_seed(cfg.seed, &format!("cka/original/{m}"))).collect();
    let originals: Vec<ModelParams> = original_seeds
        .iter()
        .map(|&s| model::train(&train, &ModelHyper { seed: s, ..cfg.model }).map(|t| t.params))
        .collect::<Result<_>>()?;
    let alpha = cfg.cka.alpha;
    let mut repetitions = Vec::new();
    for rep in 0..cfg.cka.repetitions {
        let request_seed = derive_seed(cfg.seed, &format!("cka/request/{rep}"));
        let retrain_seed = derive_seed(cfg.seed, &format!("cka/retrain/{rep}"));
        let request = unlearner::make_rand_at(&train, alpha, request_seed)?;
        let strategy = StrategyConfig {
            strategy: Strategy::Retrain,
            solver: cfg.solver,
            retrain_hyper: ModelHyper { seed: retrain_seed, ..cfg.model },
            retrain_seed: RetrainSeed::Same,
        };
        let retrained = unlearner::unlearn(&originals[0], &train, &request, &strategy)?.params_after;
        let unlearned = request.users();
        let gone: HashSet<u32> = unlearned.iter().copied().collect();
        let remaining: Vec<u32> = train.active_users().into_iter().filter(|u| !gone.contains(u)).collect();
        let mut blocks = BTreeMap::new();
        for block in CkaBlock::ALL {
            let rows = match block {
                CkaBlock::UeUnlearn => &unlearned,
                _ => &remaining,
            };
            blocks.insert(block.name().to_string(), metrics::relative_cka(&originals, &retrained, block, rows)?);
        }
        repetitions.push(CkaRepetition {
            rep,
            request_seed,
            retrain_seed,
            unlearned_users: unlearned.len(),
            blocks,
        });
    }
    let mean = CkaBlock::ALL
        .iter()
        .map(|b| {
            let m = repetitions.iter().map(|r| r.blocks[b.name()].relative).sum::<f64>() / repetitions.len() as f64;
            (b.name().to_string(), m)
        })
        .collect();
    let report = CkaReport { alpha, original_seeds, repetitions, mean };
    let dir = cfg.layout().cka_dir();
    write_text(&dir.join("cka.csv"), &report.to_csv())?;
    write_report(&dir.join("cka.json"), CKA_SCHEMA, &cfg, &report)?;
    Ok(report)
}

pub const SUMMARY_SCHEMA: &str = "recunlearn.summary/v1";
pub const TIMING_SCHEMA: &str = "recunlearn.timing/v1";
pub const CELL_SCHEMA: &str = "recunlearn.cell/v1";
/// Label of the untouched model in run summaries.
pub const ORIGINAL: &str = "original";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub seeds: CellSeeds,
    pub unlearned_users: usize,
    pub mio_acc: f64,
    pub mio_auc: f64,
    /// Oracle quality on its own held-out split.
    pub attack_auc: f64,
    pub ranking: BTreeMap<usize, MetricValues>,
    pub parameter_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub rep: usize,
    pub error: String,
}

/// One (strategy, alpha) row, averaged over the successful repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub alpha: f64,
    pub repeats: usize,
    pub mio_acc: f64,
    pub mio_auc: f64,
    pub ranking: BTreeMap<usize, MetricValues>,
    pub parameter_shift: f64,
    pub per_rep: Vec<RepRecord>,
    pub failures: Vec<CellFailure>,
}

impl SummaryRow {
    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.ranking.get(&k).map(|m| m.ndcg)
    }
}

/// Deterministic run summary; wall times live in [`TimingReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub original_objective: f64,
    pub rows: Vec<SummaryRow>,
    pub failed_cells: usize,
}

impl RunSummary {
    pub fn row(&self, strategy: &str, alpha: f64) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.strategy == strategy && r.alpha == alpha)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub strategy: String,
    pub alpha: f64,
    pub mean_wall_time_seconds: f64,
    pub per_rep: Vec<f64>,
    /// Mean retrain time over this row's mean time, when retrain ran.
    pub speedup_vs_retrain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    /// False when cells ran concurrently.
    pub timing_valid: bool,
    pub original_train_seconds: f64,
    pub rows: Vec<TimingRow>,
}

impl TimingReport {
    pub fn row(&self, strategy: &str, alpha: f64) -> Option<&TimingRow> {
        self.rows.iter().find(|r| r.strategy == strategy && r.alpha == alpha)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub timing: TimingReport,
}

struct CellResult {
    record: RepRecord,
    wall_time: f64,
}

#[derive(Clone, Copy)]
struct CellKey {
    label: Option<Strategy>,
    alpha: f64,
    rep: usize,
}

impl CellKey {
    fn label(&self) -> &'static str {
        self.label.map_or(ORIGINAL, Strategy::name)
    }
}

struct RunContext<'a> {
    cfg: &'a ExperimentConfig,
    original: &'a ModelParams,
    train: &'a InteractionSet,
    test: &'a InteractionSet,
}

impl RunContext<'_> {
    fn cell(&self, key: CellKey) -> Result<CellResult> {
        let cfg = self.cfg;
        let seeds = cfg.cell_seeds(key.alpha, key.rep);
        let request = unlearner::make_rand_at(self.train, key.alpha, seeds.request)?;
        let targets = request.users();
        let (params, wall_time, outcome) = match key.label {
            None => (self.original.clone(), 0.0, None),
            Some(s) => {
                let o = unlearner::unlearn(self.original, self.train, &request, &strategy_config(cfg, s, &seeds))?;
                let report = o.report(self.original);
                (o.params_after, o.wall_time_seconds, Some(report))
            }
        };
        let gone: HashSet<u32> = targets.iter().copied().collect();
        let users = metrics::rankable_users(self.train, self.test, &gone);
        let ranking = metrics::evaluate_ranking(&params, self.train, self.test, &users, &cfg.ks)?;
        let attack = mio::run_attack(&params, self.train, self.test, &targets, &MioConfig { seed: seeds.mio, ..cfg.mio })?.report;
        let dir = cfg.layout().cell_dir(key.label(), key.alpha, key.rep);
        if let Some(o) = &outcome {
            write_report(&dir.join("outcome.json"), CELL_SCHEMA, cfg, o)?;
        }
        write_report(&dir.join("attack.json"), CELL_SCHEMA, cfg, &attack)?;
        write_report(&dir.join("ranking.json"), CELL_SCHEMA, cfg, &ranking)?;
        Ok(CellResult {
            record: RepRecord {
                rep: key.rep,
                seeds,
                unlearned_users: targets.len(),
                mio_acc: attack.completeness.acc,
                mio_auc: attack.completeness.auc,
                attack_auc: attack.attack.auc,
                ranking: ranking.at,
                parameter_shift: params.distance(self.original),
            },
            wall_time,
        })
    }
}

fn mean_ranking(records: &[RepRecord]) -> BTreeMap<usize, MetricValues> {
    let mut out: BTreeMap<usize, MetricValues> = BTreeMap::new();
    let n = records.len() as f64;
    for r in records {
        for (&k, v) in &r.ranking {
            let m = out.entry(k).or_default();
            m.ndcg += v.ndcg / n;
            m.hr += v.hr / n;
            m.precision += v.precision / n;
            m.recall += v.recall / n;
        }
    }
    out
}

fn mean_of(records: &[RepRecord], f: impl Fn(&RepRecord) -> f64) -> f64 {
    if records.is_empty() {
        return f64::NAN;
    }
    records.iter().map(f).sum::<f64>() / records.len() as f64
}

/// Train the original model, then for every (strategy, alpha, repetition)
/// unlearn, evaluate and audit. Failed cells are recorded and skipped.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    create_out_dir(&cfg)?;
    let (train, test) = ensure_prepared(&cfg)?;
    let (original, train_report) = train_original(&cfg, &train, &test)?;
    let layout = cfg.layout();
    original.save(layout.original_model())?;
    write_report(&layout.train_report(), TRAIN_SCHEMA, &cfg, &train_report)?;

    let labels: Vec<Option<Strategy>> = std::iter::once(None).chain(cfg.strategies.iter().map(|&s| Some(s))).collect();
    let mut keys = Vec::new();
    for &alpha in &cfg.alphas {
        for &label in &labels {
            for rep in 0..cfg.repeats {
                keys.push(CellKey { label, alpha, rep });
            }
        }
    }
    let ctx = RunContext { cfg: &cfg, original: &original, train: &train, test: &test };
    let run_one = |key: &CellKey| {
        let r = ctx.cell(*key);
        match &r {
            Ok(c) => log::info!("{} rand@{} rep {}: auc {:.3}", key.label(), key.alpha, key.rep, c.record.mio_auc),
            Err(e) => log::error!("{} rand@{} rep {} failed: {e}", key.label(), key.alpha, key.rep),
        }
        r
    };
    let results: Vec<Result<CellResult>> = if cfg.parallel {
        keys.par_iter().map(run_one).collect()
    } else {
        keys.iter().map(run_one).collect()
    };

    let mut rows = Vec::new();
    let mut timing_rows = Vec::new();
    let mut failed_cells = 0;
    let mut cursor = keys.iter().zip(results);
    for &alpha in &cfg.alphas {
        let mut retrain_time = None;
        for &label in &labels {
            let mut records = Vec::new();
            let mut times = Vec::new();
            let mut failures = Vec::new();
            for _ in 0..cfg.repeats {
                let (key, result) = cursor.next().expect("one result per key");
                match result {
                    Ok(c) => {
                        records.push(c.record);
                        times.push(c.wall_time);
                    }
                    Err(e) => failures.push(CellFailure { rep: key.rep, error: e.to_string() }),
                }
            }
            failed_cells += failures.len();
            let name = label.map_or(ORIGINAL, Strategy::name).to_string();
            if label.is_some() {
                let mean_time = if times.is_empty() { f64::NAN } else { times.iter().sum::<f64>() / times.len() as f64 };
                if label == Some(Strategy::Retrain) {
                    retrain_time = Some(mean_time);
                }
                timing_rows.push(TimingRow {
                    strategy: name.clone(),
                    alpha,
                    mean_wall_time_seconds: mean_time,
                    per_rep: times,
                    speedup_vs_retrain: None,
                });
            }
            rows.push(SummaryRow {
                strategy: name,
                alpha,
                repeats: records.len(),
                mio_acc: mean_of(&records, |r| r.mio_acc),
                mio_auc: mean_of(&records, |r| r.mio_auc),
                ranking: mean_ranking(&records),
                parameter_shift: mean_of(&records, |r| r.parameter_shift),
                per_rep: records,
                failures,
            });
        }
        if let Some(rt) = retrain_time {
            for t in timing_rows.iter_mut().filter(|t| t.alpha == alpha) {
                t.speedup_vs_retrain = Some(rt / t.mean_wall_time_seconds);
            }
        }
    }

    let summary = RunSummary {
        original_objective: train_report.history.last().map_or(f64::NAN, |h| h.objective),
        rows,
        failed_cells,
    };
    let timing = TimingReport {
        timing_valid: !cfg.parallel,
        original_train_seconds: train_report.wall_time_seconds,
        rows: timing_rows,
    };
    let dir = layout.run_dir();
    write_report(&dir.join("summary.json"), SUMMARY_SCHEMA, &cfg, &summary)?;
    write_report(&dir.join("timing.json"), TIMING_SCHEMA, &cfg, &timing)?;
    write_text(&dir.join("summary.csv"), &summary_csv(&summary, &timing, &cfg.ks))?;
    Ok(RunOutput { summary, timing })
}

/// Flat table: one line per (strategy, alpha) with completeness, ranking
/// and timing columns.
pub fn summary_csv(summary: &RunSummary, timing: &TimingReport, ks: &[usize]) -> String {
    let mut out = String::from("strategy,alpha,repeats,failures,mio_acc,mio_auc");
    for k in ks {
        out.push_str(&format!(",ndcg@{k},hr@{k}"));
    }
    out.push_str(",wall_time_seconds,speedup_vs_retrain\n");
    for r in &summary.rows {
        out.push_str(&format!("{},{},{},{},{},{}", r.strategy, r.alpha, r.repeats, r.failures.len(), r.mio_acc, r.mio_auc));
        for k in ks {
            let m = r.ranking.get(k).copied().unwrap_or_default();
            out.push_str(&format!(",{},{}", m.ndcg, m.hr));
        }
        match timing.row(&r.strategy, r.alpha) {
            Some(t) => out.push_str(&format!(",{},{}\n", t.mean_wall_time_seconds, t.speedup_vs_retrain.map_or(String::new(), |s| s.to_string()))),
            None => out.push_str(",,\n"),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(out: &Path) -> ExperimentConfig {
        ExperimentConfig {
            out_dir: out.to_path_buf(),
            data: DataConfig {
                synthetic: SyntheticSpec { users: 60, items: 40, min_per_user: 6, max_per_user: 12, ..Default::default() },
                ..Default::default()
            },
            model: ModelHyper { embed_dim: 4, epochs: 20, reg_lambda: 1.0, learning_rate: 0.01, ..Default::default() },
            solver: SolverConfig { damping: 1.0, ..ExperimentConfig::default().solver },
            alphas: vec![10.0],
            repeats: 2,
            mio: MioConfig { epochs: 5, ..Default::default() },
            cka: CkaConfig { models: 2, alpha: 10.0, repetitions: 1 },
            ..Default::default()
        }
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let c = ExperimentConfig::from_toml_str("schema = \"recunlearn.config/v1\"\nseed = 9\n[model]\nembed_dim = 8\n").unwrap();
        assert_eq!((c.seed, c.model.embed_dim), (9, 8));
        assert_eq!(c.model.epochs, ExperimentConfig::default().model.epochs);
    }

    #[test]
    fn toml_rejects_unknown_keys_and_schemas() {
        assert!(ExperimentConfig::from_toml_str("schema = \"recunlearn.config/v1\"\nsed = 1\n").is_err());
        assert!(ExperimentConfig::from_toml_str("schema = \"recunlearn.config/v0\"\n").is_err());
    }

    #[test]
    fn overrides_win() {
        let mut c = ExperimentConfig::default();
        c.apply(&Overrides {
            seed: Some(4),
            alphas: Some(vec![1.0]),
            strategies: Some(vec![Strategy::Sif]),
            format: Some(DataFormat::Tsv),
            data: Some("u.data".into()),
            out_dir: Some("x".into()),
        });
        assert_eq!(c.seed, 4);
        assert_eq!(c.alphas, vec![1.0]);
        assert_eq!(c.strategies, vec![Strategy::Sif]);
        assert_eq!(c.data.format, DataFormat::Tsv);
        assert_eq!(c.data.path.as_deref(), Some(Path::new("u.data")));
        assert_eq!(c.out_dir, PathBuf::from("x"));
    }

    #[test]
    fn validation_cases() {
        let ok = ExperimentConfig::default();
        let bad = [
            ExperimentConfig { alphas: vec![0.0], ..ok.clone() },
            ExperimentConfig { strategies: vec![], ..ok.clone() },
            ExperimentConfig { cka: CkaConfig { models: 1, ..ok.cka }, ..ok.clone() },
            ExperimentConfig { ks: vec![0], ..ok.clone() },
            ExperimentConfig { data: DataConfig { format: DataFormat::Movielens, ..ok.data.clone() }, ..ok.clone() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn seeds_fan_out() {
        let a = ExperimentConfig::default().resolved();
        let b = ExperimentConfig { seed: 1, ..Default::default() }.resolved();
        assert_ne!(a.model.seed, b.model.seed);
        assert_ne!(a.split.seed, a.model.seed);
        assert_eq!(a, ExperimentConfig::default().resolved());
        assert_ne!(a.cell_seeds(5.0, 0), a.cell_seeds(5.0, 1));
        assert_ne!(a.cell_seeds(5.0, 0).request, a.cell_seeds(5.0, 0).mio);
    }

    #[test]
    fn format_parsing() {
        assert_eq!("ML1M".parse::<DataFormat>().unwrap(), DataFormat::Movielens);
        assert_eq!("synthetic".parse::<DataFormat>().unwrap(), DataFormat::Synthetic);
        assert!("xls".parse::<DataFormat>().is_err());
    }

    #[test]
    fn prepare_is_deterministic_and_reports_stats() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let r = cmd_prepare(&cfg).unwrap();
        let first = fs::read(cfg.layout().train_csv()).unwrap();
        cmd_prepare(&cfg).unwrap();
        assert_eq!(first, fs::read(cfg.layout().train_csv()).unwrap());
        assert_eq!(r.train_ratings + r.test_ratings, r.filtered.ratings);
        assert!(r.test_only_users > 0);
        let env: Envelope<PrepareReport> = read_json(&cfg.layout().stats_json()).unwrap();
        assert_eq!(env.schema, STATS_SCHEMA);
        assert_eq!(env.report, r);
    }

    #[test]
    fn missing_input_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.data.format = DataFormat::Movielens;
        cfg.data.path = Some(dir.path().join("absent.dat"));
        assert!(matches!(cmd_prepare(&cfg), Err(Error::Io { .. })));
    }

    #[test]
    fn step_commands_chain() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { strategies: vec![Strategy::Retrain, Strategy::Scif], ..tiny(dir.path()) };
        cmd_prepare(&cfg).unwrap();
        assert!(cmd_unlearn(&cfg).is_err());
        cmd_train(&cfg).unwrap();
        assert_eq!(cmd_unlearn(&cfg).unwrap().len(), 2);
        let attacks = cmd_attack(&cfg).unwrap();
        assert_eq!(attacks.iter().map(|a| a.label.as_str()).collect::<Vec<_>>(), ["original", "retrain", "scif"]);
        assert_eq!(cmd_eval(&cfg).unwrap().len(), 3);
        assert!(cfg.layout().attack_dir("scif", 10.0).join("samples.csv").exists());
    }

    #[test]
    fn run_grid_shape() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { alphas: vec![5.0, 10.0], ..tiny(dir.path()) };
        let out = cmd_run(&cfg).unwrap();
        assert_eq!(out.summary.failed_cells, 0);
        // original plus three strategies per alpha
        assert_eq!(out.summary.rows.len(), 8);
        assert_eq!(out.timing.rows.len(), 6);
        assert!(out.timing.row("scif", 5.0).unwrap().speedup_vs_retrain.unwrap() > 0.0);
        let csv = fs::read_to_string(cfg.layout().run_dir().join("summary.csv")).unwrap();
        assert_eq!(csv.lines().count(), 9);
        let env: Envelope<RunSummary> = read_json(&cfg.layout().run_dir().join("summary.json")).unwrap();
        assert_eq!(env.report, out.summary);
        assert_eq!(env.config, cfg.resolved());
    }

    #[test]
    fn failing_cells_are_recorded() {
        let dir = tempfile::tempdir().unwrap();
        // Exact curvature with almost no damping breaks the full-scope solve.
        let mut cfg = ExperimentConfig { strategies: vec![Strategy::IfFull, Strategy::Scif], repeats: 1, ..tiny(dir.path()) };
        cfg.solver = SolverConfig { damping: 1e-9, curvature: Curvature::Exact, ..cfg.solver };
        cfg.model.reg_lambda = 1e-3;
        cfg.model.epochs = 60;
        let out = cmd_run(&cfg).unwrap();
        let row = out.summary.row("if_full", 10.0).unwrap();
        assert_eq!(row.failures.len() + row.repeats, 1);
        assert_eq!(out.summary.failed_cells, row.failures.len());
    }

    #[test]
    fn cka_needs_two_models() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { cka: CkaConfig { models: 1, alpha: 10.0, repetitions: 1 }, ..tiny(dir.path()) };
        assert!(matches!(cmd_cka(&cfg), Err(Error::Config(_))));
        let ok = tiny(dir.path());
        let r = cmd_cka(&ok).unwrap();
        assert_eq!(r.mean.len(), 3);
        assert!(ok.layout().cka_dir().join("cka.csv").exists());
    }
}
