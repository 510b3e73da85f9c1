//! Withdrawal requests and the strategies that execute them.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::IteratorRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{Interaction, InteractionSet};
use crate::error::{Error, Result};
use crate::influence::{self, InfluenceReport, Scope, SolverConfig, SurrogateBuilder};
use crate::model::{self, EpochStats, ModelHyper, ModelParams};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    UserWise,
    SampleWise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnRequest {
    pub kind: RequestKind,
    pub target_users: Vec<u32>,
    pub target_points: Vec<Interaction>,
    pub alpha_percent: Option<f64>,
    pub seed: u64,
}

impl UnlearnRequest {
    pub fn user_wise(users: impl IntoIterator<Item = u32>, seed: u64) -> Self {
        let users: BTreeSet<u32> = users.into_iter().collect();
        UnlearnRequest {
            kind: RequestKind::UserWise,
            target_users: users.into_iter().collect(),
            target_points: Vec::new(),
            alpha_percent: None,
            seed,
        }
    }

    pub fn sample_wise(points: Vec<Interaction>, seed: u64) -> Self {
        UnlearnRequest {
            kind: RequestKind::SampleWise,
            target_users: Vec::new(),
            target_points: points,
            alpha_percent: None,
            seed,
        }
    }

    /// The withdrawn set E: all training interactions of the target users,
    /// or the listed points.
    pub fn expand(&self, train: &InteractionSet) -> Result<Vec<Interaction>> {
        match self.kind {
            RequestKind::UserWise => {
                let mut e = Vec::new();
                for &u in &self.target_users {
                    if u as usize >= train.num_users() {
                        return Err(Error::Request(format!("user {u} is out of range")));
                    }
                    if train.user_degree(u) == 0 {
                        return Err(Error::Request(format!("user {u} has no training interactions")));
                    }
                    e.extend(train.user_interactions(u).copied());
                }
                Ok(e)
            }
            RequestKind::SampleWise => {
                if !train.covers(&self.target_points) {
                    return Err(Error::Request("every target point must be a training interaction".into()));
                }
                Ok(self.target_points.clone())
            }
        }
    }

    /// Users whose rows the request touches.
    pub fn users(&self) -> Vec<u32> {
        match self.kind {
            RequestKind::UserWise => self.target_users.clone(),
            RequestKind::SampleWise => {
                let s: BTreeSet<u32> = self.target_points.iter().map(|z| z.user).collect();
                s.into_iter().collect()
            }
        }
    }
}

/// Uniformly sample round(α/100 · #users with training data) users.
pub fn make_rand_at(train: &InteractionSet, alpha_percent: f64, seed: u64) -> Result<UnlearnRequest> {
    if !(alpha_percent > 0.0 && alpha_percent <= 100.0) {
        return Err(Error::Request(format!("alpha must be in (0, 100], got {alpha_percent}")));
    }
    let eligible = train.active_users();
    let n = (alpha_percent / 100.0 * eligible.len() as f64).round() as usize;
    if n == 0 {
        return Err(Error::Request(format!(
            "rand@{alpha_percent} selects no users out of {}",
            eligible.len()
        )));
    }
    let mut rng = seed::rng(seed::derive_seed(seed, "rand_at"));
    let chosen = eligible.into_iter().choose_multiple(&mut rng, n);
    let mut req = UnlearnRequest::user_wise(chosen, seed);
    req.alpha_percent = Some(alpha_percent);
    Ok(req)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Retrain,
    IfFull,
    Sif,
    CifFull,
    Scif,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Strategy::Retrain, Strategy::IfFull, Strategy::Sif, Strategy::CifFull, Strategy::Scif];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Retrain => "retrain",
            Strategy::IfFull => "if_full",
            Strategy::Sif => "sif",
            Strategy::CifFull => "cif_full",
            Strategy::Scif => "scif",
        }
    }

    pub fn scope(self) -> Option<Scope> {
        match self {
            Strategy::Retrain => None,
            Strategy::IfFull | Strategy::CifFull => Some(Scope::Full),
            Strategy::Sif | Strategy::Scif => Some(Scope::SelectedUsers),
        }
    }

    pub fn uses_surrogates(self) -> bool {
        matches!(self, Strategy::CifFull | Strategy::Scif)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}; expected one of retrain, if_full, sif, cif_full, scif")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainSeed {
    /// Derive a new seed from the retrain hyper seed.
    #[default]
    Fresh,
    /// Reuse the retrain hyper seed as is.
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub retrain_hyper: ModelHyper,
    #[serde(default)]
    pub retrain_seed: RetrainSeed,
}

impl StrategyConfig {
    pub fn new(strategy: Strategy, solver: SolverConfig, retrain_hyper: ModelHyper) -> Self {
        StrategyConfig {
            strategy,
            solver,
            retrain_hyper,
            retrain_seed: RetrainSeed::Fresh,
        }
    }

    pub fn retrain_seed_value(&self) -> u64 {
        match self.retrain_seed {
            RetrainSeed::Fresh => seed::derive_seed(self.retrain_hyper.seed, "retrain"),
            RetrainSeed::Same => self.retrain_hyper.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Diagnostics {
    Influence(InfluenceReport),
    Retrain { seed: u64, history: Vec<EpochStats> },
}

#[derive(Debug, Clone)]
pub struct UnlearnOutcome {
    pub params_after: ModelParams,
    pub wall_time_seconds: f64,
    pub strategy: StrategyConfig,
    pub request: UnlearnRequest,
    pub diagnostics: Diagnostics,
    pub removed: usize,
    pub train_size: usize,
}

pub const OUTCOME_SCHEMA: &str = "recunlearn.outcome/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeReport {
    pub schema: String,
    pub strategy: Strategy,
    pub alpha_percent: Option<f64>,
    pub target_users: usize,
    pub removed: usize,
    pub train_size: usize,
    pub wall_time_seconds: f64,
    pub parameter_shift: f64,
    pub solver: SolverConfig,
    pub diagnostics: Diagnostics,
}

impl UnlearnOutcome {
    pub fn report(&self, before: &ModelParams) -> OutcomeReport {
        OutcomeReport {
            schema: OUTCOME_SCHEMA.to_string(),
            strategy: self.strategy.strategy,
            alpha_percent: self.request.alpha_percent,
            target_users: self.request.users().len(),
            removed: self.removed,
            train_size: self.train_size,
            wall_time_seconds: self.wall_time_seconds,
            parameter_shift: self.params_after.distance(before),
            solver: self.strategy.solver,
            diagnostics: self.diagnostics.clone(),
        }
    }
}

/// Execute `request` against `model` with the configured strategy.
///
/// The wall time covers the strategy body only: for influence strategies
/// surrogate construction, the solves and the update; for retraining the
/// full training run.
pub fn unlearn(model: &ModelParams, train: &InteractionSet, request: &UnlearnRequest, cfg: &StrategyConfig) -> Result<UnlearnOutcome> {
    model.check_compatible(train)?;
    let removed = request.expand(train)?;
    let start = Instant::now();
    let (params_after, diagnostics) = match cfg.strategy {
        Strategy::Retrain => {
            let retained = train.without(&removed);
            if retained.is_empty() {
                return Err(Error::Request("the request leaves no training interactions".into()));
            }
            let hyper = ModelHyper {
                seed: cfg.retrain_seed_value(),
                ..cfg.retrain_hyper
            };
            let trained = model::train(&retained, &hyper)?;
            (trained.params, Diagnostics::Retrain { seed: hyper.seed, history: trained.history })
        }
        s => {
            let scope = s.scope().expect("influence strategy");
            let estimate = if s.uses_surrogates() {
                let surrogates = SurrogateBuilder::new(train, &removed).build_all(&removed);
                influence::influence_cif(model, train, &removed, &surrogates, scope, &cfg.solver)?
            } else {
                influence::influence_if(model, train, &removed, scope, &cfg.solver)?
            };
            let after = influence::apply_update(model, &estimate)?;
            (after, Diagnostics::Influence(estimate.report()))
        }
    };
    let wall_time_seconds = start.elapsed().as_secs_f64().max(1e-9);
    Ok(UnlearnOutcome {
        params_after,
        wall_time_seconds,
        strategy: *cfg,
        request: request.clone(),
        diagnostics,
        removed: removed.len(),
        train_size: train.len(),
    })
}
