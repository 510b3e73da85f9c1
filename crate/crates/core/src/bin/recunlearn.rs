use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use recunlearn::experiment::{self, DataFormat, ExperimentConfig, Overrides};
use recunlearn::unlearner::Strategy;
use recunlearn::Error;

/// Influence-function unlearning for matrix-factorization recommenders.
///
/// Every flag can also be set through a RECUNLEARN_* environment variable;
/// flags win over the environment, which wins over the config file.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment config.
    #[arg(long, global = true, env = "RECUNLEARN_CONFIG")]
    config: Option<PathBuf>,
    /// Global seed; every stage derives its own seed from it.
    #[arg(long, global = true, env = "RECUNLEARN_SEED")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "RECUNLEARN_OUT")]
    out: Option<PathBuf>,
    /// Percent of users to withdraw; comma separated for several.
    #[arg(long, global = true, env = "RECUNLEARN_ALPHA", value_delimiter = ',')]
    alpha: Option<Vec<f64>>,
    /// retrain, if_full, sif, cif_full or scif; comma separated for several.
    #[arg(long, global = true, env = "RECUNLEARN_STRATEGY", value_delimiter = ',')]
    strategy: Option<Vec<Strategy>>,
    /// Input ratings file.
    #[arg(long, global = true, env = "RECUNLEARN_DATA")]
    data: Option<PathBuf>,
    /// movielens, tsv, csv or synthetic.
    #[arg(long, global = true, env = "RECUNLEARN_FORMAT")]
    format: Option<DataFormat>,
}

#[derive(Subcommand)]
enum Command {
    /// Load, filter and split the ratings; write CSVs and stats.
    Prepare,
    /// Train the original model.
    Train,
    /// Execute withdrawal requests with each strategy.
    Unlearn,
    /// Audit the original and unlearned models with the membership oracle.
    Attack,
    /// Ranking metrics over the remaining users.
    Eval,
    /// Relative CKA between original and retrained embeddings.
    Cka,
    /// Full grid: train, unlearn, evaluate and audit every cell.
    Run,
    /// Print the resolved configuration as TOML.
    Config,
}

fn config(cli: &Cli) -> recunlearn::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref())?;
    cfg.apply(&Overrides {
        seed: cli.seed,
        out_dir: cli.out.clone(),
        alphas: cli.alpha.clone(),
        strategies: cli.strategy.clone(),
        data: cli.data.clone(),
        format: cli.format,
    });
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> recunlearn::Result<bool> {
    let cfg = config(cli)?;
    let out = cfg.out_dir.display();
    match cli.command {
        Command::Prepare => {
            let r = experiment::cmd_prepare(&cfg)?;
            println!(
                "{} users, {} items, {} ratings, sparsity {:.3}% -> {out}/data",
                r.filtered.users, r.filtered.items, r.filtered.ratings, r.filtered.sparsity_percent
            );
        }
        Command::Train => {
            let (_, r) = experiment::cmd_train(&cfg)?;
            let last = r.history.last().map_or(f64::NAN, |h| h.objective);
            println!("objective {last:.4} after {} epochs -> {out}/model", r.history.len() - 1);
        }
        Command::Unlearn => {
            for r in experiment::cmd_unlearn(&cfg)? {
                println!("{} rand@{}: {:.6}s, shift {:.4}", r.strategy, r.alpha_percent.unwrap_or(f64::NAN), r.wall_time_seconds, r.parameter_shift);
            }
        }
        Command::Attack => {
            for a in experiment::cmd_attack(&cfg)? {
                let c = a.attack.completeness;
                println!("{} rand@{}: acc {:.3} auc {:.3}", a.label, a.alpha, c.acc, c.auc);
            }
        }
        Command::Eval => {
            for e in experiment::cmd_eval(&cfg)? {
                for (k, m) in &e.ranking.at {
                    println!("{} rand@{} @{k}: ndcg {:.4} hr {:.4}", e.label, e.alpha, m.ndcg, m.hr);
                }
            }
        }
        Command::Cka => {
            let r = experiment::cmd_cka(&cfg)?;
            for (block, v) in &r.mean {
                println!("{block}: {v:.4}");
            }
        }
        Command::Run => {
            let r = experiment::cmd_run(&cfg)?;
            print!("{}", experiment::summary_csv(&r.summary, &r.timing, &cfg.ks));
            if r.summary.failed_cells > 0 {
                eprintln!("{} cell(s) failed; see {out}/run/summary.json", r.summary.failed_cells);
                return Ok(false);
            }
        }
        Command::Config => print!("{}", cfg.resolved().to_toml()?),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RECUNLEARN_LOG", "info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io { .. } | Error::Config(_) | Error::MalformedLine { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
