//! Audit unlearning completeness: the oracle should recognise withdrawn
//! users in the original model and not after retraining.

use recunlearn::dataset::{split, SplitMode, SplitSpec};
use recunlearn::mio::{run_attack, MioConfig};
use recunlearn::model::{train, ModelHyper};
use recunlearn::synthetic::{generate, SyntheticSpec};
use recunlearn::unlearner::{make_rand_at, unlearn, Strategy, StrategyConfig};

fn main() -> recunlearn::Result<()> {
    let data = generate(&SyntheticSpec { users: 800, items: 300, ..Default::default() })?;
    let spec = SplitSpec { train_fraction: 0.8, mode: SplitMode::PerUserRandom, holdout_user_fraction: 0.2, seed: 5 };
    let (tr, te) = split(&data, &spec)?;
    let hyper = ModelHyper { embed_dim: 16, learning_rate: 0.01, reg_lambda: 2.0, epochs: 200, ..Default::default() };
    let original = train(&tr, &hyper)?.params;
    let request = make_rand_at(&tr, 5.0, 9)?;
    let targets = request.users();
    let retrained = unlearn(&original, &tr, &request, &StrategyConfig::new(Strategy::Retrain, Default::default(), hyper))?.params_after;

    let cfg = MioConfig { seed: 1, ..Default::default() };
    for (name, model) in [("original", &original), ("retrain", &retrained)] {
        let r = run_attack(model, &tr, &te, &targets, &cfg)?.report;
        println!(
            "{name:<9} oracle held-out AUC {:.3} | unlearned users: ACC {:.3} AUC {:.3}",
            r.attack.auc, r.completeness.acc, r.completeness.auc
        );
    }
    Ok(())
}
