//! Train a matrix-factorization model on synthetic ratings and report the
//! objective trajectory and top-K quality.

use std::collections::HashSet;

use recunlearn::dataset::{split, SplitMode, SplitSpec};
use recunlearn::metrics::{evaluate_ranking, rankable_users};
use recunlearn::model::{train, ModelHyper};
use recunlearn::synthetic::{generate, SyntheticSpec};

fn main() -> recunlearn::Result<()> {
    let data = generate(&SyntheticSpec { users: 600, items: 300, ..Default::default() })?;
    let spec = SplitSpec { train_fraction: 0.8, mode: SplitMode::PerUserRandom, ..Default::default() };
    let (tr, te) = split(&data, &spec)?;
    let hyper = ModelHyper { embed_dim: 16, learning_rate: 0.01, reg_lambda: 2.0, epochs: 200, ..Default::default() };
    let trained = train(&tr, &hyper)?;
    for h in trained.history.iter().step_by(40) {
        println!("epoch {:>3}  objective {:>10.2}", h.epoch, h.objective);
    }
    let users = rankable_users(&tr, &te, &HashSet::new());
    let report = evaluate_ranking(&trained.params, &tr, &te, &users, &[10, 20])?;
    print!("{}", report.to_csv());
    Ok(())
}
