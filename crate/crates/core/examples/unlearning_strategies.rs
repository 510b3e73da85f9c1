//! Execute one rand@5 request with every strategy and compare time,
//! parameter shift and ranking quality on the remaining users.

use std::collections::HashSet;

use recunlearn::dataset::{split, SplitMode, SplitSpec};
use recunlearn::influence::{Curvature, SolverConfig};
use recunlearn::metrics::{evaluate_ranking, rankable_users};
use recunlearn::model::{train, ModelHyper};
use recunlearn::synthetic::{generate, SyntheticSpec};
use recunlearn::unlearner::{make_rand_at, unlearn, Strategy, StrategyConfig};

fn main() -> recunlearn::Result<()> {
    let data = generate(&SyntheticSpec { users: 800, items: 300, ..Default::default() })?;
    let (tr, te) = split(&data, &SplitSpec { train_fraction: 0.8, mode: SplitMode::PerUserRandom, ..Default::default() })?;
    let hyper = ModelHyper { embed_dim: 16, learning_rate: 0.01, reg_lambda: 2.0, epochs: 200, ..Default::default() };
    let original = train(&tr, &hyper)?.params;

    let request = make_rand_at(&tr, 5.0, 42)?;
    let gone: HashSet<u32> = request.users().into_iter().collect();
    let users = rankable_users(&tr, &te, &gone);
    let solver = SolverConfig { damping: 2.0, cg_max_iter: 300, curvature: Curvature::GaussNewton, ..Default::default() };

    println!("{:<9} {:>10} {:>8} {:>8}", "strategy", "seconds", "shift", "ndcg@10");
    for s in Strategy::ALL {
        let out = unlearn(&original, &tr, &request, &StrategyConfig::new(s, solver, hyper))?;
        let ndcg = evaluate_ranking(&out.params_after, &tr, &te, &users, &[10])?.at[&10].ndcg;
        println!("{:<9} {:>10.4} {:>8.3} {:>8.4}", s.name(), out.wall_time_seconds, out.params_after.distance(&original), ndcg);
    }
    Ok(())
}
