//! One-step influence removal against an exact leave-out re-solve.
//!
//! With item rows fixed each user row is a ridge regression, so the
//! influence update with damping equal to the penalty is exact.

use recunlearn::dataset::{Interaction, InteractionSet};
use recunlearn::influence::{apply_update, influence_if, Scope, SolverConfig};
use recunlearn::model::{train_from, ModelParams, TrainOptions};
use recunlearn::synthetic::{generate, SyntheticSpec};

fn fit(params: ModelParams, data: &InteractionSet) -> recunlearn::Result<ModelParams> {
    Ok(train_from(params, data, 3000, TrainOptions { freeze_items: true })?.params)
}

fn main() -> recunlearn::Result<()> {
    let data = generate(&SyntheticSpec { users: 40, items: 30, min_per_user: 5, max_per_user: 12, ..Default::default() })?;
    let mut hyper = recunlearn::model::ModelHyper { embed_dim: 6, learning_rate: 0.005, reg_lambda: 0.5, init_std: 0.5, batch_size: 10_000, ..Default::default() };
    hyper.seed = 3;
    let start = recunlearn::model::init_params(data.num_users(), data.num_items(), &hyper)?;
    let original = fit(start.clone(), &data)?;

    let removed: Vec<Interaction> = data.user_interactions(7).take(3).copied().collect();
    let cfg = SolverConfig { damping: hyper.reg_lambda, cg_tol: 1e-12, ..Default::default() };
    let estimate = influence_if(&original, &data, &removed, Scope::SelectedUsers, &cfg)?;
    let updated = apply_update(&original, &estimate)?;
    let retrained = fit(original.clone(), &data.without(&removed))?;

    println!("removed {} ratings of user 7", removed.len());
    println!("parameter shift        {:.6}", updated.distance(&original));
    println!("distance to retrained  {:.2e}", updated.distance(&retrained));
    println!("cg iterations {}, residual {:.2e}", estimate.cg_iters, estimate.cg_residual);
    Ok(())
}
