//! Build collaborative surrogates for a withdrawn user and compare removal
//! with replacement on the user's row.

use recunlearn::influence::{apply_update, influence_cif, influence_if, Scope, SolverConfig, SurrogateBuilder};
use recunlearn::model::{train, ModelHyper};
use recunlearn::synthetic::{generate, SyntheticSpec};

fn main() -> recunlearn::Result<()> {
    let data = generate(&SyntheticSpec { users: 300, items: 200, ..Default::default() })?;
    let hyper = ModelHyper { embed_dim: 16, learning_rate: 0.01, reg_lambda: 2.0, epochs: 150, ..Default::default() };
    let model = train(&data, &hyper)?.params;

    let user = 11;
    let removed: Vec<_> = data.user_interactions(user).copied().collect();
    let surrogates = SurrogateBuilder::new(&data, &removed).build_all(&removed);
    for s in surrogates.iter().flatten().take(5) {
        println!("item {:>3}: rating {} -> surrogate {:.3} ({:?})", s.base.item, s.base.rating, s.surrogate_rating, s.source);
    }

    let cfg = SolverConfig { damping: hyper.reg_lambda, ..Default::default() };
    let removal = apply_update(&model, &influence_if(&model, &data, &removed, Scope::SelectedUsers, &cfg)?)?;
    let replacement = apply_update(&model, &influence_cif(&model, &data, &removed, &surrogates, Scope::SelectedUsers, &cfg)?)?;
    let norm = |m: &recunlearn::model::ModelParams| m.user_row(user).iter().map(|x| x * x).sum::<f64>().sqrt();
    println!("|p_u| original {:.4}, after removal {:.4}, after replacement {:.4}", norm(&model), norm(&removal), norm(&replacement));
    Ok(())
}
