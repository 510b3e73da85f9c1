//! Relative CKA of each embedding block between independently trained
//! models and a model retrained without 10% of the users.

use std::collections::HashSet;

use recunlearn::metrics::{relative_cka, CkaBlock};
use recunlearn::model::{train, ModelHyper};
use recunlearn::synthetic::{generate, SyntheticSpec};
use recunlearn::unlearner::make_rand_at;

fn main() -> recunlearn::Result<()> {
    let data = generate(&SyntheticSpec { users: 500, items: 300, ..Default::default() })?;
    let hyper = ModelHyper { embed_dim: 16, learning_rate: 0.01, reg_lambda: 2.0, epochs: 200, ..Default::default() };
    let originals = (0..3)
        .map(|s| train(&data, &ModelHyper { seed: s, ..hyper }).map(|t| t.params))
        .collect::<recunlearn::Result<Vec<_>>>()?;

    let request = make_rand_at(&data, 10.0, 7)?;
    let unlearned = request.users();
    let gone: HashSet<u32> = unlearned.iter().copied().collect();
    let remaining: Vec<u32> = data.active_users().into_iter().filter(|u| !gone.contains(u)).collect();
    let retrained = train(&data.without(&request.expand(&data)?), &ModelHyper { seed: 99, ..hyper })?.params;

    for block in CkaBlock::ALL {
        let rows = if block == CkaBlock::UeUnlearn { &unlearned } else { &remaining };
        let r = relative_cka(&originals, &retrained, block, rows)?;
        println!("{:<11} relative CKA {:.3}", block.name(), r.relative);
    }
    Ok(())
}
