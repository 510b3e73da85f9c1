//! Top-K metrics for one hand-made ranking.

use std::collections::HashSet;

use recunlearn::metrics::{hr_at_k, ndcg_at_k, precision_at_k, recall_at_k};

fn main() {
    let ranked = [4, 9, 1, 7, 3];
    let relevant: HashSet<u32> = [9, 3, 8].into_iter().collect();
    for k in [1, 3, 5] {
        println!(
            "@{k}: ndcg {:.4} hr {} precision {:.3} recall {:.3}",
            ndcg_at_k(&ranked, &relevant, k),
            hr_at_k(&ranked, &relevant, k),
            precision_at_k(&ranked, &relevant, k),
            recall_at_k(&ranked, &relevant, k)
        );
    }
}
