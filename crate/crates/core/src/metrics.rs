//! Top-K ranking metrics and linear CKA.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::InteractionSet;
use crate::error::{Error, Result};
use crate::model::{select_rows, ModelParams};

pub const DEFAULT_KS: [usize; 4] = [5, 10, 15, 20];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ranked {
    pub items: Vec<u32>,
    /// Fewer than K candidates were available.
    pub truncated: bool,
}

/// Top-`k` items the user has not rated in `train`, by descending score,
/// ties broken by ascending item id.
pub fn rank_items(params: &ModelParams, train: &InteractionSet, user: u32, k: usize) -> Result<Ranked> {
    if user as usize >= params.num_users() {
        return Err(Error::OutOfRange(format!("user {user} of {}", params.num_users())));
    }
    let seen: HashSet<u32> = train.user_interactions(user).map(|z| z.item).collect();
    let mut cand: Vec<(f64, u32)> = (0..params.num_items() as u32)
        .filter(|i| !seen.contains(i))
        .map(|i| (params.score(user, i), i))
        .collect();
    let order = |a: &(f64, u32), b: &(f64, u32)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    let truncated = cand.len() < k;
    if !truncated && k > 0 && k < cand.len() {
        cand.select_nth_unstable_by(k - 1, order);
        cand.truncate(k);
    }
    cand.sort_unstable_by(order);
    cand.truncate(k);
    Ok(Ranked {
        items: cand.into_iter().map(|(_, i)| i).collect(),
        truncated,
    })
}

fn hits(ranked: &[u32], relevant: &HashSet<u32>, k: usize) -> usize {
    ranked.iter().take(k).filter(|i| relevant.contains(i)).count()
}

pub fn ndcg_at_k(ranked: &[u32], relevant: &HashSet<u32>, k: usize) -> f64 {
    if relevant.is_empty() || k == 0 {
        return 0.0;
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(j, _)| 1.0 / (j as f64 + 2.0).log2())
        .fold(0.0, |a, b| a + b);
    let idcg: f64 = (0..k.min(relevant.len())).map(|j| 1.0 / (j as f64 + 2.0).log2()).sum();
    dcg / idcg
}

pub fn hr_at_k(ranked: &[u32], relevant: &HashSet<u32>, k: usize) -> f64 {
    if hits(ranked, relevant, k) > 0 {
        1.0
    } else {
        0.0
    }
}

pub fn precision_at_k(ranked: &[u32], relevant: &HashSet<u32>, k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    hits(ranked, relevant, k) as f64 / k as f64
}

pub fn recall_at_k(ranked: &[u32], relevant: &HashSet<u32>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    hits(ranked, relevant, k) as f64 / relevant.len() as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub ndcg: f64,
    pub hr: f64,
    pub precision: f64,
    pub recall: f64,
}

pub const RANKING_SCHEMA: &str = "recunlearn.ranking/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub schema: String,
    pub at: BTreeMap<usize, MetricValues>,
    pub evaluated_user_count: usize,
}

impl RankingReport {
    pub fn get(&self, k: usize) -> Option<&MetricValues> {
        self.at.get(&k)
    }

    /// Long format: `metric,k,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,k,value\n");
        for (k, m) in &self.at {
            for (name, v) in [("ndcg", m.ndcg), ("hr", m.hr), ("precision", m.precision), ("recall", m.recall)] {
                let _ = writeln!(out, "{name},{k},{v}");
            }
        }
        out
    }
}

/// Users with at least one train and one test interaction, minus `exclude`.
pub fn rankable_users(train: &InteractionSet, test: &InteractionSet, exclude: &HashSet<u32>) -> Vec<u32> {
    (0..train.num_users() as u32)
        .filter(|u| !exclude.contains(u) && train.user_degree(*u) > 0 && test.user_degree(*u) > 0)
        .collect()
}

/// Mean metrics over `users`, relevance = membership in the user's test
/// interactions, candidates = items outside the user's train interactions.
pub fn evaluate_ranking(params: &ModelParams, train: &InteractionSet, test: &InteractionSet, users: &[u32], ks: &[usize]) -> Result<RankingReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("K values must be >= 1".into()));
    }
    params.check_compatible(train)?;
    params.check_compatible(test)?;
    let kmax = *ks.iter().max().unwrap();
    let per_user: Vec<Vec<MetricValues>> = users
        .par_iter()
        .map(|&u| {
            let ranked = rank_items(params, train, u, kmax)?.items;
            let relevant: HashSet<u32> = test.user_interactions(u).map(|z| z.item).collect();
            Ok(ks
                .iter()
                .map(|&k| MetricValues {
                    ndcg: ndcg_at_k(&ranked, &relevant, k),
                    hr: hr_at_k(&ranked, &relevant, k),
                    precision: precision_at_k(&ranked, &relevant, k),
                    recall: recall_at_k(&ranked, &relevant, k),
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let n = per_user.len().max(1) as f64;
    let mut at = BTreeMap::new();
    for (j, &k) in ks.iter().enumerate() {
        let mut m = MetricValues::default();
        for row in &per_user {
            m.ndcg += row[j].ndcg;
            m.hr += row[j].hr;
            m.precision += row[j].precision;
            m.recall += row[j].recall;
        }
        m.ndcg /= n;
        m.hr /= n;
        m.precision /= n;
        m.recall /= n;
        at.insert(k, m);
    }
    Ok(RankingReport {
        schema: RANKING_SCHEMA.to_string(),
        at,
        evaluated_user_count: users.len(),
    })
}

fn centered(x: ArrayView2<f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).expect("non-empty rows");
    &x - &mean
}

/// ‖YᵀX‖²_F / (‖XᵀX‖_F ‖YᵀY‖_F) on column-centered inputs; 0 when either
/// input centers to zero.
pub fn linear_cka(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: y.nrows(),
        });
    }
    if x.nrows() < 2 {
        return Err(Error::Degenerate("CKA needs at least two rows".into()));
    }
    let (xc, yc) = (centered(x), centered(y));
    let fro2 = |m: Array2<f64>| m.iter().map(|v| v * v).sum::<f64>();
    let cross = fro2(yc.t().dot(&xc));
    let xx = fro2(xc.t().dot(&xc)).sqrt();
    let yy = fro2(yc.t().dot(&yc)).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Ok(0.0);
    }
    Ok((cross / (xx * yy)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CkaBlock {
    #[serde(rename = "UE_unlearn")]
    UeUnlearn,
    #[serde(rename = "UE_remain")]
    UeRemain,
    #[serde(rename = "item_emb")]
    ItemEmb,
}

impl CkaBlock {
    pub const ALL: [CkaBlock; 3] = [CkaBlock::UeUnlearn, CkaBlock::UeRemain, CkaBlock::ItemEmb];

    pub fn name(self) -> &'static str {
        match self {
            CkaBlock::UeUnlearn => "UE_unlearn",
            CkaBlock::UeRemain => "UE_remain",
            CkaBlock::ItemEmb => "item_emb",
        }
    }

    fn view(self, params: &ModelParams, users: &[u32]) -> Array2<f64> {
        match self {
            CkaBlock::UeUnlearn | CkaBlock::UeRemain => select_rows(&params.user_emb, users),
            CkaBlock::ItemEmb => params.item_emb.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeCka {
    /// Mean CKA to the originals over the mean pairwise CKA among them.
    pub relative: f64,
    /// CKA to the first original only, over the same denominator.
    pub relative_single: f64,
    pub numerator: f64,
    pub denominator: f64,
}

/// Relative CKA of one block. `users` selects the user rows for the user
/// blocks and is ignored for items.
pub fn relative_cka(originals: &[ModelParams], unlearned: &ModelParams, block: CkaBlock, users: &[u32]) -> Result<RelativeCka> {
    if originals.len() < 2 {
        return Err(Error::Config("relative CKA needs at least two original models".into()));
    }
    if originals.iter().any(|o| !o.same_shape(unlearned)) {
        return Err(Error::Config("all models must share one shape".into()));
    }
    let views: Vec<Array2<f64>> = originals.iter().map(|o| block.view(o, users)).collect();
    let target = block.view(unlearned, users);
    let to_target: Vec<f64> = views.iter().map(|v| linear_cka(v.view(), target.view())).collect::<Result<_>>()?;
    let mut pairs = Vec::new();
    for a in 0..views.len() {
        for b in a + 1..views.len() {
            pairs.push(linear_cka(views[a].view(), views[b].view())?);
        }
    }
    let denominator = pairs.iter().sum::<f64>() / pairs.len() as f64;
    if denominator == 0.0 {
        return Err(Error::Degenerate(format!("{} has zero pairwise CKA among the originals", block.name())));
    }
    let numerator = to_target.iter().sum::<f64>() / to_target.len() as f64;
    Ok(RelativeCka {
        relative: numerator / denominator,
        relative_single: to_target[0] / denominator,
        numerator,
        denominator,
    })
}
