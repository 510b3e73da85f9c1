//! Matrix-factorization recommender with analytic derivatives.
//!
//! A rating is scored as the inner product of a user row `p_u` and an item
//! row `q_i`. The training objective over a data set `D` is
//!
//! ```text
//! J(θ; D) = Σ_{z ∈ D} ½ (p_u·q_i − r_z)²  +  (λ/2) (‖P‖² + ‖Q‖²)
//! ```
//!
//! i.e. squared error plus an L2 penalty on every embedding row, whether or
//! not the row has data. Removing all of a user's ratings therefore leaves
//! the penalty on `p_u` in place, which is what lets second-order updates
//! pull a withdrawn user's row back toward the origin.
//!
//! [`ModelParams::point_loss`] is the loss of a single interaction together
//! with the penalty on the two rows it touches, and
//! [`ModelParams::total_loss`] sums it over a data set; with this
//! per-occurrence penalty a row's effective regularization grows with its
//! degree. Both are reported; training descends [`ModelParams::objective`].

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Interaction, InteractionSet};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelHyper {
    pub embed_dim: usize,
    pub learning_rate: f64,
    pub reg_lambda: f64,
    pub epochs: usize,
    pub init_std: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ModelHyper {
    fn default() -> Self {
        ModelHyper {
            embed_dim: 64,
            learning_rate: 0.001,
            reg_lambda: 0.01,
            epochs: 50,
            init_std: 0.01,
            batch_size: 256,
            seed: 0,
        }
    }
}

impl ModelHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.embed_dim == 0 {
            return bad("embed_dim must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(self.reg_lambda >= 0.0) {
            return bad("reg_lambda must be >= 0");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub user_emb: Array2<f64>,
    pub item_emb: Array2<f64>,
    pub hyper: ModelHyper,
}

/// Gradient of a single-interaction loss: only two rows are non-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PointGrad {
    pub user: u32,
    pub item: u32,
    pub d_user: Vec<f64>,
    pub d_item: Vec<f64>,
}

fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Draw every entry i.i.d. from N(0, init_std²) using the hyper seed.
pub fn init_params(num_users: usize, num_items: usize, hyper: &ModelHyper) -> Result<ModelParams> {
    hyper.validate()?;
    if num_users == 0 || num_items == 0 {
        return Err(Error::Config("a model needs at least one user and one item".into()));
    }
    let mut rng = seed::rng(seed::derive_seed(hyper.seed, "init"));
    let normal = Normal::new(0.0, hyper.init_std).map_err(|e| Error::Config(e.to_string()))?;
    let d = hyper.embed_dim;
    let user_emb = Array2::from_shape_simple_fn((num_users, d), || normal.sample(&mut rng));
    let item_emb = Array2::from_shape_simple_fn((num_items, d), || normal.sample(&mut rng));
    Ok(ModelParams {
        user_emb,
        item_emb,
        hyper: *hyper,
    })
}

impl ModelParams {
    pub fn num_users(&self) -> usize {
        self.user_emb.nrows()
    }

    pub fn num_items(&self) -> usize {
        self.item_emb.nrows()
    }

    pub fn dim(&self) -> usize {
        self.user_emb.ncols()
    }

    pub fn lambda(&self) -> f64 {
        self.hyper.reg_lambda
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.user_emb.len() + self.item_emb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn user_row(&self, u: u32) -> ArrayView1<'_, f64> {
        self.user_emb.row(u as usize)
    }

    pub fn item_row(&self, i: u32) -> ArrayView1<'_, f64> {
        self.item_emb.row(i as usize)
    }

    /// Inner product of the user's and the item's rows.
    pub fn predict(&self, user: u32, item: u32) -> Result<f64> {
        if user as usize >= self.num_users() || item as usize >= self.num_items() {
            return Err(Error::OutOfRange(format!(
                "({user}, {item}) for a {}x{} model",
                self.num_users(),
                self.num_items()
            )));
        }
        Ok(self.score(user, item))
    }

    /// Unchecked [`ModelParams::predict`].
    #[inline]
    pub fn score(&self, user: u32, item: u32) -> f64 {
        dot(self.user_row(user), self.item_row(item))
    }

    #[inline]
    pub fn residual(&self, z: &Interaction) -> f64 {
        self.score(z.user, z.item) - z.rating
    }

    /// ½e² + (λ/2)(‖p_u‖² + ‖q_i‖²).
    pub fn point_loss(&self, z: &Interaction) -> f64 {
        let e = self.residual(z);
        let p = self.user_row(z.user);
        let q = self.item_row(z.item);
        0.5 * e * e + 0.5 * self.lambda() * (dot(p, p) + dot(q, q))
    }

    /// Squared-error part of the loss only.
    pub fn fit_loss(&self, z: &Interaction) -> f64 {
        let e = self.residual(z);
        0.5 * e * e
    }

    /// Sum of [`ModelParams::point_loss`] over `data`.
    pub fn total_loss(&self, data: &InteractionSet) -> f64 {
        data.interactions().iter().map(|z| self.point_loss(z)).sum()
    }

    /// The training objective J(θ; data).
    pub fn objective(&self, data: &InteractionSet) -> f64 {
        let fit: f64 = data.interactions().iter().map(|z| self.fit_loss(z)).sum();
        let sq = self.user_emb.iter().chain(self.item_emb.iter()).map(|x| x * x).sum::<f64>();
        fit + 0.5 * self.lambda() * sq
    }

    /// Gradient of [`ModelParams::point_loss`].
    pub fn grad_point(&self, z: &Interaction) -> PointGrad {
        let e = self.residual(z);
        let lambda = self.lambda();
        let p = self.user_row(z.user);
        let q = self.item_row(z.item);
        PointGrad {
            user: z.user,
            item: z.item,
            d_user: q.iter().zip(p.iter()).map(|(qk, pk)| e * qk + lambda * pk).collect(),
            d_item: p.iter().zip(q.iter()).map(|(pk, qk)| e * pk + lambda * qk).collect(),
        }
    }

    /// Gradient of [`ModelParams::fit_loss`]: (e·q_i, e·p_u).
    pub fn grad_fit(&self, z: &Interaction) -> PointGrad {
        let e = self.residual(z);
        PointGrad {
            user: z.user,
            item: z.item,
            d_user: self.item_row(z.item).iter().map(|qk| e * qk).collect(),
            d_item: self.user_row(z.user).iter().map(|pk| e * pk).collect(),
        }
    }

    /// ∇J(θ; data) as (user block, item block).
    pub fn objective_grad(&self, data: &InteractionSet) -> (Array2<f64>, Array2<f64>) {
        let lambda = self.lambda();
        let mut gu = &self.user_emb * lambda;
        let mut gi = &self.item_emb * lambda;
        for z in data.interactions() {
            let e = self.residual(z);
            let (u, i) = (z.user as usize, z.item as usize);
            for k in 0..self.dim() {
                gu[[u, k]] += e * self.item_emb[[i, k]];
                gi[[i, k]] += e * self.user_emb[[u, k]];
            }
        }
        (gu, gi)
    }

    /// Gradient of J(θ; data) with respect to one user row.
    pub fn objective_grad_user(&self, data: &InteractionSet, user: u32) -> Vec<f64> {
        let lambda = self.lambda();
        let mut g: Vec<f64> = self.user_row(user).iter().map(|p| lambda * p).collect();
        for z in data.user_interactions(user) {
            let e = self.residual(z);
            for (gk, qk) in g.iter_mut().zip(self.item_row(z.item).iter()) {
                *gk += e * qk;
            }
        }
        g
    }

    /// Second derivative of J(θ; data) with respect to `p_u`, items held
    /// fixed: Σ_{i ∈ items(u)} q_i q_iᵀ + λI.
    pub fn user_hessian_block(&self, data: &InteractionSet, user: u32) -> Array2<f64> {
        let d = self.dim();
        let mut h = Array2::<f64>::eye(d) * self.lambda();
        for z in data.user_interactions(user) {
            let q = self.item_row(z.item);
            for a in 0..d {
                for b in 0..d {
                    h[[a, b]] += q[a] * q[b];
                }
            }
        }
        h
    }

    /// Frobenius distance to another parameter set of the same shape.
    pub fn distance(&self, other: &ModelParams) -> f64 {
        let du = (&self.user_emb - &other.user_emb).mapv(|x| x * x).sum();
        let di = (&self.item_emb - &other.item_emb).mapv(|x| x * x).sum();
        (du + di).sqrt()
    }

    pub fn norm(&self) -> f64 {
        (self.user_emb.mapv(|x| x * x).sum() + self.item_emb.mapv(|x| x * x).sum()).sqrt()
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.user_emb.dim() == other.user_emb.dim() && self.item_emb.dim() == other.item_emb.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.user_emb.iter().chain(self.item_emb.iter()).all(|x| x.is_finite())
    }

    pub fn check_compatible(&self, data: &InteractionSet) -> Result<()> {
        if data.num_users() != self.num_users() || data.num_items() != self.num_items() {
            return Err(Error::InvalidData(format!(
                "data has {}x{} users x items, model has {}x{}",
                data.num_users(),
                data.num_items(),
                self.num_users(),
                self.num_items()
            )));
        }
        Ok(())
    }

    /// Write a self-describing JSON checkpoint, creating parent directories.
    /// Floats round-trip exactly.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ck = Checkpoint {
            schema: CHECKPOINT_SCHEMA.to_string(),
            num_users: self.num_users(),
            num_items: self.num_items(),
            embed_dim: self.dim(),
            hyper: self.hyper,
            user_emb: self.user_emb.iter().copied().collect(),
            item_emb: self.item_emb.iter().copied().collect(),
        };
        let text = serde_json::to_string(&ck)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.schema != CHECKPOINT_SCHEMA {
            return Err(Error::Serde(format!("unsupported checkpoint schema {:?}", ck.schema)));
        }
        let user_emb = Array2::from_shape_vec((ck.num_users, ck.embed_dim), ck.user_emb)
            .map_err(|e| Error::Serde(e.to_string()))?;
        let item_emb = Array2::from_shape_vec((ck.num_items, ck.embed_dim), ck.item_emb)
            .map_err(|e| Error::Serde(e.to_string()))?;
        Ok(ModelParams {
            user_emb,
            item_emb,
            hyper: ck.hyper,
        })
    }
}

pub const CHECKPOINT_SCHEMA: &str = "recunlearn.checkpoint/v1";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema: String,
    num_users: usize,
    num_items: usize,
    embed_dim: usize,
    hyper: ModelHyper,
    user_emb: Vec<f64>,
    item_emb: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub objective: f64,
    pub total_loss: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: ModelParams,
    /// Entry 0 is the initialization; entry k follows epoch k.
    pub history: Vec<EpochStats>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainOptions {
    /// Keep item rows fixed (the per-user ridge regime).
    pub freeze_items: bool,
}

/// Initialize from `hyper` and run mini-batch SGD on `data`.
pub fn train(data: &InteractionSet, hyper: &ModelHyper) -> Result<Trained> {
    let init = init_params(data.num_users(), data.num_items(), hyper)?;
    train_from(init, data, hyper.epochs, TrainOptions::default())
}

/// Run `epochs` passes of mini-batch SGD on J(θ; data) starting at `params`.
///
/// Each batch takes the summed gradient of its interactions plus the share
/// `|B|/n` of the penalty gradient, so one epoch applies the full objective
/// gradient once. Shuffling is seeded from `params.hyper.seed`.
pub fn train_from(
    mut params: ModelParams,
    data: &InteractionSet,
    epochs: usize,
    opts: TrainOptions,
) -> Result<Trained> {
    let hyper = params.hyper;
    hyper.validate()?;
    params.check_compatible(data)?;
    if data.is_empty() {
        return Err(Error::InvalidData("cannot train on an empty interaction set".into()));
    }
    let d = params.dim();
    let n = data.len();
    let lr = hyper.learning_rate;
    let lambda = hyper.reg_lambda;
    let mut rng = seed::rng(seed::derive_seed(hyper.seed, "shuffle"));
    let mut order: Vec<usize> = (0..n).collect();

    let mut gu = Array2::<f64>::zeros((params.num_users(), d));
    let mut gi = Array2::<f64>::zeros((params.num_items(), d));
    let mut touched_users: Vec<usize> = Vec::new();
    let mut touched_items: Vec<usize> = Vec::new();

    let mut history = vec![EpochStats {
        epoch: 0,
        objective: params.objective(data),
        total_loss: params.total_loss(data),
    }];

    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch_size) {
            for &pos in batch {
                let z = &data.interactions()[pos];
                let (u, i) = (z.user as usize, z.item as usize);
                let e = params.score(z.user, z.item) - z.rating;
                let p = params.user_emb.row(u);
                let q = params.item_emb.row(i);
                let mut gu_row = gu.row_mut(u);
                if gu_row.iter().all(|&x| x == 0.0) {
                    touched_users.push(u);
                }
                gu_row.iter_mut().zip(q.iter()).for_each(|(g, qk)| *g += e * qk);
                if !opts.freeze_items {
                    let mut gi_row = gi.row_mut(i);
                    if gi_row.iter().all(|&x| x == 0.0) {
                        touched_items.push(i);
                    }
                    gi_row.iter_mut().zip(p.iter()).for_each(|(g, pk)| *g += e * pk);
                }
            }
            let decay = 1.0 - lr * lambda * batch.len() as f64 / n as f64;
            if decay != 1.0 {
                params.user_emb.mapv_inplace(|x| x * decay);
                if !opts.freeze_items {
                    params.item_emb.mapv_inplace(|x| x * decay);
                }
            }
            for u in touched_users.drain(..) {
                let mut row = params.user_emb.row_mut(u);
                let mut g = gu.row_mut(u);
                row.iter_mut().zip(g.iter()).for_each(|(x, gk)| *x -= lr * gk);
                g.fill(0.0);
            }
            for i in touched_items.drain(..) {
                let mut row = params.item_emb.row_mut(i);
                let mut g = gi.row_mut(i);
                row.iter_mut().zip(g.iter()).for_each(|(x, gk)| *x -= lr * gk);
                g.fill(0.0);
            }
        }
        let objective = params.objective(data);
        if !objective.is_finite() {
            return Err(Error::Divergence { epoch, value: objective });
        }
        history.push(EpochStats {
            epoch,
            objective,
            total_loss: params.total_loss(data),
        });
    }
    Ok(Trained { params, history })
}

/// Column means of the item rows in `items`; `None` when empty.
pub fn mean_item_row(params: &ModelParams, items: impl IntoIterator<Item = u32>) -> Option<Vec<f64>> {
    let mut acc = vec![0.0; params.dim()];
    let mut n = 0usize;
    for i in items {
        acc.iter_mut()
            .zip(params.item_row(i).iter())
            .for_each(|(a, q)| *a += q);
        n += 1;
    }
    (n > 0).then(|| acc.into_iter().map(|a| a / n as f64).collect())
}

/// Rows of `m` selected by `rows`, in order.
pub fn select_rows(m: &Array2<f64>, rows: &[u32]) -> Array2<f64> {
    let idx: Vec<usize> = rows.iter().map(|&r| r as usize).collect();
    m.select(Axis(0), &idx)
}
