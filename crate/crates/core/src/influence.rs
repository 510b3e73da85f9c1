//! Influence-function updates for removal and replacement of interactions.
//!
//! Both estimators take one Newton step on the objective the model would
//! have been trained on after the request:
//!
//! * removal (IF): the retained set `train \ E`;
//! * replacement (CIF): the retained set plus, for every withdrawn point `z`,
//!   a surrogate `z̄` with the same (user, item) pair and a collaborative
//!   rating.
//!
//! With `H` the Hessian of the target set's squared-error term at θ and
//! `g = ∇J(train)(θ)`, the stored delta `x` solves
//!
//! ```text
//! (H + damping·I) x = Σ_{z∈E} ∇f(z)                      (IF)
//! (H + damping·I) x = Σ_{z∈E} [∇f(z) − ∇f(z̄)]            (CIF)
//! ```
//!
//! minus `g` on the right when compensation is on, where `f` is the
//! squared-error part of the loss. At a minimizer of the training objective
//! `g = 0`; after finite SGD it is not, and subtracting it makes the step
//! a Newton step on the target objective from the current θ. The ridge
//! penalty contributes curvature `λI`, so `damping = reg_lambda` makes the
//! step exact; other values shrink or stretch it. [`apply_update`] adds `x`.
//! `hvp` and the solver therefore never read `reg_lambda` themselves.
//!
//! The full scope solves jointly over every user and item row. The
//! selected-users scope holds items and all other users fixed and solves one
//! `embed_dim`-sized system per withdrawn user, in parallel.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Interaction, InteractionSet};
use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub damping: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub use_compensation: bool,
    pub curvature: Curvature,
}

/// Which second-order term the solve uses.
///
/// The exact Hessian of matrix factorization carries residual-weighted
/// cross terms `e·I` between a user row and an item row and is indefinite
/// away from a minimizer. Gauss-Newton drops them and is positive
/// semi-definite everywhere. The two coincide on the selected scope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Curvature {
    #[default]
    Exact,
    GaussNewton,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            damping: 0.01,
            cg_tol: 1e-6,
            cg_max_iter: 100,
            use_compensation: true,
            curvature: Curvature::Exact,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping >= 0.0) || !self.damping.is_finite() {
            return Err(Error::Config("damping must be finite and >= 0".into()));
        }
        if !(self.cg_tol > 0.0) {
            return Err(Error::Config("cg_tol must be > 0".into()));
        }
        if self.cg_max_iter == 0 {
            return Err(Error::Config("cg_max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Full,
    SelectedUsers,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Full => "full",
            Scope::SelectedUsers => "selected_users",
        })
    }
}

/// One embedding row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "snake_case")]
pub enum Block {
    User(u32),
    Item(u32),
}

/// Which rows a flattened parameter vector covers, and in what order.
///
/// Full: all user rows by id, then all item rows by id. Selected: the listed
/// users' rows in ascending id order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    scope: Scope,
    users: Vec<u32>,
    num_users: usize,
    num_items: usize,
    dim: usize,
}

impl Layout {
    pub fn full(params: &ModelParams) -> Self {
        Layout {
            scope: Scope::Full,
            users: Vec::new(),
            num_users: params.num_users(),
            num_items: params.num_items(),
            dim: params.dim(),
        }
    }

    pub fn selected(params: &ModelParams, users: impl IntoIterator<Item = u32>) -> Result<Self> {
        let mut users: Vec<u32> = users.into_iter().collect();
        users.sort_unstable();
        users.dedup();
        if let Some(&u) = users.iter().find(|&&u| u as usize >= params.num_users()) {
            return Err(Error::OutOfRange(format!("user {u} of {}", params.num_users())));
        }
        Ok(Layout {
            scope: Scope::SelectedUsers,
            users,
            num_users: params.num_users(),
            num_items: params.num_items(),
            dim: params.dim(),
        })
    }

    /// Layout for `scope` covering the users that appear in `points`.
    pub fn for_points(params: &ModelParams, scope: Scope, points: &[Interaction]) -> Result<Self> {
        match scope {
            Scope::Full => Ok(Layout::full(params)),
            Scope::SelectedUsers => Layout::selected(params, points.iter().map(|z| z.user)),
        }
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }

    pub fn users(&self) -> &[u32] {
        &self.users
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_blocks(&self) -> usize {
        match self.scope {
            Scope::Full => self.num_users + self.num_items,
            Scope::SelectedUsers => self.users.len(),
        }
    }

    /// Length of a flattened vector over this layout.
    pub fn len(&self) -> usize {
        self.num_blocks() * self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block(&self, slot: usize) -> Block {
        match self.scope {
            Scope::Full if slot < self.num_users => Block::User(slot as u32),
            Scope::Full => Block::Item((slot - self.num_users) as u32),
            Scope::SelectedUsers => Block::User(self.users[slot]),
        }
    }

    /// Slot of a block in the flattened order, if covered.
    pub fn slot(&self, block: Block) -> Option<usize> {
        match (self.scope, block) {
            (Scope::Full, Block::User(u)) => ((u as usize) < self.num_users).then_some(u as usize),
            (Scope::Full, Block::Item(i)) => {
                ((i as usize) < self.num_items).then_some(self.num_users + i as usize)
            }
            (Scope::SelectedUsers, Block::User(u)) => self.users.binary_search(&u).ok(),
            (Scope::SelectedUsers, Block::Item(_)) => None,
        }
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: v.len(),
            });
        }
        Ok(())
    }

    /// Add a point gradient into a flattened vector, skipping uncovered rows.
    fn scatter(&self, out: &mut [f64], user: u32, d_user: &[f64], item: u32, d_item: &[f64], sign: f64) {
        let d = self.dim;
        if let Some(s) = self.slot(Block::User(user)) {
            out[s * d..(s + 1) * d].iter_mut().zip(d_user).for_each(|(o, g)| *o += sign * g);
        }
        if let Some(s) = self.slot(Block::Item(item)) {
            out[s * d..(s + 1) * d].iter_mut().zip(d_item).for_each(|(o, g)| *o += sign * g);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Where a surrogate rating came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateSource {
    UserAverage,
    ItemAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateInteraction {
    pub base: Interaction,
    pub surrogate_rating: f64,
    pub source: SurrogateSource,
}

impl SurrogateInteraction {
    pub fn as_interaction(&self) -> Interaction {
        Interaction::new(self.base.user, self.base.item, self.surrogate_rating)
    }
}

/// Per-user and per-item rating sums over `train \ E`.
#[derive(Debug, Clone)]
pub struct SurrogateBuilder {
    user_sums: Vec<(f64, usize)>,
    item_sums: Vec<(f64, usize)>,
}

impl SurrogateBuilder {
    pub fn new(train: &InteractionSet, removed: &[Interaction]) -> Self {
        let mut user_sums = vec![(0.0, 0usize); train.num_users()];
        let mut item_sums = vec![(0.0, 0usize); train.num_items()];
        for z in train.without(removed).interactions() {
            let u = &mut user_sums[z.user as usize];
            u.0 += z.rating;
            u.1 += 1;
            let i = &mut item_sums[z.item as usize];
            i.0 += z.rating;
            i.1 += 1;
        }
        SurrogateBuilder { user_sums, item_sums }
    }

    /// The user's mean remaining rating, or the item's when the user keeps
    /// none.
    pub fn build(&self, z: &Interaction) -> Result<SurrogateInteraction> {
        let lookup = |sums: &[(f64, usize)], k: u32| sums.get(k as usize).filter(|s| s.1 > 0).map(|s| s.0 / s.1 as f64);
        let (rating, source) = match lookup(&self.user_sums, z.user) {
            Some(r) => (r, SurrogateSource::UserAverage),
            None => match lookup(&self.item_sums, z.item) {
                Some(r) => (r, SurrogateSource::ItemAverage),
                None => {
                    return Err(Error::NoCollaborativeSignal {
                        user: z.user,
                        item: z.item,
                    })
                }
            },
        };
        Ok(SurrogateInteraction {
            base: *z,
            surrogate_rating: rating,
            source,
        })
    }

    /// One entry per point; `None` where neither average exists, in which
    /// case the point is simply removed.
    pub fn build_all(&self, removed: &[Interaction]) -> Vec<Option<SurrogateInteraction>> {
        removed.iter().map(|z| self.build(z).ok()).collect()
    }
}

/// Surrogate for `z ∈ E ⊆ train`.
pub fn build_surrogate(train: &InteractionSet, removed: &[Interaction], z: &Interaction) -> Result<SurrogateInteraction> {
    SurrogateBuilder::new(train, removed).build(z)
}

/// The Hessian of the squared-error sum over `data` plus `damping·I`,
/// restricted to a layout.
struct HessianOp<'a> {
    params: &'a ModelParams,
    data: &'a InteractionSet,
    layout: &'a Layout,
    residuals: Vec<f64>,
    shift: f64,
}

impl<'a> HessianOp<'a> {
    fn new(params: &'a ModelParams, data: &'a InteractionSet, layout: &'a Layout, damping: f64, curvature: Curvature) -> Self {
        let residuals = match (layout.scope, curvature) {
            (Scope::Full, Curvature::Exact) => data.interactions().iter().map(|z| params.residual(z)).collect(),
            (Scope::Full, Curvature::GaussNewton) => vec![0.0; data.len()],
            (Scope::SelectedUsers, _) => Vec::new(),
        };
        HessianOp {
            params,
            data,
            layout,
            residuals,
            shift: damping,
        }
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let d = self.layout.dim;
        let mut out = vec![0.0; v.len()];
        match self.layout.scope {
            Scope::SelectedUsers => {
                out.par_chunks_mut(d).enumerate().for_each(|(slot, o)| {
                    let u = self.layout.users[slot];
                    let vu = &v[slot * d..(slot + 1) * d];
                    self.user_block_apply(u, vu, o);
                });
            }
            Scope::Full => {
                let nu = self.layout.num_users;
                let (users_out, items_out) = out.split_at_mut(nu * d);
                let p = self.params.user_emb.as_slice().expect("standard layout");
                let q = self.params.item_emb.as_slice().expect("standard layout");
                let row = |m: &'a [f64], k: usize| &m[k * d..(k + 1) * d];
                users_out.par_chunks_mut(d).enumerate().for_each(|(u, o)| {
                    let vp = &v[u * d..(u + 1) * d];
                    let pu = row(p, u);
                    for &pos in self.data.user_positions(u as u32) {
                        let z = &self.data.interactions()[pos];
                        let i = z.item as usize;
                        let qi = row(q, i);
                        let vq = &v[(nu + i) * d..(nu + i + 1) * d];
                        let c = dot(qi, vp) + dot(pu, vq);
                        let e = self.residuals[pos];
                        for k in 0..d {
                            o[k] += c * qi[k] + e * vq[k];
                        }
                    }
                    for k in 0..d {
                        o[k] += self.shift * vp[k];
                    }
                });
                items_out.par_chunks_mut(d).enumerate().for_each(|(i, o)| {
                    let vq = &v[(nu + i) * d..(nu + i + 1) * d];
                    let qi = row(q, i);
                    for &pos in self.data.item_positions(i as u32) {
                        let z = &self.data.interactions()[pos];
                        let u = z.user as usize;
                        let pu = row(p, u);
                        let vp = &v[u * d..(u + 1) * d];
                        let c = dot(pu, vq) + dot(qi, vp);
                        let e = self.residuals[pos];
                        for k in 0..d {
                            o[k] += c * pu[k] + e * vp[k];
                        }
                    }
                    for k in 0..d {
                        o[k] += self.shift * vq[k];
                    }
                });
            }
        }
        out
    }

    /// (Σ_{i ∈ items(u)} q_i q_iᵀ + shift·I) v.
    fn user_block_apply(&self, u: u32, v: &[f64], out: &mut [f64]) {
        for z in self.data.user_interactions(u) {
            let q = self.params.item_row(z.item);
            let c: f64 = q.iter().zip(v).map(|(a, b)| a * b).sum();
            out.iter_mut().zip(q.iter()).for_each(|(o, qk)| *o += c * qk);
        }
        out.iter_mut().zip(v).for_each(|(o, vk)| *o += self.shift * vk);
    }
}

/// (H + damping·I) v, with H the Hessian of Σ_{z∈data} ½(p_u·q_i − r)² over
/// the layout's rows (its user-block diagonal for the selected scope).
pub fn hvp(params: &ModelParams, data: &InteractionSet, layout: &Layout, v: &[f64], damping: f64) -> Result<Vec<f64>> {
    hvp_with(params, data, layout, v, damping, Curvature::Exact)
}

/// [`hvp`] with a choice of curvature.
pub fn hvp_with(params: &ModelParams, data: &InteractionSet, layout: &Layout, v: &[f64], damping: f64, curvature: Curvature) -> Result<Vec<f64>> {
    layout.check(v)?;
    params.check_compatible(data)?;
    Ok(HessianOp::new(params, data, layout, damping, curvature).apply(v))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgOutcome {
    pub solution: Vec<f64>,
    /// ‖A x − b‖ / ‖b‖ of the returned iterate, recomputed directly.
    pub residual: f64,
    pub iters: usize,
    pub converged: bool,
}

/// Conjugate gradients for a symmetric positive-definite operator.
///
/// Stops once the relative residual drops to `cg_tol` or after
/// `cg_max_iter` steps, returning the iterate with the smallest residual.
pub fn cg_solve(mut op: impl FnMut(&[f64]) -> Vec<f64>, rhs: &[f64], config: &SolverConfig) -> Result<CgOutcome> {
    config.validate()?;
    let n = rhs.len();
    let bnorm = norm(rhs);
    if !bnorm.is_finite() {
        return Err(Error::NonFinite { iteration: 0 });
    }
    if bnorm == 0.0 {
        return Ok(CgOutcome {
            solution: vec![0.0; n],
            residual: 0.0,
            iters: 0,
            converged: true,
        });
    }
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    let mut best = (x.clone(), 1.0);
    let mut iters = 0;
    let mut converged = false;
    for k in 1..=config.cg_max_iter {
        iters = k;
        let ap = op(&p);
        if ap.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: ap.len() });
        }
        let curvature = dot(&p, &ap);
        if !curvature.is_finite() {
            return Err(Error::NonFinite { iteration: k });
        }
        if curvature <= 0.0 {
            return Err(Error::NotPositiveDefinite { iteration: k, curvature });
        }
        let alpha = rs / curvature;
        for j in 0..n {
            x[j] += alpha * p[j];
            r[j] -= alpha * ap[j];
        }
        let rs_new = dot(&r, &r);
        if !rs_new.is_finite() {
            return Err(Error::NonFinite { iteration: k });
        }
        let rel = rs_new.sqrt() / bnorm;
        if rel < best.1 {
            best = (x.clone(), rel);
        }
        if rel <= config.cg_tol {
            converged = true;
            break;
        }
        let beta = rs_new / rs;
        rs = rs_new;
        for j in 0..n {
            p[j] = r[j] + beta * p[j];
        }
    }
    let solution = best.0;
    let ax = op(&solution);
    let true_res = norm(&rhs.iter().zip(&ax).map(|(b, a)| b - a).collect::<Vec<_>>()) / bnorm;
    if !converged {
        log::warn!("conjugate gradients stopped after {iters} iterations at relative residual {true_res:.3e}");
    }
    Ok(CgOutcome {
        solution,
        residual: true_res,
        iters,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceEstimate {
    pub scope: Scope,
    pub deltas: BTreeMap<Block, Vec<f64>>,
    pub cg_residual: f64,
    pub cg_iters: usize,
    pub converged: bool,
    pub damping: f64,
    /// ‖g‖ over the scope, 0 when compensation is off.
    pub compensation_norm: f64,
    pub rhs_norm: f64,
    /// Points that had no surrogate and were removed instead.
    pub degraded_points: usize,
}

impl InfluenceEstimate {
    pub fn zero(scope: Scope, damping: f64) -> Self {
        InfluenceEstimate {
            scope,
            deltas: BTreeMap::new(),
            cg_residual: 0.0,
            cg_iters: 0,
            converged: true,
            damping,
            compensation_norm: 0.0,
            rhs_norm: 0.0,
            degraded_points: 0,
        }
    }

    pub fn delta_norm(&self) -> f64 {
        self.deltas.values().map(|d| dot(d, d)).sum::<f64>().sqrt()
    }

    pub fn negated(&self) -> Self {
        let mut out = self.clone();
        out.deltas.values_mut().for_each(|d| d.iter_mut().for_each(|x| *x = -*x));
        out
    }

    pub fn report(&self) -> InfluenceReport {
        InfluenceReport {
            schema: INFLUENCE_SCHEMA.to_string(),
            scope: self.scope,
            damping: self.damping,
            cg_residual: self.cg_residual,
            cg_iters: self.cg_iters,
            converged: self.converged,
            compensation_norm: self.compensation_norm,
            rhs_norm: self.rhs_norm,
            delta_norm: self.delta_norm(),
            degraded_points: self.degraded_points,
            blocks: self
                .deltas
                .iter()
                .map(|(&block, d)| BlockNorm { block, norm: norm(d) })
                .collect(),
        }
    }
}

pub const INFLUENCE_SCHEMA: &str = "recunlearn.influence/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockNorm {
    pub block: Block,
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub schema: String,
    pub scope: Scope,
    pub damping: f64,
    pub cg_residual: f64,
    pub cg_iters: usize,
    pub converged: bool,
    pub compensation_norm: f64,
    pub rhs_norm: f64,
    pub delta_norm: f64,
    pub degraded_points: usize,
    pub blocks: Vec<BlockNorm>,
}

fn check_request(train: &InteractionSet, removed: &[Interaction]) -> Result<()> {
    if !train.covers(removed) {
        return Err(Error::Request("withdrawn points must be training interactions".into()));
    }
    Ok(())
}

/// Compensation g = ∇J(train)(θ) over the layout, or zeros.
fn compensation(params: &ModelParams, train: &InteractionSet, layout: &Layout) -> Vec<f64> {
    let d = layout.dim;
    match layout.scope {
        Scope::Full => {
            let (gu, gi) = params.objective_grad(train);
            gu.iter().chain(gi.iter()).copied().collect()
        }
        Scope::SelectedUsers => {
            let mut g = Vec::with_capacity(layout.len());
            for &u in &layout.users {
                g.extend(params.objective_grad_user(train, u));
            }
            debug_assert_eq!(g.len(), layout.users.len() * d);
            g
        }
    }
}

/// Solve (H(target) + damping·I) x = rhs over the layout.
fn solve(params: &ModelParams, target: &InteractionSet, layout: &Layout, rhs: &[f64], config: &SolverConfig) -> Result<(Vec<f64>, f64, usize, bool)> {
    let op = HessianOp::new(params, target, layout, config.damping, config.curvature);
    match layout.scope {
        Scope::Full => {
            let out = cg_solve(|v| op.apply(v), rhs, config)?;
            Ok((out.solution, out.residual, out.iters, out.converged))
        }
        Scope::SelectedUsers => {
            let d = layout.dim;
            let per_user: Vec<CgOutcome> = layout
                .users
                .par_iter()
                .enumerate()
                .map(|(slot, &u)| {
                    let b = &rhs[slot * d..(slot + 1) * d];
                    cg_solve(
                        |v| {
                            let mut o = vec![0.0; d];
                            op.user_block_apply(u, v, &mut o);
                            o
                        },
                        b,
                        config,
                    )
                })
                .collect::<Result<_>>()?;
            let mut x = Vec::with_capacity(rhs.len());
            let (mut res, mut iters, mut conv) = (0.0f64, 0usize, true);
            for o in per_user {
                x.extend(o.solution);
                res = res.max(o.residual);
                iters = iters.max(o.iters);
                conv &= o.converged;
            }
            Ok((x, res, iters, conv))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn package(layout: &Layout, x: Vec<f64>, res: f64, iters: usize, converged: bool, config: &SolverConfig, gnorm: f64, rhs_norm: f64, degraded: usize) -> Result<InfluenceEstimate> {
    if let Some(k) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { iteration: k });
    }
    let d = layout.dim;
    let deltas = x
        .chunks(d)
        .enumerate()
        .map(|(slot, c)| (layout.block(slot), c.to_vec()))
        .collect();
    Ok(InfluenceEstimate {
        scope: layout.scope,
        deltas,
        cg_residual: res,
        cg_iters: iters,
        converged,
        damping: config.damping,
        compensation_norm: gnorm,
        rhs_norm,
        degraded_points: degraded,
    })
}

/// Influence estimate for removing every point of `removed` from `train`.
pub fn influence_if(params: &ModelParams, train: &InteractionSet, removed: &[Interaction], scope: Scope, config: &SolverConfig) -> Result<InfluenceEstimate> {
    influence_cif(params, train, removed, &vec![None; removed.len()], scope, config)
}

/// Influence estimate for replacing each point of `removed` by its
/// surrogate; a `None` surrogate removes the point instead.
pub fn influence_cif(
    params: &ModelParams,
    train: &InteractionSet,
    removed: &[Interaction],
    surrogates: &[Option<SurrogateInteraction>],
    scope: Scope,
    config: &SolverConfig,
) -> Result<InfluenceEstimate> {
    config.validate()?;
    params.check_compatible(train)?;
    check_request(train, removed)?;
    if surrogates.len() != removed.len() {
        let z = removed.get(surrogates.len()).unwrap_or(&removed[0]);
        return Err(Error::MissingSurrogate { user: z.user, item: z.item });
    }
    for (z, s) in removed.iter().zip(surrogates) {
        if let Some(s) = s {
            if s.base.key() != z.key() || !s.surrogate_rating.is_finite() {
                return Err(Error::MissingSurrogate { user: z.user, item: z.item });
            }
        }
    }
    let layout = Layout::for_points(params, scope, removed)?;
    if removed.is_empty() {
        return Ok(InfluenceEstimate::zero(scope, config.damping));
    }

    let mut rhs = vec![0.0; layout.len()];
    let mut dropped = Vec::new();
    let mut replacements = Vec::new();
    for (z, s) in removed.iter().zip(surrogates) {
        let g = params.grad_fit(z);
        layout.scatter(&mut rhs, z.user, &g.d_user, z.item, &g.d_item, 1.0);
        match s {
            Some(s) => {
                let zb = s.as_interaction();
                let gb = params.grad_fit(&zb);
                layout.scatter(&mut rhs, zb.user, &gb.d_user, zb.item, &gb.d_item, -1.0);
                replacements.push(zb);
            }
            None => dropped.push(*z),
        }
    }
    let mut gnorm = 0.0;
    if config.use_compensation {
        let g = compensation(params, train, &layout);
        gnorm = norm(&g);
        rhs.iter_mut().zip(&g).for_each(|(r, gk)| *r -= gk);
    }
    let target = train.without(&dropped).with_replaced(&replacements)?;
    let rhs_norm = norm(&rhs);
    let (x, res, iters, conv) = solve(params, &target, &layout, &rhs, config)?;
    package(&layout, x, res, iters, conv, config, gnorm, rhs_norm, dropped.len())
}

/// Add each delta to its row. Rows without a delta are untouched.
pub fn apply_update(params: &ModelParams, estimate: &InfluenceEstimate) -> Result<ModelParams> {
    let mut out = params.clone();
    let d = params.dim();
    for (&block, delta) in &estimate.deltas {
        if delta.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: delta.len() });
        }
        let mut row = match block {
            Block::User(u) if (u as usize) < params.num_users() => out.user_emb.row_mut(u as usize),
            Block::Item(i) if (i as usize) < params.num_items() => out.item_emb.row_mut(i as usize),
            _ => return Err(Error::OutOfRange(format!("{block:?}"))),
        };
        row.iter_mut().zip(delta).for_each(|(x, dx)| *x += dx);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelHyper;
    use crate::seed;
    use nalgebra::{DMatrix, DVector};
    use ndarray::{array, Array2};
    use rand::Rng;

    fn params_from(p: Array2<f64>, q: Array2<f64>, lambda: f64) -> ModelParams {
        ModelParams {
            hyper: ModelHyper {
                embed_dim: p.ncols(),
                reg_lambda: lambda,
                ..Default::default()
            },
            user_emb: p,
            item_emb: q,
        }
    }

    fn random_params(users: usize, items: usize, d: usize, lambda: f64, seed: u64) -> ModelParams {
        let mut rng = seed::rng(seed);
        let p = Array2::from_shape_simple_fn((users, d), || rng.random_range(-1.0..1.0));
        let q = Array2::from_shape_simple_fn((items, d), || rng.random_range(-1.0..1.0));
        params_from(p, q, lambda)
    }

    fn random_data(users: usize, items: usize, density: f64, seed: u64) -> InteractionSet {
        let mut rng = seed::rng(seed);
        let mut z = Vec::new();
        for u in 0..users as u32 {
            for i in 0..items as u32 {
                if rng.random_bool(density) {
                    z.push(Interaction::new(u, i, rng.random_range(1..=5) as f64));
                }
            }
        }
        InteractionSet::new(z, users, items).unwrap()
    }

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seed::rng(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn flat_grad(params: &ModelParams, data: &InteractionSet) -> Vec<f64> {
        let (gu, gi) = params.objective_grad(data);
        gu.iter().chain(gi.iter()).copied().collect()
    }

    fn perturbed(params: &ModelParams, v: &[f64], h: f64) -> ModelParams {
        let mut out = params.clone();
        let nu = params.user_emb.len();
        out.user_emb.iter_mut().zip(&v[..nu]).for_each(|(x, d)| *x += h * d);
        out.item_emb.iter_mut().zip(&v[nu..]).for_each(|(x, d)| *x += h * d);
        out
    }

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        diff / norm(b).max(1e-300)
    }

    #[test]
    fn cg_scaled_identity_takes_one_step() {
        let cfg = SolverConfig::default();
        let b = vec![1.0, -2.0, 3.0];
        let out = cg_solve(|v| v.iter().map(|x| 1.01 * x).collect(), &b, &cfg).unwrap();
        assert_eq!(out.iters, 1);
        assert!(rel(&out.solution, &b.iter().map(|x| x / 1.01).collect::<Vec<_>>()) < 1e-12);
    }

    #[test]
    fn cg_diagonal_system() {
        let cfg = SolverConfig::default();
        let diag = [1.0, 2.0, 4.0];
        let out = cg_solve(|v| v.iter().zip(&diag).map(|(x, d)| x * d).collect(), &[1.0, 1.0, 1.0], &cfg).unwrap();
        assert!(out.iters <= 3 && out.converged);
        assert!(rel(&out.solution, &[1.0, 0.5, 0.25]) <= 1e-6);
    }

    #[test]
    fn cg_zero_rhs_returns_zero() {
        let out = cg_solve(|_| panic!("operator must not be called"), &[0.0; 4], &SolverConfig::default()).unwrap();
        assert_eq!(out.solution, vec![0.0; 4]);
        assert_eq!(out.iters, 0);
    }

    #[test]
    fn cg_signals_indefinite_and_nonfinite() {
        let cfg = SolverConfig::default();
        assert!(matches!(
            cg_solve(|v| v.iter().map(|x| -x).collect(), &[1.0], &cfg),
            Err(Error::NotPositiveDefinite { .. })
        ));
        assert!(matches!(
            cg_solve(|v| v.iter().map(|_| f64::NAN).collect(), &[1.0], &cfg),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn cg_flags_non_convergence() {
        let cfg = SolverConfig { cg_max_iter: 2, cg_tol: 1e-12, ..Default::default() };
        let diag: Vec<f64> = (1..=10).map(|k| k as f64).collect();
        let out = cg_solve(|v| v.iter().zip(&diag).map(|(x, d)| x * d).collect(), &[1.0; 10], &cfg).unwrap();
        assert!(!out.converged);
        assert_eq!(out.iters, 2);
        assert!(out.residual > 1e-12 && out.residual < 1.0);
    }

    #[test]
    fn cg_matches_dense_solve() {
        let mut rng = seed::rng(11);
        let n = 16;
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let a = &m * m.transpose() + DMatrix::identity(n, n) * 0.5;
        let b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let expect = a.clone().lu().solve(&b).unwrap();
        let out = cg_solve(|v| (&a * DVector::from_column_slice(v)).as_slice().to_vec(), b.as_slice(), &SolverConfig::default()).unwrap();
        assert!(rel(&out.solution, expect.as_slice()) <= 1e-5);
    }

    #[test]
    fn hvp_zero_and_empty_user() {
        let p = random_params(3, 3, 4, 0.0, 1);
        let data = InteractionSet::empty(3, 3);
        let layout = Layout::selected(&p, [1]).unwrap();
        assert_eq!(hvp(&p, &data, &layout, &[0.0; 4], 0.01).unwrap(), vec![0.0; 4]);
        let v = [1.0, -2.0, 0.5, 3.0];
        let out = hvp(&p, &data, &layout, &v, 0.01).unwrap();
        assert!(rel(&out, &v.map(|x| 0.01 * x)) < 1e-15);
        assert!(hvp(&p, &data, &layout, &[0.0; 3], 0.01).is_err());
    }

    #[test]
    fn full_hvp_matches_gradient_differences() {
        let p = random_params(6, 5, 3, 0.05, 2);
        let data = random_data(6, 5, 0.5, 3);
        let layout = Layout::full(&p);
        let h = 1e-5;
        for s in 0..5 {
            let v = random_vec(layout.len(), 100 + s);
            let got = hvp(&p, &data, &layout, &v, 0.01).unwrap();
            let gp = flat_grad(&perturbed(&p, &v, h), &data);
            let gm = flat_grad(&perturbed(&p, &v, -h), &data);
            // The objective gradient carries λv of ridge curvature; hvp swaps it for damping.
            let fd: Vec<f64> = gp.iter().zip(&gm).zip(&v).map(|((a, b), vk)| (a - b) / (2.0 * h) + (0.01 - 0.05) * vk).collect();
            assert!(rel(&got, &fd) <= 1e-4, "rel {}", rel(&got, &fd));
        }
    }

    #[test]
    fn gauss_newton_is_psd_and_agrees_on_selected_scope() {
        let p = random_params(5, 4, 3, 0.05, 12);
        let data = random_data(5, 4, 0.7, 13);
        let full = Layout::full(&p);
        for s in 0..10 {
            let v = random_vec(full.len(), 200 + s);
            let hv = hvp_with(&p, &data, &full, &v, 0.0, Curvature::GaussNewton).unwrap();
            assert!(dot(&v, &hv) >= -1e-12);
        }
        let sel = Layout::selected(&p, [0, 3]).unwrap();
        let v = random_vec(sel.len(), 300);
        assert_eq!(
            hvp_with(&p, &data, &sel, &v, 0.1, Curvature::GaussNewton).unwrap(),
            hvp(&p, &data, &sel, &v, 0.1).unwrap()
        );
    }

    #[test]
    fn selected_hvp_matches_user_hessian_block() {
        let p = random_params(6, 5, 3, 0.05, 4);
        let data = random_data(6, 5, 0.5, 5);
        let layout = Layout::selected(&p, [4, 1]).unwrap();
        let v = random_vec(6, 6);
        let got = hvp(&p, &data, &layout, &v, 0.02).unwrap();
        for (slot, u) in [1u32, 4].into_iter().enumerate() {
            let hb = p.user_hessian_block(&data, u);
            let vu = ndarray::Array1::from(v[slot * 3..slot * 3 + 3].to_vec());
            let expect = hb.dot(&vu) + &vu * (0.02 - 0.05);
            assert!(rel(&got[slot * 3..slot * 3 + 3], expect.as_slice().unwrap()) < 1e-12);
        }
    }

    #[test]
    fn surrogate_cases() {
        let train = InteractionSet::new(
            vec![
                Interaction::new(0, 0, 4.0),
                Interaction::new(0, 1, 5.0),
                Interaction::new(0, 2, 1.0),
                Interaction::new(1, 2, 2.0),
                Interaction::new(2, 3, 3.0),
            ],
            4,
            4,
        )
        .unwrap();
        let z = Interaction::new(0, 2, 1.0);
        let s = build_surrogate(&train, &[z], &z).unwrap();
        assert_eq!((s.surrogate_rating, s.source), (4.5, SurrogateSource::UserAverage));
        assert_eq!(s.base, z);

        let train = InteractionSet::new(
            vec![
                Interaction::new(0, 0, 5.0),
                Interaction::new(1, 0, 2.0),
                Interaction::new(2, 0, 4.0),
                Interaction::new(3, 1, 1.0),
            ],
            4,
            2,
        )
        .unwrap();
        let z = Interaction::new(0, 0, 5.0);
        let s = build_surrogate(&train, &[z], &z).unwrap();
        assert_eq!((s.surrogate_rating, s.source), (3.0, SurrogateSource::ItemAverage));

        let z = Interaction::new(3, 1, 1.0);
        assert!(matches!(build_surrogate(&train, &[z], &z), Err(Error::NoCollaborativeSignal { .. })));
    }

    #[test]
    fn perfectly_predicted_point_has_no_influence() {
        let p = params_from(array![[1.0, 1.0]], array![[1.0, 2.0]], 0.0);
        let train = InteractionSet::new(vec![Interaction::new(0, 0, 3.0)], 1, 1).unwrap();
        let cfg = SolverConfig { use_compensation: false, ..Default::default() };
        for scope in [Scope::Full, Scope::SelectedUsers] {
            let est = influence_if(&p, &train, train.interactions(), scope, &cfg).unwrap();
            assert!(est.deltas.values().flatten().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn self_replacement_has_no_influence() {
        let p = random_params(4, 4, 3, 0.1, 8);
        let train = random_data(4, 4, 0.7, 9);
        let e: Vec<Interaction> = train.user_interactions(train.interactions()[0].user).copied().collect();
        let s: Vec<_> = e
            .iter()
            .map(|z| Some(SurrogateInteraction { base: *z, surrogate_rating: z.rating, source: SurrogateSource::UserAverage }))
            .collect();
        let cfg = SolverConfig { use_compensation: false, ..Default::default() };
        for scope in [Scope::Full, Scope::SelectedUsers] {
            let est = influence_cif(&p, &train, &e, &s, scope, &cfg).unwrap();
            assert_eq!(est.delta_norm(), 0.0);
        }
    }

    #[test]
    fn scalar_replacement_matches_hand_derivative() {
        // One user, one item, items frozen: p* = r q / (q² + λ); replacing r
        // by r̄ moves it by (r̄ − r) q / (q² + λ).
        let (q, r, rbar, lambda) = (1.5, 4.0, 2.5, 0.2);
        let pstar = r * q / (q * q + lambda);
        let p = params_from(array![[pstar]], array![[q]], lambda);
        let train = InteractionSet::new(vec![Interaction::new(0, 0, r)], 1, 1).unwrap();
        let z = train.interactions()[0];
        let s = [Some(SurrogateInteraction { base: z, surrogate_rating: rbar, source: SurrogateSource::UserAverage })];
        for comp in [true, false] {
            let cfg = SolverConfig { damping: lambda, use_compensation: comp, ..Default::default() };
            let est = influence_cif(&p, &train, &[z], &s, Scope::SelectedUsers, &cfg).unwrap();
            let expect = (rbar - r) * q / (q * q + lambda);
            assert!((est.deltas[&Block::User(0)][0] - expect).abs() < 1e-12);
            assert!(est.compensation_norm < 1e-12);
        }
    }

    /// Per-user ridge minimizer with items fixed.
    fn ridge_users(q: &Array2<f64>, data: &InteractionSet, lambda: f64) -> Array2<f64> {
        let d = q.ncols();
        let mut p = Array2::zeros((data.num_users(), d));
        for u in 0..data.num_users() as u32 {
            let mut a = DMatrix::<f64>::identity(d, d) * lambda;
            let mut b = DVector::<f64>::zeros(d);
            for z in data.user_interactions(u) {
                let qi = DVector::from_iterator(d, q.row(z.item as usize).iter().copied());
                a += &qi * qi.transpose();
                b += &qi * z.rating;
            }
            let x = a.cholesky().unwrap().solve(&b);
            p.row_mut(u as usize).iter_mut().zip(x.iter()).for_each(|(o, v)| *o = *v);
        }
        p
    }

    fn ridge_instance(seed: u64, lambda: f64) -> (ModelParams, InteractionSet) {
        let train = random_data(20, 15, 0.5, seed);
        let q = random_params(1, 15, 8, lambda, seed + 1).item_emb;
        let p = ridge_users(&q, &train, lambda);
        (params_from(p, q, lambda), train)
    }

    fn rel_dist(a: &ModelParams, b: &ModelParams) -> f64 {
        a.distance(b) / b.norm()
    }

    #[test]
    fn removal_matches_ridge_leave_out() {
        let lambda = 0.1;
        let (p, train) = ridge_instance(21, lambda);
        let z = train.interactions()[7];
        let exact = params_from(ridge_users(&p.item_emb, &train.without(&[z]), lambda), p.item_emb.clone(), lambda);
        let cfg = SolverConfig { damping: lambda, cg_tol: 1e-12, ..Default::default() };
        let got = apply_update(&p, &influence_if(&p, &train, &[z], Scope::SelectedUsers, &cfg).unwrap()).unwrap();
        assert!(rel_dist(&got, &exact) < 1e-9, "{}", rel_dist(&got, &exact));
        // Less damping than the ridge overshoots; more undershoots.
        let moved = |damping: f64| {
            let cfg = SolverConfig { damping, ..cfg };
            apply_update(&p, &influence_if(&p, &train, &[z], Scope::SelectedUsers, &cfg).unwrap()).unwrap()
        };
        assert!(rel_dist(&moved(10.0 * lambda), &exact) > 1e-6);
        assert!(moved(10.0 * lambda).distance(&p) < got.distance(&p));
    }

    #[test]
    fn replacement_matches_ridge_replace_one() {
        let lambda = 0.1;
        let (p, train) = ridge_instance(31, lambda);
        let z = train.interactions()[3];
        let s = build_surrogate(&train, &[z], &z).unwrap();
        let replaced = train.with_replaced(&[s.as_interaction()]).unwrap();
        let exact = params_from(ridge_users(&p.item_emb, &replaced, lambda), p.item_emb.clone(), lambda);
        let cfg = SolverConfig { damping: lambda, cg_tol: 1e-12, ..Default::default() };
        let est = influence_cif(&p, &train, &[z], &[Some(s)], Scope::SelectedUsers, &cfg).unwrap();
        assert!(rel_dist(&apply_update(&p, &est).unwrap(), &exact) < 1e-9);
    }

    #[test]
    fn whole_user_removal_returns_row_to_prior() {
        let lambda = 0.1;
        let (p, train) = ridge_instance(41, lambda);
        let e: Vec<Interaction> = train.user_interactions(5).copied().collect();
        let cfg = SolverConfig { damping: lambda, ..Default::default() };
        let est = influence_if(&p, &train, &e, Scope::SelectedUsers, &cfg).unwrap();
        let after = apply_update(&p, &est).unwrap();
        assert!(after.user_row(5).iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn compensation_recovers_unconverged_start() {
        let lambda = 0.1;
        let (mut p, train) = ridge_instance(51, lambda);
        let z = train.interactions()[10];
        let exact = params_from(ridge_users(&p.item_emb, &train.without(&[z]), lambda), p.item_emb.clone(), lambda);
        p.user_emb.row_mut(z.user as usize).iter_mut().for_each(|x| *x *= 0.8);
        let solve = |comp| {
            let cfg = SolverConfig { damping: lambda, cg_tol: 1e-12, use_compensation: comp, ..Default::default() };
            apply_update(&p, &influence_if(&p, &train, &[z], Scope::SelectedUsers, &cfg).unwrap()).unwrap()
        };
        let on = solve(true);
        let off = solve(false);
        let row = |m: &ModelParams| m.user_row(z.user).to_vec();
        assert!(rel(&row(&on), &row(&exact)) < 1e-9);
        assert!(rel(&row(&off), &row(&exact)) > 1e-3);
    }

    #[test]
    fn full_scope_step_matches_dense_solve() {
        let train = random_data(6, 5, 0.6, 62);
        let hyper = ModelHyper { embed_dim: 3, learning_rate: 0.02, reg_lambda: 0.3, epochs: 3000, init_std: 0.3, batch_size: 64, seed: 61 };
        let p = crate::model::train(&train, &hyper).unwrap().params;
        let e = vec![train.interactions()[4]];
        let retained = train.without(&e);
        let cfg = SolverConfig { damping: 1.0, cg_tol: 1e-10, cg_max_iter: 500, ..Default::default() };
        let est = influence_if(&p, &train, &e, Scope::Full, &cfg).unwrap();
        let after = apply_update(&p, &est).unwrap();
        // Matrix of the operator assembled column by column, solved densely.
        let n = p.len();
        let layout = Layout::full(&p);
        let mut hm = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut ej = vec![0.0; n];
            ej[j] = 1.0;
            let col = hvp(&p, &retained, &layout, &ej, 1.0).unwrap();
            hm.set_column(j, &DVector::from_vec(col));
        }
        let g = DVector::from_vec(flat_grad(&p, &retained));
        let newton = hm.clone().lu().solve(&(-g)).unwrap();
        assert!((hm.clone() - hm.transpose()).abs().max() < 1e-12);
        let step: Vec<f64> = after.user_emb.iter().chain(after.item_emb.iter()).zip(p.user_emb.iter().chain(p.item_emb.iter())).map(|(a, b)| a - b).collect();
        assert!(rel(&step, newton.as_slice()) < 1e-8);
    }

    #[test]
    fn selected_scope_touches_only_withdrawn_users() {
        let p = random_params(8, 6, 4, 0.1, 71);
        let train = random_data(8, 6, 0.6, 72);
        let mut e: Vec<Interaction> = train.user_interactions(3).copied().collect();
        e.extend(train.user_interactions(6).take(1));
        let est = influence_if(&p, &train, &e, Scope::SelectedUsers, &SolverConfig::default()).unwrap();
        let keys: Vec<Block> = est.deltas.keys().copied().collect();
        assert_eq!(keys, vec![Block::User(3), Block::User(6)]);
        let after = apply_update(&p, &est).unwrap();
        for u in 0..8 {
            let same = after.user_row(u) == p.user_row(u);
            assert_eq!(same, u != 3 && u != 6);
        }
        assert_eq!(after.item_emb, p.item_emb);
    }

    #[test]
    fn apply_update_cases() {
        let p = random_params(3, 2, 2, 0.1, 81);
        let zero = InfluenceEstimate::zero(Scope::Full, 0.01);
        assert_eq!(apply_update(&p, &zero).unwrap(), p);

        let mut est = InfluenceEstimate::zero(Scope::SelectedUsers, 0.01);
        est.deltas.insert(Block::User(1), vec![0.25, -1.0]);
        let after = apply_update(&p, &est).unwrap();
        assert_eq!(after.user_emb[[1, 0]], p.user_emb[[1, 0]] + 0.25);
        assert_eq!(after.user_emb[[1, 1]], p.user_emb[[1, 1]] - 1.0);

        let back = apply_update(&after, &est.negated()).unwrap();
        assert!(back.distance(&p) <= 1e-15);

        est.deltas.insert(Block::Item(9), vec![0.0, 0.0]);
        assert!(apply_update(&p, &est).is_err());
    }

    #[test]
    fn requests_outside_train_are_rejected() {
        let p = random_params(2, 2, 2, 0.1, 91);
        let train = InteractionSet::new(vec![Interaction::new(0, 0, 3.0)], 2, 2).unwrap();
        let err = influence_if(&p, &train, &[Interaction::new(1, 1, 3.0)], Scope::Full, &SolverConfig::default());
        assert!(matches!(err, Err(Error::Request(_))));
    }

    #[test]
    fn report_serializes() {
        let p = random_params(4, 3, 2, 0.1, 5);
        let train = random_data(4, 3, 0.8, 6);
        let e: Vec<Interaction> = train.user_interactions(0).copied().collect();
        let est = influence_if(&p, &train, &e, Scope::SelectedUsers, &SolverConfig::default()).unwrap();
        let json = serde_json::to_string(&est.report()).unwrap();
        assert!(json.contains("\"schema\":\"recunlearn.influence/v1\""));
        assert!(json.contains("\"kind\":\"user\""));
        let back: InfluenceReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, est.report());
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn hvp_linear_and_symmetric(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
                let p = random_params(5, 4, 3, 0.05, seed);
                let data = random_data(5, 4, 0.6, seed ^ 7);
                for layout in [Layout::full(&p), Layout::selected(&p, [0, 2, 4]).unwrap()] {
                    let u = random_vec(layout.len(), seed ^ 1);
                    let v = random_vec(layout.len(), seed ^ 2);
                    let hu = hvp(&p, &data, &layout, &u, 0.01).unwrap();
                    let hv = hvp(&p, &data, &layout, &v, 0.01).unwrap();
                    let mix: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
                    let hmix = hvp(&p, &data, &layout, &mix, 0.01).unwrap();
                    let lin: Vec<f64> = hu.iter().zip(&hv).map(|(x, y)| a * x + b * y).collect();
                    prop_assert!(rel(&hmix, &lin) <= 1e-10 || norm(&lin) < 1e-12);
                    let (l, r) = (dot(&u, &hv), dot(&v, &hu));
                    prop_assert!((l - r).abs() <= 1e-10 * l.abs().max(r.abs()).max(1e-12));
                }
            }

            #[test]
            fn cg_terminates_within_dimension(seed in any::<u64>(), n in 1usize..24) {
                let mut rng = seed::rng(seed);
                let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
                let a = &m * m.transpose() + DMatrix::identity(n, n);
                let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let out = cg_solve(|v| (&a * DVector::from_column_slice(v)).as_slice().to_vec(), &b, &SolverConfig::default()).unwrap();
                prop_assert!(out.converged);
                prop_assert!(out.iters <= n + 5);
            }
        }
    }
}
