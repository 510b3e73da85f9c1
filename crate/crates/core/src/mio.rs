//! Membership-inference oracle over user embeddings.
//!
//! A user is described by `[p_u ‖ mean of q_i over the user's items]`. The
//! oracle is a small feed-forward classifier trained to tell members (users
//! whose ratings are in the evaluated model's training set) from users the
//! model never saw.
//!
//! [`run_attack`] trains the oracle on remaining users against test-only
//! users, checks it on a held-out split, then asks it about the unlearned
//! users. If unlearning is complete they look like non-members and the
//! completeness AUC sits near 0.5.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::InteractionSet;
use crate::error::{Error, Result};
use crate::model::{mean_item_row, ModelParams};
use crate::seed;

/// Concatenation of the user row and the mean row of the items the user
/// has in `reference`.
pub fn extract_features(params: &ModelParams, reference: &InteractionSet, user: u32) -> Result<Vec<f64>> {
    if user as usize >= params.num_users() {
        return Err(Error::OutOfRange(format!("user {user} of {}", params.num_users())));
    }
    let mean = mean_item_row(params, reference.user_interactions(user).map(|z| z.item))
        .ok_or_else(|| Error::InvalidData(format!("user {user} has no interactions in the reference set")))?;
    let mut f = params.user_row(user).to_vec();
    f.extend(mean);
    Ok(f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Member,
    NonMember,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    RemainingTrain,
    Unlearned,
    Test,
}

impl Origin {
    pub fn name(self) -> &'static str {
        match self {
            Origin::RemainingTrain => "remaining_train",
            Origin::Unlearned => "unlearned",
            Origin::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MioSample {
    pub user: u32,
    pub features: Vec<f64>,
    pub label: Label,
    pub origin: Origin,
}

/// Every candidate sample, unbalanced: remaining users (members, features
/// over their train items), unlearned users (features over their original
/// train items) and test-only users (features over their test items).
pub fn collect_samples(params: &ModelParams, train: &InteractionSet, test: &InteractionSet, unlearned: &[u32]) -> Result<Vec<MioSample>> {
    let targets: HashSet<u32> = unlearned.iter().copied().collect();
    let mut out = Vec::new();
    for u in 0..train.num_users() as u32 {
        let (sample_from, label, origin) = if targets.contains(&u) {
            (train, Label::NonMember, Origin::Unlearned)
        } else if train.user_degree(u) > 0 {
            (train, Label::Member, Origin::RemainingTrain)
        } else if test.user_degree(u) > 0 {
            (test, Label::NonMember, Origin::Test)
        } else {
            continue;
        };
        out.push(MioSample {
            user: u,
            features: extract_features(params, sample_from, u)?,
            label,
            origin,
        });
    }
    Ok(out)
}

/// Downsample the larger class so both have the same size.
pub fn balance(samples: Vec<MioSample>, seed: u64) -> Result<Vec<MioSample>> {
    let (mut pos, mut neg): (Vec<_>, Vec<_>) = samples.into_iter().partition(|s| s.label == Label::Member);
    if pos.is_empty() {
        return Err(Error::EmptyClass("member"));
    }
    if neg.is_empty() {
        return Err(Error::EmptyClass("non-member"));
    }
    let mut rng = seed::rng(seed::derive_seed(seed, "balance"));
    let n = pos.len().min(neg.len());
    for side in [&mut pos, &mut neg] {
        if side.len() > n {
            side.shuffle(&mut rng);
            side.truncate(n);
            side.sort_by_key(|s| s.user);
        }
    }
    pos.extend(neg);
    Ok(pos)
}

/// Balanced attack set: remaining users against unlearned plus test-only
/// users, evaluated under `params`.
pub fn build_attack_set(params: &ModelParams, train: &InteractionSet, test: &InteractionSet, unlearned: &[u32], seed: u64) -> Result<Vec<MioSample>> {
    balance(collect_samples(params, train, test, unlearned)?, seed)
}

pub const ATTACK_CSV_HEADER: &str = "# recunlearn-attack v1";

/// `f0,…,f{n-1},label,origin` rows after a schema comment line.
pub fn write_attack_csv(samples: &[MioSample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let width = samples.first().map_or(0, |s| s.features.len());
    let mut out = String::new();
    let _ = writeln!(out, "{ATTACK_CSV_HEADER}");
    for k in 0..width {
        let _ = write!(out, "f{k},");
    }
    out.push_str("user,label,origin\n");
    for s in samples {
        for v in &s.features {
            let _ = write!(out, "{v},");
        }
        let label = match s.label {
            Label::Member => "member",
            Label::NonMember => "non_member",
        };
        let _ = writeln!(out, "{},{label},{}", s.user, s.origin.name());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MioConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Fraction of the balanced pool held out for evaluation.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for MioConfig {
    fn default() -> Self {
        MioConfig {
            epochs: 100,
            learning_rate: 0.001,
            batch_size: 1,
            holdout_fraction: 0.5,
            seed: 0,
        }
    }
}

impl MioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("MIO epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("MIO learning_rate must be > 0".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::Config("MIO holdout_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }
}

pub const HIDDEN: [usize; 3] = [64, 16, 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Dense {
    w: Array2<f64>,
    b: Array1<f64>,
}

/// Input standardization, then `in → 64 → 16 → 4 → 2` with ReLU and a
/// softmax output whose index 0 is the member class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MioModel {
    mean: Array1<f64>,
    scale: Array1<f64>,
    layers: Vec<Dense>,
    pub config: MioConfig,
}

fn softmax2(z: &Array1<f64>) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let (a, b) = ((z[0] - m).exp(), (z[1] - m).exp());
    [a / (a + b), b / (a + b)]
}

impl MioModel {
    /// He-initialized network for `inputs` features, identity scaling.
    pub fn new(inputs: usize, config: MioConfig) -> Self {
        let mut rng = seed::rng(seed::derive_seed(config.seed, "mio_init"));
        let mut widths = vec![inputs];
        widths.extend(HIDDEN);
        widths.push(2);
        let layers = widths
            .windows(2)
            .map(|w| {
                let n = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).expect("positive std");
                Dense {
                    w: Array2::from_shape_simple_fn((w[1], w[0]), || n.sample(&mut rng)),
                    b: Array1::zeros(w[1]),
                }
            })
            .collect();
        MioModel {
            mean: Array1::zeros(inputs),
            scale: Array1::ones(inputs),
            layers,
            config,
        }
    }

    /// Same architecture with every weight and bias zero.
    pub fn zeroed(inputs: usize) -> Self {
        let mut m = MioModel::new(inputs, MioConfig::default());
        for l in &mut m.layers {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
        m
    }

    pub fn inputs(&self) -> usize {
        self.mean.len()
    }

    fn standardize(&self, x: &[f64]) -> Array1<f64> {
        Array1::from_iter(x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s))
    }

    /// Activations after each layer (pre-softmax for the last).
    fn forward(&self, x: Array1<f64>) -> Vec<Array1<f64>> {
        let mut acts = vec![x];
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let mut z = l.w.dot(acts.last().unwrap()) + &l.b;
            if k < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    /// Softmax probabilities (member, non-member).
    pub fn probabilities(&self, features: &[f64]) -> [f64; 2] {
        softmax2(self.forward(self.standardize(features)).last().unwrap())
    }

    /// Probability of the member class.
    pub fn score(&self, features: &[f64]) -> f64 {
        self.probabilities(features)[0]
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone)]
pub struct TrainedMio {
    pub model: MioModel,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

/// Mini-batch SGD on mean cross-entropy.
pub fn train_mio(samples: &[MioSample], config: &MioConfig) -> Result<TrainedMio> {
    config.validate()?;
    if !samples.iter().any(|s| s.label == Label::Member) {
        return Err(Error::EmptyClass("member"));
    }
    if !samples.iter().any(|s| s.label == Label::NonMember) {
        return Err(Error::EmptyClass("non-member"));
    }
    let width = samples[0].features.len();
    if let Some(s) = samples.iter().find(|s| s.features.len() != width) {
        return Err(Error::DimensionMismatch { expected: width, got: s.features.len() });
    }
    let mut model = MioModel::new(width, *config);
    let n = samples.len() as f64;
    for k in 0..width {
        let mean = samples.iter().map(|s| s.features[k]).sum::<f64>() / n;
        let var = samples.iter().map(|s| (s.features[k] - mean).powi(2)).sum::<f64>() / n;
        model.mean[k] = mean;
        model.scale[k] = if var > 1e-24 { var.sqrt() } else { 1.0 };
    }
    let xs: Vec<Array1<f64>> = samples.iter().map(|s| model.standardize(&s.features)).collect();
    let ys: Vec<usize> = samples.iter().map(|s| if s.label == Label::Member { 0 } else { 1 }).collect();

    let mut rng = seed::rng(seed::derive_seed(config.seed, "mio_shuffle"));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let lr = config.learning_rate;
    let nl = model.layers.len();
    let mut final_loss = f64::NAN;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut gw: Vec<Array2<f64>> = model.layers.iter().map(|l| Array2::zeros(l.w.dim())).collect();
            let mut gb: Vec<Array1<f64>> = model.layers.iter().map(|l| Array1::zeros(l.b.len())).collect();
            for &j in batch {
                let acts = model.forward(xs[j].clone());
                let p = softmax2(&acts[nl]);
                epoch_loss -= p[ys[j]].max(1e-300).ln();
                let mut delta = Array1::from(vec![p[0], p[1]]);
                delta[ys[j]] -= 1.0;
                for k in (0..nl).rev() {
                    let input = &acts[k];
                    gw[k] += &delta
                        .view()
                        .insert_axis(ndarray::Axis(1))
                        .dot(&input.view().insert_axis(ndarray::Axis(0)));
                    gb[k] += &delta;
                    if k > 0 {
                        let mut back = model.layers[k].w.t().dot(&delta);
                        back.iter_mut().zip(input.iter()).for_each(|(d, a)| {
                            if *a <= 0.0 {
                                *d = 0.0;
                            }
                        });
                        delta = back;
                    }
                }
            }
            let scale = lr / batch.len() as f64;
            for (l, (w, b)) in model.layers.iter_mut().zip(gw.iter().zip(&gb)) {
                l.w.scaled_add(-scale, w);
                l.b.scaled_add(-scale, b);
            }
        }
        final_loss = epoch_loss / n;
        if !final_loss.is_finite() || !model.is_finite() {
            return Err(Error::Divergence { epoch, value: final_loss });
        }
    }
    let correct = samples
        .iter()
        .filter(|s| (model.score(&s.features) >= 0.5) == (s.label == Label::Member))
        .count();
    Ok(TrainedMio {
        model,
        final_loss,
        train_accuracy: correct as f64 / n,
    })
}

pub fn mio_score(model: &MioModel, features: &[f64]) -> f64 {
    model.score(features)
}

/// Mann-Whitney AUC: the probability a positive outscores a negative, ties
/// counted one half.
pub fn auc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() {
        return Err(Error::EmptyClass("positive"));
    }
    if negative.is_empty() {
        return Err(Error::EmptyClass("negative"));
    }
    let mut all: Vec<(f64, bool)> = positive.iter().map(|&s| (s, true)).chain(negative.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1..=j share their average.
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let (np, nn) = (positive.len() as f64, negative.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Completeness {
    pub acc: f64,
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// ACC at threshold 0.5 and AUC of the member score, members positive.
pub fn completeness_report(model: &MioModel, samples: &[MioSample]) -> Result<Completeness> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut correct = 0usize;
    for s in samples {
        let score = model.score(&s.features);
        let member = s.label == Label::Member;
        if (score >= 0.5) == member {
            correct += 1;
        }
        if member {
            pos.push(score);
        } else {
            neg.push(score);
        }
    }
    Ok(Completeness {
        auc: auc(&pos, &neg)?,
        acc: correct as f64 / samples.len() as f64,
        positives: pos.len(),
        negatives: neg.len(),
    })
}

pub const ATTACK_SCHEMA: &str = "recunlearn.attack/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub schema: String,
    pub seed: u64,
    pub members: usize,
    pub unlearned: usize,
    pub test_only: usize,
    pub train_size: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
    /// Held-out remaining-vs-test split: how well the oracle works at all.
    pub attack: Completeness,
    /// Unlearned users as positives against the held-out test-only users.
    pub completeness: Completeness,
}

#[derive(Debug, Clone)]
pub struct AttackRun {
    pub report: AttackReport,
    pub model: MioModel,
    pub samples: Vec<MioSample>,
}

fn split_holdout(mut class: Vec<MioSample>, fraction: f64, rng: &mut impl rand::Rng) -> (Vec<MioSample>, Vec<MioSample>) {
    class.shuffle(rng);
    let held = ((class.len() as f64 * fraction).round() as usize).clamp(1, class.len().saturating_sub(1).max(1));
    let train = class.split_off(held);
    (train, class)
}

/// Train the oracle on remaining users against test-only users and score
/// the unlearned users against held-out test-only users.
pub fn run_attack(params: &ModelParams, train: &InteractionSet, test: &InteractionSet, unlearned: &[u32], config: &MioConfig) -> Result<AttackRun> {
    config.validate()?;
    if unlearned.is_empty() {
        return Err(Error::EmptyClass("unlearned"));
    }
    let samples = collect_samples(params, train, test, unlearned)?;
    let (queries, pool): (Vec<_>, Vec<_>) = samples.iter().cloned().partition(|s| s.origin == Origin::Unlearned);
    let counts = |o: Origin| samples.iter().filter(|s| s.origin == o).count();
    let pool = balance(pool, config.seed)?;
    let (members, others): (Vec<_>, Vec<_>) = pool.into_iter().partition(|s| s.label == Label::Member);
    if members.len() < 2 {
        return Err(Error::EmptyClass("member"));
    }
    let mut rng = seed::rng(seed::derive_seed(config.seed, "mio_split"));
    let (mut fit, mut held) = split_holdout(members, config.holdout_fraction, &mut rng);
    let (fit_neg, held_neg) = split_holdout(others, config.holdout_fraction, &mut rng);
    fit.extend(fit_neg);
    held.extend(held_neg.iter().cloned());
    let trained = train_mio(&fit, config)?;
    let attack = completeness_report(&trained.model, &held)?;
    let mut probe: Vec<MioSample> = queries
        .into_iter()
        .map(|s| MioSample { label: Label::Member, ..s })
        .collect();
    probe.extend(held_neg);
    let completeness = completeness_report(&trained.model, &probe)?;
    Ok(AttackRun {
        report: AttackReport {
            schema: ATTACK_SCHEMA.to_string(),
            seed: config.seed,
            members: counts(Origin::RemainingTrain),
            unlearned: counts(Origin::Unlearned),
            test_only: counts(Origin::Test),
            train_size: fit.len(),
            final_loss: trained.final_loss,
            train_accuracy: trained.train_accuracy,
            attack,
            completeness,
        },
        model: trained.model,
        samples,
    })
}
