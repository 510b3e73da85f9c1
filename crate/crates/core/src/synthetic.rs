//! Planted-factor rating generator for desk-scale experiments.
//!
//! Users and items get latent vectors with unit-variance inner products.
//! Each user rates between `min_per_user` and `max_per_user` distinct items,
//! drawn with weight `popularity × exp(affinity · p·q)`, and the rating is
//! `clip(round(3.5 + 1.5·p·q + noise), 1, 5)`.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Interaction, InteractionSet};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub latent_dim: usize,
    pub min_per_user: usize,
    pub max_per_user: usize,
    pub noise_std: f64,
    /// Exponent of the rank-based popularity curve.
    pub popularity_exponent: f64,
    pub affinity: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            users: 500,
            items: 300,
            latent_dim: 8,
            min_per_user: 20,
            max_per_user: 60,
            noise_std: 0.5,
            popularity_exponent: 0.8,
            affinity: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.items == 0 || self.latent_dim == 0 {
            return Err(Error::Config("synthetic users, items and latent_dim must be >= 1".into()));
        }
        if self.min_per_user == 0 || self.min_per_user > self.max_per_user || self.max_per_user > self.items {
            return Err(Error::Config("need 1 <= min_per_user <= max_per_user <= items".into()));
        }
        if !(self.noise_std >= 0.0) || !self.affinity.is_finite() || !self.popularity_exponent.is_finite() {
            return Err(Error::Config("noise_std, affinity and popularity_exponent must be finite, noise_std >= 0".into()));
        }
        Ok(())
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<InteractionSet> {
    spec.validate()?;
    let mut rng = seed::rng(seed::derive_seed(spec.seed, "synthetic"));
    let k = spec.latent_dim;
    let factor = Normal::new(0.0, (k as f64).powf(-0.25)).expect("positive std");
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("positive std");
    let p: Vec<Vec<f64>> = (0..spec.users).map(|_| (0..k).map(|_| factor.sample(&mut rng)).collect()).collect();
    let q: Vec<Vec<f64>> = (0..spec.items).map(|_| (0..k).map(|_| factor.sample(&mut rng)).collect()).collect();
    let mut rank: Vec<usize> = (0..spec.items).collect();
    rank.shuffle(&mut rng);
    let popularity: Vec<f64> = rank.iter().map(|&r| (r as f64 + 1.0).powf(-spec.popularity_exponent)).collect();

    let items: Vec<u32> = (0..spec.items as u32).collect();
    let mut out = Vec::new();
    for (u, pu) in p.iter().enumerate() {
        let n = rng.random_range(spec.min_per_user..=spec.max_per_user);
        let affinity: Vec<f64> = q.iter().map(|qi| pu.iter().zip(qi).map(|(a, b)| a * b).sum()).collect();
        let chosen: Vec<u32> = items
            .choose_multiple_weighted(&mut rng, n, |&i| popularity[i as usize] * (spec.affinity * affinity[i as usize]).exp())
            .map_err(|e| Error::Config(format!("synthetic sampling: {e}")))?
            .copied()
            .collect();
        for i in chosen {
            let eps = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let r = (3.5 + 1.5 * affinity[i as usize] + eps).round().clamp(1.0, 5.0);
            out.push(Interaction::new(u as u32, i, r));
        }
    }
    InteractionSet::new(out, spec.users, spec.items)
}
