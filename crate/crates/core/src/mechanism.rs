//! Monte-Carlo model of probe gradients with an on/off concentrated component.
//!
//! Runs are drawn as `g_r = u + Z_r a + xi_r` with `Z_r ~ Bernoulli(1 - rho)`
//! and isotropic Gaussian `xi_r`. The closed-form population values of the
//! consistency statistic and of the per-run deviations serve as oracles for
//! the penalty machinery, independently of any encoder.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::rng_for;
use crate::signature::{compute_penalties, GradientSignature, PairId, PenaltyConfig, PerturbationKind};

/// How the Bernoulli gates of a sample are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateSampling {
    /// Independent `Bernoulli(1 - rho)` per run.
    #[default]
    Iid,
    /// Exactly `round((1 - rho) R)` active runs at shuffled positions, so the
    /// empirical on-fraction equals its population value.
    ExactCount,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MechanismParams {
    pub u: Vec<f64>,
    pub a: Vec<f64>,
    pub rho: f64,
    pub noise_sigma: f64,
    pub runs: usize,
    pub seed: u64,
    pub sampling: GateSampling,
}

impl MechanismParams {
    pub fn validate(&self) -> Result<()> {
        if self.u.is_empty() || self.u.len() != self.a.len() {
            return Err(Error::InvalidInput(format!(
                "u and a must share a nonzero dimension, got {} and {}",
                self.u.len(),
                self.a.len()
            )));
        }
        if self.u.iter().chain(&self.a).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("u and a must be finite".into()));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::InvalidInput(format!("rho must lie in (0, 1), got {}", self.rho)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidInput(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if self.runs < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 runs, got {}", self.runs)));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.u.len()
    }

    /// True when `u = 0` and there is no noise, where the two-branch
    /// deviation picture holds exactly.
    pub fn in_exact_regime(&self) -> bool {
        self.noise_sigma == 0.0 && self.u.iter().all(|&v| v == 0.0)
    }
}

pub fn sample_signature(mp: &MechanismParams) -> Result<GradientSignature> {
    mp.validate()?;
    let mut rng = rng_for(mp.seed, &[b"mechanism"]);
    let gates: Vec<bool> = match mp.sampling {
        GateSampling::Iid => (0..mp.runs).map(|_| rng.gen::<f64>() < 1.0 - mp.rho).collect(),
        GateSampling::ExactCount => {
            let on = ((1.0 - mp.rho) * mp.runs as f64).round() as usize;
            let mut g: Vec<bool> = (0..mp.runs).map(|r| r < on).collect();
            g.shuffle(&mut rng);
            g
        }
    };
    let noise = Normal::new(0.0, mp.noise_sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let p = mp.dim();
    let mut flat = Vec::with_capacity(mp.runs * p);
    for &on in &gates {
        for i in 0..p {
            let mut g = mp.u[i];
            if on {
                g += mp.a[i];
            }
            if mp.noise_sigma > 0.0 {
                g += noise.sample(&mut rng);
            }
            flat.push(g);
        }
    }
    GradientSignature::from_flat(
        PairId::new("mechanism", format!("seed-{}", mp.seed)),
        p,
        flat,
        PerturbationKind::Mixed,
        0,
    )
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RepPrediction {
    pub value: f64,
    /// Set when `u != 0` or noise is present: the general formula extends
    /// the zero-`u` illustration by expectation algebra.
    pub extension: bool,
}

/// Population consistency `sqrt(|E g|^2 / E|g|^2)`.
pub fn predicted_rep(mp: &MechanismParams) -> Result<RepPrediction> {
    mp.validate()?;
    let on = 1.0 - mp.rho;
    let mean: Vec<f64> = mp.u.iter().zip(&mp.a).map(|(u, a)| u + on * a).collect();
    let num = dot(&mean, &mean);
    let den = dot(&mp.u, &mp.u)
        + 2.0 * on * dot(&mp.u, &mp.a)
        + on * dot(&mp.a, &mp.a)
        + mp.dim() as f64 * mp.noise_sigma * mp.noise_sigma;
    let value = if den > 0.0 { (num / den).sqrt() } else { 0.0 };
    Ok(RepPrediction {
        value,
        extension: !mp.in_exact_regime(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeviationPrediction {
    /// Relative deviation of a run whose concentrated component is off.
    pub dev_off: f64,
    /// Relative deviation of a run whose concentrated component is on.
    pub dev_on: f64,
    /// False outside the `u = 0`, noise-free regime.
    pub exact: bool,
}

pub fn predicted_deviations(mp: &MechanismParams) -> Result<DeviationPrediction> {
    mp.validate()?;
    Ok(DeviationPrediction {
        dev_off: 1.0,
        dev_on: mp.rho / (1.0 - mp.rho),
        exact: mp.in_exact_regime(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MechanismGrid {
    pub rhos: Vec<f64>,
    /// `|a| / |u|`; with `u_norm = 0` this is `|a|` directly.
    pub ratios: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub u_norm: f64,
    pub dim: usize,
    pub runs: usize,
    pub seeds: usize,
    pub sampling: GateSampling,
}

impl Default for MechanismGrid {
    fn default() -> Self {
        Self {
            rhos: (1..=9).map(|i| f64::from(i) / 10.0).collect(),
            ratios: vec![0.0, 1.0, 4.0, 16.0],
            sigmas: vec![0.0, 0.01],
            u_norm: 1.0,
            dim: 16,
            runs: 10_000,
            seeds: 20,
            sampling: GateSampling::Iid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MechanismRow {
    pub rho: f64,
    pub ratio: f64,
    pub sigma: f64,
    pub seed: u64,
    pub empirical_rep: f64,
    pub predicted_rep: f64,
    pub empirical_p_dr: f64,
    pub extension: bool,
}

fn random_unit<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = dot(&v, &v).sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Builds the `(u, a)` pair for one grid point. Directions are fixed per
/// seed so grid points are paired across rho and sigma.
pub fn grid_vectors(grid: &MechanismGrid, ratio: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = rng_for(seed, &[b"mechanism-directions"]);
    let u_dir = random_unit(grid.dim, &mut rng);
    let a_dir = random_unit(grid.dim, &mut rng);
    let a_norm = if grid.u_norm > 0.0 { ratio * grid.u_norm } else { ratio };
    (
        u_dir.iter().map(|x| x * grid.u_norm).collect(),
        a_dir.iter().map(|x| x * a_norm).collect(),
    )
}

pub fn simulate_grid(grid: &MechanismGrid, penalty: &PenaltyConfig) -> Result<Vec<MechanismRow>> {
    if grid.dim == 0 || grid.seeds == 0 {
        return Err(Error::Config("mechanism grid needs dim >= 1 and seeds >= 1".into()));
    }
    let mut points = Vec::new();
    for &rho in &grid.rhos {
        for &ratio in &grid.ratios {
            for &sigma in &grid.sigmas {
                for seed in 0..grid.seeds as u64 {
                    points.push((rho, ratio, sigma, seed));
                }
            }
        }
    }
    points
        .into_par_iter()
        .map(|(rho, ratio, sigma, seed)| {
            let (u, a) = grid_vectors(grid, ratio, seed);
            let mp = MechanismParams {
                u,
                a,
                rho,
                noise_sigma: sigma,
                runs: grid.runs,
                seed,
                sampling: grid.sampling,
            };
            let sig = sample_signature(&mp)?;
            let breakdown = compute_penalties(&sig, penalty)?;
            let pred = predicted_rep(&mp)?;
            Ok(MechanismRow {
                rho,
                ratio,
                sigma,
                seed,
                empirical_rep: breakdown.rep,
                predicted_rep: pred.value,
                empirical_p_dr: breakdown.p_dr,
                extension: pred.extension,
            })
        })
        .collect()
}
