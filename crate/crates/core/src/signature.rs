//! Gradient signatures and the two instability penalties derived from them.
//!
//! A [`GradientSignature`] holds the probe gradients of one query/passage pair
//! collected over `R` randomized runs. Two statistics are computed from it:
//!
//! * representational consistency, the norm of the mean gradient relative to
//!   the root-mean-square gradient norm, turned into a `-log` penalty;
//! * dispersion risk, a lower-tail summary of per-run relative deviations
//!   from the mean gradient, passed through an exponential kernel, a log
//!   transform and a saturating cap.
//!
//! Everything here is a pure function of its inputs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the probed forward pass was randomized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationKind {
    Token,
    Encoder,
    Mixed,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 3] = [Self::Token, Self::Encoder, Self::Mixed];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Token => "token",
            Self::Encoder => "encoder",
            Self::Mixed => "mixed",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Self::Token => 0,
            Self::Encoder => 1,
            Self::Mixed => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::Token),
            1 => Some(Self::Encoder),
            2 => Some(Self::Mixed),
            _ => None,
        }
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(Self::Token),
            "encoder" => Ok(Self::Encoder),
            "mixed" => Ok(Self::Mixed),
            other => Err(Error::Config(format!("unknown perturbation kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairId {
    pub query_id: String,
    pub passage_id: String,
}

impl PairId {
    pub fn new(query_id: impl Into<String>, passage_id: impl Into<String>) -> Self {
        Self {
            query_id: query_id.into(),
            passage_id: passage_id.into(),
        }
    }
}

/// The `R` probe-gradient vectors of one query/passage pair.
///
/// Runs are stored row-major in a single buffer. Construction validates
/// `R >= 2`, a common dimension `P >= 1` and finiteness of every entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSignature {
    pair: PairId,
    dim: usize,
    data: Vec<f64>,
    kind: PerturbationKind,
    probe_layer: usize,
}

impl GradientSignature {
    pub fn new(
        pair: PairId,
        runs: Vec<Vec<f64>>,
        kind: PerturbationKind,
        probe_layer: usize,
    ) -> Result<Self> {
        let dim = runs.first().map(Vec::len).unwrap_or(0);
        if let Some((r, bad)) = runs.iter().enumerate().find(|(_, v)| v.len() != dim) {
            return Err(Error::InvalidInput(format!(
                "run {r} has dimension {} but run 0 has {dim}",
                bad.len()
            )));
        }
        let data = runs.into_iter().flatten().collect();
        Self::from_flat(pair, dim, data, kind, probe_layer)
    }

    /// Builds a signature from a row-major `R x P` buffer.
    pub fn from_flat(
        pair: PairId,
        dim: usize,
        data: Vec<f64>,
        kind: PerturbationKind,
        probe_layer: usize,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("probe dimension must be at least 1".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::InvalidInput(format!(
                "buffer of {} values is not a whole number of {dim}-dimensional runs",
                data.len()
            )));
        }
        let runs = data.len() / dim;
        if runs < 2 {
            return Err(Error::InvalidInput(format!(
                "a signature needs at least 2 runs, got {runs}"
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite gradient entry in run {} at coordinate {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self {
            pair,
            dim,
            data,
            kind,
            probe_layer,
        })
    }

    pub fn pair(&self) -> &PairId {
        &self.pair
    }

    pub fn num_runs(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> PerturbationKind {
        self.kind
    }

    pub fn probe_layer(&self) -> usize {
        self.probe_layer
    }

    pub fn run(&self, r: usize) -> &[f64] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn runs(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// The first `runs` runs. Per-run perturbations are seeded by run index,
    /// so this equals a signature collected with `runs` repeats directly.
    pub fn prefix(&self, runs: usize) -> Result<Self> {
        if runs > self.num_runs() {
            return Err(Error::InvalidInput(format!(
                "cannot take {runs} runs from a signature with {}",
                self.num_runs()
            )));
        }
        Self::from_flat(
            self.pair.clone(),
            self.dim,
            self.data[..runs * self.dim].to_vec(),
            self.kind,
            self.probe_layer,
        )
    }

    /// Mean gradient over runs.
    pub fn mean_run(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for run in self.runs() {
            for (m, g) in mean.iter_mut().zip(run) {
                *m += g;
            }
        }
        let inv = 1.0 / self.num_runs() as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        mean
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyConfig {
    pub epsilon: f64,
    /// Decay rate of the exponential stability kernel.
    pub alpha: f64,
    /// Lower-quantile level used to aggregate stability scores.
    pub tau: f64,
    /// Saturation cap of the dispersion-risk penalty.
    pub cap: f64,
    /// Clamp both penalties at zero. The literal log formulas can dip to
    /// `-epsilon`-sized negatives when consistency or stability equals 1.
    pub clamp_nonnegative: bool,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-8,
            alpha: 4.0,
            tau: 0.1,
            cap: 6.0,
            clamp_nonnegative: true,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
            }
        };
        positive("epsilon", self.epsilon)?;
        positive("alpha", self.alpha)?;
        positive("cap", self.cap)?;
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        Ok(())
    }

    fn clamp(&self, v: f64) -> f64 {
        if self.clamp_nonnegative {
            v.max(0.0)
        } else {
            v
        }
    }
}

/// Full trace of the penalty computation for one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyBreakdown {
    pub rep: f64,
    pub p_rep: f64,
    pub stability_scores: Vec<f64>,
    pub c_quantile: f64,
    pub p_dr_raw: f64,
    pub p_dr: f64,
}

impl PenaltyBreakdown {
    /// A breakdown carrying no penalty at all.
    pub fn zero() -> Self {
        Self {
            rep: 1.0,
            p_rep: 0.0,
            stability_scores: Vec::new(),
            c_quantile: 1.0,
            p_dr_raw: 0.0,
            p_dr: 0.0,
        }
    }
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Normalized gradient signal-to-noise ratio, in `[0, 1]`.
pub fn rep_consistency(sig: &GradientSignature, cfg: &PenaltyConfig) -> f64 {
    let mean = sig.mean_run();
    let mean_sq_norm = sig.runs().map(sq_norm).sum::<f64>() / sig.num_runs() as f64;
    let rep = sq_norm(&mean).sqrt() / (mean_sq_norm.sqrt() + cfg.epsilon);
    // Cauchy-Schwarz bounds this by 1; rounding can overshoot by an ulp.
    rep.min(1.0)
}

pub fn rep_penalty(rep: f64, cfg: &PenaltyConfig) -> Result<f64> {
    if !(0.0..=1.0).contains(&rep) {
        return Err(Error::InvalidInput(format!("consistency must lie in [0, 1], got {rep}")));
    }
    Ok(cfg.clamp(-(rep + cfg.epsilon).ln()))
}

/// Relative deviation of every run from the mean gradient.
pub fn run_deviations(sig: &GradientSignature, cfg: &PenaltyConfig) -> Vec<f64> {
    let mean = sig.mean_run();
    let denom = sq_norm(&mean).sqrt() + cfg.epsilon;
    sig.runs()
        .map(|run| {
            let dist_sq: f64 = run.iter().zip(&mean).map(|(g, m)| (g - m) * (g - m)).sum();
            dist_sq.sqrt() / denom
        })
        .collect()
}

pub fn stability_scores(devs: &[f64], cfg: &PenaltyConfig) -> Vec<f64> {
    devs.iter().map(|d| (-cfg.alpha * d).exp()).collect()
}

/// 1-based nearest-rank index `ceil(level * n)`, tolerant to the rounding
/// noise of `level * n` landing a hair above an integer (e.g. `0.1 * 30`).
pub(crate) fn nearest_rank_index(level: f64, n: usize) -> usize {
    let x = level * n as f64;
    let k = (x - 1e-9 * x.abs().max(1.0)).ceil();
    if k <= 0.0 {
        0
    } else {
        k as usize
    }
}

/// Nearest-rank lower quantile: the element at 1-based index `ceil(tau * R)`
/// of the ascending sort.
pub fn lower_quantile(values: &[f64], tau: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("quantile of an empty list".into()));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidInput(format!("quantile level must lie in (0, 1), got {tau}")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("quantile input contains NaN".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = nearest_rank_index(tau, sorted.len()).clamp(1, sorted.len());
    Ok(sorted[idx - 1])
}

/// Returns `(raw, saturated)` dispersion-risk penalties for an aggregated
/// stability score `c`.
pub fn dispersion_penalty(c: f64, cfg: &PenaltyConfig) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::InvalidInput(format!("stability score must lie in [0, 1], got {c}")));
    }
    let raw = cfg.clamp(-(c + cfg.epsilon).ln() / c.max(cfg.epsilon));
    let saturated = cfg.cap * raw / (raw + cfg.cap + cfg.epsilon);
    Ok((raw, saturated))
}

pub fn compute_penalties(sig: &GradientSignature, cfg: &PenaltyConfig) -> Result<PenaltyBreakdown> {
    cfg.validate()?;
    let rep = rep_consistency(sig, cfg);
    let p_rep = rep_penalty(rep, cfg)?;
    let devs = run_deviations(sig, cfg);
    let stability_scores = stability_scores(&devs, cfg);
    let c_quantile = lower_quantile(&stability_scores, cfg.tau)?;
    let (p_dr_raw, p_dr) = dispersion_penalty(c_quantile, cfg)?;
    Ok(PenaltyBreakdown {
        rep,
        p_rep,
        stability_scores,
        c_quantile,
        p_dr_raw,
        p_dr,
    })
}

#[cfg(test)]
#[allow(clippy::approx_constant)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sig(runs: &[&[f64]]) -> GradientSignature {
        GradientSignature::new(
            PairId::new("q", "p"),
            runs.iter().map(|r| r.to_vec()).collect(),
            PerturbationKind::Mixed,
            1,
        )
        .unwrap()
    }

    #[test]
    fn rejects_malformed_signatures() {
        let pair = || PairId::new("q", "p");
        let k = PerturbationKind::Token;
        assert!(GradientSignature::new(pair(), vec![vec![1.0, 2.0]], k, 1).is_err());
        assert!(GradientSignature::new(pair(), vec![vec![1.0], vec![1.0, 2.0]], k, 1).is_err());
        assert!(GradientSignature::new(pair(), vec![vec![], vec![]], k, 1).is_err());
        assert!(GradientSignature::new(pair(), vec![vec![1.0], vec![f64::NAN]], k, 1).is_err());
        assert!(GradientSignature::new(pair(), vec![vec![1.0], vec![f64::INFINITY]], k, 1).is_err());
    }

    #[test]
    fn rep_examples() {
        let cfg = PenaltyConfig::default();
        let identical = rep_consistency(&sig(&[&[3.0, 4.0], &[3.0, 4.0]]), &cfg);
        assert!((identical - 5.0 / (5.0 + 1e-8)).abs() < 1e-15);
        assert!((identical - 1.0).abs() < 1e-8);
        assert_eq!(rep_consistency(&sig(&[&[1.0, 0.0], &[-1.0, 0.0]]), &cfg), 0.0);
        let orth = rep_consistency(&sig(&[&[1.0, 0.0], &[0.0, 1.0]]), &cfg);
        assert_relative_eq!(orth, 0.7071068, epsilon = 1e-7);
    }

    #[test]
    fn rep_penalty_examples() {
        let cfg = PenaltyConfig::default();
        assert_eq!(rep_penalty(1.0, &cfg).unwrap(), 0.0);
        assert_relative_eq!(rep_penalty(0.0, &cfg).unwrap(), 18.420680743952367, epsilon = 1e-9);
        assert_relative_eq!(rep_penalty(0.7071068, &cfg).unwrap(), 0.3465736, epsilon = 1e-6);
        assert!(rep_penalty(1.5, &cfg).is_err());
        assert!(rep_penalty(-0.1, &cfg).is_err());

        let unclamped = PenaltyConfig { clamp_nonnegative: false, ..cfg };
        assert!(rep_penalty(1.0, &unclamped).unwrap() < 0.0);
    }

    #[test]
    fn deviation_examples() {
        let cfg = PenaltyConfig::default();
        assert_eq!(run_deviations(&sig(&[&[1.0, 2.0], &[1.0, 2.0]]), &cfg), vec![0.0, 0.0]);
        let d = run_deviations(&sig(&[&[2.0, 0.0], &[0.0, 0.0]]), &cfg);
        assert_relative_eq!(d[0], 1.0, epsilon = 1e-7);
        assert_relative_eq!(d[1], 1.0, epsilon = 1e-7);
        let d = run_deviations(&sig(&[&[1.0, 0.0], &[-1.0, 0.0]]), &cfg);
        assert_relative_eq!(d[0], 1e8, max_relative = 1e-12);
        assert_relative_eq!(d[1], 1e8, max_relative = 1e-12);
    }

    #[test]
    fn stability_examples() {
        let cfg = PenaltyConfig::default();
        let c = stability_scores(&[0.0, 1.0, 1e8], &cfg);
        assert_eq!(c[0], 1.0);
        assert_relative_eq!(c[1], 0.0183156, epsilon = 1e-7);
        assert_eq!(c[2], 0.0);
        // The underflowed score still yields a finite, capped penalty.
        let (raw, capped) = dispersion_penalty(c[2], &cfg).unwrap();
        assert!(raw.is_finite() && capped < cfg.cap);
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(lower_quantile(&[0.9, 0.1, 0.5], 0.1).unwrap(), 0.1);
        let twenty: Vec<f64> = (0..20).rev().map(f64::from).collect();
        assert_eq!(lower_quantile(&twenty, 0.1).unwrap(), 1.0);
        assert_eq!(lower_quantile(&[0.3; 7], 0.4).unwrap(), 0.3);
        // 0.1 * 30 rounds to 3.0000000000000004 in binary; still index 3.
        let thirty: Vec<f64> = (0..30).map(f64::from).collect();
        assert_eq!(lower_quantile(&thirty, 0.1).unwrap(), 2.0);
        assert!(lower_quantile(&[], 0.1).is_err());
        assert!(lower_quantile(&[1.0], 0.0).is_err());
        assert!(lower_quantile(&[1.0], 1.0).is_err());
    }

    #[test]
    fn dispersion_examples() {
        let cfg = PenaltyConfig::default();
        assert_eq!(dispersion_penalty(1.0, &cfg).unwrap(), (0.0, 0.0));
        let (raw, capped) = dispersion_penalty(0.0183156, &cfg).unwrap();
        assert_relative_eq!(raw, 218.39, max_relative = 1e-4);
        assert_relative_eq!(capped, 5.8396, epsilon = 1e-4);
        assert!(dispersion_penalty(1.01, &cfg).is_err());
    }

    #[test]
    fn compute_penalties_examples() {
        let cfg = PenaltyConfig::default();
        let b = compute_penalties(&sig(&[&[1.0, -2.0], &[1.0, -2.0], &[1.0, -2.0]]), &cfg).unwrap();
        assert!((b.rep - 1.0).abs() < 1e-8);
        assert_eq!((b.p_rep, b.c_quantile, b.p_dr), (0.0, 1.0, 0.0));

        let b = compute_penalties(&sig(&[&[2.0, 0.0], &[0.0, 0.0]]), &cfg).unwrap();
        assert_relative_eq!(b.rep, 0.7071, epsilon = 1e-4);
        assert_relative_eq!(b.p_rep, 0.3466, epsilon = 1e-4);
        assert_relative_eq!(b.c_quantile, 0.018316, epsilon = 1e-6);
        assert_relative_eq!(b.p_dr, 5.8396, epsilon = 1e-4);
    }

    #[test]
    fn config_validation() {
        assert!(PenaltyConfig::default().validate().is_ok());
        for bad in [
            PenaltyConfig { epsilon: 0.0, ..Default::default() },
            PenaltyConfig { alpha: -1.0, ..Default::default() },
            PenaltyConfig { tau: 1.0, ..Default::default() },
            PenaltyConfig { cap: f64::NAN, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
