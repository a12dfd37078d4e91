//! Score-gated penalty fusion and final Top-K selection.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signature::{nearest_rank_index, PenaltyBreakdown};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Clean,
    Poison,
    #[default]
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub passage_id: String,
    pub base_score: f64,
    /// Absent penalties count as zero, so unprobed candidates keep their base score.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalties: Option<PenaltyBreakdown>,
    #[serde(default)]
    pub label: Label,
}

impl ScoredCandidate {
    pub fn new(passage_id: impl Into<String>, base_score: f64, label: Label) -> Self {
        Self {
            passage_id: passage_id.into(),
            base_score,
            penalties: None,
            label,
        }
    }

    pub fn with_penalties(mut self, penalties: PenaltyBreakdown) -> Self {
        self.penalties = Some(penalties);
        self
    }

    fn p_dr(&self) -> f64 {
        self.penalties.as_ref().map_or(0.0, |p| p.p_dr)
    }

    fn p_rep(&self) -> f64 {
        self.penalties.as_ref().map_or(0.0, |p| p.p_rep)
    }
}

/// A query with its scored, labelled candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub query_id: String,
    pub candidates: Vec<ScoredCandidate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    FusedScore,
    RankDrop,
}

/// The reranking-objective variants compared in ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoGate,
    NoDr,
    NoRep,
    NoPenalties,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoGate,
        Variant::NoDr,
        Variant::NoRep,
        Variant::NoPenalties,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoGate => "no_gate",
            Variant::NoDr => "no_dr",
            Variant::NoRep => "no_rep",
            Variant::NoPenalties => "no_penalties",
        }
    }

    /// Applies this variant's switches on top of `base`.
    pub fn apply(self, base: &RerankConfig) -> RerankConfig {
        let (gate, dr, rep) = match self {
            Variant::Full => (true, true, true),
            Variant::NoGate => (false, true, true),
            Variant::NoDr => (true, false, true),
            Variant::NoRep => (true, true, false),
            Variant::NoPenalties => (true, false, false),
        };
        RerankConfig {
            gate_enabled: gate,
            dr_enabled: dr,
            rep_enabled: rep,
            ..base.clone()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankConfig {
    pub k: usize,
    pub gate_enabled: bool,
    pub dr_enabled: bool,
    pub rep_enabled: bool,
    pub gate_temperature: f64,
    pub selection_mode: SelectionMode,
    pub rank_drop_rho: f64,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            k: 5,
            gate_enabled: true,
            dr_enabled: true,
            rep_enabled: true,
            gate_temperature: 1.0,
            selection_mode: SelectionMode::FusedScore,
            rank_drop_rho: 0.2,
        }
    }
}

impl RerankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.gate_temperature.is_finite() && self.gate_temperature > 0.0) {
            return Err(Error::Config(format!(
                "gate temperature must be positive, got {}",
                self.gate_temperature
            )));
        }
        if !(self.rank_drop_rho > 0.0 && self.rank_drop_rho <= 1.0) {
            return Err(Error::Config(format!(
                "rank_drop_rho must lie in (0, 1], got {}",
                self.rank_drop_rho
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub passage_id: String,
    pub label: Label,
    pub base_score: f64,
    pub gate_weight: f64,
    pub p_dr: f64,
    pub p_rep: f64,
    pub penalty_sum: f64,
    pub defended_score: f64,
    /// 1-based.
    pub base_rank: usize,
    /// 1-based.
    pub defended_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefendedRanking {
    pub query_id: String,
    pub gate_center: f64,
    /// One record per candidate, in input order.
    pub records: Vec<CandidateRecord>,
    pub top_k_ids: Vec<String>,
}

impl DefendedRanking {
    pub fn base_order(&self) -> Vec<&CandidateRecord> {
        let mut out: Vec<_> = self.records.iter().collect();
        out.sort_by_key(|r| r.base_rank);
        out
    }

    pub fn defended_order(&self) -> Vec<&CandidateRecord> {
        let mut out: Vec<_> = self.records.iter().collect();
        out.sort_by_key(|r| r.defended_rank);
        out
    }

    pub fn base_top_k(&self, k: usize) -> Vec<&str> {
        self.base_order()
            .into_iter()
            .take(k)
            .map(|r| r.passage_id.as_str())
            .collect()
    }
}

/// Upper-tail gate center: the nearest-rank quantile of the pool's base
/// scores at level `1 - m/|D|` with `m = ceil(sqrt(|D|))`.
///
/// When that level maps below the first order statistic (pools of one or two
/// candidates) the maximum score is used.
pub fn gate_center(base_scores: &[f64]) -> Result<f64> {
    if base_scores.is_empty() {
        return Err(Error::InvalidInput("gate center of an empty pool".into()));
    }
    if base_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("non-finite base score".into()));
    }
    let n = base_scores.len();
    let m = (n as f64).sqrt().ceil() as usize;
    let level = 1.0 - m as f64 / n as f64;
    let mut sorted = base_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = nearest_rank_index(level, n);
    if idx == 0 {
        log::debug!("gate center level {level:.3} below first rank for |D| = {n}; using max");
        return Ok(sorted[n - 1]);
    }
    Ok(sorted[idx.min(n) - 1])
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gate_weight(s: f64, mu: f64, cfg: &RerankConfig) -> f64 {
    logistic((s - mu) / cfg.gate_temperature)
}

fn penalty_sum(c: &ScoredCandidate, cfg: &RerankConfig) -> f64 {
    let mut sum = 0.0;
    if cfg.dr_enabled {
        sum += c.p_dr();
    }
    if cfg.rep_enabled {
        sum += c.p_rep();
    }
    sum
}

/// Base score minus the gated penalty sum. With the gate disabled the
/// full penalty is subtracted.
pub fn defended_score(c: &ScoredCandidate, mu: f64, cfg: &RerankConfig) -> f64 {
    let w = if cfg.gate_enabled { gate_weight(c.base_score, mu, cfg) } else { 1.0 };
    c.base_score - w * penalty_sum(c, cfg)
}

fn by_score_then_id(a: (f64, f64, &str), b: (f64, f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0)
        .then_with(|| b.1.total_cmp(&a.1))
        .then_with(|| a.2.cmp(b.2))
}

/// Indices of `candidates` sorted by base score, descending.
pub fn base_ranking(candidates: &[ScoredCandidate]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..candidates.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ca, cb) = (&candidates[a], &candidates[b]);
        by_score_then_id(
            (ca.base_score, ca.base_score, &ca.passage_id),
            (cb.base_score, cb.base_score, &cb.passage_id),
        )
    });
    idx
}

pub fn rerank_pool(pool: &CandidatePool, cfg: &RerankConfig) -> Result<DefendedRanking> {
    cfg.validate()?;
    let cands = &pool.candidates;
    if cands.is_empty() {
        return Err(Error::InvalidInput(format!("query {} has an empty pool", pool.query_id)));
    }
    for c in cands {
        let finite = c.base_score.is_finite()
            && c.penalties
                .as_ref()
                .is_none_or(|p| p.p_dr.is_finite() && p.p_rep.is_finite());
        if !finite {
            return Err(Error::Numerical(format!(
                "candidate {} of query {} has a non-finite score or penalty",
                c.passage_id, pool.query_id
            )));
        }
    }
    let mut seen = HashSet::with_capacity(cands.len());
    if let Some(dup) = cands.iter().find(|c| !seen.insert(c.passage_id.as_str())) {
        return Err(Error::InvalidInput(format!(
            "duplicate passage id {} in query {}",
            dup.passage_id, pool.query_id
        )));
    }

    let scores: Vec<f64> = cands.iter().map(|c| c.base_score).collect();
    let mu = gate_center(&scores)?;

    let mut records: Vec<CandidateRecord> = cands
        .iter()
        .map(|c| {
            let gate_weight = gate_weight(c.base_score, mu, cfg);
            let applied = if cfg.gate_enabled { gate_weight } else { 1.0 };
            let penalty_sum = penalty_sum(c, cfg);
            CandidateRecord {
                passage_id: c.passage_id.clone(),
                label: c.label,
                base_score: c.base_score,
                gate_weight,
                p_dr: c.p_dr(),
                p_rep: c.p_rep(),
                penalty_sum,
                defended_score: c.base_score - applied * penalty_sum,
                base_rank: 0,
                defended_rank: 0,
            }
        })
        .collect();

    for (rank, &i) in base_ranking(cands).iter().enumerate() {
        records[i].base_rank = rank + 1;
    }
    let mut defended: Vec<usize> = (0..records.len()).collect();
    defended.sort_by(|&a, &b| {
        let (ra, rb) = (&records[a], &records[b]);
        by_score_then_id(
            (ra.defended_score, ra.base_score, &ra.passage_id),
            (rb.defended_score, rb.base_score, &rb.passage_id),
        )
    });
    for (rank, &i) in defended.iter().enumerate() {
        records[i].defended_rank = rank + 1;
    }

    let top_k_ids = match cfg.selection_mode {
        SelectionMode::FusedScore => defended
            .iter()
            .take(cfg.k)
            .map(|&i| records[i].passage_id.clone())
            .collect(),
        SelectionMode::RankDrop => {
            let mut base_order: Vec<&CandidateRecord> = records.iter().collect();
            base_order.sort_by_key(|r| r.base_rank);
            let base_ids: Vec<&str> = base_order.iter().map(|r| r.passage_id.as_str()).collect();
            let def_ids: Vec<&str> = defended.iter().map(|&i| records[i].passage_id.as_str()).collect();
            rank_drop_select(&base_ids, &def_ids, cfg.k, cfg.rank_drop_rho)?
        }
    };

    Ok(DefendedRanking {
        query_id: pool.query_id.clone(),
        gate_center: mu,
        records,
        top_k_ids,
    })
}

/// Conservative context selection by rank drop.
///
/// Starts from the base Top-K, removes the `max(1, ceil(rho * k))` members
/// pushed furthest down by the defended ranking (ties: worse base rank goes
/// first), then refills from base-ranked candidates outside the original
/// Top-K. If the pool runs out of outsiders, removed members come back least
/// suspicious first. Output follows base order.
pub fn rank_drop_select(
    base_ranking: &[&str],
    defended_ranking: &[&str],
    k: usize,
    rho_sel: f64,
) -> Result<Vec<String>> {
    if base_ranking.len() != defended_ranking.len() {
        return Err(Error::InvalidInput("rankings cover different numbers of ids".into()));
    }
    if !(rho_sel > 0.0 && rho_sel <= 1.0) {
        return Err(Error::InvalidInput(format!("rho_sel must lie in (0, 1], got {rho_sel}")));
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let base_pos: HashMap<&str, usize> =
        base_ranking.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let def_pos: HashMap<&str, usize> =
        defended_ranking.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    if base_pos.len() != base_ranking.len()
        || def_pos.len() != defended_ranking.len()
        || base_pos.keys().any(|id| !def_pos.contains_key(id))
    {
        return Err(Error::InvalidInput("rankings are not over the same id set".into()));
    }
    if k >= base_ranking.len() {
        return Ok(base_ranking.iter().map(|s| s.to_string()).collect());
    }

    let m = ((rho_sel * k as f64).ceil() as usize).clamp(1, k);
    let top: &[&str] = &base_ranking[..k];
    let mut by_suspicion: Vec<(usize, usize)> = top
        .iter()
        .map(|id| {
            let b = base_pos[id];
            (def_pos[id].saturating_sub(b), b)
        })
        .collect();
    // Largest drop first; among equal drops, the worse base rank first.
    by_suspicion.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.cmp(&a.1)));
    let removed: Vec<usize> = by_suspicion.iter().take(m).map(|&(_, b)| b).collect();

    let mut selected: Vec<usize> = (0..k).filter(|b| !removed.contains(b)).collect();
    for b in k..base_ranking.len() {
        if selected.len() == k {
            break;
        }
        selected.push(b);
    }
    for &b in removed.iter().rev() {
        if selected.len() == k {
            break;
        }
        selected.push(b);
    }
    selected.sort_unstable();
    Ok(selected.into_iter().map(|b| base_ranking[b].to_string()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn penalties(p_dr: f64, p_rep: f64) -> PenaltyBreakdown {
        PenaltyBreakdown {
            p_dr,
            p_rep,
            ..PenaltyBreakdown::zero()
        }
    }

    #[test]
    fn gate_center_levels() {
        // |D| = 100 -> m = 10 -> 90th order statistic.
        let scores: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(gate_center(&scores).unwrap(), 90.0);
        // |D| = 55 -> m = 8 -> index ceil(55 * (1 - 8/55)) = 47.
        let scores: Vec<f64> = (1..=55).map(f64::from).collect();
        assert_eq!(gate_center(&scores).unwrap(), 47.0);
        assert_eq!(gate_center(&[0.3; 9]).unwrap(), 0.3);
        assert_eq!(gate_center(&[0.42]).unwrap(), 0.42);
        assert_eq!(gate_center(&[0.1, 0.7]).unwrap(), 0.7);
        assert!(gate_center(&[]).is_err());
    }

    #[test]
    fn gate_weight_values() {
        let cfg = RerankConfig::default();
        assert_eq!(gate_weight(0.3, 0.3, &cfg), 0.5);
        assert_relative_eq!(gate_weight(4.5, 0.5, &cfg), 0.9820138, epsilon = 1e-7);
        assert_relative_eq!(gate_weight(0.0, 10.0, &cfg), 4.5397868702434395e-5, max_relative = 1e-12);
        let hot = RerankConfig { gate_temperature: 2.0, ..cfg };
        assert_relative_eq!(gate_weight(4.5, 0.5, &hot), 1.0 / (1.0 + (-2.0f64).exp()));
    }

    #[test]
    fn defended_score_values() {
        let cfg = RerankConfig::default();
        let zero = ScoredCandidate::new("p", 0.9, Label::Clean);
        assert_eq!(defended_score(&zero, 0.1, &cfg), 0.9);
        let c = zero.clone().with_penalties(penalties(5.8396, 0.3466));
        assert_relative_eq!(defended_score(&c, 0.5, &cfg), -2.8036, epsilon = 1e-4);
        let no_gate = Variant::NoGate.apply(&cfg);
        assert_relative_eq!(defended_score(&c, 0.5, &no_gate), -5.2862, epsilon = 1e-10);
        let no_dr = Variant::NoDr.apply(&cfg);
        let w = gate_weight(0.9, 0.5, &cfg);
        assert_relative_eq!(defended_score(&c, 0.5, &no_dr), 0.9 - w * 0.3466);
        assert_eq!(defended_score(&c, 0.5, &Variant::NoPenalties.apply(&cfg)), 0.9);
    }

    #[test]
    fn three_candidate_pool_matches_direct_arithmetic() {
        let pool = CandidatePool {
            query_id: "q".into(),
            candidates: vec![
                ScoredCandidate::new("a", 0.9, Label::Poison).with_penalties(penalties(6.0, 0.0)),
                ScoredCandidate::new("b", 0.8, Label::Clean),
                ScoredCandidate::new("c", 0.7, Label::Clean),
            ],
        };
        let cfg = RerankConfig { k: 2, ..Default::default() };
        let out = rerank_pool(&pool, &cfg).unwrap();
        // |D| = 3 -> m = 2 -> level 1/3 -> first order statistic.
        assert_eq!(out.gate_center, 0.7);
        let w = 1.0 / (1.0 + (-(0.9f64 - 0.7)).exp());
        assert_relative_eq!(out.records[0].defended_score, 0.9 - w * 6.0);
        assert!(w * 6.0 > 0.2);
        assert_eq!(out.top_k_ids, vec!["b", "c"]);
        assert_eq!(out.records[0].defended_rank, 3);
        assert_eq!(out.records[0].base_rank, 1);
    }

    #[test]
    fn pool_of_size_k_keeps_everything() {
        let pool = CandidatePool {
            query_id: "q".into(),
            candidates: (0..4)
                .map(|i| {
                    ScoredCandidate::new(format!("p{i}"), f64::from(i) * 0.1, Label::Clean)
                        .with_penalties(penalties(f64::from(i), 1.0))
                })
                .collect(),
        };
        let out = rerank_pool(&pool, &RerankConfig { k: 4, ..Default::default() }).unwrap();
        let mut ids = out.top_k_ids.clone();
        ids.sort();
        assert_eq!(ids, vec!["p0", "p1", "p2", "p3"]);
    }

    #[test]
    fn ties_break_by_base_score_then_id() {
        let pool = CandidatePool {
            query_id: "q".into(),
            candidates: vec![
                ScoredCandidate::new("b", 0.5, Label::Clean),
                ScoredCandidate::new("a", 0.5, Label::Clean),
                ScoredCandidate::new("c", 0.6, Label::Clean),
            ],
        };
        let out = rerank_pool(&pool, &RerankConfig { k: 3, ..Default::default() }).unwrap();
        assert_eq!(out.top_k_ids, vec!["c", "a", "b"]);
    }

    #[test]
    fn rejects_bad_pools() {
        let cfg = RerankConfig::default();
        let empty = CandidatePool { query_id: "q".into(), candidates: vec![] };
        assert!(rerank_pool(&empty, &cfg).is_err());
        let nan = CandidatePool {
            query_id: "q".into(),
            candidates: vec![ScoredCandidate::new("a", f64::NAN, Label::Clean)],
        };
        assert!(matches!(rerank_pool(&nan, &cfg), Err(Error::Numerical(_))));
        let dup = CandidatePool {
            query_id: "q".into(),
            candidates: vec![
                ScoredCandidate::new("a", 0.1, Label::Clean),
                ScoredCandidate::new("a", 0.2, Label::Clean),
            ],
        };
        assert!(rerank_pool(&dup, &cfg).is_err());
    }

    #[test]
    fn rank_drop_traced_example() {
        let out = rank_drop_select(&["a", "b", "c", "d"], &["a", "c", "d", "b"], 3, 0.34).unwrap();
        assert_eq!(out, vec!["a", "c", "d"]);
    }

    #[test]
    fn rank_drop_identical_rankings() {
        let ids: Vec<String> = (0..10).map(|i| format!("p{i}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        // k = 4, rho = 0.5 -> m = 2: ranks 3 and 4 leave, ranks 5 and 6 come in.
        let out = rank_drop_select(&refs, &refs, 4, 0.5).unwrap();
        assert_eq!(out, vec!["p0", "p1", "p4", "p5"]);
        // rho -> 0 still removes one.
        let out = rank_drop_select(&refs, &refs, 4, 1e-9).unwrap();
        assert_eq!(out, vec!["p0", "p1", "p2", "p4"]);
    }

    #[test]
    fn rank_drop_removes_the_demoted_member() {
        let base = ["a", "b", "c", "d", "e"];
        let defended = ["b", "c", "d", "e", "a"];
        let out = rank_drop_select(&base, &defended, 2, 0.1).unwrap();
        assert_eq!(out, vec!["b", "c"]);
        let whole = rank_drop_select(&base, &defended, 9, 0.1).unwrap();
        assert_eq!(whole, base.to_vec());
        assert!(rank_drop_select(&base, &["a", "b"], 2, 0.1).is_err());
        assert!(rank_drop_select(&base, &["a", "b", "c", "d", "x"], 2, 0.1).is_err());
    }

    #[test]
    fn rank_drop_mode_through_rerank() {
        let pool = CandidatePool {
            query_id: "q".into(),
            candidates: vec![
                ScoredCandidate::new("a", 0.9, Label::Poison).with_penalties(penalties(6.0, 1.0)),
                ScoredCandidate::new("b", 0.8, Label::Clean),
                ScoredCandidate::new("c", 0.7, Label::Clean),
                ScoredCandidate::new("d", 0.6, Label::Clean),
            ],
        };
        let cfg = RerankConfig {
            k: 2,
            selection_mode: SelectionMode::RankDrop,
            rank_drop_rho: 0.5,
            ..Default::default()
        };
        let out = rerank_pool(&pool, &cfg).unwrap();
        assert_eq!(out.top_k_ids, vec!["b", "c"]);
    }
}
