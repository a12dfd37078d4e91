//! Experiment orchestration: configuration, the generate, attack, probe,
//! rerank and measure pipeline, bounded pools, factor sweeps and report
//! emission.
//!
//! Every random draw is derived from the master seed and item identifiers,
//! and all parallel work is collected in input order, so artifacts are
//! byte-identical across runs with the same configuration.

pub mod dump;
pub mod io;

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forge::{gen_corpus, poison_corpus, score_pool, AttackTrace, PoisonRecipe, QueryPool, SyntheticCorpusSpec};
use crate::mechanism::{simulate_grid, MechanismGrid};
use crate::metrics::{penalty_distributions, poison_hit_rate, poison_recall_rate, records_shift_stats, RankedLabels};
use crate::rerank::{
    base_ranking, gate_center, gate_weight, rank_drop_select, rerank_pool, CandidatePool, CandidateRecord,
    DefendedRanking, Label, RerankConfig, ScoredCandidate, SelectionMode, Variant,
};
use crate::retriever::{signature_for_pair, EncoderConfig, PerturbationSpec, ProbeSpec, TinyEncoderParams};
use crate::seeding::derive_seed;
use crate::signature::{compute_penalties, GradientSignature, PairId, PenaltyBreakdown, PenaltyConfig, PerturbationKind};

use self::dump::{DumpRecord, SignatureDump};
use self::io::{csv_bytes, jsonl_bytes, ArtifactSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum PoolMode {
    #[default]
    Full,
    /// Only the top `size` candidates by base score are reranked.
    Bounded { size: usize },
}

/// Factor grid for [`sweep`]. An empty list keeps the experiment's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub runs: Vec<usize>,
    pub layers: Vec<usize>,
    pub kinds: Vec<PerturbationKind>,
    pub backbone_seeds: Vec<u64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            runs: vec![4, 8, 16, 20, 32],
            layers: Vec::new(),
            kinds: Vec::new(),
            backbone_seeds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed for the corpus, attack, perturbations and query split.
    /// Overrides `corpus.seed`.
    pub seed: u64,
    /// Encoder initialization seed; defaults to `seed`. Overrides
    /// `encoder.seed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backbone_seed: Option<u64>,
    pub runs: usize,
    pub k_list: Vec<usize>,
    pub variants: Vec<Variant>,
    /// Fraction of queries held out for configuration selection.
    pub split: f64,
    /// Candidates whose full-gate weight falls below this are not probed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_floor: Option<f64>,
    pub include_failed_attacks: bool,
    /// A query counts as attacked when a poison reaches this base rank.
    pub attack_success_k: usize,
    pub exclude_poison_free: bool,
    pub write_signatures: bool,
    pub pool_mode: PoolMode,
    pub encoder: EncoderConfig,
    pub corpus: SyntheticCorpusSpec,
    pub recipe: PoisonRecipe,
    pub perturbation: PerturbationSpec,
    pub probe: ProbeSpec,
    pub penalty: PenaltyConfig,
    pub rerank: RerankConfig,
    pub sweep: SweepGrid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            backbone_seed: None,
            runs: 20,
            k_list: vec![5, 10, 20, 30, 40, 50],
            variants: Variant::ALL.to_vec(),
            split: 0.2,
            probe_floor: None,
            include_failed_attacks: false,
            attack_success_k: 5,
            exclude_poison_free: false,
            write_signatures: false,
            pool_mode: PoolMode::Full,
            encoder: EncoderConfig::default(),
            corpus: SyntheticCorpusSpec::default(),
            recipe: PoisonRecipe::default(),
            perturbation: PerturbationSpec::default(),
            probe: ProbeSpec::default(),
            penalty: PenaltyConfig::default(),
            rerank: RerankConfig::default(),
            sweep: SweepGrid::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Propagates the master and backbone seeds into the sub-configs.
    pub fn resolved(mut self) -> Self {
        self.corpus.seed = self.seed;
        self.encoder.seed = self.backbone_seed.unwrap_or(self.seed);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolved()
    }

    /// Candidates per query before any bound is applied.
    pub fn pool_size(&self) -> usize {
        self.corpus.clean_per_query + self.corpus.poisons_per_query
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.corpus.validate(self.encoder.vocab_size, self.encoder.max_len)?;
        self.perturbation.validate()?;
        self.penalty.validate()?;
        self.rerank.validate()?;
        if self.probe.layer == 0 || self.probe.layer > self.encoder.num_blocks {
            return Err(Error::Config(format!(
                "probe layer {} outside 1..={}",
                self.probe.layer, self.encoder.num_blocks
            )));
        }
        if self.runs < 2 {
            return Err(Error::Config(format!("runs must be at least 2, got {}", self.runs)));
        }
        if self.k_list.is_empty() || self.k_list.contains(&0) {
            return Err(Error::Config("k_list must hold positive values".into()));
        }
        let max_k = self.max_k();
        if max_k > self.pool_size() {
            return Err(Error::Config(format!(
                "K = {max_k} exceeds the pool size {}",
                self.pool_size()
            )));
        }
        if let PoolMode::Bounded { size } = self.pool_mode {
            if size < max_k {
                return Err(Error::Config(format!("bounded pool size {size} is below the largest K {max_k}")));
            }
        }
        if self.variants.is_empty() {
            return Err(Error::Config("at least one variant is required".into()));
        }
        if !(0.0..1.0).contains(&self.split) {
            return Err(Error::Config(format!("split must lie in [0, 1), got {}", self.split)));
        }
        if let Some(f) = self.probe_floor {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("probe_floor must lie in [0, 1], got {f}")));
            }
        }
        if self.attack_success_k == 0 {
            return Err(Error::Config("attack_success_k must be at least 1".into()));
        }
        if self.recipe.shortlist_size == 0 {
            return Err(Error::Config("shortlist_size must be at least 1".into()));
        }
        Ok(())
    }

    fn max_k(&self) -> usize {
        self.k_list.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Select,
    Eval,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Select, Split::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Select => "select",
            Split::Eval => "eval",
        }
    }
}

/// Seeded split: the `round(fraction * n)` queries with the smallest hashed
/// ids form the selection split.
pub fn assign_splits(query_ids: &[&str], fraction: f64, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..query_ids.len()).collect();
    order.sort_by_key(|&i| (derive_seed(seed, &[b"split", query_ids[i].as_bytes()]), i));
    let n_select = (fraction * query_ids.len() as f64).round() as usize;
    let mut out = vec![Split::Eval; query_ids.len()];
    for &i in order.iter().take(n_select) {
        out[i] = Split::Select;
    }
    out
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

pub fn build_encoder(cfg: &ExperimentConfig) -> Result<TinyEncoderParams> {
    TinyEncoderParams::new(cfg.encoder.clone())
}

/// Clean corpus plus crafted poisons.
pub fn build_corpus(cfg: &ExperimentConfig, params: &TinyEncoderParams) -> Result<(Vec<QueryPool>, Vec<AttackTrace>)> {
    let mut pools = stage("corpus", gen_corpus(&cfg.corpus, cfg.encoder.vocab_size, cfg.encoder.max_len))?;
    let traces = stage("attack", poison_corpus(&mut pools, &cfg.corpus, &cfg.recipe, params))?;
    Ok((pools, traces))
}

/// One query's reranking pool before penalties are attached.
#[derive(Debug, Clone)]
pub struct PreparedQuery {
    pub pool_index: usize,
    pub split: Split,
    pub total_poisons: usize,
    /// Indices into the query's passages, in pool order.
    pub members: Vec<usize>,
    pub pool: CandidatePool,
    /// Whether each member gets probed.
    pub probed: Vec<bool>,
}

/// Base-scores every pool, applies the bound and the probe floor, and
/// assigns splits.
pub fn prepare_queries(
    cfg: &ExperimentConfig,
    params: &TinyEncoderParams,
    pools: &[QueryPool],
) -> Result<Vec<PreparedQuery>> {
    let ids: Vec<&str> = pools.iter().map(|p| p.query_id.as_str()).collect();
    let splits = assign_splits(&ids, cfg.split, cfg.seed);
    let gate_cfg = Variant::Full.apply(&cfg.rerank);
    pools
        .par_iter()
        .zip(splits)
        .enumerate()
        .map(|(pool_index, (pool, split))| {
            let scored = score_pool(pool, params)?;
            let mut members: Vec<usize> = match cfg.pool_mode {
                PoolMode::Full => (0..scored.candidates.len()).collect(),
                PoolMode::Bounded { size } => {
                    if size > scored.candidates.len() {
                        log::warn!(
                            "bounded pool size {size} exceeds the {} candidates of {}; using all",
                            scored.candidates.len(),
                            pool.query_id
                        );
                    }
                    base_ranking(&scored.candidates).into_iter().take(size).collect()
                }
            };
            members.sort_unstable();
            let candidates: Vec<ScoredCandidate> = members.iter().map(|&i| scored.candidates[i].clone()).collect();
            let probed = match cfg.probe_floor {
                None => vec![true; members.len()],
                Some(floor) => {
                    let scores: Vec<f64> = candidates.iter().map(|c| c.base_score).collect();
                    let mu = gate_center(&scores)?;
                    scores.iter().map(|&s| gate_weight(s, mu, &gate_cfg) >= floor).collect()
                }
            };
            Ok(PreparedQuery {
                pool_index,
                split,
                total_poisons: pool.poisons().count(),
                members,
                pool: CandidatePool {
                    query_id: pool.query_id.clone(),
                    candidates,
                },
                probed,
            })
        })
        .collect()
}

/// Signatures for every probed candidate, shaped like the prepared pools.
pub fn probe_queries(
    params: &TinyEncoderParams,
    pools: &[QueryPool],
    prepared: &[PreparedQuery],
    probe: &ProbeSpec,
    perturbation: &PerturbationSpec,
    runs: usize,
    seed: u64,
) -> Result<Vec<Vec<Option<GradientSignature>>>> {
    probe.validate(params)?;
    let jobs: Vec<(usize, usize)> = prepared
        .iter()
        .enumerate()
        .flat_map(|(qi, pq)| (0..pq.members.len()).filter(move |&m| pq.probed[m]).map(move |m| (qi, m)))
        .collect();
    let sigs: Vec<GradientSignature> = jobs
        .par_iter()
        .map(|&(qi, m)| {
            let pq = &prepared[qi];
            let pool = &pools[pq.pool_index];
            let passage = &pool.passages[pq.members[m]];
            signature_for_pair(
                &PairId::new(&pool.query_id, &passage.passage_id),
                &pool.query,
                &passage.tokens,
                params,
                probe,
                perturbation,
                runs,
                seed,
            )
        })
        .collect::<Result<_>>()?;
    let mut out: Vec<Vec<Option<GradientSignature>>> =
        prepared.iter().map(|pq| vec![None; pq.members.len()]).collect();
    for ((qi, m), sig) in jobs.into_iter().zip(sigs) {
        out[qi][m] = Some(sig);
    }
    Ok(out)
}

pub fn penalties_for(
    signatures: &[Vec<Option<GradientSignature>>],
    cfg: &PenaltyConfig,
    runs: Option<usize>,
) -> Result<Vec<Vec<Option<PenaltyBreakdown>>>> {
    signatures
        .par_iter()
        .map(|row| {
            row.iter()
                .map(|sig| {
                    sig.as_ref()
                        .map(|s| match runs {
                            Some(r) => compute_penalties(&s.prefix(r)?, cfg),
                            None => compute_penalties(s, cfg),
                        })
                        .transpose()
                })
                .collect()
        })
        .collect()
}

/// A defended ranking of one query under one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRanking {
    pub variant: Variant,
    pub split: Split,
    pub total_poisons: usize,
    pub ranking: DefendedRanking,
}

/// Pools with penalties attached, ready for reranking.
#[derive(Debug, Clone)]
pub struct ScoredQuery {
    pub split: Split,
    pub total_poisons: usize,
    pub pool: CandidatePool,
}

pub fn attach_penalties(prepared: &[PreparedQuery], penalties: &[Vec<Option<PenaltyBreakdown>>]) -> Vec<ScoredQuery> {
    prepared
        .iter()
        .zip(penalties)
        .map(|(pq, row)| {
            let mut pool = pq.pool.clone();
            for (c, p) in pool.candidates.iter_mut().zip(row) {
                c.penalties = p.clone();
            }
            ScoredQuery {
                split: pq.split,
                total_poisons: pq.total_poisons,
                pool,
            }
        })
        .collect()
}

/// Reranks every query under every variant; output is variant-major.
pub fn rank_queries(queries: &[ScoredQuery], rerank: &RerankConfig, variants: &[Variant]) -> Result<Vec<QueryRanking>> {
    let mut out = Vec::with_capacity(queries.len() * variants.len());
    for &variant in variants {
        let vcfg = variant.apply(rerank);
        let ranked: Vec<DefendedRanking> =
            queries.par_iter().map(|q| rerank_pool(&q.pool, &vcfg)).collect::<Result<_>>()?;
        out.extend(queries.iter().zip(ranked).map(|(q, ranking)| QueryRanking {
            variant,
            split: q.split,
            total_poisons: q.total_poisons,
            ranking,
        }));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub variant: Variant,
    pub split: Split,
    pub k: usize,
    pub queries: usize,
    pub phr_base: f64,
    pub phr_defended: f64,
    pub prr_base: f64,
    pub prr_defended: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub variant: Variant,
    pub split: Split,
    pub class: Label,
    pub direction: String,
    pub count: usize,
    pub max: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyRow {
    pub variant: Variant,
    pub split: Split,
    pub class: Label,
    pub signal: String,
    pub count: usize,
    pub mean: f64,
    pub q10: f64,
    pub q50: f64,
    pub q90: f64,
}

/// One candidate of one defended ranking, the unit of `rankings.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRow {
    pub variant: Variant,
    pub query_id: String,
    pub split: Split,
    pub total_poisons: usize,
    pub gate_center: f64,
    pub passage_id: String,
    pub label: Label,
    pub base_score: f64,
    pub gate_weight: f64,
    pub p_dr: f64,
    pub p_rep: f64,
    pub penalty_sum: f64,
    pub defended_score: f64,
    pub base_rank: usize,
    pub defended_rank: usize,
}

pub fn ranking_rows(rankings: &[QueryRanking]) -> Vec<RankingRow> {
    rankings
        .iter()
        .flat_map(|qr| {
            qr.ranking.records.iter().map(move |r| RankingRow {
                variant: qr.variant,
                query_id: qr.ranking.query_id.clone(),
                split: qr.split,
                total_poisons: qr.total_poisons,
                gate_center: qr.ranking.gate_center,
                passage_id: r.passage_id.clone(),
                label: r.label,
                base_score: r.base_score,
                gate_weight: r.gate_weight,
                p_dr: r.p_dr,
                p_rep: r.p_rep,
                penalty_sum: r.penalty_sum,
                defended_score: r.defended_score,
                base_rank: r.base_rank,
                defended_rank: r.defended_rank,
            })
        })
        .collect()
}

/// Inverse of [`ranking_rows`]; rows of one (variant, query) must be
/// contiguous. `top_k_ids` is rebuilt for `k`.
pub fn rankings_from_rows(rows: &[RankingRow], k: usize) -> Result<Vec<QueryRanking>> {
    let mut out: Vec<QueryRanking> = Vec::new();
    for row in rows {
        let record = CandidateRecord {
            passage_id: row.passage_id.clone(),
            label: row.label,
            base_score: row.base_score,
            gate_weight: row.gate_weight,
            p_dr: row.p_dr,
            p_rep: row.p_rep,
            penalty_sum: row.penalty_sum,
            defended_score: row.defended_score,
            base_rank: row.base_rank,
            defended_rank: row.defended_rank,
        };
        match out.last_mut() {
            Some(last) if last.variant == row.variant && last.ranking.query_id == row.query_id => {
                last.ranking.records.push(record)
            }
            _ => {
                if out.iter().any(|q| q.variant == row.variant && q.ranking.query_id == row.query_id) {
                    return Err(Error::Format(format!(
                        "rows for ({}, {}) are not contiguous",
                        row.variant, row.query_id
                    )));
                }
                out.push(QueryRanking {
                    variant: row.variant,
                    split: row.split,
                    total_poisons: row.total_poisons,
                    ranking: DefendedRanking {
                        query_id: row.query_id.clone(),
                        gate_center: row.gate_center,
                        records: vec![record],
                        top_k_ids: Vec::new(),
                    },
                })
            }
        }
    }
    for qr in &mut out {
        let n = qr.ranking.records.len();
        let mut ranks: Vec<usize> = qr.ranking.records.iter().map(|r| r.defended_rank).collect();
        ranks.sort_unstable();
        if ranks != (1..=n).collect::<Vec<_>>() {
            return Err(Error::Format(format!(
                "defended ranks of ({}, {}) are not a permutation of 1..={n}",
                qr.variant, qr.ranking.query_id
            )));
        }
        qr.ranking.top_k_ids = qr.ranking.defended_order().iter().take(k).map(|r| r.passage_id.clone()).collect();
    }
    Ok(out)
}

/// Labels of the defended Top-`k`.
fn defended_top(qr: &QueryRanking, k: usize, rerank: &RerankConfig) -> Result<Vec<Label>> {
    let order = qr.ranking.defended_order();
    match rerank.selection_mode {
        SelectionMode::FusedScore => Ok(order.iter().take(k).map(|r| r.label).collect()),
        SelectionMode::RankDrop => {
            let base: Vec<&str> = qr.ranking.base_order().iter().map(|r| r.passage_id.as_str()).collect();
            let defended: Vec<&str> = order.iter().map(|r| r.passage_id.as_str()).collect();
            let chosen = rank_drop_select(&base, &defended, k, rerank.rank_drop_rho)?;
            let label_of: BTreeMap<&str, Label> =
                qr.ranking.records.iter().map(|r| (r.passage_id.as_str(), r.label)).collect();
            Ok(chosen.iter().map(|id| label_of[id.as_str()]).collect())
        }
    }
}

fn is_attacked(qr: &QueryRanking, k: usize) -> bool {
    qr.ranking.base_order().iter().take(k).any(|r| r.label == Label::Poison)
}

/// Whether each query is included in the reported metrics.
pub fn included(qr: &QueryRanking, cfg: &ExperimentConfig) -> bool {
    cfg.include_failed_attacks || is_attacked(qr, cfg.attack_success_k)
}

/// Metrics per variant, split and K, plus rank shifts and signal
/// distributions per variant and split.
pub fn measure(rankings: &[QueryRanking], cfg: &ExperimentConfig) -> Result<Evaluation> {
    let mut metrics = Vec::new();
    let mut shifts = Vec::new();
    let mut penalties = Vec::new();
    let mut variants: Vec<Variant> = Vec::new();
    for qr in rankings {
        if !variants.contains(&qr.variant) {
            variants.push(qr.variant);
        }
    }
    for &variant in &variants {
        for split in Split::ALL {
            let group: Vec<&QueryRanking> = rankings
                .iter()
                .filter(|qr| qr.variant == variant && qr.split == split && included(qr, cfg))
                .collect();
            for &k in &cfg.k_list {
                let mut base = Vec::with_capacity(group.len());
                let mut defended = Vec::with_capacity(group.len());
                for qr in &group {
                    let base_labels = qr.ranking.base_order().iter().take(k).map(|r| r.label).collect();
                    base.push(RankedLabels {
                        ranked: base_labels,
                        total_poisons: qr.total_poisons,
                    });
                    defended.push(RankedLabels {
                        ranked: defended_top(qr, k, &cfg.rerank)?,
                        total_poisons: qr.total_poisons,
                    });
                }
                let eps = cfg.penalty.epsilon;
                metrics.push(MetricRow {
                    variant,
                    split,
                    k,
                    queries: group.len(),
                    phr_base: poison_hit_rate(&base, k),
                    phr_defended: poison_hit_rate(&defended, k),
                    prr_base: poison_recall_rate(&base, k, eps, cfg.exclude_poison_free),
                    prr_defended: poison_recall_rate(&defended, k, eps, cfg.exclude_poison_free),
                });
            }
            let records = group.iter().flat_map(|qr| qr.ranking.records.iter());
            let s = records_shift_stats(records.clone());
            for (class, direction, summary) in [
                (Label::Poison, "up", s.poison_up),
                (Label::Poison, "down", s.poison_down),
                (Label::Clean, "up", s.clean_up),
                (Label::Clean, "down", s.clean_down),
            ] {
                shifts.push(ShiftRow {
                    variant,
                    split,
                    class,
                    direction: direction.into(),
                    count: summary.count,
                    max: summary.max,
                    mean: summary.mean,
                });
            }
            for d in penalty_distributions(records) {
                penalties.push(PenaltyRow {
                    variant,
                    split,
                    class: d.label,
                    signal: d.signal.as_str().into(),
                    count: d.count,
                    mean: d.mean,
                    q10: d.q10,
                    q50: d.q50,
                    q90: d.q90,
                });
            }
        }
    }
    Ok(Evaluation {
        metrics,
        shifts,
        penalties,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Evaluation {
    pub metrics: Vec<MetricRow>,
    pub shifts: Vec<ShiftRow>,
    pub penalties: Vec<PenaltyRow>,
}

impl Evaluation {
    pub fn metric(&self, variant: Variant, split: Split, k: usize) -> Option<&MetricRow> {
        self.metrics
            .iter()
            .find(|m| m.variant == variant && m.split == split && m.k == k)
    }

    pub fn add_to(&self, set: &mut ArtifactSet) -> Result<()> {
        set.add("metrics.csv", csv_bytes(&self.metrics)?);
        set.add("rank_shift.csv", csv_bytes(&self.shifts)?);
        set.add("penalties.csv", csv_bytes(&self.penalties)?);
        Ok(())
    }
}

/// Dump of every probed signature with base scores and labels.
pub fn signature_dump(
    prepared: &[PreparedQuery],
    signatures: &[Vec<Option<GradientSignature>>],
    source: &str,
    runs: usize,
    params: &TinyEncoderParams,
    probe: &ProbeSpec,
    kind: PerturbationKind,
) -> SignatureDump {
    let mut dump = SignatureDump::new(runs, probe.dim(params), probe.layer, kind, source);
    for (pq, row) in prepared.iter().zip(signatures) {
        for (c, sig) in pq.pool.candidates.iter().zip(row) {
            if let Some(sig) = sig {
                dump.records.push(DumpRecord {
                    base_score: c.base_score,
                    label: c.label,
                    signature: sig.clone(),
                });
            }
        }
    }
    dump
}

/// Groups dump records into pools by query (first-appearance order) with
/// penalties computed from each signature.
pub fn pools_from_dump(dump: &SignatureDump, penalty: &PenaltyConfig) -> Result<Vec<CandidatePool>> {
    let scored: Vec<ScoredCandidate> = dump
        .records
        .par_iter()
        .map(|rec| {
            let pen = compute_penalties(&rec.signature, penalty)?;
            Ok(ScoredCandidate::new(rec.pair().passage_id.clone(), rec.base_score, rec.label).with_penalties(pen))
        })
        .collect::<Result<_>>()?;
    let mut pools: Vec<CandidatePool> = Vec::new();
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for (rec, cand) in dump.records.iter().zip(scored) {
        let qid = rec.pair().query_id.as_str();
        let slot = *index.entry(qid).or_insert_with(|| {
            pools.push(CandidatePool {
                query_id: qid.to_string(),
                candidates: Vec::new(),
            });
            pools.len() - 1
        });
        pools[slot].candidates.push(cand);
    }
    Ok(pools)
}

/// Everything one pipeline run produces, in memory.
pub struct PipelineOutput {
    pub artifacts: ArtifactSet,
    pub evaluation: Evaluation,
    pub rankings: Vec<QueryRanking>,
    pub attack_traces: Vec<AttackTrace>,
}

/// Generate, attack, probe, rerank under every variant, and measure.
/// Artifacts are written to `out_dir` only after every stage succeeded.
pub fn run_pipeline(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<PipelineOutput> {
    stage("config", cfg.validate())?;
    let params = stage("encoder", build_encoder(cfg))?;
    let (pools, attack_traces) = build_corpus(cfg, &params)?;
    let prepared = stage("probe", prepare_queries(cfg, &params, &pools))?;
    log::info!("probing {} queries with R = {}", prepared.len(), cfg.runs);
    let signatures = stage(
        "probe",
        probe_queries(&params, &pools, &prepared, &cfg.probe, &cfg.perturbation, cfg.runs, cfg.seed),
    )?;
    let penalties = stage("probe", penalties_for(&signatures, &cfg.penalty, None))?;
    let scored = attach_penalties(&prepared, &penalties);
    let rankings = stage("rerank", rank_queries(&scored, &cfg.rerank, &cfg.variants))?;
    let evaluation = stage("measure", measure(&rankings, cfg))?;

    let mut artifacts = ArtifactSet::default();
    stage("write", (|| {
        artifacts.add("config.toml", cfg.to_toml()?.into_bytes());
        artifacts.add("corpus.jsonl", jsonl_bytes(&pools)?);
        artifacts.add("attack_traces.jsonl", jsonl_bytes(&attack_traces)?);
        artifacts.add("rankings.csv", csv_bytes(&ranking_rows(&rankings))?);
        evaluation.add_to(&mut artifacts)?;
        if cfg.write_signatures {
            let dump = signature_dump(
                &prepared,
                &signatures,
                "pipeline",
                cfg.runs,
                &params,
                &cfg.probe,
                cfg.perturbation.kind,
            );
            let mut bytes = Vec::new();
            dump.write_binary(&mut bytes)?;
            artifacts.add("signatures.bin", bytes);
        }
        if let Some(dir) = out_dir {
            artifacts.write_all(dir)?;
        }
        Ok(())
    })())?;
    Ok(PipelineOutput {
        artifacts,
        evaluation,
        rankings,
        attack_traces,
    })
}

/// Bounded-pool run; identical to [`run_pipeline`] with `pool_mode`
/// forced to `Bounded { size }`.
pub fn run_bounded(cfg: &ExperimentConfig, size: usize, out_dir: Option<&Path>) -> Result<PipelineOutput> {
    let cfg = ExperimentConfig {
        pool_mode: PoolMode::Bounded { size },
        ..cfg.clone()
    };
    run_pipeline(&cfg, out_dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub backbone_seed: u64,
    pub kind: PerturbationKind,
    pub layer: usize,
    pub runs: usize,
    /// Probe-gradient evaluations this setting costs: `runs x probed pairs`.
    pub gradient_evals: usize,
    pub variant: Variant,
    pub split: Split,
    pub k: usize,
    pub queries: usize,
    pub phr_base: f64,
    pub phr_defended: f64,
    pub prr_base: f64,
    pub prr_defended: f64,
}

/// Cartesian sweep over backbone seed, perturbation kind, probe layer and
/// R. Each backbone gets one corpus shared by all its settings, and each
/// (kind, layer) probes once at the largest R; smaller R reuse the leading
/// runs, which is exact because runs are seeded by index.
pub fn sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    stage("config", cfg.validate())?;
    let grid = &cfg.sweep;
    let mut runs = if grid.runs.is_empty() { vec![cfg.runs] } else { grid.runs.clone() };
    runs.sort_unstable();
    runs.dedup();
    if runs[0] < 2 {
        return Err(Error::Config("sweep runs must be at least 2".into()).in_stage("config"));
    }
    let max_runs = *runs.last().unwrap_or(&cfg.runs);
    let layers = if grid.layers.is_empty() { vec![cfg.probe.layer] } else { grid.layers.clone() };
    let kinds = if grid.kinds.is_empty() { vec![cfg.perturbation.kind] } else { grid.kinds.clone() };
    let backbones = if grid.backbone_seeds.is_empty() {
        vec![cfg.backbone_seed.unwrap_or(cfg.seed)]
    } else {
        grid.backbone_seeds.clone()
    };

    let mut rows = Vec::new();
    for &backbone in &backbones {
        let bcfg = ExperimentConfig {
            backbone_seed: Some(backbone),
            ..cfg.clone()
        }
        .resolved();
        let params = stage("encoder", build_encoder(&bcfg))?;
        let (pools, _) = build_corpus(&bcfg, &params)?;
        let prepared = stage("probe", prepare_queries(&bcfg, &params, &pools))?;
        let probed_pairs: usize = prepared.iter().map(|pq| pq.probed.iter().filter(|&&p| p).count()).sum();
        for &kind in &kinds {
            for &layer in &layers {
                let probe = ProbeSpec { layer, ..bcfg.probe };
                let pert = PerturbationSpec { kind, ..bcfg.perturbation };
                log::info!("sweep: backbone {backbone}, {kind}, layer {layer}, R up to {max_runs}");
                let sigs = stage(
                    "probe",
                    probe_queries(&params, &pools, &prepared, &probe, &pert, max_runs, bcfg.seed),
                )?;
                for &r in &runs {
                    let penalties = stage("probe", penalties_for(&sigs, &bcfg.penalty, Some(r)))?;
                    let scored = attach_penalties(&prepared, &penalties);
                    let rankings = stage("rerank", rank_queries(&scored, &bcfg.rerank, &bcfg.variants))?;
                    let eval = stage("measure", measure(&rankings, &bcfg))?;
                    rows.extend(eval.metrics.into_iter().map(|m| SweepRow {
                        backbone_seed: backbone,
                        kind,
                        layer,
                        runs: r,
                        gradient_evals: r * probed_pairs,
                        variant: m.variant,
                        split: m.split,
                        k: m.k,
                        queries: m.queries,
                        phr_base: m.phr_base,
                        phr_defended: m.phr_defended,
                        prr_base: m.prr_base,
                        prr_defended: m.prr_defended,
                    }));
                }
            }
        }
    }
    Ok(rows)
}

pub fn mechanism_csv(grid: &MechanismGrid, penalty: &PenaltyConfig) -> Result<Vec<u8>> {
    csv_bytes(&simulate_grid(grid, penalty)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            seed: 11,
            runs: 4,
            k_list: vec![1, 3, 5],
            corpus: SyntheticCorpusSpec {
                num_queries: 5,
                clean_per_query: 8,
                poisons_per_query: 2,
                passage_len: 16,
                query_len: 6,
                ..Default::default()
            },
            recipe: PoisonRecipe {
                budget_iters: 8,
                edit_positions: 10,
                ..Default::default()
            },
            ..Default::default()
        }
        .resolved()
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = tiny_config();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        let partial = ExperimentConfig::from_toml("seed = 4\nruns = 8\n[corpus]\nnum_queries = 3\n").unwrap();
        assert_eq!(partial.corpus.seed, 4);
        assert_eq!(partial.encoder.seed, 4);
        assert_eq!(partial.corpus.num_queries, 3);
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        let bounded = ExperimentConfig::from_toml("[pool_mode]\nmode = \"bounded\"\nsize = 12\n").unwrap();
        assert_eq!(bounded.pool_mode, PoolMode::Bounded { size: 12 });
    }

    #[test]
    fn config_validation() {
        let cfg = tiny_config();
        assert!(cfg.validate().is_ok());
        let bad = ExperimentConfig { k_list: vec![11], ..cfg.clone() };
        assert!(bad.validate().is_err());
        let bad = ExperimentConfig { pool_mode: PoolMode::Bounded { size: 4 }, ..cfg.clone() };
        assert!(bad.validate().is_err());
        let bad = ExperimentConfig { runs: 1, ..cfg.clone() };
        assert!(bad.validate().is_err());
        let bad = ExperimentConfig { split: 1.0, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let ids: Vec<String> = (0..100).map(crate::forge::query_id).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let s = assign_splits(&refs, 0.2, 3);
        assert_eq!(s.iter().filter(|&&x| x == Split::Select).count(), 20);
        assert_eq!(s, assign_splits(&refs, 0.2, 3));
        assert_ne!(s, assign_splits(&refs, 0.2, 4));
        assert!(assign_splits(&refs, 0.0, 3).iter().all(|&x| x == Split::Eval));
    }

    #[test]
    fn pipeline_emits_every_variant_and_k() {
        let cfg = tiny_config();
        let out = run_pipeline(&cfg, None).unwrap();
        assert_eq!(out.evaluation.metrics.len(), 5 * 2 * 3);
        let names: Vec<&str> = out.artifacts.names().collect();
        for f in ["config.toml", "corpus.jsonl", "attack_traces.jsonl", "rankings.csv", "metrics.csv"] {
            assert!(names.contains(&f), "{f} missing");
        }
        for m in &out.evaluation.metrics {
            if m.variant == Variant::NoPenalties {
                assert_eq!(m.prr_base, m.prr_defended);
                assert_eq!(m.phr_base, m.phr_defended);
            }
        }
    }

    #[test]
    fn rankings_csv_round_trip() {
        let cfg = tiny_config();
        let out = run_pipeline(&cfg, None).unwrap();
        let rows = ranking_rows(&out.rankings);
        let back = rankings_from_rows(&rows, cfg.rerank.k).unwrap();
        assert_eq!(back, out.rankings);
        assert_eq!(measure(&back, &cfg).unwrap(), out.evaluation);
    }

    #[test]
    fn sweep_prefix_matches_direct_probe() {
        let cfg = ExperimentConfig {
            sweep: SweepGrid {
                runs: vec![2, 4],
                ..Default::default()
            },
            variants: vec![Variant::Full],
            ..tiny_config()
        };
        let rows = sweep(&cfg).unwrap();
        let direct = run_pipeline(&cfg, None).unwrap();
        for m in &direct.evaluation.metrics {
            let r = rows
                .iter()
                .find(|r| r.runs == 4 && r.split == m.split && r.k == m.k)
                .unwrap();
            assert_eq!((r.prr_defended, r.phr_defended), (m.prr_defended, m.phr_defended));
        }
        let evals: Vec<usize> = rows.iter().map(|r| r.gradient_evals).collect();
        assert!(evals.windows(2).all(|w| w[0] <= w[1]));
    }
}
