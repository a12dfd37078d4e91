//! Synthetic corpora and optimization-driven poisoned passages.
//!
//! Clean passages are drawn from a query-anchored token distribution. Poisons
//! start from random tokens and are edited by greedy coordinate ascent on the
//! retriever's base score. Because the encoder has no cross-token
//! interaction, a passage's pooled vector is the mean of per-token rows of
//! [`token_table`], so every candidate edit can be rescored exactly in
//! constant or `O(d)` time.

use std::ops::Range;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rerank::{base_ranking, CandidatePool, Label, ScoredCandidate};
use crate::retriever::{base_score, encode, token_table, TinyEncoderParams, TokenSeq};
use crate::seeding::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub num_queries: usize,
    pub clean_per_query: usize,
    pub poisons_per_query: usize,
    /// Tokens per query, marker included.
    pub query_len: usize,
    /// Tokens per passage, marker included.
    pub passage_len: usize,
    /// Distinct tokens in each query's topic.
    pub topic_size: usize,
    /// Larger values push passage tokens away from the query topic; the
    /// mean on-topic fraction of a clean passage is `1 / (1 + dispersion)`.
    pub topic_dispersion: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            num_queries: 100,
            clean_per_query: 50,
            poisons_per_query: 5,
            query_len: 12,
            passage_len: 48,
            topic_size: 24,
            topic_dispersion: 1.5,
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self, vocab_size: usize, max_len: usize) -> Result<()> {
        if self.num_queries == 0 || self.clean_per_query == 0 {
            return Err(Error::Config("corpus needs at least one query and one clean passage".into()));
        }
        for (name, len) in [("query_len", self.query_len), ("passage_len", self.passage_len)] {
            if len < 2 || len > max_len {
                return Err(Error::Config(format!("{name} must lie in 2..={max_len}, got {len}")));
            }
        }
        if self.topic_size == 0 || self.topic_size >= vocab_size {
            return Err(Error::Config(format!(
                "topic_size must lie in 1..{vocab_size}, got {}",
                self.topic_size
            )));
        }
        if self.topic_dispersion.is_nan() || self.topic_dispersion <= 0.0 {
            return Err(Error::Config("topic_dispersion must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub passage_id: String,
    pub label: Label,
    pub tokens: TokenSeq,
    /// Set on poisons that did not beat the query's success threshold.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack_failed: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPool {
    pub query_id: String,
    pub query: TokenSeq,
    pub passages: Vec<Passage>,
}

impl QueryPool {
    pub fn clean(&self) -> impl Iterator<Item = &Passage> {
        self.passages.iter().filter(|p| p.label == Label::Clean)
    }

    pub fn poisons(&self) -> impl Iterator<Item = &Passage> {
        self.passages.iter().filter(|p| p.label == Label::Poison)
    }
}

pub fn query_id(i: usize) -> String {
    format!("q{i:03}")
}

fn random_content_token<R: Rng>(rng: &mut R, vocab: usize) -> u32 {
    rng.gen_range(1..vocab as u32)
}

pub fn gen_corpus(spec: &SyntheticCorpusSpec, vocab_size: usize, max_len: usize) -> Result<Vec<QueryPool>> {
    spec.validate(vocab_size, max_len)?;
    let on_topic = 1.0 / (1.0 + spec.topic_dispersion);
    (0..spec.num_queries)
        .map(|qi| {
            let qid = query_id(qi);
            let mut rng = rng_for(spec.seed, &[b"corpus", qid.as_bytes()]);
            let topic: Vec<u32> = sample(&mut rng, vocab_size - 1, spec.topic_size)
                .into_iter()
                .map(|t| t as u32 + 1)
                .collect();
            let query_content: Vec<u32> = (1..spec.query_len)
                .map(|_| topic[rng.gen_range(0..topic.len())])
                .collect();
            let passages = (0..spec.clean_per_query)
                .map(|ci| {
                    // Per-passage affinity spreads relevance across the pool.
                    let affinity = (on_topic * rng.gen_range(0.25..1.75)).min(1.0);
                    let content: Vec<u32> = (1..spec.passage_len)
                        .map(|_| {
                            if rng.gen::<f64>() < affinity {
                                topic[rng.gen_range(0..topic.len())]
                            } else {
                                random_content_token(&mut rng, vocab_size)
                            }
                        })
                        .collect();
                    Ok(Passage {
                        passage_id: format!("{qid}-c{ci:02}"),
                        label: Label::Clean,
                        tokens: TokenSeq::from_content(&content)?,
                        attack_failed: None,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(QueryPool {
                query_id: qid,
                query: TokenSeq::from_content(&query_content)?,
                passages,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoisonRecipe {
    pub budget_iters: usize,
    /// Content slots (after the marker) open to edits.
    pub edit_positions: usize,
    /// Candidate tokens per step when the vocabulary is too large to scan.
    pub shortlist_size: usize,
    /// Vocabularies up to this size are scanned exhaustively.
    pub full_scan_max_vocab: usize,
    /// The poison must beat the query's clean passage at this rank.
    pub success_rank: usize,
}

impl Default for PoisonRecipe {
    fn default() -> Self {
        Self {
            budget_iters: 30,
            edit_positions: 30,
            shortlist_size: 16,
            full_scan_max_vocab: 1024,
            success_rank: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edit {
    pub iteration: usize,
    pub slot: usize,
    pub from: u32,
    pub to: u32,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    pub query_id: String,
    pub passage_id: String,
    pub initial_score: f64,
    pub final_score: f64,
    pub threshold: Option<f64>,
    pub edits: Vec<Edit>,
    pub iterations: usize,
    pub attack_failed: bool,
}

/// Reusable per-encoder precomputation for the attack.
pub struct AttackContext<'a> {
    params: &'a TinyEncoderParams,
    table: Vec<f64>,
    /// `V x V` Gram matrix of table rows; present when full scans are used.
    gram: Option<Vec<f64>>,
}

impl<'a> AttackContext<'a> {
    pub fn new(params: &'a TinyEncoderParams, recipe: &PoisonRecipe) -> Self {
        let table = token_table(params);
        let v = params.vocab_size();
        let d = params.dim();
        let gram = (v <= recipe.full_scan_max_vocab).then(|| {
            let mut g = vec![0.0; v * v];
            for i in 0..v {
                for j in i..v {
                    let x: f64 = (0..d).map(|k| table[i * d + k] * table[j * d + k]).sum();
                    g[i * v + j] = x;
                    g[j * v + i] = x;
                }
            }
            g
        });
        Self { params, table, gram }
    }

    fn row(&self, t: u32) -> &[f64] {
        let d = self.params.dim();
        &self.table[t as usize * d..(t as usize + 1) * d]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct BestEdit {
    slot: usize,
    token: u32,
    score: f64,
}

/// Greedy coordinate ascent on the base score of `init` for the slots in
/// `mutable`. One best single-token edit is applied per iteration; the search
/// stops at the budget or when no edit improves the score.
pub fn craft_poison(
    query: &TokenSeq,
    init: TokenSeq,
    mutable: Range<usize>,
    recipe: &PoisonRecipe,
    ctx: &AttackContext<'_>,
) -> Result<(TokenSeq, Vec<Edit>, usize)> {
    if mutable.start == 0 || mutable.end > init.len() {
        return Err(Error::InvalidInput(format!(
            "mutable slots {mutable:?} must lie within content slots 1..{}",
            init.len()
        )));
    }
    let d = ctx.params.dim();
    let v = ctx.params.vocab_size();
    let q_hat = encode(query, ctx.params, None)?;
    let q_dot_row: Vec<f64> = (0..v).map(|t| dot(&q_hat, ctx.row(t as u32))).collect();
    let row_sq: Vec<f64> = (0..v).map(|t| dot(ctx.row(t as u32), ctx.row(t as u32))).collect();

    let mut seq = init;
    let mut sum = vec![0.0; d];
    for &t in seq.tokens() {
        sum.iter_mut().zip(ctx.row(t)).for_each(|(s, r)| *s += r);
    }
    let score_of = |num: f64, sq: f64| if sq > 0.0 { num / sq.sqrt() } else { f64::NEG_INFINITY };
    let mut num = dot(&q_hat, &sum);
    let mut sq = dot(&sum, &sum);
    let mut current = score_of(num, sq);

    let mut edits = Vec::new();
    let mut iterations = 0;
    for iteration in 0..recipe.budget_iters {
        iterations = iteration + 1;
        let sum_dot_row: Vec<f64>;
        let candidates: Vec<u32> = match &ctx.gram {
            Some(_) => {
                sum_dot_row = (0..v).map(|t| dot(&sum, ctx.row(t as u32))).collect();
                (1..v as u32).collect()
            }
            None => {
                // First-order gain of swapping in t is grad . row(t) up to a
                // per-slot constant, so one ranking serves every slot.
                sum_dot_row = Vec::new();
                let norm = sq.sqrt();
                let grad: Vec<f64> = (0..d).map(|k| (q_hat[k] - current * sum[k] / norm) / norm).collect();
                let mut ranked: Vec<(f64, u32)> = (1..v as u32).map(|t| (dot(&grad, ctx.row(t)), t)).collect();
                ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                ranked.into_iter().take(recipe.shortlist_size.max(1)).map(|(_, t)| t).collect()
            }
        };

        let mut best: Option<BestEdit> = None;
        for slot in mutable.clone() {
            let old = seq.tokens()[slot];
            for &t in &candidates {
                if t == old {
                    continue;
                }
                let new_num = num - q_dot_row[old as usize] + q_dot_row[t as usize];
                let new_sq = match &ctx.gram {
                    Some(g) => {
                        let (o, n) = (old as usize, t as usize);
                        sq + 2.0 * (sum_dot_row[n] - sum_dot_row[o]) + row_sq[n] + row_sq[o]
                            - 2.0 * g[o * v + n]
                    }
                    None => {
                        let (ro, rn) = (ctx.row(old), ctx.row(t));
                        (0..d).map(|k| {
                            let x = sum[k] - ro[k] + rn[k];
                            x * x
                        }).sum()
                    }
                };
                let s = score_of(new_num, new_sq);
                if best.as_ref().is_none_or(|b| s > b.score) {
                    best = Some(BestEdit { slot, token: t, score: s });
                }
            }
        }
        match best {
            Some(b) if b.score > current + 1e-12 => {
                let old = seq.tokens()[b.slot];
                for ((s, new), prev) in sum.iter_mut().zip(ctx.row(b.token)).zip(ctx.row(old)) {
                    *s += new - prev;
                }
                seq.set_token(b.slot, b.token);
                // Refresh from the updated sum to keep rounding from drifting.
                num = dot(&q_hat, &sum);
                sq = dot(&sum, &sum);
                current = score_of(num, sq);
                edits.push(Edit {
                    iteration,
                    slot: b.slot,
                    from: old,
                    to: b.token,
                    score: current,
                });
            }
            _ => break,
        }
    }
    Ok((seq, edits, iterations))
}

/// Base score of the clean passage at 1-based `rank`, if the pool has one.
pub fn clean_threshold(pool: &QueryPool, params: &TinyEncoderParams, rank: usize) -> Result<Option<f64>> {
    let mut scores = pool
        .clean()
        .map(|p| base_score(&pool.query, &p.tokens, params))
        .collect::<Result<Vec<_>>>()?;
    scores.sort_by(|a, b| b.total_cmp(a));
    Ok(rank.checked_sub(1).and_then(|i| scores.get(i).copied()))
}

/// Crafts `spec.poisons_per_query` poisons for every query and appends them
/// to the pools. Returns one trace per poison, in pool order.
pub fn poison_corpus(
    pools: &mut [QueryPool],
    spec: &SyntheticCorpusSpec,
    recipe: &PoisonRecipe,
    params: &TinyEncoderParams,
) -> Result<Vec<AttackTrace>> {
    let ctx = AttackContext::new(params, recipe);
    let vocab = params.vocab_size();
    let content_len = spec.passage_len - 1;
    let editable = recipe.edit_positions.min(content_len);
    let per_query: Vec<Result<(Vec<Passage>, Vec<AttackTrace>)>> = pools
        .par_iter()
        .map(|pool| {
            let threshold = clean_threshold(pool, params, recipe.success_rank)?;
            let mut passages = Vec::new();
            let mut traces = Vec::new();
            for j in 0..spec.poisons_per_query {
                let pid = format!("{}-x{j}", pool.query_id);
                let mut rng = rng_for(spec.seed, &[b"poison", pid.as_bytes()]);
                let content: Vec<u32> = (0..content_len).map(|_| random_content_token(&mut rng, vocab)).collect();
                let init = TokenSeq::from_content(&content)?;
                let initial_score = base_score(&pool.query, &init, params)?;
                let (tokens, edits, iterations) = craft_poison(&pool.query, init, 1..1 + editable, recipe, &ctx)?;
                let final_score = base_score(&pool.query, &tokens, params)?;
                let attack_failed = threshold.is_some_and(|t| final_score <= t);
                passages.push(Passage {
                    passage_id: pid.clone(),
                    label: Label::Poison,
                    tokens,
                    attack_failed: Some(attack_failed),
                });
                traces.push(AttackTrace {
                    query_id: pool.query_id.clone(),
                    passage_id: pid,
                    initial_score,
                    final_score,
                    threshold,
                    edits,
                    iterations,
                    attack_failed,
                });
            }
            Ok((passages, traces))
        })
        .collect();
    let mut all_traces = Vec::new();
    for (pool, result) in pools.iter_mut().zip(per_query) {
        let (passages, traces) = result?;
        pool.passages.extend(passages);
        all_traces.extend(traces);
    }
    Ok(all_traces)
}

/// Base-scored candidate pool for one query.
pub fn score_pool(pool: &QueryPool, params: &TinyEncoderParams) -> Result<CandidatePool> {
    let q = encode(&pool.query, params, None)?;
    let candidates = pool
        .passages
        .iter()
        .map(|p| {
            let e = encode(&p.tokens, params, None)?;
            Ok(ScoredCandidate::new(p.passage_id.clone(), dot(&q, &e), p.label))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CandidatePool {
        query_id: pool.query_id.clone(),
        candidates,
    })
}

/// Whether any poison reaches the undefended Top-`k` of each query.
pub fn poison_rank_check(pools: &[QueryPool], params: &TinyEncoderParams, k: usize) -> Result<Vec<bool>> {
    pools
        .iter()
        .map(|pool| {
            let scored = score_pool(pool, params)?;
            let order = base_ranking(&scored.candidates);
            Ok(order
                .iter()
                .take(k)
                .any(|&i| scored.candidates[i].label == Label::Poison))
        })
        .collect()
}

/// For each query, whether its best clean passage outscores the median of
/// its scores against every other query's clean passages.
pub fn ranking_is_nondegenerate(pools: &[QueryPool], params: &TinyEncoderParams) -> Result<Vec<bool>> {
    let encoded: Vec<Vec<Vec<f64>>> = pools
        .iter()
        .map(|pool| pool.clean().map(|p| encode(&p.tokens, params, None)).collect())
        .collect::<Result<_>>()?;
    pools
        .iter()
        .enumerate()
        .map(|(qi, pool)| {
            let q = encode(&pool.query, params, None)?;
            let own = encoded[qi].iter().map(|e| dot(&q, e)).fold(f64::NEG_INFINITY, f64::max);
            let mut others: Vec<f64> = encoded
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != qi)
                .flat_map(|(_, es)| es.iter().map(|e| dot(&q, e)))
                .collect();
            if others.is_empty() {
                return Ok(true);
            }
            others.sort_by(f64::total_cmp);
            Ok(own > others[others.len() / 2])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retriever::EncoderConfig;

    fn params() -> TinyEncoderParams {
        TinyEncoderParams::new(EncoderConfig { seed: 3, ..Default::default() }).unwrap()
    }

    fn small_spec() -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            num_queries: 6,
            clean_per_query: 12,
            poisons_per_query: 2,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn corpus_shape_and_determinism() {
        let spec = small_spec();
        let a = gen_corpus(&spec, 512, 64).unwrap();
        let b = gen_corpus(&spec, 512, 64).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        for pool in &a {
            assert_eq!(pool.passages.len(), 12);
            assert_eq!(pool.query.len(), spec.query_len);
            assert!(pool.passages.iter().all(|p| p.tokens.len() == spec.passage_len));
        }
        let other = gen_corpus(&SyntheticCorpusSpec { seed: 6, ..spec }, 512, 64).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn default_corpus_size() {
        let pools = gen_corpus(&SyntheticCorpusSpec::default(), 512, 64).unwrap();
        assert_eq!(pools.len(), 100);
        assert!(pools.iter().all(|p| p.clean().count() == 50));
    }

    #[test]
    fn corpus_validation() {
        let bad = SyntheticCorpusSpec { passage_len: 65, ..Default::default() };
        assert!(gen_corpus(&bad, 512, 64).is_err());
        let bad = SyntheticCorpusSpec { topic_size: 600, ..Default::default() };
        assert!(gen_corpus(&bad, 512, 64).is_err());
        let bad = SyntheticCorpusSpec { num_queries: 0, ..Default::default() };
        assert!(gen_corpus(&bad, 512, 64).is_err());
    }

    #[test]
    fn rankings_are_nondegenerate() {
        let p = params();
        let pools = gen_corpus(&small_spec(), 512, 64).unwrap();
        assert!(ranking_is_nondegenerate(&pools, &p).unwrap().iter().all(|&ok| ok));
    }

    #[test]
    fn huge_dispersion_flattens_scores() {
        let p = params();
        let spec = SyntheticCorpusSpec { topic_dispersion: 1e9, ..small_spec() };
        let pools = gen_corpus(&spec, 512, 64).unwrap();
        let scores: Vec<f64> = pools
            .iter()
            .flat_map(|pool| score_pool(pool, &p).unwrap().candidates.into_iter().map(|c| c.base_score))
            .collect();
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        assert!(mean.abs() < 0.15, "mean clean score {mean}");
    }

    #[test]
    fn zero_budget_returns_initialization() {
        let p = params();
        let pools = gen_corpus(&small_spec(), 512, 64).unwrap();
        let recipe = PoisonRecipe { budget_iters: 0, ..Default::default() };
        let ctx = AttackContext::new(&p, &recipe);
        let init = TokenSeq::from_content(&[9; 47]).unwrap();
        let (out, edits, iters) = craft_poison(&pools[0].query, init.clone(), 1..31, &recipe, &ctx).unwrap();
        assert_eq!(out, init);
        assert!(edits.is_empty());
        assert_eq!(iters, 0);

        let mut pools = pools;
        let spec = small_spec();
        let traces = poison_corpus(&mut pools, &spec, &recipe, &p).unwrap();
        for t in &traces {
            assert!(t.edits.is_empty());
            assert_eq!(t.initial_score, t.final_score);
            assert_eq!(t.attack_failed, t.final_score <= t.threshold.unwrap());
        }
    }

    #[test]
    fn greedy_trajectory_is_monotone_and_successful() {
        let p = params();
        let spec = small_spec();
        let mut pools = gen_corpus(&spec, 512, 64).unwrap();
        let traces = poison_corpus(&mut pools, &spec, &PoisonRecipe::default(), &p).unwrap();
        for t in &traces {
            let mut prev = t.initial_score - 1e-12;
            for e in &t.edits {
                assert!(e.score >= prev - 1e-12);
                prev = e.score;
            }
            assert!((t.final_score - prev).abs() < 1e-9);
            assert!(!t.attack_failed, "{} reached {}", t.passage_id, t.final_score);
        }
        for pool in &pools {
            for poison in pool.poisons() {
                assert_eq!(poison.tokens.tokens()[0], 0);
                assert_eq!(poison.tokens.len(), spec.passage_len);
            }
        }
        assert!(poison_rank_check(&pools, &p, 5).unwrap().iter().all(|&hit| hit));
    }

    #[test]
    fn shortlist_path_also_climbs() {
        let p = params();
        let pools = gen_corpus(&small_spec(), 512, 64).unwrap();
        let recipe = PoisonRecipe { full_scan_max_vocab: 0, ..Default::default() };
        let ctx = AttackContext::new(&p, &recipe);
        let init = TokenSeq::from_content(&(1..48).collect::<Vec<u32>>()).unwrap();
        let start = base_score(&pools[0].query, &init, &p).unwrap();
        let (out, edits, _) = craft_poison(&pools[0].query, init, 1..31, &recipe, &ctx).unwrap();
        assert!(!edits.is_empty());
        assert!(base_score(&pools[0].query, &out, &p).unwrap() > start);
    }

    #[test]
    fn rank_check_edge_cases() {
        let p = params();
        let mut pools = gen_corpus(&small_spec(), 512, 64).unwrap();
        assert!(poison_rank_check(&pools, &p, 5).unwrap().iter().all(|&hit| !hit));
        for pool in &mut pools {
            pool.passages.push(Passage {
                passage_id: format!("{}-copy", pool.query_id),
                label: Label::Poison,
                tokens: pool.query.clone(),
                attack_failed: Some(false),
            });
        }
        assert!(poison_rank_check(&pools, &p, 1).unwrap().iter().all(|&hit| hit));
    }

    #[test]
    fn rank_check_matches_brute_force_sort() {
        let p = params();
        let spec = small_spec();
        let mut pools = gen_corpus(&spec, 512, 64).unwrap();
        let recipe = PoisonRecipe { budget_iters: 3, ..Default::default() };
        poison_corpus(&mut pools, &spec, &recipe, &p).unwrap();
        let fast = poison_rank_check(&pools, &p, 5).unwrap();
        for (pool, hit) in pools.iter().zip(fast) {
            let mut scored: Vec<(f64, Label)> = pool
                .passages
                .iter()
                .map(|x| (base_score(&pool.query, &x.tokens, &p).unwrap(), x.label))
                .collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let brute = scored.iter().take(5).any(|(_, l)| *l == Label::Poison);
            assert_eq!(hit, brute);
        }
    }
}
