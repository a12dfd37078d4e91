//! C ABI over the progrank defence.
//!
//! Three opaque handles cross the boundary: `PgPool` (a query with scored
//! candidates), `PgRanking` (the defended ranking of a pool) and `PgDump`
//! (an imported signature dump). Each has a matching `*_free` function.
//!
//! Fallible functions return a `PgStatus`; on failure a message is stored
//! per thread and can be read with `pg_last_error_message`. Panics are
//! caught at the boundary and reported as `PG_STATUS_PANIC`.
//!
//! # Safety
//!
//! Pointer arguments must be null or valid for the documented extent.
//! Strings are NUL-terminated UTF-8. Handles are not thread-safe.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use progrank::harness::dump::SignatureDump;
use progrank::harness::pools_from_dump;
use progrank::rerank::{rerank_pool, SelectionMode};
use progrank::signature::compute_penalties;
use progrank::{
    CandidatePool, DefendedRanking, Error, ErrorKind, GradientSignature, Label, PairId, PenaltyBreakdown,
    PenaltyConfig, PerturbationKind, RerankConfig, ScoredCandidate,
};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgStatus {
    Ok = 0,
    Config = 1,
    Format = 2,
    Numerical = 3,
    Io = 4,
    NullPointer = 5,
    OutOfRange = 6,
    Panic = 7,
}

pub const PG_LABEL_CLEAN: u32 = 0;
pub const PG_LABEL_POISON: u32 = 1;
pub const PG_LABEL_UNKNOWN: u32 = 2;

pub const PG_SELECTION_FUSED: u32 = 0;
pub const PG_SELECTION_RANK_DROP: u32 = 1;

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PgPenaltyConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub tau: f64,
    pub cap: f64,
    pub clamp_nonnegative: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PgRerankConfig {
    pub k: usize,
    pub gate_enabled: bool,
    pub dr_enabled: bool,
    pub rep_enabled: bool,
    pub gate_temperature: f64,
    /// One of the `PG_SELECTION_*` constants.
    pub selection_mode: u32,
    pub rank_drop_rho: f64,
}

/// Scalar penalty trace for one signature.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PgPenalties {
    pub rep: f64,
    pub p_rep: f64,
    pub c_quantile: f64,
    pub p_dr_raw: f64,
    pub p_dr: f64,
}

/// One candidate of a defended ranking, without its passage id.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PgRecord {
    pub label: u32,
    pub base_score: f64,
    pub gate_weight: f64,
    pub p_dr: f64,
    pub p_rep: f64,
    pub defended_score: f64,
    pub base_rank: usize,
    pub defended_rank: usize,
}

pub struct PgPool {
    inner: CandidatePool,
}

pub struct PgRanking {
    inner: DefendedRanking,
    /// Record indices in defended order.
    order: Vec<usize>,
    ids: Vec<CString>,
    top_k: Vec<CString>,
}

pub struct PgDump {
    inner: SignatureDump,
    query_ids: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(PgStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.kind() {
            ErrorKind::Config => PgStatus::Config,
            ErrorKind::Format => PgStatus::Format,
            ErrorKind::Numerical => PgStatus::Numerical,
            ErrorKind::Io => PgStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(PgStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PgStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("panic inside progrank".into());
            PgStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(PgStatus::Format, format!("{what} is not valid UTF-8")))
}

fn c_string(s: &str) -> CString {
    CString::new(s.replace('\0', " ")).unwrap_or_default()
}

fn label_from(code: u32) -> Result<Label, Failure> {
    match code {
        PG_LABEL_CLEAN => Ok(Label::Clean),
        PG_LABEL_POISON => Ok(Label::Poison),
        PG_LABEL_UNKNOWN => Ok(Label::Unknown),
        other => Err(Failure(PgStatus::OutOfRange, format!("unknown label code {other}"))),
    }
}

fn label_code(label: Label) -> u32 {
    match label {
        Label::Clean => PG_LABEL_CLEAN,
        Label::Poison => PG_LABEL_POISON,
        Label::Unknown => PG_LABEL_UNKNOWN,
    }
}

fn penalty_config(cfg: *const PgPenaltyConfig) -> PenaltyConfig {
    match unsafe { cfg.as_ref() } {
        Some(c) => PenaltyConfig {
            epsilon: c.epsilon,
            alpha: c.alpha,
            tau: c.tau,
            cap: c.cap,
            clamp_nonnegative: c.clamp_nonnegative,
        },
        None => PenaltyConfig::default(),
    }
}

fn rerank_config(cfg: *const PgRerankConfig) -> Result<RerankConfig, Failure> {
    let Some(c) = (unsafe { cfg.as_ref() }) else {
        return Ok(RerankConfig::default());
    };
    let selection_mode = match c.selection_mode {
        PG_SELECTION_FUSED => SelectionMode::FusedScore,
        PG_SELECTION_RANK_DROP => SelectionMode::RankDrop,
        other => return Err(Failure(PgStatus::OutOfRange, format!("unknown selection mode {other}"))),
    };
    Ok(RerankConfig {
        k: c.k,
        gate_enabled: c.gate_enabled,
        dr_enabled: c.dr_enabled,
        rep_enabled: c.rep_enabled,
        gate_temperature: c.gate_temperature,
        selection_mode,
        rank_drop_rho: c.rank_drop_rho,
    })
}

fn scalars(p: &PenaltyBreakdown) -> PgPenalties {
    PgPenalties {
        rep: p.rep,
        p_rep: p.p_rep,
        c_quantile: p.c_quantile,
        p_dr_raw: p.p_dr_raw,
        p_dr: p.p_dr,
    }
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len - 1` bytes). Returns the full message length, or 0 if
/// no error was recorded.
#[no_mangle]
pub unsafe extern "C" fn pg_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

#[no_mangle]
pub extern "C" fn pg_penalty_config_default() -> PgPenaltyConfig {
    let d = PenaltyConfig::default();
    PgPenaltyConfig {
        epsilon: d.epsilon,
        alpha: d.alpha,
        tau: d.tau,
        cap: d.cap,
        clamp_nonnegative: d.clamp_nonnegative,
    }
}

#[no_mangle]
pub extern "C" fn pg_rerank_config_default() -> PgRerankConfig {
    let d = RerankConfig::default();
    PgRerankConfig {
        k: d.k,
        gate_enabled: d.gate_enabled,
        dr_enabled: d.dr_enabled,
        rep_enabled: d.rep_enabled,
        gate_temperature: d.gate_temperature,
        selection_mode: PG_SELECTION_FUSED,
        rank_drop_rho: d.rank_drop_rho,
    }
}

/// Penalties of a row-major `runs x dim` gradient signature. A null config
/// selects the defaults.
#[no_mangle]
pub unsafe extern "C" fn pg_signature_penalties(
    data: *const f64,
    runs: usize,
    dim: usize,
    cfg: *const PgPenaltyConfig,
    out: *mut PgPenalties,
) -> PgStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let len = runs
            .checked_mul(dim)
            .ok_or_else(|| Failure(PgStatus::OutOfRange, "runs * dim overflows".into()))?;
        let values = slice::from_raw_parts(data, len).to_vec();
        let sig = GradientSignature::from_flat(PairId::new("", ""), dim, values, PerturbationKind::Mixed, 0)?;
        let cfg = penalty_config(cfg);
        cfg.validate()?;
        *out = scalars(&compute_penalties(&sig, &cfg)?);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pg_pool_new(query_id: *const c_char) -> *mut PgPool {
    let mut pool = ptr::null_mut();
    let status = guard(|| {
        let qid = str_arg(query_id, "query_id")?;
        pool = Box::into_raw(Box::new(PgPool {
            inner: CandidatePool {
                query_id: qid.to_string(),
                candidates: Vec::new(),
            },
        }));
        Ok(())
    });
    if status == PgStatus::Ok {
        pool
    } else {
        ptr::null_mut()
    }
}

/// Appends a candidate. A null `penalties` leaves the candidate unprobed, so
/// it keeps its base score.
#[no_mangle]
pub unsafe extern "C" fn pg_pool_add(
    pool: *mut PgPool,
    passage_id: *const c_char,
    base_score: f64,
    label: u32,
    penalties: *const PgPenalties,
) -> PgStatus {
    guard(|| {
        let pool = pool.as_mut().ok_or_else(|| null("pool"))?;
        let pid = str_arg(passage_id, "passage_id")?;
        let mut cand = ScoredCandidate::new(pid, base_score, label_from(label)?);
        if let Some(p) = penalties.as_ref() {
            cand = cand.with_penalties(PenaltyBreakdown {
                rep: p.rep,
                p_rep: p.p_rep,
                stability_scores: Vec::new(),
                c_quantile: p.c_quantile,
                p_dr_raw: p.p_dr_raw,
                p_dr: p.p_dr,
            });
        }
        pool.inner.candidates.push(cand);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pg_pool_len(pool: *const PgPool) -> usize {
    pool.as_ref().map_or(0, |p| p.inner.candidates.len())
}

#[no_mangle]
pub unsafe extern "C" fn pg_pool_free(pool: *mut PgPool) {
    if !pool.is_null() {
        drop(Box::from_raw(pool));
    }
}

fn ranking_handle(inner: DefendedRanking) -> PgRanking {
    let mut order: Vec<usize> = (0..inner.records.len()).collect();
    order.sort_by_key(|&i| inner.records[i].defended_rank);
    let ids = order.iter().map(|&i| c_string(&inner.records[i].passage_id)).collect();
    let top_k = inner.top_k_ids.iter().map(|s| c_string(s)).collect();
    PgRanking {
        inner,
        order,
        ids,
        top_k,
    }
}

/// Reranks a pool. A null config selects the defaults. On success `*out`
/// owns a new ranking handle.
#[no_mangle]
pub unsafe extern "C" fn pg_rerank(
    pool: *const PgPool,
    cfg: *const PgRerankConfig,
    out: *mut *mut PgRanking,
) -> PgStatus {
    guard(|| {
        let pool = pool.as_ref().ok_or_else(|| null("pool"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let cfg = rerank_config(cfg)?;
        let ranking = rerank_pool(&pool.inner, &cfg)?;
        *out = Box::into_raw(Box::new(ranking_handle(ranking)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pg_ranking_len(ranking: *const PgRanking) -> usize {
    ranking.as_ref().map_or(0, |r| r.order.len())
}

#[no_mangle]
pub unsafe extern "C" fn pg_ranking_gate_center(ranking: *const PgRanking) -> f64 {
    ranking.as_ref().map_or(f64::NAN, |r| r.inner.gate_center)
}

/// The `position`-th candidate in defended order (0-based).
#[no_mangle]
pub unsafe extern "C" fn pg_ranking_record(ranking: *const PgRanking, position: usize, out: *mut PgRecord) -> PgStatus {
    guard(|| {
        let r = ranking.as_ref().ok_or_else(|| null("ranking"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let &i = r
            .order
            .get(position)
            .ok_or_else(|| Failure(PgStatus::OutOfRange, format!("position {position} out of range")))?;
        let rec = &r.inner.records[i];
        *out = PgRecord {
            label: label_code(rec.label),
            base_score: rec.base_score,
            gate_weight: rec.gate_weight,
            p_dr: rec.p_dr,
            p_rep: rec.p_rep,
            defended_score: rec.defended_score,
            base_rank: rec.base_rank,
            defended_rank: rec.defended_rank,
        };
        Ok(())
    })
}

/// Passage id of the `position`-th candidate in defended order. The string
/// lives as long as the ranking handle; null when out of range.
#[no_mangle]
pub unsafe extern "C" fn pg_ranking_passage_id(ranking: *const PgRanking, position: usize) -> *const c_char {
    ranking
        .as_ref()
        .and_then(|r| r.ids.get(position))
        .map_or(ptr::null(), |s| s.as_ptr())
}

#[no_mangle]
pub unsafe extern "C" fn pg_ranking_top_k_len(ranking: *const PgRanking) -> usize {
    ranking.as_ref().map_or(0, |r| r.top_k.len())
}

/// Id of the `position`-th selected passage. Lives as long as the handle.
#[no_mangle]
pub unsafe extern "C" fn pg_ranking_top_k_id(ranking: *const PgRanking, position: usize) -> *const c_char {
    ranking
        .as_ref()
        .and_then(|r| r.top_k.get(position))
        .map_or(ptr::null(), |s| s.as_ptr())
}

#[no_mangle]
pub unsafe extern "C" fn pg_ranking_free(ranking: *mut PgRanking) {
    if !ranking.is_null() {
        drop(Box::from_raw(ranking));
    }
}

/// Loads a signature dump; `.bin` selects the binary layout, anything else
/// the line-delimited text layout.
#[no_mangle]
pub unsafe extern "C" fn pg_dump_load(path: *const c_char, out: *mut *mut PgDump) -> PgStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let inner = SignatureDump::load(Path::new(path))?;
        let mut query_ids: Vec<CString> = Vec::new();
        for rec in &inner.records {
            let q = c_string(&rec.pair().query_id);
            if !query_ids.contains(&q) {
                query_ids.push(q);
            }
        }
        *out = Box::into_raw(Box::new(PgDump { inner, query_ids }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pg_dump_len(dump: *const PgDump) -> usize {
    dump.as_ref().map_or(0, |d| d.inner.records.len())
}

#[no_mangle]
pub unsafe extern "C" fn pg_dump_runs(dump: *const PgDump) -> usize {
    dump.as_ref().map_or(0, |d| d.inner.runs)
}

#[no_mangle]
pub unsafe extern "C" fn pg_dump_dim(dump: *const PgDump) -> usize {
    dump.as_ref().map_or(0, |d| d.inner.dim)
}

#[no_mangle]
pub unsafe extern "C" fn pg_dump_query_count(dump: *const PgDump) -> usize {
    dump.as_ref().map_or(0, |d| d.query_ids.len())
}

/// Query ids in first-appearance order. Lives as long as the dump handle.
#[no_mangle]
pub unsafe extern "C" fn pg_dump_query_id(dump: *const PgDump, index: usize) -> *const c_char {
    dump.as_ref()
        .and_then(|d| d.query_ids.get(index))
        .map_or(ptr::null(), |s| s.as_ptr())
}

/// Penalties of the `index`-th record of the dump.
#[no_mangle]
pub unsafe extern "C" fn pg_dump_penalties(
    dump: *const PgDump,
    index: usize,
    cfg: *const PgPenaltyConfig,
    out: *mut PgPenalties,
) -> PgStatus {
    guard(|| {
        let d = dump.as_ref().ok_or_else(|| null("dump"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let rec = d
            .inner
            .records
            .get(index)
            .ok_or_else(|| Failure(PgStatus::OutOfRange, format!("record {index} out of range")))?;
        let cfg = penalty_config(cfg);
        cfg.validate()?;
        *out = scalars(&compute_penalties(&rec.signature, &cfg)?);
        Ok(())
    })
}

/// Builds the candidate pool of one query from the dump, with penalties
/// computed under `cfg` (null selects the defaults).
#[no_mangle]
pub unsafe extern "C" fn pg_dump_pool(
    dump: *const PgDump,
    query_id: *const c_char,
    cfg: *const PgPenaltyConfig,
    out: *mut *mut PgPool,
) -> PgStatus {
    guard(|| {
        let d = dump.as_ref().ok_or_else(|| null("dump"))?;
        let qid = str_arg(query_id, "query_id")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let cfg = penalty_config(cfg);
        cfg.validate()?;
        let pool = pools_from_dump(&d.inner, &cfg)?
            .into_iter()
            .find(|p| p.query_id == qid)
            .ok_or_else(|| Failure(PgStatus::OutOfRange, format!("query {qid} is not in the dump")))?;
        *out = Box::into_raw(Box::new(PgPool { inner: pool }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pg_dump_free(dump: *mut PgDump) {
    if !dump.is_null() {
        drop(Box::from_raw(dump));
    }
}
