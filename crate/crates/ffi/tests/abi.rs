use std::ffi::{CStr, CString};
use std::ptr;

use progrank::harness::dump::{DumpRecord, SignatureDump};
use progrank::rerank::rerank_pool;
use progrank::signature::compute_penalties;
use progrank::{
    CandidatePool, GradientSignature, Label, PairId, PenaltyConfig, PerturbationKind, RerankConfig, ScoredCandidate,
};
use progrank_ffi::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_runs(rng: &mut ChaCha8Rng, runs: usize, dim: usize) -> Vec<f64> {
    (0..runs * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 512];
    unsafe {
        pg_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn to_ffi(p: &progrank::PenaltyBreakdown) -> PgPenalties {
    PgPenalties {
        rep: p.rep,
        p_rep: p.p_rep,
        c_quantile: p.c_quantile,
        p_dr_raw: p.p_dr_raw,
        p_dr: p.p_dr,
    }
}

#[test]
fn signature_penalties_match_core() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = PenaltyConfig::default();
    for _ in 0..20 {
        let data = random_runs(&mut rng, 12, 7);
        let mut out = PgPenalties::default();
        let status = unsafe { pg_signature_penalties(data.as_ptr(), 12, 7, ptr::null(), &mut out) };
        assert_eq!(status, PgStatus::Ok);
        let sig =
            GradientSignature::from_flat(PairId::new("q", "p"), 7, data, PerturbationKind::Token, 0).unwrap();
        assert_eq!(out, to_ffi(&compute_penalties(&sig, &cfg).unwrap()));
    }
}

#[test]
fn identical_runs_carry_no_penalty() {
    let row = [0.5, -1.0, 2.0];
    let data: Vec<f64> = row.iter().copied().cycle().take(3 * 10).collect();
    let mut out = PgPenalties::default();
    let status = unsafe { pg_signature_penalties(data.as_ptr(), 10, 3, ptr::null(), &mut out) };
    assert_eq!(status, PgStatus::Ok);
    assert!((out.rep - 1.0).abs() < 1e-7);
    assert_eq!(out.p_rep, 0.0);
    assert_eq!(out.p_dr, 0.0);
}

#[test]
fn invalid_inputs_report_status_and_message() {
    let data = [1.0, 2.0];
    let mut out = PgPenalties::default();
    let status = unsafe { pg_signature_penalties(data.as_ptr(), 1, 2, ptr::null(), &mut out) };
    assert_eq!(status, PgStatus::Config);
    assert!(last_error().contains("at least 2 runs"), "{}", last_error());

    let status = unsafe { pg_signature_penalties(ptr::null(), 2, 2, ptr::null(), &mut out) };
    assert_eq!(status, PgStatus::NullPointer);

    let mut cfg = pg_penalty_config_default();
    cfg.tau = 1.5;
    let data = [1.0, 2.0, 3.0, 4.0];
    let status = unsafe { pg_signature_penalties(data.as_ptr(), 2, 2, &cfg, &mut out) };
    assert_eq!(status, PgStatus::Config);

    let nan = [1.0, f64::NAN, 3.0, 4.0];
    let status = unsafe { pg_signature_penalties(nan.as_ptr(), 2, 2, ptr::null(), &mut out) };
    assert_eq!(status, PgStatus::Config);

    let qid = CString::new("q").unwrap();
    let pid = CString::new("p").unwrap();
    unsafe {
        let pool = pg_pool_new(qid.as_ptr());
        assert_eq!(pg_pool_add(pool, pid.as_ptr(), 0.5, 9, ptr::null()), PgStatus::OutOfRange);
        assert_eq!(pg_pool_len(pool), 0);
        let mut ranking = ptr::null_mut();
        assert_eq!(pg_rerank(pool, ptr::null(), &mut ranking), PgStatus::Config);
        assert!(ranking.is_null());
        pg_pool_free(pool);
        assert!(pg_pool_new(ptr::null()).is_null());
        pg_pool_free(ptr::null_mut());
        pg_ranking_free(ptr::null_mut());
        pg_dump_free(ptr::null_mut());
    }
}

#[test]
fn rerank_matches_core() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let penalty = PenaltyConfig::default();
    let mut pool = CandidatePool {
        query_id: "q7".into(),
        candidates: Vec::new(),
    };
    let qid = CString::new("q7").unwrap();
    let handle = unsafe { pg_pool_new(qid.as_ptr()) };
    for i in 0..15 {
        let label = if i % 5 == 0 { Label::Poison } else { Label::Clean };
        let code = if label == Label::Poison { PG_LABEL_POISON } else { PG_LABEL_CLEAN };
        let score = rng.gen_range(0.0..1.0);
        let id = format!("p{i}");
        let mut cand = ScoredCandidate::new(id.clone(), score, label);
        let cid = CString::new(id).unwrap();
        if i % 3 != 0 {
            let sig = GradientSignature::from_flat(
                PairId::new("q7", cid.to_str().unwrap()),
                4,
                random_runs(&mut rng, 8, 4),
                PerturbationKind::Mixed,
                3,
            )
            .unwrap();
            let pen = compute_penalties(&sig, &penalty).unwrap();
            let flat = to_ffi(&pen);
            assert_eq!(unsafe { pg_pool_add(handle, cid.as_ptr(), score, code, &flat) }, PgStatus::Ok);
            cand = cand.with_penalties(pen);
        } else {
            assert_eq!(unsafe { pg_pool_add(handle, cid.as_ptr(), score, code, ptr::null()) }, PgStatus::Ok);
        }
        pool.candidates.push(cand);
    }

    let mut cfg = pg_rerank_config_default();
    cfg.k = 4;
    let expected = rerank_pool(&pool, &RerankConfig { k: 4, ..RerankConfig::default() }).unwrap();
    let mut ranking = ptr::null_mut();
    unsafe {
        assert_eq!(pg_rerank(handle, &cfg, &mut ranking), PgStatus::Ok);
        assert_eq!(pg_ranking_len(ranking), 15);
        assert_eq!(pg_ranking_gate_center(ranking), expected.gate_center);
        for (pos, rec) in expected.defended_order().into_iter().enumerate() {
            let mut out = PgRecord::default();
            assert_eq!(pg_ranking_record(ranking, pos, &mut out), PgStatus::Ok);
            assert_eq!(out.defended_rank, pos + 1);
            assert_eq!(out.base_rank, rec.base_rank);
            assert_eq!(out.defended_score, rec.defended_score);
            assert_eq!(out.gate_weight, rec.gate_weight);
            let id = CStr::from_ptr(pg_ranking_passage_id(ranking, pos)).to_str().unwrap();
            assert_eq!(id, rec.passage_id);
        }
        let mut out = PgRecord::default();
        assert_eq!(pg_ranking_record(ranking, 15, &mut out), PgStatus::OutOfRange);
        assert!(pg_ranking_passage_id(ranking, 15).is_null());
        assert_eq!(pg_ranking_top_k_len(ranking), 4);
        for (i, id) in expected.top_k_ids.iter().enumerate() {
            assert_eq!(CStr::from_ptr(pg_ranking_top_k_id(ranking, i)).to_str().unwrap(), id);
        }
        pg_ranking_free(ranking);
        pg_pool_free(handle);
    }
}

fn sample_dump(rng: &mut ChaCha8Rng) -> SignatureDump {
    let mut records = Vec::new();
    for q in 0..3 {
        for p in 0..6 {
            let label = if p == 0 { Label::Poison } else { Label::Clean };
            let sig = GradientSignature::from_flat(
                PairId::new(format!("q{q}"), format!("q{q}-p{p}")),
                5,
                random_runs(rng, 6, 5).into_iter().map(|v| v as f32 as f64).collect(),
                PerturbationKind::Token,
                3,
            )
            .unwrap();
            records.push(DumpRecord {
                base_score: rng.gen_range(0.0..1.0),
                label,
                signature: sig,
            });
        }
    }
    SignatureDump::from_records("test", records).unwrap()
}

#[test]
fn dump_import_in_both_layouts() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dump = sample_dump(&mut rng);
    let dir = tempfile::tempdir().unwrap();
    let cfg = PenaltyConfig::default();
    for name in ["sigs.jsonl", "sigs.bin"] {
        let path = dir.path().join(name);
        dump.save(&path).unwrap();
        let cpath = CString::new(path.to_str().unwrap()).unwrap();
        let mut handle = ptr::null_mut();
        unsafe {
            assert_eq!(pg_dump_load(cpath.as_ptr(), &mut handle), PgStatus::Ok);
            assert_eq!(pg_dump_len(handle), 18);
            assert_eq!(pg_dump_runs(handle), 6);
            assert_eq!(pg_dump_dim(handle), 5);
            assert_eq!(pg_dump_query_count(handle), 3);
            for (i, rec) in dump.records.iter().enumerate() {
                let mut out = PgPenalties::default();
                assert_eq!(pg_dump_penalties(handle, i, ptr::null(), &mut out), PgStatus::Ok);
                assert_eq!(out, to_ffi(&compute_penalties(&rec.signature, &cfg).unwrap()));
            }
            let q1 = pg_dump_query_id(handle, 1);
            assert_eq!(CStr::from_ptr(q1).to_str().unwrap(), "q1");
            let mut pool = ptr::null_mut();
            assert_eq!(pg_dump_pool(handle, q1, ptr::null(), &mut pool), PgStatus::Ok);
            assert_eq!(pg_pool_len(pool), 6);
            pg_pool_free(pool);

            let missing = CString::new("q9").unwrap();
            let mut pool = ptr::null_mut();
            assert_eq!(pg_dump_pool(handle, missing.as_ptr(), ptr::null(), &mut pool), PgStatus::OutOfRange);
            pg_dump_free(handle);
        }
    }
}

#[test]
fn dump_errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("absent.bin").to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { pg_dump_load(missing.as_ptr(), &mut handle) }, PgStatus::Io);
    assert!(handle.is_null());

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let path = dir.path().join("cut.jsonl");
    sample_dump(&mut rng).save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let cut = format!("{}\n{}\n{}", lines[0], lines[1], &lines[2][..lines[2].len() / 2]);
    std::fs::write(&path, cut).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { pg_dump_load(cpath.as_ptr(), &mut handle) }, PgStatus::Format);
    assert!(last_error().contains("record"), "{}", last_error());
}
