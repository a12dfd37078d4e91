use std::path::Path;

use progrank::harness::dump::{DumpRecord, SignatureDump};
use progrank::harness::pools_from_dump;
use progrank::mechanism::{sample_signature, GateSampling, MechanismParams};
use progrank::signature::compute_penalties;
use progrank::{Error, ErrorKind, GradientSignature, Label, PairId, PenaltyConfig};

/// Pairs from the mechanism model, rounded to f32 so the binary layout is lossless.
fn mechanism_dump(pairs: usize) -> SignatureDump {
    let records = (0..pairs)
        .map(|i| {
            let gated = i % 3 == 0;
            let mp = MechanismParams {
                u: (0..12).map(|j| 0.1 * (j as f64 + 1.0)).collect(),
                a: (0..12).map(|j| if gated { 2.0 - 0.3 * j as f64 } else { 0.0 }).collect(),
                rho: 0.4,
                noise_sigma: 0.05,
                runs: 16,
                seed: 100 + i as u64,
                sampling: GateSampling::Iid,
            };
            let sig = sample_signature(&mp).unwrap();
            let flat = sig.as_flat().iter().map(|&v| v as f32 as f64).collect();
            let pair = PairId::new(format!("q{}", i / 6), format!("q{}-p{}", i / 6, i % 6));
            DumpRecord {
                base_score: 0.25 + 0.01 * i as f64,
                label: if gated { Label::Poison } else { Label::Clean },
                signature: GradientSignature::from_flat(pair, 12, flat, sig.kind(), 2).unwrap(),
            }
        })
        .collect();
    SignatureDump::from_records("mechanism", records).unwrap()
}

fn round_trip(dump: &SignatureDump, path: &Path) -> SignatureDump {
    dump.save(path).unwrap();
    SignatureDump::load(path).unwrap()
}

#[test]
fn both_layouts_round_trip_exactly() {
    let dump = mechanism_dump(30);
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(round_trip(&dump, &dir.path().join("d.jsonl")), dump);
    assert_eq!(round_trip(&dump, &dir.path().join("d.bin")), dump);
}

#[test]
fn imported_penalties_match_in_memory() {
    let dump = mechanism_dump(30);
    let dir = tempfile::tempdir().unwrap();
    let cfg = PenaltyConfig::default();
    for name in ["d.jsonl", "d.bin"] {
        let loaded = round_trip(&dump, &dir.path().join(name));
        let pools = pools_from_dump(&loaded, &cfg).unwrap();
        assert_eq!(pools.len(), 5);
        let imported = pools.iter().flat_map(|p| p.candidates.iter());
        for (cand, rec) in imported.zip(&dump.records) {
            assert_eq!(cand.passage_id, rec.pair().passage_id);
            let want = compute_penalties(&rec.signature, &cfg).unwrap();
            let got = cand.penalties.as_ref().unwrap();
            for (g, w) in [(got.rep, want.rep), (got.p_rep, want.p_rep), (got.p_dr, want.p_dr)] {
                assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0));
            }
        }
    }
}

#[test]
fn stable_pairs_score_lower_than_gated_pairs() {
    let cfg = PenaltyConfig::default();
    let pools = pools_from_dump(&mechanism_dump(30), &cfg).unwrap();
    let (mut clean, mut poison) = (Vec::new(), Vec::new());
    for c in pools.iter().flat_map(|p| &p.candidates) {
        let p = c.penalties.as_ref().unwrap();
        match c.label {
            Label::Poison => poison.push(p.p_dr + p.p_rep),
            _ => clean.push(p.p_dr + p.p_rep),
        }
    }
    let max_clean = clean.iter().copied().fold(f64::MIN, f64::max);
    let min_poison = poison.iter().copied().fold(f64::MAX, f64::min);
    assert!(min_poison > max_clean, "{min_poison} <= {max_clean}");
}

fn load_err(path: &Path) -> Error {
    SignatureDump::load(path).unwrap_err()
}

#[test]
fn truncated_text_reports_record_index() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    mechanism_dump(6).save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    std::fs::write(&path, format!("{}\n{}\n{}", lines[0], lines[1], &lines[2][..20])).unwrap();
    match load_err(&path) {
        Error::Record { index, .. } => assert_eq!(index, 1),
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn truncated_and_padded_binary_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    mechanism_dump(6).save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    match load_err(&path) {
        Error::Record { index, .. } => assert_eq!(index, 5),
        other => panic!("unexpected error {other}"),
    }

    let mut padded = bytes.clone();
    padded.push(0);
    std::fs::write(&path, &padded).unwrap();
    assert_eq!(load_err(&path).kind(), ErrorKind::Format);

    std::fs::write(&path, b"NOPE").unwrap();
    assert_eq!(load_err(&path).kind(), ErrorKind::Format);
}

#[test]
fn drift_and_duplicates_are_rejected() {
    let mut records = mechanism_dump(4).records;
    records.push(records[1].clone());
    assert!(SignatureDump::from_records("dup", records).is_err());

    let mut dump = mechanism_dump(4);
    let short = GradientSignature::from_flat(PairId::new("q9", "x"), 12, vec![0.5; 24], dump.kind, 2).unwrap();
    dump.records.push(DumpRecord {
        base_score: 0.0,
        label: Label::Clean,
        signature: short,
    });
    match dump.validate("mem").unwrap_err() {
        Error::Record { index, reason, .. } => {
            assert_eq!(index, 4);
            assert!(reason.contains("dimension drift"));
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn missing_dump_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(load_err(&dir.path().join("absent.bin")).kind(), ErrorKind::Io);
}
