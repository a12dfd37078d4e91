//! Signature dumps: a header plus one record per query/passage pair carrying
//! the base score and the `R x P` probe gradients.
//!
//! Two encodings share one data model:
//!
//! * text: line-delimited JSON, header object first, then one object per
//!   record. Floats are written in shortest round-trip form.
//! * binary: magic `PGSD`, `u32` version, little-endian throughout, gradients
//!   as `f32`, base scores as `f64`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rerank::Label;
use crate::signature::{GradientSignature, PairId, PerturbationKind};

pub const DUMP_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"PGSD";
const TEXT_FORMAT: &str = "progrank-signatures";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpHeader {
    pub format: String,
    pub version: u32,
    pub runs: usize,
    pub dim: usize,
    pub probe_layer: usize,
    pub kind: PerturbationKind,
    pub source: String,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DumpRecord {
    pub base_score: f64,
    pub label: Label,
    pub signature: GradientSignature,
}

impl DumpRecord {
    pub fn pair(&self) -> &PairId {
        self.signature.pair()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignatureDump {
    pub runs: usize,
    pub dim: usize,
    pub probe_layer: usize,
    pub kind: PerturbationKind,
    pub source: String,
    pub records: Vec<DumpRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TextRecord {
    query_id: String,
    passage_id: String,
    base_score: f64,
    #[serde(default)]
    label: Label,
    gradients: Vec<Vec<f64>>,
}

fn record_error(path: &str, index: usize, reason: impl Into<String>) -> Error {
    Error::Record {
        path: path.into(),
        index,
        reason: reason.into(),
    }
}

impl SignatureDump {
    /// An empty dump with the given header fields.
    pub fn new(runs: usize, dim: usize, probe_layer: usize, kind: PerturbationKind, source: impl Into<String>) -> Self {
        Self {
            runs,
            dim,
            probe_layer,
            kind,
            source: source.into(),
            records: Vec::new(),
        }
    }

    /// Builds a dump whose header is taken from the first record.
    pub fn from_records(source: impl Into<String>, records: Vec<DumpRecord>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot infer a dump header from zero records".into()))?;
        let sig = &first.signature;
        let mut dump = Self::new(sig.num_runs(), sig.dim(), sig.probe_layer(), sig.kind(), source);
        dump.records = records;
        dump.validate("<memory>")?;
        Ok(dump)
    }

    pub fn header(&self) -> DumpHeader {
        DumpHeader {
            format: TEXT_FORMAT.into(),
            version: DUMP_VERSION,
            runs: self.runs,
            dim: self.dim,
            probe_layer: self.probe_layer,
            kind: self.kind,
            source: self.source.clone(),
            records: self.records.len(),
        }
    }

    /// Checks every record against the header and rejects duplicate pairs.
    pub fn validate(&self, path: &str) -> Result<()> {
        let mut seen = HashSet::new();
        for (index, rec) in self.records.iter().enumerate() {
            self.check_record(path, index, rec)?;
            if !seen.insert(rec.pair()) {
                return Err(record_error(
                    path,
                    index,
                    format!("duplicate pair ({}, {})", rec.pair().query_id, rec.pair().passage_id),
                ));
            }
        }
        Ok(())
    }

    fn check_record(&self, path: &str, index: usize, rec: &DumpRecord) -> Result<()> {
        let sig = &rec.signature;
        if sig.num_runs() != self.runs || sig.dim() != self.dim {
            return Err(record_error(
                path,
                index,
                format!(
                    "dimension drift: record has {} runs x {} but header declares {} x {}",
                    sig.num_runs(),
                    sig.dim(),
                    self.runs,
                    self.dim
                ),
            ));
        }
        if !rec.base_score.is_finite() {
            return Err(record_error(path, index, "non-finite base score"));
        }
        Ok(())
    }

    fn check_header(header: &DumpHeader, path: &str) -> Result<()> {
        if header.format != TEXT_FORMAT {
            return Err(Error::Format(format!("{path}: not a signature dump (format `{}`)", header.format)));
        }
        if header.version != DUMP_VERSION {
            return Err(Error::Format(format!(
                "{path}: unsupported dump version {} (expected {DUMP_VERSION})",
                header.version
            )));
        }
        if header.runs < 2 || header.dim == 0 {
            return Err(Error::Format(format!(
                "{path}: header declares {} runs x {} dims; need at least 2 x 1",
                header.runs, header.dim
            )));
        }
        Ok(())
    }

    fn warn_if_empty(&self, path: &str) {
        if self.records.is_empty() {
            log::warn!("signature dump {path} holds no records");
        }
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        let ser = |e: serde_json::Error| Error::Format(format!("cannot serialize dump: {e}"));
        let io = |e| Error::io("<dump>", e);
        serde_json::to_writer(&mut w, &self.header()).map_err(ser)?;
        w.write_all(b"\n").map_err(io)?;
        for rec in &self.records {
            let pair = rec.pair();
            let text = TextRecord {
                query_id: pair.query_id.clone(),
                passage_id: pair.passage_id.clone(),
                base_score: rec.base_score,
                label: rec.label,
                gradients: rec.signature.runs().map(<[f64]>::to_vec).collect(),
            };
            serde_json::to_writer(&mut w, &text).map_err(ser)?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_text<R: BufRead>(r: R, path: &str) -> Result<Self> {
        let mut lines = r.lines().filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()));
        let header_line = match lines.next() {
            Some(line) => line.map_err(|e| Error::io(path, e))?,
            None => return Err(Error::Format(format!("{path}: empty file, missing dump header"))),
        };
        let header: DumpHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::Format(format!("{path}: bad dump header: {e}")))?;
        Self::check_header(&header, path)?;
        let mut dump = Self::new(header.runs, header.dim, header.probe_layer, header.kind, header.source.clone());
        for (index, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let rec: TextRecord =
                serde_json::from_str(&line).map_err(|e| record_error(path, index, e.to_string()))?;
            let sig = GradientSignature::new(
                PairId::new(rec.query_id, rec.passage_id),
                rec.gradients,
                header.kind,
                header.probe_layer,
            )
            .map_err(|e| record_error(path, index, e.to_string()))?;
            let rec = DumpRecord {
                base_score: rec.base_score,
                label: rec.label,
                signature: sig,
            };
            dump.check_record(path, index, &rec)?;
            dump.records.push(rec);
        }
        if dump.records.len() != header.records {
            return Err(record_error(
                path,
                dump.records.len(),
                format!("truncated: header declares {} records, found {}", header.records, dump.records.len()),
            ));
        }
        dump.validate(path)?;
        dump.warn_if_empty(path);
        Ok(dump)
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<dump>", e);
        let put_str = |w: &mut W, s: &str| -> std::io::Result<()> {
            w.write_u32::<LittleEndian>(s.len() as u32)?;
            w.write_all(s.as_bytes())
        };
        w.write_all(MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(DUMP_VERSION).map_err(io)?;
        for v in [self.runs, self.dim, self.probe_layer] {
            w.write_u32::<LittleEndian>(v as u32).map_err(io)?;
        }
        w.write_u8(self.kind.code()).map_err(io)?;
        put_str(&mut w, &self.source).map_err(io)?;
        w.write_u64::<LittleEndian>(self.records.len() as u64).map_err(io)?;
        for rec in &self.records {
            put_str(&mut w, &rec.pair().query_id).map_err(io)?;
            put_str(&mut w, &rec.pair().passage_id).map_err(io)?;
            w.write_f64::<LittleEndian>(rec.base_score).map_err(io)?;
            w.write_u8(label_code(rec.label)).map_err(io)?;
            for &v in rec.signature.as_flat() {
                w.write_f32::<LittleEndian>(v as f32).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn read_binary<R: Read>(mut r: R, path: &str) -> Result<Self> {
        let head = |what: &str| {
            let what = what.to_string();
            let path = path.to_string();
            move |e: std::io::Error| Error::Format(format!("{path}: truncated header while reading {what}: {e}"))
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(head("magic"))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("{path}: bad magic, not a binary signature dump")));
        }
        let version = r.read_u32::<LittleEndian>().map_err(head("version"))?;
        let runs = r.read_u32::<LittleEndian>().map_err(head("runs"))? as usize;
        let dim = r.read_u32::<LittleEndian>().map_err(head("dim"))? as usize;
        let probe_layer = r.read_u32::<LittleEndian>().map_err(head("probe layer"))? as usize;
        let kind_code = r.read_u8().map_err(head("kind"))?;
        let kind = PerturbationKind::from_code(kind_code)
            .ok_or_else(|| Error::Format(format!("{path}: unknown perturbation kind code {kind_code}")))?;
        let source = read_str(&mut r).map_err(head("source"))?;
        let count = r.read_u64::<LittleEndian>().map_err(head("record count"))? as usize;
        let header = DumpHeader {
            format: TEXT_FORMAT.into(),
            version,
            runs,
            dim,
            probe_layer,
            kind,
            source: source.clone(),
            records: count,
        };
        Self::check_header(&header, path)?;

        let mut dump = Self::new(runs, dim, probe_layer, kind, source);
        let mut buf = vec![0f32; runs * dim];
        for index in 0..count {
            let trunc = |e: std::io::Error| {
                record_error(path, index, format!("truncated record ({e}); header declares {count} records"))
            };
            let qid = read_str(&mut r).map_err(trunc)?;
            let pid = read_str(&mut r).map_err(trunc)?;
            let base_score = r.read_f64::<LittleEndian>().map_err(trunc)?;
            let code = r.read_u8().map_err(trunc)?;
            let label = label_from_code(code).ok_or_else(|| record_error(path, index, format!("bad label code {code}")))?;
            r.read_f32_into::<LittleEndian>(&mut buf).map_err(trunc)?;
            let flat = buf.iter().map(|&v| f64::from(v)).collect();
            let signature = GradientSignature::from_flat(PairId::new(qid, pid), dim, flat, kind, probe_layer)
                .map_err(|e| record_error(path, index, e.to_string()))?;
            dump.records.push(DumpRecord {
                base_score,
                label,
                signature,
            });
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe).map_err(|e| Error::io(path, e))? != 0 {
            return Err(record_error(path, count, "trailing bytes after the declared records"));
        }
        dump.validate(path)?;
        dump.warn_if_empty(path);
        Ok(dump)
    }

    /// Writes binary when the extension is `.bin`, text otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let w = BufWriter::new(f);
        let res = if is_binary(path) { self.write_binary(w) } else { self.write_text(w) };
        res.map_err(|e| retag_io(e, path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let r = BufReader::new(f);
        let name = path.display().to_string();
        if is_binary(path) {
            Self::read_binary(r, &name)
        } else {
            Self::read_text(r, &name)
        }
    }
}

fn retag_io(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

pub(crate) fn is_binary(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "bin")
}

fn read_str<R: Read>(r: &mut R) -> std::io::Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)?;
    String::from_utf8(bytes).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

fn label_code(l: Label) -> u8 {
    match l {
        Label::Unknown => 0,
        Label::Clean => 1,
        Label::Poison => 2,
    }
}

fn label_from_code(c: u8) -> Option<Label> {
    match c {
        0 => Some(Label::Unknown),
        1 => Some(Label::Clean),
        2 => Some(Label::Poison),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize) -> SignatureDump {
        let records = (0..n)
            .map(|i| DumpRecord {
                base_score: 0.1 * i as f64 + 1.0 / 3.0,
                label: if i % 2 == 0 { Label::Clean } else { Label::Poison },
                signature: GradientSignature::new(
                    PairId::new(format!("q{}", i / 2), format!("p{i}")),
                    vec![vec![0.5, -1.25, i as f64], vec![2.0, 0.0, 0.125]],
                    PerturbationKind::Mixed,
                    2,
                )
                .unwrap(),
            })
            .collect();
        SignatureDump::from_records("unit", records).unwrap()
    }

    #[test]
    fn text_round_trip() {
        let d = sample(4);
        let mut buf = Vec::new();
        d.write_text(&mut buf).unwrap();
        assert_eq!(SignatureDump::read_text(&buf[..], "mem").unwrap(), d);
    }

    #[test]
    fn binary_round_trip_is_exact_for_f32_values() {
        let d = sample(4);
        let mut buf = Vec::new();
        d.write_binary(&mut buf).unwrap();
        assert_eq!(SignatureDump::read_binary(&buf[..], "mem").unwrap(), d);
    }

    #[test]
    fn empty_dump_round_trips() {
        let d = SignatureDump::new(3, 4, 1, PerturbationKind::Token, "empty");
        let mut text = Vec::new();
        d.write_text(&mut text).unwrap();
        assert!(SignatureDump::read_text(&text[..], "mem").unwrap().records.is_empty());
        let mut bin = Vec::new();
        d.write_binary(&mut bin).unwrap();
        assert!(SignatureDump::read_binary(&bin[..], "mem").unwrap().records.is_empty());
    }

    #[test]
    fn truncation_reports_record_index() {
        let d = sample(3);
        let mut bin = Vec::new();
        d.write_binary(&mut bin).unwrap();
        let cut = &bin[..bin.len() - 5];
        match SignatureDump::read_binary(cut, "mem").unwrap_err() {
            Error::Record { index, .. } => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
        let mut text = Vec::new();
        d.write_text(&mut text).unwrap();
        let s = String::from_utf8(text).unwrap();
        let short: Vec<&str> = s.lines().take(2).collect();
        match SignatureDump::read_text(short.join("\n").as_bytes(), "mem").unwrap_err() {
            Error::Record { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_drift_duplicates_and_bad_headers() {
        let d = sample(2);
        let mut text = Vec::new();
        d.write_text(&mut text).unwrap();
        let s = String::from_utf8(text).unwrap();

        let drift = s.replacen("[2.0,0.0,0.125]", "[2.0,0.0]", 1);
        assert!(matches!(SignatureDump::read_text(drift.as_bytes(), "mem"), Err(Error::Record { .. })));

        let dup = s.replacen("\"p1\"", "\"p0\"", 1);
        assert!(matches!(SignatureDump::read_text(dup.as_bytes(), "mem"), Err(Error::Record { index: 1, .. })));

        let bad_version = s.replacen("\"version\":1", "\"version\":9", 1);
        assert!(matches!(SignatureDump::read_text(bad_version.as_bytes(), "mem"), Err(Error::Format(_))));
        assert!(matches!(SignatureDump::read_binary(&b"NOPE"[..], "mem"), Err(Error::Format(_))));
        assert!(matches!(SignatureDump::read_text(&b""[..], "mem"), Err(Error::Format(_))));
    }
}
