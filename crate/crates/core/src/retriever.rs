//! A small shared two-tower text encoder with hand-written probe gradients.
//!
//! Architecture, shared by query and passage:
//!
//! ```text
//! x_t^0 = E[token_t]
//! block b = 1..B:  z = W_b x + c_b;  a = tanh(z);  a' = dropout(a);  x_t^b = LN(a'; gamma_b, beta_b)
//! h = mean over active positions of x_t^B;  out = h / |h|
//! ```
//!
//! The similarity of a pair is the inner product of the two unit encodings.
//! [`probe_gradient`] differentiates it with respect to the LayerNorm gain and
//! bias of one block, through both towers, with any dropout masks held fixed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::rng_for;
use crate::signature::{GradientSignature, PairId, PerturbationKind};

/// Token id reserved for the leading marker slot.
pub const MARKER_TOKEN: u32 = 0;

/// A tokenized query or passage: the marker followed by content tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn new(tokens: Vec<u32>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "token sequence needs the marker and at least one content token, got {} tokens",
                tokens.len()
            )));
        }
        if tokens[0] != MARKER_TOKEN {
            return Err(Error::InvalidInput(format!(
                "slot 0 must hold the marker token {MARKER_TOKEN}, found {}",
                tokens[0]
            )));
        }
        if let Some(pos) = tokens[1..].iter().position(|&t| t == MARKER_TOKEN) {
            return Err(Error::InvalidInput(format!(
                "marker token repeated at content slot {}",
                pos + 1
            )));
        }
        Ok(Self(tokens))
    }

    /// Prepends the marker to `content`.
    pub fn from_content(content: &[u32]) -> Result<Self> {
        let mut tokens = Vec::with_capacity(content.len() + 1);
        tokens.push(MARKER_TOKEN);
        tokens.extend_from_slice(content);
        Self::new(tokens)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub(crate) fn set_token(&mut self, slot: usize, token: u32) {
        debug_assert!(slot > 0 && token != MARKER_TOKEN);
        self.0[slot] = token;
    }
}

impl TryFrom<Vec<u32>> for TokenSeq {
    type Error = Error;

    fn try_from(v: Vec<u32>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TokenSeq> for Vec<u32> {
    fn from(s: TokenSeq) -> Self {
        s.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub layernorm_delta: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            embed_dim: 32,
            num_blocks: 4,
            layernorm_delta: 1e-5,
            max_len: 64,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("vocabulary needs the marker plus one token".into()));
        }
        if self.embed_dim < 2 {
            return Err(Error::Config("embedding dimension must be at least 2".into()));
        }
        if self.num_blocks == 0 {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        if !(self.layernorm_delta.is_finite() && self.layernorm_delta > 0.0) {
            return Err(Error::Config("layernorm delta must be positive".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    /// Row-major `d x d`, output by input.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Weights of the encoder. Immutable once built; shared by both towers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyEncoderParams {
    pub config: EncoderConfig,
    /// Row-major `V x d`.
    pub embedding: Vec<f64>,
    pub blocks: Vec<Block>,
}

const PARAMS_MAGIC: &[u8; 4] = b"PGTE";
const PARAMS_VERSION: u32 = 1;

impl TinyEncoderParams {
    /// Seeded initialization: standard-normal embeddings, dense weights
    /// uniform on `[-sqrt(3/d), sqrt(3/d)]`, zero dense bias, unit gain, zero
    /// LayerNorm bias.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut rng = rng_for(config.seed, &[b"encoder-init"]);
        let embedding = (0..config.vocab_size * d)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let bound = (3.0 / d as f64).sqrt();
        let blocks = (0..config.num_blocks)
            .map(|_| Block {
                weight: (0..d * d).map(|_| rng.gen_range(-bound..bound)).collect(),
                bias: vec![0.0; d],
                gamma: vec![1.0; d],
                beta: vec![0.0; d],
            })
            .collect();
        Ok(Self {
            config,
            embedding,
            blocks,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn num_blocks(&self) -> usize {
        self.config.num_blocks
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn all_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.embedding.iter().copied().chain(self.blocks.iter().flat_map(|b| {
            b.weight
                .iter()
                .chain(&b.bias)
                .chain(&b.gamma)
                .chain(&b.beta)
                .copied()
        }))
    }

    fn check_shapes(&self) -> Result<()> {
        self.config.validate()?;
        let d = self.dim();
        let bad = |what: &str| Err(Error::Format(format!("encoder parameter shape mismatch: {what}")));
        if self.embedding.len() != self.vocab_size() * d {
            return bad("embedding");
        }
        if self.blocks.len() != self.num_blocks() {
            return bad("block count");
        }
        for b in &self.blocks {
            if b.weight.len() != d * d || b.bias.len() != d || b.gamma.len() != d || b.beta.len() != d {
                return bad("block tensors");
            }
        }
        if self.all_values().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite encoder parameter".into()));
        }
        Ok(())
    }

    /// Versioned little-endian binary: bit-exact round trip.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<encoder params>", e);
        let c = &self.config;
        w.write_all(PARAMS_MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(PARAMS_VERSION).map_err(io)?;
        for v in [c.vocab_size, c.embed_dim, c.num_blocks, c.max_len] {
            w.write_u64::<LittleEndian>(v as u64).map_err(io)?;
        }
        w.write_f64::<LittleEndian>(c.layernorm_delta).map_err(io)?;
        w.write_u64::<LittleEndian>(c.seed).map_err(io)?;
        for v in self.all_values() {
            w.write_f64::<LittleEndian>(v).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        fn fmt(what: &'static str) -> impl Fn(std::io::Error) -> Error {
            move |e| Error::Format(format!("encoder params: {what}: {e}"))
        }
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt("magic"))?;
        if &magic != PARAMS_MAGIC {
            return Err(Error::Format("not an encoder parameter file".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(fmt("version"))?;
        if version != PARAMS_VERSION {
            return Err(Error::Format(format!("unsupported encoder format version {version}")));
        }
        let mut dims = [0usize; 4];
        for v in &mut dims {
            *v = r.read_u64::<LittleEndian>().map_err(fmt("header"))? as usize;
        }
        let config = EncoderConfig {
            vocab_size: dims[0],
            embed_dim: dims[1],
            num_blocks: dims[2],
            max_len: dims[3],
            layernorm_delta: r.read_f64::<LittleEndian>().map_err(fmt("header"))?,
            seed: r.read_u64::<LittleEndian>().map_err(fmt("header"))?,
        };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let d = config.embed_dim;
        let mut take = |n: usize| -> Result<Vec<f64>> {
            let mut v = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut v).map_err(fmt("values"))?;
            Ok(v)
        };
        let embedding = take(config.vocab_size * d)?;
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for _ in 0..config.num_blocks {
            blocks.push(Block {
                weight: take(d * d)?,
                bias: take(d)?,
                gamma: take(d)?,
                beta: take(d)?,
            });
        }
        let params = Self {
            config,
            embedding,
            blocks,
        };
        params.check_shapes()?;
        Ok(params)
    }

    /// Decimal JSON text; floats use shortest round-trip formatting.
    pub fn write_text<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn read_text<R: Read>(r: R) -> Result<Self> {
        let params: Self =
            serde_json::from_reader(r).map_err(|e| Error::Format(format!("encoder params: {e}")))?;
        params.check_shapes()?;
        Ok(params)
    }

    /// Saves in binary when the extension is `.bin`, JSON text otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        if is_binary_path(path) {
            self.write_binary(&mut w)?;
        } else {
            self.write_text(&mut w)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let r = BufReader::new(file);
        if is_binary_path(path) {
            Self::read_binary(r)
        } else {
            Self::read_text(r)
        }
    }
}

pub(crate) fn is_binary_path(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "bin")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    /// Passage-side token dropout probability.
    pub token_drop_p: f64,
    /// Internal activation dropout, applied in both towers.
    pub encoder_drop_p: f64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            kind: PerturbationKind::Mixed,
            token_drop_p: 0.10,
            encoder_drop_p: 0.10,
        }
    }
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("token_drop_p", self.token_drop_p), ("encoder_drop_p", self.encoder_drop_p)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {p}")));
            }
        }
        Ok(())
    }

    fn uses_tokens(&self) -> bool {
        matches!(self.kind, PerturbationKind::Token | PerturbationKind::Mixed) && self.token_drop_p > 0.0
    }

    fn uses_encoder(&self) -> bool {
        matches!(self.kind, PerturbationKind::Encoder | PerturbationKind::Mixed) && self.encoder_drop_p > 0.0
    }

    /// Draws the masks of one run from `rng`.
    pub fn realize<R: Rng>(
        &self,
        query_len: usize,
        passage_len: usize,
        params: &TinyEncoderParams,
        rng: &mut R,
    ) -> RealizedPerturbation {
        let mut passage_active = vec![true; passage_len];
        if self.uses_tokens() {
            for slot in passage_active.iter_mut().skip(1) {
                *slot = rng.gen::<f64>() >= self.token_drop_p;
            }
            if passage_len > 1 && !passage_active[1..].iter().any(|&a| a) {
                passage_active[rng.gen_range(1..passage_len)] = true;
            }
        }
        let (query_masks, passage_masks) = if self.uses_encoder() {
            let q = DropoutMasks::sample(query_len, params, self.encoder_drop_p, rng);
            let p = DropoutMasks::sample(passage_len, params, self.encoder_drop_p, rng);
            (Some(q), Some(p))
        } else {
            (None, None)
        };
        RealizedPerturbation {
            passage_active,
            query_masks,
            passage_masks,
        }
    }

    /// Masks for run `r` of a pair, seeded from `(master_seed, query, passage, r)`.
    pub fn realize_for_run(
        &self,
        master_seed: u64,
        pair: &PairId,
        run: usize,
        query_len: usize,
        passage_len: usize,
        params: &TinyEncoderParams,
    ) -> RealizedPerturbation {
        let mut rng = rng_for(
            master_seed,
            &[
                b"perturbation",
                pair.query_id.as_bytes(),
                pair.passage_id.as_bytes(),
                &(run as u64).to_le_bytes(),
            ],
        );
        self.realize(query_len, passage_len, params, &mut rng)
    }
}

/// Inverted-dropout scale factors, laid out `[block][position][unit]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    len: usize,
    scale: Vec<f64>,
}

impl DropoutMasks {
    fn sample<R: Rng>(len: usize, params: &TinyEncoderParams, p: f64, rng: &mut R) -> Self {
        let keep = 1.0 / (1.0 - p);
        let n = params.num_blocks() * len * params.dim();
        // One 32-bit draw per unit; drop probability is p to within 2^-32.
        let cutoff = (p * 4_294_967_296.0) as u64;
        let scale = (0..n)
            .map(|_| if u64::from(rng.next_u32()) < cutoff { 0.0 } else { keep })
            .collect();
        Self { len, scale }
    }

    fn block_pos(&self, block: usize, pos: usize, d: usize) -> &[f64] {
        let start = (block * self.len + pos) * d;
        &self.scale[start..start + d]
    }
}

/// One fixed draw of every random mask used in a perturbed forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizedPerturbation {
    /// Passage positions kept by token dropout; the marker is always kept.
    pub passage_active: Vec<bool>,
    pub query_masks: Option<DropoutMasks>,
    pub passage_masks: Option<DropoutMasks>,
}

impl RealizedPerturbation {
    pub fn none(passage_len: usize) -> Self {
        Self {
            passage_active: vec![true; passage_len],
            query_masks: None,
            passage_masks: None,
        }
    }
}

/// Which LayerNorm tensors are probed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTarget {
    #[default]
    GainAndBias,
    GainOnly,
    BiasOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSpec {
    /// 1-based block index.
    pub layer: usize,
    pub target: ProbeTarget,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            layer: 1,
            target: ProbeTarget::GainAndBias,
        }
    }
}

impl ProbeSpec {
    pub fn validate(&self, params: &TinyEncoderParams) -> Result<()> {
        if self.layer == 0 || self.layer > params.num_blocks() {
            return Err(Error::Config(format!(
                "probe layer {} outside 1..={}",
                self.layer,
                params.num_blocks()
            )));
        }
        Ok(())
    }

    pub fn dim(&self, params: &TinyEncoderParams) -> usize {
        match self.target {
            ProbeTarget::GainAndBias => 2 * params.dim(),
            ProbeTarget::GainOnly | ProbeTarget::BiasOnly => params.dim(),
        }
    }
}

/// Cached activations of one tower, laid out `[position][block][unit]`.
struct TowerTrace {
    active: Vec<usize>,
    tanh_out: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    pooled: Vec<f64>,
}

fn check_tokens(seq: &TokenSeq, params: &TinyEncoderParams) -> Result<()> {
    if seq.len() > params.config.max_len {
        return Err(Error::InvalidInput(format!(
            "sequence of {} tokens exceeds max_len {}",
            seq.len(),
            params.config.max_len
        )));
    }
    if let Some(&bad) = seq.tokens().iter().find(|&&t| t as usize >= params.vocab_size()) {
        return Err(Error::InvalidInput(format!(
            "token id {bad} out of range for vocabulary of {}",
            params.vocab_size()
        )));
    }
    Ok(())
}

/// `tanh` through a single `exp`; agrees with libm to a few ulps of 1.
fn fast_tanh(x: f64) -> f64 {
    if x.abs() > 20.0 {
        return x.signum();
    }
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

/// Dense weights transposed to `in x out`, so the forward pass is a sum of
/// contiguous axpy updates.
fn transposed_weights(params: &TinyEncoderParams) -> Vec<Vec<f64>> {
    let d = params.dim();
    params
        .blocks
        .iter()
        .map(|b| {
            let mut t = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    t[j * d + i] = b.weight[i * d + j];
                }
            }
            t
        })
        .collect()
}

/// Runs one token through every block, writing into the trace slices.
#[allow(clippy::too_many_arguments)]
fn token_forward(
    params: &TinyEncoderParams,
    weights_t: &[Vec<f64>],
    token: u32,
    masks: Option<(&DropoutMasks, usize)>,
    tanh_out: &mut [f64],
    xhat: &mut [f64],
    inv_std: &mut [f64],
    out: &mut [f64],
) {
    let d = params.dim();
    let delta = params.config.layernorm_delta;
    let t = token as usize;
    out.copy_from_slice(&params.embedding[t * d..(t + 1) * d]);
    for (b, (block, wt)) in params.blocks.iter().zip(weights_t).enumerate() {
        let a = &mut tanh_out[b * d..(b + 1) * d];
        a.copy_from_slice(&block.bias);
        // Four input columns per pass keep the accumulator traffic down.
        let quads = wt.chunks_exact(4 * d);
        let rest = quads.remainder();
        for (cols, x) in quads.zip(out.chunks_exact(4)) {
            let (c0, c1, c2, c3) = (&cols[..d], &cols[d..2 * d], &cols[2 * d..3 * d], &cols[3 * d..]);
            for i in 0..d {
                a[i] += c0[i] * x[0] + c1[i] * x[1] + c2[i] * x[2] + c3[i] * x[3];
            }
        }
        let done = out.len() - rest.len() / d;
        for (col, &x) in rest.chunks_exact(d).zip(&out[done..]) {
            for (a_i, w) in a.iter_mut().zip(col) {
                *a_i += w * x;
            }
        }
        a.iter_mut().for_each(|z| *z = fast_tanh(*z));
        // The dropped activation goes straight into `out`, which is free
        // until the LayerNorm output is written back.
        match masks {
            Some((m, pos)) => {
                for ((dst, a_i), s) in out.iter_mut().zip(a.iter()).zip(m.block_pos(b, pos, d)) {
                    *dst = a_i * s;
                }
            }
            None => out.copy_from_slice(a),
        }
        let mean = out.iter().sum::<f64>() / d as f64;
        let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + delta).sqrt();
        inv_std[b] = is;
        let xh = &mut xhat[b * d..(b + 1) * d];
        for i in 0..d {
            xh[i] = (out[i] - mean) * is;
            out[i] = block.gamma[i] * xh[i] + block.beta[i];
        }
    }
}

fn tower_forward(
    seq: &TokenSeq,
    params: &TinyEncoderParams,
    active: &[bool],
    masks: Option<&DropoutMasks>,
) -> TowerTrace {
    let d = params.dim();
    let nb = params.num_blocks();
    let active: Vec<usize> = (0..seq.len()).filter(|&i| active[i]).collect();
    let n = active.len();
    let mut trace = TowerTrace {
        tanh_out: vec![0.0; n * nb * d],
        xhat: vec![0.0; n * nb * d],
        inv_std: vec![0.0; n * nb],
        pooled: vec![0.0; d],
        active,
    };
    let weights_t = transposed_weights(params);
    let mut out = vec![0.0; d];
    for (slot, &pos) in trace.active.iter().enumerate() {
        let span = slot * nb * d..(slot + 1) * nb * d;
        token_forward(
            params,
            &weights_t,
            seq.tokens()[pos],
            masks.map(|m| (m, pos)),
            &mut trace.tanh_out[span.clone()],
            &mut trace.xhat[span],
            &mut trace.inv_std[slot * nb..(slot + 1) * nb],
            &mut out,
        );
        for (p, o) in trace.pooled.iter_mut().zip(&out) {
            *p += o;
        }
    }
    let inv_n = 1.0 / n as f64;
    trace.pooled.iter_mut().for_each(|p| *p *= inv_n);
    trace
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::Numerical(format!("cannot normalize encoding with norm {n}")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Unit-norm encoding of `seq`, optionally under a realized perturbation.
/// `passage_side` selects which masks of the perturbation apply.
pub fn encode(
    seq: &TokenSeq,
    params: &TinyEncoderParams,
    perturbation: Option<(&RealizedPerturbation, Tower)>,
) -> Result<Vec<f64>> {
    check_tokens(seq, params)?;
    let all = vec![true; seq.len()];
    let trace = match perturbation {
        None => tower_forward(seq, params, &all, None),
        Some((p, Tower::Query)) => tower_forward(seq, params, &all, p.query_masks.as_ref()),
        Some((p, Tower::Passage)) => {
            if p.passage_active.len() != seq.len() {
                return Err(Error::InvalidInput("token mask length differs from passage".into()));
            }
            tower_forward(seq, params, &p.passage_active, p.passage_masks.as_ref())
        }
    };
    normalized(&trace.pooled)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tower {
    Query,
    Passage,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unperturbed similarity of a query/passage pair.
pub fn base_score(q: &TokenSeq, p: &TokenSeq, params: &TinyEncoderParams) -> Result<f64> {
    Ok(dot(&encode(q, params, None)?, &encode(p, params, None)?))
}

/// Similarity under a fixed perturbation draw.
pub fn perturbed_score(
    q: &TokenSeq,
    p: &TokenSeq,
    params: &TinyEncoderParams,
    perturbation: &RealizedPerturbation,
) -> Result<f64> {
    let qe = encode(q, params, Some((perturbation, Tower::Query)))?;
    let pe = encode(p, params, Some((perturbation, Tower::Passage)))?;
    Ok(dot(&qe, &pe))
}

/// Backpropagates `grad_pooled` (gradient w.r.t. the mean-pooled vector)
/// down to the probed LayerNorm, accumulating gain and bias gradients.
fn tower_backward(
    trace: &TowerTrace,
    params: &TinyEncoderParams,
    masks: Option<&DropoutMasks>,
    layer: usize,
    grad_pooled: &[f64],
    grad_gamma: &mut [f64],
    grad_beta: &mut [f64],
) {
    let d = params.dim();
    let nb = params.num_blocks();
    let inv_n = 1.0 / trace.active.len() as f64;
    let probe = layer - 1;
    let mut g = vec![0.0; d];
    let mut gx = vec![0.0; d];
    let mut gz = vec![0.0; d];
    for (slot, &pos) in trace.active.iter().enumerate() {
        g.iter_mut().zip(grad_pooled).for_each(|(gi, gp)| *gi = gp * inv_n);
        for b in (probe..nb).rev() {
            let base = (slot * nb + b) * d;
            let xh = &trace.xhat[base..base + d];
            if b == probe {
                for i in 0..d {
                    grad_gamma[i] += g[i] * xh[i];
                    grad_beta[i] += g[i];
                }
                break;
            }
            let block = &params.blocks[b];
            for i in 0..d {
                gx[i] = g[i] * block.gamma[i];
            }
            let m1 = gx.iter().sum::<f64>() / d as f64;
            let m2 = gx.iter().zip(xh).map(|(a, x)| a * x).sum::<f64>() / d as f64;
            let is = trace.inv_std[slot * nb + b];
            let a = &trace.tanh_out[base..base + d];
            let scale = masks.map(|m| m.block_pos(b, pos, d));
            for i in 0..d {
                let mut ga = is * (gx[i] - m1 - xh[i] * m2);
                if let Some(s) = scale {
                    ga *= s[i];
                }
                gz[i] = ga * (1.0 - a[i] * a[i]);
            }
            g.iter_mut().for_each(|v| *v = 0.0);
            for (i, gzi) in gz.iter().enumerate() {
                if *gzi == 0.0 {
                    continue;
                }
                let row = &block.weight[i * d..(i + 1) * d];
                for (gj, w) in g.iter_mut().zip(row) {
                    *gj += w * gzi;
                }
            }
        }
    }
}

fn assemble_probe(probe: &ProbeSpec, gamma: Vec<f64>, beta: Vec<f64>) -> Vec<f64> {
    match probe.target {
        ProbeTarget::GainAndBias => gamma.into_iter().chain(beta).collect(),
        ProbeTarget::GainOnly => gamma,
        ProbeTarget::BiasOnly => beta,
    }
}

/// Analytic gradient of the perturbed similarity with respect to the probed
/// LayerNorm parameters. Both towers contribute since the encoder is shared.
pub fn probe_gradient(
    q: &TokenSeq,
    p: &TokenSeq,
    params: &TinyEncoderParams,
    probe: &ProbeSpec,
    perturbation: &RealizedPerturbation,
) -> Result<Vec<f64>> {
    probe.validate(params)?;
    check_tokens(q, params)?;
    check_tokens(p, params)?;
    if perturbation.passage_active.len() != p.len() {
        return Err(Error::InvalidInput("token mask length differs from passage".into()));
    }
    let d = params.dim();
    let all_q = vec![true; q.len()];
    let tq = tower_forward(q, params, &all_q, perturbation.query_masks.as_ref());
    let tp = tower_forward(p, params, &perturbation.passage_active, perturbation.passage_masks.as_ref());
    let (nq, np) = (norm(&tq.pooled), norm(&tp.pooled));
    if !(nq > 0.0 && np > 0.0 && nq.is_finite() && np.is_finite()) {
        return Err(Error::Numerical(format!(
            "degenerate encoding norms (query {nq}, passage {np})"
        )));
    }
    let qhat: Vec<f64> = tq.pooled.iter().map(|v| v / nq).collect();
    let phat: Vec<f64> = tp.pooled.iter().map(|v| v / np).collect();
    let s = dot(&qhat, &phat);
    // d s / d h = (I - h_hat h_hat^T) other_hat / |h|
    let g_q: Vec<f64> = (0..d).map(|i| (phat[i] - s * qhat[i]) / nq).collect();
    let g_p: Vec<f64> = (0..d).map(|i| (qhat[i] - s * phat[i]) / np).collect();

    let mut gamma = vec![0.0; d];
    let mut beta = vec![0.0; d];
    tower_backward(&tq, params, perturbation.query_masks.as_ref(), probe.layer, &g_q, &mut gamma, &mut beta);
    tower_backward(&tp, params, perturbation.passage_masks.as_ref(), probe.layer, &g_p, &mut gamma, &mut beta);
    let grad = assemble_probe(probe, gamma, beta);
    if let Some(i) = grad.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite probe gradient at coordinate {i} (score {s})"
        )));
    }
    Ok(grad)
}

fn probe_slot(params: &mut TinyEncoderParams, block: usize, is_gain: bool, i: usize) -> &mut f64 {
    let blk = &mut params.blocks[block];
    if is_gain {
        &mut blk.gamma[i]
    } else {
        &mut blk.beta[i]
    }
}

/// Central-difference gradient over the probe coordinates with the same
/// fixed masks. Verification oracle for [`probe_gradient`].
pub fn finite_diff_gradient(
    q: &TokenSeq,
    p: &TokenSeq,
    params: &TinyEncoderParams,
    probe: &ProbeSpec,
    perturbation: &RealizedPerturbation,
    h: f64,
) -> Result<Vec<f64>> {
    probe.validate(params)?;
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidInput(format!("step must be positive, got {h}")));
    }
    let d = params.dim();
    let b = probe.layer - 1;
    let coords: Vec<(bool, usize)> = match probe.target {
        ProbeTarget::GainAndBias => (0..d).map(|i| (true, i)).chain((0..d).map(|i| (false, i))).collect(),
        ProbeTarget::GainOnly => (0..d).map(|i| (true, i)).collect(),
        ProbeTarget::BiasOnly => (0..d).map(|i| (false, i)).collect(),
    };
    let mut shifted = params.clone();
    coords
        .into_iter()
        .map(|(is_gain, i)| {
            let orig = *probe_slot(&mut shifted, b, is_gain, i);
            *probe_slot(&mut shifted, b, is_gain, i) = orig + h;
            let up = perturbed_score(q, p, &shifted, perturbation)?;
            *probe_slot(&mut shifted, b, is_gain, i) = orig - h;
            let down = perturbed_score(q, p, &shifted, perturbation)?;
            *probe_slot(&mut shifted, b, is_gain, i) = orig;
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

/// Collects `runs` probe gradients for one pair, each under an independent
/// perturbation seeded from `(master_seed, query id, passage id, run)`.
#[allow(clippy::too_many_arguments)]
pub fn signature_for_pair(
    pair: &PairId,
    q: &TokenSeq,
    p: &TokenSeq,
    params: &TinyEncoderParams,
    probe: &ProbeSpec,
    perturbation: &PerturbationSpec,
    runs: usize,
    master_seed: u64,
) -> Result<GradientSignature> {
    if runs < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 runs, got {runs}")));
    }
    perturbation.validate()?;
    let mut flat = Vec::with_capacity(runs * probe.dim(params));
    for r in 0..runs {
        let realized = perturbation.realize_for_run(master_seed, pair, r, q.len(), p.len(), params);
        flat.extend(probe_gradient(q, p, params, probe, &realized)?);
    }
    GradientSignature::from_flat(pair.clone(), probe.dim(params), flat, perturbation.kind, probe.layer)
}

/// Unperturbed final-block representation of every vocabulary token,
/// row-major `V x d`. A passage's pooled vector is the mean of its rows.
pub fn token_table(params: &TinyEncoderParams) -> Vec<f64> {
    let d = params.dim();
    let nb = params.num_blocks();
    let mut table = vec![0.0; params.vocab_size() * d];
    let mut tanh_out = vec![0.0; nb * d];
    let mut xhat = vec![0.0; nb * d];
    let mut inv_std = vec![0.0; nb];
    let weights_t = transposed_weights(params);
    for (t, row) in table.chunks_exact_mut(d).enumerate() {
        token_forward(params, &weights_t, t as u32, None, &mut tanh_out, &mut xhat, &mut inv_std, row);
    }
    table
}
