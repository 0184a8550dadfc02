//! The seq2seq-masked transformer: one forward definition shared by every
//! task. Pre-LN blocks, learned absolute (or per-segment) positions, GELU
//! FFN, tied input/output embeddings, optional per-layer FFN adapters.
//!
//! Attention visibility is a boolean mask computed from region tags:
//! bidirectional tokens see the whole bidirectional region, autoregressive
//! tokens additionally see AR tokens up to and including themselves. A
//! block-diagonal variant restricts attention to same-segment tokens for the
//! phase-1 encoding of the multi-segment path.

use std::rc::Rc;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{MaskMat, Mat, NodeId, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::text::{EncodedSequence, Region};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    /// Token embedding width; < dim means factorized embeddings with a
    /// learned projection up to `dim`.
    pub emb_dim: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
    /// Content segments per sequence (slot 0 is reserved for soft prompts).
    pub max_segments: usize,
    pub retrieval_dim: usize,
    /// One physical layer reused `layers` times.
    pub share_layers: bool,
}

impl ModelConfig {
    /// Desk-scale default used across the pipelines.
    pub fn desk(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            layers: 4,
            heads: 8,
            dim: 64,
            emb_dim: 64,
            ffn_mult: 4,
            max_len: 256,
            max_segments: 16,
            retrieval_dim: 128,
            share_layers: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.layers == 0 {
            return Err(Error::Config("dim/heads/layers must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.emb_dim == 0 || self.emb_dim > self.dim {
            return Err(Error::Config(format!(
                "emb_dim {} must be in 1..=dim ({})",
                self.emb_dim, self.dim
            )));
        }
        if self.vocab_size < crate::text::SPECIALS.len() {
            return Err(Error::Config("vocab too small for the special tokens".into()));
        }
        if self.max_len < 8 || self.max_segments == 0 || self.retrieval_dim == 0 {
            return Err(Error::Config("max_len/max_segments/retrieval_dim too small".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn factorized(&self) -> bool {
        self.emb_dim < self.dim
    }

    /// Layers physically stored (1 when shared).
    pub fn stored_layers(&self) -> usize {
        if self.share_layers {
            1
        } else {
            self.layers
        }
    }

    fn layer_key(&self, l: usize) -> usize {
        if self.share_layers {
            0
        } else {
            l
        }
    }
}

// ─── parameters ───

/// Named tensor store. Insertion order is fixed by `init`, which makes every
/// iteration (gradients, serialization, fingerprints) deterministic. Tensors
/// sit behind Rc so a tape can reference them without copying.
pub struct Parameters<F: Scalar> {
    pub config: ModelConfig,
    tensors: IndexMap<String, Rc<Mat<F>>>,
}

impl<F: Scalar> Clone for Parameters<F> {
    fn clone(&self) -> Self {
        // deep clone: the copy must be independently mutable
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), Rc::new((**v).clone())))
            .collect();
        Parameters { config: self.config.clone(), tensors }
    }
}

impl<F: Scalar> Parameters<F> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Parameters<F>> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, INIT_STD).expect("valid normal");
        let mut p = Parameters { config: config.clone(), tensors: IndexMap::new() };
        let d = config.dim;
        let de = config.emb_dim;
        let f = config.ffn_mult * d;

        let mut randn = |p: &mut Parameters<F>, key: &str, r: usize, c: usize| {
            let m = Mat::from_shape_fn((r, c), |_| F::from_f64(normal.sample(&mut rng)));
            p.tensors.insert(key.to_string(), Rc::new(m));
        };
        let zeros = |p: &mut Parameters<F>, key: &str, r: usize, c: usize| {
            p.tensors.insert(key.to_string(), Rc::new(Mat::zeros((r, c))));
        };
        let ones = |p: &mut Parameters<F>, key: &str, c: usize| {
            p.tensors.insert(key.to_string(), Rc::new(Mat::ones((1, c))));
        };

        randn(&mut p, "tok_emb", config.vocab_size, de);
        if config.factorized() {
            randn(&mut p, "emb_proj", de, d);
        }
        randn(&mut p, "pos_emb", config.max_len + 1, d);
        // zero so that ignoring segments is exactly a no-op until trained
        zeros(&mut p, "seg_emb", config.max_segments + 1, d);

        for l in 0..config.stored_layers() {
            ones(&mut p, &format!("layer{}.ln1.gain", l), d);
            zeros(&mut p, &format!("layer{}.ln1.bias", l), 1, d);
            for w in ["wq", "wk", "wv", "wo"] {
                randn(&mut p, &format!("layer{}.attn.{}", l, w), d, d);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                zeros(&mut p, &format!("layer{}.attn.{}", l, b), 1, d);
            }
            ones(&mut p, &format!("layer{}.ln2.gain", l), d);
            zeros(&mut p, &format!("layer{}.ln2.bias", l), 1, d);
            randn(&mut p, &format!("layer{}.ffn.w1", l), d, f);
            zeros(&mut p, &format!("layer{}.ffn.b1", l), 1, f);
            randn(&mut p, &format!("layer{}.ffn.w2", l), f, d);
            zeros(&mut p, &format!("layer{}.ffn.b2", l), 1, d);
        }
        ones(&mut p, "ln_f.gain", d);
        zeros(&mut p, "ln_f.bias", 1, d);
        randn(&mut p, "score.w", d, 2);
        zeros(&mut p, "score.b", 1, 2);
        randn(&mut p, "proj_user", d, config.retrieval_dim);
        randn(&mut p, "proj_item", d, config.retrieval_dim);
        Ok(p)
    }

    /// Expected tensor-entry count for a config; checked against allocation.
    pub fn expected_param_count(config: &ModelConfig) -> usize {
        let d = config.dim;
        let de = config.emb_dim;
        let f = config.ffn_mult * d;
        let mut n = config.vocab_size * de;
        if config.factorized() {
            n += de * d;
        }
        n += (config.max_len + 1) * d;
        n += (config.max_segments + 1) * d;
        let per_layer = 2 * d          // ln1
            + 4 * d * d + 4 * d        // attention
            + 2 * d                    // ln2
            + d * f + f + f * d + d;   // ffn
        n += config.stored_layers() * per_layer;
        n += 2 * d; // ln_f
        n += d * 2 + 2; // score head
        n += 2 * d * config.retrieval_dim;
        n
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn get(&self, key: &str) -> &Rc<Mat<F>> {
        self.tensors
            .get(key)
            .unwrap_or_else(|| panic!("missing parameter tensor {:?}", key))
    }

    pub fn try_get(&self, key: &str) -> Option<&Rc<Mat<F>>> {
        self.tensors.get(key)
    }

    /// Mutable access; clones out of shared Rc's lazily.
    pub fn get_mut(&mut self, key: &str) -> &mut Mat<F> {
        let rc = self
            .tensors
            .get_mut(key)
            .unwrap_or_else(|| panic!("missing parameter tensor {:?}", key));
        Rc::make_mut(rc)
    }

    pub fn insert(&mut self, key: String, value: Mat<F>) {
        self.tensors.insert(key, Rc::new(value));
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|k| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Rc<Mat<F>>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }
}

// ─── masks ───

fn allowed(regions: &[Region], i: usize, j: usize) -> bool {
    match (regions[i], regions[j]) {
        (_, Region::Bidir) => true,
        (Region::Bidir, Region::Ar) => false,
        (Region::Ar, Region::Ar) => j <= i,
    }
}

/// Full seq2seq mask over a (possibly prompt-extended) region list.
pub fn seq2seq_mask(regions: &[Region]) -> MaskMat {
    let n = regions.len();
    MaskMat::from_shape_fn((n, n), |(i, j)| allowed(regions, i, j))
}

/// Seq2seq mask intersected with same-segment visibility (phase-1 encoding).
pub fn block_mask(regions: &[Region], segments: &[usize]) -> MaskMat {
    let n = regions.len();
    assert_eq!(segments.len(), n, "block_mask: segments length");
    MaskMat::from_shape_fn((n, n), |(i, j)| segments[i] == segments[j] && allowed(regions, i, j))
}

// ─── forward ───

/// Node handles for every parameter tensor inserted into one tape, plus the
/// effective V x dim embedding table (post projection when factorized).
pub struct ParamNodes {
    map: IndexMap<String, NodeId>,
    pub emb_full: NodeId,
}

impl ParamNodes {
    pub fn node(&self, key: &str) -> NodeId {
        *self.map.get(key).unwrap_or_else(|| panic!("missing parameter node {:?}", key))
    }

    pub fn try_node(&self, key: &str) -> Option<NodeId> {
        self.map.get(key).copied()
    }

    /// Full name -> node map, in parameter insertion order.
    pub fn names(&self) -> &IndexMap<String, NodeId> {
        &self.map
    }
}

pub fn insert_params<F: Scalar>(tape: &mut Tape<F>, params: &Parameters<F>) -> ParamNodes {
    let mut map = IndexMap::new();
    for (k, v) in params.iter() {
        map.insert(k.to_string(), tape.shared(Rc::clone(v)));
    }
    let emb_full = if params.config.factorized() {
        tape.matmul(map["tok_emb"], map["emb_proj"])
    } else {
        map["tok_emb"]
    };
    ParamNodes { map, emb_full }
}

/// Per-layer adapter parameter nodes (absent entries mean no adapter there).
pub struct AdapterStack {
    pub layers: Vec<Option<AdapterNodes>>,
}

#[derive(Copy, Clone)]
pub struct AdapterNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub lambda: NodeId,
}

#[derive(Copy, Clone, PartialEq, Eq)]
pub enum MaskMode {
    Full,
    BlockDiagonal,
}

#[derive(Copy, Clone, PartialEq, Eq)]
pub enum PositionMode {
    Absolute,
    PerSegment,
}

pub struct ForwardOpts<'a> {
    /// Half-open absolute layer range to execute.
    pub layer_range: (usize, usize),
    pub adapters: Option<&'a AdapterStack>,
    pub record_attn: bool,
}

impl Default for ForwardOpts<'_> {
    fn default() -> Self {
        ForwardOpts { layer_range: (0, usize::MAX), adapters: None, record_attn: false }
    }
}

pub struct ForwardTrace {
    /// hidden[k] = residual stream entering layer k; hidden[layers] = output.
    /// None for layers outside the executed range.
    pub hidden: Vec<Option<NodeId>>,
    /// Per executed layer: per-head attention probability nodes.
    pub attn: Vec<Option<Vec<NodeId>>>,
    /// Per executed layer: the full-width value projection.
    pub values: Vec<Option<NodeId>>,
    pub len: usize,
}

impl ForwardTrace {
    pub fn output(&self) -> NodeId {
        self.hidden
            .iter()
            .rev()
            .find_map(|h| *h)
            .expect("trace has no executed layers")
    }
}

fn resolve_range(cfg: &ModelConfig, range: (usize, usize)) -> Result<(usize, usize)> {
    let (from, mut to) = range;
    if to == usize::MAX {
        to = cfg.layers;
    }
    if from > to || to > cfg.layers {
        return Err(Error::Contract(format!(
            "layer range {}..{} outside 0..{}",
            from, to, cfg.layers
        )));
    }
    Ok((from, to))
}

/// Run layers `[from, to)` starting from an arbitrary residual stream.
pub fn forward_from<F: Scalar>(
    tape: &mut Tape<F>,
    pn: &ParamNodes,
    cfg: &ModelConfig,
    x0: NodeId,
    mask: Rc<MaskMat>,
    opts: &ForwardOpts,
) -> Result<ForwardTrace> {
    let (from, to) = resolve_range(cfg, opts.layer_range)?;
    let len = tape.value(x0).nrows();
    assert_eq!(mask.dim(), (len, len), "mask must be len x len");
    let dh = cfg.head_dim();
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());

    let mut hidden = vec![None; cfg.layers + 1];
    let mut attn = Vec::with_capacity(cfg.layers);
    let mut values = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        attn.push(None);
        values.push(None);
    }
    hidden[from] = Some(x0);

    let mut x = x0;
    for l in from..to {
        let k = cfg.layer_key(l);
        let key = |name: &str| format!("layer{}.{}", k, name);

        let g1 = pn.node(&key("ln1.gain"));
        let b1 = pn.node(&key("ln1.bias"));
        let xn = tape.layer_norm(x, g1, b1);

        let wq = pn.node(&key("attn.wq"));
        let bq = pn.node(&key("attn.bq"));
        let wk = pn.node(&key("attn.wk"));
        let bk = pn.node(&key("attn.bk"));
        let wv = pn.node(&key("attn.wv"));
        let bv = pn.node(&key("attn.bv"));
        let q = tape.matmul(xn, wq);
        let q = tape.add_bias(q, bq);
        let kk = tape.matmul(xn, wk);
        let kk = tape.add_bias(kk, bk);
        let v = tape.matmul(xn, wv);
        let v = tape.add_bias(v, bv);

        let mut head_ctx = Vec::with_capacity(cfg.heads);
        let mut head_probs = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(kk, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let probs = tape.masked_softmax(scores, Rc::clone(&mask));
            head_probs.push(probs);
            head_ctx.push(tape.matmul(probs, vh));
        }
        let ctx = tape.concat_cols(&head_ctx);
        let wo = pn.node(&key("attn.wo"));
        let bo = pn.node(&key("attn.bo"));
        let proj = tape.matmul(ctx, wo);
        let proj = tape.add_bias(proj, bo);
        x = tape.add(x, proj);

        let g2 = pn.node(&key("ln2.gain"));
        let b2 = pn.node(&key("ln2.bias"));
        let zn = tape.layer_norm(x, g2, b2);
        let w1 = pn.node(&key("ffn.w1"));
        let fb1 = pn.node(&key("ffn.b1"));
        let w2 = pn.node(&key("ffn.w2"));
        let fb2 = pn.node(&key("ffn.b2"));
        let h1 = tape.matmul(zn, w1);
        let h1 = tape.add_bias(h1, fb1);
        let h1 = tape.gelu(h1);
        let f = tape.matmul(h1, w2);
        let mut ffn_out = tape.add_bias(f, fb2);

        if let Some(stack) = opts.adapters {
            if let Some(Some(ad)) = stack.layers.get(l) {
                // FFN(Z) + lambda * (gelu(Z W1 + b1) W2 + b2)
                let a1 = tape.matmul(zn, ad.w1);
                let a1 = tape.add_bias(a1, ad.b1);
                let a1 = tape.gelu(a1);
                let a2 = tape.matmul(a1, ad.w2);
                let a2 = tape.add_bias(a2, ad.b2);
                let gated = tape.mul_scalar(a2, ad.lambda);
                ffn_out = tape.add(ffn_out, gated);
            }
        }
        x = tape.add(x, ffn_out);

        if opts.record_attn {
            attn[l] = Some(head_probs);
            values[l] = Some(v);
        }
        hidden[l + 1] = Some(x);
    }

    Ok(ForwardTrace { hidden, attn, values, len })
}

// ─── sequence assembly ───

/// How a token sequence enters the graph.
pub struct SequenceInput<'a> {
    pub seq: &'a EncodedSequence,
    pub positions: PositionMode,
    /// Soft-prompt rows (P x dim) prepended before the tokens, outside the
    /// position table.
    pub prompts: Option<NodeId>,
    /// Trainable replacements for special-token embeddings: (vocab id, 1 x dim).
    pub overrides: &'a [(usize, NodeId)],
}

impl<'a> SequenceInput<'a> {
    pub fn plain(seq: &'a EncodedSequence) -> Self {
        SequenceInput { seq, positions: PositionMode::Absolute, prompts: None, overrides: &[] }
    }
}

/// The assembled embedding matrix plus region/segment rows covering prompts.
pub struct AssembledInput {
    pub x0: NodeId,
    pub regions: Vec<Region>,
    /// Segment slot per row; prompt rows get slot 0.
    pub segments: Vec<usize>,
    pub prompt_len: usize,
}

pub fn assemble<F: Scalar>(
    tape: &mut Tape<F>,
    pn: &ParamNodes,
    cfg: &ModelConfig,
    input: &SequenceInput,
) -> Result<AssembledInput> {
    let seq = input.seq;
    if seq.is_empty() {
        return Err(Error::Contract("cannot assemble an empty sequence".into()));
    }
    if seq.len() > cfg.max_len {
        return Err(Error::Contract(format!(
            "sequence length {} exceeds max_len {}",
            seq.len(),
            cfg.max_len
        )));
    }
    if seq.segment_count() > cfg.max_segments {
        return Err(Error::Contract(format!(
            "{} segments exceed max_segments {}",
            seq.segment_count(),
            cfg.max_segments
        )));
    }

    let tok = tape.gather_rows(pn.emb_full, &seq.ids);
    let tok = if input.overrides.is_empty() {
        tok
    } else {
        let mut rows = Vec::new();
        for (i, &id) in seq.ids.iter().enumerate() {
            for &(vid, node) in input.overrides {
                if id == vid {
                    rows.push((i, node));
                }
            }
        }
        if rows.is_empty() {
            tok
        } else {
            tape.override_rows(tok, &rows)
        }
    };

    let positions = match input.positions {
        PositionMode::Absolute => seq.absolute_positions(),
        PositionMode::PerSegment => seq.segment_positions(),
    };
    let pos = tape.gather_rows(pn.node("pos_emb"), &positions);
    let emb = tape.add(tok, pos);

    let (x0, prompt_len) = match input.prompts {
        Some(p) => {
            let plen = tape.value(p).nrows();
            (tape.concat_rows(&[p, emb]), plen)
        }
        None => (emb, 0),
    };

    let mut regions = vec![Region::Bidir; prompt_len];
    regions.extend_from_slice(&seq.regions);
    let mut segments = vec![0usize; prompt_len];
    segments.extend_from_slice(&seq.segments);
    Ok(AssembledInput { x0, regions, segments, prompt_len })
}

/// Assemble + mask + run in one call. Returns the trace together with the
/// assembled rows so heads can find token positions (offset by prompt_len).
pub fn forward_seq<F: Scalar>(
    tape: &mut Tape<F>,
    pn: &ParamNodes,
    cfg: &ModelConfig,
    input: &SequenceInput,
    mask_mode: MaskMode,
    opts: &ForwardOpts,
) -> Result<(ForwardTrace, AssembledInput)> {
    let asm = assemble(tape, pn, cfg, input)?;
    let mask = match mask_mode {
        MaskMode::Full => seq2seq_mask(&asm.regions),
        MaskMode::BlockDiagonal => block_mask(&asm.regions, &asm.segments),
    };
    let trace = forward_from(tape, pn, cfg, asm.x0, Rc::new(mask), opts)?;
    Ok((trace, asm))
}

// ─── heads ───

pub fn final_norm<F: Scalar>(tape: &mut Tape<F>, pn: &ParamNodes, h: NodeId) -> NodeId {
    tape.layer_norm(h, pn.node("ln_f.gain"), pn.node("ln_f.bias"))
}

/// Tied LM head: ln_f(h) times the effective embedding table, transposed.
pub fn lm_logits<F: Scalar>(tape: &mut Tape<F>, pn: &ParamNodes, h: NodeId) -> NodeId {
    let n = final_norm(tape, pn, h);
    tape.matmul_nt(n, pn.emb_full)
}

/// Binary scoring head on one row (usually h at [EOS]).
pub fn score_logits<F: Scalar>(tape: &mut Tape<F>, pn: &ParamNodes, h_row: NodeId) -> NodeId {
    let n = final_norm(tape, pn, h_row);
    let z = tape.matmul(n, pn.node("score.w"));
    tape.add_bias(z, pn.node("score.b"))
}

/// Next-token cross entropy over the AR region. Position t contributes when
/// both t-1 and t are autoregressive (so [bos] itself is never a target and
/// bidirectional content never leaks into the loss). Returns the scalar node
/// and the number of predicted tokens.
pub fn lm_loss<F: Scalar>(
    tape: &mut Tape<F>,
    pn: &ParamNodes,
    cfg: &ModelConfig,
    trace: &ForwardTrace,
    asm: &AssembledInput,
    seq: &EncodedSequence,
) -> Result<(NodeId, usize)> {
    let _ = cfg;
    let off = asm.prompt_len;
    // targets are consecutive AR tokens; predictors are the rows before them
    let mut first_target = None;
    for t in 1..seq.len() {
        if seq.regions[t] == Region::Ar && seq.regions[t - 1] == Region::Ar {
            first_target = Some(t);
            break;
        }
    }
    let Some(first) = first_target else {
        return Err(Error::Contract("LM loss needs a nonempty AR region".into()));
    };
    let last = seq.len() - 1; // sequences end at [eos], always AR
    let count = last - first + 1;
    let h = trace.output();
    let rows = tape.slice_rows(h, off + first - 1, count);
    let logits = lm_logits(tape, pn, rows);
    let targets: Vec<usize> = (first..=last).map(|t| seq.ids[t]).collect();
    let loss = tape.mean_cross_entropy(logits, &targets);
    Ok((loss, count))
}

// ─── generation ───

#[derive(Clone, Debug)]
pub struct GenerateConfig {
    pub max_new: usize,
    /// 0 (or anything below 1e-6) means greedy argmax.
    pub temperature: f64,
    /// Nucleus cutoff in (0, 1]; 1.0 disables filtering.
    pub top_p: f64,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig { max_new: 32, temperature: 0.0, top_p: 1.0, seed: 0 }
    }
}

/// Greedy/nucleus sampling continuation. `prefix` must end inside the AR
/// region (no trailing [eos]); generated ids are appended until [eos],
/// `max_new`, or the position budget. Returns only the newly generated ids.
pub fn generate<F: Scalar>(
    params: &Parameters<F>,
    vocab: &crate::text::Vocabulary,
    prefix: &EncodedSequence,
    gcfg: &GenerateConfig,
) -> Result<Vec<usize>> {
    let cfg = &params.config;
    let eos = vocab.special(crate::text::Special::EosA);
    if prefix.regions.last() != Some(&Region::Ar) {
        return Err(Error::Contract("generation prefix must end in the AR region".into()));
    }
    let mut seq = prefix.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(gcfg.seed);
    let mut out = Vec::new();

    for _ in 0..gcfg.max_new {
        if seq.len() >= cfg.max_len {
            break;
        }
        let mut tape: Tape<F> = Tape::new();
        let pn = insert_params(&mut tape, params);
        let input = SequenceInput::plain(&seq);
        let (trace, asm) =
            forward_seq(&mut tape, &pn, cfg, &input, MaskMode::Full, &ForwardOpts::default())?;
        let h = trace.output();
        let last = tape.slice_rows(h, asm.prompt_len + seq.len() - 1, 1);
        let logits = lm_logits(&mut tape, &pn, last);
        let row = tape.value(logits).row(0).mapv(|v| v.to_f64()).to_vec();

        let next = sample_token(&row, gcfg, &mut rng);
        out.push(next);
        let seg = *seq.segments.last().unwrap();
        seq.ids.push(next);
        seq.regions.push(Region::Ar);
        seq.segments.push(seg);
        if next == eos {
            break;
        }
    }
    Ok(out)
}

fn sample_token(logits: &[f64], gcfg: &GenerateConfig, rng: &mut ChaCha8Rng) -> usize {
    if gcfg.temperature < 1e-6 {
        // greedy; ties resolve to the lowest id
        let mut best = 0usize;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let t = gcfg.temperature;
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|&v| ((v - mx) / t).exp()).collect();
    let z: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= z;
    }
    // nucleus: keep the smallest prefix of the sorted distribution with
    // cumulative mass >= top_p
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        kept.push(i);
        mass += probs[i];
        if mass >= gcfg.top_p {
            break;
        }
    }
    let draw: f64 = rand::Rng::random_range(rng, 0.0..1.0) * mass;
    let mut acc = 0.0;
    for &i in &kept {
        acc += probs[i];
        if draw < acc {
            return i;
        }
    }
    *kept.last().unwrap()
}
