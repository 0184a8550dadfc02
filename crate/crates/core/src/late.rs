//! Two-phase inference over segmented requests.
//!
//! Phase 1 runs the first `split` layers on each segment alone (positions
//! restarting at 1, attention confined to the segment) and caches the result
//! by content hash, so a segment shared by many requests is computed once.
//! Phase 2 adds slot embeddings, concatenates the cached prefixes in order,
//! and runs the remaining layers with the full mask.
//!
//! Training uses a single forward pass that is numerically equivalent: the
//! prefix layers see a block-diagonal-by-segment mask, slot embeddings are
//! injected at the split, and the interaction layers see the full mask.

use std::io::{Read as _, Write as _};
use std::path::PathBuf;
use std::rc::Rc;
use std::time::Instant;

use indexmap::IndexMap;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use crate::adapt::{
    head_logits, insert_state, ScoreExample, StateNodes, TuneConfig, TuneLog, TuneMethod,
    TuningState,
};
use crate::autodiff::{Mat, NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::{
    block_mask, forward_from, insert_params, seq2seq_mask, ForwardOpts, ModelConfig, ParamNodes,
    Parameters, PositionMode, SequenceInput,
};
use crate::text::{join_segments, Region, Segment, SegmentKind, Vocabulary};
use crate::train::{check_finite, collect_grads, sample_batch, Adam, AdamConfig, GradAccum};

#[derive(Clone, Debug)]
pub struct LateConfig {
    /// L': layers computed per segment and cached.
    pub split: usize,
    /// LRU capacity in entries.
    pub capacity: usize,
    /// Optional append-only persistence file.
    pub disk_path: Option<PathBuf>,
    /// Candidate segments carry per-request cross features and are skipped
    /// by the cache unless this is set.
    pub cache_candidates: bool,
}

impl LateConfig {
    pub fn new(split: usize) -> LateConfig {
        LateConfig { split, capacity: 1024, disk_path: None, cache_candidates: false }
    }

    /// Interaction depth must stay in 1..=3 to keep phase 2 cheap.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.split >= cfg.layers {
            return Err(Error::Config(format!(
                "split {} leaves no interaction layers (model has {})",
                self.split, cfg.layers
            )));
        }
        let inter = cfg.layers - self.split;
        if inter > 3 {
            return Err(Error::Config(format!(
                "{} interaction layers; at most 3 are allowed for latency",
                inter
            )));
        }
        Ok(())
    }
}

// ─── keys and cache ───

/// Content address of one cached prefix: what was encoded, by which model,
/// through how many layers.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct SegmentKey {
    pub content_hash: [u8; 32],
    pub fingerprint: String,
    pub split: usize,
}

impl SegmentKey {
    pub fn for_segment(seg: &Segment, fingerprint: &str, split: usize) -> SegmentKey {
        let mut h = Sha256::new();
        h.update([seg.kind as u8]);
        h.update([0x1f]);
        h.update(seg.key_text.as_bytes());
        SegmentKey { content_hash: h.finalize().into(), fingerprint: fingerprint.into(), split }
    }

    /// Prompt prefixes are addressed by the prompt tensor's bytes.
    pub fn for_prompts(prompts: &Mat<f32>, fingerprint: &str, split: usize) -> SegmentKey {
        let mut h = Sha256::new();
        h.update(b"prompts\x1f");
        for v in prompts.iter() {
            h.update(v.to_le_bytes());
        }
        SegmentKey { content_hash: h.finalize().into(), fingerprint: fingerprint.into(), split }
    }
}

/// Layer-`split` hidden states for one segment.
#[derive(Clone)]
pub struct CachedPrefix {
    pub hidden: Mat<f32>,
    /// Logical insertion counter (monotonic, not wall-clock) so cache
    /// contents stay byte-deterministic across reruns.
    pub stamp: u64,
}

impl CachedPrefix {
    pub fn tokens(&self) -> usize {
        self.hidden.nrows()
    }
}

pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
}

/// In-memory LRU fronting an optional append-only disk file.
pub struct PrefixCache {
    capacity: usize,
    entries: IndexMap<SegmentKey, CachedPrefix>,
    stamp: u64,
    hits: u64,
    misses: u64,
    disk: Option<PathBuf>,
}

impl PrefixCache {
    pub fn new(capacity: usize) -> PrefixCache {
        PrefixCache {
            capacity: capacity.max(1),
            entries: IndexMap::new(),
            stamp: 0,
            hits: 0,
            misses: 0,
            disk: None,
        }
    }

    /// Open a persistent cache: existing records for this fingerprint/split
    /// are loaded; others are skipped; a corrupt tail stops the scan (the
    /// records before it remain usable).
    pub fn with_disk(
        capacity: usize,
        path: PathBuf,
        fingerprint: &str,
        split: usize,
    ) -> Result<PrefixCache> {
        let mut cache = PrefixCache::new(capacity);
        if path.exists() {
            let mut bytes = Vec::new();
            std::fs::File::open(&path)?.read_to_end(&mut bytes)?;
            cache.load_records(&bytes, fingerprint, split);
        }
        cache.disk = Some(path);
        Ok(cache)
    }

    fn load_records(&mut self, bytes: &[u8], fingerprint: &str, split: usize) {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Option<&[u8]> {
            if *pos + n > bytes.len() {
                return None;
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Some(s)
        };
        loop {
            let start = pos;
            let Some(hash) = take(&mut pos, 32) else { break };
            let hash: [u8; 32] = hash.try_into().unwrap();
            let Some(fplen) = take(&mut pos, 4) else { pos = start; break };
            let fplen = u32::from_le_bytes(fplen.try_into().unwrap()) as usize;
            let Some(fp) = take(&mut pos, fplen) else { pos = start; break };
            let Ok(fp) = std::str::from_utf8(fp).map(str::to_string) else { pos = start; break };
            let Some(sp) = take(&mut pos, 8) else { pos = start; break };
            let sp = u64::from_le_bytes(sp.try_into().unwrap()) as usize;
            let Some(rows) = take(&mut pos, 8) else { pos = start; break };
            let rows = u64::from_le_bytes(rows.try_into().unwrap()) as usize;
            let Some(cols) = take(&mut pos, 8) else { pos = start; break };
            let cols = u64::from_le_bytes(cols.try_into().unwrap()) as usize;
            let Some(n) = rows.checked_mul(cols) else { pos = start; break };
            let Some(raw) = take(&mut pos, n * 4) else { pos = start; break };
            if fp != fingerprint || sp != split {
                continue; // someone else's records; keep scanning
            }
            let data: Vec<f32> =
                raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let Ok(hidden) = Mat::from_shape_vec((rows, cols), data) else { pos = start; break };
            let key = SegmentKey { content_hash: hash, fingerprint: fp, split: sp };
            self.insert_evicting(key, hidden);
        }
        if pos != bytes.len() {
            log::warn!(
                "prefix cache file has a corrupt tail; keeping {} records, ignoring {} bytes",
                self.entries.len(),
                bytes.len() - pos
            );
        }
    }

    fn append_record(&self, key: &SegmentKey, hidden: &Mat<f32>) -> Result<()> {
        let Some(path) = &self.disk else { return Ok(()) };
        let mut out = Vec::new();
        out.extend_from_slice(&key.content_hash);
        out.extend_from_slice(&(key.fingerprint.len() as u32).to_le_bytes());
        out.extend_from_slice(key.fingerprint.as_bytes());
        out.extend_from_slice(&(key.split as u64).to_le_bytes());
        out.extend_from_slice(&(hidden.nrows() as u64).to_le_bytes());
        out.extend_from_slice(&(hidden.ncols() as u64).to_le_bytes());
        for v in hidden.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    fn insert_evicting(&mut self, key: SegmentKey, hidden: Mat<f32>) {
        self.stamp += 1;
        self.entries.insert(key, CachedPrefix { hidden, stamp: self.stamp });
        while self.entries.len() > self.capacity {
            self.entries.shift_remove_index(0);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats { hits: self.hits, misses: self.misses }
    }

    pub fn contains(&self, key: &SegmentKey) -> bool {
        self.entries.contains_key(key)
    }

    /// Return the cached matrix or compute, store, and persist it.
    /// The bool is true on a hit.
    pub fn lookup_or_compute(
        &mut self,
        key: SegmentKey,
        compute: impl FnOnce() -> Result<Mat<f32>>,
    ) -> Result<(Mat<f32>, bool)> {
        if let Some(idx) = self.entries.get_index_of(&key) {
            self.hits += 1;
            let last = self.entries.len() - 1;
            self.entries.move_index(idx, last);
            return Ok((self.entries[last].hidden.clone(), true));
        }
        self.misses += 1;
        let hidden = compute()?;
        self.append_record(&key, &hidden)?;
        self.insert_evicting(key, hidden.clone());
        Ok((hidden, false))
    }
}

// ─── phase 1: per-segment encoding ───

/// Run the first `split` layers on one segment alone. Positions restart at 1;
/// attention stays inside the segment (its own region mask).
pub fn encode_segment(
    params: &Parameters<f32>,
    split: usize,
    seg: &Segment,
) -> Result<Mat<f32>> {
    if seg.ids.is_empty() {
        return Err(Error::Contract("cannot encode an empty segment".into()));
    }
    let cfg = &params.config;
    let mut tape: Tape<f32> = Tape::new();
    let pn = insert_params(&mut tape, params);
    let x0 = segment_embed(&mut tape, &pn, seg);
    if split == 0 {
        return Ok(tape.value(x0).clone());
    }
    let mask = Rc::new(seq2seq_mask(&seg.regions));
    let opts = ForwardOpts { layer_range: (0, split), ..Default::default() };
    let trace = forward_from(&mut tape, &pn, cfg, x0, mask, &opts)?;
    Ok(tape.value(trace.output()).clone())
}

fn segment_embed(tape: &mut Tape<f32>, pn: &ParamNodes, seg: &Segment) -> NodeId {
    let tok = tape.gather_rows(pn.emb_full, &seg.ids);
    let positions: Vec<usize> = (1..=seg.ids.len()).collect();
    let pos = tape.gather_rows(pn.node("pos_emb"), &positions);
    tape.add(tok, pos)
}

/// Phase-1 encoding of a soft-prompt block: its own leading segment,
/// bidirectional, no positions.
pub fn encode_prompt_prefix(
    params: &Parameters<f32>,
    split: usize,
    prompts: &Mat<f32>,
) -> Result<Mat<f32>> {
    if prompts.nrows() == 0 {
        return Err(Error::Contract("cannot encode an empty prompt block".into()));
    }
    let cfg = &params.config;
    let mut tape: Tape<f32> = Tape::new();
    let pn = insert_params(&mut tape, params);
    let x0 = tape.leaf(prompts.clone());
    if split == 0 {
        return Ok(tape.value(x0).clone());
    }
    let mask = Rc::new(crate::autodiff::MaskMat::from_elem(
        (prompts.nrows(), prompts.nrows()),
        true,
    ));
    let opts = ForwardOpts { layer_range: (0, split), ..Default::default() };
    let trace = forward_from(&mut tape, &pn, cfg, x0, mask, &opts)?;
    Ok(tape.value(trace.output()).clone())
}

// ─── phase 2: interaction ───

fn seg_emb_node<F: crate::scalar::Scalar>(
    _tape: &mut Tape<F>,
    pn: &ParamNodes,
    sn: Option<&StateNodes>,
) -> NodeId {
    sn.and_then(|s| s.nodes.get("seg_emb").copied()).unwrap_or_else(|| pn.node("seg_emb"))
}

/// Concatenate cached prefixes (prompt block first when present), add the
/// slot embeddings, run the interaction layers with the full mask, and read
/// class logits at the final [eos].
pub fn interact(
    params: &Parameters<f32>,
    vocab: &Vocabulary,
    state: Option<&TuningState<f32>>,
    late: &LateConfig,
    segments: &[Segment],
    prefixes: &[Mat<f32>],
    prompt_prefix: Option<&Mat<f32>>,
) -> Result<Vec<f64>> {
    let cfg = &params.config;
    late.validate(cfg)?;
    if segments.len() != prefixes.len() {
        return Err(Error::Contract(format!(
            "{} segments but {} prefixes",
            segments.len(),
            prefixes.len()
        )));
    }
    if segments.is_empty() {
        return Err(Error::Contract("interaction needs at least one segment".into()));
    }
    if segments.len() > cfg.max_segments {
        return Err(Error::Contract(format!(
            "{} segments exceed max_segments {}",
            segments.len(),
            cfg.max_segments
        )));
    }
    for (seg, pre) in segments.iter().zip(prefixes.iter()) {
        if pre.nrows() != seg.ids.len() || pre.ncols() != cfg.dim {
            return Err(Error::Contract(format!(
                "prefix shape {:?} does not match segment of {} tokens",
                pre.dim(),
                seg.ids.len()
            )));
        }
    }

    let mut tape: Tape<f32> = Tape::new();
    let pn = insert_params(&mut tape, params);
    let sn = state.map(|st| insert_state(&mut tape, vocab, cfg, st));

    // rows: prompt block (slot 0), then each segment in order (slots 1..)
    let mut parts = Vec::new();
    let mut regions: Vec<Region> = Vec::new();
    let mut slots: Vec<usize> = Vec::new();
    let prompt_rows = prompt_prefix.map(|p| p.nrows()).unwrap_or(0);
    if let Some(p) = prompt_prefix {
        parts.push(tape.leaf(p.clone()));
        regions.extend(std::iter::repeat(Region::Bidir).take(p.nrows()));
        slots.extend(std::iter::repeat(0usize).take(p.nrows()));
    }
    for (i, (seg, pre)) in segments.iter().zip(prefixes.iter()).enumerate() {
        parts.push(tape.leaf(pre.clone()));
        regions.extend_from_slice(&seg.regions);
        slots.extend(std::iter::repeat(i + 1).take(seg.ids.len()));
    }
    let concat = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) };

    // slot embeddings are injected at the split, not in the cache
    let se = seg_emb_node(&mut tape, &pn, sn.as_ref());
    let se_rows = tape.gather_rows(se, &slots);
    let x_mid = tape.add(concat, se_rows);

    let mask = Rc::new(seq2seq_mask(&regions));
    let adapters = sn.as_ref().and_then(|s| s.adapters.as_ref());
    let opts = ForwardOpts { layer_range: (late.split, cfg.layers), adapters, ..Default::default() };
    let trace = forward_from(&mut tape, &pn, cfg, x_mid, mask, &opts)?;

    let flat = join_segments(segments);
    let eos = flat
        .eos_index(vocab)
        .ok_or_else(|| Error::Contract("segmented request has no [eos]".into()))?;
    let h = trace.output();
    let h_eos = tape.slice_rows(h, prompt_rows + eos, 1);
    let paired = match (&state, &sn) {
        (Some(st), Some(s)) => Some((*st, s)),
        _ => None,
    };
    let logits = head_logits(&mut tape, &pn, paired, h_eos)?;
    Ok(tape.value(logits).row(0).mapv(|v| v as f64).to_vec())
}

// ─── full request path with cache ───

pub struct ServeOutcome {
    pub logits: Vec<f64>,
    pub hits: usize,
    pub misses: usize,
    pub phase1: std::time::Duration,
    pub phase2: std::time::Duration,
}

/// Two-phase scoring of one segmented request through the cache.
pub fn serve(
    params: &Parameters<f32>,
    vocab: &Vocabulary,
    state: Option<&TuningState<f32>>,
    late: &LateConfig,
    cache: &mut PrefixCache,
    fingerprint: &str,
    segments: &[Segment],
) -> Result<ServeOutcome> {
    let t0 = Instant::now();
    let mut hits = 0usize;
    let mut misses = 0usize;
    let mut prefixes = Vec::with_capacity(segments.len());
    for seg in segments {
        let cacheable = late.cache_candidates || seg.kind != SegmentKind::Candidate;
        let hidden = if cacheable {
            let key = SegmentKey::for_segment(seg, fingerprint, late.split);
            let (h, hit) = cache.lookup_or_compute(key, || encode_segment(params, late.split, seg))?;
            if hit {
                hits += 1;
            } else {
                misses += 1;
            }
            h
        } else {
            misses += 1;
            encode_segment(params, late.split, seg)?
        };
        prefixes.push(hidden);
    }
    let prompt_prefix = match state {
        Some(st) if st.method.uses_prompts() => {
            let prompts = st.get("prompts");
            let key = SegmentKey::for_prompts(prompts, fingerprint, late.split);
            let (h, hit) =
                cache.lookup_or_compute(key, || encode_prompt_prefix(params, late.split, prompts))?;
            if hit {
                hits += 1;
            } else {
                misses += 1;
            }
            Some(h)
        }
        _ => None,
    };
    let phase1 = t0.elapsed();

    let t1 = Instant::now();
    let logits =
        interact(params, vocab, state, late, segments, &prefixes, prompt_prefix.as_ref())?;
    let phase2 = t1.elapsed();
    Ok(ServeOutcome { logits, hits, misses, phase1, phase2 })
}

// ─── single-pass training ───

/// One-pass forward that matches two-phase inference: block-diagonal mask and
/// per-segment positions through the prefix layers, slot embeddings at the
/// split, full mask above it.
pub fn late_forward<F: crate::scalar::Scalar>(
    tape: &mut Tape<F>,
    pn: &ParamNodes,
    cfg: &ModelConfig,
    split: usize,
    input: &SequenceInput,
    sn: Option<&StateNodes>,
) -> Result<(NodeId, usize)> {
    let mut inp = SequenceInput {
        seq: input.seq,
        positions: PositionMode::PerSegment,
        prompts: input.prompts,
        overrides: input.overrides,
    };
    // specials stay frozen in late mode so cached segments are state-free
    inp.overrides = &[];
    let asm = crate::model::assemble(tape, pn, cfg, &inp)?;
    let x_mid = if split == 0 {
        asm.x0
    } else {
        let block = Rc::new(block_mask(&asm.regions, &asm.segments));
        let opts = ForwardOpts { layer_range: (0, split), ..Default::default() };
        let t1 = forward_from(tape, pn, cfg, asm.x0, block, &opts)?;
        t1.output()
    };
    let se = seg_emb_node(tape, pn, sn);
    let se_rows = tape.gather_rows(se, &asm.segments);
    let x_mid = tape.add(x_mid, se_rows);
    let full = Rc::new(seq2seq_mask(&asm.regions));
    let adapters = sn.and_then(|s| s.adapters.as_ref());
    let opts = ForwardOpts { layer_range: (split, cfg.layers), adapters, ..Default::default() };
    let t2 = forward_from(tape, pn, cfg, x_mid, full, &opts)?;
    Ok((t2.output(), asm.prompt_len))
}

/// Adapt for segmented serving. Differences from ordinary tuning: special
/// embeddings stay frozen (cached segments must not depend on the state),
/// adapters exist only in the interaction layers, and the slot-embedding
/// table is trained into the state under "seg_emb".
pub fn tune_late(
    base: &Parameters<f32>,
    vocab: &Vocabulary,
    train_data: &[ScoreExample],
    tcfg: &TuneConfig,
    late: &LateConfig,
) -> Result<(TuningState<f32>, TuneLog)> {
    let cfg = base.config.clone();
    late.validate(&cfg)?;
    if train_data.is_empty() {
        return Err(Error::Config("empty tuning data".into()));
    }
    if tcfg.method == TuneMethod::Fine {
        return Err(Error::Config(
            "late-interaction tuning keeps the base frozen; use prompt/option methods".into(),
        ));
    }
    let classes = train_data.iter().map(|e| e.label).max().unwrap() + 1;
    if matches!(tcfg.method, TuneMethod::Option | TuneMethod::OptionAdapter)
        && classes != tcfg.adapt.option_count
    {
        return Err(Error::Config(format!(
            "option_count {} does not match {} classes in the data",
            tcfg.adapt.option_count, classes
        )));
    }

    let mut state =
        crate::adapt::init_state(base, vocab, tcfg.method, &tcfg.task, &tcfg.adapt, tcfg.seed)?;
    // state-free phase 1: no trained specials
    let special_keys: Vec<String> =
        state.tensors.keys().filter(|k| k.starts_with("special.")).cloned().collect();
    for k in special_keys {
        state.tensors.shift_remove(&k);
    }
    // adapters act only where the full-context forward runs
    let adapter_keys: Vec<String> = state
        .tensors
        .keys()
        .filter(|k| k.starts_with("adapter"))
        .filter(|k| {
            let layer: usize = k
                .trim_start_matches("adapter")
                .split('.')
                .next()
                .and_then(|s| s.parse().ok())
                .unwrap_or(0);
            layer < late.split
        })
        .cloned()
        .collect();
    for k in adapter_keys {
        state.tensors.shift_remove(&k);
    }
    // the slot table joins the state; the base copy stays zero
    state
        .tensors
        .insert("seg_emb".into(), Rc::new((**base.get("seg_emb")).clone()));

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x9e3779b97f4a7c15);
    let mut opt: Adam<f32> = Adam::new(AdamConfig::with_lr(tcfg.lr));
    let mut curve = Vec::with_capacity(tcfg.steps);
    let mut last = f64::NAN;

    for step in 0..tcfg.steps {
        let idx = sample_batch(&mut rng, train_data.len(), tcfg.batch);
        let mut acc = GradAccum::new();
        let mut loss_sum = 0.0f64;
        for &i in &idx {
            let ex = &train_data[i];
            let mut tape: Tape<f32> = Tape::new();
            let pn = insert_params(&mut tape, base);
            let sn = insert_state(&mut tape, vocab, &cfg, &state);
            let input = SequenceInput {
                seq: &ex.seq,
                positions: PositionMode::PerSegment,
                prompts: sn.prompts,
                overrides: &[],
            };
            let (h, prompt_len) = late_forward(&mut tape, &pn, &cfg, late.split, &input, Some(&sn))?;
            let eos = ex
                .seq
                .eos_index(vocab)
                .ok_or_else(|| Error::Contract("scoring sequence has no [eos]".into()))?;
            let h_eos = tape.slice_rows(h, prompt_len + eos, 1);
            let logits = head_logits(&mut tape, &pn, Some((&state, &sn)), h_eos)?;
            let loss = tape.mean_cross_entropy(logits, &[ex.label]);
            loss_sum += tape.scalar_value(loss) as f64;
            tape.backward(loss);
            acc.add(collect_grads(&tape, &sn.nodes, |_| true));
        }
        let mean_loss = loss_sum / idx.len() as f64;
        check_finite(mean_loss, step, "tune-late")?;
        opt.step(&mut state, &acc.mean());
        curve.push((step, mean_loss));
        last = mean_loss;
    }
    Ok((state, TuneLog { curve, acc_curve: vec![], final_loss: last }))
}

/// Score one segmented example with a late state via the single-pass path
/// (the training-time view of the model).
pub fn late_score_single_pass(
    base: &Parameters<f32>,
    vocab: &Vocabulary,
    state: Option<&TuningState<f32>>,
    late: &LateConfig,
    segments: &[Segment],
) -> Result<Vec<f64>> {
    let cfg = &base.config;
    let seq = join_segments(segments);
    let mut tape: Tape<f32> = Tape::new();
    let pn = insert_params(&mut tape, base);
    let sn = state.map(|st| insert_state(&mut tape, vocab, cfg, st));
    let input = SequenceInput {
        seq: &seq,
        positions: PositionMode::PerSegment,
        prompts: sn.as_ref().and_then(|s| s.prompts),
        overrides: &[],
    };
    let (h, prompt_len) = late_forward(&mut tape, &pn, cfg, late.split, &input, sn.as_ref())?;
    let eos = seq
        .eos_index(vocab)
        .ok_or_else(|| Error::Contract("segmented request has no [eos]".into()))?;
    let h_eos = tape.slice_rows(h, prompt_len + eos, 1);
    let paired = match (&state, &sn) {
        (Some(st), Some(s)) => Some((*st, s)),
        _ => None,
    };
    let logits = head_logits(&mut tape, &pn, paired, h_eos)?;
    Ok(tape.value(logits).row(0).mapv(|v| v as f64).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    
    use crate::text::{render, BehaviorRecord, Candidate, Event, Task, TemplateSet, UserProfile};

    fn vocab() -> Vocabulary {
        let corpus = [
            "male thirties clicked outdoor hiking boots trekking poles copper kettle",
            "will click camping tent ? searched kitchen 2d 3h 1d ago seen 3 times",
        ];
        Vocabulary::build(corpus.iter().copied(), 200)
    }

    fn cfg(v: &Vocabulary) -> ModelConfig {
        ModelConfig {
            vocab_size: v.len(),
            layers: 3,
            heads: 2,
            dim: 16,
            emb_dim: 16,
            ffn_mult: 2,
            max_len: 96,
            max_segments: 8,
            retrieval_dim: 8,
            share_layers: false,
        }
    }

    fn record(events: &[(&str, &str)]) -> BehaviorRecord {
        record_for(events, "camping tent")
    }

    fn record_for(events: &[(&str, &str)], title: &str) -> BehaviorRecord {
        BehaviorRecord {
            user: UserProfile { attributes: vec!["male".into(), "thirties".into()] },
            events: events
                .iter()
                .map(|(verb, obj)| Event {
                    verb: verb.to_string(),
                    object: obj.to_string(),
                    when: Some("2d ago".into()),
                })
                .collect(),
            candidate: Some(Candidate {
                category: "outdoor".into(),
                title: title.to_string(),
                popularity: None,
                cross: vec!["seen 3 times".into()],
            }),
            label: Some(1),
            target_text: None,
        }
    }

    fn segments_for(v: &Vocabulary, rec: &BehaviorRecord) -> Vec<Segment> {
        let tmpl = TemplateSet::default();
        let rendered = render(rec, Task::Score, &tmpl).unwrap();
        crate::text::segment_split(v, &rendered, 96).unwrap()
    }

    #[test]
    fn standalone_segment_equals_block_diagonal_batch_slice() {
        let v = vocab();
        let params = Parameters::<f32>::init(&cfg(&v), 3).unwrap();
        let rec = record(&[("clicked", "hiking boots"), ("clicked", "trekking poles")]);
        let segs = segments_for(&v, &rec);
        assert!(segs.len() >= 4, "profile + 2 events + candidate");
        let split = 2;

        // block-diagonal pass over the joined sequence
        let seq = join_segments(&segs);
        let mut tape: Tape<f32> = Tape::new();
        let pn = insert_params(&mut tape, &params);
        let input = SequenceInput {
            seq: &seq,
            positions: PositionMode::PerSegment,
            prompts: None,
            overrides: &[],
        };
        let asm = crate::model::assemble(&mut tape, &pn, &cfg(&v), &input).unwrap();
        let block = Rc::new(block_mask(&asm.regions, &asm.segments));
        let opts = ForwardOpts { layer_range: (0, split), ..Default::default() };
        let t1 = forward_from(&mut tape, &pn, &cfg(&v), asm.x0, block, &opts).unwrap();
        let joint = tape.value(t1.output()).clone();

        let mut row0 = 0usize;
        for seg in &segs {
            let alone = encode_segment(&params, split, seg).unwrap();
            for r in 0..alone.nrows() {
                for c in 0..alone.ncols() {
                    let d = (alone[(r, c)] - joint[(row0 + r, c)]).abs();
                    assert!(d <= 1e-6, "segment row {} col {}: diff {}", r, c, d);
                }
            }
            row0 += alone.nrows();
        }
    }

    #[test]
    fn one_token_segment_yields_one_row() {
        let v = vocab();
        let params = Parameters::<f32>::init(&cfg(&v), 3).unwrap();
        let seg = Segment {
            key_text: "male".into(),
            kind: SegmentKind::Event,
            ids: vec![v.encode_text("male")[0]],
            regions: vec![Region::Bidir],
        };
        let m = encode_segment(&params, 1, &seg).unwrap();
        assert_eq!(m.dim(), (1, 16));
        let empty = Segment { key_text: "".into(), kind: SegmentKind::Event, ids: vec![], regions: vec![] };
        assert!(encode_segment(&params, 1, &empty).is_err());
    }

    #[test]
    fn two_phase_inference_matches_single_pass_forward() {
        let v = vocab();
        let params = Parameters::<f32>::init(&cfg(&v), 5).unwrap();
        let late = LateConfig::new(1);
        let rec = record(&[("clicked", "hiking boots"), ("searched", "copper kettle")]);
        let segs = segments_for(&v, &rec);

        // untuned path
        let prefixes: Vec<Mat<f32>> =
            segs.iter().map(|s| encode_segment(&params, late.split, s).unwrap()).collect();
        let two_phase = interact(&params, &v, None, &late, &segs, &prefixes, None).unwrap();
        let single = late_score_single_pass(&params, &v, None, &late, &segs).unwrap();
        for (a, b) in two_phase.iter().zip(single.iter()) {
            assert!((a - b).abs() <= 1e-5, "two-phase {} vs single-pass {}", a, b);
        }

        // tuned path (option-adapter exercises adapters + prompts + seg_emb)
        let train: Vec<ScoreExample> = (0..8)
            .map(|i| {
                let rec = record(&[("clicked", "hiking boots")]);
                let segs = segments_for(&v, &rec);
                ScoreExample { seq: join_segments(&segs), label: (i % 2) as usize }
            })
            .collect();
        let tcfg = TuneConfig {
            method: TuneMethod::OptionAdapter,
            steps: 5,
            batch: 4,
            lr: 2e-3,
            ..Default::default()
        };
        let (state, _) = tune_late(&params, &v, &train, &tcfg, &late).unwrap();
        let prompts = state.get("prompts");
        let pp = encode_prompt_prefix(&params, late.split, prompts).unwrap();
        let two_phase =
            interact(&params, &v, Some(&state), &late, &segs, &prefixes, Some(&pp)).unwrap();
        let single = late_score_single_pass(&params, &v, Some(&state), &late, &segs).unwrap();
        for (a, b) in two_phase.iter().zip(single.iter()) {
            assert!((a - b).abs() <= 1e-5, "tuned two-phase {} vs single-pass {}", a, b);
        }
    }

    #[test]
    fn single_segment_with_split_zero_equals_monolithic_forward() {
        let v = vocab();
        let params = Parameters::<f32>::init(&cfg(&v), 7).unwrap();
        let rec = record(&[]);
        let tmpl = TemplateSet::default();
        let rendered = render(&rec, Task::Score, &tmpl).unwrap();
        let flat = crate::text::encode(&v, &rendered, 96).unwrap();
        // collapse to one segment spanning the whole request
        let one = Segment {
            key_text: "whole".into(),
            kind: SegmentKind::Candidate,
            ids: flat.ids.clone(),
            regions: flat.regions.clone(),
        };
        let late = LateConfig::new(0);
        // max 3 interaction layers: use a 3-layer model (cfg has layers=3)
        let pre = encode_segment(&params, 0, &one).unwrap();
        let two_phase = interact(&params, &v, None, &late, &[one], &[pre], None).unwrap();

        // monolithic: absolute positions == per-segment positions for a
        // single segment, and zero slot embeddings change nothing
        let monolithic = crate::adapt::classify(&params, &v, None, &flat).unwrap();
        let mx = two_phase.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = two_phase.iter().map(|l| (l - mx).exp()).sum();
        let p1 = (two_phase[1] - mx).exp() / z;
        assert!((p1 - monolithic[1]).abs() <= 1e-6, "{} vs {}", p1, monolithic[1]);
    }

    #[test]
    fn zeroed_slot_embeddings_make_segment_order_invisible() {
        let v = vocab();
        let params = Parameters::<f32>::init(&cfg(&v), 9).unwrap();
        let late = LateConfig::new(1);
        let rec = record(&[("clicked", "hiking boots"), ("searched", "copper kettle")]);
        let mut segs = segments_for(&v, &rec);
        let prefixes: Vec<Mat<f32>> =
            segs.iter().map(|s| encode_segment(&params, late.split, s).unwrap()).collect();
        let a = interact(&params, &v, None, &late, &segs, &prefixes, None).unwrap();
        // swap the two event segments (indices 1 and 2)
        segs.swap(1, 2);
        let mut pre2 = prefixes.clone();
        pre2.swap(1, 2);
        let b = interact(&params, &v, None, &late, &segs, &pre2, None).unwrap();
        // base seg_emb is zero, so order must not matter
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-6, "zero slot embeddings: {} vs {}", x, y);
        }

        // with distinct slot embeddings the outputs must differ
        let mut params2 = Parameters::<f32>::init(&cfg(&v), 9).unwrap();
        {
            let se = params2.get_mut("seg_emb");
            for (i, x) in se.iter_mut().enumerate() {
                *x = 0.01 * ((i % 13) as f32 - 6.0);
            }
        }
        let p1: Vec<Mat<f32>> =
            segs.iter().map(|s| encode_segment(&params2, late.split, s).unwrap()).collect();
        let c = interact(&params2, &v, None, &late, &segs, &p1, None).unwrap();
        segs.swap(1, 2);
        let mut p2 = p1.clone();
        p2.swap(1, 2);
        let d = interact(&params2, &v, None, &late, &segs, &p2, None).unwrap();
        assert!(
            c.iter().zip(d.iter()).any(|(x, y)| (x - y).abs() > 1e-7),
            "slot embeddings should make order matter"
        );
    }

    #[test]
    fn lru_cache_evicts_and_serves_hits() {
        let v = vocab();
        let params = Parameters::<f32>::init(&cfg(&v), 11).unwrap();
        let rec = record(&[("clicked", "hiking boots")]);
        let segs = segments_for(&v, &rec);
        let mut cache = PrefixCache::new(1);
        let k0 = SegmentKey::for_segment(&segs[0], "fp", 1);
        let k1 = SegmentKey::for_segment(&segs[1], "fp", 1);
        let (_, hit) = cache
            .lookup_or_compute(k0.clone(), || encode_segment(&params, 1, &segs[0]))
            .unwrap();
        assert!(!hit);
        let (_, hit) = cache
            .lookup_or_compute(k0.clone(), || encode_segment(&params, 1, &segs[0]))
            .unwrap();
        assert!(hit, "second lookup of the same key is a hit");
        let (_, hit) = cache
            .lookup_or_compute(k1.clone(), || encode_segment(&params, 1, &segs[1]))
            .unwrap();
        assert!(!hit);
        assert_eq!(cache.len(), 1, "capacity 1 keeps a single entry");
        assert!(cache.contains(&k1) && !cache.contains(&k0), "oldest entry was evicted");
    }

    #[test]
    fn shared_segment_text_shares_cache_keys() {
        let v = vocab();
        let rec_a = record(&[("clicked", "hiking boots"), ("clicked", "trekking poles")]);
        let rec_b = record(&[("clicked", "trekking poles"), ("searched", "copper kettle")]);
        let segs_a = segments_for(&v, &rec_a);
        let segs_b = segments_for(&v, &rec_b);
        // "clicked trekking poles" appears in both records
        let ka: Vec<SegmentKey> =
            segs_a.iter().map(|s| SegmentKey::for_segment(s, "fp", 1)).collect();
        let kb: Vec<SegmentKey> =
            segs_b.iter().map(|s| SegmentKey::for_segment(s, "fp", 1)).collect();
        assert!(
            ka.iter().any(|k| kb.contains(k)),
            "shared event clause must produce an identical key"
        );
    }

    #[test]
    fn cold_and_warm_cache_give_bitwise_identical_predictions() {
        let v = vocab();
        let params = Parameters::<f32>::init(&cfg(&v), 13).unwrap();
        let late = LateConfig::new(1);
        let rec = record(&[("clicked", "hiking boots"), ("searched", "copper kettle")]);
        let segs = segments_for(&v, &rec);
        let mut cache = PrefixCache::new(64);
        let cold = serve(&params, &v, None, &late, &mut cache, "fp", &segs).unwrap();
        let warm = serve(&params, &v, None, &late, &mut cache, "fp", &segs).unwrap();
        assert_eq!(cold.logits, warm.logits, "cache must be invisible in outputs");
        assert!(warm.hits > cold.hits, "second request should hit");
        // candidate segment is not cached by default
        assert!(warm.misses >= 1);
    }

    #[test]
    fn disk_cache_survives_reopen_skips_foreign_records_and_corrupt_tails() {
        let v = vocab();
        let params = Parameters::<f32>::init(&cfg(&v), 15).unwrap();
        let rec = record(&[("clicked", "hiking boots")]);
        let segs = segments_for(&v, &rec);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prefix.cache");

        let mut c1 = PrefixCache::with_disk(16, path.clone(), "fp-a", 1).unwrap();
        for seg in &segs {
            let key = SegmentKey::for_segment(seg, "fp-a", 1);
            c1.lookup_or_compute(key, || encode_segment(&params, 1, seg)).unwrap();
        }
        drop(c1);

        // same fingerprint: records load and hit
        let mut c2 = PrefixCache::with_disk(16, path.clone(), "fp-a", 1).unwrap();
        assert_eq!(c2.len(), segs.len());
        let key = SegmentKey::for_segment(&segs[0], "fp-a", 1);
        let (_, hit) = c2.lookup_or_compute(key, || unreachable!("should be cached")).unwrap();
        assert!(hit);
        drop(c2);

        // different fingerprint: records ignored, recompute happens
        let c3 = PrefixCache::with_disk(16, path.clone(), "fp-b", 1).unwrap();
        assert_eq!(c3.len(), 0, "foreign-fingerprint records must be ignored");
        drop(c3);

        // corrupt tail: earlier records still load
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        let c4 = PrefixCache::with_disk(16, path.clone(), "fp-a", 1).unwrap();
        assert_eq!(c4.len(), segs.len() - 1, "all but the truncated record load");
    }

    #[test]
    fn segment_count_and_depth_limits_are_enforced() {
        let v = vocab();
        let params = Parameters::<f32>::init(&cfg(&v), 17).unwrap();
        // > 3 interaction layers refused
        let bad = LateConfig::new(0); // 3-layer model, 0 split -> 3 layers: ok
        assert!(bad.validate(&cfg(&v)).is_ok());
        let mut cfg4 = cfg(&v);
        cfg4.layers = 4;
        assert!(LateConfig::new(0).validate(&cfg4).is_err(), "4 interaction layers is too deep");
        assert!(LateConfig::new(4).validate(&cfg4).is_err(), "no interaction layers left");

        // too many segments refused
        let late = LateConfig::new(1);
        let seg = Segment {
            key_text: "male".into(),
            kind: SegmentKind::Event,
            ids: vec![v.encode_text("male")[0]],
            regions: vec![Region::Bidir],
        };
        let pre = encode_segment(&params, 1, &seg).unwrap();
        let many: Vec<Segment> = (0..9).map(|_| seg.clone()).collect();
        let pres: Vec<Mat<f32>> = (0..9).map(|_| pre.clone()).collect();
        let err = interact(&params, &v, None, &late, &many, &pres, None).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn late_tuning_learns_and_keeps_base_and_specials_frozen() {
        let v = vocab();
        let params = Parameters::<f32>::init(&cfg(&v), 19).unwrap();
        let before: Vec<(String, Vec<f32>)> = params
            .iter()
            .map(|(k, t)| (k.to_string(), t.as_slice().unwrap().to_vec()))
            .collect();
        let late = LateConfig::new(1);
        // label depends on candidate text; tiny but learnable
        let train: Vec<ScoreExample> = (0..24)
            .map(|i| {
                let rec = if i % 2 == 0 {
                    record_for(&[("clicked", "hiking boots")], "copper kettle")
                } else {
                    record_for(&[("clicked", "hiking boots")], "camping tent")
                };
                let segs = segments_for(&v, &rec);
                ScoreExample { seq: join_segments(&segs), label: (i % 2) as usize }
            })
            .collect();
        let tcfg = TuneConfig {
            method: TuneMethod::OptionAdapter,
            steps: 60,
            batch: 6,
            lr: 2e-3,
            ..Default::default()
        };
        let (state, log) = tune_late(&params, &v, &train, &tcfg, &late).unwrap();
        let head: f64 = log.curve[..10].iter().map(|(_, l)| l).sum::<f64>() / 10.0;
        let tail: f64 =
            log.curve[log.curve.len() - 10..].iter().map(|(_, l)| l).sum::<f64>() / 10.0;
        assert!(tail < head, "loss should drop: first-10 mean {} vs last-10 mean {}", head, tail);
        assert!(state.tensors.contains_key("seg_emb"), "slot table must live in the state");
        assert!(
            !state.tensors.keys().any(|k| k.starts_with("special.")),
            "specials stay frozen in late mode"
        );
        assert!(
            !state.tensors.contains_key("adapter0.w1"),
            "no adapters below the split"
        );
        assert!(state.tensors.contains_key("adapter1.w1"), "adapters in interaction layers");
        for (k, old) in &before {
            assert_eq!(
                params.get(k).as_slice().unwrap(),
                old.as_slice(),
                "base tensor {} was modified",
                k
            );
        }
        // fine is rejected in late mode
        let bad = TuneConfig { method: TuneMethod::Fine, steps: 1, ..Default::default() };
        assert!(matches!(tune_late(&params, &v, &train, &bad, &late), Err(Error::Config(_))));
    }
}
