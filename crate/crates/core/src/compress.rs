//! Shrinking the model for cheap serving: relation distillation into a
//! smaller student, gradual magnitude pruning, accumulated early-exit
//! training with exit-at-k inference, and symmetric int8 weight quantization.
//! (Layer sharing and factorized embeddings live in the model config itself.)

use std::path::Path;
use std::rc::Rc;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapt::ScoreExample;
use crate::autodiff::{Mat, MaskMat, NodeId, Tape};
use crate::checkpoint::{
    read_container, write_container, Container, Payload, StoredTensor, KIND_QUANT,
};
use crate::error::{Error, Result};
use crate::model::{
    forward_seq, insert_params, lm_loss, seq2seq_mask, score_logits, AssembledInput, ForwardOpts,
    ForwardTrace, MaskMode, ModelConfig, Parameters, SequenceInput,
};
use crate::objectives::{make_infilling_example, InfillConfig, TrainLog};
use crate::text::{encode_ids, tokenize, EncodedSequence, Vocabulary};
use crate::train::{check_finite, collect_grads, sample_batch, Adam, AdamConfig, GradAccum};

// ─── int8 quantization ───

#[derive(Clone, Debug, PartialEq)]
pub struct QuantTensor {
    pub q: Vec<i8>,
    pub scale: f32,
    pub rows: usize,
    pub cols: usize,
}

/// Symmetric per-tensor scheme: scale = max|w|/127, q = round(w/scale)
/// clamped to [-127, 127]. An all-zero tensor takes scale 1 by convention.
pub fn quantize_tensor(m: &Mat<f32>) -> QuantTensor {
    let amax = m.iter().fold(0.0f32, |a, &v| a.max(v.abs()));
    let scale = if amax == 0.0 { 1.0 } else { amax / 127.0 };
    let q = m
        .iter()
        .map(|&v| (v / scale).round().clamp(-127.0, 127.0) as i8)
        .collect();
    QuantTensor { q, scale, rows: m.nrows(), cols: m.ncols() }
}

pub fn dequantize_tensor(t: &QuantTensor) -> Mat<f32> {
    Mat::from_shape_vec(
        (t.rows, t.cols),
        t.q.iter().map(|&x| x as f32 * t.scale).collect(),
    )
    .expect("stored dims match data")
}

pub struct QuantizedModel {
    pub config: ModelConfig,
    pub tensors: IndexMap<String, QuantTensor>,
}

pub fn quantize_model(params: &Parameters<f32>) -> QuantizedModel {
    let tensors = params
        .iter()
        .map(|(k, v)| (k.to_string(), quantize_tensor(v)))
        .collect();
    QuantizedModel { config: params.config.clone(), tensors }
}

/// Weights-only scheme: inference dequantizes back to f32 and runs the
/// ordinary float forward.
pub fn dequantize_model(qm: &QuantizedModel) -> Result<Parameters<f32>> {
    let mut params = Parameters::init(&qm.config, 0)?;
    for (k, t) in &qm.tensors {
        let m = dequantize_tensor(t);
        if m.dim() != params.get(k).dim() {
            return Err(Error::Format(format!(
                "quantized tensor {:?} has shape {:?}, config wants {:?}",
                k,
                m.dim(),
                params.get(k).dim()
            )));
        }
        *params.get_mut(k) = m;
    }
    Ok(params)
}

pub fn save_quantized(qm: &QuantizedModel, path: &Path) -> Result<String> {
    let header = serde_json::json!({ "config": qm.config });
    let tensors = qm
        .tensors
        .iter()
        .map(|(k, t)| {
            (
                k.clone(),
                StoredTensor {
                    rows: t.rows,
                    cols: t.cols,
                    payload: Payload::Int8 { q: t.q.clone(), scale: t.scale },
                },
            )
        })
        .collect();
    write_container(path, &Container { kind: KIND_QUANT, header, tensors })
}

pub fn load_quantized(path: &Path) -> Result<(QuantizedModel, String)> {
    let (c, fp) = read_container(path)?;
    if c.kind != KIND_QUANT {
        return Err(Error::Format(format!(
            "expected a quantized checkpoint, found kind {}",
            c.kind
        )));
    }
    let config: ModelConfig = serde_json::from_value(
        c.header.get("config").cloned().unwrap_or(serde_json::Value::Null),
    )
    .map_err(|e| Error::Format(format!("quantized header: {}", e)))?;
    let mut tensors = IndexMap::new();
    for (name, t) in &c.tensors {
        match &t.payload {
            Payload::Int8 { q, scale } => {
                tensors.insert(
                    name.clone(),
                    QuantTensor { q: q.clone(), scale: *scale, rows: t.rows, cols: t.cols },
                );
            }
            Payload::F32(_) => {
                return Err(Error::Format(format!(
                    "tensor {:?} in a quantized checkpoint is not int8",
                    name
                )))
            }
        }
    }
    Ok((QuantizedModel { config, tensors }, fp))
}

// ─── gradual magnitude pruning ───

#[derive(Clone, Debug)]
pub struct PruneSchedule {
    /// Final sparsity s_f.
    pub target: f64,
    pub start: usize,
    pub end: usize,
}

impl PruneSchedule {
    pub fn new(target: f64, start: usize, end: usize) -> Result<PruneSchedule> {
        if !(0.0..1.0).contains(&target) {
            return Err(Error::Config(format!("target sparsity {} outside [0, 1)", target)));
        }
        if end <= start {
            return Err(Error::Config("pruning must end after it starts".into()));
        }
        Ok(PruneSchedule { target, start, end })
    }

    /// Cubic ramp: s_t = s_f * (1 - (1 - (t - t0)/(T - t0))^3), clamped to
    /// the [start, end] window.
    pub fn sparsity_at(&self, t: usize) -> f64 {
        if t <= self.start {
            return 0.0;
        }
        if t >= self.end {
            return self.target;
        }
        let frac = (t - self.start) as f64 / (self.end - self.start) as f64;
        self.target * (1.0 - (1.0 - frac).powi(3))
    }
}

/// Tensors in pruning scope: every embedding table and linear-layer matrix.
/// Single-row tensors (biases, layer-norm vectors, gates) are exempt.
pub fn prunable_names(params: &Parameters<f32>) -> Vec<String> {
    params
        .iter()
        .filter(|(_, t)| t.nrows() > 1)
        .map(|(k, _)| k.to_string())
        .collect()
}

/// Mask of the `frac` lowest-|w| entries (true = pruned). Ties break by
/// index so the selection is deterministic.
fn prune_mask(m: &Mat<f32>, frac: f64) -> Vec<bool> {
    let n = m.len();
    let k = ((n as f64) * frac).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    let flat: Vec<f32> = m.iter().copied().collect();
    idx.sort_by(|&a, &b| {
        flat[a]
            .abs()
            .partial_cmp(&flat[b].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut mask = vec![false; n];
    for &i in idx.iter().take(k) {
        mask[i] = true;
    }
    mask
}

pub struct Pruner {
    pub schedule: PruneSchedule,
    pub masks: IndexMap<String, Vec<bool>>,
    scope: Vec<String>,
}

impl Pruner {
    pub fn new(params: &Parameters<f32>, schedule: PruneSchedule) -> Pruner {
        Pruner { schedule, masks: IndexMap::new(), scope: prunable_names(params) }
    }

    /// Recompute masks for the sparsity due at step `t` (from current
    /// magnitudes; already-zeroed weights stay selected) and zero them.
    pub fn step(&mut self, t: usize, params: &mut Parameters<f32>) {
        let s = self.schedule.sparsity_at(t);
        if s <= 0.0 {
            return;
        }
        for name in &self.scope {
            let mask = prune_mask(params.get(name), s);
            zero_masked(params.get_mut(name), &mask);
            self.masks.insert(name.clone(), mask);
        }
    }

    /// Re-zero masked entries (idempotent); call after each optimizer step.
    pub fn enforce(&self, params: &mut Parameters<f32>) {
        for (name, mask) in &self.masks {
            zero_masked(params.get_mut(name), mask);
        }
    }

    /// Fraction of entries masked for one tensor; 0 before pruning starts.
    pub fn mask_sparsity(&self, name: &str) -> f64 {
        match self.masks.get(name) {
            Some(m) => m.iter().filter(|&&b| b).count() as f64 / m.len().max(1) as f64,
            None => 0.0,
        }
    }
}

fn zero_masked(m: &mut Mat<f32>, mask: &[bool]) {
    for (v, &dead) in m.iter_mut().zip(mask.iter()) {
        if dead {
            *v = 0.0;
        }
    }
}

/// One row per tensor: name, nonzero count, total, measured zero-sparsity.
pub fn sparsity_report(params: &Parameters<f32>) -> Vec<(String, usize, usize, f64)> {
    params
        .iter()
        .map(|(k, t)| {
            let total = t.len();
            let nnz = t.iter().filter(|&&v| v != 0.0).count();
            (k.to_string(), nnz, total, 1.0 - nnz as f64 / total.max(1) as f64)
        })
        .collect()
}

pub fn write_sparsity_csv(path: &Path, report: &[(String, usize, usize, f64)]) -> Result<()> {
    let mut out = String::from("tensor,nnz,total,sparsity\n");
    for (name, nnz, total, s) in report {
        out.push_str(&format!("{},{},{},{:.6}\n", name, nnz, total, s));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PruneTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub schedule: PruneSchedule,
}

/// Sparsify a scoring model while continuing to train it on labeled data.
/// Loss is the base scoring head's cross-entropy; all parameters train.
pub fn prune_finetune(
    params: &mut Parameters<f32>,
    vocab: &Vocabulary,
    data: &[ScoreExample],
    pcfg: &PruneTrainConfig,
) -> Result<(Pruner, TrainLog)> {
    if data.is_empty() {
        return Err(Error::Config("empty pruning data".into()));
    }
    let cfg = params.config.clone();
    let mut pruner = Pruner::new(params, pcfg.schedule.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(pcfg.seed ^ 0x517cc1b727220a95);
    let mut opt: Adam<f32> = Adam::new(AdamConfig::with_lr(pcfg.lr));
    let mut curve = Vec::with_capacity(pcfg.steps);
    let mut last = f64::NAN;
    for step in 0..pcfg.steps {
        pruner.step(step, params);
        let idx = sample_batch(&mut rng, data.len(), pcfg.batch);
        let mut acc = GradAccum::new();
        let mut loss_sum = 0.0f64;
        for &i in &idx {
            let ex = &data[i];
            let mut tape: Tape<f32> = Tape::new();
            let pn = insert_params(&mut tape, params);
            let logits =
                crate::adapt::class_logits(&mut tape, &pn, &cfg, vocab, None, &ex.seq)?;
            let loss = tape.mean_cross_entropy(logits, &[ex.label]);
            loss_sum += tape.scalar_value(loss) as f64;
            tape.backward(loss);
            acc.add(collect_grads(&tape, pn.names(), |_| true));
        }
        let mean_loss = loss_sum / idx.len() as f64;
        check_finite(mean_loss, step, "prune")?;
        opt.step(params, &acc.mean());
        pruner.enforce(params);
        curve.push((step, mean_loss));
        last = mean_loss;
    }
    // land exactly on the final sparsity even if steps < schedule end
    pruner.step(pcfg.schedule.end, params);
    Ok((pruner, TrainLog { curve, final_loss: last }))
}

// ─── accumulated early-exit loss ───

/// w_k = 2k / (k (k+1)) for k = 1..=layers, as printed (simplifies to
/// 2/(k+1), which decreases with depth).
pub fn exit_weights(layers: usize) -> Vec<f64> {
    (1..=layers).map(|k| 2.0 * k as f64 / (k as f64 * (k as f64 + 1.0))).collect()
}

/// Weighted sum of per-layer scoring losses: layer k's hidden state at
/// [eos] goes through the shared final norm + scoring head.
pub fn accumulated_exit_class_loss(
    tape: &mut Tape<f32>,
    pn: &crate::model::ParamNodes,
    cfg: &ModelConfig,
    trace: &crate::model::ForwardTrace,
    eos_row: usize,
    label: usize,
) -> Result<NodeId> {
    let weights = exit_weights(cfg.layers);
    let mut parts = Vec::with_capacity(cfg.layers);
    for k in 1..=cfg.layers {
        let h = trace.hidden[k]
            .ok_or_else(|| Error::Contract(format!("layer {} missing from trace", k)))?;
        let row = tape.slice_rows(h, eos_row, 1);
        let logits = score_logits(tape, pn, row);
        let ce = tape.mean_cross_entropy(logits, &[label]);
        parts.push((ce, weights[k - 1] as f32));
    }
    Ok(tape.weighted_sum(&parts))
}

/// Early-exit inference: run only layers 0..k and apply the shared head to
/// h^(k). Returns class probabilities.
pub fn classify_at_layer(
    params: &Parameters<f32>,
    vocab: &Vocabulary,
    seq: &EncodedSequence,
    k: usize,
) -> Result<Vec<f64>> {
    let cfg = &params.config;
    if k == 0 || k > cfg.layers {
        return Err(Error::Contract(format!("exit layer {} outside 1..={}", k, cfg.layers)));
    }
    let eos = seq
        .eos_index(vocab)
        .ok_or_else(|| Error::Contract("scoring sequence has no [eos]".into()))?;
    let mut tape: Tape<f32> = Tape::new();
    let pn = insert_params(&mut tape, params);
    let input = SequenceInput::plain(seq);
    let opts = ForwardOpts { layer_range: (0, k), ..Default::default() };
    let (trace, asm) = forward_seq(&mut tape, &pn, cfg, &input, MaskMode::Full, &opts)?;
    let h = trace.output();
    let row = tape.slice_rows(h, asm.prompt_len + eos, 1);
    let logits = score_logits(&mut tape, &pn, row);
    let v = tape.value(logits).row(0).mapv(|x| x as f64).to_vec();
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

#[derive(Clone, Debug)]
pub struct ExitTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Full fine-tuning under the accumulated exit loss, so every layer's output
/// becomes a usable exit point.
pub fn exit_finetune(
    params: &mut Parameters<f32>,
    vocab: &Vocabulary,
    data: &[ScoreExample],
    ecfg: &ExitTrainConfig,
) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::Config("empty exit-training data".into()));
    }
    let cfg = params.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(ecfg.seed ^ 0x2545f4914f6cdd1d);
    let mut opt: Adam<f32> = Adam::new(AdamConfig::with_lr(ecfg.lr));
    let mut curve = Vec::with_capacity(ecfg.steps);
    let mut last = f64::NAN;
    for step in 0..ecfg.steps {
        let idx = sample_batch(&mut rng, data.len(), ecfg.batch);
        let mut acc = GradAccum::new();
        let mut loss_sum = 0.0f64;
        for &i in &idx {
            let ex = &data[i];
            let eos = ex
                .seq
                .eos_index(vocab)
                .ok_or_else(|| Error::Contract("scoring sequence has no [eos]".into()))?;
            let mut tape: Tape<f32> = Tape::new();
            let pn = insert_params(&mut tape, params);
            let input = SequenceInput::plain(&ex.seq);
            let (trace, asm) =
                forward_seq(&mut tape, &pn, &cfg, &input, MaskMode::Full, &ForwardOpts::default())?;
            let loss = accumulated_exit_class_loss(
                &mut tape,
                &pn,
                &cfg,
                &trace,
                asm.prompt_len + eos,
                ex.label,
            )?;
            loss_sum += tape.scalar_value(loss) as f64;
            tape.backward(loss);
            acc.add(collect_grads(&tape, pn.names(), |_| true));
        }
        let mean_loss = loss_sum / idx.len() as f64;
        check_finite(mean_loss, step, "exit-train")?;
        opt.step(params, &acc.mean());
        curve.push((step, mean_loss));
        last = mean_loss;
    }
    Ok(TrainLog { curve, final_loss: last })
}

// ─── relation distillation ───

#[derive(Clone, Debug)]
pub struct DistillConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub infill: InfillConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig { steps: 200, batch: 8, lr: 1e-3, seed: 0, infill: InfillConfig::default() }
    }
}

fn masked_softmax_plain(scores: &Mat<f32>, mask: &MaskMat) -> Mat<f32> {
    let (rows, cols) = scores.dim();
    let mut out = Mat::zeros((rows, cols));
    for r in 0..rows {
        let mut mx = f32::NEG_INFINITY;
        for c in 0..cols {
            if mask[(r, c)] && scores[(r, c)] > mx {
                mx = scores[(r, c)];
            }
        }
        if mx == f32::NEG_INFINITY {
            continue;
        }
        let mut sum = 0.0f32;
        for c in 0..cols {
            if mask[(r, c)] {
                let e = (scores[(r, c)] - mx).exp();
                out[(r, c)] = e;
                sum += e;
            }
        }
        for c in 0..cols {
            out[(r, c)] /= sum;
        }
    }
    out
}

/// Teacher-side relation targets at its last layer: per-head attention
/// distributions and per-head value-value distributions, both under the
/// sequence's own mask.
fn teacher_relations(
    teacher: &Parameters<f32>,
    seq: &EncodedSequence,
) -> Result<(Vec<Rc<Mat<f32>>>, Vec<Rc<Mat<f32>>>)> {
    let cfg = &teacher.config;
    let mut tape: Tape<f32> = Tape::new();
    let pn = insert_params(&mut tape, teacher);
    let input = SequenceInput::plain(seq);
    let opts = ForwardOpts { record_attn: true, ..Default::default() };
    let (trace, _) = forward_seq(&mut tape, &pn, cfg, &input, MaskMode::Full, &opts)?;
    let last = cfg.layers - 1;
    let attn = trace.attn[last]
        .as_ref()
        .ok_or_else(|| Error::Contract("trace did not record attention".into()))?;
    let v_node = trace.values[last]
        .ok_or_else(|| Error::Contract("trace did not record values".into()))?;
    let v = tape.value(v_node).clone();
    let mask = seq2seq_mask(&seq.regions);
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f32).sqrt();
    let mut qk = Vec::with_capacity(cfg.heads);
    let mut vv = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        qk.push(Rc::new(tape.value(attn[h]).clone()));
        let vh = v.slice(ndarray::s![.., h * dh..(h + 1) * dh]).to_owned();
        let scores = vh.dot(&vh.t()) * scale;
        vv.push(Rc::new(masked_softmax_plain(&scores, &mask)));
    }
    Ok((qk, vv))
}

/// Distillation loss for one sequence on the student's tape: KL from teacher
/// to student for both relation types, each averaged over heads, summed.
fn distill_loss_node(
    tape: &mut Tape<f32>,
    student_pn: &crate::model::ParamNodes,
    student_cfg: &ModelConfig,
    seq: &EncodedSequence,
    qk_t: &[Rc<Mat<f32>>],
    vv_t: &[Rc<Mat<f32>>],
) -> Result<(NodeId, ForwardTrace, AssembledInput)> {
    let input = SequenceInput::plain(seq);
    let opts = ForwardOpts { record_attn: true, ..Default::default() };
    let (trace, asm) = forward_seq(tape, student_pn, student_cfg, &input, MaskMode::Full, &opts)?;
    let last = student_cfg.layers - 1;
    let attn = trace.attn[last]
        .as_ref()
        .ok_or_else(|| Error::Contract("student trace did not record attention".into()))?
        .clone();
    let v_node = trace.values[last]
        .ok_or_else(|| Error::Contract("student trace did not record values".into()))?;
    let mask = Rc::new(seq2seq_mask(&seq.regions));
    let dh = student_cfg.head_dim();
    let scale = 1.0 / (dh as f32).sqrt();
    let heads = student_cfg.heads;
    let w = 1.0 / heads as f32;
    let mut parts = Vec::with_capacity(2 * heads);
    for h in 0..heads {
        let kl_qk = tape.kl_div_rows(Rc::clone(&qk_t[h]), attn[h]);
        parts.push((kl_qk, w));
        let vh = tape.slice_cols(v_node, h * dh, dh);
        let scores = tape.matmul_nt(vh, vh);
        let scores = tape.scale(scores, scale);
        let probs = tape.masked_softmax(scores, Rc::clone(&mask));
        let kl_vv = tape.kl_div_rows(Rc::clone(&vv_t[h]), probs);
        parts.push((kl_vv, w));
    }
    Ok(tape.weighted_sum(&parts))
}

/// Distillation loss of a student against a teacher on fixed sequences
/// (no training); used for evaluation and the self-distillation invariant.
pub fn distill_loss(
    teacher: &Parameters<f32>,
    student: &Parameters<f32>,
    seqs: &[EncodedSequence],
) -> Result<f64> {
    if teacher.config.heads != student.config.heads {
        return Err(Error::Config(format!(
            "teacher has {} heads, student {}; relations pair head-by-head",
            teacher.config.heads, student.config.heads
        )));
    }
    let mut total = 0.0f64;
    for seq in seqs {
        let (qk_t, vv_t) = teacher_relations(teacher, seq)?;
        let mut tape: Tape<f32> = Tape::new();
        let pn = insert_params(&mut tape, student);
        let loss = distill_loss_node(&mut tape, &pn, &student.config, seq, &qk_t, &vv_t)?;
        total += tape.scalar_value(loss) as f64;
    }
    Ok(total / seqs.len().max(1) as f64)
}

/// Train a fresh student to mimic the teacher's last-layer relations on an
/// unlabeled corpus (sequences built with the pretraining infill recipe).
pub fn distill(
    teacher: &Parameters<f32>,
    student_cfg: &ModelConfig,
    vocab: &Vocabulary,
    corpus: &[String],
    dcfg: &DistillConfig,
) -> Result<(Parameters<f32>, TrainLog)> {
    student_cfg.validate()?;
    if teacher.config.heads != student_cfg.heads {
        return Err(Error::Config(format!(
            "teacher has {} heads, student {}; relations pair head-by-head",
            teacher.config.heads, student_cfg.heads
        )));
    }
    if corpus.is_empty() {
        return Err(Error::Config("empty distillation corpus".into()));
    }
    let max_len = teacher.config.max_len.min(student_cfg.max_len);
    let budget = (max_len - 4) / 2;
    let mut student = Parameters::init(student_cfg, dcfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(dcfg.seed ^ 0x6a09e667f3bcc909);
    let mut opt: Adam<f32> = Adam::new(AdamConfig::with_lr(dcfg.lr));
    let mut curve = Vec::with_capacity(dcfg.steps);
    let mut last = f64::NAN;
    for step in 0..dcfg.steps {
        let idx = sample_batch(&mut rng, corpus.len(), dcfg.batch);
        let mut acc = GradAccum::new();
        let mut loss_sum = 0.0f64;
        for &i in &idx {
            let mut toks = vocab.encode_tokens(&tokenize(&corpus[i]));
            toks.truncate(budget);
            if toks.is_empty() {
                continue;
            }
            let (src, tgt) = make_infilling_example(vocab, &toks, &dcfg.infill, &mut rng);
            let seq = encode_ids(vocab, &src, &tgt);
            let (qk_t, vv_t) = teacher_relations(teacher, &seq)?;
            let mut tape: Tape<f32> = Tape::new();
            let pn = insert_params(&mut tape, &student);
            let loss = distill_loss_node(&mut tape, &pn, student_cfg, &seq, &qk_t, &vv_t)?;
            loss_sum += tape.scalar_value(loss) as f64;
            tape.backward(loss);
            acc.add(collect_grads(&tape, pn.names(), |_| true));
        }
        if acc.is_empty() {
            continue;
        }
        let mean_loss = loss_sum / idx.len() as f64;
        check_finite(mean_loss, step, "distill")?;
        opt.step(&mut student, &acc.mean());
        curve.push((step, mean_loss));
        last = mean_loss;
    }
    Ok((student, TrainLog { curve, final_loss: last }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::encode_free;

    fn vocab() -> Vocabulary {
        let corpus = [
            "red green blue yellow purple orange pink brown",
            "will click red green ? will click blue yellow ?",
        ];
        Vocabulary::build(corpus.iter().copied(), 64)
    }

    fn cfg(v: &Vocabulary, layers: usize, dim: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: v.len(),
            layers,
            heads: 2,
            dim,
            emb_dim: dim,
            ffn_mult: 2,
            max_len: 64,
            max_segments: 8,
            retrieval_dim: 8,
            share_layers: false,
        }
    }

    fn toy_data(v: &Vocabulary, n: usize, seed: u64) -> Vec<ScoreExample> {
        let colors = ["red", "green", "blue", "yellow"];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for _ in 0..n {
            let liked = colors[rand::Rng::random_range(&mut rng, 0..colors.len())];
            let cand = colors[rand::Rng::random_range(&mut rng, 0..colors.len())];
            let seq =
                encode_free(v, &format!("likes {}", liked), &format!("will click {} ?", cand), 64)
                    .unwrap();
            out.push(ScoreExample { seq, label: (liked == cand) as usize });
        }
        out
    }

    // ── quantization ──

    #[test]
    fn quantization_round_trips_exact_grid_points_and_bounds_error() {
        let scale = 0.03f32;
        let grid = Mat::from_shape_vec(
            (2, 3),
            vec![-127.0 * scale, -3.0 * scale, 0.0, scale, 64.0 * scale, 127.0 * scale],
        )
        .unwrap();
        let q = quantize_tensor(&grid);
        let back = dequantize_tensor(&q);
        for (a, b) in grid.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-6, "grid point {} round-tripped to {}", a, b);
        }

        let m = Mat::from_shape_fn((5, 7), |(r, c)| ((r * 7 + c) as f32).sin());
        let q = quantize_tensor(&m);
        let back = dequantize_tensor(&q);
        for (a, b) in m.iter().zip(back.iter()) {
            assert!((a - b).abs() <= q.scale / 2.0 + 1e-7, "{} vs {}", a, b);
        }

        let z = Mat::<f32>::zeros((3, 3));
        let qz = quantize_tensor(&z);
        assert_eq!(qz.scale, 1.0, "all-zero tensor takes scale 1");
        assert!(qz.q.iter().all(|&x| x == 0));
    }

    #[test]
    fn quantized_model_logits_stay_close_and_files_round_trip() {
        let v = vocab();
        let params = Parameters::<f32>::init(&cfg(&v, 2, 16), 21).unwrap();
        let data = toy_data(&v, 8, 1);
        let qm = quantize_model(&params);
        let deq = dequantize_model(&qm).unwrap();
        let mut drift = 0.0f64;
        let mut count = 0usize;
        for ex in &data {
            let a = crate::adapt::classify(&params, &v, None, &ex.seq).unwrap();
            let b = crate::adapt::classify(&deq, &v, None, &ex.seq).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                drift += (x - y).abs();
                count += 1;
            }
        }
        assert!(drift / count as f64 <= 0.05, "mean prob drift {}", drift / count as f64);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.ckpt");
        save_quantized(&qm, &path).unwrap();
        let (back, _) = load_quantized(&path).unwrap();
        assert_eq!(back.config, qm.config);
        for (k, t) in &qm.tensors {
            assert_eq!(back.tensors.get(k), Some(t), "tensor {}", k);
        }
    }

    // ── pruning ──

    #[test]
    fn prune_mask_zeroes_exactly_the_smallest_magnitudes() {
        let m = Mat::from_shape_fn((10, 10), |(r, c)| {
            let i = (r * 10 + c) as i32 - 50;
            i as f32 * 0.01
        });
        let mask = prune_mask(&m, 0.8);
        assert_eq!(mask.iter().filter(|&&b| b).count(), 80);
        let mut survivors: Vec<f32> = m
            .iter()
            .zip(mask.iter())
            .filter(|(_, &dead)| !dead)
            .map(|(&v, _)| v.abs())
            .collect();
        survivors.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut all: Vec<f32> = m.iter().map(|v| v.abs()).collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(survivors.len(), 20);
        assert!(
            survivors[0] >= all[79],
            "survivors must be the 20 largest magnitudes"
        );
    }

    #[test]
    fn schedule_hits_zero_at_start_and_target_at_end_monotonically() {
        let s = PruneSchedule::new(0.8, 10, 110).unwrap();
        assert_eq!(s.sparsity_at(0), 0.0);
        assert_eq!(s.sparsity_at(10), 0.0);
        assert!((s.sparsity_at(110) - 0.8).abs() < 1e-12);
        assert!((s.sparsity_at(10_000) - 0.8).abs() < 1e-12);
        let mut prev = 0.0;
        for t in 10..=110 {
            let now = s.sparsity_at(t);
            assert!(now >= prev, "sparsity must not decrease (t={})", t);
            prev = now;
        }
        assert!(PruneSchedule::new(1.0, 0, 1).is_err());
        assert!(PruneSchedule::new(0.5, 5, 5).is_err());
    }

    #[test]
    fn masks_are_idempotent_and_survive_checkpoint_reload() {
        let v = vocab();
        let mut params = Parameters::<f32>::init(&cfg(&v, 2, 16), 23).unwrap();
        let schedule = PruneSchedule::new(0.8, 0, 1).unwrap();
        let mut pruner = Pruner::new(&params, schedule);
        pruner.step(1, &mut params);
        let snap: Vec<f32> = params.get("layer0.ffn.w1").as_slice().unwrap().to_vec();
        pruner.enforce(&mut params);
        pruner.enforce(&mut params);
        assert_eq!(
            params.get("layer0.ffn.w1").as_slice().unwrap(),
            snap.as_slice(),
            "enforcing twice must change nothing"
        );

        let report = sparsity_report(&params);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pruned.ckpt");
        crate::checkpoint::save_model(&params, &path).unwrap();
        let (back, _) = crate::checkpoint::load_model(&path).unwrap();
        let report2 = sparsity_report(&back);
        assert_eq!(report, report2, "reload must preserve sparsity exactly");
        // spot-check an actual tensor hit the target
        let w1 = report.iter().find(|(k, ..)| k == "layer0.ffn.w1").unwrap();
        assert!((w1.3 - 0.8).abs() < 0.01, "w1 sparsity {}", w1.3);
    }

    #[test]
    fn prune_finetune_reaches_target_sparsity_per_tensor() {
        let v = vocab();
        let mut params = Parameters::<f32>::init(&cfg(&v, 2, 16), 25).unwrap();
        let data = toy_data(&v, 24, 2);
        let pcfg = PruneTrainConfig {
            steps: 12,
            batch: 4,
            lr: 1e-3,
            seed: 3,
            schedule: PruneSchedule::new(0.75, 2, 10).unwrap(),
        };
        let (pruner, log) = prune_finetune(&mut params, &v, &data, &pcfg).unwrap();
        assert!(log.final_loss.is_finite());
        for name in prunable_names(&params) {
            let n = params.get(&name).len() as f64;
            let k = (n * 0.75).round();
            let zeros = params.get(&name).iter().filter(|&&x| x == 0.0).count() as f64;
            assert!(
                zeros >= k - 1.0,
                "tensor {} has {} zeros, expected about {}",
                name,
                zeros,
                k
            );
            assert!((pruner.mask_sparsity(&name) - 0.75).abs() * n <= 1.0);
        }
    }

    // ── early exit ──

    #[test]
    fn exit_weights_match_the_printed_formula() {
        let w = exit_weights(3);
        assert_eq!(w.len(), 3);
        assert!((w[0] - 1.0).abs() < 1e-15);
        assert!((w[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w[2] - 0.5).abs() < 1e-15);
        // decreasing with depth — the formula as printed
        assert!(w[0] > w[1] && w[1] > w[2]);
    }

    #[test]
    fn exit_at_final_layer_is_identical_to_full_forward() {
        let v = vocab();
        let params = Parameters::<f32>::init(&cfg(&v, 3, 16), 27).unwrap();
        let seq = encode_free(&v, "likes red", "will click red ?", 64).unwrap();
        let full = crate::adapt::classify(&params, &v, None, &seq).unwrap();
        let at_l = classify_at_layer(&params, &v, &seq, 3).unwrap();
        assert_eq!(full, at_l, "exit at L must be the very same computation");
        let at_1 = classify_at_layer(&params, &v, &seq, 1).unwrap();
        assert!(
            full.iter().zip(at_1.iter()).any(|(a, b)| (a - b).abs() > 1e-9),
            "exit at layer 1 generically differs"
        );
        assert!(classify_at_layer(&params, &v, &seq, 0).is_err());
        assert!(classify_at_layer(&params, &v, &seq, 4).is_err());
    }

    #[test]
    fn constant_per_layer_loss_sums_to_c_times_weight_total() {
        // a 1-layer model: accumulated loss must equal the plain class loss
        let v = vocab();
        let params = Parameters::<f32>::init(&cfg(&v, 1, 16), 29).unwrap();
        let seq = encode_free(&v, "likes red", "will click red ?", 64).unwrap();
        let eos = seq.eos_index(&v).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let pn = insert_params(&mut tape, &params);
        let input = SequenceInput::plain(&seq);
        let (trace, asm) =
            forward_seq(&mut tape, &pn, &params.config, &input, MaskMode::Full, &ForwardOpts::default())
                .unwrap();
        let acc =
            accumulated_exit_class_loss(&mut tape, &pn, &params.config, &trace, asm.prompt_len + eos, 1)
                .unwrap();
        let h = trace.output();
        let row = tape.slice_rows(h, asm.prompt_len + eos, 1);
        let logits = score_logits(&mut tape, &pn, row);
        let plain = tape.mean_cross_entropy(logits, &[1]);
        let a = tape.scalar_value(acc);
        let p = tape.scalar_value(plain);
        assert!((a - p).abs() < 1e-6, "L=1: accumulated {} vs plain {}", a, p);
    }

    #[test]
    fn exit_finetune_trains_all_layers_to_score() {
        let v = vocab();
        let mut params = Parameters::<f32>::init(&cfg(&v, 2, 16), 31).unwrap();
        let data = toy_data(&v, 32, 4);
        let ecfg = ExitTrainConfig { steps: 30, batch: 8, lr: 2e-3, seed: 5 };
        let log = exit_finetune(&mut params, &v, &data, &ecfg).unwrap();
        let head: f64 = log.curve[..5].iter().map(|(_, l)| l).sum::<f64>() / 5.0;
        let tail: f64 = log.curve[log.curve.len() - 5..].iter().map(|(_, l)| l).sum::<f64>() / 5.0;
        assert!(tail < head, "accumulated loss should drop: {} -> {}", head, tail);
    }

    // ── distillation ──

    #[test]
    fn self_distillation_loss_is_zero_and_relations_are_row_stochastic() {
        let v = vocab();
        let teacher = Parameters::<f32>::init(&cfg(&v, 2, 16), 33).unwrap();
        let seq = encode_free(&v, "likes red green", "will click red ?", 64).unwrap();
        let loss = distill_loss(&teacher, &teacher, std::slice::from_ref(&seq)).unwrap();
        assert!(loss.abs() < 1e-10, "teacher vs itself: loss {}", loss);

        let (qk, vv) = teacher_relations(&teacher, &seq).unwrap();
        for rel in qk.iter().chain(vv.iter()) {
            for r in 0..rel.nrows() {
                let s: f32 = rel.row(r).sum();
                assert!(
                    (s - 1.0).abs() < 1e-5 || s.abs() < 1e-12,
                    "relation rows are stochastic (or fully masked): sum {}",
                    s
                );
            }
        }
    }

    #[test]
    fn distillation_trains_a_smaller_student_toward_the_teacher() {
        let v = vocab();
        let teacher = Parameters::<f32>::init(&cfg(&v, 2, 24), 35).unwrap();
        let student_cfg = cfg(&v, 2, 12);
        let corpus: Vec<String> = vec![
            "red green blue yellow".into(),
            "purple orange pink brown".into(),
            "red blue purple pink".into(),
            "green yellow orange brown".into(),
        ];
        let dcfg = DistillConfig { steps: 20, batch: 4, lr: 2e-3, seed: 7, ..Default::default() };
        let (student, log) = distill(&teacher, &student_cfg, &v, &corpus, &dcfg).unwrap();
        assert_eq!(student.config, student_cfg);
        let head: f64 = log.curve[..4].iter().map(|(_, l)| l).sum::<f64>() / 4.0;
        let tail: f64 = log.curve[log.curve.len() - 4..].iter().map(|(_, l)| l).sum::<f64>() / 4.0;
        assert!(tail < head, "distillation loss should drop: {} -> {}", head, tail);

        // head-count mismatch is refused
        let mut bad = cfg(&v, 2, 12);
        bad.heads = 4;
        assert!(matches!(
            distill(&teacher, &bad, &v, &corpus, &dcfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn shared_factorized_profile_shrinks_parameter_count_by_the_formula() {
        let v = vocab();
        let base = cfg(&v, 4, 16);
        let mut edge = base.clone();
        edge.share_layers = true;
        edge.emb_dim = 8;
        let n_base = Parameters::<f32>::expected_param_count(&base);
        let n_edge = Parameters::<f32>::expected_param_count(&edge);
        assert!(n_edge < n_base);
        let p_base = Parameters::<f32>::init(&base, 1).unwrap();
        let p_edge = Parameters::<f32>::init(&edge, 1).unwrap();
        assert_eq!(p_base.param_count(), n_base);
        assert_eq!(p_edge.param_count(), n_edge);
        // sharing stores one layer instead of L
        assert_eq!(p_edge.try_get("layer1.ffn.w1"), None);
        assert!(p_edge.try_get("layer0.ffn.w1").is_some());
    }
}
