//! Task adaptation on top of a frozen base model.
//!
//! Four methods, one contract: everything a task learns lives in a
//! `TuningState`; the base tensors are never written.
//!
//! * `fine`: the state holds a full trainable copy of the base.
//! * `prompt`: trainable soft prompts + special-token embeddings + a small
//!   task head.
//! * `option`: like prompt, but the last C prompt rows double as the softmax
//!   classifier weights (class logit = <h at [eos], option row>), so there is
//!   no separate head at all.
//! * `option-adapter`: option plus per-layer FFN adapters
//!   FFN(Z) + lambda * (gelu(Z W1 + b1) W2 + b2), rank d/heads by default,
//!   W2/b2 zero-initialized so the adapter starts as an exact no-op.

use std::rc::Rc;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Mat, NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::{
    forward_seq, insert_params, lm_loss, score_logits, AdapterNodes, AdapterStack, ForwardOpts,
    MaskMode, ModelConfig, ParamNodes, Parameters, PositionMode, SequenceInput,
};
use crate::scalar::Scalar;
use crate::text::{EncodedSequence, Special, Vocabulary};
use crate::train::{
    check_finite, collect_grads, sample_batch, Adam, AdamConfig, GradAccum, TensorBag,
};

pub const TRAINED_SPECIALS: [Special; 4] =
    [Special::BosB, Special::EosB, Special::BosA, Special::EosA];

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum TuneMethod {
    Fine,
    Prompt,
    Option,
    OptionAdapter,
}

impl TuneMethod {
    pub fn parse(s: &str) -> Result<TuneMethod> {
        Ok(match s {
            "fine" => TuneMethod::Fine,
            "prompt" => TuneMethod::Prompt,
            "option" => TuneMethod::Option,
            "option-adapter" => TuneMethod::OptionAdapter,
            other => return Err(Error::Config(format!("unknown tuning method {:?}", other))),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TuneMethod::Fine => "fine",
            TuneMethod::Prompt => "prompt",
            TuneMethod::Option => "option",
            TuneMethod::OptionAdapter => "option-adapter",
        }
    }

    pub fn uses_prompts(self) -> bool {
        self != TuneMethod::Fine
    }
}

#[derive(Clone, Debug)]
pub struct AdaptConfig {
    /// Total soft-prompt rows, options included.
    pub prompt_count: usize,
    /// Class count for option methods (the last `option_count` prompt rows).
    pub option_count: usize,
    /// Adapter bottleneck; 0 means the default dim/heads.
    pub adapter_rank: usize,
    pub lambda_init: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig { prompt_count: 16, option_count: 2, adapter_rank: 0, lambda_init: 1.0 }
    }
}

impl AdaptConfig {
    pub fn resolved_rank(&self, cfg: &ModelConfig) -> usize {
        if self.adapter_rank == 0 {
            cfg.head_dim()
        } else {
            self.adapter_rank
        }
    }
}

/// Everything one task learned. `tensors` carries the trainables for the
/// prompt-family methods, or the full parameter copy for fine.
pub struct TuningState<F: Scalar> {
    pub method: TuneMethod,
    pub task: String,
    pub base_fingerprint: String,
    pub prompt_count: usize,
    pub option_count: usize,
    pub adapter_rank: usize,
    pub tensors: IndexMap<String, Rc<Mat<F>>>,
}

impl<F: Scalar> std::fmt::Debug for TuningState<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TuningState")
            .field("method", &self.method)
            .field("task", &self.task)
            .field("tensors", &self.tensors.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl<F: Scalar> TensorBag<F> for TuningState<F> {
    fn tensor_mut(&mut self, key: &str) -> &mut Mat<F> {
        let rc = self
            .tensors
            .get_mut(key)
            .unwrap_or_else(|| panic!("missing tuning tensor {:?}", key));
        Rc::make_mut(rc)
    }
}

impl<F: Scalar> TuningState<F> {
    pub fn trainable_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Trainable share relative to the base model.
    pub fn trainable_fraction(&self, base: &Parameters<F>) -> f64 {
        self.trainable_count() as f64 / base.param_count() as f64
    }

    pub fn get(&self, key: &str) -> &Rc<Mat<F>> {
        self.tensors
            .get(key)
            .unwrap_or_else(|| panic!("missing tuning tensor {:?}", key))
    }

    /// For fine states: reassemble a full parameter set.
    pub fn as_full_params(&self, config: &ModelConfig) -> Result<Parameters<F>> {
        if self.method != TuneMethod::Fine {
            return Err(Error::Contract("as_full_params is only valid for fine states".into()));
        }
        let mut p = Parameters::init(config, 0)?;
        for (k, v) in &self.tensors {
            *p.get_mut(k) = (**v).clone();
        }
        Ok(p)
    }
}

fn special_key(s: Special) -> String {
    format!("special.{}", s.as_str())
}

fn adapter_key(layer: usize, name: &str) -> String {
    format!("adapter{}.{}", layer, name)
}

/// Fresh state for a method: prompts ~ N(0, 0.02), specials copied from the
/// base embedding (warm start), head ~ N(0, 0.02)/zero, adapters zero-output.
pub fn init_state<F: Scalar>(
    base: &Parameters<F>,
    vocab: &Vocabulary,
    method: TuneMethod,
    task: &str,
    acfg: &AdaptConfig,
    seed: u64,
) -> Result<TuningState<F>> {
    let cfg = &base.config;
    if acfg.prompt_count == 0 && method.uses_prompts() && method != TuneMethod::Prompt {
        return Err(Error::Config("option methods need at least one prompt row".into()));
    }
    if matches!(method, TuneMethod::Option | TuneMethod::OptionAdapter)
        && (acfg.option_count < 2 || acfg.option_count > acfg.prompt_count)
    {
        return Err(Error::Config(format!(
            "option_count {} must be in 2..=prompt_count {}",
            acfg.option_count, acfg.prompt_count
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, crate::model::INIT_STD).expect("valid normal");
    let mut sample = |r: usize, c: usize| {
        Mat::from_shape_fn((r, c), |_| F::from_f64(normal.sample(&mut rng)))
    };

    let mut tensors: IndexMap<String, Rc<Mat<F>>> = IndexMap::new();
    let d = cfg.dim;
    match method {
        TuneMethod::Fine => {
            for (k, v) in base.iter() {
                tensors.insert(k.to_string(), Rc::new((**v).clone()));
            }
        }
        TuneMethod::Prompt | TuneMethod::Option | TuneMethod::OptionAdapter => {
            tensors.insert("prompts".into(), Rc::new(sample(acfg.prompt_count, d)));
            for s in TRAINED_SPECIALS {
                let id = vocab.special(s);
                let emb = base.get("tok_emb");
                let mut row = Mat::zeros((1, cfg.emb_dim));
                row.row_mut(0).assign(&emb.row(id));
                // specials live in model width; project if factorized
                let row_d = if cfg.factorized() {
                    row.dot(&**base.get("emb_proj"))
                } else {
                    row
                };
                tensors.insert(special_key(s), Rc::new(row_d));
            }
            if method == TuneMethod::Prompt {
                tensors.insert("head.w".into(), Rc::new(sample(d, 2)));
                tensors.insert("head.b".into(), Rc::new(Mat::zeros((1, 2))));
            }
            if method == TuneMethod::OptionAdapter {
                let r = acfg.resolved_rank(cfg);
                for l in 0..cfg.layers {
                    tensors.insert(adapter_key(l, "w1"), Rc::new(sample(d, r)));
                    tensors.insert(adapter_key(l, "b1"), Rc::new(Mat::zeros((1, r))));
                    // zero so the adapter path starts contributing nothing
                    tensors.insert(adapter_key(l, "w2"), Rc::new(Mat::zeros((r, d))));
                    tensors.insert(adapter_key(l, "b2"), Rc::new(Mat::zeros((1, d))));
                    tensors.insert(
                        adapter_key(l, "lambda"),
                        Rc::new(Mat::from_elem((1, 1), F::from_f64(acfg.lambda_init))),
                    );
                }
            }
        }
    }
    Ok(TuningState {
        method,
        task: task.to_string(),
        base_fingerprint: String::new(),
        prompt_count: if method.uses_prompts() { acfg.prompt_count } else { 0 },
        option_count: if matches!(method, TuneMethod::Option | TuneMethod::OptionAdapter) {
            acfg.option_count
        } else {
            0
        },
        adapter_rank: if method == TuneMethod::OptionAdapter {
            acfg.resolved_rank(cfg)
        } else {
            0
        },
        tensors,
    })
}

/// Node handles for one tuning state inside one tape.
pub struct StateNodes {
    pub nodes: IndexMap<String, NodeId>,
    pub prompts: Option<NodeId>,
    pub overrides: Vec<(usize, NodeId)>,
    pub adapters: Option<AdapterStack>,
    pub head: Option<(NodeId, NodeId)>,
}

pub fn insert_state<F: Scalar>(
    tape: &mut Tape<F>,
    vocab: &Vocabulary,
    cfg: &ModelConfig,
    state: &TuningState<F>,
) -> StateNodes {
    let mut nodes = IndexMap::new();
    for (k, v) in &state.tensors {
        nodes.insert(k.clone(), tape.shared(Rc::clone(v)));
    }
    if state.method == TuneMethod::Fine {
        return StateNodes { nodes, prompts: None, overrides: vec![], adapters: None, head: None };
    }
    let prompts = nodes.get("prompts").copied();
    let overrides: Vec<(usize, NodeId)> = TRAINED_SPECIALS
        .iter()
        .filter_map(|&s| nodes.get(&special_key(s)).map(|&n| (vocab.special(s), n)))
        .collect();
    let adapters = if state.method == TuneMethod::OptionAdapter {
        // in late-interaction states, adapters exist only for the
        // interaction layers; earlier slots stay empty
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            layers.push(nodes.get(&adapter_key(l, "w1")).map(|&w1| AdapterNodes {
                w1,
                b1: nodes[&adapter_key(l, "b1")],
                w2: nodes[&adapter_key(l, "w2")],
                b2: nodes[&adapter_key(l, "b2")],
                lambda: nodes[&adapter_key(l, "lambda")],
            }));
        }
        Some(AdapterStack { layers })
    } else {
        None
    };
    let head = match (nodes.get("head.w"), nodes.get("head.b")) {
        (Some(&w), Some(&b)) => Some((w, b)),
        _ => None,
    };
    StateNodes { nodes, prompts, overrides, adapters, head }
}

/// Class logits (1 x C) for a scoring sequence under base + optional state.
/// With no state, the base scoring head is used.
pub fn class_logits<F: Scalar>(
    tape: &mut Tape<F>,
    pn: &ParamNodes,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    state: Option<(&TuningState<F>, &StateNodes)>,
    seq: &EncodedSequence,
) -> Result<NodeId> {
    let eos = seq
        .eos_index(vocab)
        .ok_or_else(|| Error::Contract("scoring sequence has no [eos]".into()))?;
    let (input, adapters) = match state {
        Some((st, sn)) if st.method != TuneMethod::Fine => (
            SequenceInput {
                seq,
                positions: PositionMode::Absolute,
                prompts: sn.prompts,
                overrides: &sn.overrides,
            },
            sn.adapters.as_ref(),
        ),
        _ => (SequenceInput::plain(seq), None),
    };
    let opts = ForwardOpts { adapters, ..Default::default() };
    let (trace, asm) = forward_seq(tape, pn, cfg, &input, MaskMode::Full, &opts)?;
    let h = trace.output();
    let h_eos = tape.slice_rows(h, asm.prompt_len + eos, 1);

    head_logits(tape, pn, state, h_eos)
}

/// Class logits from the hidden row at [eos]: base/fine states use the
/// scoring head, prompt states their own head, option states the inner
/// product with the option prompt rows.
pub fn head_logits<F: Scalar>(
    tape: &mut Tape<F>,
    pn: &ParamNodes,
    state: Option<(&TuningState<F>, &StateNodes)>,
    h_eos: NodeId,
) -> Result<NodeId> {
    match state {
        Some((st, sn)) => match st.method {
            TuneMethod::Fine => Ok(score_logits(tape, pn, h_eos)),
            TuneMethod::Prompt => {
                let (w, b) = sn.head.expect("prompt state has a head");
                let n = crate::model::final_norm(tape, pn, h_eos);
                let z = tape.matmul(n, w);
                Ok(tape.add_bias(z, b))
            }
            TuneMethod::Option | TuneMethod::OptionAdapter => {
                let prompts = sn.prompts.expect("option state has prompts");
                let start = st.prompt_count - st.option_count;
                let options = tape.slice_rows(prompts, start, st.option_count);
                let n = crate::model::final_norm(tape, pn, h_eos);
                Ok(tape.matmul_nt(n, options))
            }
        },
        None => Ok(score_logits(tape, pn, h_eos)),
    }
}

/// Probabilities over classes for one example (softmax of `class_logits`).
pub fn classify<F: Scalar>(
    base: &Parameters<F>,
    vocab: &Vocabulary,
    state: Option<&TuningState<F>>,
    seq: &EncodedSequence,
) -> Result<Vec<f64>> {
    let cfg = &base.config;
    let mut tape: Tape<F> = Tape::new();
    let (pn, sn_store);
    match state {
        Some(st) if st.method == TuneMethod::Fine => {
            let full = st.as_full_params(cfg)?;
            pn = insert_params(&mut tape, &full);
            sn_store = Some(insert_state(&mut tape, vocab, cfg, st));
        }
        Some(st) => {
            pn = insert_params(&mut tape, base);
            sn_store = Some(insert_state(&mut tape, vocab, cfg, st));
        }
        None => {
            pn = insert_params(&mut tape, base);
            sn_store = None;
        }
    }
    let paired = state.map(|st| (st, sn_store.as_ref().unwrap()));
    let logits = class_logits(&mut tape, &pn, cfg, vocab, paired, seq)?;
    let row = tape.value(logits).row(0).mapv(|v| v.to_f64()).to_vec();
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// p(click): probability of class 1.
pub fn score<F: Scalar>(
    base: &Parameters<F>,
    vocab: &Vocabulary,
    state: Option<&TuningState<F>>,
    seq: &EncodedSequence,
) -> Result<f64> {
    Ok(classify(base, vocab, state, seq)?[1])
}

// ─── tuning ───

#[derive(Clone, Debug)]
pub struct TuneConfig {
    pub method: TuneMethod,
    pub task: String,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub adapt: AdaptConfig,
    /// Evaluate accuracy on the eval set every this many steps (0 = never).
    pub eval_every: usize,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            method: TuneMethod::Option,
            task: "score".into(),
            steps: 100,
            batch: 16,
            lr: 1e-3,
            seed: 0,
            adapt: AdaptConfig::default(),
            eval_every: 0,
        }
    }
}

pub struct ScoreExample {
    pub seq: EncodedSequence,
    pub label: usize,
}

pub struct TuneLog {
    pub curve: Vec<(usize, f64)>,
    /// (step, accuracy) pairs when an eval set was provided.
    pub acc_curve: Vec<(usize, f64)>,
    pub final_loss: f64,
}

fn trainable_filter(method: TuneMethod) -> impl Fn(&str) -> bool {
    move |key: &str| match method {
        TuneMethod::Fine => true,
        TuneMethod::Prompt => {
            key == "prompts" || key.starts_with("special.") || key.starts_with("head.")
        }
        TuneMethod::Option => key == "prompts" || key.starts_with("special."),
        TuneMethod::OptionAdapter => {
            key == "prompts" || key.starts_with("special.") || key.starts_with("adapter")
        }
    }
}

/// Accuracy of argmax-class against labels.
pub fn eval_accuracy<F: Scalar>(
    base: &Parameters<F>,
    vocab: &Vocabulary,
    state: &TuningState<F>,
    data: &[ScoreExample],
) -> Result<f64> {
    let mut hits = 0usize;
    for ex in data {
        let probs = classify(base, vocab, Some(state), &ex.seq)?;
        let pred = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if pred == ex.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// Adapt the base to labeled scoring data. The base is read-only throughout;
/// all updates land in the returned state (a full copy for fine).
pub fn tune(
    base: &Parameters<f32>,
    vocab: &Vocabulary,
    train_data: &[ScoreExample],
    eval_data: Option<&[ScoreExample]>,
    tcfg: &TuneConfig,
) -> Result<(TuningState<f32>, TuneLog)> {
    if train_data.is_empty() {
        return Err(Error::Config("empty tuning data".into()));
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
    if classes > 2 && matches!(tcfg.method, TuneMethod::Fine | TuneMethod::Prompt) {
        return Err(Error::Config("fine/prompt scoring heads are binary".into()));
    }

    let cfg = base.config.clone();
    let mut state = init_state(base, vocab, tcfg.method, &tcfg.task, &tcfg.adapt, tcfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x9e3779b97f4a7c15);
    let mut opt: Adam<f32> = Adam::new(AdamConfig::with_lr(tcfg.lr));
    let trainable = trainable_filter(tcfg.method);
    let mut curve = Vec::with_capacity(tcfg.steps);
    let mut acc_curve = Vec::new();
    let mut last = f64::NAN;

    // fine trains its own copy of the parameters
    let fine_params =
        if tcfg.method == TuneMethod::Fine { Some(state.as_full_params(&cfg)?) } else { None };
    let mut fine_params = fine_params;

    for step in 0..tcfg.steps {
        let idx = sample_batch(&mut rng, train_data.len(), tcfg.batch);
        let mut acc = GradAccum::new();
        let mut loss_sum = 0.0f64;
        for &i in &idx {
            let ex = &train_data[i];
            let mut tape: Tape<f32> = Tape::new();
            let pn = match &fine_params {
                Some(fp) => insert_params(&mut tape, fp),
                None => insert_params(&mut tape, base),
            };
            let sn = insert_state(&mut tape, vocab, &cfg, &state);
            let logits = class_logits(&mut tape, &pn, &cfg, vocab, Some((&state, &sn)), &ex.seq)?;
            let loss = tape.mean_cross_entropy(logits, &[ex.label]);
            loss_sum += tape.scalar_value(loss) as f64;
            tape.backward(loss);
            let grads = if tcfg.method == TuneMethod::Fine {
                collect_grads(&tape, pn.names(), |_| true)
            } else {
                collect_grads(&tape, &sn.nodes, &trainable)
            };
            acc.add(grads);
        }
        let mean_loss = loss_sum / idx.len() as f64;
        check_finite(mean_loss, step, "tune")?;
        let grads = acc.mean();
        match &mut fine_params {
            Some(fp) => opt.step(fp, &grads),
            None => opt.step(&mut state, &grads),
        }
        curve.push((step, mean_loss));
        last = mean_loss;

        if let (Some(ev), true) = (eval_data, tcfg.eval_every > 0) {
            if (step + 1) % tcfg.eval_every == 0 || step + 1 == tcfg.steps {
                if let Some(fp) = &fine_params {
                    sync_fine_state(&mut state, fp);
                }
                let a = eval_accuracy(base, vocab, &state, ev)?;
                acc_curve.push((step + 1, a));
            }
        }
    }
    if let Some(fp) = &fine_params {
        sync_fine_state(&mut state, fp);
    }
    Ok((state, TuneLog { curve, acc_curve, final_loss: last }))
}

fn sync_fine_state(state: &mut TuningState<f32>, fp: &Parameters<f32>) {
    for (k, v) in fp.iter() {
        state.tensors.insert(k.to_string(), Rc::clone(v));
    }
}

/// Adapt to a generation task (LM loss on the AR region). Only fine and
/// prompt make sense here; option methods are classification-only.
pub fn tune_generation(
    base: &Parameters<f32>,
    vocab: &Vocabulary,
    train_data: &[EncodedSequence],
    tcfg: &TuneConfig,
) -> Result<(TuningState<f32>, TuneLog)> {
    if matches!(tcfg.method, TuneMethod::Option | TuneMethod::OptionAdapter) {
        return Err(Error::Config(
            "option methods classify; use fine or prompt for generation tasks".into(),
        ));
    }
    if train_data.is_empty() {
        return Err(Error::Config("empty tuning data".into()));
    }
    let cfg = base.config.clone();
    let mut state = init_state(base, vocab, tcfg.method, &tcfg.task, &tcfg.adapt, tcfg.seed)?;
    let mut fine_params =
        if tcfg.method == TuneMethod::Fine { Some(state.as_full_params(&cfg)?) } else { None };
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x9e3779b97f4a7c15);
    let mut opt: Adam<f32> = Adam::new(AdamConfig::with_lr(tcfg.lr));
    let trainable = trainable_filter(tcfg.method);
    let mut curve = Vec::with_capacity(tcfg.steps);
    let mut last = f64::NAN;

    for step in 0..tcfg.steps {
        let idx = sample_batch(&mut rng, train_data.len(), tcfg.batch);
        let mut acc = GradAccum::new();
        let mut loss_sum = 0.0f64;
        for &i in &idx {
            let seq = &train_data[i];
            let mut tape: Tape<f32> = Tape::new();
            let pn = match &fine_params {
                Some(fp) => insert_params(&mut tape, fp),
                None => insert_params(&mut tape, base),
            };
            let sn = insert_state(&mut tape, vocab, &cfg, &state);
            let input = SequenceInput {
                seq,
                positions: PositionMode::Absolute,
                prompts: sn.prompts,
                overrides: &sn.overrides,
            };
            let (trace, asm) =
                forward_seq(&mut tape, &pn, &cfg, &input, MaskMode::Full, &ForwardOpts::default())?;
            let (loss, _) = lm_loss(&mut tape, &pn, &cfg, &trace, &asm, seq)?;
            loss_sum += tape.scalar_value(loss) as f64;
            tape.backward(loss);
            let grads = if tcfg.method == TuneMethod::Fine {
                collect_grads(&tape, pn.names(), |_| true)
            } else {
                collect_grads(&tape, &sn.nodes, &trainable)
            };
            acc.add(grads);
        }
        let mean_loss = loss_sum / idx.len() as f64;
        check_finite(mean_loss, step, "tune-generation")?;
        let grads = acc.mean();
        match &mut fine_params {
            Some(fp) => opt.step(fp, &grads),
            None => opt.step(&mut state, &grads),
        }
        curve.push((step, mean_loss));
        last = mean_loss;
    }
    if let Some(fp) = &fine_params {
        sync_fine_state(&mut state, fp);
    }
    Ok((state, TuneLog { curve, acc_curve: vec![], final_loss: last }))
}

/// One shared base, one state per task. Items with an unknown task come back
/// as per-item errors; the rest of the batch proceeds.
pub fn mixed_task_inference(
    base: &Parameters<f32>,
    vocab: &Vocabulary,
    states: &IndexMap<String, TuningState<f32>>,
    batch: &[(String, EncodedSequence)],
) -> Vec<Result<f64>> {
    batch
        .iter()
        .map(|(task, seq)| match states.get(task) {
            Some(st) => score(base, vocab, Some(st), seq),
            None => Err(Error::UnknownTask(task.clone())),
        })
        .collect()
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

    fn cfg(v: &Vocabulary) -> ModelConfig {
        ModelConfig {
            vocab_size: v.len(),
            layers: 2,
            heads: 2,
            dim: 16,
            emb_dim: 16,
            ffn_mult: 2,
            max_len: 64,
            max_segments: 8,
            retrieval_dim: 8,
            share_layers: false,
        }
    }

    /// Toy scoring set: label 1 iff the bidir text and candidate color match.
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

    #[test]
    fn zeroed_scoring_head_gives_half() {
        let v = vocab();
        let mut base = Parameters::<f32>::init(&cfg(&v), 1).unwrap();
        base.get_mut("score.w").fill(0.0);
        base.get_mut("score.b").fill(0.0);
        let seq = encode_free(&v, "red green", "will click red ?", 64).unwrap();
        let p = score(&base, &v, None, &seq).unwrap();
        assert!((p - 0.5).abs() < 1e-7);
    }

    #[test]
    fn state_shapes_and_trainable_counts_match_the_method() {
        let v = vocab();
        let base = Parameters::<f32>::init(&cfg(&v), 1).unwrap();
        let acfg = AdaptConfig::default();
        let d = base.config.dim;
        let p = init_state(&base, &v, TuneMethod::Prompt, "t", &acfg, 0).unwrap();
        assert_eq!(p.get("prompts").dim(), (16, d));
        assert_eq!(p.trainable_count(), 16 * d + 4 * d + d * 2 + 2);
        let o = init_state(&base, &v, TuneMethod::Option, "t", &acfg, 0).unwrap();
        assert_eq!(o.trainable_count(), 16 * d + 4 * d, "option has no separate head");
        let oa = init_state(&base, &v, TuneMethod::OptionAdapter, "t", &acfg, 0).unwrap();
        let r = base.config.head_dim();
        let per_adapter = d * r + r + r * d + d + 1;
        assert_eq!(oa.trainable_count(), 16 * d + 4 * d + base.config.layers * per_adapter);
        assert_eq!(oa.adapter_rank, r, "default rank is dim/heads");
    }

    #[test]
    fn option_adapter_starts_as_an_exact_noop() {
        let v = vocab();
        let base = Parameters::<f32>::init(&cfg(&v), 3).unwrap();
        let acfg = AdaptConfig::default();
        let seq = encode_free(&v, "red green", "will click red ?", 64).unwrap();
        // same seed -> identical prompts/specials; adapters are zero-output
        let opt = init_state(&base, &v, TuneMethod::Option, "t", &acfg, 5).unwrap();
        let oa = init_state(&base, &v, TuneMethod::OptionAdapter, "t", &acfg, 5).unwrap();
        let a = classify(&base, &v, Some(&opt), &seq).unwrap();
        let b = classify(&base, &v, Some(&oa), &seq).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-7, "zero-initialized adapter must not change outputs");
        }
    }

    #[test]
    fn tuning_improves_toy_accuracy_for_every_method() {
        let v = vocab();
        let base = Parameters::<f32>::init(&cfg(&v), 7).unwrap();
        let train = toy_data(&v, 64, 1);
        let eval = toy_data(&v, 64, 2);
        for method in [TuneMethod::Fine, TuneMethod::Prompt, TuneMethod::Option, TuneMethod::OptionAdapter]
        {
            let tcfg = TuneConfig {
                method,
                steps: 60,
                batch: 8,
                lr: 2e-3,
                seed: 11,
                eval_every: 0,
                ..Default::default()
            };
            let (state, log) = tune(&base, &v, &train, None, &tcfg).unwrap();
            let acc = eval_accuracy(&base, &v, &state, &eval).unwrap();
            // the toy rule is learnable; even short runs should beat chance
            let base_rate = eval.iter().filter(|e| e.label == 0).count() as f64 / eval.len() as f64;
            assert!(
                acc > base_rate.max(0.5) - 0.05,
                "method {:?}: accuracy {} vs base rate {}",
                method,
                acc,
                base_rate
            );
            assert!(log.final_loss.is_finite());
        }
    }

    #[test]
    fn non_fine_methods_leave_every_base_tensor_bitwise_unchanged() {
        let v = vocab();
        let base = Parameters::<f32>::init(&cfg(&v), 9).unwrap();
        let before: Vec<(String, Vec<f32>)> = base
            .iter()
            .map(|(k, t)| (k.to_string(), t.as_slice().unwrap().to_vec()))
            .collect();
        let train = toy_data(&v, 32, 3);
        for method in [TuneMethod::Prompt, TuneMethod::Option, TuneMethod::OptionAdapter] {
            let tcfg = TuneConfig { method, steps: 10, batch: 4, lr: 2e-3, ..Default::default() };
            let _ = tune(&base, &v, &train, None, &tcfg).unwrap();
        }
        for (k, old) in &before {
            assert_eq!(
                base.get(k).as_slice().unwrap(),
                old.as_slice(),
                "base tensor {} was modified by a frozen-base method",
                k
            );
        }
    }

    #[test]
    fn fine_trains_a_copy_and_never_the_original() {
        let v = vocab();
        let base = Parameters::<f32>::init(&cfg(&v), 13).unwrap();
        let snapshot: Vec<f32> = base.get("layer0.attn.wq").as_slice().unwrap().to_vec();
        let train = toy_data(&v, 32, 4);
        let tcfg =
            TuneConfig { method: TuneMethod::Fine, steps: 8, batch: 4, lr: 1e-3, ..Default::default() };
        let (state, _) = tune(&base, &v, &train, None, &tcfg).unwrap();
        assert_eq!(base.get("layer0.attn.wq").as_slice().unwrap(), snapshot.as_slice());
        // and the state's copy did move
        let tuned = state.get("layer0.attn.wq");
        assert_ne!(tuned.as_slice().unwrap(), snapshot.as_slice());
    }

    #[test]
    fn option_count_must_match_classes() {
        let v = vocab();
        let base = Parameters::<f32>::init(&cfg(&v), 1).unwrap();
        let train = toy_data(&v, 8, 5);
        let tcfg = TuneConfig {
            method: TuneMethod::Option,
            adapt: AdaptConfig { option_count: 3, ..Default::default() },
            steps: 1,
            ..Default::default()
        };
        assert!(matches!(tune(&base, &v, &train, None, &tcfg), Err(Error::Config(_))));
    }

    #[test]
    fn generation_tuning_rejects_option_methods() {
        let v = vocab();
        let base = Parameters::<f32>::init(&cfg(&v), 1).unwrap();
        let seqs = vec![encode_free(&v, "red", "green blue", 64).unwrap()];
        let tcfg = TuneConfig { method: TuneMethod::Option, steps: 1, ..Default::default() };
        assert!(matches!(
            tune_generation(&base, &v, &seqs, &tcfg),
            Err(Error::Config(_))
        ));
        let tcfg2 = TuneConfig { method: TuneMethod::Prompt, steps: 2, batch: 2, ..Default::default() };
        let (state, log) = tune_generation(&base, &v, &seqs, &tcfg2).unwrap();
        assert_eq!(state.method, TuneMethod::Prompt);
        assert!(log.final_loss.is_finite());
    }

    #[test]
    fn mixed_task_inference_routes_by_task_and_flags_unknowns() {
        let v = vocab();
        let base = Parameters::<f32>::init(&cfg(&v), 15).unwrap();
        let train = toy_data(&v, 16, 6);
        let mk = |method, task: &str| {
            let tcfg = TuneConfig {
                method,
                task: task.into(),
                steps: 4,
                batch: 4,
                ..Default::default()
            };
            tune(&base, &v, &train, None, &tcfg).unwrap().0
        };
        let mut states = IndexMap::new();
        states.insert("ctr".to_string(), mk(TuneMethod::Option, "ctr"));
        states.insert("rank".to_string(), mk(TuneMethod::Prompt, "rank"));
        let seq = encode_free(&v, "likes red", "will click red ?", 64).unwrap();
        let batch = vec![
            ("ctr".to_string(), seq.clone()),
            ("rank".to_string(), seq.clone()),
            ("nope".to_string(), seq.clone()),
        ];
        let out = mixed_task_inference(&base, &v, &states, &batch);
        assert!(out[0].is_ok() && out[1].is_ok());
        assert!(matches!(out[2], Err(Error::UnknownTask(_))));
        // scores must match the single-task path exactly
        let solo = score(&base, &v, states.get("ctr"), &seq).unwrap();
        assert_eq!(*out[0].as_ref().unwrap(), solo);
    }

    #[test]
    fn lambda_zero_disables_the_adapter_path() {
        let v = vocab();
        let base = Parameters::<f32>::init(&cfg(&v), 17).unwrap();
        let acfg = AdaptConfig::default();
        let mut oa = init_state(&base, &v, TuneMethod::OptionAdapter, "t", &acfg, 21).unwrap();
        // give adapters nonzero, channel-varying output (a constant fill would
        // be absorbed by layer norm), then gate them off with lambda = 0
        for l in 0..base.config.layers {
            let k = adapter_key(l, "w2");
            let rc = oa.tensors.get_mut(&k).unwrap();
            let m = Rc::make_mut(rc);
            for (i, x) in m.iter_mut().enumerate() {
                *x = 0.05 * (i % 7) as f32;
            }
        }
        let seq = encode_free(&v, "red green", "will click red ?", 64).unwrap();
        let with = classify(&base, &v, Some(&oa), &seq).unwrap();
        for l in 0..base.config.layers {
            let k = adapter_key(l, "lambda");
            let rc = oa.tensors.get_mut(&k).unwrap();
            Rc::make_mut(rc).fill(0.0);
        }
        let gated = classify(&base, &v, Some(&oa), &seq).unwrap();
        let opt = init_state(&base, &v, TuneMethod::Option, "t", &acfg, 21).unwrap();
        let plain = classify(&base, &v, Some(&opt), &seq).unwrap();
        assert!((gated[0] - plain[0]).abs() < 1e-7, "lambda 0 must reduce to the plain path");
        assert!((with[0] - plain[0]).abs() > 1e-7, "nonzero adapters should move outputs");
    }
}
