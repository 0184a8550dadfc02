//! Pretraining objective: text infilling on a sentence corpus.
//!
//! A sentence is corrupted by replacing a few short spans with [mask] (or by
//! reducing the whole sentence to a single [mask]); the corrupted form goes
//! into the bidirectional region and the model regenerates the complete
//! original sentence autoregressively. The LM loss covers only the AR region.

use indexmap::IndexMap;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::Result;
use crate::model::{
    forward_seq, insert_params, lm_loss, ForwardOpts, MaskMode, Parameters, SequenceInput,
};
use crate::text::{encode_ids, Special, Vocabulary};
use crate::train::{
    check_finite, collect_grads, sample_batch, Adam, AdamConfig, GradAccum,
};

#[derive(Clone, Debug)]
pub struct InfillConfig {
    /// Fraction of examples that use whole-sentence generation (source is a
    /// single [mask]).
    pub whole_sentence_frac: f64,
    pub max_spans: usize,
    pub max_span_len: usize,
}

impl Default for InfillConfig {
    fn default() -> Self {
        InfillConfig { whole_sentence_frac: 0.3, max_spans: 2, max_span_len: 3 }
    }
}

/// Corrupt one tokenized sentence into (source ids, target ids).
/// The target is always the complete original sentence.
pub fn make_infilling_example(
    vocab: &Vocabulary,
    sentence: &[usize],
    icfg: &InfillConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mask = vocab.special(Special::Mask);
    let n = sentence.len();
    let whole = n < 4 || rng.random_range(0.0..1.0) < icfg.whole_sentence_frac;
    if whole {
        return (vec![mask], sentence.to_vec());
    }
    let spans = rng.random_range(1..=icfg.max_spans.max(1));
    let mut covered = vec![false; n];
    for _ in 0..spans {
        let len = rng.random_range(1..=icfg.max_span_len.max(1)).min(n);
        let start = rng.random_range(0..=n - len);
        // skip overlapping picks rather than resampling, keeps rng use flat
        if covered[start..start + len].iter().any(|&c| c) {
            continue;
        }
        for c in &mut covered[start..start + len] {
            *c = true;
        }
    }
    if !covered.iter().any(|&c| c) {
        covered[0] = true; // always corrupt something
    }
    let mut source = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        if covered[i] {
            source.push(mask);
            while i < n && covered[i] {
                i += 1;
            }
        } else {
            source.push(sentence[i]);
            i += 1;
        }
    }
    (source, sentence.to_vec())
}

#[derive(Clone, Debug)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub infill: InfillConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 200,
            batch: 16,
            lr: 1e-3,
            seed: 0,
            infill: InfillConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainLog {
    pub curve: Vec<(usize, f64)>,
    pub final_loss: f64,
}

fn truncate_to_budget(tokens: &mut Vec<usize>, max_len: usize) {
    // source + target + 4 delimiters; source is at most target + masks
    let budget = (max_len - 4) / 2;
    if tokens.len() > budget {
        tokens.truncate(budget.max(1));
    }
}

/// Infilling pretraining over a line corpus. Updates every parameter tensor.
pub fn pretrain(
    params: &mut Parameters<f32>,
    vocab: &Vocabulary,
    corpus: &[String],
    pcfg: &PretrainConfig,
) -> Result<TrainLog> {
    let cfg = params.config.clone();
    let mut sentences: Vec<Vec<usize>> = corpus
        .iter()
        .map(|s| vocab.encode_text(s))
        .filter(|t| !t.is_empty())
        .collect();
    for s in &mut sentences {
        truncate_to_budget(s, cfg.max_len);
    }
    if sentences.is_empty() {
        return Err(crate::error::Error::Config("empty pretraining corpus".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(pcfg.seed);
    let mut opt: Adam<f32> = Adam::new(AdamConfig::with_lr(pcfg.lr));
    let mut curve = Vec::with_capacity(pcfg.steps);
    let mut last = f64::NAN;

    for step in 0..pcfg.steps {
        let idx = sample_batch(&mut rng, sentences.len(), pcfg.batch);
        let mut acc = GradAccum::new();
        let mut loss_sum = 0.0f64;
        for &i in &idx {
            let (src, tgt) = make_infilling_example(vocab, &sentences[i], &pcfg.infill, &mut rng);
            let seq = encode_ids(vocab, &src, &tgt);
            let mut tape: Tape<f32> = Tape::new();
            let pn = insert_params(&mut tape, params);
            let input = SequenceInput::plain(&seq);
            let (trace, asm) =
                forward_seq(&mut tape, &pn, &cfg, &input, MaskMode::Full, &ForwardOpts::default())?;
            let (loss, _) = lm_loss(&mut tape, &pn, &cfg, &trace, &asm, &seq)?;
            loss_sum += tape.scalar_value(loss) as f64;
            tape.backward(loss);
            acc.add(collect_grads(&tape, nodes_of(&pn), |_| true));
        }
        let mean_loss = loss_sum / idx.len() as f64;
        check_finite(mean_loss, step, "pretrain")?;
        opt.step(params, &acc.mean());
        curve.push((step, mean_loss));
        last = mean_loss;
    }
    Ok(TrainLog { curve, final_loss: last })
}

/// The parameter-name -> node map of an inserted parameter set.
pub fn nodes_of(pn: &crate::model::ParamNodes) -> &IndexMap<String, crate::autodiff::NodeId> {
    pn.names()
}

/// exp(mean next-token NLL) over whole-sentence completions of held-out lines.
pub fn perplexity(params: &Parameters<f32>, vocab: &Vocabulary, lines: &[String]) -> Result<f64> {
    let cfg = params.config.clone();
    let mask = vocab.special(Special::Mask);
    let mut nll = 0.0f64;
    let mut count = 0usize;
    for line in lines {
        let mut toks = vocab.encode_text(line);
        if toks.is_empty() {
            continue;
        }
        truncate_to_budget(&mut toks, cfg.max_len);
        let seq = encode_ids(vocab, &[mask], &toks);
        let mut tape: Tape<f32> = Tape::new();
        let pn = insert_params(&mut tape, params);
        let input = SequenceInput::plain(&seq);
        let (trace, asm) =
            forward_seq(&mut tape, &pn, &cfg, &input, MaskMode::Full, &ForwardOpts::default())?;
        let (loss, n) = lm_loss(&mut tape, &pn, &cfg, &trace, &asm, &seq)?;
        nll += tape.scalar_value(loss) as f64 * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(crate::error::Error::Config("no held-out tokens to evaluate".into()));
    }
    Ok((nll / count as f64).exp())
}

/// Mean LM loss of a parameter set over fixed (source, target) pairs; used to
/// compare models on identical examples.
pub fn infill_loss(
    params: &Parameters<f32>,
    pairs: &[(Vec<usize>, Vec<usize>)],
    vocab: &Vocabulary,
) -> Result<f64> {
    let cfg = params.config.clone();
    let mut total = 0.0;
    for (src, tgt) in pairs {
        let seq = encode_ids(vocab, src, tgt);
        let mut tape: Tape<f32> = Tape::new();
        let pn = insert_params(&mut tape, params);
        let input = SequenceInput::plain(&seq);
        let (trace, asm) =
            forward_seq(&mut tape, &pn, &cfg, &input, MaskMode::Full, &ForwardOpts::default())?;
        let (loss, _) = lm_loss(&mut tape, &pn, &cfg, &trace, &asm, &seq)?;
        total += tape.scalar_value(loss) as f64;
    }
    Ok(total / pairs.len().max(1) as f64)
}
