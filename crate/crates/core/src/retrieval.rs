//! Dual-encoder retrieval. The shared transformer reads a user's history (or
//! an item description alone), and two separate learned projections map the
//! closer-token outputs onto a common unit sphere: the user side reads the
//! bidirectional closer, the item side reads the final autoregressive closer.
//! Training pulls matched pairs together against in-batch negatives; serving
//! is exact inner-product kNN over an immutable index.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::{
    final_norm, forward_seq, insert_params, ForwardOpts, MaskMode, ModelConfig, Parameters,
    SequenceInput,
};
use crate::objectives::TrainLog;
use crate::scalar::Scalar;
use crate::text::{
    encode, render, BehaviorRecord, Candidate, EncodedSequence, Task, TemplateSet, UserProfile,
    Vocabulary,
};
use crate::train::{check_finite, collect_grads, Adam, AdamConfig};

/// Index files always hold this many components per vector, regardless of the
/// model's internal width; narrower indexes refuse to serialize.
pub const INDEX_FILE_DIM: usize = 128;

// ─── configuration ───

#[derive(Clone, Debug)]
pub struct RetrievalConfig {
    /// Softmax temperature for the contrastive objective.
    pub temperature: f64,
    pub steps: usize,
    /// Pairs per step; every other item in the batch is a negative.
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Freeze the backbone and train only the two projections.
    pub projections_only: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            temperature: 0.07,
            steps: 200,
            batch: 8,
            lr: 1e-3,
            seed: 0,
            projections_only: false,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.batch < 2 {
            return Err(Error::Config("in-batch negatives need a batch of at least 2".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        Ok(())
    }
}

/// One training example: a user history and the item they went on to engage.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetrievalPair {
    pub user: BehaviorRecord,
    pub item: Candidate,
}

/// One evaluation example: the positive item is named by its index id.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalPair {
    pub user: BehaviorRecord,
    pub positive_id: String,
}

// ─── encoding ───

fn item_record(item: &Candidate) -> BehaviorRecord {
    BehaviorRecord {
        user: UserProfile::default(),
        events: Vec::new(),
        candidate: Some(item.clone()),
        label: None,
        target_text: None,
    }
}

/// Differentiable user vector: run the full stack, take the normalized stream
/// at the bidirectional closer, project, and unit-normalize. Returns a 1-row
/// node. A zero projection output falls back to the first basis vector.
pub fn user_vector_node<F: Scalar>(
    tape: &mut Tape<F>,
    pn: &crate::model::ParamNodes,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    seq: &EncodedSequence,
) -> Result<NodeId> {
    let row = closer_row(tape, pn, cfg, vocab, seq, Side::User)?;
    let z = tape.matmul(row, pn.node("proj_user"));
    Ok(tape.l2_normalize_rows(z))
}

/// Differentiable item vector: as [`user_vector_node`] but read at the final
/// autoregressive closer and projected through the item matrix.
pub fn item_vector_node<F: Scalar>(
    tape: &mut Tape<F>,
    pn: &crate::model::ParamNodes,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    seq: &EncodedSequence,
) -> Result<NodeId> {
    let row = closer_row(tape, pn, cfg, vocab, seq, Side::Item)?;
    let z = tape.matmul(row, pn.node("proj_item"));
    Ok(tape.l2_normalize_rows(z))
}

#[derive(Copy, Clone)]
enum Side {
    User,
    Item,
}

fn closer_row<F: Scalar>(
    tape: &mut Tape<F>,
    pn: &crate::model::ParamNodes,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    seq: &EncodedSequence,
    side: Side,
) -> Result<NodeId> {
    let input = SequenceInput::plain(seq);
    let (trace, asm) = forward_seq(tape, pn, cfg, &input, MaskMode::Full, &ForwardOpts::default())?;
    let at = match side {
        Side::User => seq
            .eos_b_index(vocab)
            .ok_or_else(|| Error::Contract("sequence has no bidirectional closer".into()))?,
        Side::Item => seq
            .eos_index(vocab)
            .ok_or_else(|| Error::Contract("sequence has no final closer".into()))?,
    };
    let h = trace.output();
    let row = tape.slice_rows(h, asm.prompt_len + at, 1);
    Ok(final_norm(tape, pn, row))
}

/// Serving-side user encoding: render, encode, forward, project, normalize.
pub fn encode_user<F: Scalar>(
    params: &Parameters<F>,
    vocab: &Vocabulary,
    tmpl: &TemplateSet,
    record: &BehaviorRecord,
) -> Result<Vec<f32>> {
    let rendered = render(record, Task::RetrievalUser, tmpl)?;
    let seq = encode(vocab, &rendered, params.config.max_len)?;
    let mut tape = Tape::new();
    let pn = insert_params(&mut tape, params);
    let v = user_vector_node(&mut tape, &pn, &params.config, vocab, &seq)?;
    if tape.l2_fallback_hit(v) {
        log::warn!("user vector had zero norm; substituting the first basis vector");
    }
    Ok(tape.value(v).row(0).iter().map(|&x| x.to_f64() as f32).collect())
}

/// Serving-side item encoding. Items render with an empty bidirectional
/// region, so unseen items (all-UNK titles included) still get a vector.
pub fn encode_item<F: Scalar>(
    params: &Parameters<F>,
    vocab: &Vocabulary,
    tmpl: &TemplateSet,
    item: &Candidate,
) -> Result<Vec<f32>> {
    let rendered = render(&item_record(item), Task::RetrievalItem, tmpl)?;
    let seq = encode(vocab, &rendered, params.config.max_len)?;
    let mut tape = Tape::new();
    let pn = insert_params(&mut tape, params);
    let v = item_vector_node(&mut tape, &pn, &params.config, vocab, &seq)?;
    if tape.l2_fallback_hit(v) {
        log::warn!("item vector had zero norm; substituting the first basis vector");
    }
    Ok(tape.value(v).row(0).iter().map(|&x| x.to_f64() as f32).collect())
}

// ─── contrastive objective ───

/// Mean per-pair in-batch contrastive loss. Row i of `x` pairs with row i of
/// `y`; every other row of `y` serves as a negative. With all similarities
/// equal this is ln(batch); a perfectly separated batch approaches zero.
pub fn contrastive_loss_node<F: Scalar>(
    tape: &mut Tape<F>,
    x: NodeId,
    y: NodeId,
    temperature: f64,
) -> Result<NodeId> {
    if temperature <= 0.0 {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let (n, d) = tape.value(x).dim();
    if tape.value(y).dim() != (n, d) {
        return Err(Error::Contract(format!(
            "contrastive sides disagree: {:?} vs {:?}",
            (n, d),
            tape.value(y).dim()
        )));
    }
    if n < 2 {
        return Err(Error::Contract("a single pair has no in-batch negatives".into()));
    }
    let sims = tape.matmul_nt(x, y);
    let logits = tape.scale(sims, F::from_f64(1.0 / temperature));
    let targets: Vec<usize> = (0..n).collect();
    Ok(tape.mean_cross_entropy(logits, &targets))
}

// ─── training ───

/// Distinct batch indices via a partial shuffle (falls back to the whole set
/// when it is smaller than the batch). Duplicates would pair a row against an
/// identical copy of its own positive, which the loss cannot separate.
fn distinct_batch(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let take = batch.min(n);
    for i in 0..take {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(take);
    idx
}

/// Train the dual encoder alone on positive pairs. Both sides share the
/// backbone; only the projections differ. With `projections_only` the
/// backbone is frozen and exactly two tensors receive updates.
pub fn train_retrieval<F: Scalar>(
    params: &mut Parameters<F>,
    vocab: &Vocabulary,
    tmpl: &TemplateSet,
    pairs: &[RetrievalPair],
    cfg: &RetrievalConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if pairs.len() < 2 {
        return Err(Error::Contract("training needs at least two pairs".into()));
    }
    let max_len = params.config.max_len;
    let encoded: Vec<(EncodedSequence, EncodedSequence)> = pairs
        .iter()
        .map(|p| {
            let ru = render(&p.user, Task::RetrievalUser, tmpl)?;
            let ri = render(&item_record(&p.item), Task::RetrievalItem, tmpl)?;
            Ok((encode(vocab, &ru, max_len)?, encode(vocab, &ri, max_len)?))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xbb67ae8584caa73b);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let projections_only = cfg.projections_only;
    let trainable =
        move |k: &str| !projections_only || k == "proj_user" || k == "proj_item";

    let mut curve = Vec::new();
    let mut last = f64::NAN;
    for step in 0..cfg.steps {
        let idx = distinct_batch(&mut rng, encoded.len(), cfg.batch);
        let mut tape = Tape::new();
        let pn = insert_params(&mut tape, params);
        let mut xs = Vec::with_capacity(idx.len());
        let mut ys = Vec::with_capacity(idx.len());
        for &i in &idx {
            xs.push(user_vector_node(&mut tape, &pn, &params.config, vocab, &encoded[i].0)?);
            ys.push(item_vector_node(&mut tape, &pn, &params.config, vocab, &encoded[i].1)?);
        }
        let x = tape.concat_rows(&xs);
        let y = tape.concat_rows(&ys);
        let loss = contrastive_loss_node(&mut tape, x, y, cfg.temperature)?;
        last = tape.scalar_value(loss).to_f64();
        check_finite(last, step, "retrieval")?;
        tape.backward(loss);
        let grads = collect_grads(&tape, pn.names(), trainable);
        adam.step(params, &grads);
        curve.push((step, last));
    }
    Ok(TrainLog { curve, final_loss: last })
}

// ─── index ───

/// Immutable exact-search index: item ids with unit vectors, held sorted by
/// id so that score ties resolve to ascending id order.
#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    dim: usize,
    entries: Vec<(String, Vec<f32>)>,
}

/// Query result; `capped` marks a K larger than the index.
#[derive(Clone, Debug)]
pub struct KnnResult {
    pub hits: Vec<(String, f64)>,
    pub capped: bool,
}

impl RetrievalIndex {
    /// Validates unit norms (±1e-6) and id uniqueness, then freezes.
    pub fn build(mut entries: Vec<(String, Vec<f32>)>) -> Result<RetrievalIndex> {
        if entries.is_empty() {
            return Err(Error::Contract("an index needs at least one item".into()));
        }
        let dim = entries[0].1.len();
        for (id, v) in &entries {
            if v.len() != dim {
                return Err(Error::Contract(format!(
                    "vector for {} has {} components, index is {}-d",
                    id,
                    v.len(),
                    dim
                )));
            }
            let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!("vector for {} has norm {}", id, norm)));
            }
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::Contract(format!("duplicate item id {}", w[0].0)));
            }
        }
        Ok(RetrievalIndex { dim, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.binary_search_by(|e| e.0.as_str().cmp(id)).is_ok()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.0.as_str())
    }

    /// Exact brute-force top-K by inner product (equals cosine order for unit
    /// vectors). Ties break by item id ascending; K beyond the index size
    /// returns everything with `capped` set.
    pub fn query(&self, x: &[f32], k: usize) -> Result<KnnResult> {
        if x.len() != self.dim {
            return Err(Error::Contract(format!(
                "query has {} components, index is {}-d",
                x.len(),
                self.dim
            )));
        }
        let mut scored: Vec<(usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, (_, v))| {
                let s = x.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>();
                (i, s)
            })
            .collect();
        // entries are id-sorted, so the index tiebreak is the id tiebreak
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0))
        });
        let capped = k > scored.len();
        scored.truncate(k.min(self.entries.len()));
        let hits =
            scored.into_iter().map(|(i, s)| (self.entries[i].0.clone(), s)).collect();
        Ok(KnnResult { hits, capped })
    }

    /// Fixed-width binary file: item count, then per item the id length, the
    /// id bytes, and 128 little-endian f32 components.
    pub fn save(&self, path: &Path) -> Result<()> {
        if self.dim != INDEX_FILE_DIM {
            return Err(Error::Format(format!(
                "index files are fixed at {}-d, this index is {}-d",
                INDEX_FILE_DIM, self.dim
            )));
        }
        let mut buf =
            Vec::with_capacity(8 + self.entries.len() * (4 + 16 + INDEX_FILE_DIM * 4));
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (id, v) in &self.entries {
            buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
            for &x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RetrievalIndex> {
        let buf = fs::read(path)?;
        let mut cur = Cursor { buf: &buf, off: 0 };
        let count = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let id_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
            let id = String::from_utf8(cur.take(id_len)?.to_vec())
                .map_err(|_| Error::Format("item id is not valid utf-8".into()))?;
            let mut v = Vec::with_capacity(INDEX_FILE_DIM);
            for _ in 0..INDEX_FILE_DIM {
                v.push(f32::from_le_bytes(cur.take(4)?.try_into().unwrap()));
            }
            entries.push((id, v));
        }
        if cur.off != buf.len() {
            return Err(Error::Format("trailing bytes after the last index record".into()));
        }
        RetrievalIndex::build(entries)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    off: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.off + n > self.buf.len() {
            return Err(Error::Format("index file truncated".into()));
        }
        let s = &self.buf[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }
}

/// Encode every item and freeze the result into an index.
pub fn build_index<F: Scalar>(
    params: &Parameters<F>,
    vocab: &Vocabulary,
    tmpl: &TemplateSet,
    items: &[(String, Candidate)],
) -> Result<RetrievalIndex> {
    let mut entries = Vec::with_capacity(items.len());
    for (id, item) in items {
        entries.push((id.clone(), encode_item(params, vocab, tmpl, item)?));
    }
    RetrievalIndex::build(entries)
}

// ─── evaluation ───

/// Fraction of queries whose positive id lands in the top K.
pub fn hitrate_from_vectors(
    index: &RetrievalIndex,
    queries: &[(Vec<f32>, String)],
    k: usize,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Contract("hit rate over zero queries is undefined".into()));
    }
    let mut hits = 0usize;
    for (x, positive) in queries {
        if !index.contains(positive) {
            return Err(Error::Contract(format!("positive item {} is not indexed", positive)));
        }
        let res = index.query(x, k)?;
        if res.hits.iter().any(|(id, _)| id == positive) {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}

/// Encode each evaluation user and count top-K hits against the index.
pub fn hitrate_at_k<F: Scalar>(
    params: &Parameters<F>,
    vocab: &Vocabulary,
    tmpl: &TemplateSet,
    index: &RetrievalIndex,
    pairs: &[EvalPair],
    k: usize,
) -> Result<f64> {
    let mut queries = Vec::with_capacity(pairs.len());
    for p in pairs {
        queries.push((encode_user(params, vocab, tmpl, &p.user)?, p.positive_id.clone()));
    }
    hitrate_from_vectors(index, &queries, k)
}

/// Per-id similarity scores for one user against the whole index, in index
/// (= id-ascending) order. Convenience for diagnostics and the CLI.
pub fn score_all<F: Scalar>(
    params: &Parameters<F>,
    vocab: &Vocabulary,
    tmpl: &TemplateSet,
    index: &RetrievalIndex,
    record: &BehaviorRecord,
) -> Result<IndexMap<String, f64>> {
    let x = encode_user(params, vocab, tmpl, record)?;
    let res = index.query(&x, index.len())?;
    let mut out: Vec<(String, f64)> = res.hits;
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out.into_iter().collect())
}

// ─── tests ───
