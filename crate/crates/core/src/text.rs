//! Text side of the engine: vocabulary, behavior records, templates, and the
//! encoding of records into token sequences with region/segment annotations.
//!
//! A rendered record always has the shape
//!
//!   [bos'] <bidirectional clauses> [eos'] [bos] <autoregressive text> [eos]
//!
//! The bidirectional part carries the user (profile clause, then behavior
//! events oldest to newest); the autoregressive part carries the candidate or
//! whatever text the task wants generated/scored. Everything downstream keys
//! off the per-token `Region` and segment indices produced here.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ─── specials and enums ───

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Special {
    BosB, // opens the bidirectional region
    EosB, // closes it
    BosA, // opens the autoregressive region
    EosA, // closes it
    Mask,
    Pad,
    Unk,
}

pub const SPECIALS: [Special; 7] =
    [Special::BosB, Special::EosB, Special::BosA, Special::EosA, Special::Mask, Special::Pad, Special::Unk];

impl Special {
    pub fn as_str(self) -> &'static str {
        match self {
            Special::BosB => "[bos']",
            Special::EosB => "[eos']",
            Special::BosA => "[bos]",
            Special::EosA => "[eos]",
            Special::Mask => "[mask]",
            Special::Pad => "[pad]",
            Special::Unk => "[unk]",
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Region {
    Bidir,
    Ar,
}

#[derive(Copy, Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum SegmentKind {
    Profile,
    Event,
    Candidate,
}

/// Tasks the renderer knows how to phrase.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Task {
    Score,
    Explain,
    ProductDesign,
    QueryGen,
    Dialog,
    RetrievalUser,
    RetrievalItem,
}

impl Task {
    pub fn parse(s: &str) -> Result<Task> {
        Ok(match s {
            "score" => Task::Score,
            "explain" => Task::Explain,
            "product" => Task::ProductDesign,
            "query" => Task::QueryGen,
            "dialog" => Task::Dialog,
            "retrieval-user" => Task::RetrievalUser,
            "retrieval-item" => Task::RetrievalItem,
            other => return Err(Error::UnknownTask(other.to_string())),
        })
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Task::Score => "score",
            Task::Explain => "explain",
            Task::ProductDesign => "product",
            Task::QueryGen => "query",
            Task::Dialog => "dialog",
            Task::RetrievalUser => "retrieval-user",
            Task::RetrievalItem => "retrieval-item",
        };
        f.write_str(s)
    }
}

// ─── tokenizer ───

/// Lowercase, split into alphanumeric runs and single punctuation marks.
/// Bracketed special strings can never come out of this, so plain text
/// cannot collide with a special token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        let ch = ch.to_ascii_lowercase();
        if ch.is_alphanumeric() {
            cur.push(ch);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

// ─── vocabulary ───

/// Token table. Specials occupy ids 0..7; corpus tokens follow ranked by
/// frequency (ties broken by first appearance).
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn build<'a>(lines: impl Iterator<Item = &'a str>, max_size: usize) -> Vocabulary {
        let mut freq: HashMap<String, (usize, usize)> = HashMap::new(); // count, first seen
        let mut seen = 0usize;
        for line in lines {
            for tok in tokenize(line) {
                let e = freq.entry(tok).or_insert((0, seen));
                e.0 += 1;
                seen += 1;
            }
        }
        let mut ranked: Vec<(String, (usize, usize))> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.as_str().to_string()).collect();
        let budget = max_size.saturating_sub(tokens.len());
        tokens.extend(ranked.into_iter().take(budget).map(|(t, _)| t));
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn special(&self, s: Special) -> usize {
        // specials are always the first seven entries
        self.ids[s.as_str()]
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIALS.len()
    }

    pub fn encode_tokens(&self, toks: &[String]) -> Vec<usize> {
        let unk = self.special(Special::Unk);
        toks.iter().map(|t| self.id(t).unwrap_or(unk)).collect()
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        self.encode_tokens(&tokenize(text))
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let parts: Vec<&str> = ids.iter().map(|&i| self.token(i)).collect();
        parts.join(" ")
    }

    /// One `token<TAB>id` line per entry, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(f, "{}\t{}", t, i)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut entries: Vec<(String, usize)> = Vec::new();
        for line in f.lines() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Format(format!("vocab line without tab: {:?}", line)))?;
            let id: usize =
                id.parse().map_err(|_| Error::Format(format!("bad vocab id: {:?}", line)))?;
            entries.push((tok.to_string(), id));
        }
        entries.sort_by_key(|e| e.1);
        for (i, e) in entries.iter().enumerate() {
            if e.1 != i {
                return Err(Error::Format(format!("vocab ids not dense at {}", e.1)));
            }
        }
        let tokens: Vec<String> = entries.into_iter().map(|e| e.0).collect();
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(|t| t.as_str()) != Some(s.as_str()) {
                return Err(Error::Format(format!("special {} missing at id {}", s.as_str(), i)));
            }
        }
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocabulary { tokens, ids })
    }
}

// ─── records ───

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
pub struct UserProfile {
    /// Attribute strings in render order, e.g. ["male", "thirties", "lakeview"].
    pub attributes: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Event {
    /// "clicked", "searched", ...; for dialog records this is the speaker.
    pub verb: String,
    /// What the verb applied to: "{category} {title words}" or an utterance.
    pub object: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub when: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Candidate {
    pub category: String,
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub popularity: Option<String>,
    /// Extra candidate-side clauses (cross features like "seen 3 times").
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cross: Vec<String>,
}

/// One interaction log line. Serialized as JSONL for the data files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BehaviorRecord {
    #[serde(default)]
    pub user: UserProfile,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<Event>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<Candidate>,
    /// Click label for scoring data (0/1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    /// Reference text for generation tasks (explanation, query, reply...).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_text: Option<String>,
}

pub fn read_jsonl(path: &Path) -> Result<Vec<BehaviorRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: BehaviorRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("record line {}: {}", n + 1, e)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[BehaviorRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f, "{}", line)?;
    }
    Ok(())
}

// ─── templates ───

/// Phrasings used to turn structured records into text. Versioned so data
/// rendered under one set is never silently mixed with another.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TemplateSet {
    pub version: u32,
    /// "{attrs}" joined profile clause.
    pub profile: String,
    /// "{verb} {object} {when}".
    pub event: String,
    /// "{speaker} : {text}" for dialog turns.
    pub dialog_turn: String,
    /// "{category} {title}" candidate naming.
    pub item: String,
    /// AR lead for scoring: "will click {item} ?".
    pub score: String,
    /// AR lead for explanations.
    pub explain_prefix: String,
    /// AR lead for query generation.
    pub query_prefix: String,
    /// AR lead for product design.
    pub product_prefix: String,
    /// AR lead for a dialog reply.
    pub reply_prefix: String,
    /// Co-occurrence sentence for corpus building: "{a}" then "{b}".
    pub cooccur: String,
    /// Catalog sentence: "{category}" and "{title}".
    pub catalog: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            version: 1,
            profile: "{attrs} .".into(),
            event: "{verb} {object} {when} .".into(),
            dialog_turn: "{speaker} : {text} .".into(),
            item: "{category} {title}".into(),
            score: "will click {item} ?".into(),
            explain_prefix: "the user likes it because".into(),
            query_prefix: "now searches".into(),
            product_prefix: "now buys".into(),
            reply_prefix: "system :".into(),
            cooccur: "a user clicks {a} also clicks {b} .".into(),
            catalog: "a product of category {category} named {title} .".into(),
        }
    }
}

impl TemplateSet {
    pub fn from_toml_str(s: &str) -> Result<TemplateSet> {
        let t: TemplateSet =
            toml::from_str(s).map_err(|e| Error::Template(format!("parse: {}", e)))?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("template serialization cannot fail")
    }

    pub fn load(path: &Path) -> Result<TemplateSet> {
        let s = std::fs::read_to_string(path)?;
        TemplateSet::from_toml_str(&s)
    }

    fn validate(&self) -> Result<()> {
        let checks = [
            ("profile", &self.profile, "{attrs}"),
            ("event", &self.event, "{verb}"),
            ("dialog_turn", &self.dialog_turn, "{speaker}"),
            ("item", &self.item, "{category}"),
            ("score", &self.score, "{item}"),
            ("cooccur", &self.cooccur, "{a}"),
            ("catalog", &self.catalog, "{category}"),
        ];
        for (name, value, needle) in checks {
            if !value.contains(needle) {
                return Err(Error::Template(format!(
                    "template {:?} must contain {:?}",
                    name, needle
                )));
            }
        }
        Ok(())
    }

    pub fn render_item(&self, c: &Candidate) -> String {
        self.item.replace("{category}", &c.category).replace("{title}", &c.title)
    }
}

fn squeeze(s: &str) -> String {
    // collapse runs of whitespace left by empty placeholders
    let mut out = String::with_capacity(s.len());
    let mut last_space = true;
    for ch in s.chars() {
        if ch.is_whitespace() {
            if !last_space {
                out.push(' ');
            }
            last_space = true;
        } else {
            out.push(ch);
            last_space = false;
        }
    }
    while out.ends_with(' ') {
        out.pop();
    }
    out
}

// ─── rendering ───

#[derive(Clone, Debug)]
pub struct Clause {
    pub text: String,
    pub kind: SegmentKind,
    /// Whether truncation may drop this clause (events yes, profile no).
    pub droppable: bool,
}

/// A record phrased for one task: bidirectional clauses plus AR text.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub clauses: Vec<Clause>,
    pub ar_text: String,
}

pub fn render(record: &BehaviorRecord, task: Task, tmpl: &TemplateSet) -> Result<Rendered> {
    let mut clauses = Vec::new();
    if task != Task::RetrievalItem {
        if !record.user.attributes.is_empty() {
            let text = squeeze(&tmpl.profile.replace("{attrs}", &record.user.attributes.join(" ")));
            clauses.push(Clause { text, kind: SegmentKind::Profile, droppable: false });
        }
        for ev in &record.events {
            let text = if task == Task::Dialog {
                tmpl.dialog_turn.replace("{speaker}", &ev.verb).replace("{text}", &ev.object)
            } else {
                tmpl.event
                    .replace("{verb}", &ev.verb)
                    .replace("{object}", &ev.object)
                    .replace("{when}", ev.when.as_deref().unwrap_or(""))
            };
            clauses.push(Clause { text: squeeze(&text), kind: SegmentKind::Event, droppable: true });
        }
    }

    let need_candidate = || -> Result<&Candidate> {
        record
            .candidate
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("task {} needs a candidate", task)))
    };

    let ar_text = match task {
        Task::Score => {
            let c = need_candidate()?;
            let mut s = tmpl.score.replace("{item}", &tmpl.render_item(c));
            if let Some(p) = &c.popularity {
                s.push_str(&format!(" {} .", p));
            }
            for x in &c.cross {
                s.push_str(&format!(" {} .", x));
            }
            s
        }
        Task::Explain => {
            let mut s = tmpl.explain_prefix.clone();
            if let Some(t) = &record.target_text {
                s.push_str(&format!(" {}", t));
            }
            s
        }
        Task::QueryGen => {
            let mut s = tmpl.query_prefix.clone();
            if let Some(t) = &record.target_text {
                s.push_str(&format!(" {}", t));
            }
            s
        }
        Task::ProductDesign => {
            let mut s = tmpl.product_prefix.clone();
            if let Some(t) = &record.target_text {
                s.push_str(&format!(" {}", t));
            }
            s
        }
        Task::Dialog => {
            let mut s = tmpl.reply_prefix.clone();
            if let Some(t) = &record.target_text {
                s.push_str(&format!(" {}", t));
            }
            s
        }
        Task::RetrievalUser => String::new(),
        Task::RetrievalItem => {
            let c = need_candidate()?;
            tmpl.render_item(c)
        }
    };

    Ok(Rendered { clauses, ar_text: squeeze(&ar_text) })
}

// ─── encoding ───

#[derive(Clone, Debug)]
pub struct EncodedSequence {
    pub ids: Vec<usize>,
    pub regions: Vec<Region>,
    /// Content segment index per token, starting at 1 (0 is reserved for a
    /// soft-prompt segment added at the model layer).
    pub segments: Vec<usize>,
    pub truncated: bool,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn segment_count(&self) -> usize {
        self.segments.last().copied().unwrap_or(0)
    }

    /// Index of the bidirectional closer [eos'].
    pub fn eos_b_index(&self, vocab: &Vocabulary) -> Option<usize> {
        let id = vocab.special(Special::EosB);
        self.ids.iter().position(|&t| t == id)
    }

    /// Index of the final [eos].
    pub fn eos_index(&self, vocab: &Vocabulary) -> Option<usize> {
        let id = vocab.special(Special::EosA);
        self.ids.iter().rposition(|&t| t == id)
    }

    /// Positions for monolithic encoding: 1-based over the whole sequence.
    pub fn absolute_positions(&self) -> Vec<usize> {
        (1..=self.len()).collect()
    }

    /// Positions restarting at 1 inside each segment (multi-segment mode).
    pub fn segment_positions(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        let mut cur = 0usize;
        let mut p = 0usize;
        for &s in &self.segments {
            if s != cur {
                cur = s;
                p = 0;
            }
            p += 1;
            out.push(p);
        }
        out
    }
}

/// Token budget sanity: [bos'] clauses [eos'] [bos] ar [eos], with
/// truncation dropping oldest droppable clauses first. The AR side is never
/// touched; if it alone cannot fit, that's an error.
pub fn encode(vocab: &Vocabulary, rendered: &Rendered, max_len: usize) -> Result<EncodedSequence> {
    let ar_tokens = vocab.encode_text(&rendered.ar_text);
    let fixed = 4 + ar_tokens.len(); // the four delimiters plus AR content
    if fixed > max_len {
        return Err(Error::Contract(format!(
            "autoregressive region ({} tokens + delimiters) exceeds max_len {}",
            ar_tokens.len(),
            max_len
        )));
    }

    let mut clause_tokens: Vec<(Vec<usize>, SegmentKind, bool)> = rendered
        .clauses
        .iter()
        .map(|c| (vocab.encode_text(&c.text), c.kind, c.droppable))
        .collect();

    let mut truncated = false;
    let total = |cts: &[(Vec<usize>, SegmentKind, bool)]| -> usize {
        fixed + cts.iter().map(|c| c.0.len()).sum::<usize>()
    };
    while total(&clause_tokens) > max_len {
        if let Some(pos) = clause_tokens.iter().position(|c| c.2) {
            clause_tokens.remove(pos);
            truncated = true;
        } else if !clause_tokens.is_empty() {
            // only non-droppable clauses left: trim the oldest from its front
            let over = total(&clause_tokens) - max_len;
            let first = &mut clause_tokens[0];
            let cut = over.min(first.0.len());
            first.0.drain(..cut);
            truncated = true;
            if first.0.is_empty() {
                clause_tokens.remove(0);
            }
        } else {
            break; // fixed part alone fits, nothing left to drop
        }
    }

    let mut ids = Vec::new();
    let mut regions = Vec::new();
    let mut segments = Vec::new();

    // [bos'] opens segment 1 (attached to the first bidir segment)
    ids.push(vocab.special(Special::BosB));
    regions.push(Region::Bidir);
    segments.push(1);

    let mut seg = 1usize;
    let mut first = true;
    for (toks, _kind, _) in &clause_tokens {
        if !first {
            seg += 1;
        }
        first = false;
        for &t in toks {
            ids.push(t);
            regions.push(Region::Bidir);
            segments.push(seg);
        }
    }

    // candidate segment: [eos'] [bos] ar [eos]
    let cand_seg = seg + 1;
    ids.push(vocab.special(Special::EosB));
    regions.push(Region::Bidir);
    segments.push(cand_seg);
    ids.push(vocab.special(Special::BosA));
    regions.push(Region::Ar);
    segments.push(cand_seg);
    for &t in &ar_tokens {
        ids.push(t);
        regions.push(Region::Ar);
        segments.push(cand_seg);
    }
    ids.push(vocab.special(Special::EosA));
    regions.push(Region::Ar);
    segments.push(cand_seg);

    Ok(EncodedSequence { ids, regions, segments, truncated })
}

/// Build a sequence straight from token ids: [bos'] bidir [eos'] [bos] ar
/// [eos], two segments, no truncation (the caller owns the budget).
pub fn encode_ids(vocab: &Vocabulary, bidir_ids: &[usize], ar_ids: &[usize]) -> EncodedSequence {
    let mut ids = Vec::with_capacity(bidir_ids.len() + ar_ids.len() + 4);
    let mut regions = Vec::with_capacity(ids.capacity());
    let mut segments = Vec::with_capacity(ids.capacity());
    ids.push(vocab.special(Special::BosB));
    regions.push(Region::Bidir);
    segments.push(1);
    for &t in bidir_ids {
        ids.push(t);
        regions.push(Region::Bidir);
        segments.push(1);
    }
    ids.push(vocab.special(Special::EosB));
    regions.push(Region::Bidir);
    segments.push(2);
    ids.push(vocab.special(Special::BosA));
    regions.push(Region::Ar);
    segments.push(2);
    for &t in ar_ids {
        ids.push(t);
        regions.push(Region::Ar);
        segments.push(2);
    }
    ids.push(vocab.special(Special::EosA));
    regions.push(Region::Ar);
    segments.push(2);
    EncodedSequence { ids, regions, segments, truncated: false }
}

/// Encode free text (pretraining, zero-shot): one bidir segment, one AR.
pub fn encode_free(
    vocab: &Vocabulary,
    bidir_text: &str,
    ar_text: &str,
    max_len: usize,
) -> Result<EncodedSequence> {
    let rendered = Rendered {
        clauses: vec![Clause {
            text: bidir_text.to_string(),
            kind: SegmentKind::Profile,
            droppable: false,
        }],
        ar_text: ar_text.to_string(),
    };
    encode(vocab, &rendered, max_len)
}

/// Convenience: render + encode in one go.
pub fn encode_record(
    vocab: &Vocabulary,
    record: &BehaviorRecord,
    task: Task,
    tmpl: &TemplateSet,
    max_len: usize,
) -> Result<EncodedSequence> {
    encode(vocab, &render(record, task, tmpl)?, max_len)
}

// ─── segment split ───

/// One cacheable unit of a rendered record.
#[derive(Clone, Debug)]
pub struct Segment {
    /// Exact text this segment was built from; used for content hashing.
    /// Delimiters are part of the identity and are spelled out.
    pub key_text: String,
    pub kind: SegmentKind,
    pub ids: Vec<usize>,
    pub regions: Vec<Region>,
}

/// Split a rendered record into segments whose concatenation reproduces
/// `encode` exactly: the profile segment carries [bos'], each event is its
/// own segment, and the candidate segment carries [eos'] [bos] ... [eos].
pub fn segment_split(
    vocab: &Vocabulary,
    rendered: &Rendered,
    max_len: usize,
) -> Result<Vec<Segment>> {
    let flat = encode(vocab, rendered, max_len)?;
    let nsegs = flat.segment_count();
    let mut out: Vec<Segment> = Vec::with_capacity(nsegs);
    for s in 1..=nsegs {
        let idx: Vec<usize> =
            (0..flat.len()).filter(|&i| flat.segments[i] == s).collect();
        let ids: Vec<usize> = idx.iter().map(|&i| flat.ids[i]).collect();
        let regions: Vec<Region> = idx.iter().map(|&i| flat.regions[i]).collect();
        let kind = if s == nsegs {
            SegmentKind::Candidate
        } else if s == 1 {
            // segment 1 is the profile when one exists, else the first event
            rendered.clauses.first().map(|c| c.kind).unwrap_or(SegmentKind::Candidate)
        } else {
            SegmentKind::Event
        };
        let key_text = ids.iter().map(|&t| vocab.token(t)).collect::<Vec<_>>().join(" ");
        out.push(Segment { key_text, kind, ids, regions });
    }
    Ok(out)
}

/// Rebuild the flat sequence a list of segments came from (inverse of
/// `segment_split` up to the `truncated` flag).
pub fn join_segments(segments: &[Segment]) -> EncodedSequence {
    let mut ids = Vec::new();
    let mut regions = Vec::new();
    let mut seg_ids = Vec::new();
    for (i, s) in segments.iter().enumerate() {
        ids.extend_from_slice(&s.ids);
        regions.extend_from_slice(&s.regions);
        seg_ids.extend(std::iter::repeat(i + 1).take(s.ids.len()));
    }
    EncodedSequence { ids, regions, segments: seg_ids, truncated: false }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_vocab() -> Vocabulary {
        let corpus = [
            "male thirties lakeview",
            "clicked outdoor trekking poles 3h ago",
            "clicked outdoor hiking boots 2d ago",
            "searched kitchen copper kettle 1d ago",
            "will click outdoor camping tent ?",
            "a user clicks hiking boots also clicks trekking poles .",
            "seen 3 times . top5 popularity",
        ];
        Vocabulary::build(corpus.iter().copied(), 200)
    }

    fn sample_record() -> BehaviorRecord {
        BehaviorRecord {
            user: UserProfile { attributes: vec!["male".into(), "thirties".into()] },
            events: vec![
                Event { verb: "clicked".into(), object: "outdoor hiking boots".into(), when: Some("2d ago".into()) },
                Event { verb: "searched".into(), object: "kitchen copper kettle".into(), when: Some("1d ago".into()) },
            ],
            candidate: Some(Candidate {
                category: "outdoor".into(),
                title: "camping tent".into(),
                popularity: Some("top5 popularity".into()),
                cross: vec!["seen 3 times".into()],
            }),
            label: Some(1),
            target_text: None,
        }
    }

    #[test]
    fn tokenizer_lowercases_and_splits_punctuation() {
        let toks = tokenize("Will click Tent-Pro? top5");
        assert_eq!(toks, vec!["will", "click", "tent", "-", "pro", "?", "top5"]);
    }

    #[test]
    fn specials_have_fixed_low_ids_and_cannot_be_tokenized_into() {
        let v = small_vocab();
        assert_eq!(v.special(Special::BosB), 0);
        assert_eq!(v.special(Special::Unk), 6);
        // text containing the literal special string splits into pieces
        let toks = tokenize("[bos'] x");
        assert!(toks.iter().all(|t| v.id(t) != Some(0)));
    }

    #[test]
    fn vocab_round_trips_through_file() {
        let v = small_vocab();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.tsv");
        v.save(&p).unwrap();
        let v2 = Vocabulary::load(&p).unwrap();
        assert_eq!(v.len(), v2.len());
        for i in 0..v.len() {
            assert_eq!(v.token(i), v2.token(i));
        }
    }

    #[test]
    fn vocab_load_rejects_sparse_ids() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.tsv");
        std::fs::write(&p, "[bos']\t0\nfoo\t2\n").unwrap();
        assert!(Vocabulary::load(&p).is_err());
    }

    #[test]
    fn encode_produces_delimited_regions() {
        let v = small_vocab();
        let r = render(&sample_record(), Task::Score, &TemplateSet::default()).unwrap();
        let e = encode(&v, &r, 256).unwrap();
        assert_eq!(e.ids[0], v.special(Special::BosB));
        assert_eq!(*e.ids.last().unwrap(), v.special(Special::EosA));
        let eb = e.eos_b_index(&v).unwrap();
        assert_eq!(e.ids[eb + 1], v.special(Special::BosA));
        // everything before [bos] is bidir, everything from it on is AR
        for i in 0..e.len() {
            if i <= eb {
                assert_eq!(e.regions[i], Region::Bidir);
            } else {
                assert_eq!(e.regions[i], Region::Ar);
            }
        }
        assert!(!e.truncated);
    }

    #[test]
    fn encode_assigns_one_segment_per_clause() {
        let v = small_vocab();
        let r = render(&sample_record(), Task::Score, &TemplateSet::default()).unwrap();
        let e = encode(&v, &r, 256).unwrap();
        // profile, 2 events, candidate
        assert_eq!(e.segment_count(), 4);
        // segment indices are nondecreasing and start at 1
        assert_eq!(e.segments[0], 1);
        for w in e.segments.windows(2) {
            assert!(w[1] == w[0] || w[1] == w[0] + 1);
        }
    }

    #[test]
    fn segment_positions_restart_at_one() {
        let v = small_vocab();
        let r = render(&sample_record(), Task::Score, &TemplateSet::default()).unwrap();
        let e = encode(&v, &r, 256).unwrap();
        let pos = e.segment_positions();
        assert_eq!(pos[0], 1);
        for i in 1..pos.len() {
            if e.segments[i] != e.segments[i - 1] {
                assert_eq!(pos[i], 1, "segment boundary must restart positions");
            } else {
                assert_eq!(pos[i], pos[i - 1] + 1);
            }
        }
        let abs = e.absolute_positions();
        assert_eq!(abs[0], 1);
        assert_eq!(*abs.last().unwrap(), e.len());
    }

    #[test]
    fn truncation_drops_oldest_events_first_and_never_ar() {
        let v = small_vocab();
        let rec = sample_record();
        let r = render(&rec, Task::Score, &TemplateSet::default()).unwrap();
        let full = encode(&v, &r, 256).unwrap();
        let ar_len = full.regions.iter().filter(|&&x| x == Region::Ar).count();

        // budget just above AR + profile: both events must go
        let tight = encode(&v, &r, full.len() - 8).unwrap();
        assert!(tight.truncated);
        let ar_len2 = tight.regions.iter().filter(|&&x| x == Region::Ar).count();
        assert_eq!(ar_len, ar_len2, "AR region must survive truncation");

        // the first surviving bidir token after [bos'] should come from the
        // profile clause (events drop before the profile is touched)
        let male = v.id("male").unwrap();
        assert_eq!(tight.ids[1], male);
    }

    #[test]
    fn encode_errors_when_ar_alone_exceeds_budget() {
        let v = small_vocab();
        let r = render(&sample_record(), Task::Score, &TemplateSet::default()).unwrap();
        let err = encode(&v, &r, 6);
        assert!(err.is_err());
    }

    #[test]
    fn segment_split_concatenation_matches_encode() {
        let v = small_vocab();
        let r = render(&sample_record(), Task::Score, &TemplateSet::default()).unwrap();
        let e = encode(&v, &r, 256).unwrap();
        let segs = segment_split(&v, &r, 256).unwrap();
        let cat: Vec<usize> = segs.iter().flat_map(|s| s.ids.iter().copied()).collect();
        assert_eq!(cat, e.ids);
        let cat_regions: Vec<Region> = segs.iter().flat_map(|s| s.regions.iter().copied()).collect();
        assert_eq!(cat_regions, e.regions);
        assert_eq!(segs[0].kind, SegmentKind::Profile);
        assert_eq!(segs.last().unwrap().kind, SegmentKind::Candidate);
        // candidate segment carries the region boundary
        let cand = segs.last().unwrap();
        assert_eq!(cand.ids[0], v.special(Special::EosB));
        assert_eq!(cand.regions[0], Region::Bidir);
        assert_eq!(cand.regions[1], Region::Ar);
    }

    #[test]
    fn retrieval_sides_render_asymmetrically() {
        let v = small_vocab();
        let t = TemplateSet::default();
        let rec = sample_record();
        // user side: empty AR
        let ru = render(&rec, Task::RetrievalUser, &t).unwrap();
        let eu = encode(&v, &ru, 256).unwrap();
        let eb = eu.eos_b_index(&v).unwrap();
        assert_eq!(eu.len(), eb + 3, "user side AR is just [bos][eos]");
        // item side: empty bidir
        let ri = render(&rec, Task::RetrievalItem, &t).unwrap();
        let ei = encode(&v, &ri, 256).unwrap();
        assert_eq!(ei.eos_b_index(&v).unwrap(), 1, "item side bidir is just [bos'][eos']");
    }

    #[test]
    fn dialog_renders_turns_with_speakers() {
        let v = small_vocab();
        let t = TemplateSet::default();
        let rec = BehaviorRecord {
            user: UserProfile::default(),
            events: vec![
                Event { verb: "user".into(), object: "any tents".into(), when: None },
                Event { verb: "system".into(), object: "we have camping tent".into(), when: None },
            ],
            candidate: None,
            label: None,
            target_text: Some("sure".into()),
        };
        let r = render(&rec, Task::Dialog, &t).unwrap();
        assert!(r.clauses[0].text.starts_with("user :"));
        assert!(r.clauses[1].text.starts_with("system :"));
        assert!(r.ar_text.starts_with("system : sure"));
        let _ = encode(&v, &r, 64).unwrap();
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = small_vocab();
        let ids = v.encode_text("completely unseen zebraword");
        assert!(ids.contains(&v.special(Special::Unk)));
    }

    #[test]
    fn templates_round_trip_and_reject_missing_placeholders() {
        let t = TemplateSet::default();
        let s = t.to_toml_string();
        let t2 = TemplateSet::from_toml_str(&s).unwrap();
        assert_eq!(t2.version, t.version);
        assert_eq!(t2.score, t.score);
        let bad = s.replace("{item}", "item");
        assert!(TemplateSet::from_toml_str(&bad).is_err());
    }

    #[test]
    fn records_round_trip_as_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("recs.jsonl");
        let recs = vec![sample_record(), sample_record()];
        write_jsonl(&p, &recs).unwrap();
        let back = read_jsonl(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].user.attributes, recs[0].user.attributes);
        assert_eq!(back[0].candidate.as_ref().unwrap().title, "camping tent");
        assert_eq!(back[0].label, Some(1));
    }

    #[test]
    fn score_task_requires_candidate() {
        let mut rec = sample_record();
        rec.candidate = None;
        assert!(render(&rec, Task::Score, &TemplateSet::default()).is_err());
    }
}
