//! Synthetic behavior world. Every record is generated from a known click
//! model, so downstream metrics have computable oracles: the true click
//! probability rides along with each labeled example, items carry their
//! category and popularity in TEXT (this is what lets text-based scoring
//! beat id-style memorization), and an unseen-item split holds out items
//! whose word combinations never appear anywhere in the training corpus.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{EvalPair, RetrievalPair};
use crate::text::{BehaviorRecord, Candidate, Event, UserProfile};

// ─── world ───

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    /// Title word bank; the first `hot` words carry a quality bonus.
    pub words: Vec<String>,
    pub hot: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Archetype {
    pub name: String,
    /// One preference weight per category.
    pub prefs: Vec<f64>,
}

/// Ground truth: P(click) = sigmoid(click_weight * affinity + click_bias),
/// where affinity reads the user's archetype weights plus text-visible item
/// features (hot title words, popularity bucket, seen-before count).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorldSpec {
    pub categories: Vec<CategorySpec>,
    pub archetypes: Vec<Archetype>,
    pub click_weight: f64,
    pub click_bias: f64,
    pub seed: u64,
}

const POP_BUCKETS: [&str; 3] = ["rarely seen", "sometimes seen", "very popular"];

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl WorldSpec {
    /// The default desk-scale world: 16 categories with disjoint pseudo-word
    /// banks (184 words each), 4 archetypes each favoring 4 categories, and
    /// a click bias calibrated so the base click rate sits at `target_rate`.
    pub fn standard(seed: u64) -> WorldSpec {
        let prefixes = [
            "vor", "zan", "mek", "tol", "bry", "chu", "dif", "gol", "hax", "jel", "kip", "lum",
            "nef", "orp", "qua", "rix",
        ];
        let syllables = [
            "ba", "de", "ki", "lo", "mu", "na", "po", "ra", "su", "ti", "ve", "wo", "za", "fe",
        ];
        let categories: Vec<CategorySpec> = prefixes
            .iter()
            .map(|p| {
                let mut words = Vec::with_capacity(184);
                'outer: for a in syllables {
                    for b in syllables {
                        words.push(format!("{}{}{}", p, a, b));
                        if words.len() == 184 {
                            break 'outer;
                        }
                    }
                }
                CategorySpec { name: format!("{}ware", p), words, hot: 40 }
            })
            .collect();
        let archetypes: Vec<Archetype> = (0..4)
            .map(|k| {
                let mut prefs = vec![0.0; categories.len()];
                for c in 4 * k..4 * (k + 1) {
                    prefs[c] = 1.0;
                }
                Archetype { name: format!("{}fan", prefixes[4 * k]), prefs }
            })
            .collect();
        let mut spec = WorldSpec {
            categories,
            archetypes,
            click_weight: 3.0,
            click_bias: 0.0,
            seed,
        };
        spec.calibrate(0.5, 10_000);
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() || self.archetypes.is_empty() {
            return Err(Error::Config("world needs categories and archetypes".into()));
        }
        for c in &self.categories {
            if c.words.is_empty() || c.hot > c.words.len() {
                return Err(Error::Config(format!("category {} has a bad word bank", c.name)));
            }
        }
        for a in &self.archetypes {
            if a.prefs.len() != self.categories.len() {
                return Err(Error::Config(format!(
                    "archetype {} has {} weights for {} categories",
                    a.name,
                    a.prefs.len(),
                    self.categories.len()
                )));
            }
            if a.prefs.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::Config(format!("archetype {} has bad weights", a.name)));
            }
        }
        if !self.click_weight.is_finite() || self.click_weight <= 0.0 {
            return Err(Error::Config("click weight must be positive".into()));
        }
        Ok(())
    }

    /// Affinity of a user archetype for an item in a click context. The hot
    /// word bonus applies only inside favored categories: users notice title
    /// quality where they already care.
    pub fn affinity(&self, prefs: &[f64], category: usize, hot_frac: f64, pop: f64, seen: usize) -> f64 {
        let base = prefs[category];
        let bonus = if base > 0.0 { 0.5 * hot_frac } else { 0.0 };
        base + bonus + 0.2 * pop + 0.1 * seen as f64
    }

    pub fn click_probability(&self, affinity: f64) -> f64 {
        sigmoid(self.click_weight * affinity + self.click_bias)
    }

    /// Bisect the click bias until the mean click probability over a probe
    /// sample (drawn like the generator draws) lands on `target_rate`.
    pub fn calibrate(&mut self, target_rate: f64, probes: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5be0cd19137e2179);
        let mut sample = Vec::with_capacity(probes);
        for _ in 0..probes {
            let a = rng.random_range(0..self.archetypes.len());
            let in_pref = rng.random_range(0.0..1.0) < 0.5;
            let cat = pick_category(&mut rng, &self.archetypes[a].prefs, in_pref);
            let len = rng.random_range(2..=4usize);
            let hot_rate = self.categories[cat].hot as f64
                / self.categories[cat].words.len() as f64;
            let mut hot = 0usize;
            for w in 0..len {
                let p = if w == 0 { 0.5 } else { hot_rate };
                if rng.random_range(0.0..1.0) < p {
                    hot += 1;
                }
            }
            let pop = rng.random_range(0..3) as f64 / 2.0;
            let seen = sample_seen(&mut rng);
            sample.push(self.affinity(
                &self.archetypes[a].prefs,
                cat,
                hot as f64 / len as f64,
                pop,
                seen,
            ));
        }
        let mean_rate = |bias: f64| -> f64 {
            sample.iter().map(|&aff| sigmoid(self.click_weight * aff + bias)).sum::<f64>()
                / sample.len() as f64
        };
        let (mut lo, mut hi) = (-20.0f64, 20.0f64);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if mean_rate(mid) < target_rate {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        self.click_bias = 0.5 * (lo + hi);
    }
}

fn pick_category(rng: &mut ChaCha8Rng, prefs: &[f64], in_pref: bool) -> usize {
    let pool: Vec<usize> = (0..prefs.len())
        .filter(|&c| (prefs[c] > 0.0) == in_pref)
        .collect();
    pool[rng.random_range(0..pool.len())]
}

fn sample_seen(rng: &mut ChaCha8Rng) -> usize {
    // seen-before counts 0/1/2 weighted 5:3:2
    match rng.random_range(0..10) {
        0..=4 => 0,
        5..=7 => 1,
        _ => 2,
    }
}

// ─── catalog and dataset ───

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub id: String,
    pub item: Candidate,
    /// Oracle-side metadata, carried for evaluation only.
    pub category: usize,
    pub hot_frac: f64,
    pub pop: f64,
}

/// A scoring record plus its ground-truth click probability.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabeledExample {
    pub record: BehaviorRecord,
    pub p_true: f64,
    pub in_preference: bool,
}

/// Zero-shot evaluation unit: given the context, `preferred` is the
/// continuation the world favors over `other`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PreferencePair {
    pub context: String,
    pub preferred: String,
    pub other: String,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub corpus: Vec<String>,
    pub ctr_train: Vec<LabeledExample>,
    pub ctr_eval: Vec<LabeledExample>,
    pub retrieval_train: Vec<RetrievalPair>,
    pub retrieval_eval: Vec<EvalPair>,
    pub retrieval_unseen: Vec<EvalPair>,
    pub catalog: Vec<CatalogEntry>,
    pub unseen_catalog: Vec<CatalogEntry>,
    pub zeroshot: Vec<PreferencePair>,
}

#[derive(Clone, Debug)]
pub struct GenConfig {
    pub users: usize,
    pub items: usize,
    pub unseen_items: usize,
    /// Total labeled CTR examples, spread across users round-robin.
    pub ctr_examples: usize,
    pub zeroshot_pairs: usize,
    /// Fraction of users reserved for held-out evaluation.
    pub eval_user_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            users: 200,
            items: 400,
            unseen_items: 100,
            ctr_examples: 2000,
            zeroshot_pairs: 200,
            eval_user_fraction: 0.25,
        }
    }
}

impl GenConfig {
    pub fn validate(&self, spec: &WorldSpec) -> Result<()> {
        let n_cat = spec.categories.len();
        if self.users < 2 || self.ctr_examples == 0 || self.zeroshot_pairs == 0 {
            return Err(Error::Config("generation counts must be at least 1".into()));
        }
        if self.items < n_cat || self.unseen_items < n_cat {
            return Err(Error::Config(format!(
                "need at least one item per category ({} categories)",
                n_cat
            )));
        }
        if !(self.eval_user_fraction > 0.0 && self.eval_user_fraction < 1.0) {
            return Err(Error::Config("eval fraction must be inside (0, 1)".into()));
        }
        Ok(())
    }
}

struct UserMeta {
    archetype: usize,
    record_events: Vec<Event>,
}

fn make_item(
    spec: &WorldSpec,
    rng: &mut ChaCha8Rng,
    id: String,
    category: usize,
) -> CatalogEntry {
    let bank = &spec.categories[category];
    let len = rng.random_range(2..=4usize);
    let mut words = Vec::with_capacity(len);
    let mut hot = 0usize;
    for w in 0..len {
        let hot_draw = if w == 0 {
            rng.random_range(0.0..1.0) < 0.5
        } else {
            rng.random_range(0.0..1.0) < bank.hot as f64 / bank.words.len() as f64
        };
        let idx = if hot_draw {
            hot += 1;
            rng.random_range(0..bank.hot)
        } else {
            rng.random_range(bank.hot..bank.words.len())
        };
        words.push(bank.words[idx].clone());
    }
    let pop_idx = rng.random_range(0..3usize);
    CatalogEntry {
        id,
        item: Candidate {
            category: bank.name.clone(),
            title: words.join(" "),
            popularity: Some(POP_BUCKETS[pop_idx].to_string()),
            cross: Vec::new(),
        },
        category,
        hot_frac: hot as f64 / len as f64,
        pop: pop_idx as f64 / 2.0,
    }
}

fn event_for(entry: &CatalogEntry) -> Event {
    Event {
        verb: "clicked".into(),
        object: format!("{} {}", entry.item.category, entry.item.title),
        when: None,
    }
}

fn pick_item<'a>(
    rng: &mut ChaCha8Rng,
    by_cat: &[Vec<usize>],
    catalog: &'a [CatalogEntry],
    category: usize,
) -> &'a CatalogEntry {
    let pool = &by_cat[category];
    &catalog[pool[rng.random_range(0..pool.len())]]
}

/// Generate the full dataset bundle from one seed: pretraining corpus,
/// labeled CTR splits with oracle probabilities, retrieval pairs with a
/// fully held-out unseen-item split, and zero-shot preference pairs.
pub fn generate(spec: &WorldSpec, gcfg: &GenConfig) -> Result<Dataset> {
    spec.validate()?;
    gcfg.validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x1f83d9abfb41bd6b);
    let n_cat = spec.categories.len();

    // catalogs: categories round-robin so none is empty
    let catalog: Vec<CatalogEntry> = (0..gcfg.items)
        .map(|i| make_item(spec, &mut rng, format!("item-{:05}", i), i % n_cat))
        .collect();
    let unseen_catalog: Vec<CatalogEntry> = (0..gcfg.unseen_items)
        .map(|i| make_item(spec, &mut rng, format!("unseen-{:05}", i), i % n_cat))
        .collect();
    let by_cat: Vec<Vec<usize>> = (0..n_cat)
        .map(|c| (0..catalog.len()).filter(|&i| catalog[i].category == c).collect())
        .collect();
    let unseen_by_cat: Vec<Vec<usize>> = (0..n_cat)
        .map(|c| (0..unseen_catalog.len()).filter(|&i| unseen_catalog[i].category == c).collect())
        .collect();

    // users with 2-5 history events, mostly inside their preferences
    let users: Vec<UserMeta> = (0..gcfg.users)
        .map(|_| {
            let archetype = rng.random_range(0..spec.archetypes.len());
            let prefs = &spec.archetypes[archetype].prefs;
            let n_ev = rng.random_range(2..=5usize);
            let record_events = (0..n_ev)
                .map(|_| {
                    let in_pref = rng.random_range(0.0..1.0) < 0.8;
                    let cat = pick_category(&mut rng, prefs, in_pref);
                    event_for(pick_item(&mut rng, &by_cat, &catalog, cat))
                })
                .collect();
            UserMeta { archetype, record_events }
        })
        .collect();
    let train_users = ((gcfg.users as f64) * (1.0 - gcfg.eval_user_fraction)).ceil() as usize;
    let train_users = train_users.clamp(1, gcfg.users - 1);

    let record_of = |u: &UserMeta| BehaviorRecord {
        user: UserProfile { attributes: vec![spec.archetypes[u.archetype].name.clone()] },
        events: u.record_events.clone(),
        candidate: None,
        label: None,
        target_text: None,
    };

    // labeled CTR examples, candidates split 50/50 in/out of preference
    let mut ctr_train = Vec::new();
    let mut ctr_eval = Vec::new();
    for i in 0..gcfg.ctr_examples {
        let ui = i % gcfg.users;
        let u = &users[ui];
        let prefs = &spec.archetypes[u.archetype].prefs;
        let in_pref = rng.random_range(0.0..1.0) < 0.5;
        let cat = pick_category(&mut rng, prefs, in_pref);
        let entry = pick_item(&mut rng, &by_cat, &catalog, cat);
        let seen = sample_seen(&mut rng);
        let aff = spec.affinity(prefs, entry.category, entry.hot_frac, entry.pop, seen);
        let p = spec.click_probability(aff);
        let label = (rng.random_range(0.0..1.0) < p) as u8;
        let mut cand = entry.item.clone();
        if seen > 0 {
            cand.cross.push(format!("seen {} times before", seen));
        }
        let mut record = record_of(u);
        record.candidate = Some(cand);
        record.label = Some(label);
        let ex = LabeledExample { record, p_true: p, in_preference: in_pref };
        if ui < train_users {
            ctr_train.push(ex);
        } else {
            ctr_eval.push(ex);
        }
    }

    // retrieval pairs: train users supervise; eval users query the seen
    // index; the unseen split queries items that exist nowhere in training
    let mut retrieval_train = Vec::new();
    let mut retrieval_eval = Vec::new();
    let mut retrieval_unseen = Vec::new();
    for (ui, u) in users.iter().enumerate() {
        let prefs = &spec.archetypes[u.archetype].prefs;
        let cat = pick_category(&mut rng, prefs, true);
        let entry = pick_item(&mut rng, &by_cat, &catalog, cat);
        if ui < train_users {
            retrieval_train
                .push(RetrievalPair { user: record_of(u), item: entry.item.clone() });
        } else {
            retrieval_eval
                .push(EvalPair { user: record_of(u), positive_id: entry.id.clone() });
            let ucat = pick_category(&mut rng, prefs, true);
            let uentry = pick_item(&mut rng, &unseen_by_cat, &unseen_catalog, ucat);
            retrieval_unseen
                .push(EvalPair { user: record_of(u), positive_id: uentry.id.clone() });
        }
    }

    // corpus: catalog sentences plus co-click sentences from train users
    let mut corpus = Vec::new();
    for e in &catalog {
        corpus.push(format!("a product of category {} named {} .", e.item.category, e.item.title));
    }
    for u in users.iter().take(train_users) {
        for w in u.record_events.windows(2) {
            corpus.push(format!(
                "a user clicked {} and then clicked {} .",
                w[0].object, w[1].object
            ));
        }
    }

    // zero-shot preference pairs: the preferred continuation stays inside
    // the archetype's favored categories, the other leaves them
    let zeroshot = (0..gcfg.zeroshot_pairs)
        .map(|_| {
            let a = rng.random_range(0..spec.archetypes.len());
            let prefs = &spec.archetypes[a].prefs;
            let c1 = pick_category(&mut rng, prefs, true);
            let c2 = pick_category(&mut rng, prefs, true);
            let c3 = pick_category(&mut rng, prefs, false);
            let ctx = pick_item(&mut rng, &by_cat, &catalog, c1);
            let good = pick_item(&mut rng, &by_cat, &catalog, c2);
            let bad = pick_item(&mut rng, &by_cat, &catalog, c3);
            PreferencePair {
                context: format!(
                    "a user clicked {} {} and then clicked",
                    ctx.item.category, ctx.item.title
                ),
                preferred: format!("{} {}", good.item.category, good.item.title),
                other: format!("{} {}", bad.item.category, bad.item.title),
            }
        })
        .collect();

    Ok(Dataset {
        corpus,
        ctr_train,
        ctr_eval,
        retrieval_train,
        retrieval_eval,
        retrieval_unseen,
        catalog,
        unseen_catalog,
        zeroshot,
    })
}

// ─── persistence ───

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)
            .map_err(|e| Error::Format(format!("jsonl encode: {}", e)))?;
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))
        })
        .collect()
}

impl Dataset {
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut corpus = fs::File::create(dir.join("corpus.txt"))?;
        for line in &self.corpus {
            writeln!(corpus, "{}", line)?;
        }
        write_jsonl(&dir.join("ctr_train.jsonl"), &self.ctr_train)?;
        write_jsonl(&dir.join("ctr_eval.jsonl"), &self.ctr_eval)?;
        write_jsonl(&dir.join("retrieval_train.jsonl"), &self.retrieval_train)?;
        write_jsonl(&dir.join("retrieval_eval.jsonl"), &self.retrieval_eval)?;
        write_jsonl(&dir.join("retrieval_unseen.jsonl"), &self.retrieval_unseen)?;
        write_jsonl(&dir.join("catalog.jsonl"), &self.catalog)?;
        write_jsonl(&dir.join("unseen_catalog.jsonl"), &self.unseen_catalog)?;
        write_jsonl(&dir.join("zeroshot.jsonl"), &self.zeroshot)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Dataset> {
        let corpus = fs::read_to_string(dir.join("corpus.txt"))?
            .lines()
            .map(str::to_string)
            .collect();
        Ok(Dataset {
            corpus,
            ctr_train: read_jsonl(&dir.join("ctr_train.jsonl"))?,
            ctr_eval: read_jsonl(&dir.join("ctr_eval.jsonl"))?,
            retrieval_train: read_jsonl(&dir.join("retrieval_train.jsonl"))?,
            retrieval_eval: read_jsonl(&dir.join("retrieval_eval.jsonl"))?,
            retrieval_unseen: read_jsonl(&dir.join("retrieval_unseen.jsonl"))?,
            catalog: read_jsonl(&dir.join("catalog.jsonl"))?,
            unseen_catalog: read_jsonl(&dir.join("unseen_catalog.jsonl"))?,
            zeroshot: read_jsonl(&dir.join("zeroshot.jsonl"))?,
        })
    }
}
