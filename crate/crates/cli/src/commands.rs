//! One function per subcommand. Each loads what it needs from the output
//! directory, runs the corresponding core pipeline, writes its artifacts,
//! and finishes with a manifest under `<out>/manifests/`. Timing numbers go
//! to CSV artifacts only — manifests stay byte-reproducible.

use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};

use textrec_core::adapt::{
    self, eval_accuracy, tune, AdaptConfig, ScoreExample, TuneConfig, TuneMethod, TuningState,
};
use textrec_core::checkpoint::{load_model, load_state_for, save_model, save_state};
use textrec_core::compress::{
    classify_at_layer, dequantize_model, distill, exit_finetune, prune_finetune, quantize_model,
    save_quantized, sparsity_report, write_sparsity_csv, DistillConfig, ExitTrainConfig,
    PruneSchedule, PruneTrainConfig,
};
use textrec_core::latency::{latency_bench, write_latency_csv, BenchConfig, BenchMode};
use textrec_core::manifest::Manifest;
use textrec_core::metrics::{auc, distinct_n, pairwise_auc};
use textrec_core::model::{generate as lm_generate, GenerateConfig, Parameters, ModelConfig};
use textrec_core::objectives::{perplexity, pretrain, InfillConfig, PretrainConfig};
use textrec_core::retrieval::{build_index, hitrate_at_k, train_retrieval, RetrievalConfig, RetrievalIndex};
use textrec_core::synth::{self, Dataset, GenConfig, LabeledExample, WorldSpec};
use textrec_core::text::{
    encode, encode_free, render, BehaviorRecord, EncodedSequence, Special, Task, TemplateSet,
    Vocabulary,
};
use textrec_core::train::write_curve_csv;
use textrec_core::zeroshot::normalized_loglik;

use crate::config::ExperimentConfig;
use crate::CliError;

type CmdResult = Result<(), CliError>;

// ─── shared plumbing ───

pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub config_bytes: Vec<u8>,
}

impl Ctx {
    fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    fn vocab_path(&self) -> PathBuf {
        self.out.join("vocab.tsv")
    }

    fn model_path(&self) -> PathBuf {
        self.out.join("model.bin")
    }

    fn vocab(&self) -> anyhow::Result<Vocabulary> {
        Vocabulary::load(&self.vocab_path())
            .with_context(|| format!("no vocabulary at {}; run gen-data first", self.vocab_path().display()))
    }

    fn dataset(&self) -> anyhow::Result<Dataset> {
        Dataset::read_dir(&self.data_dir())
            .with_context(|| format!("no dataset under {}; run gen-data first", self.data_dir().display()))
    }

    fn model(&self, path: Option<&Path>) -> anyhow::Result<(Parameters<f32>, String)> {
        let p = path.map(Path::to_path_buf).unwrap_or_else(|| self.model_path());
        load_model(&p).with_context(|| format!("no model at {}; run pretrain first", p.display()))
    }

    fn manifest(&self, command: &str, seed: u64) -> Manifest {
        Manifest::new(command, &self.config_bytes, seed)
    }

    /// Artifact paths are recorded relative to the output directory so a
    /// rerun in any location reproduces the manifest bytes.
    fn rel(&self, p: &Path) -> PathBuf {
        p.strip_prefix(&self.out).unwrap_or(p).to_path_buf()
    }

    fn finish(&self, name: &str, m: &Manifest) -> anyhow::Result<()> {
        let dir = self.out.join("manifests");
        fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{}.toml", name));
        m.save(&path)?;
        println!("manifest: {}", path.display());
        Ok(())
    }
}

fn score_examples(
    records: &[LabeledExample],
    vocab: &Vocabulary,
    tmpl: &TemplateSet,
    max_len: usize,
    cap: usize,
) -> anyhow::Result<Vec<ScoreExample>> {
    let take = if cap == 0 { records.len() } else { cap.min(records.len()) };
    records[..take]
        .iter()
        .map(|ex| {
            let rendered = render(&ex.record, Task::Score, tmpl)?;
            let seq = encode(vocab, &rendered, max_len)?;
            Ok(ScoreExample { seq, label: ex.record.label.unwrap_or(0) as usize })
        })
        .collect()
}

/// Encode a record for a generation task and open the AR region (drop the
/// trailing [eos] so the model continues instead of stopping).
fn open_prefix(
    vocab: &Vocabulary,
    record: &BehaviorRecord,
    task: Task,
    tmpl: &TemplateSet,
    max_len: usize,
) -> anyhow::Result<EncodedSequence> {
    let rendered = render(record, task, tmpl)?;
    let mut seq = encode(vocab, &rendered, max_len)?;
    if seq.ids.last() == Some(&vocab.special(Special::EosA)) {
        seq.ids.pop();
        seq.regions.pop();
        seq.segments.pop();
    }
    Ok(seq)
}

fn parse_task(name: &str) -> Result<Task, CliError> {
    match name {
        "explain" => Ok(Task::Explain),
        "product" => Ok(Task::ProductDesign),
        "query" => Ok(Task::QueryGen),
        "dialog" => Ok(Task::Dialog),
        other => Err(CliError::Usage(format!(
            "unknown task '{}' (expected explain|product|query|dialog)",
            other
        ))),
    }
}

// ─── gen-data ───

pub fn gen_data(ctx: &Ctx, seed: Option<u64>) -> CmdResult {
    let mut data = ctx.cfg.data.clone();
    if let Some(s) = seed {
        data.seed = s;
    }
    let spec = WorldSpec::standard(data.seed);
    let gcfg = GenConfig {
        users: data.users,
        items: data.items,
        unseen_items: data.unseen_items,
        ctr_examples: data.ctr_examples,
        zeroshot_pairs: data.zeroshot_pairs,
        eval_user_fraction: data.eval_user_fraction,
    };
    let ds = synth::generate(&spec, &gcfg)?;
    fs::create_dir_all(&ctx.out).map_err(anyhow::Error::from)?;
    ds.write_dir(&ctx.data_dir())?;

    // the vocabulary must also cover scoring-template glue, archetype
    // attributes, and candidate side features, so rendered training records
    // contribute lines alongside the corpus
    let tmpl = TemplateSet::default();
    let mut lines: Vec<String> = ds.corpus.clone();
    for ex in &ds.ctr_train {
        let rendered = render(&ex.record, Task::Score, &tmpl)?;
        for c in &rendered.clauses {
            lines.push(c.text.clone());
        }
        lines.push(rendered.ar_text.clone());
    }
    let vocab = Vocabulary::build(lines.iter().map(|s| s.as_str()), data.vocab_max);
    vocab.save(&ctx.vocab_path())?;

    let mut m = ctx.manifest("gen-data", data.seed);
    m.metric("corpus_lines", ds.corpus.len() as f64)
        .metric("ctr_train", ds.ctr_train.len() as f64)
        .metric("ctr_eval", ds.ctr_eval.len() as f64)
        .metric("catalog_items", ds.catalog.len() as f64)
        .metric("unseen_items", ds.unseen_catalog.len() as f64)
        .metric("zeroshot_pairs", ds.zeroshot.len() as f64)
        .metric("vocab_size", vocab.len() as f64);
    m.artifact("data_dir", &ctx.rel(&ctx.data_dir()));
    m.artifact("vocab", &ctx.rel(&ctx.vocab_path()));
    ctx.finish("gen-data", &m)?;
    Ok(())
}

// ─── pretrain ───

pub fn cmd_pretrain(ctx: &Ctx, steps: Option<usize>, seed: Option<u64>) -> CmdResult {
    let vocab = ctx.vocab()?;
    let ds = ctx.dataset()?;
    let mc = ctx.cfg.model.to_model_config(vocab.len());
    let mut params = Parameters::<f32>::init(&mc, ctx.cfg.model.init_seed)?;
    let pcfg = PretrainConfig {
        steps: steps.unwrap_or(ctx.cfg.pretrain.steps),
        batch: ctx.cfg.pretrain.batch,
        lr: ctx.cfg.pretrain.lr,
        seed: seed.unwrap_or(ctx.cfg.pretrain.seed),
        infill: InfillConfig::default(),
    };
    let log = pretrain(&mut params, &vocab, &ds.corpus, &pcfg)?;
    let ppl_lines: Vec<String> = ds.corpus.iter().take(100).cloned().collect();
    let ppl = perplexity(&params, &vocab, &ppl_lines)?;
    let fp = save_model(&params, &ctx.model_path())?;
    let curve_path = ctx.out.join("pretrain_curve.csv");
    write_curve_csv(&curve_path, &log.curve)?;

    let mut m = ctx.manifest("pretrain", pcfg.seed).with_model(&fp);
    m.metric("final_loss", log.final_loss).metric("perplexity", ppl).metric(
        "steps",
        pcfg.steps as f64,
    );
    m.artifact("model", &ctx.rel(&ctx.model_path()));
    m.artifact("loss_curve", &ctx.rel(&curve_path));
    ctx.finish("pretrain", &m)?;
    println!("pretrained {} steps, final loss {:.4}, perplexity {:.2}", pcfg.steps, log.final_loss, ppl);
    Ok(())
}

// ─── tune ───

pub fn cmd_tune(
    ctx: &Ctx,
    method: &str,
    steps: Option<usize>,
    seed: Option<u64>,
) -> CmdResult {
    let method = TuneMethod::parse(method)
        .map_err(|e| CliError::Usage(format!("--method: {}", e)))?;
    let vocab = ctx.vocab()?;
    let ds = ctx.dataset()?;
    let (base, base_fp) = ctx.model(None)?;
    let tmpl = TemplateSet::default();
    let max_len = base.config.max_len;
    let cap = ctx.cfg.tune.max_examples;
    let train_data = score_examples(&ds.ctr_train, &vocab, &tmpl, max_len, cap)?;
    let eval_data = score_examples(&ds.ctr_eval, &vocab, &tmpl, max_len, cap)?;

    let tcfg = TuneConfig {
        method,
        task: "score".into(),
        steps: steps.unwrap_or(ctx.cfg.tune.steps),
        batch: ctx.cfg.tune.batch,
        lr: ctx.cfg.tune.lr,
        seed: seed.unwrap_or(ctx.cfg.tune.seed),
        adapt: AdaptConfig {
            prompt_count: ctx.cfg.tune.prompt_count,
            option_count: ctx.cfg.tune.option_count,
            adapter_rank: ctx.cfg.tune.adapter_rank,
            lambda_init: 1.0,
        },
        eval_every: ctx.cfg.tune.eval_every,
    };
    let (mut state, log) = tune(&base, &vocab, &train_data, Some(&eval_data), &tcfg)?;
    let accuracy = eval_accuracy(&base, &vocab, &state, &eval_data)?;
    state.base_fingerprint = base_fp.clone();
    let state_path = ctx.out.join(format!("state-{}.bin", method.as_str()));
    let state_fp = save_state(&state, &state_path)?;

    let mut m = ctx
        .manifest("tune", tcfg.seed)
        .with_model(&state_fp)
        .with_base(&base_fp);
    m.metric("final_loss", log.final_loss)
        .metric("accuracy", accuracy)
        .metric("trainable_fraction", state.trainable_fraction(&base));
    m.artifact("state", &ctx.rel(&state_path));
    ctx.finish(&format!("tune-{}", method.as_str()), &m)?;
    println!(
        "tuned ({}): final loss {:.4}, eval accuracy {:.3}",
        method.as_str(),
        log.final_loss,
        accuracy
    );
    Ok(())
}

// ─── eval-ctr ───

pub fn cmd_eval_ctr(
    ctx: &Ctx,
    scorer: &str,
    state_path: Option<&Path>,
    model_path: Option<&Path>,
) -> CmdResult {
    if !matches!(scorer, "oracle" | "model") {
        return Err(CliError::Usage(format!(
            "unknown scorer '{}' (expected model|oracle)",
            scorer
        )));
    }
    let ds = ctx.dataset()?;
    if ds.ctr_eval.is_empty() {
        return Err(anyhow!("ctr_eval split is empty").into());
    }
    let labels: Vec<u8> = ds.ctr_eval.iter().map(|e| e.record.label.unwrap_or(0)).collect();
    let oracle: Vec<f64> = ds.ctr_eval.iter().map(|e| e.p_true).collect();
    let oracle_pairs: Vec<(f64, u8)> =
        oracle.iter().zip(&labels).map(|(&s, &l)| (s, l)).collect();
    let oracle_auc = auc(&oracle_pairs)?;

    let (scores, base_fp, state_fp): (Vec<f64>, Option<String>, Option<String>) = match scorer {
        "oracle" => (oracle.clone(), None, None),
        _ => {
            let vocab = ctx.vocab()?;
            let (base, base_fp) = ctx.model(model_path)?;
            let tmpl = TemplateSet::default();
            let state: Option<(TuningState<f32>, String)> = match state_path {
                Some(p) => Some(load_state_for(p, &base_fp)?),
                None => None,
            };
            let mut scores = Vec::with_capacity(ds.ctr_eval.len());
            for ex in &ds.ctr_eval {
                let rendered = render(&ex.record, Task::Score, &tmpl)?;
                let seq = encode(&vocab, &rendered, base.config.max_len)?;
                scores.push(adapt::score(&base, &vocab, state.as_ref().map(|(s, _)| s), &seq)?);
            }
            (scores, Some(base_fp), state.map(|(_, fp)| fp))
        }
    };

    let pairs: Vec<(f64, u8)> = scores.iter().zip(&labels).map(|(&s, &l)| (s, l)).collect();
    let measured = auc(&pairs)?;

    let csv_path = ctx.out.join("ctr_scores.csv");
    let mut csv = String::from("example,score,label,p_true\n");
    for (i, ((s, l), p)) in scores.iter().zip(&labels).zip(&oracle).enumerate() {
        csv.push_str(&format!("{},{:.6},{},{:.6}\n", i, s, l, p));
    }
    fs::write(&csv_path, csv).map_err(anyhow::Error::from)?;

    let mut m = ctx.manifest("eval-ctr", ctx.cfg.data.seed);
    if let Some(fp) = state_fp {
        m = m.with_model(&fp);
    }
    if let Some(fp) = base_fp {
        m = m.with_base(&fp);
    }
    m.metric("auc", measured)
        .metric("oracle_auc", oracle_auc)
        .metric("examples", labels.len() as f64);
    m.artifact("scores", &ctx.rel(&csv_path));
    ctx.finish(&format!("eval-ctr-{}", scorer), &m)?;
    println!("eval-ctr ({}): AUC {:.4} (oracle {:.4})", scorer, measured, oracle_auc);
    Ok(())
}

// ─── serve-bench ───

pub fn cmd_serve_bench(
    ctx: &Ctx,
    mode: &str,
    split: Option<usize>,
    cold: bool,
    reps: Option<usize>,
    layer: Option<usize>,
) -> CmdResult {
    let split = split.unwrap_or(ctx.cfg.serve.split);
    let bench_mode = match mode {
        "monolithic" => BenchMode::Monolithic,
        "late" => BenchMode::LateInteraction { split, warm: !cold },
        "exit" => BenchMode::EarlyExit { layer: layer.unwrap_or(1) },
        "quantized" => BenchMode::Quantized,
        other => {
            return Err(CliError::Usage(format!(
                "unknown mode '{}' (expected monolithic|late|exit|quantized)",
                other
            )))
        }
    };
    let vocab = ctx.vocab()?;
    let ds = ctx.dataset()?;
    let (params, fp) = ctx.model(None)?;
    let tmpl = TemplateSet::default();
    let records: Vec<BehaviorRecord> = ds
        .ctr_eval
        .iter()
        .take(ctx.cfg.serve.requests.max(1))
        .map(|e| e.record.clone())
        .collect();
    let bcfg = BenchConfig {
        mode: bench_mode,
        warmup: ctx.cfg.serve.warmup,
        reps: reps.unwrap_or(ctx.cfg.serve.reps),
    };
    let report = latency_bench(&params, &vocab, &tmpl, &records, &bcfg)?;
    let tag = mode.to_string() + if cold && mode == "late" { "-cold" } else { "" };
    let csv_path = ctx.out.join(format!("latency-{}.csv", tag));
    write_latency_csv(&csv_path, &report)?;

    // manifests must reproduce bit-identically, so timings live in the CSV
    // and only deterministic counters become metrics
    let hits: usize = report.samples.iter().map(|s| s.hits).sum();
    let mut m = ctx.manifest("serve-bench", ctx.cfg.data.seed).with_model(&fp);
    m.metric("requests", report.samples.len() as f64)
        .metric("cache_hits", hits as f64)
        .metric("split", split as f64);
    m.artifact("latency_csv", &ctx.rel(&csv_path));
    ctx.finish(&format!("serve-bench-{}", tag), &m)?;
    println!(
        "serve-bench ({}): p50 {:.2} ms, p95 {:.2} ms, mean {:.2} ms -> {}",
        report.mode, report.p50_ms, report.p95_ms, report.mean_ms,
        csv_path.display()
    );
    Ok(())
}

// ─── retrieval ───

pub fn cmd_retrieve_build(
    ctx: &Ctx,
    catalog: &str,
    train_steps: Option<usize>,
    model_path: Option<&Path>,
) -> CmdResult {
    let which = match catalog {
        "seen" | "unseen" => catalog,
        other => {
            return Err(CliError::Usage(format!(
                "unknown catalog '{}' (expected seen|unseen)",
                other
            )))
        }
    };
    let vocab = ctx.vocab()?;
    let ds = ctx.dataset()?;
    let (mut params, mut fp) = ctx.model(model_path)?;
    let tmpl = TemplateSet::default();

    // optionally run contrastive training before indexing
    let steps = train_steps.unwrap_or(0);
    let mut final_loss = f64::NAN;
    if steps > 0 {
        let rcfg = RetrievalConfig {
            temperature: ctx.cfg.retrieval.temperature,
            steps,
            batch: ctx.cfg.retrieval.batch,
            lr: ctx.cfg.retrieval.lr,
            seed: ctx.cfg.retrieval.seed,
            projections_only: ctx.cfg.retrieval.projections_only,
        };
        let log = train_retrieval(&mut params, &vocab, &tmpl, &ds.retrieval_train, &rcfg)?;
        final_loss = log.final_loss;
        let tuned_path = ctx.out.join("model-retrieval.bin");
        fp = save_model(&params, &tuned_path)?;
        println!("retrieval training: {} steps, final loss {:.4}", steps, final_loss);
    }

    let entries = if which == "seen" { &ds.catalog } else { &ds.unseen_catalog };
    let items: Vec<(String, textrec_core::text::Candidate)> =
        entries.iter().map(|e| (e.id.clone(), e.item.clone())).collect();
    let index = build_index(&params, &vocab, &tmpl, &items)?;
    let index_path = ctx.out.join(format!("index-{}.bin", which));
    index.save(&index_path)?;

    let mut m = ctx.manifest("retrieve-build", ctx.cfg.retrieval.seed).with_model(&fp);
    m.metric("items", items.len() as f64).metric("dim", index.dim() as f64);
    if steps > 0 {
        m.metric("train_steps", steps as f64).metric("final_loss", final_loss);
    }
    m.artifact("index", &ctx.rel(&index_path));
    ctx.finish(&format!("retrieve-build-{}", which), &m)?;
    println!("index over {} {} items -> {}", items.len(), which, index_path.display());
    Ok(())
}

pub fn cmd_retrieve_eval(ctx: &Ctx, split: &str, k: Option<usize>, model_path: Option<&Path>) -> CmdResult {
    let which = match split {
        "seen" | "unseen" => split,
        other => {
            return Err(CliError::Usage(format!(
                "unknown split '{}' (expected seen|unseen)",
                other
            )))
        }
    };
    let vocab = ctx.vocab()?;
    let ds = ctx.dataset()?;
    let (params, fp) = ctx.model(model_path)?;
    let tmpl = TemplateSet::default();
    let index_path = ctx.out.join(format!("index-{}.bin", which));
    let index = RetrievalIndex::load(&index_path)
        .with_context(|| format!("no index at {}; run retrieve-build first", index_path.display()))?;
    let pairs = if which == "seen" { &ds.retrieval_eval } else { &ds.retrieval_unseen };
    let k = k.unwrap_or(ctx.cfg.retrieval.k);
    let hitrate = hitrate_at_k(&params, &vocab, &tmpl, &index, pairs, k)?;
    let random_baseline = (k as f64 / index.ids().count() as f64).min(1.0);

    let mut m = ctx.manifest("retrieve-eval", ctx.cfg.retrieval.seed).with_model(&fp);
    m.metric("hitrate_at_k", hitrate)
        .metric("k", k as f64)
        .metric("queries", pairs.len() as f64)
        .metric("random_baseline", random_baseline);
    ctx.finish(&format!("retrieve-eval-{}", which), &m)?;
    println!(
        "retrieve-eval ({}): HitRate@{} = {:.4} over {} queries (random {:.4})",
        which, k, hitrate, pairs.len(), random_baseline
    );
    Ok(())
}

// ─── zero-shot ───

pub fn cmd_zeroshot(ctx: &Ctx, model_path: Option<&Path>) -> CmdResult {
    let vocab = ctx.vocab()?;
    let ds = ctx.dataset()?;
    let (params, fp) = ctx.model(model_path)?;
    if ds.zeroshot.is_empty() {
        return Err(anyhow!("no zero-shot pairs in the dataset").into());
    }
    let mut duel = Vec::with_capacity(ds.zeroshot.len());
    let csv_path = ctx.out.join("zeroshot.csv");
    let mut csv = String::from("candidate,score,rank\n");
    for pair in &ds.zeroshot {
        let sp = normalized_loglik(&params, &vocab, &pair.context, &pair.preferred)?;
        let so = normalized_loglik(&params, &vocab, &pair.context, &pair.other)?;
        duel.push((sp, so));
        let (first, second) = if sp >= so {
            ((&pair.preferred, sp), (&pair.other, so))
        } else {
            ((&pair.other, so), (&pair.preferred, sp))
        };
        csv.push_str(&format!("\"{}\",{:.6},1\n", first.0, first.1));
        csv.push_str(&format!("\"{}\",{:.6},2\n", second.0, second.1));
    }
    let a = pairwise_auc(&duel)?;
    fs::write(&csv_path, csv).map_err(anyhow::Error::from)?;

    let mut m = ctx.manifest("zeroshot", ctx.cfg.data.seed).with_model(&fp);
    m.metric("auc", a).metric("pairs", duel.len() as f64);
    m.artifact("rankings", &ctx.rel(&csv_path));
    ctx.finish("zeroshot", &m)?;
    println!("zero-shot preference AUC: {:.4} over {} pairs", a, duel.len());
    Ok(())
}

// ─── generation ───

pub fn cmd_generate(ctx: &Ctx, task_name: &str, count: Option<usize>) -> CmdResult {
    let task = parse_task(task_name)?;
    let vocab = ctx.vocab()?;
    let ds = ctx.dataset()?;
    let (params, fp) = ctx.model(None)?;
    let tmpl = TemplateSet::default();
    let n = count.unwrap_or(ctx.cfg.generate.count).max(1);
    let gcfg = GenerateConfig {
        max_new: ctx.cfg.generate.max_new,
        temperature: ctx.cfg.generate.temperature,
        top_p: ctx.cfg.generate.top_p,
        seed: ctx.cfg.generate.seed,
    };
    let mut outputs = Vec::with_capacity(n);
    for ex in ds.ctr_eval.iter().take(n) {
        let prefix = open_prefix(&vocab, &ex.record, task, &tmpl, params.config.max_len)?;
        let ids = lm_generate(&params, &vocab, &prefix, &gcfg)?;
        outputs.push(vocab.decode(&ids));
    }
    let text_path = ctx.out.join(format!("generated-{}.txt", task_name));
    fs::write(&text_path, outputs.join("\n") + "\n").map_err(anyhow::Error::from)?;
    let refs: Vec<&str> = outputs.iter().map(|s| s.as_str()).collect();
    let d2 = distinct_n(&refs, 2).unwrap_or(0.0);

    let mut m = ctx.manifest("generate", gcfg.seed).with_model(&fp);
    m.metric("count", outputs.len() as f64).metric("distinct_2", d2);
    m.artifact("texts", &ctx.rel(&text_path));
    ctx.finish(&format!("generate-{}", task_name), &m)?;
    println!("generated {} {} texts -> {}", outputs.len(), task_name, text_path.display());
    Ok(())
}

pub fn cmd_chat(ctx: &Ctx, replay: Option<&Path>) -> CmdResult {
    let vocab = ctx.vocab()?;
    let (params, fp) = ctx.model(None)?;
    let gcfg = GenerateConfig {
        max_new: ctx.cfg.generate.max_new,
        temperature: ctx.cfg.generate.temperature,
        top_p: ctx.cfg.generate.top_p,
        seed: ctx.cfg.generate.seed,
    };
    let lines: Vec<String> = match replay {
        Some(p) => fs::read_to_string(p)
            .with_context(|| format!("reading replay file {}", p.display()))?
            .lines()
            .map(str::to_string)
            .filter(|l| !l.trim().is_empty())
            .collect(),
        None => {
            let stdin = std::io::stdin();
            stdin
                .lock()
                .lines()
                .collect::<Result<Vec<_>, _>>()
                .map_err(anyhow::Error::from)?
                .into_iter()
                .filter(|l| !l.trim().is_empty())
                .collect()
        }
    };
    if lines.is_empty() {
        return Err(anyhow!("no dialog turns provided").into());
    }

    let mut history: Vec<String> = Vec::new();
    let mut transcript = String::new();
    for line in &lines {
        // condition on the last few exchanges plus the new message
        let recent = history.iter().rev().take(4).rev().cloned().collect::<Vec<_>>();
        let context = if recent.is_empty() {
            format!("user says {}", line)
        } else {
            format!("{} user says {}", recent.join(" "), line)
        };
        let mut seq = encode_free(&vocab, &context, "", params.config.max_len)?;
        if seq.ids.last() == Some(&vocab.special(Special::EosA)) {
            seq.ids.pop();
            seq.regions.pop();
            seq.segments.pop();
        }
        let ids = lm_generate(&params, &vocab, &seq, &gcfg)?;
        let reply = vocab.decode(&ids);
        println!("user: {}", line);
        println!("bot:  {}", reply);
        transcript.push_str(&format!("user: {}\nbot:  {}\n", line, reply));
        history.push(format!("user says {} . bot says {} .", line, reply));
    }
    let path = ctx.out.join("chat_transcript.txt");
    fs::write(&path, &transcript).map_err(anyhow::Error::from)?;

    let mut m = ctx.manifest("chat", gcfg.seed).with_model(&fp);
    m.metric("turns", lines.len() as f64);
    m.artifact("transcript", &ctx.rel(&path));
    ctx.finish("chat", &m)?;
    Ok(())
}

// ─── compression ───

pub fn cmd_distill(ctx: &Ctx, steps: Option<usize>, seed: Option<u64>) -> CmdResult {
    let vocab = ctx.vocab()?;
    let ds = ctx.dataset()?;
    let (teacher, teacher_fp) = ctx.model(None)?;
    let d = &ctx.cfg.distill;
    let student_cfg = ModelConfig {
        layers: d.student_layers,
        emb_dim: d.student_emb_dim,
        share_layers: d.share_layers,
        ..teacher.config.clone()
    };
    let dcfg = DistillConfig {
        steps: steps.unwrap_or(d.steps),
        batch: d.batch,
        lr: d.lr,
        seed: seed.unwrap_or(d.seed),
        infill: InfillConfig::default(),
    };
    let (student, log) = distill(&teacher, &student_cfg, &vocab, &ds.corpus, &dcfg)?;
    let ppl_lines: Vec<String> = ds.corpus.iter().take(100).cloned().collect();
    let ppl = perplexity(&student, &vocab, &ppl_lines)?;
    let student_path = ctx.out.join("student.bin");
    let student_fp = save_model(&student, &student_path)?;

    let mut m = ctx
        .manifest("distill", dcfg.seed)
        .with_model(&student_fp)
        .with_base(&teacher_fp);
    m.metric("final_loss", log.final_loss)
        .metric("student_perplexity", ppl)
        .metric("student_layers", student_cfg.layers as f64);
    m.artifact("student", &ctx.rel(&student_path));
    ctx.finish("distill", &m)?;
    println!(
        "distilled {}-layer student: final loss {:.4}, perplexity {:.2}",
        student_cfg.layers, log.final_loss, ppl
    );
    Ok(())
}

pub fn cmd_prune(ctx: &Ctx, steps: Option<usize>, seed: Option<u64>) -> CmdResult {
    let vocab = ctx.vocab()?;
    let ds = ctx.dataset()?;
    let (mut params, base_fp) = ctx.model(None)?;
    let tmpl = TemplateSet::default();
    let c = &ctx.cfg.compress;
    let data = score_examples(&ds.ctr_train, &vocab, &tmpl, params.config.max_len, 200)?;
    let steps = steps.unwrap_or(c.steps);
    let pcfg = PruneTrainConfig {
        steps,
        batch: c.batch,
        lr: c.lr,
        seed: seed.unwrap_or(c.seed),
        schedule: PruneSchedule::new(c.prune_target, c.prune_start, c.prune_end.min(steps))?,
    };
    let (_pruner, log) = prune_finetune(&mut params, &vocab, &data, &pcfg)?;
    let report = sparsity_report(&params);
    let prunable = textrec_core::compress::prunable_names(&params);
    let pruned: Vec<f64> = report
        .iter()
        .filter(|(k, _, _, _)| prunable.contains(k))
        .map(|(_, _, _, s)| *s)
        .collect();
    let mean_sparsity = pruned.iter().sum::<f64>() / pruned.len().max(1) as f64;
    let pruned_path = ctx.out.join("model-pruned.bin");
    let fp = save_model(&params, &pruned_path)?;
    let report_path = ctx.out.join("sparsity.csv");
    write_sparsity_csv(&report_path, &report)?;

    let mut m = ctx.manifest("prune", pcfg.seed).with_model(&fp).with_base(&base_fp);
    m.metric("final_loss", log.final_loss)
        .metric("mean_sparsity", mean_sparsity)
        .metric("target", c.prune_target);
    m.artifact("model", &ctx.rel(&pruned_path));
    m.artifact("sparsity", &ctx.rel(&report_path));
    ctx.finish("prune", &m)?;
    println!("pruned to mean sparsity {:.3} -> {}", mean_sparsity, pruned_path.display());
    Ok(())
}

pub fn cmd_quantize(ctx: &Ctx) -> CmdResult {
    let vocab = ctx.vocab()?;
    let ds = ctx.dataset()?;
    let (params, base_fp) = ctx.model(None)?;
    let tmpl = TemplateSet::default();
    let qm = quantize_model(&params);
    let q_path = ctx.out.join("model-int8.bin");
    let q_fp = save_quantized(&qm, &q_path)?;

    // elementwise reconstruction stays within half a quantization step;
    // logit drift is measured against the full-precision scores
    let deq = dequantize_model(&qm)?;
    let mut worst_ratio = 0.0f64;
    for (name, t) in params.iter() {
        let q = qm.tensors.get(name).expect("quantized model must cover every tensor");
        let back = textrec_core::compress::dequantize_tensor(q);
        let scale = q.scale as f64;
        if scale == 0.0 {
            continue;
        }
        for (a, b) in t.iter().zip(back.iter()) {
            let err = (*a as f64 - *b as f64).abs();
            worst_ratio = worst_ratio.max(err / (scale / 2.0));
        }
    }
    let mut drift = 0.0f64;
    let sample: Vec<&LabeledExample> = ds.ctr_eval.iter().take(20).collect();
    for ex in &sample {
        let rendered = render(&ex.record, Task::Score, &tmpl)?;
        let seq = encode(&vocab, &rendered, params.config.max_len)?;
        let a = adapt::score(&params, &vocab, None, &seq)?;
        let b = adapt::score(&deq, &vocab, None, &seq)?;
        drift += (a - b).abs();
    }
    drift /= sample.len().max(1) as f64;

    let mut m = ctx.manifest("quantize", 0).with_model(&q_fp).with_base(&base_fp);
    m.metric("max_err_over_half_scale", worst_ratio).metric("score_drift", drift);
    m.artifact("quantized", &ctx.rel(&q_path));
    ctx.finish("quantize", &m)?;
    println!(
        "quantized: worst err/(scale/2) {:.4}, mean score drift {:.5} -> {}",
        worst_ratio, drift, q_path.display()
    );
    Ok(())
}

pub fn cmd_exit_eval(ctx: &Ctx, finetune_steps: Option<usize>) -> CmdResult {
    let vocab = ctx.vocab()?;
    let ds = ctx.dataset()?;
    let (mut params, mut fp) = ctx.model(None)?;
    let tmpl = TemplateSet::default();
    let c = &ctx.cfg.compress;
    let ft = finetune_steps.unwrap_or(c.exit_steps);
    if ft > 0 {
        let data = score_examples(&ds.ctr_train, &vocab, &tmpl, params.config.max_len, 200)?;
        let ecfg = ExitTrainConfig { steps: ft, batch: c.batch, lr: c.lr, seed: c.seed };
        let log = exit_finetune(&mut params, &vocab, &data, &ecfg)?;
        let exit_path = ctx.out.join("model-exit.bin");
        fp = save_model(&params, &exit_path)?;
        println!("exit training: {} steps, final loss {:.4}", ft, log.final_loss);
    }

    let cap = if c.exit_eval_examples == 0 { ds.ctr_eval.len() } else { c.exit_eval_examples };
    let evals: Vec<&LabeledExample> = ds.ctr_eval.iter().take(cap).collect();
    if evals.is_empty() {
        return Err(anyhow!("ctr_eval split is empty").into());
    }
    let layers = params.config.layers;
    let csv_path = ctx.out.join("exit_auc.csv");
    let mut csv = String::from("layer,auc\n");
    let mut m = ctx.manifest("exit-eval", c.seed).with_model(&fp);
    for k in 1..=layers {
        let mut pairs = Vec::with_capacity(evals.len());
        for ex in &evals {
            let rendered = render(&ex.record, Task::Score, &tmpl)?;
            let seq = encode(&vocab, &rendered, params.config.max_len)?;
            let probs = classify_at_layer(&params, &vocab, &seq, k)?;
            pairs.push((probs[1], ex.record.label.unwrap_or(0)));
        }
        let a = auc(&pairs)?;
        csv.push_str(&format!("{},{:.6}\n", k, a));
        m.metric(&format!("auc_exit_{}", k), a);
    }
    fs::write(&csv_path, csv).map_err(anyhow::Error::from)?;
    m.metric("examples", evals.len() as f64);
    m.artifact("exit_auc", &ctx.rel(&csv_path));
    ctx.finish("exit-eval", &m)?;
    println!("exit-eval over {} layers -> {}", layers, csv_path.display());
    Ok(())
}
