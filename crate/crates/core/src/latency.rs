//! Per-request latency measurement for the serving configurations. Each
//! sample times one scoring request end to end — rendering and tokenization
//! included, since a service pays for those too — and the report carries
//! the raw samples plus p50/p95/mean so orderings between modes can be
//! asserted rather than eyeballed.

use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::adapt;
use crate::checkpoint::fingerprint;
use crate::compress::{classify_at_layer, dequantize_model, quantize_model};
use crate::error::{Error, Result};
use crate::late::{serve, LateConfig, PrefixCache};
use crate::model::Parameters;
use crate::text::{encode, render, segment_split, BehaviorRecord, Task, TemplateSet, Vocabulary};

#[derive(Clone, Debug, PartialEq)]
pub enum BenchMode {
    /// Full joint forward per request.
    Monolithic,
    /// Two-phase scoring with `split` cached layers; `warm` pre-fills the
    /// prefix cache before timing, cold starts every request empty.
    LateInteraction { split: usize, warm: bool },
    /// Classify from layer `layer`'s hidden states.
    EarlyExit { layer: usize },
    /// Full forward on weights round-tripped through int8.
    Quantized,
}

impl BenchMode {
    pub fn name(&self) -> String {
        match self {
            BenchMode::Monolithic => "monolithic".into(),
            BenchMode::LateInteraction { split, warm } => {
                format!("late_interaction(split={},{})", split, if *warm { "warm" } else { "cold" })
            }
            BenchMode::EarlyExit { layer } => format!("early_exit({})", layer),
            BenchMode::Quantized => "quantized".into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub mode: BenchMode,
    /// Untimed iterations before sampling starts.
    pub warmup: usize,
    /// Timed requests; request i scores `records[i % records.len()]`.
    pub reps: usize,
}

#[derive(Clone, Debug)]
pub struct RequestSample {
    pub request: usize,
    pub hits: usize,
    pub phase1_ms: f64,
    pub phase2_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub mode: String,
    pub samples: Vec<RequestSample>,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub mean_ms: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

fn summarize(mode: String, samples: Vec<RequestSample>) -> BenchReport {
    let mut totals: Vec<f64> = samples.iter().map(|s| s.total_ms).collect();
    totals.sort_by(|a, b| a.total_cmp(b));
    let mean = totals.iter().sum::<f64>() / totals.len() as f64;
    BenchReport {
        mode,
        p50_ms: percentile(&totals, 0.50),
        p95_ms: percentile(&totals, 0.95),
        mean_ms: mean,
        samples,
    }
}

/// Time `reps` scoring requests in the given mode. All modes produce a click
/// probability for each request; what differs is how much of the network
/// runs and what is reused between requests.
pub fn latency_bench(
    params: &Parameters<f32>,
    vocab: &Vocabulary,
    tmpl: &TemplateSet,
    records: &[BehaviorRecord],
    bcfg: &BenchConfig,
) -> Result<BenchReport> {
    if records.is_empty() {
        return Err(Error::Contract("latency bench needs at least one record".into()));
    }
    if bcfg.reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    let max_len = params.config.max_len;
    let pick = |i: usize| &records[i % records.len()];

    match &bcfg.mode {
        BenchMode::Monolithic => {
            let run = |rec: &BehaviorRecord| -> Result<f64> {
                let rendered = render(rec, Task::Score, tmpl)?;
                let seq = encode(vocab, &rendered, max_len)?;
                adapt::score::<f32>(params, vocab, None, &seq)
            };
            plain_loop(bcfg, pick, run)
        }
        BenchMode::EarlyExit { layer } => {
            let k = *layer;
            let run = |rec: &BehaviorRecord| -> Result<f64> {
                let rendered = render(rec, Task::Score, tmpl)?;
                let seq = encode(vocab, &rendered, max_len)?;
                Ok(classify_at_layer(params, vocab, &seq, k)?[1])
            };
            plain_loop(bcfg, pick, run)
        }
        BenchMode::Quantized => {
            let qparams = dequantize_model(&quantize_model(params))?;
            let run = |rec: &BehaviorRecord| -> Result<f64> {
                let rendered = render(rec, Task::Score, tmpl)?;
                let seq = encode(vocab, &rendered, max_len)?;
                adapt::score::<f32>(&qparams, vocab, None, &seq)
            };
            plain_loop(bcfg, pick, run)
        }
        BenchMode::LateInteraction { split, warm } => {
            let late = LateConfig::new(*split);
            late.validate(&params.config)?;
            let fp = fingerprint(params)?;
            let mut cache = PrefixCache::new(late.capacity);
            if *warm {
                // pre-fill so the timed loop measures steady-state serving
                for i in 0..records.len() {
                    let rendered = render(pick(i), Task::Score, tmpl)?;
                    let segs = segment_split(vocab, &rendered, max_len)?;
                    serve(params, vocab, None, &late, &mut cache, &fp, &segs)?;
                }
            }
            let one = |i: usize, cache: &mut PrefixCache| -> Result<RequestSample> {
                let t0 = Instant::now();
                let rendered = render(pick(i), Task::Score, tmpl)?;
                let segs = segment_split(vocab, &rendered, max_len)?;
                let tok = t0.elapsed();
                let out = serve(params, vocab, None, &late, cache, &fp, &segs)?;
                Ok(RequestSample {
                    request: i,
                    hits: out.hits,
                    phase1_ms: (tok + out.phase1).as_secs_f64() * 1e3,
                    phase2_ms: out.phase2.as_secs_f64() * 1e3,
                    total_ms: t0.elapsed().as_secs_f64() * 1e3,
                })
            };
            for w in 0..bcfg.warmup {
                if *warm {
                    one(w, &mut cache)?;
                } else {
                    one(w, &mut PrefixCache::new(late.capacity))?;
                }
            }
            let mut samples = Vec::with_capacity(bcfg.reps);
            for i in 0..bcfg.reps {
                let mut sample = if *warm {
                    one(i, &mut cache)?
                } else {
                    // cold: every request starts with an empty cache
                    one(i, &mut PrefixCache::new(late.capacity))?
                };
                sample.request = i;
                samples.push(sample);
            }
            Ok(summarize(bcfg.mode.name(), samples))
        }
    }
}

fn plain_loop<'a>(
    bcfg: &BenchConfig,
    pick: impl Fn(usize) -> &'a BehaviorRecord,
    run: impl Fn(&BehaviorRecord) -> Result<f64>,
) -> Result<BenchReport> {
    for w in 0..bcfg.warmup {
        run(pick(w))?;
    }
    let mut samples = Vec::with_capacity(bcfg.reps);
    for i in 0..bcfg.reps {
        let t0 = Instant::now();
        let p = run(pick(i))?;
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        if !p.is_finite() {
            return Err(Error::Numeric(format!("request {} produced score {}", i, p)));
        }
        samples.push(RequestSample {
            request: i,
            hits: 0,
            phase1_ms: 0.0,
            phase2_ms: ms,
            total_ms: ms,
        });
    }
    Ok(summarize(bcfg.mode.name(), samples))
}

/// One row per request: `request,hits,phase1_ms,phase2_ms,total_ms`.
pub fn write_latency_csv(path: &Path, report: &BenchReport) -> Result<()> {
    let mut out = String::from("request,hits,phase1_ms,phase2_ms,total_ms\n");
    for s in &report.samples {
        out.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4}\n",
            s.request, s.hits, s.phase1_ms, s.phase2_ms, s.total_ms
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::text::{Candidate, Event, UserProfile};

    fn vocab() -> Vocabulary {
        let corpus = [
            "male thirties clicked outdoor hiking boots trekking poles copper kettle",
            "will click camping tent ? searched kitchen 2d 3h 1d ago seen 3 times",
        ];
        Vocabulary::build(corpus.iter().copied(), 200)
    }

    fn params(v: &Vocabulary, layers: usize) -> Parameters<f32> {
        let cfg = ModelConfig {
            vocab_size: v.len(),
            layers,
            heads: 2,
            dim: 32,
            emb_dim: 32,
            ffn_mult: 2,
            max_len: 96,
            max_segments: 8,
            retrieval_dim: 8,
            share_layers: false,
        };
        Parameters::init(&cfg, 0).unwrap()
    }

    fn records() -> Vec<BehaviorRecord> {
        ["camping tent", "copper kettle", "hiking boots"]
            .iter()
            .map(|title| BehaviorRecord {
                user: UserProfile { attributes: vec!["male".into(), "thirties".into()] },
                events: vec![
                    Event {
                        verb: "clicked".into(),
                        object: "outdoor trekking poles".into(),
                        when: Some("2d ago".into()),
                    },
                    Event {
                        verb: "searched".into(),
                        object: "kitchen copper kettle".into(),
                        when: Some("1d ago".into()),
                    },
                ],
                candidate: Some(Candidate {
                    category: "outdoor".into(),
                    title: title.to_string(),
                    popularity: None,
                    cross: vec!["seen 3 times".into()],
                }),
                label: None,
                target_text: None,
            })
            .collect()
    }

    #[test]
    fn reps_control_the_sample_count_exactly() {
        let v = vocab();
        let p = params(&v, 2);
        let recs = records();
        let tmpl = TemplateSet::default();
        let bcfg =
            BenchConfig { mode: BenchMode::Monolithic, warmup: 1, reps: 7 };
        let rep = latency_bench(&p, &v, &tmpl, &recs, &bcfg).unwrap();
        assert_eq!(rep.samples.len(), 7);
        assert!(rep.samples.iter().all(|s| s.total_ms > 0.0));
        assert!(rep.p50_ms <= rep.p95_ms);
        assert!(rep.mean_ms > 0.0);
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("latency.csv");
        write_latency_csv(&csv, &rep).unwrap();
        let text = fs::read_to_string(&csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 8);
        assert_eq!(lines[0], "request,hits,phase1_ms,phase2_ms,total_ms");
        assert!(lines[1].starts_with("0,0,"));
    }

    #[test]
    fn exiting_early_is_faster_than_running_every_layer() {
        let v = vocab();
        let p = params(&v, 4);
        let recs = records();
        let tmpl = TemplateSet::default();
        let fast = latency_bench(
            &p,
            &v,
            &tmpl,
            &recs,
            &BenchConfig { mode: BenchMode::EarlyExit { layer: 1 }, warmup: 2, reps: 15 },
        )
        .unwrap();
        let slow = latency_bench(
            &p,
            &v,
            &tmpl,
            &recs,
            &BenchConfig { mode: BenchMode::EarlyExit { layer: 4 }, warmup: 2, reps: 15 },
        )
        .unwrap();
        assert!(
            fast.p50_ms < slow.p50_ms,
            "exit(1) p50 {} vs exit(4) p50 {}",
            fast.p50_ms,
            slow.p50_ms
        );
    }

    #[test]
    fn warm_cache_beats_cold_start() {
        let v = vocab();
        let p = params(&v, 4);
        let recs = records();
        let tmpl = TemplateSet::default();
        let warm = latency_bench(
            &p,
            &v,
            &tmpl,
            &recs,
            &BenchConfig {
                mode: BenchMode::LateInteraction { split: 3, warm: true },
                warmup: 2,
                reps: 15,
            },
        )
        .unwrap();
        let cold = latency_bench(
            &p,
            &v,
            &tmpl,
            &recs,
            &BenchConfig {
                mode: BenchMode::LateInteraction { split: 3, warm: false },
                warmup: 2,
                reps: 15,
            },
        )
        .unwrap();
        assert!(
            warm.p50_ms < cold.p50_ms,
            "warm p50 {} vs cold p50 {}",
            warm.p50_ms,
            cold.p50_ms
        );
        // warm requests hit the cache on every non-candidate segment
        assert!(warm.samples.iter().all(|s| s.hits > 0));
        assert!(cold.samples.iter().all(|s| s.hits == 0));
    }

    #[test]
    fn quantized_mode_produces_finite_timings() {
        let v = vocab();
        let p = params(&v, 2);
        let recs = records();
        let tmpl = TemplateSet::default();
        let rep = latency_bench(
            &p,
            &v,
            &tmpl,
            &recs,
            &BenchConfig { mode: BenchMode::Quantized, warmup: 0, reps: 3 },
        )
        .unwrap();
        assert_eq!(rep.samples.len(), 3);
        assert_eq!(rep.mode, "quantized");
        assert!(rep.samples.iter().all(|s| s.total_ms.is_finite() && s.total_ms > 0.0));
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let v = vocab();
        let p = params(&v, 2);
        let tmpl = TemplateSet::default();
        let bcfg = BenchConfig { mode: BenchMode::Monolithic, warmup: 0, reps: 1 };
        assert!(latency_bench(&p, &v, &tmpl, &[], &bcfg).is_err());
        let zero = BenchConfig { mode: BenchMode::Monolithic, warmup: 0, reps: 0 };
        assert!(latency_bench(&p, &v, &tmpl, &records(), &zero).is_err());
        let bad_split = BenchConfig {
            mode: BenchMode::LateInteraction { split: 9, warm: true },
            warmup: 0,
            reps: 1,
        };
        assert!(latency_bench(&p, &v, &tmpl, &records(), &bad_split).is_err());
    }
}
