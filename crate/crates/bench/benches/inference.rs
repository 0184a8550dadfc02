use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use textrec_bench::Fixture;
use textrec_core::adapt;
use textrec_core::checkpoint::fingerprint;
use textrec_core::compress::{classify_at_layer, dequantize_model, quantize_model};
use textrec_core::late::{serve, LateConfig, PrefixCache};
use textrec_core::text::{render, segment_split, Task};

/// Full joint forward: one click-probability per request.
fn bench_monolithic_score(c: &mut Criterion) {
    let fx = Fixture::small();
    let seq = fx.encoded(0);
    c.bench_function("score/monolithic", |b| {
        b.iter(|| adapt::score::<f32>(&fx.params, &fx.vocab, None, black_box(&seq)).unwrap())
    });
}

/// Two-phase serving with a pre-filled prefix cache: the steady-state cost
/// is tokenization plus the interaction layers above the split.
fn bench_late_interaction_warm(c: &mut Criterion) {
    let fx = Fixture::small();
    let late = LateConfig::new(3);
    let fp = fingerprint(&fx.params).unwrap();
    let mut cache = PrefixCache::new(late.capacity);
    let segs: Vec<_> = fx
        .records
        .iter()
        .map(|r| {
            let rendered = render(r, Task::Score, &fx.tmpl).unwrap();
            segment_split(&fx.vocab, &rendered, fx.params.config.max_len).unwrap()
        })
        .collect();
    for s in &segs {
        serve(&fx.params, &fx.vocab, None, &late, &mut cache, &fp, s).unwrap();
    }
    c.bench_function("score/late_warm", |b| {
        let mut i = 0usize;
        b.iter(|| {
            let s = &segs[i % segs.len()];
            i += 1;
            serve(&fx.params, &fx.vocab, None, &late, &mut cache, &fp, black_box(s)).unwrap()
        })
    });
}

/// Classification from intermediate layers: cost should scale with depth.
fn bench_early_exit(c: &mut Criterion) {
    let fx = Fixture::small();
    let seq = fx.encoded(0);
    let mut group = c.benchmark_group("score/early_exit");
    for layer in [1usize, 2, 4] {
        group.bench_with_input(BenchmarkId::from_parameter(layer), &layer, |b, &k| {
            b.iter(|| classify_at_layer(&fx.params, &fx.vocab, black_box(&seq), k).unwrap())
        });
    }
    group.finish();
}

/// Scoring on weights round-tripped through int8, plus the round-trip itself.
fn bench_quantized(c: &mut Criterion) {
    let fx = Fixture::small();
    let qparams = dequantize_model(&quantize_model(&fx.params)).unwrap();
    let seq = fx.encoded(0);
    c.bench_function("score/quantized", |b| {
        b.iter(|| adapt::score::<f32>(&qparams, &fx.vocab, None, black_box(&seq)).unwrap())
    });
    c.bench_function("quantize/round_trip", |b| {
        b.iter(|| dequantize_model(&quantize_model(black_box(&fx.params))).unwrap())
    });
}

criterion_group!(
    benches,
    bench_monolithic_score,
    bench_late_interaction_warm,
    bench_early_exit,
    bench_quantized
);
criterion_main!(benches);
