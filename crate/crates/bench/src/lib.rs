//! Shared setup for the criterion benches: a small deterministic model plus
//! a handful of scoring requests, so every bench target measures the same
//! workload instead of re-inventing its own.

use textrec_core::model::{ModelConfig, Parameters};
use textrec_core::text::{
    encode, render, BehaviorRecord, Candidate, EncodedSequence, Event, Task, TemplateSet,
    UserProfile, Vocabulary,
};

pub struct Fixture {
    pub params: Parameters<f32>,
    pub vocab: Vocabulary,
    pub tmpl: TemplateSet,
    pub records: Vec<BehaviorRecord>,
}

impl Fixture {
    /// Four layers, 32-dim: big enough that layer count and caching are
    /// visible in the timings, small enough to iterate in milliseconds.
    pub fn small() -> Fixture {
        let corpus = [
            "male thirties clicked outdoor hiking boots trekking poles copper kettle",
            "will click camping tent ? searched kitchen 2d 3h 1d ago seen 3 times",
            "female twenties clicked garden watering can pruning shears steel spade",
        ];
        let vocab = Vocabulary::build(corpus.iter().copied(), 400);
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            layers: 4,
            heads: 2,
            dim: 32,
            emb_dim: 32,
            ffn_mult: 2,
            max_len: 96,
            max_segments: 8,
            retrieval_dim: 8,
            share_layers: false,
        };
        let params = Parameters::init(&cfg, 0).expect("fixture model");
        Fixture { params, vocab, tmpl: TemplateSet::default(), records: sample_records() }
    }

    pub fn encoded(&self, i: usize) -> EncodedSequence {
        let rec = &self.records[i % self.records.len()];
        let rendered = render(rec, Task::Score, &self.tmpl).expect("render");
        encode(&self.vocab, &rendered, self.params.config.max_len).expect("encode")
    }
}

fn sample_records() -> Vec<BehaviorRecord> {
    ["camping tent", "copper kettle", "hiking boots", "watering can"]
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
                popularity: Some("sometimes seen".into()),
                cross: vec!["seen 3 times".into()],
            }),
            label: None,
            target_text: None,
        })
        .collect()
}
