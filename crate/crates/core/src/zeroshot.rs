//! Zero-shot plausibility scoring. No task head and no tuning: a candidate
//! continuation is scored by the pretrained LM's log-likelihood, normalized
//! by the number of candidate content tokens so that short and long
//! candidates compete fairly. Delimiters never enter the sum or the count.

use std::cmp::Ordering;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{
    forward_seq, insert_params, lm_logits, ForwardOpts, MaskMode, Parameters, SequenceInput,
};
use crate::scalar::Scalar;
use crate::text::{encode_free, Region, Special, Vocabulary};

/// Mean log p(tokenᵢ | context, earlier tokens) over the m content tokens of
/// the candidate, natural log. The bidirectional side carries the user
/// context; the candidate autoregressively continues it.
pub fn normalized_loglik<F: Scalar>(
    params: &Parameters<F>,
    vocab: &Vocabulary,
    bidir_text: &str,
    candidate: &str,
) -> Result<f64> {
    if candidate.trim().is_empty() {
        return Err(Error::Contract("zero-shot candidate must be non-empty".into()));
    }
    let seq = encode_free(vocab, bidir_text, candidate, params.config.max_len)?;
    let mut tape = Tape::new();
    let pn = insert_params(&mut tape, params);
    let input = SequenceInput::plain(&seq);
    let (trace, asm) =
        forward_seq(&mut tape, &pn, &params.config, &input, MaskMode::Full, &ForwardOpts::default())?;
    let h = trace.output();
    let logits = lm_logits(&mut tape, &pn, h);
    let lv = tape.value(logits);

    let bos_a = vocab.special(Special::BosA);
    let eos_a = vocab.special(Special::EosA);
    let mut sum = 0.0f64;
    let mut m = 0usize;
    for t in 1..seq.len() {
        if seq.regions[t] != Region::Ar || seq.ids[t] == bos_a || seq.ids[t] == eos_a {
            continue;
        }
        let row = lv.row(asm.prompt_len + t - 1);
        let mut mx = f64::NEG_INFINITY;
        for &v in row.iter() {
            mx = mx.max(v.to_f64());
        }
        let mut z = 0.0f64;
        for &v in row.iter() {
            z += (v.to_f64() - mx).exp();
        }
        sum += row[seq.ids[t]].to_f64() - mx - z.ln();
        m += 1;
    }
    if m == 0 {
        return Err(Error::Contract("candidate produced no content tokens".into()));
    }
    Ok(sum / m as f64)
}

/// Score every candidate against the same context and sort by score
/// descending. The sort is stable: ties keep input order.
pub fn rank_events<F: Scalar>(
    params: &Parameters<F>,
    vocab: &Vocabulary,
    bidir_text: &str,
    candidates: &[&str],
) -> Result<Vec<(String, f64)>> {
    if candidates.len() < 2 {
        return Err(Error::Contract("ranking needs at least two candidates".into()));
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for (i, c) in candidates.iter().enumerate() {
        scored.push((i, c.to_string(), normalized_loglik(params, vocab, bidir_text, c)?));
    }
    scored.sort_by(|a, b| {
        b.2.partial_cmp(&a.2).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
    });
    Ok(scored.into_iter().map(|(_, c, s)| (c, s)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::text::encode_free;

    fn vocab() -> Vocabulary {
        let corpus = [
            "alpha beta gamma delta epsilon",
            "hiking shoes trekking poles yoga knee pads",
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

    /// Zero every transformer block so the residual stream stays exactly at
    /// the input embeddings; the LM head then reads ln_f(emb + pos).
    fn passthrough_params(v: &Vocabulary) -> Parameters<f64> {
        let mut p = Parameters::<f64>::init(&cfg(v), 5).unwrap();
        for l in 0..2 {
            for w in ["wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo"] {
                p.get_mut(&format!("layer{}.attn.{}", l, w)).fill(0.0);
            }
            for w in ["w1", "b1", "w2", "b2"] {
                p.get_mut(&format!("layer{}.ffn.{}", l, w)).fill(0.0);
            }
        }
        p
    }

    #[test]
    fn uniform_lm_scores_every_candidate_at_ln_one_over_v() {
        let v = vocab();
        let mut params = Parameters::<f32>::init(&cfg(&v), 5).unwrap();
        params.get_mut("tok_emb").fill(0.0); // logits = ln_f(h) @ 0 = all equal
        let want = -(v.len() as f64).ln();
        let one = normalized_loglik(&params, &v, "alpha beta", "gamma").unwrap();
        let many = normalized_loglik(&params, &v, "alpha beta", "delta epsilon alpha").unwrap();
        assert!((one - want).abs() < 1e-6, "{} vs {}", one, want);
        assert!((many - want).abs() < 1e-6, "{} vs {}", many, want);
        assert!(
            (one - many).abs() < 1e-9,
            "normalization must cancel length exactly under uniformity"
        );
    }

    #[test]
    fn empty_candidates_are_rejected() {
        let v = vocab();
        let params = Parameters::<f32>::init(&cfg(&v), 5).unwrap();
        assert!(normalized_loglik(&params, &v, "alpha", "").is_err());
        assert!(normalized_loglik(&params, &v, "alpha", "   ").is_err());
        assert!(rank_events(&params, &v, "alpha", &["beta"]).is_err());
    }

    #[test]
    fn hand_built_lm_matches_an_independent_recomputation() {
        let v = vocab();
        let params = passthrough_params(&v);
        let emb = params.get("tok_emb").clone();
        let pos = params.get("pos_emb").clone();
        let gain = params.get("ln_f.gain").clone();
        let bias = params.get("ln_f.bias").clone();
        let d = 16usize;

        // independent oracle: plain f64 arithmetic, no tape
        let oracle = |bidir: &str, cand: &str| -> f64 {
            let seq = encode_free(&v, bidir, cand, 64).unwrap();
            let bos_a = v.special(Special::BosA);
            let eos_a = v.special(Special::EosA);
            let mut sum = 0.0;
            let mut m = 0usize;
            for t in 1..seq.len() {
                if seq.regions[t] != Region::Ar || seq.ids[t] == bos_a || seq.ids[t] == eos_a {
                    continue;
                }
                // the residual stream at the previous row is emb + pos
                let prev = t - 1;
                let mut h = vec![0.0f64; d];
                for c in 0..d {
                    h[c] = emb[(seq.ids[prev], c)] + pos[(prev + 1, c)];
                }
                let mean = h.iter().sum::<f64>() / d as f64;
                let var = h.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + 1e-5).sqrt();
                let n: Vec<f64> = (0..d)
                    .map(|c| (h[c] - mean) * inv * gain[(0, c)] + bias[(0, c)])
                    .collect();
                let logits: Vec<f64> = (0..v.len())
                    .map(|w| (0..d).map(|c| n[c] * emb[(w, c)]).sum())
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|&x| (x - mx).exp()).sum();
                sum += logits[seq.ids[t]] - mx - z.ln();
                m += 1;
            }
            sum / m as f64
        };

        for cand in ["gamma", "delta epsilon", "alpha beta alpha beta"] {
            let got = normalized_loglik(&params, &v, "hiking shoes", cand).unwrap();
            let want = oracle("hiking shoes", cand);
            assert!(
                (got - want).abs() < 1e-9,
                "candidate {:?}: {} vs oracle {}",
                cand,
                got,
                want
            );
        }
    }

    #[test]
    fn ranking_is_descending_and_stable_under_ties() {
        let v = vocab();
        let params = Parameters::<f32>::init(&cfg(&v), 5).unwrap();
        let ranked = rank_events(
            &params,
            &v,
            "hiking shoes",
            &["trekking poles", "yoga knee pads", "trekking poles"],
        )
        .unwrap();
        assert_eq!(ranked.len(), 3);
        for w in ranked.windows(2) {
            assert!(w[0].1 >= w[1].1, "scores must be descending");
        }
        // the duplicate texts tie exactly and keep their input order
        let dup: Vec<usize> =
            (0..3).filter(|&i| ranked[i].0 == "trekking poles").collect();
        assert_eq!(dup.len(), 2);
        assert_eq!(ranked[dup[0]].1, ranked[dup[1]].1, "same text, same score");

        let s1 = normalized_loglik(&params, &v, "hiking shoes", "trekking poles").unwrap();
        let s2 = normalized_loglik(&params, &v, "hiking shoes", "trekking poles").unwrap();
        assert_eq!(s1, s2, "scoring is deterministic");
    }
}
