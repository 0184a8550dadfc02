//! Ranking and generation metrics. AUC uses the Mann–Whitney rank statistic
//! with midranks, so ties are handled exactly rather than by perturbation;
//! BLEU is corpus-level with the standard brevity penalty; Distinct-n counts
//! unique n-grams across the whole generated set. HitRate@K lives with the
//! retrieval index and perplexity with the LM objective.

use crate::error::{Error, Result};
use crate::text::tokenize;

// ─── AUC ───

/// Area under the ROC curve for (score, binary label) observations, computed
/// as the normalized Mann–Whitney U with midranks on tied scores.
pub fn auc(scored: &[(f64, u8)]) -> Result<f64> {
    if scored.is_empty() {
        return Err(Error::Contract("auc over zero observations is undefined".into()));
    }
    if scored.iter().any(|(s, _)| !s.is_finite()) {
        return Err(Error::Numeric("auc received a non-finite score".into()));
    }
    let n_pos = scored.iter().filter(|(_, l)| *l == 1).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Contract("auc needs both classes present".into()));
    }

    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].0.partial_cmp(&scored[b].0).unwrap());

    // walk tie groups, assigning each member the average rank of the group
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scored[order[j]].0 == scored[order[i]].0 {
            j += 1;
        }
        // ranks are 1-based: group spans ranks i+1 ..= j
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            if scored[k].1 == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// AUC over matched pairs (positive score, negative score): the fraction of
/// pairs won by the positive, ties counting half. All-tied input is exactly
/// one half.
pub fn pairwise_auc(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("pairwise auc over zero pairs is undefined".into()));
    }
    let mut wins = 0.0f64;
    for &(pos, neg) in pairs {
        if !pos.is_finite() || !neg.is_finite() {
            return Err(Error::Numeric("pairwise auc received a non-finite score".into()));
        }
        if pos > neg {
            wins += 1.0;
        } else if pos == neg {
            wins += 0.5;
        }
    }
    Ok(wins / pairs.len() as f64)
}

// ─── BLEU ───

fn ngrams(tokens: &[String], n: usize) -> Vec<&[String]> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| &tokens[i..i + n]).collect()
}

fn counted<'a>(grams: &[&'a [String]]) -> indexmap::IndexMap<&'a [String], usize> {
    let mut map = indexmap::IndexMap::new();
    for &g in grams {
        *map.entry(g).or_insert(0) += 1;
    }
    map
}

/// Corpus-level BLEU-n: geometric mean of clipped 1..n-gram precisions times
/// the brevity penalty. Any order with zero matches sends the score to zero
/// (no smoothing). Candidates and references are aligned by position.
pub fn bleu_n(candidates: &[&str], references: &[&str], n: usize) -> Result<f64> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "bleu needs aligned non-empty inputs, got {} vs {}",
            candidates.len(),
            references.len()
        )));
    }
    if n == 0 || n > 4 {
        return Err(Error::Config("bleu order must be in 1..=4".into()));
    }
    let cand_toks: Vec<Vec<String>> = candidates.iter().map(|c| tokenize(c)).collect();
    let ref_toks: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    let c_len: usize = cand_toks.iter().map(|t| t.len()).sum();
    let r_len: usize = ref_toks.iter().map(|t| t.len()).sum();
    if c_len == 0 || r_len == 0 {
        return Err(Error::Contract("bleu over empty token streams is undefined".into()));
    }

    let mut log_sum = 0.0f64;
    for k in 1..=n {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (ct, rt) in cand_toks.iter().zip(&ref_toks) {
            let cg = ngrams(ct, k);
            total += cg.len();
            let ref_counts = counted(&ngrams(rt, k));
            for (gram, count) in counted(&cg) {
                matched += count.min(*ref_counts.get(gram).unwrap_or(&0));
            }
        }
        if total == 0 || matched == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let bp = if c_len >= r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    Ok(bp * (log_sum / n as f64).exp())
}

// ─── Distinct ───

/// Unique n-grams over total n-grams across the whole generated set. Texts
/// shorter than n contribute nothing; a set with no n-grams at all errors.
pub fn distinct_n(texts: &[&str], n: usize) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::Contract("distinct-n over zero texts is undefined".into()));
    }
    if n == 0 {
        return Err(Error::Config("distinct order must be positive".into()));
    }
    let mut total = 0usize;
    let mut unique: std::collections::BTreeSet<Vec<String>> = std::collections::BTreeSet::new();
    for t in texts {
        let toks = tokenize(t);
        for g in ngrams(&toks, n) {
            total += 1;
            unique.insert(g.to_vec());
        }
    }
    if total == 0 {
        return Err(Error::Contract(format!("no {}-grams to count", n)));
    }
    Ok(unique.len() as f64 / total as f64)
}
