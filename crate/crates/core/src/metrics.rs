//! Corpus BLEU-4, ROUGE-1/2/L, token F1 and perplexity.
//!
//! Texts are whitespace tokenized. BLEU and ROUGE compare tokens verbatim;
//! token F1 normalizes first.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::{Result, VlmError};

fn tokens(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn ngram_counts<'s, 'a>(toks: &'s [&'a str], n: usize) -> HashMap<&'s [&'a str], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram matches and candidate n-gram total for one candidate
/// against one or more references.
pub fn modified_precision(candidate: &str, references: &[&str], n: usize) -> (usize, usize) {
    let c = tokens(candidate);
    let refs: Vec<Vec<&str>> = references.iter().map(|r| tokens(r)).collect();
    let cand_counts = ngram_counts(&c, n);
    let mut max_ref: HashMap<&[&str], usize> = HashMap::new();
    for r in &refs {
        for (g, k) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(k);
        }
    }
    let clipped = cand_counts
        .iter()
        .map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (clipped, c.len().saturating_sub(n - 1))
}

/// Corpus-level BLEU-4 in `[0, 1]`: uniform weights, clipped precisions
/// pooled over the corpus, brevity penalty `exp(1 - r/c)` when `c < r`,
/// no smoothing. If the candidates are too short to contain any n-gram of
/// some order, that order is dropped from the geometric mean.
pub fn bleu(candidates: &[&str], references: &[&str]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(VlmError::Invalid("BLEU needs a nonempty candidate corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(VlmError::Invalid(format!(
            "BLEU got {} candidates and {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        c_len += tokens(c).len();
        r_len += tokens(r).len();
        for n in 1..=4 {
            let (m, t) = modified_precision(c, &[r], n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    // orders longer than every candidate have no n-grams and are left out
    let orders: Vec<usize> = (0..4).filter(|&i| total[i] > 0).collect();
    if c_len == 0 || orders.iter().any(|&i| matched[i] == 0) {
        return Ok(0.0);
    }
    let log_p: f64 =
        orders.iter().map(|&i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / orders.len() as f64;
    let bp = if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * log_p.exp())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Rouge {
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
}

fn f_measure(overlap: usize, cand: usize, reference: usize) -> f64 {
    match (cand, reference) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ if overlap == 0 => 0.0,
        _ => {
            let p = overlap as f64 / cand as f64;
            let r = overlap as f64 / reference as f64;
            2.0 * p * r / (p + r)
        }
    }
}

pub fn rouge_n_f(candidate: &str, reference: &str, n: usize) -> f64 {
    let c = tokens(candidate);
    let r = tokens(reference);
    let cc = ngram_counts(&c, n);
    let rc = ngram_counts(&r, n);
    let overlap = cc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum();
    f_measure(overlap, c.len().saturating_sub(n - 1), r.len().saturating_sub(n - 1))
}

pub fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_f(candidate: &str, reference: &str) -> f64 {
    let c = tokens(candidate);
    let r = tokens(reference);
    f_measure(lcs_len(&c, &r), c.len(), r.len())
}

/// ROUGE F-measures (no stemming, no stopword removal) averaged over pairs.
pub fn rouge(candidates: &[&str], references: &[&str]) -> Result<Rouge> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(VlmError::Invalid("ROUGE needs equally long, nonempty corpora".into()));
    }
    let mut sum = Rouge::default();
    for (c, r) in candidates.iter().zip(references) {
        sum.rouge1 += rouge_n_f(c, r, 1);
        sum.rouge2 += rouge_n_f(c, r, 2);
        sum.rouge_l += rouge_l_f(c, r);
    }
    let n = candidates.len() as f64;
    Ok(Rouge {
        rouge1: sum.rouge1 / n,
        rouge2: sum.rouge2 / n,
        rouge_l: sum.rouge_l / n,
    })
}

/// Lowercases, strips ASCII punctuation, drops the articles a/an/the.
pub fn normalize_answer(s: &str) -> Vec<String> {
    let lowered: String = s
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

/// Multiset token-overlap F1 after normalization.
pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &g {
        *counts.entry(w).or_insert(0) += 1;
    }
    let mut overlap = 0;
    for w in &p {
        if let Some(k) = counts.get_mut(w.as_str()) {
            if *k > 0 {
                *k -= 1;
                overlap += 1;
            }
        }
    }
    f_measure(overlap, p.len(), g.len())
}

/// `exp(total_nll / count)` with natural-log likelihoods.
pub fn perplexity(total_nll: f64, count: usize) -> Result<f64> {
    if count == 0 {
        return Err(VlmError::Invalid("perplexity over zero tokens".into()));
    }
    Ok((total_nll / count as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_corpora_score_one() {
        let c = ["a b c d e", "x y z w"];
        assert_eq!(bleu(&c, &c).unwrap(), 1.0);
        let r = rouge(&c, &c).unwrap();
        assert_eq!((r.rouge1, r.rouge2, r.rouge_l), (1.0, 1.0, 1.0));
        assert_eq!(token_f1("Dennis Farina", "Dennis Farina"), 1.0);
    }

    #[test]
    fn clipped_precision() {
        let (m, t) = modified_precision("the the the the the the the", &["the cat is on the mat"], 1);
        assert_eq!((m, t), (2, 7));
    }

    #[test]
    fn brevity_penalty() {
        let b = bleu(&["a b c d"], &["a b c d e f g h"]).unwrap();
        assert!((b - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn rouge_l_fixture() {
        assert!((rouge_l_f("police killed the gunman", "police kill the gunman") - 0.75).abs() < 1e-12);
        let r = rouge(&["a b"], &["c d"]).unwrap();
        assert_eq!((r.rouge1, r.rouge2, r.rouge_l), (0.0, 0.0, 0.0));
    }

    #[test]
    fn f1_fixtures() {
        assert_eq!(token_f1("the farmer", "farmer"), 1.0);
        assert!((token_f1("x b c", "b d") - 0.4).abs() < 1e-12);
        // "a" is an article and is removed before counting
        assert!((token_f1("a b c", "b d") - 0.5).abs() < 1e-12);
        assert_eq!(token_f1("", ""), 1.0);
        assert_eq!(token_f1("x", "the"), 0.0);
    }

    #[test]
    fn perplexity_of_uniform() {
        let v = 512f64;
        assert!((perplexity(10.0 * v.ln(), 10).unwrap() - 512.0).abs() < 1e-9);
        assert!(perplexity(0.0, 0).is_err());
    }

    #[test]
    fn bleu_errors_and_zero_precision() {
        assert!(bleu(&[], &[]).is_err());
        assert!(bleu(&["a"], &["a", "b"]).is_err());
        assert_eq!(bleu(&["a b c"], &["a b c"]).unwrap(), 1.0);
        assert_eq!(bleu(&["a b c d"], &["a b x d"]).unwrap(), 0.0);
    }
}
