//! Corpus BLEU (4-gram, brevity penalty) and token-level exact match.
//!
//! BLEU here is the standard single-reference corpus score: clipped n-gram
//! precisions p_1..p_4 combined geometrically, times BP = min(1,
//! e^(1 - r/c)). Orders with no hypothesis n-grams at all (corpus shorter
//! than n) are dropped from the mean; an order with zero matches but
//! nonzero candidates yields BLEU = 0.

use std::collections::HashMap;

const MAX_NGRAM: usize = 4;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU in [0, 100].
pub fn corpus_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    assert_eq!(hyps.len(), refs.len(), "hypothesis/reference count mismatch");
    if hyps.is_empty() {
        return 0.0;
    }
    let mut matches = [0usize; MAX_NGRAM];
    let mut totals = [0usize; MAX_NGRAM];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_NGRAM {
            let rc = ngram_counts(r, n);
            let hc = ngram_counts(h, n);
            for (gram, &count) in &hc {
                totals[n - 1] += count;
                if let Some(&rcount) = rc.get(gram) {
                    matches[n - 1] += count.min(rcount);
                }
            }
        }
    }
    let mut log_sum = 0.0f64;
    let mut used = 0usize;
    for n in 0..MAX_NGRAM {
        if totals[n] == 0 {
            continue;
        }
        if matches[n] == 0 {
            return 0.0;
        }
        log_sum += (matches[n] as f64 / totals[n] as f64).ln();
        used += 1;
    }
    if used == 0 || hyp_len == 0 {
        return 0.0;
    }
    let precision = (log_sum / used as f64).exp();
    let bp = if hyp_len >= ref_len { 1.0 } else { (1.0 - ref_len as f64 / hyp_len as f64).exp() };
    100.0 * bp * precision
}

/// Fraction of rows where hypothesis and reference token sequences are
/// identical.
pub fn exact_match(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    assert_eq!(hyps.len(), refs.len(), "hypothesis/reference count mismatch");
    if hyps.is_empty() {
        return 0.0;
    }
    let hits = hyps.iter().zip(refs).filter(|(h, r)| h == r).count();
    hits as f64 / hyps.len() as f64
}

pub fn tokenize_line(line: &str) -> Vec<String> {
    line.split_whitespace().map(|s| s.to_string()).collect()
}
