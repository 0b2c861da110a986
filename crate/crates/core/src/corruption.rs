//! Span corruption: raw token sequences -> (masked source, span target)
//! pairs, and batch assembly.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Vocab, BOS, EOS, MASK, PAD};

/// Hard cap on sampled span lengths.
pub const MAX_SPAN: usize = 10;

/// A contiguous masked region; `end` is inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Sorted, non-overlapping spans over one sequence.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SpanSet {
    pub spans: Vec<Span>,
}

impl SpanSet {
    pub fn total_masked(&self) -> usize {
        self.spans.iter().map(|s| s.len()).sum()
    }
}

/// One pre-training instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedPair {
    /// Original tokens with every masked position replaced by [MASK].
    pub src_ids: Vec<usize>,
    /// Concatenated masked-span tokens, terminated by [EOS].
    pub trg_ids: Vec<usize>,
    /// Original sentence index of each target position (excludes the [EOS]).
    pub span_map: Vec<usize>,
    /// The uncorrupted sequence.
    pub original_ids: Vec<usize>,
}

/// Padded batch. Matrices are row-major `[rows, len]`; pad masks are true
/// at real (non-[PAD]) positions.
#[derive(Debug, Clone)]
pub struct PretrainBatch {
    pub rows: usize,
    pub src_len: usize,
    pub trg_len: usize,
    pub src: Vec<usize>,
    pub src_mask: Vec<bool>,
    /// [BOS]-prefixed, shifted target (decoder input).
    pub trg_input: Vec<usize>,
    /// Gold target (decoder output), ends with [EOS] per row.
    pub trg_output: Vec<usize>,
    pub trg_mask: Vec<bool>,
    pub span_maps: Vec<Vec<usize>>,
    pub lang_ids: Vec<usize>,
}

impl PretrainBatch {
    pub fn src_row(&self, r: usize) -> &[usize] {
        &self.src[r * self.src_len..(r + 1) * self.src_len]
    }

    pub fn trg_output_row(&self, r: usize) -> &[usize] {
        &self.trg_output[r * self.trg_len..(r + 1) * self.trg_len]
    }

    pub fn non_pad_tokens(&self) -> usize {
        self.src_mask.iter().filter(|&&m| m).count() + self.trg_mask.iter().filter(|&&m| m).count()
    }
}

// ---------------------------------------------------------------------------
// Span sampling
// ---------------------------------------------------------------------------

fn geometric_len<R: Rng>(mean_span: f64, cap: usize, rng: &mut R) -> usize {
    if mean_span <= 1.0 {
        return 1;
    }
    let p = 1.0 / mean_span;
    let u: f64 = rng.gen();
    let k = 1 + ((1.0 - u).ln() / (1.0 - p).ln()).floor() as usize;
    k.clamp(1, cap)
}

/// Samples a set of masked spans covering exactly `round(mask_ratio * n)`
/// tokens (at least one when `mask_ratio > 0`). Span lengths come from a
/// geometric with the given mean, clipped to [1, MAX_SPAN], then repaired
/// so the masked-token budget is met exactly; placement is uniform over
/// non-overlapping layouts.
pub fn sample_spans<R: Rng>(n: usize, mask_ratio: f64, mean_span: f64, rng: &mut R) -> SpanSet {
    assert!(n >= 1, "sequence length must be >= 1");
    assert!((0.0..1.0).contains(&mask_ratio), "mask_ratio must be in [0, 1)");
    assert!(mean_span >= 1.0, "mean_span must be >= 1");
    if mask_ratio == 0.0 {
        return SpanSet::default();
    }
    let budget = ((mask_ratio * n as f64).round() as usize).clamp(1, n);
    let k_target = (budget as f64 / mean_span).round() as usize;
    let k_min = budget.div_ceil(MAX_SPAN);
    let k = k_target.clamp(k_min.max(1), budget);

    let mut lens: Vec<usize> = (0..k).map(|_| geometric_len(mean_span, MAX_SPAN.min(budget), rng)).collect();
    let mut total: usize = lens.iter().sum();
    while total > budget {
        let i = (0..k).max_by_key(|&i| lens[i]).unwrap();
        lens[i] -= 1;
        total -= 1;
    }
    while total < budget {
        let i = (0..k).filter(|&i| lens[i] < MAX_SPAN).min_by_key(|&i| lens[i]).unwrap();
        lens[i] += 1;
        total += 1;
    }
    // positional shuffle so repair never biases a fixed slot
    for i in (1..lens.len()).rev() {
        let j = rng.gen_range(0..=i);
        lens.swap(i, j);
    }

    // uniform non-overlapping placement: sorted gap offsets
    let free = n - budget;
    let mut gaps: Vec<usize> = (0..k).map(|_| rng.gen_range(0..=free)).collect();
    gaps.sort_unstable();
    let mut spans = Vec::with_capacity(k);
    let mut consumed = 0usize;
    for (i, &len) in lens.iter().enumerate() {
        let start = gaps[i] + consumed;
        spans.push(Span { start, end: start + len - 1 });
        consumed += len;
    }
    SpanSet { spans }
}

// ---------------------------------------------------------------------------
// Masking
// ---------------------------------------------------------------------------

/// Applies the span set: per-token [MASK] substitution in the source, the
/// in-order span tokens + [EOS] as the target.
pub fn apply_mask(original_ids: &[usize], spans: &SpanSet, _vocab: &Vocab) -> Result<MaskedPair> {
    let n = original_ids.len();
    let mut last_end: Option<usize> = None;
    for s in &spans.spans {
        if s.start > s.end || s.end >= n {
            return Err(Error::Data(format!("span {}..={} out of bounds for length {}", s.start, s.end, n)));
        }
        if let Some(prev) = last_end {
            if s.start <= prev {
                return Err(Error::Data(format!("span {}..={} overlaps or is unsorted", s.start, s.end)));
            }
        }
        last_end = Some(s.end);
    }
    let mut src_ids = original_ids.to_vec();
    let mut trg_ids = Vec::new();
    let mut span_map = Vec::new();
    for s in &spans.spans {
        for pos in s.start..=s.end {
            src_ids[pos] = MASK;
            trg_ids.push(original_ids[pos]);
            span_map.push(pos);
        }
    }
    trg_ids.push(EOS);
    Ok(MaskedPair { src_ids, trg_ids, span_map, original_ids: original_ids.to_vec() })
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

/// Pads masked pairs into one batch. Rows are sorted by source length
/// (longest first, stable). Errors if any row exceeds `max_positions`.
pub fn make_batch(pairs: &[MaskedPair], max_positions: usize, lang_ids: &[usize]) -> Result<PretrainBatch> {
    if pairs.is_empty() {
        return Err(Error::Data("make_batch: no pairs".into()));
    }
    if lang_ids.len() != pairs.len() {
        return Err(Error::Data(format!(
            "make_batch: {} lang ids for {} pairs",
            lang_ids.len(),
            pairs.len()
        )));
    }
    for (i, p) in pairs.iter().enumerate() {
        if p.src_ids.len() > max_positions {
            return Err(Error::Data(format!(
                "pair {}: source length {} exceeds max positions {}",
                i,
                p.src_ids.len(),
                max_positions
            )));
        }
        if p.trg_ids.len() > max_positions {
            return Err(Error::Data(format!(
                "pair {}: target length {} exceeds max positions {}",
                i,
                p.trg_ids.len(),
                max_positions
            )));
        }
        if p.src_ids.is_empty() {
            return Err(Error::Data(format!("pair {}: empty source", i)));
        }
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(pairs[i].src_ids.len()));

    let rows = pairs.len();
    let src_len = pairs.iter().map(|p| p.src_ids.len()).max().unwrap();
    let trg_len = pairs.iter().map(|p| p.trg_ids.len()).max().unwrap();
    let mut batch = PretrainBatch {
        rows,
        src_len,
        trg_len,
        src: vec![PAD; rows * src_len],
        src_mask: vec![false; rows * src_len],
        trg_input: vec![PAD; rows * trg_len],
        trg_output: vec![PAD; rows * trg_len],
        trg_mask: vec![false; rows * trg_len],
        span_maps: Vec::with_capacity(rows),
        lang_ids: Vec::with_capacity(rows),
    };
    for (r, &i) in order.iter().enumerate() {
        let p = &pairs[i];
        for (j, &tok) in p.src_ids.iter().enumerate() {
            batch.src[r * src_len + j] = tok;
            batch.src_mask[r * src_len + j] = true;
        }
        batch.trg_input[r * trg_len] = BOS;
        for (j, &tok) in p.trg_ids.iter().enumerate() {
            batch.trg_output[r * trg_len + j] = tok;
            batch.trg_mask[r * trg_len + j] = true;
            if j + 1 < trg_len {
                batch.trg_input[r * trg_len + j + 1] = tok;
            }
        }
        batch.span_maps.push(p.span_map.clone());
        batch.lang_ids.push(lang_ids[i]);
    }
    Ok(batch)
}

/// Builds a batch of uncorrupted parallel pairs (fine-tuning): the source
/// is used as-is and the target gets the [EOS] terminator.
pub fn make_pair_batch(src_rows: &[Vec<usize>], trg_rows: &[Vec<usize>], max_positions: usize) -> Result<PretrainBatch> {
    if src_rows.len() != trg_rows.len() {
        return Err(Error::Data(format!(
            "make_pair_batch: {} source rows vs {} target rows",
            src_rows.len(),
            trg_rows.len()
        )));
    }
    let pairs: Vec<MaskedPair> = src_rows
        .iter()
        .zip(trg_rows)
        .map(|(s, t)| {
            let mut trg_ids = t.clone();
            trg_ids.push(EOS);
            MaskedPair {
                src_ids: s.clone(),
                trg_ids,
                span_map: (0..t.len()).collect(),
                original_ids: s.clone(),
            }
        })
        .collect();
    let lang_ids = vec![0; pairs.len()];
    make_batch(&pairs, max_positions, &lang_ids)
}

// ---------------------------------------------------------------------------
// Corpus IO
// ---------------------------------------------------------------------------

/// One entry of the multi-corpus manifest (JSON list).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub language_tag: String,
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
    if entries.is_empty() {
        return Err(Error::Data(format!("{}: empty corpus manifest", path.display())));
    }
    Ok(entries)
}

/// Non-empty lines of a UTF-8, one-sentence-per-line corpus.
pub fn read_corpus_lines(path: &Path) -> Result<Vec<String>> {
    let f = std::fs::File::open(path)?;
    let mut lines = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            lines.push(line);
        }
    }
    if lines.is_empty() {
        return Err(Error::Data(format!("{}: corpus has no non-empty lines", path.display())));
    }
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocab {
        Vocab::build(["the gardener watered the flowers"], 1, 100, &[]).unwrap()
    }

    #[test]
    fn zero_ratio_gives_empty_spanset() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_spans(50, 0.0, 3.0, &mut rng);
        assert!(s.spans.is_empty());
    }

    #[test]
    fn length_one_sequence_gets_one_single_token_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_spans(1, 0.15, 3.0, &mut rng);
        assert_eq!(s.spans, vec![Span { start: 0, end: 0 }]);
    }

    #[test]
    fn budget_met_exactly_and_spans_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [2usize, 5, 17, 100, 255] {
            let s = sample_spans(n, 0.15, 3.0, &mut rng);
            let budget = ((0.15 * n as f64).round() as usize).clamp(1, n);
            assert_eq!(s.total_masked(), budget, "n={}", n);
            for w in s.spans.windows(2) {
                assert!(w[0].end < w[1].start, "unsorted/overlapping spans at n={}", n);
            }
            assert!(s.spans.iter().all(|sp| sp.end < n));
        }
    }

    #[test]
    fn masked_fraction_and_span_mean_statistics() {
        // smaller copy of the acceptance run
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut masked = 0usize;
        let mut spans = 0usize;
        let trials = 1000;
        for _ in 0..trials {
            let s = sample_spans(100, 0.15, 3.0, &mut rng);
            masked += s.total_masked();
            spans += s.spans.len();
        }
        let frac = masked as f64 / (100.0 * trials as f64);
        let mean_len = masked as f64 / spans as f64;
        assert!((frac - 0.15).abs() < 0.01, "masked fraction {}", frac);
        assert!((mean_len - 3.0).abs() < 0.3, "mean span length {}", mean_len);
    }

    #[test]
    fn same_seed_same_spans() {
        let a = sample_spans(64, 0.15, 3.0, &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_spans(64, 0.15, 3.0, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn figure_walkthrough_masking() {
        let v = vocab();
        let ids = v.encode("the gardener watered the flowers");
        let spans = SpanSet { spans: vec![Span { start: 1, end: 2 }] };
        let pair = apply_mask(&ids, &spans, &v).unwrap();
        assert_eq!(v.decode(&pair.src_ids).unwrap(), "the [MASK] [MASK] the flowers");
        assert_eq!(v.decode(&pair.trg_ids).unwrap(), "gardener watered [EOS]");
        assert_eq!(pair.span_map, vec![1, 2]);
    }

    #[test]
    fn empty_spanset_targets_only_eos() {
        let v = vocab();
        let ids = v.encode("the gardener");
        let pair = apply_mask(&ids, &SpanSet::default(), &v).unwrap();
        assert_eq!(pair.src_ids, ids);
        assert_eq!(pair.trg_ids, vec![EOS]);
        assert!(pair.span_map.is_empty());
    }

    #[test]
    fn out_of_bounds_span_errors() {
        let v = vocab();
        let ids = v.encode("the gardener");
        let spans = SpanSet { spans: vec![Span { start: 1, end: 5 }] };
        assert!(apply_mask(&ids, &spans, &v).is_err());
    }

    #[test]
    fn writeback_reconstruction_invariant() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.gen_range(1..40);
            let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(5..v.size())).collect();
            let spans = sample_spans(n, 0.3, 2.5, &mut rng);
            let pair = apply_mask(&ids, &spans, &v).unwrap();
            assert_eq!(pair.src_ids.len(), pair.original_ids.len());
            assert_eq!(*pair.trg_ids.last().unwrap(), EOS);
            assert!(!pair.trg_ids[..pair.trg_ids.len() - 1].contains(&MASK));
            // strictly increasing map
            for w in pair.span_map.windows(2) {
                assert!(w[0] < w[1]);
            }
            // write-back reproduces the original
            let mut rebuilt = pair.src_ids.clone();
            for (t, &orig_pos) in pair.span_map.iter().enumerate() {
                rebuilt[orig_pos] = pair.trg_ids[t];
            }
            assert_eq!(rebuilt, pair.original_ids);
        }
    }

    #[test]
    fn batch_padding_and_shift() {
        let v = vocab();
        let p1 = apply_mask(&v.encode("the gardener watered"), &SpanSet { spans: vec![Span { start: 0, end: 0 }] }, &v).unwrap();
        let p2 = apply_mask(
            &v.encode("the gardener watered the flowers"),
            &SpanSet { spans: vec![Span { start: 2, end: 3 }] },
            &v,
        )
        .unwrap();
        let batch = make_batch(&[p1.clone(), p2.clone()], 64, &[0, 0]).unwrap();
        assert_eq!(batch.rows, 2);
        assert_eq!(batch.src_len, 5); // longest row first
        assert_eq!(batch.src_row(0), p2.src_ids.as_slice());
        // row 1 padded with two [PAD]
        assert_eq!(&batch.src_row(1)[..3], p1.src_ids.as_slice());
        assert_eq!(&batch.src_row(1)[3..], &[PAD, PAD]);
        // decoder input is [BOS] + trg[..-1]
        assert_eq!(batch.trg_input[0], BOS);
        assert_eq!(batch.trg_input[1], batch.trg_output[0]);
        // non-pad count bookkeeping
        let expect = p1.src_ids.len() + p2.src_ids.len() + p1.trg_ids.len() + p2.trg_ids.len();
        assert_eq!(batch.non_pad_tokens(), expect);
    }

    #[test]
    fn single_pair_batch_all_real() {
        let v = vocab();
        let p = apply_mask(&v.encode("the gardener"), &SpanSet { spans: vec![Span { start: 1, end: 1 }] }, &v).unwrap();
        let batch = make_batch(&[p], 64, &[0]).unwrap();
        assert!(batch.src_mask.iter().all(|&m| m));
        assert!(batch.trg_mask.iter().all(|&m| m));
    }

    #[test]
    fn overlong_pair_errors_with_row() {
        let v = vocab();
        let ids: Vec<usize> = vec![5; 20];
        let pair = apply_mask(&ids, &SpanSet::default(), &v).unwrap();
        let err = make_batch(&[pair], 10, &[0]).unwrap_err().to_string();
        assert!(err.contains("pair 0"), "{}", err);
    }
}
