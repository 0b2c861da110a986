//! Brute-force oracles for the sampling/detection/denoising machinery:
//! exhaustive enumeration on vocab 5 and target length <= 3 for the
//! deterministic parts, chi-squared tests for the stochastic ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use rtdlm_core::objectives::{build_noisy_context, misclassified_positions, sample_tokens};

const VOCAB: usize = 5;

/// Enumerates every sequence of the given length over the toy vocab.
fn all_sequences(len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..len {
        let mut next = Vec::with_capacity(out.len() * VOCAB);
        for seq in &out {
            for t in 0..VOCAB {
                let mut s = seq.clone();
                s.push(t);
                next.push(s);
            }
        }
        out = next;
    }
    out
}

#[test]
fn detection_labels_match_brute_force_exhaustively() {
    for len in 1..=3usize {
        for gold in all_sequences(len) {
            for sampled in all_sequences(len) {
                // implementation rule under test
                let labels: Vec<bool> = sampled.iter().zip(&gold).map(|(&s, &g)| s != g).collect();
                // independent definition: REPLACED iff elementwise difference
                for t in 0..len {
                    let brute = sampled[t] != gold[t];
                    assert_eq!(labels[t], brute, "gold {:?} sampled {:?} pos {}", gold, sampled, t);
                }
            }
        }
    }
}

#[test]
fn misclassified_selection_matches_brute_force_exhaustively() {
    // V quantized over a grid; labels and masks enumerated exhaustively
    let v_grid = [0.1f64, 0.3, 0.5, 0.7, 0.9];
    for len in 1..=3usize {
        for label_bits in 0..(1usize << len) {
            for mask_bits in 0..(1usize << len) {
                let replaced: Vec<bool> = (0..len).map(|i| label_bits >> i & 1 == 1).collect();
                let mask: Vec<bool> = (0..len).map(|i| mask_bits >> i & 1 == 1).collect();
                for v_pick in 0..(v_grid.len().pow(len as u32)) {
                    let mut idx = v_pick;
                    let v: Vec<f64> = (0..len)
                        .map(|_| {
                            let x = v_grid[idx % v_grid.len()];
                            idx /= v_grid.len();
                            x
                        })
                        .collect();
                    let got = misclassified_positions(&v, &replaced, &mask, 0.5);
                    for t in 0..len {
                        let predicted_original = v[t] >= 0.5;
                        let is_original = !replaced[t];
                        let brute = mask[t] && (predicted_original != is_original);
                        assert_eq!(got[t], brute, "v {:?} rep {:?} mask {:?} pos {}", v, replaced, mask, t);
                    }
                }
            }
        }
    }
}

#[test]
fn noisy_context_rules_hold_exhaustively() {
    // every (gold, sampled, v) combination at length <= 3: replacement uses
    // the sample when it differs, and the resample branch never yields gold
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let probs_row = [0.2f64; VOCAB];
    for len in 1..=3usize {
        let probs: Vec<f64> = (0..len).flat_map(|_| probs_row).collect();
        for gold in all_sequences(len) {
            for sampled in all_sequences(len) {
                for v_bits in 0..(1usize << len) {
                    let v_flags: Vec<bool> = (0..len).map(|i| v_bits >> i & 1 == 1).collect();
                    let ctx =
                        build_noisy_context(&gold, &sampled, &probs, VOCAB, &v_flags, &mut rng).unwrap();
                    assert_eq!(ctx.p, v_flags.iter().filter(|&&b| b).count());
                    for t in 0..len {
                        if !v_flags[t] {
                            assert_eq!(ctx.noisy_ids[t], gold[t]);
                        } else if sampled[t] != gold[t] {
                            assert_eq!(ctx.noisy_ids[t], sampled[t]);
                        } else {
                            assert_ne!(ctx.noisy_ids[t], gold[t], "resample returned gold");
                        }
                    }
                    // write-back recovers gold exactly
                    let mut rebuilt = ctx.noisy_ids.clone();
                    for t in 0..len {
                        if v_flags[t] {
                            rebuilt[t] = gold[t];
                        }
                    }
                    assert_eq!(rebuilt, gold);
                }
            }
        }
    }
}

fn chi_squared_p_value(observed: &[usize], expected: &[f64]) -> f64 {
    let mut chi2 = 0.0f64;
    let mut dof = 0usize;
    for (o, e) in observed.iter().zip(expected) {
        if *e > 0.0 {
            chi2 += (*o as f64 - e).powi(2) / e;
            dof += 1;
        } else {
            assert_eq!(*o, 0, "mass appeared in a zero-probability bucket");
        }
    }
    assert!(dof >= 2, "need at least two buckets");
    let dist = ChiSquared::new((dof - 1) as f64).unwrap();
    1.0 - dist.cdf(chi2)
}

#[test]
fn resampling_distribution_passes_chi_squared() {
    // random base distribution over vocab 5; resample with gold excluded
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    for trial in 0..5 {
        let raw: Vec<f64> = (0..VOCAB).map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
        let gold = trial % VOCAB;

        let n = 10_000usize;
        let mut observed = vec![0usize; VOCAB];
        for _ in 0..n {
            let ctx = build_noisy_context(&[gold], &[gold], &probs, VOCAB, &[true], &mut rng).unwrap();
            observed[ctx.noisy_ids[0]] += 1;
        }
        assert_eq!(observed[gold], 0);

        let excluded_mass: f64 = probs.iter().enumerate().filter(|(j, _)| *j != gold).map(|(_, p)| p).sum();
        let expected: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(j, p)| if j == gold { 0.0 } else { p / excluded_mass * n as f64 })
            .collect();
        let p_value = chi_squared_p_value(&observed, &expected);
        assert!(p_value > 0.01, "trial {}: chi-squared p = {}", trial, p_value);
    }
}

#[test]
fn token_sampling_passes_chi_squared() {
    // categorical sampling from softmax(logits) on vocab 5
    let mut rng = ChaCha8Rng::seed_from_u64(321);
    let logits: Vec<f64> = (0..VOCAB).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = exps.iter().sum();

    let n = 10_000usize;
    let flat: Vec<f64> = (0..n).flat_map(|_| logits.clone()).collect();
    let draws = sample_tokens(&flat, VOCAB, 1.0, &mut rng);
    let mut observed = vec![0usize; VOCAB];
    for d in draws {
        observed[d] += 1;
    }
    let expected: Vec<f64> = exps.iter().map(|e| e / z * n as f64).collect();
    let p_value = chi_squared_p_value(&observed, &expected);
    assert!(p_value > 0.01, "chi-squared p = {}", p_value);
}
