//! Generator-only autoregressive decoding. The discriminator decoder is
//! never touched here: inference keeps {encoder, generator} only.

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::Result;
use crate::model::forward::{self, ModelGraph};
use crate::model::ModelParams;
use crate::objectives::shift_right;
use crate::tensor::Scalar;
use crate::vocab::EOS;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_len: usize,
    /// GNMT-style score normalization: sum log-prob / len^alpha.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { beam_size: 4, max_len: 64, length_penalty: 1.0 }
    }
}

#[derive(Debug, Clone)]
struct Beam {
    tokens: Vec<usize>,
    logprob: f64,
}

fn normalized(logprob: f64, len: usize, alpha: f64) -> f64 {
    logprob / (len.max(1) as f64).powf(alpha)
}

/// No-dropout copy for decoding.
fn frozen_params<T: Scalar>(params: &ModelParams<T>) -> ModelParams<T> {
    let mut p = params.clone();
    p.config.dropout = 0.0;
    p
}

/// Runs the generator decoder over a batch of equal-length prefixes and
/// returns the log-probabilities of the final position, one row per prefix.
fn last_position_logprobs<T: Scalar>(
    params: &ModelParams<T>,
    src: &[usize],
    prefixes: &[Vec<usize>],
) -> Result<Vec<Vec<f64>>> {
    let rows = prefixes.len();
    let plen = prefixes[0].len();
    let in_len = plen + 1; // [BOS] + prefix
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0); // dropout is off; never drawn
    let mut g: Graph<T> = Graph::new();
    let model = ModelGraph::insert_frozen(&mut g, params);
    let src_mask = vec![true; src.len()];
    let src_batch: Vec<usize> = (0..rows).flat_map(|_| src.iter().copied()).collect();
    let src_mask_batch: Vec<bool> = (0..rows).flat_map(|_| src_mask.iter().copied()).collect();
    let h_enc = forward::encode(&mut g, &model, params, &src_batch, &src_mask_batch, rows, src.len(), &mut rng)?;

    let mut trg_input = Vec::with_capacity(rows * in_len);
    for p in prefixes {
        trg_input.push(crate::vocab::BOS);
        trg_input.extend_from_slice(p);
    }
    let trg_mask = vec![true; rows * in_len];
    let logits =
        forward::generator_decode(&mut g, &model, params, h_enc, &src_mask_batch, &trg_input, &trg_mask, &mut rng)?;
    let lsm = g.log_softmax(logits, 2)?;
    let vocab = params.config.vocab_size;
    let data = g.data(lsm);
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let base = (r * in_len + in_len - 1) * vocab;
        out.push(data[base..base + vocab].iter().map(|v| v.to_f64()).collect());
    }
    Ok(out)
}

use rand::SeedableRng;

/// Beam-search (or greedy, beam_size = 1) generation from a source
/// sequence. Starts at [BOS], stops on [EOS] or `max_len`. Deterministic:
/// no RNG is consulted.
pub fn generate<T: Scalar>(src_ids: &[usize], params: &ModelParams<T>, cfg: &DecodeConfig) -> Result<Vec<usize>> {
    assert!(cfg.beam_size >= 1, "beam_size must be >= 1");
    assert!(cfg.max_len >= 1, "max_len must be >= 1");
    let params = frozen_params(params);
    let alpha = cfg.length_penalty;

    let mut active: Vec<Beam> = vec![Beam { tokens: vec![], logprob: 0.0 }];
    let mut finished: Vec<(f64, Vec<usize>)> = Vec::new();

    for _step in 0..cfg.max_len {
        if active.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<usize>> = active.iter().map(|b| b.tokens.clone()).collect();
        let logprobs = last_position_logprobs(&params, src_ids, &prefixes)?;
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new(); // (logprob, beam, token)
        for (bi, row) in logprobs.iter().enumerate() {
            for (tok, &lp) in row.iter().enumerate() {
                candidates.push((active[bi].logprob + lp, bi, tok));
            }
        }
        // deterministic order: score desc, then beam, then token
        candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next: Vec<Beam> = Vec::with_capacity(cfg.beam_size);
        for (lp, bi, tok) in candidates {
            if next.len() >= cfg.beam_size && finished.len() >= cfg.beam_size {
                break;
            }
            let mut tokens = active[bi].tokens.clone();
            tokens.push(tok);
            if tok == EOS {
                if finished.len() < cfg.beam_size {
                    finished.push((normalized(lp, tokens.len(), alpha), tokens));
                }
            } else if next.len() < cfg.beam_size {
                next.push(Beam { tokens, logprob: lp });
            }
        }
        active = next;
        // all remaining beams already beaten by a finished hypothesis
        if !finished.is_empty() && active.is_empty() {
            break;
        }
    }
    for b in active {
        let len = b.tokens.len();
        finished.push((normalized(b.logprob, len, alpha), b.tokens));
    }
    finished.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(finished.into_iter().next().map(|(_, t)| t).unwrap_or_default())
}

/// Teacher-forced total log-probability of `trg_ids` (which must include
/// its final [EOS]) under the generator.
pub fn score<T: Scalar>(src_ids: &[usize], trg_ids: &[usize], params: &ModelParams<T>) -> Result<f64> {
    let params = frozen_params(params);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut g: Graph<T> = Graph::new();
    let model = ModelGraph::insert_frozen(&mut g, &params);
    let src_mask = vec![true; src_ids.len()];
    let h_enc = forward::encode(&mut g, &model, &params, src_ids, &src_mask, 1, src_ids.len(), &mut rng)?;
    let len = trg_ids.len();
    let trg_input = shift_right(trg_ids, 1, len);
    let trg_mask = vec![true; len];
    let logits = forward::generator_decode(&mut g, &model, &params, h_enc, &src_mask, &trg_input, &trg_mask, &mut rng)?;
    let lsm = g.log_softmax(logits, 2)?;
    let vocab = params.config.vocab_size;
    let data = g.data(lsm);
    let mut total = 0.0f64;
    for (t, &tok) in trg_ids.iter().enumerate() {
        total += data[t * vocab + tok].to_f64();
    }
    Ok(total)
}
