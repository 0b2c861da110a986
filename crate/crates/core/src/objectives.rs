//! Training objectives: masked-span generation (L_G), replaced token
//! detection (L_D), replaced token denoising (L_DG), and the combined
//! pre-training / fine-tuning losses.
//!
//! Sampling is one-pass under teacher forcing: the generator's per-position
//! distributions are read as values, so no gradient flows through the draw.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::corruption::PretrainBatch;
use crate::error::{Error, Result};
use crate::model::forward::{self, ModelGraph};
use crate::model::ModelParams;
use crate::tensor::Scalar;
use crate::vocab::{EOS, PAD};

/// Which decoder runs the denoising pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DenoiseDecoder {
    #[default]
    Generator,
    Discriminator,
}

/// Which target positions get replaced when building the noisy context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReplacementPolicy {
    /// Only positions the discriminator got wrong (the default reading).
    #[default]
    MisclassifiedOnly,
    /// Every judged position.
    AllSampled,
}

#[derive(Debug, Clone)]
pub struct ObjectiveConfig {
    /// Weight on the detection loss in the combined objective.
    pub lambda: f64,
    /// Label smoothing for the generator cross entropy.
    pub smoothing: f64,
    pub use_denoising: bool,
    pub denoise_decoder: DenoiseDecoder,
    pub replacement: ReplacementPolicy,
    /// Detection decision threshold on V.
    pub threshold: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda: 10.0,
            smoothing: 0.0,
            use_denoising: true,
            denoise_decoder: DenoiseDecoder::default(),
            replacement: ReplacementPolicy::default(),
            threshold: 0.5,
        }
    }
}

/// A sampled target sentence with its detection labels and the detached
/// generator distributions used for resampling.
#[derive(Debug, Clone)]
pub struct SampledTarget<T: Scalar> {
    pub sampled_ids: Vec<usize>,
    pub gold_ids: Vec<usize>,
    /// REPLACED(t) <=> sampled_t != gold_t.
    pub replaced: Vec<bool>,
    /// Judged positions: real tokens that are not the [EOS] anchor.
    pub detect_mask: Vec<bool>,
    /// Row-major [positions, vocab] softmax of the generator logits.
    pub probs: Vec<T>,
    pub vocab_size: usize,
}

/// The noisy previous context for denoising.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoisyContext {
    pub noisy_ids: Vec<usize>,
    /// Replacement sites; noisy differs from gold exactly here.
    pub v_flags: Vec<bool>,
    /// |v|
    pub p: usize,
}

/// Discrete choices of one step, reusable to freeze the pipeline (gradient
/// checking needs a deterministic, perturbation-stable loss).
#[derive(Debug, Clone)]
pub struct FrozenChoices {
    pub sampled_ids: Vec<usize>,
    pub v_flags: Vec<bool>,
    pub noisy_ids: Vec<usize>,
}

/// Loss breakdown and detection diagnostics for one batch.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainStepOutput {
    pub step: u64,
    #[serde(rename = "L_G")]
    pub l_g: f64,
    #[serde(rename = "L_D")]
    pub l_d: f64,
    #[serde(rename = "L_DG")]
    pub l_dg: f64,
    pub combined: f64,
    pub det_acc: f64,
    pub replaced_rate: f64,
    pub p: usize,
}

/// One recorded step: the graph (ready for backward), the registered model,
/// the scalar loss node, and everything a caller may want to inspect.
pub struct StepOutcome<T: Scalar> {
    pub graph: Graph<T>,
    pub model: ModelGraph,
    pub loss: NodeId,
    pub gen_logits: Option<NodeId>,
    pub h_enc: NodeId,
    pub v_node: Option<NodeId>,
    pub sampled: Option<SampledTarget<T>>,
    pub noisy: Option<NoisyContext>,
    pub choices: Option<FrozenChoices>,
    pub output: TrainStepOutput,
}

// ---------------------------------------------------------------------------
// Individual objectives
// ---------------------------------------------------------------------------

/// Token-mean label-smoothed cross entropy over non-pad positions.
/// `logits` is [rows, len, vocab]; `gold`/`mask` are flat [rows*len].
pub fn generator_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: NodeId,
    gold: &[usize],
    mask: &[bool],
    smoothing: f64,
) -> Result<NodeId> {
    let shape = g.shape(logits).to_vec();
    let vocab = shape[2];
    let n = shape[0] * shape[1];
    let flat = g.reshape(logits, vec![n, vocab])?;
    // pad rows carry PAD as the target; PAD is the ignore index
    debug_assert!(gold.iter().zip(mask).all(|(&t, &m)| m || t == PAD));
    g.cross_entropy(flat, gold, smoothing, Some(PAD))
}

/// Independent categorical draw per row of `logits` ([n, vocab] flattened),
/// after softmax at the given temperature. Returns one id per row.
pub fn sample_tokens<T: Scalar, R: Rng>(
    logits: &[T],
    vocab_size: usize,
    temperature: f64,
    rng: &mut R,
) -> Vec<usize> {
    assert!(temperature > 0.0, "temperature must be positive");
    let n = logits.len() / vocab_size;
    let mut out = Vec::with_capacity(n);
    let mut probs = vec![0.0f64; vocab_size];
    for r in 0..n {
        let row = &logits[r * vocab_size..(r + 1) * vocab_size];
        let mut max = f64::NEG_INFINITY;
        for &x in row {
            let v = x.to_f64() / temperature;
            if v > max {
                max = v;
            }
        }
        let mut sum = 0.0f64;
        for (j, &x) in row.iter().enumerate() {
            let e = (x.to_f64() / temperature - max).exp();
            probs[j] = e;
            sum += e;
        }
        let u: f64 = rng.gen::<f64>() * sum;
        let mut acc = 0.0f64;
        let mut pick = vocab_size - 1;
        for (j, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = j;
                break;
            }
        }
        out.push(pick);
    }
    out
}

/// Softmax rows of detached logits (the "distribution handle" kept for
/// resampling).
pub fn softmax_rows<T: Scalar>(logits: &[T], vocab_size: usize) -> Vec<T> {
    let mut probs = logits.to_vec();
    let n = logits.len() / vocab_size;
    for r in 0..n {
        crate::autograd::kernels::softmax_lane(&mut probs, r * vocab_size, 1, vocab_size);
    }
    probs
}

/// Builds the sampled target for a batch: samples every real position
/// (including the [EOS] slot), keeps [PAD] at pads, derives REPLACED labels
/// and the judged-position mask ([EOS]/pad excluded).
pub fn sample_target<T: Scalar, R: Rng>(
    gen_logits: &[T],
    vocab_size: usize,
    gold: &[usize],
    trg_mask: &[bool],
    rng: &mut R,
) -> SampledTarget<T> {
    let drawn = sample_tokens(gen_logits, vocab_size, 1.0, rng);
    let sampled_ids: Vec<usize> = drawn
        .iter()
        .zip(trg_mask)
        .zip(gold)
        .map(|((&s, &real), &gt)| if real { s } else { gt })
        .collect();
    let replaced: Vec<bool> = sampled_ids.iter().zip(gold).map(|(&s, &g)| s != g).collect();
    let detect_mask: Vec<bool> = trg_mask
        .iter()
        .zip(gold)
        .map(|(&real, &gt)| real && gt != EOS)
        .collect();
    SampledTarget {
        sampled_ids,
        gold_ids: gold.to_vec(),
        replaced,
        detect_mask,
        probs: softmax_rows(gen_logits, vocab_size),
        vocab_size,
    }
}

/// Token-mean BCE of the detection head: V is P(ORIGINAL), so the positive
/// label is "not replaced".
pub fn detection_loss<T: Scalar>(
    g: &mut Graph<T>,
    v: NodeId,
    replaced: &[bool],
    detect_mask: &[bool],
) -> Result<NodeId> {
    let original: Vec<bool> = replaced.iter().map(|&r| !r).collect();
    g.binary_cross_entropy(v, &original, detect_mask)
}

/// Positions where the thresholded prediction disagrees with the label,
/// restricted to judged positions.
pub fn misclassified_positions<T: Scalar>(
    v_values: &[T],
    replaced: &[bool],
    detect_mask: &[bool],
    threshold: f64,
) -> Vec<bool> {
    v_values
        .iter()
        .zip(replaced.iter().zip(detect_mask))
        .map(|(&v, (&rep, &judged))| {
            if !judged {
                return false;
            }
            let predicted_original = v.to_f64() >= threshold;
            let is_original = !rep;
            predicted_original != is_original
        })
        .collect()
}

/// Builds the noisy previous context: at every selected position the gold
/// token is replaced by the sampled one, or — when the sample equals gold —
/// by a resample from the distribution with gold excluded and the remaining
/// mass renormalized.
pub fn build_noisy_context<T: Scalar, R: Rng>(
    gold: &[usize],
    sampled: &[usize],
    probs: &[T],
    vocab_size: usize,
    v_flags: &[bool],
    rng: &mut R,
) -> Result<NoisyContext> {
    if vocab_size < 2 {
        return Err(Error::invalid("build_noisy_context", "vocabulary of size 1 cannot exclude the gold token"));
    }
    let mut noisy = gold.to_vec();
    let mut p = 0usize;
    for (t, &flag) in v_flags.iter().enumerate() {
        if !flag {
            continue;
        }
        p += 1;
        if sampled[t] != gold[t] {
            noisy[t] = sampled[t];
        } else {
            let row = &probs[t * vocab_size..(t + 1) * vocab_size];
            noisy[t] = resample_excluding(row, gold[t], rng);
        }
    }
    Ok(NoisyContext { noisy_ids: noisy, v_flags: v_flags.to_vec(), p })
}

fn resample_excluding<T: Scalar, R: Rng>(row: &[T], exclude: usize, rng: &mut R) -> usize {
    let mut mass = 0.0f64;
    for (j, &pv) in row.iter().enumerate() {
        if j != exclude {
            mass += pv.to_f64();
        }
    }
    if mass > 0.0 {
        let u: f64 = rng.gen::<f64>() * mass;
        let mut acc = 0.0f64;
        for (j, &pv) in row.iter().enumerate() {
            if j == exclude {
                continue;
            }
            acc += pv.to_f64();
            if u < acc {
                return j;
            }
        }
    }
    // saturated distribution: no mass left outside gold, fall back to a
    // uniform draw over the excluded-complement
    let k = rng.gen_range(0..row.len() - 1);
    if k >= exclude {
        k + 1
    } else {
        k
    }
}

/// Shifted decoder input for a (possibly noisy) target matrix: [BOS] + ids[..-1] per row.
pub fn shift_right(ids: &[usize], rows: usize, len: usize) -> Vec<usize> {
    let mut out = vec![PAD; rows * len];
    for r in 0..rows {
        out[r * len] = crate::vocab::BOS;
        for j in 0..len - 1 {
            out[r * len + j + 1] = ids[r * len + j];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Combined objectives
// ---------------------------------------------------------------------------

/// Fine-tuning flavor: generator only, discriminator only, or joint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinetuneMode {
    #[serde(rename = "G")]
    Generator,
    #[serde(rename = "D")]
    Discriminator,
    #[serde(rename = "G+D")]
    Joint,
}

/// The combined loss built on a caller-provided graph and registered model;
/// the full pipeline minus graph setup. `frozen` replays previously made
/// discrete choices instead of sampling (no randomness is consumed then,
/// provided dropout is off).
#[allow(clippy::too_many_arguments)]
pub fn combined_loss_on_graph<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    model: &ModelGraph,
    params: &ModelParams<T>,
    batch: &PretrainBatch,
    cfg: &ObjectiveConfig,
    rng: &mut R,
    frozen: Option<&FrozenChoices>,
) -> Result<PipelineOut<T>> {
    if cfg.lambda <= 0.0 {
        return Err(Error::Config(format!("lambda must be positive, got {}", cfg.lambda)));
    }
    let h_enc = forward::encode(g, model, params, &batch.src, &batch.src_mask, batch.rows, batch.src_len, rng)?;

    // teacher-forced generator pass
    let gen_logits =
        forward::generator_decode(g, model, params, h_enc, &batch.src_mask, &batch.trg_input, &batch.trg_mask, rng)?;
    let l_g = generator_loss(g, gen_logits, &batch.trg_output, &batch.trg_mask, cfg.smoothing)?;

    // sample x̂ from the detached distributions
    let vocab = params.config.vocab_size;
    let sampled = match frozen {
        Some(f) => {
            let replaced: Vec<bool> =
                f.sampled_ids.iter().zip(&batch.trg_output).map(|(&s, &gt)| s != gt).collect();
            let detect_mask: Vec<bool> = batch
                .trg_mask
                .iter()
                .zip(&batch.trg_output)
                .map(|(&real, &gt)| real && gt != EOS)
                .collect();
            SampledTarget {
                sampled_ids: f.sampled_ids.clone(),
                gold_ids: batch.trg_output.clone(),
                replaced,
                detect_mask,
                probs: softmax_rows(g.data(gen_logits), vocab),
                vocab_size: vocab,
            }
        }
        None => sample_target(g.data(gen_logits), vocab, &batch.trg_output, &batch.trg_mask, rng),
    };

    // discriminator pass on the sampled sentence
    let (_h_d, v_node) = forward::discriminator_decode(
        g,
        model,
        params,
        h_enc,
        &batch.src_mask,
        &sampled.sampled_ids,
        &batch.trg_mask,
        rng,
    )?;
    let l_d = detection_loss(g, v_node, &sampled.replaced, &sampled.detect_mask)?;

    // replacement sites and the noisy context
    let v_flags = match frozen {
        Some(f) => f.v_flags.clone(),
        None => match cfg.replacement {
            ReplacementPolicy::MisclassifiedOnly => {
                misclassified_positions(g.data(v_node), &sampled.replaced, &sampled.detect_mask, cfg.threshold)
            }
            ReplacementPolicy::AllSampled => sampled.detect_mask.clone(),
        },
    };
    let noisy = match frozen {
        Some(f) => NoisyContext {
            noisy_ids: f.noisy_ids.clone(),
            v_flags: v_flags.clone(),
            p: v_flags.iter().filter(|&&b| b).count(),
        },
        None => build_noisy_context(&sampled.gold_ids, &sampled.sampled_ids, &sampled.probs, vocab, &v_flags, rng)?,
    };

    // denoising pass from the corrupted previous context
    let l_dg = if cfg.use_denoising {
        let noisy_input = shift_right(&noisy.noisy_ids, batch.rows, batch.trg_len);
        let dg_logits = match cfg.denoise_decoder {
            DenoiseDecoder::Generator => forward::generator_decode(
                g,
                model,
                params,
                h_enc,
                &batch.src_mask,
                &noisy_input,
                &batch.trg_mask,
                rng,
            )?,
            DenoiseDecoder::Discriminator => forward::discriminator_as_denoiser(
                g,
                model,
                params,
                h_enc,
                &batch.src_mask,
                &noisy_input,
                &batch.trg_mask,
                rng,
            )?,
        };
        Some(generator_loss(g, dg_logits, &batch.trg_output, &batch.trg_mask, cfg.smoothing)?)
    } else {
        None
    };

    let weighted_d = g.scale(l_d, cfg.lambda)?;
    let mut combined = g.add(l_g, weighted_d)?;
    if let Some(dg) = l_dg {
        combined = g.add(combined, dg)?;
    }
    Ok(PipelineOut { combined, l_g, l_d, l_dg, gen_logits, h_enc, v_node, sampled, noisy })
}

/// Node handles and pipeline artifacts of one combined-loss build.
pub struct PipelineOut<T: Scalar> {
    pub combined: NodeId,
    pub l_g: NodeId,
    pub l_d: NodeId,
    pub l_dg: Option<NodeId>,
    pub gen_logits: NodeId,
    pub h_enc: NodeId,
    pub v_node: NodeId,
    pub sampled: SampledTarget<T>,
    pub noisy: NoisyContext,
}

/// The combined loss L_G + lambda*L_D (+ L_DG) on one batch, on a fresh
/// graph. Used for pre-training (masked batches) and joint fine-tuning
/// (pair batches). `frozen` replays previously made discrete choices.
pub fn pretrain_loss<T: Scalar, R: Rng>(
    params: &ModelParams<T>,
    batch: &PretrainBatch,
    cfg: &ObjectiveConfig,
    rng: &mut R,
    frozen: Option<&FrozenChoices>,
) -> Result<StepOutcome<T>> {
    let mut g = Graph::new();
    let model = ModelGraph::insert(&mut g, params);
    let out = combined_loss_on_graph(&mut g, &model, params, batch, cfg, rng, frozen)?;
    let output =
        step_diagnostics(&g, Some(out.l_g), Some(out.l_d), out.l_dg, out.combined, cfg, &out.sampled, out.v_node, Some(&out.noisy));
    let choices = FrozenChoices {
        sampled_ids: out.sampled.sampled_ids.clone(),
        v_flags: out.noisy.v_flags.clone(),
        noisy_ids: out.noisy.noisy_ids.clone(),
    };
    Ok(StepOutcome {
        graph: g,
        model,
        loss: out.combined,
        gen_logits: Some(out.gen_logits),
        h_enc: out.h_enc,
        v_node: Some(out.v_node),
        sampled: Some(out.sampled),
        noisy: Some(out.noisy),
        choices: Some(choices),
        output,
    })
}

/// Fine-tuning loss on an unmasked pair batch (Eq.-10 style): mode G is
/// plain label-smoothed seq2seq; mode D trains the detection head (plus
/// denoising through the discriminator when so routed); mode G+D is the
/// full combined objective.
pub fn finetune_loss<T: Scalar, R: Rng>(
    params: &ModelParams<T>,
    batch: &PretrainBatch,
    mode: FinetuneMode,
    cfg: &ObjectiveConfig,
    rng: &mut R,
) -> Result<StepOutcome<T>> {
    match mode {
        FinetuneMode::Joint => pretrain_loss(params, batch, cfg, rng, None),
        FinetuneMode::Generator => {
            let mut g = Graph::new();
            let model = ModelGraph::insert(&mut g, params);
            let h_enc =
                forward::encode(&mut g, &model, params, &batch.src, &batch.src_mask, batch.rows, batch.src_len, rng)?;
            let gen_logits = forward::generator_decode(
                &mut g,
                &model,
                params,
                h_enc,
                &batch.src_mask,
                &batch.trg_input,
                &batch.trg_mask,
                rng,
            )?;
            let l_g = generator_loss(&mut g, gen_logits, &batch.trg_output, &batch.trg_mask, cfg.smoothing)?;
            let l_g_val = g.data(l_g)[0].to_f64();
            let output = TrainStepOutput {
                step: 0,
                l_g: l_g_val,
                l_d: 0.0,
                l_dg: 0.0,
                combined: l_g_val,
                det_acc: 0.0,
                replaced_rate: 0.0,
                p: 0,
            };
            Ok(StepOutcome {
                graph: g,
                model,
                loss: l_g,
                gen_logits: Some(gen_logits),
                h_enc,
                v_node: None,
                sampled: None,
                noisy: None,
                choices: None,
                output,
            })
        }
        FinetuneMode::Discriminator => {
            let mut g = Graph::new();
            let model = ModelGraph::insert(&mut g, params);
            let h_enc =
                forward::encode(&mut g, &model, params, &batch.src, &batch.src_mask, batch.rows, batch.src_len, rng)?;
            let gen_logits = forward::generator_decode(
                &mut g,
                &model,
                params,
                h_enc,
                &batch.src_mask,
                &batch.trg_input,
                &batch.trg_mask,
                rng,
            )?;
            let vocab = params.config.vocab_size;
            let sampled = sample_target(g.data(gen_logits), vocab, &batch.trg_output, &batch.trg_mask, rng);
            let (_h_d, v_node) = forward::discriminator_decode(
                &mut g,
                &model,
                params,
                h_enc,
                &batch.src_mask,
                &sampled.sampled_ids,
                &batch.trg_mask,
                rng,
            )?;
            let l_d = detection_loss(&mut g, v_node, &sampled.replaced, &sampled.detect_mask)?;
            let mut combined = g.scale(l_d, cfg.lambda)?;

            // optional denoising through the discriminator decoder
            let mut noisy_out = None;
            let mut l_dg_node = None;
            if cfg.use_denoising && cfg.denoise_decoder == DenoiseDecoder::Discriminator {
                let v_flags =
                    misclassified_positions(g.data(v_node), &sampled.replaced, &sampled.detect_mask, cfg.threshold);
                let noisy =
                    build_noisy_context(&sampled.gold_ids, &sampled.sampled_ids, &sampled.probs, vocab, &v_flags, rng)?;
                let noisy_input = shift_right(&noisy.noisy_ids, batch.rows, batch.trg_len);
                let dg_logits = forward::discriminator_as_denoiser(
                    &mut g,
                    &model,
                    params,
                    h_enc,
                    &batch.src_mask,
                    &noisy_input,
                    &batch.trg_mask,
                    rng,
                )?;
                let l_dg = generator_loss(&mut g, dg_logits, &batch.trg_output, &batch.trg_mask, cfg.smoothing)?;
                combined = g.add(combined, l_dg)?;
                l_dg_node = Some(l_dg);
                noisy_out = Some(noisy);
            }

            let output =
                step_diagnostics(&g, None, Some(l_d), l_dg_node, combined, cfg, &sampled, v_node, noisy_out.as_ref());
            Ok(StepOutcome {
                graph: g,
                model,
                loss: combined,
                gen_logits: Some(gen_logits),
                h_enc,
                v_node: Some(v_node),
                sampled: Some(sampled),
                noisy: noisy_out,
                choices: None,
                output,
            })
        }
    }
}

/// Detection accuracy, replaced rate, and |v| over the judged positions.
pub fn detection_diagnostics<T: Scalar>(
    v_values: &[T],
    sampled: &SampledTarget<T>,
    threshold: f64,
) -> (f64, f64) {
    let mut judged = 0usize;
    let mut correct = 0usize;
    let mut replaced_count = 0usize;
    for i in 0..sampled.detect_mask.len() {
        if !sampled.detect_mask[i] {
            continue;
        }
        judged += 1;
        if sampled.replaced[i] {
            replaced_count += 1;
        }
        let predicted_original = v_values[i].to_f64() >= threshold;
        if predicted_original == !sampled.replaced[i] {
            correct += 1;
        }
    }
    let denom = judged.max(1) as f64;
    (correct as f64 / denom, replaced_count as f64 / denom)
}

#[allow(clippy::too_many_arguments)]
fn step_diagnostics<T: Scalar>(
    g: &Graph<T>,
    l_g: Option<NodeId>,
    l_d: Option<NodeId>,
    l_dg: Option<NodeId>,
    combined: NodeId,
    cfg: &ObjectiveConfig,
    sampled: &SampledTarget<T>,
    v_node: NodeId,
    noisy: Option<&NoisyContext>,
) -> TrainStepOutput {
    let (det_acc, replaced_rate) = detection_diagnostics(g.data(v_node), sampled, cfg.threshold);
    TrainStepOutput {
        step: 0,
        l_g: l_g.map(|id| g.data(id)[0].to_f64()).unwrap_or(0.0),
        l_d: l_d.map(|id| g.data(id)[0].to_f64()).unwrap_or(0.0),
        l_dg: l_dg.map(|id| g.data(id)[0].to_f64()).unwrap_or(0.0),
        combined: g.data(combined)[0].to_f64(),
        det_acc,
        replaced_rate,
        p: noisy.map(|n| n.p).unwrap_or(0),
    }
}
