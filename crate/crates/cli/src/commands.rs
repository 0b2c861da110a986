//! Command implementations.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rtdlm_core::corruption::{apply_mask, make_batch, read_corpus_lines, sample_spans};
use rtdlm_core::infer::{generate as decode, score, DecodeConfig};
use rtdlm_core::metrics::{corpus_bleu, exact_match, tokenize_line};
use rtdlm_core::model::ModelParams;
use rtdlm_core::objectives::{pretrain_loss, FinetuneMode, TrainStepOutput};
use rtdlm_core::trainer::checkpoint::load_params;
use rtdlm_core::trainer::{train, TrainConfig, TrainMode};
use rtdlm_core::vocab::Vocab;
use rtdlm_core::{Error, Result};

use crate::manifest;
use crate::svg;

pub fn pretrain(config_path: &Path, corpus_manifest: Option<&Path>, out: &Path) -> Result<()> {
    let mut config = TrainConfig::load(config_path)?;
    config.mode = TrainMode::Pretrain;
    if let Some(m) = corpus_manifest {
        config.corpus_manifest = Some(m.to_path_buf());
    }
    if config.corpus_manifest.is_none() {
        return Err(Error::Config("no corpus manifest given (flag or config field)".into()));
    }
    manifest::write_into_dir(out, "pretrain", Some(config_path), Some(config.seed))?;
    let report = train(config, out)?;
    eprintln!(
        "pretrain done: {} steps ({} skipped), checkpoint at {}",
        report.steps,
        report.skipped_steps,
        report.final_checkpoint.display()
    );
    Ok(())
}

pub fn finetune(
    config_path: &Path,
    src_file: &Path,
    trg_file: &Path,
    init_checkpoint: Option<&Path>,
    mode: &str,
    out: &Path,
) -> Result<()> {
    let mut config = TrainConfig::load(config_path)?;
    let mode = match mode {
        "G" => FinetuneMode::Generator,
        "D" => FinetuneMode::Discriminator,
        "G+D" => FinetuneMode::Joint,
        other => return Err(Error::Config(format!("unknown fine-tune mode {:?} (use G, D, or G+D)", other))),
    };
    config.mode = TrainMode::Finetune(mode);
    config.src_file = Some(src_file.to_path_buf());
    config.trg_file = Some(trg_file.to_path_buf());
    if let Some(ckpt) = init_checkpoint {
        config.init_checkpoint = Some(ckpt.to_path_buf());
    }
    manifest::write_into_dir(out, "finetune", Some(config_path), Some(config.seed))?;
    let report = train(config, out)?;
    eprintln!(
        "finetune done: {} steps ({} skipped), checkpoint at {}",
        report.steps,
        report.skipped_steps,
        report.final_checkpoint.display()
    );
    Ok(())
}

pub fn generate(checkpoint: &Path, input: &Path, beam: usize, max_len: usize, out: &Path) -> Result<()> {
    let (params, vocab, _) = load_params(checkpoint)?;
    let cfg = DecodeConfig { beam_size: beam.max(1), max_len: max_len.max(1), length_penalty: 1.0 };
    let text = std::fs::read_to_string(input)?;
    let mut out_file = std::fs::File::create(out)?;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let ids = vocab.encode(line);
        let generated = decode(&ids, &params, &cfg)?;
        let shown: Vec<usize> =
            generated.into_iter().filter(|&t| t != rtdlm_core::vocab::EOS).collect();
        writeln!(out_file, "{}", vocab.decode(&shown)?)?;
    }
    manifest::write_sibling(out, "generate", None, None)?;
    Ok(())
}

pub fn eval(
    checkpoint: &Path,
    src: &Path,
    reference: &Path,
    beam: usize,
    max_len: usize,
    out: Option<&Path>,
) -> Result<()> {
    let (params, vocab, _) = load_params(checkpoint)?;
    let src_lines: Vec<String> = std::fs::read_to_string(src)?.lines().map(|s| s.to_string()).collect();
    let ref_lines: Vec<String> = std::fs::read_to_string(reference)?.lines().map(|s| s.to_string()).collect();
    if src_lines.len() != ref_lines.len() {
        return Err(Error::Config(format!(
            "line counts differ: {} has {}, {} has {}",
            src.display(),
            src_lines.len(),
            reference.display(),
            ref_lines.len()
        )));
    }
    let cfg = DecodeConfig { beam_size: beam.max(1), max_len: max_len.max(1), length_penalty: 1.0 };
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    let mut total_logprob = 0.0f64;
    for (s, r) in src_lines.iter().zip(&ref_lines) {
        if s.trim().is_empty() {
            continue;
        }
        let ids = vocab.encode(s);
        let generated = decode(&ids, &params, &cfg)?;
        let shown: Vec<usize> = generated.iter().copied().filter(|&t| t != rtdlm_core::vocab::EOS).collect();
        hyps.push(tokenize_line(&vocab.decode(&shown)?));
        refs.push(tokenize_line(r));
        let mut ref_ids = vocab.encode(r);
        ref_ids.push(rtdlm_core::vocab::EOS);
        total_logprob += score(&ids, &ref_ids, &params)?;
    }
    let result = serde_json::json!({
        "bleu": corpus_bleu(&hyps, &refs),
        "exact_match": exact_match(&hyps, &refs),
        "sentences": hyps.len(),
        "ref_logprob": total_logprob,
    });
    let rendered = serde_json::to_string_pretty(&result)?;
    println!("{}", rendered);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("eval.json"), &rendered)?;
        manifest::write_into_dir(dir, "eval", None, None)?;
    }
    Ok(())
}

pub fn plot(metrics: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(metrics)?;
    let mut rows: Vec<TrainStepOutput> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: TrainStepOutput = serde_json::from_str(line)
            .map_err(|e| Error::Config(format!("{}:{}: {}", metrics.display(), i + 1, e)))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("{}: no metrics rows", metrics.display())));
    }
    let series = [
        ("L_G", "#1f77b4", rows.iter().map(|r| (r.step as f64, r.l_g)).collect::<Vec<_>>()),
        ("L_D", "#ff7f0e", rows.iter().map(|r| (r.step as f64, r.l_d)).collect()),
        ("L_DG", "#2ca02c", rows.iter().map(|r| (r.step as f64, r.l_dg)).collect()),
        ("combined", "#d62728", rows.iter().map(|r| (r.step as f64, r.combined)).collect()),
    ];
    let svg_series: Vec<svg::Series> = series
        .iter()
        .map(|(name, color, points)| svg::Series { name, color, points: points.clone() })
        .collect();
    std::fs::write(out, svg::line_chart(&svg_series))?;
    manifest::write_sibling(out, "plot", None, None)?;
    Ok(())
}

pub fn inspect_batch(config_path: &Path, corpus: &Path, seed: u64, out: Option<&Path>) -> Result<()> {
    let mut config = TrainConfig::load(config_path)?;
    config.seed = seed;
    let lines = read_corpus_lines(corpus)?;
    let vocab = Vocab::build(lines.iter(), config.min_freq, config.max_vocab, &[])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model_config = config.model.with_vocab(vocab.size());
    model_config.dropout = 0.0;
    let params = ModelParams::<f32>::init(model_config, &mut rng)?;

    let rows = match config.batch {
        rtdlm_core::trainer::BatchSize::Rows(n) => n.clamp(1, lines.len()),
        rtdlm_core::trainer::BatchSize::Tokens(_) => 4.min(lines.len()),
    };
    let mut pairs = Vec::new();
    for line in lines.iter().take(rows) {
        let ids = vocab.encode(line);
        if ids.is_empty() {
            continue;
        }
        let spans = sample_spans(ids.len(), config.mask_ratio, config.mean_span, &mut rng);
        pairs.push(apply_mask(&ids, &spans, &vocab)?);
    }
    let batch = make_batch(&pairs, config.model.max_positions, &vec![0; pairs.len()])?;
    let objective = rtdlm_core::objectives::ObjectiveConfig {
        lambda: config.lambda,
        smoothing: config.label_smoothing,
        use_denoising: config.use_denoising,
        denoise_decoder: config.denoise_decoder,
        replacement: config.replacement,
        threshold: 0.5,
    };
    let outcome = pretrain_loss(&params, &batch, &objective, &mut rng, None)?;
    let dump = render_batch_dump(&vocab, &batch, &outcome)?;
    print!("{}", dump);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("batch_dump.txt"), &dump)?;
        manifest::write_into_dir(dir, "inspect-batch", Some(config_path), Some(seed))?;
    }
    Ok(())
}

fn render_batch_dump(
    vocab: &Vocab,
    batch: &rtdlm_core::corruption::PretrainBatch,
    outcome: &rtdlm_core::objectives::StepOutcome<f32>,
) -> Result<String> {
    use std::fmt::Write as _;
    let sampled = outcome.sampled.as_ref().expect("pretrain pipeline samples");
    let noisy = outcome.noisy.as_ref().expect("pretrain pipeline denoises");
    let v_values = outcome.v_node.map(|id| outcome.graph.data(id).to_vec()).unwrap_or_default();
    let mut s = String::new();
    writeln!(s, "batch: {} rows, src width {}, trg width {}", batch.rows, batch.src_len, batch.trg_len).unwrap();
    writeln!(
        s,
        "losses: L_G {:.4}  L_D {:.4}  L_DG {:.4}  combined {:.4}  det_acc {:.3}  |v| {}",
        outcome.output.l_g,
        outcome.output.l_d,
        outcome.output.l_dg,
        outcome.output.combined,
        outcome.output.det_acc,
        outcome.output.p
    )
    .unwrap();
    for r in 0..batch.rows {
        let trg_base = r * batch.trg_len;
        let real = |j: usize| batch.trg_mask[trg_base + j];
        writeln!(s, "\nrow {}:", r).unwrap();
        writeln!(s, "  src:     {}", vocab.decode(batch.src_row(r))?).unwrap();
        let gold: Vec<usize> = (0..batch.trg_len).filter(|&j| real(j)).map(|j| batch.trg_output[trg_base + j]).collect();
        writeln!(s, "  gold:    {}", vocab.decode(&gold)?).unwrap();
        let mut sampled_line = String::new();
        let mut labels_line = String::new();
        let mut v_line = String::new();
        let mut noisy_line = String::new();
        for j in 0..batch.trg_len {
            if !real(j) {
                continue;
            }
            let idx = trg_base + j;
            let tok = vocab.token(sampled.sampled_ids[idx]).unwrap_or("?");
            sampled_line.push_str(tok);
            sampled_line.push(' ');
            labels_line.push_str(if !sampled.detect_mask[idx] {
                "-"
            } else if sampled.replaced[idx] {
                "REPLACED"
            } else {
                "ORIGINAL"
            });
            labels_line.push(' ');
            if !v_values.is_empty() {
                v_line.push_str(&format!("{:.2} ", v_values[idx]));
            }
            // '*' marks replacement sites of the noisy context
            if noisy.v_flags[idx] {
                noisy_line.push('*');
            }
            noisy_line.push_str(vocab.token(noisy.noisy_ids[idx]).unwrap_or("?"));
            noisy_line.push(' ');
        }
        writeln!(s, "  sampled: {}", sampled_line.trim_end()).unwrap();
        writeln!(s, "  labels:  {}", labels_line.trim_end()).unwrap();
        writeln!(s, "  V:       {}", v_line.trim_end()).unwrap();
        writeln!(s, "  noisy:   {}", noisy_line.trim_end()).unwrap();
    }
    Ok(s)
}
