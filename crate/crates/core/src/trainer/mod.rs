//! The optimization loop: data sampling, corruption, the combined
//! objective, Adam with warmup/inverse-sqrt decay, metrics, and
//! checkpointing. Fully deterministic given (seed, config, corpora).

pub mod checkpoint;
pub mod data;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corruption::{self, apply_mask, make_batch, make_pair_batch, sample_spans, PretrainBatch};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::objectives::{
    self, DenoiseDecoder, FinetuneMode, ObjectiveConfig, ReplacementPolicy, TrainStepOutput,
};
use crate::optim::{adam_step, clip_grad_norm, schedule_lr, OptimState, ScheduleKind, StepResult};
use crate::vocab::Vocab;

pub use data::{sample_dataset, BatchSize, CursorState, DataCursor, Dataset};

/// Model shape without the vocabulary size (which comes from the built or
/// loaded vocab).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelSpec {
    pub d_model: usize,
    pub ffn_dim: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub gen_dec_layers: usize,
    pub disc_dec_layers: usize,
    pub max_positions: usize,
    pub dropout: f64,
}

impl ModelSpec {
    pub fn desk_default() -> Self {
        ModelSpec {
            d_model: 128,
            ffn_dim: 512,
            n_heads: 4,
            enc_layers: 4,
            gen_dec_layers: 4,
            disc_dec_layers: 2,
            max_positions: 256,
            dropout: 0.1,
        }
    }

    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            ffn_dim: self.ffn_dim,
            n_heads: self.n_heads,
            enc_layers: self.enc_layers,
            gen_dec_layers: self.gen_dec_layers,
            disc_dec_layers: self.disc_dec_layers,
            max_positions: self.max_positions,
            dropout: self.dropout,
            tie_embeddings: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Pretrain,
    Finetune(FinetuneMode),
}

fn default_lambda() -> f64 {
    10.0
}
fn default_mask_ratio() -> f64 {
    0.15
}
fn default_mean_span() -> f64 {
    3.0
}
fn default_grad_clip() -> Option<f64> {
    Some(1.0)
}
fn default_true() -> bool {
    true
}
fn default_min_freq() -> usize {
    1
}
fn default_max_vocab() -> usize {
    50_000
}

/// Mirrors the on-disk JSON config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub mode: TrainMode,
    pub seed: u64,
    pub total_steps: u64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    #[serde(default)]
    pub schedule: ScheduleKind,
    pub batch: BatchSize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_mask_ratio")]
    pub mask_ratio: f64,
    #[serde(default = "default_mean_span")]
    pub mean_span: f64,
    #[serde(default)]
    pub label_smoothing: f64,
    #[serde(default = "default_true")]
    pub use_denoising: bool,
    #[serde(default)]
    pub denoise_decoder: DenoiseDecoder,
    #[serde(default)]
    pub replacement: ReplacementPolicy,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: Option<f64>,
    /// 0 = checkpoint only at the end.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default = "default_min_freq")]
    pub min_freq: usize,
    #[serde(default = "default_max_vocab")]
    pub max_vocab: usize,
    #[serde(default)]
    pub corpus_manifest: Option<PathBuf>,
    #[serde(default)]
    pub src_file: Option<PathBuf>,
    #[serde(default)]
    pub trg_file: Option<PathBuf>,
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub resume_from: Option<PathBuf>,
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))
    }

    fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda: self.lambda,
            smoothing: self.label_smoothing,
            use_denoising: self.use_denoising,
            denoise_decoder: self.denoise_decoder,
            replacement: self.replacement,
            threshold: 0.5,
        }
    }
}

pub struct TrainReport {
    pub steps: u64,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub last: Option<TrainStepOutput>,
    pub skipped_steps: u64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub params: ModelParams<f32>,
    pub opt: OptimState<f32>,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub skipped: u64,
    datasets: Vec<Dataset>,
    cursors: Vec<DataCursor>,
    out_dir: PathBuf,
    metrics: std::fs::File,
}

impl Trainer {
    /// Builds (or restores) the full training state and opens the metrics
    /// stream. `out_dir` is created if needed.
    pub fn new(config: TrainConfig, out_dir: &Path) -> Result<Trainer> {
        std::fs::create_dir_all(out_dir)?;
        if let Some(resume) = config.resume_from.clone() {
            return Self::resume(config, &resume, out_dir);
        }

        // initial params: fresh or from a checkpoint
        let (vocab, params) = match &config.init_checkpoint {
            Some(dir) => {
                let (mut params, vocab, _) = checkpoint::load_params(dir)?;
                // the fine-tune run drives dropout from its own config
                params.config.dropout = config.model.dropout;
                if params.config.max_positions != config.model.max_positions
                    || params.config.d_model != config.model.d_model
                {
                    return Err(Error::Config(
                        "init checkpoint model shape disagrees with the config".into(),
                    ));
                }
                (vocab, params)
            }
            None => {
                let vocab = Self::build_vocab(&config)?;
                let model_config = config.model.with_vocab(vocab.size());
                let mut init_rng = ChaCha8Rng::seed_from_u64(splitmix_for_init(config.seed));
                let params = ModelParams::init(model_config, &mut init_rng)?;
                (vocab, params)
            }
        };

        let datasets = Self::load_datasets(&config, &vocab)?;
        let cursors = datasets
            .iter()
            .enumerate()
            .map(|(i, d)| DataCursor::new(config.seed, i as u64, d.len()))
            .collect();
        let opt = OptimState::new(&params);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let metrics = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(out_dir.join("metrics.jsonl"))?;
        Ok(Trainer {
            config,
            vocab,
            params,
            opt,
            rng,
            step: 0,
            skipped: 0,
            datasets,
            cursors,
            out_dir: out_dir.to_path_buf(),
            metrics,
        })
    }

    fn resume(config: TrainConfig, ckpt_dir: &Path, out_dir: &Path) -> Result<Trainer> {
        let loaded = checkpoint::load_checkpoint(ckpt_dir)?;
        let datasets = Self::load_datasets(&config, &loaded.vocab)?;
        if loaded.manifest.data_state.len() != datasets.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint tracks {} datasets, config provides {}",
                loaded.manifest.data_state.len(),
                datasets.len()
            )));
        }
        let cursors = datasets
            .iter()
            .zip(&loaded.manifest.data_state)
            .enumerate()
            .map(|(i, (d, st))| DataCursor::restore(config.seed, i as u64, d.len(), st))
            .collect();
        let metrics = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(out_dir.join("metrics.jsonl"))?;
        Ok(Trainer {
            step: loaded.manifest.step,
            skipped: 0,
            config,
            vocab: loaded.vocab,
            params: loaded.params,
            opt: loaded.opt,
            rng: loaded.rng,
            datasets,
            cursors,
            out_dir: out_dir.to_path_buf(),
            metrics,
        })
    }

    fn build_vocab(config: &TrainConfig) -> Result<Vocab> {
        match config.mode {
            TrainMode::Pretrain => {
                let manifest_path = config
                    .corpus_manifest
                    .as_ref()
                    .ok_or_else(|| Error::Config("pretrain mode needs corpus_manifest".into()))?;
                let entries = corruption::load_manifest(manifest_path)?;
                let mut tags: Vec<String> = Vec::new();
                let mut lines = Vec::new();
                for e in &entries {
                    if !tags.contains(&e.language_tag) {
                        tags.push(e.language_tag.clone());
                    }
                    lines.extend(corruption::read_corpus_lines(&e.path)?);
                }
                Vocab::build(lines.iter(), config.min_freq, config.max_vocab, &tags)
            }
            TrainMode::Finetune(_) => {
                let src = config
                    .src_file
                    .as_ref()
                    .ok_or_else(|| Error::Config("finetune mode needs src_file".into()))?;
                let trg = config
                    .trg_file
                    .as_ref()
                    .ok_or_else(|| Error::Config("finetune mode needs trg_file".into()))?;
                let mut lines = corruption::read_corpus_lines(src)?;
                lines.extend(corruption::read_corpus_lines(trg)?);
                Vocab::build(lines.iter(), config.min_freq, config.max_vocab, &[])
            }
        }
    }

    fn load_datasets(config: &TrainConfig, vocab: &Vocab) -> Result<Vec<Dataset>> {
        let max_pos = config.model.max_positions;
        match config.mode {
            TrainMode::Pretrain => {
                let manifest_path = config
                    .corpus_manifest
                    .as_ref()
                    .ok_or_else(|| Error::Config("pretrain mode needs corpus_manifest".into()))?;
                let entries = corruption::load_manifest(manifest_path)?;
                let mut datasets = Vec::new();
                let mut dropped = 0usize;
                for (lang_id, e) in entries.iter().enumerate() {
                    let mut rows = Vec::new();
                    for line in corruption::read_corpus_lines(&e.path)? {
                        let ids = vocab.encode(&line);
                        if ids.is_empty() {
                            continue;
                        }
                        if ids.len() > max_pos {
                            dropped += 1;
                            continue;
                        }
                        rows.push(ids);
                    }
                    if rows.is_empty() {
                        return Err(Error::Data(format!("{}: no usable rows", e.path.display())));
                    }
                    datasets.push(Dataset { src_rows: rows, trg_rows: None, lang_id });
                }
                if dropped > 0 {
                    eprintln!("note: dropped {} over-length lines (> {} positions)", dropped, max_pos);
                }
                Ok(datasets)
            }
            TrainMode::Finetune(_) => {
                let src_path = config
                    .src_file
                    .as_ref()
                    .ok_or_else(|| Error::Config("finetune mode needs src_file".into()))?;
                let trg_path = config
                    .trg_file
                    .as_ref()
                    .ok_or_else(|| Error::Config("finetune mode needs trg_file".into()))?;
                let src_lines = corruption::read_corpus_lines(src_path)?;
                let trg_lines = corruption::read_corpus_lines(trg_path)?;
                if src_lines.len() != trg_lines.len() {
                    return Err(Error::Config(format!(
                        "parallel files disagree: {} has {} lines, {} has {} lines",
                        src_path.display(),
                        src_lines.len(),
                        trg_path.display(),
                        trg_lines.len()
                    )));
                }
                let mut src_rows = Vec::new();
                let mut trg_rows = Vec::new();
                let mut dropped = 0usize;
                for (s, t) in src_lines.iter().zip(&trg_lines) {
                    let si = vocab.encode(s);
                    let ti = vocab.encode(t);
                    if si.is_empty() || ti.is_empty() {
                        continue;
                    }
                    if si.len() > max_pos || ti.len() + 1 > max_pos {
                        dropped += 1;
                        continue;
                    }
                    src_rows.push(si);
                    trg_rows.push(ti);
                }
                if dropped > 0 {
                    eprintln!("note: dropped {} over-length pairs (> {} positions)", dropped, max_pos);
                }
                if src_rows.is_empty() {
                    return Err(Error::Data("no usable parallel rows".into()));
                }
                Ok(vec![Dataset { src_rows, trg_rows: Some(trg_rows), lang_id: 0 }])
            }
        }
    }

    fn next_batch(&mut self) -> Result<PretrainBatch> {
        let ds_idx = sample_dataset(self.datasets.len(), &mut self.rng);
        let ds = &self.datasets[ds_idx];
        let lens: Vec<usize> = ds.src_rows.iter().map(|r| r.len()).collect();
        let indices = self.cursors[ds_idx].next_batch(self.config.batch, &lens);
        let max_pos = self.config.model.max_positions;
        match self.config.mode {
            TrainMode::Pretrain => {
                let mut pairs = Vec::with_capacity(indices.len());
                for &i in &indices {
                    let row = &ds.src_rows[i];
                    let spans = sample_spans(row.len(), self.config.mask_ratio, self.config.mean_span, &mut self.rng);
                    pairs.push(apply_mask(row, &spans, &self.vocab)?);
                }
                let lang_ids = vec![ds.lang_id; pairs.len()];
                make_batch(&pairs, max_pos, &lang_ids)
            }
            TrainMode::Finetune(_) => {
                let trg = ds.trg_rows.as_ref().expect("finetune dataset has targets");
                let src_sel: Vec<Vec<usize>> = indices.iter().map(|&i| ds.src_rows[i].clone()).collect();
                let trg_sel: Vec<Vec<usize>> = indices.iter().map(|&i| trg[i].clone()).collect();
                make_pair_batch(&src_sel, &trg_sel, max_pos)
            }
        }
    }

    /// Runs one optimization step and appends its metrics line.
    pub fn run_step(&mut self) -> Result<TrainStepOutput> {
        let batch = self.next_batch()?;
        let objective = self.config.objective();
        let mut outcome = match self.config.mode {
            TrainMode::Pretrain => objectives::pretrain_loss(&self.params, &batch, &objective, &mut self.rng, None)?,
            TrainMode::Finetune(mode) => {
                objectives::finetune_loss(&self.params, &batch, mode, &objective, &mut self.rng)?
            }
        };
        outcome.graph.backward(outcome.loss)?;
        self.params.zero_grads();
        outcome.model.collect_grads(&outcome.graph, &mut self.params)?;
        if let Some(max_norm) = self.config.grad_clip {
            clip_grad_norm(&mut self.params, max_norm);
        }
        let lr = schedule_lr(self.config.schedule, self.step + 1, self.config.peak_lr, self.config.warmup_steps);
        match adam_step(&mut self.params, &mut self.opt, lr)? {
            StepResult::Applied => {}
            StepResult::SkippedNonFinite => {
                self.skipped += 1;
                eprintln!("step {}: non-finite gradients, update skipped", self.step);
            }
        }
        let mut output = outcome.output.clone();
        output.step = self.step;
        self.step += 1;
        let line = serde_json::to_string(&output)?;
        writeln!(self.metrics, "{}", line)?;
        self.metrics.flush()?;
        Ok(output)
    }

    /// Runs up to `n` steps (bounded by `total_steps`), checkpointing on
    /// the configured cadence.
    pub fn run_steps(&mut self, n: u64) -> Result<Vec<TrainStepOutput>> {
        let mut outputs = Vec::new();
        for _ in 0..n {
            if self.step >= self.config.total_steps {
                break;
            }
            let out = self.run_step()?;
            outputs.push(out);
            let every = self.config.checkpoint_every;
            if every > 0 && self.step % every == 0 && self.step < self.config.total_steps {
                let dir = self.out_dir.join(format!("checkpoint-{}", self.step));
                self.save_checkpoint(&dir)?;
            }
        }
        Ok(outputs)
    }

    pub fn run_to_completion(&mut self) -> Result<TrainReport> {
        let mut last = None;
        while self.step < self.config.total_steps {
            let remaining = self.config.total_steps - self.step;
            if let Some(out) = self.run_steps(remaining)?.into_iter().last() {
                last = Some(out);
            }
        }
        let final_dir = self.out_dir.join("checkpoint-final");
        self.save_checkpoint(&final_dir)?;
        Ok(TrainReport {
            steps: self.step,
            final_checkpoint: final_dir,
            metrics_path: self.out_dir.join("metrics.jsonl"),
            last,
            skipped_steps: self.skipped,
        })
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let data_state: Vec<CursorState> = self.cursors.iter().map(|c| c.state()).collect();
        checkpoint::save_checkpoint(dir, self.step, &self.params, &self.opt, &self.rng, &data_state, &self.vocab)
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn datasets(&self) -> &[Dataset] {
        &self.datasets
    }
}

fn splitmix_for_init(seed: u64) -> u64 {
    // params draw from a stream distinct from the training stream
    seed ^ 0xA5A5_5A5A_DEAD_BEEF
}

/// End-to-end: build the trainer, run every step, save the final
/// checkpoint.
pub fn train(config: TrainConfig, out_dir: &Path) -> Result<TrainReport> {
    let mut t = Trainer::new(config, out_dir)?;
    t.run_to_completion()
}
