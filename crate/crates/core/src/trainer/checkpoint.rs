//! Checkpoint directory format: `manifest.json`, `vocab.txt`, and one
//! little-endian fp32 blob per tensor (`<param_path>.f32`, with optimizer
//! moments as `<param_path>.m.f32` / `<param_path>.v.f32`).
//!
//! Save -> load -> save is byte-identical, and a loaded checkpoint resumes
//! training bit-exactly: the manifest carries the step counter, the RNG
//! seed + stream position, and every data cursor.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Census, ModelConfig, ModelParams};
use crate::optim::OptimState;
use crate::tensor::{read_f32_blob, write_f32_blob};
use crate::vocab::Vocab;

use super::data::CursorState;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.txt";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngState {
    pub seed_hex: String,
    /// u128 stream position, stored as decimal text.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> RngState {
        let seed = rng.get_seed();
        let mut seed_hex = String::with_capacity(64);
        for b in seed {
            seed_hex.push_str(&format!("{:02x}", b));
        }
        RngState { seed_hex, word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        if self.seed_hex.len() != 64 {
            return Err(Error::Checkpoint("rng seed must be 32 hex bytes".into()));
        }
        let mut seed = [0u8; 32];
        for i in 0..32 {
            seed[i] = u8::from_str_radix(&self.seed_hex[2 * i..2 * i + 2], 16)
                .map_err(|e| Error::Checkpoint(format!("bad rng seed hex: {}", e)))?;
        }
        let word_pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::Checkpoint(format!("bad rng word position: {}", e)))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimMeta {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub step: u64,
    pub model: ModelConfig,
    pub optim: OptimMeta,
    pub rng: RngState,
    pub data_state: Vec<CursorState>,
    pub shapes: Census,
    pub vocab_file: String,
}

pub struct LoadedCheckpoint {
    pub manifest: CheckpointManifest,
    pub params: ModelParams<f32>,
    pub opt: OptimState<f32>,
    pub rng: ChaCha8Rng,
    pub vocab: Vocab,
}

#[allow(clippy::too_many_arguments)]
pub fn save_checkpoint(
    dir: &Path,
    step: u64,
    params: &ModelParams<f32>,
    opt: &OptimState<f32>,
    rng: &ChaCha8Rng,
    data_state: &[CursorState],
    vocab: &Vocab,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = CheckpointManifest {
        version: FORMAT_VERSION,
        step,
        model: params.config.clone(),
        optim: OptimMeta { beta1: opt.beta1, beta2: opt.beta2, eps: opt.eps, step: opt.step },
        rng: RngState::capture(rng),
        data_state: data_state.to_vec(),
        shapes: params.census(),
        vocab_file: VOCAB_FILE.to_string(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join(MANIFEST_FILE), json)?;
    vocab.save(&dir.join(VOCAB_FILE))?;

    let mut idx = 0usize;
    let mut io_err: Option<Error> = None;
    params.tree.for_each(&mut |path, t| {
        if io_err.is_some() {
            return;
        }
        if let Err(e) = write_f32_blob(&dir.join(format!("{}.f32", path)), &t.data) {
            io_err = Some(e);
            return;
        }
        if let Err(e) = write_f32_blob(&dir.join(format!("{}.m.f32", path)), &opt.m[idx]) {
            io_err = Some(e);
            return;
        }
        if let Err(e) = write_f32_blob(&dir.join(format!("{}.v.f32", path)), &opt.v[idx]) {
            io_err = Some(e);
            return;
        }
        idx += 1;
    });
    match io_err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Checkpoint(format!("{}: {}", path.display(), e)))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", manifest.version)));
    }
    Ok(manifest)
}

/// Loads parameters + vocab only (fine-tune init, generation, eval).
pub fn load_params(dir: &Path) -> Result<(ModelParams<f32>, Vocab, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let vocab = Vocab::load(&dir.join(&manifest.vocab_file))?;
    if vocab.size() != manifest.model.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocab file has {} entries but the model was built for {}",
            vocab.size(),
            manifest.model.vocab_size
        )));
    }
    let mut scratch_rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = ModelParams::<f32>::init(manifest.model.clone(), &mut scratch_rng)?;
    let expected = manifest.shapes.clone();
    let mut idx = 0usize;
    let mut fail: Option<Error> = None;
    params.tree.for_each_mut(&mut |path, t| {
        if fail.is_some() {
            return;
        }
        let entry = match expected.entries.get(idx) {
            Some(e) => e,
            None => {
                fail = Some(Error::Checkpoint("manifest lists too few tensors".into()));
                return;
            }
        };
        if entry.path != path || entry.shape != t.shape {
            fail = Some(Error::Checkpoint(format!(
                "shape manifest mismatch at {}: manifest has {} {:?}, model wants {:?}",
                path, entry.path, entry.shape, t.shape
            )));
            return;
        }
        match read_f32_blob(&dir.join(format!("{}.f32", path)), t.numel()) {
            Ok(data) => t.data = data,
            Err(e) => fail = Some(e),
        }
        idx += 1;
    });
    if let Some(e) = fail {
        return Err(e);
    }
    Ok((params, vocab, manifest))
}

/// Loads the full training state for resumption.
pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let (params, vocab, manifest) = load_params(dir)?;
    let mut opt = OptimState::new(&params);
    opt.beta1 = manifest.optim.beta1;
    opt.beta2 = manifest.optim.beta2;
    opt.eps = manifest.optim.eps;
    opt.step = manifest.optim.step;
    let mut idx = 0usize;
    let mut fail: Option<Error> = None;
    params.tree.for_each(&mut |path, t| {
        if fail.is_some() {
            return;
        }
        match read_f32_blob(&dir.join(format!("{}.m.f32", path)), t.numel()) {
            Ok(data) => opt.m[idx] = data,
            Err(e) => {
                fail = Some(e);
                return;
            }
        }
        match read_f32_blob(&dir.join(format!("{}.v.f32", path)), t.numel()) {
            Ok(data) => opt.v[idx] = data,
            Err(e) => {
                fail = Some(e);
                return;
            }
        }
        idx += 1;
    });
    if let Some(e) = fail {
        return Err(e);
    }
    let rng = manifest.rng.restore()?;
    Ok(LoadedCheckpoint { manifest, params, opt, rng, vocab })
}

/// Byte-for-byte snapshot of a checkpoint directory (manifest + blobs),
/// for the save->load->save identity check.
pub fn checkpoint_digest(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        let name = f.file_name().unwrap().to_string_lossy().to_string();
        out.push((name, std::fs::read(&f)?));
    }
    Ok(out)
}
