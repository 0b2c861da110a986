//! Trainer determinism and checkpoint persistence: identical seeds give
//! bit-identical metrics, save->load->save is byte-identical, and resuming
//! reproduces an uninterrupted run exactly.

use std::path::{Path, PathBuf};

use rtdlm_core::objectives::TrainStepOutput;
use rtdlm_core::optim::ScheduleKind;
use rtdlm_core::trainer::checkpoint::{checkpoint_digest, load_checkpoint, save_checkpoint};
use rtdlm_core::trainer::{BatchSize, ModelSpec, TrainConfig, TrainMode, Trainer};

fn tiny_spec() -> ModelSpec {
    ModelSpec {
        d_model: 16,
        ffn_dim: 32,
        n_heads: 2,
        enc_layers: 1,
        gen_dec_layers: 1,
        disc_dec_layers: 1,
        max_positions: 32,
        dropout: 0.1,
    }
}

fn write_corpus(dir: &Path) -> PathBuf {
    let corpus = dir.join("corpus.txt");
    let lines: Vec<String> = (0..24)
        .map(|i| {
            let a = i % 5;
            let b = (i * 3) % 7;
            format!("tok{} tok{} mid{} tok{} end{}", a, b, i % 4, (a + b) % 5, i % 3)
        })
        .collect();
    std::fs::write(&corpus, lines.join("\n")).unwrap();
    let manifest = dir.join("manifest.json");
    std::fs::write(
        &manifest,
        serde_json::json!([{ "path": corpus, "language_tag": "xx" }]).to_string(),
    )
    .unwrap();
    manifest
}

fn config(manifest: PathBuf, total_steps: u64, checkpoint_every: u64) -> TrainConfig {
    TrainConfig {
        model: tiny_spec(),
        mode: TrainMode::Pretrain,
        seed: 42,
        total_steps,
        peak_lr: 1e-3,
        warmup_steps: 4,
        schedule: ScheduleKind::WarmupInvSqrt,
        batch: BatchSize::Rows(4),
        lambda: 10.0,
        mask_ratio: 0.3,
        mean_span: 2.0,
        label_smoothing: 0.0,
        use_denoising: true,
        denoise_decoder: Default::default(),
        replacement: Default::default(),
        grad_clip: Some(1.0),
        checkpoint_every,
        min_freq: 1,
        max_vocab: 1000,
        corpus_manifest: Some(manifest),
        src_file: None,
        trg_file: None,
        init_checkpoint: None,
        resume_from: None,
    }
}

fn run_fresh(dir: &Path, manifest: PathBuf, steps: u64) -> Vec<TrainStepOutput> {
    let mut t = Trainer::new(config(manifest, steps, 0), dir).unwrap();
    t.run_steps(steps).unwrap()
}

#[test]
fn identical_seeds_reproduce_metrics_bit_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = write_corpus(tmp.path());
    let a = run_fresh(&tmp.path().join("a"), manifest.clone(), 12);
    let b = run_fresh(&tmp.path().join("b"), manifest, 12);
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.l_g.to_bits(), y.l_g.to_bits());
        assert_eq!(x.l_d.to_bits(), y.l_d.to_bits());
        assert_eq!(x.l_dg.to_bits(), y.l_dg.to_bits());
        assert_eq!(x.combined.to_bits(), y.combined.to_bits());
    }
    // and the serialized streams agree byte for byte
    let ma = std::fs::read(tmp.path().join("a/metrics.jsonl")).unwrap();
    let mb = std::fs::read(tmp.path().join("b/metrics.jsonl")).unwrap();
    assert_eq!(ma, mb);
}

#[test]
fn zero_steps_checkpoint_is_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = write_corpus(tmp.path());
    let mut t = Trainer::new(config(manifest.clone(), 0, 0), &tmp.path().join("run")).unwrap();
    let embedding_before = t.params.tree.embedding.data.clone();
    let report = t.run_to_completion().unwrap();
    assert_eq!(report.steps, 0);
    let loaded = load_checkpoint(&report.final_checkpoint).unwrap();
    assert_eq!(loaded.manifest.step, 0);
    assert_eq!(loaded.params.tree.embedding.data, embedding_before);
    assert!(loaded.opt.m.iter().all(|m| m.iter().all(|&v| v == 0.0)));
}

#[test]
fn save_load_save_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = write_corpus(tmp.path());
    let mut t = Trainer::new(config(manifest, 6, 0), &tmp.path().join("run")).unwrap();
    t.run_steps(6).unwrap();
    let dir1 = tmp.path().join("ck1");
    t.save_checkpoint(&dir1).unwrap();

    let loaded = load_checkpoint(&dir1).unwrap();
    let dir2 = tmp.path().join("ck2");
    save_checkpoint(
        &dir2,
        loaded.manifest.step,
        &loaded.params,
        &loaded.opt,
        &loaded.rng,
        &loaded.manifest.data_state,
        &loaded.vocab,
    )
    .unwrap();

    let d1 = checkpoint_digest(&dir1).unwrap();
    let d2 = checkpoint_digest(&dir2).unwrap();
    assert_eq!(d1.len(), d2.len());
    for ((n1, b1), (n2, b2)) in d1.iter().zip(&d2) {
        assert_eq!(n1, n2);
        assert_eq!(b1, b2, "file {} differs after save->load->save", n1);
    }
}

#[test]
fn resume_reproduces_next_ten_steps_bit_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = write_corpus(tmp.path());

    // uninterrupted run: 18 steps
    let full = run_fresh(&tmp.path().join("full"), manifest.clone(), 18);

    // interrupted run: 8 steps, checkpoint, resume for 10 more
    let part_dir = tmp.path().join("part");
    let mut t = Trainer::new(config(manifest.clone(), 8, 0), &part_dir).unwrap();
    t.run_steps(8).unwrap();
    let ckpt = part_dir.join("interrupt");
    t.save_checkpoint(&ckpt).unwrap();
    drop(t);

    let mut resumed_config = config(manifest, 18, 0);
    resumed_config.resume_from = Some(ckpt);
    let mut t2 = Trainer::new(resumed_config, &tmp.path().join("resumed")).unwrap();
    assert_eq!(t2.step, 8);
    let tail = t2.run_steps(10).unwrap();

    assert_eq!(tail.len(), 10);
    for (x, y) in full[8..].iter().zip(&tail) {
        assert_eq!(x.step, y.step);
        assert_eq!(x.combined.to_bits(), y.combined.to_bits(), "step {} diverged after resume", x.step);
        assert_eq!(x.l_g.to_bits(), y.l_g.to_bits());
        assert_eq!(x.l_d.to_bits(), y.l_d.to_bits());
        assert_eq!(x.l_dg.to_bits(), y.l_dg.to_bits());
    }
}

#[test]
fn finetune_line_count_mismatch_is_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("s.txt");
    let trg = tmp.path().join("t.txt");
    std::fs::write(&src, "a b\nc d\n").unwrap();
    std::fs::write(&trg, "a b\n").unwrap();
    let mut cfg = config(write_corpus(tmp.path()), 2, 0);
    cfg.mode = TrainMode::Finetune(rtdlm_core::objectives::FinetuneMode::Generator);
    cfg.src_file = Some(src);
    cfg.trg_file = Some(trg);
    let err = Trainer::new(cfg, &tmp.path().join("ft")).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("2 lines") && msg.contains("1 lines"), "{}", msg);
    assert!(matches!(err, rtdlm_core::Error::Config(_)));
}

#[test]
fn missing_corpus_is_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tmp.path().join("manifest.json");
    std::fs::write(
        &manifest,
        serde_json::json!([{ "path": tmp.path().join("nope.txt"), "language_tag": "xx" }]).to_string(),
    )
    .unwrap();
    let err = Trainer::new(config(manifest, 2, 0), &tmp.path().join("run")).unwrap_err();
    assert!(matches!(err, rtdlm_core::Error::Io(_)));
}

#[test]
fn config_json_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = write_corpus(tmp.path());
    let cfg = config(manifest, 7, 3);
    let path = tmp.path().join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let loaded = TrainConfig::load(&path).unwrap();
    assert_eq!(loaded.total_steps, 7);
    assert_eq!(loaded.checkpoint_every, 3);
    assert_eq!(loaded.model, cfg.model);
    assert_eq!(serde_json::to_string(&loaded.batch).unwrap(), "{\"rows\":4}");
}
