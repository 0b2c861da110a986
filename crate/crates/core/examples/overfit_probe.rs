//! Scratch probe: step timing + convergence on a 64-sentence corpus.
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtdlm_core::trainer::{BatchSize, ModelSpec, TrainConfig, TrainMode, Trainer};

fn main() {
    let dir = std::path::PathBuf::from("/tmp/overfit_probe");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    // synthetic corpus: 64 sentences, lengths 5..9, vocab of 40 words
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let words: Vec<String> = (0..20).map(|i| format!("w{:02}", i)).collect();
    let mut lines = Vec::new();
    for _ in 0..64 {
        let len = rng.gen_range(4..=6);
        let phrase: Vec<&str> = (0..len).map(|_| words[rng.gen_range(0..20)].as_str()).collect();
        let mut sentence = phrase.clone();
        sentence.extend_from_slice(&phrase);
        lines.push(sentence.join(" "));
    }
    std::fs::write(dir.join("corpus.txt"), lines.join("\n")).unwrap();
    std::fs::write(
        dir.join("manifest.json"),
        format!(r#"[{{"path": "{}", "language_tag": "en"}}]"#, dir.join("corpus.txt").display()),
    )
    .unwrap();

    let config = TrainConfig {
        model: ModelSpec::desk_default(),
        mode: TrainMode::Pretrain,
        seed: 1,
        total_steps: 2000,
        peak_lr: 3e-4,
        warmup_steps: 100,
        schedule: rtdlm_core::optim::ScheduleKind::Constant,
        batch: BatchSize::Rows(16),
        lambda: 10.0,
        mask_ratio: 0.25,
        mean_span: 3.0,
        label_smoothing: 0.0,
        use_denoising: true,
        denoise_decoder: Default::default(),
        replacement: Default::default(),
        grad_clip: Some(5.0),
        checkpoint_every: 0,
        min_freq: 1,
        max_vocab: 1000,
        corpus_manifest: Some(dir.join("manifest.json")),
        src_file: None,
        trg_file: None,
        init_checkpoint: None,
        resume_from: None,
    };
    let mut config = config;
    config.model.dropout = 0.0;
    let mut t = Trainer::new(config, &dir.join("out")).unwrap();
    let t0 = std::time::Instant::now();
    for chunk in 0..20 {
        let outs = t.run_steps(100).unwrap();
        let last = outs.last().unwrap();
        let lg_avg: f64 = outs.iter().map(|o| o.l_g).sum::<f64>() / outs.len() as f64;
        let acc_avg: f64 = outs.iter().map(|o| o.det_acc).sum::<f64>() / outs.len() as f64;
        println!(
            "step {:4}  L_G(avg100) {:.4}  L_D {:.4}  L_DG {:.4}  det_acc(avg) {:.3}  p {}  [{:.1}s]",
            last.step, lg_avg, last.l_d, last.l_dg, acc_avg, last.p, t0.elapsed().as_secs_f64()
        );
        if lg_avg < 0.05 && acc_avg > 0.96 {
            println!("converged early at chunk {}", chunk);
            break;
        }
    }
    println!("total {:.1}s for {} steps", t0.elapsed().as_secs_f64(), t.step);
}
