//! Scratch probe: plain seq2seq copy memorization speed (mode G).
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtdlm_core::corruption::make_pair_batch;
use rtdlm_core::model::{ModelConfig, ModelParams};
use rtdlm_core::objectives::{finetune_loss, FinetuneMode, ObjectiveConfig};
use rtdlm_core::optim::{adam_step, clip_grad_norm, OptimState};
use rtdlm_core::vocab::Vocab;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let words: Vec<String> = (0..30).map(|i| format!("w{:02}", i)).collect();
    let mut lines = Vec::new();
    for _ in 0..64 {
        let len = rng.gen_range(6..=10);
        let line: Vec<&str> = (0..len).map(|_| words[rng.gen_range(0..30)].as_str()).collect();
        lines.push(line.join(" "));
    }
    let vocab = Vocab::build(lines.iter(), 1, 1000, &[]).unwrap();
    let mut config = ModelConfig::desk_default(vocab.size());
    config.dropout = 0.0;
    let mut params = ModelParams::<f32>::init(config, &mut rng).unwrap();
    let mut opt = OptimState::new(&params);
    let cfg = ObjectiveConfig { smoothing: 0.0, ..Default::default() };
    let rows: Vec<Vec<usize>> = lines.iter().map(|l| vocab.encode(l)).collect();
    let t0 = std::time::Instant::now();
    for step in 0..600u64 {
        let idx: Vec<usize> = (0..8).map(|r| ((step as usize * 8 + r) % 64)).collect();
        let src: Vec<Vec<usize>> = idx.iter().map(|&i| rows[i].clone()).collect();
        let batch = make_pair_batch(&src, &src, 256).unwrap();
        let mut out = finetune_loss(&params, &batch, FinetuneMode::Generator, &cfg, &mut rng).unwrap();
        out.graph.backward(out.loss).unwrap();
        params.zero_grads();
        out.model.collect_grads(&out.graph, &mut params).unwrap();
        clip_grad_norm(&mut params, 5.0);
        let lr = 3e-4 * (step.min(100) as f64 / 100.0);
        adam_step(&mut params, &mut opt, lr).unwrap();
        if step % 50 == 0 {
            println!("step {:3}  L_G {:.4}  [{:.1}s]", step, out.output.l_g, t0.elapsed().as_secs_f64());
        }
    }
}
