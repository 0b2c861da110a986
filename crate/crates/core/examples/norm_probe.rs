//! Instrument raw gradient norms for a few steps.
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtdlm_core::corruption::{apply_mask, make_batch, sample_spans};
use rtdlm_core::model::{ModelConfig, ModelParams};
use rtdlm_core::objectives::{pretrain_loss, ObjectiveConfig};
use rtdlm_core::optim::{adam_step, grad_global_norm, OptimState};
use rtdlm_core::vocab::Vocab;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let words: Vec<String> = (0..30).map(|i| format!("w{:02}", i)).collect();
    let mut lines = Vec::new();
    for _ in 0..64 {
        let len = rng.gen_range(10..=14);
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
    for step in 0..40 {
        let mut pairs = Vec::new();
        for r in 0..8 {
            let row = &rows[(step * 8 + r) % 64];
            let spans = sample_spans(row.len(), 0.15, 3.0, &mut rng);
            pairs.push(apply_mask(row, &spans, &vocab).unwrap());
        }
        let batch = make_batch(&pairs, 256, &vec![0; 8]).unwrap();
        let mut out = pretrain_loss(&params, &batch, &cfg, &mut rng, None).unwrap();
        out.graph.backward(out.loss).unwrap();
        params.zero_grads();
        out.model.collect_grads(&out.graph, &mut params).unwrap();
        let norm = grad_global_norm(&params);
        if step % 5 == 0 {
            println!("step {:2}  L_G {:.4} L_D {:.4} combined {:.3}  grad_norm {:.3}", step, out.output.l_g, out.output.l_d, out.output.combined, norm);
        }
        adam_step(&mut params, &mut opt, 3e-4).unwrap();
    }
}
