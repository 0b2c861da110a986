//! Finite-difference validation of every differentiable op (5 random
//! points each) and of the full combined loss on a tiny model, all in
//! fp64 with eps = 1e-4 and relative tolerance 1e-4.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rtdlm_core::autograd::check::grad_check;
use rtdlm_core::autograd::{Graph, NodeId};
use rtdlm_core::corruption::{apply_mask, make_batch, sample_spans};
use rtdlm_core::model::forward::ModelGraph;
use rtdlm_core::model::{ModelConfig, ModelParams};
use rtdlm_core::objectives::{combined_loss_on_graph, pretrain_loss, DenoiseDecoder, ObjectiveConfig};
use rtdlm_core::vocab::Vocab;
use rtdlm_core::{Result, Tensor};

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-4;
const POINTS: usize = 5;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random positive weights; a weighted sum makes the output gradient
/// non-uniform so index bugs cannot cancel.
fn weights(numel: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..numel).map(|_| rng.gen_range(0.1..2.0)).collect()
}

fn weighted_sum(g: &mut Graph<f64>, y: NodeId, w: &[f64]) -> Result<NodeId> {
    let shape = g.shape(y).to_vec();
    let wn = g.constant(shape, w.to_vec())?;
    let prod = g.mul(y, wn)?;
    g.sum(prod)
}

fn check_op(
    name: &str,
    shape: &[usize],
    out_numel: impl Fn(&[usize]) -> usize,
    build: impl Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE ^ name.len() as u64);
    for p in 0..POINTS {
        let point = random_tensor(shape, &mut rng);
        let w = weights(out_numel(shape), &mut rng);
        let err = grad_check(
            |g, x| {
                let y = build(g, x)?;
                weighted_sum(g, y, &w)
            },
            &point,
            EPS,
        )
        .unwrap_or_else(|e| panic!("{} point {}: {}", name, p, e));
        assert!(err < TOL, "{} point {}: relative error {}", name, p, err);
    }
}

#[test]
fn matmul_family() {
    check_op("matmul_lhs", &[3, 4], |_| 3 * 5, |g, x| {
        let mut c = ChaCha8Rng::seed_from_u64(1);
        let b = random_tensor(&[4, 5], &mut c);
        let bn = g.leaf(&b);
        g.matmul(x, bn)
    });
    check_op("matmul_rhs", &[4, 5], |_| 3 * 5, |g, x| {
        let mut c = ChaCha8Rng::seed_from_u64(2);
        let a = random_tensor(&[3, 4], &mut c);
        let an = g.leaf(&a);
        g.matmul(an, x)
    });
    check_op("matmul_batched_shared_rhs", &[2, 3, 4], |_| 2 * 3 * 2, |g, x| {
        let mut c = ChaCha8Rng::seed_from_u64(3);
        let b = random_tensor(&[4, 2], &mut c);
        let bn = g.leaf(&b);
        g.matmul(x, bn)
    });
    check_op("matmul_nt_lhs", &[3, 4], |_| 3 * 5, |g, x| {
        let mut c = ChaCha8Rng::seed_from_u64(4);
        let b = random_tensor(&[5, 4], &mut c);
        let bn = g.leaf(&b);
        g.matmul_nt(x, bn)
    });
    check_op("matmul_nt_rhs", &[5, 4], |_| 3 * 5, |g, x| {
        let mut c = ChaCha8Rng::seed_from_u64(5);
        let a = random_tensor(&[3, 4], &mut c);
        let an = g.leaf(&a);
        g.matmul_nt(an, x)
    });
    check_op("matmul_nt_batched_both", &[2, 3, 4], |_| 2 * 3 * 3, |g, x| {
        let mut c = ChaCha8Rng::seed_from_u64(6);
        let b = random_tensor(&[2, 3, 4], &mut c);
        let bn = g.leaf(&b);
        g.matmul_nt(x, bn)
    });
}

#[test]
fn elementwise_and_broadcast() {
    check_op("add_broadcast_bias", &[2, 3], |_| 2 * 3, |g, x| {
        let b = g.constant(vec![3], vec![0.3, -0.7, 1.1])?;
        g.add(x, b)
    });
    check_op("add_as_bias", &[3], |_| 2 * 3, |g, x| {
        let a = g.constant(vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6])?;
        g.add(a, x)
    });
    check_op("sub", &[2, 2], |_| 4, |g, x| {
        let b = g.constant(vec![2, 2], vec![0.5, -0.25, 0.75, 1.5])?;
        g.sub(x, b)
    });
    check_op("mul_broadcast", &[2, 1, 3], |_| 2 * 2 * 3, |g, x| {
        let b = g.constant(vec![2, 3], vec![0.6, -0.4, 0.8, 1.2, 0.5, -0.9])?;
        g.mul(x, b)
    });
    check_op("scale", &[4], |_| 4, |g, x| g.scale(x, -2.5));
}

#[test]
fn normalization_ops() {
    check_op("layer_norm_x", &[3, 6], |_| 18, |g, x| {
        let gamma = g.constant(vec![6], vec![1.1, 0.9, 1.3, 0.8, 1.0, 1.2])?;
        let beta = g.constant(vec![6], vec![0.1, -0.1, 0.2, 0.0, 0.3, -0.2])?;
        g.layer_norm(x, gamma, beta, 1e-5)
    });
    check_op("layer_norm_gamma", &[6], |_| 12, |g, x| {
        let mut c = ChaCha8Rng::seed_from_u64(7);
        let input = random_tensor(&[2, 6], &mut c);
        let xn = g.leaf(&input);
        let beta = g.constant(vec![6], vec![0.0; 6])?;
        g.layer_norm(xn, x, beta, 1e-5)
    });
    check_op("layer_norm_beta", &[6], |_| 12, |g, x| {
        let mut c = ChaCha8Rng::seed_from_u64(8);
        let input = random_tensor(&[2, 6], &mut c);
        let xn = g.leaf(&input);
        let gamma = g.constant(vec![6], vec![1.0; 6])?;
        g.layer_norm(xn, gamma, x, 1e-5)
    });
    check_op("softmax_last_axis", &[2, 5], |_| 10, |g, x| g.softmax(x, 1));
    check_op("softmax_mid_axis", &[2, 3, 2], |_| 12, |g, x| g.softmax(x, 1));
    check_op("log_softmax", &[2, 5], |_| 10, |g, x| g.log_softmax(x, 1));
}

#[test]
fn activations() {
    // keep relu points away from the kink
    let mut rng = ChaCha8Rng::seed_from_u64(0xAB);
    for p in 0..POINTS {
        let data: Vec<f64> = (0..6)
            .map(|_| {
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                sign * rng.gen_range(0.05..1.5)
            })
            .collect();
        let point = Tensor::new(vec![6], data).unwrap();
        let w = weights(6, &mut rng);
        let err = grad_check(
            |g, x| {
                let y = g.relu(x)?;
                weighted_sum(g, y, &w)
            },
            &point,
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "relu point {}: {}", p, err);
    }
    check_op("gelu", &[6], |_| 6, |g, x| g.gelu(x));
    check_op("sigmoid", &[6], |_| 6, |g, x| g.sigmoid(x));
}

#[test]
fn structural_ops() {
    check_op("embedding_gather", &[5, 3], |_| 4 * 3, |g, x| g.embedding(x, &[2, 0, 4, 2], &[4]));
    check_op("concat", &[2, 3], |_| 2 * 5, |g, x| {
        let other = g.constant(vec![2, 2], vec![0.5, 1.0, -0.5, 0.25])?;
        g.concat(&[x, other], 1)
    });
    check_op("slice", &[3, 4], |_| 3 * 2, |g, x| g.slice(x, 1, 1, 3));
    check_op("transpose", &[2, 3, 4], |_| 24, |g, x| g.transpose(x, 0, 2));
    check_op("reshape", &[2, 6], |_| 12, |g, x| g.reshape(x, vec![3, 4]));
    check_op("masked_fill", &[2, 4], |_| 8, |g, x| {
        g.masked_fill(x, &[true, false, false, true], &[4], 3.0)
    });
    check_op("dropout", &[3, 4], |_| 12, |g, x| {
        // fresh seeded rng per eval keeps the mask fixed
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        g.dropout(x, 0.4, &mut rng)
    });
    check_op("sum", &[7], |_| 1, |g, x| g.sum(x));
    check_op("mean", &[7], |_| 1, |g, x| g.mean(x));
}

#[test]
fn loss_ops() {
    check_op("cross_entropy_plain", &[4, 7], |_| 1, |g, x| g.cross_entropy(x, &[1, 6, 0, 3], 0.0, None));
    check_op("cross_entropy_smoothed", &[4, 7], |_| 1, |g, x| {
        g.cross_entropy(x, &[1, 6, 0, 3], 0.3, None)
    });
    check_op("cross_entropy_with_ignore", &[4, 7], |_| 1, |g, x| {
        g.cross_entropy(x, &[1, 0, 0, 3], 0.1, Some(0))
    });
    // sigmoid -> BCE chain keeps probabilities interior
    check_op("bce_through_sigmoid", &[6], |_| 1, |g, x| {
        let p = g.sigmoid(x)?;
        g.binary_cross_entropy(p, &[true, false, true, true, false, false], &[true, true, true, false, true, true])
    });
}

// ---------------------------------------------------------------------------
// Full combined loss on a tiny 2-layer model
// ---------------------------------------------------------------------------

fn tiny_batch(vocab: &Vocab, rng: &mut ChaCha8Rng) -> rtdlm_core::corruption::PretrainBatch {
    let lines = ["c d e f g h", "d f c c g"];
    let mut pairs = Vec::new();
    for line in lines {
        let ids = vocab.encode(line);
        let spans = sample_spans(ids.len(), 0.3, 2.0, rng);
        pairs.push(apply_mask(&ids, &spans, vocab).unwrap());
    }
    make_batch(&pairs, 16, &[0, 0]).unwrap()
}

fn full_model_check(denoise: DenoiseDecoder) {
    let vocab = Vocab::build(["c d e f g h"], 1, 100, &[]).unwrap();
    let mut config = ModelConfig::tiny(vocab.size());
    config.enc_layers = 2;
    config.gen_dec_layers = 2;
    config.dropout = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let params = ModelParams::<f64>::init(config, &mut rng).unwrap();
    let batch = tiny_batch(&vocab, &mut rng);
    let cfg = ObjectiveConfig {
        lambda: 10.0,
        smoothing: 0.1,
        use_denoising: true,
        denoise_decoder: denoise,
        replacement: Default::default(),
        threshold: 0.5,
    };

    // one live pass fixes every discrete choice
    let live = pretrain_loss(&params, &batch, &cfg, &mut rng, None).unwrap();
    let choices = live.choices.clone().unwrap();

    let mut tensors: Vec<(usize, String, Tensor<f64>)> = Vec::new();
    {
        let mut i = 0usize;
        params.tree.for_each(&mut |path, t| {
            tensors.push((i, path, t.clone()));
            i += 1;
        });
    }
    for (idx, path, tensor) in tensors {
        let mut point = tensor.clone();
        point.requires_grad = true;
        let err = grad_check(
            |g, x| {
                let model = ModelGraph::insert_with_override(g, &params, idx, x);
                let mut quiet = ChaCha8Rng::seed_from_u64(0);
                let out = combined_loss_on_graph(g, &model, &params, &batch, &cfg, &mut quiet, Some(&choices))?;
                Ok(out.combined)
            },
            &point,
            EPS,
        )
        .unwrap_or_else(|e| panic!("{}: {}", path, e));
        assert!(err < TOL, "{}: relative error {}", path, err);
    }
}

#[test]
fn combined_loss_gradients_match_finite_differences() {
    full_model_check(DenoiseDecoder::Generator);
}

#[test]
fn combined_loss_gradients_with_discriminator_denoiser() {
    full_model_check(DenoiseDecoder::Discriminator);
}
