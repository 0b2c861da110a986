//! The shared-encoder / dual-decoder transformer.
//!
//! One parameter set holds the encoder, the causal generator decoder, the
//! bidirectional discriminator decoder, and the detection head. The token
//! embedding matrix is a single tensor reused for every input lookup and
//! for the generator's output projection.

pub mod forward;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use forward::ModelGraph;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub gen_dec_layers: usize,
    pub disc_dec_layers: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// Desk-scale default: keeps the tiny-discriminator ratio of the full
    /// recipe (discriminator decoder shallower than the generator's).
    pub fn desk_default(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 128,
            ffn_dim: 512,
            n_heads: 4,
            enc_layers: 4,
            gen_dec_layers: 4,
            disc_dec_layers: 2,
            max_positions: 256,
            dropout: 0.1,
            tie_embeddings: true,
        }
    }

    /// Minimal config for gradient checking and unit tests.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 8,
            ffn_dim: 16,
            n_heads: 2,
            enc_layers: 1,
            gen_dec_layers: 1,
            disc_dec_layers: 1,
            max_positions: 16,
            dropout: 0.0,
            tie_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 6 {
            return Err(Error::Config("vocab_size must cover the 5 specials plus content".into()));
        }
        if self.max_positions < 2 {
            return Err(Error::Config("max_positions must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} out of [0,1)", self.dropout)));
        }
        if !self.tie_embeddings {
            return Err(Error::Config("untied embeddings are not supported".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

// ---------------------------------------------------------------------------
// Parameter containers, generic over the leaf payload so the same structure
// describes tensors (storage) and node ids (one forward pass).
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Attn<P> {
    pub wq: P,
    pub bq: P,
    pub wk: P,
    pub bk: P,
    pub wv: P,
    pub bv: P,
    pub wo: P,
    pub bo: P,
}

#[derive(Debug, Clone)]
pub struct Norm<P> {
    pub gamma: P,
    pub beta: P,
}

#[derive(Debug, Clone)]
pub struct Ffn<P> {
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
}

#[derive(Debug, Clone)]
pub struct EncLayer<P> {
    pub ln1: Norm<P>,
    pub attn: Attn<P>,
    pub ln2: Norm<P>,
    pub ffn: Ffn<P>,
}

#[derive(Debug, Clone)]
pub struct DecLayer<P> {
    pub ln1: Norm<P>,
    pub self_attn: Attn<P>,
    pub ln_cross: Norm<P>,
    pub cross_attn: Attn<P>,
    pub ln2: Norm<P>,
    pub ffn: Ffn<P>,
}

/// Complete parameter tree. `P` is `Tensor<T>` for storage and `NodeId`
/// inside a recorded graph.
#[derive(Debug, Clone)]
pub struct ParamTree<P> {
    pub embedding: P,
    pub enc_pos: P,
    pub dec_pos: P,
    pub enc_layers: Vec<EncLayer<P>>,
    pub enc_final: Norm<P>,
    pub gen_layers: Vec<DecLayer<P>>,
    pub gen_final: Norm<P>,
    pub disc_layers: Vec<DecLayer<P>>,
    pub disc_final: Norm<P>,
    pub detect_w: P,
}

macro_rules! leaf_walkers {
    ($ty:ident { $($field:ident),+ }) => {
        impl<P> $ty<P> {
            fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> $ty<Q> {
                $ty { $($field: f(&self.$field)),+ }
            }
            fn for_each<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
                $(f(format!("{}.{}", prefix, stringify!($field)), &self.$field);)+
            }
            fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut P)) {
                $(f(format!("{}.{}", prefix, stringify!($field)), &mut self.$field);)+
            }
        }
    };
}

leaf_walkers!(Attn { wq, bq, wk, bk, wv, bv, wo, bo });
leaf_walkers!(Norm { gamma, beta });
leaf_walkers!(Ffn { w1, b1, w2, b2 });

macro_rules! layer_walkers {
    ($ty:ident { $($field:ident),+ }) => {
        impl<P> $ty<P> {
            fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> $ty<Q> {
                $ty { $($field: self.$field.map(f)),+ }
            }
            fn for_each<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
                $(self.$field.for_each(&format!("{}.{}", prefix, stringify!($field)), f);)+
            }
            fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut P)) {
                $(self.$field.for_each_mut(&format!("{}.{}", prefix, stringify!($field)), f);)+
            }
        }
    };
}

layer_walkers!(EncLayer { ln1, attn, ln2, ffn });
layer_walkers!(DecLayer { ln1, self_attn, ln_cross, cross_attn, ln2, ffn });

impl<P> ParamTree<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> ParamTree<Q> {
        ParamTree {
            embedding: f(&self.embedding),
            enc_pos: f(&self.enc_pos),
            dec_pos: f(&self.dec_pos),
            enc_layers: self.enc_layers.iter().map(|l| l.map(f)).collect(),
            enc_final: self.enc_final.map(f),
            gen_layers: self.gen_layers.iter().map(|l| l.map(f)).collect(),
            gen_final: self.gen_final.map(f),
            disc_layers: self.disc_layers.iter().map(|l| l.map(f)).collect(),
            disc_final: self.disc_final.map(f),
            detect_w: f(&self.detect_w),
        }
    }

    /// Stable-order traversal; checkpoints, the optimizer, and gradient
    /// collection all rely on this order.
    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(String, &'a P)) {
        f("embedding".into(), &self.embedding);
        f("enc_pos".into(), &self.enc_pos);
        f("dec_pos".into(), &self.dec_pos);
        for (i, l) in self.enc_layers.iter().enumerate() {
            l.for_each(&format!("enc.{}", i), f);
        }
        self.enc_final.for_each("enc.final", f);
        for (i, l) in self.gen_layers.iter().enumerate() {
            l.for_each(&format!("gen.{}", i), f);
        }
        self.gen_final.for_each("gen.final", f);
        for (i, l) in self.disc_layers.iter().enumerate() {
            l.for_each(&format!("disc.{}", i), f);
        }
        self.disc_final.for_each("disc.final", f);
        f("detect_w".into(), &self.detect_w);
    }

    pub fn for_each_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut P)) {
        f("embedding".into(), &mut self.embedding);
        f("enc_pos".into(), &mut self.enc_pos);
        f("dec_pos".into(), &mut self.dec_pos);
        for (i, l) in self.enc_layers.iter_mut().enumerate() {
            l.for_each_mut(&format!("enc.{}", i), f);
        }
        self.enc_final.for_each_mut("enc.final", f);
        for (i, l) in self.gen_layers.iter_mut().enumerate() {
            l.for_each_mut(&format!("gen.{}", i), f);
        }
        self.gen_final.for_each_mut("gen.final", f);
        for (i, l) in self.disc_layers.iter_mut().enumerate() {
            l.for_each_mut(&format!("disc.{}", i), f);
        }
        self.disc_final.for_each_mut("disc.final", f);
        f("detect_w".into(), &mut self.detect_w);
    }
}

/// Learned tensors plus the config that shaped them.
#[derive(Debug, Clone)]
pub struct ModelParams<T: Scalar> {
    pub config: ModelConfig,
    pub tree: ParamTree<Tensor<T>>,
}

const INIT_STD: f64 = 0.02;

fn normal_tensor<T: Scalar, R: Rng>(shape: Vec<usize>, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0f64, INIT_STD).expect("valid normal");
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel).map(|_| T::from_f64(dist.sample(rng))).collect();
    let mut t = Tensor::new(shape, data).expect("shape/data agree");
    t.requires_grad = true;
    t
}

fn zeros_param<T: Scalar>(shape: Vec<usize>) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    t.requires_grad = true;
    t
}

fn ones_param<T: Scalar>(shape: Vec<usize>) -> Tensor<T> {
    let mut t = Tensor::filled(shape, T::one());
    t.requires_grad = true;
    t
}

fn init_attn<T: Scalar, R: Rng>(d: usize, rng: &mut R) -> Attn<Tensor<T>> {
    Attn {
        wq: normal_tensor(vec![d, d], rng),
        bq: zeros_param(vec![d]),
        wk: normal_tensor(vec![d, d], rng),
        bk: zeros_param(vec![d]),
        wv: normal_tensor(vec![d, d], rng),
        bv: zeros_param(vec![d]),
        wo: normal_tensor(vec![d, d], rng),
        bo: zeros_param(vec![d]),
    }
}

fn init_norm<T: Scalar>(d: usize) -> Norm<Tensor<T>> {
    Norm { gamma: ones_param(vec![d]), beta: zeros_param(vec![d]) }
}

fn init_ffn<T: Scalar, R: Rng>(d: usize, f: usize, rng: &mut R) -> Ffn<Tensor<T>> {
    Ffn {
        w1: normal_tensor(vec![d, f], rng),
        b1: zeros_param(vec![f]),
        w2: normal_tensor(vec![f, d], rng),
        b2: zeros_param(vec![d]),
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.ffn_dim;
        let enc_layers = (0..config.enc_layers)
            .map(|_| EncLayer {
                ln1: init_norm(d),
                attn: init_attn(d, rng),
                ln2: init_norm(d),
                ffn: init_ffn(d, f, rng),
            })
            .collect();
        let dec_stack = |n: usize, rng: &mut R| -> Vec<DecLayer<Tensor<T>>> {
            (0..n)
                .map(|_| DecLayer {
                    ln1: init_norm(d),
                    self_attn: init_attn(d, rng),
                    ln_cross: init_norm(d),
                    cross_attn: init_attn(d, rng),
                    ln2: init_norm(d),
                    ffn: init_ffn(d, f, rng),
                })
                .collect()
        };
        let gen_layers = dec_stack(config.gen_dec_layers, rng);
        let disc_layers = dec_stack(config.disc_dec_layers, rng);
        let tree = ParamTree {
            embedding: normal_tensor(vec![config.vocab_size, d], rng),
            enc_pos: normal_tensor(vec![config.max_positions, d], rng),
            dec_pos: normal_tensor(vec![config.max_positions, d], rng),
            enc_layers,
            enc_final: init_norm(d),
            gen_layers,
            gen_final: init_norm(d),
            disc_layers,
            disc_final: init_norm(d),
            detect_w: normal_tensor(vec![d, 1], rng),
        };
        Ok(ModelParams { config, tree })
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.tree.for_each(&mut |_, t| n += t.numel());
        n
    }

    pub fn zero_grads(&mut self) {
        self.tree.for_each_mut(&mut |_, t| t.zero_grad());
    }

    /// Precision-converting copy; used to run fp64 gradient checks on an
    /// fp32-trained model.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams { config: self.config.clone(), tree: self.tree.map(&mut |t| t.cast::<U>()) }
    }

    /// Parameter census: path, shape, element count per tensor, plus the
    /// grand total. Serialized as the checkpoint's shape manifest.
    pub fn census(&self) -> Census {
        let mut entries = Vec::new();
        self.tree.for_each(&mut |path, t| {
            entries.push(CensusEntry { path, shape: t.shape.clone(), numel: t.numel() });
        });
        let total = entries.iter().map(|e| e.numel).sum();
        Census { entries, total }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CensusEntry {
    pub path: String,
    pub shape: Vec<usize>,
    pub numel: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Census {
    pub entries: Vec<CensusEntry>,
    pub total: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Closed-form parameter count for a config.
    fn analytic_count(c: &ModelConfig) -> usize {
        let d = c.d_model;
        let f = c.ffn_dim;
        let attn = 4 * d * d + 4 * d;
        let norm = 2 * d;
        let ffn = d * f + f + f * d + d;
        let enc_layer = norm + attn + norm + ffn;
        let dec_layer = norm + attn + norm + attn + norm + ffn;
        c.vocab_size * d
            + 2 * c.max_positions * d
            + c.enc_layers * enc_layer
            + c.gen_dec_layers * dec_layer
            + c.disc_dec_layers * dec_layer
            + 3 * norm
            + d
    }

    #[test]
    fn census_matches_analytic_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let config = ModelConfig::desk_default(100);
        let params = ModelParams::<f32>::init(config.clone(), &mut rng).unwrap();
        assert_eq!(params.num_params(), analytic_count(&config));
        assert_eq!(params.census().total, params.num_params());
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::tiny(20);
        assert!(c.validate().is_ok());
        c.n_heads = 3; // 8 % 3 != 0
        assert!(c.validate().is_err());
        let mut c2 = ModelConfig::tiny(20);
        c2.vocab_size = 3;
        assert!(c2.validate().is_err());
    }

    #[test]
    fn traversal_order_is_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ModelParams::<f32>::init(ModelConfig::tiny(20), &mut rng).unwrap();
        let mut paths1 = Vec::new();
        params.tree.for_each(&mut |p, _| paths1.push(p));
        let mut paths2 = Vec::new();
        params.tree.for_each(&mut |p, _| paths2.push(p));
        assert_eq!(paths1, paths2);
        assert!(paths1.contains(&"embedding".to_string()));
        assert!(paths1.contains(&"enc.0.attn.wq".to_string()));
        assert!(paths1.contains(&"gen.final.gamma".to_string()));
        assert!(paths1.contains(&"detect_w".to_string()));
        // no duplicate paths
        let mut sorted = paths1.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), paths1.len());
    }
}
