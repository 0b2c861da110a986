//! Forward passes over a recorded graph.
//!
//! Pre-norm blocks throughout. The generator decoder self-attends causally;
//! the discriminator decoder self-attends bidirectionally and adds the
//! per-token detection head V = sigmoid(H_d . detect_w).

use rand::Rng;

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

use super::{Attn, DecLayer, ModelParams, Norm, ParamTree};

const NEG_FILL: f64 = -1e9;
const LN_EPS: f64 = 1e-5;

/// Boolean attention mask; true marks scores to suppress.
pub struct AttnMask {
    pub flags: Vec<bool>,
    pub shape: Vec<usize>,
}

impl AttnMask {
    /// Suppresses attention to [PAD] key positions: shape [rows, 1, 1, len].
    pub fn key_padding(token_mask: &[bool], rows: usize, len: usize) -> AttnMask {
        let flags = token_mask.iter().map(|&real| !real).collect();
        AttnMask { flags, shape: vec![rows, 1, 1, len] }
    }

    /// Causal mask: position i may not see j > i; shape [1, 1, len, len].
    pub fn causal(len: usize) -> AttnMask {
        let mut flags = vec![false; len * len];
        for i in 0..len {
            for j in (i + 1)..len {
                flags[i * len + j] = true;
            }
        }
        AttnMask { flags, shape: vec![1, 1, len, len] }
    }
}

/// The parameter tree registered on one graph, each tensor as a leaf node.
/// Because every tensor is inserted exactly once, shared uses (the tied
/// embedding) accumulate their gradients on a single node.
pub struct ModelGraph {
    pub tree: ParamTree<NodeId>,
    pub rows_hint: usize,
}

impl ModelGraph {
    /// Registers params for training (leaves keep `requires_grad`).
    pub fn insert<T: Scalar>(g: &mut Graph<T>, params: &ModelParams<T>) -> ModelGraph {
        let tree = params.tree.map(&mut |t| g.leaf(t));
        ModelGraph { tree, rows_hint: 0 }
    }

    /// Registers params as constants (inference).
    pub fn insert_frozen<T: Scalar>(g: &mut Graph<T>, params: &ModelParams<T>) -> ModelGraph {
        let tree = params.tree.map(&mut |t| {
            let mut frozen = t.clone();
            frozen.requires_grad = false;
            g.leaf(&frozen)
        });
        ModelGraph { tree, rows_hint: 0 }
    }

    /// Registers params, substituting an existing node for the tensor at
    /// `override_index` (traversal order). Lets a finite-difference harness
    /// probe one parameter tensor while the rest stay constant.
    pub fn insert_with_override<T: Scalar>(
        g: &mut Graph<T>,
        params: &ModelParams<T>,
        override_index: usize,
        node: NodeId,
    ) -> ModelGraph {
        let mut i = 0usize;
        let tree = params.tree.map(&mut |t| {
            let id = if i == override_index {
                node
            } else {
                let mut frozen = t.clone();
                frozen.requires_grad = false;
                g.leaf(&frozen)
            };
            i += 1;
            id
        });
        ModelGraph { tree, rows_hint: 0 }
    }

    /// Accumulates graph gradients back into the parameter tensors.
    /// Missing gradients (unreached tensors) contribute zero.
    pub fn collect_grads<T: Scalar>(&self, g: &Graph<T>, params: &mut ModelParams<T>) -> Result<()> {
        let mut ids = Vec::new();
        self.tree.for_each(&mut |_, id| ids.push(*id));
        let mut idx = 0usize;
        let mut res = Ok(());
        params.tree.for_each_mut(&mut |_, t| {
            if res.is_ok() {
                if let Some(grad) = g.grad(ids[idx]) {
                    if let Err(e) = t.accumulate_grad(grad) {
                        res = Err(e);
                    }
                }
            }
            idx += 1;
        });
        res
    }
}

fn linear<T: Scalar>(g: &mut Graph<T>, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

fn norm<T: Scalar>(g: &mut Graph<T>, x: NodeId, n: &Norm<NodeId>) -> Result<NodeId> {
    g.layer_norm(x, n.gamma, n.beta, LN_EPS)
}

#[allow(clippy::too_many_arguments)]
fn multi_head_attention<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    q_in: NodeId,
    kv_in: NodeId,
    p: &Attn<NodeId>,
    n_heads: usize,
    masks: &[&AttnMask],
    dropout: f64,
    rng: &mut R,
) -> Result<NodeId> {
    let (rows, lq, d) = {
        let s = g.shape(q_in);
        (s[0], s[1], s[2])
    };
    let lk = g.shape(kv_in)[1];
    let dh = d / n_heads;

    let split = |g: &mut Graph<T>, x: NodeId, len: usize| -> Result<NodeId> {
        let r = g.reshape(x, vec![rows, len, n_heads, dh])?;
        g.transpose(r, 1, 2) // [rows, heads, len, dh]
    };

    let q = linear(g, q_in, p.wq, p.bq)?;
    let k = linear(g, kv_in, p.wk, p.bk)?;
    let v = linear(g, kv_in, p.wv, p.bv)?;
    let qh = split(g, q, lq)?;
    let kh = split(g, k, lk)?;
    let vh = split(g, v, lk)?;

    let mut scores = g.matmul_nt(qh, kh)?; // [rows, heads, lq, lk]
    scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    for m in masks {
        scores = g.masked_fill(scores, &m.flags, &m.shape, NEG_FILL)?;
    }
    let mut probs = g.softmax(scores, 3)?;
    probs = g.dropout(probs, dropout, rng)?;
    let ctx = g.matmul(probs, vh)?; // [rows, heads, lq, dh]
    let merged = g.transpose(ctx, 1, 2)?;
    let flat = g.reshape(merged, vec![rows, lq, d])?;
    linear(g, flat, p.wo, p.bo)
}

#[allow(clippy::too_many_arguments)]
fn ffn_block<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    x: NodeId,
    p: &super::Ffn<NodeId>,
    dropout: f64,
    rng: &mut R,
) -> Result<NodeId> {
    let h = linear(g, x, p.w1, p.b1)?;
    let a = g.gelu(h)?;
    let a = g.dropout(a, dropout, rng)?;
    linear(g, a, p.w2, p.b2)
}

fn embed_tokens<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    model: &ModelGraph,
    pos_table: NodeId,
    ids: &[usize],
    rows: usize,
    len: usize,
    dropout: f64,
    rng: &mut R,
) -> Result<NodeId> {
    let tok = g.embedding(model.tree.embedding, ids, &[rows, len])?;
    let pos = g.slice(pos_table, 0, 0, len)?; // [len, d]
    let x = g.add(tok, pos)?;
    g.dropout(x, dropout, rng)
}

fn check_len<T: Scalar>(params: &ModelParams<T>, len: usize, what: &str) -> Result<()> {
    if len > params.config.max_positions {
        return Err(Error::invalid(
            "forward",
            format!("{} length {} exceeds max positions {}", what, len, params.config.max_positions),
        ));
    }
    Ok(())
}

/// Encoder over a padded source batch: returns H_e of shape [rows, len, d].
#[allow(clippy::too_many_arguments)]
pub fn encode<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    model: &ModelGraph,
    params: &ModelParams<T>,
    src: &[usize],
    src_mask: &[bool],
    rows: usize,
    len: usize,
    rng: &mut R,
) -> Result<NodeId> {
    check_len(params, len, "source")?;
    let dropout = params.config.dropout;
    let pad = AttnMask::key_padding(src_mask, rows, len);
    let mut x = embed_tokens(g, model, model.tree.enc_pos, src, rows, len, dropout, rng)?;
    for layer in &model.tree.enc_layers {
        let normed = norm(g, x, &layer.ln1)?;
        let attn = multi_head_attention(g, normed, normed, &layer.attn, params.config.n_heads, &[&pad], dropout, rng)?;
        let attn = g.dropout(attn, dropout, rng)?;
        x = g.add(x, attn)?;
        let normed2 = norm(g, x, &layer.ln2)?;
        let ff = ffn_block(g, normed2, &layer.ffn, dropout, rng)?;
        let ff = g.dropout(ff, dropout, rng)?;
        x = g.add(x, ff)?;
    }
    norm(g, x, &model.tree.enc_final)
}

#[allow(clippy::too_many_arguments)]
fn decoder_stack<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    model: &ModelGraph,
    params: &ModelParams<T>,
    layers: &[DecLayer<NodeId>],
    final_norm: &Norm<NodeId>,
    h_enc: NodeId,
    src_mask: &[bool],
    trg_ids: &[usize],
    trg_mask: &[bool],
    causal: bool,
    rng: &mut R,
) -> Result<NodeId> {
    let (rows, src_len) = {
        let s = g.shape(h_enc);
        (s[0], s[1])
    };
    let len = trg_ids.len() / rows;
    check_len(params, len, "target")?;
    let dropout = params.config.dropout;
    let self_pad = AttnMask::key_padding(trg_mask, rows, len);
    let causal_mask = AttnMask::causal(len);
    let self_masks: Vec<&AttnMask> = if causal {
        vec![&causal_mask, &self_pad]
    } else {
        vec![&self_pad]
    };
    let cross_pad = AttnMask::key_padding(src_mask, rows, src_len);

    let mut x = embed_tokens(g, model, model.tree.dec_pos, trg_ids, rows, len, dropout, rng)?;
    for layer in layers {
        let normed = norm(g, x, &layer.ln1)?;
        let attn =
            multi_head_attention(g, normed, normed, &layer.self_attn, params.config.n_heads, &self_masks, dropout, rng)?;
        let attn = g.dropout(attn, dropout, rng)?;
        x = g.add(x, attn)?;

        let normed_c = norm(g, x, &layer.ln_cross)?;
        let cross = multi_head_attention(
            g,
            normed_c,
            h_enc,
            &layer.cross_attn,
            params.config.n_heads,
            &[&cross_pad],
            dropout,
            rng,
        )?;
        let cross = g.dropout(cross, dropout, rng)?;
        x = g.add(x, cross)?;

        let normed2 = norm(g, x, &layer.ln2)?;
        let ff = ffn_block(g, normed2, &layer.ffn, dropout, rng)?;
        let ff = g.dropout(ff, dropout, rng)?;
        x = g.add(x, ff)?;
    }
    norm(g, x, final_norm)
}

/// Causal generator decoder; returns logits [rows, len, vocab] through the
/// tied embedding projection.
#[allow(clippy::too_many_arguments)]
pub fn generator_decode<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    model: &ModelGraph,
    params: &ModelParams<T>,
    h_enc: NodeId,
    src_mask: &[bool],
    trg_input: &[usize],
    trg_mask: &[bool],
    rng: &mut R,
) -> Result<NodeId> {
    let h = decoder_stack(
        g,
        model,
        params,
        &model.tree.gen_layers,
        &model.tree.gen_final,
        h_enc,
        src_mask,
        trg_input,
        trg_mask,
        true,
        rng,
    )?;
    g.matmul_nt(h, model.tree.embedding)
}

/// Bidirectional discriminator decoder; returns (H_d, V) where V is the
/// per-token probability of ORIGINAL, shape [rows, len].
#[allow(clippy::too_many_arguments)]
pub fn discriminator_decode<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    model: &ModelGraph,
    params: &ModelParams<T>,
    h_enc: NodeId,
    src_mask: &[bool],
    sampled_trg: &[usize],
    trg_mask: &[bool],
    rng: &mut R,
) -> Result<(NodeId, NodeId)> {
    let h = decoder_stack(
        g,
        model,
        params,
        &model.tree.disc_layers,
        &model.tree.disc_final,
        h_enc,
        src_mask,
        sampled_trg,
        trg_mask,
        false,
        rng,
    )?;
    let (rows, len) = {
        let s = g.shape(h);
        (s[0], s[1])
    };
    let logits = g.matmul(h, model.tree.detect_w)?; // [rows, len, 1]
    let flat = g.reshape(logits, vec![rows, len])?;
    let v = g.sigmoid(flat)?;
    Ok((h, v))
}

/// Denoising generator pass routed through the discriminator decoder
/// instead of the generator's (the configurable alternative). Causal
/// masking is forced: with the shifted input, bidirectional attention
/// would expose each gold token to its own predictor.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_as_denoiser<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    model: &ModelGraph,
    params: &ModelParams<T>,
    h_enc: NodeId,
    src_mask: &[bool],
    trg_input: &[usize],
    trg_mask: &[bool],
    rng: &mut R,
) -> Result<NodeId> {
    let h = decoder_stack(
        g,
        model,
        params,
        &model.tree.disc_layers,
        &model.tree.disc_final,
        h_enc,
        src_mask,
        trg_input,
        trg_mask,
        true,
        rng,
    )?;
    g.matmul_nt(h, model.tree.embedding)
}
