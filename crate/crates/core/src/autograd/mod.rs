//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records one forward pass as a linear tape of nodes in
//! creation (= topological) order. `backward` walks the tape once in
//! reverse, accumulating gradients into every `requires_grad` node.
//! Fresh graph per step; nothing is retained across steps.

pub mod check;
pub mod kernels;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use kernels::*;

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

enum Op<T: Scalar> {
    Leaf,
    Matmul { trans_b: bool },
    Add,
    Sub,
    Mul,
    Scale(f64),
    LayerNorm { xhat: Vec<T>, rstd: Vec<T> },
    Softmax { axis: usize },
    LogSoftmax { axis: usize },
    Relu,
    Gelu,
    Sigmoid,
    Gather { ids: Vec<usize> },
    Dropout { keep_inv: f64, mask: Vec<bool> },
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    Transpose { a: usize, b: usize },
    Reshape,
    MaskedFill { mask: Vec<bool> },
    CrossEntropy { targets: Vec<usize>, smoothing: f64, ignore_index: Option<usize>, probs: Vec<T>, count: usize },
    Bce { labels: Vec<bool>, mask: Vec<bool>, clamped: Vec<T>, count: usize },
    Sum,
    Mean,
}

struct Node<T: Scalar> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

/// Recorded forward graph plus gradient state.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    checked: bool,
    backward_done: bool,
}

/// Probabilities entering BCE are clamped into [BCE_EPS, 1 - BCE_EPS].
pub const BCE_EPS: f64 = 1e-7;

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), checked: false, backward_done: false }
    }

    /// When set, every op validates input finiteness and errors on NaN/Inf.
    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    // -- node construction ---------------------------------------------------

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, shape: Vec<usize>, data: Vec<T>) -> NodeId {
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        self.nodes.push(Node { op, inputs, shape, data, grad: None, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts a tensor as a leaf, honoring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            shape: t.shape.clone(),
            data: t.data.clone(),
            grad: None,
            requires_grad: t.requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid("constant", format!("shape {:?} vs {} values", shape, data.len())));
        }
        Ok(self.push(Op::Leaf, vec![], shape, data))
    }

    // -- accessors -----------------------------------------------------------

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor<T> {
        let n = &self.nodes[id.0];
        Tensor { shape: n.shape.clone(), data: n.data.clone(), requires_grad: false, grad: None }
    }

    fn check_finite(&self, op: &'static str, ids: &[NodeId]) -> Result<()> {
        if self.checked {
            for id in ids {
                if self.nodes[id.0].data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op });
                }
            }
        }
        Ok(())
    }

    // -- elementwise / broadcast ops ------------------------------------------

    fn binary_broadcast(&mut self, op_name: &'static str, op: Op<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_finite(op_name, &[a, b])?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or(Error::ShapeMismatch {
            op: op_name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let numel: usize = out_shape.iter().product();
        let mut out = vec![T::zero(); numel];
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        if sa == sb {
            match op {
                Op::Add => out.iter_mut().zip(da.iter().zip(db)).for_each(|(o, (x, y))| *o = *x + *y),
                Op::Sub => out.iter_mut().zip(da.iter().zip(db)).for_each(|(o, (x, y))| *o = *x - *y),
                Op::Mul => out.iter_mut().zip(da.iter().zip(db)).for_each(|(o, (x, y))| *o = *x * *y),
                _ => unreachable!(),
            }
        } else {
            let stra = broadcast_strides(&sa, &out_shape);
            let strb = broadcast_strides(&sb, &out_shape);
            let f: fn(T, T) -> T = match op {
                Op::Add => |x, y| x + y,
                Op::Sub => |x, y| x - y,
                Op::Mul => |x, y| x * y,
                _ => unreachable!(),
            };
            for_each_broadcast2(&out_shape, &stra, &strb, |i, ia, ib| {
                out[i] = f(da[ia], db[ib]);
            });
        }
        Ok(self.push(op, vec![a, b], out_shape, out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_broadcast("add", Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_broadcast("sub", Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_broadcast("mul", Op::Mul, a, b)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.check_finite("scale", &[x])?;
        let ct = T::from_f64(c);
        let data: Vec<T> = self.nodes[x.0].data.iter().map(|&v| v * ct).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::Scale(c), vec![x], shape, data))
    }

    // -- matmul ---------------------------------------------------------------

    /// `a [.., m, k] @ b [k, n]` or batched `b [.., k, n]`; with `trans_b`,
    /// `b` is `[n, k]` / `[.., n, k]` and multiplied transposed.
    fn matmul_impl(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let name: &'static str = if trans_b { "matmul_nt" } else { "matmul" };
        self.check_finite(name, &[a, b])?;
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::ShapeMismatch { op: name, lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let m = sa[sa.len() - 2];
        let k = sa[sa.len() - 1];
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(mismatch());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let b_shared = sb.len() == 2;
        if !b_shared && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(mismatch());
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let mut out = vec![T::zero(); batch * m * n];
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        for bi in 0..batch {
            let a_sl = &da[bi * m * k..(bi + 1) * m * k];
            let b_sl = if b_shared { &db[..] } else { &db[bi * k * n..(bi + 1) * k * n] };
            let c_sl = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                mm_nt(a_sl, b_sl, c_sl, m, k, n);
            } else {
                mm_nn(a_sl, b_sl, c_sl, m, k, n);
            }
        }
        Ok(self.push(Op::Matmul { trans_b }, vec![a, b], out_shape, out))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// Multiplies by the transpose of `b`; used for attention scores and the
    /// tied embedding output projection.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    // -- normalization / activations -------------------------------------------

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        self.check_finite("layer_norm", &[x, gamma, beta])?;
        let sx = self.shape(x).to_vec();
        let dim = *sx.last().ok_or_else(|| Error::invalid("layer_norm", "0-d input"))?;
        if self.shape(gamma) != [dim] || self.shape(beta) != [dim] {
            return Err(Error::ShapeMismatch { op: "layer_norm", lhs: sx, rhs: self.shape(gamma).to_vec() });
        }
        let mut y = vec![T::zero(); self.nodes[x.0].data.len()];
        let (xhat, rstd) = layer_norm_fwd(
            &self.nodes[x.0].data,
            &self.nodes[gamma.0].data,
            &self.nodes[beta.0].data,
            eps,
            dim,
            &mut y,
        );
        Ok(self.push(Op::LayerNorm { xhat, rstd }, vec![x, gamma, beta], sx, y))
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.check_finite("softmax", &[x])?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {} of {:?}", axis, shape)));
        }
        let mut data = self.nodes[x.0].data.clone();
        for_each_lane(&shape, axis, |base, stride, len| softmax_lane(&mut data, base, stride, len));
        Ok(self.push(Op::Softmax { axis }, vec![x], shape, data))
    }

    pub fn log_softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.check_finite("log_softmax", &[x])?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("log_softmax", format!("axis {} of {:?}", axis, shape)));
        }
        let mut data = self.nodes[x.0].data.clone();
        for_each_lane(&shape, axis, |base, stride, len| log_softmax_lane(&mut data, base, stride, len));
        Ok(self.push(Op::LogSoftmax { axis }, vec![x], shape, data))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_finite("relu", &[x])?;
        let shape = self.shape(x).to_vec();
        let data: Vec<T> = self.nodes[x.0].data.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        Ok(self.push(Op::Relu, vec![x], shape, data))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_finite("gelu", &[x])?;
        let shape = self.shape(x).to_vec();
        let data: Vec<T> = self.nodes[x.0].data.iter().map(|&v| gelu(v)).collect();
        Ok(self.push(Op::Gelu, vec![x], shape, data))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_finite("sigmoid", &[x])?;
        let shape = self.shape(x).to_vec();
        let data: Vec<T> = self.nodes[x.0].data.iter().map(|&v| sigmoid(v)).collect();
        Ok(self.push(Op::Sigmoid, vec![x], shape, data))
    }

    // -- lookup / structural ops -----------------------------------------------

    /// Rows of `table [V, d]` gathered by `ids`; output `prefix_shape + [d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize], prefix_shape: &[usize]) -> Result<NodeId> {
        self.check_finite("embedding_gather", &[table])?;
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::invalid("embedding_gather", format!("table must be 2-d, got {:?}", st)));
        }
        let (v, d) = (st[0], st[1]);
        let prefix_numel: usize = prefix_shape.iter().product();
        if prefix_numel != ids.len() {
            return Err(Error::invalid(
                "embedding_gather",
                format!("{} ids vs prefix shape {:?}", ids.len(), prefix_shape),
            ));
        }
        let mut data = vec![T::zero(); ids.len() * d];
        let table_data = &self.nodes[table.0].data;
        for (i, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::invalid("embedding_gather", format!("id {} out of vocab {}", id, v)));
            }
            data[i * d..(i + 1) * d].copy_from_slice(&table_data[id * d..(id + 1) * d]);
        }
        let mut shape = prefix_shape.to_vec();
        shape.push(d);
        Ok(self.push(Op::Gather { ids: ids.to_vec() }, vec![table], shape, data))
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout<R: Rng>(&mut self, x: NodeId, rate: f64, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {}", rate)));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        self.check_finite("dropout", &[x])?;
        let shape = self.shape(x).to_vec();
        let keep_inv = 1.0 / (1.0 - rate);
        let keep_inv_t = T::from_f64(keep_inv);
        let mask: Vec<bool> = (0..self.nodes[x.0].data.len()).map(|_| rng.gen::<f64>() >= rate).collect();
        let data: Vec<T> = self.nodes[x.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(&v, &keep)| if keep { v * keep_inv_t } else { T::zero() })
            .collect();
        Ok(self.push(Op::Dropout { keep_inv, mask }, vec![x], shape, data))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        self.check_finite("concat", parts)?;
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {} of {:?}", axis, first)));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != first.len()
                || sp.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::ShapeMismatch { op: "concat", lhs: first, rhs: sp.to_vec() });
            }
            axis_total += sp[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![T::zero(); outer * axis_total * inner];
        let mut offset = 0usize;
        for &p in parts {
            let len = self.shape(p)[axis];
            let src = &self.nodes[p.0].data;
            for o in 0..outer {
                let dst_start = (o * axis_total + offset) * inner;
                let src_start = o * len * inner;
                data[dst_start..dst_start + len * inner]
                    .copy_from_slice(&src[src_start..src_start + len * inner]);
            }
            offset += len;
        }
        Ok(self.push(Op::Concat { axis }, parts.to_vec(), out_shape, data))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        self.check_finite("slice", &[x])?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::invalid("slice", format!("{}..{} on axis {} of {:?}", start, end, axis, shape)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = end - start;
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let src = &self.nodes[x.0].data;
        let mut data = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            let src_start = (o * shape[axis] + start) * inner;
            data[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&src[src_start..src_start + len * inner]);
        }
        Ok(self.push(Op::Slice { axis, start }, vec![x], out_shape, data))
    }

    pub fn transpose(&mut self, x: NodeId, a: usize, b: usize) -> Result<NodeId> {
        self.check_finite("transpose", &[x])?;
        let shape = self.shape(x).to_vec();
        if a >= shape.len() || b >= shape.len() {
            return Err(Error::invalid("transpose", format!("axes {},{} of {:?}", a, b, shape)));
        }
        let mut out_shape = shape.clone();
        out_shape.swap(a, b);
        let data = transpose_copy(&self.nodes[x.0].data, &shape, a, b);
        Ok(self.push(Op::Transpose { a, b }, vec![x], out_shape, data))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(Error::ShapeMismatch { op: "reshape", lhs: self.shape(x).to_vec(), rhs: shape });
        }
        let data = self.nodes[x.0].data.clone();
        Ok(self.push(Op::Reshape, vec![x], shape, data))
    }

    /// Replaces elements where `mask` is true with `value`. The mask shape
    /// must broadcast to the input shape.
    pub fn masked_fill(&mut self, x: NodeId, mask: &[bool], mask_shape: &[usize], value: f64) -> Result<NodeId> {
        self.check_finite("masked_fill", &[x])?;
        let shape = self.shape(x).to_vec();
        let numel_mask: usize = mask_shape.iter().product();
        if numel_mask != mask.len() {
            return Err(Error::invalid("masked_fill", format!("mask {:?} vs {} flags", mask_shape, mask.len())));
        }
        match broadcast_shape(&shape, mask_shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::ShapeMismatch { op: "masked_fill", lhs: shape, rhs: mask_shape.to_vec() }),
        }
        let strides = broadcast_strides(mask_shape, &shape);
        let v = T::from_f64(value);
        let src = &self.nodes[x.0].data;
        let mut data = vec![T::zero(); src.len()];
        let mut expanded = vec![false; src.len()];
        for_each_broadcast(&shape, &strides, |i, mi| {
            expanded[i] = mask[mi];
            data[i] = if mask[mi] { v } else { src[i] };
        });
        Ok(self.push(Op::MaskedFill { mask: expanded }, vec![x], shape, data))
    }

    // -- losses -----------------------------------------------------------------

    /// Token-mean label-smoothed cross entropy over rows whose target is not
    /// `ignore_index`. `logits` must be 2-d `[n, vocab]`.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        smoothing: f64,
        ignore_index: Option<usize>,
    ) -> Result<NodeId> {
        self.check_finite("cross_entropy", &[logits])?;
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::invalid("cross_entropy", format!("logits must be 2-d, got {:?}", shape)));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::invalid("cross_entropy", format!("smoothing {}", smoothing)));
        }
        let (n, v) = (shape[0], shape[1]);
        if targets.len() != n {
            return Err(Error::invalid("cross_entropy", format!("{} targets vs {} rows", targets.len(), n)));
        }
        let data = &self.nodes[logits.0].data;
        let mut probs = vec![T::zero(); n * v];
        let mut total = 0.0f64;
        let mut count = 0usize;
        let uniform_w = smoothing / v as f64;
        let target_w = 1.0 - smoothing;
        for r in 0..n {
            let row = &data[r * v..(r + 1) * v];
            let ignored = ignore_index == Some(targets[r]);
            // log-softmax of the row
            let mut max = row[0];
            for &x in row.iter().skip(1) {
                if x > max {
                    max = x;
                }
            }
            let mut sum = T::zero();
            for &x in row {
                sum += (x - max).exp();
            }
            let log_z = max.to_f64() + sum.ln().to_f64();
            let prow = &mut probs[r * v..(r + 1) * v];
            let mut row_loss = 0.0f64;
            for (j, &x) in row.iter().enumerate() {
                let lp = x.to_f64() - log_z;
                prow[j] = T::from_f64(lp.exp());
                if !ignored {
                    row_loss -= uniform_w * lp;
                    if j == targets[r] {
                        row_loss -= target_w * lp;
                    }
                }
            }
            if !ignored {
                if targets[r] >= v {
                    return Err(Error::invalid("cross_entropy", format!("target {} out of vocab {}", targets[r], v)));
                }
                total += row_loss;
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::invalid("cross_entropy", "all positions ignored (padded)"));
        }
        let loss = total / count as f64;
        Ok(self.push(
            Op::CrossEntropy { targets: targets.to_vec(), smoothing, ignore_index, probs, count },
            vec![logits],
            vec![1],
            vec![T::from_f64(loss)],
        ))
    }

    /// Mean binary cross entropy over `mask`-selected elements.
    /// `probs` holds P(positive); `labels[i]` is the positive flag.
    /// Probabilities are clamped into `[BCE_EPS, 1-BCE_EPS]`.
    pub fn binary_cross_entropy(&mut self, probs: NodeId, labels: &[bool], mask: &[bool]) -> Result<NodeId> {
        self.check_finite("binary_cross_entropy", &[probs])?;
        let numel = self.nodes[probs.0].data.len();
        if labels.len() != numel || mask.len() != numel {
            return Err(Error::invalid(
                "binary_cross_entropy",
                format!("{} probs vs {} labels / {} mask", numel, labels.len(), mask.len()),
            ));
        }
        let lo = T::from_f64(BCE_EPS);
        let hi = T::from_f64(1.0 - BCE_EPS);
        let data = &self.nodes[probs.0].data;
        let mut clamped = vec![T::zero(); numel];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for i in 0..numel {
            let p = if data[i] < lo {
                lo
            } else if data[i] > hi {
                hi
            } else {
                data[i]
            };
            clamped[i] = p;
            if mask[i] {
                let pf = p.to_f64();
                total -= if labels[i] { pf.ln() } else { (1.0 - pf).ln() };
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            Op::Bce { labels: labels.to_vec(), mask: mask.to_vec(), clamped, count },
            vec![probs],
            vec![1],
            vec![T::from_f64(loss)],
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_finite("sum", &[x])?;
        let total: T = self.nodes[x.0].data.iter().copied().sum();
        Ok(self.push(Op::Sum, vec![x], vec![1], vec![total]))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_finite("mean", &[x])?;
        let n = self.nodes[x.0].data.len();
        if n == 0 {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let total: T = self.nodes[x.0].data.iter().copied().sum();
        Ok(self.push(Op::Mean, vec![x], vec![1], vec![total / T::from_f64(n as f64)]))
    }

    // -- backward ------------------------------------------------------------

    /// Reverse pass from a scalar loss. Each node is visited exactly once;
    /// a second call on the same graph is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph("backward already ran on this graph".into()));
        }
        let ln = &self.nodes[loss.0];
        if ln.data.len() != 1 {
            return Err(Error::Graph(format!("loss must be scalar, got shape {:?}", ln.shape)));
        }
        if !ln.requires_grad {
            self.backward_done = true;
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let (left, right) = self.nodes.split_at_mut(i);
            let node = &right[0];
            if !node.requires_grad || node.grad.is_none() || matches!(node.op, Op::Leaf) {
                continue;
            }
            backprop_node(node, left)?;
        }
        self.backward_done = true;
        Ok(())
    }
}

fn accumulate<T: Scalar>(left: &mut [Node<T>], id: NodeId, contrib: &[T]) {
    let node = &mut left[id.0];
    if !node.requires_grad {
        return;
    }
    let grad = node.grad.get_or_insert_with(|| vec![T::zero(); node.data.len()]);
    for (g, c) in grad.iter_mut().zip(contrib) {
        *g += *c;
    }
}

fn backprop_node<T: Scalar>(node: &Node<T>, left: &mut [Node<T>]) -> Result<()> {
    let dy = node.grad.as_ref().expect("grad present");
    let needs = |left: &[Node<T>], id: NodeId| left[id.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Matmul { trans_b } => {
            let (a, b) = (node.inputs[0], node.inputs[1]);
            let sa = left[a.0].shape.clone();
            let sb = left[b.0].shape.clone();
            let m = sa[sa.len() - 2];
            let k = sa[sa.len() - 1];
            let n = node.shape[node.shape.len() - 1];
            let batch: usize = sa[..sa.len() - 2].iter().product();
            let b_shared = sb.len() == 2;
            if needs(left, a) {
                let db = &left[b.0].data;
                let mut da = vec![T::zero(); left[a.0].data.len()];
                for bi in 0..batch {
                    let dy_sl = &dy[bi * m * n..(bi + 1) * m * n];
                    let b_sl = if b_shared { &db[..] } else { &db[bi * k * n..(bi + 1) * k * n] };
                    let da_sl = &mut da[bi * m * k..(bi + 1) * m * k];
                    if *trans_b {
                        // dA = dC @ B,  B is [n, k]
                        mm_nn(dy_sl, b_sl, da_sl, m, n, k);
                    } else {
                        // dA = dC @ B^T, B is [k, n]
                        mm_nt(dy_sl, b_sl, da_sl, m, n, k);
                    }
                }
                accumulate(left, a, &da);
            }
            if needs(left, b) {
                let da_data = &left[a.0].data;
                let mut db = vec![T::zero(); left[b.0].data.len()];
                for bi in 0..batch {
                    let dy_sl = &dy[bi * m * n..(bi + 1) * m * n];
                    let a_sl = &da_data[bi * m * k..(bi + 1) * m * k];
                    let db_sl = if b_shared {
                        &mut db[..]
                    } else if *trans_b {
                        &mut db[bi * n * k..(bi + 1) * n * k]
                    } else {
                        &mut db[bi * k * n..(bi + 1) * k * n]
                    };
                    if *trans_b {
                        // dB = dC^T @ A -> [n, k]
                        mm_tn(dy_sl, a_sl, db_sl, m, n, k);
                    } else {
                        // dB = A^T @ dC -> [k, n]
                        mm_tn(a_sl, dy_sl, db_sl, m, k, n);
                    }
                }
                accumulate(left, b, &db);
            }
        }
        Op::Add | Op::Sub => {
            let (a, b) = (node.inputs[0], node.inputs[1]);
            if needs(left, a) {
                let da = reduce_to_shape(dy, &node.shape, &left[a.0].shape);
                accumulate(left, a, &da);
            }
            if needs(left, b) {
                let mut db = reduce_to_shape(dy, &node.shape, &left[b.0].shape);
                if matches!(node.op, Op::Sub) {
                    db.iter_mut().for_each(|v| *v = -*v);
                }
                accumulate(left, b, &db);
            }
        }
        Op::Mul => {
            let (a, b) = (node.inputs[0], node.inputs[1]);
            let sa = left[a.0].shape.clone();
            let sb = left[b.0].shape.clone();
            if needs(left, a) {
                let strb = broadcast_strides(&sb, &node.shape);
                let db_data = &left[b.0].data;
                let mut scaled = vec![T::zero(); dy.len()];
                for_each_broadcast(&node.shape, &strb, |i, ib| scaled[i] = dy[i] * db_data[ib]);
                let da = reduce_to_shape(&scaled, &node.shape, &sa);
                accumulate(left, a, &da);
            }
            if needs(left, b) {
                let stra = broadcast_strides(&sa, &node.shape);
                let da_data = &left[a.0].data;
                let mut scaled = vec![T::zero(); dy.len()];
                for_each_broadcast(&node.shape, &stra, |i, ia| scaled[i] = dy[i] * da_data[ia]);
                let db = reduce_to_shape(&scaled, &node.shape, &sb);
                accumulate(left, b, &db);
            }
        }
        Op::Scale(c) => {
            let ct = T::from_f64(*c);
            let dx: Vec<T> = dy.iter().map(|&g| g * ct).collect();
            accumulate(left, node.inputs[0], &dx);
        }
        Op::LayerNorm { xhat, rstd } => {
            let (x, gamma, beta) = (node.inputs[0], node.inputs[1], node.inputs[2]);
            let dim = *node.shape.last().unwrap();
            let gamma_data = left[gamma.0].data.clone();
            let mut dx = vec![T::zero(); xhat.len()];
            let mut dgamma = vec![T::zero(); dim];
            let mut dbeta = vec![T::zero(); dim];
            layer_norm_bwd(dy, xhat, rstd, &gamma_data, dim, &mut dx, &mut dgamma, &mut dbeta);
            if needs(left, x) {
                accumulate(left, x, &dx);
            }
            if needs(left, gamma) {
                accumulate(left, gamma, &dgamma);
            }
            if needs(left, beta) {
                accumulate(left, beta, &dbeta);
            }
        }
        Op::Softmax { axis } => {
            let y = &node.data;
            let mut dx = vec![T::zero(); y.len()];
            for_each_lane(&node.shape, *axis, |base, stride, len| {
                let mut dot = T::zero();
                for i in 0..len {
                    let idx = base + i * stride;
                    dot += dy[idx] * y[idx];
                }
                for i in 0..len {
                    let idx = base + i * stride;
                    dx[idx] = y[idx] * (dy[idx] - dot);
                }
            });
            accumulate(left, node.inputs[0], &dx);
        }
        Op::LogSoftmax { axis } => {
            // y = log softmax(x); dx = dy - softmax(x) * sum(dy)
            let y = &node.data;
            let mut dx = vec![T::zero(); y.len()];
            for_each_lane(&node.shape, *axis, |base, stride, len| {
                let mut sum_dy = T::zero();
                for i in 0..len {
                    sum_dy += dy[base + i * stride];
                }
                for i in 0..len {
                    let idx = base + i * stride;
                    dx[idx] = dy[idx] - y[idx].exp() * sum_dy;
                }
            });
            accumulate(left, node.inputs[0], &dx);
        }
        Op::Relu => {
            let x = &left[node.inputs[0].0].data;
            let dx: Vec<T> = dy
                .iter()
                .zip(x)
                .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                .collect();
            accumulate(left, node.inputs[0], &dx);
        }
        Op::Gelu => {
            let x = &left[node.inputs[0].0].data;
            let dx: Vec<T> = dy.iter().zip(x).map(|(&g, &v)| g * gelu_grad(v)).collect();
            accumulate(left, node.inputs[0], &dx);
        }
        Op::Sigmoid => {
            let y = &node.data;
            let dx: Vec<T> = dy.iter().zip(y).map(|(&g, &v)| g * v * (T::one() - v)).collect();
            accumulate(left, node.inputs[0], &dx);
        }
        Op::Gather { ids } => {
            let table = node.inputs[0];
            if needs(left, table) {
                let d = *node.shape.last().unwrap();
                let mut dt = vec![T::zero(); left[table.0].data.len()];
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id * d..(id + 1) * d];
                    let src = &dy[i * d..(i + 1) * d];
                    for (a, b) in dst.iter_mut().zip(src) {
                        *a += *b;
                    }
                }
                accumulate(left, table, &dt);
            }
        }
        Op::Dropout { keep_inv, mask } => {
            let k = T::from_f64(*keep_inv);
            let dx: Vec<T> = dy
                .iter()
                .zip(mask)
                .map(|(&g, &keep)| if keep { g * k } else { T::zero() })
                .collect();
            accumulate(left, node.inputs[0], &dx);
        }
        Op::Concat { axis } => {
            let outer: usize = node.shape[..*axis].iter().product();
            let inner: usize = node.shape[*axis + 1..].iter().product();
            let total = node.shape[*axis];
            let mut offset = 0usize;
            for &p in &node.inputs {
                let len = left[p.0].shape[*axis];
                if needs(left, p) {
                    let mut dp = vec![T::zero(); left[p.0].data.len()];
                    for o in 0..outer {
                        let src_start = (o * total + offset) * inner;
                        dp[o * len * inner..(o + 1) * len * inner]
                            .copy_from_slice(&dy[src_start..src_start + len * inner]);
                    }
                    accumulate(left, p, &dp);
                }
                offset += len;
            }
        }
        Op::Slice { axis, start } => {
            let x = node.inputs[0];
            if needs(left, x) {
                let xshape = left[x.0].shape.clone();
                let outer: usize = xshape[..*axis].iter().product();
                let inner: usize = xshape[*axis + 1..].iter().product();
                let len = node.shape[*axis];
                let mut dx = vec![T::zero(); left[x.0].data.len()];
                for o in 0..outer {
                    let dst_start = (o * xshape[*axis] + start) * inner;
                    dx[dst_start..dst_start + len * inner]
                        .copy_from_slice(&dy[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(left, x, &dx);
            }
        }
        Op::Transpose { a, b } => {
            let dx = transpose_copy(dy, &node.shape, *a, *b);
            accumulate(left, node.inputs[0], &dx);
        }
        Op::Reshape => {
            accumulate(left, node.inputs[0], dy);
        }
        Op::MaskedFill { mask } => {
            let dx: Vec<T> = dy
                .iter()
                .zip(mask)
                .map(|(&g, &filled)| if filled { T::zero() } else { g })
                .collect();
            accumulate(left, node.inputs[0], &dx);
        }
        Op::CrossEntropy { targets, smoothing, ignore_index, probs, count } => {
            let logits = node.inputs[0];
            let v = probs.len() / targets.len();
            let g = dy[0] / T::from_f64(*count as f64);
            let uniform_w = T::from_f64(*smoothing / v as f64);
            let target_w = T::from_f64(1.0 - *smoothing);
            let mut dx = vec![T::zero(); probs.len()];
            for (r, &t) in targets.iter().enumerate() {
                if *ignore_index == Some(t) {
                    continue;
                }
                let prow = &probs[r * v..(r + 1) * v];
                let drow = &mut dx[r * v..(r + 1) * v];
                for j in 0..v {
                    let mut q = uniform_w;
                    if j == t {
                        q += target_w;
                    }
                    drow[j] = g * (prow[j] - q);
                }
            }
            accumulate(left, logits, &dx);
        }
        Op::Bce { labels, mask, clamped, count } => {
            let probs = node.inputs[0];
            if *count > 0 && needs(left, probs) {
                let g = dy[0] / T::from_f64(*count as f64);
                let raw = &left[probs.0].data;
                let dx: Vec<T> = clamped
                    .iter()
                    .zip(labels.iter().zip(mask.iter().zip(raw)))
                    .map(|(&p, (&y, (&m, &r)))| {
                        // clamp is flat outside its range
                        if !m || r != p {
                            T::zero()
                        } else {
                            let yv = if y { T::one() } else { T::zero() };
                            g * (p - yv) / (p * (T::one() - p))
                        }
                    })
                    .collect();
                accumulate(left, probs, &dx);
            }
        }
        Op::Sum => {
            let g = dy[0];
            let dx = vec![g; left[node.inputs[0].0].data.len()];
            accumulate(left, node.inputs[0], &dx);
        }
        Op::Mean => {
            let n = left[node.inputs[0].0].data.len();
            let g = dy[0] / T::from_f64(n as f64);
            let dx = vec![g; n];
            accumulate(left, node.inputs[0], &dx);
        }
    }
    Ok(())
}

// Generic permuted copy for axis-swap transpose.
fn transpose_copy<T: Scalar>(data: &[T], shape: &[usize], a: usize, b: usize) -> Vec<T> {
    if a == b {
        return data.to_vec();
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    let in_strides = contiguous_strides(shape);
    let mut src_strides = in_strides.clone();
    src_strides.swap(a, b);
    let mut out = vec![T::zero(); data.len()];
    let nd = shape.len();
    let mut coords = vec![0usize; nd];
    let mut src = 0usize;
    for item in out.iter_mut() {
        *item = data[src];
        for d in (0..nd).rev() {
            coords[d] += 1;
            src += src_strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            coords[d] = 0;
        }
    }
    out
}
