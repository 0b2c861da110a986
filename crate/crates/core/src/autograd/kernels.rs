//! Raw numeric kernels behind the graph ops.
//!
//! Everything here is plain slices + shapes: no graph bookkeeping. Loop
//! orders are chosen so the inner loop runs over contiguous memory and
//! autovectorizes.

use crate::tensor::Scalar;

// ---------------------------------------------------------------------------
// Matrix multiply
// ---------------------------------------------------------------------------

/// C[m,n] += A[m,k] @ B[k,n]
pub fn mm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// C[m,n] += A[m,k] @ B[n,k]^T
pub fn mm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            c_row[j] += acc;
        }
    }
}

/// C[k,n] += A[m,k]^T @ B[m,n]
pub fn mm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let c_row = &mut c[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Broadcasting helpers (numpy-style, right-aligned)
// ---------------------------------------------------------------------------

/// Output shape of broadcasting `a` against `b`, or None if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[i] = da.max(db);
    }
    Some(out)
}

/// Strides (in elements) of a contiguous row-major tensor.
pub fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

/// Strides for reading `shape` as if broadcast to `out_shape`
/// (stride 0 on broadcast axes, shape right-aligned).
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let nd = out_shape.len();
    let offset = nd - shape.len();
    let mut strides = vec![0usize; nd];
    for i in 0..shape.len() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    strides
}

/// Iterates flat indices of a broadcast operand in row-major order of
/// `out_shape`. `f(out_idx, src_idx)` is called once per output element.
pub fn for_each_broadcast(out_shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let numel: usize = out_shape.iter().product();
    let nd = out_shape.len();
    if nd == 0 {
        f(0, 0);
        return;
    }
    let mut coords = vec![0usize; nd];
    let mut src = 0usize;
    for out_idx in 0..numel {
        f(out_idx, src);
        // odometer increment
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
}

/// Two-operand variant: `f(out_idx, a_idx, b_idx)`.
pub fn for_each_broadcast2(
    out_shape: &[usize],
    a_strides: &[usize],
    b_strides: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    let nd = out_shape.len();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let mut coords = vec![0usize; nd];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for out_idx in 0..numel {
        f(out_idx, ia, ib);
        for d in (0..nd).rev() {
            coords[d] += 1;
            ia += a_strides[d];
            ib += b_strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            ia -= a_strides[d] * out_shape[d];
            ib -= b_strides[d] * out_shape[d];
            coords[d] = 0;
        }
    }
}

/// Reduces `grad` (shaped `out_shape`) back onto an operand of `shape`
/// by summing over broadcast axes. Result has len == product(shape).
pub fn reduce_to_shape<T: Scalar>(grad: &[T], out_shape: &[usize], shape: &[usize]) -> Vec<T> {
    let numel: usize = shape.iter().product();
    if grad.len() == numel && out_shape.len() == shape.len() && out_shape == shape {
        return grad.to_vec();
    }
    let strides = broadcast_strides(shape, out_shape);
    let mut out = vec![T::zero(); numel];
    for_each_broadcast(out_shape, &strides, |out_idx, src_idx| {
        out[src_idx] += grad[out_idx];
    });
    out
}

// ---------------------------------------------------------------------------
// Row-wise softmax family (lane = `axis`, arbitrary position)
// ---------------------------------------------------------------------------

pub struct LaneIter {
    pub outer: usize,
    pub lane: usize,
    pub inner: usize,
}

pub fn lanes(shape: &[usize], axis: usize) -> LaneIter {
    let outer: usize = shape[..axis].iter().product();
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    LaneIter { outer, lane, inner }
}

/// Applies `f` to each lane along `axis`: `f` receives the flat indices of
/// the lane elements via (base, stride, len).
pub fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let LaneIter { outer, lane, inner } = lanes(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            f(o * lane * inner + i, inner, lane);
        }
    }
}

pub fn softmax_lane<T: Scalar>(data: &mut [T], base: usize, stride: usize, len: usize) {
    let mut max = data[base];
    for i in 1..len {
        let v = data[base + i * stride];
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for i in 0..len {
        let idx = base + i * stride;
        let e = (data[idx] - max).exp();
        data[idx] = e;
        sum += e;
    }
    let inv = T::one() / sum;
    for i in 0..len {
        data[base + i * stride] *= inv;
    }
}

pub fn log_softmax_lane<T: Scalar>(data: &mut [T], base: usize, stride: usize, len: usize) {
    let mut max = data[base];
    for i in 1..len {
        let v = data[base + i * stride];
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for i in 0..len {
        sum += (data[base + i * stride] - max).exp();
    }
    let log_z = max + sum.ln();
    for i in 0..len {
        let idx = base + i * stride;
        data[idx] = data[idx] - log_z;
    }
}

// ---------------------------------------------------------------------------
// Layer norm over the last axis
// ---------------------------------------------------------------------------

/// Forward: writes y, returns (xhat, rstd) saved for backward.
pub fn layer_norm_fwd<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: f64,
    dim: usize,
    y: &mut [T],
) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / dim;
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_dim = T::from_f64(1.0 / dim as f64);
    let eps_t = T::from_f64(eps);
    for r in 0..rows {
        let xr = &x[r * dim..(r + 1) * dim];
        let mut mean = T::zero();
        for &v in xr {
            mean += v;
        }
        mean *= inv_dim;
        let mut var = T::zero();
        for &v in xr {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_dim;
        let rs = T::one() / (var + eps_t).sqrt();
        rstd[r] = rs;
        let xh = &mut xhat[r * dim..(r + 1) * dim];
        let yr = &mut y[r * dim..(r + 1) * dim];
        for i in 0..dim {
            let h = (xr[i] - mean) * rs;
            xh[i] = h;
            yr[i] = h * gamma[i] + beta[i];
        }
    }
    (xhat, rstd)
}

/// Backward for layer norm; accumulates into dx/dgamma/dbeta.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_bwd<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
    dim: usize,
    dx: &mut [T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) {
    let rows = dy.len() / dim;
    let inv_dim = T::from_f64(1.0 / dim as f64);
    for r in 0..rows {
        let dyr = &dy[r * dim..(r + 1) * dim];
        let xhr = &xhat[r * dim..(r + 1) * dim];
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for i in 0..dim {
            let dxh = dyr[i] * gamma[i];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xhr[i];
        }
        let mean_dxhat = sum_dxhat * inv_dim;
        let mean_dxhat_xhat = sum_dxhat_xhat * inv_dim;
        let rs = rstd[r];
        let dxr = &mut dx[r * dim..(r + 1) * dim];
        for i in 0..dim {
            let dxh = dyr[i] * gamma[i];
            dxr[i] += rs * (dxh - mean_dxhat - xhr[i] * mean_dxhat_xhat);
            dgamma[i] += dyr[i] * xhr[i];
            dbeta[i] += dyr[i];
        }
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

const GELU_S: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

pub fn gelu<T: Scalar>(x: T) -> T {
    let s = T::from_f64(GELU_S);
    let c = T::from_f64(GELU_C);
    let half = T::from_f64(0.5);
    let u = s * (x + c * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let s = T::from_f64(GELU_S);
    let c = T::from_f64(GELU_C);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = s * (x + c * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * s * (T::one() + three * c * x * x)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mm_nn_matches_hand_example() {
        // [[1,2],[3,4]] @ [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        mm_nn(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn mm_nt_and_tn_agree_with_nn() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.5, -1.0, 2.0, 0.0, 1.0]; // 3x2
        let mut c_ref = [0.0; 4];
        mm_nn(&a, &b, &mut c_ref, 2, 3, 2);

        // B^T is 2x3; mm_nt(a, b_t) must equal a @ b
        let b_t = [1.0, -1.0, 0.0, 0.5, 2.0, 1.0]; // 2x3 (transpose of b)
        let mut c_nt = [0.0; 4];
        mm_nt(&a, &b_t, &mut c_nt, 2, 3, 2);
        assert_eq!(c_ref, c_nt);

        // A^T @ (A @ B) via mm_tn equals hand-computed
        let mut c_tn = [0.0; 6]; // 3x2
        mm_tn(&a, &c_ref, &mut c_tn, 2, 3, 2);
        let a_t = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3x2
        let mut c_check = [0.0; 6];
        mm_nn(&a_t, &c_ref, &mut c_check, 3, 2, 2);
        assert_eq!(c_tn, c_check);
    }

    #[test]
    fn broadcast_shapes_right_aligned() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[4]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3, 4], &[3, 4]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[2, 3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    #[test]
    fn reduce_to_shape_sums_broadcast_axes() {
        // grad over [2,3] reduced to [3]
        let grad = [1.0f64, 2.0, 3.0, 10.0, 20.0, 30.0];
        let out = reduce_to_shape(&grad, &[2, 3], &[3]);
        assert_eq!(out, vec![11.0, 22.0, 33.0]);
    }

    #[test]
    fn softmax_uniform_row() {
        let mut data = vec![0.5f64; 8];
        softmax_lane(&mut data, 0, 1, 8);
        for v in &data {
            assert!((v - 0.125).abs() < 1e-12);
        }
    }
}
