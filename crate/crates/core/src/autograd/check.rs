//! Finite-difference gradient checking.
//!
//! The checker rebuilds the graph per evaluation, so the function under test
//! must be deterministic (dropout off, any sampling frozen). Determinism is
//! verified by evaluating twice at the unperturbed point.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::{Graph, NodeId};

/// Central-difference check of `f`'s gradient at `point`.
///
/// `f` receives a graph plus the node holding the point and must return a
/// scalar loss node. Returns the max over coordinates of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<T, F>(f: F, point: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, NodeId) -> Result<NodeId>,
{
    let eval = |data: &[T]| -> Result<f64> {
        let mut g = Graph::new();
        let mut p = point.clone();
        p.data = data.to_vec();
        p.requires_grad = false;
        let x = g.leaf(&p);
        let loss = f(&mut g, x)?;
        if g.data(loss).len() != 1 {
            return Err(Error::Graph("grad_check: fn must return a scalar".into()));
        }
        Ok(g.data(loss)[0].to_f64())
    };

    let base1 = eval(&point.data)?;
    let base2 = eval(&point.data)?;
    if base1.to_bits() != base2.to_bits() {
        return Err(Error::Graph("grad_check: fn is non-deterministic at the base point".into()));
    }

    // analytic gradient
    let mut g = Graph::new();
    let mut p = point.clone();
    p.requires_grad = true;
    let x = g.leaf(&p);
    let loss = f(&mut g, x)?;
    g.backward(loss)?;
    let analytic: Vec<f64> = match g.grad(x) {
        Some(grad) => grad.iter().map(|v| v.to_f64()).collect(),
        None => vec![0.0; point.data.len()],
    };

    let mut max_rel = 0.0f64;
    let mut data = point.data.clone();
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + T::from_f64(eps);
        let plus = eval(&data)?;
        data[i] = orig - T::from_f64(eps);
        let minus = eval(&data)?;
        data[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = 1.0f64.max(analytic[i].abs()).max(numeric.abs());
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
