//! Adam with bias correction, the warmup + inverse-sqrt schedule, and
//! gradient-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-6;

/// First/second moments per parameter tensor, in traversal order.
#[derive(Debug, Clone)]
pub struct OptimState<T: Scalar> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// Applied-update counter (bias correction).
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let mut m = Vec::new();
        let mut v = Vec::new();
        params.tree.for_each(&mut |_, t| {
            m.push(vec![T::zero(); t.numel()]);
            v.push(vec![T::zero(); t.numel()]);
        });
        OptimState { m, v, step: 0, beta1: BETA1, beta2: BETA2, eps: ADAM_EPS }
    }
}

/// Outcome of one optimizer call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepResult {
    Applied,
    /// Non-finite gradients: parameters untouched, moments untouched.
    SkippedNonFinite,
}

/// Global L2 norm of all accumulated gradients.
pub fn grad_global_norm<T: Scalar>(params: &ModelParams<T>) -> f64 {
    let mut sq = 0.0f64;
    params.tree.for_each(&mut |_, t| {
        if let Some(g) = &t.grad {
            for &x in g {
                let v = x.to_f64();
                sq += v * v;
            }
        }
    });
    sq.sqrt()
}

/// Scales all gradients so the global norm is at most `max_norm`.
pub fn clip_grad_norm<T: Scalar>(params: &mut ModelParams<T>, max_norm: f64) -> f64 {
    let norm = grad_global_norm(params);
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        params.tree.for_each_mut(&mut |_, t| {
            if let Some(g) = &mut t.grad {
                g.iter_mut().for_each(|x| *x *= scale);
            }
        });
    }
    norm
}

fn any_nonfinite_grad<T: Scalar>(params: &ModelParams<T>) -> bool {
    let mut bad = false;
    params.tree.for_each(&mut |_, t| {
        if let Some(g) = &t.grad {
            if g.iter().any(|x| !x.is_finite()) {
                bad = true;
            }
        }
    });
    bad
}

/// One bias-corrected Adam update in place. Missing gradients count as
/// zero. Non-finite gradients skip the whole step (spec: gradient-skip
/// policy).
pub fn adam_step<T: Scalar>(params: &mut ModelParams<T>, opt: &mut OptimState<T>, lr: f64) -> Result<StepResult> {
    if any_nonfinite_grad(params) {
        return Ok(StepResult::SkippedNonFinite);
    }
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let step_size = lr / bc1;
    let b1 = T::from_f64(opt.beta1);
    let b2 = T::from_f64(opt.beta2);
    let one_m_b1 = T::from_f64(1.0 - opt.beta1);
    let one_m_b2 = T::from_f64(1.0 - opt.beta2);
    let eps = T::from_f64(opt.eps);
    let step_t = T::from_f64(step_size);
    let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());

    let mut idx = 0usize;
    let mut res = Ok(());
    let (ms, vs) = (&mut opt.m, &mut opt.v);
    params.tree.for_each_mut(&mut |path, tensor| {
        if res.is_err() {
            return;
        }
        let m = &mut ms[idx];
        let v = &mut vs[idx];
        idx += 1;
        if m.len() != tensor.numel() {
            res = Err(Error::Config(format!("optimizer state mismatch at {}", path)));
            return;
        }
        if let Some(grad) = &tensor.grad {
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + one_m_b1 * g;
                v[i] = b2 * v[i] + one_m_b2 * g * g;
                let denom = v[i].sqrt() * inv_sqrt_bc2 + eps;
                tensor.data[i] = tensor.data[i] - step_t * (m[i] / denom);
            }
        }
    });
    res?;
    Ok(StepResult::Applied)
}

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Linear warmup to the peak, then peak * sqrt(warmup / step).
    #[default]
    WarmupInvSqrt,
    Constant,
}

/// Linear warmup 0 -> peak over `warmup` steps, then inverse-sqrt decay.
/// `warmup == 0` means a constant peak rate.
pub fn lr_schedule(step: u64, peak_lr: f64, warmup: u64) -> f64 {
    if warmup == 0 {
        return peak_lr;
    }
    if step <= warmup {
        peak_lr * step as f64 / warmup as f64
    } else {
        peak_lr * (warmup as f64 / step as f64).sqrt()
    }
}

pub fn schedule_lr(kind: ScheduleKind, step: u64, peak_lr: f64, warmup: u64) -> f64 {
    match kind {
        ScheduleKind::WarmupInvSqrt => lr_schedule(step, peak_lr, warmup),
        ScheduleKind::Constant => peak_lr,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_schedule(0, 3e-4, 10_000), 0.0);
        assert!((lr_schedule(10_000, 3e-4, 10_000) - 3e-4).abs() < 1e-18);
        // step 40000: peak * sqrt(10000/40000) = peak / 2
        assert!((lr_schedule(40_000, 3e-4, 10_000) - 1.5e-4).abs() < 1e-18);
        // zero warmup -> constant
        assert_eq!(lr_schedule(0, 3e-4, 0), 3e-4);
        assert_eq!(lr_schedule(123, 3e-4, 0), 3e-4);
    }

    fn tiny_params() -> ModelParams<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        ModelParams::init(ModelConfig::tiny(12), &mut rng).unwrap()
    }

    #[test]
    fn constant_gradient_decreases_param() {
        let mut params = tiny_params();
        let mut opt = OptimState::new(&params);
        let before = params.tree.embedding.data[0];
        for _ in 0..5 {
            params.zero_grads();
            let ones = vec![1.0f32; params.tree.embedding.numel()];
            params.tree.embedding.accumulate_grad(&ones).unwrap();
            adam_step(&mut params, &mut opt, 0.01).unwrap();
        }
        let after = params.tree.embedding.data[0];
        assert!(after < before, "{} !< {}", after, before);
        assert_eq!(opt.step, 5);
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut params = tiny_params();
        let snapshot: Vec<f32> = params.tree.embedding.data.clone();
        let mut opt = OptimState::new(&params);
        params.zero_grads();
        // no gradient accumulated at all
        let r = adam_step(&mut params, &mut opt, 0.1).unwrap();
        assert_eq!(r, StepResult::Applied);
        assert_eq!(params.tree.embedding.data, snapshot);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn nonfinite_grad_skips_step() {
        let mut params = tiny_params();
        let snapshot: Vec<f32> = params.tree.detect_w.data.clone();
        let mut opt = OptimState::new(&params);
        let mut bad = vec![0.0f32; params.tree.detect_w.numel()];
        bad[0] = f32::NAN;
        params.tree.detect_w.accumulate_grad(&bad).unwrap();
        let r = adam_step(&mut params, &mut opt, 0.1).unwrap();
        assert_eq!(r, StepResult::SkippedNonFinite);
        assert_eq!(opt.step, 0);
        let nan_cleared_check: Vec<f32> = params.tree.detect_w.data.clone();
        assert_eq!(nan_cleared_check, snapshot);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // minimize f(x) = x^2 with analytic grad 2x, 200 steps at lr 0.1
        let mut x = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=200u64 {
            let g = 2.0 * x;
            m = BETA1 * m + (1.0 - BETA1) * g;
            v = BETA2 * v + (1.0 - BETA2) * g * g;
            let mh = m / (1.0 - BETA1.powi(t as i32));
            let vh = v / (1.0 - BETA2.powi(t as i32));
            x -= 0.1 * mh / (vh.sqrt() + ADAM_EPS);
        }
        assert!(x.abs() < 1e-3, "x = {}", x);
    }

    #[test]
    fn clip_reduces_global_norm() {
        let mut params = tiny_params();
        params.zero_grads();
        let big = vec![10.0f32; params.tree.embedding.numel()];
        params.tree.embedding.accumulate_grad(&big).unwrap();
        let before = grad_global_norm(&params);
        assert!(before > 1.0);
        clip_grad_norm(&mut params, 1.0);
        let after = grad_global_norm(&params);
        assert!((after - 1.0).abs() < 1e-4, "norm after clip {}", after);
    }
}
