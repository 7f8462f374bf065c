//! AdamW with decoupled weight decay and global-norm gradient clipping.

use scb_tensor::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments per parameter, plus the number of steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn new(params: &[Tensor<f32>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        AdamState { step: 0, m: zeros(), v: zeros() }
    }
}

/// One update. Decay is applied first as `theta *= 1 - lr*wd`, then the
/// bias-corrected Adam step `theta -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_step(params: &mut [Tensor<f32>], grads: &[Tensor<f32>], state: &mut AdamState, h: &AdamHyper) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Validation(format!(
            "adamw: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Validation(format!("adamw: param {i} shape {:?} vs grad {:?}", p.shape(), g.shape())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (bc1, bc2) = (1.0 - h.beta1.powi(t), 1.0 - h.beta2.powi(t));
    let decay = (1.0 - h.lr * h.weight_decay) as f32;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (theta, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = gj as f64;
            let mj = h.beta1 * m[j] as f64 + (1.0 - h.beta1) * gj;
            let vj = h.beta2 * v[j] as f64 + (1.0 - h.beta2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            *theta *= decay;
            let update = h.lr * (mj / bc1) / ((vj / bc2).sqrt() + h.eps);
            *theta = (*theta as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Global L2 norm over all gradients, accumulated in `f64`.
pub fn global_norm(grads: &[Tensor<f32>]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// Rescales `grads` by `max_norm / (norm + 1e-6)` when their global norm exceeds
/// `max_norm`; otherwise leaves them untouched. Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / (norm + 1e-6)) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper() -> AdamHyper {
        AdamHyper { lr: 2e-4, weight_decay: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let theta = Tensor::new([3], vec![1.0f32, -2.5, 0.125]).unwrap();
        let mut p = vec![theta.clone()];
        let mut st = AdamState::new(&p);
        adamw_step(&mut p, &[Tensor::zeros([3])], &mut st, &hyper()).unwrap();
        let d = (1.0 - 2e-4 * 1e-4) as f32;
        assert_eq!(p[0], theta.map(|v| v * d));
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = vec![Tensor::new([3], vec![0.0f32, 0.0, 0.0]).unwrap()];
        let mut st = AdamState::new(&p);
        let h = AdamHyper { weight_decay: 0.0, ..hyper() };
        adamw_step(&mut p, &[Tensor::new([3], vec![0.3f32, -4.0, 1e-3]).unwrap()], &mut st, &h).unwrap();
        // m_hat = g and v_hat = g^2 at t = 1, so the step is lr * g / (|g| + eps)
        for (&got, g) in p[0].data().iter().zip([0.3f64, -4.0, 1e-3]) {
            let want = -2e-4 * g / (g.abs() + 1e-8);
            assert!((got as f64 - want).abs() < 1e-9, "{got} {want}");
        }
    }

    #[test]
    fn clipping_only_above_threshold() {
        let mut g = vec![Tensor::new([2], vec![0.03f32, 0.04]).unwrap()];
        let before = g.clone();
        assert!((clip_grad_norm(&mut g, 0.1) - 0.05).abs() < 1e-8);
        assert_eq!(g, before);
        let mut g = vec![Tensor::new([2], vec![3.0f32, 4.0]).unwrap()];
        clip_grad_norm(&mut g, 0.1);
        assert!((global_norm(&g) - 0.1).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = vec![Tensor::<f32>::zeros([2])];
        let mut st = AdamState::new(&p);
        assert!(adamw_step(&mut p, &[Tensor::zeros([3])], &mut st, &hyper()).is_err());
    }
}
