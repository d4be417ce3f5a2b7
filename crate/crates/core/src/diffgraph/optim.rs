use super::graph::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adaptive-moment (Adam) optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl Adam {
    pub const DEFAULT_LR: f64 = 3e-4;

    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// Applies one bias-corrected update. Gradients are checked for NaN/Inf
    /// before any parameter is touched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.first_moment.len() != params.len() {
            return Err(Error::argument(format!(
                "optimizer expects {} gradient blocks, got {}",
                params.len(),
                grads.len()
            )));
        }
        for ((id, name, p), g) in params.iter().zip(grads) {
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    block: format!("{name} (#{})", id.0),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-12);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::scalar(value));
        p
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = single(0.7);
        let mut opt = Adam::new(&p, 1e-3);
        opt.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(p.tensors()[0].item(), 0.7);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = single(1.0);
        let mut opt = Adam::new(&p, 1e-3);
        opt.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        // m̂ = v̂ = 1 after bias correction
        let expected = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((p.tensors()[0].item() - expected).abs() < 1e-15);
    }

    #[test]
    fn deterministic_repeat() {
        let run = || {
            let mut p = single(0.3);
            let mut opt = Adam::new(&p, 1e-2);
            for k in 0..2 {
                opt.step(&mut p, &[Tensor::scalar(0.5 + k as f64)]).unwrap();
            }
            p.tensors()[0].item().to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nan_gradient_names_block() {
        let mut p = single(0.0);
        p.push("policy_head.w", Tensor::vector(vec![0.0, 0.0]));
        let mut opt = Adam::new(&p, 1e-3);
        let err = opt
            .step(&mut p, &[Tensor::scalar(0.0), Tensor::vector(vec![0.0, f64::NAN])])
            .unwrap_err();
        assert!(err.to_string().contains("policy_head.w"));
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::vector(vec![3.0, 4.0])];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        let after: f64 = g[0].data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-9);
    }
}
