//! AdamW with decoupled weight decay.

use ndarray::Array2;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nets::ParamSet;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new<P: ParamSet + ?Sized>(params: &P, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Array2::zeros(t.dim())).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update:
    /// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
    pub fn step<P: ParamSet + ?Sized>(&mut self, params: &mut P, grads: &[Tensor], lr: f64) -> Result<()> {
        let mut tensors = params.tensors_mut();
        if tensors.len() != grads.len() || tensors.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                tensors.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in tensors.iter().zip(grads).zip(&self.m) {
            if p.dim() != g.dim() || p.dim() != m.dim() {
                return Err(Error::Shape {
                    op: "adamw",
                    lhs: p.dim(),
                    rhs: g.dim(),
                });
            }
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (eps, wd) = (self.eps, self.weight_decay);
        for (((p, g), m), v) in tensors.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(&mut **p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * (mh / (vh.sqrt() + eps) + wd * *p);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Layer, MlpParams};
    use ndarray::arr2;

    fn scalar_params(v: f64) -> MlpParams {
        MlpParams {
            layers: vec![Layer {
                weight: arr2(&[[v]]),
                bias: arr2(&[[0.0]]),
            }],
        }
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut p = scalar_params(1.7);
        let mut opt = AdamW::new(&p, 0.9, 0.999, 1e-8, 0.0);
        let g = vec![arr2(&[[0.0]]), arr2(&[[0.0]])];
        opt.step(&mut p, &g, 0.1).unwrap();
        assert_eq!(p, scalar_params(1.7));
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_matches_hand_value() {
        let mut p = scalar_params(0.0);
        let mut opt = AdamW::new(&p, 0.9, 0.999, 1e-8, 0.0);
        let g = vec![arr2(&[[1.0]]), arr2(&[[0.0]])];
        opt.step(&mut p, &g, 0.1).unwrap();
        // m_hat = v_hat = 1, update = -lr / (1 + eps).
        let expect = -0.1 / (1.0 + 1e-8);
        assert!((p.layers[0].weight[[0, 0]] - expect).abs() < 1e-12);
    }

    #[test]
    fn decay_only_shrinks() {
        let mut p = scalar_params(2.0);
        let mut opt = AdamW::new(&p, 0.9, 0.999, 1e-8, 0.01);
        let g = vec![arr2(&[[0.0]]), arr2(&[[0.0]])];
        opt.step(&mut p, &g, 0.1).unwrap();
        assert!((p.layers[0].weight[[0, 0]] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = scalar_params(1.0);
        let mut opt = AdamW::new(&p, 0.9, 0.999, 1e-8, 0.0);
        assert!(opt.step(&mut p, &[arr2(&[[1.0, 2.0]]), arr2(&[[0.0]])], 0.1).is_err());
        assert!(opt.step(&mut p, &[arr2(&[[1.0]])], 0.1).is_err());
    }
}
