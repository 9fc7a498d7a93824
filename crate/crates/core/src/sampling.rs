//! One-step and multi-step sampling from a trained mean-flow network.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nets::{MeanFlowNet, NoiseAdapter};

/// Knots `1 = t_0 > t_1 > ... > t_K = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimePartition {
    knots: Vec<f64>,
}

impl TimePartition {
    pub fn new(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::invalid("a partition needs at least two knots"));
        }
        if knots[0] != 1.0 || *knots.last().unwrap() != 0.0 {
            return Err(Error::invalid(format!(
                "partition must run from 1 to 0, got {knots:?}"
            )));
        }
        if knots.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::invalid(format!("partition must be strictly decreasing: {knots:?}")));
        }
        Ok(Self { knots })
    }

    /// `K` equal steps.
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("need at least one step"));
        }
        let mut knots: Vec<f64> = (0..=steps).map(|k| 1.0 - k as f64 / steps as f64).collect();
        knots[steps] = 0.0;
        Self::new(knots)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn steps(&self) -> usize {
        self.knots.len() - 1
    }
}

/// Pushes noise rows through the partition:
/// `x <- x + (t_k - t_{k-1}) u(x, t_k, t_{k-1})`.
pub fn transport(net: &MeanFlowNet, z: &Tensor, part: &TimePartition) -> Result<Tensor> {
    let mut x = z.clone();
    for w in part.knots().windows(2) {
        let (t_prev, t_k) = (w[0], w[1]);
        let u = net.u_batch(&x, t_k, t_prev)?;
        x = x + (t_k - t_prev) * &u;
    }
    Ok(x)
}

/// Euler integration of the instantaneous velocity `u(x, t, t)`, for
/// networks trained by flow matching.
pub fn euler_transport(net: &MeanFlowNet, z: &Tensor, part: &TimePartition) -> Result<Tensor> {
    let mut x = z.clone();
    for w in part.knots().windows(2) {
        let (t_prev, t_k) = (w[0], w[1]);
        let v = net.u_batch(&x, t_prev, t_prev)?;
        x = x + (t_k - t_prev) * &v;
    }
    Ok(x)
}

pub(crate) fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

/// `n` draws of `z = mu(y, c) + sigma(y, c) * eps`.
pub fn adapter_noise<R: Rng + ?Sized>(
    y: &[f64],
    class: usize,
    ad: &NoiseAdapter,
    n: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let (mu, sigma) = ad.forward(y, class)?;
    let mut z = normal_matrix(n, ad.state_dim, rng);
    for mut row in z.rows_mut() {
        for ((v, m), s) in row.iter_mut().zip(&mu).zip(&sigma) {
            *v = m + s * *v;
        }
    }
    Ok(z)
}

/// `J` posterior samples for one observation.
pub fn posterior_ensemble<R: Rng + ?Sized>(
    y: &[f64],
    class: usize,
    ad: &NoiseAdapter,
    net: &MeanFlowNet,
    part: &TimePartition,
    j: usize,
    rng: &mut R,
) -> Result<Tensor> {
    if j == 0 {
        return Err(Error::invalid("ensemble size must be positive"));
    }
    let z = adapter_noise(y, class, ad, j, rng)?;
    transport(net, &z, part)
}

pub fn conditional_sample<R: Rng + ?Sized>(
    y: &[f64],
    class: usize,
    ad: &NoiseAdapter,
    net: &MeanFlowNet,
    part: &TimePartition,
    rng: &mut R,
) -> Result<Vec<f64>> {
    Ok(posterior_ensemble(y, class, ad, net, part, 1, rng)?.row(0).to_vec())
}

/// `n` samples from `z ~ N(0, I)`.
pub fn unconditional_batch<R: Rng + ?Sized>(
    net: &MeanFlowNet,
    part: &TimePartition,
    n: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let z = normal_matrix(n, net.dim, rng);
    transport(net, &z, part)
}

pub fn unconditional_sample<R: Rng + ?Sized>(
    net: &MeanFlowNet,
    part: &TimePartition,
    rng: &mut R,
) -> Result<Vec<f64>> {
    Ok(unconditional_batch(net, part, 1, rng)?.row(0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Layer, MlpParams};
    use crate::seeded_rng;
    use ndarray::arr2;

    #[test]
    fn partition_validation() {
        assert!(TimePartition::new(vec![1.0, 0.5, 0.0]).is_ok());
        assert!(TimePartition::new(vec![1.0]).is_err());
        assert!(TimePartition::new(vec![0.9, 0.0]).is_err());
        assert!(TimePartition::new(vec![1.0, 0.5, 0.5, 0.0]).is_err());
        assert!(TimePartition::uniform(0).is_err());
        let p = TimePartition::uniform(4).unwrap();
        assert_eq!(p.knots(), &[1.0, 0.75, 0.5, 0.25, 0.0]);
        assert_eq!(TimePartition::uniform(10).unwrap().steps(), 10);
    }

    #[test]
    fn single_step_equals_one_step_map() {
        let net = MeanFlowNet::new(2, &[16, 16], 3).unwrap();
        let ad = NoiseAdapter::new(1, 2, 2, 4, &[8], 4).unwrap();
        let part = TimePartition::uniform(1).unwrap();
        let x = conditional_sample(&[0.5], 0, &ad, &net, &part, &mut seeded_rng(7)).unwrap();
        let z = adapter_noise(&[0.5], 0, &ad, 1, &mut seeded_rng(7)).unwrap();
        let f = net.one_step_map(z.row(0).as_slice().unwrap()).unwrap();
        assert_eq!(x, f);
    }

    #[test]
    fn zero_net_is_identity() {
        let net = MeanFlowNet::from_params(MlpParams::zeros(&[4, 8, 2]).unwrap()).unwrap();
        let part = TimePartition::uniform(4).unwrap();
        let x = unconditional_sample(&net, &part, &mut seeded_rng(1)).unwrap();
        let z = normal_matrix(1, 2, &mut seeded_rng(1));
        assert_eq!(x, z.row(0).to_vec());
    }

    #[test]
    fn affine_flow_is_step_count_invariant() {
        // Translation flow x0 = z + c: the average velocity is -c for every
        // (x, r, t), so any partition lands on the same point.
        let c = [0.7, -1.2];
        let net = MeanFlowNet::from_params(MlpParams {
            layers: vec![Layer {
                weight: Array2::zeros((4, 2)),
                bias: arr2(&[[-c[0], -c[1]]]),
            }],
        })
        .unwrap();
        let z = arr2(&[[0.3, 0.1], [-2.0, 1.5]]);
        let one = transport(&net, &z, &TimePartition::uniform(1).unwrap()).unwrap();
        let four = transport(&net, &z, &TimePartition::uniform(4).unwrap()).unwrap();
        for (a, b) in one.iter().zip(four.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!((one[[0, 0]] - (0.3 + 0.7)).abs() < 1e-15);
    }

    #[test]
    fn sampling_does_not_mutate() {
        let net = MeanFlowNet::new(2, &[8], 3).unwrap();
        let ad = NoiseAdapter::new(1, 2, 2, 4, &[8], 4).unwrap();
        let (n0, a0) = (net.clone(), ad.clone());
        let part = TimePartition::uniform(2).unwrap();
        posterior_ensemble(&[0.1], 1, &ad, &net, &part, 10, &mut seeded_rng(0)).unwrap();
        assert_eq!(net, n0);
        assert_eq!(ad, a0);
    }
}
