//! SiLU MLPs and the two networks built from them: the mean-flow network
//! `u(x, r, t)` and the class-conditional Gaussian noise adapter.

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{GradientMap, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::seeded_rng;

/// Anything that exposes an ordered list of trainable tensors.
///
/// Optimizers and gradient containers rely on the order being stable.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `fan_in x fan_out`; inputs are row vectors.
    pub weight: Tensor,
    /// `1 x fan_out`.
    pub bias: Tensor,
}

/// Fully connected network: SiLU on hidden layers, linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// Glorot-uniform weights and zero biases, deterministic in `seed`.
pub fn init_mlp(layer_sizes: &[usize], seed: u64) -> Result<MlpParams> {
    MlpParams::init(layer_sizes, seed)
}

impl MlpParams {
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut rng = seeded_rng(seed);
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                Layer {
                    weight: Array2::from_shape_fn((fan_in, fan_out), |_| dist.sample(&mut rng)),
                    bias: Array2::zeros((1, fan_out)),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let layers = layer_sizes
            .windows(2)
            .map(|w| Layer {
                weight: Array2::zeros((w[0], w[1])),
                bias: Array2::zeros((1, w[1])),
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut out = vec![self.layers[0].weight.nrows()];
        out.extend(self.layers.iter().map(|l| l.weight.ncols()));
        out
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").weight.ncols()
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.dim() == b.weight.dim() && a.bias.dim() == b.bias.dim())
    }

    /// Value-only forward pass over a batch of row vectors.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape {
                op: "mlp forward",
                lhs: x.dim(),
                rhs: (x.nrows(), self.input_dim()),
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.dot(&layer.weight) + &layer.bias;
            if i < last {
                h.mapv_inplace(crate::autodiff::silu);
            }
        }
        Ok(h)
    }

    /// Records the parameters on `g`, as parameters or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (g.parameter(l.weight.clone()), g.parameter(l.bias.clone()))
                } else {
                    (g.input(l.weight.clone()), g.input(l.bias.clone()))
                }
            })
            .collect();
        BoundMlp { layers }
    }
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(Error::invalid(format!(
            "an MLP needs at least two layer sizes, got {sizes:?}"
        )));
    }
    if sizes.contains(&0) {
        return Err(Error::invalid(format!("layer sizes must be positive: {sizes:?}")));
    }
    Ok(())
}

impl ParamSet for MlpParams {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// An MLP whose parameters live on a [`Graph`].
#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub layers: Vec<(NodeId, NodeId)>,
}

impl BoundMlp {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = g.matmul(h, w)?;
            h = g.add(h, b)?;
            if i < last {
                h = g.silu(h)?;
            }
        }
        Ok(h)
    }

    /// Gradients in [`ParamSet::tensors`] order; zero for constant bindings.
    pub fn gradients(&self, g: &Graph, grads: &GradientMap) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|&(w, b)| [w, b])
            .map(|id| {
                grads
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(g.shape(id)))
            })
            .collect()
    }
}

/// Average-velocity network `u(x, r, t)` on `R^d`.
///
/// The input row is `[x, r, t]`; the one-step map is `f(z) = z - u(z, 0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanFlowNet {
    pub params: MlpParams,
    pub dim: usize,
}

impl MeanFlowNet {
    pub fn new(dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut sizes = vec![dim + 2];
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        Ok(Self {
            params: MlpParams::init(&sizes, seed)?,
            dim,
        })
    }

    pub fn from_params(params: MlpParams) -> Result<Self> {
        let dim = params.output_dim();
        if params.input_dim() != dim + 2 {
            return Err(Error::invalid(format!(
                "mean-flow MLP must map d+2 -> d, got {} -> {dim}",
                params.input_dim()
            )));
        }
        Ok(Self { params, dim })
    }

    pub fn u_forward(&self, x: &[f64], r: f64, t: f64) -> Result<Vec<f64>> {
        check_times(r, t)?;
        if x.len() != self.dim {
            return Err(Error::invalid(format!(
                "state has dimension {}, network expects {}",
                x.len(),
                self.dim
            )));
        }
        let mut row = x.to_vec();
        row.extend([r, t]);
        let input = Array2::from_shape_vec((1, self.dim + 2), row).expect("row shape");
        Ok(self.params.forward(&input)?.row(0).to_vec())
    }

    /// `u` on a batch of states sharing the same `(r, t)`.
    pub fn u_batch(&self, x: &Tensor, r: f64, t: f64) -> Result<Tensor> {
        check_times(r, t)?;
        let n = x.nrows();
        let rt = Array2::from_shape_fn((n, 2), |(_, j)| if j == 0 { r } else { t });
        let input = concatenate(Axis(1), &[x.view(), rt.view()]).map_err(|_| Error::Shape {
            op: "u_batch",
            lhs: x.dim(),
            rhs: (n, 2),
        })?;
        self.params.forward(&input)
    }

    pub fn one_step_map(&self, z: &[f64]) -> Result<Vec<f64>> {
        let u = self.u_forward(z, 0.0, 1.0)?;
        Ok(z.iter().zip(&u).map(|(zi, ui)| zi - ui).collect())
    }

    pub fn one_step_batch(&self, z: &Tensor) -> Result<Tensor> {
        Ok(z - &self.u_batch(z, 0.0, 1.0)?)
    }

    /// Records `u(x, r, t)` on `g`. Returns `(input, output)` so callers can
    /// seed tangents on the concatenated `[x, r, t]` input.
    pub fn u_graph(
        &self,
        g: &mut Graph,
        bound: &BoundMlp,
        x: NodeId,
        r: NodeId,
        t: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let input = g.concat(&[x, r, t])?;
        let out = bound.forward(g, input)?;
        Ok((input, out))
    }
}

fn check_times(r: f64, t: f64) -> Result<()> {
    if r > t {
        return Err(Error::invalid(format!("require r <= t, got r={r}, t={t}")));
    }
    Ok(())
}

/// Diagonal Gaussian over noise space conditioned on `(y, c)`.
///
/// The MLP sees `[y, embedding(c)]` and emits `[mu, log sigma^2]`; the log
/// variance is clamped to `logvar_bounds` before exponentiation.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseAdapter {
    pub params: MlpParams,
    /// `n_classes x embed_dim`.
    pub embeddings: Tensor,
    pub logvar_bounds: (f64, f64),
    pub obs_dim: usize,
    pub state_dim: usize,
}

pub const DEFAULT_LOGVAR_BOUNDS: (f64, f64) = (-10.0, 2.0);

impl NoiseAdapter {
    pub fn new(
        obs_dim: usize,
        state_dim: usize,
        n_classes: usize,
        embed_dim: usize,
        hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::invalid("adapter needs at least one class"));
        }
        let mut sizes = vec![obs_dim + embed_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * state_dim);
        let params = MlpParams::init(&sizes, seed)?;
        let mut rng = seeded_rng(seed ^ 0x5eed_e3b0_c442_98fc);
        let bound = (6.0 / (n_classes + embed_dim.max(1)) as f64).sqrt();
        let embeddings = Array2::from_shape_fn((n_classes, embed_dim), |_| rng.random_range(-bound..=bound));
        Ok(Self {
            params,
            embeddings,
            logvar_bounds: DEFAULT_LOGVAR_BOUNDS,
            obs_dim,
            state_dim,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings.ncols()
    }

    fn check_classes(&self, classes: &[usize]) -> Result<()> {
        match classes.iter().find(|&&c| c >= self.n_classes()) {
            Some(c) => Err(Error::invalid(format!(
                "class index {c} out of range for {} classes",
                self.n_classes()
            ))),
            None => Ok(()),
        }
    }

    pub fn one_hot(&self, classes: &[usize]) -> Result<Tensor> {
        self.check_classes(classes)?;
        let mut out = Array2::zeros((classes.len(), self.n_classes()));
        for (i, &c) in classes.iter().enumerate() {
            out[[i, c]] = 1.0;
        }
        Ok(out)
    }

    /// `(mu, sigma)` for one observation.
    pub fn forward(&self, y: &[f64], c: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if y.len() != self.obs_dim {
            return Err(Error::invalid(format!(
                "observation has dimension {}, adapter expects {}",
                y.len(),
                self.obs_dim
            )));
        }
        let y = Array2::from_shape_vec((1, self.obs_dim), y.to_vec()).expect("row shape");
        let (mu, sigma) = self.forward_batch(&y, &[c])?;
        Ok((mu.row(0).to_vec(), sigma.row(0).to_vec()))
    }

    /// `(mu, sigma)` for a batch of observations, one class per row.
    pub fn forward_batch(&self, y: &Tensor, classes: &[usize]) -> Result<(Tensor, Tensor)> {
        if y.nrows() != classes.len() || y.ncols() != self.obs_dim {
            return Err(Error::Shape {
                op: "adapter forward",
                lhs: y.dim(),
                rhs: (classes.len(), self.obs_dim),
            });
        }
        let emb = self.one_hot(classes)?.dot(&self.embeddings);
        let input = concatenate(Axis(1), &[y.view(), emb.view()]).expect("row counts match");
        let out = self.params.forward(&input)?;
        let d = self.state_dim;
        let mu = out.slice(s![.., 0..d]).to_owned();
        let (lo, hi) = self.logvar_bounds;
        let sigma = out
            .slice(s![.., d..2 * d])
            .mapv(|lv| (0.5 * lv.clamp(lo, hi)).exp());
        Ok((mu, sigma))
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundAdapter {
        let mlp = self.params.bind(g, trainable);
        let embeddings = if trainable {
            g.parameter(self.embeddings.clone())
        } else {
            g.input(self.embeddings.clone())
        };
        BoundAdapter {
            mlp,
            embeddings,
            logvar_bounds: self.logvar_bounds,
            state_dim: self.state_dim,
        }
    }
}

impl ParamSet for NoiseAdapter {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.params.tensors();
        v.push(&self.embeddings);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.params.tensors_mut();
        v.push(&mut self.embeddings);
        v
    }
}

#[derive(Clone, Debug)]
pub struct BoundAdapter {
    pub mlp: BoundMlp,
    pub embeddings: NodeId,
    pub logvar_bounds: (f64, f64),
    pub state_dim: usize,
}

/// Graph nodes produced by [`BoundAdapter::forward`].
#[derive(Clone, Copy, Debug)]
pub struct AdapterNodes {
    pub mu: NodeId,
    /// Clamped log variance.
    pub logvar: NodeId,
    pub sigma: NodeId,
}

impl BoundAdapter {
    pub fn forward(&self, g: &mut Graph, y: NodeId, one_hot: NodeId) -> Result<AdapterNodes> {
        let emb = g.matmul(one_hot, self.embeddings)?;
        let input = g.concat(&[y, emb])?;
        let out = self.mlp.forward(g, input)?;
        let d = self.state_dim;
        let mu = g.slice_cols(out, 0, d)?;
        let raw = g.slice_cols(out, d, 2 * d)?;
        let (lo, hi) = self.logvar_bounds;
        let logvar = g.clamp(raw, lo, hi)?;
        let half = g.scale(logvar, 0.5)?;
        let sigma = g.exp(half)?;
        Ok(AdapterNodes { mu, logvar, sigma })
    }

    pub fn gradients(&self, g: &Graph, grads: &GradientMap) -> Vec<Tensor> {
        let mut v = self.mlp.gradients(g, grads);
        v.push(
            grads
                .get(self.embeddings)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(g.shape(self.embeddings))),
        );
        v
    }
}

/// `z = mu + sigma * eps`.
pub fn reparameterize(mu: &[f64], sigma: &[f64], eps: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(sigma)
        .zip(eps)
        .map(|((m, s), e)| m + s * e)
        .collect()
}

/// Graph form of [`reparameterize`]; `eps` should be an input node.
pub fn reparameterize_graph(g: &mut Graph, mu: NodeId, sigma: NodeId, eps: NodeId) -> Result<NodeId> {
    let noise = g.mul(sigma, eps)?;
    g.add(mu, noise)
}

/// Exponential moving average of an MLP's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub shadow: MlpParams,
    pub rate: f64,
}

impl EmaState {
    pub fn new(initial: &MlpParams, rate: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::invalid(format!("EMA rate must lie in [0, 1], got {rate}")));
        }
        Ok(Self {
            shadow: initial.clone(),
            rate,
        })
    }

    /// `shadow <- rate * shadow + (1 - rate) * current`.
    pub fn update(&mut self, current: &MlpParams) -> Result<()> {
        if !self.shadow.same_shape(current) {
            return Err(Error::invalid("EMA shadow and tracked parameters differ in shape"));
        }
        let mu = self.rate;
        for (s, c) in self.shadow.tensors_mut().into_iter().zip(current.tensors()) {
            s.zip_mut_with(c, |s, &c| *s = mu * *s + (1.0 - mu) * c);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = init_mlp(&[4, 16, 16, 2], 7).unwrap();
        let b = init_mlp(&[4, 16, 16, 2], 7).unwrap();
        assert_eq!(a, b);
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&v| v == 0.0)));
        assert_ne!(a, init_mlp(&[4, 16, 16, 2], 8).unwrap());
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(init_mlp(&[], 0).is_err());
        assert!(init_mlp(&[3], 0).is_err());
        assert!(init_mlp(&[3, 0, 2], 0).is_err());
    }

    #[test]
    fn paper_sized_param_count() {
        let mut sizes = vec![4];
        sizes.extend([512; 6]);
        sizes.push(2);
        let p = init_mlp(&sizes, 0).unwrap();
        // Hand count: sum over layers of n_i * n_{i+1} + n_{i+1}.
        let expected = (4 * 512 + 512) + 5 * (512 * 512 + 512) + (512 * 2 + 2);
        assert_eq!(expected, 1_316_866);
        assert_eq!(p.num_params(), expected);
    }

    #[test]
    fn zero_net_outputs_zero_and_identity_map() {
        let net = MeanFlowNet::from_params(MlpParams::zeros(&[4, 8, 2]).unwrap()).unwrap();
        assert_eq!(net.u_forward(&[0.3, -1.0], 0.2, 0.9).unwrap(), vec![0.0, 0.0]);
        assert_eq!(net.one_step_map(&[0.3, -1.0]).unwrap(), vec![0.3, -1.0]);
    }

    #[test]
    fn reversed_times_rejected() {
        let net = MeanFlowNet::new(2, &[8], 0).unwrap();
        assert!(net.u_forward(&[0.0, 0.0], 0.6, 0.5).is_err());
    }

    #[test]
    fn hand_built_linear_one_step_map() {
        // Single linear layer: u(z, r, t) = z W_x + r w_r + t w_t + b.
        // Choose u(z, 0, 1) = z - (K z + b) so that f(z) = K z + b.
        let k = arr2(&[[2.0, 0.5], [0.0, -1.0]]);
        let b = arr2(&[[0.3, -0.7]]);
        let mut w = Array2::zeros((4, 2));
        // row-vector convention: z K^T, so W_x = I - K^T
        let wx = Array2::<f64>::eye(2) - k.t();
        w.slice_mut(s![0..2, ..]).assign(&wx);
        let bias = -&b;
        let params = MlpParams {
            layers: vec![Layer { weight: w, bias }],
        };
        let net = MeanFlowNet::from_params(params).unwrap();
        let z = [0.4, -1.3];
        let f = net.one_step_map(&z).unwrap();
        let expect = [2.0 * 0.4 + 0.5 * -1.3 + 0.3, -1.0 * -1.3 - 0.7];
        for (a, e) in f.iter().zip(expect) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn adapter_zero_params_standard_normal() {
        let mut ad = NoiseAdapter::new(1, 2, 2, 8, &[16, 16], 0).unwrap();
        ad.params = MlpParams::zeros(&ad.params.sizes()).unwrap();
        let (mu, sigma) = ad.forward(&[0.7], 1).unwrap();
        assert_eq!(mu, vec![0.0, 0.0]);
        assert_eq!(sigma, vec![1.0, 1.0]);
    }

    #[test]
    fn adapter_class_conditioning_and_range() {
        let ad = NoiseAdapter::new(1, 2, 2, 8, &[16], 3).unwrap();
        let a = ad.forward(&[0.5], 0).unwrap();
        let b = ad.forward(&[0.5], 1).unwrap();
        assert_ne!(a, b);
        assert!(ad.forward(&[0.5], 2).is_err());
    }

    #[test]
    fn adapter_sigma_hits_clamp_bounds() {
        let mut ad = NoiseAdapter::new(1, 2, 1, 4, &[8], 3).unwrap();
        let last = ad.params.layers.len() - 1;
        ad.params.layers[last].bias[[0, 2]] = 1e3;
        ad.params.layers[last].bias[[0, 3]] = -1e3;
        let (_, sigma) = ad.forward(&[0.0], 0).unwrap();
        assert!((sigma[0] - 1f64.exp()).abs() < 1e-12);
        assert!((sigma[1] - (-5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn adapter_graph_matches_value_path() {
        let ad = NoiseAdapter::new(1, 2, 2, 4, &[8, 8], 11).unwrap();
        let y = arr2(&[[0.1], [-0.4], [1.2]]);
        let classes = [0, 1, 1];
        let (mu, sigma) = ad.forward_batch(&y, &classes).unwrap();
        let mut g = Graph::new();
        let b = ad.bind(&mut g, true);
        let yn = g.input(y);
        let oh = g.input(ad.one_hot(&classes).unwrap());
        let nodes = b.forward(&mut g, yn, oh).unwrap();
        assert_eq!(g.value(nodes.mu), &mu);
        assert_eq!(g.value(nodes.sigma), &sigma);
    }

    #[test]
    fn reparameterize_cases() {
        assert_eq!(reparameterize(&[0.0, 0.0], &[1.0, 1.0], &[0.3, -2.0]), vec![0.3, -2.0]);
        assert_eq!(reparameterize(&[0.5, 1.0], &[2.0, 3.0], &[0.0, 0.0]), vec![0.5, 1.0]);

        let mut g = Graph::new();
        let mu = g.parameter(arr2(&[[0.5, 1.0]]));
        let sigma = g.input(arr2(&[[2.0, 3.0]]));
        let eps = g.input(arr2(&[[0.1, 0.2]]));
        let z = reparameterize_graph(&mut g, mu, sigma, eps).unwrap();
        let z0 = g.slice_cols(z, 0, 1).unwrap();
        let s = g.sum(z0).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(mu).unwrap(), &arr2(&[[1.0, 0.0]]));
    }

    #[test]
    fn ema_cases() {
        let p = |v: f64| MlpParams {
            layers: vec![Layer {
                weight: arr2(&[[v]]),
                bias: arr2(&[[v]]),
            }],
        };
        let mut e = EmaState::new(&p(2.0), 1.0).unwrap();
        e.update(&p(4.0)).unwrap();
        assert_eq!(e.shadow, p(2.0));
        let mut e = EmaState::new(&p(2.0), 0.0).unwrap();
        e.update(&p(4.0)).unwrap();
        assert_eq!(e.shadow, p(4.0));
        let mut e = EmaState::new(&p(2.0), 0.5).unwrap();
        e.update(&p(4.0)).unwrap();
        assert_eq!(e.shadow, p(3.0));
        assert!(e.update(&init_mlp(&[1, 2, 1], 0).unwrap()).is_err());
        assert!(EmaState::new(&p(0.0), 1.5).is_err());
    }
}
