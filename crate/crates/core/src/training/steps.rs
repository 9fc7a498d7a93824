//! Single optimization steps for every training objective.
//!
//! A step draws all randomness for the batch up front ([`StepDraws`]), splits
//! the batch into a fixed number of chunks, records one graph per chunk,
//! reduces chunk gradients in chunk order and only then applies the adaptive
//! weight and the optimizer updates. With a fixed chunk count the result does
//! not depend on how chunks are scheduled.

use std::ops::Range;

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::nets::{reparameterize_graph, BoundMlp, EmaState, MeanFlowNet, NoiseAdapter, ParamSet};
use crate::par::{self, Execution};
use crate::problems::{LinearOperator, OperatorFamily};

use super::losses::{adaptive_rows, flow_matching_graph, kl_rows, mean_flow_rows, sample_rt};
use super::optim::AdamW;
use super::reward::Reward;
use super::TrainConfig;

/// Which loss a step optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Flow-matching pretraining of the velocity field.
    FlowMatching,
    /// Unconditional mean-flow training on `(x, z)` with `z ~ N(0, I)`.
    MeanFlow,
    /// Joint generator/adapter training.
    Vfm,
    /// Adapter-only training against a fixed generator.
    FrozenTheta,
    /// Reward-tilted joint training.
    Reward,
}

impl Objective {
    pub fn uses_adapter(self) -> bool {
        matches!(self, Objective::Vfm | Objective::FrozenTheta | Objective::Reward)
    }

    /// Whether `adaptive` in the config applies. Reward mode scales only its
    /// flow term.
    pub fn adaptive(self) -> bool {
        !matches!(self, Objective::FlowMatching | Objective::FrozenTheta)
    }

    pub fn trains_theta(self) -> bool {
        self != Objective::FrozenTheta
    }
}

/// Per-step loss values; every term is a batch mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mf: f64,
    pub obs: f64,
    pub kl: f64,
    /// Mean reward (reward mode only).
    pub reward: f64,
    pub total_raw: f64,
    pub total_scaled: f64,
}

/// Training set and operator classes.
#[derive(Clone, Debug)]
pub struct TrainData {
    /// `n x d` data points.
    pub x: Tensor,
    pub families: Vec<OperatorFamily>,
}

impl TrainData {
    pub fn new(x: Tensor, families: Vec<OperatorFamily>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::invalid("training set is empty"));
        }
        for f in &families {
            if f.members[0].ncols() != x.ncols() {
                return Err(Error::invalid(format!(
                    "operator class {} acts on dimension {}, data has {}",
                    f.class,
                    f.members[0].ncols(),
                    x.ncols()
                )));
            }
        }
        Ok(Self { x, families })
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn obs_dim(&self) -> usize {
        self.families.first().map_or(0, |f| f.members[0].nrows())
    }
}

/// All random quantities consumed by one step.
///
/// Per sample, in order: class, data index, operator, observation noise,
/// reparameterization noise, mixing coin, fresh noise, `(r, t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDraws {
    pub classes: Vec<usize>,
    pub x: Tensor,
    pub ops: Vec<LinearOperator>,
    /// `n x d_y`; zeros when there is no observation.
    pub y: Tensor,
    pub eps: Tensor,
    /// True where the mean-flow term uses adapter noise.
    pub keep: Vec<bool>,
    pub fresh: Tensor,
    pub r: Tensor,
    pub t: Tensor,
}

fn normal_row<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

impl StepDraws {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Draws for [`Objective::Vfm`], [`Objective::FrozenTheta`] and
    /// [`Objective::Reward`]. With `observe = false` no operator is drawn
    /// and `y` is zero; classes are uniform over `n_classes`.
    pub fn draw<R: Rng + ?Sized>(
        data: &TrainData,
        n_classes: usize,
        observe: bool,
        batch: usize,
        alpha: f64,
        rho_rt: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if observe && data.families.is_empty() {
            return Err(Error::invalid("observation mode needs at least one operator class"));
        }
        let n_classes = if observe { data.families.len() } else { n_classes };
        if n_classes == 0 {
            return Err(Error::invalid("need at least one class"));
        }
        let d = data.dim();
        let dy = if observe { data.obs_dim() } else { 1 };
        let mut out = Self {
            classes: Vec::with_capacity(batch),
            x: Array2::zeros((batch, d)),
            ops: Vec::with_capacity(batch),
            y: Array2::zeros((batch, dy)),
            eps: Array2::zeros((batch, d)),
            keep: Vec::with_capacity(batch),
            fresh: Array2::zeros((batch, d)),
            r: Array2::zeros((batch, 1)),
            t: Array2::zeros((batch, 1)),
        };
        for i in 0..batch {
            let c = rng.random_range(0..n_classes);
            let idx = rng.random_range(0..data.x.nrows());
            let x = data.x.row(idx).to_vec();
            if observe {
                let op = data.families[c].sample(rng);
                let xi = normal_row(rng, op.obs_dim());
                let y = op.observe_with(&x, &xi)?;
                out.y.row_mut(i).assign(&ndarray::ArrayView1::from(&y));
                out.ops.push(op);
            }
            out.x.row_mut(i).assign(&ndarray::ArrayView1::from(&x));
            let eps = normal_row(rng, d);
            out.eps.row_mut(i).assign(&ndarray::ArrayView1::from(&eps));
            let w: f64 = rng.random();
            out.keep.push(w < alpha);
            let fresh = normal_row(rng, d);
            out.fresh.row_mut(i).assign(&ndarray::ArrayView1::from(&fresh));
            let (r, t) = sample_rt(rho_rt, rng);
            out.r[[i, 0]] = r;
            out.t[[i, 0]] = t;
            out.classes.push(c);
        }
        Ok(out)
    }

    /// Draws for the unconditional objectives: data, noise and times.
    /// With `uniform_t` the time is `U[0, 1]` and `r = t` (flow matching).
    pub fn draw_unconditional<R: Rng + ?Sized>(
        data: &TrainData,
        batch: usize,
        rho_rt: f64,
        uniform_t: bool,
        rng: &mut R,
    ) -> Self {
        let d = data.dim();
        let mut out = Self {
            classes: vec![0; batch],
            x: Array2::zeros((batch, d)),
            ops: Vec::new(),
            y: Array2::zeros((batch, 1)),
            eps: Array2::zeros((batch, d)),
            keep: vec![false; batch],
            fresh: Array2::zeros((batch, d)),
            r: Array2::zeros((batch, 1)),
            t: Array2::zeros((batch, 1)),
        };
        for i in 0..batch {
            let idx = rng.random_range(0..data.x.nrows());
            out.x.row_mut(i).assign(&data.x.row(idx));
            let fresh = normal_row(rng, d);
            out.fresh.row_mut(i).assign(&ndarray::ArrayView1::from(&fresh));
            let (r, t) = if uniform_t {
                let t: f64 = rng.random();
                (t, t)
            } else {
                sample_rt(rho_rt, rng)
            };
            out.r[[i, 0]] = r;
            out.t[[i, 0]] = t;
        }
        out
    }

    fn rows(&self, m: &Tensor, range: &Range<usize>) -> Tensor {
        m.slice(s![range.clone(), ..]).to_owned()
    }
}

/// Everything a training run mutates.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub theta: MeanFlowNet,
    pub opt_theta: AdamW,
    pub ema: EmaState,
    pub phi: Option<NoiseAdapter>,
    pub opt_phi: Option<AdamW>,
    pub step: u64,
}

impl TrainState {
    pub fn new(theta: MeanFlowNet, phi: Option<NoiseAdapter>, cfg: &TrainConfig) -> Result<Self> {
        let opt = |p: &dyn ParamSet| AdamW::new(p, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
        Ok(Self {
            opt_theta: opt(&theta.params),
            ema: EmaState::new(&theta.params, cfg.ema_rate)?,
            opt_phi: phi.as_ref().map(|p| opt(p)),
            phi,
            theta,
            step: 0,
        })
    }

    pub fn adapter(&self) -> Result<&NoiseAdapter> {
        self.phi
            .as_ref()
            .ok_or_else(|| Error::invalid("this objective needs a noise adapter"))
    }

    /// Generator to sample from: the EMA shadow.
    pub fn ema_net(&self) -> MeanFlowNet {
        MeanFlowNet {
            params: self.ema.shadow.clone(),
            dim: self.theta.dim,
        }
    }
}

/// Gradients and loss parts of one chunk.
struct ChunkOut {
    theta: Vec<Tensor>,
    phi: Vec<Tensor>,
    /// This chunk's share of the scaled batch loss.
    scaled: f64,
    parts: LossBreakdown,
}

/// Observation misfit `scale * sum_i |y_i - A_i f(z_i)|^2` with
/// `f(z) = z - u(z, 0, 1)` evaluated with `bound` parameters.
#[allow(clippy::too_many_arguments)]
pub fn observation_graph(
    g: &mut Graph,
    net: &MeanFlowNet,
    bound: &BoundMlp,
    z: NodeId,
    ops: &[LinearOperator],
    y: &Tensor,
    scale: f64,
) -> Result<NodeId> {
    let rows = observation_rows(g, net, bound, z, ops, y)?;
    let s = g.sum(rows)?;
    g.scale(s, scale)
}

/// Per-row observation misfit `|y_i - A_i f(z_i)|^2` as an `n x 1` column.
pub fn observation_rows(
    g: &mut Graph,
    net: &MeanFlowNet,
    bound: &BoundMlp,
    z: NodeId,
    ops: &[LinearOperator],
    y: &Tensor,
) -> Result<NodeId> {
    let f = one_step_graph(g, net, bound, z)?;
    let (n, d) = g.shape(z);
    if ops.len() != n || y.nrows() != n {
        return Err(Error::invalid("one operator and observation per row required"));
    }
    let dy = y.ncols();
    let mut total: Option<NodeId> = None;
    for k in 0..dy {
        let mut ak = Array2::zeros((n, d));
        for (i, op) in ops.iter().enumerate() {
            if op.a.dim() != (dy, d) {
                return Err(Error::Shape {
                    op: "observation operator",
                    lhs: op.a.dim(),
                    rhs: (dy, d),
                });
            }
            ak.row_mut(i).assign(&op.a.row(k));
        }
        let ak = g.input(ak);
        let prod = g.mul(f, ak)?;
        let pred = g.sum_cols(prod)?;
        let yk = g.input(y.slice(s![.., k..k + 1]).to_owned());
        let res = g.sub(yk, pred)?;
        let sq = g.square(res)?;
        total = Some(match total {
            Some(t) => g.add(t, sq)?,
            None => sq,
        });
    }
    total.ok_or_else(|| Error::invalid("observation has no components"))
}

/// `f(z) = z - u(z, 0, 1)` on the graph.
pub fn one_step_graph(g: &mut Graph, net: &MeanFlowNet, bound: &BoundMlp, z: NodeId) -> Result<NodeId> {
    let n = g.shape(z).0;
    let zeros = g.input(Array2::zeros((n, 1)));
    let ones = g.input(Array2::ones((n, 1)));
    let (_, u) = net.u_graph(g, bound, z, zeros, ones)?;
    g.sub(z, u)
}

fn column_mean(g: &Graph, rows: NodeId, inv_b: f64) -> f64 {
    g.value(rows).sum() * inv_b
}

/// Batch-mean contribution of per-sample losses, adaptively weighted when
/// `adaptive` is set.
fn reduce_rows(g: &mut Graph, rows: NodeId, cfg: &TrainConfig, adaptive: bool, inv_b: f64) -> Result<NodeId> {
    if adaptive {
        adaptive_rows(g, rows, cfg.gamma, cfg.power, inv_b)
    } else {
        let s = g.sum(rows)?;
        g.scale(s, inv_b)
    }
}

#[allow(clippy::too_many_arguments)]
fn chunk(
    obj: Objective,
    state: &TrainState,
    draws: &StepDraws,
    range: Range<usize>,
    cfg: &TrainConfig,
    reward: Option<&dyn Reward>,
    inv_b: f64,
) -> Result<ChunkOut> {
    let mut g = Graph::new();
    let theta = &state.theta;
    let x = draws.rows(&draws.x, &range);
    let r = draws.rows(&draws.r, &range);
    let t = draws.rows(&draws.t, &range);
    let fresh = draws.rows(&draws.fresh, &range);
    let btheta = theta.params.bind(&mut g, obj.trains_theta());
    let mut parts = LossBreakdown::default();
    let adaptive = cfg.adaptive && obj.adaptive();

    if matches!(obj, Objective::FlowMatching | Objective::MeanFlow) {
        let loss = if obj == Objective::FlowMatching {
            let loss = flow_matching_graph(&mut g, theta, &btheta, &x, &fresh, &t, inv_b)?;
            parts.mf = g.scalar_value(loss)?;
            loss
        } else {
            let z = g.input(fresh);
            let rows = mean_flow_rows(&mut g, theta, &btheta, &x, z, &r, &t)?;
            parts.mf = column_mean(&g, rows, inv_b);
            reduce_rows(&mut g, rows, cfg, adaptive, inv_b)?
        };
        let grads = g.backward(loss)?;
        return Ok(ChunkOut {
            theta: btheta.gradients(&g, &grads),
            phi: Vec::new(),
            scaled: g.scalar_value(loss)?,
            parts,
        });
    }

    let phi = state.adapter()?;
    let bphi = phi.bind(&mut g, true);
    let classes = &draws.classes[range.clone()];
    let y = g.input(draws.rows(&draws.y, &range));
    let onehot = g.input(phi.one_hot(classes)?);
    let ad = bphi.forward(&mut g, y, onehot)?;
    let eps = g.input(draws.rows(&draws.eps, &range));
    let z = reparameterize_graph(&mut g, ad.mu, ad.sigma, eps)?;
    let kl = kl_rows(&mut g, &ad)?;
    parts.kl = column_mean(&g, kl, inv_b);

    let mf = if obj == Objective::FrozenTheta {
        None
    } else {
        let mask: Tensor = Array2::from_shape_fn((range.len(), 1), |(i, _)| {
            f64::from(u8::from(draws.keep[range.start + i]))
        });
        let fresh_part = &fresh * &mask.mapv(|m| 1.0 - m);
        let mask = g.input(mask);
        let kept = g.mul(z, mask)?;
        let fresh_part = g.input(fresh_part);
        let zmf = g.add(kept, fresh_part)?;
        let mf = mean_flow_rows(&mut g, theta, &btheta, &x, zmf, &r, &t)?;
        parts.mf = column_mean(&g, mf, inv_b);
        Some(g.scale(mf, 0.5 / (cfg.tau * cfg.tau))?)
    };

    let loss = if obj == Objective::Reward {
        let reward = reward.ok_or_else(|| Error::invalid("reward mode needs a reward"))?;
        let f = one_step_graph(&mut g, theta, &btheta, z)?;
        let rv = reward.graph(&mut g, f, classes)?;
        let rs = g.sum(rv)?;
        parts.reward = g.scalar_value(rs)? * inv_b;
        let rl = g.scale(rs, -cfg.lambda * inv_b)?;
        let kl_mean = reduce_rows(&mut g, kl, cfg, false, inv_b)?;
        let plain = g.add(rl, kl_mean)?;
        let flow = reduce_rows(&mut g, mf.expect("reward mode trains theta"), cfg, adaptive, inv_b)?;
        g.add(flow, plain)?
    } else {
        let shadow;
        let bobs = if obj == Objective::Vfm && cfg.use_ema {
            shadow = state.ema.shadow.bind(&mut g, false);
            &shadow
        } else {
            &btheta
        };
        let ops = &draws.ops[range.clone()];
        let yv = draws.rows(&draws.y, &range);
        let obs = observation_rows(&mut g, theta, bobs, z, ops, &yv)?;
        parts.obs = column_mean(&g, obs, inv_b);
        let obs_w = g.scale(obs, 0.5 / (cfg.sigma * cfg.sigma))?;
        let mut rows = g.add(obs_w, kl)?;
        if let Some(mf) = mf {
            rows = g.add(mf, rows)?;
        }
        reduce_rows(&mut g, rows, cfg, adaptive, inv_b)?
    };
    let grads = g.backward(loss)?;
    Ok(ChunkOut {
        theta: btheta.gradients(&g, &grads),
        phi: bphi.gradients(&g, &grads),
        scaled: g.scalar_value(loss)?,
        parts,
    })
}

fn add_into(acc: &mut Vec<Tensor>, g: Vec<Tensor>) {
    if acc.is_empty() {
        *acc = g;
    } else {
        for (a, b) in acc.iter_mut().zip(g) {
            *a += &b;
        }
    }
}

fn all_finite(ts: &[Tensor]) -> bool {
    ts.iter().all(|t| t.iter().all(|v| v.is_finite()))
}

/// Runs one step of `obj` on pre-drawn randomness.
pub fn step_with_draws(
    obj: Objective,
    state: &mut TrainState,
    draws: &StepDraws,
    cfg: &TrainConfig,
    reward: Option<&dyn Reward>,
    exec: Execution,
) -> Result<LossBreakdown> {
    let n = draws.len();
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if obj.uses_adapter() {
        state.adapter()?;
    }
    let inv_b = 1.0 / n as f64;
    let ranges = par::chunk_ranges(n, cfg.effective_chunks(n));
    let st: &TrainState = state;
    let outs = par::map_indexed(exec, ranges.len(), |k| {
        chunk(obj, st, draws, ranges[k].clone(), cfg, reward, inv_b)
    });

    let mut parts = LossBreakdown::default();
    let (mut g_theta, mut g_phi) = (Vec::new(), Vec::new());
    for out in outs {
        let out = out?;
        parts.mf += out.parts.mf;
        parts.obs += out.parts.obs;
        parts.kl += out.parts.kl;
        parts.reward += out.parts.reward;
        parts.total_scaled += out.scaled;
        add_into(&mut g_theta, out.theta);
        add_into(&mut g_phi, out.phi);
    }

    let flow_w = 0.5 / (cfg.tau * cfg.tau);
    let obs_w = 0.5 / (cfg.sigma * cfg.sigma);
    parts.total_raw = match obj {
        Objective::FlowMatching | Objective::MeanFlow => parts.mf,
        Objective::Vfm => flow_w * parts.mf + obs_w * parts.obs + parts.kl,
        Objective::FrozenTheta => obs_w * parts.obs + parts.kl,
        Objective::Reward => flow_w * parts.mf - cfg.lambda * parts.reward + parts.kl,
    };

    let step = state.step as usize;
    if !parts.total_raw.is_finite() || !all_finite(&g_theta) || !all_finite(&g_phi) {
        return Err(Error::Divergence {
            step,
            reason: format!("non-finite loss or gradient, losses {parts:?}"),
        });
    }

    if obj.trains_theta() {
        state.opt_theta.step(&mut state.theta.params, &g_theta, cfg.lr_theta)?;
    }
    if obj.uses_adapter() {
        let phi = state.phi.as_mut().expect("checked above");
        let opt = state
            .opt_phi
            .as_mut()
            .ok_or_else(|| Error::invalid("adapter has no optimizer state"))?;
        opt.step(phi, &g_phi, cfg.lr_phi)?;
    }
    if obj.trains_theta() {
        state.ema.update(&state.theta.params)?;
    }
    state.step += 1;
    Ok(parts)
}

/// Draws a batch for `obj` from `rng` and takes one step.
pub fn train_step<R: Rng + ?Sized>(
    obj: Objective,
    state: &mut TrainState,
    data: &TrainData,
    cfg: &TrainConfig,
    reward: Option<&dyn Reward>,
    exec: Execution,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let draws = draw_for(obj, state, data, cfg, rng)?;
    step_with_draws(obj, state, &draws, cfg, reward, exec)
}

/// The batch [`train_step`] would consume.
pub fn draw_for<R: Rng + ?Sized>(
    obj: Objective,
    state: &TrainState,
    data: &TrainData,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepDraws> {
    match obj {
        Objective::FlowMatching => Ok(StepDraws::draw_unconditional(data, cfg.batch, cfg.rho_rt, true, rng)),
        Objective::MeanFlow => Ok(StepDraws::draw_unconditional(data, cfg.batch, cfg.rho_rt, false, rng)),
        Objective::Vfm | Objective::FrozenTheta => {
            StepDraws::draw(data, data.families.len(), true, cfg.batch, cfg.alpha, cfg.rho_rt, rng)
        }
        Objective::Reward => {
            let c = state.adapter()?.n_classes();
            StepDraws::draw(data, c, false, cfg.batch, cfg.alpha, cfg.rho_rt, rng)
        }
    }
}

/// Mean reward of one-step samples `f(z)`, `z ~ q(z | 0, c)`, over `n`
/// draws per class.
pub fn mean_reward<R: Rng + ?Sized>(
    net: &MeanFlowNet,
    phi: &NoiseAdapter,
    reward: &dyn Reward,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    let classes: Vec<usize> = (0..phi.n_classes()).flat_map(|c| std::iter::repeat_n(c, n)).collect();
    let y = Array2::zeros((classes.len(), phi.obs_dim));
    let (mu, sigma) = phi.forward_batch(&y, &classes)?;
    let eps = Array2::from_shape_fn(mu.dim(), |_| rng.sample::<f64, _>(StandardNormal));
    let z = mu + sigma * eps;
    let x = net.one_step_batch(&z)?;
    let mut total = 0.0;
    for (row, &c) in x.axis_iter(Axis(0)).zip(&classes) {
        total += reward.value(row.as_slice().expect("standard layout"), c)?;
    }
    Ok(total / classes.len() as f64)
}
