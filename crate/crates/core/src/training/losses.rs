//! Loss terms, in per-sample value form and as batched graph builders.
//!
//! Graph builders take a `scale` so that per-chunk losses add up to the
//! batch mean when the batch is split across graphs.

use ndarray::{concatenate, Array2, Axis};
use rand::Rng;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::nets::{AdapterNodes, BoundMlp, MeanFlowNet};

fn row(v: &[f64]) -> Tensor {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}

fn check_pair(a: &[f64], b: &[f64], dim: usize) -> Result<()> {
    if a.len() != dim || b.len() != dim {
        return Err(Error::invalid(format!(
            "expected two vectors of dimension {dim}, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `|v(x_t, t, t) - (x1 - x0)|^2` with `x_t = (1 - t) x0 + t x1`.
pub fn flow_matching_loss(net: &MeanFlowNet, x0: &[f64], x1: &[f64], t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("t must lie in [0, 1], got {t}")));
    }
    check_pair(x0, x1, net.dim)?;
    let xt: Vec<f64> = x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
    let v = net.u_forward(&xt, t, t)?;
    Ok(v
        .iter()
        .zip(x0.iter().zip(x1))
        .map(|(vi, (a, b))| (vi - (b - a)).powi(2))
        .sum())
}

/// Batched flow-matching loss, `scale * sum_i |v_i - (x1_i - x0_i)|^2`.
pub fn flow_matching_graph(
    g: &mut Graph,
    net: &MeanFlowNet,
    bound: &BoundMlp,
    x0: &Tensor,
    x1: &Tensor,
    t: &Tensor,
    scale: f64,
) -> Result<NodeId> {
    let xt = x0 * &t.mapv(|v| 1.0 - v) + x1 * t;
    let target = g.input(x1 - x0);
    let xt = g.input(xt);
    let tn = g.input(t.clone());
    let (_, v) = net.u_graph(g, bound, xt, tn, tn)?;
    let diff = g.sub(v, target)?;
    let sq = g.square(diff)?;
    let s = g.sum(sq)?;
    g.scale(s, scale)
}

/// `scale * sum_i |u_i - target_i|^2`; see [`mean_flow_rows`].
#[allow(clippy::too_many_arguments)]
pub fn mean_flow_graph(
    g: &mut Graph,
    net: &MeanFlowNet,
    bound: &BoundMlp,
    x: &Tensor,
    z: NodeId,
    r: &Tensor,
    t: &Tensor,
    scale: f64,
) -> Result<NodeId> {
    let rows = mean_flow_rows(g, net, bound, x, z, r, t)?;
    let s = g.sum(rows)?;
    g.scale(s, scale)
}

/// Records the mean-flow regression on `g`.
///
/// `x` is data, `z` is a node holding the paired noise (it may depend on
/// adapter parameters), `r` and `t` are `n x 1` columns. The target
/// `z - x - (t - r) d/dt u(psi_t, r, t)` is computed by a forward-mode pass
/// seeded at the network input with tangent `(z - x, 0, 1)` and enters the
/// graph as a constant. Returns the `n x 1` column `|u_i - target_i|^2`.
pub fn mean_flow_rows(
    g: &mut Graph,
    net: &MeanFlowNet,
    bound: &BoundMlp,
    x: &Tensor,
    z: NodeId,
    r: &Tensor,
    t: &Tensor,
) -> Result<NodeId> {
    let n = x.nrows();
    if r.dim() != (n, 1) || t.dim() != (n, 1) {
        return Err(Error::Shape {
            op: "mean_flow_graph times",
            lhs: r.dim(),
            rhs: (n, 1),
        });
    }
    if let Some(i) = (0..n).find(|&i| r[[i, 0]] > t[[i, 0]]) {
        return Err(Error::invalid(format!(
            "row {i}: require r <= t, got r={}, t={}",
            r[[i, 0]],
            t[[i, 0]]
        )));
    }
    let psi_dot = g.value(z) - x;
    let xn = g.input(x.clone());
    let omt = g.input(t.mapv(|v| 1.0 - v));
    let tn = g.input(t.clone());
    let rn = g.input(r.clone());
    let a = g.mul(xn, omt)?;
    let b = g.mul(z, tn)?;
    let psi = g.add(a, b)?;
    let (input, u) = net.u_graph(g, bound, psi, rn, tn)?;

    let tangent = concatenate(
        Axis(1),
        &[psi_dot.view(), Array2::zeros((n, 1)).view(), Array2::ones((n, 1)).view()],
    )
    .expect("row counts match");
    let dudt = g.jvp(u, &[(input, tangent)])?;
    let target = &psi_dot - &(dudt * &(t - r));

    let target = g.input(target);
    let diff = g.sub(u, target)?;
    let sq = g.square(diff)?;
    g.sum_cols(sq)
}

/// Per-sample mean-flow loss.
pub fn mean_flow_loss(net: &MeanFlowNet, x: &[f64], z: &[f64], r: f64, t: f64) -> Result<f64> {
    if r > t {
        return Err(Error::invalid(format!("require r <= t, got r={r}, t={t}")));
    }
    check_pair(x, z, net.dim)?;
    let mut g = Graph::new();
    let bound = net.params.bind(&mut g, false);
    let zn = g.input(row(z));
    let loss = mean_flow_graph(
        &mut g,
        net,
        &bound,
        &row(x),
        zn,
        &row(&[r]),
        &row(&[t]),
        1.0,
    )?;
    g.scalar_value(loss)
}

/// `KL(N(mu, diag sigma^2) || N(0, I)) = 1/2 sum(sigma^2 + mu^2 - 1 - ln sigma^2)`.
pub fn kl_gaussian(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::invalid("mu and sigma differ in length"));
    }
    if let Some(s) = sigma.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::invalid(format!("sigma must be positive, got {s}")));
    }
    Ok(0.5
        * mu.iter()
            .zip(sigma)
            .map(|(m, s)| s * s + m * m - 1.0 - (s * s).ln())
            .sum::<f64>())
}

/// Batched KL from adapter nodes, using the clamped log variance directly.
pub fn kl_graph(g: &mut Graph, ad: &AdapterNodes, scale: f64) -> Result<NodeId> {
    let rows = kl_rows(g, ad)?;
    let s = g.sum(rows)?;
    g.scale(s, scale)
}

/// Per-row KL as an `n x 1` column.
pub fn kl_rows(g: &mut Graph, ad: &AdapterNodes) -> Result<NodeId> {
    let var = g.exp(ad.logvar)?;
    let mu2 = g.square(ad.mu)?;
    let a = g.add(var, mu2)?;
    let b = g.sub(a, ad.logvar)?;
    let one = g.scalar_input(1.0);
    let c = g.sub(b, one)?;
    let s = g.sum_cols(c)?;
    g.scale(s, 0.5)
}

/// `w = 1 / |L + gamma|^p`, the constant multiplier of the adaptive loss.
pub fn adaptive_weight(loss: f64, gamma: f64, p: f64) -> f64 {
    1.0 / (loss + gamma).abs().powf(p)
}

/// `loss * stopgrad(w)`.
pub fn adaptive_scale(g: &mut Graph, loss: NodeId, gamma: f64, p: f64) -> Result<NodeId> {
    if !(gamma > 0.0 && p > 0.0) {
        return Err(Error::invalid(format!("gamma and p must be positive, got {gamma}, {p}")));
    }
    let w = adaptive_weight(g.scalar_value(loss)?, gamma, p);
    g.scale(loss, w)
}

/// `scale * sum_i L_i * stopgrad(w_i)` for a column of per-sample losses,
/// each weighted by its own `w_i = 1 / |L_i + gamma|^p`.
pub fn adaptive_rows(g: &mut Graph, rows: NodeId, gamma: f64, p: f64, scale: f64) -> Result<NodeId> {
    if !(gamma > 0.0 && p > 0.0) {
        return Err(Error::invalid(format!("gamma and p must be positive, got {gamma}, {p}")));
    }
    let w = g.value(rows).mapv(|l| adaptive_weight(l, gamma, p));
    let w = g.input(w);
    let weighted = g.mul(rows, w)?;
    let s = g.sum(weighted)?;
    g.scale(s, scale)
}

/// `(r, t)` with `r = t ~ U[0,1]` with probability `rho`, otherwise the
/// order statistics of two uniforms.
pub fn sample_rt<R: Rng + ?Sized>(rho: f64, rng: &mut R) -> (f64, f64) {
    let coin: f64 = rng.random();
    let a: f64 = rng.random();
    let b: f64 = rng.random();
    if coin < rho {
        (a, a)
    } else {
        (a.min(b), a.max(b))
    }
}

/// Both sides of the flow-map error bound
/// `|x - f(z)|^2 <= int_0^1 |d/dt E(x, z, 0, t)|^2 dt`, where
/// `d/dt E = u(psi_t, 0, t) + t d/dt u(psi_t, 0, t) - (z - x)`.
/// The integral uses the trapezoid rule on `points` equispaced knots.
pub fn flow_map_bound(net: &MeanFlowNet, x: &[f64], z: &[f64], points: usize) -> Result<(f64, f64)> {
    check_pair(x, z, net.dim)?;
    if points < 2 {
        return Err(Error::invalid("trapezoid rule needs at least two knots"));
    }
    let d = net.dim;
    let ts: Vec<f64> = (0..points).map(|k| k as f64 / (points - 1) as f64).collect();
    let psi = Array2::from_shape_fn((points, d), |(k, j)| (1.0 - ts[k]) * x[j] + ts[k] * z[j]);
    let psi_dot = Array2::from_shape_fn((points, d), |(_, j)| z[j] - x[j]);
    let t = Array2::from_shape_fn((points, 1), |(k, _)| ts[k]);

    let mut g = Graph::new();
    let bound = net.params.bind(&mut g, false);
    let pn = g.input(psi);
    let rn = g.input(Array2::zeros((points, 1)));
    let tn = g.input(t.clone());
    let (input, u) = net.u_graph(&mut g, &bound, pn, rn, tn)?;
    let tangent = concatenate(
        Axis(1),
        &[psi_dot.view(), Array2::zeros((points, 1)).view(), Array2::ones((points, 1)).view()],
    )
    .expect("row counts match");
    let dudt = g.jvp(u, &[(input, tangent)])?;
    let de = g.value(u) + &(dudt * &t) - &psi_dot;
    let sq: Vec<f64> = de.rows().into_iter().map(|r| r.dot(&r)).collect();
    let h = 1.0 / (points - 1) as f64;
    let rhs = h * (sq.iter().sum::<f64>() - 0.5 * (sq[0] + sq[points - 1]));

    let f = net.one_step_map(z)?;
    let lhs = x.iter().zip(&f).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((lhs, rhs))
}
