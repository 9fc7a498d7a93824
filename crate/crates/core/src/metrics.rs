//! Checkerboard evaluation: NLPD, CRPS, unbiased MMD, support accuracy and
//! the rejection-sampling posterior oracle.

use std::path::Path;

use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nets::{MeanFlowNet, NoiseAdapter};
use crate::par::{self, Execution};
use crate::problems::{checkerboard_sample, checkerboard_support, Checkerboard, OperatorFamily, BOARD_CELLS, BOARD_HALF_WIDTH};
use crate::sampling::{posterior_ensemble, unconditional_batch, TimePartition};
use crate::SimRng;

/// Pooled sets above this size use a seeded subsample for the bandwidth.
pub const MEDIAN_EXACT_LIMIT: usize = 4000;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `-log (1/J) sum_j N(y' | A x_j, sigma^2 I)`.
pub fn nlpd(y_fresh: &[f64], samples: &Tensor, a: &Tensor, sigma: f64) -> Result<f64> {
    if samples.nrows() == 0 {
        return Err(Error::invalid("nlpd needs at least one sample"));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if a.ncols() != samples.ncols() || a.nrows() != y_fresh.len() {
        return Err(Error::Shape {
            op: "nlpd",
            lhs: (a.nrows(), a.ncols()),
            rhs: (samples.nrows(), samples.ncols()),
        });
    }
    let dy = y_fresh.len() as f64;
    let norm = -0.5 * dy * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
    let ax = samples.dot(&a.t());
    let logs: Vec<f64> = ax
        .rows()
        .into_iter()
        .map(|r| norm - sq_dist(&r.to_vec(), y_fresh) / (2.0 * sigma * sigma))
        .collect();
    Ok(-(log_sum_exp(&logs) - (samples.nrows() as f64).ln()))
}

/// Energy-form CRPS with self-pairs in the double sum.
pub fn crps(truth: &[f64], samples: &Tensor) -> Result<f64> {
    let j = samples.nrows();
    if j == 0 {
        return Err(Error::invalid("crps needs at least one sample"));
    }
    if samples.ncols() != truth.len() {
        return Err(Error::invalid("crps: sample and truth dimensions differ"));
    }
    let pts = rows(samples);
    let first: f64 = pts.iter().map(|p| sq_dist(p, truth).sqrt()).sum::<f64>() / j as f64;
    let mut pair = 0.0;
    for p in &pts {
        for q in &pts {
            pair += sq_dist(p, q).sqrt();
        }
    }
    Ok(first - pair / (2.0 * (j * j) as f64))
}

fn kernel_sum(exec: Execution, x: &[Vec<f64>], y: &[Vec<f64>], skip_diag: bool, inv2l2: f64) -> f64 {
    par::ordered_sum(exec, x.len(), |i| {
        let xi = &x[i];
        y.iter()
            .enumerate()
            .filter(|(k, _)| !(skip_diag && *k == i))
            .map(|(_, yk)| (-sq_dist(xi, yk) * inv2l2).exp())
            .sum()
    })
}

/// Unbiased squared MMD with `k(u, v) = exp(-|u - v|^2 / 2 l^2)`.
pub fn mmd_unbiased(x: &Tensor, y: &Tensor, lengthscale: f64) -> Result<f64> {
    mmd_unbiased_with(Execution::default(), x, y, lengthscale)
}

pub fn mmd_unbiased_with(exec: Execution, x: &Tensor, y: &Tensor, lengthscale: f64) -> Result<f64> {
    let (n, m) = (x.nrows(), y.nrows());
    if n < 2 || m < 2 {
        return Err(Error::invalid(format!("mmd needs at least two points per set, got {n} and {m}")));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::invalid("mmd: point dimensions differ"));
    }
    if !(lengthscale > 0.0) {
        return Err(Error::invalid(format!("lengthscale must be positive, got {lengthscale}")));
    }
    let inv = 1.0 / (2.0 * lengthscale * lengthscale);
    let (xr, yr) = (rows(x), rows(y));
    let kxx = kernel_sum(exec, &xr, &xr, true, inv) / (n * (n - 1)) as f64;
    let kyy = kernel_sum(exec, &yr, &yr, true, inv) / (m * (m - 1)) as f64;
    // Sum over the smaller side first so mmd(X, Y) == mmd(Y, X) bit for bit.
    let kxy = if (n, &xr) <= (m, &yr) {
        kernel_sum(exec, &xr, &yr, false, inv)
    } else {
        kernel_sum(exec, &yr, &xr, false, inv)
    };
    Ok(kxx + kyy - 2.0 * kxy / (n * m) as f64)
}

/// Median of strictly positive pairwise distances over the pooled set.
pub fn median_heuristic(x: &Tensor, y: &Tensor, seed: u64) -> Result<f64> {
    if x.ncols() != y.ncols() {
        return Err(Error::invalid("median heuristic: point dimensions differ"));
    }
    let mut pooled = rows(x);
    pooled.extend(rows(y));
    if pooled.len() > MEDIAN_EXACT_LIMIT {
        let mut rng = SimRng::seed_from_u64(seed);
        let idx = sample_indices(&mut rng, pooled.len(), MEDIAN_EXACT_LIMIT);
        pooled = idx.into_iter().map(|i| pooled[i].clone()).collect();
    }
    let mut d = Vec::with_capacity(pooled.len() * pooled.len().saturating_sub(1) / 2);
    for i in 0..pooled.len() {
        for k in i + 1..pooled.len() {
            let v = sq_dist(&pooled[i], &pooled[k]).sqrt();
            if v > 0.0 {
                d.push(v);
            }
        }
    }
    if d.is_empty() {
        return Err(Error::invalid("median heuristic: all points are identical"));
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    Ok(if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) })
}

/// Fraction of rows on the checkerboard support.
pub fn support_accuracy(samples: &Tensor) -> Result<f64> {
    if samples.nrows() == 0 {
        return Err(Error::invalid("support accuracy of an empty set"));
    }
    let hits = samples
        .rows()
        .into_iter()
        .filter(|r| checkerboard_support(&r.to_vec()))
        .count();
    Ok(hits as f64 / samples.nrows() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectionStats {
    pub proposals: usize,
    pub accepted: usize,
}

impl RejectionStats {
    pub fn rate(&self) -> f64 {
        self.accepted as f64 / self.proposals.max(1) as f64
    }
}

/// Draws `j` points from `p(x | y)` by accepting prior proposals with
/// probability `exp(-|y - A x|^2 / 2 sigma^2)`.
pub fn rejection_sample<R, F>(
    y: &[f64],
    sigma: f64,
    j: usize,
    mut prior_sampler: F,
    a: &Tensor,
    rng: &mut R,
    max_proposals: usize,
) -> Result<(Tensor, RejectionStats)>
where
    R: Rng + ?Sized,
    F: FnMut(&mut R) -> Vec<f64>,
{
    if j == 0 {
        return Err(Error::invalid("rejection sampler needs j >= 1"));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if a.nrows() != y.len() {
        return Err(Error::invalid("observation and operator dimensions differ"));
    }
    let d = a.ncols();
    let mut out = Vec::with_capacity(j * d);
    let mut stats = RejectionStats { proposals: 0, accepted: 0 };
    while stats.accepted < j {
        if stats.proposals >= max_proposals {
            return Err(Error::RejectionBudget {
                proposals: stats.proposals,
                accepted: stats.accepted,
                rate: stats.rate(),
            });
        }
        let x = prior_sampler(rng);
        if x.len() != d {
            return Err(Error::invalid("prior sample has the wrong dimension"));
        }
        stats.proposals += 1;
        let ax: Vec<f64> = a.rows().into_iter().map(|r| r.iter().zip(&x).map(|(p, q)| p * q).sum()).collect();
        let accept = (-sq_dist(&ax, y) / (2.0 * sigma * sigma)).exp();
        if rng.random::<f64>() < accept {
            out.extend_from_slice(&x);
            stats.accepted += 1;
        }
    }
    let samples = Array2::from_shape_vec((j, d), out).expect("row-major buffer");
    Ok((samples, stats))
}

/// Rejection posterior for the checkerboard prior.
pub fn checkerboard_posterior<R: Rng + ?Sized>(
    y: &[f64],
    sigma: f64,
    a: &Tensor,
    j: usize,
    rng: &mut R,
    max_proposals: usize,
) -> Result<(Tensor, RejectionStats)> {
    rejection_sample(
        y,
        sigma,
        j,
        |r: &mut R| checkerboard_sample(1, r).row(0).to_vec(),
        a,
        rng,
        max_proposals,
    )
}

/// Expected acceptance rate `int exp(-(y - x_k)^2 / 2 sigma^2) p(x_k) dx_k`
/// for the operator selecting coordinate `axis` of a checkerboard point.
pub fn checkerboard_acceptance_rate(y: f64, sigma: f64, axis: usize) -> Result<f64> {
    if axis > 1 || !(sigma > 0.0) {
        return Err(Error::invalid("axis must be 0 or 1 and sigma positive"));
    }
    let width = 2.0 * BOARD_HALF_WIDTH / BOARD_CELLS as f64;
    let filled = Checkerboard::filled_cells();
    let s = sigma * std::f64::consts::SQRT_2;
    let mut total = 0.0;
    for col in 0..BOARD_CELLS {
        let count = filled
            .iter()
            .filter(|&&(i, j)| if axis == 0 { i == col } else { j == col })
            .count();
        let density = count as f64 / (filled.len() as f64 * width);
        let lo = -BOARD_HALF_WIDTH + col as f64 * width;
        let hi = lo + width;
        // int_lo^hi exp(-(y - x)^2 / 2 s^2) dx = sigma sqrt(pi/2) [erf((hi-y)/s') - erf((lo-y)/s')]
        let integral = sigma * (std::f64::consts::PI / 2.0).sqrt() * (erf((hi - y) / s) - erf((lo - y) / s));
        total += density * integral;
    }
    Ok(total)
}

/// Sample budgets and reference observation for [`evaluate_suite`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub b: usize,
    pub j: usize,
    pub n: usize,
    pub m: usize,
    pub steps: usize,
    pub y_ref: f64,
    pub class_ref: usize,
    pub max_proposals: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            b: 10_000,
            j: 100,
            n: 10_000,
            m: 10_000,
            steps: 1,
            y_ref: 0.5,
            class_ref: 0,
            max_proposals: 10_000_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub nlpd: f64,
    pub crps: f64,
    pub mmd_prior: f64,
    pub mmd_posterior: f64,
    pub sacc_prior: f64,
    pub sacc_posterior: f64,
    pub lengthscale_prior: f64,
    pub lengthscale_posterior: f64,
    pub b: usize,
    pub j: usize,
    pub n: usize,
    pub m: usize,
    pub steps: usize,
    pub y_ref: f64,
    pub class_ref: usize,
    pub seed: u64,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationRow {
    pub index: usize,
    pub class: usize,
    pub y: String,
    pub nlpd: f64,
    pub crps: f64,
}

pub fn write_observation_csv(path: &Path, rows: &[ObservationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Rng for task `index` of a run: same seed, separate ChaCha stream.
pub fn task_rng(seed: u64, index: u64) -> SimRng {
    let mut r = SimRng::seed_from_u64(seed);
    r.set_stream(index + 1);
    r
}

/// Full metric suite for one trained (generator, adapter) pair.
pub fn evaluate_suite(
    net: &MeanFlowNet,
    adapter: &NoiseAdapter,
    families: &[OperatorFamily],
    cfg: &EvalConfig,
    exec: Execution,
) -> Result<(MetricReport, Vec<ObservationRow>)> {
    if cfg.b == 0 || cfg.j == 0 || cfg.n < 2 || cfg.m < 2 {
        return Err(Error::invalid("evaluation needs B, J >= 1 and N, M >= 2"));
    }
    if families.is_empty() || families.len() != adapter.n_classes() {
        return Err(Error::invalid("one operator family per adapter class is required"));
    }
    if net.dim != 2 {
        return Err(Error::invalid("the metric suite is defined for the 2D checkerboard"));
    }
    let part = TimePartition::uniform(cfg.steps)?;

    let per_obs: Vec<Result<ObservationRow>> = par::map_indexed(exec, cfg.b, |b| {
        let mut rng = task_rng(cfg.seed, b as u64);
        let class = rng.random_range(0..families.len());
        let op = families[class].sample(&mut rng);
        let x = checkerboard_sample(1, &mut rng).row(0).to_vec();
        let y = op.observe(&x, &mut rng)?;
        let y_fresh = op.observe(&x, &mut rng)?;
        let post = posterior_ensemble(&y, class, adapter, net, &part, cfg.j, &mut rng)?;
        Ok(ObservationRow {
            index: b,
            class,
            y: y.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(";"),
            nlpd: nlpd(&y_fresh, &post, &op.a, op.sigma)?,
            crps: crps(&x, &post)?,
        })
    });
    let per_obs = per_obs.into_iter().collect::<Result<Vec<_>>>()?;
    let nlpd_mean = per_obs.iter().map(|r| r.nlpd).sum::<f64>() / cfg.b as f64;
    let crps_mean = per_obs.iter().map(|r| r.crps).sum::<f64>() / cfg.b as f64;

    let mut rng = task_rng(cfg.seed, cfg.b as u64);
    let model_prior = unconditional_batch(net, &part, cfg.n, &mut rng)?;
    let data_prior = checkerboard_sample(cfg.m, &mut rng);
    let l_prior = median_heuristic(&model_prior, &data_prior, cfg.seed)?;
    let mmd_prior = mmd_unbiased_with(exec, &model_prior, &data_prior, l_prior)?;

    let fam = families
        .get(cfg.class_ref)
        .ok_or_else(|| Error::invalid("reference class out of range"))?;
    let op = fam.sample(&mut rng);
    if op.obs_dim() != 1 {
        return Err(Error::invalid("reference observation must be scalar"));
    }
    let y_ref = [cfg.y_ref];
    let model_post = posterior_ensemble(&y_ref, cfg.class_ref, adapter, net, &part, cfg.n, &mut rng)?;
    let (oracle, _) = checkerboard_posterior(&y_ref, op.sigma, &op.a, cfg.m, &mut rng, cfg.max_proposals)?;
    let l_post = median_heuristic(&model_post, &oracle, cfg.seed)?;
    let mmd_post = mmd_unbiased_with(exec, &model_post, &oracle, l_post)?;

    let report = MetricReport {
        nlpd: nlpd_mean,
        crps: crps_mean,
        mmd_prior,
        mmd_posterior: mmd_post,
        sacc_prior: support_accuracy(&model_prior)?,
        sacc_posterior: support_accuracy(&model_post)?,
        lengthscale_prior: l_prior,
        lengthscale_posterior: l_post,
        b: cfg.b,
        j: cfg.j,
        n: cfg.n,
        m: cfg.m,
        steps: cfg.steps,
        y_ref: cfg.y_ref,
        class_ref: cfg.class_ref,
        seed: cfg.seed,
    };
    Ok((report, per_obs))
}

/// Standard-normal rows, used as a reference sampler in tests and benches.
pub fn gaussian_rows<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Tensor {
    Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal))
}
