//! Closed-form linear-Gaussian theory: optimal generator and adapter,
//! Kalman posterior, the rotational family of optimal generators, the
//! diagonal-covariance optimality gap and mean recovery, plus a numeric
//! trainer that checks the closed forms by gradient descent.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::problems::GaussianPrior;

/// `x ~ N(m, C)`, `y = A x + N(0, sigma^2 I)`, data tolerance `tau`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinGaussProblem {
    pub prior: GaussianPrior,
    pub a: DMatrix<f64>,
    pub sigma: f64,
    pub tau: f64,
}

/// `f(z) = K z + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGenerator {
    pub k: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// `q(z | y) = N(K y + b, Sigma)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineAdapter {
    pub k: DMatrix<f64>,
    pub b: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub diagonal: bool,
}

impl AffineAdapter {
    pub fn mean(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.k * y + &self.b
    }
}

/// `C = U diag(lambda)^2 U^T`.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenDecomp {
    pub u: DMatrix<f64>,
    pub lambda: DVector<f64>,
}

fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::NotSpd(what.to_string()))
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Eigenvalues ascend; each eigenvector's first nonzero entry is positive.
pub fn symmetric_eigen(m: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::invalid("eigendecomposition needs a square matrix"));
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    if (m - m.transpose()).amax() > 1e-10 * scale {
        return Err(Error::invalid("eigendecomposition needs a symmetric matrix"));
    }
    let mut a = symmetrize(m);
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        let mut e = v.column(i).into_owned();
        if let Some(first) = e.iter().find(|x| x.abs() > 1e-14) {
            if *first < 0.0 {
                e = -e;
            }
        }
        vectors.set_column(col, &e);
    }
    Ok((values, vectors))
}

impl EigenDecomp {
    pub fn of_covariance(c: &DMatrix<f64>) -> Result<Self> {
        let (vals, u) = symmetric_eigen(c)?;
        if let Some(v) = vals.iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::NotSpd(format!("eigenvalue {v:.3e}")));
        }
        Ok(Self {
            u,
            lambda: vals.map(f64::sqrt),
        })
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let l2 = DMatrix::from_diagonal(&self.lambda.map(|l| l * l));
        &self.u * l2 * self.u.transpose()
    }
}

pub fn is_orthogonal(q: &DMatrix<f64>, tol: f64) -> bool {
    q.is_square() && (q.transpose() * q - DMatrix::identity(q.nrows(), q.ncols())).amax() <= tol
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of `diag(R)` moved into `Q`.
pub fn haar_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    if d == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

/// Nearest orthogonal matrix in Frobenius norm (polar factor).
fn polar(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = m.clone().svd(true, true);
    match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => Ok(u * vt),
        _ => Err(Error::invalid("SVD failed")),
    }
}

impl LinGaussProblem {
    pub fn new(prior: GaussianPrior, a: DMatrix<f64>, sigma: f64, tau: f64) -> Result<Self> {
        if !(sigma > 0.0 && tau > 0.0) {
            return Err(Error::invalid(format!("sigma and tau must be positive, got {sigma}, {tau}")));
        }
        if a.ncols() != prior.dim() || a.nrows() == 0 {
            return Err(Error::invalid(format!(
                "operator is {:?}, prior dimension {}",
                a.shape(),
                prior.dim()
            )));
        }
        Ok(Self { prior, a, sigma, tau })
    }

    /// Random well-conditioned problem for property tests.
    pub fn random<R: Rng + ?Sized>(d: usize, dy: usize, rng: &mut R) -> Result<Self> {
        let mut normal = || rng.sample::<f64, _>(StandardNormal);
        let b = DMatrix::from_fn(d, d, |_, _| normal());
        let c = symmetrize(&(&b * b.transpose() / d as f64 + DMatrix::identity(d, d) * 0.5));
        let m = DVector::from_fn(d, |_, _| normal());
        let a = DMatrix::from_fn(dy, d, |_, _| normal());
        let sigma = 0.3 + rng.random::<f64>();
        let tau = 0.5 + 1.5 * rng.random::<f64>();
        Self::new(GaussianPrior::new(m, c)?, a, sigma, tau)
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.a.nrows()
    }

    fn c(&self) -> &DMatrix<f64> {
        &self.prior.cov
    }

    fn m(&self) -> &DVector<f64> {
        &self.prior.mean
    }

    /// Marginal covariance of `y`: `A C A^T + sigma^2 I`.
    pub fn obs_cov(&self) -> DMatrix<f64> {
        let dy = self.obs_dim();
        symmetrize(&(&self.a * self.c() * self.a.transpose() + DMatrix::identity(dy, dy) * self.sigma.powi(2)))
    }

    /// `K = C A^T (A C A^T + sigma^2 I)^{-1}`.
    pub fn kalman_gain(&self) -> Result<DMatrix<f64>> {
        let inner = spd_inverse(&self.obs_cov(), "A C A^T + sigma^2 I")?;
        Ok(self.c() * self.a.transpose() * inner)
    }

    pub fn posterior_mean(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let k = self.kalman_gain()?;
        Ok(self.m() + k * (y - &self.a * self.m()))
    }

    /// `C - K A C`.
    pub fn posterior_cov(&self) -> Result<DMatrix<f64>> {
        let k = self.kalman_gain()?;
        Ok(symmetrize(&(self.c() - k * &self.a * self.c())))
    }

    /// Lemma-style optimum of the adapter for a fixed generator.
    pub fn optimal_adapter(&self, gen: &LinearGenerator) -> Result<AffineAdapter> {
        let sigma = spd_inverse(&self.precision(gen), "adapter precision")?;
        self.adapter_with_cov(gen, symmetrize(&sigma), false)
    }

    /// `I + tau^-2 K^T K + sigma^-2 K^T A^T A K`.
    pub fn precision(&self, gen: &LinearGenerator) -> DMatrix<f64> {
        let d = self.dim();
        let (s2, t2) = (self.sigma.powi(-2), self.tau.powi(-2));
        let kt = gen.k.transpose();
        let ak = &self.a * &gen.k;
        symmetrize(&(DMatrix::identity(d, d) + &kt * &gen.k * t2 + ak.transpose() * ak * s2))
    }

    /// Optimal mean map for a given covariance:
    /// `K_phi = S K^T (sigma^-2 A^T + tau^-2 K_gain)`,
    /// `b_phi = S K^T [-sigma^-2 A^T A b + tau^-2 (I - K_gain A) m - tau^-2 b]`.
    fn adapter_with_cov(&self, gen: &LinearGenerator, cov: DMatrix<f64>, diagonal: bool) -> Result<AffineAdapter> {
        let d = self.dim();
        let (s2, t2) = (self.sigma.powi(-2), self.tau.powi(-2));
        let kg = self.kalman_gain()?;
        let at = self.a.transpose();
        let sk = &cov * gen.k.transpose();
        let k = &sk * (&at * s2 + &kg * t2);
        let inner = -(&at * &self.a * &gen.b) * s2
            + (DMatrix::identity(d, d) - &kg * &self.a) * self.m() * t2
            - &gen.b * t2;
        let b = &sk * inner;
        Ok(AffineAdapter {
            k,
            b,
            sigma: cov,
            diagonal,
        })
    }

    /// Pointwise objective `J(y; mu, Sigma)`.
    pub fn pointwise_objective(
        &self,
        gen: &LinearGenerator,
        y: &DVector<f64>,
        mu: &DVector<f64>,
        cov: &DMatrix<f64>,
    ) -> Result<f64> {
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotSpd("Sigma".into()))?;
        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let (s2, t2) = (self.sigma.powi(-2), self.tau.powi(-2));
        let ak = &self.a * &gen.k;
        let fmu = &gen.k * mu + &gen.b;
        let obs = (y - &self.a * &fmu).norm_squared() + (ak.transpose() * &ak * cov).trace();
        let post = self.posterior_mean(y)?;
        let data = (post - &fmu).norm_squared()
            + self.posterior_cov()?.trace()
            + (gen.k.transpose() * &gen.k * cov).trace();
        let kl = cov.trace() + mu.norm_squared() - logdet;
        Ok(0.5 * s2 * obs + 0.5 * t2 * data + 0.5 * kl)
    }

    /// `E_y J(y; K_phi y + b_phi, Sigma)` with `y ~ N(A m, A C A^T + sigma^2 I)`,
    /// in closed form.
    pub fn expected_objective(&self, gen: &LinearGenerator, ad: &AffineAdapter) -> Result<f64> {
        let dy = self.obs_dim();
        let sy = self.obs_cov();
        let ym = &self.a * self.m();
        // E |a + B y|^2 = |a + B E y|^2 + Tr(B Sy B^T)
        let quad = |b: &DMatrix<f64>, a: &DVector<f64>| (a + b * &ym).norm_squared() + (b * &sy * b.transpose()).trace();
        let (s2, t2) = (self.sigma.powi(-2), self.tau.powi(-2));
        let kk = &gen.k * &ad.k;
        let shift = &gen.b + &gen.k * &ad.b;

        let b1 = DMatrix::identity(dy, dy) - &self.a * &kk;
        let a1 = -(&self.a * &shift);
        let ak = &self.a * &gen.k;
        let obs = quad(&b1, &a1) + (ak.transpose() * &ak * &ad.sigma).trace();

        let kg = self.kalman_gain()?;
        let b2 = &kg - &kk;
        let a2 = self.m() - &kg * &ym - &shift;
        let data = quad(&b2, &a2) + self.posterior_cov()?.trace() + (gen.k.transpose() * &gen.k * &ad.sigma).trace();

        let chol = ad
            .sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotSpd("Sigma".into()))?;
        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let kl = ad.sigma.trace() + quad(&ad.k, &ad.b) - logdet;
        Ok(0.5 * s2 * obs + 0.5 * t2 * data + 0.5 * kl)
    }

    pub fn eigen(&self) -> Result<EigenDecomp> {
        EigenDecomp::of_covariance(self.c())
    }

    /// `K = U Lambda Q`, `b = m`.
    pub fn optimal_generator(&self, q: &DMatrix<f64>) -> Result<LinearGenerator> {
        let d = self.dim();
        if q.shape() != (d, d) || !is_orthogonal(q, 1e-10) {
            return Err(Error::invalid("Q must be a d x d orthogonal matrix"));
        }
        let e = self.eigen()?;
        Ok(LinearGenerator {
            k: &e.u * DMatrix::from_diagonal(&e.lambda) * q,
            b: self.m().clone(),
        })
    }

    /// `H = I + tau^-2 Lambda^2 + sigma^-2 Lambda U^T A^T A U Lambda`.
    pub fn h_matrix(&self) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let e = self.eigen()?;
        let l = DMatrix::from_diagonal(&e.lambda);
        let aul = &self.a * &e.u * &l;
        Ok(symmetrize(
            &(DMatrix::identity(d, d) + &l * &l * self.tau.powi(-2) + aul.transpose() * aul * self.sigma.powi(-2)),
        ))
    }

    /// `P(Q) = Q^T H Q`.
    pub fn p_matrix(&self, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if !is_orthogonal(q, 1e-10) {
            return Err(Error::invalid("Q must be orthogonal"));
        }
        Ok(symmetrize(&(q.transpose() * self.h_matrix()? * q)))
    }

    /// Orthogonal `Q` whose columns are eigenvectors of `H`.
    pub fn h_eigenbasis(&self) -> Result<DMatrix<f64>> {
        Ok(symmetric_eigen(&self.h_matrix()?)?.1)
    }

    pub fn optimality_gap(&self, q: &DMatrix<f64>) -> Result<f64> {
        hadamard_gap(&self.p_matrix(q)?)
    }

    /// Diagonal-constrained optimum for generator `U Lambda Q`:
    /// `Sigma = diag(P)^{-1}` with the matching mean map.
    pub fn diagonal_adapter(&self, q: &DMatrix<f64>) -> Result<AffineAdapter> {
        let gen = self.optimal_generator(q)?;
        let p = self.p_matrix(q)?;
        self.adapter_with_cov(&gen, diag_inverse_cov(&p)?, true)
    }

    /// `|K (K_phi y + b_phi) + b - E[x | y]|` at the (optionally diagonal)
    /// optimum for generator `U Lambda Q`.
    pub fn mean_recovery_error(&self, q: &DMatrix<f64>, diagonal: bool, y: &DVector<f64>) -> Result<f64> {
        let gen = self.optimal_generator(q)?;
        let ad = if diagonal {
            self.diagonal_adapter(q)?
        } else {
            self.optimal_adapter(&gen)?
        };
        Ok(recovery_error(self, &gen, &ad, y)?)
    }

    pub fn sample_observation<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let x = self.prior.sample(1, rng);
        let x = DVector::from_iterator(self.dim(), x.iter().copied());
        let noise = DVector::from_fn(self.obs_dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.a * x + noise * self.sigma
    }
}

/// `|K (K_phi y + b_phi) + b - E[x | y]|`.
pub fn recovery_error(
    prob: &LinGaussProblem,
    gen: &LinearGenerator,
    ad: &AffineAdapter,
    y: &DVector<f64>,
) -> Result<f64> {
    let xhat = &gen.k * ad.mean(y) + &gen.b;
    Ok((xhat - prob.posterior_mean(y)?).norm())
}

/// `diag(P)^{-1}` as a covariance matrix.
pub fn diag_inverse_cov(p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(v) = p.diagonal().iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::NotSpd(format!("diagonal entry {v}")));
    }
    Ok(DMatrix::from_diagonal(&p.diagonal().map(|v| 1.0 / v)))
}

/// `1/2 ln(prod_i P_ii / |P|)`.
pub fn hadamard_gap(p: &DMatrix<f64>) -> Result<f64> {
    let chol = p
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotSpd("P".into()))?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let logdiag: f64 = p.diagonal().iter().map(|v| v.ln()).sum();
    Ok(0.5 * (logdiag - logdet))
}

/// Which parameters the numeric trainer optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Generator and adapter together. The generator stays on the set of
    /// optimal generators `{(U Lambda Q, m)}`: `Q` moves by Riemannian SGD
    /// with momentum and a polar retraction.
    Joint,
    /// Adapter only, generator fixed at `U Lambda Q` for the given `Q`.
    Separate,
}

/// Step size of the rotation relative to the adapter learning rate.
const ROTATION_LR_SCALE: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericTrainerConfig {
    pub iters: usize,
    pub batch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
}

impl Default for NumericTrainerConfig {
    fn default() -> Self {
        Self {
            iters: 4000,
            batch: 512,
            lr_start: 0.02,
            lr_end: 1e-5,
        }
    }
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_fn(t.nrows(), t.ncols(), |i, j| t[[i, j]])
}

/// Minimizes the Monte Carlo joint loss with a diagonal adapter covariance
/// by Adam. The learning rate is held for the first half of the run, then
/// decays geometrically to `lr_end`.
///
/// `q_init` is the starting rotation of the generator (joint mode) or its
/// fixed rotation (separate mode).
pub fn numeric_joint_trainer<R: Rng + ?Sized>(
    prob: &LinGaussProblem,
    mode: TrainMode,
    q_init: &DMatrix<f64>,
    cfg: &NumericTrainerConfig,
    rng: &mut R,
) -> Result<(LinearGenerator, AffineAdapter)> {
    let d = prob.dim();
    if d > 4 {
        return Err(Error::invalid("numeric trainer supports d <= 4"));
    }
    let dy = prob.obs_dim();
    let eig = prob.eigen()?;
    let ul = &eig.u * DMatrix::from_diagonal(&eig.lambda);
    let ul_inv = DMatrix::from_diagonal(&eig.lambda.map(|l| 1.0 / l)) * eig.u.transpose();
    let mut gen = prob.optimal_generator(q_init)?;
    // Row-vector parameters: f = z K^T + b, mu = y K_phi^T + b_phi.
    let mut params: Vec<Tensor> = vec![
        to_tensor(&gen.k.transpose()),
        Array2::from_shape_fn((1, d), |(_, j)| gen.b[j]),
        Array2::zeros((dy, d)),
        Array2::zeros((1, d)),
        Array2::zeros((1, d)),
    ];
    let mut m1: Vec<Tensor> = params.iter().map(|p| Array2::zeros(p.dim())).collect();
    let mut m2 = m1.clone();
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let at = to_tensor(&prob.a.transpose());
    let n = cfg.batch;
    let (s2, t2) = (prob.sigma.powi(-2), prob.tau.powi(-2));
    let train_theta = mode == TrainMode::Joint;
    let mut rot_momentum = DMatrix::<f64>::zeros(d, d);
    let hold = cfg.iters / 2;
    let decay = (cfg.lr_end / cfg.lr_start).powf(1.0 / (cfg.iters - hold).max(1) as f64);

    for it in 0..cfg.iters {
        let x = prob.prior.sample(n, rng);
        let xi = Array2::from_shape_fn((n, dy), |_| rng.sample::<f64, _>(StandardNormal));
        let y = x.dot(&at) + xi * prob.sigma;
        let e = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));

        let mut g = Graph::new();
        let ids: Vec<_> = params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if i == 1 || (i == 0 && !train_theta) {
                    g.input(p.clone())
                } else {
                    g.parameter(p.clone())
                }
            })
            .collect();
        let (kt, bt, kpt, bp, ls) = (ids[0], ids[1], ids[2], ids[3], ids[4]);
        let yn = g.input(y.clone());
        let xn = g.input(x);
        let en = g.input(e);
        let atn = g.input(at.clone());
        let mu = g.matmul(yn, kpt)?;
        let mu = g.add(mu, bp)?;
        let half = g.scale(ls, 0.5)?;
        let s = g.exp(half)?;
        let se = g.mul(en, s)?;
        let z = g.add(mu, se)?;
        let f = g.matmul(z, kt)?;
        let f = g.add(f, bt)?;
        let af = g.matmul(f, atn)?;
        let r1 = g.sub(yn, af)?;
        let r1 = g.square(r1)?;
        let obs = g.sum(r1)?;
        let obs = g.scale(obs, 0.5 * s2 / n as f64)?;
        let r2 = g.sub(xn, f)?;
        let r2 = g.square(r2)?;
        let data = g.sum(r2)?;
        let data = g.scale(data, 0.5 * t2 / n as f64)?;
        let var = g.exp(ls)?;
        let kl_c = g.sub(var, ls)?;
        let kl_c = g.sum(kl_c)?;
        let kl_c = g.scale(kl_c, 0.5)?;
        let mu2 = g.square(mu)?;
        let mu2 = g.sum(mu2)?;
        let mu2 = g.scale(mu2, 0.5 / n as f64)?;
        let loss = g.add(obs, data)?;
        let loss = g.add(loss, kl_c)?;
        let loss = g.add(loss, mu2)?;
        let lv = g.scalar_value(loss)?;
        if !lv.is_finite() || lv > 1e6 {
            return Err(Error::Divergence {
                step: it,
                reason: format!("loss {lv:.3e}"),
            });
        }
        let grads = g.backward(loss)?;
        let lr = cfg.lr_start * decay.powi(it.saturating_sub(hold) as i32);
        let step = (it + 1) as i32;
        for (k, id) in ids.iter().enumerate().skip(2) {
            let gr = grads.get(*id).expect("parameter gradient");
            ndarray::Zip::from(&mut params[k])
                .and(gr)
                .and(&mut m1[k])
                .and(&mut m2[k])
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / (1.0 - f64::powi(b1, step));
                    let vh = *v / (1.0 - f64::powi(b2, step));
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
        if train_theta {
            // Riemannian step on the rotation of K = U Lambda Q.
            let g_k = to_dmatrix(grads.get(kt).expect("generator gradient")).transpose();
            let q = &ul_inv * to_dmatrix(&params[0]).transpose();
            let g_q = ul.transpose() * g_k;
            let omega = (&g_q * q.transpose() - &q * g_q.transpose()) * 0.5;
            rot_momentum = rot_momentum * 0.9 + omega;
            let q = polar(&((DMatrix::identity(d, d) - &rot_momentum * (lr * ROTATION_LR_SCALE)) * q))?;
            params[0] = to_tensor(&(&ul * &q).transpose());
        }
    }

    gen.k = to_dmatrix(&params[0]).transpose();
    gen.b = DVector::from_iterator(d, params[1].iter().copied());
    let ad = AffineAdapter {
        k: to_dmatrix(&params[2]).transpose(),
        b: DVector::from_iterator(d, params[3].iter().copied()),
        sigma: DMatrix::from_diagonal(&DVector::from_iterator(d, params[4].iter().map(|v| v.exp()))),
        diagonal: true,
    };
    Ok((gen, ad))
}

/// Fixed generic 2D problem: correlated prior, `A = (1 0)`.
pub fn fixture_2d() -> Result<LinGaussProblem> {
    LinGaussProblem::new(
        GaussianPrior::new(
            DVector::from_vec(vec![0.5, -0.3]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 0.5]),
        )?,
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        0.3,
        1.0,
    )
}

/// Central finite-difference gradient of `J` in `(mu, Sigma)`, the latter
/// along symmetric directions `E_ij + E_ji` with the step scaled by the
/// smallest eigenvalue of `Sigma`. Returns the max abs entry.
pub fn objective_fd_gradient(
    prob: &LinGaussProblem,
    gen: &LinearGenerator,
    y: &DVector<f64>,
    mu: &DVector<f64>,
    cov: &DMatrix<f64>,
    h: f64,
) -> Result<f64> {
    let d = prob.dim();
    let j = |m: &DVector<f64>, c: &DMatrix<f64>| prob.pointwise_objective(gen, y, m, c);
    let mut worst: f64 = 0.0;
    for i in 0..d {
        let mut e = DVector::zeros(d);
        e[i] = h;
        let g = (j(&(mu + &e), cov)? - j(&(mu - &e), cov)?) / (2.0 * h);
        worst = worst.max(g.abs());
    }
    let hs = h * symmetric_eigen(cov)?.0[0];
    for a in 0..d {
        for b in a..d {
            let mut e = DMatrix::zeros(d, d);
            e[(a, b)] = hs;
            e[(b, a)] = hs;
            let g = (j(mu, &(cov + &e))? - j(mu, &(cov - &e))?) / (2.0 * hs);
            worst = worst.max(g.abs());
        }
    }
    Ok(worst)
}

/// `(C^-1 + sigma^-2 A^T A)^-1 (C^-1 m + sigma^-2 A^T y)`.
pub fn posterior_mean_precision_form(prob: &LinGaussProblem, y: &DVector<f64>) -> Result<DVector<f64>> {
    let ci = spd_inverse(&prob.prior.cov, "C")?;
    let s2 = prob.sigma.powi(-2);
    let prec = symmetrize(&(&ci + prob.a.transpose() * &prob.a * s2));
    let rhs = &ci * &prob.prior.mean + prob.a.transpose() * y * s2;
    Ok(spd_inverse(&prec, "posterior precision")? * rhs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub name: String,
    pub passed: bool,
    /// Measured quantity compared against `threshold`.
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub rows: Vec<CheckRow>,
    /// Separate-training recovery errors of the diagonal closed form over
    /// Haar draws on the 2D fixture: minimum and median.
    pub calibrated_separate_min: f64,
    pub calibrated_separate_median: f64,
    pub numeric_joint_max_error: f64,
    pub numeric_separate_median_error: f64,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<34} {:>6} {:>12} {:>12}\n", "check", "result", "value", "threshold");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<34} {:>6} {:>12.3e} {:>12.3e}  {}\n",
                r.name,
                if r.passed { "PASS" } else { "FAIL" },
                r.value,
                r.threshold,
                r.detail
            ));
        }
        s
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs every closed-form and numeric check.
pub fn verify_suite(seed: u64, trainer: &NumericTrainerConfig) -> Result<VerifyReport> {
    let mut rng = crate::seeded_rng(seed);
    let mut rows = Vec::new();
    let mut row = |name: &str, value: f64, threshold: f64, below: bool, detail: String| {
        let passed = if below { value <= threshold } else { value > threshold };
        rows.push(CheckRow {
            name: name.into(),
            passed,
            value,
            threshold,
            detail,
        });
    };

    // Optimal adapter: gain, stationarity, posterior-mean forms.
    let (mut gain_err, mut stat_err, mut prec_err, mut push_err) = (0f64, 0f64, 0f64, 0f64);
    for k in 0..50 {
        let d = 1 + k % 4;
        let dy = 1 + (k / 4) % d;
        let p = LinGaussProblem::random(d, dy, &mut rng)?;
        let q = haar_orthogonal(d, &mut rng)?;
        let gen = p.optimal_generator(&q)?;
        let ad = p.optimal_adapter(&gen)?;
        gain_err = gain_err.max((&gen.k * &ad.k - p.kalman_gain()?).amax());
        let y = p.sample_observation(&mut rng);
        stat_err = stat_err.max(objective_fd_gradient(&p, &gen, &y, &ad.mean(&y), &ad.sigma, 1e-5)?);
        prec_err = prec_err.max((p.posterior_mean(&y)? - posterior_mean_precision_form(&p, &y)?).amax());
        let b = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let m = &b * b.transpose() / d as f64;
        let lhs = &gen.k * spd_inverse(&(DMatrix::identity(d, d) + gen.k.transpose() * &m * &gen.k), "push-through")?;
        let rhs = (DMatrix::identity(d, d) + &gen.k * gen.k.transpose() * &m)
            .try_inverse()
            .ok_or_else(|| Error::invalid("singular push-through matrix"))?
            * &gen.k;
        push_err = push_err.max((lhs - rhs).amax());
    }
    row("gain K_theta K_phi = K", gain_err, 1e-10, true, "50 random problems, d <= 4".into());
    row("stationarity of J at optimum", stat_err, 1e-6, true, "central differences, h = 1e-5".into());
    row("posterior mean precision form", prec_err, 1e-10, true, "50 random problems".into());
    row("push-through identity", push_err, 1e-10, true, "50 random problems".into());

    // Invariance of the expected objective over rotations.
    let p = LinGaussProblem::random(3, 2, &mut rng)?;
    let mut vals = Vec::new();
    for _ in 0..20 {
        let q = haar_orthogonal(3, &mut rng)?;
        let gen = p.optimal_generator(&q)?;
        vals.push(p.expected_objective(&gen, &p.optimal_adapter(&gen)?)?);
    }
    let spread = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max) - vals.iter().copied().fold(f64::INFINITY, f64::min);
    row("expected loss invariant in Q", spread, 1e-8, true, format!("20 Haar draws, value {:.6}", vals[0]));

    // Hadamard gap.
    let fix = fixture_2d()?;
    let mut min_gap = f64::INFINITY;
    for _ in 0..1000 {
        let q = haar_orthogonal(2, &mut rng)?;
        min_gap = min_gap.min(fix.optimality_gap(&q)?);
    }
    row("gap nonnegative", -min_gap, 1e-12, true, format!("1000 Haar draws, min gap {min_gap:.3e}"));
    let qh = fix.h_eigenbasis()?;
    row("gap zero at eigenbasis of H", fix.optimality_gap(&qh)?.abs(), 1e-10, true, String::new());
    let hand = hadamard_gap(&DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]))?;
    row("gap hand fixture", (hand - 0.5 * (4.0f64 / 3.0).ln()).abs(), 1e-12, true, format!("{hand:.12}"));
    let q = haar_orthogonal(2, &mut rng)?;
    let p_q = fix.p_matrix(&q)?;
    let sd = fix.diagonal_adapter(&q)?.sigma;
    let diag_ok = (0..2).all(|i| 1.0 / sd[(i, i)] == p_q[(i, i)]);
    row("diag precision equals diag(P)", if diag_ok { 0.0 } else { 1.0 }, 0.0, true, String::new());

    // Closed-form mean recovery.
    let mut full_err: f64 = 0.0;
    let mut eig_err: f64 = 0.0;
    let mut sep = Vec::new();
    for _ in 0..100 {
        let q = haar_orthogonal(2, &mut rng)?;
        let y = fix.sample_observation(&mut rng);
        full_err = full_err.max(fix.mean_recovery_error(&q, false, &y)?);
        eig_err = eig_err.max(fix.mean_recovery_error(&qh, true, &y)?);
        sep.push(fix.mean_recovery_error(&q, true, &y)?);
    }
    let above = sep.iter().filter(|&&e| e > 1e-4).count();
    row("mean recovery, full covariance", full_err, 1e-9, true, "100 (Q, y) draws".into());
    row("mean recovery, diag at eigenbasis", eig_err, 1e-9, true, "100 y draws".into());
    row(
        "mean gap, diag closed form",
        above as f64,
        98.0,
        false,
        format!("{above}/100 draws with error > 1e-4"),
    );
    let calibrated_separate_min = sep.iter().copied().fold(f64::INFINITY, f64::min);
    let calibrated_separate_median = median(&mut sep);

    // Numeric training.
    let ys: Vec<DVector<f64>> = (0..20).map(|_| fix.sample_observation(&mut rng)).collect();
    let q0 = haar_orthogonal(2, &mut rng)?;
    let (gen, ad) = numeric_joint_trainer(&fix, TrainMode::Joint, &q0, trainer, &mut rng)?;
    let mut joint_max: f64 = 0.0;
    for y in &ys {
        joint_max = joint_max.max(recovery_error(&fix, &gen, &ad, y)?);
    }
    let cov_err = (&gen.k * gen.k.transpose() - &fix.prior.cov).norm() / fix.prior.cov.norm();
    row("numeric joint mean error", joint_max, 1e-2, true, "20 observations".into());
    row("numeric joint K K^T = C", cov_err, 0.05, true, "relative Frobenius".into());
    let mut sep_num = Vec::new();
    for y in &ys {
        let q = haar_orthogonal(2, &mut rng)?;
        let (g, a) = numeric_joint_trainer(&fix, TrainMode::Separate, &q, trainer, &mut rng)?;
        sep_num.push(recovery_error(&fix, &g, &a, y)?);
    }
    let sep_med = median(&mut sep_num);
    row("numeric separate median error", sep_med, 1e-2, false, "20 Haar rotations".into());

    Ok(VerifyReport {
        seed,
        rows,
        calibrated_separate_min,
        calibrated_separate_median,
        numeric_joint_max_error: joint_max,
        numeric_separate_median_error: sep_med,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use nalgebra::{dmatrix, dvector};

    fn scalar_problem(c: f64, a: f64, sigma: f64) -> LinGaussProblem {
        LinGaussProblem::new(
            GaussianPrior::new(dvector![0.0], dmatrix![c]).unwrap(),
            dmatrix![a],
            sigma,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn kalman_gain_scalar_cases() {
        assert!((scalar_problem(1.0, 1.0, 1.0).kalman_gain().unwrap()[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((scalar_problem(2.0, 1.0, 1.0).kalman_gain().unwrap()[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(scalar_problem(2.0, 0.0, 1.0).kalman_gain().unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn posterior_mean_cases() {
        let p = scalar_problem(1.0, 1.0, 1.0);
        assert!((p.posterior_mean(&dvector![2.0]).unwrap()[0] - 1.0).abs() < 1e-15);
        let mut rng = seeded_rng(2);
        let p = LinGaussProblem::random(3, 2, &mut rng).unwrap();
        let am = &p.a * &p.prior.mean;
        assert!((p.posterior_mean(&am).unwrap() - &p.prior.mean).amax() < 1e-12);
    }

    #[test]
    fn optimal_adapter_hand_case() {
        let p = LinGaussProblem::new(
            GaussianPrior::new(dvector![0.0, 0.0], DMatrix::identity(2, 2)).unwrap(),
            DMatrix::identity(2, 2),
            1.0,
            1.0,
        )
        .unwrap();
        let gen = LinearGenerator {
            k: DMatrix::identity(2, 2),
            b: dvector![0.0, 0.0],
        };
        let ad = p.optimal_adapter(&gen).unwrap();
        assert!((ad.sigma.clone() - DMatrix::identity(2, 2) / 3.0).amax() < 1e-15);
        assert!((ad.k.clone() - DMatrix::identity(2, 2) * 0.5).amax() < 1e-15);
        assert!(ad.b.amax() < 1e-15);
    }

    #[test]
    fn jacobi_matches_reconstruction() {
        let mut rng = seeded_rng(4);
        for d in 1..=6 {
            let p = LinGaussProblem::random(d, 1, &mut rng).unwrap();
            let e = p.eigen().unwrap();
            assert!(is_orthogonal(&e.u, 1e-10));
            assert!((e.reconstruct() - &p.prior.cov).amax() < 1e-9);
        }
        let (v, u) = symmetric_eigen(&dmatrix![4.0, 0.0; 0.0, 9.0]).unwrap();
        assert_eq!(v, dvector![4.0, 9.0]);
        assert_eq!(u, DMatrix::identity(2, 2));
    }

    #[test]
    fn generator_square_root() {
        let p = LinGaussProblem::new(
            GaussianPrior::new(dvector![0.0, 1.0], dmatrix![4.0, 0.0; 0.0, 9.0]).unwrap(),
            dmatrix![1.0, 0.0],
            0.5,
            1.0,
        )
        .unwrap();
        let gen = p.optimal_generator(&DMatrix::identity(2, 2)).unwrap();
        assert!((gen.k.clone() - dmatrix![2.0, 0.0; 0.0, 3.0]).amax() < 1e-12);
        let q = haar_orthogonal(2, &mut seeded_rng(1)).unwrap();
        let gen = p.optimal_generator(&q).unwrap();
        assert!((&gen.k * gen.k.transpose() - &p.prior.cov).amax() < 1e-9);
        assert!(p.optimal_generator(&dmatrix![1.0, 1.0; 0.0, 1.0]).is_err());
    }

    #[test]
    fn hadamard_hand_case() {
        let g = hadamard_gap(&dmatrix![2.0, 1.0; 1.0, 2.0]).unwrap();
        assert!((g - 0.5 * (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((g - 0.14384).abs() < 1e-5);
    }

    #[test]
    fn haar_is_orthogonal() {
        let mut rng = seeded_rng(8);
        for d in 1..=5 {
            let q = haar_orthogonal(d, &mut rng).unwrap();
            assert!((q.transpose() * &q - DMatrix::identity(d, d)).norm() <= 1e-10);
            assert!((q.determinant().abs() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn expected_objective_matches_monte_carlo() {
        let mut rng = seeded_rng(11);
        let p = LinGaussProblem::random(2, 1, &mut rng).unwrap();
        let q = haar_orthogonal(2, &mut rng).unwrap();
        let gen = p.optimal_generator(&q).unwrap();
        let ad = p.optimal_adapter(&gen).unwrap();
        let closed = p.expected_objective(&gen, &ad).unwrap();
        let n = 20000;
        let mc: f64 = (0..n)
            .map(|_| {
                let y = p.sample_observation(&mut rng);
                p.pointwise_objective(&gen, &y, &ad.mean(&y), &ad.sigma).unwrap()
            })
            .sum::<f64>()
            / n as f64;
        assert!((closed - mc).abs() < 0.02 * closed.abs().max(1.0), "{closed} vs {mc}");
    }

    #[test]
    fn numeric_trainer_separate_mode_optimum() {
        let mut rng = seeded_rng(5);
        let p = LinGaussProblem::random(2, 1, &mut rng).unwrap();
        let q = haar_orthogonal(2, &mut rng).unwrap();
        let cfg = NumericTrainerConfig {
            iters: 1500,
            ..Default::default()
        };
        let (gen, ad) = numeric_joint_trainer(&p, TrainMode::Separate, &q, &cfg, &mut rng).unwrap();
        let gen_opt = p.optimal_generator(&q).unwrap();
        assert_eq!(gen, gen_opt);
        // The mean and covariance terms of the objective decouple, so the
        // trained mean map matches the unconstrained optimum.
        let full = p.optimal_adapter(&gen_opt).unwrap();
        let diag = p.diagonal_adapter(&q).unwrap();
        assert!((&ad.k - &full.k).amax() < 0.02, "{}", (&ad.k - &diag.k).amax());
        assert!((ad.b - full.b).amax() < 0.02);
        assert!((ad.sigma - diag.sigma).amax() < 0.02);
    }
}
