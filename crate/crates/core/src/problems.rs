//! Data distributions and linear observation models.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Side length of the checkerboard box `[-2, 2]^2` divided into 4x4 cells.
pub const BOARD_HALF_WIDTH: f64 = 2.0;
pub const BOARD_CELLS: usize = 4;

/// 4x4 checkerboard on `[-2, 2]^2`.
///
/// Cell `(i, j)` covers `[i - 2, i - 1) x [j - 2, j - 1)` and is filled when
/// `i + j` is even, giving 8 filled cells of side 1.
#[derive(Clone, Copy, Debug, Default)]
pub struct Checkerboard;

impl Checkerboard {
    /// Cell indices `(i, j)` of a point inside the box, half-open on the right.
    pub fn cell_of(x: &[f64]) -> Option<(usize, usize)> {
        if x.len() != 2 {
            return None;
        }
        let idx = |v: f64| -> Option<usize> {
            let k = (v + BOARD_HALF_WIDTH).floor();
            (k >= 0.0 && k < BOARD_CELLS as f64).then_some(k as usize)
        };
        Some((idx(x[0])?, idx(x[1])?))
    }

    pub fn is_filled(i: usize, j: usize) -> bool {
        i < BOARD_CELLS && j < BOARD_CELLS && (i + j) % 2 == 0
    }

    /// The 8 filled cells in row-major order.
    pub fn filled_cells() -> Vec<(usize, usize)> {
        (0..BOARD_CELLS)
            .flat_map(|i| (0..BOARD_CELLS).map(move |j| (i, j)))
            .filter(|&(i, j)| Self::is_filled(i, j))
            .collect()
    }

    /// Center of cell `(i, j)`.
    pub fn cell_center(i: usize, j: usize) -> [f64; 2] {
        [i as f64 - 1.5, j as f64 - 1.5]
    }
}

pub fn checkerboard_support(x: &[f64]) -> bool {
    matches!(Checkerboard::cell_of(x), Some((i, j)) if Checkerboard::is_filled(i, j))
}

/// `n` checkerboard points as an `n x 2` array: a filled cell is drawn
/// uniformly, then a point uniformly inside it.
pub fn checkerboard_sample<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    let cells = Checkerboard::filled_cells();
    let mut out = Array2::zeros((n, 2));
    for mut row in out.rows_mut() {
        let (i, j) = cells[rng.random_range(0..cells.len())];
        row[0] = i as f64 - BOARD_HALF_WIDTH + rng.random::<f64>();
        row[1] = j as f64 - BOARD_HALF_WIDTH + rng.random::<f64>();
    }
    out
}

/// Literal accept/reject construction: `x = 4(u - 1/2)` for `u ~ U[0,1]^2`,
/// kept when it lands on a filled cell.
pub fn checkerboard_sample_rejection<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    let mut out = Array2::zeros((n, 2));
    let mut k = 0;
    while k < n {
        let x = [
            4.0 * (rng.random::<f64>() - 0.5),
            4.0 * (rng.random::<f64>() - 0.5),
        ];
        if checkerboard_support(&x) {
            out[[k, 0]] = x[0];
            out[[k, 1]] = x[1];
            k += 1;
        }
    }
    out
}

/// `y = A x + sigma * xi` with `xi ~ N(0, I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearOperator {
    /// `d_y x d`.
    pub a: Tensor,
    pub sigma: f64,
    pub class: usize,
}

impl LinearOperator {
    pub fn new(a: Tensor, sigma: f64, class: usize) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("noise std must be finite and >= 0, got {sigma}")));
        }
        if a.is_empty() || a.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("operator matrix must be nonempty and finite"));
        }
        Ok(Self { a, sigma, class })
    }

    pub fn obs_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.state_dim() {
            return Err(Error::invalid(format!(
                "operator expects dimension {}, got {}",
                self.state_dim(),
                x.len()
            )));
        }
        Ok(self
            .a
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Observation with an explicit standard-normal draw `xi`.
    pub fn observe_with(&self, x: &[f64], xi: &[f64]) -> Result<Vec<f64>> {
        if xi.len() != self.obs_dim() {
            return Err(Error::invalid("noise draw has wrong dimension"));
        }
        let mut y = self.apply(x)?;
        for (yi, e) in y.iter_mut().zip(xi) {
            *yi += self.sigma * e;
        }
        Ok(y)
    }

    pub fn observe<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let xi: Vec<f64> = (0..self.obs_dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.observe_with(x, &xi)
    }
}

/// Operator class `c`: a set of matrices sampled uniformly, shared noise.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorFamily {
    pub class: usize,
    pub members: Vec<Tensor>,
    pub sigma: f64,
}

impl OperatorFamily {
    pub fn new(class: usize, members: Vec<Tensor>, sigma: f64) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::invalid("operator family needs at least one member"))?;
        if members.iter().any(|m| m.dim() != first.dim()) {
            return Err(Error::invalid("family members must share a shape"));
        }
        LinearOperator::new(first.clone(), sigma, class)?;
        Ok(Self {
            class,
            members,
            sigma,
        })
    }

    pub fn singleton(class: usize, a: Tensor, sigma: f64) -> Result<Self> {
        Self::new(class, vec![a], sigma)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> LinearOperator {
        let k = if self.members.len() == 1 {
            0
        } else {
            rng.random_range(0..self.members.len())
        };
        LinearOperator {
            a: self.members[k].clone(),
            sigma: self.sigma,
            class: self.class,
        }
    }
}

/// Class 0 observes the first coordinate, class 1 the second.
pub fn checkerboard_families(sigma: f64) -> Result<Vec<OperatorFamily>> {
    Ok(vec![
        OperatorFamily::singleton(0, Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap(), sigma)?,
        OperatorFamily::singleton(1, Array2::from_shape_vec((1, 2), vec![0.0, 1.0]).unwrap(), sigma)?,
    ])
}

/// `N(m, C)` with a cached lower Cholesky factor.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl GaussianPrior {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(Error::invalid(format!(
                "covariance is {:?}, mean has length {d}",
                cov.shape()
            )));
        }
        let asym = (&cov - cov.transpose()).amax();
        if asym > 1e-12 {
            return Err(Error::NotSpd(format!("asymmetry {asym:.3e}")));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotSpd("Cholesky factorization failed".into()))?
            .l();
        Ok(Self { mean, cov, chol })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cholesky(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// `n x d` draws `m + L xi`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        let mut xi = DVector::zeros(d);
        for mut row in out.rows_mut() {
            for v in xi.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let x = &self.mean + &self.chol * &xi;
            for (o, v) in row.iter_mut().zip(x.iter()) {
                *o = *v;
            }
        }
        out
    }
}

/// Writes points as CSV with header `x1,...,xd`.
pub fn save_points(path: &Path, points: &Tensor) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((1..=points.ncols()).map(|i| format!("x{i}")))?;
    for row in points.rows() {
        w.write_record(row.iter().map(|v| format!("{v:e}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_points(path: &Path) -> Result<Tensor> {
    let mut r = csv::Reader::from_path(path)?;
    let cols = r.headers()?.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != cols {
            return Err(Error::invalid(format!("row {} has {} fields, expected {cols}", rows + 1, rec.len())));
        }
        for field in rec.iter() {
            data.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::invalid(format!("row {}: {e}", rows + 1)))?,
            );
        }
        rows += 1;
    }
    Ok(Array2::from_shape_vec((rows, cols), data).expect("row-major fill"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use nalgebra::dmatrix;

    #[test]
    fn support_cell_midpoints() {
        for i in 0..4 {
            for j in 0..4 {
                let c = Checkerboard::cell_center(i, j);
                assert_eq!(checkerboard_support(&c), (i + j) % 2 == 0, "cell {i},{j}");
            }
        }
        assert!(!checkerboard_support(&[3.0, 0.0]));
        assert!(!checkerboard_support(&[2.0, -2.0]));
        assert!(checkerboard_support(&[-2.0, -2.0]));
        assert_eq!(Checkerboard::filled_cells().len(), 8);
    }

    #[test]
    fn sampler_lands_on_support() {
        let mut rng = seeded_rng(1);
        let pts = checkerboard_sample(10_000, &mut rng);
        assert!(pts.rows().into_iter().all(|r| checkerboard_support(&[r[0], r[1]])));
        let pts = checkerboard_sample_rejection(2_000, &mut rng);
        assert!(pts.rows().into_iter().all(|r| checkerboard_support(&[r[0], r[1]])));
    }

    #[test]
    fn sampler_reproducible() {
        let a = checkerboard_sample(50, &mut seeded_rng(9));
        let b = checkerboard_sample(50, &mut seeded_rng(9));
        assert_eq!(a, b);
    }

    #[test]
    fn observe_noiseless() {
        let op = LinearOperator::new(Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap(), 0.0, 0).unwrap();
        let y = op.observe(&[0.3, -1.2], &mut seeded_rng(0)).unwrap();
        assert_eq!(y, vec![0.3]);
        assert!(op.observe(&[0.3], &mut seeded_rng(0)).is_err());
    }

    #[test]
    fn observe_is_linear_for_fixed_noise() {
        let a = Array2::from_shape_vec((2, 2), vec![1.0, 2.0, -0.5, 0.25]).unwrap();
        let op = LinearOperator::new(a, 0.3, 0).unwrap();
        let xi = [0.7, -1.1];
        let x1 = [0.2, 0.4];
        let x2 = [-1.0, 3.0];
        let sum = op.observe_with(&[x1[0] + x2[0], x1[1] + x2[1]], &xi).unwrap();
        let a1 = op.apply(&x1).unwrap();
        let a2 = op.apply(&x2).unwrap();
        for k in 0..2 {
            assert!((sum[k] - (a1[k] + a2[k] + 0.3 * xi[k])).abs() < 1e-14);
        }
    }

    #[test]
    fn families_fixed_and_tagged() {
        let fams = checkerboard_families(0.1).unwrap();
        let mut rng = seeded_rng(3);
        for _ in 0..5 {
            let op0 = fams[0].sample(&mut rng);
            assert_eq!(op0.a.as_slice().unwrap(), &[1.0, 0.0]);
            assert_eq!(op0.class, 0);
            let op1 = fams[1].sample(&mut rng);
            assert_eq!(op1.a.as_slice().unwrap(), &[0.0, 1.0]);
            assert_eq!(op1.class, 1);
        }
    }

    #[test]
    fn prior_cholesky_and_validation() {
        let p = GaussianPrior::new(DVector::zeros(2), dmatrix![4.0, 0.0; 0.0, 9.0]).unwrap();
        assert_eq!(p.cholesky(), &dmatrix![2.0, 0.0; 0.0, 3.0]);
        assert!(GaussianPrior::new(DVector::zeros(2), dmatrix![1.0, 2.0; 2.0, 1.0]).is_err());
        assert!(GaussianPrior::new(DVector::zeros(2), dmatrix![1.0, 0.1; 0.0, 1.0]).is_err());
    }

    #[test]
    fn points_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pts.csv");
        let pts = checkerboard_sample(100, &mut seeded_rng(4));
        save_points(&path, &pts).unwrap();
        assert_eq!(load_points(&path).unwrap(), pts);
    }
}
