//! Differentiable rewards for reward-tilted fine-tuning.

use ndarray::Array2;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::problems::Checkerboard;

pub trait Reward: Sync {
    /// `R(x, c)` for one point.
    fn value(&self, x: &[f64], class: usize) -> Result<f64>;

    /// Records `R(x_i, c_i)` for each row of `x`, returning an `n x 1` node.
    fn graph(&self, g: &mut Graph, x: NodeId, classes: &[usize]) -> Result<NodeId>;
}

/// `R(x, c) = -|x - center_c|^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterReward {
    pub centers: Vec<Vec<f64>>,
}

impl CenterReward {
    pub fn new(centers: Vec<Vec<f64>>) -> Result<Self> {
        let d = centers
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::invalid("reward needs at least one center"))?;
        if centers.iter().any(|c| c.len() != d) {
            return Err(Error::invalid("reward centers differ in dimension"));
        }
        Ok(Self { centers })
    }

    /// Class `c` targets the center of the `c`-th filled checkerboard cell.
    pub fn checkerboard(n_classes: usize) -> Result<Self> {
        let cells = Checkerboard::filled_cells();
        Self::new(
            (0..n_classes)
                .map(|c| {
                    let (i, j) = cells[c % cells.len()];
                    Checkerboard::cell_center(i, j).to_vec()
                })
                .collect(),
        )
    }

    fn center(&self, class: usize) -> Result<&[f64]> {
        self.centers
            .get(class)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("no reward center for class {class}")))
    }
}

impl Reward for CenterReward {
    fn value(&self, x: &[f64], class: usize) -> Result<f64> {
        let c = self.center(class)?;
        if c.len() != x.len() {
            return Err(Error::invalid("point and reward center differ in dimension"));
        }
        Ok(-x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
    }

    fn graph(&self, g: &mut Graph, x: NodeId, classes: &[usize]) -> Result<NodeId> {
        let (n, d) = g.shape(x);
        if n != classes.len() {
            return Err(Error::invalid("one class per row required"));
        }
        let mut centers = Array2::zeros((n, d));
        for (i, &c) in classes.iter().enumerate() {
            let ctr = self.center(c)?;
            if ctr.len() != d {
                return Err(Error::invalid("point and reward center differ in dimension"));
            }
            for (k, v) in ctr.iter().enumerate() {
                centers[[i, k]] = *v;
            }
        }
        let cn = g.input(centers);
        let diff = g.sub(x, cn)?;
        let sq = g.square(diff)?;
        let s = g.sum_cols(sq)?;
        g.scale(s, -1.0)
    }
}
