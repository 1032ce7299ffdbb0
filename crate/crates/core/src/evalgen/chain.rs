use crate::discretizer::SegmentationGrid;
use crate::error::{Error, Result};
use crate::evalgen::Denoiser;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChainBound {
    /// `sqrt(E‖f(x_T) − x0‖²)`.
    pub lhs: f64,
    /// `Σ_i sqrt(E‖f(x_{t_i}) − f(x_{t_{i−1}})‖²)`.
    pub rhs: f64,
    /// `sqrt(E‖f(x_ε) − x0‖²)`.
    pub boundary_residual: f64,
    /// Three standard errors of `lhs`.
    pub tolerance: f64,
    pub holds: bool,
}

impl ChainBound {
    /// `rhs + boundary_residual − lhs`.
    pub fn slack(&self) -> f64 {
        self.rhs + self.boundary_residual - self.lhs
    }
}

fn row_sq_dists(a: &Tensor, b: &Tensor) -> Vec<f64> {
    a.iter_rows()
        .zip(b.iter_rows())
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum())
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Accumulated-error check along one grid with shared `(x0, z)` per sample.
///
/// By Minkowski's inequality on the batch measure,
/// `lhs ≤ rhs + boundary_residual` holds for every batch up to rounding. The
/// tolerance is a delta-method standard error of `lhs` and only matters when
/// the batch estimate is read as a population statement.
pub fn chain_bound_check<D: Denoiser + ?Sized>(
    model: &D,
    grid: &SegmentationGrid,
    x0: &Tensor,
    z: &Tensor,
) -> Result<ChainBound> {
    x0.ensure_same_shape(z, "chain_bound_check")?;
    if x0.rows() == 0 {
        return Err(Error::shape("empty batch"));
    }
    if x0.cols() != model.data_dim() {
        return Err(Error::shape("batch width does not match model"));
    }
    let s = model.schedule();
    let times = grid.times();
    let mut outputs = Vec::with_capacity(times.len());
    for &t in times {
        outputs.push(model.denoise(&s.perturb_at(x0, z, t)?, t)?);
    }
    let top = row_sq_dists(&outputs[times.len() - 1], x0);
    let lhs = mean(&top).sqrt();
    let rhs = outputs
        .windows(2)
        .map(|w| mean(&row_sq_dists(&w[1], &w[0])).sqrt())
        .sum::<f64>();
    let boundary_residual = mean(&row_sq_dists(&outputs[0], x0)).sqrt();

    let n = top.len() as f64;
    let m = mean(&top);
    let var = top.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / (n - 1.0).max(1.0);
    let tolerance = if lhs > 0.0 {
        3.0 * var.sqrt() / (2.0 * lhs * n.sqrt())
    } else {
        0.0
    };
    let rounding = 1e-12 * (lhs + rhs + boundary_residual);
    Ok(ChainBound {
        lhs,
        rhs,
        boundary_residual,
        tolerance,
        holds: lhs <= rhs + boundary_residual + tolerance + rounding,
    })
}
