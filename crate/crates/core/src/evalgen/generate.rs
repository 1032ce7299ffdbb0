use rand::Rng;

use crate::consistency::ConsistencyModel;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::schedule::{NoiseSchedule, ScheduleKind};

/// A map from `(x_t, t)` to a data estimate, evaluated batch-wise at one time.
pub trait Denoiser {
    fn data_dim(&self) -> usize;
    fn schedule(&self) -> &NoiseSchedule;
    fn denoise(&self, x_t: &Tensor, t: f64) -> Result<Tensor>;
}

impl Denoiser for ConsistencyModel {
    fn data_dim(&self) -> usize {
        ConsistencyModel::data_dim(self)
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn denoise(&self, x_t: &Tensor, t: f64) -> Result<Tensor> {
        self.apply_at(x_t, t)
    }
}

/// VE uses 0.420. Flow matching uses the time with the same SNR, `0.42/1.42`.
pub fn default_t_mid(kind: ScheduleKind) -> f64 {
    match kind {
        ScheduleKind::Ve => 0.420,
        ScheduleKind::FlowMatching => 0.420 / 1.420,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub samples: Tensor,
    /// Model evaluations per sample.
    pub nfe: usize,
}

/// One- or two-step sampling from a zero-mean prior `x_T = β_T·z`.
///
/// The two-step sampler re-noises the first estimate to `t_mid` with fresh
/// noise and denoises again.
pub fn generate<D, R>(model: &D, n: usize, steps: usize, t_mid: f64, rng: &mut R) -> Result<Generation>
where
    D: Denoiser + ?Sized,
    R: Rng + ?Sized,
{
    let s = *model.schedule();
    let d = model.data_dim();
    if !(steps == 1 || steps == 2) {
        return Err(Error::domain(format!("steps must be 1 or 2, got {steps}")));
    }
    if steps == 2 && !(t_mid > s.t_min && t_mid < s.t_max) {
        return Err(Error::domain(format!(
            "t_mid = {t_mid} must lie in ({}, {})",
            s.t_min, s.t_max
        )));
    }
    let prior = Tensor::zeros(&[n, d]);
    let z = Tensor::standard_normal(&[n, d], rng);
    let x_t = s.perturb_at(&prior, &z, s.t_max)?;
    let mut y = model.denoise(&x_t, s.t_max)?;
    if steps == 2 {
        let z2 = Tensor::standard_normal(&[n, d], rng);
        let x_mid = s.perturb_at(&y, &z2, t_mid)?;
        y = model.denoise(&x_mid, t_mid)?;
    }
    Ok(Generation { samples: y, nfe: steps })
}
