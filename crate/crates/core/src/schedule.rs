//! Noise schedules, preconditioning and time sampling.
//!
//! A point on a diffusion trajectory is `x_t = α_t·x0 + β_t·z`. Two
//! schedules are supported: variance exploding (`α = 1, β = t`) and the
//! linear flow-matching interpolant (`α = 1 − t, β = t`).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::discretizer::SegmentationGrid;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Ve,
    FlowMatching,
}

impl ScheduleKind {
    pub fn tag(self) -> u8 {
        match self {
            ScheduleKind::Ve => 0,
            ScheduleKind::FlowMatching => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ScheduleKind::Ve),
            1 => Some(ScheduleKind::FlowMatching),
            _ => None,
        }
    }

    /// Default `(t_min, t_max)`.
    pub fn default_range(self) -> (f64, f64) {
        match self {
            ScheduleKind::Ve => (0.002, 80.0),
            ScheduleKind::FlowMatching => (1e-3, 1.0 - 1e-3),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Ve => "ve",
            ScheduleKind::FlowMatching => "fm",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ve" => Ok(ScheduleKind::Ve),
            "fm" => Ok(ScheduleKind::FlowMatching),
            other => Err(Error::config(format!("unknown schedule `{other}` (ve|fm)"))),
        }
    }
}

/// `(α_t, β_t, dα/dt, dβ/dt)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleValues {
    pub alpha: f64,
    pub beta: f64,
    pub dalpha: f64,
    pub dbeta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub t_min: f64,
    pub t_max: f64,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, t_min: f64, t_max: f64) -> Result<Self> {
        let ok = match kind {
            ScheduleKind::Ve => t_min > 0.0 && t_max > t_min,
            ScheduleKind::FlowMatching => t_min >= 0.0 && t_max > t_min && t_max <= 1.0,
        };
        if !ok || !t_max.is_finite() {
            return Err(Error::config(format!("invalid {kind} time range [{t_min}, {t_max}]")));
        }
        Ok(NoiseSchedule { kind, t_min, t_max })
    }

    pub fn with_defaults(kind: ScheduleKind) -> Self {
        let (t_min, t_max) = kind.default_range();
        NoiseSchedule { kind, t_min, t_max }
    }

    pub fn span(&self) -> f64 {
        self.t_max - self.t_min
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if !(self.t_min..=self.t_max).contains(&t) {
            return Err(Error::domain(format!(
                "t = {t} outside [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> Result<ScheduleValues> {
        self.check_time(t)?;
        Ok(self.eval_unchecked(t))
    }

    fn eval_unchecked(&self, t: f64) -> ScheduleValues {
        match self.kind {
            ScheduleKind::Ve => ScheduleValues {
                alpha: 1.0,
                beta: t,
                dalpha: 0.0,
                dbeta: 1.0,
            },
            ScheduleKind::FlowMatching => ScheduleValues {
                alpha: 1.0 - t,
                beta: t,
                dalpha: -1.0,
                dbeta: 1.0,
            },
        }
    }

    /// `β_t / α_t`, the ratio used for log-normal time sampling.
    pub fn snr(&self, t: f64) -> Result<f64> {
        let v = self.eval(t)?;
        if v.alpha == 0.0 {
            return Err(Error::domain(format!("snr undefined at t = {t} (α = 0)")));
        }
        Ok(v.beta / v.alpha)
    }

    /// Inverse of [`snr`](Self::snr).
    pub fn time_from_snr(&self, snr: f64) -> f64 {
        match self.kind {
            ScheduleKind::Ve => snr,
            ScheduleKind::FlowMatching => snr / (1.0 + snr),
        }
    }

    /// `α_t·x0 + β_t·z` with one time per row.
    pub fn perturb(&self, x0: &Tensor, z: &Tensor, ts: &[f64]) -> Result<Tensor> {
        self.combine(x0, z, ts, |v| (v.alpha, v.beta))
    }

    /// `α′_t·x0 + β′_t·z`, the time derivative of `perturb` at fixed `(x0, z)`.
    pub fn time_tangent(&self, x0: &Tensor, z: &Tensor, ts: &[f64]) -> Result<Tensor> {
        self.combine(x0, z, ts, |v| (v.dalpha, v.dbeta))
    }

    pub fn perturb_at(&self, x0: &Tensor, z: &Tensor, t: f64) -> Result<Tensor> {
        self.perturb(x0, z, &vec![t; x0.rows()])
    }

    fn combine(
        &self,
        x0: &Tensor,
        z: &Tensor,
        ts: &[f64],
        coeffs: impl Fn(ScheduleValues) -> (f64, f64),
    ) -> Result<Tensor> {
        x0.ensure_same_shape(z, "x0 and z")?;
        if ts.len() != x0.rows() {
            return Err(Error::shape(format!("{} times for {} rows", ts.len(), x0.rows())));
        }
        let mut out = x0.clone();
        let cols = x0.cols();
        for (i, &t) in ts.iter().enumerate() {
            let (a, b) = coeffs(self.eval(t)?);
            let zr = z.row(i);
            for (o, &zv) in out.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(zr) {
                *o = a * *o + b * zv;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrecondKind {
    Edm,
    RectifiedFlow,
    /// `c_skip = 0, c_out = 1, c_in = 1, c_noise = t`: the raw network,
    /// used for affine test models and diagnostics.
    Identity,
}

impl PrecondKind {
    pub fn tag(self) -> u8 {
        match self {
            PrecondKind::Edm => 0,
            PrecondKind::RectifiedFlow => 1,
            PrecondKind::Identity => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(PrecondKind::Edm),
            1 => Some(PrecondKind::RectifiedFlow),
            2 => Some(PrecondKind::Identity),
            _ => None,
        }
    }
}

impl fmt::Display for PrecondKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrecondKind::Edm => "edm",
            PrecondKind::RectifiedFlow => "rf",
            PrecondKind::Identity => "identity",
        })
    }
}

impl FromStr for PrecondKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edm" => Ok(PrecondKind::Edm),
            "rf" => Ok(PrecondKind::RectifiedFlow),
            "identity" => Ok(PrecondKind::Identity),
            other => Err(Error::config(format!("unknown precond `{other}` (edm|rf)"))),
        }
    }
}

/// `(c_skip, c_out, c_in, c_noise)`, or their time derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrecondCoeffs {
    pub skip: f64,
    pub out: f64,
    pub input: f64,
    pub noise: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preconditioner {
    pub kind: PrecondKind,
    pub sigma_data: f64,
}

impl Preconditioner {
    pub fn new(kind: PrecondKind, sigma_data: f64) -> Result<Self> {
        if !(sigma_data > 0.0 && sigma_data.is_finite()) {
            return Err(Error::config(format!("sigma_data must be positive, got {sigma_data}")));
        }
        Ok(Preconditioner { kind, sigma_data })
    }

    pub fn edm(sigma_data: f64) -> Self {
        Preconditioner {
            kind: PrecondKind::Edm,
            sigma_data,
        }
    }

    pub fn rectified_flow() -> Self {
        Preconditioner {
            kind: PrecondKind::RectifiedFlow,
            sigma_data: 0.5,
        }
    }

    pub fn identity() -> Self {
        Preconditioner {
            kind: PrecondKind::Identity,
            sigma_data: 0.5,
        }
    }

    fn check(&self, t: f64) -> Result<()> {
        if self.kind == PrecondKind::Edm && t <= 0.0 {
            return Err(Error::domain(format!("EDM preconditioning needs t > 0, got {t}")));
        }
        if !t.is_finite() {
            return Err(Error::domain(format!("non-finite time {t}")));
        }
        Ok(())
    }

    pub fn coeffs(&self, t: f64) -> Result<PrecondCoeffs> {
        self.check(t)?;
        Ok(match self.kind {
            PrecondKind::Edm => {
                let sd = self.sigma_data;
                let s = sd * sd + t * t;
                PrecondCoeffs {
                    skip: sd * sd / s,
                    out: sd * t / s.sqrt(),
                    input: 1.0 / s.sqrt(),
                    noise: 0.25 * t.ln(),
                }
            }
            PrecondKind::RectifiedFlow => PrecondCoeffs {
                skip: 1.0,
                out: -t,
                input: 1.0,
                noise: t,
            },
            PrecondKind::Identity => PrecondCoeffs {
                skip: 0.0,
                out: 1.0,
                input: 1.0,
                noise: t,
            },
        })
    }

    /// Time derivatives of [`coeffs`](Self::coeffs).
    pub fn derivatives(&self, t: f64) -> Result<PrecondCoeffs> {
        self.check(t)?;
        Ok(match self.kind {
            PrecondKind::Edm => {
                let sd = self.sigma_data;
                let s = sd * sd + t * t;
                let s32 = s * s.sqrt();
                PrecondCoeffs {
                    skip: -2.0 * t * sd * sd / (s * s),
                    out: sd * sd * sd / s32,
                    input: -t / s32,
                    noise: 0.25 / t,
                }
            }
            PrecondKind::RectifiedFlow => PrecondCoeffs {
                skip: 0.0,
                out: -1.0,
                input: 0.0,
                noise: 1.0,
            },
            PrecondKind::Identity => PrecondCoeffs {
                skip: 0.0,
                out: 0.0,
                input: 0.0,
                noise: 1.0,
            },
        })
    }
}

/// Adjacent grid times `t_index > t_{index−1}` drawn for one training sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimePair {
    pub upper: f64,
    pub lower: f64,
    pub index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimeSampler {
    /// `log SNR(t) ~ N(p_mean, p_std²)`, snapped to the nearest grid time.
    LogNormal { p_mean: f64, p_std: f64 },
    /// Upper index uniform on `{1, …, N}`.
    UniformGrid,
}

impl TimeSampler {
    pub fn sample_pair<R: Rng + ?Sized>(
        &self,
        grid: &SegmentationGrid,
        schedule: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<TimePair> {
        let times = grid.times();
        if times.len() < 2 {
            return Err(Error::domain("time sampling needs a grid with at least two points"));
        }
        let n = times.len() - 1;
        let index = match *self {
            TimeSampler::UniformGrid => rng.random_range(1..=n),
            TimeSampler::LogNormal { p_mean, p_std } => {
                let log_snr = p_mean + p_std * rng.sample::<f64, _>(StandardNormal);
                snap_to_grid(times, schedule.time_from_snr(log_snr.exp()))
            }
        };
        Ok(TimePair {
            upper: times[index],
            lower: times[index - 1],
            index,
        })
    }
}

/// Index `≥ 1` of the grid time nearest to `t` (ties go to the lower index).
pub fn snap_to_grid(times: &[f64], t: f64) -> usize {
    let n = times.len() - 1;
    let hi = times.partition_point(|&g| g < t).clamp(1, n);
    if hi > 1 && (t - times[hi - 1]) <= (times[hi] - t) {
        hi - 1
    } else {
        hi
    }
}
