//! Adaptive time discretization.
//!
//! For a frozen model, the step `Δt` at time `t` trades local consistency
//! `E‖f(x_t) − f(x_{t−Δt})‖²` against the teacher's denoising error
//! `E‖f(x_{t−Δt}) − x0‖²` weighted by `λ`. Linearizing
//! `f(x_{t−Δt}) ≈ f(x_t) − v·Δt` along the fixed-noise trajectory turns this
//! into a scalar least-squares problem with solution
//!
//! ```text
//! Δt* = λ/(1+λ) · E[vᵀ(f(x_t) − x0)] / E[vᵀv]
//! ```
//!
//! [`build_grid`] iterates this step from `T` down to `ε`.

use std::fmt;

use rand::Rng;

use crate::consistency::ConsistencyModel;
use crate::error::{Error, Result};
use crate::evalgen::DataSource;
use crate::numerics::Tensor;
use crate::schedule::NoiseSchedule;

/// Strictly increasing times `ε = t_0 < … < t_N = T`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationGrid {
    times: Vec<f64>,
    pub built_at_step: u64,
    pub lambda_used: f64,
}

impl SegmentationGrid {
    pub fn new(times: Vec<f64>, built_at_step: u64, lambda_used: f64) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::domain("a grid needs at least two times"));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("grid time".into()));
        }
        if let Some(w) = times.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::domain(format!(
                "grid times must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(SegmentationGrid {
            times,
            built_at_step,
            lambda_used,
        })
    }

    #[cfg(test)]
    pub(crate) fn single_point_for_tests(t: f64) -> Self {
        SegmentationGrid {
            times: vec![t],
            built_at_step: 0,
            lambda_used: 0.0,
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of segments `N`.
    pub fn segments(&self) -> usize {
        self.times.len() - 1
    }

    pub fn widths(&self) -> Vec<f64> {
        self.times.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn midpoints(&self) -> Vec<f64> {
        self.times.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn t_min(&self) -> f64 {
        self.times[0]
    }

    pub fn t_max(&self) -> f64 {
        self.times[self.times.len() - 1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub lambda: f64,
    pub dt_min_frac: f64,
    pub dt_max_frac: f64,
    pub batch_size: usize,
    pub n_max: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            lambda: 0.01,
            dt_min_frac: 1.0 / 256.0,
            dt_max_frac: 0.25,
            batch_size: 256,
            n_max: 512,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.dt_min_frac > 0.0 && self.dt_min_frac <= self.dt_max_frac && self.dt_max_frac <= 1.0) {
            return Err(Error::config(format!(
                "need 0 < dt_min_frac ({}) <= dt_max_frac ({}) <= 1",
                self.dt_min_frac, self.dt_max_frac
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("grid_batch must be >= 1"));
        }
        if self.n_max == 0 {
            return Err(Error::config("n_max must be >= 1"));
        }
        Ok(())
    }

    pub fn with_lambda(self, lambda: f64) -> Self {
        SolverConfig { lambda, ..self }
    }
}

/// Which clamp, if any, decided the returned step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClampEvent {
    None,
    /// Unclamped step below the floor.
    Floor,
    /// Unclamped step negative; replaced by the floor.
    Negative,
    /// Unclamped step above the ceiling.
    Ceiling,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepEstimate {
    pub unclamped: f64,
    pub clamped: f64,
    pub clamp: ClampEvent,
    pub mean_vr: f64,
    pub mean_vv: f64,
}

/// `λ/(1+λ)`.
pub fn lambda_prefactor(lambda: f64) -> f64 {
    lambda / (1.0 + lambda)
}

/// Unclamped Gauss-Newton step from per-sample tangents `v` and residuals
/// `r = f(x_t) − x0`. Returns `(step, mean vᵀr, mean vᵀv)`.
pub fn gauss_newton_step(lambda: f64, v: &Tensor, r: &Tensor, t: f64) -> Result<(f64, f64, f64)> {
    let n = v.rows() as f64;
    let mean_vr = v.row_dots(r)?.iter().sum::<f64>() / n;
    let mean_vv = v.row_dots(v)?.iter().sum::<f64>() / n;
    if mean_vv == 0.0 || !mean_vv.is_finite() {
        return Err(Error::DegenerateModel { t });
    }
    Ok((lambda_prefactor(lambda) * (mean_vr / mean_vv), mean_vr, mean_vv))
}

/// Clamped closed-form step at time `t` for one mini-batch.
///
/// The step is clamped to `[dt_min_frac·(T−ε), min(dt_max_frac·(T−ε), t−ε)]`;
/// a negative step is replaced by the floor.
pub fn delta_t_star(
    model: &ConsistencyModel,
    x0: &Tensor,
    z: &Tensor,
    t: f64,
    cfg: &SolverConfig,
) -> Result<StepEstimate> {
    let s = &model.schedule;
    s.check_time(t)?;
    if t <= s.t_min {
        return Err(Error::domain(format!("step needs t > ε, got t = {t}")));
    }
    if x0.rows() == 0 {
        return Err(Error::shape("empty batch"));
    }
    let te = model.tangent(x0, z, &vec![t; x0.rows()])?;
    let r = te.output.zip_map(x0, |f, x| f - x)?;
    let (unclamped, mean_vr, mean_vv) = gauss_newton_step(cfg.lambda, &te.tangent, &r, t)?;

    let floor = cfg.dt_min_frac * s.span();
    let ceiling = (cfg.dt_max_frac * s.span()).min(t - s.t_min);
    let (clamped, clamp) = if unclamped < 0.0 {
        (floor.min(ceiling), ClampEvent::Negative)
    } else if unclamped < floor {
        (floor.min(ceiling), ClampEvent::Floor)
    } else if unclamped > ceiling {
        (ceiling, ClampEvent::Ceiling)
    } else {
        (unclamped, ClampEvent::None)
    };
    Ok(StepEstimate {
        unclamped,
        clamped,
        clamp,
        mean_vr,
        mean_vv,
    })
}

/// Brute-force minimizer of the relaxed objective on a uniform mesh.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleStep {
    pub dt: f64,
    pub objective: f64,
    /// Mesh spacing `(t − ε)/(mesh_size − 1)`.
    pub cell: f64,
}

/// Minimizes `E‖f(x_t) − f(x_{t−Δt})‖² + λ·E‖f(x_{t−Δt}) − x0‖²` over a
/// uniform mesh on `[0, t − ε]`, evaluating the exact model at every node.
pub fn oracle_delta_t(
    model: &ConsistencyModel,
    x0: &Tensor,
    z: &Tensor,
    t: f64,
    lambda: f64,
    mesh_size: usize,
) -> Result<OracleStep> {
    if mesh_size < 2 {
        return Err(Error::config("oracle mesh needs at least two points"));
    }
    let s = &model.schedule;
    s.check_time(t)?;
    let n = x0.rows() as f64;
    let f_t = model.apply_at(&s.perturb_at(x0, z, t)?, t)?;
    let reach = t - s.t_min;
    let cell = reach / (mesh_size - 1) as f64;
    let mut best = OracleStep {
        dt: 0.0,
        objective: f64::INFINITY,
        cell,
    };
    for j in 0..mesh_size {
        let dt = if j + 1 == mesh_size { reach } else { j as f64 * cell };
        let lower = if j + 1 == mesh_size {
            s.t_min
        } else {
            (t - dt).max(s.t_min)
        };
        let f_s = model.apply_at(&s.perturb_at(x0, z, lower)?, lower)?;
        let local: f64 = f_t.data().iter().zip(f_s.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let global: f64 = f_s.data().iter().zip(x0.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let objective = (local + lambda * global) / n;
        if objective < best.objective {
            best.dt = dt;
            best.objective = objective;
        }
    }
    Ok(best)
}

/// Clamp counters from one grid build.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GridStats {
    pub steps: usize,
    pub floor: usize,
    pub negative: usize,
    pub ceiling: usize,
}

impl GridStats {
    fn record(&mut self, clamp: ClampEvent) {
        self.steps += 1;
        match clamp {
            ClampEvent::None => {}
            ClampEvent::Floor => self.floor += 1,
            ClampEvent::Negative => self.negative += 1,
            ClampEvent::Ceiling => self.ceiling += 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridBuild {
    pub grid: SegmentationGrid,
    pub stats: GridStats,
}

/// Simulates the step recursion from `T` to `ε`, drawing one fresh
/// mini-batch `(x0, z)` per step.
pub fn build_grid<S, R>(
    model: &ConsistencyModel,
    cfg: &SolverConfig,
    source: &S,
    rng: &mut R,
    step: u64,
) -> Result<GridBuild>
where
    S: DataSource + ?Sized,
    R: Rng,
{
    cfg.validate()?;
    if source.dim() != model.data_dim() {
        return Err(Error::shape("data source width does not match model"));
    }
    let s = &model.schedule;
    let tol = 1e-9 * s.span();
    let mut stats = GridStats::default();
    let mut descending = Vec::new();
    let mut t = s.t_max;
    loop {
        descending.push(t);
        if descending.len() > cfg.n_max {
            return Err(Error::config(format!(
                "grid exceeded n_max = {} segments; check dt_min_frac",
                cfg.n_max
            )));
        }
        let x0 = source.sample(cfg.batch_size, rng);
        let z = Tensor::standard_normal(&[cfg.batch_size, model.data_dim()], rng);
        let est = delta_t_star(model, &x0, &z, t, cfg)?;
        stats.record(est.clamp);
        if est.clamped >= t - s.t_min - tol {
            break;
        }
        t -= est.clamped;
    }
    descending.push(s.t_min);
    descending.reverse();
    Ok(GridBuild {
        grid: SegmentationGrid::new(descending, step, cfg.lambda)?,
        stats,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BaselineScheduleKind {
    Uniform,
    /// `t_i = (ε^{1/ρ} + (i/N)(T^{1/ρ} − ε^{1/ρ}))^ρ`.
    Exponential {
        rho: f64,
    },
    /// Uniform grid at the finest resolution, standing in for `Δt → 0`.
    ContinuousLimit,
}

impl fmt::Display for BaselineScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BaselineScheduleKind::Uniform => f.write_str("uniform"),
            BaselineScheduleKind::Exponential { rho } => write!(f, "exp(rho={rho})"),
            BaselineScheduleKind::ContinuousLimit => f.write_str("continuous"),
        }
    }
}

/// Fixed baseline grid with `n` segments. For
/// [`BaselineScheduleKind::ContinuousLimit`] the caller passes `n_max` as `n`.
pub fn baseline_grid(kind: BaselineScheduleKind, n: usize, schedule: &NoiseSchedule) -> Result<SegmentationGrid> {
    if n == 0 {
        return Err(Error::config("baseline grid needs n >= 1"));
    }
    let (lo, hi) = (schedule.t_min, schedule.t_max);
    let frac = |i: usize| i as f64 / n as f64;
    let mut times: Vec<f64> = match kind {
        BaselineScheduleKind::Uniform | BaselineScheduleKind::ContinuousLimit => {
            (0..=n).map(|i| lo + frac(i) * (hi - lo)).collect()
        }
        BaselineScheduleKind::Exponential { rho } => {
            if !(rho > 0.0 && rho.is_finite()) {
                return Err(Error::config(format!("exp_rho must be positive, got {rho}")));
            }
            let (a, b) = (lo.powf(1.0 / rho), hi.powf(1.0 / rho));
            (0..=n).map(|i| (a + frac(i) * (b - a)).powf(rho)).collect()
        }
    };
    times[0] = lo;
    times[n] = hi;
    SegmentationGrid::new(times, 0, f64::NAN)
}
