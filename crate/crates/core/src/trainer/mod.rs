//! Alternating grid rebuilds and parameter updates.
//!
//! Every `m` steps the grid is rebuilt from the current parameters with the
//! multiplier `lambda_at(step)`; between rebuilds it is frozen and every
//! training pair is drawn from it.

pub mod checkpoint;
pub mod config;
pub mod manifest;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::{lambda_at, EvalConfig, RawConfig, TrainConfig};
pub use manifest::RunManifest;

use crate::consistency::{adcm_loss, ConsistencyModel};
use crate::discretizer::{baseline_grid, build_grid, BaselineScheduleKind, SegmentationGrid};
use crate::error::{Error, Result};
use crate::evalgen::{DataSource, ToyDataset};
use crate::numerics::{Adam, EmaState, MlpParams, Tensor};

/// Consecutive non-finite steps tolerated before the run halts.
pub const MAX_CONSECUTIVE_ABORTS: u32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub lambda: f64,
    pub grid_id: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    pub step: u64,
    pub segments: usize,
    pub lambda: f64,
    pub clamp_floor: usize,
    pub clamp_negative: usize,
    pub clamp_ceiling: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    Updated {
        loss: f64,
    },
    /// Non-finite loss or gradient; parameters were left untouched.
    Aborted {
        reason: String,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainEvent {
    GridBuilt(GridRecord),
    Step {
        step: u64,
        outcome: StepOutcome,
        lambda: f64,
        segments: usize,
    },
}

pub struct Trainer {
    cfg: TrainConfig,
    dataset: ToyDataset,
    model: ConsistencyModel,
    adam: Adam,
    ema: EmaState,
    grid: Option<SegmentationGrid>,
    grid_count: u64,
    step: u64,
    rng: ChaCha8Rng,
    consecutive_aborts: u32,
    pub history: Vec<LossRecord>,
    pub grids: Vec<GridRecord>,
}

impl Trainer {
    /// Fresh run. Weights are drawn from stream 1 of the seed; data, noise,
    /// time pairs and grid batches all come from stream 0.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let dataset = ToyDataset::new(cfg.dataset.clone(), cfg.sigma_data)?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        init_rng.set_stream(1);
        let params = MlpParams::init(&cfg.widths(), cfg.activation, &mut init_rng)?;
        let model = ConsistencyModel::new(params, cfg.precond, cfg.schedule)?;
        let adam = Adam::new(
            &model.params,
            cfg.learning_rate,
            cfg.adam_beta1,
            cfg.adam_beta2,
            cfg.adam_eps,
        );
        let ema = EmaState::new(&model.params, cfg.ema_decay)?;
        Ok(Trainer {
            dataset,
            model,
            adam,
            ema,
            grid: None,
            grid_count: 0,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            consecutive_aborts: 0,
            history: Vec::new(),
            grids: Vec::new(),
            cfg,
        })
    }

    /// Continues a run from saved state. The checkpoint's schedule,
    /// preconditioner and layer table must match `cfg`.
    pub fn from_checkpoint(cfg: TrainConfig, ck: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if ck.schedule != cfg.schedule || ck.precond != cfg.precond {
            return Err(Error::config(
                "checkpoint schedule or preconditioner differs from the config",
            ));
        }
        let expected = MlpParams::init(&cfg.widths(), cfg.activation, &mut ChaCha8Rng::seed_from_u64(0))?;
        if !expected.same_layout(&ck.params) || expected.dims() != ck.params.dims() {
            return Err(Error::config("checkpoint network layout differs from the config"));
        }
        let dataset = ToyDataset::new(cfg.dataset.clone(), cfg.sigma_data)?;
        let model = ConsistencyModel::new(ck.params, ck.precond, ck.schedule)?;
        Ok(Trainer {
            dataset,
            model,
            adam: ck.adam,
            ema: ck.ema,
            grid: ck.grid,
            grid_count: ck.grid_count,
            step: ck.step,
            rng: ck.rng,
            consecutive_aborts: 0,
            history: Vec::new(),
            grids: Vec::new(),
            cfg,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            schedule: self.model.schedule,
            precond: self.model.precond,
            params: self.model.params.clone(),
            adam: self.adam.clone(),
            ema: self.ema.clone(),
            grid: self.grid.clone(),
            grid_count: self.grid_count,
            step: self.step,
            rng: self.rng.clone(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn dataset(&self) -> &ToyDataset {
        &self.dataset
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn grid(&self) -> Option<&SegmentationGrid> {
        self.grid.as_ref()
    }

    pub fn grid_count(&self) -> u64 {
        self.grid_count
    }

    pub fn model(&self) -> &ConsistencyModel {
        &self.model
    }

    pub fn ema_model(&self) -> ConsistencyModel {
        ConsistencyModel {
            params: self.ema.shadow.clone(),
            ..self.model.clone()
        }
    }

    fn baseline_segments(&self, kind: BaselineScheduleKind) -> usize {
        match kind {
            BaselineScheduleKind::ContinuousLimit => self.cfg.solver.n_max,
            _ => self.cfg.baseline_n,
        }
    }

    /// Builds a grid if none exists or a rebuild is due at the current step.
    /// Baseline runs build their fixed grid once.
    pub fn ensure_grid(&mut self) -> Result<Option<GridRecord>> {
        let lambda = lambda_at(&self.cfg, self.step);
        let (grid, stats) = if let Some(kind) = self.cfg.baseline {
            if self.grid.is_some() {
                return Ok(None);
            }
            let g = baseline_grid(kind, self.baseline_segments(kind), &self.cfg.schedule)?;
            (
                SegmentationGrid::new(g.times().to_vec(), self.step, lambda)?,
                Default::default(),
            )
        } else {
            let due = self.step.is_multiple_of(self.cfg.grid_update_every)
                && self.grid.as_ref().is_none_or(|g| g.built_at_step != self.step);
            if self.grid.is_some() && !due {
                return Ok(None);
            }
            let solver = self.cfg.solver.with_lambda(lambda);
            let built = build_grid(&self.model, &solver, &self.dataset, &mut self.rng, self.step)?;
            (built.grid, built.stats)
        };
        let rec = GridRecord {
            step: self.step,
            segments: grid.segments(),
            lambda,
            clamp_floor: stats.floor,
            clamp_negative: stats.negative,
            clamp_ceiling: stats.ceiling,
        };
        self.grid = Some(grid);
        self.grid_count += 1;
        self.grids.push(rec);
        Ok(Some(rec))
    }

    /// One update on the current grid. A non-finite loss or gradient leaves
    /// the parameters unchanged and counts as an abort; the step counter
    /// still advances.
    pub fn train_step(&mut self) -> Result<StepOutcome> {
        let grid = self
            .grid
            .as_ref()
            .ok_or_else(|| Error::domain("train_step called before a grid was built"))?;
        let n = self.cfg.batch_size;
        let x0 = self.dataset.sample(n, &mut self.rng);
        let z = Tensor::standard_normal(&[n, self.dataset.dim()], &mut self.rng);
        let mut upper = Vec::with_capacity(n);
        let mut lower = Vec::with_capacity(n);
        for _ in 0..n {
            let pair = self
                .cfg
                .time_sampler
                .sample_pair(grid, &self.cfg.schedule, &mut self.rng)?;
            upper.push(pair.upper);
            lower.push(pair.lower);
        }
        let lambda = lambda_at(&self.cfg, self.step);
        let result = adcm_loss(
            &self.model,
            &self.model,
            &self.cfg.metric,
            &self.cfg.weighting,
            &x0,
            &z,
            &upper,
            &lower,
        );
        let outcome = match result {
            Ok(eval) if eval.loss.is_finite() => match self.adam.step(&mut self.model.params, &eval.grads) {
                Ok(()) => {
                    self.ema.update(&self.model.params)?;
                    StepOutcome::Updated { loss: eval.loss }
                }
                Err(Error::NonFinite(msg)) => StepOutcome::Aborted { reason: msg },
                Err(e) => return Err(e),
            },
            Ok(eval) => StepOutcome::Aborted {
                reason: format!("loss is {}", eval.loss),
            },
            Err(Error::NonFinite(msg)) => StepOutcome::Aborted { reason: msg },
            Err(e) => return Err(e),
        };
        match &outcome {
            StepOutcome::Updated { loss } => {
                self.consecutive_aborts = 0;
                self.history.push(LossRecord {
                    step: self.step,
                    loss: *loss,
                    lambda,
                    grid_id: self.grid_count.saturating_sub(1),
                });
            }
            StepOutcome::Aborted { .. } => {
                self.consecutive_aborts += 1;
            }
        }
        self.step += 1;
        if self.consecutive_aborts >= MAX_CONSECUTIVE_ABORTS {
            return Err(Error::TrainingHalted {
                step: self.step,
                aborts: self.consecutive_aborts,
            });
        }
        Ok(outcome)
    }

    /// Trains until `min(target, total_steps)` steps have been taken.
    pub fn run_until(&mut self, target: u64, on_event: &mut dyn FnMut(&TrainEvent)) -> Result<()> {
        let target = target.min(self.cfg.total_steps);
        while self.step < target {
            if let Some(rec) = self.ensure_grid()? {
                on_event(&TrainEvent::GridBuilt(rec));
            }
            let step = self.step;
            let lambda = lambda_at(&self.cfg, step);
            let outcome = self.train_step()?;
            let segments = self.grid.as_ref().map_or(0, SegmentationGrid::segments);
            on_event(&TrainEvent::Step {
                step,
                outcome,
                lambda,
                segments,
            });
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.cfg.total_steps, &mut |_| {})
    }
}
