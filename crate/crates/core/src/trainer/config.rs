//! `key = value` configuration.
//!
//! Every key has a default, so a resolved configuration is always complete.
//! Keys may be written with a section prefix (`solver.lambda`,
//! `metric.c`); the prefix is dropped, or joined with `_` when the bare
//! name is not a key.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::consistency::{DistanceMetric, MetricKind, WeightingConfig, WeightingMode};
use crate::discretizer::{BaselineScheduleKind, SolverConfig};
use crate::error::{Error, Result};
use crate::evalgen::{default_t_mid, DatasetKind, DatasetName};
use crate::numerics::Activation;
use crate::schedule::{NoiseSchedule, PrecondKind, Preconditioner, ScheduleKind, TimeSampler};

pub struct ConfigKey {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> ConfigKey {
    ConfigKey { name, default, help }
}

pub const SECTIONS: &[&str] = &[
    "train", "model", "schedule", "metric", "solver", "data", "eval", "oracle",
];

/// All recognised keys. An empty default means "derived" (see help text).
pub const CONFIG_KEYS: &[ConfigKey] = &[
    key("total_steps", "20000", "parameter updates in the run"),
    key("grid_update_every", "1000", "updates between grid rebuilds (m)"),
    key("batch_size", "256", "training mini-batch size"),
    key("learning_rate", "3e-4", "Adam step size"),
    key("adam_beta1", "0.9", "Adam first-moment decay"),
    key("adam_beta2", "0.999", "Adam second-moment decay"),
    key("adam_eps", "1e-8", "Adam denominator offset"),
    key("ema_decay", "0.999", "EMA decay of evaluation weights"),
    key("lambda_start", "0.64", "multiplier at step 0"),
    key("lambda_end", "0.01", "multiplier after warm-up"),
    key("lambda_warmup_steps", "10000", "log-linear warm-up length"),
    key("seed", "0", "master seed"),
    key("checkpoint_every", "0", "steps between checkpoints (0 = final only)"),
    key("log_every", "100", "steps between log lines"),
    key(
        "threads",
        "1",
        "worker threads (1 = deterministic); ADCM_THREADS overrides",
    ),
    key("resume", "", "checkpoint to resume training from"),
    key("hidden_width", "128", "hidden layer width"),
    key("hidden_layers", "3", "number of hidden layers"),
    key("activation", "tanh", "hidden activation: tanh|silu|identity"),
    key("schedule", "ve", "noise schedule: ve|fm"),
    key("precond", "edm", "preconditioning: edm|rf|identity"),
    key("sigma_data", "0.5", "data standard deviation"),
    key("t_min", "", "smallest time ε (default: 0.002 for ve, 1e-3 for fm)"),
    key("t_max", "", "largest time T (default: 80 for ve, 1-1e-3 for fm)"),
    key("time_sampler", "lognormal", "training time sampler: lognormal|uniform"),
    key("p_mean", "-1.1", "mean of log SNR for the lognormal sampler"),
    key("p_std", "2.0", "std of log SNR for the lognormal sampler"),
    key("metric", "pseudo_huber", "distance: pseudo_huber|l2|squared_l2"),
    key("metric_c", "0.03", "pseudo-Huber constant c"),
    key(
        "weighting",
        "adaptive",
        "loss weighting: adaptive|constant|inv_gap|inv_time",
    ),
    key("weight_floor", "1e-8", "floor of the adaptive-weight denominator"),
    key("lambda", "", "fixed multiplier; overrides lambda_start and lambda_end"),
    key("dt_min_frac", "0.00390625", "smallest step as a fraction of T-ε"),
    key("dt_max_frac", "0.25", "largest step as a fraction of T-ε"),
    key("grid_batch", "256", "mini-batch size per grid step"),
    key("n_max", "512", "maximum number of grid segments"),
    key(
        "baseline",
        "none",
        "fixed grid instead of adaptive: none|uniform|exp|continuous",
    ),
    key("baseline_n", "16", "segments of the baseline grid"),
    key("exp_rho", "7", "exponent of the exp baseline"),
    key("dataset", "gauss_mixture", "toy data: gauss_mixture|ring|checkerboard"),
    key("dataset_k", "8", "mixture components (on a circle)"),
    key(
        "dataset_radius",
        "2.0",
        "mixture circle or ring radius, before normalization",
    ),
    key(
        "dataset_scale",
        "0.1",
        "component or ring-width scale, before normalization",
    ),
    key("dataset_cells", "4", "checkerboard cells per side"),
    key("checkpoint", "", "checkpoint read by schedule, sample, eval and oracle"),
    key("n_samples", "1024", "generated samples"),
    key("steps", "1", "generation steps: 1|2"),
    key(
        "t_mid",
        "",
        "two-step intermediate time (default: 0.42 for ve, 0.42/1.42 for fm)",
    ),
    key("projections", "256", "directions for sliced W2"),
    key("eval_batch", "1024", "batch for the chain-bound check"),
    key("t", "40.0", "time probed by the oracle verb"),
    key("mesh", "10000", "oracle mesh size"),
];

fn lookup(name: &str) -> Option<&'static ConfigKey> {
    CONFIG_KEYS.iter().find(|k| k.name == name)
}

/// Resolves a possibly section-prefixed key to its canonical name.
pub fn canonical_key(raw: &str) -> Result<&'static str> {
    let raw = raw.trim();
    if let Some(k) = lookup(raw) {
        return Ok(k.name);
    }
    if let Some((section, rest)) = raw.split_once('.') {
        if SECTIONS.contains(&section) {
            if let Some(k) = lookup(rest).or_else(|| lookup(&format!("{section}_{rest}"))) {
                return Ok(k.name);
            }
        }
    }
    Err(Error::config(format!("unknown config key '{raw}'")))
}

/// Fully resolved string-valued configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RawConfig {
    fn default() -> Self {
        RawConfig {
            values: CONFIG_KEYS.iter().map(|k| (k.name, k.default.to_string())).collect(),
        }
    }
}

impl RawConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let name = canonical_key(key)?;
        self.values.insert(name, value.trim().to_string());
        Ok(())
    }

    /// Builder form of [`RawConfig::set`].
    pub fn with(mut self, key: &str, value: impl fmt::Display) -> Result<Self> {
        self.set(key, &value.to_string())?;
        Ok(self)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override '{assignment}' is not key=value")))?;
        self.set(k, v)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", no + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn get(&self, key: &str) -> &str {
        let name = canonical_key(key).expect("key from the key table");
        &self.values[name]
    }

    pub fn entries(&self) -> impl Iterator<Item = (&'static str, &str)> {
        self.values.iter().map(|(k, v)| (*k, v.as_str()))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let v = self.get(key);
        v.parse().map_err(|e| Error::config(format!("{key} = '{v}': {e}")))
    }

    pub fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        if self.get(key).is_empty() {
            Ok(None)
        } else {
            self.parse(key).map(Some)
        }
    }

    pub fn to_text(&self) -> String {
        self.entries().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Typed view of a [`RawConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub grid_update_every: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub lambda_warmup_steps: u64,
    /// When set, replaces the warm-up schedule.
    pub lambda_fixed: Option<f64>,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub threads: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
    pub schedule: NoiseSchedule,
    pub precond: Preconditioner,
    pub time_sampler: TimeSampler,
    pub metric: DistanceMetric,
    pub weighting: WeightingConfig,
    pub solver: SolverConfig,
    pub baseline: Option<BaselineScheduleKind>,
    pub baseline_n: usize,
    pub dataset: DatasetKind,
    pub sigma_data: f64,
    pub eval: EvalConfig,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub steps: usize,
    pub t_mid: f64,
    pub projections: usize,
    pub eval_batch: usize,
    pub oracle_t: f64,
    pub oracle_mesh: usize,
}

impl TrainConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let kind: ScheduleKind = raw.parse("schedule")?;
        let (d_min, d_max) = kind.default_range();
        let schedule = NoiseSchedule::new(
            kind,
            raw.parse_opt("t_min")?.unwrap_or(d_min),
            raw.parse_opt("t_max")?.unwrap_or(d_max),
        )
        .map_err(|e| Error::config(e.to_string()))?;
        let sigma_data: f64 = raw.parse("sigma_data")?;
        let precond_kind: PrecondKind = raw.parse("precond")?;
        let precond = Preconditioner::new(precond_kind, sigma_data).map_err(|e| Error::config(e.to_string()))?;
        let time_sampler = match raw.get("time_sampler") {
            "lognormal" => TimeSampler::LogNormal {
                p_mean: raw.parse("p_mean")?,
                p_std: raw.parse("p_std")?,
            },
            "uniform" => TimeSampler::UniformGrid,
            other => return Err(Error::config(format!("unknown time_sampler '{other}'"))),
        };
        let metric_kind: MetricKind = raw.parse("metric")?;
        let metric =
            DistanceMetric::new(metric_kind, raw.parse("metric_c")?).map_err(|e| Error::config(e.to_string()))?;
        let weighting_mode: WeightingMode = raw.parse("weighting")?;
        let weighting = WeightingConfig::new(weighting_mode, raw.parse("weight_floor")?)
            .map_err(|e| Error::config(e.to_string()))?;
        let lambda_fixed: Option<f64> = raw.parse_opt("lambda")?;
        let solver = SolverConfig {
            lambda: lambda_fixed.unwrap_or(raw.parse("lambda_end")?),
            dt_min_frac: raw.parse("dt_min_frac")?,
            dt_max_frac: raw.parse("dt_max_frac")?,
            batch_size: raw.parse("grid_batch")?,
            n_max: raw.parse("n_max")?,
        };
        solver.validate()?;
        let baseline = match raw.get("baseline") {
            "none" => None,
            "uniform" => Some(BaselineScheduleKind::Uniform),
            "exp" => Some(BaselineScheduleKind::Exponential {
                rho: raw.parse("exp_rho")?,
            }),
            "continuous" => Some(BaselineScheduleKind::ContinuousLimit),
            other => return Err(Error::config(format!("unknown baseline '{other}'"))),
        };
        let dataset = match raw.parse::<DatasetName>("dataset")? {
            DatasetName::GaussMixture => DatasetKind::gauss_mixture_circle(
                raw.parse("dataset_k")?,
                raw.parse("dataset_radius")?,
                raw.parse("dataset_scale")?,
            ),
            DatasetName::Ring => DatasetKind::Ring {
                radius: raw.parse("dataset_radius")?,
                scale: raw.parse("dataset_scale")?,
            },
            DatasetName::Checkerboard => DatasetKind::Checkerboard {
                cells: raw.parse("dataset_cells")?,
            },
        };
        let threads = match std::env::var("ADCM_THREADS") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|e| Error::config(format!("ADCM_THREADS = '{v}': {e}")))?,
            Err(_) => raw.parse("threads")?,
        };
        let eval = EvalConfig {
            n_samples: raw.parse("n_samples")?,
            steps: raw.parse("steps")?,
            t_mid: raw.parse_opt("t_mid")?.unwrap_or_else(|| default_t_mid(kind)),
            projections: raw.parse("projections")?,
            eval_batch: raw.parse("eval_batch")?,
            oracle_t: raw.parse("t")?,
            oracle_mesh: raw.parse("mesh")?,
        };
        let cfg = TrainConfig {
            total_steps: raw.parse("total_steps")?,
            grid_update_every: raw.parse("grid_update_every")?,
            batch_size: raw.parse("batch_size")?,
            learning_rate: raw.parse("learning_rate")?,
            adam_beta1: raw.parse("adam_beta1")?,
            adam_beta2: raw.parse("adam_beta2")?,
            adam_eps: raw.parse("adam_eps")?,
            ema_decay: raw.parse("ema_decay")?,
            lambda_start: raw.parse("lambda_start")?,
            lambda_end: raw.parse("lambda_end")?,
            lambda_warmup_steps: raw.parse("lambda_warmup_steps")?,
            lambda_fixed,
            seed: raw.parse("seed")?,
            checkpoint_every: raw.parse("checkpoint_every")?,
            log_every: raw.parse("log_every")?,
            threads,
            hidden_width: raw.parse("hidden_width")?,
            hidden_layers: raw.parse("hidden_layers")?,
            activation: raw.parse("activation")?,
            schedule,
            precond,
            time_sampler,
            metric,
            weighting,
            solver,
            baseline,
            baseline_n: raw.parse("baseline_n")?,
            dataset,
            sigma_data,
            eval,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.grid_update_every >= 1 && self.total_steps >= self.grid_update_every) {
            return Err(Error::config(format!(
                "need total_steps ({}) >= grid_update_every ({}) >= 1",
                self.total_steps, self.grid_update_every
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::config(format!("ema_decay {} outside [0, 1]", self.ema_decay)));
        }
        if !(self.lambda_start >= self.lambda_end && self.lambda_end >= 0.0) {
            return Err(Error::config(format!(
                "need lambda_start ({}) >= lambda_end ({}) >= 0",
                self.lambda_start, self.lambda_end
            )));
        }
        if self.lambda_fixed.is_some_and(|l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::config("lambda must be finite and >= 0"));
        }
        if self.batch_size == 0 || self.hidden_width == 0 {
            return Err(Error::config("batch_size and hidden_width must be >= 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be finite and >= 0"));
        }
        if self.threads == 0 {
            return Err(Error::config("threads must be >= 1"));
        }
        if !(self.eval.steps == 1 || self.eval.steps == 2) {
            return Err(Error::config("steps must be 1 or 2"));
        }
        Ok(())
    }

    /// Layer widths: data + time channel, hidden layers, data.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![3];
        w.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        w.push(2);
        w
    }
}

/// Multiplier used for the grid built at `step`.
///
/// Log-linear from `lambda_start` to `lambda_end` over the warm-up, then
/// constant. Falls back to linear interpolation when an endpoint is zero.
pub fn lambda_at(cfg: &TrainConfig, step: u64) -> f64 {
    if let Some(l) = cfg.lambda_fixed {
        return l;
    }
    let (a, b) = (cfg.lambda_start, cfg.lambda_end);
    if step >= cfg.lambda_warmup_steps || a == b {
        return b;
    }
    let f = step as f64 / cfg.lambda_warmup_steps as f64;
    if a > 0.0 && b > 0.0 {
        (a.ln() + f * (b.ln() - a.ln())).exp()
    } else {
        a + f * (b - a)
    }
}

/// `--help` text listing every key and its default.
pub fn keys_help() -> String {
    let width = CONFIG_KEYS.iter().map(|k| k.name.len()).max().unwrap_or(0);
    CONFIG_KEYS
        .iter()
        .map(|k| {
            let default = if k.default.is_empty() { "(derived)" } else { k.default };
            format!("  {:<width$}  {:<14} {}\n", k.name, default, k.help)
        })
        .collect()
}
