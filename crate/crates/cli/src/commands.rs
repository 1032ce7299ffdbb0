use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use adcm_core::consistency::ConsistencyModel;
use adcm_core::discretizer::{baseline_grid, build_grid, delta_t_star, oracle_delta_t, BaselineScheduleKind};
use adcm_core::evalgen::export::{plots_from_csv, write_loss_csv, write_samples_csv, write_schedule_csv};
use adcm_core::evalgen::{
    chain_bound_check, generate, w2_exact, w2_sliced, DataSource, SampleReport, ToyDataset, W2_EXACT_CAP,
};
use adcm_core::trainer::{
    lambda_at, Checkpoint, RawConfig, RunManifest, StepOutcome, TrainConfig, TrainEvent, Trainer,
};
use adcm_core::{Error, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Common, Verb};

/// Output directory bookkeeping: the manifest is written before any
/// compute, and files created by a failed invocation are removed.
struct RunDir {
    dir: PathBuf,
    manifest_path: PathBuf,
    manifest: RunManifest,
    outputs: Vec<PathBuf>,
}

impl RunDir {
    fn open(dir: &Path, verb: &str, raw: &RawConfig, seed: u64) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let name = if verb == "train" {
            "manifest.json".to_string()
        } else {
            format!("manifest-{verb}.json")
        };
        let run = RunDir {
            dir: dir.to_path_buf(),
            manifest_path: dir.join(name),
            manifest: RunManifest::new(verb, raw, seed),
            outputs: Vec::new(),
        };
        run.manifest.write(&run.manifest_path)?;
        Ok(run)
    }

    fn output(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        if !self.outputs.contains(&p) {
            self.outputs.push(p.clone());
        }
        p
    }

    fn flush(&self) -> Result<()> {
        self.manifest.write(&self.manifest_path)
    }

    fn finish(mut self, result: Result<()>) -> Result<()> {
        match result {
            Ok(()) => {
                self.manifest.finish("ok");
                self.flush()
            }
            Err(e) => {
                for p in &self.outputs {
                    let _ = fs::remove_file(p);
                    let _ = fs::remove_file(p.with_extension("partial"));
                }
                self.manifest.finish(&format!("failed: {e}"));
                let _ = self.flush();
                Err(e)
            }
        }
    }
}

fn resolve_config(common: &Common) -> Result<RawConfig> {
    let mut raw = RawConfig::default();
    if let Some(path) = &common.config {
        raw.apply_file(path)?;
    }
    for o in &common.overrides {
        raw.apply_override(o)?;
    }
    if let Some(seed) = common.seed {
        raw.set("seed", &seed.to_string())?;
    }
    Ok(raw)
}

pub fn run(verb: &Verb) -> Result<()> {
    let common = verb.common();
    let raw = resolve_config(common)?;
    let cfg = TrainConfig::from_raw(&raw)?;
    let mut run = RunDir::open(&common.out, verb.name(), &raw, cfg.seed)?;
    let result = match verb {
        Verb::Train(_) => train(&cfg, &raw, &mut run),
        Verb::Schedule(_) => schedule(&cfg, &raw, &mut run),
        Verb::Sample(_) => sample(&cfg, &raw, &mut run),
        Verb::Eval(_) => eval(&cfg, &raw, &mut run),
        Verb::Oracle(_) => oracle(&cfg, &raw, &mut run),
        Verb::ExportPlot(_) => export_plot(&mut run),
    };
    run.finish(result)
}

fn verb_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The `checkpoint` key, else `<out>/checkpoint.bin` if present, else a
/// freshly initialized model.
fn load_state(cfg: &TrainConfig, raw: &RawConfig, out: &Path) -> Result<Checkpoint> {
    let explicit = raw.get("checkpoint");
    let path = if explicit.is_empty() {
        let p = out.join("checkpoint.bin");
        p.exists().then_some(p)
    } else {
        Some(PathBuf::from(explicit))
    };
    let ck = match path {
        Some(p) => {
            eprintln!("event=load checkpoint={}", p.display());
            Checkpoint::load(&p)?
        }
        None => {
            eprintln!("event=load checkpoint=none init=fresh");
            Trainer::new(cfg.clone())?.checkpoint()
        }
    };
    if ck.schedule != cfg.schedule || ck.precond != cfg.precond {
        return Err(Error::Config(format!(
            "checkpoint uses schedule={} precond={}; set the same in the config",
            ck.schedule.kind, ck.precond.kind
        )));
    }
    Ok(ck)
}

fn model_of(ck: &Checkpoint, ema: bool) -> Result<ConsistencyModel> {
    let params = if ema { ck.ema.shadow.clone() } else { ck.params.clone() };
    ConsistencyModel::new(params, ck.precond, ck.schedule)
}

fn train(cfg: &TrainConfig, raw: &RawConfig, run: &mut RunDir) -> Result<()> {
    let resume = raw.get("resume");
    let mut trainer = if resume.is_empty() {
        Trainer::new(cfg.clone())?
    } else {
        eprintln!("event=resume checkpoint={resume}");
        Trainer::from_checkpoint(cfg.clone(), Checkpoint::load(Path::new(resume))?)?
    };
    let every = if cfg.checkpoint_every == 0 {
        cfg.total_steps
    } else {
        cfg.checkpoint_every
    };
    let log_every = cfg.log_every.max(1);
    let ck_path = run.output("checkpoint.bin");
    while trainer.step() < cfg.total_steps {
        let target = (trainer.step() / every + 1) * every;
        let mut grids = Vec::new();
        trainer.run_until(target, &mut |e| match e {
            TrainEvent::GridBuilt(r) => {
                eprintln!(
                    "event=grid step={} grid_len={} lambda={} clamp_floor={} clamp_negative={} clamp_ceiling={}",
                    r.step, r.segments, r.lambda, r.clamp_floor, r.clamp_negative, r.clamp_ceiling
                );
                grids.push(*r);
            }
            TrainEvent::Step {
                step,
                outcome,
                lambda,
                segments,
            } => match outcome {
                StepOutcome::Updated { loss } if step % log_every == 0 => {
                    eprintln!("event=step step={step} loss={loss} lambda={lambda} grid_len={segments}");
                }
                StepOutcome::Aborted { reason } => {
                    eprintln!("event=abort step={step} reason=\"{reason}\"");
                }
                _ => {}
            },
        })?;
        for g in grids {
            run.manifest.record_grid(g);
        }
        run.flush()?;
        trainer.checkpoint().save(&ck_path)?;
        eprintln!("event=checkpoint step={} path={}", trainer.step(), ck_path.display());
    }
    write_loss_csv(&run.output("loss.csv"), &trainer.history)?;
    write_schedule_csv(&run.output("schedule.csv"), trainer.grid())?;
    Ok(())
}

fn schedule(cfg: &TrainConfig, raw: &RawConfig, run: &mut RunDir) -> Result<()> {
    let ck = load_state(cfg, raw, &run.dir)?;
    let lambda = cfg.lambda_fixed.unwrap_or_else(|| lambda_at(cfg, ck.step));
    let grid = match cfg.baseline {
        Some(kind) => {
            let n = match kind {
                BaselineScheduleKind::ContinuousLimit => cfg.solver.n_max,
                _ => cfg.baseline_n,
            };
            baseline_grid(kind, n, &cfg.schedule)?
        }
        None => {
            let model = model_of(&ck, false)?;
            let dataset = ToyDataset::new(cfg.dataset.clone(), cfg.sigma_data)?;
            let mut rng = verb_rng(cfg.seed, 2);
            let built = build_grid(&model, &cfg.solver.with_lambda(lambda), &dataset, &mut rng, ck.step)?;
            eprintln!(
                "event=grid grid_len={} lambda={lambda} clamp_floor={} clamp_negative={} clamp_ceiling={}",
                built.grid.segments(),
                built.stats.floor,
                built.stats.negative,
                built.stats.ceiling
            );
            built.grid
        }
    };
    write_schedule_csv(&run.output("schedule.csv"), Some(&grid))?;
    println!(
        "grid_len={} t_min={} t_max={} lambda={lambda}",
        grid.segments(),
        grid.t_min(),
        grid.t_max()
    );
    Ok(())
}

fn sample(cfg: &TrainConfig, raw: &RawConfig, run: &mut RunDir) -> Result<()> {
    let ck = load_state(cfg, raw, &run.dir)?;
    let model = model_of(&ck, true)?;
    let mut rng = verb_rng(cfg.seed, 3);
    let g = generate(&model, cfg.eval.n_samples, cfg.eval.steps, cfg.eval.t_mid, &mut rng)?;
    write_samples_csv(&run.output("samples.csv"), Some((&g.samples, g.nfe)))?;
    println!("n_samples={} nfe={}", g.samples.rows(), g.nfe);
    Ok(())
}

fn report(
    model: &ConsistencyModel,
    data: &Tensor,
    cfg: &TrainConfig,
    steps: usize,
    slack: f64,
) -> Result<SampleReport> {
    let mut rng = verb_rng(cfg.seed, 10 + steps as u64);
    let g = generate(model, cfg.eval.n_samples, steps, cfg.eval.t_mid, &mut rng)?;
    let n = g.samples.rows().min(W2_EXACT_CAP);
    let head = |x: &Tensor| Tensor::new(vec![n, x.cols()], x.data()[..n * x.cols()].to_vec());
    Ok(SampleReport {
        n_samples: g.samples.rows(),
        nfe: g.nfe,
        w2_exact: w2_exact(&head(&g.samples)?, &head(data)?)?,
        w2_sliced: w2_sliced(&g.samples, data, cfg.eval.projections, &mut rng)?,
        chain_bound_slack: slack,
        seed: cfg.seed,
    })
}

fn eval(cfg: &TrainConfig, raw: &RawConfig, run: &mut RunDir) -> Result<()> {
    let ck = load_state(cfg, raw, &run.dir)?;
    let model = model_of(&ck, true)?;
    let dataset = ToyDataset::new(cfg.dataset.clone(), cfg.sigma_data)?;
    let mut rng = verb_rng(cfg.seed, 4);
    let data = dataset.sample(cfg.eval.n_samples, &mut rng);

    let grid = match &ck.grid {
        Some(g) => g.clone(),
        None => baseline_grid(BaselineScheduleKind::Uniform, cfg.baseline_n, &cfg.schedule)?,
    };
    let x0 = dataset.sample(cfg.eval.eval_batch, &mut rng);
    let z = Tensor::standard_normal(&[cfg.eval.eval_batch, 2], &mut rng);
    let chain = chain_bound_check(&model, &grid, &x0, &z)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let (one, two) = pool.install(|| {
        rayon::join(
            || report(&model, &data, cfg, 1, chain.slack()),
            || report(&model, &data, cfg, 2, chain.slack()),
        )
    });
    let reports = [one?, two?];

    let path = run.output("eval.csv");
    let mut w = csv::Writer::from_path(&path).map_err(Error::from)?;
    for r in &reports {
        w.serialize(r).map_err(Error::from)?;
    }
    w.flush()?;
    for r in &reports {
        println!(
            "nfe={} n_samples={} w2_exact={} w2_sliced={} seed={}",
            r.nfe, r.n_samples, r.w2_exact, r.w2_sliced, r.seed
        );
    }
    println!(
        "chain_lhs={} chain_rhs={} boundary_residual={} tolerance={} slack={} holds={}",
        chain.lhs,
        chain.rhs,
        chain.boundary_residual,
        chain.tolerance,
        chain.slack(),
        chain.holds
    );
    Ok(())
}

fn oracle(cfg: &TrainConfig, raw: &RawConfig, run: &mut RunDir) -> Result<()> {
    let ck = load_state(cfg, raw, &run.dir)?;
    let model = model_of(&ck, false)?;
    let dataset = ToyDataset::new(cfg.dataset.clone(), cfg.sigma_data)?;
    let mut rng = verb_rng(cfg.seed, 5);
    let n = cfg.solver.batch_size;
    let x0 = dataset.sample(n, &mut rng);
    let z = Tensor::standard_normal(&[n, 2], &mut rng);
    let lambda = cfg.lambda_fixed.unwrap_or_else(|| lambda_at(cfg, ck.step));
    let t = cfg.eval.oracle_t;
    let est = delta_t_star(&model, &x0, &z, t, &cfg.solver.with_lambda(lambda))?;
    let orc = oracle_delta_t(&model, &x0, &z, t, lambda, cfg.eval.oracle_mesh)?;

    let path = run.output("oracle.csv");
    let mut w = csv::Writer::from_path(&path).map_err(Error::from)?;
    w.write_record([
        "t",
        "lambda",
        "gn_unclamped",
        "gn_clamped",
        "oracle",
        "mesh_cell",
        "abs_diff",
    ])
    .map_err(Error::from)?;
    let diff = (est.unclamped.clamp(0.0, t - cfg.schedule.t_min) - orc.dt).abs();
    w.write_record([t, lambda, est.unclamped, est.clamped, orc.dt, orc.cell, diff].map(|v| v.to_string()))
        .map_err(Error::from)?;
    w.flush()?;
    println!(
        "t={t} lambda={lambda} gn_unclamped={} gn_clamped={} oracle={} mesh_cell={} abs_diff={diff}",
        est.unclamped, est.clamped, orc.dt, orc.cell
    );
    Ok(())
}

fn export_plot(run: &mut RunDir) -> Result<()> {
    for name in ["schedule.svg", "loss.svg", "samples.svg"] {
        run.output(name);
    }
    let written = plots_from_csv(&run.dir, &run.dir)?;
    if written.is_empty() {
        return Err(Error::Io(io::Error::new(
            io::ErrorKind::NotFound,
            format!("no schedule.csv, loss.csv or samples.csv in {}", run.dir.display()),
        )));
    }
    for p in written {
        println!("wrote={}", p.display());
    }
    Ok(())
}
