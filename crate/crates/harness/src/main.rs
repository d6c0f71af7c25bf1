//! `dive`: data generation, training, distillation, sampling, evaluation and
//! benchmarks on the toy driving world.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dive_core::backbone::{checkpoint, Denoiser};
use dive_core::conditions::NullMask;
use dive_core::flow::{euler_sample, extend_video, stitch, GuidanceMode, GuidanceSpec, VelocityField};
use dive_core::mad::{BranchParams, DistillStrategy, MadStudent, ScaleSet};
use dive_core::rps::{rps_sample, StageSchedule};
use dive_core::{GridDims, LatentGrid};

use dive_harness::bench::bench;
use dive_harness::config::Config;
use dive_harness::dataset::{dataset_read, dataset_write};
use dive_harness::eval::{evaluate, generate, oracle_targets, scene_seed, Conditioning, SampleJob};
use dive_harness::export::export_frames;
use dive_harness::metrics::{self, MetricsRow};
use dive_harness::train::{build_dataset, distill, held_out_scenes, new_model, train, Corpus};
use dive_harness::world::{render_oracle, BUCKETS};

#[derive(Parser)]
#[command(name = "dive", version, about = "Multi-view driving video diffusion on a toy world")]
struct Cli {
    /// Config file with `[section]` tables of `key = value` pairs.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `[run] seed` and `DIVE_SEED`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Metrics file rows are appended to.
    #[arg(long, global = true, default_value = "metrics.csv")]
    metrics: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the training set into a dataset file.
    GenData {
        #[arg(long, default_value = "data.divk")]
        out: PathBuf,
        /// Overrides `[data] train_scenes`.
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Run the training curriculum.
    Train {
        /// Dataset file; rendered on the fly when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "model.ckpt")]
        out: PathBuf,
        /// Overrides `[train] lr`.
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Train MAD branches on a frozen checkpoint.
    Distill {
        #[arg(long, default_value = "model.ckpt")]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "model-mad.ckpt")]
        out: PathBuf,
        /// `mixed`, `single1` or `single2`.
        #[arg(long)]
        strategy: Option<DistillStrategy>,
        #[arg(long)]
        steps: Option<usize>,
        /// Overrides `[distill] lr`.
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Sample one held-out scene and write PPM frames.
    Sample {
        #[arg(long, default_value = "model.ckpt")]
        model: PathBuf,
        #[arg(long, default_value = "frames")]
        out: PathBuf,
        /// Index into the held-out scenes.
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[command(flatten)]
        opts: SampleOpts,
    },
    /// Score samples against oracle renders over the held-out scenes.
    Eval {
        #[arg(long, default_value = "model.ckpt")]
        model: PathBuf,
        #[arg(long)]
        scenes: Option<usize>,
        #[command(flatten)]
        opts: SampleOpts,
    },
    /// Time two-pass CFG, MAD and both with RPS.
    Bench {
        /// Checkpoint carrying MAD branches.
        #[arg(long, default_value = "model-mad.ckpt")]
        model: PathBuf,
        #[arg(long)]
        scenes: Option<usize>,
        /// Steps of the flat samplers.
        #[arg(long)]
        steps: Option<usize>,
        /// RPS stage schedule.
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Finite-difference gradient checks of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

#[derive(Args)]
struct SampleOpts {
    /// `off`, `extended`, `night` or `mad`.
    #[arg(long)]
    guidance: Option<GuidanceMode>,
    /// Guidance scale λ.
    #[arg(long)]
    scale: Option<f64>,
    /// Euler steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Stage schedule such as `8x14:10,12x21:10,16x28:10`.
    #[arg(long)]
    rps: Option<String>,
    /// Extend the clip once, keeping `k` frames of context.
    #[arg(long)]
    extend: Option<usize>,
    /// MAD only: guidance scales `text,instance,sketch`, replacing `--scale`.
    /// Distillation trains equal scales, so unequal ones extrapolate.
    #[arg(long)]
    family_scales: Option<ScaleSet>,
}

impl SampleOpts {
    fn apply(&self, cfg: &mut Config) {
        let s = &mut cfg.sample;
        s.guidance = self.guidance.unwrap_or(s.guidance);
        s.scale = self.scale.unwrap_or(s.scale);
        s.steps = self.steps.unwrap_or(s.steps);
        if self.rps.is_some() {
            s.rps = self.rps.clone();
        }
        if self.extend.is_some() {
            s.extend = self.extend;
        }
        if self.family_scales.is_some() {
            s.family_scales = self.family_scales;
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = Config::from_env()?;
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match &cli.command {
        Command::GenData { out, scenes } => {
            cfg.data.train_scenes = scenes.unwrap_or(cfg.data.train_scenes);
            cfg.validate()?;
            let records = build_dataset(&cfg);
            dataset_write(out, &records)?;
            println!("wrote {} scenes to {}", records.len(), out.display());
        }
        Command::Train { data, out, lr } => {
            cfg.train.lr = lr.unwrap_or(cfg.train.lr);
            cfg.validate()?;
            let corpus = corpus(&cfg, data.as_deref())?;
            let mut model = new_model(&cfg.model, cfg.seed)?;
            let start = Instant::now();
            let mut window = Vec::new();
            train(&mut model, &corpus, &cfg.train, cfg.data.frames, cfg.seed, &mut |l| {
                window.push(l.loss);
                if window.len() == 100 {
                    println!("{} step {} loss {:.5} ({:.0}s)", l.phase, l.step + 1, window.iter().sum::<f64>() / 100.0, l.seconds);
                    window.clear();
                }
            })?;
            checkpoint::save(out, &model, None)?;
            let mut row = MetricsRow::new("train", &cfg.hash(), "", cfg.seed);
            row.scenes = corpus.len();
            row.wall_clock_s = start.elapsed().as_secs_f64();
            metrics::append(&cli.metrics, &[row])?;
            println!("saved {}", out.display());
        }
        Command::Distill { model, data, out, strategy, steps, lr } => {
            let d = &mut cfg.distill;
            d.strategy = strategy.unwrap_or(d.strategy);
            d.steps = steps.unwrap_or(d.steps);
            d.lr = lr.unwrap_or(d.lr);
            cfg.validate()?;
            let (base, _) = load(model)?;
            let corpus = corpus(&cfg, data.as_deref())?;
            let start = Instant::now();
            let mut window = Vec::new();
            let (branches, outcome) = distill(&base, &corpus, &cfg.distill, cfg.seed, &mut |step, loss| {
                window.push(loss);
                if window.len() == 100 {
                    println!("step {} loss {:.5}", step + 1, window.iter().sum::<f64>() / 100.0);
                    window.clear();
                }
            })?;
            checkpoint::save(out, &base, Some(&branches))?;
            let v = &outcome.validation;
            println!(
                "{} validation: student {:.5} baseline {:.5} ratio {:.4}",
                cfg.distill.strategy.name(),
                v.student,
                v.baseline,
                v.ratio
            );
            let mut row = MetricsRow::new(&format!("distill/{}", cfg.distill.strategy.name()), &cfg.hash(), "mad", cfg.seed);
            row.scenes = cfg.distill.validation_scenes;
            row.wall_clock_s = start.elapsed().as_secs_f64();
            row.distill_ratio = Some(v.ratio);
            metrics::append(&cli.metrics, &[row])?;
            println!("saved {}", out.display());
        }
        Command::Sample { model, out, scene, opts } => {
            opts.apply(&mut cfg);
            cfg.validate()?;
            let (base, branches) = load(model)?;
            let scene_spec = held_out_scenes(cfg.seed, scene + 1).pop().expect("scene");
            let cond = base.encoder.conditions(&scene_spec)?;
            let (spec, student) = sampler(&cfg, &base, branches.as_ref())?;
            let field: &dyn VelocityField = match &student {
                Some(s) => s,
                None => &base,
            };
            let dims = dims(&cfg, &base);
            let seed = scene_seed(cfg.seed, *scene);
            let (mut video, nfe) = match &cfg.sample.rps {
                Some(text) => {
                    let (x, ledger) = rps_sample(field, &cond, &spec, &StageSchedule::parse(text)?, dims, seed)?;
                    (x, ledger.nfe())
                }
                None => {
                    let (x, run) = euler_sample(field, &cond, &spec, cfg.sample.steps, dims, seed)?;
                    (x, run.nfe)
                }
            };
            let mse = video.mse(&render_oracle(&scene_spec, dims.frames, dims.height, dims.width))?;
            println!("scene {scene}: {} NFE, oracle MSE {mse:.5}", nfe);
            if let Some(k) = cfg.sample.extend {
                let (window, run) = extend_video(field, &video, k, &cond, &spec, cfg.sample.steps, seed.wrapping_add(1))?;
                video = stitch(&video, &window, k)?;
                println!("extended to {} frames with {} more NFE", video.dims().frames, run.nfe);
            }
            let paths = export_frames(&video, out)?;
            println!("wrote {} frames to {}", paths.len(), out.display());
        }
        Command::Eval { model, scenes, opts } => {
            opts.apply(&mut cfg);
            cfg.data.eval_scenes = scenes.unwrap_or(cfg.data.eval_scenes);
            cfg.validate()?;
            let (base, branches) = load(model)?;
            let (spec, student) = sampler(&cfg, &base, branches.as_ref())?;
            let field: &(dyn VelocityField + Sync) = match &student {
                Some(s) => s,
                None => &base,
            };
            let schedule = cfg.sample.rps.as_deref().map(StageSchedule::parse).transpose()?;
            let dims = dims(&cfg, &base);
            let scenes = held_out_scenes(cfg.seed, cfg.data.eval_scenes);
            let targets = oracle_targets(&scenes, dims);
            let job = SampleJob {
                encoder_model: &base,
                field,
                spec,
                steps: cfg.sample.steps,
                schedule: schedule.as_ref(),
                dims,
                seed: cfg.seed,
            };
            let start = Instant::now();
            let samples = generate(&job, &scenes, Conditioning::Full)?;
            let wall = start.elapsed().as_secs_f64();
            let nfe = samples.first().map_or(0, |s| s.1);
            let grids: Vec<LatentGrid> = samples.into_iter().map(|s| s.0).collect();
            let report = evaluate(&grids, &targets)?;
            println!("{} scenes: oracle MSE {:.5} ± {:.5}", scenes.len(), report.mean, report.std);
            for (name, c) in [
                ("unconditional", Conditioning::Unconditional),
                ("without text", Conditioning::Ablated(NullMask::new(true, false, false))),
                ("without instances", Conditioning::Ablated(NullMask::new(false, true, false))),
                ("without sketch", Conditioning::Ablated(NullMask::new(false, false, true))),
            ] {
                let g: Vec<LatentGrid> = generate(&job, &scenes, c)?.into_iter().map(|s| s.0).collect();
                let m = evaluate(&g, &targets)?.mean;
                println!("  {name:<18} {m:.5} (delta {:+.5})", m - report.mean);
            }
            let mut row = MetricsRow::new("eval", &cfg.hash(), cfg.sample.guidance.name(), cfg.seed);
            row.schedule = schedule.as_ref().map(|s| s.describe()).unwrap_or_default();
            row.scenes = scenes.len();
            row.nfe = nfe;
            row.wall_clock_s = wall;
            row.token_steps = match &schedule {
                Some(s) => s.token_steps(),
                None => StageSchedule::flat(dims.height, dims.width, cfg.sample.steps)?.token_steps(),
            };
            row.sample_mse = Some(report.mean);
            metrics::append(&cli.metrics, &[row])?;
        }
        Command::Bench { model, scenes, steps, schedule, scale } => {
            let b = &mut cfg.bench;
            b.scenes = scenes.unwrap_or(b.scenes);
            b.steps = steps.unwrap_or(b.steps);
            b.scale = scale.unwrap_or(b.scale);
            if let Some(s) = schedule {
                b.schedule = s.clone();
            }
            cfg.validate()?;
            let (base, branches) = load(model)?;
            let Some(branches) = branches else {
                bail!("{} has no MAD branches; run `dive distill` first", model.display());
            };
            let scenes = held_out_scenes(cfg.seed, cfg.bench.scenes);
            let results = bench(&base, &branches, &scenes, &cfg.bench, cfg.data.frames, cfg.seed)?;
            println!("{:<8} {:>4} {:>12} {:>10} {:>8} {:>10}", "config", "NFE", "token-steps", "seconds", "speedup", "MSE");
            for r in &results {
                println!(
                    "{:<8} {:>4} {:>12} {:>10.2} {:>7.2}x {:>10.5}",
                    r.variant.name(),
                    r.nfe,
                    r.token_steps,
                    r.wall_clock_s,
                    r.speedup,
                    r.sample_mse
                );
            }
            let hash = cfg.hash();
            let rows: Vec<MetricsRow> = results.iter().map(|r| r.row(&hash, cfg.seed, scenes.len())).collect();
            metrics::append(&cli.metrics, &rows)?;
        }
        Command::Gradcheck { seeds } => {
            let cases = dive_core::checks::gradient_suite(*seeds)?;
            for c in &cases {
                println!("{:<24} {} seeds  worst rel. err {:.2e}  {}", c.name, c.seeds, c.worst, if c.passed() { "ok" } else { "FAIL" });
            }
            if cases.iter().any(|c| !c.passed()) {
                bail!("gradient check failed");
            }
        }
    }
    Ok(())
}

fn load(path: &Path) -> Result<(Denoiser, Option<BranchParams>)> {
    checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn corpus(cfg: &Config, data: Option<&Path>) -> Result<Corpus> {
    let records = match data {
        Some(path) => dataset_read(path).with_context(|| format!("reading {}", path.display()))?,
        None => build_dataset(cfg),
    };
    Corpus::new(&records, &BUCKETS)
}

fn dims(cfg: &Config, model: &Denoiser) -> GridDims {
    GridDims::new(model.cfg.views, cfg.data.frames, cfg.data.height, cfg.data.width, model.cfg.channels)
}

/// The guidance spec, plus the student when sampling with MAD at
/// `ω = λ − 1` for each family.
fn sampler<'a>(cfg: &Config, model: &'a Denoiser, branches: Option<&'a BranchParams>) -> Result<(GuidanceSpec, Option<MadStudent<'a>>)> {
    let s = &cfg.sample;
    if s.guidance != GuidanceMode::Mad {
        return Ok((GuidanceSpec::new(s.guidance, s.scale)?, None));
    }
    let Some(branches) = branches else {
        bail!("MAD sampling needs a checkpoint with branches; run `dive distill` first");
    };
    if s.scale < 1.0 {
        bail!("MAD sampling needs a scale of at least 1");
    }
    Ok((
        GuidanceSpec::mad(),
        Some(MadStudent {
            model,
            branches,
            scales: s.family_scales.unwrap_or(ScaleSet::uniform(s.scale)).map(|l| l - 1.0),
        }),
    ))
}
