//! Run configuration: flat `[section]` tables of `key = value` pairs.
//!
//! Precedence is defaults, then `DIVE_SEED`, then the config file, then
//! command-line flags. The hash of the resolved configuration is recorded in
//! every metrics row.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use dive_core::backbone::BackboneConfig;
use dive_core::flow::{GuidanceMode, GuidanceSpec};
use dive_core::mad::{DistillStrategy, ScaleSet};
use dive_core::rps::StageSchedule;
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Single-frame steps at the smallest bucket.
    pub phase1_steps: usize,
    /// Video steps at the smallest bucket.
    pub phase2_steps: usize,
    /// Video steps cycling through all buckets.
    pub phase3_steps: usize,
    /// Batch size per bucket, smallest first; single-frame phase uses the first.
    pub batch: [usize; 3],
    pub p_first_k: f64,
    pub p_drop_all: f64,
    pub p_drop_each: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub strategy: DistillStrategy,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub validation_scenes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleConfig {
    pub guidance: GuidanceMode,
    pub scale: f64,
    pub steps: usize,
    pub rps: Option<String>,
    pub extend: Option<usize>,
    /// Per-family guidance scales for MAD sampling, overriding `scale`.
    pub family_scales: Option<ScaleSet>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub scenes: usize,
    pub steps: usize,
    pub schedule: String,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub model: BackboneConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub sample: SampleConfig,
    pub bench: BenchConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            model: BackboneConfig::default(),
            data: DataConfig {
                train_scenes: 512,
                eval_scenes: 32,
                frames: 4,
                height: 16,
                width: 28,
            },
            train: TrainConfig {
                lr: 1e-4,
                phase1_steps: 2000,
                phase2_steps: 3000,
                phase3_steps: 8000,
                batch: [4, 2, 1],
                p_first_k: 0.2,
                p_drop_all: 0.1,
                p_drop_each: 0.1,
            },
            distill: DistillConfig {
                strategy: DistillStrategy::Mixed,
                steps: 2000,
                lr: 1e-4,
                batch: 2,
                frames: 4,
                height: 8,
                width: 14,
                validation_scenes: 8,
            },
            sample: SampleConfig {
                guidance: GuidanceMode::Extended,
                scale: 2.0,
                steps: 30,
                rps: None,
                extend: None,
                family_scales: None,
            },
            bench: BenchConfig {
                scenes: 2,
                steps: 30,
                schedule: "8x14:10,12x21:10,16x28:10".into(),
                scale: 2.0,
            },
        }
    }
}

fn get<T: std::str::FromStr>(table: &toml::Table, section: &str, key: &str, out: &mut T) -> Result<()>
where
    T::Err: std::fmt::Display,
{
    let Some(value) = table.get(section).and_then(|s| s.get(key)) else {
        return Ok(());
    };
    let text = match value {
        toml::Value::String(s) => s.clone(),
        toml::Value::Array(stages) => stages_text(stages).map_err(|e| anyhow!("[{section}] {key}: {e}"))?,
        other => other.to_string(),
    };
    *out = text.parse().map_err(|e| anyhow!("[{section}] {key} = {text}: {e}"))?;
    Ok(())
}

/// `[{h = 8, w = 14, steps = 10}, ...]` as `8x14:10,...`.
fn stages_text(stages: &[toml::Value]) -> Result<String> {
    let field = |t: &toml::Table, k: &str| -> Result<i64> {
        t.get(k).and_then(toml::Value::as_integer).ok_or_else(|| anyhow!("stage needs integer {k}"))
    };
    let parts = stages
        .iter()
        .map(|v| {
            let t = v.as_table().ok_or_else(|| anyhow!("stage must be a table"))?;
            if let Some(k) = t.keys().find(|k| !["h", "w", "steps"].contains(&k.as_str())) {
                bail!("unknown stage key {k}");
            }
            Ok(format!("{}x{}:{}", field(t, "h")?, field(t, "w")?, field(t, "steps")?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.join(","))
}

fn get_opt<T: std::str::FromStr>(table: &toml::Table, section: &str, key: &str, out: &mut Option<T>) -> Result<()>
where
    T::Err: std::fmt::Display,
{
    if table.get(section).and_then(|s| s.get(key)).is_some() {
        let mut v = String::new();
        get(table, section, key, &mut v)?;
        *out = Some(v.parse().map_err(|e| anyhow!("[{section}] {key}: {e}"))?);
    }
    Ok(())
}

const KNOWN: &[(&str, &[&str])] = &[
    ("run", &["seed"]),
    ("model", &["d_model", "n_heads", "n_blocks", "sketch_cells", "mlp_hidden", "text_tokens", "bands", "view_inflation"]),
    ("data", &["train_scenes", "eval_scenes", "frames", "height", "width"]),
    (
        "train",
        &["lr", "phase1_steps", "phase2_steps", "phase3_steps", "batch_small", "batch_medium", "batch_large", "p_first_k", "p_drop_all", "p_drop_each"],
    ),
    ("distill", &["strategy", "steps", "lr", "batch", "frames", "height", "width", "validation_scenes"]),
    ("sample", &["guidance", "scale", "steps", "rps", "extend", "family_scales"]),
    ("bench", &["scenes", "steps", "schedule", "scale"]),
];

impl Config {
    /// Defaults with `DIVE_SEED` applied.
    pub fn from_env() -> Result<Self> {
        let mut cfg = Self::default();
        if let Ok(seed) = std::env::var("DIVE_SEED") {
            cfg.seed = seed.trim().parse().with_context(|| format!("DIVE_SEED={seed}"))?;
        }
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        self.apply_str(&text)
    }

    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        let t: toml::Table = text.parse().context("parsing config")?;
        for (section, value) in &t {
            let Some((_, keys)) = KNOWN.iter().find(|(s, _)| s == section) else {
                bail!("unknown config section [{section}]");
            };
            let Some(table) = value.as_table() else {
                bail!("[{section}] must be a table");
            };
            if let Some(k) = table.keys().find(|k| !keys.contains(&k.as_str())) {
                bail!("unknown key {k} in [{section}]");
            }
        }
        get(&t, "run", "seed", &mut self.seed)?;
        let m = &mut self.model;
        get(&t, "model", "d_model", &mut m.d_model)?;
        get(&t, "model", "n_heads", &mut m.n_heads)?;
        get(&t, "model", "n_blocks", &mut m.n_blocks)?;
        get(&t, "model", "sketch_cells", &mut m.sketch_cells)?;
        get(&t, "model", "mlp_hidden", &mut m.mlp_hidden)?;
        get(&t, "model", "text_tokens", &mut m.text_tokens)?;
        get(&t, "model", "bands", &mut m.bands)?;
        get(&t, "model", "view_inflation", &mut m.view_inflation)?;
        let d = &mut self.data;
        get(&t, "data", "train_scenes", &mut d.train_scenes)?;
        get(&t, "data", "eval_scenes", &mut d.eval_scenes)?;
        get(&t, "data", "frames", &mut d.frames)?;
        get(&t, "data", "height", &mut d.height)?;
        get(&t, "data", "width", &mut d.width)?;
        let tr = &mut self.train;
        get(&t, "train", "lr", &mut tr.lr)?;
        get(&t, "train", "phase1_steps", &mut tr.phase1_steps)?;
        get(&t, "train", "phase2_steps", &mut tr.phase2_steps)?;
        get(&t, "train", "phase3_steps", &mut tr.phase3_steps)?;
        get(&t, "train", "batch_small", &mut tr.batch[0])?;
        get(&t, "train", "batch_medium", &mut tr.batch[1])?;
        get(&t, "train", "batch_large", &mut tr.batch[2])?;
        get(&t, "train", "p_first_k", &mut tr.p_first_k)?;
        get(&t, "train", "p_drop_all", &mut tr.p_drop_all)?;
        get(&t, "train", "p_drop_each", &mut tr.p_drop_each)?;
        let ds = &mut self.distill;
        get(&t, "distill", "strategy", &mut ds.strategy)?;
        get(&t, "distill", "steps", &mut ds.steps)?;
        get(&t, "distill", "lr", &mut ds.lr)?;
        get(&t, "distill", "batch", &mut ds.batch)?;
        get(&t, "distill", "frames", &mut ds.frames)?;
        get(&t, "distill", "height", &mut ds.height)?;
        get(&t, "distill", "width", &mut ds.width)?;
        get(&t, "distill", "validation_scenes", &mut ds.validation_scenes)?;
        let s = &mut self.sample;
        get(&t, "sample", "guidance", &mut s.guidance)?;
        get(&t, "sample", "scale", &mut s.scale)?;
        get(&t, "sample", "steps", &mut s.steps)?;
        get_opt(&t, "sample", "rps", &mut s.rps)?;
        get_opt(&t, "sample", "extend", &mut s.extend)?;
        get_opt(&t, "sample", "family_scales", &mut s.family_scales)?;
        let b = &mut self.bench;
        get(&t, "bench", "scenes", &mut b.scenes)?;
        get(&t, "bench", "steps", &mut b.steps)?;
        get(&t, "bench", "schedule", &mut b.schedule)?;
        get(&t, "bench", "scale", &mut b.scale)?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| anyhow!("[model] {e}"))?;
        if self.model.views != crate::world::VIEWS || self.model.channels != crate::world::CHANNELS {
            bail!("[model] views and channels are fixed by the toy world");
        }
        if self.data.frames == 0 || self.data.frames > self.model.max_frames {
            bail!("[data] frames must lie in 1..={}", self.model.max_frames);
        }
        if self.distill.frames == 0 || self.distill.frames > self.data.frames {
            bail!("[distill] frames must lie in 1..={}", self.data.frames);
        }
        if self.train.batch.contains(&0) || self.distill.batch == 0 {
            bail!("batch sizes must be positive");
        }
        GuidanceSpec::new(self.sample.guidance, self.sample.scale)?;
        if let Some(f) = self.sample.family_scales {
            if self.sample.guidance != GuidanceMode::Mad {
                bail!("[sample] family_scales needs mad guidance");
            }
            if [f.text, f.instance, f.sketch].iter().any(|&l| l < 1.0) {
                bail!("[sample] family_scales must be at least 1");
            }
        }
        if let Some(r) = &self.sample.rps {
            StageSchedule::parse(r)?;
        }
        StageSchedule::parse(&self.bench.schedule)?;
        Ok(())
    }

    /// Canonical text form; parsing it back reproduces `self`.
    pub fn to_toml(&self) -> String {
        let mut o = String::new();
        let m = &self.model;
        let _ = writeln!(o, "[run]\nseed = {}\n", self.seed);
        let _ = writeln!(
            o,
            "[model]\nd_model = {}\nn_heads = {}\nn_blocks = {}\nsketch_cells = {}\nmlp_hidden = {}\ntext_tokens = {}\nbands = {}\nview_inflation = {}\n",
            m.d_model, m.n_heads, m.n_blocks, m.sketch_cells, m.mlp_hidden, m.text_tokens, m.bands, m.view_inflation
        );
        let d = &self.data;
        let _ = writeln!(
            o,
            "[data]\ntrain_scenes = {}\neval_scenes = {}\nframes = {}\nheight = {}\nwidth = {}\n",
            d.train_scenes, d.eval_scenes, d.frames, d.height, d.width
        );
        let t = &self.train;
        let _ = writeln!(
            o,
            "[train]\nlr = {:?}\nphase1_steps = {}\nphase2_steps = {}\nphase3_steps = {}\nbatch_small = {}\nbatch_medium = {}\nbatch_large = {}\np_first_k = {:?}\np_drop_all = {:?}\np_drop_each = {:?}\n",
            t.lr, t.phase1_steps, t.phase2_steps, t.phase3_steps, t.batch[0], t.batch[1], t.batch[2], t.p_first_k, t.p_drop_all, t.p_drop_each
        );
        let ds = &self.distill;
        let _ = writeln!(
            o,
            "[distill]\nstrategy = \"{}\"\nsteps = {}\nlr = {:?}\nbatch = {}\nframes = {}\nheight = {}\nwidth = {}\nvalidation_scenes = {}\n",
            ds.strategy.name(),
            ds.steps,
            ds.lr,
            ds.batch,
            ds.frames,
            ds.height,
            ds.width,
            ds.validation_scenes
        );
        let s = &self.sample;
        let _ = write!(o, "[sample]\nguidance = \"{}\"\nscale = {:?}\nsteps = {}\n", s.guidance.name(), s.scale, s.steps);
        if let Some(r) = &s.rps {
            let _ = writeln!(o, "rps = \"{r}\"");
        }
        if let Some(k) = s.extend {
            let _ = writeln!(o, "extend = {k}");
        }
        if let Some(f) = s.family_scales {
            let _ = writeln!(o, "family_scales = \"{f}\"");
        }
        let b = &self.bench;
        let _ = write!(o, "\n[bench]\nscenes = {}\nsteps = {}\nschedule = \"{}\"\nscale = {:?}\n", b.scenes, b.steps, b.schedule, b.scale);
        o
    }

    /// First 16 hex digits of the SHA-256 of the canonical form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
