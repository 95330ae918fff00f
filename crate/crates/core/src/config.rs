//! Run configuration and its flat `key = value` text form.
//!
//! Keys are dotted (`optim.lr_encoder`, `synth.target.gamma`). Every key has
//! a default, later assignments override earlier ones, `#` starts a comment.
//! [`RunConfig::write_snapshot`] emits every key, so a snapshot parses back to
//! the same configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::numerics::IGNORE;
use crate::selftrain::{ContrastMode, Switches, TrainConfig};

/// Where the three splits come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        synth: SynthConfig,
        n_source: usize,
        n_target: usize,
        n_val: usize,
    },
    /// Folder datasets in the `images/` + `labels/` layout. Target train
    /// labels are never read.
    Folder {
        source: PathBuf,
        target: PathBuf,
        val: PathBuf,
        num_classes: usize,
        ignore_index: u8,
    },
}

impl DataSource {
    pub fn num_classes(&self) -> usize {
        match self {
            DataSource::Synthetic { synth, .. } => synth.num_classes,
            DataSource::Folder { num_classes, .. } => *num_classes,
        }
    }

    pub fn ignore_index(&self) -> u8 {
        match self {
            DataSource::Synthetic { .. } => IGNORE,
            DataSource::Folder { ignore_index, .. } => *ignore_index,
        }
    }
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            synth: SynthConfig::default(),
            n_source: 200,
            n_target: 200,
            n_val: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataSource,
    pub steps: u64,
    /// `None` picks 1500, or 300 for runs shorter than 6000 steps.
    pub warmup_steps: Option<u64>,
    pub eval_every: u64,
    /// Steps per metrics line; each line averages its window.
    pub log_every: u64,
    /// 0 disables intermediate checkpoints; the final one is always written.
    pub checkpoint_every: u64,
    pub seed: u64,
    pub name: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            train: TrainConfig::default(),
            data: DataSource::default(),
            steps: 3000,
            warmup_steps: None,
            eval_every: 500,
            log_every: 50,
            checkpoint_every: 1000,
            seed: 0,
            name: None,
        };
        c.sync();
        c
    }
}

/// Named switch sets accepted by `switches.preset`.
pub fn preset(name: &str) -> Option<Switches> {
    Some(match name {
        "source-only" | "source_only" => Switches::source_only(),
        "st" => Switches::self_training(),
        "st+prn" => Switches::refined(),
        "st+prn+nm" => Switches::refined_masked(),
        "full" => Switches::full(),
        _ => return None,
    })
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn mode_name(m: ContrastMode) -> &'static str {
    match m {
        ContrastMode::Off => "off",
        ContrastMode::Plain => "plain",
        ContrastMode::Refined => "refined",
    }
}

impl RunConfig {
    /// Effective warm-up length.
    pub fn warmup(&self) -> u64 {
        let w = self.warmup_steps.unwrap_or(if self.steps < 6000 { 300 } else { 1500 });
        w.min(self.steps)
    }

    /// Copies run-level settings into the training config.
    fn sync(&mut self) {
        self.train.schedule.total_steps = self.steps;
        self.train.schedule.warmup_steps = self.warmup();
        self.train.aug.rng_seed = self.seed;
        self.train.contrast.rng_seed = self.seed;
        self.train.perturb.rng_seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("run.steps must be > 0".into()));
        }
        if self.eval_every == 0 || self.log_every == 0 {
            return Err(Error::Config("run.eval_every and run.log_every must be > 0".into()));
        }
        match &self.data {
            DataSource::Synthetic { synth, n_source, n_target, n_val } => {
                synth.validate()?;
                if *n_source == 0 || *n_target == 0 || *n_val == 0 {
                    return Err(Error::Config("synthetic split sizes must be > 0".into()));
                }
            }
            DataSource::Folder { num_classes, .. } => {
                if *num_classes < 2 {
                    return Err(Error::Config("data.num_classes must be >= 2".into()));
                }
            }
        }
        Ok(())
    }

    /// Applies one assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let t = &mut self.train;
        match key {
            "run.steps" => self.steps = parse(key, v)?,
            "run.warmup_steps" => {
                self.warmup_steps = if v == "auto" { None } else { Some(parse(key, v)?) }
            }
            "run.eval_every" => self.eval_every = parse(key, v)?,
            "run.log_every" => self.log_every = parse(key, v)?,
            "run.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "run.seed" => self.seed = parse(key, v)?,
            "run.name" => self.name = if v.is_empty() { None } else { Some(v.to_string()) },

            "switches.preset" => {
                t.switches = preset(v).ok_or_else(|| Error::Config(format!("unknown preset {v:?}")))?
            }
            "switches.st" => t.switches.self_training = parse_bool(key, v)?,
            "switches.prn" => t.switches.refine = parse_bool(key, v)?,
            "switches.nm" => t.switches.noise_mask = parse_bool(key, v)?,
            "switches.fa" => t.switches.fourier = parse_bool(key, v)?,
            "switches.cl" => {
                t.switches.contrast = match v {
                    "off" | "false" => ContrastMode::Off,
                    "plain" => ContrastMode::Plain,
                    "refined" => ContrastMode::Refined,
                    _ => return Err(Error::Config(format!("{key}: expected off|plain|refined, got {v:?}"))),
                }
            }

            "optim.lr_encoder" => t.lr_encoder = parse(key, v)?,
            "optim.lr_decoder" => t.lr_decoder = parse(key, v)?,
            "optim.lr_prn" => t.lr_prn = parse(key, v)?,
            "optim.beta1" => t.adamw.beta1 = parse(key, v)?,
            "optim.beta2" => t.adamw.beta2 = parse(key, v)?,
            "optim.eps" => t.adamw.eps = parse(key, v)?,
            "optim.weight_decay" => t.adamw.weight_decay = parse(key, v)?,
            "optim.warmup_ratio" => t.schedule.warmup_ratio = parse(key, v)?,

            "selftrain.ema_beta" => t.ema_beta = parse(key, v)?,
            "selftrain.tau1" => t.tau1 = parse(key, v)?,
            "selftrain.tau2" => t.tau2 = parse(key, v)?,
            "selftrain.lambda1" => t.lambda1 = parse(key, v)?,
            "selftrain.lambda2" => t.lambda2 = parse(key, v)?,

            "perturb.eps_min" => t.perturb.eps_min = parse(key, v)?,
            "perturb.eps_max" => t.perturb.eps_max = parse(key, v)?,
            "fourier.eps" => t.fa_eps = parse(key, v)?,

            "aug.jitter_strength" => t.aug.jitter_strength = parse(key, v)?,
            "aug.jitter_prob" => t.aug.jitter_prob = parse(key, v)?,
            "aug.blur_sigma_min" => t.aug.blur_sigma_range.0 = parse(key, v)?,
            "aug.blur_sigma_max" => t.aug.blur_sigma_range.1 = parse(key, v)?,
            "aug.blur_prob" => t.aug.blur_prob = parse(key, v)?,
            "aug.classmix_fraction" => t.aug.classmix_fraction = parse(key, v)?,

            "contrast.temperature" => t.contrast.temperature = parse(key, v)?,
            "contrast.anchors_per_class" => t.contrast.anchors_per_class = parse(key, v)?,
            "contrast.max_positives" => t.contrast.max_positives = parse(key, v)?,
            "contrast.max_negatives" => t.contrast.max_negatives = parse(key, v)?,

            "data.kind" => match v {
                "synthetic" => {
                    if !matches!(self.data, DataSource::Synthetic { .. }) {
                        self.data = DataSource::default();
                    }
                }
                "folder" => {
                    if !matches!(self.data, DataSource::Folder { .. }) {
                        self.data = DataSource::Folder {
                            source: PathBuf::new(),
                            target: PathBuf::new(),
                            val: PathBuf::new(),
                            num_classes: self.data.num_classes(),
                            ignore_index: IGNORE,
                        };
                    }
                }
                _ => return Err(Error::Config(format!("{key}: expected synthetic|folder, got {v:?}"))),
            },
            _ if key.starts_with("data.") => self.set_folder(key, v)?,
            _ if key.starts_with("synth.") => self.set_synth(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        self.sync();
        Ok(())
    }

    fn set_folder(&mut self, key: &str, v: &str) -> Result<()> {
        let DataSource::Folder { source, target, val, num_classes, ignore_index } = &mut self.data else {
            return Err(Error::Config(format!("{key} needs data.kind = folder first")));
        };
        match key {
            "data.source" => *source = PathBuf::from(v),
            "data.target" => *target = PathBuf::from(v),
            "data.val" => *val = PathBuf::from(v),
            "data.num_classes" => *num_classes = parse(key, v)?,
            "data.ignore_index" => *ignore_index = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    fn set_synth(&mut self, key: &str, v: &str) -> Result<()> {
        let DataSource::Synthetic { synth, n_source, n_target, n_val } = &mut self.data else {
            return Err(Error::Config(format!("{key} needs data.kind = synthetic")));
        };
        let rest = &key["synth.".len()..];
        match rest {
            "image_size" => synth.image_size = parse(key, v)?,
            "num_classes" => synth.num_classes = parse(key, v)?,
            "shapes_per_image" => synth.shapes_per_image = parse(key, v)?,
            "hue_jitter_deg" => synth.hue_jitter_deg = parse(key, v)?,
            "texture_contrast" => synth.texture_contrast = parse(key, v)?,
            "seed" => synth.rng_seed = parse(key, v)?,
            "n_source" => *n_source = parse(key, v)?,
            "n_target" => *n_target = parse(key, v)?,
            "n_val" => *n_val = parse(key, v)?,
            _ => {
                let (domain, field) = rest
                    .split_once('.')
                    .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
                let style = match domain {
                    "source" => &mut synth.source_style,
                    "target" => &mut synth.target_style,
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                };
                match field {
                    "hue_shift_deg" => style.hue_shift_deg = parse(key, v)?,
                    "brightness" => style.brightness = parse(key, v)?,
                    "gamma" => style.gamma = parse(key, v)?,
                    "noise_sigma" => style.noise_sigma = parse(key, v)?,
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Validates the result,
    /// so a bad switch combination fails here rather than mid-run.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        self.validate()
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Reads a config file, then applies `overrides` (`key=value` strings).
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut c = RunConfig::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            c.apply_text(&text)?;
        }
        c.apply_text(&overrides.join("\n"))?;
        Ok(c)
    }

    /// All keys with their current values, in a stable order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let t = &self.train;
        let s = &t.switches;
        let mut e: Vec<(&str, String)> = vec![
            ("run.steps", self.steps.to_string()),
            (
                "run.warmup_steps",
                self.warmup_steps.map_or("auto".into(), |w| w.to_string()),
            ),
            ("run.eval_every", self.eval_every.to_string()),
            ("run.log_every", self.log_every.to_string()),
            ("run.checkpoint_every", self.checkpoint_every.to_string()),
            ("run.seed", self.seed.to_string()),
            ("run.name", self.name.clone().unwrap_or_default()),
            ("switches.st", s.self_training.to_string()),
            ("switches.prn", s.refine.to_string()),
            ("switches.nm", s.noise_mask.to_string()),
            ("switches.cl", mode_name(s.contrast).into()),
            ("switches.fa", s.fourier.to_string()),
            ("optim.lr_encoder", t.lr_encoder.to_string()),
            ("optim.lr_decoder", t.lr_decoder.to_string()),
            ("optim.lr_prn", t.lr_prn.to_string()),
            ("optim.beta1", t.adamw.beta1.to_string()),
            ("optim.beta2", t.adamw.beta2.to_string()),
            ("optim.eps", t.adamw.eps.to_string()),
            ("optim.weight_decay", t.adamw.weight_decay.to_string()),
            ("optim.warmup_ratio", t.schedule.warmup_ratio.to_string()),
            ("selftrain.ema_beta", t.ema_beta.to_string()),
            ("selftrain.tau1", t.tau1.to_string()),
            ("selftrain.tau2", t.tau2.to_string()),
            ("selftrain.lambda1", t.lambda1.to_string()),
            ("selftrain.lambda2", t.lambda2.to_string()),
            ("perturb.eps_min", t.perturb.eps_min.to_string()),
            ("perturb.eps_max", t.perturb.eps_max.to_string()),
            ("fourier.eps", t.fa_eps.to_string()),
            ("aug.jitter_strength", t.aug.jitter_strength.to_string()),
            ("aug.jitter_prob", t.aug.jitter_prob.to_string()),
            ("aug.blur_sigma_min", t.aug.blur_sigma_range.0.to_string()),
            ("aug.blur_sigma_max", t.aug.blur_sigma_range.1.to_string()),
            ("aug.blur_prob", t.aug.blur_prob.to_string()),
            ("aug.classmix_fraction", t.aug.classmix_fraction.to_string()),
            ("contrast.temperature", t.contrast.temperature.to_string()),
            ("contrast.anchors_per_class", t.contrast.anchors_per_class.to_string()),
            ("contrast.max_positives", t.contrast.max_positives.to_string()),
            ("contrast.max_negatives", t.contrast.max_negatives.to_string()),
        ];
        match &self.data {
            DataSource::Synthetic { synth, n_source, n_target, n_val } => {
                e.push(("data.kind", "synthetic".into()));
                e.push(("synth.image_size", synth.image_size.to_string()));
                e.push(("synth.num_classes", synth.num_classes.to_string()));
                e.push(("synth.shapes_per_image", synth.shapes_per_image.to_string()));
                e.push(("synth.hue_jitter_deg", synth.hue_jitter_deg.to_string()));
                e.push(("synth.texture_contrast", synth.texture_contrast.to_string()));
                e.push(("synth.seed", synth.rng_seed.to_string()));
                e.push(("synth.n_source", n_source.to_string()));
                e.push(("synth.n_target", n_target.to_string()));
                e.push(("synth.n_val", n_val.to_string()));
                let mut styled = Vec::new();
                for (d, st) in [("source", synth.source_style), ("target", synth.target_style)] {
                    styled.push((format!("synth.{d}.hue_shift_deg"), st.hue_shift_deg.to_string()));
                    styled.push((format!("synth.{d}.brightness"), st.brightness.to_string()));
                    styled.push((format!("synth.{d}.gamma"), st.gamma.to_string()));
                    styled.push((format!("synth.{d}.noise_sigma"), st.noise_sigma.to_string()));
                }
                let mut out: Vec<(String, String)> = e.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
                out.extend(styled);
                return out;
            }
            DataSource::Folder { source, target, val, num_classes, ignore_index } => {
                e.push(("data.kind", "folder".into()));
                e.push(("data.source", source.display().to_string()));
                e.push(("data.target", target.display().to_string()));
                e.push(("data.val", val.display().to_string()));
                e.push(("data.num_classes", num_classes.to_string()));
                e.push(("data.ignore_index", ignore_index.to_string()));
            }
        }
        e.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Run directory name: explicit name, else switch tag and seed.
    pub fn run_name(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| format!("{}-seed{}", self.train.switches.tag(), self.seed))
    }
}
