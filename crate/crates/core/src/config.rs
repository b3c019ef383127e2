//! Flat `key=value` experiment configuration.
//!
//! One setting per line, `#` starts a comment, keys carry a dotted section
//! prefix (`model.n_rec=64`). Unknown keys are rejected. [`ExperimentConfig::to_text`]
//! writes every key, and parsing that text yields an equal config.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cells::{Activation, CellKind, Reset};
use crate::conditions::{BoundsMode, ConditionMask, InfeasiblePolicy};
use crate::data::{LatencyParams, SynthSpec};
use crate::error::{Error, Result};
use crate::init::{VarianceRule, WeightDist};
use crate::surrogate::{Shape, SurrogateSpec};
use crate::train::{OptimizerKind, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum TaskSource {
    Synth(SynthSpec),
    SlMnist { images: PathBuf, labels: PathBuf, latency: LatencyParams },
    EventFile(PathBuf),
}

impl TaskSource {
    pub fn name(&self) -> &'static str {
        match self {
            TaskSource::Synth(_) => "synth",
            TaskSource::SlMnist { .. } => "slmnist",
            TaskSource::EventFile(_) => "events",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub source: TaskSource,
    pub n_train: usize,
    pub n_val: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub cell: CellKind,
    pub layers: usize,
    pub n_rec: usize,
    pub alpha: f64,
    pub thr: f64,
    pub reset: Reset,
    pub rho: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Fixed variance rule and distribution for every matrix.
    Scheme,
    /// Solve the conditions selected by the mask.
    Conditioned,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    pub mode: InitMode,
    pub rule: VarianceRule,
    pub dist: WeightDist,
    pub mask: ConditionMask,
    pub bounds: BoundsMode,
    pub on_infeasible: InfeasiblePolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Dampening,
    Sharpness,
    TailQ,
    Shape,
    InitScheme,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Dampening => "dampening",
            SweepAxis::Sharpness => "sharpness",
            SweepAxis::TailQ => "tail_q",
            SweepAxis::Shape => "shape",
            SweepAxis::InitScheme => "init_scheme",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dampening" => Ok(SweepAxis::Dampening),
            "sharpness" => Ok(SweepAxis::Sharpness),
            "tail_q" => Ok(SweepAxis::TailQ),
            "shape" => Ok(SweepAxis::Shape),
            "init_scheme" => Ok(SweepAxis::InitScheme),
            other => Err(Error::Config(format!("unknown sweep axis '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<String>,
    pub seeds: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub steps: usize,
    /// Independent input sequences averaged per row.
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub surrogate: SurrogateSpec,
    pub init: InitConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub probe: ProbeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("sgkit-out"),
            task: TaskConfig {
                source: TaskSource::Synth(SynthSpec::default()),
                n_train: 1000,
                n_val: 500,
            },
            model: ModelConfig {
                cell: CellKind::Lif,
                layers: 2,
                n_rec: 64,
                alpha: 0.9,
                thr: 1.0,
                reset: Reset::Subtractive,
                rho: 0.9,
                beta: 0.0,
            },
            surrogate: SurrogateSpec::unit(Shape::Exponential),
            init: InitConfig {
                mode: InitMode::Conditioned,
                rule: VarianceRule::Glorot,
                dist: WeightDist::Uniform,
                mask: ConditionMask::ALL,
                bounds: BoundsMode::PerSample,
                on_infeasible: InfeasiblePolicy::Fallback,
            },
            train: TrainConfig::default(),
            sweep: SweepConfig {
                axis: SweepAxis::Dampening,
                values: vec!["0.4".into(), "0.8".into(), "1.2".into()],
                seeds: 3,
            },
            probe: ProbeConfig { steps: 50, samples: 16 },
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{value}'"))),
    }
}

fn parse_with<T: FromStr<Err = Error>>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|e: Error| Error::Config(format!("{key}: {e}")))
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Hard => "hard",
        Activation::Soft => "soft",
    }
}

fn init_mode_name(m: InitMode) -> &'static str {
    match m {
        InitMode::Scheme => "scheme",
        InitMode::Conditioned => "conditioned",
    }
}

fn q_of(shape: Shape) -> f64 {
    match shape {
        Shape::QPseudoSpike { q } => q,
        _ => 2.0,
    }
}

impl ExperimentConfig {
    /// Parse configuration text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key=value, got '{line}'"),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Apply a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{pair}' is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    fn synth_mut(&mut self, key: &str) -> Result<&mut SynthSpec> {
        match &mut self.task.source {
            TaskSource::Synth(s) => Ok(s),
            other => Err(Error::Config(format!("{key} only applies to the synth task, task is {}", other.name()))),
        }
    }

    fn latency_mut(&mut self, key: &str) -> Result<&mut LatencyParams> {
        match &mut self.task.source {
            TaskSource::SlMnist { latency, .. } => Ok(latency),
            other => Err(Error::Config(format!("{key} only applies to the slmnist task, task is {}", other.name()))),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "output.dir" => self.output_dir = PathBuf::from(value),
            "task.kind" => {
                self.task.source = match value {
                    "synth" => TaskSource::Synth(SynthSpec::default()),
                    "slmnist" => TaskSource::SlMnist {
                        images: PathBuf::new(),
                        labels: PathBuf::new(),
                        latency: LatencyParams::default(),
                    },
                    "events" => TaskSource::EventFile(PathBuf::new()),
                    other => return Err(Error::Config(format!("unknown task kind '{other}'"))),
                }
            }
            "task.path" => match &mut self.task.source {
                TaskSource::EventFile(p) => *p = PathBuf::from(value),
                other => return Err(Error::Config(format!("task.path needs task.kind=events, task is {}", other.name()))),
            },
            "task.images" | "task.labels" => match &mut self.task.source {
                TaskSource::SlMnist { images, labels, .. } => {
                    let slot = if key == "task.images" { images } else { labels };
                    *slot = PathBuf::from(value);
                }
                other => return Err(Error::Config(format!("{key} needs task.kind=slmnist, task is {}", other.name()))),
            },
            "task.n_train" => self.task.n_train = parse_num(key, value)?,
            "task.n_val" => self.task.n_val = parse_num(key, value)?,
            "task.classes" => self.synth_mut(key)?.classes = parse_num(key, value)?,
            "task.channels" => self.synth_mut(key)?.channels = parse_num(key, value)?,
            "task.steps" => match &mut self.task.source {
                TaskSource::Synth(s) => s.steps = parse_num(key, value)?,
                TaskSource::SlMnist { latency, .. } => latency.steps = parse_num(key, value)?,
                TaskSource::EventFile(_) => return Err(Error::Config("task.steps is read from the event file".into())),
            },
            "task.segments" => self.synth_mut(key)?.segments = parse_num(key, value)?,
            "task.active_fraction" => self.synth_mut(key)?.active_fraction = parse_num(key, value)?,
            "task.rate_on" => self.synth_mut(key)?.rate_on = parse_num(key, value)?,
            "task.rate_off" => self.synth_mut(key)?.rate_off = parse_num(key, value)?,
            "task.theta" => self.latency_mut(key)?.theta = parse_num(key, value)?,
            "task.tau" => self.latency_mut(key)?.tau = parse_num(key, value)?,
            "task.dt" => self.latency_mut(key)?.dt = parse_num(key, value)?,
            "model.cell" => self.model.cell = parse_with(key, value)?,
            "model.layers" => self.model.layers = parse_num(key, value)?,
            "model.n_rec" => self.model.n_rec = parse_num(key, value)?,
            "model.alpha" => self.model.alpha = parse_num(key, value)?,
            "model.thr" => self.model.thr = parse_num(key, value)?,
            "model.reset" => self.model.reset = parse_with(key, value)?,
            "model.rho" => self.model.rho = parse_num(key, value)?,
            "model.beta" => self.model.beta = parse_num(key, value)?,
            "surrogate.shape" => {
                self.surrogate.shape = Shape::parse(value, q_of(self.surrogate.shape)).map_err(|e| Error::Config(format!("{key}: {e}")))?
            }
            "surrogate.q" => {
                let q: f64 = parse_num(key, value)?;
                if let Shape::QPseudoSpike { .. } = self.surrogate.shape {
                    self.surrogate.shape = Shape::QPseudoSpike { q };
                } else if q != 2.0 {
                    return Err(Error::Config("surrogate.q needs surrogate.shape=qpseudospike".into()));
                }
            }
            "surrogate.gamma" => self.surrogate.gamma = parse_num(key, value)?,
            "surrogate.sharpness" => self.surrogate.sharpness = parse_num(key, value)?,
            "init.mode" => {
                self.init.mode = match value {
                    "scheme" => InitMode::Scheme,
                    "conditioned" => InitMode::Conditioned,
                    other => return Err(Error::Config(format!("unknown init mode '{other}'"))),
                }
            }
            "init.rule" => self.init.rule = parse_with(key, value)?,
            "init.dist" => self.init.dist = parse_with(key, value)?,
            "init.mask" => self.init.mask = parse_with(key, value)?,
            "init.bounds" => self.init.bounds = parse_with(key, value)?,
            "init.on_infeasible" => self.init.on_infeasible = parse_with(key, value)?,
            "train.lr" => self.train.lr = parse_num(key, value)?,
            "train.label_smoothing" => self.train.label_smoothing = parse_num(key, value)?,
            "train.clip_norm" => self.train.clip_norm = parse_num(key, value)?,
            "train.weight_decay" => self.train.weight_decay = parse_num(key, value)?,
            "train.epochs" => self.train.epochs = parse_num(key, value)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, value)?,
            "train.tail_average" => self.train.tail_average = parse_bool(key, value)?,
            "train.optimizer" => self.train.optimizer = parse_with::<OptimizerKind>(key, value)?,
            "train.beta1" => self.train.beta1 = parse_num(key, value)?,
            "train.beta2" => self.train.beta2 = parse_num(key, value)?,
            "train.eps" => self.train.eps = parse_num(key, value)?,
            "train.activation" => {
                self.train.activation = match value {
                    "hard" => Activation::Hard,
                    "soft" => Activation::Soft,
                    other => return Err(Error::Config(format!("unknown activation '{other}'"))),
                }
            }
            "sweep.axis" => self.sweep.axis = value.parse()?,
            "sweep.values" => {
                self.sweep.values = value.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect()
            }
            "sweep.seeds" => self.sweep.seeds = parse_num(key, value)?,
            "probe.steps" => self.probe.steps = parse_num(key, value)?,
            "probe.samples" => self.probe.samples = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Check value ranges that do not need any file access.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.layers == 0 || m.n_rec < 2 {
            return Err(Error::Config(format!("need >= 1 layer of >= 2 neurons, got {} x {}", m.layers, m.n_rec)));
        }
        if !(m.alpha > 0.0 && m.alpha < 1.0) {
            return Err(Error::Config(format!("model.alpha must lie in (0, 1), got {}", m.alpha)));
        }
        if !(m.thr >= 0.0 && m.thr.is_finite()) {
            return Err(Error::Config(format!("model.thr must be >= 0, got {}", m.thr)));
        }
        self.surrogate.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        match &self.task.source {
            TaskSource::Synth(s) => s.validate().map_err(|e| Error::Config(e.to_string()))?,
            TaskSource::SlMnist { latency, .. } => latency.validate().map_err(|e| Error::Config(e.to_string()))?,
            TaskSource::EventFile(_) => {}
        }
        if self.task.n_train == 0 {
            return Err(Error::Config("task.n_train must be positive".into()));
        }
        if self.sweep.values.is_empty() || self.sweep.seeds == 0 {
            return Err(Error::Config("sweep needs at least one value and one seed".into()));
        }
        if self.probe.steps == 0 || self.probe.samples == 0 {
            return Err(Error::Config("probe needs positive steps and samples".into()));
        }
        Ok(())
    }

    /// Every setting as `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut kv: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("output.dir", self.output_dir.display().to_string()),
            ("task.kind", self.task.source.name().to_string()),
        ];
        match &self.task.source {
            TaskSource::Synth(s) => {
                kv.push(("task.classes", s.classes.to_string()));
                kv.push(("task.channels", s.channels.to_string()));
                kv.push(("task.steps", s.steps.to_string()));
                kv.push(("task.segments", s.segments.to_string()));
                kv.push(("task.active_fraction", s.active_fraction.to_string()));
                kv.push(("task.rate_on", s.rate_on.to_string()));
                kv.push(("task.rate_off", s.rate_off.to_string()));
            }
            TaskSource::SlMnist { images, labels, latency } => {
                kv.push(("task.images", images.display().to_string()));
                kv.push(("task.labels", labels.display().to_string()));
                kv.push(("task.steps", latency.steps.to_string()));
                kv.push(("task.theta", latency.theta.to_string()));
                kv.push(("task.tau", latency.tau.to_string()));
                kv.push(("task.dt", latency.dt.to_string()));
            }
            TaskSource::EventFile(p) => kv.push(("task.path", p.display().to_string())),
        }
        let m = &self.model;
        let t = &self.train;
        kv.extend([
            ("task.n_train", self.task.n_train.to_string()),
            ("task.n_val", self.task.n_val.to_string()),
            ("model.cell", m.cell.name().to_string()),
            ("model.layers", m.layers.to_string()),
            ("model.n_rec", m.n_rec.to_string()),
            ("model.alpha", m.alpha.to_string()),
            ("model.thr", m.thr.to_string()),
            ("model.reset", m.reset.name().to_string()),
            ("model.rho", m.rho.to_string()),
            ("model.beta", m.beta.to_string()),
            ("surrogate.shape", self.surrogate.shape.name().to_string()),
            ("surrogate.q", q_of(self.surrogate.shape).to_string()),
            ("surrogate.gamma", self.surrogate.gamma.to_string()),
            ("surrogate.sharpness", self.surrogate.sharpness.to_string()),
            ("init.mode", init_mode_name(self.init.mode).to_string()),
            ("init.rule", self.init.rule.name().to_string()),
            ("init.dist", self.init.dist.name().to_string()),
            ("init.mask", self.init.mask.to_string()),
            ("init.bounds", self.init.bounds.name().to_string()),
            ("init.on_infeasible", self.init.on_infeasible.name().to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.label_smoothing", t.label_smoothing.to_string()),
            ("train.clip_norm", t.clip_norm.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.tail_average", t.tail_average.to_string()),
            ("train.optimizer", t.optimizer.name().to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.eps", t.eps.to_string()),
            ("train.activation", activation_name(t.activation).to_string()),
            ("sweep.axis", self.sweep.axis.name().to_string()),
            ("sweep.values", self.sweep.values.join(",")),
            ("sweep.seeds", self.sweep.seeds.to_string()),
            ("probe.steps", self.probe.steps.to_string()),
            ("probe.samples", self.probe.samples.to_string()),
        ]);
        let mut out = String::new();
        for (k, v) in kv {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Training settings with the experiment seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train }
    }
}
