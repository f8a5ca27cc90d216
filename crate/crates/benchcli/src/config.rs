//! `key = value` experiment files.
//!
//! ```text
//! # MNIST, Levenberg–Marquardt
//! task = mnist
//! optimizer = lm
//! subset_n = 2000
//! images = data/train-images-idx3-ubyte
//! labels = data/train-labels-idx1-ubyte
//! ```
//!
//! `task` and `optimizer` are required. Every other key has a default taken
//! from the published hyperparameter table for that task/optimizer pair.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use nnopt::nn::{Network, NetworkSpec};
use nnopt::optimizers::lm::MAX_DENSE_PARAMS;
use nnopt::optimizers::{BetaRule, OptimizerKind};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "config line {l}: {}", self.msg),
            None => write!(f, "config: {}", self.msg),
        }
    }
}

fn err(line: Option<usize>, msg: impl Into<String>) -> ConfigError {
    ConfigError { line, msg: msg.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Cifar,
    Mnist,
    Flappy,
    Cartpole,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Cifar => "cifar",
            Task::Mnist => "mnist",
            Task::Flappy => "flappy",
            Task::Cartpole => "cartpole",
        }
    }

    pub fn is_rl(self) -> bool {
        matches!(self, Task::Flappy | Task::Cartpole)
    }

    /// Default architecture per task.
    pub fn default_arch(self) -> NetworkSpec {
        let text = match self {
            Task::Cifar => {
                "3x32x32 | conv(6,5x5,s1) relu conv(16,5x5,s1) relu pool(2,s2) flatten \
                 dense(120) relu dense(84) relu dense(10)"
            }
            Task::Mnist => {
                "1x28x28 | conv(10,5x5,s1) relu conv(20,5x5,s1) relu pool(2,s2) flatten dense(50) relu dense(10)"
            }
            Task::Flappy => {
                "1x84x84 | conv(32,8x8,s4) relu conv(64,4x4,s2) relu conv(64,3x3,s1) relu flatten \
                 dense(64) relu dense(2)"
            }
            Task::Cartpole => "4 | dense(64) relu dense(2)",
        };
        text.parse().expect("built-in architectures are valid")
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cifar" | "cifar10" => Ok(Task::Cifar),
            "mnist" => Ok(Task::Mnist),
            "flappy" | "flappybird" => Ok(Task::Flappy),
            "cartpole" => Ok(Task::Cartpole),
            other => Err(format!("unknown task `{other}` (cifar, mnist, flappy, cartpole)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Exact number of optimizer steps for classification; overrides `epochs`.
    pub iterations: Option<usize>,
    pub episodes: usize,
    pub subset_n: Option<usize>,
    pub seed: u64,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub cifar: Vec<PathBuf>,
    pub out: PathBuf,
    pub arch: NetworkSpec,
    pub lambda0: f64,
    pub gamma: f64,
    pub warmup: usize,
    pub buffer_capacity: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub max_steps: usize,
}

/// Learning rate, batch size and line-search cap for a task/optimizer pair.
pub fn table_defaults(task: Task, optimizer: &str) -> (f64, usize, usize) {
    let bs = match task {
        Task::Cifar => 1000,
        Task::Mnist => 64,
        Task::Flappy | Task::Cartpole => 32,
    };
    let mi = if task == Task::Flappy { 20 } else { 10 };
    let lr = match (task, optimizer) {
        (Task::Flappy | Task::Cartpole, _) => 1e-6,
        (_, "lbfgs") => 1e-6,
        _ => 1e-3,
    };
    (lr, bs, mi)
}

const KEYS: &[&str] = &[
    "task", "optimizer", "beta_rule", "lr", "bs", "mi", "lbfgs_memory", "epochs", "iterations",
    "episodes", "subset_n", "seed", "images", "labels", "cifar", "out", "arch", "lambda0", "gamma",
    "warmup", "buffer_capacity", "eps_start", "eps_end", "max_steps",
];

fn canonical_key(k: &str) -> &str {
    match k {
        "batch_size" => "bs",
        "max_line_search" => "mi",
        other => other,
    }
}

type Raw = BTreeMap<String, (String, Option<usize>)>;

fn read_lines(text: &str, raw: &mut Raw) -> Result<(), ConfigError> {
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(Some(n), format!("expected `key = value`, got `{line}`")))?;
        let k = canonical_key(k.trim());
        if !KEYS.contains(&k) {
            return Err(err(Some(n), format!("unknown key `{k}`")));
        }
        if let Some((_, Some(prev))) = raw.get(k) {
            return Err(err(Some(n), format!("`{k}` already set on line {prev}")));
        }
        raw.insert(k.to_string(), (v.trim().to_string(), Some(n)));
    }
    Ok(())
}

/// Parses a config file.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    parse_config_with_overrides(text, &[])
}

/// Parses a config file, then applies `key=value` overrides (which may replace
/// keys set in the file).
pub fn parse_config_with_overrides(text: &str, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let mut raw = Raw::new();
    read_lines(text, &mut raw)?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| err(None, format!("override `{o}` is not key=value")))?;
        let k = canonical_key(k.trim());
        if !KEYS.contains(&k) {
            return Err(err(None, format!("unknown override key `{k}`")));
        }
        raw.insert(k.to_string(), (v.trim().to_string(), None));
    }
    build(&raw)
}

fn get<'a>(raw: &'a Raw, key: &str) -> Option<(&'a str, Option<usize>)> {
    raw.get(key).map(|(v, l)| (v.as_str(), *l))
}

fn parse_val<T: FromStr>(raw: &Raw, key: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    match get(raw, key) {
        None => Ok(None),
        Some((v, line)) => v
            .parse::<T>()
            .map(Some)
            .map_err(|e| err(line, format!("bad value `{v}` for `{key}`: {e}"))),
    }
}

fn required<'a>(raw: &'a Raw, key: &str) -> Result<(&'a str, Option<usize>), ConfigError> {
    match get(raw, key) {
        Some((v, line)) if v.is_empty() => Err(err(line, format!("`{key}` is empty"))),
        Some(x) => Ok(x),
        None => Err(err(None, format!("missing required key `{key}`"))),
    }
}

fn positive<T: PartialOrd + Default + fmt::Display + Copy>(
    raw: &Raw,
    key: &str,
    v: T,
) -> Result<T, ConfigError> {
    if v > T::default() {
        Ok(v)
    } else {
        Err(err(get(raw, key).and_then(|x| x.1), format!("`{key}` must be positive, got {v}")))
    }
}

fn build(raw: &Raw) -> Result<ExperimentConfig, ConfigError> {
    let (task_s, task_line) = required(raw, "task")?;
    let task: Task = task_s.parse().map_err(|e: String| err(task_line, e))?;
    let (opt_s, opt_line) = required(raw, "optimizer")?;
    let opt_name = opt_s.to_ascii_lowercase();
    let family: OptimizerKind = opt_name.parse().map_err(|e: nnopt::Error| err(opt_line, e.to_string()))?;
    let canonical = match family {
        OptimizerKind::Sgd => "sgd",
        OptimizerKind::ConjugateGradient(_) => "cg",
        OptimizerKind::Lbfgs { .. } => "lbfgs",
        OptimizerKind::LevenbergMarquardt => "lm",
    };
    let (lr0, bs0, mi0) = table_defaults(task, canonical);

    let lr = positive(raw, "lr", parse_val(raw, "lr")?.unwrap_or(lr0))?;
    let batch_size = positive(raw, "bs", parse_val(raw, "bs")?.unwrap_or(bs0))?;
    let mi = positive(raw, "mi", parse_val(raw, "mi")?.unwrap_or(mi0))?;
    let memory = positive(raw, "lbfgs_memory", parse_val(raw, "lbfgs_memory")?.unwrap_or(10usize))?;
    let rule = match get(raw, "beta_rule") {
        None => BetaRule::PolakRibiere,
        Some((v, line)) => v.parse().map_err(|e: nnopt::Error| err(line, e.to_string()))?,
    };
    let optimizer = match family {
        OptimizerKind::ConjugateGradient(_) => OptimizerKind::ConjugateGradient(rule),
        OptimizerKind::Lbfgs { .. } => OptimizerKind::Lbfgs {
            memory,
            max_line_search: mi,
        },
        other => other,
    };

    let arch = match get(raw, "arch") {
        None => task.default_arch(),
        Some((v, line)) => v
            .parse::<NetworkSpec>()
            .map_err(|e| err(line, format!("bad `arch`: {e}")))?,
    };
    let net = Network::new(arch.clone()).map_err(|e| err(get(raw, "arch").and_then(|x| x.1), e.to_string()))?;
    if optimizer == OptimizerKind::LevenbergMarquardt && net.param_count() > MAX_DENSE_PARAMS {
        return Err(err(
            get(raw, "arch").and_then(|x| x.1).or(opt_line),
            format!(
                "network has {} parameters; Levenberg–Marquardt needs <= {MAX_DENSE_PARAMS} (set a smaller `arch`)",
                net.param_count()
            ),
        ));
    }

    let path = |k: &str| get(raw, k).map(|(v, _)| PathBuf::from(v));
    let images = path("images");
    let labels = path("labels");
    let cifar: Vec<PathBuf> = get(raw, "cifar")
        .map(|(v, _)| v.split(',').map(|p| PathBuf::from(p.trim())).filter(|p| !p.as_os_str().is_empty()).collect())
        .unwrap_or_default();
    match task {
        Task::Mnist if images.is_none() || labels.is_none() => {
            return Err(err(task_line, "mnist needs both `images` and `labels` paths"));
        }
        Task::Cifar if cifar.is_empty() => {
            return Err(err(task_line, "cifar needs a `cifar` path (comma-separated batch files)"));
        }
        _ => {}
    }

    let subset_n = parse_val::<usize>(raw, "subset_n")?;
    if let Some(n) = subset_n {
        positive(raw, "subset_n", n)?;
    }
    let iterations = parse_val::<usize>(raw, "iterations")?;
    if let Some(n) = iterations {
        positive(raw, "iterations", n)?;
    }
    let gamma: f64 = parse_val(raw, "gamma")?.unwrap_or(0.99);
    if !(0.0..=1.0).contains(&gamma) {
        return Err(err(get(raw, "gamma").and_then(|x| x.1), "`gamma` must lie in [0, 1]"));
    }
    let eps_start: f64 = parse_val(raw, "eps_start")?.unwrap_or(1.0);
    let eps_end: f64 = parse_val(raw, "eps_end")?.unwrap_or(0.05);
    for (k, v) in [("eps_start", eps_start), ("eps_end", eps_end)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(err(get(raw, k).and_then(|x| x.1), format!("`{k}` must lie in [0, 1]")));
        }
    }

    Ok(ExperimentConfig {
        task,
        optimizer,
        lr,
        batch_size,
        epochs: positive(raw, "epochs", parse_val(raw, "epochs")?.unwrap_or(1usize))?,
        iterations,
        episodes: positive(raw, "episodes", parse_val(raw, "episodes")?.unwrap_or(100usize))?,
        subset_n,
        seed: parse_val(raw, "seed")?.unwrap_or(42),
        images,
        labels,
        cifar,
        out: path("out").unwrap_or_else(|| PathBuf::from(format!("runs/{}-{}", task.name(), optimizer.label()))),
        arch,
        lambda0: positive(raw, "lambda0", parse_val(raw, "lambda0")?.unwrap_or(nnopt::optimizers::lm::DEFAULT_LAMBDA))?,
        gamma,
        warmup: parse_val(raw, "warmup")?.unwrap_or(batch_size),
        buffer_capacity: positive(raw, "buffer_capacity", parse_val(raw, "buffer_capacity")?.unwrap_or(10_000usize))?,
        eps_start,
        eps_end,
        max_steps: positive(raw, "max_steps", parse_val(raw, "max_steps")?.unwrap_or(10_000usize))?,
    })
}

impl ExperimentConfig {
    /// Fully resolved config in the input format; parsing it yields `self`.
    pub fn to_config_text(&self) -> String {
        let mut lines = vec![
            format!("task = {}", self.task.name()),
            format!("optimizer = {}", match self.optimizer {
                OptimizerKind::Sgd => "sgd",
                OptimizerKind::ConjugateGradient(_) => "cg",
                OptimizerKind::Lbfgs { .. } => "lbfgs",
                OptimizerKind::LevenbergMarquardt => "lm",
            }),
        ];
        match self.optimizer {
            OptimizerKind::ConjugateGradient(rule) => lines.push(format!("beta_rule = {rule}")),
            OptimizerKind::Lbfgs {
                memory,
                max_line_search,
            } => {
                lines.push(format!("lbfgs_memory = {memory}"));
                lines.push(format!("mi = {max_line_search}"));
            }
            _ => {}
        }
        lines.push(format!("lr = {:e}", self.lr));
        lines.push(format!("bs = {}", self.batch_size));
        lines.push(format!("epochs = {}", self.epochs));
        if let Some(n) = self.iterations {
            lines.push(format!("iterations = {n}"));
        }
        lines.push(format!("episodes = {}", self.episodes));
        if let Some(n) = self.subset_n {
            lines.push(format!("subset_n = {n}"));
        }
        lines.push(format!("seed = {}", self.seed));
        if let Some(p) = &self.images {
            lines.push(format!("images = {}", p.display()));
        }
        if let Some(p) = &self.labels {
            lines.push(format!("labels = {}", p.display()));
        }
        if !self.cifar.is_empty() {
            let joined: Vec<String> = self.cifar.iter().map(|p| p.display().to_string()).collect();
            lines.push(format!("cifar = {}", joined.join(",")));
        }
        lines.push(format!("out = {}", self.out.display()));
        lines.push(format!("arch = {}", self.arch));
        lines.push(format!("lambda0 = {:e}", self.lambda0));
        lines.push(format!("gamma = {}", self.gamma));
        lines.push(format!("warmup = {}", self.warmup));
        lines.push(format!("buffer_capacity = {}", self.buffer_capacity));
        lines.push(format!("eps_start = {}", self.eps_start));
        lines.push(format!("eps_end = {}", self.eps_end));
        lines.push(format!("max_steps = {}", self.max_steps));
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }
}
