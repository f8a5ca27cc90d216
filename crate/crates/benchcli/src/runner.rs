//! Runs one experiment and writes `metrics.csv`, `run.json` and `curves.svg`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nnopt::data::{batches, load_cifar10_bin, load_mnist_idx, Dataset};
use nnopt::linalg::Tensor;
use nnopt::losses::LossKind;
use nnopt::nn::NetworkState;
use nnopt::optimizers::{batch_loss, effective_loss, Batch, Optimizer};
use nnopt::rl::{CartPoleEnv, DqnConfig, DqnTrainer, Environment, EpisodeMetrics, FlappyEnv};
use serde_json::json;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, Task};
use crate::svg;

pub const CSV_HEADER: &str = "iter,loss_before,loss_after,wall_time_ms,lambda,alpha,accepted,episode_return,mean_q";
pub const CSV_SCHEMA: &str = "metrics-v1";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Core(#[from] nnopt::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("report: {0}")]
    Report(String),
}

impl RunError {
    /// Process exit code: 1 for configuration problems, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 1,
            _ => 2,
        }
    }
}

/// One CSV row. Optional fields print as blanks.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub iter: usize,
    pub loss_before: Option<f64>,
    pub loss_after: Option<f64>,
    pub wall_time_ms: Option<f64>,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    pub accepted: Option<bool>,
    pub episode_return: Option<f64>,
    pub mean_q: Option<f64>,
    /// Marks the row written when a run aborts on a non-finite value.
    pub failed: bool,
}

impl MetricsRecord {
    fn blank(iter: usize) -> Self {
        Self {
            iter,
            loss_before: None,
            loss_after: None,
            wall_time_ms: None,
            lambda: None,
            alpha: None,
            accepted: None,
            episode_return: None,
            mean_q: None,
            failed: false,
        }
    }

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        let accepted = if self.failed {
            "failed".to_string()
        } else {
            self.accepted.map(|a| a.to_string()).unwrap_or_default()
        };
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iter,
            f(self.loss_before),
            f(self.loss_after),
            self.wall_time_ms.map(|x| format!("{x:.6}")).unwrap_or_default(),
            f(self.lambda),
            f(self.alpha),
            accepted,
            f(self.episode_return),
            f(self.mean_q),
        )
    }

    pub fn from_csv(line: &str) -> Option<Self> {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 9 {
            return None;
        }
        let f = |s: &str| if s.is_empty() { Some(None) } else { s.parse::<f64>().ok().map(Some) };
        let failed = cols[6] == "failed";
        Some(Self {
            iter: cols[0].parse().ok()?,
            loss_before: f(cols[1])?,
            loss_after: f(cols[2])?,
            wall_time_ms: f(cols[3])?,
            lambda: f(cols[4])?,
            alpha: f(cols[5])?,
            accepted: match cols[6] {
                "" | "failed" => None,
                s => Some(s.parse().ok()?),
            },
            episode_return: f(cols[7])?,
            mean_q: f(cols[8])?,
            failed,
        })
    }
}

#[derive(Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub records: Vec<MetricsRecord>,
}

struct Sink {
    csv: BufWriter<File>,
    records: Vec<MetricsRecord>,
}

impl Sink {
    fn push(&mut self, r: MetricsRecord) -> std::io::Result<()> {
        writeln!(self.csv, "{}", r.to_csv())?;
        self.records.push(r);
        Ok(())
    }
}

/// Runs the experiment described by `config`, writing into `config.out`.
/// `config_text` is stored verbatim in `run.json`.
pub fn run_experiment(config: &ExperimentConfig, config_text: &str) -> Result<RunOutput, RunError> {
    fs::create_dir_all(&config.out)?;
    let mut csv = BufWriter::new(File::create(config.out.join("metrics.csv"))?);
    writeln!(csv, "{CSV_HEADER}")?;
    let mut sink = Sink {
        csv,
        records: Vec::new(),
    };
    let started = Instant::now();
    let result = match config.task {
        Task::Mnist | Task::Cifar => run_classification(config, &mut sink),
        Task::Cartpole => run_rl(config, CartPoleEnv::new(), &mut sink),
        Task::Flappy => run_rl(config, FlappyEnv::new(config.max_steps), &mut sink),
    };
    sink.csv.flush()?;
    let status = match &result {
        Ok(()) => "ok".to_string(),
        Err(e) => format!("failed: {e}"),
    };
    write_run_json(config, config_text, &status, started.elapsed().as_secs_f64())?;
    write_curves(config, &sink.records)?;
    result.map(|()| RunOutput {
        dir: config.out.clone(),
        records: sink.records,
    })
}

fn load_dataset(config: &ExperimentConfig) -> Result<Dataset, RunError> {
    let full = match config.task {
        Task::Mnist => load_mnist_idx(
            config.images.as_ref().expect("validated"),
            config.labels.as_ref().expect("validated"),
        )?,
        Task::Cifar => {
            let mut parts = config.cifar.iter().map(load_cifar10_bin);
            let first = parts.next().expect("validated")?;
            let mut images = first.images().data().to_vec();
            let mut labels = first.labels().to_vec();
            for p in parts {
                let p = p?;
                images.extend_from_slice(p.images().data());
                labels.extend_from_slice(p.labels());
            }
            let n = labels.len();
            Dataset::new("cifar10", Tensor::new(vec![n, 3, 32, 32], images)?, labels)?
        }
        _ => unreachable!("classification tasks only"),
    };
    Ok(match config.subset_n {
        Some(n) => full.subset(n, config.seed),
        None => full,
    })
}

fn run_classification(config: &ExperimentConfig, sink: &mut Sink) -> Result<(), RunError> {
    let data = load_dataset(config)?;
    let mut model = NetworkState::init(config.arch.clone(), config.seed)?;
    if model.network().input_shape() != data.sample_shape() {
        return Err(RunError::Config(ConfigError {
            line: None,
            msg: format!(
                "arch input {:?} does not match the data {:?}",
                model.network().input_shape(),
                data.sample_shape()
            ),
        }));
    }
    let mut optimizer = Optimizer::with_lambda(config.optimizer, config.lambda0)?;
    let loss = effective_loss(config.optimizer, LossKind::CrossEntropy);
    let full_batch = config.optimizer == nnopt::OptimizerKind::LevenbergMarquardt;
    let net = Arc::clone(model.network());

    let mut iter = 0usize;
    let mut epoch = 0u64;
    loop {
        let order = if full_batch {
            vec![(0..data.len()).collect::<Vec<_>>()]
        } else {
            batches(&data, config.batch_size, config.seed, epoch)?
        };
        for idx in order {
            if config.iterations.is_some_and(|n| iter >= n) {
                return Ok(());
            }
            iter += 1;
            let (inputs, labels) = data.gather(&idx);
            let batch = Batch::labels(&inputs, &labels);
            let t0 = Instant::now();
            let outcome = optimizer.step(&mut model, &batch, loss, config.lr);
            let ms = t0.elapsed().as_secs_f64() * 1e3;
            let rep = match outcome {
                Ok(r) => r,
                Err(nnopt::Error::NonFinite(what)) => return fail(sink, iter, format!("non-finite {what}")),
                Err(e) => return Err(e.into()),
            };
            // Untimed: the loss after the step is bookkeeping, not part of the step.
            let after = match rep.loss_after {
                Some(l) => l,
                None => match batch_loss(&net, model.params(), &batch, loss) {
                    Ok(l) => l,
                    Err(nnopt::Error::NonFinite(_)) => f64::NAN,
                    Err(e) => return Err(e.into()),
                },
            };
            if !rep.loss_before.is_finite() || !after.is_finite() {
                return fail(sink, iter, "non-finite loss".into());
            }
            sink.push(MetricsRecord {
                loss_before: Some(rep.loss_before),
                loss_after: Some(after),
                wall_time_ms: Some(ms),
                lambda: rep.lambda,
                alpha: rep.alpha,
                accepted: Some(rep.accepted),
                ..MetricsRecord::blank(iter)
            })?;
        }
        epoch += 1;
        if config.iterations.is_none() && epoch as usize >= config.epochs {
            return Ok(());
        }
    }
}

fn fail(sink: &mut Sink, iter: usize, msg: String) -> Result<(), RunError> {
    sink.push(MetricsRecord {
        failed: true,
        ..MetricsRecord::blank(iter)
    })?;
    sink.csv.flush()?;
    Err(RunError::Numeric(format!("iteration {iter}: {msg}")))
}

fn episode_record(m: &EpisodeMetrics) -> MetricsRecord {
    MetricsRecord {
        loss_before: m.loss_before,
        loss_after: m.loss_after,
        wall_time_ms: m.wall_time_ms,
        lambda: m.lambda,
        alpha: m.alpha,
        accepted: m.all_accepted,
        episode_return: Some(m.episode_return),
        mean_q: Some(m.mean_q),
        ..MetricsRecord::blank(m.episode + 1)
    }
}

fn run_rl<E: Environment>(config: &ExperimentConfig, env: E, sink: &mut Sink) -> Result<(), RunError> {
    let model = NetworkState::init(config.arch.clone(), config.seed)?;
    let optimizer = Optimizer::with_lambda(config.optimizer, config.lambda0)?;
    let dqn = DqnConfig {
        gamma: config.gamma,
        batch_size: config.batch_size,
        lr: config.lr,
        warmup: config.warmup,
        buffer_capacity: config.buffer_capacity,
        epsilon_start: config.eps_start,
        epsilon_end: config.eps_end,
        total_episodes: config.episodes,
    };
    let mut trainer = DqnTrainer::new(env, model, optimizer, dqn, config.seed).map_err(|e| match e {
        nnopt::Error::Contract(msg) => RunError::Config(ConfigError { line: None, msg }),
        other => other.into(),
    })?;
    for _ in 0..config.episodes {
        let m = match trainer.run_episode() {
            Ok(m) => m,
            Err(nnopt::Error::NonFinite(what)) => {
                return fail(sink, trainer.episodes_run() + 1, format!("non-finite {what}"));
            }
            Err(e) => return Err(e.into()),
        };
        if let Some(f) = &m.failure {
            let iter = m.episode + 1;
            return fail(sink, iter, f.clone());
        }
        sink.push(episode_record(&m))?;
    }
    Ok(())
}

fn write_run_json(config: &ExperimentConfig, config_text: &str, status: &str, seconds: f64) -> Result<(), RunError> {
    let doc = json!({
        "schema": CSV_SCHEMA,
        "status": status,
        "task": config.task.name(),
        "optimizer": config.optimizer.label(),
        "seed": config.seed,
        "resolved_config": config.to_config_text(),
        "config_text": config_text,
        "elapsed_s": seconds,
        "environment": {
            "package_version": env!("CARGO_PKG_VERSION"),
            "os": std::env::consts::OS,
            "arch": std::env::consts::ARCH,
            "threads": rayon::current_num_threads(),
            "available_parallelism": std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        },
    });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| RunError::Report(e.to_string()))?;
    fs::write(config.out.join("run.json"), text + "\n")?;
    Ok(())
}

fn write_curves(config: &ExperimentConfig, records: &[MetricsRecord]) -> Result<(), RunError> {
    let pick = |f: fn(&MetricsRecord) -> Option<f64>| -> Vec<(f64, f64)> {
        records.iter().filter_map(|r| f(r).map(|y| (r.iter as f64, y))).collect()
    };
    let mut series = vec![
        ("loss_before".to_string(), pick(|r| r.loss_before)),
        ("loss_after".to_string(), pick(|r| r.loss_after)),
    ];
    if config.task.is_rl() {
        series.push(("episode_return".to_string(), pick(|r| r.episode_return)));
    }
    let x_label = if config.task.is_rl() { "episode" } else { "iteration" };
    let title = format!("{} / {}", config.task.name(), config.optimizer.label());
    fs::write(config.out.join("curves.svg"), svg::line_chart(&title, x_label, "value", &series))?;
    Ok(())
}

/// Reads the records of a finished run directory.
pub fn read_metrics(dir: &Path) -> Result<Vec<MetricsRecord>, RunError> {
    let path = dir.join("metrics.csv");
    let text = fs::read_to_string(&path)
        .map_err(|e| RunError::Report(format!("run {}: cannot read metrics.csv: {e}", dir.display())))?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(RunError::Report(format!("run {}: unexpected metrics.csv header", dir.display())));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            MetricsRecord::from_csv(l)
                .ok_or_else(|| RunError::Report(format!("run {}: bad metrics row {}", dir.display(), i + 2)))
        })
        .collect()
}
