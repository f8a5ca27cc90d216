use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::nn::{Network, NetworkState};
use crate::optimizers::{batch_loss, Batch, Optimizer};

use super::{Environment, ReplayBuffer, Transition};

/// Bellman target: `r` at terminal states, else `r + γ max q_next`.
pub fn q_target(reward: f64, done: bool, q_next: &[f64], gamma: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&gamma), "gamma out of [0, 1]");
    if done {
        reward
    } else {
        reward + gamma * q_next.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Index of the first maximum.
pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    best
}

pub fn select_action(q: &[f64], epsilon: f64, rng: &mut ChaCha8Rng) -> usize {
    if rng.random::<f64>() < epsilon {
        rng.random_range(0..q.len())
    } else {
        argmax(q)
    }
}

/// Linear decay from `start` to `end` over the first half of `total` episodes.
pub fn epsilon_schedule(episode: usize, total: usize, start: f64, end: f64) -> f64 {
    let horizon = (total as f64 * 0.5).max(1.0);
    let t = (episode as f64 / horizon).min(1.0);
    start + (end - start) * t
}

/// Flat inputs and regression targets for a sampled batch. Targets equal the
/// current prediction except at the taken action, so only that output carries
/// loss.
pub fn dqn_targets(
    net: &Network,
    params: &[f64],
    batch: &[Transition],
    gamma: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = net.output_len();
    let mut inputs = Vec::with_capacity(batch.len() * net.input_len());
    let mut targets = Vec::with_capacity(batch.len() * k);
    for t in batch {
        if t.a >= k {
            return Err(Error::Index { index: t.a, bound: k });
        }
        let (mut q, _) = net.forward_sample(params, t.s.data());
        let q_next = if t.done {
            Vec::new()
        } else {
            net.forward_sample(params, t.s_next.data()).0
        };
        q[t.a] = q_target(t.r, t.done, &q_next, gamma);
        inputs.extend_from_slice(t.s.data());
        targets.extend_from_slice(&q);
    }
    Ok((inputs, targets))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DqnConfig {
    pub gamma: f64,
    pub batch_size: usize,
    pub lr: f64,
    /// Transitions stored before the first update.
    pub warmup: usize,
    pub buffer_capacity: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Episodes planned for the run; sets the exploration schedule.
    pub total_episodes: usize,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            batch_size: 32,
            lr: 1e-3,
            warmup: 100,
            buffer_capacity: 10_000,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            total_episodes: 200,
        }
    }
}

/// Per-episode summary. Update statistics are `None` when no update ran.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub steps: usize,
    pub updates: usize,
    pub epsilon: f64,
    pub episode_return: f64,
    /// Mean Q of the chosen actions.
    pub mean_q: f64,
    pub loss_before: Option<f64>,
    pub loss_after: Option<f64>,
    /// Mean optimizer-step time.
    pub wall_time_ms: Option<f64>,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    pub all_accepted: Option<bool>,
    pub failure: Option<String>,
}

pub struct DqnTrainer<E: Environment> {
    pub env: E,
    pub model: NetworkState,
    pub optimizer: Optimizer,
    pub buffer: ReplayBuffer,
    pub config: DqnConfig,
    rng: ChaCha8Rng,
    episode: usize,
    failed: bool,
}

impl<E: Environment> DqnTrainer<E> {
    pub fn new(env: E, model: NetworkState, optimizer: Optimizer, config: DqnConfig, seed: u64) -> Result<Self> {
        if model.network().input_len() != env.observation_shape().iter().product::<usize>() {
            return Err(Error::Contract("network input does not match the observation".into()));
        }
        if model.network().output_len() != env.action_count() {
            return Err(Error::Contract("network output does not match the action count".into()));
        }
        if config.batch_size == 0 || !(config.lr > 0.0) || !(0.0..=1.0).contains(&config.gamma) {
            return Err(Error::Contract(format!("invalid DQN config {config:?}")));
        }
        let mut buffer_seed = ChaCha8Rng::seed_from_u64(seed);
        buffer_seed.set_stream(1);
        Ok(Self {
            env,
            model,
            optimizer,
            buffer: ReplayBuffer::new(config.buffer_capacity, buffer_seed.random())?,
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            episode: 0,
            failed: false,
        })
    }

    pub fn episodes_run(&self) -> usize {
        self.episode
    }

    /// Plays one episode, updating after every step once the buffer is warm.
    /// A non-finite loss ends the episode early with `failure` set, and the
    /// trainer refuses further episodes.
    pub fn run_episode(&mut self) -> Result<EpisodeMetrics> {
        if self.failed {
            return Err(Error::Contract("trainer stopped after a numeric failure".into()));
        }
        let cfg = self.config;
        let epsilon = epsilon_schedule(self.episode, cfg.total_episodes, cfg.epsilon_start, cfg.epsilon_end);
        let mut m = EpisodeMetrics {
            episode: self.episode,
            steps: 0,
            updates: 0,
            epsilon,
            episode_return: 0.0,
            mean_q: 0.0,
            loss_before: None,
            loss_after: None,
            wall_time_ms: None,
            lambda: None,
            alpha: None,
            all_accepted: None,
            failure: None,
        };
        self.episode += 1;
        let (mut sum_before, mut sum_after, mut sum_ms, mut q_sum) = (0.0, 0.0, 0.0, 0.0);
        let mut accepted = true;

        let mut s = Arc::new(self.env.reset(self.rng.random()));
        loop {
            let (q, _) = self.model.network().forward_sample(self.model.params(), s.data());
            let a = select_action(&q, epsilon, &mut self.rng);
            q_sum += q[a];
            let step = self.env.step(a)?;
            m.steps += 1;
            m.episode_return += step.reward;
            let s_next = Arc::new(step.observation);
            self.buffer.push(Transition {
                s: Arc::clone(&s),
                a,
                r: step.reward,
                s_next: Arc::clone(&s_next),
                done: step.done,
            });

            if self.buffer.len() >= cfg.warmup.max(1) {
                let sample = self.buffer.sample(cfg.batch_size)?;
                let net = Arc::clone(self.model.network());
                let (inputs, targets) = dqn_targets(&net, self.model.params(), &sample, cfg.gamma)?;
                let batch = Batch::values(&inputs, &targets, sample.len());
                let t0 = Instant::now();
                let outcome = self.optimizer.step(&mut self.model, &batch, LossKind::Mse, cfg.lr);
                sum_ms += t0.elapsed().as_secs_f64() * 1e3;
                let rep = match outcome {
                    Ok(r) => r,
                    Err(Error::NonFinite(what)) => {
                        m.failure = Some(format!("non-finite {what} at step {}", m.steps));
                        break;
                    }
                    Err(e) => return Err(e),
                };
                let after = match rep.loss_after {
                    Some(l) => l,
                    None => batch_loss(&net, self.model.params(), &batch, LossKind::Mse)?,
                };
                if !rep.loss_before.is_finite() || !after.is_finite() {
                    m.failure = Some(format!("non-finite loss at step {}", m.steps));
                    break;
                }
                m.updates += 1;
                sum_before += rep.loss_before;
                sum_after += after;
                accepted &= rep.accepted;
                m.lambda = rep.lambda.or(m.lambda);
                m.alpha = rep.alpha.or(m.alpha);
            }
            s = s_next;
            if step.done {
                break;
            }
        }

        m.mean_q = q_sum / m.steps.max(1) as f64;
        if m.updates > 0 {
            let n = m.updates as f64;
            m.loss_before = Some(sum_before / n);
            m.loss_after = Some(sum_after / n);
            m.wall_time_ms = Some(sum_ms / n);
            m.all_accepted = Some(accepted);
        }
        if m.failure.is_some() {
            self.failed = true;
        }
        Ok(m)
    }
}
