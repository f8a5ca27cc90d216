//! Deep Q-learning: two environments, a replay buffer and the episode loop.

mod cartpole;
mod dqn;
mod flappy;
mod replay;

pub use cartpole::CartPoleEnv;
pub use dqn::{
    argmax, dqn_targets, epsilon_schedule, q_target, select_action, DqnConfig, DqnTrainer, EpisodeMetrics,
};
pub use flappy::{write_pgm, FlappyEnv, Pipe};
pub use replay::{ReplayBuffer, Transition};

use crate::error::Result;
use crate::linalg::Tensor;

/// Result of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub observation: Tensor,
    pub reward: f64,
    pub done: bool,
}

pub trait Environment {
    /// Starts a new episode; all randomness of the episode derives from `seed`.
    fn reset(&mut self, seed: u64) -> Tensor;

    /// Errors with a contract violation once the episode is done.
    fn step(&mut self, action: usize) -> Result<Step>;

    fn action_count(&self) -> usize;

    fn observation_shape(&self) -> Vec<usize>;
}
