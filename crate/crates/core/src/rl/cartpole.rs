use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Tensor;

use super::{Environment, Step};

const GRAVITY: f64 = 9.8;
const MASS_CART: f64 = 1.0;
const MASS_POLE: f64 = 0.1;
const TOTAL_MASS: f64 = MASS_CART + MASS_POLE;
const HALF_LENGTH: f64 = 0.5;
const POLE_MASS_LENGTH: f64 = MASS_POLE * HALF_LENGTH;
const FORCE: f64 = 10.0;
const TAU: f64 = 0.02;

pub const X_LIMIT: f64 = 2.4;
pub const THETA_LIMIT: f64 = 12.0 * std::f64::consts::PI / 180.0;
pub const MAX_STEPS: usize = 500;

/// Cart-pole balancing with explicit Euler integration. Observation is
/// `[x, ẋ, θ, θ̇]`; action 0 pushes left, 1 pushes right; reward 1 per step.
#[derive(Debug, Clone, PartialEq)]
pub struct CartPoleEnv {
    state: [f64; 4],
    steps: usize,
    done: bool,
}

impl Default for CartPoleEnv {
    fn default() -> Self {
        Self::new()
    }
}

impl CartPoleEnv {
    pub fn new() -> Self {
        Self {
            state: [0.0; 4],
            steps: 0,
            done: false,
        }
    }

    pub fn state(&self) -> [f64; 4] {
        self.state
    }

    /// Starts an episode from an explicit state.
    pub fn set_state(&mut self, state: [f64; 4]) {
        self.state = state;
        self.steps = 0;
        self.done = false;
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    fn observation(&self) -> Tensor {
        Tensor::new(vec![4], self.state.to_vec()).expect("4-vector")
    }
}

impl Environment for CartPoleEnv {
    fn reset(&mut self, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
        self.set_state(state);
        self.observation()
    }

    fn step(&mut self, action: usize) -> Result<Step> {
        if self.done {
            return Err(Error::Contract("cartpole step after episode end".into()));
        }
        if action > 1 {
            return Err(Error::Index { index: action, bound: 2 });
        }
        let [x, x_dot, theta, theta_dot] = self.state;
        let force = if action == 1 { FORCE } else { -FORCE };
        let (sin, cos) = theta.sin_cos();
        let temp = (force + POLE_MASS_LENGTH * theta_dot * theta_dot * sin) / TOTAL_MASS;
        let theta_acc = (GRAVITY * sin - cos * temp)
            / (HALF_LENGTH * (4.0 / 3.0 - MASS_POLE * cos * cos / TOTAL_MASS));
        let x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos / TOTAL_MASS;
        self.state = [
            x + TAU * x_dot,
            x_dot + TAU * x_acc,
            theta + TAU * theta_dot,
            theta_dot + TAU * theta_acc,
        ];
        self.steps += 1;
        self.done = self.state[0].abs() > X_LIMIT
            || self.state[2].abs() > THETA_LIMIT
            || self.steps >= MAX_STEPS;
        Ok(Step {
            observation: self.observation(),
            reward: 1.0,
            done: self.done,
        })
    }

    fn action_count(&self) -> usize {
        2
    }

    fn observation_shape(&self) -> Vec<usize> {
        vec![4]
    }
}
