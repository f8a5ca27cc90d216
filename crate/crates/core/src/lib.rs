//! Neural-network training from first principles, with four interchangeable
//! optimizers: stochastic gradient descent, nonlinear conjugate gradient,
//! limited-memory BFGS and Levenberg–Marquardt.
//!
//! - [`linalg`]: tensors, products, Cholesky solves.
//! - [`nn`]: conv/pool/dense/ReLU networks, gradients and per-sample Jacobians.
//! - [`losses`]: mean squared error and softmax cross-entropy.
//! - [`optimizers`]: the steppers and the batch objectives they consume.
//! - [`rl`]: CartPole, a small FlappyBird clone, replay buffer, deep Q-learning.
//! - [`data`]: MNIST IDX and CIFAR-10 binary readers, batching.

pub mod data;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod nn;
pub mod optimizers;
pub mod rl;

pub use error::{Error, Result};
pub use linalg::Tensor;
pub use losses::LossKind;
pub use nn::{LayerSpec, Network, NetworkSpec, NetworkState};
pub use optimizers::{Batch, BetaRule, Optimizer, OptimizerKind, StepReport};
