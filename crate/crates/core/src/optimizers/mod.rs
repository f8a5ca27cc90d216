//! The four stepping algorithms behind one dispatch point.
//!
//! SGD, CG and L-BFGS consume the batch-mean gradient of the configured loss.
//! Levenberg–Marquardt always works on squared residuals (class labels become
//! one-hot regression targets) and uses its damping factor in place of a
//! learning rate.

pub mod cg;
pub mod lbfgs;
pub mod lm;
pub mod objective;
pub mod sgd;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::nn::NetworkState;

pub use cg::{cg_step, compute_beta, BetaRule, CgState};
pub use lbfgs::{line_search, LbfgsState, LineSearch};
pub use lm::{lm_step, LmReport, LmState};
pub use objective::{batch_loss, batch_loss_grad, Batch, Linearization, NetworkResiduals, ResidualModel, Targets};
pub use sgd::sgd_step;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Sgd,
    ConjugateGradient(BetaRule),
    Lbfgs { memory: usize, max_line_search: usize },
    LevenbergMarquardt,
}

impl OptimizerKind {
    /// Short label used in file names and reports, e.g. `cg-pr`.
    pub fn label(&self) -> String {
        match self {
            OptimizerKind::Sgd => "sgd".into(),
            OptimizerKind::ConjugateGradient(rule) => format!("cg-{rule}"),
            OptimizerKind::Lbfgs { .. } => "lbfgs".into(),
            OptimizerKind::LevenbergMarquardt => "lm".into(),
        }
    }

    fn validate(&self) -> Result<()> {
        if let OptimizerKind::Lbfgs {
            memory,
            max_line_search,
        } = *self
        {
            if memory == 0 || max_line_search == 0 {
                return Err(Error::Contract(
                    "L-BFGS memory and max_line_search must be >= 1".into(),
                ));
            }
        }
        Ok(())
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Parses the optimizer family name only; CG rule and L-BFGS sizes get defaults.
impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "cg" | "conjgrad" => Ok(OptimizerKind::ConjugateGradient(BetaRule::PolakRibiere)),
            "lbfgs" | "l-bfgs" => Ok(OptimizerKind::Lbfgs {
                memory: 10,
                max_line_search: 10,
            }),
            "lm" | "levenberg-marquardt" => Ok(OptimizerKind::LevenbergMarquardt),
            other => Err(Error::Format(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
enum State {
    Sgd,
    Cg(CgState),
    Lbfgs(LbfgsState),
    Lm(LmState),
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss_before: f64,
    /// Loss of the resulting parameters on the same batch, when the step
    /// computed it anyway (L-BFGS and LM).
    pub loss_after: Option<f64>,
    pub accepted: bool,
    /// Damping used by the solve (LM only).
    pub lambda: Option<f64>,
    /// Step length (L-BFGS only).
    pub alpha: Option<f64>,
    pub lambda_saturated: bool,
}

/// An optimizer algorithm with its persistent state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    state: State,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Result<Self> {
        Self::with_lambda(kind, lm::DEFAULT_LAMBDA)
    }

    /// Like [`Optimizer::new`], with an explicit initial LM damping.
    pub fn with_lambda(kind: OptimizerKind, lambda0: f64) -> Result<Self> {
        kind.validate()?;
        let state = match kind {
            OptimizerKind::Sgd => State::Sgd,
            OptimizerKind::ConjugateGradient(_) => State::Cg(CgState::new()),
            OptimizerKind::Lbfgs { memory, .. } => State::Lbfgs(LbfgsState::new(memory)?),
            OptimizerKind::LevenbergMarquardt => State::Lm(LmState::new(lambda0)),
        };
        Ok(Self { kind, state })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lm_state(&self) -> Option<&LmState> {
        match &self.state {
            State::Lm(s) => Some(s),
            _ => None,
        }
    }

    pub fn lbfgs_state(&self) -> Option<&LbfgsState> {
        match &self.state {
            State::Lbfgs(s) => Some(s),
            _ => None,
        }
    }

    /// Advances `model` by one step on `batch`. On a rejected step the model is
    /// left untouched.
    pub fn step(
        &mut self,
        model: &mut NetworkState,
        batch: &Batch<'_>,
        loss: LossKind,
        lr: f64,
    ) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::Contract("optimizer step on an empty batch".into()));
        }
        let net = model.network().clone();
        match (&mut self.state, self.kind) {
            (State::Sgd, _) => {
                let (l, g) = batch_loss_grad(&net, model.params(), batch, loss)?;
                let next = sgd_step(model.params(), &g, lr)?;
                model.set_params(next)?;
                Ok(StepReport::plain(l))
            }
            (State::Cg(state), OptimizerKind::ConjugateGradient(rule)) => {
                let (l, g) = batch_loss_grad(&net, model.params(), batch, loss)?;
                let next = cg_step(state, model.params(), &g, lr, rule)?;
                model.set_params(next)?;
                Ok(StepReport::plain(l))
            }
            (
                State::Lbfgs(state),
                OptimizerKind::Lbfgs {
                    max_line_search, ..
                },
            ) => {
                if !(lr > 0.0) {
                    return Err(Error::Contract(format!("learning rate must be positive, got {lr}")));
                }
                let params = model.params().to_vec();
                let (l0, g0) = batch_loss_grad(&net, &params, batch, loss)?;
                let mut direction = state.direction(&g0);
                if !(crate::linalg::dot_unchecked(&direction, &g0) < 0.0) {
                    // Zero gradient, or a history that lost positive curvature.
                    if g0.iter().all(|&g| g == 0.0) {
                        state.step += 1;
                        return Ok(StepReport {
                            loss_after: Some(l0),
                            ..StepReport::plain(l0)
                        });
                    }
                    state.clear();
                    direction = g0.iter().map(|g| -g).collect();
                }
                let ls = line_search(
                    |w| batch_loss(&net, w, batch, loss),
                    &params,
                    &direction,
                    &g0,
                    l0,
                    lr,
                    max_line_search,
                )?;
                state.step += 1;
                if !ls.accepted {
                    return Ok(StepReport {
                        loss_before: l0,
                        loss_after: Some(l0),
                        accepted: false,
                        lambda: None,
                        alpha: Some(ls.alpha),
                        lambda_saturated: false,
                    });
                }
                let next: Vec<f64> = params
                    .iter()
                    .zip(&direction)
                    .map(|(w, d)| w + ls.alpha * d)
                    .collect();
                // Curvature pair measured on the same batch.
                let (_, g1) = batch_loss_grad(&net, &next, batch, loss)?;
                let s: Vec<f64> = next.iter().zip(&params).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = g1.iter().zip(&g0).map(|(a, b)| a - b).collect();
                state.update(s, y)?;
                model.set_params(next)?;
                Ok(StepReport {
                    loss_before: l0,
                    loss_after: ls.loss,
                    accepted: true,
                    lambda: None,
                    alpha: Some(ls.alpha),
                    lambda_saturated: false,
                })
            }
            (State::Lm(state), OptimizerKind::LevenbergMarquardt) => {
                let problem = NetworkResiduals::new(&net, *batch)?;
                let (next, rep) = lm_step(state, &problem, model.params())?;
                if rep.accepted {
                    model.set_params(next)?;
                }
                Ok(StepReport {
                    loss_before: rep.loss_before,
                    loss_after: Some(rep.loss_after),
                    accepted: rep.accepted,
                    lambda: Some(rep.lambda_used),
                    alpha: None,
                    lambda_saturated: rep.saturated,
                })
            }
            _ => unreachable!("optimizer state always matches its kind"),
        }
    }
}

impl StepReport {
    fn plain(loss_before: f64) -> Self {
        Self {
            loss_before,
            loss_after: None,
            accepted: true,
            lambda: None,
            alpha: None,
            lambda_saturated: false,
        }
    }
}

/// Loss kind an optimizer actually minimizes for a task whose natural loss is `task_loss`.
pub fn effective_loss(kind: OptimizerKind, task_loss: LossKind) -> LossKind {
    match kind {
        OptimizerKind::LevenbergMarquardt => LossKind::Mse,
        _ => task_loss,
    }
}
