//! Nonlinear conjugate gradient with the four classic β rules.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::dot_unchecked;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BetaRule {
    FletcherReeves,
    PolakRibiere,
    HestenesStiefel,
    DaiYuan,
}

impl BetaRule {
    pub const ALL: [BetaRule; 4] = [
        BetaRule::FletcherReeves,
        BetaRule::PolakRibiere,
        BetaRule::HestenesStiefel,
        BetaRule::DaiYuan,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            BetaRule::FletcherReeves => "fr",
            BetaRule::PolakRibiere => "pr",
            BetaRule::HestenesStiefel => "hs",
            BetaRule::DaiYuan => "dy",
        }
    }
}

impl fmt::Display for BetaRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for BetaRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fr" | "fletcher-reeves" => Ok(BetaRule::FletcherReeves),
            "pr" | "polak-ribiere" => Ok(BetaRule::PolakRibiere),
            "hs" | "hestenes-stiefel" => Ok(BetaRule::HestenesStiefel),
            "dy" | "dai-yuan" => Ok(BetaRule::DaiYuan),
            other => Err(Error::Format(format!("unknown beta rule `{other}`"))),
        }
    }
}

const DEGENERATE: f64 = 1e-30;

/// β for the current gradient given the previous gradient and direction.
///
/// Degenerate denominators and negative values both yield 0 (a restart).
pub fn compute_beta(rule: BetaRule, grad: &[f64], prev_grad: &[f64], prev_dir: &[f64]) -> f64 {
    let diff: Vec<f64> = grad.iter().zip(prev_grad).map(|(a, b)| a - b).collect();
    let (num, den) = match rule {
        BetaRule::FletcherReeves => (dot_unchecked(grad, grad), dot_unchecked(prev_grad, prev_grad)),
        BetaRule::PolakRibiere => (dot_unchecked(grad, &diff), dot_unchecked(prev_grad, prev_grad)),
        BetaRule::HestenesStiefel => (dot_unchecked(grad, &diff), dot_unchecked(prev_dir, &diff)),
        BetaRule::DaiYuan => (dot_unchecked(grad, grad), dot_unchecked(prev_dir, &diff)),
    };
    if den.abs() < DEGENERATE {
        return 0.0;
    }
    let beta = num / den;
    if beta.is_finite() {
        beta.max(0.0)
    } else {
        0.0
    }
}

/// Previous gradient and direction; empty before the first step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CgState {
    pub prev_grad: Vec<f64>,
    pub prev_direction: Vec<f64>,
    since_restart: usize,
}

impl CgState {
    pub fn new() -> Self {
        Self::default()
    }

    /// `-grad + β · prev_direction`, recording the new gradient and direction.
    ///
    /// The first call, and every call after `grad.len()` iterations without a
    /// restart, uses β = 0.
    pub fn next_direction(&mut self, grad: &[f64], rule: BetaRule) -> Vec<f64> {
        let fresh = self.prev_grad.len() != grad.len() || self.since_restart >= grad.len();
        let beta = if fresh {
            0.0
        } else {
            compute_beta(rule, grad, &self.prev_grad, &self.prev_direction)
        };
        let direction: Vec<f64> = if beta == 0.0 {
            grad.iter().map(|g| -g).collect()
        } else {
            grad.iter()
                .zip(&self.prev_direction)
                .map(|(g, d)| -g + beta * d)
                .collect()
        };
        self.since_restart = if beta == 0.0 { 1 } else { self.since_restart + 1 };
        self.prev_grad = grad.to_vec();
        self.prev_direction = direction.clone();
        direction
    }
}

/// `params + lr · Δw` with `Δw = -grad + β Δw_prev`.
pub fn cg_step(
    state: &mut CgState,
    params: &[f64],
    grad: &[f64],
    lr: f64,
    rule: BetaRule,
) -> Result<Vec<f64>> {
    if params.len() != grad.len() {
        return Err(Error::Shape {
            op: "cg_step",
            left: vec![params.len()],
            right: vec![grad.len()],
        });
    }
    if !(lr > 0.0) {
        return Err(Error::Contract(format!("learning rate must be positive, got {lr}")));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    let d = state.next_direction(grad, rule);
    Ok(params.iter().zip(&d).map(|(w, d)| w + lr * d).collect())
}
