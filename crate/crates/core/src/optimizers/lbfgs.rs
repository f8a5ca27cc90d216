//! Limited-memory BFGS: secant-pair history, two-loop recursion, and a capped
//! Armijo backtracking line search.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::linalg::{dot_unchecked, norm2};

/// Ring of secant pairs `(s, y)`; every stored pair has `sᵀy > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsState {
    memory: usize,
    history: VecDeque<(Vec<f64>, Vec<f64>)>,
    /// Completed optimizer steps.
    pub step: usize,
}

impl LbfgsState {
    pub fn new(memory: usize) -> Result<Self> {
        if memory == 0 {
            return Err(Error::Contract("L-BFGS memory must be >= 1".into()));
        }
        Ok(Self {
            memory,
            history: VecDeque::with_capacity(memory),
            step: 0,
        })
    }

    pub fn memory(&self) -> usize {
        self.memory
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.history.iter().map(|(s, y)| (s.as_slice(), y.as_slice()))
    }

    pub fn clear(&mut self) {
        self.history.clear();
    }

    /// Stores `(s, y)` if `sᵀy > 1e-10 ‖s‖ ‖y‖`, evicting the oldest pair beyond
    /// capacity. Returns whether the pair was stored.
    pub fn update(&mut self, s: Vec<f64>, y: Vec<f64>) -> Result<bool> {
        if s.len() != y.len() {
            return Err(Error::Shape {
                op: "bfgs_update",
                left: vec![s.len()],
                right: vec![y.len()],
            });
        }
        let sy = dot_unchecked(&s, &y);
        if !(sy > 1e-10 * norm2(&s) * norm2(&y)) || !sy.is_finite() {
            return Ok(false);
        }
        if self.history.len() == self.memory {
            self.history.pop_front();
        }
        self.history.push_back((s, y));
        Ok(true)
    }

    /// `H v` for the implied inverse-Hessian approximation (two-loop recursion,
    /// initial scaling `sᵀy / yᵀy` from the newest pair).
    pub fn apply_inverse_hessian(&self, v: &[f64]) -> Vec<f64> {
        let mut q = v.to_vec();
        let mut alphas = Vec::with_capacity(self.history.len());
        for (s, y) in self.history.iter().rev() {
            let rho = 1.0 / dot_unchecked(y, s);
            let a = rho * dot_unchecked(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push((a, rho));
        }
        if let Some((s, y)) = self.history.back() {
            let gamma = dot_unchecked(s, y) / dot_unchecked(y, y);
            q.iter_mut().for_each(|qi| *qi *= gamma);
        }
        for ((s, y), (a, rho)) in self.history.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot_unchecked(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        q
    }

    /// Quasi-Newton search direction `-H grad`.
    pub fn direction(&self, grad: &[f64]) -> Vec<f64> {
        self.apply_inverse_hessian(grad).into_iter().map(|v| -v).collect()
    }
}

/// Armijo sufficient-decrease constant.
pub const ARMIJO_C: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearch {
    /// Accepted step length, or the last one tried when nothing was accepted.
    pub alpha: f64,
    pub accepted: bool,
    /// Loss at the accepted point; `None` when rejected.
    pub loss: Option<f64>,
    pub evaluations: usize,
}

/// Backtracking from `lr0`, halving up to `max_iter` trials, accepting the first
/// α with `L(w + α d) <= L(w) + c α gᵀd`. Non-finite trial losses count as rejections.
pub fn line_search<F>(
    mut evaluate: F,
    params: &[f64],
    direction: &[f64],
    grad: &[f64],
    loss0: f64,
    lr0: f64,
    max_iter: usize,
) -> Result<LineSearch>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if max_iter == 0 {
        return Err(Error::Contract("line search needs max_iter >= 1".into()));
    }
    let slope = dot_unchecked(grad, direction);
    if !(slope < 0.0) {
        return Err(Error::Contract(format!(
            "line search direction is not a descent direction (gᵀd = {slope:e})"
        )));
    }
    let mut alpha = lr0;
    let mut trial = vec![0.0; params.len()];
    for k in 0..max_iter {
        if k > 0 {
            alpha *= 0.5;
        }
        for ((t, w), d) in trial.iter_mut().zip(params).zip(direction) {
            *t = w + alpha * d;
        }
        let loss = match evaluate(&trial) {
            Ok(l) if l.is_finite() => l,
            Ok(_) | Err(Error::NonFinite(_)) => continue,
            Err(e) => return Err(e),
        };
        if loss <= loss0 + ARMIJO_C * alpha * slope {
            return Ok(LineSearch {
                alpha,
                accepted: true,
                loss: Some(loss),
                evaluations: k + 1,
            });
        }
    }
    Ok(LineSearch {
        alpha,
        accepted: false,
        loss: None,
        evaluations: max_iter,
    })
}
