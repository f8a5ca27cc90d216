//! Levenberg–Marquardt with multiplicative damping updates.
//!
//! One call solves `(JᵀJ + λI) Δ = Jᵀ(d - y)` and keeps `w + Δ` only if the
//! sum of squared residuals drops. Accepting divides λ by `lambda_down`,
//! rejecting multiplies it by `lambda_up`.

use crate::error::{Error, Result};
use crate::linalg::cholesky_solve;

use super::objective::{Linearization, ResidualModel};

pub const LAMBDA_MIN: f64 = 1e-12;
pub const LAMBDA_MAX: f64 = 1e12;
pub const DEFAULT_LAMBDA: f64 = 1e-3;

/// Upper bound on parameters for the dense `p x p` normal matrix (~1.2 GB at the limit).
pub const MAX_DENSE_PARAMS: usize = 12_000;

#[derive(Debug, Clone)]
struct Cached {
    params: Vec<f64>,
    data: u64,
    lin: Linearization,
}

#[derive(Debug, Clone)]
pub struct LmState {
    pub lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub last_loss: Option<f64>,
    cache: Option<Cached>,
}

impl Default for LmState {
    fn default() -> Self {
        Self::new(DEFAULT_LAMBDA)
    }
}

impl LmState {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda: lambda.clamp(LAMBDA_MIN, LAMBDA_MAX),
            lambda_up: 10.0,
            lambda_down: 10.0,
            last_loss: None,
            cache: None,
        }
    }

    fn set_lambda(&mut self, target: f64) -> bool {
        self.lambda = target.clamp(LAMBDA_MIN, LAMBDA_MAX);
        self.lambda != target
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmReport {
    pub loss_before: f64,
    /// Loss of the returned parameters (equal to `loss_before` on rejection).
    pub loss_after: f64,
    /// Loss at the trial point, when one was evaluated.
    pub trial_loss: Option<f64>,
    /// Damping used for this step's solve.
    pub lambda_used: f64,
    /// Damping carried into the next step.
    pub lambda_next: f64,
    pub accepted: bool,
    /// The damped system was not positive definite.
    pub singular: bool,
    /// λ hit a clamp bound.
    pub saturated: bool,
}

/// One damped Gauss–Newton step. Returns the (possibly unchanged) parameters.
pub fn lm_step<M: ResidualModel + ?Sized>(
    state: &mut LmState,
    model: &M,
    params: &[f64],
) -> Result<(Vec<f64>, LmReport)> {
    let p = model.param_count();
    if params.len() != p {
        return Err(Error::Shape {
            op: "lm_step",
            left: vec![p],
            right: vec![params.len()],
        });
    }
    if p > MAX_DENSE_PARAMS {
        return Err(Error::Contract(format!(
            "{p} parameters exceed the dense Levenberg–Marquardt limit of {MAX_DENSE_PARAMS}"
        )));
    }
    let key = model.fingerprint();
    let reuse = matches!((&state.cache, key), (Some(c), Some(k)) if c.data == k && c.params == params);
    if !reuse {
        let lin = model.linearize(params)?;
        state.cache = Some(Cached {
            params: params.to_vec(),
            data: key.unwrap_or(0),
            lin,
        });
    }
    let lin = &state.cache.as_ref().expect("cache populated above").lin;
    let norm = model.loss_normalizer();
    let loss_before = lin.sum_of_squares() / norm;
    let lambda_used = state.lambda;

    let damped = lin.normal.with_added_diagonal(lambda_used);
    let delta = match cholesky_solve(&damped, &lin.gradient) {
        Ok(d) => Some(d),
        Err(Error::NotPositiveDefinite { .. }) | Err(Error::NonFinite(_)) => None,
        Err(e) => return Err(e),
    };

    let (new_params, trial_loss, accepted) = match &delta {
        None => (params.to_vec(), None, false),
        Some(d) => {
            let trial: Vec<f64> = params.iter().zip(d).map(|(w, dw)| w + dw).collect();
            let trial_loss = match model.residuals(&trial) {
                Ok(r) => Some(r.iter().map(|v| v * v).sum::<f64>() / norm),
                Err(Error::NonFinite(_)) => None,
                Err(e) => return Err(e),
            };
            let exact_fit = loss_before == 0.0 && d.iter().all(|&v| v == 0.0);
            match trial_loss {
                Some(l) if l.is_finite() && (l < loss_before || exact_fit) => (trial, Some(l), true),
                other => (params.to_vec(), other, false),
            }
        }
    };

    let saturated = if accepted {
        state.cache = None;
        state.set_lambda(lambda_used / state.lambda_down)
    } else {
        state.set_lambda(lambda_used * state.lambda_up)
    };
    let loss_after = if accepted {
        trial_loss.expect("accepted steps have a finite trial loss")
    } else {
        loss_before
    };
    state.last_loss = Some(loss_after);
    Ok((
        new_params,
        LmReport {
            loss_before,
            loss_after,
            trial_loss,
            lambda_used,
            lambda_next: state.lambda,
            accepted,
            singular: delta.is_none(),
            saturated,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Tensor;

    /// y_i = w · x_i, a scalar linear model.
    struct Line {
        xs: Vec<f64>,
        ds: Vec<f64>,
    }

    impl ResidualModel for Line {
        fn param_count(&self) -> usize {
            1
        }
        fn residuals(&self, w: &[f64]) -> Result<Vec<f64>> {
            Ok(self.xs.iter().zip(&self.ds).map(|(x, d)| d - w[0] * x).collect())
        }
        fn jacobian(&self, _w: &[f64]) -> Result<Tensor> {
            Tensor::new(vec![self.xs.len(), 1], self.xs.clone())
        }
    }

    #[test]
    fn hand_step_accepts_and_lowers_lambda() {
        let m = Line { xs: vec![1.0], ds: vec![2.0] };
        let mut st = LmState::new(1.0);
        let (w, rep) = lm_step(&mut st, &m, &[0.0]).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-14);
        assert_eq!(rep.loss_before, 4.0);
        assert!((rep.loss_after - 1.0).abs() < 1e-14);
        assert!(rep.accepted);
        assert!((st.lambda - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_residual_is_accepted_without_moving() {
        let m = Line { xs: vec![1.0, 2.0], ds: vec![3.0, 6.0] };
        let mut st = LmState::new(1e-3);
        let (w, rep) = lm_step(&mut st, &m, &[3.0]).unwrap();
        assert_eq!(w, vec![3.0]);
        assert!(rep.accepted);
        assert_eq!(rep.loss_after, 0.0);
    }

    #[test]
    fn large_lambda_approaches_scaled_gradient() {
        let m = Line { xs: vec![1.0, -2.0, 0.5], ds: vec![0.3, 1.0, -2.0] };
        let w0 = [0.2];
        let lin = m.linearize(&w0).unwrap();
        let mut st = LmState::new(1e8);
        let (w, _) = lm_step(&mut st, &m, &w0).unwrap();
        let got = w[0] - w0[0];
        let expect = lin.gradient[0] / 1e8;
        assert!(((got - expect) / expect).abs() < 0.01);
    }

    #[test]
    fn rejection_raises_lambda_and_keeps_params() {
        // y = w² + 1 with d = 0, already at its minimum; any move is worse.
        struct Bowl;
        impl ResidualModel for Bowl {
            fn param_count(&self) -> usize {
                1
            }
            fn residuals(&self, w: &[f64]) -> Result<Vec<f64>> {
                Ok(vec![-(w[0] * w[0]) - 1.0])
            }
            fn jacobian(&self, w: &[f64]) -> Result<Tensor> {
                // deliberately wrong sign so the solve points uphill
                Tensor::new(vec![1, 1], vec![-2.0 * w[0] - 1.0])
            }
        }
        let mut st = LmState::new(1.0);
        let (w, rep) = lm_step(&mut st, &Bowl, &[0.0]).unwrap();
        assert!(!rep.accepted);
        assert_eq!(w, vec![0.0]);
        assert_eq!(st.lambda, 10.0);
    }

    #[test]
    fn lambda_clamps_and_reports_saturation() {
        let m = Line { xs: vec![1.0], ds: vec![2.0] };
        let mut st = LmState::new(1e-12);
        let (_, rep) = lm_step(&mut st, &m, &[0.0]).unwrap();
        assert!(rep.accepted);
        assert!(rep.saturated);
        assert_eq!(st.lambda, LAMBDA_MIN);
    }

    struct Banana;

    impl ResidualModel for Banana {
        fn param_count(&self) -> usize {
            2
        }
        fn residuals(&self, w: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![10.0 * (w[1] - w[0] * w[0]), 1.0 - w[0]])
        }
        fn jacobian(&self, w: &[f64]) -> Result<Tensor> {
            Tensor::new(vec![2, 2], vec![20.0 * w[0], -10.0, 1.0, 0.0])
        }
    }

    proptest::proptest! {
        #[test]
        fn steps_follow_the_damping_rule(
            x in -3.0f64..3.0,
            y in -3.0f64..3.0,
            exp in -9i32..3,
            steps in 1usize..20,
        ) {
            let mut st = LmState::new(10f64.powi(exp));
            let mut w = vec![x, y];
            for _ in 0..steps {
                let (next, rep) = lm_step(&mut st, &Banana, &w).unwrap();
                if rep.accepted {
                    proptest::prop_assert!(rep.loss_after < rep.loss_before || rep.loss_before == 0.0);
                    proptest::prop_assert!(rep.saturated || rep.lambda_next == rep.lambda_used / 10.0);
                } else {
                    proptest::prop_assert_eq!(&next, &w);
                    proptest::prop_assert_eq!(rep.loss_after, rep.loss_before);
                    proptest::prop_assert!(rep.saturated || rep.lambda_next == rep.lambda_used * 10.0);
                }
                w = next;
            }
        }
    }
}
