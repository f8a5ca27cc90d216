//! Shared oracles for the integration tests. Each check returns raw numbers;
//! the caller decides the threshold.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use nnopt::linalg::Tensor;
use nnopt::losses::LossKind;
use nnopt::nn::{LayerSpec, Network, NetworkSpec, NetworkState};
use nnopt::optimizers::lm::{lm_step, LmState};
use nnopt::optimizers::{batch_loss, batch_loss_grad, Batch, BetaRule, CgState, ResidualModel};
use nnopt::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so that gradients at round-off
/// level are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// A small random architecture. Even indices are image networks exercising
/// conv, pool, relu, flatten and dense; odd ones are plain MLPs.
pub fn random_spec(rng: &mut ChaCha8Rng, index: usize) -> NetworkSpec {
    let classes = rng.random_range(2..5);
    if index % 2 == 1 {
        let mut layers = Vec::new();
        for _ in 0..rng.random_range(1..3) {
            layers.push(LayerSpec::dense(rng.random_range(2..7)));
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::dense(classes));
        return NetworkSpec::new(vec![rng.random_range(2..6)], layers);
    }
    let c = rng.random_range(1..3);
    let side = rng.random_range(7..11);
    let mut layers = vec![
        LayerSpec::conv(rng.random_range(1..4), rng.random_range(2..4), rng.random_range(1..3)),
        LayerSpec::Relu,
    ];
    if rng.random_bool(0.5) {
        layers.push(LayerSpec::MaxPool2d { window: 2, stride: 2 });
    } else {
        layers.push(LayerSpec::conv(rng.random_range(1..3), 2, 1));
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::MaxPool2d { window: 2, stride: 1 });
    }
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::dense(rng.random_range(3..7)));
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::dense(classes));
    NetworkSpec::new(vec![c, side, side], layers)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradStats {
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates whose ±h perturbation crossed a ReLU or pooling kink.
    pub skipped: usize,
}

impl GradStats {
    pub fn merge(&mut self, o: GradStats) {
        self.max_rel = self.max_rel.max(o.max_rel);
        self.checked += o.checked;
        self.skipped += o.skipped;
    }
}

fn pattern(state: &NetworkState, inputs: &Tensor) -> Vec<u32> {
    let (_, trace) = state.forward(inputs).unwrap();
    trace.activation_pattern(state.network())
}

/// Backward-pass gradient of the mean batch loss against central differences.
pub fn gradient_check(spec: &NetworkSpec, seed: u64, kind: LossKind) -> GradStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::new(spec.clone()).unwrap();
    let mut params = net.init_params(seed);
    // Nonzero biases so ReLU boundaries are not aligned with zero inputs.
    for slot in net.layout() {
        for b in &mut params[slot.bias_offset()..slot.offset + slot.len()] {
            *b = rng.random_range(-0.1..0.1);
        }
    }
    let n = 3;
    let k = net.output_len();
    let inputs: Vec<f64> = (0..n * net.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let values: Vec<f64> = (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let batch = match kind {
        LossKind::CrossEntropy => Batch::labels(&inputs, &labels),
        LossKind::Mse => Batch::values(&inputs, &values, n),
    };
    let (_, grad) = batch_loss_grad(&net, &params, &batch, kind).unwrap();

    let mut shape = net.input_shape().to_vec();
    shape.insert(0, n);
    let x = Tensor::new(shape, inputs.clone()).unwrap();
    let arc = std::sync::Arc::new(net);
    let base = pattern(&NetworkState::with_params(arc.clone(), params.clone()).unwrap(), &x);

    let mut stats = GradStats::default();
    for i in 0..params.len() {
        let mut wp = params.clone();
        wp[i] += FD_STEP;
        let mut wm = params.clone();
        wm[i] -= FD_STEP;
        let same = |w: &Vec<f64>| pattern(&NetworkState::with_params(arc.clone(), w.clone()).unwrap(), &x) == base;
        if !same(&wp) || !same(&wm) {
            stats.skipped += 1;
            continue;
        }
        let fp = batch_loss(&arc, &wp, &batch, kind).unwrap();
        let fm = batch_loss(&arc, &wm, &batch, kind).unwrap();
        let fd = (fp - fm) / (2.0 * FD_STEP);
        let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(REL_FLOOR);
        stats.max_rel = stats.max_rel.max(rel);
        stats.checked += 1;
    }
    stats
}

/// Runs the gradient check over `count` random networks for both losses.
pub fn gradient_sweep(count: usize, seed: u64) -> GradStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = GradStats::default();
    for i in 0..count {
        let spec = random_spec(&mut rng, i);
        for kind in [LossKind::Mse, LossKind::CrossEntropy] {
            total.merge(gradient_check(&spec, seed.wrapping_mul(31).wrapping_add(i as u64), kind));
        }
    }
    total
}

pub fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    m.transpose() * &m / n as f64 + DMatrix::identity(n, n)
}

/// CG with exact line search on `½xᵀAx - bᵀx` from the origin; returns the
/// gradient norm after each iteration.
pub fn cg_exact_quadratic(a: &DMatrix<f64>, b: &DVector<f64>, rule: BetaRule, iters: usize) -> Vec<f64> {
    let n = b.len();
    let mut x = DVector::zeros(n);
    let mut state = CgState::new();
    let mut norms = Vec::new();
    for _ in 0..iters {
        let g = a * &x - b;
        let d = DVector::from_vec(state.next_direction(g.as_slice(), rule));
        let curvature = d.dot(&(a * &d));
        if curvature <= 0.0 {
            break;
        }
        x += &d * (-g.dot(&d) / curvature);
        norms.push((a * &x - b).norm());
    }
    norms
}

/// `y = X w`, residuals `d - X w`.
pub struct LinearModel {
    pub x: DMatrix<f64>,
    pub d: DVector<f64>,
}

impl ResidualModel for LinearModel {
    fn param_count(&self) -> usize {
        self.x.ncols()
    }

    fn residuals(&self, w: &[f64]) -> Result<Vec<f64>> {
        Ok((&self.d - &self.x * DVector::from_column_slice(w)).as_slice().to_vec())
    }

    fn jacobian(&self, _w: &[f64]) -> Result<Tensor> {
        let (m, p) = self.x.shape();
        Tensor::new(vec![m, p], (0..m * p).map(|i| self.x[(i / p, i % p)]).collect())
    }
}

/// Distance between one LM step (λ₀ = 1e-9, from zero) and the least-squares
/// solution computed by SVD, plus whether the step was accepted. Models have
/// `m >= 2p` rows: the damping bias is about `λ/σ_min²` relative, so square
/// draws with σ_min near 1e-3 would measure conditioning rather than the step.
pub fn lm_linear_oracle(rng: &mut ChaCha8Rng) -> (f64, bool) {
    let p = rng.random_range(1..=20);
    let m = rng.random_range(2 * p..=100);
    let x = DMatrix::from_fn(m, p, |_, _| rng.random_range(-1.0..1.0));
    let d = DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0));
    let oracle = x.clone().svd(true, true).solve(&d, 1e-14).unwrap();
    let model = LinearModel { x, d };
    let mut state = LmState::new(1e-9);
    let (w, rep) = lm_step(&mut state, &model, &vec![0.0; p]).unwrap();
    let err = w.iter().zip(oracle.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    (err, rep.accepted)
}

/// Rosenbrock as least squares: `r = [10(w₂ - w₁²), 1 - w₁]`.
pub struct Rosenbrock;

impl ResidualModel for Rosenbrock {
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

#[derive(Debug, Default)]
pub struct DampingAudit {
    pub steps: usize,
    pub rejected: usize,
    /// Violations of: rejection multiplies λ by 10 and keeps parameters.
    pub bad_rejections: usize,
    /// Violations of: accepted losses strictly decrease.
    pub bad_acceptances: usize,
    pub final_loss: f64,
}

pub fn lm_damping_audit(start: [f64; 2], lambda0: f64, steps: usize) -> DampingAudit {
    let mut state = LmState::new(lambda0);
    let mut w = start.to_vec();
    let mut audit = DampingAudit::default();
    let mut last_accepted = f64::INFINITY;
    for _ in 0..steps {
        let (next, rep) = lm_step(&mut state, &Rosenbrock, &w).unwrap();
        audit.steps += 1;
        if rep.accepted {
            if !(rep.loss_after < last_accepted) && rep.loss_after != 0.0 {
                audit.bad_acceptances += 1;
            }
            last_accepted = rep.loss_after;
        } else {
            audit.rejected += 1;
            let ok_lambda = rep.saturated || (rep.lambda_next - 10.0 * rep.lambda_used).abs() <= 1e-12 * rep.lambda_next;
            if next != w || !ok_lambda {
                audit.bad_rejections += 1;
            }
        }
        w = next;
        audit.final_loss = rep.loss_after;
    }
    audit
}
