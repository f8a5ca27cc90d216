//! Batch objectives over a network: mean loss, mean gradient, and the stacked
//! residual/Jacobian system used by Levenberg–Marquardt.
//!
//! Work is split into fixed-size sample chunks that may run on any number of
//! threads; partial results are always combined in chunk order, so every value
//! here is bit-identical regardless of the thread pool size.

use std::hash::{Hash, Hasher};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{gram_accumulate, SpdMatrix, Tensor};
use crate::losses::{cross_entropy_sample, mse_sample, LossKind};
use crate::nn::Network;

/// Samples per reduction chunk. Part of the numeric contract: changing it
/// changes summation order.
pub const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    /// Class indices, one per sample.
    Labels(&'a [usize]),
    /// Regression targets, `outputs` values per sample.
    Values(&'a [f64]),
}

/// Borrowed minibatch: flat row-major inputs plus targets.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub inputs: &'a [f64],
    pub targets: Targets<'a>,
    len: usize,
}

impl<'a> Batch<'a> {
    pub fn labels(inputs: &'a [f64], labels: &'a [usize]) -> Self {
        Self {
            inputs,
            targets: Targets::Labels(labels),
            len: labels.len(),
        }
    }

    pub fn values(inputs: &'a [f64], values: &'a [f64], len: usize) -> Self {
        Self {
            inputs,
            targets: Targets::Values(values),
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub(crate) fn validate(&self, net: &Network) -> Result<()> {
        if self.len == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        if self.inputs.len() != self.len * net.input_len() {
            return Err(Error::Shape {
                op: "batch inputs",
                left: vec![self.len, net.input_len()],
                right: vec![self.inputs.len()],
            });
        }
        let k = net.output_len();
        match self.targets {
            Targets::Labels(labels) => {
                if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
                    return Err(Error::Index { index: bad, bound: k });
                }
            }
            Targets::Values(v) => {
                if v.len() != self.len * k {
                    return Err(Error::Shape {
                        op: "batch targets",
                        left: vec![self.len, k],
                        right: vec![v.len()],
                    });
                }
            }
        }
        Ok(())
    }

    fn input(&self, i: usize, in_len: usize) -> &'a [f64] {
        &self.inputs[i * in_len..(i + 1) * in_len]
    }

    /// Regression target of sample `i`; labels become one-hot vectors.
    pub(crate) fn target_into(&self, i: usize, out: &mut [f64]) {
        match self.targets {
            Targets::Labels(labels) => {
                out.fill(0.0);
                out[labels[i]] = 1.0;
            }
            Targets::Values(v) => out.copy_from_slice(&v[i * out.len()..(i + 1) * out.len()]),
        }
    }

    /// Stable hash of the batch contents, used to key cached linearizations.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.len.hash(&mut h);
        for v in self.inputs {
            v.to_bits().hash(&mut h);
        }
        match self.targets {
            Targets::Labels(l) => l.hash(&mut h),
            Targets::Values(v) => v.iter().for_each(|x| x.to_bits().hash(&mut h)),
        }
        h.finish()
    }
}

fn sample_loss(
    batch: &Batch<'_>,
    i: usize,
    kind: LossKind,
    y: &[f64],
    target: &mut [f64],
    grad: &mut [f64],
) -> Result<f64> {
    match (kind, batch.targets) {
        (LossKind::CrossEntropy, Targets::Labels(labels)) => cross_entropy_sample(y, labels[i], grad),
        (LossKind::CrossEntropy, Targets::Values(_)) => Err(Error::Contract(
            "cross-entropy needs class-label targets".into(),
        )),
        (LossKind::Mse, _) => {
            batch.target_into(i, target);
            Ok(mse_sample(y, target, grad))
        }
    }
}

fn chunk_ranges(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .step_by(CHUNK)
        .map(|s| (s, (s + CHUNK).min(n)))
        .collect()
}

/// Mean loss over the batch.
pub fn batch_loss(net: &Network, params: &[f64], batch: &Batch<'_>, kind: LossKind) -> Result<f64> {
    batch.validate(net)?;
    let in_len = net.input_len();
    let k = net.output_len();
    let partials: Vec<Result<f64>> = chunk_ranges(batch.len())
        .into_par_iter()
        .map(|(s, e)| {
            let mut target = vec![0.0; k];
            let mut g = vec![0.0; k];
            let mut acc = 0.0;
            for i in s..e {
                let (y, _) = net.forward_sample(params, batch.input(i, in_len));
                acc += sample_loss(batch, i, kind, &y, &mut target, &mut g)?;
            }
            Ok(acc)
        })
        .collect();
    let mut total = 0.0;
    for p in partials {
        total += p?;
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("batch loss"));
    }
    Ok(loss)
}

/// Mean loss and mean parameter gradient over the batch.
pub fn batch_loss_grad(
    net: &Network,
    params: &[f64],
    batch: &Batch<'_>,
    kind: LossKind,
) -> Result<(f64, Vec<f64>)> {
    batch.validate(net)?;
    let in_len = net.input_len();
    let k = net.output_len();
    let p = net.param_count();
    let partials: Vec<Result<(f64, Vec<f64>)>> = chunk_ranges(batch.len())
        .into_par_iter()
        .map(|(s, e)| {
            let mut target = vec![0.0; k];
            let mut out_grad = vec![0.0; k];
            let mut grad = vec![0.0; p];
            let mut acc = 0.0;
            for i in s..e {
                let (y, trace) = net.forward_sample(params, batch.input(i, in_len));
                acc += sample_loss(batch, i, kind, &y, &mut target, &mut out_grad)?;
                net.backward_sample(params, &trace, &out_grad, &mut grad);
            }
            Ok((acc, grad))
        })
        .collect();
    let mut total = 0.0;
    let mut grad = vec![0.0; p];
    for part in partials {
        let (l, g) = part?;
        total += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    let loss = total * scale;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("batch gradient"));
    }
    Ok((loss, grad))
}

/// Gauss–Newton quantities at one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    /// Stacked `d - y`.
    pub residuals: Vec<f64>,
    /// `Jᵀ J`
    pub normal: SpdMatrix,
    /// `Jᵀ (d - y)`
    pub gradient: Vec<f64>,
}

impl Linearization {
    pub fn from_jacobian(residuals: Vec<f64>, jacobian: &Tensor) -> Result<Self> {
        let [m, p] = match *jacobian.shape() {
            [m, p] => [m, p],
            _ => {
                return Err(Error::Contract("jacobian must be rank-2".into()));
            }
        };
        if residuals.len() != m {
            return Err(Error::Shape {
                op: "linearize",
                left: vec![m, p],
                right: vec![residuals.len()],
            });
        }
        let normal = SpdMatrix::gram(jacobian.data(), m, p)?;
        let mut gradient = vec![0.0; p];
        for (row, r) in jacobian.data().chunks_exact(p).zip(&residuals) {
            crate::linalg::axpy(*r, row, &mut gradient);
        }
        Ok(Self {
            residuals,
            normal,
            gradient,
        })
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.residuals.iter().map(|r| r * r).sum()
    }
}

/// A least-squares problem `min Σ (d - y(w))²` as seen by Levenberg–Marquardt.
pub trait ResidualModel {
    fn param_count(&self) -> usize;

    /// Stacked residuals `d - y(params)`.
    fn residuals(&self, params: &[f64]) -> Result<Vec<f64>>;

    /// `∂y/∂w`, one row per residual.
    fn jacobian(&self, params: &[f64]) -> Result<Tensor>;

    /// Divisor turning `Σ r²` into the reported loss (sample count for networks).
    fn loss_normalizer(&self) -> f64 {
        1.0
    }

    /// Identity of the data; `Some` enables reuse of a linearization across
    /// rejected steps at unchanged parameters.
    fn fingerprint(&self) -> Option<u64> {
        None
    }

    fn linearize(&self, params: &[f64]) -> Result<Linearization> {
        Linearization::from_jacobian(self.residuals(params)?, &self.jacobian(params)?)
    }
}

/// The network-on-a-batch least-squares problem. Class labels become one-hot
/// targets on the raw outputs.
pub struct NetworkResiduals<'a> {
    net: &'a Network,
    batch: Batch<'a>,
}

/// Chunks whose Jacobian blocks are held in memory at once before being folded
/// into `Jᵀ J` in order.
const WAVE: usize = 8;

impl<'a> NetworkResiduals<'a> {
    pub fn new(net: &'a Network, batch: Batch<'a>) -> Result<Self> {
        batch.validate(net)?;
        Ok(Self { net, batch })
    }

    fn chunk_rows(&self, params: &[f64], s: usize, e: usize) -> (Vec<f64>, Vec<f64>) {
        let (k, p, in_len) = (self.net.output_len(), self.net.param_count(), self.net.input_len());
        let mut jac = vec![0.0; (e - s) * k * p];
        let mut res = vec![0.0; (e - s) * k];
        let mut target = vec![0.0; k];
        for (j, i) in (s..e).enumerate() {
            let y = self.net.jacobian_sample_into(
                params,
                self.batch.input(i, in_len),
                &mut jac[j * k * p..(j + 1) * k * p],
            );
            self.batch.target_into(i, &mut target);
            for ((r, d), yv) in res[j * k..(j + 1) * k].iter_mut().zip(&target).zip(&y) {
                *r = d - yv;
            }
        }
        (jac, res)
    }
}

impl ResidualModel for NetworkResiduals<'_> {
    fn param_count(&self) -> usize {
        self.net.param_count()
    }

    fn residuals(&self, params: &[f64]) -> Result<Vec<f64>> {
        let in_len = self.net.input_len();
        let k = self.net.output_len();
        let parts: Vec<Vec<f64>> = chunk_ranges(self.batch.len())
            .into_par_iter()
            .map(|(s, e)| {
                let mut target = vec![0.0; k];
                let mut out = Vec::with_capacity((e - s) * k);
                for i in s..e {
                    let (y, _) = self.net.forward_sample(params, self.batch.input(i, in_len));
                    self.batch.target_into(i, &mut target);
                    out.extend(target.iter().zip(&y).map(|(d, y)| d - y));
                }
                out
            })
            .collect();
        let r = parts.concat();
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("residuals"));
        }
        Ok(r)
    }

    fn jacobian(&self, params: &[f64]) -> Result<Tensor> {
        let (k, p) = (self.net.output_len(), self.net.param_count());
        let parts: Vec<Vec<f64>> = chunk_ranges(self.batch.len())
            .into_par_iter()
            .map(|(s, e)| self.chunk_rows(params, s, e).0)
            .collect();
        Tensor::new(vec![self.batch.len() * k, p], parts.concat())
    }

    fn loss_normalizer(&self) -> f64 {
        self.batch.len() as f64
    }

    fn fingerprint(&self) -> Option<u64> {
        Some(self.batch.fingerprint())
    }

    /// Streams Jacobian blocks chunk by chunk so the full `m x p` matrix is never stored.
    fn linearize(&self, params: &[f64]) -> Result<Linearization> {
        let p = self.net.param_count();
        let ranges = chunk_ranges(self.batch.len());
        let mut normal = vec![0.0; p * p];
        let mut gradient = vec![0.0; p];
        let mut residuals = Vec::with_capacity(self.batch.len() * self.net.output_len());
        for wave in ranges.chunks(WAVE) {
            let blocks: Vec<(Vec<f64>, Vec<f64>)> = wave
                .par_iter()
                .map(|&(s, e)| self.chunk_rows(params, s, e))
                .collect();
            for (jac, res) in blocks {
                gram_accumulate(&jac, res.len(), p, &mut normal);
                for (row, r) in jac.chunks_exact(p).zip(&res) {
                    crate::linalg::axpy(*r, row, &mut gradient);
                }
                residuals.extend_from_slice(&res);
            }
        }
        if residuals.iter().chain(&gradient).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("linearization"));
        }
        Ok(Linearization {
            residuals,
            normal: SpdMatrix::from_gram_unchecked(p, normal),
            gradient,
        })
    }
}
