//! Layered feed-forward and convolutional networks with reverse-mode gradients.
//!
//! All parameters live in one flat vector. For every parameterized layer, in layer
//! order, the weights come first (row-major) followed by the biases. Optimizers
//! only ever see that flat vector.
//!
//! Single samples are processed on the hot path; batches are a leading dimension
//! of the input tensor and gradients are summed in sample order.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    /// Valid (unpadded) convolution over a `[channels, height, width]` input.
    Conv2d {
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
    },
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    /// Fully connected layer over a rank-1 input.
    Dense {
        out_features: usize,
    },
    Relu,
    Flatten,
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec::Conv2d {
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
        }
    }

    pub fn dense(out_features: usize) -> Self {
        LayerSpec::Dense { out_features }
    }

    fn validate(&self, index: usize) -> Result<()> {
        let ok = match *self {
            LayerSpec::Conv2d {
                out_channels,
                kernel_h,
                kernel_w,
                stride,
            } => out_channels >= 1 && kernel_h >= 1 && kernel_w >= 1 && stride >= 1,
            LayerSpec::MaxPool2d { window, stride } => window >= 1 && stride >= 1,
            LayerSpec::Dense { out_features } => out_features >= 1,
            LayerSpec::Relu | LayerSpec::Flatten => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::LayerShape {
                layer: index,
                msg: format!("size parameters must be >= 1 in {self}"),
            })
        }
    }

    fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let fail = |msg: String| Error::LayerShape { layer: index, msg };
        match *self {
            LayerSpec::Conv2d {
                out_channels,
                kernel_h,
                kernel_w,
                stride,
            } => {
                let [_, h, w] = rank3(input).ok_or_else(|| {
                    fail(format!("conv expects [c, h, w] input, got {input:?}"))
                })?;
                if kernel_h > h || kernel_w > w {
                    return Err(fail(format!(
                        "kernel {kernel_h}x{kernel_w} exceeds input {h}x{w}"
                    )));
                }
                Ok(vec![
                    out_channels,
                    (h - kernel_h) / stride + 1,
                    (w - kernel_w) / stride + 1,
                ])
            }
            LayerSpec::MaxPool2d { window, stride } => {
                let [c, h, w] = rank3(input).ok_or_else(|| {
                    fail(format!("max-pool expects [c, h, w] input, got {input:?}"))
                })?;
                if window > h || window > w {
                    return Err(fail(format!("pool window {window} exceeds input {h}x{w}")));
                }
                Ok(vec![c, (h - window) / stride + 1, (w - window) / stride + 1])
            }
            LayerSpec::Dense { out_features } => {
                if input.len() != 1 {
                    return Err(fail(format!(
                        "dense expects a rank-1 input (add a flatten layer), got {input:?}"
                    )));
                }
                Ok(vec![out_features])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// `(weight_shape, bias_len)` for parameterized layers.
    fn param_shape(&self, input: &[usize]) -> Option<(Vec<usize>, usize)> {
        match *self {
            LayerSpec::Conv2d {
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => Some((
                vec![out_channels, input[0], kernel_h, kernel_w],
                out_channels,
            )),
            LayerSpec::Dense { out_features } => Some((vec![out_features, input[0]], out_features)),
            _ => None,
        }
    }
}

fn rank3(shape: &[usize]) -> Option<[usize; 3]> {
    match *shape {
        [c, h, w] => Some([c, h, w]),
        _ => None,
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv2d {
                out_channels,
                kernel_h,
                kernel_w,
                stride,
            } => write!(f, "conv({out_channels},{kernel_h}x{kernel_w},s{stride})"),
            LayerSpec::MaxPool2d { window, stride } => write!(f, "pool({window},s{stride})"),
            LayerSpec::Dense { out_features } => write!(f, "dense({out_features})"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::Flatten => f.write_str("flatten"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Format(format!("unrecognized layer `{s}`"));
        let args = |body: &str| -> Vec<String> {
            body.trim_end_matches(')')
                .split(',')
                .map(|a| a.trim().to_string())
                .collect()
        };
        let num = |a: &str| a.trim_start_matches('s').parse::<usize>().map_err(|_| bad());
        if s == "relu" {
            return Ok(LayerSpec::Relu);
        }
        if s == "flatten" {
            return Ok(LayerSpec::Flatten);
        }
        if let Some(body) = s.strip_prefix("dense(") {
            let a = args(body);
            return match a.as_slice() {
                [n] => Ok(LayerSpec::dense(num(n)?)),
                _ => Err(bad()),
            };
        }
        if let Some(body) = s.strip_prefix("pool(") {
            let a = args(body);
            return match a.as_slice() {
                [w, st] => Ok(LayerSpec::MaxPool2d {
                    window: num(w)?,
                    stride: num(st)?,
                }),
                _ => Err(bad()),
            };
        }
        if let Some(body) = s.strip_prefix("conv(") {
            let a = args(body);
            return match a.as_slice() {
                [c, k, st] => {
                    let (kh, kw) = k.split_once('x').ok_or_else(bad)?;
                    Ok(LayerSpec::Conv2d {
                        out_channels: num(c)?,
                        kernel_h: num(kh)?,
                        kernel_w: num(kw)?,
                        stride: num(st)?,
                    })
                }
                _ => Err(bad()),
            };
        }
        Err(bad())
    }
}

/// Input shape plus ordered layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        Self {
            input_shape,
            layers,
        }
    }
}

/// Text form: `1x28x28 | conv(4,5x5,s2) relu pool(2,s2) flatten dense(10)`.
impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.input_shape.iter().map(usize::to_string).collect();
        write!(f, "{} |", dims.join("x"))?;
        for l in &self.layers {
            write!(f, " {l}")?;
        }
        Ok(())
    }
}

impl FromStr for NetworkSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (input, layers) = s
            .split_once('|')
            .ok_or_else(|| Error::Format(format!("missing `|` in network spec `{s}`")))?;
        let input_shape = input
            .trim()
            .split('x')
            .map(|d| {
                d.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad input dimension `{d}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let layers = layers
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            input_shape,
            layers,
        })
    }
}

/// Output shape of every layer, in order. Conv and pool outputs are `floor((in - k) / s) + 1`.
pub fn infer_shapes(spec: &NetworkSpec) -> Result<Vec<Vec<usize>>> {
    if spec.input_shape.is_empty() || spec.input_shape.contains(&0) {
        return Err(Error::Contract(format!(
            "input shape must be non-empty and positive, got {:?}",
            spec.input_shape
        )));
    }
    let mut shapes = Vec::with_capacity(spec.layers.len());
    let mut current = spec.input_shape.clone();
    for (i, layer) in spec.layers.iter().enumerate() {
        layer.validate(i)?;
        current = layer.output_shape(i, &current)?;
        if current.contains(&0) {
            return Err(Error::LayerShape {
                layer: i,
                msg: format!("non-positive output shape {current:?}"),
            });
        }
        shapes.push(current.clone());
    }
    Ok(shapes)
}

/// Location of one layer's parameters inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub layer: usize,
    pub offset: usize,
    pub weight_shape: Vec<usize>,
    pub bias_len: usize,
}

impl ParamSlot {
    pub fn weight_len(&self) -> usize {
        self.weight_shape.iter().product()
    }

    pub fn len(&self) -> usize {
        self.weight_len() + self.bias_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bias_offset(&self) -> usize {
        self.offset + self.weight_len()
    }
}

/// Validated topology with precomputed shapes and parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    /// `shapes[0]` is the input shape, `shapes[i + 1]` the output of layer `i`.
    shapes: Vec<Vec<usize>>,
    slots: Vec<Option<ParamSlot>>,
    param_count: usize,
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        let outputs = infer_shapes(&spec)?;
        let mut shapes = vec![spec.input_shape.clone()];
        shapes.extend(outputs);
        let mut slots = Vec::with_capacity(spec.layers.len());
        let mut offset = 0;
        for (i, layer) in spec.layers.iter().enumerate() {
            let slot = layer
                .param_shape(&shapes[i])
                .map(|(weight_shape, bias_len)| ParamSlot {
                    layer: i,
                    offset,
                    weight_shape,
                    bias_len,
                });
            if let Some(s) = &slot {
                offset += s.len();
            }
            slots.push(slot);
        }
        Ok(Self {
            spec,
            shapes,
            slots,
            param_count: offset,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn input_len(&self) -> usize {
        self.shapes[0].iter().product()
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("shapes always holds the input")
    }

    pub fn output_len(&self) -> usize {
        self.output_shape().iter().product()
    }

    /// Parameter slots of the parameterized layers, in layer order.
    pub fn layout(&self) -> impl Iterator<Item = &ParamSlot> {
        self.slots.iter().flatten()
    }

    /// Glorot-uniform weights, zero biases, fully determined by `seed`.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; self.param_count];
        for slot in self.layout() {
            let (fan_in, fan_out) = match slot.weight_shape.as_slice() {
                [o, i] => (*i, *o),
                [o, c, kh, kw] => (c * kh * kw, o * kh * kw),
                _ => unreachable!("only dense and conv layers carry parameters"),
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut params[slot.offset..slot.offset + slot.weight_len()] {
                *w = rng.random_range(-limit..limit);
            }
        }
        params
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count {
            return Err(Error::Shape {
                op: "params",
                left: vec![self.param_count],
                right: vec![params.len()],
            });
        }
        Ok(())
    }

    /// Forward pass for one sample given as a flat slice of `input_len()` values.
    pub fn forward_sample(&self, params: &[f64], input: &[f64]) -> (Vec<f64>, SampleTrace) {
        debug_assert_eq!(input.len(), self.input_len());
        debug_assert_eq!(params.len(), self.param_count);
        let n_layers = self.spec.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pool_argmax = Vec::new();
        let mut current = input.to_vec();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let in_shape = &self.shapes[i];
            let out_shape = &self.shapes[i + 1];
            let next = match *layer {
                LayerSpec::Conv2d { stride, .. } => {
                    let slot = self.slots[i].as_ref().expect("conv has params");
                    conv_forward(params, slot, in_shape, out_shape, stride, &current)
                }
                LayerSpec::Dense { .. } => {
                    let slot = self.slots[i].as_ref().expect("dense has params");
                    dense_forward(params, slot, &current)
                }
                LayerSpec::MaxPool2d { window, stride } => {
                    let (out, arg) = pool_forward(in_shape, out_shape, window, stride, &current);
                    pool_argmax.push(arg);
                    out
                }
                LayerSpec::Relu => current.iter().map(|&v| v.max(0.0)).collect(),
                LayerSpec::Flatten => current.clone(),
            };
            inputs.push(std::mem::replace(&mut current, next));
        }
        (
            current,
            SampleTrace {
                inputs,
                pool_argmax,
            },
        )
    }

    /// Accumulates `∂(output_grad · y)/∂params` for one sample into `grad`.
    pub fn backward_sample(
        &self,
        params: &[f64],
        trace: &SampleTrace,
        output_grad: &[f64],
        grad: &mut [f64],
    ) {
        debug_assert_eq!(output_grad.len(), self.output_len());
        debug_assert_eq!(grad.len(), self.param_count);
        let mut upstream = output_grad.to_vec();
        let mut pool_index = trace.pool_argmax.len();
        for (i, layer) in self.spec.layers.iter().enumerate().rev() {
            let input = &trace.inputs[i];
            let in_shape = &self.shapes[i];
            let out_shape = &self.shapes[i + 1];
            // The first layer's input gradient is never consumed.
            let need_input_grad = i > 0;
            upstream = match *layer {
                LayerSpec::Conv2d { stride, .. } => {
                    let slot = self.slots[i].as_ref().expect("conv has params");
                    conv_backward(
                        params,
                        slot,
                        in_shape,
                        out_shape,
                        stride,
                        input,
                        &upstream,
                        grad,
                        need_input_grad,
                    )
                }
                LayerSpec::Dense { .. } => {
                    let slot = self.slots[i].as_ref().expect("dense has params");
                    dense_backward(params, slot, input, &upstream, grad, need_input_grad)
                }
                LayerSpec::MaxPool2d { .. } => {
                    pool_index -= 1;
                    let mut din = vec![0.0; input.len()];
                    for (g, &src) in upstream.iter().zip(&trace.pool_argmax[pool_index]) {
                        din[src as usize] += g;
                    }
                    din
                }
                LayerSpec::Relu => upstream
                    .iter()
                    .zip(input)
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect(),
                LayerSpec::Flatten => upstream,
            };
        }
    }

    /// Jacobian rows `∂y_k/∂params` for one sample, written row-major into `out`
    /// (`output_len() x param_count()`). Returns the network output.
    pub fn jacobian_sample_into(&self, params: &[f64], input: &[f64], out: &mut [f64]) -> Vec<f64> {
        let p = self.param_count;
        let k = self.output_len();
        debug_assert_eq!(out.len(), k * p);
        let (y, trace) = self.forward_sample(params, input);
        let mut one_hot = vec![0.0; k];
        for (row, dst) in out.chunks_exact_mut(p).enumerate() {
            dst.fill(0.0);
            one_hot[row] = 1.0;
            self.backward_sample(params, &trace, &one_hot, dst);
            one_hot[row] = 0.0;
        }
        y
    }

    /// Splits a tensor into `(batch, per-sample length)`, accepting either the bare
    /// input shape or a leading batch dimension.
    pub fn batch_dims(&self, input: &Tensor) -> Result<usize> {
        let shape = input.shape();
        let in_shape = self.input_shape();
        if shape == in_shape {
            Ok(1)
        } else if shape.len() == in_shape.len() + 1 && &shape[1..] == in_shape {
            Ok(shape[0])
        } else {
            Err(Error::Shape {
                op: "forward",
                left: in_shape.to_vec(),
                right: shape.to_vec(),
            })
        }
    }
}

/// Cached activations of one sample: the input of every layer, plus the argmax
/// positions of each max-pool layer in order.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    inputs: Vec<Vec<f64>>,
    pool_argmax: Vec<Vec<u32>>,
}

/// Per-call cache for [`NetworkState::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    param_count: usize,
    layer_count: usize,
    batched: bool,
    samples: Vec<SampleTrace>,
}

impl ForwardTrace {
    pub fn batch_len(&self) -> usize {
        self.samples.len()
    }

    /// Discrete state of the non-smooth layers: ReLU on/off bits and pooling
    /// winners. Two evaluations with equal patterns lie on the same linear piece.
    pub fn activation_pattern(&self, network: &Network) -> Vec<u32> {
        let mut out = Vec::new();
        for s in &self.samples {
            for (i, layer) in network.spec.layers.iter().enumerate() {
                if *layer == LayerSpec::Relu {
                    out.extend(s.inputs[i].iter().map(|&x| u32::from(x > 0.0)));
                }
            }
            for arg in &s.pool_argmax {
                out.extend_from_slice(arg);
            }
        }
        out
    }
}

/// A network together with its flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    network: Arc<Network>,
    params: Vec<f64>,
}

impl NetworkState {
    /// Builds the network and initializes its parameters from `seed`.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let network = Network::new(spec)?;
        let params = network.init_params(seed);
        Ok(Self {
            network: Arc::new(network),
            params,
        })
    }

    pub fn with_params(network: Arc<Network>, params: Vec<f64>) -> Result<Self> {
        network.check_params(&params)?;
        Ok(Self { network, params })
    }

    pub fn network(&self) -> &Arc<Network> {
        &self.network
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.network.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        self.network.check_params(&params)?;
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameters"));
        }
        self.params = params;
        Ok(())
    }

    /// Forward pass over a single sample or a batch (leading dimension).
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, ForwardTrace)> {
        let net = &self.network;
        let batch = net.batch_dims(input)?;
        let batched = input.shape().len() > net.input_shape().len();
        let in_len = net.input_len();
        let mut out = Vec::with_capacity(batch * net.output_len());
        let mut samples = Vec::with_capacity(batch);
        for x in input.data().chunks_exact(in_len) {
            let (y, trace) = net.forward_sample(&self.params, x);
            out.extend_from_slice(&y);
            samples.push(trace);
        }
        let mut shape = net.output_shape().to_vec();
        if batched {
            shape.insert(0, batch);
        }
        let output = Tensor::new(shape, out).map_err(|_| Error::NonFinite("forward output"))?;
        Ok((
            output,
            ForwardTrace {
                param_count: net.param_count,
                layer_count: net.spec.layers.len(),
                batched,
                samples,
            },
        ))
    }

    /// Gradient of `Σ output_grad ⊙ output` with respect to the parameters,
    /// summed over the batch in sample order.
    pub fn backward(&self, trace: &ForwardTrace, output_grad: &Tensor) -> Result<Vec<f64>> {
        let net = &self.network;
        if trace.param_count != net.param_count || trace.layer_count != net.spec.layers.len() {
            return Err(Error::Contract(
                "forward trace was produced by a different network".into(),
            ));
        }
        let mut expected = net.output_shape().to_vec();
        if trace.batched {
            expected.insert(0, trace.samples.len());
        }
        if output_grad.shape() != expected.as_slice() {
            return Err(Error::Shape {
                op: "backward",
                left: expected,
                right: output_grad.shape().to_vec(),
            });
        }
        let mut grad = vec![0.0; net.param_count];
        for (s, g) in trace
            .samples
            .iter()
            .zip(output_grad.data().chunks_exact(net.output_len()))
        {
            net.backward_sample(&self.params, s, g, &mut grad);
        }
        Ok(grad)
    }

    /// `[n_outputs x n_params]` Jacobian of the output for one sample, one row per
    /// one-hot backward pass.
    pub fn jacobian(&self, input: &Tensor) -> Result<Tensor> {
        let net = &self.network;
        if input.shape() != net.input_shape() {
            return Err(Error::Shape {
                op: "jacobian",
                left: net.input_shape().to_vec(),
                right: input.shape().to_vec(),
            });
        }
        let (k, p) = (net.output_len(), net.param_count);
        let mut out = vec![0.0; k * p];
        net.jacobian_sample_into(&self.params, input.data(), &mut out);
        Tensor::new(vec![k, p], out)
    }
}

fn conv_forward(
    params: &[f64],
    slot: &ParamSlot,
    in_shape: &[usize],
    out_shape: &[usize],
    stride: usize,
    input: &[f64],
) -> Vec<f64> {
    let (c_in, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (c_out, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let (kh, kw) = (slot.weight_shape[2], slot.weight_shape[3]);
    let weights = &params[slot.offset..slot.offset + slot.weight_len()];
    let bias = &params[slot.bias_offset()..slot.bias_offset() + slot.bias_len];
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        plane.fill(bias[o]);
        for c in 0..c_in {
            let channel = &input[c * h * w..(c + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wt = weights[((o * c_in + c) * kh + ky) * kw + kx];
                    for oy in 0..oh {
                        let row = &channel[(oy * stride + ky) * w + kx..];
                        let dst = &mut plane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            for (d, x) in dst.iter_mut().zip(&row[..ow]) {
                                *d += wt * x;
                            }
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d += wt * row[ox * stride];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    params: &[f64],
    slot: &ParamSlot,
    in_shape: &[usize],
    out_shape: &[usize],
    stride: usize,
    input: &[f64],
    upstream: &[f64],
    grad: &mut [f64],
    need_input_grad: bool,
) -> Vec<f64> {
    let (c_in, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (c_out, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let (kh, kw) = (slot.weight_shape[2], slot.weight_shape[3]);
    let weights = &params[slot.offset..slot.offset + slot.weight_len()];
    let (gw, gb) = grad[slot.offset..slot.offset + slot.len()].split_at_mut(slot.weight_len());
    let mut din = if need_input_grad {
        vec![0.0; input.len()]
    } else {
        Vec::new()
    };
    for o in 0..c_out {
        let dplane = &upstream[o * oh * ow..(o + 1) * oh * ow];
        if dplane.iter().all(|&g| g == 0.0) {
            continue;
        }
        gb[o] += dplane.iter().sum::<f64>();
        for c in 0..c_in {
            let channel = &input[c * h * w..(c + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let widx = ((o * c_in + c) * kh + ky) * kw + kx;
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let row = &channel[(oy * stride + ky) * w + kx..];
                        let drow = &dplane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            acc += drow.iter().zip(&row[..ow]).map(|(g, x)| g * x).sum::<f64>();
                        } else {
                            for (ox, g) in drow.iter().enumerate() {
                                acc += g * row[ox * stride];
                            }
                        }
                    }
                    gw[widx] += acc;
                    if need_input_grad {
                        let wt = weights[widx];
                        let dchan = &mut din[c * h * w..(c + 1) * h * w];
                        for oy in 0..oh {
                            let drow = &dplane[oy * ow..(oy + 1) * ow];
                            let base = (oy * stride + ky) * w + kx;
                            if stride == 1 {
                                for (d, g) in dchan[base..base + ow].iter_mut().zip(drow) {
                                    *d += wt * g;
                                }
                            } else {
                                for (ox, g) in drow.iter().enumerate() {
                                    dchan[base + ox * stride] += wt * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    din
}

fn dense_forward(params: &[f64], slot: &ParamSlot, input: &[f64]) -> Vec<f64> {
    let n_in = slot.weight_shape[1];
    let weights = &params[slot.offset..slot.offset + slot.weight_len()];
    let bias = &params[slot.bias_offset()..slot.bias_offset() + slot.bias_len];
    weights
        .chunks_exact(n_in)
        .zip(bias)
        .map(|(row, b)| b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>())
        .collect()
}

fn dense_backward(
    params: &[f64],
    slot: &ParamSlot,
    input: &[f64],
    upstream: &[f64],
    grad: &mut [f64],
    need_input_grad: bool,
) -> Vec<f64> {
    let n_in = slot.weight_shape[1];
    let weights = &params[slot.offset..slot.offset + slot.weight_len()];
    let (gw, gb) = grad[slot.offset..slot.offset + slot.len()].split_at_mut(slot.weight_len());
    let mut din = if need_input_grad {
        vec![0.0; n_in]
    } else {
        Vec::new()
    };
    for (o, &g) in upstream.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        gb[o] += g;
        for (gwi, x) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
            *gwi += g * x;
        }
        if need_input_grad {
            for (d, w) in din.iter_mut().zip(&weights[o * n_in..(o + 1) * n_in]) {
                *d += g * w;
            }
        }
    }
    din
}

fn pool_forward(
    in_shape: &[usize],
    out_shape: &[usize],
    window: usize,
    stride: usize,
    input: &[f64],
) -> (Vec<f64>, Vec<u32>) {
    let (h, w) = (in_shape[1], in_shape[2]);
    let (c, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * stride * w + ox * stride;
                let mut best = input[best_idx];
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense1() -> NetworkState {
        let net = Arc::new(Network::new(NetworkSpec::new(vec![1], vec![LayerSpec::dense(1)])).unwrap());
        NetworkState::with_params(net, vec![2.0, 3.0]).unwrap()
    }

    fn mnist_like_spec() -> NetworkSpec {
        NetworkSpec::new(
            vec![1, 28, 28],
            vec![
                LayerSpec::conv(10, 5, 1),
                LayerSpec::Relu,
                LayerSpec::conv(20, 5, 1),
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { window: 2, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::dense(10),
            ],
        )
    }

    #[test]
    fn conv_output_is_valid_convolution() {
        let shapes = infer_shapes(&mnist_like_spec()).unwrap();
        assert_eq!(shapes[0], vec![10, 24, 24]);
        assert_eq!(shapes[2], vec![20, 20, 20]);
        assert_eq!(shapes[4], vec![20, 10, 10]);
        assert_eq!(shapes[5], vec![2000]);
    }

    #[test]
    fn dense_output_is_out_features() {
        let spec = NetworkSpec::new(vec![40], vec![LayerSpec::dense(10)]);
        assert_eq!(infer_shapes(&spec).unwrap(), vec![vec![10]]);
    }

    #[test]
    fn kernel_larger_than_input_is_rejected() {
        let spec = NetworkSpec::new(vec![1, 4, 4], vec![LayerSpec::Relu, LayerSpec::conv(2, 5, 1)]);
        match infer_shapes(&spec) {
            Err(Error::LayerShape { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("expected a layer shape error, got {other:?}"),
        }
    }

    #[test]
    fn zero_sized_layers_are_rejected() {
        let spec = NetworkSpec::new(vec![3], vec![LayerSpec::dense(0)]);
        assert!(matches!(infer_shapes(&spec), Err(Error::LayerShape { layer: 0, .. })));
        let spec = NetworkSpec::new(vec![1, 8, 8], vec![LayerSpec::conv(2, 3, 0)]);
        assert!(infer_shapes(&spec).is_err());
    }

    #[test]
    fn dense_requires_flatten() {
        let spec = NetworkSpec::new(vec![1, 4, 4], vec![LayerSpec::dense(3)]);
        assert!(infer_shapes(&spec).is_err());
    }

    #[test]
    fn zero_params_give_zero_output() {
        let mut state = NetworkState::init(mnist_like_spec(), 1).unwrap();
        let n = state.params().len();
        state.set_params(vec![0.0; n]).unwrap();
        let x = Tensor::new(vec![1, 28, 28], (0..784).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let (y, _) = state.forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_dense_forward() {
        let (y, _) = dense1().forward(&Tensor::vector(vec![5.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[13.0]);
    }

    #[test]
    fn relu_clips_negative() {
        let net = Arc::new(Network::new(NetworkSpec::new(vec![2], vec![LayerSpec::Relu])).unwrap());
        let state = NetworkState::with_params(net, vec![]).unwrap();
        let (y, _) = state.forward(&Tensor::vector(vec![-1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0]);
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        assert!(matches!(
            dense1().forward(&Tensor::vector(vec![1.0, 2.0]).unwrap()),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn single_dense_backward() {
        let s = dense1();
        let (_, trace) = s.forward(&Tensor::vector(vec![5.0]).unwrap()).unwrap();
        let g = s.backward(&trace, &Tensor::vector(vec![1.0]).unwrap()).unwrap();
        assert_eq!(g, vec![5.0, 1.0]);
    }

    #[test]
    fn zero_output_grad_gives_zero_gradient() {
        let s = NetworkState::init(mnist_like_spec(), 3).unwrap();
        let x = Tensor::new(vec![1, 28, 28], vec![0.5; 784]).unwrap();
        let (_, trace) = s.forward(&x).unwrap();
        let g = s.backward(&trace, &Tensor::zeros(vec![10])).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_foreign_trace() {
        let a = dense1();
        let b = NetworkState::init(NetworkSpec::new(vec![1], vec![LayerSpec::dense(2)]), 0).unwrap();
        let (_, trace) = b.forward(&Tensor::vector(vec![1.0]).unwrap()).unwrap();
        assert!(matches!(
            a.backward(&trace, &Tensor::vector(vec![1.0]).unwrap()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn backward_rejects_wrong_grad_shape() {
        let s = dense1();
        let (_, trace) = s.forward(&Tensor::vector(vec![1.0]).unwrap()).unwrap();
        assert!(matches!(
            s.backward(&trace, &Tensor::vector(vec![1.0, 1.0]).unwrap()),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn single_dense_jacobian() {
        let j = dense1().jacobian(&Tensor::vector(vec![5.0]).unwrap()).unwrap();
        assert_eq!(j.shape(), &[1, 2]);
        assert_eq!(j.data(), &[5.0, 1.0]);
    }

    #[test]
    fn jacobian_rows_equal_one_hot_backward() {
        let spec = NetworkSpec::new(
            vec![1, 6, 6],
            vec![
                LayerSpec::conv(2, 3, 1),
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { window: 2, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::dense(3),
            ],
        );
        let s = NetworkState::init(spec, 11).unwrap();
        let x = Tensor::new(vec![1, 6, 6], (0..36).map(|i| ((i * 37) % 11) as f64 / 11.0).collect()).unwrap();
        let j = s.jacobian(&x).unwrap();
        let (_, trace) = s.forward(&x).unwrap();
        for k in 0..3 {
            let mut e = vec![0.0; 3];
            e[k] = 1.0;
            let row = s.backward(&trace, &Tensor::vector(e).unwrap()).unwrap();
            assert_eq!(&j.data()[k * s.params().len()..(k + 1) * s.params().len()], row.as_slice());
        }
    }

    #[test]
    fn jacobian_of_dense_at_zero_input() {
        let s = NetworkState::init(NetworkSpec::new(vec![3], vec![LayerSpec::dense(2)]), 5).unwrap();
        let j = s.jacobian(&Tensor::zeros(vec![3])).unwrap();
        // layout: W (2x3) then b (2)
        for k in 0..2 {
            for c in 0..6 {
                assert_eq!(j.at2(k, c), 0.0);
            }
            assert_eq!(j.at2(k, 6 + k), 1.0);
            assert_eq!(j.at2(k, 6 + (1 - k)), 0.0);
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = mnist_like_spec();
        let a = NetworkState::init(spec.clone(), 42).unwrap();
        let b = NetworkState::init(spec, 42).unwrap();
        assert_eq!(a.params(), b.params());
        for slot in a.network().layout() {
            let bias = &a.params()[slot.bias_offset()..slot.bias_offset() + slot.bias_len];
            assert!(bias.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn init_weights_are_centered() {
        let spec = NetworkSpec::new(vec![100], vec![LayerSpec::dense(100)]);
        for seed in 0..10 {
            let s = NetworkState::init(spec.clone(), seed).unwrap();
            let w = &s.params()[..10_000];
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            assert!(mean.abs() < 0.01, "seed {seed}: mean {mean}");
            let limit = (6.0f64 / 200.0).sqrt();
            assert!(w.iter().all(|v| v.abs() < limit));
        }
    }

    #[test]
    fn param_layout_is_contiguous() {
        let net = Network::new(mnist_like_spec()).unwrap();
        let mut next = 0;
        for slot in net.layout() {
            assert_eq!(slot.offset, next);
            next += slot.len();
        }
        assert_eq!(next, net.param_count());
        assert_eq!(net.param_count(), 260 + 5020 + 20_010);
    }

    #[test]
    fn forward_is_deterministic_and_params_round_trip() {
        let mut s = NetworkState::init(mnist_like_spec(), 9).unwrap();
        let x = Tensor::new(vec![2, 1, 28, 28], (0..1568).map(|i| (i % 13) as f64 / 13.0).collect()).unwrap();
        let (y1, _) = s.forward(&x).unwrap();
        let p = s.params().to_vec();
        s.set_params(p).unwrap();
        let (y2, _) = s.forward(&x).unwrap();
        assert_eq!(y1.shape(), &[2, 10]);
        assert_eq!(
            y1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn spec_text_round_trip() {
        let spec = mnist_like_spec();
        let text = spec.to_string();
        assert_eq!(text, "1x28x28 | conv(10,5x5,s1) relu conv(20,5x5,s1) relu pool(2,s2) flatten dense(10)");
        assert_eq!(text.parse::<NetworkSpec>().unwrap(), spec);
        assert!("1x2 | dense(x)".parse::<NetworkSpec>().is_err());
    }
}
