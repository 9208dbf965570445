//! Fully convolutional 3D encoder-decoder with a hand-written backward pass.
//!
//! Parameters are kept at f32 precision (rounded after every update) so a
//! checkpoint round-trips exactly; all arithmetic runs in f64.

mod checkpoint;
pub mod layers;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{Activation, Dims, LayerKind, LayerSpec};
pub use train::{predict, sgd_momentum_step, train, train_with, Prediction, Telemetry, TrainConfig};

use crate::dataset::CHANNELS;
use crate::error::{Error, Result};
use crate::sampler::rng_from_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Indices into the 8 record channels fed to the first layer.
    pub channels: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkConfig {
    /// conv 3³ c→16, ReLU · maxpool 2 · conv 3³ 16→32, ReLU · tconv 2³/2 32→16, ReLU ·
    /// conv 3³ 16→8, ReLU · conv 3³ 8→1, tanh.
    pub fn reference(channels: Vec<usize>) -> Self {
        let c = channels.len();
        Self {
            channels,
            layers: vec![
                LayerSpec::conv(c, 16, 3, 1, Activation::Relu),
                LayerSpec::max_pool(16, 2),
                LayerSpec::conv(16, 32, 3, 1, Activation::Relu),
                LayerSpec::transpose_conv(32, 16, 2, 2, Activation::Relu),
                LayerSpec::conv(16, 8, 3, 1, Activation::Relu),
                LayerSpec::conv(8, 1, 3, 1, Activation::Tanh),
            ],
        }
    }

    pub fn input_channels(&self) -> usize {
        self.channels.len()
    }

    /// Spatial dims after every layer.
    pub fn layer_dims(&self, input: Dims) -> Result<Vec<Dims>> {
        let mut d = input;
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            d = l.output_dims(d)?;
            out.push(d);
        }
        Ok(out)
    }

    pub fn validate(&self, input: Dims) -> Result<()> {
        let invalid = |m: String| Err(Error::Invalid(m));
        let c = self.channels.len();
        if c == 0 || c > CHANNELS {
            return invalid(format!("network takes 1..={CHANNELS} channels, got {c}"));
        }
        let mut seen = [false; CHANNELS];
        for &ch in &self.channels {
            if ch >= CHANNELS || seen[ch] {
                return invalid(format!("channel {ch} repeated or out of range"));
            }
            seen[ch] = true;
        }
        let Some(last) = self.layers.last() else {
            return invalid("network has no layers".into());
        };
        let mut width = c;
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_channels != width {
                return invalid(format!("layer {i} expects {} channels, receives {width}", l.in_channels));
            }
            if l.kind == LayerKind::MaxPool && l.out_channels != l.in_channels {
                return invalid(format!("pooling layer {i} cannot change width"));
            }
            width = l.out_channels;
        }
        if width != 1 || last.activation != Activation::Tanh || last.kind == LayerKind::MaxPool {
            return invalid("last layer must be a 1-channel tanh convolution".into());
        }
        let dims = self.layer_dims(input)?;
        if *dims.last().unwrap() != input {
            return Err(Error::Shape {
                expected: format!("{input:?}"),
                got: format!("{:?}", dims.last().unwrap()),
            });
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight_len() + l.bias_len()).sum()
    }
}

/// Per-layer kernels and biases; also used for gradients and velocities.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParameters {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl NetworkParameters {
    pub fn zeros(config: &NetworkConfig) -> Self {
        Self {
            weights: config.layers.iter().map(|l| vec![0.0; l.weight_len()]).collect(),
            biases: config.layers.iter().map(|l| vec![0.0; l.bias_len()]).collect(),
        }
    }

    /// Uniform fan-in initialisation: bound `sqrt(6 / fan_in)` ahead of ReLU,
    /// `sqrt(3 / fan_in)` otherwise; biases start at zero.
    pub fn init(config: &NetworkConfig, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut p = Self::zeros(config);
        for (l, w) in config.layers.iter().zip(&mut p.weights) {
            if w.is_empty() {
                continue;
            }
            let taps = match l.kind {
                LayerKind::TransposeConv3d => (l.kernel.pow(3) / l.stride.pow(3)).max(1),
                _ => l.kernel.pow(3),
            };
            let fan_in = (l.in_channels * taps) as f64;
            let gain = if l.activation == Activation::Relu { 6.0 } else { 3.0 };
            let bound = (gain / fan_in).sqrt();
            for v in w.iter_mut() {
                *v = round_f32(rng.gen_range(-bound..bound));
            }
        }
        p
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.weights.iter_mut().zip(self.biases.iter_mut()).flat_map(|(w, b)| [w, b])
    }

    pub fn len(&self) -> usize {
        self.tensors().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn matches(&self, config: &NetworkConfig) -> bool {
        self.weights.len() == config.layers.len()
            && self.biases.len() == config.layers.len()
            && config
                .layers
                .iter()
                .zip(self.weights.iter().zip(&self.biases))
                .all(|(l, (w, b))| w.len() == l.weight_len() && b.len() == l.bias_len())
    }
}

pub(crate) fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Activations kept for the backward pass.
struct Cache {
    dims: Vec<Dims>,
    outputs: Vec<Vec<f64>>,
    argmax: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: NetworkParameters,
}

impl Network {
    pub fn new(config: NetworkConfig, params: NetworkParameters) -> Result<Self> {
        if !params.matches(&config) {
            return Err(Error::Invalid("parameter shapes do not match the network".into()));
        }
        Ok(Self { config, params })
    }

    pub fn init(config: NetworkConfig, seed: u64) -> Self {
        let params = NetworkParameters::init(&config, seed);
        Self { config, params }
    }

    fn check_input(&self, input: &[f64], dims: Dims) -> Result<()> {
        self.config.validate(dims)?;
        let expected = self.config.input_channels() * dims.iter().product::<usize>();
        if input.len() != expected {
            return Err(Error::Shape {
                expected: format!("{} x {dims:?}", self.config.input_channels()),
                got: input.len().to_string(),
            });
        }
        Ok(())
    }

    fn run(&self, input: &[f64], dims: Dims) -> Cache {
        let mut cache = Cache {
            dims: vec![dims],
            outputs: Vec::with_capacity(self.config.layers.len()),
            argmax: Vec::new(),
        };
        for (i, l) in self.config.layers.iter().enumerate() {
            let x = if i == 0 { input } else { &cache.outputs[i - 1] };
            let d = cache.dims[i];
            let (w, b) = (&self.params.weights[i], &self.params.biases[i]);
            let (mut y, od) = match l.kind {
                LayerKind::Conv3d => layers::conv_forward(l, x, d, w, b),
                LayerKind::TransposeConv3d => layers::tconv_forward(l, x, d, w, b),
                LayerKind::MaxPool => {
                    let (y, arg, od) = layers::pool_forward(l, x, d);
                    cache.argmax.push(arg);
                    (y, od)
                }
            };
            l.activation.apply(&mut y);
            cache.outputs.push(y);
            cache.dims.push(od);
        }
        cache
    }

    /// Raw tanh output, one value per voxel.
    pub fn forward_raw(&self, input: &[f64], dims: Dims) -> Result<Vec<f64>> {
        self.check_input(input, dims)?;
        Ok(self.run(input, dims).outputs.pop().unwrap())
    }

    /// Densities `(y + 1) / 2` clamped to `[eps, 1 - eps]`.
    pub fn forward(&self, input: &[f64], dims: Dims, eps: f64) -> Result<Vec<f64>> {
        Ok(self.forward_raw(input, dims)?.iter().map(|&y| to_density(y, eps)).collect())
    }

    /// Loss, parameter gradients and the predicted densities for one sample.
    pub fn loss_and_gradient(
        &self,
        input: &[f64],
        dims: Dims,
        target: &[f64],
        beta: f64,
        eps: f64,
    ) -> Result<(f64, NetworkParameters, Vec<f64>)> {
        self.check_input(input, dims)?;
        let n = dims.iter().product::<usize>();
        if target.len() != n {
            return Err(Error::Shape {
                expected: n.to_string(),
                got: target.len().to_string(),
            });
        }
        let mut cache = self.run(input, dims);
        let y = cache.outputs.last().unwrap();
        let pred: Vec<f64> = y.iter().map(|&v| to_density(v, eps)).collect();
        let value = loss(&pred, target, beta)?;

        let mut grad = NetworkParameters::zeros(&self.config);
        let mut g: Vec<f64> = pred
            .iter()
            .zip(target)
            .zip(y)
            .map(|((&p, &t), &raw)| {
                let inside = (raw + 1.0) * 0.5 > eps && (raw + 1.0) * 0.5 < 1.0 - eps;
                if inside {
                    0.5 * loss_derivative(p, t, beta) / n as f64
                } else {
                    0.0
                }
            })
            .collect();
        let mut pools = cache.argmax.len();
        for i in (0..self.config.layers.len()).rev() {
            let l = &self.config.layers[i];
            let out = cache.outputs.pop().unwrap();
            l.activation.backward(&out, &mut g);
            let x = if i == 0 { input } else { &cache.outputs[i - 1] };
            let d = cache.dims[i];
            let nin = l.in_channels * d.iter().product::<usize>();
            let mut din = if i > 0 { vec![0.0; nin] } else { Vec::new() };
            let din_ref = if i > 0 { Some(din.as_mut_slice()) } else { None };
            let (gw, gb) = (&mut grad.weights[i], &mut grad.biases[i]);
            match l.kind {
                LayerKind::Conv3d => layers::conv_backward(l, x, d, &self.params.weights[i], &g, gw, gb, din_ref),
                LayerKind::TransposeConv3d => {
                    layers::tconv_backward(l, x, d, &self.params.weights[i], &g, gw, gb, din_ref)
                }
                LayerKind::MaxPool => {
                    pools -= 1;
                    if let Some(di) = din_ref {
                        layers::pool_backward(&cache.argmax[pools], &g, di);
                    }
                }
            }
            g = din;
        }
        Ok((value, grad, pred))
    }
}

pub fn to_density(y: f64, eps: f64) -> f64 {
    ((y + 1.0) * 0.5).clamp(eps, 1.0 - eps)
}

/// Mean binary cross-entropy plus `beta` times the mean squared error.
pub fn loss(pred: &[f64], target: &[f64], beta: f64) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape {
            expected: target.len().to_string(),
            got: pred.len().to_string(),
        });
    }
    if let Some(p) = pred.iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::Invalid(format!("prediction {p} must lie strictly inside (0, 1)")));
    }
    let (mut bce, mut mse) = (0.0, 0.0);
    for (&p, &t) in pred.iter().zip(target) {
        bce -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        mse += (p - t) * (p - t);
    }
    let n = pred.len() as f64;
    Ok(bce / n + beta * mse / n)
}

fn loss_derivative(p: f64, t: f64, beta: f64) -> f64 {
    -t / p + (1.0 - t) / (1.0 - p) + 2.0 * beta * (p - t)
}
