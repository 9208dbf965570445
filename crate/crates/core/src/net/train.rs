use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{round_f32, Network, NetworkConfig, NetworkParameters};
use crate::dataset::{ChannelTensor, SampleRecord};
use crate::error::{Error, Result};
use crate::eval::{binary_accuracy_values, is_solid, rms_accuracy};
use crate::field::DensityField;
use crate::io;
use crate::sampler::rng_from_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Weight of the squared-error term.
    pub beta: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Output clamp keeping the cross-entropy finite.
    pub epsilon: f64,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            beta: 1.0,
            epochs: 30,
            seed: 0,
            epsilon: 1e-7,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Invalid("epochs must be at least 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 0.01) {
            return Err(Error::Invalid(format!("epsilon {} outside (0, 0.01]", self.epsilon)));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.beta >= 0.0) {
            return Err(Error::Invalid("learning rate, momentum or beta out of range".into()));
        }
        Ok(())
    }
}

/// `v' = mu v + g`, `w' = w - lr v'`; weights are kept at f32 precision.
pub fn sgd_momentum_step(params: &mut NetworkParameters, grads: &NetworkParameters, velocity: &mut NetworkParameters, lr: f64, mu: f64) {
    for ((w, g), v) in params.tensors_mut().zip(grads.tensors()).zip(velocity.tensors_mut()) {
        for ((wi, gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = mu * *vi + gi;
            *wi = round_f32(*wi - lr * *vi);
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub step_loss: Vec<f64>,
    pub epoch_loss: Vec<f64>,
    pub epoch_binary_accuracy: Vec<f64>,
    pub epoch_rms_accuracy: Vec<f64>,
}

impl Telemetry {
    /// `epoch,loss,binary_accuracy,rms_accuracy`.
    pub fn write_epoch_csv(&self, path: &Path) -> Result<()> {
        io::write_csv(
            path,
            &["epoch", "loss", "binary_accuracy", "rms_accuracy"],
            (0..self.epoch_loss.len()).map(|e| {
                vec![
                    (e + 1) as f64,
                    self.epoch_loss[e],
                    self.epoch_binary_accuracy[e],
                    self.epoch_rms_accuracy[e],
                ]
            }),
        )
    }

    /// `step,loss`.
    pub fn write_step_csv(&self, path: &Path) -> Result<()> {
        io::write_csv(
            path,
            &["step", "loss"],
            self.step_loss.iter().enumerate().map(|(s, l)| vec![s as f64, *l]),
        )
    }
}

fn dims_of(r: &SampleRecord) -> [usize; 3] {
    r.grid().dims()
}

pub fn train(records: &[SampleRecord], net_config: &NetworkConfig, config: &TrainConfig) -> Result<(Network, Telemetry)> {
    train_with(records, net_config, config, |_, _| {})
}

/// Per-sample SGD in a seeded shuffle; `on_epoch(epoch, telemetry)` runs after each epoch.
pub fn train_with(
    records: &[SampleRecord],
    net_config: &NetworkConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &Telemetry),
) -> Result<(Network, Telemetry)> {
    config.validate()?;
    let first = records.first().ok_or_else(|| Error::Invalid("training set is empty".into()))?;
    net_config.validate(dims_of(first))?;
    let mut net = Network::init(net_config.clone(), config.seed);
    let mut velocity = NetworkParameters::zeros(net_config);
    let mut rng = rng_from_seed(config.seed ^ 0x5eed_0f_5a_11e5);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut telemetry = Telemetry::default();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut bin_sum, mut rms_sum) = (0.0, 0.0, 0.0);
        for &i in &order {
            let r = &records[i];
            let input = r.input.select(&net_config.channels);
            let target = r.target_values();
            let (loss, grad, pred) =
                net.loss_and_gradient(&input, dims_of(r), &target, config.beta, config.epsilon)?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            sgd_momentum_step(&mut net.params, &grad, &mut velocity, config.learning_rate, config.momentum);
            telemetry.step_loss.push(loss);
            loss_sum += loss;
            bin_sum += binary_accuracy_values(&pred, &target, config.threshold);
            rms_sum += rms_accuracy(&pred, &target)?;
            step += 1;
        }
        let n = records.len() as f64;
        telemetry.epoch_loss.push(loss_sum / n);
        telemetry.epoch_binary_accuracy.push(bin_sum / n);
        telemetry.epoch_rms_accuracy.push(rms_sum / n);
        on_epoch(epoch, &telemetry);
    }
    Ok((net, telemetry))
}

/// Float densities and their thresholded counterpart.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub density: DensityField,
    pub binary: DensityField,
}

pub fn predict(net: &Network, channels: &ChannelTensor, threshold: f64, eps: f64) -> Result<Prediction> {
    let grid = channels.grid();
    let density = net.forward(&channels.select(&net.config.channels), grid.dims(), eps)?;
    let binary = density
        .iter()
        .map(|&v| if is_solid(v, threshold) { 1.0 } else { 0.0 })
        .collect();
    Ok(Prediction {
        density: DensityField::new(grid, density)?,
        binary: DensityField::new(grid, binary)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, LayerSpec};

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            channels: vec![0],
            layers: vec![LayerSpec::conv(1, 1, 1, 0, Activation::Tanh)],
        }
    }

    #[test]
    fn momentum_recurrences() {
        let cfg = tiny();
        let g = NetworkParameters {
            weights: vec![vec![0.5]],
            biases: vec![vec![-0.25]],
        };
        let mut w = NetworkParameters {
            weights: vec![vec![1.0]],
            biases: vec![vec![0.0]],
        };
        let mut v = NetworkParameters::zeros(&cfg);
        sgd_momentum_step(&mut w, &g, &mut v, 0.0, 0.9);
        assert_eq!(w.weights[0][0], 1.0);
        sgd_momentum_step(&mut w, &g, &mut v, 0.0, 0.9);
        assert!((v.weights[0][0] - 0.5 * 1.9).abs() < 1e-15);
        let mut w2 = NetworkParameters {
            weights: vec![vec![1.0]],
            biases: vec![vec![0.0]],
        };
        let mut v2 = NetworkParameters::zeros(&cfg);
        sgd_momentum_step(&mut w2, &g, &mut v2, 0.5, 0.0);
        assert_eq!(w2.weights[0][0], 0.75);
        assert_eq!(w2.biases[0][0], 0.125);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { epsilon: 0.1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { epsilon: 0.0, ..Default::default() }.validate().is_err());
    }
}
