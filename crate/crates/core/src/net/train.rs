use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{cross_entropy, softmax_slice, Network};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng;

/// Mini-batch training hyperparameters.
///
/// `decay` is a learning-rate decay: step `t` uses `learning_rate / (1 + decay·t)`.
/// `dropout_keep` is written into every dropout layer of the trained network,
/// so the returned network records the keep-probability it was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub momentum: f64,
    pub dropout_keep: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            decay: 1e-6,
            momentum: 0.9,
            dropout_keep: 0.5,
            batch_size: 128,
            epochs: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Parameter("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter("momentum must lie in [0, 1)".into()));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::Parameter("dropout_keep must lie in (0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be at least 1".into()));
        }
        if !(self.decay >= 0.0) {
            return Err(Error::Parameter("decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Train a copy of `net` on `data` by mini-batch gradient descent with
/// classical momentum, minimizing the cross-entropy of `σ_T(G(x))`.
///
/// Deterministic in `cfg.seed`: the shuffle order and every dropout mask come
/// from one seeded stream.
pub fn train(net: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<Network> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    for (x, &y) in data.inputs().iter().zip(data.labels()) {
        net.check_input(x)?;
        if y >= net.label_count() {
            return Err(Error::Data(format!(
                "label {y} outside [0, {})",
                net.label_count()
            )));
        }
    }

    let mut net = net.clone();
    let dropout_keep = cfg.dropout_keep;
    for layer in net.layers_mut() {
        if let super::LayerSpec::Dropout { keep } = &mut layer.spec {
            *keep = dropout_keep;
        }
    }

    let mut rng = rng::stream(cfg.seed, "train", 0);
    let mut velocity: Vec<(Vec<f64>, Vec<f64>)> = net
        .layers()
        .iter()
        .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
        .collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let temperature = net.temperature();
    let mut step: u64 = 0;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<(Vec<f64>, Vec<f64>)> = velocity
                .iter()
                .map(|(w, b)| (vec![0.0; w.len()], vec![0.0; b.len()]))
                .collect();
            for &i in batch {
                let x = data.inputs()[i].data();
                let label = data.labels()[i];
                let (acts, auxes) = net.trace(x, Some(&mut rng));
                let z = acts.last().unwrap();
                let mut dz = softmax_slice(z, temperature);
                dz[label] -= 1.0;
                dz.iter_mut().for_each(|v| *v /= temperature);
                net.backprop(&acts, &auxes, dz, Some(&mut grads));
            }

            let scale = 1.0 / batch.len() as f64;
            let lr = cfg.learning_rate / (1.0 + cfg.decay * step as f64);
            for (layer, ((vw, vb), (gw, gb))) in net
                .layers_mut()
                .iter_mut()
                .zip(velocity.iter_mut().zip(&grads))
            {
                for ((w, v), g) in layer.weights.iter_mut().zip(vw.iter_mut()).zip(gw) {
                    *v = cfg.momentum * *v - lr * g * scale;
                    *w += *v;
                }
                for ((b, v), g) in layer.bias.iter_mut().zip(vb.iter_mut()).zip(gb) {
                    *v = cfg.momentum * *v - lr * g * scale;
                    *b += *v;
                }
            }
            step += 1;
        }
    }

    if net
        .layers()
        .iter()
        .flat_map(|l| l.weights.iter().chain(&l.bias))
        .any(|v| !v.is_finite())
    {
        return Err(Error::Numeric("training diverged to non-finite weights".into()));
    }
    Ok(net)
}

/// Mean cross-entropy of `net` over `data` (inference mode).
pub fn mean_loss(net: &Network, data: &Dataset) -> f64 {
    let total: f64 = data
        .inputs()
        .iter()
        .zip(data.labels())
        .map(|(x, &y)| cross_entropy(&net.logits_raw(x.data()), y, net.temperature()))
        .sum();
    total / data.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::net::LayerSpec;

    fn small_net(seed: u64) -> Network {
        Network::new(
            &[2],
            &[
                LayerSpec::Dense { in_dim: 2, out_dim: 8 },
                LayerSpec::Relu,
                LayerSpec::Dense { in_dim: 8, out_dim: 2 },
            ],
            1.0,
            seed,
        )
        .unwrap()
    }

    fn accuracy(net: &Network, data: &Dataset) -> f64 {
        let hits = data
            .inputs()
            .iter()
            .zip(data.labels())
            .filter(|(x, &y)| net.predict_raw(x.data()) == y)
            .count();
        hits as f64 / data.len() as f64
    }

    #[test]
    fn zero_epochs_leave_weights_unchanged() {
        let net = small_net(1);
        let data = synth_blobs(2, 10, 2, 0.05, 3).unwrap();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        assert_eq!(train(&net, &data, &cfg).unwrap(), net);
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = synth_blobs(2, 100, 2, 0.05, 11).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            decay: 1e-6,
            momentum: 0.9,
            dropout_keep: 1.0,
            batch_size: 16,
            epochs: 50,
            seed: 5,
        };
        let before = mean_loss(&small_net(2), &data);
        let trained = train(&small_net(2), &data, &cfg).unwrap();
        assert!(mean_loss(&trained, &data) < before);
        assert!(accuracy(&trained, &data) >= 0.99);
    }

    #[test]
    fn training_is_deterministic() {
        let data = synth_blobs(2, 30, 2, 0.1, 4).unwrap();
        let net = Network::new(
            &[2],
            &[
                LayerSpec::Dense { in_dim: 2, out_dim: 6 },
                LayerSpec::Relu,
                LayerSpec::Dropout { keep: 1.0 },
                LayerSpec::Dense { in_dim: 6, out_dim: 2 },
            ],
            10.0,
            9,
        )
        .unwrap();
        let cfg = TrainConfig { epochs: 5, batch_size: 7, ..TrainConfig::default() };
        let a = train(&net, &data, &cfg).unwrap();
        let b = train(&net, &data, &cfg).unwrap();
        assert_eq!(a, b);
        let c = train(&net, &data, &TrainConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_dataset_is_a_data_error() {
        let data = Dataset::new(Vec::new(), Vec::new(), 2, "empty").unwrap();
        assert!(matches!(
            train(&small_net(0), &data, &TrainConfig::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { momentum: 1.0, ..TrainConfig::default() },
            TrainConfig { dropout_keep: 0.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
