//! Minibatch SGD with momentum over [`Network`] parameters.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Eager;
use crate::network::{forward, Network};
use crate::ops;
use crate::rng::{substream, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// `(epoch, factor)`: from that 1-based epoch on, the rate is multiplied by `factor`.
    #[serde(default)]
    pub lr_schedule: Vec<(usize, f64)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 16,
            epochs: 20,
            seed: 0,
            lr_schedule: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate {} is not a finite non-negative number",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .fold(self.learning_rate, |lr, (_, f)| lr * f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
}

/// Per-epoch metrics; epoch 0 is the untrained network.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn best_train_acc(&self) -> f64 {
        self.records.iter().map(|r| r.train_acc).fold(0.0, f64::max)
    }

    /// `epoch,loss,train_acc,eval_acc` with exact float round-tripping.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::format(format!("csv: {e}"));
        w.write_record(["epoch", "loss", "train_acc", "eval_acc"])
            .map_err(err)?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                format!("{:?}", r.loss),
                format!("{:?}", r.train_acc),
                r.eval_acc.map(|a| format!("{a:?}")).unwrap_or_default(),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn check_data(net: &Network, data: &Dataset) -> Result<()> {
    let (c, h, w) = data.image_dims();
    let i = net.arch.input_shape;
    if (c, h, w) != (i.c, i.h, i.w) {
        return Err(Error::shape(format!(
            "dataset images are ({c}, {h}, {w}) but the network expects ({}, {}, {})",
            i.c, i.h, i.w
        )));
    }
    let (classes, _, _) = net.arch.output_shape()?;
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!(
            "label {bad} exceeds classifier width {classes}"
        )));
    }
    Ok(())
}

const EVAL_CHUNK: usize = 64;

/// `(mean loss, accuracy)` over the whole dataset; chunks run in parallel and are reduced in order.
pub fn loss_and_accuracy(net: &Network, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    check_data(net, data)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let parts = idx
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let (x, labels) = data.batch(chunk)?;
            let logits = forward(&mut Eager::new(), &net.arch, &net.params, &x)?;
            let (loss, _) = ops::softmax_cross_entropy(&logits, &labels)?;
            let hits = ops::argmax_classes(&logits)
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            Ok((loss * chunk.len() as f64, hits))
        })
        .collect::<Result<Vec<(f64, usize)>>>()?;
    let (mut loss, mut hits) = (0.0, 0);
    for (l, h) in parts {
        loss += l;
        hits += h;
    }
    let n = data.len() as f64;
    Ok((loss / n, hits as f64 / n))
}

pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64> {
    loss_and_accuracy(net, data).map(|(_, acc)| acc)
}

/// Mean loss of one batch and its parameter gradients.
pub fn batch_gradients(net: &Network, x: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let params: Vec<_> = net.params.iter().map(|p| g.leaf(p.clone())).collect();
    let input = g.leaf(x.clone());
    let logits = forward(&mut g, &net.arch, &params, &input)?;
    let loss = g.softmax_cross_entropy(logits, labels)?;
    g.backward(loss)?;
    let grads = params
        .iter()
        .map(|id| {
            g.grad(*id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(*id).shape()))
        })
        .collect();
    Ok((g.scalar(loss)?, grads))
}

/// Train in place. Batch order comes from the shuffle stream of `cfg.seed`, so runs are reproducible.
pub fn train(net: &mut Network, data: &Dataset, cfg: &TrainConfig, eval: Option<&Dataset>) -> Result<History> {
    cfg.validate()?;
    check_data(net, data)?;
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let record = |net: &Network, epoch: usize| -> Result<EpochRecord> {
        let (loss, train_acc) = loss_and_accuracy(net, data)?;
        Ok(EpochRecord {
            epoch,
            loss,
            train_acc,
            eval_acc: eval.map(|e| evaluate(net, e)).transpose()?,
        })
    };
    let mut history = History {
        records: vec![record(net, 0)?],
    };
    let mut velocity: Vec<Tensor> = net.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut substream(cfg.seed, Stream::Shuffle, epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = data.batch(chunk)?;
            let (_, grads) = batch_gradients(net, &x, &labels)?;
            for ((p, v), g) in net.params.iter_mut().zip(&mut velocity).zip(&grads) {
                *v = v.axpby(cfg.momentum, g, 1.0)?;
                *p = p.axpby(1.0, v, -lr)?;
            }
        }
        if net.params.iter().any(|p| p.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid(format!("training diverged in epoch {epoch}")));
        }
        history.records.push(record(net, epoch)?);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_stripes;
    use crate::zoo::toy_cnn;

    #[test]
    fn zero_lr_keeps_loss_flat() {
        let data = synth_stripes(16, 8, 0.1, 1).unwrap();
        let mut net = Network::init(toy_cnn(1, 8, 2), 1).unwrap();
        let before = net.clone();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            ..TrainConfig::default()
        };
        let h = train(&mut net, &data, &cfg, None).unwrap();
        assert_eq!(net, before);
        assert!(h.records.windows(2).all(|w| w[0].loss == w[1].loss));
    }

    #[test]
    fn schedule_multiplies() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            lr_schedule: vec![(3, 0.5), (5, 0.1)],
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(2), 1.0);
        assert_eq!(cfg.lr_at(3), 0.5);
        assert!((cfg.lr_at(6) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn label_range_is_checked() {
        let mut data = synth_stripes(4, 8, 0.0, 1).unwrap();
        data.labels[0] = 5;
        let mut net = Network::init(toy_cnn(1, 8, 2), 1).unwrap();
        assert!(train(&mut net, &data, &TrainConfig::default(), None).is_err());
    }
}
