//! Reproducible SGD training: momentum, additive weight decay, cosine
//! annealing from the base rate to zero over the total step count, and
//! line-delimited JSON metrics.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::nn::Mode;
use crate::tensor::{no_grad, Tensor};
use crate::util::mix64;

const SEED_SHUFFLE: u64 = 0x5348_5546;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults; momentum and decay follow the full-scale recipe.
    pub fn toy(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lr > 0.0) && self.lr != 0.0 {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) && self.momentum != 0.0 {
            return Err(Error::Config(format!("bad momentum {}", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!("bad weight decay {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// lr(t) = base * (1 + cos(pi t / T)) / 2: the base rate at t = 0, half at
/// t = T/2, zero at t = T.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()) / 2.0
}

/// SGD with momentum; weight decay enters the gradient additively, so a
/// zero learning rate is a strict parameter no-op.
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    pub fn new(params: &[(String, Tensor)], momentum: f64, weight_decay: f64) -> Sgd {
        Sgd {
            velocity: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            momentum,
            weight_decay,
        }
    }

    /// One update; consumes and clears every parameter's gradient.
    pub fn step(&mut self, params: &[(String, Tensor)], lr: f64) -> Result<()> {
        for ((name, p), vel) in params.iter().zip(self.velocity.iter_mut()) {
            let grad = p.grad_vec().ok_or_else(|| {
                Error::Numeric(format!("parameter '{name}' received no gradient"))
            })?;
            p.update_data(|w| {
                for i in 0..w.len() {
                    let g = grad[i] + self.weight_decay * w[i];
                    vel[i] = self.momentum * vel[i] + g;
                    w[i] -= lr * vel[i];
                }
            });
            p.zero_grad();
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub first_epoch_loss: f64,
    pub final_epoch_loss: f64,
}

/// Trains the network in place. Metrics are returned and, when a path is
/// given, appended as one JSON record per epoch. Divergence (non-finite
/// loss) aborts with a diagnostic naming the epoch and step.
pub fn train(
    net: &Network,
    train_set: &Dataset,
    val_set: &Dataset,
    tc: &TrainConfig,
    metrics_path: Option<&Path>,
) -> Result<TrainOutcome> {
    tc.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    net.reseed_noise(tc.seed);
    let params = net.params();
    let mut sgd = Sgd::new(&params, tc.momentum, tc.weight_decay);
    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(mix64(tc.seed, SEED_SHUFFLE));
    let steps_per_epoch = train_set.len().div_ceil(tc.batch_size);
    let total_steps = steps_per_epoch * tc.epochs;

    let mut metrics_file = match metrics_path {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => None,
    };

    let mut indices: Vec<usize> = (0..train_set.len()).collect();
    let mut metrics = Vec::with_capacity(tc.epochs);
    let mut step = 0usize;
    for epoch in 0..tc.epochs {
        // Fisher-Yates shuffle from the dedicated stream.
        for i in (1..indices.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            indices.swap(i, j);
        }
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in indices.chunks(tc.batch_size) {
            let lr = cosine_lr(tc.lr, step, total_steps);
            let batch = train_set.batch(chunk);
            let labels = train_set.labels_of(chunk);
            let logits = net.forward(&batch, Mode::Train)?;
            let loss = logits.cross_entropy(&labels)?;
            let loss_val = loss.item();
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged: loss {loss_val} at epoch {epoch} step {step}"
                )));
            }
            loss.backward()?;
            sgd.step(&params, lr)?;
            loss_sum += loss_val * chunk.len() as f64;
            seen += chunk.len();
            step += 1;
        }
        let train_loss = loss_sum / seen as f64;
        let val_acc = evaluate(net, val_set)?.accuracy;
        let rec = EpochMetrics {
            epoch,
            lr: cosine_lr(tc.lr, step.saturating_sub(1), total_steps),
            train_loss,
            val_acc,
        };
        if let Some(f) = metrics_file.as_mut() {
            let line = serde_json::to_string(&rec)
                .map_err(|e| Error::Data(format!("metrics encode: {e}")))?;
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        metrics.push(rec);
    }
    Ok(TrainOutcome {
        first_epoch_loss: metrics.first().map_or(0.0, |m| m.train_loss),
        final_epoch_loss: metrics.last().map_or(0.0, |m| m.train_loss),
        metrics,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    pub correct: usize,
    pub total: usize,
}

/// Deterministic eval-mode top-1 accuracy with a per-class breakdown.
pub fn evaluate(net: &Network, ds: &Dataset) -> Result<EvalResult> {
    let _guard = no_grad();
    let classes = net.cfg.num_classes;
    let mut correct = 0usize;
    let mut class_total = vec![0usize; classes];
    let mut class_correct = vec![0usize; classes];
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(64) {
        let batch = ds.batch(chunk);
        let labels = ds.labels_of(chunk);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let logits = net.forward(&batch, Mode::Eval)?;
        let d = logits.data();
        for (row, &label) in labels.iter().enumerate() {
            let scores = &d[row * classes..(row + 1) * classes];
            let mut best = 0usize;
            for (i, &v) in scores.iter().enumerate() {
                if v > scores[best] {
                    best = i;
                }
            }
            class_total[label] += 1;
            if best == label {
                correct += 1;
                class_correct[label] += 1;
            }
        }
    }
    Ok(EvalResult {
        accuracy: correct as f64 / ds.len() as f64,
        per_class: class_correct
            .iter()
            .zip(&class_total)
            .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
            .collect(),
        correct,
        total: ds.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetSpec, Split};
    use crate::model::{NetworkConfig, StageConfig};

    fn tiny_net_cfg() -> NetworkConfig {
        NetworkConfig {
            input_side: 32,
            stem_pools: 1,
            stem_channels: 8,
            stages: vec![StageConfig { channels: 8, blocks: 1 }],
            k: 3,
            r1: 1,
            r2: 4,
            r3: 2,
            ..NetworkConfig::toy()
        }
    }

    fn tiny_data(dir: &Path) -> (Dataset, Dataset) {
        let spec = DatasetSpec { n_per_class: 5, side: 32, seed: 100 };
        generate_dataset(&spec, dir).unwrap();
        (
            Dataset::load(dir, Split::Train).unwrap(),
            Dataset::load(dir, Split::Val).unwrap(),
        )
    }

    #[test]
    fn cosine_schedule_closed_form() {
        assert_eq!(cosine_lr(0.05, 0, 100), 0.05);
        assert!((cosine_lr(0.05, 50, 100) - 0.025).abs() < 1e-15);
        assert!(cosine_lr(0.05, 100, 100).abs() < 1e-17);
    }

    #[test]
    fn zero_lr_is_a_strict_no_op() {
        let dir = tempfile::tempdir().unwrap();
        let (train_set, val_set) = tiny_data(dir.path());
        let net = Network::new(tiny_net_cfg(), 42).unwrap();
        let before: Vec<Vec<f64>> = net.params().iter().map(|(_, t)| t.to_vec()).collect();
        let tc = TrainConfig {
            epochs: 1,
            lr: 0.0,
            ..TrainConfig::toy(42)
        };
        train(&net, &train_set, &val_set, &tc, None).unwrap();
        for ((_, t), b) in net.params().iter().zip(&before) {
            let a = t.to_vec();
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let (train_set, val_set) = tiny_data(dir.path());
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 8,
            lr: 0.02,
            ..TrainConfig::toy(7)
        };
        let run = || {
            let net = Network::new(tiny_net_cfg(), tc.seed).unwrap();
            let out = train(&net, &train_set, &val_set, &tc, None).unwrap();
            let params: Vec<Vec<f64>> = net.params().iter().map(|(_, t)| t.to_vec()).collect();
            (out.metrics, params)
        };
        let (m1, p1) = run();
        let (m2, p2) = run();
        for (a, b) in m1.iter().zip(&m2) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.val_acc.to_bits(), b.val_acc.to_bits());
        }
        for (a, b) in p1.iter().zip(&p2) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn weight_decay_shrinks_parameter_norms() {
        let dir = tempfile::tempdir().unwrap();
        let (train_set, val_set) = tiny_data(dir.path());
        let norm_after = |decay: f64| {
            let net = Network::new(tiny_net_cfg(), 5).unwrap();
            let tc = TrainConfig {
                epochs: 2,
                batch_size: 8,
                lr: 0.02,
                weight_decay: decay,
                ..TrainConfig::toy(5)
            };
            train(&net, &train_set, &val_set, &tc, None).unwrap();
            net.params()
                .iter()
                .map(|(_, t)| t.to_vec().iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt()
        };
        let with = norm_after(0.05);
        let without = norm_after(0.0);
        assert!(
            without > with,
            "norm without decay {without} should exceed {with}"
        );
    }

    #[test]
    fn metrics_file_is_line_delimited_json() {
        let dir = tempfile::tempdir().unwrap();
        let (train_set, val_set) = tiny_data(dir.path());
        let net = Network::new(tiny_net_cfg(), 1).unwrap();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 8,
            lr: 0.01,
            ..TrainConfig::toy(1)
        };
        let mpath = dir.path().join("metrics.jsonl");
        let out = train(&net, &train_set, &val_set, &tc, Some(&mpath)).unwrap();
        assert_eq!(out.metrics.len(), 2);
        let raw = std::fs::read_to_string(&mpath).unwrap();
        let lines: Vec<&str> = raw.lines().collect();
        assert_eq!(lines.len(), 2);
        for line in lines {
            let rec: EpochMetrics = serde_json::from_str(line).unwrap();
            assert!(rec.train_loss.is_finite());
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (_, val_set) = tiny_data(dir.path());
        let net = Network::new(tiny_net_cfg(), 2).unwrap();
        let a = evaluate(&net, &val_set).unwrap();
        let b = evaluate(&net, &val_set).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.per_class, b.per_class);
        assert_eq!(a.total, val_set.len());
    }
}
