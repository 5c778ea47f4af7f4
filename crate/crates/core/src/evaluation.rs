//! Linear probing on frozen encoder features, and the Final / Average
//! accuracy summaries.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gemm, Tensor};
use crate::error::{Error, Result};
use crate::networks::{Learner, Mlp, Mode};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub batch: usize,
    pub lr_init: f64,
    pub lr_decay_factor: f64,
    pub max_epochs: usize,
    pub lr_min: f64,
    /// Epochs without validation improvement before the rate is divided.
    pub patience: usize,
    pub momentum: f64,
    /// Share of the probe's training features held out for the schedule.
    pub validation_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            batch: 256,
            lr_init: 0.05,
            lr_decay_factor: 3.0,
            max_epochs: 100,
            lr_min: 1e-4,
            patience: 5,
            momentum: 0.9,
            validation_fraction: 0.1,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch > 0
            && self.lr_init > 0.0
            && self.lr_decay_factor > 1.0
            && self.max_epochs > 0
            && self.lr_min > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && (0.0..1.0).contains(&self.validation_fraction);
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "invalid probe config {self:?}"
            )));
        }
        Ok(())
    }
}

/// Encoder representations (pre-projector) in eval mode; no graph is kept.
pub fn extract_features(encoder: &Mlp, inputs: &Tensor) -> Result<Tensor> {
    encoder.infer(inputs, Mode::Eval)
}

pub fn learner_features(learner: &Learner, inputs: &Tensor) -> Result<Tensor> {
    extract_features(&learner.encoder, inputs)
}

/// Multinomial logistic classifier over standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    weight: Vec<f64>,
    bias: Vec<f64>,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    classes: usize,
    /// Learning rate used in each epoch.
    pub lr_history: Vec<f64>,
    pub best_validation_accuracy: f64,
    pub epochs_run: usize,
}

impl LinearProbe {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn logits(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let d = self.dim();
        let z = standardize(x, rows, &self.mean, &self.inv_std);
        let mut out = vec![0.0; rows * self.classes];
        for r in 0..rows {
            out[r * self.classes..(r + 1) * self.classes].copy_from_slice(&self.bias);
        }
        gemm(
            rows,
            d,
            self.classes,
            &z,
            false,
            &self.weight,
            false,
            &mut out,
            true,
        );
        out
    }

    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        if features.cols() != self.dim() {
            return Err(Error::shape(
                "probe predict",
                format!("{} features, expected {}", features.cols(), self.dim()),
            ));
        }
        let rows = features.rows();
        let logits = self.logits(features.data(), rows);
        Ok(logits.chunks(self.classes).map(argmax).collect())
    }

    pub fn accuracy(&self, features: &Tensor, labels: &[usize]) -> Result<f64> {
        if features.rows() != labels.len() {
            return Err(Error::shape("probe accuracy", "rows differ from labels"));
        }
        if labels.is_empty() {
            return Err(Error::InvalidArgument("accuracy of an empty set".into()));
        }
        let pred = self.predict(features)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn standardize(x: &[f64], rows: usize, mean: &[f64], inv_std: &[f64]) -> Vec<f64> {
    let d = mean.len();
    let mut z = x.to_vec();
    for r in 0..rows {
        for k in 0..d {
            z[r * d + k] = (z[r * d + k] - mean[k]) * inv_std[k];
        }
    }
    z
}

/// Trains a probe with SGD and the plateau schedule: the rate is divided by
/// `lr_decay_factor` after `patience` epochs without validation gain, and
/// training stops below `lr_min` or at `max_epochs`. Returns the
/// best-validation snapshot.
pub fn train_probe(
    features: &Tensor,
    labels: &[usize],
    class_count: usize,
    config: &ProbeConfig,
    seed: u64,
) -> Result<LinearProbe> {
    config.validate()?;
    let features = features.as_matrix();
    let (n, d) = (features.rows(), features.cols());
    if n != labels.len() {
        return Err(Error::shape("train_probe", "rows differ from labels"));
    }
    if !features.is_finite() {
        return Err(Error::InvalidArgument(
            "probe features must be finite".into(),
        ));
    }
    if labels.iter().any(|&l| l >= class_count) {
        return Err(Error::InvalidArgument("label outside class range".into()));
    }
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::InvalidArgument(
            "probe needs at least two classes".into(),
        ));
    }

    let mut rng = rng::derive(seed, "probe");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((n as f64) * config.validation_fraction).round() as usize;
    let (val_idx, train_idx) = if n_val == 0 || n_val >= n {
        (order.clone(), order)
    } else {
        let (v, t) = order.split_at(n_val);
        (v.to_vec(), t.to_vec())
    };

    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for &i in &train_idx {
        for (k, m) in mean.iter_mut().enumerate() {
            *m += features.row(i)[k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= train_idx.len() as f64);
    for &i in &train_idx {
        for k in 0..d {
            var[k] += (features.row(i)[k] - mean[k]).powi(2);
        }
    }
    let inv_std: Vec<f64> = var
        .iter()
        .map(|v| {
            let s = (v / train_idx.len() as f64).sqrt();
            if s > 1e-12 {
                1.0 / s
            } else {
                1.0
            }
        })
        .collect();

    let c = class_count;
    let mut probe = LinearProbe {
        weight: vec![0.0; d * c],
        bias: vec![0.0; c],
        mean,
        inv_std,
        classes: c,
        lr_history: Vec::new(),
        best_validation_accuracy: -1.0,
        epochs_run: 0,
    };
    let val_x = features.select_rows(&val_idx);
    let val_y: Vec<usize> = val_idx.iter().map(|&i| labels[i]).collect();

    let mut best = probe.clone();
    let mut vel_w = vec![0.0; d * c];
    let mut vel_b = vec![0.0; c];
    let mut lr = config.lr_init;
    let mut stale = 0;
    let mut train_order = train_idx;
    for epoch in 0..config.max_epochs {
        if lr < config.lr_min {
            break;
        }
        probe.lr_history.push(lr);
        train_order.shuffle(&mut rng);
        for batch in train_order.chunks(config.batch) {
            let bsz = batch.len();
            let x = features.select_rows(batch);
            let z = standardize(x.data(), bsz, &probe.mean, &probe.inv_std);
            let mut g = probe.logits(x.data(), bsz);
            for (r, &i) in batch.iter().enumerate() {
                let row = &mut g[r * c..(r + 1) * c];
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                row.iter_mut().for_each(|v| {
                    *v = (*v - mx).exp();
                    total += *v;
                });
                row.iter_mut().for_each(|v| *v /= total * bsz as f64);
                row[labels[i]] -= 1.0 / bsz as f64;
            }
            let mut gw = vec![0.0; d * c];
            gemm(d, bsz, c, &z, true, &g, false, &mut gw, false);
            for (k, v) in vel_w.iter_mut().enumerate() {
                *v = config.momentum * *v + gw[k];
                probe.weight[k] -= lr * *v;
            }
            for (j, v) in vel_b.iter_mut().enumerate() {
                let gb: f64 = (0..bsz).map(|r| g[r * c + j]).sum();
                *v = config.momentum * *v + gb;
                probe.bias[j] -= lr * *v;
            }
        }
        probe.epochs_run = epoch + 1;
        let acc = probe.accuracy(&val_x, &val_y)?;
        if acc > best.best_validation_accuracy {
            probe.best_validation_accuracy = acc;
            best = probe.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                lr /= config.lr_decay_factor;
                stale = 0;
            }
        }
    }
    best.lr_history = probe.lr_history;
    best.epochs_run = probe.epochs_run;
    Ok(best)
}

/// Trains a probe on `(train_x, train_y)` features and scores it on the
/// test features.
pub fn probe_accuracy(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    class_count: usize,
    config: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    train_probe(train_x, train_y, class_count, config, seed)?.accuracy(test_x, test_y)
}

/// Probe accuracies taken after each experience.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AccuracyRecord {
    pub per_experience: Vec<f64>,
}

impl AccuracyRecord {
    pub fn push(&mut self, acc: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::InvalidArgument(format!(
                "accuracy {acc} outside [0, 1]"
            )));
        }
        self.per_experience.push(acc);
        Ok(())
    }

    pub fn summary(&self) -> Result<(f64, f64)> {
        final_and_average_accuracy(&self.per_experience)
    }
}

/// `(a_T, mean of a_1..a_T)`.
pub fn final_and_average_accuracy(records: &[f64]) -> Result<(f64, f64)> {
    let Some(&last) = records.last() else {
        return Err(Error::InvalidArgument("no accuracy records".into()));
    };
    Ok((last, records.iter().sum::<f64>() / records.len() as f64))
}
