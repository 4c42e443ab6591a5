//! Three-layer classifier probe over frozen latent codes.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VqgError};
use crate::params::{Adam, AdamConfig, ParamGrads, ParamStore};
use crate::seeding;
use crate::tape::Tape;

/// Probe architecture and optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden1: usize,
    pub hidden2: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden1: 64,
            hidden2: 64,
            epochs: 40,
            lr: 0.003,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Held-out accuracy of a probe and the chance level for its label set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy_pct: f64,
    pub chance_pct: f64,
}

struct Standardizer {
    mean: Array2<f64>,
    scale: Array2<f64>,
}

impl Standardizer {
    fn fit(x: &Array2<f64>) -> Self {
        let mean = x.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        let var = x.var_axis(Axis(0), 0.0).insert_axis(Axis(0));
        Standardizer {
            mean,
            scale: var.mapv(|v| 1.0 / v.sqrt().max(1e-8)),
        }
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.mean) * &self.scale
    }
}

struct Mlp {
    store: ParamStore,
}

impl Mlp {
    fn new(input: usize, config: &ProbeConfig, classes: usize) -> Self {
        let mut rng = seeding::rng(seeding::derive(config.seed, 0x9B0E));
        let mut store = ParamStore::new();
        for (name, i, o) in [
            ("l1", input, config.hidden1),
            ("l2", config.hidden1, config.hidden2),
            ("l3", config.hidden2, classes),
        ] {
            store.insert_random(&format!("{name}.w"), i, o, &mut rng);
            store.insert_zeros(&format!("{name}.b"), 1, o);
        }
        Mlp { store }
    }

    fn logits(&self, tape: &mut Tape, x: &Array2<f64>) -> crate::tape::Var {
        let mut h = tape.constant(x.clone());
        for (k, name) in ["l1", "l2", "l3"].into_iter().enumerate() {
            let w = self.store.bind(tape, self.store.id(&format!("{name}.w")).unwrap());
            let b = self.store.bind(tape, self.store.id(&format!("{name}.b")).unwrap());
            let hw = tape.matmul(h, w);
            h = tape.add_row(hw, b);
            if k < 2 {
                h = tape.relu(h);
            }
        }
        h
    }

    fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        let mut tape = Tape::new();
        let l = self.logits(&mut tape, x);
        tape.value(l)
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (k, v) in r.iter().enumerate() {
                    if *v > r[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

fn rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

/// Trains the probe on the training codes and returns test accuracy.
pub fn probe_accuracy(
    train_codes: &Array2<f64>,
    train_labels: &[usize],
    test_codes: &Array2<f64>,
    test_labels: &[usize],
    num_classes: usize,
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    if train_codes.nrows() != train_labels.len() || test_codes.nrows() != test_labels.len() {
        return Err(VqgError::Shape("code rows and label counts differ".into()));
    }
    if train_codes.ncols() != test_codes.ncols() {
        return Err(VqgError::Shape("train and test codes differ in width".into()));
    }
    if test_labels.is_empty() {
        return Err(VqgError::Data("probe test set is empty".into()));
    }
    if let Some(bad) = train_labels.iter().chain(test_labels).find(|&&l| l >= num_classes) {
        return Err(VqgError::Data(format!("label {bad} outside {num_classes} classes")));
    }
    let mut distinct = train_labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(VqgError::Degenerate("probe training labels contain a single class".into()));
    }
    let std = Standardizer::fit(train_codes);
    let xtr = std.apply(train_codes);
    let xte = std.apply(test_codes);
    let mut mlp = Mlp::new(xtr.ncols(), config, num_classes);
    let mut opt = Adam::new(&mlp.store, AdamConfig::default());
    let mut rng = seeding::rng(seeding::derive(config.seed, 0x5EED));
    let mut order: Vec<usize> = (0..xtr.nrows()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(config.batch_size.max(1)) {
            let mut tape = Tape::new();
            let logits = mlp.logits(&mut tape, &rows(&xtr, idx));
            let targets: Vec<usize> = idx.iter().map(|&i| train_labels[i]).collect();
            let weights = vec![1.0 / idx.len() as f64; idx.len()];
            let loss = tape.softmax_xent(logits, &targets, &weights);
            let mut grads = ParamGrads::zeros(mlp.store.len());
            grads.absorb(&tape.backward(loss), |_| true);
            opt.step(&mut mlp.store, &grads, config.lr);
        }
    }
    let pred = mlp.predict(&xte);
    let correct = pred.iter().zip(test_labels).filter(|(p, l)| p == l).count();
    Ok(ProbeResult {
        accuracy_pct: 100.0 * correct as f64 / test_labels.len() as f64,
        chance_pct: 100.0 / num_classes as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::latent::standard_normal_matrix;

    fn one_hot_codes(labels: &[usize], classes: usize, seed: u64) -> Array2<f64> {
        let noise = standard_normal_matrix(labels.len(), classes, seed);
        Array2::from_shape_fn((labels.len(), classes), |(r, c)| {
            f64::from(labels[r] == c) + 0.01 * noise[[r, c]]
        })
    }

    #[test]
    fn single_class_is_degenerate() {
        let x = Array2::zeros((5, 3));
        let r = probe_accuracy(&x, &[2; 5], &x, &[2; 5], 6, &ProbeConfig::default());
        assert!(matches!(r, Err(VqgError::Degenerate(_))));
    }

    #[test]
    fn separable_codes_are_recovered() {
        let labels: Vec<usize> = (0..300).map(|i| i % 6).collect();
        let test: Vec<usize> = (0..120).map(|i| (i * 7) % 6).collect();
        let r = probe_accuracy(
            &one_hot_codes(&labels, 6, 1),
            &labels,
            &one_hot_codes(&test, 6, 2),
            &test,
            6,
            &ProbeConfig { epochs: 20, ..ProbeConfig::default() },
        )
        .unwrap();
        assert!(r.accuracy_pct > 95.0, "{r:?}");
        assert!((r.chance_pct - 100.0 / 6.0).abs() < 1e-12);
    }
}
