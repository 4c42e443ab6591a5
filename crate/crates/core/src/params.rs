//! Named parameter tensors and the Adam optimizer that updates them.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tape::{Gradients, Tape, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Zero-mean Gaussian init with std `1/sqrt(fan_in)`.
    pub fn insert_random<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        let std = 1.0 / (rows.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let value = Array2::from_shape_fn((rows, cols), |_| normal.sample(rng));
        self.insert(name, value)
    }

    pub fn insert_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.insert(name, Array2::zeros((rows, cols)))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Binds a parameter onto a tape.
    pub fn bind(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(id.0, &self.values[id.0])
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Rounds every entry to the nearest `f32`, so a store survives the
    /// 32-bit checkpoint format unchanged.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x as f32 as f64);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`]; missing entries are zero.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Array2<f64>>>,
}

impl ParamGrads {
    pub fn zeros(n: usize) -> Self {
        ParamGrads {
            grads: vec![None; n],
        }
    }

    /// Adds the gradients from `g` for the parameters accepted by `keep`.
    pub fn absorb(&mut self, g: &Gradients, keep: impl Fn(ParamId) -> bool) {
        for (id, grad) in g.params() {
            if !keep(ParamId(id)) {
                continue;
            }
            match &mut self.grads[id] {
                Some(existing) => *existing += grad,
                slot @ None => *slot = Some(grad.clone()),
            }
        }
    }

    /// Adds `k` times the accepted gradients from `g`.
    pub fn absorb_scaled(&mut self, g: &Gradients, k: f64, keep: impl Fn(ParamId) -> bool) {
        for (id, grad) in g.params() {
            if !keep(ParamId(id)) {
                continue;
            }
            match &mut self.grads[id] {
                Some(existing) => existing.scaled_add(k, grad),
                slot @ None => *slot = Some(grad * k),
            }
        }
    }

    /// Element-wise sum with `other`.
    pub fn add(&mut self, other: &ParamGrads) {
        for (slot, g) in self.grads.iter_mut().zip(&other.grads) {
            let Some(g) = g else { continue };
            match slot {
                Some(existing) => *existing += g,
                None => *slot = Some(g.clone()),
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()))
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    /// Euclidean norm over the selected parameters.
    pub fn norm_of(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .filter_map(|id| self.grads[id.0].as_ref())
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * k);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<_> = store
            .values
            .iter()
            .map(|p| Array2::zeros(p.raw_dim()))
            .collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, g) in grads.grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut store.values[i])
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Array2::from_elem((1, 2), 3.0));
        let mut opt = Adam::new(&store, AdamConfig::default());
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let x = store.bind(&mut tape, id);
            let sq = tape.square(x);
            let loss = tape.sum(sq);
            let g = tape.backward(loss);
            let mut pg = ParamGrads::zeros(store.len());
            pg.absorb(&g, |_| true);
            opt.step(&mut store, &pg, 0.01);
        }
        assert!(store.get(id).iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn f32_rounding_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.insert_random("w", 4, 4, &mut rng);
        store.round_to_f32();
        let before = store.clone();
        store.round_to_f32();
        assert_eq!(before, store);
    }
}
