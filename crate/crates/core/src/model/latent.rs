//! Diagonal-Gaussian latent heads for the z and t spaces, the
//! reparameterized sampler, and closed-form KL divergences.

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Linear, Model};
use crate::error::{Result, VqgError};
use crate::seeding;
use crate::tape::{Tape, Var};

pub const LOG_SIGMA_MIN: f64 = -8.0;
pub const LOG_SIGMA_MAX: f64 = 8.0;

/// Mean and log standard deviation of a diagonal Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl GaussianParams {
    /// Builds the parameters, clamping `log_sigma` into `[-8, 8]`.
    pub fn new(mu: Vec<f64>, log_sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != log_sigma.len() {
            return Err(VqgError::Shape(format!(
                "mu has {} dims but log_sigma has {}",
                mu.len(),
                log_sigma.len()
            )));
        }
        if mu.iter().chain(&log_sigma).any(|x| !x.is_finite()) {
            return Err(VqgError::Validation("Gaussian parameters must be finite".into()));
        }
        let log_sigma = log_sigma
            .into_iter()
            .map(|x| x.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX))
            .collect();
        Ok(GaussianParams { mu, log_sigma })
    }

    pub fn standard(dim: usize) -> Self {
        GaussianParams {
            mu: vec![0.0; dim],
            log_sigma: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// A reparameterized draw together with the noise that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub value: Vec<f64>,
    pub noise: Vec<f64>,
}

/// `mu + exp(log_sigma) * eps`.
pub fn reparameterize(p: &GaussianParams, eps: &[f64]) -> Result<LatentSample> {
    if eps.len() != p.dim() {
        return Err(VqgError::Shape(format!(
            "noise has {} dims, latent has {}",
            eps.len(),
            p.dim()
        )));
    }
    let value = p
        .mu
        .iter()
        .zip(&p.log_sigma)
        .zip(eps)
        .map(|((m, s), e)| m + s.exp() * e)
        .collect();
    Ok(LatentSample {
        value,
        noise: eps.to_vec(),
    })
}

/// Draws `eps ~ N(0, I)` from `seed`, then reparameterizes.
pub fn reparameterize_seeded(p: &GaussianParams, seed: u64) -> LatentSample {
    let eps = standard_normal_vec(p.dim(), seed);
    reparameterize(p, &eps).expect("noise matches dimension")
}

pub fn standard_normal_vec(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeding::rng(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

pub fn standard_normal_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = seeding::rng(seed);
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
}

/// KL(p || q) between diagonal Gaussians, summed over dimensions.
pub fn kl_between(p: &GaussianParams, q: &GaussianParams) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(VqgError::Shape(format!(
            "KL between {}-dim and {}-dim Gaussians",
            p.dim(),
            q.dim()
        )));
    }
    let mut total = 0.0;
    for k in 0..p.dim() {
        let (mp, sp) = (p.mu[k], p.log_sigma[k]);
        let (mq, sq) = (q.mu[k], q.log_sigma[k]);
        let var_p = (2.0 * sp).exp();
        let var_q = (2.0 * sq).exp();
        total += sq - sp + (var_p + (mp - mq).powi(2)) / (2.0 * var_q) - 0.5;
    }
    Ok(total)
}

/// KL(p || N(0, I)).
pub fn kl_to_standard_normal(p: &GaussianParams) -> f64 {
    kl_between(p, &GaussianParams::standard(p.dim())).expect("same dimension")
}

// ---------------------------------------------------------------------------
// Batched tape versions

/// Batched Gaussian parameters on a tape (each B x Z).
#[derive(Clone, Copy, Debug)]
pub struct GaussVars {
    pub mu: Var,
    pub log_sigma: Var,
}

impl GaussVars {
    pub fn detached(&self, tape: &mut Tape) -> GaussVars {
        GaussVars {
            mu: tape.detach(self.mu),
            log_sigma: tape.detach(self.log_sigma),
        }
    }

    pub fn row(&self, tape: &Tape, r: usize) -> GaussianParams {
        GaussianParams {
            mu: tape.value(self.mu).row(r).to_vec(),
            log_sigma: tape.value(self.log_sigma).row(r).to_vec(),
        }
    }
}

fn gaussian_head(tape: &mut Tape, model: &Model, mu: Linear, ls: Linear, a: Var, b: Var) -> GaussVars {
    let x = tape.concat(&[a, b]);
    let m = mu.apply(tape, &model.store, x);
    let raw = ls.apply(tape, &model.store, x);
    let log_sigma = tape.clamp(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX);
    GaussVars { mu: m, log_sigma }
}

/// Posterior over z from `[h_i; h_a]`.
pub fn z_head(tape: &mut Tape, model: &Model, h_i: Var, h_a: Var) -> GaussVars {
    gaussian_head(tape, model, model.ids.z_mu, model.ids.z_log_sigma, h_i, h_a)
}

/// Posterior over t from `[h_i; h_c]`.
pub fn t_head(tape: &mut Tape, model: &Model, h_i: Var, h_c: Var) -> GaussVars {
    gaussian_head(tape, model, model.ids.t_mu, model.ids.t_log_sigma, h_i, h_c)
}

/// `mu + exp(log_sigma) * eps` with `eps` held constant.
pub fn reparameterize_vars(tape: &mut Tape, g: GaussVars, eps: Array2<f64>) -> Var {
    let sigma = tape.exp(g.log_sigma);
    let e = tape.constant(eps);
    let scaled = tape.mul(sigma, e);
    tape.add(g.mu, scaled)
}

/// KL(p || q) summed over every row and dimension.
pub fn kl_vars(tape: &mut Tape, p: GaussVars, q: GaussVars) -> Var {
    let log_ratio = tape.sub(q.log_sigma, p.log_sigma);
    let two_sp = tape.scale(p.log_sigma, 2.0);
    let var_p = tape.exp(two_sp);
    let dmu = tape.sub(p.mu, q.mu);
    let dmu2 = tape.square(dmu);
    let num = tape.add(var_p, dmu2);
    let neg_two_sq = tape.scale(q.log_sigma, -2.0);
    let inv_var_q = tape.exp(neg_two_sq);
    let frac = tape.mul(num, inv_var_q);
    let half = tape.scale(frac, 0.5);
    let per = tape.add(log_ratio, half);
    let per = tape.offset(per, -0.5);
    tape.sum(per)
}

/// KL(p || N(0, I)) summed over every row and dimension.
pub fn kl_standard_vars(tape: &mut Tape, p: GaussVars) -> Var {
    let two_sp = tape.scale(p.log_sigma, 2.0);
    let var_p = tape.exp(two_sp);
    let mu2 = tape.square(p.mu);
    let num = tape.add(var_p, mu2);
    let half = tape.scale(num, 0.5);
    let per = tape.sub(half, p.log_sigma);
    let per = tape.offset(per, -0.5);
    tape.sum(per)
}

fn row_input(tape: &mut Tape, v: &[f64]) -> Var {
    tape.constant(Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap())
}

impl Model {
    fn head_vec(&self, a: &[f64], b: &[f64], z: bool) -> Result<GaussianParams> {
        let h = self.dims.hidden;
        if a.len() != h || b.len() != h {
            return Err(VqgError::Shape(format!(
                "latent head inputs must have {h} dims (got {} and {})",
                a.len(),
                b.len()
            )));
        }
        let mut tape = Tape::new();
        let (va, vb) = (row_input(&mut tape, a), row_input(&mut tape, b));
        let g = if z {
            z_head(&mut tape, self, va, vb)
        } else {
            t_head(&mut tape, self, va, vb)
        };
        Ok(g.row(&tape, 0))
    }

    pub fn z_head_vec(&self, h_i: &[f64], h_a: &[f64]) -> Result<GaussianParams> {
        self.head_vec(h_i, h_a, true)
    }

    pub fn t_head_vec(&self, h_i: &[f64], h_c: &[f64]) -> Result<GaussianParams> {
        self.head_vec(h_i, h_c, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Dims, ParamGroup};
    use crate::objective::VariantName;

    fn model() -> Model {
        Model::new(
            Dims {
                hidden: 4,
                latent: 3,
                features: 5,
                vocab: 8,
                categories: 6,
            },
            VariantName::Ours,
            2,
        )
    }

    #[test]
    fn zero_heads_give_standard_params() {
        let mut m = model();
        for g in [ParamGroup::ZHead, ParamGroup::THead] {
            for id in m.ids_in(g) {
                m.store.get_mut(id).fill(0.0);
            }
        }
        let z = m.z_head_vec(&[0.0; 4], &[0.0; 4]).unwrap();
        assert_eq!(z, GaussianParams::standard(3));
        let t = m.t_head_vec(&[0.0; 4], &[0.0; 4]).unwrap();
        assert_eq!(t, GaussianParams::standard(3));
    }

    #[test]
    fn head_shapes_and_errors() {
        let m = model();
        let z = m.z_head_vec(&[0.3; 4], &[-0.1; 4]).unwrap();
        assert_eq!((z.mu.len(), z.log_sigma.len()), (3, 3));
        let t = m.t_head_vec(&[0.3; 4], &[-0.1; 4]).unwrap();
        assert_eq!(t.dim(), 3);
        assert!(matches!(m.z_head_vec(&[0.3; 3], &[0.0; 4]), Err(VqgError::Shape(_))));
        assert!(matches!(m.t_head_vec(&[0.3; 4], &[0.0; 5]), Err(VqgError::Shape(_))));
    }

    #[test]
    fn log_sigma_is_clamped() {
        let mut m = model();
        for lin in [m.ids.z_log_sigma, m.ids.t_log_sigma] {
            m.store.get_mut(lin.w).fill(0.0);
            m.store.get_mut(lin.b).fill(20.0);
        }
        assert!(m.z_head_vec(&[1.0; 4], &[1.0; 4]).unwrap().log_sigma.iter().all(|x| *x == 8.0));
        assert!(m.t_head_vec(&[1.0; 4], &[1.0; 4]).unwrap().log_sigma.iter().all(|x| *x == 8.0));
        let g = GaussianParams::new(vec![0.0], vec![-20.0]).unwrap();
        assert_eq!(g.log_sigma, vec![-8.0]);
    }

    #[test]
    fn reparameterize_examples() {
        let p = GaussianParams::new(vec![1.0, 2.0], vec![0.0, 2f64.ln()]).unwrap();
        assert_eq!(reparameterize(&p, &[0.0, 0.0]).unwrap().value, vec![1.0, 2.0]);
        let s = reparameterize(&p, &[1.0, -1.0]).unwrap();
        assert!((s.value[0] - 2.0).abs() < 1e-15 && s.value[1].abs() < 1e-15);
        assert!(reparameterize(&p, &[1.0]).is_err());
        assert_eq!(reparameterize_seeded(&p, 4), reparameterize_seeded(&p, 4));
    }

    #[test]
    fn reparameterized_draws_are_standard() {
        let p = GaussianParams::standard(3);
        let n = 100_000;
        let draws: Vec<_> = (0..n).map(|k| reparameterize_seeded(&p, k as u64).value).collect();
        for d in 0..3 {
            let mean = draws.iter().map(|v| v[d]).sum::<f64>() / n as f64;
            let var = draws.iter().map(|v| (v[d] - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 0.02, "mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
        }
    }

    #[test]
    fn kl_examples() {
        let p = GaussianParams::new(vec![0.3, -1.0], vec![0.2, -0.4]).unwrap();
        assert!(kl_between(&p, &p).unwrap().abs() < 1e-12);
        let a = GaussianParams::standard(1);
        let b = GaussianParams::new(vec![1.0], vec![0.0]).unwrap();
        assert!((kl_between(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(kl_to_standard_normal(&GaussianParams::standard(4)), 0.0);
        let c = GaussianParams::new(vec![2.0], vec![0.0]).unwrap();
        assert!((kl_to_standard_normal(&c) - 2.0).abs() < 1e-15);
        assert_eq!(
            kl_to_standard_normal(&p),
            kl_between(&p, &GaussianParams::standard(2)).unwrap()
        );
        assert!(kl_between(&a, &p).is_err());
    }

    #[test]
    fn tape_kl_matches_closed_form() {
        let p = GaussianParams::new(vec![0.3, -1.0, 2.0], vec![0.2, -0.4, 1.1]).unwrap();
        let q = GaussianParams::new(vec![-0.7, 0.5, 1.0], vec![0.9, 0.1, -0.3]).unwrap();
        let mut tape = Tape::new();
        let mk = |tape: &mut Tape, g: &GaussianParams| GaussVars {
            mu: row_input(tape, &g.mu),
            log_sigma: row_input(tape, &g.log_sigma),
        };
        let (pv, qv) = (mk(&mut tape, &p), mk(&mut tape, &q));
        let kl = kl_vars(&mut tape, pv, qv);
        assert!((tape.scalar(kl) - kl_between(&p, &q).unwrap()).abs() < 1e-12);
        let ks = kl_standard_vars(&mut tape, pv);
        assert!((tape.scalar(ks) - kl_to_standard_normal(&p)).abs() < 1e-12);
    }
}
