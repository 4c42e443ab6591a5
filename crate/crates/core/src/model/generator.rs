//! Question decoder: teacher-forced likelihood and greedy decoding.
//!
//! The latent sample only sets the initial recurrent state (a linear
//! projection for each of h and c); every later step sees the previous
//! token alone.

use ndarray::{Array2, Axis};

use super::latent::{standard_normal_matrix, GaussianParams, LatentSample};
use super::Model;
use crate::corpus::{TokenBatch, BOS, EOS};
use crate::error::{Result, VqgError};
use crate::tape::{Tape, Var};

pub const DEFAULT_MAX_LEN: usize = 20;

/// Recurrent state pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub h: Array2<f64>,
    pub c: Array2<f64>,
}

pub fn decoder_init(tape: &mut Tape, model: &Model, latent: Var) -> (Var, Var) {
    let h = model.ids.dec_init_h.apply(tape, &model.store, latent);
    let c = model.ids.dec_init_c.apply(tape, &model.store, latent);
    (h, c)
}

/// Mean negative log-likelihood per non-PAD target token under teacher forcing.
pub fn mle_loss(tape: &mut Tape, model: &Model, latent: Var, questions: &TokenBatch) -> Var {
    let b = questions.batch_size();
    let (mut h, mut c) = decoder_init(tape, model, latent);
    let emb = model.store.bind(tape, model.ids.dec_emb);
    let cell = model.ids.dec_lstm.bind(tape, &model.store);
    let out_w = model.store.bind(tape, model.ids.dec_out.w);
    let out_b = model.store.bind(tape, model.ids.dec_out.b);
    let count: usize = questions.lengths.iter().map(|l| l.saturating_sub(1)).sum();
    let inv = 1.0 / count.max(1) as f64;
    let mut terms = Vec::new();
    for s in 0..questions.width().saturating_sub(1) {
        let weights: Vec<f64> = (0..b)
            .map(|r| if s + 1 < questions.lengths[r] { inv } else { 0.0 })
            .collect();
        if weights.iter().all(|w| *w == 0.0) {
            break;
        }
        let x = tape.gather(emb, &questions.column(s));
        let (h2, c2) = cell.step(tape, x, h, c);
        h = h2;
        c = c2;
        let hw = tape.matmul(h, out_w);
        let logits = tape.add_row(hw, out_b);
        terms.push(tape.softmax_xent(logits, &questions.column(s + 1), &weights));
    }
    if terms.is_empty() {
        return tape.constant_scalar(0.0);
    }
    tape.add_all(&terms)
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let z = row.sum();
        row.mapv_inplace(|x| x / z);
    }
    p
}

/// One decoder step without recording gradients. Returns the new state and
/// the next-token logits.
fn step(model: &Model, state: &DecoderState, tokens: &[usize]) -> (DecoderState, Array2<f64>) {
    let mut tape = Tape::new();
    let emb = model.store.bind(&mut tape, model.ids.dec_emb);
    let cell = model.ids.dec_lstm.bind(&mut tape, &model.store);
    let x = tape.gather(emb, tokens);
    let h = tape.constant(state.h.clone());
    let c = tape.constant(state.c.clone());
    let (h, c) = cell.step(&mut tape, x, h, c);
    let logits = model.ids.dec_out.apply(&mut tape, &model.store, h);
    (
        DecoderState {
            h: tape.value(h).clone(),
            c: tape.value(c).clone(),
        },
        tape.value(logits).clone(),
    )
}

fn initial_state(model: &Model, latents: &Array2<f64>) -> DecoderState {
    let mut tape = Tape::new();
    let z = tape.constant(latents.clone());
    let (h, c) = decoder_init(&mut tape, model, z);
    DecoderState {
        h: tape.value(h).clone(),
        c: tape.value(c).clone(),
    }
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (k, x) in row.iter().enumerate() {
        if *x > row[best] {
            best = k;
        }
    }
    best
}

/// Greedy decoding for each row of `latents` (N x Z). Each output stops
/// before EOS or after `max_len` tokens.
pub fn decode_greedy_batch(model: &Model, latents: &Array2<f64>, max_len: usize) -> Vec<Vec<usize>> {
    let n = latents.nrows();
    let mut out = vec![Vec::new(); n];
    let mut done = vec![false; n];
    let mut state = initial_state(model, latents);
    let mut prev = vec![BOS; n];
    for _ in 0..max_len {
        let (next_state, logits) = step(model, &state, &prev);
        state = next_state;
        for r in 0..n {
            if done[r] {
                continue;
            }
            let tok = argmax(logits.row(r));
            if tok == EOS {
                done[r] = true;
            } else {
                out[r].push(tok);
            }
            prev[r] = tok;
        }
        if done.iter().all(|d| *d) {
            break;
        }
    }
    out
}

/// `mu + exp(log_sigma) * eps` row by row with `eps` drawn from `seed`.
pub fn sample_latents(mu: &Array2<f64>, log_sigma: &Array2<f64>, seed: u64) -> Array2<f64> {
    let eps = standard_normal_matrix(mu.nrows(), mu.ncols(), seed);
    mu + &(log_sigma.mapv(f64::exp) * eps)
}

impl Model {
    fn check_latent(&self, latent: &[f64]) -> Result<()> {
        if latent.len() != self.dims.latent {
            return Err(VqgError::Shape(format!(
                "latent has {} dims, expected {}",
                latent.len(),
                self.dims.latent
            )));
        }
        Ok(())
    }

    /// L_MLE of one question given one latent sample.
    pub fn mle_loss_vec(&self, latent: &LatentSample, question: &[usize]) -> Result<f64> {
        self.check_latent(&latent.value)?;
        if let Some(bad) = question.iter().find(|&&t| t >= self.dims.vocab) {
            return Err(VqgError::Data(format!("token id {bad} outside vocabulary")));
        }
        if question.len() < 2 {
            return Err(VqgError::Data("question must be BOS/EOS framed".into()));
        }
        let mut tape = Tape::new();
        let z = tape.constant(Array2::from_shape_vec((1, latent.value.len()), latent.value.clone()).unwrap());
        let loss = mle_loss(&mut tape, self, z, &TokenBatch::from_sequences([question]));
        Ok(tape.scalar(loss))
    }

    pub fn decode_greedy(&self, latent: &[f64], max_len: usize) -> Result<Vec<usize>> {
        self.check_latent(latent)?;
        let z = Array2::from_shape_vec((1, latent.len()), latent.to_vec()).unwrap();
        Ok(decode_greedy_batch(self, &z, max_len).remove(0))
    }

    /// `n` reparameterized draws from `gauss`, each decoded greedily.
    pub fn sample_questions(
        &self,
        gauss: &GaussianParams,
        n: usize,
        seed: u64,
        max_len: usize,
    ) -> Result<Vec<Vec<usize>>> {
        self.check_latent(&gauss.mu)?;
        if n == 0 {
            return Err(VqgError::Config("number of samples must be >= 1".into()));
        }
        let row = |v: &Vec<f64>| Array2::from_shape_fn((n, v.len()), |(_, k)| v[k]);
        let latents = sample_latents(&row(&gauss.mu), &row(&gauss.log_sigma), seed);
        Ok(decode_greedy_batch(self, &latents, max_len))
    }

    /// Next-token distribution after feeding `prefix` (which should start with BOS).
    pub fn next_token_distribution(&self, latent: &[f64], prefix: &[usize]) -> Result<Vec<f64>> {
        self.check_latent(latent)?;
        let z = Array2::from_shape_vec((1, latent.len()), latent.to_vec()).unwrap();
        let mut state = initial_state(self, &z);
        let mut logits = None;
        for &tok in prefix {
            let (s, l) = step(self, &state, &[tok]);
            state = s;
            logits = Some(l);
        }
        let logits = logits.ok_or_else(|| VqgError::Data("empty decoding prefix".into()))?;
        Ok(softmax_rows(&logits).row(0).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dims;
    use crate::objective::VariantName;
    use crate::params::{Adam, AdamConfig, ParamGrads};

    fn model(vocab: usize) -> Model {
        Model::new(
            Dims {
                hidden: 8,
                latent: 4,
                features: 5,
                vocab,
                categories: 3,
            },
            VariantName::Ours,
            3,
        )
    }

    fn sample(v: Vec<f64>) -> LatentSample {
        LatentSample {
            noise: vec![0.0; v.len()],
            value: v,
        }
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut m = model(10);
        m.store.get_mut(m.ids.dec_out.w).fill(0.0);
        let l = m.mle_loss_vec(&sample(vec![0.2; 4]), &[BOS, 5, 6, EOS]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn trailing_padding_does_not_change_loss() {
        let m = model(10);
        let q = [BOS, 5, 6, 7, EOS];
        let z = sample(vec![0.1, -0.3, 0.5, 0.0]);
        let a = m.mle_loss_vec(&z, &q).unwrap();
        let mut tape = Tape::new();
        let zz = tape.constant(Array2::from_shape_vec((1, 4), z.value.clone()).unwrap());
        let batch = TokenBatch::from_sequences([&q[..]]).with_extra_padding(4);
        let lv = mle_loss(&mut tape, &m, zz, &batch);
        assert_eq!(tape.scalar(lv), a);
    }

    #[test]
    fn bad_token_is_data_error() {
        let m = model(10);
        assert!(matches!(
            m.mle_loss_vec(&sample(vec![0.0; 4]), &[BOS, 10, EOS]),
            Err(VqgError::Data(_))
        ));
    }

    #[test]
    fn greedy_is_deterministic_and_bounded() {
        let m = model(10);
        let z = [0.4, -0.2, 0.9, 0.1];
        assert_eq!(m.decode_greedy(&z, 20).unwrap(), m.decode_greedy(&z, 20).unwrap());
        assert!(m.decode_greedy(&z, 1).unwrap().len() <= 1);
        assert!(m.decode_greedy(&z, 20).unwrap().len() <= 20);
    }

    #[test]
    fn distributions_are_normalized() {
        let m = model(10);
        for prefix in [&[BOS][..], &[BOS, 4, 7][..]] {
            let p = m.next_token_distribution(&[0.3, 0.1, -0.5, 2.0], prefix).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(p.iter().all(|x| *x >= 0.0));
        }
    }

    #[test]
    fn sampling_edges() {
        let m = model(10);
        let g = GaussianParams::new(vec![0.3, 0.1, -0.5, 2.0], vec![0.0; 4]).unwrap();
        assert_eq!(
            m.sample_questions(&g, 5, 11, 20).unwrap(),
            m.sample_questions(&g, 5, 11, 20).unwrap()
        );
        let tight = GaussianParams::new(g.mu.clone(), vec![-8.0; 4]).unwrap();
        let mean = m.decode_greedy(&g.mu, 20).unwrap();
        for q in m.sample_questions(&tight, 5, 3, 20).unwrap() {
            assert_eq!(q, mean);
        }
    }

    #[test]
    fn overfits_one_question() {
        let mut m = model(12);
        let q = vec![BOS, 4, 9, 6, 11, 5, EOS];
        let z = vec![0.5, -0.5, 0.25, 1.0];
        let dec_ids = m.ids_in(crate::model::ParamGroup::Decoder);
        let mut opt = Adam::new(&m.store, AdamConfig::default());
        let mut checkpoints = Vec::new();
        for it in 0..500 {
            let mut tape = Tape::new();
            let zv = tape.constant(Array2::from_shape_vec((1, 4), z.clone()).unwrap());
            let loss = mle_loss(&mut tape, &m, zv, &TokenBatch::from_sequences([q.as_slice()]));
            if it % 100 == 0 {
                checkpoints.push(tape.scalar(loss));
            }
            let g = tape.backward(loss);
            let mut pg = ParamGrads::zeros(m.store.len());
            pg.absorb(&g, |id| dec_ids.contains(&id));
            opt.step(&mut m.store, &pg, 0.01);
        }
        let final_loss = m.mle_loss_vec(&sample(z.clone()), &q).unwrap();
        checkpoints.push(final_loss);
        assert!(final_loss < 0.1, "{final_loss}");
        for w in checkpoints.windows(2) {
            assert!(w[1] <= w[0] + 1e-3, "{checkpoints:?}");
        }
        assert_eq!(m.decode_greedy(&z, 20).unwrap(), q[1..q.len() - 1].to_vec());
    }
}
