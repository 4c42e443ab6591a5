//! Image, answer, and category encoders producing h_i, h_a, h_c.

use ndarray::Array2;

use super::Model;
use crate::corpus::TokenBatch;
use crate::error::{Result, VqgError};
use crate::tape::{Tape, Var};

/// Dense encodings of one example.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedTriple {
    pub h_i: Vec<f64>,
    pub h_a: Vec<f64>,
    pub h_c: Vec<f64>,
}

/// Two tanh layers over the frozen feature vector (B x D -> B x H).
pub fn encode_image(tape: &mut Tape, model: &Model, features: Var) -> Var {
    let l1 = model.ids.img1.apply(tape, &model.store, features);
    let a1 = tape.tanh(l1);
    let l2 = model.ids.img2.apply(tape, &model.store, a1);
    tape.tanh(l2)
}

/// Final LSTM hidden state after each row's true length; state updates
/// stop at the row length so trailing PAD columns have no effect.
pub fn encode_answer(tape: &mut Tape, model: &Model, answers: &TokenBatch) -> Var {
    let b = answers.batch_size();
    let hsz = model.dims.hidden;
    let emb = model.store.bind(tape, model.ids.ans_emb);
    let cell = model.ids.ans_lstm.bind(tape, &model.store);
    let mut h = tape.constant(Array2::zeros((b, hsz)));
    let mut c = tape.constant(Array2::zeros((b, hsz)));
    for s in 0..answers.width() {
        let x = tape.gather(emb, &answers.column(s));
        let (h_new, c_new) = cell.step(tape, x, h, c);
        let mask = Array2::from_shape_fn((b, 1), |(r, _)| f64::from(s < answers.lengths[r]));
        if mask.iter().all(|m| *m == 1.0) {
            h = h_new;
            c = c_new;
        } else {
            h = tape.blend(mask.clone(), h_new, h);
            c = tape.blend(mask, c_new, c);
        }
    }
    h
}

/// Embedding row of each category (the linear map of its one-hot).
pub fn encode_category(tape: &mut Tape, model: &Model, categories: &[usize]) -> Var {
    let emb = model.store.bind(tape, model.ids.cat_emb);
    tape.gather(emb, categories)
}

fn first_row(tape: &Tape, v: Var) -> Vec<f64> {
    tape.value(v).row(0).to_vec()
}

impl Model {
    pub fn encode_image_vec(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.dims.features {
            return Err(VqgError::Shape(format!(
                "image features have {} entries, expected {}",
                features.len(),
                self.dims.features
            )));
        }
        let mut tape = Tape::new();
        let x = tape.constant(Array2::from_shape_vec((1, features.len()), features.to_vec()).unwrap());
        let h = encode_image(&mut tape, self, x);
        Ok(first_row(&tape, h))
    }

    pub fn encode_answer_ids(&self, ids: &[usize]) -> Result<Vec<f64>> {
        if ids.is_empty() {
            return Err(VqgError::Shape("answer sequence is empty".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= self.dims.vocab) {
            return Err(VqgError::Data(format!("token id {bad} outside vocabulary")));
        }
        let mut tape = Tape::new();
        let batch = TokenBatch::from_sequences([ids]);
        let h = encode_answer(&mut tape, self, &batch);
        Ok(first_row(&tape, h))
    }

    pub fn encode_category_one_hot(&self, one_hot: &[f64]) -> Result<Vec<f64>> {
        if one_hot.len() != self.dims.categories {
            return Err(VqgError::Shape(format!(
                "category vector has {} entries, expected {}",
                one_hot.len(),
                self.dims.categories
            )));
        }
        let ones: Vec<usize> = (0..one_hot.len()).filter(|&k| one_hot[k] == 1.0).collect();
        let zeros = one_hot.iter().filter(|x| **x == 0.0).count();
        if ones.len() != 1 || zeros != one_hot.len() - 1 {
            return Err(VqgError::Validation("category input is not one-hot".into()));
        }
        let mut tape = Tape::new();
        let h = encode_category(&mut tape, self, &ones);
        Ok(first_row(&tape, h))
    }

    /// Product of the spectral norms of the two image layers; tanh is
    /// 1-Lipschitz, so this bounds the image encoder's Lipschitz constant.
    pub fn image_lipschitz_bound(&self) -> f64 {
        spectral_norm(self.store.get(self.ids.img1.w)) * spectral_norm(self.store.get(self.ids.img2.w))
    }
}

/// Largest singular value by power iteration on `W^T W`.
pub fn spectral_norm(w: &Array2<f64>) -> f64 {
    let n = w.ncols();
    let mut v = Array2::from_elem((n, 1), 1.0 / (n as f64).sqrt());
    let mut sigma = 0.0;
    for _ in 0..500 {
        let wv = w.dot(&v);
        let u = w.t().dot(&wv);
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = u / norm;
        let next = w.dot(&v).iter().map(|x| x * x).sum::<f64>().sqrt();
        if (next - sigma).abs() <= 1e-13 * next {
            return next;
        }
        sigma = next;
    }
    sigma
}
