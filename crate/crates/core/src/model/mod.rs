//! Network parameters and the shared building blocks of the encoders,
//! latent heads, reconstruction heads, and question decoder.

pub mod encoders;
pub mod generator;
pub mod latent;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VqgError};
use crate::objective::VariantName;
use crate::params::{ParamId, ParamStore};
use crate::seeding;
use crate::tape::{Tape, Var};

/// Initial log standard deviation of both posterior heads.
pub const INIT_LOG_SIGMA: f64 = -2.0;

/// Layer sizes. `hidden` is shared by h_i, h_a, h_c and the recurrent
/// states; `latent` is the dimension of both z and t.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub hidden: usize,
    pub latent: usize,
    pub features: usize,
    pub vocab: usize,
    pub categories: usize,
}

/// Parameter groups used by the gradient-routing table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    ImageEncoder,
    AnswerEncoder,
    CategoryEncoder,
    ZHead,
    THead,
    Reconstruction,
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::ImageEncoder,
        ParamGroup::AnswerEncoder,
        ParamGroup::CategoryEncoder,
        ParamGroup::ZHead,
        ParamGroup::THead,
        ParamGroup::Reconstruction,
        ParamGroup::Decoder,
    ];

    fn prefix(self) -> &'static str {
        match self {
            ParamGroup::ImageEncoder => "img.",
            ParamGroup::AnswerEncoder => "ans.",
            ParamGroup::CategoryEncoder => "cat.",
            ParamGroup::ZHead => "z.",
            ParamGroup::THead => "t.",
            ParamGroup::Reconstruction => "rec.",
            ParamGroup::Decoder => "dec.",
        }
    }

    pub fn of(name: &str) -> ParamGroup {
        Self::ALL
            .into_iter()
            .find(|g| name.starts_with(g.prefix()))
            .unwrap_or_else(|| panic!("parameter {name} has no group"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = store.bind(tape, self.w);
        let b = store.bind(tape, self.b);
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }
}

/// Single-layer LSTM cell; gate order is input, forget, cell, output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmCell {
    pub w: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

/// An LSTM cell with its weights already bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundLstm {
    w: Var,
    b: Var,
    hidden: usize,
}

impl LstmCell {
    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundLstm {
        BoundLstm {
            w: store.bind(tape, self.w),
            b: store.bind(tape, self.b),
            hidden: self.hidden,
        }
    }
}

impl BoundLstm {
    pub fn step(&self, tape: &mut Tape, x: Var, h: Var, c: Var) -> (Var, Var) {
        let n = self.hidden;
        let xh = tape.concat(&[x, h]);
        let pre = tape.matmul(xh, self.w);
        let gates = tape.add_row(pre, self.b);
        let i = tape.slice_cols(gates, 0, n);
        let f = tape.slice_cols(gates, n, 2 * n);
        let g = tape.slice_cols(gates, 2 * n, 3 * n);
        let o = tape.slice_cols(gates, 3 * n, 4 * n);
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, c);
        let ig = tape.mul(i, g);
        let c_new = tape.add(fc, ig);
        let tc = tape.tanh(c_new);
        let h_new = tape.mul(o, tc);
        (h_new, c_new)
    }
}

/// Typed handles into the model's [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamIds {
    pub img1: Linear,
    pub img2: Linear,
    pub ans_emb: ParamId,
    pub ans_lstm: LstmCell,
    pub cat_emb: ParamId,
    pub z_mu: Linear,
    pub z_log_sigma: Linear,
    pub t_mu: Linear,
    pub t_log_sigma: Linear,
    pub rec_image: Linear,
    pub rec_answer: Linear,
    pub dec_init_h: Linear,
    pub dec_init_c: Linear,
    pub dec_emb: ParamId,
    pub dec_lstm: LstmCell,
    pub dec_out: Linear,
}

impl ParamIds {
    /// Looks every handle up by name.
    pub fn resolve(store: &ParamStore, hidden: usize) -> Result<Self> {
        let id = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| VqgError::Format(format!("missing parameter {name}")))
        };
        let lin = |p: &str| -> Result<Linear> {
            Ok(Linear {
                w: id(&format!("{p}.w"))?,
                b: id(&format!("{p}.b"))?,
            })
        };
        Ok(ParamIds {
            img1: lin("img.l1")?,
            img2: lin("img.l2")?,
            ans_emb: id("ans.emb")?,
            ans_lstm: LstmCell {
                w: id("ans.lstm.w")?,
                b: id("ans.lstm.b")?,
                hidden,
            },
            cat_emb: id("cat.emb")?,
            z_mu: lin("z.mu")?,
            z_log_sigma: lin("z.log_sigma")?,
            t_mu: lin("t.mu")?,
            t_log_sigma: lin("t.log_sigma")?,
            rec_image: lin("rec.image")?,
            rec_answer: lin("rec.answer")?,
            dec_init_h: lin("dec.init_h")?,
            dec_init_c: lin("dec.init_c")?,
            dec_emb: id("dec.emb")?,
            dec_lstm: LstmCell {
                w: id("dec.lstm.w")?,
                b: id("dec.lstm.b")?,
                hidden,
            },
            dec_out: lin("dec.out")?,
        })
    }
}

/// The full network for one variant.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub dims: Dims,
    pub variant: VariantName,
    pub store: ParamStore,
    pub ids: ParamIds,
}

impl Model {
    /// Randomly initialized model. Weights are Gaussian with std
    /// `1/sqrt(fan_in)`, biases zero except the LSTM forget gates (one) and
    /// the posterior log-sigma heads ([`INIT_LOG_SIGMA`]).
    pub fn new(dims: Dims, variant: VariantName, seed: u64) -> Self {
        let Dims {
            hidden: h,
            latent: z,
            features: d,
            vocab: v,
            categories: c,
        } = dims;
        let mut rng = seeding::rng(seeding::derive(seed, 0x1417));
        let mut s = ParamStore::new();
        let mut lin = |s: &mut ParamStore, name: &str, i: usize, o: usize| {
            s.insert_random(&format!("{name}.w"), i, o, &mut rng);
            s.insert_zeros(&format!("{name}.b"), 1, o);
        };
        lin(&mut s, "img.l1", d, h);
        lin(&mut s, "img.l2", h, h);
        lin(&mut s, "z.mu", 2 * h, z);
        lin(&mut s, "z.log_sigma", 2 * h, z);
        lin(&mut s, "t.mu", 2 * h, z);
        lin(&mut s, "t.log_sigma", 2 * h, z);
        for name in ["z.log_sigma.b", "t.log_sigma.b"] {
            let id = s.id(name).expect("inserted above");
            s.get_mut(id).fill(INIT_LOG_SIGMA);
        }
        lin(&mut s, "rec.image", z, h);
        lin(&mut s, "rec.answer", z, h);
        lin(&mut s, "dec.init_h", z, h);
        lin(&mut s, "dec.init_c", z, h);
        lin(&mut s, "dec.out", h, v);
        let mut rng = seeding::rng(seeding::derive(seed, 0x1418));
        s.insert_random("ans.emb", v, h, &mut rng);
        s.insert_random("ans.lstm.w", 2 * h, 4 * h, &mut rng);
        s.insert("ans.lstm.b", forget_bias(h));
        s.insert_random("cat.emb", c, h, &mut rng);
        s.insert_random("dec.emb", v, h, &mut rng);
        s.insert_random("dec.lstm.w", 2 * h, 4 * h, &mut rng);
        s.insert("dec.lstm.b", forget_bias(h));
        let ids = ParamIds::resolve(&s, h).expect("all parameters inserted");
        Model {
            dims,
            variant,
            store: s,
            ids,
        }
    }

    /// Rebuilds a model around an existing store (checkpoint loading).
    pub fn from_store(dims: Dims, variant: VariantName, store: ParamStore) -> Result<Self> {
        let ids = ParamIds::resolve(&store, dims.hidden)?;
        let expect = Model::new(dims, variant, 0);
        for (name, value) in expect.store.iter() {
            let got = store.get(store.id(name).expect("resolved above"));
            if got.dim() != value.dim() {
                return Err(VqgError::Format(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.dim(),
                    value.dim()
                )));
            }
        }
        Ok(Model {
            dims,
            variant,
            store,
            ids,
        })
    }

    pub fn group_of(&self, id: ParamId) -> ParamGroup {
        ParamGroup::of(self.store.name(id))
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|id| self.group_of(*id) == group)
            .collect()
    }
}

fn forget_bias(h: usize) -> Array2<f64> {
    let mut b = Array2::zeros((1, 4 * h));
    b.slice_mut(ndarray::s![.., h..2 * h]).fill(1.0);
    b
}
