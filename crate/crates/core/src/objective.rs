//! Model variants, reconstruction heads, the weighted training loss, and
//! the table that decides which loss terms may update which parameters.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::Batch;
use crate::error::{Result, VqgError};
use crate::model::encoders::{encode_answer, encode_category, encode_image};
use crate::model::generator::mle_loss;
use crate::model::latent::{
    kl_standard_vars, kl_vars, reparameterize_vars, standard_normal_matrix, t_head, z_head, GaussVars,
};
use crate::model::{Model, ParamGroup};
use crate::params::ParamGrads;
use crate::tape::{Tape, Var};

/// The registry of trainable model variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VariantName {
    #[serde(rename = "OURS")]
    Ours,
    #[serde(rename = "OURS_WO_A")]
    OursWoA,
    #[serde(rename = "OURS_WO_C")]
    OursWoC,
    #[serde(rename = "OURS_WO_AC")]
    OursWoAc,
    #[serde(rename = "IA2Q")]
    Ia2q,
    #[serde(rename = "V_IA2Q")]
    VIa2q,
    #[serde(rename = "IC2Q")]
    Ic2q,
    #[serde(rename = "V_IC2Q")]
    VIc2q,
}

/// Which inputs, latents and auxiliary losses a variant uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct VariantFlags {
    pub uses_answer: bool,
    pub uses_category: bool,
    pub variational: bool,
    pub recon_answer: bool,
    pub recon_image: bool,
    pub has_t_space: bool,
}

impl VariantName {
    pub const ALL: [VariantName; 8] = [
        VariantName::Ours,
        VariantName::OursWoA,
        VariantName::OursWoC,
        VariantName::OursWoAc,
        VariantName::Ia2q,
        VariantName::VIa2q,
        VariantName::Ic2q,
        VariantName::VIc2q,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantName::Ours => "OURS",
            VariantName::OursWoA => "OURS_WO_A",
            VariantName::OursWoC => "OURS_WO_C",
            VariantName::OursWoAc => "OURS_WO_AC",
            VariantName::Ia2q => "IA2Q",
            VariantName::VIa2q => "V_IA2Q",
            VariantName::Ic2q => "IC2Q",
            VariantName::VIc2q => "V_IC2Q",
        }
    }

    /// Human-readable row label for report tables.
    pub fn label(self) -> &'static str {
        match self {
            VariantName::Ours => "Ours",
            VariantName::OursWoA => "Ours w/o A",
            VariantName::OursWoC => "Ours w/o C",
            VariantName::OursWoAc => "Ours w/o AC",
            VariantName::Ia2q => "IA2Q",
            VariantName::VIa2q => "V-IA2Q",
            VariantName::Ic2q => "IC2Q",
            VariantName::VIc2q => "V-IC2Q",
        }
    }

    pub fn flags(self) -> VariantFlags {
        let f = |a, c, v, ra, ri, t| VariantFlags {
            uses_answer: a,
            uses_category: c,
            variational: v,
            recon_answer: ra,
            recon_image: ri,
            has_t_space: t,
        };
        match self {
            VariantName::Ours => f(true, true, true, true, true, true),
            VariantName::OursWoA => f(true, true, true, false, true, true),
            VariantName::OursWoC => f(true, false, true, true, true, false),
            VariantName::OursWoAc => f(true, false, true, false, true, false),
            VariantName::Ia2q => f(true, false, false, false, false, false),
            VariantName::VIa2q => f(true, false, true, false, false, false),
            VariantName::Ic2q => f(false, true, false, false, false, false),
            VariantName::VIc2q => f(false, true, true, false, false, false),
        }
    }

    pub fn names() -> String {
        Self::ALL.map(|v| v.as_str()).join(", ")
    }
}

impl fmt::Display for VariantName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantName {
    type Err = VqgError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == norm)
            .ok_or_else(|| {
                VqgError::Config(format!(
                    "unknown variant {s:?}; valid variants: {}",
                    Self::names()
                ))
            })
    }
}

/// A latent space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Z,
    T,
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Space::Z => "z",
            Space::T => "t",
        })
    }
}

impl FromStr for Space {
    type Err = VqgError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "z" | "Z" => Ok(Space::Z),
            "t" | "T" => Ok(Space::T),
            other => Err(VqgError::Config(format!("unknown latent space {other:?}; expected z or t"))),
        }
    }
}

impl VariantFlags {
    /// The latent the decoder is trained on.
    pub fn primary_space(&self) -> Space {
        if self.uses_answer {
            Space::Z
        } else {
            Space::T
        }
    }

    /// Spaces this variant can encode into and decode from.
    pub fn spaces(&self) -> Vec<Space> {
        let mut out = Vec::new();
        if self.uses_answer {
            out.push(Space::Z);
        }
        if self.has_t_space || (self.uses_category && !self.uses_answer) {
            out.push(Space::T);
        }
        out
    }

    pub fn has_space(&self, space: Space) -> bool {
        self.spaces().contains(&space)
    }

    pub fn is_active(&self, term: Term) -> bool {
        match term {
            Term::Mle => true,
            Term::ImageRecon => self.recon_image,
            Term::AnswerRecon => self.recon_answer,
            Term::SpaceMatch | Term::PriorT => self.has_t_space,
            Term::PriorZ => self.variational,
        }
    }
}

/// The individual loss terms. `PriorZ` holds the unit-normal KL of the
/// decoder's latent, which is `t` for the category-only baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Term {
    Mle,
    ImageRecon,
    AnswerRecon,
    SpaceMatch,
    PriorZ,
    PriorT,
}

impl Term {
    pub const ALL: [Term; 6] = [
        Term::Mle,
        Term::ImageRecon,
        Term::AnswerRecon,
        Term::SpaceMatch,
        Term::PriorZ,
        Term::PriorT,
    ];

    /// Column name used in history and report files.
    pub fn column(self) -> &'static str {
        match self {
            Term::Mle => "L_MLE",
            Term::ImageRecon => "L_i",
            Term::AnswerRecon => "L_a",
            Term::SpaceMatch => "L_t",
            Term::PriorZ => "L_prior_z",
            Term::PriorT => "L_prior_t",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Term weights. `mle` exists so tests can silence the likelihood term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub mle: f64,
    pub answer_recon: f64,
    pub image_recon: f64,
    pub space_match: f64,
    pub prior: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mle: 1.0,
            answer_recon: 0.01,
            image_recon: 0.001,
            space_match: 0.005,
            prior: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("mle", self.mle),
            ("answer_recon", self.answer_recon),
            ("image_recon", self.image_recon),
            ("space_match", self.space_match),
            ("prior", self.prior),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(VqgError::Config(format!("loss weight {name} must be >= 0, got {w}")));
            }
        }
        Ok(())
    }

    pub fn weight(&self, term: Term) -> f64 {
        match term {
            Term::Mle => self.mle,
            Term::ImageRecon => self.image_recon,
            Term::AnswerRecon => self.answer_recon,
            Term::SpaceMatch => self.space_match,
            Term::PriorZ | Term::PriorT => self.prior,
        }
    }

    /// Weight of `term` in the total for `variant`, zero when inactive.
    pub fn effective(&self, term: Term, variant: VariantName) -> f64 {
        if variant.flags().is_active(term) {
            self.weight(term)
        } else {
            0.0
        }
    }
}

/// Values of every term plus their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mle: f64,
    pub image_recon: f64,
    pub answer_recon: f64,
    pub space_match: f64,
    pub prior_z: f64,
    pub prior_t: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn get(&self, term: Term) -> f64 {
        match term {
            Term::Mle => self.mle,
            Term::ImageRecon => self.image_recon,
            Term::AnswerRecon => self.answer_recon,
            Term::SpaceMatch => self.space_match,
            Term::PriorZ => self.prior_z,
            Term::PriorT => self.prior_t,
        }
    }

    pub fn set(&mut self, term: Term, value: f64) {
        let slot = match term {
            Term::Mle => &mut self.mle,
            Term::ImageRecon => &mut self.image_recon,
            Term::AnswerRecon => &mut self.answer_recon,
            Term::SpaceMatch => &mut self.space_match,
            Term::PriorZ => &mut self.prior_z,
            Term::PriorT => &mut self.prior_t,
        };
        *slot = value;
    }

    /// Name and value of the first non-finite entry, terms before total.
    pub fn first_non_finite(&self) -> Option<(&'static str, f64)> {
        Term::ALL
            .into_iter()
            .map(|t| (t.column(), self.get(t)))
            .chain([("total", self.total)])
            .find(|(_, v)| !v.is_finite())
    }

    /// Element-wise weighted mean of several breakdowns.
    pub fn weighted_mean(items: &[(LossBreakdown, f64)]) -> LossBreakdown {
        let mass: f64 = items.iter().map(|(_, w)| w).sum();
        let mut out = LossBreakdown::default();
        if mass == 0.0 {
            return out;
        }
        for t in Term::ALL {
            out.set(t, items.iter().map(|(b, w)| b.get(t) * w).sum::<f64>() / mass);
        }
        out.total = items.iter().map(|(b, w)| b.total * w).sum::<f64>() / mass;
        out
    }
}

/// Zeroes inactive terms and recomputes the weighted total.
pub fn total_loss(parts: &LossBreakdown, weights: &LossWeights, variant: VariantName) -> LossBreakdown {
    let flags = variant.flags();
    let mut out = LossBreakdown::default();
    let mut total = 0.0;
    for t in Term::ALL {
        if flags.is_active(t) {
            out.set(t, parts.get(t));
            total += weights.weight(t) * parts.get(t);
        }
    }
    out.total = total;
    out
}

/// Reconstructions of the image and answer encodings from a z sample.
pub fn reconstruct(model: &Model, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if z.len() != model.dims.latent {
        return Err(VqgError::Shape(format!(
            "z has {} dims, expected {}",
            z.len(),
            model.dims.latent
        )));
    }
    let mut tape = Tape::new();
    let zv = tape.constant(Array2::from_shape_vec((1, z.len()), z.to_vec()).unwrap());
    let hi = model.ids.rec_image.apply(&mut tape, &model.store, zv);
    let ha = model.ids.rec_answer.apply(&mut tape, &model.store, zv);
    Ok((tape.value(hi).row(0).to_vec(), tape.value(ha).row(0).to_vec()))
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

/// Mean squared error per dimension for the image and answer reconstructions.
pub fn recon_losses(h_i: &[f64], h_a: &[f64], h_i_hat: &[f64], h_a_hat: &[f64]) -> Result<(f64, f64)> {
    if h_i.len() != h_i_hat.len() || h_a.len() != h_a_hat.len() {
        return Err(VqgError::Shape("reconstruction dims do not match".into()));
    }
    Ok((mse(h_i, h_i_hat), mse(h_a, h_a_hat)))
}

/// Allowed loss terms per parameter group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RoutingTable {
    allowed: BTreeMap<ParamGroup, Vec<Term>>,
}

impl RoutingTable {
    pub fn allows(&self, group: ParamGroup, term: Term) -> bool {
        self.allowed.get(&group).is_some_and(|ts| ts.contains(&term))
    }

    pub fn terms(&self, group: ParamGroup) -> &[Term] {
        self.allowed.get(&group).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Encoders and the decoder learn only from the likelihood; reconstruction
/// heads only from their own losses; each latent head from the terms
/// computed on its output.
pub fn gradient_routes(variant: VariantName, lt_updates_z: bool) -> RoutingTable {
    use ParamGroup::*;
    use Term::*;
    let t_is_primary = variant.flags().primary_space() == Space::T;
    let mut z_terms = vec![Mle, ImageRecon, AnswerRecon, PriorZ];
    if lt_updates_z {
        z_terms.push(SpaceMatch);
    }
    let t_terms = if t_is_primary {
        vec![Mle, PriorZ]
    } else {
        vec![SpaceMatch, PriorT]
    };
    let allowed = BTreeMap::from([
        (ImageEncoder, vec![Mle]),
        (AnswerEncoder, vec![Mle]),
        (CategoryEncoder, vec![Mle]),
        (ZHead, z_terms),
        (THead, t_terms),
        (Reconstruction, vec![ImageRecon, AnswerRecon]),
        (Decoder, vec![Mle]),
    ]);
    RoutingTable { allowed }
}

/// How the decoder's latent is drawn in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Noise {
    /// Reparameterized draw with noise from this seed.
    Sample(u64),
    /// Posterior mean.
    Mean,
}

/// All nodes of one forward pass over a batch.
#[derive(Clone, Debug)]
pub struct LossGraph {
    pub variant: VariantName,
    pub terms: [Option<Var>; 6],
    pub total: Var,
    pub z: Option<GaussVars>,
    pub t: Option<GaussVars>,
    pub latent: Var,
}

impl LossGraph {
    pub fn term(&self, term: Term) -> Option<Var> {
        self.terms[term.index()]
    }

    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let mut out = LossBreakdown::default();
        for t in Term::ALL {
            if let Some(v) = self.term(t) {
                out.set(t, tape.scalar(v));
            }
        }
        out.total = tape.scalar(self.total);
        out
    }
}

/// Checks that the batch carries the fields the variant needs.
pub fn require_fields(variant: VariantName, batch: &Batch) -> Result<()> {
    let flags = variant.flags();
    if flags.uses_answer && batch.answers.is_none() {
        return Err(VqgError::Data(format!("variant {variant} requires answers")));
    }
    if flags.uses_category && batch.categories.is_none() {
        return Err(VqgError::Data(format!("variant {variant} requires categories")));
    }
    Ok(())
}

struct Encoded {
    h_i: Var,
    h_a: Option<Var>,
    z: Option<GaussVars>,
    t: Option<GaussVars>,
}

fn posterior_vars(tape: &mut Tape, model: &Model, batch: &Batch) -> Result<Encoded> {
    let variant = model.variant;
    require_fields(variant, batch)?;
    let flags = variant.flags();
    let features = tape.constant(batch.features.clone());
    let h_i = encode_image(tape, model, features);
    let h_a = match &batch.answers {
        Some(ans) if flags.uses_answer => Some(encode_answer(tape, model, ans)),
        _ => None,
    };
    let z = h_a.map(|h_a| z_head(tape, model, h_i, h_a));
    let t = match &batch.categories {
        Some(cats) if flags.has_space(Space::T) => {
            let h_c = encode_category(tape, model, cats);
            Some(t_head(tape, model, h_i, h_c))
        }
        _ => None,
    };
    Ok(Encoded { h_i, h_a, z, t })
}

/// Builds every active loss term for `batch` on `tape`.
pub fn build_loss_graph(
    tape: &mut Tape,
    model: &Model,
    batch: &Batch,
    weights: &LossWeights,
    noise: Noise,
) -> Result<LossGraph> {
    let variant = model.variant;
    let flags = variant.flags();
    let Encoded { h_i, h_a, z, t } = posterior_vars(tape, model, batch)?;
    let b = batch.len() as f64;
    let primary = match flags.primary_space() {
        Space::Z => z,
        Space::T => t,
    }
    .expect("primary posterior present");
    let latent = match noise {
        Noise::Sample(seed) if flags.variational => {
            let shape = tape.value(primary.mu).dim();
            reparameterize_vars(tape, primary, standard_normal_matrix(shape.0, shape.1, seed))
        }
        _ => primary.mu,
    };
    let mut terms = [None; 6];
    terms[Term::Mle.index()] = Some(mle_loss(tape, model, latent, &batch.questions));
    let per_dim = 1.0 / (b * model.dims.hidden as f64);
    if flags.recon_image {
        let target = tape.detach(h_i);
        let hat = model.ids.rec_image.apply(tape, &model.store, latent);
        let d = tape.sub(hat, target);
        let sq = tape.square(d);
        let s = tape.sum(sq);
        terms[Term::ImageRecon.index()] = Some(tape.scale(s, per_dim));
    }
    if flags.recon_answer {
        let target = tape.detach(h_a.expect("answer recon implies answers"));
        let hat = model.ids.rec_answer.apply(tape, &model.store, latent);
        let d = tape.sub(hat, target);
        let sq = tape.square(d);
        let s = tape.sum(sq);
        terms[Term::AnswerRecon.index()] = Some(tape.scale(s, per_dim));
    }
    if flags.variational {
        let kl = kl_standard_vars(tape, primary);
        terms[Term::PriorZ.index()] = Some(tape.scale(kl, 1.0 / b));
    }
    if flags.has_t_space {
        let (zp, tp) = (z.expect("z present"), t.expect("t present"));
        let kl = kl_vars(tape, zp, tp);
        terms[Term::SpaceMatch.index()] = Some(tape.scale(kl, 1.0 / b));
        let prior = kl_standard_vars(tape, tp);
        terms[Term::PriorT.index()] = Some(tape.scale(prior, 1.0 / b));
    }
    let weighted: Vec<Var> = Term::ALL
        .into_iter()
        .filter_map(|term| terms[term.index()].map(|v| (term, v)))
        .map(|(term, v)| tape.scale(v, weights.weight(term)))
        .collect();
    let total = tape.add_all(&weighted);
    Ok(LossGraph {
        variant,
        terms,
        total,
        z,
        t,
        latent,
    })
}

/// Norm of the gradient each term contributed to each parameter group.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TermProbe {
    pub norms: BTreeMap<Term, BTreeMap<ParamGroup, f64>>,
}

impl TermProbe {
    pub fn norm(&self, term: Term, group: ParamGroup) -> f64 {
        self.norms
            .get(&term)
            .and_then(|m| m.get(&group))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn group_norm(&self, group: ParamGroup) -> f64 {
        self.norms
            .values()
            .filter_map(|m| m.get(&group))
            .map(|n| n * n)
            .sum::<f64>()
            .sqrt()
    }
}

/// Gradients with routing: one backward pass per active term, each
/// contributing only to the groups the routing table allows.
pub fn routed_gradients(
    tape: &Tape,
    graph: &LossGraph,
    model: &Model,
    weights: &LossWeights,
    routes: &RoutingTable,
) -> (ParamGrads, TermProbe) {
    let mut grads = ParamGrads::zeros(model.store.len());
    let mut probe = TermProbe::default();
    for term in Term::ALL {
        let Some(v) = graph.term(term) else { continue };
        let w = weights.weight(term);
        if w == 0.0 {
            continue;
        }
        let g = tape.backward(v);
        let keep = |id| routes.allows(model.group_of(id), term);
        let mut own = ParamGrads::zeros(model.store.len());
        own.absorb_scaled(&g, w, keep);
        let per_group = probe.norms.entry(term).or_default();
        for group in ParamGroup::ALL {
            let n = own.norm_of(&model.ids_in(group));
            if n > 0.0 {
                per_group.insert(group, n);
            }
        }
        grads.absorb_scaled(&g, w, keep);
    }
    (grads, probe)
}

/// Plain gradient of the weighted total with no routing.
pub fn raw_gradients(tape: &Tape, graph: &LossGraph, model: &Model) -> ParamGrads {
    let mut grads = ParamGrads::zeros(model.store.len());
    grads.absorb(&tape.backward(graph.total), |_| true);
    grads
}

/// Posterior means and log-sigmas (each N x Z) of `batch` in `space`.
pub fn posteriors(model: &Model, batch: &Batch, space: Space) -> Result<(Array2<f64>, Array2<f64>)> {
    let variant = model.variant;
    if !variant.flags().has_space(space) {
        return Err(VqgError::Config(format!("variant {variant} has no {space}-space")));
    }
    match space {
        Space::Z if batch.answers.is_none() => {
            return Err(VqgError::Data("z-space codes require answers".into()));
        }
        Space::T if batch.categories.is_none() => {
            return Err(VqgError::Data("t-space codes require categories".into()));
        }
        _ => {}
    }
    let mut tape = Tape::new();
    let Encoded { z, t, .. } = posterior_vars(&mut tape, model, batch)?;
    let g = match space {
        Space::Z => z,
        Space::T => t,
    }
    .expect("space checked above");
    Ok((tape.value(g.mu).clone(), tape.value(g.log_sigma).clone()))
}

/// Outcome of one gradient computation over a batch.
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub grads: ParamGrads,
    pub probe: TermProbe,
    pub breakdown: LossBreakdown,
}

/// Share of each term's batch mean contributed by one chunk: the likelihood
/// is a mean over target tokens, every other term a mean over rows.
fn chunk_shares(chunks: &[Batch]) -> Vec<(f64, f64)> {
    let tokens: usize = chunks.iter().map(|c| c.questions.num_targets()).sum();
    let rows: usize = chunks.iter().map(Batch::len).sum();
    chunks
        .iter()
        .map(|c| {
            (
                c.questions.num_targets() as f64 / tokens.max(1) as f64,
                c.len() as f64 / rows.max(1) as f64,
            )
        })
        .collect()
}

fn share_of(term: Term, shares: (f64, f64)) -> f64 {
    if term == Term::Mle {
        shares.0
    } else {
        shares.1
    }
}

fn combine_breakdowns(parts: &[LossBreakdown], shares: &[(f64, f64)], weights: &LossWeights, variant: VariantName) -> LossBreakdown {
    let mut out = LossBreakdown::default();
    for t in Term::ALL {
        out.set(t, parts.iter().zip(shares).map(|(b, s)| b.get(t) * share_of(t, *s)).sum());
    }
    total_loss(&out, weights, variant)
}

/// Routed gradients of the batch made of `chunks`, computed chunk by chunk
/// and summed in chunk order, so the result does not depend on `exec`.
pub fn batch_gradients(
    model: &Model,
    chunks: &[Batch],
    weights: &LossWeights,
    routes: &RoutingTable,
    seed: u64,
    exec: crate::Exec,
) -> Result<StepGradients> {
    let shares = chunk_shares(chunks);
    let n = model.store.len();
    let per_chunk = exec.map_range(chunks.len(), |k| -> Result<(Vec<Option<ParamGrads>>, LossBreakdown)> {
        let mut tape = Tape::new();
        let graph = build_loss_graph(
            &mut tape,
            model,
            &chunks[k],
            weights,
            Noise::Sample(crate::seeding::derive(seed, k as u64)),
        )?;
        let breakdown = graph.breakdown(&tape);
        let mut per_term = Vec::with_capacity(Term::ALL.len());
        for term in Term::ALL {
            let w = weights.weight(term) * share_of(term, shares[k]);
            per_term.push(match graph.term(term) {
                Some(v) if w != 0.0 => {
                    let g = tape.backward(v);
                    let mut own = ParamGrads::zeros(n);
                    own.absorb_scaled(&g, w, |id| routes.allows(model.group_of(id), term));
                    Some(own)
                }
                _ => None,
            });
        }
        Ok((per_term, breakdown))
    });
    let mut term_grads: Vec<Option<ParamGrads>> = vec![None; Term::ALL.len()];
    let mut parts = Vec::with_capacity(chunks.len());
    for item in per_chunk {
        let (per_term, breakdown) = item?;
        parts.push(breakdown);
        for (slot, g) in term_grads.iter_mut().zip(per_term) {
            if let Some(g) = g {
                match slot {
                    Some(acc) => acc.add(&g),
                    None => *slot = Some(g),
                }
            }
        }
    }
    let mut grads = ParamGrads::zeros(n);
    let mut probe = TermProbe::default();
    for (term, g) in Term::ALL.into_iter().zip(&term_grads) {
        let Some(g) = g else { continue };
        let per_group = probe.norms.entry(term).or_default();
        for group in ParamGroup::ALL {
            let norm = g.norm_of(&model.ids_in(group));
            if norm > 0.0 {
                per_group.insert(group, norm);
            }
        }
        grads.add(g);
    }
    Ok(StepGradients {
        grads,
        probe,
        breakdown: combine_breakdowns(&parts, &shares, weights, model.variant),
    })
}

/// Loss breakdown of the batch made of `chunks` without gradients.
pub fn batch_loss(
    model: &Model,
    chunks: &[Batch],
    weights: &LossWeights,
    seed: u64,
    exec: crate::Exec,
) -> Result<LossBreakdown> {
    let shares = chunk_shares(chunks);
    let parts = exec.map_range(chunks.len(), |k| -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let graph = build_loss_graph(
            &mut tape,
            model,
            &chunks[k],
            weights,
            Noise::Sample(crate::seeding::derive(seed, k as u64)),
        )?;
        Ok(graph.breakdown(&tape))
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(combine_breakdowns(&parts, &shares, weights, model.variant))
}
