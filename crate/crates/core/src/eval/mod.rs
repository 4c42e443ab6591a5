//! Evaluation: language metrics, latent probes, diversity, and oracle
//! relevance of generated questions.

pub mod metrics;
pub mod probe;
pub mod report;

use std::collections::{BTreeMap, HashMap};

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::{sequential_batches, to_examples, QAExample, Vocabulary};
use crate::error::{Result, VqgError};
use crate::model::generator::{decode_greedy_batch, sample_latents, DEFAULT_MAX_LEN};
use crate::model::Model;
use crate::objective::{posteriors, Space, VariantName};
use crate::seeding;
use crate::trainer::Checkpoint;
use crate::world::{check_relevance, DatasetRecord};
use crate::Exec;

pub use metrics::{bleu_n, cider, diversity_inventiveness, diversity_strength};
pub use probe::{probe_accuracy, ProbeConfig, ProbeResult};
pub use report::{MetricsReport, SpaceMetrics};

const ENCODE_ROWS: usize = 256;

/// Posterior-mean codes with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Codes {
    pub codes: Array2<f64>,
    pub categories: Vec<Option<usize>>,
    pub answers: Vec<Option<Vec<usize>>>,
}

fn stacked(model: &Model, examples: &[QAExample], space: Space, exec: Exec) -> Result<(Array2<f64>, Array2<f64>)> {
    if examples.is_empty() {
        return Err(VqgError::Data("no examples to encode".into()));
    }
    let batches = sequential_batches(examples, ENCODE_ROWS, model.dims.categories);
    let parts = exec.map_slice(&batches, |b| posteriors(model, b, space));
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let mu: Vec<_> = parts.iter().map(|(m, _)| m.view()).collect();
    let ls: Vec<_> = parts.iter().map(|(_, l)| l.view()).collect();
    Ok((
        concatenate(Axis(0), &mu).expect("equal widths"),
        concatenate(Axis(0), &ls).expect("equal widths"),
    ))
}

/// Posterior means in `space` for every example (N x Z).
pub fn extract_codes(model: &Model, examples: &[QAExample], space: Space, exec: Exec) -> Result<Codes> {
    let (mu, _) = stacked(model, examples, space, exec)?;
    Ok(Codes {
        codes: mu,
        categories: examples.iter().map(|e| e.category).collect(),
        answers: examples.iter().map(|e| e.answer.clone()).collect(),
    })
}

/// The space questions are generated from when no answer is given: `t`
/// when the variant has one, otherwise `z`.
pub fn inference_space(variant: VariantName) -> Space {
    if variant.flags().has_space(Space::T) {
        Space::T
    } else {
        Space::Z
    }
}

/// Greedy decode from each example's posterior mean.
pub fn mean_decode(model: &Model, examples: &[QAExample], space: Space, max_len: usize, exec: Exec) -> Result<Vec<Vec<usize>>> {
    let (mu, _) = stacked(model, examples, space, exec)?;
    let chunks: Vec<Array2<f64>> = mu
        .axis_chunks_iter(Axis(0), ENCODE_ROWS)
        .map(|c| c.to_owned())
        .collect();
    Ok(exec
        .map_slice(&chunks, |c| decode_greedy_batch(model, c, max_len))
        .into_iter()
        .flatten()
        .collect())
}

/// `n` reparameterized draws per example, each greedily decoded.
/// Non-variational variants have no noise, so all draws equal the mean decode.
pub fn sample_decode(
    model: &Model,
    examples: &[QAExample],
    space: Space,
    n: usize,
    seed: u64,
    max_len: usize,
    exec: Exec,
) -> Result<Vec<Vec<Vec<usize>>>> {
    if n == 0 {
        return Err(VqgError::Config("number of samples must be >= 1".into()));
    }
    let (mu, ls) = stacked(model, examples, space, exec)?;
    let variational = model.variant.flags().variational;
    let per_example = exec.map_range(examples.len(), |r| {
        let rep = |m: &Array2<f64>| Array2::from_shape_fn((n, m.ncols()), |(_, k)| m[[r, k]]);
        let mean = rep(&mu);
        let latents = if variational {
            sample_latents(&mean, &rep(&ls), seeding::derive(seed, r as u64))
        } else {
            mean
        };
        decode_greedy_batch(model, &latents, max_len)
    });
    Ok(per_example)
}

/// Oracle relevance percentages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Relevance {
    pub image_pct: f64,
    pub category_pct: f64,
}

/// Scores questions against their scenes and requested categories.
pub fn relevance_of(questions: &[Vec<String>], records: &[DatasetRecord]) -> Result<Relevance> {
    if questions.is_empty() || questions.len() != records.len() {
        return Err(VqgError::Data("relevance needs one question per record".into()));
    }
    let (mut image, mut cat) = (0usize, 0usize);
    for (q, r) in questions.iter().zip(records) {
        let verdict = check_relevance(q, &r.scene);
        if verdict.answerable {
            image += 1;
            if verdict.matched_category.is_some() && verdict.matched_category == r.category {
                cat += 1;
            }
        }
    }
    let n = questions.len() as f64;
    Ok(Relevance {
        image_pct: 100.0 * image as f64 / n,
        category_pct: 100.0 * cat as f64 / n,
    })
}

/// Mean-decodes one question per record from `space` and scores it.
pub fn relevance_rates(
    model: &Model,
    vocab: &Vocabulary,
    categories: &[String],
    records: &[DatasetRecord],
    space: Space,
    exec: Exec,
) -> Result<Relevance> {
    let examples = to_examples(records, vocab, categories)?;
    let ids = mean_decode(model, &examples, space, DEFAULT_MAX_LEN, exec)?;
    let questions: Vec<Vec<String>> = ids.iter().map(|q| vocab.decode_tokens(q)).collect();
    relevance_of(&questions, records)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityScore {
    pub strength: f64,
    pub inventiveness: f64,
}

/// Per-category strength and inventiveness of sampled questions.
pub fn diversity_by_category(
    generated: &[Vec<Vec<String>>],
    records: &[DatasetRecord],
    training_questions: &[Vec<String>],
) -> Result<BTreeMap<String, DiversityScore>> {
    if generated.len() != records.len() {
        return Err(VqgError::Data("one sample set per record expected".into()));
    }
    let mut gen: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    let mut gt: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    for (qs, r) in generated.iter().zip(records) {
        let cat = r.category.clone().unwrap_or_default();
        gen.entry(cat.clone()).or_default().extend(qs.iter().cloned());
        gt.entry(cat).or_default().push(crate::corpus::tokenize(&r.question));
    }
    gen.into_iter()
        .map(|(cat, qs)| {
            Ok((
                cat.clone(),
                DiversityScore {
                    strength: diversity_strength(&qs, &gt[&cat])?,
                    inventiveness: diversity_inventiveness(&qs, training_questions)?,
                },
            ))
        })
        .collect()
}

/// Settings for [`evaluate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub max_len: usize,
    pub diversity_draws: usize,
    /// Caps the records used for diversity sampling.
    pub diversity_records: Option<usize>,
    /// Caps the training codes used to fit probes.
    pub probe_train_records: usize,
    pub probe: ProbeConfig,
    pub language: bool,
    pub probes: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_len: DEFAULT_MAX_LEN,
            diversity_draws: 20,
            diversity_records: None,
            probe_train_records: 2000,
            probe: ProbeConfig::default(),
            language: true,
            probes: true,
            seed: 0,
        }
    }
}

/// Integer labels for answer sequences, numbered by first appearance in
/// `train`; test answers never seen in training get `None`.
pub fn answer_labels(
    train: &[Option<Vec<usize>>],
    test: &[Option<Vec<usize>>],
) -> (Vec<Option<usize>>, Vec<Option<usize>>, usize) {
    let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
    let tr = train
        .iter()
        .map(|a| {
            a.as_ref().map(|a| {
                let next = index.len();
                *index.entry(a.clone()).or_insert(next)
            })
        })
        .collect();
    let te = test
        .iter()
        .map(|a| a.as_ref().and_then(|a| index.get(a).copied()))
        .collect();
    (tr, te, index.len())
}

fn labelled(codes: &Array2<f64>, labels: &[Option<usize>]) -> (Array2<f64>, Vec<usize>) {
    let keep: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
    (codes.select(Axis(0), &keep), keep.iter().map(|&i| labels[i].unwrap()).collect())
}

/// Probe accuracies for answer and category labels of one space.
pub fn probe_space(
    model: &Model,
    train: &[QAExample],
    test: &[QAExample],
    space: Space,
    config: &ProbeConfig,
    exec: Exec,
) -> Result<(Option<ProbeResult>, Option<ProbeResult>)> {
    let tr = extract_codes(model, train, space, exec)?;
    let te = extract_codes(model, test, space, exec)?;
    let (atr, ate, n_answers) = answer_labels(&tr.answers, &te.answers);
    let run = |trl: &[Option<usize>], tel: &[Option<usize>], classes: usize, salt: u64| -> Result<Option<ProbeResult>> {
        let (xtr, ytr) = labelled(&tr.codes, trl);
        let (xte, yte) = labelled(&te.codes, tel);
        if ytr.is_empty() || yte.is_empty() {
            return Ok(None);
        }
        let cfg = ProbeConfig {
            seed: seeding::derive(config.seed, salt),
            ..config.clone()
        };
        probe_accuracy(&xtr, &ytr, &xte, &yte, classes, &cfg).map(Some)
    };
    let answer = run(&atr, &ate, n_answers, 1)?;
    let category = run(&tr.categories, &te.categories, model.dims.categories, 2)?;
    Ok((answer, category))
}

/// Full metrics for one checkpoint over every space it supports.
pub fn evaluate(
    ckpt: &Checkpoint,
    train_records: &[DatasetRecord],
    test_records: &[DatasetRecord],
    config: &EvalConfig,
    exec: Exec,
) -> Result<MetricsReport> {
    let model = ckpt.model()?;
    let vocab = &ckpt.vocab;
    let cats = &ckpt.categories;
    let test = to_examples(test_records, vocab, cats)?;
    let mut spaces = BTreeMap::new();
    for space in model.variant.flags().spaces() {
        let mut m = SpaceMetrics::default();
        if config.language {
            let ids = mean_decode(&model, &test, space, config.max_len, exec)?;
            let cands: Vec<Vec<String>> = ids.iter().map(|q| vocab.decode_tokens(q)).collect();
            let refs: Vec<Vec<String>> = test_records.iter().map(|r| crate::corpus::tokenize(&r.question)).collect();
            for n in 1..=4 {
                m.bleu[n - 1] = bleu_n(&cands, &refs, n)?;
            }
            m.cider = cider(&cands, &refs, &refs)?;
            let rel = relevance_of(&cands, test_records)?;
            m.relevance_image_pct = rel.image_pct;
            m.relevance_category_pct = rel.category_pct;

            let limit = config.diversity_records.unwrap_or(test.len()).min(test.len());
            let samples = sample_decode(
                &model,
                &test[..limit],
                space,
                config.diversity_draws,
                seeding::derive(config.seed, 0xD1),
                config.max_len,
                exec,
            )?;
            let samples: Vec<Vec<Vec<String>>> = samples
                .iter()
                .map(|qs| qs.iter().map(|q| vocab.decode_tokens(q)).collect())
                .collect();
            let training: Vec<Vec<String>> = train_records.iter().map(|r| crate::corpus::tokenize(&r.question)).collect();
            m.diversity = diversity_by_category(&samples, &test_records[..limit], &training)?;
        }
        if config.probes {
            let limit = config.probe_train_records.min(train_records.len());
            let train = to_examples(&train_records[..limit], vocab, cats)?;
            let (answer, category) = probe_space(&model, &train, &test, space, &config.probe, exec)?;
            m.probe_answer = answer;
            m.probe_category = category;
        }
        spaces.insert(space, m);
    }
    Ok(MetricsReport {
        variant: model.variant,
        spaces,
        config: serde_json::json!({
            "train": ckpt.config,
            "eval": config,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use crate::model::Dims;
    use crate::world::{generate_records, WorldConfig};

    fn records(n: usize) -> Vec<DatasetRecord> {
        generate_records(n, &WorldConfig::default(), 3, "t", Exec::Sequential).unwrap()
    }

    #[test]
    fn template_questions_are_fully_relevant() {
        let recs = records(60);
        let qs: Vec<_> = recs.iter().map(|r| tokenize(&r.question)).collect();
        let rel = relevance_of(&qs, &recs).unwrap();
        assert_eq!((rel.image_pct, rel.category_pct), (100.0, 100.0));
        let junk = vec![tokenize("purple monkey dishwasher"); recs.len()];
        let rel = relevance_of(&junk, &recs).unwrap();
        assert_eq!((rel.image_pct, rel.category_pct), (0.0, 0.0));
    }

    fn model_for(recs: &[DatasetRecord], variant: VariantName) -> (Model, Vocabulary, Vec<String>) {
        let wc = WorldConfig::default();
        let vocab = Vocabulary::from_records(recs, 1).unwrap();
        let dims = Dims {
            hidden: 8,
            latent: 4,
            features: wc.feature_dim(),
            vocab: vocab.len(),
            categories: wc.categories.len(),
        };
        (Model::new(dims, variant, 1), vocab, wc.categories)
    }

    #[test]
    fn codes_are_deterministic_and_shaped() {
        let recs = records(30);
        let (m, vocab, cats) = model_for(&recs, VariantName::Ours);
        let ex = to_examples(&recs, &vocab, &cats).unwrap();
        let a = extract_codes(&m, &ex, Space::T, Exec::Sequential).unwrap();
        let b = extract_codes(&m, &ex, Space::T, Exec::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.codes.dim(), (30, 4));
        let (ia, _, _) = model_for(&recs, VariantName::Ia2q);
        assert!(extract_codes(&ia, &ex, Space::T, Exec::Sequential).is_err());
        let mut no_answers = ex.clone();
        no_answers.iter_mut().for_each(|e| e.answer = None);
        assert!(matches!(
            extract_codes(&m, &no_answers, Space::Z, Exec::Sequential),
            Err(VqgError::Data(_))
        ));
    }

    #[test]
    fn sampling_is_seeded() {
        let recs = records(5);
        let (m, vocab, cats) = model_for(&recs, VariantName::Ours);
        let ex = to_examples(&recs, &vocab, &cats).unwrap();
        let a = sample_decode(&m, &ex, Space::T, 4, 9, 20, Exec::Sequential).unwrap();
        assert_eq!(a, sample_decode(&m, &ex, Space::T, 4, 9, 20, Exec::default()).unwrap());
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|s| s.len() == 4));
        let (ia, _, _) = model_for(&recs, VariantName::Ia2q);
        let s = sample_decode(&ia, &ex, Space::Z, 3, 9, 20, Exec::Sequential).unwrap();
        assert!(s.iter().all(|d| d.iter().all(|q| *q == d[0])));
    }

    #[test]
    fn answer_labels_follow_training_order() {
        let tr = vec![Some(vec![1, 5, 2]), Some(vec![1, 6, 2]), Some(vec![1, 5, 2])];
        let te = vec![Some(vec![1, 6, 2]), Some(vec![1, 9, 2]), None];
        let (a, b, n) = answer_labels(&tr, &te);
        assert_eq!(a, vec![Some(0), Some(1), Some(0)]);
        assert_eq!(b, vec![Some(1), None, None]);
        assert_eq!(n, 2);
    }
}
