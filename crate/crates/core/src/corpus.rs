//! Vocabulary, tokenization, dataset conversion, and padded batching.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, VqgError};
use crate::seeding;
use crate::world::DatasetRecord;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Whitespace tokenization over lowercased text.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(|t| t.to_lowercase()).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Every token seen at least `min_count` times, ordered by descending
    /// frequency then lexicographically, after the four special tokens.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Result<Self> {
        if min_count == 0 {
            return Err(VqgError::Config("min_count must be >= 1".into()));
        }
        let mut freq: HashMap<String, usize> = HashMap::new();
        let mut any = false;
        for text in texts {
            for tok in tokenize(text) {
                any = true;
                *freq.entry(tok).or_default() += 1;
            }
        }
        if !any {
            return Err(VqgError::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut kept: Vec<(String, usize)> = freq
            .into_iter()
            .filter(|(t, n)| *n >= min_count && !SPECIALS.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t))
    }

    /// Vocabulary over the questions and answers of `records`.
    pub fn from_records(records: &[DatasetRecord], min_count: usize) -> Result<Self> {
        let texts = records.iter().flat_map(|r| {
            std::iter::once(r.question.as_str()).chain(r.answer.as_deref())
        });
        Self::build(texts, min_count)
    }

    /// Builds from non-special tokens in id order (ids start at 4).
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(VqgError::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(SPECIALS[UNK])
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Non-special tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[SPECIALS.len()..]
    }

    /// `[BOS, ids..., EOS]`; unknown tokens map to UNK.
    pub fn encode(&self, s: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(tokenize(s).iter().map(|t| self.id(t)));
        ids.push(EOS);
        ids
    }

    /// Inverse of [`encode`](Self::encode): drops BOS and PAD, stops at EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        self.decode_tokens(ids).join(" ")
    }

    pub fn decode_tokens(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .copied()
            .take_while(|&i| i != EOS)
            .filter(|&i| i != BOS && i != PAD)
            .map(|i| self.token(i).to_string())
            .collect()
    }

    /// JSON array of all tokens in id order.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.tokens).expect("strings serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let tokens: Vec<String> = serde_json::from_str(text)?;
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(VqgError::Format("vocabulary must start with the special tokens".into()));
        }
        Self::from_tokens(tokens.into_iter().skip(SPECIALS.len()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| VqgError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| VqgError::io(path, e))?;
        Self::from_json(&text)
    }

    /// SHA-256 over the JSON token list.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// One training triple in id space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QAExample {
    pub features: Vec<f64>,
    pub question: Vec<usize>,
    pub answer: Option<Vec<usize>>,
    pub category: Option<usize>,
}

/// Converts parsed records into id space, validating every invariant.
pub fn to_examples(
    records: &[DatasetRecord],
    vocab: &Vocabulary,
    categories: &[String],
) -> Result<Vec<QAExample>> {
    let dim = records.first().map(|r| r.features.len()).unwrap_or(0);
    records
        .iter()
        .map(|r| {
            if r.features.len() != dim || dim == 0 {
                return Err(VqgError::Data(format!(
                    "record {}: feature dimension {} (expected {dim})",
                    r.id,
                    r.features.len()
                )));
            }
            let question = vocab.encode(&r.question);
            if question.len() < 3 {
                return Err(VqgError::Data(format!("record {}: empty question", r.id)));
            }
            let answer = match r.answer.as_deref() {
                Some(a) => {
                    let ids = vocab.encode(a);
                    if ids.len() < 3 {
                        return Err(VqgError::Data(format!("record {}: empty answer", r.id)));
                    }
                    Some(ids)
                }
                None => None,
            };
            let category = match r.category.as_deref() {
                Some(c) => Some(categories.iter().position(|x| x == c).ok_or_else(|| {
                    VqgError::Data(format!("record {}: unknown category {c:?}", r.id))
                })?),
                None => None,
            };
            Ok(QAExample {
                features: r.features.clone(),
                question,
                answer,
                category,
            })
        })
        .collect()
}

/// Deterministic 80/20 (or `train_fraction`) split preserving file order.
pub fn split_train_val<T: Clone>(items: &[T], train_fraction: f64) -> (Vec<T>, Vec<T>) {
    let cut = ((items.len() as f64) * train_fraction).round() as usize;
    let cut = cut.clamp(usize::from(!items.is_empty()), items.len());
    (items[..cut].to_vec(), items[cut..].to_vec())
}

/// Right-padded token matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub rows: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let seqs: Vec<&[usize]> = seqs.into_iter().collect();
        let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        Self::padded_to(seqs, width)
    }

    pub fn padded_to(seqs: Vec<&[usize]>, width: usize) -> Self {
        let lengths = seqs.iter().map(|s| s.len()).collect();
        let rows = seqs
            .iter()
            .map(|s| {
                let mut r = s.to_vec();
                r.resize(width.max(s.len()), PAD);
                r
            })
            .collect();
        TokenBatch { rows, lengths }
    }

    pub fn width(&self) -> usize {
        self.rows.first().map(Vec::len).unwrap_or(0)
    }

    pub fn batch_size(&self) -> usize {
        self.rows.len()
    }

    pub fn column(&self, s: usize) -> Vec<usize> {
        self.rows.iter().map(|r| r[s]).collect()
    }

    /// Rows `start..end`, re-padded to their own maximum length.
    pub fn rows_range(&self, start: usize, end: usize) -> Self {
        Self::from_sequences((start..end).map(|r| &self.rows[r][..self.lengths[r]]))
    }

    /// Number of next-token targets (each row's length minus one).
    pub fn num_targets(&self) -> usize {
        self.lengths.iter().map(|l| l.saturating_sub(1)).sum()
    }

    /// Appends `extra` PAD columns.
    pub fn with_extra_padding(&self, extra: usize) -> Self {
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.extend(std::iter::repeat_n(PAD, extra));
                r
            })
            .collect();
        TokenBatch {
            rows,
            lengths: self.lengths.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Array2<f64>,
    pub questions: TokenBatch,
    pub answers: Option<TokenBatch>,
    pub categories: Option<Vec<usize>>,
    pub num_categories: usize,
}

impl Batch {
    pub fn from_examples(examples: &[&QAExample], num_categories: usize) -> Self {
        let dim = examples[0].features.len();
        let mut features = Array2::zeros((examples.len(), dim));
        for (r, e) in examples.iter().enumerate() {
            for (c, x) in e.features.iter().enumerate() {
                features[[r, c]] = *x;
            }
        }
        let questions = TokenBatch::from_sequences(examples.iter().map(|e| e.question.as_slice()));
        let answers = examples
            .iter()
            .map(|e| e.answer.as_deref())
            .collect::<Option<Vec<_>>>()
            .map(TokenBatch::from_sequences);
        let categories = examples.iter().map(|e| e.category).collect();
        Batch {
            features,
            questions,
            answers,
            categories,
            num_categories,
        }
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Consecutive sub-batches of at most `rows` examples each.
    pub fn split(&self, rows: usize) -> Vec<Batch> {
        let rows = rows.max(1);
        (0..self.len())
            .step_by(rows)
            .map(|start| {
                let end = (start + rows).min(self.len());
                Batch {
                    features: self.features.slice(ndarray::s![start..end, ..]).to_owned(),
                    questions: self.questions.rows_range(start, end),
                    answers: self.answers.as_ref().map(|a| a.rows_range(start, end)),
                    categories: self.categories.as_ref().map(|c| c[start..end].to_vec()),
                    num_categories: self.num_categories,
                }
            })
            .collect()
    }

    /// One-hot category rows (B x C).
    pub fn category_one_hot(&self) -> Option<Array2<f64>> {
        let cats = self.categories.as_ref()?;
        let mut m = Array2::zeros((cats.len(), self.num_categories));
        for (r, &c) in cats.iter().enumerate() {
            m[[r, c]] = 1.0;
        }
        Some(m)
    }
}

/// Shuffles `examples` with `seed` and cuts them into batches; the final
/// partial batch is kept.
pub fn make_batches(
    examples: &[QAExample],
    batch_size: usize,
    num_categories: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(VqgError::Config("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut seeding::rng(seed));
    Ok(order
        .chunks(batch_size)
        .map(|idx| {
            let refs: Vec<&QAExample> = idx.iter().map(|&i| &examples[i]).collect();
            Batch::from_examples(&refs, num_categories)
        })
        .collect())
}

/// In-order batches without shuffling (evaluation).
pub fn sequential_batches(
    examples: &[QAExample],
    batch_size: usize,
    num_categories: usize,
) -> Vec<Batch> {
    examples
        .chunks(batch_size.max(1))
        .map(|c| Batch::from_examples(&c.iter().collect::<Vec<_>>(), num_categories))
        .collect()
}
