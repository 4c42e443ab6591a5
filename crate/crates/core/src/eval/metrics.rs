//! Corpus BLEU, CIDEr, and the set-based diversity measures.

use std::collections::{HashMap, HashSet};

use crate::error::{Result, VqgError};

type Ngram<'a> = &'a [String];

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Ngram<'_>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped n-gram matches and candidate n-gram total at one order.
fn clipped(candidate: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let matched = cand
        .iter()
        .map(|(g, c)| (*c).min(refc.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

/// Modified precision of one candidate at order `n`.
pub fn modified_precision(candidate: &[String], reference: &[String], n: usize) -> f64 {
    let (m, t) = clipped(candidate, reference, n);
    if t == 0 {
        0.0
    } else {
        m as f64 / t as f64
    }
}

/// Corpus BLEU with uniform weights over orders `1..=n` and a brevity
/// penalty; one reference per candidate.
pub fn bleu_n(candidates: &[Vec<String>], references: &[Vec<String>], n: usize) -> Result<f64> {
    if candidates.is_empty() {
        return Err(VqgError::Data("BLEU needs a non-empty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(VqgError::Data(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if !(1..=4).contains(&n) {
        return Err(VqgError::Config(format!("BLEU order must be 1..=4, got {n}")));
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let (mut m, mut t) = (0, 0);
        for (c, r) in candidates.iter().zip(references) {
            let (cm, ct) = clipped(c, r, order);
            m += cm;
            t += ct;
        }
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / n as f64).exp())
}

fn tfidf<'a>(tokens: &'a [String], n: usize, idf: &dyn Fn(Ngram<'_>) -> f64) -> HashMap<Ngram<'a>, f64> {
    ngram_counts(tokens, n)
        .into_iter()
        .map(|(g, c)| {
            let w = c as f64 * idf(g);
            (g, w)
        })
        .collect()
}

fn cosine(a: &HashMap<Ngram<'_>, f64>, b: &HashMap<Ngram<'_>, f64>) -> f64 {
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().map(|(g, x)| x * b.get(g).copied().unwrap_or(0.0)).sum();
    dot / (na * nb)
}

/// CIDEr: for n in 1..=4, the mean tf-idf cosine between each candidate and
/// its reference, averaged over n and scaled by 10. Document frequencies
/// come from `corpus`, one document per image.
pub fn cider(candidates: &[Vec<String>], references: &[Vec<String>], corpus: &[Vec<String>]) -> Result<f64> {
    if candidates.is_empty() || corpus.is_empty() {
        return Err(VqgError::Data("CIDEr needs a non-empty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(VqgError::Data(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    let docs = corpus.len() as f64;
    let mut total = 0.0;
    for n in 1..=4 {
        let mut df: HashMap<Ngram<'_>, usize> = HashMap::new();
        for doc in corpus {
            for g in ngram_counts(doc, n).into_keys() {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let idf = |g: Ngram<'_>| (docs / df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
        let mut sum = 0.0;
        for (c, r) in candidates.iter().zip(references) {
            sum += cosine(&tfidf(c, n, &idf), &tfidf(r, n, &idf));
        }
        total += sum / candidates.len() as f64;
    }
    Ok(10.0 * total / 4.0)
}

fn unique<'a>(qs: impl IntoIterator<Item = &'a Vec<String>>) -> HashSet<Vec<String>> {
    qs.into_iter()
        .map(|q| q.iter().map(|t| t.to_lowercase()).collect())
        .collect()
}

/// `100 * |unique(generated)| / |unique(ground_truth)|`.
pub fn diversity_strength(generated: &[Vec<String>], ground_truth: &[Vec<String>]) -> Result<f64> {
    let gt = unique(ground_truth);
    if gt.is_empty() {
        return Err(VqgError::Data("ground-truth question set is empty".into()));
    }
    Ok(100.0 * unique(generated).len() as f64 / gt.len() as f64)
}

/// Percentage of unique generated questions absent from `training`.
pub fn diversity_inventiveness(generated: &[Vec<String>], training: &[Vec<String>]) -> Result<f64> {
    let gen = unique(generated);
    if gen.is_empty() {
        return Err(VqgError::Data("generated question set is empty".into()));
    }
    let seen = unique(training);
    Ok(100.0 * gen.difference(&seen).count() as f64 / gen.len() as f64)
}
