//! Report metrics, label metrics, cross-modal retrieval and 2-D export.
//!
//! Text metrics run on report content: tokens after the first `END` and
//! control tokens are dropped before scoring. BLEU uses add-one smoothing
//! on the 2..n-gram precisions (unigram precision is unsmoothed, so a
//! candidate with no overlapping unigram scores exactly zero). ROUGE-L is
//! the LCS F-measure with recall weight `ROUGE_BETA = 1.2`.

mod pca;
#[cfg(test)]
mod tests;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::synthgen::vocab::{content_tokens, extract_labels, LabelSet, NUM_CONDITIONS};
use crate::{Error, Result};

pub use pca::{pca_2d, write_embeddings_csv, Pca2d};

pub const ROUGE_BETA: f64 = 1.2;
pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub rouge_l: f64,
    pub ce_precision: f64,
    pub ce_recall: f64,
    pub ce_f1: f64,
    pub retrieval_recall_at_1: Option<f64>,
    pub n_samples: usize,
}

impl EvalReport {
    pub const COLUMNS: [&'static str; 9] = [
        "bleu_1",
        "bleu_2",
        "bleu_3",
        "bleu_4",
        "rouge_l",
        "ce_precision",
        "ce_recall",
        "ce_f1",
        "retrieval_recall_at_1",
    ];

    /// Metric values in [`Self::COLUMNS`] order; missing retrieval is NaN.
    pub fn values(&self) -> [f64; 9] {
        [
            self.bleu_1,
            self.bleu_2,
            self.bleu_3,
            self.bleu_4,
            self.rouge_l,
            self.ce_precision,
            self.ce_recall,
            self.ce_f1,
            self.retrieval_recall_at_1.unwrap_or(f64::NAN),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Micro,
    Macro,
}

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and candidate n-gram total.
fn clipped(candidate: &[u32], reference: &[u32], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

fn bleu_from_counts(matches: &[(usize, usize)], cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        return 0.0;
    }
    let n = matches.len();
    let mut log_sum = 0.0;
    for (k, &(m, c)) in matches.iter().enumerate() {
        let p = if k == 0 {
            if m == 0 {
                return 0.0;
            }
            m as f64 / c as f64
        } else {
            (m as f64 + 1.0) / (c as f64 + 1.0)
        };
        log_sum += p.ln() / n as f64;
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * log_sum.exp()
}

/// Sentence BLEU-n of one candidate against one reference.
pub fn bleu(candidate: &[u32], reference: &[u32], n: usize) -> f64 {
    assert!(n >= 1, "BLEU order must be positive");
    let (c, r) = (content_tokens(candidate), content_tokens(reference));
    let counts: Vec<_> = (1..=n).map(|k| clipped(&c, &r, k)).collect();
    bleu_from_counts(&counts, c.len(), r.len())
}

/// Corpus BLEU-n: counts and lengths are pooled before the geometric mean.
pub fn corpus_bleu(candidates: &[Vec<u32>], references: &[Vec<u32>], n: usize) -> f64 {
    assert!(n >= 1, "BLEU order must be positive");
    let mut counts = vec![(0, 0); n];
    let (mut cl, mut rl) = (0, 0);
    for (cand, refr) in candidates.iter().zip(references) {
        let (c, r) = (content_tokens(cand), content_tokens(refr));
        for (k, slot) in counts.iter_mut().enumerate() {
            let (m, t) = clipped(&c, &r, k + 1);
            slot.0 += m;
            slot.1 += t;
        }
        cl += c.len();
        rl += r.len();
    }
    bleu_from_counts(&counts, cl, rl)
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[u32], b: &[u32]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(candidate: &[u32], reference: &[u32]) -> f64 {
    let (c, r) = (content_tokens(candidate), content_tokens(reference));
    let l = lcs_len(&c, &r);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / c.len() as f64;
    let rc = l as f64 / r.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * rc / (rc + b2 * p)
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Label precision/recall/F1 of generated reports against gold label sets.
pub fn ce_metrics(
    generated: &[Vec<u32>],
    gold: &[LabelSet],
    averaging: Averaging,
) -> (f64, f64, f64) {
    let mut tp = [0usize; NUM_CONDITIONS];
    let mut fp = [0usize; NUM_CONDITIONS];
    let mut fneg = [0usize; NUM_CONDITIONS];
    for (report, truth) in generated.iter().zip(gold) {
        let pred = extract_labels(report);
        for j in 0..NUM_CONDITIONS as u8 {
            let k = j as usize;
            match (pred.contains(&j), truth.contains(&j)) {
                (true, true) => tp[k] += 1,
                (true, false) => fp[k] += 1,
                (false, true) => fneg[k] += 1,
                (false, false) => {}
            }
        }
    }
    match averaging {
        Averaging::Micro => {
            let (t, p, n) = (
                tp.iter().sum(),
                fp.iter().sum::<usize>(),
                fneg.iter().sum::<usize>(),
            );
            let precision = ratio(t, t + p);
            let recall = ratio(t, t + n);
            (precision, recall, f1(precision, recall))
        }
        Averaging::Macro => {
            let mut acc = (0.0, 0.0, 0.0);
            for k in 0..NUM_CONDITIONS {
                let p = ratio(tp[k], tp[k] + fp[k]);
                let r = ratio(tp[k], tp[k] + fneg[k]);
                acc.0 += p;
                acc.1 += r;
                acc.2 += f1(p, r);
            }
            let n = NUM_CONDITIONS as f64;
            (acc.0 / n, acc.1 / n, acc.2 / n)
        }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let den = na * nb;
    if den <= f64::MIN_POSITIVE {
        0.0
    } else {
        dot / den
    }
}

/// Fraction of queries whose highest-cosine text row is their own.
/// Ties go to the lowest index.
pub fn retrieval_recall(image: &[Vec<f64>], text: &[Vec<f64>]) -> Result<f64> {
    if image.len() != text.len() || image.is_empty() {
        return Err(Error::LengthMismatch {
            op: "retrieval_recall",
            left: image.len(),
            right: text.len(),
        });
    }
    let hits = image
        .iter()
        .enumerate()
        .filter(|(i, q)| {
            let mut best = 0;
            let mut best_s = f64::NEG_INFINITY;
            for (j, t) in text.iter().enumerate() {
                let s = cosine(q, t);
                if s > best_s {
                    best_s = s;
                    best = j;
                }
            }
            best == *i
        })
        .count();
    Ok(hits as f64 / image.len() as f64)
}

/// Corpus-level report and label metrics.
pub fn evaluate_reports(
    generated: &[Vec<u32>],
    references: &[Vec<u32>],
    gold_labels: &[LabelSet],
    averaging: Averaging,
) -> Result<EvalReport> {
    if generated.len() != references.len() || generated.len() != gold_labels.len() {
        return Err(Error::LengthMismatch {
            op: "evaluate_reports",
            left: generated.len(),
            right: references.len(),
        });
    }
    let (p, r, f) = ce_metrics(generated, gold_labels, averaging);
    let rouge = if generated.is_empty() {
        0.0
    } else {
        generated
            .iter()
            .zip(references)
            .map(|(c, r)| rouge_l(c, r))
            .sum::<f64>()
            / generated.len() as f64
    };
    Ok(EvalReport {
        bleu_1: corpus_bleu(generated, references, 1),
        bleu_2: corpus_bleu(generated, references, 2),
        bleu_3: corpus_bleu(generated, references, 3),
        bleu_4: corpus_bleu(generated, references, 4),
        rouge_l: rouge,
        ce_precision: p,
        ce_recall: r,
        ce_f1: f,
        retrieval_recall_at_1: None,
        n_samples: generated.len(),
    })
}
