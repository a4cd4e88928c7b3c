//! Generation metrics: recall-oriented ROUGE-N, ROUGE-L with a
//! recall-weighted F-measure, corpus-level smoothed BLEU, and Fleiss'
//! kappa for annotator agreement.
//!
//! Every constant that affects a score is fixed here so results are
//! reproducible bit-for-bit: ROUGE-L uses `beta = 1.2`, and BLEU applies
//! add-one smoothing only to n-gram orders with zero matches.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Recall weighting of the ROUGE-L F-measure.
pub const ROUGE_L_BETA: f64 = 1.2;

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            let gram: Vec<&str> = window.iter().map(|t| t.as_ref()).collect();
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Recall-oriented ROUGE-N: clipped n-gram overlap over the reference
/// n-gram count.
pub fn rouge_n<T: AsRef<str>>(candidate: &[T], reference: &[T], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Contract("rouge_n needs n >= 1".into()));
    }
    if reference.is_empty() {
        return Err(Error::Contract("rouge_n needs a non-empty reference".into()));
    }
    let ref_counts = ngram_counts(reference, n);
    let total: usize = ref_counts.values().sum();
    if total == 0 {
        // reference shorter than n
        return Ok(0.0);
    }
    let cand_counts = ngram_counts(candidate, n);
    let matched: usize = ref_counts
        .iter()
        .map(|(gram, &rc)| rc.min(cand_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    Ok(matched as f64 / total as f64)
}

fn lcs_len<T: AsRef<str>>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure from LCS precision/recall with [`ROUGE_L_BETA`].
pub fn rouge_l<T: AsRef<str>>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::Contract(
            "rouge_l needs non-empty candidate and reference".into(),
        ));
    }
    let lcs = lcs_len(candidate, reference) as f64;
    let recall = lcs / reference.len() as f64;
    let precision = lcs / candidate.len() as f64;
    if recall + precision == 0.0 {
        return Ok(0.0);
    }
    let b2 = ROUGE_L_BETA * ROUGE_L_BETA;
    Ok((1.0 + b2) * recall * precision / (recall + b2 * precision))
}

/// Corpus-level BLEU up to `max_n`, with brevity penalty.
///
/// Modified n-gram precisions are pooled over the corpus; an order whose
/// pooled match count is zero is smoothed to `(matches+1)/(total+1)`.
pub fn bleu_n<T: AsRef<str>>(
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    max_n: usize,
) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "bleu_n needs matched corpora ({} candidates, {} references)",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() || max_n == 0 {
        return Err(Error::Contract("bleu_n needs records and n >= 1".into()));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, reference) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += reference.len();
        for n in 1..=max_n {
            let ref_counts = ngram_counts(reference, n);
            let cand_counts = ngram_counts(cand, n);
            matches[n - 1] += cand_counts
                .iter()
                .map(|(gram, &cc)| cc.min(ref_counts.get(gram).copied().unwrap_or(0)))
                .sum::<usize>();
            totals[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let (m, t) = (matches[n], totals[n]);
        let p = if t == 0 {
            return Ok(0.0);
        } else if m == 0 {
            (m as f64 + 1.0) / (t as f64 + 1.0)
        } else {
            m as f64 / t as f64
        };
        log_sum += p.ln();
    }
    let geo = (log_sum / max_n as f64).exp();
    let bp = if cand_len > ref_len || cand_len == 0 {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * geo)
}

/// Fleiss' kappa over a ratings table: `ratings[item][rater] = category`.
///
/// Returns [`Error::DegenerateAgreement`] when every rating across every
/// item falls in one category (expected agreement is 1 and the statistic
/// is undefined).
pub fn fleiss_kappa(ratings: &[Vec<usize>], categories: usize) -> Result<f64> {
    if ratings.len() < 2 {
        return Err(Error::Contract("fleiss_kappa needs >= 2 items".into()));
    }
    let raters = ratings[0].len();
    if raters < 2 {
        return Err(Error::Contract("fleiss_kappa needs >= 2 raters".into()));
    }
    if categories < 2 {
        return Err(Error::Contract("fleiss_kappa needs >= 2 categories".into()));
    }
    let n_items = ratings.len() as f64;
    let r = raters as f64;
    let mut cat_totals = vec![0.0f64; categories];
    let mut p_bar = 0.0;
    for row in ratings {
        if row.len() != raters {
            return Err(Error::Contract("ragged ratings table".into()));
        }
        let mut counts = vec![0.0f64; categories];
        for &c in row {
            if c >= categories {
                return Err(Error::Contract(format!(
                    "category {c} out of range 0..{categories}"
                )));
            }
            counts[c] += 1.0;
            cat_totals[c] += 1.0;
        }
        let agree: f64 = counts.iter().map(|c| c * c).sum::<f64>() - r;
        p_bar += agree / (r * (r - 1.0));
    }
    let p_bar = p_bar / n_items;
    let total = n_items * r;
    let p_e: f64 = cat_totals
        .iter()
        .map(|c| (c / total) * (c / total))
        .sum();
    if (1.0 - p_e).abs() < 1e-12 {
        return Err(Error::DegenerateAgreement);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// One row of a machine-readable metric report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub n_examples: usize,
}

/// The Table-1 metric column set computed over a corpus of
/// (candidate, reference) token sequences.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn get(&self, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric).map(|r| r.value)
    }

    pub fn render_table(&self) -> String {
        let mut out = String::from("metric     value      n\n");
        for r in &self.rows {
            out.push_str(&format!("{:<10} {:<10.4} {}\n", r.metric, r.value, r.n_examples));
        }
        out
    }
}

/// ROUGE-1/2/L (macro-averaged) and corpus BLEU-1/2.
pub fn score_corpus(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
) -> Result<MetricReport> {
    if candidates.len() != references.len() || candidates.is_empty() {
        return Err(Error::Contract("score_corpus needs matched non-empty corpora".into()));
    }
    let n = candidates.len();
    let mut r1 = 0.0;
    let mut r2 = 0.0;
    let mut rl = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        r1 += rouge_n(c, r, 1)?;
        r2 += rouge_n(c, r, 2)?;
        rl += if c.is_empty() { 0.0 } else { rouge_l(c, r)? };
    }
    let rows = vec![
        MetricRow { metric: "rouge_1".into(), value: r1 / n as f64, n_examples: n },
        MetricRow { metric: "rouge_2".into(), value: r2 / n as f64, n_examples: n },
        MetricRow { metric: "rouge_l".into(), value: rl / n as f64, n_examples: n },
        MetricRow { metric: "bleu_1".into(), value: bleu_n(candidates, references, 1)?, n_examples: n },
        MetricRow { metric: "bleu_2".into(), value: bleu_n(candidates, references, 2)?, n_examples: n },
    ];
    Ok(MetricReport { rows })
}
