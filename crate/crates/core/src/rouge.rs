//! Exact ROUGE-1/2/L.
//!
//! N-gram matches use multiset clipping; ROUGE-L uses the textbook LCS
//! dynamic program. No stemming or stopword removal is applied.

use std::collections::HashMap;
use std::hash::Hash;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct RougeScore {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

impl RougeScore {
    pub fn from_counts(matched: usize, cand_total: usize, ref_total: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let recall = ratio(matched, ref_total);
        let precision = ratio(matched, cand_total);
        let f1 = if recall + precision == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        RougeScore { recall, precision, f1 }
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn clipped_matches<T: Eq + Hash>(cand: &HashMap<&[T], usize>, reference: &HashMap<&[T], usize>) -> usize {
    cand.iter()
        .map(|(g, &c)| reference.get(g).map_or(0, |&r| c.min(r)))
        .sum()
}

pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Result<RougeScore> {
    if n == 0 {
        return Err(Error::Invalid("n-gram order must be positive".into()));
    }
    if reference.len() < n {
        return Err(Error::ReferenceTooShort {
            needed: n,
            got: reference.len(),
        });
    }
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let matched = clipped_matches(&cand, &refc);
    Ok(RougeScore::from_counts(
        matched,
        candidate.len().saturating_sub(n - 1),
        reference.len() + 1 - n,
    ))
}

/// Length of the longest common subsequence, two-row DP.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> Result<RougeScore> {
    if reference.is_empty() {
        return Err(Error::ReferenceTooShort { needed: 1, got: 0 });
    }
    let lcs = lcs_len(candidate, reference);
    Ok(RougeScore::from_counts(lcs, candidate.len(), reference.len()))
}

/// Mean of ROUGE-1, ROUGE-2 and ROUGE-L recall; used to match a summary
/// sentence against document sentences. ROUGE-2 recall counts as zero when
/// the reference has a single token.
pub fn match_score<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> Result<f64> {
    let r1 = rouge_n(candidate, reference, 1)?.recall;
    let r2 = if reference.len() < 2 {
        0.0
    } else {
        rouge_n(candidate, reference, 2)?.recall
    };
    let rl = rouge_l(candidate, reference)?.recall;
    Ok((r1 + r2 + rl) / 3.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct SummaryRouge {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
}

/// Summary-level scores over sentence lists. Sentence boundaries act as an
/// unscored separator: n-grams never span two sentences and the LCS runs over
/// the concatenated tokens only.
pub fn rouge_summary<T: Eq + Hash, S: AsRef<[T]>>(candidate: &[S], reference: &[S]) -> Result<SummaryRouge> {
    let ref_tokens: usize = reference.iter().map(|s| s.as_ref().len()).sum();
    if ref_tokens == 0 {
        return Err(Error::ReferenceTooShort { needed: 1, got: 0 });
    }
    let ngram = |n: usize| {
        let mut cand = HashMap::new();
        let mut refc = HashMap::new();
        let (mut ct, mut rt) = (0, 0);
        for s in candidate {
            for (g, c) in ngram_counts(s.as_ref(), n) {
                *cand.entry(g).or_insert(0) += c;
                ct += c;
            }
        }
        for s in reference {
            for (g, c) in ngram_counts(s.as_ref(), n) {
                *refc.entry(g).or_insert(0) += c;
                rt += c;
            }
        }
        RougeScore::from_counts(clipped_matches(&cand, &refc), ct, rt)
    };
    let flat_c: Vec<&T> = candidate.iter().flat_map(|s| s.as_ref()).collect();
    let flat_r: Vec<&T> = reference.iter().flat_map(|s| s.as_ref()).collect();
    Ok(SummaryRouge {
        rouge1: ngram(1),
        rouge2: ngram(2),
        rouge_l: RougeScore::from_counts(lcs_len(&flat_c, &flat_r), flat_c.len(), flat_r.len()),
    })
}
