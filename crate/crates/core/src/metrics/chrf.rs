use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::MetricError;

/// Clipped match statistics for one n-gram order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NgramCounts {
    pub matches: usize,
    pub hyp_total: usize,
    pub ref_total: usize,
}

/// Additive chrF sufficient statistics; sum them to score a corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChrfStats {
    pub orders: Vec<NgramCounts>,
}

impl ChrfStats {
    pub fn add(&mut self, other: &ChrfStats) {
        if self.orders.len() < other.orders.len() {
            self.orders.resize(other.orders.len(), NgramCounts::default());
        }
        for (acc, o) in self.orders.iter_mut().zip(&other.orders) {
            acc.matches += o.matches;
            acc.hyp_total += o.hyp_total;
            acc.ref_total += o.ref_total;
        }
    }

    /// Averaged precision and recall over the orders with a nonzero denominator.
    pub fn precision_recall(&self) -> (f64, f64) {
        let mean = |pairs: Vec<f64>| {
            if pairs.is_empty() {
                0.0
            } else {
                pairs.iter().sum::<f64>() / pairs.len() as f64
            }
        };
        let precision = mean(
            self.orders
                .iter()
                .filter(|o| o.hyp_total > 0)
                .map(|o| o.matches as f64 / o.hyp_total as f64)
                .collect(),
        );
        let recall = mean(
            self.orders
                .iter()
                .filter(|o| o.ref_total > 0)
                .map(|o| o.matches as f64 / o.ref_total as f64)
                .collect(),
        );
        (precision, recall)
    }

    /// F-beta on a 0..=100 scale.
    pub fn score(&self, beta: f64) -> f64 {
        let (p, r) = self.precision_recall();
        if p + r == 0.0 {
            return 0.0;
        }
        let b2 = beta * beta;
        100.0 * (1.0 + b2) * p * r / (b2 * p + r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChrfScore {
    pub score: f64,
    pub max_order: usize,
    pub beta: f64,
    /// Set when both inputs were empty and the score was defined as 0.
    pub empty_inputs: bool,
}

fn ngram_counts(chars: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut counts = HashMap::new();
    if chars.len() >= n {
        for gram in chars.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Character n-gram statistics with whitespace removed from both sides.
pub fn chrf_stats(reference: &str, hypothesis: &str, max_order: usize) -> ChrfStats {
    let reference: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    let hypothesis: Vec<char> = hypothesis.chars().filter(|c| !c.is_whitespace()).collect();
    let orders = (1..=max_order)
        .map(|n| {
            let ref_counts = ngram_counts(&reference, n);
            let hyp_counts = ngram_counts(&hypothesis, n);
            let matches = hyp_counts
                .iter()
                .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
                .sum();
            NgramCounts {
                matches,
                hyp_total: hyp_counts.values().sum(),
                ref_total: ref_counts.values().sum(),
            }
        })
        .collect();
    ChrfStats { orders }
}

/// Sentence-level chrF (character n-grams only, no word n-grams).
pub fn chrf(reference: &str, hypothesis: &str, max_order: usize, beta: f64) -> Result<ChrfScore, MetricError> {
    if max_order == 0 {
        return Err(MetricError::InvalidParams("max_order must be at least 1".into()));
    }
    if !(beta > 0.0) {
        return Err(MetricError::InvalidParams(format!("beta must be positive, got {beta}")));
    }
    let empty_inputs = reference.trim().is_empty() && hypothesis.trim().is_empty();
    if empty_inputs {
        log::warn!("chrF of two empty strings defined as 0");
    }
    let stats = chrf_stats(reference, hypothesis, max_order);
    Ok(ChrfScore {
        score: stats.score(beta),
        max_order,
        beta,
        empty_inputs,
    })
}
