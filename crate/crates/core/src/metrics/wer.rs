use serde::{Deserialize, Serialize};

use super::MetricError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationProfile {
    /// Lowercase, drop punctuation, collapse whitespace.
    #[default]
    JiwerLike,
    /// Whitespace split only.
    Verbatim,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
    pub wer: f64,
}

impl WerBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

const TYPOGRAPHIC_PUNCTUATION: &[char] = &[
    '‘', '’', '‚', '‛', '“', '”', '„', '‟', '«', '»', '‹', '›', '–', '—', '―', '‐', '‑', '‒', '…',
];

fn is_wer_punctuation(c: char) -> bool {
    c.is_ascii_punctuation() || TYPOGRAPHIC_PUNCTUATION.contains(&c)
}

pub fn normalize_for_wer(text: &str, profile: NormalizationProfile) -> Vec<String> {
    match profile {
        NormalizationProfile::Verbatim => text.split_whitespace().map(str::to_string).collect(),
        NormalizationProfile::JiwerLike => {
            let cleaned: String = text
                .to_lowercase()
                .chars()
                .filter(|&c| !is_wer_punctuation(c))
                .collect();
            cleaned.split_whitespace().map(str::to_string).collect()
        }
    }
}

/// Minimum-cost word alignment counts `(S, D, I)` with unit costs. Among
/// equal-cost alignments the one with the most substitutions wins.
pub fn align_counts<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> (usize, usize, usize) {
    #[derive(Clone, Copy)]
    struct Cell {
        cost: usize,
        subs: usize,
        dels: usize,
        ins: usize,
    }
    impl Cell {
        fn better_than(&self, other: &Cell) -> bool {
            (self.cost, std::cmp::Reverse(self.subs)) < (other.cost, std::cmp::Reverse(other.subs))
        }
    }

    let m = hypothesis.len();
    let mut prev: Vec<Cell> = (0..=m)
        .map(|j| Cell {
            cost: j,
            subs: 0,
            dels: 0,
            ins: j,
        })
        .collect();
    let mut cur = prev.clone();
    for (i, r) in reference.iter().enumerate() {
        cur[0] = Cell {
            cost: i + 1,
            subs: 0,
            dels: i + 1,
            ins: 0,
        };
        for (j, h) in hypothesis.iter().enumerate() {
            let diag = prev[j];
            let mut best = if r == h {
                diag
            } else {
                Cell {
                    cost: diag.cost + 1,
                    subs: diag.subs + 1,
                    ..diag
                }
            };
            let up = prev[j + 1];
            let del = Cell {
                cost: up.cost + 1,
                dels: up.dels + 1,
                ..up
            };
            if del.better_than(&best) {
                best = del;
            }
            let left = cur[j];
            let ins = Cell {
                cost: left.cost + 1,
                ins: left.ins + 1,
                ..left
            };
            if ins.better_than(&best) {
                best = ins;
            }
            cur[j + 1] = best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let last = prev[m];
    (last.subs, last.dels, last.ins)
}

pub fn wer(reference: &str, hypothesis: &str, profile: NormalizationProfile) -> Result<WerBreakdown, MetricError> {
    let reference = normalize_for_wer(reference, profile);
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    let hypothesis = normalize_for_wer(hypothesis, profile);
    let (substitutions, deletions, insertions) = align_counts(&reference, &hypothesis);
    Ok(WerBreakdown {
        substitutions,
        deletions,
        insertions,
        ref_words: reference.len(),
        wer: (substitutions + deletions + insertions) as f64 / reference.len() as f64,
    })
}
