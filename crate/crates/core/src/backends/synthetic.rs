//! Synthetic "audio" fixtures: a JSON word timeline standing in for a
//! recording. Mock VAD derives frame probabilities from it and mock ASR
//! reads back the words inside a requested span.

use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWord {
    pub start: f64,
    pub end: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticAudio {
    pub duration_s: f64,
    pub frame_rate_hz: f64,
    pub words: Vec<SyntheticWord>,
}

const WORD_S: f64 = 0.3;
const WORD_GAP_S: f64 = 0.1;
const PAUSE_S: f64 = 0.6;
const EDGE_S: f64 = 0.5;

fn sentence_final(word: &str) -> bool {
    word.trim_end_matches(['"', '\'', ')', '”', '’'])
        .ends_with(['.', '!', '?'])
}

impl SyntheticAudio {
    pub fn load(path: &Path) -> Result<Self, String> {
        let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_slice(&bytes).map_err(|e| format!("{}: not a synthetic audio fixture: {e}", path.display()))
    }

    /// Lays `text` out at a fixed speaking rate: short gaps between words,
    /// longer pauses after sentence-final punctuation.
    pub fn from_text(text: &str, frame_rate_hz: f64) -> Self {
        let mut t = EDGE_S;
        let mut words = Vec::new();
        let tokens: Vec<&str> = text.split_whitespace().collect();
        for (i, token) in tokens.iter().enumerate() {
            let start = round3(t);
            let end = round3(t + WORD_S);
            words.push(SyntheticWord {
                start,
                end,
                text: token.to_string(),
            });
            t = end;
            if i + 1 < tokens.len() {
                t += if sentence_final(token) { PAUSE_S } else { WORD_GAP_S };
            }
        }
        Self {
            duration_s: round3(t + EDGE_S),
            frame_rate_hz,
            words,
        }
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self).expect("fixture serializes"))
    }

    /// Speech probabilities: high inside words, mid-level in short gaps (a
    /// split candidate that keeps the run open), near zero in pauses.
    pub fn speech_probs(&self) -> Vec<f64> {
        let n = (self.duration_s * self.frame_rate_hz).ceil() as usize;
        let mut probs = vec![0.05; n];
        let frame = |t: f64| ((t * self.frame_rate_hz).round() as usize).min(n);
        for (i, w) in self.words.iter().enumerate() {
            for p in &mut probs[frame(w.start)..frame(w.end)] {
                *p = 0.9;
            }
            if let Some(next) = self.words.get(i + 1) {
                if next.start - w.end <= WORD_GAP_S + 1e-9 {
                    // vary the dip so split points are not all ties
                    let dip = 0.45 + 0.01 * (w.text.len() % 10) as f64;
                    for p in &mut probs[frame(w.end)..frame(next.start)] {
                        *p = dip;
                    }
                }
            }
        }
        probs
    }

    /// Words whose midpoint falls in `[start_s, end_s)`.
    pub fn words_in(&self, start_s: f64, end_s: f64) -> Vec<&str> {
        self.words
            .iter()
            .filter(|w| {
                let mid = (w.start + w.end) / 2.0;
                mid >= start_s && mid < end_s
            })
            .map(|w| w.text.as_str())
            .collect()
    }

    pub fn text(&self) -> String {
        self.words.iter().map(|w| w.text.as_str()).collect::<Vec<_>>().join(" ")
    }
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}
