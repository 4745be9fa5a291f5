//! Dataset construction: QE-ranked filtering, APE triplet synthesis, QA
//! balancing, and augmentation prompts.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand_pcg::rand_core::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backends::{Backend, Translation};
use crate::document::{assemble_talk, split_sentences};

/// Generator behind every seeded operation in this module.
pub const SAMPLER: &str = "pcg64";

pub const NA_MARKER: &str = "N/A";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CurationError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("missing argument for placeholder {0}")]
    MissingArg(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub source: String,
    pub target: String,
    pub qe_score: f64,
    pub origin: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApeTriplet {
    pub source: String,
    pub hypothesis: String,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaExample {
    pub segment_id: String,
    pub question: String,
    pub answer: String,
    pub answerable: bool,
    pub lang: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TtsJob {
    pub abstract_id: String,
    pub sentence_index: usize,
    pub text: String,
}

/// Scores `(source, target, origin)` pairs with a QE backend, in parallel.
/// Pairs whose scoring fails are dropped with a warning.
pub fn score_pairs(pairs: &[(String, String, String)], qe: &Backend) -> Vec<ScoredPair> {
    pairs
        .par_iter()
        .map(|(source, target, origin)| match qe.estimate_quality(source, target) {
            Ok(qe_score) => Some(ScoredPair {
                source: source.clone(),
                target: target.clone(),
                qe_score,
                origin: origin.clone(),
            }),
            Err(e) => {
                log::warn!("quality estimation failed, pair dropped: {e}");
                None
            }
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

struct Ranked {
    pair: ScoredPair,
    position: usize,
}

impl Ranked {
    /// `Less` means `self` ranks ahead of `other`.
    fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .pair
            .qe_score
            .total_cmp(&self.pair.qe_score)
            .then_with(|| self.pair.origin.cmp(&other.pair.origin))
            .then_with(|| self.position.cmp(&other.position))
    }
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.rank_cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

// Max-heap order puts the worst-ranked entry on top.
impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank_cmp(other)
    }
}

/// The `k` best pairs by descending score; ties go to the smaller
/// `(origin, position)`. Holds at most `k` pairs at a time. NaN scores are
/// skipped.
pub fn filter_top_k(pairs: impl IntoIterator<Item = ScoredPair>, k: usize) -> Result<Vec<ScoredPair>, CurationError> {
    if k == 0 {
        return Err(CurationError::InvalidParams("k must be at least 1".into()));
    }
    let mut heap: BinaryHeap<Ranked> = BinaryHeap::with_capacity(k + 1);
    let mut seen = 0;
    for (position, pair) in pairs.into_iter().enumerate() {
        if pair.qe_score.is_nan() {
            log::warn!("pair {position} has a NaN quality score and is skipped");
            continue;
        }
        seen += 1;
        let entry = Ranked { pair, position };
        if heap.len() < k {
            heap.push(entry);
        } else if heap.peek().is_some_and(|worst| entry < *worst) {
            heap.pop();
            heap.push(entry);
        }
    }
    if seen < k {
        log::warn!("only {seen} scored pairs available for top-{k}");
    }
    Ok(heap.into_sorted_vec().into_iter().map(|r| r.pair).collect())
}

fn uniform_below(rng: &mut Pcg64, bound: usize) -> usize {
    let bound = bound as u64;
    let zone = u64::MAX - (u64::MAX % bound);
    loop {
        let x = rng.next_u64();
        if x < zone {
            return (x % bound) as usize;
        }
    }
}

/// `k` distinct indices below `n` in sampled order (partial Fisher-Yates).
pub fn sample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = Pcg64::seed_from_u64(seed);
    sample_with(&mut rng, n, k)
}

fn sample_with(rng: &mut Pcg64, n: usize, k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    let k = k.min(n);
    for i in 0..k {
        let j = i + uniform_below(rng, n - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

fn shuffle<T>(rng: &mut Pcg64, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = uniform_below(rng, i + 1);
        items.swap(i, j);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApeSample {
    pub triplets: Vec<ApeTriplet>,
    pub sampled_indices: Vec<usize>,
    /// Sampled pairs whose translation failed.
    pub shortfall: usize,
}

/// Samples `sample_n` pairs without replacement and machine-translates their
/// sources; the reference is the pair's target.
pub fn make_ape_triplets(
    pairs: &[ScoredPair],
    sample_n: usize,
    mt: &dyn Translation,
    src_lang: &str,
    tgt_lang: &str,
    seed: u64,
) -> Result<ApeSample, CurationError> {
    if sample_n > pairs.len() {
        return Err(CurationError::InvalidParams(format!(
            "cannot sample {sample_n} of {} pairs",
            pairs.len()
        )));
    }
    let sampled_indices = sample_indices(pairs.len(), sample_n, seed);
    let results: Vec<Option<ApeTriplet>> = sampled_indices
        .par_iter()
        .map(|&i| {
            let pair = &pairs[i];
            match mt.translate(&pair.source, src_lang, tgt_lang) {
                Ok(hypothesis) if !hypothesis.trim().is_empty() => Some(ApeTriplet {
                    source: pair.source.clone(),
                    hypothesis,
                    reference: pair.target.clone(),
                }),
                Ok(_) => {
                    log::warn!("empty translation for pair {i}, skipped");
                    None
                }
                Err(e) => {
                    log::warn!("translation of pair {i} failed, skipped: {e}");
                    None
                }
            }
        })
        .collect();
    let shortfall = results.iter().filter(|r| r.is_none()).count();
    if shortfall > 0 {
        log::warn!("{shortfall} of {sample_n} sampled pairs produced no triplet");
    }
    Ok(ApeSample {
        triplets: results.into_iter().flatten().collect(),
        sampled_indices,
        shortfall,
    })
}

/// Unanswerable count giving `fraction` of the total, rounded half up.
pub fn unanswerable_quota(answerable: usize, fraction: f64) -> usize {
    (fraction * answerable as f64 / (1.0 - fraction) + 0.5).floor() as usize
}

/// Keeps every answerable example plus a seeded sample of unanswerable ones
/// sized to `target_fraction`, then shuffles with the same seed.
pub fn balance_unanswerable(
    examples: &[QaExample],
    target_fraction: f64,
    seed: u64,
) -> Result<Vec<QaExample>, CurationError> {
    if !(target_fraction > 0.0 && target_fraction < 1.0) {
        return Err(CurationError::InvalidParams(format!(
            "target fraction must lie in (0, 1), got {target_fraction}"
        )));
    }
    let answerable = examples.iter().filter(|e| e.answerable).count();
    if answerable == 0 {
        return Err(CurationError::InvalidParams("no answerable examples".into()));
    }
    let unanswerable: Vec<usize> = (0..examples.len()).filter(|&i| !examples[i].answerable).collect();
    let quota = unanswerable_quota(answerable, target_fraction);
    if quota > unanswerable.len() {
        log::warn!(
            "need {quota} unanswerable examples for {target_fraction}, only {} available; keeping all",
            unanswerable.len()
        );
    }
    let mut rng = Pcg64::seed_from_u64(seed);
    let mut keep = vec![false; examples.len()];
    for i in sample_with(&mut rng, unanswerable.len(), quota) {
        keep[unanswerable[i]] = true;
    }
    let mut out: Vec<QaExample> = examples
        .iter()
        .zip(&keep)
        .filter(|(e, &k)| e.answerable || k)
        .map(|(e, _)| e.clone())
        .collect();
    shuffle(&mut rng, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationKind {
    Sqa,
    SsumTranslate,
    StTranslate,
}

const SQA_SYSTEM: &str = "You are a professional question generator. Given a transcript, you will create three questions: \n\
two that can be answered based on the transcript and one that cannot be answered (but is relevant to the topic). \n\
The answers should be full sentences in the target language specified. \n\
Your response must be in valid JSON format, with keys for 'questions' and 'answers'. \n\
Do not include any explanations or additional text.\n";

const SSUM_SYSTEM: &str = "A chat between a curious user and a professional system for translating ACL abstracts.\n";

const ST_SYSTEM: &str = "You are a professional translator. Your task is to provide accurate, fluent, and natural translations without adding explanations, comments, or extra content.";

fn sqa_user(transcript: &str, lang: &str) -> String {
    [
        transcript.to_string(),
        "Based on the transcript, generate a JSON dictionary with the following structure.".to_string(),
        format!("The questions and answers must be in {lang}:"),
        "{".to_string(),
        "  \"questions\": [".to_string(),
        format!("    {{\"q1\": \"First question in {lang}\", \"a1\": \"Full-sentence answer in {lang}\"}},"),
        format!("    {{\"q2\": \"Second question in {lang}\", \"a2\": \"Full-sentence answer in {lang}\"}},"),
        format!("    {{\"q3\": \"Third question in {lang}\", \"a3\": \"{NA_MARKER}\"}}"),
        "  ]".to_string(),
        "}".to_string(),
        "Ensure the response is a valid JSON object with properly formatted keys and values.".to_string(),
    ]
    .join("\n")
}

/// Renders `(system, user)` prompts. Arguments: `transcript`, `abstract`, or
/// `text` depending on the kind, plus `lang`, the target-language name.
pub fn build_augmentation_prompt(
    kind: AugmentationKind,
    args: &BTreeMap<String, String>,
) -> Result<(String, String), CurationError> {
    let arg = |key: &str, placeholder: &'static str| {
        args.get(key)
            .filter(|v| !v.trim().is_empty())
            .map(String::as_str)
            .ok_or(CurationError::MissingArg(placeholder))
    };
    match kind {
        AugmentationKind::Sqa => {
            let transcript = arg("transcript", "<Transcript>")?;
            let lang = arg("lang", "<trg lang>")?;
            Ok((SQA_SYSTEM.to_string(), sqa_user(transcript, lang)))
        }
        AugmentationKind::SsumTranslate => {
            let text = arg("abstract", "<abstract>")?;
            let lang = arg("lang", "<trg lang>")?;
            Ok((
                SSUM_SYSTEM.to_string(),
                format!("{text}\nTranslate this abstract to {lang}. Do not provide any explanation or additional text."),
            ))
        }
        AugmentationKind::StTranslate => {
            let text = arg("text", "<text>")?;
            let lang = arg("lang", "<trg lang>")?;
            Ok((
                ST_SYSTEM.to_string(),
                format!("Translate the following English text into {lang}. Do not provide any explanation or additional text.\n{text}"),
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SqaParseError {
    #[error("response is not JSON: {0}")]
    NotJson(String),
    #[error("response lacks keys: {}", .missing.join(", "))]
    Schema { missing: Vec<String> },
}

/// Parses a generated QA payload. Text around the outermost braces is
/// ignored; an answer equal to `N/A` marks the question unanswerable.
pub fn parse_sqa_json(raw: &str, segment_id: &str, lang: &str) -> Result<Vec<QaExample>, SqaParseError> {
    let body = match (raw.find('{'), raw.rfind('}')) {
        (Some(start), Some(end)) if start < end => &raw[start..=end],
        _ => return Err(SqaParseError::NotJson("no JSON object found".into())),
    };
    let value: Value = serde_json::from_str(body).map_err(|e| SqaParseError::NotJson(e.to_string()))?;
    let Some(entries) = value.get("questions").and_then(Value::as_array) else {
        return Err(SqaParseError::Schema {
            missing: vec!["questions".into()],
        });
    };
    let lookup = |key: &str| -> Option<String> {
        entries
            .iter()
            .find_map(|e| e.get(key))
            .and_then(Value::as_str)
            .map(|s| s.trim().to_string())
    };

    let count = entries.len().max(3);
    let mut missing = Vec::new();
    let mut out = Vec::new();
    for n in 1..=count {
        let (qk, ak) = (format!("q{n}"), format!("a{n}"));
        match (lookup(&qk), lookup(&ak)) {
            (Some(question), Some(answer)) => out.push(QaExample {
                segment_id: segment_id.to_string(),
                answerable: answer != NA_MARKER,
                question,
                answer,
                lang: lang.to_string(),
            }),
            (q, a) => {
                if q.is_none() {
                    missing.push(qk);
                }
                if a.is_none() {
                    missing.push(ak);
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(SqaParseError::Schema { missing });
    }
    Ok(out)
}

/// Inverse of [`parse_sqa_json`] for one segment's examples.
pub fn render_sqa_json(examples: &[QaExample]) -> String {
    let entries: Vec<Value> = examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let mut obj = serde_json::Map::new();
            obj.insert(format!("q{}", i + 1), Value::String(e.question.clone()));
            let answer = if e.answerable { e.answer.clone() } else { NA_MARKER.to_string() };
            obj.insert(format!("a{}", i + 1), Value::String(answer));
            Value::Object(obj)
        })
        .collect();
    serde_json::to_string_pretty(&serde_json::json!({ "questions": entries })).expect("JSON renders")
}

/// One TTS job per sentence, grouped by abstract in input order.
pub fn abstracts_to_tts_manifest(abstracts: &[(String, String)]) -> Vec<TtsJob> {
    let mut jobs = Vec::new();
    for (id, text) in abstracts {
        let doc = assemble_talk(id, &[(0, text.clone())]).expect("single chunk");
        for record in split_sentences(&doc, "en") {
            jobs.push(TtsJob {
                abstract_id: id.clone(),
                sentence_index: record.index,
                text: record.source,
            });
        }
    }
    jobs
}
