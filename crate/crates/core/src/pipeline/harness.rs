use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::offline::{asr_stage, segment_stage, segment_variant, vad_stage};
use super::{fmt_seconds, PipelineConfig, PipelineError, RunOptions, RunReport, Runner, TalkLog};
use crate::backends::{BackendKind, BackendSet};
use crate::corpus::{ArtifactKey, ArtifactStore, PutOptions, RunManifest, Stage};
use crate::metrics::{chrf_stats, wer, Better, ChrfStats, NormalizationProfile, ScoreColumn, ScoreRow, ScoreTable};
use crate::segmentation::ChunkPolicy;

const CHRF_ORDER: usize = 6;
const CHRF_BETA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMetric {
    Wer,
    Chrf2,
}

impl EvalMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMetric::Wer => "wer",
            EvalMetric::Chrf2 => "chrf2",
        }
    }

    pub fn better(self) -> Better {
        match self {
            EvalMetric::Wer => Better::Lower,
            EvalMetric::Chrf2 => Better::Higher,
        }
    }
}

impl std::str::FromStr for EvalMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "wer" => Ok(EvalMetric::Wer),
            "chrf" | "chrf2" => Ok(EvalMetric::Chrf2),
            other => Err(format!("unknown metric `{other}` (expected wer or chrf2)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub talk_id: String,
    #[serde(default)]
    pub lang: Option<String>,
    pub text: String,
}

/// References keyed by talk, optionally per language.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct References {
    by_key: BTreeMap<(String, Option<String>), String>,
}

impl References {
    pub fn new(refs: impl IntoIterator<Item = Reference>) -> Self {
        Self {
            by_key: refs.into_iter().map(|r| ((r.talk_id, r.lang), r.text)).collect(),
        }
    }

    /// The reference for `lang`, else the talk's language-less reference.
    pub fn get(&self, talk_id: &str, lang: &str) -> Option<&str> {
        self.by_key
            .get(&(talk_id.to_string(), Some(lang.to_string())))
            .or_else(|| self.by_key.get(&(talk_id.to_string(), None)))
            .map(String::as_str)
    }

    pub fn has_talk(&self, talk_id: &str) -> bool {
        self.by_key.keys().any(|(t, _)| t == talk_id)
    }

    pub fn is_empty(&self) -> bool {
        self.by_key.is_empty()
    }
}

/// Reads JSONL lines `{"talk_id", "text"}` with an optional `"lang"`.
pub fn load_references(path: &Path) -> Result<References, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::Invalid(format!("{}: {e}", path.display())))?;
    let refs: Vec<Reference> = crate::corpus::from_jsonl(&bytes)
        .map_err(|e| PipelineError::Invalid(format!("{}: {e}", path.display())))?;
    Ok(References::new(refs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    /// Rows are chunk sizes, columns talks.
    pub table: ScoreTable,
    /// Talks without a reference.
    pub excluded: Vec<String>,
}

/// Scores the first ASR system's transcript at every chunk size.
/// Voice activity, segmentation and transcripts go through the artifact
/// cache, so repeating a grid only computes new sizes.
pub fn grid_search_chunks(
    manifest: &RunManifest,
    config: &PipelineConfig,
    backends: &BackendSet,
    store: &ArtifactStore,
    refs: &References,
    sizes: &[f64],
    metric: EvalMetric,
    options: RunOptions,
) -> Result<GridResult, PipelineError> {
    if sizes.is_empty() || sizes.iter().any(|s| !(*s > 0.0)) {
        return Err(PipelineError::Invalid("chunk sizes must be positive".into()));
    }
    let (talks, excluded): (Vec<_>, Vec<_>) = manifest.talks.iter().partition(|t| refs.has_talk(&t.talk_id));
    let excluded: Vec<String> = excluded.into_iter().map(|t| t.talk_id.clone()).collect();
    for id in &excluded {
        log::warn!("talk {id} has no reference; left out of the grid");
    }
    if talks.is_empty() {
        return Err(PipelineError::NoReferences(excluded));
    }
    let runner = Runner::new(manifest, config, backends, store, options)?;
    let vad = runner.backend(&config.vad_backend, BackendKind::Vad)?;
    let (system_id, speech) = runner.asr_systems()?[0];
    let policy = ChunkPolicy::Offline25;

    let columns: Vec<Vec<Option<f64>>> = talks
        .par_iter()
        .map(|talk| {
            let mut log = TalkLog::new(&talk.talk_id);
            let reference = refs.get(&talk.talk_id, &talk.source_lang).expect("partitioned on refs");
            let Some(track) = vad_stage(&runner, &mut log, talk, vad) else {
                return vec![None; sizes.len()];
            };
            sizes
                .iter()
                .map(|&size| {
                    let plan = segment_stage(&runner, &mut log, &track, policy, size)?;
                    let variant = format!("{system_id}.{}", segment_variant(policy, size));
                    let chunks = asr_stage(&runner, &mut log, talk, &plan, &variant, speech, &talk.source_lang)?;
                    let hypothesis = chunks
                        .iter()
                        .filter_map(|c| c.text.as_deref().map(str::trim))
                        .filter(|t| !t.is_empty())
                        .collect::<Vec<_>>()
                        .join(" ");
                    score_one(metric, reference, &hypothesis)
                })
                .collect()
        })
        .collect();

    let table = ScoreTable {
        label_header: "Chunk Size".into(),
        columns: talks
            .iter()
            .map(|t| ScoreColumn {
                name: t.talk_id.clone(),
                better: metric.better(),
            })
            .collect(),
        rows: sizes
            .iter()
            .enumerate()
            .map(|(i, size)| ScoreRow {
                label: fmt_seconds(*size),
                values: columns.iter().map(|c| c[i]).collect(),
            })
            .collect(),
    };
    Ok(GridResult { table, excluded })
}

/// WER in percent or chrF2; `None` when the reference is empty.
fn score_one(metric: EvalMetric, reference: &str, hypothesis: &str) -> Option<f64> {
    match metric {
        EvalMetric::Wer => wer(reference, hypothesis, NormalizationProfile::JiwerLike)
            .ok()
            .map(|w| w.wer * 100.0),
        EvalMetric::Chrf2 => Some(chrf_stats(reference, hypothesis, CHRF_ORDER).score(CHRF_BETA)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TalkScores {
    pub talk_id: String,
    pub lang: String,
    /// Fraction of reference words in error.
    pub wer: Option<f64>,
    pub chrf2: Option<f64>,
    pub ref_words: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusScores {
    pub lang: String,
    /// Total edits over total reference words.
    pub wer: Option<f64>,
    /// chrF2 from n-gram counts summed over talks.
    pub chrf2: Option<f64>,
    pub talks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub run_id: String,
    pub talks: Vec<TalkScores>,
    pub corpus: Vec<CorpusScores>,
    /// Outputs without a reference, as `talk/lang`.
    pub excluded: Vec<String>,
}

/// Scores every text output of a run against references and stores the
/// result as the run's `scores` artifact.
pub fn evaluate_run(
    report: &RunReport,
    store: &ArtifactStore,
    refs: &References,
    metrics: &[EvalMetric],
) -> Result<Scores, PipelineError> {
    let want = |m| metrics.contains(&m);
    let mut talks = Vec::new();
    let mut excluded = Vec::new();
    struct Acc {
        edits: usize,
        ref_words: usize,
        chrf: ChrfStats,
        talks: usize,
    }
    let mut corpus: BTreeMap<String, Acc> = BTreeMap::new();
    for output in &report.outputs {
        if output.artifact_key.stage == Stage::Qa {
            continue;
        }
        let Some(reference) = refs.get(&output.talk_id, &output.lang) else {
            log::warn!("no reference for {}/{}; not scored", output.talk_id, output.lang);
            excluded.push(format!("{}/{}", output.talk_id, output.lang));
            continue;
        };
        let bytes = store.get_artifact(&output.artifact_key)?;
        let hypothesis = String::from_utf8_lossy(&bytes).split_whitespace().collect::<Vec<_>>().join(" ");
        let acc = corpus.entry(output.lang.clone()).or_insert_with(|| Acc {
            edits: 0,
            ref_words: 0,
            chrf: ChrfStats::default(),
            talks: 0,
        });
        acc.talks += 1;
        let mut scores = TalkScores {
            talk_id: output.talk_id.clone(),
            lang: output.lang.clone(),
            wer: None,
            chrf2: None,
            ref_words: 0,
        };
        if want(EvalMetric::Wer) {
            if let Ok(w) = wer(reference, &hypothesis, NormalizationProfile::JiwerLike) {
                acc.edits += w.errors();
                acc.ref_words += w.ref_words;
                scores.ref_words = w.ref_words;
                scores.wer = Some(w.wer);
            }
        }
        if want(EvalMetric::Chrf2) {
            let stats = chrf_stats(reference, &hypothesis, CHRF_ORDER);
            scores.chrf2 = Some(stats.score(CHRF_BETA));
            acc.chrf.add(&stats);
        }
        talks.push(scores);
    }
    if talks.is_empty() {
        return Err(PipelineError::NoReferences(excluded));
    }
    let corpus = corpus
        .into_iter()
        .map(|(lang, acc)| CorpusScores {
            lang,
            wer: (want(EvalMetric::Wer) && acc.ref_words > 0).then(|| acc.edits as f64 / acc.ref_words as f64),
            chrf2: want(EvalMetric::Chrf2).then(|| acc.chrf.score(CHRF_BETA)),
            talks: acc.talks,
        })
        .collect();
    let scores = Scores {
        run_id: report.run_id.clone(),
        talks,
        corpus,
        excluded,
    };
    let key = ArtifactKey::new(report.run_id.clone(), Stage::Scores, "corpus", "eval");
    store.put_artifact_with(&key, &super::json(&scores), PutOptions { force: true, ..Default::default() })?;
    Ok(scores)
}

/// Renders evaluation scores as a table with one row per talk and language
/// plus corpus rows.
pub fn scores_table(scores: &Scores, metrics: &[EvalMetric]) -> ScoreTable {
    let columns = metrics
        .iter()
        .map(|m| ScoreColumn {
            name: match m {
                EvalMetric::Wer => "WER".into(),
                EvalMetric::Chrf2 => "chrF2".into(),
            },
            better: m.better(),
        })
        .collect();
    let value = |m: &EvalMetric, wer: Option<f64>, chrf: Option<f64>| match m {
        EvalMetric::Wer => wer.map(|w| w * 100.0),
        EvalMetric::Chrf2 => chrf,
    };
    let mut rows: Vec<ScoreRow> = scores
        .talks
        .iter()
        .map(|t| ScoreRow {
            label: format!("{}/{}", t.talk_id, t.lang),
            values: metrics.iter().map(|m| value(m, t.wer, t.chrf2)).collect(),
        })
        .collect();
    rows.extend(scores.corpus.iter().map(|c| ScoreRow {
        label: format!("corpus/{}", c.lang),
        values: metrics.iter().map(|m| value(m, c.wer, c.chrf2)).collect(),
    }));
    ScoreTable {
        label_header: "Talk".into(),
        columns,
        rows,
    }
}
