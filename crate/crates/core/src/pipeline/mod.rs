//! Stage graphs for the offline cascade and the instruction-following
//! track, plus the grid-search and evaluation harness.
//!
//! Every stage output is stored in the [`ArtifactStore`] under the run id.
//! A stage whose artifact already exists with status `ok` is not recomputed,
//! so re-running a command resumes from the cache. Artifacts produced on a
//! fallback path, or derived from one, are stored with status `fallback` and
//! recomputed on the next run.

mod config;
mod harness;
mod if_track;
mod offline;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backends::{Backend, BackendKind, BackendSet};
use crate::corpus::{ArtifactKey, ArtifactStatus, ArtifactStore, PutOptions, RunManifest, Stage, StoreError};

pub use config::{ChunkSizes, ConfigError, ContextSizes, PipelineConfig, ENV_PREFIX};
pub use harness::{
    evaluate_run, grid_search_chunks, load_references, scores_table, CorpusScores, EvalMetric, GridResult, Reference,
    References, Scores, TalkScores,
};
pub use if_track::{run_if, IfTask};
pub use offline::{run_offline, OfflineStop};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("no {0} backend configured")]
    MissingBackend(BackendKind),
    #[error("backend `{0}` is not configured")]
    UnknownBackend(String),
    #[error("nothing to resume: run {0} has no stored artifacts")]
    NothingToResume(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("no talk has a reference; missing: {}", .0.join(", "))]
    NoReferences(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ok,
    Skipped,
    Fallback,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: Stage,
    pub talk_id: String,
    pub status: StageStatus,
    pub artifact_key: Option<ArtifactKey>,
    pub timing_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TalkOutcome {
    pub talk_id: String,
    /// `ok`, `fallback` or `failed`.
    pub status: StageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncated_at_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRef {
    pub talk_id: String,
    pub lang: String,
    pub artifact_key: ArtifactKey,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub ok: usize,
    pub fallback: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub config_hash: String,
    pub mode: String,
    pub stages: Vec<StageResult>,
    /// Talk counts by final status.
    pub summary: Summary,
    pub talks: Vec<TalkOutcome>,
    pub outputs: Vec<OutputRef>,
}

impl RunReport {
    /// 0 when every talk is ok, 2 when some fell back, 1 on any failure.
    pub fn exit_code(&self) -> i32 {
        if self.summary.failed > 0 {
            1
        } else if self.summary.fallback > 0 {
            2
        } else {
            0
        }
    }

    /// The report with timings zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> RunReport {
        let mut r = self.clone();
        for s in &mut r.stages {
            s.timing_ms = 0;
        }
        r
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Counters that legitimately differ between a cold and a cached run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub backend_calls: u64,
    pub cache_hits: u64,
    pub computed: u64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Require that the run already has stored artifacts.
    pub resume: bool,
}

/// Result of computing a stage.
pub(crate) struct Computed {
    pub bytes: Vec<u8>,
    pub fallback: bool,
}

impl Computed {
    pub fn ok(bytes: Vec<u8>) -> Self {
        Self { bytes, fallback: false }
    }

    pub fn with_fallback(bytes: Vec<u8>, fallback: bool) -> Self {
        Self { bytes, fallback }
    }
}

/// Shared state for one run.
pub(crate) struct Runner<'a> {
    pub config: &'a PipelineConfig,
    pub backends: &'a BackendSet,
    pub store: &'a ArtifactStore,
    pub run_id: String,
    hits: AtomicU64,
    computed: AtomicU64,
}

/// Stage results of one talk, plus whether any input so far fell back.
pub(crate) struct TalkLog {
    pub talk_id: String,
    pub stages: Vec<StageResult>,
    pub tainted: bool,
    pub failed: bool,
    pub outputs: Vec<OutputRef>,
    pub truncated_at_s: Option<f64>,
}

impl TalkLog {
    pub fn new(talk_id: &str) -> Self {
        Self {
            talk_id: talk_id.to_string(),
            stages: Vec::new(),
            tainted: false,
            failed: false,
            outputs: Vec::new(),
            truncated_at_s: None,
        }
    }

    pub fn fail(&mut self, stage: Stage, key: Option<ArtifactKey>, reason: &str) {
        log::error!("talk {}: stage {stage} failed: {reason}", self.talk_id);
        self.failed = true;
        self.stages.push(StageResult {
            stage,
            talk_id: self.talk_id.clone(),
            status: StageStatus::Failed,
            artifact_key: key,
            timing_ms: 0,
        });
    }

    pub fn outcome(&self) -> TalkOutcome {
        let status = if self.failed {
            StageStatus::Failed
        } else if self.stages.iter().any(|s| s.status == StageStatus::Fallback) {
            StageStatus::Fallback
        } else {
            StageStatus::Ok
        };
        TalkOutcome {
            talk_id: self.talk_id.clone(),
            status,
            truncated_at_s: self.truncated_at_s,
        }
    }
}

impl<'a> Runner<'a> {
    pub fn new(
        manifest: &RunManifest,
        config: &'a PipelineConfig,
        backends: &'a BackendSet,
        store: &'a ArtifactStore,
        options: RunOptions,
    ) -> Result<Self, PipelineError> {
        let mut manifest = manifest.clone();
        manifest.bind_config(&config.config_hash());
        if options.resume && !store.run_exists(&manifest.run_id) {
            return Err(PipelineError::NothingToResume(manifest.run_id));
        }
        Ok(Self {
            config,
            backends,
            store,
            run_id: manifest.run_id,
            hits: AtomicU64::new(0),
            computed: AtomicU64::new(0),
        })
    }

    pub fn backend(&self, explicit: &Option<String>, kind: BackendKind) -> Result<&'a Arc<Backend>, PipelineError> {
        match explicit {
            Some(id) => self.backends.get(id).ok_or_else(|| PipelineError::UnknownBackend(id.clone())),
            None => self.backends.first_of(kind).ok_or(PipelineError::MissingBackend(kind)),
        }
    }

    pub fn asr_systems(&self) -> Result<Vec<(&'a str, &'a Arc<Backend>)>, PipelineError> {
        self.config
            .asr_system_ids
            .iter()
            .map(|id| {
                self.backends
                    .get(id)
                    .map(|b| (id.as_str(), b))
                    .ok_or_else(|| PipelineError::UnknownBackend(id.clone()))
            })
            .collect()
    }

    pub fn key(&self, stage: Stage, talk_id: &str, variant: &str) -> ArtifactKey {
        ArtifactKey::new(self.run_id.clone(), stage, talk_id, variant)
    }

    /// Returns the stage artifact, from cache when stored with status ok,
    /// otherwise by running `compute` and storing the result. `skipped`
    /// reports the stage as skipped instead of ok. Returns `None` after
    /// logging a failure.
    pub fn stage(
        &self,
        log: &mut TalkLog,
        stage: Stage,
        variant: &str,
        skipped: bool,
        compute: impl FnOnce() -> Result<Computed, String>,
    ) -> Option<Vec<u8>> {
        let key = self.key(stage, &log.talk_id, variant);
        let started = Instant::now();
        let cached = match self.store.read_sidecar(&key) {
            Ok(sidecar) if sidecar.status == ArtifactStatus::Ok => match self.store.get_artifact(&key) {
                Ok(bytes) => Some(bytes),
                Err(e) => {
                    log::warn!("cached artifact {key} unusable, recomputing: {e}");
                    None
                }
            },
            _ => None,
        };
        let (bytes, fallback) = match cached {
            Some(bytes) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                (bytes, false)
            }
            None => {
                let computed = match compute() {
                    Ok(c) => c,
                    Err(reason) => {
                        log.fail(stage, Some(key), &reason);
                        return None;
                    }
                };
                self.computed.fetch_add(1, Ordering::Relaxed);
                let fallback = computed.fallback || log.tainted;
                let opts = PutOptions {
                    force: true,
                    status: if fallback { ArtifactStatus::Fallback } else { ArtifactStatus::Ok },
                };
                if let Err(e) = self.store.put_artifact_with(&key, &computed.bytes, opts) {
                    log.fail(stage, Some(key), &e.to_string());
                    return None;
                }
                (computed.bytes, fallback)
            }
        };
        log.tainted |= fallback;
        let status = if fallback {
            StageStatus::Fallback
        } else if skipped {
            StageStatus::Skipped
        } else {
            StageStatus::Ok
        };
        log.stages.push(StageResult {
            stage,
            talk_id: log.talk_id.clone(),
            status,
            artifact_key: Some(key),
            timing_ms: started.elapsed().as_millis() as u64,
        });
        Some(bytes)
    }

    pub fn finish(&self, mode: &str, logs: Vec<TalkLog>) -> (RunReport, RunStats) {
        let mut summary = Summary::default();
        let mut stages = Vec::new();
        let mut talks = Vec::new();
        let mut outputs = Vec::new();
        for log in logs {
            let outcome = log.outcome();
            match outcome.status {
                StageStatus::Failed => summary.failed += 1,
                StageStatus::Fallback => summary.fallback += 1,
                _ => summary.ok += 1,
            }
            talks.push(outcome);
            stages.extend(log.stages);
            outputs.extend(log.outputs);
        }
        let report = RunReport {
            run_id: self.run_id.clone(),
            config_hash: self.config.config_hash(),
            mode: mode.to_string(),
            stages,
            summary,
            talks,
            outputs,
        };
        let stats = RunStats {
            backend_calls: self.backends.total_attempts(),
            cache_hits: self.hits.load(Ordering::Relaxed),
            computed: self.computed.load(Ordering::Relaxed),
        };
        (report, stats)
    }
}

/// Compact decimal rendering for artifact variants (`25`, `12.5`).
pub(crate) fn fmt_seconds(v: f64) -> String {
    let s = format!("{v}");
    s.trim_end_matches(".0").to_string()
}

pub(crate) fn json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec(value).expect("artifact serializes");
    bytes.push(b'\n');
    bytes
}

pub(crate) fn parse<T: for<'de> Deserialize<'de>>(bytes: &[u8], what: &str) -> Result<T, String> {
    serde_json::from_slice(bytes).map_err(|e| format!("stored {what} unreadable: {e}"))
}
