use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fmt_seconds, json, parse, Computed, OutputRef, PipelineConfig, PipelineError, RunOptions, RunReport, RunStats, Runner, TalkLog};
use crate::backends::{AsrRequest, Backend, BackendKind, BackendSet, CompletionParams};
use crate::corpus::{from_jsonl, to_jsonl, ArtifactStore, RunManifest, Stage, TalkRef};
use crate::document::{assemble_talk, split_sentences, HypothesisSet, SentenceRecord, TalkDocument};
use crate::refinement::{
    approx_tokens, parse_fusion_response, plan_fusion_blocks, postedit_document, postedit_disabled, PosteditMode,
    PosteditOptions,
};
use crate::segmentation::{constrain_segments, frames_to_segments, ChunkPlan, ChunkPolicy, ConstraintParams, SpeechFrameTrack};

/// Last stage to run; later stages are skipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum OfflineStop {
    Segment,
    Transcribe,
    Fuse,
    Translate,
    Postedit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct AsrChunk {
    pub chunk_index: usize,
    pub start_s: f64,
    pub end_s: f64,
    /// `None` when the backend failed on this chunk.
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FusedBlock {
    block_index: usize,
    first_chunk: usize,
    last_chunk: usize,
    prompt: String,
    raw: Option<String>,
    text: String,
    fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct EditedLine {
    #[serde(flatten)]
    pub record: SentenceRecord,
    pub prompt: Option<String>,
}

pub(crate) fn vad_stage(runner: &Runner, log: &mut TalkLog, talk: &TalkRef, vad: &Backend) -> Option<SpeechFrameTrack> {
    let bytes = runner.stage(log, Stage::Vad, vad.id(), false, || {
        vad.detect_speech(&talk.audio_path, &talk.talk_id)
            .map(|track| Computed::ok(json(&track)))
            .map_err(|e| e.to_string())
    })?;
    match parse(&bytes, "frame track") {
        Ok(track) => Some(track),
        Err(e) => {
            log.fail(Stage::Vad, None, &e);
            None
        }
    }
}

pub(crate) fn segment_variant(policy: ChunkPolicy, size: f64) -> String {
    format!("{}-max{}", policy.as_str(), fmt_seconds(size))
}

pub(crate) fn segment_stage(
    runner: &Runner,
    log: &mut TalkLog,
    track: &SpeechFrameTrack,
    policy: ChunkPolicy,
    size: f64,
) -> Option<ChunkPlan> {
    let talk_id = log.talk_id.clone();
    let bytes = runner.stage(log, Stage::Segments, &segment_variant(policy, size), false, || {
        let segments = frames_to_segments(track, &runner.config.vad).map_err(|e| e.to_string())?;
        let plan = constrain_segments(&segments, track, &ConstraintParams::new(policy, size)).map_err(|e| e.to_string())?;
        Ok(Computed::ok(plan.with_talk_id(&talk_id).to_jsonl()))
    })?;
    match ChunkPlan::from_jsonl(&bytes, &talk_id, policy) {
        Ok(plan) => Some(plan),
        Err(e) => {
            log.fail(Stage::Segments, None, &e.to_string());
            None
        }
    }
}

/// Transcribes every chunk of `plan` with one system, chunks in parallel.
/// Failed chunks are kept as `None` and mark the artifact as a fallback.
pub(crate) fn asr_stage(
    runner: &Runner,
    log: &mut TalkLog,
    talk: &TalkRef,
    plan: &ChunkPlan,
    variant: &str,
    backend: &Backend,
    lang: &str,
) -> Option<Vec<AsrChunk>> {
    let bytes = runner.stage(log, Stage::Asr, variant, false, || {
        let chunks: Vec<AsrChunk> = plan
            .chunks
            .par_iter()
            .enumerate()
            .map(|(i, seg)| {
                let request = AsrRequest::span(&talk.audio_path, seg.start_s, seg.end_s, lang);
                let text = match backend.transcribe(&request) {
                    Ok(t) => Some(t.text),
                    Err(e) => {
                        log::warn!("talk {} chunk {i}: {e}", talk.talk_id);
                        None
                    }
                };
                AsrChunk {
                    chunk_index: i,
                    start_s: seg.start_s,
                    end_s: seg.end_s,
                    text,
                }
            })
            .collect();
        let failed = chunks.iter().any(|c| c.text.is_none());
        Ok(Computed::with_fallback(to_jsonl(&chunks), failed))
    })?;
    match from_jsonl(&bytes) {
        Ok(chunks) => Some(chunks),
        Err(e) => {
            log.fail(Stage::Asr, None, &format!("stored transcripts unreadable: {e}"));
            None
        }
    }
}

pub(crate) fn completion_params(runner: &Runner, stop: &[&str]) -> CompletionParams {
    CompletionParams {
        max_tokens: runner.config.max_tokens,
        temperature: runner.config.temperature,
        stop: stop.iter().map(|s| s.to_string()).collect(),
    }
}

pub(crate) fn postedit_options(runner: &Runner) -> PosteditOptions {
    PosteditOptions {
        skip_langs: runner.config.context_sizes.disabled_langs.clone(),
        params: completion_params(runner, &["<|im_end|>"]),
    }
}

/// Post-edits `records` and stores them; returns the edited records.
pub(crate) fn postedit_stage(
    runner: &Runner,
    log: &mut TalkLog,
    variant: &str,
    records: &[SentenceRecord],
    context: usize,
    mode: PosteditMode,
    llm: &Backend,
    lang: &str,
) -> Option<Vec<SentenceRecord>> {
    let options = postedit_options(runner);
    let skipped = postedit_disabled(lang, &options.skip_langs);
    let bytes = runner.stage(log, Stage::Ape, variant, skipped, || {
        let outcome = postedit_document(records, context, mode, llm, &options);
        let lines: Vec<EditedLine> = outcome
            .records
            .into_iter()
            .enumerate()
            .map(|(i, record)| EditedLine {
                record,
                prompt: outcome.prompts.get(i).cloned(),
            })
            .collect();
        Ok(Computed::with_fallback(to_jsonl(&lines), !outcome.fallbacks.is_empty()))
    })?;
    match from_jsonl::<EditedLine>(&bytes) {
        Ok(lines) => Some(lines.into_iter().map(|l| l.record).collect()),
        Err(e) => {
            log.fail(Stage::Ape, None, &format!("stored post-edits unreadable: {e}"));
            None
        }
    }
}

/// Stores the final text, one sentence per line, and records it as output.
pub(crate) fn final_stage(runner: &Runner, log: &mut TalkLog, variant: &str, lang: &str, lines: &[String]) {
    let mut text = lines.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    if runner
        .stage(log, Stage::Ape, variant, false, || Ok(Computed::ok(text.into_bytes())))
        .is_some()
    {
        let key = runner.key(Stage::Ape, &log.talk_id, variant);
        log.outputs.push(OutputRef {
            talk_id: log.talk_id.clone(),
            lang: lang.to_string(),
            artifact_key: key,
        });
    }
}

fn push_output(runner: &Runner, log: &mut TalkLog, stage: Stage, variant: &str, lang: &str) {
    let key = runner.key(stage, &log.talk_id, variant);
    log.outputs.push(OutputRef {
        talk_id: log.talk_id.clone(),
        lang: lang.to_string(),
        artifact_key: key,
    });
}

struct OfflineBackends<'a> {
    vad: &'a Arc<Backend>,
    systems: Vec<(&'a str, &'a Arc<Backend>)>,
    llm: Option<&'a Arc<Backend>>,
    mt: Option<&'a Arc<Backend>>,
}

/// Runs the offline cascade up to `stop` for every talk, talks in parallel.
pub fn run_offline(
    manifest: &RunManifest,
    config: &PipelineConfig,
    backends: &BackendSet,
    store: &ArtifactStore,
    stop: OfflineStop,
    options: RunOptions,
) -> Result<(RunReport, RunStats), PipelineError> {
    let runner = Runner::new(manifest, config, backends, store, options)?;
    let resolved = OfflineBackends {
        vad: runner.backend(&config.vad_backend, BackendKind::Vad)?,
        systems: runner.asr_systems()?,
        llm: if stop >= OfflineStop::Fuse {
            Some(runner.backend(&config.llm_backend, BackendKind::Llm)?)
        } else {
            None
        },
        mt: if stop >= OfflineStop::Translate {
            Some(runner.backend(&config.mt_backend, BackendKind::Mt)?)
        } else {
            None
        },
    };
    let logs: Vec<TalkLog> = manifest
        .talks
        .par_iter()
        .map(|talk| offline_talk(&runner, talk, &resolved, stop))
        .collect();
    Ok(runner.finish("offline", logs))
}



fn offline_talk(runner: &Runner, talk: &TalkRef, b: &OfflineBackends, stop: OfflineStop) -> TalkLog {
    let mut log = TalkLog::new(&talk.talk_id);
    let size = runner.config.chunk_size_s.offline;
    let policy = ChunkPolicy::Offline25;
    let Some(track) = vad_stage(runner, &mut log, talk, b.vad) else {
        return log;
    };
    let Some(plan) = segment_stage(runner, &mut log, &track, policy, size) else {
        return log;
    };
    let seg_variant = segment_variant(policy, size);
    if stop == OfflineStop::Segment {
        push_output(runner, &mut log, Stage::Segments, &seg_variant, &talk.source_lang);
        return log;
    }

    let mut transcripts: Vec<(&str, Vec<AsrChunk>)> = Vec::new();
    for (id, backend) in &b.systems {
        let variant = format!("{id}.{seg_variant}");
        let Some(chunks) = asr_stage(runner, &mut log, talk, &plan, &variant, backend, &talk.source_lang) else {
            return log;
        };
        if stop == OfflineStop::Transcribe {
            push_output(runner, &mut log, Stage::Asr, &variant, &talk.source_lang);
        }
        transcripts.push((id, chunks));
    }
    // systems with no usable chunk take no part in fusion
    transcripts.retain(|(_, chunks)| chunks.is_empty() || chunks.iter().any(|c| c.text.is_some()));
    if transcripts.is_empty() {
        log.fail(Stage::Asr, None, "every ASR system failed on every chunk");
        return log;
    }
    if stop == OfflineStop::Transcribe {
        return log;
    }

    let llm = b.llm.expect("resolved for fusion");
    let Some(doc) = fuse(runner, &mut log, talk, &plan, &transcripts, llm) else {
        return log;
    };
    if stop == OfflineStop::Fuse {
        push_output(runner, &mut log, Stage::Document, "text", &talk.source_lang);
        return log;
    }

    let mt = b.mt.expect("resolved for translation");
    if talk.target_langs.is_empty() {
        log::warn!("talk {} has no target languages", talk.talk_id);
    }
    for lang in &talk.target_langs {
        let Some(records) = translate(runner, &mut log, talk, &doc, mt, lang) else {
            return log;
        };
        if stop == OfflineStop::Translate {
            push_output(runner, &mut log, Stage::Mt, lang, lang);
            continue;
        }
        let context = runner.config.context_sizes.ape;
        let Some(edited) = postedit_stage(runner, &mut log, lang, &records, context, PosteditMode::ApeOffline, llm, lang)
        else {
            return log;
        };
        let lines: Vec<String> = edited.into_iter().map(|r| r.ape.unwrap_or_default()).collect();
        final_stage(runner, &mut log, &format!("final.{lang}"), lang, &lines);
    }
    log
}

/// Fuses per-system transcripts block by block and assembles the document.
fn fuse(
    runner: &Runner,
    log: &mut TalkLog,
    talk: &TalkRef,
    plan: &ChunkPlan,
    transcripts: &[(&str, Vec<AsrChunk>)],
    llm: &Backend,
) -> Option<TalkDocument> {
    let system_ids: Vec<String> = transcripts.iter().map(|(id, _)| id.to_string()).collect();
    let hyps: Vec<HypothesisSet> = (0..plan.chunks.len())
        .map(|i| HypothesisSet {
            talk_id: talk.talk_id.clone(),
            chunk_index: i,
            texts: transcripts
                .iter()
                .filter_map(|(id, chunks)| Some((id.to_string(), chunks.get(i)?.text.clone()?)))
                .collect::<BTreeMap<_, _>>(),
        })
        .collect();
    let fallback_text = |first: usize, last: usize| -> String {
        system_ids
            .iter()
            .map(|id| {
                hyps[first..=last]
                    .iter()
                    .filter_map(|h| h.texts.get(id).map(|t| t.trim()))
                    .filter(|t| !t.is_empty())
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .find(|t| !t.is_empty())
            .unwrap_or_default()
    };

    let bytes = runner.stage(log, Stage::Fusion, "fused", false, || {
        if hyps.is_empty() {
            return Ok(Computed::ok(Vec::new()));
        }
        let params = completion_params(runner, &[]);
        let blocks = match plan_fusion_blocks(
            &talk.talk_id,
            &hyps,
            &system_ids,
            runner.config.fusion_token_budget,
            &approx_tokens,
        ) {
            Ok(blocks) => blocks
                .into_par_iter()
                .enumerate()
                .map(|(i, block)| {
                    let (first, last) = block.chunk_range;
                    let raw = llm.complete(&block.rendered_prompt, &params);
                    let parsed = raw
                        .as_ref()
                        .map_err(|e| e.to_string())
                        .and_then(|r| parse_fusion_response(r).map_err(|e| e.to_string()));
                    let (text, fallback) = match parsed {
                        Ok(text) => (text, false),
                        Err(reason) => {
                            log::warn!("talk {} fusion block {i} fell back to system 1: {reason}", talk.talk_id);
                            (fallback_text(first, last), true)
                        }
                    };
                    FusedBlock {
                        block_index: i,
                        first_chunk: first,
                        last_chunk: last,
                        prompt: block.rendered_prompt,
                        raw: raw.ok(),
                        text,
                        fallback,
                    }
                })
                .collect::<Vec<_>>(),
            Err(e) => {
                log::warn!("talk {}: fusion planning failed ({e}); using system 1 per chunk", talk.talk_id);
                (0..hyps.len())
                    .map(|i| FusedBlock {
                        block_index: i,
                        first_chunk: i,
                        last_chunk: i,
                        prompt: String::new(),
                        raw: None,
                        text: fallback_text(i, i),
                        fallback: true,
                    })
                    .collect()
            }
        };
        let fallback = blocks.iter().any(|b| b.fallback);
        Ok(Computed::with_fallback(to_jsonl(&blocks), fallback))
    })?;
    let blocks: Vec<FusedBlock> = match from_jsonl(&bytes) {
        Ok(b) => b,
        Err(e) => {
            log.fail(Stage::Fusion, None, &format!("stored fusion unreadable: {e}"));
            return None;
        }
    };

    let bytes = runner.stage(log, Stage::Document, "text", false, || {
        let pieces: Vec<(usize, String)> = blocks.iter().map(|b| (b.block_index, b.text.clone())).collect();
        let doc = assemble_talk(&talk.talk_id, &pieces).map_err(|e| e.to_string())?;
        Ok(Computed::ok(json(&doc)))
    })?;
    match parse(&bytes, "document") {
        Ok(doc) => Some(doc),
        Err(e) => {
            log.fail(Stage::Document, None, &e);
            None
        }
    }
}

/// Splits the document into sentences and translates each, in parallel.
/// A failed sentence keeps its source text and marks a fallback.
fn translate(
    runner: &Runner,
    log: &mut TalkLog,
    talk: &TalkRef,
    doc: &TalkDocument,
    mt: &Backend,
    lang: &str,
) -> Option<Vec<SentenceRecord>> {
    let bytes = runner.stage(log, Stage::Sentences, lang, false, || {
        Ok(Computed::ok(to_jsonl(&split_sentences(doc, lang))))
    })?;
    let sentences: Vec<SentenceRecord> = match from_jsonl(&bytes) {
        Ok(s) => s,
        Err(e) => {
            log.fail(Stage::Sentences, None, &format!("stored sentences unreadable: {e}"));
            return None;
        }
    };
    let bytes = runner.stage(log, Stage::Mt, lang, false, || {
        let translated: Vec<(SentenceRecord, bool)> = sentences
            .par_iter()
            .map(|s| {
                let mut record = s.clone();
                match mt.translate(&s.source, &talk.source_lang, lang) {
                    Ok(text) if !text.trim().is_empty() => {
                        record.mt = Some(text);
                        (record, false)
                    }
                    other => {
                        if let Err(e) = other {
                            log::warn!("talk {} sentence {}: {e}", s.talk_id, s.index);
                        }
                        record.mt = Some(s.source.clone());
                        (record, true)
                    }
                }
            })
            .collect();
        let fallback = translated.iter().any(|(_, f)| *f);
        let records: Vec<SentenceRecord> = translated.into_iter().map(|(r, _)| r).collect();
        Ok(Computed::with_fallback(to_jsonl(&records), fallback))
    })?;
    match from_jsonl(&bytes) {
        Ok(records) => Some(records),
        Err(e) => {
            log.fail(Stage::Mt, None, &format!("stored translations unreadable: {e}"));
            None
        }
    }
}
