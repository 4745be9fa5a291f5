use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::offline::{asr_stage, final_stage, postedit_stage, segment_stage, segment_variant, vad_stage};
use super::{fmt_seconds, json, parse, Computed, PipelineConfig, PipelineError, RunOptions, RunReport, RunStats, Runner, TalkLog};
use crate::backends::{AsrRequest, Backend, BackendKind, BackendSet};
use crate::corpus::{sha256_hex, to_jsonl, ArtifactStore, RunManifest, Stage, TalkRef};
use crate::document::{assemble_talk, split_sentences, SentenceRecord};
use crate::refinement::{language_name, PosteditMode};
use crate::segmentation::{plan_long_audio_chunks_with, ChunkPlan, ChunkPolicy};

/// Instruction-following tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IfTask {
    Asr,
    St,
    Sqa,
    Ssum,
}

impl IfTask {
    pub fn as_str(self) -> &'static str {
        match self {
            IfTask::Asr => "asr",
            IfTask::St => "st",
            IfTask::Sqa => "sqa",
            IfTask::Ssum => "ssum",
        }
    }
}

impl std::str::FromStr for IfTask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "asr" => Ok(IfTask::Asr),
            "st" => Ok(IfTask::St),
            "sqa" => Ok(IfTask::Sqa),
            "ssum" => Ok(IfTask::Ssum),
            other => Err(format!("unknown task `{other}` (expected asr, st, sqa or ssum)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct QaAnswer {
    question: String,
    answer: String,
    lang: String,
}

/// Runs one instruction-following task over every talk.
///
/// `asr` and `st` transcribe short chunks and post-edit the result with
/// preceding context. `sqa` and `ssum` send the whole talk, cut into fixed
/// windows and truncated at the configured cap, in a single request.
pub fn run_if(
    manifest: &RunManifest,
    config: &PipelineConfig,
    backends: &BackendSet,
    store: &ArtifactStore,
    task: IfTask,
    question: Option<&str>,
    options: RunOptions,
) -> Result<(RunReport, RunStats), PipelineError> {
    let question = match (task, question.map(str::trim)) {
        (IfTask::Sqa, Some(q)) if !q.is_empty() => Some(q),
        (IfTask::Sqa, _) => return Err(PipelineError::Invalid("sqa needs a question".into())),
        (_, q) => q,
    };
    let runner = Runner::new(manifest, config, backends, store, options)?;
    let systems = runner.asr_systems()?;
    let (_, speech) = systems[0];
    let vad = match task {
        IfTask::Asr | IfTask::St => Some(runner.backend(&config.vad_backend, BackendKind::Vad)?),
        _ => None,
    };
    let llm = match task {
        IfTask::Sqa => None,
        _ => Some(runner.backend(&config.llm_backend, BackendKind::Llm)?),
    };
    let logs: Vec<TalkLog> = manifest
        .talks
        .par_iter()
        .map(|talk| {
            let mut log = TalkLog::new(&talk.talk_id);
            match task {
                IfTask::Asr | IfTask::St => {
                    short_form(&runner, &mut log, talk, task, vad.expect("resolved"), speech, llm.expect("resolved"))
                }
                IfTask::Sqa | IfTask::Ssum => long_form(&runner, &mut log, talk, task, question, speech, llm),
            }
            log
        })
        .collect();
    Ok(runner.finish(&format!("if-{}", task.as_str()), logs))
}

fn output_langs(task: IfTask, talk: &TalkRef) -> Vec<String> {
    if task == IfTask::Asr || talk.target_langs.is_empty() {
        vec![talk.source_lang.clone()]
    } else {
        talk.target_langs.clone()
    }
}

fn short_form(
    runner: &Runner,
    log: &mut TalkLog,
    talk: &TalkRef,
    task: IfTask,
    vad: &Backend,
    speech: &Backend,
    llm: &Backend,
) {
    let sizes = &runner.config.chunk_size_s;
    let contexts = &runner.config.context_sizes;
    let (policy, size, mode, context) = match task {
        IfTask::Asr => (ChunkPolicy::IfAsr20, sizes.if_asr, PosteditMode::IfAsr, contexts.if_asr),
        _ => (ChunkPolicy::IfSt25, sizes.if_st, PosteditMode::IfSt, contexts.if_st),
    };
    let Some(track) = vad_stage(runner, log, talk, vad) else {
        return;
    };
    let Some(plan) = segment_stage(runner, log, &track, policy, size) else {
        return;
    };
    let seg_variant = segment_variant(policy, size);
    for lang in output_langs(task, talk) {
        let tag = format!("if-{}.{lang}", task.as_str());
        let variant = format!("{}.{tag}.{seg_variant}", speech.id());
        let Some(chunks) = asr_stage(runner, log, talk, &plan, &variant, speech, &lang) else {
            return;
        };
        if !chunks.is_empty() && chunks.iter().all(|c| c.text.is_none()) {
            log.fail(Stage::Asr, None, "every chunk failed");
            return;
        }
        let Some(bytes) = runner.stage(log, Stage::Sentences, &tag, false, || {
            let pieces: Vec<(usize, String)> =
                chunks.iter().map(|c| (c.chunk_index, c.text.clone().unwrap_or_default())).collect();
            let doc = assemble_talk(&talk.talk_id, &pieces).map_err(|e| e.to_string())?;
            Ok(Computed::ok(to_jsonl(&split_sentences(&doc, &lang))))
        }) else {
            return;
        };
        let records: Vec<SentenceRecord> = match crate::corpus::from_jsonl(&bytes) {
            Ok(r) => r,
            Err(e) => {
                log.fail(Stage::Sentences, None, &format!("stored sentences unreadable: {e}"));
                return;
            }
        };
        let Some(edited) = postedit_stage(runner, log, &tag, &records, context, mode, llm, &lang) else {
            return;
        };
        let lines: Vec<String> = edited.into_iter().map(|r| r.ape.unwrap_or_default()).collect();
        final_stage(runner, log, &format!("final.{tag}"), &lang, &lines);
    }
}

fn long_form(
    runner: &Runner,
    log: &mut TalkLog,
    talk: &TalkRef,
    task: IfTask,
    question: Option<&str>,
    speech: &Backend,
    llm: Option<&std::sync::Arc<Backend>>,
) {
    let cap = runner.config.truncation_cap_s;
    let window = runner.config.chunk_size_s.qa;
    let seg_variant = format!("long-{}-cap{}", fmt_seconds(window), fmt_seconds(cap));
    let Some(bytes) = runner.stage(log, Stage::Segments, &seg_variant, false, || {
        let plan = plan_long_audio_chunks_with(talk.duration_s, window, cap).map_err(|e| e.to_string())?;
        Ok(Computed::ok(plan.with_talk_id(&talk.talk_id).to_jsonl()))
    }) else {
        return;
    };
    let plan = match ChunkPlan::from_jsonl(&bytes, &talk.talk_id, ChunkPolicy::IfQa60) {
        Ok(p) => p,
        Err(e) => {
            log.fail(Stage::Segments, None, &format!("stored chunk plan unreadable: {e}"));
            return;
        }
    };
    log.truncated_at_s = (talk.duration_s > cap).then_some(cap);
    if let Some(at) = log.truncated_at_s {
        log::warn!("talk {}: audio truncated at {at} s", talk.talk_id);
    }
    let spans: Vec<(f64, f64)> = plan.chunks.iter().map(|c| (c.start_s, c.end_s)).collect();
    let end = spans.last().map_or(0.0, |s| s.1);

    for lang in output_langs(task, talk) {
        let instruction = match task {
            IfTask::Sqa => question.expect("checked").to_string(),
            _ => format!("Summarize the talk in {}.", language_name(&lang)),
        };
        let request = AsrRequest {
            audio_path: talk.audio_path.clone(),
            start_s: 0.0,
            end_s: end,
            lang: lang.clone(),
            chunks: Some(spans.clone()),
            instruction: Some(instruction.clone()),
        };
        match task {
            IfTask::Sqa => {
                let variant = format!("{lang}.q{}", &sha256_hex(instruction.as_bytes())[..12]);
                let stored = runner.stage(log, Stage::Qa, &variant, false, || {
                    let answer = speech.transcribe(&request).map_err(|e| e.to_string())?.text;
                    Ok(Computed::ok(json(&QaAnswer {
                        question: instruction.clone(),
                        answer,
                        lang: lang.clone(),
                    })))
                });
                if stored.is_some() {
                    let key = runner.key(Stage::Qa, &talk.talk_id, &variant);
                    log.outputs.push(super::OutputRef {
                        talk_id: talk.talk_id.clone(),
                        lang: lang.clone(),
                        artifact_key: key,
                    });
                }
            }
            _ => {
                let Some(bytes) = runner.stage(log, Stage::Summary, &lang, false, || {
                    let text = speech.transcribe(&request).map_err(|e| e.to_string())?.text;
                    Ok(Computed::ok(json(&text)))
                }) else {
                    return;
                };
                let summary: String = match parse(&bytes, "summary") {
                    Ok(s) => s,
                    Err(e) => {
                        log.fail(Stage::Summary, None, &e);
                        return;
                    }
                };
                let record = SentenceRecord {
                    talk_id: talk.talk_id.clone(),
                    index: 0,
                    source: summary,
                    mt: None,
                    ape: None,
                    lang: lang.clone(),
                };
                let tag = format!("if-ssum.{lang}");
                let llm = llm.expect("resolved for ssum");
                let Some(edited) = postedit_stage(runner, log, &tag, &[record], 0, PosteditMode::IfSsum, llm, &lang)
                else {
                    return;
                };
                let lines: Vec<String> = edited.into_iter().map(|r| r.ape.unwrap_or_default()).collect();
                final_stage(runner, log, &format!("final.{tag}"), &lang, &lines);
            }
        }
    }
}
