use std::path::Path;

use lfp_core::backends::synthetic::SyntheticAudio;
use lfp_core::backends::{BackendKind, BackendSet, BackendSpec};
use lfp_core::corpus::{parse_manifest, ArtifactKey, ArtifactStore, PutOptions, RunManifest, Stage};
use lfp_core::pipeline::{
    evaluate_run, grid_search_chunks, run_if, run_offline, EvalMetric, IfTask, OfflineStop, OutputRef, PipelineConfig,
    Reference, References, RunOptions, RunReport, StageStatus, Summary,
};
use lfp_core::segmentation::ChunkPlan;
use tempfile::TempDir;

fn talk_text(seed: usize, sentences: usize) -> String {
    (0..sentences)
        .map(|i| format!("Talk {seed} sentence {i} covers long form speech translation."))
        .collect::<Vec<_>>()
        .join(" ")
}

struct Fixture {
    dir: TempDir,
    manifest: RunManifest,
    texts: Vec<String>,
}

fn fixture(targets: &[&str], sentences: usize) -> Fixture {
    let dir = TempDir::new().unwrap();
    let mut lines = vec![r#"{"run_id": "fixture"}"#.to_string()];
    let mut texts = Vec::new();
    for t in 0..2 {
        let text = talk_text(t, sentences);
        let audio = SyntheticAudio::from_text(&text, 50.0);
        let path = dir.path().join(format!("talk{t}.json"));
        audio.save(&path).unwrap();
        lines.push(
            serde_json::json!({
                "talk_id": format!("talk{t}"),
                "audio_path": path.display().to_string(),
                "duration_s": audio.duration_s,
                "source_lang": "en",
                "target_langs": targets,
            })
            .to_string(),
        );
        texts.push(text);
    }
    let manifest = parse_manifest(&lines.join("\n")).unwrap();
    Fixture { dir, manifest, texts }
}

fn config(llm: &str, asr2: &str) -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.backends = vec![
        BackendSpec::new("vad", BackendKind::Vad, "mock:synth"),
        BackendSpec::new("asr1", BackendKind::Asr, "mock:synth"),
        BackendSpec::new("asr2", BackendKind::Asr, asr2),
        BackendSpec::new("llm", BackendKind::Llm, llm),
        BackendSpec::new("mt", BackendKind::Mt, "mock:identity"),
    ];
    for b in &mut c.backends {
        b.backoff_base_s = 0.0;
    }
    c.asr_system_ids = vec!["asr1".into(), "asr2".into()];
    c.validate().unwrap();
    c
}

fn store(dir: &Path) -> ArtifactStore {
    ArtifactStore::open(dir.join("store")).unwrap()
}

fn outputs(store: &ArtifactStore, report: &RunReport) -> Vec<Vec<u8>> {
    report.outputs.iter().map(|o| store.get_artifact(&o.artifact_key).unwrap()).collect()
}

#[test]
fn repeat_run_is_identical_and_fully_cached() {
    let f = fixture(&["de"], 20);
    let cfg = config("mock:echo", "mock:synth?drop_every=7");
    let store = store(f.dir.path());

    let backends = BackendSet::from_specs(&cfg.backends).unwrap();
    let (cold, cold_stats) =
        run_offline(&f.manifest, &cfg, &backends, &store, OfflineStop::Postedit, RunOptions::default()).unwrap();
    assert_eq!(cold.exit_code(), 0, "{}", cold.to_json());
    assert_eq!(cold.outputs.len(), 2);
    assert!(cold_stats.backend_calls > 0);

    let backends = BackendSet::from_specs(&cfg.backends).unwrap();
    let (warm, warm_stats) =
        run_offline(&f.manifest, &cfg, &backends, &store, OfflineStop::Postedit, RunOptions { resume: true }).unwrap();
    assert_eq!(warm_stats.backend_calls, 0);
    assert_eq!(warm_stats.computed, 0);
    assert_eq!(cold.without_timing(), warm.without_timing());
    assert_eq!(outputs(&store, &cold), outputs(&store, &warm));

    // one line per sentence
    let final0 = String::from_utf8(outputs(&store, &cold)[0].clone()).unwrap();
    assert!(final0.ends_with('\n'));
    assert!(final0.lines().count() > 1);
}

#[test]
fn resume_without_artifacts_is_an_error() {
    let f = fixture(&["de"], 2);
    let cfg = config("mock:echo", "mock:synth");
    let store = store(f.dir.path());
    let backends = BackendSet::from_specs(&cfg.backends).unwrap();
    let err = run_offline(&f.manifest, &cfg, &backends, &store, OfflineStop::Postedit, RunOptions { resume: true });
    assert!(err.is_err());
}

#[test]
fn llm_outage_falls_back_and_is_not_cached() {
    let f = fixture(&["de"], 6);
    let cfg = config("mock:echo?fail=protocol", "mock:synth");
    let store = store(f.dir.path());
    let backends = BackendSet::from_specs(&cfg.backends).unwrap();
    let (report, _) =
        run_offline(&f.manifest, &cfg, &backends, &store, OfflineStop::Postedit, RunOptions::default()).unwrap();
    assert_eq!(report.exit_code(), 2);
    assert_eq!(report.summary, Summary { ok: 0, fallback: 2, failed: 0 });
    assert_eq!(report.outputs.len(), 2);
    // fused text falls back to the first system, which is exact here
    for (out, text) in outputs(&store, &report).iter().zip(&f.texts) {
        let got = String::from_utf8(out.clone()).unwrap();
        assert_eq!(got.split_whitespace().collect::<Vec<_>>(), text.split_whitespace().collect::<Vec<_>>());
    }
    for s in report.stages.iter().filter(|s| s.stage == Stage::Fusion) {
        assert_eq!(s.status, StageStatus::Fallback);
    }

    let backends = BackendSet::from_specs(&cfg.backends).unwrap();
    let (_, stats) =
        run_offline(&f.manifest, &cfg, &backends, &store, OfflineStop::Postedit, RunOptions::default()).unwrap();
    assert!(stats.backend_calls > 0, "fallback artifacts must be recomputed");
}

#[test]
fn unreadable_audio_fails_only_that_talk() {
    let mut f = fixture(&["de"], 4);
    f.manifest.talks[1].audio_path = f.dir.path().join("missing.json").display().to_string();
    let cfg = config("mock:echo", "mock:synth");
    let store = store(f.dir.path());
    let backends = BackendSet::from_specs(&cfg.backends).unwrap();
    let (report, _) =
        run_offline(&f.manifest, &cfg, &backends, &store, OfflineStop::Postedit, RunOptions::default()).unwrap();
    assert_eq!(report.summary, Summary { ok: 1, fallback: 0, failed: 1 });
    assert_eq!(report.exit_code(), 1);
    assert_eq!(report.outputs.len(), 1);
}

#[test]
fn early_stop_reports_the_last_stage() {
    let f = fixture(&["de"], 4);
    let cfg = config("mock:echo", "mock:synth");
    let store = store(f.dir.path());
    let backends = BackendSet::from_specs(&cfg.backends).unwrap();
    let (report, stats) =
        run_offline(&f.manifest, &cfg, &backends, &store, OfflineStop::Segment, RunOptions::default()).unwrap();
    assert!(report.outputs.iter().all(|o| o.artifact_key.stage == Stage::Segments));
    assert!(report.stages.iter().all(|s| matches!(s.stage, Stage::Vad | Stage::Segments)));
    assert_eq!(stats.backend_calls, 2);
}

#[test]
fn if_asr_chunks_respect_the_bound() {
    let f = fixture(&[], 40);
    let cfg = config("mock:echo", "mock:synth");
    let store = store(f.dir.path());
    let backends = BackendSet::from_specs(&cfg.backends).unwrap();
    let (report, _) = run_if(&f.manifest, &cfg, &backends, &store, IfTask::Asr, None, RunOptions::default()).unwrap();
    assert_eq!(report.exit_code(), 0, "{}", report.to_json());
    for s in report.stages.iter().filter(|s| s.stage == Stage::Segments) {
        let key = s.artifact_key.as_ref().unwrap();
        let plan = ChunkPlan::from_jsonl(
            &store.get_artifact(key).unwrap(),
            &s.talk_id,
            lfp_core::segmentation::ChunkPolicy::IfAsr20,
        )
        .unwrap();
        assert!(plan.chunks.len() > 1);
        for c in &plan.chunks {
            assert!(c.end_s - c.start_s <= 20.0 + 1e-9);
        }
    }
    assert_eq!(report.outputs.len(), 2);
    assert!(report.outputs.iter().all(|o| o.lang == "en"));
}

#[test]
fn if_st_skips_post_editing_for_chinese() {
    let f = fixture(&["zh", "de"], 6);
    let cfg = config("mock:echo", "mock:synth");
    let store = store(f.dir.path());
    let backends = BackendSet::from_specs(&cfg.backends).unwrap();
    let (report, _) = run_if(&f.manifest, &cfg, &backends, &store, IfTask::St, None, RunOptions::default()).unwrap();
    let ape: Vec<_> = report
        .stages
        .iter()
        .filter(|s| s.stage == Stage::Ape && !s.artifact_key.as_ref().unwrap().variant.starts_with("final"))
        .collect();
    assert_eq!(ape.len(), 4);
    for s in ape {
        let zh = s.artifact_key.as_ref().unwrap().variant.ends_with(".zh");
        assert_eq!(s.status == StageStatus::Skipped, zh);
    }
}

#[test]
fn ssum_truncates_long_talks() {
    let dir = TempDir::new().unwrap();
    let mut audio = SyntheticAudio::from_text(&talk_text(0, 5), 10.0);
    audio.duration_s = 1700.0;
    let path = dir.path().join("long.json");
    audio.save(&path).unwrap();
    let manifest = parse_manifest(
        &serde_json::json!({
            "talk_id": "long",
            "audio_path": path.display().to_string(),
            "duration_s": 1700.0,
            "source_lang": "en",
            "target_langs": ["it"],
        })
        .to_string(),
    )
    .unwrap();
    let cfg = config("mock:echo", "mock:synth");
    let store = store(dir.path());
    let backends = BackendSet::from_specs(&cfg.backends).unwrap();
    let (report, _) = run_if(&manifest, &cfg, &backends, &store, IfTask::Ssum, None, RunOptions::default()).unwrap();
    assert_eq!(report.talks[0].truncated_at_s, Some(1602.0));
    let seg = report.stages.iter().find(|s| s.stage == Stage::Segments).unwrap();
    let plan = ChunkPlan::from_jsonl(
        &store.get_artifact(seg.artifact_key.as_ref().unwrap()).unwrap(),
        "long",
        lfp_core::segmentation::ChunkPolicy::IfQa60,
    )
    .unwrap();
    assert_eq!(plan.chunks.len(), 27);
    assert_eq!(plan.chunks.last().unwrap().end_s, 1602.0);
    assert_eq!(report.outputs.len(), 1);
    assert_eq!(report.exit_code(), 0);
}

#[test]
fn sqa_needs_a_question() {
    let f = fixture(&["de"], 2);
    let cfg = config("mock:echo", "mock:synth");
    let store = store(f.dir.path());
    let backends = BackendSet::from_specs(&cfg.backends).unwrap();
    assert!(run_if(&f.manifest, &cfg, &backends, &store, IfTask::Sqa, None, RunOptions::default()).is_err());
    let (report, _) =
        run_if(&f.manifest, &cfg, &backends, &store, IfTask::Sqa, Some("What is covered?"), RunOptions::default())
            .unwrap();
    assert_eq!(report.outputs.len(), 2);
    assert!(report.outputs.iter().all(|o| o.artifact_key.stage == Stage::Qa));
}

#[test]
fn grid_wer_falls_as_boundaries_thin_out() {
    let f = fixture(&[], 40);
    let mut cfg = config("mock:echo", "mock:synth");
    cfg.backends[1].endpoint = "mock:synth?boundary_errors=1".into();
    let store = store(f.dir.path());
    let refs = References::new(f.texts.iter().enumerate().map(|(i, t)| Reference {
        talk_id: format!("talk{i}"),
        lang: None,
        text: t.clone(),
    }));
    let backends = BackendSet::from_specs(&cfg.backends).unwrap();
    let sizes = [5.0, 10.0, 15.0, 20.0, 25.0];
    let grid =
        grid_search_chunks(&f.manifest, &cfg, &backends, &store, &refs, &sizes, EvalMetric::Wer, RunOptions::default())
            .unwrap();
    assert!(grid.excluded.is_empty());
    assert_eq!(grid.table.rows.len(), 5);
    for col in 0..2 {
        let values: Vec<f64> = grid.table.rows.iter().map(|r| r.values[col].unwrap()).collect();
        assert!(values.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{values:?}");
        assert!(values[0] > values[4]);
    }
}

#[test]
fn grid_excludes_talks_without_references() {
    let f = fixture(&[], 4);
    let cfg = config("mock:echo", "mock:synth");
    let store = store(f.dir.path());
    let refs = References::new([Reference {
        talk_id: "talk0".into(),
        lang: None,
        text: f.texts[0].clone(),
    }]);
    let backends = BackendSet::from_specs(&cfg.backends).unwrap();
    let grid =
        grid_search_chunks(&f.manifest, &cfg, &backends, &store, &refs, &[25.0], EvalMetric::Chrf2, RunOptions::default())
            .unwrap();
    assert_eq!(grid.excluded, vec!["talk1".to_string()]);
    assert_eq!(grid.table.columns.len(), 1);
    assert_eq!(grid.table.rows[0].values[0], Some(100.0));
}

fn brute_wer(reference: &str, hypothesis: &str) -> (usize, usize) {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    let mut d = vec![vec![0usize; h.len() + 1]; r.len() + 1];
    for i in 0..=r.len() {
        for j in 0..=h.len() {
            d[i][j] = if i == 0 {
                j
            } else if j == 0 {
                i
            } else {
                (d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1])).min(d[i - 1][j] + 1).min(d[i][j - 1] + 1)
            };
        }
    }
    (d[r.len()][h.len()], r.len())
}

#[test]
fn corpus_wer_is_micro_averaged() {
    let dir = TempDir::new().unwrap();
    let store = store(dir.path());
    let refs_text = ["alpha beta gamma delta", "one two three four"];
    let hyps = ["alpha beta gamma delta\n", "one two x y\n"];
    let mut report = RunReport {
        run_id: "evalrun".into(),
        config_hash: String::new(),
        mode: "offline".into(),
        stages: Vec::new(),
        summary: Summary::default(),
        talks: Vec::new(),
        outputs: Vec::new(),
    };
    for (i, hyp) in hyps.iter().enumerate() {
        let key = ArtifactKey::new("evalrun", Stage::Ape, format!("t{i}"), "final.en");
        store.put_artifact_with(&key, hyp.as_bytes(), PutOptions::default()).unwrap();
        report.outputs.push(OutputRef {
            talk_id: format!("t{i}"),
            lang: "en".into(),
            artifact_key: key,
        });
    }
    let refs = References::new(refs_text.iter().enumerate().map(|(i, t)| Reference {
        talk_id: format!("t{i}"),
        lang: None,
        text: t.to_string(),
    }));
    let scores = evaluate_run(&report, &store, &refs, &[EvalMetric::Wer, EvalMetric::Chrf2]).unwrap();
    assert_eq!(scores.talks[0].wer, Some(0.0));
    assert_eq!(scores.talks[1].wer, Some(0.5));
    let (e0, n0) = brute_wer(refs_text[0], hyps[0]);
    let (e1, n1) = brute_wer(refs_text[1], hyps[1]);
    let oracle = (e0 + e1) as f64 / (n0 + n1) as f64;
    assert_eq!(oracle, 0.25);
    assert_eq!(scores.corpus[0].wer, Some(oracle));
    let stored = store.get_artifact(&ArtifactKey::new("evalrun", Stage::Scores, "corpus", "eval")).unwrap();
    assert!(!stored.is_empty());

    let none = References::new([Reference {
        talk_id: "other".into(),
        lang: None,
        text: "x".into(),
    }]);
    assert!(evaluate_run(&report, &store, &none, &[EvalMetric::Wer]).is_err());
}
