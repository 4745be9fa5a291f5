//! Acceptance suite: one pass/fail line per criterion, non-zero exit when any
//! criterion fails. Run with `cargo test -p lfp-cli --test acceptance`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use lfp_core::backends::synthetic::SyntheticAudio;
use lfp_core::backends::{BackendError, Completion, CompletionParams, Translation};
use lfp_core::corpus::to_jsonl;
use lfp_core::curation::{
    balance_unanswerable, build_augmentation_prompt, filter_top_k, make_ape_triplets, sample_indices,
    AugmentationKind, QaExample, ScoredPair,
};
use lfp_core::document::SentenceRecord;
use lfp_core::metrics::{chrf, wer, NormalizationProfile};
use lfp_core::refinement::{
    build_ape_prompt, build_fusion_prompt, default_system_labels, postedit_document, ApeRequest, FusionBlock,
    PosteditMode, PosteditOptions,
};
use lfp_core::segmentation::{
    constrain_segments, constrain_segments_traced, frames_to_segments, plan_long_audio_chunks, ChunkPolicy,
    ConstraintParams, Hysteresis, SpeechFrameTrack,
};
use rand_pcg::rand_core::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use tempfile::TempDir;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(started: Instant, limit: Duration) -> Result<(), String> {
    let took = started.elapsed();
    check(took < limit, || format!("took {took:?}, limit {limit:?}"))
}

fn below(rng: &mut Pcg64, n: usize) -> usize {
    (rng.next_u64() % n as u64) as usize
}

fn unit(rng: &mut Pcg64) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

// 1 -----------------------------------------------------------------------

fn edit_distance(r: &[&str], h: &[&str]) -> usize {
    let mut d = vec![vec![0usize; h.len() + 1]; r.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=h.len() {
        d[0][j] = j;
    }
    for i in 1..=r.len() {
        for j in 1..=h.len() {
            let sub = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[r.len()][h.len()]
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = Pcg64::seed_from_u64(1);
    let alphabet = ["a", "b", "c", "d"];
    let words = |rng: &mut Pcg64, min: usize| -> Vec<&str> {
        let len = min + below(rng, 9 - min);
        (0..len).map(|_| alphabet[below(rng, 4)]).collect()
    };
    for case in 0..1000 {
        let r = words(&mut rng, 1);
        let h = words(&mut rng, 0);
        let oracle = edit_distance(&r, &h);
        let got = wer(&r.join(" "), &h.join(" "), NormalizationProfile::JiwerLike).map_err(|e| e.to_string())?;
        check(got.errors() == oracle && got.ref_words == r.len(), || {
            format!("case {case}: {r:?} vs {h:?}: {} edits, oracle {oracle}", got.errors())
        })?;
        check(got.wer == oracle as f64 / r.len() as f64, || format!("case {case}: rate {}", got.wer))?;
    }
    within(started, Duration::from_secs(5))?;
    Ok("1000 pairs match the edit-distance oracle".into())
}

// 2 -----------------------------------------------------------------------

/// chrF from explicit n-gram multisets: precision and recall averaged over
/// orders, then combined with the given beta.
fn chrf_oracle(reference: &str, hypothesis: &str, max_order: usize, beta: f64) -> f64 {
    let grams = |s: &str, n: usize| -> HashMap<String, usize> {
        let chars: Vec<char> = s.chars().filter(|c| !c.is_whitespace()).collect();
        let mut m = HashMap::new();
        if chars.len() >= n {
            for w in chars.windows(n) {
                *m.entry(w.iter().collect()).or_insert(0) += 1;
            }
        }
        m
    };
    let (mut p, mut r) = (0.0, 0.0);
    for n in 1..=max_order {
        let (rg, hg) = (grams(reference, n), grams(hypothesis, n));
        let matches: usize = hg.iter().map(|(g, c)| (*c).min(*rg.get(g).unwrap_or(&0))).sum();
        let (ht, rt): (usize, usize) = (hg.values().sum(), rg.values().sum());
        p += if ht > 0 { matches as f64 / ht as f64 } else { 0.0 };
        r += if rt > 0 { matches as f64 / rt as f64 } else { 0.0 };
    }
    p /= max_order as f64;
    r /= max_order as f64;
    if p + r == 0.0 {
        return 0.0;
    }
    100.0 * (1.0 + beta * beta) * p * r / (beta * beta * p + r)
}

fn criterion_2() -> Outcome {
    let oracle = chrf_oracle("abcd", "abed", 2, 2.0);
    check((oracle - 54.17).abs() <= 0.01, || format!("oracle gives {oracle}"))?;
    let got = chrf("abcd", "abed", 2, 2.0).map_err(|e| e.to_string())?.score;
    check((got - 54.17).abs() <= 0.01 && (got - oracle).abs() < 1e-9, || format!("chrF2 = {got}"))?;
    let identity = chrf("abcd", "abcd", 2, 2.0).map_err(|e| e.to_string())?.score;
    check(identity == 100.0, || format!("identity = {identity}"))?;
    let disjoint = chrf("abcd", "wxyz", 2, 2.0).map_err(|e| e.to_string())?.score;
    check(disjoint == 0.0, || format!("disjoint = {disjoint}"))?;
    Ok(format!("abcd/abed = {got:.4}, identity 100, disjoint 0"))
}

// 3 -----------------------------------------------------------------------

fn random_track(rng: &mut Pcg64) -> Vec<f64> {
    let mut probs = Vec::new();
    for _ in 0..1 + below(rng, 12) {
        let speech = below(rng, 2) == 0;
        for _ in 0..1 + below(rng, 150) {
            let jitter = unit(rng) * 0.3;
            probs.push(if speech { 0.7 + jitter } else { jitter });
        }
    }
    probs
}

fn criterion_3() -> Outcome {
    let started = Instant::now();
    let mut rng = Pcg64::seed_from_u64(3);
    let rate = 10.0;
    let mut splits_checked = 0;
    for case in 0..1000 {
        let probs = random_track(&mut rng);
        let size = 2.5 + unit(&mut rng) * 27.5;
        let track = SpeechFrameTrack::new("t", rate, probs.clone()).map_err(|e| e.to_string())?;
        let segments = frames_to_segments(&track, &Hysteresis::default()).map_err(|e| e.to_string())?;
        let params = ConstraintParams::new(ChunkPolicy::Offline25, size);
        let (plan, splits) = constrain_segments_traced(&segments, &track, &params).map_err(|e| e.to_string())?;
        for c in &plan.chunks {
            check(c.end_s - c.start_s <= size + 1e-9, || format!("case {case}: chunk {c:?} > {size}"))?;
        }
        // speech coverage, frame by frame
        for s in &segments {
            let (a, b) = (track.frame_of(s.start_s), track.frame_of(s.end_s));
            for f in a..b {
                let t = (f as f64 + 0.5) / rate;
                check(plan.chunks.iter().any(|c| c.start_s <= t && t <= c.end_s), || {
                    format!("case {case}: speech frame {f} uncovered")
                })?;
            }
        }
        let part = ((params.min_split_part_s * rate).ceil() as usize).max(1);
        for d in &splits {
            let admissible = d.span_start + part..=d.span_end - part;
            let oracle = admissible.clone().fold(*admissible.start(), |b, i| if probs[i] < probs[b] { i } else { b });
            check(d.frame == oracle, || format!("case {case}: split at {} not argmin {oracle}", d.frame))?;
            splits_checked += 1;
        }
        let again = constrain_segments(&plan.chunks, &track, &params).map_err(|e| e.to_string())?;
        check(again.chunks == plan.chunks, || format!("case {case}: not idempotent"))?;
    }
    within(started, Duration::from_secs(30))?;
    Ok(format!("1000 tracks, {splits_checked} split points equal the brute-force argmin"))
}

// 4 -----------------------------------------------------------------------

fn criterion_4() -> Outcome {
    let plan = plan_long_audio_chunks(1700.0).map_err(|e| e.to_string())?;
    check(plan.chunks.len() == 27, || format!("{} chunks", plan.chunks.len()))?;
    check(plan.truncated_at_s == Some(1602.0), || format!("truncated at {:?}", plan.truncated_at_s))?;
    let last = plan.chunks.last().unwrap();
    check(last.end_s == 1602.0 && last.start_s == 1560.0, || format!("last chunk {last:?}"))?;
    for (i, c) in plan.chunks[..26].iter().enumerate() {
        check(c.start_s == 60.0 * i as f64 && c.end_s == 60.0 * (i + 1) as f64, || format!("chunk {i}: {c:?}"))?;
    }
    Ok("27 chunks of 60 s, last 1560-1602 s".into())
}

// 5 -----------------------------------------------------------------------

fn golden(name: &str) -> Result<String, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden").join(name);
    std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))
}

fn criterion_5() -> Outcome {
    let texts = [
        ("whisper-v2", "so today i will talk about speech translation"),
        ("whisper-v2-ft", "So today I will talk about speech translation."),
        ("phi-4", "So today, I'll talk about speech translation."),
        ("whisper-v3", "So today I will talk about speech translations."),
    ];
    let block = FusionBlock {
        talk_id: "t1".into(),
        chunk_range: (0, 0),
        per_system_texts: texts.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        rendered_prompt: String::new(),
    };
    let mut rendered: Vec<(&str, String)> = vec![(
        "fusion_4_systems.txt",
        build_fusion_prompt(&block, &default_system_labels(4)).map_err(|e| e.to_string())?,
    )];
    let mut ape = ApeRequest {
        source: "The model improves translation quality.".into(),
        mt: "Das Modell verbessert die Uebersetzungsqualitaet.".into(),
        context: vec![],
        target_lang: "de".into(),
    };
    rendered.push(("ape_no_context.txt", build_ape_prompt(&ape).map_err(|e| e.to_string())?));
    ape.context = vec![
        ("We study long talks.".into(), "Wir untersuchen lange Vortraege.".into()),
        ("They contain many sentences.".into(), "Sie enthalten viele Saetze.".into()),
    ];
    rendered.push(("ape_context_2.txt", build_ape_prompt(&ape).map_err(|e| e.to_string())?));

    let augment = [
        (
            AugmentationKind::Sqa,
            "transcript",
            "We present a cascade for long talks. It fuses several recognizers.",
            "German",
            "sqa_system.txt",
            "sqa_user_de.txt",
        ),
        (
            AugmentationKind::SsumTranslate,
            "abstract",
            "Speech translation of long talks is hard. We fuse hypotheses.",
            "Italian",
            "ssum_system.txt",
            "ssum_user_it.txt",
        ),
        (
            AugmentationKind::StTranslate,
            "text",
            "The results improve on all test sets.",
            "Chinese",
            "st_system.txt",
            "st_user_zh.txt",
        ),
    ];
    for (kind, key, value, lang, system_file, user_file) in augment {
        let args: BTreeMap<String, String> =
            [(key.to_string(), value.to_string()), ("lang".to_string(), lang.to_string())].into();
        let (system, user) = build_augmentation_prompt(kind, &args).map_err(|e| e.to_string())?;
        rendered.push((system_file, system));
        rendered.push((user_file, user));
    }
    for (file, text) in &rendered {
        check(*text == golden(file)?, || format!("{file} differs"))?;
    }
    Ok(format!("{} renderings byte-identical to goldens", rendered.len()))
}

// 6 -----------------------------------------------------------------------

struct Recorder(Mutex<Vec<String>>);

impl Completion for Recorder {
    fn complete(&self, prompt: &str, _params: &CompletionParams) -> Result<String, BackendError> {
        let mut prompts = self.0.lock().unwrap();
        prompts.push(prompt.to_string());
        Ok(format!("edited-{}<|im_end|>", prompts.len() - 1))
    }
}

fn sentences(n: usize, lang: &str) -> Vec<SentenceRecord> {
    (0..n)
        .map(|i| SentenceRecord {
            talk_id: "t".into(),
            index: i,
            source: format!("Source sentence {i}."),
            mt: Some(format!("Target sentence {i}.")),
            ape: None,
            lang: lang.into(),
        })
        .collect()
}

fn criterion_6() -> Outcome {
    let options = PosteditOptions::default();
    for c in [0, 1, 3, 5, 10, 15, 20] {
        let llm = Recorder(Mutex::new(Vec::new()));
        let outcome = postedit_document(&sentences(30, "de"), c, PosteditMode::ApeOffline, &llm, &options);
        let prompts = llm.0.into_inner().unwrap();
        check(prompts.len() == 30, || format!("c={c}: {} prompts", prompts.len()))?;
        for (i, p) in prompts.iter().enumerate() {
            let pairs = p.matches("\nEnglish:\n").count() - 1;
            check(pairs == c.min(i), || format!("c={c}, i={i}: {pairs} prior pairs"))?;
        }
        check(outcome.fallbacks.is_empty(), || format!("c={c}: fallbacks"))?;
    }
    let llm = Recorder(Mutex::new(Vec::new()));
    let doc = sentences(30, "zh");
    let outcome = postedit_document(&doc, 5, PosteditMode::ApeOffline, &llm, &options);
    check(llm.0.lock().unwrap().is_empty(), || "zh document reached the LLM".into())?;
    check(outcome.skipped, || "zh not reported as skipped".into())?;
    for (r, d) in outcome.records.iter().zip(&doc) {
        check(r.ape == d.mt, || format!("zh sentence {} changed", d.index))?;
    }
    Ok("min(c, i) prior pairs for c in {0,1,3,5,10,15,20}; zh untouched".into())
}

// 7 -----------------------------------------------------------------------

struct Tagger;

impl Translation for Tagger {
    fn translate(&self, source: &str, _src: &str, tgt: &str) -> Result<String, BackendError> {
        Ok(format!("[{tgt}] {source}"))
    }
}

fn criterion_7() -> Outcome {
    let mut rng = Pcg64::seed_from_u64(7);
    for case in 0..1000 {
        let n = below(&mut rng, 60);
        let pairs: Vec<ScoredPair> = (0..n)
            .map(|i| ScoredPair {
                source: format!("s{i}"),
                target: format!("t{i}"),
                // coarse scores force ties
                qe_score: below(&mut rng, 8) as f64 / 4.0,
                origin: format!("o{}", below(&mut rng, 3)),
            })
            .collect();
        let k = 1 + below(&mut rng, 70);
        let got = filter_top_k(pairs.clone(), k).map_err(|e| e.to_string())?;
        let mut oracle: Vec<(usize, &ScoredPair)> = pairs.iter().enumerate().collect();
        oracle.sort_by(|(ia, a), (ib, b)| {
            b.qe_score.total_cmp(&a.qe_score).then_with(|| a.origin.cmp(&b.origin)).then(ia.cmp(ib))
        });
        let oracle: Vec<ScoredPair> = oracle.into_iter().take(k).map(|(_, p)| p.clone()).collect();
        check(got == oracle, || format!("case {case}: top-{k} differs from full sort"))?;
    }

    let examples: Vec<QaExample> = (0..135)
        .map(|i| QaExample {
            segment_id: format!("seg{i}"),
            question: format!("q{i}"),
            answer: if i < 95 { format!("a{i}") } else { "N/A".into() },
            answerable: i < 95,
            lang: "en".into(),
        })
        .collect();
    let kept = balance_unanswerable(&examples, 0.05, 13).map_err(|e| e.to_string())?;
    let unanswerable = kept.iter().filter(|e| !e.answerable).count();
    check(unanswerable == 5 && kept.len() == 100, || format!("kept {unanswerable} of 40 unanswerable"))?;
    let share = unanswerable as f64 / kept.len() as f64;
    check((share - 0.05).abs() <= 1.0 / kept.len() as f64, || format!("share {share}"))?;

    let pairs: Vec<ScoredPair> = (0..500)
        .map(|i| ScoredPair {
            source: format!("source {i}"),
            target: format!("target {i}"),
            qe_score: 0.5,
            origin: "o".into(),
        })
        .collect();
    let run = || -> Result<Vec<u8>, String> {
        let s = make_ape_triplets(&pairs, 100, &Tagger, "en", "de", 42).map_err(|e| e.to_string())?;
        Ok(to_jsonl(&s.triplets))
    };
    check(run()? == run()?, || "APE triplet sampling not reproducible".into())?;
    check(sample_indices(10_000, 300, 9) == sample_indices(10_000, 300, 9), || "index sampling differs".into())?;
    check(balance_unanswerable(&examples, 0.05, 13).map_err(|e| e.to_string())? == kept, || {
        "balancing not reproducible".into()
    })?;
    Ok("top-k = full sort on 1000 instances; 95+40 keeps 5; seeded sampling reproducible".into())
}

// 8-10: end to end through the CLI -----------------------------------------

struct Workspace {
    dir: TempDir,
    texts: Vec<String>,
}

impl Workspace {
    fn new() -> Result<Self, String> {
        let dir = TempDir::new().map_err(|e| e.to_string())?;
        let mut lines = vec![r#"{"run_id": "accept"}"#.to_string()];
        let mut texts = Vec::new();
        for t in 0..2 {
            let text = (0..30)
                .map(|i| format!("In talk {t} sentence {i} explains how long recordings are translated."))
                .collect::<Vec<_>>()
                .join(" ");
            let audio = SyntheticAudio::from_text(&text, 50.0);
            let path = dir.path().join(format!("talk{t}.json"));
            audio.save(&path).map_err(|e| e.to_string())?;
            lines.push(
                serde_json::json!({
                    "talk_id": format!("talk{t}"),
                    "audio_path": path.display().to_string(),
                    "duration_s": audio.duration_s,
                    "source_lang": "en",
                    "target_langs": ["de"],
                })
                .to_string(),
            );
            texts.push(text);
        }
        std::fs::write(dir.path().join("manifest.jsonl"), lines.join("\n")).map_err(|e| e.to_string())?;
        let refs: Vec<String> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| serde_json::json!({"talk_id": format!("talk{i}"), "text": t}).to_string())
            .collect();
        std::fs::write(dir.path().join("refs.jsonl"), refs.join("\n")).map_err(|e| e.to_string())?;
        Ok(Self { dir, texts })
    }

    fn config(&self, name: &str, asr1: &str, llm: &str) -> Result<PathBuf, String> {
        let text = format!(
            r#"asr_system_ids = ["asr1", "asr2"]

[[backends]]
id = "vad"
kind = "vad"
endpoint = "mock:synth"

[[backends]]
id = "asr1"
kind = "asr"
endpoint = "{asr1}"

[[backends]]
id = "asr2"
kind = "asr"
endpoint = "mock:synth?drop_every=9"

[[backends]]
id = "llm"
kind = "llm"
endpoint = "{llm}"
backoff_base_s = 0.0

[[backends]]
id = "mt"
kind = "mt"
endpoint = "mock:identity"
"#
        );
        let path = self.dir.path().join(name);
        std::fs::write(&path, text).map_err(|e| e.to_string())?;
        Ok(path)
    }

    fn lfp(&self, config: &Path, out: &str, args: &[&str]) -> Result<(i32, String), String> {
        let output = Command::new(env!("CARGO_BIN_EXE_lfp"))
            .arg("--config")
            .arg(config)
            .arg("--manifest")
            .arg(self.dir.path().join("manifest.jsonl"))
            .arg("--out")
            .arg(self.dir.path().join(out))
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        let code = output.status.code().unwrap_or(-1);
        let stdout = String::from_utf8_lossy(&output.stdout).into_owned();
        if code == 1 {
            return Err(format!("lfp {args:?} failed: {}", String::from_utf8_lossy(&output.stderr)));
        }
        Ok((code, stdout))
    }

    fn json(&self, out: &str, file: &str) -> Result<serde_json::Value, String> {
        let runs = self.dir.path().join(out);
        let entry = std::fs::read_dir(&runs)
            .map_err(|e| e.to_string())?
            .filter_map(Result::ok)
            .find(|e| e.path().join(file).exists())
            .ok_or_else(|| format!("no {file} under {}", runs.display()))?;
        let text = std::fs::read_to_string(entry.path().join(file)).map_err(|e| e.to_string())?;
        serde_json::from_str(&text).map_err(|e| e.to_string())
    }

    /// Final artifact bytes by talk, read through the report's output keys.
    fn finals(&self, out: &str) -> Result<BTreeMap<String, Vec<u8>>, String> {
        let report = self.json(out, "report.json")?;
        let mut finals = BTreeMap::new();
        for o in report["outputs"].as_array().ok_or("report has no outputs")? {
            let key = &o["artifact_key"];
            let path = self
                .dir
                .path()
                .join(out)
                .join("artifacts")
                .join(key["run_id"].as_str().unwrap_or_default())
                .join(key["stage"].as_str().unwrap_or_default())
                .join(key["talk_id"].as_str().unwrap_or_default())
                .join(key["variant"].as_str().unwrap_or_default());
            let bytes = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            finals.insert(o["talk_id"].as_str().unwrap_or_default().to_string(), bytes);
        }
        Ok(finals)
    }
}

fn criterion_8() -> Outcome {
    let started = Instant::now();
    let ws = Workspace::new()?;
    let config = ws.config("ok.toml", "mock:synth", "mock:echo")?;

    let (code, _) = ws.lfp(&config, "a", &["run-offline"])?;
    check(code == 0, || format!("cold run exit {code}"))?;
    let cold = ws.finals("a")?;
    check(cold.len() == 2, || format!("{} final artifacts", cold.len()))?;
    let cold_report = ws.json("a", "report.json")?;

    let (code, _) = ws.lfp(&config, "a", &["run-offline"])?;
    check(code == 0, || format!("repeat run exit {code}"))?;
    let calls = ws.json("a", "stats.json")?["backend_calls"].as_u64();
    check(calls == Some(0), || format!("repeat run made {calls:?} backend calls"))?;
    check(ws.finals("a")? == cold, || "repeat run changed final artifacts".into())?;
    let strip = |mut v: serde_json::Value| {
        for s in v["stages"].as_array_mut().into_iter().flatten() {
            s["timing_ms"] = 0.into();
        }
        v
    };
    check(strip(ws.json("a", "report.json")?) == strip(cold_report), || "repeat report differs".into())?;

    // resume a run interrupted after transcription
    let (code, _) = ws.lfp(&config, "b", &["transcribe"])?;
    check(code == 0, || format!("partial run exit {code}"))?;
    let (code, _) = ws.lfp(&config, "b", &["run-offline", "--resume"])?;
    check(code == 0, || format!("resumed run exit {code}"))?;
    check(ws.finals("b")? == cold, || "resumed run differs from cold run".into())?;
    within(started, Duration::from_secs(10))?;
    Ok(format!("cold, repeat (0 backend calls) and resumed runs identical in {:?}", started.elapsed()))
}

fn criterion_9() -> Outcome {
    let ws = Workspace::new()?;
    let config = ws.config("grid.toml", "mock:synth?boundary_errors=1", "mock:echo")?;
    let (code, table) = ws.lfp(
        &config,
        "grid",
        &["grid-chunks", "--refs", &ws.dir.path().join("refs.jsonl").display().to_string(), "--sizes", "5,10,15,20,25"],
    )?;
    check(code == 0, || format!("exit {code}"))?;
    let lines: Vec<&str> = table.lines().collect();
    check(lines.len() == 6, || format!("expected header + 5 rows:\n{table}"))?;
    check(lines[0].starts_with("Chunk Size"), || format!("header `{}`", lines[0]))?;
    let rows: Vec<Vec<&str>> = lines[1..].iter().map(|l| l.split('\t').collect()).collect();
    let labels: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    check(labels == ["5", "10", "15", "20", "25"], || format!("row labels {labels:?}"))?;
    for col in 1..rows[0].len() {
        let values: Vec<f64> = rows
            .iter()
            .map(|r| r[col].trim_end_matches('*').parse::<f64>().map_err(|e| e.to_string()))
            .collect::<Result<_, _>>()?;
        check(values.windows(2).all(|w| w[1] <= w[0]), || format!("column {col} not monotone: {values:?}"))?;
        check(values[0] > values[4], || format!("column {col} flat: {values:?}"))?;
        check(rows[4][col].ends_with('*'), || format!("best row not flagged in column {col}"))?;
        let flagged = rows.iter().filter(|r| r[col].ends_with('*')).count();
        let best = values.iter().filter(|v| **v == values[4]).count();
        check(flagged == best, || format!("column {col}: {flagged} flags for {best} best values"))?;
    }
    check(ws.texts.len() == rows[0].len() - 1, || "one column per talk".into())?;
    Ok("5-row table, WER non-increasing in chunk size, best row flagged".into())
}

fn criterion_10() -> Outcome {
    let ws = Workspace::new()?;
    let config = ws.config("down.toml", "mock:synth", "mock:echo?fail=always")?;
    let (code, _) = ws.lfp(&config, "down", &["run-offline"])?;
    check(code == 2, || format!("exit code {code}, expected 2"))?;
    let report = ws.json("down", "report.json")?;
    let talks = report["talks"].as_array().ok_or("no talks")?;
    check(talks.len() == 2, || format!("{} talks reported", talks.len()))?;
    for t in talks {
        check(t["status"] == "fallback", || format!("talk {} is {}", t["talk_id"], t["status"]))?;
    }
    let summary = &report["summary"];
    check(summary["fallback"] == 2 && summary["failed"] == 0, || format!("summary {summary}"))?;
    let finals = ws.finals("down")?;
    check(finals.len() == 2 && finals.values().all(|b| !b.is_empty()), || "a talk is missing from outputs".into())?;
    Ok("every talk completes with fallback status, exit code 2".into())
}

fn main() {
    // libtest-style flags passed by `cargo test` are ignored
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("WER oracle equivalence", criterion_1),
        ("chrF2 hand-derived case", criterion_2),
        ("segmentation properties", criterion_3),
        ("long-audio plan", criterion_4),
        ("prompt goldens", criterion_5),
        ("post-editing context law", criterion_6),
        ("curation", criterion_7),
        ("end-to-end determinism", criterion_8),
        ("grid-search harness", criterion_9),
        ("fault tolerance", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(reason) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {reason}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
