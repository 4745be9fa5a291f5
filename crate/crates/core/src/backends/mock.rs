//! In-process mock backends. Endpoint syntax: `mock:<name>?key=value&...`.
//!
//! Shared keys: `fail=<timeout|remote|protocol|integrity>` fails every call,
//! `fail_first=N` fails the first N calls with a remote error, `delay_ms=N`
//! sleeps before answering.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde_json::{json, Value};

use super::synthetic::SyntheticAudio;
use super::{AttemptError, AsrRequest, BackendKind, ErrorCategory};
use crate::corpus::sha256_hex;

pub const MOCK_SCHEME: &str = "mock:";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Variant {
    AsrHash,
    AsrSynth,
    MtIdentity,
    MtReverse,
    LlmEcho,
    LlmSqa,
    QeLengthRatio,
    VadSine,
    VadSynth,
    TtsStub,
}

pub(crate) struct MockTransport {
    variant: Variant,
    params: BTreeMap<String, String>,
    calls: AtomicU64,
}

const VOCABULARY: &[&str] = &[
    "the", "model", "speech", "we", "translate", "audio", "results", "show", "that", "long", "form", "context",
    "system", "improves", "quality", "data", "training", "our", "approach", "is", "simple", "and", "robust", "to",
    "noise", "in", "talks", "lectures", "a", "new", "method", "for",
];

impl MockTransport {
    pub fn parse(kind: BackendKind, rest: &str) -> Result<Self, String> {
        let (name, query) = rest.split_once('?').unwrap_or((rest, ""));
        let variant = match (kind, name) {
            (BackendKind::Asr, "hash" | "") => Variant::AsrHash,
            (BackendKind::Asr, "synth") => Variant::AsrSynth,
            (BackendKind::Mt, "identity" | "") => Variant::MtIdentity,
            (BackendKind::Mt, "reverse") => Variant::MtReverse,
            (BackendKind::Llm, "echo" | "") => Variant::LlmEcho,
            (BackendKind::Llm, "sqa") => Variant::LlmSqa,
            (BackendKind::Qe, "length_ratio" | "") => Variant::QeLengthRatio,
            (BackendKind::Vad, "sine" | "") => Variant::VadSine,
            (BackendKind::Vad, "synth") => Variant::VadSynth,
            (BackendKind::Tts, "stub" | "") => Variant::TtsStub,
            _ => return Err(format!("no `{name}` mock for {kind} backends")),
        };
        let mut params = BTreeMap::new();
        for pair in query.split('&').filter(|p| !p.is_empty()) {
            let (k, v) = pair.split_once('=').unwrap_or((pair, ""));
            params.insert(k.to_string(), v.to_string());
        }
        let transport = Self {
            variant,
            params,
            calls: AtomicU64::new(0),
        };
        if let Some(fail) = transport.params.get("fail") {
            failure_category(fail)?;
        }
        for key in ["fail_first", "delay_ms", "drop_every", "boundary_errors", "sub_every"] {
            transport.usize_param(key)?;
        }
        for key in ["duration_s", "rate", "period_s"] {
            transport.f64_param(key)?;
        }
        Ok(transport)
    }

    fn usize_param(&self, key: &str) -> Result<Option<usize>, String> {
        self.params
            .get(key)
            .map(|v| v.parse().map_err(|_| format!("mock parameter `{key}` must be an integer")))
            .transpose()
    }

    fn f64_param(&self, key: &str) -> Result<Option<f64>, String> {
        self.params
            .get(key)
            .map(|v| match v.parse::<f64>() {
                Ok(x) if x > 0.0 && x.is_finite() => Ok(x),
                _ => Err(format!("mock parameter `{key}` must be a positive number")),
            })
            .transpose()
    }

    fn param_usize(&self, key: &str) -> usize {
        self.usize_param(key).ok().flatten().unwrap_or(0)
    }

    pub fn handle(&self, body: &Value) -> Result<Value, AttemptError> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
        let delay = self.param_usize("delay_ms");
        if delay > 0 {
            std::thread::sleep(Duration::from_millis(delay as u64));
        }
        if let Some(fail) = self.params.get("fail") {
            let category = failure_category(fail).expect("validated at parse");
            return Err(AttemptError::new(category, format!("scripted {fail} failure")));
        }
        if call <= self.param_usize("fail_first") as u64 {
            return Err(AttemptError::new(ErrorCategory::Remote, format!("scripted failure on call {call}")));
        }
        let field = |name: &str| -> Result<&str, AttemptError> {
            body.get(name)
                .and_then(Value::as_str)
                .ok_or_else(|| AttemptError::new(ErrorCategory::Protocol, format!("request lacks `{name}`")))
        };
        match self.variant {
            Variant::AsrHash | Variant::AsrSynth => {
                let request: AsrRequest = serde_json::from_value(body.clone())
                    .map_err(|e| AttemptError::new(ErrorCategory::Protocol, e.to_string()))?;
                let text = if self.variant == Variant::AsrHash {
                    self.asr_hash(&request)
                } else {
                    self.asr_synth(&request)?
                };
                Ok(json!({ "text": text }))
            }
            Variant::MtIdentity => Ok(json!({ "text": field("source")? })),
            Variant::MtReverse => {
                let words: Vec<&str> = field("source")?.split_whitespace().rev().collect();
                Ok(json!({ "text": words.join(" ") }))
            }
            Variant::LlmEcho => Ok(json!({ "text": echo(field("prompt")?) })),
            Variant::LlmSqa => Ok(json!({ "text": sqa_answer(field("prompt")?) })),
            Variant::QeLengthRatio => Ok(json!({ "score": length_ratio(field("source")?, field("target")?) })),
            Variant::VadSine => {
                let rate = self.f64_param("rate").ok().flatten().unwrap_or(50.0);
                let duration = self.f64_param("duration_s").ok().flatten().unwrap_or(60.0);
                let period = self.f64_param("period_s").ok().flatten().unwrap_or(6.0);
                Ok(json!({ "frame_rate_hz": rate, "probs": sine_profile(field("audio_path")?, duration, rate, period) }))
            }
            Variant::VadSynth => {
                let audio = load_fixture(field("audio_path")?)?;
                Ok(json!({ "frame_rate_hz": audio.frame_rate_hz, "probs": audio.speech_probs() }))
            }
            Variant::TtsStub => {
                let dir = self
                    .params
                    .get("dir")
                    .map(PathBuf::from)
                    .unwrap_or_else(|| std::env::temp_dir().join("lfp-tts"));
                let path = write_stub(&dir, field("text")?, field("voice")?)?;
                Ok(json!({ "audio_path": path }))
            }
        }
    }

    fn spans(request: &AsrRequest) -> Vec<(f64, f64)> {
        request.chunks.clone().unwrap_or_else(|| vec![(request.start_s, request.end_s)])
    }

    fn asr_hash(&self, request: &AsrRequest) -> String {
        let mut words = Vec::new();
        for (start, end) in Self::spans(request) {
            let seed = format!("{}\n{start:.3}\n{end:.3}\n{}", request.audio_path, request.lang);
            let count = (((end - start) * 2.0).round() as usize).max(1);
            let mut block = sha256_hex(seed.as_bytes()).into_bytes();
            for i in 0..count {
                if i % 32 == 0 && i > 0 {
                    block = sha256_hex(&block).into_bytes();
                }
                let byte = block[i % 32] as usize + block[(i + 7) % 32] as usize;
                words.push(VOCABULARY[byte % VOCABULARY.len()]);
            }
        }
        words.join(" ")
    }

    /// Reads words back from a synthetic fixture. `drop_every=N` drops every
    /// Nth word of the talk, `sub_every=N` replaces every Nth word, and
    /// `boundary_errors=N` garbles the first N words of every requested span,
    /// so more fragments mean more errors.
    fn asr_synth(&self, request: &AsrRequest) -> Result<String, AttemptError> {
        let audio = load_fixture(&request.audio_path)?;
        let drop_every = self.param_usize("drop_every");
        let sub_every = self.param_usize("sub_every");
        let boundary = self.param_usize("boundary_errors");
        let mut out = Vec::new();
        for (start, end) in Self::spans(request) {
            let mut in_span = 0;
            for (index, w) in audio.words.iter().enumerate() {
                let mid = (w.start + w.end) / 2.0;
                if mid < start || mid >= end {
                    continue;
                }
                let n = index + 1;
                if drop_every > 0 && n % drop_every == 0 {
                    continue;
                }
                let text = if in_span < boundary || (sub_every > 0 && n % sub_every == 0) {
                    "uh"
                } else {
                    w.text.as_str()
                };
                in_span += 1;
                out.push(text);
            }
        }
        if let Some(instruction) = &request.instruction {
            // whole-audio tasks answer with a bounded excerpt of the content
            let excerpt: Vec<&str> = out.iter().copied().take(40).collect();
            log::debug!("mock asr instruction: {instruction}");
            return Ok(excerpt.join(" "));
        }
        Ok(out.join(" "))
    }
}

fn failure_category(name: &str) -> Result<ErrorCategory, String> {
    match name {
        "timeout" => Ok(ErrorCategory::Timeout),
        "remote" | "always" => Ok(ErrorCategory::Remote),
        "protocol" => Ok(ErrorCategory::Protocol),
        "integrity" => Ok(ErrorCategory::Integrity),
        other => Err(format!("unknown mock failure `{other}`")),
    }
}

fn load_fixture(path: &str) -> Result<SyntheticAudio, AttemptError> {
    SyntheticAudio::load(Path::new(path)).map_err(|e| AttemptError::new(ErrorCategory::Remote, e))
}

fn marker_label(label: &str) -> bool {
    let mut chars = label.chars();
    matches!(chars.next(), Some(c) if c.is_uppercase())
        && label.len() <= 40
        && chars.all(|c| c.is_alphanumeric() || c == ' ' || c == '-')
}

/// The content after the last labelled marker that carries content, either
/// inline (`System3: text`) or on the following lines (`German:\ntext`).
pub fn echo(prompt: &str) -> String {
    let mut last = String::new();
    let mut pending: Option<Vec<&str>> = None;
    let flush = |pending: &mut Option<Vec<&str>>, last: &mut String| {
        if let Some(lines) = pending.take() {
            let text = lines.join("\n").trim().to_string();
            if !text.is_empty() {
                *last = text;
            }
        }
    };
    for line in prompt.lines() {
        let trimmed = line.trim_end();
        if trimmed.starts_with("<|") {
            flush(&mut pending, &mut last);
            continue;
        }
        if let Some(label) = trimmed.strip_suffix(':') {
            if marker_label(label) {
                flush(&mut pending, &mut last);
                pending = Some(Vec::new());
                continue;
            }
        }
        if let Some((label, content)) = trimmed.split_once(": ") {
            if marker_label(label) {
                flush(&mut pending, &mut last);
                if !content.trim().is_empty() {
                    last = content.trim().to_string();
                }
                continue;
            }
        }
        if let Some(lines) = pending.as_mut() {
            lines.push(line);
        }
    }
    flush(&mut pending, &mut last);
    last
}

fn sqa_answer(prompt: &str) -> String {
    let digest = sha256_hex(prompt.as_bytes());
    let tag = &digest[..6];
    format!(
        "Here you go:\n{{\n  \"questions\": [\n    {{\"q1\": \"What is discussed in part {tag}?\", \"a1\": \"The talk discusses its main method.\"}},\n    {{\"q2\": \"What does the method improve?\", \"a2\": \"It improves translation quality.\"}},\n    {{\"q3\": \"Which dataset was released in {tag}?\", \"a3\": \"N/A\"}}\n  ]\n}}"
    )
}

pub fn length_ratio(source: &str, target: &str) -> f64 {
    let s = source.chars().count() as f64;
    let t = target.chars().count() as f64;
    if s == 0.0 && t == 0.0 {
        return 1.0;
    }
    if s == 0.0 || t == 0.0 {
        return 0.0;
    }
    (s / t).min(t / s)
}

fn sine_profile(seed: &str, duration_s: f64, rate: f64, period_s: f64) -> Vec<f64> {
    let digest = sha256_hex(seed.as_bytes());
    let phase = u64::from_str_radix(&digest[..8], 16).unwrap_or(0) as f64 / u32::MAX as f64;
    let n = (duration_s * rate).ceil() as usize;
    (0..n)
        .map(|i| {
            let x = std::f64::consts::TAU * (i as f64 / (rate * period_s) + phase);
            // rounded so results match across libm implementations
            ((0.5 + 0.5 * x.sin()) * 1e4).round() / 1e4
        })
        .collect()
}

fn write_stub(dir: &Path, text: &str, voice: &str) -> Result<String, AttemptError> {
    let digest = sha256_hex(format!("{voice}\0{text}").as_bytes());
    let path = dir.join(format!("{}.wav", &digest[..16]));
    let io_err = |e: std::io::Error| AttemptError::new(ErrorCategory::Remote, format!("stub write failed: {e}"));
    std::fs::create_dir_all(dir).map_err(io_err)?;
    let bytes = format!("LFP-STUB-AUDIO\n{}\n", sha256_hex(text.as_bytes()));
    std::fs::write(&path, bytes).map_err(io_err)?;
    Ok(path.to_string_lossy().into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{Backend, BackendSpec, CompletionParams};

    fn backend(kind: BackendKind, endpoint: &str) -> Backend {
        Backend::new(BackendSpec::new("m", kind, endpoint)).unwrap()
    }

    #[test]
    fn hash_asr_is_deterministic() {
        let b = backend(BackendKind::Asr, "mock:hash");
        let req = AsrRequest::span("talk.wav", 0.0, 5.0, "en");
        let first = b.transcribe(&req).unwrap().text;
        assert_eq!(first, b.transcribe(&req).unwrap().text);
        assert_eq!(first.split_whitespace().count(), 10);
        let other = b.transcribe(&AsrRequest::span("talk.wav", 5.0, 10.0, "en")).unwrap().text;
        assert_ne!(first, other);
    }

    #[test]
    fn mt_mocks() {
        assert_eq!(backend(BackendKind::Mt, "mock:identity").translate("a b c", "en", "de").unwrap(), "a b c");
        assert_eq!(backend(BackendKind::Mt, "mock:reverse").translate("a b  c", "en", "de").unwrap(), "c b a");
    }

    #[test]
    fn echo_returns_last_marked_content() {
        assert_eq!(echo("Header.\n\nSystem1: one\nSystem2: two\n\nPost-Edited Transcript: \n"), "two");
        let ape = "<|im_start|>user\nPost-Edit the German Translation of the English sentence.\nEnglish:\nHi\nGerman:\nHallo\n<|im_end|>\n<|im_start|>assistant\nPost-Edited German:\n";
        assert_eq!(echo(ape), "Hallo");
        let b = backend(BackendKind::Llm, "mock:echo");
        assert_eq!(b.complete(ape, &CompletionParams::default()).unwrap(), "Hallo");
    }

    #[test]
    fn qe_length_ratio() {
        let b = backend(BackendKind::Qe, "mock:length_ratio");
        assert_eq!(b.estimate_quality("abcd", "abcd").unwrap(), 1.0);
        assert_eq!(b.estimate_quality("ab", "abcd").unwrap(), 0.5);
        assert_eq!(length_ratio("", ""), 1.0);
    }

    #[test]
    fn sine_vad_is_deterministic_and_bounded() {
        let b = backend(BackendKind::Vad, "mock:sine?duration_s=10&rate=20");
        let a = b.detect_speech("x.wav", "t1").unwrap();
        assert_eq!(a.probs.len(), 200);
        assert_eq!(a, b.detect_speech("x.wav", "t1").unwrap());
        assert!(a.probs.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn tts_stub_hashes_text() {
        let dir = tempfile::tempdir().unwrap();
        let endpoint = format!("mock:stub?dir={}", dir.path().display());
        let b = backend(BackendKind::Tts, &endpoint);
        let path = b.synthesize("hello", "v1").unwrap();
        assert_eq!(path, b.synthesize("hello", "v1").unwrap());
        let bytes = std::fs::read_to_string(&path).unwrap();
        assert!(bytes.contains(&sha256_hex(b"hello")));
        assert_eq!(b.synthesize("  ", "v1").unwrap_err().category, ErrorCategory::Precondition);
    }

    #[test]
    fn synth_asr_injects_boundary_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        SyntheticAudio::from_text("one two three. four five six.", 50.0).save(&path).unwrap();
        let p = path.to_str().unwrap();
        let clean = backend(BackendKind::Asr, "mock:synth");
        assert_eq!(clean.transcribe(&AsrRequest::span(p, 0.0, 10.0, "en")).unwrap().text, "one two three. four five six.");
        let noisy = backend(BackendKind::Asr, "mock:synth?boundary_errors=1");
        assert_eq!(noisy.transcribe(&AsrRequest::span(p, 0.0, 1.55, "en")).unwrap().text, "uh two three.");
        let dropping = backend(BackendKind::Asr, "mock:synth?drop_every=2");
        assert_eq!(dropping.transcribe(&AsrRequest::span(p, 0.0, 10.0, "en")).unwrap().text, "one three. five");
    }

    #[test]
    fn synth_vad_rejects_missing_fixture() {
        let b = backend(BackendKind::Vad, "mock:synth");
        assert!(b.detect_speech("/nonexistent/x.json", "t").is_err());
    }
}
