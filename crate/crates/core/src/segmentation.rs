//! VAD frame tracks to speech segments, and speech segments to
//! length-constrained chunk plans.
//!
//! All arithmetic happens on integer frame indices. Frame `i` spans
//! `[i / rate, (i + 1) / rate)`, so a cut at frame `i` lands at `i / rate`
//! seconds and the right-hand part starts with frame `i`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default cap on long-form input for the whole-audio tasks (26.7 minutes).
pub const LONG_AUDIO_CAP_S: f64 = 1602.0;
/// Default chunk length for the whole-audio tasks.
pub const LONG_AUDIO_CHUNK_S: f64 = 60.0;

const EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeechFrameTrack {
    pub talk_id: String,
    pub frame_rate_hz: f64,
    pub probs: Vec<f64>,
}

impl SpeechFrameTrack {
    pub fn new(talk_id: impl Into<String>, frame_rate_hz: f64, probs: Vec<f64>) -> Result<Self, SegmentationError> {
        let track = Self {
            talk_id: talk_id.into(),
            frame_rate_hz,
            probs,
        };
        track.validate()?;
        Ok(track)
    }

    pub fn validate(&self) -> Result<(), SegmentationError> {
        if self.probs.is_empty() {
            return Err(SegmentationError::EmptyTrack);
        }
        if !(self.frame_rate_hz > 0.0) || !self.frame_rate_hz.is_finite() {
            return Err(SegmentationError::InvalidTrack(format!(
                "frame rate must be positive, got {}",
                self.frame_rate_hz
            )));
        }
        if let Some((i, p)) = self
            .probs
            .iter()
            .enumerate()
            .find(|(_, p)| !(0.0..=1.0).contains(*p))
        {
            return Err(SegmentationError::InvalidTrack(format!(
                "probability {p} at frame {i} is outside [0, 1]"
            )));
        }
        Ok(())
    }

    pub fn duration_s(&self) -> f64 {
        self.probs.len() as f64 / self.frame_rate_hz
    }

    pub fn time_of(&self, frame: usize) -> f64 {
        frame as f64 / self.frame_rate_hz
    }

    /// Nearest frame boundary for a time in seconds.
    pub fn frame_of(&self, seconds: f64) -> usize {
        (seconds * self.frame_rate_hz).round().max(0.0) as usize
    }

    fn min_prob(&self, start: usize, end: usize) -> f64 {
        self.probs[start..end].iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// A time-stamped speech span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub talk_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub min_conf: f64,
}

impl Segment {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkPolicy {
    Offline25,
    IfAsr20,
    IfSt25,
    IfQa60,
    FixedWindow,
}

impl ChunkPolicy {
    /// Default maximum chunk duration for the policy.
    pub fn default_max_s(self) -> Option<f64> {
        match self {
            ChunkPolicy::Offline25 | ChunkPolicy::IfSt25 => Some(25.0),
            ChunkPolicy::IfAsr20 => Some(20.0),
            ChunkPolicy::IfQa60 => Some(LONG_AUDIO_CHUNK_S),
            ChunkPolicy::FixedWindow => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ChunkPolicy::Offline25 => "offline25",
            ChunkPolicy::IfAsr20 => "if_asr20",
            ChunkPolicy::IfSt25 => "if_st25",
            ChunkPolicy::IfQa60 => "if_qa60",
            ChunkPolicy::FixedWindow => "fixed_window",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub talk_id: String,
    pub chunks: Vec<Segment>,
    pub policy: ChunkPolicy,
    pub truncated_at_s: Option<f64>,
    /// Maximum chunk duration the plan was built under.
    pub max_chunk_s: Option<f64>,
}

/// One line of the chunk-plan JSONL artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ChunkLine {
    talk_id: String,
    start_s: f64,
    end_s: f64,
    min_conf: f64,
    policy: ChunkPolicy,
    truncated_at_s: Option<f64>,
    #[serde(default)]
    max_chunk_s: Option<f64>,
}

impl ChunkPlan {
    pub fn with_talk_id(mut self, talk_id: &str) -> Self {
        self.talk_id = talk_id.to_string();
        for chunk in &mut self.chunks {
            chunk.talk_id = talk_id.to_string();
        }
        self
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let lines: Vec<ChunkLine> = self
            .chunks
            .iter()
            .map(|c| ChunkLine {
                talk_id: c.talk_id.clone(),
                start_s: c.start_s,
                end_s: c.end_s,
                min_conf: c.min_conf,
                policy: self.policy,
                truncated_at_s: self.truncated_at_s,
                max_chunk_s: self.max_chunk_s,
            })
            .collect();
        crate::corpus::to_jsonl(&lines)
    }

    /// Parses a chunk-plan artifact. `talk_id` and `policy` are used when the
    /// artifact is empty (a talk without speech).
    pub fn from_jsonl(bytes: &[u8], talk_id: &str, policy: ChunkPolicy) -> Result<Self, serde_json::Error> {
        let lines: Vec<ChunkLine> = crate::corpus::from_jsonl(bytes)?;
        let Some(first) = lines.first() else {
            return Ok(ChunkPlan {
                talk_id: talk_id.to_string(),
                chunks: Vec::new(),
                policy,
                truncated_at_s: None,
                max_chunk_s: policy.default_max_s(),
            });
        };
        Ok(ChunkPlan {
            talk_id: first.talk_id.clone(),
            policy: first.policy,
            truncated_at_s: first.truncated_at_s,
            max_chunk_s: first.max_chunk_s,
            chunks: lines
                .into_iter()
                .map(|l| Segment {
                    talk_id: l.talk_id,
                    start_s: l.start_s,
                    end_s: l.end_s,
                    min_conf: l.min_conf,
                })
                .collect(),
        })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SegmentationError {
    #[error("speech frame track is empty")]
    EmptyTrack,
    #[error("invalid speech frame track: {0}")]
    InvalidTrack(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("segment {index} is inconsistent with the track: {reason}")]
    Inconsistent { index: usize, reason: String },
    #[error("no admissible split point in [{start_s}, {end_s})")]
    NoAdmissibleSplit { start_s: f64, end_s: f64 },
}

/// Thresholds for turning frame probabilities into speech runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hysteresis {
    pub on_threshold: f64,
    pub off_threshold: f64,
    pub min_speech_s: f64,
    pub min_gap_s: f64,
}

impl Default for Hysteresis {
    fn default() -> Self {
        Self {
            on_threshold: 0.6,
            off_threshold: 0.4,
            min_speech_s: 0.25,
            min_gap_s: 0.1,
        }
    }
}

/// Hysteresis speech detection over a frame track.
///
/// A run opens at the first frame with `prob >= on_threshold` and closes at
/// the first later frame with `prob < off_threshold`. Runs shorter than
/// `min_speech_s` are dropped, then gaps shorter than `min_gap_s` between the
/// survivors are bridged.
pub fn frames_to_segments(track: &SpeechFrameTrack, params: &Hysteresis) -> Result<Vec<Segment>, SegmentationError> {
    track.validate()?;
    let Hysteresis {
        on_threshold: on,
        off_threshold: off,
        min_speech_s,
        min_gap_s,
    } = *params;
    if !(0.0..=1.0).contains(&on) || !(0.0..=1.0).contains(&off) || on < off {
        return Err(SegmentationError::InvalidParams(format!(
            "thresholds must satisfy 0 <= off ({off}) <= on ({on}) <= 1"
        )));
    }
    if min_speech_s < 0.0 || min_gap_s < 0.0 {
        return Err(SegmentationError::InvalidParams(
            "minimum durations must be non-negative".into(),
        ));
    }

    let rate = track.frame_rate_hz;
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &p) in track.probs.iter().enumerate() {
        match open {
            None if p >= on => open = Some(i),
            Some(start) if p < off => {
                runs.push((start, i));
                open = None;
            }
            _ => {}
        }
    }
    if let Some(start) = open {
        runs.push((start, track.probs.len()));
    }

    runs.retain(|&(s, e)| (e - s) as f64 / rate + EPS >= min_speech_s);

    let mut bridged: Vec<(usize, usize)> = Vec::with_capacity(runs.len());
    for (s, e) in runs {
        match bridged.last_mut() {
            Some(last) if ((s - last.1) as f64 / rate) < min_gap_s - EPS => last.1 = e,
            _ => bridged.push((s, e)),
        }
    }

    Ok(bridged
        .into_iter()
        .map(|(s, e)| Segment {
            talk_id: track.talk_id.clone(),
            start_s: track.time_of(s),
            end_s: track.time_of(e),
            min_conf: track.min_prob(s, e),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintParams {
    pub policy: ChunkPolicy,
    pub chunk_size_s: f64,
    pub min_split_part_s: f64,
}

impl ConstraintParams {
    pub fn new(policy: ChunkPolicy, chunk_size_s: f64) -> Self {
        Self {
            policy,
            chunk_size_s,
            min_split_part_s: 1.0,
        }
    }

    pub fn for_policy(policy: ChunkPolicy) -> Self {
        Self::new(policy, policy.default_max_s().unwrap_or(25.0))
    }
}

/// A split performed while constraining, in frame indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitDecision {
    pub span_start: usize,
    pub span_end: usize,
    pub frame: usize,
}

#[derive(Debug, Clone, Copy)]
struct Span {
    start: usize,
    end: usize,
    min_conf: f64,
}

/// Splits overlong segments at their lowest-probability frame and greedily
/// merges neighbours (gaps included) up to the chunk size.
pub fn constrain_segments(
    segments: &[Segment],
    track: &SpeechFrameTrack,
    params: &ConstraintParams,
) -> Result<ChunkPlan, SegmentationError> {
    constrain_segments_traced(segments, track, params).map(|(plan, _)| plan)
}

/// [`constrain_segments`] that also reports every split it made.
pub fn constrain_segments_traced(
    segments: &[Segment],
    track: &SpeechFrameTrack,
    params: &ConstraintParams,
) -> Result<(ChunkPlan, Vec<SplitDecision>), SegmentationError> {
    track.validate()?;
    let ConstraintParams {
        policy,
        chunk_size_s,
        min_split_part_s,
    } = *params;
    if !(min_split_part_s >= 0.0) || !(chunk_size_s > 2.0 * min_split_part_s) {
        return Err(SegmentationError::InvalidParams(format!(
            "chunk size {chunk_size_s} must exceed twice the minimum split part {min_split_part_s}"
        )));
    }
    let rate = track.frame_rate_hz;
    let max_frames = (chunk_size_s * rate + EPS).floor() as usize;
    let min_part_frames = ((min_split_part_s * rate - EPS).ceil().max(0.0)) as usize;

    let spans = to_spans(segments, track)?;

    let mut splits = Vec::new();
    let mut atoms = Vec::with_capacity(spans.len());
    for span in spans {
        split_span(span, track, max_frames, min_part_frames, &mut atoms, &mut splits)?;
    }

    let mut merged: Vec<Span> = Vec::with_capacity(atoms.len());
    for atom in atoms {
        match merged.last_mut() {
            Some(cur) if atom.end - cur.start <= max_frames => {
                cur.end = atom.end;
                cur.min_conf = cur.min_conf.min(atom.min_conf);
            }
            _ => merged.push(atom),
        }
    }

    let plan = ChunkPlan {
        talk_id: track.talk_id.clone(),
        chunks: merged
            .into_iter()
            .map(|s| Segment {
                talk_id: track.talk_id.clone(),
                start_s: track.time_of(s.start),
                end_s: track.time_of(s.end),
                min_conf: s.min_conf,
            })
            .collect(),
        policy,
        truncated_at_s: None,
        max_chunk_s: Some(chunk_size_s),
    };
    Ok((plan, splits))
}

fn to_spans(segments: &[Segment], track: &SpeechFrameTrack) -> Result<Vec<Span>, SegmentationError> {
    let n = track.probs.len();
    let mut spans: Vec<Span> = Vec::with_capacity(segments.len());
    for (index, seg) in segments.iter().enumerate() {
        let inconsistent = |reason: String| SegmentationError::Inconsistent { index, reason };
        if !(seg.start_s >= 0.0) || !(seg.start_s < seg.end_s) {
            return Err(inconsistent(format!(
                "span [{}, {}) is empty or negative",
                seg.start_s, seg.end_s
            )));
        }
        let start = track.frame_of(seg.start_s);
        let end = track.frame_of(seg.end_s);
        if end > n {
            return Err(inconsistent(format!(
                "ends at {}s beyond the track duration {}s",
                seg.end_s,
                track.duration_s()
            )));
        }
        if start >= end {
            return Err(inconsistent("span shorter than one frame".into()));
        }
        if let Some(prev) = spans.last() {
            if start < prev.end {
                return Err(inconsistent("overlaps or precedes the previous segment".into()));
            }
        }
        spans.push(Span {
            start,
            end,
            min_conf: seg.min_conf,
        });
    }
    Ok(spans)
}

fn split_span(
    span: Span,
    track: &SpeechFrameTrack,
    max_frames: usize,
    min_part_frames: usize,
    out: &mut Vec<Span>,
    splits: &mut Vec<SplitDecision>,
) -> Result<(), SegmentationError> {
    if span.end - span.start <= max_frames {
        out.push(span);
        return Ok(());
    }
    let lo = span.start + min_part_frames.max(1);
    let hi = span.end.saturating_sub(min_part_frames.max(1));
    let mut best: Option<usize> = None;
    for i in lo..=hi {
        // strict `<` keeps the earliest frame on ties
        if best.is_none_or(|b| track.probs[i] < track.probs[b]) {
            best = Some(i);
        }
    }
    let Some(cut) = best.filter(|_| lo <= hi) else {
        return Err(SegmentationError::NoAdmissibleSplit {
            start_s: track.time_of(span.start),
            end_s: track.time_of(span.end),
        });
    };
    splits.push(SplitDecision {
        span_start: span.start,
        span_end: span.end,
        frame: cut,
    });
    let left = Span {
        start: span.start,
        end: cut,
        min_conf: track.min_prob(span.start, cut),
    };
    let right = Span {
        start: cut,
        end: span.end,
        min_conf: track.min_prob(cut, span.end),
    };
    split_span(left, track, max_frames, min_part_frames, out, splits)?;
    split_span(right, track, max_frames, min_part_frames, out, splits)
}

/// Uniform sliding windows with stride `window_s - overlap_s`; the last window
/// is clipped to the duration. Windows overlap by construction.
pub fn plan_fixed_windows(duration_s: f64, window_s: f64, overlap_s: f64) -> Result<ChunkPlan, SegmentationError> {
    if !(duration_s > 0.0) || !(overlap_s >= 0.0) || !(overlap_s < window_s) {
        return Err(SegmentationError::InvalidParams(format!(
            "need duration > 0 and 0 <= overlap ({overlap_s}) < window ({window_s})"
        )));
    }
    let stride = window_s - overlap_s;
    let mut chunks = Vec::new();
    for k in 0.. {
        let start = k as f64 * stride;
        let end = (start + window_s).min(duration_s);
        chunks.push(Segment {
            talk_id: String::new(),
            start_s: start,
            end_s: end,
            min_conf: 1.0,
        });
        if end >= duration_s - EPS {
            break;
        }
    }
    Ok(ChunkPlan {
        talk_id: String::new(),
        chunks,
        policy: ChunkPolicy::FixedWindow,
        truncated_at_s: None,
        max_chunk_s: Some(window_s),
    })
}

/// Consecutive 60-second chunks over at most the first 1602 seconds.
pub fn plan_long_audio_chunks(duration_s: f64) -> Result<ChunkPlan, SegmentationError> {
    plan_long_audio_chunks_with(duration_s, LONG_AUDIO_CHUNK_S, LONG_AUDIO_CAP_S)
}

pub fn plan_long_audio_chunks_with(duration_s: f64, chunk_s: f64, cap_s: f64) -> Result<ChunkPlan, SegmentationError> {
    if !(duration_s > 0.0) || !(chunk_s > 0.0) || !(cap_s > 0.0) {
        return Err(SegmentationError::InvalidParams(
            "duration, chunk length and cap must be positive".into(),
        ));
    }
    let truncated_at_s = (duration_s > cap_s).then_some(cap_s);
    let limit = duration_s.min(cap_s);
    let mut chunks = Vec::new();
    let mut k = 0usize;
    loop {
        let start = k as f64 * chunk_s;
        if start >= limit - EPS {
            break;
        }
        chunks.push(Segment {
            talk_id: String::new(),
            start_s: start,
            end_s: ((k + 1) as f64 * chunk_s).min(limit),
            min_conf: 1.0,
        });
        k += 1;
    }
    Ok(ChunkPlan {
        talk_id: String::new(),
        chunks,
        policy: ChunkPolicy::IfQa60,
        truncated_at_s,
        max_chunk_s: Some(chunk_s),
    })
}
