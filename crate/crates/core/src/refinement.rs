//! LLM hypothesis fusion and automatic post-editing (APE).

use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, Completion, CompletionParams};
use crate::document::{HypothesisSet, SentenceRecord};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RefinementError {
    #[error("{labels} labels for {systems} systems")]
    LabelCountMismatch { labels: usize, systems: usize },
    #[error("chunk {chunk} alone needs {tokens} tokens, over the budget of {budget}")]
    ChunkOverBudget { chunk: usize, tokens: usize, budget: usize },
    #[error("fusion needs at least one system and one chunk")]
    NothingToFuse,
    #[error("`{0}` must be non-empty")]
    EmptyInput(&'static str),
    #[error("model returned no usable text")]
    EmptyOutput,
}

const FUSION_HEADER: &str =
    "Post-Edit the Automatic Speech Recognition Transcripts from different systems understanding the context.";
const FUSION_ANSWER: &str = "Post-Edited Transcript:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionBlock {
    pub talk_id: String,
    /// Inclusive chunk index range.
    pub chunk_range: (usize, usize),
    /// `(system_id, text)` in configured system order.
    pub per_system_texts: Vec<(String, String)>,
    pub rendered_prompt: String,
}

pub fn default_system_labels(n: usize) -> Vec<String> {
    (1..=n).map(|k| format!("System{k}")).collect()
}

/// Renders the fusion prompt, ready for completion (no reference line).
pub fn build_fusion_prompt(block: &FusionBlock, system_labels: &[String]) -> Result<String, RefinementError> {
    render_fusion(&block.per_system_texts, system_labels)
}

fn render_fusion(texts: &[(String, String)], labels: &[String]) -> Result<String, RefinementError> {
    if labels.len() != texts.len() {
        return Err(RefinementError::LabelCountMismatch {
            labels: labels.len(),
            systems: texts.len(),
        });
    }
    let mut prompt = format!("{FUSION_HEADER}\n\nASR Transcripts:\n\n");
    for (label, (_, text)) in labels.iter().zip(texts) {
        prompt.push_str(&format!("{label}: {text}\n"));
    }
    prompt.push_str(&format!("\n{FUSION_ANSWER} \n"));
    Ok(prompt)
}

fn join_chunks<'a>(texts: impl Iterator<Item = &'a str>) -> String {
    texts.map(str::trim).filter(|t| !t.is_empty()).collect::<Vec<_>>().join(" ")
}

fn block_texts(chunks: &[HypothesisSet], system_ids: &[String]) -> Vec<(String, String)> {
    system_ids
        .iter()
        .map(|id| {
            let text = join_chunks(chunks.iter().map(|c| c.texts.get(id).map(String::as_str).unwrap_or("")));
            (id.clone(), text)
        })
        .collect()
}

/// Greedily packs consecutive chunks into blocks whose rendered prompt fits
/// `token_budget`. Systems missing from a chunk contribute no text.
pub fn plan_fusion_blocks(
    talk_id: &str,
    chunks: &[HypothesisSet],
    system_ids: &[String],
    token_budget: usize,
    count_tokens: &dyn Fn(&str) -> usize,
) -> Result<Vec<FusionBlock>, RefinementError> {
    if chunks.is_empty() || system_ids.is_empty() {
        return Err(RefinementError::NothingToFuse);
    }
    let labels = default_system_labels(system_ids.len());
    let render = |first: usize, last: usize| -> (Vec<(String, String)>, String) {
        let texts = block_texts(&chunks[first..=last], system_ids);
        let prompt = render_fusion(&texts, &labels).expect("labels match systems");
        (texts, prompt)
    };

    let mut blocks = Vec::new();
    let mut first = 0;
    while first < chunks.len() {
        let (mut texts, mut prompt) = render(first, first);
        let tokens = count_tokens(&prompt);
        if tokens > token_budget {
            return Err(RefinementError::ChunkOverBudget {
                chunk: first,
                tokens,
                budget: token_budget,
            });
        }
        let mut last = first;
        while last + 1 < chunks.len() {
            let (t, p) = render(first, last + 1);
            if count_tokens(&p) > token_budget {
                break;
            }
            texts = t;
            prompt = p;
            last += 1;
        }
        blocks.push(FusionBlock {
            talk_id: talk_id.to_string(),
            chunk_range: (first, last),
            per_system_texts: texts,
            rendered_prompt: prompt,
        });
        first = last + 1;
    }
    Ok(blocks)
}

/// Rough subword estimate: four tokens per three whitespace words, plus one
/// per Han character.
pub fn approx_tokens(text: &str) -> usize {
    let words = text.split_whitespace().count();
    let han = text.chars().filter(|&c| crate::document::is_han(c)).count();
    (words * 4).div_ceil(3) + han
}

fn strip_chat_markers(raw: &str) -> &str {
    let mut text = raw;
    for marker in ["<|im_end|>", "<|eot_id|>", "</s>"] {
        if let Some(pos) = text.find(marker) {
            text = &text[..pos];
        }
    }
    text
}

fn parse_after(raw: &str, header: &str) -> Result<String, RefinementError> {
    let text = strip_chat_markers(raw);
    let text = match text.rfind(header) {
        Some(pos) => &text[pos + header.len()..],
        None => text,
    };
    let text = text.trim();
    if text.is_empty() {
        return Err(RefinementError::EmptyOutput);
    }
    Ok(text.to_string())
}

pub fn parse_fusion_response(raw: &str) -> Result<String, RefinementError> {
    parse_after(raw, FUSION_ANSWER)
}

pub fn parse_ape_response(raw: &str, target_lang: &str) -> Result<String, RefinementError> {
    parse_after(raw, &format!("Post-Edited {}:", language_name(target_lang)))
}

/// English name for a language tag; unknown tags are returned unchanged.
pub fn language_name(tag: &str) -> &str {
    let primary = tag.split(['-', '_']).next().unwrap_or(tag);
    match primary.to_ascii_lowercase().as_str() {
        "en" => "English",
        "de" => "German",
        "it" => "Italian",
        "zh" => "Chinese",
        "fr" => "French",
        "es" => "Spanish",
        "ja" => "Japanese",
        "nl" => "Dutch",
        "pt" => "Portuguese",
        "ru" => "Russian",
        "ar" => "Arabic",
        "ko" => "Korean",
        _ => tag,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApeRequest {
    pub source: String,
    pub mt: String,
    /// `(source, edited)` pairs, oldest first.
    pub context: Vec<(String, String)>,
    pub target_lang: String,
}

const CHAT_USER: &str = "<|im_start|>user\n";
const CHAT_TURN: &str = "<|im_end|>\n<|im_start|>assistant\n";

/// Chat-template APE prompt; context pairs precede the current pair inside
/// the user turn.
pub fn build_ape_prompt(req: &ApeRequest) -> Result<String, RefinementError> {
    if req.source.trim().is_empty() {
        return Err(RefinementError::EmptyInput("source"));
    }
    if req.mt.trim().is_empty() {
        return Err(RefinementError::EmptyInput("mt"));
    }
    let target = language_name(&req.target_lang);
    let mut prompt = format!("{CHAT_USER}Post-Edit the {target} Translation of the English sentence.\n");
    for (source, edited) in req.context.iter().chain(std::iter::once(&(req.source.clone(), req.mt.clone()))) {
        prompt.push_str(&format!("English:\n{source}\n{target}:\n{edited}\n"));
    }
    prompt.push_str(&format!("{CHAT_TURN}Post-Edited {target}:\n"));
    Ok(prompt)
}

/// Single-text variant for transcripts and summaries: prior edited outputs
/// precede the current text.
pub fn build_monolingual_prompt(
    kind: &str,
    lang: &str,
    context: &[String],
    text: &str,
) -> Result<String, RefinementError> {
    if text.trim().is_empty() {
        return Err(RefinementError::EmptyInput("text"));
    }
    let lang = language_name(lang);
    let mut prompt = format!("{CHAT_USER}Post-Edit the {lang} {kind}.\n");
    for prior in context.iter().map(String::as_str).chain(std::iter::once(text)) {
        prompt.push_str(&format!("{kind}:\n{prior}\n"));
    }
    prompt.push_str(&format!("{CHAT_TURN}Post-Edited {kind}:\n"));
    Ok(prompt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteditMode {
    ApeOffline,
    IfAsr,
    IfSt,
    IfSsum,
}

impl PosteditMode {
    /// Label for the single-text template, used for records without MT.
    fn text_kind(self) -> &'static str {
        match self {
            PosteditMode::IfAsr => "Transcript",
            PosteditMode::IfSsum => "Summary",
            PosteditMode::ApeOffline | PosteditMode::IfSt => "Translation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteditOptions {
    /// Target languages left unedited.
    pub skip_langs: Vec<String>,
    pub params: CompletionParams,
}

impl Default for PosteditOptions {
    fn default() -> Self {
        Self {
            skip_langs: vec!["zh".to_string()],
            params: CompletionParams {
                max_tokens: 512,
                temperature: 0.0,
                stop: vec!["<|im_end|>".to_string()],
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteditOutcome {
    pub records: Vec<SentenceRecord>,
    /// Prompt sent for each record; empty when the document was skipped.
    pub prompts: Vec<String>,
    /// Indices of records that kept their unedited text after a failure.
    pub fallbacks: Vec<usize>,
    pub skipped: bool,
}

fn draft(record: &SentenceRecord) -> &str {
    record.mt.as_deref().unwrap_or(&record.source)
}

/// True when post-editing is disabled for `lang` (matched on the primary subtag).
pub fn postedit_disabled(lang: &str, skip: &[String]) -> bool {
    let primary = lang.split(['-', '_']).next().unwrap_or(lang);
    skip.iter().any(|s| s.eq_ignore_ascii_case(primary) || s.eq_ignore_ascii_case(lang))
}

/// Post-edits records in order. The context for record `i` is the last
/// `min(context_size, i)` edited outputs. Records with MT use the bilingual
/// template, others the single-text one. Failures keep the unedited text.
pub fn postedit_document(
    sentences: &[SentenceRecord],
    context_size: usize,
    mode: PosteditMode,
    llm: &dyn Completion,
    options: &PosteditOptions,
) -> PosteditOutcome {
    let mut records: Vec<SentenceRecord> = sentences.to_vec();
    let skipped = records.first().is_some_and(|r| postedit_disabled(&r.lang, &options.skip_langs));
    if skipped {
        for r in &mut records {
            r.ape = Some(draft(r).to_string());
        }
        return PosteditOutcome {
            records,
            prompts: Vec::new(),
            fallbacks: Vec::new(),
            skipped,
        };
    }

    let mut prompts = Vec::with_capacity(records.len());
    let mut fallbacks = Vec::new();
    for i in 0..records.len() {
        let window = &records[i.saturating_sub(context_size)..i];
        let record = &records[i];
        let monolingual = record.mt.is_none().then(|| mode.text_kind());
        let prompt = match monolingual {
            Some(kind) => {
                let context: Vec<String> = window.iter().map(|r| r.ape.clone().unwrap_or_default()).collect();
                build_monolingual_prompt(kind, &record.lang, &context, draft(record))
            }
            None => build_ape_prompt(&ApeRequest {
                source: record.source.clone(),
                mt: draft(record).to_string(),
                context: window
                    .iter()
                    .map(|r| (r.source.clone(), r.ape.clone().unwrap_or_default()))
                    .collect(),
                target_lang: record.lang.clone(),
            }),
        };
        let edited = match prompt {
            Ok(prompt) => {
                let result = llm
                    .complete(&prompt, &options.params)
                    .map_err(|e: BackendError| e.to_string())
                    .and_then(|raw| {
                        let header = match monolingual {
                            Some(kind) => format!("Post-Edited {kind}:"),
                            None => format!("Post-Edited {}:", language_name(&record.lang)),
                        };
                        parse_after(&raw, &header).map_err(|e| e.to_string())
                    });
                prompts.push(prompt);
                result
            }
            Err(e) => {
                prompts.push(String::new());
                Err(e.to_string())
            }
        };
        let text = match edited {
            Ok(text) => text,
            Err(reason) => {
                log::warn!("post-edit of {} sentence {} fell back to unedited text: {reason}", record.talk_id, record.index);
                fallbacks.push(i);
                draft(record).to_string()
            }
        };
        records[i].ape = Some(text);
    }
    PosteditOutcome {
        records,
        prompts,
        fallbacks,
        skipped,
    }
}
