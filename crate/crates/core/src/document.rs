//! Talk-level documents: chunk assembly, sentence splitting and stitching
//! of overlapping window transcripts.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Per-chunk transcripts from every ASR system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisSet {
    pub talk_id: String,
    pub chunk_index: usize,
    pub texts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TalkDocument {
    pub talk_id: String,
    pub text: String,
    /// `(chunk_index, char_start)`; `char_start` counts Unicode scalar values.
    pub chunk_offsets: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub talk_id: String,
    pub index: usize,
    pub source: String,
    pub mt: Option<String>,
    pub ape: Option<String>,
    pub lang: String,
}

#[derive(Debug, Error, PartialEq)]
pub enum DocumentError {
    #[error("chunk index {index} at position {position} does not increase")]
    NonIncreasingChunk { position: usize, index: usize },
}

/// Joins trimmed chunk texts with single spaces. Empty chunks contribute no
/// text but still get an offset (the position the next text would start at,
/// clamped to the document length).
pub fn assemble_talk(talk_id: &str, chunks: &[(usize, String)]) -> Result<TalkDocument, DocumentError> {
    let mut text = String::new();
    let mut len = 0usize;
    let mut offsets = Vec::with_capacity(chunks.len());
    for (position, (index, raw)) in chunks.iter().enumerate() {
        if let Some(&(prev, _)) = offsets.last() {
            if *index <= prev {
                return Err(DocumentError::NonIncreasingChunk {
                    position,
                    index: *index,
                });
            }
        }
        let trimmed = raw.trim();
        offsets.push((*index, if text.is_empty() { 0 } else { len + 1 }));
        if !trimmed.is_empty() {
            if !text.is_empty() {
                text.push(' ');
                len += 1;
            }
            text.push_str(trimmed);
            len += trimmed.chars().count();
        }
    }
    for offset in &mut offsets {
        offset.1 = offset.1.min(len);
    }
    Ok(TalkDocument {
        talk_id: talk_id.to_string(),
        text,
        chunk_offsets: offsets,
    })
}

pub const DEFAULT_ABBREVIATIONS: &[&str] = &[
    "Dr", "Mr", "Mrs", "Ms", "Prof", "Fig", "et al", "e.g", "i.e", "vs", "No",
];

const CLOSERS: &[char] = &['"', '\'', ')', ']', '}', '”', '’', '»', '」', '』', '）'];
const OPENERS: &[char] = &['"', '\'', '(', '[', '“', '‘', '«'];

fn is_cjk_terminator(c: char) -> bool {
    matches!(c, '。' | '！' | '？')
}

fn is_latin_terminator(c: char) -> bool {
    matches!(c, '.' | '?' | '!')
}

/// True for Han ideographs and CJK punctuation, which tokenize per character.
pub fn is_han(c: char) -> bool {
    matches!(c as u32,
        0x3000..=0x303F
        | 0x3400..=0x4DBF
        | 0x4E00..=0x9FFF
        | 0xF900..=0xFAFF
        | 0xFF00..=0xFFEF
        | 0x20000..=0x2A6DF)
}

/// Rule-based sentence splitter.
///
/// Splits after `.`, `?` or `!` (plus trailing closing quotes/brackets) when
/// followed by whitespace and then an uppercase letter or digit, optionally
/// behind an opening quote. A period does not split when the word before it
/// is a listed abbreviation or a single capital letter. `。！？` always split.
#[derive(Debug, Clone)]
pub struct SentenceSplitter {
    abbreviations: HashSet<String>,
}

impl Default for SentenceSplitter {
    fn default() -> Self {
        Self::new(DEFAULT_ABBREVIATIONS.iter().copied())
    }
}

impl SentenceSplitter {
    /// Abbreviations are given without their final period (`"e.g"`, `"et al"`).
    pub fn new<'a>(abbreviations: impl IntoIterator<Item = &'a str>) -> Self {
        Self {
            abbreviations: abbreviations
                .into_iter()
                .map(|a| a.trim_end_matches('.').to_string())
                .collect(),
        }
    }

    /// Splits `text` into trimmed, whitespace-collapsed sentences.
    pub fn split(&self, text: &str) -> Vec<String> {
        let chars: Vec<char> = text.chars().collect();
        let mut sentences = Vec::new();
        let mut start = 0usize;
        let mut i = 0usize;
        while i < chars.len() {
            let c = chars[i];
            if !is_latin_terminator(c) && !is_cjk_terminator(c) {
                i += 1;
                continue;
            }
            let mut end = i + 1;
            while end < chars.len()
                && (is_latin_terminator(chars[end]) || is_cjk_terminator(chars[end]) || CLOSERS.contains(&chars[end]))
            {
                end += 1;
            }
            let boundary = if is_cjk_terminator(c) || chars[i..end].iter().any(|&t| is_cjk_terminator(t)) {
                true
            } else {
                self.latin_boundary(&chars, i, end)
            };
            if boundary {
                push_sentence(&mut sentences, &chars[start..end]);
                start = end;
            }
            i = end;
        }
        if start < chars.len() {
            push_sentence(&mut sentences, &chars[start..]);
        }
        sentences
    }

    fn latin_boundary(&self, chars: &[char], term: usize, end: usize) -> bool {
        let mut k = end;
        if k >= chars.len() || !chars[k].is_whitespace() {
            return false;
        }
        while k < chars.len() && chars[k].is_whitespace() {
            k += 1;
        }
        if k >= chars.len() {
            return false;
        }
        let mut next = chars[k];
        if OPENERS.contains(&next) && k + 1 < chars.len() {
            next = chars[k + 1];
        }
        if !(next.is_uppercase() || next.is_ascii_digit()) {
            return false;
        }
        if chars[term] == '.' && self.is_abbreviation(chars, term) {
            return false;
        }
        true
    }

    fn is_abbreviation(&self, chars: &[char], period: usize) -> bool {
        let word_start = chars[..period]
            .iter()
            .rposition(|c| c.is_whitespace())
            .map_or(0, |p| p + 1);
        let word: String = chars[word_start..period]
            .iter()
            .collect::<String>()
            .trim_start_matches(OPENERS)
            .to_string();
        if word.is_empty() {
            return false;
        }
        let mut letters = word.chars();
        if let (Some(first), None) = (letters.next(), letters.next()) {
            if first.is_uppercase() {
                return true;
            }
        }
        if self.abbreviations.contains(&word) {
            return true;
        }
        // two-word forms such as "et al"
        if word_start >= 2 {
            let prev_end = word_start - 1;
            let prev_start = chars[..prev_end]
                .iter()
                .rposition(|c| c.is_whitespace())
                .map_or(0, |p| p + 1);
            let prev: String = chars[prev_start..prev_end].iter().collect();
            if self.abbreviations.contains(&format!("{prev} {word}")) {
                return true;
            }
        }
        false
    }
}

fn push_sentence(out: &mut Vec<String>, chars: &[char]) {
    let raw: String = chars.iter().collect();
    let collapsed = collapse_whitespace(&raw);
    if !collapsed.is_empty() {
        out.push(collapsed);
    }
}

pub fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Splits a document into indexed sentence records with the default splitter.
pub fn split_sentences(doc: &TalkDocument, lang: &str) -> Vec<SentenceRecord> {
    split_sentences_with(&SentenceSplitter::default(), doc, lang)
}

pub fn split_sentences_with(splitter: &SentenceSplitter, doc: &TalkDocument, lang: &str) -> Vec<SentenceRecord> {
    splitter
        .split(&doc.text)
        .into_iter()
        .enumerate()
        .map(|(index, source)| SentenceRecord {
            talk_id: doc.talk_id.clone(),
            index,
            source,
            mt: None,
            ape: None,
            lang: lang.to_string(),
        })
        .collect()
}

/// Word tokens with byte ranges: whitespace-separated runs, except that
/// every Han character is a token of its own.
fn tokens(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut current: Option<usize> = None;
    for (pos, c) in text.char_indices() {
        if c.is_whitespace() || is_han(c) {
            if let Some(start) = current.take() {
                out.push((start, pos));
            }
            if is_han(c) {
                out.push((pos, pos + c.len_utf8()));
            }
        } else if current.is_none() {
            current = Some(pos);
        }
    }
    if let Some(start) = current {
        out.push((start, text.len()));
    }
    out
}

fn join_pieces(left: &str, right: &str) -> String {
    let left = left.trim_end();
    let right = right.trim_start();
    if left.is_empty() {
        return right.to_string();
    }
    if right.is_empty() {
        return left.to_string();
    }
    let han_seam = left.chars().last().is_some_and(is_han) && right.chars().next().is_some_and(is_han);
    if han_seam {
        format!("{left}{right}")
    } else {
        format!("{left} {right}")
    }
}

/// Merges two adjacent window transcripts on their longest shared
/// suffix/prefix word run (case-insensitive). Runs shorter than
/// `min_match_words` are ignored and the texts are simply joined.
pub fn stitch_overlap(left: &str, right: &str, min_match_words: usize) -> String {
    let min_match_words = min_match_words.max(1);
    let left_tokens = tokens(left);
    let right_tokens = tokens(right);
    if right_tokens.is_empty() {
        return left.to_string();
    }
    if left_tokens.is_empty() {
        return right.to_string();
    }
    let lower = |text: &str, (s, e): (usize, usize)| text[s..e].to_lowercase();
    let max_k = left_tokens.len().min(right_tokens.len());
    let overlap = (min_match_words..=max_k).rev().find(|&k| {
        left_tokens[left_tokens.len() - k..]
            .iter()
            .zip(&right_tokens[..k])
            .all(|(&l, &r)| lower(left, l) == lower(right, r))
    });
    match overlap {
        Some(k) => {
            let rest = right_tokens.get(k).map_or("", |&(s, _)| &right[s..]);
            join_pieces(left, rest)
        }
        None => join_pieces(left, right),
    }
}

/// Number of stitching tokens in `text`.
pub fn word_count(text: &str) -> usize {
    tokens(text).len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chunks(items: &[(usize, &str)]) -> Vec<(usize, String)> {
        items.iter().map(|(i, t)| (*i, t.to_string())).collect()
    }

    #[test]
    fn assemble_joins_with_single_space() {
        let doc = assemble_talk("t", &chunks(&[(0, "hello"), (1, "world")])).unwrap();
        assert_eq!(doc.text, "hello world");
        assert_eq!(doc.chunk_offsets, [(0, 0), (1, 6)]);
    }

    #[test]
    fn assemble_records_empty_chunks() {
        let doc = assemble_talk("t", &chunks(&[(0, "a "), (1, ""), (2, "b")])).unwrap();
        assert_eq!(doc.text, "a b");
        assert_eq!(doc.chunk_offsets, [(0, 0), (1, 2), (2, 2)]);
    }

    #[test]
    fn assemble_empty_and_trailing_empty() {
        let doc = assemble_talk("t", &[]).unwrap();
        assert_eq!(doc.text, "");
        assert!(doc.chunk_offsets.is_empty());

        let doc = assemble_talk("t", &chunks(&[(0, "ab"), (3, "  ")])).unwrap();
        assert_eq!(doc.chunk_offsets, [(0, 0), (3, 2)]);
    }

    #[test]
    fn assemble_rejects_non_increasing_indices() {
        let err = assemble_talk("t", &chunks(&[(1, "a"), (1, "b")])).unwrap_err();
        assert_eq!(err, DocumentError::NonIncreasingChunk { position: 1, index: 1 });
    }

    #[test]
    fn offsets_recover_chunk_text() {
        let doc = assemble_talk("t", &chunks(&[(0, " über "), (1, "straße  x"), (4, "z")])).unwrap();
        let chars: Vec<char> = doc.text.chars().collect();
        let at = |o: usize| chars[o..].iter().collect::<String>();
        assert!(at(doc.chunk_offsets[1].1).starts_with("straße"));
        assert!(at(doc.chunk_offsets[2].1).starts_with('z'));
    }

    fn sentences(text: &str) -> Vec<String> {
        SentenceSplitter::default().split(text)
    }

    #[test]
    fn splits_plain_sentences() {
        assert_eq!(sentences("Hello world. How are you?"), ["Hello world.", "How are you?"]);
        assert!(sentences("").is_empty());
    }

    #[test]
    fn abbreviations_and_initials_suppress_splits() {
        assert_eq!(sentences("Dr. Smith arrived. He left."), ["Dr. Smith arrived.", "He left."]);
        assert_eq!(
            sentences("Work by Koehn et al. Shows gains. See J. Doe for more."),
            ["Work by Koehn et al. Shows gains.", "See J. Doe for more."]
        );
        assert_eq!(sentences("Use tools, e.g. Python."), ["Use tools, e.g. Python."]);
    }

    #[test]
    fn lowercase_continuation_and_decimals_do_not_split() {
        assert_eq!(sentences("It costs 3.5 dollars. ok then."), ["It costs 3.5 dollars. ok then."]);
        assert_eq!(sentences("Version 2. 3 items remain."), ["Version 2.", "3 items remain."]);
    }

    #[test]
    fn closing_quotes_stay_with_sentence() {
        assert_eq!(
            sentences("He said \"stop.\" Then he left!  \"Why?\" she asked."),
            ["He said \"stop.\"", "Then he left!", "\"Why?\" she asked."]
        );
    }

    #[test]
    fn cjk_terminators_split_without_spaces() {
        assert_eq!(sentences("你好。今天天气很好！是吗？"), ["你好。", "今天天气很好！", "是吗？"]);
    }

    #[test]
    fn split_sentences_indexes_records() {
        let doc = assemble_talk("t7", &chunks(&[(0, "One. Two"), (1, "three. Four.")])).unwrap();
        let records = split_sentences(&doc, "en");
        let sources: Vec<_> = records.iter().map(|r| r.source.as_str()).collect();
        assert_eq!(sources, ["One.", "Two three.", "Four."]);
        assert!(records.iter().enumerate().all(|(i, r)| r.index == i && r.talk_id == "t7"));
    }

    #[test]
    fn stitch_examples() {
        assert_eq!(stitch_overlap("a b c d", "c d e f", 2), "a b c d e f");
        assert_eq!(stitch_overlap("a b", "x y", 2), "a b x y");
        assert_eq!(stitch_overlap("a b C", "c d", 1), "a b C d");
    }

    #[test]
    fn stitch_prefers_longest_overlap_and_respects_minimum() {
        assert_eq!(stitch_overlap("x a b a b", "a b a b y", 1), "x a b a b y");
        assert_eq!(stitch_overlap("a b c", "c d", 2), "a b c c d");
        assert_eq!(stitch_overlap("a b c", "a b c", 3), "a b c");
    }

    #[test]
    fn stitch_han_per_character() {
        assert_eq!(stitch_overlap("我们今天", "今天很好", 2), "我们今天很好");
        assert_eq!(stitch_overlap("我们", "很好", 2), "我们很好");
    }

    proptest! {
        #[test]
        fn stitch_identity_at_empty(words in proptest::collection::vec("[a-c]{1,2}", 0..6)) {
            let x = words.join(" ");
            prop_assert_eq!(stitch_overlap(&x, "", 3), x.clone());
            prop_assert_eq!(stitch_overlap("", &x, 3), x);
        }

        #[test]
        fn stitch_never_loses_words(
            l in proptest::collection::vec("[a-cA-C]", 0..8),
            r in proptest::collection::vec("[a-cA-C]", 0..8),
            min in 1usize..4,
        ) {
            let (left, right) = (l.join(" "), r.join(" "));
            let out = word_count(&stitch_overlap(&left, &right, min));
            prop_assert!(out >= l.len().max(r.len()));
            prop_assert!(out <= l.len() + r.len());
        }

        #[test]
        fn split_reconstructs_document(
            pieces in proptest::collection::vec(
                proptest::collection::vec(
                    prop_oneof!["[A-Z][a-z]{0,4}", "[a-z]{1,5}", "[0-9]{1,2}", "Dr\\.", "[a-z]{1,4}[.?!]", "  "],
                    0..8,
                ),
                0..5,
            ),
        ) {
            let chunk_texts: Vec<(usize, String)> =
                pieces.iter().enumerate().map(|(i, w)| (i, w.join(" "))).collect();
            let doc = assemble_talk("t", &chunk_texts).unwrap();
            let records = split_sentences(&doc, "en");
            let joined = records.iter().map(|r| r.source.as_str()).collect::<Vec<_>>().join(" ");
            let expected = collapse_whitespace(
                &chunk_texts.iter().map(|(_, t)| t.as_str()).collect::<Vec<_>>().join(" "),
            );
            prop_assert_eq!(joined, expected);
            prop_assert!(records.iter().all(|r| !r.source.is_empty()));
            prop_assert!(records.iter().enumerate().all(|(i, r)| r.index == i));
        }
    }
}
