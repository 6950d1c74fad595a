//! Structured reasoning traces and their grammar.
//!
//! A well-formed trace is exactly
//! `<think>...</think><answer>...</answer>` with optional surrounding
//! whitespace: one think block, then immediately one answer block, contents
//! possibly empty, no tag may appear inside either content span, nothing
//! else before or after. This single grammar backs trace parsing, the
//! `well_formed` flag, and the binary format reward, so the three can never
//! drift apart.

use crate::vocab;

const TAGS: [&str; 4] = ["<think>", "</think>", "<answer>", "</answer>"];

/// First grammar rule violated by a malformed trace.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GrammarViolation {
    #[error("trace must begin with <think>")]
    MissingThinkOpen,
    #[error("think block is never closed")]
    UnclosedThink,
    #[error("unexpected tag {0} inside think block")]
    TagInsideThink(String),
    #[error("</think> must be followed immediately by <answer>")]
    MissingAnswerOpen,
    #[error("answer block is never closed")]
    UnclosedAnswer,
    #[error("unexpected tag {0} inside answer block")]
    TagInsideAnswer(String),
    #[error("content after </answer>")]
    TrailingContent,
}

fn next_tag(s: &str) -> Option<(usize, &'static str)> {
    TAGS.iter()
        .filter_map(|&tag| s.find(tag).map(|pos| (pos, tag)))
        .min_by_key(|&(pos, _)| pos)
}

/// Split a trace into `(think, answer)` content strings, or report the
/// first violated grammar rule.
pub fn split_structured(text: &str) -> Result<(&str, &str), GrammarViolation> {
    let trimmed = text.trim();
    let rest = trimmed
        .strip_prefix("<think>")
        .ok_or(GrammarViolation::MissingThinkOpen)?;
    let (pos, tag) = next_tag(rest).ok_or(GrammarViolation::UnclosedThink)?;
    if tag != "</think>" {
        return Err(GrammarViolation::TagInsideThink(tag.to_string()));
    }
    let think = &rest[..pos];
    let rest = rest[pos + tag.len()..]
        .strip_prefix("<answer>")
        .ok_or(GrammarViolation::MissingAnswerOpen)?;
    let (pos, tag) = next_tag(rest).ok_or(GrammarViolation::UnclosedAnswer)?;
    if tag != "</answer>" {
        return Err(GrammarViolation::TagInsideAnswer(tag.to_string()));
    }
    let answer = &rest[..pos];
    if !rest[pos + tag.len()..].is_empty() {
        return Err(GrammarViolation::TrailingContent);
    }
    Ok((think, answer))
}

/// True iff `text` matches the structured-trace grammar.
pub fn matches_grammar(text: &str) -> bool {
    split_structured(text).is_ok()
}

/// A reasoning trace: the token sequence, its text rendering, and parsed
/// content spans when the rendering matches the grammar.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub token_ids: Vec<usize>,
    pub text: String,
    /// Token range of the think content (tags excluded), when well-formed.
    pub think_span: Option<(usize, usize)>,
    /// Token range of the answer content (tags excluded), when well-formed.
    pub answer_span: Option<(usize, usize)>,
    pub well_formed: bool,
}

impl Trace {
    /// The zero-token trace of a no-reasoning encoding.
    pub fn empty() -> Self {
        Trace {
            token_ids: Vec::new(),
            text: String::new(),
            think_span: None,
            answer_span: None,
            well_formed: false,
        }
    }

    pub fn token_count(&self) -> usize {
        self.token_ids.len()
    }

    /// Build a trace from generated token ids, rendering them to text and
    /// validating against the grammar.
    pub fn from_token_ids(token_ids: Vec<usize>) -> Self {
        let text = render_tokens(&token_ids);
        let mut trace = Trace {
            token_ids,
            text,
            think_span: None,
            answer_span: None,
            well_formed: false,
        };
        trace.locate_spans();
        trace
    }

    /// Build a trace from think/answer content tokens, producing the
    /// canonical well-formed rendering.
    pub fn from_parts(think: &[usize], answer: &[usize]) -> Self {
        let mut ids = Vec::with_capacity(think.len() + answer.len() + 4);
        ids.push(vocab::THINK_OPEN);
        ids.extend_from_slice(think);
        ids.push(vocab::THINK_CLOSE);
        ids.push(vocab::ANSWER_OPEN);
        ids.extend_from_slice(answer);
        ids.push(vocab::ANSWER_CLOSE);
        Self::from_token_ids(ids)
    }

    /// Parse a stored text rendering back into tokens.
    pub fn from_text(text: &str) -> Result<Self, TraceParseError> {
        if text.is_empty() {
            return Ok(Self::empty());
        }
        let (think, answer) = split_structured(text).map_err(TraceParseError::Grammar)?;
        let parse_words = |s: &str| -> Result<Vec<usize>, TraceParseError> {
            s.split_whitespace()
                .map(|w| {
                    vocab::token_from_name(w).ok_or_else(|| TraceParseError::UnknownToken(w.to_string()))
                })
                .collect()
        };
        Ok(Self::from_parts(&parse_words(think)?, &parse_words(answer)?))
    }

    /// Answer content tokens, empty when the trace is malformed.
    pub fn answer_tokens(&self) -> &[usize] {
        match self.answer_span {
            Some((a, b)) => &self.token_ids[a..b],
            None => &[],
        }
    }

    pub fn think_tokens(&self) -> &[usize] {
        match self.think_span {
            Some((a, b)) => &self.token_ids[a..b],
            None => &[],
        }
    }

    fn locate_spans(&mut self) {
        if !matches_grammar(&self.text) {
            return;
        }
        // Grammar holds, so the token sequence is
        // <think> t.. </think><answer> a.. </answer> with no stray tags.
        let close_think = self
            .token_ids
            .iter()
            .position(|&t| t == vocab::THINK_CLOSE)
            .expect("grammar guarantees </think>");
        let close_answer = self
            .token_ids
            .iter()
            .position(|&t| t == vocab::ANSWER_CLOSE)
            .expect("grammar guarantees </answer>");
        self.think_span = Some((1, close_think));
        self.answer_span = Some((close_think + 2, close_answer));
        self.well_formed = true;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TraceParseError {
    #[error("malformed trace: {0}")]
    Grammar(GrammarViolation),
    #[error("unknown token {0:?} in trace text")]
    UnknownToken(String),
}

/// Render token ids to text: tag tokens appear verbatim, word tokens are
/// space-separated within a run.
pub fn render_tokens(ids: &[usize]) -> String {
    let mut out = String::new();
    let mut prev_was_word = false;
    for &id in ids {
        let is_tag = matches!(
            id,
            vocab::THINK_OPEN | vocab::THINK_CLOSE | vocab::ANSWER_OPEN | vocab::ANSWER_CLOSE
        );
        if is_tag {
            out.push_str(&vocab::token_name(id));
            prev_was_word = false;
        } else {
            if prev_was_word {
                out.push(' ');
            }
            out.push_str(&vocab::token_name(id));
            prev_was_word = true;
        }
    }
    out
}
