//! Clip, subtitle and question records plus the vocabulary layout.

mod io;
mod shots;
mod synth;

pub use io::{load_dataset, parse_record, read_dataset, save_dataset, with_path, write_dataset};
pub use shots::{attach_action_concepts, segment_shots, set_iou, MAX_ACTION_CONCEPTS};
pub use synth::{generate_synthetic, CueSet, GeneratorConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

/// Closed interval `[start, end]` on the shared timeline. Serialised as a
/// two-element array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Span {
    pub start: f64,
    pub end: f64,
}

impl From<[f64; 2]> for Span {
    fn from([start, end]: [f64; 2]) -> Self {
        Self { start, end }
    }
}

impl From<Span> for [f64; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

impl Span {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_valid(&self) -> bool {
        self.start.is_finite() && self.end.is_finite() && self.start < self.end
    }

    /// True when the two spans share an interval of positive length.
    pub fn overlaps(&self, other: &Span) -> bool {
        self.start.max(other.start) < self.end.min(other.end)
    }

    pub fn contains(&self, other: &Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub index: usize,
    /// Deduplicated, sorted concept ids.
    pub concepts: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shot {
    pub span: Span,
    pub concepts: Vec<TokenId>,
    #[serde(default)]
    pub action_concepts: Vec<TokenId>,
}

impl Shot {
    /// Token stream fed to the encoder: visual concepts, then action concepts.
    pub fn tokens(&self, with_actions: bool) -> Vec<TokenId> {
        let mut t = self.concepts.clone();
        if with_actions {
            t.extend_from_slice(&self.action_concepts);
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubtitleSentence {
    pub span: Span,
    pub tokens: Vec<TokenId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Video,
    Subtitle,
}

/// Which modality localises the moment and which one holds the answer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModalityLabel {
    #[serde(rename = "S,S")]
    SS,
    #[serde(rename = "S,V")]
    SV,
    #[serde(rename = "V,S")]
    VS,
    #[serde(rename = "V,V")]
    VV,
}

impl ModalityLabel {
    pub const ALL: [ModalityLabel; 4] = [Self::SS, Self::SV, Self::VS, Self::VV];

    pub fn localization(self) -> Modality {
        match self {
            Self::SS | Self::SV => Modality::Subtitle,
            Self::VS | Self::VV => Modality::Video,
        }
    }

    pub fn answer(self) -> Modality {
        match self {
            Self::SS | Self::VS => Modality::Subtitle,
            Self::SV | Self::VV => Modality::Video,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SS => "(S,S)",
            Self::SV => "(S,V)",
            Self::VS => "(V,S)",
            Self::VV => "(V,V)",
        }
    }
}

/// Synthetic stand-ins for the usual interrogative question types.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    What,
    Who,
    Where,
    When,
    Why,
    How,
}

impl QuestionType {
    pub const ALL: [QuestionType; 6] = [Self::What, Self::Who, Self::Where, Self::When, Self::Why, Self::How];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::What => "what",
            Self::Who => "who",
            Self::Where => "where",
            Self::When => "when",
            Self::Why => "why",
            Self::How => "how",
        }
    }
}

pub const NUM_ANSWERS: usize = 5;

/// One multiple-choice question over a clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub id: u64,
    pub timeline_length: f64,
    pub shots: Vec<Shot>,
    pub sentences: Vec<SubtitleSentence>,
    pub question_type: QuestionType,
    pub question_tokens: Vec<TokenId>,
    pub answers: Vec<Vec<TokenId>>,
    pub gt_answer: usize,
    pub gt_moment: Span,
    pub modality_label: ModalityLabel,
}

const COVER_EPS: f64 = 1e-9;

fn invalid(record: usize, field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Validation {
        record,
        field: field.into(),
        message: message.into(),
    }
}

fn check_track<'a>(record: usize, name: &str, spans: impl Iterator<Item = &'a Span>, timeline: f64) -> Result<()> {
    let mut cursor = 0.0;
    let mut count = 0;
    for (i, s) in spans.enumerate() {
        let field = format!("{name}[{i}].span");
        if !s.is_valid() {
            return Err(invalid(
                record,
                field,
                format!("degenerate span [{}, {}]", s.start, s.end),
            ));
        }
        if (s.start - cursor).abs() > COVER_EPS {
            let what = if s.start < cursor {
                "overlaps the previous span"
            } else {
                "leaves a gap"
            };
            return Err(invalid(
                record,
                field,
                format!("starts at {} and {what} ending at {cursor}", s.start),
            ));
        }
        cursor = s.end;
        count += 1;
    }
    if count == 0 {
        return Err(invalid(record, name, "track is empty"));
    }
    if (cursor - timeline).abs() > COVER_EPS {
        return Err(invalid(
            record,
            name,
            format!("track ends at {cursor}, timeline is {timeline}"),
        ));
    }
    Ok(())
}

impl ClipRecord {
    /// Semantic checks beyond the JSON shape. `index` is the record's
    /// position in its file and is reported in errors.
    pub fn validate(&self, index: usize) -> Result<()> {
        let t = self.timeline_length;
        if !(t.is_finite() && t > 0.0) {
            return Err(invalid(index, "timeline_length", format!("must be positive, got {t}")));
        }
        check_track(index, "shots", self.shots.iter().map(|s| &s.span), t)?;
        for (i, s) in self.shots.iter().enumerate() {
            if s.concepts.is_empty() {
                return Err(invalid(index, format!("shots[{i}].concepts"), "no concepts"));
            }
            let mut sorted = s.concepts.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != s.concepts.len() {
                return Err(invalid(index, format!("shots[{i}].concepts"), "duplicate concepts"));
            }
            if s.action_concepts.len() > MAX_ACTION_CONCEPTS {
                return Err(invalid(
                    index,
                    format!("shots[{i}].action_concepts"),
                    format!("{} labels, at most {MAX_ACTION_CONCEPTS}", s.action_concepts.len()),
                ));
            }
        }
        check_track(index, "sentences", self.sentences.iter().map(|s| &s.span), t)?;
        for (i, s) in self.sentences.iter().enumerate() {
            if s.tokens.is_empty() {
                return Err(invalid(index, format!("sentences[{i}].tokens"), "no tokens"));
            }
        }
        if self.question_tokens.is_empty() {
            return Err(invalid(index, "question_tokens", "no tokens"));
        }
        if self.answers.len() != NUM_ANSWERS {
            return Err(invalid(
                index,
                "answers",
                format!("expected {NUM_ANSWERS} candidates, got {}", self.answers.len()),
            ));
        }
        if let Some(i) = self.answers.iter().position(Vec::is_empty) {
            return Err(invalid(index, format!("answers[{i}]"), "no tokens"));
        }
        if self.gt_answer >= NUM_ANSWERS {
            return Err(invalid(
                index,
                "gt_answer",
                format!("{} is not in 0..{NUM_ANSWERS}", self.gt_answer),
            ));
        }
        let g = self.gt_moment;
        if !g.is_valid() || g.start < 0.0 || g.end > t + COVER_EPS {
            return Err(invalid(
                index,
                "gt_moment",
                format!("[{}, {}] is not a valid span inside [0, {t}]", g.start, g.end),
            ));
        }
        Ok(())
    }

    pub fn timeline(&self) -> Span {
        Span::new(0.0, self.timeline_length)
    }

    /// Every token id referenced by the record.
    pub fn all_tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.shots
            .iter()
            .flat_map(|s| s.concepts.iter().chain(&s.action_concepts))
            .chain(self.sentences.iter().flat_map(|s| &s.tokens))
            .chain(&self.question_tokens)
            .chain(self.answers.iter().flatten())
            .copied()
    }
}

/// Id layout shared by words, visual concepts and action concepts.
/// Id 0 is padding; the three ranges follow it without overlap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub words: usize,
    pub concepts: usize,
    pub actions: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Pad,
    Word,
    Concept,
    Action,
}

impl Vocab {
    pub const PAD: TokenId = 0;

    pub fn size(&self) -> usize {
        1 + self.words + self.concepts + self.actions
    }

    pub fn word(&self, i: usize) -> TokenId {
        debug_assert!(i < self.words);
        1 + i
    }

    pub fn concept(&self, i: usize) -> TokenId {
        debug_assert!(i < self.concepts);
        1 + self.words + i
    }

    pub fn action(&self, i: usize) -> TokenId {
        debug_assert!(i < self.actions);
        1 + self.words + self.concepts + i
    }

    pub fn kind(&self, id: TokenId) -> Option<TokenKind> {
        match id {
            0 => Some(TokenKind::Pad),
            i if i <= self.words => Some(TokenKind::Word),
            i if i <= self.words + self.concepts => Some(TokenKind::Concept),
            i if i < self.size() => Some(TokenKind::Action),
            _ => None,
        }
    }
}
