use serde::{Deserialize, Serialize};

use super::metrics::temporal_iou;
use crate::data::{ClipRecord, Span};
use crate::error::{Error, Result};

/// Smallest start step, so that tiny windows still terminate.
const MIN_STEP: f64 = 1e-6;
const SPAN_EPS: f64 = 1e-9;
pub const POSITIVE_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateLabel {
    #[default]
    Unset,
    Positive,
    Negative,
}

/// A moment-of-interest proposal. `m_v`/`m_s` hold the modulated scores
/// used for ranking; `raw_v`/`raw_s` the regressor outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoICandidate {
    pub span: Span,
    pub shots: Vec<usize>,
    pub sentences: Vec<usize>,
    pub raw_v: f64,
    pub raw_s: f64,
    pub m_v: f64,
    pub m_s: f64,
    pub label: CandidateLabel,
}

impl MoICandidate {
    pub fn new(clip: &ClipRecord, span: Span) -> Self {
        let (shots, sentences) = members(clip, &span);
        Self {
            span,
            shots,
            sentences,
            raw_v: 0.0,
            raw_s: 0.0,
            m_v: 0.0,
            m_s: 0.0,
            label: CandidateLabel::Unset,
        }
    }

    pub fn ranking_score(&self) -> f64 {
        self.m_v.max(self.m_s)
    }
}

/// Indices of the shots and sentences that overlap `span` with positive length.
pub fn members(clip: &ClipRecord, span: &Span) -> (Vec<usize>, Vec<usize>) {
    let shots = clip
        .shots
        .iter()
        .enumerate()
        .filter(|(_, s)| s.span.overlaps(span))
        .map(|(i, _)| i)
        .collect();
    let sentences = clip
        .sentences
        .iter()
        .enumerate()
        .filter(|(_, s)| s.span.overlaps(span))
        .map(|(i, _)| i)
        .collect();
    (shots, sentences)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidateSet {
    pub candidates: Vec<MoICandidate>,
    /// One message per skipped window length.
    pub warnings: Vec<String>,
}

/// Sliding-window spans over `[0, timeline]`, ordered by window then start.
pub fn window_spans(timeline: f64, windows: &[f64], stride_fraction: f64) -> Result<(Vec<Span>, Vec<String>)> {
    if windows.is_empty() {
        return Err(Error::Config("no candidate window lengths".into()));
    }
    if !(stride_fraction > 0.0 && stride_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "stride_fraction {stride_fraction} must be in (0, 1]"
        )));
    }
    if !(timeline > 0.0 && timeline.is_finite()) {
        return Err(Error::Contract(format!("timeline length {timeline} must be positive")));
    }
    let mut spans: Vec<Span> = Vec::new();
    let mut warnings = Vec::new();
    for &w in windows {
        if !(w > 0.0) {
            return Err(Error::Config(format!("window length {w} must be positive")));
        }
        if w > timeline + SPAN_EPS {
            warnings.push(format!("window {w} exceeds timeline {timeline}; skipped"));
            continue;
        }
        let step = (w * stride_fraction).max(MIN_STEP);
        let mut k = 0usize;
        loop {
            let start = k as f64 * step;
            if start + w >= timeline - SPAN_EPS {
                break;
            }
            spans.push(Span::new(start, start + w));
            k += 1;
        }
        spans.push(Span::new((timeline - w).max(0.0), timeline));
    }
    let mut unique: Vec<Span> = Vec::with_capacity(spans.len());
    for s in spans {
        let dup = unique
            .iter()
            .any(|u| (u.start - s.start).abs() <= SPAN_EPS && (u.end - s.end).abs() <= SPAN_EPS);
        if !dup {
            unique.push(s);
        }
    }
    Ok((unique, warnings))
}

pub fn generate_candidates(clip: &ClipRecord, windows: &[f64], stride_fraction: f64) -> Result<CandidateSet> {
    let (spans, warnings) = window_spans(clip.timeline_length, windows, stride_fraction)?;
    if spans.is_empty() {
        return Err(Error::Config(format!(
            "every window exceeds the timeline length {}",
            clip.timeline_length
        )));
    }
    Ok(CandidateSet {
        candidates: spans.into_iter().map(|s| MoICandidate::new(clip, s)).collect(),
        warnings,
    })
}

/// Marks candidates with IoU ≥ 0.5 against `gt` positive and the rest
/// negative. When none qualifies, the highest-IoU candidate (earliest on
/// ties) is promoted; the return value reports whether that happened.
pub fn label_candidates(cands: &mut [MoICandidate], gt: &Span) -> Result<bool> {
    let mut best: Option<(usize, f64)> = None;
    let mut any = false;
    for (i, c) in cands.iter_mut().enumerate() {
        let iou = temporal_iou(&c.span, gt)?;
        let pos = iou >= POSITIVE_IOU;
        any |= pos;
        c.label = if pos {
            CandidateLabel::Positive
        } else {
            CandidateLabel::Negative
        };
        if best.is_none_or(|(_, b)| iou > b) {
            best = Some((i, iou));
        }
    }
    if any {
        return Ok(false);
    }
    match best {
        Some((i, _)) => {
            cands[i].label = CandidateLabel::Positive;
            Ok(true)
        }
        None => Ok(false),
    }
}

/// Grows `span` by `fraction · length` on each side and clips it to `[0, timeline]`.
pub fn expand_span(span: &Span, fraction: f64, timeline: f64) -> Span {
    let pad = span.len() * fraction;
    Span::new((span.start - pad).max(0.0), (span.end + pad).min(timeline))
}

/// Index of the winner by `max(m_v, m_s)` (earliest start on ties) and its
/// expanded span.
pub fn select_moment(cands: &[MoICandidate], expand_fraction: f64, timeline: f64) -> Result<(usize, Span)> {
    let mut best: Option<usize> = None;
    for (i, c) in cands.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let (sb, sc) = (cands[b].ranking_score(), c.ranking_score());
                if sc > sb || (sc == sb && c.span.start < cands[b].span.start) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    let i = best.ok_or_else(|| Error::Contract("no candidates to select from".into()))?;
    Ok((i, expand_span(&cands[i].span, expand_fraction, timeline)))
}
