use std::collections::BTreeSet;

use super::{Frame, Shot, Span, TokenId};
use crate::error::{Error, Result};

pub const MAX_ACTION_CONCEPTS: usize = 5;

/// `|A ∩ B| / |A ∪ B|` over concept sets; two empty sets give 0.
pub fn set_iou(a: &BTreeSet<TokenId>, b: &BTreeSet<TokenId>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Greedy left-to-right shot segmentation. A frame joins the current shot
/// when the IoU between its concepts and the union of the shot's concepts
/// so far exceeds `threshold`; otherwise it opens a new shot. With
/// `frame_rate` frames per timeline unit, frame `i` covers
/// `[i / frame_rate, (i + 1) / frame_rate]`.
pub fn segment_shots(frames: &[Frame], threshold: f64, frame_rate: f64) -> Result<Vec<Shot>> {
    if frames.is_empty() {
        return Err(Error::EmptySequence("no frames to segment".into()));
    }
    if !(frame_rate > 0.0) {
        return Err(Error::Config("frame rate must be positive".into()));
    }
    if frames.windows(2).any(|w| w[0].index >= w[1].index) {
        return Err(Error::Contract("frame indices must be strictly increasing".into()));
    }
    let span_of = |f: &Frame| Span::new(f.index as f64 / frame_rate, (f.index + 1) as f64 / frame_rate);

    let mut shots = Vec::new();
    let mut union: BTreeSet<TokenId> = frames[0].concepts.iter().copied().collect();
    let mut span = span_of(&frames[0]);
    for f in &frames[1..] {
        let set: BTreeSet<TokenId> = f.concepts.iter().copied().collect();
        if set_iou(&set, &union) > threshold {
            union.extend(set);
            span.end = span_of(f).end;
        } else {
            shots.push(Shot {
                span,
                concepts: std::mem::take(&mut union).into_iter().collect(),
                action_concepts: Vec::new(),
            });
            union = set;
            span = span_of(f);
        }
    }
    shots.push(Shot {
        span,
        concepts: union.into_iter().collect(),
        action_concepts: Vec::new(),
    });
    Ok(shots)
}

/// Attaches one action-label list (at most five labels) to each shot.
pub fn attach_action_concepts(mut shots: Vec<Shot>, labels: &[Vec<TokenId>]) -> Result<Vec<Shot>> {
    if labels.len() != shots.len() {
        return Err(Error::Contract(format!(
            "{} label lists for {} shots",
            labels.len(),
            shots.len()
        )));
    }
    for (i, (shot, l)) in shots.iter_mut().zip(labels).enumerate() {
        if l.len() > MAX_ACTION_CONCEPTS {
            return Err(Error::Contract(format!(
                "shot {i} has {} action labels, at most {MAX_ACTION_CONCEPTS} allowed",
                l.len()
            )));
        }
        shot.action_concepts = l.clone();
    }
    Ok(shots)
}
