//! Moment proposal: sliding-window candidates, per-modality moment scores,
//! question-conditioned modulation, the cross-modal ranking loss and
//! moment selection.

mod candidates;
mod metrics;

pub use candidates::{
    expand_span, generate_candidates, label_candidates, members, select_moment, window_spans, CandidateLabel,
    CandidateSet, MoICandidate, POSITIVE_IOU,
};
pub use metrics::{coverage, temporal_iou};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::BiLstm;
use crate::error::{Error, Result};
use crate::hrn::dot_attention;
use crate::mlp::Mlp;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// How a modality gate reshapes a moment score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modulation {
    #[default]
    Additive,
    Multiplicative,
    Residual,
}

impl Modulation {
    pub const ALL: [Modulation; 3] = [Self::Additive, Self::Multiplicative, Self::Residual];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Additive => "additive",
            Self::Multiplicative => "multiplicative",
            Self::Residual => "residual",
        }
    }

    pub fn apply(self, m: f64, gate: f64) -> f64 {
        match self {
            Self::Additive => m + gate,
            Self::Multiplicative => m * gate,
            Self::Residual => m + m * gate,
        }
    }

    /// Graph version of [`Modulation::apply`] for an `N × 1` score column
    /// and a `1 × 1` gate.
    pub fn apply_var(self, g: &mut Graph<'_>, m: Var, gate: Var) -> Result<Var> {
        match self {
            Self::Additive => g.add_scalar(m, gate),
            Self::Multiplicative => g.mul_scalar(m, gate),
            Self::Residual => {
                let mg = g.mul_scalar(m, gate)?;
                g.add(m, mg)
            }
        }
    }
}

impl fmt::Display for Modulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown modulation '{s}' (expected additive, multiplicative or residual)"
            ))
        })
    }
}

/// `(F(m_v, α), F(m_s, 1 − α))`.
pub fn modulate_moment_scores(m_v: f64, m_s: f64, alpha: f64, mode: Modulation) -> (f64, f64) {
    (mode.apply(m_v, alpha), mode.apply(m_s, 1.0 - alpha))
}

/// `σ(MLP(q))` for a `1 × d` pooled question row.
pub fn mim_alpha(g: &mut Graph<'_>, q: Var, gate: &Mlp) -> Result<Var> {
    let z = gate.forward(g, q)?;
    Ok(g.sigmoid(z))
}

/// Per-modality recurrent feature extractors and the shared score regressor.
#[derive(Clone, Debug)]
pub struct MomentScorer {
    video: BiLstm,
    subtitle: BiLstm,
    regressor: Mlp,
    d: usize,
}

/// Graph handles for one record's candidate scores, each `N × 1`.
#[derive(Clone, Copy, Debug)]
pub struct MomentScores {
    pub video: Var,
    pub subtitle: Var,
}

impl MomentScorer {
    pub fn new(prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            video: BiLstm::new(format!("{prefix}/video/rnn"), 2 * d, d)?,
            subtitle: BiLstm::new(format!("{prefix}/subtitle/rnn"), 2 * d, d)?,
            regressor: Mlp::new(format!("{prefix}/regressor"), d, d, 1),
            d,
        })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.video.init(store, rng)?;
        self.subtitle.init(store, rng)?;
        self.regressor.init(store, rng)
    }

    /// Shared regressor applied row-wise: `σ(MLP(f))`.
    pub fn regress(&self, g: &mut Graph<'_>, features: Var) -> Result<Var> {
        let z = self.regressor.forward(g, features)?;
        Ok(g.sigmoid(z))
    }

    /// Pooled `1 × d` feature per candidate for one modality. The context
    /// is concatenated with its attention over the query rows once; each
    /// candidate then runs the recurrence over its member rows.
    fn features(&self, g: &mut Graph<'_>, rnn: &BiLstm, ctx: Var, query: Var, groups: &[&[usize]]) -> Result<Vec<Var>> {
        let attended = dot_attention(g, ctx, query)?;
        let x = g.concat_cols(&[ctx, attended])?;
        let proj = rnn.project(g, x)?;
        let mut zero_proj = None;
        let mut out = Vec::with_capacity(groups.len());
        for rows in groups {
            let h = if rows.is_empty() {
                let p = match zero_proj {
                    Some(p) => p,
                    None => {
                        let z = g.input(Tensor::zeros(1, 2 * self.d));
                        let p = rnn.project(g, z)?;
                        zero_proj = Some(p);
                        p
                    }
                };
                rnn.run(g, p, None)?
            } else {
                rnn.run(g, proj, Some(rows))?
            };
            out.push(g.maxpool_time(h)?);
        }
        Ok(out)
    }

    /// Scores every candidate in both modalities. `v`, `s` are the encoded
    /// shot and sentence sequences, `query` the encoded query rows.
    pub fn score(&self, g: &mut Graph<'_>, v: Var, s: Var, query: Var, cands: &[MoICandidate]) -> Result<MomentScores> {
        if cands.is_empty() {
            return Err(Error::Contract("no candidates to score".into()));
        }
        let shot_groups: Vec<&[usize]> = cands.iter().map(|c| c.shots.as_slice()).collect();
        let sentence_groups: Vec<&[usize]> = cands.iter().map(|c| c.sentences.as_slice()).collect();
        let mut feats = self.features(g, &self.video, v, query, &shot_groups)?;
        feats.extend(self.features(g, &self.subtitle, s, query, &sentence_groups)?);
        let stacked = g.concat_rows(&feats)?;
        let scores = self.regress(g, stacked)?;
        let n = cands.len();
        let first: Vec<usize> = (0..n).collect();
        let second: Vec<usize> = (n..2 * n).collect();
        Ok(MomentScores {
            video: g.select_rows(scores, &first)?,
            subtitle: g.select_rows(scores, &second)?,
        })
    }
}

/// Outcome of the ranking loss for one record.
#[derive(Clone, Copy, Debug)]
pub enum RankingLoss {
    Loss(Var),
    /// No positive or no negative candidate; the record adds no ranking term.
    Skipped,
}

/// Cross-modal ranking loss over equal numbers of sampled positive and
/// negative candidates. Both modalities' scores of the sampled candidates
/// are pooled, and the hinge `max(0, margin + p⁻ − p⁺)` is averaged over
/// every (positive, negative) pair.
pub fn cmr_loss<R: Rng>(
    g: &mut Graph<'_>,
    scores: MomentScores,
    labels: &[CandidateLabel],
    margin: f64,
    rng: &mut R,
) -> Result<RankingLoss> {
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        match l {
            CandidateLabel::Positive => pos.push(i),
            CandidateLabel::Negative => neg.push(i),
            CandidateLabel::Unset => {}
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Ok(RankingLoss::Skipped);
    }
    let k = pos.len().min(neg.len());
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(k);
    neg.truncate(k);
    pos.sort_unstable();
    neg.sort_unstable();
    let pv = g.select_rows(scores.video, &pos)?;
    let ps = g.select_rows(scores.subtitle, &pos)?;
    let nv = g.select_rows(scores.video, &neg)?;
    let ns = g.select_rows(scores.subtitle, &neg)?;
    let p = g.concat_rows(&[pv, ps])?;
    let n = g.concat_rows(&[nv, ns])?;
    Ok(RankingLoss::Loss(g.ranking_hinge(p, n, margin)?))
}
