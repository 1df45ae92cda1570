//! Inference over a dataset: per-record traces and the aggregate report.

use std::collections::BTreeMap;

use msan::data::{ClipRecord, ModalityLabel, QuestionType, Span};
use msan::model::SpanMetrics;
use msan::mpn::CandidateLabel;
use msan::tensor::{Graph, ParamStore};
use msan::{ForwardOptions, MomentSource, Msan};
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Machine-readable account of one prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceTrace {
    pub id: u64,
    pub question_type: QuestionType,
    pub modality_label: ModalityLabel,
    pub gt_answer: usize,
    pub predicted_answer: usize,
    pub correct: bool,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gt_moment: Span,
    /// Best candidate before expansion.
    pub winner: Option<Span>,
    /// Span the answer stage read.
    pub chosen_span: Span,
    pub raw: Option<SpanMetrics>,
    pub expanded: Option<SpanMetrics>,
    /// Mean regressor output over positive / negative candidates, both modalities pooled.
    pub mean_positive_score: Option<f64>,
    pub mean_negative_score: Option<f64>,
    pub logits_video: Vec<f64>,
    pub logits_subtitle: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub mean_alpha: Option<f64>,
    pub mean_beta: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalizationStats {
    pub mean_iou: f64,
    pub mean_coverage: f64,
    /// Same metrics for the winning candidate before boundary expansion.
    pub mean_iou_raw: f64,
    pub mean_coverage_raw: f64,
    pub mean_positive_score: f64,
    pub mean_negative_score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub by_question_type: BTreeMap<String, GroupStats>,
    pub by_modality_label: BTreeMap<String, GroupStats>,
    pub localization: Option<LocalizationStats>,
}

#[derive(Default)]
struct Acc {
    count: usize,
    correct: usize,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

impl Acc {
    fn add(&mut self, t: &InferenceTrace) {
        self.count += 1;
        self.correct += t.correct as usize;
        self.alpha.extend(t.alpha);
        self.beta.extend(t.beta);
    }

    fn finish(self) -> GroupStats {
        GroupStats {
            count: self.count,
            correct: self.correct,
            accuracy: if self.count == 0 {
                0.0
            } else {
                self.correct as f64 / self.count as f64
            },
            mean_alpha: mean(&self.alpha),
            mean_beta: mean(&self.beta),
        }
    }
}

impl EvalReport {
    /// Aggregates traces; the report is a pure function of them.
    pub fn from_traces(traces: &[InferenceTrace]) -> Self {
        let mut by_type: BTreeMap<String, Acc> = QuestionType::ALL
            .iter()
            .map(|q| (q.as_str().to_string(), Acc::default()))
            .collect();
        let mut by_label: BTreeMap<String, Acc> = ModalityLabel::ALL
            .iter()
            .map(|l| (l.as_str().to_string(), Acc::default()))
            .collect();
        let mut overall = Acc::default();
        for t in traces {
            overall.add(t);
            by_type.entry(t.question_type.as_str().to_string()).or_default().add(t);
            by_label
                .entry(t.modality_label.as_str().to_string())
                .or_default()
                .add(t);
        }
        let expanded: Vec<SpanMetrics> = traces.iter().filter_map(|t| t.expanded).collect();
        let raw: Vec<SpanMetrics> = traces.iter().filter_map(|t| t.raw).collect();
        let localization = (!expanded.is_empty()).then(|| {
            let pos: Vec<f64> = traces.iter().filter_map(|t| t.mean_positive_score).collect();
            let neg: Vec<f64> = traces.iter().filter_map(|t| t.mean_negative_score).collect();
            LocalizationStats {
                mean_iou: mean(&expanded.iter().map(|m| m.iou).collect::<Vec<_>>()).unwrap_or(0.0),
                mean_coverage: mean(&expanded.iter().map(|m| m.coverage).collect::<Vec<_>>()).unwrap_or(0.0),
                mean_iou_raw: mean(&raw.iter().map(|m| m.iou).collect::<Vec<_>>()).unwrap_or(0.0),
                mean_coverage_raw: mean(&raw.iter().map(|m| m.coverage).collect::<Vec<_>>()).unwrap_or(0.0),
                mean_positive_score: mean(&pos).unwrap_or(0.0),
                mean_negative_score: mean(&neg).unwrap_or(0.0),
            }
        });
        let overall = overall.finish();
        Self {
            count: overall.count,
            correct: overall.correct,
            accuracy: overall.accuracy,
            by_question_type: by_type.into_iter().map(|(k, a)| (k, a.finish())).collect(),
            by_modality_label: by_label.into_iter().map(|(k, a)| (k, a.finish())).collect(),
            localization,
        }
    }

    /// One CSV row per group: `overall`, then question types, then labels.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "group",
            "name",
            "count",
            "correct",
            "accuracy",
            "mean_alpha",
            "mean_beta",
        ])?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            "overall",
            "all",
            &self.count.to_string(),
            &self.correct.to_string(),
            &self.accuracy.to_string(),
            "",
            "",
        ])?;
        for (group, map) in [
            ("question_type", &self.by_question_type),
            ("modality_label", &self.by_modality_label),
        ] {
            for (name, s) in map {
                w.write_record([
                    group,
                    name,
                    &s.count.to_string(),
                    &s.correct.to_string(),
                    &s.accuracy.to_string(),
                    &opt(s.mean_alpha),
                    &opt(s.mean_beta),
                ])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn mean_score(cands: &[msan::mpn::MoICandidate], label: CandidateLabel) -> Option<f64> {
    let xs: Vec<f64> = cands
        .iter()
        .filter(|c| c.label == label)
        .flat_map(|c| [c.raw_v, c.raw_s])
        .collect();
    mean(&xs)
}

/// Runs inference on one record.
pub fn infer(model: &Msan, params: &ParamStore, rec: &ClipRecord, moment: MomentSource) -> Result<InferenceTrace> {
    let mut g = Graph::with_params(params);
    let opts = ForwardOptions {
        train: false,
        moment,
        sample_seed: 0,
    };
    let out = model.forward(&mut g, rec, &opts)?;
    let raw = out.winner.map(|w| SpanMetrics::of(&w, &rec.gt_moment)).transpose()?;
    let expanded = out
        .predicted_span
        .map(|p| SpanMetrics::of(&p, &rec.gt_moment))
        .transpose()?;
    Ok(InferenceTrace {
        id: rec.id,
        question_type: rec.question_type,
        modality_label: rec.modality_label,
        gt_answer: rec.gt_answer,
        predicted_answer: out.predicted_answer,
        correct: out.predicted_answer == rec.gt_answer,
        alpha: out.alpha,
        beta: out.beta,
        gt_moment: rec.gt_moment,
        winner: out.winner,
        chosen_span: out.reasoning_span,
        raw,
        expanded,
        mean_positive_score: mean_score(&out.candidates, CandidateLabel::Positive),
        mean_negative_score: mean_score(&out.candidates, CandidateLabel::Negative),
        logits_video: out.logits_video,
        logits_subtitle: out.logits_subtitle,
        logits: out.logits,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub traces: Vec<InferenceTrace>,
}

pub fn evaluate(model: &Msan, params: &ParamStore, data: &[ClipRecord], moment: MomentSource) -> Result<EvalOutput> {
    model.check_params(params)?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let chunk = data.len().div_ceil(workers).max(1);
    let traces = std::thread::scope(|scope| {
        let handles: Vec<_> = data
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|r| infer(model, params, r, moment))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?
    .concat();
    Ok(EvalOutput {
        report: EvalReport::from_traces(&traces),
        traces,
    })
}
