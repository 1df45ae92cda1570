//! Model-variant comparisons under one shared seed and recipe.

use std::fmt;
use std::str::FromStr;

use log::info;
use msan::data::ClipRecord;
use msan::mpn::Modulation;
use msan::{Error as CoreError, ModelConfig, MomentSource, Msan};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::Result;
use crate::eval::{evaluate, EvalReport};
use crate::train::{train, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoMpn,
    GtMoment,
    NoSa,
    NoC2c,
    NoMimMpn,
    NoMimHrn,
    Additive,
    Multiplicative,
    Residual,
    NoActionConcepts,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Self::Full,
        Self::NoMpn,
        Self::GtMoment,
        Self::NoSa,
        Self::NoC2c,
        Self::NoMimMpn,
        Self::NoMimHrn,
        Self::Additive,
        Self::Multiplicative,
        Self::Residual,
        Self::NoActionConcepts,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoMpn => "no-mpn",
            Self::GtMoment => "gt-moment",
            Self::NoSa => "no-sa",
            Self::NoC2c => "no-c2c",
            Self::NoMimMpn => "no-mim-mpn",
            Self::NoMimHrn => "no-mim-hrn",
            Self::Additive => "additive",
            Self::Multiplicative => "multiplicative",
            Self::Residual => "residual",
            Self::NoActionConcepts => "no-action-concepts",
        }
    }

    /// Model configuration this variant trains, derived from `base`.
    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        let mut m = base.clone();
        match self {
            Self::Full | Self::GtMoment => {}
            Self::NoMpn => m.use_mpn = false,
            Self::NoSa => m.self_attention = false,
            Self::NoC2c => m.cross_context = false,
            Self::NoMimMpn => m.mim_mpn = false,
            Self::NoMimHrn => m.mim_hrn = false,
            Self::Additive => m.modulation = Modulation::Additive,
            Self::Multiplicative => m.modulation = Modulation::Multiplicative,
            Self::Residual => m.modulation = Modulation::Residual,
            Self::NoActionConcepts => m.action_concepts = false,
        }
        m
    }

    pub fn moment_source(self) -> MomentSource {
        match self {
            Self::GtMoment => MomentSource::GroundTruth,
            _ => MomentSource::Predicted,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = CoreError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|v| v.as_str()).collect();
            CoreError::Config(format!("unknown variant `{s}`; valid variants: {}", names.join(", ")))
        })
    }
}

pub fn parse_variants(names: &[String]) -> Result<Vec<Variant>> {
    Ok(names
        .iter()
        .map(|n| n.parse())
        .collect::<std::result::Result<Vec<_>, _>>()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub accuracy: f64,
    pub mean_iou: Option<f64>,
    pub mean_coverage: Option<f64>,
    pub mean_iou_raw: Option<f64>,
    pub mean_coverage_raw: Option<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "variant",
            "accuracy",
            "mean_iou",
            "mean_coverage",
            "mean_iou_raw",
            "mean_coverage_raw",
            "best_epoch",
            "epochs_run",
        ])?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.variant.to_string(),
                r.accuracy.to_string(),
                opt(r.mean_iou),
                opt(r.mean_coverage),
                opt(r.mean_iou_raw),
                opt(r.mean_coverage_raw),
                r.best_epoch.to_string(),
                r.epochs_run.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Finished training runs keyed by model configuration. Only valid for one
/// (recipe, training set, validation set) triple.
#[derive(Default)]
pub struct TrainedRuns {
    runs: Vec<(ModelConfig, TrainOutcome)>,
}

impl TrainedRuns {
    pub fn insert(&mut self, model: ModelConfig, outcome: TrainOutcome) {
        self.runs.retain(|(m, _)| *m != model);
        self.runs.push((model, outcome));
    }

    pub fn get(&self, model: &ModelConfig) -> Option<&TrainOutcome> {
        self.runs.iter().find(|(m, _)| m == model).map(|(_, o)| o)
    }
}

/// Trains and evaluates each variant. Variants that share a model
/// configuration share one training run.
pub fn ablate(
    cfg: &TrainConfig,
    train_set: &[ClipRecord],
    valid_set: &[ClipRecord],
    test_set: &[ClipRecord],
    variants: &[Variant],
) -> Result<AblationTable> {
    ablate_with(
        cfg,
        train_set,
        valid_set,
        test_set,
        variants,
        &mut TrainedRuns::default(),
    )
}

/// [`ablate`], reusing and extending `runs`.
pub fn ablate_with(
    cfg: &TrainConfig,
    train_set: &[ClipRecord],
    valid_set: &[ClipRecord],
    test_set: &[ClipRecord],
    variants: &[Variant],
    runs: &mut TrainedRuns,
) -> Result<AblationTable> {
    cfg.validate()?;
    let mut table = AblationTable::default();
    for &v in variants {
        let model_cfg = v.model_config(&cfg.model);
        if runs.get(&model_cfg).is_none() {
            info!("training variant {v}");
            let run_cfg = TrainConfig {
                model: model_cfg.clone(),
                ..cfg.clone()
            };
            runs.insert(model_cfg.clone(), train(&run_cfg, train_set, valid_set)?);
        }
        let outcome = runs.get(&model_cfg).expect("run inserted above");
        let model = Msan::new(model_cfg)?;
        let report = evaluate(&model, &outcome.params, test_set, v.moment_source())?.report;
        let loc = report.localization.as_ref();
        table.rows.push(AblationRow {
            variant: v,
            accuracy: report.accuracy,
            mean_iou: loc.map(|l| l.mean_iou),
            mean_coverage: loc.map(|l| l.mean_coverage),
            mean_iou_raw: loc.map(|l| l.mean_iou_raw),
            mean_coverage_raw: loc.map(|l| l.mean_coverage_raw),
            best_epoch: outcome.log.best_epoch,
            epochs_run: outcome.log.epochs.len(),
            report,
        });
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{v}\""));
        }
    }

    #[test]
    fn unknown_variant_lists_valid_names() {
        let err = parse_variants(&["full".into(), "no-hrn".into()]).unwrap_err();
        assert_eq!(err.category(), "config");
        let msg = err.to_string();
        assert!(
            msg.contains("no-hrn") && msg.contains("gt-moment") && msg.contains("no-action-concepts"),
            "{msg}"
        );
    }

    #[test]
    fn gt_moment_shares_the_full_model() {
        let base = ModelConfig::default();
        assert_eq!(Variant::GtMoment.model_config(&base), Variant::Full.model_config(&base));
        assert_eq!(Variant::Additive.model_config(&base), base);
        assert!(!Variant::NoMpn.model_config(&base).use_mpn);
    }
}
