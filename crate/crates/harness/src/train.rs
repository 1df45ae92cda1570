//! Mini-batch training with Adam and early stopping on validation accuracy.

use std::collections::BTreeMap;

use log::info;
use msan::data::ClipRecord;
use msan::tensor::{Graph, ParamStore};
use msan::{Error as CoreError, ForwardOptions, MomentSource, Msan};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::Result;
use crate::eval::evaluate;
use crate::optim::Adam;
use crate::seeds::{substream, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_ce: f64,
    /// Mean ranking loss over records that produced one.
    pub mean_cmr: Option<f64>,
    pub cmr_skipped: usize,
    pub valid_accuracy: f64,
    pub valid_iou: Option<f64>,
    pub valid_coverage: Option<f64>,
    pub improved: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_valid_accuracy: f64,
    pub stopped_early: bool,
    pub steps: usize,
}

impl TrainLog {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "epoch",
            "mean_loss",
            "mean_ce",
            "mean_cmr",
            "cmr_skipped",
            "valid_accuracy",
            "valid_iou",
            "valid_coverage",
            "improved",
        ])?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.mean_loss.to_string(),
                e.mean_ce.to_string(),
                opt(e.mean_cmr),
                e.cmr_skipped.to_string(),
                e.valid_accuracy.to_string(),
                opt(e.valid_iou),
                opt(e.valid_coverage),
                e.improved.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub params: ParamStore,
    pub log: TrainLog,
}

fn add_into(sum: &mut BTreeMap<String, Vec<f64>>, grads: &msan::tensor::Gradients) {
    for (name, g) in grads.iter() {
        match sum.get_mut(name) {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => {
                sum.insert(name.to_string(), g.to_vec());
            }
        }
    }
}

/// Trains from freshly initialised parameters.
pub fn train(cfg: &TrainConfig, train_set: &[ClipRecord], valid_set: &[ClipRecord]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = Msan::new(cfg.model.clone())?;
    let mut init_rng = substream(cfg.seed, Stream::Init);
    let params = model.init_params_with(&mut init_rng, cfg.seed)?;
    train_from(cfg, &model, params, train_set, valid_set)
}

pub fn train_from(
    cfg: &TrainConfig,
    model: &Msan,
    mut params: ParamStore,
    train_set: &[ClipRecord],
    valid_set: &[ClipRecord],
) -> Result<TrainOutcome> {
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(CoreError::Config("training and validation sets must be nonempty".into()).into());
    }
    let mut adam = Adam::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut shuffle_rng = substream(cfg.seed, Stream::Shuffle);
    let mut sample_rng = substream(cfg.seed, Stream::Sampling);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = TrainLog {
        best_valid_accuracy: f64::NEG_INFINITY,
        ..Default::default()
    };
    let mut best = params.clone();
    let mut bad_epochs = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut ce_sum, mut cmr_sum) = (0.0, 0.0, 0.0);
        let (mut cmr_count, mut skipped) = (0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for &i in batch {
                let rec = &train_set[i];
                let opts = ForwardOptions {
                    train: true,
                    moment: MomentSource::GroundTruth,
                    sample_seed: sample_rng.gen(),
                };
                let mut g = Graph::with_params(&params);
                let out = model.forward(&mut g, rec, &opts)?;
                let loss = g.scalar(out.loss)?;
                if !loss.is_finite() {
                    return Err(CoreError::Divergence(format!(
                        "loss {loss} at epoch {epoch}, step {}, record {}",
                        log.steps + 1,
                        rec.id
                    ))
                    .into());
                }
                loss_sum += loss;
                ce_sum += out.ce;
                if let Some(c) = out.cmr {
                    cmr_sum += c;
                    cmr_count += 1;
                }
                skipped += out.cmr_skipped as usize;
                add_into(&mut grads, &g.backward(out.loss)?);
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grads.values_mut() {
                g.iter_mut().for_each(|x| *x *= scale);
            }
            adam.update(&mut params, &grads);
            log.steps += 1;
        }

        let valid = evaluate(model, &params, valid_set, MomentSource::Predicted)?;
        let acc = valid.report.accuracy;
        let improved = acc > log.best_valid_accuracy;
        if improved {
            log.best_valid_accuracy = acc;
            log.best_epoch = epoch;
            best = params.clone();
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
        }
        let n = train_set.len() as f64;
        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / n,
            mean_ce: ce_sum / n,
            mean_cmr: (cmr_count > 0).then(|| cmr_sum / cmr_count as f64),
            cmr_skipped: skipped,
            valid_accuracy: acc,
            valid_iou: valid.report.localization.as_ref().map(|l| l.mean_iou),
            valid_coverage: valid.report.localization.as_ref().map(|l| l.mean_coverage),
            improved,
        };
        info!(
            "epoch {epoch}: loss {:.4} ce {:.4} valid acc {:.4} iou {:?}",
            entry.mean_loss, entry.mean_ce, acc, entry.valid_iou
        );
        log.epochs.push(entry);
        if bad_epochs >= cfg.early_stop_patience {
            log.stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    Ok(TrainOutcome { params: best, log })
}
