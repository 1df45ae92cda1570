//! The full network: shared encoders, moment proposal, heterogeneous
//! reasoning and the joint objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClipRecord, Span, TokenId, Vocab, NUM_ANSWERS};
use crate::encoder::{embed, embed_bags, init_embedding, BiLstm};
use crate::error::{Error, Result};
use crate::hrn::{
    attend_hypothesis, blend_logits, ce_loss, predict_logits, prepare_contexts, AnswerHead, HamOptions, HeadKind,
};
use crate::mlp::Mlp;
use crate::mpn::{
    cmr_loss, coverage, expand_span, generate_candidates, label_candidates, members, mim_alpha, select_moment,
    temporal_iou, MoICandidate, Modulation, MomentScorer, RankingLoss,
};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_emb: usize,
    /// Standard deviation of the initial token embeddings.
    pub embedding_std: f64,
    /// Encoder output width; each LSTM direction has `d / 2` units.
    pub d: usize,
    /// Without moment proposal the reasoning stage reads the whole clip.
    pub use_mpn: bool,
    pub mim_mpn: bool,
    pub mim_hrn: bool,
    pub modulation: Modulation,
    pub self_attention: bool,
    pub cross_context: bool,
    pub action_concepts: bool,
    pub head: HeadKind,
    /// Candidate window lengths as fractions of the timeline.
    pub windows: Vec<f64>,
    pub stride_fraction: f64,
    pub expand_fraction: f64,
    pub margin: f64,
    pub cmr_weight: f64,
    pub ce_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::data::GeneratorConfig::default().vocab.size(),
            d_emb: 32,
            embedding_std: 4.0,
            d: 64,
            use_mpn: true,
            mim_mpn: true,
            mim_hrn: true,
            modulation: Modulation::Additive,
            self_attention: true,
            cross_context: true,
            action_concepts: true,
            head: HeadKind::Scalar,
            windows: vec![0.25, 0.5, 1.0],
            stride_fraction: 0.5,
            expand_fraction: 0.25,
            margin: 0.2,
            cmr_weight: 1.0,
            ce_weight: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn for_vocab(vocab: &Vocab) -> Self {
        Self {
            vocab_size: vocab.size(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.vocab_size < 2 {
            return err("vocab_size must leave room for padding and one token".into());
        }
        if self.d_emb == 0 {
            return err("d_emb must be positive".into());
        }
        if !(self.embedding_std > 0.0 && self.embedding_std.is_finite()) {
            return err("embedding_std must be positive".into());
        }
        if self.d == 0 || self.d % 2 != 0 {
            return err(format!("d = {} must be even and positive", self.d));
        }
        if self.windows.is_empty() || self.windows.iter().any(|w| !(*w > 0.0)) {
            return err("windows must be a nonempty list of positive timeline fractions".into());
        }
        if !(self.stride_fraction > 0.0 && self.stride_fraction <= 1.0) {
            return err(format!("stride_fraction {} must be in (0, 1]", self.stride_fraction));
        }
        if !(self.expand_fraction >= 0.0) {
            return err("expand_fraction must be non-negative".into());
        }
        if !(self.margin >= 0.0) || !(self.cmr_weight >= 0.0) || !(self.ce_weight >= 0.0) {
            return err("margin and loss weights must be non-negative".into());
        }
        Ok(())
    }

    pub fn ham(&self) -> HamOptions {
        HamOptions {
            self_attention: self.self_attention,
            cross_context: self.cross_context,
        }
    }
}

/// Which span the reasoning stage reads at inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentSource {
    #[default]
    Predicted,
    GroundTruth,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Training adds the ranking loss and reads the expanded ground-truth
    /// moment regardless of `moment`.
    pub train: bool,
    pub moment: MomentSource,
    /// Seed for the positive/negative sampling of the ranking loss.
    pub sample_seed: u64,
}

/// Graph handles and extracted values for one record.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub loss: Var,
    pub ce: f64,
    /// `None` without moment proposal, at inference, or when skipped.
    pub cmr: Option<f64>,
    pub cmr_skipped: bool,
    /// No candidate reached the positive IoU threshold and one was promoted.
    pub promoted: bool,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub candidates: Vec<MoICandidate>,
    /// Winning candidate span before expansion.
    pub winner: Option<Span>,
    /// Winning span after expansion.
    pub predicted_span: Option<Span>,
    /// Span the reasoning stage read.
    pub reasoning_span: Span,
    pub logits_video: Vec<f64>,
    pub logits_subtitle: Vec<f64>,
    pub logits: Vec<f64>,
    pub predicted_answer: usize,
}

/// Localization quality of one prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanMetrics {
    pub iou: f64,
    pub coverage: f64,
}

impl SpanMetrics {
    pub fn of(pred: &Span, gt: &Span) -> Result<Self> {
        Ok(Self {
            iou: temporal_iou(pred, gt)?,
            coverage: coverage(pred, gt)?,
        })
    }
}

const ENCODER: &str = "encoder";

#[derive(Clone, Debug)]
pub struct Msan {
    cfg: ModelConfig,
    video_enc: BiLstm,
    subtitle_enc: BiLstm,
    hypothesis_enc: BiLstm,
    scorer: MomentScorer,
    alpha_gate: Mlp,
    head: AnswerHead,
    beta_gate: Mlp,
}

impl Msan {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        Ok(Self {
            video_enc: BiLstm::new(format!("{ENCODER}/video"), cfg.d_emb, d)?,
            subtitle_enc: BiLstm::new(format!("{ENCODER}/subtitle"), cfg.d_emb, d)?,
            hypothesis_enc: BiLstm::new(format!("{ENCODER}/hypothesis"), cfg.d_emb, d)?,
            scorer: MomentScorer::new("mpn", d)?,
            alpha_gate: Mlp::new("mpn/gate", d, d, 1),
            head: AnswerHead::new("hrn", cfg.ham().context_width(d), d, cfg.head)?,
            beta_gate: Mlp::new("hrn/gate", d, d, 1),
            cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Fresh parameters. Every tensor is drawn from `rng` in a fixed order.
    pub fn init_params_with(&self, rng: &mut ChaCha8Rng, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new(seed);
        init_embedding(
            &mut store,
            rng,
            self.cfg.vocab_size,
            self.cfg.d_emb,
            self.cfg.embedding_std,
        )?;
        // The three encoders start from one draw so that a token seen by
        // any stream lands near the same features; they train separately.
        let start = rng.clone();
        self.video_enc.init(&mut store, rng)?;
        self.subtitle_enc.init(&mut store, &mut start.clone())?;
        self.hypothesis_enc.init(&mut store, &mut start.clone())?;
        if self.cfg.use_mpn {
            self.scorer.init(&mut store, rng)?;
            if self.cfg.mim_mpn {
                self.alpha_gate.init(&mut store, rng)?;
            }
        }
        self.head.init(&mut store, rng)?;
        if self.cfg.mim_hrn {
            self.beta_gate.init(&mut store, rng)?;
        }
        Ok(store)
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.init_params_with(&mut ChaCha8Rng::seed_from_u64(seed), seed)
    }

    /// Checks that `store` holds exactly the tensors this configuration
    /// needs, with matching shapes.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        let expected = self.init_params(0)?;
        for (name, t) in expected.iter() {
            let got = store
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("checkpoint lacks parameter '{name}'")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' has shape {:?}, config (d = {}, d_emb = {}) expects {:?}",
                    got.shape(),
                    self.cfg.d,
                    self.cfg.d_emb,
                    t.shape()
                )));
            }
        }
        if let Some(extra) = store.names().find(|n| !expected.contains(n)) {
            return Err(Error::Checkpoint(format!(
                "checkpoint has unexpected parameter '{extra}'"
            )));
        }
        Ok(())
    }

    fn hypothesis_tokens(rec: &ClipRecord, k: usize) -> Vec<TokenId> {
        let mut t = rec.question_tokens.clone();
        t.extend_from_slice(&rec.answers[k]);
        t
    }

    /// Builds the whole forward pass for one record on `g`.
    pub fn forward(&self, g: &mut Graph<'_>, rec: &ClipRecord, opts: &ForwardOptions) -> Result<ForwardOutput> {
        if rec.answers.len() != NUM_ANSWERS {
            return Err(Error::Contract(format!(
                "record {} has {} answers",
                rec.id,
                rec.answers.len()
            )));
        }
        let cfg = &self.cfg;
        let timeline = rec.timeline_length;

        let shot_bags: Vec<Vec<TokenId>> = rec.shots.iter().map(|s| s.tokens(cfg.action_concepts)).collect();
        let sentence_bags: Vec<Vec<TokenId>> = rec.sentences.iter().map(|s| s.tokens.clone()).collect();
        let v0 = embed_bags(g, &shot_bags)?;
        let v = self.video_enc.encode(g, v0)?;
        let s0 = embed_bags(g, &sentence_bags)?;
        let s = self.subtitle_enc.encode(g, s0)?;
        let q0 = embed(g, &rec.question_tokens)?;
        let question = self.hypothesis_enc.encode(g, q0)?;
        let q = g.mean_rows(question)?;

        let mut candidates = Vec::new();
        let mut alpha = None;
        let mut cmr = None;
        let mut cmr_skipped = false;
        let mut promoted = false;
        let mut winner = None;
        let mut predicted_span = None;
        if cfg.use_mpn {
            let windows: Vec<f64> = cfg.windows.iter().map(|f| f * timeline).collect();
            candidates = generate_candidates(rec, &windows, cfg.stride_fraction)?.candidates;
            let raw = self.scorer.score(g, v, s, question, &candidates)?;
            let scores = if cfg.mim_mpn {
                let a = mim_alpha(g, q, &self.alpha_gate)?;
                alpha = Some(g.scalar(a)?);
                let one_minus = g.const_sub(1.0, a);
                crate::mpn::MomentScores {
                    video: cfg.modulation.apply_var(g, raw.video, a)?,
                    subtitle: cfg.modulation.apply_var(g, raw.subtitle, one_minus)?,
                }
            } else {
                raw
            };
            for (i, c) in candidates.iter_mut().enumerate() {
                c.raw_v = g.value(raw.video).values()[i];
                c.raw_s = g.value(raw.subtitle).values()[i];
                c.m_v = g.value(scores.video).values()[i];
                c.m_s = g.value(scores.subtitle).values()[i];
            }
            promoted = label_candidates(&mut candidates, &rec.gt_moment)?;
            if opts.train {
                let labels: Vec<_> = candidates.iter().map(|c| c.label).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(opts.sample_seed);
                match cmr_loss(g, scores, &labels, cfg.margin, &mut rng)? {
                    RankingLoss::Loss(l) => cmr = Some(l),
                    RankingLoss::Skipped => cmr_skipped = true,
                }
            }
            let (i, span) = select_moment(&candidates, cfg.expand_fraction, timeline)?;
            winner = Some(candidates[i].span);
            predicted_span = Some(span);
        }

        let reasoning_span = match (cfg.use_mpn, opts.train, opts.moment, predicted_span) {
            (false, ..) => rec.timeline(),
            (true, true, ..) | (true, false, MomentSource::GroundTruth, _) => {
                expand_span(&rec.gt_moment, cfg.expand_fraction, timeline)
            }
            (true, false, MomentSource::Predicted, Some(p)) => p,
            (true, false, MomentSource::Predicted, None) => unreachable!("selection ran above"),
        };
        let (shot_idx, sentence_idx) = members(rec, &reasoning_span);
        if shot_idx.is_empty() || sentence_idx.is_empty() {
            return Err(Error::EmptySequence(format!(
                "record {}: span [{}, {}] holds no shots or no sentences",
                rec.id, reasoning_span.start, reasoning_span.end
            )));
        }
        let v_span = g.select_rows(v, &shot_idx)?;
        let s_span = g.select_rows(s, &sentence_idx)?;
        let ham = cfg.ham();
        let pair = prepare_contexts(g, v_span, s_span, ham)?;
        let mut contexts = Vec::with_capacity(NUM_ANSWERS);
        for k in 0..NUM_ANSWERS {
            let h0 = embed(g, &Self::hypothesis_tokens(rec, k))?;
            let h = self.hypothesis_enc.encode(g, h0)?;
            contexts.push(attend_hypothesis(g, &pair, h, ham)?);
        }
        let (lv, ls) = predict_logits(g, &self.head, &contexts)?;
        let (beta_var, beta) = if cfg.mim_hrn {
            let z = self.beta_gate.forward(g, q)?;
            let b = g.sigmoid(z);
            (b, Some(g.scalar(b)?))
        } else {
            (g.input(Tensor::scalar(0.5)), None)
        };
        let logits = blend_logits(g, lv, ls, beta_var)?;
        let ce = ce_loss(g, logits, rec.gt_answer)?;

        let weighted_ce = g.scale(ce, cfg.ce_weight);
        let loss = match cmr {
            Some(l) => {
                let w = g.scale(l, cfg.cmr_weight);
                g.add(weighted_ce, w)?
            }
            None => weighted_ce,
        };
        let logits_v = g.value(lv).values().to_vec();
        let logits_s = g.value(ls).values().to_vec();
        let logits_all = g.value(logits).values().to_vec();
        let predicted_answer = argmax(&logits_all);
        Ok(ForwardOutput {
            loss,
            ce: g.scalar(ce)?,
            cmr: cmr.map(|l| g.scalar(l)).transpose()?,
            cmr_skipped,
            promoted,
            alpha,
            beta,
            candidates,
            winner,
            predicted_span,
            reasoning_span,
            logits_video: logits_v,
            logits_subtitle: logits_s,
            logits: logits_all,
            predicted_answer,
        })
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, GeneratorConfig};
    use crate::tensor::{grad_check, GradCheckOptions};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_emb: 6,
            d: 6,
            ..ModelConfig::default()
        }
    }

    fn records(n: usize) -> Vec<ClipRecord> {
        let cfg = GeneratorConfig {
            num_clips: n,
            ..Default::default()
        };
        generate_synthetic(&cfg, 3).unwrap()
    }

    fn run(model: &Msan, store: &ParamStore, rec: &ClipRecord, opts: &ForwardOptions) -> (f64, ForwardOutput) {
        let mut g = Graph::with_params(store);
        let out = model.forward(&mut g, rec, opts).unwrap();
        (g.scalar(out.loss).unwrap(), out)
    }

    #[test]
    fn forward_is_deterministic() {
        let model = Msan::new(tiny_cfg()).unwrap();
        let store = model.init_params(0).unwrap();
        let rec = &records(1)[0];
        let opts = ForwardOptions {
            train: true,
            ..Default::default()
        };
        let (a, oa) = run(&model, &store, rec, &opts);
        let (b, ob) = run(&model, &store, rec, &opts);
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(oa.logits, ob.logits);
        assert!(oa.cmr.is_some());
        assert_eq!(oa.candidates.len(), 11);
        let alpha = oa.alpha.unwrap();
        assert!(alpha > 0.0 && alpha < 1.0);
    }

    #[test]
    fn training_reads_expanded_ground_truth() {
        let model = Msan::new(tiny_cfg()).unwrap();
        let store = model.init_params(0).unwrap();
        let rec = &records(1)[0];
        let train = ForwardOptions {
            train: true,
            ..Default::default()
        };
        let (_, out) = run(&model, &store, rec, &train);
        assert_eq!(
            out.reasoning_span,
            expand_span(&rec.gt_moment, 0.25, rec.timeline_length)
        );
        let (_, out) = run(&model, &store, rec, &ForwardOptions::default());
        assert_eq!(Some(out.reasoning_span), out.predicted_span);
        assert!(out.cmr.is_none());
    }

    #[test]
    fn without_mpn_reads_the_whole_clip() {
        let model = Msan::new(ModelConfig {
            use_mpn: false,
            ..tiny_cfg()
        })
        .unwrap();
        let store = model.init_params(1).unwrap();
        assert!(!store.names().any(|n| n.starts_with("mpn/")));
        let rec = &records(1)[0];
        let (_, out) = run(&model, &store, rec, &ForwardOptions::default());
        assert_eq!(out.reasoning_span, rec.timeline());
        assert!(out.candidates.is_empty() && out.alpha.is_none());
    }

    #[test]
    fn attention_units_add_no_parameters() {
        let count = |sa: bool, c2c: bool| {
            let cfg = ModelConfig {
                self_attention: sa,
                cross_context: c2c,
                ..tiny_cfg()
            };
            Msan::new(cfg).unwrap().init_params(0).unwrap().num_values()
        };
        assert_eq!(count(true, true), count(false, true));
        assert_eq!(count(true, false), count(false, false));
        // Dropping the cross-context block only narrows the head's recurrent
        // input: d columns fewer, for 4·(d/2) gates, two directions, two modalities.
        let d = 6;
        assert_eq!(count(true, true) - count(true, false), d * 4 * (d / 2) * 2 * 2);
        let names: Vec<String> = Msan::new(tiny_cfg())
            .unwrap()
            .init_params(0)
            .unwrap()
            .names()
            .map(String::from)
            .collect();
        assert!(names
            .iter()
            .all(|n| n == "embedding" || ["encoder/", "mpn/", "hrn/"].iter().any(|p| n.starts_with(p))));
    }

    #[test]
    fn checkpoint_compatibility() {
        let model = Msan::new(tiny_cfg()).unwrap();
        let store = model.init_params(0).unwrap();
        model.check_params(&store).unwrap();
        let wider = Msan::new(ModelConfig { d: 8, ..tiny_cfg() }).unwrap();
        match wider.check_params(&store) {
            Err(Error::Checkpoint(m)) => assert!(m.contains("d = 8"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn full_forward_gradients() {
        let model = Msan::new(ModelConfig {
            d_emb: 4,
            d: 4,
            ..ModelConfig::default()
        })
        .unwrap();
        let store = model.init_params(2).unwrap();
        let rec = records(1).remove(0);
        let opts = ForwardOptions {
            train: true,
            moment: MomentSource::Predicted,
            sample_seed: 5,
        };
        let r = grad_check(
            &store,
            |g| Ok(model.forward(g, &rec, &opts)?.loss),
            &GradCheckOptions {
                samples_per_param: 10,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(r.passed(), "{:?}", r.worst());
    }
}
