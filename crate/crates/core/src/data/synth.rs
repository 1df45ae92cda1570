//! Synthetic clips with planted moments and modality-specific cues.
//!
//! Each record hides a ground-truth moment on an integer-unit timeline.
//! The localization modality carries a cue token in every unit of the
//! moment; the other modality carries the same question-referenced cue
//! in a decoy block outside it. The answer modality carries the answer
//! cue in every unit of the moment, and each of the four distractor answers
//! is anchored to a token placed outside the moment, so a model that reads
//! the whole clip sees all five candidates' tokens. The question names
//! its type, the localization and answer modalities, and both
//! localization cues.

use std::collections::BTreeSet;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    attach_action_concepts, segment_shots, ClipRecord, Frame, Modality, ModalityLabel, QuestionType, Span,
    SubtitleSentence, TokenId, Vocab, MAX_ACTION_CONCEPTS, NUM_ANSWERS,
};
use crate::error::{Error, Result};

const QUESTION_TAGS: usize = 6;
const INDICATORS: usize = 4;
const FILLERS: usize = 4;
const RESERVED_WORDS: usize = QUESTION_TAGS + INDICATORS + FILLERS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub num_clips: usize,
    /// Timeline length in units; one subtitle sentence per unit.
    pub timeline_length: usize,
    /// Frames per timeline unit.
    pub frame_rate: usize,
    pub vocab: Vocab,
    /// Number of cue words and cue concepts reserved for planting.
    pub cue_pool: usize,
    pub gt_min_length: usize,
    pub gt_max_length: usize,
    pub concepts_per_shot: usize,
    pub sentence_min_tokens: usize,
    pub sentence_max_tokens: usize,
    pub background_actions: usize,
    /// Relative weights for (S,S), (S,V), (V,S), (V,V).
    pub label_mix: [f64; 4],
    pub shot_threshold: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_clips: 2000,
            timeline_length: 8,
            frame_rate: 3,
            vocab: Vocab {
                words: 32,
                concepts: 20,
                actions: 12,
            },
            cue_pool: 12,
            gt_min_length: 2,
            gt_max_length: 3,
            concepts_per_shot: 2,
            sentence_min_tokens: 1,
            sentence_max_tokens: 2,
            background_actions: 0,
            label_mix: [0.25; 4],
            shot_threshold: 0.4,
        }
    }
}

/// Token ranges the generator reserves for cues.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CueSet {
    pub words: Range<TokenId>,
    pub concepts: Range<TokenId>,
    pub actions: Range<TokenId>,
}

impl CueSet {
    pub fn contains(&self, id: TokenId) -> bool {
        self.words.contains(&id) || self.concepts.contains(&id) || self.actions.contains(&id)
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.cue_pool < NUM_ANSWERS + 1 {
            return err(format!(
                "cue_pool {} must be at least {}",
                self.cue_pool,
                NUM_ANSWERS + 1
            ));
        }
        if self.vocab.words < RESERVED_WORDS + self.cue_pool + self.sentence_max_tokens {
            return err(format!(
                "{} words cannot hold {RESERVED_WORDS} reserved, {} cue and {} background words",
                self.vocab.words, self.cue_pool, self.sentence_max_tokens
            ));
        }
        if self.vocab.concepts < self.cue_pool + 2 * self.concepts_per_shot {
            return err(format!(
                "{} concepts cannot keep {} cues unique and adjacent shots disjoint",
                self.vocab.concepts, self.cue_pool
            ));
        }
        if self.vocab.actions < self.cue_pool + self.background_actions.min(1) {
            return err(format!(
                "{} actions cannot pair with {} cue concepts",
                self.vocab.actions, self.cue_pool
            ));
        }
        if self.concepts_per_shot < 2 {
            return err("concepts_per_shot must be at least 2".into());
        }
        if self.sentence_min_tokens == 0 || self.sentence_min_tokens > self.sentence_max_tokens {
            return err("sentence token bounds are inconsistent".into());
        }
        if self.gt_min_length == 0 || self.gt_min_length > self.gt_max_length {
            return err("ground-truth length bounds are inconsistent".into());
        }
        if self.gt_max_length >= self.timeline_length {
            return err("ground-truth moments must leave part of the timeline outside".into());
        }
        if self.frame_rate == 0 {
            return err("frame_rate must be positive".into());
        }
        if self.label_mix.iter().any(|w| !(*w >= 0.0)) || self.label_mix.iter().sum::<f64>() <= 0.0 {
            return err("label_mix weights must be non-negative with a positive sum".into());
        }
        Ok(())
    }

    pub fn cue_set(&self) -> CueSet {
        let v = &self.vocab;
        CueSet {
            words: v.word(RESERVED_WORDS)..v.word(RESERVED_WORDS) + self.cue_pool,
            concepts: v.concept(0)..v.concept(0) + self.cue_pool,
            actions: v.action(0)..v.action(0) + self.cue_pool,
        }
    }

    fn question_tag(&self, q: QuestionType) -> TokenId {
        let i = QuestionType::ALL.iter().position(|&x| x == q).unwrap_or(0);
        self.vocab.word(i)
    }

    /// Word naming the modality that localizes the moment.
    fn locate_indicator(&self, m: Modality) -> TokenId {
        match m {
            Modality::Subtitle => self.vocab.word(QUESTION_TAGS),
            Modality::Video => self.vocab.word(QUESTION_TAGS + 1),
        }
    }

    /// Word naming the modality that holds the answer.
    fn answer_indicator(&self, m: Modality) -> TokenId {
        match m {
            Modality::Subtitle => self.vocab.word(QUESTION_TAGS + 2),
            Modality::Video => self.vocab.word(QUESTION_TAGS + 3),
        }
    }

    fn filler(&self, i: usize) -> TokenId {
        self.vocab.word(QUESTION_TAGS + INDICATORS + i)
    }

    fn cue_word(&self, i: usize) -> TokenId {
        self.vocab.word(RESERVED_WORDS + i)
    }

    fn background_word<R: Rng>(&self, rng: &mut R) -> TokenId {
        let n = self.vocab.words - RESERVED_WORDS - self.cue_pool;
        self.vocab.word(RESERVED_WORDS + self.cue_pool + rng.gen_range(0..n))
    }

    fn cue_concept(&self, i: usize) -> TokenId {
        self.vocab.concept(i)
    }

    /// Action paired with a cue concept id.
    fn paired_action(&self, concept: TokenId) -> TokenId {
        self.vocab.action(concept - self.vocab.concept(0))
    }

    fn background_action<R: Rng>(&self, rng: &mut R) -> TokenId {
        let n = self.vocab.actions - self.cue_pool;
        self.vocab.action(self.cue_pool + rng.gen_range(0..n))
    }

    fn sample_label<R: Rng>(&self, rng: &mut R) -> ModalityLabel {
        let total: f64 = self.label_mix.iter().sum();
        let mut x = rng.gen::<f64>() * total;
        for (w, label) in self.label_mix.iter().zip(ModalityLabel::ALL) {
            if x < *w {
                return label;
            }
            x -= w;
        }
        ModalityLabel::ALL
            .into_iter()
            .zip(self.label_mix)
            .filter(|(_, w)| *w > 0.0)
            .next_back()
            .map(|(l, _)| l)
            .unwrap_or(ModalityLabel::SS)
    }
}

/// Generates `cfg.num_clips` records. A pure function of `(cfg, seed)`.
pub fn generate_synthetic(cfg: &GeneratorConfig, seed: u64) -> Result<Vec<ClipRecord>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.num_clips)
        .map(|i| generate_one(cfg, i as u64, &mut rng))
        .collect()
}

/// Units per placement role in one record.
struct Placement {
    units: usize,
    gt: Range<usize>,
}

impl Placement {
    fn inside(&self) -> Vec<usize> {
        self.gt.clone().collect()
    }

    /// Units outside the moment and not adjacent to it; falls back to any
    /// unit outside the moment when the timeline is too short.
    fn far_outside(&self) -> Vec<usize> {
        let far: Vec<usize> = (0..self.units)
            .filter(|&u| u + 1 < self.gt.start || u > self.gt.end)
            .collect();
        if far.is_empty() {
            (0..self.units).filter(|u| !self.gt.contains(u)).collect()
        } else {
            far
        }
    }

    /// A block with the moment's length that does not overlap it, if any.
    fn decoy_block<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let len = self.gt.len();
        let starts: Vec<usize> = (0..=self.units - len)
            .filter(|&s| s + len <= self.gt.start || s >= self.gt.end)
            .collect();
        match starts.choose(rng) {
            Some(&s) => (s..s + len).collect(),
            None => Vec::new(),
        }
    }
}

fn pick_distinct<R: Rng>(rng: &mut R, pool: usize, count: usize, exclude: &[usize]) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..pool).filter(|i| !exclude.contains(i)).collect();
    candidates.shuffle(rng);
    candidates.truncate(count);
    candidates
}

fn generate_one<R: Rng>(cfg: &GeneratorConfig, id: u64, rng: &mut R) -> Result<ClipRecord> {
    let units = cfg.timeline_length;
    let label = cfg.sample_label(rng);
    let question_type = QuestionType::ALL[rng.gen_range(0..QuestionType::ALL.len())];
    let gt_len = rng.gen_range(cfg.gt_min_length..=cfg.gt_max_length);
    let gt_start = rng.gen_range(0..=units - gt_len);
    let place = Placement {
        units,
        gt: gt_start..gt_start + gt_len,
    };

    // Localization cues: one word and one concept, both named in the question.
    let loc_word_idx = rng.gen_range(0..cfg.cue_pool);
    let loc_concept_idx = rng.gen_range(0..cfg.cue_pool);
    let loc_word = cfg.cue_word(loc_word_idx);
    let loc_concept = cfg.cue_concept(loc_concept_idx);

    // Answer cue first, then four distractors, all from the answer modality's pool.
    let answer_tokens: Vec<TokenId> = match label.answer() {
        Modality::Subtitle => pick_distinct(rng, cfg.cue_pool, NUM_ANSWERS, &[loc_word_idx])
            .into_iter()
            .map(|i| cfg.cue_word(i))
            .collect(),
        Modality::Video => pick_distinct(rng, cfg.cue_pool, NUM_ANSWERS, &[loc_concept_idx])
            .into_iter()
            .map(|i| cfg.cue_concept(i))
            .collect(),
    };

    let mut video_cues: Vec<Vec<TokenId>> = vec![Vec::new(); units];
    let mut subtitle_cues: Vec<Vec<TokenId>> = vec![Vec::new(); units];
    let decoy = place.decoy_block(rng);
    match label.localization() {
        Modality::Subtitle => {
            place.inside().into_iter().for_each(|u| subtitle_cues[u].push(loc_word));
            decoy.into_iter().for_each(|u| video_cues[u].push(loc_concept));
        }
        Modality::Video => {
            place.inside().into_iter().for_each(|u| video_cues[u].push(loc_concept));
            decoy.into_iter().for_each(|u| subtitle_cues[u].push(loc_word));
        }
    }
    let answer_track = match label.answer() {
        Modality::Subtitle => &mut subtitle_cues,
        Modality::Video => &mut video_cues,
    };
    place
        .inside()
        .into_iter()
        .for_each(|u| answer_track[u].push(answer_tokens[0]));
    let mut far = place.far_outside();
    far.shuffle(rng);
    for (k, &tok) in answer_tokens[1..].iter().enumerate() {
        let u = if k < far.len() {
            far[k]
        } else {
            *far.choose(rng).expect("outside units exist")
        };
        answer_track[u].push(tok);
    }

    // Video: one scene per unit with a background concept set disjoint from
    // the previous scene. Later frames of a unit may drop one concept.
    let cue_concepts = cfg.cue_pool;
    let background_concepts = cfg.vocab.concepts - cue_concepts;
    let mut frames = Vec::with_capacity(units * cfg.frame_rate);
    let mut prev_base: Vec<TokenId> = Vec::new();
    for (u, cues) in video_cues.iter().enumerate() {
        let mut base = Vec::with_capacity(cfg.concepts_per_shot);
        while base.len() < cfg.concepts_per_shot {
            let c = cfg.vocab.concept(cue_concepts + rng.gen_range(0..background_concepts));
            if !base.contains(&c) && !prev_base.contains(&c) {
                base.push(c);
            }
        }
        for f in 0..cfg.frame_rate {
            let mut set: BTreeSet<TokenId> = base.iter().copied().collect();
            if f > 0 && rng.gen_bool(1.0 / 3.0) {
                set.remove(&base[rng.gen_range(0..base.len())]);
            }
            set.extend(cues.iter().copied());
            frames.push(Frame {
                index: u * cfg.frame_rate + f,
                concepts: set.into_iter().collect(),
            });
        }
        prev_base = base;
    }
    let shots = segment_shots(&frames, cfg.shot_threshold, cfg.frame_rate as f64)?;
    let cue_range = cfg.cue_set().concepts;
    let labels: Vec<Vec<TokenId>> = shots
        .iter()
        .map(|s| {
            let mut acts: Vec<TokenId> = s
                .concepts
                .iter()
                .filter(|c| cue_range.contains(c))
                .map(|&c| cfg.paired_action(c))
                .collect();
            for _ in 0..cfg.background_actions {
                acts.push(cfg.background_action(rng));
            }
            acts.truncate(MAX_ACTION_CONCEPTS);
            acts
        })
        .collect();
    let shots = attach_action_concepts(shots, &labels)?;

    let sentences = subtitle_cues
        .iter()
        .enumerate()
        .map(|(u, cues)| {
            let n = rng.gen_range(cfg.sentence_min_tokens..=cfg.sentence_max_tokens);
            let mut tokens: Vec<TokenId> = (0..n).map(|_| cfg.background_word(rng)).collect();
            for &c in cues {
                let at = rng.gen_range(0..=tokens.len());
                tokens.insert(at, c);
            }
            SubtitleSentence {
                span: Span::new(u as f64, (u + 1) as f64),
                tokens,
            }
        })
        .collect();

    let question_tokens = vec![
        cfg.question_tag(question_type),
        cfg.locate_indicator(label.localization()),
        cfg.answer_indicator(label.answer()),
        loc_word,
        loc_concept,
    ];
    let gt_answer = rng.gen_range(0..NUM_ANSWERS);
    let mut order: Vec<TokenId> = answer_tokens[1..].to_vec();
    order.insert(gt_answer, answer_tokens[0]);
    let answers = order
        .into_iter()
        .map(|tok| vec![cfg.filler(rng.gen_range(0..FILLERS)), tok])
        .collect();

    Ok(ClipRecord {
        id,
        timeline_length: units as f64,
        shots,
        sentences,
        question_type,
        question_tokens,
        answers,
        gt_answer,
        gt_moment: Span::new(gt_start as f64, (gt_start + gt_len) as f64),
        modality_label: label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> GeneratorConfig {
        GeneratorConfig {
            num_clips: n,
            ..Default::default()
        }
    }

    fn answer_cue(r: &ClipRecord) -> TokenId {
        *r.answers[r.gt_answer].last().unwrap()
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(&small(50), 7).unwrap();
        let b = generate_synthetic(&small(50), 7).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = generate_synthetic(&small(50), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn records_validate() {
        for (i, r) in generate_synthetic(&small(200), 1).unwrap().iter().enumerate() {
            r.validate(i).unwrap();
            assert_eq!(r.shots.len(), r.sentences.len());
        }
    }

    #[test]
    fn exactly_one_candidate_has_answer_cue() {
        for r in generate_synthetic(&small(300), 2).unwrap() {
            let cue = answer_cue(&r);
            let hits = r.answers.iter().filter(|a| a.contains(&cue)).count();
            assert_eq!(hits, 1);
        }
    }

    #[test]
    fn answer_cue_only_inside_moment() {
        for r in generate_synthetic(&small(300), 3).unwrap() {
            let cue = answer_cue(&r);
            let outside_video = r
                .shots
                .iter()
                .filter(|s| !r.gt_moment.contains(&s.span))
                .any(|s| s.concepts.contains(&cue));
            let outside_text = r
                .sentences
                .iter()
                .filter(|s| !r.gt_moment.contains(&s.span))
                .any(|s| s.tokens.contains(&cue));
            assert!(!outside_video && !outside_text, "record {}", r.id);
            assert!(!r.question_tokens.contains(&cue));
            let inside = r.shots.iter().any(|s| s.concepts.contains(&cue))
                || r.sentences.iter().any(|s| s.tokens.contains(&cue));
            assert!(inside);
        }
    }

    #[test]
    fn distractors_sit_outside_moment() {
        for r in generate_synthetic(&small(300), 4).unwrap() {
            for (k, a) in r.answers.iter().enumerate() {
                if k == r.gt_answer {
                    continue;
                }
                let tok = *a.last().unwrap();
                let in_gt = r
                    .shots
                    .iter()
                    .filter(|s| s.span.overlaps(&r.gt_moment))
                    .any(|s| s.concepts.contains(&tok))
                    || r.sentences
                        .iter()
                        .filter(|s| s.span.overlaps(&r.gt_moment))
                        .any(|s| s.tokens.contains(&tok));
                let anywhere = r.all_tokens().filter(|&t| t == tok).count() > 1;
                assert!(!in_gt && anywhere, "record {} candidate {k}", r.id);
            }
        }
    }

    #[test]
    fn localization_cue_fills_moment_in_its_modality() {
        for r in generate_synthetic(&small(200), 5).unwrap() {
            let (word, concept) = (r.question_tokens[3], r.question_tokens[4]);
            match r.modality_label.localization() {
                Modality::Subtitle => {
                    for s in &r.sentences {
                        assert_eq!(s.tokens.contains(&word), r.gt_moment.contains(&s.span));
                    }
                }
                Modality::Video => {
                    for s in &r.shots {
                        assert_eq!(s.concepts.contains(&concept), r.gt_moment.contains(&s.span));
                    }
                }
            }
        }
    }

    #[test]
    fn action_labels_follow_video_cues() {
        let cfg = small(200);
        let cues = cfg.cue_set();
        for r in generate_synthetic(&cfg, 6).unwrap() {
            for s in &r.shots {
                for c in s.concepts.iter().filter(|c| cues.concepts.contains(c)) {
                    let paired = cfg.paired_action(*c);
                    assert!(s.action_concepts.contains(&paired));
                }
            }
        }
    }

    #[test]
    fn label_mix_matches_request() {
        let recs = generate_synthetic(&small(10_000), 11).unwrap();
        for label in ModalityLabel::ALL {
            let frac = recs.iter().filter(|r| r.modality_label == label).count() as f64 / recs.len() as f64;
            assert!((frac - 0.25).abs() <= 0.02, "{label:?}: {frac}");
        }
        let skewed = GeneratorConfig {
            num_clips: 10_000,
            label_mix: [0.7, 0.1, 0.1, 0.1],
            ..Default::default()
        };
        let recs = generate_synthetic(&skewed, 12).unwrap();
        let ss = recs.iter().filter(|r| r.modality_label == ModalityLabel::SS).count() as f64 / 1e4;
        assert!((ss - 0.7).abs() <= 0.02, "{ss}");
    }

    #[test]
    fn tiny_vocab_rejected() {
        let cfg = GeneratorConfig {
            cue_pool: 3,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&cfg, 0), Err(Error::Config(_))));
        let cfg = GeneratorConfig {
            vocab: Vocab {
                words: 20,
                concepts: 120,
                actions: 60,
            },
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&cfg, 0), Err(Error::Config(_))));
    }
}
