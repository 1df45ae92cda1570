//! Heterogeneous reasoning: parameter-free dot-product attention units
//! composed into context/hypothesis features, per-modality answer heads
//! and gated logit blending.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::BiLstm;
use crate::error::{Error, Result};
use crate::mlp::Mlp;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Row-softmax of the similarities `X · Yᵀ` (`m × n`). Unscaled.
pub fn attention_weights(g: &mut Graph<'_>, x: Var, y: Var) -> Result<Var> {
    let (dx, dy) = (g.value(x).cols(), g.value(y).cols());
    if dx != dy {
        return Err(Error::Dimension(format!(
            "attention: query width {dx} differs from key width {dy}"
        )));
    }
    let yt = g.transpose(y)?;
    let sim = g.matmul(x, yt)?;
    g.softmax_rows(sim)
}

/// `softmax(X · Yᵀ) · Y`: each row of `X` becomes a convex combination of
/// the rows of `Y`.
pub fn dot_attention(g: &mut Graph<'_>, x: Var, y: Var) -> Result<Var> {
    let a = attention_weights(g, x, y)?;
    g.matmul(a, y)
}

pub fn self_attend(g: &mut Graph<'_>, x: Var) -> Result<Var> {
    dot_attention(g, x, x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HamOptions {
    pub self_attention: bool,
    pub cross_context: bool,
}

impl Default for HamOptions {
    fn default() -> Self {
        Self {
            self_attention: true,
            cross_context: true,
        }
    }
}

impl HamOptions {
    /// Width of each heterogeneous context row for encoder width `d`.
    pub fn context_width(&self, d: usize) -> usize {
        if self.cross_context {
            3 * d
        } else {
            2 * d
        }
    }
}

/// The transformed context pair for one hypothesis: `[V; V^H; V^S]` and
/// `[S; S^H; S^V]` (the last block is dropped without cross-context units).
#[derive(Clone, Copy, Debug)]
pub struct HeterogeneousContext {
    pub video: Var,
    pub subtitle: Var,
}

/// Hypothesis-independent part of the attention stack: self-attended
/// contexts and their cross-context views, shared by all five hypotheses.
#[derive(Clone, Copy, Debug)]
pub struct ContextPair {
    video: Var,
    subtitle: Var,
    video_from_subtitle: Option<Var>,
    subtitle_from_video: Option<Var>,
}

fn nonempty(g: &Graph<'_>, x: Var, stream: &str) -> Result<()> {
    if g.value(x).rows() == 0 {
        return Err(Error::EmptySequence(format!("{stream} stream is empty")));
    }
    Ok(())
}

pub fn prepare_contexts(g: &mut Graph<'_>, v: Var, s: Var, opts: HamOptions) -> Result<ContextPair> {
    nonempty(g, v, "video")?;
    nonempty(g, s, "subtitle")?;
    let (v, s) = if opts.self_attention {
        (self_attend(g, v)?, self_attend(g, s)?)
    } else {
        (v, s)
    };
    let (vs, sv) = if opts.cross_context {
        (Some(dot_attention(g, v, s)?), Some(dot_attention(g, s, v)?))
    } else {
        (None, None)
    };
    Ok(ContextPair {
        video: v,
        subtitle: s,
        video_from_subtitle: vs,
        subtitle_from_video: sv,
    })
}

/// Adds the context-to-query blocks for one encoded hypothesis.
pub fn attend_hypothesis(
    g: &mut Graph<'_>,
    ctx: &ContextPair,
    h: Var,
    opts: HamOptions,
) -> Result<HeterogeneousContext> {
    nonempty(g, h, "hypothesis")?;
    let h = if opts.self_attention { self_attend(g, h)? } else { h };
    let vh = dot_attention(g, ctx.video, h)?;
    let sh = dot_attention(g, ctx.subtitle, h)?;
    let mut v_blocks = vec![ctx.video, vh];
    let mut s_blocks = vec![ctx.subtitle, sh];
    if let (Some(vs), Some(sv)) = (ctx.video_from_subtitle, ctx.subtitle_from_video) {
        v_blocks.push(vs);
        s_blocks.push(sv);
    }
    Ok(HeterogeneousContext {
        video: g.concat_cols(&v_blocks)?,
        subtitle: g.concat_cols(&s_blocks)?,
    })
}

pub fn build_ham(g: &mut Graph<'_>, v: Var, s: Var, h: Var, opts: HamOptions) -> Result<HeterogeneousContext> {
    let pair = prepare_contexts(g, v, s, opts)?;
    attend_hypothesis(g, &pair, h, opts)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// One scalar per hypothesis; the five scalars form the logit vector.
    #[default]
    Scalar,
    /// Five outputs per hypothesis; hypothesis `k` contributes output `k`.
    Fc5,
}

/// Per-modality recurrent layer, temporal max-pool and two-layer perceptron.
#[derive(Clone, Debug)]
pub struct AnswerHead {
    video_rnn: BiLstm,
    subtitle_rnn: BiLstm,
    video_mlp: Mlp,
    subtitle_mlp: Mlp,
    kind: HeadKind,
}

impl AnswerHead {
    pub fn new(prefix: &str, context_width: usize, d: usize, kind: HeadKind) -> Result<Self> {
        let out = match kind {
            HeadKind::Scalar => 1,
            HeadKind::Fc5 => crate::data::NUM_ANSWERS,
        };
        Ok(Self {
            video_rnn: BiLstm::new(format!("{prefix}/video/rnn"), context_width, d)?,
            subtitle_rnn: BiLstm::new(format!("{prefix}/subtitle/rnn"), context_width, d)?,
            video_mlp: Mlp::new(format!("{prefix}/video/mlp"), d, d, out),
            subtitle_mlp: Mlp::new(format!("{prefix}/subtitle/mlp"), d, d, out),
            kind,
        })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.video_rnn.init(store, rng)?;
        self.subtitle_rnn.init(store, rng)?;
        self.video_mlp.init(store, rng)?;
        self.subtitle_mlp.init(store, rng)
    }

    fn score_one(&self, g: &mut Graph<'_>, x: Var, rnn: &BiLstm, mlp: &Mlp, k: usize) -> Result<Var> {
        let h = rnn.encode(g, x)?;
        let f = g.maxpool_time(h)?;
        let out = mlp.forward(g, f)?;
        match self.kind {
            HeadKind::Scalar => Ok(out),
            HeadKind::Fc5 => {
                let width = g.value(out).cols();
                let mut pick = vec![0.0; width];
                pick[k] = 1.0;
                let pick = g.input(Tensor::matrix(width, 1, pick)?);
                g.matmul(out, pick)
            }
        }
    }

    /// `(ℓ_v[k], ℓ_s[k])` for hypothesis `k`, each `1 × 1`.
    pub fn score(&self, g: &mut Graph<'_>, ctx: &HeterogeneousContext, k: usize) -> Result<(Var, Var)> {
        let v = self.score_one(g, ctx.video, &self.video_rnn, &self.video_mlp, k)?;
        let s = self.score_one(g, ctx.subtitle, &self.subtitle_rnn, &self.subtitle_mlp, k)?;
        Ok((v, s))
    }
}

/// Scores every hypothesis independently and assembles the `1 × 5` logit
/// rows `(ℓ_v, ℓ_s)`.
pub fn predict_logits(g: &mut Graph<'_>, head: &AnswerHead, contexts: &[HeterogeneousContext]) -> Result<(Var, Var)> {
    if contexts.is_empty() {
        return Err(Error::EmptySequence("no hypotheses to score".into()));
    }
    let mut lv = Vec::with_capacity(contexts.len());
    let mut ls = Vec::with_capacity(contexts.len());
    for (k, ctx) in contexts.iter().enumerate() {
        let (v, s) = head.score(g, ctx, k)?;
        lv.push(v);
        ls.push(s);
    }
    Ok((g.concat_cols(&lv)?, g.concat_cols(&ls)?))
}

/// `β·ℓ_v + (1 − β)·ℓ_s` with `β` a `1 × 1` gate.
pub fn blend_logits(g: &mut Graph<'_>, lv: Var, ls: Var, beta: Var) -> Result<Var> {
    let a = g.mul_scalar(lv, beta)?;
    let one_minus = g.const_sub(1.0, beta);
    let b = g.mul_scalar(ls, one_minus)?;
    g.add(a, b)
}

pub fn ce_loss(g: &mut Graph<'_>, logits: Var, gt_answer: usize) -> Result<Var> {
    g.cross_entropy(logits, gt_answer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::matrix(n, d, (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    /// Two-loop oracle for `softmax(X Yᵀ) Y`, summing in the same order.
    fn brute_attention(x: &Tensor, y: &Tensor) -> Vec<f64> {
        let (m, n, d) = (x.rows(), y.rows(), x.cols());
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let sims: Vec<f64> = (0..n)
                .map(|j| {
                    let mut s = 0.0;
                    for k in 0..d {
                        s += x.get(i, k) * y.get(j, k);
                    }
                    s
                })
                .collect();
            let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = sims.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..n {
                let a = e[j] / z;
                for k in 0..d {
                    out[i * d + k] += a * y.get(j, k);
                }
            }
        }
        out
    }

    fn attend(x: &Tensor, y: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let (xv, yv) = (g.input(x.clone()), g.input(y.clone()));
        let o = dot_attention(&mut g, xv, yv).unwrap();
        g.value(o).clone()
    }

    #[test]
    fn single_key_copies_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(&mut rng, 4, 3);
        let y = random(&mut rng, 1, 3);
        let out = attend(&x, &y);
        for i in 0..4 {
            assert_eq!(out.row(i), y.row(0));
        }
    }

    #[test]
    fn matches_two_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let x = random(&mut rng, 5, 3);
            let y = random(&mut rng, 5, 3);
            let out = attend(&x, &y);
            let oracle = brute_attention(&x, &y);
            for (a, b) in out.values().iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn width_mismatch() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(2, 3));
        let y = g.input(Tensor::zeros(2, 4));
        assert!(matches!(dot_attention(&mut g, x, y), Err(Error::Dimension(_))));
    }

    #[test]
    fn self_attention_is_definitional() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 4, 3);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let a = self_attend(&mut g, xv).unwrap();
        assert_eq!(g.value(a), &attend(&x, &x));
        let one = random(&mut rng, 1, 3);
        assert_eq!(attend(&one, &one), one);
        let same = Tensor::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]).unwrap();
        assert_eq!(attend(&same, &same), same);
    }

    #[test]
    fn permutation_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 4, 3);
        let y = random(&mut rng, 5, 3);
        let base = attend(&x, &y);
        let perm = [3, 0, 4, 1, 2];
        let yp = Tensor::from_rows(&perm.iter().map(|&i| y.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let out = attend(&x, &yp);
        for (a, b) in out.values().iter().zip(base.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        let xp = Tensor::from_rows(&[x.row(2), x.row(0), x.row(3), x.row(1)]).unwrap();
        let out = attend(&xp, &y);
        for (r, &src) in [2, 0, 3, 1].iter().enumerate() {
            assert_eq!(out.row(r), base.row(src));
        }
    }

    #[test]
    fn ham_shapes_and_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (v, s, h) = (random(&mut rng, 3, 4), random(&mut rng, 5, 4), random(&mut rng, 6, 4));
        let mut g = Graph::new();
        let (vv, sv, hv) = (g.input(v.clone()), g.input(s.clone()), g.input(h.clone()));
        let ctx = build_ham(&mut g, vv, sv, hv, HamOptions::default()).unwrap();
        let vt = g.value(ctx.video).clone();
        let st = g.value(ctx.subtitle).clone();
        assert_eq!(vt.shape(), &[3, 12]);
        assert_eq!(st.shape(), &[5, 12]);

        let (v1, s1, h1) = (attend(&v, &v), attend(&s, &s), attend(&h, &h));
        let blocks = [v1.clone(), attend(&v1, &h1), attend(&v1, &s1)];
        for i in 0..3 {
            let expect: Vec<f64> = blocks.iter().flat_map(|b| b.row(i).to_vec()).collect();
            assert_eq!(vt.row(i), expect.as_slice());
        }
        // Middle block rows lie within the per-column range of the
        // self-attended hypothesis rows.
        for i in 0..3 {
            for k in 0..4 {
                let x = vt.get(i, 4 + k);
                let lo = (0..6).map(|j| h1.get(j, k)).fold(f64::INFINITY, f64::min);
                let hi = (0..6).map(|j| h1.get(j, k)).fold(f64::NEG_INFINITY, f64::max);
                assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn ham_without_cross_context() {
        let mut g = Graph::new();
        let v = g.input(Tensor::zeros(2, 3));
        let s = g.input(Tensor::zeros(4, 3));
        let h = g.input(Tensor::zeros(1, 3));
        let opts = HamOptions {
            self_attention: false,
            cross_context: false,
        };
        let ctx = build_ham(&mut g, v, s, h, opts).unwrap();
        assert_eq!(g.value(ctx.video).shape(), &[2, 6]);
        assert_eq!(g.value(ctx.subtitle).shape(), &[4, 6]);
    }

    #[test]
    fn blend_examples() {
        let mut g = Graph::new();
        let lv = g.input(Tensor::row_vector(vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let ls = g.input(Tensor::row_vector(vec![0.0, 1.0, 0.0, 0.0, 0.0]).unwrap());
        let half = g.input(Tensor::scalar(0.5));
        let l = blend_logits(&mut g, lv, ls, half).unwrap();
        assert_eq!(g.value(l).values(), &[0.5, 0.5, 0.0, 0.0, 0.0]);
        let near_one = g.input(Tensor::scalar(1.0 - 1e-12));
        let l = blend_logits(&mut g, lv, ls, near_one).unwrap();
        assert!((g.value(l).values()[0] - 1.0).abs() < 1e-11);
    }

    #[test]
    fn ce_out_of_range() {
        let mut g = Graph::new();
        let l = g.input(Tensor::row_vector(vec![0.0; 5]).unwrap());
        assert!(matches!(ce_loss(&mut g, l, 5), Err(Error::Contract(_))));
        let loss = ce_loss(&mut g, l, 2).unwrap();
        assert!((g.scalar(loss).unwrap() - 5f64.ln()).abs() < 1e-12);
    }

    fn head_fixture(kind: HeadKind) -> (ParamStore, AnswerHead, Vec<Tensor>) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new(5);
        let head = AnswerHead::new("hrn", 6, 4, kind).unwrap();
        head.init(&mut store, &mut rng).unwrap();
        let inputs = (0..10).map(|_| random(&mut rng, 3, 6)).collect();
        (store, head, inputs)
    }

    fn logits_for(store: &ParamStore, head: &AnswerHead, inputs: &[Tensor]) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::with_params(store);
        let ctxs: Vec<HeterogeneousContext> = inputs
            .chunks(2)
            .map(|c| HeterogeneousContext {
                video: g.input(c[0].clone()),
                subtitle: g.input(c[1].clone()),
            })
            .collect();
        let (lv, ls) = predict_logits(&mut g, head, &ctxs).unwrap();
        (g.value(lv).values().to_vec(), g.value(ls).values().to_vec())
    }

    #[test]
    fn scalar_head_is_permutation_equivariant() {
        let (store, head, inputs) = head_fixture(HeadKind::Scalar);
        let (lv, ls) = logits_for(&store, &head, &inputs);
        assert_eq!(lv.len(), 5);
        assert!(lv.iter().chain(&ls).all(|v| v.is_finite()));
        let perm = [4, 2, 0, 1, 3];
        let permuted: Vec<Tensor> = perm.iter().flat_map(|&k| inputs[2 * k..2 * k + 2].to_vec()).collect();
        let (pv, ps) = logits_for(&store, &head, &permuted);
        for (i, &k) in perm.iter().enumerate() {
            assert_eq!(pv[i], lv[k]);
            assert_eq!(ps[i], ls[k]);
        }
    }

    #[test]
    fn fc5_head_produces_five_logits() {
        let (store, head, inputs) = head_fixture(HeadKind::Fc5);
        let (lv, ls) = logits_for(&store, &head, &inputs);
        assert_eq!((lv.len(), ls.len()), (5, 5));
    }

    #[test]
    fn head_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new(6);
        let head = AnswerHead::new("hrn", 12, 4, HeadKind::Scalar).unwrap();
        head.init(&mut store, &mut rng).unwrap();
        store.insert("beta", Tensor::scalar(0.3)).unwrap();
        let raw: Vec<Tensor> = (0..15).map(|_| random(&mut rng, 3, 4)).collect();
        let r = grad_check(
            &store,
            |g| {
                let beta = g.param("beta")?;
                let beta = g.sigmoid(beta);
                let mut ctxs = Vec::new();
                for k in 0..5 {
                    let v = g.input(raw[3 * k].clone());
                    let s = g.input(raw[3 * k + 1].clone());
                    let h = g.input(raw[3 * k + 2].clone());
                    ctxs.push(build_ham(g, v, s, h, HamOptions::default())?);
                }
                let (lv, ls) = predict_logits(g, &head, &ctxs)?;
                let l = blend_logits(g, lv, ls, beta)?;
                ce_loss(g, l, 2)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passed(), "{:?}", r.worst());
    }
}
