//! Token embeddings and the one-layer bidirectional LSTM encoder.

use rand::Rng;

use crate::data::TokenId;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Var};

pub const EMBEDDING: &str = "embedding";

/// Adds the shared token table, `N(0, std²)` initialised. Row 0 is padding.
pub fn init_embedding<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    vocab_size: usize,
    d_emb: usize,
    std: f64,
) -> Result<()> {
    store.insert_normal(rng, EMBEDDING, vocab_size, d_emb, std)?;
    let pad = store.get_mut(EMBEDDING)?;
    pad.values_mut()[..d_emb].iter_mut().for_each(|v| *v = 0.0);
    Ok(())
}

/// `n × d_emb` rows for a token sequence.
pub fn embed(g: &mut Graph<'_>, tokens: &[TokenId]) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence("embedding an empty token list".into()));
    }
    let table = g.param(EMBEDDING)?;
    g.embed(table, tokens)
}

/// One mean-pooled row per token bag (a shot or a subtitle sentence).
pub fn embed_bags(g: &mut Graph<'_>, bags: &[Vec<TokenId>]) -> Result<Var> {
    let table = g.param(EMBEDDING)?;
    g.embed_bags(table, bags)
}

/// Weights of one bidirectional LSTM layer stored under `prefix`.
///
/// Each direction has `w_ih: in × 4h`, `w_hh: h × 4h` and `b: 1 × 4h` with
/// `h = d / 2`, so the concatenated output is `n × d`.
#[derive(Clone, Debug)]
pub struct BiLstm {
    prefix: String,
    input: usize,
    hidden: usize,
}

/// Input projections for both directions, computed once per sequence so
/// that several sub-ranges can be run through the recurrence.
#[derive(Clone, Copy, Debug)]
pub struct Projected {
    fwd: Var,
    bwd: Var,
}

impl BiLstm {
    pub fn new(prefix: impl Into<String>, input: usize, d: usize) -> Result<Self> {
        if d == 0 || d % 2 != 0 {
            return Err(Error::Config(format!("encoder width {d} must be even and positive")));
        }
        Ok(Self {
            prefix: prefix.into(),
            input,
            hidden: d / 2,
        })
    }

    pub fn output_width(&self) -> usize {
        2 * self.hidden
    }

    fn name(&self, dir: &str, w: &str) -> String {
        format!("{}/{dir}/{w}", self.prefix)
    }

    /// Draws every weight from `U(-1/√h, 1/√h)`.
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let bound = 1.0 / (self.hidden as f64).sqrt();
        let h4 = 4 * self.hidden;
        for dir in ["fwd", "bwd"] {
            store.insert_uniform(rng, &self.name(dir, "w_ih"), self.input, h4, bound)?;
            store.insert_uniform(rng, &self.name(dir, "w_hh"), self.hidden, h4, bound)?;
            store.insert_uniform(rng, &self.name(dir, "b"), 1, h4, bound)?;
        }
        Ok(())
    }

    pub fn project(&self, g: &mut Graph<'_>, x: Var) -> Result<Projected> {
        let width = g.value(x).cols();
        if width != self.input {
            return Err(Error::Dimension(format!(
                "{}: input width {width}, expected {}",
                self.prefix, self.input
            )));
        }
        let mut proj = |dir: &str| -> Result<Var> {
            let w = g.param(&self.name(dir, "w_ih"))?;
            let b = g.param(&self.name(dir, "b"))?;
            g.linear(x, w, b)
        };
        Ok(Projected {
            fwd: proj("fwd")?,
            bwd: proj("bwd")?,
        })
    }

    /// Runs both directions over the given rows of a projected sequence
    /// (all rows when `rows` is `None`).
    pub fn run(&self, g: &mut Graph<'_>, p: Projected, rows: Option<&[usize]>) -> Result<Var> {
        let (fwd_in, bwd_in) = match rows {
            Some(r) => (g.select_rows(p.fwd, r)?, g.select_rows(p.bwd, r)?),
            None => (p.fwd, p.bwd),
        };
        let wf = g.param(&self.name("fwd", "w_hh"))?;
        let wb = g.param(&self.name("bwd", "w_hh"))?;
        let f = g.lstm(fwd_in, wf, false)?;
        let b = g.lstm(bwd_in, wb, true)?;
        g.concat_cols(&[f, b])
    }

    /// `n × d` encoding of an `n × input` sequence.
    pub fn encode(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        if g.value(x).rows() == 0 {
            return Err(Error::EmptySequence(format!("{}: empty sequence", self.prefix)));
        }
        let p = self.project(g, x)?;
        self.run(g, p, None)
    }
}
