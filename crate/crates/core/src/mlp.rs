//! Two-layer perceptron `FC(hidden) → ReLU → FC(out)` without an output
//! activation.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct Mlp {
    prefix: String,
    input: usize,
    hidden: usize,
    output: usize,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            prefix: prefix.into(),
            input,
            hidden,
            output,
        }
    }

    pub fn output_width(&self) -> usize {
        self.output
    }

    fn name(&self, w: &str) -> String {
        format!("{}/{w}", self.prefix)
    }

    /// Each layer is drawn from `U(-1/√fan_in, 1/√fan_in)`.
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let b1 = 1.0 / (self.input as f64).sqrt();
        let b2 = 1.0 / (self.hidden as f64).sqrt();
        store.insert_uniform(rng, &self.name("w1"), self.input, self.hidden, b1)?;
        store.insert_uniform(rng, &self.name("b1"), 1, self.hidden, b1)?;
        store.insert_uniform(rng, &self.name("w2"), self.hidden, self.output, b2)?;
        store.insert_uniform(rng, &self.name("b2"), 1, self.output, b2)?;
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w1 = g.param(&self.name("w1"))?;
        let b1 = g.param(&self.name("b1"))?;
        let w2 = g.param(&self.name("w2"))?;
        let b2 = g.param(&self.name("b2"))?;
        let h = g.linear(x, w1, b1)?;
        let h = g.relu(h);
        g.linear(h, w2, b2)
    }
}
