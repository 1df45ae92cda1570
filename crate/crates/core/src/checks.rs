//! Gradient-check suite: every differentiable graph operation in
//! isolation, then the full network loss under each modulation mode.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{generate_synthetic, GeneratorConfig};
use crate::error::Result;
use crate::hrn::dot_attention;
use crate::model::{ForwardOptions, ModelConfig, MomentSource, Msan};
use crate::mpn::Modulation;
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub report: GradCheckReport,
}

type OpFn = fn(&mut Graph<'_>) -> Result<Var>;

/// Entries bounded away from zero so that relu and max kinks sit far
/// outside the finite-difference step.
fn store_with(seed: u64, shapes: &[(&str, usize, usize)]) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new(seed);
    for &(name, r, c) in shapes {
        let values = (0..r * c)
            .map(|_| {
                let m: f64 = rng.gen_range(0.1..1.0);
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        s.insert(name, Tensor::matrix(r, c, values)?)?;
    }
    Ok(s)
}

/// `sum(x ⊙ W)` for a fixed pseudo-random `W`, so every output entry gets
/// a distinct upstream gradient.
fn probe(g: &mut Graph<'_>, x: Var) -> Result<Var> {
    let (r, c) = (g.value(x).rows(), g.value(x).cols());
    let mut rng = ChaCha8Rng::seed_from_u64((r * 31 + c) as u64);
    let w = Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let w = g.input(w);
    let y = g.mul(x, w)?;
    Ok(g.sum(y))
}

fn unary(g: &mut Graph<'_>, f: impl FnOnce(&mut Graph<'_>, Var) -> Result<Var>) -> Result<Var> {
    let x = g.param("x")?;
    let y = f(g, x)?;
    probe(g, y)
}

fn binary(g: &mut Graph<'_>, f: impl FnOnce(&mut Graph<'_>, Var, Var) -> Result<Var>) -> Result<Var> {
    let a = g.param("a")?;
    let b = g.param("b")?;
    let y = f(g, a, b)?;
    probe(g, y)
}

#[rustfmt::skip]
fn op_cases() -> Vec<(&'static str, Vec<(&'static str, usize, usize)>, OpFn)> {
    let x34 = vec![("x", 3, 4)];
    let ab34 = vec![("a", 3, 4), ("b", 3, 4)];
    vec![
        ("matmul", vec![("a", 3, 4), ("b", 4, 2)], |g| binary(g, |g, a, b| g.matmul(a, b))),
        ("linear", vec![("x", 3, 4), ("w", 4, 2), ("b", 1, 2)], |g| {
            let (x, w, b) = (g.param("x")?, g.param("w")?, g.param("b")?);
            let y = g.linear(x, w, b)?;
            probe(g, y)
        }),
        ("add", ab34.clone(), |g| binary(g, |g, a, b| g.add(a, b))),
        ("sub", ab34.clone(), |g| binary(g, |g, a, b| g.sub(a, b))),
        ("mul", ab34.clone(), |g| binary(g, |g, a, b| g.mul(a, b))),
        ("add_scalar", vec![("a", 3, 4), ("b", 1, 1)], |g| binary(g, |g, a, b| g.add_scalar(a, b))),
        ("mul_scalar", vec![("a", 3, 4), ("b", 1, 1)], |g| binary(g, |g, a, b| g.mul_scalar(a, b))),
        ("const_sub", x34.clone(), |g| unary(g, |g, x| Ok(g.const_sub(1.0, x)))),
        ("scale", x34.clone(), |g| unary(g, |g, x| Ok(g.scale(x, -2.5)))),
        ("relu", x34.clone(), |g| unary(g, |g, x| Ok(g.relu(x)))),
        ("sigmoid", x34.clone(), |g| unary(g, |g, x| Ok(g.sigmoid(x)))),
        ("tanh", x34.clone(), |g| unary(g, |g, x| Ok(g.tanh(x)))),
        ("softmax_rows", x34.clone(), |g| unary(g, |g, x| g.softmax_rows(x))),
        ("transpose", x34.clone(), |g| unary(g, |g, x| g.transpose(x))),
        ("concat_cols", vec![("a", 3, 2), ("b", 3, 3)], |g| binary(g, |g, a, b| g.concat_cols(&[a, b]))),
        ("concat_rows", vec![("a", 2, 3), ("b", 1, 3)], |g| binary(g, |g, a, b| g.concat_rows(&[a, b]))),
        ("select_rows", vec![("x", 4, 3)], |g| unary(g, |g, x| g.select_rows(x, &[2, 0, 2]))),
        ("maxpool_time", vec![("x", 4, 3)], |g| unary(g, |g, x| g.maxpool_time(x))),
        ("mean_rows", vec![("x", 4, 3)], |g| unary(g, |g, x| g.mean_rows(x))),
        ("sum", x34.clone(), |g| unary(g, |g, x| {
            let s = g.sum(x);
            g.mul(s, s)
        })),
        ("embed", vec![("x", 6, 3)], |g| unary(g, |g, t| g.embed(t, &[1, 3, 3, 5]))),
        ("embed_bags", vec![("x", 6, 3)], |g| unary(g, |g, t| g.embed_bags(t, &[vec![1, 2], vec![0, 4, 4]]))),
        ("lstm_forward", vec![("a", 4, 8), ("b", 2, 8)], |g| binary(g, |g, a, b| g.lstm(a, b, false))),
        ("lstm_reverse", vec![("a", 4, 8), ("b", 2, 8)], |g| binary(g, |g, a, b| g.lstm(a, b, true))),
        ("ranking_hinge", vec![("a", 1, 3), ("b", 1, 4)], |g| {
            let (p, n) = (g.param("a")?, g.param("b")?);
            g.ranking_hinge(p, n, 0.2)
        }),
        ("cross_entropy", vec![("x", 1, 5)], |g| {
            let x = g.param("x")?;
            g.cross_entropy(x, 2)
        }),
        ("dot_attention", vec![("a", 3, 4), ("b", 5, 4)], |g| binary(g, dot_attention)),
    ]
}

/// Runs every operation check and the full-network checks for one seed.
pub fn gradcheck_suite(seed: u64, opts: &GradCheckOptions) -> Result<Vec<CheckOutcome>> {
    let opts = GradCheckOptions { seed, ..opts.clone() };
    let mut out = Vec::new();
    for (name, shapes, f) in op_cases() {
        let store = store_with(seed, &shapes)?;
        out.push(CheckOutcome {
            name: name.to_string(),
            report: grad_check(&store, f, &opts)?,
        });
    }
    let records = generate_synthetic(
        &GeneratorConfig {
            num_clips: 1,
            ..Default::default()
        },
        seed,
    )?;
    let rec = &records[0];
    for mode in Modulation::ALL {
        let model = Msan::new(ModelConfig {
            d_emb: 4,
            d: 4,
            modulation: mode,
            ..ModelConfig::default()
        })?;
        let store = model.init_params(seed)?;
        let fwd = ForwardOptions {
            train: true,
            moment: MomentSource::Predicted,
            sample_seed: seed,
        };
        let report = grad_check(&store, |g| Ok(model.forward(g, rec, &fwd)?.loss), &opts)?;
        out.push(CheckOutcome {
            name: format!("network/{mode}"),
            report,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_seed_zero() {
        let opts = GradCheckOptions {
            samples_per_param: 20,
            ..Default::default()
        };
        for c in gradcheck_suite(0, &opts).unwrap() {
            assert!(c.report.passed(), "{}: {:?}", c.name, c.report.worst());
        }
    }
}
