//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Gradients, Graph, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates sampled per parameter; smaller tensors are checked fully.
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            samples_per_param: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Coordinates whose analytic/numeric gap is below the rounding
    /// resolution of the difference quotient; they count as agreeing.
    pub below_resolution: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.tol)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Ulps of the loss that a central difference cannot resolve.
const ROUNDING_ULPS: f64 = 16.0;

/// Smallest gradient difference a central difference with step `eps`
/// can resolve when the two loss values are about `scale` in size.
pub fn difference_resolution(scale: f64, eps: f64) -> f64 {
    ROUNDING_ULPS * f64::EPSILON * scale.max(1.0) / (2.0 * eps)
}

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(params: &ParamStore, f: &F) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>) -> Result<Var>,
{
    let mut g = Graph::with_params(params);
    let loss = f(&mut g)?;
    g.scalar(loss)
}

/// Loss value and backward-pass gradients of `f` at `params`.
pub fn analytic_grads<F>(params: &ParamStore, f: &F) -> Result<(f64, Gradients)>
where
    F: for<'g> Fn(&mut Graph<'g>) -> Result<Var>,
{
    let mut g = Graph::with_params(params);
    let loss = f(&mut g)?;
    let value = g.scalar(loss)?;
    Ok((value, g.backward(loss)?))
}

/// Compares supplied analytic gradients against central differences.
pub fn compare_with_finite_differences<F>(
    params: &ParamStore,
    f: &F,
    analytic: &Gradients,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g>) -> Result<Var>,
{
    if !(opts.eps > 0.0 && opts.tol > 0.0) {
        return Err(Error::Config("eps and tol must be positive".into()));
    }
    let base = evaluate(params, f)?;
    let again = evaluate(params, f)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Determinism(format!(
            "two evaluations gave {base:e} and {again:e}"
        )));
    }

    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut report = GradCheckReport {
        tol: opts.tol,
        params: Vec::with_capacity(names.len()),
    };
    for (k, name) in names.iter().enumerate() {
        let len = params.get(name)?.len();
        let coords: Vec<usize> = if len <= opts.samples_per_param {
            (0..len).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(k as u64);
            let mut c = sample(&mut rng, len, opts.samples_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let grad = analytic.get(name);
        let mut check = ParamCheck {
            name: name.clone(),
            checked: coords.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            below_resolution: 0,
        };
        for &i in &coords {
            let orig = work.get(name)?.values()[i];
            work.get_mut(name)?.values_mut()[i] = orig + opts.eps;
            let plus = evaluate(&work, f)?;
            work.get_mut(name)?.values_mut()[i] = orig - opts.eps;
            let minus = evaluate(&work, f)?;
            work.get_mut(name)?.values_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = grad.map_or(0.0, |g| g[i]);
            let mut rel = relative_error(a, numeric);
            if rel > opts.tol && (a - numeric).abs() <= difference_resolution(plus.abs().max(minus.abs()), opts.eps) {
                check.below_resolution += 1;
                rel = 0.0;
            }
            if rel > check.max_rel_error || check.checked == 0 {
                check.max_rel_error = rel;
                check.worst_index = i;
                check.worst_analytic = a;
                check.worst_numeric = numeric;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

/// Runs backward on `f` and checks every parameter against central
/// differences.
pub fn grad_check<F>(params: &ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g>) -> Result<Var>,
{
    let (_, grads) = analytic_grads(params, &f)?;
    compare_with_finite_differences(params, &f, &grads, opts)
}
