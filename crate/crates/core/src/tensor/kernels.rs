//! Eager forward kernels. The graph records these and adds backward rules.

use super::Tensor;
use crate::error::{Error, Result};

/// Standard matrix product. Each output entry accumulates over the inner
/// index in ascending order starting from zero.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_matrix("matmul lhs")?;
    let (k2, n) = b.expect_matrix("matmul rhs")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    let (av, bv) = (a.values(), b.values());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = av[i * k + p];
            let brow = &bv[p * n..(p + 1) * n];
            for (o, &bpj) in orow.iter_mut().zip(brow) {
                *o += aip * bpj;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// Row-wise softmax stabilised by subtracting each row's maximum.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.expect_matrix("softmax_rows")?;
    if n == 0 {
        return Err(Error::Dimension("softmax over an empty row".into()));
    }
    let mut out = x.values().to_vec();
    for i in 0..m {
        softmax_in_place(&mut out[i * n..(i + 1) * n]);
    }
    Tensor::matrix(m, n, out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    map(x, |v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    map(x, sigmoid_scalar)
}

pub(crate) fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let mut out = x.clone();
    out.requires_grad = false;
    out.grad = None;
    out.values_mut().iter_mut().for_each(|v| *v = f(*v));
    out
}

/// Applies a binary operation to equal shapes, or broadcasts a `1 × 1`
/// right operand over the left one.
pub(crate) fn zip_broadcast(a: &Tensor, b: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let values: Vec<f64> = if a.shape() == b.shape() {
        a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect()
    } else if b.len() == 1 {
        let s = b.values()[0];
        a.values().iter().map(|&x| f(x, s)).collect()
    } else {
        return Err(Error::Dimension(format!(
            "{what}: incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    };
    Tensor::new(a.shape().to_vec(), values)
}

/// Concatenates matrices along the feature (column) axis.
pub fn concat_cols(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Dimension("concat of an empty list".into()))?;
    let rows = first.rows();
    let mut widths = Vec::with_capacity(xs.len());
    for x in xs {
        let (r, c) = x.expect_matrix("concat_cols")?;
        if r != rows {
            return Err(Error::Dimension(format!(
                "concat_cols row counts differ: {rows} vs {r}"
            )));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for x in xs {
            out.extend_from_slice(x.row(i));
        }
    }
    Tensor::matrix(rows, total, out)
}

/// Stacks matrices with equal column count on top of each other.
pub fn concat_rows(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Dimension("concat of an empty list".into()))?;
    let cols = first.cols();
    let mut rows = 0;
    let mut out = Vec::new();
    for x in xs {
        let (r, c) = x.expect_matrix("concat_rows")?;
        if c != cols {
            return Err(Error::Dimension(format!(
                "concat_rows column counts differ: {cols} vs {c}"
            )));
        }
        rows += r;
        out.extend_from_slice(x.values());
    }
    Tensor::matrix(rows, cols, out)
}

/// Per-column maximum over the time (row) axis. Returns the pooled row and,
/// per column, the first row index attaining the maximum.
pub fn maxpool_time(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, d) = x.expect_matrix("maxpool_time")?;
    if n == 0 {
        return Err(Error::EmptySequence("maxpool over zero timesteps".into()));
    }
    let mut best = x.row(0).to_vec();
    let mut arg = vec![0; d];
    for t in 1..n {
        for (j, &v) in x.row(t).iter().enumerate() {
            if v > best[j] {
                best[j] = v;
                arg[j] = t;
            }
        }
    }
    Ok((Tensor::matrix(1, d, best)?, arg))
}

pub(crate) fn transpose(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.expect_matrix("transpose")?;
    let v = x.values();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = v[i * n + j];
        }
    }
    Tensor::matrix(n, m, out)
}
