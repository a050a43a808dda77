//! Forward kernels and vector-Jacobian products for the tape primitives.
//!
//! Shape rules:
//!
//! | primitive            | inputs                         | output                         |
//! |----------------------|--------------------------------|--------------------------------|
//! | `matmul`             | `[..., m, k]`, `[..., k, n]`   | `[..., m, n]` (equal batch)    |
//! | `add`                | `x`, `y` with `y.shape == x.shape` or `y = [x.last]` (row bias) | `x.shape` |
//! | `mul`                | `x`, `y` with `y.shape == x.shape` or `y = [..., 1]` (row scalar) | `x.shape` |
//! | `scale`              | `x`                            | `x.shape`                      |
//! | `concat_last_dim`    | `[..., a]`, `[..., b]`, ...    | `[..., a + b + ...]`           |
//! | `split_last_dim`     | `[..., n]`                     | `[..., width]`                 |
//! | `softmax_last_dim`   | `[..., n]`                     | `[..., n]`                     |
//! | `log_softmax_last_dim` | `[..., n]`                   | `[..., n]`                     |
//! | `layer_norm`         | `[..., n]`, gain `[n]`, bias `[n]` | `[..., n]`                 |
//! | `relu`               | `x`                            | `x.shape`                      |
//! | `transpose_last_two` | `[..., m, n]`                  | `[..., n, m]`                  |
//! | `embedding_lookup`   | table `[v, d]`                 | `[indices.len(), d]`           |
//! | `sum`, `mean`        | `x`                            | `[]`                           |
//! | fused scalar         | any                            | `[]`                           |

use std::fmt;
use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A scalar-valued function with an analytic gradient, recorded on the tape as
/// a single entry. Used for losses whose gradient comes from a dedicated
/// algorithm (CTC forward-backward, cosine distance).
pub trait ScalarFunction: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns the value and the gradient with respect to every input.
    fn eval(&self, inputs: &[&Tensor]) -> (f64, Vec<Tensor>);
}

#[derive(Clone)]
pub enum Primitive {
    MatMul,
    Add,
    Mul,
    Scale(f64),
    ConcatLastDim,
    SplitLastDim { offset: usize, width: usize },
    SoftmaxLastDim,
    LogSoftmaxLastDim,
    LayerNorm { eps: f64 },
    Relu,
    TransposeLastTwo,
    EmbeddingLookup { indices: Vec<usize> },
    Sum,
    Mean,
    Fused(Arc<dyn ScalarFunction>),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::ConcatLastDim => "concat_last_dim",
            Primitive::SplitLastDim { .. } => "split_last_dim",
            Primitive::SoftmaxLastDim => "softmax_last_dim",
            Primitive::LogSoftmaxLastDim => "log_softmax_last_dim",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::Relu => "relu",
            Primitive::TransposeLastTwo => "transpose_last_two",
            Primitive::EmbeddingLookup { .. } => "embedding_lookup",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Fused(f) => f.name(),
        }
    }

    fn arity_ok(&self, n: usize) -> bool {
        match self {
            Primitive::MatMul | Primitive::Add | Primitive::Mul => n == 2,
            Primitive::LayerNorm { .. } => n == 3,
            Primitive::ConcatLastDim => n >= 1,
            Primitive::Fused(_) => true,
            _ => n == 1,
        }
    }
}

impl fmt::Debug for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Forward values kept for the backward rule beyond the inputs and output.
#[derive(Clone, Debug)]
pub(crate) enum Saved {
    None,
    LayerNorm { xhat: Vec<f64>, rstd: Vec<f64> },
    Grads(Vec<Tensor>),
}

fn batch_dims(shape: &[usize]) -> (usize, &[usize]) {
    let lead = &shape[..shape.len() - 2];
    (lead.iter().product(), lead)
}

pub(crate) fn forward(prim: &Primitive, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
    let op = prim.name();
    if !prim.arity_ok(inputs.len()) {
        return Err(Error::shape(op, format!("wrong number of inputs: {}", inputs.len())));
    }
    let out = match prim {
        Primitive::MatMul => (matmul(inputs[0], inputs[1])?, Saved::None),
        Primitive::Add => {
            let (x, y) = (inputs[0], inputs[1]);
            let mut out = x.data().to_vec();
            if y.shape() == x.shape() {
                out.iter_mut().zip(y.data()).for_each(|(o, v)| *o += v);
            } else if y.rank() == 1 && x.rank() >= 1 && y.numel() == x.last_dim() {
                for row in out.chunks_exact_mut(y.numel()) {
                    row.iter_mut().zip(y.data()).for_each(|(o, v)| *o += v);
                }
            } else {
                return Err(Error::shape(op, format!("{:?} + {:?}", x.shape(), y.shape())));
            }
            (Tensor::from_parts(x.shape().to_vec(), out), Saved::None)
        }
        Primitive::Mul => {
            let (x, y) = (inputs[0], inputs[1]);
            let mut out = x.data().to_vec();
            if y.shape() == x.shape() {
                out.iter_mut().zip(y.data()).for_each(|(o, v)| *o *= v);
            } else if is_row_scalar(x, y) {
                let w = x.last_dim();
                for (row, s) in out.chunks_exact_mut(w).zip(y.data()) {
                    row.iter_mut().for_each(|o| *o *= s);
                }
            } else {
                return Err(Error::shape(op, format!("{:?} * {:?}", x.shape(), y.shape())));
            }
            (Tensor::from_parts(x.shape().to_vec(), out), Saved::None)
        }
        Primitive::Scale(s) => (inputs[0].map(|v| v * s), Saved::None),
        Primitive::ConcatLastDim => (concat_last(inputs)?, Saved::None),
        Primitive::SplitLastDim { offset, width } => {
            let x = inputs[0];
            let n = x.last_dim();
            if x.rank() == 0 || *width == 0 || offset + width > n {
                return Err(Error::shape(op, format!("[{offset}, {offset}+{width}) of {:?}", x.shape())));
            }
            let mut data = Vec::with_capacity(x.rows() * width);
            for r in 0..x.rows() {
                data.extend_from_slice(&x.row(r)[*offset..offset + width]);
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = *width;
            (Tensor::from_parts(shape, data), Saved::None)
        }
        Primitive::SoftmaxLastDim => {
            let x = inputs[0];
            let mut out = x.data().to_vec();
            for row in out.chunks_exact_mut(x.last_dim()) {
                softmax_in_place(row);
            }
            (Tensor::from_parts(x.shape().to_vec(), out), Saved::None)
        }
        Primitive::LogSoftmaxLastDim => {
            let x = inputs[0];
            let mut out = x.data().to_vec();
            for row in out.chunks_exact_mut(x.last_dim()) {
                let lse = log_sum_exp(row);
                row.iter_mut().for_each(|v| *v -= lse);
            }
            (Tensor::from_parts(x.shape().to_vec(), out), Saved::None)
        }
        Primitive::LayerNorm { eps } => {
            let (x, gain, bias) = (inputs[0], inputs[1], inputs[2]);
            let n = x.last_dim();
            if x.rank() == 0 || gain.shape() != [n] || bias.shape() != [n] {
                return Err(Error::shape(
                    op,
                    format!("{:?} with gain {:?} bias {:?}", x.shape(), gain.shape(), bias.shape()),
                ));
            }
            let rows = x.rows();
            let mut xhat = Vec::with_capacity(x.numel());
            let mut rstd = Vec::with_capacity(rows);
            let mut out = Vec::with_capacity(x.numel());
            for r in 0..rows {
                let row = x.row(r);
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd.push(rs);
                for j in 0..n {
                    let h = (row[j] - mean) * rs;
                    xhat.push(h);
                    out.push(h * gain.data()[j] + bias.data()[j]);
                }
            }
            (
                Tensor::from_parts(x.shape().to_vec(), out),
                Saved::LayerNorm { xhat, rstd },
            )
        }
        Primitive::Relu => (inputs[0].map(|v| v.max(0.0)), Saved::None),
        Primitive::TransposeLastTwo => {
            let x = inputs[0];
            if x.rank() < 2 {
                return Err(Error::shape(op, format!("rank {} input", x.rank())));
            }
            (transpose(x), Saved::None)
        }
        Primitive::EmbeddingLookup { indices } => {
            let table = inputs[0];
            if table.rank() != 2 || indices.is_empty() {
                return Err(Error::shape(op, format!("table {:?}", table.shape())));
            }
            let (v, d) = (table.shape()[0], table.shape()[1]);
            let mut data = Vec::with_capacity(indices.len() * d);
            for &i in indices {
                if i >= v {
                    return Err(Error::shape(op, format!("index {i} out of {v}")));
                }
                data.extend_from_slice(table.row(i));
            }
            (Tensor::from_parts(vec![indices.len(), d], data), Saved::None)
        }
        Primitive::Sum => (Tensor::scalar(inputs[0].data().iter().sum()), Saved::None),
        Primitive::Mean => {
            let x = inputs[0];
            (Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64), Saved::None)
        }
        Primitive::Fused(f) => {
            let (value, grads) = f.eval(inputs);
            if grads.len() != inputs.len()
                || grads.iter().zip(inputs).any(|(g, x)| g.shape() != x.shape())
            {
                return Err(Error::shape(op, "fused gradient shapes do not match inputs"));
            }
            // log-space losses may legitimately be +inf
            return Ok((Tensor::scalar(value), Saved::Grads(grads)));
        }
    };
    if !out.0.is_finite() {
        return Err(Error::NonFinite { op });
    }
    Ok(out)
}

/// Computes input gradients given the output gradient. `wanted[i]` is false
/// for inputs that need no gradient; their slot is `None`.
pub(crate) fn backward(
    prim: &Primitive,
    inputs: &[&Tensor],
    output: &Tensor,
    saved: &Saved,
    dout: &[f64],
    wanted: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];
    match prim {
        Primitive::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (batch, _) = batch_dims(a.shape());
            let r = a.rank();
            let (m, k, n) = (a.shape()[r - 2], a.shape()[r - 1], b.shape()[r - 1]);
            if wanted[0] {
                // dA = dC . B^T
                let bt = transpose(b);
                let mut da = vec![0.0; a.numel()];
                for bi in 0..batch {
                    gemm_acc(
                        &dout[bi * m * n..(bi + 1) * m * n],
                        &bt.data()[bi * k * n..(bi + 1) * k * n],
                        &mut da[bi * m * k..(bi + 1) * m * k],
                        (m, n, k),
                    );
                }
                grads[0] = Some(da);
            }
            if wanted[1] {
                // dB = A^T . dC
                let mut db = vec![0.0; b.numel()];
                for bi in 0..batch {
                    gemm_acc_strided(
                        &a.data()[bi * m * k..(bi + 1) * m * k],
                        (1, k),
                        &dout[bi * m * n..(bi + 1) * m * n],
                        &mut db[bi * k * n..(bi + 1) * k * n],
                        (k, m, n),
                    );
                }
                grads[1] = Some(db);
            }
        }
        Primitive::Add => {
            let (x, y) = (inputs[0], inputs[1]);
            if wanted[0] {
                grads[0] = Some(dout.to_vec());
            }
            if wanted[1] {
                if y.shape() == x.shape() {
                    grads[1] = Some(dout.to_vec());
                } else {
                    let mut dy = vec![0.0; y.numel()];
                    for row in dout.chunks_exact(y.numel()) {
                        dy.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    grads[1] = Some(dy);
                }
            }
        }
        Primitive::Mul => {
            let (x, y) = (inputs[0], inputs[1]);
            if y.shape() == x.shape() {
                if wanted[0] {
                    grads[0] = Some(dout.iter().zip(y.data()).map(|(g, v)| g * v).collect());
                }
                if wanted[1] {
                    grads[1] = Some(dout.iter().zip(x.data()).map(|(g, v)| g * v).collect());
                }
            } else {
                let w = x.last_dim();
                if wanted[0] {
                    let mut dx = dout.to_vec();
                    for (row, s) in dx.chunks_exact_mut(w).zip(y.data()) {
                        row.iter_mut().for_each(|v| *v *= s);
                    }
                    grads[0] = Some(dx);
                }
                if wanted[1] {
                    grads[1] = Some(
                        dout.chunks_exact(w)
                            .zip(x.data().chunks_exact(w))
                            .map(|(g, xr)| dot(g, xr))
                            .collect(),
                    );
                }
            }
        }
        Primitive::Scale(s) => {
            grads[0] = Some(dout.iter().map(|g| g * s).collect());
        }
        Primitive::ConcatLastDim => {
            let total = output.last_dim();
            let mut offset = 0;
            for (i, x) in inputs.iter().enumerate() {
                let w = x.last_dim();
                if wanted[i] {
                    let mut dx = Vec::with_capacity(x.numel());
                    for row in dout.chunks_exact(total) {
                        dx.extend_from_slice(&row[offset..offset + w]);
                    }
                    grads[i] = Some(dx);
                }
                offset += w;
            }
        }
        Primitive::SplitLastDim { offset, width } => {
            let x = inputs[0];
            let n = x.last_dim();
            let mut dx = vec![0.0; x.numel()];
            for (drow, g) in dx.chunks_exact_mut(n).zip(dout.chunks_exact(*width)) {
                drow[*offset..offset + width].copy_from_slice(g);
            }
            grads[0] = Some(dx);
        }
        Primitive::SoftmaxLastDim => {
            let n = output.last_dim();
            let mut dx = Vec::with_capacity(output.numel());
            for (y, g) in output.data().chunks_exact(n).zip(dout.chunks_exact(n)) {
                let inner = dot(y, g);
                dx.extend(y.iter().zip(g).map(|(yv, gv)| yv * (gv - inner)));
            }
            grads[0] = Some(dx);
        }
        Primitive::LogSoftmaxLastDim => {
            let n = output.last_dim();
            let mut dx = Vec::with_capacity(output.numel());
            for (y, g) in output.data().chunks_exact(n).zip(dout.chunks_exact(n)) {
                let total: f64 = g.iter().sum();
                dx.extend(y.iter().zip(g).map(|(yv, gv)| gv - yv.exp() * total));
            }
            grads[0] = Some(dx);
        }
        Primitive::LayerNorm { .. } => {
            let Saved::LayerNorm { xhat, rstd } = saved else {
                unreachable!("layer_norm entry without saved statistics")
            };
            let gain = inputs[1].data();
            let n = gain.len();
            let mut dgain = vec![0.0; n];
            let mut dbias = vec![0.0; n];
            let mut dx = Vec::with_capacity(xhat.len());
            let mut dxhat = vec![0.0; n];
            for ((h, g), rs) in xhat.chunks_exact(n).zip(dout.chunks_exact(n)).zip(rstd) {
                for j in 0..n {
                    dgain[j] += g[j] * h[j];
                    dbias[j] += g[j];
                    dxhat[j] = g[j] * gain[j];
                }
                let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                let mean_dh = dot(&dxhat, h) / n as f64;
                dx.extend((0..n).map(|j| rs * (dxhat[j] - mean_d - h[j] * mean_dh)));
            }
            grads[0] = Some(dx);
            grads[1] = Some(dgain);
            grads[2] = Some(dbias);
        }
        Primitive::Relu => {
            grads[0] = Some(
                inputs[0]
                    .data()
                    .iter()
                    .zip(dout)
                    .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
            );
        }
        Primitive::TransposeLastTwo => {
            let g = Tensor::from_parts(output.shape().to_vec(), dout.to_vec());
            grads[0] = Some(transpose(&g).into_vec());
        }
        Primitive::EmbeddingLookup { indices } => {
            let d = inputs[0].shape()[1];
            let mut dt = vec![0.0; inputs[0].numel()];
            for (g, &i) in dout.chunks_exact(d).zip(indices) {
                axpy(1.0, g, &mut dt[i * d..(i + 1) * d]);
            }
            grads[0] = Some(dt);
        }
        Primitive::Sum => grads[0] = Some(vec![dout[0]; inputs[0].numel()]),
        Primitive::Mean => {
            let n = inputs[0].numel();
            grads[0] = Some(vec![dout[0] / n as f64; n]);
        }
        Primitive::Fused(_) => {
            let Saved::Grads(local) = saved else {
                unreachable!("fused entry without saved gradients")
            };
            for (i, g) in local.iter().enumerate() {
                if wanted[i] {
                    grads[i] = Some(g.data().iter().map(|v| v * dout[0]).collect());
                }
            }
        }
    }
    for (g, w) in grads.iter_mut().zip(wanted) {
        if !w {
            *g = None;
        }
    }
    grads
}

fn is_row_scalar(x: &Tensor, y: &Tensor) -> bool {
    x.rank() >= 1
        && y.rank() == x.rank()
        && y.last_dim() == 1
        && y.shape()[..y.rank() - 1] == x.shape()[..x.rank() - 1]
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let r = a.rank();
    if r < 2 || b.rank() != r || a.shape()[..r - 2] != b.shape()[..r - 2] || a.shape()[r - 1] != b.shape()[r - 2] {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let (batch, lead) = batch_dims(a.shape());
    let (m, k, n) = (a.shape()[r - 2], a.shape()[r - 1], b.shape()[r - 1]);
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        gemm_acc(
            &a.data()[bi * m * k..(bi + 1) * m * k],
            &b.data()[bi * k * n..(bi + 1) * k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            (m, k, n),
        );
    }
    let mut shape = lead.to_vec();
    shape.extend([m, n]);
    Ok(Tensor::from_parts(shape, out))
}

fn concat_last(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs[0];
    if first.rank() == 0 {
        return Err(Error::shape("concat_last_dim", "scalar input"));
    }
    let lead = &first.shape()[..first.rank() - 1];
    for x in inputs {
        if x.rank() != first.rank() || &x.shape()[..x.rank() - 1] != lead {
            return Err(Error::shape(
                "concat_last_dim",
                format!("{:?} vs {:?}", first.shape(), x.shape()),
            ));
        }
    }
    let total: usize = inputs.iter().map(|x| x.last_dim()).sum();
    let rows = first.rows();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for x in inputs {
            data.extend_from_slice(x.row(r));
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Ok(Tensor::from_parts(shape, data))
}

fn transpose(x: &Tensor) -> Tensor {
    let r = x.rank();
    let (batch, _) = batch_dims(x.shape());
    let (m, n) = (x.shape()[r - 2], x.shape()[r - 1]);
    let mut out = vec![0.0; x.numel()];
    for bi in 0..batch {
        let src = &x.data()[bi * m * n..(bi + 1) * m * n];
        let dst = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::from_parts(shape, out)
}

/// `out += a . b` for row-major `a` (m x k), `b` (k x n) and `out` (m x n).
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], (m, k, n): (usize, usize, usize)) {
    gemm_acc_strided(a, (k, 1), b, out, (m, k, n));
}

/// `out += a . b` where element `(i, p)` of `a` sits at `i * rs + p * cs`.
/// Four rows of `b` are folded per pass; each output element still sums its
/// terms in order of `p`.
fn gemm_acc_strided(
    a: &[f64],
    (rs, cs): (usize, usize),
    b: &[f64],
    out: &mut [f64],
    (m, k, n): (usize, usize, usize),
) {
    for i in 0..m {
        let at = |p: usize| a[i * rs + p * cs];
        let orow = &mut out[i * n..(i + 1) * n];
        let mut p = 0;
        while p + 4 <= k {
            let (s0, s1, s2, s3) = (at(p), at(p + 1), at(p + 2), at(p + 3));
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for ((((o, x0), x1), x2), x3) in orow.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3) {
                *o = *o + s0 * x0 + s1 * x1 + s2 * x2 + s3 * x3;
            }
            p += 4;
        }
        while p < k {
            axpy(at(p), &b[p * n..(p + 1) * n], orow);
            p += 1;
        }
    }
}

#[inline]
fn axpy(s: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += s * xv;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `ln(sum(exp(row)))`, exact for rows containing `-inf`.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
