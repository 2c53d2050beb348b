//! Differentiable operations.
//!
//! Backward closures never hold a borrow of a parent while mutating that
//! same parent's gradient: contributions are materialized into a scratch
//! buffer (or captured at forward time) and then accumulated.

use super::{kernels, BoolMat, Tensor};
use crate::error::{Error, Result};
use rand::Rng;

/// Standard matrix product `a[m×p] * b[p×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, p) = a.dims2()?;
    let (p2, n) = b.dims2()?;
    if p != p2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    kernels::mm_acc(&a.data(), &b.data(), m, p, n, &mut out);
    Ok(Tensor::from_op(
        vec![m, n],
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, parents| {
            if parents[0].requires_grad() {
                let mut da = vec![0.0f32; m * p];
                kernels::mm_nt_acc(g, &parents[1].data(), m, n, p, &mut da);
                parents[0].accum_grad_add(&da);
            }
            if parents[1].requires_grad() {
                let mut db = vec![0.0f32; p * n];
                kernels::mm_tn_acc(&parents[0].data(), g, m, p, n, &mut db);
                parents[1].accum_grad_add(&db);
            }
        }),
    ))
}

/// `a[m×p] * b[n×p]^T`, the classifier-friendly orientation.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, p) = a.dims2()?;
    let (n, p2) = b.dims2()?;
    if p != p2 {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    kernels::mm_nt_acc(&a.data(), &b.data(), m, p, n, &mut out);
    Ok(Tensor::from_op(
        vec![m, n],
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, parents| {
            if parents[0].requires_grad() {
                let mut da = vec![0.0f32; m * p];
                kernels::mm_acc(g, &parents[1].data(), m, n, p, &mut da);
                parents[0].accum_grad_add(&da);
            }
            if parents[1].requires_grad() {
                let mut db = vec![0.0f32; n * p];
                kernels::mm_tn_acc(g, &parents[0].data(), m, n, p, &mut db);
                parents[1].accum_grad_add(&db);
            }
        }),
    ))
}

/// Transpose of a rank-2 tensor.
pub fn transpose(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    let xd = x.data();
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = xd[i * n + j];
        }
    }
    drop(xd);
    Ok(Tensor::from_op(
        vec![n, m],
        out,
        vec![x.clone()],
        Box::new(move |g, parents| {
            let mut dx = vec![0.0f32; m * n];
            for j in 0..n {
                for i in 0..m {
                    dx[i * n + j] = g[j * m + i];
                }
            }
            parents[0].accum_grad_add(&dx);
        }),
    ))
}

/// Elementwise sum of two same-shape tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "add",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let out: Vec<f32> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(
        a.shape(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(|g, parents| {
            for p in parents {
                if p.requires_grad() {
                    p.accum_grad_add(g);
                }
            }
        }),
    ))
}

/// Elementwise (Hadamard) product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "mul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let out: Vec<f32> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_op(
        a.shape(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(|g, parents| {
            // copy first: the two parents may be the same tensor
            if parents[0].requires_grad() {
                let b = parents[1].to_vec();
                parents[0].accum_grad_with(|acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * b[i];
                    }
                });
            }
            if parents[1].requires_grad() {
                let a = parents[0].to_vec();
                parents[1].accum_grad_with(|acc| {
                    for i in 0..acc.len() {
                        acc[i] += g[i] * a[i];
                    }
                });
            }
        }),
    ))
}

pub fn mul_scalar(x: &Tensor, c: f32) -> Tensor {
    let out: Vec<f32> = x.data().iter().map(|v| v * c).collect();
    Tensor::from_op(
        x.shape(),
        out,
        vec![x.clone()],
        Box::new(move |g, parents| {
            parents[0].accum_grad_with(|acc| {
                for i in 0..acc.len() {
                    acc[i] += c * g[i];
                }
            });
        }),
    )
}

/// `x[n×d] + bias[d]` broadcast over rows.
pub fn add_row_broadcast(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    if bias.shape() != vec![d] {
        return Err(Error::ShapeMismatch {
            op: "add_row_broadcast",
            lhs: x.shape(),
            rhs: bias.shape(),
        });
    }
    let xd = x.data();
    let bd = bias.data();
    let mut out = vec![0.0f32; n * d];
    for i in 0..n {
        for j in 0..d {
            out[i * d + j] = xd[i * d + j] + bd[j];
        }
    }
    drop(xd);
    drop(bd);
    Ok(Tensor::from_op(
        vec![n, d],
        out,
        vec![x.clone(), bias.clone()],
        Box::new(move |g, parents| {
            if parents[0].requires_grad() {
                parents[0].accum_grad_add(g);
            }
            if parents[1].requires_grad() {
                parents[1].accum_grad_with(|acc| {
                    for i in 0..n {
                        for j in 0..d {
                            acc[j] += g[i * d + j];
                        }
                    }
                });
            }
        }),
    ))
}

pub fn relu(x: &Tensor) -> Tensor {
    let out: Vec<f32> = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::from_op(
        x.shape(),
        out,
        vec![x.clone()],
        Box::new(|g, parents| {
            let x = parents[0].to_vec();
            parents[0].accum_grad_with(|acc| {
                for i in 0..acc.len() {
                    if x[i] > 0.0 {
                        acc[i] += g[i];
                    }
                }
            });
        }),
    )
}

/// Row-wise softmax with an optional exclusion mask (`true` = masked out).
///
/// Masked entries come out exactly 0 and never receive gradient; each row
/// is max-subtracted before exponentiation.
pub fn softmax_rows(x: &Tensor, mask: Option<&BoolMat>) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    if let Some(mk) = mask {
        if mk.rows != m || mk.cols != n {
            return Err(Error::ShapeMismatch {
                op: "softmax_rows",
                lhs: vec![m, n],
                rhs: vec![mk.rows, mk.cols],
            });
        }
    }
    let xd = x.data();
    let mut out = vec![0.0f32; m * n];
    for r in 0..m {
        let row = &xd[r * n..r * n + n];
        let mut max = f32::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if mask.map_or(false, |mk| mk.get(r, j)) {
                continue;
            }
            if v > max {
                max = v;
            }
        }
        if max == f32::NEG_INFINITY {
            return Err(Error::DegenerateMask { row: r });
        }
        let mut sum = 0.0f32;
        for j in 0..n {
            if mask.map_or(false, |mk| mk.get(r, j)) {
                continue;
            }
            let e = (row[j] - max).exp();
            out[r * n + j] = e;
            sum += e;
        }
        for j in 0..n {
            out[r * n + j] /= sum;
        }
    }
    drop(xd);
    let probs = out.clone();
    let masked: Option<BoolMat> = mask.cloned();
    Ok(Tensor::from_op(
        vec![m, n],
        out,
        vec![x.clone()],
        Box::new(move |g, parents| {
            let mut dx = vec![0.0f32; m * n];
            for r in 0..m {
                let p = &probs[r * n..r * n + n];
                let gr = &g[r * n..r * n + n];
                let mut inner = 0.0f32;
                for j in 0..n {
                    inner += gr[j] * p[j];
                }
                for j in 0..n {
                    if masked.as_ref().map_or(false, |mk| mk.get(r, j)) {
                        continue;
                    }
                    dx[r * n + j] = p[j] * (gr[j] - inner);
                }
            }
            parents[0].accum_grad_add(&dx);
        }),
    ))
}

/// Per-position normalization over the last dimension followed by an
/// affine gain/bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
    let shape = x.shape();
    let d = *shape.last().ok_or(Error::BadShape {
        op: "layer_norm",
        expected: "rank >= 1".into(),
        got: shape.clone(),
    })?;
    if gain.shape() != vec![d] || bias.shape() != vec![d] {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: shape,
            rhs: gain.shape(),
        });
    }
    let rows = x.numel() / d;
    let xd = x.data();
    let gd = gain.data();
    let bd = bias.data();
    let mut out = vec![0.0f32; rows * d];
    let mut xhat = vec![0.0f32; rows * d];
    let mut inv_std = vec![0.0f32; rows];
    for r in 0..rows {
        let row = &xd[r * d..r * d + d];
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[r] = inv;
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[r * d + j] = h;
            out[r * d + j] = gd[j] * h + bd[j];
        }
    }
    drop(xd);
    drop(gd);
    drop(bd);
    let gain_copy = gain.to_vec();
    Ok(Tensor::from_op(
        shape,
        out,
        vec![x.clone(), gain.clone(), bias.clone()],
        Box::new(move |g, parents| {
            if parents[0].requires_grad() {
                let mut dx = vec![0.0f32; rows * d];
                for r in 0..rows {
                    let gr = &g[r * d..r * d + d];
                    let hr = &xhat[r * d..r * d + d];
                    let mut s1 = 0.0f32;
                    let mut s2 = 0.0f32;
                    for j in 0..d {
                        let dh = gr[j] * gain_copy[j];
                        s1 += dh;
                        s2 += dh * hr[j];
                    }
                    let inv = inv_std[r];
                    let df = d as f32;
                    for j in 0..d {
                        let dh = gr[j] * gain_copy[j];
                        dx[r * d + j] = inv * (dh - s1 / df - hr[j] * s2 / df);
                    }
                }
                parents[0].accum_grad_add(&dx);
            }
            if parents[1].requires_grad() {
                parents[1].accum_grad_with(|acc| {
                    for r in 0..rows {
                        for j in 0..d {
                            acc[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
            }
            if parents[2].requires_grad() {
                parents[2].accum_grad_with(|acc| {
                    for r in 0..rows {
                        for j in 0..d {
                            acc[j] += g[r * d + j];
                        }
                    }
                });
            }
        }),
    ))
}

/// Mean smoothed negative log-likelihood over non-ignored positions.
///
/// The smoothed target distribution puts `1 - smoothing` on the gold label
/// and spreads `smoothing` uniformly over the remaining `V - 1` classes.
pub fn cross_entropy(
    logits: &Tensor,
    labels: &[u32],
    smoothing: f32,
    ignore_index: u32,
) -> Result<Tensor> {
    let (n, v) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: vec![n, v],
            rhs: vec![labels.len()],
        });
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Config(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    if smoothing > 0.0 && v < 2 {
        return Err(Error::Config("label smoothing requires at least 2 classes".into()));
    }
    for &l in labels {
        if l != ignore_index && l as usize >= v {
            return Err(Error::Config(format!("label {l} outside vocabulary of size {v}")));
        }
    }
    let kept: Vec<usize> = (0..n).filter(|&i| labels[i] != ignore_index).collect();
    if kept.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let xd = logits.data();
    let mut probs = vec![0.0f32; n * v];
    let off_weight = if smoothing > 0.0 { smoothing / (v as f32 - 1.0) } else { 0.0 };
    let gold_weight = 1.0 - smoothing;
    let mut total = 0.0f64;
    for &i in &kept {
        let row = &xd[i * v..i * v + v];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum_exp = 0.0f32;
        for j in 0..v {
            let e = (row[j] - max).exp();
            probs[i * v + j] = e;
            sum_exp += e;
        }
        for j in 0..v {
            probs[i * v + j] /= sum_exp;
        }
        let lse = max + sum_exp.ln();
        let gold = labels[i] as usize;
        let row_sum: f32 = row.iter().sum();
        let expected = gold_weight * row[gold] + off_weight * (row_sum - row[gold]);
        total += (lse - expected) as f64;
    }
    drop(xd);
    let n_kept = kept.len();
    let loss = (total / n_kept as f64) as f32;
    let labels_copy = labels.to_vec();
    Ok(Tensor::from_op(
        vec![],
        vec![loss],
        vec![logits.clone()],
        Box::new(move |g, parents| {
            let scale = g[0] / n_kept as f32;
            let mut dx = vec![0.0f32; n * v];
            for i in 0..n {
                if labels_copy[i] == ignore_index {
                    continue;
                }
                let gold = labels_copy[i] as usize;
                for j in 0..v {
                    let q = if j == gold { gold_weight } else { off_weight };
                    dx[i * v + j] = (probs[i * v + j] - q) * scale;
                }
            }
            parents[0].accum_grad_add(&dx);
        }),
    ))
}

/// Gather rows of `table[V×d]` by token id.
pub fn embedding_lookup(table: &Tensor, ids: &[u32]) -> Result<Tensor> {
    let (v, d) = table.dims2()?;
    for &id in ids {
        if id as usize >= v {
            return Err(Error::Config(format!("token id {id} outside vocabulary of size {v}")));
        }
    }
    let n = ids.len();
    let td = table.data();
    let mut out = vec![0.0f32; n * d];
    for (i, &id) in ids.iter().enumerate() {
        out[i * d..i * d + d].copy_from_slice(&td[id as usize * d..id as usize * d + d]);
    }
    drop(td);
    let ids_copy = ids.to_vec();
    Ok(Tensor::from_op(
        vec![n, d],
        out,
        vec![table.clone()],
        Box::new(move |g, parents| {
            parents[0].accum_grad_with(|acc| {
                for (i, &id) in ids_copy.iter().enumerate() {
                    let dst = &mut acc[id as usize * d..id as usize * d + d];
                    for j in 0..d {
                        dst[j] += g[i * d + j];
                    }
                }
            });
        }),
    ))
}

/// Inverted dropout: kept entries are scaled by `1/(1-rate)`.
pub fn dropout<R: Rng>(x: &Tensor, rate: f32, rng: &mut R) -> Tensor {
    if rate <= 0.0 {
        return x.clone();
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let factors: Vec<f32> = (0..x.numel())
        .map(|_| if rng.random::<f32>() < rate { 0.0 } else { scale })
        .collect();
    let out: Vec<f32> = x.data().iter().zip(factors.iter()).map(|(v, f)| v * f).collect();
    Tensor::from_op(
        x.shape(),
        out,
        vec![x.clone()],
        Box::new(move |g, parents| {
            parents[0].accum_grad_with(|acc| {
                for i in 0..acc.len() {
                    acc[i] += g[i] * factors[i];
                }
            });
        }),
    )
}

/// Stack rank-2 tensors with equal column counts along the row axis.
pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::EmptyInput("concat_rows of zero tensors".into()));
    }
    let (_, d) = parts[0].dims2()?;
    let mut rows = 0usize;
    let mut offsets = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, dc) = p.dims2()?;
        if dc != d {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs: parts[0].shape(),
                rhs: p.shape(),
            });
        }
        offsets.push(rows);
        rows += r;
    }
    let mut out = vec![0.0f32; rows * d];
    for (p, &off) in parts.iter().zip(offsets.iter()) {
        let pd = p.data();
        out[off * d..off * d + pd.len()].copy_from_slice(&pd);
    }
    Ok(Tensor::from_op(
        vec![rows, d],
        out,
        parts.to_vec(),
        Box::new(move |g, parents| {
            for (p, &off) in parents.iter().zip(offsets.iter()) {
                if p.requires_grad() {
                    let len = p.numel();
                    p.accum_grad_add(&g[off * d..off * d + len]);
                }
            }
        }),
    ))
}

/// Same data, new shape (element count must match).
pub fn reshape(x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if numel != x.numel() {
        return Err(Error::BadShape {
            op: "reshape",
            expected: format!("{} elements", x.numel()),
            got: shape,
        });
    }
    Ok(Tensor::from_op(
        shape,
        x.to_vec(),
        vec![x.clone()],
        Box::new(|g, parents| {
            parents[0].accum_grad_add(g);
        }),
    ))
}

/// Sum of all elements, as a scalar tensor.
pub fn sum_all(x: &Tensor) -> Tensor {
    let s: f32 = x.data().iter().sum();
    Tensor::from_op(
        vec![],
        vec![s],
        vec![x.clone()],
        Box::new(|g, parents| {
            let gv = g[0];
            parents[0].accum_grad_with(|acc| {
                for a in acc.iter_mut() {
                    *a += gv;
                }
            });
        }),
    )
}
