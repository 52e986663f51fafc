//! Slice-level forward and backward kernels. Everything is row-major.

use super::{Result, TensorError};

/// `a[m×k] · b[k×n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `acc += a[m×k] · b[n×k]ᵀ`, result `m×n`.
pub(crate) fn matmul_a_bt_acc(acc: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            acc[i * n + j] += s;
        }
    }
}

/// `acc += a[m×k]ᵀ · b[m×n]`, result `k×n`.
pub(crate) fn matmul_at_b_acc(acc: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let out = &mut acc[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

pub(crate) fn transpose(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

/// Row softmax with max subtraction. `allowed`, when given, is an `m×n`
/// mask; disallowed entries get probability exactly 0.
pub(crate) fn softmax_rows(x: &[f64], m: usize, n: usize, allowed: Option<&[bool]>) -> Result<Vec<f64>> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let ok = |j: usize| allowed.map_or(true, |a| a[i * n + j]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if ok(j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(TensorError::Contract(format!("softmax row {i} has every entry masked")));
        }
        let o = &mut out[i * n..(i + 1) * n];
        let mut sum = 0.0;
        for j in 0..n {
            if ok(j) {
                let e = (row[j] - max).exp();
                o[j] = e;
                sum += e;
            }
        }
        for v in o.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// `dx += y ⊙ (dy − ⟨dy, y⟩)` per row.
pub(crate) fn softmax_rows_backward(acc: &mut [f64], y: &[f64], dy: &[f64], m: usize, n: usize) {
    for i in 0..m {
        let yr = &y[i * n..(i + 1) * n];
        let dr = &dy[i * n..(i + 1) * n];
        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for j in 0..n {
            acc[i * n + j] += yr[j] * (dr[j] - dot);
        }
    }
}

pub(crate) struct LayerNormOut {
    pub y: Vec<f64>,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm(x: &[f64], m: usize, d: usize, gain: &[f64], bias: &[f64], eps: f64) -> LayerNormOut {
    let mut y = vec![0.0; m * d];
    let mut xhat = vec![0.0; m * d];
    let mut inv_std = vec![0.0; m];
    let df = d as f64;
    for i in 0..m {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / df;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / df;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[i] = inv;
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[i * d + j] = h;
            y[i * d + j] = gain[j] * h + bias[j];
        }
    }
    LayerNormOut { y, xhat, inv_std }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward(
    dx: Option<&mut [f64]>,
    dgain: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gain: &[f64],
    m: usize,
    d: usize,
) {
    if let Some(dg) = dgain {
        for i in 0..m {
            for j in 0..d {
                dg[j] += dy[i * d + j] * xhat[i * d + j];
            }
        }
    }
    if let Some(db) = dbias {
        for i in 0..m {
            for j in 0..d {
                db[j] += dy[i * d + j];
            }
        }
    }
    if let Some(dx) = dx {
        let df = d as f64;
        for i in 0..m {
            let mut sum_dh = 0.0;
            let mut sum_dh_h = 0.0;
            for j in 0..d {
                let dh = dy[i * d + j] * gain[j];
                sum_dh += dh;
                sum_dh_h += dh * xhat[i * d + j];
            }
            let inv = inv_std[i];
            for j in 0..d {
                let dh = dy[i * d + j] * gain[j];
                dx[i * d + j] += inv / df * (df * dh - sum_dh - xhat[i * d + j] * sum_dh_h);
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Mean cross-entropy of `m×c` logits against class indices; returns the
/// loss and the softmax probabilities.
pub(crate) fn cross_entropy(logits: &[f64], m: usize, c: usize, targets: &[usize]) -> Result<(f64, Vec<f64>)> {
    if targets.len() != m {
        return Err(TensorError::Shape {
            op: "cross_entropy",
            left: vec![m, c],
            right: vec![targets.len()],
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(TensorError::Index {
            op: "cross_entropy",
            index: bad,
            bound: c,
        });
    }
    let probs = softmax_rows(logits, m, c, None)?;
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = &logits[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[t];
    }
    Ok((loss / m as f64, probs))
}

/// Log-softmax of a single row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}
