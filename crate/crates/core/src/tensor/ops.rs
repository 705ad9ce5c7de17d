// Forward and adjoint kernels on raw buffers. Shapes are validated by the
// callers in `tape.rs`.

use super::TensorError;

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out_shape`, the flat index of the broadcast source.
pub(crate) fn broadcast_map(src: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - src.len();
    let mut src_strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..src.len()).rev() {
        if src[i] != 1 {
            src_strides[i + offset] = stride;
        }
        stride *= src[i];
    }
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut index = vec![0usize; rank];
    for _ in 0..n {
        map.push(index.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            index[d] += 1;
            if index[d] < out_shape[d] {
                break;
            }
            index[d] = 0;
        }
    }
    map
}

/// Sums `grad` (shaped like the broadcast output) back onto the source shape.
pub(crate) fn unbroadcast(grad: &[f64], src: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if src == out_shape {
        return grad.to_vec();
    }
    let mut acc = vec![0.0; src.iter().product()];
    for (g, j) in grad.iter().zip(broadcast_map(src, out_shape)) {
        acc[j] += g;
    }
    acc
}

pub(crate) fn binary(
    op: &'static str,
    a: (&[usize], &[f64]),
    b: (&[usize], &[f64]),
    f: impl Fn(f64, f64) -> f64,
) -> Result<(Vec<usize>, Vec<f64>), TensorError> {
    if a.0 == b.0 {
        let data = a.1.iter().zip(b.1).map(|(&x, &y)| f(x, y)).collect();
        return Ok((a.0.to_vec(), data));
    }
    let shape = broadcast_shape(a.0, b.0).ok_or_else(|| TensorError::ShapeMismatch {
        op,
        left: a.0.to_vec(),
        right: b.0.to_vec(),
    })?;
    let ma = broadcast_map(a.0, &shape);
    let mb = broadcast_map(b.0, &shape);
    let data = ma.iter().zip(&mb).map(|(&i, &j)| f(a.1[i], b.1[j])).collect();
    Ok((shape, data))
}

/// Gathers `src` up to `out_shape` (for adjoints that need the broadcast operand).
pub(crate) fn expand(src_shape: &[usize], src: &[f64], out_shape: &[usize]) -> Vec<f64> {
    if src_shape == out_shape {
        return src.to_vec();
    }
    broadcast_map(src_shape, out_shape).into_iter().map(|j| src[j]).collect()
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `(outer, extent, inner)` decomposition of a shape around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax(x: &[f64], (outer, n, inner): (usize, usize, usize)) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + i;
            let max = (0..n).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..n {
                let e = (x[at(k)] - max).exp();
                y[at(k)] = e;
                total += e;
            }
            for k in 0..n {
                y[at(k)] /= total;
            }
        }
    }
    y
}

pub(crate) fn softmax_adjoint(y: &[f64], g: &[f64], (outer, n, inner): (usize, usize, usize)) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + i;
            let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
            for k in 0..n {
                dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
            }
        }
    }
    dx
}

pub(crate) fn cumsum(x: &[f64], (outer, n, inner): (usize, usize, usize), reverse: bool) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + i;
            let mut run = 0.0;
            if reverse {
                for k in (0..n).rev() {
                    run += x[at(k)];
                    y[at(k)] = run;
                }
            } else {
                for k in 0..n {
                    run += x[at(k)];
                    y[at(k)] = run;
                }
            }
        }
    }
    y
}

pub(crate) fn sum_axis(x: &[f64], (outer, n, inner): (usize, usize, usize)) -> Vec<f64> {
    let mut y = vec![0.0; outer * inner];
    for o in 0..outer {
        for k in 0..n {
            for i in 0..inner {
                y[o * inner + i] += x[o * n * inner + k * inner + i];
            }
        }
    }
    y
}

pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Normalizes each contiguous row of width `width`.
pub(crate) fn layer_norm(x: &[f64], width: usize, eps: f64) -> NormCache {
    let rows = x.len() / width.max(1);
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[r] = inv;
        for (o, v) in xhat[r * width..(r + 1) * width].iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
    }
    NormCache { xhat, inv_std }
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Same-length 1-D convolution over rows of `x` (`len × c_in`) with a
/// `kernel × c_in × c_out` weight and zero padding.
pub(crate) fn conv1d(
    x: &[f64],
    w: &[f64],
    len: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
) -> Vec<f64> {
    let pad = kernel / 2;
    let mut out = vec![0.0; len * c_out];
    for k in 0..kernel {
        let wk = &w[k * c_in * c_out..(k + 1) * c_in * c_out];
        for t in 0..len {
            let Some(s) = (t + k).checked_sub(pad).filter(|&s| s < len) else {
                continue;
            };
            let xrow = &x[s * c_in..(s + 1) * c_in];
            let orow = &mut out[t * c_out..(t + 1) * c_out];
            for (c, &xv) in xrow.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (o, &wv) in orow.iter_mut().zip(&wk[c * c_out..(c + 1) * c_out]) {
                    *o += xv * wv;
                }
            }
        }
    }
    out
}

pub(crate) fn conv1d_adjoint(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    len: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
) -> (Vec<f64>, Vec<f64>) {
    let pad = kernel / 2;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    for k in 0..kernel {
        let base = k * c_in * c_out;
        for t in 0..len {
            let Some(s) = (t + k).checked_sub(pad).filter(|&s| s < len) else {
                continue;
            };
            let grow = &g[t * c_out..(t + 1) * c_out];
            for c in 0..c_in {
                let wrow = &w[base + c * c_out..base + (c + 1) * c_out];
                let xv = x[s * c_in + c];
                let mut acc = 0.0;
                for o in 0..c_out {
                    acc += grow[o] * wrow[o];
                    dw[base + c * c_out + o] += xv * grow[o];
                }
                dx[s * c_in + c] += acc;
            }
        }
    }
    (dx, dw)
}
