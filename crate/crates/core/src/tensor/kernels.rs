//! Slice-level kernels shared by the value API and the gradient tape.
//!
//! Every reduction accumulates each output element sequentially in ascending
//! index order starting from `0.0`. Work is only split across independent
//! output rows, so results are bitwise identical for any thread count.

use rayon::prelude::*;

/// Below this many multiply-accumulates a kernel runs on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

fn run_rows<F>(out: &mut [f64], row_len: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    if work >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    } else {
        out.chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    run_rows(&mut out, n, m * k * n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    run_rows(&mut out, n, m * k * n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&x, &y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            *o = s;
        }
    });
    out
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    run_rows(&mut out, n, m * k * n, |i, row| {
        for p in 0..k {
            let av = a[p * m + i];
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    run_rows(&mut out, cols, x.len() * 8, |i, row| {
        let src = &x[i * cols..(i + 1) * cols];
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in row.iter_mut().zip(src) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in row.iter_mut() {
            *o /= sum;
        }
    });
    out
}

/// Softmax vector-Jacobian product: `y ⊙ (dy − Σ dy⊙y)` per row.
pub fn softmax_rows_backward(y: &[f64], dy: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    run_rows(&mut out, cols, y.len() * 4, |i, row| {
        let ys = &y[i * cols..(i + 1) * cols];
        let ds = &dy[i * cols..(i + 1) * cols];
        let mut dot = 0.0;
        for (&a, &b) in ys.iter().zip(ds) {
            dot += a * b;
        }
        for ((o, &a), &b) in row.iter_mut().zip(ys).zip(ds) {
            *o = a * (b - dot);
        }
    });
    out
}

/// Dims of a rank-5 `B,T,H,W,C` buffer.
pub type Dims5 = [usize; 5];

#[inline]
pub fn offset5(d: &Dims5, b: usize, t: usize, h: usize, w: usize, c: usize) -> usize {
    (((b * d[1] + t) * d[2] + h) * d[3] + w) * d[4] + c
}

/// Spatial average pool; `h` and `w` must already be divisible by `factor`.
pub fn avg_pool(x: &[f64], d: &Dims5, factor: usize) -> Vec<f64> {
    let [bs, ts, hs, ws, cs] = *d;
    let (ho, wo) = (hs / factor, ws / factor);
    let od = [bs, ts, ho, wo, cs];
    let count = (factor * factor) as f64;
    let mut out = vec![0.0; bs * ts * ho * wo * cs];
    for b in 0..bs {
        for t in 0..ts {
            for oh in 0..ho {
                for ow in 0..wo {
                    let base = offset5(&od, b, t, oh, ow, 0);
                    for c in 0..cs {
                        let mut s = 0.0;
                        for dh in 0..factor {
                            for dw in 0..factor {
                                s += x[offset5(d, b, t, oh * factor + dh, ow * factor + dw, c)];
                            }
                        }
                        out[base + c] = s / count;
                    }
                }
            }
        }
    }
    out
}

/// Spatial max pool. Returns values and the flat source index of each maximum
/// (first occurrence in window scan order wins).
pub fn max_pool(x: &[f64], d: &Dims5, factor: usize) -> (Vec<f64>, Vec<usize>) {
    let [bs, ts, hs, ws, cs] = *d;
    let (ho, wo) = (hs / factor, ws / factor);
    let od = [bs, ts, ho, wo, cs];
    let len = bs * ts * ho * wo * cs;
    let mut out = vec![0.0; len];
    let mut arg = vec![0usize; len];
    for b in 0..bs {
        for t in 0..ts {
            for oh in 0..ho {
                for ow in 0..wo {
                    let base = offset5(&od, b, t, oh, ow, 0);
                    for c in 0..cs {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for dh in 0..factor {
                            for dw in 0..factor {
                                let idx = offset5(d, b, t, oh * factor + dh, ow * factor + dw, c);
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out[base + c] = best;
                        arg[base + c] = best_idx;
                    }
                }
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour spatial upsampling by `factor`.
pub fn upsample(x: &[f64], d: &Dims5, factor: usize) -> Vec<f64> {
    let [bs, ts, hs, ws, cs] = *d;
    let od = [bs, ts, hs * factor, ws * factor, cs];
    let mut out = vec![0.0; x.len() * factor * factor];
    for b in 0..bs {
        for t in 0..ts {
            for oh in 0..od[2] {
                for ow in 0..od[3] {
                    let src = offset5(d, b, t, oh / factor, ow / factor, 0);
                    let dst = offset5(&od, b, t, oh, ow, 0);
                    out[dst..dst + cs].copy_from_slice(&x[src..src + cs]);
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample`]: sums each `factor×factor` block of `dy`.
pub fn upsample_backward(dy: &[f64], d_in: &Dims5, factor: usize) -> Vec<f64> {
    let [bs, ts, hs, ws, cs] = *d_in;
    let od = [bs, ts, hs * factor, ws * factor, cs];
    let mut dx = vec![0.0; bs * ts * hs * ws * cs];
    for b in 0..bs {
        for t in 0..ts {
            for h in 0..hs {
                for w in 0..ws {
                    let dst = offset5(d_in, b, t, h, w, 0);
                    for c in 0..cs {
                        let mut s = 0.0;
                        for dh in 0..factor {
                            for dw in 0..factor {
                                s += dy[offset5(&od, b, t, h * factor + dh, w * factor + dw, c)];
                            }
                        }
                        dx[dst + c] = s;
                    }
                }
            }
        }
    }
    dx
}

/// Copies channels `[start, start+len)` of a `rows × cols` buffer.
pub fn slice_cols(x: &[f64], cols: usize, start: usize, len: usize) -> Vec<f64> {
    let rows = x.len() / cols;
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows {
        out.extend_from_slice(&x[r * cols + start..r * cols + start + len]);
    }
    out
}

/// Concatenates row-aligned buffers along the last axis.
pub fn concat_cols(parts: &[(&[f64], usize)], rows: usize) -> Vec<f64> {
    let total: usize = parts.iter().map(|(_, c)| c).sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (data, cols) in parts {
            out.extend_from_slice(&data[r * cols..(r + 1) * cols]);
        }
    }
    out
}
