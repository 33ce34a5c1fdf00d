//! Plain compute kernels shared by the autodiff graph and the
//! incremental (no-grad) decode path.
//!
//! All loops run in a fixed index order so repeated evaluation of the
//! same inputs is bitwise identical.

use super::Element;

/// Large negative stand-in for -inf in masked attention scores.
/// exp(MASKED - rowmax) underflows to exactly 0, so masked positions
/// contribute nothing to the softmax and never produce NaN.
pub fn masked_score<T: Element>() -> T {
    T::from_f64(-1e9)
}

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
    c
}

/// C[m,k] = A[m,n] * B[k,n]^T
pub fn matmul_nt<T: Element>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for l in 0..k {
            let brow = &b[l * n..(l + 1) * n];
            let mut s = T::zero();
            for j in 0..n {
                s = s + arow[j] * brow[j];
            }
            c[i * k + l] = s;
        }
    }
    c
}

/// C[n,k] = A[m,n]^T * B[m,k]
pub fn matmul_tn<T: Element>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut c = vec![T::zero(); n * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let brow = &b[i * k..(i + 1) * k];
        for j in 0..n {
            let av = arow[j];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[j * k..(j + 1) * k];
            for l in 0..k {
                crow[l] = crow[l] + av * brow[l];
            }
        }
    }
    c
}

/// In-place row softmax with max subtraction.
pub fn softmax_rows<T: Element>(x: &mut [T], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Row-wise log-sum-exp, max-subtracted.
pub fn log_sum_exp<T: Element>(row: &[T]) -> T {
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for &v in row.iter() {
        sum = sum + (v - max).exp();
    }
    max + sum.ln()
}

/// Per-row layer norm. Returns (out, xhat, inv_std) where xhat and
/// inv_std are the normalized rows and 1/sqrt(var+eps), saved for the
/// backward pass.
pub fn layer_norm_rows<T: Element>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    eps: T,
    rows: usize,
    cols: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); rows * cols];
    let mut xhat = vec![T::zero(); rows * cols];
    let mut inv_std = vec![T::zero(); rows];
    let n = T::from_f64(cols as f64);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut mean = T::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean / n;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var = var + d * d;
        }
        var = var / n;
        let is = (var + eps).sqrt().recip();
        inv_std[r] = is;
        for c in 0..cols {
            let h = (row[c] - mean) * is;
            xhat[r * cols + c] = h;
            out[r * cols + c] = gain[c] * h + bias[c];
        }
    }
    (out, xhat, inv_std)
}

/// Exact Gaussian-CDF GELU: x * Phi(x), with Phi from erf.
pub fn gelu<T: Element>(x: T) -> T {
    let xf = x.as_f64();
    let phi = 0.5 * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2));
    T::from_f64(xf * phi)
}

/// d/dx gelu(x) = Phi(x) + x * phi(x)
pub fn gelu_grad<T: Element>(x: T) -> T {
    let xf = x.as_f64();
    let cdf = 0.5 * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt();
    T::from_f64(cdf + xf * pdf)
}

/// Multi-head scaled dot-product attention over already-projected
/// streams. `mask`, when present, is a row-major `tq x tk` allow
/// matrix; disallowed scores are replaced by [`masked_score`].
///
/// Returns (output [tq x d], probs [heads x tq x tk]).
pub fn multi_head_attention<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    tq: usize,
    tk: usize,
    d: usize,
    heads: usize,
    mask: Option<&[bool]>,
) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); tq * d];
    let mut probs = vec![T::zero(); heads * tq * tk];
    for h in 0..heads {
        let off = h * dh;
        let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
        for i in 0..tq {
            for j in 0..tk {
                let allowed = mask.map_or(true, |m| m[i * tk + j]);
                p[i * tk + j] = if allowed {
                    let qi = &q[i * d + off..i * d + off + dh];
                    let kj = &k[j * d + off..j * d + off + dh];
                    let mut s = T::zero();
                    for t in 0..dh {
                        s = s + qi[t] * kj[t];
                    }
                    s * scale
                } else {
                    masked_score()
                };
            }
        }
        softmax_rows(p, tq, tk);
        for i in 0..tq {
            let orow = &mut out[i * d + off..i * d + off + dh];
            for j in 0..tk {
                let w = p[i * tk + j];
                let vj = &v[j * d + off..j * d + off + dh];
                for t in 0..dh {
                    orow[t] = orow[t] + w * vj[t];
                }
            }
        }
    }
    (out, probs)
}
