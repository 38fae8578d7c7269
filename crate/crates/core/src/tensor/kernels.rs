//! Forward and backward math for the tape primitives.

use super::LN_EPS;

/// C (m,n) = A (m,k) @ B (k,n) + beta * C, row-major. `ta`/`tb` flag that the
/// operand is stored as its transpose.
pub(crate) fn mm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn layer_norm_forward(x: &[f64], n: usize, d: usize, gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv_std = 1.0 / (var + LN_EPS).sqrt();
        for c in 0..d {
            out[r * d + c] = gain[c] * (row[c] - mean) * inv_std + bias[c];
        }
    }
    out
}

pub(crate) fn layer_norm_backward(
    x: &[f64],
    n: usize,
    d: usize,
    gain: &[f64],
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; n * d];
    let mut dgain = vec![0.0; d];
    let mut dbias = vec![0.0; d];
    let dd = d as f64;
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let drow = &dout[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / dd;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dd;
        let inv_std = 1.0 / (var + LN_EPS).sqrt();

        // xhat = (x - mean) * inv_std; dxhat = dout * gain
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for c in 0..d {
            let xhat = (row[c] - mean) * inv_std;
            let dxhat = drow[c] * gain[c];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dgain[c] += drow[c] * xhat;
            dbias[c] += drow[c];
        }
        for c in 0..d {
            let xhat = (row[c] - mean) * inv_std;
            let dxhat = drow[c] * gain[c];
            dx[r * d + c] = inv_std * (dxhat - sum_dxhat / dd - xhat * sum_dxhat_xhat / dd);
        }
    }
    (dx, dgain, dbias)
}

pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn softmax_rows_forward(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for r in 0..n {
        softmax_row(&x[r * d..(r + 1) * d], &mut out[r * d..(r + 1) * d]);
    }
    out
}

pub(crate) fn softmax_rows_backward(y: &[f64], n: usize, d: usize, dout: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; n * d];
    for r in 0..n {
        let yr = &y[r * d..(r + 1) * d];
        let dr = &dout[r * d..(r + 1) * d];
        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for c in 0..d {
            dx[r * d + c] = yr[c] * (dr[c] - dot);
        }
    }
    dx
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn cross_entropy_forward(logits: &[f64], n: usize, v: usize, targets: &[Option<usize>]) -> f64 {
    debug_assert_eq!(logits.len(), n * v);
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            let row = &logits[r * v..(r + 1) * v];
            total += log_sum_exp(row) - row[*t];
            count += 1;
        }
    }
    total / count as f64
}

pub(crate) fn cross_entropy_backward(
    logits: &[f64],
    n: usize,
    v: usize,
    targets: &[Option<usize>],
    dloss: f64,
) -> Vec<f64> {
    let count = targets.iter().filter(|t| t.is_some()).count() as f64;
    let mut dlogits = vec![0.0; n * v];
    let scale = dloss / count;
    let mut probs = vec![0.0; v];
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            let row = &logits[r * v..(r + 1) * v];
            softmax_row(row, &mut probs);
            let drow = &mut dlogits[r * v..(r + 1) * v];
            for c in 0..v {
                drow[c] = scale * probs[c];
            }
            drow[*t] -= scale;
        }
    }
    dlogits
}

/// Mean over rows of KL(softmax(p_row) || softmax(q_row)) in nats.
pub(crate) fn kl_forward(p_logits: &[f64], q_logits: &[f64], n: usize, v: usize) -> f64 {
    let mut total = 0.0;
    let mut p = vec![0.0; v];
    let mut q = vec![0.0; v];
    for r in 0..n {
        softmax_row(&p_logits[r * v..(r + 1) * v], &mut p);
        softmax_row(&q_logits[r * v..(r + 1) * v], &mut q);
        let mut kl = 0.0;
        for c in 0..v {
            kl += p[c] * (p[c].ln() - q[c].ln());
        }
        // Tiny negatives from rounding would violate KL >= 0.
        total += kl.max(0.0);
    }
    total / n as f64
}

pub(crate) fn kl_backward(
    p_logits: &[f64],
    q_logits: &[f64],
    n: usize,
    v: usize,
    dloss: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut dp = vec![0.0; n * v];
    let mut dq = vec![0.0; n * v];
    let mut p = vec![0.0; v];
    let mut q = vec![0.0; v];
    let scale = dloss / n as f64;
    for r in 0..n {
        softmax_row(&p_logits[r * v..(r + 1) * v], &mut p);
        softmax_row(&q_logits[r * v..(r + 1) * v], &mut q);
        let mut kl = 0.0;
        for c in 0..v {
            kl += p[c] * (p[c].ln() - q[c].ln());
        }
        for c in 0..v {
            let log_ratio = p[c].ln() - q[c].ln();
            dp[r * v + c] = scale * p[c] * (log_ratio - kl);
            dq[r * v + c] = scale * (q[c] - p[c]);
        }
    }
    (dp, dq)
}
