//! Row-major dense kernels shared by the training forward/backward pass and the decoder.

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `y[r, o] = b[o] + sum_i x[r, i] * w[o, i]` for `w` stored `[out, inp]`.
pub(crate) fn linear(x: &[f64], w: &[f64], b: Option<&[f64]>, inp: usize, out: usize, y: &mut [f64]) {
    for (xr, yr) in x.chunks_exact(inp).zip(y.chunks_exact_mut(out)) {
        for (o, yo) in yr.iter_mut().enumerate() {
            let wr = &w[o * inp..(o + 1) * inp];
            let mut acc = b.map_or(0.0, |b| b[o]);
            for (a, c) in xr.iter().zip(wr) {
                acc += a * c;
            }
            *yo = acc;
        }
    }
}

/// Accumulates gradients of [`linear`]: `dx += dy w`, `dw += dy^T x`, `db += sum_r dy`.
pub(crate) fn linear_backward(
    dy: &[f64],
    x: &[f64],
    w: &[f64],
    inp: usize,
    out: usize,
    dx: Option<&mut [f64]>,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) {
    let rows = dy.len() / out;
    if let Some(db) = db {
        for dyr in dy.chunks_exact(out) {
            for (d, g) in db.iter_mut().zip(dyr) {
                *d += g;
            }
        }
    }
    match dx {
        Some(dx) => {
            for r in 0..rows {
                let xr = &x[r * inp..(r + 1) * inp];
                let dxr = &mut dx[r * inp..(r + 1) * inp];
                for o in 0..out {
                    let g = dy[r * out + o];
                    if g == 0.0 {
                        continue;
                    }
                    let wr = &w[o * inp..(o + 1) * inp];
                    let dwr = &mut dw[o * inp..(o + 1) * inp];
                    for i in 0..inp {
                        dxr[i] += g * wr[i];
                        dwr[i] += g * xr[i];
                    }
                }
            }
        }
        None => {
            for r in 0..rows {
                let xr = &x[r * inp..(r + 1) * inp];
                for o in 0..out {
                    let g = dy[r * out + o];
                    if g == 0.0 {
                        continue;
                    }
                    for (d, xv) in dw[o * inp..(o + 1) * inp].iter_mut().zip(xr) {
                        *d += g * xv;
                    }
                }
            }
        }
    }
}

/// Layer norm over rows of width `n`; stores normalized values and reciprocal std for backward.
pub(crate) fn layer_norm(x: &[f64], g: &[f64], b: &[f64], n: usize, y: &mut [f64], xhat: &mut [f64], rstd: &mut [f64]) {
    for (r, xr) in x.chunks_exact(n).enumerate() {
        let mean = xr.iter().sum::<f64>() / n as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for i in 0..n {
            let h = (xr[i] - mean) * rs;
            xhat[r * n + i] = h;
            y[r * n + i] = g[i] * h + b[i];
        }
    }
}

pub(crate) fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    g: &[f64],
    n: usize,
    dx: &mut [f64],
    dg: &mut [f64],
    db: &mut [f64],
) {
    let mut dxhat = vec![0.0; n];
    for (r, dyr) in dy.chunks_exact(n).enumerate() {
        let xr = &xhat[r * n..(r + 1) * n];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for i in 0..n {
            dxhat[i] = dyr[i] * g[i];
            dg[i] += dyr[i] * xr[i];
            db[i] += dyr[i];
            mean_d += dxhat[i];
            mean_dx += dxhat[i] * xr[i];
        }
        mean_d /= n as f64;
        mean_dx /= n as f64;
        for i in 0..n {
            dx[r * n + i] += rstd[r] * (dxhat[i] - mean_d - xr[i] * mean_dx);
        }
    }
}

/// Tanh-approximation GELU.
pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

pub(crate) fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

/// Numerically stable log-sum-exp.
pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// In-place softmax over `z`.
pub(crate) fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

/// `-ln(sigmoid(-x)) = ln(1 + e^x)`, stable for large |x|.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function, stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_difference() {
        for &u in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8, "u={u}");
        }
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert_eq!(softplus(-1e4), 0.0);
        assert_eq!(softplus(1e4), 1e4);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(sigmoid(-1e4), 0.0);
        assert_eq!(sigmoid(1e4), 1.0);
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn lse_matches_naive() {
        let z = [0.1, -2.0, 3.0];
        let naive = z.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&z) - naive).abs() < 1e-14);
    }
}
