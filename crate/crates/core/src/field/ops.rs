//! Row-major dense kernels used by the field's forward and reverse passes.

/// `out[n x b] = x[n x a] * w[a x b]`, overwriting `out`.
pub fn matmul(x: &[f64], w: &[f64], n: usize, a: usize, b: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), n * a);
    debug_assert_eq!(w.len(), a * b);
    out[..n * b].fill(0.0);
    for i in 0..n {
        let row = &mut out[i * b..(i + 1) * b];
        for (k, &xv) in x[i * a..(i + 1) * a].iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (o, &wv) in row.iter_mut().zip(&w[k * b..(k + 1) * b]) {
                *o += xv * wv;
            }
        }
    }
}

pub fn add_bias(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

/// `gw[a x b] += x[n x a]^T * dy[n x b]`.
pub fn acc_xt_dy(x: &[f64], dy: &[f64], n: usize, a: usize, b: usize, gw: &mut [f64]) {
    for i in 0..n {
        let dyr = &dy[i * b..(i + 1) * b];
        for (k, &xv) in x[i * a..(i + 1) * a].iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (g, &d) in gw[k * b..(k + 1) * b].iter_mut().zip(dyr) {
                *g += xv * d;
            }
        }
    }
}

/// `dx[n x a] += dy[n x b] * w[a x b]^T`.
pub fn acc_dy_wt(dy: &[f64], w: &[f64], n: usize, a: usize, b: usize, dx: &mut [f64]) {
    for i in 0..n {
        let dyr = &dy[i * b..(i + 1) * b];
        for k in 0..a {
            let wr = &w[k * b..(k + 1) * b];
            dx[i * a + k] += dot(dyr, wr);
        }
    }
}

/// Column sums of `dy[n x b]` added into `gb`.
pub fn acc_colsum(dy: &[f64], b: usize, gb: &mut [f64]) {
    for row in dy.chunks_exact(b) {
        for (g, &d) in gb.iter_mut().zip(row) {
            *g += d;
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let w = [1.0, 0.0, 1.0, 0.5, 1.0, -1.0];
        let mut out = [0.0; 6];
        matmul(&x, &w, 2, 2, 3, &mut out);
        assert_eq!(out, [2.0, 2.0, -1.0, 5.0, 4.0, -1.0]);
        let mut dx = [0.0; 4];
        acc_dy_wt(&out, &w, 2, 2, 3, &mut dx);
        assert_eq!(dx, [1.0, 4.0, 4.0, 7.5]);
    }

    #[test]
    fn activation_derivatives() {
        for &x in &[-5.0, -0.3, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (softplus(x + h) - softplus(x - h)) / (2.0 * h);
            assert!((fd - sigmoid(x)).abs() < 1e-8);
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(softplus(800.0).is_finite() && softplus(-800.0) >= 0.0);
    }
}
