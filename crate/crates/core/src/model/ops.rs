//! Row-major dense kernels used by the encoder.

use crate::tensor::Real;

/// `a (m×k) · b (k×n)`.
pub fn matmul<F: Real>(a: &[F], m: usize, k: usize, b: &[F], n: usize) -> Vec<F> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &y) in row.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    out
}

/// `a (m×k) · bᵀ` where `b` is `n×k`.
pub fn matmul_bt<F: Real>(a: &[F], m: usize, k: usize, b: &[F], n: usize) -> Vec<F> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `out (k×n) += aᵀ · b` for `a (m×k)`, `b (m×n)`.
pub fn matmul_at_acc<F: Real>(a: &[F], m: usize, k: usize, b: &[F], n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == F::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
}

pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut s = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Adds `bias` to every row of `x`.
pub fn add_bias<F: Real>(x: &mut [F], bias: &[F]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// `out += column sums of g (rows × n)`.
pub fn sum_rows_acc<F: Real>(g: &[F], n: usize, out: &mut [F]) {
    for row in g.chunks(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

pub const LN_EPS: f64 = 1e-12;

/// Normalized rows and reciprocal standard deviations of a layer norm.
pub struct LnCache<F> {
    pub xhat: Vec<F>,
    pub rstd: Vec<F>,
}

pub fn layer_norm<F: Real>(x: &[F], n: usize, gamma: &[F], beta: &[F]) -> (Vec<F>, LnCache<F>) {
    let rows = x.len() / n;
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); rows];
    let nf = F::of(n as f64);
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let mean = row.iter().copied().sum::<F>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
        let rs = F::one() / (var + F::of(LN_EPS)).sqrt();
        rstd[r] = rs;
        for i in 0..n {
            let h = (row[i] - mean) * rs;
            xhat[r * n + i] = h;
            y[r * n + i] = gamma[i] * h + beta[i];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Returns the input gradient and accumulates `dgamma`, `dbeta`.
pub fn layer_norm_backward<F: Real>(
    dy: &[F],
    n: usize,
    cache: &LnCache<F>,
    gamma: &[F],
    dgamma: &mut [F],
    dbeta: &mut [F],
) -> Vec<F> {
    let rows = dy.len() / n;
    let mut dx = vec![F::zero(); dy.len()];
    let nf = F::of(n as f64);
    for r in 0..rows {
        let dyr = &dy[r * n..(r + 1) * n];
        let xh = &cache.xhat[r * n..(r + 1) * n];
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for i in 0..n {
            let dxh = dyr[i] * gamma[i];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[i];
            dgamma[i] += dyr[i] * xh[i];
            dbeta[i] += dyr[i];
        }
        mean_dxhat = mean_dxhat / nf;
        mean_dxhat_xhat = mean_dxhat_xhat / nf;
        let rs = cache.rstd[r];
        for i in 0..n {
            let dxh = dyr[i] * gamma[i];
            dx[r * n + i] = rs * (dxh - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * a * x * x)
}
