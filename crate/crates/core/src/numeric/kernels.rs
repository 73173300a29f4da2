//! Dense kernels. Every reduction accumulates in ascending index order so
//! that results are bit-reproducible and row-wise computations give the same
//! bits whether a row is computed alone or as part of a larger matrix.

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

fn check_matrix<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::shape(op, t.shape(), &[0, 0]));
    }
    Ok(())
}

/// `C = A·B` with `C[i][j] = Σ_t A[i][t]·B[t][j]`, ascending `t`.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    check_matrix("matmul", a)?;
    check_matrix("matmul", b)?;
    let (r, k) = (a.shape()[0], a.shape()[1]);
    let (k2, c) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        vecmat_into(a.row(i), b, out.row_mut(i));
    }
    Ok(out)
}

/// `out = x·W` for a row vector `x`; `out` is overwritten.
pub fn vecmat_into<S: Scalar>(x: &[S], w: &Tensor<S>, out: &mut [S]) {
    debug_assert_eq!(x.len(), w.shape()[0]);
    debug_assert_eq!(out.len(), w.shape()[1]);
    out.iter_mut().for_each(|v| *v = S::zero());
    for (t, &xt) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(w.row(t)) {
            *o = *o + xt * wv;
        }
    }
}

pub fn vecmat<S: Scalar>(x: &[S], w: &Tensor<S>) -> Vec<S> {
    let mut out = vec![S::zero(); w.shape()[1]];
    vecmat_into(x, w, &mut out);
    out
}

/// `dy·Wᵀ`: `out[i] = Σ_j dy[j]·W[i][j]`.
pub fn vecmat_t<S: Scalar>(dy: &[S], w: &Tensor<S>) -> Vec<S> {
    (0..w.shape()[0])
        .map(|i| {
            w.row(i)
                .iter()
                .zip(dy)
                .fold(S::zero(), |acc, (&wv, &d)| acc + wv * d)
        })
        .collect()
}

/// `grad[i][j] += x[i]·dy[j]`.
pub fn outer_acc<S: Scalar>(grad: &mut Tensor<S>, x: &[S], dy: &[S]) {
    for (i, &xi) in x.iter().enumerate() {
        for (g, &d) in grad.row_mut(i).iter_mut().zip(dy) {
            *g = *g + xi * d;
        }
    }
}

pub fn axpy<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

pub fn transpose<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>> {
    check_matrix("transpose", a)?;
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let mut out = Tensor::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            out.data_mut()[j * r + i] = a.at(i, j);
        }
    }
    Ok(out)
}

pub const LN_EPS: f64 = 1e-5;

/// Saved statistics of one normalised row.
#[derive(Clone, Debug)]
pub struct LnCache<S> {
    pub xhat: Vec<S>,
    pub rstd: S,
}

/// Layer norm of one row with population variance.
pub fn layer_norm_row<S: Scalar>(x: &[S], gamma: &[S], beta: &[S], eps: S) -> (Vec<S>, LnCache<S>) {
    let n = S::lit(x.len() as f64);
    let mean = x.iter().fold(S::zero(), |a, &v| a + v) / n;
    let var = x
        .iter()
        .fold(S::zero(), |a, &v| a + (v - mean) * (v - mean))
        / n;
    let rstd = S::one() / (var + eps).sqrt();
    let xhat: Vec<S> = x.iter().map(|&v| (v - mean) * rstd).collect();
    let y = xhat
        .iter()
        .zip(gamma)
        .zip(beta)
        .map(|((&h, &g), &b)| g * h + b)
        .collect();
    (y, LnCache { xhat, rstd })
}

/// Backward of [`layer_norm_row`]; accumulates into `dgamma`/`dbeta` and returns `dx`.
pub fn layer_norm_row_backward<S: Scalar>(
    dy: &[S],
    gamma: &[S],
    cache: &LnCache<S>,
    dgamma: &mut [S],
    dbeta: &mut [S],
) -> Vec<S> {
    let n = S::lit(dy.len() as f64);
    let mut dxhat = Vec::with_capacity(dy.len());
    for i in 0..dy.len() {
        dgamma[i] = dgamma[i] + dy[i] * cache.xhat[i];
        dbeta[i] = dbeta[i] + dy[i];
        dxhat.push(dy[i] * gamma[i]);
    }
    let mean_d = dxhat.iter().fold(S::zero(), |a, &v| a + v) / n;
    let mean_dx = dxhat
        .iter()
        .zip(&cache.xhat)
        .fold(S::zero(), |a, (&d, &h)| a + d * h)
        / n;
    dxhat
        .iter()
        .zip(&cache.xhat)
        .map(|(&d, &h)| cache.rstd * (d - mean_d - h * mean_dx))
        .collect()
}

/// Layer norm of a single vector.
pub fn layer_norm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: S,
) -> Result<Tensor<S>> {
    if x.shape() != gamma.shape() || x.shape() != beta.shape() || x.rank() != 1 {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    if !(eps > S::zero()) {
        return Err(Error::config("layer_norm eps must be positive"));
    }
    let (y, _) = layer_norm_row(x.data(), gamma.data(), beta.data(), eps);
    Ok(Tensor::vector(y))
}

/// Feed-forward nonlinearity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// Tanh approximation of GELU.
    #[default]
    Gelu,
    Relu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Activation {
    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Gelu => {
                let inner = S::lit(GELU_C) * (x + S::lit(GELU_K) * x * x * x);
                S::lit(0.5) * x * (S::one() + inner.tanh())
            }
            Activation::Relu => {
                if x > S::zero() {
                    x
                } else {
                    S::zero()
                }
            }
        }
    }

    pub fn derivative<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Gelu => {
                let inner = S::lit(GELU_C) * (x + S::lit(GELU_K) * x * x * x);
                let t = inner.tanh();
                let dinner = S::lit(GELU_C) * (S::one() + S::lit(3.0 * GELU_K) * x * x);
                S::lit(0.5) * (S::one() + t) + S::lit(0.5) * x * (S::one() - t * t) * dinner
            }
            Activation::Relu => {
                if x > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
        }
    }

    pub fn forward<S: Scalar>(self, x: &Tensor<S>) -> Tensor<S> {
        x.map(|v| self.apply(v))
    }
}

/// Softmax of one row restricted to `allowed` entries; disallowed entries get
/// exactly zero weight and do not enter the max or the normaliser.
pub fn masked_softmax_row<S: Scalar>(scores: &[S], allowed: impl Fn(usize) -> bool) -> Vec<S> {
    let mut max = S::neg_infinity();
    for (j, &s) in scores.iter().enumerate() {
        if allowed(j) && s > max {
            max = s;
        }
    }
    let mut out = vec![S::zero(); scores.len()];
    let mut denom = S::zero();
    for (j, &s) in scores.iter().enumerate() {
        if allowed(j) {
            let e = (s - max).exp();
            out[j] = e;
            denom = denom + e;
        }
    }
    if denom > S::zero() {
        for v in &mut out {
            *v = *v / denom;
        }
    }
    out
}

pub fn softmax_row<S: Scalar>(scores: &[S]) -> Vec<S> {
    masked_softmax_row(scores, |_| true)
}

/// `ds_j = p_j·(dp_j − Σ_k p_k·dp_k)`.
pub fn softmax_row_backward<S: Scalar>(p: &[S], dp: &[S]) -> Vec<S> {
    let dot = p.iter().zip(dp).fold(S::zero(), |a, (&pv, &d)| a + pv * d);
    p.iter().zip(dp).map(|(&pv, &d)| pv * (d - dot)).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
