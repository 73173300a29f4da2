//! Single-head scaled dot-product attention with a token-level UG mask.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{
    check_gradient, masked_softmax_row, outer_acc, softmax_row, softmax_row_backward, vecmat,
    vecmat_t, GradCheckConfig, GradCheckReport, GradPair, Scalar, Tensor,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams<S: Scalar> {
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
}

impl<S: Scalar> AttentionParams<S> {
    pub fn init<R: Rng + ?Sized>(d_model: usize, d_attn: usize, rng: &mut R) -> Self {
        let b = 1.0 / (d_model as f64).sqrt();
        Self {
            wq: Tensor::uniform(&[d_model, d_attn], b, rng),
            wk: Tensor::uniform(&[d_model, d_attn], b, rng),
            wv: Tensor::uniform(&[d_model, d_attn], b, rng),
        }
    }

    pub fn new(wq: Tensor<S>, wk: Tensor<S>, wv: Tensor<S>) -> Result<Self> {
        for w in [&wk, &wv] {
            if w.shape() != wq.shape() {
                return Err(Error::shape("attention params", wq.shape(), w.shape()));
            }
        }
        if wq.rank() != 2 {
            return Err(Error::shape("attention params", wq.shape(), &[0, 0]));
        }
        Ok(Self { wq, wk, wv })
    }

    pub fn d_model(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn d_attn(&self) -> usize {
        self.wq.shape()[1]
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            wq: Tensor::zeros(self.wq.shape()),
            wk: Tensor::zeros(self.wk.shape()),
            wv: Tensor::zeros(self.wv.shape()),
        }
    }

    fn tensors(&self) -> [&Tensor<S>; 3] {
        [&self.wq, &self.wk, &self.wv]
    }
}

/// `T×T` mask: query `i < n` may not read key `j ≥ n`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnUGMask {
    tokens: usize,
    n: usize,
}

impl AttnUGMask {
    pub fn new(tokens: usize, n: usize) -> Result<Self> {
        if tokens == 0 || n > tokens {
            return Err(Error::config(format!("invalid attention mask: n={n}, T={tokens}")));
        }
        Ok(Self { tokens, n })
    }

    pub fn all_ones(tokens: usize) -> Self {
        Self { tokens, n: 0 }
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn u_tokens(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        !(i < self.n && j >= self.n)
    }

    pub fn to_dense(&self) -> Vec<Vec<u8>> {
        (0..self.tokens)
            .map(|i| (0..self.tokens).map(|j| u8::from(self.get(i, j))).collect())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Softmax over all keys, then multiply by the mask.
    #[default]
    Multiplicative,
    /// Masked logits removed before the softmax.
    Additive,
}

struct Projected<S> {
    q: Tensor<S>,
    k: Tensor<S>,
    v: Tensor<S>,
}

fn project<S: Scalar>(x: &Tensor<S>, p: &AttentionParams<S>) -> Result<Projected<S>> {
    if x.rank() != 2 || x.shape()[1] != p.d_model() {
        return Err(Error::shape("attention input", x.shape(), p.wq.shape()));
    }
    let rows = |w: &Tensor<S>| -> Tensor<S> {
        let mut out = Tensor::zeros(&[x.rows(), w.shape()[1]]);
        for t in 0..x.rows() {
            out.row_mut(t).copy_from_slice(&vecmat(x.row(t), w));
        }
        out
    };
    Ok(Projected {
        q: rows(&p.wq),
        k: rows(&p.wk),
        v: rows(&p.wv),
    })
}

fn scale<S: Scalar>(p: &AttentionParams<S>) -> S {
    S::one() / S::lit(p.d_attn() as f64).sqrt()
}

fn scores_row<S: Scalar>(q: &[S], k: &Tensor<S>, scale: S) -> Vec<S> {
    (0..k.rows())
        .map(|j| q.iter().zip(k.row(j)).fold(S::zero(), |a, (&x, &y)| a + x * y) * scale)
        .collect()
}

/// Softmax probabilities and the effective weights of one query row.
fn row_weights<S: Scalar>(scores: &[S], i: usize, mask: &AttnUGMask, mode: MaskMode) -> (Vec<S>, Vec<S>) {
    match mode {
        MaskMode::Multiplicative => {
            let p = softmax_row(scores);
            let a = p
                .iter()
                .enumerate()
                .map(|(j, &v)| if mask.get(i, j) { v } else { S::zero() })
                .collect();
            (p, a)
        }
        MaskMode::Additive => {
            let a = masked_softmax_row(scores, |j| mask.get(i, j));
            (a.clone(), a)
        }
    }
}

fn combine<S: Scalar>(a: &[S], v: &Tensor<S>, i: usize, mask: &AttnUGMask) -> Vec<S> {
    let mut out = vec![S::zero(); v.row_len()];
    for (j, &w) in a.iter().enumerate() {
        if !mask.get(i, j) {
            continue;
        }
        for (o, &vv) in out.iter_mut().zip(v.row(j)) {
            *o = *o + w * vv;
        }
    }
    out
}

fn check_mask<S: Scalar>(x: &Tensor<S>, mask: &AttnUGMask) -> Result<()> {
    if x.rank() != 2 || x.rows() != mask.tokens() {
        return Err(Error::shape("masked_attention", x.shape(), &[mask.tokens(), mask.tokens()]));
    }
    Ok(())
}

/// `softmax(QKᵀ/√d_a)·V`.
pub fn attention<S: Scalar>(x: &Tensor<S>, params: &AttentionParams<S>) -> Result<Tensor<S>> {
    masked_attention(x, params, &AttnUGMask::all_ones(x.shape()[0].max(1)), MaskMode::Multiplicative)
}

pub fn masked_attention<S: Scalar>(
    x: &Tensor<S>,
    params: &AttentionParams<S>,
    mask: &AttnUGMask,
    mode: MaskMode,
) -> Result<Tensor<S>> {
    check_mask(x, mask)?;
    let pr = project(x, params)?;
    let sc = scale(params);
    let t = x.rows();
    let mut out = Tensor::zeros(&[t, params.d_attn()]);
    for i in 0..t {
        let s = scores_row(pr.q.row(i), &pr.k, sc);
        let (_, a) = row_weights(&s, i, mask, mode);
        out.row_mut(i).copy_from_slice(&combine(&a, &pr.v, i, mask));
    }
    Ok(out)
}

/// Effective `T×T` attention weights (after masking).
pub fn attention_weights<S: Scalar>(
    x: &Tensor<S>,
    params: &AttentionParams<S>,
    mask: &AttnUGMask,
    mode: MaskMode,
) -> Result<Tensor<S>> {
    check_mask(x, mask)?;
    let pr = project(x, params)?;
    let sc = scale(params);
    let t = x.rows();
    let mut out = Tensor::zeros(&[t, t]);
    for i in 0..t {
        let s = scores_row(pr.q.row(i), &pr.k, sc);
        out.row_mut(i).copy_from_slice(&row_weights(&s, i, mask, mode).1);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct AttnGrads<S: Scalar> {
    pub input: Tensor<S>,
    pub params: AttentionParams<S>,
}

/// [`masked_attention`] plus its backward procedure.
pub fn masked_attention_grad<'a, S: Scalar>(
    x: &Tensor<S>,
    params: &'a AttentionParams<S>,
    mask: &'a AttnUGMask,
    mode: MaskMode,
) -> Result<GradPair<'a, S, AttnGrads<S>>> {
    check_mask(x, mask)?;
    let pr = project(x, params)?;
    let sc = scale(params);
    let t = x.rows();
    let mut out = Tensor::zeros(&[t, params.d_attn()]);
    let mut probs = Vec::with_capacity(t);
    let mut weights = Vec::with_capacity(t);
    for i in 0..t {
        let s = scores_row(pr.q.row(i), &pr.k, sc);
        let (p, a) = row_weights(&s, i, mask, mode);
        out.row_mut(i).copy_from_slice(&combine(&a, &pr.v, i, mask));
        probs.push(p);
        weights.push(a);
    }
    let x = x.clone();
    Ok(GradPair::new(out, move |dout: &Tensor<S>| {
        let da_dim = params.d_attn();
        let mut dq = Tensor::zeros(&[t, da_dim]);
        let mut dk = Tensor::zeros(&[t, da_dim]);
        let mut dv = Tensor::zeros(&[t, da_dim]);
        for i in 0..t {
            let g = dout.row(i);
            let da: Vec<S> = (0..t)
                .map(|j| {
                    if mask.get(i, j) {
                        pr.v.row(j).iter().zip(g).fold(S::zero(), |a, (&v, &d)| a + v * d)
                    } else {
                        S::zero()
                    }
                })
                .collect();
            for j in 0..t {
                if mask.get(i, j) {
                    let w = weights[i][j];
                    for (o, &d) in dv.row_mut(j).iter_mut().zip(g) {
                        *o = *o + w * d;
                    }
                }
            }
            let ds = softmax_row_backward(&probs[i], &da);
            for j in 0..t {
                let c = ds[j] * sc;
                if c == S::zero() {
                    continue;
                }
                for (o, &kv) in dq.row_mut(i).iter_mut().zip(pr.k.row(j)) {
                    *o = *o + c * kv;
                }
                for (o, &qv) in dk.row_mut(j).iter_mut().zip(pr.q.row(i)) {
                    *o = *o + c * qv;
                }
            }
        }
        let mut grads = params.zeros_like();
        let mut dx = Tensor::zeros(x.shape());
        for r in 0..t {
            outer_acc(&mut grads.wq, x.row(r), dq.row(r));
            outer_acc(&mut grads.wk, x.row(r), dk.row(r));
            outer_acc(&mut grads.wv, x.row(r), dv.row(r));
            let parts = [
                vecmat_t(dq.row(r), &params.wq),
                vecmat_t(dk.row(r), &params.wk),
                vecmat_t(dv.row(r), &params.wv),
            ];
            for p in parts {
                crate::numeric::axpy(dx.row_mut(r), &p);
            }
        }
        AttnGrads {
            input: dx,
            params: grads,
        }
    }))
}

/// Central-difference check of [`masked_attention_grad`] on `Σ out ⊙ upstream`.
pub fn check_attention_gradient(
    x: &Tensor<f64>,
    params: &AttentionParams<f64>,
    mask: &AttnUGMask,
    mode: MaskMode,
    upstream: &Tensor<f64>,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    let g = masked_attention_grad(x, params, mask, mode)?.backward(upstream);
    let mut all = vec![x.clone()];
    all.extend(params.tensors().into_iter().cloned());
    let analytic = vec![g.input, g.params.wq, g.params.wk, g.params.wv];
    let f = |p: &[Tensor<f64>]| {
        let q = AttentionParams {
            wq: p[1].clone(),
            wk: p[2].clone(),
            wv: p[3].clone(),
        };
        masked_attention(&p[0], &q, mask, mode)
            .and_then(|o| o.dot(upstream))
            .unwrap_or(f64::NAN)
    };
    check_gradient(f, &all, &analytic, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(t: usize, d: usize, da: usize, seed: u64) -> (Tensor<f64>, AttentionParams<f64>) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::normal(&[t, d], 1.0, &mut r);
        let mut p = AttentionParams::init(d, da, &mut r);
        p.wq = Tensor::normal(p.wq.shape(), 0.7, &mut r);
        p.wk = Tensor::normal(p.wk.shape(), 0.7, &mut r);
        (x, p)
    }

    /// Textbook attention with explicit loops and `f64::exp`.
    fn oracle(x: &Tensor<f64>, p: &AttentionParams<f64>) -> Vec<Vec<f64>> {
        let t = x.rows();
        let da = p.d_attn();
        let proj = |w: &Tensor<f64>, r: usize| -> Vec<f64> {
            (0..da).map(|c| (0..x.row_len()).map(|i| x.at(r, i) * w.at(i, c)).sum()).collect()
        };
        let q: Vec<_> = (0..t).map(|r| proj(&p.wq, r)).collect();
        let k: Vec<_> = (0..t).map(|r| proj(&p.wk, r)).collect();
        let v: Vec<_> = (0..t).map(|r| proj(&p.wv, r)).collect();
        (0..t)
            .map(|i| {
                let s: Vec<f64> = (0..t)
                    .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (da as f64).sqrt())
                    .collect();
                let z: f64 = s.iter().map(|v| v.exp()).sum();
                (0..da).map(|c| (0..t).map(|j| s[j].exp() / z * v[j][c]).sum()).collect()
            })
            .collect()
    }

    #[test]
    fn matches_straight_line_oracle() {
        let (x, p) = setup(4, 6, 3, 1);
        let out = attention(&x, &p).unwrap();
        for (i, row) in oracle(&x, &p).iter().enumerate() {
            for (a, b) in out.row(i).iter().zip(row) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn single_token_returns_value_row() {
        let (x, p) = setup(1, 4, 2, 2);
        let out = attention(&x, &p).unwrap();
        let v = vecmat(x.row(0), &p.wv);
        assert_eq!(out.row(0), &v[..]);
    }

    #[test]
    fn saturated_logit_selects_value_row() {
        // Orthogonal keys; the query aligns with key 1 and is scaled up.
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let mut p = AttentionParams::new(
            Tensor::zeros(&[2, 2]),
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap(),
        )
        .unwrap();
        p.wq = Tensor::from_rows(&[vec![0.0, 200.0], vec![0.0, 0.0]]).unwrap();
        let out: Tensor<f64> = attention(&x, &p).unwrap();
        assert!((out.at(0, 0) - 5.0).abs() < 1e-12);
        assert!((out.at(0, 1) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn all_ones_mask_modes_agree_with_attention() {
        let (x, p) = setup(5, 4, 3, 3);
        let plain = attention(&x, &p).unwrap();
        let ones = AttnUGMask::all_ones(5);
        for mode in [MaskMode::Multiplicative, MaskMode::Additive] {
            assert!(masked_attention(&x, &p, &ones, mode).unwrap().bitwise_eq(&plain));
        }
    }

    #[test]
    fn mask_layout() {
        let m = AttnUGMask::new(4, 2).unwrap();
        assert_eq!(m.to_dense()[0], vec![1, 1, 0, 0]);
        assert_eq!(m.to_dense()[3], vec![1, 1, 1, 1]);
        assert!(AttnUGMask::new(3, 4).is_err());
        let (x, p) = setup(4, 4, 2, 0);
        assert!(masked_attention(&x, &p, &AttnUGMask::new(5, 2).unwrap(), MaskMode::Additive).is_err());
    }

    #[test]
    fn u_rows_combine_only_u_values() {
        let (x, p) = setup(4, 4, 3, 4);
        let mask = AttnUGMask::new(4, 3).unwrap();
        let v: Vec<Vec<f64>> = (0..4).map(|t| vecmat(x.row(t), &p.wv)).collect();
        for mode in [MaskMode::Multiplicative, MaskMode::Additive] {
            let w = attention_weights(&x, &p, &mask, mode).unwrap();
            let out = masked_attention(&x, &p, &mask, mode).unwrap();
            for i in 0..3 {
                assert_eq!(w.at(i, 3), 0.0);
                for c in 0..3 {
                    let want: f64 = (0..3).map(|j| w.at(i, j) * v[j][c]).sum();
                    assert!((out.at(i, c) - want).abs() <= 1e-12);
                }
            }
        }
        let mut p = p;
        p.wv.fill(0.0);
        let out = masked_attention(&x, &p, &mask, MaskMode::Multiplicative).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn row_sums() {
        let (x, p) = setup(6, 4, 3, 5);
        let mask = AttnUGMask::new(6, 2).unwrap();
        let mult = attention_weights(&x, &p, &mask, MaskMode::Multiplicative).unwrap();
        let add = attention_weights(&x, &p, &mask, MaskMode::Additive).unwrap();
        for i in 0..6 {
            let sm: f64 = mult.row(i).iter().sum();
            let sa: f64 = add.row(i).iter().sum();
            assert!((sa - 1.0).abs() <= 1e-12);
            if i < 2 {
                assert!(sm < 1.0);
            } else {
                assert!((sm - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn additive_u_rows_are_separable() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let (x, p) = setup(6, 4, 3, 6);
        let mask = AttnUGMask::new(6, 3).unwrap();
        let base = masked_attention(&x, &p, &mask, MaskMode::Additive).unwrap();
        for _ in 0..50 {
            let g = Tensor::normal(&[3, 4], 2.0, &mut r);
            let x2 = Tensor::concat_rows(&[&x.slice_rows(0, 3), &g]).unwrap();
            let out = masked_attention(&x2, &p, &mask, MaskMode::Additive).unwrap();
            assert!(out.slice_rows(0, 3).bitwise_eq(&base.slice_rows(0, 3)));
        }
    }

    #[test]
    fn multiplicative_u_rows_keep_g_dependent_normaliser() {
        // Post-softmax masking removes G values from U rows but the softmax
        // denominator still sums over G keys.
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let (x, p) = setup(6, 4, 3, 7);
        let mask = AttnUGMask::new(6, 3).unwrap();
        let base = masked_attention(&x, &p, &mask, MaskMode::Multiplicative).unwrap();
        let g = Tensor::normal(&[3, 4], 2.0, &mut r);
        let x2 = Tensor::concat_rows(&[&x.slice_rows(0, 3), &g]).unwrap();
        let out = masked_attention(&x2, &p, &mask, MaskMode::Multiplicative).unwrap();
        assert!(!out.slice_rows(0, 3).bitwise_eq(&base.slice_rows(0, 3)));
    }

    #[test]
    fn gradient_checks_both_modes() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        for (seed, mode) in [(10, MaskMode::Multiplicative), (11, MaskMode::Additive)] {
            let (x, p) = setup(5, 4, 3, seed);
            let mask = AttnUGMask::new(5, 2).unwrap();
            let up = Tensor::normal(&[5, 3], 1.0, &mut r);
            let rep = check_attention_gradient(&x, &p, &mask, mode, &up, GradCheckConfig::default()).unwrap();
            assert!(rep.passed, "{mode:?}: {rep:?}");
        }
    }

    #[test]
    fn grad_value_matches_forward() {
        let (x, p) = setup(5, 4, 3, 12);
        let mask = AttnUGMask::new(5, 2).unwrap();
        for mode in [MaskMode::Multiplicative, MaskMode::Additive] {
            let a = masked_attention(&x, &p, &mask, mode).unwrap();
            let b = masked_attention_grad(&x, &p, &mask, mode).unwrap().value;
            assert!(a.bitwise_eq(&b));
        }
    }
}
