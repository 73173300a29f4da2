//! Baseline token-mixing block: head-split mixup, row-wise layer norm,
//! per-token FFN, plain residual and a second layer norm.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{
    join, layer_norm_row, layer_norm_row_backward, outer_acc, vecmat_t, Activation, GradPair,
    LnCache, Linear, ParamMut, ParamRef, Params, Scalar, Tensor, LN_EPS,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixerConfig {
    pub tokens: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_hidden: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl MixerConfig {
    /// Plain-residual block: requires `heads == tokens` and `heads | d_model`.
    pub fn new(tokens: usize, d_model: usize, heads: usize, d_hidden: usize) -> Result<Self> {
        let cfg = Self {
            tokens,
            d_model,
            heads,
            d_hidden,
            activation: Activation::Gelu,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_head_split(self.tokens, self.d_model, self.heads)?;
        if self.d_hidden == 0 {
            return Err(Error::config("d_hidden must be positive"));
        }
        if self.heads != self.tokens {
            return Err(Error::config(format!(
                "plain residual needs heads == tokens, got H={} T={}",
                self.heads, self.tokens
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Width of a mixed row, `T·D′`.
    pub fn mixed_dim(&self) -> usize {
        self.tokens * self.head_dim()
    }
}

pub(crate) fn check_head_split(tokens: usize, d_model: usize, heads: usize) -> Result<()> {
    if tokens == 0 || d_model == 0 || heads == 0 {
        return Err(Error::config("tokens, d_model and heads must be positive"));
    }
    if !d_model.is_multiple_of(heads) {
        return Err(Error::config(format!(
            "heads ({heads}) must divide d_model ({d_model})"
        )));
    }
    Ok(())
}

fn check_tokens<S: Scalar>(x: &Tensor<S>, tokens: usize, d_model: usize) -> Result<()> {
    if x.shape() != [tokens, d_model] {
        return Err(Error::shape("token matrix", x.shape(), &[tokens, d_model]));
    }
    Ok(())
}

/// `out[t][h] = X[t][h·D′ .. (h+1)·D′]`, shape `T×H×D′`.
pub fn split_heads<S: Scalar>(x: &Tensor<S>, heads: usize) -> Result<Tensor<S>> {
    if x.rank() != 2 {
        return Err(Error::shape("split_heads", x.shape(), &[0, 0]));
    }
    let (t, d) = (x.shape()[0], x.shape()[1]);
    check_head_split(t, d, heads)?;
    Tensor::new(vec![t, heads, d / heads], x.data().to_vec())
}

/// Row `h` of the mixup: the head-`h` slices of every token, concatenated.
pub fn mixup_row_into<S: Scalar>(x: &Tensor<S>, heads: usize, h: usize, out: &mut [S]) {
    let dh = x.shape()[1] / heads;
    for t in 0..x.shape()[0] {
        out[t * dh..(t + 1) * dh].copy_from_slice(&x.row(t)[h * dh..(h + 1) * dh]);
    }
}

/// `H×(T·D′)` token mixing.
pub fn mixup<S: Scalar>(x: &Tensor<S>, heads: usize) -> Result<Tensor<S>> {
    let split = split_heads(x, heads)?;
    let (t, dh) = (split.shape()[0], split.shape()[2]);
    let mut out = Tensor::zeros(&[heads, t * dh]);
    for h in 0..heads {
        mixup_row_into(x, heads, h, out.row_mut(h));
    }
    Ok(out)
}

/// Inverse permutation of [`mixup`]: rebuilds the `T×D` token matrix.
pub fn mixup_inverse<S: Scalar>(mixed: &Tensor<S>, tokens: usize) -> Result<Tensor<S>> {
    if mixed.rank() != 2 || tokens == 0 || !mixed.shape()[1].is_multiple_of(tokens) {
        return Err(Error::shape("mixup_inverse", mixed.shape(), &[tokens]));
    }
    let heads = mixed.shape()[0];
    let dh = mixed.shape()[1] / tokens;
    let mut out = Tensor::zeros(&[tokens, heads * dh]);
    for h in 0..heads {
        let row = mixed.row(h);
        for t in 0..tokens {
            out.row_mut(t)[h * dh..(h + 1) * dh].copy_from_slice(&row[t * dh..(t + 1) * dh]);
        }
    }
    Ok(out)
}

/// Per-row layer norm parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
}

impl<S: Scalar> LayerNormParams<S> {
    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: Tensor::full(&[dim], S::one()),
            beta: Tensor::zeros(&[dim]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gamma: Tensor::zeros(self.gamma.shape()),
            beta: Tensor::zeros(self.beta.shape()),
        }
    }

    pub fn cast<T: Scalar>(&self) -> LayerNormParams<T> {
        LayerNormParams {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.numel()
    }

    pub fn apply_row(&self, x: &[S]) -> (Vec<S>, LnCache<S>) {
        layer_norm_row(x, self.gamma.data(), self.beta.data(), S::lit(LN_EPS))
    }

    pub fn backward_row(&self, dy: &[S], cache: &LnCache<S>, grad: &mut Self) -> Vec<S> {
        let LayerNormParams { gamma, beta } = grad;
        layer_norm_row_backward(dy, self.gamma.data(), cache, gamma.data_mut(), beta.data_mut())
    }
}

impl<S: Scalar, W> Params<S, W> for LayerNormParams<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamRef<'a, S, W>)) {
        f(join(prefix, "gamma"), ParamRef::Vector(&self.gamma));
        f(join(prefix, "beta"), ParamRef::Vector(&self.beta));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ParamMut<'a, S, W>)) {
        f(join(prefix, "gamma"), ParamMut::Vector(&mut self.gamma));
        f(join(prefix, "beta"), ParamMut::Vector(&mut self.beta));
    }
}

/// Saved activations of one FFN row.
#[derive(Clone, Debug)]
pub struct FfnCache<S> {
    pub input: Vec<S>,
    pub pre: Vec<S>,
    pub act: Vec<S>,
}

/// Two-layer FFN owned by a single token row: `act(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenFfn<S: Scalar, W = Tensor<S>> {
    pub w1: W,
    pub b1: Tensor<S>,
    pub w2: W,
    pub b2: Tensor<S>,
}

impl<S: Scalar> TokenFfn<S> {
    /// Weights uniform in `±1/√fan_in`, zero biases.
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            w1: Tensor::uniform(&[d_in, d_hidden], 1.0 / (d_in as f64).sqrt(), rng),
            b1: Tensor::zeros(&[d_hidden]),
            w2: Tensor::uniform(&[d_hidden, d_out], 1.0 / (d_hidden as f64).sqrt(), rng),
            b2: Tensor::zeros(&[d_out]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: Tensor::zeros(self.w1.shape()),
            b1: Tensor::zeros(self.b1.shape()),
            w2: Tensor::zeros(self.w2.shape()),
            b2: Tensor::zeros(self.b2.shape()),
        }
    }

    pub fn cast<T: Scalar>(&self) -> TokenFfn<T> {
        TokenFfn {
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            w2: self.w2.cast(),
            b2: self.b2.cast(),
        }
    }

    /// Returns `∂/∂input` and accumulates parameter gradients into `grad`.
    pub fn backward_row(&self, dy: &[S], cache: &FfnCache<S>, act: Activation, grad: &mut Self) -> Vec<S> {
        crate::numeric::axpy(grad.b2.data_mut(), dy);
        outer_acc(&mut grad.w2, &cache.act, dy);
        let da = vecmat_t(dy, &self.w2);
        let dpre: Vec<S> = da
            .iter()
            .zip(&cache.pre)
            .map(|(&d, &p)| d * act.derivative(p))
            .collect();
        crate::numeric::axpy(grad.b1.data_mut(), &dpre);
        outer_acc(&mut grad.w1, &cache.input, &dpre);
        vecmat_t(&dpre, &self.w1)
    }
}

impl<S: Scalar, W: Linear<S>> TokenFfn<S, W> {
    pub fn d_in(&self) -> usize {
        self.w1.in_dim()
    }

    pub fn d_hidden(&self) -> usize {
        self.w1.out_dim()
    }

    pub fn d_out(&self) -> usize {
        self.w2.out_dim()
    }

    pub fn forward_row(&self, x: &[S], act: Activation) -> Vec<S> {
        self.forward_row_cached(x, act).0
    }

    pub fn forward_row_cached(&self, x: &[S], act: Activation) -> (Vec<S>, FfnCache<S>) {
        let mut pre = self.w1.apply_row(x);
        for (p, &b) in pre.iter_mut().zip(self.b1.data()) {
            *p = *p + b;
        }
        let a: Vec<S> = pre.iter().map(|&p| act.apply(p)).collect();
        let mut y = self.w2.apply_row(&a);
        for (v, &b) in y.iter_mut().zip(self.b2.data()) {
            *v = *v + b;
        }
        let cache = FfnCache {
            input: x.to_vec(),
            pre,
            act: a,
        };
        (y, cache)
    }

    pub fn map_weights<W2>(&self, f: &impl Fn(&W) -> W2) -> TokenFfn<S, W2> {
        TokenFfn {
            w1: f(&self.w1),
            b1: self.b1.clone(),
            w2: f(&self.w2),
            b2: self.b2.clone(),
        }
    }
}

impl<S: Scalar, W> Params<S, W> for TokenFfn<S, W> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamRef<'a, S, W>)) {
        f(join(prefix, "w1"), ParamRef::Weight(&self.w1));
        f(join(prefix, "b1"), ParamRef::Vector(&self.b1));
        f(join(prefix, "w2"), ParamRef::Weight(&self.w2));
        f(join(prefix, "b2"), ParamRef::Vector(&self.b2));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ParamMut<'a, S, W>)) {
        f(join(prefix, "w1"), ParamMut::Weight(&mut self.w1));
        f(join(prefix, "b1"), ParamMut::Vector(&mut self.b1));
        f(join(prefix, "w2"), ParamMut::Weight(&mut self.w2));
        f(join(prefix, "b2"), ParamMut::Vector(&mut self.b2));
    }
}

/// Applies row `t` of `p` through `ffns[t]`.
pub fn pffn<S: Scalar, W: Linear<S>>(
    p: &Tensor<S>,
    ffns: &[TokenFfn<S, W>],
    act: Activation,
) -> Result<Tensor<S>> {
    if p.rank() != 2 || p.rows() != ffns.len() {
        return Err(Error::shape("pffn", p.shape(), &[ffns.len()]));
    }
    let d_out = match ffns.first() {
        Some(f) => f.d_out(),
        None => return Ok(Tensor::zeros(&[0, 0])),
    };
    let mut out = Tensor::zeros(&[ffns.len(), d_out]);
    for (t, ffn) in ffns.iter().enumerate() {
        if ffn.d_in() != p.row_len() {
            return Err(Error::shape("pffn", p.shape(), &[ffn.d_in(), ffn.d_hidden()]));
        }
        out.row_mut(t).copy_from_slice(&ffn.forward_row(p.row(t), act));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixerBlockParams<S: Scalar> {
    pub ffn: Vec<TokenFfn<S>>,
    pub ln_mix: LayerNormParams<S>,
    pub ln_out: LayerNormParams<S>,
}

impl<S: Scalar> MixerBlockParams<S> {
    pub fn init<R: Rng + ?Sized>(cfg: &MixerConfig, rng: &mut R) -> Self {
        let ffn = (0..cfg.heads)
            .map(|_| TokenFfn::init(cfg.mixed_dim(), cfg.d_hidden, cfg.d_model, rng))
            .collect();
        Self {
            ffn,
            ln_mix: LayerNormParams::identity(cfg.mixed_dim()),
            ln_out: LayerNormParams::identity(cfg.d_model),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            ffn: self.ffn.iter().map(TokenFfn::zeros_like).collect(),
            ln_mix: self.ln_mix.zeros_like(),
            ln_out: self.ln_out.zeros_like(),
        }
    }
}

impl<S: Scalar> Params<S, Tensor<S>> for MixerBlockParams<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamRef<'a, S, Tensor<S>>)) {
        for (i, ffn) in self.ffn.iter().enumerate() {
            ffn.visit(&join(prefix, &format!("ffn.{i}")), f);
        }
        Params::<S, Tensor<S>>::visit(&self.ln_mix, &join(prefix, "ln_mix"), f);
        Params::<S, Tensor<S>>::visit(&self.ln_out, &join(prefix, "ln_out"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ParamMut<'a, S, Tensor<S>>)) {
        for (i, ffn) in self.ffn.iter_mut().enumerate() {
            ffn.visit_mut(&join(prefix, &format!("ffn.{i}")), f);
        }
        Params::<S, Tensor<S>>::visit_mut(&mut self.ln_mix, &join(prefix, "ln_mix"), f);
        Params::<S, Tensor<S>>::visit_mut(&mut self.ln_out, &join(prefix, "ln_out"), f);
    }
}

/// Gradients produced by a block backward pass.
#[derive(Clone, Debug)]
pub struct BlockGrads<P, S: Scalar> {
    pub input: Tensor<S>,
    pub params: P,
}

/// `X' = LN(PFFN(LN(Mixup(X))) + X)`, row-wise layer norms.
pub fn mixer_block_forward<'a, S: Scalar>(
    x: &Tensor<S>,
    params: &'a MixerBlockParams<S>,
    cfg: &'a MixerConfig,
) -> Result<GradPair<'a, S, BlockGrads<MixerBlockParams<S>, S>>> {
    cfg.validate()?;
    check_tokens(x, cfg.tokens, cfg.d_model)?;
    if params.ffn.len() != cfg.heads {
        return Err(Error::shape("mixer params", &[params.ffn.len()], &[cfg.heads]));
    }
    let act = cfg.activation;
    let mixed = mixup(x, cfg.heads)?;
    let mut ln1 = Vec::with_capacity(cfg.heads);
    let mut ffn_cache = Vec::with_capacity(cfg.heads);
    let mut ln2 = Vec::with_capacity(cfg.heads);
    let mut out = Tensor::zeros(&[cfg.tokens, cfg.d_model]);
    for h in 0..cfg.heads {
        let (normed, c1) = params.ln_mix.apply_row(mixed.row(h));
        let (y, cf) = params.ffn[h].forward_row_cached(&normed, act);
        let z: Vec<S> = y.iter().zip(x.row(h)).map(|(&a, &b)| a + b).collect();
        let (o, c2) = params.ln_out.apply_row(&z);
        out.row_mut(h).copy_from_slice(&o);
        ln1.push(c1);
        ffn_cache.push(cf);
        ln2.push(c2);
    }

    Ok(GradPair::new(out, move |dout: &Tensor<S>| {
        let mut grad = params.zeros_like();
        let mut dx = Tensor::zeros(&[cfg.tokens, cfg.d_model]);
        let mut dmixed = Tensor::zeros(&[cfg.heads, cfg.mixed_dim()]);
        for h in 0..cfg.heads {
            let dz = params.ln_out.backward_row(dout.row(h), &ln2[h], &mut grad.ln_out);
            crate::numeric::axpy(dx.row_mut(h), &dz);
            let dnormed = params.ffn[h].backward_row(&dz, &ffn_cache[h], act, &mut grad.ffn[h]);
            let dm = params.ln_mix.backward_row(&dnormed, &ln1[h], &mut grad.ln_mix);
            dmixed.row_mut(h).copy_from_slice(&dm);
        }
        let back = mixup_inverse(&dmixed, cfg.tokens).expect("mixup shape");
        dx.add_assign(&back).expect("token shape");
        BlockGrads {
            input: dx,
            params: grad,
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{check_gradient, flat_tensors, flat_tensors_mut, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product::<usize>();
        Tensor::new(shape.to_vec(), (0..n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn split_heads_contiguous() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        let s = split_heads(&x, 2).unwrap();
        assert_eq!(s.shape(), &[1, 2, 2]);
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0]);

        let x = seq(&[3, 6]);
        let s = split_heads(&x, 3).unwrap();
        let idx = (2 * 3 + 1) * 2;
        assert_eq!(&s.data()[idx..idx + 2], &x.row(2)[2..4]);
        assert_eq!(split_heads(&x, 1).unwrap().shape(), &[3, 1, 6]);
    }

    #[test]
    fn mixup_by_construction() {
        // [[a,b,c,d],[e,f,g,h]] -> [[a,b,e,f],[c,d,g,h]]
        let x = seq(&[2, 4]);
        let m = mixup(&x, 2).unwrap();
        assert_eq!(m.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(m.row(1), &[2.0, 3.0, 6.0, 7.0]);

        let x = seq(&[1, 6]);
        let m = mixup(&x, 3).unwrap();
        assert_eq!(m.shape(), &[3, 2]);
        assert_eq!(m.data(), x.data());
    }

    #[test]
    fn mixup_inverse_recovers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = Tensor::<f64>::normal(&[4, 8], 1.0, &mut rng);
        let x = mixup_inverse(&y, 4).unwrap();
        assert!(mixup(&x, 4).unwrap().bitwise_eq(&y));
        assert!(mixup_inverse(&mixup(&y, 4).unwrap(), 4).unwrap().bitwise_eq(&y));
    }

    #[test]
    fn pffn_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ffn = TokenFfn::<f64>::init(4, 3, 5, &mut rng).zeros_like();
        ffn.b2 = Tensor::full(&[5], 0.25);
        let p = Tensor::normal(&[2, 4], 1.0, &mut rng);
        let out = pffn(&p, &[ffn.clone(), ffn], Activation::Gelu).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.25));

        let a = TokenFfn::<f64>::init(4, 3, 5, &mut rng);
        let b = TokenFfn::<f64>::init(4, 3, 5, &mut rng);
        let out = pffn(&p, &[a.clone(), b.clone()], Activation::Gelu).unwrap();
        let single = pffn(&p.slice_rows(0, 1), std::slice::from_ref(&a), Activation::Gelu).unwrap();
        assert_eq!(out.row(0), single.row(0));
        let swapped = b.forward_row(p.row(0), Activation::Gelu);
        assert_ne!(out.row(0), &swapped[..]);

        assert!(pffn(&p, &[a], Activation::Gelu).is_err());
    }

    #[test]
    fn config_requires_heads_equal_tokens() {
        assert!(MixerConfig::new(4, 8, 2, 8).is_err());
        assert!(MixerConfig::new(3, 8, 3, 8).is_err());
        assert!(MixerConfig::new(4, 8, 4, 8).is_ok());
    }

    #[test]
    fn zero_ffn_passes_residual_through_ln() {
        let cfg = MixerConfig::new(4, 8, 4, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = MixerBlockParams::<f64>::init(&cfg, &mut rng).zeros_like();
        let params = MixerBlockParams {
            ln_mix: LayerNormParams::identity(cfg.mixed_dim()),
            ln_out: LayerNormParams::identity(cfg.d_model),
            ..params
        };
        let x = Tensor::normal(&[4, 8], 1.0, &mut rng);
        let out = mixer_block_forward(&x, &params, &cfg).unwrap().value;
        for t in 0..4 {
            let (expect, _) = params.ln_out.apply_row(x.row(t));
            assert_eq!(out.row(t), &expect[..]);
        }
    }

    #[test]
    fn block_gradient_check() {
        let cfg = MixerConfig::new(4, 8, 4, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = MixerBlockParams::<f64>::init(&cfg, &mut rng);
        for t in flat_tensors_mut(&mut params) {
            *t = Tensor::normal(t.shape(), 0.5, &mut rng);
        }
        let x = Tensor::normal(&[4, 8], 1.0, &mut rng);
        let w = Tensor::normal(&[4, 8], 1.0, &mut rng);

        let pair = mixer_block_forward(&x, &params, &cfg).unwrap();
        let grads = pair.backward(&w);
        let mut all = vec![x.clone()];
        all.extend(flat_tensors(&params).into_iter().cloned());
        let mut analytic = vec![grads.input];
        analytic.extend(flat_tensors(&grads.params).into_iter().cloned());

        let rebuild = |p: &[Tensor<f64>]| {
            let mut q = params.clone();
            for (dst, src) in flat_tensors_mut(&mut q).into_iter().zip(&p[1..]) {
                *dst = src.clone();
            }
            let out = mixer_block_forward(&p[0], &q, &cfg).unwrap().value;
            out.dot(&w).unwrap()
        };
        let report = check_gradient(rebuild, &all, &analytic, GradCheckConfig::default()).unwrap();
        assert!(report.passed, "{report:?}");
    }
}
