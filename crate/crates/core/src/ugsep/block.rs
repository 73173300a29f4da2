use rand::Rng;
use serde::{Deserialize, Serialize};

use super::partition::{build_ug_mask, UGMask, UGPartition};
use crate::error::{Error, Result};
use crate::mixer::{check_head_split, mixup_row_into, FfnCache, LayerNormParams, TokenFfn};
use crate::numeric::{
    axpy, check_gradient, flat_tensors, flat_tensors_mut, join, outer_acc, softmax_row,
    softmax_row_backward, vecmat_t, Activation, GradCheckConfig, GradCheckReport, GradPair,
    LnCache, Linear, ParamMut, ParamRef, Params, Scalar, Tensor,
};

pub use crate::mixer::BlockGrads;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualMode {
    /// `LN(Y + X)`; needs `(n, m) == (c_u, c_g)`.
    #[default]
    Plain,
    /// `LN(Y + CrossAttn(Y, X))` under the token-level UG mask.
    Separated,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub d_model: usize,
    pub d_hidden: usize,
    pub d_attn: usize,
    #[serde(default)]
    pub activation: Activation,
    pub partition: UGPartition,
    pub residual: ResidualMode,
    pub compensation: bool,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        self.partition.validate()?;
        check_head_split(self.tokens(), self.d_model, self.heads())?;
        if self.d_hidden == 0 {
            return Err(Error::config("d_hidden must be positive"));
        }
        match self.residual {
            ResidualMode::Plain if !self.partition.allows_plain_residual() => {
                Err(Error::config(format!(
                    "plain residual requested with (n, m) = ({}, {}) but (c_u, c_g) = ({}, {})",
                    self.partition.n, self.partition.m, self.partition.c_u, self.partition.c_g
                )))
            }
            ResidualMode::Separated if self.d_attn == 0 => {
                Err(Error::config("separated residual needs d_attn > 0"))
            }
            _ => Ok(()),
        }
    }

    pub fn tokens(&self) -> usize {
        self.partition.tokens()
    }

    pub fn heads(&self) -> usize {
        self.partition.heads()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads()
    }

    pub fn mixed_dim(&self) -> usize {
        self.tokens() * self.head_dim()
    }

    pub fn c_u(&self) -> usize {
        self.partition.c_u
    }

    pub fn c_g(&self) -> usize {
        self.partition.c_g
    }
}

/// `Û = flatten(U)·W + b`, reshaped to the G block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompensationParams<S: Scalar, W = Tensor<S>> {
    pub proj: W,
    pub bias: Tensor<S>,
}

impl<S: Scalar> CompensationParams<S> {
    /// Zero projection and bias: compensation starts as the identity on G.
    pub fn zeros(c_u: usize, c_g: usize, d: usize) -> Self {
        Self {
            proj: Tensor::zeros(&[c_u * d, c_g * d]),
            bias: Tensor::zeros(&[c_g * d]),
        }
    }

    pub fn cast<T: Scalar>(&self) -> CompensationParams<T> {
        CompensationParams {
            proj: self.proj.cast(),
            bias: self.bias.cast(),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            proj: Tensor::zeros(self.proj.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }
}

impl<S: Scalar, W: Linear<S>> CompensationParams<S, W> {
    /// Flattened increment for the G rows; depends on the U rows only.
    pub fn increment(&self, u_rows: &Tensor<S>) -> Vec<S> {
        let mut inc = self.proj.apply_row(u_rows.data());
        axpy(&mut inc, self.bias.data());
        inc
    }

    fn map_weights<W2>(&self, f: &impl Fn(&W) -> W2) -> CompensationParams<S, W2> {
        CompensationParams {
            proj: f(&self.proj),
            bias: self.bias.clone(),
        }
    }
}

impl<S: Scalar, W> Params<S, W> for CompensationParams<S, W> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamRef<'a, S, W>)) {
        f(join(prefix, "proj"), ParamRef::Weight(&self.proj));
        f(join(prefix, "bias"), ParamRef::Vector(&self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ParamMut<'a, S, W>)) {
        f(join(prefix, "proj"), ParamMut::Weight(&mut self.proj));
        f(join(prefix, "bias"), ParamMut::Vector(&mut self.bias));
    }
}

/// Single-head cross-attention from mixed rows (queries) to block input tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossAttnParams<S: Scalar, W = Tensor<S>> {
    pub wq: W,
    pub wk: W,
    pub wv: W,
    pub wo: W,
    #[serde(skip)]
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> CrossAttnParams<S> {
    pub fn init<R: Rng + ?Sized>(d_model: usize, d_attn: usize, rng: &mut R) -> Self {
        let b_in = 1.0 / (d_model as f64).sqrt();
        let b_out = 1.0 / (d_attn as f64).sqrt();
        Self {
            wq: Tensor::uniform(&[d_model, d_attn], b_in, rng),
            wk: Tensor::uniform(&[d_model, d_attn], b_in, rng),
            wv: Tensor::uniform(&[d_model, d_attn], b_in, rng),
            wo: Tensor::uniform(&[d_attn, d_model], b_out, rng),
            _marker: Default::default(),
        }
    }

    pub fn from_weights(wq: Tensor<S>, wk: Tensor<S>, wv: Tensor<S>, wo: Tensor<S>) -> Self {
        Self {
            wq,
            wk,
            wv,
            wo,
            _marker: Default::default(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> CrossAttnParams<T> {
        CrossAttnParams::from_weights(self.wq.cast(), self.wk.cast(), self.wv.cast(), self.wo.cast())
    }

    fn zeros_like(&self) -> Self {
        Self::from_weights(
            Tensor::zeros(self.wq.shape()),
            Tensor::zeros(self.wk.shape()),
            Tensor::zeros(self.wv.shape()),
            Tensor::zeros(self.wo.shape()),
        )
    }
}

impl<S: Scalar, W: Linear<S>> CrossAttnParams<S, W> {
    pub fn d_attn(&self) -> usize {
        self.wq.out_dim()
    }

    fn scale(&self) -> S {
        S::one() / S::lit(self.d_attn() as f64).sqrt()
    }

    fn map_weights<W2>(&self, f: &impl Fn(&W) -> W2) -> CrossAttnParams<S, W2> {
        CrossAttnParams {
            wq: f(&self.wq),
            wk: f(&self.wk),
            wv: f(&self.wv),
            wo: f(&self.wo),
            _marker: Default::default(),
        }
    }
}

impl<S: Scalar, W> Params<S, W> for CrossAttnParams<S, W> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamRef<'a, S, W>)) {
        f(join(prefix, "wq"), ParamRef::Weight(&self.wq));
        f(join(prefix, "wk"), ParamRef::Weight(&self.wk));
        f(join(prefix, "wv"), ParamRef::Weight(&self.wv));
        f(join(prefix, "wo"), ParamRef::Weight(&self.wo));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ParamMut<'a, S, W>)) {
        f(join(prefix, "wq"), ParamMut::Weight(&mut self.wq));
        f(join(prefix, "wk"), ParamMut::Weight(&mut self.wk));
        f(join(prefix, "wv"), ParamMut::Weight(&mut self.wv));
        f(join(prefix, "wo"), ParamMut::Weight(&mut self.wo));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UGSepBlockParams<S: Scalar, W = Tensor<S>> {
    /// FFNs of rows `[0, c_u)`; computed once per user when serving.
    pub reusable: Vec<TokenFfn<S, W>>,
    /// FFNs of rows `[c_u, H)`; computed per candidate.
    pub non_reusable: Vec<TokenFfn<S, W>>,
    pub ln_mix: LayerNormParams<S>,
    pub ln_out: LayerNormParams<S>,
    pub compensation: Option<CompensationParams<S, W>>,
    pub residual_attn: Option<CrossAttnParams<S, W>>,
}

impl<S: Scalar> UGSepBlockParams<S> {
    pub fn init<R: Rng + ?Sized>(cfg: &BlockConfig, rng: &mut R) -> Self {
        let l = cfg.mixed_dim();
        let mut ffn = |count: usize| -> Vec<TokenFfn<S>> {
            (0..count)
                .map(|_| TokenFfn::init(l, cfg.d_hidden, cfg.d_model, rng))
                .collect()
        };
        let reusable = ffn(cfg.c_u());
        let non_reusable = ffn(cfg.c_g());
        let residual_attn = match cfg.residual {
            ResidualMode::Separated => Some(CrossAttnParams::init(cfg.d_model, cfg.d_attn, rng)),
            ResidualMode::Plain => None,
        };
        Self {
            reusable,
            non_reusable,
            ln_mix: LayerNormParams::identity(l),
            ln_out: LayerNormParams::identity(cfg.d_model),
            compensation: cfg
                .compensation
                .then(|| CompensationParams::zeros(cfg.c_u(), cfg.c_g(), cfg.d_model)),
            residual_attn,
        }
    }

    pub fn cast<T: Scalar>(&self) -> UGSepBlockParams<T> {
        UGSepBlockParams {
            reusable: self.reusable.iter().map(TokenFfn::cast).collect(),
            non_reusable: self.non_reusable.iter().map(TokenFfn::cast).collect(),
            ln_mix: self.ln_mix.cast(),
            ln_out: self.ln_out.cast(),
            compensation: self.compensation.as_ref().map(CompensationParams::cast),
            residual_attn: self.residual_attn.as_ref().map(CrossAttnParams::cast),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            reusable: self.reusable.iter().map(TokenFfn::zeros_like).collect(),
            non_reusable: self.non_reusable.iter().map(TokenFfn::zeros_like).collect(),
            ln_mix: self.ln_mix.zeros_like(),
            ln_out: self.ln_out.zeros_like(),
            compensation: self.compensation.as_ref().map(CompensationParams::zeros_like),
            residual_attn: self.residual_attn.as_ref().map(CrossAttnParams::zeros_like),
        }
    }
}

impl<S: Scalar, W: Linear<S>> UGSepBlockParams<S, W> {
    pub fn ffn(&self, row: usize) -> &TokenFfn<S, W> {
        let c_u = self.reusable.len();
        if row < c_u {
            &self.reusable[row]
        } else {
            &self.non_reusable[row - c_u]
        }
    }

    pub fn map_weights<W2>(&self, f: &impl Fn(&W) -> W2) -> UGSepBlockParams<S, W2> {
        UGSepBlockParams {
            reusable: self.reusable.iter().map(|p| p.map_weights(f)).collect(),
            non_reusable: self.non_reusable.iter().map(|p| p.map_weights(f)).collect(),
            ln_mix: self.ln_mix.clone(),
            ln_out: self.ln_out.clone(),
            compensation: self.compensation.as_ref().map(|c| c.map_weights(f)),
            residual_attn: self.residual_attn.as_ref().map(|a| a.map_weights(f)),
        }
    }

    fn check(&self, cfg: &BlockConfig) -> Result<()> {
        if self.reusable.len() != cfg.c_u() || self.non_reusable.len() != cfg.c_g() {
            return Err(Error::shape(
                "ffn weight sets",
                &[self.reusable.len(), self.non_reusable.len()],
                &[cfg.c_u(), cfg.c_g()],
            ));
        }
        if cfg.compensation != self.compensation.is_some() {
            return Err(Error::config("compensation flag and parameters disagree"));
        }
        if cfg.residual == ResidualMode::Separated && self.residual_attn.is_none() {
            return Err(Error::config("separated residual requested without attention parameters"));
        }
        Ok(())
    }
}

impl<S: Scalar, W> Params<S, W> for UGSepBlockParams<S, W> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamRef<'a, S, W>)) {
        for (i, p) in self.reusable.iter().enumerate() {
            p.visit(&join(prefix, &format!("reusable.{i}")), f);
        }
        for (i, p) in self.non_reusable.iter().enumerate() {
            p.visit(&join(prefix, &format!("non_reusable.{i}")), f);
        }
        Params::<S, W>::visit(&self.ln_mix, &join(prefix, "ln_mix"), f);
        Params::<S, W>::visit(&self.ln_out, &join(prefix, "ln_out"), f);
        if let Some(c) = &self.compensation {
            c.visit(&join(prefix, "compensation"), f);
        }
        if let Some(a) = &self.residual_attn {
            a.visit(&join(prefix, "residual_attn"), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ParamMut<'a, S, W>)) {
        for (i, p) in self.reusable.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &format!("reusable.{i}")), f);
        }
        for (i, p) in self.non_reusable.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &format!("non_reusable.{i}")), f);
        }
        Params::<S, W>::visit_mut(&mut self.ln_mix, &join(prefix, "ln_mix"), f);
        Params::<S, W>::visit_mut(&mut self.ln_out, &join(prefix, "ln_out"), f);
        if let Some(c) = &mut self.compensation {
            c.visit_mut(&join(prefix, "compensation"), f);
        }
        if let Some(a) = &mut self.residual_attn {
            a.visit_mut(&join(prefix, "residual_attn"), f);
        }
    }
}

/// One row of `Mixup(X) ⊙ mask`.
///
/// Masked entries are written as `+0.0` rather than multiplied, so a masked
/// G value can never leak its sign (or a NaN) into a U row.
pub fn masked_mixup_row_into<S: Scalar>(x: &Tensor<S>, mask: &UGMask, h: usize, out: &mut [S]) {
    mixup_row_into(x, mask.heads(), h, out);
    for (v, &keep) in out.iter_mut().zip(mask.row(h)) {
        if keep == 0 {
            *v = S::zero();
        }
    }
}

pub fn masked_mixup<S: Scalar>(x: &Tensor<S>, mask: &UGMask) -> Result<Tensor<S>> {
    let heads = mask.heads();
    if x.rank() != 2 {
        return Err(Error::shape("masked_mixup", x.shape(), &[0, 0]));
    }
    check_head_split(x.shape()[0], x.shape()[1], heads)?;
    if x.numel() / heads != mask.cols() {
        return Err(Error::shape("masked_mixup", x.shape(), &[heads, mask.cols()]));
    }
    let mut out = Tensor::zeros(&[heads, mask.cols()]);
    for h in 0..heads {
        masked_mixup_row_into(x, mask, h, out.row_mut(h));
    }
    Ok(out)
}

/// Runs normalised mixed rows through their FFNs: rows `[0, c_u)` through the
/// reusable sets, the rest through the non-reusable ones.
pub fn split_pffn<S: Scalar, W: Linear<S>>(
    p_normed: &Tensor<S>,
    params: &UGSepBlockParams<S, W>,
    part: &UGPartition,
    act: Activation,
) -> Result<(Tensor<S>, Tensor<S>)> {
    if params.reusable.len() != part.c_u || params.non_reusable.len() != part.c_g {
        return Err(Error::shape(
            "split_pffn weight sets",
            &[params.reusable.len(), params.non_reusable.len()],
            &[part.c_u, part.c_g],
        ));
    }
    if p_normed.rank() != 2 || p_normed.rows() != part.heads() {
        return Err(Error::shape("split_pffn", p_normed.shape(), &[part.heads()]));
    }
    let d_out = params.ffn(part.c_u).d_out();
    let mut u = Tensor::zeros(&[part.c_u, d_out]);
    let mut g = Tensor::zeros(&[part.c_g, d_out]);
    for row in 0..part.heads() {
        let ffn = params.ffn(row);
        if ffn.d_in() != p_normed.row_len() {
            return Err(Error::shape("split_pffn", p_normed.shape(), &[ffn.d_in()]));
        }
        let y = ffn.forward_row(p_normed.row(row), act);
        if row < part.c_u {
            u.row_mut(row).copy_from_slice(&y);
        } else {
            g.row_mut(row - part.c_u).copy_from_slice(&y);
        }
    }
    Ok((u, g))
}

/// `G + reshape(Proj(flatten(U)))`. `U` is read only.
pub fn info_compensation<S: Scalar, W: Linear<S>>(
    u: &Tensor<S>,
    g: &Tensor<S>,
    comp: &CompensationParams<S, W>,
) -> Result<Tensor<S>> {
    if comp.proj.in_dim() != u.numel() || comp.proj.out_dim() != g.numel() {
        return Err(Error::shape(
            "info_compensation",
            &[u.numel(), g.numel()],
            &[comp.proj.in_dim(), comp.proj.out_dim()],
        ));
    }
    let inc = comp.increment(u);
    let mut out = g.clone();
    axpy(out.data_mut(), &inc);
    Ok(out)
}

/// Attention of one query over the first `n_keys` key/value rows.
fn attend_row<S: Scalar>(
    q: &[S],
    keys: &Tensor<S>,
    values: &Tensor<S>,
    n_keys: usize,
    scale: S,
) -> (Vec<S>, Vec<S>) {
    let scores: Vec<S> = (0..n_keys)
        .map(|j| {
            let k = keys.row(j);
            q.iter().zip(k).fold(S::zero(), |a, (&x, &y)| a + x * y) * scale
        })
        .collect();
    let weights = softmax_row(&scores);
    let mut ctx = vec![S::zero(); values.row_len()];
    for (j, &w) in weights.iter().enumerate() {
        for (c, &v) in ctx.iter_mut().zip(values.row(j)) {
            *c = *c + w * v;
        }
    }
    (weights, ctx)
}

fn project_rows<S: Scalar, W: Linear<S>>(x: &Tensor<S>, start: usize, end: usize, w: &W) -> Tensor<S> {
    let mut out = Tensor::zeros(&[end - start, w.out_dim()]);
    for (r, t) in (start..end).enumerate() {
        out.row_mut(r).copy_from_slice(&w.apply_row(x.row(t)));
    }
    out
}

/// Adds the UG-masked cross-attention residual to `y` (rows are queries,
/// `x_in` tokens are keys/values). Query rows `< c_u` only see keys `< n`.
/// The final layer norm is not applied here.
pub fn separated_residual<S: Scalar, W: Linear<S>>(
    y: &Tensor<S>,
    x_in: &Tensor<S>,
    attn: &CrossAttnParams<S, W>,
    part: &UGPartition,
) -> Result<Tensor<S>> {
    if y.rank() != 2 || y.rows() != part.heads() || x_in.rows() != part.tokens() {
        return Err(Error::shape("separated_residual", y.shape(), x_in.shape()));
    }
    let keys = project_rows(x_in, 0, part.tokens(), &attn.wk);
    let values = project_rows(x_in, 0, part.tokens(), &attn.wv);
    let mut out = y.clone();
    for i in 0..part.heads() {
        let n_keys = if i < part.c_u { part.n } else { part.tokens() };
        let q = attn.wq.apply_row(y.row(i));
        let (_, ctx) = attend_row(&q, &keys, &values, n_keys, attn.scale());
        let r = attn.wo.apply_row(&ctx);
        axpy(out.row_mut(i), &r);
    }
    Ok(out)
}

/// Everything a U row needs, computed from the block input once per user.
#[derive(Clone, Debug, PartialEq)]
pub struct USide<S: Scalar> {
    /// Masked mixup rows `[0, c_u)`.
    pub mixed: Tensor<S>,
    /// The same rows after the mixing layer norm.
    pub normed: Tensor<S>,
    /// Reusable FFN outputs (pre-residual U rows).
    pub ffn_out: Tensor<S>,
    /// Compensation increment for the G rows.
    pub comp: Option<Vec<S>>,
    /// Key/value projections of the U input tokens (separated residual only).
    pub keys: Option<Tensor<S>>,
    pub values: Option<Tensor<S>>,
    /// Block output rows `[0, c_u)`.
    pub out: Tensor<S>,
}

/// One UG-Sep token-mixing block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UGSepBlock<S: Scalar, W = Tensor<S>> {
    pub cfg: BlockConfig,
    pub mask: UGMask,
    pub params: UGSepBlockParams<S, W>,
}

impl<S: Scalar> UGSepBlock<S> {
    pub fn init<R: Rng + ?Sized>(cfg: BlockConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mask = build_ug_mask(&cfg.partition, cfg.head_dim(), cfg.tokens())?;
        let params = UGSepBlockParams::init(&cfg, rng);
        Ok(Self { cfg, mask, params })
    }

    pub fn cast<T: Scalar>(&self) -> UGSepBlock<T> {
        UGSepBlock {
            cfg: self.cfg.clone(),
            mask: self.mask.clone(),
            params: self.params.cast(),
        }
    }
}

impl<S: Scalar, W: Linear<S>> UGSepBlock<S, W> {
    pub fn new(cfg: BlockConfig, params: UGSepBlockParams<S, W>) -> Result<Self> {
        cfg.validate()?;
        params.check(&cfg)?;
        let mask = build_ug_mask(&cfg.partition, cfg.head_dim(), cfg.tokens())?;
        Ok(Self { cfg, mask, params })
    }

    pub fn map_weights<W2: Linear<S>>(&self, f: &impl Fn(&W) -> W2) -> UGSepBlock<S, W2> {
        UGSepBlock {
            cfg: self.cfg.clone(),
            mask: self.mask.clone(),
            params: self.params.map_weights(f),
        }
    }

    fn check_input(&self, x: &Tensor<S>) -> Result<()> {
        if x.shape() != [self.cfg.tokens(), self.cfg.d_model] {
            return Err(Error::shape("block input", x.shape(), &[self.cfg.tokens(), self.cfg.d_model]));
        }
        Ok(())
    }

    fn mixed_normed(&self, x: &Tensor<S>, row: usize, mixed: &mut [S]) -> (Vec<S>, LnCache<S>) {
        masked_mixup_row_into(x, &self.mask, row, mixed);
        self.params.ln_mix.apply_row(mixed)
    }

    /// U-row computation. Reads the full input so that a faulty mask leaks
    /// exactly as it would in the full forward pass.
    pub fn u_side(&self, x: &Tensor<S>) -> Result<USide<S>> {
        self.check_input(x)?;
        let cfg = &self.cfg;
        let (c_u, d) = (cfg.c_u(), cfg.d_model);
        let act = cfg.activation;
        let mut mixed = Tensor::zeros(&[c_u, cfg.mixed_dim()]);
        let mut normed = Tensor::zeros(&[c_u, cfg.mixed_dim()]);
        let mut ffn_out = Tensor::zeros(&[c_u, d]);
        for i in 0..c_u {
            let (nrm, _) = self.mixed_normed(x, i, mixed.row_mut(i));
            let y = self.params.reusable[i].forward_row(&nrm, act);
            normed.row_mut(i).copy_from_slice(&nrm);
            ffn_out.row_mut(i).copy_from_slice(&y);
        }
        let comp = self.params.compensation.as_ref().map(|c| c.increment(&ffn_out));

        let mut out = Tensor::zeros(&[c_u, d]);
        let (mut keys, mut values) = (None, None);
        match cfg.residual {
            ResidualMode::Plain => {
                for i in 0..c_u {
                    let z: Vec<S> = ffn_out.row(i).iter().zip(x.row(i)).map(|(&a, &b)| a + b).collect();
                    out.row_mut(i).copy_from_slice(&self.params.ln_out.apply_row(&z).0);
                }
            }
            ResidualMode::Separated => {
                let attn = self.params.residual_attn.as_ref().expect("checked at construction");
                let n = cfg.partition.n;
                let k = project_rows(x, 0, n, &attn.wk);
                let v = project_rows(x, 0, n, &attn.wv);
                for i in 0..c_u {
                    let q = attn.wq.apply_row(ffn_out.row(i));
                    let (_, ctx) = attend_row(&q, &k, &v, n, attn.scale());
                    let r = attn.wo.apply_row(&ctx);
                    let z: Vec<S> = ffn_out.row(i).iter().zip(&r).map(|(&a, &b)| a + b).collect();
                    out.row_mut(i).copy_from_slice(&self.params.ln_out.apply_row(&z).0);
                }
                keys = Some(k);
                values = Some(v);
            }
        }
        Ok(USide {
            mixed,
            normed,
            ffn_out,
            comp,
            keys,
            values,
            out,
        })
    }

    /// G-row computation given the (possibly cached) U side.
    pub fn g_side(&self, x: &Tensor<S>, u: &USide<S>) -> Result<Tensor<S>> {
        self.check_input(x)?;
        let cfg = &self.cfg;
        let (c_u, c_g, d) = (cfg.c_u(), cfg.c_g(), cfg.d_model);
        let act = cfg.activation;
        let mut mixed = vec![S::zero(); cfg.mixed_dim()];
        let mut y = Tensor::zeros(&[c_g, d]);
        for r in 0..c_g {
            let (nrm, _) = self.mixed_normed(x, c_u + r, &mut mixed);
            let mut row = self.params.non_reusable[r].forward_row(&nrm, act);
            if let Some(inc) = &u.comp {
                axpy(&mut row, &inc[r * d..(r + 1) * d]);
            }
            y.row_mut(r).copy_from_slice(&row);
        }

        let mut out = Tensor::zeros(&[c_g, d]);
        match cfg.residual {
            ResidualMode::Plain => {
                for r in 0..c_g {
                    let z: Vec<S> = y.row(r).iter().zip(x.row(c_u + r)).map(|(&a, &b)| a + b).collect();
                    out.row_mut(r).copy_from_slice(&self.params.ln_out.apply_row(&z).0);
                }
            }
            ResidualMode::Separated => {
                let attn = self.params.residual_attn.as_ref().expect("checked at construction");
                let n = cfg.partition.n;
                let t = cfg.tokens();
                let (ku, vu) = match (&u.keys, &u.values) {
                    (Some(k), Some(v)) => (k, v),
                    _ => return Err(Error::config("U side lacks cached keys/values")),
                };
                let keys = Tensor::concat_rows(&[ku, &project_rows(x, n, t, &attn.wk)])?;
                let values = Tensor::concat_rows(&[vu, &project_rows(x, n, t, &attn.wv)])?;
                for r in 0..c_g {
                    let q = attn.wq.apply_row(y.row(r));
                    let (_, ctx) = attend_row(&q, &keys, &values, t, attn.scale());
                    let res = attn.wo.apply_row(&ctx);
                    let z: Vec<S> = y.row(r).iter().zip(&res).map(|(&a, &b)| a + b).collect();
                    out.row_mut(r).copy_from_slice(&self.params.ln_out.apply_row(&z).0);
                }
            }
        }
        Ok(out)
    }

    /// Full block output, `H×D`.
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let u = self.u_side(x)?;
        let g = self.g_side(x, &u)?;
        Tensor::concat_rows(&[&u.out, &g])
    }
}

struct AttnCache<S> {
    keys: Tensor<S>,
    values: Tensor<S>,
    queries: Vec<Vec<S>>,
    weights: Vec<Vec<S>>,
    ctx: Vec<Vec<S>>,
}

impl<S: Scalar> UGSepBlock<S> {
    /// Forward pass that also returns the backward procedure for the input
    /// and every parameter. Produces the same bits as [`UGSepBlock::forward`].
    pub fn forward_grad(&self, x: &Tensor<S>) -> Result<GradPair<'_, S, BlockGrads<UGSepBlockParams<S>, S>>> {
        self.check_input(x)?;
        self.params.check(&self.cfg)?;
        let cfg = &self.cfg;
        let p = &self.params;
        let (h_rows, c_u, c_g, d, t) = (cfg.heads(), cfg.c_u(), cfg.c_g(), cfg.d_model, cfg.tokens());
        let n = cfg.partition.n;
        let act = cfg.activation;

        let mut mixed = vec![S::zero(); cfg.mixed_dim()];
        let mut ln1: Vec<LnCache<S>> = Vec::with_capacity(h_rows);
        let mut ffn_cache: Vec<FfnCache<S>> = Vec::with_capacity(h_rows);
        let mut y = Tensor::zeros(&[h_rows, d]);
        for row in 0..h_rows {
            let (nrm, c1) = self.mixed_normed(x, row, &mut mixed);
            let (out, cf) = p.ffn(row).forward_row_cached(&nrm, act);
            y.row_mut(row).copy_from_slice(&out);
            ln1.push(c1);
            ffn_cache.push(cf);
        }
        let u_flat = y.slice_rows(0, c_u);
        if let Some(comp) = &p.compensation {
            let inc = comp.increment(&u_flat);
            for r in 0..c_g {
                axpy(y.row_mut(c_u + r), &inc[r * d..(r + 1) * d]);
            }
        }

        let mut z = y.clone();
        let attn_cache = match (&cfg.residual, &p.residual_attn) {
            (ResidualMode::Plain, _) => {
                for row in 0..h_rows {
                    let zr: Vec<S> = y.row(row).iter().zip(x.row(row)).map(|(&a, &b)| a + b).collect();
                    z.row_mut(row).copy_from_slice(&zr);
                }
                None
            }
            (ResidualMode::Separated, Some(attn)) => {
                let keys = project_rows(x, 0, t, &attn.wk);
                let values = project_rows(x, 0, t, &attn.wv);
                let mut cache = AttnCache {
                    keys,
                    values,
                    queries: Vec::with_capacity(h_rows),
                    weights: Vec::with_capacity(h_rows),
                    ctx: Vec::with_capacity(h_rows),
                };
                for row in 0..h_rows {
                    let n_keys = if row < c_u { n } else { t };
                    let q = attn.wq.apply_row(y.row(row));
                    let (w, ctx) = attend_row(&q, &cache.keys, &cache.values, n_keys, attn.scale());
                    let res = attn.wo.apply_row(&ctx);
                    let zr: Vec<S> = y.row(row).iter().zip(&res).map(|(&a, &b)| a + b).collect();
                    z.row_mut(row).copy_from_slice(&zr);
                    cache.queries.push(q);
                    cache.weights.push(w);
                    cache.ctx.push(ctx);
                }
                Some(cache)
            }
            (ResidualMode::Separated, None) => unreachable!("checked above"),
        };

        let mut out = Tensor::zeros(&[h_rows, d]);
        let mut ln2 = Vec::with_capacity(h_rows);
        for row in 0..h_rows {
            let (o, c2) = p.ln_out.apply_row(z.row(row));
            out.row_mut(row).copy_from_slice(&o);
            ln2.push(c2);
        }

        let x_saved = x.clone();
        Ok(GradPair::new(out, move |dout: &Tensor<S>| {
            let mut grad = p.zeros_like();
            let mut dx = Tensor::zeros(&[t, d]);
            let mut dz = Tensor::zeros(&[h_rows, d]);
            for row in 0..h_rows {
                let g = p.ln_out.backward_row(dout.row(row), &ln2[row], &mut grad.ln_out);
                dz.row_mut(row).copy_from_slice(&g);
            }

            let mut dy = dz.clone();
            match &attn_cache {
                None => {
                    dx.add_assign(&dz).expect("plain residual shape");
                }
                Some(cache) => {
                    let attn = p.residual_attn.as_ref().expect("separated");
                    let ga = grad.residual_attn.as_mut().expect("separated");
                    let scale = attn.scale();
                    let mut dkeys = Tensor::zeros(cache.keys.shape());
                    let mut dvalues = Tensor::zeros(cache.values.shape());
                    for row in 0..h_rows {
                        let dr = dz.row(row);
                        outer_acc(&mut ga.wo, &cache.ctx[row], dr);
                        let dctx = vecmat_t(dr, &attn.wo);
                        let w = &cache.weights[row];
                        let n_keys = w.len();
                        let dw: Vec<S> = (0..n_keys)
                            .map(|j| {
                                cache.values.row(j).iter().zip(&dctx).fold(S::zero(), |a, (&v, &c)| a + v * c)
                            })
                            .collect();
                        for j in 0..n_keys {
                            axpy_scaled(dvalues.row_mut(j), &dctx, w[j]);
                        }
                        let ds = softmax_row_backward(w, &dw);
                        let q = &cache.queries[row];
                        let mut dq = vec![S::zero(); q.len()];
                        for j in 0..n_keys {
                            let g = ds[j] * scale;
                            axpy_scaled(&mut dq, cache.keys.row(j), g);
                            axpy_scaled(dkeys.row_mut(j), q, g);
                        }
                        outer_acc(&mut ga.wq, y.row(row), &dq);
                        let dy_q = vecmat_t(&dq, &attn.wq);
                        axpy(dy.row_mut(row), &dy_q);
                    }
                    for j in 0..t {
                        outer_acc(&mut ga.wk, x_saved.row(j), dkeys.row(j));
                        outer_acc(&mut ga.wv, x_saved.row(j), dvalues.row(j));
                        let a = vecmat_t(dkeys.row(j), &attn.wk);
                        let b = vecmat_t(dvalues.row(j), &attn.wv);
                        axpy(dx.row_mut(j), &a);
                        axpy(dx.row_mut(j), &b);
                    }
                }
            }

            if let (Some(comp), Some(gc)) = (&p.compensation, grad.compensation.as_mut()) {
                let dinc: Vec<S> = dy.data()[c_u * d..].to_vec();
                axpy(gc.bias.data_mut(), &dinc);
                outer_acc(&mut gc.proj, u_flat.data(), &dinc);
                let du = vecmat_t(&dinc, &comp.proj);
                axpy(&mut dy.data_mut()[..c_u * d], &du);
            }

            let mut dmixed = Tensor::zeros(&[h_rows, cfg.mixed_dim()]);
            for row in 0..h_rows {
                let c = cfg.c_u();
                let gffn = if row < c {
                    &mut grad.reusable[row]
                } else {
                    &mut grad.non_reusable[row - c]
                };
                let dn = p.ffn(row).backward_row(dy.row(row), &ffn_cache[row], act, gffn);
                let mut dm = p.ln_mix.backward_row(&dn, &ln1[row], &mut grad.ln_mix);
                for (v, &keep) in dm.iter_mut().zip(self.mask.row(row)) {
                    if keep == 0 {
                        *v = S::zero();
                    }
                }
                dmixed.row_mut(row).copy_from_slice(&dm);
            }
            let back = crate::mixer::mixup_inverse(&dmixed, t).expect("mixup shape");
            dx.add_assign(&back).expect("token shape");
            BlockGrads {
                input: dx,
                params: grad,
            }
        }))
    }
}

fn axpy_scaled<S: Scalar>(dst: &mut [S], src: &[S], k: S) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + k * s;
    }
}

/// Central-difference check of [`UGSepBlock::forward_grad`] for the input and
/// every parameter, on the scalar `Σ out ⊙ upstream`.
pub fn check_block_gradient(
    block: &UGSepBlock<f64>,
    x: &Tensor<f64>,
    upstream: &Tensor<f64>,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    let grads = block.forward_grad(x)?.backward(upstream);
    let mut all = vec![x.clone()];
    all.extend(flat_tensors(&block.params).into_iter().cloned());
    let mut analytic = vec![grads.input];
    analytic.extend(flat_tensors(&grads.params).into_iter().cloned());
    let objective = |p: &[Tensor<f64>]| {
        let mut b = block.clone();
        for (dst, src) in flat_tensors_mut(&mut b.params).into_iter().zip(&p[1..]) {
            *dst = src.clone();
        }
        match b.forward(&p[0]) {
            Ok(out) => out.dot(upstream).unwrap_or(f64::NAN),
            Err(_) => f64::NAN,
        }
    };
    check_gradient(objective, &all, &analytic, cfg)
}
