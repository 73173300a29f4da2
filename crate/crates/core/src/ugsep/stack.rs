use rand::Rng;
use serde::{Deserialize, Serialize};

use super::block::{BlockConfig, ResidualMode, UGSepBlock, UGSepBlockParams, USide};
use super::partition::UGPartition;
use crate::error::{Error, Result};
use crate::numeric::{join, Activation, Linear, ParamMut, ParamRef, Params, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub partition: UGPartition,
    /// `None` picks plain when the partition allows it, separated otherwise.
    #[serde(default)]
    pub residual: Option<ResidualMode>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackConfig {
    pub d_model: usize,
    pub d_hidden: usize,
    pub d_attn: usize,
    #[serde(default)]
    pub activation: Activation,
    pub compensation: bool,
    pub blocks: Vec<BlockSpec>,
}

impl StackConfig {
    /// `layers` blocks; the first maps `(n, m)` input tokens to `(c_u, c_g)`
    /// rows, the rest keep `(c_u, c_g)`.
    pub fn ugsep(
        n: usize,
        m: usize,
        c_u: usize,
        c_g: usize,
        layers: usize,
        d_model: usize,
        d_hidden: usize,
    ) -> Result<Self> {
        let first = UGPartition::new(n, m, c_u, c_g)?;
        let rest = UGPartition::new(c_u, c_g, c_u, c_g)?;
        let blocks = (0..layers)
            .map(|i| BlockSpec {
                partition: if i == 0 { first } else { rest },
                residual: None,
            })
            .collect();
        let cfg = Self {
            d_model,
            d_hidden,
            d_attn: d_model,
            activation: Activation::Gelu,
            compensation: false,
            blocks,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Unseparated stack: every token is treated as a G token.
    pub fn baseline(tokens: usize, layers: usize, d_model: usize, d_hidden: usize) -> Result<Self> {
        Self::ugsep(0, tokens, 0, tokens, layers, d_model, d_hidden)
    }

    pub fn with_compensation(mut self, on: bool) -> Self {
        self.compensation = on;
        self
    }

    pub fn with_residual(mut self, block: usize, mode: ResidualMode) -> Self {
        if let Some(b) = self.blocks.get_mut(block) {
            b.residual = Some(mode);
        }
        self
    }

    pub fn block_config(&self, i: usize) -> BlockConfig {
        let spec = &self.blocks[i];
        let residual = spec.residual.unwrap_or(if spec.partition.allows_plain_residual() {
            ResidualMode::Plain
        } else {
            ResidualMode::Separated
        });
        BlockConfig {
            d_model: self.d_model,
            d_hidden: self.d_hidden,
            d_attn: self.d_attn,
            activation: self.activation,
            partition: spec.partition,
            residual,
            compensation: self.compensation && spec.partition.c_u > 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::config("stack needs at least one block"));
        }
        for i in 0..self.blocks.len() {
            self.block_config(i).validate()?;
            if i > 0 {
                let prev = self.blocks[i - 1].partition;
                let cur = self.blocks[i].partition;
                if (cur.n, cur.m) != (prev.c_u, prev.c_g) {
                    return Err(Error::config(format!(
                        "block {i} expects (n, m) = ({}, {}) but block {} emits ({}, {})",
                        cur.n,
                        cur.m,
                        i - 1,
                        prev.c_u,
                        prev.c_g
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn input_partition(&self) -> UGPartition {
        self.blocks[0].partition
    }

    pub fn tokens(&self) -> usize {
        self.input_partition().tokens()
    }
}

/// Score head: mean over output rows, linear map, sigmoid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Readout<S: Scalar> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> Readout<S> {
    pub fn init<R: Rng + ?Sized>(d_model: usize, rng: &mut R) -> Self {
        Self {
            w: Tensor::uniform(&[d_model], 1.0 / (d_model as f64).sqrt(), rng),
            b: Tensor::zeros(&[1]),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Readout<T> {
        Readout {
            w: self.w.cast(),
            b: self.b.cast(),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w: Tensor::zeros(self.w.shape()),
            b: Tensor::zeros(&[1]),
        }
    }

    fn pooled(&self, out: &Tensor<S>) -> Vec<S> {
        let rows = S::lit(out.rows() as f64);
        let mut pooled = vec![S::zero(); out.row_len()];
        for r in 0..out.rows() {
            crate::numeric::axpy(&mut pooled, out.row(r));
        }
        pooled.iter().map(|&v| v / rows).collect()
    }

    /// Pre-sigmoid score.
    pub fn logit(&self, out: &Tensor<S>) -> S {
        let pooled = self.pooled(out);
        pooled
            .iter()
            .zip(self.w.data())
            .fold(S::zero(), |a, (&p, &w)| a + p * w)
            + self.b.data()[0]
    }

    pub fn score(&self, out: &Tensor<S>) -> S {
        sigmoid(self.logit(out))
    }
}

impl<S: Scalar, W> Params<S, W> for Readout<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamRef<'a, S, W>)) {
        f(join(prefix, "w"), ParamRef::Vector(&self.w));
        f(join(prefix, "b"), ParamRef::Vector(&self.b));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ParamMut<'a, S, W>)) {
        f(join(prefix, "w"), ParamMut::Vector(&mut self.w));
        f(join(prefix, "b"), ParamMut::Vector(&mut self.b));
    }
}

pub fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

/// Binary cross-entropy on a logit, `softplus(z) − y·z`.
pub fn logistic_loss<S: Scalar>(logit: S, label: S) -> S {
    let sp = if logit > S::zero() {
        logit + (-logit).exp().ln_1p()
    } else {
        logit.exp().ln_1p()
    };
    sp - label * logit
}

/// A stack of UG-Sep blocks followed by the readout head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stack<S: Scalar, W = Tensor<S>> {
    pub cfg: StackConfig,
    pub blocks: Vec<UGSepBlock<S, W>>,
    pub readout: Readout<S>,
}

#[derive(Clone, Debug)]
pub struct StackGrads<S: Scalar> {
    pub blocks: Vec<UGSepBlockParams<S>>,
    pub readout: Readout<S>,
}

impl<S: Scalar> Params<S, Tensor<S>> for StackGrads<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamRef<'a, S, Tensor<S>>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        Params::<S, Tensor<S>>::visit(&self.readout, &join(prefix, "readout"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ParamMut<'a, S, Tensor<S>>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        Params::<S, Tensor<S>>::visit_mut(&mut self.readout, &join(prefix, "readout"), f);
    }
}

impl<S: Scalar> Stack<S> {
    /// Blocks are initialised in order, then the readout, all from `rng`.
    pub fn init<R: Rng + ?Sized>(cfg: StackConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.blocks.len())
            .map(|i| UGSepBlock::init(cfg.block_config(i), rng))
            .collect::<Result<Vec<_>>>()?;
        let readout = Readout::init(cfg.d_model, rng);
        Ok(Self { cfg, blocks, readout })
    }

    /// Same model with every array converted to `T`.
    pub fn cast<T: Scalar>(&self) -> Stack<T> {
        Stack {
            cfg: self.cfg.clone(),
            blocks: self.blocks.iter().map(UGSepBlock::cast).collect(),
            readout: self.readout.cast(),
        }
    }

    pub fn zero_grads(&self) -> StackGrads<S> {
        StackGrads {
            blocks: self.blocks.iter().map(|b| b.params.zeros_like()).collect(),
            readout: self.readout.zeros_like(),
        }
    }

    /// Logistic loss of one example and its gradient with respect to every parameter.
    pub fn loss_grad(&self, x: &Tensor<S>, label: S) -> Result<(S, S, StackGrads<S>)> {
        let mut backs = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for b in &self.blocks {
            let (out, back) = b.forward_grad(&h)?.into_parts();
            backs.push(back);
            h = out;
        }
        let logit = self.readout.logit(&h);
        let loss = logistic_loss(logit, label);
        let prob = sigmoid(logit);
        let dlogit = prob - label;

        let rows = h.rows();
        let pooled = self.readout.pooled(&h);
        let mut readout = self.readout.zeros_like();
        readout.b.data_mut()[0] = dlogit;
        for (g, &p) in readout.w.data_mut().iter_mut().zip(&pooled) {
            *g = dlogit * p;
        }
        let mut dh = Tensor::zeros(h.shape());
        let inv = S::one() / S::lit(rows as f64);
        for r in 0..rows {
            for (d, &w) in dh.row_mut(r).iter_mut().zip(self.readout.w.data()) {
                *d = dlogit * w * inv;
            }
        }
        let mut blocks = Vec::with_capacity(backs.len());
        for back in backs.into_iter().rev() {
            let g = back(&dh);
            dh = g.input;
            blocks.push(g.params);
        }
        blocks.reverse();
        Ok((loss, prob, StackGrads { blocks, readout }))
    }
}

impl<S: Scalar, W: Linear<S>> Stack<S, W> {
    pub fn map_weights<W2: Linear<S>>(&self, f: &impl Fn(&W) -> W2) -> Stack<S, W2> {
        Stack {
            cfg: self.cfg.clone(),
            blocks: self.blocks.iter().map(|b| b.map_weights(f)).collect(),
            readout: self.readout.clone(),
        }
    }

    pub fn input_partition(&self) -> UGPartition {
        self.cfg.input_partition()
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.blocks.iter().try_fold(x.clone(), |h, b| b.forward(&h))
    }

    /// Output of every block, first to last.
    pub fn forward_traced(&self, x: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        let mut outs: Vec<Tensor<S>> = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let h = b.forward(outs.last().unwrap_or(x))?;
            outs.push(h);
        }
        Ok(outs)
    }

    pub fn score(&self, x: &Tensor<S>) -> Result<S> {
        Ok(self.readout.score(&self.forward(x)?))
    }

    /// Candidate-independent part of every block, from the U tokens alone.
    /// G rows of each block input are zero-filled; the mask makes their
    /// values irrelevant to the U side.
    pub fn u_phase(&self, u_tokens: &Tensor<S>) -> Result<Vec<USide<S>>> {
        let part = self.input_partition();
        let d = self.cfg.d_model;
        if u_tokens.shape() != [part.n, d] {
            return Err(Error::shape("u tokens", u_tokens.shape(), &[part.n, d]));
        }
        let mut x = Tensor::concat_rows(&[u_tokens, &Tensor::zeros(&[part.m, d])])?;
        let mut sides = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let u = b.u_side(&x)?;
            x = Tensor::concat_rows(&[&u.out, &Tensor::zeros(&[b.cfg.c_g(), d])])?;
            sides.push(u);
        }
        Ok(sides)
    }

    /// Per-candidate part given cached U sides; returns the final token matrix.
    pub fn g_phase(&self, u_tokens: &Tensor<S>, g_tokens: &Tensor<S>, sides: &[USide<S>]) -> Result<Tensor<S>> {
        let part = self.input_partition();
        if g_tokens.shape() != [part.m, self.cfg.d_model] {
            return Err(Error::shape("g tokens", g_tokens.shape(), &[part.m, self.cfg.d_model]));
        }
        if sides.len() != self.blocks.len() {
            return Err(Error::shape("cached u sides", &[sides.len()], &[self.blocks.len()]));
        }
        let mut x = Tensor::concat_rows(&[u_tokens, g_tokens])?;
        for (b, u) in self.blocks.iter().zip(sides) {
            let g = b.g_side(&x, u)?;
            x = Tensor::concat_rows(&[&u.out, &g])?;
        }
        Ok(x)
    }
}

impl<S: Scalar, W> Params<S, W> for Stack<S, W> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamRef<'a, S, W>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.params.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        Params::<S, W>::visit(&self.readout, &join(prefix, "readout"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ParamMut<'a, S, W>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.params.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        Params::<S, W>::visit_mut(&mut self.readout, &join(prefix, "readout"), f);
    }
}
