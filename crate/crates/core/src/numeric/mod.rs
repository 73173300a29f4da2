//! Deterministic dense tensors, kernels and the finite-difference checker.

mod grad;
mod kernels;
mod tensor;

pub use grad::{central_difference, check_gradient, GradCheckConfig, GradCheckReport, GradPair};
pub use kernels::{
    axpy, layer_norm, layer_norm_row, layer_norm_row_backward, masked_softmax_row, matmul,
    outer_acc, sigmoid, softmax_row, softmax_row_backward, transpose, vecmat, vecmat_into,
    vecmat_t, Activation, LnCache, LN_EPS,
};
pub use tensor::{Dtype, Scalar, Tensor};

/// A weight matrix applied as `y = x·W` to row vectors.
///
/// Dense tensors and quantized matrices both implement this so that one
/// forward pass serves full-precision and W8A16 models.
pub trait Linear<S: Scalar>: Clone + Send + Sync {
    fn in_dim(&self) -> usize;

    fn out_dim(&self) -> usize;

    fn apply_row(&self, x: &[S]) -> Vec<S>;
}

impl<S: Scalar> Linear<S> for Tensor<S> {
    fn in_dim(&self) -> usize {
        self.shape()[0]
    }

    fn out_dim(&self) -> usize {
        self.shape()[1]
    }

    fn apply_row(&self, x: &[S]) -> Vec<S> {
        vecmat(x, self)
    }
}

pub enum ParamRef<'a, S, W> {
    Weight(&'a W),
    Vector(&'a Tensor<S>),
}

pub enum ParamMut<'a, S, W> {
    Weight(&'a mut W),
    Vector(&'a mut Tensor<S>),
}

/// Named traversal over every learnable array, in a fixed order.
pub trait Params<S: Scalar, W> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ParamRef<'a, S, W>));

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, ParamMut<'a, S, W>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// All arrays of a dense parameter set, in visiting order.
pub fn flat_tensors<S: Scalar, P: Params<S, Tensor<S>>>(p: &P) -> Vec<&Tensor<S>> {
    let mut out = Vec::new();
    p.visit("", &mut |_, r| match r {
        ParamRef::Weight(t) | ParamRef::Vector(t) => out.push(t),
    });
    out
}

pub fn flat_tensors_mut<S: Scalar, P: Params<S, Tensor<S>>>(p: &mut P) -> Vec<&mut Tensor<S>> {
    let mut out = Vec::new();
    p.visit_mut("", &mut |_, r| match r {
        ParamMut::Weight(t) | ParamMut::Vector(t) => out.push(t),
    });
    out
}

/// Number of scalar entries across all arrays.
pub fn param_count<S: Scalar, P: Params<S, Tensor<S>>>(p: &P) -> usize {
    flat_tensors(p).iter().map(|t| t.numel()).sum()
}
