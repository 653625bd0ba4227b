//! Dense row-major tensors and a tape-based reverse-mode differentiation engine.
//!
//! Values live in [`Tensor`]. Differentiable computation is recorded on a
//! [`Graph`] through [`Var`] handles; trainable state lives in [`ParamSet`]s,
//! which are bound into a graph once per step and receive gradients after
//! [`Graph::backward`].

mod checkpoint;
mod graph;
pub(crate) mod kernels;
mod norm;
mod param;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, CheckpointEntry, CHECKPOINT_MAGIC};
pub use graph::{Gradients, Graph, Var};
pub use kernels::{conv_out_dim, conv_transpose_out_dim, ResizeMode};
pub use norm::{batch_masked_frobenius, masked_frobenius, NormScaling};
pub use param::{BoundParams, ParamSet};

/// Floating-point element type usable by every kernel.
///
/// Training runs in `f32`; `f64` exists so finite-difference checks can be
/// evaluated without rounding noise.
pub trait Element:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    /// `c = alpha * a·b + beta * c` for row/column strided operands.
    ///
    /// # Safety
    /// Strides and dimensions must describe memory that lies inside the
    /// backing slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("float conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("float conversion")
    }
}

impl Element for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Element for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense n-dimensional array in row-major order.
///
/// `grad` is only populated for tensors held by a [`ParamSet`]; intermediate
/// values produced by a [`Graph`] never carry one.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
    grad: Option<Vec<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("tensor", format!("zero-sized axis in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: E) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: E) -> Self {
        Self::full(vec![1], value)
    }

    /// Samples i.i.d. `N(0, std²)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                E::from_f64_lossy(z * std)
            })
            .collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Samples i.i.d. `U(lo, hi)` entries.
    pub fn uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| E::from_f64_lossy(rng.gen_range(lo..hi))).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dims(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn item(&self) -> E {
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Converts to another element type, dropping gradient state.
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| F::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Copies the `index`-th slice along axis 0 as a tensor with a leading axis of 1.
    pub fn select(&self, index: usize) -> Tensor<E> {
        let per = self.numel() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor {
            shape,
            data: self.data[index * per..(index + 1) * per].to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Concatenates tensors along axis 0; trailing axes must agree.
    pub fn stack(parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut lead = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::dim(
                    "stack",
                    format!("trailing axes {:?} vs {:?}", &p.shape[1..], tail),
                ));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        Tensor::new(shape, data)
    }

    pub fn max_abs(&self) -> E {
        self.data.iter().fold(E::zero(), |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = E::zero()),
            None => self.grad = Some(vec![E::zero(); self.data.len()]),
        }
    }

    pub(crate) fn accumulate_grad(&mut self, delta: &[E]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self
            .grad
            .get_or_insert_with(|| vec![E::zero(); self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<E>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }
}
