//! Small neural-network toolkit with explicit forward/backward passes.
//!
//! Layers are generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks. Forward
//! passes return a cache; the matching backward pass consumes it, adds
//! parameter gradients into [`Param::grad`] (unless the parameter is frozen)
//! and returns the gradient with respect to the input.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, IxDyn, Ix1, Ix2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

use crate::rng::{self, Rng};

pub mod adam;
pub mod conv;
pub mod linear;
pub mod lstm;
pub mod ops;

pub use adam::{Adam, AdamConfig};
pub use conv::{AvgPool, Conv2d, MaxPool2};
pub use linear::{Embedding, Linear, Mlp2};
pub use lstm::Lstm;

/// Floating-point element type of every tensor in the crate.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Name written into checkpoint manifests.
    const DTYPE: &'static str;
    const BYTES: usize;

    fn put_le(self, out: &mut Vec<u8>);
    fn get_le(bytes: &[u8]) -> Self;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// A trainable array with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
    /// Frozen parameters receive no gradient and no optimizer updates.
    pub frozen: bool,
}

impl<F: Real> Param<F> {
    pub fn new(value: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            value,
            grad,
            frozen: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    /// Uniform in `[-bound, bound)`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Self {
        Self::new(ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            F::lit(rng::uniform(rng, -bound, bound))
        }))
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn mat(&self) -> ArrayView2<'_, F> {
        self.value.view().into_dimensionality::<Ix2>().expect("2-d parameter")
    }

    pub fn vec(&self) -> ArrayView1<'_, F> {
        self.value.view().into_dimensionality::<Ix1>().expect("1-d parameter")
    }

    pub fn mat_mut(&mut self) -> ArrayViewMut2<'_, F> {
        self.value.view_mut().into_dimensionality::<Ix2>().expect("2-d parameter")
    }

    pub fn grad_mat(&mut self) -> ArrayViewMut2<'_, F> {
        self.grad.view_mut().into_dimensionality::<Ix2>().expect("2-d parameter")
    }

    pub fn grad_vec(&mut self) -> ArrayViewMut1<'_, F> {
        self.grad.view_mut().into_dimensionality::<Ix1>().expect("1-d parameter")
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }
}

/// Anything holding named parameters.
pub trait Module<F: Real> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>));
}

/// `prefix.name`, or just `name` for an empty prefix.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn named_params<F: Real>(m: &impl Module<F>, prefix: &str) -> Vec<(String, Param<F>)> {
    let mut out = Vec::new();
    m.visit_params(prefix, &mut |n, p| out.push((n, p.clone())));
    out
}

pub fn zero_grads<F: Real>(m: &mut impl Module<F>) {
    m.visit_params_mut("", &mut |_, p| p.zero_grad());
}

pub fn set_frozen<F: Real>(m: &mut impl Module<F>, frozen: bool) {
    m.visit_params_mut("", &mut |_, p| p.frozen = frozen);
}

pub fn param_count<F: Real>(m: &impl Module<F>) -> usize {
    let mut n = 0;
    m.visit_params("", &mut |_, p| n += p.len());
    n
}

/// Raw little-endian bytes of every parameter, in visiting order.
pub fn param_bytes<F: Real>(m: &impl Module<F>) -> Vec<u8> {
    let mut out = Vec::new();
    m.visit_params("", &mut |_, p| {
        for &v in p.value.iter() {
            v.put_le(&mut out);
        }
    });
    out
}

impl<F: Real, M: Module<F>> Module<F> for Option<M> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        if let Some(m) = self {
            m.visit_params(prefix, f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        if let Some(m) = self {
            m.visit_params_mut(prefix, f);
        }
    }
}
