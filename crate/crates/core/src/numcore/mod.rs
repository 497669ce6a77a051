//! Minimal differentiable-computation substrate.
//!
//! Dense row-major tensors, a dynamically recorded op graph with reverse-mode
//! gradients, an adaptive-moment optimizer and a finite-difference checker.
//! Everything is generic over [`Real`] so the checker can evaluate the same
//! graph code in double precision; production training runs in `f32`.

mod graph;
mod kernels;
mod optim;
mod param;
mod tensor;

pub mod gradcheck;

pub use graph::{Gradients, Graph, Var};
pub use optim::{LrMap, OptimKind, Optimizer};
pub use param::{ParamSet, Parameter};
pub use tensor::Tensor;

use std::fmt::Debug;

use num_traits::Float;

/// Errors raised by tensor construction, graph recording and optimization.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("node {node} reads node {input}, which is not recorded before it")]
    Cycle { node: usize, input: usize },
    #[error("variable belongs to a different graph")]
    ForeignVar,
    #[error("parameter `{0}` already exists in the set")]
    DuplicateParam(String),
    #[error("no parameter named `{0}`")]
    UnknownParam(String),
    #[error("no learning rate prefix matches parameter `{0}`")]
    UnmatchedLr(String),
    #[error("loss is not finite: {0}")]
    NonFinite(f64),
}

pub type Result<T, E = NumError> = std::result::Result<T, E>;

/// Floating-point element type usable by the graph.
pub trait Real:
    Float + Default + Debug + Send + Sync + std::ops::AddAssign + 'static
{
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
    fn as_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;

    /// `c = a @ b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// The strides must describe in-bounds views of `a` (m×k), `b` (k×n) and `c` (m×n).
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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

    /// Hyperbolic tangent; `f32` swaps libm for a rational approximation
    /// accurate to a few ulp that the compiler can vectorize.
    #[inline]
    fn tanh_fast(self) -> Self {
        self.tanh()
    }
}

impl Real for f32 {
    #[inline]
    fn tanh_fast(self) -> Self {
        // odd minimax rational approximation, saturating beyond |x| ~ 7.9
        let x = self.max(-7.905_311).min(7.905_311);
        let x2 = x * x;
        let mut p = -2.760_768_5e-16f32;
        p = p * x2 + 2.000_188e-13;
        p = p * x2 + -8.604_672e-11;
        p = p * x2 + 5.122_297e-8;
        p = p * x2 + 1.485_722_4e-5;
        p = p * x2 + 6.372_619_3e-4;
        p = p * x2 + 4.893_524_6e-3;
        let mut q = 1.198_258_4e-6f32;
        q = q * x2 + 1.185_347e-4;
        q = q * x2 + 2.268_434_6e-3;
        q = q * x2 + 4.893_525e-3;
        let r = x * p / q;
        // select form so the loop vectorizes; NaN takes the first arm
        if !(self.abs() >= 4e-4) {
            self
        } else {
            r
        }
    }

    #[inline]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline]
    fn to_f32(self) -> f32 {
        self
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    #[inline]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn to_f32(self) -> f32 {
        self as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

#[cfg(test)]
mod real_tests {
    use super::Real;

    #[test]
    fn fast_tanh_tracks_libm() {
        let mut worst = 0.0f32;
        for i in -20_000..=20_000 {
            let x = i as f32 * 5e-4;
            worst = worst.max((x.tanh_fast() - x.tanh()).abs());
        }
        assert!(worst < 5e-7, "{worst}");
        for x in [30.0f32, -30.0, 1e6] {
            let y = x.tanh_fast();
            assert!(y.abs() <= 1.0 && 1.0 - y.abs() < 2e-7);
        }
    }
}
