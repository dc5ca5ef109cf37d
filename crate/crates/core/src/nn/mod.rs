//! Minimal CPU neural-network toolkit: parameters, activations and the
//! handful of layers the embedding network and the segmenter are built from.
//!
//! Activations are stored channel-major across the batch (`C×B×H×W`), which
//! lets every convolution run as a single matrix product over the whole
//! batch and makes channel concatenation a plain buffer append.

mod adam;
mod conv;
mod init;
mod ops;

pub use adam::Adam;
pub use conv::{Conv2d, ConvCache};
pub use init::{he_uniform, fan_in_uniform};
pub use ops::{
    bilinear_resize, maxpool2, maxpool2_backward, relu_backward, relu_inplace, sigmoid,
    upsample_nearest2, upsample_nearest2_backward, MaxPoolCache,
};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point type the networks can be instantiated with.
///
/// Training runs in `f32`; gradient checks instantiate the same code in
/// `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Raw strided GEMM: `C = alpha * A * B + beta * C`.
    ///
    /// # Safety
    /// Strides and dimensions must address memory inside the given slices.
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

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
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
        unsafe { matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc) }
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
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
        unsafe { matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc) }
    }
}

/// Row-major `C[m×n] = alpha · op(A) · op(B) + beta · C`.
///
/// `A` is stored `m×k` (or `k×m` when `trans_a`), `B` is stored `k×n` (or
/// `n×k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Real>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: F,
    a: &[F],
    b: &[F],
    beta: F,
    c: &mut [F],
) {
    assert!(a.len() >= m * k, "gemm: A too small");
    assert!(b.len() >= k * n, "gemm: B too small");
    assert!(c.len() >= m * n, "gemm: C too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every addressed element lies inside
    // the slices for the stride patterns chosen here.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// A trainable tensor together with its gradient and Adam moments.
#[derive(Clone, Debug)]
pub struct Param<F> {
    pub shape: Vec<usize>,
    pub value: Vec<F>,
    pub grad: Vec<F>,
    pub m: Vec<F>,
    pub v: Vec<F>,
}

impl<F: Real> Param<F> {
    pub fn new(shape: Vec<usize>, value: Vec<F>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, value.len(), "parameter shape/value mismatch");
        Self {
            shape,
            grad: vec![F::zero(); n],
            m: vec![F::zero(); n],
            v: vec![F::zero(); n],
            value,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![F::zero(); n])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = F::zero());
    }

    pub fn reset_moments(&mut self) {
        self.m.iter_mut().for_each(|x| *x = F::zero());
        self.v.iter_mut().for_each(|x| *x = F::zero());
    }

    /// Converts to another float type; moments are carried over.
    pub fn cast<G: Real>(&self) -> Param<G> {
        let conv = |xs: &[F]| xs.iter().map(|x| G::lit(x.as_f64())).collect::<Vec<G>>();
        Param {
            shape: self.shape.clone(),
            value: conv(&self.value),
            grad: conv(&self.grad),
            m: conv(&self.m),
            v: conv(&self.v),
        }
    }
}

/// Batched activation in `C×B×H×W` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<F> {
    pub c: usize,
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<F>,
}

impl<F: Real> FeatureMap<F> {
    pub fn zeros(c: usize, b: usize, h: usize, w: usize) -> Self {
        Self { c, b, h, w, data: vec![F::zero(); c * b * h * w] }
    }

    pub fn from_vec(c: usize, b: usize, h: usize, w: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), c * b * h * w, "feature map size mismatch");
        Self { c, b, h, w, data }
    }

    #[inline]
    pub fn idx(&self, c: usize, b: usize, y: usize, x: usize) -> usize {
        ((c * self.b + b) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn get(&self, c: usize, b: usize, y: usize, x: usize) -> F {
        self.data[self.idx(c, b, y, x)]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Packs per-sample `C×H×W` images into one batch.
    pub fn from_samples(c: usize, h: usize, w: usize, samples: &[&[F]]) -> Self {
        let b = samples.len();
        let mut out = Self::zeros(c, b, h, w);
        let hw = h * w;
        for (bi, s) in samples.iter().enumerate() {
            assert_eq!(s.len(), c * hw, "sample size mismatch");
            for ci in 0..c {
                let dst = (ci * b + bi) * hw;
                out.data[dst..dst + hw].copy_from_slice(&s[ci * hw..(ci + 1) * hw]);
            }
        }
        out
    }

    /// Extracts sample `bi` as a `C×H×W` buffer.
    pub fn sample(&self, bi: usize) -> Vec<F> {
        let hw = self.plane();
        let mut out = Vec::with_capacity(self.c * hw);
        for ci in 0..self.c {
            let src = (ci * self.b + bi) * hw;
            out.extend_from_slice(&self.data[src..src + hw]);
        }
        out
    }

    /// Channel concatenation: `[self; other]`.
    pub fn concat_channels(&self, other: &Self) -> Self {
        assert_eq!((self.b, self.h, self.w), (other.b, other.h, other.w));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Self { c: self.c + other.c, b: self.b, h: self.h, w: self.w, data }
    }

    /// Inverse of [`concat_channels`](Self::concat_channels).
    pub fn split_channels(self, first: usize) -> (Self, Self) {
        assert!(first <= self.c);
        let cut = first * self.b * self.plane();
        let mut data = self.data;
        let rest = data.split_off(cut);
        (
            Self { c: first, b: self.b, h: self.h, w: self.w, data },
            Self { c: self.c - first, b: self.b, h: self.h, w: self.w, data: rest },
        )
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.data.len(), other.data.len());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += *b);
    }
}

/// Visitor over named parameters, used by checkpointing and the optimizer.
pub trait Parameterized<F: Real> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param<F>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<F>));

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.len());
        n
    }
}
