//! Dense tensors and the layer math used by the patch network.
//!
//! Everything here is shape-explicit and allocation-backed: a [`Tensor`] is a
//! row-major buffer plus its dimensions, with an optional gradient buffer of
//! the same shape. Feature maps use `[height, width, channels]` order,
//! convolution kernels `[kh, kw, cin, cout]`, fully-connected weights
//! `[din, dout]`.
//!
//! Training and inference run in `f32`; gradient verification runs the same
//! code in `f64`, where central finite differences are trustworthy.

pub mod gradcheck;
pub mod ops;

use crate::error::{Error, Result};

/// Element type the math is generic over. `f32` for training and inference,
/// `f64` for finite-difference verification.
pub trait Scalar:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// General matrix multiply `C = alpha * A * B + beta * C` with explicit
    /// row/column strides, so transposed views cost nothing.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn cast(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn as_f32(self) -> f32 {
        self.as_f64() as f32
    }
}

impl Scalar for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::sgemm(
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
                rsc,
                csc,
            );
        }
    }

    fn cast(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::dgemm(
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
                rsc,
                csc,
            );
        }
    }

    fn cast(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense N-dimensional array of real values with an optional gradient buffer.
///
/// Invariants: `product(dims) == data.len()`, and the gradient, when present,
/// has the same length as the data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() || dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "Tensor::new",
                format!("{} elements for dims {:?}", expected, dims),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor {
            dims,
            data,
            grad: None,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![T::zero(); len],
            grad: None,
        }
    }

    pub fn filled(dims: &[usize], value: T) -> Self {
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; len],
            grad: None,
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: (0..len).map(&mut f).collect(),
            grad: None,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Gradient buffer, if one has been materialized.
    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocating zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let len = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); len])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Accumulate `delta` into the gradient buffer.
    pub fn add_grad(&mut self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self.grad_mut();
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    /// Convert between precisions, dropping any gradient.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| U::cast(v.as_f64())).collect(),
            grad: None,
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    /// Element access for small tensors in tests and glue code.
    pub fn at(&self, idx: &[usize]) -> T {
        assert_eq!(idx.len(), self.dims.len());
        let mut flat = 0;
        for (i, &d) in idx.iter().zip(&self.dims) {
            debug_assert!(*i < d);
            flat = flat * d + i;
        }
        self.data[flat]
    }
}

/// One layer of the fixed architecture: a convolution, a fully-connected map,
/// or an activation. Stride is 1 and padding 0 throughout; the output-size
/// chain of the architecture admits nothing else.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        kernel_h: usize,
        kernel_w: usize,
        in_channels: usize,
        out_channels: usize,
    },
    FullyConnected {
        in_dim: usize,
        out_dim: usize,
    },
    Activation,
}

impl LayerSpec {
    /// Convolution spec. Kernel sizes are restricted to the two used by the
    /// architecture (5x5 and 4x4).
    pub fn conv(kernel: usize, in_channels: usize, out_channels: usize) -> Result<Self> {
        if kernel != 5 && kernel != 4 {
            return Err(Error::InvalidArgument(format!(
                "unsupported conv kernel {kernel}x{kernel}; the architecture uses 5x5 and 4x4"
            )));
        }
        Ok(LayerSpec::Conv {
            kernel_h: kernel,
            kernel_w: kernel,
            in_channels,
            out_channels,
        })
    }

    pub fn fully_connected(in_dim: usize, out_dim: usize) -> Self {
        LayerSpec::FullyConnected { in_dim, out_dim }
    }

    /// Spatial output size for a valid (no padding, stride 1) convolution.
    pub fn conv_output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        match self {
            LayerSpec::Conv {
                kernel_h, kernel_w, ..
            } => {
                if h < *kernel_h || w < *kernel_w {
                    None
                } else {
                    Some((h - kernel_h + 1, w - kernel_w + 1))
                }
            }
            _ => None,
        }
    }

    /// Number of learnable parameters (weights + biases).
    pub fn parameter_count(&self) -> usize {
        match self {
            LayerSpec::Conv {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
            } => kernel_h * kernel_w * in_channels * out_channels + out_channels,
            LayerSpec::FullyConnected { in_dim, out_dim } => in_dim * out_dim + out_dim,
            LayerSpec::Activation => 0,
        }
    }
}
