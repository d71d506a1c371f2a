//! Forward and backward passes for every layer the network uses.
//!
//! Convolutions are valid (no padding, stride 1) cross-correlations computed
//! as im2col + GEMM. With the `[h, w, c]` activation layout, each kernel row
//! of a receptive field is a contiguous run of `kw * c` elements, so im2col
//! is `kh` memcpys per output position and the GEMM does the heavy lifting.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Gradients of a convolution with respect to its three inputs.
pub struct ConvGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of a fully-connected layer with respect to its three inputs.
pub struct FcGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

fn conv_dims<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    if input.rank() != 3 {
        return Err(Error::shape(op, "rank-3 input [h,w,c]", format!("{:?}", input.dims())));
    }
    if weights.rank() != 4 {
        return Err(Error::shape(
            op,
            "rank-4 weights [kh,kw,cin,cout]",
            format!("{:?}", weights.dims()),
        ));
    }
    let (h, w, cin) = (input.dims()[0], input.dims()[1], input.dims()[2]);
    let (kh, kw, wcin, cout) = (
        weights.dims()[0],
        weights.dims()[1],
        weights.dims()[2],
        weights.dims()[3],
    );
    if wcin != cin {
        return Err(Error::shape(
            op,
            format!("kernel input channels {cin}"),
            format!("{wcin}"),
        ));
    }
    if bias.dims() != [cout] {
        return Err(Error::shape(op, format!("bias [{cout}]"), format!("{:?}", bias.dims())));
    }
    if h < kh || w < kw {
        return Err(Error::shape(
            op,
            format!("input at least {kh}x{kw}"),
            format!("{h}x{w}"),
        ));
    }
    Ok((h, w, cin, kh, kw, cout, h - kh + 1, w - kw + 1))
}

/// Unrolled receptive fields: one row of `kh*kw*c` per output position.
fn im2col<T: Scalar>(
    input: &[T],
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let row_len = kh * kw * c;
    let mut col = vec![T::zero(); oh * ow * row_len];
    let run = kw * c;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * row_len;
            for ky in 0..kh {
                let src = ((oy + ky) * w + ox) * c;
                let dst = row + ky * run;
                col[dst..dst + run].copy_from_slice(&input[src..src + run]);
            }
        }
    }
    col
}

/// Scatter-add of column gradients back to input positions (adjoint of im2col).
fn col2im<T: Scalar>(
    col: &[T],
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    input_grad: &mut [T],
) {
    let row_len = kh * kw * c;
    let run = kw * c;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * row_len;
            for ky in 0..kh {
                let dst = ((oy + ky) * w + ox) * c;
                let src = row + ky * run;
                for i in 0..run {
                    input_grad[dst + i] += col[src + i];
                }
            }
        }
    }
}

/// Valid cross-correlation of `input [h,w,cin]` with `weights [kh,kw,cin,cout]`
/// plus `bias [cout]`; output is `[h-kh+1, w-kw+1, cout]`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (_h, w, cin, kh, kw, cout, oh, ow) = conv_dims("conv2d_forward", input, weights, bias)?;
    let k = kh * kw * cin;
    let col = im2col(input.data(), w, cin, kh, kw, oh, ow);
    let mut out = Tensor::zeros(&[oh, ow, cout]);
    // [oh*ow, k] x [k, cout]
    T::gemm(
        oh * ow,
        k,
        cout,
        T::one(),
        &col,
        k as isize,
        1,
        weights.data(),
        cout as isize,
        1,
        T::zero(),
        out.data_mut(),
        cout as isize,
        1,
    );
    let b = bias.data();
    for row in out.data_mut().chunks_exact_mut(cout) {
        for (v, &bv) in row.iter_mut().zip(b) {
            *v += bv;
        }
    }
    Ok(out)
}

/// Analytic gradients of [`conv2d_forward`] given the upstream gradient and
/// the cached forward inputs.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let cout = weights.dims()[3];
    let bias = Tensor::zeros(&[cout]);
    let (_h, w, cin, kh, kw, cout, oh, ow) = conv_dims("conv2d_backward", input, weights, &bias)?;
    if grad_out.dims() != [oh, ow, cout] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("[{oh}, {ow}, {cout}]"),
            format!("{:?}", grad_out.dims()),
        ));
    }
    let k = kh * kw * cin;
    let positions = oh * ow;
    let col = im2col(input.data(), w, cin, kh, kw, oh, ow);

    let mut grad_bias = Tensor::zeros(&[cout]);
    {
        let gb = grad_bias.data_mut();
        for row in grad_out.data().chunks_exact(cout) {
            for (g, &v) in gb.iter_mut().zip(row) {
                *g += v;
            }
        }
    }

    // dW [k, cout] = col^T [k, positions] x gradOut [positions, cout]
    let mut grad_weights = Tensor::zeros(weights.dims());
    T::gemm(
        k,
        positions,
        cout,
        T::one(),
        &col,
        1,
        k as isize,
        grad_out.data(),
        cout as isize,
        1,
        T::zero(),
        grad_weights.data_mut(),
        cout as isize,
        1,
    );

    // dCol [positions, k] = gradOut [positions, cout] x W^T [cout, k]
    let mut grad_col = vec![T::zero(); positions * k];
    T::gemm(
        positions,
        cout,
        k,
        T::one(),
        grad_out.data(),
        cout as isize,
        1,
        weights.data(),
        1,
        cout as isize,
        T::zero(),
        &mut grad_col,
        k as isize,
        1,
    );
    let mut grad_input = Tensor::zeros(input.dims());
    col2im(&grad_col, w, cin, kh, kw, oh, ow, grad_input.data_mut());

    Ok(ConvGrads {
        input: grad_input,
        weights: grad_weights,
        bias: grad_bias,
    })
}

/// Affine map of a row vector: `[1, din] x [din, dout] + [dout]`.
pub fn fully_connected_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (din, dout) = fc_dims("fully_connected_forward", input, weights, bias)?;
    let mut out = Tensor::zeros(&[1, dout]);
    {
        let o = out.data_mut();
        o.copy_from_slice(bias.data());
        let x = input.data();
        let wd = weights.data();
        for i in 0..din {
            let xi = x[i];
            let row = &wd[i * dout..(i + 1) * dout];
            for (ov, &wv) in o.iter_mut().zip(row) {
                *ov += xi * wv;
            }
        }
    }
    Ok(out)
}

/// Analytic gradients of [`fully_connected_forward`].
pub fn fully_connected_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<FcGrads<T>> {
    let bias = Tensor::zeros(&[weights.dims()[1]]);
    let (din, dout) = fc_dims("fully_connected_backward", input, weights, &bias)?;
    if grad_out.len() != dout {
        return Err(Error::shape(
            "fully_connected_backward",
            format!("[1, {dout}]"),
            format!("{:?}", grad_out.dims()),
        ));
    }
    let g = grad_out.data();
    let x = input.data();
    let wd = weights.data();

    let mut grad_input = Tensor::zeros(input.dims());
    let mut grad_weights = Tensor::zeros(weights.dims());
    {
        let gi = grad_input.data_mut();
        let gw = grad_weights.data_mut();
        for i in 0..din {
            let row = &wd[i * dout..(i + 1) * dout];
            let grow = &mut gw[i * dout..(i + 1) * dout];
            let mut acc = T::zero();
            let xi = x[i];
            for j in 0..dout {
                acc += g[j] * row[j];
                grow[j] = xi * g[j];
            }
            gi[i] = acc;
        }
    }
    let mut grad_bias = Tensor::zeros(&[dout]);
    grad_bias.data_mut().copy_from_slice(g);

    Ok(FcGrads {
        input: grad_input,
        weights: grad_weights,
        bias: grad_bias,
    })
}

fn fc_dims<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize)> {
    if weights.rank() != 2 {
        return Err(Error::shape(op, "rank-2 weights [din,dout]", format!("{:?}", weights.dims())));
    }
    let (din, dout) = (weights.dims()[0], weights.dims()[1]);
    if input.len() != din {
        return Err(Error::shape(op, format!("input of {din} values"), format!("{}", input.len())));
    }
    if bias.len() != dout {
        return Err(Error::shape(op, format!("bias [{dout}]"), format!("{:?}", bias.dims())));
    }
    Ok((din, dout))
}

/// Elementwise `max(x, 0)`.
pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes the upstream gradient where the pre-activation was positive.
/// The subgradient at exactly zero is taken as zero.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, preact: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.dims() != preact.dims() {
        return Err(Error::shape(
            "relu_backward",
            format!("{:?}", preact.dims()),
            format!("{:?}", grad_out.dims()),
        ));
    }
    let mut out = Tensor::zeros(preact.dims());
    for ((o, &g), &x) in out
        .data_mut()
        .iter_mut()
        .zip(grad_out.data())
        .zip(preact.data())
    {
        if x > T::zero() {
            *o = g;
        }
    }
    Ok(out)
}

/// Numerically stabilized softmax over a flat logit vector.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().cloned().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().cloned().sum();
    exps.into_iter().map(|v| v / sum).collect()
}

/// Two-class cross-entropy on raw logits. Returns the loss and its gradient
/// with respect to the logits (`softmax - onehot`).
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    target: usize,
) -> Result<(T, Tensor<T>)> {
    if logits.len() != 2 {
        return Err(Error::shape(
            "softmax_cross_entropy",
            "[1, 2] logits",
            format!("{:?}", logits.dims()),
        ));
    }
    if target > 1 {
        return Err(Error::InvalidArgument(format!(
            "class index must be 0 or 1, got {target}"
        )));
    }
    let probs = softmax(logits.data());
    // log(p_target) computed from shifted logits, not from the ratio, so the
    // confident case stays finite.
    let max = logits.data().iter().cloned().fold(T::neg_infinity(), T::max);
    let log_sum = logits
        .data()
        .iter()
        .map(|&v| (v - max).exp())
        .sum::<T>()
        .ln();
    let loss = -(logits.data()[target] - max - log_sum);
    let mut grad = Tensor::zeros(logits.dims());
    for (i, (g, &p)) in grad.data_mut().iter_mut().zip(&probs).enumerate() {
        *g = if i == target { p - T::one() } else { p };
    }
    Ok((loss, grad))
}
