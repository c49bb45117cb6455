//! Differentiable building blocks composed from primitive tensor ops so that
//! every one of them has a backward pass in both f32 and f64.

use candle_core::{Result, Tensor, D};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.2;

/// 3×3 (or any odd) convolution with zero "same" padding, `x: (N, C, H, W)`.
pub fn conv2d_same(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, _, kh, _) = weight.dims4()?;
    let y = x.conv2d(weight, kh / 2, 1, 1, 1)?;
    y.broadcast_add(&bias.reshape((1, (), 1, 1))?)
}

/// `x: (.., in)`, `weight: (out, in)`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let inner = *dims.last().expect("rank >= 1");
    let rows = x.elem_count() / inner;
    let y = x
        .reshape((rows, inner))?
        .matmul(&weight.t()?)?
        .broadcast_add(bias)?;
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = weight.dim(0)?;
    y.reshape(out_dims)
}

/// Layer normalization over the last dimension.
pub fn layer_norm(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + LAYER_NORM_EPS)?.sqrt()?)?;
    normed.broadcast_mul(weight)?.broadcast_add(bias)
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let neg = x.neg()?.relu()?;
    pos - (neg * LEAKY_SLOPE)?
}

/// Logistic squashing written through `tanh`, exact 0.5 at 0 and free of
/// overflow in the backward pass.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    ((x * 0.5)?.tanh()? + 1.0)? * 0.5
}

/// Softmax over the last dimension; the row max is treated as a constant.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

/// `(N, C, H, W)` → `(N, H, W, C)`.
pub fn to_channels_last(x: &Tensor) -> Result<Tensor> {
    x.permute((0, 2, 3, 1))?.contiguous()
}

/// `(N, H, W, C)` → `(N, C, H, W)`.
pub fn to_channels_first(x: &Tensor) -> Result<Tensor> {
    x.permute((0, 3, 1, 2))?.contiguous()
}
