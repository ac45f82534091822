//! Sign quantization, the piecewise-quadratic straight-through estimator,
//! per-output-channel weight scaling and the XNOR-popcount kernels.

mod conv;
mod packed;

pub use conv::{
    binary_conv2d, binary_conv2d_accumulators, binary_deconv2d, binary_deconv2d_accumulators,
    binary_linear, Accumulators,
};
#[doc(hidden)]
pub use packed::xnor_popcount_dot_unmasked;
pub use packed::{pack_signs, xnor_popcount_dot, PackedBits, PackedRow};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// `+1` for `v >= 0`, `-1` otherwise. Zero maps to `+1`.
#[inline]
pub fn sign<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one()
    } else {
        -T::one()
    }
}

pub fn sign_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sign)
}

/// Piecewise-quadratic surrogate of `sign` used for the backward pass:
/// saturates at `±1` outside `[-1, 1]`, `-v^2 + 2v` on `[0, 1)` and
/// `v^2 + 2v` on `[-1, 0)`.
#[inline]
pub fn smooth_sign<T: Real>(v: T) -> T {
    let two = T::from_f64(2.0);
    if v >= T::one() {
        T::one()
    } else if v >= T::zero() {
        -v * v + two * v
    } else if v >= -T::one() {
        v * v + two * v
    } else {
        -T::one()
    }
}

/// Derivative of [`smooth_sign`]: `2 - 2v` on `[0, 1)`, `2 + 2v` on `[-1, 0)`,
/// zero wherever `|v| >= 1`.
#[inline]
pub fn ste_grad_scalar<T: Real>(v: T) -> T {
    let two = T::from_f64(2.0);
    if v >= T::one() || v < -T::one() {
        T::zero()
    } else if v >= T::zero() {
        two - two * v
    } else if v > -T::one() {
        two + two * v
    } else {
        // v == -1: the quadratic branch's derivative is 0 there as well.
        T::zero()
    }
}

pub fn ste_grad<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(ste_grad_scalar)
}

/// Latent full-precision weights of a binarized convolution (or linear layer,
/// with `K = 1`) and their per-output-channel scales.
///
/// `latent_weights` is `C_out x C_in x K x K`. While training, `alpha` is
/// recomputed from the latent weights on every forward; after [`finalize`]
/// the stored values are used as-is.
///
/// [`finalize`]: BinaryConv2dParams::finalize
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryConv2dParams<T: Real = f32> {
    pub latent_weights: Tensor<T>,
    pub alpha: Vec<T>,
    pub stride: usize,
    pub padding: usize,
    frozen: bool,
}

impl<T: Real> BinaryConv2dParams<T> {
    pub fn new(latent_weights: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        let s = latent_weights.shape();
        if s.height != s.width {
            return Err(Error::dim(
                "binary_conv2d",
                format!("kernel must be square, got {s}"),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("binary_conv2d", "stride must be >= 1"));
        }
        let alpha = channel_scales(&latent_weights);
        Ok(BinaryConv2dParams {
            latent_weights,
            alpha,
            stride,
            padding,
            frozen: false,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.latent_weights.shape().batch
    }

    pub fn in_channels(&self) -> usize {
        self.latent_weights.shape().channels
    }

    pub fn kernel(&self) -> usize {
        self.latent_weights.shape().height
    }

    pub fn refresh_alpha(&mut self) {
        self.alpha = channel_scales(&self.latent_weights);
    }

    /// Refreshes `alpha` one last time and stops recomputing it on forward.
    pub fn finalize(&mut self) {
        self.refresh_alpha();
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Scales used by the next forward pass.
    pub fn scales(&self) -> Vec<T> {
        if self.frozen {
            self.alpha.clone()
        } else {
            channel_scales(&self.latent_weights)
        }
    }

    /// `alpha[i] * Sign(w[i])` without touching the stored scales.
    pub fn binarized_weights(&self) -> Tensor<T> {
        scaled_signs(&self.latent_weights, &self.scales())
    }
}

/// `alpha[i] = ||w_i||_1 / (C_in * K * K)` for every output channel `i`.
pub fn channel_scales<T: Real>(weights: &Tensor<T>) -> Vec<T> {
    let s = weights.shape();
    let fan_in = T::from_usize(s.sample_len());
    (0..s.batch)
        .map(|o| weights.sample(o).iter().map(|v| v.abs()).sum::<T>() / fan_in)
        .collect()
}

pub(crate) fn scaled_signs<T: Real>(weights: &Tensor<T>, alpha: &[T]) -> Tensor<T> {
    let len = weights.shape().sample_len();
    let mut out = weights.map(sign);
    for (o, chunk) in out.data_mut().chunks_mut(len).enumerate() {
        chunk.iter_mut().for_each(|v| *v *= alpha[o]);
    }
    out
}

/// Refreshes `p.alpha` and returns `alpha[i] * Sign(w[i])`.
pub fn binarize_weights<T: Real>(p: &mut BinaryConv2dParams<T>) -> Tensor<T> {
    p.refresh_alpha();
    scaled_signs(&p.latent_weights, &p.alpha)
}

pub(crate) fn weight_shape(out_channels: usize, in_channels: usize, kernel: usize) -> Shape {
    Shape::new(out_channels, in_channels, kernel, kernel)
}
