//! Full-precision reference operations.
//!
//! These are the float oracles every binarized kernel is measured against, and
//! the forward rules the autograd tape records. Convolution is cross-correlation
//! without bias.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// `floor((extent + 2*padding - kernel) / stride) + 1`, or `None` when the
/// kernel does not fit.
pub fn conv_out_extent(
    extent: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    let padded = extent + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution: `(extent - 1)*stride - 2*padding + kernel`.
pub fn deconv_out_extent(
    extent: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    let full = (extent - 1) * stride + kernel;
    if stride == 0 || kernel == 0 || full <= 2 * padding {
        return None;
    }
    Some(full - 2 * padding)
}

/// Geometry shared by the float and binarized convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub input: Shape,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(input: Shape, weights: Shape, stride: usize, padding: usize) -> Result<Self> {
        if weights.channels != input.channels {
            return Err(Error::mismatch("conv2d", input, weights));
        }
        if weights.height != weights.width {
            return Err(Error::dim(
                "conv2d",
                format!("kernel must be square, got {weights}"),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be >= 1"));
        }
        let k = weights.height;
        let (oh, ow) = match (
            conv_out_extent(input.height, k, stride, padding),
            conv_out_extent(input.width, k, stride, padding),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => return Err(Error::mismatch("conv2d", input, weights)),
        };
        Ok(ConvGeometry {
            input,
            out_channels: weights.batch,
            kernel: k,
            stride,
            padding,
            out_height: oh,
            out_width: ow,
        })
    }

    pub fn output_shape(&self) -> Shape {
        Shape::new(
            self.input.batch,
            self.out_channels,
            self.out_height,
            self.out_width,
        )
    }

    /// Length of one im2col row: `C_in * K * K`.
    pub fn patch_len(&self) -> usize {
        self.input.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Input coordinate sampled by output `(oy, ox)` at kernel tap `(ky, kx)`,
    /// or `None` when it falls in the padding.
    #[inline]
    pub fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        let x = (ox * self.stride + kx) as isize - self.padding as isize;
        if y < 0 || x < 0 || y as usize >= self.input.height || x as usize >= self.input.width {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

/// im2col for sample `n`: a `positions x patch_len` row-major matrix. Padding
/// cells take `pad_value`.
pub fn im2col<T: Real>(input: &Tensor<T>, geo: &ConvGeometry, n: usize, pad_value: T) -> Vec<T> {
    let k = geo.kernel;
    let plen = geo.patch_len();
    let mut cols = vec![pad_value; geo.positions() * plen];
    for oy in 0..geo.out_height {
        for ox in 0..geo.out_width {
            let row = &mut cols[(oy * geo.out_width + ox) * plen..][..plen];
            for c in 0..geo.input.channels {
                for ky in 0..k {
                    for kx in 0..k {
                        if let Some((y, x)) = geo.source(oy, ox, ky, kx) {
                            row[(c * k + ky) * k + kx] = input.at(n, c, y, x);
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of an im2col-shaped gradient back onto the (unpadded) input.
pub(crate) fn col2im_accumulate<T: Real>(
    dcols: &[T],
    geo: &ConvGeometry,
    n: usize,
    dinput: &mut Tensor<T>,
) {
    let k = geo.kernel;
    let plen = geo.patch_len();
    for oy in 0..geo.out_height {
        for ox in 0..geo.out_width {
            let row = &dcols[(oy * geo.out_width + ox) * plen..][..plen];
            for c in 0..geo.input.channels {
                for ky in 0..k {
                    for kx in 0..k {
                        if let Some((y, x)) = geo.source(oy, ox, ky, kx) {
                            *dinput.at_mut(n, c, y, x) += row[(c * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Float cross-correlation. `weights` is `C_out x C_in x K x K`.
pub fn conv2d_reference<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    conv2d_padded(input, weights, stride, padding, T::zero())
}

/// Cross-correlation where padding cells hold `pad_value` instead of zero.
/// The binarized path uses `pad_value = 1` because `Sign(0) = +1`.
pub fn conv2d_padded<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
    padding: usize,
    pad_value: T,
) -> Result<Tensor<T>> {
    let geo = ConvGeometry::new(input.shape(), weights.shape(), stride, padding)?;
    let out_shape = geo.output_shape();
    let plen = geo.patch_len();
    let positions = geo.positions();
    let mut out = Tensor::zeros(out_shape);
    for n in 0..input.shape().batch {
        let cols = im2col(input, &geo, n, pad_value);
        for o in 0..geo.out_channels {
            let w = &weights.data()[o * plen..(o + 1) * plen];
            let base = out_shape.index(n, o, 0, 0);
            let dst = &mut out.data_mut()[base..base + positions];
            for (p, d) in dst.iter_mut().enumerate() {
                *d = dot(&cols[p * plen..(p + 1) * plen], w);
            }
        }
    }
    Ok(out)
}

/// Float transposed convolution. `weights` is `C_out x C_in x K x K` (output
/// channel first, like the forward convolution), and input pixel `(y, x)`
/// scatters into output `(y*stride - padding + ky, x*stride - padding + kx)`.
pub fn conv_transpose2d_reference<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (is, ws) = (input.shape(), weights.shape());
    if ws.channels != is.channels || ws.height != ws.width {
        return Err(Error::mismatch("conv_transpose2d", is, ws));
    }
    let k = ws.height;
    let (oh, ow) = match (
        deconv_out_extent(is.height, k, stride, padding),
        deconv_out_extent(is.width, k, stride, padding),
    ) {
        (Some(h), Some(w)) => (h, w),
        _ => return Err(Error::mismatch("conv_transpose2d", is, ws)),
    };
    let mut out = Tensor::zeros(Shape::new(is.batch, ws.batch, oh, ow));
    for n in 0..is.batch {
        for o in 0..ws.batch {
            for i in 0..is.channels {
                for y in 0..is.height {
                    for x in 0..is.width {
                        let v = input.at(n, i, y, x);
                        for ky in 0..k {
                            let ty = (y * stride + ky) as isize - padding as isize;
                            if ty < 0 || ty as usize >= oh {
                                continue;
                            }
                            for kx in 0..k {
                                let tx = (x * stride + kx) as isize - padding as isize;
                                if tx < 0 || tx as usize >= ow {
                                    continue;
                                }
                                *out.at_mut(n, o, ty as usize, tx as usize) +=
                                    v * weights.at(o, i, ky, kx);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2d<T: Real>(input: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if window == 0 || stride == 0 {
        return Err(Error::dim("avg_pool2d", "window and stride must be >= 1"));
    }
    if window > s.height || window > s.width {
        return Err(Error::dim(
            "avg_pool2d",
            format!("window {window} larger than spatial extent of {s}"),
        ));
    }
    let oh = (s.height - window) / stride + 1;
    let ow = (s.width - window) / stride + 1;
    let inv = T::one() / T::from_usize(window * window);
    let out = Tensor::from_fn(Shape::new(s.batch, s.channels, oh, ow), |n, c, oy, ox| {
        let mut acc = T::zero();
        for dy in 0..window {
            for dx in 0..window {
                acc += input.at(n, c, oy * stride + dy, ox * stride + dx);
            }
        }
        acc * inv
    });
    Ok(out)
}

/// Mean over each `h x w` plane; output is `n x c x 1 x 1`.
pub fn global_avg_pool<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let inv = T::one() / T::from_usize(s.plane());
    let data = (0..s.batch * s.channels)
        .map(|i| {
            input.data()[i * s.plane()..(i + 1) * s.plane()]
                .iter()
                .copied()
                .sum::<T>()
                * inv
        })
        .collect();
    Tensor::from_vec(Shape::vector(s.batch, s.channels), data).expect("shape by construction")
}

pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    concat_many(&[a, b])
}

/// Channel concatenation of any number of tensors, in order.
pub fn concat_many<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat_channels", "no inputs"))?
        .shape();
    for p in &parts[1..] {
        let s = p.shape();
        if s.batch != first.batch || s.height != first.height || s.width != first.width {
            return Err(Error::mismatch("concat_channels", first, s));
        }
    }
    let channels = parts.iter().map(|p| p.shape().channels).sum();
    let out_shape = first.with_channels(channels);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..first.batch {
        for p in parts {
            data.extend_from_slice(p.sample(n));
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Channels `[start, start + len)` of `x`.
pub fn slice_channels<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if len == 0 || start + len > s.channels {
        return Err(Error::dim(
            "slice_channels",
            format!("range {start}..{} out of bounds for {s}", start + len),
        ));
    }
    let out_shape = s.with_channels(len);
    let plane = s.plane();
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..s.batch {
        let sample = x.sample(n);
        data.extend_from_slice(&sample[start * plane..(start + len) * plane]);
    }
    Tensor::from_vec(out_shape, data)
}

pub fn split_channels<T: Real>(x: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let c = x.shape().channels;
    if first == 0 || first >= c {
        return Err(Error::dim(
            "split_channels",
            format!("split point {first} must lie in 1..{c}"),
        ));
    }
    Ok((
        slice_channels(x, 0, first)?,
        slice_channels(x, first, c - first)?,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T: Real = f32> {
    pub scale: Vec<T>,
    pub shift: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: T,
    pub momentum: T,
}

impl<T: Real> BatchNormParams<T> {
    /// Scale 1, shift 0, running statistics (0, 1).
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            scale: vec![T::one(); channels],
            shift: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: T::from_f64(BN_EPSILON),
            momentum: T::from_f64(BN_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Folds one batch's statistics into the running estimates. `batch_var`
    /// is the biased variance; the running estimate uses the unbiased one.
    pub fn update_running(&mut self, batch_mean: &[T], batch_var: &[T], count: usize) {
        let m = self.momentum;
        let unbias = if count > 1 {
            T::from_usize(count) / T::from_usize(count - 1)
        } else {
            T::one()
        };
        for c in 0..self.channels() {
            self.running_mean[c] = (T::one() - m) * self.running_mean[c] + m * batch_mean[c];
            self.running_var[c] = (T::one() - m) * self.running_var[c] + m * batch_var[c] * unbias;
        }
    }
}

/// Per-channel mean and biased variance over batch, height and width.
pub fn channel_stats<T: Real>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let s = x.shape();
    let count = (s.batch * s.plane()) as f64;
    let mut mean = vec![0.0f64; s.channels];
    let mut var = vec![0.0f64; s.channels];
    for n in 0..s.batch {
        for c in 0..s.channels {
            mean[c] += x.plane(n, c).iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for n in 0..s.batch {
        for c in 0..s.channels {
            var[c] += x
                .plane(n, c)
                .iter()
                .map(|v| (v.as_f64() - mean[c]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (
        mean.into_iter().map(T::from_f64).collect(),
        var.into_iter().map(T::from_f64).collect(),
    )
}

/// Applies `scale * (x - mean) / sqrt(var + eps) + shift` per channel.
pub(crate) fn normalize_affine<T: Real>(
    x: &Tensor<T>,
    mean: &[T],
    var: &[T],
    p: &BatchNormParams<T>,
) -> Tensor<T> {
    let s = x.shape();
    let plane = s.plane();
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let c = i % s.channels;
        let inv_std = T::one() / (var[c] + p.epsilon).sqrt();
        for v in chunk {
            *v = p.scale[c] * (*v - mean[c]) * inv_std + p.shift[c];
        }
    }
    out
}

pub fn batch_norm_forward<T: Real>(
    x: &Tensor<T>,
    p: &mut BatchNormParams<T>,
    training: bool,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if p.channels() != s.channels {
        return Err(Error::dim(
            "batch_norm",
            format!("params have {} channels, input {s}", p.channels()),
        ));
    }
    if training {
        let (mean, var) = channel_stats(x);
        let out = normalize_affine(x, &mean, &var, p);
        p.update_running(&mean, &var, s.batch * s.plane());
        Ok(out)
    } else {
        Ok(normalize_affine(x, &p.running_mean, &p.running_var, p))
    }
}

/// Clamp to `[-1, 1]`.
pub fn hardtanh_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(hardtanh)
}

#[inline]
pub fn hardtanh<T: Real>(v: T) -> T {
    if v >= T::one() {
        T::one()
    } else if v < -T::one() {
        -T::one()
    } else {
        v
    }
}

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Per-channel PReLU: `x` if positive, else `slope[c] * x`.
pub fn prelu_forward<T: Real>(x: &Tensor<T>, slope: &[T]) -> Result<Tensor<T>> {
    let s = x.shape();
    if slope.len() != s.channels {
        return Err(Error::dim(
            "prelu",
            format!("{} slopes for input {s}", slope.len()),
        ));
    }
    let plane = s.plane();
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let a = slope[i % s.channels];
        for v in chunk {
            if *v <= T::zero() {
                *v = a * *v;
            }
        }
    }
    Ok(out)
}

/// `x` is `n x in x 1 x 1` (any trailing spatial extents are flattened into
/// the feature axis); `weight` is `out x in x 1 x 1`.
pub fn linear_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
) -> Result<Tensor<T>> {
    let (xs, ws) = (x.shape(), weight.shape());
    let fan_in = xs.sample_len();
    if ws.sample_len() != fan_in {
        return Err(Error::mismatch("linear", xs, ws));
    }
    let outputs = ws.batch;
    if let Some(b) = bias {
        if b.len() != outputs {
            return Err(Error::dim(
                "linear",
                format!("{} biases for {outputs} outputs", b.len()),
            ));
        }
    }
    let mut data = Vec::with_capacity(xs.batch * outputs);
    for n in 0..xs.batch {
        let row = x.sample(n);
        for o in 0..outputs {
            let mut v = dot(row, weight.sample(o));
            if let Some(b) = bias {
                v += b[o];
            }
            data.push(v);
        }
    }
    Tensor::from_vec(Shape::vector(xs.batch, outputs), data)
}

/// Mean absolute difference over all elements.
pub fn l1_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    pred.expect_shape("l1_loss", target.shape())?;
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t).abs().as_f64())
        .sum();
    Ok(T::from_f64(total / pred.numel() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: Shape, v: &[f32]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn conv_constant_case() {
        let x = Tensor::<f32>::ones(Shape::new(1, 1, 2, 2));
        let w = Tensor::<f32>::ones(Shape::new(1, 1, 2, 2));
        let y = conv2d_reference(&x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::random_uniform(Shape::new(2, 1, 5, 3), -2.0, 2.0, &mut rng);
        let w = Tensor::<f32>::ones(Shape::new(1, 1, 1, 1));
        assert_eq!(conv2d_reference(&x, &w, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f32>::ones(Shape::new(1, 2, 4, 4));
        let w = Tensor::<f32>::ones(Shape::new(1, 3, 3, 3));
        let err = conv2d_reference(&x, &w, 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"),
            "{msg}"
        );
    }

    #[test]
    fn conv_output_extent() {
        assert_eq!(conv_out_extent(8, 3, 2, 1), Some(4));
        assert_eq!(conv_out_extent(7, 3, 2, 1), Some(4));
        assert_eq!(conv_out_extent(2, 3, 1, 0), None);
        assert_eq!(deconv_out_extent(4, 2, 2, 0), Some(8));
        assert_eq!(deconv_out_extent(3, 3, 2, 1), Some(5));
    }

    #[test]
    fn avg_pool_values() {
        let x = t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(avg_pool2d(&x, 2, 2).unwrap().data(), &[2.5]);
        let c = Tensor::<f32>::full(Shape::new(2, 3, 6, 4), 0.75);
        let p = avg_pool2d(&c, 2, 2).unwrap();
        assert_eq!(p.shape(), Shape::new(2, 3, 3, 2));
        assert!(p.data().iter().all(|&v| v == 0.75));
        assert!(avg_pool2d(&x, 3, 1).is_err());
    }

    #[test]
    fn concat_and_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::<f32>::random_uniform(Shape::new(2, 4, 3, 3), -1.0, 1.0, &mut rng);
        let b = Tensor::<f32>::random_uniform(Shape::new(2, 4, 3, 3), -1.0, 1.0, &mut rng);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape().channels, 8);
        for n in 0..2 {
            assert_eq!(&c.sample(n)[..a.shape().sample_len()], a.sample(n));
        }
        let (a2, b2) = split_channels(&c, 4).unwrap();
        assert_eq!((a2, b2), (a, b));

        let bad = Tensor::<f32>::ones(Shape::new(2, 4, 3, 2));
        assert!(concat_channels(&c, &bad).is_err());
        assert!(split_channels(&c, 0).is_err());
        assert!(split_channels(&c, 8).is_err());
        let (p, q) = split_channels(&Tensor::<f32>::ones(Shape::new(1, 2, 1, 1)), 1).unwrap();
        assert_eq!((p.shape().channels, q.shape().channels), (1, 1));
    }

    #[test]
    fn hardtanh_branches() {
        let x = t(Shape::new(1, 1, 1, 4), &[1.5, -0.3, -2.0, 1.0]);
        assert_eq!(hardtanh_forward(&x).data(), &[1.0, -0.3, -1.0, 1.0]);
    }

    #[test]
    fn l1_hand_values() {
        let p = t(Shape::vector(1, 2), &[1.0, 2.0]);
        let z = Tensor::zeros(p.shape());
        assert_eq!(l1_loss(&p, &p).unwrap(), 0.0);
        assert_eq!(l1_loss(&p, &z).unwrap(), 1.5);
        assert!(l1_loss(&p, &Tensor::zeros(Shape::vector(1, 3))).is_err());
    }

    #[test]
    fn batch_norm_training_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::random_uniform(Shape::new(4, 3, 4, 4), -3.0, 5.0, &mut rng);
        let mut p = BatchNormParams::identity(3);
        let y = batch_norm_forward(&x, &mut p, true).unwrap();
        let (m, v) = channel_stats(&y);
        for c in 0..3 {
            assert!(m[c].abs() < 1e-5, "mean {}", m[c]);
            assert!((v[c] - 1.0).abs() < 1e-3, "var {}", v[c]);
        }
        assert!(p.running_mean.iter().any(|&v| v != 0.0));
        assert!(p.running_var.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn batch_norm_identity_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f32>::random_uniform(Shape::new(2, 2, 3, 3), -3.0, 3.0, &mut rng);
        let mut p = BatchNormParams::identity(2);
        let y = batch_norm_forward(&x, &mut p, false).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 3.0 * 1e-5);
        assert!(batch_norm_forward(&x, &mut BatchNormParams::identity(3), false).is_err());
    }

    #[test]
    fn linear_matches_hand_product() {
        let x = t(Shape::vector(1, 3), &[1.0, 2.0, 3.0]);
        let w = t(Shape::new(2, 3, 1, 1), &[1.0, 0.0, -1.0, 0.5, 0.5, 0.5]);
        let y = linear_forward(&x, &w, Some(&[1.0, -1.0])).unwrap();
        assert_eq!(y.data(), &[-1.0, 2.0]);
    }

    #[test]
    fn prelu_slopes_per_channel() {
        let x = t(Shape::new(1, 2, 1, 2), &[-1.0, 2.0, -4.0, 0.5]);
        let y = prelu_forward(&x, &[0.25, 0.5]).unwrap();
        assert_eq!(y.data(), &[-0.25, 2.0, -2.0, 0.5]);
    }
}
