use rayon::prelude::*;

use super::packed::{dot_unchecked, pack_signs, PackedBits};
use super::BinaryConv2dParams;
use crate::error::{Error, Result};
use crate::ops::{deconv_out_extent, ConvGeometry};
use crate::tensor::{Real, Shape, Tensor};

/// Integer `±1` accumulators of a binarized convolution, before `alpha`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Accumulators {
    pub shape: Shape,
    pub values: Vec<i64>,
}

impl Accumulators {
    fn scale<T: Real>(&self, alpha: &[T]) -> Tensor<T> {
        let plane = self.shape.plane();
        let channels = self.shape.channels;
        let data = self
            .values
            .chunks(plane)
            .enumerate()
            .flat_map(|(i, chunk)| {
                let a = alpha[i % channels];
                chunk.iter().map(move |&v| a * T::from_f64(v as f64))
            })
            .collect();
        Tensor::from_vec(self.shape, data).expect("shape by construction")
    }
}

/// Packs the im2col rows of sample `n` directly from input signs. Padding
/// cells read as `Sign(0) = +1`, so they are set bits.
pub(crate) fn packed_im2col<T: Real>(
    input: &Tensor<T>,
    geo: &ConvGeometry,
    n: usize,
) -> PackedBits {
    let k = geo.kernel;
    let plen = geo.patch_len();
    let mut packed = PackedBits::zeros(geo.positions(), plen);
    let sample = input.sample(n);
    let (h, w) = (geo.input.height, geo.input.width);
    for oy in 0..geo.out_height {
        for ox in 0..geo.out_width {
            let words = packed.row_mut(oy * geo.out_width + ox);
            let mut j = 0;
            for c in 0..geo.input.channels {
                for ky in 0..k {
                    for kx in 0..k {
                        let positive = match geo.source(oy, ox, ky, kx) {
                            Some((y, x)) => sample[(c * h + y) * w + x] >= T::zero(),
                            None => true,
                        };
                        if positive {
                            words[j / 64] |= 1 << (j % 64);
                        }
                        j += 1;
                    }
                }
            }
        }
    }
    packed
}

/// XNOR-popcount accumulators of `Sign(input) * Sign(W)` over every output
/// cell.
pub fn binary_conv2d_accumulators<T: Real>(
    input: &Tensor<T>,
    p: &BinaryConv2dParams<T>,
) -> Result<Accumulators> {
    let w = &p.latent_weights;
    let geo = ConvGeometry::new(input.shape(), w.shape(), p.stride, p.padding)?;
    let plen = geo.patch_len();
    let packed_w = pack_signs(w.data(), geo.out_channels, plen)?;
    let cols: Vec<PackedBits> = (0..input.shape().batch)
        .into_par_iter()
        .map(|n| packed_im2col(input, &geo, n))
        .collect();
    let out_shape = geo.output_shape();
    let positions = geo.positions();
    let mut values = vec![0i64; out_shape.numel()];
    values
        .par_chunks_mut(positions)
        .enumerate()
        .for_each(|(i, dst)| {
            let (n, o) = (i / geo.out_channels, i % geo.out_channels);
            let wrow = packed_w.row(o).words;
            let patches = &cols[n];
            for (pos, d) in dst.iter_mut().enumerate() {
                *d = dot_unchecked(patches.row(pos).words, wrow, plen);
            }
        });
    Ok(Accumulators {
        shape: out_shape,
        values,
    })
}

/// Binarized convolution on the packed XNOR-popcount path:
/// `out[n, i, y, x] = alpha[i] * <Sign(patch), Sign(W_i)>`.
///
/// The sign is applied inside, so `input` is the full-precision activation.
/// Zero padding becomes `+1` after the sign, which differs from float
/// padding semantics.
pub fn binary_conv2d<T: Real>(input: &Tensor<T>, p: &BinaryConv2dParams<T>) -> Result<Tensor<T>> {
    let acc = binary_conv2d_accumulators(input, p)?;
    Ok(acc.scale(&p.scales()))
}

/// Integer transposed convolution of `Sign(input)` with `Sign(W)`.
/// `W` is `C_out x C_in x K x K`; `p.padding` crops the output border.
pub fn binary_deconv2d_accumulators<T: Real>(
    input: &Tensor<T>,
    p: &BinaryConv2dParams<T>,
    out_stride: usize,
) -> Result<Accumulators> {
    let (is, ws) = (input.shape(), p.latent_weights.shape());
    if ws.channels != is.channels {
        return Err(Error::mismatch("binary_deconv2d", is, ws));
    }
    if out_stride == 0 {
        return Err(Error::dim("binary_deconv2d", "stride must be >= 1"));
    }
    let k = ws.height;
    let pad = p.padding;
    let (oh, ow) = match (
        deconv_out_extent(is.height, k, out_stride, pad),
        deconv_out_extent(is.width, k, out_stride, pad),
    ) {
        (Some(h), Some(w)) => (h, w),
        _ => return Err(Error::mismatch("binary_deconv2d", is, ws)),
    };
    let out_shape = Shape::new(is.batch, ws.batch, oh, ow);
    let sgn = |v: T| if v >= T::zero() { 1i64 } else { -1 };
    let in_signs: Vec<i64> = input.data().iter().map(|&v| sgn(v)).collect();
    let w_signs: Vec<i64> = p.latent_weights.data().iter().map(|&v| sgn(v)).collect();
    let mut values = vec![0i64; out_shape.numel()];
    for n in 0..is.batch {
        for o in 0..ws.batch {
            for i in 0..is.channels {
                for y in 0..is.height {
                    for x in 0..is.width {
                        let a = in_signs[is.index(n, i, y, x)];
                        for ky in 0..k {
                            let ty = (y * out_stride + ky) as isize - pad as isize;
                            if ty < 0 || ty as usize >= oh {
                                continue;
                            }
                            for kx in 0..k {
                                let tx = (x * out_stride + kx) as isize - pad as isize;
                                if tx < 0 || tx as usize >= ow {
                                    continue;
                                }
                                values[out_shape.index(n, o, ty as usize, tx as usize)] +=
                                    a * w_signs[ws.index(o, i, ky, kx)];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Accumulators {
        shape: out_shape,
        values,
    })
}

/// Binarized transposed convolution, computed in the unpacked integer domain.
pub fn binary_deconv2d<T: Real>(
    input: &Tensor<T>,
    p: &BinaryConv2dParams<T>,
    out_stride: usize,
) -> Result<Tensor<T>> {
    let acc = binary_deconv2d_accumulators(input, p, out_stride)?;
    Ok(acc.scale(&p.scales()))
}

/// Binarized fully connected layer: a `1 x 1` binarized convolution over the
/// flattened features. `p.latent_weights` is `out x in x 1 x 1`.
pub fn binary_linear<T: Real>(x: &Tensor<T>, p: &BinaryConv2dParams<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    let flat = x.clone().reshape(Shape::vector(s.batch, s.sample_len()))?;
    if p.kernel() != 1 || p.stride != 1 || p.padding != 0 {
        return Err(Error::dim(
            "binary_linear",
            format!(
                "expected 1x1 unpadded weights, got {}",
                p.latent_weights.shape()
            ),
        ));
    }
    binary_conv2d(&flat, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binarize::sign_forward;
    use crate::ops::{conv2d_padded, conv_transpose2d_reference};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bparams(w: Tensor, stride: usize, padding: usize) -> BinaryConv2dParams {
        BinaryConv2dParams::new(w, stride, padding).unwrap()
    }

    #[test]
    fn positive_input_half_weight() {
        let x = Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![0.3, 1.0, 2.0, 0.1]).unwrap();
        let p = bparams(Tensor::full(Shape::new(1, 1, 1, 1), 0.5), 1, 0);
        let y = binary_conv2d(&x, &p).unwrap();
        assert_eq!(y.data(), &[0.5; 4]);
    }

    #[test]
    fn all_positive_weights_sum_signs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f32>::random_uniform(Shape::new(2, 1, 6, 5), -1.0, 1.0, &mut rng);
        let w = Tensor::<f32>::random_uniform(Shape::new(1, 1, 3, 3), 0.1, 1.0, &mut rng);
        let p = bparams(w, 1, 0);
        let alpha = p.scales()[0];
        let y = binary_conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 1, 4, 3));
        for n in 0..2 {
            for oy in 0..4 {
                for ox in 0..3 {
                    let mut s = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            s += if x.at(n, 0, oy + ky, ox + kx) >= 0.0 {
                                1.0
                            } else {
                                -1.0
                            };
                        }
                    }
                    assert_eq!(y.at(n, 0, oy, ox), alpha * s);
                }
            }
        }
    }

    #[test]
    fn padding_reads_as_plus_one() {
        let x = Tensor::<f32>::full(Shape::new(1, 1, 1, 1), -3.0);
        let p = bparams(Tensor::ones(Shape::new(1, 1, 3, 3)), 1, 1);
        // eight +1 padding cells and one -1 centre
        assert_eq!(binary_conv2d(&x, &p).unwrap().data(), &[7.0]);
    }

    #[test]
    fn matches_float_oracle_on_signs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..40 {
            let c_in = rng.gen_range(1..6);
            let c_out = rng.gen_range(1..5);
            let k = [1, 3][rng.gen_range(0..2)];
            let stride = rng.gen_range(1..3);
            let pad = rng.gen_range(0..2);
            let x = Tensor::<f32>::random_uniform(Shape::new(2, c_in, 7, 6), -1.0, 1.0, &mut rng);
            let w =
                Tensor::<f32>::random_uniform(Shape::new(c_out, c_in, k, k), -1.0, 1.0, &mut rng);
            let p = bparams(w, stride, pad);
            let fast = binary_conv2d(&x, &p).unwrap();
            let oracle =
                conv2d_padded(&sign_forward(&x), &p.binarized_weights(), stride, pad, 1.0).unwrap();
            assert!(fast.max_abs_diff(&oracle).unwrap() < 1e-4);
        }
    }

    #[test]
    fn deconv_hand_case() {
        let x = Tensor::<f32>::ones(Shape::new(1, 1, 1, 1));
        let p = bparams(Tensor::full(Shape::new(1, 1, 2, 2), 0.5), 1, 0);
        let y = binary_deconv2d(&x, &p, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[0.5; 4]);

        let z = bparams(Tensor::zeros(Shape::new(2, 1, 2, 2)), 1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f32>::random_uniform(Shape::new(1, 1, 3, 3), -1.0, 1.0, &mut rng);
        assert!(binary_deconv2d(&x, &z, 2)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn deconv_matches_float_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let c_in = rng.gen_range(1..4);
            let c_out = rng.gen_range(1..4);
            let k = rng.gen_range(1..4);
            let stride = rng.gen_range(1..3);
            let pad = rng.gen_range(0..k);
            let x = Tensor::<f32>::random_uniform(Shape::new(2, c_in, 4, 3), -1.0, 1.0, &mut rng);
            let w =
                Tensor::<f32>::random_uniform(Shape::new(c_out, c_in, k, k), -1.0, 1.0, &mut rng);
            let p = bparams(w, 1, pad);
            let Ok(fast) = binary_deconv2d(&x, &p, stride) else {
                continue;
            };
            let oracle =
                conv_transpose2d_reference(&sign_forward(&x), &p.binarized_weights(), stride, pad)
                    .unwrap();
            assert!(fast.max_abs_diff(&oracle).unwrap() < 1e-5);
        }
    }

    #[test]
    fn linear_uses_flattened_features() {
        let x =
            Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, -1.0, 0.5, -0.5]).unwrap();
        let w = Tensor::from_vec(Shape::new(1, 4, 1, 1), vec![1.0, 1.0, -1.0, -1.0]).unwrap();
        let y = binary_linear(&x, &bparams(w, 1, 0)).unwrap();
        assert_eq!(y.data(), &[0.0]);
    }
}
