use std::collections::BTreeMap;

use super::tape::{Op, Tape, Var};
use crate::binarize::ste_grad_scalar;
use crate::error::{Error, Result};
use crate::ops::{col2im_accumulate, dot, im2col, ConvGeometry};
use crate::tensor::{Real, Shape, Tensor};

/// Gradients of a scalar loss with respect to every recorded value.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    by_var: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a leaf (input or parameter). `None` when the
    /// loss does not depend on it; intermediate gradients are not retained.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_var.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a named parameter, summed over every leaf registered under
    /// that name.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing
            .add_assign(&g)
            .expect("gradient shape matches its value"),
        slot @ None => *slot = Some(g),
    }
}

/// Per-channel sums of `f(g, x)` over batch and plane.
fn channel_sums<T: Real>(g: &Tensor<T>, x: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    let s = g.shape();
    let mut out = vec![T::zero(); s.channels];
    for (i, (gc, xc)) in g
        .data()
        .chunks(s.plane())
        .zip(x.data().chunks(s.plane()))
        .enumerate()
    {
        out[i % s.channels] += gc.iter().zip(xc).map(|(&a, &b)| f(a, b)).sum::<T>();
    }
    out
}

fn vector<T: Real>(values: Vec<T>) -> Tensor<T> {
    let n = values.len();
    Tensor::from_vec(Shape::vector(1, n), values).expect("shape by construction")
}

/// Gradients of a cross-correlation `out = conv(x_padded, w)` with respect to
/// `x` (interior cells only) and `w`; padding cells hold `pad_value`.
fn conv_backward<T: Real>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: usize,
    pad_value: T,
) -> (Tensor<T>, Tensor<T>) {
    let geo =
        ConvGeometry::new(x.shape(), w.shape(), stride, padding).expect("validated on forward");
    let plen = geo.patch_len();
    let positions = geo.positions();
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    for n in 0..x.shape().batch {
        let cols = im2col(x, &geo, n, pad_value);
        let mut dcols = vec![T::zero(); cols.len()];
        for o in 0..geo.out_channels {
            let go = g.plane(n, o);
            let wrow = &w.data()[o * plen..(o + 1) * plen];
            let dwrow = &mut dw.data_mut()[o * plen..(o + 1) * plen];
            for p in 0..positions {
                let gv = go[p];
                if gv == T::zero() {
                    continue;
                }
                let col = &cols[p * plen..(p + 1) * plen];
                let dcol = &mut dcols[p * plen..(p + 1) * plen];
                for k in 0..plen {
                    dwrow[k] += gv * col[k];
                    dcol[k] += gv * wrow[k];
                }
            }
        }
        col2im_accumulate(&dcols, &geo, n, &mut dx);
    }
    (dx, dw)
}

/// Gradients of a transposed convolution (weights `C_out x C_in x K x K`).
fn deconv_backward<T: Real>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> (Tensor<T>, Tensor<T>) {
    let (is, ws, os) = (x.shape(), w.shape(), g.shape());
    let k = ws.height;
    let mut dx = Tensor::zeros(is);
    let mut dw = Tensor::zeros(ws);
    for n in 0..is.batch {
        for o in 0..ws.batch {
            for i in 0..is.channels {
                for y in 0..is.height {
                    for xx in 0..is.width {
                        let xv = x.at(n, i, y, xx);
                        let mut acc = T::zero();
                        for ky in 0..k {
                            let ty = (y * stride + ky) as isize - padding as isize;
                            if ty < 0 || ty as usize >= os.height {
                                continue;
                            }
                            for kx in 0..k {
                                let tx = (xx * stride + kx) as isize - padding as isize;
                                if tx < 0 || tx as usize >= os.width {
                                    continue;
                                }
                                let gv = g.at(n, o, ty as usize, tx as usize);
                                acc += gv * w.at(o, i, ky, kx);
                                *dw.at_mut(o, i, ky, kx) += gv * xv;
                            }
                        }
                        *dx.at_mut(n, i, y, xx) += acc;
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Chains `d loss / d wb` back to the latent weights through
/// `wb = alpha * s(w)` with `alpha = ||w||_1 / n`.
fn latent_weight_grad<T: Real>(
    dwb: &Tensor<T>,
    latent: &Tensor<T>,
    wb: &Tensor<T>,
    alpha: &[T],
    alpha_grad: bool,
) -> Tensor<T> {
    let len = latent.shape().sample_len();
    let fan_in = T::from_usize(len);
    let mut dw = Tensor::zeros(latent.shape());
    for o in 0..latent.shape().batch {
        let range = o * len..(o + 1) * len;
        let (w, g, b) = (
            &latent.data()[range.clone()],
            &dwb.data()[range.clone()],
            &wb.data()[range.clone()],
        );
        let a = alpha[o];
        // sum_j g_j * s(w_j), recovered from wb = alpha * s(w). alpha = 0 means
        // every latent weight is zero, where the |w| subgradient is zero too.
        let through_alpha = if alpha_grad && a != T::zero() {
            dot(g, b) / a
        } else {
            T::zero()
        };
        let dst = &mut dw.data_mut()[range];
        for j in 0..len {
            let abs_grad = if w[j] > T::zero() {
                T::one()
            } else if w[j] < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            dst[j] = g[j] * a * ste_grad_scalar(w[j]) + abs_grad / fan_in * through_alpha;
        }
    }
    dw
}

impl<T: Real> Tape<T> {
    /// Backpropagates from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Sign(x) => {
                    let xv = self.value(*x);
                    let d = g.zip_map(xv, "sign", |gv, v| gv * ste_grad_scalar(v))?;
                    accumulate(&mut grads, *x, d);
                }
                Op::Hardtanh(x) => {
                    let d = g.zip_map(self.value(*x), "hardtanh", |gv, v| {
                        if v >= -T::one() && v < T::one() {
                            gv
                        } else {
                            T::zero()
                        }
                    })?;
                    accumulate(&mut grads, *x, d);
                }
                Op::Relu(x) => {
                    let d = g.zip_map(self.value(*x), "relu", |gv, v| {
                        if v > T::zero() {
                            gv
                        } else {
                            T::zero()
                        }
                    })?;
                    accumulate(&mut grads, *x, d);
                }
                Op::PRelu { x, slope } => {
                    let xv = self.value(*x);
                    let a = self.value(*slope).data();
                    let s = xv.shape();
                    let mut dx = g.clone();
                    for (i, (chunk, xc)) in dx
                        .data_mut()
                        .chunks_mut(s.plane())
                        .zip(xv.data().chunks(s.plane()))
                        .enumerate()
                    {
                        let c = i % s.channels;
                        for (d, &v) in chunk.iter_mut().zip(xc) {
                            if v <= T::zero() {
                                *d *= a[c];
                            }
                        }
                    }
                    let da = channel_sums(
                        &g,
                        xv,
                        |gv, v| if v <= T::zero() { gv * v } else { T::zero() },
                    );
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *slope, vector(da));
                }
                Op::RPReLU {
                    x,
                    gamma,
                    zeta,
                    beta,
                } => {
                    let xv = self.value(*x);
                    let s = xv.shape();
                    let (gm, bt) = (self.value(*gamma).data(), self.value(*beta).data());
                    let mut dx = g.clone();
                    let mut dg = vec![T::zero(); s.channels];
                    let mut dz = vec![T::zero(); s.channels];
                    let mut db = vec![T::zero(); s.channels];
                    for (i, (chunk, xc)) in dx
                        .data_mut()
                        .chunks_mut(s.plane())
                        .zip(xv.data().chunks(s.plane()))
                        .enumerate()
                    {
                        let c = i % s.channels;
                        for (d, &o) in chunk.iter_mut().zip(xc) {
                            let gv = *d;
                            dz[c] += gv;
                            if o > gm[c] {
                                dg[c] -= gv;
                            } else {
                                *d = gv * bt[c];
                                dg[c] -= gv * bt[c];
                                db[c] += gv * (o - gm[c]);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, vector(dg));
                    accumulate(&mut grads, *zeta, vector(dz));
                    accumulate(&mut grads, *beta, vector(db));
                }
                Op::BatchNorm {
                    x,
                    scale,
                    shift,
                    mean,
                    inv_std,
                    batch_stats,
                } => {
                    let xv = self.value(*x);
                    let s = xv.shape();
                    let sc = self.value(*scale).data();
                    let xhat = {
                        let mut t = xv.clone();
                        for (i, chunk) in t.data_mut().chunks_mut(s.plane()).enumerate() {
                            let c = i % s.channels;
                            chunk
                                .iter_mut()
                                .for_each(|v| *v = (*v - mean[c]) * inv_std[c]);
                        }
                        t
                    };
                    let dscale = channel_sums(&g, &xhat, |a, b| a * b);
                    let dshift = channel_sums(&g, &xhat, |a, _| a);
                    let mut dx = g.clone();
                    let count = T::from_usize(s.batch * s.plane());
                    for (i, (chunk, xh)) in dx
                        .data_mut()
                        .chunks_mut(s.plane())
                        .zip(xhat.data().chunks(s.plane()))
                        .enumerate()
                    {
                        let c = i % s.channels;
                        let k = sc[c] * inv_std[c];
                        for (d, &h) in chunk.iter_mut().zip(xh) {
                            *d = if *batch_stats {
                                // dx = k/M * (M*g - sum(g) - xhat*sum(g*xhat))
                                k * (*d - dshift[c] / count - h * dscale[c] / count)
                            } else {
                                k * *d
                            };
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *scale, vector(dscale));
                    accumulate(&mut grads, *shift, vector(dshift));
                }
                Op::Conv2d {
                    x,
                    w,
                    stride,
                    padding,
                } => {
                    let (dx, dw) = conv_backward(
                        &g,
                        self.value(*x),
                        self.value(*w),
                        *stride,
                        *padding,
                        T::zero(),
                    );
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::BinaryConv2d {
                    x,
                    w,
                    stride,
                    padding,
                    signs,
                    wb,
                    alpha,
                    alpha_grad,
                } => {
                    let (dsigns, dwb) = conv_backward(&g, signs, wb, *stride, *padding, T::one());
                    let dx = dsigns.zip_map(self.value(*x), "binary_conv2d", |d, v| {
                        d * ste_grad_scalar(v)
                    })?;
                    let dw = latent_weight_grad(&dwb, self.value(*w), wb, alpha, *alpha_grad);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::Deconv2d {
                    x,
                    w,
                    stride,
                    padding,
                } => {
                    let (dx, dw) =
                        deconv_backward(&g, self.value(*x), self.value(*w), *stride, *padding);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::BinaryDeconv2d {
                    x,
                    w,
                    stride,
                    padding,
                    signs,
                    wb,
                    alpha,
                    alpha_grad,
                } => {
                    let (dsigns, dwb) = deconv_backward(&g, signs, wb, *stride, *padding);
                    let dx = dsigns.zip_map(self.value(*x), "binary_deconv2d", |d, v| {
                        d * ste_grad_scalar(v)
                    })?;
                    let dw = latent_weight_grad(&dwb, self.value(*w), wb, alpha, *alpha_grad);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::AvgPool { x, window, stride } => {
                    let s = self.shape(*x);
                    let inv = T::one() / T::from_usize(window * window);
                    let os = g.shape();
                    let mut dx = Tensor::zeros(s);
                    for n in 0..os.batch {
                        for c in 0..os.channels {
                            for oy in 0..os.height {
                                for ox in 0..os.width {
                                    let gv = g.at(n, c, oy, ox) * inv;
                                    for dy in 0..*window {
                                        for dxx in 0..*window {
                                            *dx.at_mut(
                                                n,
                                                c,
                                                oy * stride + dy,
                                                ox * stride + dxx,
                                            ) += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::GlobalAvgPool(x) => {
                    let s = self.shape(*x);
                    let inv = T::one() / T::from_usize(s.plane());
                    let dx = Tensor::from_fn(s, |n, c, _, _| g.at(n, c, 0, 0) * inv);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let c = self.shape(p).channels;
                        let d = crate::ops::slice_channels(&g, start, c)?;
                        accumulate(&mut grads, p, d);
                        start += c;
                    }
                }
                Op::Slice { x, start } => {
                    let s = self.shape(*x);
                    let len = g.shape().channels;
                    let dx = Tensor::from_fn(s, |n, c, y, xx| {
                        if c >= *start && c < start + len {
                            g.at(n, c - start, y, xx)
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Scale(x, k) => {
                    accumulate(&mut grads, *x, g.scale(*k));
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (batch, fan_in) = (xv.shape().batch, xv.shape().sample_len());
                    let outputs = wv.shape().batch;
                    let mut dx = Tensor::zeros(xv.shape());
                    let mut dw = Tensor::zeros(wv.shape());
                    let mut db = vec![T::zero(); outputs];
                    for n in 0..batch {
                        for o in 0..outputs {
                            let gv = g.at(n, o, 0, 0);
                            db[o] += gv;
                            let xrow = xv.sample(n);
                            let wrow = wv.sample(o);
                            for k in 0..fan_in {
                                dx.data_mut()[n * fan_in + k] += gv * wrow[k];
                                dw.data_mut()[o * fan_in + k] += gv * xrow[k];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, vector(db));
                    }
                }
                Op::Reshape(x) => {
                    let d = g.reshape(self.shape(*x))?;
                    accumulate(&mut grads, *x, d);
                }
                Op::Exp(x) => {
                    let d = g.zip_map(&node.value, "exp", |gv, y| gv * y)?;
                    accumulate(&mut grads, *x, d);
                }
                Op::SoftArgmax { x, depth, probs } => {
                    let s = self.shape(*x);
                    let cells = depth * s.plane();
                    let mut dx = Tensor::zeros(s);
                    let coords = &node.value;
                    for (j, (dslice, pslice)) in dx
                        .data_mut()
                        .chunks_mut(cells)
                        .zip(probs.chunks(cells))
                        .enumerate()
                    {
                        let c = &coords.data()[j * 3..j * 3 + 3];
                        let gc = &g.data()[j * 3..j * 3 + 3];
                        for (k, (d, &p)) in dslice.iter_mut().zip(pslice).enumerate() {
                            let (z, rem) = (k / s.plane(), k % s.plane());
                            let pos = [
                                T::from_usize(rem % s.width),
                                T::from_usize(rem / s.width),
                                T::from_usize(z),
                            ];
                            let mut acc = T::zero();
                            for a in 0..3 {
                                acc += gc[a] * (pos[a] - c[a]);
                            }
                            *d = p * acc;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gather { x, indices } => {
                    let s = self.shape(*x);
                    let mut dx = Tensor::zeros(s);
                    for n in 0..s.batch {
                        for (k, &i) in indices.iter().enumerate() {
                            *dx.at_mut(n, i, 0, 0) += g.at(n, k, 0, 0);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::L1 { pred, target } => {
                    let upstream = g.data()[0];
                    let k = upstream / T::from_usize(target.numel());
                    let d = self.value(*pred).zip_map(target, "l1_loss", |p, t| {
                        if p > t {
                            k
                        } else if p < t {
                            -k
                        } else {
                            T::zero()
                        }
                    })?;
                    accumulate(&mut grads, *pred, d);
                }
            }
        }

        let mut params: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (var, name) in &self.params {
            let Some(g) = grads[var.0].clone() else {
                continue;
            };
            match params.get_mut(name) {
                Some(existing) => existing.add_assign(&g)?,
                None => {
                    params.insert(name.clone(), g);
                }
            }
        }
        Ok(Gradients {
            by_var: grads,
            params,
        })
    }
}
