use std::collections::BTreeMap;

use crate::binarize::{
    binary_conv2d_accumulators, binary_deconv2d_accumulators, channel_scales, scaled_signs, sign,
    smooth_sign, BinaryConv2dParams,
};
use crate::error::{Error, Result};
use crate::ops::{
    self, avg_pool2d, concat_many, conv2d_padded, conv_transpose2d_reference, global_avg_pool,
    linear_forward, slice_channels, BatchNormParams,
};
use crate::tensor::{Real, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// How `Sign` is evaluated on the forward pass.
///
/// `Hard` is the real binarized network. `Smooth` replaces `Sign` with its
/// piecewise-quadratic surrogate so that the straight-through gradient becomes
/// the exact derivative of the forward function, which is what finite
/// differences need.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SignMode {
    #[default]
    Hard,
    Smooth,
}

impl SignMode {
    #[inline]
    pub fn apply<T: Real>(self, v: T) -> T {
        match self {
            SignMode::Hard => sign(v),
            SignMode::Smooth => smooth_sign(v),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TapeConfig {
    pub sign: SignMode,
    /// Batch statistics in BatchNorm (and running-stat updates).
    pub training: bool,
    /// Treat `alpha` as a constant during backpropagation.
    pub detach_alpha: bool,
}

impl TapeConfig {
    pub fn inference() -> Self {
        Self::default()
    }

    pub fn training() -> Self {
        TapeConfig {
            training: true,
            ..Self::default()
        }
    }

    pub fn gradcheck() -> Self {
        TapeConfig {
            sign: SignMode::Smooth,
            ..Self::default()
        }
    }
}

/// Batch statistics observed by a training-mode BatchNorm node.
#[derive(Debug, Clone)]
pub struct BnObservation<T: Real> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T: Real> {
    Leaf,
    Sign(Var),
    Hardtanh(Var),
    Relu(Var),
    PRelu {
        x: Var,
        slope: Var,
    },
    RPReLU {
        x: Var,
        gamma: Var,
        zeta: Var,
        beta: Var,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
    },
    BinaryConv2d {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
        signs: Tensor<T>,
        wb: Tensor<T>,
        alpha: Vec<T>,
        alpha_grad: bool,
    },
    Deconv2d {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
    },
    BinaryDeconv2d {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
        signs: Tensor<T>,
        wb: Tensor<T>,
        alpha: Vec<T>,
        alpha_grad: bool,
    },
    AvgPool {
        x: Var,
        window: usize,
        stride: usize,
    },
    GlobalAvgPool(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Add(Var, Var),
    Scale(Var, T),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Reshape(Var),
    Exp(Var),
    SoftArgmax {
        x: Var,
        depth: usize,
        probs: Vec<T>,
    },
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    L1 {
        pred: Var,
        target: Tensor<T>,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct Node<T: Real> {
    pub op: Op<T>,
    pub value: Tensor<T>,
}

/// Reverse-mode tape. Every forward method evaluates eagerly, records the
/// operation with whatever context its backward rule needs, and returns a
/// [`Var`] for the result.
#[derive(Debug, Clone)]
pub struct Tape<T: Real = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) params: BTreeMap<Var, String>,
    bn_observations: Vec<BnObservation<T>>,
    config: TapeConfig,
}

fn vector_len(op: &'static str, t: &Shape, expect: usize) -> Result<()> {
    if t.numel() != expect {
        return Err(Error::dim(
            op,
            format!("expected {expect} per-channel values, got {t}"),
        ));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn new(config: TapeConfig) -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            bn_observations: Vec::new(),
            config,
        }
    }

    pub fn config(&self) -> TapeConfig {
        self.config
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn bn_observations(&self) -> &[BnObservation<T>] {
        &self.bn_observations
    }

    pub(crate) fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Sign tensors fed to every binarized convolution and deconvolution,
    /// in recording order.
    pub fn binary_input_signs(&self) -> Vec<&Tensor<T>> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::BinaryConv2d { signs, .. } | Op::BinaryDeconv2d { signs, .. } => Some(signs),
                _ => None,
            })
            .collect()
    }

    /// Non-parameter leaf (network input, constant).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t)
    }

    /// Named trainable leaf. Gradients are reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, t: Tensor<T>) -> Var {
        let v = self.push(Op::Leaf, t);
        self.params.insert(v, name.into());
        v
    }

    /// Named per-channel parameter vector, stored as `1 x C x 1 x 1`.
    pub fn param_vec(&mut self, name: impl Into<String>, values: &[T]) -> Var {
        let t = Tensor::from_vec(Shape::vector(1, values.len()), values.to_vec())
            .expect("shape by construction");
        self.param(name, t)
    }

    pub fn sign(&mut self, x: Var) -> Var {
        let mode = self.config.sign;
        let out = self.value(x).map(|v| mode.apply(v));
        self.push(Op::Sign(x), out)
    }

    pub fn hardtanh(&mut self, x: Var) -> Var {
        let out = ops::hardtanh_forward(self.value(x));
        self.push(Op::Hardtanh(x), out)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu_forward(self.value(x));
        self.push(Op::Relu(x), out)
    }

    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let out = ops::prelu_forward(self.value(x), self.value(slope).data())?;
        Ok(self.push(Op::PRelu { x, slope }, out))
    }

    /// Per-channel `o - gamma + zeta` above `gamma`, `beta * (o - gamma) + zeta`
    /// at or below it.
    pub fn rprelu(&mut self, x: Var, gamma: Var, zeta: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x);
        for p in [gamma, zeta, beta] {
            vector_len("rprelu", &self.shape(p), s.channels)?;
        }
        let (g, z, b) = (
            self.value(gamma).data(),
            self.value(zeta).data(),
            self.value(beta).data(),
        );
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(s.plane()).enumerate() {
            let c = i % s.channels;
            for v in chunk {
                *v = rprelu_scalar(*v, g[c], z[c], b[c]);
            }
        }
        Ok(self.push(
            Op::RPReLU {
                x,
                gamma,
                zeta,
                beta,
            },
            out,
        ))
    }

    /// BatchNorm with learnable `scale`/`shift` vars. Running statistics come
    /// from `stats`; in training mode batch statistics are used instead and
    /// recorded under `name` for [`Tape::bn_observations`].
    pub fn batch_norm(
        &mut self,
        name: &str,
        x: Var,
        scale: Var,
        shift: Var,
        stats: &BatchNormParams<T>,
    ) -> Result<Var> {
        let s = self.shape(x);
        if stats.channels() != s.channels {
            return Err(Error::dim(
                "batch_norm",
                format!("params have {} channels, input {s}", stats.channels()),
            ));
        }
        vector_len("batch_norm", &self.shape(scale), s.channels)?;
        vector_len("batch_norm", &self.shape(shift), s.channels)?;
        let batch_stats = self.config.training;
        let (mean, var) = if batch_stats {
            ops::channel_stats(self.value(x))
        } else {
            (stats.running_mean.clone(), stats.running_var.clone())
        };
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + stats.epsilon).sqrt())
            .collect();
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(s.plane()).enumerate() {
            let c = i % s.channels;
            for v in chunk {
                *v = sc[c] * (*v - mean[c]) * inv_std[c] + sh[c];
            }
        }
        if batch_stats {
            self.bn_observations.push(BnObservation {
                name: name.to_string(),
                mean: mean.clone(),
                var,
                count: s.batch * s.plane(),
            });
        }
        Ok(self.push(
            Op::BatchNorm {
                x,
                scale,
                shift,
                mean,
                inv_std,
                batch_stats,
            },
            out,
        ))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = conv2d_padded(self.value(x), self.value(w), stride, padding, T::zero())?;
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                stride,
                padding,
            },
            out,
        ))
    }

    fn binarized_operands(
        &self,
        x: Var,
        w: Var,
        frozen_alpha: Option<&[T]>,
    ) -> (Tensor<T>, Tensor<T>, Vec<T>) {
        let mode = self.config.sign;
        let signs = self.value(x).map(|v| mode.apply(v));
        let latent = self.value(w);
        let alpha = frozen_alpha
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| channel_scales(latent));
        let wb = match mode {
            SignMode::Hard => scaled_signs(latent, &alpha),
            SignMode::Smooth => {
                let len = latent.shape().sample_len();
                let mut t = latent.map(smooth_sign);
                for (o, chunk) in t.data_mut().chunks_mut(len).enumerate() {
                    chunk.iter_mut().for_each(|v| *v *= alpha[o]);
                }
                t
            }
        };
        (signs, wb, alpha)
    }

    /// Binarized convolution of `x` with latent weights `w`. Pass
    /// `frozen_alpha` for finalized layers; otherwise `alpha` is derived from
    /// `w` and differentiated unless the tape detaches it.
    pub fn binary_conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
        frozen_alpha: Option<&[T]>,
    ) -> Result<Var> {
        let (signs, wb, alpha) = self.binarized_operands(x, w, frozen_alpha);
        let out = match self.config.sign {
            SignMode::Hard => {
                let p = BinaryConv2dParams::new(self.value(w).clone(), stride, padding)?;
                let acc = binary_conv2d_accumulators(self.value(x), &p)?;
                scale_accumulators(acc.shape, &acc.values, &alpha)
            }
            SignMode::Smooth => conv2d_padded(&signs, &wb, stride, padding, T::one())?,
        };
        let alpha_grad = frozen_alpha.is_none() && !self.config.detach_alpha;
        Ok(self.push(
            Op::BinaryConv2d {
                x,
                w,
                stride,
                padding,
                signs,
                wb,
                alpha,
                alpha_grad,
            },
            out,
        ))
    }

    pub fn deconv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = conv_transpose2d_reference(self.value(x), self.value(w), stride, padding)?;
        Ok(self.push(
            Op::Deconv2d {
                x,
                w,
                stride,
                padding,
            },
            out,
        ))
    }

    pub fn binary_deconv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
        frozen_alpha: Option<&[T]>,
    ) -> Result<Var> {
        let (signs, wb, alpha) = self.binarized_operands(x, w, frozen_alpha);
        let out = match self.config.sign {
            SignMode::Hard => {
                let p = BinaryConv2dParams::new(self.value(w).clone(), 1, padding)?;
                let acc = binary_deconv2d_accumulators(self.value(x), &p, stride)?;
                scale_accumulators(acc.shape, &acc.values, &alpha)
            }
            SignMode::Smooth => conv_transpose2d_reference(&signs, &wb, stride, padding)?,
        };
        let alpha_grad = frozen_alpha.is_none() && !self.config.detach_alpha;
        Ok(self.push(
            Op::BinaryDeconv2d {
                x,
                w,
                stride,
                padding,
                signs,
                wb,
                alpha,
                alpha_grad,
            },
            out,
        ))
    }

    pub fn avg_pool(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let out = avg_pool2d(self.value(x), window, stride)?;
        Ok(self.push(Op::AvgPool { x, window, stride }, out))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let out = global_avg_pool(self.value(x));
        self.push(Op::GlobalAvgPool(x), out)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = concat_many(&tensors)?;
        Ok(self.push(Op::Concat(parts.to_vec()), out))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = slice_channels(self.value(x), start, len)?;
        Ok(self.push(Op::Slice { x, start }, out))
    }

    pub fn split_channels(&mut self, x: Var, first: usize) -> Result<(Var, Var)> {
        let c = self.shape(x).channels;
        if first == 0 || first >= c {
            return Err(Error::dim(
                "split_channels",
                format!("split point {first} must lie in 1..{c}"),
            ));
        }
        Ok((
            self.slice_channels(x, 0, first)?,
            self.slice_channels(x, first, c - first)?,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x).scale(k);
        self.push(Op::Scale(x, k), out)
    }

    /// `x` is flattened per sample; `w` is `out x in x 1 x 1`; `b` is a
    /// length-`out` vector.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let bias = b.map(|b| self.value(b).data().to_vec());
        let out = linear_forward(self.value(x), self.value(w), bias.as_deref())?;
        Ok(self.push(Op::Linear { x, w, b }, out))
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(x), out))
    }

    /// Flattens each sample into an `n x len x 1 x 1` vector.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        self.reshape(x, Shape::vector(s.batch, s.sample_len()))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::exp);
        self.push(Op::Exp(x), out)
    }

    /// Softmax over each joint's `depth x H x W` cells (channels are grouped
    /// `depth` at a time), then the expected `(x, y, z)` index. Output is
    /// `n x (3 * joints) x 1 x 1`.
    pub fn soft_argmax(&mut self, x: Var, depth: usize) -> Result<Var> {
        let s = self.shape(x);
        if depth == 0 || !s.channels.is_multiple_of(depth) {
            return Err(Error::dim(
                "soft_argmax",
                format!(
                    "{} channels are not a multiple of depth {depth}",
                    s.channels
                ),
            ));
        }
        let (coords, probs) = soft_argmax_values(self.value(x), depth);
        Ok(self.push(Op::SoftArgmax { x, depth, probs }, coords))
    }

    /// Picks channels `indices` (in order) out of an `n x C x 1 x 1` vector.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.plane() != 1 || indices.iter().any(|&i| i >= s.channels) || indices.is_empty() {
            return Err(Error::dim(
                "gather",
                format!("indices {indices:?} invalid for {s}"),
            ));
        }
        let src = self.value(x);
        let data = (0..s.batch)
            .flat_map(|n| indices.iter().map(move |&i| src.at(n, i, 0, 0)))
            .collect();
        let out = Tensor::from_vec(Shape::vector(s.batch, indices.len()), data)?;
        Ok(self.push(
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            out,
        ))
    }

    /// Mean absolute difference against a constant target; a `1 x 1 x 1 x 1`
    /// scalar.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let loss = ops::l1_loss(self.value(pred), target)?;
        Ok(self.push(
            Op::L1 {
                pred,
                target: target.clone(),
            },
            Tensor::full(Shape::new(1, 1, 1, 1), loss),
        ))
    }

    /// Scalar value of a `1 x 1 x 1 x 1` node.
    pub fn scalar(&self, v: Var) -> Result<T> {
        let t = self.value(v);
        if t.numel() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, got {}",
                t.shape()
            )));
        }
        Ok(t.data()[0])
    }
}

#[inline]
pub(crate) fn rprelu_scalar<T: Real>(o: T, gamma: T, zeta: T, beta: T) -> T {
    if o > gamma {
        o - gamma + zeta
    } else {
        beta * (o - gamma) + zeta
    }
}

fn scale_accumulators<T: Real>(shape: Shape, values: &[i64], alpha: &[T]) -> Tensor<T> {
    let plane = shape.plane();
    let data = values
        .iter()
        .enumerate()
        .map(|(i, &v)| alpha[(i / plane) % shape.channels] * T::from_f64(v as f64))
        .collect();
    Tensor::from_vec(shape, data).expect("shape by construction")
}

/// Coordinates (`n x 3J x 1 x 1`) and the softmax probabilities behind them.
pub(crate) fn soft_argmax_values<T: Real>(x: &Tensor<T>, depth: usize) -> (Tensor<T>, Vec<T>) {
    let s = x.shape();
    let joints = s.channels / depth;
    let cells = depth * s.plane();
    let mut probs = Vec::with_capacity(x.numel());
    let mut coords = Vec::with_capacity(s.batch * joints * 3);
    for slice in x.data().chunks(cells) {
        let max = slice.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<f64> = slice.iter().map(|&v| (v - max).as_f64().exp()).collect();
        let total: f64 = exps.iter().sum();
        let (mut cx, mut cy, mut cz) = (0.0f64, 0.0f64, 0.0f64);
        for (k, e) in exps.iter().enumerate() {
            let p = e / total;
            let (z, rem) = (k / s.plane(), k % s.plane());
            cx += p * (rem % s.width) as f64;
            cy += p * (rem / s.width) as f64;
            cz += p * z as f64;
            probs.push(T::from_f64(p));
        }
        coords.extend([T::from_f64(cx), T::from_f64(cy), T::from_f64(cz)]);
    }
    let out = Tensor::from_vec(Shape::vector(s.batch, joints * 3), coords).expect("shape");
    (out, probs)
}
