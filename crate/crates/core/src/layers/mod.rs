//! Binarized dual residual layers: RPReLU, the local convolution residual and
//! its dimension-matching variants, block residuals and whole networks built
//! from a declarative [`NetworkConfig`].
//!
//! Every layer forwards through a [`Tape`], so the same code path serves
//! inference, training and gradient checks. The free functions named after
//! the individual residual forms run a throwaway inference tape.

mod block;
mod checkpoint;
mod config;
pub mod gradcheck;
mod network;
mod residual;

pub use block::{bidrb_forward, block_residual_forward, Bidrb, BlockResidual};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CheckpointRecord,
    CHECKPOINT_MAGIC,
};
pub use config::{
    BlockResidualMode, BlockSpec, ModuleKind, ModuleSpec, NetworkConfig, PreactKind, Preset,
};
pub use network::{bidrn_forward, build_network, Head, Network};
pub use residual::{
    down_sample_residual_forward, down_scale_residual_forward, fusion_down_residual_forward,
    fusion_up_residual_forward, ResidualModule,
};

use rand::Rng;

use crate::autograd::{Tape, TapeConfig, Var};
use crate::binarize::{sign_forward, weight_shape, BinaryConv2dParams};
use crate::error::{Error, Result};
use crate::ops::BatchNormParams;
use crate::tensor::{Real, Tensor};

/// Whether a state slot is trained or only carried along (running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateKind {
    Param,
    Buffer,
}

/// Callback receiving a state slot's name, kind, dims and values.
pub type StateVisitor<'a, T> = dyn FnMut(&str, StateKind, &[usize], &[T]) + 'a;

/// Named access to every tensor a layer owns, in a fixed order.
pub trait LayerState<T: Real> {
    fn visit_state(&self, f: &mut StateVisitor<'_, T>);
    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, StateKind, &mut [T]));
    fn visit_batch_norms(&mut self, f: &mut dyn FnMut(&str, &mut BatchNormParams<T>));
    fn visit_binary_convs(&mut self, f: &mut dyn FnMut(&mut BinaryConv2dParams<T>));
}

pub(crate) fn visit_bn<T: Real>(name: &str, bn: &BatchNormParams<T>, f: &mut StateVisitor<'_, T>) {
    let c = [bn.channels()];
    f(&format!("{name}.scale"), StateKind::Param, &c, &bn.scale);
    f(&format!("{name}.shift"), StateKind::Param, &c, &bn.shift);
    f(
        &format!("{name}.running_mean"),
        StateKind::Buffer,
        &c,
        &bn.running_mean,
    );
    f(
        &format!("{name}.running_var"),
        StateKind::Buffer,
        &c,
        &bn.running_var,
    );
}

pub(crate) fn visit_bn_mut<T: Real>(
    name: &str,
    bn: &mut BatchNormParams<T>,
    f: &mut dyn FnMut(&str, StateKind, &mut [T]),
) {
    f(&format!("{name}.scale"), StateKind::Param, &mut bn.scale);
    f(&format!("{name}.shift"), StateKind::Param, &mut bn.shift);
    f(
        &format!("{name}.running_mean"),
        StateKind::Buffer,
        &mut bn.running_mean,
    );
    f(
        &format!("{name}.running_var"),
        StateKind::Buffer,
        &mut bn.running_var,
    );
}

pub(crate) fn tensor_dims<T: Real>(t: &Tensor<T>) -> [usize; 4] {
    t.shape().dims()
}

/// Kaiming-style uniform weights, bound `sqrt(6 / fan_in)`.
pub(crate) fn kaiming_uniform<T: Real, R: Rng + ?Sized>(
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
    rng: &mut R,
) -> Tensor<T> {
    let shape = weight_shape(out_channels, in_channels, kernel);
    let bound = (6.0 / shape.sample_len() as f64).sqrt();
    Tensor::random_uniform(shape, -bound, bound, rng)
}

/// Registers a BatchNorm's learnable parts on the tape and applies it.
pub(crate) fn bn_on_tape<T: Real>(
    tape: &mut Tape<T>,
    name: &str,
    x: Var,
    bn: &BatchNormParams<T>,
) -> Result<Var> {
    let scale = tape.param_vec(format!("{name}.scale"), &bn.scale);
    let shift = tape.param_vec(format!("{name}.shift"), &bn.shift);
    tape.batch_norm(name, x, scale, shift, bn)
}

pub(crate) fn binary_conv_on_tape<T: Real>(
    tape: &mut Tape<T>,
    name: &str,
    x: Var,
    p: &BinaryConv2dParams<T>,
) -> Result<Var> {
    let w = tape.param(name.to_string(), p.latent_weights.clone());
    let frozen = p.is_frozen().then(|| p.alpha.clone());
    tape.binary_conv2d(x, w, p.stride, p.padding, frozen.as_deref())
}

/// Runs `f` on a fresh inference tape holding `x` and returns its output.
pub(crate) fn run_inference<T: Real>(
    x: &Tensor<T>,
    f: impl FnOnce(&mut Tape<T>, Var) -> Result<Var>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new(TapeConfig::inference());
    let input = tape.input(x.clone());
    let out = f(&mut tape, input)?;
    Ok(tape.value(out).clone())
}

/// Activation applied before binarization.
#[derive(Debug, Clone, PartialEq)]
pub enum Preact<T: Real = f32> {
    Hardtanh,
    Relu,
    /// Per-channel learnable negative slope.
    Prelu {
        slope: Vec<T>,
    },
}

impl<T: Real> Preact<T> {
    pub fn new(kind: PreactKind, channels: usize) -> Self {
        match kind {
            PreactKind::Hardtanh => Preact::Hardtanh,
            PreactKind::Relu => Preact::Relu,
            PreactKind::Prelu => Preact::Prelu {
                slope: vec![T::from_f64(0.25); channels],
            },
        }
    }

    pub fn kind(&self) -> PreactKind {
        match self {
            Preact::Hardtanh => PreactKind::Hardtanh,
            Preact::Relu => PreactKind::Relu,
            Preact::Prelu { .. } => PreactKind::Prelu,
        }
    }

    pub(crate) fn on_tape(&self, tape: &mut Tape<T>, name: &str, x: Var) -> Result<Var> {
        match self {
            Preact::Hardtanh => Ok(tape.hardtanh(x)),
            Preact::Relu => Ok(tape.relu(x)),
            Preact::Prelu { slope } => {
                let s = tape.param_vec(format!("{name}.slope"), slope);
                tape.prelu(x, s)
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        run_inference(x, |t, v| self.on_tape(t, "preact", v))
    }

    /// `Sign(preact(x))`, the tensor the binarized convolution actually sees.
    pub fn sign_probe(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(sign_forward(&self.forward(x)?))
    }
}

/// Per-channel shifted PReLU parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RPReLUParams<T: Real = f32> {
    pub gamma: Vec<T>,
    pub zeta: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Real> RPReLUParams<T> {
    /// `gamma = zeta = 0`, `beta = 0.25`.
    pub fn new(channels: usize) -> Self {
        RPReLUParams {
            gamma: vec![T::zero(); channels],
            zeta: vec![T::zero(); channels],
            beta: vec![T::from_f64(0.25); channels],
        }
    }

    /// `(gamma, zeta, beta) = (0, 0, 1)`, the identity map.
    pub fn identity(channels: usize) -> Self {
        RPReLUParams {
            beta: vec![T::one(); channels],
            ..Self::new(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub(crate) fn on_tape(&self, tape: &mut Tape<T>, name: &str, x: Var) -> Result<Var> {
        let g = tape.param_vec(format!("{name}.gamma"), &self.gamma);
        let z = tape.param_vec(format!("{name}.zeta"), &self.zeta);
        let b = tape.param_vec(format!("{name}.beta"), &self.beta);
        tape.rprelu(x, g, z, b)
    }

    fn visit(&self, name: &str, f: &mut StateVisitor<'_, T>) {
        let c = [self.channels()];
        f(&format!("{name}.gamma"), StateKind::Param, &c, &self.gamma);
        f(&format!("{name}.zeta"), StateKind::Param, &c, &self.zeta);
        f(&format!("{name}.beta"), StateKind::Param, &c, &self.beta);
    }

    fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, StateKind, &mut [T])) {
        f(&format!("{name}.gamma"), StateKind::Param, &mut self.gamma);
        f(&format!("{name}.zeta"), StateKind::Param, &mut self.zeta);
        f(&format!("{name}.beta"), StateKind::Param, &mut self.beta);
    }
}

pub fn rprelu_forward<T: Real>(o: &Tensor<T>, p: &RPReLUParams<T>) -> Result<Tensor<T>> {
    if p.channels() != o.shape().channels {
        return Err(Error::dim(
            "rprelu",
            format!("params have {} channels, input {}", p.channels(), o.shape()),
        ));
    }
    run_inference(o, |t, v| p.on_tape(t, "rprelu", v))
}

/// One binarized 3x3 convolution with its RPReLU, full-precision shortcut and
/// BatchNorm: `BN(RPReLU(bconv(a)) + shortcut(a))`. With stride 2 the
/// shortcut is a 2x2 average pool.
#[derive(Debug, Clone, PartialEq)]
pub struct LcrLayer<T: Real = f32> {
    pub name: String,
    pub conv: BinaryConv2dParams<T>,
    pub rprelu: RPReLUParams<T>,
    pub bn: BatchNormParams<T>,
    /// When false the conv runs in full precision on the latent weights.
    pub binarized: bool,
}

impl<T: Real> LcrLayer<T> {
    pub fn new<R: Rng + ?Sized>(
        name: impl Into<String>,
        channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weights = kaiming_uniform(channels, channels, 3, rng);
        Self::from_weights(name, weights, stride)
    }

    pub fn from_weights(
        name: impl Into<String>,
        weights: Tensor<T>,
        stride: usize,
    ) -> Result<Self> {
        let s = weights.shape();
        if s.batch != s.channels || s.height != 3 {
            return Err(Error::dim(
                "lcr",
                format!("weights must be C x C x 3 x 3, got {s}"),
            ));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::dim(
                "lcr",
                format!("stride must be 1 or 2, got {stride}"),
            ));
        }
        Ok(LcrLayer {
            name: name.into(),
            conv: BinaryConv2dParams::new(weights, stride, 1)?,
            rprelu: RPReLUParams::new(s.batch),
            bn: BatchNormParams::identity(s.batch),
            binarized: true,
        })
    }

    pub fn channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn stride(&self) -> usize {
        self.conv.stride
    }

    /// Forward on an already pre-activated input `a`.
    pub fn on_tape(&self, tape: &mut Tape<T>, a: Var) -> Result<Var> {
        let s = tape.shape(a);
        if s.channels != self.channels() {
            return Err(Error::dim(
                "lcr",
                format!(
                    "{} expects {} channels, input {s}",
                    self.name,
                    self.channels()
                ),
            ));
        }
        if self.stride() == 2 && (!s.height.is_multiple_of(2) || !s.width.is_multiple_of(2)) {
            return Err(Error::dim(
                "down_scale_residual",
                format!("{} needs even spatial extents, input {s}", self.name),
            ));
        }
        let weight_name = format!("{}.conv.weight", self.name);
        let o = if self.binarized {
            binary_conv_on_tape(tape, &weight_name, a, &self.conv)?
        } else {
            let w = tape.param(weight_name, self.conv.latent_weights.clone());
            tape.conv2d(a, w, self.conv.stride, self.conv.padding)?
        };
        let r = self
            .rprelu
            .on_tape(tape, &format!("{}.rprelu", self.name), o)?;
        let shortcut = if self.stride() == 2 {
            tape.avg_pool(a, 2, 2)?
        } else {
            a
        };
        let sum = tape.add(r, shortcut)?;
        bn_on_tape(tape, &format!("{}.bn", self.name), sum, &self.bn)
    }
}

impl<T: Real> LayerState<T> for LcrLayer<T> {
    fn visit_state(&self, f: &mut StateVisitor<'_, T>) {
        let w = &self.conv.latent_weights;
        f(
            &format!("{}.conv.weight", self.name),
            StateKind::Param,
            &tensor_dims(w),
            w.data(),
        );
        self.rprelu.visit(&format!("{}.rprelu", self.name), f);
        visit_bn(&format!("{}.bn", self.name), &self.bn, f);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, StateKind, &mut [T])) {
        f(
            &format!("{}.conv.weight", self.name),
            StateKind::Param,
            self.conv.latent_weights.data_mut(),
        );
        self.rprelu.visit_mut(&format!("{}.rprelu", self.name), f);
        visit_bn_mut(&format!("{}.bn", self.name), &mut self.bn, f);
    }

    fn visit_batch_norms(&mut self, f: &mut dyn FnMut(&str, &mut BatchNormParams<T>)) {
        f(&format!("{}.bn", self.name), &mut self.bn);
    }

    fn visit_binary_convs(&mut self, f: &mut dyn FnMut(&mut BinaryConv2dParams<T>)) {
        if self.binarized {
            f(&mut self.conv);
        }
    }
}

/// `BN(RPReLU(bconv(a)) + a)` with `a = preact(x)`.
pub fn lcr_forward<T: Real>(
    x: &Tensor<T>,
    layer: &LcrLayer<T>,
    preact: &Preact<T>,
) -> Result<Tensor<T>> {
    run_inference(x, |t, v| {
        let a = preact.on_tape(t, "preact", v)?;
        layer.on_tape(t, a)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::hardtanh_forward;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn scalar_rprelu(o: f64, g: f64, z: f64, b: f64) -> f64 {
        let p = RPReLUParams {
            gamma: vec![g],
            zeta: vec![z],
            beta: vec![b],
        };
        let x = Tensor::from_vec(Shape::vector(1, 1), vec![o]).unwrap();
        rprelu_forward(&x, &p).unwrap().data()[0]
    }

    #[test]
    fn rprelu_hand_values() {
        assert_eq!(scalar_rprelu(2.0, 1.0, 0.5, 0.25), 1.5);
        assert_eq!(scalar_rprelu(0.0, 1.0, 0.5, 0.25), 0.25);
        assert_eq!(scalar_rprelu(-3.0, 0.0, 0.0, 1.0), -3.0);
    }

    #[test]
    fn rprelu_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 2, 2));
        assert!(rprelu_forward(&x, &RPReLUParams::new(2)).is_err());
    }

    #[test]
    fn lcr_with_zero_weights_is_rprelu_zero_plus_hardtanh() {
        let layer =
            LcrLayer::from_weights("l", Tensor::<f64>::zeros(Shape::new(2, 2, 3, 3)), 1).unwrap();
        let x = Tensor::random_uniform(Shape::new(1, 2, 4, 4), -2.0, 2.0, &mut rng());
        let out = lcr_forward(&x, &layer, &Preact::Hardtanh).unwrap();
        let eps_scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        let expected = hardtanh_forward(&x).map(|v| v * eps_scale);
        assert!(out.max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn lcr_shortcut_matters() {
        let layer = LcrLayer::<f64>::new("l", 3, 1, &mut rng()).unwrap();
        let x = Tensor::random_uniform(Shape::new(2, 3, 5, 5), -2.0, 2.0, &mut rng());
        let with = lcr_forward(&x, &layer, &Preact::Hardtanh).unwrap();
        let without = run_inference(&x, |t, v| {
            let a = t.hardtanh(v);
            let o = binary_conv_on_tape(t, "w", a, &layer.conv)?;
            let r = layer.rprelu.on_tape(t, "r", o)?;
            bn_on_tape(t, "bn", r, &layer.bn)
        })
        .unwrap();
        assert_eq!(with.shape(), x.shape());
        assert!(with.max_abs_diff(&without).unwrap() > 1e-3);
    }

    #[test]
    fn relu_preact_saturates_signs_on_nonnegative_probe() {
        let probe = Tensor::<f32>::random_uniform(Shape::new(1, 4, 6, 6), 0.0, 3.0, &mut rng());
        let relu = Preact::<f32>::Relu.sign_probe(&probe).unwrap();
        assert!(relu.data().iter().all(|&v| v == 1.0));
    }
}
