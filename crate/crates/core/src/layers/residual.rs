use rand::Rng;

use super::config::{ModuleKind, ModuleSpec, PreactKind};
use super::{
    bn_on_tape, run_inference, visit_bn, visit_bn_mut, LayerState, LcrLayer, Preact, StateKind,
    StateVisitor,
};
use crate::autograd::{Tape, Var};
use crate::binarize::BinaryConv2dParams;
use crate::error::{Error, Result};
use crate::ops::BatchNormParams;
use crate::tensor::{Real, Tensor};

/// One residual module: a shared pre-activation followed by one or more LCR
/// branches, combined according to `spec.kind`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualModule<T: Real = f32> {
    pub name: String,
    pub spec: ModuleSpec,
    pub preact: Preact<T>,
    pub branches: Vec<LcrLayer<T>>,
    /// BatchNorm after the branches are combined (fusion and down-sample kinds).
    pub post_bn: Option<BatchNormParams<T>>,
}

impl<T: Real> ResidualModule<T> {
    pub fn new<R: Rng + ?Sized>(
        name: impl Into<String>,
        spec: ModuleSpec,
        preact: PreactKind,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate().map_err(|e| Error::config(None, e))?;
        let name = name.into();
        let branch_stride = spec.stride;
        let branches = (0..spec.branches())
            .map(|b| {
                LcrLayer::new(
                    format!("{name}.b{b}"),
                    spec.branch_channels(),
                    branch_stride,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_branches(
            name,
            spec,
            Preact::new(preact, spec.in_channels),
            branches,
        ))
    }

    pub fn from_branches(
        name: impl Into<String>,
        spec: ModuleSpec,
        preact: Preact<T>,
        branches: Vec<LcrLayer<T>>,
    ) -> Self {
        let post_bn = match spec.kind {
            ModuleKind::BaseLcr | ModuleKind::DownScale => None,
            _ => Some(BatchNormParams::identity(spec.out_channels)),
        };
        ResidualModule {
            name: name.into(),
            spec,
            preact,
            branches,
            post_bn,
        }
    }

    pub fn kind(&self) -> ModuleKind {
        self.spec.kind
    }

    fn post_bn_name(&self) -> String {
        format!("{}.bn", self.name)
    }

    pub fn on_tape(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.channels != self.spec.in_channels {
            return Err(Error::dim(
                "residual_module",
                format!(
                    "{} expects {} channels, input {s}",
                    self.name, self.spec.in_channels
                ),
            ));
        }
        let a = self
            .preact
            .on_tape(tape, &format!("{}.preact", self.name), x)?;
        let combined = match self.spec.kind {
            ModuleKind::BaseLcr | ModuleKind::DownScale => {
                return self.branches[0].on_tape(tape, a)
            }
            ModuleKind::FusionUp | ModuleKind::DownSample => {
                let outs = self
                    .branches
                    .iter()
                    .map(|b| b.on_tape(tape, a))
                    .collect::<Result<Vec<_>>>()?;
                tape.concat(&outs)?
            }
            ModuleKind::FusionDown => {
                if !s.channels.is_multiple_of(2) {
                    return Err(Error::dim(
                        "fusion_down_residual",
                        format!("{} needs an even channel count, input {s}", self.name),
                    ));
                }
                let (lo, hi) = tape.split_channels(a, s.channels / 2)?;
                let p = self.branches[0].on_tape(tape, lo)?;
                let q = self.branches[1].on_tape(tape, hi)?;
                tape.add(p, q)?
            }
        };
        let bn = self
            .post_bn
            .as_ref()
            .expect("combining kinds carry a post BatchNorm");
        bn_on_tape(tape, &self.post_bn_name(), combined, bn)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        run_inference(x, |t, v| self.on_tape(t, v))
    }
}

impl<T: Real> LayerState<T> for ResidualModule<T> {
    fn visit_state(&self, f: &mut StateVisitor<'_, T>) {
        if let Preact::Prelu { slope } = &self.preact {
            f(
                &format!("{}.preact.slope", self.name),
                StateKind::Param,
                &[slope.len()],
                slope,
            );
        }
        for b in &self.branches {
            b.visit_state(f);
        }
        if let Some(bn) = &self.post_bn {
            visit_bn(&self.post_bn_name(), bn, f);
        }
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, StateKind, &mut [T])) {
        let bn_name = self.post_bn_name();
        if let Preact::Prelu { slope } = &mut self.preact {
            f(
                &format!("{}.preact.slope", self.name),
                StateKind::Param,
                slope,
            );
        }
        for b in &mut self.branches {
            b.visit_state_mut(f);
        }
        if let Some(bn) = &mut self.post_bn {
            visit_bn_mut(&bn_name, bn, f);
        }
    }

    fn visit_batch_norms(&mut self, f: &mut dyn FnMut(&str, &mut BatchNormParams<T>)) {
        let bn_name = self.post_bn_name();
        for b in &mut self.branches {
            b.visit_batch_norms(f);
        }
        if let Some(bn) = &mut self.post_bn {
            f(&bn_name, bn);
        }
    }

    fn visit_binary_convs(&mut self, f: &mut dyn FnMut(&mut BinaryConv2dParams<T>)) {
        for b in &mut self.branches {
            b.visit_binary_convs(f);
        }
    }
}

fn expect_kind<T: Real>(
    m: &ResidualModule<T>,
    kinds: &[ModuleKind],
    op: &'static str,
) -> Result<()> {
    if kinds.contains(&m.kind()) {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "{op} called with a {} module",
            m.kind().short_name()
        )))
    }
}

/// `BN(RPReLU(bconv_s2(a)) + AvgPool(a))`, output `C x H/2 x W/2`.
pub fn down_scale_residual_forward<T: Real>(
    x: &Tensor<T>,
    m: &ResidualModule<T>,
) -> Result<Tensor<T>> {
    expect_kind(m, &[ModuleKind::DownScale], "down_scale_residual_forward")?;
    m.forward(x)
}

/// Two LCR branches on the same activation, concatenated to `2C`, then BN.
pub fn fusion_up_residual_forward<T: Real>(
    x: &Tensor<T>,
    m: &ResidualModule<T>,
) -> Result<Tensor<T>> {
    expect_kind(m, &[ModuleKind::FusionUp], "fusion_up_residual_forward")?;
    m.forward(x)
}

/// Channel halves through one LCR branch each, summed to `C/2`, then BN.
pub fn fusion_down_residual_forward<T: Real>(
    x: &Tensor<T>,
    m: &ResidualModule<T>,
) -> Result<Tensor<T>> {
    expect_kind(m, &[ModuleKind::FusionDown], "fusion_down_residual_forward")?;
    m.forward(x)
}

/// `k` strided LCR branches with pooled shortcuts, concatenated to `kC`, then BN.
pub fn down_sample_residual_forward<T: Real>(
    x: &Tensor<T>,
    m: &ResidualModule<T>,
) -> Result<Tensor<T>> {
    expect_kind(m, &[ModuleKind::DownSample], "down_sample_residual_forward")?;
    m.forward(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{avg_pool2d, hardtanh_forward, slice_channels, split_channels};
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn module(kind: ModuleKind, c: usize, seed: u64) -> ResidualModule<f64> {
        let spec = ModuleSpec::new(kind, c);
        ResidualModule::new(
            "m",
            spec,
            PreactKind::Hardtanh,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    /// Zero latent weights and identity RPReLU so every branch reduces to
    /// its shortcut.
    fn degenerate(mut m: ResidualModule<f64>) -> ResidualModule<f64> {
        for b in &mut m.branches {
            b.conv.latent_weights = Tensor::zeros(b.conv.latent_weights.shape());
            b.rprelu = super::super::RPReLUParams::identity(b.channels());
        }
        m
    }

    fn input(shape: Shape, seed: u64) -> Tensor<f64> {
        Tensor::random_uniform(shape, -2.0, 2.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn unscale(t: &Tensor<f64>, bn_layers: i32) -> Tensor<f64> {
        let k = (1.0f64 + 1e-5).sqrt().powi(bn_layers);
        t.map(|v| v * k)
    }

    #[test]
    fn shapes_follow_kind() {
        let x = input(Shape::new(2, 4, 8, 8), 1);
        let cases = [
            (ModuleKind::BaseLcr, Shape::new(2, 4, 8, 8)),
            (ModuleKind::DownScale, Shape::new(2, 4, 4, 4)),
            (ModuleKind::FusionUp, Shape::new(2, 8, 8, 8)),
            (ModuleKind::FusionDown, Shape::new(2, 2, 8, 8)),
            (ModuleKind::DownSample, Shape::new(2, 8, 4, 4)),
        ];
        for (kind, expected) in cases {
            assert_eq!(
                module(kind, 4, 2).forward(&x).unwrap().shape(),
                expected,
                "{kind:?}"
            );
        }
        let spec = ModuleSpec::with_branches(ModuleKind::DownSample, 4, 4);
        let m = ResidualModule::<f64>::new(
            "m",
            spec,
            PreactKind::Hardtanh,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(m.forward(&x).unwrap().shape(), Shape::new(2, 16, 4, 4));
    }

    #[test]
    fn down_scale_degenerate_is_pooled_hardtanh() {
        let x = input(Shape::new(1, 3, 4, 4), 2);
        let m = degenerate(module(ModuleKind::DownScale, 3, 3));
        let out = down_scale_residual_forward(&x, &m).unwrap();
        let expected = avg_pool2d(&hardtanh_forward(&x), 2, 2).unwrap();
        assert!(unscale(&out, 1).max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn down_scale_constant_shortcut() {
        let x = Tensor::full(Shape::new(1, 1, 4, 4), 0.4);
        let m = degenerate(module(ModuleKind::DownScale, 1, 3));
        let out = unscale(&m.forward(&x).unwrap(), 1);
        assert!(out.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn down_scale_rejects_odd_extent() {
        let x = input(Shape::new(1, 2, 5, 4), 2);
        assert!(module(ModuleKind::DownScale, 2, 3).forward(&x).is_err());
    }

    #[test]
    fn fusion_up_identical_branches_give_equal_halves() {
        let mut m = module(ModuleKind::FusionUp, 3, 4);
        m.branches[1].conv = m.branches[0].conv.clone();
        let x = input(Shape::new(2, 3, 5, 5), 5);
        let out = fusion_up_residual_forward(&x, &m).unwrap();
        let (a, b) = split_channels(&out, 3).unwrap();
        assert_eq!(a, b);
        let distinct = module(ModuleKind::FusionUp, 3, 4).forward(&x).unwrap();
        let (a, b) = split_channels(&distinct, 3).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() > 1e-3);
    }

    #[test]
    fn fusion_down_degenerate_sums_halves() {
        let x = input(Shape::new(2, 4, 3, 3), 6);
        let m = degenerate(module(ModuleKind::FusionDown, 4, 7));
        let out = fusion_down_residual_forward(&x, &m).unwrap();
        let h = hardtanh_forward(&x);
        let (h1, h2) = split_channels(&h, 2).unwrap();
        let expected = h1.add(&h2).unwrap();
        assert!(unscale(&out, 2).max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn fusion_down_swap_commutes() {
        let x = input(Shape::new(1, 4, 4, 4), 8);
        let m = module(ModuleKind::FusionDown, 4, 9);
        let mut swapped = m.clone();
        swapped.branches.swap(0, 1);
        let (lo, hi) = split_channels(&x, 2).unwrap();
        let xs = crate::ops::concat_channels(&hi, &lo).unwrap();
        let a = m.forward(&x).unwrap();
        let b = swapped.forward(&xs).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn down_sample_degenerate_halves_are_pooled_hardtanh() {
        let x = input(Shape::new(1, 2, 8, 8), 10);
        let m = degenerate(module(ModuleKind::DownSample, 2, 11));
        let out = unscale(&down_sample_residual_forward(&x, &m).unwrap(), 2);
        let expected = avg_pool2d(&hardtanh_forward(&x), 2, 2).unwrap();
        for k in 0..2 {
            let half = slice_channels(&out, 2 * k, 2).unwrap();
            assert!(half.max_abs_diff(&expected).unwrap() < 1e-12);
        }
    }

    #[test]
    fn wrapper_checks_kind() {
        let x = input(Shape::new(1, 2, 4, 4), 1);
        assert!(fusion_up_residual_forward(&x, &module(ModuleKind::BaseLcr, 2, 1)).is_err());
    }
}
