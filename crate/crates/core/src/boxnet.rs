//! Toy binarized box head: joint heatmaps from the backbone feature, a
//! deconvolution stack whose soft-argmax gives box centers, and a pooled
//! fully connected path that regresses log box sizes.
//!
//! Every layer is binarized except the final linear layer of the size path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::tape::soft_argmax_values;
use crate::autograd::{Parameterized, Tape, TapeConfig, Var};
use crate::binarize::BinaryConv2dParams;
use crate::error::{Error, Result};
use crate::ops::l1_loss;
use crate::tensor::{Real, Shape, Tensor};

/// Face, left hand, right hand.
pub const BOXES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxNetConfig {
    pub feature_channels: usize,
    pub joints: usize,
    pub depth: usize,
    /// Channels after the first deconvolution.
    pub deconv_channels: usize,
    pub hidden: usize,
    /// Binarized (`true`) or full-precision convolution and deconvolution
    /// layers. Linear layers keep their modes either way.
    pub binarized: bool,
    pub seed: u64,
}

impl Default for BoxNetConfig {
    fn default() -> Self {
        BoxNetConfig {
            feature_channels: 8,
            joints: 4,
            depth: 1,
            deconv_channels: 8,
            hidden: 16,
            binarized: true,
            seed: 0,
        }
    }
}

/// A convolution-like layer that is either binarized or full precision.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxLayer<T: Real = f32> {
    pub name: String,
    pub params: BinaryConv2dParams<T>,
    pub binarized: bool,
    pub transposed: bool,
}

impl<T: Real> BoxLayer<T> {
    fn new(
        name: &str,
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        binarized: bool,
        transposed: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let shape = Shape::new(out_channels, in_channels, kernel, kernel);
        let bound = (6.0 / shape.sample_len() as f64).sqrt();
        let w = Tensor::random_uniform(shape, -bound, bound, rng);
        Ok(BoxLayer {
            name: name.to_string(),
            params: BinaryConv2dParams::new(w, stride, padding)?,
            binarized,
            transposed,
        })
    }

    fn on_tape(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let p = &self.params;
        let w = tape.param(format!("{}.weight", self.name), p.latent_weights.clone());
        let frozen = p.is_frozen().then(|| p.alpha.clone());
        match (self.binarized, self.transposed) {
            (true, false) => tape.binary_conv2d(x, w, p.stride, p.padding, frozen.as_deref()),
            (true, true) => tape.binary_deconv2d(x, w, p.stride, p.padding, frozen.as_deref()),
            (false, false) => tape.conv2d(x, w, p.stride, p.padding),
            (false, true) => tape.deconv2d(x, w, p.stride, p.padding),
        }
    }
}

/// Full-precision linear layer with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct FpLinear<T: Real = f32> {
    pub name: String,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxNetParams<T: Real = f32> {
    pub config: BoxNetConfig,
    /// 3x3, feature channels to `joints * depth`.
    pub heatmap: BoxLayer<T>,
    /// Two stride-2 2x2 deconvolutions ending in one map per box.
    pub deconvs: Vec<BoxLayer<T>>,
    /// Binarized 1x1 layers on the pooled feature.
    pub linears: Vec<BoxLayer<T>>,
    pub out: FpLinear<T>,
}

/// Raw heatmap logits, `n x (joints * depth) x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap<T: Real = f32> {
    pub joints: usize,
    pub depth: usize,
    pub values: Tensor<T>,
}

impl<T: Real> Heatmap<T> {
    pub fn height(&self) -> usize {
        self.values.shape().height
    }

    pub fn width(&self) -> usize {
        self.values.shape().width
    }

    /// Softmax over each joint's `depth x H x W` slice.
    pub fn normalized(&self) -> Tensor<T> {
        let (_, probs) = soft_argmax_values(&self.values, self.depth);
        Tensor::from_vec(self.values.shape(), probs).expect("same element count")
    }
}

/// Box centers and sizes, each `n x (2 * BOXES) x 1 x 1`, ordered
/// `(x, y)` / `(w, h)` per box.
#[derive(Debug, Clone, PartialEq)]
pub struct Boxes<T: Real = f32> {
    pub centers: Tensor<T>,
    pub sizes: Tensor<T>,
}

impl<T: Real> BoxNetParams<T> {
    pub fn new(cfg: BoxNetConfig) -> Result<Self> {
        if cfg.feature_channels == 0
            || cfg.joints == 0
            || cfg.depth == 0
            || cfg.deconv_channels == 0
            || cfg.hidden == 0
        {
            return Err(Error::config(None, "box head extents must all be >= 1"));
        }
        let rng = &mut ChaCha8Rng::seed_from_u64(cfg.seed);
        let jd = cfg.joints * cfg.depth;
        let cat = cfg.feature_channels + jd;
        let b = cfg.binarized;
        let heatmap = BoxLayer::new(
            "box.heatmap",
            jd,
            cfg.feature_channels,
            3,
            1,
            1,
            b,
            false,
            rng,
        )?;
        let deconvs = vec![
            BoxLayer::new(
                "box.deconv0",
                cfg.deconv_channels,
                cat,
                2,
                2,
                0,
                b,
                true,
                rng,
            )?,
            BoxLayer::new(
                "box.deconv1",
                BOXES * cfg.depth,
                cfg.deconv_channels,
                2,
                2,
                0,
                b,
                true,
                rng,
            )?,
        ];
        let linears = vec![
            BoxLayer::new("box.fc0", cfg.hidden, cat, 1, 1, 0, true, false, rng)?,
            BoxLayer::new("box.fc1", cfg.hidden, cfg.hidden, 1, 1, 0, true, false, rng)?,
        ];
        let bound = 1.0 / (cfg.hidden as f64).sqrt();
        let out = FpLinear {
            name: "box.out".into(),
            weight: Tensor::random_uniform(
                Shape::new(2 * BOXES, cfg.hidden, 1, 1),
                -bound,
                bound,
                rng,
            ),
            bias: vec![T::zero(); 2 * BOXES],
        };
        Ok(BoxNetParams {
            config: cfg,
            heatmap,
            deconvs,
            linears,
            out,
        })
    }

    /// `true` for each binarized linear layer, `false` for full-precision ones.
    pub fn linear_modes(&self) -> Vec<bool> {
        self.linears
            .iter()
            .map(|l| l.binarized)
            .chain(std::iter::once(false))
            .collect()
    }

    pub fn full_precision_linears(&self) -> usize {
        self.linear_modes().iter().filter(|b| !**b).count()
    }

    fn check_feature(&self, s: Shape) -> Result<()> {
        if s.channels != self.config.feature_channels {
            return Err(Error::dim(
                "box_head",
                format!(
                    "expects {} feature channels, got {s}",
                    self.config.feature_channels
                ),
            ));
        }
        Ok(())
    }

    /// Heatmap logits and their concatenation with the feature.
    pub fn heatmaps_on_tape(&self, tape: &mut Tape<T>, feature: Var) -> Result<(Var, Var)> {
        self.check_feature(tape.shape(feature))?;
        let h = self.heatmap.on_tape(tape, feature)?;
        let cat = tape.concat(&[feature, h])?;
        Ok((h, cat))
    }

    pub fn on_tape(&self, tape: &mut Tape<T>, feature: Var) -> Result<(Var, Var)> {
        let (_, cat) = self.heatmaps_on_tape(tape, feature)?;
        let up = self
            .deconvs
            .iter()
            .try_fold(cat, |v, d| d.on_tape(tape, v))?;
        let coords = tape.soft_argmax(up, self.config.depth)?;
        let xy: Vec<usize> = (0..BOXES).flat_map(|b| [3 * b, 3 * b + 1]).collect();
        let centers = tape.gather(coords, &xy)?;

        let pooled = tape.global_avg_pool(cat);
        let hidden = self
            .linears
            .iter()
            .try_fold(pooled, |v, l| l.on_tape(tape, v))?;
        let flat = tape.flatten(hidden)?;
        let w = tape.param(format!("{}.weight", self.out.name), self.out.weight.clone());
        let b = tape.param_vec(format!("{}.bias", self.out.name), &self.out.bias);
        let log_size = tape.linear(flat, w, Some(b))?;
        Ok((centers, tape.exp(log_size)))
    }

    pub fn upsampled_extent(&self, feature: Shape) -> (usize, usize) {
        (feature.height * 4, feature.width * 4)
    }
}

pub fn predict_heatmaps<T: Real>(feature: &Tensor<T>, p: &BoxNetParams<T>) -> Result<Heatmap<T>> {
    let mut tape = Tape::new(TapeConfig::inference());
    let f = tape.input(feature.clone());
    let (h, _) = p.heatmaps_on_tape(&mut tape, f)?;
    Ok(Heatmap {
        joints: p.config.joints,
        depth: p.config.depth,
        values: tape.value(h).clone(),
    })
}

/// Expected `(x, y, z)` cell index per joint, `n x (3 * joints) x 1 x 1`.
pub fn soft_argmax<T: Real>(h: &Heatmap<T>) -> Tensor<T> {
    soft_argmax_values(&h.values, h.depth).0
}

pub fn box_head_forward<T: Real>(feature: &Tensor<T>, p: &BoxNetParams<T>) -> Result<Boxes<T>> {
    let mut tape = Tape::new(TapeConfig::inference());
    let f = tape.input(feature.clone());
    let (c, s) = p.on_tape(&mut tape, f)?;
    Ok(Boxes {
        centers: tape.value(c).clone(),
        sizes: tape.value(s).clone(),
    })
}

/// Mean L1 over every center and size component.
pub fn box_loss<T: Real>(pred: &Boxes<T>, target: &Boxes<T>) -> Result<T> {
    if pred.centers.shape() != target.centers.shape() || pred.sizes.shape() != target.sizes.shape()
    {
        return Err(Error::dim(
            "box_loss",
            format!(
                "prediction has {} centers / {} sizes, target {} / {}",
                pred.centers.shape(),
                pred.sizes.shape(),
                target.centers.shape(),
                target.sizes.shape()
            ),
        ));
    }
    let n_c = T::from_usize(pred.centers.numel());
    let n_s = T::from_usize(pred.sizes.numel());
    let total =
        l1_loss(&pred.centers, &target.centers)? * n_c + l1_loss(&pred.sizes, &target.sizes)? * n_s;
    Ok(total / (n_c + n_s))
}

impl<T: Real> Parameterized<T> for BoxNetParams<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &[T])) {
        for l in std::iter::once(&self.heatmap)
            .chain(&self.deconvs)
            .chain(&self.linears)
        {
            f(
                &format!("{}.weight", l.name),
                l.params.latent_weights.data(),
            );
        }
        f(&format!("{}.weight", self.out.name), self.out.weight.data());
        f(&format!("{}.bias", self.out.name), &self.out.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        for l in std::iter::once(&mut self.heatmap)
            .chain(self.deconvs.iter_mut())
            .chain(self.linears.iter_mut())
        {
            f(
                &format!("{}.weight", l.name),
                l.params.latent_weights.data_mut(),
            );
        }
        f(
            &format!("{}.weight", self.out.name),
            self.out.weight.data_mut(),
        );
        f(&format!("{}.bias", self.out.name), &mut self.out.bias);
    }

    fn after_update(&mut self) {
        for l in std::iter::once(&mut self.heatmap)
            .chain(self.deconvs.iter_mut())
            .chain(self.linears.iter_mut())
        {
            if !l.params.is_frozen() {
                l.params.refresh_alpha();
            }
        }
    }
}

/// Finite-difference report for the box loss on a tiny head.
pub fn box_gradcheck(seed: u64) -> Result<crate::autograd::gradcheck::GradCheckReport> {
    use crate::autograd::gradcheck::{check_model, GradCheckOptions};
    let cfg = BoxNetConfig {
        feature_channels: 4,
        deconv_channels: 4,
        hidden: 6,
        seed,
        ..BoxNetConfig::default()
    };
    let mut p = BoxNetParams::<f64>::new(cfg)?;
    let rng = &mut ChaCha8Rng::seed_from_u64(seed ^ 0xB0C5);
    let feature = Tensor::random_uniform(Shape::new(2, 4, 3, 3), -1.5, 1.5, rng);
    let target_c = Tensor::random_uniform(Shape::vector(2, 2 * BOXES), 0.0, 11.0, rng);
    let target_s = Tensor::random_uniform(Shape::vector(2, 2 * BOXES), 0.5, 2.0, rng);
    check_model(
        "box_head",
        &mut p,
        |m, tape| {
            let f = tape.input(feature.clone());
            let (c, s) = m.on_tape(tape, f)?;
            let both = tape.concat(&[c, s])?;
            let target = crate::ops::concat_channels(&target_c, &target_s)?;
            tape.l1_loss(both, &target)
        },
        GradCheckOptions::default(),
    )
}
