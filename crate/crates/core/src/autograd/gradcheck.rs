//! Central finite-difference checks of the tape's backward rules.
//!
//! Checks run in `f64` with `Sign` evaluated by its smooth surrogate
//! ([`SignMode::Smooth`](super::SignMode)), so that the straight-through
//! gradient is the true derivative of the forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::Parameterized;
use super::{Tape, TapeConfig, Var};
use crate::error::Result;
use crate::ops::BatchNormParams;
use crate::tensor::{Shape, Tensor};

/// Relative tolerance for analytic vs numeric gradients.
pub const REL_TOL: f64 = 1e-3;
/// Absolute floor: differences below this always pass.
pub const ABS_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, ABS_FLOOR / REL_TOL)`. A value `<= REL_TOL` means
/// the pair agrees to `REL_TOL` relative or `ABS_FLOOR` absolute.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(ABS_FLOOR / REL_TOL);
    (analytic - numeric).abs() / scale
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub rule: String,
    pub checked: usize,
    pub worst_relative: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst_relative <= REL_TOL
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// At most this many evenly spaced entries are probed per parameter.
    pub max_per_param: usize,
    pub config: TapeConfig,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-6,
            max_per_param: 48,
            config: TapeConfig::gradcheck(),
        }
    }
}

/// Named free tensors, for checking a single rule in isolation.
#[derive(Debug, Clone, Default)]
pub struct LeafSet {
    pub leaves: Vec<(String, Tensor<f64>)>,
}

impl LeafSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, t: Tensor<f64>) -> Self {
        self.leaves.push((name.to_string(), t));
        self
    }

    /// Registers every leaf on `tape`, in insertion order.
    pub fn register(&self, tape: &mut Tape<f64>) -> Vec<Var> {
        self.leaves
            .iter()
            .map(|(n, t)| tape.param(n.clone(), t.clone()))
            .collect()
    }
}

impl Parameterized<f64> for LeafSet {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (n, t) in &self.leaves {
            f(n, t.data());
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (n, t) in &mut self.leaves {
            f(n, t.data_mut());
        }
    }
}

fn set_entry<M: Parameterized<f64> + ?Sized>(model: &mut M, name: &str, index: usize, value: f64) {
    model.visit_params_mut(&mut |n, p| {
        if n == name {
            p[index] = value;
        }
    });
}

/// Compares the backward pass of `loss` against central differences for
/// every parameter of `model`.
pub fn check_model<M, F>(
    rule: &str,
    model: &mut M,
    loss: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    M: Parameterized<f64> + ?Sized,
    F: Fn(&M, &mut Tape<f64>) -> Result<Var>,
{
    let eval = |m: &M| -> Result<f64> {
        let mut tape = Tape::new(opts.config);
        let l = loss(m, &mut tape)?;
        tape.scalar(l)
    };
    let mut tape = Tape::new(opts.config);
    let l = loss(model, &mut tape)?;
    let grads = tape.backward(l)?;

    let mut entries: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |n, p| entries.push((n.to_string(), p.to_vec())));

    let mut report = GradCheckReport {
        rule: rule.to_string(),
        checked: 0,
        worst_relative: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (name, values) in entries {
        let analytic = grads.param(&name).map(|g| g.data().to_vec());
        let stride = values.len().div_ceil(opts.max_per_param).max(1);
        for i in (0..values.len()).step_by(stride) {
            let orig = values[i];
            set_entry(model, &name, i, orig + opts.step);
            let up = eval(model)?;
            set_entry(model, &name, i, orig - opts.step);
            let down = eval(model)?;
            set_entry(model, &name, i, orig);
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic.as_ref().map_or(0.0, |g| g[i]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.worst_relative || report.checked == 1 {
                report.worst_relative = err;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::random_uniform(shape, lo, hi, rng)
}

/// Checks one rule: `leaves` are the differentiable operands, `forward` maps
/// their vars to the output, and the loss is the mean L1 distance to a random
/// target.
fn check_rule<F>(
    rule: &str,
    leaves: LeafSet,
    config: TapeConfig,
    rng: &mut ChaCha8Rng,
    forward: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut probe = Tape::new(config);
    let vars = leaves.register(&mut probe);
    let out = forward(&mut probe, &vars)?;
    let target = uniform(probe.shape(out), -1.0, 1.0, rng);
    let mut leaves = leaves;
    check_model(
        rule,
        &mut leaves,
        |m, tape| {
            let vars = m.register(tape);
            let out = forward(tape, &vars)?;
            tape.l1_loss(out, &target)
        },
        GradCheckOptions {
            config,
            ..GradCheckOptions::default()
        },
    )
}

/// Finite-difference reports for every backward rule on the tape, on small
/// random operands drawn from `seed`.
pub fn rule_reports(seed: u64) -> Result<Vec<GradCheckReport>> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let smooth = TapeConfig::gradcheck();
    let x4 = Shape::new(2, 3, 5, 4);
    let vec3 = Shape::vector(1, 3);
    let mut reports = Vec::new();

    let x = uniform(x4, -1.5, 1.5, rng);
    reports.push(check_rule(
        "sign_ste",
        LeafSet::new().with("x", x.clone()),
        smooth,
        rng,
        |t, v| Ok(t.sign(v[0])),
    )?);
    reports.push(check_rule(
        "hardtanh",
        LeafSet::new().with("x", x.clone()),
        smooth,
        rng,
        |t, v| Ok(t.hardtanh(v[0])),
    )?);
    reports.push(check_rule(
        "relu",
        LeafSet::new().with("x", x.clone()),
        smooth,
        rng,
        |t, v| Ok(t.relu(v[0])),
    )?);
    let slope = uniform(vec3, 0.05, 0.5, rng);
    reports.push(check_rule(
        "prelu",
        LeafSet::new().with("x", x.clone()).with("slope", slope),
        smooth,
        rng,
        |t, v| t.prelu(v[0], v[1]),
    )?);
    let leaves = LeafSet::new()
        .with("x", x.clone())
        .with("gamma", uniform(vec3, -0.5, 0.5, rng))
        .with("zeta", uniform(vec3, -0.5, 0.5, rng))
        .with("beta", uniform(vec3, 0.1, 0.9, rng));
    reports.push(check_rule("rprelu", leaves, smooth, rng, |t, v| {
        t.rprelu(v[0], v[1], v[2], v[3])
    })?);

    let mut stats = BatchNormParams::<f64>::identity(3);
    stats.running_mean = vec![0.1, -0.2, 0.3];
    stats.running_var = vec![0.5, 1.5, 2.0];
    let bn_leaves = LeafSet::new()
        .with("x", x.clone())
        .with("scale", uniform(vec3, 0.5, 1.5, rng))
        .with("shift", uniform(vec3, -0.5, 0.5, rng));
    let st = stats.clone();
    reports.push(check_rule(
        "batch_norm_inference",
        bn_leaves.clone(),
        smooth,
        rng,
        move |t, v| t.batch_norm("bn", v[0], v[1], v[2], &st),
    )?);
    let training = TapeConfig {
        training: true,
        ..smooth
    };
    reports.push(check_rule(
        "batch_norm_training",
        bn_leaves,
        training,
        rng,
        move |t, v| t.batch_norm("bn", v[0], v[1], v[2], &stats),
    )?);

    let w = uniform(Shape::new(4, 3, 3, 3), -0.9, 0.9, rng);
    reports.push(check_rule(
        "conv2d",
        LeafSet::new().with("x", x.clone()).with("w", w.clone()),
        smooth,
        rng,
        |t, v| t.conv2d(v[0], v[1], 2, 1),
    )?);
    reports.push(check_rule(
        "binary_conv2d",
        LeafSet::new().with("x", x.clone()).with("w", w.clone()),
        smooth,
        rng,
        |t, v| t.binary_conv2d(v[0], v[1], 1, 1, None),
    )?);
    let detached = TapeConfig {
        detach_alpha: true,
        ..smooth
    };
    let frozen = crate::binarize::channel_scales(&w);
    reports.push(check_rule(
        "binary_conv2d_frozen_alpha",
        LeafSet::new().with("x", x.clone()).with("w", w.clone()),
        detached,
        rng,
        move |t, v| t.binary_conv2d(v[0], v[1], 2, 1, Some(&frozen)),
    )?);

    let small = uniform(Shape::new(2, 3, 3, 2), -1.2, 1.2, rng);
    let dw = uniform(Shape::new(2, 3, 2, 2), -0.9, 0.9, rng);
    reports.push(check_rule(
        "deconv2d",
        LeafSet::new()
            .with("x", small.clone())
            .with("w", dw.clone()),
        smooth,
        rng,
        |t, v| t.deconv2d(v[0], v[1], 2, 0),
    )?);
    reports.push(check_rule(
        "binary_deconv2d",
        LeafSet::new().with("x", small.clone()).with("w", dw),
        smooth,
        rng,
        |t, v| t.binary_deconv2d(v[0], v[1], 2, 0, None),
    )?);

    let even = uniform(Shape::new(2, 3, 4, 4), -1.5, 1.5, rng);
    reports.push(check_rule(
        "avg_pool",
        LeafSet::new().with("x", even.clone()),
        smooth,
        rng,
        |t, v| t.avg_pool(v[0], 2, 2),
    )?);
    reports.push(check_rule(
        "global_avg_pool",
        LeafSet::new().with("x", even.clone()),
        smooth,
        rng,
        |t, v| Ok(t.global_avg_pool(v[0])),
    )?);
    let other = uniform(Shape::new(2, 2, 4, 4), -1.5, 1.5, rng);
    reports.push(check_rule(
        "concat",
        LeafSet::new()
            .with("a", even.clone())
            .with("b", other.clone()),
        smooth,
        rng,
        |t, v| t.concat(&[v[0], v[1]]),
    )?);
    reports.push(check_rule(
        "split",
        LeafSet::new().with("x", even.clone()),
        smooth,
        rng,
        |t, v| {
            let (a, b) = t.split_channels(v[0], 1)?;
            let b2 = t.scale(b, 0.5);
            let a2 = t.concat(&[a, a])?;
            t.add(a2, b2)
        },
    )?);

    let feats = uniform(Shape::vector(3, 5), -1.0, 1.0, rng);
    reports.push(check_rule(
        "linear",
        LeafSet::new()
            .with("x", feats.clone())
            .with("w", uniform(Shape::new(4, 5, 1, 1), -0.9, 0.9, rng))
            .with("b", uniform(Shape::vector(1, 4), -0.5, 0.5, rng)),
        smooth,
        rng,
        |t, v| t.linear(v[0], v[1], Some(v[2])),
    )?);
    reports.push(check_rule(
        "exp_reshape",
        LeafSet::new().with("x", even.clone()),
        smooth,
        rng,
        |t, v| {
            let f = t.flatten(v[0])?;
            Ok(t.exp(f))
        },
    )?);
    reports.push(check_rule(
        "gather",
        LeafSet::new().with("x", feats),
        smooth,
        rng,
        |t, v| t.gather(v[0], &[4, 0, 0, 2]),
    )?);
    let heat = uniform(Shape::new(2, 4, 3, 5), -2.0, 2.0, rng);
    reports.push(check_rule(
        "soft_argmax",
        LeafSet::new().with("x", heat),
        smooth,
        rng,
        |t, v| t.soft_argmax(v[0], 2),
    )?);
    Ok(reports)
}

/// Largest gradient magnitude reaching a saturated input (`|x| >= 1`)
/// through a binarized convolution, RPReLU and BatchNorm, using the hard
/// forward sign. The straight-through rule makes this exactly zero.
pub fn ste_saturation_probe(seed: u64) -> Result<f64> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut x = uniform(Shape::new(2, 3, 5, 5), 1.0, 3.0, rng);
    let flip = uniform(x.shape(), -1.0, 1.0, rng);
    for (v, f) in x.data_mut().iter_mut().zip(flip.data()) {
        if *f < 0.0 {
            *v = -*v;
        }
    }
    let mut tape = Tape::<f64>::new(TapeConfig::inference());
    let input = tape.param("x", x);
    let w = tape.param("w", uniform(Shape::new(3, 3, 3, 3), -0.9, 0.9, rng));
    let o = tape.binary_conv2d(input, w, 1, 1, None)?;
    let gamma = tape.param_vec("gamma", &[0.1, -0.1, 0.0]);
    let zeta = tape.param_vec("zeta", &[0.0; 3]);
    let beta = tape.param_vec("beta", &[0.25; 3]);
    let r = tape.rprelu(o, gamma, zeta, beta)?;
    let scale = tape.param_vec("scale", &[1.0; 3]);
    let shift = tape.param_vec("shift", &[0.0; 3]);
    let y = tape.batch_norm("bn", r, scale, shift, &BatchNormParams::identity(3))?;
    let target = uniform(tape.shape(y), -1.0, 1.0, rng);
    let loss = tape.l1_loss(y, &target)?;
    let grads = tape.backward(loss)?;
    let gx = grads.param("x").expect("input is a named leaf");
    let gw = grads.param("w").expect("weights are a named leaf");
    assert!(gw.abs_sum() > 0.0, "probe must exercise the weight path");
    Ok(gx.data().iter().fold(0.0, |m, v| m.max(v.abs())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-6, 0.0) <= REL_TOL);
        assert!(relative_error(1.0, 1.0005) <= REL_TOL);
        assert!(relative_error(1.0, 1.01) > REL_TOL);
    }

    #[test]
    fn every_rule_matches_finite_differences() {
        for r in rule_reports(5).unwrap() {
            assert!(r.passed(), "{r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn saturated_inputs_get_zero_gradient() {
        assert_eq!(ste_saturation_probe(1).unwrap(), 0.0);
    }

    #[test]
    fn exp_rule_passes() {
        let x = Tensor::from_vec(Shape::vector(1, 3), vec![0.1, -0.4, 0.7]).unwrap();
        let t = Tensor::zeros(Shape::vector(1, 3));
        let mut leaves = LeafSet::new().with("x", x);
        let ok = check_model(
            "exp",
            &mut leaves,
            |m, tape| {
                let v = m.register(tape);
                let e = tape.exp(v[0]);
                tape.l1_loss(e, &t)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(ok.passed(), "{ok:?}");
        assert_eq!(ok.checked, 3);
    }
}
