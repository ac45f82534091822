use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{
    BlockResidualMode, BlockSpec, ModuleKind, ModuleSpec, NetworkConfig, PreactKind,
};
use super::{build_network, LayerState, LcrLayer, Network, Preact, ResidualModule, StateKind};
use crate::autograd::gradcheck::{check_model, GradCheckOptions, GradCheckReport};
use crate::autograd::{Parameterized, Tape, Var};
use crate::error::Result;
use crate::tensor::{Shape, Tensor};

/// Three small blocks covering every module kind and both 1x1 block residuals.
pub fn gradcheck_network_config(seed: u64) -> NetworkConfig {
    use ModuleKind::*;
    NetworkConfig {
        input_shape: [2, 8, 8],
        preact: PreactKind::Hardtanh,
        blocks: vec![
            BlockSpec::new(
                ModuleSpec::new(DownSample, 2),
                BlockResidualMode::FullPrecision1x1,
            )
            .then(ModuleSpec::new(BaseLcr, 4)),
            BlockSpec::new(
                ModuleSpec::new(FusionDown, 4),
                BlockResidualMode::Binarized1x1,
            )
            .then(ModuleSpec::new(FusionUp, 2)),
            BlockSpec::new(
                ModuleSpec::new(DownScale, 4),
                BlockResidualMode::FullPrecision1x1,
            ),
        ],
        seed,
        head_outputs: 3,
        binarized: true,
    }
}

struct Single<L>(L);

impl<L: LayerState<f64>> Parameterized<f64> for Single<L> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.0.visit_state(&mut |n, k, _, d| {
            if k == StateKind::Param {
                f(n, d)
            }
        });
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.0.visit_state_mut(&mut |n, k, d| {
            if k == StateKind::Param {
                f(n, d)
            }
        });
    }
}

fn check_layer<M, F>(
    rule: &str,
    model: &mut M,
    x: &Tensor<f64>,
    rng: &mut ChaCha8Rng,
    forward: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    M: Parameterized<f64>,
    F: Fn(&M, &mut Tape<f64>, Var) -> Result<Var>,
{
    let mut probe = Tape::new(opts.config);
    let v = probe.input(x.clone());
    let out = forward(model, &mut probe, v)?;
    let target = Tensor::random_uniform(probe.shape(out), -1.0, 1.0, rng);
    check_model(
        rule,
        model,
        |m, tape| {
            let v = tape.input(x.clone());
            let out = forward(m, tape, v)?;
            tape.l1_loss(out, &target)
        },
        opts,
    )
}

/// Finite-difference reports for a lone LCR layer, each module kind and a
/// composed three-block network.
pub fn layer_reports(seed: u64) -> Result<Vec<GradCheckReport>> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions::default();
    let mut reports = Vec::new();

    let x = Tensor::random_uniform(Shape::new(2, 2, 4, 4), -1.5, 1.5, rng);
    let mut lcr = Single(LcrLayer::<f64>::new("lcr", 2, 1, rng)?);
    reports.push(check_layer(
        "lcr_layer",
        &mut lcr,
        &x,
        rng,
        |m, t, v| {
            let a = Preact::Hardtanh.on_tape(t, "preact", v)?;
            m.0.on_tape(t, a)
        },
        opts,
    )?);

    let x = Tensor::random_uniform(Shape::new(2, 4, 4, 4), -1.5, 1.5, rng);
    let kinds = [
        (ModuleKind::DownScale, PreactKind::Hardtanh),
        (ModuleKind::FusionUp, PreactKind::Hardtanh),
        (ModuleKind::FusionDown, PreactKind::Prelu),
        (ModuleKind::DownSample, PreactKind::Hardtanh),
    ];
    for (kind, preact) in kinds {
        let mut m = Single(ResidualModule::<f64>::new(
            "m",
            ModuleSpec::new(kind, 4),
            preact,
            rng,
        )?);
        let rule = format!("module_{}", kind.short_name().to_lowercase());
        reports.push(check_layer(
            &rule,
            &mut m,
            &x,
            rng,
            |m, t, v| m.0.on_tape(t, v),
            opts,
        )?);
    }

    let cfg = gradcheck_network_config(seed);
    let mut net: Network<f64> = build_network(&cfg)?;
    let x = Tensor::random_uniform(cfg.input(2)?, -1.5, 1.5, rng);
    let net_opts = GradCheckOptions {
        max_per_param: 16,
        ..opts
    };
    reports.push(check_layer(
        "bidrn_3_blocks",
        &mut net,
        &x,
        rng,
        |m, t, v| m.on_tape(t, v),
        net_opts,
    )?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layers_match_finite_differences() {
        let reports = layer_reports(11).unwrap();
        assert_eq!(reports.len(), 6);
        for r in reports {
            assert!(r.passed(), "{r:?}");
        }
    }
}
