//! Randomized self-verification suites: packed kernels against brute-force
//! oracles, packing round-trips, scale L1 preservation and module shape laws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::binarize::{
    binary_conv2d, binary_conv2d_accumulators, pack_signs, sign, sign_forward, xnor_popcount_dot,
    xnor_popcount_dot_unmasked, BinaryConv2dParams, PackedRow,
};
use crate::error::Result;
use crate::layers::{ModuleKind, ModuleSpec, PreactKind, ResidualModule};
use crate::ops::{conv2d_padded, conv_out_extent, im2col, ConvGeometry};
use crate::tensor::{Shape, Tensor};

/// Deliberate defects used to prove the suites can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Drop the tail mask from the packed dot product.
    UnmaskedTail,
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub seed: u64,
    pub cases: usize,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            cases: 200,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub suite: &'static str,
    pub cases: usize,
    pub passed: usize,
    /// Inputs of the first failing case.
    pub first_failure: Option<Value>,
}

impl SuiteResult {
    pub fn ok(&self) -> bool {
        self.passed == self.cases
    }
}

pub const SUITES: [&str; 4] = [
    "kernel_oracle",
    "pack_roundtrip",
    "l1_preservation",
    "shape_laws",
];

/// Runs every suite with `opts.cases` cases each. Each suite draws from its
/// own stream derived from `opts.seed`.
pub fn run_verify(opts: &VerifyOptions) -> Vec<SuiteResult> {
    SUITES
        .iter()
        .enumerate()
        .map(|(i, &name)| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                opts.seed.wrapping_mul(0x9E37_79B9).wrapping_add(i as u64),
            );
            let case: &dyn Fn(&mut ChaCha8Rng) -> std::result::Result<(), Value> = match name {
                "kernel_oracle" => &|r| kernel_case(r, opts.fault),
                "pack_roundtrip" => &pack_case,
                "l1_preservation" => &l1_case,
                _ => &shape_case,
            };
            run_suite(name, opts.cases, &mut rng, case)
        })
        .collect()
}

fn run_suite(
    suite: &'static str,
    cases: usize,
    rng: &mut ChaCha8Rng,
    case: &dyn Fn(&mut ChaCha8Rng) -> std::result::Result<(), Value>,
) -> SuiteResult {
    let mut passed = 0;
    let mut first_failure = None;
    for _ in 0..cases {
        match case(rng) {
            Ok(()) => passed += 1,
            Err(v) => {
                first_failure.get_or_insert(v);
            }
        }
    }
    SuiteResult {
        suite,
        cases,
        passed,
        first_failure,
    }
}

/// Random convolution geometry (batch, input, weights, stride, padding) whose
/// kernel always fits.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ConvCase {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvCase {
    pub fn random(rng: &mut impl Rng) -> Self {
        loop {
            let c = ConvCase {
                batch: rng.gen_range(1..3),
                in_channels: rng.gen_range(1..12),
                out_channels: rng.gen_range(1..6),
                kernel: [1, 2, 3, 5][rng.gen_range(0..4)],
                height: rng.gen_range(1..10),
                width: rng.gen_range(1..10),
                stride: rng.gen_range(1..4),
                padding: rng.gen_range(0..3),
            };
            if conv_out_extent(c.height, c.kernel, c.stride, c.padding).is_some()
                && conv_out_extent(c.width, c.kernel, c.stride, c.padding).is_some()
            {
                return c;
            }
        }
    }

    pub fn input_shape(&self) -> Shape {
        Shape::new(self.batch, self.in_channels, self.height, self.width)
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.in_channels,
            self.kernel,
            self.kernel,
        )
    }
}

/// Direct `±1` convolution in integers; padding cells count as `+1`.
pub fn brute_force_sign_conv(
    x: &Tensor<f32>,
    w: &Tensor<f32>,
    stride: usize,
    padding: usize,
) -> Result<Vec<i64>> {
    let geo = ConvGeometry::new(x.shape(), w.shape(), stride, padding)?;
    let k = geo.kernel;
    let mut out = Vec::with_capacity(geo.output_shape().numel());
    for n in 0..x.shape().batch {
        for o in 0..geo.out_channels {
            for oy in 0..geo.out_height {
                for ox in 0..geo.out_width {
                    let mut acc = 0i64;
                    for c in 0..geo.input.channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let xs = match geo.source(oy, ox, ky, kx) {
                                    Some((y, xx)) => sign(x.at(n, c, y, xx)),
                                    None => 1.0,
                                };
                                acc += (xs * sign(w.at(o, c, ky, kx))) as i64;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Ok(out)
}

fn dot_with(fault: Option<Fault>, a: PackedRow<'_>, w: PackedRow<'_>) -> i64 {
    match fault {
        None => xnor_popcount_dot(a, w).expect("rows of equal length"),
        Some(Fault::UnmaskedTail) => xnor_popcount_dot_unmasked(a, w),
    }
}

/// One kernel case: the production accumulators and a row-by-row packed dot
/// both equal the brute-force oracle exactly, and the scaled output matches
/// the float oracle on signs within `1e-5` relative.
pub fn check_conv_case(
    case: &ConvCase,
    x: &Tensor<f32>,
    w: &Tensor<f32>,
    fault: Option<Fault>,
) -> std::result::Result<(), String> {
    let params =
        BinaryConv2dParams::new(w.clone(), case.stride, case.padding).map_err(|e| e.to_string())?;
    let oracle =
        brute_force_sign_conv(x, w, case.stride, case.padding).map_err(|e| e.to_string())?;
    let acc = binary_conv2d_accumulators(x, &params).map_err(|e| e.to_string())?;
    if acc.values != oracle {
        return Err("kernel accumulators differ from the brute-force oracle".into());
    }

    let geo = ConvGeometry::new(x.shape(), w.shape(), case.stride, case.padding)
        .map_err(|e| e.to_string())?;
    let plen = geo.patch_len();
    let packed_w = pack_signs(w.data(), case.out_channels, plen).map_err(|e| e.to_string())?;
    let positions = geo.positions();
    for n in 0..case.batch {
        let cols = pack_signs(&im2col(&sign_forward(x), &geo, n, 1.0), positions, plen)
            .map_err(|e| e.to_string())?;
        for o in 0..case.out_channels {
            for p in 0..positions {
                let got = dot_with(fault, cols.row(p), packed_w.row(o));
                let want = oracle[(n * case.out_channels + o) * positions + p];
                if got != want {
                    return Err(format!(
                        "packed dot {got} != oracle {want} at n={n} o={o} pos={p}"
                    ));
                }
            }
        }
    }

    let out = binary_conv2d(x, &params).map_err(|e| e.to_string())?;
    let float_oracle = conv2d_padded(
        &sign_forward(&x.cast::<f64>()),
        &params.binarized_weights().cast::<f64>(),
        case.stride,
        case.padding,
        1.0,
    )
    .map_err(|e| e.to_string())?;
    for (a, b) in out.data().iter().zip(float_oracle.data()) {
        if (*a as f64 - b).abs() > 1e-5 * b.abs().max(1.0) {
            return Err(format!("scaled output {a} vs float oracle {b}"));
        }
    }
    Ok(())
}

fn kernel_case(rng: &mut ChaCha8Rng, fault: Option<Fault>) -> std::result::Result<(), Value> {
    let case = ConvCase::random(rng);
    let x = Tensor::<f32>::random_uniform(case.input_shape(), -1.0, 1.0, rng);
    let w = Tensor::<f32>::random_uniform(case.weight_shape(), -1.0, 1.0, rng);
    check_conv_case(&case, &x, &w, fault).map_err(|reason| {
        json!({
            "reason": reason,
            "case": case,
            "input": x.data(),
            "weights": w.data(),
        })
    })
}

fn pack_case(rng: &mut ChaCha8Rng) -> std::result::Result<(), Value> {
    let rows = rng.gen_range(1..5);
    let len = rng.gen_range(0..300);
    let data: Vec<f32> = (0..rows * len)
        .map(|_| {
            if rng.gen_bool(0.1) {
                0.0
            } else {
                rng.gen_range(-2.0..2.0)
            }
        })
        .collect();
    let fail =
        |reason: &str| json!({"reason": reason, "rows": rows, "valid_len": len, "data": data});
    let packed = pack_signs(&data, rows, len).map_err(|e| fail(&e.to_string()))?;
    let signs: Vec<f32> = data.iter().map(|&v| sign(v)).collect();
    if packed.unpack::<f32>() != signs {
        return Err(fail("unpack(pack(x)) != sign(x)"));
    }
    if !packed.tail_is_clean() {
        return Err(fail("bits beyond valid_len are set"));
    }
    if packed.words_per_row() != len.div_ceil(64) {
        return Err(fail("unexpected words per row"));
    }
    let repacked = pack_signs(&signs, rows, len).map_err(|e| fail(&e.to_string()))?;
    if repacked != packed {
        return Err(fail("packing signs is not idempotent"));
    }
    Ok(())
}

fn l1_case(rng: &mut ChaCha8Rng) -> std::result::Result<(), Value> {
    let c_out = rng.gen_range(1..6);
    let c_in = rng.gen_range(1..6);
    let k = [1, 3, 5][rng.gen_range(0..3)];
    let w = Tensor::<f32>::random_uniform(Shape::new(c_out, c_in, k, k), -3.0, 3.0, rng);
    let fail = |reason: String| json!({"reason": reason, "weights_shape": w.shape().dims(), "weights": w.data()});
    let params = BinaryConv2dParams::new(w.clone(), 1, 0).map_err(|e| fail(e.to_string()))?;
    let b = params.binarized_weights();
    let len = w.shape().sample_len();
    for o in 0..c_out {
        let orig: f64 = w.sample(o).iter().map(|v| v.abs() as f64).sum();
        let bin: f64 = b.sample(o).iter().map(|v| v.abs() as f64).sum();
        if (orig - bin).abs() > 1e-5 * orig.max(1.0) {
            return Err(fail(format!(
                "channel {o}: |W|_1 = {orig}, |alpha sign W|_1 = {bin}"
            )));
        }
        let a = params.alpha[o] as f64;
        if (a - orig / len as f64).abs() > 1e-6 * a.max(1.0) {
            return Err(fail(format!("channel {o}: alpha {a} is not the mean |w|")));
        }
    }
    Ok(())
}

/// Output shape a module of `kind` must produce.
pub fn expected_module_shape(spec: &ModuleSpec, input: Shape) -> Shape {
    let (h, w) = if spec.stride == 2 {
        (input.height / 2, input.width / 2)
    } else {
        (input.height, input.width)
    };
    let c = match spec.kind {
        ModuleKind::BaseLcr | ModuleKind::DownScale => input.channels,
        ModuleKind::FusionUp => 2 * input.channels,
        ModuleKind::FusionDown => input.channels / 2,
        ModuleKind::DownSample => spec.branches() * input.channels,
    };
    Shape::new(input.batch, c, h, w)
}

fn shape_case(rng: &mut ChaCha8Rng) -> std::result::Result<(), Value> {
    let kinds = [
        ModuleKind::BaseLcr,
        ModuleKind::DownScale,
        ModuleKind::FusionUp,
        ModuleKind::FusionDown,
        ModuleKind::DownSample,
    ];
    let kind = kinds[rng.gen_range(0..kinds.len())];
    let c = 2 * rng.gen_range(1..4);
    let spec = if kind == ModuleKind::DownSample {
        ModuleSpec::with_branches(kind, c, [2, 4][rng.gen_range(0..2)])
    } else {
        ModuleSpec::new(kind, c)
    };
    let preact = [PreactKind::Hardtanh, PreactKind::Relu, PreactKind::Prelu][rng.gen_range(0..3)];
    let input = Shape::new(
        rng.gen_range(1..3),
        c,
        2 * rng.gen_range(1..5),
        2 * rng.gen_range(1..5),
    );
    let fail = |reason: String| json!({"reason": reason, "spec": spec, "preact": preact, "input": input.dims()});
    let module =
        ResidualModule::<f32>::new("m", spec, preact, rng).map_err(|e| fail(e.to_string()))?;
    let x = Tensor::random_uniform(input, -1.5, 1.5, rng);
    let y = module.forward(&x).map_err(|e| fail(e.to_string()))?;
    let want = expected_module_shape(&spec, input);
    if y.shape() != want {
        return Err(fail(format!("output {} != expected {want}", y.shape())));
    }
    if spec.output_shape(input) != Ok(want) {
        return Err(fail("ModuleSpec::output_shape disagrees".into()));
    }
    if !y.is_finite() {
        return Err(fail("non-finite output".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_run_passes() {
        let r = run_verify(&VerifyOptions {
            seed: 1,
            cases: 40,
            fault: None,
        });
        assert_eq!(r.len(), 4);
        for s in &r {
            assert!(s.ok(), "{s:?}");
            assert_eq!(s.cases, 40);
        }
    }

    #[test]
    fn unmasked_tail_is_caught() {
        let r = run_verify(&VerifyOptions {
            seed: 1,
            cases: 40,
            fault: Some(Fault::UnmaskedTail),
        });
        let k = &r[0];
        assert!(!k.ok());
        assert!(k.first_failure.as_ref().unwrap()["case"].is_object());
        assert!(r[1..].iter().all(SuiteResult::ok));
    }

    #[test]
    fn same_seed_same_result() {
        let o = VerifyOptions {
            seed: 9,
            cases: 10,
            fault: Some(Fault::UnmaskedTail),
        };
        assert_eq!(run_verify(&o), run_verify(&o));
    }

    #[test]
    fn brute_force_hand_case() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![-0.5f32]).unwrap();
        let w = Tensor::from_vec(Shape::new(1, 1, 3, 3), vec![1.0f32; 9]).unwrap();
        assert_eq!(brute_force_sign_conv(&x, &w, 1, 1).unwrap(), vec![7]);
    }
}
