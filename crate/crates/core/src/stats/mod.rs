//! Parameter and operation accounting for BiDRN configurations.
//!
//! One multiply-accumulate counts as one operation. Binarized layers report
//! their latent (full-precision sized) counts in separate buckets; the
//! effective totals divide binarized parameters by 32 and binarized
//! operations by 64.

mod bench;

pub use bench::{
    bench_conv, footprint_bytes, BenchReport, BenchRow, BenchShape, BenchSizes, BENCH_HEADER,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BlockResidualMode, ModuleKind, NetworkConfig, PreactKind};
use crate::ops::{conv_out_extent, deconv_out_extent};
use crate::tensor::Shape;

pub const PARAM_COMPRESSION: u64 = 32;
pub const OP_SPEEDUP: u64 = 64;

/// Shape-level description of one layer, enough to count it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerDescriptor {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        binarized: bool,
    },
    /// Transposed convolution; operations use the output extent.
    Deconv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        binarized: bool,
    },
    Linear {
        inputs: usize,
        outputs: usize,
        bias: bool,
        binarized: bool,
    },
    /// Affine scale and shift per channel.
    BatchNorm {
        channels: usize,
    },
    RPrelu {
        channels: usize,
    },
    Prelu {
        channels: usize,
    },
    /// Hardtanh, ReLU, sign, concatenation, addition: free and shape-preserving.
    Elementwise,
    AvgPool {
        window: usize,
    },
    GlobalAvgPool,
}

impl LayerDescriptor {
    pub fn is_binarized(&self) -> bool {
        match *self {
            LayerDescriptor::Conv2d { binarized, .. }
            | LayerDescriptor::Deconv2d { binarized, .. }
            | LayerDescriptor::Linear { binarized, .. } => binarized,
            _ => false,
        }
    }

    /// The same layer with its binarized flag replaced (no-op for layers
    /// that cannot be binarized).
    pub fn with_binarized(self, flag: bool) -> Self {
        use LayerDescriptor::*;
        match self {
            Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                binarized: flag,
            },
            Deconv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => Deconv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                binarized: flag,
            },
            Linear {
                inputs,
                outputs,
                bias,
                ..
            } => Linear {
                inputs,
                outputs,
                bias,
                binarized: flag,
            },
            other => other,
        }
    }
}

/// Counts for one layer applied to one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerCount {
    pub params: u64,
    pub ops: u64,
    pub binarized: bool,
    pub output: Shape,
}

fn invalid(detail: String) -> Error {
    Error::config(None, detail)
}

fn require_channels(what: &str, expected: usize, input: Shape) -> Result<()> {
    if expected == 0 || input.channels != expected {
        return Err(invalid(format!(
            "{what} expects {expected} input channels, got {input}"
        )));
    }
    Ok(())
}

/// Params and ops of `desc` on a single sample shaped like `input` (the batch
/// extent is ignored).
///
/// ```
/// use bidrn_core::stats::{count_layer, LayerDescriptor};
/// use bidrn_core::Shape;
///
/// let conv = LayerDescriptor::Conv2d {
///     in_channels: 64, out_channels: 64, kernel: 3, stride: 1, padding: 1, binarized: false,
/// };
/// let c = count_layer(&conv, Shape::new(1, 64, 56, 56)).unwrap();
/// assert_eq!(c.params, 36_864);
/// assert_eq!(c.ops, 115_605_504);
/// ```
pub fn count_layer(desc: &LayerDescriptor, input: Shape) -> Result<LayerCount> {
    let input = Shape { batch: 1, ..input };
    let elements = input.sample_len() as u64;
    let binarized = desc.is_binarized();
    let (params, ops, output) = match *desc {
        LayerDescriptor::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            require_channels("conv2d", in_channels, input)?;
            if out_channels == 0 {
                return Err(invalid("conv2d needs at least one output channel".into()));
            }
            let (h, w) = match (
                conv_out_extent(input.height, kernel, stride, padding),
                conv_out_extent(input.width, kernel, stride, padding),
            ) {
                (Some(h), Some(w)) => (h, w),
                _ => {
                    return Err(invalid(format!(
                        "conv2d K={kernel} s={stride} p={padding} does not fit {input}"
                    )))
                }
            };
            let params = (out_channels * in_channels * kernel * kernel) as u64;
            (
                params,
                params * (h * w) as u64,
                Shape::new(1, out_channels, h, w),
            )
        }
        LayerDescriptor::Deconv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            require_channels("deconv2d", in_channels, input)?;
            if out_channels == 0 || input.height == 0 || input.width == 0 {
                return Err(invalid("deconv2d needs nonempty input and output".into()));
            }
            let (h, w) = match (
                deconv_out_extent(input.height, kernel, stride, padding),
                deconv_out_extent(input.width, kernel, stride, padding),
            ) {
                (Some(h), Some(w)) => (h, w),
                _ => {
                    return Err(invalid(format!(
                        "deconv2d K={kernel} s={stride} p={padding} invalid for {input}"
                    )))
                }
            };
            let params = (out_channels * in_channels * kernel * kernel) as u64;
            (
                params,
                params * (h * w) as u64,
                Shape::new(1, out_channels, h, w),
            )
        }
        LayerDescriptor::Linear {
            inputs,
            outputs,
            bias,
            ..
        } => {
            if inputs == 0 || outputs == 0 || input.sample_len() != inputs {
                return Err(invalid(format!(
                    "linear {inputs}->{outputs} cannot take {input}"
                )));
            }
            let weights = (inputs * outputs) as u64;
            let params = weights + if bias { outputs as u64 } else { 0 };
            (params, weights, Shape::vector(1, outputs))
        }
        LayerDescriptor::BatchNorm { channels } => {
            require_channels("batch_norm", channels, input)?;
            (2 * channels as u64, 2 * elements, input)
        }
        LayerDescriptor::RPrelu { channels } => {
            require_channels("rprelu", channels, input)?;
            (3 * channels as u64, 2 * elements, input)
        }
        LayerDescriptor::Prelu { channels } => {
            require_channels("prelu", channels, input)?;
            (channels as u64, elements, input)
        }
        LayerDescriptor::Elementwise => (0, 0, input),
        LayerDescriptor::AvgPool { window } => {
            if window == 0
                || !input.height.is_multiple_of(window)
                || !input.width.is_multiple_of(window)
            {
                return Err(invalid(format!(
                    "avg_pool window {window} does not tile {input}"
                )));
            }
            (
                0,
                0,
                Shape::new(
                    1,
                    input.channels,
                    input.height / window,
                    input.width / window,
                ),
            )
        }
        LayerDescriptor::GlobalAvgPool => (0, 0, Shape::vector(1, input.channels)),
    };
    Ok(LayerCount {
        params,
        ops,
        binarized,
        output,
    })
}

/// One counted layer of a network walk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerEntry {
    pub name: String,
    pub descriptor: LayerDescriptor,
    pub input: Shape,
    pub count: LayerCount,
}

struct Walker {
    entries: Vec<LayerEntry>,
}

impl Walker {
    fn push(&mut self, name: String, descriptor: LayerDescriptor, input: Shape) -> Result<Shape> {
        let count = count_layer(&descriptor, input).map_err(|e| match e {
            Error::Config { detail, .. } => invalid(format!("{name}: {detail}")),
            other => other,
        })?;
        let out = count.output;
        self.entries.push(LayerEntry {
            name,
            descriptor,
            input,
            count,
        });
        Ok(out)
    }
}

/// Every counted layer of the network described by `cfg`, in forward order.
/// Names match the parameter prefixes of the built network.
pub fn layer_table(cfg: &NetworkConfig) -> Result<Vec<LayerEntry>> {
    cfg.validate()?;
    let mut walk = Walker {
        entries: Vec::new(),
    };
    let mut x = cfg.input(1)?;
    for (bi, block) in cfg.blocks.iter().enumerate() {
        let block_name = format!("blocks.{bi}");
        let block_in = x;
        for (mi, m) in block.modules().iter().enumerate() {
            let name = format!("{block_name}.m{mi}");
            let preact = match cfg.preact {
                PreactKind::Prelu => LayerDescriptor::Prelu {
                    channels: m.in_channels,
                },
                PreactKind::Hardtanh | PreactKind::Relu => LayerDescriptor::Elementwise,
            };
            let a = walk.push(format!("{name}.preact"), preact, x)?;
            let bc = m.branch_channels();
            let branch_in = Shape { channels: bc, ..a };
            let mut branch_out = branch_in;
            for b in 0..m.branches() {
                let lcr = format!("{name}.b{b}");
                let conv = LayerDescriptor::Conv2d {
                    in_channels: bc,
                    out_channels: bc,
                    kernel: 3,
                    stride: m.stride,
                    padding: 1,
                    binarized: cfg.binarized,
                };
                let y = walk.push(format!("{lcr}.conv"), conv, branch_in)?;
                let y = walk.push(
                    format!("{lcr}.rprelu"),
                    LayerDescriptor::RPrelu { channels: bc },
                    y,
                )?;
                if m.stride > 1 {
                    walk.push(
                        format!("{lcr}.shortcut"),
                        LayerDescriptor::AvgPool { window: m.stride },
                        branch_in,
                    )?;
                }
                branch_out = walk.push(
                    format!("{lcr}.bn"),
                    LayerDescriptor::BatchNorm { channels: bc },
                    y,
                )?;
            }
            let merged = Shape {
                channels: m.out_channels,
                ..branch_out
            };
            x = match m.kind {
                ModuleKind::BaseLcr | ModuleKind::DownScale => merged,
                _ => walk.push(
                    format!("{name}.bn"),
                    LayerDescriptor::BatchNorm {
                        channels: m.out_channels,
                    },
                    merged,
                )?,
            };
        }
        if block.block_residual != BlockResidualMode::None {
            let br = format!("{block_name}.br");
            let pool = block.total_stride();
            let pooled = if pool > 1 {
                walk.push(
                    format!("{br}.pool"),
                    LayerDescriptor::AvgPool { window: pool },
                    block_in,
                )?
            } else {
                block_in
            };
            let conv = LayerDescriptor::Conv2d {
                in_channels: block.in_channels,
                out_channels: x.channels,
                kernel: 1,
                stride: 1,
                padding: 0,
                binarized: block.block_residual == BlockResidualMode::Binarized1x1,
            };
            walk.push(br, conv, pooled)?;
        }
    }
    let pooled = walk.push("head.pool".into(), LayerDescriptor::GlobalAvgPool, x)?;
    let head = LayerDescriptor::Linear {
        inputs: pooled.channels,
        outputs: cfg.head_outputs,
        bias: true,
        binarized: false,
    };
    walk.push("head".into(), head, pooled)?;
    Ok(walk.entries)
}

/// Totals under the 1/32 parameter and 1/64 operation convention.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelStats {
    pub params_fp: u64,
    pub params_bin_latent: u64,
    pub ops_fp: u64,
    pub ops_bin: u64,
    /// `params_fp + params_bin_latent / 32`, in millions.
    #[serde(rename = "params_effective_M")]
    pub params_effective_m: f64,
    /// `ops_fp + ops_bin / 64`, in billions.
    #[serde(rename = "ops_effective_G")]
    pub ops_effective_g: f64,
}

pub fn effective_params(params_fp: u64, params_bin_latent: u64) -> f64 {
    params_fp as f64 + params_bin_latent as f64 / PARAM_COMPRESSION as f64
}

pub fn effective_ops(ops_fp: u64, ops_bin: u64) -> f64 {
    ops_fp as f64 + ops_bin as f64 / OP_SPEEDUP as f64
}

impl ModelStats {
    pub fn from_buckets(params_fp: u64, params_bin_latent: u64, ops_fp: u64, ops_bin: u64) -> Self {
        ModelStats {
            params_fp,
            params_bin_latent,
            ops_fp,
            ops_bin,
            params_effective_m: effective_params(params_fp, params_bin_latent) / 1e6,
            ops_effective_g: effective_ops(ops_fp, ops_bin) / 1e9,
        }
    }

    pub fn from_counts<'a>(counts: impl IntoIterator<Item = &'a LayerCount>) -> Self {
        let (mut pf, mut pb, mut of, mut ob) = (0, 0, 0, 0);
        for c in counts {
            if c.binarized {
                pb += c.params;
                ob += c.ops;
            } else {
                pf += c.params;
                of += c.ops;
            }
        }
        Self::from_buckets(pf, pb, of, ob)
    }

    pub fn total_params(&self) -> u64 {
        self.params_fp + self.params_bin_latent
    }

    pub fn total_ops(&self) -> u64 {
        self.ops_fp + self.ops_bin
    }

    /// Pretty JSON followed by a newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("stats serialize");
        s.push('\n');
        s
    }
}

pub fn model_stats(cfg: &NetworkConfig) -> Result<ModelStats> {
    let table = layer_table(cfg)?;
    Ok(ModelStats::from_counts(table.iter().map(|e| &e.count)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Parameterized;
    use crate::layers::{build_network, Preset};

    fn conv(binarized: bool) -> LayerDescriptor {
        LayerDescriptor::Conv2d {
            in_channels: 64,
            out_channels: 64,
            kernel: 3,
            stride: 1,
            padding: 1,
            binarized,
        }
    }

    #[test]
    fn conv_spot_checks() {
        let s = Shape::new(1, 64, 56, 56);
        let fp = count_layer(&conv(false), s).unwrap();
        assert_eq!(fp.params, 36_864);
        assert_eq!(fp.ops, 115_605_504);
        let bin = count_layer(&conv(true), s).unwrap();
        assert_eq!((bin.params, bin.ops), (fp.params, fp.ops));
        let st = ModelStats::from_counts([&bin]);
        assert_eq!(st.params_effective_m * 1e6, 1152.0);
        assert_eq!(st.ops_effective_g * 1e9, 115_605_504.0 / 64.0);
    }

    #[test]
    fn empty_is_zero() {
        let st = ModelStats::from_counts([]);
        assert_eq!(st, ModelStats::default());
    }

    #[test]
    fn small_layers() {
        let s = Shape::new(3, 8, 4, 4);
        let bn = count_layer(&LayerDescriptor::BatchNorm { channels: 8 }, s).unwrap();
        assert_eq!((bn.params, bn.ops), (16, 256));
        let rp = count_layer(&LayerDescriptor::RPrelu { channels: 8 }, s).unwrap();
        assert_eq!((rp.params, rp.ops), (24, 256));
        let lin = LayerDescriptor::Linear {
            inputs: 8,
            outputs: 5,
            bias: true,
            binarized: false,
        };
        let l = count_layer(&lin, Shape::vector(1, 8)).unwrap();
        assert_eq!((l.params, l.ops), (45, 40));
        let de = LayerDescriptor::Deconv2d {
            in_channels: 8,
            out_channels: 2,
            kernel: 2,
            stride: 2,
            padding: 0,
            binarized: true,
        };
        let d = count_layer(&de, s).unwrap();
        assert_eq!(d.output, Shape::new(1, 2, 8, 8));
        assert_eq!((d.params, d.ops), (64, 64 * 64));
    }

    #[test]
    fn invalid_descriptors_are_config_errors() {
        let s = Shape::new(1, 4, 5, 5);
        for d in [
            conv(false),
            LayerDescriptor::BatchNorm { channels: 3 },
            LayerDescriptor::AvgPool { window: 2 },
            LayerDescriptor::Linear {
                inputs: 4,
                outputs: 1,
                bias: false,
                binarized: false,
            },
        ] {
            assert!(
                matches!(count_layer(&d, s), Err(Error::Config { .. })),
                "{d:?}"
            );
        }
    }

    #[test]
    fn table_matches_built_parameters() {
        for preset in [Preset::BaseLcr, Preset::FullBidrb, Preset::Table4aStep(4)] {
            for preact in [PreactKind::Hardtanh, PreactKind::Prelu] {
                let cfg = preset.config().with_preact(preact);
                let st = model_stats(&cfg).unwrap();
                let net = build_network::<f32>(&cfg).unwrap();
                assert_eq!(
                    st.total_params() as usize,
                    net.param_count(),
                    "{preset} {preact:?}"
                );
            }
        }
    }

    #[test]
    fn toggling_binarization_moves_counts_between_buckets() {
        let s = Shape::new(1, 64, 8, 8);
        let a = count_layer(&conv(false), s).unwrap();
        let b = count_layer(&conv(false).with_binarized(true), s).unwrap();
        assert_eq!((a.params, a.ops, a.output), (b.params, b.ops, b.output));
        assert!(b.binarized && !a.binarized);
    }

    #[test]
    fn json_keys() {
        let text = ModelStats::from_buckets(1, 2, 3, 4).to_json();
        let keys = [
            "params_fp",
            "params_bin_latent",
            "ops_fp",
            "ops_bin",
            "params_effective_M",
            "ops_effective_G",
        ];
        let pos: Vec<usize> = keys
            .iter()
            .map(|k| text.find(&format!("\"{k}\"")).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{text}");
        let back: ModelStats = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ModelStats::from_buckets(1, 2, 3, 4));
    }
}
