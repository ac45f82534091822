use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Shape;

/// Output width of the toy regression head unless a config says otherwise.
pub const DEFAULT_HEAD_OUTPUTS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreactKind {
    #[default]
    Hardtanh,
    Relu,
    Prelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    BaseLcr,
    DownScale,
    FusionUp,
    FusionDown,
    DownSample,
}

impl ModuleKind {
    pub fn short_name(self) -> &'static str {
        match self {
            ModuleKind::BaseLcr => "BaseLCR",
            ModuleKind::DownScale => "DScR",
            ModuleKind::FusionUp => "FUR",
            ModuleKind::FusionDown => "FDR",
            ModuleKind::DownSample => "DSaR",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BlockResidualMode {
    #[default]
    #[serde(rename = "none")]
    None,
    #[serde(rename = "fp1x1")]
    FullPrecision1x1,
    #[serde(rename = "bin1x1")]
    Binarized1x1,
}

/// One residual module: its kind and channel/stride geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleSpec {
    pub kind: ModuleKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl ModuleSpec {
    pub fn new(kind: ModuleKind, in_channels: usize) -> Self {
        Self::with_branches(kind, in_channels, 2)
    }

    /// A Down Sample module with `k` parallel branches (`k` in {2, 4}); other
    /// kinds ignore `k`.
    pub fn with_branches(kind: ModuleKind, in_channels: usize, k: usize) -> Self {
        let (out_channels, stride) = match kind {
            ModuleKind::BaseLcr => (in_channels, 1),
            ModuleKind::DownScale => (in_channels, 2),
            ModuleKind::FusionUp => (2 * in_channels, 1),
            ModuleKind::FusionDown => (in_channels / 2, 1),
            ModuleKind::DownSample => (k * in_channels, 2),
        };
        ModuleSpec {
            kind,
            in_channels,
            out_channels,
            stride,
        }
    }

    /// Number of LCR branches the module holds.
    pub fn branches(&self) -> usize {
        match self.kind {
            ModuleKind::BaseLcr | ModuleKind::DownScale => 1,
            ModuleKind::FusionUp | ModuleKind::FusionDown => 2,
            ModuleKind::DownSample => self.out_channels / self.in_channels.max(1),
        }
    }

    /// Channels seen by each branch's convolution.
    pub fn branch_channels(&self) -> usize {
        match self.kind {
            ModuleKind::FusionDown => self.in_channels / 2,
            _ => self.in_channels,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let ModuleSpec {
            kind,
            in_channels: c_in,
            out_channels: c_out,
            stride,
        } = *self;
        if c_in == 0 || c_out == 0 {
            return Err("channel counts must be >= 1".into());
        }
        let ok = match kind {
            ModuleKind::BaseLcr => c_out == c_in && stride == 1,
            ModuleKind::DownScale => c_out == c_in && stride == 2,
            ModuleKind::FusionUp => c_out == 2 * c_in && stride == 1,
            ModuleKind::FusionDown => c_in % 2 == 0 && c_out == c_in / 2 && stride == 1,
            ModuleKind::DownSample => (c_out == 2 * c_in || c_out == 4 * c_in) && stride == 2,
        };
        if ok {
            return Ok(());
        }
        let rule = match kind {
            ModuleKind::BaseLcr => "out = in, stride 1",
            ModuleKind::DownScale => "out = in, stride 2",
            ModuleKind::FusionUp => "out = 2 * in, stride 1",
            ModuleKind::FusionDown => "in even, out = in / 2, stride 1",
            ModuleKind::DownSample => "out = 2 * in or 4 * in, stride 2",
        };
        Err(format!(
            "{} requires {rule}; got in {c_in}, out {c_out}, stride {stride}",
            kind.short_name()
        ))
    }

    /// Output shape for `input`, or a description of why it does not chain.
    pub fn output_shape(&self, input: Shape) -> std::result::Result<Shape, String> {
        self.validate()?;
        if input.channels != self.in_channels {
            return Err(format!(
                "{} expects {} input channels, previous stage produces {}",
                self.kind.short_name(),
                self.in_channels,
                input.channels
            ));
        }
        let (mut h, mut w) = (input.height, input.width);
        if self.stride == 2 {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(format!(
                    "{} halves the spatial extent but input is {h}x{w}",
                    self.kind.short_name()
                ));
            }
            h /= 2;
            w /= 2;
        }
        Ok(Shape::new(input.batch, self.out_channels, h, w))
    }
}

/// One BiDRB: a leading module, optional further modules on the main path
/// and the block residual mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub kind: ModuleKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    #[serde(default)]
    pub block_residual: BlockResidualMode,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub followed_by: Vec<ModuleSpec>,
}

impl BlockSpec {
    pub fn new(first: ModuleSpec, block_residual: BlockResidualMode) -> Self {
        BlockSpec {
            kind: first.kind,
            in_channels: first.in_channels,
            out_channels: first.out_channels,
            stride: first.stride,
            block_residual,
            followed_by: Vec::new(),
        }
    }

    pub fn then(mut self, next: ModuleSpec) -> Self {
        self.followed_by.push(next);
        self
    }

    /// All main-path modules in order.
    pub fn modules(&self) -> Vec<ModuleSpec> {
        let first = ModuleSpec {
            kind: self.kind,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            stride: self.stride,
        };
        std::iter::once(first)
            .chain(self.followed_by.iter().copied())
            .collect()
    }

    /// Output shape of the main path.
    pub fn output_shape(&self, input: Shape) -> std::result::Result<Shape, String> {
        self.modules()
            .iter()
            .enumerate()
            .try_fold(input, |s, (i, m)| {
                m.output_shape(s).map_err(|e| format!("module {i}: {e}"))
            })
    }

    /// Product of module strides, the block residual's pooling window.
    pub fn total_stride(&self) -> usize {
        self.modules().iter().map(|m| m.stride).product()
    }
}

fn default_binarized() -> bool {
    true
}

fn is_true(v: &bool) -> bool {
    *v
}

fn default_head_outputs() -> usize {
    DEFAULT_HEAD_OUTPUTS
}

/// Declarative description of a whole network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// `[channels, height, width]` of one sample.
    pub input_shape: [usize; 3],
    #[serde(default)]
    pub preact: PreactKind,
    pub blocks: Vec<BlockSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_head_outputs")]
    pub head_outputs: usize,
    /// `false` runs every LCR convolution in full precision.
    #[serde(default = "default_binarized", skip_serializing_if = "is_true")]
    pub binarized: bool,
}

impl NetworkConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: NetworkConfig = serde_json::from_str(text)
            .map_err(|e| Error::config(None, format!("malformed config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Shape of a batch of `batch` inputs.
    pub fn input(&self, batch: usize) -> Result<Shape> {
        let [c, h, w] = self.input_shape;
        Shape::try_new(batch, c, h, w).map_err(|e| Error::config(None, format!("input_shape: {e}")))
    }

    /// Checks that every block chains onto the previous one; returns the
    /// per-sample output shape of the last block.
    pub fn validate(&self) -> Result<Shape> {
        if self.head_outputs == 0 {
            return Err(Error::config(None, "head_outputs must be >= 1"));
        }
        let mut shape = self.input(1)?;
        for (i, block) in self.blocks.iter().enumerate() {
            shape = block
                .output_shape(shape)
                .map_err(|e| Error::config(Some(i), e))?;
        }
        Ok(shape)
    }

    pub fn with_preact(mut self, preact: PreactKind) -> Self {
        self.preact = preact;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Named template configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Two shape-preserving blocks.
    BaseLcr,
    /// Every module kind once, fp 1x1 block residuals.
    FullBidrb,
    /// Four fixed module slots (DScR, FUR, FDR, DSaR); the first `n` are
    /// enabled, the rest fall back to BaseLCR.
    Table4aStep(usize),
}

impl Preset {
    pub const NAMES: [&'static str; 7] = [
        "base-lcr",
        "full-bidrb",
        "table4a-step-0",
        "table4a-step-1",
        "table4a-step-2",
        "table4a-step-3",
        "table4a-step-4",
    ];

    pub fn config(self) -> NetworkConfig {
        use BlockResidualMode::FullPrecision1x1 as Fp;
        use ModuleKind::*;
        let blocks = match self {
            Preset::BaseLcr => vec![
                BlockSpec::new(ModuleSpec::new(BaseLcr, 4), Fp),
                BlockSpec::new(ModuleSpec::new(BaseLcr, 4), Fp),
            ],
            Preset::FullBidrb => vec![
                BlockSpec::new(ModuleSpec::with_branches(DownSample, 3, 4), Fp)
                    .then(ModuleSpec::new(BaseLcr, 12)),
                BlockSpec::new(ModuleSpec::new(FusionDown, 12), Fp)
                    .then(ModuleSpec::new(FusionUp, 6)),
                BlockSpec::new(ModuleSpec::new(DownScale, 12), Fp)
                    .then(ModuleSpec::new(BaseLcr, 12)),
            ],
            Preset::Table4aStep(n) => {
                let slots = [DownScale, FusionUp, FusionDown, DownSample];
                let mut c = 4;
                let mut modules = Vec::new();
                for (i, kind) in slots.into_iter().enumerate() {
                    let m = ModuleSpec::new(if i < n { kind } else { BaseLcr }, c);
                    c = m.out_channels;
                    modules.push(m);
                }
                vec![
                    BlockSpec::new(modules[0], Fp).then(modules[1]),
                    BlockSpec::new(modules[2], Fp).then(modules[3]),
                ]
            }
        };
        let input_shape = match self {
            Preset::FullBidrb => [3, 32, 32],
            _ => [4, 16, 16],
        };
        NetworkConfig {
            input_shape,
            preact: PreactKind::Hardtanh,
            blocks,
            seed: 7,
            head_outputs: DEFAULT_HEAD_OUTPUTS,
            binarized: true,
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base-lcr" => Ok(Preset::BaseLcr),
            "full-bidrb" => Ok(Preset::FullBidrb),
            _ => s
                .strip_prefix("table4a-step-")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n <= 4)
                .map(Preset::Table4aStep)
                .ok_or_else(|| {
                    Error::config(
                        None,
                        format!(
                            "unknown preset {s:?}; expected one of {}",
                            Preset::NAMES.join(", ")
                        ),
                    )
                }),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Preset::BaseLcr => f.write_str("base-lcr"),
            Preset::FullBidrb => f.write_str("full-bidrb"),
            Preset::Table4aStep(n) => write!(f, "table4a-step-{n}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in Preset::NAMES {
            let p: Preset = name.parse().unwrap();
            assert_eq!(p.to_string(), name);
            p.config()
                .validate()
                .unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        assert!("table4a-step-5".parse::<Preset>().is_err());
    }

    #[test]
    fn full_bidrb_output_shape() {
        assert_eq!(
            Preset::FullBidrb.config().validate().unwrap(),
            Shape::new(1, 12, 8, 8)
        );
    }

    #[test]
    fn json_round_trip() {
        let cfg = Preset::FullBidrb.config();
        let back = NetworkConfig::from_json_str(&cfg.to_json_pretty()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn spec_style_json_parses() {
        let text = r#"{
            "input_shape": [4, 8, 8],
            "preact": "relu",
            "blocks": [
                {"kind": "down_sample", "in_channels": 4, "out_channels": 8, "stride": 2, "block_residual": "bin1x1"},
                {"kind": "base_lcr", "in_channels": 8, "out_channels": 8, "stride": 1, "block_residual": "none"}
            ],
            "seed": 3
        }"#;
        let cfg = NetworkConfig::from_json_str(text).unwrap();
        assert_eq!(cfg.preact, PreactKind::Relu);
        assert_eq!(
            cfg.blocks[0].block_residual,
            BlockResidualMode::Binarized1x1
        );
        assert_eq!(cfg.head_outputs, DEFAULT_HEAD_OUTPUTS);
    }

    #[test]
    fn chain_error_names_block() {
        let mut cfg = Preset::BaseLcr.config();
        cfg.blocks[1].in_channels = 5;
        cfg.blocks[1].out_channels = 5;
        match cfg.validate() {
            Err(Error::Config { block: Some(1), .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_location() {
        let err = NetworkConfig::from_json_str("{\n  \"input_shape\": [3, 8],\n}").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = NetworkConfig::from_json_str(r#"{"input_shape":[1,2,2],"blocks":[],"bogus":1}"#)
            .unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn odd_extent_rejected_for_strided_module() {
        let m = ModuleSpec::new(ModuleKind::DownScale, 2);
        assert!(m.output_shape(Shape::new(1, 2, 5, 4)).is_err());
        let m = ModuleSpec::new(ModuleKind::FusionDown, 3);
        assert!(m.validate().is_err());
    }
}
