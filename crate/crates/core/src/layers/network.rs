use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{read_checkpoint, write_checkpoint, CheckpointRecord};
use super::config::NetworkConfig;
use super::{tensor_dims, Bidrb, LayerState, StateKind, StateVisitor};
use crate::autograd::{BnObservation, Parameterized, Tape, TapeConfig, Var};
use crate::binarize::BinaryConv2dParams;
use crate::error::{Error, Result};
use crate::ops::BatchNormParams;
use crate::tensor::{Real, Shape, Tensor};

/// Global average pool followed by a full-precision linear layer with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<T: Real = f32> {
    /// `outputs x inputs x 1 x 1`.
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Head<T> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Head {
            weight: Tensor::random_uniform(Shape::new(outputs, inputs, 1, 1), -bound, bound, rng),
            bias: vec![T::zero(); outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape().channels
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape().batch
    }

    pub fn on_tape(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let pooled = tape.global_avg_pool(x);
        let flat = tape.flatten(pooled)?;
        let w = tape.param("head.weight", self.weight.clone());
        let b = tape.param_vec("head.bias", &self.bias);
        tape.linear(flat, w, Some(b))
    }
}

/// A built network: blocks in order, then the head.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Real = f32> {
    pub config: NetworkConfig,
    pub blocks: Vec<Bidrb<T>>,
    pub head: Head<T>,
}

/// Validates `cfg` and initializes every parameter from `cfg.seed`.
pub fn build_network<T: Real>(cfg: &NetworkConfig) -> Result<Network<T>> {
    let out = cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let blocks = cfg
        .blocks
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            Bidrb::new(format!("blocks.{i}"), spec, cfg.preact, &mut rng)
                .map_err(|e| in_block(i, e))
        })
        .collect::<Result<Vec<Bidrb<T>>>>()?;
    let mut blocks = blocks;
    if !cfg.binarized {
        for lcr in blocks
            .iter_mut()
            .flat_map(|b| b.modules.iter_mut())
            .flat_map(|m| m.branches.iter_mut())
        {
            lcr.binarized = false;
        }
    }
    let head = Head::new(out.channels, cfg.head_outputs, &mut rng);
    Ok(Network {
        config: cfg.clone(),
        blocks,
        head,
    })
}

fn in_block(i: usize, e: Error) -> Error {
    match e {
        Error::Config {
            block: None,
            detail,
        } => Error::Config {
            block: Some(i),
            detail,
        },
        other => other,
    }
}

/// Inference forward: `batch x head_outputs x 1 x 1`.
pub fn bidrn_forward<T: Real>(net: &Network<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    net.forward(x)
}

impl<T: Real> Network<T> {
    pub fn input_shape(&self, batch: usize) -> Result<Shape> {
        self.config.input(batch)
    }

    pub fn outputs(&self) -> usize {
        self.head.outputs()
    }

    pub fn check_input(&self, x: Shape) -> Result<()> {
        let expected = self.input_shape(x.batch)?;
        if x != expected {
            return Err(Error::mismatch("bidrn_forward", x, expected));
        }
        Ok(())
    }

    /// Backbone output before the head.
    pub fn features_on_tape(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        self.blocks.iter().try_fold(x, |v, b| b.on_tape(tape, v))
    }

    pub fn on_tape(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let f = self.features_on_tape(tape, x)?;
        self.head.on_tape(tape, f)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        super::run_inference(x, |t, v| self.on_tape(t, v))
    }

    /// Sign tensors fed to every binarized convolution for input `x`, with
    /// BatchNorm on batch statistics. Running statistics are not touched.
    pub fn binary_input_signs(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new(TapeConfig::training());
        let v = tape.input(x.clone());
        self.on_tape(&mut tape, v)?;
        Ok(tape.binary_input_signs().into_iter().cloned().collect())
    }

    /// Folds batch statistics recorded by a training tape into the running
    /// estimates.
    pub fn commit_batch_stats(&mut self, observations: &[BnObservation<T>]) -> Result<()> {
        let mut by_name: BTreeMap<&str, &BnObservation<T>> = BTreeMap::new();
        for o in observations {
            by_name.insert(o.name.as_str(), o);
        }
        let mut matched = 0;
        let mut bad = None;
        self.visit_batch_norms(&mut |name, bn| {
            if let Some(o) = by_name.get(name) {
                if o.mean.len() == bn.channels() && o.var.len() == bn.channels() {
                    matched += 1;
                } else {
                    bad.get_or_insert_with(|| name.to_string());
                }
            }
        });
        if let Some(name) = bad {
            return Err(Error::Contract(format!(
                "BatchNorm observation {name} has the wrong channel count"
            )));
        }
        if matched != by_name.len() {
            return Err(Error::Contract(format!(
                "{} BatchNorm observations do not belong to this network",
                by_name.len() - matched
            )));
        }
        self.visit_batch_norms(&mut |name, bn| {
            if let Some(o) = by_name.get(name) {
                bn.update_running(&o.mean, &o.var, o.count);
            }
        });
        Ok(())
    }

    /// Freezes every weight scale at its current value.
    pub fn finalize(&mut self) {
        self.visit_binary_convs(&mut |c| c.finalize());
    }

    pub fn state_records(&self) -> Vec<CheckpointRecord> {
        let mut out = Vec::new();
        self.visit_state(&mut |name, _, dims, data| {
            out.push(CheckpointRecord {
                name: name.to_string(),
                extents: dims.to_vec(),
                data: data.iter().map(|v| v.as_f64() as f32).collect(),
            })
        });
        out
    }

    /// Overwrites every state slot from `records`; all slots must be present
    /// with matching extents.
    pub fn load_records(&mut self, records: &[CheckpointRecord]) -> Result<()> {
        let mut expected = BTreeMap::new();
        self.visit_state(&mut |name, _, dims, _| {
            expected.insert(name.to_string(), dims.to_vec());
        });
        let by_name: BTreeMap<&str, &CheckpointRecord> =
            records.iter().map(|r| (r.name.as_str(), r)).collect();
        for (name, dims) in &expected {
            match by_name.get(name.as_str()) {
                None => return Err(Error::Checkpoint(format!("missing record {name}"))),
                Some(r) if &r.extents != dims => {
                    return Err(Error::Checkpoint(format!(
                        "{name}: extents {:?} in file, {:?} expected",
                        r.extents, dims
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = records.iter().find(|r| !expected.contains_key(&r.name)) {
            return Err(Error::Checkpoint(format!(
                "unexpected record {}",
                extra.name
            )));
        }
        self.visit_state_mut(&mut |name, _, slot| {
            let r = by_name[name];
            for (d, &s) in slot.iter_mut().zip(&r.data) {
                *d = T::from_f64(s as f64);
            }
        });
        self.visit_binary_convs(&mut |c| {
            if c.is_frozen() {
                c.finalize();
            } else {
                c.refresh_alpha();
            }
        });
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(path, &self.state_records())
    }

    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let records = read_checkpoint(path)?;
        self.load_records(&records)
    }

    pub fn visit_state(&self, f: &mut StateVisitor<'_, T>) {
        self.blocks.iter().for_each(|b| b.visit_state(f));
        f(
            "head.weight",
            StateKind::Param,
            &tensor_dims(&self.head.weight),
            self.head.weight.data(),
        );
        f(
            "head.bias",
            StateKind::Param,
            &[self.head.bias.len()],
            &self.head.bias,
        );
    }

    pub fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, StateKind, &mut [T])) {
        self.blocks.iter_mut().for_each(|b| b.visit_state_mut(f));
        f("head.weight", StateKind::Param, self.head.weight.data_mut());
        f("head.bias", StateKind::Param, &mut self.head.bias);
    }

    pub fn visit_batch_norms(&mut self, f: &mut dyn FnMut(&str, &mut BatchNormParams<T>)) {
        self.blocks.iter_mut().for_each(|b| b.visit_batch_norms(f));
    }

    pub fn visit_binary_convs(&mut self, f: &mut dyn FnMut(&mut BinaryConv2dParams<T>)) {
        self.blocks.iter_mut().for_each(|b| b.visit_binary_convs(f));
    }
}

impl<T: Real> Parameterized<T> for Network<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &[T])) {
        self.visit_state(&mut |name, kind, _, data| {
            if kind == StateKind::Param {
                f(name, data)
            }
        });
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        self.visit_state_mut(&mut |name, kind, data| {
            if kind == StateKind::Param {
                f(name, data)
            }
        });
    }

    fn after_update(&mut self) {
        self.visit_binary_convs(&mut |c| {
            if !c.is_frozen() {
                c.refresh_alpha();
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::config::{
        BlockResidualMode, BlockSpec, ModuleKind, ModuleSpec, PreactKind, Preset,
    };

    fn input(cfg: &NetworkConfig, batch: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::random_uniform(cfg.input(batch).unwrap(), -1.0, 1.0, &mut rng)
    }

    #[test]
    fn same_seed_same_output() {
        let cfg = Preset::FullBidrb.config();
        let x = input(&cfg, 2, 1);
        let a = bidrn_forward(&build_network::<f32>(&cfg).unwrap(), &x).unwrap();
        let b = bidrn_forward(&build_network::<f32>(&cfg).unwrap(), &x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), Shape::vector(2, 30));
        let c = bidrn_forward(
            &build_network::<f32>(&cfg.clone().with_seed(8)).unwrap(),
            &x,
        )
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_network_is_head_on_input() {
        let cfg = NetworkConfig {
            input_shape: [3, 4, 4],
            preact: PreactKind::Hardtanh,
            blocks: vec![],
            seed: 1,
            head_outputs: 5,
            binarized: true,
        };
        let net = build_network::<f32>(&cfg).unwrap();
        assert_eq!(net.head.inputs(), 3);
        let x = input(&cfg, 2, 3);
        let out = net.forward(&x).unwrap();
        let pooled = crate::ops::global_avg_pool(&x)
            .reshape(Shape::vector(2, 3))
            .unwrap();
        let expected =
            crate::ops::linear_forward(&pooled, &net.head.weight, Some(&net.head.bias)).unwrap();
        assert!(out.max_abs_diff(&expected).unwrap() < 1e-6);
    }

    #[test]
    fn ablation_progression_runs() {
        for n in 0..=4 {
            let cfg = Preset::Table4aStep(n).config();
            let net = build_network::<f32>(&cfg).unwrap();
            let out = net.forward(&input(&cfg, 2, n as u64)).unwrap();
            assert!(out.is_finite());
        }
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let net = build_network::<f32>(&Preset::BaseLcr.config()).unwrap();
        let x = Tensor::zeros(Shape::new(1, 3, 16, 16));
        assert!(net.forward(&x).is_err());
    }

    #[test]
    fn invalid_chain_names_block() {
        let mut cfg = Preset::FullBidrb.config();
        cfg.blocks[2] = BlockSpec::new(
            ModuleSpec::new(ModuleKind::FusionDown, 6),
            BlockResidualMode::None,
        );
        match build_network::<f32>(&cfg) {
            Err(Error::Config { block: Some(2), .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn relu_network_sees_only_positive_signs() {
        let base = Preset::BaseLcr.config();
        let probe = input(&base, 2, 5).map(|v| v.abs());
        let relu = build_network::<f32>(&base.clone().with_preact(PreactKind::Relu)).unwrap();
        let signs = relu.binary_input_signs(&probe).unwrap();
        assert!(!signs.is_empty());
        assert!(signs.iter().all(|s| s.data().iter().all(|&v| v == 1.0)));
        let ht = build_network::<f32>(&base).unwrap();
        let signs = ht.binary_input_signs(&probe).unwrap();
        assert!(signs.iter().any(|s| s.data().iter().any(|&v| v == -1.0)));
    }

    #[test]
    fn batch_stats_commit() {
        let cfg = Preset::BaseLcr.config();
        let mut net = build_network::<f32>(&cfg).unwrap();
        let mut tape = Tape::new(TapeConfig::training());
        let x = tape.input(input(&cfg, 4, 2));
        net.on_tape(&mut tape, x).unwrap();
        let obs = tape.bn_observations().to_vec();
        assert_eq!(obs.len(), 2);
        net.commit_batch_stats(&obs).unwrap();
        assert_ne!(
            net.blocks[0].modules[0].branches[0].bn.running_mean,
            vec![0.0; 4]
        );
        let mut other = build_network::<f32>(&Preset::FullBidrb.config()).unwrap();
        assert!(other.commit_batch_stats(&obs).is_err());
    }

    #[test]
    fn records_round_trip() {
        let cfg = Preset::FullBidrb.config();
        let a = build_network::<f32>(&cfg).unwrap();
        let mut b = build_network::<f32>(&cfg.clone().with_seed(99)).unwrap();
        b.load_records(&a.state_records()).unwrap();
        assert_eq!(a.blocks, b.blocks);
        assert_eq!(a.head, b.head);
        let mut short = a.state_records();
        short.pop();
        assert!(b.load_records(&short).is_err());
    }
}
