use rand::Rng;

use super::config::{BlockResidualMode, BlockSpec, PreactKind};
use super::{
    binary_conv_on_tape, kaiming_uniform, run_inference, tensor_dims, LayerState, ResidualModule,
    StateKind, StateVisitor,
};
use crate::autograd::{Tape, Var};
use crate::binarize::BinaryConv2dParams;
use crate::error::{Error, Result};
use crate::ops::BatchNormParams;
use crate::tensor::{Real, Shape, Tensor};

/// Block-level shortcut: average pool by the block's stride, then a 1x1
/// convolution to the block's output channels.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockResidual<T: Real = f32> {
    None,
    FullPrecision {
        name: String,
        weight: Tensor<T>,
        pool: usize,
    },
    Binarized {
        name: String,
        conv: BinaryConv2dParams<T>,
        pool: usize,
    },
}

impl<T: Real> BlockResidual<T> {
    pub fn new<R: Rng + ?Sized>(
        name: impl Into<String>,
        mode: BlockResidualMode,
        in_channels: usize,
        out_channels: usize,
        pool: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let name = name.into();
        Ok(match mode {
            BlockResidualMode::None => BlockResidual::None,
            BlockResidualMode::FullPrecision1x1 => BlockResidual::FullPrecision {
                name,
                weight: kaiming_uniform(out_channels, in_channels, 1, rng),
                pool,
            },
            BlockResidualMode::Binarized1x1 => BlockResidual::Binarized {
                name,
                conv: BinaryConv2dParams::new(
                    kaiming_uniform(out_channels, in_channels, 1, rng),
                    1,
                    0,
                )?,
                pool,
            },
        })
    }

    pub fn mode(&self) -> BlockResidualMode {
        match self {
            BlockResidual::None => BlockResidualMode::None,
            BlockResidual::FullPrecision { .. } => BlockResidualMode::FullPrecision1x1,
            BlockResidual::Binarized { .. } => BlockResidualMode::Binarized1x1,
        }
    }

    pub fn pool(&self) -> usize {
        match self {
            BlockResidual::None => 1,
            BlockResidual::FullPrecision { pool, .. } | BlockResidual::Binarized { pool, .. } => {
                *pool
            }
        }
    }

    /// `None` when the mode is `None`.
    pub fn on_tape(&self, tape: &mut Tape<T>, x: Var) -> Result<Option<Var>> {
        let pool = self.pool();
        let pooled = |tape: &mut Tape<T>| {
            if pool > 1 {
                tape.avg_pool(x, pool, pool)
            } else {
                Ok(x)
            }
        };
        match self {
            BlockResidual::None => Ok(None),
            BlockResidual::FullPrecision { name, weight, .. } => {
                let p = pooled(tape)?;
                let w = tape.param(format!("{name}.weight"), weight.clone());
                tape.conv2d(p, w, 1, 0).map(Some)
            }
            BlockResidual::Binarized { name, conv, .. } => {
                let p = pooled(tape)?;
                binary_conv_on_tape(tape, &format!("{name}.weight"), p, conv).map(Some)
            }
        }
    }
}

impl<T: Real> LayerState<T> for BlockResidual<T> {
    fn visit_state(&self, f: &mut StateVisitor<'_, T>) {
        match self {
            BlockResidual::None => {}
            BlockResidual::FullPrecision { name, weight, .. } => f(
                &format!("{name}.weight"),
                StateKind::Param,
                &tensor_dims(weight),
                weight.data(),
            ),
            BlockResidual::Binarized { name, conv, .. } => f(
                &format!("{name}.weight"),
                StateKind::Param,
                &tensor_dims(&conv.latent_weights),
                conv.latent_weights.data(),
            ),
        }
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, StateKind, &mut [T])) {
        match self {
            BlockResidual::None => {}
            BlockResidual::FullPrecision { name, weight, .. } => f(
                &format!("{name}.weight"),
                StateKind::Param,
                weight.data_mut(),
            ),
            BlockResidual::Binarized { name, conv, .. } => f(
                &format!("{name}.weight"),
                StateKind::Param,
                conv.latent_weights.data_mut(),
            ),
        }
    }

    fn visit_batch_norms(&mut self, _f: &mut dyn FnMut(&str, &mut BatchNormParams<T>)) {}

    fn visit_binary_convs(&mut self, f: &mut dyn FnMut(&mut BinaryConv2dParams<T>)) {
        if let BlockResidual::Binarized { conv, .. } = self {
            f(conv);
        }
    }
}

/// Applies a non-`None` block residual and checks it lands on `target`.
pub fn block_residual_forward<T: Real>(
    x: &Tensor<T>,
    br: &BlockResidual<T>,
    target: Shape,
) -> Result<Tensor<T>> {
    if matches!(br, BlockResidual::None) {
        return Err(Error::Contract(
            "block_residual_forward needs a mode other than none".into(),
        ));
    }
    let s = x.shape();
    let pool = br.pool();
    if !s.height.is_multiple_of(pool) || !s.width.is_multiple_of(pool) {
        return Err(Error::dim(
            "block_residual",
            format!("cannot pool {s} by {pool} to reach {target}"),
        ));
    }
    let out = run_inference(x, |t, v| Ok(br.on_tape(t, v)?.expect("mode is not none")))?;
    if out.shape() != target {
        return Err(Error::mismatch("block_residual", out.shape(), target));
    }
    Ok(out)
}

/// Binarized dual residual block: `main(x) + BR(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bidrb<T: Real = f32> {
    pub name: String,
    pub modules: Vec<ResidualModule<T>>,
    pub residual: BlockResidual<T>,
}

impl<T: Real> Bidrb<T> {
    pub fn new<R: Rng + ?Sized>(
        name: impl Into<String>,
        spec: &BlockSpec,
        preact: PreactKind,
        rng: &mut R,
    ) -> Result<Self> {
        let name = name.into();
        let specs = spec.modules();
        let modules = specs
            .iter()
            .enumerate()
            .map(|(i, m)| ResidualModule::new(format!("{name}.m{i}"), *m, preact, rng))
            .collect::<Result<Vec<_>>>()?;
        let last = specs.last().expect("a block has at least one module");
        let residual = BlockResidual::new(
            format!("{name}.br"),
            spec.block_residual,
            spec.in_channels,
            last.out_channels,
            spec.total_stride(),
            rng,
        )?;
        Ok(Bidrb {
            name,
            modules,
            residual,
        })
    }

    pub fn main_on_tape(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.modules.iter().try_fold(x, |v, m| m.on_tape(tape, v))
    }

    pub fn on_tape(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let main = self.main_on_tape(tape, x)?;
        match self.residual.on_tape(tape, x)? {
            Some(br) => tape.add(main, br),
            None => Ok(main),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        run_inference(x, |t, v| self.on_tape(t, v))
    }

    pub fn main_forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        run_inference(x, |t, v| self.main_on_tape(t, v))
    }
}

impl<T: Real> LayerState<T> for Bidrb<T> {
    fn visit_state(&self, f: &mut StateVisitor<'_, T>) {
        self.modules.iter().for_each(|m| m.visit_state(f));
        self.residual.visit_state(f);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, StateKind, &mut [T])) {
        self.modules.iter_mut().for_each(|m| m.visit_state_mut(f));
        self.residual.visit_state_mut(f);
    }

    fn visit_batch_norms(&mut self, f: &mut dyn FnMut(&str, &mut BatchNormParams<T>)) {
        self.modules.iter_mut().for_each(|m| m.visit_batch_norms(f));
    }

    fn visit_binary_convs(&mut self, f: &mut dyn FnMut(&mut BinaryConv2dParams<T>)) {
        self.modules
            .iter_mut()
            .for_each(|m| m.visit_binary_convs(f));
        self.residual.visit_binary_convs(f);
    }
}

pub fn bidrb_forward<T: Real>(x: &Tensor<T>, block: &Bidrb<T>) -> Result<Tensor<T>> {
    block.forward(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binarize::binary_conv2d;
    use crate::layers::config::{ModuleKind, ModuleSpec};
    use crate::ops::{avg_pool2d, conv2d_reference};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_fp_residual_is_identity() {
        let mut br = BlockResidual::<f64>::new(
            "br",
            BlockResidualMode::FullPrecision1x1,
            3,
            3,
            1,
            &mut rng(1),
        )
        .unwrap();
        if let BlockResidual::FullPrecision { weight, .. } = &mut br {
            *weight = Tensor::from_fn(weight.shape(), |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        }
        let x = Tensor::random_uniform(Shape::new(2, 3, 4, 4), -1.0, 1.0, &mut rng(2));
        assert_eq!(block_residual_forward(&x, &br, x.shape()).unwrap(), x);
    }

    #[test]
    fn strided_residual_geometry() {
        let br = BlockResidual::<f32>::new(
            "br",
            BlockResidualMode::FullPrecision1x1,
            4,
            8,
            2,
            &mut rng(1),
        )
        .unwrap();
        let x = Tensor::random_uniform(Shape::new(1, 4, 4, 4), -1.0, 1.0, &mut rng(2));
        let out = block_residual_forward(&x, &br, Shape::new(1, 8, 2, 2)).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 8, 2, 2));
        assert!(block_residual_forward(&x, &br, Shape::new(1, 8, 4, 4)).is_err());
        assert!(block_residual_forward(&x, &BlockResidual::None, x.shape()).is_err());
    }

    #[test]
    fn binarized_residual_matches_oracle() {
        let br =
            BlockResidual::<f64>::new("br", BlockResidualMode::Binarized1x1, 4, 8, 2, &mut rng(3))
                .unwrap();
        let x = Tensor::random_uniform(Shape::new(2, 4, 6, 6), -1.0, 1.0, &mut rng(4));
        let out = block_residual_forward(&x, &br, Shape::new(2, 8, 3, 3)).unwrap();
        let BlockResidual::Binarized { conv, .. } = &br else {
            unreachable!()
        };
        let pooled = avg_pool2d(&x, 2, 2).unwrap();
        let signs = crate::binarize::sign_forward(&pooled);
        let oracle = conv2d_reference(&signs, &conv.binarized_weights(), 1, 0).unwrap();
        assert!(out.max_abs_diff(&oracle).unwrap() < 1e-12);
        assert!(
            out.max_abs_diff(&binary_conv2d(&pooled, conv).unwrap())
                .unwrap()
                < 1e-12
        );
    }

    fn chained_block(mode: BlockResidualMode) -> BlockSpec {
        BlockSpec::new(ModuleSpec::new(ModuleKind::DownSample, 4), mode)
            .then(ModuleSpec::new(ModuleKind::BaseLcr, 8))
    }

    #[test]
    fn chained_block_geometry_and_recomposition() {
        let spec = chained_block(BlockResidualMode::FullPrecision1x1);
        let block = Bidrb::<f64>::new("blk", &spec, PreactKind::Hardtanh, &mut rng(5)).unwrap();
        let x = Tensor::random_uniform(Shape::new(1, 4, 8, 8), -2.0, 2.0, &mut rng(6));
        let out = bidrb_forward(&x, &block).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 8, 4, 4));
        let main = block.main_forward(&x).unwrap();
        let br = block_residual_forward(&x, &block.residual, out.shape()).unwrap();
        assert!(out.max_abs_diff(&main.add(&br).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn no_residual_is_main_path() {
        let spec = chained_block(BlockResidualMode::None);
        let block = Bidrb::<f64>::new("blk", &spec, PreactKind::Hardtanh, &mut rng(5)).unwrap();
        let x = Tensor::random_uniform(Shape::new(1, 4, 8, 8), -2.0, 2.0, &mut rng(6));
        assert_eq!(block.forward(&x).unwrap(), block.main_forward(&x).unwrap());
    }
}
