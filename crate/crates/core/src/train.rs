//! Synthetic teacher-student regression task and the toy training loop.
//!
//! A frozen full-precision teacher maps random inputs to a target vector
//! split into `param`, `joint` and `box` segments. The student is a BiDRN
//! trained with the sum of the three mean-L1 terms.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Adam, AdamConfig, Tape, TapeConfig};
use crate::error::{Error, Result};
use crate::layers::{build_network, Network, NetworkConfig};
use crate::ops::{conv2d_reference, global_avg_pool, linear_forward, relu_forward, slice_channels};
use crate::tensor::{Real, Shape, Tensor};

/// Lengths of the three target segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSegments {
    pub param: usize,
    pub joint: usize,
    pub boxes: usize,
}

impl Default for TaskSegments {
    fn default() -> Self {
        TaskSegments {
            param: 10,
            joint: 8,
            boxes: 12,
        }
    }
}

impl TaskSegments {
    pub fn total(&self) -> usize {
        self.param + self.joint + self.boxes
    }

    /// `(start, len)` of each segment in order.
    pub fn ranges(&self) -> [(usize, usize); 3] {
        [
            (0, self.param),
            (self.param, self.joint),
            (self.param + self.joint, self.boxes),
        ]
    }
}

const TEACHER_CHANNELS: usize = 8;

/// Frozen full-precision network: 3x3 stride-2 conv, ReLU, global average
/// pool and a linear layer with bias.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub conv: Tensor<f32>,
    pub weight: Tensor<f32>,
    pub bias: Vec<f32>,
    pub segments: TaskSegments,
}

impl Teacher {
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let h = relu_forward(&conv2d_reference(x, &self.conv, 2, 1)?);
        let pooled =
            global_avg_pool(&h).reshape(Shape::vector(x.shape().batch, TEACHER_CHANNELS))?;
        linear_forward(&pooled, &self.weight, Some(&self.bias))
    }
}

/// Draws input batches: per-sample, per-channel offsets plus pixel noise.
#[derive(Debug, Clone)]
pub struct Sampler {
    rng: ChaCha8Rng,
    sample: Shape,
    frozen: Option<Tensor<f32>>,
}

impl Sampler {
    pub fn new(seed: u64, sample: Shape) -> Self {
        Sampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            sample: Shape { batch: 1, ..sample },
            frozen: None,
        }
    }

    /// Draws one batch now and returns it from every later [`Sampler::batch`]
    /// call of the same size.
    pub fn freeze(&mut self, batch: usize) {
        let b = self.draw(batch);
        self.frozen = Some(b);
    }

    pub fn batch(&mut self, batch: usize) -> Tensor<f32> {
        match &self.frozen {
            Some(b) if b.shape().batch == batch => b.clone(),
            _ => self.draw(batch),
        }
    }

    fn draw(&mut self, batch: usize) -> Tensor<f32> {
        let s = Shape {
            batch,
            ..self.sample
        };
        let offsets: Vec<f32> = (0..batch * s.channels)
            .map(|_| self.rng.gen_range(-1.0..1.0))
            .collect();
        let rng = &mut self.rng;
        Tensor::from_fn(s, |n, c, _, _| {
            offsets[n * s.channels + c] + 0.5 * rng.gen_range(-1.0f32..1.0)
        })
    }
}

/// Teacher and input sampler for inputs shaped like `sample`
/// (batch extent ignored).
pub fn make_synthetic_task(seed: u64, sample: Shape, segments: TaskSegments) -> (Teacher, Sampler) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_7EAC);
    let fan_in = (sample.channels * 9) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let conv = Tensor::random_uniform(
        Shape::new(TEACHER_CHANNELS, sample.channels, 3, 3),
        -bound,
        bound,
        &mut rng,
    );
    let out = segments.total();
    let weight =
        Tensor::random_uniform(Shape::new(out, TEACHER_CHANNELS, 1, 1), -1.5, 1.5, &mut rng);
    let bias = (0..out).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let teacher = Teacher {
        conv,
        weight,
        bias,
        segments,
    };
    (teacher, Sampler::new(seed, sample))
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub steps: usize,
    pub seed: u64,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Reuse a single batch for every step.
    pub frozen_sampler: bool,
    pub detach_alpha: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 500,
            seed: 7,
            batch: 8,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            frozen_sampler: false,
            detach_alpha: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub param: f64,
    pub joint: f64,
    pub boxes: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub trace: Vec<LossRecord>,
    pub network: Network<f32>,
}

/// Trains a network built from `cfg` on the synthetic task. The head must
/// produce exactly `param + joint + box` outputs.
pub fn train_toy(cfg: &NetworkConfig, opts: &TrainOptions) -> Result<TrainReport> {
    let network = build_network::<f32>(cfg)?;
    train_network(network, opts)
}

pub fn train_network(mut network: Network<f32>, opts: &TrainOptions) -> Result<TrainReport> {
    let segments = TaskSegments::default();
    if network.outputs() != segments.total() {
        return Err(Error::config(
            None,
            format!(
                "head_outputs is {}, the synthetic task needs {}",
                network.outputs(),
                segments.total()
            ),
        ));
    }
    if opts.batch == 0 {
        return Err(Error::config(None, "batch must be >= 1"));
    }
    let (teacher, mut sampler) = make_synthetic_task(opts.seed, network.input_shape(1)?, segments);
    if opts.frozen_sampler {
        sampler.freeze(opts.batch);
    }
    let mut adam = Adam::new(opts.adam);
    let tape_config = TapeConfig {
        detach_alpha: opts.detach_alpha,
        ..TapeConfig::training()
    };
    let mut trace = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let x = sampler.batch(opts.batch);
        let target = teacher.predict(&x)?;
        let mut tape = Tape::new(tape_config);
        let input = tape.input(x);
        let pred = network.on_tape(&mut tape, input)?;
        let mut parts = [0.0; 3];
        let mut loss = None;
        for (k, (start, len)) in segments.ranges().into_iter().enumerate() {
            let p = tape.slice_channels(pred, start, len)?;
            let t = slice_channels(&target, start, len)?;
            let l = tape.l1_loss(p, &t)?;
            parts[k] = tape.scalar(l)?.as_f64();
            loss = Some(match loss {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let loss = loss.expect("three segments");
        let total = tape.scalar(loss)?.as_f64();
        if !total.is_finite() {
            return Err(Error::Diverged { step, loss: total });
        }
        let grads = tape.backward(loss)?;
        adam.step(&mut network, &grads)?;
        network.commit_batch_stats(tape.bn_observations())?;
        trace.push(LossRecord {
            step,
            total,
            param: parts[0],
            joint: parts[1],
            boxes: parts[2],
        });
    }
    Ok(TrainReport { trace, network })
}

pub const TRACE_HEADER: &str = "step,loss_total,loss_param,loss_joint,loss_box";

pub fn trace_csv(trace: &[LossRecord]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in trace {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.step, r.total, r.param, r.joint, r.boxes
        )
        .expect("string write");
    }
    out
}

/// Mean total loss over the first and last `window` steps.
pub fn smoothed_endpoints(trace: &[LossRecord], window: usize) -> Option<(f64, f64)> {
    if trace.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(trace.len());
    let mean = |s: &[LossRecord]| s.iter().map(|r| r.total).sum::<f64>() / s.len() as f64;
    Some((mean(&trace[..w]), mean(&trace[trace.len() - w..])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Parameterized;
    use crate::layers::Preset;

    #[test]
    fn teacher_is_deterministic_and_varied() {
        let sample = Shape::new(1, 3, 16, 16);
        let (t1, mut s1) = make_synthetic_task(3, sample, TaskSegments::default());
        let (t2, mut s2) = make_synthetic_task(3, sample, TaskSegments::default());
        let x1 = s1.batch(100);
        let x2 = s2.batch(100);
        assert_eq!(x1, x2);
        let y = t1.predict(&x1).unwrap();
        assert_eq!(y, t2.predict(&x2).unwrap());
        assert_eq!(y.shape(), Shape::vector(100, 30));
        assert!(y.is_finite());
        for j in 0..30 {
            let col: Vec<f64> = (0..100).map(|n| y.at(n, j, 0, 0) as f64).collect();
            let m = col.iter().sum::<f64>() / 100.0;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 100.0;
            assert!(var > 1e-4, "output {j} variance {var}");
        }
    }

    #[test]
    fn zero_steps_leaves_network_unchanged() {
        let cfg = Preset::BaseLcr.config();
        let before = build_network::<f32>(&cfg).unwrap();
        let report = train_toy(
            &cfg,
            &TrainOptions {
                steps: 0,
                ..TrainOptions::default()
            },
        )
        .unwrap();
        assert!(report.trace.is_empty());
        assert_eq!(report.network, before);
    }

    #[test]
    fn zero_lr_frozen_sampler_is_flat() {
        let cfg = Preset::BaseLcr.config();
        let opts = TrainOptions {
            steps: 5,
            frozen_sampler: true,
            adam: AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            ..TrainOptions::default()
        };
        let report = train_toy(&cfg, &opts).unwrap();
        let first = report.trace[0].total;
        assert!(report.trace.iter().all(|r| r.total == first));
        let before = build_network::<f32>(&cfg).unwrap();
        let mut a = Vec::new();
        before.visit_params(&mut |_, p| a.extend_from_slice(p));
        let mut b = Vec::new();
        report
            .network
            .visit_params(&mut |_, p| b.extend_from_slice(p));
        assert_eq!(a, b);
    }

    #[test]
    fn runs_are_reproducible() {
        let cfg = Preset::Table4aStep(4).config();
        let opts = TrainOptions {
            steps: 4,
            ..TrainOptions::default()
        };
        let a = train_toy(&cfg, &opts).unwrap();
        let b = train_toy(&cfg, &opts).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.network, b.network);
    }

    #[test]
    fn segment_losses_sum_to_total() {
        let report = train_toy(
            &Preset::BaseLcr.config(),
            &TrainOptions {
                steps: 2,
                ..TrainOptions::default()
            },
        )
        .unwrap();
        for r in &report.trace {
            assert!((r.param + r.joint + r.boxes - r.total).abs() < 1e-5);
        }
        let csv = trace_csv(&report.trace);
        assert!(csv.starts_with(TRACE_HEADER));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn head_width_must_match_task() {
        let mut cfg = Preset::BaseLcr.config();
        cfg.head_outputs = 4;
        assert!(train_toy(
            &cfg,
            &TrainOptions {
                steps: 1,
                ..TrainOptions::default()
            }
        )
        .is_err());
    }
}
