use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binarize::{binary_conv2d_accumulators, sign_forward, BinaryConv2dParams, PackedBits};
use crate::error::{Error, Result};
use crate::ops::{conv2d_reference, conv_out_extent};
use crate::tensor::{Shape, Tensor};

/// Geometry of one benchmarked convolution (batch 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchShape {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub padding: usize,
}

impl BenchShape {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, extent: usize) -> Self {
        BenchShape {
            name: format!("c{in_channels}-{out_channels}_k{kernel}_{extent}x{extent}"),
            in_channels,
            out_channels,
            kernel,
            height: extent,
            width: extent,
            stride: 1,
            padding: kernel / 2,
        }
    }

    pub fn reduction_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> Result<usize> {
        match (
            conv_out_extent(self.height, self.kernel, self.stride, self.padding),
            conv_out_extent(self.width, self.kernel, self.stride, self.padding),
        ) {
            (Some(h), Some(w)) => Ok(h * w),
            _ => Err(Error::config(
                None,
                format!("bench shape {} has no output", self.name),
            )),
        }
    }

    /// Multiply-accumulates of one forward pass.
    pub fn total_ops(&self) -> Result<u64> {
        Ok((self.out_channels * self.reduction_len() * self.positions()?) as u64)
    }
}

/// Named shape sets, ordered by increasing operation count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchSizes {
    Small,
    Medium,
}

impl BenchSizes {
    pub fn shapes(self) -> Vec<BenchShape> {
        match self {
            BenchSizes::Small => vec![
                BenchShape::new(16, 16, 3, 16),
                BenchShape::new(64, 64, 3, 16),
                BenchShape::new(256, 128, 3, 8),
            ],
            BenchSizes::Medium => vec![
                BenchShape::new(64, 64, 3, 32),
                BenchShape::new(128, 128, 3, 28),
                BenchShape::new(512, 256, 3, 14),
            ],
        }
    }

    pub fn default_reps(self) -> usize {
        match self {
            BenchSizes::Small => 5,
            BenchSizes::Medium => 3,
        }
    }
}

impl FromStr for BenchSizes {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(BenchSizes::Small),
            "medium" => Ok(BenchSizes::Medium),
            other => Err(Error::config(
                None,
                format!("unknown size set `{other}` (expected small or medium)"),
            )),
        }
    }
}

/// Bytes of `rows` dense `f32` operand rows of length `reduction_len`, and of
/// the same rows packed one bit per element into `u64` words.
pub fn footprint_bytes(rows: usize, reduction_len: usize) -> (usize, usize) {
    let dense = rows * reduction_len * std::mem::size_of::<f32>();
    (dense, PackedBits::zeros(rows, reduction_len).memory_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub shape: BenchShape,
    pub reps: usize,
    pub total_ops: u64,
    pub packed_median_ms_1t: f64,
    pub reference_median_ms_1t: f64,
    pub packed_median_ms_mt: f64,
    pub threads_mt: usize,
    pub dense_bytes: usize,
    pub packed_bytes: usize,
    /// Wrapping sum of the integer accumulators of the first repetition.
    pub checksum: i64,
    pub checksums_identical: bool,
}

impl BenchRow {
    pub fn speedup_1t(&self) -> f64 {
        self.reference_median_ms_1t / self.packed_median_ms_1t
    }

    pub fn footprint_ratio(&self) -> f64 {
        self.dense_bytes as f64 / self.packed_bytes as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

pub const BENCH_HEADER: &str =
    "name,c_in,c_out,kernel,height,width,stride,reduction_len,total_ops,reps,\
packed_median_ms_1t,reference_median_ms_1t,speedup_1t,packed_median_ms_mt,threads_mt,\
dense_bytes,packed_bytes,footprint_ratio,checksum,checksums_identical";

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(BENCH_HEADER);
        out.push('\n');
        for r in &self.rows {
            let s = &r.shape;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{:.4},{:.4},{:.2},{:.4},{},{},{},{:.2},{},{}",
                s.name,
                s.in_channels,
                s.out_channels,
                s.kernel,
                s.height,
                s.width,
                s.stride,
                s.reduction_len(),
                r.total_ops,
                r.reps,
                r.packed_median_ms_1t,
                r.reference_median_ms_1t,
                r.speedup_1t(),
                r.packed_median_ms_mt,
                r.threads_mt,
                r.dense_bytes,
                r.packed_bytes,
                r.footprint_ratio(),
                r.checksum,
                r.checksums_identical
            )
            .expect("string write");
        }
        out
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn time_ms<R>(f: impl FnOnce() -> R) -> (f64, R) {
    let start = Instant::now();
    let r = f();
    (start.elapsed().as_secs_f64() * 1e3, r)
}

fn one_thread() -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))
}

/// Times the packed XNOR-popcount convolution against the float reference on
/// identical inputs. Reference numbers run on one thread; the `_mt` column
/// uses the ambient rayon pool.
pub fn bench_conv(shapes: &[BenchShape], reps: usize) -> Result<BenchReport> {
    let reps = reps.max(1);
    let pool = one_thread()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xBE4C);
    let mut rows = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let total_ops = shape.total_ops()?;
        let x = Tensor::<f32>::random_uniform(
            Shape::new(1, shape.in_channels, shape.height, shape.width),
            -1.0,
            1.0,
            &mut rng,
        );
        let w = Tensor::<f32>::random_uniform(
            Shape::new(
                shape.out_channels,
                shape.in_channels,
                shape.kernel,
                shape.kernel,
            ),
            -1.0,
            1.0,
            &mut rng,
        );
        let params = BinaryConv2dParams::new(w, shape.stride, shape.padding)?;
        let sx = sign_forward(&x);
        let bw = params.binarized_weights();

        let mut packed_1t = Vec::with_capacity(reps);
        let mut reference_1t = Vec::with_capacity(reps);
        let mut packed_mt = Vec::with_capacity(reps);
        let mut checksums = Vec::with_capacity(reps);
        for _ in 0..reps {
            let (ms, acc) = pool.install(|| time_ms(|| binary_conv2d_accumulators(&x, &params)));
            packed_1t.push(ms);
            checksums.push(acc?.values.iter().fold(0i64, |a, &v| a.wrapping_add(v)));
            let (ms, r) = pool
                .install(|| time_ms(|| conv2d_reference(&sx, &bw, shape.stride, shape.padding)));
            r?;
            reference_1t.push(ms);
            let (ms, acc) = time_ms(|| binary_conv2d_accumulators(&x, &params));
            acc?;
            packed_mt.push(ms);
        }
        let positions = shape.positions()?;
        let (dw, pw) = footprint_bytes(shape.out_channels, shape.reduction_len());
        let (dc, pc) = footprint_bytes(positions, shape.reduction_len());
        rows.push(BenchRow {
            shape: shape.clone(),
            reps,
            total_ops,
            packed_median_ms_1t: median(packed_1t),
            reference_median_ms_1t: median(reference_1t),
            packed_median_ms_mt: median(packed_mt),
            threads_mt: rayon::current_num_threads(),
            dense_bytes: dw + dc,
            packed_bytes: pw + pc,
            checksum: checksums[0],
            checksums_identical: checksums.iter().all(|&c| c == checksums[0]),
        });
    }
    Ok(BenchReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn footprint_ratio_by_layout() {
        for len in [2048, 2304, 4608, 9000] {
            let (d, p) = footprint_bytes(7, len);
            assert!(d as f64 / p as f64 >= 30.0, "len {len}: {d} / {p}");
        }
        assert_eq!(footprint_bytes(1, 64), (256, 8));
        assert_eq!(footprint_bytes(1, 65), (260, 16));
    }

    #[test]
    fn size_sets_are_monotone() {
        for set in [BenchSizes::Small, BenchSizes::Medium] {
            let ops: Vec<u64> = set
                .shapes()
                .iter()
                .map(|s| s.total_ops().unwrap())
                .collect();
            assert!(ops.windows(2).all(|w| w[0] < w[1]), "{ops:?}");
        }
        assert!("large".parse::<BenchSizes>().is_err());
    }

    #[test]
    fn tiny_bench_is_deterministic() {
        let shapes = vec![BenchShape::new(4, 3, 3, 5), BenchShape::new(40, 8, 3, 6)];
        let a = bench_conv(&shapes, 3).unwrap();
        let b = bench_conv(&shapes, 2).unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert!(ra.checksums_identical);
            assert_eq!(ra.checksum, rb.checksum);
            assert!(ra.packed_median_ms_1t >= 0.0);
        }
        let csv = a.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(
            csv.lines().nth(1).unwrap().split(',').count(),
            BENCH_HEADER.split(',').count()
        );
    }
}
