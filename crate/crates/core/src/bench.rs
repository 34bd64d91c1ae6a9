//! Wall-clock timing of the dense kernels across grid sizes.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::correlation::{correlate, CorrTensor, Stage};
use crate::error::{NcError, Result};
use crate::features::FeatureMap;
use crate::matchfilter::soft_mutual_nn;
use crate::ncnet::{conv4d_aggregated, conv4d_direct, Conv4dLayer};
use crate::tensor4::Tensor4;

pub const KERNELS: [&str; 4] = [
    "correlate",
    "conv4d_direct",
    "conv4d_aggregated",
    "soft_mutual_nn",
];

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    /// Square grid sides; both images use an `s x s` grid.
    pub sizes: Vec<usize>,
    pub descriptor_dim: usize,
    pub channels: usize,
    pub k: usize,
    /// Each kernel is run this many times and the fastest run is kept.
    pub repeats: usize,
    pub seed: u64,
    /// Estimated peak memory allowed for the largest size.
    pub memory_limit: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![4, 8],
            descriptor_dim: 64,
            channels: 16,
            k: 5,
            repeats: 3,
            seed: 0,
            memory_limit: 2 << 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub size: usize,
    pub kernel: &'static str,
    /// Entries of the 4D correlation volume, `size^4`.
    pub entries: u64,
    pub nanos: u128,
    pub ns_per_element: f64,
    /// Bytes of the kernel's output.
    pub bytes: u64,
}

/// Growth of correlation cost between two consecutive sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct Trend {
    pub from: usize,
    pub to: usize,
    /// Ratio expected from `(hw)^2` scaling.
    pub expected: f64,
    pub time_ratio: f64,
    pub memory_ratio: f64,
}

impl Trend {
    /// Both ratios within a factor of two of the expectation.
    pub fn within_factor_two(&self) -> bool {
        let ok = |r: f64| r >= self.expected / 2.0 && r <= self.expected * 2.0;
        ok(self.time_ratio) && ok(self.memory_ratio)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub trends: Vec<Trend>,
}

impl BenchReport {
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "size,kernel,entries,nanos,ns_per_element,bytes")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{:.4},{}",
                r.size, r.kernel, r.entries, r.nanos, r.ns_per_element, r.bytes
            )?;
        }
        Ok(())
    }

    pub fn trends_ok(&self) -> bool {
        self.trends.iter().all(Trend::within_factor_two)
    }
}

/// Rough peak footprint at grid side `s`: the two conv tensors dominate.
pub fn estimated_bytes(cfg: &BenchConfig, s: usize) -> u64 {
    let entries = (s as u64).pow(4);
    let f = 4 * (2 * s * s * cfg.descriptor_dim) as u64;
    f + 4 * entries * (2 * cfg.channels as u64 + 3)
}

fn random_map(rng: &mut ChaCha8Rng, s: usize, d: usize) -> Result<FeatureMap> {
    let data = (0..s * s * d)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    FeatureMap::new(s, s, d, s, s, data)
}

fn time<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<(u128, T)> {
    let mut best = u128::MAX;
    let mut out = None;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let v = f()?;
        best = best.min(t.elapsed().as_nanos());
        out = Some(v);
    }
    Ok((best.max(1), out.unwrap()))
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.sizes.is_empty() || cfg.sizes.contains(&0) {
        return Err(NcError::InvalidArgument("sizes must be positive".into()));
    }
    if cfg.channels == 0 || cfg.descriptor_dim == 0 || cfg.k % 2 == 0 {
        return Err(NcError::InvalidArgument(
            "need positive channels and descriptor dim, odd k".into(),
        ));
    }
    let largest = *cfg.sizes.iter().max().unwrap();
    let needed = estimated_bytes(cfg, largest);
    if needed > cfg.memory_limit {
        return Err(NcError::ResourceLimit {
            needed,
            limit: cfg.memory_limit,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layer = {
        let n = cfg.channels * cfg.channels * cfg.k.pow(4);
        let w = (0..n).map(|_| rng.random_range(-0.1..0.1)).collect();
        Conv4dLayer::new(
            cfg.channels,
            cfg.channels,
            cfg.k,
            w,
            vec![0.0; cfg.channels],
        )?
    };
    let mut rows = Vec::new();
    let mut corr_rows: Vec<(usize, u128, u64)> = Vec::new();
    for &s in &cfg.sizes {
        let entries = (s as u64).pow(4);
        let fa = random_map(&mut rng, s, cfg.descriptor_dim)?;
        let fb = random_map(&mut rng, s, cfg.descriptor_dim)?;
        let mut push = |kernel, nanos: u128, bytes: u64| {
            rows.push(BenchRow {
                size: s,
                kernel,
                entries,
                nanos,
                ns_per_element: nanos as f64 / entries as f64,
                bytes,
            })
        };

        let (t, c) = time(cfg.repeats, || correlate(&fa, &fb))?;
        let corr_bytes = 4 * c.tensor().data().len() as u64;
        push(KERNELS[0], t, corr_bytes);
        corr_rows.push((s, t, corr_bytes));

        let input = {
            let n = cfg.channels * s.pow(4);
            let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor4::from_vec(cfg.channels, [s; 4], data)?
        };
        let (t, y) = time(cfg.repeats, || conv4d_direct(&input, &layer))?;
        let conv_bytes = 4 * y.data().len() as u64;
        push(KERNELS[1], t, conv_bytes);
        let (t, _) = time(cfg.repeats, || conv4d_aggregated(&input, &layer))?;
        push(KERNELS[2], t, conv_bytes);

        let raw = CorrTensor::new(c.into_tensor(), Stage::Raw)?;
        let (t, _) = time(cfg.repeats, || Ok(soft_mutual_nn(&raw)))?;
        push(KERNELS[3], t, corr_bytes);
    }

    let trends = corr_rows
        .windows(2)
        .map(|w| {
            let (s0, t0, b0) = w[0];
            let (s1, t1, b1) = w[1];
            Trend {
                from: s0,
                to: s1,
                expected: (s1 as f64 / s0 as f64).powi(4),
                time_ratio: t1 as f64 / t0 as f64,
                memory_ratio: b1 as f64 / b0 as f64,
            }
        })
        .collect();
    Ok(BenchReport { rows, trends })
}
