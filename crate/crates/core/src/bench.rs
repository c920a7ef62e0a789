//! Wall-clock micro-benchmark of the block forwards.
//!
//! Each cell times one (variant, head count) configuration: seeded weights
//! and input, a warmup phase, then the median of per-iteration timings. The
//! scaled variant runs in associative mode. Inputs and outputs pass through
//! `black_box` so the optimizer cannot elide the work.

use std::hint::black_box;
use std::time::Instant;

use crate::attention::{
    init_heads, multi_head_forward, AttentionConfig, BlockVariant, ComputeMode, FeatureMap,
};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct BenchCell {
    pub variant: BlockVariant,
    pub heads: usize,
    pub median_ns: u128,
    pub warmup: usize,
    pub iters: usize,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub cells: Vec<BenchCell>,
}

impl BenchReport {
    pub fn median_ns(&self, variant: BlockVariant, heads: usize) -> Option<u128> {
        self.cells
            .iter()
            .find(|c| c.variant == variant && c.heads == heads)
            .map(|c| c.median_ns)
    }

    /// time(heads = num) / time(heads = den) for one variant.
    pub fn ratio(&self, variant: BlockVariant, num: usize, den: usize) -> Option<f64> {
        Some(self.median_ns(variant, num)? as f64 / self.median_ns(variant, den)? as f64)
    }

    /// CSV with one row per cell. The median column is wall-clock and
    /// therefore exempt from byte-for-byte determinism.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,n_h,h,w,c,c_e,warmup,iters,median_ns\n");
        for cell in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                cell.variant.name(),
                cell.heads,
                self.height,
                self.width,
                self.channels,
                self.channels / cell.heads,
                cell.warmup,
                cell.iters,
                cell.median_ns
            ));
        }
        out
    }
}

/// Times both variants across `head_counts`. Requires at least 10 warmup
/// and 100 measured iterations per cell.
pub fn bench_forwards(
    height: usize,
    width: usize,
    channels: usize,
    head_counts: &[usize],
    warmup: usize,
    iters: usize,
    seed: u64,
) -> Result<BenchReport> {
    if warmup < 10 || iters < 100 {
        return Err(Error::InvalidConfig {
            message: format!("need warmup >= 10 and iters >= 100, got {warmup}/{iters}"),
        });
    }
    let mut cells = Vec::new();
    for &variant in &[BlockVariant::Softmax, BlockVariant::Scaled] {
        for &heads in head_counts {
            let cfg = AttentionConfig::multi_head(variant, channels, heads)?;
            let mut rng = Rng::new(seed);
            let x = FeatureMap::random(height, width, channels, &mut rng)?;
            let head_weights = init_heads(&cfg, &mut rng)?;
            let run = || -> Result<()> {
                let y = multi_head_forward(
                    black_box(&x),
                    &head_weights,
                    &cfg,
                    ComputeMode::Associative,
                )?;
                black_box(y.values().data());
                Ok(())
            };
            for _ in 0..warmup {
                run()?;
            }
            let mut times = Vec::with_capacity(iters);
            for _ in 0..iters {
                let t0 = Instant::now();
                run()?;
                times.push(t0.elapsed().as_nanos());
            }
            times.sort_unstable();
            cells.push(BenchCell {
                variant,
                heads,
                median_ns: times[times.len() / 2],
                warmup,
                iters,
            });
        }
    }
    Ok(BenchReport {
        height,
        width,
        channels,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_budgets() {
        assert!(bench_forwards(2, 2, 4, &[1], 5, 100, 0).is_err());
        assert!(bench_forwards(2, 2, 4, &[1], 10, 50, 0).is_err());
    }

    #[test]
    fn produces_one_cell_per_variant_and_head_count() {
        let report = bench_forwards(2, 2, 4, &[1, 2], 10, 100, 0).unwrap();
        assert_eq!(report.cells.len(), 4);
        assert!(report.cells.iter().all(|c| c.median_ns > 0));
        assert!(report.ratio(BlockVariant::Softmax, 2, 1).is_some());
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("variant,n_h,"));
    }
}
