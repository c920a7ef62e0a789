//! Analytic FLOP and peak-activation accounting for both block variants.
//!
//! Conventions (fixed so numbers are reproducible):
//! * a multiply-add counts as 2 flops;
//! * softmax costs 5 flops per map element (max, subtract, exp, sum, divide);
//! * the scalar rescale of the scaled variant counts as the `normalize`
//!   stage in associative mode (one multiply per core element) and is folded
//!   into the logits product in materialized mode (stage 0);
//! * for the associative grouping, `logits` is the key-value inner product
//!   (C_e x C_e) and `aggregate` the query-side product — the stages play
//!   the same roles at linear instead of quadratic pixel cost;
//! * peak memory counts activation elements only (inputs and weights
//!   excluded), for the exact allocation order of the multi-head forward.
//!   The instrumented counter in the attention module must match these
//!   peaks element-for-element, and tests enforce that.

use crate::attention::ComputeMode;
use crate::error::{Error, Result};

/// Per-stage flop counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageFlops {
    pub embed: u64,
    pub logits: u64,
    pub normalize: u64,
    pub aggregate: u64,
    pub project: u64,
}

impl StageFlops {
    pub fn total(&self) -> u64 {
        self.embed + self.logits + self.normalize + self.aggregate + self.project
    }
}

/// Analytic cost of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub flops: u64,
    pub peak_activation_elements: u64,
    pub breakdown: StageFlops,
}

impl CostReport {
    fn from_stages(breakdown: StageFlops, peak: u64) -> CostReport {
        CostReport {
            flops: breakdown.total(),
            peak_activation_elements: peak,
            breakdown,
        }
    }

    /// CSV row matching [`csv_header`].
    pub fn csv_row(
        &self,
        variant: &str,
        h: usize,
        w: usize,
        c: usize,
        c_e: usize,
        n_h: usize,
    ) -> String {
        let b = &self.breakdown;
        format!(
            "{variant},{h},{w},{c},{c_e},{n_h},{},{},{},{},{},{},{}",
            self.flops,
            self.peak_activation_elements,
            b.embed,
            b.logits,
            b.normalize,
            b.aggregate,
            b.project
        )
    }
}

pub fn csv_header() -> &'static str {
    "variant,h,w,c,c_e,n_h,flops,peak_elements,embed,logits,normalize,aggregate,project"
}

fn validate(c: usize, c_e: usize, n_h: usize) -> Result<()> {
    if n_h == 0 {
        return Err(Error::InvalidConfig {
            message: "head count must be positive".into(),
        });
    }
    if n_h > 1 {
        if !c.is_multiple_of(n_h) {
            return Err(Error::HeadsDontDivide {
                channels: c,
                heads: n_h,
            });
        }
        if c_e != c / n_h {
            return Err(Error::InvalidConfig {
                message: format!(
                    "multi-head embedding width must be c/n_h = {}, got {c_e}",
                    c / n_h
                ),
            });
        }
    }
    Ok(())
}

fn max3(a: u64, b: u64, c: u64) -> u64 {
    a.max(b).max(c)
}

/// Softmax block cost. Peak memory holds one HW x HW map per head for the
/// whole pass, which is the linear-in-heads memory mechanism.
pub fn cost_softmax_nl(h: usize, w: usize, c: usize, c_e: usize, n_h: usize) -> Result<CostReport> {
    validate(c, c_e, n_h)?;
    let (hw, c, e, nh) = ((h * w) as u64, c as u64, c_e as u64, n_h as u64);
    let breakdown = StageFlops {
        embed: nh * 3 * 2 * hw * c * e,
        logits: nh * 2 * hw * hw * e,
        normalize: nh * 5 * hw * hw,
        aggregate: nh * 2 * hw * hw * e,
        project: 2 * hw * (nh * e) * c,
    };
    // Live-set moments: the last head's logit transient, the concatenation,
    // and the projection — all on top of the retained per-head maps.
    let peak = nh * hw * hw + hw * max3((nh + 1) * e, 2 * nh * e, nh * e + c);
    Ok(CostReport::from_stages(breakdown, peak))
}

/// Scaled block cost in either grouping. Associative cost has no HW^2 term;
/// materialized mirrors the softmax stages minus its normalize cost.
pub fn cost_scaled_nl(
    h: usize,
    w: usize,
    c: usize,
    c_e: usize,
    n_h: usize,
    mode: ComputeMode,
) -> Result<CostReport> {
    validate(c, c_e, n_h)?;
    let (hw, c, e, nh) = ((h * w) as u64, c as u64, c_e as u64, n_h as u64);
    let (breakdown, peak) = match mode {
        ComputeMode::Associative => (
            StageFlops {
                embed: nh * 3 * 2 * hw * c * e,
                logits: nh * 2 * hw * e * e,
                normalize: nh * hw * e,
                aggregate: nh * 2 * hw * e * e,
                project: 2 * hw * (nh * e) * c,
            },
            max3(
                (nh + 1) * hw * e + e * e,
                2 * nh * hw * e,
                nh * hw * e + hw * c,
            ),
        ),
        ComputeMode::Materialized => (
            StageFlops {
                embed: nh * 3 * 2 * hw * c * e,
                logits: nh * 2 * hw * hw * e,
                normalize: 0,
                aggregate: nh * 2 * hw * hw * e,
                project: 2 * hw * (nh * e) * c,
            },
            max3(
                (nh + 1) * hw * e + hw * hw,
                2 * nh * hw * e,
                nh * hw * e + hw * c,
            ),
        ),
    };
    Ok(CostReport::from_stages(breakdown, peak))
}

/// Smallest pixel count HW at which the associative grouping costs fewer
/// flops than the materialized one, found by scanning the two formulas.
pub fn crossover(c_e: usize) -> usize {
    assert!(c_e >= 1, "embedding width must be positive");
    let mut hw = 1;
    loop {
        let assoc = cost_scaled_nl(hw, 1, c_e, c_e, 1, ComputeMode::Associative)
            .expect("valid single-head cost")
            .flops;
        let mat = cost_scaled_nl(hw, 1, c_e, c_e, 1, ComputeMode::Materialized)
            .expect("valid single-head cost")
            .flops;
        if assoc < mat {
            return hw;
        }
        hw += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{
        init_heads, multi_head_forward, AttentionConfig, BlockVariant, FeatureMap,
    };
    use crate::mem::MemTrace;
    use crate::rng::Rng;

    #[test]
    fn single_pixel_degenerates_cleanly() {
        let r = cost_softmax_nl(1, 1, 4, 4, 1).unwrap();
        assert_eq!(r.breakdown.logits, 2 * 4); // 2 * (HW)^2 * C_e with HW = 1
        assert_eq!(r.breakdown.normalize, 5); // map is 1 x 1
    }

    #[test]
    fn softmax_peak_strictly_increases_with_heads() {
        let peaks: Vec<u64> = [1usize, 2, 4]
            .iter()
            .map(|&nh| {
                cost_softmax_nl(8, 8, 16, 16 / nh, nh)
                    .unwrap()
                    .peak_activation_elements
            })
            .collect();
        assert!(peaks[0] < peaks[1] && peaks[1] < peaks[2], "{peaks:?}");
    }

    #[test]
    fn softmax_stage_flops_match_hand_count() {
        // H = W = 8, C = C_e = 16, one head. Each stage recomputed from the
        // underlying matrix dimensions.
        let hw = 64u64;
        let c = 16u64;
        let r = cost_softmax_nl(8, 8, 16, 16, 1).unwrap();
        assert_eq!(r.breakdown.embed, 3 * 2 * hw * c * c); // three HWxC . CxC products
        assert_eq!(r.breakdown.logits, 2 * hw * hw * c); // HWxC . CxHW
        assert_eq!(r.breakdown.normalize, 5 * hw * hw);
        assert_eq!(r.breakdown.aggregate, 2 * hw * hw * c); // HWxHW . HWxC
        assert_eq!(r.breakdown.project, 2 * hw * c * c); // HWxC . CxC
        assert_eq!(r.flops, r.breakdown.total());
    }

    #[test]
    fn associative_dominant_term_matches_head_scaling_law() {
        // logits + aggregate = 4 HW (C/N_h)^2 N_h = 4 HW C^2 / N_h.
        for nh in [1usize, 2, 4] {
            let r = cost_scaled_nl(8, 8, 16, 16 / nh, nh, ComputeMode::Associative).unwrap();
            let hw = 64u64;
            let c = 16u64;
            assert_eq!(
                r.breakdown.logits + r.breakdown.aggregate,
                4 * hw * c * c / nh as u64
            );
        }
    }

    #[test]
    fn associative_flops_nonincreasing_in_heads() {
        for (h, w, c) in [(8usize, 8usize, 16usize), (4, 4, 8), (2, 6, 12)] {
            let mut prev = u64::MAX;
            for nh in [1usize, 2, 4] {
                if c % nh != 0 {
                    continue;
                }
                let flops = cost_scaled_nl(h, w, c, c / nh, nh, ComputeMode::Associative)
                    .unwrap()
                    .flops;
                assert!(flops <= prev, "flops grew at nh={nh}: {flops} > {prev}");
                prev = flops;
            }
        }
    }

    #[test]
    fn scaled_peak_constant_within_concat_buffer() {
        let peaks: Vec<u64> = [1usize, 2, 4]
            .iter()
            .map(|&nh| {
                cost_scaled_nl(8, 8, 16, 16 / nh, nh, ComputeMode::Associative)
                    .unwrap()
                    .peak_activation_elements
            })
            .collect();
        let concat = 64 * 16; // HW * C
        let spread = peaks.iter().max().unwrap() - peaks.iter().min().unwrap();
        assert!(spread <= concat, "peaks {peaks:?} spread {spread}");
    }

    #[test]
    fn associative_flops_beat_softmax_whenever_hw_exceeds_embed_width() {
        for h in [1usize, 2, 4, 8] {
            for w in [1usize, 2, 4, 8] {
                for c in [2usize, 4, 8, 16] {
                    for c_e in [1, c / 2, c] {
                        if c_e == 0 {
                            continue;
                        }
                        let assoc =
                            cost_scaled_nl(h, w, c, c_e, 1, ComputeMode::Associative).unwrap();
                        let soft = cost_softmax_nl(h, w, c, c_e, 1).unwrap();
                        if h * w > c_e {
                            assert!(
                                assoc.flops < soft.flops,
                                "hw={} c_e={c_e}: {} !< {}",
                                h * w,
                                assoc.flops,
                                soft.flops
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn materialized_differs_from_softmax_by_exactly_the_normalize_stage() {
        for (h, w, c, c_e, nh) in [(4, 4, 8, 8, 1), (8, 8, 16, 4, 4), (2, 3, 6, 3, 2)] {
            let soft = cost_softmax_nl(h, w, c, c_e, nh).unwrap();
            let mat = cost_scaled_nl(h, w, c, c_e, nh, ComputeMode::Materialized).unwrap();
            assert_eq!(soft.flops - mat.flops, soft.breakdown.normalize);
        }
    }

    #[test]
    fn crossover_scan_values() {
        assert_eq!(crossover(1), 2);
        assert_eq!(crossover(16), 17);
        let mut prev = 0;
        for c_e in 1..=32 {
            let t = crossover(c_e);
            assert!(t >= prev, "crossover must be nondecreasing");
            prev = t;
        }
    }

    #[test]
    fn divisibility_is_enforced() {
        assert!(cost_softmax_nl(4, 4, 6, 2, 4).is_err());
        assert!(cost_scaled_nl(4, 4, 8, 3, 2, ComputeMode::Associative).is_err());
    }

    #[test]
    fn analytic_peaks_match_instrumented_counters_exactly() {
        let mut rng = Rng::new(40);
        for &nh in &[1usize, 2, 4] {
            let c = 16;
            let c_e = c / nh;
            let x = FeatureMap::random(8, 8, c, &mut rng).unwrap();
            for variant in [BlockVariant::Softmax, BlockVariant::Scaled] {
                let cfg = AttentionConfig::multi_head(variant, c, nh).unwrap();
                let heads = init_heads(&cfg, &mut rng).unwrap();
                for mode in [ComputeMode::Associative, ComputeMode::Materialized] {
                    if variant == BlockVariant::Softmax && mode == ComputeMode::Materialized {
                        continue; // softmax has a single compute path
                    }
                    let predicted = match variant {
                        BlockVariant::Softmax => {
                            cost_softmax_nl(8, 8, c, c_e, nh)
                                .unwrap()
                                .peak_activation_elements
                        }
                        BlockVariant::Scaled => {
                            cost_scaled_nl(8, 8, c, c_e, nh, mode)
                                .unwrap()
                                .peak_activation_elements
                        }
                    };
                    let trace = MemTrace::start();
                    let y = multi_head_forward(&x, &heads, &cfg, mode).unwrap();
                    let measured = trace.peak();
                    drop(y);
                    drop(trace);
                    assert_eq!(
                        predicted, measured,
                        "{variant:?} {mode:?} nh={nh}: predicted {predicted}, measured {measured}"
                    );
                }
            }
        }
    }
}
