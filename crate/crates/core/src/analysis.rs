//! Attention-map extraction and quantitative diagnostics.
//!
//! `key_dominance` scores how strongly a map's values depend on the key
//! index alone — "vertical lines" in a rendered map. The score is the
//! between-column share of total variance: 1 when every row is identical
//! (pure key dependence), 0 when every column is identical (pure query
//! dependence).

use crate::attention::{
    embed, logits, project_direction, project_magnitude, AblationScope, AttentionConfig,
    AttentionMap, BlockVariant, EmbeddingSet, FeatureMap,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Key-dominance diagnostics for one attention map.
#[derive(Debug, Clone)]
pub struct DominanceReport {
    /// Between-column variance over total variance, in [0, 1].
    pub key_dominance: f64,
    /// Within-column (query-direction) variance per key.
    pub per_key_query_variance: Tensor,
    /// Variant that produced the map.
    pub map_source: BlockVariant,
}

/// Materializes the attention map for analysis. The softmax variant returns
/// the normalized map; the scaled variant returns the implicit
/// `(1/sqrt(HW * C_e)) q . k^T` that the aggregation applies. Ablation
/// scopes project the embeddings first.
pub fn extract_map(x: &FeatureMap, emb: &EmbeddingSet, cfg: &AttentionConfig) -> Result<AttentionMap> {
    cfg.validate()?;
    let q_e = embed(x, &emb.w_query)?;
    let k_e = embed(x, &emb.w_key)?;
    let (q, k) = match cfg.scope {
        AblationScope::Full => (q_e, k_e),
        AblationScope::MagnitudeOnly => (project_magnitude(&q_e)?, project_magnitude(&k_e)?),
        AblationScope::DirectionOnly => (project_direction(&q_e)?, project_direction(&k_e)?),
    };
    let l = logits(&q, &k)?;
    match cfg.variant {
        BlockVariant::Softmax => AttentionMap::new(Tensor::softmax_rows_in_place(l), true),
        BlockVariant::Scaled => {
            let scaled = Tensor::scale_in_place(l, 1.0 / (x.pixels() as f64).sqrt());
            AttentionMap::new(scaled, false)
        }
    }
}

/// Variance decomposition of a map: between-column variance of the column
/// means against the mean within-column variance. A constant map scores 0.
pub fn key_dominance(map: &AttentionMap) -> Result<DominanceReport> {
    let hw = map.side();
    if hw < 2 {
        return Err(Error::InvalidConfig {
            message: "key_dominance requires at least 2 pixels".into(),
        });
    }
    let a = map.values();
    let n = hw as f64;
    let mut col_means = vec![0.0; hw];
    for i in 0..hw {
        for (j, m) in col_means.iter_mut().enumerate() {
            *m += a.at(i, j);
        }
    }
    for m in &mut col_means {
        *m /= n;
    }
    let grand = col_means.iter().sum::<f64>() / n;
    let between = col_means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>() / n;
    let mut within = vec![0.0; hw];
    for (j, w) in within.iter_mut().enumerate() {
        let mu = col_means[j];
        let mut acc = 0.0;
        for i in 0..hw {
            let d = a.at(i, j) - mu;
            acc += d * d;
        }
        *w = acc / n;
    }
    let mean_within = within.iter().sum::<f64>() / n;
    let total = between + mean_within;
    let key_dominance = if total == 0.0 { 0.0 } else { between / total };
    Ok(DominanceReport {
        key_dominance,
        per_key_query_variance: Tensor::new(vec![hw], within)?,
        map_source: if map.normalized() {
            BlockVariant::Softmax
        } else {
            BlockVariant::Scaled
        },
    })
}

/// CSV for dominance results: one row per report.
pub fn dominance_csv(reports: &[DominanceReport]) -> String {
    let mut out = String::from("map_source,key_dominance\n");
    for r in reports {
        out.push_str(&format!("{},{}\n", r.map_source.name(), r.key_dominance));
    }
    out
}

fn empirical_product_variance(
    pixels: usize,
    embed_channels: usize,
    trials: usize,
    rng: &mut Rng,
    scaled: bool,
) -> Result<f64> {
    if trials < 1000 {
        return Err(Error::InvalidConfig {
            message: format!("variance estimate needs at least 1000 trials, got {trials}"),
        });
    }
    if pixels == 0 || embed_channels == 0 {
        return Err(Error::InvalidConfig {
            message: "pixels and embed_channels must be positive".into(),
        });
    }
    let scale = if scaled {
        1.0 / (pixels as f64).sqrt()
    } else {
        1.0
    };
    let mut count = 0u64;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..trials {
        let a = Tensor::standard_normal(vec![pixels, pixels], rng)?;
        let g = Tensor::standard_normal(vec![pixels, embed_channels], rng)?;
        let p = a.matmul_scaled(&g, scale)?;
        for v in p.data() {
            sum += v;
            sum_sq += v * v;
            count += 1;
        }
    }
    let mean = sum / count as f64;
    Ok(sum_sq / count as f64 - mean * mean)
}

/// Empirical elementwise variance of `(1/sqrt(HW)) A . G` with A (HW x HW)
/// and G (HW x C_e) filled i.i.d. standard normal, pooled over `trials`
/// draws. Stays near 1 for any HW.
pub fn variance_stability(
    pixels: usize,
    embed_channels: usize,
    trials: usize,
    rng: &mut Rng,
) -> Result<f64> {
    empirical_product_variance(pixels, embed_channels, trials, rng, true)
}

/// Control without the `1/sqrt(HW)` factor; grows linearly with HW.
pub fn variance_stability_unscaled(
    pixels: usize,
    embed_channels: usize,
    trials: usize,
    rng: &mut Rng,
) -> Result<f64> {
    empirical_product_variance(pixels, embed_channels, trials, rng, false)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)] // oracles use explicit index sums
mod tests {
    use super::*;
    use crate::attention::{init_embeddings, ComputeMode, InitScheme};
    use crate::attention::scaled_nl_forward;
    use crate::tensor::max_abs_diff;

    #[test]
    fn zero_weights_softmax_map_is_uniform() {
        let mut rng = Rng::new(1);
        let x = FeatureMap::random(2, 2, 3, &mut rng).unwrap();
        let cfg = AttentionConfig::new(BlockVariant::Softmax, 3, 2).with_init(InitScheme::Zeros);
        let emb = init_embeddings(&cfg, &mut rng).unwrap();
        let map = extract_map(&x, &emb, &cfg).unwrap();
        for v in map.values().data() {
            assert_eq!(*v, 0.25);
        }
    }

    #[test]
    fn zero_weights_scaled_map_is_zero() {
        let mut rng = Rng::new(2);
        let x = FeatureMap::random(2, 2, 3, &mut rng).unwrap();
        let cfg = AttentionConfig::new(BlockVariant::Scaled, 3, 2).with_init(InitScheme::Zeros);
        let emb = init_embeddings(&cfg, &mut rng).unwrap();
        let map = extract_map(&x, &emb, &cfg).unwrap();
        assert!(map.values().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_map_rows_sum_to_one() {
        let mut rng = Rng::new(3);
        let x = FeatureMap::random(3, 3, 4, &mut rng).unwrap();
        let cfg = AttentionConfig::new(BlockVariant::Softmax, 4, 2);
        let emb = init_embeddings(&cfg, &mut rng).unwrap();
        let map = extract_map(&x, &emb, &cfg).unwrap();
        for i in 0..9 {
            let sum: f64 = map.values().row(i).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn scaled_map_agrees_with_materialized_forward_internals() {
        // Pushing the extracted map through the value embedding and output
        // projection must reproduce the materialized forward (no residual).
        let mut rng = Rng::new(4);
        let x = FeatureMap::random(2, 3, 4, &mut rng).unwrap();
        let cfg = AttentionConfig::new(BlockVariant::Scaled, 4, 2).with_residual(false);
        let emb = init_embeddings(&cfg, &mut rng).unwrap();
        let map = extract_map(&x, &emb, &cfg).unwrap();
        let v = embed(&x, &emb.w_value).unwrap();
        let rebuilt = map.values().matmul(&v).unwrap().matmul(&emb.w_out).unwrap();
        let forward = scaled_nl_forward(&x, &emb, &cfg, ComputeMode::Materialized).unwrap();
        assert!(max_abs_diff(&rebuilt, forward.values()) <= 1e-12);
    }

    #[test]
    fn identical_rows_score_one() {
        let row = vec![0.1, 0.2, 0.3, 0.4];
        let map = AttentionMap::new(
            Tensor::from_rows(&[row.clone(), row.clone(), row.clone(), row]).unwrap(),
            true,
        )
        .unwrap();
        let r = key_dominance(&map).unwrap();
        assert_eq!(r.key_dominance, 1.0);
        assert!(r.per_key_query_variance.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_columns_score_zero() {
        let rows: Vec<Vec<f64>> = [0.7, 0.1, 0.15, 0.05]
            .iter()
            .map(|&v| vec![v; 4])
            .collect();
        let map = AttentionMap::new(Tensor::from_rows(&rows).unwrap(), false).unwrap();
        let r = key_dominance(&map).unwrap();
        assert_eq!(r.key_dominance, 0.0);
    }

    #[test]
    fn constant_map_scores_zero() {
        let map = AttentionMap::new(
            Tensor::new(vec![4, 4], vec![0.25; 16]).unwrap(),
            true,
        )
        .unwrap();
        assert_eq!(key_dominance(&map).unwrap().key_dominance, 0.0);
    }

    #[test]
    fn mixed_map_matches_variance_decomposition_oracle() {
        // a_ij = 0.5 * rowpattern_i + 0.5 * colpattern_j on a 4 x 4 grid.
        let rowpat = [0.0, 1.0, 2.0, 3.0];
        let colpat = [1.0, -1.0, 2.0, 0.5];
        let mut rows = Vec::new();
        for i in 0..4 {
            rows.push(
                (0..4)
                    .map(|j| 0.5 * rowpat[i] + 0.5 * colpat[j])
                    .collect::<Vec<f64>>(),
            );
        }
        let map = AttentionMap::new(Tensor::from_rows(&rows).unwrap(), false).unwrap();
        let got = key_dominance(&map).unwrap().key_dominance;

        // Brute-force decomposition straight from the definition.
        let a = |i: usize, j: usize| 0.5 * rowpat[i] + 0.5 * colpat[j];
        let col_mean =
            |j: usize| -> f64 { (0..4).map(|i| a(i, j)).sum::<f64>() / 4.0 };
        let grand = (0..4).map(col_mean).sum::<f64>() / 4.0;
        let between = (0..4)
            .map(|j| (col_mean(j) - grand) * (col_mean(j) - grand))
            .sum::<f64>()
            / 4.0;
        let within = (0..4)
            .map(|j| {
                (0..4)
                    .map(|i| (a(i, j) - col_mean(j)) * (a(i, j) - col_mean(j)))
                    .sum::<f64>()
                    / 4.0
            })
            .sum::<f64>()
            / 4.0;
        let want = between / (between + within);
        assert!((got - want).abs() <= 1e-14, "{got} vs {want}");
    }

    #[test]
    fn dominance_invariant_to_shift_and_positive_rescale() {
        let mut rng = Rng::new(5);
        let raw = Tensor::standard_normal(vec![6, 6], &mut rng).unwrap();
        let base = key_dominance(&AttentionMap::new(raw.clone(), false).unwrap())
            .unwrap()
            .key_dominance;
        let shifted = Tensor::new(
            vec![6, 6],
            raw.data().iter().map(|v| v + 7.5).collect(),
        )
        .unwrap();
        let scaled = raw.scale(3.0);
        let s1 = key_dominance(&AttentionMap::new(shifted, false).unwrap())
            .unwrap()
            .key_dominance;
        let s2 = key_dominance(&AttentionMap::new(scaled, false).unwrap())
            .unwrap()
            .key_dominance;
        assert!((base - s1).abs() <= 1e-9);
        assert!((base - s2).abs() <= 1e-9);
    }

    #[test]
    fn single_product_variance_is_one() {
        // HW = C_e = 1: the product of two standard normals has variance 1.
        let mut rng = Rng::new(6);
        let v = variance_stability(1, 1, 10_000, &mut rng).unwrap();
        assert!((v - 1.0).abs() <= 0.1, "variance {v}");
    }

    #[test]
    fn scaled_product_variance_is_stable_and_unscaled_grows() {
        let mut rng = Rng::new(7);
        let v = variance_stability(16, 4, 2000, &mut rng).unwrap();
        assert!((0.9..=1.1).contains(&v), "scaled variance {v}");
        let mut rng = Rng::new(7);
        let u = variance_stability_unscaled(16, 4, 2000, &mut rng).unwrap();
        assert!((0.9 * 16.0..=1.1 * 16.0).contains(&u), "unscaled variance {u}");
    }

    #[test]
    fn variance_estimate_standard_error_shrinks_with_trials() {
        // Repeated estimates at T and 2T trials: the spread should shrink by
        // roughly sqrt(2). Wide bounds absorb estimator noise; seeds fixed.
        let reps = 48;
        let spread = |trials: usize, seed0: u64| -> f64 {
            let estimates: Vec<f64> = (0..reps)
                .map(|r| {
                    let mut rng = Rng::new(seed0 + r as u64);
                    variance_stability(8, 2, trials, &mut rng).unwrap()
                })
                .collect();
            let mean = estimates.iter().sum::<f64>() / reps as f64;
            (estimates.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / reps as f64).sqrt()
        };
        let se_t = spread(1000, 100);
        let se_2t = spread(2000, 200);
        let ratio = se_2t / se_t;
        assert!(
            (0.4..=1.0).contains(&ratio),
            "SE ratio {ratio} (se_t {se_t}, se_2t {se_2t})"
        );
    }

    #[test]
    fn trials_precondition_enforced() {
        let mut rng = Rng::new(8);
        assert!(variance_stability(4, 2, 10, &mut rng).is_err());
    }
}
