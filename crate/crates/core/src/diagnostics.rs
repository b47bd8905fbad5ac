//! Diagnostic statistics: per-query correct-rollout histograms, correlation
//! shifts between omni scores and unimodal reference axes, and least-squares
//! fits.
//!
//! The unimodal axis is a plain mean of the published source scores even
//! though the pools mix 0-100 scores with 0-10 style entries; no reweighting
//! is applied, so axis values should be read with that scale caveat.
//! Correlation shifts computed from a handful of models carry an explicit
//! low-n caveat flag.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::ProbeResult;

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("probes mix rollout counts: {0} and {1}")]
    MixedN(usize, usize),
    #[error("inputs have different lengths: {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {0} points, got {1}")]
    TooFewPoints(usize, usize),
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),
    #[error("insufficient models: {0}")]
    InsufficientModels(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(String),
}

/// Counts of queries per correct-rollout count; bucket index = number of
/// correct visual-only rollouts, 0..=n.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramData {
    pub benchmark_id: String,
    pub buckets: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Vision,
    Audio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceScore {
    pub name: String,
    pub score: f64,
}

/// Published source scores behind one model's vision or audio reference
/// axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnimodalPool {
    pub model_id: String,
    pub axis: Axis,
    pub source_scores: Vec<SourceScore>,
}

impl UnimodalPool {
    pub fn new(
        model_id: impl Into<String>,
        axis: Axis,
        source_scores: Vec<(String, f64)>,
    ) -> Result<Self, DiagError> {
        let pool = UnimodalPool {
            model_id: model_id.into(),
            axis,
            source_scores: source_scores
                .into_iter()
                .map(|(name, score)| SourceScore { name, score })
                .collect(),
        };
        pool.validate()?;
        Ok(pool)
    }

    pub fn validate(&self) -> Result<(), DiagError> {
        if self.source_scores.is_empty() {
            return Err(DiagError::TooFewPoints(1, 0));
        }
        for s in &self.source_scores {
            if !s.score.is_finite() {
                return Err(DiagError::Format(format!(
                    "source score {} for {} is not finite",
                    s.name, self.model_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationShift {
    pub benchmark_id: String,
    pub axis: Axis,
    pub r_original: f64,
    pub r_filtered: f64,
    /// Original minus filtered; positive means the cleaned score is less
    /// correlated with the unimodal reference.
    pub delta_r: f64,
    pub n_models: usize,
    /// Set when the correlation rests on few models and is descriptive only.
    pub low_n_caveat: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Exact bucket counts per correct-rollout count. All probes must share the
/// same `n`; buckets are sized `n + 1`. An empty probe list yields the
/// all-zero 17-bucket histogram of the default 16-rollout protocol.
pub fn histogram(benchmark_id: &str, probes: &[ProbeResult]) -> Result<HistogramData, DiagError> {
    let n = match probes.first() {
        Some(first) => first.n,
        None => 16,
    };
    let mut buckets = vec![0u64; n + 1];
    for probe in probes {
        if probe.n != n {
            return Err(DiagError::MixedN(n, probe.n));
        }
        buckets[probe.correct_count] += 1;
    }
    Ok(HistogramData { benchmark_id: benchmark_id.to_string(), buckets })
}

/// Unweighted mean of a pool's source scores.
pub fn unimodal_axis(pool: &UnimodalPool) -> f64 {
    let sum: f64 = pool.source_scores.iter().map(|s| s.score).sum();
    sum / pool.source_scores.len() as f64
}

fn centered_moments(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64, f64, f64), DiagError> {
    if xs.len() != ys.len() {
        return Err(DiagError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(DiagError::TooFewPoints(2, xs.len()));
    }
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mean_x;
        let dy = y - mean_y;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    Ok((mean_x, mean_y, sxx, syy, sxy))
}

/// Sample Pearson correlation; errors on degenerate variance in either
/// input.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64, DiagError> {
    let (_, _, sxx, syy, sxy) = centered_moments(xs, ys)?;
    if sxx == 0.0 || syy == 0.0 {
        return Err(DiagError::DegenerateVariance(
            if sxx == 0.0 { "xs are constant" } else { "ys are constant" }.into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Least-squares line `y = slope * x + intercept` with `r_squared` equal to
/// the squared Pearson correlation (0 when the ys are constant).
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit, DiagError> {
    let (mean_x, mean_y, sxx, syy, sxy) = centered_moments(xs, ys)?;
    if sxx == 0.0 {
        return Err(DiagError::DegenerateVariance("xs are constant".into()));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let r_squared = if syy == 0.0 {
        0.0
    } else {
        ((sxy * sxy) / (sxx * syy)).clamp(0.0, 1.0)
    };
    Ok(LinearFit { slope, intercept, r_squared })
}

/// Correlation of one benchmark's original and filtered scores against one
/// unimodal axis across models, plus the shift between them.
///
/// Every pool's model must have both score views; benchmarks without a
/// filtered view are excluded upstream. Constant scores surface as
/// `DegenerateVariance`, leaving the shift undefined for that benchmark.
pub fn correlation_shift(
    benchmark_id: &str,
    axis: Axis,
    pools: &[UnimodalPool],
    original_scores: &BTreeMap<String, f64>,
    filtered_scores: &BTreeMap<String, f64>,
) -> Result<CorrelationShift, DiagError> {
    let mut axis_values = Vec::new();
    let mut originals = Vec::new();
    let mut filtereds = Vec::new();
    for pool in pools {
        if pool.axis != axis {
            continue;
        }
        pool.validate()?;
        let original = original_scores.get(&pool.model_id).ok_or_else(|| {
            DiagError::InsufficientModels(format!("{} has no original score", pool.model_id))
        })?;
        let filtered = filtered_scores.get(&pool.model_id).ok_or_else(|| {
            DiagError::InsufficientModels(format!("{} has no filtered score", pool.model_id))
        })?;
        axis_values.push(unimodal_axis(pool));
        originals.push(*original);
        filtereds.push(*filtered);
    }
    if axis_values.len() < 2 {
        return Err(DiagError::InsufficientModels(format!(
            "need at least 2 models with {axis:?} pools, got {}",
            axis_values.len()
        )));
    }
    let r_original = pearson_r(&axis_values, &originals)?;
    let r_filtered = pearson_r(&axis_values, &filtereds)?;
    Ok(CorrelationShift {
        benchmark_id: benchmark_id.to_string(),
        axis,
        r_original,
        r_filtered,
        delta_r: r_original - r_filtered,
        n_models: axis_values.len(),
        low_n_caveat: axis_values.len() <= 4,
    })
}

/// CSV rows `bucket,count` for one histogram.
pub fn write_histogram_csv(hist: &HistogramData, path: &Path) -> Result<(), DiagError> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| DiagError::Format(e.to_string()))?;
    writer
        .write_record(["bucket", "count"])
        .map_err(|e| DiagError::Format(e.to_string()))?;
    for (bucket, count) in hist.buckets.iter().enumerate() {
        writer
            .write_record([bucket.to_string(), count.to_string()])
            .map_err(|e| DiagError::Format(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

/// Plain-text bar rendering of a histogram, one row per bucket.
pub fn render_histogram_text(hist: &HistogramData) -> String {
    let max = hist.buckets.iter().copied().max().unwrap_or(0).max(1);
    let mut out = String::new();
    out.push_str(&format!("{}\n", hist.benchmark_id));
    for (bucket, count) in hist.buckets.iter().enumerate() {
        let width = ((*count as f64 / max as f64) * 40.0).round() as usize;
        out.push_str(&format!("{bucket:>3} | {:<40} {count}\n", "#".repeat(width)));
    }
    out
}

/// JSON summary of a set of correlation shifts.
pub fn write_shifts_json(shifts: &[CorrelationShift], path: &Path) -> Result<(), DiagError> {
    let mut text =
        serde_json::to_string_pretty(shifts).map_err(|e| DiagError::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::{retention_for, RetentionReason};
    use crate::corpus::RetentionPolicy;
    use proptest::prelude::*;

    fn probe(id: &str, correct: usize, n: usize) -> ProbeResult {
        let (retained, reason) = retention_for(RetentionPolicy::Filterable, correct);
        ProbeResult {
            query_id: id.into(),
            correct_count: correct,
            n,
            retained,
            retention_reason: reason,
        }
    }

    #[test]
    fn histogram_counts_exactly() {
        let probes = vec![
            probe("a", 0, 16),
            probe("b", 0, 16),
            probe("c", 1, 16),
            probe("d", 16, 16),
        ];
        let hist = histogram("bench", &probes).unwrap();
        assert_eq!(hist.buckets.len(), 17);
        assert_eq!(hist.buckets[0], 2);
        assert_eq!(hist.buckets[1], 1);
        assert_eq!(hist.buckets[16], 1);
        assert_eq!(hist.buckets.iter().sum::<u64>(), 4);
    }

    #[test]
    fn empty_histogram_is_all_zero() {
        let hist = histogram("bench", &[]).unwrap();
        assert_eq!(hist.buckets, vec![0; 17]);
    }

    #[test]
    fn mixed_n_is_rejected() {
        let probes = vec![probe("a", 0, 16), probe("b", 0, 8)];
        assert!(matches!(histogram("bench", &probes), Err(DiagError::MixedN(16, 8))));
    }

    #[test]
    fn zero_bucket_matches_retention_count() {
        let mut probes = Vec::new();
        for i in 0..1197 {
            probes.push(probe(&format!("q{i}"), if i < 237 { 0 } else { 1 + i % 16 }, 16));
        }
        let hist = histogram("bench", &probes).unwrap();
        assert_eq!(hist.buckets[0], 237);
        assert_eq!(hist.buckets.iter().sum::<u64>(), 1197);
    }

    #[test]
    fn audio_pool_mean_matches_reference() {
        // Published audio-side source scores for one 3B reference model.
        let pool = UnimodalPool::new(
            "qwen2.5-omni-3b",
            Axis::Audio,
            [49.37, 50.23, 74.73, 42.10, 98.85, 68.81, 63.30]
                .iter()
                .enumerate()
                .map(|(i, v)| (format!("s{i}"), *v))
                .collect(),
        )
        .unwrap();
        // Oracle: hand summation 447.39 / 7 = 63.912857...
        assert!((unimodal_axis(&pool) - 63.91).abs() <= 0.01);
    }

    #[test]
    fn single_entry_pool_is_its_own_mean() {
        let pool = UnimodalPool::new("m", Axis::Vision, vec![("s".into(), 41.5)]).unwrap();
        assert_eq!(unimodal_axis(&pool), 41.5);
        let equal = UnimodalPool::new(
            "m",
            Axis::Vision,
            vec![("a".into(), 7.0), ("b".into(), 7.0), ("c".into(), 7.0)],
        )
        .unwrap();
        assert_eq!(unimodal_axis(&equal), 7.0);
    }

    #[test]
    fn pearson_reference_values() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson_r(&xs, &xs).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson_r(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);
        // Oracle: direct covariance formula by hand gives 3/5.
        let ys = [2.0, 1.0, 4.0, 3.0];
        assert!((pearson_r(&xs, &ys).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn degenerate_variance_is_an_error() {
        let xs = [1.0, 2.0, 3.0];
        let constant = [5.0, 5.0, 5.0];
        assert!(matches!(pearson_r(&xs, &constant), Err(DiagError::DegenerateVariance(_))));
        assert!(matches!(pearson_r(&constant, &xs), Err(DiagError::DegenerateVariance(_))));
        assert!(matches!(pearson_r(&[1.0], &[2.0]), Err(DiagError::TooFewPoints(2, 1))));
    }

    #[test]
    fn linear_fit_reference_values() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let fit = linear_fit(&xs, &ys).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert!((fit.intercept - 1.0).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);

        let constant = [4.0, 4.0, 4.0, 4.0];
        let fit = linear_fit(&xs, &constant).unwrap();
        assert_eq!(fit.slope, 0.0);
        assert_eq!(fit.intercept, 4.0);
        assert_eq!(fit.r_squared, 0.0);

        // Oracle: normal equations by hand on (0,0), (1,0), (2,3).
        let fit = linear_fit(&[0.0, 1.0, 2.0], &[0.0, 0.0, 3.0]).unwrap();
        assert!((fit.slope - 1.5).abs() < 1e-12);
        assert!((fit.intercept + 0.5).abs() < 1e-12);
    }

    fn four_model_pools(axis: Axis) -> Vec<UnimodalPool> {
        [("m1", 40.0), ("m2", 50.0), ("m3", 60.0), ("m4", 75.0)]
            .iter()
            .map(|(id, v)| {
                UnimodalPool::new(*id, axis, vec![("s".into(), *v)]).unwrap()
            })
            .collect()
    }

    #[test]
    fn equal_views_have_zero_shift() {
        let pools = four_model_pools(Axis::Vision);
        let scores: BTreeMap<String, f64> = [
            ("m1".to_string(), 20.0),
            ("m2".to_string(), 30.0),
            ("m3".to_string(), 28.0),
            ("m4".to_string(), 44.0),
        ]
        .into_iter()
        .collect();
        let shift =
            correlation_shift("bench", Axis::Vision, &pools, &scores, &scores).unwrap();
        assert_eq!(shift.delta_r, 0.0);
        assert_eq!(shift.n_models, 4);
        assert!(shift.low_n_caveat);
    }

    #[test]
    fn constant_filtered_scores_surface_degenerate_variance() {
        let pools = four_model_pools(Axis::Audio);
        let originals: BTreeMap<String, f64> = [
            ("m1".to_string(), 20.0),
            ("m2".to_string(), 30.0),
            ("m3".to_string(), 28.0),
            ("m4".to_string(), 44.0),
        ]
        .into_iter()
        .collect();
        let constant: BTreeMap<String, f64> =
            originals.keys().map(|k| (k.clone(), 10.0)).collect();
        let err =
            correlation_shift("bench", Axis::Audio, &pools, &originals, &constant).unwrap_err();
        assert!(matches!(err, DiagError::DegenerateVariance(_)));
    }

    #[test]
    fn missing_view_is_insufficient_models() {
        let pools = four_model_pools(Axis::Vision);
        let mut originals: BTreeMap<String, f64> = [
            ("m1".to_string(), 20.0),
            ("m2".to_string(), 30.0),
            ("m3".to_string(), 28.0),
            ("m4".to_string(), 44.0),
        ]
        .into_iter()
        .collect();
        let filtered = originals.clone();
        originals.remove("m3");
        let err =
            correlation_shift("bench", Axis::Vision, &pools, &originals, &filtered).unwrap_err();
        assert!(matches!(err, DiagError::InsufficientModels(_)));
    }

    #[test]
    fn shift_uses_published_row_against_axis() {
        // Original-view Daily-Omni omni columns vs. a vision axis across the
        // four omni reference models; oracle values computed with the direct
        // covariance formula in a spreadsheet-style calculation.
        let pools = vec![
            UnimodalPool::new("qwen2.5-omni-3b", Axis::Vision, vec![("avg".into(), 49.78)])
                .unwrap(),
            UnimodalPool::new("qwen2.5-omni-7b", Axis::Vision, vec![("avg".into(), 54.61)])
                .unwrap(),
            UnimodalPool::new("qwen3-omni-30b-a3b-instruct", Axis::Vision, vec![("avg".into(), 64.08)])
                .unwrap(),
            UnimodalPool::new("qwen3-omni-30b-a3b-thinking", Axis::Vision, vec![("avg".into(), 67.47)])
                .unwrap(),
        ];
        let originals: BTreeMap<String, f64> = [
            ("qwen2.5-omni-3b".to_string(), 46.86),
            ("qwen2.5-omni-7b".to_string(), 51.51),
            ("qwen3-omni-30b-a3b-instruct".to_string(), 57.65),
            ("qwen3-omni-30b-a3b-thinking".to_string(), 70.65),
        ]
        .into_iter()
        .collect();
        let filtereds: BTreeMap<String, f64> = [
            ("qwen2.5-omni-3b".to_string(), 27.53),
            ("qwen2.5-omni-7b".to_string(), 31.78),
            ("qwen3-omni-30b-a3b-instruct".to_string(), 31.22),
            ("qwen3-omni-30b-a3b-thinking".to_string(), 42.62),
        ]
        .into_iter()
        .collect();
        let shift =
            correlation_shift("daily_omni", Axis::Vision, &pools, &originals, &filtereds).unwrap();
        assert!(shift.r_original > 0.9, "r_original = {}", shift.r_original);
        assert_eq!(shift.delta_r, shift.r_original - shift.r_filtered);
        // Brute-force oracle from an independent E[XY]-style formula.
        let oracle = |xs: &[f64], ys: &[f64]| {
            let n = xs.len() as f64;
            let sx: f64 = xs.iter().sum();
            let sy: f64 = ys.iter().sum();
            let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
            let sxx: f64 = xs.iter().map(|x| x * x).sum();
            let syy: f64 = ys.iter().map(|y| y * y).sum();
            (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
        };
        let xs = [49.78, 54.61, 64.08, 67.47];
        let orig = [46.86, 51.51, 57.65, 70.65];
        let filt = [27.53, 31.78, 31.22, 42.62];
        assert!((shift.r_original - oracle(&xs, &orig)).abs() < 1e-9);
        assert!((shift.r_filtered - oracle(&xs, &filt)).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn pearson_stays_in_unit_interval_and_is_affine_invariant(
            xs in proptest::collection::vec(-100.0f64..100.0, 3..12),
            scale in 0.1f64..10.0,
            shift in -50.0f64..50.0,
        ) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * 0.5 + (i as f64 % 3.0)).collect();
            if let Ok(r) = pearson_r(&xs, &ys) {
                prop_assert!((-1.0..=1.0).contains(&r));
                let xs_scaled: Vec<f64> = xs.iter().map(|x| x * scale + shift).collect();
                let r2 = pearson_r(&xs_scaled, &ys).unwrap();
                prop_assert!((r - r2).abs() < 1e-6, "r={r} r2={r2}");
            }
        }

        #[test]
        fn residuals_sum_to_zero(
            pts in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..16),
        ) {
            let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
            if let Ok(fit) = linear_fit(&xs, &ys) {
                let residual_sum: f64 = xs
                    .iter()
                    .zip(&ys)
                    .map(|(x, y)| y - (fit.slope * x + fit.intercept))
                    .sum();
                let scale = ys.iter().map(|y| y.abs()).fold(1.0, f64::max);
                prop_assert!((residual_sum / scale).abs() < 1e-9);
            }
        }
    }
}
