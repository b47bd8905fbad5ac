//! Official-protocol scoring over a view plus the aggregate summaries:
//! benchmark-level macro average and count-weighted averages, with delta
//! tables between original and filtered views.
//!
//! Aggregates are computed in double precision on unrounded per-benchmark
//! values and printed at two decimals with round-half-up, so report tables
//! match the usual presentation of published scores. Scoring uses exactly
//! one prediction per query; probe-time pass@k rollouts are never reused for
//! scores.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{ViewDefinition, ViewId};
use crate::corpus::BenchmarkManifest;
use crate::verifier;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("view {benchmark_id}/{view_id:?} has no queries")]
    EmptyView { benchmark_id: String, view_id: ViewId },
    #[error("missing predictions for {benchmark_id}: {missing:?}")]
    MissingPrediction { benchmark_id: String, missing: Vec<String> },
    #[error("duplicate prediction for query {0}")]
    DuplicatePrediction(String),
    #[error("query {0} is not in the manifest")]
    UnknownQuery(String),
    #[error("no scores to aggregate")]
    EmptyScores,
    #[error("scores mix view families: {0:?} and {1:?}")]
    MixedViews(ViewId, ViewId),
    #[error("missing weight for benchmark {0}")]
    MissingWeight(String),
    #[error("weight for benchmark {0} must be positive")]
    BadWeight(String),
    #[error("mismatched benchmarks: {0}")]
    MismatchedBenchmarks(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("report: {0}")]
    Format(String),
}

/// One prediction per query: the raw generation to be verified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub query_id: String,
    pub generation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkScore {
    pub benchmark_id: String,
    pub view_id: ViewId,
    pub accuracy_pct: f64,
    pub n_queries: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightBasis {
    RetainedCounts,
    OriginalCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub per_benchmark: Vec<BenchmarkScore>,
    pub macro_avg: f64,
    pub weighted_avg: f64,
    pub weight_basis: WeightBasis,
}

/// Accuracy over a view's query set using the shared verifier, with exactly
/// one prediction per query.
pub fn score_view(
    predictions: &[Prediction],
    view: &ViewDefinition,
    manifest: &BenchmarkManifest,
) -> Result<BenchmarkScore, ScoreError> {
    if view.query_ids.is_empty() {
        return Err(ScoreError::EmptyView {
            benchmark_id: view.benchmark_id.clone(),
            view_id: view.view_id,
        });
    }
    let mut by_id: BTreeMap<&str, &str> = BTreeMap::new();
    for pred in predictions {
        if by_id.insert(&pred.query_id, &pred.generation).is_some() {
            return Err(ScoreError::DuplicatePrediction(pred.query_id.clone()));
        }
    }

    let index = manifest.query_index();
    let missing: Vec<String> = view
        .query_ids
        .iter()
        .filter(|id| !by_id.contains_key(id.as_str()))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(ScoreError::MissingPrediction {
            benchmark_id: view.benchmark_id.clone(),
            missing,
        });
    }

    let mut correct = 0usize;
    for query_id in &view.query_ids {
        let query = index
            .get(query_id.as_str())
            .ok_or_else(|| ScoreError::UnknownQuery(query_id.clone()))?;
        let generation = by_id[query_id.as_str()];
        if verifier::verify(generation, query).correct {
            correct += 1;
        }
    }
    Ok(BenchmarkScore {
        benchmark_id: view.benchmark_id.clone(),
        view_id: view.view_id,
        accuracy_pct: 100.0 * correct as f64 / view.query_ids.len() as f64,
        n_queries: view.query_ids.len(),
    })
}

fn check_same_view(scores: &[BenchmarkScore]) -> Result<(), ScoreError> {
    if scores.is_empty() {
        return Err(ScoreError::EmptyScores);
    }
    let first = scores[0].view_id;
    for score in &scores[1..] {
        if score.view_id != first {
            return Err(ScoreError::MixedViews(first, score.view_id));
        }
    }
    Ok(())
}

/// Unweighted mean of per-benchmark accuracies, computed on unrounded
/// inputs.
pub fn macro_average(scores: &[BenchmarkScore]) -> Result<f64, ScoreError> {
    check_same_view(scores)?;
    Ok(scores.iter().map(|s| s.accuracy_pct).sum::<f64>() / scores.len() as f64)
}

/// Count-weighted mean of per-benchmark accuracies.
pub fn weighted_average(
    scores: &[BenchmarkScore],
    counts: &BTreeMap<String, u64>,
) -> Result<f64, ScoreError> {
    check_same_view(scores)?;
    let mut numerator = 0.0;
    let mut denominator = 0.0;
    for score in scores {
        let weight = *counts
            .get(&score.benchmark_id)
            .ok_or_else(|| ScoreError::MissingWeight(score.benchmark_id.clone()))?;
        if weight == 0 {
            return Err(ScoreError::BadWeight(score.benchmark_id.clone()));
        }
        numerator += score.accuracy_pct * weight as f64;
        denominator += weight as f64;
    }
    Ok(numerator / denominator)
}

/// Both aggregate summaries in one report.
pub fn aggregate_report(
    scores: Vec<BenchmarkScore>,
    counts: &BTreeMap<String, u64>,
    weight_basis: WeightBasis,
) -> Result<AggregateReport, ScoreError> {
    let macro_avg = macro_average(&scores)?;
    let weighted_avg = weighted_average(&scores, counts)?;
    Ok(AggregateReport { per_benchmark: scores, macro_avg, weighted_avg, weight_basis })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaEntry {
    pub benchmark_id: String,
    pub original_pct: f64,
    pub filtered_pct: f64,
    /// Absolute score drop, original minus filtered.
    pub drop: f64,
}

/// Per-benchmark drops between matching original and filtered scores.
/// Benchmarks without a filtered score are absent from the result; a
/// filtered score without an original counterpart is an error.
pub fn delta_table(
    original: &[BenchmarkScore],
    filtered: &[BenchmarkScore],
) -> Result<Vec<DeltaEntry>, ScoreError> {
    let mut orig_by_id: BTreeMap<&str, f64> = BTreeMap::new();
    for score in original {
        if orig_by_id.insert(&score.benchmark_id, score.accuracy_pct).is_some() {
            return Err(ScoreError::MismatchedBenchmarks(format!(
                "duplicate original score for {}",
                score.benchmark_id
            )));
        }
    }
    let mut filt_by_id: BTreeMap<&str, f64> = BTreeMap::new();
    for score in filtered {
        if !orig_by_id.contains_key(score.benchmark_id.as_str()) {
            return Err(ScoreError::MismatchedBenchmarks(format!(
                "filtered score for {} has no original counterpart",
                score.benchmark_id
            )));
        }
        if filt_by_id.insert(&score.benchmark_id, score.accuracy_pct).is_some() {
            return Err(ScoreError::MismatchedBenchmarks(format!(
                "duplicate filtered score for {}",
                score.benchmark_id
            )));
        }
    }
    Ok(original
        .iter()
        .filter_map(|score| {
            filt_by_id.get(score.benchmark_id.as_str()).map(|filtered_pct| DeltaEntry {
                benchmark_id: score.benchmark_id.clone(),
                original_pct: score.accuracy_pct,
                filtered_pct: *filtered_pct,
                drop: score.accuracy_pct - filtered_pct,
            })
        })
        .collect())
}

/// Round half away from zero at two decimals, the printing rule for report
/// tables.
pub fn round_half_up_2(x: f64) -> f64 {
    let scaled = (x.abs() * 100.0 + 0.5).floor();
    let rounded = scaled / 100.0;
    if x < 0.0 {
        -rounded
    } else {
        rounded
    }
}

/// Fixed two-decimal presentation of a score.
pub fn format_score(x: f64) -> String {
    format!("{:.2}", round_half_up_2(x))
}

/// CSV mirror of an aggregate report. Columns:
/// `row,benchmark_id,view_id,n_queries,accuracy_pct`, with one `score` row
/// per benchmark followed by the aggregate rows.
pub fn write_report_csv(report: &AggregateReport, path: &Path) -> Result<(), ScoreError> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| ScoreError::Format(e.to_string()))?;
    writer
        .write_record(["row", "benchmark_id", "view_id", "n_queries", "accuracy_pct"])
        .map_err(|e| ScoreError::Format(e.to_string()))?;
    let view_label = |view: ViewId| match view {
        ViewId::Original => "original",
        ViewId::Filtered => "filtered",
    };
    let total: usize = report.per_benchmark.iter().map(|s| s.n_queries).sum();
    for score in &report.per_benchmark {
        writer
            .write_record([
                "score",
                &score.benchmark_id,
                view_label(score.view_id),
                &score.n_queries.to_string(),
                &format_score(score.accuracy_pct),
            ])
            .map_err(|e| ScoreError::Format(e.to_string()))?;
    }
    let view = report
        .per_benchmark
        .first()
        .map(|s| view_label(s.view_id))
        .unwrap_or("filtered");
    writer
        .write_record(["macro_avg", "", view, "", &format_score(report.macro_avg)])
        .map_err(|e| ScoreError::Format(e.to_string()))?;
    let weighted_row = match report.weight_basis {
        WeightBasis::RetainedCounts => "query_weighted_avg",
        WeightBasis::OriginalCounts => "original_weighted_avg",
    };
    writer
        .write_record([
            weighted_row,
            "",
            view,
            &total.to_string(),
            &format_score(report.weighted_avg),
        ])
        .map_err(|e| ScoreError::Format(e.to_string()))?;
    writer.flush()?;
    Ok(())
}

/// JSON mirror of an aggregate report (unrounded values).
pub fn write_report_json(report: &AggregateReport, path: &Path) -> Result<(), ScoreError> {
    let mut text =
        serde_json::to_string_pretty(report).map_err(|e| ScoreError::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::{build_views, probes_from_counts};
    use crate::corpus::{AnswerKind, BenchmarkManifest, Query, RetentionPolicy};
    use crate::verifier::AnswerKey;
    use proptest::prelude::*;

    fn score(id: &str, view: ViewId, pct: f64, n: usize) -> BenchmarkScore {
        BenchmarkScore {
            benchmark_id: id.into(),
            view_id: view,
            accuracy_pct: pct,
            n_queries: n,
        }
    }

    fn manifest(n: usize) -> BenchmarkManifest {
        BenchmarkManifest {
            benchmark_id: "bench".into(),
            policy: RetentionPolicy::Filterable,
            official_tolerance: None,
            queries: (0..n)
                .map(|i| Query {
                    query_id: format!("q{i}"),
                    media: vec![],
                    question: format!("Q{i}?"),
                    options: Some(vec!["Red".into(), "Blue".into()]),
                    gold: AnswerKey::McqLetter { letter: 'B' },
                    answer_kind: AnswerKind::McqLetter,
                })
                .collect(),
        }
    }

    fn original_view(manifest: &BenchmarkManifest) -> ViewDefinition {
        let probes =
            probes_from_counts(manifest, &std::collections::BTreeMap::new(), 16).unwrap();
        build_views(manifest, &probes, None).unwrap().original
    }

    #[test]
    fn three_of_four_is_75_percent() {
        let manifest = manifest(4);
        let view = original_view(&manifest);
        let predictions = vec![
            Prediction { query_id: "q0".into(), generation: "<answer>B</answer>".into() },
            Prediction { query_id: "q1".into(), generation: "<answer>B</answer>".into() },
            Prediction { query_id: "q2".into(), generation: "<answer>B</answer>".into() },
            Prediction { query_id: "q3".into(), generation: "<answer>A</answer>".into() },
        ];
        let score = score_view(&predictions, &view, &manifest).unwrap();
        assert_eq!(score.accuracy_pct, 75.0);
        assert_eq!(score.n_queries, 4);
    }

    #[test]
    fn empty_generation_counts_as_incorrect() {
        let manifest = manifest(2);
        let view = original_view(&manifest);
        let predictions = vec![
            Prediction { query_id: "q0".into(), generation: "<answer>B</answer>".into() },
            Prediction { query_id: "q1".into(), generation: "".into() },
        ];
        let score = score_view(&predictions, &view, &manifest).unwrap();
        assert_eq!(score.accuracy_pct, 50.0);
    }

    #[test]
    fn empty_view_is_an_error() {
        let manifest = manifest(2);
        let mut view = original_view(&manifest);
        view.query_ids.clear();
        let err = score_view(&[], &view, &manifest).unwrap_err();
        assert!(matches!(err, ScoreError::EmptyView { .. }));
    }

    #[test]
    fn missing_prediction_lists_absent_ids() {
        let manifest = manifest(3);
        let view = original_view(&manifest);
        let predictions =
            vec![Prediction { query_id: "q0".into(), generation: "B".into() }];
        match score_view(&predictions, &view, &manifest).unwrap_err() {
            ScoreError::MissingPrediction { missing, .. } => {
                assert_eq!(missing, vec!["q1".to_string(), "q2".to_string()]);
            }
            other => panic!("expected missing predictions, got {other:?}"),
        }
    }

    #[test]
    fn macro_average_reference_row() {
        // Published per-benchmark accuracies for one reference model on the
        // filtered view; the printed macro average is 24.92.
        let values = [27.53, 29.57, 24.36, 24.91, 27.14, 21.41, 12.73, 27.67, 29.00];
        let scores: Vec<BenchmarkScore> = values
            .iter()
            .enumerate()
            .map(|(i, v)| score(&format!("b{i}"), ViewId::Filtered, *v, 100))
            .collect();
        let macro_avg = macro_average(&scores).unwrap();
        assert!((macro_avg - 24.92).abs() <= 0.01);
    }

    #[test]
    fn macro_average_trivial_cases() {
        let single = [score("b0", ViewId::Filtered, 41.5, 10)];
        assert_eq!(macro_average(&single).unwrap(), 41.5);
        let equal: Vec<BenchmarkScore> = (0..5)
            .map(|i| score(&format!("b{i}"), ViewId::Filtered, 33.25, 7))
            .collect();
        assert_eq!(macro_average(&equal).unwrap(), 33.25);
    }

    #[test]
    fn weighted_average_with_equal_counts_equals_macro() {
        let scores: Vec<BenchmarkScore> = [10.0, 20.0, 40.0]
            .iter()
            .enumerate()
            .map(|(i, v)| score(&format!("b{i}"), ViewId::Filtered, *v, 50))
            .collect();
        let counts: BTreeMap<String, u64> =
            scores.iter().map(|s| (s.benchmark_id.clone(), 50)).collect();
        let weighted = weighted_average(&scores, &counts).unwrap();
        let macro_avg = macro_average(&scores).unwrap();
        assert!((weighted - macro_avg).abs() < 1e-12);
    }

    #[test]
    fn missing_weight_is_an_error() {
        let scores = [score("b0", ViewId::Filtered, 10.0, 5)];
        let err = weighted_average(&scores, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, ScoreError::MissingWeight(_)));
    }

    #[test]
    fn delta_table_reference_cells() {
        let original = [
            score("daily_omni", ViewId::Original, 53.64, 1197),
            score("video_holmes", ViewId::Original, 42.44, 1837),
            score("av_odyssey", ViewId::Original, 29.00, 4555),
        ];
        let filtered = [
            score("daily_omni", ViewId::Filtered, 1.05, 237),
            score("video_holmes", ViewId::Filtered, 40.94, 885),
        ];
        let deltas = delta_table(&original, &filtered).unwrap();
        assert_eq!(deltas.len(), 2);
        assert!((deltas[0].drop - 52.59).abs() <= 0.01);
        assert!((deltas[1].drop - 1.50).abs() <= 0.01);
    }

    #[test]
    fn identical_views_have_zero_drop() {
        let original = [score("b0", ViewId::Original, 31.0, 10)];
        let filtered = [score("b0", ViewId::Filtered, 31.0, 10)];
        let deltas = delta_table(&original, &filtered).unwrap();
        assert_eq!(deltas[0].drop, 0.0);
    }

    #[test]
    fn unmatched_filtered_benchmark_is_an_error() {
        let original = [score("b0", ViewId::Original, 10.0, 5)];
        let filtered = [score("b1", ViewId::Filtered, 10.0, 5)];
        assert!(matches!(
            delta_table(&original, &filtered),
            Err(ScoreError::MismatchedBenchmarks(_))
        ));
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        // 1.125 is exactly representable, so .5 at the second decimal is a
        // true tie: half-up gives 1.13 where ties-to-even would give 1.12.
        assert_eq!(format_score(1.125), "1.13");
        assert_eq!(format_score(-1.125), "-1.13");
        assert_eq!(format_score(24.92444), "24.92");
        assert_eq!(format_score(24.9266), "24.93");
        assert_eq!(format_score(0.0), "0.00");
    }

    proptest! {
        #[test]
        fn aggregates_are_permutation_invariant(
            values in proptest::collection::vec(0.0f64..100.0, 2..9),
            seed in 0u64..1000,
        ) {
            let scores: Vec<BenchmarkScore> = values
                .iter()
                .enumerate()
                .map(|(i, v)| score(&format!("b{i}"), ViewId::Filtered, *v, i + 1))
                .collect();
            let counts: BTreeMap<String, u64> = scores
                .iter()
                .map(|s| (s.benchmark_id.clone(), s.n_queries as u64))
                .collect();
            let mut shuffled = scores.clone();
            // Simple deterministic shuffle.
            let n = shuffled.len();
            for i in 0..n {
                let j = (seed as usize + i * 7) % n;
                shuffled.swap(i, j);
            }
            let a = macro_average(&scores).unwrap();
            let b = macro_average(&shuffled).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            let wa = weighted_average(&scores, &counts).unwrap();
            let wb = weighted_average(&shuffled, &counts).unwrap();
            prop_assert!((wa - wb).abs() < 1e-9);
            // Macro average is bounded by min and max.
            let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(a >= min - 1e-9 && a <= max + 1e-9);
        }
    }
}
