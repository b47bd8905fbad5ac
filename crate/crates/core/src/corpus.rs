//! Benchmark manifest ingestion, validation, and media preprocessing plans.
//!
//! Manifests are JSONL files: line 1 is a header object with `benchmark_id`,
//! `policy`, and an optional `official_tolerance`; every following line is one
//! query. The harness never decodes media; it only computes frame-sampling and
//! resize plans that are handed to the endpoint layer or to external
//! preprocessors.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::verifier::{self, AnswerKey};

/// Frame budget for a single video.
pub const FRAME_BUDGET: usize = 120;
/// Sampling rate for short videos.
pub const FRAME_RATE_FPS: f64 = 2.0;
/// Target shorter edge for sampled video frames.
pub const FRAME_SHORT_EDGE_PX: u32 = 448;
/// Shorter-edge cap above which still images are downscaled.
pub const IMAGE_SHORT_EDGE_PX: u32 = 768;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("validation error for query {query_id}: {msg}")]
    Validation { query_id: String, msg: String },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("invalid duration: {0}")]
    InvalidDuration(f64),
    #[error("invalid dimensions: {0}x{1}")]
    InvalidDims(u32, u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-benchmark retention policy applied during cleaning.
///
/// `FullRetainAudioOptions` marks benchmarks whose answer options themselves
/// carry audio, so a visual-only filtered subset is not defined and the full
/// subset is retained. `DiagnosticOnlyFullRetain` marks benchmarks that are
/// probed for diagnosis but retained fully because filtering would
/// destabilize score comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetentionPolicy {
    Filterable,
    FullRetainAudioOptions,
    DiagnosticOnlyFullRetain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediaKind {
    Video,
    Image,
    Audio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediaRef {
    pub kind: MediaKind,
    pub uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
}

impl MediaRef {
    pub fn video(uri: impl Into<String>, duration_s: f64) -> Self {
        MediaRef {
            kind: MediaKind::Video,
            uri: uri.into(),
            duration_s: Some(duration_s),
            width: None,
            height: None,
        }
    }

    pub fn image(uri: impl Into<String>, width: u32, height: u32) -> Self {
        MediaRef {
            kind: MediaKind::Image,
            uri: uri.into(),
            duration_s: None,
            width: Some(width),
            height: Some(height),
        }
    }

    pub fn audio(uri: impl Into<String>) -> Self {
        MediaRef {
            kind: MediaKind::Audio,
            uri: uri.into(),
            duration_s: None,
            width: None,
            height: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKind {
    McqLetter,
    McqText,
    Numeric,
}

/// One benchmark item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    #[serde(default)]
    pub media: Vec<MediaRef>,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    pub gold: AnswerKey,
    pub answer_kind: AnswerKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub benchmark_id: String,
    pub policy: RetentionPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub official_tolerance: Option<f64>,
    pub queries: Vec<Query>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    benchmark_id: String,
    policy: RetentionPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    official_tolerance: Option<f64>,
}

impl BenchmarkManifest {
    pub fn query(&self, query_id: &str) -> Option<&Query> {
        self.queries.iter().find(|q| q.query_id == query_id)
    }

    /// Index of queries by id for repeated lookups.
    pub fn query_index(&self) -> BTreeMap<&str, &Query> {
        self.queries
            .iter()
            .map(|q| (q.query_id.as_str(), q))
            .collect()
    }
}

/// Frame timestamps plus the resize target for one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub timestamps_s: Vec<f64>,
    pub target_short_edge_px: u32,
}

/// Load and validate a benchmark manifest from a JSONL file.
pub fn load_manifest(path: &Path) -> Result<BenchmarkManifest, CorpusError> {
    let text = fs::read_to_string(path)?;
    parse_manifest(&text)
}

/// Parse manifest text (header line plus one query per line).
pub fn parse_manifest(text: &str) -> Result<BenchmarkManifest, CorpusError> {
    let mut lines = text.lines().enumerate();
    let (_, header_line) = lines
        .next()
        .ok_or_else(|| CorpusError::Parse { line: 1, msg: "empty manifest file".into() })?;
    let header: ManifestHeader =
        serde_json::from_str(header_line).map_err(|e| CorpusError::Parse {
            line: 1,
            msg: format!("bad header: {e}"),
        })?;

    let mut queries = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut query: Query = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        // Numeric golds without their own tolerance inherit the benchmark one.
        if let AnswerKey::Numeric { tolerance, .. } = &mut query.gold {
            if tolerance.is_none() {
                *tolerance = header.official_tolerance;
            }
        }
        queries.push(query);
    }

    let manifest = BenchmarkManifest {
        benchmark_id: header.benchmark_id,
        policy: header.policy,
        official_tolerance: header.official_tolerance,
        queries,
    };
    validate_manifest(&manifest)?;
    Ok(manifest)
}

/// Write a manifest in the JSONL format read by [`load_manifest`].
pub fn write_manifest(manifest: &BenchmarkManifest, path: &Path) -> Result<(), CorpusError> {
    validate_manifest(manifest)?;
    let header = ManifestHeader {
        benchmark_id: manifest.benchmark_id.clone(),
        policy: manifest.policy,
        official_tolerance: manifest.official_tolerance,
    };
    let mut out = Vec::new();
    serde_json::to_writer(&mut out, &header).map_err(|e| CorpusError::Manifest(e.to_string()))?;
    out.push(b'\n');
    for query in &manifest.queries {
        serde_json::to_writer(&mut out, query)
            .map_err(|e| CorpusError::Manifest(e.to_string()))?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Check every manifest- and query-level invariant.
pub fn validate_manifest(manifest: &BenchmarkManifest) -> Result<(), CorpusError> {
    if manifest.benchmark_id.trim().is_empty() {
        return Err(CorpusError::Manifest("benchmark_id must be non-empty".into()));
    }
    if let Some(tol) = manifest.official_tolerance {
        if !tol.is_finite() || tol < 0.0 {
            return Err(CorpusError::Manifest(format!(
                "official_tolerance must be a nonnegative number, got {tol}"
            )));
        }
        let has_numeric = manifest
            .queries
            .iter()
            .any(|q| q.answer_kind == AnswerKind::Numeric);
        if !has_numeric {
            return Err(CorpusError::Manifest(
                "official_tolerance set but no query has a numeric answer".into(),
            ));
        }
    }

    let mut seen = BTreeSet::new();
    for query in &manifest.queries {
        if !seen.insert(query.query_id.as_str()) {
            return Err(CorpusError::Validation {
                query_id: query.query_id.clone(),
                msg: "duplicate query_id".into(),
            });
        }
        validate_query(query)?;
    }
    Ok(())
}

fn validate_query(query: &Query) -> Result<(), CorpusError> {
    let fail = |msg: String| CorpusError::Validation {
        query_id: query.query_id.clone(),
        msg,
    };
    if query.query_id.trim().is_empty() {
        return Err(fail("query_id must be non-empty".into()));
    }
    if query.answer_kind != query.gold.kind() {
        return Err(fail(format!(
            "answer_kind {:?} does not match gold kind {:?}",
            query.answer_kind,
            query.gold.kind()
        )));
    }
    match query.answer_kind {
        AnswerKind::McqLetter | AnswerKind::McqText => {
            let options = query
                .options
                .as_ref()
                .filter(|o| !o.is_empty())
                .ok_or_else(|| fail("MCQ query requires non-empty options".into()))?;
            if options.len() < 2 {
                return Err(fail(format!(
                    "MCQ query requires at least 2 options, got {}",
                    options.len()
                )));
            }
            match &query.gold {
                AnswerKey::McqLetter { letter } => {
                    let idx = verifier::letter_index(*letter)
                        .ok_or_else(|| fail(format!("gold letter {letter:?} is not A-Z")))?;
                    if idx >= options.len() {
                        return Err(fail(format!(
                            "gold letter {letter} is out of range for {} options",
                            options.len()
                        )));
                    }
                }
                AnswerKey::McqText { text } => {
                    if verifier::normalize_mcq(text, options).is_none() {
                        return Err(fail(format!(
                            "gold text {text:?} does not resolve against the options"
                        )));
                    }
                }
                AnswerKey::Numeric { .. } => unreachable!("kind checked above"),
            }
        }
        AnswerKind::Numeric => match &query.gold {
            AnswerKey::Numeric { value, tolerance } => {
                if !value.is_finite() {
                    return Err(fail(format!("numeric gold must be finite, got {value}")));
                }
                if let Some(tol) = tolerance {
                    if !tol.is_finite() || *tol < 0.0 {
                        return Err(fail(format!(
                            "tolerance must be a nonnegative number, got {tol}"
                        )));
                    }
                }
            }
            _ => unreachable!("kind checked above"),
        },
    }
    for media in &query.media {
        match media.kind {
            MediaKind::Video => {
                let dur = media
                    .duration_s
                    .ok_or_else(|| fail(format!("video ref {} lacks duration_s", media.uri)))?;
                if !dur.is_finite() || dur < 0.0 {
                    return Err(fail(format!(
                        "video ref {} has invalid duration {dur}",
                        media.uri
                    )));
                }
            }
            MediaKind::Image => {
                let (w, h) = match (media.width, media.height) {
                    (Some(w), Some(h)) => (w, h),
                    _ => {
                        return Err(fail(format!(
                            "image ref {} lacks width/height",
                            media.uri
                        )))
                    }
                };
                if w == 0 || h == 0 {
                    return Err(fail(format!(
                        "image ref {} has nonpositive dimensions {w}x{h}",
                        media.uri
                    )));
                }
            }
            MediaKind::Audio => {}
        }
    }
    Ok(())
}

/// Frame-sampling plan for one video.
///
/// Videos of at most 60 seconds use the 2 fps grid starting at t = 0; longer
/// videos get 120 timestamps placed at bin centers `(i + 0.5) * d / 120` so
/// the exact endpoints are never sampled.
pub fn plan_video_frames(duration_s: f64) -> Result<SamplingPlan, CorpusError> {
    if !duration_s.is_finite() || duration_s <= 0.0 {
        return Err(CorpusError::InvalidDuration(duration_s));
    }
    let timestamps_s = if duration_s <= 60.0 {
        let count = ((duration_s * FRAME_RATE_FPS).floor() as usize).min(FRAME_BUDGET);
        (0..count).map(|i| i as f64 / FRAME_RATE_FPS).collect()
    } else {
        (0..FRAME_BUDGET)
            .map(|i| (i as f64 + 0.5) * duration_s / FRAME_BUDGET as f64)
            .collect()
    };
    Ok(SamplingPlan {
        timestamps_s,
        target_short_edge_px: FRAME_SHORT_EDGE_PX,
    })
}

/// Resize plan for a still image: untouched unless the shorter edge exceeds
/// 768 px, in which case it is scaled down to a 768 px shorter edge.
pub fn plan_image_resize(width: u32, height: u32) -> Result<(u32, u32), CorpusError> {
    if width == 0 || height == 0 {
        return Err(CorpusError::InvalidDims(width, height));
    }
    if width.min(height) <= IMAGE_SHORT_EDGE_PX {
        return Ok((width, height));
    }
    Ok(scale_to_short_edge(width, height, IMAGE_SHORT_EDGE_PX))
}

/// Resize plan for a sampled video frame: always scaled so the shorter edge
/// is exactly 448 px.
pub fn plan_frame_resize(width: u32, height: u32) -> Result<(u32, u32), CorpusError> {
    if width == 0 || height == 0 {
        return Err(CorpusError::InvalidDims(width, height));
    }
    Ok(scale_to_short_edge(width, height, FRAME_SHORT_EDGE_PX))
}

// Round-half-to-even on the scaled long edge keeps the result deterministic
// across platforms.
fn scale_to_short_edge(width: u32, height: u32, target: u32) -> (u32, u32) {
    let (short, long) = if width <= height {
        (width, height)
    } else {
        (height, width)
    };
    let scaled_long =
        (long as f64 * target as f64 / short as f64).round_ties_even() as u32;
    if width <= height {
        (target, scaled_long)
    } else {
        (scaled_long, target)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mcq_query(id: &str, options: &[&str], gold_letter: char) -> Query {
        Query {
            query_id: id.into(),
            media: vec![MediaRef::video(format!("{id}.mp4"), 12.0)],
            question: format!("Question {id}?"),
            options: Some(options.iter().map(|s| s.to_string()).collect()),
            gold: AnswerKey::McqLetter { letter: gold_letter },
            answer_kind: AnswerKind::McqLetter,
        }
    }

    fn small_manifest() -> BenchmarkManifest {
        BenchmarkManifest {
            benchmark_id: "bench_a".into(),
            policy: RetentionPolicy::Filterable,
            official_tolerance: None,
            queries: vec![
                mcq_query("q1", &["Red", "Blue", "Green"], 'A'),
                mcq_query("q2", &["Yes", "No"], 'B'),
                Query {
                    query_id: "q3".into(),
                    media: vec![MediaRef::image("q3.png", 640, 480)],
                    question: "How many?".into(),
                    options: None,
                    gold: AnswerKey::Numeric { value: 4.0, tolerance: None },
                    answer_kind: AnswerKind::Numeric,
                },
            ],
        }
    }

    #[test]
    fn manifest_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench_a.jsonl");
        let manifest = small_manifest();
        write_manifest(&manifest, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded, manifest);
        assert_eq!(loaded.queries.len(), 3);
    }

    #[test]
    fn duplicate_query_id_is_rejected_by_name() {
        let mut manifest = small_manifest();
        manifest.queries.push(mcq_query("q1", &["X", "Y"], 'A'));
        let err = validate_manifest(&manifest).unwrap_err();
        match err {
            CorpusError::Validation { query_id, msg } => {
                assert_eq!(query_id, "q1");
                assert!(msg.contains("duplicate"));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn mcq_with_empty_options_is_rejected() {
        let mut manifest = small_manifest();
        manifest.queries[0].options = Some(vec![]);
        assert!(matches!(
            validate_manifest(&manifest),
            Err(CorpusError::Validation { .. })
        ));
        manifest.queries[0].options = None;
        assert!(matches!(
            validate_manifest(&manifest),
            Err(CorpusError::Validation { .. })
        ));
    }

    #[test]
    fn gold_letter_out_of_range_is_rejected() {
        let mut manifest = small_manifest();
        manifest.queries[1].gold = AnswerKey::McqLetter { letter: 'E' };
        assert!(validate_manifest(&manifest).is_err());
    }

    #[test]
    fn tolerance_without_numeric_queries_is_rejected() {
        let mut manifest = small_manifest();
        manifest.queries.truncate(2);
        manifest.official_tolerance = Some(0.5);
        assert!(matches!(
            validate_manifest(&manifest),
            Err(CorpusError::Manifest(_))
        ));
    }

    #[test]
    fn official_tolerance_propagates_to_numeric_golds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut manifest = small_manifest();
        manifest.official_tolerance = Some(0.25);
        write_manifest(&manifest, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        match &loaded.queries[2].gold {
            AnswerKey::Numeric { tolerance, .. } => assert_eq!(*tolerance, Some(0.25)),
            other => panic!("unexpected gold {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = concat!(
            "{\"benchmark_id\":\"b\",\"policy\":\"filterable\"}\n",
            "{\"query_id\":\"q1\",\"question\":\"ok?\",\"options\":[\"A\",\"B\"],",
            "\"gold\":{\"kind\":\"mcq_letter\",\"letter\":\"A\"},\"answer_kind\":\"mcq_letter\"}\n",
            "{not json}\n",
        );
        match parse_manifest(text) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn video_ref_without_duration_is_rejected() {
        let mut manifest = small_manifest();
        manifest.queries[0].media[0].duration_s = None;
        assert!(validate_manifest(&manifest).is_err());
    }

    #[test]
    fn short_video_uses_two_fps_grid() {
        let plan = plan_video_frames(30.0).unwrap();
        assert_eq!(plan.timestamps_s.len(), 60);
        assert_eq!(plan.timestamps_s[0], 0.0);
        assert_eq!(plan.timestamps_s[1], 0.5);
        assert_eq!(*plan.timestamps_s.last().unwrap(), 29.5);
        assert_eq!(plan.target_short_edge_px, 448);
    }

    #[test]
    fn sixty_second_video_exactly_meets_budget() {
        let plan = plan_video_frames(60.0).unwrap();
        assert_eq!(plan.timestamps_s.len(), 120);
        assert_eq!(*plan.timestamps_s.last().unwrap(), 59.5);
    }

    #[test]
    fn long_video_uses_uniform_bin_centers() {
        let plan = plan_video_frames(100.0).unwrap();
        assert_eq!(plan.timestamps_s.len(), 120);
        // Oracle: independently generated uniform grid, element-wise.
        for (i, &t) in plan.timestamps_s.iter().enumerate() {
            let expected = (i as f64 + 0.5) * 100.0 / 120.0;
            assert!((t - expected).abs() < 1e-12, "timestamp {i}: {t} vs {expected}");
        }
    }

    #[test]
    fn nonpositive_duration_is_rejected() {
        assert!(matches!(
            plan_video_frames(0.0),
            Err(CorpusError::InvalidDuration(_))
        ));
        assert!(matches!(
            plan_video_frames(-3.0),
            Err(CorpusError::InvalidDuration(_))
        ));
    }

    #[test]
    fn sub_half_second_video_yields_empty_plan() {
        // floor(2 * 0.3) = 0 under the floor reading of the 2 fps rule.
        let plan = plan_video_frames(0.3).unwrap();
        assert!(plan.timestamps_s.is_empty());
    }

    #[test]
    fn image_resize_examples() {
        assert_eq!(plan_image_resize(1024, 2048).unwrap(), (768, 1536));
        assert_eq!(plan_image_resize(640, 480).unwrap(), (640, 480));
        assert!(matches!(
            plan_image_resize(0, 480),
            Err(CorpusError::InvalidDims(0, 480))
        ));
    }

    #[test]
    fn frame_resize_examples() {
        // Oracle: 1920 * 448 / 1080 = 796.44..., rounded half-to-even.
        assert_eq!(plan_frame_resize(1920, 1080).unwrap(), (796, 448));
        assert_eq!(plan_frame_resize(448, 448).unwrap(), (448, 448));
        assert_eq!(plan_frame_resize(896, 1344).unwrap(), (448, 672));
        // Frames below the target are scaled up.
        assert_eq!(plan_frame_resize(224, 300).unwrap(), (448, 600));
    }

    #[test]
    fn frame_resize_rounds_half_to_even() {
        // 3 * 448 / 2 = 672 exactly; 1345 * 448 / 896 = 672.5 -> 672 (even).
        assert_eq!(plan_frame_resize(896, 1345).unwrap(), (448, 672));
        // 1347 * 448 / 896 = 673.5 -> 674 (even).
        assert_eq!(plan_frame_resize(896, 1347).unwrap(), (448, 674));
    }

    proptest! {
        #[test]
        fn short_videos_have_exact_half_second_spacing(d in 0.5f64..=60.0) {
            let plan = plan_video_frames(d).unwrap();
            prop_assert_eq!(plan.timestamps_s.len(), (2.0 * d).floor() as usize);
            for pair in plan.timestamps_s.windows(2) {
                prop_assert_eq!(pair[1] - pair[0], 0.5);
            }
        }

        #[test]
        fn long_videos_stay_inside_duration(d in 60.0001f64..=10_000.0) {
            let plan = plan_video_frames(d).unwrap();
            prop_assert_eq!(plan.timestamps_s.len(), FRAME_BUDGET);
            prop_assert!(plan.timestamps_s[0] >= 0.0);
            prop_assert!(*plan.timestamps_s.last().unwrap() <= d);
            let spacing = d / FRAME_BUDGET as f64;
            for pair in plan.timestamps_s.windows(2) {
                prop_assert!((pair[1] - pair[0] - spacing).abs() < 1e-9);
            }
        }

        #[test]
        fn resize_preserves_aspect_and_is_idempotent(w in 1u32..4096, h in 1u32..4096) {
            for resize in [plan_frame_resize, plan_image_resize] {
                let (rw, rh) = resize(w, h).unwrap();
                // Aspect ratio within +/- 1 px on the rounded edge.
                let expect_w = w as f64 * rh as f64 / h as f64;
                let expect_h = h as f64 * rw as f64 / w as f64;
                prop_assert!(
                    (rw as f64 - expect_w).abs() <= 1.0 || (rh as f64 - expect_h).abs() <= 1.0
                );
                prop_assert_eq!(resize(rw, rh).unwrap(), (rw, rh));
            }
            let (fw, fh) = plan_frame_resize(w, h).unwrap();
            prop_assert_eq!(fw.min(fh), FRAME_SHORT_EDGE_PX);
            let (iw, ih) = plan_image_resize(w, h).unwrap();
            if w.min(h) > IMAGE_SHORT_EDGE_PX {
                prop_assert_eq!(iw.min(ih), IMAGE_SHORT_EDGE_PX);
            } else {
                prop_assert_eq!((iw, ih), (w, h));
            }
        }
    }
}
