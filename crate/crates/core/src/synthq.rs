//! Synthetic-query construction scaffolding: video segmentation, caption
//! records, a lightweight entity-relation graph, QA composition through a
//! pluggable composer endpoint, and the pre-rollout QC filters.
//!
//! Videos of at most 30 seconds are one segment; longer videos are cut into
//! 20-second windows, merging a sub-10-second remainder into the last window
//! and keeping a remainder of 10 seconds or more as its own segment. The
//! composer receives deterministic prompts (captions, the graph serialized
//! with stable ordering, and the answer-format constraint) and its output is
//! validated and retried a bounded number of times.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnswerKind, BenchmarkManifest, MediaRef, Query, RetentionPolicy};
use crate::modelgate::{build_request, ChatEndpoint, EndpointError, RolloutSpec};
use crate::verifier::{self, AnswerKey};

/// Window length for segment annotation.
pub const SEGMENT_WINDOW_S: f64 = 20.0;
/// Videos up to this length are treated as single units.
pub const SINGLE_UNIT_MAX_S: f64 = 30.0;
/// Remainders below this are merged into the preceding window.
pub const MIN_REMAINDER_S: f64 = 10.0;
/// Validation-rejected composer attempts per item before giving up.
pub const COMPOSER_RETRIES: usize = 3;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid duration: {0}")]
    InvalidDuration(f64),
    #[error("segment records: {0}")]
    IncompleteRecords(String),
    #[error("composer error: {0}")]
    Composer(String),
    #[error("graph rejected after {attempts} attempts: {msg}")]
    GraphValidation { attempts: usize, msg: String },
    #[error("query rejected after {attempts} attempts: {msg}")]
    Format { attempts: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("file format: {0}")]
    FileFormat(String),
}

/// One annotation window of a video.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub index: usize,
    pub start_s: f64,
    pub end_s: f64,
}

/// Segment the timeline of one video for caption annotation.
pub fn segment_video(duration_s: f64) -> Result<Vec<Segment>, SynthError> {
    if !duration_s.is_finite() || duration_s <= 0.0 {
        return Err(SynthError::InvalidDuration(duration_s));
    }
    if duration_s <= SINGLE_UNIT_MAX_S {
        return Ok(vec![Segment { index: 0, start_s: 0.0, end_s: duration_s }]);
    }
    let windows = (duration_s / SEGMENT_WINDOW_S).floor() as usize;
    let remainder = duration_s - SEGMENT_WINDOW_S * windows as f64;
    let keep_remainder = remainder >= MIN_REMAINDER_S;
    let count = if keep_remainder { windows + 1 } else { windows };
    let mut segments: Vec<Segment> = (0..count)
        .map(|index| Segment {
            index,
            start_s: SEGMENT_WINDOW_S * index as f64,
            end_s: SEGMENT_WINDOW_S * (index + 1) as f64,
        })
        .collect();
    // The final boundary is always the true duration, absorbing both the
    // merged remainder and floating-point drift.
    segments.last_mut().expect("count >= 1").end_s = duration_s;
    Ok(segments)
}

/// Captions attached to one segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub segment: Segment,
    pub audio_caption: String,
    pub video_caption: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WithinRelation {
    pub segment_index: usize,
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalLink {
    pub entity: String,
    pub earlier_segment: usize,
    pub later_segment: usize,
    pub relation: String,
}

/// Relation scaffold over segment captions: recurring entities plus
/// within-segment relations and cross-segment temporal links.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityGraph {
    pub entities: BTreeSet<String>,
    pub within_relations: Vec<WithinRelation>,
    pub temporal_links: Vec<TemporalLink>,
}

impl EntityGraph {
    pub fn validate(&self, n_segments: usize) -> Result<(), String> {
        for relation in &self.within_relations {
            if relation.segment_index >= n_segments {
                return Err(format!(
                    "within relation references segment {} of {n_segments}",
                    relation.segment_index
                ));
            }
            for entity in [&relation.subject, &relation.object] {
                if !self.entities.contains(entity) {
                    return Err(format!("relation references unknown entity {entity:?}"));
                }
            }
        }
        for link in &self.temporal_links {
            if !self.entities.contains(&link.entity) {
                return Err(format!("temporal link references unknown entity {:?}", link.entity));
            }
            if link.earlier_segment >= link.later_segment {
                return Err(format!(
                    "temporal link must be forward in time: {} -> {}",
                    link.earlier_segment, link.later_segment
                ));
            }
            if link.later_segment >= n_segments {
                return Err(format!(
                    "temporal link references segment {} of {n_segments}",
                    link.later_segment
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerFormat {
    OptionIndex,
    OptionText,
    Number,
    ShortPhrase,
}

/// A composed audio-visual-text question with a hard-matchable answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticQuery {
    pub question: String,
    pub answer_format: AnswerFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    pub gold: AnswerKey,
    pub source_segments: Vec<usize>,
}

impl SyntheticQuery {
    pub fn validate(&self, n_segments: usize) -> Result<(), String> {
        if self.question.trim().is_empty() {
            return Err("question is empty".into());
        }
        if self.source_segments.is_empty() {
            return Err("source_segments is empty".into());
        }
        if let Some(bad) = self.source_segments.iter().find(|s| **s >= n_segments) {
            return Err(format!("source segment {bad} out of range ({n_segments} segments)"));
        }
        match self.answer_format {
            AnswerFormat::OptionIndex | AnswerFormat::OptionText => {
                let options = self
                    .options
                    .as_ref()
                    .filter(|o| o.len() >= 2)
                    .ok_or("option formats need at least 2 options")?;
                let distinct: BTreeSet<&String> = options.iter().collect();
                if distinct.len() != options.len() {
                    return Err("options are not distinct".into());
                }
                match (&self.answer_format, &self.gold) {
                    (AnswerFormat::OptionIndex, AnswerKey::McqLetter { letter }) => {
                        let idx = verifier::letter_index(*letter)
                            .ok_or_else(|| format!("gold letter {letter:?} is not A-Z"))?;
                        if idx >= options.len() {
                            return Err(format!("gold letter {letter} outside the options"));
                        }
                    }
                    (AnswerFormat::OptionText, AnswerKey::McqText { text }) => {
                        if verifier::normalize_mcq(text, options).is_none() {
                            return Err(format!("gold text {text:?} not among the options"));
                        }
                    }
                    _ => return Err("gold kind does not match the answer format".into()),
                }
            }
            AnswerFormat::Number => match &self.gold {
                AnswerKey::Numeric { value, .. } if value.is_finite() => {}
                _ => return Err("number format requires a finite numeric gold".into()),
            },
            AnswerFormat::ShortPhrase => match &self.gold {
                AnswerKey::McqText { text } if !text.trim().is_empty() => {
                    if self.options.is_some() {
                        return Err("short-phrase queries carry no options".into());
                    }
                }
                _ => return Err("short-phrase format requires a non-empty text gold".into()),
            },
        }
        Ok(())
    }
}

/// Text-completion backend used for graph and QA composition.
pub trait Composer: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, SynthError>;
}

/// Scripted composer: pops queued responses in order and keeps repeating the
/// last one once the queue is down to a single entry.
pub struct MockComposer {
    responses: Mutex<VecDeque<String>>,
}

impl MockComposer {
    pub fn new(responses: Vec<String>) -> Self {
        MockComposer { responses: Mutex::new(responses.into()) }
    }

    pub fn always(response: impl Into<String>) -> Self {
        Self::new(vec![response.into()])
    }
}

impl Composer for MockComposer {
    fn complete(&self, _prompt: &str) -> Result<String, SynthError> {
        let mut queue = self.responses.lock().unwrap();
        match queue.len() {
            0 => Err(SynthError::Composer("mock composer script exhausted".into())),
            1 => Ok(queue.front().cloned().unwrap()),
            _ => Ok(queue.pop_front().unwrap()),
        }
    }
}

/// Composer backed by a chat endpoint; sends the prompt as one user message.
pub struct EndpointComposer {
    endpoint: Arc<dyn ChatEndpoint>,
    max_tokens: usize,
}

impl EndpointComposer {
    pub fn new(endpoint: Arc<dyn ChatEndpoint>) -> Self {
        EndpointComposer { endpoint, max_tokens: 4096 }
    }
}

impl Composer for EndpointComposer {
    fn complete(&self, prompt: &str) -> Result<String, SynthError> {
        let query = Query {
            query_id: "composer".into(),
            media: vec![],
            question: prompt.to_string(),
            options: None,
            gold: AnswerKey::Numeric { value: 0.0, tolerance: None },
            answer_kind: AnswerKind::Numeric,
        };
        let spec = RolloutSpec {
            n_rollouts: 1,
            temperature: 0.0,
            max_new_tokens: self.max_tokens,
            ..Default::default()
        };
        let request = build_request(&query, &spec, 0, 1);
        let generations = self.endpoint.complete(&request).map_err(|e: EndpointError| {
            SynthError::Composer(e.to_string())
        })?;
        generations
            .into_iter()
            .next()
            .ok_or_else(|| SynthError::Composer("empty completion".into()))
    }
}

fn records_cover_segments(records: &[SegmentRecord]) -> Result<(), SynthError> {
    if records.is_empty() {
        return Err(SynthError::IncompleteRecords("no segment records".into()));
    }
    for (i, record) in records.iter().enumerate() {
        if record.segment.index != i {
            return Err(SynthError::IncompleteRecords(format!(
                "segment {i} has index {}",
                record.segment.index
            )));
        }
        if record.audio_caption.trim().is_empty() || record.video_caption.trim().is_empty() {
            return Err(SynthError::IncompleteRecords(format!(
                "segment {i} is missing a caption"
            )));
        }
    }
    Ok(())
}

fn render_records(records: &[SegmentRecord]) -> String {
    let mut text = String::new();
    for record in records {
        text.push_str(&format!(
            "[segment {} | {:.1}s-{:.1}s]\naudio: {}\nvideo: {}\n",
            record.segment.index,
            record.segment.start_s,
            record.segment.end_s,
            record.audio_caption,
            record.video_caption,
        ));
    }
    text
}

/// Deterministic graph-extraction prompt over the caption records.
pub fn build_graph_prompt(records: &[SegmentRecord]) -> String {
    format!(
        "You are given per-segment audio and video captions for one video.\n\n{}\n\
         Extract the recurring entities and organize them into a relation graph.\n\
         Respond with JSON only, exactly this shape:\n\
         {{\"entities\":[\"...\"],\
         \"within_relations\":[{{\"segment_index\":0,\"subject\":\"...\",\"predicate\":\"...\",\"object\":\"...\"}}],\
         \"temporal_links\":[{{\"entity\":\"...\",\"earlier_segment\":0,\"later_segment\":1,\"relation\":\"...\"}}]}}\n\
         Every subject, object, and linked entity must appear in \"entities\"; \
         earlier_segment must be strictly less than later_segment.",
        render_records(records)
    )
}

/// Deterministic QA-composition prompt: captions, the serialized graph, and
/// the answer-format constraint.
pub fn build_query_prompt(
    graph: &EntityGraph,
    records: &[SegmentRecord],
    format: AnswerFormat,
) -> String {
    let graph_json = serde_json::to_string(graph).expect("graph serializes");
    let format_rule = match format {
        AnswerFormat::OptionIndex => {
            "answer_format \"option_index\": provide 2-6 options and a gold of kind \
             mcq_letter naming the correct option's letter"
        }
        AnswerFormat::OptionText => {
            "answer_format \"option_text\": provide 2-6 options and a gold of kind \
             mcq_text equal to the correct option's text"
        }
        AnswerFormat::Number => {
            "answer_format \"number\": no options; gold of kind numeric with the value"
        }
        AnswerFormat::ShortPhrase => {
            "answer_format \"short_phrase\": no options; gold of kind mcq_text holding a \
             short phrase"
        }
    };
    format!(
        "Compose one audio-visual question about this video.\n\n\
         Captions:\n{}\nEntity graph:\n{}\n\n\
         Constraints: the question must need both audio and visual evidence; {format_rule}.\n\
         Respond with JSON only, exactly this shape:\n\
         {{\"question\":\"...\",\"answer_format\":\"...\",\"options\":[\"...\"],\
         \"gold\":{{\"kind\":\"...\"}},\"source_segments\":[0]}}",
        render_records(records),
        graph_json
    )
}

/// Ask the composer for an entity graph, rejecting and retrying invalid
/// output up to the retry bound.
pub fn build_entity_graph(
    records: &[SegmentRecord],
    composer: &dyn Composer,
) -> Result<EntityGraph, SynthError> {
    records_cover_segments(records)?;
    let prompt = build_graph_prompt(records);
    let mut last_reject = String::new();
    for _ in 0..COMPOSER_RETRIES {
        let response = composer.complete(&prompt)?;
        match serde_json::from_str::<EntityGraph>(&response) {
            Ok(graph) => match graph.validate(records.len()) {
                Ok(()) => return Ok(graph),
                Err(msg) => last_reject = msg,
            },
            Err(e) => last_reject = format!("not valid graph JSON: {e}"),
        }
    }
    Err(SynthError::GraphValidation { attempts: COMPOSER_RETRIES, msg: last_reject })
}

/// Ask the composer for one synthetic query in the requested answer format,
/// rejecting and retrying invalid output up to the retry bound.
pub fn compose_query(
    graph: &EntityGraph,
    records: &[SegmentRecord],
    format: AnswerFormat,
    composer: &dyn Composer,
) -> Result<SyntheticQuery, SynthError> {
    records_cover_segments(records)?;
    let prompt = build_query_prompt(graph, records, format);
    let mut last_reject = String::new();
    for _ in 0..COMPOSER_RETRIES {
        let response = composer.complete(&prompt)?;
        match serde_json::from_str::<SyntheticQuery>(&response) {
            Ok(query) => {
                if query.answer_format != format {
                    last_reject = format!(
                        "composer answered format {:?}, wanted {format:?}",
                        query.answer_format
                    );
                } else {
                    match query.validate(records.len()) {
                        Ok(()) => return Ok(query),
                        Err(msg) => last_reject = msg,
                    }
                }
            }
            Err(e) => last_reject = format!("not valid query JSON: {e}"),
        }
    }
    Err(SynthError::Format { attempts: COMPOSER_RETRIES, msg: last_reject })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QcDropReason {
    Malformed,
    InconsistentOptions,
    AnswerLeakage,
    CaptionEntityMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QcDecision {
    Keep,
    Drop(QcDropReason),
}

fn gold_display_text(query: &SyntheticQuery) -> Option<String> {
    match (&query.gold, &query.options) {
        (AnswerKey::McqLetter { letter }, Some(options)) => verifier::letter_index(*letter)
            .and_then(|i| options.get(i))
            .cloned(),
        (AnswerKey::McqText { text }, _) => Some(text.clone()),
        (AnswerKey::Numeric { value, .. }, _) => Some(format!("{value}")),
        (AnswerKey::McqLetter { .. }, None) => None,
    }
}

fn tokens_of(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Capitalized tokens that are not sentence-initial: the lightweight named
/// entity heuristic behind the caption-entity check. The pronoun "I" is
/// skipped.
fn candidate_entity_tokens(question: &str) -> Vec<String> {
    let mut candidates = Vec::new();
    let mut sentence_start = true;
    for raw in question.split_whitespace() {
        let token: String = raw
            .chars()
            .filter(|c| c.is_alphanumeric() || *c == '\'')
            .collect();
        if token.is_empty() {
            continue;
        }
        let first_upper = token.chars().next().is_some_and(char::is_uppercase);
        if first_upper && !sentence_start && token != "I" {
            candidates.push(token.to_lowercase());
        }
        sentence_start = raw.ends_with(['.', '!', '?']);
    }
    candidates
}

/// Token-sequence containment: does `needle` occur as a consecutive token
/// run inside `haystack`?
fn token_subsequence(haystack: &[String], needle: &[String]) -> bool {
    if needle.is_empty() || needle.len() > haystack.len() {
        return false;
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// Pre-rollout quality control. Checks run in a fixed order: malformed
/// question/gold, inconsistent options, answer leakage into the question,
/// then caption-entity mismatch.
pub fn qc_filter(
    query: &SyntheticQuery,
    records: &[SegmentRecord],
    graph: &EntityGraph,
) -> QcDecision {
    if query.question.trim().is_empty() {
        return QcDecision::Drop(QcDropReason::Malformed);
    }
    let Some(gold_text) = gold_display_text(query) else {
        return QcDecision::Drop(QcDropReason::Malformed);
    };

    if let Some(options) = &query.options {
        let mut normalized = BTreeSet::new();
        for option in options {
            if !normalized.insert(verifier::normalize_answer_text(option)) {
                return QcDecision::Drop(QcDropReason::InconsistentOptions);
            }
        }
        let resolvable = match &query.gold {
            AnswerKey::McqLetter { letter } => verifier::letter_index(*letter)
                .is_some_and(|i| i < options.len()),
            AnswerKey::McqText { text } => verifier::normalize_mcq(text, options).is_some(),
            AnswerKey::Numeric { .. } => true,
        };
        if !resolvable {
            return QcDecision::Drop(QcDropReason::InconsistentOptions);
        }
    } else if matches!(query.gold, AnswerKey::McqLetter { .. }) {
        return QcDecision::Drop(QcDropReason::Malformed);
    }

    let question_tokens = tokens_of(&query.question);
    let gold_tokens = tokens_of(&gold_text);
    if token_subsequence(&question_tokens, &gold_tokens) {
        return QcDecision::Drop(QcDropReason::AnswerLeakage);
    }

    let mut known: BTreeSet<String> = BTreeSet::new();
    for record in records {
        known.extend(tokens_of(&record.audio_caption));
        known.extend(tokens_of(&record.video_caption));
    }
    for entity in &graph.entities {
        known.extend(tokens_of(entity));
    }
    for candidate in candidate_entity_tokens(&query.question) {
        if !known.contains(&candidate) {
            return QcDecision::Drop(QcDropReason::CaptionEntityMismatch);
        }
    }
    QcDecision::Keep
}

/// Caption-record file: a header naming the video plus one JSON object per
/// segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionFile {
    pub video_id: String,
    pub video_uri: String,
    pub duration_s: f64,
    #[serde(skip)]
    pub records: Vec<SegmentRecord>,
}

pub fn read_caption_file(path: &Path) -> Result<CaptionFile, SynthError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| SynthError::FileFormat(format!("{}: empty file", path.display())))?;
    let mut file: CaptionFile = serde_json::from_str(header)
        .map_err(|e| SynthError::FileFormat(format!("{}:1: {e}", path.display())))?;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let record: SegmentRecord = serde_json::from_str(line)
            .map_err(|e| SynthError::FileFormat(format!("{}:{}: {e}", path.display(), idx + 1)))?;
        file.records.push(record);
    }
    records_cover_segments(&file.records)?;
    Ok(file)
}

pub fn write_caption_file(file: &CaptionFile, path: &Path) -> Result<(), SynthError> {
    let mut out = Vec::new();
    serde_json::to_writer(&mut out, file).map_err(|e| SynthError::FileFormat(e.to_string()))?;
    out.push(b'\n');
    for record in &file.records {
        serde_json::to_writer(&mut out, record)
            .map_err(|e| SynthError::FileFormat(e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// One row of the synthetic-query corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusRow {
    pub query_id: String,
    pub media: Vec<MediaRef>,
    #[serde(flatten)]
    pub query: SyntheticQuery,
}

/// Write the synthetic corpus as one JSON object per line.
pub fn write_synthetic_corpus(rows: &[SyntheticCorpusRow], path: &Path) -> Result<(), SynthError> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row).map_err(|e| SynthError::FileFormat(e.to_string()))?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Convert synthetic corpus rows into a probe-compatible benchmark manifest.
///
/// Short-phrase rows have no manifest representation (manifest MCQ queries
/// need options) and are returned in the skipped list instead.
pub fn manifest_from_synthetic(
    benchmark_id: &str,
    rows: &[SyntheticCorpusRow],
) -> (BenchmarkManifest, Vec<(String, String)>) {
    let mut queries = Vec::new();
    let mut skipped = Vec::new();
    for row in rows {
        let answer_kind = match row.query.answer_format {
            AnswerFormat::OptionIndex => AnswerKind::McqLetter,
            AnswerFormat::OptionText => AnswerKind::McqText,
            AnswerFormat::Number => AnswerKind::Numeric,
            AnswerFormat::ShortPhrase => {
                skipped.push((
                    row.query_id.clone(),
                    "short-phrase answers have no manifest representation".to_string(),
                ));
                continue;
            }
        };
        queries.push(Query {
            query_id: row.query_id.clone(),
            media: row.media.clone(),
            question: row.query.question.clone(),
            options: row.query.options.clone(),
            gold: row.query.gold.clone(),
            answer_kind,
        });
    }
    let manifest = BenchmarkManifest {
        benchmark_id: benchmark_id.to_string(),
        policy: RetentionPolicy::Filterable,
        official_tolerance: None,
        queries,
    };
    (manifest, skipped)
}
