//! Visual-only probing, pass@k retention decisions, exception policies, and
//! cleaned-view construction.
//!
//! The filtering unit is the query, never the underlying media item: two
//! queries over the same video are decided independently. A query under the
//! `Filterable` policy is removed as soon as one probe rollout verifies
//! correct; the two full-retain policies keep everything, one of them without
//! running rollouts at all because visual-only probing is undefined when the
//! answer options themselves carry audio.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BenchmarkManifest, RetentionPolicy};
use crate::modelgate::{GateError, ModalityMask, Orchestrator, RolloutRecord, RolloutSpec};

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("visual-only probing requires modality_mask = visual_only")]
    NotVisualOnly,
    #[error("policy error for {benchmark_id}: {msg}")]
    Policy { benchmark_id: String, msg: String },
    #[error("probe coverage incomplete for {benchmark_id}: missing {missing:?}")]
    Coverage { benchmark_id: String, missing: Vec<String> },
    #[error("probe references unknown query {0}")]
    UnknownQuery(String),
    #[error("probe for {query_id}: correct_count {correct_count} exceeds n {n}")]
    BadCount { query_id: String, correct_count: usize, n: usize },
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("view file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetentionReason {
    UnsolvedVisualOnly,
    RemovedVisuallySolvable,
    PolicyFullRetain,
    PolicyDiagnosticOnly,
}

/// Per-query correct-rollout count and retention decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub query_id: String,
    pub correct_count: usize,
    pub n: usize,
    pub retained: bool,
    pub retention_reason: RetentionReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewId {
    Original,
    Filtered,
}

/// A named subset of one benchmark's queries with retention provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewDefinition {
    pub view_id: ViewId,
    pub benchmark_id: String,
    /// Query ids in manifest order.
    pub query_ids: Vec<String>,
    /// Retention reason for every query of the original view.
    pub provenance: BTreeMap<String, RetentionReason>,
    /// Identity of the probing model, for reproducibility per probe model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_model: Option<String>,
}

impl ViewDefinition {
    pub fn len(&self) -> usize {
        self.query_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPair {
    pub original: ViewDefinition,
    pub filtered: ViewDefinition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteCounts {
    pub audited: usize,
    pub retained: usize,
}

/// Retention decision for one query given its policy and correct-rollout
/// count.
pub fn retention_for(policy: RetentionPolicy, correct_count: usize) -> (bool, RetentionReason) {
    match policy {
        RetentionPolicy::Filterable => {
            if correct_count == 0 {
                (true, RetentionReason::UnsolvedVisualOnly)
            } else {
                (false, RetentionReason::RemovedVisuallySolvable)
            }
        }
        RetentionPolicy::FullRetainAudioOptions => (true, RetentionReason::PolicyFullRetain),
        RetentionPolicy::DiagnosticOnlyFullRetain => (true, RetentionReason::PolicyDiagnosticOnly),
    }
}

#[derive(Debug, Clone, Default)]
pub struct ProbeOptions {
    /// Append-only rollout journal, enabling crash resume and later reuse of
    /// the full rollout text without re-querying.
    pub journal: Option<PathBuf>,
    /// Force rollout generation even for policies that skip it. Probing a
    /// benchmark whose answer options carry audio is a policy error.
    pub force_rollouts: bool,
}

#[derive(Debug, Clone)]
pub struct ProbeRun {
    pub probes: Vec<ProbeResult>,
    pub records: Vec<RolloutRecord>,
    pub probe_model: String,
}

/// Probe every query of a manifest with visual-only rollouts and compute
/// retention decisions.
///
/// Benchmarks under `FullRetainAudioOptions` skip rollout generation
/// entirely; `DiagnosticOnlyFullRetain` benchmarks are probed for diagnosis
/// but every query is retained.
pub fn probe_visual_only(
    manifest: &BenchmarkManifest,
    spec: &RolloutSpec,
    orchestrator: &Orchestrator,
    options: &ProbeOptions,
) -> Result<ProbeRun, AuditError> {
    if spec.modality_mask != ModalityMask::VisualOnly {
        return Err(AuditError::NotVisualOnly);
    }
    let probe_model = orchestrator.model_name().to_string();

    if manifest.policy == RetentionPolicy::FullRetainAudioOptions {
        if options.force_rollouts {
            return Err(AuditError::Policy {
                benchmark_id: manifest.benchmark_id.clone(),
                msg: "answer options carry audio; visual-only probing is not defined".into(),
            });
        }
        let probes = manifest
            .queries
            .iter()
            .map(|q| ProbeResult {
                query_id: q.query_id.clone(),
                correct_count: 0,
                n: 0,
                retained: true,
                retention_reason: RetentionReason::PolicyFullRetain,
            })
            .collect();
        return Ok(ProbeRun { probes, records: Vec::new(), probe_model });
    }

    let run = orchestrator.run_rollouts(&manifest.queries, spec, options.journal.as_deref())?;
    let probes = probes_from_records(manifest, &run.records, spec.n_rollouts)?;
    Ok(ProbeRun { probes, records: run.records, probe_model })
}

/// Derive probe results from verified rollout records.
pub fn probes_from_records(
    manifest: &BenchmarkManifest,
    records: &[RolloutRecord],
    n: usize,
) -> Result<Vec<ProbeResult>, AuditError> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let known: BTreeSet<&str> = manifest.queries.iter().map(|q| q.query_id.as_str()).collect();
    for record in records {
        if !known.contains(record.query_id.as_str()) {
            return Err(AuditError::UnknownQuery(record.query_id.clone()));
        }
        if record.outcome.correct {
            *counts.entry(record.query_id.as_str()).or_default() += 1;
        }
    }
    manifest
        .queries
        .iter()
        .map(|q| {
            let correct_count = counts.get(q.query_id.as_str()).copied().unwrap_or(0);
            probe_result(manifest.policy, &q.query_id, correct_count, n)
        })
        .collect()
}

/// Build probe results from planted per-query correct counts. Queries absent
/// from the map count as zero.
pub fn probes_from_counts(
    manifest: &BenchmarkManifest,
    counts: &BTreeMap<String, usize>,
    n: usize,
) -> Result<Vec<ProbeResult>, AuditError> {
    for query_id in counts.keys() {
        if manifest.query(query_id).is_none() {
            return Err(AuditError::UnknownQuery(query_id.clone()));
        }
    }
    manifest
        .queries
        .iter()
        .map(|q| {
            let correct_count = counts.get(&q.query_id).copied().unwrap_or(0);
            probe_result(manifest.policy, &q.query_id, correct_count, n)
        })
        .collect()
}

fn probe_result(
    policy: RetentionPolicy,
    query_id: &str,
    correct_count: usize,
    n: usize,
) -> Result<ProbeResult, AuditError> {
    if correct_count > n {
        return Err(AuditError::BadCount {
            query_id: query_id.to_string(),
            correct_count,
            n,
        });
    }
    let (retained, retention_reason) = retention_for(policy, correct_count);
    Ok(ProbeResult {
        query_id: query_id.to_string(),
        correct_count,
        n,
        retained,
        retention_reason,
    })
}

/// Construct the original and filtered views of one benchmark from its probe
/// results.
///
/// For `Filterable` benchmarks every query must have a probe; the full-retain
/// policies synthesize their provenance, so views can be built even when
/// probing was skipped.
pub fn build_views(
    manifest: &BenchmarkManifest,
    probes: &[ProbeResult],
    probe_model: Option<&str>,
) -> Result<ViewPair, AuditError> {
    let mut by_id: BTreeMap<&str, &ProbeResult> = BTreeMap::new();
    for probe in probes {
        if manifest.query(&probe.query_id).is_none() {
            return Err(AuditError::UnknownQuery(probe.query_id.clone()));
        }
        by_id.insert(probe.query_id.as_str(), probe);
    }

    let mut provenance = BTreeMap::new();
    let mut original_ids = Vec::with_capacity(manifest.queries.len());
    let mut filtered_ids = Vec::new();
    let mut missing = Vec::new();
    for query in &manifest.queries {
        original_ids.push(query.query_id.clone());
        let (retained, reason) = match by_id.get(query.query_id.as_str()) {
            Some(probe) => (probe.retained, probe.retention_reason),
            None => match manifest.policy {
                RetentionPolicy::Filterable => {
                    missing.push(query.query_id.clone());
                    continue;
                }
                policy => retention_for(policy, 0),
            },
        };
        provenance.insert(query.query_id.clone(), reason);
        if retained {
            filtered_ids.push(query.query_id.clone());
        }
    }
    if !missing.is_empty() {
        return Err(AuditError::Coverage {
            benchmark_id: manifest.benchmark_id.clone(),
            missing,
        });
    }

    let probe_model = probe_model.map(str::to_string);
    let original = ViewDefinition {
        view_id: ViewId::Original,
        benchmark_id: manifest.benchmark_id.clone(),
        query_ids: original_ids,
        provenance: provenance.clone(),
        probe_model: probe_model.clone(),
    };
    let filtered = ViewDefinition {
        view_id: ViewId::Filtered,
        benchmark_id: manifest.benchmark_id.clone(),
        query_ids: filtered_ids,
        provenance,
        probe_model,
    };
    Ok(ViewPair { original, filtered })
}

/// Suite-level audited/retained totals over per-benchmark view pairs.
pub fn suite_counts(pairs: &[ViewPair]) -> SuiteCounts {
    SuiteCounts {
        audited: pairs.iter().map(|p| p.original.len()).sum(),
        retained: pairs.iter().map(|p| p.filtered.len()).sum(),
    }
}

/// Query ids that would be removed under a pass@k rule using only the first
/// `k` rollouts of each query.
pub fn removal_set_at_k(records: &[RolloutRecord], k: usize) -> BTreeSet<String> {
    records
        .iter()
        .filter(|r| r.rollout_index < k && r.outcome.correct)
        .map(|r| r.query_id.clone())
        .collect()
}

/// Write a view as pretty JSON with stable key ordering, for diffability.
pub fn write_view(view: &ViewDefinition, path: &Path) -> Result<(), AuditError> {
    let mut text =
        serde_json::to_string_pretty(view).map_err(|e| AuditError::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_view(path: &Path) -> Result<ViewDefinition, AuditError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| AuditError::Format(format!("{}: {e}", path.display())))
}
