//! Batch harness for auditing audio-visual-language benchmarks.
//!
//! The crate probes benchmarks with visual-only rollouts to find queries that
//! are answerable without audio, builds cleaned evaluation views from the
//! retention decisions, scores original and filtered views under the official
//! verification rules, computes diagnostic statistics (correct-rollout
//! histograms, correlation shifts against unimodal reference axes), and
//! curates self-distillation training data through synthetic-query
//! construction and the F1-F3 filtering passes.
//!
//! Modules map onto the pipeline stages:
//!
//! - [`corpus`]: benchmark manifests and media preprocessing plans
//! - [`verifier`]: answer extraction, normalization, and hard matching
//! - [`modelgate`]: endpoint abstraction and rollout orchestration
//! - [`audit`]: visual-only probing and cleaned-view construction
//! - [`scoring`]: view scoring, aggregate summaries, delta tables
//! - [`diagnostics`]: histograms, correlations, linear fits
//! - [`distill`]: F1-F3 trace filtering for self-distillation corpora
//! - [`synthq`]: synthetic-query construction and QC filters

pub mod audit;
pub mod corpus;
pub mod diagnostics;
pub mod distill;
pub mod modelgate;
pub mod scoring;
pub mod synthq;
pub mod verifier;
