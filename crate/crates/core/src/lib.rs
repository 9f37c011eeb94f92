//! Hierarchical, cost-aware orchestration of LLM annotation.
//!
//! A run takes target utterances through up to three stages: a single-pass
//! annotation, a self-verification pass by the same model, and an adjudication
//! pass by an independent model that is only invoked when candidate labels
//! disagree. Every model decision is appended to a resumable run ledger with
//! per-stage token usage, and the [`metrics`] and [`report`] modules turn
//! ledgers into per-category F1 tables, agreement statistics and
//! cost/performance frontiers.
//!
//! The numeric parts of [`metrics`] are generic over a [`Scalar`] so that the
//! same code can run over `f32`, `f64` or exact rationals. The aliases below
//! pin the `f64` instantiation used by the rest of the crate.

pub mod backend;
pub mod corpus;
pub mod metrics;
pub mod orchestrator;
pub mod report;
mod scalar;
pub mod scheme;
mod seed;

pub use scalar::Scalar;

pub type CategoryScore = metrics::CategoryScore<f64>;
pub type KappaResult = metrics::KappaResult<f64>;
pub type ParetoPoint = metrics::ParetoPoint<f64>;
pub type CategoryScore32 = metrics::CategoryScore<f32>;
pub type KappaResult32 = metrics::KappaResult<f32>;
pub type RunSummary = report::RunSummary<f64>;
