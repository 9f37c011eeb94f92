//! Strategy execution: single-pass annotation, self-verification and
//! disagreement-gated adjudication over context segments, recorded in an
//! append-only, resumable run ledger.

mod config;
mod ledger;
mod run;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::scheme::ParsedDecision;

pub use config::{
    build_clients, ClientOptions, ConfigError, GridEntry, RunConfig, SampleConfig, StrategyEntry,
};
pub use ledger::{total_usage, AnnotationRecord, LedgerError, LedgerLine, RunLedger, UsageSummary};
pub use run::{Orchestrator, RunOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    NonReasoning,
    Reasoning,
}

impl Pipeline {
    pub fn as_str(self) -> &'static str {
        match self {
            Pipeline::NonReasoning => "non_reasoning",
            Pipeline::Reasoning => "reasoning",
        }
    }
}

/// How far a strategy goes through the stage hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Depth {
    Annotated,
    Verified,
    Adjudicated,
}

impl Depth {
    pub const ALL: [Depth; 3] = [Depth::Annotated, Depth::Verified, Depth::Adjudicated];

    pub fn as_str(self) -> &'static str {
        match self {
            Depth::Annotated => "annotated",
            Depth::Verified => "verified",
            Depth::Adjudicated => "adjudicated",
        }
    }
}

/// One of the six strategies, written `<pipeline>_<depth>`, e.g.
/// `non_reasoning_adjudicated`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct StrategyId {
    pub pipeline: Pipeline,
    pub depth: Depth,
}

impl StrategyId {
    pub fn new(pipeline: Pipeline, depth: Depth) -> Self {
        Self { pipeline, depth }
    }

    /// All six, non-reasoning first, each in stage order.
    pub fn all() -> Vec<StrategyId> {
        [Pipeline::NonReasoning, Pipeline::Reasoning]
            .into_iter()
            .flat_map(|p| Depth::ALL.into_iter().map(move |d| StrategyId::new(p, d)))
            .collect()
    }
}

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.pipeline.as_str(), self.depth.as_str())
    }
}

impl FromStr for StrategyId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (pipeline, rest) = if let Some(rest) = s.strip_prefix("non_reasoning_") {
            (Pipeline::NonReasoning, rest)
        } else if let Some(rest) = s.strip_prefix("reasoning_") {
            (Pipeline::Reasoning, rest)
        } else {
            return Err(format!("unknown strategy {s:?}"));
        };
        let depth = match rest {
            "annotated" => Depth::Annotated,
            "verified" => Depth::Verified,
            "adjudicated" => Depth::Adjudicated,
            _ => return Err(format!("unknown strategy {s:?}")),
        };
        Ok(Self { pipeline, depth })
    }
}

impl TryFrom<String> for StrategyId {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<StrategyId> for String {
    fn from(id: StrategyId) -> Self {
        id.to_string()
    }
}

/// Where adjudication candidates come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjudicationScope {
    /// One model's initial label against its own verified label.
    #[default]
    Chain,
    /// The verified labels of several models.
    Panel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub run_id: String,
    /// Display name of the annotating model; defaults to the annotator id.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub model: String,
    pub strategy_id: StrategyId,
    pub annotator_backend: String,
    #[serde(default)]
    pub adjudicator_backend: Option<String>,
    #[serde(default)]
    pub adjudication_scope: AdjudicationScope,
    #[serde(default)]
    pub panel_backends: Vec<String>,
    pub window_k: usize,
    pub seed: u64,
    /// Extra attempts after an unparseable or out-of-scheme answer.
    pub parse_retries: u32,
    /// Extra attempts after the adjudicator answers outside the candidates.
    pub adjudicator_retries: u32,
    pub verify_with_context: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("invalid strategy {run_id}: {message}")]
    InvalidStrategy { run_id: String, message: String },
    #[error("no client for backend {0:?}")]
    UnknownBackend(String),
    #[error("adjudication needs at least two candidates")]
    TooFewCandidates,
    #[error(transparent)]
    Prompt(#[from] crate::scheme::PromptError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error("backend {backend_id}: {error}")]
    Backend {
        backend_id: String,
        error: crate::backend::BackendError,
    },
    #[error("run interrupted after {completed} targets")]
    Interrupted { completed: usize },
}

impl StrategyConfig {
    pub fn model_name(&self) -> &str {
        if self.model.is_empty() {
            &self.annotator_backend
        } else {
            &self.model
        }
    }

    /// Backends producing candidate labels, in candidate order.
    pub fn producers(&self) -> Vec<&str> {
        match (self.strategy_id.depth, self.adjudication_scope) {
            (Depth::Adjudicated, AdjudicationScope::Panel) => {
                self.panel_backends.iter().map(String::as_str).collect()
            }
            _ => vec![self.annotator_backend.as_str()],
        }
    }

    pub fn validate(&self, known: &BTreeSet<String>) -> Result<(), OrchestratorError> {
        let invalid = |message: String| OrchestratorError::InvalidStrategy {
            run_id: self.run_id.clone(),
            message,
        };
        for b in self
            .producers()
            .into_iter()
            .chain(self.adjudicator_backend.as_deref())
        {
            if !known.contains(b) {
                return Err(OrchestratorError::UnknownBackend(b.to_string()));
            }
        }
        if self.strategy_id.depth != Depth::Adjudicated {
            return Ok(());
        }
        let adjudicator = self
            .adjudicator_backend
            .as_deref()
            .ok_or_else(|| invalid("adjudicated strategies need an adjudicator_backend".into()))?;
        match self.adjudication_scope {
            AdjudicationScope::Chain => {
                if adjudicator == self.annotator_backend {
                    return Err(invalid(
                        "the adjudicator must differ from the annotator".into(),
                    ));
                }
            }
            AdjudicationScope::Panel => {
                if self.panel_backends.len() < 2 {
                    return Err(invalid(
                        "panel scope needs at least two panel backends".into(),
                    ));
                }
                let distinct: BTreeSet<&String> = self.panel_backends.iter().collect();
                if distinct.len() != self.panel_backends.len() {
                    return Err(invalid("panel backends must be distinct".into()));
                }
                if self.panel_backends.iter().any(|b| b == adjudicator) {
                    return Err(invalid("the adjudicator must not sit on the panel".into()));
                }
            }
        }
        Ok(())
    }
}

/// Whether the candidate labels conflict.
pub fn detect_disagreement(candidates: &[ParsedDecision]) -> Result<bool, OrchestratorError> {
    if candidates.len() < 2 {
        return Err(OrchestratorError::TooFewCandidates);
    }
    Ok(candidates.iter().any(|c| c.label != candidates[0].label))
}
