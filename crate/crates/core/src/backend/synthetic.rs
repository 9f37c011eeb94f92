//! Deterministic simulated annotator.
//!
//! Decisions are drawn from a per-stage noise model around the gold label:
//! a confusion row for the first pass, correct/corrupt probabilities for
//! verification, and a gold-pick probability for adjudication. Every draw uses
//! an RNG stream keyed by `(seed, backend, utterance, stage)`, so results do
//! not depend on call order or thread scheduling.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{estimate_tokens, Backend, BackendError, RawCompletion, UsageRecord};
use crate::scheme::{
    format_decision, CategoryId, LabelScheme, ParsedDecision, RenderedPrompt, Stage,
};

const ROW_TOLERANCE: f64 = 1e-9;

/// First-pass confusion: `P(predicted | gold)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConfusionSpec {
    /// `accuracy` on the diagonal, the rest spread evenly.
    Diagonal {
        accuracy: f64,
    },
    Matrix(BTreeMap<CategoryId, BTreeMap<CategoryId, f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticAnnotatorConfig {
    pub confusion: ConfusionSpec,
    /// Chance that verification fixes a wrong prior.
    #[serde(default)]
    pub verify_correct_prob: f64,
    /// Chance that verification breaks a correct prior.
    #[serde(default)]
    pub verify_corrupt_prob: f64,
    /// Chance the adjudicator picks gold when gold is a candidate.
    #[serde(default = "one")]
    pub adjudicate_correct_prob: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tokens")]
    pub tokens_per_response: u64,
}

fn one() -> f64 {
    1.0
}

fn default_tokens() -> u64 {
    40
}

impl SyntheticAnnotatorConfig {
    pub fn diagonal(accuracy: f64) -> Self {
        Self {
            confusion: ConfusionSpec::Diagonal { accuracy },
            verify_correct_prob: 0.0,
            verify_corrupt_prob: 0.0,
            adjudicate_correct_prob: 1.0,
            seed: 0,
            tokens_per_response: 40,
        }
    }

    /// Rows in scheme order, checked to be distributions.
    pub fn resolve(&self, scheme: &LabelScheme) -> Result<Vec<Vec<f64>>, BackendError> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(BackendError::Config(format!(
                    "{name} = {p} is outside [0, 1]"
                )))
            }
        };
        prob("verify_correct_prob", self.verify_correct_prob)?;
        prob("verify_corrupt_prob", self.verify_corrupt_prob)?;
        prob("adjudicate_correct_prob", self.adjudicate_correct_prob)?;

        let ids: Vec<&CategoryId> = scheme.category_ids().collect();
        let k = ids.len();
        let rows: Vec<Vec<f64>> = match &self.confusion {
            ConfusionSpec::Diagonal { accuracy } => {
                prob("accuracy", *accuracy)?;
                let off = if k > 1 {
                    (1.0 - accuracy) / (k - 1) as f64
                } else {
                    0.0
                };
                (0..k)
                    .map(|i| {
                        (0..k)
                            .map(|j| if i == j { *accuracy } else { off })
                            .collect()
                    })
                    .collect()
            }
            ConfusionSpec::Matrix(m) => {
                if let Some(bad) = m.keys().find(|g| !scheme.contains(g.as_str())) {
                    return Err(BackendError::Config(format!(
                        "confusion row {bad} is not in the scheme"
                    )));
                }
                ids.iter()
                    .map(|g| {
                        let row = m.get(*g).ok_or_else(|| {
                            BackendError::Config(format!("confusion row {g} is missing"))
                        })?;
                        if let Some(bad) = row.keys().find(|p| !scheme.contains(p.as_str())) {
                            return Err(BackendError::Config(format!(
                                "confusion column {bad} is not in the scheme"
                            )));
                        }
                        Ok(ids
                            .iter()
                            .map(|p| row.get(*p).copied().unwrap_or(0.0))
                            .collect())
                    })
                    .collect::<Result<_, _>>()?
            }
        };
        for (i, row) in rows.iter().enumerate() {
            for &p in row {
                prob("confusion entry", p)?;
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(BackendError::Config(format!(
                    "confusion row {} sums to {sum}",
                    ids[i]
                )));
            }
        }
        Ok(rows)
    }
}

pub struct SyntheticBackend {
    backend_id: String,
    config: SyntheticAnnotatorConfig,
    rows: Vec<Vec<f64>>,
    scheme: Arc<LabelScheme>,
    gold: Arc<BTreeMap<String, CategoryId>>,
}

impl SyntheticBackend {
    pub fn new(
        backend_id: impl Into<String>,
        config: SyntheticAnnotatorConfig,
        scheme: Arc<LabelScheme>,
        gold: Arc<BTreeMap<String, CategoryId>>,
    ) -> Result<Self, BackendError> {
        let rows = config.resolve(&scheme)?;
        Ok(Self {
            backend_id: backend_id.into(),
            config,
            rows,
            scheme,
            gold,
        })
    }

    fn decide(
        &self,
        prompt: &RenderedPrompt,
        gold: &CategoryId,
    ) -> Result<CategoryId, BackendError> {
        let gold_pos = self.scheme.position(gold.as_str()).ok_or_else(|| {
            BackendError::Rejected(format!("gold label {gold} is not in the scheme"))
        })?;
        let mut rng = crate::seed::stream(
            self.config.seed,
            &[
                "synthetic",
                &self.backend_id,
                &prompt.target_utterance_id,
                prompt.stage.as_str(),
            ],
        );
        let ids: Vec<&CategoryId> = self.scheme.category_ids().collect();
        let u: f64 = rng.gen();

        Ok(match prompt.stage {
            Stage::Annotate => {
                let row = &self.rows[gold_pos];
                let mut acc = 0.0;
                let mut pick = ids.len() - 1;
                for (j, p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        pick = j;
                        break;
                    }
                }
                // guard against rows whose float sum falls just short of 1
                while row[pick] == 0.0 && pick > 0 {
                    pick -= 1;
                }
                ids[pick].clone()
            }
            Stage::Verify => {
                let prior = prompt.prior.as_ref().ok_or_else(|| {
                    BackendError::Rejected("verification prompt without prior".into())
                })?;
                if prior.label == *gold {
                    if u < self.config.verify_corrupt_prob && ids.len() > 1 {
                        let others: Vec<&&CategoryId> =
                            ids.iter().filter(|c| **c != gold).collect();
                        (*others[rng.gen_range(0..others.len())]).clone()
                    } else {
                        gold.clone()
                    }
                } else if u < self.config.verify_correct_prob {
                    gold.clone()
                } else {
                    prior.label.clone()
                }
            }
            Stage::Adjudicate => {
                let mut labels: Vec<&CategoryId> = Vec::new();
                for c in &prompt.candidates {
                    if !labels.contains(&&c.decision.label) {
                        labels.push(&c.decision.label);
                    }
                }
                if labels.is_empty() {
                    return Err(BackendError::Rejected(
                        "adjudication prompt without candidates".into(),
                    ));
                }
                if labels.contains(&gold) {
                    let others: Vec<&CategoryId> =
                        labels.iter().copied().filter(|c| *c != gold).collect();
                    if u < self.config.adjudicate_correct_prob || others.is_empty() {
                        gold.clone()
                    } else {
                        others[rng.gen_range(0..others.len())].clone()
                    }
                } else {
                    labels[rng.gen_range(0..labels.len())].clone()
                }
            }
        })
    }
}

impl Backend for SyntheticBackend {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }

    fn complete_once(&self, prompt: &RenderedPrompt) -> Result<RawCompletion, BackendError> {
        let gold = self.gold.get(&prompt.target_utterance_id).ok_or_else(|| {
            BackendError::Rejected(format!("no gold label for {}", prompt.target_utterance_id))
        })?;
        let label = self.decide(prompt, gold)?;
        let decision = ParsedDecision {
            justification: format!(
                "{} decision by {} for {}",
                prompt.stage, self.backend_id, prompt.target_utterance_id
            ),
            label,
        };
        Ok(RawCompletion {
            text: format_decision(&decision),
            usage: Some(UsageRecord::new(
                estimate_tokens(&prompt.text),
                self.config.tokens_per_response,
            )),
        })
    }
}
