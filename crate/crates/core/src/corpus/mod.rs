//! Transcripts, gold labels, stratified target sampling and context segments.

mod ingest;
mod sample;
mod segment;
pub mod synthetic;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::scheme::CategoryId;

pub use ingest::{
    ingest_corpus, read_gold, read_transcript_records, write_gold, write_transcripts,
    UtteranceRecord,
};
pub use sample::{apportion, stratified_sample};
pub use segment::{build_segments, Segment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeakerRole {
    Teacher,
    Student,
}

/// Lesson format. Carried as metadata only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    #[default]
    WholeClass,
    SmallGroup,
    Online,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub utterance_id: String,
    pub transcript_id: String,
    pub index: usize,
    pub speaker_role: SpeakerRole,
    pub text: String,
}

impl Utterance {
    pub fn is_teacher(&self) -> bool {
        self.speaker_role == SpeakerRole::Teacher
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub transcript_id: String,
    pub modality: Modality,
    pub utterances: Vec<Utterance>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GoldLabel {
    pub utterance_id: String,
    pub category: CategoryId,
}

/// Ingested transcripts plus the gold labels attached to their teacher turns.
///
/// Constructed only through [`Corpus::new`] (or [`ingest_corpus`]), which
/// validates every invariant; the value is immutable afterwards.
#[derive(Debug, Clone)]
pub struct Corpus {
    transcripts: Vec<Transcript>,
    gold: Vec<GoldLabel>,
    positions: HashMap<String, (usize, usize)>,
    gold_index: HashMap<String, usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{source_name}:{line}: malformed record: {message}")]
    Malformed {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error("duplicate utterance_id {0:?}")]
    DuplicateUtteranceId(String),
    #[error("transcript {transcript_id:?} has two utterances at index {index}")]
    DuplicatePosition { transcript_id: String, index: usize },
    #[error("transcript {transcript_id:?} indices are not contiguous: expected {expected}, found {found}")]
    NonContiguous {
        transcript_id: String,
        expected: usize,
        found: usize,
    },
    #[error("transcript {0:?} mixes modalities")]
    ConflictingModality(String),
    #[error("gold label references unknown utterance {0:?}")]
    UnknownGoldUtterance(String),
    #[error("gold label on non-teacher turn {0:?}")]
    GoldOnNonTeacher(String),
    #[error("gold label for {utterance_id:?} uses category {category:?} outside the scheme")]
    UnknownCategory {
        utterance_id: String,
        category: String,
    },
    #[error("utterance {0:?} has more than one gold label")]
    DuplicateGold(String),
    #[error("cannot sample {requested} targets from {available} labels")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("unknown target utterance {0:?}")]
    UnknownTarget(String),
    #[error("target {0:?} is a student turn")]
    StudentTarget(String),
}

impl Corpus {
    /// Validates transcripts and gold labels against each other and the scheme.
    pub fn new(
        transcripts: Vec<Transcript>,
        gold: Vec<GoldLabel>,
        scheme: &crate::scheme::LabelScheme,
    ) -> Result<Self, CorpusError> {
        let mut positions = HashMap::new();
        for (t_pos, transcript) in transcripts.iter().enumerate() {
            for (u_pos, utt) in transcript.utterances.iter().enumerate() {
                if utt.index != u_pos {
                    return Err(CorpusError::NonContiguous {
                        transcript_id: transcript.transcript_id.clone(),
                        expected: u_pos,
                        found: utt.index,
                    });
                }
                if positions
                    .insert(utt.utterance_id.clone(), (t_pos, u_pos))
                    .is_some()
                {
                    return Err(CorpusError::DuplicateUtteranceId(utt.utterance_id.clone()));
                }
            }
        }

        let mut gold_index = HashMap::with_capacity(gold.len());
        for (i, label) in gold.iter().enumerate() {
            let &(t, u) = positions
                .get(&label.utterance_id)
                .ok_or_else(|| CorpusError::UnknownGoldUtterance(label.utterance_id.clone()))?;
            if !transcripts[t].utterances[u].is_teacher() {
                return Err(CorpusError::GoldOnNonTeacher(label.utterance_id.clone()));
            }
            if !scheme.contains(label.category.as_str()) {
                return Err(CorpusError::UnknownCategory {
                    utterance_id: label.utterance_id.clone(),
                    category: label.category.to_string(),
                });
            }
            if gold_index.insert(label.utterance_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateGold(label.utterance_id.clone()));
            }
        }

        Ok(Self {
            transcripts,
            gold,
            positions,
            gold_index,
        })
    }

    pub fn transcripts(&self) -> &[Transcript] {
        &self.transcripts
    }

    pub fn gold(&self) -> &[GoldLabel] {
        &self.gold
    }

    pub fn utterance_count(&self) -> usize {
        self.transcripts.iter().map(|t| t.utterances.len()).sum()
    }

    pub fn utterance(&self, utterance_id: &str) -> Option<&Utterance> {
        self.positions
            .get(utterance_id)
            .map(|&(t, u)| &self.transcripts[t].utterances[u])
    }

    pub(crate) fn position(&self, utterance_id: &str) -> Option<(usize, usize)> {
        self.positions.get(utterance_id).copied()
    }

    pub fn gold_label(&self, utterance_id: &str) -> Option<&CategoryId> {
        self.gold_index
            .get(utterance_id)
            .map(|&i| &self.gold[i].category)
    }

    /// Gold labels keyed by utterance id.
    pub fn gold_map(&self) -> BTreeMap<String, CategoryId> {
        self.gold
            .iter()
            .map(|g| (g.utterance_id.clone(), g.category.clone()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelDistribution {
    pub counts: BTreeMap<CategoryId, usize>,
    pub total: usize,
}

impl LabelDistribution {
    pub fn count(&self, category: &str) -> usize {
        self.counts.get(category).copied().unwrap_or(0)
    }
}

pub fn category_distribution<'a, I>(labels: I) -> LabelDistribution
where
    I: IntoIterator<Item = &'a GoldLabel>,
{
    let mut counts = BTreeMap::new();
    let mut total = 0;
    for label in labels {
        *counts.entry(label.category.clone()).or_insert(0) += 1;
        total += 1;
    }
    LabelDistribution { counts, total }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(cats: &[&str]) -> Vec<GoldLabel> {
        cats.iter()
            .enumerate()
            .map(|(i, c)| GoldLabel {
                utterance_id: format!("u{i}"),
                category: CategoryId::from(*c),
            })
            .collect()
    }

    #[test]
    fn distribution_one_per_category() {
        let scheme = crate::scheme::LabelScheme::talk_moves();
        let cats: Vec<&str> = scheme.categories().iter().map(|c| c.id.as_str()).collect();
        let dist = category_distribution(&labels(&cats));
        assert_eq!(dist.total, 7);
        assert!(dist.counts.values().all(|&c| c == 1));
    }

    #[test]
    fn distribution_counts_repeats() {
        let dist = category_distribution(&labels(&["A", "A", "B"]));
        assert_eq!(dist.count("A"), 2);
        assert_eq!(dist.count("B"), 1);
        assert_eq!(dist.total, 3);
    }
}
