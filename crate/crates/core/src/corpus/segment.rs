use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, Utterance};

/// A contiguous slice of one transcript holding one or more target turns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub segment_id: String,
    pub transcript_id: String,
    pub utterances: Vec<Utterance>,
    /// Teacher turns to label, in transcript order.
    pub target_ids: Vec<String>,
}

impl Segment {
    pub fn contains_target(&self, utterance_id: &str) -> bool {
        self.target_ids.iter().any(|t| t == utterance_id)
    }

    pub fn utterance(&self, utterance_id: &str) -> Option<&Utterance> {
        self.utterances
            .iter()
            .find(|u| u.utterance_id == utterance_id)
    }

    /// First and last transcript index covered.
    pub fn span(&self) -> (usize, usize) {
        (
            self.utterances.first().map_or(0, |u| u.index),
            self.utterances.last().map_or(0, |u| u.index),
        )
    }
}

/// Builds context segments around `targets`.
///
/// Every target contributes the window `[index - k, index + k]` clipped to its
/// transcript. Windows in the same transcript that overlap or touch are merged,
/// so each target lands in exactly one segment and segments never overlap.
/// Segments are ordered by transcript (corpus order) and then position.
pub fn build_segments<'a, I>(
    corpus: &Corpus,
    targets: I,
    window_k: usize,
) -> Result<Vec<Segment>, CorpusError>
where
    I: IntoIterator<Item = &'a String>,
{
    let mut by_transcript: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for id in targets {
        let (t, u) = corpus
            .position(id)
            .ok_or_else(|| CorpusError::UnknownTarget(id.clone()))?;
        if !corpus.transcripts()[t].utterances[u].is_teacher() {
            return Err(CorpusError::StudentTarget(id.clone()));
        }
        by_transcript.entry(t).or_default().push(u);
    }

    let mut segments = Vec::new();
    for (t, mut indices) in by_transcript {
        indices.sort_unstable();
        indices.dedup();
        let transcript = &corpus.transcripts()[t];
        let last = transcript.utterances.len() - 1;

        let mut groups: Vec<(usize, usize, Vec<usize>)> = Vec::new();
        for idx in indices {
            let lo = idx.saturating_sub(window_k);
            let hi = (idx + window_k).min(last);
            match groups.last_mut() {
                Some((_, end, members)) if lo <= *end + 1 => {
                    *end = (*end).max(hi);
                    members.push(idx);
                }
                _ => groups.push((lo, hi, vec![idx])),
            }
        }

        for (lo, hi, members) in groups {
            segments.push(Segment {
                segment_id: format!("{}#{lo}-{hi}", transcript.transcript_id),
                transcript_id: transcript.transcript_id.clone(),
                utterances: transcript.utterances[lo..=hi].to_vec(),
                target_ids: members
                    .into_iter()
                    .map(|i| transcript.utterances[i].utterance_id.clone())
                    .collect(),
            });
        }
    }
    Ok(segments)
}
