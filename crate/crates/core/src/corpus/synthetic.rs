//! Generated corpora for offline runs and load tests.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, GoldLabel, Modality, SpeakerRole, Transcript, Utterance};
use crate::scheme::{CategoryId, LabelScheme};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub transcripts: usize,
    pub utterances_per_transcript: usize,
    /// Probability that a turn is spoken by the teacher.
    #[serde(default = "default_teacher_share")]
    pub teacher_share: f64,
    /// Relative gold-label weights by category id; categories left out get
    /// weight zero. Empty means uniform over the scheme.
    #[serde(default)]
    pub label_weights: Vec<(CategoryId, f64)>,
    #[serde(default)]
    pub seed: u64,
}

fn default_teacher_share() -> f64 {
    0.5
}

const TEACHER_LINES: &[&str] = &[
    "Okay, can everyone look up here for a second?",
    "So you are saying that the denominator stays the same?",
    "Why do you think that works?",
    "How does this connect to what Maria said yesterday?",
    "Can you check that calculation again?",
    "Alright, take out your notebooks.",
    "She said the angles add up to one hundred eighty.",
    "Who can add on to that idea?",
    "What makes you sure it is seven?",
    "Let's write that on the board.",
];

const STUDENT_LINES: &[&str] = &[
    "I think it's twelve.",
    "Because you multiply both sides by two.",
    "Wait, I got a different answer.",
    "It's like the pizza problem.",
    "I don't get the second part.",
    "We added them first and then divided.",
    "Yeah, the same as before.",
    "Can we use the calculator?",
];

/// Generates a corpus where every teacher turn carries a gold label drawn from
/// the configured weights.
pub fn generate(spec: &SyntheticCorpusSpec, scheme: &LabelScheme) -> Corpus {
    let cats: Vec<&CategoryId> = scheme.categories().iter().map(|c| &c.id).collect();
    let weights: Vec<f64> = if spec.label_weights.is_empty() {
        vec![1.0; cats.len()]
    } else {
        cats.iter()
            .map(|c| {
                spec.label_weights
                    .iter()
                    .find(|(id, _)| id == *c)
                    .map_or(0.0, |(_, w)| *w)
            })
            .collect()
    };
    let picker = WeightedIndex::new(&weights).expect("label weights must have a positive entry");
    let modalities = [Modality::WholeClass, Modality::SmallGroup, Modality::Online];

    let mut transcripts = Vec::with_capacity(spec.transcripts);
    let mut gold = Vec::new();
    for t in 0..spec.transcripts {
        let tid = format!("T{t:03}");
        let mut rng = crate::seed::stream(spec.seed, &["synthetic_corpus", &tid]);
        let mut utterances = Vec::with_capacity(spec.utterances_per_transcript);
        for i in 0..spec.utterances_per_transcript {
            let teacher = rng.gen_bool(spec.teacher_share.clamp(0.0, 1.0));
            let utterance_id = format!("{tid}:{i}");
            let text = if teacher {
                TEACHER_LINES[rng.gen_range(0..TEACHER_LINES.len())]
            } else {
                STUDENT_LINES[rng.gen_range(0..STUDENT_LINES.len())]
            };
            if teacher {
                gold.push(GoldLabel {
                    utterance_id: utterance_id.clone(),
                    category: cats[picker.sample(&mut rng)].clone(),
                });
            }
            utterances.push(Utterance {
                utterance_id,
                transcript_id: tid.clone(),
                index: i,
                speaker_role: if teacher {
                    SpeakerRole::Teacher
                } else {
                    SpeakerRole::Student
                },
                text: text.to_string(),
            });
        }
        transcripts.push(Transcript {
            transcript_id: tid,
            modality: modalities[t % modalities.len()],
            utterances,
        });
    }
    Corpus::new(transcripts, gold, scheme).expect("generated corpus is valid by construction")
}
