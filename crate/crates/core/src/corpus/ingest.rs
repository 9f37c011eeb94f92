use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, GoldLabel, Modality, SpeakerRole, Transcript, Utterance};
use crate::scheme::{CategoryId, LabelScheme};

/// One line of a transcript file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub transcript_id: String,
    pub index: usize,
    pub speaker_role: SpeakerRole,
    pub text: String,
    /// Defaults to `<transcript_id>:<index>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utterance_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<Modality>,
}

impl UtteranceRecord {
    fn resolved_id(&self) -> String {
        self.utterance_id
            .clone()
            .unwrap_or_else(|| format!("{}:{}", self.transcript_id, self.index))
    }
}

/// Parses line-delimited utterance records. Blank lines are skipped; line
/// numbers are 1-based.
pub fn read_transcript_records<R: Read>(
    reader: R,
    source_name: &str,
) -> Result<Vec<(usize, UtteranceRecord)>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: source_name.to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: UtteranceRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                source_name: source_name.to_string(),
                line: line_no,
                message: e.to_string(),
            })?;
        if record.text.trim().is_empty() {
            return Err(CorpusError::Malformed {
                source_name: source_name.to_string(),
                line: line_no,
                message: "utterance text is empty".into(),
            });
        }
        out.push((line_no, record));
    }
    Ok(out)
}

#[derive(Debug, Deserialize, Serialize)]
struct GoldRow {
    utterance_id: String,
    category: String,
}

/// Parses a gold-label table with header `utterance_id,category`.
pub fn read_gold<R: Read>(reader: R, source_name: &str) -> Result<Vec<GoldLabel>, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize::<GoldRow>() {
        let row = row.map_err(|e| CorpusError::Malformed {
            source_name: source_name.to_string(),
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        out.push(GoldLabel {
            utterance_id: row.utterance_id,
            category: CategoryId::from(row.category),
        });
    }
    Ok(out)
}

pub(super) fn assemble(
    records: Vec<(String, usize, UtteranceRecord)>,
) -> Result<Vec<Transcript>, CorpusError> {
    let mut order: Vec<String> = Vec::new();
    let mut grouped: HashMap<String, Vec<(String, usize, UtteranceRecord)>> = HashMap::new();
    for entry in records {
        let tid = entry.2.transcript_id.clone();
        if !grouped.contains_key(&tid) {
            order.push(tid.clone());
        }
        grouped.entry(tid).or_default().push(entry);
    }

    let mut transcripts = Vec::with_capacity(order.len());
    for tid in order {
        let mut rows = grouped.remove(&tid).unwrap_or_default();
        rows.sort_by_key(|(_, _, r)| r.index);
        let mut modality = None;
        let mut utterances = Vec::with_capacity(rows.len());
        for (expected, (_, _, rec)) in rows.into_iter().enumerate() {
            if rec.index < expected {
                return Err(CorpusError::DuplicatePosition {
                    transcript_id: tid,
                    index: rec.index,
                });
            }
            if rec.index != expected {
                return Err(CorpusError::NonContiguous {
                    transcript_id: tid,
                    expected,
                    found: rec.index,
                });
            }
            if let Some(m) = rec.modality {
                match modality {
                    Some(prev) if prev != m => return Err(CorpusError::ConflictingModality(tid)),
                    _ => modality = Some(m),
                }
            }
            utterances.push(Utterance {
                utterance_id: rec.resolved_id(),
                transcript_id: rec.transcript_id,
                index: rec.index,
                speaker_role: rec.speaker_role,
                text: rec.text,
            });
        }
        transcripts.push(Transcript {
            transcript_id: tid,
            modality: modality.unwrap_or_default(),
            utterances,
        });
    }
    Ok(transcripts)
}

fn expand_sources(sources: &[PathBuf]) -> Result<Vec<PathBuf>, CorpusError> {
    let mut files = Vec::new();
    for src in sources {
        if src.is_dir() {
            let entries = std::fs::read_dir(src).map_err(|source| CorpusError::Io {
                path: src.display().to_string(),
                source,
            })?;
            let mut found: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|ext| ext == "jsonl"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(src.clone());
        }
    }
    Ok(files)
}

fn open(path: &Path) -> Result<File, CorpusError> {
    File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads transcript files (directories are expanded to their `*.jsonl`
/// entries in name order) and an optional gold table, then validates the
/// result as a [`Corpus`].
pub fn ingest_corpus(
    transcript_sources: &[PathBuf],
    gold_path: Option<&Path>,
    scheme: &LabelScheme,
) -> Result<Corpus, CorpusError> {
    let mut records = Vec::new();
    for path in expand_sources(transcript_sources)? {
        let name = path.display().to_string();
        for (line, rec) in read_transcript_records(open(&path)?, &name)? {
            records.push((name.clone(), line, rec));
        }
    }
    let transcripts = assemble(records)?;
    let gold = match gold_path {
        Some(p) => read_gold(open(p)?, &p.display().to_string())?,
        None => Vec::new(),
    };
    Corpus::new(transcripts, gold, scheme)
}

pub fn write_transcripts<W: Write>(corpus: &Corpus, mut out: W) -> std::io::Result<()> {
    for t in corpus.transcripts() {
        for u in &t.utterances {
            let rec = UtteranceRecord {
                transcript_id: u.transcript_id.clone(),
                index: u.index,
                speaker_role: u.speaker_role,
                text: u.text.clone(),
                utterance_id: Some(u.utterance_id.clone()),
                modality: Some(t.modality),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn write_gold<W: Write>(labels: &[GoldLabel], out: W) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(out);
    for g in labels {
        wtr.serialize(GoldRow {
            utterance_id: g.utterance_id.clone(),
            category: g.category.to_string(),
        })?;
    }
    wtr.flush()?;
    Ok(())
}
