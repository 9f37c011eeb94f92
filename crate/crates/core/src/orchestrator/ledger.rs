use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdjudicationScope, Depth, StrategyConfig};
use crate::backend::UsageRecord;
use crate::scheme::{CategoryId, Stage};

fn is_false(b: &bool) -> bool {
    !*b
}

/// One model decision at one stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    /// Position in the ledger; orders records in time.
    pub seq: u64,
    pub segment_id: String,
    pub utterance_id: String,
    pub stage: Stage,
    pub backend_id: String,
    pub label: CategoryId,
    pub justification: String,
    /// Tokens for every request behind this decision, including rejected
    /// outputs. For cached records this is what the original call cost.
    pub usage: UsageRecord,
    pub usage_estimated: bool,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attempt_errors: Vec<String>,
    pub cached: bool,
    pub prompt_hash: String,
    /// No valid answer was obtained; `label` is the scheme's none category.
    #[serde(default, skip_serializing_if = "is_false")]
    pub abstain: bool,
    /// Adjudicator output was unusable; `label` is the fallback choice.
    #[serde(default, skip_serializing_if = "is_false")]
    pub fallback: bool,
}

impl AnnotationRecord {
    /// Usage charged to the run: zero for cache hits.
    pub fn billed_usage(&self) -> UsageRecord {
        if self.cached {
            UsageRecord::ZERO
        } else {
            self.usage
        }
    }
}

/// A line of the ledger file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LedgerLine {
    Header {
        run_id: String,
        strategy: StrategyConfig,
        scheme_id: String,
        targets: usize,
    },
    Record(AnnotationRecord),
    Final {
        utterance_id: String,
        label: CategoryId,
        #[serde(default, skip_serializing_if = "is_false")]
        abstain: bool,
    },
    Complete {
        final_labels: BTreeMap<String, CategoryId>,
        stage_usage: BTreeMap<Stage, UsageRecord>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum LedgerError {
    #[error("ledger I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt ledger {path} at byte offset {offset}: {message}")]
    Corrupt {
        path: String,
        offset: u64,
        message: String,
    },
    #[error("ledger {path} was written for a different strategy configuration")]
    StrategyMismatch { path: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLedger {
    pub run_id: String,
    pub strategy: StrategyConfig,
    pub scheme_id: String,
    pub targets: usize,
    pub records: Vec<AnnotationRecord>,
    pub final_labels: BTreeMap<String, CategoryId>,
    pub abstained: BTreeSet<String>,
    /// Billed usage per stage (cache hits count zero).
    pub stage_usage: BTreeMap<Stage, UsageRecord>,
    pub complete: bool,
}

impl RunLedger {
    pub fn new(strategy: StrategyConfig, scheme_id: impl Into<String>, targets: usize) -> Self {
        Self {
            run_id: strategy.run_id.clone(),
            strategy,
            scheme_id: scheme_id.into(),
            targets,
            records: Vec::new(),
            final_labels: BTreeMap::new(),
            abstained: BTreeSet::new(),
            stage_usage: BTreeMap::new(),
            complete: false,
        }
    }

    pub(crate) fn push_record(&mut self, mut record: AnnotationRecord) -> &AnnotationRecord {
        record.seq = self.records.len() as u64;
        *self.stage_usage.entry(record.stage).or_default() += record.billed_usage();
        self.records.push(record);
        self.records.last().expect("just pushed")
    }

    pub(crate) fn set_final(&mut self, utterance_id: &str, label: CategoryId, abstain: bool) {
        self.final_labels.insert(utterance_id.to_string(), label);
        if abstain {
            self.abstained.insert(utterance_id.to_string());
        }
    }

    pub fn records_for<'a>(
        &'a self,
        utterance_id: &'a str,
    ) -> impl Iterator<Item = &'a AnnotationRecord> + 'a {
        self.records
            .iter()
            .filter(move |r| r.utterance_id == utterance_id)
    }

    pub fn stage_count(&self, stage: Stage) -> usize {
        self.records.iter().filter(|r| r.stage == stage).count()
    }

    /// Targets whose adjudication candidates are not unanimous, recomputed
    /// from the annotate/verify records.
    pub fn disagreement_set(&self) -> BTreeSet<String> {
        let s = &self.strategy;
        if s.strategy_id.depth != Depth::Adjudicated {
            return BTreeSet::new();
        }
        let mut candidates: BTreeMap<&str, Vec<&CategoryId>> = BTreeMap::new();
        for r in &self.records {
            let counts = match s.adjudication_scope {
                AdjudicationScope::Chain => {
                    r.backend_id == s.annotator_backend
                        && matches!(r.stage, Stage::Annotate | Stage::Verify)
                }
                AdjudicationScope::Panel => {
                    r.stage == Stage::Verify && s.panel_backends.contains(&r.backend_id)
                }
            };
            if counts {
                candidates
                    .entry(&r.utterance_id)
                    .or_default()
                    .push(&r.label);
            }
        }
        candidates
            .into_iter()
            .filter(|(_, labels)| labels.iter().any(|l| *l != labels[0]))
            .map(|(id, _)| id.to_string())
            .collect()
    }

    pub fn lines(&self) -> Vec<LedgerLine> {
        let mut out = vec![LedgerLine::Header {
            run_id: self.run_id.clone(),
            strategy: self.strategy.clone(),
            scheme_id: self.scheme_id.clone(),
            targets: self.targets,
        }];
        let mut pending: BTreeSet<&str> = self.final_labels.keys().map(String::as_str).collect();
        for (i, r) in self.records.iter().enumerate() {
            out.push(LedgerLine::Record(r.clone()));
            let last_for_target = self
                .records
                .get(i + 1)
                .is_none_or(|n| n.utterance_id != r.utterance_id);
            if last_for_target && pending.remove(r.utterance_id.as_str()) {
                out.push(self.final_line(&r.utterance_id));
            }
        }
        if self.complete {
            out.push(self.complete_line());
        }
        out
    }

    fn final_line(&self, utterance_id: &str) -> LedgerLine {
        LedgerLine::Final {
            utterance_id: utterance_id.to_string(),
            label: self.final_labels[utterance_id].clone(),
            abstain: self.abstained.contains(utterance_id),
        }
    }

    fn complete_line(&self) -> LedgerLine {
        LedgerLine::Complete {
            final_labels: self.final_labels.clone(),
            stage_usage: self.stage_usage.clone(),
        }
    }

    /// Reads a ledger file and returns it with the byte length of its
    /// committed prefix. Records after the last `final` line belong to a
    /// target that was never finished and are left out, as is a torn final
    /// line (no trailing newline). A complete line that does not parse is
    /// corruption.
    pub fn read(path: &Path) -> Result<(Self, u64), LedgerError> {
        let io = |source| LedgerError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut bytes = Vec::new();
        File::open(path)
            .map_err(io)?
            .read_to_end(&mut bytes)
            .map_err(io)?;
        let corrupt = |offset: usize, message: String| LedgerError::Corrupt {
            path: path.display().to_string(),
            offset: offset as u64,
            message,
        };

        let mut ledger: Option<RunLedger> = None;
        let mut offset = 0usize;
        let mut committed = (0usize, 0usize);
        while offset < bytes.len() {
            let Some(nl) = bytes[offset..].iter().position(|&b| b == b'\n') else {
                log::warn!("{}: dropping torn line at byte {offset}", path.display());
                break;
            };
            let raw = &bytes[offset..offset + nl];
            let line: LedgerLine =
                serde_json::from_slice(raw).map_err(|e| corrupt(offset, e.to_string()))?;
            let is_record = matches!(line, LedgerLine::Record(_));
            match (line, ledger.as_mut()) {
                (
                    LedgerLine::Header {
                        strategy,
                        scheme_id,
                        targets,
                        ..
                    },
                    None,
                ) => ledger = Some(RunLedger::new(strategy, scheme_id, targets)),
                (LedgerLine::Header { .. }, Some(_)) => {
                    return Err(corrupt(offset, "second header".into()))
                }
                (_, None) => return Err(corrupt(offset, "missing header".into())),
                (LedgerLine::Record(r), Some(l)) => {
                    if r.seq != l.records.len() as u64 {
                        return Err(corrupt(
                            offset,
                            format!("record seq {} out of order", r.seq),
                        ));
                    }
                    l.push_record(r);
                }
                (
                    LedgerLine::Final {
                        utterance_id,
                        label,
                        abstain,
                    },
                    Some(l),
                ) => l.set_final(&utterance_id, label, abstain),
                (LedgerLine::Complete { .. }, Some(l)) => l.complete = true,
            }
            offset += nl + 1;
            if let (Some(l), false) = (&ledger, is_record) {
                committed = (offset, l.records.len());
            }
        }
        let mut ledger = ledger.ok_or_else(|| corrupt(0, "empty ledger".into()))?;
        if ledger.records.len() > committed.1 {
            log::warn!(
                "{}: dropping {} records of an unfinished target",
                path.display(),
                ledger.records.len() - committed.1
            );
            ledger.records.truncate(committed.1);
            ledger.stage_usage.clear();
            for r in &ledger.records {
                *ledger.stage_usage.entry(r.stage).or_default() += r.billed_usage();
            }
        }
        Ok((ledger, committed.0 as u64))
    }
}

/// Append-only writer for a ledger file.
pub(crate) struct LedgerWriter {
    file: File,
    path: String,
}

impl LedgerWriter {
    /// Opens `path` for appending. An existing file must carry the same
    /// strategy; its records are returned for reuse.
    pub(crate) fn open(path: &Path, fresh: RunLedger) -> Result<(Self, RunLedger), LedgerError> {
        let io = |source| LedgerError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        if path.exists() && std::fs::metadata(path).map_err(io)?.len() > 0 {
            let (existing, valid_len) = RunLedger::read(path)?;
            if existing.strategy != fresh.strategy || existing.scheme_id != fresh.scheme_id {
                return Err(LedgerError::StrategyMismatch {
                    path: path.display().to_string(),
                });
            }
            let file = OpenOptions::new().write(true).open(path).map_err(io)?;
            file.set_len(valid_len).map_err(io)?;
            drop(file);
            let file = OpenOptions::new().append(true).open(path).map_err(io)?;
            return Ok((
                Self {
                    file,
                    path: path.display().to_string(),
                },
                existing,
            ));
        }
        let file = OpenOptions::new()
            .create(true)
            .truncate(true)
            .write(true)
            .open(path)
            .map_err(io)?;
        let mut writer = Self {
            file,
            path: path.display().to_string(),
        };
        writer.append(&fresh.lines()[..1])?;
        Ok((writer, fresh))
    }

    pub(crate) fn append(&mut self, lines: &[LedgerLine]) -> Result<(), LedgerError> {
        let mut buf = Vec::new();
        for line in lines {
            serde_json::to_writer(&mut buf, line).expect("ledger lines serialize");
            buf.push(b'\n');
        }
        self.file
            .write_all(&buf)
            .and_then(|_| self.file.flush())
            .map_err(|source| LedgerError::Io {
                path: self.path.clone(),
                source,
            })
    }

    pub(crate) fn record_line(record: &AnnotationRecord) -> LedgerLine {
        LedgerLine::Record(record.clone())
    }

    pub(crate) fn final_line(ledger: &RunLedger, utterance_id: &str) -> LedgerLine {
        ledger.final_line(utterance_id)
    }

    pub(crate) fn complete_line(ledger: &RunLedger) -> LedgerLine {
        ledger.complete_line()
    }
}

/// Token totals for a ledger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageSummary {
    /// Billed usage per stage; cache hits contribute zero.
    pub per_stage: BTreeMap<Stage, UsageRecord>,
    /// The part of `per_stage` that was estimated rather than reported.
    pub estimated_per_stage: BTreeMap<Stage, UsageRecord>,
    /// Usage per stage counting cache hits at their original cost: what the
    /// strategy costs when run on its own.
    pub attributed_per_stage: BTreeMap<Stage, UsageRecord>,
    pub grand_total: UsageRecord,
    pub attributed_total: UsageRecord,
}

pub fn total_usage(ledger: &RunLedger) -> UsageSummary {
    let zeros = || {
        Stage::ALL
            .iter()
            .map(|s| (*s, UsageRecord::ZERO))
            .collect::<BTreeMap<_, _>>()
    };
    let mut per_stage = zeros();
    let mut estimated_per_stage = zeros();
    let mut attributed_per_stage = zeros();
    for r in &ledger.records {
        *per_stage.get_mut(&r.stage).expect("all stages") += r.billed_usage();
        if r.usage_estimated {
            *estimated_per_stage.get_mut(&r.stage).expect("all stages") += r.billed_usage();
        }
        *attributed_per_stage.get_mut(&r.stage).expect("all stages") += r.usage;
    }
    UsageSummary {
        grand_total: per_stage.values().copied().sum(),
        attributed_total: attributed_per_stage.values().copied().sum(),
        per_stage,
        estimated_per_stage,
        attributed_per_stage,
    }
}
