//! Run summaries and the report artifacts built from them: the per-category
//! strategy table, grouped per-category figure data and cost/performance
//! curves. Emitters are pure; [`write_report`] puts their output on disk.

mod figure;
mod table;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::metrics::{
    confusion, macro_f1_with, per_category_f1, CategoryScore, MetricsError, UndefinedPolicy,
};
use crate::orchestrator::{total_usage, Pipeline, RunLedger, StrategyId};
use crate::scheme::{CategoryId, LabelScheme};
use crate::Scalar;

pub use figure::{
    emit_cost_performance, emit_per_category_figure, CostCurve, CostPoint, FigureEntry,
    PerCategoryFigure,
};
pub use table::{emit_category_table, CategoryTable, TableRow};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("no {strategy} result for model {model:?}")]
    MissingCell { model: String, strategy: StrategyId },
    #[error("two results for model {model:?} and strategy {strategy}")]
    DuplicateCell { model: String, strategy: StrategyId },
    #[error("summary categories do not match scheme {0:?}")]
    SchemeMismatch(String),
    #[error("table line {line}: {message}")]
    Table { line: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Evaluation of one strategy run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary<T> {
    pub run_id: String,
    pub model: String,
    pub strategy_id: StrategyId,
    /// Scheme order.
    pub scores: Vec<CategoryScore<T>>,
    pub macro_f1: Option<T>,
    /// Tokens the strategy costs on its own, cache hits included.
    pub total_tokens: u64,
    /// Tokens actually spent in this run.
    pub billed_tokens: u64,
    /// Part of `billed_tokens` that was estimated.
    pub estimated_tokens: u64,
    pub targets: usize,
    pub abstained: usize,
    /// Where the numbers come from: `ledger:<run_id>` or `fixture:<name>`.
    pub provenance: String,
}

impl<T: Scalar> RunSummary<T> {
    pub fn pipeline(&self) -> Pipeline {
        self.strategy_id.pipeline
    }

    pub fn f1(&self, category: &str) -> Option<T> {
        self.scores
            .iter()
            .find(|s| s.category == category)
            .and_then(|s| s.f1)
    }

    fn check_scheme(&self, scheme: &LabelScheme) -> Result<(), ReportError> {
        let ids: Vec<&CategoryId> = self.scores.iter().map(|s| &s.category).collect();
        if !ids.iter().copied().eq(scheme.category_ids()) {
            return Err(ReportError::SchemeMismatch(scheme.scheme_id().to_string()));
        }
        Ok(())
    }
}

/// Scores a ledger's final labels against `gold`.
pub fn summarize<T: Scalar>(
    ledger: &RunLedger,
    gold: &BTreeMap<String, CategoryId>,
    scheme: &LabelScheme,
    policy: UndefinedPolicy,
) -> Result<RunSummary<T>, ReportError> {
    let mut scored_gold = BTreeMap::new();
    for id in ledger.final_labels.keys() {
        let g = gold
            .get(id)
            .ok_or_else(|| MetricsError::UnknownPrediction(id.clone()))?;
        scored_gold.insert(id.clone(), g.clone());
    }
    let cm = confusion(&scored_gold, &ledger.final_labels, scheme)?;
    let scores = per_category_f1::<T>(&cm);
    let macro_f1 = match macro_f1_with(&scores, policy) {
        Ok(m) => Some(m),
        Err(MetricsError::AllUndefined) => None,
        Err(e) => return Err(e.into()),
    };
    let usage = total_usage(ledger);
    Ok(RunSummary {
        run_id: ledger.run_id.clone(),
        model: ledger.strategy.model_name().to_string(),
        strategy_id: ledger.strategy.strategy_id,
        scores,
        macro_f1,
        total_tokens: usage.attributed_total.total_tokens(),
        billed_tokens: usage.grand_total.total_tokens(),
        estimated_tokens: usage
            .estimated_per_stage
            .values()
            .map(|u| u.total_tokens())
            .sum(),
        targets: ledger.final_labels.len(),
        abstained: ledger.abstained.len(),
        provenance: format!("ledger:{}", ledger.run_id),
    })
}

/// Parses a plain decimal such as `0.22` exactly: `22 / 100` rather than the
/// nearest binary float.
pub fn parse_decimal<T: Scalar>(text: &str) -> Option<T> {
    let (neg, body) = match text.trim().strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, text.trim()),
    };
    let (int, frac) = body.split_once('.').unwrap_or((body, ""));
    if int.is_empty() && frac.is_empty() {
        return None;
    }
    if !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) || frac.len() > 18 {
        return None;
    }
    let digits: u64 = format!("{int}{frac}").parse().ok()?;
    let value = T::from_u64(digits)? / T::from_u64(10u64.checked_pow(frac.len() as u32)?)?;
    Some(if neg { T::zero() - value } else { value })
}

pub(crate) fn fmt_scalar<T: Scalar>(v: Option<T>) -> String {
    v.and_then(|x| x.to_f64())
        .map(|x| format!("{x:.4}"))
        .unwrap_or_default()
}

/// Reads a per-category table (`category,model,<six strategy columns>`) into
/// one summary per (model, strategy). Precision, recall and tokens are not
/// part of the table and are left empty.
pub fn read_category_table<T: Scalar, R: Read>(
    reader: R,
    name: &str,
    scheme: &LabelScheme,
) -> Result<Vec<RunSummary<T>>, ReportError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let bad = |line: usize, message: String| ReportError::Table { line, message };
    if headers.len() != 8 || &headers[0] != "category" || &headers[1] != "model" {
        return Err(bad(
            1,
            "expected header category,model,<six strategies>".into(),
        ));
    }
    let strategies: Vec<StrategyId> = headers
        .iter()
        .skip(2)
        .map(|h| h.parse().map_err(|e: String| bad(1, e)))
        .collect::<Result<_, _>>()?;
    let mut cells: BTreeMap<(String, StrategyId), BTreeMap<CategoryId, T>> = BTreeMap::new();
    let mut models: Vec<String> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let category = scheme
            .resolve_label(&rec[0])
            .ok_or_else(|| bad(line, format!("unknown category {:?}", &rec[0])))?
            .clone();
        let model = rec[1].to_string();
        if !models.contains(&model) {
            models.push(model.clone());
        }
        for (j, s) in strategies.iter().enumerate() {
            let v = parse_decimal::<T>(&rec[j + 2])
                .ok_or_else(|| bad(line, format!("bad value {:?}", &rec[j + 2])))?;
            if cells
                .entry((model.clone(), *s))
                .or_default()
                .insert(category.clone(), v)
                .is_some()
            {
                return Err(bad(line, format!("repeated row for {category}/{model}")));
            }
        }
    }
    let mut out = Vec::new();
    for model in &models {
        for s in &strategies {
            let values = &cells[&(model.clone(), *s)];
            let scores: Vec<CategoryScore<T>> = scheme
                .category_ids()
                .map(|c| CategoryScore {
                    category: c.clone(),
                    precision: None,
                    recall: None,
                    f1: values.get(c).copied(),
                })
                .collect();
            let macro_f1 = macro_f1_with(&scores, UndefinedPolicy::Exclude).ok();
            out.push(RunSummary {
                run_id: format!("{name}/{model}/{s}"),
                model: model.clone(),
                strategy_id: *s,
                scores,
                macro_f1,
                total_tokens: 0,
                billed_tokens: 0,
                estimated_tokens: 0,
                targets: 0,
                abstained: 0,
                provenance: format!("fixture:{name}"),
            });
        }
    }
    Ok(out)
}

/// Models in order of first appearance.
pub(crate) fn model_order<T>(summaries: &[RunSummary<T>]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    summaries
        .iter()
        .filter(|s| seen.insert(s.model.clone()))
        .map(|s| s.model.clone())
        .collect()
}

/// Mean of the defined values, if any.
pub(crate) fn mean_defined<T: Scalar>(values: impl IntoIterator<Item = Option<T>>) -> Option<T> {
    let (sum, n) = values
        .into_iter()
        .flatten()
        .fold((T::zero(), 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / T::from_count(n))
}

/// Categories ordered by ascending mean non-reasoning single-pass F1; ties
/// and undefined means keep scheme order, undefined last.
pub fn difficulty_order<T: Scalar>(
    summaries: &[RunSummary<T>],
    scheme: &LabelScheme,
) -> Vec<CategoryId> {
    let baseline = StrategyId::new(
        Pipeline::NonReasoning,
        crate::orchestrator::Depth::Annotated,
    );
    let mut keyed: Vec<(Option<T>, usize, CategoryId)> = scheme
        .category_ids()
        .enumerate()
        .map(|(i, c)| {
            let mean = mean_defined(
                summaries
                    .iter()
                    .filter(|s| s.strategy_id == baseline)
                    .map(|s| s.f1(c.as_str())),
            );
            (mean, i, c.clone())
        })
        .collect();
    keyed.sort_by(|a, b| match (a.0, b.0) {
        (Some(x), Some(y)) => x
            .partial_cmp(&y)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.1.cmp(&b.1),
    });
    keyed.into_iter().map(|(_, _, c)| c).collect()
}

/// Reproducibility metadata written next to every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub scheme_id: String,
    pub run_ids: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
    pub provenance: Vec<String>,
    pub files: Vec<String>,
}

/// Paths written by [`write_report`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub category_table: PathBuf,
    pub per_category_figure: PathBuf,
    pub cost_performance: Option<PathBuf>,
    pub meta: PathBuf,
}

fn write_file(path: &Path, contents: &str) -> Result<(), ReportError> {
    let io = |source| ReportError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, contents).map_err(io)
}

/// Writes the table under `tables/`, the figure data under `figures/` and a
/// metadata sidecar under `meta/`. The cost curve is skipped when no summary
/// carries token counts.
pub fn write_report<T: Scalar>(
    out: &Path,
    summaries: &[RunSummary<T>],
    scheme: &LabelScheme,
    seeds: BTreeMap<String, u64>,
) -> Result<ReportFiles, ReportError> {
    let (_, table_csv) = emit_category_table(summaries, scheme)?;
    let (_, figure_csv) = emit_per_category_figure(summaries, scheme)?;
    let files = ReportFiles {
        category_table: out.join("tables").join("category_table.csv"),
        per_category_figure: out.join("figures").join("per_category.csv"),
        cost_performance: summaries
            .iter()
            .any(|s| s.total_tokens > 0)
            .then(|| out.join("figures").join("cost_performance.csv")),
        meta: out.join("meta").join("report.json"),
    };
    write_file(&files.category_table, &table_csv)?;
    write_file(&files.per_category_figure, &figure_csv)?;
    if let Some(path) = &files.cost_performance {
        let (_, curve_csv) = emit_cost_performance(summaries)?;
        write_file(path, &curve_csv)?;
    }
    let rel = |p: &Path| p.strip_prefix(out).unwrap_or(p).display().to_string();
    let mut listed = vec![rel(&files.category_table), rel(&files.per_category_figure)];
    listed.extend(files.cost_performance.as_deref().map(rel));
    let meta = ReportMeta {
        scheme_id: scheme.scheme_id().to_string(),
        run_ids: summaries.iter().map(|s| s.run_id.clone()).collect(),
        seeds,
        provenance: summaries
            .iter()
            .map(|s| s.provenance.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
        files: listed,
    };
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n";
    write_file(&files.meta, &json)?;
    Ok(files)
}
