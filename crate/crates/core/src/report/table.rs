use std::collections::BTreeMap;

use serde::Serialize;

use super::{difficulty_order, fmt_scalar, model_order, ReportError, RunSummary};
use crate::orchestrator::StrategyId;
use crate::scheme::{CategoryId, LabelScheme};
use crate::Scalar;

/// One (category, model) row: F1 per strategy in [`StrategyId::all`] order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow<T> {
    pub category: CategoryId,
    pub model: String,
    pub cells: [Option<T>; 6],
    /// Highest cell of each pipeline half.
    pub bold: [bool; 6],
    /// Source of each cell.
    pub provenance: [String; 6],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryTable<T> {
    pub strategies: Vec<StrategyId>,
    pub rows: Vec<TableRow<T>>,
}

/// Index of the maximum defined cell in `half`, ties going to the later cell.
fn bold_index<T: Scalar>(half: &[Option<T>]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, v) in half.iter().enumerate() {
        if let Some(v) = *v {
            if best.is_none_or(|(_, b)| v >= b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

impl<T: Scalar> TableRow<T> {
    fn new(
        category: CategoryId,
        model: String,
        cells: [Option<T>; 6],
        provenance: [String; 6],
    ) -> Self {
        let mut bold = [false; 6];
        for start in [0, 3] {
            if let Some(i) = bold_index(&cells[start..start + 3]) {
                bold[start + i] = true;
            }
        }
        Self {
            category,
            model,
            cells,
            bold,
            provenance,
        }
    }
}

impl<T: Scalar> CategoryTable<T> {
    pub fn row(&self, category: &str, model: &str) -> Option<&TableRow<T>> {
        self.rows
            .iter()
            .find(|r| r.category == category && r.model == model)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["category".to_string(), "model".to_string()];
        header.extend(self.strategies.iter().map(|s| s.to_string()));
        header.push("bold".into());
        header.push("provenance".into());
        w.write_record(&header).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![r.category.to_string(), r.model.clone()];
            rec.extend(r.cells.iter().map(|c| fmt_scalar(*c)));
            let bold: Vec<String> = self
                .strategies
                .iter()
                .zip(r.bold)
                .filter(|(_, b)| *b)
                .map(|(s, _)| s.to_string())
                .collect();
            rec.push(bold.join(";"));
            rec.push(r.provenance.join(";"));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }
}

/// Builds the per-category strategy table. Rows run through categories by
/// increasing baseline difficulty, models in order of first appearance.
/// Every model needs all six strategies.
pub fn emit_category_table<T: Scalar>(
    summaries: &[RunSummary<T>],
    scheme: &LabelScheme,
) -> Result<(CategoryTable<T>, String), ReportError> {
    let strategies = StrategyId::all();
    let mut by_cell: BTreeMap<(&str, StrategyId), &RunSummary<T>> = BTreeMap::new();
    for s in summaries {
        s.check_scheme(scheme)?;
        if by_cell.insert((&s.model, s.strategy_id), s).is_some() {
            return Err(ReportError::DuplicateCell {
                model: s.model.clone(),
                strategy: s.strategy_id,
            });
        }
    }
    let models = model_order(summaries);
    for m in &models {
        for s in &strategies {
            if !by_cell.contains_key(&(m.as_str(), *s)) {
                return Err(ReportError::MissingCell {
                    model: m.clone(),
                    strategy: *s,
                });
            }
        }
    }
    let mut rows = Vec::new();
    for category in difficulty_order(summaries, scheme) {
        for m in &models {
            let cell = |i: usize| by_cell[&(m.as_str(), strategies[i])];
            let cells = std::array::from_fn(|i| cell(i).f1(category.as_str()));
            let provenance =
                std::array::from_fn(|i| format!("{}#{}", cell(i).provenance_ref(), category));
            rows.push(TableRow::new(
                category.clone(),
                m.clone(),
                cells,
                provenance,
            ));
        }
    }
    let table = CategoryTable { strategies, rows };
    let csv = table.to_csv();
    Ok((table, csv))
}

impl<T> RunSummary<T> {
    /// Identifier of the run or fixture entry behind this summary.
    pub(crate) fn provenance_ref(&self) -> String {
        if self.provenance.starts_with("ledger:") {
            self.provenance.clone()
        } else {
            format!("{}/{}/{}", self.provenance, self.model, self.strategy_id)
        }
    }
}
