use std::collections::BTreeMap;

use serde::Serialize;

use super::{difficulty_order, fmt_scalar, mean_defined, model_order, ReportError, RunSummary};
use crate::metrics::{pareto_frontier, ParetoPoint};
use crate::orchestrator::{Depth, Pipeline, StrategyId};
use crate::scheme::{CategoryId, LabelScheme};
use crate::Scalar;

/// One bar group entry: a category under a strategy, with the cross-model
/// mean and each model's own score.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FigureEntry<T> {
    pub category: CategoryId,
    pub strategy_id: StrategyId,
    pub mean: Option<T>,
    pub points: Vec<(String, Option<T>)>,
    pub provenance: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerCategoryFigure<T> {
    /// Increasing baseline difficulty.
    pub categories: Vec<CategoryId>,
    pub models: Vec<String>,
    pub entries: Vec<FigureEntry<T>>,
}

impl<T: Scalar> PerCategoryFigure<T> {
    pub fn entry(&self, category: &str, strategy: StrategyId) -> Option<&FigureEntry<T>> {
        self.entries
            .iter()
            .find(|e| e.category == category && e.strategy_id == strategy)
    }
}

/// Per category and strategy: the mean F1 across models plus the individual
/// model scores.
pub fn emit_per_category_figure<T: Scalar>(
    summaries: &[RunSummary<T>],
    scheme: &LabelScheme,
) -> Result<(PerCategoryFigure<T>, String), ReportError> {
    for s in summaries {
        s.check_scheme(scheme)?;
    }
    let categories = difficulty_order(summaries, scheme);
    let models = model_order(summaries);
    let mut entries = Vec::new();
    for category in &categories {
        for strategy in StrategyId::all() {
            let runs: Vec<&RunSummary<T>> = summaries
                .iter()
                .filter(|s| s.strategy_id == strategy)
                .collect();
            if runs.is_empty() {
                continue;
            }
            let points: Vec<(String, Option<T>)> = runs
                .iter()
                .map(|s| (s.model.clone(), s.f1(category.as_str())))
                .collect();
            entries.push(FigureEntry {
                category: category.clone(),
                strategy_id: strategy,
                mean: mean_defined(points.iter().map(|(_, v)| *v)),
                points,
                provenance: runs
                    .iter()
                    .map(|s| format!("{}#{}", s.provenance_ref(), category))
                    .collect(),
            });
        }
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["category".to_string(), "strategy".into(), "mean".into()];
    header.extend(models.iter().cloned());
    header.push("provenance".into());
    w.write_record(&header).expect("in-memory write");
    for e in &entries {
        let by_model: BTreeMap<&str, Option<T>> =
            e.points.iter().map(|(m, v)| (m.as_str(), *v)).collect();
        let mut rec = vec![
            e.category.to_string(),
            e.strategy_id.to_string(),
            fmt_scalar(e.mean),
        ];
        rec.extend(
            models
                .iter()
                .map(|m| fmt_scalar(by_model.get(m.as_str()).copied().flatten())),
        );
        rec.push(e.provenance.join(";"));
        w.write_record(&rec).expect("in-memory write");
    }
    let csv = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8");
    Ok((
        PerCategoryFigure {
            categories,
            models,
            entries,
        },
        csv,
    ))
}

/// A strategy on the cost/performance plane, averaged over models.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostPoint<T> {
    pub strategy_id: StrategyId,
    /// Mean per-model token total.
    pub tokens: u64,
    /// `tokens` over the reasoning-adjudicated strategy's tokens.
    pub normalized_tokens: Option<T>,
    pub avg_f1: T,
    pub dominated: bool,
    pub models: usize,
    pub provenance: Vec<String>,
}

/// Two polylines, one per pipeline, each in stage order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostCurve<T> {
    pub non_reasoning: Vec<CostPoint<T>>,
    pub reasoning: Vec<CostPoint<T>>,
}

impl<T: Scalar> CostCurve<T> {
    pub fn polyline(&self, pipeline: Pipeline) -> &[CostPoint<T>] {
        match pipeline {
            Pipeline::NonReasoning => &self.non_reasoning,
            Pipeline::Reasoning => &self.reasoning,
        }
    }

    pub fn point(&self, strategy: StrategyId) -> Option<&CostPoint<T>> {
        self.polyline(strategy.pipeline)
            .iter()
            .find(|p| p.strategy_id == strategy)
    }
}

/// Averages tokens and macro F1 over models for each strategy and flags the
/// Pareto-dominated strategies. Strategies with no defined macro F1 are left
/// out.
pub fn emit_cost_performance<T: Scalar>(
    summaries: &[RunSummary<T>],
) -> Result<(CostCurve<T>, String), ReportError> {
    let mut raw: Vec<(StrategyId, u64, T, usize, Vec<String>)> = Vec::new();
    for strategy in StrategyId::all() {
        let runs: Vec<&RunSummary<T>> = summaries
            .iter()
            .filter(|s| s.strategy_id == strategy)
            .collect();
        let Some(f1) = mean_defined(runs.iter().map(|s| s.macro_f1)) else {
            continue;
        };
        let n = runs.len() as u64;
        let sum: u64 = runs.iter().map(|s| s.total_tokens).sum();
        let tokens = (sum + n / 2) / n;
        raw.push((
            strategy,
            tokens,
            f1,
            runs.len(),
            runs.iter().map(|s| s.provenance_ref()).collect(),
        ));
    }
    let flags: BTreeMap<String, bool> = pareto_frontier(
        raw.iter()
            .map(|(s, t, f, _, _)| ParetoPoint::new(s.to_string(), *t, *f))
            .collect(),
    )
    .into_iter()
    .map(|p| (p.strategy_id, p.dominated))
    .collect();
    let reference = raw
        .iter()
        .find(|r| r.0 == StrategyId::new(Pipeline::Reasoning, Depth::Adjudicated))
        .map(|r| r.1)
        .filter(|t| *t > 0);

    let mut curve = CostCurve {
        non_reasoning: Vec::new(),
        reasoning: Vec::new(),
    };
    for (strategy_id, tokens, avg_f1, models, provenance) in raw {
        let point = CostPoint {
            strategy_id,
            tokens,
            normalized_tokens: reference.and_then(|r| Some(T::from_u64(tokens)? / T::from_u64(r)?)),
            avg_f1,
            dominated: flags[&strategy_id.to_string()],
            models,
            provenance,
        };
        match strategy_id.pipeline {
            Pipeline::NonReasoning => curve.non_reasoning.push(point),
            Pipeline::Reasoning => curve.reasoning.push(point),
        }
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "pipeline",
        "depth",
        "strategy",
        "tokens",
        "normalized_tokens",
        "avg_f1",
        "dominated",
        "models",
        "provenance",
    ])
    .expect("in-memory write");
    for p in curve.non_reasoning.iter().chain(&curve.reasoning) {
        w.write_record([
            p.strategy_id.pipeline.as_str().to_string(),
            p.strategy_id.depth.as_str().to_string(),
            p.strategy_id.to_string(),
            p.tokens.to_string(),
            fmt_scalar(p.normalized_tokens),
            fmt_scalar(Some(p.avg_f1)),
            p.dominated.to_string(),
            p.models.to_string(),
            p.provenance.join(";"),
        ])
        .expect("in-memory write");
    }
    let csv = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8");
    Ok((curve, csv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::CategoryScore;

    fn summary(model: &str, strategy: StrategyId, f1: f64, tokens: u64) -> RunSummary<f64> {
        let scheme = LabelScheme::talk_moves();
        RunSummary {
            run_id: format!("{model}/{strategy}"),
            model: model.into(),
            strategy_id: strategy,
            scores: scheme
                .category_ids()
                .map(|c| CategoryScore {
                    category: c.clone(),
                    precision: None,
                    recall: None,
                    f1: Some(f1),
                })
                .collect(),
            macro_f1: Some(f1),
            total_tokens: tokens,
            billed_tokens: tokens,
            estimated_tokens: 0,
            targets: 1,
            abstained: 0,
            provenance: format!("ledger:{model}/{strategy}"),
        }
    }

    #[test]
    fn curve_has_two_polylines_of_three() {
        let s: Vec<RunSummary<f64>> = StrategyId::all()
            .into_iter()
            .enumerate()
            .map(|(i, id)| summary("m", id, 0.4 + 0.03 * i as f64, 1000 * (i as u64 + 1)))
            .collect();
        let (curve, csv) = emit_cost_performance(&s).unwrap();
        assert_eq!(curve.non_reasoning.len(), 3);
        assert_eq!(curve.reasoning.len(), 3);
        assert_eq!(curve.reasoning[2].normalized_tokens, Some(1.0));
        assert_eq!(csv.lines().count(), 7);
        assert!(curve.non_reasoning.iter().all(|p| !p.dominated));
    }

    #[test]
    fn single_model_mean_is_its_value() {
        let scheme = LabelScheme::talk_moves();
        let s = vec![summary("m", StrategyId::all()[0], 0.25, 0)];
        let (fig, _) = emit_per_category_figure(&s, &scheme).unwrap();
        assert_eq!(fig.entries.len(), 7);
        assert!(fig.entries.iter().all(|e| e.mean == Some(0.25)));
    }

    #[test]
    fn emitters_are_deterministic() {
        let scheme = LabelScheme::talk_moves();
        let s: Vec<RunSummary<f64>> = StrategyId::all()
            .into_iter()
            .flat_map(|id| [summary("a", id, 0.5, 10), summary("b", id, 0.6, 20)])
            .collect();
        assert_eq!(
            emit_per_category_figure(&s, &scheme).unwrap().1,
            emit_per_category_figure(&s, &scheme).unwrap().1
        );
        assert_eq!(
            emit_cost_performance(&s).unwrap().1,
            emit_cost_performance(&s).unwrap().1
        );
        assert_eq!(emit_cost_performance(&s).unwrap().0.reasoning[0].tokens, 15);
    }
}
