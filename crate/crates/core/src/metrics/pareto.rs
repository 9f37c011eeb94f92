use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::Scalar;

/// A strategy's cost (total tokens) against its average F1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint<T> {
    pub strategy_id: String,
    pub total_tokens: u64,
    pub avg_f1: T,
    #[serde(default)]
    pub dominated: bool,
}

impl<T: Scalar> ParetoPoint<T> {
    pub fn new(strategy_id: impl Into<String>, total_tokens: u64, avg_f1: T) -> Self {
        Self {
            strategy_id: strategy_id.into(),
            total_tokens,
            avg_f1,
            dominated: false,
        }
    }

    /// At most as expensive and at least as accurate, strictly better on one.
    pub fn dominates(&self, other: &Self) -> bool {
        self.total_tokens <= other.total_tokens
            && self.avg_f1 >= other.avg_f1
            && (self.total_tokens < other.total_tokens || self.avg_f1 > other.avg_f1)
    }
}

/// Sets every point's `dominated` flag and returns the points ordered by
/// tokens ascending (ties: higher F1 first, then strategy id).
pub fn pareto_frontier<T: Scalar>(mut points: Vec<ParetoPoint<T>>) -> Vec<ParetoPoint<T>> {
    let flags: Vec<bool> = points
        .iter()
        .map(|p| points.iter().any(|q| q.dominates(p)))
        .collect();
    for (p, d) in points.iter_mut().zip(flags) {
        p.dominated = d;
    }
    points.sort_by(|a, b| {
        a.total_tokens
            .cmp(&b.total_tokens)
            .then_with(|| b.avg_f1.partial_cmp(&a.avg_f1).unwrap_or(Ordering::Equal))
            .then_with(|| a.strategy_id.cmp(&b.strategy_id))
    });
    points
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_point_is_frontier() {
        let f = pareto_frontier(vec![ParetoPoint::new("a", 10, 0.5)]);
        assert!(!f[0].dominated);
    }

    #[test]
    fn equal_cost_lower_f1_is_dominated() {
        let f = pareto_frontier(vec![
            ParetoPoint::new("a", 100, 0.5),
            ParetoPoint::new("b", 100, 0.6),
        ]);
        assert_eq!(f[0].strategy_id, "b");
        assert!(!f[0].dominated);
        assert!(f[1].dominated);
    }

    #[test]
    fn cheaper_but_worse_and_dearer_but_better_both_survive() {
        let f = pareto_frontier(vec![
            ParetoPoint::new("reasoning_adjudicated", 1000, 0.61),
            ParetoPoint::new("non_reasoning_adjudicated", 770, 0.60),
        ]);
        assert!(f.iter().all(|p| !p.dominated));
        assert_eq!(f[0].total_tokens, 770);
    }

    #[test]
    fn identical_points_do_not_dominate_each_other() {
        let f = pareto_frontier(vec![
            ParetoPoint::new("a", 5, 0.5),
            ParetoPoint::new("b", 5, 0.5),
        ]);
        assert!(f.iter().all(|p| !p.dominated));
    }

    proptest! {
        #[test]
        fn removing_dominated_points_keeps_frontier(raw in prop::collection::vec((0u64..50, 0u32..20), 1..25)) {
            let pts: Vec<ParetoPoint<f64>> = raw
                .iter()
                .enumerate()
                .map(|(i, (t, f))| ParetoPoint::new(format!("s{i}"), *t, f64::from(*f) / 20.0))
                .collect();
            let full = pareto_frontier(pts);
            let front: Vec<_> = full.iter().filter(|p| !p.dominated).cloned().collect();
            prop_assert!(!front.is_empty());
            let again = pareto_frontier(front.clone());
            prop_assert!(again.iter().all(|p| !p.dominated));
            prop_assert_eq!(again.len(), front.len());
            for p in full.iter().filter(|p| p.dominated) {
                prop_assert!(front.iter().any(|q| q.dominates(p)));
            }
        }
    }
}
