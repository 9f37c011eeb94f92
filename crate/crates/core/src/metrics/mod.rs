//! Agreement and accuracy metrics over label maps, plus cost/accuracy
//! Pareto analysis. Everything numeric is generic over [`Scalar`].

mod pareto;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::scheme::{CategoryId, LabelScheme};
use crate::Scalar;

pub use pareto::{pareto_frontier, ParetoPoint};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("prediction for {0:?}, which has no gold label")]
    UnknownPrediction(String),
    #[error("label {label:?} for {utterance_id:?} is not in the scheme")]
    UnknownCategory { utterance_id: String, label: String },
    #[error("every per-category score is undefined")]
    AllUndefined,
    #[error("labelings cover different item sets")]
    KeyMismatch,
    #[error("no items to compare")]
    Empty,
    #[error("relative gain needs a positive baseline")]
    ZeroBaseline,
}

/// `counts[gold][pred]`, rows and columns in scheme order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub categories: Vec<CategoryId>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.categories.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy<T: Scalar>(&self) -> Option<T> {
        let n = self.total();
        (n > 0).then(|| T::from_count(self.correct()) / T::from_count(n))
    }
}

/// Tallies predictions against gold. Gold items without a prediction count as
/// abstentions and land in the scheme's none category.
pub fn confusion(
    gold: &BTreeMap<String, CategoryId>,
    pred: &BTreeMap<String, CategoryId>,
    scheme: &LabelScheme,
) -> Result<ConfusionMatrix, MetricsError> {
    if let Some(id) = pred.keys().find(|k| !gold.contains_key(*k)) {
        return Err(MetricsError::UnknownPrediction(id.clone()));
    }
    let k = scheme.categories().len();
    let lookup = |id: &str, label: &CategoryId| {
        scheme
            .position(label.as_str())
            .ok_or_else(|| MetricsError::UnknownCategory {
                utterance_id: id.to_string(),
                label: label.to_string(),
            })
    };
    let mut counts = vec![vec![0usize; k]; k];
    for (id, g) in gold {
        let row = lookup(id, g)?;
        let p = pred.get(id).unwrap_or(scheme.none_category());
        let col = lookup(id, p)?;
        counts[row][col] += 1;
    }
    Ok(ConfusionMatrix {
        categories: scheme.category_ids().cloned().collect(),
        counts,
    })
}

/// One-vs-rest precision, recall and F1. `None` marks an undefined score: a
/// category that never occurs in gold or predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore<T> {
    pub category: CategoryId,
    pub precision: Option<T>,
    pub recall: Option<T>,
    pub f1: Option<T>,
}

impl<T: Scalar> CategoryScore<T> {
    pub fn is_defined(&self) -> bool {
        self.f1.is_some()
    }
}

fn ratio_or_zero<T: Scalar>(num: usize, den: usize) -> T {
    if den == 0 {
        T::zero()
    } else {
        T::from_count(num) / T::from_count(den)
    }
}

/// Per-category scores. A zero denominator in precision or recall gives 0
/// for that quantity when the category is otherwise present.
pub fn per_category_f1<T: Scalar>(cm: &ConfusionMatrix) -> Vec<CategoryScore<T>> {
    let k = cm.categories.len();
    (0..k)
        .map(|c| {
            let tp = cm.counts[c][c];
            let fn_ = (0..k).map(|j| cm.counts[c][j]).sum::<usize>() - tp;
            let fp = (0..k).map(|i| cm.counts[i][c]).sum::<usize>() - tp;
            if tp + fp + fn_ == 0 {
                return CategoryScore {
                    category: cm.categories[c].clone(),
                    precision: None,
                    recall: None,
                    f1: None,
                };
            }
            let p: T = ratio_or_zero(tp, tp + fp);
            let r: T = ratio_or_zero(tp, tp + fn_);
            let f1 = if p + r > T::zero() {
                T::two() * p * r / (p + r)
            } else {
                T::zero()
            };
            CategoryScore {
                category: cm.categories[c].clone(),
                precision: Some(p),
                recall: Some(r),
                f1: Some(f1),
            }
        })
        .collect()
}

/// How undefined per-category scores enter an average.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndefinedPolicy {
    #[default]
    Exclude,
    ZeroFill,
}

/// Unweighted mean of the defined per-category F1 values.
pub fn macro_f1<T: Scalar>(scores: &[CategoryScore<T>]) -> Result<T, MetricsError> {
    macro_f1_with(scores, UndefinedPolicy::Exclude)
}

pub fn macro_f1_with<T: Scalar>(
    scores: &[CategoryScore<T>],
    policy: UndefinedPolicy,
) -> Result<T, MetricsError> {
    let mut sum = T::zero();
    let mut n = 0usize;
    for s in scores {
        match (s.f1, policy) {
            (Some(f), _) => {
                sum = sum + f;
                n += 1;
            }
            (None, UndefinedPolicy::ZeroFill) => n += 1,
            (None, UndefinedPolicy::Exclude) => {}
        }
    }
    if n == 0 || scores.iter().all(|s| s.f1.is_none()) {
        return Err(MetricsError::AllUndefined);
    }
    Ok(sum / T::from_count(n))
}

/// Averaging convention for a single "average F1" figure.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Macro,
    /// Pooled over all items; equals accuracy for single-label data.
    Micro,
}

pub fn average_f1<T: Scalar>(
    cm: &ConfusionMatrix,
    averaging: Averaging,
    policy: UndefinedPolicy,
) -> Result<T, MetricsError> {
    match averaging {
        Averaging::Macro => macro_f1_with(&per_category_f1::<T>(cm), policy),
        Averaging::Micro => cm.accuracy().ok_or(MetricsError::Empty),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaResult<T> {
    pub p_o: T,
    pub p_e: T,
    /// `None` when chance agreement is total but observed agreement is not.
    pub kappa: Option<T>,
}

/// Cohen's kappa between two labelings of the same items.
pub fn cohen_kappa<T: Scalar>(
    a: &BTreeMap<String, CategoryId>,
    b: &BTreeMap<String, CategoryId>,
) -> Result<KappaResult<T>, MetricsError> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(MetricsError::KeyMismatch);
    }
    if a.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = a.len();
    let mut agree = 0usize;
    let mut marg_a: BTreeMap<&CategoryId, usize> = BTreeMap::new();
    let mut marg_b: BTreeMap<&CategoryId, usize> = BTreeMap::new();
    for ((_, la), (_, lb)) in a.iter().zip(b.iter()) {
        agree += usize::from(la == lb);
        *marg_a.entry(la).or_default() += 1;
        *marg_b.entry(lb).or_default() += 1;
    }
    let labels: BTreeSet<&CategoryId> = marg_a.keys().chain(marg_b.keys()).copied().collect();
    let nn = T::from_count(n * n);
    let p_e = labels.iter().fold(T::zero(), |acc, c| {
        let ca = marg_a.get(c).copied().unwrap_or(0);
        let cb = marg_b.get(c).copied().unwrap_or(0);
        acc + T::from_count(ca * cb) / nn
    });
    let p_o = T::from_count(agree) / T::from_count(n);
    let kappa = if p_e < T::one() {
        Some((p_o - p_e) / (T::one() - p_e))
    } else if p_o == T::one() {
        Some(T::one())
    } else {
        None
    };
    Ok(KappaResult { p_o, p_e, kappa })
}

/// Percentage change of `improved` over `baseline`.
pub fn relative_gain<T: Scalar>(baseline: T, improved: T) -> Result<T, MetricsError> {
    if baseline <= T::zero() {
        return Err(MetricsError::ZeroBaseline);
    }
    let hundred = T::from_count(100);
    Ok(hundred * (improved - baseline) / baseline)
}
