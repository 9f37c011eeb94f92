use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;

use super::{category_distribution, CorpusError, GoldLabel, LabelDistribution};
use crate::scheme::CategoryId;

/// Largest-remainder (Hamilton) apportionment of `n` seats over `dist`.
///
/// Each category first gets `floor(n * count / total)`. Leftover seats go to
/// the largest fractional remainders, ties broken by larger category count and
/// then by category id. Remainders are compared as exact integers.
pub fn apportion(dist: &LabelDistribution, n: usize) -> BTreeMap<CategoryId, usize> {
    let mut quotas = BTreeMap::new();
    if dist.total == 0 {
        return quotas;
    }
    let total = dist.total as u128;
    let mut ranked = Vec::with_capacity(dist.counts.len());
    let mut assigned = 0usize;
    for (cat, &count) in &dist.counts {
        let scaled = n as u128 * count as u128;
        let floor = (scaled / total) as usize;
        assigned += floor;
        quotas.insert(cat.clone(), floor);
        ranked.push((scaled % total, count, cat));
    }
    ranked.sort_by(|a, b| match b.0.cmp(&a.0) {
        Ordering::Equal => b.1.cmp(&a.1).then_with(|| a.2.cmp(b.2)),
        other => other,
    });
    for (_, _, cat) in ranked.into_iter().take(n.saturating_sub(assigned)) {
        *quotas.get_mut(cat).expect("category present") += 1;
    }
    quotas
}

/// Proportional stratified sample of `n` utterance ids.
///
/// Per-category quotas come from [`apportion`]; members are then drawn
/// uniformly without replacement from each category with an RNG stream keyed
/// by `(seed, category)`, so changing the seed changes membership but never
/// the per-category counts.
pub fn stratified_sample(
    labels: &[GoldLabel],
    n: usize,
    seed: u64,
) -> Result<BTreeSet<String>, CorpusError> {
    if n > labels.len() {
        return Err(CorpusError::SampleTooLarge {
            requested: n,
            available: labels.len(),
        });
    }
    let dist = category_distribution(labels);
    let quotas = apportion(&dist, n);

    let mut members: BTreeMap<&CategoryId, Vec<&str>> = BTreeMap::new();
    for label in labels {
        members
            .entry(&label.category)
            .or_default()
            .push(&label.utterance_id);
    }

    let mut picked = BTreeSet::new();
    for (cat, mut ids) in members {
        ids.sort_unstable();
        let quota = quotas.get(cat).copied().unwrap_or(0);
        let mut rng = crate::seed::stream(seed, &["stratified_sample", cat.as_str()]);
        picked.extend(ids.choose_multiple(&mut rng, quota).map(|s| s.to_string()));
    }
    Ok(picked)
}
