//! Capped stratified sampling: allocate a fixed budget across datasets
//! proportionally to their sizes after clamping each size to a cap, then
//! draw that many indices per dataset uniformly without replacement.
//!
//! Generator: ChaCha8, keyed from the u64 seed via `SeedableRng::
//! seed_from_u64` (rand_chacha 0.3). A single stream is consumed over
//! the datasets in manifest order, so output is a pure function of
//! (specs order, cap, budget, seed).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

/// Default per-dataset size cap.
pub const DEFAULT_CAP: usize = 10_000;
/// Default total sample budget.
pub const DEFAULT_BUDGET: usize = 4_703;
/// Default seed.
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SamplingError {
    #[error("duplicate-dataset: {0}")]
    DuplicateDataset(String),
    #[error("no-datasets")]
    Empty,
    #[error("zero-size-dataset: {0}")]
    ZeroSize(String),
    #[error("zero-cap")]
    ZeroCap,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub size: usize,
}

/// Per-dataset allocation: the count and the selected indices, sorted
/// ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratumSample {
    pub count: usize,
    pub indices: Vec<usize>,
}

/// count_i = ⌊budget · min(size_i, cap) / Σ_j min(size_j, cap)⌋, clamped
/// to min(size_i, cap) so an oversubscribed budget can never push a
/// dataset past its cap; indices drawn uniformly without replacement.
pub fn capped_stratified_sample(
    specs: &[DatasetSpec],
    cap: usize,
    budget: usize,
    seed: u64,
) -> Result<Vec<(String, StratumSample)>, SamplingError> {
    if specs.is_empty() {
        return Err(SamplingError::Empty);
    }
    if cap == 0 {
        return Err(SamplingError::ZeroCap);
    }
    let mut names = BTreeSet::new();
    for spec in specs {
        if spec.size == 0 {
            return Err(SamplingError::ZeroSize(spec.name.clone()));
        }
        if !names.insert(spec.name.as_str()) {
            return Err(SamplingError::DuplicateDataset(spec.name.clone()));
        }
    }

    let effective: Vec<u128> = specs.iter().map(|s| s.size.min(cap) as u128).collect();
    let total: u128 = effective.iter().sum();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(specs.len());
    for (spec, eff) in specs.iter().zip(&effective) {
        let count = ((budget as u128 * eff) / total) as usize;
        let count = count.min(*eff as usize);
        let mut indices = rand::seq::index::sample(&mut rng, spec.size, count).into_vec();
        indices.sort_unstable();
        out.push((spec.name.clone(), StratumSample { count, indices }));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs(sizes: &[(&str, usize)]) -> Vec<DatasetSpec> {
        sizes
            .iter()
            .map(|(name, size)| DatasetSpec {
                name: name.to_string(),
                size: *size,
            })
            .collect()
    }

    #[test]
    fn worked_example() {
        let result =
            capped_stratified_sample(&specs(&[("A", 15000), ("B", 3000), ("C", 2000)]), 10000, 100, 42)
                .unwrap();
        let counts: Vec<usize> = result.iter().map(|(_, s)| s.count).collect();
        assert_eq!(counts, vec![66, 20, 13]);
    }

    #[test]
    fn single_dataset_takes_full_budget_clamped() {
        let result = capped_stratified_sample(&specs(&[("only", 50)]), 10000, 100, 42).unwrap();
        assert_eq!(result[0].1.count, 50);
        let result = capped_stratified_sample(&specs(&[("only", 500)]), 10000, 100, 42).unwrap();
        assert_eq!(result[0].1.count, 100);
    }

    #[test]
    fn identity_partition() {
        let s = specs(&[("a", 10), ("b", 20), ("c", 30)]);
        let result = capped_stratified_sample(&s, 10000, 60, 42).unwrap();
        for (spec, (_, stratum)) in s.iter().zip(&result) {
            assert_eq!(stratum.count, spec.size);
            assert_eq!(stratum.indices, (0..spec.size).collect::<Vec<_>>());
        }
    }

    #[test]
    fn determinism_and_seed_independence_of_counts() {
        let s = specs(&[("a", 100), ("b", 200)]);
        let r1 = capped_stratified_sample(&s, 50, 30, 42).unwrap();
        let r2 = capped_stratified_sample(&s, 50, 30, 42).unwrap();
        assert_eq!(r1, r2);
        let r3 = capped_stratified_sample(&s, 50, 30, 7).unwrap();
        for ((_, a), (_, b)) in r1.iter().zip(&r3) {
            assert_eq!(a.count, b.count);
        }
    }

    #[test]
    fn cap_invariance() {
        let base = capped_stratified_sample(&specs(&[("a", 10000), ("b", 500)]), 10000, 100, 42)
            .unwrap();
        let inflated =
            capped_stratified_sample(&specs(&[("a", 999999), ("b", 500)]), 10000, 100, 42).unwrap();
        for ((_, a), (_, b)) in base.iter().zip(&inflated) {
            assert_eq!(a.count, b.count);
        }
    }

    #[test]
    fn index_validity() {
        let result = capped_stratified_sample(&specs(&[("a", 17), ("b", 9)]), 10, 12, 42).unwrap();
        for (_, stratum) in &result {
            let unique: BTreeSet<_> = stratum.indices.iter().collect();
            assert_eq!(unique.len(), stratum.indices.len());
            assert!(stratum.indices.iter().all(|&i| i < 17));
        }
    }

    #[test]
    fn errors() {
        assert_eq!(
            capped_stratified_sample(&[], 10, 10, 42),
            Err(SamplingError::Empty)
        );
        assert_eq!(
            capped_stratified_sample(&specs(&[("a", 5), ("a", 5)]), 10, 10, 42),
            Err(SamplingError::DuplicateDataset("a".into()))
        );
        assert_eq!(
            capped_stratified_sample(&specs(&[("a", 0)]), 10, 10, 42),
            Err(SamplingError::ZeroSize("a".into()))
        );
    }
}
