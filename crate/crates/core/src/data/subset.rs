//! Derived datasets with a reduced share of binary facts.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetSplits, Fact, Split};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ArityCounts {
    pub binary: usize,
    pub nary: usize,
}

impl ArityCounts {
    pub fn of(facts: &[Fact]) -> Self {
        let binary = facts.iter().filter(|f| f.is_binary()).count();
        Self {
            binary,
            nary: facts.len() - binary,
        }
    }
}

/// Keeps every n-ary fact and a uniformly random `keep_pct` percent of the
/// binary facts of each split. Retained facts keep their relative order.
pub fn derive_binary_subset(splits: &DatasetSplits, keep_pct: f64, seed: u64) -> Result<DatasetSplits> {
    if !(0.0..=100.0).contains(&keep_pct) {
        return Err(Error::Config(format!(
            "keep percentage must lie in [0, 100], got {keep_pct}"
        )));
    }
    let mut out: Vec<Vec<Fact>> = Vec::with_capacity(3);
    for (stream, split) in Split::ALL.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream as u64);
        let facts = splits.split(split);
        let binary_idx: Vec<usize> = (0..facts.len()).filter(|&i| facts[i].is_binary()).collect();
        let keep = ((binary_idx.len() as f64) * keep_pct / 100.0).round() as usize;
        let mut kept = vec![false; facts.len()];
        for j in sample(&mut rng, binary_idx.len(), keep.min(binary_idx.len())) {
            kept[binary_idx[j]] = true;
        }
        out.push(
            facts
                .iter()
                .enumerate()
                .filter(|(i, f)| !f.is_binary() || kept[*i])
                .map(|(_, f)| f.clone())
                .collect(),
        );
    }
    let test = out.pop().unwrap_or_default();
    let valid = out.pop().unwrap_or_default();
    let train = out.pop().unwrap_or_default();
    Ok(DatasetSplits::new(train, valid, test))
}

/// Percentage of binary facts to keep so that `counts` ends up with the
/// binary:n-ary ratio `target_binary : target_nary`, capped at 100.
pub fn binary_pct_for_ratio(counts: ArityCounts, target_binary: usize, target_nary: usize) -> f64 {
    if counts.binary == 0 || target_nary == 0 {
        return 100.0;
    }
    let wanted = counts.nary as f64 * target_binary as f64 / target_nary as f64;
    (100.0 * wanted / counts.binary as f64).min(100.0)
}
