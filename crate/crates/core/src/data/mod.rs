//! Facts, vocabularies, dataset splits and the on-disk dataset formats.
//!
//! A fact is a multiset of `role:value` pairs. Pairs keep their file order for
//! reproducible batching, but equality, hashing and membership all go through
//! the canonical (sorted) form.

mod io;
mod subset;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::hash::{Hash, Hasher};

use indexmap::IndexSet;

use crate::error::{Error, Result};

pub use io::{load_dataset, read_split, write_dataset, write_split, DatasetFormat, RawFact};
pub use subset::{binary_pct_for_ratio, derive_binary_subset, ArityCounts};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pair {
    pub role: usize,
    pub value: usize,
}

impl Pair {
    pub fn new(role: usize, value: usize) -> Self {
        Self { role, value }
    }
}

#[derive(Clone, Debug)]
pub struct Fact {
    pairs: Vec<Pair>,
}

impl Fact {
    /// A fact of arity two or more.
    pub fn new(pairs: Vec<Pair>) -> Result<Self> {
        if pairs.len() < 2 {
            return Err(Error::Data(format!(
                "a fact needs at least 2 role:value pairs, got {}",
                pairs.len()
            )));
        }
        Ok(Self { pairs })
    }

    /// A non-empty set of pairs that need not be a complete fact; the scoring
    /// functions accept any arity ≥ 1.
    pub fn partial(pairs: Vec<Pair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Data("a fact needs at least one pair".into()));
        }
        Ok(Self { pairs })
    }

    pub fn from_ids(ids: &[(usize, usize)]) -> Result<Self> {
        Self::new(ids.iter().map(|&(r, v)| Pair::new(r, v)).collect())
    }

    #[inline]
    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    #[inline]
    pub fn arity(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_binary(&self) -> bool {
        self.pairs.len() == 2
    }

    pub fn canonical(&self) -> Vec<Pair> {
        let mut c = self.pairs.clone();
        c.sort_unstable();
        c
    }

    /// Copy of this fact with the pair at `position` replaced.
    pub fn with_pair(&self, position: usize, pair: Pair) -> Fact {
        let mut pairs = self.pairs.clone();
        pairs[position] = pair;
        Fact { pairs }
    }

    pub fn with_value(&self, position: usize, value: usize) -> Fact {
        let role = self.pairs[position].role;
        self.with_pair(position, Pair::new(role, value))
    }

    pub fn with_role(&self, position: usize, role: usize) -> Fact {
        let value = self.pairs[position].value;
        self.with_pair(position, Pair::new(role, value))
    }

    /// Pairs reordered so that output position `i` holds input pair `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Fact {
        assert_eq!(perm.len(), self.pairs.len());
        Fact {
            pairs: perm.iter().map(|&i| self.pairs[i]).collect(),
        }
    }
}

impl PartialEq for Fact {
    fn eq(&self, other: &Self) -> bool {
        self.pairs.len() == other.pairs.len() && self.canonical() == other.canonical()
    }
}

impl Eq for Fact {}

impl Hash for Fact {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.canonical().hash(state);
    }
}

/// Bidirectional role and value indices plus the per-role value domains
/// observed in training data.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocabulary {
    roles: IndexSet<String>,
    values: IndexSet<String>,
    role_domains: Vec<Vec<usize>>,
}

impl Vocabulary {
    /// Builds a vocabulary from explicit token lists; domains start empty.
    pub fn from_tokens<S: Into<String>>(
        roles: impl IntoIterator<Item = S>,
        values: impl IntoIterator<Item = S>,
    ) -> Result<Self> {
        let mut vocab = Vocabulary::default();
        for r in roles {
            let r = r.into();
            if !vocab.roles.insert(r.clone()) {
                return Err(Error::Data(format!("duplicate role token {r:?}")));
            }
        }
        for v in values {
            let v = v.into();
            if !vocab.values.insert(v.clone()) {
                return Err(Error::Data(format!("duplicate value token {v:?}")));
            }
        }
        vocab.role_domains = vec![Vec::new(); vocab.roles.len()];
        Ok(vocab)
    }

    /// Synthetic vocabulary with tokens `r0..`, `v0..`.
    pub fn synthetic(n_roles: usize, n_values: usize) -> Self {
        Self::from_tokens(
            (0..n_roles).map(|i| format!("r{i}")),
            (0..n_values).map(|i| format!("v{i}")),
        )
        .expect("distinct tokens")
    }

    fn intern(&mut self, role: &str, value: &str) -> Pair {
        let (r, _) = self.roles.insert_full(role.to_string());
        let (v, _) = self.values.insert_full(value.to_string());
        Pair::new(r, v)
    }

    pub fn n_roles(&self) -> usize {
        self.roles.len()
    }

    pub fn n_values(&self) -> usize {
        self.values.len()
    }

    pub fn role_id(&self, role: &str) -> Option<usize> {
        self.roles.get_index_of(role)
    }

    pub fn value_id(&self, value: &str) -> Option<usize> {
        self.values.get_index_of(value)
    }

    pub fn role_name(&self, id: usize) -> &str {
        &self.roles[id]
    }

    pub fn value_name(&self, id: usize) -> &str {
        &self.values[id]
    }

    pub fn roles(&self) -> impl Iterator<Item = &str> {
        self.roles.iter().map(String::as_str)
    }

    pub fn values(&self) -> impl Iterator<Item = &str> {
        self.values.iter().map(String::as_str)
    }

    /// Values observed with `role` in the training split, ascending.
    pub fn role_domain(&self, role: usize) -> &[usize] {
        self.role_domains.get(role).map_or(&[], Vec::as_slice)
    }

    /// Recomputes the per-role domains from `train`.
    pub fn rebuild_domains(&mut self, train: &[Fact]) {
        let mut domains = vec![BTreeSet::new(); self.roles.len()];
        for fact in train {
            for p in fact.pairs() {
                domains[p.role].insert(p.value);
            }
        }
        self.role_domains = domains.into_iter().map(|d| d.into_iter().collect()).collect();
    }

    pub fn encode(&self, raw: &[(String, String)]) -> Result<Fact> {
        let pairs = raw
            .iter()
            .map(|(r, v)| {
                let role = self
                    .role_id(r)
                    .ok_or_else(|| Error::Data(format!("unknown role {r:?}")))?;
                let value = self
                    .value_id(v)
                    .ok_or_else(|| Error::Data(format!("unknown value {v:?}")))?;
                Ok(Pair::new(role, value))
            })
            .collect::<Result<Vec<_>>>()?;
        Fact::new(pairs)
    }

    pub fn decode(&self, fact: &Fact) -> RawFact {
        fact.pairs()
            .iter()
            .map(|p| (self.role_name(p.role).to_string(), self.value_name(p.value).to_string()))
            .collect()
    }

    /// Checks that every index in `fact` is in range.
    pub fn check_fact(&self, fact: &Fact) -> Result<()> {
        for p in fact.pairs() {
            if p.role >= self.n_roles() || p.value >= self.n_values() {
                return Err(Error::Data(format!(
                    "pair ({}, {}) out of range for {} roles / {} values",
                    p.role,
                    p.value,
                    self.n_roles(),
                    self.n_values()
                )));
            }
        }
        Ok(())
    }
}

/// Train/valid/test facts plus a membership index over their union.
#[derive(Clone, Debug, Default)]
pub struct DatasetSplits {
    pub train: Vec<Fact>,
    pub valid: Vec<Fact>,
    pub test: Vec<Fact>,
    membership: HashSet<Vec<Pair>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl DatasetSplits {
    pub fn new(train: Vec<Fact>, valid: Vec<Fact>, test: Vec<Fact>) -> Self {
        let membership = train
            .iter()
            .chain(&valid)
            .chain(&test)
            .map(Fact::canonical)
            .collect();
        Self {
            train,
            valid,
            test,
            membership,
        }
    }

    pub fn split(&self, which: Split) -> &[Fact] {
        match which {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Whether the canonical form of `fact` occurs in any split.
    pub fn contains(&self, fact: &Fact) -> bool {
        self.membership.contains(&fact.canonical())
    }

    pub fn contains_canonical(&self, canonical: &[Pair]) -> bool {
        self.membership.contains(canonical)
    }

    pub fn membership_len(&self) -> usize {
        self.membership.len()
    }

    pub fn all_facts(&self) -> impl Iterator<Item = &Fact> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }
}

/// Training facts grouped by arity, groups in ascending arity order.
pub fn group_by_arity(facts: &[Fact]) -> Vec<(usize, Vec<Fact>)> {
    let mut groups: BTreeMap<usize, Vec<Fact>> = BTreeMap::new();
    for f in facts {
        groups.entry(f.arity()).or_default().push(f.clone());
    }
    groups.into_iter().collect()
}
