//! Negative examples by corrupting training facts.
//!
//! The conventional mechanism swaps one role or one value. The mixed
//! mechanism additionally replaces several whole `role:value` pairs with
//! pairs taken from other training facts, which yields negatives whose roles
//! and values are individually plausible but do not belong together.
//! Every emitted negative is absent from all splits.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;

use crate::data::{DatasetSplits, Fact, Pair, Vocabulary};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mechanism {
    Conventional,
    Mixed,
}

/// Where replacement values come from in the conventional mechanism.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ValueDomain {
    /// Values seen with the same role in training, or all values when the
    /// role has fewer than two.
    RoleSpecific,
    Global,
}

impl Mechanism {
    pub fn token(self) -> &'static str {
        match self {
            Mechanism::Conventional => "conventional",
            Mechanism::Mixed => "mixed",
        }
    }
}

impl ValueDomain {
    pub fn token(self) -> &'static str {
        match self {
            ValueDomain::RoleSpecific => "role-specific",
            ValueDomain::Global => "global",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl fmt::Display for ValueDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conventional" => Ok(Mechanism::Conventional),
            "mixed" => Ok(Mechanism::Mixed),
            other => Err(Error::Config(format!("unknown sampling mechanism {other:?}"))),
        }
    }
}

impl FromStr for ValueDomain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "role-specific" => Ok(ValueDomain::RoleSpecific),
            "global" => Ok(ValueDomain::Global),
            other => Err(Error::Config(format!("unknown value domain {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NegSamplerConfig {
    pub mechanism: Mechanism,
    /// Probability that the mixed mechanism falls back to a single-element
    /// corruption.
    pub branch_prob: f64,
    pub value_domain: ValueDomain,
    pub max_retries: usize,
}

impl Default for NegSamplerConfig {
    fn default() -> Self {
        Self {
            mechanism: Mechanism::Conventional,
            branch_prob: 0.5,
            value_domain: ValueDomain::RoleSpecific,
            max_retries: 100,
        }
    }
}

impl NegSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.branch_prob) {
            return Err(Error::Config(format!(
                "branch probability must lie in [0, 1], got {}",
                self.branch_prob
            )));
        }
        if self.max_retries == 0 {
            return Err(Error::Config("max_retries must be at least 1".into()));
        }
        Ok(())
    }
}

/// What was changed to produce a negative.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Corruption {
    Role { position: usize },
    Value { position: usize },
    /// Whole pairs replaced at these (distinct, ascending) positions.
    Pairs { positions: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Negative {
    pub fact: Fact,
    pub corruption: Corruption,
}

pub struct NegativeSampler<'a> {
    config: NegSamplerConfig,
    vocab: &'a Vocabulary,
    splits: &'a DatasetSplits,
    train_pairs: Vec<Pair>,
}

#[derive(Clone, Copy)]
enum Branch {
    Role,
    Value,
}

impl<'a> NegativeSampler<'a> {
    pub fn new(config: NegSamplerConfig, vocab: &'a Vocabulary, splits: &'a DatasetSplits) -> Result<Self> {
        config.validate()?;
        let train_pairs: Vec<Pair> = splits
            .train
            .iter()
            .flat_map(|f| f.pairs().iter().copied())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Ok(Self {
            config,
            vocab,
            splits,
            train_pairs,
        })
    }

    pub fn config(&self) -> &NegSamplerConfig {
        &self.config
    }

    /// Distinct `role:value` pairs of the training split, ascending.
    pub fn train_pairs(&self) -> &[Pair] {
        &self.train_pairs
    }

    /// Probability of corrupting a value rather than a role.
    pub fn value_branch_probability(&self) -> f64 {
        let (nr, nv) = (self.vocab.n_roles() as f64, self.vocab.n_values() as f64);
        nv / (nv + nr)
    }

    pub fn sample(&self, fact: &Fact, rng: &mut impl Rng) -> Result<Negative> {
        match self.config.mechanism {
            Mechanism::Conventional => self.corrupt_conventional(fact, rng),
            Mechanism::Mixed => self.corrupt_mixed(fact, rng),
        }
    }

    fn value_pool(&self, role: usize) -> Option<&[usize]> {
        match self.config.value_domain {
            ValueDomain::RoleSpecific => {
                let d = self.vocab.role_domain(role);
                (d.len() >= 2).then_some(d)
            }
            ValueDomain::Global => None,
        }
    }

    /// Replaces one role, or (with probability `|V|/(|V|+|R|)`) one value.
    /// The branch is drawn once; rejected draws retry within it.
    pub fn corrupt_conventional(&self, fact: &Fact, rng: &mut impl Rng) -> Result<Negative> {
        let (nr, nv) = (self.vocab.n_roles(), self.vocab.n_values());
        let mut branch = if rng.random::<f64>() < self.value_branch_probability() {
            Branch::Value
        } else {
            Branch::Role
        };
        // a branch with a single token cannot change anything
        match branch {
            Branch::Role if nr < 2 => branch = Branch::Value,
            Branch::Value if nv < 2 => branch = Branch::Role,
            _ => {}
        }
        if nr < 2 && nv < 2 {
            return Err(Error::SamplingExhausted { retries: 0 });
        }
        let m = fact.arity();
        for _ in 0..self.config.max_retries {
            let position = rng.random_range(0..m);
            let pair = fact.pairs()[position];
            let (candidate, corruption) = match branch {
                Branch::Role => {
                    let mut r = rng.random_range(0..nr - 1);
                    if r >= pair.role {
                        r += 1;
                    }
                    (fact.with_role(position, r), Corruption::Role { position })
                }
                Branch::Value => {
                    let v = match self.value_pool(pair.role) {
                        Some(pool) => loop {
                            let v = pool[rng.random_range(0..pool.len())];
                            if v != pair.value {
                                break v;
                            }
                        },
                        None => {
                            let mut v = rng.random_range(0..nv - 1);
                            if v >= pair.value {
                                v += 1;
                            }
                            v
                        }
                    };
                    (fact.with_value(position, v), Corruption::Value { position })
                }
            };
            if !self.splits.contains(&candidate) {
                return Ok(Negative {
                    fact: candidate,
                    corruption,
                });
            }
        }
        Err(Error::SamplingExhausted {
            retries: self.config.max_retries,
        })
    }

    /// With probability `branch_prob` a conventional corruption; otherwise
    /// replaces `n ∈ {1, …, m−1}` distinct positions with training pairs.
    pub fn corrupt_mixed(&self, fact: &Fact, rng: &mut impl Rng) -> Result<Negative> {
        if rng.random::<f64>() < self.config.branch_prob {
            return self.corrupt_conventional(fact, rng);
        }
        let m = fact.arity();
        if m < 2 || self.train_pairs.is_empty() {
            return Err(Error::InvalidInput(
                "pair replacement needs arity >= 2 and a non-empty training set".into(),
            ));
        }
        for _ in 0..self.config.max_retries {
            let n_neg = rng.random_range(1..m);
            let mut positions = sample(rng, m, n_neg).into_vec();
            positions.sort_unstable();
            let mut pairs = fact.pairs().to_vec();
            for &p in &positions {
                pairs[p] = self.train_pairs[rng.random_range(0..self.train_pairs.len())];
            }
            let candidate = Fact::new(pairs)?;
            if !self.splits.contains(&candidate) {
                return Ok(Negative {
                    fact: candidate,
                    corruption: Corruption::Pairs { positions },
                });
            }
        }
        Err(Error::SamplingExhausted {
            retries: self.config.max_retries,
        })
    }
}
