//! Filtered ranking of role and value substitutions, MRR / Hits@N reports,
//! and the distinguishability analysis between a fact and its corruptions.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::{DatasetSplits, Fact, Pair, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Model, ScoringCache, Target};

/// How candidates that tie with the true fact are counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TieMode {
    /// rank = 1 + #(strictly greater)
    #[default]
    Optimistic,
    /// rank = 1 + #(greater or equal)
    Pessimistic,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankQuery {
    pub fact: Fact,
    pub position: usize,
    pub target: Target,
}

/// For every fact in the dataset with one pair removed, the roles or values
/// that complete it again. Looking up a query's remaining pairs yields the
/// candidates to filter out.
#[derive(Clone, Debug, Default)]
pub struct FilterIndex {
    values: HashMap<(Vec<Pair>, usize), HashSet<usize>>,
    roles: HashMap<(Vec<Pair>, usize), HashSet<usize>>,
}

fn others_canonical(fact: &Fact, position: usize) -> Vec<Pair> {
    let mut rest: Vec<Pair> = fact
        .pairs()
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != position)
        .map(|(_, &p)| p)
        .collect();
    rest.sort_unstable();
    rest
}

impl FilterIndex {
    pub fn new(splits: &DatasetSplits) -> Self {
        let mut index = Self::default();
        for fact in splits.all_facts() {
            for (i, p) in fact.pairs().iter().enumerate() {
                let rest = others_canonical(fact, i);
                index.values.entry((rest.clone(), p.role)).or_default().insert(p.value);
                index.roles.entry((rest, p.value)).or_default().insert(p.role);
            }
        }
        index
    }

    /// Candidate ids at `position` that complete a known fact.
    pub fn known(&self, fact: &Fact, position: usize, target: Target) -> Option<&HashSet<usize>> {
        let rest = others_canonical(fact, position);
        let p = fact.pairs()[position];
        match target {
            Target::Value => self.values.get(&(rest, p.role)),
            Target::Role => self.roles.get(&(rest, p.value)),
        }
    }
}

/// Rank of `scores[truth]` among the candidates not in `excluded`.
pub fn rank_from_scores(scores: &[f64], truth: usize, excluded: Option<&HashSet<usize>>, tie: TieMode) -> usize {
    let s = scores[truth];
    let beats = |x: f64| match tie {
        TieMode::Optimistic => x > s,
        TieMode::Pessimistic => x >= s,
    };
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(c, &x)| c != truth && beats(x) && !excluded.is_some_and(|e| e.contains(&c)))
        .count()
}

/// Everything needed to rank queries against one model and dataset.
pub struct Ranker<'a> {
    model: &'a Model,
    cache: ScoringCache,
    filter: Option<FilterIndex>,
    tie: TieMode,
}

impl<'a> Ranker<'a> {
    /// Filtered ranker over all splits of `splits`.
    pub fn new(model: &'a Model, splits: &DatasetSplits, tie: TieMode) -> Self {
        Self {
            model,
            cache: model.scoring_cache(),
            filter: Some(FilterIndex::new(splits)),
            tie,
        }
    }

    /// Ranker that keeps every candidate.
    pub fn raw(model: &'a Model, tie: TieMode) -> Self {
        Self {
            model,
            cache: model.scoring_cache(),
            filter: None,
            tie,
        }
    }

    pub fn rank(&self, q: &RankQuery) -> Result<usize> {
        let scores = self.model.score_candidates(&self.cache, &q.fact, q.position, q.target)?;
        let p = q.fact.pairs()[q.position];
        let truth = match q.target {
            Target::Role => p.role,
            Target::Value => p.value,
        };
        let excluded = self
            .filter
            .as_ref()
            .and_then(|f| f.known(&q.fact, q.position, q.target));
        Ok(rank_from_scores(&scores, truth, excluded, self.tie))
    }
}

/// Filtered rank of one query.
pub fn rank_target(q: &RankQuery, model: &Model, splits: &DatasetSplits) -> Result<usize> {
    Ranker::new(model, splits, TieMode::Optimistic).rank(q)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    Binary,
    Nary,
    Overall,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Binary, Category::Nary, Category::Overall];

    pub fn name(self) -> &'static str {
        match self {
            Category::Binary => "binary",
            Category::Nary => "n-ary",
            Category::Overall => "overall",
        }
    }

    fn includes(self, arity: usize) -> bool {
        match self {
            Category::Binary => arity == 2,
            Category::Nary => arity > 2,
            Category::Overall => true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub count: usize,
}

impl Metrics {
    pub fn from_ranks(ranks: impl IntoIterator<Item = usize>) -> Self {
        let (mut rr, mut h1, mut h3, mut h10, mut n) = (0.0, 0usize, 0usize, 0usize, 0usize);
        for r in ranks {
            rr += 1.0 / r as f64;
            h1 += (r <= 1) as usize;
            h3 += (r <= 3) as usize;
            h10 += (r <= 10) as usize;
            n += 1;
        }
        if n == 0 {
            return Self {
                mrr: 0.0,
                hits1: 0.0,
                hits3: 0.0,
                hits10: 0.0,
                count: 0,
            };
        }
        let d = n as f64;
        Self {
            mrr: rr / d,
            hits1: h1 as f64 / d,
            hits3: h3 as f64 / d,
            hits10: h10 as f64 / d,
            count: n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankRecord {
    pub task: Target,
    pub arity: usize,
    pub rank: usize,
}

/// Ranks of every evaluated query, in query order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub records: Vec<RankRecord>,
}

impl MetricsReport {
    pub fn metrics(&self, task: Target, category: Category) -> Metrics {
        Metrics::from_ranks(
            self.records
                .iter()
                .filter(|r| r.task == task && category.includes(r.arity))
                .map(|r| r.rank),
        )
    }

    pub fn by_arity(&self, task: Target) -> BTreeMap<usize, Metrics> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.task == task) {
            groups.entry(r.arity).or_default().push(r.rank);
        }
        groups.into_iter().map(|(a, ranks)| (a, Metrics::from_ranks(ranks))).collect()
    }

    fn tasks(&self) -> Vec<Target> {
        [Target::Role, Target::Value]
            .into_iter()
            .filter(|t| self.records.iter().any(|r| r.task == *t))
            .collect()
    }

    /// `task  category  metric  value  count`, one metric per line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("task\tcategory\tmetric\tvalue\tcount\n");
        for task in self.tasks() {
            for cat in Category::ALL {
                let m = self.metrics(task, cat);
                for (name, v) in [
                    ("mrr", m.mrr),
                    ("hits@1", m.hits1),
                    ("hits@3", m.hits3),
                    ("hits@10", m.hits10),
                ] {
                    let _ = writeln!(out, "{}\t{}\t{}\t{:.6}\t{}", task.name(), cat.name(), name, v, m.count);
                }
            }
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<6} {:<8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "task", "category", "MRR", "Hits@1", "Hits@3", "Hits@10", "count"
        );
        for task in self.tasks() {
            for cat in Category::ALL {
                let m = self.metrics(task, cat);
                let _ = writeln!(
                    out,
                    "{:<6} {:<8} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8}",
                    task.name(),
                    cat.name(),
                    m.mrr,
                    m.hits1,
                    m.hits3,
                    m.hits10,
                    m.count
                );
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub filtered: bool,
    pub tie: TieMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            filtered: true,
            tie: TieMode::Optimistic,
        }
    }
}

/// Ranks every position of every fact for each task.
pub fn evaluate(
    facts: &[Fact],
    model: &Model,
    splits: &DatasetSplits,
    tasks: &[Target],
    opts: EvalOptions,
) -> Result<MetricsReport> {
    if facts.is_empty() {
        return Err(Error::InvalidInput("no facts to evaluate".into()));
    }
    if tasks.is_empty() {
        return Err(Error::InvalidInput("no evaluation task selected".into()));
    }
    let ranker = if opts.filtered {
        Ranker::new(model, splits, opts.tie)
    } else {
        Ranker::raw(model, opts.tie)
    };
    let per_fact: Vec<Vec<RankRecord>> = facts
        .par_iter()
        .map(|fact| {
            let mut out = Vec::with_capacity(fact.arity() * tasks.len());
            for &task in tasks {
                for position in 0..fact.arity() {
                    let rank = ranker.rank(&RankQuery {
                        fact: fact.clone(),
                        position,
                        target: task,
                    })?;
                    out.push(RankRecord {
                        task,
                        arity: fact.arity(),
                        rank,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(MetricsReport {
        records: per_fact.into_iter().flatten().collect(),
    })
}

/// `#{t : a_t > b_t} − #{t : b_t > a_t}`.
pub fn distinguishability_vectors(positive: &[f64], negative: &[f64]) -> i64 {
    let up = positive.iter().zip(negative).filter(|(a, b)| a > b).count() as i64;
    let down = positive.iter().zip(negative).filter(|(a, b)| b > a).count() as i64;
    up - down
}

/// How many relatedness features separate `positive` from `negative`, net.
pub fn distinguishability(positive: &Fact, negative: &Fact, model: &Model) -> Result<i64> {
    Ok(distinguishability_vectors(
        &model.relatedness_vector(positive)?,
        &model.relatedness_vector(negative)?,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseEntry {
    pub value: usize,
    pub token: String,
    pub distinguishability: i64,
    pub score: f64,
}

/// Replaces the value at `position` by every other value and returns the
/// `top_n` corruptions that are hardest to tell apart from the fact
/// (ascending distinguishability, ties in token order).
pub fn analyze_case(
    fact: &Fact,
    position: usize,
    model: &Model,
    vocab: &Vocabulary,
    top_n: usize,
) -> Result<Vec<CaseEntry>> {
    if position >= fact.arity() {
        return Err(Error::InvalidInput(format!(
            "position {position} out of range for arity {}",
            fact.arity()
        )));
    }
    let truth = fact.pairs()[position].value;
    let reference = model.relatedness_vector(fact)?;
    let mut entries = (0..model.dims.n_values)
        .into_par_iter()
        .filter(|&v| v != truth)
        .map(|v| {
            let neg = fact.with_value(position, v);
            let parts = model.score_parts(&neg)?;
            Ok(CaseEntry {
                value: v,
                token: vocab.value_name(v).to_string(),
                distinguishability: distinguishability_vectors(&reference, &parts.relatedness),
                score: parts.score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| {
        a.distinguishability
            .cmp(&b.distinguishability)
            .then_with(|| a.token.cmp(&b.token))
    });
    entries.truncate(top_n);
    Ok(entries)
}
