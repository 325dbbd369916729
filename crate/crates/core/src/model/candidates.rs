//! Scoring every substitution at one position of a fact.
//!
//! Replacing the role or value at position `p` changes only row `p` of the
//! pair-embedding matrix (batch norm is per row in eval mode), so the rows
//! and pairwise terms of the other `m − 1` pairs are computed once per query
//! and each candidate only adds its own `2m − 1` pair terms. The per-role and
//! per-value halves of the pair features are cached once per model.

use super::{combine_scores, pair_preact, Model};
use crate::data::{Fact, Pair};
use crate::error::{Error, Result};
use crate::math::{relu_scalar, vec_mat, Aggregator, Matrix};

/// Which element of the pair at the query position is replaced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Target {
    Role,
    Value,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::Role => "role",
            Target::Value => "value",
        }
    }
}

/// Per-token projections reused by every query against one model.
#[derive(Clone, Debug)]
pub struct ScoringCache {
    role_parts: Matrix,
    value_parts: Matrix,
    role_type_parts: Option<Matrix>,
    value_type_parts: Option<Matrix>,
}

struct Fold {
    agg: Aggregator,
    acc: Vec<f64>,
}

impl Fold {
    fn new(agg: Aggregator, d: usize) -> Self {
        let init = match agg {
            Aggregator::Min => f64::INFINITY,
            Aggregator::Max => f64::NEG_INFINITY,
            Aggregator::Mean => 0.0,
        };
        Self {
            agg,
            acc: vec![init; d],
        }
    }

    #[inline]
    fn push(&mut self, first: &[f64], second: &[f64], bias: &[f64]) {
        for t in 0..self.acc.len() {
            let x = relu_scalar(pair_preact(first[t], second[t], bias[t]));
            let cur = &mut self.acc[t];
            match self.agg {
                Aggregator::Min => {
                    if x < *cur {
                        *cur = x
                    }
                }
                Aggregator::Max => {
                    if x > *cur {
                        *cur = x
                    }
                }
                Aggregator::Mean => *cur += x,
            }
        }
    }

    fn finish(mut self, n_pairs: usize) -> Vec<f64> {
        if self.agg == Aggregator::Mean {
            let n = n_pairs as f64;
            self.acc.iter_mut().for_each(|v| *v /= n);
        }
        self.acc
    }
}

fn stack(rows: impl Iterator<Item = Vec<f64>>, cols: usize) -> Matrix {
    let data: Vec<f64> = rows.flatten().collect();
    let n = data.len() / cols.max(1);
    Matrix::new(n, cols, data).expect("uniform rows")
}

impl Model {
    pub fn scoring_cache(&self) -> ScoringCache {
        let nf = self.dims.n_filters;
        let role_parts = stack((0..self.dims.n_roles).map(|r| self.role_part(r)), nf);
        let value_parts = stack((0..self.dims.n_values).map(|v| self.value_part(v)), nf);
        let (role_type_parts, value_type_parts) = match &self.types {
            None => (None, None),
            Some(t) => {
                let kt = self.dims.k_type;
                let nt = self.dims.n_tfcn;
                let w = &t.t_weight.value;
                (
                    Some(stack(
                        (0..self.dims.n_roles).map(|r| vec_mat(t.role_type.value.row(r), w, 0)),
                        nt,
                    )),
                    Some(stack(
                        (0..self.dims.n_values).map(|v| vec_mat(t.value_type.value.row(v), w, kt)),
                        nt,
                    )),
                )
            }
        };
        ScoringCache {
            role_parts,
            value_parts,
            role_type_parts,
            value_type_parts,
        }
    }

    /// Eval-mode scores of the fact with the `target` at `position` replaced
    /// by every role (or value) id in turn; entry `c` is candidate id `c`.
    pub fn score_candidates(
        &self,
        cache: &ScoringCache,
        fact: &Fact,
        position: usize,
        target: Target,
    ) -> Result<Vec<f64>> {
        self.check_fact(fact)?;
        let m = fact.arity();
        if position >= m {
            return Err(Error::InvalidInput(format!(
                "position {position} out of range for arity {m}"
            )));
        }
        let pairs = fact.pairs();
        let bias = self.nalp.g_bias.value.data();
        let ng = self.dims.n_gfcn;
        let agg = self.config.aggregator;

        let halves: Vec<Option<(Vec<f64>, Vec<f64>)>> = pairs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                (i != position).then(|| {
                    let z = self.combine_parts(cache.role_parts.row(p.role), cache.value_parts.row(p.value));
                    self.g_halves(&self.hidden_eval(&z))
                })
            })
            .collect();
        let mut fixed = Fold::new(agg, ng);
        for hi in halves.iter().flatten() {
            for hj in halves.iter().flatten() {
                fixed.push(&hi.0, &hj.1, bias);
            }
        }

        let type_fixed = self.types.as_ref().map(|t| {
            let tbias = t.t_bias.value.data();
            let ta = cache.role_type_parts.as_ref().expect("type cache");
            let tb = cache.value_type_parts.as_ref().expect("type cache");
            let mut fold = Fold::new(Aggregator::Min, self.dims.n_tfcn);
            for i in (0..m).filter(|&i| i != position) {
                match self.config.type_pairing {
                    super::TypePairing::Diagonal => {
                        fold.push(ta.row(pairs[i].role), tb.row(pairs[i].value), tbias)
                    }
                    super::TypePairing::Cross => {
                        for j in (0..m).filter(|&j| j != position) {
                            fold.push(ta.row(pairs[i].role), tb.row(pairs[j].value), tbias);
                        }
                    }
                }
            }
            fold
        });

        let n_candidates = match target {
            Target::Role => self.dims.n_roles,
            Target::Value => self.dims.n_values,
        };
        let anchor = pairs[position];
        let mut scores = Vec::with_capacity(n_candidates);
        for c in 0..n_candidates {
            let cand = match target {
                Target::Role => Pair::new(c, anchor.value),
                Target::Value => Pair::new(anchor.role, c),
            };
            let z = self.combine_parts(cache.role_parts.row(cand.role), cache.value_parts.row(cand.value));
            let (a_p, b_p) = self.g_halves(&self.hidden_eval(&z));
            let mut fold = Fold {
                agg,
                acc: fixed.acc.clone(),
            };
            fold.push(&a_p, &b_p, bias);
            for hj in halves.iter().flatten() {
                fold.push(&a_p, &hj.1, bias);
                fold.push(&hj.0, &b_p, bias);
            }
            let relatedness = fold.finish(m * m);
            let base = self.base_from_relatedness(&relatedness);

            let type_score = match (&self.types, &type_fixed) {
                (Some(t), Some(tf)) => {
                    let tbias = t.t_bias.value.data();
                    let ta = cache.role_type_parts.as_ref().expect("type cache");
                    let tb = cache.value_type_parts.as_ref().expect("type cache");
                    let mut fold = Fold {
                        agg: Aggregator::Min,
                        acc: tf.acc.clone(),
                    };
                    fold.push(ta.row(cand.role), tb.row(cand.value), tbias);
                    if self.config.type_pairing == super::TypePairing::Cross {
                        for j in (0..m).filter(|&j| j != position) {
                            fold.push(ta.row(cand.role), tb.row(pairs[j].value), tbias);
                            fold.push(ta.row(pairs[j].role), tb.row(cand.value), tbias);
                        }
                    }
                    Some(self.type_from_compat(&fold.finish(1)))
                }
                _ => None,
            };
            scores.push(combine_scores(base, type_score));
        }
        Ok(scores)
    }
}
