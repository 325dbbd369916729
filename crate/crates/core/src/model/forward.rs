//! Batched forward and backward passes.
//!
//! Batch-norm statistics in train mode are pooled over every pair row of
//! every fact in the batch, so a batch is scored as one unit.

use super::{combine_scores, pair_matrix, pair_preact, Model, PairEncoder, TypePairing};
use crate::data::{Fact, Pair};
use crate::error::{Error, Result};
use crate::math::{
    add_outer, aggregate, aggregate_backward, finite_difference_check, mat_t_vec, sigmoid,
    softplus, Aggregated, Aggregator, BatchStats, BnCache, BnMode, GradCheckReport, Matrix,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    /// `I_Rel`: +1 for valid facts, −1 otherwise.
    pub fn sign(self) -> f64 {
        match self {
            Label::Positive => 1.0,
            Label::Negative => -1.0,
        }
    }
}

#[derive(Clone, Debug)]
struct TypeForward {
    halves: Vec<(Vec<f64>, Vec<f64>)>,
    agg: Aggregated,
    score: f64,
}

#[derive(Clone, Debug)]
struct FactForward {
    halves: Vec<(Vec<f64>, Vec<f64>)>,
    relatedness: Aggregated,
    base: f64,
    types: Option<TypeForward>,
}

/// Everything the backward pass needs from a batched forward pass.
#[derive(Clone, Debug)]
pub struct BatchForward {
    pairs: Vec<Pair>,
    offsets: Vec<usize>,
    bn_out: Matrix,
    bn_cache: BnCache,
    hidden: Matrix,
    facts: Vec<FactForward>,
    pub bn_stats: Option<BatchStats>,
    pub scores: Vec<f64>,
}

impl BatchForward {
    /// Pair-embedding rows of fact `index`.
    pub fn pair_embedding(&self, index: usize) -> Matrix {
        let (lo, hi) = (self.offsets[index], self.offsets[index + 1]);
        let rows: Vec<&[f64]> = (lo..hi).map(|r| self.hidden.row(r)).collect();
        Matrix::from_rows(&rows).expect("rows share n_f")
    }

    pub fn relatedness(&self, index: usize) -> &[f64] {
        &self.facts[index].relatedness.values
    }

    pub fn base_score(&self, index: usize) -> f64 {
        self.facts[index].base
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    /// Sum of `log(1 + exp(−I·s))` over the batch.
    pub loss: f64,
    pub scores: Vec<f64>,
    /// Present in train mode; fold into the running statistics with
    /// [`crate::math::BatchNorm::update_running`].
    pub bn_stats: Option<BatchStats>,
}

fn type_pairs(pairing: TypePairing, m: usize) -> Vec<(usize, usize)> {
    match pairing {
        TypePairing::Diagonal => (0..m).map(|i| (i, i)).collect(),
        TypePairing::Cross => (0..m).flat_map(|i| (0..m).map(move |j| (i, j))).collect(),
    }
}

fn all_pairs(m: usize) -> Vec<(usize, usize)> {
    (0..m).flat_map(|i| (0..m).map(move |j| (i, j))).collect()
}

/// Routes `upstream` through the reduction and the ReLU of each pair vector,
/// accumulating into the per-row halves and the bias.
#[allow(clippy::too_many_arguments)]
fn pair_backward(
    routing: &Aggregated,
    upstream: &[f64],
    pairs: &[(usize, usize)],
    halves: &[(Vec<f64>, Vec<f64>)],
    bias: &[f64],
    d_first: &mut [Vec<f64>],
    d_second: &mut [Vec<f64>],
    d_bias: &mut [f64],
) {
    let per_pair = aggregate_backward(&routing.routing, upstream, pairs.len());
    for (q, &(i, j)) in pairs.iter().enumerate() {
        for (t, &g) in per_pair.row(q).iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            if pair_preact(halves[i].0[t], halves[j].1[t], bias[t]) > 0.0 {
                d_first[i][t] += g;
                d_second[j][t] += g;
                d_bias[t] += g;
            }
        }
    }
}

impl Model {
    pub fn forward_batch(&self, facts: &[&Fact], bn_mode: BnMode) -> Result<BatchForward> {
        if facts.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let mut pairs = Vec::new();
        let mut offsets = vec![0];
        for f in facts {
            self.check_fact(f)?;
            pairs.extend_from_slice(f.pairs());
            offsets.push(pairs.len());
        }
        let rows: Vec<Vec<f64>> = pairs.iter().map(|&p| self.pair_features(p)).collect();
        let z = Matrix::from_rows(&rows)?;
        let (bn_out, bn_cache, bn_stats) = self.nalp.bn.forward(&z, bn_mode)?;
        let hidden = crate::math::relu(&bn_out);

        let mut fact_fwd = Vec::with_capacity(facts.len());
        let mut scores = Vec::with_capacity(facts.len());
        for (fi, f) in facts.iter().enumerate() {
            let m = f.arity();
            let halves: Vec<(Vec<f64>, Vec<f64>)> = (0..m)
                .map(|i| self.g_halves(hidden.row(offsets[fi] + i)))
                .collect();
            let vectors = pair_matrix(&halves, self.nalp.g_bias.value.data(), all_pairs(m).into_iter());
            let relatedness = aggregate(&vectors, self.config.aggregator)?;
            let base = self.base_from_relatedness(&relatedness.values);
            let types = match &self.types {
                None => None,
                Some(t) => {
                    let halves: Vec<(Vec<f64>, Vec<f64>)> =
                        f.pairs().iter().map(|&p| self.t_halves(p)).collect();
                    let vectors = pair_matrix(
                        &halves,
                        t.t_bias.value.data(),
                        type_pairs(self.config.type_pairing, m).into_iter(),
                    );
                    let agg = aggregate(&vectors, Aggregator::Min)?;
                    let score = self.type_from_compat(&agg.values);
                    Some(TypeForward { halves, agg, score })
                }
            };
            scores.push(combine_scores(base, types.as_ref().map(|t| t.score)));
            fact_fwd.push(FactForward {
                halves,
                relatedness,
                base,
                types,
            });
        }
        Ok(BatchForward {
            pairs,
            offsets,
            bn_out,
            bn_cache,
            hidden,
            facts: fact_fwd,
            bn_stats,
            scores,
        })
    }

    /// Accumulates `∂(Σ dscores·s)/∂θ` into the gradient buffers.
    pub fn backward_batch(&mut self, fwd: &BatchForward, dscores: &[f64]) -> Result<()> {
        if dscores.len() != fwd.facts.len() {
            return Err(Error::Dimension(format!(
                "{} score gradients for {} facts",
                dscores.len(),
                fwd.facts.len()
            )));
        }
        let nf = self.dims.n_filters;
        let ng = self.dims.n_gfcn;
        let pairing = self.config.type_pairing;
        let mut d_hidden = Matrix::zeros(fwd.hidden.rows(), nf);

        for (fi, ff) in fwd.facts.iter().enumerate() {
            let ds = dscores[fi];
            if ds == 0.0 {
                continue;
            }
            let (ds0, dst) = match &ff.types {
                Some(t) if t.score < ff.base => (0.0, ds),
                _ => (ds, 0.0),
            };
            let lo = fwd.offsets[fi];
            let m = fwd.offsets[fi + 1] - lo;

            if ds0 != 0.0 {
                let n = &mut self.nalp;
                let r = &ff.relatedness.values;
                let w_f = n.f_weight.value.data();
                let d_rel: Vec<f64> = w_f.iter().map(|w| ds0 * w).collect();
                for (g, &rv) in n.f_weight.grad.data_mut().iter_mut().zip(r) {
                    *g += ds0 * rv;
                }
                n.f_bias.grad.data_mut()[0] += ds0;

                let mut d_first = vec![vec![0.0; ng]; m];
                let mut d_second = vec![vec![0.0; ng]; m];
                pair_backward(
                    &ff.relatedness,
                    &d_rel,
                    &all_pairs(m),
                    &ff.halves,
                    n.g_bias.value.data(),
                    &mut d_first,
                    &mut d_second,
                    n.g_bias.grad.data_mut(),
                );
                for i in 0..m {
                    let h = fwd.hidden.row(lo + i);
                    add_outer(&mut n.g_weight.grad, 0, h, &d_first[i]);
                    add_outer(&mut n.g_weight.grad, nf, h, &d_second[i]);
                    let a = mat_t_vec(&d_first[i], &n.g_weight.value, 0, nf);
                    let b = mat_t_vec(&d_second[i], &n.g_weight.value, nf, nf);
                    for (dh, (x, y)) in d_hidden.row_mut(lo + i).iter_mut().zip(a.iter().zip(&b)) {
                        *dh += x + y;
                    }
                }
            }

            if dst != 0.0 {
                let tf = ff.types.as_ref().expect("type forward present");
                let kt = self.dims.k_type;
                let nt = self.dims.n_tfcn;
                let t = self.types.as_mut().expect("type params present");
                let c = &tf.agg.values;
                let d_c: Vec<f64> = t.y_weight.value.data().iter().map(|w| dst * w).collect();
                for (g, &cv) in t.y_weight.grad.data_mut().iter_mut().zip(c) {
                    *g += dst * cv;
                }
                t.y_bias.grad.data_mut()[0] += dst;

                let mut d_first = vec![vec![0.0; nt]; m];
                let mut d_second = vec![vec![0.0; nt]; m];
                pair_backward(
                    &tf.agg,
                    &d_c,
                    &type_pairs(pairing, m),
                    &tf.halves,
                    t.t_bias.value.data(),
                    &mut d_first,
                    &mut d_second,
                    t.t_bias.grad.data_mut(),
                );
                for i in 0..m {
                    let p = fwd.pairs[lo + i];
                    let er = t.role_type.value.row(p.role).to_vec();
                    let ev = t.value_type.value.row(p.value).to_vec();
                    add_outer(&mut t.t_weight.grad, 0, &er, &d_first[i]);
                    add_outer(&mut t.t_weight.grad, kt, &ev, &d_second[i]);
                    let dr = mat_t_vec(&d_first[i], &t.t_weight.value, 0, kt);
                    let dv = mat_t_vec(&d_second[i], &t.t_weight.value, kt, kt);
                    for (g, x) in t.role_type.grad.row_mut(p.role).iter_mut().zip(&dr) {
                        *g += x;
                    }
                    for (g, x) in t.value_type.grad.row_mut(p.value).iter_mut().zip(&dv) {
                        *g += x;
                    }
                }
            }
        }

        // ReLU after batch norm
        for (dh, &y) in d_hidden.data_mut().iter_mut().zip(fwd.bn_out.data()) {
            if y <= 0.0 {
                *dh = 0.0;
            }
        }
        let dz = self.nalp.bn.backward(&fwd.bn_cache, &d_hidden)?;

        let k = self.dims.k;
        let encoder = self.config.pair_encoder;
        let n = &mut self.nalp;
        for (row, &p) in fwd.pairs.iter().enumerate() {
            let dzr = dz.row(row);
            if dzr.iter().all(|&g| g == 0.0) {
                continue;
            }
            let er = n.role_emb.value.row(p.role).to_vec();
            let ev = n.value_emb.value.row(p.value).to_vec();
            let (dr, dv) = match (encoder, &mut n.filters) {
                (PairEncoder::Conv, Some(f)) => {
                    add_outer(&mut f.grad, 0, &er, dzr);
                    add_outer(&mut f.grad, k, &ev, dzr);
                    (mat_t_vec(dzr, &f.value, 0, k), mat_t_vec(dzr, &f.value, k, k))
                }
                (PairEncoder::Plus, _) => (dzr.to_vec(), dzr.to_vec()),
                (PairEncoder::Mul, _) => (
                    dzr.iter().zip(&ev).map(|(g, v)| g * v).collect(),
                    dzr.iter().zip(&er).map(|(g, r)| g * r).collect(),
                ),
                (PairEncoder::Conv, None) => unreachable!("conv encoder always has filters"),
            };
            for (g, x) in n.role_emb.grad.row_mut(p.role).iter_mut().zip(&dr) {
                *g += x;
            }
            for (g, x) in n.value_emb.grad.row_mut(p.value).iter_mut().zip(&dv) {
                *g += x;
            }
        }
        Ok(())
    }

    /// Loss of a labelled batch without touching gradients.
    pub fn batch_loss(&self, batch: &[(Fact, Label)], bn_mode: BnMode) -> Result<f64> {
        let facts: Vec<&Fact> = batch.iter().map(|(f, _)| f).collect();
        let fwd = self.forward_batch(&facts, bn_mode)?;
        Ok(batch
            .iter()
            .zip(&fwd.scores)
            .map(|((_, l), &s)| softplus(-l.sign() * s))
            .sum())
    }

    /// Summed logistic loss of the batch; gradients are accumulated into the
    /// parameter buffers (callers clear them between steps).
    pub fn loss_and_grads(&mut self, batch: &[(Fact, Label)], bn_mode: BnMode) -> Result<LossOutput> {
        let facts: Vec<&Fact> = batch.iter().map(|(f, _)| f).collect();
        let fwd = self.forward_batch(&facts, bn_mode)?;
        let mut loss = 0.0;
        let mut dscores = Vec::with_capacity(batch.len());
        for ((_, label), &s) in batch.iter().zip(&fwd.scores) {
            let y = label.sign();
            loss += softplus(-y * s);
            dscores.push(-y * sigmoid(-y * s));
        }
        self.backward_batch(&fwd, &dscores)?;
        Ok(LossOutput {
            loss,
            scores: fwd.scores.clone(),
            bn_stats: fwd.bn_stats.clone(),
        })
    }

    /// Compares backpropagated gradients of the summed batch loss against
    /// central differences with step `h`. Existing gradients are discarded.
    pub fn gradient_check(
        &mut self,
        batch: &[(Fact, Label)],
        bn_mode: BnMode,
        h: f64,
        tol: f64,
    ) -> Result<GradCheckReport> {
        self.zero_grads();
        self.loss_and_grads(batch, bn_mode)?;
        Ok(finite_difference_check(
            self,
            |m: &Model| m.batch_loss(batch, bn_mode).expect("batch validated above"),
            h,
            tol,
        ))
    }
}
