//! The relatedness-evaluation scorer and its type-constrained extension.
//!
//! A fact's `role:value` pairs are encoded row by row (convolution with
//! `1×2k` filters, i.e. one matrix product, then batch norm and ReLU). Every
//! ordered pair of rows, self-pairs included, goes through a one-layer
//! g-FCN; the elementwise minimum over those `m²` vectors is the overall
//! relatedness vector, which a linear f-FCN turns into the base score `s₀`.
//! The type branch does the same with small type embeddings and combines
//! with `s₀` through `min`.
//!
//! All scoring paths are built from the same per-row routines
//! ([`vec_mat`], [`BatchNorm::normalize_row`], [`dot`]) so the batched
//! forward pass, the single-fact scorer and the cached candidate scorer in
//! [`candidates`] produce bit-identical scores under the min aggregator.

pub mod candidates;
pub mod checkpoint;
mod complexity;
mod forward;

use std::fmt;
use std::str::FromStr;

use crate::data::{Fact, Pair};
use crate::error::{Error, Result};
use crate::math::{
    aggregate, dot, relu_scalar, vec_mat, Aggregated, Aggregator, BatchNorm, BnMode, Matrix,
    ParamTensor, Parameterized,
};

pub use candidates::{ScoringCache, Target};
pub use complexity::{count_params_flops, ComplexityReport};
pub use forward::{BatchForward, Label, LossOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Nalp,
    TNalp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PairEncoder {
    Conv,
    Plus,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TypePairing {
    /// Each role's expected type against its own value's type.
    Diagonal,
    /// Every role against every value in the fact.
    Cross,
}

macro_rules! token_enum {
    ($ty:ty, $what:literal, $( $variant:path => $tok:literal ),+ $(,)?) => {
        impl $ty {
            pub fn token(self) -> &'static str {
                match self { $( $variant => $tok ),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.token())
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $( $tok => Ok($variant), )+
                    other => Err(Error::Config(format!(concat!("unknown ", $what, " {:?}"), other))),
                }
            }
        }
    };
}

token_enum!(Mode, "mode", Mode::Nalp => "nalp", Mode::TNalp => "tnalp");
token_enum!(PairEncoder, "pair encoder", PairEncoder::Conv => "conv", PairEncoder::Plus => "plus", PairEncoder::Mul => "mul");
token_enum!(TypePairing, "type pairing", TypePairing::Diagonal => "diagonal", TypePairing::Cross => "cross");

pub fn parse_aggregator(s: &str) -> Result<Aggregator> {
    match s {
        "min" => Ok(Aggregator::Min),
        "emax" => Ok(Aggregator::Max),
        "emean" => Ok(Aggregator::Mean),
        other => Err(Error::Config(format!("unknown aggregator {other:?}"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub mode: Mode,
    pub pair_encoder: PairEncoder,
    /// Reduction over the pairwise relatedness vectors. The type branch
    /// always reduces with `min`.
    pub aggregator: Aggregator,
    pub type_pairing: TypePairing,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Nalp,
            pair_encoder: PairEncoder::Conv,
            aggregator: Aggregator::Min,
            type_pairing: TypePairing::Diagonal,
        }
    }
}

impl ModelConfig {
    pub fn typed() -> Self {
        Self {
            mode: Mode::TNalp,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub n_roles: usize,
    pub n_values: usize,
    /// Role/value embedding width `k`.
    pub k: usize,
    /// Number of `1×2k` filters `n_f`.
    pub n_filters: usize,
    pub n_gfcn: usize,
    /// Type embedding width `k′`.
    pub k_type: usize,
    pub n_tfcn: usize,
}

impl Dims {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.k == 0 || self.n_filters == 0 || self.n_gfcn == 0 {
            return Err(Error::Config(format!(
                "k, n_f and n_gFCN must be positive (got {}, {}, {})",
                self.k, self.n_filters, self.n_gfcn
            )));
        }
        if self.n_roles == 0 || self.n_values == 0 {
            return Err(Error::Config("vocabulary must be non-empty".into()));
        }
        if cfg.pair_encoder != PairEncoder::Conv && self.n_filters != self.k {
            return Err(Error::Config(format!(
                "{} pair encoder needs n_f = k, got n_f = {} and k = {}",
                cfg.pair_encoder, self.n_filters, self.k
            )));
        }
        if cfg.mode == Mode::TNalp && (self.k_type == 0 || self.n_tfcn == 0) {
            return Err(Error::Config(format!(
                "type branch needs positive k' and n_tFCN (got {}, {})",
                self.k_type, self.n_tfcn
            )));
        }
        Ok(())
    }
}

/// Learnable tensors of the relatedness scorer.
#[derive(Clone, Debug, PartialEq)]
pub struct NalpParams {
    pub role_emb: ParamTensor,
    pub value_emb: ParamTensor,
    /// `2k × n_f`; the top `k` rows act on the role half of each pair.
    /// Absent for the plus/mul encoders.
    pub filters: Option<ParamTensor>,
    pub bn: BatchNorm,
    /// `2n_f × n_gFCN`.
    pub g_weight: ParamTensor,
    pub g_bias: ParamTensor,
    pub f_weight: ParamTensor,
    pub f_bias: ParamTensor,
}

/// Learnable tensors of the type-compatibility branch.
#[derive(Clone, Debug, PartialEq)]
pub struct TypeParams {
    pub role_type: ParamTensor,
    pub value_type: ParamTensor,
    /// `2k′ × n_tFCN`.
    pub t_weight: ParamTensor,
    pub t_bias: ParamTensor,
    pub y_weight: ParamTensor,
    pub y_bias: ParamTensor,
}

impl NalpParams {
    pub fn zeros(dims: &Dims, encoder: PairEncoder) -> Self {
        Self {
            role_emb: ParamTensor::zeros(dims.n_roles, dims.k),
            value_emb: ParamTensor::zeros(dims.n_values, dims.k),
            filters: (encoder == PairEncoder::Conv)
                .then(|| ParamTensor::zeros(2 * dims.k, dims.n_filters)),
            bn: BatchNorm::new(dims.n_filters),
            g_weight: ParamTensor::zeros(2 * dims.n_filters, dims.n_gfcn),
            g_bias: ParamTensor::zeros(1, dims.n_gfcn),
            f_weight: ParamTensor::zeros(dims.n_gfcn, 1),
            f_bias: ParamTensor::zeros(1, 1),
        }
    }
}

impl TypeParams {
    pub fn zeros(dims: &Dims) -> Self {
        Self {
            role_type: ParamTensor::zeros(dims.n_roles, dims.k_type),
            value_type: ParamTensor::zeros(dims.n_values, dims.k_type),
            t_weight: ParamTensor::zeros(2 * dims.k_type, dims.n_tfcn),
            t_bias: ParamTensor::zeros(1, dims.n_tfcn),
            y_weight: ParamTensor::zeros(dims.n_tfcn, 1),
            y_bias: ParamTensor::zeros(1, 1),
        }
    }
}

/// Intermediate quantities of one eval-mode scoring pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreParts {
    pub relatedness: Vec<f64>,
    pub base: f64,
    pub type_compat: Option<Vec<f64>>,
    pub type_score: Option<f64>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub dims: Dims,
    pub nalp: NalpParams,
    pub types: Option<TypeParams>,
}

fn check_shape(name: &str, t: &ParamTensor, shape: (usize, usize)) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::Dimension(format!(
            "{name} is {}x{}, expected {}x{}",
            t.shape().0,
            t.shape().1,
            shape.0,
            shape.1
        )));
    }
    Ok(())
}

impl Model {
    /// All-zero parameters (γ = 1) with validated dimensions.
    pub fn zeros(dims: Dims, config: ModelConfig) -> Result<Self> {
        dims.validate(&config)?;
        let types = (config.mode == Mode::TNalp).then(|| TypeParams::zeros(&dims));
        Ok(Self {
            config,
            dims,
            nalp: NalpParams::zeros(&dims, config.pair_encoder),
            types,
        })
    }

    /// Assembles a model from existing parameters, checking every shape.
    pub fn from_parts(
        config: ModelConfig,
        dims: Dims,
        nalp: NalpParams,
        types: Option<TypeParams>,
    ) -> Result<Self> {
        dims.validate(&config)?;
        match (config.mode, &types) {
            (Mode::TNalp, None) => {
                return Err(Error::Config("type-constrained mode needs type parameters".into()))
            }
            (Mode::Nalp, Some(_)) => {
                return Err(Error::Config("plain mode does not take type parameters".into()))
            }
            _ => {}
        }
        let model = Self {
            config,
            dims,
            nalp,
            types,
        };
        let reference = Model::zeros(dims, config)?;
        for ((name, have), (_, want)) in model.tensors().into_iter().zip(reference.tensors()) {
            check_shape(name, have, want.shape())?;
        }
        if model.tensors().len() != reference.tensors().len() {
            return Err(Error::Config("filter tensor does not match the pair encoder".into()));
        }
        if model.nalp.bn.channels() != dims.n_filters {
            return Err(Error::Dimension("batchnorm channel count differs from n_f".into()));
        }
        Ok(model)
    }

    /// Named learnable tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &ParamTensor)> {
        let n = &self.nalp;
        let mut out = vec![("role_emb", &n.role_emb), ("value_emb", &n.value_emb)];
        if let Some(f) = &n.filters {
            out.push(("filters", f));
        }
        out.extend([
            ("bn_gamma", &n.bn.gamma),
            ("bn_beta", &n.bn.beta),
            ("g_weight", &n.g_weight),
            ("g_bias", &n.g_bias),
            ("f_weight", &n.f_weight),
            ("f_bias", &n.f_bias),
        ]);
        if let Some(t) = &self.types {
            out.extend([
                ("role_type", &t.role_type),
                ("value_type", &t.value_type),
                ("t_weight", &t.t_weight),
                ("t_bias", &t.t_bias),
                ("y_weight", &t.y_weight),
                ("y_bias", &t.y_bias),
            ]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut ParamTensor)> {
        let n = &mut self.nalp;
        let mut out = vec![("role_emb", &mut n.role_emb), ("value_emb", &mut n.value_emb)];
        if let Some(f) = &mut n.filters {
            out.push(("filters", f));
        }
        out.extend([
            ("bn_gamma", &mut n.bn.gamma),
            ("bn_beta", &mut n.bn.beta),
            ("g_weight", &mut n.g_weight),
            ("g_bias", &mut n.g_bias),
            ("f_weight", &mut n.f_weight),
            ("f_bias", &mut n.f_bias),
        ]);
        if let Some(t) = &mut self.types {
            out.extend([
                ("role_type", &mut t.role_type),
                ("value_type", &mut t.value_type),
                ("t_weight", &mut t.t_weight),
                ("t_bias", &mut t.t_bias),
                ("y_weight", &mut t.y_weight),
                ("y_bias", &mut t.y_bias),
            ]);
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.zero_grad();
        }
    }

    pub fn grads_are_zero(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.grad_is_zero())
    }

    /// One Adam step on every tensor; clears the gradients.
    pub fn adam_step(&mut self, lr: f64) -> Result<()> {
        for (_, t) in self.tensors_mut() {
            t.adam_step(lr)?;
        }
        Ok(())
    }

    pub fn check_fact(&self, fact: &Fact) -> Result<()> {
        for p in fact.pairs() {
            if p.role >= self.dims.n_roles || p.value >= self.dims.n_values {
                return Err(Error::Data(format!(
                    "pair ({}, {}) out of range for {} roles / {} values",
                    p.role, p.value, self.dims.n_roles, self.dims.n_values
                )));
            }
        }
        Ok(())
    }

    // ---- per-row primitives shared by every scoring path ----

    /// Role half of a pair's pre-normalization features.
    pub(crate) fn role_part(&self, role: usize) -> Vec<f64> {
        let e = self.nalp.role_emb.value.row(role);
        match &self.nalp.filters {
            Some(f) => vec_mat(e, &f.value, 0),
            None => e.to_vec(),
        }
    }

    /// Value half of a pair's pre-normalization features.
    pub(crate) fn value_part(&self, value: usize) -> Vec<f64> {
        let e = self.nalp.value_emb.value.row(value);
        match &self.nalp.filters {
            Some(f) => vec_mat(e, &f.value, self.dims.k),
            None => e.to_vec(),
        }
    }

    pub(crate) fn combine_parts(&self, role_part: &[f64], value_part: &[f64]) -> Vec<f64> {
        match self.config.pair_encoder {
            PairEncoder::Conv | PairEncoder::Plus => {
                role_part.iter().zip(value_part).map(|(a, b)| a + b).collect()
            }
            PairEncoder::Mul => role_part.iter().zip(value_part).map(|(a, b)| a * b).collect(),
        }
    }

    /// Pre-normalization features of one pair (a row of `concat(R, V) ∗ Ω`).
    pub(crate) fn pair_features(&self, pair: Pair) -> Vec<f64> {
        self.combine_parts(&self.role_part(pair.role), &self.value_part(pair.value))
    }

    /// Eval-mode pair embedding row.
    pub(crate) fn hidden_eval(&self, z: &[f64]) -> Vec<f64> {
        self.nalp
            .bn
            .normalize_row(z)
            .into_iter()
            .map(relu_scalar)
            .collect()
    }

    /// `(h·W_top, h·W_bottom)`: a row's contribution as the first and as the
    /// second member of an ordered pair.
    pub(crate) fn g_halves(&self, h: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let w = &self.nalp.g_weight.value;
        (vec_mat(h, w, 0), vec_mat(h, w, self.dims.n_filters))
    }

    pub(crate) fn t_halves(&self, pair: Pair) -> (Vec<f64>, Vec<f64>) {
        let t = self.types.as_ref().expect("type branch present");
        let kt = self.dims.k_type;
        (
            vec_mat(t.role_type.value.row(pair.role), &t.t_weight.value, 0),
            vec_mat(t.value_type.value.row(pair.value), &t.t_weight.value, kt),
        )
    }

    pub(crate) fn base_from_relatedness(&self, r: &[f64]) -> f64 {
        dot(r, self.nalp.f_weight.value.data()) + self.nalp.f_bias.value.data()[0]
    }

    pub(crate) fn type_from_compat(&self, c: &[f64]) -> f64 {
        let t = self.types.as_ref().expect("type branch present");
        dot(c, t.y_weight.value.data()) + t.y_bias.value.data()[0]
    }

    // ---- single-fact forward ----

    /// Pair embedding matrix `M_Rel` (`m × n_f`). Train mode normalizes with
    /// the statistics of this fact's own rows.
    pub fn pair_embed(&self, fact: &Fact, bn_mode: BnMode) -> Result<Matrix> {
        self.check_fact(fact)?;
        let rows: Vec<Vec<f64>> = fact.pairs().iter().map(|&p| self.pair_features(p)).collect();
        match bn_mode {
            BnMode::Eval => {
                let h: Vec<Vec<f64>> = rows.iter().map(|z| self.hidden_eval(z)).collect();
                Matrix::from_rows(&h)
            }
            BnMode::Train => {
                let z = Matrix::from_rows(&rows)?;
                let (y, _, _) = self.nalp.bn.forward(&z, BnMode::Train)?;
                Ok(crate::math::relu(&y))
            }
        }
    }

    /// Overall relatedness vector of a pair-embedding matrix.
    pub fn relatedness_from_embedding(&self, m_rel: &Matrix) -> Result<Vec<f64>> {
        Ok(self.relatedness_aggregate(m_rel)?.values)
    }

    pub(crate) fn relatedness_aggregate(&self, m_rel: &Matrix) -> Result<Aggregated> {
        let m = m_rel.rows();
        if m == 0 {
            return Err(Error::InvalidInput("fact has no pairs".into()));
        }
        let halves: Vec<(Vec<f64>, Vec<f64>)> = (0..m).map(|i| self.g_halves(m_rel.row(i))).collect();
        let pairs = pair_matrix(
            &halves,
            self.nalp.g_bias.value.data(),
            (0..m).flat_map(|i| (0..m).map(move |j| (i, j))),
        );
        aggregate(&pairs, self.config.aggregator)
    }

    /// Overall relatedness vector `R_Rel` of a fact (eval-mode batch norm).
    pub fn relatedness_vector(&self, fact: &Fact) -> Result<Vec<f64>> {
        let m_rel = self.pair_embed(fact, BnMode::Eval)?;
        self.relatedness_from_embedding(&m_rel)
    }

    /// Overall type-compatibility vector `C_Rel`.
    pub fn type_compat_vector(&self, fact: &Fact) -> Result<Vec<f64>> {
        if self.types.is_none() {
            return Err(Error::Config("model has no type branch".into()));
        }
        self.check_fact(fact)?;
        Ok(self.type_aggregate(fact.pairs())?.values)
    }

    pub(crate) fn type_aggregate(&self, pairs: &[Pair]) -> Result<Aggregated> {
        let t = self.types.as_ref().expect("type branch present");
        let halves: Vec<(Vec<f64>, Vec<f64>)> = pairs.iter().map(|&p| self.t_halves(p)).collect();
        let m = pairs.len();
        let bias = t.t_bias.value.data();
        let vectors = match self.config.type_pairing {
            TypePairing::Diagonal => pair_matrix(&halves, bias, (0..m).map(|i| (i, i))),
            TypePairing::Cross => {
                pair_matrix(&halves, bias, (0..m).flat_map(|i| (0..m).map(move |j| (i, j))))
            }
        };
        aggregate(&vectors, Aggregator::Min)
    }

    /// Base score `s₀` (eval mode).
    pub fn score_base(&self, fact: &Fact) -> Result<f64> {
        Ok(self.base_from_relatedness(&self.relatedness_vector(fact)?))
    }

    /// Final score: `s₀`, or `min(s₀, s_t)` with the type branch.
    pub fn score(&self, fact: &Fact) -> Result<f64> {
        Ok(self.score_parts(fact)?.score)
    }

    pub fn score_parts(&self, fact: &Fact) -> Result<ScoreParts> {
        let relatedness = self.relatedness_vector(fact)?;
        let base = self.base_from_relatedness(&relatedness);
        let (type_compat, type_score) = match self.config.mode {
            Mode::Nalp => (None, None),
            Mode::TNalp => {
                let c = self.type_compat_vector(fact)?;
                let st = self.type_from_compat(&c);
                (Some(c), Some(st))
            }
        };
        Ok(ScoreParts {
            score: combine_scores(base, type_score),
            relatedness,
            base,
            type_compat,
            type_score,
        })
    }
}

/// `min(s₀, s_t)`, preferring `s₀` on ties.
#[inline]
pub(crate) fn combine_scores(base: f64, type_score: Option<f64>) -> f64 {
    match type_score {
        Some(st) if st < base => st,
        _ => base,
    }
}

/// ReLU'd pair vectors `Υ((first_i + second_j) + bias)` stacked in the order
/// of `pairs`.
pub(crate) fn pair_matrix(
    halves: &[(Vec<f64>, Vec<f64>)],
    bias: &[f64],
    pairs: impl Iterator<Item = (usize, usize)>,
) -> Matrix {
    let d = bias.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, j) in pairs {
        let (a, _) = &halves[i];
        let (_, b) = &halves[j];
        for t in 0..d {
            data.push(relu_scalar(pair_preact(a[t], b[t], bias[t])));
        }
        rows += 1;
    }
    Matrix::new(rows, d, data).expect("consistent widths")
}

#[inline]
pub(crate) fn pair_preact(first: f64, second: f64, bias: f64) -> f64 {
    (first + second) + bias
}

impl Parameterized for Model {
    fn tensor_count(&self) -> usize {
        self.tensors().len()
    }

    fn tensor(&self, index: usize) -> (&str, &ParamTensor) {
        self.tensors().swap_remove(index)
    }

    fn tensor_mut(&mut self, index: usize) -> &mut ParamTensor {
        self.tensors_mut().swap_remove(index).1
    }
}
