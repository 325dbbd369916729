use super::{Dims, Mode, ModelConfig, PairEncoder, TypePairing};

/// Closed-form parameter and multiply-add counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ComplexityReport {
    pub nalp_params: u64,
    pub type_params: u64,
    pub params: u64,
    pub reference_arity: usize,
    /// Forward multiply-adds for one fact, evaluating g-FCN on each of the
    /// `m²` concatenated pairs as written.
    pub forward_macs: u64,
    /// Same, with the g-FCN split into per-row halves that are shared by
    /// all pairs (what the implementation does).
    pub forward_macs_factored: u64,
}

pub fn count_params_flops(cfg: &ModelConfig, dims: &Dims, reference_arity: usize) -> ComplexityReport {
    let u = |x: usize| x as u64;
    let (r, v, k, nf, ng) = (u(dims.n_roles), u(dims.n_values), u(dims.k), u(dims.n_filters), u(dims.n_gfcn));
    let m = u(reference_arity);

    let filters = if cfg.pair_encoder == PairEncoder::Conv { 2 * k * nf } else { 0 };
    let nalp_params = r * k + v * k + filters + 2 * nf + 2 * nf * ng + ng + ng + 1;

    let (kt, nt) = (u(dims.k_type), u(dims.n_tfcn));
    let type_params = match cfg.mode {
        Mode::Nalp => 0,
        Mode::TNalp => r * kt + v * kt + 2 * kt * nt + nt + nt + 1,
    };

    let encode = match cfg.pair_encoder {
        PairEncoder::Conv => m * 2 * k * nf,
        PairEncoder::Plus | PairEncoder::Mul => m * k,
    };
    let norm = m * nf;
    let score = ng + 1;
    let g_literal = m * m * (2 * nf * ng + ng);
    let g_factored = 2 * m * nf * ng + m * m * ng;
    let type_macs = match cfg.mode {
        Mode::Nalp => 0,
        Mode::TNalp => {
            let pairs = match cfg.type_pairing {
                TypePairing::Diagonal => m,
                TypePairing::Cross => m * m,
            };
            pairs * (2 * kt * nt + nt) + nt + 1
        }
    };
    let type_factored = match cfg.mode {
        Mode::Nalp => 0,
        Mode::TNalp => {
            let pairs = match cfg.type_pairing {
                TypePairing::Diagonal => m,
                TypePairing::Cross => m * m,
            };
            2 * m * kt * nt + pairs * nt + nt + 1
        }
    };

    ComplexityReport {
        nalp_params,
        type_params,
        params: nalp_params + type_params,
        reference_arity,
        forward_macs: encode + norm + g_literal + score + type_macs,
        forward_macs_factored: encode + norm + g_factored + score + type_factored,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(n_gfcn: usize) -> Dims {
        Dims {
            n_roles: 1,
            n_values: 1,
            k: 1,
            n_filters: 1,
            n_gfcn,
            k_type: 1,
            n_tfcn: 1,
        }
    }

    #[test]
    fn unit_dims_count() {
        let r = count_params_flops(&ModelConfig::default(), &dims(1), 2);
        assert_eq!(r.params, 11);
        assert_eq!(r.type_params, 0);
    }

    #[test]
    fn doubling_gfcn_width() {
        let d = Dims {
            n_roles: 7,
            n_values: 30,
            k: 6,
            n_filters: 5,
            n_gfcn: 9,
            k_type: 2,
            n_tfcn: 3,
        };
        let wide = Dims { n_gfcn: 18, ..d };
        let cfg = ModelConfig::default();
        let a = count_params_flops(&cfg, &d, 3).params;
        let b = count_params_flops(&cfg, &wide, 3).params;
        assert_eq!(b - a, (2 * 5 + 2) * 9);
    }

    #[test]
    fn large_benchmark_configuration_exceeds_five_million() {
        // |V| from the larger benchmark, |R| as its relation count, k=100,
        // n_f=200, n_gFCN=1200.
        let d = Dims {
            n_roles: 707,
            n_values: 47_765,
            k: 100,
            n_filters: 200,
            n_gfcn: 1200,
            k_type: 20,
            n_tfcn: 100,
        };
        for cfg in [ModelConfig::default(), ModelConfig::typed()] {
            assert!(count_params_flops(&cfg, &d, 3).params > 5_000_000);
        }
    }

    #[test]
    fn factored_count_is_cheaper_for_m_above_one() {
        let r = count_params_flops(&ModelConfig::typed(), &dims(8), 4);
        assert!(r.forward_macs_factored < r.forward_macs);
    }
}
