use super::*;
use crate::model::ModelConfig;

fn model(seed: u64) -> Model {
    Model::init(ModelConfig {
        layers: 2,
        heads: 2,
        d_model: 8,
        vocab_size: 12,
        max_len: 16,
        seed,
    })
    .unwrap()
}

fn seq() -> TokenSequence {
    TokenSequence::new(vec![3, 7, 1, 9, 4, 4, 11, 2], 7).unwrap()
}

#[test]
fn a1_demos_hold() {
    let r = a1_demos().unwrap();
    assert_eq!(violations(&r), 0, "{}", markdown_table(&r));
    for b in r.iter().filter(|b| b.rhs == 1e-12) {
        assert!(b.lhs <= 1e-12, "{b:?}");
    }
}

#[test]
fn bound_report_tolerance() {
    assert!(BoundReport::new("x", "i", None, 1.0 + 5e-10, 1.0).satisfied);
    assert!(!BoundReport::new("x", "i", None, 1.0 + 2e-9, 1.0).satisfied);
}

#[test]
fn attribution_bounds_hold_on_random_models() {
    for seed in 0..5 {
        for scheme in MaskScheme::ALL {
            let cfg = HetaConfig {
                samples: 4,
                mask: scheme,
                ..Default::default()
            };
            let a = heta::attribute(&model(seed), &seq(), &cfg).unwrap();
            let r = attribution_bounds("t", &a, cfg.gamma).unwrap();
            assert_eq!(violations(&r), 0);
            assert!(r.iter().any(|b| b.bound == "gate-simplex"));
        }
    }
}

#[test]
fn pinsker_trivial_cases() {
    let comp = Components {
        gate: vec![0.0, 1.0],
        sensitivity: Some(vec![3.0, 0.0]),
        info: Some(vec![5.0, 0.0]),
        tv: Some(vec![1.0, 0.0]),
        delta_g: None,
        visits: None,
    };
    let t = TokenSequence::new(vec![1, 2, 3], 2).unwrap();
    let mut a = AttributionVector::plain("heta", heta::combine_variant(&comp, Variant::Full, 0.5, 0.5), &t);
    a.variant = Some(Variant::Full);
    a.components = Some(comp);
    let r = attribution_bounds("t", &a, 0.5).unwrap();
    assert_eq!(violations(&r), 0);
    let pinsker: Vec<_> = r.iter().filter(|b| b.bound == "pinsker").collect();
    assert_eq!((pinsker[0].lhs, pinsker[0].rhs), (0.0, 0.0));
    assert_eq!(pinsker[1].lhs, 0.0);
}

#[test]
fn norm_bound_on_oracle_instances() {
    for seed in 0..3 {
        let m = model(seed);
        let t = TokenSequence::new(vec![3, 7, 1, 9, 4, 4, 11, 2, 5], 8).unwrap();
        let x = m.embed(t.context()).unwrap();
        let obj = LmObjective::new(&m, x, t.read_pos(), t.target_token()).unwrap();
        let r = norm_bound("t", &obj, 16, seed).unwrap();
        assert_eq!(violations(&r), 0, "{}", markdown_table(&r));
    }
}

/// `f(x) = ½ vec(x)ᵀ A vec(x)`.
#[derive(Clone)]
struct Quadratic {
    a: Tensor,
    x: Tensor,
}

impl ScalarObjective for Quadratic {
    fn point(&self) -> &Tensor {
        &self.x
    }

    fn eval<'g>(&self, g: &'g Graph, x: crate::autodiff::Var<'g>) -> Result<crate::autodiff::Var<'g>> {
        let nd = self.x.numel();
        let v = x.reshape(&[nd, 1])?;
        let av = g.constant(self.a.clone())?.matmul(v)?;
        v.mul(av)?.sum()?.scale(0.5)
    }
}

fn quadratic() -> Quadratic {
    // block 0 = diag(3, -1), block 1 = [[1, 0.5], [0.5, 2]], coupling 0.25
    let a = Tensor::from_rows(&[
        vec![3.0, 0.0, 0.25, 0.0],
        vec![0.0, -1.0, 0.0, 0.25],
        vec![0.25, 0.0, 1.0, 0.5],
        vec![0.0, 0.25, 0.5, 2.0],
    ])
    .unwrap();
    Quadratic {
        a,
        x: Tensor::new(vec![2, 2], vec![0.3, -0.2, 0.7, 0.1]).unwrap(),
    }
}

#[test]
fn power_iteration_finds_the_block_spectrum() {
    let q = quadratic();
    let g = Graph::new();
    let bh = BlockHessian::new(&g, &q).unwrap();
    let l0 = block_lambda_max(&bh, 0, POWER_STEPS, POWER_TOL, 1).unwrap();
    assert!((l0 - 3.0).abs() < 1e-6, "{l0}");
    let l1 = block_lambda_max(&bh, 1, POWER_STEPS, POWER_TOL, 1).unwrap();
    let expect = 1.5 + (0.25f64 + 0.25).sqrt();
    assert!((l1 - expect).abs() < 1e-6, "{l1}");
}

#[test]
fn quadratic_remainder_is_exact() {
    let q = quadratic();
    let eps = [0.0, 0.01, 0.05];
    let r = taylor_remainder_check("q", &q, |x| Quadratic { x, ..q.clone() }, 0, &eps, 2).unwrap();
    assert_eq!(r.remainder[0], 0.0);
    // remainder is ½ ε² uᵀ B₀ u, which never exceeds ½ λ_max ε²
    assert_eq!(violations(&r.bounds), 0);
    assert!((r.slope - 2.0).abs() < 1e-6);
    assert!(taylor_remainder_check("q", &q, |x| Quadratic { x, ..q.clone() }, 0, &[0.5], 2).is_err());
}

#[test]
fn lm_remainder_scales_quadratically() {
    let m = model(4);
    let t = seq();
    let x = m.embed(t.context()).unwrap();
    let obj = LmObjective::new(&m, x, t.read_pos(), t.target_token()).unwrap();
    let mut checked = 0;
    for i in 0..t.target {
        match taylor_remainder_check("t", &obj, |y| obj.at(y), i, &[1e-3, 1e-2], 0) {
            Ok(r) => {
                assert!((r.slope - 2.0).abs() < 0.3, "{}", r.slope);
                assert_eq!(violations(&r.bounds), 0);
                checked += 1;
            }
            Err(HetaError::PowerIteration { .. }) => {}
            Err(e) => panic!("{e}"),
        }
    }
    assert!(checked >= t.target / 2, "{checked}");
}

#[test]
fn interaction_bound_for_small_perturbations() {
    let m = model(6);
    let t = TokenSequence::new(vec![3, 7, 1, 9, 4, 4, 11, 2, 5], 8).unwrap();
    let x = m.embed(t.context()).unwrap();
    let obj = LmObjective::new(&m, x.clone(), t.read_pos(), t.target_token()).unwrap();
    let delta = x.scale(-0.02);
    let r = interaction_bound(&obj, &delta).unwrap();
    assert!(r.deviation <= r.cross_bound * 1.05 + 1e-7, "{r:?}");
}

#[test]
fn additivity_of_an_ignored_context_is_zero() {
    let m = model(7);
    // one context token: masking it everywhere is the only subset
    let t = TokenSequence::new(vec![3, 7, 1], 2).unwrap();
    let a = heta::attribute(&m, &t, &HetaConfig { samples: 2, ..Default::default() }).unwrap();
    let comp = a.components.unwrap();
    let samples = fit_samples(&m, &t, &comp, MaskScheme::Sentinel, 4, 0).unwrap();
    assert_eq!(samples.len(), 2 + 4);
    let fit = heta::fit_weights(&samples).unwrap();
    let r = additivity_residual("t", &m, &t, &comp, fit.beta, fit.gamma, MaskScheme::Sentinel).unwrap();
    assert!(r.residual.is_finite());
}

#[test]
fn exact_settings_reproduce_full() {
    let m = model(8);
    let t = seq();
    let base = HetaConfig {
        samples: 4,
        oversample: 0,
        ..Default::default()
    };
    let r = lrwin_error_decomposition("t", &m, &t, &base, &[8], &[16]).unwrap();
    assert_eq!(r.len(), 1);
    assert!(r[0].max_error < 1e-9, "{}", r[0].max_error);
    assert_eq!(violations(&r[0].bounds), 0);
    assert_eq!(r[0].gate_discrepancy, 0.0);
}

#[test]
fn lrwin_bound_holds_on_a_random_model() {
    let m = model(9);
    let t = TokenSequence::new((0..14).map(|k| (k * 5) % 12).collect(), 13).unwrap();
    let base = HetaConfig {
        samples: 4,
        ..Default::default()
    };
    for r in lrwin_error_decomposition("t", &m, &t, &base, &[2, 4], &[4, 8, 16]).unwrap() {
        assert_eq!(violations(&r.bounds), 0, "k {} W {}", r.rank, r.window);
    }
}

#[test]
fn self_ranked_deletion_has_unit_correlation() {
    let m = model(10);
    let ts: Vec<TokenSequence> = (0..4)
        .map(|s| TokenSequence::new((0..9).map(|k| (k * 7 + s) % 12).collect(), 8).unwrap())
        .collect();
    let scores: Vec<Vec<f64>> = ts
        .iter()
        .map(|t| info::batch_info(&m, t, MaskScheme::Sentinel).unwrap().delta_g)
        .collect();
    let r = deletion_intervention_check(&m, &ts, "oracle", &scores, 2, 0).unwrap();
    assert!((r.mean_rho - 1.0).abs() < 1e-12);
}

#[test]
fn envelope_counts() {
    assert_eq!(envelope_frequency(&[0.1, 0.5, 0.0], &[0.2, 0.4, -1.0]), (2, 3));
    assert_eq!(envelope_frequency(&[], &[]), (0, 0));
}
