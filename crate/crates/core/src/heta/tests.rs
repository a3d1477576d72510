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

fn small() -> HetaConfig {
    HetaConfig {
        samples: 4,
        ..Default::default()
    }
}

#[test]
fn hand_trace() {
    let comp = Components {
        gate: vec![0.5, 0.5],
        sensitivity: Some(vec![2.0, 0.0]),
        info: Some(vec![0.0, 1.0]),
        tv: None,
        delta_g: None,
        visits: None,
    };
    assert_eq!(combine_variant(&comp, Variant::Full, 0.5, 0.5), vec![0.5, 0.25]);
    assert_eq!(combine_variant(&comp, Variant::TransitionOnly, 0.5, 0.5), vec![0.5, 0.5]);
    assert_eq!(combine_variant(&comp, Variant::HessianOnly, 0.5, 0.5), vec![2.0, 0.0]);
    assert_eq!(combine_variant(&comp, Variant::KlOnly, 0.5, 0.5), vec![0.0, 1.0]);
    assert_eq!(combine_variant(&comp, Variant::NoGate, 0.5, 0.5), vec![1.0, 0.5]);
    assert_eq!(combine_variant(&comp, Variant::UniformGate, 0.5, 0.5), vec![0.5, 0.25]);
}

#[test]
fn zero_weights_rejected() {
    let cfg = HetaConfig {
        beta: 0.0,
        gamma: 0.0,
        ..Default::default()
    };
    assert!(matches!(attribute(&model(0), &seq(), &cfg), Err(HetaError::Precondition(_))));
    let neg = HetaConfig {
        beta: -0.1,
        ..Default::default()
    };
    assert!(neg.validate().is_err());
}

#[test]
fn variant_identities_are_exact() {
    let m = model(1);
    let t = seq();
    let cfg = small();
    let all = attribute_variants(&m, &t, &cfg, &Variant::ABLATIONS).unwrap();
    let comp = all[0].components.clone().unwrap();
    let s = comp.sensitivity.as_ref().unwrap();
    let info = comp.info.as_ref().unwrap();
    let n = comp.gate.len();
    for (a, v) in all.iter().zip(Variant::ABLATIONS) {
        assert_eq!(a.variant, Some(v));
        assert_eq!(a.components.as_ref().unwrap(), &comp);
    }
    for k in 0..n {
        assert_eq!(all[1].scores[k], comp.gate[k]);
        assert_eq!(all[2].scores[k], s[k]);
        assert_eq!(all[3].scores[k], info[k]);
        assert_eq!(all[4].scores[k], 0.5 * s[k] + 0.5 * info[k]);
        assert_eq!(all[5].scores[k], (1.0 / n as f64) * all[4].scores[k]);
        assert_eq!(all[0].scores[k], comp.gate[k] * all[4].scores[k]);
    }
    // the one-off path agrees with the shared path
    let full = attribute(&m, &t, &cfg).unwrap();
    assert_eq!(full.scores, all[0].scores);
}

#[test]
fn efficiency_variants_cannot_share() {
    assert!(attribute_variants(&model(0), &seq(), &small(), &[Variant::Lr]).is_err());
}

#[test]
fn scores_are_nonnegative_and_reconstruct() {
    let m = model(2);
    for v in Variant::ABLATIONS.iter().chain(Variant::EFFICIENCY.iter()) {
        let cfg = HetaConfig {
            window: 4,
            rank: 3,
            ..small().with_variant(*v)
        };
        let a = attribute(&m, &seq(), &cfg).unwrap();
        assert_eq!(a.len(), 7);
        assert!(a.scores.iter().all(|&x| x >= 0.0 && x.is_finite()), "{v}");
        let again = combine_variant(a.components.as_ref().unwrap(), *v, cfg.beta, cfg.gamma);
        for (x, y) in a.scores.iter().zip(&again) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn single_window_matches_unwindowed() {
    let m = model(3);
    let full = attribute(&m, &seq(), &small()).unwrap();
    let win = attribute(&m, &seq(), &small().with_variant(Variant::Win)).unwrap();
    assert_eq!(win.components.as_ref().unwrap().visits, Some(vec![1; 7]));
    for (a, b) in full.scores.iter().zip(&win.scores) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn window_layout() {
    assert_eq!(windows(8, 4, 2).unwrap(), vec![(0, 4), (2, 6), (4, 8)]);
    assert_eq!(windows(3, 4, 2).unwrap(), vec![(0, 3)]);
    assert_eq!(windows(9, 4, 2).unwrap(), vec![(0, 4), (2, 6), (4, 8), (6, 9)]);
    assert!(windows(8, 1, 1).is_err());
    assert!(windows(8, 4, 5).is_err());
    assert!(windows(8, 4, 0).is_err());
}

#[test]
fn interior_tokens_visited_twice_at_half_overlap() {
    let m = model(4);
    let t = TokenSequence::new((0..13).map(|k| k % 12).collect(), 12).unwrap();
    let cfg = HetaConfig {
        window: 4,
        ..small().with_variant(Variant::Win)
    };
    let d = attribute_windowed_detailed(&m, &t, &cfg).unwrap();
    let visits = d.attribution.components.as_ref().unwrap().visits.clone().unwrap();
    assert_eq!(&visits[..2], &[1, 1]);
    assert!(visits[2..10].iter().all(|&c| c == 2), "{visits:?}");
    assert_eq!(d.windows.len(), 5);
    assert!((0.0..=1.0).contains(&d.leakage));
    for w in &d.windows {
        let inside: f64 = (w.start..w.end).map(|i| w.gate[i]).sum();
        assert!(inside == 0.0 || (inside - 1.0).abs() < 1e-12);
    }
}

#[test]
fn single_token_span_is_the_plain_attribution() {
    let m = model(5);
    let t = seq();
    let plain = attribute(&m, &t, &small()).unwrap();
    let span = attribute_span(&m, &t.ids, t.target, 1, &small()).unwrap();
    assert_eq!(plain.scores, span.scores);
    assert!(attribute_span(&m, &t.ids, 0, 1, &small()).is_err());
    assert!(attribute_span(&m, &t.ids, 5, 9, &small()).is_err());
}

#[test]
fn span_sums_targets() {
    let m = model(6);
    let ids = seq().ids;
    let span = attribute_span(&m, &ids, 5, 3, &small()).unwrap();
    assert_eq!(span.len(), 7);
    let mut expect = vec![0.0; 7];
    for t in 5..8 {
        let a = attribute(&m, &TokenSequence::new(ids[..=t].to_vec(), t).unwrap(), &small()).unwrap();
        for (e, s) in expect.iter_mut().zip(&a.scores) {
            *e += s;
        }
    }
    assert_eq!(span.scores, expect);
}

#[test]
fn fit_recovers_pure_hessian() {
    let samples: Vec<FitSample> = (0..20)
        .map(|k| {
            let s = 0.1 * k as f64;
            let i = ((k * 7) % 5) as f64 * 0.3;
            FitSample {
                gated_s: s,
                gated_i: i,
                delta_g: s,
            }
        })
        .collect();
    let fit = fit_weights(&samples).unwrap();
    assert!((fit.beta - 1.0).abs() < 1e-9 && fit.gamma.abs() < 1e-9, "{fit:?}");
    assert!(!fit.collinear);
    let grid = fit_weights_grid(&samples, &BETA_GRID).unwrap();
    assert_eq!(grid.beta, 1.0);
    assert_eq!(grid.curve.len(), 5);
}

#[test]
fn fit_flags_collinear_features() {
    let samples: Vec<FitSample> = (1..6)
        .map(|k| FitSample {
            gated_s: k as f64,
            gated_i: 2.0 * k as f64,
            delta_g: 3.0 * k as f64,
        })
        .collect();
    let fit = fit_weights(&samples).unwrap();
    assert!(fit.collinear);
    assert!(fit.loss < 1e-20);
}

#[test]
fn config_round_trips() {
    let cfg = HetaConfig {
        variant: Variant::LrWin,
        layer_subset: Some(vec![1]),
        ..Default::default()
    };
    let s = serde_json::to_string(&cfg).unwrap();
    assert!(s.contains("\"lr+win\""));
    let back: HetaConfig = serde_json::from_str(&s).unwrap();
    assert_eq!(back, cfg);
    assert_eq!("Hessian-Only".parse::<Variant>().unwrap(), Variant::HessianOnly);
}

#[test]
fn embedding_entry_point_matches_token_entry_point() {
    let m = model(21);
    let t = seq();
    let x = m.embed(t.context()).unwrap();
    assert_eq!(attribute_at(&m, &x, &t, &small()).unwrap(), attribute(&m, &t, &small()).unwrap());
    assert!(attribute_at(&m, &x, &t, &small().with_variant(Variant::Win)).is_err());
    let short = Tensor::zeros(&[3, 8]);
    assert!(attribute_at(&m, &short, &t, &small()).is_err());
}
