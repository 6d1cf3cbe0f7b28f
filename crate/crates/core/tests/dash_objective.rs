mod common;

use common::dash_oracle::*;
use common::{grad_check, randn, rng};
use proptest::prelude::*;
use psgalign::autodiff::{Graph, Tensor, TensorError};
use psgalign::dash::*;
use psgalign::{Gender, SubjectMeta};
use rand::Rng;

#[test]
fn similarity_examples() {
    let g = |v: Vec<f64>, shape: &[usize]| Tensor::new(shape, v).unwrap();
    let s = similarity(&g(vec![1.0, 0.0], &[1, 1, 2]), &g(vec![0.0, 1.0], &[1, 1, 2])).unwrap();
    assert_eq!(s.data(), &[0.0]);
    let x = randn(&mut rng(1), &[3, 4, 5]);
    let s = similarity(&x, &x).unwrap();
    for i in 0..3 {
        for t in 0..4 {
            assert!((s.get(&[i, i, t]) - 1.0).abs() < 1e-12);
        }
    }
    assert!(s.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
    let z = Tensor::zeros(&[1, 1, 2]);
    assert_eq!(similarity(&z, &z), Err(DashError::ZeroVector));
}

#[test]
fn similarity_matches_double_loop() {
    let mut r = rng(2);
    for _ in 0..20 {
        let (a, b) = (randn(&mut r, &[5, 3, 7]), randn(&mut r, &[5, 3, 7]));
        let s = similarity(&a, &b).unwrap();
        let o = naive_sim(&a, &b);
        for i in 0..5 {
            for j in 0..5 {
                for t in 0..3 {
                    assert!((s.get(&[i, j, t]) - o[i][j][t]).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn infonce_examples() {
    let s = Tensor::new(&[1, 1, 3], vec![0.3, -0.2, 0.9]).unwrap();
    assert_eq!(base_infonce(&s, 0.2, &[0]), 0.0);
    let b = 6;
    let s = Tensor::full(&[b, b, 2], 0.4);
    assert!((base_infonce(&s, 0.2, &identity_pairing(b)) - (b as f64).ln()).abs() < 1e-12);
}

#[test]
fn losses_match_naive_oracles() {
    let mut r = rng(3);
    let cfg = one_way();
    for _ in 0..100 {
        let b = r.random_range(1..=8);
        let l = r.random_range(1..=4);
        let d = r.random_range(2..=16);
        let nights = r.random_range(1..=b);
        let batch = random_batch(&mut r, b, l, d, nights);
        let s = similarity(&batch.emb_a, &batch.emb_b).unwrap();
        let o = naive_sim(&batch.emb_a, &batch.emb_b);
        let pi = identity_pairing(b);
        assert!((base_infonce(&s, cfg.tau, &pi) - naive_infonce(&o, cfg.tau)).abs() <= 1e-10);
        let (omega, h) = naive_weights(&batch.metas, &cfg);
        let want = naive_loss(&o, &omega, &h, cfg.margin, cfg.tau);
        assert!((dash_loss(&batch, &cfg).unwrap() - want).abs() <= 1e-10);
    }
}

#[test]
fn bidirectional_averages_both_directions() {
    let mut r = rng(4);
    let batch = random_batch(&mut r, 6, 3, 8, 3);
    let cfg = DashConfig::default();
    let swapped = AnchorBatch::new(batch.emb_b.clone(), batch.emb_a.clone(), batch.metas.clone());
    let both = dash_loss(&batch, &cfg).unwrap();
    let ab = dash_loss(&batch, &one_way()).unwrap();
    let ba = dash_loss(&swapped, &one_way()).unwrap();
    assert!((both - 0.5 * (ab + ba)).abs() < 1e-12);
}

#[test]
fn singleton_batch_loss_is_zero() {
    let mut r = rng(5);
    let batch = random_batch(&mut r, 1, 3, 4, 1);
    assert!(dash_loss(&batch, &DashConfig::default()).unwrap().abs() < 1e-15);
}

#[test]
fn age_kernel_and_weight_constants() {
    let cfg = DashConfig::default();
    // exp(-1) to 17 significant digits.
    assert!((kappa(Some(50.0), Some(70.0), &cfg) - 0.36787944117144233).abs() < 1e-15);
    assert_eq!(kappa(None, Some(70.0), &cfg), 0.5);
    let mut a = SubjectMeta::new("x");
    a.age = Some(60.0);
    a.gender = Gender::F;
    a.site = Some("s1".into());
    let mut b = a.clone();
    b.night_id = "y".into();
    assert!((raw_weight(&a, &b, false, &cfg) - 1.3).abs() < 1e-15);
    b.gender = Gender::M;
    b.site = None;
    assert!((raw_weight(&a, &b, false, &cfg) - 0.8 * 0.8).abs() < 1e-15);
}

#[test]
fn pseudo_negative_indicator_excludes_positive() {
    let metas: Vec<SubjectMeta> = ["a", "a", "b", "a"].iter().map(|n| SubjectMeta::new(*n)).collect();
    let w = compute_weights(&metas, &identity_pairing(4), &DashConfig::default());
    let h: Vec<bool> = (0..4).map(|j| w.h(0, j)).collect();
    assert_eq!(h, vec![false, true, false, true]);
    assert!((0..4).all(|i| !w.h(i, i)));
}

#[test]
fn reduction_identity_on_values() {
    let mut r = rng(6);
    let cfg = DashConfig { margin: 0.0, ..one_way() };
    for _ in 0..20 {
        let b = r.random_range(2..=8);
        let batch = random_batch(&mut r, b, 3, 8, b);
        let s = similarity(&batch.emb_a, &batch.emb_b).unwrap();
        let pi = identity_pairing(b);
        let dash = dash_loss_directional(&s, &WeightMatrix::uniform(b), &cfg, &pi, None);
        let diff = dash - (base_infonce(&s, cfg.tau, &pi) - (b as f64).ln());
        assert!(diff.abs() <= 1e-10, "{diff}");
    }
}

#[test]
fn reduction_identity_on_gradients() {
    let mut r = rng(7);
    for bidirectional in [false, true] {
        let cfg = DashConfig {
            margin: 0.0,
            bidirectional,
            ..DashConfig::default()
        };
        for _ in 0..10 {
            let b = r.random_range(2..=8);
            let (a, e) = (randn(&mut r, &[b, 3, 6]), randn(&mut r, &[b, 3, 6]));
            let metas = homogeneous(b);
            let pi = identity_pairing(b);
            let run = |obj: Objective| {
                let g = Graph::new();
                let (va, vb) = (g.leaf(a.clone()), g.leaf(e.clone()));
                let loss = contrastive_loss(va, vb, &metas, &pi, None, &cfg, obj).unwrap();
                let grads = g.backward(loss).unwrap();
                let ga = grads.wrt(va).unwrap().data().to_vec();
                let gb = grads.wrt(vb).unwrap().data().to_vec();
                (loss.item().unwrap(), ga, gb)
            };
            let (ld, gad, gbd) = run(Objective::Dash);
            let (li, gai, gbi) = run(Objective::InfoNce);
            assert!((ld - (li - (b as f64).ln())).abs() <= 1e-10);
            for (x, y) in gad.iter().chain(&gbd).zip(gai.iter().chain(&gbi)) {
                assert!((x - y).abs() <= 1e-8);
            }
        }
    }
}

#[test]
fn graph_loss_agrees_with_plain_loss() {
    let mut r = rng(8);
    for cfg in [one_way(), DashConfig::default()] {
        for _ in 0..10 {
            let b = r.random_range(2..=8);
            let batch = random_batch(&mut r, b, 4, 8, (b / 2).max(1));
            let g = Graph::new();
            let loss = contrastive_loss(
                g.leaf(batch.emb_a.clone()),
                g.leaf(batch.emb_b.clone()),
                &batch.metas,
                &batch.pairing,
                None,
                &cfg,
                Objective::Dash,
            )
            .unwrap();
            assert!((loss.item().unwrap() - dash_loss(&batch, &cfg).unwrap()).abs() < 1e-12);
        }
    }
}

fn as_tensor_err(e: DashError) -> TensorError {
    match e {
        DashError::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

#[test]
fn dash_gradient_matches_finite_differences() {
    let mut r = rng(9);
    let (b, l, d) = (8, 4, 16);
    let metas: Vec<SubjectMeta> = (0..b).map(|i| random_meta(&mut r, i / 2)).collect();
    let inputs = [randn(&mut r, &[b, l, d]), randn(&mut r, &[b, l, d])];
    let cfg = DashConfig::default();
    let pi = identity_pairing(b);
    let err = grad_check(&inputs, 1e-5, |_, v| {
        contrastive_loss(v[0], v[1], &metas, &pi, None, &cfg, Objective::Dash).map_err(as_tensor_err)
    });
    assert!(err <= 1e-4, "rel err {err}");
}

#[test]
fn margin_lowers_loss_with_pseudo_negatives() {
    let mut r = rng(10);
    // Two segments per night, so each anchor has a same-night negative.
    let batch = random_batch(&mut r, 8, 4, 8, 4);
    let at = |m: f64| dash_loss(&batch, &DashConfig { margin: m, ..one_way() }).unwrap();
    assert!(at(0.1) < at(0.0));
}

#[test]
fn masked_only_averages_selected_timesteps() {
    let mut r = rng(11);
    let mut batch = random_batch(&mut r, 4, 3, 6, 4);
    let cfg = DashConfig {
        loss_on_masked_only: true,
        ..one_way()
    };
    // Select only timestep 1 for every anchor.
    batch.anchor_mask = Some((0..12).map(|k| k % 3 == 1).collect());
    let s = similarity(&batch.emb_a, &batch.emb_b).unwrap();
    let w = compute_weights(&batch.metas, &batch.pairing, &cfg);
    let s1 = Tensor::new(&[4, 4, 1], (0..16).map(|k| s.data()[k * 3 + 1]).collect()).unwrap();
    let want = dash_loss_directional(&s1, &w, &cfg, &batch.pairing, None);
    assert!((dash_loss(&batch, &cfg).unwrap() - want).abs() < 1e-12);
    let g = Graph::new();
    let loss = contrastive_loss(
        g.leaf(batch.emb_a.clone()),
        g.leaf(batch.emb_b.clone()),
        &batch.metas,
        &batch.pairing,
        batch.anchor_mask.as_deref(),
        &cfg,
        Objective::Dash,
    )
    .unwrap();
    assert!((loss.item().unwrap() - want).abs() < 1e-12);
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        DashConfig { tau: 0.0, ..DashConfig::default() },
        DashConfig { gamma_diff: 1.0, ..DashConfig::default() },
        DashConfig { delta_diff: -0.1, ..DashConfig::default() },
        DashConfig { margin: -0.1, ..DashConfig::default() },
        DashConfig { epsilon: 0.0, ..DashConfig::default() },
    ] {
        assert!(matches!(cfg.validate(), Err(DashError::InvalidConfig(_))));
    }
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = DashConfig { margin: 0.25, ..DashConfig::default() };
    let text = toml::to_string(&cfg).unwrap();
    for key in ["tau", "sigma_age", "gamma_same", "gamma_diff", "delta_same", "delta_diff", "epsilon", "margin", "kappa_floor", "bidirectional"] {
        assert!(text.contains(&format!("{key} = ")), "{key} missing");
    }
    assert_eq!(toml::from_str::<DashConfig>(&text).unwrap(), cfg);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weight_rows_sum_to_one(seed in any::<u64>(), b in 1usize..12) {
        let mut r = rng(seed);
        let nights = r.random_range(1..=b);
        let metas: Vec<SubjectMeta> = (0..b).map(|i| random_meta(&mut r, i % nights)).collect();
        let w = compute_weights(&metas, &identity_pairing(b), &DashConfig::default());
        for i in 0..b {
            let row: f64 = (0..b).map(|j| w.omega(i, j)).sum();
            prop_assert!((row - 1.0).abs() <= 1e-12);
            prop_assert!((0..b).all(|j| w.omega(i, j) > 0.0));
        }
    }

    #[test]
    fn logit_shift_leaves_loss_unchanged(seed in any::<u64>(), c in -3.0f64..3.0) {
        let mut r = rng(seed);
        let batch = random_batch(&mut r, 5, 3, 6, 3);
        let cfg = one_way();
        let s = similarity(&batch.emb_a, &batch.emb_b).unwrap();
        let shifted = s.map(|v| v + c);
        let w = compute_weights(&batch.metas, &batch.pairing, &cfg);
        let base = dash_loss_directional(&s, &w, &cfg, &batch.pairing, None);
        let moved = dash_loss_directional(&shifted, &w, &cfg, &batch.pairing, None);
        prop_assert!((base - moved).abs() <= 1e-10);
    }

    #[test]
    fn loss_is_monotone_in_margin(seed in any::<u64>(), m1 in 0.0f64..0.5, dm in 0.001f64..0.5) {
        let mut r = rng(seed);
        let batch = random_batch(&mut r, 6, 2, 5, 3);
        let at = |m: f64| dash_loss(&batch, &DashConfig { margin: m, ..one_way() }).unwrap();
        prop_assert!(at(m1 + dm) < at(m1));
        let distinct = random_batch(&mut r, 6, 2, 5, 6);
        let at = |m: f64| dash_loss(&distinct, &DashConfig { margin: m, ..one_way() }).unwrap();
        prop_assert!(at(m1 + dm) <= at(m1) + 1e-15);
    }
}
