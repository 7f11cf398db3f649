mod common;

use common::config_matrix;
use dimprune::cost::{measured_cost, mlp_cost, model_cost, msa_cost, wmsa_cost, CostConvention};
use dimprune::{Backbone, BackboneConfig};
use proptest::prelude::*;

const PLAIN: CostConvention = CostConvention {
    mac_factor: 1,
    include_bias: false,
    include_rpb: false,
    include_norms_and_head: true,
};

#[test]
fn closed_form_equals_measured_for_every_entry() {
    for (i, cfg) in config_matrix().iter().enumerate() {
        let model = Backbone::init(cfg, i as u64).unwrap();
        let measured = measured_cost(&model).unwrap();
        let closed = model_cost(cfg, 1.0, &CostConvention::runtime(cfg)).unwrap();
        assert_eq!(model.parameter_count() as u64, measured.total.params);
        let labels = |r: &dimprune::cost::CostReport| r.entries.iter().map(|e| e.label.clone()).collect::<Vec<_>>();
        // Closed form may itemize zero-size entries the model has no tensor for.
        let nonzero: Vec<_> = closed.entries.iter().filter(|e| e.params + e.flops > 0).collect();
        assert_eq!(
            labels(&measured),
            nonzero.iter().map(|e| e.label.clone()).collect::<Vec<_>>(),
            "config {i}"
        );
        for (m, c) in measured.entries.iter().zip(nonzero) {
            assert_eq!(
                (m.params, m.flops, m.prunable),
                (c.params, c.flops, c.prunable),
                "config {i} {}",
                m.label
            );
        }
        assert_eq!(measured.total, closed.total, "config {i}");
    }
}

#[test]
fn prunable_terms_are_linear_in_rho() {
    for cfg in config_matrix() {
        let full = model_cost(&cfg, 1.0, &CostConvention::default()).unwrap();
        let even = (0..cfg.num_stages()).all(|s| cfg.head_dim(s) % 2 == 0 && cfg.mlp_hidden(s) % 2 == 0);
        if !even {
            continue;
        }
        let half = model_cost(&cfg, 0.5, &CostConvention::default()).unwrap();
        assert_eq!(half.overhead, full.overhead);
        assert_eq!(2 * half.prunable.params, full.prunable.params);
        assert_eq!(2 * half.prunable.flops, full.prunable.flops);
    }
}

#[test]
fn mac_factor_two_doubles_flops_only() {
    let cfg = BackboneConfig::swin_tiny(100);
    let one = model_cost(&cfg, 0.6, &CostConvention::default()).unwrap();
    let two = model_cost(
        &cfg,
        0.6,
        &CostConvention {
            mac_factor: 2,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(two.total.flops, 2 * one.total.flops);
    assert_eq!(two.total.params, one.total.params);
}

#[test]
fn single_window_reduces_to_msa() {
    for (n_side, d, h) in [(4, 8, 2), (7, 96, 3), (2, 6, 3)] {
        let n = n_side * n_side;
        for rho in [1.0, 0.5] {
            assert_eq!(
                wmsa_cost(n, d, h, n_side, rho, &PLAIN).unwrap(),
                msa_cost(n, d, h, rho, &PLAIN).unwrap()
            );
        }
    }
}

#[test]
fn small_hand_cases() {
    assert_eq!(wmsa_cost(16, 4, 2, 2, 1.0, &PLAIN).unwrap().flops, 1536);
    assert_eq!(mlp_cost(1, 2, 4, 1.0, &PLAIN).unwrap().params, 16);
    let half = mlp_cost(3, 2, 4, 0.5, &PLAIN).unwrap();
    let full = mlp_cost(3, 2, 4, 1.0, &PLAIN).unwrap();
    assert_eq!((2 * half.params, 2 * half.flops), (full.params, full.flops));
}

#[test]
fn swin_tiny_unpruned_row() {
    let r = model_cost(&BackboneConfig::swin_tiny(100), 1.0, &CostConvention::default()).unwrap();
    assert!(
        (r.total.params as f64 / 27.60e6 - 1.0).abs() < 0.01,
        "{}",
        r.total.params
    );
    assert!((r.total.flops as f64 / 4.49e9 - 1.0).abs() < 0.05, "{}", r.total.flops);
    assert_eq!(r.total.params - r.backbone.params, 768 * 100 + 100);
}

#[test]
fn site_records_cover_every_entry() {
    let cfg = config_matrix().remove(0);
    let r = model_cost(&cfg, 0.5, &CostConvention::default()).unwrap();
    let recs = r.site_records();
    assert_eq!(recs.len(), r.entries.len());
    for (rec, e) in recs.iter().zip(&r.entries) {
        assert_eq!(rec["site_id"], e.label.as_str());
        assert_eq!(rec["params"], e.params);
        assert_eq!(rec["flops"], e.flops);
    }
    let sum: u64 = recs.iter().map(|v| v["params"].as_u64().unwrap()).sum();
    assert_eq!(sum, r.total.params);
}

#[test]
fn invalid_inputs_rejected() {
    assert!(msa_cost(4, 4, 2, 0.0, &PLAIN).is_err());
    assert!(msa_cost(4, 4, 2, 1.1, &PLAIN).is_err());
    let bad = CostConvention { mac_factor: 3, ..PLAIN };
    assert!(mlp_cost(4, 4, 8, 1.0, &bad).is_err());
    let mut cfg = BackboneConfig::desk();
    cfg.heads = vec![3, 4];
    assert!(model_cost(&cfg, 1.0, &PLAIN).is_err());
}

proptest! {
    #[test]
    fn windows_beat_global_attention(m in 1usize..8, k in 2usize..6, dh in 1usize..16, h in 1usize..6, rho in 0.05f64..=1.0) {
        let n = (m * k) * (m * k);
        let d = dh * h;
        let w = wmsa_cost(n, d, h, m, rho, &PLAIN).unwrap();
        let g = msa_cost(n, d, h, rho, &PLAIN).unwrap();
        prop_assert!(w.flops < g.flops);
        prop_assert_eq!(w.params, g.params);
    }

    #[test]
    fn totals_are_sums_of_entries(which in 0usize..12, rho in 0.05f64..=1.0, bias: bool, rpb: bool, nh: bool) {
        let cfg = &config_matrix()[which];
        let conv = CostConvention { mac_factor: 1, include_bias: bias, include_rpb: rpb, include_norms_and_head: nh };
        let r = model_cost(cfg, rho, &conv).unwrap();
        let params: u64 = r.entries.iter().map(|e| e.params).sum();
        let flops: u64 = r.entries.iter().map(|e| e.flops).sum();
        prop_assert_eq!((params, flops), (r.total.params, r.total.flops));
        prop_assert_eq!(r.prunable.params + r.overhead.params, r.total.params);
    }
}
