use proptest::prelude::*;
use spikefuse::data::{generate_dataset, SynthConfig};
use spikefuse::energy::{count_flops_named, model_energy, sops, LayerKind, LayerProfile, E_AC_PJ, E_MAC_PJ};
use spikefuse::model::{Model, ModelConfig};

fn kind_strategy() -> impl Strategy<Value = LayerKind> {
    prop_oneof![
        Just(LayerKind::SnnConv),
        Just(LayerKind::SnnFc),
        Just(LayerKind::Ssa),
        Just(LayerKind::FftIfft),
        Just(LayerKind::Ssm),
    ]
}

fn profile_strategy() -> impl Strategy<Value = LayerProfile> {
    (kind_strategy(), 0.0f64..1e7, 0.0f64..=1.0, 1usize..32).prop_map(|(kind, flops, firing_rate, timesteps)| {
        LayerProfile { name: format!("{kind}"), kind, flops, firing_rate, timesteps }
    })
}

fn first(flops: f64) -> LayerProfile {
    LayerProfile { name: "embed".into(), kind: LayerKind::FirstLp, flops, firing_rate: 0.3, timesteps: 8 }
}

proptest! {
    #[test]
    fn total_is_additive_over_layers(
        a in proptest::collection::vec(profile_strategy(), 0..6),
        b in proptest::collection::vec(profile_strategy(), 0..6),
    ) {
        let (ra, rb) = (model_energy(&a).unwrap(), model_energy(&b).unwrap());
        let joined: Vec<_> = a.iter().chain(&b).cloned().collect();
        let r = model_energy(&joined).unwrap();
        prop_assert!((r.total_pj - (ra.total_pj + rb.total_pj)).abs() <= 1e-9 * r.total_pj.max(1.0));
        prop_assert!((r.total_sops - (ra.total_sops + rb.total_sops)).abs() <= 1e-9 * r.total_sops.max(1.0));
    }

    #[test]
    fn energy_scales_linearly_with_operations(layers in proptest::collection::vec(profile_strategy(), 1..6), k in 0.0f64..10.0) {
        let base = model_energy(&layers).unwrap();
        let scaled: Vec<_> = layers.iter().map(|p| LayerProfile { flops: p.flops * k, ..p.clone() }).collect();
        let r = model_energy(&scaled).unwrap();
        prop_assert!((r.total_pj - k * base.total_pj).abs() <= 1e-9 * r.total_pj.max(1.0));
    }

    #[test]
    fn report_matches_the_cost_formula(
        layers in proptest::collection::vec(profile_strategy(), 0..6),
        embed in proptest::option::of(0.0f64..1e6),
    ) {
        let mut all = layers.clone();
        all.extend(embed.map(first));
        let r = model_energy(&all).unwrap();
        let sop: f64 = layers.iter().map(|p| p.firing_rate * p.timesteps as f64 * p.flops).sum();
        let want = E_MAC_PJ * embed.unwrap_or(0.0) + E_AC_PJ * sop;
        prop_assert!((r.total_pj - want).abs() <= 1e-9 * want.max(1.0));
        prop_assert!((r.total_pj - r.row_sum_pj()).abs() <= 1e-9 * want.max(1.0));
        prop_assert!((r.mac_pj + r.ac_pj - r.total_pj).abs() <= 1e-9 * want.max(1.0));
    }
}

#[test]
fn first_projection_ignores_firing_rate() {
    let a = model_energy(&[first(1000.0)]).unwrap();
    let b = model_energy(&[LayerProfile { firing_rate: 0.0, ..first(1000.0) }]).unwrap();
    assert_eq!(a.total_pj, b.total_pj);
    assert_eq!(a.total_pj, 4600.0);
    assert_eq!(a.total_sops, 0.0);
}

#[test]
fn flop_counts_follow_layer_shapes() {
    assert_eq!(count_flops_named("matmul", &[2, 3, 4]).unwrap(), 48.0);
    assert_eq!(count_flops_named("conv", &[2, 3, 3, 10]).unwrap(), 360.0);
    assert_eq!(count_flops_named("dft", &[16]).unwrap(), 2048.0);
    assert_eq!(count_flops_named("ssm", &[8, 4, 16]).unwrap(), 2560.0);
    assert!(count_flops_named("matmul", &[2, 3]).is_err());
    assert!(count_flops_named("lstm", &[1]).is_err());
    assert!(sops(0.5, 0, 1.0).is_err());
}

#[test]
fn model_report_is_consistent() {
    let cfg = ModelConfig::toy(4);
    let data = generate_dataset(&SynthConfig::toy(4, 1), 2).unwrap();
    let (model, store) = Model::new(cfg, 0).unwrap();
    let batch = data.batch(&[0, 1, 2, 3]).unwrap();
    let r = model.energy(&store, &batch).unwrap();
    assert_eq!(r.rows.iter().filter(|row| row.kind == LayerKind::FirstLp).count(), 1);
    assert!(r.rows.iter().all(|row| (0.0..=1.0).contains(&row.firing_rate)));
    assert!(r.total_pj > 0.0 && r.mac_pj > 0.0);
    assert!((r.total_pj - r.row_sum_pj()).abs() <= 1e-9 * r.total_pj);
    // Inference-only report: repeated calls agree bit for bit.
    assert_eq!(r, model.energy(&store, &batch).unwrap());
}
