mod common;

use animator_core::attention::{build_mask, AttentionMode, SegmentLayout};
use common::oracles::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn per_instance_mode_matches_scalar_reference() {
    let worst = measure_attention_oracle(AttentionMode::PerInstance, 20, &[1, 2, 3], 11);
    assert!(worst < 1e-5, "{worst}");
}

#[test]
fn unified_mode_matches_scalar_reference() {
    let worst = measure_attention_oracle(AttentionMode::Unified, 20, &[0, 1, 2, 3], 12);
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn instance_outputs_ignore_other_instances_inputs() {
    for mode in [AttentionMode::Unified, AttentionMode::PerInstance] {
        let g = measure_cross_instance_gradient(mode, 4, 13);
        assert!(g <= 1e-7, "{mode:?}: {g}");
    }
}

#[test]
fn joint_outputs_do_depend_on_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let f = fixture(400, 8, 2);
    let layout = SegmentLayout::new(4, vec![2, 3]);
    let x = random_tokens(&mut rng, layout.total(), f.dim);
    for mode in [AttentionMode::Unified, AttentionMode::PerInstance] {
        let base = run(&f, &x, &layout, mode);
        let mut moved = x.clone();
        moved[5 * f.dim] += 0.5;
        let other = run(&f, &moved, &layout, mode);
        assert!(max_abs_diff(&base[..4 * f.dim], &other[..4 * f.dim]) > 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn unified_joint_rows_are_permutation_invariant(seed in 0u64..10_000, n in 2usize..5) {
        let (joint, rows) = measure_group_permutation(seed, n);
        prop_assert!(joint < 1e-6);
        // instance rows travel with their group
        prop_assert!(rows < 1e-6);
    }

    #[test]
    fn mask_counts_follow_group_sizes(joint in 1usize..20, groups in proptest::collection::vec(1usize..6, 0..5)) {
        let mask = build_mask(joint, &groups).unwrap();
        let total: usize = groups.iter().sum();
        let sq: usize = groups.iter().map(|g| g * g).sum();
        prop_assert_eq!(mask.size(), joint + total);
        prop_assert_eq!(mask.forbidden_count(), total * total - sq);
    }
}
