mod common;

use airseg_core::airmetrics::{branch_decompose, evaluate_pair, skeletonize_3d, EvalOptions};
use airseg_core::phantom::{generate_tree, overlapping_branches, PhantomSpec};
use common::oracle::{component_count, cylinder, is_subset};

#[test]
fn cylinder_skeleton_length_within_ten_percent() {
    for r in [2.0, 3.0] {
        let m = cylinder(15, 40, r);
        let s = skeletonize_3d(&m);
        assert_eq!(component_count(&s.to_mask(), true), 1);
        let len = s.total_length();
        assert!((len - 40.0).abs() <= 4.0, "radius {r}: length {len}");
        let dec = branch_decompose(&s);
        assert_eq!((dec.endpoints, dec.junctions, dec.branches.len()), (2, 0, 1));
    }
}

#[test]
fn y_and_depth_three_phantoms_have_generator_topology() {
    for depth in [2, 3] {
        for seed in 0..5 {
            let spec = PhantomSpec {
                depth,
                seed,
                ..PhantomSpec::default()
            };
            let truth = generate_tree(&spec).unwrap();
            assert!(overlapping_branches(&truth.record).is_empty());
            assert_eq!(truth.record.branches.len(), (1 << depth) - 1);
            let s = skeletonize_3d(&truth.mask);
            assert!(is_subset(&s.to_mask(), &truth.mask));
            let dec = branch_decompose(&s);
            // The root start is an endpoint too, so endpoints = leaves + 1.
            assert_eq!(dec.endpoints, truth.leaves() + 1, "depth {depth} seed {seed}");
            assert_eq!(dec.junctions, truth.record.junctions.len(), "depth {depth} seed {seed}");
            let branch_sum: f64 = dec.branches.iter().map(|b| b.length_mm).sum();
            let rel = (branch_sum - truth.record.total_length_mm).abs() / truth.record.total_length_mm;
            assert!(rel <= 0.10, "depth {depth} seed {seed}: {branch_sum} vs {}", truth.record.total_length_mm);
        }
    }
}

#[test]
fn phantoms_are_bit_identical_for_a_seed() {
    let spec = PhantomSpec::default();
    let a = generate_tree(&spec).unwrap();
    let b = generate_tree(&spec).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    let c = generate_tree(&PhantomSpec { seed: 1, ..spec }).unwrap();
    assert_ne!(a.mask, c.mask);
}

#[test]
fn perfect_prediction_scores_one() {
    let truth = generate_tree(&PhantomSpec::default()).unwrap();
    let r = evaluate_pair("p", &truth.mask, &truth.mask, EvalOptions::default()).unwrap();
    assert_eq!((r.dice, r.fne, r.fpe, r.td, r.bd), (1.0, 0.0, 0.0, 1.0, 1.0));
    assert_eq!(r.gt_branches, truth.record.branches.len());
}
