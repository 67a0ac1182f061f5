mod common;

use common::*;
use dccm::metrics::{ari, bcubed, hungarian_acc, nmi, Partition};

const TOL: f64 = 1e-9;

#[test]
fn metrics_match_brute_force_references() {
    for (a, b) in partition_pairs(2024) {
        let (pa, pb) = (Partition::from_labels(&a), Partition::from_labels(&b));
        let ctx = format!("pred {a:?} truth {b:?}");
        assert!((nmi(&pa, &pb).unwrap() - nmi_oracle(&a, &b)).abs() < TOL, "nmi {ctx}");
        assert!((ari(&pa, &pb).unwrap() - ari_oracle(&a, &b)).abs() < TOL, "ari {ctx}");
        assert!((hungarian_acc(&pa, &pb).unwrap() - acc_oracle(&a, &b)).abs() < TOL, "acc {ctx}");
        let (p, r) = bcubed(&pa, &pb).unwrap();
        let (po, ro) = bcubed_oracle(&a, &b);
        assert!((p - po).abs() < TOL && (r - ro).abs() < TOL, "bcubed {ctx}");
    }
}

#[test]
fn oracles_agree_on_hand_cases() {
    // two items swapped between two balanced classes
    let a = [0, 0, 0, 1, 1, 1];
    let b = [0, 0, 1, 1, 1, 0];
    assert!((acc_oracle(&a, &b) - 4.0 / 6.0).abs() < 1e-12);
    assert_eq!(ari_oracle(&a, &a), 1.0);
    assert_eq!(nmi_oracle(&a, &[5, 5, 5, 7, 7, 7]), 1.0);
    assert_eq!(bcubed_oracle(&[0, 1, 2], &[0, 0, 0]), (1.0, 1.0 / 3.0));
}
