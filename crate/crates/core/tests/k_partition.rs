mod common;

use common::*;
use dccm::graph_analysis::{find_k_partition_threshold, threshold_partition_sweep};
use dccm::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn every_k_partition_exists_and_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let n = rng.random_range(1..=10);
        let w = random_complete_graph(&mut rng, n);
        let t = Tensor::new(vec![n, n], w.concat()).unwrap();
        let sweep = threshold_partition_sweep(&t).unwrap();
        assert!(!sweep.perturbed);
        for k in 1..=n {
            let level = find_k_partition_threshold(&sweep, k).unwrap().expect("a K-partition threshold exists");
            let (t_oracle, labels) = k_partition_oracle(&w, k).expect("oracle finds one too");
            assert_eq!(level.components, k);
            assert_eq!(level.lo, t_oracle, "n {n} k {k}");
            assert_eq!(canonical(&level.assignment), labels, "n {n} k {k}");
        }
    }
}

#[test]
fn out_of_range_k_is_rejected() {
    let t = Tensor::new(vec![2, 2], vec![0.0, 0.5, 0.5, 0.0]).unwrap();
    let sweep = threshold_partition_sweep(&t).unwrap();
    assert!(find_k_partition_threshold(&sweep, 0).is_err());
    assert!(find_k_partition_threshold(&sweep, 3).is_err());
}
