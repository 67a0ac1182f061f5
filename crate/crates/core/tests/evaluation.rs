use dccm::data::{generate_blobs, BlobsSpec};
use dccm::evaluate::{probe_features, ProbeSettings};
use dccm::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn project(x: &Tensor, out: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = x.row_len();
    let w: Vec<f64> = (0..d * out).map(|_| StandardNormal.sample(&mut rng)).collect();
    let rows: Vec<Vec<f64>> = (0..x.rows())
        .map(|i| (0..out).map(|o| (0..d).map(|j| x.row(i)[j] * w[j * out + o]).sum()).collect())
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn probe_on_random_projection_beats_chance() {
    let train = generate_blobs(&BlobsSpec { per_cluster: 60, seed: 5, ..Default::default() }).unwrap();
    // even/odd split of one draw, so both halves share centres
    let idx: Vec<usize> = (0..train.len()).collect();
    let (tr, te): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| i % 2 == 0);
    let (a, b) = (train.subset(&tr), train.subset(&te));
    let fa = project(a.samples(), 8, 9);
    let fb = project(b.samples(), 8, 9);
    let acc = probe_features(
        &fa,
        a.ground_truth().unwrap().labels(),
        &fb,
        b.ground_truth().unwrap().labels(),
        &ProbeSettings { epochs: 30, ..Default::default() },
    )
    .unwrap();
    assert!(acc > 0.25 + 0.1, "probe accuracy {acc}");
}
