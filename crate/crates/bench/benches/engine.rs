use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use dccm::autodiff::Graph;
use dccm::correlation::SimilarityMatrix;
use dccm::data::{generate_blobs, BlobsSpec};
use dccm::experiment::{DatasetSpec, ExperimentConfig};
use dccm::graph_analysis::threshold_partition_sweep;
use dccm::metrics::{ari, hungarian_acc, nmi, Partition};
use dccm::model::{EncoderConfig, EncoderState};
use dccm::train::Trainer;
use dccm::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn forward_backward(enc: &EncoderState, x: &Tensor) {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = enc.forward(&mut g, xv).unwrap();
    let loss = g.sum(out.z).unwrap();
    black_box(g.backward(loss).unwrap());
}

fn encoders(c: &mut Criterion) {
    let mlp = EncoderState::init(EncoderConfig::mlp(16, 4, 0)).unwrap();
    let x = random(&[32, 16], 1);
    c.bench_function("mlp forward+backward b32", |b| b.iter(|| forward_backward(&mlp, &x)));

    let conv = EncoderState::init(EncoderConfig::conv([3, 16, 16], 4, 0)).unwrap();
    let xi = random(&[8, 3, 16, 16], 2);
    c.bench_function("conv forward+backward b8 3x16x16", |b| b.iter(|| forward_backward(&conv, &xi)));
}

fn training_step(c: &mut Criterion) {
    let spec = BlobsSpec::default();
    let ds = generate_blobs(&spec).unwrap();
    let cfg = ExperimentConfig { dataset: DatasetSpec::Blobs(spec), ..Default::default() };
    let trainer = Trainer::new(cfg, &ds).unwrap();
    let x = ds.batch(&(0..32).collect::<Vec<_>>());
    c.bench_function("full objective step b32", |b| {
        b.iter_batched(|| trainer.clone(), |mut t| black_box(t.step(&x).unwrap()), BatchSize::SmallInput)
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Vec<usize> = (0..1000).map(|_| rng.random_range(0..10)).collect();
    let b: Vec<usize> = (0..1000).map(|_| rng.random_range(0..10)).collect();
    let (pa, pb) = (Partition::from_labels(&a), Partition::from_labels(&b));
    c.bench_function("nmi n1000", |bn| bn.iter(|| nmi(&pa, &pb).unwrap()));
    c.bench_function("ari n1000", |bn| bn.iter(|| ari(&pa, &pb).unwrap()));
    c.bench_function("hungarian acc n1000 k10", |bn| bn.iter(|| hungarian_acc(&pa, &pb).unwrap()));

    let z = random(&[200, 10], 4).map(f64::abs);
    let s = SimilarityMatrix::of(&z).unwrap().to_tensor();
    c.bench_function("threshold sweep n200", |bn| bn.iter(|| threshold_partition_sweep(&s).unwrap()));
}

criterion_group!(benches, encoders, training_step, metrics);
criterion_main!(benches);
