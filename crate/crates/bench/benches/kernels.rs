use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nodule_cascade::eval::auc;
use nodule_cascade::nn::{Mode, Tensor};
use nodule_cascade::{rasterize_mask, ArchConfig, ArchId, Grid, MaskShape, Model, NoduleAnnotation};

fn forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let seg: Model<f32> = Model::new(ArchConfig::new(ArchId::Segmentation, 64, 64), 1).unwrap();
    let xs: Vec<f32> = (0..64 * 64).map(|_| rng.gen()).collect();
    let x = Tensor::from_nchw(1, 1, 64, 64, &xs).unwrap();
    c.bench_function("segmentation forward 64x64", |b| {
        b.iter(|| seg.forward(black_box(&x), Mode::Inference).unwrap())
    });

    let cls: Model<f32> = Model::new(ArchConfig::new(ArchId::Classifier, 64, 64), 1).unwrap();
    let xs: Vec<f32> = (0..16 * 2 * 64 * 64).map(|_| rng.gen()).collect();
    let x = Tensor::from_nchw(16, 2, 64, 64, &xs).unwrap();
    c.bench_function("classifier forward 16x2x64x64", |b| {
        b.iter(|| cls.forward(black_box(&x), Mode::Inference).unwrap())
    });
}

fn rasterize(c: &mut Criterion) {
    let grid = Grid::new([64, 64, 32], [-40.0, -40.0, -50.0], [1.25, 1.25, 3.0]).unwrap();
    let findings = vec![
        NoduleAnnotation::new("a", [0.0, 0.0, 0.0], 20.0).unwrap(),
        NoduleAnnotation::new("a", [15.0, -10.0, 12.0], 8.0).unwrap(),
    ];
    c.bench_function("rasterize ball 64x64x32", |b| {
        b.iter(|| rasterize_mask(black_box(&grid), &findings, MaskShape::Ball))
    });
}

fn roc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 64 * 64 * 100;
    let scores: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    let truths: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.01)).collect();
    c.bench_function("auc 409600 pixels", |b| b.iter(|| auc(black_box(&scores), &truths).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = forward, rasterize, roc
}
criterion_main!(benches);
