use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pcuda_bench::{random_cloud, random_matrix};
use pcuda_core::augment::{weak_strong_pair, AugmentPolicy};
use pcuda_core::geometry::{farthest_point_sampling, knn, PointCloud};
use pcuda_core::model::{predict, EncoderConfig, ModelParams};

fn tensor_kernels(c: &mut Criterion) {
    let a = random_matrix(8192, 64, 1);
    let b = random_matrix(64, 128, 2);
    c.bench_function("matmul 8192x64 * 64x128", |bench| {
        bench.iter(|| black_box(a.matmul(&b).unwrap()))
    });
}

fn geometry_kernels(c: &mut Criterion) {
    let cloud = random_cloud(1024, 3);
    c.bench_function("fps 1024 -> 256", |bench| {
        bench.iter(|| black_box(farthest_point_sampling(&cloud, 256).unwrap()))
    });
    let small = random_cloud(256, 4);
    c.bench_function("knn k=8 over 256 points", |bench| {
        bench.iter(|| black_box(knn(&small, 8).unwrap()))
    });
}

fn augment_kernels(c: &mut Criterion) {
    let cloud = random_cloud(256, 5);
    let policy = AugmentPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    c.bench_function("weak/strong pair of 256 points", |bench| {
        bench.iter(|| black_box(weak_strong_pair(&cloud, &policy, &mut rng).unwrap()))
    });
}

fn encoder_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let clouds: Vec<PointCloud> = (0..32).map(|i| random_cloud(256, 100 + i)).collect();
    let refs: Vec<&PointCloud> = clouds.iter().collect();
    for (name, edge_conv) in [("pointwise", false), ("edge-conv", true)] {
        let config = EncoderConfig {
            edge_conv,
            ..Default::default()
        };
        let params = ModelParams::init(&config, &mut rng).unwrap();
        c.bench_function(&format!("predict 32 clouds, {name} encoder"), |bench| {
            bench.iter(|| black_box(predict(&params, &refs).unwrap()))
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = tensor_kernels, geometry_kernels, augment_kernels, encoder_forward
}
criterion_main!(benches);
