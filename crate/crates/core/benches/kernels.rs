//! Kernel and training-step benchmarks. Run once per backend and compare:
//!
//! ```text
//! cargo bench -p condseg --bench kernels
//! cargo bench -p condseg --bench kernels --no-default-features
//! ```
//!
//! Benchmark ids carry the backend name (`rayon` or `sequential`), so both
//! runs land side by side in `target/criterion`.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use condseg::conditioning::ConditioningVector;
use condseg::evaluation::dice_score;
use condseg::grid::Grid3;
use condseg::networks::{Architecture, BackboneConfig, SegmentationModel, Variant};
use condseg::nn::ops::{conv2d, conv2d_backward};
use condseg::nn::ConvShape;
use condseg::par;
use condseg::tensor::Tensor;
use condseg::training::focal_loss_with_grad;

fn tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .unwrap()
}

fn convolution(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = c.benchmark_group(format!("conv3x3/{}", par::MODE));
    g.sample_size(20);
    for &(ch, size) in &[(32usize, 112usize), (64, 56), (256, 14)] {
        let shape = ConvShape {
            in_channels: ch,
            out_channels: ch,
            kernel: 3,
        };
        let x = tensor(&mut rng, 4, ch, size, size);
        let w: Vec<f32> = (0..shape.weight_len()).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let y = conv2d(&x, shape, &w, None);
        let id = format!("{ch}ch_{size}px");
        g.bench_function(BenchmarkId::new("forward", &id), |b| {
            b.iter(|| conv2d(black_box(&x), shape, &w, None))
        });
        g.bench_function(BenchmarkId::new("backward", &id), |b| {
            b.iter(|| conv2d_backward(black_box(&x), shape, &w, &y))
        });
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = c.benchmark_group(format!("train_step/{}", par::MODE));
    g.sample_size(10);
    let bb = BackboneConfig {
        base_channels: 8,
        ..Default::default()
    };
    for v in [Variant::Baseline, Variant::FilmDecoder] {
        let model = SegmentationModel::<f32>::new(bb, v.fusion(Architecture::Unet), 0).unwrap();
        let x = tensor(&mut rng, 4, 1, 112, 112);
        let z = vec![ConditioningVector([3.0, 5.0, 4.0]); 4];
        let targets: Vec<u8> = (0..4 * 112 * 112).map(|_| rng.gen_range(0..4)).collect();
        g.bench_function(BenchmarkId::new("unet_base8_112px_batch4", v.id()), |b| {
            b.iter(|| {
                let (logits, tape) = model.forward_train(&x, &z).unwrap();
                let (_, d) = focal_loss_with_grad(&logits, &targets, 0.5).unwrap();
                model.backward(&tape, &d)
            })
        });
    }
    g.finish();
}

fn dice(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let vols: Vec<(Grid3<u8>, Grid3<u8>)> = (0..16)
        .map(|_| {
            let mut v = || Grid3::new(10, 224, 224, (0..10 * 224 * 224).map(|_| rng.gen_range(0..4)).collect()).unwrap();
            (v(), v())
        })
        .collect();
    c.bench_function(&format!("dice_16_volumes/{}", par::MODE), |b| {
        b.iter(|| {
            par::map_slice(&vols, |(p, t)| {
                (1..=3).map(|k| dice_score(p, t, k).unwrap()).sum::<f64>()
            })
        })
    });
}

criterion_group!(benches, convolution, train_step, dice);
criterion_main!(benches);
