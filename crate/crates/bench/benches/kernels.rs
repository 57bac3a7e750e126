use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::Array2;
use sync_core::domain_stream::{generate_circle, sequence_batches, split_domains};
use sync_core::nn::Adam;
use sync_core::objectives::{evaluate_batch, mws_entropy, ForwardOptions};
use sync_core::stochastic::{gumbel_khot, Noise};
use sync_core::trainer::TrainConfig;
use sync_core::{GaussianPosterior, NoiseMode, SplitSpec, SyncModel};

/// One optimizer step on a default-size circle batch (15 domains x 64).
fn train_step(c: &mut Criterion) {
    let seq = generate_circle(30, 128, 0).unwrap();
    let (src, _, _) = split_domains(&seq, &SplitSpec::default()).unwrap();
    let cfg = TrainConfig::circle();
    let mut model = SyncModel::new(cfg.model_dims(&src), 0).unwrap();
    let mut batcher = sequence_batches(&src, cfg.batch_size, 0).unwrap();
    let batch = batcher.epoch().next().unwrap();
    let opts = ForwardOptions {
        tau_contrastive: cfg.tau_contrastive,
        dataset_size: src.min_domain_size(),
        straight_through: true,
    };
    let mut opt = Adam::new(&model.store, cfg.learning_rate, 0.9, 0.999, 1e-8).with_clip(cfg.grad_clip);
    let mut step = 0u64;
    c.bench_function("train_step/circle_b64_t15", |b| {
        b.iter(|| {
            step += 1;
            let mut noise = Noise::new(NoiseMode::Stochastic, step);
            let (loss, grads, _) = evaluate_batch(&model, &batch, &mut noise, &opts, cfg.alpha1, cfg.alpha2).unwrap();
            opt.step(&mut model.store, &grads);
            black_box(loss.total)
        })
    });
}

fn khot(c: &mut Criterion) {
    let scores: Vec<f64> = (0..32).map(|i| ((i * 37) % 11) as f64 * 0.3).collect();
    let mut noise = Noise::new(NoiseMode::Stochastic, 1);
    c.bench_function("gumbel_khot/n32_k19", |b| {
        b.iter(|| black_box(gumbel_khot(black_box(&scores), 19, 0.5, &mut noise).unwrap()))
    });
}

fn mws(c: &mut Criterion) {
    let mut group = c.benchmark_group("mws_entropy");
    for &b in &[64usize, 512] {
        let n = 20;
        let mu = Array2::from_shape_fn((b, n), |(i, j)| ((i * 7 + j * 3) % 13) as f64 / 13.0 - 0.5);
        let post = GaussianPosterior::new(mu.clone(), Array2::from_elem((b, n), 0.3)).unwrap();
        group.bench_function(format!("b{b}_n{n}"), |bench| {
            bench.iter_batched(
                || mu.clone(),
                |z| black_box(mws_entropy(&z, &post, 1000).unwrap()),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, train_step, khot, mws);
criterion_main!(benches);
