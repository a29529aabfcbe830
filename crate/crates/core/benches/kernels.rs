//! Data-parallel kernels. Run once with default features and once with
//! `--no-default-features` to compare rayon against the sequential build;
//! the group names carry the mode.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use maskguide::parallel::prelude::*;
use maskguide::rejection::run_trials;
use maskguide::rng::{derive_seed, rng_from_seed};
use maskguide::sampler::{masksketch_sample, SamplerConfig};
use maskguide::structure::{scores_from_maps, LayerMaps};
use maskguide::tokens::{dataset::tokenize_sample, generate_dataset, Codebook, DataConfig, TokenGrid};
use maskguide::training::{loss_and_grads, mask_example};
use maskguide::transformer::{ArchConfig, LayerSet, TransformerModel};

const MODE: &str = if maskguide::parallel::is_parallel() { "rayon" } else { "sequential" };

fn model() -> TransformerModel<f32> {
    let cfg = ArchConfig {
        num_layers: 4,
        width: 32,
        ..ArchConfig::default()
    };
    TransformerModel::init(cfg, &mut rng_from_seed(1)).unwrap()
}

fn grids(n: usize) -> Vec<TokenGrid> {
    let data = DataConfig {
        num_samples: n,
        ..DataConfig::default()
    };
    let codebook = Codebook::binary4();
    generate_dataset(&data, 2)
        .unwrap()
        .iter()
        .map(|s| tokenize_sample(s, &codebook).unwrap().0)
        .collect()
}

fn sampler() -> SamplerConfig {
    SamplerConfig {
        iterations: 8,
        layers: vec![1, 2, 4],
        ..SamplerConfig::default()
    }
}

fn batch_gradients(c: &mut Criterion) {
    let m = model();
    let mut rng = rng_from_seed(3);
    let mut g = c.benchmark_group(format!("batch_gradients/{MODE}"));
    g.sample_size(10);
    for batch in [4usize, 16] {
        let examples: Vec<_> = grids(batch).iter().map(|x| mask_example(x, 0.5, &mut rng)).collect();
        g.bench_with_input(BenchmarkId::from_parameter(batch), &examples, |b, ex| {
            b.iter(|| loss_and_grads(&m, black_box(ex)).unwrap())
        });
    }
    g.finish();
}

fn trials(c: &mut Criterion) {
    let m = model();
    let sketch = grids(1).remove(0);
    let mut g = c.benchmark_group(format!("trials/{MODE}"));
    g.sample_size(10);
    g.bench_function("R=4", |b| {
        b.iter(|| run_trials(&m, &sketch, 1, &sampler(), &[0.0, 0.05, 0.1, 0.25], None, 7).unwrap())
    });
    g.finish();
}

fn per_token_scores(c: &mut Criterion) {
    let m = model();
    let gs = grids(2);
    let layers = LayerSet::new([1, 2, 3, 4], 4).unwrap();
    let ax = LayerMaps::compute(&m, &gs[0], &layers).unwrap();
    let ay = LayerMaps::compute(&m, &gs[1], &layers).unwrap();
    let mut g = c.benchmark_group(format!("per_token_scores/{MODE}"));
    g.bench_function("N=256,L=4", |b| b.iter(|| scores_from_maps(black_box(&ax), black_box(&ay)).unwrap()));
    g.finish();
}

fn seed_sweep(c: &mut Criterion) {
    let m = model();
    let sketch = grids(1).remove(0);
    let cfg = sampler();
    let mut g = c.benchmark_group(format!("seed_sweep/{MODE}"));
    g.sample_size(10);
    g.bench_function("seeds=8", |b| {
        b.iter(|| {
            (0..8u64)
                .into_par_iter()
                .map(|s| masksketch_sample(&m, &sketch, 1, &cfg, &mut rng_from_seed(derive_seed(9, s))).unwrap())
                .collect::<Vec<_>>()
        })
    });
    g.finish();
}

criterion_group!(kernels, batch_gradients, trials, per_token_scores, seed_sweep);
criterion_main!(kernels);
