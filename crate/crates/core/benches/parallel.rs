//! Parallel-vs-sequential comparison for the rayon-backed kernels: matmul,
//! dilated conv1d, silhouette, and corpus rendering.
//!
//! Run with `cargo bench` (parallel feature on by default) or
//! `cargo bench --no-default-features` for the pure sequential build.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use langemb::config::TrainConfig;
use langemb::eval::silhouette;
use langemb::par::set_parallel;
use langemb::synthdata::{make_language_specs, make_speaker_specs, render_utterance};
use langemb::tensor::Tensor;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn modes() -> Vec<(&'static str, bool)> {
    if cfg!(feature = "parallel") {
        vec![("sequential", false), ("parallel", true)]
    } else {
        vec![("sequential", false)]
    }
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&[256, 128], &mut rng);
    let b = rand_tensor(&[128, 256], &mut rng);
    let mut group = c.benchmark_group("matmul_256x128x256");
    for (name, on) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            set_parallel(on);
            bench.iter(|| a.matmul(&b).unwrap());
        });
    }
    set_parallel(true);
    group.finish();
}

fn bench_conv1d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = rand_tensor(&[400, 32], &mut rng);
    let kernel = rand_tensor(&[3, 32, 32], &mut rng);
    let bias = rand_tensor(&[32], &mut rng);
    let mut group = c.benchmark_group("conv1d_T400_C32_d2");
    for (name, on) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            set_parallel(on);
            bench.iter(|| input.conv1d(&kernel, &bias, 2).unwrap());
        });
    }
    set_parallel(true);
    group.finish();
}

fn bench_silhouette(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 600;
    let points: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let center = (i % 6) as f64 * 3.0;
            (0..32).map(|_| center + rng.gen_range(-1.0..1.0)).collect()
        })
        .collect();
    let labels: Vec<usize> = (0..n).map(|i| i % 6).collect();
    let mut group = c.benchmark_group("silhouette_600x32");
    for (name, on) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            set_parallel(on);
            bench.iter(|| silhouette(&points, &labels).unwrap());
        });
    }
    set_parallel(true);
    group.finish();
}

fn bench_render(c: &mut Criterion) {
    let cfg = TrainConfig::default();
    let langs = make_language_specs(
        cfg.corpus.n_languages(),
        cfg.corpus.n_phonemes,
        cfg.corpus.feat_dim,
        cfg.corpus.mean_phoneme_duration,
        cfg.seed,
    )
    .unwrap();
    let spks = make_speaker_specs(cfg.corpus.n_speakers, cfg.seed);
    let mut group = c.benchmark_group("render_64_utterances");
    for (name, on) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            set_parallel(on);
            bench.iter(|| {
                langemb::par::map_indices(64, 1, |i| {
                    render_utterance(
                        &langs[i % langs.len()],
                        &spks[i % spks.len()],
                        cfg.corpus.frames,
                        cfg.corpus.noise_sigma,
                        i as u64,
                    )
                })
            });
        });
    }
    set_parallel(true);
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_conv1d, bench_silhouette, bench_render);
criterion_main!(benches);
