use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use cpdsa::backprop::{gradient_check, random_problem, GradCheckOptions};
use cpdsa::exec::{set_mode, ExecMode};
use cpdsa::network::{preset, readout_loss, ForwardOptions};
use cpdsa::tensor::{conv2d, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [ExecMode; 2] = [ExecMode::Sequential, ExecMode::Parallel];

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn bench_conv(c: &mut Criterion) {
    let input = random(&[16, 8, 32, 32], 0);
    let kernel = random(&[16, 8, 3, 3], 1);
    let mut g = c.benchmark_group("conv2d");
    for mode in MODES {
        set_mode(mode);
        g.bench_function(BenchmarkId::from_parameter(format!("{mode:?}")), |b| {
            b.iter(|| conv2d(&input, &kernel, 1, 1).unwrap())
        });
    }
    g.finish();
}

fn bench_step(c: &mut Criterion) {
    let cfg = preset("tiny-conv", 5, &[2, 16, 16], 10, 0).unwrap();
    let (model, input, labels) = random_problem(cfg, 8, 0).unwrap();
    let mut g = c.benchmark_group("tiny_conv_forward_backward");
    g.sample_size(10);
    for mode in MODES {
        set_mode(mode);
        g.bench_function(BenchmarkId::from_parameter(format!("{mode:?}")), |b| {
            b.iter(|| {
                let (logits, tape) = model.forward(&input, &ForwardOptions::train(0)).unwrap();
                let r = readout_loss(&logits, &labels).unwrap();
                model.backward(&tape, &r.grad).unwrap()
            })
        });
    }
    g.finish();
}

fn bench_gradcheck(c: &mut Criterion) {
    let cfg = preset("tiny-dense", 4, &[8], 3, 0).unwrap();
    let (model, input, labels) = random_problem(cfg, 2, 0).unwrap();
    let opts = GradCheckOptions::default();
    let mut g = c.benchmark_group("gradient_check");
    g.sample_size(10);
    for mode in MODES {
        set_mode(mode);
        g.bench_function(BenchmarkId::from_parameter(format!("{mode:?}")), |b| {
            b.iter(|| gradient_check(&model, &input, &labels, &opts).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_conv, bench_step, bench_gradcheck);
criterion_main!(benches);
