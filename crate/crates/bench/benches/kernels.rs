use std::hint::black_box;

use adcm_core::discretizer::delta_t_star;
use adcm_core::evalgen::w2_exact;
use adcm_core::{
    Activation, ConsistencyModel, DualTensor, MlpParams, NoiseSchedule, Preconditioner, ScheduleKind, SolverConfig,
    Tensor,
};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn flagship_params(rng: &mut ChaCha8Rng) -> MlpParams {
    MlpParams::init(&[3, 128, 128, 128, 2], Activation::Tanh, rng).unwrap()
}

fn mlp(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = flagship_params(&mut rng);
    let x = Tensor::standard_normal(&[256, 3], &mut rng);
    let dx = Tensor::standard_normal(&[256, 3], &mut rng);
    c.bench_function("mlp_forward_256", |b| b.iter(|| params.forward(black_box(&x)).unwrap()));
    let dual = DualTensor::new(x.clone(), dx).unwrap();
    c.bench_function("mlp_jvp_256", |b| b.iter(|| params.jvp(black_box(&dual)).unwrap()));
    let cot = Tensor::standard_normal(&[256, 2], &mut rng);
    c.bench_function("mlp_grad_256", |b| b.iter(|| params.grad(black_box(&x), &cot).unwrap()));
}

fn solver(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = ConsistencyModel::new(
        flagship_params(&mut rng),
        Preconditioner::edm(0.5),
        NoiseSchedule::with_defaults(ScheduleKind::Ve),
    )
    .unwrap();
    let x0 = Tensor::standard_normal(&[256, 2], &mut rng);
    let z = Tensor::standard_normal(&[256, 2], &mut rng);
    let cfg = SolverConfig::default();
    c.bench_function("delta_t_star_256", |b| {
        b.iter(|| delta_t_star(&model, black_box(&x0), &z, 10.0, &cfg).unwrap())
    });
}

fn wasserstein(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = Tensor::standard_normal(&[256, 2], &mut rng);
    let b = Tensor::standard_normal(&[256, 2], &mut rng);
    c.bench_function("w2_exact_256", |bch| bch.iter(|| w2_exact(black_box(&a), &b).unwrap()));
}

criterion_group!(benches, mlp, solver, wasserstein);
criterion_main!(benches);
