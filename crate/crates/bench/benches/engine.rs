use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use glad_core::eval::{run_eval, ModelPolicy, Suite};
use glad_core::task::{generate_with, Perturbation, TaskConfig};
use glad_core::teacher::GeometryTeacher;
use glad_core::tensor::{matmul_into, Rng};
use glad_core::training::Trainer;
use glad_core::RunConfig;

fn random(rng: &mut Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.uniform_range(-1.0, 1.0) as f32).collect()
}

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    let mut rng = Rng::new(0);
    for (m, k, n) in [(64, 64, 64), (512, 64, 256), (512, 192, 64)] {
        let a = random(&mut rng, m * k);
        let b = random(&mut rng, k * n);
        let mut out = vec![0.0f32; m * n];
        g.bench_with_input(BenchmarkId::from_parameter(format!("{m}x{k}x{n}")), &(), |bch, _| {
            bch.iter(|| matmul_into(black_box(&a), black_box(&b), &mut out, m, k, n))
        });
    }
    g.finish();
}

fn small() -> RunConfig {
    let mut c = RunConfig::default();
    c.model.d_llm = 32;
    c.model.n_layers = 2;
    c.model.align_layer = 2;
    c.train.batch_size = 16;
    c
}

fn train_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("train_step");
    g.sample_size(10);
    for (name, lambda, cfg) in [
        ("small_vla", 0.0, small()),
        ("small_distill", 0.1, small()),
        ("default_distill", 0.1, RunConfig::default()),
    ] {
        let mut cfg = cfg;
        cfg.model.lambda = lambda;
        let mut t = Trainer::new(cfg).unwrap();
        g.bench_function(name, |b| b.iter(|| t.step().unwrap()));
    }
    g.finish();
}

fn teacher(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let teacher = GeometryTeacher::new(cfg.teacher).unwrap();
    let (scene, _) = generate_with(3, &TaskConfig::default()).unwrap();
    c.bench_function("teacher_features", |b| {
        b.iter(|| teacher.features(black_box(&scene)).unwrap())
    });
}

fn eval(c: &mut Criterion) {
    let cfg = small();
    let t = Trainer::new(cfg).unwrap();
    let teacher = GeometryTeacher::new(cfg.teacher).unwrap();
    let suite = [Suite::new(0, 10, 5)];
    let mut g = c.benchmark_group("eval");
    g.sample_size(10);
    g.bench_function("ori_obj_10x5", |b| {
        b.iter(|| {
            let mut p = ModelPolicy::new(&t.model, cfg.task, teacher.clone());
            run_eval(&mut p, &suite, &[Perturbation::Ori, Perturbation::Obj], &cfg.task).unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, matmul, train_step, teacher, eval);
criterion_main!(benches);
