use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use navpetl::attention::{multi_head_attention, AttentionParams};
use navpetl::metrics::dtw;
use navpetl::params::{Ctx, GradMode};
use navpetl::trainer::{il_step, Env, TrainConfig};
use navpetl::world::{generate_episode, generate_world};
use navpetl::{Method, MethodConfig, Model, ModelConfig, ParamRegistry, Role, Tape, Tensor};

fn filled(rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|i| ((i * 37) % 101) as f64 / 50.0 - 1.0).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn matmul(c: &mut Criterion) {
    let (a, b) = (filled(64, 64), filled(64, 256));
    c.bench_function("matmul 64x64x256", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
            black_box(t.matmul(x, y).unwrap());
        })
    });
}

fn attention(c: &mut Criterion) {
    let mut reg = ParamRegistry::new(1);
    let p = AttentionParams::new(&mut reg, "bench", 64, 4, Role::Weight).unwrap();
    let (q, kv) = (filled(16, 64), filled(24, 64));
    c.bench_function("attention forward 16x24 d64", |bench| {
        bench.iter(|| {
            let mut ctx = Ctx::new(&reg, GradMode::Off);
            let (q, kv) = (ctx.input(q.clone()), ctx.input(kv.clone()));
            black_box(multi_head_attention(&mut ctx, q, kv, &p, None, None).unwrap());
        })
    });
}

fn il_step_desk(c: &mut Criterion) {
    let mut model = Model::new(ModelConfig::desk(), 1).unwrap();
    model.install(MethodConfig::desk(Method::VlnPetl)).unwrap();
    let world = generate_world(1, 6, 6, 0.1).unwrap();
    let episode = generate_episode(&world, 0).unwrap();
    let env = Env::for_model(&world, &model).unwrap();
    let tc = TrainConfig::default();
    c.bench_function("il_step desk vln-petl", |bench| {
        bench.iter(|| black_box(il_step(&model, &env, &episode, &tc).unwrap()))
    });
}

fn dtw_paths(c: &mut Criterion) {
    let a: Vec<usize> = (0..40).collect();
    let b: Vec<usize> = (0..40).map(|i| (i * 7) % 40).collect();
    c.bench_function("dtw 40x40", |bench| {
        bench.iter(|| black_box(dtw(&a, &b, |x, y| (x as f64 - y as f64).abs())))
    });
}

criterion_group!(benches, matmul, attention, il_step_desk, dtw_paths);
criterion_main!(benches);
