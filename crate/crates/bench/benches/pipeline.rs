use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hyperspace_bench::{desk_hypernet, desk_unet, desk_weights, random_tensor};

fn unet_forward(c: &mut Criterion) {
    let unet = desk_unet();
    let w = desk_weights(&unet);
    let mut g = c.benchmark_group("unet_forward");
    g.sample_size(10);
    for &n in &[16usize, 32] {
        let x = random_tensor(1, [n, n, n], 4);
        g.bench_with_input(BenchmarkId::from_parameter(n), &x, |b, x| b.iter(|| unet.forward(x, &w).unwrap()));
    }
    g.finish();
}

fn hypernet_forward(c: &mut Criterion) {
    let unet = desk_unet();
    let (h, beta) = desk_hypernet(&unet);
    c.bench_function("hypernet_forward", |b| b.iter(|| h.forward(&beta, &[1.5, 2.0, 2.5]).unwrap()));
}

fn train_step(c: &mut Criterion) {
    let unet = desk_unet();
    let w = desk_weights(&unet);
    let x = random_tensor(1, [16, 16, 16], 5);
    let mut g = c.benchmark_group("unet_forward_backward");
    g.sample_size(10);
    let mut grad = vec![0.0f32; w.len()];
    g.bench_function("16", |b| {
        b.iter(|| {
            let (y, tape) = unet.forward_train(&x, &w).unwrap();
            unet.backward(tape, &w, y, &mut grad, false)
        })
    });
    g.finish();
}

criterion_group!(benches, unet_forward, hypernet_forward, train_step);
criterion_main!(benches);
