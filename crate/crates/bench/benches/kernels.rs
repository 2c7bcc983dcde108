use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use hyperspace::cka::{hsic, ActivationMatrix};
use hyperspace::segnet::ops::conv_forward;
use hyperspace::volume::{resample_image, Spacing, Volume};
use hyperspace_bench::{random_tensor, rng};
use rand::Rng;

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv3x3x3");
    for &n in &[16usize, 32] {
        let x = random_tensor(8, [n, n, n], 0);
        let w = random_tensor(8, [8, 3, 9], 1).data;
        let b = vec![0.0f32; 8];
        g.throughput(Throughput::Elements((n * n * n) as u64));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| conv_forward(&x, &w, &b, 8, [3, 3, 3]))
        });
    }
    g.finish();
}

fn resample(c: &mut Criterion) {
    let mut r = rng(2);
    let data: Vec<f32> = (0..64 * 64 * 64).map(|_| r.random()).collect();
    let vol = Volume::new(vec![64, 64, 64], Spacing::isotropic(0.5, 3).unwrap(), data).unwrap();
    let mut g = c.benchmark_group("resample_64cube");
    for &mm in &[1.0f64, 2.0] {
        let target = Spacing::isotropic(mm, 3).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(mm), &target, |bench, t| {
            bench.iter(|| resample_image(&vol, t).unwrap())
        });
    }
    g.finish();
}

fn gram_hsic(c: &mut Criterion) {
    let mut r = rng(3);
    let (n, p) = (64usize, 4096usize);
    let mut mat = || ActivationMatrix::new(n, p, (0..n * p).map(|_| r.random()).collect()).unwrap();
    let (x, y) = (mat(), mat());
    c.bench_function("gram_64x4096", |b| b.iter(|| x.gram()));
    let (gx, gy) = (x.gram(), y.gram());
    c.bench_function("hsic_64", |b| b.iter(|| hsic(&gx, &gy).unwrap()));
}

criterion_group!(benches, conv, resample, gram_hsic);
criterion_main!(benches);
