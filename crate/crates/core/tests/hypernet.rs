use hyperspace::hypernet::{conv_init_std, HyperNet, HyperNetConfig, OUTPUT_BOUND};
use hyperspace::segnet::{param_layout, ParamRole, UNetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn std_of(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

#[test]
fn init_matches_conventional_scale_per_tensor() {
    let cfg = UNetConfig::new(3, 4);
    let layout = param_layout(&cfg);
    let hn = HyperNet::for_layout(HyperNetConfig::new(3, layout.total), &layout).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let beta: Vec<f64> = hn.init(&layout, &mut rng).unwrap();
    let eta = hn.forward(&beta, &[1.0, 1.0, 1.0]).unwrap();
    assert!(eta.iter().all(|v| v.abs() < OUTPUT_BOUND));
    for e in layout.entries.iter().filter(|e| e.role == ParamRole::ConvWeight) {
        let s = std_of(&eta[e.range()]);
        let target = conv_init_std(e.fan_in());
        assert!(
            s >= 0.5 * target && s <= 2.0 * target,
            "{}: std {s} vs target {target}",
            e.name
        );
    }
}

#[test]
fn beta_gradient_matches_finite_differences() {
    let cfg = UNetConfig {
        dim: 2,
        levels: 2,
        blocks_per_level: 1,
        base_channels: 2,
        kernel_size: 3,
        in_channels: 1,
        num_classes: 2,
    };
    let layout = param_layout(&cfg);
    let mut hc = HyperNetConfig::new(2, layout.total);
    hc.hidden_width = 16;
    // A larger final scale keeps the tanh head away from its linear regime.
    hc.final_init_scale = 0.5;
    let hn = HyperNet::for_layout(hc, &layout).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let beta: Vec<f64> = hn.init(&layout, &mut rng).unwrap();
    let c: Vec<f64> = (0..layout.total).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = [1.3, 0.8];
    let f = |b: &[f64]| -> f64 { hn.forward(b, &r).unwrap().iter().zip(&c).map(|(e, w)| e * w).sum() };
    let (_, cache) = hn.forward_train(&beta, &r).unwrap();
    let mut g = vec![0.0; beta.len()];
    let dr = hn.backward(&cache, &beta, &c, &mut g);
    let h = 1e-6;
    for _ in 0..40 {
        let i = rng.random_range(0..beta.len());
        let mut p = beta.clone();
        p[i] += h;
        let mut m = beta.clone();
        m[i] -= h;
        let num = (f(&p) - f(&m)) / (2.0 * h);
        let rel = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-6);
        assert!(rel < 1e-3, "beta[{i}]: analytic {} numeric {num}", g[i]);
    }
    for a in 0..2 {
        let mut rp = r;
        rp[a] += h;
        let mut rm = r;
        rm[a] -= h;
        let fr = |rr: &[f64]| -> f64 { hn.forward(&beta, rr).unwrap().iter().zip(&c).map(|(e, w)| e * w).sum() };
        let num = (fr(&rp) - fr(&rm)) / (2.0 * h);
        assert!((num - dr[a]).abs() / num.abs().max(1e-6) < 1e-3);
    }
}

#[test]
fn generated_weights_are_lipschitz_in_spacing() {
    let cfg = UNetConfig {
        dim: 3,
        levels: 2,
        blocks_per_level: 1,
        base_channels: 2,
        kernel_size: 3,
        in_channels: 1,
        num_classes: 2,
    };
    let layout = param_layout(&cfg);
    let hn = HyperNet::for_layout(HyperNetConfig::new(3, layout.total), &layout).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let beta: Vec<f64> = hn.init(&layout, &mut rng).unwrap();
    let grid: Vec<[f64; 3]> = (0..6)
        .flat_map(|i| (0..6).map(move |j| [0.5 + 0.6 * i as f64, 0.5 + 0.6 * j as f64, 1.0 + 0.3 * (i + j) as f64]))
        .collect();
    let etas: Vec<Vec<f64>> = grid.iter().map(|r| hn.forward(&beta, r).unwrap()).collect();
    let mut ratios = Vec::new();
    for a in 0..grid.len() {
        for b in a + 1..grid.len() {
            let de: f64 = etas[a].iter().zip(&etas[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let dr: f64 = grid[a].iter().zip(&grid[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            ratios.push(de / dr);
        }
    }
    let max = ratios.iter().cloned().fold(0.0, f64::max);
    assert!(max.is_finite());
    // Refining the grid locally must not blow the ratio up.
    let r0 = [2.0, 2.0, 2.0];
    let e0 = hn.forward(&beta, &r0).unwrap();
    for eps in [1e-1, 1e-2, 1e-3, 1e-4] {
        let e1 = hn.forward(&beta, &[2.0 + eps, 2.0, 2.0]).unwrap();
        let de: f64 = e0.iter().zip(&e1).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(de / eps <= 2.0 * max + 1e-9, "local ratio {} above global {max}", de / eps);
    }
}
