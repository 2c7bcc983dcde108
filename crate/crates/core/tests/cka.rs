use hyperspace::cka::{
    capture_activations, center, cka_map, cka_slope, default_grid, hsic, hsic_features, linear_cka, run_cka_protocol,
    ActivationMatrix, CaptureSpec, CkaMap, CkaProtocolConfig, CropSpec,
};
use hyperspace::evaluation::Model;
use hyperspace::segnet::{LayerKind, UNetConfig};
use hyperspace::synthdata::{generate_indexed, PhantomSpec, SpacingRange};
use hyperspace::training::{HyperSettings, Regime, TrainConfig, Trainer};
use hyperspace::volume::{pad_to_multiple, Spacing, Volume};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random(n: usize, p: usize, seed: u64) -> ActivationMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ActivationMatrix::new(n, p, (0..n * p).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

/// Random orthogonal matrix by Gram-Schmidt.
fn orthogonal(p: usize, seed: u64) -> Vec<f64> {
    let a = random(p, p, seed).data;
    let mut q: Vec<Vec<f64>> = Vec::new();
    for i in 0..p {
        let mut v: Vec<f64> = a[i * p..(i + 1) * p].to_vec();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        q.push(v);
    }
    q.concat()
}

fn matmul(x: &ActivationMatrix, q: &[f64], p2: usize) -> ActivationMatrix {
    let mut out = vec![0.0; x.n * p2];
    for i in 0..x.n {
        for j in 0..p2 {
            out[i * p2 + j] = (0..x.p).map(|k| x.data[i * x.p + k] * q[k * p2 + j]).sum();
        }
    }
    ActivationMatrix::new(x.n, p2, out).unwrap()
}

/// tr(KL) by explicit double loops over examples.
fn brute_trace(x: &ActivationMatrix, y: &ActivationMatrix) -> f64 {
    let n = x.n;
    let k = |a: &ActivationMatrix, i: usize, j: usize| -> f64 { (0..a.p).map(|c| a.data[i * a.p + c] * a.data[j * a.p + c]).sum() };
    let mut t = 0.0;
    for i in 0..n {
        for j in 0..n {
            t += k(x, i, j) * k(y, j, i);
        }
    }
    t
}

#[test]
fn linear_cka_invariances() {
    let x = center(random(10, 4, 1)).unwrap();
    assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-8);
    let scaled = ActivationMatrix::new(10, 4, x.data.iter().map(|v| -3.7 * v).collect()).unwrap();
    assert!((linear_cka(&x, &scaled).unwrap() - 1.0).abs() < 1e-8);
    let q = orthogonal(4, 7);
    let rotated = matmul(&x, &q, 4);
    assert!((linear_cka(&x, &rotated).unwrap() - 1.0).abs() < 1e-8);
    let mixed = ActivationMatrix::new(10, 4, rotated.data.iter().map(|v| 0.25 * v).collect()).unwrap();
    assert!((linear_cka(&x, &mixed).unwrap() - 1.0).abs() < 1e-8);
    let y = center(random(10, 6, 2)).unwrap();
    let c = linear_cka(&x, &y).unwrap();
    assert!((0.0..=1.0).contains(&c));
}

#[test]
fn hsic_matches_brute_force_trace() {
    for (n, p1, p2, seed) in [(6, 2, 3, 0), (8, 4, 4, 1), (8, 4, 2, 2)] {
        let x = center(random(n, p1, seed)).unwrap();
        let y = center(random(n, p2, seed + 100)).unwrap();
        let want = brute_trace(&x, &y);
        let got = hsic(&x.gram(), &y.gram()).unwrap();
        assert!((got - want).abs() <= 1e-8 * want.abs(), "{got} vs {want}");
        assert!((hsic_features(&x, &y).unwrap() - want).abs() <= 1e-8 * want.abs());
        let self_h = hsic(&x.gram(), &x.gram()).unwrap();
        assert!(self_h >= 0.0);
    }
}

#[test]
fn orthogonal_column_spaces_give_zero_hsic() {
    // Rows live in disjoint coordinates: X uses column 0, Y column 1 of a shared basis.
    let x = ActivationMatrix::new(4, 1, vec![1.0, -1.0, 1.0, -1.0]).unwrap();
    let y = ActivationMatrix::new(4, 1, vec![1.0, 1.0, -1.0, -1.0]).unwrap();
    assert_eq!(hsic(&x.gram(), &y.gram()).unwrap(), 0.0);
    assert_eq!(linear_cka(&x, &y).unwrap(), 0.0);
}

#[test]
fn cka_maps_are_symmetric_with_unit_diagonal() {
    let mut a: Vec<ActivationMatrix> = (0..4).map(|i| center(random(12, 3 + i, i as u64)).unwrap()).collect();
    let mut b: Vec<ActivationMatrix> = (0..4).map(|i| center(random(12, 5, 50 + i as u64)).unwrap()).collect();
    for (i, m) in a.iter_mut().chain(b.iter_mut()).enumerate() {
        m.layer = format!("l{}", i % 4);
    }
    let aa = cka_map(&a, &a).unwrap();
    assert!(aa.diagonal().iter().all(|d| (d - 1.0).abs() < 1e-10));
    let ab = cka_map(&a, &b).unwrap();
    let ba = cka_map(&b, &a).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            assert!((ab.values[i][j] - ba.transpose().values[i][j]).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&ab.values[i][j]));
        }
    }
}

#[test]
fn slope_recovers_planted_ramps() {
    let spacings = [0.94, 1.2, 1.5, 1.61, 2.0];
    let slope = [[0.3, -0.1], [0.0, 0.05]];
    let maps: Vec<CkaMap> = spacings
        .iter()
        .map(|&r| CkaMap {
            tag_a: String::new(),
            tag_b: String::new(),
            layers: vec!["a".into(), "b".into()],
            values: (0..2).map(|i| (0..2).map(|j| 0.2 + slope[i][j] * r).collect()).collect(),
            dead_layers: vec![],
        })
        .collect();
    let s = cka_slope(&spacings, &maps).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            assert!((s[i][j] - slope[i][j]).abs() < 1e-10);
        }
    }
}

fn phantoms(n: u64) -> Vec<Volume> {
    let mut spec = PhantomSpec::default_3d();
    spec.canvas_size_mm = 48.0;
    spec.reference_spacing = 0.75;
    for s in &mut spec.structures {
        s.size_mm = (s.size_mm.0 * 0.7, s.size_mm.1 * 0.7);
        s.length_mm = (s.length_mm.0 * 0.7, s.length_mm.1 * 0.7);
        s.thickness_mm = (s.thickness_mm.0 * 0.7, s.thickness_mm.1 * 0.7);
    }
    (0..n).map(|i| generate_indexed(&spec, i).unwrap().0).collect()
}

fn hs_model() -> Model {
    let mut unet = UNetConfig::new(3, 4);
    unet.levels = 3;
    unet.blocks_per_level = 1;
    unet.base_channels = 2;
    let cfg = TrainConfig {
        regime: Regime::Hs,
        range: SpacingRange::cube(0.9, 2.0, 3).unwrap(),
        unet,
        hypernet: HyperSettings {
            hidden_width: 8,
            ..Default::default()
        },
        iterations: 1,
        batch_size: 1,
        patch_size_mm: 16.0,
        optimizer: Default::default(),
        loss_weights: Default::default(),
        seed: 0,
        log_every: 1,
        state_every: 0,
    };
    Model::new(Trainer::new(cfg).unwrap().checkpoint()).unwrap()
}

fn spec(extent: f64, cap: usize) -> CaptureSpec {
    CaptureSpec {
        crop: CropSpec::centered(&[48.0; 3], extent, 1.0),
        margin_mm: 4.0,
        feature_cap: cap,
        seed: 3,
        layers: None,
    }
}

#[test]
fn capture_shapes_follow_the_reference_grid() {
    let model = hs_model();
    let imgs = phantoms(3);
    let a = capture_activations(&model, &Spacing::isotropic(1.0, 3).unwrap(), &imgs, &spec(16.0, usize::MAX)).unwrap();
    let b = capture_activations(&model, &Spacing::isotropic(2.0, 3).unwrap(), &imgs, &spec(16.0, usize::MAX)).unwrap();
    assert_eq!(a.len(), model.unet.layers().len());
    for ((ma, mb), info) in a.iter().zip(&b).zip(model.unet.layers()) {
        let side = 16 >> info.level;
        assert_eq!(ma.p, info.channels * side * side * side, "{}", info.name);
        assert_eq!((ma.n, ma.p), (mb.n, mb.p));
    }
    let again = capture_activations(&model, &Spacing::isotropic(1.0, 3).unwrap(), &imgs, &spec(16.0, usize::MAX)).unwrap();
    assert_eq!(a, again);
    let capped = capture_activations(&model, &Spacing::isotropic(1.0, 3).unwrap(), &imgs, &spec(16.0, 100)).unwrap();
    assert!(capped.iter().all(|m| m.p <= 100));
    assert!(capped.iter().any(|m| m.p == 100));
}

#[test]
fn capture_ignores_padding_outside_the_footprint() {
    let model = hs_model();
    let imgs = phantoms(2);
    let r = Spacing::isotropic(1.5, 3).unwrap();
    let base = capture_activations(&model, &r, &imgs, &spec(16.0, 500)).unwrap();
    // Pad every image by edge replication; the crop moves with the content.
    let padded: Vec<Volume> = imgs.iter().map(|v| pad_to_multiple(v, 24).0).collect();
    let shift = (padded[0].shape()[0] - imgs[0].shape()[0]) / 2;
    assert!(shift > 0);
    let mut s = spec(16.0, 500);
    let c = 24.0 + shift as f64 * 0.75;
    s.crop.center_mm = vec![c; 3];
    let moved = capture_activations(&model, &r, &padded, &s).unwrap();
    for (a, b) in base.iter().zip(&moved) {
        let err = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{}: {err}", a.layer);
    }
}

#[test]
fn crop_outside_the_image_is_rejected() {
    let model = hs_model();
    let imgs = phantoms(2);
    let mut s = spec(16.0, 100);
    s.crop.center_mm = vec![44.0, 24.0, 24.0];
    assert!(capture_activations(&model, &Spacing::isotropic(1.0, 3).unwrap(), &imgs, &s).is_err());
}

#[test]
fn protocol_bundle_arithmetic() {
    let model = hs_model();
    let other = hs_model();
    let imgs = phantoms(3);
    let cfg = CkaProtocolConfig {
        crop_extent_mm: 16.0,
        margin_mm: 4.0,
        feature_cap: 300,
        ..Default::default()
    };
    let b = run_cka_protocol(&model, Some(&other), &imgs, &cfg, &mut |_| {}).unwrap();
    assert_eq!((b.intra.len(), b.inter.len()), (10, 9));
    assert_eq!(b.map_count(), 22);
    let grid = default_grid(0.94, 2.0, 10);
    assert_eq!(b.spacings, grid);
    assert!((grid[9] - 2.0).abs() < 1e-12 && (grid[1] - (0.94 + 1.06 / 9.0)).abs() < 1e-12);
    // 1.0578 is nearer to 1 mm than 0.94.
    assert_eq!(b.reference_index, 1);
    for m in b.intra.iter() {
        assert!(m.diagonal().iter().all(|d| (d - 1.0).abs() < 1e-10));
    }
    for m in b.intra.iter().chain(&b.inter).chain(b.cross_seed.iter()) {
        assert!(m.values.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }
    assert!(b.layers.iter().any(|l| l.kind == LayerKind::Relu));
    let dir = tempfile::tempdir().unwrap();
    b.write(dir.path()).unwrap();
    assert!(dir.path().join("layers.json").exists());
    assert!(dir.path().join("slope_inter.csv").exists());
}
