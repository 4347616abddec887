use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synlungs_core::ct::{back_project_rays, builtin_scanner, forward_project, line_integral, ScannerModel, Slice2D};
use synlungs_core::{VolumeKind, VoxelVolume};

fn random_image(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n * n).map(|_| rng.random_range(0.0f32..1.0)).collect()
}

#[test]
fn back_projection_is_the_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (n, pixel) = (8, 20.0);
    let mut cfg = builtin_scanner(ScannerModel::W20);
    cfg.n_views = 12;
    let x = random_image(&mut rng, n);
    let mu = VoxelVolume::centered([n, n, 1], [pixel; 3], VolumeKind::Attenuation, 0.0)
        .unwrap()
        .with_values(VolumeKind::Attenuation, x.clone())
        .unwrap();
    let mut s = forward_project(&mu, &cfg, 0.0).unwrap();
    let ax = s.data.clone();
    let y: Vec<f64> = (0..ax.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    s.data = y.clone();
    let aty = back_project_rays(&s, n, n, pixel, pixel);

    let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| *a as f64 * b).sum();
    assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
}

/// Midpoint-rule integral along the segment, fine enough to resolve pixels.
fn sampled_integral(img: &[f32], n: usize, pixel: f64, p0: [f64; 2], p1: [f64; 2]) -> f64 {
    let steps = 400_000;
    let d = [p1[0] - p0[0], p1[1] - p0[1]];
    let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
    let half = 0.5 * n as f64 * pixel;
    let mut acc = 0.0;
    for k in 0..steps {
        let t = (k as f64 + 0.5) / steps as f64;
        let (x, y) = (p0[0] + t * d[0], p0[1] + t * d[1]);
        let (fi, fj) = ((x + half) / pixel, (y + half) / pixel);
        if fi >= 0.0 && fj >= 0.0 && fi < n as f64 && fj < n as f64 {
            acc += img[fi as usize + n * fj as usize] as f64;
        }
    }
    acc * len / steps as f64
}

#[test]
fn traversal_matches_dense_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, pixel) = (16, 1.5);
    let img = random_image(&mut rng, n);
    let grid = Slice2D::new(&img, n, n, pixel, pixel);
    for _ in 0..20 {
        let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let off: f64 = rng.random_range(-10.0..10.0);
        let (s, c) = a.sin_cos();
        let p0 = [40.0 * c - off * s, 40.0 * s + off * c];
        let p1 = [-40.0 * c - off * s, -40.0 * s + off * c];
        let exact = line_integral(&grid, p0, p1);
        let dense = sampled_integral(&img, n, pixel, p0, p1);
        assert!((exact - dense).abs() < 2e-3 * dense.max(1.0), "angle {a}: {exact} vs {dense}");
    }
}
