//! Photon statistics and the parametric scatter term.

use rand::RngCore;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use super::Sinogram;
use crate::seed;

/// SplitMix64 stream keyed by a counter tuple. Each detector element gets its
/// own stream, so noise does not depend on evaluation order.
#[derive(Debug, Clone)]
pub struct CounterRng {
    state: u64,
}

impl CounterRng {
    pub fn new(seed: u64, keys: &[u64]) -> Self {
        CounterRng {
            state: seed::mix(seed, keys),
        }
    }
}

impl RngCore for CounterRng {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let b = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&b[..chunk.len()]);
        }
    }
}

/// Half-width of the scatter smoothing kernel for `n_cols` columns.
pub fn scatter_half_width(n_cols: usize) -> usize {
    (n_cols / 4).max(1)
}

/// Triangular smoothing with edge replication. The kernel is normalised, so a
/// constant row passes unchanged and total variation never increases.
///
/// The triangle of half-width `h` is the self-convolution of a box of `h + 1`
/// samples, so this runs as two running sums over the replicated row.
pub fn triangular_smooth(row: &[f64], half_width: usize) -> Vec<f64> {
    let n = row.len() as isize;
    let h = half_width as isize;
    let norm = ((h + 1) * (h + 1)) as f64;
    let at = |i: isize| row[i.clamp(0, n - 1) as usize];
    // box[m] = sum of x[m - h ..= m], for m in -h ..= n - 1 + h,
    // stored at index m + h
    let mut boxed = Vec::with_capacity((n + 2 * h) as usize);
    let mut acc: f64 = (-2 * h..=-h).map(at).sum();
    boxed.push(acc);
    for m in -h + 1..n + h {
        acc += at(m) - at(m - h - 1);
        boxed.push(acc);
    }
    // out[j] = sum of box[j + a], a = 0..=h
    let h = h as usize;
    let mut out = Vec::with_capacity(row.len());
    let mut acc2: f64 = boxed[h..=2 * h].iter().sum();
    out.push(acc2 / norm);
    for j in 1..n as usize {
        acc2 += boxed[j + 2 * h] - boxed[j + h - 1];
        out.push(acc2 / norm);
    }
    out
}

/// Expected scatter counts per sinogram element: `spr` times the smoothed
/// primary counts of the same view and row.
pub fn estimate_scatter(s: &Sinogram, spr: f64) -> Vec<f64> {
    assert!(spr >= 0.0, "scatter-to-primary ratio must be >= 0");
    if spr == 0.0 {
        return vec![0.0; s.data.len()];
    }
    let i0 = s.scanner.i0;
    let hw = scatter_half_width(s.n_cols);
    s.data
        .par_chunks(s.n_cols)
        .flat_map_iter(|row| {
            let primary: Vec<f64> = row.iter().map(|p| i0 * (-p).exp()).collect();
            triangular_smooth(&primary, hw).into_iter().map(move |c| spr * c)
        })
        .collect()
}

/// Replace line integrals with Poisson-sampled ones. Element `(row, view,
/// col)` draws from its own stream keyed by `(seed, row, view, col)`.
pub fn apply_quantum_noise(s: &Sinogram, scatter: Option<&[f64]>, seed: u64) -> Sinogram {
    let i0 = s.scanner.i0;
    let n_cols = s.n_cols;
    let n_rows = s.n_rows;
    let data: Vec<f64> = s
        .data
        .par_iter()
        .enumerate()
        .map(|(idx, &p)| {
            let col = idx % n_cols;
            let row = (idx / n_cols) % n_rows;
            let view = idx / (n_cols * n_rows);
            let lambda = i0 * (-p).exp() + scatter.map_or(0.0, |sc| sc[idx]);
            let mut rng = CounterRng::new(seed, &[row as u64, view as u64, col as u64]);
            let counts = if lambda > 0.0 {
                Poisson::new(lambda).map(|d| d.sample(&mut rng)).unwrap_or(lambda)
            } else {
                0.0
            };
            -(counts.max(1.0) / i0).ln()
        })
        .collect();
    Sinogram {
        data,
        ..s.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ct::{builtin_scanner, ScannerModel};

    fn flat(p: f64, n_views: usize, n_cols: usize, i0: f64) -> Sinogram {
        let mut cfg = builtin_scanner(ScannerModel::W12);
        cfg.i0 = i0;
        cfg.n_views = n_views;
        cfg.n_detector_cols = n_cols;
        Sinogram {
            n_views,
            n_rows: 1,
            n_cols,
            view_angles: crate::ct::projector::view_angles(n_views),
            data: vec![p; n_views * n_cols],
            scanner: cfg,
            slice_z: vec![0.0],
            isocenter: [0.0, 0.0],
        }
    }

    #[test]
    fn huge_i0_is_nearly_noise_free() {
        let mut s = flat(0.0, 20, 50, 1e12);
        for (i, d) in s.data.iter_mut().enumerate() {
            *d = (i % 37) as f64 * 0.1;
        }
        let noisy = apply_quantum_noise(&s, None, 5);
        for (a, b) in s.data.iter().zip(&noisy.data) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn log_poisson_mean_and_variance() {
        // Delta method: p' = -ln(N / i0) with N ~ Poisson(i0) has
        // variance ≈ 1/i0 and bias ≈ 1/(2 i0).
        let i0 = 1e4;
        let n = 100_000;
        let s = flat(0.0, 100, 1000, i0);
        let noisy = apply_quantum_noise(&s, None, 11);
        let mean = noisy.data.iter().sum::<f64>() / n as f64;
        let var = noisy.data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let tol = 3.0 / (i0 * n as f64).sqrt();
        assert!((mean - 0.5 / i0).abs() < tol, "mean {mean}");
        assert!((var * i0 - 1.0).abs() < 0.10, "var {var}");
    }

    #[test]
    fn noise_is_keyed_per_element() {
        let s = flat(1.0, 8, 16, 1e3);
        let a = apply_quantum_noise(&s, None, 3);
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap()
            .install(|| apply_quantum_noise(&s, None, 3));
        assert_eq!(a.data, b.data);
        let c = apply_quantum_noise(&s, None, 4);
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn zero_spr_no_scatter() {
        let s = flat(0.5, 4, 32, 1e4);
        assert!(estimate_scatter(&s, 0.0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn uniform_primary_scatter() {
        let s = flat(0.5, 4, 32, 1e4);
        let c = 1e4 * (-0.5f64).exp();
        for x in estimate_scatter(&s, 0.1) {
            assert!((x - 0.1 * c).abs() < 1e-9 * c);
        }
    }

    #[test]
    fn running_sums_match_direct_triangle() {
        let row: Vec<f64> = (0..40).map(|i| ((i * 37) % 11) as f64 + 0.25 * i as f64).collect();
        for h in [1usize, 3, 10, 39, 60] {
            let fast = triangular_smooth(&row, h);
            let hh = h as isize;
            let n = row.len() as isize;
            for j in 0..n {
                let mut num = 0.0;
                for k in -hh..=hh {
                    num += (hh + 1 - k.abs()) as f64 * row[(j + k).clamp(0, n - 1) as usize];
                }
                let direct = num / ((hh + 1) * (hh + 1)) as f64;
                assert!((fast[j as usize] - direct).abs() < 1e-9, "h {h} j {j}");
            }
        }
    }

    #[test]
    fn smoothing_does_not_increase_variation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut s = flat(0.0, 6, 64, 1e5);
        for d in &mut s.data {
            *d = rng.random_range(0.0..4.0);
        }
        let scatter = estimate_scatter(&s, 1.0);
        let tv = |row: &[f64]| row.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>();
        for (prow, srow) in s.data.chunks(64).zip(scatter.chunks(64)) {
            let primary: Vec<f64> = prow.iter().map(|p| 1e5 * (-p).exp()).collect();
            assert!(tv(srow) <= tv(&primary) + 1e-9);
        }
    }
}
