//! Ramp filter apodised with a Hann window.
//!
//! The ramp is built as the DFT of the band-limited spatial kernel
//! (`h(0) = 1/4τ²`, `h(n odd) = −1/(nπτ)²`), which avoids the DC offset a
//! directly sampled `|f|` produces under zero padding. The window is
//! `0.5 (1 + cos(π f / (c f_N)))` for `f ≤ c f_N` and zero above; `c > 1`
//! leaves more of the band untouched and gives a sharper kernel.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

#[derive(Clone)]
pub struct HannRampFilter {
    n_cols: usize,
    fft_len: usize,
    taps: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for HannRampFilter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HannRampFilter")
            .field("n_cols", &self.n_cols)
            .field("fft_len", &self.fft_len)
            .finish()
    }
}

/// Hann window value at `f / f_N` for a given cutoff.
pub fn hann_window(f_over_nyquist: f64, cutoff: f64) -> f64 {
    let x = f_over_nyquist / cutoff;
    if x >= 1.0 {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * x).cos())
    }
}

/// Build the frequency-domain taps for rows of `n_cols` samples at `pitch`
/// mm (at the isocentre). Taps include the `τ` factor of the discrete
/// convolution, so filtering is `ifft(fft(row) · taps)`.
pub fn hann_ramp_filter(n_cols: usize, pitch: f64, cutoff: f64) -> HannRampFilter {
    assert!(n_cols >= 2, "need at least two detector columns");
    assert!(cutoff > 0.0, "cutoff must be > 0");
    let fft_len = (2 * n_cols).next_power_of_two();
    let mut planner = FftPlanner::new();
    let forward = planner.plan_fft_forward(fft_len);
    let inverse = planner.plan_fft_inverse(fft_len);

    let tau = pitch;
    let mut kernel: Vec<Complex<f64>> = (0..fft_len)
        .map(|i| {
            let n = if i <= fft_len / 2 { i as i64 } else { i as i64 - fft_len as i64 };
            let h = if n == 0 {
                1.0 / (4.0 * tau * tau)
            } else if n % 2 != 0 {
                -1.0 / (std::f64::consts::PI * n as f64 * tau).powi(2)
            } else {
                0.0
            };
            Complex::new(h * tau, 0.0)
        })
        .collect();
    forward.process(&mut kernel);

    let taps = kernel
        .iter()
        .enumerate()
        .map(|(k, c)| {
            if k == 0 {
                return 0.0;
            }
            let kk = k.min(fft_len - k) as f64;
            let f_over_nyquist = 2.0 * kk / fft_len as f64;
            c.re.max(0.0) * hann_window(f_over_nyquist, cutoff)
        })
        .collect();
    HannRampFilter {
        n_cols,
        fft_len,
        taps,
        forward,
        inverse,
    }
}

impl HannRampFilter {
    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn fft_len(&self) -> usize {
        self.fft_len
    }

    /// Filter one detector row (zero padded to the FFT length).
    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        assert_eq!(row.len(), self.n_cols);
        let mut buf: Vec<Complex<f64>> = row
            .iter()
            .map(|&x| Complex::new(x, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(self.fft_len)
            .collect();
        self.forward.process(&mut buf);
        for (b, t) in buf.iter_mut().zip(&self.taps) {
            *b *= *t;
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.fft_len as f64;
        buf[..self.n_cols].iter().map(|c| c.re * scale).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dc_tap_is_zero() {
        for c in [0.5, 0.6, 1.2] {
            assert_eq!(hann_ramp_filter(64, 0.8, c).taps()[0], 0.0);
        }
    }

    #[test]
    fn wider_window_dominates() {
        let lo = hann_ramp_filter(100, 1.0, 0.5);
        let mid = hann_ramp_filter(100, 1.0, 0.6);
        let hi = hann_ramp_filter(100, 1.0, 1.2);
        for k in 0..lo.fft_len() {
            assert!(hi.taps()[k] >= mid.taps()[k]);
            assert!(mid.taps()[k] >= lo.taps()[k]);
        }
        // 0.5 cuts off at half Nyquist: the top half of the band is zero
        let n = lo.fft_len();
        assert_eq!(lo.taps()[n / 2], 0.0);
        assert!(hi.taps()[n / 2] > 0.0);
    }

    #[test]
    fn ramp_shape_at_low_frequency() {
        // Without the window the taps approximate |f|: τ·|f| = k/N in DFT units.
        let f = hann_ramp_filter(256, 1.0, 1e6);
        let n = f.fft_len() as f64;
        for k in 1..20 {
            let expected = k as f64 / n;
            assert!((f.taps()[k] - expected).abs() < 0.02 * expected + 1e-4, "{k}");
        }
    }

    #[test]
    fn constant_row_is_annihilated() {
        // Periodic constant: only the DC bin is populated, and it is zeroed.
        let f = hann_ramp_filter(32, 1.0, 1.2);
        let mut buf = vec![Complex::new(3.0, 0.0); f.fft_len()];
        f.forward.process(&mut buf);
        for (b, t) in buf.iter_mut().zip(f.taps()) {
            *b *= *t;
        }
        f.inverse.process(&mut buf);
        assert!(buf.iter().all(|c| c.norm() < 1e-9));
    }

    #[test]
    fn filtering_is_linear() {
        let f = hann_ramp_filter(40, 0.7, 0.6);
        let a: Vec<f64> = (0..40).map(|i| (i as f64 * 0.3).sin()).collect();
        let fa = f.apply(&a);
        let f3: Vec<f64> = f.apply(&a.iter().map(|x| 3.0 * x).collect::<Vec<_>>());
        for (x, y) in fa.iter().zip(&f3) {
            assert!((3.0 * x - y).abs() < 1e-12);
        }
    }
}
