//! DFT with the convention `F[k, k'] = exp(-2 pi i k k' / K)` (0-based),
//! unnormalized forward transform and `1/K` on the inverse.

use num_complex::Complex64;
use rustfft::FftPlanner;

pub fn dft(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    if buf.is_empty() {
        return buf;
    }
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf
}

pub fn idft(x: &[Complex64]) -> Vec<Complex64> {
    let mut buf = x.to_vec();
    if buf.is_empty() {
        return buf;
    }
    let n = buf.len() as f64;
    FftPlanner::new().plan_fft_inverse(buf.len()).process(&mut buf);
    for v in &mut buf {
        *v /= n;
    }
    buf
}

/// Frequencies `2 pi k / K` for `k = 0..K`, wrapped into `[-pi, pi]`.
pub fn dft_frequencies(k: usize) -> Vec<f64> {
    (0..k)
        .map(|i| {
            let w = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
            if w > std::f64::consts::PI {
                w - 2.0 * std::f64::consts::PI
            } else {
                w
            }
        })
        .collect()
}
