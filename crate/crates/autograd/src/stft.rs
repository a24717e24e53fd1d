//! Differentiable STFT magnitudes.
//!
//! Forward uses an FFT per frame; backward applies the exact adjoint (an
//! inverse FFT per frame followed by windowed overlap-add), so gradients
//! cost the same O(n log n) as the forward instead of a dense DFT matmul.

use crate::tensor::Tensor;
use ndarray::{Array1, Array2, Ix1};
use rustfft::{num_complex::Complex, FftPlanner};

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |i| {
        0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()
    })
}

/// Number of frames for a signal of length `n` (no centering; caller pads).
pub fn stft_frames(n: usize, n_fft: usize, hop: usize) -> usize {
    if n < n_fft {
        0
    } else {
        1 + (n - n_fft) / hop
    }
}

impl Tensor {
    /// Magnitude spectrogram `[frames, n_fft/2 + 1]` of a 1-D signal.
    /// Requires `len >= n_fft`.
    pub fn stft_magnitude(&self, n_fft: usize, hop: usize) -> Tensor {
        let x = self.data().view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let n = x.len();
        let frames = stft_frames(n, n_fft, hop);
        assert!(frames >= 1, "signal shorter than one FFT frame");
        let window = hann_window(n_fft);
        let bins = n_fft / 2 + 1;

        let mut planner = FftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(n_fft);
        let mut mags = Array2::<f64>::zeros((frames, bins));
        // Saved one-sided spectra for the adjoint pass.
        let mut spectra: Vec<Vec<Complex<f64>>> = Vec::with_capacity(frames);
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        for f in 0..frames {
            let start = f * hop;
            for i in 0..n_fft {
                buf[i] = Complex::new(x[start + i] * window[i], 0.0);
            }
            fft.process(&mut buf);
            let side: Vec<Complex<f64>> = buf[..bins].to_vec();
            for (b, c) in side.iter().enumerate() {
                mags[[f, b]] = c.norm();
            }
            spectra.push(side);
        }

        Tensor::from_op(
            mags.into_dyn(),
            vec![self.clone()],
            Box::new(move |g, parents| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let mut planner = FftPlanner::<f64>::new();
                let ifft = planner.plan_fft_inverse(n_fft);
                let mut dx = Array1::<f64>::zeros(n);
                let mut h = vec![Complex::new(0.0, 0.0); n_fft];
                for f in 0..frames {
                    for c in h.iter_mut() {
                        *c = Complex::new(0.0, 0.0);
                    }
                    for b in 0..bins {
                        let sp = spectra[f][b];
                        let mag = sp.norm().max(1e-12);
                        let gb = g2[[f, b]] / mag;
                        // dL/d(Re, Im) of the one-sided spectrum.
                        let grad = Complex::new(gb * sp.re, gb * sp.im);
                        // Interior bins appear twice in the full spectrum;
                        // halve them so the hermitian extension sums to the
                        // one-sided gradient exactly once.
                        let scale = if b == 0 || b == n_fft / 2 { 1.0 } else { 0.5 };
                        h[b] = grad * scale;
                        if b != 0 && b != n_fft / 2 {
                            h[n_fft - b] = grad.conj() * scale;
                        }
                    }
                    ifft.process(&mut h);
                    let start = f * hop;
                    for i in 0..n_fft {
                        dx[start + i] += h[i].re * window[i];
                    }
                }
                parents[0].accumulate_grad(dx.into_dyn());
            }),
        )
    }
}
