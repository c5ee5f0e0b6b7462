use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{EegError, EegWindow};

pub const FEATURES_PER_CHANNEL: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub name: &'static str,
    pub low_hz: f64,
    pub high_hz: f64,
}

/// δ, θ, α, β; each band is `[low, high)`.
pub const BANDS: [Band; 4] = [
    Band { name: "delta", low_hz: 1.0, high_hz: 4.0 },
    Band { name: "theta", low_hz: 4.0, high_hz: 8.0 },
    Band { name: "alpha", low_hz: 8.0, high_hz: 13.0 },
    Band { name: "beta", low_hz: 13.0, high_hz: 30.0 },
];

/// Per channel: mean, variance, peak-to-peak, then δ θ α β band power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// The seven features of channel `ch`.
    pub fn channel(&self, ch: usize) -> &[f64] {
        &self.0[ch * FEATURES_PER_CHANNEL..(ch + 1) * FEATURES_PER_CHANNEL]
    }
}

fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

fn demeaned(x: &[f64]) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - mean).collect()
}

/// Tapered mean-square power of the de-meaned signal: `Σ(x·w)² / Σw²`.
pub fn total_power(x: &[f64]) -> f64 {
    let w = hann(x.len());
    let wss: f64 = w.iter().map(|v| v * v).sum();
    demeaned(x).iter().zip(&w).map(|(v, w)| (v * w).powi(2)).sum::<f64>() / wss
}

/// Band powers from the Hann-tapered DFT of the de-meaned signal, normalised
/// so that summing every one-sided bin reproduces `total_power`.
pub fn band_powers(x: &[f64], rate_hz: f64) -> [f64; 4] {
    let n = x.len();
    let w = hann(n);
    let wss: f64 = w.iter().map(|v| v * v).sum();
    let mut buf: Vec<Complex<f64>> = demeaned(x)
        .iter()
        .zip(&w)
        .map(|(v, w)| Complex::new(v * w, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);

    let scale = 1.0 / (n as f64 * wss);
    let mut out = [0.0; 4];
    for k in 1..=n / 2 {
        let freq = k as f64 * rate_hz / n as f64;
        // bins k and n-k carry the same power for real input
        let mirrored = if 2 * k == n { 1.0 } else { 2.0 };
        let p = mirrored * buf[k].norm_sqr() * scale;
        if let Some(i) = BANDS.iter().position(|b| freq >= b.low_hz && freq < b.high_hz) {
            out[i] += p;
        }
    }
    out
}

pub fn extract_features(window: &EegWindow) -> Result<FeatureVector, EegError> {
    window.validate()?;
    let mut out = Vec::with_capacity(window.samples.len() * FEATURES_PER_CHANNEL);
    for row in &window.samples {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = row.iter().copied().fold(f64::INFINITY, f64::min);
        out.extend([mean, var, max - min]);
        out.extend(band_powers(row, window.rate_hz));
    }
    Ok(FeatureVector(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tone(freq: f64, n: usize, rate: f64) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * freq * i as f64 / rate).sin()).collect()
    }

    /// Direct O(n²) DFT, independent of the FFT path.
    fn dft_band_powers(x: &[f64], rate: f64) -> [f64; 4] {
        let n = x.len();
        let w: Vec<f64> = (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos()).collect();
        let wss: f64 = w.iter().map(|v| v * v).sum();
        let mean = x.iter().sum::<f64>() / n as f64;
        let mut out = [0.0; 4];
        for k in 1..=n / 2 {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, v) in x.iter().enumerate() {
                let ang = -2.0 * PI * (k * i) as f64 / n as f64;
                re += (v - mean) * w[i] * ang.cos();
                im += (v - mean) * w[i] * ang.sin();
            }
            let f = k as f64 * rate / n as f64;
            let m = if 2 * k == n { 1.0 } else { 2.0 };
            if let Some(b) = BANDS.iter().position(|b| f >= b.low_hz && f < b.high_hz) {
                out[b] += m * (re * re + im * im) / (n as f64 * wss);
            }
        }
        out
    }

    #[test]
    fn zero_window_has_zero_features() {
        let f = extract_features(&EegWindow::zeros(128)).unwrap();
        assert_eq!(f.len(), 28);
        assert!(f.0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn alpha_tone_dominates_alpha_band() {
        let x = tone(10.0, 128, 128.0);
        let p = band_powers(&x, 128.0);
        for (i, v) in p.iter().enumerate() {
            if i != 2 {
                assert!(p[2] >= 100.0 * v, "band {i}: {v} vs alpha {}", p[2]);
            }
        }
    }

    #[test]
    fn fft_matches_direct_dft() {
        let x: Vec<f64> = (0..128).map(|i| ((i * 37 % 101) as f64 - 50.0) * 0.3).collect();
        let fast = band_powers(&x, 128.0);
        let slow = dft_band_powers(&x, 128.0);
        for (a, b) in fast.iter().zip(slow) {
            assert!((a - b).abs() <= 1e-9 * b.max(1.0));
        }
    }

    #[test]
    fn dc_window_statistics() {
        let w = EegWindow::new(vec![vec![3.5; 128]; 4], 128.0, 0);
        let f = extract_features(&w).unwrap();
        for ch in 0..4 {
            let c = f.channel(ch);
            assert_eq!(c[0], 3.5);
            assert_eq!(c[1], 0.0);
            assert_eq!(c[2], 0.0);
        }
    }

    #[test]
    fn non_finite_rejected() {
        let mut w = EegWindow::zeros(128);
        w.samples[2][7] = f64::NAN;
        assert_eq!(extract_features(&w), Err(EegError::NonFinite));
    }
}
