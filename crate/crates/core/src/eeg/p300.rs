//! Stimulus-locked p300 scoring by template correlation.

use super::{EegError, EegWindow};

pub const P300_THRESHOLD: f64 = 0.5;
pub const MIN_STANDARDS: usize = 10;

/// Template peak and width, ms after the stimulus.
pub const TEMPLATE_PEAK_MS: f64 = 300.0;
pub const TEMPLATE_WIDTH_MS: f64 = 50.0;
/// Only this post-stimulus span enters the correlation.
pub const ANALYSIS_MS: (f64, f64) = (150.0, 500.0);

fn span(rate_hz: f64, n: usize) -> std::ops::Range<usize> {
    let lo = (ANALYSIS_MS.0 * rate_hz / 1000.0).round() as usize;
    let hi = ((ANALYSIS_MS.1 * rate_hz / 1000.0).round() as usize).min(n);
    lo.min(hi)..hi
}

/// Positive Gaussian peak at `TEMPLATE_PEAK_MS`, one value per sample.
pub fn p300_template(n: usize, rate_hz: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let t = i as f64 * 1000.0 / rate_hz;
            let z = (t - TEMPLATE_PEAK_MS) / TEMPLATE_WIDTH_MS;
            (-0.5 * z * z).exp()
        })
        .collect()
}

/// Pearson correlation, over the analysis span and pooled across channels,
/// between `probe − mean(standards)` and the template. Zero when the
/// difference is flat.
pub fn detect_p300(standards: &[EegWindow], probe: &EegWindow) -> Result<f64, EegError> {
    if standards.len() < MIN_STANDARDS {
        return Err(EegError::TooFewStandards { min: MIN_STANDARDS, got: standards.len() });
    }
    probe.validate()?;
    let n = probe.len();
    let rows = probe.samples.len();
    for s in standards {
        s.validate()?;
        if s.len() != n || s.samples.len() != rows {
            return Err(EegError::UnequalEpochs { expected: n, got: s.len() });
        }
    }
    let k = standards.len() as f64;
    let template = p300_template(n, probe.rate_hz);
    let range = span(probe.rate_hz, n);

    let mut diff = Vec::with_capacity(rows * range.len());
    let mut tmpl = Vec::with_capacity(rows * range.len());
    for ch in 0..rows {
        for i in range.clone() {
            let mean: f64 = standards.iter().map(|s| s.samples[ch][i]).sum::<f64>() / k;
            diff.push(probe.samples[ch][i] - mean);
            tmpl.push(template[i]);
        }
    }
    Ok(pearson(&diff, &tmpl))
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.is_empty() {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    // tolerate float residue from averaging identical epochs
    if sxx <= 1e-18 * n || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eeg::{synth_stream, EventKind, StreamKind, SynthConfig};

    fn oddball_set() -> (Vec<EegWindow>, Vec<EegWindow>) {
        let stream = synth_stream(StreamKind::P300Oddball, 100.0, 17, &SynthConfig::default());
        let (odd, std): (Vec<_>, Vec<_>) = stream.into_iter().partition(|w| w.label == EventKind::P300);
        (odd.into_iter().map(|w| w.window).collect(), std.into_iter().map(|w| w.window).collect())
    }

    fn mean_epoch(epochs: &[EegWindow]) -> EegWindow {
        let mut out = epochs[0].clone();
        for (ch, row) in out.samples.iter_mut().enumerate() {
            for (i, v) in row.iter_mut().enumerate() {
                *v = epochs.iter().map(|e| e.samples[ch][i]).sum::<f64>() / epochs.len() as f64;
            }
        }
        out
    }

    #[test]
    fn template_peaks_in_window() {
        let t = p300_template(128, 128.0);
        let peak = t.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let ms = peak as f64 * 1000.0 / 128.0;
        assert!((250.0..=400.0).contains(&ms));
    }

    #[test]
    fn mean_standard_probe_scores_zero() {
        let (_, std) = oddball_set();
        let probe = mean_epoch(&std);
        assert!(detect_p300(&std, &probe).unwrap().abs() < 1e-6);
    }

    #[test]
    fn oddball_scores_high_and_inverted_scores_negative() {
        let (odd, std) = oddball_set();
        let mean = mean_epoch(&std);
        for probe in &odd {
            let s = detect_p300(&std, probe).unwrap();
            assert!(s > P300_THRESHOLD, "oddball score {s}");
            let mut inverted = probe.clone();
            for (ch, row) in inverted.samples.iter_mut().enumerate() {
                for (i, v) in row.iter_mut().enumerate() {
                    *v = 2.0 * mean.samples[ch][i] - *v;
                }
            }
            assert!(detect_p300(&std, &inverted).unwrap() < 0.0);
        }
    }

    #[test]
    fn unequal_lengths_rejected() {
        let (odd, std) = oddball_set();
        let mut short = odd[0].clone();
        short.samples.iter_mut().for_each(|r| r.truncate(64));
        assert!(matches!(detect_p300(&std, &short), Err(EegError::UnequalEpochs { .. })));
    }

    #[test]
    fn too_few_standards_rejected() {
        let (odd, std) = oddball_set();
        assert_eq!(
            detect_p300(&std[..3], &odd[0]),
            Err(EegError::TooFewStandards { min: MIN_STANDARDS, got: 3 })
        );
    }
}
