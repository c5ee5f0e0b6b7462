//! One-vs-rest linear maximum-margin classifier trained by full-batch
//! subgradient descent on the L2-regularised hinge loss.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EegError, EventKind, EventLabel, FeatureVector};

pub const MIN_EXAMPLES_PER_CLASS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Minimum top margin for a non-`none` label.
    pub threshold: f64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig { lambda: 1e-3, epochs: 500, learning_rate: 0.5, threshold: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    /// Event classes with a separator, in ascending order; `none` is never one.
    pub classes: Vec<EventKind>,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub threshold: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn train_classifier(labeled: &[(FeatureVector, EventKind)], cfg: &SvmConfig) -> Result<Classifier, EegError> {
    let mut present: Vec<EventKind> = labeled.iter().map(|(_, k)| *k).collect();
    present.sort();
    present.dedup();
    if present.len() < 2 {
        return Err(EegError::SingleClass);
    }
    for class in &present {
        let count = labeled.iter().filter(|(_, k)| k == class).count();
        if count < MIN_EXAMPLES_PER_CLASS {
            return Err(EegError::TooFewExamples { class: *class, count, min: MIN_EXAMPLES_PER_CLASS });
        }
    }
    let dim = labeled[0].0.len();
    if let Some((f, _)) = labeled.iter().find(|(f, _)| f.len() != dim) {
        return Err(EegError::DimensionMismatch { expected: dim, got: f.len() });
    }

    let n = labeled.len() as f64;
    let mut mean = vec![0.0; dim];
    for (f, _) in labeled {
        for (m, v) in mean.iter_mut().zip(f.as_slice()) {
            *m += v / n;
        }
    }
    let mut scale = vec![0.0; dim];
    for (f, _) in labeled {
        for ((s, v), m) in scale.iter_mut().zip(f.as_slice()).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    for s in &mut scale {
        *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
    }
    let z: Vec<Vec<f64>> = labeled
        .iter()
        .map(|(f, _)| f.as_slice().iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect())
        .collect();

    let classes: Vec<EventKind> = present.iter().copied().filter(|k| *k != EventKind::None).collect();
    let mut weights = Vec::with_capacity(classes.len());
    let mut bias = Vec::with_capacity(classes.len());
    for class in &classes {
        let y: Vec<f64> = labeled.iter().map(|(_, k)| if k == class { 1.0 } else { -1.0 }).collect();
        let (w, b) = fit_binary(&z, &y, cfg);
        weights.push(w);
        bias.push(b);
    }
    Ok(Classifier { classes, weights, bias, mean, scale, threshold: cfg.threshold })
}

fn fit_binary(z: &[Vec<f64>], y: &[f64], cfg: &SvmConfig) -> (Vec<f64>, f64) {
    let dim = z[0].len();
    let n = z.len() as f64;
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    for t in 0..cfg.epochs {
        let mut gw: Vec<f64> = w.iter().map(|wi| cfg.lambda * wi).collect();
        let mut gb = 0.0;
        for (x, &yi) in z.iter().zip(y) {
            if yi * (dot(&w, x) + b) < 1.0 {
                for (g, xi) in gw.iter_mut().zip(x) {
                    *g -= yi * xi / n;
                }
                gb -= yi / n;
            }
        }
        let eta = cfg.learning_rate / ((t + 1) as f64).sqrt();
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= eta * g;
        }
        b -= eta * gb;
    }
    (w, b)
}

impl Classifier {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn standardize(&self, f: &FeatureVector) -> Result<Vec<f64>, EegError> {
        if f.len() != self.dim() {
            return Err(EegError::DimensionMismatch { expected: self.dim(), got: f.len() });
        }
        Ok(f.as_slice().iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect())
    }

    /// Raw margin of every class separator.
    pub fn margins(&self, f: &FeatureVector) -> Result<Vec<(EventKind, f64)>, EegError> {
        let z = self.standardize(f)?;
        Ok(self
            .classes
            .iter()
            .zip(self.weights.iter().zip(&self.bias))
            .map(|(k, (w, b))| (*k, dot(w, &z) + b))
            .collect())
    }

    /// Highest-margin class if its margin clears the threshold, else `none`.
    pub fn classify(&self, f: &FeatureVector) -> Result<EventLabel, EegError> {
        let margins = self.margins(f)?;
        let (kind, margin) = margins
            .into_iter()
            .fold((EventKind::None, f64::NEG_INFINITY), |best, m| if m.1 > best.1 { m } else { best });
        if margin > self.threshold {
            Ok(EventLabel { kind, margin })
        } else {
            Ok(EventLabel { kind: EventKind::None, margin })
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EegError> {
        let json = serde_json::to_vec(self).map_err(|e| EegError::Io(e.to_string()))?;
        fs::write(path, json).map_err(|e| EegError::Io(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EegError> {
        let bytes = fs::read(path).map_err(|e| EegError::Io(e.to_string()))?;
        serde_json::from_slice(&bytes).map_err(|e| EegError::Io(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable() -> Vec<(FeatureVector, EventKind)> {
        (0..60)
            .map(|i| {
                let x = (i % 7) as f64 * 0.3;
                let y = (i % 5) as f64 * 0.2;
                if i % 2 == 0 {
                    (FeatureVector(vec![2.0 + x, y]), EventKind::Blink)
                } else {
                    (FeatureVector(vec![-2.0 - x, y]), EventKind::None)
                }
            })
            .collect()
    }

    #[test]
    fn separable_set_is_fit_exactly() {
        let data = separable();
        let clf = train_classifier(&data, &SvmConfig::default()).unwrap();
        for (f, k) in &data {
            assert_eq!(clf.classify(f).unwrap().kind, *k);
        }
    }

    #[test]
    fn single_class_rejected() {
        let data: Vec<_> = separable().into_iter().filter(|(_, k)| *k == EventKind::Blink).collect();
        assert_eq!(train_classifier(&data, &SvmConfig::default()), Err(EegError::SingleClass));
    }

    #[test]
    fn too_few_examples_rejected() {
        let mut data: Vec<_> = separable().into_iter().filter(|(_, k)| *k == EventKind::None).collect();
        data.push((FeatureVector(vec![3.0, 0.0]), EventKind::Blink));
        assert!(matches!(
            train_classifier(&data, &SvmConfig::default()),
            Err(EegError::TooFewExamples { class: EventKind::Blink, count: 1, .. })
        ));
    }

    #[test]
    fn dimension_mismatch() {
        let clf = train_classifier(&separable(), &SvmConfig::default()).unwrap();
        assert!(matches!(
            clf.classify(&FeatureVector(vec![1.0])),
            Err(EegError::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn mean_point_is_decided_by_bias() {
        let clf = train_classifier(&separable(), &SvmConfig::default()).unwrap();
        let at_mean = FeatureVector(clf.mean.clone());
        let a = clf.classify(&at_mean).unwrap();
        let b = clf.classify(&at_mean).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.margin, clf.bias[0]);
    }

    #[test]
    fn snapshot_reload_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.json");
        let clf = train_classifier(&separable(), &SvmConfig::default()).unwrap();
        clf.save(&path).unwrap();
        assert_eq!(Classifier::load(&path).unwrap(), clf);
    }
}
