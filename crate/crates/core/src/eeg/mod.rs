//! Synthetic four-channel EEG, windowed feature extraction, a linear
//! one-vs-rest maximum-margin classifier, stimulus-locked p300 scoring and
//! the monitor that turns detections into robot commands.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

mod features;
mod monitor;
mod p300;
mod svm;
mod synth;

pub use features::{band_powers, extract_features, total_power, Band, FeatureVector, BANDS, FEATURES_PER_CHANNEL};
pub use monitor::{monitor_loop, EegMonitor, MonitorConfig, MonitorOutput, MONITOR_GROUP};
pub use p300::{detect_p300, p300_template, P300_THRESHOLD};
pub use svm::{train_classifier, Classifier, SvmConfig};
pub use synth::{
    bundled_corpus, read_corpus, synth_stream, write_corpus, EegStream, LabeledWindow, StreamKind, SynthConfig,
};

pub const CHANNELS: [&str; 4] = ["AF3", "F3", "AF4", "F4"];
pub const DEFAULT_RATE_HZ: f64 = 128.0;
pub const WINDOW_SECONDS: f64 = 1.0;
pub const STRIDE_SECONDS: f64 = 0.25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EegError {
    #[error("window contains non-finite samples")]
    NonFinite,
    #[error("malformed window: {0}")]
    Malformed(String),
    #[error("feature dimension {got}, classifier expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training set needs at least two classes")]
    SingleClass,
    #[error("class {class} has {count} examples, at least {min} required")]
    TooFewExamples { class: EventKind, count: usize, min: usize },
    #[error("epoch length {got} differs from {expected}")]
    UnequalEpochs { expected: usize, got: usize },
    #[error("need at least {min} standard epochs, got {got}")]
    TooFewStandards { min: usize, got: usize },
    #[error("corpus i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EegWindow {
    pub channels: Vec<String>,
    /// One row per channel, microvolts.
    pub samples: Vec<Vec<f64>>,
    pub rate_hz: f64,
    pub start_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stimulus_tag: Option<u64>,
}

impl EegWindow {
    pub fn new(samples: Vec<Vec<f64>>, rate_hz: f64, start_ms: u64) -> Self {
        EegWindow {
            channels: CHANNELS.iter().map(|c| c.to_string()).collect(),
            samples,
            rate_hz,
            start_ms,
            stimulus_tag: None,
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(vec![vec![0.0; n]; CHANNELS.len()], DEFAULT_RATE_HZ, 0)
    }

    pub fn len(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, label: &str) -> Option<&[f64]> {
        self.channels.iter().position(|c| c == label).map(|i| self.samples[i].as_slice())
    }

    pub fn validate(&self) -> Result<(), EegError> {
        if self.channels.len() != self.samples.len() || self.samples.is_empty() {
            return Err(EegError::Malformed("channel labels do not match sample rows".into()));
        }
        let n = self.len();
        if n == 0 || self.samples.iter().any(|row| row.len() != n) {
            return Err(EegError::Malformed("ragged or empty sample rows".into()));
        }
        if !(self.rate_hz > 0.0) {
            return Err(EegError::Malformed("rate_hz must be positive".into()));
        }
        if self.samples.iter().flatten().any(|v| !v.is_finite()) {
            return Err(EegError::NonFinite);
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut w = self.clone();
        for v in w.samples.iter_mut().flatten() {
            *v *= factor;
        }
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    None,
    Blink,
    P300,
    HighStress,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::None => "none",
            EventKind::Blink => "blink",
            EventKind::P300 => "p300",
            EventKind::HighStress => "high_stress",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EventKind {
    type Err = EegError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [EventKind::None, EventKind::Blink, EventKind::P300, EventKind::HighStress]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| EegError::Malformed(format!("unknown label `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventLabel {
    pub kind: EventKind,
    pub margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CommandKind {
    Stop,
    Resume,
    Start,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandCause {
    Operator,
    Event(EventKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotCommand {
    pub command: CommandKind,
    pub cause: CommandCause,
    pub timestamp_ms: u64,
}
