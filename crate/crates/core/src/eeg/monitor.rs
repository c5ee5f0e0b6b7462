//! Turns classified EEG windows and affect samples into robot commands and
//! dashboard alerts.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::p300::{detect_p300, MIN_STANDARDS};
use super::{extract_features, Classifier, CommandCause, CommandKind, EegError, EegWindow, EventKind, RobotCommand};
use crate::affect::AffectiveSample;
use crate::bus::{Bus, BusError, Payload, QueueName};
use crate::events::{topics, Alert, AlertKind, WorkspaceEvent};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorConfig {
    /// Overlapping windows see the same blink; further STOPs are suppressed
    /// for this long.
    pub blink_refractory_ms: u64,
    pub p300_threshold: f64,
    pub max_standards: usize,
    pub stress_threshold: f64,
    pub stress_hold_ms: u64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            blink_refractory_ms: 1000,
            p300_threshold: super::P300_THRESHOLD,
            max_standards: 50,
            stress_threshold: 0.8,
            stress_hold_ms: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MonitorOutput {
    Command(RobotCommand),
    Alert(Alert),
}

#[derive(Debug)]
pub struct EegMonitor {
    clf: Arc<Classifier>,
    cfg: MonitorConfig,
    last_blink_ms: Option<u64>,
    standards: VecDeque<EegWindow>,
    stress_since: Option<u64>,
    stress_alerted: bool,
}

impl EegMonitor {
    pub fn new(clf: Arc<Classifier>, cfg: MonitorConfig) -> Self {
        EegMonitor { clf, cfg, last_blink_ms: None, standards: VecDeque::new(), stress_since: None, stress_alerted: false }
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.cfg
    }

    pub fn standards(&self) -> usize {
        self.standards.len()
    }

    /// Untagged windows go through the classifier; stimulus-tagged epochs are
    /// scored for a p300 once enough standards are buffered, and those without
    /// one join the standards.
    pub fn handle_window(&mut self, window: &EegWindow, now_ms: u64) -> Result<Vec<MonitorOutput>, EegError> {
        let mut out = Vec::new();
        if let Some(tag) = window.stimulus_tag {
            window.validate()?;
            let mut standard = true;
            if self.standards.len() >= MIN_STANDARDS {
                let buffered: Vec<EegWindow> = self.standards.iter().cloned().collect();
                let score = detect_p300(&buffered, window)?;
                if score > self.cfg.p300_threshold {
                    standard = false;
                    out.push(MonitorOutput::Alert(Alert {
                        kind: AlertKind::P300,
                        timestamp_ms: now_ms,
                        detail: format!("p300 on stimulus {tag}"),
                        score,
                    }));
                }
            }
            if standard {
                self.standards.push_back(window.clone());
                while self.standards.len() > self.cfg.max_standards {
                    self.standards.pop_front();
                }
            }
            return Ok(out);
        }

        let label = self.clf.classify(&extract_features(window)?)?;
        if label.kind == EventKind::Blink {
            let quiet = self.last_blink_ms.map_or(true, |t| now_ms >= t + self.cfg.blink_refractory_ms);
            if quiet {
                self.last_blink_ms = Some(now_ms);
                out.push(MonitorOutput::Command(RobotCommand {
                    command: CommandKind::Stop,
                    cause: CommandCause::Event(EventKind::Blink),
                    timestamp_ms: now_ms,
                }));
                out.push(MonitorOutput::Alert(Alert {
                    kind: AlertKind::ControlBlink,
                    timestamp_ms: now_ms,
                    detail: "control blink".into(),
                    score: label.margin,
                }));
            }
        }
        Ok(out)
    }

    /// Edge-triggered: one alert per continuous stretch above the threshold.
    pub fn handle_affect(&mut self, sample: &AffectiveSample) -> Option<MonitorOutput> {
        if sample.stress <= self.cfg.stress_threshold {
            self.stress_since = None;
            self.stress_alerted = false;
            return None;
        }
        let since = *self.stress_since.get_or_insert(sample.timestamp_ms);
        if !self.stress_alerted && sample.timestamp_ms >= since + self.cfg.stress_hold_ms {
            self.stress_alerted = true;
            return Some(MonitorOutput::Alert(Alert {
                kind: AlertKind::HighStress,
                timestamp_ms: sample.timestamp_ms,
                detail: "high stress".into(),
                score: sample.stress,
            }));
        }
        None
    }

    pub fn publish(bus: &Bus, outputs: Vec<MonitorOutput>) -> Result<(), BusError> {
        for o in outputs {
            match o {
                MonitorOutput::Command(c) => {
                    bus.publish(QueueName::RobotCommand, Payload::Command(c))?;
                }
                MonitorOutput::Alert(a) => {
                    bus.publish(QueueName::topic(topics::ALERTS), Payload::Workspace(WorkspaceEvent::Alert(a)))?;
                }
            }
        }
        Ok(())
    }
}

/// Consumes EEG and RAW_AFFECTIVE until `stop` is raised or the bus closes.
pub fn monitor_loop(bus: &Bus, clf: Arc<Classifier>, cfg: MonitorConfig, stop: &AtomicBool) -> Result<(), BusError> {
    let mut monitor = EegMonitor::new(clf, cfg);
    bus.subscribe(&QueueName::RawAffective, MONITOR_GROUP);
    let poll = Duration::from_millis(20);
    while !stop.load(Ordering::Relaxed) {
        match bus.consume(&QueueName::Eeg, poll) {
            Ok(Some(msg)) => {
                if let Payload::Eeg(w) = msg.body {
                    // malformed windows are skipped rather than fatal
                    if let Ok(outputs) = monitor.handle_window(&w, msg.timestamp_ms) {
                        EegMonitor::publish(bus, outputs)?;
                    }
                }
            }
            Ok(None) => {}
            Err(BusError::Closed) => return Ok(()),
            Err(e) => return Err(e),
        }
        match bus.consume_as(&QueueName::RawAffective, MONITOR_GROUP, Duration::ZERO) {
            Ok(Some(msg)) => {
                if let Payload::Affective(s) = msg.body {
                    if let Some(o) = monitor.handle_affect(&s) {
                        EegMonitor::publish(bus, vec![o])?;
                    }
                }
            }
            Ok(None) => {}
            Err(BusError::Closed) => return Ok(()),
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

/// Consumer group the monitor uses on RAW_AFFECTIVE so that it does not
/// compete with other affect readers.
pub const MONITOR_GROUP: &str = "monitor";
