//! Simulated affective state of the human co-worker.
//!
//! Metrics relax exponentially toward a baseline and jump on workspace
//! events. Samples go to `RAW_AFFECTIVE`; one reward per executed action goes
//! to `REWARD`, computed from the samples that fall inside the action window.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{ExecutedStep, FeedbackClosed, HumanFeedback, RewardSignal, RewardSource};
use crate::bus::{Bus, BusConfig, BusError, Clock, Payload, QueueName};
use crate::events::{contact_events, WorkspaceEvent};
use crate::world::Block;

pub const BASELINE: f64 = 0.2;
pub const DEFAULT_RATE_HZ: f64 = 8.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AffectError {
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("metric value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Engagement,
    Stress,
    Relaxation,
    Excitement,
    Interest,
}

impl Metric {
    pub const ALL: [Metric; 5] =
        [Metric::Engagement, Metric::Stress, Metric::Relaxation, Metric::Excitement, Metric::Interest];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Engagement => "engagement",
            Metric::Stress => "stress",
            Metric::Relaxation => "relaxation",
            Metric::Excitement => "excitement",
            Metric::Interest => "interest",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = AffectError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| AffectError::UnknownMetric(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffectiveSample {
    pub timestamp_ms: u64,
    pub engagement: f64,
    pub stress: f64,
    pub relaxation: f64,
    pub excitement: f64,
    pub interest: f64,
}

impl AffectiveSample {
    pub fn baseline(timestamp_ms: u64) -> Self {
        AffectiveSample {
            timestamp_ms,
            engagement: BASELINE,
            stress: BASELINE,
            relaxation: BASELINE,
            excitement: BASELINE,
            interest: BASELINE,
        }
    }

    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Engagement => self.engagement,
            Metric::Stress => self.stress,
            Metric::Relaxation => self.relaxation,
            Metric::Excitement => self.excitement,
            Metric::Interest => self.interest,
        }
    }

    fn slot(&mut self, m: Metric) -> &mut f64 {
        match m {
            Metric::Engagement => &mut self.engagement,
            Metric::Stress => &mut self.stress,
            Metric::Relaxation => &mut self.relaxation,
            Metric::Excitement => &mut self.excitement,
            Metric::Interest => &mut self.interest,
        }
    }

    pub fn set(&mut self, m: Metric, v: f64) {
        *self.slot(m) = v.clamp(0.0, 1.0);
    }

    pub fn in_range(&self) -> bool {
        Metric::ALL.iter().all(|&m| (0.0..=1.0).contains(&self.get(m)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffectWeights {
    pub w_excitement: f64,
    pub w_stress: f64,
}

impl Default for AffectWeights {
    fn default() -> Self {
        AffectWeights { w_excitement: 1.0, w_stress: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceProfile {
    pub preferred_block: Block,
    #[serde(default = "default_stress_jump")]
    pub stress_jump: f64,
    #[serde(default = "default_excitement_jump")]
    pub excitement_jump: f64,
    #[serde(default = "default_decay_rate")]
    pub decay_rate: f64,
}

fn default_stress_jump() -> f64 {
    0.6
}
fn default_excitement_jump() -> f64 {
    0.5
}
fn default_decay_rate() -> f64 {
    0.5
}

impl PreferenceProfile {
    pub fn prefers(block: Block) -> Self {
        PreferenceProfile {
            preferred_block: block,
            stress_jump: default_stress_jump(),
            excitement_jump: default_excitement_jump(),
            decay_rate: default_decay_rate(),
        }
    }

    pub fn validate(&self) -> Result<(), AffectError> {
        let jump = |x: f64| x > 0.0 && x <= 1.0;
        if !jump(self.stress_jump) || !jump(self.excitement_jump) {
            return Err(AffectError::InvalidProfile("jumps must lie in (0, 1]".into()));
        }
        if !(self.decay_rate > 0.0) {
            return Err(AffectError::InvalidProfile("decay_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Advances the metrics by `dt` seconds, then applies `events`.
pub fn step_affect(
    current: &AffectiveSample,
    events: &[WorkspaceEvent],
    dt: f64,
    profile: &PreferenceProfile,
) -> AffectiveSample {
    let decay = (-profile.decay_rate * dt.max(0.0)).exp();
    let mut next = *current;
    next.timestamp_ms = current.timestamp_ms + (dt.max(0.0) * 1000.0).round() as u64;
    for m in Metric::ALL {
        let v = BASELINE + (current.get(m) - BASELINE) * decay;
        next.set(m, v);
    }
    for ev in events {
        match *ev {
            WorkspaceEvent::RobotGrasped { block } | WorkspaceEvent::BlockUsed { block }
                if block == profile.preferred_block =>
            {
                next.set(Metric::Stress, next.stress + profile.stress_jump);
            }
            WorkspaceEvent::GoalCompleted => {
                next.set(Metric::Excitement, next.excitement + profile.excitement_jump);
            }
            WorkspaceEvent::AffectOverride { metric, value } => next.set(metric, value),
            _ => {}
        }
    }
    next
}

/// `w_e * mean(excitement) - w_s * mean(stress)`, clamped to [-1, 1].
pub fn human_reward(samples: &[AffectiveSample], weights: &AffectWeights, action_index: u64) -> RewardSignal {
    let value = if samples.is_empty() {
        0.0
    } else {
        let n = samples.len() as f64;
        let exc = samples.iter().map(|s| s.excitement).sum::<f64>() / n;
        let stress = samples.iter().map(|s| s.stress).sum::<f64>() / n;
        (weights.w_excitement * exc - weights.w_stress * stress).clamp(-1.0, 1.0)
    };
    RewardSignal { value, action_index, source: RewardSource::Human }
}

/// Stateful publisher: samples at `rate_hz`, emits one reward per action.
#[derive(Debug, Clone)]
pub struct AffectSimulator {
    profile: PreferenceProfile,
    weights: AffectWeights,
    period_ms: u64,
    current: AffectiveSample,
    next_sample_ms: u64,
    window: Vec<AffectiveSample>,
    window_action: Option<u64>,
    dropped: u64,
}

impl AffectSimulator {
    pub fn new(profile: PreferenceProfile, weights: AffectWeights, rate_hz: f64) -> Self {
        let period_ms = (1000.0 / rate_hz).round().max(1.0) as u64;
        AffectSimulator {
            profile,
            weights,
            period_ms,
            current: AffectiveSample::baseline(0),
            next_sample_ms: period_ms,
            window: Vec::new(),
            window_action: None,
            dropped: 0,
        }
    }

    pub fn reset(&mut self, now_ms: u64) {
        self.current = AffectiveSample::baseline(now_ms);
        self.next_sample_ms = now_ms + self.period_ms;
        self.window.clear();
        self.window_action = None;
    }

    pub fn latest(&self) -> AffectiveSample {
        self.current
    }

    pub fn profile(&self) -> &PreferenceProfile {
        &self.profile
    }

    /// Samples evicted from `RAW_AFFECTIVE` under back-pressure.
    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    /// Advances to `now_ms`, applying `events` observed at that instant.
    /// Returns the reward published for a completed action, if any.
    pub fn tick(
        &mut self,
        now_ms: u64,
        events: &[WorkspaceEvent],
        bus: &Bus,
    ) -> Result<Option<RewardSignal>, BusError> {
        let dt = now_ms.saturating_sub(self.current.timestamp_ms) as f64 / 1000.0;
        self.current = step_affect(&self.current, events, dt, &self.profile);
        self.current.timestamp_ms = now_ms;

        if now_ms >= self.next_sample_ms {
            while self.next_sample_ms <= now_ms {
                self.next_sample_ms += self.period_ms;
            }
            let before = bus.stats(&QueueName::RawAffective).dropped;
            bus.publish_dropping_oldest(QueueName::RawAffective, Payload::Affective(self.current))?;
            self.dropped += bus.stats(&QueueName::RawAffective).dropped - before;
            if self.window_action.is_some() {
                self.window.push(self.current);
            }
        }

        let mut published = None;
        for ev in events {
            match *ev {
                WorkspaceEvent::ActionDone { action_index, .. } if self.window_action == Some(action_index) => {
                    // the closing instant always counts, sampled or not
                    if self.window.last().map(|s| s.timestamp_ms) != Some(now_ms) {
                        self.window.push(self.current);
                    }
                    let signal = human_reward(&self.window, &self.weights, action_index);
                    bus.publish(QueueName::Reward, Payload::Reward(signal))?;
                    published = Some(signal);
                    self.window.clear();
                    self.window_action = None;
                }
                WorkspaceEvent::ActionStarted { action_index, .. } => {
                    self.window.clear();
                    self.window_action = Some(action_index);
                }
                _ => {}
            }
        }
        Ok(published)
    }
}

/// Nominal timing of one executed action during simulated training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionTiming {
    pub duration_ms: u64,
    /// Offset of the grasp/contact instant within the action.
    pub contact_ms: u64,
    pub tick_ms: u64,
}

impl Default for ActionTiming {
    fn default() -> Self {
        ActionTiming { duration_ms: 1500, contact_ms: 1000, tick_ms: 50 }
    }
}

/// Simulated human wired through the bus: executed actions drive the affect
/// dynamics, the simulator publishes to `REWARD`, and the learner's reward
/// is whatever it consumes from `REWARD` for that action.
pub struct HumanInTheLoop {
    bus: Bus,
    sim: AffectSimulator,
    timing: ActionTiming,
    now_ms: u64,
}

impl HumanInTheLoop {
    pub fn new(profile: PreferenceProfile, weights: AffectWeights, timing: ActionTiming) -> Self {
        let clock = Clock::manual();
        let bus = Bus::new(BusConfig { record: false, ..BusConfig::default() }, clock)
            .expect("no log file to open");
        Self::with_bus(bus, profile, weights, timing)
    }

    /// Uses an existing bus; its clock must be a manual clock.
    pub fn with_bus(bus: Bus, profile: PreferenceProfile, weights: AffectWeights, timing: ActionTiming) -> Self {
        let now_ms = bus.now_ms();
        let mut sim = AffectSimulator::new(profile, weights, DEFAULT_RATE_HZ);
        sim.reset(now_ms);
        HumanInTheLoop { bus, sim, timing, now_ms }
    }

    pub fn bus(&self) -> &Bus {
        &self.bus
    }

    pub fn simulator(&self) -> &AffectSimulator {
        &self.sim
    }

    fn advance(&mut self, to_ms: u64, events: &[WorkspaceEvent]) -> Result<(), FeedbackClosed> {
        self.now_ms = to_ms;
        self.bus.clock().set_ms(to_ms);
        self.sim.tick(to_ms, events, &self.bus).map_err(|_| FeedbackClosed)?;
        Ok(())
    }
}

impl HumanFeedback for HumanInTheLoop {
    fn begin_episode(&mut self, _episode: usize) -> Result<(), FeedbackClosed> {
        if self.bus.is_closed() {
            return Err(FeedbackClosed);
        }
        self.sim.reset(self.now_ms);
        Ok(())
    }

    fn reward(&mut self, step: &ExecutedStep<'_>) -> Result<f64, FeedbackClosed> {
        let start = self.now_ms;
        let t = self.timing;
        self.advance(
            start,
            &[WorkspaceEvent::ActionStarted { action: step.action, plan_step: 0, action_index: step.action_index }],
        )?;
        let mut offset = t.tick_ms;
        let mut contact_done = false;
        while offset < t.duration_ms {
            let events = if !contact_done && offset >= t.contact_ms {
                contact_done = true;
                contact_events(&step.action, step.after.is_goal() && !step.before.is_goal())
            } else {
                Vec::new()
            };
            self.advance(start + offset, &events)?;
            offset += t.tick_ms;
        }
        self.advance(
            start + t.duration_ms,
            &[WorkspaceEvent::ActionDone { action: step.action, plan_step: 0, action_index: step.action_index }],
        )?;

        // Only signals for this action count; a missing signal is zero.
        let mut value = 0.0;
        loop {
            match self.bus.try_consume(&QueueName::Reward) {
                Ok(Some(msg)) => {
                    if let Payload::Reward(sig) = msg.body {
                        if sig.action_index == step.action_index {
                            value += sig.value;
                        }
                    }
                }
                Ok(None) => break,
                Err(_) => return Err(FeedbackClosed),
            }
        }
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile() -> PreferenceProfile {
        PreferenceProfile::prefers(Block::Green)
    }

    #[test]
    fn half_life_decay() {
        let mut s = AffectiveSample::baseline(0);
        s.stress = 1.0;
        let p = profile();
        let next = step_affect(&s, &[], std::f64::consts::LN_2 / p.decay_rate, &p);
        assert!((next.stress - 0.6).abs() < 1e-12);
    }

    #[test]
    fn grasp_of_preferred_block_raises_stress() {
        let s = AffectiveSample::baseline(0);
        let next = step_affect(&s, &[WorkspaceEvent::RobotGrasped { block: Block::Green }], 0.05, &profile());
        assert!((next.stress - 0.8).abs() < 1e-12);
        let other = step_affect(&s, &[WorkspaceEvent::RobotGrasped { block: Block::Red }], 0.05, &profile());
        assert!((other.stress - BASELINE).abs() < 1e-12);
    }

    #[test]
    fn stress_saturates() {
        let mut s = AffectiveSample::baseline(0);
        s.stress = 0.9;
        let next = step_affect(&s, &[WorkspaceEvent::RobotGrasped { block: Block::Green }], 1e-9, &profile());
        assert_eq!(next.stress, 1.0);
    }

    #[test]
    fn override_replaces_metric() {
        let s = AffectiveSample::baseline(0);
        let next = step_affect(&s, &[WorkspaceEvent::AffectOverride { metric: Metric::Stress, value: 1.0 }], 0.5, &profile());
        assert_eq!(next.stress, 1.0);
    }

    #[test]
    fn reward_values() {
        let w = AffectWeights::default();
        let mut s = AffectiveSample::baseline(0);
        s.excitement = 0.5;
        s.stress = 0.5;
        assert_eq!(human_reward(&[s], &w, 0).value, 0.0);
        s.excitement = 0.0;
        s.stress = 1.0;
        assert_eq!(human_reward(&[s], &w, 0).value, -1.0);
        assert_eq!(human_reward(&[AffectiveSample::baseline(0); 4], &w, 0).value, 0.0);
        assert_eq!(human_reward(&[], &w, 0).value, 0.0);
        assert_eq!(human_reward(&[], &w, 0).source, RewardSource::Human);
    }

    #[test]
    fn metric_names_parse() {
        for m in Metric::ALL {
            assert_eq!(m.name().parse::<Metric>().unwrap(), m);
        }
        assert!("valence".parse::<Metric>().is_err());
    }

    #[test]
    fn profile_validation() {
        assert!(profile().validate().is_ok());
        assert!(PreferenceProfile { stress_jump: 0.0, ..profile() }.validate().is_err());
        assert!(PreferenceProfile { decay_rate: 0.0, ..profile() }.validate().is_err());
    }
}
