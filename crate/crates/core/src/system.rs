//! The whole workspace in simulated time: EEG generation and monitoring,
//! plan execution, affect simulation and the gateway updater, all stepped
//! in a fixed order so that a seed and a script determine the event log.

use std::collections::VecDeque;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affect::{AffectSimulator, AffectiveSample, DEFAULT_RATE_HZ as AFFECT_RATE_HZ};
use crate::bus::{Bus, BusConfig, BusError, BusMessage, Clock, Payload, QueueName};
use crate::eeg::{
    bundled_corpus, extract_features, train_classifier, Classifier, CommandCause, CommandKind, EegError, EegMonitor,
    EegStream, LabeledWindow, MonitorConfig, RobotCommand, MONITOR_GROUP, SvmConfig, SynthConfig, STRIDE_SECONDS, WINDOW_SECONDS,
};
use crate::events::{topics, WorkspaceEvent};
use crate::executor::{ExecState, ExecutionStatus, Executor, ExecutorConfig, ExecutorError};
use crate::gateway::{ingest, GatewayError, Store};
use crate::scenario::{ControlCommand, Input, Scenario, ScenarioError, Script, ScriptEntry};

/// Seed of the bundled training corpus.
pub const CORPUS_SEED: u64 = 2024;

const GATEWAY_GROUP: &str = "gateway";

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Executor(#[from] ExecutorError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Eeg(#[from] EegError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub seed: u64,
    pub tick_ms: u64,
    pub synth: SynthConfig,
    pub monitor: MonitorConfig,
    pub executor: ExecutorConfig,
    pub log_path: Option<PathBuf>,
    pub log_sync: bool,
    /// Keep the full event log in memory.
    pub record: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            tick_ms: 50,
            synth: SynthConfig::default(),
            monitor: MonitorConfig::default(),
            executor: ExecutorConfig::default(),
            log_path: None,
            log_sync: false,
            record: true,
        }
    }
}

/// Trains the blink classifier on a labelled corpus.
pub fn train_blink_classifier(corpus: &[LabeledWindow]) -> Result<Classifier, EegError> {
    let labeled = corpus
        .iter()
        .map(|w| Ok((extract_features(&w.window)?, w.label)))
        .collect::<Result<Vec<_>, EegError>>()?;
    train_classifier(&labeled, &SvmConfig::default())
}

/// Classifier trained on the bundled corpus.
pub fn default_classifier() -> Classifier {
    train_blink_classifier(&bundled_corpus(CORPUS_SEED)).expect("bundled corpus is balanced")
}

/// Result of an operator input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputOutcome {
    pub status: ExecutionStatus,
    pub events: Vec<WorkspaceEvent>,
}

pub struct Simulation {
    cfg: SimConfig,
    scenario: Scenario,
    bus: Bus,
    executor: Executor,
    affect: AffectSimulator,
    eeg: EegStream,
    monitor: EegMonitor,
    store: Arc<Store>,
    now_ms: u64,
    window_len: usize,
    stride_ms: u64,
    script: VecDeque<ScriptEntry>,
    pending: Vec<WorkspaceEvent>,
}

impl std::fmt::Debug for Simulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulation").field("now_ms", &self.now_ms).finish_non_exhaustive()
    }
}

impl Simulation {
    pub fn new(scenario: Scenario, classifier: Arc<Classifier>, cfg: SimConfig) -> Result<Self, SimError> {
        scenario.validate()?;
        let clock = Clock::manual();
        let bus = Bus::new(
            BusConfig { record: cfg.record, log_path: cfg.log_path.clone(), log_sync: cfg.log_sync, ..BusConfig::default() },
            clock.clone(),
        )?;
        for q in [QueueName::Eeg, QueueName::RawAffective] {
            bus.subscribe(&q, GATEWAY_GROUP);
        }
        bus.subscribe(&QueueName::RawAffective, MONITOR_GROUP);
        let executor = Executor::new(scenario.initial_state()?, scenario.reward, cfg.executor);
        let mut affect = AffectSimulator::new(scenario.profile, scenario.weights, AFFECT_RATE_HZ);
        affect.reset(0);
        let window_len = (cfg.synth.rate_hz * WINDOW_SECONDS).round() as usize;
        let stride_ms = (STRIDE_SECONDS * 1000.0).round() as u64;
        let mut sim = Simulation {
            eeg: EegStream::new(cfg.synth, cfg.seed),
            monitor: EegMonitor::new(classifier, cfg.monitor),
            store: Arc::new(Store::new(clock)),
            scenario,
            bus,
            executor,
            affect,
            now_ms: 0,
            window_len,
            stride_ms,
            script: VecDeque::new(),
            pending: Vec::new(),
            cfg,
        };
        if sim.scenario.autostart {
            let events = sim.executor.start()?;
            sim.publish_events(&events)?;
            sim.pending.extend(events);
        }
        sim.publish_snapshot()?;
        sim.bus.publish(QueueName::RawAffective, Payload::Affective(sim.affect.latest()))?;
        sim.run_updater()?;
        Ok(sim)
    }

    pub fn bus(&self) -> &Bus {
        &self.bus
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn executor(&self) -> &Executor {
        &self.executor
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    pub fn tick_ms(&self) -> u64 {
        self.cfg.tick_ms
    }

    pub fn latest_affect(&self) -> AffectiveSample {
        self.affect.latest()
    }

    pub fn load_script(&mut self, script: &Script) {
        self.script.extend(script.events.iter().copied());
    }

    /// Applies an operator input at the current instant. Claims, releases,
    /// overrides and blink injections take effect at once; control commands
    /// go through `ROBOT_COMMAND` and take effect on the next executor step.
    pub fn apply_input(&mut self, input: Input) -> Result<InputOutcome, SimError> {
        self.bus.publish(QueueName::topic(topics::INPUT), Payload::Workspace(WorkspaceEvent::Input { input }))?;
        let mut events = Vec::new();
        match input {
            Input::Claim { block } => events = self.executor.claim(block)?,
            Input::Release { block } => events = self.executor.release(block),
            Input::Blink => self.eeg.inject_blink(0),
            Input::AffectOverride { metric, value } => {
                events.push(WorkspaceEvent::AffectOverride { metric, value: value.clamp(0.0, 1.0) })
            }
            Input::Control { command } => {
                let state = self.executor.status().state;
                let (kind, ok, op) = match command {
                    ControlCommand::Start => (CommandKind::Start, matches!(state, ExecState::Idle | ExecState::Done), "start"),
                    ControlCommand::Stop => (CommandKind::Stop, state == ExecState::Running, "stop"),
                    ControlCommand::Resume => (CommandKind::Resume, state == ExecState::Halted, "resume"),
                };
                if !ok {
                    return Err(ExecutorError::InvalidTransition { op, state }.into());
                }
                let cmd = RobotCommand { command: kind, cause: CommandCause::Operator, timestamp_ms: self.now_ms };
                self.bus.publish(QueueName::RobotCommand, Payload::Command(cmd))?;
            }
        }
        self.publish_events(&events)?;
        self.pending.extend(events.iter().cloned());
        if !events.is_empty() {
            self.publish_snapshot()?;
            self.run_updater()?;
        }
        Ok(InputOutcome { status: self.executor.status().clone(), events })
    }

    /// Advances one tick.
    pub fn step(&mut self) -> Result<(), SimError> {
        self.now_ms += self.cfg.tick_ms;
        self.bus.clock().set_ms(self.now_ms);

        while self.script.front().is_some_and(|e| e.at_ms <= self.now_ms) {
            let entry = self.script.pop_front().expect("checked");
            // scripted inputs that the executor rejects are recorded and skipped
            let _ = self.apply_input(entry.input);
        }

        // EEG up to now, one window per stride
        let target = (self.now_ms as f64 * self.cfg.synth.rate_hz / 1000.0).floor() as u64;
        let have = self.eeg.samples_emitted();
        if target > have {
            self.eeg.generate((target - have) as usize);
        }
        if self.now_ms % self.stride_ms == 0 {
            if let Some(w) = self.eeg.latest_window(self.window_len) {
                self.bus.publish(QueueName::Eeg, Payload::Eeg(w))?;
            }
        }

        while let Some(msg) = self.bus.try_consume(&QueueName::Eeg)? {
            if let Payload::Eeg(w) = msg.body {
                let outputs = self.monitor.handle_window(&w, self.now_ms)?;
                EegMonitor::publish(&self.bus, outputs)?;
            }
        }

        let mut events = std::mem::take(&mut self.pending);
        while let Some(msg) = self.bus.try_consume(&QueueName::RobotCommand)? {
            if let Payload::Command(cmd) = msg.body {
                // a STOP for an already halted robot is a no-op
                if let Ok(evs) = self.executor.apply_command(&cmd) {
                    self.publish_events(&evs)?;
                    events.extend(evs);
                }
            }
        }
        let tick_events = self.executor.tick(self.cfg.tick_ms);
        self.publish_events(&tick_events)?;
        events.extend(tick_events);
        self.publish_snapshot()?;

        self.affect.tick(self.now_ms, &events, &self.bus)?;
        while let Some(msg) = self.bus.consume_as(&QueueName::RawAffective, MONITOR_GROUP, std::time::Duration::ZERO)? {
            if let Payload::Affective(s) = msg.body {
                if let Some(o) = self.monitor.handle_affect(&s) {
                    EegMonitor::publish(&self.bus, vec![o])?;
                }
            }
        }

        self.run_updater()
    }

    /// Steps until `until_ms`.
    pub fn run_until(&mut self, until_ms: u64) -> Result<(), SimError> {
        while self.now_ms + self.cfg.tick_ms <= until_ms {
            self.step()?;
        }
        Ok(())
    }

    /// Plays a script to its end and flushes the log.
    pub fn run_script(&mut self, script: &Script) -> Result<(), SimError> {
        self.load_script(script);
        self.run_until(script.duration_ms())?;
        self.bus.flush()?;
        Ok(())
    }

    pub fn shutdown(&self) -> Result<(), SimError> {
        self.bus.close()?;
        self.store.flush()?;
        Ok(())
    }

    pub fn records(&self) -> Vec<BusMessage> {
        self.bus.records()
    }

    fn publish_events(&self, events: &[WorkspaceEvent]) -> Result<(), BusError> {
        for e in events {
            self.bus.publish(QueueName::topic(topics::WORKSPACE), Payload::Workspace(e.clone()))?;
        }
        Ok(())
    }

    fn publish_snapshot(&self) -> Result<(), BusError> {
        let snap = self.executor.snapshot();
        self.bus.publish(QueueName::topic(topics::STATUS), Payload::Workspace(WorkspaceEvent::Executor(snap)))?;
        Ok(())
    }

    /// Folds dashboard traffic into the store and discards consumed
    /// messages nobody else reads.
    fn run_updater(&mut self) -> Result<(), SimError> {
        let status = QueueName::topic(topics::STATUS);
        let alerts = QueueName::topic(topics::ALERTS);
        for q in [&status, &alerts, &QueueName::RawAffective, &QueueName::Reward] {
            for msg in self.bus.drain(q)? {
                ingest(&self.store, &msg)?;
            }
        }
        for q in [QueueName::Eeg, QueueName::RawAffective] {
            while let Some(msg) = self.bus.consume_as(&q, GATEWAY_GROUP, std::time::Duration::ZERO)? {
                if q == QueueName::Eeg {
                    ingest(&self.store, &msg)?;
                }
            }
        }
        for q in [QueueName::topic(topics::WORKSPACE), QueueName::topic(topics::INPUT)] {
            self.bus.drain(&q)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::keys;
    use crate::world::Block;
    use std::sync::OnceLock;

    fn clf() -> Arc<Classifier> {
        static CLF: OnceLock<Arc<Classifier>> = OnceLock::new();
        CLF.get_or_init(|| Arc::new(default_classifier())).clone()
    }

    fn sim(seed: u64) -> Simulation {
        Simulation::new(Scenario::default(), clf(), SimConfig { seed, ..SimConfig::default() }).unwrap()
    }

    #[test]
    fn autostart_runs_plan_to_goal() {
        let mut s = sim(1);
        s.run_until(20_000).unwrap();
        assert_eq!(s.executor().status().state, ExecState::Done);
        assert!(s.executor().world().is_goal());
        assert!(s.store().peek(keys::PLAN).is_some());
    }

    #[test]
    fn no_spurious_stops_on_background() {
        let mut s = sim(2);
        s.run_until(10_000).unwrap();
        let stops = s.records().iter().filter(|m| m.queue == QueueName::RobotCommand).count();
        assert_eq!(stops, 0);
    }

    #[test]
    fn blink_halts_robot() {
        let mut s = sim(3);
        s.run_until(1000).unwrap();
        s.apply_input(Input::Blink).unwrap();
        s.run_until(2000).unwrap();
        let status = s.executor().status();
        assert_eq!(status.state, ExecState::Halted);
        assert_eq!(status.halt_cause, Some(crate::executor::HaltCause::Blink));
    }

    #[test]
    fn claim_replans_immediately() {
        let mut s = sim(4);
        let out = s.apply_input(Input::Claim { block: Block::Green }).unwrap();
        assert!(!out.status.plan.iter().any(|a| a.mentions(Block::Green)));
    }

    #[test]
    fn control_rejected_in_wrong_state() {
        let mut s = sim(5);
        assert!(matches!(
            s.apply_input(Input::Control { command: ControlCommand::Resume }),
            Err(SimError::Executor(ExecutorError::InvalidTransition { .. }))
        ));
    }

    #[test]
    fn affect_samples_at_eight_hz() {
        let mut s = sim(6);
        let before = s.bus().stats(&QueueName::RawAffective).published;
        s.run_until(2000).unwrap();
        let n = s.bus().stats(&QueueName::RawAffective).published - before;
        assert!((15..=17).contains(&n), "{n} samples");
    }
}
