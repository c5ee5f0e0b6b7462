//! Simulated robot that executes the current plan, projects its intentions
//! onto the blocks, replans around human claims and halts on STOP.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eeg::{CommandCause, CommandKind, EventKind, RobotCommand};
use crate::events::{contact_events, Alert, AlertKind, WorkspaceEvent};
use crate::planner::bfs_plan;
use crate::world::{Block, GroundAction, RewardConfig, WorldState};

pub const BLOCK_SIZE_M: f64 = 0.05;
pub const SLOT_RADIUS_M: f64 = 0.5;
pub const REACH_MIN_M: f64 = 0.3;
pub const REACH_MARGIN_M: f64 = 0.1;
pub const FLOOR_FACTOR: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecutorError {
    #[error("cannot {op} while {state}")]
    InvalidTransition { op: &'static str, state: ExecState },
    #[error("block {0} is held by the robot")]
    Grasped(Block),
    #[error("no plan reaches the goal without {0:?}")]
    NoPlan(BTreeSet<Block>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecState {
    Idle,
    Running,
    Halted,
    Done,
}

impl std::fmt::Display for ExecState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExecState::Idle => "idle",
            ExecState::Running => "running",
            ExecState::Halted => "halted",
            ExecState::Done => "done",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaltCause {
    Operator,
    Blink,
    P300,
    HighStress,
    NoPlan,
}

impl From<CommandCause> for HaltCause {
    fn from(c: CommandCause) -> Self {
        match c {
            CommandCause::Operator | CommandCause::Event(EventKind::None) => HaltCause::Operator,
            CommandCause::Event(EventKind::Blink) => HaltCause::Blink,
            CommandCause::Event(EventKind::P300) => HaltCause::P300,
            CommandCause::Event(EventKind::HighStress) => HaltCause::HighStress,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionStatus {
    pub plan: Vec<GroundAction>,
    pub step_index: usize,
    pub state: ExecState,
    pub claimed: BTreeSet<Block>,
    pub halt_cause: Option<HaltCause>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Marker {
    PickupNext,
    ReservedLater,
    ClaimedFaded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentionAnnotation {
    pub block: Block,
    pub marker: Marker,
    pub plan_step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmPose {
    pub end_effector: [f64; 3],
    pub joints: [f64; 6],
    pub target_block: Option<Block>,
}

impl ArmPose {
    pub fn at(end_effector: [f64; 3], target_block: Option<Block>) -> Self {
        ArmPose { end_effector, joints: joints_for(end_effector), target_block }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FloorCircle {
    pub center: [f64; 3],
    pub radius_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Influence {
    pub sphere_radius_m: f64,
    pub floor_circle: Option<FloorCircle>,
}

/// Volume and floor area of influence around the arm base at the origin.
pub fn influence_radius(pose: &ArmPose, target: Option<[f64; 3]>) -> Influence {
    let [x, y, z] = pose.end_effector;
    let reach = (x * x + y * y + z * z).sqrt();
    Influence {
        sphere_radius_m: (reach + REACH_MARGIN_M).max(REACH_MIN_M),
        floor_circle: target.map(|t| FloorCircle { center: [t[0], t[1], 0.0], radius_m: FLOOR_FACTOR * z.max(0.0) }),
    }
}

/// Fixed analytic joint feed for the dashboard; every joint stays in ±π.
pub fn joints_for(ee: [f64; 3]) -> [f64; 6] {
    let [x, y, z] = ee;
    let r = (x * x + y * y).sqrt();
    let elevation = z.atan2(r.max(1e-9));
    let extension = (r.hypot(z) / 0.8).min(1.0);
    [
        y.atan2(x),
        elevation,
        -PI * 0.5 * extension,
        PI * 0.5 - elevation,
        0.0,
        y.atan2(x) * 0.5,
    ]
}

/// Home slot of a block on the table, on a circle around the arm base.
pub fn slot(b: Block) -> [f64; 3] {
    let angle = PI / 6.0 + b.index() as f64 * PI / 3.0;
    [SLOT_RADIUS_M * angle.cos(), SLOT_RADIUS_M * angle.sin(), 0.0]
}

/// Centre of the top face of `b` in `world`, or the gripper if held.
pub fn block_position(world: &WorldState, b: Block, ee: [f64; 3]) -> [f64; 3] {
    let stack = world.stack_of(b);
    match stack.iter().position(|&x| x == b) {
        Some(level) => {
            let [x, y, _] = slot(stack[0]);
            [x, y, BLOCK_SIZE_M * (level + 1) as f64]
        }
        None => ee,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecutorConfig {
    pub speed_mps: f64,
    pub dwell_ms: u64,
    pub tick_ms: u64,
    pub home: [f64; 3],
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        ExecutorConfig { speed_mps: 0.4, dwell_ms: 500, tick_ms: 50, home: [0.0, 0.0, 0.4] }
    }
}

/// Everything the dashboard shows about the robot in one message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutorSnapshot {
    pub timestamp_ms: u64,
    pub status: ExecutionStatus,
    pub annotations: Vec<IntentionAnnotation>,
    pub pose: ArmPose,
    pub influence: Influence,
    pub world: WorldState,
    pub block_positions: Vec<(Block, [f64; 3])>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    /// Travelling to the current action's target; `started` once announced.
    Moving { started: bool },
    /// Action applied; settling before the next one.
    Dwelling { remaining_ms: u64 },
}

#[derive(Debug, Clone)]
pub struct Executor {
    cfg: ExecutorConfig,
    reward: RewardConfig,
    initial: WorldState,
    world: WorldState,
    status: ExecutionStatus,
    pose: ArmPose,
    phase: Phase,
    next_action_index: u64,
    now_ms: u64,
}

impl Executor {
    pub fn new(initial: WorldState, reward: RewardConfig, cfg: ExecutorConfig) -> Self {
        Executor {
            cfg,
            reward,
            world: initial.clone(),
            initial,
            status: ExecutionStatus {
                plan: Vec::new(),
                step_index: 0,
                state: ExecState::Idle,
                claimed: BTreeSet::new(),
                halt_cause: None,
            },
            pose: ArmPose::at(cfg.home, None),
            phase: Phase::Moving { started: false },
            next_action_index: 0,
            now_ms: 0,
        }
    }

    pub fn status(&self) -> &ExecutionStatus {
        &self.status
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn pose(&self) -> &ArmPose {
        &self.pose
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    pub fn config(&self) -> &ExecutorConfig {
        &self.cfg
    }

    pub fn remaining_plan(&self) -> &[GroundAction] {
        &self.status.plan[self.status.step_index..]
    }

    pub fn current_action(&self) -> Option<GroundAction> {
        self.remaining_plan().first().copied()
    }

    /// Plans from the initial state around current claims and starts running.
    pub fn start(&mut self) -> Result<Vec<WorkspaceEvent>, ExecutorError> {
        if !matches!(self.status.state, ExecState::Idle | ExecState::Done) {
            return Err(ExecutorError::InvalidTransition { op: "start", state: self.status.state });
        }
        self.world = self.initial.clone();
        self.phase = Phase::Moving { started: false };
        self.status.step_index = 0;
        self.status.halt_cause = None;
        match bfs_plan(&self.world, &self.status.claimed) {
            Some(plan) => {
                self.status.plan = plan.clone();
                self.status.state = if plan.is_empty() { ExecState::Done } else { ExecState::Running };
                Ok(vec![WorkspaceEvent::Replanned { plan }])
            }
            None => {
                self.status.plan.clear();
                Ok(vec![self.halt_no_plan()])
            }
        }
    }

    /// Freezes motion where it is; the current tick does not move the arm.
    pub fn stop(&mut self, cause: HaltCause) -> Result<(), ExecutorError> {
        if self.status.state != ExecState::Running {
            return Err(ExecutorError::InvalidTransition { op: "stop", state: self.status.state });
        }
        self.status.state = ExecState::Halted;
        self.status.halt_cause = Some(cause);
        Ok(())
    }

    /// Continues at the frozen step. After a `no_plan` halt the plan is
    /// recomputed first.
    pub fn resume(&mut self) -> Result<Vec<WorkspaceEvent>, ExecutorError> {
        if self.status.state != ExecState::Halted {
            return Err(ExecutorError::InvalidTransition { op: "resume", state: self.status.state });
        }
        let mut events = Vec::new();
        if self.status.halt_cause == Some(HaltCause::NoPlan) {
            let plan = bfs_plan(&self.world, &self.status.claimed)
                .ok_or_else(|| ExecutorError::NoPlan(self.status.claimed.clone()))?;
            self.splice_plan(plan.clone());
            events.push(WorkspaceEvent::Replanned { plan });
        }
        self.status.halt_cause = None;
        self.status.state = if self.remaining_plan().is_empty() { ExecState::Done } else { ExecState::Running };
        Ok(events)
    }

    /// Reserves `block` for the human and replans if the remaining plan
    /// touched it.
    pub fn claim(&mut self, block: Block) -> Result<Vec<WorkspaceEvent>, ExecutorError> {
        if self.world.held() == Some(block) {
            return Err(ExecutorError::Grasped(block));
        }
        let mut events = Vec::new();
        if self.status.claimed.insert(block) {
            events.push(WorkspaceEvent::Claimed { block });
        }
        let touched = self.remaining_plan().iter().any(|a| a.mentions(block));
        let active = matches!(self.status.state, ExecState::Running | ExecState::Halted);
        if touched && active {
            match bfs_plan(&self.world, &self.status.claimed) {
                Some(plan) => {
                    self.splice_plan(plan.clone());
                    events.push(WorkspaceEvent::Replanned { plan });
                    if self.remaining_plan().is_empty() && self.status.state == ExecState::Running {
                        self.status.state = ExecState::Done;
                    }
                }
                None => {
                    self.status.plan.truncate(self.status.step_index);
                    events.push(self.halt_no_plan());
                }
            }
        }
        Ok(events)
    }

    pub fn release(&mut self, block: Block) -> Vec<WorkspaceEvent> {
        if self.status.claimed.remove(&block) {
            vec![WorkspaceEvent::Released { block }]
        } else {
            Vec::new()
        }
    }

    pub fn apply_command(&mut self, cmd: &RobotCommand) -> Result<Vec<WorkspaceEvent>, ExecutorError> {
        match cmd.command {
            CommandKind::Stop => self.stop(cmd.cause.into()).map(|_| Vec::new()),
            CommandKind::Resume => self.resume(),
            CommandKind::Start => self.start(),
        }
    }

    fn halt_no_plan(&mut self) -> WorkspaceEvent {
        self.status.state = ExecState::Halted;
        self.status.halt_cause = Some(HaltCause::NoPlan);
        self.phase = Phase::Moving { started: false };
        WorkspaceEvent::Alert(Alert {
            kind: AlertKind::NoPlan,
            timestamp_ms: self.now_ms,
            detail: format!(
                "no plan without {}",
                self.status.claimed.iter().map(|b| b.name()).collect::<Vec<_>>().join(",")
            ),
            score: 0.0,
        })
    }

    /// Keeps the executed prefix and replaces the rest.
    fn splice_plan(&mut self, tail: Vec<GroundAction>) {
        self.status.plan.truncate(self.status.step_index);
        self.status.plan.extend(tail);
        if let Phase::Moving { .. } = self.phase {
            self.phase = Phase::Moving { started: false };
        }
    }

    fn target_of(&self, action: &GroundAction) -> (Block, [f64; 3]) {
        let ee = self.pose.end_effector;
        let above = |p: [f64; 3]| [p[0], p[1], p[2] + BLOCK_SIZE_M];
        match *action {
            GroundAction::Pickup(x) => (x, block_position(&self.world, x, ee)),
            GroundAction::Putdown(x) => (x, above(slot(x))),
            GroundAction::Stack { onto, .. } => (onto, above(block_position(&self.world, onto, ee))),
            GroundAction::Form3Tower { top, .. } => (top, block_position(&self.world, top, ee)),
        }
    }

    /// Advances simulated time by one tick. Only a running executor moves.
    pub fn tick(&mut self, dt_ms: u64) -> Vec<WorkspaceEvent> {
        self.now_ms += dt_ms;
        let mut events = Vec::new();
        if self.status.state != ExecState::Running {
            return events;
        }
        let mut budget_ms = dt_ms;
        while budget_ms > 0 && self.status.state == ExecState::Running {
            match self.phase {
                Phase::Dwelling { remaining_ms } => {
                    let used = remaining_ms.min(budget_ms);
                    budget_ms -= used;
                    self.phase = if used == remaining_ms {
                        Phase::Moving { started: false }
                    } else {
                        Phase::Dwelling { remaining_ms: remaining_ms - used }
                    };
                }
                Phase::Moving { started } => {
                    let Some(action) = self.current_action() else {
                        self.status.state = ExecState::Done;
                        break;
                    };
                    let step = self.status.step_index;
                    if !started {
                        events.push(WorkspaceEvent::ActionStarted {
                            action,
                            plan_step: step,
                            action_index: self.next_action_index,
                        });
                        self.phase = Phase::Moving { started: true };
                    }
                    let (block, target) = self.target_of(&action);
                    self.pose.target_block = Some(block);
                    let from = self.pose.end_effector;
                    let d: Vec<f64> = (0..3).map(|i| target[i] - from[i]).collect();
                    let dist = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let reach = self.cfg.speed_mps * budget_ms as f64 / 1000.0;
                    if dist > reach {
                        let f = reach / dist;
                        self.pose = ArmPose::at([from[0] + d[0] * f, from[1] + d[1] * f, from[2] + d[2] * f], Some(block));
                        break;
                    }
                    let used = if self.cfg.speed_mps > 0.0 {
                        ((dist / self.cfg.speed_mps * 1000.0).ceil() as u64).min(budget_ms)
                    } else {
                        0
                    };
                    budget_ms -= used;
                    self.pose = ArmPose::at(target, Some(block));
                    events.extend(self.contact(action, step));
                }
            }
        }
        events
    }

    fn contact(&mut self, action: GroundAction, step: usize) -> Vec<WorkspaceEvent> {
        let transition = self
            .world
            .apply(&action, &self.reward)
            .expect("plans are validated against the current state");
        let completes = transition.next.is_goal() && !self.world.is_goal();
        self.world = transition.next;
        let mut events = contact_events(&action, false);
        events.push(WorkspaceEvent::ActionDone { action, plan_step: step, action_index: self.next_action_index });
        if completes {
            events.push(WorkspaceEvent::GoalCompleted);
        }
        self.next_action_index += 1;
        self.status.step_index += 1;
        if self.remaining_plan().is_empty() {
            self.status.state = ExecState::Done;
            self.pose.target_block = None;
            self.phase = Phase::Moving { started: false };
        } else {
            self.phase = Phase::Dwelling { remaining_ms: self.cfg.dwell_ms };
        }
        events
    }

    /// The next block to be picked up gets an arrow, every other block the
    /// remaining plan uses a cross, and claimed blocks are faded.
    pub fn annotations(&self) -> Vec<IntentionAnnotation> {
        let mut out: Vec<IntentionAnnotation> = self
            .status
            .claimed
            .iter()
            .map(|&block| IntentionAnnotation { block, marker: Marker::ClaimedFaded, plan_step: self.status.step_index })
            .collect();
        let active = matches!(self.status.state, ExecState::Running | ExecState::Halted | ExecState::Idle);
        if !active {
            return out;
        }
        let base = self.status.step_index;
        let remaining = self.remaining_plan();
        let next_pick = remaining.iter().enumerate().find_map(|(i, a)| match a {
            GroundAction::Pickup(x) => Some((*x, base + i)),
            _ => None,
        });
        let mut seen: BTreeSet<Block> = self.status.claimed.clone();
        if let Some((block, plan_step)) = next_pick {
            if seen.insert(block) {
                out.push(IntentionAnnotation { block, marker: Marker::PickupNext, plan_step });
            }
        }
        for (i, a) in remaining.iter().enumerate() {
            for block in a.params() {
                if seen.insert(block) {
                    out.push(IntentionAnnotation { block, marker: Marker::ReservedLater, plan_step: base + i });
                }
            }
        }
        out
    }

    pub fn snapshot(&self) -> ExecutorSnapshot {
        let target = self.current_action().map(|a| self.target_of(&a).1);
        let ee = self.pose.end_effector;
        ExecutorSnapshot {
            timestamp_ms: self.now_ms,
            status: self.status.clone(),
            annotations: self.annotations(),
            pose: self.pose,
            influence: influence_radius(&self.pose, target.filter(|_| self.status.state == ExecState::Running)),
            world: self.world.clone(),
            block_positions: Block::ALL.iter().map(|&b| (b, block_position(&self.world, b, ee))).collect(),
        }
    }
}
