//! Workspace events exchanged between the executor, the affect simulator,
//! the EEG monitor and the dashboard topics.

use serde::{Deserialize, Serialize};

use crate::affect::Metric;
use crate::executor::ExecutorSnapshot;
use crate::scenario::Input;
use crate::world::{Block, GroundAction};

/// Dashboard topic names.
pub mod topics {
    pub const STATUS: &str = "dashboard.status";
    pub const ALERTS: &str = "dashboard.alerts";
    pub const WORKSPACE: &str = "workspace.events";
    pub const INPUT: &str = "workspace.input";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertKind {
    ControlBlink,
    P300,
    HighStress,
    NoPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub kind: AlertKind,
    pub timestamp_ms: u64,
    pub detail: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum WorkspaceEvent {
    ActionStarted { action: GroundAction, plan_step: usize, action_index: u64 },
    RobotGrasped { block: Block },
    /// A block other than the grasped one took part in an action.
    BlockUsed { block: Block },
    ActionDone { action: GroundAction, plan_step: usize, action_index: u64 },
    GoalCompleted,
    Claimed { block: Block },
    Released { block: Block },
    Replanned { plan: Vec<GroundAction> },
    AffectOverride { metric: Metric, value: f64 },
    /// Operator input as received, before it takes effect.
    Input { input: Input },
    Alert(Alert),
    Executor(ExecutorSnapshot),
}

/// Events fired at the moment an action takes effect on the blocks.
pub fn contact_events(action: &GroundAction, completes_goal: bool) -> Vec<WorkspaceEvent> {
    let mut out = Vec::new();
    match *action {
        GroundAction::Pickup(x) => out.push(WorkspaceEvent::RobotGrasped { block: x }),
        GroundAction::Putdown(_) => {}
        GroundAction::Stack { onto, .. } => out.push(WorkspaceEvent::BlockUsed { block: onto }),
        GroundAction::Form3Tower { bottom, middle, top } => {
            out.extend([bottom, middle, top].map(|block| WorkspaceEvent::BlockUsed { block }));
        }
    }
    if completes_goal {
        out.push(WorkspaceEvent::GoalCompleted);
    }
    out
}
