//! Tabular Q-learning over the blocks world with a two-phase bootstrap:
//! phase 1 learns from task reward alone, phase 2 warm-starts from that table
//! and adds the human reward stream (`R = R^T + R^H`).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::{Block, GroundAction, RewardConfig, WorldError, WorldState};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid learning config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed q-table: {0}")]
    Format(#[from] serde_json::Error),
}

/// Raised by a feedback source once it can no longer deliver rewards.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("reward source closed")]
pub struct FeedbackClosed;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QTable {
    entries: BTreeMap<String, BTreeMap<GroundAction, f64>>,
}

impl QTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, state_key: &str, action: &GroundAction) -> f64 {
        self.entries
            .get(state_key)
            .and_then(|row| row.get(action))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn set(&mut self, state_key: &str, action: GroundAction, value: f64) {
        match self.entries.get_mut(state_key) {
            Some(row) => {
                row.insert(action, value);
            }
            None => {
                self.entries.insert(state_key.to_string(), BTreeMap::from([(action, value)]));
            }
        }
    }

    /// Max over the valid actions of `state`; zero for goal states.
    pub fn max_value(&self, state: &WorldState) -> f64 {
        if state.is_goal() {
            return 0.0;
        }
        let key = state.encode();
        state
            .valid_actions()
            .iter()
            .map(|a| self.get(&key, a))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn states(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.values().flat_map(|row| row.values().copied())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AgentError> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AgentError> {
        let table: QTable = serde_json::from_slice(&fs::read(path)?)?;
        for key in table.entries.keys() {
            WorldState::decode(key)?;
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay: f64,
    pub max_steps: usize,
    pub episodes: usize,
    /// Probability that an episode starts from a random reachable state
    /// instead of the scenario's initial state.
    pub exploring_starts: f64,
    /// Exploration rate used on exploring-start episodes.
    pub sweep_epsilon: f64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            alpha: 0.1,
            gamma: 0.95,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay: 0.995,
            max_steps: 40,
            episodes: 200_000,
            exploring_starts: 0.7,
            sweep_epsilon: 1.0,
        }
    }
}

impl LearnConfig {
    /// Phase-2 defaults: same rates, exploration restarted at 0.3.
    pub fn phase2() -> Self {
        LearnConfig { epsilon_start: 0.3, episodes: 2000, exploring_starts: 0.0, ..Self::default() }
    }

    /// Baseline for phase 2 without bootstrapping: the phase-2 budget from
    /// an empty table, with the full phase-1 exploration schedule.
    pub fn scratch() -> Self {
        LearnConfig { episodes: 2000, exploring_starts: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::InvalidConfig(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must lie in (0, 1]");
        }
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in [0, 1)");
        }
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.epsilon_start) || !unit(self.epsilon_end) || !unit(self.epsilon_decay) {
            return bad("epsilon schedule values must lie in [0, 1]");
        }
        if !unit(self.exploring_starts) || !unit(self.sweep_epsilon) {
            return bad("exploring_starts must lie in [0, 1]");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive");
        }
        Ok(())
    }

    pub fn epsilon(&self, episode: usize) -> f64 {
        (self.epsilon_start * self.epsilon_decay.powi(episode as i32)).max(self.epsilon_end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardSource {
    Task,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSignal {
    pub value: f64,
    pub action_index: u64,
    pub source: RewardSource,
}

/// ε-greedy choice; argmax ties go to the lexicographically first action.
pub fn select_action<R: Rng + ?Sized>(q: &QTable, state: &WorldState, epsilon: f64, rng: &mut R) -> GroundAction {
    let actions = state.valid_actions();
    assert!(!actions.is_empty(), "no valid action in {state}");
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        return *actions.choose(rng).expect("non-empty");
    }
    greedy_action(q, &state.encode(), &actions)
}

fn greedy_action(q: &QTable, key: &str, actions: &[GroundAction]) -> GroundAction {
    let mut best = actions[0];
    let mut best_v = q.get(key, &best);
    for a in &actions[1..] {
        let v = q.get(key, a);
        if v > best_v {
            best = *a;
            best_v = v;
        }
    }
    best
}

/// One-step Q-learning update.
pub fn q_update(
    q: &mut QTable,
    cfg: &LearnConfig,
    state: &WorldState,
    action: GroundAction,
    reward: f64,
    next: &WorldState,
) {
    let key = state.encode();
    let old = q.get(&key, &action);
    let target = reward + cfg.gamma * q.max_value(next);
    q.set(&key, action, old + cfg.alpha * (target - old));
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub actions: Vec<GroundAction>,
    pub reached_goal: bool,
}

impl Rollout {
    pub fn mentions(&self, b: Block) -> bool {
        self.actions.iter().any(|a| a.mentions(b))
    }

    /// Steps to the goal, or `None` if the rollout hit the step cap.
    pub fn goal_length(&self) -> Option<usize> {
        self.reached_goal.then_some(self.actions.len())
    }
}

pub fn greedy_rollout(q: &QTable, start: &WorldState, max_steps: usize) -> Rollout {
    let cfg = RewardConfig::default();
    let mut state = start.clone();
    let mut actions = Vec::new();
    while !state.is_goal() && actions.len() < max_steps {
        let valid = state.valid_actions();
        let a = greedy_action(q, &state.encode(), &valid);
        state = state.apply(&a, &cfg).expect("greedy action is valid").next;
        actions.push(a);
    }
    Rollout { actions, reached_goal: state.is_goal() }
}

/// One executed action as seen by a human feedback source.
#[derive(Debug, Clone)]
pub struct ExecutedStep<'a> {
    pub episode: usize,
    pub action_index: u64,
    pub action: GroundAction,
    pub before: &'a WorldState,
    pub after: &'a WorldState,
}

/// Source of `R^H` for executed actions.
pub trait HumanFeedback {
    fn begin_episode(&mut self, _episode: usize) -> Result<(), FeedbackClosed> {
        Ok(())
    }

    fn reward(&mut self, step: &ExecutedStep<'_>) -> Result<f64, FeedbackClosed>;
}

/// Contributes nothing; phase 1 runs with this.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoFeedback;

impl HumanFeedback for NoFeedback {
    fn reward(&mut self, _step: &ExecutedStep<'_>) -> Result<f64, FeedbackClosed> {
        Ok(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub episode: usize,
    pub steps: usize,
    #[serde(rename = "total_R")]
    pub total_r: f64,
    #[serde(rename = "total_RT")]
    pub total_rt: f64,
    #[serde(rename = "total_RH")]
    pub total_rh: f64,
    /// Length of the greedy rollout from the start state after this episode;
    /// `None` when it does not reach the goal.
    pub greedy_steps: Option<usize>,
}

/// Per-step reward composition, kept only when requested.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReward {
    pub task: f64,
    pub human: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub table: QTable,
    pub trace: Vec<EpisodeTrace>,
    /// First episode from which 50 consecutive greedy evaluations are optimal.
    pub converged_at: Option<usize>,
    /// First episode from which every later greedy rollout reaches the goal
    /// without touching the monitored block.
    pub avoidance_at: Option<usize>,
    pub aborted: bool,
    pub step_rewards: Vec<StepReward>,
}

impl TrainOutcome {
    pub fn converged(&self) -> bool {
        self.converged_at.is_some()
    }
}

pub const CONVERGENCE_WINDOW: usize = 50;

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub start: WorldState,
    pub reward: RewardConfig,
    /// Block whose avoidance is tracked in `TrainOutcome::avoidance_at`.
    pub monitor_block: Option<Block>,
    pub record_step_rewards: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            start: WorldState::all_on_table(),
            reward: RewardConfig::default(),
            monitor_block: None,
            record_step_rewards: false,
        }
    }
}

/// Phase 1: Q-learning from an empty table on task reward only.
pub fn train_phase1<R: Rng + ?Sized>(
    cfg: &LearnConfig,
    opts: &TrainOptions,
    rng: &mut R,
) -> Result<TrainOutcome, AgentError> {
    train(QTable::new(), cfg, opts, &mut NoFeedback, rng)
}

/// Phase 2: warm-start from `q0` and learn on `R^T + R^H`.
pub fn bootstrap_phase2<R: Rng + ?Sized, H: HumanFeedback + ?Sized>(
    q0: QTable,
    feedback: &mut H,
    cfg: &LearnConfig,
    opts: &TrainOptions,
    rng: &mut R,
) -> Result<TrainOutcome, AgentError> {
    train(q0, cfg, opts, feedback, rng)
}

/// Generic training driver shared by both phases.
pub fn train<R: Rng + ?Sized, H: HumanFeedback + ?Sized>(
    mut q: QTable,
    cfg: &LearnConfig,
    opts: &TrainOptions,
    feedback: &mut H,
    rng: &mut R,
) -> Result<TrainOutcome, AgentError> {
    cfg.validate()?;
    opts.reward.validate()?;
    opts.start.validate()?;

    let optimal = crate::planner::optimal_length(&opts.start);
    let starts = if cfg.exploring_starts > 0.0 {
        crate::planner::reachable_states(&opts.start)
            .into_iter()
            .filter(|s| !s.is_goal())
            .collect()
    } else {
        Vec::new()
    };

    let mut trace = Vec::with_capacity(cfg.episodes);
    let mut step_rewards = Vec::new();
    let mut aborted = false;
    let mut action_index = 0u64;
    let mut avoiding_since: Option<usize> = None;

    'episodes: for episode in 0..cfg.episodes {
        let (mut state, epsilon) = if !starts.is_empty() && rng.gen::<f64>() < cfg.exploring_starts {
            (starts.choose(rng).expect("non-empty").clone(), cfg.sweep_epsilon)
        } else {
            (opts.start.clone(), cfg.epsilon(episode))
        };
        if feedback.begin_episode(episode).is_err() {
            aborted = true;
            break;
        }
        let (mut total_rt, mut total_rh, mut steps) = (0.0, 0.0, 0);
        while steps < cfg.max_steps && !state.is_goal() {
            let action = select_action(&q, &state, epsilon, rng);
            let tr = state.apply(&action, &opts.reward)?;
            let human = match feedback.reward(&ExecutedStep {
                episode,
                action_index,
                action,
                before: &state,
                after: &tr.next,
            }) {
                Ok(v) => v,
                Err(FeedbackClosed) => {
                    aborted = true;
                    break 'episodes;
                }
            };
            action_index += 1;
            let total = tr.task_reward + human;
            if opts.record_step_rewards {
                step_rewards.push(StepReward { task: tr.task_reward, human, total });
            }
            q_update(&mut q, cfg, &state, action, total, &tr.next);
            total_rt += tr.task_reward;
            total_rh += human;
            steps += 1;
            state = tr.next;
        }

        let greedy = greedy_rollout(&q, &opts.start, cfg.max_steps);
        if let Some(b) = opts.monitor_block {
            if greedy.reached_goal && !greedy.mentions(b) {
                avoiding_since.get_or_insert(episode);
            } else {
                avoiding_since = None;
            }
        }
        trace.push(EpisodeTrace {
            episode,
            steps,
            total_r: total_rt + total_rh,
            total_rt,
            total_rh,
            greedy_steps: greedy.goal_length(),
        });
    }

    let converged_at = optimal.and_then(|opt| convergence_episode(&trace, opt));
    Ok(TrainOutcome {
        table: q,
        trace,
        converged_at,
        avoidance_at: avoiding_since,
        aborted,
        step_rewards,
    })
}

/// First episode `e` such that greedy evaluations `e .. e + 50` all have
/// length `optimal`.
pub fn convergence_episode(trace: &[EpisodeTrace], optimal: usize) -> Option<usize> {
    let mut run = 0;
    for (i, t) in trace.iter().enumerate() {
        if t.greedy_steps == Some(optimal) {
            run += 1;
            if run == CONVERGENCE_WINDOW {
                return Some(i + 1 - CONVERGENCE_WINDOW);
            }
        } else {
            run = 0;
        }
    }
    None
}

pub fn write_trace<W: Write>(mut out: W, trace: &[EpisodeTrace]) -> io::Result<()> {
    for t in trace {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<EpisodeTrace>, AgentError> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Upper bound on |q| implied by the reward scale.
pub fn value_bound(reward: &RewardConfig, max_human: f64, gamma: f64) -> f64 {
    (reward.max_step_reward() + max_human.abs()) / (1.0 - gamma)
}

/// Blocks touched by a rollout.
pub fn blocks_used(rollout: &Rollout) -> BTreeSet<Block> {
    rollout.actions.iter().flat_map(|a| a.params()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use Block::*;

    #[test]
    fn zero_reward_leaves_table_unchanged() {
        let mut q = QTable::new();
        let s = WorldState::all_on_table();
        let a = GroundAction::Pickup(Red);
        let next = s.apply(&a, &RewardConfig::default()).unwrap().next;
        q_update(&mut q, &LearnConfig::default(), &s, a, 0.0, &next);
        assert!(q.values().all(|v| v == 0.0));
    }

    #[test]
    fn single_update_arithmetic() {
        let mut q = QTable::new();
        let s = WorldState::all_on_table();
        let a = GroundAction::Pickup(Red);
        let next = s.apply(&a, &RewardConfig::default()).unwrap().next;
        q_update(&mut q, &LearnConfig::default(), &s, a, 10.0, &next);
        assert!((q.get(&s.encode(), &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn greedy_picks_highest_and_breaks_ties_lexicographically() {
        let s = WorldState::all_on_table();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = QTable::new();
        assert_eq!(select_action(&q, &s, 0.0, &mut rng), GroundAction::Pickup(Blue));
        let mut q = QTable::new();
        q.set(&s.encode(), GroundAction::Pickup(Purple), 5.0);
        for _ in 0..20 {
            assert_eq!(select_action(&q, &s, 0.0, &mut rng), GroundAction::Pickup(Purple));
        }
    }

    #[test]
    fn terminal_next_contributes_no_future_value() {
        let s = WorldState::from_predicates(&[(Red, Blue), (Green, Red)], &[Blue, Orange, Purple, Yellow], false)
            .unwrap();
        let a = GroundAction::Form3Tower { bottom: Blue, middle: Red, top: Green };
        let next = s.apply(&a, &RewardConfig::default()).unwrap().next;
        let mut q = QTable::new();
        q.set(&next.encode(), GroundAction::Pickup(Green), 1000.0);
        q_update(&mut q, &LearnConfig { alpha: 1.0, ..LearnConfig::default() }, &s, a, 99.0, &next);
        assert_eq!(q.get(&s.encode(), &a), 99.0);
    }

    #[test]
    fn config_validation() {
        assert!(LearnConfig::default().validate().is_ok());
        assert!(LearnConfig { alpha: 0.0, ..Default::default() }.validate().is_err());
        assert!(LearnConfig { gamma: 1.0, ..Default::default() }.validate().is_err());
        assert!(LearnConfig { max_steps: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn epsilon_schedule_floors_at_end() {
        let cfg = LearnConfig::default();
        assert_eq!(cfg.epsilon(0), 1.0);
        assert!((cfg.epsilon(1) - 0.995).abs() < 1e-12);
        assert_eq!(cfg.epsilon(5000), 0.05);
    }

    #[test]
    fn convergence_window_detection() {
        let mk = |g: Option<usize>| EpisodeTrace {
            episode: 0,
            steps: 0,
            total_r: 0.0,
            total_rt: 0.0,
            total_rh: 0.0,
            greedy_steps: g,
        };
        let mut trace: Vec<_> = (0..10).map(|_| mk(None)).collect();
        trace.extend((0..49).map(|_| mk(Some(5))));
        assert_eq!(convergence_episode(&trace, 5), None);
        trace.push(mk(Some(5)));
        assert_eq!(convergence_episode(&trace, 5), Some(10));
    }

    #[test]
    fn closed_feedback_aborts_at_episode_boundary() {
        struct ClosesAfter(usize);
        impl HumanFeedback for ClosesAfter {
            fn begin_episode(&mut self, episode: usize) -> Result<(), FeedbackClosed> {
                if episode >= self.0 {
                    Err(FeedbackClosed)
                } else {
                    Ok(())
                }
            }
            fn reward(&mut self, _: &ExecutedStep<'_>) -> Result<f64, FeedbackClosed> {
                Ok(0.0)
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = LearnConfig { episodes: 100, ..LearnConfig::default() };
        let out = train(QTable::new(), &cfg, &TrainOptions::default(), &mut ClosesAfter(7), &mut rng).unwrap();
        assert!(out.aborted);
        assert_eq!(out.trace.len(), 7);
    }
}
