//! Six-block BlocksWorld with a `tower3_formed` goal predicate.
//!
//! Only `on(x,y)`, `ontable(x)` and `tower3_formed` are stored; `clear`,
//! `holding` and `handempty` are derived from the support relation. Over six
//! blocks that is 30 + 6 = 36 stored ground predicates plus the goal flag.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const BLOCK_COUNT: usize = 6;

/// Number of stored ground predicates besides `tower3_formed`.
pub const STORED_PREDICATES: usize = BLOCK_COUNT * (BLOCK_COUNT - 1) + BLOCK_COUNT;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("unknown block `{0}`")]
    UnknownBlock(String),
    #[error("malformed action `{0}`")]
    MalformedAction(String),
    #[error("malformed state key `{0}`")]
    MalformedKey(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("precondition of {action} violated: {literal}")]
    Precondition { action: GroundAction, literal: String },
    #[error("invalid reward config: {0}")]
    InvalidRewardConfig(String),
}

/// Blocks are declared in alphabetical order so that the derived ordering of
/// actions coincides with the lexicographic order of their rendered names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Blue,
    Green,
    Orange,
    Purple,
    Red,
    Yellow,
}

impl Block {
    pub const ALL: [Block; BLOCK_COUNT] = [
        Block::Blue,
        Block::Green,
        Block::Orange,
        Block::Purple,
        Block::Red,
        Block::Yellow,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Block {
        Block::ALL[i]
    }

    pub fn name(self) -> &'static str {
        match self {
            Block::Blue => "blue",
            Block::Green => "green",
            Block::Orange => "orange",
            Block::Purple => "purple",
            Block::Red => "red",
            Block::Yellow => "yellow",
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Block {
    type Err = WorldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Block::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| WorldError::UnknownBlock(s.to_string()))
    }
}

/// A fully grounded operator. Variant order is alphabetical by operator name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroundAction {
    Form3Tower { bottom: Block, middle: Block, top: Block },
    Pickup(Block),
    Putdown(Block),
    Stack { block: Block, onto: Block },
}

impl GroundAction {
    /// All 42 manipulation actions and 120 `form3tower` actions, sorted.
    pub fn all() -> Vec<GroundAction> {
        let mut out = Vec::with_capacity(162);
        for x in Block::ALL {
            out.push(GroundAction::Pickup(x));
            out.push(GroundAction::Putdown(x));
            for y in Block::ALL {
                if x != y {
                    out.push(GroundAction::Stack { block: x, onto: y });
                    for z in Block::ALL {
                        if z != x && z != y {
                            out.push(GroundAction::Form3Tower { bottom: x, middle: y, top: z });
                        }
                    }
                }
            }
        }
        out.sort();
        out
    }

    pub fn params(&self) -> Vec<Block> {
        match *self {
            GroundAction::Pickup(x) | GroundAction::Putdown(x) => vec![x],
            GroundAction::Stack { block, onto } => vec![block, onto],
            GroundAction::Form3Tower { bottom, middle, top } => vec![bottom, middle, top],
        }
    }

    pub fn mentions(&self, b: Block) -> bool {
        self.params().contains(&b)
    }

    pub fn mentions_any(&self, set: &BTreeSet<Block>) -> bool {
        self.params().iter().any(|b| set.contains(b))
    }

    pub fn is_manipulation(&self) -> bool {
        !matches!(self, GroundAction::Form3Tower { .. })
    }
}

impl fmt::Display for GroundAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroundAction::Pickup(x) => write!(f, "pickup({x})"),
            GroundAction::Putdown(x) => write!(f, "putdown({x})"),
            GroundAction::Stack { block, onto } => write!(f, "stack({block},{onto})"),
            GroundAction::Form3Tower { bottom, middle, top } => {
                write!(f, "form3tower({bottom},{middle},{top})")
            }
        }
    }
}

impl FromStr for GroundAction {
    type Err = WorldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || WorldError::MalformedAction(s.to_string());
        let (name, rest) = s.split_once('(').ok_or_else(bad)?;
        let args = rest.strip_suffix(')').ok_or_else(bad)?;
        let blocks = args
            .split(',')
            .map(|a| a.trim().parse::<Block>())
            .collect::<Result<Vec<_>, _>>()?;
        let distinct = blocks.iter().collect::<BTreeSet<_>>().len() == blocks.len();
        if !distinct {
            return Err(bad());
        }
        match (name.trim(), blocks.as_slice()) {
            ("pickup", [x]) => Ok(GroundAction::Pickup(*x)),
            ("putdown", [x]) => Ok(GroundAction::Putdown(*x)),
            ("stack", [x, y]) => Ok(GroundAction::Stack { block: *x, onto: *y }),
            ("form3tower", [b, m, t]) => Ok(GroundAction::Form3Tower { bottom: *b, middle: *m, top: *t }),
            _ => Err(bad()),
        }
    }
}

impl Serialize for GroundAction {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GroundAction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub step_penalty: f64,
    pub goal_reward: f64,
    pub stacking_bonus: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { step_penalty: -1.0, goal_reward: 100.0, stacking_bonus: 5.0 }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        if !(self.step_penalty < 0.0) {
            return Err(WorldError::InvalidRewardConfig("step_penalty must be negative".into()));
        }
        if !(self.goal_reward > 0.0) {
            return Err(WorldError::InvalidRewardConfig("goal_reward must be positive".into()));
        }
        if !self.stacking_bonus.is_finite() {
            return Err(WorldError::InvalidRewardConfig("stacking_bonus must be finite".into()));
        }
        Ok(())
    }

    /// Largest task reward any single action can earn.
    pub fn max_step_reward(&self) -> f64 {
        self.goal_reward + self.stacking_bonus.max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Support {
    Table,
    On(Block),
    Held,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WorldState {
    support: [Support; BLOCK_COUNT],
    tower3_formed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Derived {
    pub clear: BTreeSet<Block>,
    pub held: Option<Block>,
    pub hand_empty: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub next: WorldState,
    pub task_reward: f64,
}

impl Default for WorldState {
    fn default() -> Self {
        Self::all_on_table()
    }
}

impl WorldState {
    pub fn all_on_table() -> Self {
        WorldState { support: [Support::Table; BLOCK_COUNT], tower3_formed: false }
    }

    /// Builds a state from stored predicates. Blocks mentioned neither as the
    /// first element of an `on` pair nor in `ontable` are held.
    pub fn from_predicates(
        on: &[(Block, Block)],
        ontable: &[Block],
        tower3_formed: bool,
    ) -> Result<Self, WorldError> {
        let mut support: [Option<Support>; BLOCK_COUNT] = [None; BLOCK_COUNT];
        for &(x, y) in on {
            if x == y {
                return Err(WorldError::InvalidState(format!("{x} cannot rest on itself")));
            }
            if support[x.index()].replace(Support::On(y)).is_some() {
                return Err(WorldError::InvalidState(format!("{x} has more than one support")));
            }
        }
        for &x in ontable {
            if support[x.index()].replace(Support::Table).is_some() {
                return Err(WorldError::InvalidState(format!("{x} has more than one support")));
            }
        }
        let state = WorldState {
            support: support.map(|s| s.unwrap_or(Support::Held)),
            tower3_formed,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let held = self.support.iter().filter(|s| **s == Support::Held).count();
        if held > 1 {
            return Err(WorldError::InvalidState(format!("{held} blocks held at once")));
        }
        let mut supporting = [0usize; BLOCK_COUNT];
        for s in self.support {
            if let Support::On(y) = s {
                supporting[y.index()] += 1;
            }
        }
        if let Some(i) = supporting.iter().position(|&n| n > 1) {
            return Err(WorldError::InvalidState(format!(
                "{} supports more than one block",
                Block::from_index(i)
            )));
        }
        for b in Block::ALL {
            if let Support::On(y) = self.support[b.index()] {
                if self.support[y.index()] == Support::Held {
                    return Err(WorldError::InvalidState(format!("{b} rests on held block {y}")));
                }
            }
            // walk down; more than BLOCK_COUNT hops means a cycle
            let mut cur = b;
            for hop in 0..=BLOCK_COUNT {
                match self.support[cur.index()] {
                    Support::On(y) => cur = y,
                    _ => break,
                }
                if hop == BLOCK_COUNT {
                    return Err(WorldError::InvalidState(format!("cyclic support through {b}")));
                }
            }
        }
        Ok(())
    }

    pub fn tower3_formed(&self) -> bool {
        self.tower3_formed
    }

    pub fn is_goal(&self) -> bool {
        self.tower3_formed
    }

    pub fn is_ontable(&self, x: Block) -> bool {
        self.support[x.index()] == Support::Table
    }

    /// The block `x` rests on, if any.
    pub fn below(&self, x: Block) -> Option<Block> {
        match self.support[x.index()] {
            Support::On(y) => Some(y),
            _ => None,
        }
    }

    /// The block resting on `y`, if any.
    pub fn above(&self, y: Block) -> Option<Block> {
        Block::ALL.into_iter().find(|x| self.support[x.index()] == Support::On(y))
    }

    pub fn held(&self) -> Option<Block> {
        Block::ALL.into_iter().find(|x| self.support[x.index()] == Support::Held)
    }

    pub fn hand_empty(&self) -> bool {
        self.held().is_none()
    }

    pub fn is_clear(&self, x: Block) -> bool {
        self.support[x.index()] != Support::Held && self.above(x).is_none()
    }

    pub fn on_pairs(&self) -> Vec<(Block, Block)> {
        Block::ALL.into_iter().filter_map(|x| self.below(x).map(|y| (x, y))).collect()
    }

    pub fn ontable(&self) -> Vec<Block> {
        Block::ALL.into_iter().filter(|&x| self.is_ontable(x)).collect()
    }

    pub fn ontable_count(&self) -> usize {
        self.support.iter().filter(|s| **s == Support::Table).count()
    }

    /// Stack containing `x`, listed bottom to top. Empty when `x` is held.
    pub fn stack_of(&self, x: Block) -> Vec<Block> {
        if self.support[x.index()] == Support::Held {
            return Vec::new();
        }
        let mut bottom = x;
        while let Some(y) = self.below(bottom) {
            bottom = y;
        }
        let mut out = vec![bottom];
        while let Some(z) = self.above(*out.last().unwrap()) {
            out.push(z);
        }
        out
    }

    /// All stacks, bottom to top, ordered by their bottom block.
    pub fn stacks(&self) -> Vec<Vec<Block>> {
        self.ontable().into_iter().map(|b| self.stack_of(b)).collect()
    }

    pub fn derived(&self) -> Derived {
        let held = self.held();
        Derived {
            clear: Block::ALL.into_iter().filter(|&x| self.is_clear(x)).collect(),
            held,
            hand_empty: held.is_none(),
        }
    }

    /// Checks preconditions, naming the first failed literal.
    pub fn check(&self, action: &GroundAction) -> Result<(), WorldError> {
        let fail = |literal: String| Err(WorldError::Precondition { action: *action, literal });
        let held = self.held();
        match *action {
            GroundAction::Pickup(x) => {
                if held.is_some() {
                    return fail("handempty".into());
                }
                if !self.is_clear(x) {
                    return fail(format!("clear({x})"));
                }
            }
            GroundAction::Putdown(x) => {
                if held != Some(x) {
                    return fail(format!("holding({x})"));
                }
            }
            GroundAction::Stack { block, onto } => {
                if held != Some(block) {
                    return fail(format!("holding({block})"));
                }
                if !self.is_clear(onto) {
                    return fail(format!("clear({onto})"));
                }
            }
            GroundAction::Form3Tower { bottom, middle, top } => {
                if held.is_some() {
                    return fail("handempty".into());
                }
                if !self.is_ontable(bottom) {
                    return fail(format!("ontable({bottom})"));
                }
                if self.below(middle) != Some(bottom) {
                    return fail(format!("on({middle},{bottom})"));
                }
                if self.below(top) != Some(middle) {
                    return fail(format!("on({top},{middle})"));
                }
                if !self.is_clear(top) {
                    return fail(format!("clear({top})"));
                }
            }
        }
        Ok(())
    }

    pub fn is_valid(&self, action: &GroundAction) -> bool {
        self.check(action).is_ok()
    }

    /// Applicable actions in lexicographic order.
    pub fn valid_actions(&self) -> Vec<GroundAction> {
        let mut out = Vec::new();
        match self.held() {
            Some(x) => {
                // putdown < stack in the ordering
                out.push(GroundAction::Putdown(x));
                for y in Block::ALL {
                    if y != x && self.is_clear(y) {
                        out.push(GroundAction::Stack { block: x, onto: y });
                    }
                }
            }
            None => {
                for bottom in self.ontable() {
                    if let Some(middle) = self.above(bottom) {
                        if let Some(top) = self.above(middle) {
                            if self.is_clear(top) {
                                out.push(GroundAction::Form3Tower { bottom, middle, top });
                            }
                        }
                    }
                }
                for x in Block::ALL {
                    if self.is_clear(x) {
                        out.push(GroundAction::Pickup(x));
                    }
                }
            }
        }
        out.sort();
        out
    }

    /// Applies an action and computes its task reward.
    pub fn apply(&self, action: &GroundAction, cfg: &RewardConfig) -> Result<Transition, WorldError> {
        self.check(action)?;
        let mut next = self.clone();
        match *action {
            GroundAction::Pickup(x) => next.support[x.index()] = Support::Held,
            GroundAction::Putdown(x) => next.support[x.index()] = Support::Table,
            GroundAction::Stack { block, onto } => next.support[block.index()] = Support::On(onto),
            GroundAction::Form3Tower { .. } => next.tower3_formed = true,
        }
        let mut reward = cfg.step_penalty;
        if next.tower3_formed && !self.tower3_formed {
            reward += cfg.goal_reward;
        }
        if next.ontable_count() < self.ontable_count() {
            reward += cfg.stacking_bonus;
        }
        Ok(Transition { next, task_reward: reward })
    }

    /// Canonical key: sorted stored predicates joined by `;`.
    pub fn encode(&self) -> String {
        let mut preds: Vec<String> = self
            .on_pairs()
            .into_iter()
            .map(|(x, y)| format!("on({x},{y})"))
            .chain(self.ontable().into_iter().map(|x| format!("ontable({x})")))
            .collect();
        if self.tower3_formed {
            preds.push("tower3_formed".to_string());
        }
        preds.sort();
        preds.join(";")
    }

    pub fn decode(key: &str) -> Result<Self, WorldError> {
        let bad = || WorldError::MalformedKey(key.to_string());
        let mut on = Vec::new();
        let mut ontable = Vec::new();
        let mut formed = false;
        for pred in key.split(';').filter(|p| !p.is_empty()) {
            if pred == "tower3_formed" {
                formed = true;
            } else if let Some(arg) = pred.strip_prefix("ontable(").and_then(|r| r.strip_suffix(')')) {
                ontable.push(arg.parse()?);
            } else if let Some(args) = pred.strip_prefix("on(").and_then(|r| r.strip_suffix(')')) {
                let (x, y) = args.split_once(',').ok_or_else(bad)?;
                on.push((x.parse()?, y.parse()?));
            } else {
                return Err(bad());
            }
        }
        Self::from_predicates(&on, &ontable, formed)
    }
}

impl fmt::Display for WorldState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.encode())
    }
}

impl Serialize for WorldState {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(&self.encode())
    }
}

impl<'de> Deserialize<'de> for WorldState {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        WorldState::decode(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Block::*;

    #[test]
    fn grounding_counts() {
        let all = GroundAction::all();
        assert_eq!(all.iter().filter(|a| a.is_manipulation()).count(), 42);
        assert_eq!(all.iter().filter(|a| !a.is_manipulation()).count(), 120);
        assert_eq!(STORED_PREDICATES, 36);
    }

    #[test]
    fn ordering_matches_rendered_names() {
        let all = GroundAction::all();
        let mut by_name = all.clone();
        by_name.sort_by_key(|a| a.to_string());
        assert_eq!(all, by_name);
    }

    #[test]
    fn derived_predicates() {
        let s = WorldState::all_on_table();
        let d = s.derived();
        assert_eq!(d.clear.len(), 6);
        assert!(d.hand_empty);

        let s = WorldState::from_predicates(&[(Red, Blue)], &[Blue, Green, Orange, Purple, Yellow], false).unwrap();
        assert!(!s.is_clear(Blue));
        assert!(s.is_clear(Red));

        let s = WorldState::from_predicates(&[], &[Blue, Green, Orange, Purple, Yellow], false).unwrap();
        let d = s.derived();
        assert_eq!(d.held, Some(Red));
        assert!(!d.hand_empty);
        assert!(!d.clear.contains(&Red));
    }

    #[test]
    fn initial_valid_actions_are_the_pickups() {
        let acts = WorldState::all_on_table().valid_actions();
        assert_eq!(acts.len(), 6);
        assert!(acts.iter().all(|a| matches!(a, GroundAction::Pickup(_))));
    }

    #[test]
    fn holding_red_gives_putdown_and_five_stacks() {
        let s = WorldState::from_predicates(&[], &[Blue, Green, Orange, Purple, Yellow], false).unwrap();
        let acts = s.valid_actions();
        assert_eq!(acts.len(), 6);
        assert!(acts.contains(&GroundAction::Putdown(Red)));
        assert_eq!(acts.iter().filter(|a| matches!(a, GroundAction::Stack { block: Red, .. })).count(), 5);
    }

    #[test]
    fn complete_tower_enables_form3tower() {
        let s = WorldState::from_predicates(
            &[(Red, Blue), (Green, Red)],
            &[Blue, Orange, Purple, Yellow],
            false,
        )
        .unwrap();
        let a = GroundAction::Form3Tower { bottom: Blue, middle: Red, top: Green };
        assert!(s.valid_actions().contains(&a));
        let t = s.apply(&a, &RewardConfig::default()).unwrap();
        assert!(t.next.tower3_formed());
        assert_eq!(t.task_reward, 99.0);
    }

    #[test]
    fn reward_arithmetic() {
        let cfg = RewardConfig::default();
        let s = WorldState::all_on_table();
        let t = s.apply(&GroundAction::Pickup(Red), &cfg).unwrap();
        // pickup from the table reduces |ontable| by one
        assert_eq!(t.task_reward, -1.0 + 5.0);
        assert_eq!(t.next.held(), Some(Red));
        let t2 = t.next.apply(&GroundAction::Stack { block: Red, onto: Blue }, &cfg).unwrap();
        assert_eq!(t2.task_reward, -1.0);
        assert_eq!(t2.next.below(Red), Some(Blue));
        let t3 = t.next.apply(&GroundAction::Putdown(Red), &cfg).unwrap();
        assert_eq!(t3.task_reward, -1.0);
    }

    #[test]
    fn invalid_action_names_failed_literal() {
        let s = WorldState::all_on_table();
        let err = s.apply(&GroundAction::Putdown(Red), &RewardConfig::default()).unwrap_err();
        assert_eq!(
            err,
            WorldError::Precondition { action: GroundAction::Putdown(Red), literal: "holding(red)".into() }
        );
        let s = WorldState::from_predicates(&[(Red, Blue)], &[Blue, Green, Orange, Purple, Yellow], false).unwrap();
        let err = s.check(&GroundAction::Pickup(Blue)).unwrap_err();
        assert!(err.to_string().contains("clear(blue)"));
    }

    #[test]
    fn invalid_states_rejected() {
        assert!(WorldState::from_predicates(&[], &[Blue, Green, Orange, Purple], false).is_err());
        assert!(WorldState::from_predicates(&[(Red, Blue), (Green, Blue)], &[Blue, Orange, Purple, Yellow], false).is_err());
        assert!(WorldState::from_predicates(&[(Red, Blue), (Blue, Red)], &[Green, Orange, Purple, Yellow], false).is_err());
        assert!(WorldState::from_predicates(&[(Red, Red)], &[], false).is_err());
        assert!(WorldState::from_predicates(&[], &[Red, Red], false).is_err());
    }

    #[test]
    fn encode_distinguishes_and_roundtrips() {
        let a = WorldState::from_predicates(&[(Red, Blue)], &[Blue, Green, Orange, Purple, Yellow], false).unwrap();
        let b = WorldState::from_predicates(&[(Red, Green)], &[Blue, Green, Orange, Purple, Yellow], false).unwrap();
        assert_ne!(a.encode(), b.encode());
        assert_eq!(WorldState::decode(&a.encode()).unwrap(), a);
        assert_eq!(WorldState::decode("").unwrap_err(), WorldError::InvalidState("6 blocks held at once".into()));
    }

    #[test]
    fn action_parse_roundtrip() {
        for a in GroundAction::all() {
            assert_eq!(a.to_string().parse::<GroundAction>().unwrap(), a);
        }
        assert!("stack(red,red)".parse::<GroundAction>().is_err());
        assert!("fly(red)".parse::<GroundAction>().is_err());
    }
}
