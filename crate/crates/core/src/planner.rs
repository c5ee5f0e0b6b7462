//! Breadth-first shortest-plan search over encoded world states.

use std::collections::{BTreeSet, HashMap, VecDeque};

use crate::world::{Block, GroundAction, RewardConfig, WorldState};

/// Minimum-length action sequence reaching `tower3_formed` without touching
/// any excluded block. Successors are expanded in lexicographic action order,
/// so the result is deterministic.
pub fn bfs_plan(state: &WorldState, excluded: &BTreeSet<Block>) -> Option<Vec<GroundAction>> {
    if state.is_goal() {
        return Some(Vec::new());
    }
    let cfg = RewardConfig::default();
    let mut parent: HashMap<String, (String, GroundAction)> = HashMap::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut queue = VecDeque::new();
    seen.insert(state.encode());
    queue.push_back(state.clone());

    while let Some(cur) = queue.pop_front() {
        let cur_key = cur.encode();
        for action in cur.valid_actions() {
            if action.mentions_any(excluded) {
                continue;
            }
            let next = cur.apply(&action, &cfg).expect("valid action").next;
            let key = next.encode();
            if !seen.insert(key.clone()) {
                continue;
            }
            parent.insert(key.clone(), (cur_key.clone(), action));
            if next.is_goal() {
                return Some(unwind(&parent, &state.encode(), key));
            }
            queue.push_back(next);
        }
    }
    None
}

fn unwind(parent: &HashMap<String, (String, GroundAction)>, root: &str, mut key: String) -> Vec<GroundAction> {
    let mut plan = Vec::new();
    while key != root {
        let (prev, action) = &parent[&key];
        plan.push(*action);
        key = prev.clone();
    }
    plan.reverse();
    plan
}

/// Length of the shortest unrestricted plan; `None` stands for infinity.
pub fn optimal_length(state: &WorldState) -> Option<usize> {
    bfs_plan(state, &BTreeSet::new()).map(|p| p.len())
}

pub fn optimal_length_excluding(state: &WorldState, excluded: &BTreeSet<Block>) -> Option<usize> {
    bfs_plan(state, excluded).map(|p| p.len())
}

/// Every state reachable from `start`, in BFS discovery order. Goal states are
/// included but not expanded.
pub fn reachable_states(start: &WorldState) -> Vec<WorldState> {
    let cfg = RewardConfig::default();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    seen.insert(start.encode());
    queue.push_back(start.clone());
    while let Some(cur) = queue.pop_front() {
        if !cur.is_goal() {
            for action in cur.valid_actions() {
                let next = cur.apply(&action, &cfg).expect("valid action").next;
                if seen.insert(next.encode()) {
                    queue.push_back(next);
                }
            }
        }
        out.push(cur);
    }
    out
}

/// Replays a plan, returning the final state if every step is valid.
pub fn simulate(state: &WorldState, plan: &[GroundAction]) -> Option<WorldState> {
    let cfg = RewardConfig::default();
    plan.iter()
        .try_fold(state.clone(), |s, a| s.apply(a, &cfg).ok().map(|t| t.next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use Block::*;

    #[test]
    fn start_plan_is_five_steps() {
        let plan = bfs_plan(&WorldState::all_on_table(), &BTreeSet::new()).unwrap();
        assert_eq!(plan.len(), 5);
        assert!(simulate(&WorldState::all_on_table(), &plan).unwrap().is_goal());
        assert_eq!(plan[0], GroundAction::Pickup(Blue));
    }

    #[test]
    fn exclusion_is_respected() {
        let excluded = BTreeSet::from([Green]);
        let plan = bfs_plan(&WorldState::all_on_table(), &excluded).unwrap();
        assert_eq!(plan.len(), 5);
        assert!(plan.iter().all(|a| !a.mentions(Green)));
    }

    #[test]
    fn goal_state_gives_empty_plan() {
        let s = WorldState::from_predicates(&[(Red, Blue), (Green, Red)], &[Blue, Orange, Purple, Yellow], true)
            .unwrap();
        assert_eq!(bfs_plan(&s, &BTreeSet::new()), Some(vec![]));
    }

    #[test]
    fn two_stack_needs_three() {
        let s = WorldState::from_predicates(&[(Red, Blue)], &[Blue, Green, Orange, Purple, Yellow], false).unwrap();
        assert_eq!(optimal_length(&s), Some(3));
    }

    #[test]
    fn four_excluded_is_infeasible() {
        let excluded = BTreeSet::from([Blue, Green, Orange, Purple]);
        assert_eq!(optimal_length_excluding(&WorldState::all_on_table(), &excluded), None);
    }
}
