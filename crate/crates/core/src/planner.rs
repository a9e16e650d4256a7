//! Key-action derivation, exploratory search insertion and divergence location.
//!
//! Planning runs against a live [`Episode`] so every emitted action is known to
//! be legal in the state it will execute in; the same routine produces the
//! correction suffix for a trajectory that went wrong midway.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::action::{Action, Verb};
use crate::goal::Goal;
use crate::scene::Scene;
use crate::seed;
use crate::sim::{self, Episode, Placement, StepStatus};
use crate::task::TaskInstruction;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyActionSequence {
    pub task_id: String,
    pub actions: Vec<Action>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlanError {
    #[error("`{0}` has no navigable ancestor")]
    Unreachable(String),
    #[error("goal cannot be achieved: {0}")]
    InfeasibleGoal(String),
}

struct Planner<'e, 's> {
    ep: &'e mut Episode<'s>,
    out: Vec<Action>,
}

impl<'s> Planner<'_, 's> {
    fn scene(&self) -> &'s Scene {
        self.ep.scene()
    }

    fn idx(&self, id: &str) -> Result<usize, PlanError> {
        self.scene().index_of(id).ok_or_else(|| PlanError::InfeasibleGoal(format!("unknown object {id}")))
    }

    fn id(&self, i: usize) -> String {
        self.scene().objects[i].id.clone()
    }

    fn emit(&mut self, action: Action) -> Result<(), PlanError> {
        let out = self.ep.step(&action);
        if out.status != StepStatus::Ok {
            return Err(PlanError::InfeasibleGoal(format!("{action} failed: {:?}", out.error)));
        }
        self.out.push(action);
        Ok(())
    }

    /// Top-level receptacle currently holding `i` (itself if navigable).
    fn anchor_of(&self, i: usize) -> Result<usize, PlanError> {
        if self.scene().objects[i].attrs.navigable {
            return Ok(i);
        }
        self.ep
            .current_ancestors(i)
            .last()
            .copied()
            .filter(|&a| self.scene().objects[a].attrs.navigable)
            .ok_or_else(|| PlanError::Unreachable(self.id(i)))
    }

    fn go_to(&mut self, anchor: usize) -> Result<(), PlanError> {
        if self.ep.location_idx() != Some(anchor) {
            self.emit(Action::navigate(self.id(anchor)))?;
        }
        Ok(())
    }

    fn open_if_closed(&mut self, c: usize) -> Result<(), PlanError> {
        if self.scene().objects[c].attrs.openable && !self.ep.is_open(c) {
            self.emit(Action::open(self.id(c)))?;
        }
        Ok(())
    }

    /// Bring `i` into the local view (or stand at it, for receptacles).
    fn reach(&mut self, i: usize) -> Result<(), PlanError> {
        let anchor = self.anchor_of(i)?;
        self.go_to(anchor)?;
        let mut chain = self.ep.current_ancestors(i);
        chain.reverse();
        for c in chain {
            self.open_if_closed(c)?;
        }
        Ok(())
    }

    /// Put whatever is in hand somewhere legal, nearest first.
    fn put_down(&mut self, avoid: &[usize]) -> Result<(), PlanError> {
        if self.ep.agent().held.is_none() {
            return Ok(());
        }
        let scene = self.scene();
        let here = self.ep.location_idx();
        let local: Vec<usize> = here.into_iter().chain(self.ep.local_view()).collect();
        let spot = local
            .iter()
            .copied()
            .find(|&r| !avoid.contains(&r) && self.ep.check_on(Verb::PutIn, r).is_ok())
            .or_else(|| {
                scene
                    .navigable()
                    .find(|&r| !avoid.contains(&r) && !scene.objects[r].attrs.openable)
            })
            .ok_or_else(|| PlanError::InfeasibleGoal("nowhere to put the held object".into()))?;
        if self.ep.check_on(Verb::PutIn, spot).is_err() {
            self.go_to(spot)?;
        }
        self.emit(Action::put_in(self.id(spot)))
    }

    fn close_all(&mut self, ids: &[String]) -> Result<(), PlanError> {
        for c in ids {
            let ci = self.idx(c)?;
            if !self.ep.is_open(ci) {
                continue;
            }
            if self.ep.check_on(Verb::Close, ci).is_err() {
                let anchor = self.anchor_of(ci)?;
                self.go_to(anchor)?;
            }
            self.emit(Action::close(c.clone()))?;
        }
        Ok(())
    }

    fn goal(&mut self, goal: &Goal) -> Result<(), PlanError> {
        if goal.holds(self.ep) {
            return Ok(());
        }
        match goal {
            Goal::Find { target } => {
                let t = self.idx(target)?;
                if self.ep.world().placement[t] == Placement::Held {
                    return Ok(());
                }
                self.reach(t)
            }
            Goal::Grasp { target } => {
                let t = self.idx(target)?;
                self.put_down(&[])?;
                self.reach(t)?;
                self.emit(Action::pickup(target.clone()))
            }
            Goal::Toggle { target } => {
                let t = self.idx(target)?;
                if self.ep.held_idx() == Some(t) {
                    self.put_down(&[])?;
                }
                self.reach(t)?;
                self.emit(Action::toggle(target.clone()))
            }
            Goal::Transfer { item, destination, close } => {
                let i = self.idx(item)?;
                let d = self.idx(destination)?;
                if self.ep.held_idx() != Some(i) {
                    if self.ep.world().placement[i] == Placement::In(d) {
                        // only the closing part is missing
                        return self.close_all(close);
                    }
                    self.put_down(&[d])?;
                    self.reach(i)?;
                    self.emit(Action::pickup(item.clone()))?;
                }
                let (before, after): (Vec<String>, Vec<String>) =
                    close.iter().cloned().partition(|c| c != destination);
                self.close_all(&before)?;
                self.reach(d)?;
                self.open_if_closed(d)?;
                self.emit(Action::put_in(destination.clone()))?;
                self.close_all(&after)
            }
        }
    }
}

/// Actions that take `ep` from its current state to all of `goals` holding, then End.
pub fn plan_from(ep: &mut Episode<'_>, goals: &[Goal]) -> Result<Vec<Action>, PlanError> {
    let mut p = Planner { ep, out: Vec::new() };
    for g in goals {
        p.goal(g)?;
    }
    p.emit(Action::end())?;
    Ok(p.out)
}

pub fn derive_key_actions(task: &TaskInstruction, scene: &Scene) -> Result<KeyActionSequence, PlanError> {
    let (mut ep, _) = Episode::reset(scene);
    let actions = plan_from(&mut ep, &task.goal)?;
    Ok(KeyActionSequence { task_id: task.id.clone(), actions })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchPolicy {
    pub n_detours: usize,
    pub allow_observe: bool,
}

impl Default for SearchPolicy {
    fn default() -> Self {
        SearchPolicy { n_detours: 0, allow_observe: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploratoryPlan {
    pub key: KeyActionSequence,
    /// (index in `full`, inserted action)
    pub inserted: Vec<(usize, Action)>,
    pub full: Vec<Action>,
}

impl ExploratoryPlan {
    pub fn unchanged(key: KeyActionSequence) -> Self {
        let full = key.actions.clone();
        ExploratoryPlan { key, inserted: Vec::new(), full }
    }

    pub fn is_inserted(&self, index: usize) -> bool {
        self.inserted.iter().any(|(i, _)| *i == index)
    }
}

/// Objects whose discovery a goal needs.
fn subjects(goals: &[Goal]) -> Vec<String> {
    goals.iter().map(|g| g.subject().to_string()).collect()
}

/// Whether executing `key[at..]` up to the next non-Open action reaches a goal
/// subject not seen before.
fn is_revealing(ep: &Episode<'_>, key: &[Action], at: usize, subjects: &[String], visited: &BTreeSet<String>) -> bool {
    if key[at].verb != Verb::NavigateTo {
        return false;
    }
    let seen = |e: &Episode<'_>, s: &String| e.agent().revealed_items.contains(s) || visited.contains(s);
    let mut probe = ep.clone();
    probe.step(&key[at]);
    let mut k = at + 1;
    while k < key.len() && key[k].verb == Verb::Open {
        probe.step(&key[k]);
        k += 1;
    }
    let here = probe.agent().location.clone();
    subjects.iter().any(|s| !seen(ep, s) && (probe.agent().revealed_items.contains(s) || here.as_ref() == Some(s)))
}

/// Insert decoy navigations before the key actions that first reveal a goal
/// subject. Decoys are drawn uniformly without replacement, first from the
/// receptacles already known, then (after an Observe if allowed) from the rest.
pub fn insert_search_process(
    key: &KeyActionSequence,
    goals: &[Goal],
    scene: &Scene,
    policy: SearchPolicy,
    seed: u64,
) -> ExploratoryPlan {
    if policy.n_detours == 0 {
        return ExploratoryPlan::unchanged(key.clone());
    }
    let mut rng = seed::rng(seed::derive(seed, "detours"));
    let subjects = subjects(goals);
    let (mut ep, _) = Episode::reset(scene);

    let revealing: Vec<usize> = {
        let mut probe = ep.clone();
        let mut v = BTreeSet::new();
        let mut out = Vec::new();
        for (k, a) in key.actions.iter().enumerate() {
            if is_revealing(&probe, &key.actions, k, &subjects, &v) {
                out.push(k);
            }
            probe.step(a);
            if let Some(l) = &probe.agent().location {
                v.insert(l.clone());
            }
        }
        out
    };
    if revealing.is_empty() {
        return ExploratoryPlan::unchanged(key.clone());
    }
    // spread the detours over the revealing navigations
    let mut quota = vec![0usize; revealing.len()];
    for _ in 0..policy.n_detours {
        let k = rand::Rng::random_range(&mut rng, 0..revealing.len());
        quota[k] += 1;
    }

    let mut full = Vec::new();
    let mut inserted = Vec::new();
    let mut observed = false;
    for (k, action) in key.actions.iter().enumerate() {
        if let Some(slot) = revealing.iter().position(|&r| r == k) {
            let true_loc = scene.index_of(action.target.as_deref().unwrap_or_default());
            let mut used: BTreeSet<usize> = BTreeSet::new();
            for _ in 0..quota[slot] {
                let pick = |ep: &Episode<'_>, used: &BTreeSet<usize>, known_only: bool| -> Vec<usize> {
                    scene
                        .navigable()
                        .filter(|&r| Some(r) != true_loc && Some(r) != ep.location_idx() && !used.contains(&r))
                        .filter(|&r| !known_only || ep.agent().known_receptacles.contains(&scene.objects[r].id))
                        .collect()
                };
                let mut pool = pick(&ep, &used, true);
                if pool.is_empty() {
                    if policy.allow_observe && !observed {
                        let obs = Action::bare(Verb::Observe);
                        ep.step(&obs);
                        inserted.push((full.len(), obs.clone()));
                        full.push(obs);
                        observed = true;
                        pool = pick(&ep, &used, true);
                    } else if !policy.allow_observe {
                        pool = pick(&ep, &used, false);
                    }
                }
                let Some(&r) = pool.choose(&mut rng) else { break };
                used.insert(r);
                let nav = Action::navigate(scene.objects[r].id.clone());
                ep.step(&nav);
                inserted.push((full.len(), nav.clone()));
                full.push(nav);
            }
        }
        ep.step(action);
        full.push(action.clone());
    }
    ExploratoryPlan { key: key.clone(), inserted, full }
}

/// Index of the first predicted action that is illegal, or after which the
/// task can no longer be finished by appending the rest of the key sequence.
/// Predicted actions match key actions by verb and resolved object id.
/// `None` when the prediction completes the task. If every prefix stays
/// recoverable but the prediction stops short, the index just after the last
/// key-matching action is returned (which may equal `predicted.len()`).
pub fn first_divergence(scene: &Scene, goals: &[Goal], key: &[Action], predicted: &[Action]) -> Option<usize> {
    if sim::final_state_check(scene, goals, predicted) {
        return None;
    }
    let (mut ep, _) = Episode::reset(scene);
    let mut matched = 0;
    let mut last_progress = 0;
    for (i, a) in predicted.iter().enumerate() {
        let out = ep.step(a);
        if out.status == StepStatus::Illegal {
            return Some(i);
        }
        if matched < key.len() && a.verb == key[matched].verb && out.resolved == key[matched].target {
            matched += 1;
            last_progress = i + 1;
        }
        let prefix = &predicted[..=i];
        let recoverable = (0..=matched).rev().any(|j| {
            let mut attempt = prefix.to_vec();
            attempt.extend_from_slice(&key[j..]);
            sim::final_state_check(scene, goals, &attempt)
        });
        if !recoverable {
            return Some(i);
        }
    }
    Some(last_progress)
}
