//! Replay-based judging, trajectory filtering and the evaluation metrics.
//!
//! Action counts used by the metrics leave out the closing End, so a key
//! sequence here has the same length as the task tables list.

use std::collections::BTreeMap;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::action::{Action, ActionKey, Verb};
use crate::planner::derive_key_actions;
use crate::scene::Scene;
use crate::sim::{self, Effect, EpisodeStatus, Episode, ReplayStep, StepOutcome, StepStatus};
use crate::task::{Category, TaskInstruction};
use crate::trajectory::{Payload, Provenance, Trajectory};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub task_id: String,
    pub predicted_actions: Vec<Action>,
    /// Per-action effects; empty means every action took effect normally.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub effects: Vec<Effect>,
    pub outcomes: Vec<StepOutcome>,
    pub ended: bool,
    pub success: bool,
    /// The agent's backend failed; excluded from metric denominators.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub infra_failed: bool,
    #[serde(default = "default_limit", skip_serializing_if = "is_default_limit")]
    pub step_limit: u32,
}

fn default_limit() -> u32 {
    sim::DEFAULT_STEP_LIMIT
}

fn is_default_limit(l: &u32) -> bool {
    *l == sim::DEFAULT_STEP_LIMIT
}

impl EpisodeResult {
    /// Replays `actions` from reset and judges them.
    pub fn evaluate(task: &TaskInstruction, key: &[Action], scene: &Scene, actions: &[Action], effects: &[Effect]) -> (Self, Judgment) {
        Self::evaluate_limited(task, key, scene, actions, effects, sim::DEFAULT_STEP_LIMIT)
    }

    /// [`EpisodeResult::evaluate`] under a non-default step budget.
    pub fn evaluate_limited(
        task: &TaskInstruction,
        key: &[Action],
        scene: &Scene,
        actions: &[Action],
        effects: &[Effect],
        step_limit: u32,
    ) -> (Self, Judgment) {
        let (mut ep, _) = Episode::with_limit(scene, step_limit);
        let mut outcomes = Vec::new();
        let mut taken = Vec::new();
        let mut taken_effects = Vec::new();
        for (i, a) in actions.iter().enumerate() {
            if ep.is_done() {
                break;
            }
            let e = effects.get(i).cloned().unwrap_or_default();
            outcomes.push(ep.step_with(a, &e));
            taken.push(a.clone());
            taken_effects.push(e);
        }
        if taken_effects.iter().all(Effect::is_normal) {
            taken_effects.clear();
        }
        let mut result = EpisodeResult {
            task_id: task.id.clone(),
            predicted_actions: taken,
            effects: taken_effects,
            outcomes,
            ended: ep.status() == EpisodeStatus::Ended,
            success: false,
            infra_failed: false,
            step_limit,
        };
        let j = judge(task, key, &result, scene);
        result.success = j.success;
        (result, j)
    }

    pub fn from_trajectory(task: &TaskInstruction, key: &[Action], scene: &Scene, traj: &Trajectory) -> (Self, Judgment) {
        Self::evaluate(task, key, scene, &traj.actions(), &traj.effects())
    }

    fn effect(&self, i: usize) -> Effect {
        self.effects.get(i).cloned().unwrap_or_default()
    }
}

/// Machine-readable reason a trajectory is not a success.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Reason {
    /// Key action `index` (rendered by class) has no in-order match.
    MissingKeyAction { index: usize, action: String },
    GoalUnmet { goal: usize },
    /// All goals hold but were reached out of the required order.
    OrderViolated,
    StepLimit,
    NoTermination,
    IllegalStep { index: usize },
    Grammar { message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub success: bool,
    pub reasons: Vec<Reason>,
}

/// Verbs that never count as key actions.
fn is_movement_only(v: Verb) -> bool {
    matches!(v, Verb::Observe | Verb::MoveForward)
}

/// Indices of key actions left unmatched by a greedy in-order scan.
pub fn unmatched_key_actions(key: &[ActionKey], predicted: &[ActionKey]) -> Vec<usize> {
    let mut k = 0;
    for p in predicted {
        if k < key.len() && *p == key[k] {
            k += 1;
        }
    }
    (k..key.len()).collect()
}

/// Success iff the key sequence is an in-order subsequence of the accepted
/// interaction actions (matched by verb and class) and the final state meets
/// the goals in order.
pub fn judge(task: &TaskInstruction, key: &[Action], result: &EpisodeResult, scene: &Scene) -> Judgment {
    let mut reasons = Vec::new();
    let steps: Vec<(Action, Effect)> =
        result.predicted_actions.iter().enumerate().map(|(i, a)| (a.clone(), result.effect(i))).collect();
    let replay = sim::replay_steps_limited(scene, &task.goal, result.step_limit, steps.iter().map(|(action, effect)| ReplayStep { action, effect }));

    let accepted: Vec<ActionKey> = result
        .predicted_actions
        .iter()
        .zip(&replay.statuses)
        .filter(|(a, s)| **s == StepStatus::Ok && !is_movement_only(a.verb))
        .map(|(a, _)| a.key(scene))
        .collect();
    let key_keys: Vec<ActionKey> = key.iter().map(|a| a.key(scene)).collect();
    for index in unmatched_key_actions(&key_keys, &accepted) {
        reasons.push(Reason::MissingKeyAction { index, action: key[index].render_class(scene) });
    }
    match replay.status {
        EpisodeStatus::Ended => {}
        EpisodeStatus::StepLimit => reasons.push(Reason::StepLimit),
        EpisodeStatus::Running => reasons.push(Reason::NoTermination),
    }
    let unmet: Vec<usize> = replay.holding.iter().enumerate().filter(|(_, h)| !**h).map(|(g, _)| g).collect();
    if unmet.is_empty() && replay.ended && !replay.success {
        reasons.push(Reason::OrderViolated);
    }
    reasons.extend(unmet.into_iter().map(|goal| Reason::GoalUnmet { goal }));
    Judgment { success: reasons.is_empty(), reasons }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("no predicted actions")]
    ZeroPredicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Efficiency {
    /// key / predicted, unclamped (can exceed 1 for failures that stop early).
    pub raw: Ratio<u64>,
    pub clamped: Ratio<u64>,
}

pub fn search_efficiency(key_len: usize, predicted_len: usize) -> Result<Efficiency, MetricError> {
    if predicted_len == 0 {
        return Err(MetricError::ZeroPredicted);
    }
    let raw = Ratio::new(key_len as u64, predicted_len as u64);
    Ok(Efficiency { raw, clamped: raw.min(Ratio::from_integer(1)) })
}

/// Share of predicted actions whose (verb, class) appears among the key actions.
pub fn task_completeness(key: &[ActionKey], predicted: &[ActionKey]) -> Result<Ratio<u64>, MetricError> {
    if predicted.is_empty() {
        return Err(MetricError::ZeroPredicted);
    }
    let hits = predicted.iter().filter(|p| key.contains(p)).count();
    Ok(Ratio::new(hits as u64, predicted.len() as u64))
}

/// Navigations to an already visited place, over all navigations (0 when empty).
pub fn repetitive_exploration_rate<T: PartialEq>(navigations: &[T]) -> Ratio<u64> {
    if navigations.is_empty() {
        return Ratio::from_integer(0);
    }
    let revisits = (0..navigations.len()).filter(|&i| navigations[..i].contains(&navigations[i])).count();
    Ratio::new(revisits as u64, navigations.len() as u64)
}

fn without_end(actions: &[Action]) -> &[Action] {
    match actions.last() {
        Some(a) if a.verb == Verb::End => &actions[..actions.len() - 1],
        _ => actions,
    }
}

/// Per-episode metric values; the flat-table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub task_id: String,
    pub category: Category,
    pub success: bool,
    pub infra_failed: bool,
    pub key_len: usize,
    pub predicted_len: usize,
    pub search_efficiency: Option<Ratio<u64>>,
    pub raw_efficiency: Option<Ratio<u64>>,
    pub task_completeness: Option<Ratio<u64>>,
    pub rer: Ratio<u64>,
}

pub fn episode_metrics(task: &TaskInstruction, key: &[Action], result: &EpisodeResult, scene: &Scene) -> EpisodeMetrics {
    let key = without_end(key);
    let predicted = without_end(&result.predicted_actions);
    let eff = search_efficiency(key.len(), predicted.len()).ok();
    let key_keys: Vec<ActionKey> = key.iter().map(|a| a.key(scene)).collect();
    let pred_keys: Vec<ActionKey> = predicted.iter().map(|a| a.key(scene)).collect();
    let navs: Vec<String> = result
        .predicted_actions
        .iter()
        .enumerate()
        .filter(|(_, a)| a.verb == Verb::NavigateTo)
        .map(|(i, a)| {
            // where the agent actually went
            let resolved = result.outcomes.get(i).and_then(|o| o.resolved.clone());
            resolved.or_else(|| a.target.clone()).unwrap_or_default()
        })
        .collect();
    EpisodeMetrics {
        task_id: task.id.clone(),
        category: task.category(),
        success: result.success,
        infra_failed: result.infra_failed,
        key_len: key.len(),
        predicted_len: predicted.len(),
        search_efficiency: eff.map(|e| e.clamped),
        raw_efficiency: eff.map(|e| e.raw),
        task_completeness: task_completeness(&key_keys, &pred_keys).ok(),
        rer: repetitive_exploration_rate(&navs),
    }
}

/// Aggregates for one slice of episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Summary {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Averages over successful episodes.
    pub search_efficiency: f64,
    pub task_completeness: f64,
    pub rer: f64,
    /// Averages over every judged episode (missing values count as 0).
    pub search_efficiency_all: f64,
    pub task_completeness_all: f64,
    pub rer_all: f64,
}

pub const REPORT_NOTE: &str = "search_efficiency, task_completeness and rer average successful episodes; \
the *_all fields average every judged episode; infrastructure failures are excluded";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub note: String,
    pub excluded_infra_failures: usize,
    pub overall: Summary,
    pub per_category: BTreeMap<Category, Summary>,
}

#[derive(Default)]
struct Acc {
    n: usize,
    ok: usize,
    eff: Ratio<u128>,
    comp: Ratio<u128>,
    rer: Ratio<u128>,
    eff_all: Ratio<u128>,
    comp_all: Ratio<u128>,
    rer_all: Ratio<u128>,
}

fn widen(r: Ratio<u64>) -> Ratio<u128> {
    Ratio::new(*r.numer() as u128, *r.denom() as u128)
}

fn to_f64(sum: Ratio<u128>, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        let avg = sum / Ratio::from_integer(n as u128);
        *avg.numer() as f64 / *avg.denom() as f64
    }
}

impl Acc {
    fn add(&mut self, m: &EpisodeMetrics) {
        let zero = Ratio::from_integer(0);
        self.n += 1;
        let e = widen(m.search_efficiency.unwrap_or(zero));
        let c = widen(m.task_completeness.unwrap_or(zero));
        let r = widen(m.rer);
        self.eff_all += e;
        self.comp_all += c;
        self.rer_all += r;
        if m.success {
            self.ok += 1;
            self.eff += e;
            self.comp += c;
            self.rer += r;
        }
    }

    fn summary(&self) -> Summary {
        Summary {
            episodes: self.n,
            successes: self.ok,
            success_rate: if self.n == 0 { 0.0 } else { self.ok as f64 / self.n as f64 },
            search_efficiency: to_f64(self.eff, self.ok),
            task_completeness: to_f64(self.comp, self.ok),
            rer: to_f64(self.rer, self.ok),
            search_efficiency_all: to_f64(self.eff_all, self.n),
            task_completeness_all: to_f64(self.comp_all, self.n),
            rer_all: to_f64(self.rer_all, self.n),
        }
    }
}

pub fn aggregate(rows: &[EpisodeMetrics]) -> MetricsReport {
    let mut overall = Acc::default();
    let mut per: BTreeMap<Category, Acc> = BTreeMap::new();
    let mut excluded = 0;
    for m in rows {
        if m.infra_failed {
            excluded += 1;
            continue;
        }
        overall.add(m);
        per.entry(m.category).or_default().add(m);
    }
    MetricsReport {
        note: REPORT_NOTE.into(),
        excluded_infra_failures: excluded,
        overall: overall.summary(),
        per_category: per.into_iter().map(|(c, a)| (c, a.summary())).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FilterError {
    #[error("task {task_id}: trajectory scene `{found}` does not match `{expected}`")]
    SceneMismatch { task_id: String, expected: String, found: String },
    #[error("task {task_id}: key actions cannot be derived: {message}")]
    NoKey { task_id: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct FilterReport {
    /// Candidate indices that passed.
    pub accepted: Vec<usize>,
    pub rejected: Vec<(usize, Vec<Reason>)>,
}

/// Reasons `traj` would be rejected; empty when it is accepted.
pub fn assess(task: &TaskInstruction, scene: &Scene, traj: &Trajectory) -> Result<Vec<Reason>, FilterError> {
    if traj.scene_id != scene.id || task.scene_id != scene.id {
        return Err(FilterError::SceneMismatch {
            task_id: task.id.clone(),
            expected: scene.id.clone(),
            found: traj.scene_id.clone(),
        });
    }
    let key = derive_key_actions(task, scene)
        .map_err(|e| FilterError::NoKey { task_id: task.id.clone(), message: e.to_string() })?;
    let (result, judgment) = EpisodeResult::from_trajectory(task, &key.actions, scene, traj);
    // A forged erroneous prefix is meant to contain the mistake; it never trains.
    let forged: Vec<bool> = traj
        .records
        .iter()
        .filter(|r| matches!(r.payload, Payload::Action { .. }))
        .map(|r| r.provenance == Provenance::ErroneousPrefix)
        .collect();
    let mut reasons: Vec<Reason> = result
        .outcomes
        .iter()
        .enumerate()
        .filter(|&(i, o)| o.status == StepStatus::Illegal && !forged.get(i).copied().unwrap_or(false))
        .map(|(index, _)| Reason::IllegalStep { index })
        .collect();
    if let Err(e) = traj.validate() {
        reasons.push(Reason::Grammar { message: e.to_string() });
    }
    reasons.extend(judgment.reasons);
    Ok(reasons)
}

/// Process-reward filter: accept iff every step is legal and the judge succeeds.
pub fn filter_trajectories(
    candidates: &[(TaskInstruction, Trajectory)],
    scenes: &BTreeMap<String, Scene>,
) -> Result<FilterReport, FilterError> {
    let assessed = crate::par::map(candidates, |(task, traj)| match scenes.get(&task.scene_id) {
        Some(scene) => assess(task, scene, traj),
        None => Err(FilterError::SceneMismatch {
            task_id: task.id.clone(),
            expected: task.scene_id.clone(),
            found: traj.scene_id.clone(),
        }),
    });
    let mut report = FilterReport::default();
    for (i, r) in assessed.into_iter().enumerate() {
        let reasons = r?;
        if reasons.is_empty() {
            report.accepted.push(i);
        } else {
            report.rejected.push((i, reasons));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
