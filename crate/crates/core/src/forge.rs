//! Reflection data: anomalies injected into successful trajectories, and
//! failed trajectories turned into self-corrections.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::action::{Action, Verb};
use crate::goal::GoalTracker;
use crate::planner::{first_divergence, plan_from, KeyActionSequence};
use crate::reward::{unmatched_key_actions, EpisodeResult};
use crate::scene::Scene;
use crate::seed;
use crate::sim::{self, Effect, Episode, StepStatus, DEFAULT_STEP_LIMIT};
use crate::task::TaskInstruction;
use crate::thought::{context_for, SearchMemory, Template, Thought, ThoughtContext, ThoughtEngine, ThoughtPattern, MAX_THOUGHTS_PER_ACTION};
use crate::trajectory::{Provenance, Record, RecordKind, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    Navigation,
    Manipulation,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "detail", rename_all = "snake_case")]
pub enum AnomalyDetail {
    WrongReceptacle { actual: String },
    FailedVerb { verb: Verb },
}

/// Where and how an anomaly strikes. `position` counts actions, not records.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    pub position: usize,
    #[serde(flatten)]
    pub detail: AnomalyDetail,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ForgeError {
    #[error("anomaly at action {position} is not applicable: {reason}")]
    IncompatiblePosition { position: usize, reason: String },
    #[error("source trajectory does not succeed")]
    NotSuccessful,
    #[error("the retry would exceed the {limit}-step budget")]
    StepBudget { limit: u32 },
    #[error("anomaly at action {position} would change later observations")]
    Inconsistent { position: usize },
    #[error("trajectory already completes the task")]
    NoDivergenceFound,
    #[error("cannot correct after action {divergence}: {reason}")]
    UncorrectableState { divergence: usize, reason: String },
}

fn incompatible(position: usize, reason: impl Into<String>) -> ForgeError {
    ForgeError::IncompatiblePosition { position, reason: reason.into() }
}

/// Replays `records` and checks that every action is followed by exactly the
/// observation the simulator produces, and that the task is met in order.
fn replay_consistent(task: &TaskInstruction, scene: &Scene, records: &[Record]) -> bool {
    let (mut ep, first) = Episode::reset(scene);
    if records.first().and_then(Record::as_observation) != Some(&first) {
        return false;
    }
    let mut tracker = GoalTracker::new(&task.goal, &ep);
    for (i, r) in records.iter().enumerate() {
        let Some((action, effect)) = r.as_action() else { continue };
        if ep.is_done() {
            return false;
        }
        let out = ep.step_with(action, effect);
        tracker.update(&ep);
        if action.verb != Verb::End && records.get(i + 1).and_then(Record::as_observation) != Some(&out.observation) {
            return false;
        }
    }
    ep.status() == sim::EpisodeStatus::Ended && tracker.satisfied()
}

/// State just before action `position`, replaying recorded effects.
fn episode_before<'s>(scene: &'s Scene, traj: &Trajectory, position: usize) -> Episode<'s> {
    let (mut ep, _) = Episode::reset(scene);
    for s in traj.replay_steps().take(position) {
        ep.step_with(s.action, s.effect);
    }
    ep
}

/// Receptacles a misdirected navigation at this point may land on without
/// altering anything the agent later observes: already known, navigable,
/// neither the target nor the current location.
fn wrong_receptacles(ep: &Episode<'_>, action: &Action) -> Vec<String> {
    let scene = ep.scene();
    let target = ep.check(action).ok().flatten();
    scene
        .navigable()
        .filter(|&r| Some(r) != target && Some(r) != ep.location_idx())
        .map(|r| scene.objects[r].id.clone())
        .filter(|id| ep.agent().known_receptacles.contains(id))
        .collect()
}

fn compatible(kind: AnomalyKind, action: &Action) -> bool {
    match kind {
        AnomalyKind::Navigation => action.verb == Verb::NavigateTo,
        AnomalyKind::Manipulation => action.verb.is_manipulation(),
    }
}

fn reflection(engine: &ThoughtEngine<'_>, list: &[Template], ctx: &ThoughtContext, rng: &mut impl Rng) -> Option<Thought> {
    let mut t = ctx.pick(ThoughtPattern::SelfReflection, list, rng)?;
    if let Some(h) = engine.hook {
        if let Some(text) = h.rewrite(&t) {
            t.text = text;
        }
    }
    Some(t)
}

/// Turns `... a o+ ...` into `... a o- t_r a o+ ...`: the first attempt goes
/// wrong as `spec` describes, a reflection notes it, and the identical action
/// is retried. Later records are kept; their step references shift by one.
pub fn inject_anomaly(
    engine: &ThoughtEngine<'_>,
    task: &TaskInstruction,
    scene: &Scene,
    traj: &Trajectory,
    spec: &AnomalySpec,
    seed: u64,
) -> Result<Trajectory, ForgeError> {
    let positions = traj.action_positions();
    let p = spec.position;
    let &at = positions.get(p).ok_or_else(|| incompatible(p, "no such action"))?;
    let (action, effect) = traj.records[at].as_action().expect("action position");
    if !effect.is_normal() {
        return Err(incompatible(p, "action already carries an anomaly"));
    }
    if !compatible(spec.kind, action) {
        return Err(incompatible(p, format!("{:?} anomaly cannot apply to `{}`", spec.kind, action.render(scene))));
    }
    if positions.len() as u32 + 1 > DEFAULT_STEP_LIMIT {
        return Err(ForgeError::StepBudget { limit: DEFAULT_STEP_LIMIT });
    }
    if !replay_consistent(task, scene, &traj.records) {
        return Err(ForgeError::NotSuccessful);
    }

    let mut ep = episode_before(scene, traj, p);
    let target = ep.check(action).ok().flatten();
    let mut ctx = ThoughtContext::default();
    let (new_effect, family) = match (&spec.kind, &spec.detail) {
        (AnomalyKind::Navigation, AnomalyDetail::WrongReceptacle { actual }) => {
            if !wrong_receptacles(&ep, action).contains(actual) {
                return Err(incompatible(p, format!("`{actual}` is not a known receptacle other than the target")));
            }
            let intended = target.map(|i| scene.label(i).to_string()).unwrap_or_default();
            let wrong = scene.label_of(actual).unwrap_or(actual).to_string();
            ctx.set_with_steps("intended", intended, target.map(|i| vec![scene.objects[i].id.clone()]).unwrap_or_default(), vec![p]);
            ctx.set_with_steps("wrong", wrong, vec![actual.clone()], vec![p]);
            (Effect::Misdirected { actual: actual.clone() }, &engine.templates.anomaly_navigation)
        }
        (AnomalyKind::Manipulation, AnomalyDetail::FailedVerb { verb }) => {
            if *verb != action.verb {
                return Err(incompatible(p, format!("failed verb {verb:?} differs from `{}`", action.render(scene))));
            }
            if let Some(i) = target {
                ctx.set_with_steps("object", scene.label(i).to_string(), vec![scene.objects[i].id.clone()], vec![p]);
            }
            (Effect::Faulted, &engine.templates.anomaly_manipulation)
        }
        _ => return Err(incompatible(p, "anomaly detail does not match its kind")),
    };
    ctx.set_with_steps("action", action.render(scene), vec![], vec![p]);

    let anomalous = ep.step_with(action, &new_effect);
    if anomalous.status != StepStatus::Faulted {
        return Err(incompatible(p, "the anomaly did not take effect"));
    }
    let mut rng = seed::rng(seed::derive_indexed(seed, "anomaly", p as u64));
    let t_r = reflection(engine, family, &ctx, &mut rng).ok_or_else(|| incompatible(p, "no reflection template applies"))?;

    let mut records = traj.records[..at].to_vec();
    let mut first = traj.records[at].clone();
    if let crate::trajectory::Payload::Action { effect, .. } = &mut first.payload {
        *effect = new_effect;
    }
    records.push(first);
    records.push(Record::observation(anomalous.observation, Provenance::InjectedAnomaly));
    records.push(Record::thought(t_r, Provenance::ReflectiveThought));
    records.push(Record::action(action.clone(), Effect::Normal, Provenance::Synthesized));
    for r in &traj.records[at + 1..] {
        let mut r = r.clone();
        if let crate::trajectory::Payload::Thought { thought } = &mut r.payload {
            for s in &mut thought.refers_to {
                if *s > p {
                    *s += 1;
                }
            }
        }
        records.push(r);
    }
    if !replay_consistent(task, scene, &records) {
        return Err(ForgeError::Inconsistent { position: p });
    }
    Ok(Trajectory { records, ..traj.clone() })
}

/// Every valid anomaly spec for `traj`, in action order.
pub fn anomaly_candidates(scene: &Scene, traj: &Trajectory) -> Vec<AnomalySpec> {
    let (mut ep, _) = Episode::reset(scene);
    let mut out = Vec::new();
    for (position, s) in traj.replay_steps().enumerate() {
        if s.effect.is_normal() {
            if compatible(AnomalyKind::Navigation, s.action) {
                for actual in wrong_receptacles(&ep, s.action) {
                    out.push(AnomalySpec {
                        kind: AnomalyKind::Navigation,
                        position,
                        detail: AnomalyDetail::WrongReceptacle { actual },
                    });
                }
            } else if compatible(AnomalyKind::Manipulation, s.action) {
                out.push(AnomalySpec {
                    kind: AnomalyKind::Manipulation,
                    position,
                    detail: AnomalyDetail::FailedVerb { verb: s.action.verb },
                });
            }
        }
        ep.step_with(s.action, s.effect);
    }
    out
}

/// Seeded choice: kind uniformly among those available, then the action,
/// then the wrong receptacle.
pub fn sample_anomaly_spec(scene: &Scene, traj: &Trajectory, rng: &mut impl Rng) -> Option<AnomalySpec> {
    let all = anomaly_candidates(scene, traj);
    let kinds: Vec<AnomalyKind> = all.iter().map(|s| s.kind).collect::<BTreeSet<_>>().into_iter().collect();
    let kind = *kinds.choose(rng)?;
    let mut positions: Vec<usize> = all.iter().filter(|s| s.kind == kind).map(|s| s.position).collect();
    positions.dedup();
    let position = *positions.choose(rng)?;
    let options: Vec<&AnomalySpec> = all.iter().filter(|s| s.kind == kind && s.position == position).collect();
    options.choose(rng).map(|s| (*s).clone())
}

/// Injects up to `count` anomalies one after another. Returns the forged
/// trajectory and the specs applied, positions relative to the final trajectory
/// at the time of each injection.
pub fn inject_anomalies(
    engine: &ThoughtEngine<'_>,
    task: &TaskInstruction,
    scene: &Scene,
    traj: &Trajectory,
    count: usize,
    seed: u64,
) -> Result<(Trajectory, Vec<AnomalySpec>), ForgeError> {
    let mut rng = seed::rng(seed::derive(seed, "anomaly-spec"));
    let mut current = traj.clone();
    let mut applied = Vec::new();
    for k in 0..count {
        let Some(spec) = sample_anomaly_spec(scene, &current, &mut rng) else { break };
        current = inject_anomaly(engine, task, scene, &current, &spec, seed::derive_indexed(seed, "inject", k as u64))?;
        applied.push(spec);
    }
    Ok((current, applied))
}

/// A corrected trajectory and where its source first went wrong.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correction {
    pub trajectory: Trajectory,
    pub divergence: usize,
    /// Action index the reflection names, if any.
    pub mistake: Option<usize>,
    /// Number of actions kept from the failed trajectory.
    pub prefix_actions: usize,
}

/// Keeps the failed trajectory up to its first divergence from `key` as a
/// no-loss prefix, adds a reflection naming the mistake, then plans and
/// annotates a suffix from the state the prefix left behind.
pub fn forge_correction(
    engine: &ThoughtEngine<'_>,
    task: &TaskInstruction,
    key: &[Action],
    scene: &Scene,
    failed: &Trajectory,
    seed: u64,
) -> Result<Correction, ForgeError> {
    let actions = failed.actions();
    let effects = failed.effects();
    let steps_ok = |n: usize| -> bool {
        let steps = actions.iter().zip(&effects).take(n).map(|(action, effect)| sim::ReplayStep { action, effect });
        sim::replay_steps(scene, &task.goal, steps).success
    };
    if !actions.is_empty() && steps_ok(actions.len()) {
        return Err(ForgeError::NoDivergenceFound);
    }
    let t = first_divergence(scene, &task.goal, key, &actions).ok_or(ForgeError::NoDivergenceFound)?;
    let uncorrectable = |reason: &str| ForgeError::UncorrectableState { divergence: t, reason: reason.into() };

    // the erroneous action stays in view unless it ended the episode
    let keep = match actions.get(t) {
        Some(a) if a.verb != Verb::End => t + 1,
        _ => t.min(actions.len()),
    };
    let (mut ep, first) = Episode::reset(scene);
    let mut tracker = GoalTracker::new(&task.goal, &ep);
    let mut statuses = Vec::new();
    for (a, e) in actions.iter().zip(&effects).take(keep) {
        if ep.is_done() {
            return Err(uncorrectable("episode is over"));
        }
        statuses.push(ep.step_with(a, e).status);
        tracker.update(&ep);
    }
    if ep.is_done() {
        return Err(uncorrectable("episode is over"));
    }

    let cut = if keep == 0 {
        if failed.records.is_empty() { 0 } else { 1 }
    } else {
        let positions = failed.action_positions();
        let after = positions[keep - 1] + 1;
        // keep the observation (and any feedback) that followed the last kept action
        let next = positions.get(keep).copied().unwrap_or(failed.records.len());
        (after..next).take_while(|&i| matches!(failed.records[i].kind(), RecordKind::Observation | RecordKind::Feedback)).last().map_or(after, |i| i + 1)
    };
    let mut out = Trajectory { records: Vec::new(), ..failed.clone() };
    if failed.records.is_empty() {
        out.task_id = task.id.clone();
        out.scene_id = scene.id.clone();
        out.seed = seed;
        out.push(Record::observation(first, Provenance::ErroneousPrefix));
    }
    out.records.extend(failed.records[..cut].iter().cloned().map(Record::into_prefix));

    let suffix = choose_suffix(task, key, scene, &ep, &actions[..keep], &effects[..keep], &statuses)
        .ok_or_else(|| uncorrectable("no suffix completes the task within the step limit"))?;

    let key_keys: Vec<_> = key.iter().map(|a| a.key(scene)).collect();
    let mistake = (0..keep)
        .rev()
        .find(|&i| statuses[i] == StepStatus::Illegal || !key_keys.contains(&actions[i].key(scene)));

    let mut rng = seed::rng(seed::derive(seed, "correction"));
    let memory = SearchMemory::starting_at(keep);
    let mut ctx = context_for(&ep, &tracker, task, &suffix[0], &memory);
    if let Some(m) = mistake {
        let ids = actions[m].target.clone().into_iter().collect();
        ctx.set_with_steps("mistake", actions[m].render(scene), ids, vec![m]);
    }
    let family: Vec<Template> =
        engine.templates.correction.iter().filter(|t| t.slots().contains(&"mistake") == mistake.is_some()).cloned().collect();
    let t_r = reflection(engine, &family, &ctx, &mut rng).ok_or_else(|| uncorrectable("no reflection template applies"))?;
    out.push(Record::thought(t_r, Provenance::ReflectiveThought));

    let reflection_at = out.records.len();
    let mut memory = memory;
    engine
        .continue_from(&mut ep, &mut tracker, task, &suffix, &|_| false, &mut memory, Provenance::CorrectedSuffix, &mut rng, &mut out)
        .map_err(|e| uncorrectable(&e.to_string()))?;
    // the reflection already occupies one of the thought slots before the first suffix action
    let extra = out.records[reflection_at..].iter().take_while(|r| r.kind() == RecordKind::Thought).count();
    let allowed = MAX_THOUGHTS_PER_ACTION - 1;
    if extra > allowed {
        out.records.drain(reflection_at + allowed..reflection_at + extra);
    }
    Ok(Correction { trajectory: out, divergence: t, mistake, prefix_actions: keep })
}

/// Closes containers the prefix opened that started closed, walking to each
/// one's navigable anchor first when needed.
fn undo_openings(ep: &Episode<'_>) -> Vec<Action> {
    let scene = ep.scene();
    let (start, _) = Episode::reset(scene);
    let mut probe = ep.clone();
    let mut out = Vec::new();
    let mut opened: Vec<usize> = (0..scene.len()).filter(|&i| ep.is_open(i) && !start.is_open(i)).collect();
    // innermost first
    opened.sort_by_key(|&i| std::cmp::Reverse(probe.current_ancestors(i).len()));
    for c in opened {
        let mut anchor = c;
        while !scene.objects[anchor].attrs.navigable {
            match probe.world().parent(anchor) {
                Some(p) => anchor = p,
                None => break,
            }
        }
        let mut steps = Vec::new();
        if probe.location_idx() != Some(anchor) {
            steps.push(Action::navigate(scene.objects[anchor].id.clone()));
        }
        steps.push(Action::close(scene.objects[c].id.clone()));
        for a in steps {
            if probe.step(&a).status != StepStatus::Ok {
                return Vec::new();
            }
            out.push(a);
        }
    }
    out
}

/// First suffix that, appended to the prefix, re-judges as a success: the
/// rest of the key sequence, that rest after undoing stray openings, then a
/// fresh plan from the current state.
fn choose_suffix(
    task: &TaskInstruction,
    key: &[Action],
    scene: &Scene,
    ep: &Episode<'_>,
    prefix: &[Action],
    prefix_effects: &[Effect],
    statuses: &[StepStatus],
) -> Option<Vec<Action>> {
    let key_keys: Vec<_> = key.iter().map(|a| a.key(scene)).collect();
    let accepted: Vec<_> = prefix
        .iter()
        .zip(statuses)
        .filter(|(a, s)| **s == StepStatus::Ok && !matches!(a.verb, Verb::Observe | Verb::MoveForward))
        .map(|(a, _)| a.key(scene))
        .collect();
    let matched = key.len() - unmatched_key_actions(&key_keys, &accepted).len();
    // where the key's own execution stands before each of its actions
    let mut key_locations = Vec::with_capacity(key.len());
    let (mut walk, _) = Episode::reset(scene);
    for a in key {
        key_locations.push(walk.agent().location.clone());
        walk.step(a);
    }
    let undo = undo_openings(ep);
    let mut after_undo = ep.clone();
    for a in &undo {
        after_undo.step(a);
    }
    let resume = |j: usize, from: &Episode<'_>, lead: &[Action]| -> Vec<Action> {
        let mut s = lead.to_vec();
        if let Some(Some(loc)) = key_locations.get(j) {
            let needs_move = key[j].verb != Verb::NavigateTo && from.agent().location.as_ref() != Some(loc);
            if needs_move {
                s.push(Action::navigate(loc.clone()));
            }
        }
        s.extend_from_slice(&key[j..]);
        s
    };
    let mut candidates: Vec<Vec<Action>> = (0..=matched).rev().map(|j| key[j..].to_vec()).collect();
    candidates.extend((0..=matched).rev().map(|j| resume(j, ep, &[])));
    if !undo.is_empty() {
        candidates.extend((0..=matched).rev().map(|j| resume(j, &after_undo, &undo)));
    }
    if let Ok(plan) = plan_from(&mut ep.clone(), &task.goal) {
        candidates.push(plan);
    }
    let budget = (DEFAULT_STEP_LIMIT - ep.agent().step_count) as usize;
    candidates.into_iter().filter(|s| !s.is_empty() && s.len() <= budget).find(|suffix| {
        let full = [prefix, suffix.as_slice()].concat();
        let mut fx = prefix_effects.to_vec();
        fx.resize(full.len(), Effect::Normal);
        let (result, judgment) = EpisodeResult::evaluate(task, key, scene, &full, &fx);
        judgment.success && result.outcomes[prefix.len()..].iter().all(|o| o.status == StepStatus::Ok)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    /// Stop partway through the key sequence.
    Truncate,
    /// Search a wrong receptacle, open it if possible, then give up.
    WrongContainer,
    /// Swap one key action's target for another object.
    Substitute,
}

impl FailureMode {
    pub const ALL: [FailureMode; 3] = [FailureMode::Truncate, FailureMode::WrongContainer, FailureMode::Substitute];
}

/// A failing action list derived from `key`, or `None` if the chosen mode
/// cannot make this task fail.
pub fn induce_failure(scene: &Scene, task: &TaskInstruction, key: &KeyActionSequence, mode: FailureMode, rng: &mut impl Rng) -> Option<Vec<Action>> {
    let body: Vec<Action> = key.actions.iter().filter(|a| a.verb != Verb::End).cloned().collect();
    if body.is_empty() {
        return None;
    }
    let cut = rng.random_range(0..body.len());
    let mut out: Vec<Action> = body[..cut].to_vec();
    match mode {
        FailureMode::Truncate => {}
        FailureMode::WrongContainer => {
            let (mut ep, _) = Episode::reset(scene);
            for a in &out {
                ep.step(a);
            }
            let mut pool = wrong_receptacles(&ep, &body[cut]);
            pool.shuffle(rng);
            let r = pool.first()?;
            out.push(Action::navigate(r.clone()));
            if scene.object(r).is_some_and(|o| o.attrs.openable) {
                out.push(Action::open(r.clone()));
            }
        }
        FailureMode::Substitute => {
            let orig = &body[cut];
            let others: Vec<&str> = scene.objects.iter().map(|o| o.id.as_str()).filter(|id| Some(*id) != orig.target.as_deref()).collect();
            let swap = match &orig.target {
                Some(_) => Action::with(orig.verb, *others.choose(rng)?),
                None => Action::bare(Verb::Observe),
            };
            out.push(swap);
            out.extend_from_slice(&body[cut + 1..]);
        }
    }
    out.push(Action::end());
    (!sim::final_state_check(scene, &task.goal, &out)).then_some(out)
}

/// Simulates `actions` with thoughts, recording illegal steps and their
/// feedback, as a sampled agent would have produced them.
pub fn rollout(engine: &ThoughtEngine<'_>, task: &TaskInstruction, scene: &Scene, actions: &[Action], provenance: Provenance, seed: u64) -> Trajectory {
    let mut rng = seed::rng(seed::derive(seed, "rollout"));
    let (mut ep, first) = Episode::reset(scene);
    let mut tracker = GoalTracker::new(&task.goal, &ep);
    let mut traj = Trajectory::new(task.id.clone(), scene.id.clone(), seed);
    traj.push(Record::observation(first, provenance));
    let mut memory = SearchMemory::default();
    engine.rollout(&mut ep, &mut tracker, task, actions, &mut memory, provenance, &mut rng, &mut traj);
    traj
}
