//! Episode state machine over a shared, immutable [`Scene`].
//!
//! Visibility: the agent always sees the receptacles it knows about. At its
//! current location it also sees the location's contents (unless the location
//! is a closed container), recursing into children that are open or cannot be
//! closed. Everything that ever appears in that local view is recorded as
//! revealed.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::action::{Action, Verb};
use crate::goal::{Goal, GoalTracker};
use crate::prompt::{self, FeedbackTemplate};
use crate::scene::{ObjectState, Scene};

pub const DEFAULT_STEP_LIMIT: u32 = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Placement {
    Room,
    In(usize),
    Held,
}

/// Mutable object state of one episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldState {
    pub states: Vec<ObjectState>,
    pub placement: Vec<Placement>,
}

impl WorldState {
    fn from_scene(scene: &Scene) -> Self {
        WorldState {
            states: scene.objects.iter().map(|o| o.state).collect(),
            placement: (0..scene.len())
                .map(|i| scene.initial_parent(i).map_or(Placement::Room, Placement::In))
                .collect(),
        }
    }

    pub fn parent(&self, idx: usize) -> Option<usize> {
        match self.placement[idx] {
            Placement::In(p) => Some(p),
            _ => None,
        }
    }

    pub fn children(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.placement.len()).filter(move |&c| self.placement[c] == Placement::In(idx))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AgentState {
    pub location: Option<String>,
    pub held: Option<String>,
    pub known_receptacles: BTreeSet<String>,
    pub revealed_items: BTreeSet<String>,
    pub step_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObservationKind {
    Frame,
    Feedback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisibleObject {
    pub id: String,
    pub class: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub open: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toggled_on: Option<bool>,
    /// `"room"` for receptacles seen from afar, else `"on <label>"` / `"in <label>"`.
    pub containment: String,
}

/// Reference to an object by id, with its display label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Named {
    pub id: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub kind: ObservationKind,
    pub visible: Vec<VisibleObject>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<Named>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holding: Option<Named>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback_text: Option<String>,
}

impl Observation {
    pub fn text(&self) -> String {
        match self.kind {
            ObservationKind::Feedback => self.feedback_text.clone().unwrap_or_default(),
            ObservationKind::Frame => render_frame(self),
        }
    }
}

fn object_note(v: &VisibleObject) -> String {
    let mut s = v.label.clone();
    match (v.open, v.toggled_on) {
        (Some(true), Some(on)) => s.push_str(if on { " (open, on)" } else { " (open, off)" }),
        (Some(false), Some(on)) => s.push_str(if on { " (closed, on)" } else { " (closed, off)" }),
        (Some(true), None) => s.push_str(" (open)"),
        (Some(false), None) => s.push_str(" (closed)"),
        (None, Some(true)) => s.push_str(" (on)"),
        (None, Some(false)) => s.push_str(" (off)"),
        (None, None) => {}
    }
    s
}

/// Deterministic text form of a frame, one sentence per line.
pub fn render_frame(obs: &Observation) -> String {
    let mut out = String::new();
    match &obs.location {
        Some(loc) => out.push_str(&format!("You are at the {}.\n", loc.label)),
        None => out.push_str("You are standing in a corner of the room.\n"),
    }
    let landmarks: Vec<String> =
        obs.visible.iter().filter(|v| v.containment == "room").map(object_note).collect();
    if landmarks.is_empty() {
        out.push_str("No receptacles are in sight.\n");
    } else {
        out.push_str(&format!("Receptacles in sight: {}.\n", landmarks.join(", ")));
    }
    if let Some(loc) = &obs.location {
        // group local objects by container, in order of first appearance
        let mut groups: Vec<(String, Vec<String>)> = Vec::new();
        for v in obs.visible.iter().filter(|v| v.containment != "room") {
            match groups.iter_mut().find(|(c, _)| *c == v.containment) {
                Some((_, items)) => items.push(object_note(v)),
                None => groups.push((v.containment.clone(), vec![object_note(v)])),
            }
        }
        let closed_here = obs.visible.iter().any(|v| v.id == loc.id && v.open == Some(false));
        if closed_here {
            out.push_str(&format!("The {} is closed.\n", loc.label));
        } else if groups.is_empty() {
            out.push_str(&format!("There is nothing at the {}.\n", loc.label));
        }
        for (containment, items) in groups {
            let mut head = containment;
            if let Some(first) = head.get_mut(0..1) {
                first.make_ascii_uppercase();
            }
            out.push_str(&format!("{}: {}.\n", head.replacen(' ', " the ", 1), items.join(", ")));
        }
    }
    match &obs.holding {
        Some(h) => out.push_str(&format!("You are holding the {}.\n", h.label)),
        None => out.push_str("Your hands are empty.\n"),
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Unavailable {
    NotVisible,
    TooFar,
    NotPickupable,
    NotToggleable,
    NotOpenable,
    NotReceptacle,
    HasContents,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, thiserror::Error)]
pub enum StepError {
    #[error("target is not navigable")]
    TargetNotNavigable,
    #[error("target unavailable: {0:?}")]
    TargetUnavailable(Unavailable),
    #[error("no such navigation target in this room")]
    UnknownNavigationTarget,
    #[error("no such interaction target in this room")]
    UnknownInteractionTarget,
    #[error("already holding an object")]
    HandsFull,
    #[error("nothing in hand")]
    HandsEmpty,
    #[error("already open")]
    AlreadyOpen,
    #[error("already closed")]
    AlreadyClosed,
    #[error("container is closed")]
    ContainerClosed,
    #[error("episode has ended")]
    EpisodeEnded,
}

impl StepError {
    pub fn feedback(self) -> FeedbackTemplate {
        match self {
            StepError::TargetNotNavigable => FeedbackTemplate::NotNavigable,
            StepError::UnknownNavigationTarget => FeedbackTemplate::NavigationMismatch,
            StepError::UnknownInteractionTarget => FeedbackTemplate::InteractionMismatch,
            _ => FeedbackTemplate::Unavailable,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepStatus {
    Ok,
    Illegal,
    /// The action was accepted but the manipulation did not take effect.
    Faulted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub status: StepStatus,
    pub observation: Observation,
    pub state_after: AgentState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<StepError>,
    /// Object id the target phrase resolved to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved: Option<String>,
}

/// Why an episode stopped accepting actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpisodeStatus {
    Running,
    Ended,
    StepLimit,
}

#[derive(Debug, Clone)]
pub struct Episode<'s> {
    scene: &'s Scene,
    world: WorldState,
    agent: AgentState,
    status: EpisodeStatus,
    step_limit: u32,
}

impl<'s> Episode<'s> {
    pub fn reset(scene: &'s Scene) -> (Self, Observation) {
        Self::with_limit(scene, DEFAULT_STEP_LIMIT)
    }

    pub fn with_limit(scene: &'s Scene, step_limit: u32) -> (Self, Observation) {
        let agent = AgentState {
            known_receptacles: scene.initially_visible.clone(),
            ..AgentState::default()
        };
        let ep = Episode {
            scene,
            world: WorldState::from_scene(scene),
            agent,
            status: EpisodeStatus::Running,
            step_limit,
        };
        let obs = ep.frame();
        (ep, obs)
    }

    pub fn scene(&self) -> &'s Scene {
        self.scene
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn agent(&self) -> &AgentState {
        &self.agent
    }

    pub fn status(&self) -> EpisodeStatus {
        self.status
    }

    pub fn is_done(&self) -> bool {
        self.status != EpisodeStatus::Running
    }

    pub fn snapshot(&self) -> (WorldState, AgentState) {
        (self.world.clone(), self.agent.clone())
    }

    pub fn location_idx(&self) -> Option<usize> {
        self.agent.location.as_deref().and_then(|l| self.scene.index_of(l))
    }

    pub fn held_idx(&self) -> Option<usize> {
        self.agent.held.as_deref().and_then(|h| self.scene.index_of(h))
    }

    pub fn is_open(&self, idx: usize) -> bool {
        self.world.states[idx].open
    }

    fn closed_container(&self, idx: usize) -> bool {
        self.scene.objects[idx].attrs.openable && !self.world.states[idx].open
    }

    /// Objects visible at the current location, depth-first in scene order.
    pub fn local_view(&self) -> Vec<usize> {
        let mut out = Vec::new();
        if let Some(loc) = self.location_idx() {
            if !self.closed_container(loc) {
                self.collect_view(loc, &mut out);
            }
        }
        out
    }

    fn collect_view(&self, p: usize, out: &mut Vec<usize>) {
        for c in self.world.children(p) {
            out.push(c);
            if !self.closed_container(c) {
                self.collect_view(c, out);
            }
        }
    }

    pub fn in_view(&self, idx: usize) -> bool {
        self.local_view().contains(&idx)
    }

    /// Current ancestor chain of `idx`, nearest first (held objects have none).
    pub fn current_ancestors(&self, idx: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = self.world.parent(idx);
        while let Some(p) = cur {
            out.push(p);
            cur = self.world.parent(p);
        }
        out
    }

    fn describe(&self, idx: usize, containment: String) -> VisibleObject {
        let o = &self.scene.objects[idx];
        let st = self.world.states[idx];
        VisibleObject {
            id: o.id.clone(),
            class: o.class_name.clone(),
            label: self.scene.label(idx).to_string(),
            open: o.attrs.openable.then_some(st.open),
            toggled_on: o.attrs.toggleable.then_some(st.toggled_on),
            containment,
        }
    }

    fn named(&self, idx: usize) -> Named {
        Named { id: self.scene.objects[idx].id.clone(), label: self.scene.label(idx).to_string() }
    }

    pub fn frame(&self) -> Observation {
        self.observation(ObservationKind::Frame, None)
    }

    /// A feedback observation carrying `text`, without taking a step.
    pub fn feedback(&self, text: impl Into<String>) -> Observation {
        self.observation(ObservationKind::Feedback, Some(text.into()))
    }

    fn observation(&self, kind: ObservationKind, feedback_text: Option<String>) -> Observation {
        let mut visible = Vec::new();
        for i in 0..self.scene.len() {
            if self.agent.known_receptacles.contains(&self.scene.objects[i].id) {
                visible.push(self.describe(i, "room".to_string()));
            }
        }
        for c in self.local_view() {
            let p = self.world.parent(c).expect("local objects have a parent");
            let prep = if self.scene.objects[p].attrs.openable { "in" } else { "on" };
            visible.push(self.describe(c, format!("{prep} {}", self.scene.label(p))));
        }
        Observation {
            kind,
            visible,
            location: self.location_idx().map(|i| self.named(i)),
            holding: self.held_idx().map(|i| self.named(i)),
            feedback_text,
        }
    }

    fn adjacent(&self, idx: usize) -> bool {
        let loc = self.location_idx();
        loc == Some(idx) || (loc.is_some() && self.world.parent(idx) == loc && self.in_view(idx))
    }

    /// Legality of `verb` on a specific object.
    pub fn check_on(&self, verb: Verb, idx: usize) -> Result<(), StepError> {
        use StepError::*;
        use Unavailable::*;
        let attrs = self.scene.objects[idx].attrs;
        let st = self.world.states[idx];
        match verb {
            Verb::NavigateTo => {
                if !attrs.navigable {
                    return Err(TargetNotNavigable);
                }
            }
            Verb::Open | Verb::Close => {
                if !attrs.openable {
                    return Err(TargetUnavailable(NotOpenable));
                }
                if !self.adjacent(idx) {
                    return Err(TargetUnavailable(TooFar));
                }
                if verb == Verb::Open && st.open {
                    return Err(AlreadyOpen);
                }
                if verb == Verb::Close && !st.open {
                    return Err(AlreadyClosed);
                }
            }
            Verb::Pickup => {
                if !attrs.pickupable {
                    return Err(TargetUnavailable(NotPickupable));
                }
                if !self.in_view(idx) {
                    return Err(TargetUnavailable(NotVisible));
                }
                if self.world.children(idx).next().is_some() {
                    return Err(TargetUnavailable(HasContents));
                }
                if self.agent.held.is_some() {
                    return Err(HandsFull);
                }
            }
            Verb::PutIn => {
                if !attrs.is_stationary_receptacle() {
                    return Err(TargetUnavailable(NotReceptacle));
                }
                if self.agent.held.is_none() {
                    return Err(HandsEmpty);
                }
                if !self.adjacent(idx) {
                    return Err(TargetUnavailable(TooFar));
                }
                if attrs.openable && !st.open {
                    return Err(ContainerClosed);
                }
            }
            Verb::Toggle => {
                if !attrs.toggleable {
                    return Err(TargetUnavailable(NotToggleable));
                }
                if self.location_idx() != Some(idx) && !self.in_view(idx) {
                    return Err(TargetUnavailable(NotVisible));
                }
            }
            Verb::Observe | Verb::MoveForward | Verb::End => {}
        }
        Ok(())
    }

    /// Resolve a target phrase to an object. Ids and unique labels resolve
    /// directly; a class name picks the first instance (in id order) on which
    /// the verb is legal, preferring somewhere other than here for navigation.
    pub fn resolve(&self, verb: Verb, phrase: &str) -> Result<usize, (Option<usize>, StepError)> {
        if let Some(i) = self.scene.resolve_id(phrase) {
            return self.check_on(verb, i).map(|_| i).map_err(|e| (Some(i), e));
        }
        let mut candidates = self.scene.by_class(phrase);
        if candidates.is_empty() {
            let e = if verb == Verb::NavigateTo {
                StepError::UnknownNavigationTarget
            } else {
                StepError::UnknownInteractionTarget
            };
            return Err((None, e));
        }
        candidates.sort_by(|&a, &b| self.scene.objects[a].id.cmp(&self.scene.objects[b].id));
        if verb == Verb::NavigateTo {
            let here = self.location_idx();
            candidates.sort_by_key(|&c| Some(c) == here);
        }
        for &c in &candidates {
            if self.check_on(verb, c).is_ok() {
                return Ok(c);
            }
        }
        let first = candidates[0];
        Err((Some(first), self.check_on(verb, first).unwrap_err()))
    }

    /// Legality of a whole action without executing it.
    pub fn check(&self, action: &Action) -> Result<Option<usize>, StepError> {
        if self.is_done() {
            return Err(StepError::EpisodeEnded);
        }
        match &action.target {
            None => Ok(None),
            Some(t) => self.resolve(action.verb, t).map(Some).map_err(|(_, e)| e),
        }
    }

    fn reveal(&mut self) {
        for c in self.local_view() {
            let id = self.scene.objects[c].id.clone();
            self.agent.revealed_items.insert(id);
        }
    }

    fn apply(&mut self, verb: Verb, target: Option<usize>) {
        let id = |i: usize| self.scene.objects[i].id.clone();
        match (verb, target) {
            (Verb::NavigateTo, Some(r)) => {
                self.agent.location = Some(id(r));
                self.agent.known_receptacles.insert(id(r));
                self.reveal();
            }
            (Verb::Open, Some(c)) => {
                self.world.states[c].open = true;
                self.reveal();
            }
            (Verb::Close, Some(c)) => self.world.states[c].open = false,
            (Verb::Pickup, Some(x)) => {
                self.world.placement[x] = Placement::Held;
                self.agent.held = Some(id(x));
            }
            (Verb::PutIn, Some(r)) => {
                let h = self.held_idx().expect("checked");
                self.world.placement[h] = Placement::In(r);
                self.agent.held = None;
                self.reveal();
            }
            (Verb::Toggle, Some(x)) => {
                let st = &mut self.world.states[x];
                st.toggled_on = !st.toggled_on;
            }
            (Verb::Observe, _) => {
                let all: Vec<String> = self.scene.navigable().map(id).collect();
                self.agent.known_receptacles.extend(all);
            }
            (Verb::MoveForward, _) => self.reveal(),
            (Verb::End, _) => self.status = EpisodeStatus::Ended,
            _ => unreachable!("arity checked on construction"),
        }
    }

    fn tick(&mut self) {
        self.agent.step_count += 1;
        if self.status == EpisodeStatus::Running && self.agent.step_count >= self.step_limit {
            self.status = EpisodeStatus::StepLimit;
        }
    }

    fn outcome(&self, status: StepStatus, observation: Observation, error: Option<StepError>, resolved: Option<usize>) -> StepOutcome {
        StepOutcome {
            status,
            observation,
            state_after: self.agent.clone(),
            error,
            resolved: resolved.map(|i| self.scene.objects[i].id.clone()),
        }
    }

    pub fn step(&mut self, action: &Action) -> StepOutcome {
        if self.is_done() {
            self.agent.step_count += 1;
            let text = prompt::render_feedback(FeedbackTemplate::Unavailable, &action.render(self.scene), "end");
            let obs = self.observation(ObservationKind::Feedback, Some(text));
            return self.outcome(StepStatus::Illegal, obs, Some(StepError::EpisodeEnded), None);
        }
        let resolved = match &action.target {
            None => Ok(None),
            Some(t) => self.resolve(action.verb, t).map(Some),
        };
        match resolved {
            Ok(target) => {
                self.apply(action.verb, target);
                self.tick();
                let obs = self.frame();
                self.outcome(StepStatus::Ok, obs, None, target)
            }
            Err((idx, err)) => {
                self.tick();
                let object = match idx {
                    Some(i) => self.scene.label(i).to_string(),
                    None => action.target.clone().unwrap_or_default(),
                };
                let text = prompt::render_feedback(err.feedback(), &action.render(self.scene), &object);
                let obs = self.observation(ObservationKind::Feedback, Some(text));
                self.outcome(StepStatus::Illegal, obs, Some(err), idx)
            }
        }
    }

    /// Consume a step for `action` without any effect, as when the arm fails.
    pub fn step_faulted(&mut self, action: &Action) -> StepOutcome {
        if self.is_done() {
            return self.step(action);
        }
        let idx = action.target.as_deref().and_then(|t| self.resolve(action.verb, t).ok());
        self.tick();
        let object = idx.map(|i| self.scene.label(i).to_string()).or(action.target.clone()).unwrap_or_default();
        let text = prompt::render_manipulation_fault(&action.render(self.scene), &object);
        let obs = self.observation(ObservationKind::Feedback, Some(text));
        self.outcome(StepStatus::Faulted, obs, None, idx)
    }

    /// Execute a navigation that lands at `actual` instead of its target.
    /// Falls back to a normal step when `actual` is not a navigable receptacle
    /// or the action is not a navigation.
    pub fn step_misdirected(&mut self, action: &Action, actual: &str) -> StepOutcome {
        let idx = self.scene.index_of(actual).filter(|&i| self.scene.objects[i].attrs.navigable);
        match idx {
            Some(r) if action.verb == Verb::NavigateTo && !self.is_done() => {
                self.apply(Verb::NavigateTo, Some(r));
                self.tick();
                let obs = self.frame();
                self.outcome(StepStatus::Faulted, obs, None, Some(r))
            }
            _ => self.step(action),
        }
    }

    pub fn step_with(&mut self, action: &Action, effect: &Effect) -> StepOutcome {
        match effect {
            Effect::Normal => self.step(action),
            Effect::Faulted => self.step_faulted(action),
            Effect::Misdirected { actual } => self.step_misdirected(action, actual),
        }
    }
}

/// How the world responded to an accepted action.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "effect", rename_all = "snake_case")]
pub enum Effect {
    #[default]
    Normal,
    /// The arm failed; the step was consumed without effect.
    Faulted,
    /// A navigation that ended at `actual` instead of its target.
    Misdirected { actual: String },
}

impl Effect {
    pub fn is_normal(&self) -> bool {
        *self == Effect::Normal
    }
}

/// One replayed step: the action and how it took effect.
#[derive(Debug, Clone, Copy)]
pub struct ReplayStep<'a> {
    pub action: &'a Action,
    pub effect: &'a Effect,
}

/// Result of replaying an action list against goals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Replay {
    pub success: bool,
    pub statuses: Vec<StepStatus>,
    pub ended: bool,
    pub goals_met: usize,
    /// Which goals hold at the end.
    pub holding: Vec<bool>,
    pub status: EpisodeStatus,
}

pub fn replay_steps<'a>(scene: &Scene, goals: &[Goal], steps: impl IntoIterator<Item = ReplayStep<'a>>) -> Replay {
    replay_steps_limited(scene, goals, DEFAULT_STEP_LIMIT, steps)
}

pub fn replay_steps_limited<'a>(scene: &Scene, goals: &[Goal], step_limit: u32, steps: impl IntoIterator<Item = ReplayStep<'a>>) -> Replay {
    let (mut ep, _) = Episode::with_limit(scene, step_limit);
    let mut tracker = GoalTracker::new(goals, &ep);
    let mut statuses = Vec::new();
    for s in steps {
        if ep.is_done() {
            break;
        }
        let out = ep.step_with(s.action, s.effect);
        statuses.push(out.status);
        tracker.update(&ep);
    }
    let ended = ep.status() == EpisodeStatus::Ended;
    Replay {
        success: ended && tracker.satisfied(),
        statuses,
        ended,
        goals_met: tracker.completed(),
        holding: tracker.holding().to_vec(),
        status: ep.status(),
    }
}

pub fn replay(scene: &Scene, goals: &[Goal], actions: &[Action]) -> Replay {
    replay_steps(scene, goals, actions.iter().map(|a| ReplayStep { action: a, effect: &Effect::Normal }))
}

/// Whether executing `actions` from reset ends the episode with the task's goals
/// met in order.
pub fn final_state_check(scene: &Scene, goals: &[Goal], actions: &[Action]) -> bool {
    replay(scene, goals, actions).success
}

impl fmt::Display for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}
