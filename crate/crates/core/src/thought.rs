//! Thinking patterns, the transition model that decides how many and which
//! thoughts precede each action, and template-based thought text.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::action::{Action, Verb};
use crate::goal::{Goal, GoalTracker};
use crate::planner::ExploratoryPlan;
use crate::scene::Scene;
use crate::seed;
use crate::sim::{Effect, Episode, StepStatus};
use crate::task::TaskInstruction;
use crate::trajectory::{Provenance, Record, Trajectory};

pub const MAX_THOUGHTS_PER_ACTION: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThoughtPattern {
    SituationAnalysis,
    TaskPlanning,
    SpatialReasoning,
    SelfReflection,
    DoubleVerification,
}

impl ThoughtPattern {
    pub const ALL: [ThoughtPattern; 5] = [
        ThoughtPattern::SituationAnalysis,
        ThoughtPattern::TaskPlanning,
        ThoughtPattern::SpatialReasoning,
        ThoughtPattern::SelfReflection,
        ThoughtPattern::DoubleVerification,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ThoughtPattern::SituationAnalysis => "situation_analysis",
            ThoughtPattern::TaskPlanning => "task_planning",
            ThoughtPattern::SpatialReasoning => "spatial_reasoning",
            ThoughtPattern::SelfReflection => "self_reflection",
            ThoughtPattern::DoubleVerification => "double_verification",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thought {
    pub kind: ThoughtPattern,
    pub text: String,
    /// Action indices of earlier steps the thought talks about.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub refers_to: Vec<usize>,
    /// Ids of the scene objects the text names.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mentions: Vec<String>,
}

// ------------------------------------------------------------------ model

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ThoughtState {
    Start,
    AfterAction,
    AfterPattern(ThoughtPattern),
}

impl ThoughtState {
    pub const ALL: [ThoughtState; 7] = [
        ThoughtState::Start,
        ThoughtState::AfterAction,
        ThoughtState::AfterPattern(ThoughtPattern::SituationAnalysis),
        ThoughtState::AfterPattern(ThoughtPattern::TaskPlanning),
        ThoughtState::AfterPattern(ThoughtPattern::SpatialReasoning),
        ThoughtState::AfterPattern(ThoughtPattern::SelfReflection),
        ThoughtState::AfterPattern(ThoughtPattern::DoubleVerification),
    ];

    pub fn index(self) -> usize {
        match self {
            ThoughtState::Start => 0,
            ThoughtState::AfterAction => 1,
            ThoughtState::AfterPattern(p) => 2 + p.index(),
        }
    }

    pub fn name(self) -> String {
        match self {
            ThoughtState::Start => "start".into(),
            ThoughtState::AfterAction => "after_action".into(),
            ThoughtState::AfterPattern(p) => format!("after_{}", p.name()),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Choice {
    Emit(ThoughtPattern),
    Act,
}

impl Choice {
    pub const ALL: [Choice; 6] = [
        Choice::Emit(ThoughtPattern::SituationAnalysis),
        Choice::Emit(ThoughtPattern::TaskPlanning),
        Choice::Emit(ThoughtPattern::SpatialReasoning),
        Choice::Emit(ThoughtPattern::SelfReflection),
        Choice::Emit(ThoughtPattern::DoubleVerification),
        Choice::Act,
    ];

    pub fn index(self) -> usize {
        match self {
            Choice::Emit(p) => p.index(),
            Choice::Act => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Choice::Emit(p) => p.name(),
            Choice::Act => "act",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// Which context-dependent patterns are allowed right now.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gates {
    /// The previous action was a search that turned up nothing.
    pub reflection: bool,
    /// The previous action completed a goal or sub-goal.
    pub verification: bool,
}

impl Gates {
    pub const OPEN: Gates = Gates { reflection: true, verification: true };
}

/// Named rows and columns, used for configuration and manifests.
pub type TransitionTable = BTreeMap<String, BTreeMap<String, f64>>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("row {state} sums to {sum}")]
    RowSum { state: String, sum: f64 },
    #[error("row {state} has a negative or non-finite entry")]
    BadEntry { state: String },
    #[error("unknown state `{0}`")]
    UnknownState(String),
    #[error("unknown column `{0}`")]
    UnknownChoice(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "TransitionTable", try_from = "TransitionTable")]
pub struct TransitionModel {
    rows: [[f64; 6]; 7],
}

pub const DEFAULT_ACT_AFTER_PATTERN: f64 = 0.75;

pub fn default_transition_model() -> TransitionModel {
    TransitionModel::with_act_probability(DEFAULT_ACT_AFTER_PATTERN).expect("default is valid")
}

impl Default for TransitionModel {
    fn default() -> Self {
        default_transition_model()
    }
}

impl TransitionModel {
    /// The default matrix with a different chance of acting after a thought.
    /// Cells without a published value share the leftover mass of their row
    /// evenly; a pattern never follows itself.
    pub fn with_act_probability(act: f64) -> Result<Self, ModelError> {
        use ThoughtPattern::*;
        let mut rows = [[0.0; 6]; 7];
        rows[0][TaskPlanning.index()] = 0.55;
        rows[0][SpatialReasoning.index()] = 0.45;
        let after = &mut rows[1];
        after[SpatialReasoning.index()] = 0.42;
        after[SelfReflection.index()] = 0.33;
        after[DoubleVerification.index()] = 0.03;
        after[TaskPlanning.index()] = 0.11;
        after[SituationAnalysis.index()] = 0.11;
        for p in ThoughtPattern::ALL {
            let row = &mut rows[ThoughtState::AfterPattern(p).index()];
            row[5] = act;
            let mut fixed = act;
            if p == SpatialReasoning {
                row[DoubleVerification.index()] = 0.06;
                fixed += 0.06;
            }
            let free: Vec<usize> = ThoughtPattern::ALL
                .into_iter()
                .filter(|&q| q != p && !(p == SpatialReasoning && q == DoubleVerification))
                .map(ThoughtPattern::index)
                .collect();
            let share = (1.0 - fixed) / free.len() as f64;
            for c in free {
                row[c] = share;
            }
        }
        let m = TransitionModel { rows };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for s in ThoughtState::ALL {
            let row = self.rows[s.index()];
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(ModelError::BadEntry { state: s.name() });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(ModelError::RowSum { state: s.name(), sum });
            }
        }
        Ok(())
    }

    pub fn p(&self, state: ThoughtState, choice: Choice) -> f64 {
        self.rows[state.index()][choice.index()]
    }

    pub fn row(&self, state: ThoughtState) -> [f64; 6] {
        self.rows[state.index()]
    }

    pub fn set_row(&mut self, state: ThoughtState, row: [f64; 6]) -> Result<(), ModelError> {
        let old = self.rows[state.index()];
        self.rows[state.index()] = row;
        self.validate().inspect_err(|_| self.rows[state.index()] = old)
    }

    /// Replaces the listed rows; each override must be a complete distribution.
    pub fn apply_overrides(&mut self, table: &TransitionTable) -> Result<(), ModelError> {
        for (state, cells) in table {
            let st = ThoughtState::parse(state).ok_or_else(|| ModelError::UnknownState(state.clone()))?;
            let mut row = [0.0; 6];
            for (c, v) in cells {
                row[Choice::parse(c).ok_or_else(|| ModelError::UnknownChoice(c.clone()))?.index()] = *v;
            }
            self.set_row(st, row)?;
        }
        Ok(())
    }

    /// Sample the next choice with gated patterns (and any in `mask`) removed
    /// and the rest renormalized. Falls back to acting when nothing is left.
    pub fn choose<R: Rng>(&self, state: ThoughtState, gates: Gates, mask: &[bool; 6], rng: &mut R) -> Choice {
        let mut w = self.rows[state.index()];
        if !gates.reflection {
            w[ThoughtPattern::SelfReflection.index()] = 0.0;
        }
        if !gates.verification {
            w[ThoughtPattern::DoubleVerification.index()] = 0.0;
        }
        for (c, &m) in mask.iter().enumerate() {
            if m {
                w[c] = 0.0;
            }
        }
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            return Choice::Act;
        }
        let mut x = rng.random::<f64>() * total;
        for (c, &v) in w.iter().enumerate() {
            if v > 0.0 {
                if x < v {
                    return Choice::ALL[c];
                }
                x -= v;
            }
        }
        // rounding left a sliver: take the last positive column
        Choice::ALL[w.iter().rposition(|&v| v > 0.0).expect("total > 0")]
    }

    /// The patterns emitted before one action, capped at three.
    pub fn sample_segment<R: Rng>(&self, first: ThoughtState, gates: Gates, rng: &mut R) -> Vec<ThoughtPattern> {
        let mut out = Vec::new();
        let mut state = first;
        while out.len() < MAX_THOUGHTS_PER_ACTION {
            match self.choose(state, gates, &[false; 6], rng) {
                Choice::Act => break,
                Choice::Emit(p) => {
                    out.push(p);
                    state = ThoughtState::AfterPattern(p);
                }
            }
        }
        out
    }
}

impl From<TransitionModel> for TransitionTable {
    fn from(m: TransitionModel) -> Self {
        ThoughtState::ALL
            .into_iter()
            .map(|s| {
                let row = Choice::ALL.into_iter().map(|c| (c.name().to_string(), m.p(s, c))).collect();
                (s.name(), row)
            })
            .collect()
    }
}

impl TryFrom<TransitionTable> for TransitionModel {
    type Error = ModelError;
    fn try_from(t: TransitionTable) -> Result<Self, ModelError> {
        let mut m = TransitionModel { rows: [[0.0; 6]; 7] };
        for (state, cells) in &t {
            let st = ThoughtState::parse(state).ok_or_else(|| ModelError::UnknownState(state.clone()))?;
            for (c, v) in cells {
                m.rows[st.index()][Choice::parse(c).ok_or_else(|| ModelError::UnknownChoice(c.clone()))?.index()] = *v;
            }
        }
        m.validate()?;
        Ok(m)
    }
}

// ------------------------------------------------------------------ statistics

/// Pattern counts and transition counts estimated from trajectories.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ThoughtStats {
    pub counts: BTreeMap<ThoughtPattern, u64>,
    pub transitions: [[u64; 6]; 7],
    pub segments: u64,
}

impl ThoughtStats {
    /// Adds the thoughts preceding one action. The move out of a third thought
    /// is forced and therefore not counted.
    pub fn add_segment(&mut self, first: ThoughtState, patterns: &[ThoughtPattern]) {
        self.segments += 1;
        let mut state = first;
        for &p in patterns {
            *self.counts.entry(p).or_default() += 1;
            self.transitions[state.index()][p.index()] += 1;
            state = ThoughtState::AfterPattern(p);
        }
        if patterns.len() < MAX_THOUGHTS_PER_ACTION {
            self.transitions[state.index()][Choice::Act.index()] += 1;
        }
    }

    pub fn row_total(&self, state: ThoughtState) -> u64 {
        self.transitions[state.index()].iter().sum()
    }

    pub fn total_transitions(&self) -> u64 {
        self.transitions.iter().flatten().sum()
    }

    /// Maximum-likelihood estimate; 0 for rows never visited.
    pub fn estimate(&self, state: ThoughtState, choice: Choice) -> f64 {
        let n = self.row_total(state);
        if n == 0 {
            0.0
        } else {
            self.transitions[state.index()][choice.index()] as f64 / n as f64
        }
    }

    pub fn matrix(&self) -> TransitionTable {
        ThoughtState::ALL
            .into_iter()
            .map(|s| (s.name(), Choice::ALL.into_iter().map(|c| (c.name().to_string(), self.estimate(s, c))).collect()))
            .collect()
    }

    pub fn merge(&mut self, other: &ThoughtStats) {
        for (k, v) in &other.counts {
            *self.counts.entry(*k).or_default() += v;
        }
        for (a, b) in self.transitions.iter_mut().flatten().zip(other.transitions.iter().flatten()) {
            *a += b;
        }
        self.segments += other.segments;
    }
}

pub fn empirical_distribution(trajectories: &[Trajectory]) -> ThoughtStats {
    let mut stats = ThoughtStats::default();
    for t in trajectories {
        let mut pending = Vec::new();
        let mut first = true;
        for r in &t.records {
            if let Some(th) = r.as_thought() {
                pending.push(th.kind);
            } else if r.as_action().is_some() {
                let state = if first { ThoughtState::Start } else { ThoughtState::AfterAction };
                stats.add_segment(state, &pending);
                pending.clear();
                first = false;
            }
        }
    }
    stats
}

// ------------------------------------------------------------------ templates

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    NoLocation,
    Located,
    Holding,
    HandsEmpty,
    /// Before the first action.
    First,
    /// The current goal is a transfer.
    Transfer,
    /// The next action is End.
    Finishing,
    NextNav,
    NextOpen,
    /// The next action manipulates an object.
    NextManip,
    /// The current goal's subject has not been seen yet.
    Searching,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub when: Vec<Condition>,
}

impl Template {
    pub fn slots(&self) -> Vec<&str> {
        slot_names(&self.text)
    }
}

fn slot_names(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let Some(close) = rest[open..].find('}') else { break };
        let name = &rest[open + 1..open + close];
        if !name.is_empty() && name.chars().all(|c| c.is_ascii_lowercase() || c == '_') {
            out.push(name);
        }
        rest = &rest[open + close + 1..];
    }
    out
}

pub const SLOTS: [&str; 16] = [
    "task", "target", "location", "holding", "next", "action", "destination", "last", "tried", "remaining",
    "achieved", "status", "intended", "wrong", "object", "mistake",
];

pub const MIN_TEMPLATES_PER_PATTERN: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThoughtTemplates {
    pub patterns: BTreeMap<ThoughtPattern, Vec<Template>>,
    pub anomaly_navigation: Vec<Template>,
    pub anomaly_manipulation: Vec<Template>,
    pub correction: Vec<Template>,
}

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("template file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("template file: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0} has {1} templates, at least {MIN_TEMPLATES_PER_PATTERN} are needed")]
    TooFew(String, usize),
    #[error("unknown slot `{{{0}}}`")]
    UnknownSlot(String),
}

const BUNDLED_TEMPLATES: &str = include_str!("../data/thought_templates.json");

impl ThoughtTemplates {
    pub fn bundled() -> &'static ThoughtTemplates {
        static CELL: OnceLock<ThoughtTemplates> = OnceLock::new();
        CELL.get_or_init(|| ThoughtTemplates::from_json(BUNDLED_TEMPLATES).expect("bundled templates are valid"))
    }

    pub fn from_json(text: &str) -> Result<Self, TemplateError> {
        let t: ThoughtTemplates = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, TemplateError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        let mut families: Vec<(String, &Vec<Template>)> = Vec::new();
        for p in ThoughtPattern::ALL {
            match self.patterns.get(&p) {
                Some(v) => families.push((p.name().into(), v)),
                None => return Err(TemplateError::TooFew(p.name().into(), 0)),
            }
        }
        families.push(("anomaly_navigation".into(), &self.anomaly_navigation));
        families.push(("anomaly_manipulation".into(), &self.anomaly_manipulation));
        families.push(("correction".into(), &self.correction));
        for (name, list) in families {
            if list.len() < MIN_TEMPLATES_PER_PATTERN {
                return Err(TemplateError::TooFew(name, list.len()));
            }
            for t in list {
                if let Some(s) = t.slots().into_iter().find(|s| !SLOTS.contains(s)) {
                    return Err(TemplateError::UnknownSlot(s.to_string()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
struct Slot {
    text: String,
    ids: Vec<String>,
    steps: Vec<usize>,
}

/// Slot values and facts about the moment a thought is emitted.
#[derive(Debug, Clone, Default)]
pub struct ThoughtContext {
    slots: BTreeMap<&'static str, Slot>,
    conditions: BTreeSet<Condition>,
}

impl ThoughtContext {
    pub fn set(&mut self, name: &'static str, text: impl Into<String>, ids: Vec<String>) -> &mut Self {
        self.slots.insert(name, Slot { text: text.into(), ids, steps: Vec::new() });
        self
    }

    pub fn set_with_steps(&mut self, name: &'static str, text: impl Into<String>, ids: Vec<String>, steps: Vec<usize>) {
        self.slots.insert(name, Slot { text: text.into(), ids, steps });
    }

    pub fn flag(&mut self, c: Condition) -> &mut Self {
        self.conditions.insert(c);
        self
    }

    pub fn has(&self, c: Condition) -> bool {
        self.conditions.contains(&c)
    }

    pub fn eligible(&self, t: &Template) -> bool {
        t.when.iter().all(|c| self.conditions.contains(c)) && t.slots().iter().all(|s| self.slots.contains_key(s))
    }

    /// Fill `t`; returns the text, the mentioned ids and the referenced steps.
    pub fn render(&self, t: &Template) -> (String, Vec<String>, Vec<usize>) {
        let mut text = t.text.clone();
        let mut ids = Vec::new();
        let mut steps = Vec::new();
        for name in t.slots() {
            let slot = &self.slots[name];
            text = text.replace(&format!("{{{name}}}"), &slot.text);
            for id in &slot.ids {
                if !ids.contains(id) {
                    ids.push(id.clone());
                }
            }
            steps.extend(slot.steps.iter().copied());
        }
        steps.sort_unstable();
        steps.dedup();
        (capitalize(&text), ids, steps)
    }

    /// A thought from a random eligible template of `list`, if any applies.
    pub fn pick<R: Rng>(&self, kind: ThoughtPattern, list: &[Template], rng: &mut R) -> Option<Thought> {
        let eligible: Vec<&Template> = list.iter().filter(|t| self.eligible(t)).collect();
        let t = eligible.choose(rng)?;
        let (text, mentions, refers_to) = self.render(t);
        Some(Thought { kind, text, refers_to, mentions })
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// "A", "A and B", "A, B and C".
pub fn join_names(names: &[String]) -> String {
    match names {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {}", init.join(", "), last),
    }
}

/// Optional rewriter for thought text, e.g. an external language model.
/// Returning `None` keeps the template text.
pub trait ThoughtHook: Sync {
    fn rewrite(&self, thought: &Thought) -> Option<String>;
}

// ------------------------------------------------------------------ annotation

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AnnotateError {
    #[error("plan action {index} ({action}) did not execute: {reason}")]
    PlanExecutionFailed { index: usize, action: String, reason: String },
}

pub struct ThoughtEngine<'a> {
    pub model: TransitionModel,
    pub templates: &'a ThoughtTemplates,
    pub hook: Option<&'a dyn ThoughtHook>,
}

impl Default for ThoughtEngine<'static> {
    fn default() -> Self {
        ThoughtEngine { model: default_transition_model(), templates: ThoughtTemplates::bundled(), hook: None }
    }
}

/// What the annotator remembers while walking a plan.
#[derive(Debug, Clone, Default)]
pub struct SearchMemory {
    visited: BTreeSet<String>,
    /// Fruitless search steps since the last useful one: (action index, receptacle id).
    tried: Vec<(usize, String)>,
    last_failed: bool,
    /// Description, ids and step of a goal or sub-goal the last action completed.
    achieved: Option<(String, Vec<String>, usize)>,
    next_index: usize,
}

impl SearchMemory {
    /// Fresh memory for a plan that continues after `index` earlier actions.
    pub fn starting_at(index: usize) -> Self {
        SearchMemory { next_index: index, ..Default::default() }
    }

    pub fn next_index(&self) -> usize {
        self.next_index
    }
}

fn goal_description(scene: &Scene, goal: &Goal) -> (String, Vec<String>) {
    let label = |id: &str| scene.label_of(id).unwrap_or(id).to_string();
    match goal {
        Goal::Find { target } => (format!("the {} has been found", label(target)), vec![target.clone()]),
        Goal::Grasp { target } => (format!("I am holding the {}", label(target)), vec![target.clone()]),
        Goal::Toggle { target } => (format!("the {} is switched on", label(target)), vec![target.clone()]),
        Goal::Transfer { item, destination, .. } => {
            let inside = scene.object(destination).is_some_and(|o| o.attrs.openable);
            let prep = if inside { "in" } else { "on" };
            (format!("the {} is {prep} the {}", label(item), label(destination)), vec![item.clone(), destination.clone()])
        }
    }
}

fn status_text(done: usize, total: usize) -> String {
    match done {
        0 => "nothing of the task is done yet".into(),
        d if d >= total => "all of the task is done".into(),
        d => format!("{d} of {total} parts of the task are done"),
    }
}

/// Context for the thoughts that precede `next`.
pub fn context_for(
    ep: &Episode<'_>,
    tracker: &GoalTracker,
    task: &TaskInstruction,
    next: &Action,
    memory: &SearchMemory,
) -> ThoughtContext {
    let scene = ep.scene();
    let mut ctx = ThoughtContext::default();
    let named = |i: usize| (scene.label(i).to_string(), vec![scene.objects[i].id.clone()]);
    let bound: Vec<String> = task.bindings.values().cloned().collect();
    ctx.set("task", task.text.clone(), bound);
    if memory.next_index == 0 {
        ctx.flag(Condition::First);
    }
    match ep.location_idx() {
        Some(l) => {
            let (t, ids) = named(l);
            ctx.set("location", t, ids).flag(Condition::Located);
        }
        None => {
            ctx.flag(Condition::NoLocation);
        }
    }
    match ep.held_idx() {
        Some(h) => {
            let (t, ids) = named(h);
            ctx.set("holding", t, ids).flag(Condition::Holding);
        }
        None => {
            ctx.flag(Condition::HandsEmpty);
        }
    }
    let goals = &task.goal;
    let held = tracker.holding();
    let focus = (0..goals.len()).find(|&k| !held[k]).or(goals.len().checked_sub(1));
    if let Some(k) = focus {
        let g = &goals[k];
        let subject = g.subject();
        if let Some(i) = scene.index_of(subject) {
            let (t, ids) = named(i);
            ctx.set("target", t, ids);
            let seen = ep.agent().revealed_items.contains(subject) || ep.agent().held.as_deref() == Some(subject);
            if !seen {
                ctx.flag(Condition::Searching);
            }
        }
        if let Goal::Transfer { destination, .. } = g {
            if let Some(d) = scene.index_of(destination) {
                let (t, ids) = named(d);
                ctx.set("destination", t, ids).flag(Condition::Transfer);
            }
        }
    }
    ctx.set("status", status_text(tracker.completed(), goals.len()), vec![]);

    match next.verb {
        Verb::End => {
            ctx.flag(Condition::Finishing);
        }
        v => {
            let target = ep.check(next).ok().flatten();
            let mut ids = Vec::new();
            if let Some(i) = target {
                let (t, i_ids) = named(i);
                ctx.set("next", t, i_ids.clone());
                ids = i_ids;
            }
            ctx.set("action", next.render(scene), ids);
            match v {
                Verb::NavigateTo => ctx.flag(Condition::NextNav),
                Verb::Open => ctx.flag(Condition::NextOpen).flag(Condition::NextManip),
                _ if v.is_manipulation() => ctx.flag(Condition::NextManip),
                _ => &mut ctx,
            };
        }
    }

    if memory.last_failed {
        if let Some((step, id)) = memory.tried.last() {
            let label = scene.label_of(id).unwrap_or(id).to_string();
            ctx.set_with_steps("last", label, vec![id.clone()], vec![*step]);
        }
        let names: Vec<String> = memory.tried.iter().map(|(_, id)| scene.label_of(id).unwrap_or(id).to_string()).collect();
        let ids = memory.tried.iter().map(|(_, id)| id.clone()).collect();
        let steps = memory.tried.iter().map(|(s, _)| *s).collect();
        ctx.set_with_steps("tried", join_names(&names), ids, steps);
        let here = ep.agent().location.clone();
        let remaining: Vec<&String> = ep
            .agent()
            .known_receptacles
            .iter()
            .filter(|id| !memory.visited.contains(*id) && Some(*id) != here.as_ref())
            .filter(|id| scene.object(id).is_some_and(|o| o.attrs.navigable))
            .take(3)
            .collect();
        if !remaining.is_empty() {
            let names: Vec<String> = remaining.iter().map(|id| scene.label_of(id).unwrap_or(id).to_string()).collect();
            ctx.set("remaining", join_names(&names), remaining.into_iter().cloned().collect());
        }
    }
    if let Some((text, ids, step)) = &memory.achieved {
        ctx.set_with_steps("achieved", text.clone(), ids.clone(), vec![*step]);
    }
    ctx
}

impl ThoughtEngine<'_> {
    pub fn new(model: TransitionModel) -> ThoughtEngine<'static> {
        ThoughtEngine { model, templates: ThoughtTemplates::bundled(), hook: None }
    }

    fn finish(&self, mut t: Thought) -> Thought {
        if let Some(h) = self.hook {
            if let Some(text) = h.rewrite(&t) {
                t.text = text;
            }
        }
        t
    }

    /// Thoughts for one step, sampled from the model and gated by context.
    pub fn thoughts_for<R: Rng>(&self, ctx: &ThoughtContext, first: bool, gates: Gates, rng: &mut R) -> Vec<Thought> {
        let mut out = Vec::new();
        let mut state = if first { ThoughtState::Start } else { ThoughtState::AfterAction };
        while out.len() < MAX_THOUGHTS_PER_ACTION {
            let mut mask = [false; 6];
            let thought = loop {
                match self.model.choose(state, gates, &mask, rng) {
                    Choice::Act => break None,
                    Choice::Emit(p) => match ctx.pick(p, &self.templates.patterns[&p], rng) {
                        Some(t) => break Some(t),
                        None => mask[p.index()] = true,
                    },
                }
            };
            let Some(t) = thought else { break };
            state = ThoughtState::AfterPattern(t.kind);
            out.push(self.finish(t));
        }
        out
    }

    /// Execute `actions` from the episode's current state, emitting thoughts,
    /// actions and observations into `out`. `is_decoy(i)` marks search detours
    /// by global action index.
    #[allow(clippy::too_many_arguments)]
    pub fn continue_from<R: Rng>(
        &self,
        ep: &mut Episode<'_>,
        tracker: &mut GoalTracker,
        task: &TaskInstruction,
        actions: &[Action],
        is_decoy: &dyn Fn(usize) -> bool,
        memory: &mut SearchMemory,
        provenance: Provenance,
        rng: &mut R,
        out: &mut Trajectory,
    ) -> Result<(), AnnotateError> {
        self.walk(ep, tracker, task, actions, is_decoy, memory, provenance, rng, out, true)
    }

    /// Like [`Self::continue_from`], but illegal steps are recorded with their
    /// feedback instead of aborting. Stops once the episode is over.
    #[allow(clippy::too_many_arguments)]
    pub fn rollout<R: Rng>(
        &self,
        ep: &mut Episode<'_>,
        tracker: &mut GoalTracker,
        task: &TaskInstruction,
        actions: &[Action],
        memory: &mut SearchMemory,
        provenance: Provenance,
        rng: &mut R,
        out: &mut Trajectory,
    ) {
        let _ = self.walk(ep, tracker, task, actions, &|_| false, memory, provenance, rng, out, false);
    }

    #[allow(clippy::too_many_arguments)]
    fn walk<R: Rng>(
        &self,
        ep: &mut Episode<'_>,
        tracker: &mut GoalTracker,
        task: &TaskInstruction,
        actions: &[Action],
        is_decoy: &dyn Fn(usize) -> bool,
        memory: &mut SearchMemory,
        provenance: Provenance,
        rng: &mut R,
        out: &mut Trajectory,
        strict: bool,
    ) -> Result<(), AnnotateError> {
        let scene = ep.scene();
        for action in actions {
            if !strict && ep.is_done() {
                break;
            }
            let g = memory.next_index;
            let ctx = context_for(ep, tracker, task, action, memory);
            let gates = Gates { reflection: memory.last_failed, verification: memory.achieved.is_some() };
            for t in self.thoughts_for(&ctx, g == 0, gates, rng) {
                out.push(Record::thought(t, provenance));
            }
            let outcome = ep.step(action);
            if outcome.status != StepStatus::Ok && !strict {
                out.push(Record::action(action.clone(), Effect::Normal, provenance));
                out.push(Record::observation(outcome.observation, provenance));
                memory.last_failed = false;
                memory.achieved = None;
                memory.next_index += 1;
                continue;
            }
            if outcome.status != StepStatus::Ok {
                return Err(AnnotateError::PlanExecutionFailed {
                    index: g,
                    action: action.render(scene),
                    reason: outcome.error.map_or_else(|| format!("{:?}", outcome.status), |e| e.to_string()),
                });
            }
            out.push(Record::action(action.clone(), Effect::Normal, provenance));
            let fresh = tracker.update(ep);
            memory.achieved = fresh.last().map(|&k| {
                let (text, ids) = goal_description(scene, &task.goal[k]);
                (text, ids, g)
            });
            if memory.achieved.is_none() && action.verb == Verb::Pickup {
                let item = outcome.resolved.clone().unwrap_or_default();
                let carries = task.goal.iter().any(|goal| matches!(goal, Goal::Transfer { item: i, .. } if *i == item));
                if carries {
                    let label = scene.label_of(&item).unwrap_or(&item).to_string();
                    memory.achieved = Some((format!("I have the {label} in hand"), vec![item], g));
                }
            }
            if action.verb == Verb::NavigateTo {
                if let Some(loc) = &ep.agent().location {
                    memory.visited.insert(loc.clone());
                    if is_decoy(g) {
                        memory.tried.push((g, loc.clone()));
                    } else {
                        memory.tried.clear();
                    }
                }
            }
            memory.last_failed = action.verb == Verb::NavigateTo && is_decoy(g);
            memory.next_index += 1;
            if action.verb != Verb::End {
                out.push(Record::observation(outcome.observation, provenance));
            }
        }
        Ok(())
    }

    pub fn annotate(
        &self,
        task: &TaskInstruction,
        plan: &ExploratoryPlan,
        scene: &Scene,
        seed: u64,
    ) -> Result<Trajectory, AnnotateError> {
        let mut rng = seed::rng(seed::derive(seed, "thoughts"));
        let (mut ep, first) = Episode::reset(scene);
        let mut tracker = GoalTracker::new(&task.goal, &ep);
        let mut traj = Trajectory::new(task.id.clone(), scene.id.clone(), seed);
        traj.push(Record::observation(first, Provenance::Synthesized));
        let mut memory = SearchMemory::default();
        let decoy = |i: usize| plan.is_inserted(i);
        self.continue_from(
            &mut ep,
            &mut tracker,
            task,
            &plan.full,
            &decoy,
            &mut memory,
            Provenance::Synthesized,
            &mut rng,
            &mut traj,
        )?;
        Ok(traj)
    }
}

pub fn annotate(
    task: &TaskInstruction,
    plan: &ExploratoryPlan,
    scene: &Scene,
    model: &TransitionModel,
    seed: u64,
) -> Result<Trajectory, AnnotateError> {
    ThoughtEngine::new(model.clone()).annotate(task, plan, scene, seed)
}
