//! Multi-turn evaluation: prompt assembly, decision parsing, the episode loop
//! and the baseline agents.

mod agents;
mod parse;
pub mod protocol;

use serde::{Deserialize, Serialize};

pub use agents::{AgentError, AgentPort, FnAgent, NoisyOracleAgent, OracleAgent, RandomAgent, RandomPolicy, ReplayAgent, Role, Turn};
pub use parse::{decision_text, parse_decision, tag_bodies, DecisionTag, ParseError, CLOSE_TAG, OPEN_TAG};

use crate::action::{Action, Verb};
use crate::catalog::Catalog;
use crate::planner::derive_key_actions;
use crate::prompt;
use crate::reward::{episode_metrics, EpisodeMetrics, EpisodeResult, Judgment};
use crate::scene::Scene;
use crate::sim::{Episode, EpisodeStatus, Observation, ObservationKind, DEFAULT_STEP_LIMIT};
use crate::task::TaskInstruction;
use crate::trajectory::{Payload, Provenance, Record, Trajectory};

/// First user turn: the opening frame followed by the initialization prompt.
pub fn initial_user_text(task: &TaskInstruction, first: &Observation) -> String {
    prompt::render_initialization(&first.text(), &task.text)
}

/// User turn answering an executed action: the new frame plus the interaction
/// prompt, or the feedback text alone.
pub fn followup_user_text(observation: &Observation, action_phrase: &str) -> String {
    match observation.kind {
        ObservationKind::Frame => format!("{}{}", observation.text(), prompt::render_interaction(action_phrase)),
        ObservationKind::Feedback => observation.text(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    pub step_limit: u32,
    /// Consecutive replies without a usable decision before the episode fails.
    pub max_unparsed: u32,
    /// Hard cap on assistant turns, parsed or not.
    pub max_turns: u32,
}

impl Default for Limits {
    fn default() -> Self {
        Limits { step_limit: DEFAULT_STEP_LIMIT, max_unparsed: 3, max_turns: 2 * DEFAULT_STEP_LIMIT }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "termination", rename_all = "snake_case")]
pub enum Termination {
    Ended,
    StepLimit,
    TurnLimit,
    /// Too many consecutive replies without a usable decision.
    ProtocolViolation,
    AgentTimeout,
    Disconnected,
    /// The agent's backend was unreachable; excluded from metrics.
    InfraFailure { message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HarnessError {
    #[error("agent authentication failed: {0}")]
    Auth(String),
    #[error("task {task_id}: no key action sequence: {message}")]
    NoKey { task_id: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub result: EpisodeResult,
    pub judgment: Judgment,
    pub metrics: EpisodeMetrics,
    pub termination: Termination,
    pub trajectory: Trajectory,
    pub dialogue: Vec<Turn>,
}

/// Runs one episode: prompt, reply, parse, step, until End or a limit.
pub fn run_episode(
    scene: &Scene,
    task: &TaskInstruction,
    agent: &mut dyn AgentPort,
    limits: Limits,
    seed: u64,
) -> Result<EpisodeOutcome, HarnessError> {
    let key = derive_key_actions(task, scene)
        .map_err(|e| HarnessError::NoKey { task_id: task.id.clone(), message: e.to_string() })?
        .actions;
    let catalog = Catalog::shared();
    let (mut ep, first) = Episode::with_limit(scene, limits.step_limit);
    let mut traj = Trajectory::new(task.id.clone(), scene.id.clone(), seed);
    let mut dialogue = vec![Turn::new(Role::System, prompt::SYSTEM), Turn::new(Role::User, initial_user_text(task, &first))];
    traj.push(Record::observation(first, Provenance::Sampled));
    let mut actions = Vec::new();
    let mut unparsed = 0;
    let mut infra = false;
    let mut turns = 0;

    let termination = loop {
        if turns >= limits.max_turns {
            break Termination::TurnLimit;
        }
        turns += 1;
        let reply = match agent.reply(&dialogue) {
            Ok(r) => r,
            Err(AgentError::Auth(m)) => return Err(HarnessError::Auth(m)),
            Err(AgentError::Timeout) => break Termination::AgentTimeout,
            Err(AgentError::Disconnected) => break Termination::Disconnected,
            Err(AgentError::Unavailable(message)) => {
                infra = true;
                break Termination::InfraFailure { message };
            }
        };
        dialogue.push(Turn::new(Role::Assistant, reply.clone()));
        let action = match parse_decision(&reply, scene, catalog) {
            Ok(d) => d.parsed,
            Err(ParseError::UnknownTarget { verb, phrase }) => Action::with(verb, phrase),
            Err(_) => {
                unparsed += 1;
                if unparsed >= limits.max_unparsed {
                    break Termination::ProtocolViolation;
                }
                traj.push(Record::observation(ep.feedback(prompt::FORMAT_REMINDER), Provenance::Sampled));
                dialogue.push(Turn::new(Role::User, prompt::FORMAT_REMINDER));
                continue;
            }
        };
        unparsed = 0;
        let outcome = ep.step(&action);
        let phrase = action.render(scene);
        traj.push(Record::new(Payload::Action { action: action.clone(), effect: Default::default(), raw: Some(reply) }, Provenance::Sampled));
        actions.push(action.clone());
        if action.verb == Verb::End && ep.status() == EpisodeStatus::Ended {
            break Termination::Ended;
        }
        dialogue.push(Turn::new(Role::User, followup_user_text(&outcome.observation, &phrase)));
        traj.push(Record::observation(outcome.observation, Provenance::Sampled));
        match ep.status() {
            EpisodeStatus::StepLimit => break Termination::StepLimit,
            EpisodeStatus::Ended => break Termination::Ended,
            EpisodeStatus::Running => {}
        }
    };

    let (mut result, judgment) = EpisodeResult::evaluate_limited(task, &key, scene, &actions, &[], limits.step_limit);
    result.infra_failed = infra;
    let metrics = episode_metrics(task, &key, &result, scene);
    Ok(EpisodeOutcome { result, judgment, metrics, termination, trajectory: traj, dialogue })
}

/// Which built-in agent to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "agent", rename_all = "snake_case")]
pub enum AgentKind {
    Oracle,
    Random,
    Noisy { p: f64 },
}

impl AgentKind {
    /// `oracle`, `random` or `noisy:P`.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "oracle" => Some(AgentKind::Oracle),
            "random" => Some(AgentKind::Random),
            _ => {
                let p: f64 = s.strip_prefix("noisy:")?.parse().ok()?;
                (0.0..=1.0).contains(&p).then_some(AgentKind::Noisy { p })
            }
        }
    }

    pub fn build<'s>(&self, scene: &'s Scene, task: &TaskInstruction, seed: u64) -> Box<dyn AgentPort + 's> {
        match self {
            AgentKind::Oracle => {
                let key = derive_key_actions(task, scene).map(|k| k.actions).unwrap_or_default();
                Box::new(OracleAgent::new(scene, key))
            }
            AgentKind::Random => Box::new(RandomAgent::new(scene, RandomPolicy::default(), seed)),
            AgentKind::Noisy { p } => Box::new(NoisyOracleAgent::new(scene, &task.goal, *p, seed)),
        }
    }
}

/// Seed of the `index`-th evaluation episode of a task.
pub fn episode_seed(task_id: &str, index: u64) -> u64 {
    crate::seed::derive_indexed(crate::seed::derive(index, task_id), "episode", index)
}

/// Every task under every seed with a built-in agent, in parallel. Rows come
/// back in (task, seed) order.
pub fn evaluate_suite(
    tasks: &[TaskInstruction],
    scenes: &std::collections::BTreeMap<String, Scene>,
    agent: &AgentKind,
    seeds: u64,
    limits: Limits,
) -> Result<Vec<EpisodeOutcome>, HarnessError> {
    let jobs: Vec<(usize, u64)> = (0..tasks.len()).flat_map(|t| (0..seeds).map(move |s| (t, s))).collect();
    let outcomes = crate::par::map(&jobs, |&(t, s)| {
        let task = &tasks[t];
        let scene = scenes.get(&task.scene_id).ok_or_else(|| HarnessError::NoKey {
            task_id: task.id.clone(),
            message: format!("scene `{}` not loaded", task.scene_id),
        })?;
        let seed = episode_seed(&task.id, s);
        let mut a = agent.build(scene, task, seed);
        run_episode(scene, task, &mut a, limits, seed)
    });
    outcomes.into_iter().collect()
}
