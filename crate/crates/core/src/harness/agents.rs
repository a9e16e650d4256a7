//! Scripted and recorded agents.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::action::{Action, Verb};
use crate::goal::Goal;
use crate::planner::plan_from;
use crate::scene::Scene;
use crate::seed;
use crate::sim::Episode;

use super::parse::decision_text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn new(role: Role, text: impl Into<String>) -> Self {
        Turn { role, text: text.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AgentError {
    #[error("agent did not answer in time")]
    Timeout,
    /// The backend could not be reached; the episode counts as an infrastructure failure.
    #[error("endpoint unavailable: {0}")]
    Unavailable(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("agent disconnected")]
    Disconnected,
}

/// Anything that answers the dialogue so far with assistant text.
pub trait AgentPort {
    fn reply(&mut self, dialogue: &[Turn]) -> Result<String, AgentError>;
}

impl<A: AgentPort + ?Sized> AgentPort for Box<A> {
    fn reply(&mut self, dialogue: &[Turn]) -> Result<String, AgentError> {
        (**self).reply(dialogue)
    }
}

fn say(scene: &Scene, a: &Action) -> String {
    decision_text(&a.render(scene))
}

/// Replays a fixed action list, then keeps answering End.
pub struct OracleAgent<'s> {
    scene: &'s Scene,
    actions: Vec<Action>,
    next: usize,
}

impl<'s> OracleAgent<'s> {
    pub fn new(scene: &'s Scene, actions: Vec<Action>) -> Self {
        OracleAgent { scene, actions, next: 0 }
    }
}

impl AgentPort for OracleAgent<'_> {
    fn reply(&mut self, _: &[Turn]) -> Result<String, AgentError> {
        let a = self.actions.get(self.next).cloned().unwrap_or_else(Action::end);
        self.next += 1;
        Ok(say(self.scene, &a))
    }
}

/// Draws actions blindly: End with probability `p_end`, otherwise a
/// navigation to a uniformly chosen receptacle half the time, else any verb on
/// any object.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    pub p_end: f64,
}

impl Default for RandomPolicy {
    fn default() -> Self {
        RandomPolicy { p_end: 0.1 }
    }
}

impl RandomPolicy {
    pub fn draw(&self, scene: &Scene, rng: &mut ChaCha8Rng) -> Action {
        if rng.random::<f64>() < self.p_end {
            return Action::end();
        }
        let receptacles: Vec<usize> = scene.navigable().collect();
        if rng.random::<f64>() < 0.5 {
            if let Some(&r) = receptacles.choose(rng) {
                return Action::navigate(scene.objects[r].id.clone());
            }
        }
        const VERBS: [Verb; 7] = [Verb::Open, Verb::Close, Verb::Pickup, Verb::PutIn, Verb::Toggle, Verb::Observe, Verb::MoveForward];
        let verb = *VERBS.choose(rng).expect("non-empty");
        if !verb.takes_target() {
            return Action::bare(verb);
        }
        let i = rng.random_range(0..scene.len());
        Action::with(verb, scene.objects[i].id.clone())
    }
}

pub struct RandomAgent<'s> {
    scene: &'s Scene,
    policy: RandomPolicy,
    rng: ChaCha8Rng,
}

impl<'s> RandomAgent<'s> {
    pub fn new(scene: &'s Scene, policy: RandomPolicy, seed: u64) -> Self {
        RandomAgent { scene, policy, rng: seed::rng(seed::derive(seed, "random-agent")) }
    }
}

impl AgentPort for RandomAgent<'_> {
    fn reply(&mut self, _: &[Turn]) -> Result<String, AgentError> {
        let a = self.policy.draw(self.scene, &mut self.rng);
        Ok(say(self.scene, &a))
    }
}

/// The planner's next action from a mirrored episode, replaced with
/// probability `p` by a random one.
pub struct NoisyOracleAgent<'s> {
    mirror: Episode<'s>,
    goals: Vec<Goal>,
    p: f64,
    policy: RandomPolicy,
    rng: ChaCha8Rng,
}

impl<'s> NoisyOracleAgent<'s> {
    pub fn new(scene: &'s Scene, goals: &[Goal], p: f64, seed: u64) -> Self {
        let (mirror, _) = Episode::reset(scene);
        NoisyOracleAgent {
            mirror,
            goals: goals.to_vec(),
            p,
            policy: RandomPolicy::default(),
            rng: seed::rng(seed::derive(seed, "noisy-agent")),
        }
    }
}

impl AgentPort for NoisyOracleAgent<'_> {
    fn reply(&mut self, _: &[Turn]) -> Result<String, AgentError> {
        let scene = self.mirror.scene();
        let a = if self.rng.random::<f64>() < self.p {
            self.policy.draw(scene, &mut self.rng)
        } else {
            let mut probe = self.mirror.clone();
            plan_from(&mut probe, &self.goals).ok().and_then(|p| p.into_iter().next()).unwrap_or_else(Action::end)
        };
        // the harness executes exactly this action, so the mirror stays in sync
        self.mirror.step(&a);
        Ok(say(scene, &a))
    }
}

/// Answers with recorded assistant texts in order.
pub struct ReplayAgent {
    texts: std::vec::IntoIter<String>,
}

impl ReplayAgent {
    pub fn new(texts: Vec<String>) -> Self {
        ReplayAgent { texts: texts.into_iter() }
    }

    /// Assistant turns of a recorded dialogue.
    pub fn from_dialogue(dialogue: &[Turn]) -> Self {
        Self::new(dialogue.iter().filter(|t| t.role == Role::Assistant).map(|t| t.text.clone()).collect())
    }
}

impl AgentPort for ReplayAgent {
    fn reply(&mut self, _: &[Turn]) -> Result<String, AgentError> {
        self.texts.next().ok_or(AgentError::Disconnected)
    }
}

/// Wraps a closure, handy for tests and adapters.
pub struct FnAgent<F>(pub F);

impl<F: FnMut(&[Turn]) -> Result<String, AgentError>> AgentPort for FnAgent<F> {
    fn reply(&mut self, dialogue: &[Turn]) -> Result<String, AgentError> {
        (self.0)(dialogue)
    }
}
