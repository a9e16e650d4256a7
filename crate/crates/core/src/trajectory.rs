//! Interleaved observation / thought / action records with loss masks and
//! provenance, and the grammar every trajectory must follow.

use serde::{Deserialize, Serialize};

use crate::action::{Action, Verb};
use crate::sim::{Effect, Observation, ObservationKind, ReplayStep};
use crate::thought::Thought;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Produced by the planner and thought engine.
    Synthesized,
    /// Produced by an agent during an interactive episode.
    Sampled,
    InjectedAnomaly,
    ReflectiveThought,
    CorrectedSuffix,
    ErroneousPrefix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Observation,
    Thought,
    Action,
    Feedback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Observation {
        observation: Observation,
    },
    Feedback {
        observation: Observation,
    },
    Thought {
        thought: Thought,
    },
    Action {
        action: Action,
        #[serde(default, skip_serializing_if = "Effect::is_normal")]
        effect: Effect,
        /// Verbatim assistant reply the action was parsed from, for sampled records.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        raw: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    #[serde(flatten)]
    pub payload: Payload,
    pub loss_mask: bool,
    pub provenance: Provenance,
}

impl Record {
    /// Builds a record with the mask its kind and provenance imply: thoughts and
    /// actions train unless they belong to an erroneous prefix.
    pub fn new(payload: Payload, provenance: Provenance) -> Self {
        let trains = matches!(payload, Payload::Thought { .. } | Payload::Action { .. });
        let loss_mask = trains && provenance != Provenance::ErroneousPrefix;
        Record { payload, loss_mask, provenance }
    }

    pub fn observation(observation: Observation, provenance: Provenance) -> Self {
        let payload = match observation.kind {
            ObservationKind::Frame => Payload::Observation { observation },
            ObservationKind::Feedback => Payload::Feedback { observation },
        };
        Record::new(payload, provenance)
    }

    pub fn thought(thought: Thought, provenance: Provenance) -> Self {
        Record::new(Payload::Thought { thought }, provenance)
    }

    pub fn action(action: Action, effect: Effect, provenance: Provenance) -> Self {
        Record::new(Payload::Action { action, effect, raw: None }, provenance)
    }

    pub fn kind(&self) -> RecordKind {
        match self.payload {
            Payload::Observation { .. } => RecordKind::Observation,
            Payload::Feedback { .. } => RecordKind::Feedback,
            Payload::Thought { .. } => RecordKind::Thought,
            Payload::Action { .. } => RecordKind::Action,
        }
    }

    pub fn as_action(&self) -> Option<(&Action, &Effect)> {
        match &self.payload {
            Payload::Action { action, effect, .. } => Some((action, effect)),
            _ => None,
        }
    }

    pub fn as_thought(&self) -> Option<&Thought> {
        match &self.payload {
            Payload::Thought { thought } => Some(thought),
            _ => None,
        }
    }

    pub fn as_observation(&self) -> Option<&Observation> {
        match &self.payload {
            Payload::Observation { observation } | Payload::Feedback { observation } => Some(observation),
            _ => None,
        }
    }

    /// Mask cleared, provenance replaced, payload kept verbatim.
    pub fn into_prefix(mut self) -> Self {
        self.provenance = Provenance::ErroneousPrefix;
        self.loss_mask = false;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GrammarError {
    #[error("trajectory is empty")]
    Empty,
    #[error("record {0}: a thought or action must follow an observation")]
    MissingObservation(usize),
    #[error("record {0}: expected a thought or an action before the next observation")]
    DanglingThought(usize),
    #[error("trajectory does not finish with an End action")]
    NoEnd,
    #[error("record {0} follows the End action")]
    AfterEnd(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub scene_id: String,
    pub seed: u64,
    pub records: Vec<Record>,
}

impl Trajectory {
    pub fn new(task_id: impl Into<String>, scene_id: impl Into<String>, seed: u64) -> Self {
        Trajectory { task_id: task_id.into(), scene_id: scene_id.into(), seed, records: Vec::new() }
    }

    pub fn push(&mut self, r: Record) {
        self.records.push(r);
    }

    pub fn actions(&self) -> Vec<Action> {
        self.records.iter().filter_map(|r| r.as_action().map(|(a, _)| a.clone())).collect()
    }

    pub fn effects(&self) -> Vec<Effect> {
        self.records.iter().filter_map(|r| r.as_action().map(|(_, e)| e.clone())).collect()
    }

    pub fn replay_steps(&self) -> impl Iterator<Item = ReplayStep<'_>> {
        self.records.iter().filter_map(|r| r.as_action().map(|(action, effect)| ReplayStep { action, effect }))
    }

    pub fn thoughts(&self) -> impl Iterator<Item = &Thought> {
        self.records.iter().filter_map(Record::as_thought)
    }

    pub fn action_count(&self) -> usize {
        self.records.iter().filter(|r| r.kind() == RecordKind::Action).count()
    }

    /// Record index of each action, in order.
    pub fn action_positions(&self) -> Vec<usize> {
        self.records.iter().enumerate().filter(|(_, r)| r.kind() == RecordKind::Action).map(|(i, _)| i).collect()
    }

    /// Checks `((Observation | Feedback)+ Thought* Action)+` ending with End.
    pub fn validate(&self) -> Result<(), GrammarError> {
        if self.records.is_empty() {
            return Err(GrammarError::Empty);
        }
        #[derive(PartialEq)]
        enum S {
            NeedObs,
            Observed,
            Thinking,
        }
        let mut s = S::NeedObs;
        let mut ended = false;
        for (i, r) in self.records.iter().enumerate() {
            if ended {
                return Err(GrammarError::AfterEnd(i));
            }
            match r.kind() {
                RecordKind::Observation | RecordKind::Feedback => {
                    if s == S::Thinking {
                        return Err(GrammarError::DanglingThought(i));
                    }
                    s = S::Observed;
                }
                RecordKind::Thought => {
                    if s == S::NeedObs {
                        return Err(GrammarError::MissingObservation(i));
                    }
                    s = S::Thinking;
                }
                RecordKind::Action => {
                    if s == S::NeedObs {
                        return Err(GrammarError::MissingObservation(i));
                    }
                    ended = r.as_action().is_some_and(|(a, _)| a.verb == Verb::End);
                    s = S::NeedObs;
                }
            }
        }
        if ended {
            Ok(())
        } else {
            Err(GrammarError::NoEnd)
        }
    }
}

/// Trajectories stored one JSON object per line.
pub fn save_trajectories(path: &std::path::Path, trajs: &[Trajectory]) -> std::io::Result<()> {
    let mut text = String::new();
    for t in trajs {
        text.push_str(&crate::canonical::to_canonical_line(t).map_err(std::io::Error::other)?);
        text.push('\n');
    }
    std::fs::write(path, text)
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {source}")]
    Parse { path: String, line: usize, source: serde_json::Error },
}

pub fn load_trajectories(path: &std::path::Path) -> Result<Vec<Trajectory>, LoadError> {
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| LoadError::Io { path: p.clone(), source })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|source| LoadError::Parse { path: p.clone(), line: n + 1, source }))
        .collect()
}
