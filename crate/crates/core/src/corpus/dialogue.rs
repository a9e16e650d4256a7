//! Multi-turn training export: system, user (observations and feedback) and
//! assistant (thoughts plus the decision) turns, with byte spans saying which
//! parts carry loss.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::harness::{decision_text, followup_user_text, initial_user_text, Role};
use crate::prompt;
use crate::scene::Scene;
use crate::task::TaskInstruction;
use crate::trajectory::{GrammarError, Payload, Record, Trajectory};

/// Bytes `start..end` of a turn's text, produced by `record` when present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub loss: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportTurn {
    pub role: Role,
    pub text: String,
    pub spans: Vec<Span>,
}

impl ExportTurn {
    fn new(role: Role) -> Self {
        ExportTurn { role, text: String::new(), spans: Vec::new() }
    }

    fn append(&mut self, text: &str, loss: bool, record: Option<usize>) {
        let start = self.text.len();
        self.text.push_str(text);
        self.spans.push(Span { start, end: self.text.len(), loss, record });
    }

    /// Text of every span that trains.
    pub fn loss_text(&self) -> Vec<&str> {
        self.spans.iter().filter(|s| s.loss).map(|s| &self.text[s.start..s.end]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub task_id: String,
    pub scene_id: String,
    pub seed: u64,
    pub turns: Vec<ExportTurn>,
    /// Source records, indexed by [`Span::record`].
    pub records: Vec<Record>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ImportError {
    #[error("record {0} is not covered by exactly one span, in order")]
    Coverage(usize),
    #[error("turn {turn}: span {start}..{end} is out of bounds")]
    Bounds { turn: usize, start: usize, end: usize },
    #[error("turn {turn}: span text differs from record {record}")]
    TextMismatch { turn: usize, record: usize },
    #[error("turn {turn}: loss flag disagrees with record {record}")]
    MaskMismatch { turn: usize, record: usize },
    #[error(transparent)]
    Grammar(#[from] GrammarError),
}

fn flush(turns: &mut Vec<ExportTurn>, t: &mut Option<ExportTurn>) {
    if let Some(t) = t.take() {
        turns.push(t);
    }
}

/// Renders `traj` as dialogue turns; the trajectory must be grammar-valid.
pub fn export_dialogue(task: &TaskInstruction, scene: &Scene, traj: &Trajectory) -> Result<DialogueRecord, GrammarError> {
    traj.validate()?;
    let mut turns = vec![ExportTurn { role: Role::System, text: prompt::SYSTEM.to_string(), spans: Vec::new() }];
    let mut open: Option<ExportTurn> = None;
    let mut last_phrase: Option<String> = None;
    let mut first = true;
    for (i, r) in traj.records.iter().enumerate() {
        match &r.payload {
            Payload::Observation { observation } | Payload::Feedback { observation } => {
                if open.as_ref().is_some_and(|t| t.role == Role::Assistant) {
                    flush(&mut turns, &mut open);
                }
                let text = if first {
                    first = false;
                    initial_user_text(task, observation)
                } else {
                    match last_phrase.take() {
                        Some(p) => followup_user_text(observation, &p),
                        None => observation.text(),
                    }
                };
                let turn = open.get_or_insert_with(|| ExportTurn::new(Role::User));
                if !turn.text.is_empty() && !turn.text.ends_with('\n') {
                    turn.text.push('\n');
                }
                turn.append(&text, r.loss_mask, Some(i));
            }
            Payload::Thought { thought } => {
                if open.as_ref().is_some_and(|t| t.role == Role::User) {
                    flush(&mut turns, &mut open);
                }
                let turn = open.get_or_insert_with(|| ExportTurn::new(Role::Assistant));
                turn.append(&thought.text, r.loss_mask, Some(i));
                turn.text.push('\n');
            }
            Payload::Action { action, raw, .. } => {
                if open.as_ref().is_some_and(|t| t.role == Role::User) {
                    flush(&mut turns, &mut open);
                }
                let phrase = action.render(scene);
                let text = raw.clone().unwrap_or_else(|| decision_text(&phrase));
                open.get_or_insert_with(|| ExportTurn::new(Role::Assistant)).append(&text, r.loss_mask, Some(i));
                flush(&mut turns, &mut open);
                last_phrase = Some(phrase);
            }
        }
    }
    flush(&mut turns, &mut open);
    Ok(DialogueRecord {
        task_id: traj.task_id.clone(),
        scene_id: traj.scene_id.clone(),
        seed: traj.seed,
        turns,
        records: traj.records.clone(),
    })
}

/// Rebuilds the trajectory and checks that spans, texts and masks agree with
/// the embedded records.
pub fn import_dialogue(d: &DialogueRecord) -> Result<Trajectory, ImportError> {
    let mut next = 0;
    for (ti, turn) in d.turns.iter().enumerate() {
        for s in &turn.spans {
            let body = turn
                .text
                .get(s.start..s.end)
                .ok_or(ImportError::Bounds { turn: ti, start: s.start, end: s.end })?;
            let Some(ri) = s.record else { continue };
            if ri != next || ri >= d.records.len() {
                return Err(ImportError::Coverage(next));
            }
            let r = &d.records[ri];
            if r.loss_mask != s.loss {
                return Err(ImportError::MaskMismatch { turn: ti, record: ri });
            }
            let text_ok = match &r.payload {
                Payload::Thought { thought } => thought.text == body,
                Payload::Action { raw: Some(raw), .. } => raw == body,
                _ => true,
            };
            if !text_ok {
                return Err(ImportError::TextMismatch { turn: ti, record: ri });
            }
            next += 1;
        }
    }
    if next != d.records.len() {
        return Err(ImportError::Coverage(next));
    }
    let traj = Trajectory { task_id: d.task_id.clone(), scene_id: d.scene_id.clone(), seed: d.seed, records: d.records.clone() };
    traj.validate()?;
    Ok(traj)
}

/// One dialogue per line.
pub fn save_dialogues(path: &Path, ds: &[DialogueRecord]) -> std::io::Result<()> {
    let mut text = String::new();
    for d in ds {
        text.push_str(&crate::canonical::to_canonical_line(d).map_err(std::io::Error::other)?);
        text.push('\n');
    }
    std::fs::write(path, text)
}

pub fn load_dialogues(path: &Path) -> Result<Vec<DialogueRecord>, crate::trajectory::LoadError> {
    use crate::trajectory::LoadError;
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| LoadError::Io { path: p.clone(), source })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|source| LoadError::Parse { path: p.clone(), line: n + 1, source }))
        .collect()
}
