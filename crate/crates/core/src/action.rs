//! The nine high-level actions and their text form.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::scene::Scene;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Verb {
    Observe,
    MoveForward,
    NavigateTo,
    PutIn,
    Pickup,
    Toggle,
    Close,
    Open,
    End,
}

impl Verb {
    pub const ALL: [Verb; 9] = [
        Verb::Observe,
        Verb::MoveForward,
        Verb::NavigateTo,
        Verb::PutIn,
        Verb::Pickup,
        Verb::Toggle,
        Verb::Close,
        Verb::Open,
        Verb::End,
    ];

    pub fn takes_target(self) -> bool {
        !matches!(self, Verb::Observe | Verb::MoveForward | Verb::End)
    }

    /// Interaction verbs other than navigation.
    pub fn is_manipulation(self) -> bool {
        matches!(self, Verb::PutIn | Verb::Pickup | Verb::Toggle | Verb::Close | Verb::Open)
    }

    /// Verbs that count toward key-action matching.
    pub fn is_keyed(self) -> bool {
        !matches!(self, Verb::Observe | Verb::MoveForward)
    }

    pub fn phrase(self) -> &'static str {
        match self {
            Verb::Observe => "observe",
            Verb::MoveForward => "move forward",
            Verb::NavigateTo => "navigate to",
            Verb::PutIn => "put in",
            Verb::Pickup => "pickup",
            Verb::Toggle => "toggle",
            Verb::Close => "close",
            Verb::Open => "open",
            Verb::End => "end",
        }
    }

    /// Accepted spellings, longest first within each verb.
    fn spellings(self) -> &'static [&'static str] {
        match self {
            Verb::Observe => &["observe"],
            Verb::MoveForward => &["move forward", "moveahead"],
            Verb::NavigateTo => &["navigate to"],
            Verb::PutIn => &["put in", "put"],
            Verb::Pickup => &["pick up", "pickup"],
            Verb::Toggle => &["toggle"],
            Verb::Close => &["close"],
            Verb::Open => &["open"],
            Verb::End => &["termination", "end"],
        }
    }
}

impl fmt::Display for Verb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.phrase())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ActionError {
    #[error("`{0}` needs a target")]
    MissingTarget(Verb),
    #[error("`{0}` takes no target")]
    UnexpectedTarget(Verb),
    #[error("unknown verb in `{0}`")]
    UnknownVerb(String),
}

/// A verb plus optional target (object id or class name, resolved at execution time).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawAction")]
pub struct Action {
    pub verb: Verb,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
}

#[derive(Deserialize)]
struct RawAction {
    verb: Verb,
    #[serde(default)]
    target: Option<String>,
}

impl TryFrom<RawAction> for Action {
    type Error = ActionError;
    fn try_from(raw: RawAction) -> Result<Self, ActionError> {
        Action::new(raw.verb, raw.target)
    }
}

impl Action {
    pub fn new(verb: Verb, target: Option<String>) -> Result<Self, ActionError> {
        let target = target.filter(|t| !t.trim().is_empty());
        match (verb.takes_target(), &target) {
            (true, None) => Err(ActionError::MissingTarget(verb)),
            (false, Some(_)) => Err(ActionError::UnexpectedTarget(verb)),
            _ => Ok(Action { verb, target }),
        }
    }

    pub fn bare(verb: Verb) -> Self {
        Action::new(verb, None).expect("verb takes no target")
    }

    pub fn with(verb: Verb, target: impl Into<String>) -> Self {
        Action::new(verb, Some(target.into())).expect("verb takes a target")
    }

    pub fn navigate(t: impl Into<String>) -> Self {
        Action::with(Verb::NavigateTo, t)
    }
    pub fn open(t: impl Into<String>) -> Self {
        Action::with(Verb::Open, t)
    }
    pub fn close(t: impl Into<String>) -> Self {
        Action::with(Verb::Close, t)
    }
    pub fn pickup(t: impl Into<String>) -> Self {
        Action::with(Verb::Pickup, t)
    }
    pub fn put_in(t: impl Into<String>) -> Self {
        Action::with(Verb::PutIn, t)
    }
    pub fn toggle(t: impl Into<String>) -> Self {
        Action::with(Verb::Toggle, t)
    }
    pub fn end() -> Self {
        Action::bare(Verb::End)
    }

    /// Text with ids replaced by their scene labels (class name when unique).
    pub fn render(&self, scene: &Scene) -> String {
        match &self.target {
            None => self.verb.phrase().to_string(),
            Some(t) => {
                let label = scene.index_of(t).map(|i| scene.label(i)).unwrap_or(t);
                format!("{} {}", self.verb.phrase(), label)
            }
        }
    }

    /// Text naming the target's class (the form used in task tables).
    pub fn render_class(&self, scene: &Scene) -> String {
        match &self.target {
            None => self.verb.phrase().to_string(),
            Some(t) => format!("{} {}", self.verb.phrase(), scene.class_of(t).unwrap_or(t)),
        }
    }

    /// `(verb, class)` identity used for key-action matching.
    pub fn key(&self, scene: &Scene) -> ActionKey {
        let class = self.target.as_ref().map(|t| match scene.resolve_id(t) {
            Some(i) => scene.objects[i].class_name.clone(),
            None => scene
                .by_class(t)
                .first()
                .map(|&i| scene.objects[i].class_name.clone())
                .unwrap_or_else(|| t.clone()),
        });
        ActionKey { verb: self.verb, class }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.target {
            None => f.write_str(self.verb.phrase()),
            Some(t) => write!(f, "{} {}", self.verb.phrase(), t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionKey {
    pub verb: Verb,
    pub class: Option<String>,
}

/// Split an action phrase into verb and raw target. Verb matching ignores case
/// and collapses whitespace; trailing periods are dropped.
pub fn split_phrase(text: &str) -> Result<(Verb, Option<String>), ActionError> {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let trimmed = collapsed.trim_end_matches('.').trim();
    let lower = trimmed.to_ascii_lowercase();
    let mut best: Option<(Verb, usize)> = None;
    for verb in Verb::ALL {
        for sp in verb.spellings() {
            let matches = lower == *sp
                || (lower.starts_with(sp) && lower.as_bytes().get(sp.len()) == Some(&b' '));
            if matches && best.is_none_or(|(_, l)| sp.len() > l) {
                best = Some((verb, sp.len()));
            }
        }
    }
    let (verb, len) = best.ok_or_else(|| ActionError::UnknownVerb(text.to_string()))?;
    let rest = trimmed[len..].trim();
    let rest = rest.strip_prefix("the ").unwrap_or(rest).trim();
    match (verb.takes_target(), rest.is_empty()) {
        (true, true) => Err(ActionError::MissingTarget(verb)),
        // "put" alone followed by "in" already handled; arbitrary tail on bare verbs is not an action
        (false, false) => Err(ActionError::UnknownVerb(text.to_string())),
        (true, false) => Ok((verb, Some(rest.to_string()))),
        (false, true) => Ok((verb, None)),
    }
}
