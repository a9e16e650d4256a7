//! `<DecisionMaking>` extraction from free-form assistant text.

use crate::action::{split_phrase, Action, ActionError, Verb};
use crate::catalog::Catalog;
use crate::scene::Scene;

pub const OPEN_TAG: &str = "<DecisionMaking>";
pub const CLOSE_TAG: &str = "</DecisionMaking>";

/// Wraps an action phrase in the decision tag.
pub fn decision_text(phrase: &str) -> String {
    format!("{OPEN_TAG}{phrase}{CLOSE_TAG}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionTag {
    /// Tag body as written.
    pub raw: String,
    pub parsed: Action,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("no well-formed decision tag")]
    NoTag,
    #[error("decision tags disagree: `{first}` vs `{second}`")]
    MultipleConflictingTags { first: String, second: String },
    #[error("unknown action `{0}`")]
    UnknownVerb(String),
    #[error("`{0}` needs a target")]
    MissingTarget(String),
    /// The phrase names nothing in the scene or the catalog. The harness still
    /// executes it so the simulator can answer with the name-mismatch feedback.
    #[error("unknown target `{phrase}`")]
    UnknownTarget { verb: Verb, phrase: String },
}

/// Bodies of well-formed tags, in order. Tag names match case-insensitively
/// and a body runs up to the next `<`, which must start the closing tag.
pub fn tag_bodies(text: &str) -> Vec<&str> {
    let lower = text.to_ascii_lowercase();
    let open = OPEN_TAG.to_ascii_lowercase();
    let close = CLOSE_TAG.to_ascii_lowercase();
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(rel) = lower[from..].find(&open) {
        let start = from + rel + open.len();
        match lower[start..].find('<') {
            Some(lt) if lower[start + lt..].starts_with(&close) => {
                out.push(&text[start..start + lt]);
                from = start + lt + close.len();
            }
            Some(lt) => from = start + lt,
            None => break,
        }
    }
    out
}

/// Scene id (exact), scene id or label (case-folded), then catalog class.
fn normalize_target(scene: &Scene, catalog: &Catalog, phrase: &str) -> Option<String> {
    if let Some(i) = scene.resolve_id(phrase) {
        return Some(scene.objects[i].id.clone());
    }
    if let Some(class) = catalog.normalize(phrase) {
        return Some(class.to_string());
    }
    None
}

fn parse_body(scene: &Scene, catalog: &Catalog, body: &str) -> Result<Action, ParseError> {
    let (verb, phrase) = split_phrase(body).map_err(|e| match e {
        ActionError::MissingTarget(_) => ParseError::MissingTarget(body.trim().to_string()),
        _ => ParseError::UnknownVerb(body.trim().to_string()),
    })?;
    match phrase {
        None => Ok(Action::bare(verb)),
        Some(p) => match normalize_target(scene, catalog, &p) {
            Some(t) => Ok(Action::with(verb, t)),
            None => Err(ParseError::UnknownTarget { verb, phrase: p }),
        },
    }
}

/// The decision in `text`. Several tags are fine as long as every one that
/// parses agrees; the last such tag is reported.
pub fn parse_decision(text: &str, scene: &Scene, catalog: &Catalog) -> Result<DecisionTag, ParseError> {
    let bodies = tag_bodies(text);
    let Some(last) = bodies.last() else {
        return Err(ParseError::NoTag);
    };
    let parsed: Vec<(&str, Result<Action, ParseError>)> = bodies.iter().map(|b| (*b, parse_body(scene, catalog, b))).collect();
    let mut chosen: Option<(&str, &Action)> = None;
    let mut first_ok: Option<(&str, &Action)> = None;
    for (body, r) in &parsed {
        if let Ok(a) = r {
            if let Some((fb, fa)) = first_ok {
                if fa != a {
                    return Err(ParseError::MultipleConflictingTags { first: fb.trim().into(), second: body.trim().into() });
                }
            } else {
                first_ok = Some((body, a));
            }
            chosen = Some((body, a));
        }
    }
    match chosen {
        Some((body, a)) => Ok(DecisionTag { raw: body.to_string(), parsed: a.clone() }),
        None => Err(parsed.into_iter().last().and_then(|(_, r)| r.err()).unwrap_or_else(|| ParseError::UnknownVerb(last.to_string()))),
    }
}
