//! Chat-completion endpoint as an evaluation agent, plus transcript replay.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use homesim_core::harness::{AgentError, AgentPort, Role, Turn};
use serde::{Deserialize, Serialize};

use crate::config::Config;

pub const ENV_BASE: &str = "HOMESIM_API_BASE";
pub const ENV_KEY: &str = "HOMESIM_API_KEY";
pub const ENV_MODEL: &str = "HOMESIM_MODEL";

#[derive(Clone)]
pub struct Endpoint {
    pub base_url: String,
    pub model: String,
    api_key: Option<String>,
    pub timeout: Duration,
    pub attempts: u32,
    /// Wait before the second attempt; doubles after each failure.
    pub backoff: Duration,
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Endpoint")
            .field("base_url", &self.base_url)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("timeout", &self.timeout)
            .field("attempts", &self.attempts)
            .finish()
    }
}

#[derive(Debug, thiserror::Error)]
#[error("no endpoint configured: set {ENV_BASE} or [external].base_url")]
pub struct MissingEndpoint;

impl Endpoint {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        Endpoint {
            base_url: base_url.into(),
            model: model.into(),
            api_key,
            timeout: Duration::from_secs(60),
            attempts: 3,
            backoff: Duration::from_millis(500),
        }
    }

    /// Environment first, then the config file. The key only ever comes from the environment.
    pub fn from_env(cfg: &Config) -> Result<Self, MissingEndpoint> {
        let env = |k| std::env::var(k).ok().filter(|v: &String| !v.is_empty());
        let base = env(ENV_BASE).or_else(|| cfg.external.base_url.clone()).ok_or(MissingEndpoint)?;
        let model = env(ENV_MODEL).or_else(|| cfg.external.model.clone()).unwrap_or_else(|| "default".into());
        let mut e = Endpoint::new(base, model, env(ENV_KEY));
        e.timeout = cfg.external_timeout();
        if let Some(n) = cfg.external.attempts {
            e.attempts = n.max(1);
        }
        if let Some(ms) = cfg.external.backoff_ms {
            e.backoff = Duration::from_millis(ms);
        }
        Ok(e)
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

/// One request and what came of it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub episode: String,
    pub index: usize,
    pub attempts: u32,
    pub request: Vec<Message>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub type Transcript = Arc<Mutex<Vec<TranscriptEntry>>>;

fn role_name(r: Role) -> &'static str {
    match r {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
    }
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

enum Attempt {
    Reply(String),
    Retry(String),
    Fatal(AgentError),
}

pub struct ExternalAgent {
    endpoint: Endpoint,
    http: ureq::Agent,
    episode: String,
    index: usize,
    log: Transcript,
}

impl ExternalAgent {
    pub fn new(endpoint: Endpoint, episode: impl Into<String>, log: Transcript) -> Self {
        let http = ureq::Agent::config_builder()
            .timeout_global(Some(endpoint.timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        ExternalAgent { endpoint, http, episode: episode.into(), index: 0, log }
    }

    fn attempt(&self, body: &serde_json::Value) -> Attempt {
        let mut req = self.http.post(self.endpoint.url()).header("Content-Type", "application/json");
        if let Some(key) = &self.endpoint.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status().as_u16();
        match status {
            200..=299 => match resp.body_mut().read_json::<Completion>() {
                Ok(c) => match c.choices.into_iter().next() {
                    Some(ch) => Attempt::Reply(ch.message.content),
                    None => Attempt::Retry("response has no choices".into()),
                },
                Err(e) => Attempt::Retry(format!("unreadable response: {e}")),
            },
            401 | 403 => Attempt::Fatal(AgentError::Auth(format!("HTTP {status}"))),
            408 | 429 | 500..=599 => Attempt::Retry(format!("HTTP {status}")),
            _ => Attempt::Fatal(AgentError::Unavailable(format!("HTTP {status}"))),
        }
    }
}

impl AgentPort for ExternalAgent {
    fn reply(&mut self, dialogue: &[Turn]) -> Result<String, AgentError> {
        let request: Vec<Message> =
            dialogue.iter().map(|t| Message { role: role_name(t.role).into(), content: t.text.clone() }).collect();
        let body = serde_json::json!({ "model": self.endpoint.model, "messages": request, "temperature": 0 });
        let mut delay = self.endpoint.backoff;
        let mut used = 0;
        let outcome = loop {
            used += 1;
            log::info!("{} turn {}: POST {} (attempt {used})", self.episode, self.index, self.endpoint.url());
            match self.attempt(&body) {
                Attempt::Reply(text) => break Ok(text),
                Attempt::Fatal(e) => break Err(e),
                Attempt::Retry(why) if used >= self.endpoint.attempts => break Err(AgentError::Unavailable(why)),
                Attempt::Retry(why) => {
                    log::warn!("{}: {why}; retrying in {delay:?}", self.episode);
                    std::thread::sleep(delay);
                    delay *= 2;
                }
            }
        };
        let entry = TranscriptEntry {
            episode: self.episode.clone(),
            index: self.index,
            attempts: used,
            request,
            reply: outcome.as_ref().ok().cloned(),
            error: outcome.as_ref().err().map(|e| match e {
                AgentError::Unavailable(m) => m.clone(),
                e => e.to_string(),
            }),
        };
        self.log.lock().expect("transcript lock").push(entry);
        self.index += 1;
        outcome
    }
}

pub fn save_transcript(path: &Path, entries: &[TranscriptEntry]) -> std::io::Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&serde_json::to_string(e).map_err(std::io::Error::other)?);
        text.push('\n');
    }
    std::fs::write(path, text)
}

#[derive(Debug, thiserror::Error)]
pub enum TranscriptError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
}

/// Entries grouped by episode, in request order.
pub fn load_transcript(path: &Path) -> Result<BTreeMap<String, Vec<TranscriptEntry>>, TranscriptError> {
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| TranscriptError::Io { path: p.clone(), message: e.to_string() })?;
    let mut out: BTreeMap<String, Vec<TranscriptEntry>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let e: TranscriptEntry =
            serde_json::from_str(line).map_err(|e| TranscriptError::Parse { path: p.clone(), line: n + 1, message: e.to_string() })?;
        out.entry(e.episode.clone()).or_default().push(e);
    }
    for v in out.values_mut() {
        v.sort_by_key(|e| e.index);
    }
    Ok(out)
}

/// Answers from a recorded transcript, reproducing recorded failures too.
pub struct TranscriptReplay {
    entries: std::vec::IntoIter<TranscriptEntry>,
}

impl TranscriptReplay {
    pub fn new(entries: Vec<TranscriptEntry>) -> Self {
        TranscriptReplay { entries: entries.into_iter() }
    }
}

impl AgentPort for TranscriptReplay {
    fn reply(&mut self, _: &[Turn]) -> Result<String, AgentError> {
        let e = self.entries.next().ok_or(AgentError::Disconnected)?;
        match (e.reply, e.error) {
            (Some(r), _) => Ok(r),
            (None, Some(err)) => Err(AgentError::Unavailable(err)),
            (None, None) => Err(AgentError::Disconnected),
        }
    }
}
