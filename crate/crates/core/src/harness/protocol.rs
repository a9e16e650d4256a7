//! Line-delimited JSON session protocol, version 1.
//!
//! Every message is one JSON object on one line with a `type` field.
//!
//! client → server: `session_init {version, task_id, seed}`, `decision {text}`,
//! `report_request {}`.
//!
//! server → client: `session_ready {version, session, task_id}`,
//! `turn {role, text}` (the system prompt, the first observation, each new
//! frame), `feedback {text}` (illegal action or format reminder),
//! `episode_end {result}`, `report {report}`, `error {code, message}`.
//!
//! After `session_ready` the server sends turns until it needs a decision;
//! every `turn` with role `user` and every `feedback` expects exactly one
//! `decision` back. One session runs one episode; a connection may run several
//! sessions in a row. Errors are scoped to the connection that caused them.

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{run_episode, AgentError, AgentPort, Limits, Role, Termination, Turn};
use crate::reward::{aggregate, EpisodeMetrics, MetricsReport, Reason};
use crate::scene::Scene;
use crate::task::TaskInstruction;
use crate::trajectory::Trajectory;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    SessionInit { version: u32, task_id: String, #[serde(default)] seed: u64 },
    Decision { text: String },
    ReportRequest {},
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    MalformedMessage,
    VersionMismatch,
    UnknownTask,
    UnexpectedMessage,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub session: u64,
    pub task_id: String,
    pub seed: u64,
    pub success: bool,
    #[serde(flatten)]
    pub termination: Termination,
    pub steps: usize,
    pub reasons: Vec<Reason>,
    pub metrics: EpisodeMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    SessionReady { version: u32, session: u64, task_id: String },
    Turn { role: Role, text: String },
    Feedback { text: String },
    EpisodeEnd { result: EpisodeSummary },
    Report { report: MetricsReport },
    Error { code: ErrorCode, message: String },
}

fn write_message(w: &mut impl Write, m: &ServerMessage) -> io::Result<()> {
    let mut line = serde_json::to_string(m).map_err(io::Error::other)?;
    line.push('\n');
    w.write_all(line.as_bytes())?;
    w.flush()
}

enum Incoming {
    Message(ClientMessage),
    Malformed(String),
    Eof,
}

fn read_message(r: &mut impl BufRead) -> io::Result<Incoming> {
    loop {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Ok(Incoming::Eof);
        }
        if line.trim().is_empty() {
            continue;
        }
        return Ok(match serde_json::from_str(line.trim()) {
            Ok(m) => Incoming::Message(m),
            Err(e) => Incoming::Malformed(e.to_string()),
        });
    }
}

/// Tasks and scenes a server can run, plus the append-only result log.
pub struct ServerContext {
    pub scenes: BTreeMap<String, Scene>,
    pub tasks: BTreeMap<String, TaskInstruction>,
    pub limits: Limits,
    /// How long to wait for a decision before the episode fails.
    pub decision_timeout: Option<Duration>,
    log: Mutex<Vec<EpisodeSummary>>,
    transcripts: Mutex<Vec<Trajectory>>,
    next_session: AtomicU64,
}

impl ServerContext {
    pub fn new(scenes: BTreeMap<String, Scene>, tasks: impl IntoIterator<Item = TaskInstruction>, limits: Limits) -> Self {
        ServerContext {
            scenes,
            tasks: tasks.into_iter().map(|t| (t.id.clone(), t)).collect(),
            limits,
            decision_timeout: None,
            log: Mutex::new(Vec::new()),
            transcripts: Mutex::new(Vec::new()),
            next_session: AtomicU64::new(1),
        }
    }

    pub fn results(&self) -> Vec<EpisodeSummary> {
        self.log.lock().expect("log lock").clone()
    }

    /// Trajectories of every finished session, in completion order.
    pub fn trajectories(&self) -> Vec<Trajectory> {
        self.transcripts.lock().expect("transcript lock").clone()
    }

    pub fn report(&self) -> MetricsReport {
        let rows: Vec<EpisodeMetrics> = self.log.lock().expect("log lock").iter().map(|s| s.metrics.clone()).collect();
        aggregate(&rows)
    }
}

/// Agent whose replies come from the connected client.
struct RemoteAgent<'a, R, W> {
    reader: &'a mut R,
    writer: &'a mut W,
    ctx: &'a ServerContext,
    sent: usize,
}

fn io_to_agent(e: io::Error) -> AgentError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => AgentError::Timeout,
        _ => AgentError::Disconnected,
    }
}

impl<R: BufRead, W: Write> AgentPort for RemoteAgent<'_, R, W> {
    fn reply(&mut self, dialogue: &[Turn]) -> Result<String, AgentError> {
        for t in &dialogue[self.sent..] {
            let m = match t.role {
                Role::Assistant => continue,
                Role::User if t.text.starts_with("<|feedback|>") => ServerMessage::Feedback { text: t.text.clone() },
                role => ServerMessage::Turn { role, text: t.text.clone() },
            };
            write_message(self.writer, &m).map_err(io_to_agent)?;
        }
        self.sent = dialogue.len();
        loop {
            match read_message(self.reader).map_err(io_to_agent)? {
                Incoming::Eof => return Err(AgentError::Disconnected),
                Incoming::Message(ClientMessage::Decision { text }) => {
                    // the reply will appear in the dialogue next time
                    self.sent += 1;
                    return Ok(text);
                }
                Incoming::Message(ClientMessage::ReportRequest {}) => {
                    write_message(self.writer, &ServerMessage::Report { report: self.ctx.report() }).map_err(io_to_agent)?;
                }
                Incoming::Message(ClientMessage::SessionInit { .. }) => {
                    let m = ServerMessage::Error {
                        code: ErrorCode::UnexpectedMessage,
                        message: "an episode is already running on this connection".into(),
                    };
                    write_message(self.writer, &m).map_err(io_to_agent)?;
                }
                Incoming::Malformed(message) => {
                    write_message(self.writer, &ServerMessage::Error { code: ErrorCode::MalformedMessage, message }).map_err(io_to_agent)?;
                }
            }
        }
    }
}

/// Serves sessions on one connection until the client hangs up.
pub fn serve_connection<R: BufRead, W: Write>(mut reader: R, mut writer: W, ctx: &ServerContext) -> io::Result<()> {
    loop {
        let msg = match read_message(&mut reader)? {
            Incoming::Eof => return Ok(()),
            Incoming::Malformed(message) => {
                write_message(&mut writer, &ServerMessage::Error { code: ErrorCode::MalformedMessage, message })?;
                continue;
            }
            Incoming::Message(m) => m,
        };
        match msg {
            ClientMessage::ReportRequest {} => write_message(&mut writer, &ServerMessage::Report { report: ctx.report() })?,
            ClientMessage::Decision { .. } => write_message(
                &mut writer,
                &ServerMessage::Error { code: ErrorCode::UnexpectedMessage, message: "no episode is running".into() },
            )?,
            ClientMessage::SessionInit { version, task_id, seed } => {
                if version != PROTOCOL_VERSION {
                    let message = format!("server speaks version {PROTOCOL_VERSION}, client sent {version}");
                    write_message(&mut writer, &ServerMessage::Error { code: ErrorCode::VersionMismatch, message })?;
                    continue;
                }
                let Some((task, scene)) = ctx.tasks.get(&task_id).and_then(|t| Some((t, ctx.scenes.get(&t.scene_id)?))) else {
                    let message = format!("no task `{task_id}` with a loaded scene");
                    write_message(&mut writer, &ServerMessage::Error { code: ErrorCode::UnknownTask, message })?;
                    continue;
                };
                let session = ctx.next_session.fetch_add(1, Ordering::Relaxed);
                write_message(&mut writer, &ServerMessage::SessionReady { version, session, task_id: task_id.clone() })?;
                let mut agent = RemoteAgent { reader: &mut reader, writer: &mut writer, ctx, sent: 0 };
                let outcome = match run_episode(scene, task, &mut agent, ctx.limits, seed) {
                    Ok(o) => o,
                    Err(e) => {
                        write_message(&mut writer, &ServerMessage::Error { code: ErrorCode::Internal, message: e.to_string() })?;
                        continue;
                    }
                };
                let summary = EpisodeSummary {
                    session,
                    task_id,
                    seed,
                    success: outcome.result.success,
                    termination: outcome.termination.clone(),
                    steps: outcome.result.predicted_actions.len(),
                    reasons: outcome.judgment.reasons.clone(),
                    metrics: outcome.metrics.clone(),
                };
                ctx.log.lock().expect("log lock").push(summary.clone());
                ctx.transcripts.lock().expect("transcript lock").push(outcome.trajectory);
                if outcome.termination == Termination::Disconnected {
                    return Ok(());
                }
                write_message(&mut writer, &ServerMessage::EpisodeEnd { result: summary })?;
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("cannot bind {addr}: {source}")]
pub struct BindFailure {
    pub addr: String,
    pub source: io::Error,
}

/// TCP front end: one thread per connection.
pub struct Server {
    listener: TcpListener,
    ctx: Arc<ServerContext>,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs + std::fmt::Display, ctx: Arc<ServerContext>) -> Result<Self, BindFailure> {
        let listener = TcpListener::bind(&addr).map_err(|source| BindFailure { addr: addr.to_string(), source })?;
        Ok(Server { listener, ctx })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts connections until the listener fails.
    pub fn run(self) -> io::Result<()> {
        for stream in self.listener.incoming() {
            let stream = stream?;
            let ctx = Arc::clone(&self.ctx);
            std::thread::spawn(move || {
                if let Err(e) = handle(stream, &ctx) {
                    log::warn!("connection ended with error: {e}");
                }
            });
        }
        Ok(())
    }
}

fn handle(stream: TcpStream, ctx: &ServerContext) -> io::Result<()> {
    stream.set_read_timeout(ctx.decision_timeout)?;
    let reader = BufReader::new(stream.try_clone()?);
    serve_connection(reader, stream, ctx)
}
