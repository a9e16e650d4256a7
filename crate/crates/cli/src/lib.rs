//! Command-line pipeline: scene and task generation, planning, forging,
//! filtering, evaluation, statistics and the episode server.

pub mod args;
mod commands;
pub mod config;
pub mod external;

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use homesim_core::corpus::{read_scenes, read_tasks};
use homesim_core::trajectory::{load_trajectories, Trajectory};
use homesim_core::{Scene, TaskInstruction};

pub use args::Cli;
use config::Config;

/// Bad invocation rather than bad data; exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// One machine-readable progress line on stderr.
pub(crate) fn progress(event: &str, fields: serde_json::Value) {
    let mut line = serde_json::Map::new();
    line.insert("event".into(), event.into());
    if let serde_json::Value::Object(m) = fields {
        line.extend(m);
    }
    eprintln!("{}", serde_json::Value::Object(line));
}

pub(crate) struct Data {
    pub scenes: BTreeMap<String, Scene>,
    pub tasks: Vec<TaskInstruction>,
}

impl Data {
    pub fn load(d: &args::Data) -> Result<Self> {
        let scenes = read_scenes(&d.scenes)?;
        let tasks = read_tasks(&d.tasks)?;
        // read_tasks skips blank lines; map back to file lines for messages
        let text = std::fs::read_to_string(&d.tasks).with_context(|| d.tasks.display().to_string())?;
        let lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).map(|(n, _)| n + 1);
        for (t, line) in tasks.iter().zip(lines) {
            if !scenes.contains_key(&t.scene_id) {
                anyhow::bail!("{}:{line}: task {} refers to scene `{}`, not found in {}", d.tasks.display(), t.id, t.scene_id, d.scenes.display());
            }
        }
        Ok(Data { scenes, tasks })
    }

    pub fn task(&self, id: &str) -> Option<&TaskInstruction> {
        self.tasks.iter().find(|t| t.id == id)
    }

    /// Trajectories paired with their tasks; an unknown task id is a data error.
    pub fn pair(&self, path: &Path, trajs: Vec<Trajectory>) -> Result<Vec<(TaskInstruction, Trajectory)>> {
        let by_id: BTreeMap<&str, &TaskInstruction> = self.tasks.iter().map(|t| (t.id.as_str(), t)).collect();
        let mut out = Vec::with_capacity(trajs.len());
        for (i, t) in trajs.into_iter().enumerate() {
            let task = by_id.get(t.task_id.as_str()).with_context(|| format!("{}:{}: unknown task {}", path.display(), i + 1, t.task_id))?;
            out.push(((*task).clone(), t));
        }
        Ok(out)
    }
}

pub(crate) fn load_trajs(path: &Path) -> Result<Vec<Trajectory>> {
    Ok(load_trajectories(path)?)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    commands::dispatch(&cli, &cfg)
}

/// Process exit status for an error returned by [`run`].
pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        2
    } else {
        1
    }
}
