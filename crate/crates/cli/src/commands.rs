use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context, Result};
use homesim_core::canonical::{to_canonical_line, to_canonical_pretty};
use homesim_core::corpus::{corpus_stats, export_dialogue, generate_stage, save_dialogues, verify_stage, write_scenes, write_stage, GenConfig, Stage};
use homesim_core::forge::{forge_correction, induce_failure, inject_anomalies, rollout, FailureMode};
use homesim_core::harness::protocol::{serve_connection, Server, ServerContext};
use homesim_core::harness::{episode_seed, evaluate_suite, run_episode, AgentKind, AgentPort, EpisodeOutcome, Limits};
use homesim_core::planner::{derive_key_actions, insert_search_process, ExploratoryPlan, KeyActionSequence, SearchPolicy};
use homesim_core::reward::{aggregate, filter_trajectories, EpisodeMetrics, EpisodeResult};
use homesim_core::scene::generate_scene;
use homesim_core::task::{parse_mix, save_tasks, synthesize_tasks};
use homesim_core::thought::ThoughtEngine;
use homesim_core::trajectory::{save_trajectories, Payload, Provenance, Trajectory};
use homesim_core::{seed, RoomType, Scene, SceneSpec, TaskInstruction};
use num_rational::Ratio;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde_json::json;

use crate::args::{self, Cli, Command};
use crate::config::Config;
use crate::external::{load_transcript, save_transcript, Endpoint, ExternalAgent, Transcript, TranscriptReplay};
use crate::{load_trajs, progress, usage, Data};

pub fn dispatch(cli: &Cli, cfg: &Config) -> Result<()> {
    match &cli.command {
        Command::GenScenes(a) => gen_scenes(cli.seed, cfg, a),
        Command::GenTasks(a) => gen_tasks(cli.seed, a),
        Command::Plan(a) => plan(cli.seed, cfg, a),
        Command::Forge(a) => forge(cli.seed, cfg, a),
        Command::Filter(a) => filter(a),
        Command::Evaluate(a) => evaluate(cfg, a),
        Command::Stats(a) => stats(a),
        Command::Replay(a) => replay(a),
        Command::Export(a) => export(a),
        Command::Serve(a) => serve(cfg, a),
        Command::Corpus(a) => corpus(cli.seed, cfg, a),
    }
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("{}: cannot write", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    write_out(Some(path), text)
}

fn gen_scenes(master: u64, cfg: &Config, a: &args::GenScenes) -> Result<()> {
    let catalog = cfg.catalog()?;
    let room = match &a.room {
        Some(r) => Some(RoomType::parse(r).ok_or_else(|| usage(format!("unknown room `{r}`")))?),
        None => None,
    };
    let mut scenes = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let room = room.unwrap_or(RoomType::ALL[i % RoomType::ALL.len()]);
        let spec = SceneSpec::new(room, a.receptacles, a.items, seed::derive_indexed(master, "scene", i as u64));
        let scene = generate_scene(&spec, &catalog).with_context(|| format!("scene {i} ({room:?})"))?;
        progress("scene", json!({ "index": i, "id": scene.id, "objects": scene.objects.len() }));
        scenes.push(scene);
    }
    write_scenes(&a.out, &scenes)?;
    progress("done", json!({ "scenes": scenes.len(), "out": a.out }));
    Ok(())
}

fn gen_tasks(master: u64, a: &args::GenTasks) -> Result<()> {
    let mix = parse_mix(&a.mix).map_err(usage)?;
    let scenes = homesim_core::corpus::read_scenes(&a.scenes)?;
    if scenes.is_empty() {
        bail!("{}: no scenes found", a.scenes.display());
    }
    let mut tasks = Vec::new();
    for scene in scenes.values() {
        let synth = synthesize_tasks(scene, &mix, seed::derive(master, &scene.id));
        for issue in &synth.issues {
            log::warn!("{}: {issue:?}", scene.id);
        }
        progress("scene", json!({ "id": scene.id, "tasks": synth.tasks.len(), "issues": synth.issues.len() }));
        tasks.extend(synth.tasks);
    }
    write_out(a.out.as_deref(), &save_tasks(&tasks))?;
    progress("done", json!({ "tasks": tasks.len() }));
    Ok(())
}

/// Per-task seed shared by `plan` and `forge`, so both see the same detours.
fn task_seed(master: u64, task: &TaskInstruction) -> u64 {
    seed::derive(master, &task.id)
}

fn exploratory_plan(s: u64, cfg: &Config, n_detours: Option<usize>, task: &TaskInstruction, scene: &Scene) -> Result<ExploratoryPlan> {
    let key = derive_key_actions(task, scene).with_context(|| format!("task {}", task.id))?;
    let ((lo, hi), allow_observe) = cfg.detour_policy();
    let n = n_detours.unwrap_or_else(|| seed::rng(seed::derive(s, "detours")).random_range(lo..=hi.max(lo)));
    if n == 0 {
        return Ok(ExploratoryPlan::unchanged(key));
    }
    Ok(insert_search_process(&key, &task.goal, scene, SearchPolicy { n_detours: n, allow_observe }, seed::derive(s, "search")))
}

fn plan(master: u64, cfg: &Config, a: &args::PlanArgs) -> Result<()> {
    let data = Data::load(&a.data)?;
    let mut text = String::new();
    for t in &data.tasks {
        let p = exploratory_plan(task_seed(master, t), cfg, a.n_detours, t, &data.scenes[&t.scene_id])?;
        text.push_str(&to_canonical_line(&p)?);
        text.push('\n');
    }
    write_out(a.out.as_deref(), &text)?;
    progress("done", json!({ "plans": data.tasks.len() }));
    Ok(())
}

#[derive(Default)]
struct ForgeCounts {
    anomalies: usize,
    corrections: usize,
}

fn forge_one(master: u64, cfg: &Config, a: &args::ForgeArgs, engine: &ThoughtEngine<'_>, task: &TaskInstruction, scene: &Scene) -> Result<(Trajectory, ForgeCounts)> {
    let s = task_seed(master, task);
    let plan = exploratory_plan(s, cfg, a.n_detours, task, scene)?;
    let mut traj = engine.annotate(task, &plan, scene, seed::derive(s, "annotate")).with_context(|| format!("task {}", task.id))?;
    let mut n = ForgeCounts::default();
    if a.corrections {
        let mut rng = seed::rng(seed::derive(s, "forge"));
        let mode = *FailureMode::ALL.choose(&mut rng).expect("non-empty");
        let path = KeyActionSequence { task_id: task.id.clone(), actions: plan.full.clone() };
        if let Some(failing) = induce_failure(scene, task, &path, mode, &mut rng) {
            let failed = rollout(engine, task, scene, &failing, Provenance::Sampled, seed::derive(s, "failure"));
            match forge_correction(engine, task, &plan.key.actions, scene, &failed, seed::derive(s, "correct")) {
                Ok(c) => {
                    traj = c.trajectory;
                    n.corrections = 1;
                }
                Err(e) => log::info!("{}: no correction ({e})", task.id),
            }
        }
    }
    if a.anomalies > 0 {
        let (t, specs) = inject_anomalies(engine, task, scene, &traj, a.anomalies, seed::derive(s, "anomaly"))
            .with_context(|| format!("task {}", task.id))?;
        traj = t;
        n.anomalies = specs.len();
    }
    Ok((traj, n))
}

fn forge(master: u64, cfg: &Config, a: &args::ForgeArgs) -> Result<()> {
    let data = Data::load(&a.data)?;
    let engine = ThoughtEngine::new(cfg.model().map_err(usage)?);
    let built = homesim_core::par::map(&data.tasks, |t| forge_one(master, cfg, a, &engine, t, &data.scenes[&t.scene_id]));
    let mut trajs = Vec::with_capacity(built.len());
    let mut totals = ForgeCounts::default();
    for b in built {
        let (t, n) = b?;
        totals.anomalies += n.anomalies;
        totals.corrections += n.corrections;
        trajs.push(t);
    }
    save_trajectories(&a.out, &trajs).with_context(|| format!("{}: cannot write", a.out.display()))?;
    progress("done", json!({ "trajectories": trajs.len(), "anomalies": totals.anomalies, "corrections": totals.corrections }));
    Ok(())
}

fn filter(a: &args::FilterArgs) -> Result<()> {
    let data = Data::load(&a.data)?;
    let candidates = data.pair(&a.trajectories, load_trajs(&a.trajectories)?)?;
    let report = filter_trajectories(&candidates, &data.scenes)?;
    let kept: Vec<Trajectory> = report.accepted.iter().map(|&i| candidates[i].1.clone()).collect();
    save_trajectories(&a.out, &kept).with_context(|| format!("{}: cannot write", a.out.display()))?;
    if let Some(p) = &a.rejected {
        let mut text = String::new();
        for (i, reasons) in &report.rejected {
            text.push_str(&to_canonical_line(&json!({ "line": i + 1, "task_id": candidates[*i].0.id, "reasons": reasons }))?);
            text.push('\n');
        }
        write_file(p, &text)?;
    }
    progress("done", json!({ "accepted": report.accepted.len(), "rejected": report.rejected.len() }));
    Ok(())
}

enum Agent {
    Builtin(AgentKind),
    External(Endpoint),
    Replay(BTreeMap<String, Vec<crate::external::TranscriptEntry>>),
}

fn parse_agent(spec: &str, cfg: &Config) -> Result<Agent> {
    if let Some(k) = AgentKind::parse(spec) {
        return Ok(Agent::Builtin(k));
    }
    if spec == "external" {
        return Ok(Agent::External(Endpoint::from_env(cfg).map_err(|e| usage(e.to_string()))?));
    }
    if let Some(path) = spec.strip_prefix("replay:") {
        return Ok(Agent::Replay(load_transcript(Path::new(path))?));
    }
    Err(usage(format!("unknown agent `{spec}`; expected oracle, random, noisy:P, external or replay:FILE")))
}

fn episode_name(task: &TaskInstruction, index: u64) -> String {
    format!("{}#{index}", task.id)
}

fn run_sequential(data: &Data, seeds: u64, limits: Limits, mut make: impl FnMut(&TaskInstruction, u64) -> Box<dyn AgentPort>) -> Result<Vec<EpisodeOutcome>> {
    let mut out = Vec::new();
    let total = data.tasks.len() as u64 * seeds;
    for t in &data.tasks {
        for s in 0..seeds {
            let mut agent = make(t, s);
            let o = run_episode(&data.scenes[&t.scene_id], t, &mut agent, limits, episode_seed(&t.id, s))?;
            out.push(o);
            progress("episode", json!({ "done": out.len(), "total": total, "task_id": t.id, "success": out.last().map(|o| o.result.success) }));
        }
    }
    Ok(out)
}

fn ratio(r: Option<Ratio<u64>>) -> String {
    r.map(|r| format!("{}/{}", r.numer(), r.denom())).unwrap_or_default()
}

fn write_table(path: &Path, rows: &[EpisodeMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("{}: cannot write", path.display()))?;
    w.write_record(["task_id", "category", "success", "infra_failed", "key_len", "predicted_len", "search_efficiency", "task_completeness", "rer"])?;
    for m in rows {
        w.write_record([
            m.task_id.clone(),
            format!("{:?}", m.category),
            m.success.to_string(),
            m.infra_failed.to_string(),
            m.key_len.to_string(),
            m.predicted_len.to_string(),
            ratio(m.search_efficiency),
            ratio(m.task_completeness),
            ratio(Some(m.rer)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn evaluate(cfg: &Config, a: &args::EvaluateArgs) -> Result<()> {
    let agent = parse_agent(&a.agent, cfg)?;
    let data = Data::load(&a.data)?;
    let limits = cfg.limits();
    let log: Transcript = Arc::new(Mutex::new(Vec::new()));
    let outcomes = match agent {
        Agent::Builtin(kind) => evaluate_suite(&data.tasks, &data.scenes, &kind, a.seeds, limits)?,
        Agent::External(endpoint) => run_sequential(&data, a.seeds, limits, |t, s| {
            Box::new(ExternalAgent::new(endpoint.clone(), episode_name(t, s), Arc::clone(&log)))
        })?,
        Agent::Replay(mut episodes) => run_sequential(&data, a.seeds, limits, |t, s| {
            Box::new(TranscriptReplay::new(episodes.remove(&episode_name(t, s)).unwrap_or_default()))
        })?,
    };
    let rows: Vec<EpisodeMetrics> = outcomes.iter().map(|o| o.metrics.clone()).collect();
    let report = aggregate(&rows);
    write_file(&a.report, &to_canonical_pretty(&report)?)?;
    if let Some(p) = &a.table {
        write_table(p, &rows)?;
    }
    if let Some(p) = &a.trajectories {
        let trajs: Vec<Trajectory> = outcomes.iter().map(|o| o.trajectory.clone()).collect();
        save_trajectories(p, &trajs).with_context(|| format!("{}: cannot write", p.display()))?;
    }
    if let Some(p) = &a.transcripts {
        save_transcript(p, &log.lock().expect("transcript lock")).with_context(|| format!("{}: cannot write", p.display()))?;
    }
    progress(
        "done",
        json!({
            "episodes": report.overall.episodes,
            "success_rate": report.overall.success_rate,
            "excluded_infra_failures": report.excluded_infra_failures,
        }),
    );
    Ok(())
}

fn stats(a: &args::StatsArgs) -> Result<()> {
    let data = Data::load(&a.data)?;
    let trajs = load_trajs(&a.trajectories)?;
    let s = corpus_stats(&trajs, &data.tasks, &data.scenes);
    write_out(None, &(to_canonical_pretty(&s)? + "\n"))
}

fn replay(a: &args::ReplayArgs) -> Result<()> {
    let data = Data::load(&a.data)?;
    let trajs = load_trajs(&a.trajectories)?;
    let traj = match &a.task {
        Some(id) => trajs.iter().find(|t| &t.task_id == id).with_context(|| format!("{}: no trajectory for task {id}", a.trajectories.display()))?,
        None => trajs.first().with_context(|| format!("{}: empty", a.trajectories.display()))?,
    };
    let task = data.task(&traj.task_id).with_context(|| format!("unknown task {}", traj.task_id))?;
    let scene = &data.scenes[&task.scene_id];
    let mut out = format!("task {} ({}) in {}\n{}\n", task.id, task.sub_task, scene.id, task.text);
    let mut step = 0;
    for r in &traj.records {
        let line = match &r.payload {
            Payload::Observation { observation } => format!("  obs: {}", observation.text().trim_end().replace('\n', "\n       ")),
            Payload::Feedback { observation } => format!("  feedback: {}", observation.text().trim_end()),
            Payload::Thought { thought } => format!("  [{}] {}", thought.kind.name(), thought.text),
            Payload::Action { action, effect, .. } => {
                step += 1;
                let fx = if effect.is_normal() { String::new() } else { format!("  ({effect:?})") };
                format!("{step:>3}> {}{fx}", action.render(scene))
            }
        };
        let mask = if r.loss_mask { "" } else { "  ·" };
        out.push_str(&line);
        out.push_str(mask);
        out.push('\n');
    }
    let key = derive_key_actions(task, scene)?.actions;
    let (_, judgment) = EpisodeResult::from_trajectory(task, &key, scene, traj);
    if judgment.success {
        out.push_str("result: success\n");
    } else {
        out.push_str(&format!("result: failure {:?}\n", judgment.reasons));
    }
    write_out(None, &out)
}

fn export(a: &args::ExportArgs) -> Result<()> {
    let data = Data::load(&a.data)?;
    let pairs = data.pair(&a.trajectories, load_trajs(&a.trajectories)?)?;
    let mut ds = Vec::with_capacity(pairs.len());
    for (i, (task, traj)) in pairs.iter().enumerate() {
        let d = export_dialogue(task, &data.scenes[&task.scene_id], traj).with_context(|| format!("{}:{}", a.trajectories.display(), i + 1))?;
        ds.push(d);
    }
    save_dialogues(&a.out, &ds).with_context(|| format!("{}: cannot write", a.out.display()))?;
    progress("done", json!({ "dialogues": ds.len() }));
    Ok(())
}

fn serve(cfg: &Config, a: &args::ServeArgs) -> Result<()> {
    let data = Data::load(&a.data)?;
    let mut ctx = ServerContext::new(data.scenes, data.tasks, cfg.limits());
    ctx.decision_timeout = a.decision_timeout.map(std::time::Duration::from_secs);
    if a.stdio {
        let stdin = std::io::stdin();
        serve_connection(stdin.lock(), std::io::stdout().lock(), &ctx)?;
        let report = ctx.report();
        if let Some(p) = &a.report {
            write_file(p, &to_canonical_pretty(&report)?)?;
        }
        progress("done", json!({ "episodes": report.overall.episodes, "success_rate": report.overall.success_rate }));
        return Ok(());
    }
    let server = Server::bind(a.listen.as_str(), Arc::new(ctx))?;
    progress("listening", json!({ "addr": server.local_addr()?.to_string() }));
    server.run()?;
    Ok(())
}

fn corpus(master: u64, cfg: &Config, a: &args::CorpusArgs) -> Result<()> {
    let stage = Stage::parse(&a.stage).ok_or_else(|| usage(format!("unknown stage `{}`", a.stage)))?;
    if a.verify {
        let out = verify_stage(&a.out)?;
        progress("verified", json!({ "stage": stage.slug(), "trajectories": out.trajectories.len(), "tasks": out.tasks.len() }));
        if out.manifest.stage != stage {
            bail!("{}: manifest is for {}, not {}", a.out.display(), out.manifest.stage.slug(), stage.slug());
        }
        return Ok(());
    }
    if !(a.scale > 0.0 && a.scale.is_finite()) {
        return Err(usage("--scale must be positive"));
    }
    let gen = GenConfig { scale: a.scale, count: a.count, ..cfg.gen_config() };
    let catalog = cfg.catalog()?;
    let out = generate_stage(stage, master, &gen, &catalog)?;
    write_stage(&a.out, &out)?;
    let m = &out.manifest;
    progress(
        "done",
        json!({
            "stage": stage.slug(),
            "tasks": m.tasks,
            "scenes": m.scenes,
            "trajectories": m.counts.trajectories,
            "rejected": m.rejected,
            "forged": m.forged.len(),
        }),
    );
    Ok(())
}
