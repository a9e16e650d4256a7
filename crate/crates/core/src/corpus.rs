//! Corpus generation per training stage, manifests, statistics and on-disk
//! layout.
//!
//! Seeds split hierarchically from one master value:
//! `stage = derive(master, stage.slug())`,
//! `scene_i = derive_indexed(stage, "scene", i)`,
//! `tasks = derive(scene_i, "tasks")`,
//! `trajectory = derive(derive(stage, "trajectory"), task.id)`.

mod dialogue;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use dialogue::{export_dialogue, import_dialogue, load_dialogues, save_dialogues, DialogueRecord, ExportTurn, ImportError, Span};

use crate::action::Verb;
use crate::catalog::Catalog;
use crate::forge::{forge_correction, induce_failure, inject_anomalies, rollout, AnomalySpec, FailureMode};
use crate::planner::{derive_key_actions, insert_search_process, ExploratoryPlan, KeyActionSequence, SearchPolicy};
use crate::reward::filter_trajectories;
use crate::scene::{generate_scene, load_scene, save_scene, RoomType, Scene, SceneSpec};
use crate::seed;
use crate::task::{save_tasks, synthesize_tasks, Category, SubTask, TaskInstruction};
use crate::thought::{ThoughtEngine, ThoughtPattern, TransitionModel, TransitionTable};
use crate::trajectory::{load_trajectories, save_trajectories, LoadError, Provenance, RecordKind, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "stage1_imitation")]
    Stage1Imitation,
    #[serde(rename = "stage2_rejection")]
    Stage2Rejection,
    #[serde(rename = "stage3_reflection")]
    Stage3Reflection,
    #[serde(rename = "test_set")]
    TestSet,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Stage1Imitation, Stage::Stage2Rejection, Stage::Stage3Reflection, Stage::TestSet];

    pub fn slug(self) -> &'static str {
        match self {
            Stage::Stage1Imitation => "stage1_imitation",
            Stage::Stage2Rejection => "stage2_rejection",
            Stage::Stage3Reflection => "stage3_reflection",
            Stage::TestSet => "test_set",
        }
    }

    /// Accepts the slug or a short alias (`stage1`, `1`, `test`).
    pub fn parse(s: &str) -> Option<Stage> {
        let s = s.to_ascii_lowercase();
        Stage::ALL.into_iter().find(|st| {
            let short = st.slug().split('_').next().unwrap_or_default();
            st.slug() == s || short == s || short.strip_prefix("stage") == Some(s.as_str())
        })
    }

    /// Full-scale number of tasks.
    pub fn preset_count(self) -> usize {
        match self {
            Stage::Stage1Imitation => 1128,
            Stage::Stage2Rejection => 6246,
            Stage::Stage3Reflection => 2016,
            Stage::TestSet => 809,
        }
    }

    /// Relative sub-task weights.
    pub fn default_mix(self) -> BTreeMap<SubTask, u32> {
        use SubTask::*;
        let weights: [u32; 11] = match self {
            // training stages lean on short single-goal tasks
            Stage::Stage1Imitation | Stage::Stage2Rejection | Stage::Stage3Reflection => [18, 16, 14, 14, 10, 8, 6, 6, 5, 2, 1],
            Stage::TestSet => [10, 10, 9, 9, 9, 9, 9, 9, 9, 9, 3],
        };
        let order = [
            ExposedSearch, EnclosedSearch, ExposedGrasp, EnclosedGrasp, ExposedToggle, Exp2ExpTransfer, Exp2EncTransfer,
            Enc2ExpTransfer, Enc2EncTransfer, SequentialTransfer, LongTermComplex,
        ];
        order.into_iter().zip(weights).collect()
    }

    /// Inclusive range of decoy navigations per trajectory.
    pub fn default_detours(self) -> (usize, usize) {
        match self {
            Stage::Stage1Imitation | Stage::TestSet => (0, 0),
            Stage::Stage2Rejection | Stage::Stage3Reflection => (1, 5),
        }
    }

    pub fn has_trajectories(self) -> bool {
        self != Stage::TestSet
    }
}

/// Knobs shared by every stage; `None` fields fall back to the stage default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    /// Multiplies the stage's preset task count.
    pub scale: f64,
    /// Overrides the preset count entirely.
    pub count: Option<usize>,
    pub tasks_per_scene: usize,
    pub receptacles: (usize, usize),
    pub items: (usize, usize),
    pub detours: Option<(usize, usize)>,
    pub allow_observe: bool,
    pub mix: Option<BTreeMap<SubTask, u32>>,
    /// Share of stage-3 trajectories built from an induced failure rather than
    /// an injected anomaly.
    pub correction_share: f64,
    pub transitions: Option<TransitionTable>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            scale: 1.0,
            count: None,
            tasks_per_scene: 10,
            receptacles: (6, 9),
            items: (7, 11),
            detours: None,
            allow_observe: true,
            mix: None,
            correction_share: 0.5,
            transitions: None,
        }
    }
}

impl GenConfig {
    pub fn scaled(scale: f64) -> Self {
        GenConfig { scale, ..Self::default() }
    }

    pub fn target_count(&self, stage: Stage) -> usize {
        self.count.unwrap_or_else(|| ((stage.preset_count() as f64 * self.scale).round() as usize).max(1))
    }

    pub fn model(&self) -> Result<TransitionModel, CorpusError> {
        let mut m = TransitionModel::default();
        if let Some(t) = &self.transitions {
            m.apply_overrides(t).map_err(|e| CorpusError::Config(e.to_string()))?;
        }
        Ok(m)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("task {task_id}: {message}")]
    Task { task_id: String, message: String },
    #[error("no tasks could be synthesized")]
    Empty,
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("manifest mismatch on {field}: stored {stored}, recomputed {recomputed}")]
    ManifestMismatch { field: String, stored: String, recomputed: String },
}

/// Counts that can be recomputed from the trajectory file alone.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub trajectories: usize,
    pub records: usize,
    pub actions: usize,
    pub thoughts: BTreeMap<ThoughtPattern, usize>,
}

impl Counts {
    pub fn of(trajs: &[Trajectory]) -> Self {
        let mut c = Counts { trajectories: trajs.len(), ..Default::default() };
        for t in trajs {
            c.records += t.records.len();
            c.actions += t.action_count();
            for th in t.thoughts() {
                *c.thoughts.entry(th.kind).or_default() += 1;
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedInfo {
    pub master: u64,
    pub stage: u64,
    /// Scene id → the seed its spec was generated from, in generation order.
    pub scenes: Vec<(String, u64)>,
}

/// How a stage-3 trajectory was forged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "forge", rename_all = "snake_case")]
pub enum ForgeEntry {
    Anomaly { task_id: String, specs: Vec<AnomalySpec> },
    Correction { task_id: String, mode: FailureMode, divergence: usize, mistake: Option<usize>, prefix_actions: usize },
}

impl ForgeEntry {
    pub fn task_id(&self) -> &str {
        match self {
            ForgeEntry::Anomaly { task_id, .. } | ForgeEntry::Correction { task_id, .. } => task_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub stage: Stage,
    pub counts: Counts,
    pub tasks: usize,
    pub scenes: usize,
    pub seeds: SeedInfo,
    pub transition_matrix: TransitionTable,
    pub catalog_version: String,
    /// Candidates the replay filter turned down.
    pub rejected: usize,
    /// Requested tasks no scene could supply, per sub-task type.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub shortfall: BTreeMap<SubTask, usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub forged: Vec<ForgeEntry>,
}

impl CorpusManifest {
    /// Recomputes the counts from `trajs` and compares them to the stored ones.
    pub fn verify(&self, trajs: &[Trajectory], tasks: usize) -> Result<(), CorpusError> {
        let c = Counts::of(trajs);
        let check = |field: &str, stored: String, recomputed: String| {
            if stored == recomputed {
                Ok(())
            } else {
                Err(CorpusError::ManifestMismatch { field: field.into(), stored, recomputed })
            }
        };
        check("trajectories", self.counts.trajectories.to_string(), c.trajectories.to_string())?;
        check("records", self.counts.records.to_string(), c.records.to_string())?;
        check("actions", self.counts.actions.to_string(), c.actions.to_string())?;
        check("thoughts", format!("{:?}", self.counts.thoughts), format!("{:?}", c.thoughts))?;
        check("tasks", self.tasks.to_string(), tasks.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub scenes: Vec<Scene>,
    /// Sorted by id.
    pub tasks: Vec<TaskInstruction>,
    /// One per task that yielded an accepted trajectory, sorted by task id.
    pub trajectories: Vec<Trajectory>,
    pub manifest: CorpusManifest,
}

impl StageOutput {
    pub fn scene_map(&self) -> BTreeMap<String, Scene> {
        self.scenes.iter().map(|s| (s.id.clone(), s.clone())).collect()
    }
}

/// Largest-remainder split of `total` by `weights`.
pub fn allocate(weights: &BTreeMap<SubTask, u32>, total: usize) -> BTreeMap<SubTask, usize> {
    let sum: u64 = weights.values().map(|&w| w as u64).sum();
    if sum == 0 {
        return BTreeMap::new();
    }
    let mut out: BTreeMap<SubTask, usize> = BTreeMap::new();
    let mut rema: Vec<(u64, SubTask)> = Vec::new();
    let mut given = 0;
    for (&t, &w) in weights {
        let exact = total as u64 * w as u64;
        let n = (exact / sum) as usize;
        out.insert(t, n);
        given += n;
        rema.push((exact % sum, t));
    }
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, t) in rema.into_iter().take(total - given) {
        *out.get_mut(&t).expect("present") += 1;
    }
    out
}

fn scene_spec(index: usize, scene_seed: u64, cfg: &GenConfig) -> SceneSpec {
    let mut rng = seed::rng(seed::derive(scene_seed, "shape"));
    let r = rng.random_range(cfg.receptacles.0..=cfg.receptacles.1.max(cfg.receptacles.0));
    let i = rng.random_range(cfg.items.0..=cfg.items.1.max(cfg.items.0));
    SceneSpec::new(RoomType::ALL[index % RoomType::ALL.len()], r, i, scene_seed)
}

/// Scenes and tasks for a stage, filling the sub-task quota scene by scene.
pub fn synthesize_stage_tasks(
    stage: Stage,
    master: u64,
    cfg: &GenConfig,
    catalog: &Catalog,
) -> (Vec<Scene>, Vec<TaskInstruction>, SeedInfo, BTreeMap<SubTask, usize>) {
    let stage_seed = seed::derive(master, stage.slug());
    let total = cfg.target_count(stage);
    let mix = cfg.mix.clone().unwrap_or_else(|| stage.default_mix());
    let mut remaining = allocate(&mix, total);
    let planned = total.div_ceil(cfg.tasks_per_scene.max(1)).max(1);
    let max_scenes = planned * 4 + 8;
    let mut scenes = Vec::new();
    let mut tasks = Vec::new();
    let mut seeds = SeedInfo { master, stage: stage_seed, scenes: Vec::new() };
    let mut i = 0;
    while remaining.values().any(|&n| n > 0) && i < max_scenes {
        let scene_seed = seed::derive_indexed(stage_seed, "scene", i as u64);
        let spec = scene_spec(i, scene_seed, cfg);
        let left = planned.saturating_sub(i).max(1);
        i += 1;
        let Ok(scene) = generate_scene(&spec, catalog) else { continue };
        let want: BTreeMap<SubTask, usize> = remaining.iter().map(|(&t, &n)| (t, n.div_ceil(left))).filter(|&(_, n)| n > 0).collect();
        let made = synthesize_tasks(&scene, &want, seed::derive(scene_seed, "tasks")).tasks;
        if made.is_empty() {
            continue;
        }
        for t in &made {
            if let Some(n) = remaining.get_mut(&t.sub_task) {
                *n = n.saturating_sub(1);
            }
        }
        seeds.scenes.push((scene.id.clone(), scene_seed));
        tasks.extend(made);
        scenes.push(scene);
    }
    tasks.sort_by(|a, b| a.id.cmp(&b.id));
    remaining.retain(|_, n| *n > 0);
    (scenes, tasks, seeds, remaining)
}

struct Built {
    trajectory: Option<Trajectory>,
    forge: Option<ForgeEntry>,
}

fn exploratory(task: &TaskInstruction, scene: &Scene, key: KeyActionSequence, range: (usize, usize), allow_observe: bool, s: u64) -> ExploratoryPlan {
    if range.1 == 0 {
        return ExploratoryPlan::unchanged(key);
    }
    let mut rng = seed::rng(seed::derive(s, "detours"));
    let n_detours = rng.random_range(range.0..=range.1.max(range.0));
    insert_search_process(&key, &task.goal, scene, SearchPolicy { n_detours, allow_observe }, seed::derive(s, "search"))
}

fn build_one(stage: Stage, task: &TaskInstruction, scene: &Scene, model: &TransitionModel, cfg: &GenConfig, s: u64) -> Result<Built, CorpusError> {
    let fail = |e: &dyn std::fmt::Display| CorpusError::Task { task_id: task.id.clone(), message: e.to_string() };
    let engine = ThoughtEngine::new(model.clone());
    let key = derive_key_actions(task, scene).map_err(|e| fail(&e))?;
    let range = cfg.detours.unwrap_or_else(|| stage.default_detours());
    let plan = exploratory(task, scene, key.clone(), range, cfg.allow_observe, s);
    let base = engine.annotate(task, &plan, scene, seed::derive(s, "annotate")).map_err(|e| fail(&e))?;
    if stage != Stage::Stage3Reflection {
        return Ok(Built { trajectory: Some(base), forge: None });
    }
    let mut rng = seed::rng(seed::derive(s, "forge"));
    if rng.random::<f64>() < cfg.correction_share {
        let mode = *FailureMode::ALL.choose(&mut rng).expect("non-empty");
        let path = KeyActionSequence { task_id: key.task_id.clone(), actions: plan.full.clone() };
        if let Some(failing) = induce_failure(scene, task, &path, mode, &mut rng) {
            let failed = rollout(&engine, task, scene, &failing, Provenance::Sampled, seed::derive(s, "failure"));
            if let Ok(c) = forge_correction(&engine, task, &key.actions, scene, &failed, seed::derive(s, "correct")) {
                let forge = ForgeEntry::Correction {
                    task_id: task.id.clone(),
                    mode,
                    divergence: c.divergence,
                    mistake: c.mistake,
                    prefix_actions: c.prefix_actions,
                };
                return Ok(Built { trajectory: Some(c.trajectory), forge: Some(forge) });
            }
        }
    }
    let (traj, specs) = inject_anomalies(&engine, task, scene, &base, 1, seed::derive(s, "anomaly")).map_err(|e| fail(&e))?;
    if specs.is_empty() {
        // nothing to perturb; a reflection corpus has no use for the plain trajectory
        return Ok(Built { trajectory: None, forge: None });
    }
    Ok(Built { trajectory: Some(traj), forge: Some(ForgeEntry::Anomaly { task_id: task.id.clone(), specs }) })
}

/// Generates a whole stage from the master seed. Output is identical for
/// identical inputs regardless of worker count.
pub fn generate_stage(stage: Stage, master: u64, cfg: &GenConfig, catalog: &Catalog) -> Result<StageOutput, CorpusError> {
    let model = cfg.model()?;
    let (scenes, tasks, seeds, shortfall) = synthesize_stage_tasks(stage, master, cfg, catalog);
    if tasks.is_empty() {
        return Err(CorpusError::Empty);
    }
    let scene_map: BTreeMap<String, Scene> = scenes.iter().map(|s| (s.id.clone(), s.clone())).collect();
    let traj_root = seed::derive(seeds.stage, "trajectory");
    let mut trajectories = Vec::new();
    let mut forged = Vec::new();
    let mut rejected = 0;
    if stage.has_trajectories() {
        let built = crate::par::map(&tasks, |t| build_one(stage, t, &scene_map[&t.scene_id], &model, cfg, seed::derive(traj_root, &t.id)));
        let mut candidates = Vec::new();
        let mut entries = Vec::new();
        for (t, b) in tasks.iter().zip(built) {
            let b = b?;
            if let Some(traj) = b.trajectory {
                candidates.push((t.clone(), traj));
                entries.push(b.forge);
            }
        }
        let report = filter_trajectories(&candidates, &scene_map).map_err(|e| CorpusError::Task { task_id: String::new(), message: e.to_string() })?;
        rejected = report.rejected.len();
        for i in report.accepted {
            trajectories.push(candidates[i].1.clone());
            forged.extend(entries[i].clone());
        }
    }
    let manifest = CorpusManifest {
        stage,
        counts: Counts::of(&trajectories),
        tasks: tasks.len(),
        scenes: scenes.len(),
        seeds,
        transition_matrix: model.into(),
        catalog_version: catalog.version.clone(),
        rejected,
        shortfall,
        forged,
    };
    Ok(StageOutput { scenes, tasks, trajectories, manifest })
}

// ------------------------------------------------------------------ statistics

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub counts: Counts,
    pub per_sub_task: BTreeMap<SubTask, usize>,
    pub per_category: BTreeMap<Category, usize>,
    pub per_verb: BTreeMap<Verb, usize>,
    /// Category → action count → trajectories.
    pub length_histogram: BTreeMap<Category, BTreeMap<usize, usize>>,
    /// Category → key-action count → tasks.
    pub key_length_histogram: BTreeMap<Category, BTreeMap<usize, usize>>,
    pub mean_actions: f64,
    pub mean_actions_per_category: BTreeMap<Category, f64>,
    /// Share of thoughts per pattern.
    pub thought_frequencies: BTreeMap<ThoughtPattern, f64>,
    /// Trajectories whose task was not supplied.
    pub unmatched: usize,
}

impl CorpusStats {
    pub fn modal_verb(&self) -> Option<Verb> {
        self.per_verb.iter().max_by_key(|(v, n)| (**n, std::cmp::Reverse(**v))).map(|(v, _)| *v)
    }
}

/// Distribution tables over `trajs`; `tasks` supplies types and key lengths.
pub fn corpus_stats(trajs: &[Trajectory], tasks: &[TaskInstruction], scenes: &BTreeMap<String, Scene>) -> CorpusStats {
    let by_id: BTreeMap<&str, &TaskInstruction> = tasks.iter().map(|t| (t.id.as_str(), t)).collect();
    let mut st = CorpusStats { counts: Counts::of(trajs), ..Default::default() };
    let mut sums: BTreeMap<Category, (usize, usize)> = BTreeMap::new();
    for t in trajs {
        let n = t.action_count();
        for r in &t.records {
            if let Some((a, _)) = r.as_action() {
                *st.per_verb.entry(a.verb).or_default() += 1;
            }
        }
        let Some(task) = by_id.get(t.task_id.as_str()) else {
            st.unmatched += 1;
            continue;
        };
        let cat = task.category();
        *st.per_sub_task.entry(task.sub_task).or_default() += 1;
        *st.per_category.entry(cat).or_default() += 1;
        *st.length_histogram.entry(cat).or_default().entry(n).or_default() += 1;
        let e = sums.entry(cat).or_default();
        e.0 += n;
        e.1 += 1;
    }
    for task in tasks {
        if let Some(k) = scenes.get(&task.scene_id).and_then(|s| derive_key_actions(task, s).ok()) {
            *st.key_length_histogram.entry(task.category()).or_default().entry(k.actions.len()).or_default() += 1;
        }
    }
    if !trajs.is_empty() {
        st.mean_actions = st.counts.actions as f64 / trajs.len() as f64;
    }
    st.mean_actions_per_category = sums.into_iter().map(|(c, (a, n))| (c, a as f64 / n as f64)).collect();
    let total: usize = st.counts.thoughts.values().sum();
    if total > 0 {
        st.thought_frequencies = st.counts.thoughts.iter().map(|(&p, &n)| (p, n as f64 / total as f64)).collect();
    }
    st
}

/// Share of records that train, by kind, as a sanity check on masks.
pub fn mask_summary(trajs: &[Trajectory]) -> BTreeMap<RecordKind, (usize, usize)> {
    let mut out: BTreeMap<RecordKind, (usize, usize)> = BTreeMap::new();
    for r in trajs.iter().flat_map(|t| &t.records) {
        let e = out.entry(r.kind()).or_default();
        e.1 += 1;
        if r.loss_mask {
            e.0 += 1;
        }
    }
    out
}

// ------------------------------------------------------------------ files

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TASKS_FILE: &str = "tasks.jsonl";
pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const SCENES_DIR: &str = "scenes";

fn io_err(path: &Path, e: impl std::fmt::Display) -> CorpusError {
    CorpusError::Io { path: path.display().to_string(), message: e.to_string() }
}

pub fn write_scenes(dir: &Path, scenes: &[Scene]) -> Result<(), CorpusError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for s in scenes {
        let p = dir.join(format!("{}.json", s.id));
        std::fs::write(&p, save_scene(s)).map_err(|e| io_err(&p, e))?;
    }
    Ok(())
}

/// Every `*.json` scene in `dir`, keyed by id.
pub fn read_scenes(dir: &Path) -> Result<BTreeMap<String, Scene>, CorpusError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = BTreeMap::new();
    for p in paths {
        let bytes = std::fs::read(&p).map_err(|e| io_err(&p, e))?;
        let s = load_scene(&bytes).map_err(|e| io_err(&p, e))?;
        out.insert(s.id.clone(), s);
    }
    Ok(out)
}

pub fn read_tasks(path: &Path) -> Result<Vec<TaskInstruction>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| io_err(Path::new(&format!("{}:{}", path.display(), n + 1)), e)))
        .collect()
}

/// `dir/{manifest.json, tasks.jsonl, trajectories.jsonl, scenes/}`.
pub fn write_stage(dir: &Path, out: &StageOutput) -> Result<(), CorpusError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_scenes(&dir.join(SCENES_DIR), &out.scenes)?;
    let tp = dir.join(TASKS_FILE);
    std::fs::write(&tp, save_tasks(&out.tasks)).map_err(|e| io_err(&tp, e))?;
    let jp = dir.join(TRAJECTORIES_FILE);
    save_trajectories(&jp, &out.trajectories).map_err(|e| io_err(&jp, e))?;
    let mp = dir.join(MANIFEST_FILE);
    let text = crate::canonical::to_canonical_pretty(&out.manifest).map_err(|e| io_err(&mp, e))?;
    std::fs::write(&mp, text).map_err(|e| io_err(&mp, e))
}

pub fn read_stage(dir: &Path) -> Result<StageOutput, CorpusError> {
    let mp = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mp).map_err(|e| io_err(&mp, e))?;
    let manifest: CorpusManifest = serde_json::from_str(&text).map_err(|e| io_err(&mp, e))?;
    let scenes = read_scenes(&dir.join(SCENES_DIR))?.into_values().collect();
    let tasks = read_tasks(&dir.join(TASKS_FILE))?;
    let trajectories = load_trajectories(&dir.join(TRAJECTORIES_FILE))?;
    Ok(StageOutput { scenes, tasks, trajectories, manifest })
}

/// Loads a stage directory and checks its manifest against the files.
pub fn verify_stage(dir: &Path) -> Result<StageOutput, CorpusError> {
    let out = read_stage(dir)?;
    out.manifest.verify(&out.trajectories, out.tasks.len())?;
    Ok(out)
}

#[cfg(test)]
mod tests;
