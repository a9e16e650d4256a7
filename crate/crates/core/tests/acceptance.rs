//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use homesim_core::corpus::{
    export_dialogue, generate_stage, import_dialogue, load_dialogues, read_scenes, save_dialogues, write_scenes,
    write_stage, ForgeEntry, GenConfig, Stage, StageOutput,
};
use homesim_core::exemplar::exemplar;
use homesim_core::harness::{evaluate_suite, parse_decision, tag_bodies, AgentKind, Limits, ParseError};
use homesim_core::planner::derive_key_actions;
use homesim_core::prompt::{self, FeedbackTemplate};
use homesim_core::reward::{episode_metrics, repetitive_exploration_rate, EpisodeResult};
use homesim_core::thought::{default_transition_model, Gates, ThoughtPattern, ThoughtState};
use homesim_core::trajectory::{Provenance, RecordKind, Trajectory};
use homesim_core::{seed, Action, Catalog, Scene, SubTask, TaskInstruction, Verb};
use num_rational::Ratio;
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("took {took:.2?}, limit {limit:?}"))
}

// ------------------------------------------------------------------ key fidelity

/// Exemplar key rows as printed in the published task table.
const KEY_ROWS: [(SubTask, &[&str]); 9] = [
    (SubTask::ExposedSearch, &["navigate to CounterTop", "end"]),
    (SubTask::EnclosedSearch, &["navigate to Fridge", "open Fridge", "end"]),
    (SubTask::ExposedToggle, &["navigate to Desk", "toggle Laptop", "end"]),
    (SubTask::ExposedGrasp, &["navigate to SideTable", "pickup CreditCard", "end"]),
    (SubTask::EnclosedGrasp, &["navigate to Drawer", "open Drawer", "pickup CreditCard", "end"]),
    (SubTask::Exp2ExpTransfer, &["navigate to Sidetable", "pickup AlarmClock", "navigate to Shelf", "put in Shelf", "end"]),
    (
        SubTask::Exp2EncTransfer,
        &["navigate to CounterTop", "pickup Bowl", "navigate to Cabinet", "open Cabinet", "put in Cabinet", "end"],
    ),
    (
        SubTask::Enc2ExpTransfer,
        &["navigate to Cabinet", "open Cabinet", "pickup Candle", "close Cabinet", "navigate to Bathtub", "put in Bathtub", "end"],
    ),
    (
        SubTask::Enc2EncTransfer,
        &[
            "navigate to Fridge",
            "open Fridge",
            "pickup Potato",
            "close Fridge",
            "navigate to Microwave",
            "open Microwave",
            "put in Microwave",
            "end",
        ],
    ),
];

const VERB_PHRASES: [&str; 6] = ["navigate to ", "put in ", "pickup ", "toggle ", "close ", "open "];

/// Maps a printed class name onto the catalog spelling.
fn canonical_row(row: &str, catalog: &Catalog) -> String {
    for v in VERB_PHRASES {
        if let Some(class) = row.strip_prefix(v) {
            return format!("{v}{}", catalog.normalize(class).unwrap_or(class));
        }
    }
    row.to_string()
}

fn key_fidelity() -> Outcome {
    let start = Instant::now();
    let catalog = Catalog::shared();
    for (sub, row) in KEY_ROWS {
        let (scene, task) = exemplar(sub);
        let key = derive_key_actions(&task, &scene).map_err(|e| format!("{sub:?}: {e}"))?;
        let got: Vec<String> = key.actions.iter().map(|a| a.render_class(&scene)).collect();
        let want: Vec<String> = row.iter().map(|r| canonical_row(r, catalog)).collect();
        ensure(got == want, || format!("{sub:?}: got {got:?}, want {want:?}"))?;
    }
    within_time(start, Duration::from_secs(1))?;
    Ok(format!("{} sub-task rows match", KEY_ROWS.len()))
}

// ------------------------------------------------------------------ metrics

type ClassKey = (Verb, Option<String>);

fn class_key(scene: &Scene, a: &Action) -> ClassKey {
    (a.verb, a.target.as_ref().map(|t| scene.object(t).map_or(t.clone(), |o| o.class_name.clone())))
}

fn metric_ground_truth() -> Outcome {
    let rer = repetitive_exploration_rate(&["a", "b", "b", "c", "c"]);
    ensure(rer == Ratio::new(2, 5), || format!("rer([a,b,b,c,c]) = {rer}"))?;

    let subs = [
        SubTask::ExposedSearch,
        SubTask::EnclosedSearch,
        SubTask::ExposedToggle,
        SubTask::ExposedGrasp,
        SubTask::EnclosedGrasp,
        SubTask::Exp2ExpTransfer,
        SubTask::Exp2EncTransfer,
        SubTask::Enc2ExpTransfer,
        SubTask::Enc2EncTransfer,
        SubTask::SequentialTransfer,
    ];
    let mut episodes = 0;
    for sub in subs {
        let (scene, task) = exemplar(sub);
        let key = derive_key_actions(&task, &scene).map_err(|e| e.to_string())?.actions;
        let body: Vec<&Action> = key.iter().filter(|a| a.verb != Verb::End).collect();
        let first_stop = body[0].target.clone();
        let navigable: Vec<&String> = scene.objects.iter().filter(|o| o.attrs.navigable).map(|o| &o.id).collect();
        let mut pool: Vec<&String> = navigable.iter().copied().filter(|id| Some(*id) != first_stop.as_ref()).take(2).collect();
        if pool.is_empty() {
            pool = navigable;
        }
        ensure(!pool.is_empty(), || format!("{sub:?}: exemplar has no receptacle"))?;
        for k in 0..5usize {
            // k wandering stops before the key path, cycling through the pool
            let mut actions: Vec<Action> = (0..k).map(|i| Action::navigate(pool[i % pool.len()].clone())).collect();
            actions.extend(key.iter().cloned());
            let (result, judgment) = EpisodeResult::evaluate(&task, &key, &scene, &actions, &[]);
            ensure(judgment.success, || format!("{sub:?} k={k}: {:?}", judgment.reasons))?;
            let m = episode_metrics(&task, &key, &result, &scene);

            let predicted: Vec<&Action> = actions.iter().filter(|a| a.verb != Verb::End).collect();
            let key_set: BTreeSet<ClassKey> = body.iter().map(|a| class_key(&scene, a)).collect();
            let hits = predicted.iter().filter(|a| key_set.contains(&class_key(&scene, a))).count() as u64;
            let want_eff = Ratio::new(body.len() as u64, (body.len() + k) as u64);
            let want_comp = Ratio::new(hits, predicted.len() as u64);
            let navs: Vec<&String> = actions.iter().filter(|a| a.verb == Verb::NavigateTo).filter_map(|a| a.target.as_ref()).collect();
            let repeats = (0..navs.len()).filter(|&i| navs[..i].contains(&navs[i])).count() as u64;
            let want_rer = Ratio::new(repeats, navs.len() as u64);

            ensure(m.search_efficiency == Some(want_eff), || format!("{sub:?} k={k}: efficiency {:?} != {want_eff}", m.search_efficiency))?;
            ensure(m.task_completeness == Some(want_comp), || format!("{sub:?} k={k}: completeness {:?} != {want_comp}", m.task_completeness))?;
            ensure(m.rer == want_rer, || format!("{sub:?} k={k}: rer {} != {want_rer}", m.rer))?;
            episodes += 1;
        }
    }
    Ok(format!("rer = 2/5; {episodes} constructed episodes agree"))
}

// ------------------------------------------------------------------ oracle suite

fn oracle_suite() -> Outcome {
    let start = Instant::now();
    let cfg = GenConfig { count: Some(240), ..GenConfig::default() };
    let out = generate_stage(Stage::TestSet, 7, &cfg, Catalog::shared()).map_err(|e| e.to_string())?;
    ensure(out.tasks.len() >= 200, || format!("only {} tasks", out.tasks.len()))?;
    let cats: BTreeSet<_> = out.tasks.iter().map(|t| t.category()).collect();
    ensure(cats.len() == 4, || format!("categories {cats:?}"))?;
    let scenes = out.scene_map();
    let limits = Limits::default();

    let run = |agent: &AgentKind| evaluate_suite(&out.tasks, &scenes, agent, 1, limits).map_err(|e| e.to_string());
    let rate = |rows: &[homesim_core::harness::EpisodeOutcome]| rows.iter().filter(|o| o.result.success).count() as f64 / rows.len() as f64;

    let oracle = run(&AgentKind::Oracle)?;
    for o in &oracle {
        let m = &o.metrics;
        ensure(o.result.success, || format!("oracle failed {}: {:?}", m.task_id, o.judgment.reasons))?;
        ensure(m.search_efficiency == Some(Ratio::from_integer(1)), || format!("{}: efficiency {:?}", m.task_id, m.search_efficiency))?;
        ensure(m.task_completeness == Some(Ratio::from_integer(1)), || format!("{}: completeness {:?}", m.task_id, m.task_completeness))?;
    }
    let random = run(&AgentKind::Random)?;
    let noisy = run(&AgentKind::Noisy { p: 0.3 })?;
    ensure(random.len() >= 200 && noisy.len() >= 200, || "fewer than 200 episodes".into())?;
    let (r, n) = (rate(&random), rate(&noisy));
    ensure(r < n && n < 1.0, || format!("ordering violated: random {r:.3}, noisy {n:.3}"))?;
    within_time(start, Duration::from_secs(300))?;
    Ok(format!("{} tasks; oracle 1.000, noisy(0.3) {n:.3}, random {r:.3}", out.tasks.len()))
}

// ------------------------------------------------------------------ corpus shape

fn band(sub: SubTask) -> (usize, usize) {
    use homesim_core::task::Category::*;
    match sub.category() {
        Search => (1, 9),
        Manipulate => (2, 11),
        Transport => (3, 14),
        Composite => (8, usize::MAX),
    }
}

fn mean_actions(out: &StageOutput) -> f64 {
    let total: usize = out.trajectories.iter().map(Trajectory::action_count).sum();
    total as f64 / out.trajectories.len().max(1) as f64
}

fn corpus_shape() -> Outcome {
    let catalog = Catalog::shared();
    let cfg = GenConfig::scaled(0.1);
    let s1 = generate_stage(Stage::Stage1Imitation, 1, &cfg, catalog).map_err(|e| e.to_string())?;
    ensure(s1.trajectories.len() >= 100, || format!("stage 1 produced {}", s1.trajectories.len()))?;
    let by_id: BTreeMap<&str, &TaskInstruction> = s1.tasks.iter().map(|t| (t.id.as_str(), t)).collect();
    for t in &s1.trajectories {
        let sub = by_id[t.task_id.as_str()].sub_task;
        let (lo, hi) = band(sub);
        let n = t.action_count();
        ensure((lo..=hi).contains(&n), || format!("{} ({sub:?}) has {n} key actions, band {lo}..{hi}", t.task_id))?;
    }
    let mut report = Vec::new();
    let m = mean_actions(&s1);
    ensure((3.5..=4.7).contains(&m), || format!("stage 1 mean {m:.2} outside 3.5..=4.7"))?;
    report.push(format!("stage1 {m:.2}"));
    for (stage, target) in [(Stage::Stage2Rejection, 7.33), (Stage::Stage3Reflection, 8.63)] {
        let out = generate_stage(stage, 1, &cfg, catalog).map_err(|e| e.to_string())?;
        let m = mean_actions(&out);
        ensure((m - target).abs() <= 0.15 * target, || format!("{} mean {m:.2} vs {target}", stage.slug()))?;
        report.push(format!("{} {m:.2} (n={})", stage.slug(), out.trajectories.len()));
    }
    Ok(report.join(", "))
}

// ------------------------------------------------------------------ thought calibration

fn thought_calibration() -> Outcome {
    use ThoughtPattern::*;
    let start = Instant::now();
    let model = default_transition_model();
    let mut rng = seed::rng(2024);
    // counts[state][choice], choice 5 = act; tallied here rather than through ThoughtStats
    let mut counts: BTreeMap<&str, [u64; 6]> = BTreeMap::new();
    let column = |p: ThoughtPattern| ThoughtPattern::ALL.iter().position(|&q| q == p).unwrap();
    let mut transitions = 0u64;
    for i in 0..30_000 {
        let (first, name) = if i % 3 == 0 { (ThoughtState::Start, "start") } else { (ThoughtState::AfterAction, "action") };
        // failed search just happened and a sub-goal was reached: every pattern is admissible
        let seg = model.sample_segment(first, Gates::OPEN, &mut rng);
        let mut from = name;
        for &p in &seg {
            counts.entry(from).or_default()[column(p)] += 1;
            transitions += 1;
            from = p.name();
        }
        if seg.len() < 3 {
            counts.entry(from).or_default()[5] += 1;
            transitions += 1;
        }
    }
    let freq = |from: &str, p: ThoughtPattern| {
        let row = counts.get(from).copied().unwrap_or_default();
        row[column(p)] as f64 / row.iter().sum::<u64>().max(1) as f64
    };
    let cells = [
        ("start", TaskPlanning, 0.55),
        ("start", SpatialReasoning, 0.45),
        ("action", SpatialReasoning, 0.42),
        ("action", SelfReflection, 0.33),
        ("action", DoubleVerification, 0.03),
        (SpatialReasoning.name(), DoubleVerification, 0.06),
    ];
    ensure(transitions >= 10_000, || format!("only {transitions} transitions"))?;
    let mut worst = 0.0f64;
    for (from, p, want) in cells {
        let got = freq(from, p);
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() <= 0.02, || format!("{from} -> {}: {got:.4} vs {want}", p.name()))?;
    }
    within_time(start, Duration::from_secs(30))?;
    Ok(format!("{transitions} transitions, max deviation {worst:.4}"))
}

// ------------------------------------------------------------------ forge

/// Which records train: thoughts and actions the model should imitate.
fn expected_mask(kind: RecordKind, provenance: Provenance) -> bool {
    let trains = matches!(kind, RecordKind::Thought | RecordKind::Action);
    let imitable = !matches!(provenance, Provenance::InjectedAnomaly | Provenance::ErroneousPrefix);
    trains && imitable
}

fn forge_correctness() -> Outcome {
    let catalog = Catalog::shared();
    let mut anomalies = 0;
    let mut corrections = 0;
    let mut master = 0;
    while (anomalies < 500 || corrections < 200) && master < 4 {
        let cfg = GenConfig { count: Some(800), ..GenConfig::default() };
        let out = generate_stage(Stage::Stage3Reflection, 100 + master, &cfg, catalog).map_err(|e| e.to_string())?;
        master += 1;
        let scenes = out.scene_map();
        let tasks: BTreeMap<&str, &TaskInstruction> = out.tasks.iter().map(|t| (t.id.as_str(), t)).collect();
        let forged: BTreeMap<&str, &ForgeEntry> = out.manifest.forged.iter().map(|f| (f.task_id(), f)).collect();
        for traj in &out.trajectories {
            let task = tasks[traj.task_id.as_str()];
            let scene = &scenes[&traj.scene_id];
            let key = derive_key_actions(task, scene).map_err(|e| e.to_string())?.actions;
            let (_, judgment) = EpisodeResult::from_trajectory(task, &key, scene, traj);
            ensure(judgment.success, || format!("{} re-judged as failure: {:?}", traj.task_id, judgment.reasons))?;
            for (i, r) in traj.records.iter().enumerate() {
                let want = expected_mask(r.kind(), r.provenance);
                ensure(r.loss_mask == want, || format!("{} record {i}: mask {} for {:?}/{:?}", traj.task_id, r.loss_mask, r.kind(), r.provenance))?;
            }
            match forged.get(traj.task_id.as_str()) {
                Some(ForgeEntry::Anomaly { specs, .. }) => {
                    let injected = traj.records.iter().filter(|r| r.provenance == Provenance::InjectedAnomaly).count();
                    let reflections = traj.records.iter().filter(|r| r.provenance == Provenance::ReflectiveThought).count();
                    ensure(injected >= specs.len() && reflections >= specs.len(), || format!("{}: anomaly records missing", traj.task_id))?;
                    anomalies += specs.len();
                }
                Some(ForgeEntry::Correction { prefix_actions, .. }) => {
                    let first_live = traj.records.iter().position(|r| r.provenance != Provenance::ErroneousPrefix).unwrap_or(0);
                    let prefix = &traj.records[..first_live];
                    let prefix_acts = prefix.iter().filter(|r| r.kind() == RecordKind::Action).count();
                    ensure(prefix_acts == *prefix_actions, || format!("{}: prefix has {prefix_acts} actions, manifest {prefix_actions}", traj.task_id))?;
                    ensure(prefix.iter().all(|r| !r.loss_mask), || format!("{}: prefix carries loss", traj.task_id))?;
                    let next = &traj.records[first_live];
                    ensure(next.provenance == Provenance::ReflectiveThought && next.loss_mask, || {
                        format!("{}: prefix is not followed by a training reflection", traj.task_id)
                    })?;
                    let suffix = &traj.records[first_live + 1..];
                    ensure(
                        suffix.iter().all(|r| r.loss_mask == matches!(r.kind(), RecordKind::Thought | RecordKind::Action)),
                        || format!("{}: suffix mask", traj.task_id),
                    )?;
                    corrections += 1;
                }
                None => return Err(format!("{} has no forge entry", traj.task_id)),
            }
        }
    }
    ensure(anomalies >= 500, || format!("only {anomalies} anomaly injections"))?;
    ensure(corrections >= 200, || format!("only {corrections} corrections"))?;
    Ok(format!("{anomalies} anomalies and {corrections} corrections re-judge as success"))
}

// ------------------------------------------------------------------ determinism

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("homesim-acceptance-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn dir_bytes(dir: &std::path::Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap_or_default());
            }
        }
    }
    out
}

fn fuzz_parser() -> Result<(), String> {
    let (scene, _) = exemplar(SubTask::EnclosedSearch);
    let re = regex::Regex::new(r"(?i)<decisionmaking>([^<]*)</decisionmaking>").unwrap();
    let pieces = [
        "<DecisionMaking>", "</DecisionMaking>", "<decisionMAKING>", "</decisionmaking>", "<", ">", "/", "open ", "Fridge",
        "navigate to ", "end", "observe", " ", "\n", "ä", "put in ", "Apple", "<Decision", "Making>", "\u{200b}",
    ];
    let mut rng = seed::rng(99);
    for _ in 0..100_000 {
        let mut s = String::new();
        for _ in 0..rng.random_range(0..10) {
            if rng.random::<f64>() < 0.2 {
                s.push(char::from_u32(rng.random_range(0..0xD7FF)).unwrap_or('?'));
            } else {
                s.push_str(pieces[rng.random_range(0..pieces.len())]);
            }
        }
        let parsed = std::panic::catch_unwind(|| (tag_bodies(&s).len(), parse_decision(&s, &scene, Catalog::shared())));
        let (n, r) = parsed.map_err(|_| format!("parser panicked on {s:?}"))?;
        let want = re.captures_iter(&s).count();
        ensure(n == want, || format!("{s:?}: {n} tags, grammar says {want}"))?;
        ensure((r == Err(ParseError::NoTag)) == (want == 0), || format!("{s:?}: {r:?}"))?;
    }
    Ok(())
}

fn determinism() -> Outcome {
    let catalog = Catalog::shared();
    let cfg = GenConfig { count: Some(80), ..GenConfig::default() };
    let mut dirs = Vec::new();
    for (i, stage) in [Stage::Stage2Rejection, Stage::Stage2Rejection, Stage::Stage3Reflection, Stage::Stage3Reflection].into_iter().enumerate() {
        let out = generate_stage(stage, 5, &cfg, catalog).map_err(|e| e.to_string())?;
        let dir = scratch(&format!("run{i}"));
        write_stage(&dir, &out).map_err(|e| e.to_string())?;
        dirs.push((dir, out));
    }
    for pair in dirs.chunks(2) {
        let (a, b) = (dir_bytes(&pair[0].0), dir_bytes(&pair[1].0));
        ensure(!a.is_empty() && a == b, || format!("{} reruns differ", pair[0].1.manifest.stage.slug()))?;
    }
    let other = generate_stage(Stage::Stage2Rejection, 6, &cfg, catalog).map_err(|e| e.to_string())?;
    ensure(other.trajectories != dirs[0].1.trajectories, || "a different master seed gave the same corpus".into())?;

    let out = &dirs[2].1;
    let scene_dir = scratch("scenes");
    write_scenes(&scene_dir, &out.scenes).map_err(|e| e.to_string())?;
    let back = read_scenes(&scene_dir).map_err(|e| e.to_string())?;
    ensure(back == out.scene_map(), || "scene round trip changed scenes".into())?;

    let scenes = out.scene_map();
    let tasks: BTreeMap<&str, &TaskInstruction> = out.tasks.iter().map(|t| (t.id.as_str(), t)).collect();
    let dialogues = out
        .trajectories
        .iter()
        .map(|t| export_dialogue(tasks[t.task_id.as_str()], &scenes[&t.scene_id], t))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let path = scratch("dialogues.jsonl");
    save_dialogues(&path, &dialogues).map_err(|e| e.to_string())?;
    let first = std::fs::read(&path).map_err(|e| e.to_string())?;
    let loaded = load_dialogues(&path).map_err(|e| e.to_string())?;
    let mut again = Vec::new();
    for (d, t) in loaded.iter().zip(&out.trajectories) {
        let traj = import_dialogue(d).map_err(|e| format!("{}: {e}", d.task_id))?;
        ensure(&traj == t, || format!("{}: imported trajectory differs", d.task_id))?;
        again.push(export_dialogue(tasks[traj.task_id.as_str()], &scenes[&traj.scene_id], &traj).map_err(|e| e.to_string())?);
    }
    save_dialogues(&path, &again).map_err(|e| e.to_string())?;
    ensure(std::fs::read(&path).map_err(|e| e.to_string())? == first, || "dialogue re-export is not byte-identical".into())?;

    fuzz_parser()?;
    for (d, _) in &dirs {
        let _ = std::fs::remove_dir_all(d);
    }
    let _ = std::fs::remove_dir_all(&scene_dir);
    let _ = std::fs::remove_file(&path);
    Ok(format!("reruns identical; {} scenes and {} dialogues round-trip; 100000 fuzz strings", back.len(), again.len()))
}

// ------------------------------------------------------------------ prompts

fn prompt_fidelity() -> Outcome {
    let (action, object) = ("navigate to Fridge", "Fridge");
    let mut cases = vec![
        ("system", prompt::SYSTEM.to_string(), include_str!("golden/system.txt")),
        ("initialization", prompt::render_initialization("<image>", "put the Apple in the Fridge"), include_str!("golden/initialization.txt")),
        ("interaction", prompt::render_interaction(action), include_str!("golden/interaction.txt")),
    ];
    let feedback = [
        (FeedbackTemplate::NotNavigable, include_str!("golden/feedback_1.txt")),
        (FeedbackTemplate::Unavailable, include_str!("golden/feedback_2.txt")),
        (FeedbackTemplate::NavigationMismatch, include_str!("golden/feedback_3.txt")),
        (FeedbackTemplate::InteractionMismatch, include_str!("golden/feedback_4.txt")),
    ];
    for (t, golden) in feedback {
        cases.push(("feedback", prompt::render_feedback(t, action, object), golden));
    }
    let exemplar_line = "<DecisionMaking>observe</DecisionMaking>";
    ensure(include_str!("golden/initialization.txt").contains(exemplar_line), || "golden initialization lacks the format exemplar".into())?;
    for (name, got, want) in &cases {
        ensure(got == want, || format!("{name} differs from golden:\n--- got\n{got}\n--- want\n{want}"))?;
    }
    Ok(format!("{} templates byte-match", cases.len()))
}

// ------------------------------------------------------------------ throughput

fn throughput() -> Outcome {
    let start = Instant::now();
    let cfg = GenConfig { count: Some(1000), ..GenConfig::default() };
    let out = generate_stage(Stage::Stage2Rejection, 3, &cfg, Catalog::shared()).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let n = out.trajectories.len();
    ensure(n >= 1000, || format!("only {n} trajectories accepted ({} rejected)", out.manifest.rejected))?;
    ensure(out.trajectories.iter().all(|t| t.thoughts().next().is_some()), || "unannotated trajectory".into())?;
    within_time(start, Duration::from_secs(60))?;
    Ok(format!("{n} trajectories in {took:.2?}"))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("key_action_fidelity", key_fidelity),
        ("metric_ground_truth", metric_ground_truth),
        ("oracle_suite", oracle_suite),
        ("corpus_shape", corpus_shape),
        ("thought_calibration", thought_calibration),
        ("forge_correctness", forge_correctness),
        ("determinism_and_round_trips", determinism),
        ("prompt_fidelity", prompt_fidelity),
        ("throughput", throughput),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        match result {
            Ok(detail) => println!("PASS {name} ({took:.2?}): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({took:.2?}): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
