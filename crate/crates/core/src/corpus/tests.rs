use proptest::prelude::*;

use super::*;
use crate::action::Action;
use crate::forge::{forge_correction, rollout};
use crate::harness::{decision_text, run_episode, Limits, NoisyOracleAgent, Role};
use crate::scene::SceneBuilder;
use crate::task::instantiate;
use crate::trajectory::Payload;

fn small(stage: Stage, count: usize) -> StageOutput {
    let cfg = GenConfig { count: Some(count), ..GenConfig::default() };
    generate_stage(stage, 42, &cfg, Catalog::shared()).unwrap()
}

fn kitchen() -> (Scene, TaskInstruction) {
    let cat = Catalog::bundled();
    let mut b = SceneBuilder::new("corpus-kitchen", RoomType::Kitchen, &cat);
    let fridge = b.anchor("Fridge");
    let table = b.anchor("DiningTable");
    let cabinet = b.anchor("Cabinet");
    let apple = b.place("Apple", &fridge);
    b.place("Bread", &table);
    b.visible(&fridge).visible(&table).visible(&cabinet);
    let scene = b.build().unwrap();
    let bindings = [("A".to_string(), apple)].into_iter().collect();
    let task = instantiate(&scene, &SubTask::EnclosedGrasp.template(), &[], bindings, 0, "corpus-kitchen/grasp".into()).unwrap();
    (scene, task)
}

fn annotated(scene: &Scene, task: &TaskInstruction, seed: u64) -> Trajectory {
    let key = derive_key_actions(task, scene).unwrap();
    ThoughtEngine::default().annotate(task, &ExploratoryPlan::unchanged(key), scene, seed).unwrap()
}

#[test]
fn allocation_is_exact_and_proportional() {
    let mix = Stage::Stage1Imitation.default_mix();
    for total in [0, 1, 7, 113, 1128] {
        let a = allocate(&mix, total);
        assert_eq!(a.values().sum::<usize>(), total);
        let wsum: u32 = mix.values().sum();
        for (t, &n) in &a {
            let exact = total as f64 * mix[t] as f64 / wsum as f64;
            assert!((n as f64 - exact).abs() < 1.0, "{t:?} {n} vs {exact}");
        }
    }
}

proptest! {
    #[test]
    fn allocation_sums_for_any_weights(ws in proptest::collection::vec(0u32..50, 11), total in 0usize..5000) {
        let mix: BTreeMap<SubTask, u32> = SubTask::ALL.into_iter().zip(ws.clone()).collect();
        let a = allocate(&mix, total);
        if ws.iter().any(|&w| w > 0) {
            prop_assert_eq!(a.values().sum::<usize>(), total);
        }
        for (t, n) in a {
            prop_assert!(mix[&t] > 0 || n == 0);
        }
    }
}

#[test]
fn stage_names_round_trip() {
    for s in Stage::ALL {
        assert_eq!(Stage::parse(s.slug()), Some(s));
        assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.slug()));
    }
    assert_eq!(Stage::parse("stage2"), Some(Stage::Stage2Rejection));
    assert_eq!(Stage::parse("test"), Some(Stage::TestSet));
    assert_eq!(Stage::parse("3"), Some(Stage::Stage3Reflection));
    assert_eq!(Stage::parse("9"), None);
    assert_eq!(GenConfig::scaled(0.1).target_count(Stage::Stage1Imitation), 113);
}

#[test]
fn stage_one_synthesizes_the_requested_mix() {
    let out = small(Stage::Stage1Imitation, 60);
    assert_eq!(out.tasks.len(), 60, "shortfall {:?}", out.manifest.shortfall);
    assert_eq!(out.trajectories.len(), 60);
    assert!(out.tasks.windows(2).all(|w| w[0].id < w[1].id));
    assert!(out.trajectories.iter().zip(&out.tasks).all(|(t, k)| t.task_id == k.id));
    assert_eq!(out.manifest.rejected, 0);
    out.manifest.verify(&out.trajectories, out.tasks.len()).unwrap();
    let scenes = out.scene_map();
    for (t, traj) in out.tasks.iter().zip(&out.trajectories) {
        let key = derive_key_actions(t, &scenes[&t.scene_id]).unwrap();
        assert_eq!(traj.actions(), key.actions, "imitation data follows the key exactly");
    }
}

#[test]
fn later_stages_are_longer_and_stage_three_is_forged() {
    let s1 = small(Stage::Stage1Imitation, 40);
    let s2 = small(Stage::Stage2Rejection, 40);
    let s3 = small(Stage::Stage3Reflection, 40);
    let mean = |o: &StageOutput| o.manifest.counts.actions as f64 / o.manifest.counts.trajectories as f64;
    assert!(mean(&s2) > mean(&s1) + 1.0, "{} vs {}", mean(&s2), mean(&s1));
    assert!(mean(&s3) > mean(&s1) + 1.0);
    assert_eq!(s3.manifest.forged.len(), s3.trajectories.len());
    let kinds: std::collections::BTreeSet<&str> = s3
        .manifest
        .forged
        .iter()
        .map(|f| match f {
            ForgeEntry::Anomaly { .. } => "anomaly",
            ForgeEntry::Correction { .. } => "correction",
        })
        .collect();
    assert_eq!(kinds.len(), 2);
    for (f, t) in s3.manifest.forged.iter().zip(&s3.trajectories) {
        assert_eq!(f.task_id(), t.task_id);
        if let ForgeEntry::Correction { .. } = f {
            assert!(t.records.iter().any(|r| r.provenance == Provenance::ErroneousPrefix && !r.loss_mask));
        }
    }
}

#[test]
fn test_set_has_tasks_but_no_trajectories() {
    let out = small(Stage::TestSet, 30);
    assert_eq!(out.tasks.len(), 30);
    assert!(out.trajectories.is_empty());
    let cats: std::collections::BTreeSet<Category> = out.tasks.iter().map(|t| t.category()).collect();
    assert_eq!(cats.len(), 4);
}

#[test]
fn generation_is_seed_deterministic_and_seed_sensitive() {
    let cfg = GenConfig { count: Some(25), ..GenConfig::default() };
    let a = generate_stage(Stage::Stage2Rejection, 7, &cfg, Catalog::shared()).unwrap();
    let b = generate_stage(Stage::Stage2Rejection, 7, &cfg, Catalog::shared()).unwrap();
    assert_eq!(a, b);
    let c = generate_stage(Stage::Stage2Rejection, 8, &cfg, Catalog::shared()).unwrap();
    assert_ne!(a.tasks, c.tasks);
    assert_eq!(a.manifest.seeds.master, 7);
    assert_eq!(a.manifest.seeds.stage, seed::derive(7, "stage2_rejection"));
    assert_eq!(a.manifest.seeds.scenes[0].1, seed::derive_indexed(a.manifest.seeds.stage, "scene", 0));
}

#[test]
fn transition_overrides_reach_the_manifest() {
    let mut t = TransitionTable::new();
    let mut row = BTreeMap::new();
    row.insert("task_planning".to_string(), 0.7);
    row.insert("spatial_reasoning".to_string(), 0.3);
    t.insert("start".to_string(), row);
    let cfg = GenConfig { count: Some(5), transitions: Some(t), ..GenConfig::default() };
    let out = generate_stage(Stage::Stage1Imitation, 1, &cfg, Catalog::shared()).unwrap();
    assert_eq!(out.manifest.transition_matrix["start"]["task_planning"], 0.7);
    let mut bad = TransitionTable::new();
    bad.insert("nowhere".to_string(), BTreeMap::new());
    let cfg = GenConfig { transitions: Some(bad), ..cfg };
    assert!(matches!(generate_stage(Stage::Stage1Imitation, 1, &cfg, Catalog::shared()), Err(CorpusError::Config(_))));
}

#[test]
fn stage_directory_round_trip_and_verification() {
    let out = small(Stage::Stage3Reflection, 12);
    let dir = std::env::temp_dir().join(format!("homesim-corpus-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    write_stage(&dir, &out).unwrap();
    let back = verify_stage(&dir).unwrap();
    assert_eq!(back.tasks, out.tasks);
    assert_eq!(back.trajectories, out.trajectories);
    assert_eq!(back.manifest, out.manifest);
    assert_eq!(back.scene_map(), out.scene_map());

    // tamper with the trajectory file
    let mut fewer = out.trajectories.clone();
    fewer.pop();
    save_trajectories(&dir.join(TRAJECTORIES_FILE), &fewer).unwrap();
    assert!(matches!(verify_stage(&dir), Err(CorpusError::ManifestMismatch { .. })));
    std::fs::write(dir.join(TRAJECTORIES_FILE), "{\"broken\n").unwrap();
    let err = verify_stage(&dir).unwrap_err().to_string();
    assert!(err.contains(":1:"), "{err}");
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn stats_tables_are_consistent() {
    let out = small(Stage::Stage2Rejection, 40);
    let st = corpus_stats(&out.trajectories, &out.tasks, &out.scene_map());
    assert_eq!(st.unmatched, 0);
    let hist_total: usize = st.length_histogram.values().flat_map(|h| h.values()).sum();
    assert_eq!(hist_total, out.trajectories.len());
    let key_total: usize = st.key_length_histogram.values().flat_map(|h| h.values()).sum();
    assert_eq!(key_total, out.tasks.len());
    assert_eq!(st.per_verb.values().sum::<usize>(), st.counts.actions);
    assert_eq!(st.per_sub_task.values().sum::<usize>(), out.trajectories.len());
    assert_eq!(st.modal_verb(), Some(Verb::NavigateTo));
    let f: f64 = st.thought_frequencies.values().sum();
    assert!((f - 1.0).abs() < 1e-9);
    let masks = mask_summary(&out.trajectories);
    assert_eq!(masks[&RecordKind::Observation].0, 0);
    assert_eq!(masks[&RecordKind::Action].0, masks[&RecordKind::Action].1);
}

#[test]
fn stats_count_unknown_tasks() {
    let out = small(Stage::Stage1Imitation, 5);
    let st = corpus_stats(&out.trajectories, &out.tasks[1..], &out.scene_map());
    assert_eq!(st.unmatched, 1);
}

// ---- dialogue export ----

#[test]
fn three_action_trajectory_has_seven_turns() {
    let cat = Catalog::bundled();
    let mut b = SceneBuilder::new("three", RoomType::Kitchen, &cat);
    let table = b.anchor("DiningTable");
    let apple = b.place("Apple", &table);
    b.visible(&table);
    let scene = b.build().unwrap();
    let bindings = [("A".to_string(), apple)].into_iter().collect();
    let task = instantiate(&scene, &SubTask::ExposedGrasp.template(), &[], bindings, 0, "three/grasp".into()).unwrap();
    let traj = annotated(&scene, &task, 0);
    assert_eq!(traj.action_count(), 3);
    let d = export_dialogue(&task, &scene, &traj).unwrap();
    let roles: Vec<Role> = d.turns.iter().map(|t| t.role).collect();
    assert_eq!(
        roles,
        vec![Role::System, Role::User, Role::Assistant, Role::User, Role::Assistant, Role::User, Role::Assistant]
    );
    assert_eq!(d.turns[0].text, crate::prompt::SYSTEM);
    let last = d.turns.last().unwrap();
    assert!(last.text.ends_with(&decision_text("end")), "{}", last.text);
}

#[test]
fn every_training_span_is_a_thought_or_action_and_user_text_never_trains() {
    let out = small(Stage::Stage2Rejection, 10);
    let scenes = out.scene_map();
    for (task, traj) in out.tasks.iter().zip(&out.trajectories) {
        let d = export_dialogue(task, &scenes[&task.scene_id], traj).unwrap();
        for turn in &d.turns {
            for s in &turn.spans {
                if turn.role != Role::Assistant {
                    assert!(!s.loss);
                }
                if let Some(r) = s.record {
                    assert_eq!(s.loss, d.records[r].loss_mask);
                }
            }
        }
    }
}

#[test]
fn corrected_prefix_turns_do_not_train() {
    let (scene, task) = kitchen();
    let key = derive_key_actions(&task, &scene).unwrap().actions;
    let engine = ThoughtEngine::default();
    let failed = rollout(&engine, &task, &scene, &[Action::navigate("Cabinet_1"), Action::open("Cabinet_1"), Action::end()], Provenance::Sampled, 0);
    let c = forge_correction(&engine, &task, &key, &scene, &failed, 0).unwrap();
    let d = export_dialogue(&task, &scene, &c.trajectory).unwrap();
    let assistant: Vec<&ExportTurn> = d.turns.iter().filter(|t| t.role == Role::Assistant).collect();
    for t in &assistant[..c.prefix_actions] {
        assert!(t.spans.iter().all(|s| !s.loss), "{}", t.text);
    }
    let first_fixed = assistant[c.prefix_actions];
    assert!(first_fixed.spans.iter().all(|s| s.loss));
    assert!(first_fixed.spans.iter().any(|s| matches!(d.records[s.record.unwrap()].payload, Payload::Thought { .. })));
}

#[test]
fn export_import_export_is_byte_identical() {
    let out = small(Stage::Stage3Reflection, 16);
    let scenes = out.scene_map();
    let mut exports = Vec::new();
    for (task, traj) in out.tasks.iter().zip(&out.trajectories) {
        let scene = &scenes[&task.scene_id];
        let d = export_dialogue(task, scene, traj).unwrap();
        let back = import_dialogue(&d).unwrap();
        assert_eq!(&back, traj);
        let again = export_dialogue(task, scene, &back).unwrap();
        assert_eq!(crate::canonical::to_canonical_line(&d).unwrap(), crate::canonical::to_canonical_line(&again).unwrap());
        exports.push(d);
    }
    let path = std::env::temp_dir().join(format!("homesim-dialogue-{}.jsonl", std::process::id()));
    save_dialogues(&path, &exports).unwrap();
    let loaded = load_dialogues(&path).unwrap();
    assert_eq!(loaded, exports);
    std::fs::remove_file(&path).unwrap();
}

#[test]
fn sampled_episodes_export_their_raw_replies() {
    let (scene, task) = kitchen();
    let mut agent = NoisyOracleAgent::new(&scene, &task.goal, 0.3, 3);
    let ep = run_episode(&scene, &task, &mut agent, Limits::default(), 3).unwrap();
    let d = export_dialogue(&task, &scene, &ep.trajectory).unwrap();
    let from_export: Vec<&str> = d.turns.iter().filter(|t| t.role == Role::Assistant).map(|t| t.text.as_str()).collect();
    let from_episode: Vec<&str> = ep.dialogue.iter().filter(|t| t.role == Role::Assistant).map(|t| t.text.as_str()).collect();
    assert_eq!(from_export, from_episode);
    let users: Vec<&str> = d.turns.iter().filter(|t| t.role == Role::User).map(|t| t.text.as_str()).collect();
    let ep_users: Vec<&str> = ep.dialogue.iter().filter(|t| t.role == Role::User).map(|t| t.text.as_str()).collect();
    assert_eq!(users, ep_users);
    assert_eq!(import_dialogue(&d).unwrap(), ep.trajectory);
}

#[test]
fn import_rejects_tampering() {
    let (scene, task) = kitchen();
    let traj = annotated(&scene, &task, 2);
    let d = export_dialogue(&task, &scene, &traj).unwrap();

    let mut t = d.clone();
    let turn = t.turns.iter_mut().find(|t| t.role == Role::Assistant && t.spans.len() > 1).unwrap();
    turn.text.replace_range(0..1, "#");
    assert!(matches!(import_dialogue(&t), Err(ImportError::TextMismatch { .. })));

    let mut m = d.clone();
    m.turns[2].spans[0].loss = !m.turns[2].spans[0].loss;
    assert!(matches!(import_dialogue(&m), Err(ImportError::MaskMismatch { .. })));

    let mut c = d.clone();
    c.records.pop();
    assert!(matches!(import_dialogue(&c), Err(ImportError::Coverage(_))));

    let mut b = d.clone();
    b.turns[1].spans[0].end = 1 << 30;
    assert!(matches!(import_dialogue(&b), Err(ImportError::Bounds { .. })));

    let mut bad = traj.clone();
    bad.records.pop();
    assert!(export_dialogue(&task, &scene, &bad).is_err());
}
