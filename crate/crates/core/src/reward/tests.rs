use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;
use crate::catalog::Catalog;
use crate::exemplar::exemplar;
use crate::planner::{insert_search_process, ExploratoryPlan, SearchPolicy};
use crate::scene::{generate_scene, RoomType, SceneSpec};
use crate::task::{synthesize_tasks, SubTask};
use crate::thought::{annotate, default_transition_model};

fn r(n: u64, d: u64) -> Ratio<u64> {
    Ratio::new(n, d)
}

#[test]
fn exploration_rate_examples() {
    assert_eq!(repetitive_exploration_rate(&["a", "b", "b", "c", "c"]), r(2, 5));
    assert_eq!(repetitive_exploration_rate(&["a", "b", "c"]), r(0, 1));
    assert_eq!(repetitive_exploration_rate(&["a", "a", "a", "a"]), r(3, 4));
    assert_eq!(repetitive_exploration_rate::<&str>(&[]), r(0, 1));
}

proptest! {
    #[test]
    fn exploration_rate_is_one_minus_unique_share(navs in prop::collection::vec(0u8..6, 1..30)) {
        let unique: std::collections::BTreeSet<u8> = navs.iter().copied().collect();
        let expected = Ratio::from_integer(1u64) - Ratio::new(unique.len() as u64, navs.len() as u64);
        prop_assert_eq!(repetitive_exploration_rate(&navs), expected);
    }

    #[test]
    fn completeness_matches_counting(key in prop::collection::vec(0u8..5, 1..5), predicted in prop::collection::vec(0u8..8, 1..12)) {
        let k = |x: &u8| ActionKey { verb: Verb::NavigateTo, class: Some(format!("C{x}")) };
        let key_keys: Vec<ActionKey> = key.iter().map(k).collect();
        let pred_keys: Vec<ActionKey> = predicted.iter().map(k).collect();
        let mut hits = 0u64;
        for p in &predicted {
            if key.iter().any(|x| x == p) {
                hits += 1;
            }
        }
        prop_assert_eq!(task_completeness(&key_keys, &pred_keys).unwrap(), Ratio::new(hits, predicted.len() as u64));
    }
}

#[test]
fn efficiency_examples() {
    assert_eq!(search_efficiency(4, 8).unwrap().clamped, r(1, 2));
    assert_eq!(search_efficiency(4, 4).unwrap().clamped, r(1, 1));
    let early = search_efficiency(4, 3).unwrap();
    assert_eq!((early.raw, early.clamped), (r(4, 3), r(1, 1)));
    assert_eq!(search_efficiency(4, 0), Err(MetricError::ZeroPredicted));
}

#[test]
fn completeness_example() {
    let k = |c: &str| ActionKey { verb: Verb::Open, class: Some(c.into()) };
    let key = [k("a"), k("b"), k("c")];
    assert_eq!(task_completeness(&key, &[k("a"), k("x"), k("b"), k("c")]).unwrap(), r(3, 4));
    assert_eq!(task_completeness(&key, &[k("c"), k("a")]).unwrap(), r(1, 1));
    assert_eq!(task_completeness(&key, &[]), Err(MetricError::ZeroPredicted));
}

#[test]
fn key_execution_is_judged_a_success_with_full_scores() {
    for sub in SubTask::ALL {
        let (scene, task) = exemplar(sub);
        let key = derive_key_actions(&task, &scene).unwrap().actions;
        let (result, j) = EpisodeResult::evaluate(&task, &key, &scene, &key, &[]);
        assert!(j.success, "{sub:?}: {:?}", j.reasons);
        assert!(result.success && result.ended);
        let m = episode_metrics(&task, &key, &result, &scene);
        assert_eq!(m.search_efficiency, Some(r(1, 1)));
        assert_eq!(m.task_completeness, Some(r(1, 1)));
    }
}

#[test]
fn detours_keep_success_and_lower_efficiency() {
    let (scene, task) = exemplar(SubTask::Enc2EncTransfer);
    let key = derive_key_actions(&task, &scene).unwrap();
    let plan = insert_search_process(&key, &task.goal, &scene, SearchPolicy { n_detours: 2, allow_observe: true }, 5);
    assert_eq!(plan.inserted.len(), 2);
    let (result, j) = EpisodeResult::evaluate(&task, &key.actions, &scene, &plan.full, &[]);
    assert!(j.success, "{:?}", j.reasons);
    let m = episode_metrics(&task, &key.actions, &result, &scene);
    let k = key.actions.iter().filter(|a| a.verb != Verb::End).count() as u64;
    assert_eq!(m.search_efficiency, Some(r(k, k + 2)));
    assert!(m.task_completeness.unwrap() < r(1, 1));
}

#[test]
fn skipping_the_fridge_open_names_the_missing_action() {
    let (scene, task) = exemplar(SubTask::EnclosedSearch);
    let key = derive_key_actions(&task, &scene).unwrap().actions;
    let predicted = vec![Action::navigate("Fridge_1"), Action::end()];
    let (_, j) = EpisodeResult::evaluate(&task, &key, &scene, &predicted, &[]);
    assert!(!j.success);
    assert!(j.reasons.contains(&Reason::MissingKeyAction { index: 1, action: "open Fridge".into() }), "{:?}", j.reasons);
    assert!(j.reasons.contains(&Reason::GoalUnmet { goal: 0 }));
}

#[test]
fn legs_out_of_order_violate_the_composite_order() {
    let (scene, task) = exemplar(SubTask::SequentialTransfer);
    let key = derive_key_actions(&task, &scene).unwrap().actions;
    // second leg first, then the first leg
    let mut swapped: Vec<Action> = key[4..8].to_vec();
    swapped.extend_from_slice(&key[..4]);
    swapped.push(Action::end());
    let (_, j) = EpisodeResult::evaluate(&task, &key, &scene, &swapped, &[]);
    assert!(!j.success);
    assert!(j.reasons.contains(&Reason::OrderViolated), "{:?}", j.reasons);
    assert!(!j.reasons.iter().any(|r| matches!(r, Reason::GoalUnmet { .. })));
}

#[test]
fn running_out_of_steps_is_reported() {
    let (scene, task) = exemplar(SubTask::ExposedSearch);
    let key = derive_key_actions(&task, &scene).unwrap().actions;
    let predicted = vec![Action::bare(Verb::Observe); 45];
    let (result, j) = EpisodeResult::evaluate(&task, &key, &scene, &predicted, &[]);
    assert_eq!(result.predicted_actions.len(), crate::sim::DEFAULT_STEP_LIMIT as usize);
    assert!(j.reasons.contains(&Reason::StepLimit));
    let stopped = vec![Action::navigate("CounterTop_1")];
    let (_, j) = EpisodeResult::evaluate(&task, &key, &scene, &stopped, &[]);
    assert!(j.reasons.contains(&Reason::NoTermination));
}

fn corpus() -> (BTreeMap<String, Scene>, Vec<TaskInstruction>) {
    let cat = Catalog::bundled();
    let mix: BTreeMap<SubTask, usize> = SubTask::ALL.into_iter().map(|s| (s, 1)).collect();
    let mut scenes = BTreeMap::new();
    let mut tasks = Vec::new();
    for seed in 0..12u64 {
        let scene = generate_scene(&SceneSpec::new(RoomType::ALL[(seed % 4) as usize], 5, 6, seed), &cat).unwrap();
        tasks.extend(synthesize_tasks(&scene, &mix, seed).tasks);
        scenes.insert(scene.id.clone(), scene);
    }
    (scenes, tasks)
}

#[test]
fn oracle_trajectories_are_all_accepted() {
    let (scenes, tasks) = corpus();
    let model = default_transition_model();
    let candidates: Vec<(TaskInstruction, Trajectory)> = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let scene = &scenes[&t.scene_id];
            let key = derive_key_actions(t, scene).unwrap();
            let plan = insert_search_process(&key, &t.goal, scene, SearchPolicy { n_detours: i % 3, allow_observe: true }, i as u64);
            (t.clone(), annotate(t, &plan, scene, &model, i as u64).unwrap())
        })
        .collect();
    let report = filter_trajectories(&candidates, &scenes).unwrap();
    assert!(report.rejected.is_empty(), "{:?}", report.rejected.first());
    assert_eq!(report.accepted.len(), candidates.len());
    assert_eq!(filter_trajectories(&candidates, &scenes).unwrap(), report, "replay-deterministic");
}

#[test]
fn wrong_open_without_recovery_is_rejected() {
    let (scene, task) = exemplar(SubTask::Enc2EncTransfer);
    let scenes: BTreeMap<String, Scene> = [(scene.id.clone(), scene.clone())].into_iter().collect();
    let mut key = derive_key_actions(&task, &scene).unwrap();
    key.actions = vec![Action::navigate("Microwave_1"), Action::open("Microwave_1"), Action::end()];
    let traj = annotate(&task, &ExploratoryPlan::unchanged(key), &scene, &default_transition_model(), 0).unwrap();
    let report = filter_trajectories(&[(task, traj)], &scenes).unwrap();
    let reasons = &report.rejected[0].1;
    assert!(reasons.iter().any(|r| matches!(r, Reason::MissingKeyAction { .. })), "{reasons:?}");
}

#[test]
fn truncated_trajectory_is_rejected_and_scene_mismatch_errors() {
    let (scene, task) = exemplar(SubTask::ExposedGrasp);
    let scenes: BTreeMap<String, Scene> = [(scene.id.clone(), scene.clone())].into_iter().collect();
    let key = derive_key_actions(&task, &scene).unwrap();
    let mut traj = annotate(&task, &ExploratoryPlan::unchanged(key), &scene, &default_transition_model(), 0).unwrap();
    while traj.records.last().is_some_and(|r| r.as_action().is_none_or(|(a, _)| a.verb == Verb::End)) {
        traj.records.pop();
    }
    let report = filter_trajectories(&[(task.clone(), traj.clone())], &scenes).unwrap();
    let reasons = &report.rejected[0].1;
    assert!(reasons.contains(&Reason::NoTermination), "{reasons:?}");
    assert!(reasons.iter().any(|r| matches!(r, Reason::Grammar { .. })));

    traj.scene_id = "elsewhere".into();
    assert!(matches!(filter_trajectories(&[(task, traj)], &scenes), Err(FilterError::SceneMismatch { .. })));
}

#[test]
fn report_averages_successes_and_everything() {
    let row = |cat, success, eff: Option<Ratio<u64>>, infra| EpisodeMetrics {
        task_id: "t".into(),
        category: cat,
        success,
        infra_failed: infra,
        key_len: 2,
        predicted_len: 4,
        search_efficiency: eff,
        raw_efficiency: eff,
        task_completeness: eff,
        rer: r(0, 1),
    };
    let rows = vec![
        row(Category::Search, true, Some(r(1, 1)), false),
        row(Category::Search, true, Some(r(1, 2)), false),
        row(Category::Transport, false, Some(r(1, 4)), false),
        row(Category::Transport, false, None, true),
    ];
    let report = aggregate(&rows);
    assert_eq!(report.excluded_infra_failures, 1);
    assert_eq!(report.overall.episodes, 3);
    assert!((report.overall.success_rate - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(report.overall.search_efficiency, 0.75);
    assert_eq!(report.overall.search_efficiency_all, 0.5833333333333334);
    assert_eq!(report.per_category[&Category::Transport].successes, 0);
    assert_eq!(report.per_category[&Category::Transport].search_efficiency, 0.0);
    assert!(serde_json::to_string(&report).unwrap().contains("\"Search\""));
}
