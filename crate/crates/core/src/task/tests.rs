use proptest::prelude::*;

use super::*;
use crate::catalog::Catalog;
use crate::exemplar::exemplar;
use crate::scene::{generate_scene, RoomType, SceneBuilder, SceneSpec};

fn fridge_scene() -> Scene {
    let cat = Catalog::bundled();
    let mut b = SceneBuilder::new("f", RoomType::Kitchen, &cat);
    let fridge = b.anchor("Fridge");
    let counter = b.anchor("CounterTop");
    b.anchor("Microwave");
    b.place("Apple", &fridge);
    b.place("Egg", &fridge);
    b.place("Bread", &counter);
    b.build().unwrap()
}

fn bind(pairs: &[(&str, &str)]) -> Bindings {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

#[test]
fn enclosed_grasp_accepts_apple_in_fridge() {
    let scene = fridge_scene();
    let proof = check_constraint(&SubTask::EnclosedGrasp.template(), &bind(&[("A", "Apple_1")]), &scene).unwrap();
    assert!(proof.pass());
    assert_eq!(proof.lines.len(), 2);
}

#[test]
fn exposed_search_rejects_egg_in_fridge() {
    let scene = fridge_scene();
    let err = check_constraint(&SubTask::ExposedSearch.template(), &bind(&[("A", "Egg_1")]), &scene).unwrap_err();
    match err {
        ConstraintError::Violation { failed, .. } => assert_eq!(failed, vec!["¬Openable(Parent(A))".to_string()]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn sequential_rejects_same_item_twice() {
    let (scene, task) = exemplar(SubTask::SequentialTransfer);
    let mut b = task.bindings.clone();
    b.insert("A2".into(), b["A1"].clone());
    let err = check_constraint(&SubTask::SequentialTransfer.template(), &b, &scene).unwrap_err();
    match err {
        ConstraintError::Violation { failed, .. } => assert!(failed.contains(&"Different(A1, A2)".to_string()), "{failed:?}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn unknown_object_is_reported() {
    let scene = fridge_scene();
    let err = check_constraint(&SubTask::ExposedSearch.template(), &bind(&[("A", "Ghost_1")]), &scene).unwrap_err();
    assert_eq!(err, ConstraintError::UnknownObject("Ghost_1".into()));
}

#[test]
fn two_hidden_items_one_destination() {
    let scene = fridge_scene();
    let found = enumerate_bindings(&SubTask::Enc2EncTransfer.template(), &scene);
    assert_eq!(
        found,
        vec![bind(&[("A", "Apple_1"), ("B", "Microwave_1")]), bind(&[("A", "Egg_1"), ("B", "Microwave_1")])]
    );
}

#[test]
fn no_toggleables_no_toggle_tasks() {
    let cat = Catalog::bundled();
    let mut b = SceneBuilder::new("n", RoomType::Bedroom, &cat);
    let bed = b.anchor("Bed");
    b.place("Pillow", &bed);
    let scene = b.build().unwrap();
    assert!(enumerate_bindings(&SubTask::ExposedToggle.template(), &scene).is_empty());
}

/// Direct attribute checks, written independently of the constraint algebra.
fn oracle(sub: SubTask, scene: &Scene, t: &[usize]) -> bool {
    let a = |i: usize| scene.objects[i].attrs;
    let popen = |i: usize| scene.initial_parent(i).is_some_and(|p| a(p).openable);
    let dest = |x: usize, b: usize| a(b).receptacle && !a(b).pickupable && scene.initial_parent(x) != Some(b);
    let pick = |x: usize| a(x).pickupable;
    use SubTask::*;
    match sub {
        ExposedSearch | ExposedGrasp => pick(t[0]) && !popen(t[0]),
        EnclosedSearch | EnclosedGrasp => pick(t[0]) && popen(t[0]),
        ExposedToggle => a(t[0]).toggleable && !popen(t[0]),
        Exp2ExpTransfer => pick(t[0]) && !popen(t[0]) && !a(t[1]).openable && dest(t[0], t[1]),
        Exp2EncTransfer => pick(t[0]) && !popen(t[0]) && a(t[1]).openable && dest(t[0], t[1]),
        Enc2ExpTransfer => pick(t[0]) && popen(t[0]) && !a(t[1]).openable && dest(t[0], t[1]),
        Enc2EncTransfer => pick(t[0]) && popen(t[0]) && a(t[1]).openable && dest(t[0], t[1]),
        SequentialTransfer => {
            let leg = |x: usize, b: usize| pick(x) && dest(x, b) && !(popen(x) && a(b).openable);
            leg(t[0], t[1]) && leg(t[2], t[3]) && t[0] != t[2]
        }
        LongTermComplex => unreachable!(),
    }
}

fn brute_force(sub: SubTask, scene: &Scene) -> Vec<Bindings> {
    let template = sub.template();
    let k = template.slots.len();
    let mut ids: Vec<usize> = (0..scene.len()).collect();
    ids.sort_by(|&x, &y| scene.objects[x].id.cmp(&scene.objects[y].id));
    let mut out = Vec::new();
    let total = ids.len().pow(k as u32);
    for n in 0..total {
        let mut rest = n;
        let mut tuple = vec![0; k];
        for slot in (0..k).rev() {
            tuple[slot] = ids[rest % ids.len()];
            rest /= ids.len();
        }
        if oracle(sub, scene, &tuple) {
            out.push(
                template
                    .slots
                    .iter()
                    .zip(&tuple)
                    .map(|(s, &i)| (s.clone(), scene.objects[i].id.clone()))
                    .collect(),
            );
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn enumeration_matches_brute_force(seed in 0u64..10_000, room in 0usize..4, n_r in 2usize..6, n_i in 1usize..6) {
        let scene = generate_scene(&SceneSpec::new(RoomType::ALL[room], n_r, n_i, seed), &Catalog::bundled()).unwrap();
        prop_assume!(scene.len() <= 12);
        for sub in SubTask::ALL.into_iter().filter(|&s| s != SubTask::LongTermComplex) {
            let found = enumerate_bindings(&sub.template(), &scene);
            prop_assert_eq!(&found, &brute_force(sub, &scene), "{:?}", sub);
            for b in &found {
                prop_assert!(check_constraint(&sub.template(), b, &scene).is_ok());
            }
        }
    }
}

#[test]
fn exemplar_texts() {
    let cases = [
        (SubTask::ExposedSearch, "Could you please find the Apple in the room?"),
        (SubTask::EnclosedSearch, "Could you please find the Apple in the room?"),
        (SubTask::ExposedToggle, "Would you mind powering on the Laptop for me?"),
        (SubTask::ExposedGrasp, "I want to pick up a CreditCard from the room, can you help me?"),
        (SubTask::EnclosedGrasp, "Would it be possible for you to pick up a CreditCard from the room?"),
        (SubTask::Exp2ExpTransfer, "Could you please put the AlarmClock on the Shelf?"),
        (SubTask::Exp2EncTransfer, "Would you mind placing the Bowl in the Cabinet, please?"),
        (SubTask::Enc2ExpTransfer, "Is it okay to put the Candle on the Bathtub?"),
        (SubTask::Enc2EncTransfer, "May I ask you to put the Potato in the Microwave?"),
        (
            SubTask::SequentialTransfer,
            "Could you please first place the TeddyBear on the CoffeeTable, and then place the Pen on the GarbageCan?",
        ),
    ];
    for (sub, text) in cases {
        assert_eq!(exemplar(sub).1.text, text, "{sub:?}");
    }
    let (_, long) = exemplar(SubTask::LongTermComplex);
    assert_eq!(
        long.text,
        "First, put the Bread in the Fridge, then put the Apple on the SinkBasin, after that turn on the Faucet, \
         and finally put the Mug on the CoffeeMachine."
    );
}

#[test]
fn every_template_has_three_forms_and_declared_slots() {
    for sub in SubTask::ALL {
        let t = sub.template();
        assert!(t.text_forms.len() >= 3, "{sub:?}");
        let mut used = Vec::new();
        t.constraint.slots(&mut used);
        for s in used {
            assert!(t.slots.contains(&s), "{sub:?} uses undeclared {s}");
        }
        for form in &t.text_forms {
            for s in &t.slots {
                assert!(form.contains(&format!("{{{s}}}")) || form.contains(&format!("{{at:{s}}}")), "{sub:?}: {form}");
            }
        }
    }
}

fn corpus_scene(seed: u64) -> Scene {
    let room = RoomType::ALL[(seed % 4) as usize];
    generate_scene(&SceneSpec::new(room, 6, 8, seed), &Catalog::bundled()).unwrap()
}

fn full_mix(n: usize) -> BTreeMap<SubTask, usize> {
    SubTask::ALL.into_iter().map(|s| (s, n)).collect()
}

#[test]
fn synthesis_is_deterministic_and_sound() {
    for seed in 0..12 {
        let scene = corpus_scene(seed);
        let a = synthesize_tasks(&scene, &full_mix(3), seed);
        let b = synthesize_tasks(&scene, &full_mix(3), seed);
        assert_eq!(a.tasks, b.tasks);
        for t in &a.tasks {
            t.verify(&scene).unwrap();
            assert!(!t.text.is_empty());
            match t.sub_task {
                SubTask::SequentialTransfer => assert_eq!(t.goal.len(), 2),
                SubTask::LongTermComplex => {
                    assert_eq!(t.goal.len(), 4);
                    assert_eq!(t.composition.len(), 4);
                    assert!(t.composition.iter().all(|p| LONG_TERM_PARTS.contains(p)));
                    let distinct: std::collections::BTreeSet<_> = t.composition.iter().collect();
                    assert_eq!(distinct.len(), 4);
                }
                _ => assert_eq!(t.goal.len(), 1),
            }
        }
    }
}

#[test]
fn long_term_tasks_appear_on_generated_scenes() {
    let produced: usize = (0..20)
        .map(|seed| {
            let scene = generate_scene(&SceneSpec::new(RoomType::Kitchen, 8, 10, seed), &Catalog::bundled()).unwrap();
            synthesize_tasks(&scene, &BTreeMap::from([(SubTask::LongTermComplex, 2)]), seed).tasks.len()
        })
        .sum();
    assert!(produced >= 20, "{produced}");
}

#[test]
fn shortfall_is_reported_not_fatal() {
    let cat = Catalog::bundled();
    let mut b = SceneBuilder::new("s", RoomType::Kitchen, &cat);
    let fridge = b.anchor("Fridge");
    b.anchor("CounterTop");
    b.place("Apple", &fridge);
    b.place("Egg", &fridge);
    let scene = b.build().unwrap();
    let out = synthesize_tasks(&scene, &BTreeMap::from([(SubTask::ExposedToggle, 2), (SubTask::EnclosedSearch, 5)]), 1);
    assert!(out.issues.contains(&SynthIssue::NoValidBinding(SubTask::ExposedToggle)));
    assert!(out.issues.contains(&SynthIssue::Short { sub_task: SubTask::EnclosedSearch, requested: 5, produced: 2 }));
    assert_eq!(out.tasks.len(), 2);
}

#[test]
fn mix_parsing() {
    let mix = parse_mix("enc2enc=5, exposed_search=2,Enc2EncTransfer=1").unwrap();
    assert_eq!(mix[&SubTask::Enc2EncTransfer], 6);
    assert_eq!(mix[&SubTask::ExposedSearch], 2);
    assert!(parse_mix("fly=2").is_err());
    assert!(parse_mix("enc2enc").is_err());
}

#[test]
fn task_file_round_trip() {
    let scene = corpus_scene(3);
    let tasks = synthesize_tasks(&scene, &full_mix(2), 3).tasks;
    let text = save_tasks(&tasks);
    assert_eq!(load_tasks(&text).unwrap(), tasks);
}

#[test]
fn polite_request_style() {
    assert_eq!(CannedStyles.paraphrase("find the Apple", "polite-request").unwrap(), "Would you mind finding the Apple for me?");
    assert_eq!(
        CannedStyles.paraphrase("put the Potato in the Microwave", "polite-request").unwrap(),
        "Would you mind putting the Potato in the Microwave for me?"
    );
    assert_eq!(CannedStyles.paraphrase("find the Apple", "lost-item").unwrap(), "I can not find my Apple, can you help me find it?");
    assert!(matches!(CannedStyles.paraphrase("find the Apple", "haiku"), Err(ParaphraseError::UnknownStyle(_))));
}

struct Down;
impl Paraphraser for Down {
    fn paraphrase(&self, _: &str, _: &str) -> Result<String, ParaphraseError> {
        Err(ParaphraseError::ExternalUnavailable("connection refused".into()))
    }
}

#[test]
fn fallback_matches_builtin_style() {
    let p = FallbackParaphraser::new(Down);
    for style in CannedStyles::STYLES {
        assert_eq!(p.paraphrase("find the Apple", style), CannedStyles.paraphrase("find the Apple", style));
    }
}

#[test]
fn paraphrasing_leaves_goals_alone() {
    let scene = corpus_scene(5);
    let plain = synthesize_tasks(&scene, &full_mix(2), 5);
    let styles: Vec<String> = CannedStyles::STYLES.iter().map(|s| s.to_string()).collect();
    let opts = SynthOptions { paraphrase_rate: 1.0, styles, paraphraser: &CannedStyles };
    let styled = synthesize_with(&scene, &full_mix(2), 5, &opts);
    assert_eq!(plain.tasks.len(), styled.tasks.len());
    for (a, b) in plain.tasks.iter().zip(&styled.tasks) {
        assert_eq!(a.goal, b.goal);
        assert_eq!(a.bindings, b.bindings);
        assert!(b.style.is_some());
    }
}
