//! Instruction templates, the constraint algebra they are checked with, binding
//! enumeration and instruction synthesis.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::goal::Goal;
use crate::planner;
use crate::scene::Scene;
use crate::seed;
use crate::sim;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Search,
    Manipulate,
    Transport,
    Composite,
}

impl Category {
    pub const ALL: [Category; 4] =
        [Category::Search, Category::Manipulate, Category::Transport, Category::Composite];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SubTask {
    ExposedSearch,
    EnclosedSearch,
    ExposedGrasp,
    EnclosedGrasp,
    ExposedToggle,
    Exp2ExpTransfer,
    Exp2EncTransfer,
    Enc2ExpTransfer,
    Enc2EncTransfer,
    SequentialTransfer,
    LongTermComplex,
}

/// Sub-task types that may make up a long-term complex task.
pub const LONG_TERM_PARTS: [SubTask; 5] = [
    SubTask::ExposedToggle,
    SubTask::Exp2ExpTransfer,
    SubTask::Enc2ExpTransfer,
    SubTask::Enc2EncTransfer,
    SubTask::Exp2EncTransfer,
];

impl SubTask {
    pub const ALL: [SubTask; 11] = [
        SubTask::ExposedSearch,
        SubTask::EnclosedSearch,
        SubTask::ExposedGrasp,
        SubTask::EnclosedGrasp,
        SubTask::ExposedToggle,
        SubTask::Exp2ExpTransfer,
        SubTask::Exp2EncTransfer,
        SubTask::Enc2ExpTransfer,
        SubTask::Enc2EncTransfer,
        SubTask::SequentialTransfer,
        SubTask::LongTermComplex,
    ];

    pub fn category(self) -> Category {
        use SubTask::*;
        match self {
            ExposedSearch | EnclosedSearch => Category::Search,
            ExposedGrasp | EnclosedGrasp | ExposedToggle => Category::Manipulate,
            Exp2ExpTransfer | Exp2EncTransfer | Enc2ExpTransfer | Enc2EncTransfer => Category::Transport,
            SequentialTransfer | LongTermComplex => Category::Composite,
        }
    }

    pub fn short_name(self) -> &'static str {
        use SubTask::*;
        match self {
            ExposedSearch => "exposed_search",
            EnclosedSearch => "enclosed_search",
            ExposedGrasp => "exposed_grasp",
            EnclosedGrasp => "enclosed_grasp",
            ExposedToggle => "exposed_toggle",
            Exp2ExpTransfer => "exp2exp",
            Exp2EncTransfer => "exp2enc",
            Enc2ExpTransfer => "enc2exp",
            Enc2EncTransfer => "enc2enc",
            SequentialTransfer => "sequential",
            LongTermComplex => "long_term",
        }
    }

    /// Accepts the short name or the variant name, case-insensitively.
    pub fn parse(s: &str) -> Option<SubTask> {
        SubTask::ALL.into_iter().find(|t| {
            t.short_name().eq_ignore_ascii_case(s) || format!("{t:?}").eq_ignore_ascii_case(s)
        })
    }

    pub fn template(self) -> TaskTemplate {
        builtin_template(self)
    }
}

impl fmt::Display for SubTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

// ---------------------------------------------------------------- constraints

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Term {
    Slot(String),
    Parent(String),
}

impl Term {
    fn rename(&self, f: &dyn Fn(&str) -> String) -> Term {
        match self {
            Term::Slot(s) => Term::Slot(f(s)),
            Term::Parent(s) => Term::Parent(f(s)),
        }
    }

    fn slot(&self) -> &str {
        match self {
            Term::Slot(s) | Term::Parent(s) => s,
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Slot(s) => f.write_str(s),
            Term::Parent(s) => write!(f, "Parent({s})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pred {
    Pickupable,
    Openable,
    Toggleable,
    Receptacle,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Constraint {
    Is(Pred, Term),
    Different(Term, Term),
    Not(Box<Constraint>),
    And(Vec<Constraint>),
    Or(Vec<Constraint>),
}

/// What a term points at once its slot is bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Node {
    Room,
    Obj(usize),
}

fn is(p: Pred, t: Term) -> Constraint {
    Constraint::Is(p, t)
}
fn slot(s: &str) -> Term {
    Term::Slot(s.to_string())
}
fn parent(s: &str) -> Term {
    Term::Parent(s.to_string())
}
fn not(c: Constraint) -> Constraint {
    Constraint::Not(Box::new(c))
}

impl Constraint {
    pub fn rename(&self, f: &dyn Fn(&str) -> String) -> Constraint {
        match self {
            Constraint::Is(p, t) => Constraint::Is(*p, t.rename(f)),
            Constraint::Different(a, b) => Constraint::Different(a.rename(f), b.rename(f)),
            Constraint::Not(c) => not(c.rename(f)),
            Constraint::And(cs) => Constraint::And(cs.iter().map(|c| c.rename(f)).collect()),
            Constraint::Or(cs) => Constraint::Or(cs.iter().map(|c| c.rename(f)).collect()),
        }
    }

    pub fn slots(&self, out: &mut Vec<String>) {
        let mut push = |s: &str| {
            if !out.iter().any(|o| o == s) {
                out.push(s.to_string());
            }
        };
        match self {
            Constraint::Is(_, t) => push(t.slot()),
            Constraint::Different(a, b) => {
                push(a.slot());
                push(b.slot());
            }
            Constraint::Not(c) => c.slots(out),
            Constraint::And(cs) | Constraint::Or(cs) => cs.iter().for_each(|c| c.slots(out)),
        }
    }

    /// Three-valued evaluation: `None` when an unbound slot decides the outcome.
    fn eval(&self, scene: &Scene, b: &dyn Fn(&str) -> Option<usize>) -> Option<bool> {
        let node = |t: &Term| -> Option<Node> {
            match t {
                Term::Slot(s) => b(s).map(Node::Obj),
                Term::Parent(s) => b(s).map(|i| scene.initial_parent(i).map_or(Node::Room, Node::Obj)),
            }
        };
        match self {
            Constraint::Is(p, t) => node(t).map(|n| match n {
                Node::Room => false,
                Node::Obj(i) => {
                    let a = scene.objects[i].attrs;
                    match p {
                        Pred::Pickupable => a.pickupable,
                        Pred::Openable => a.openable,
                        Pred::Toggleable => a.toggleable,
                        Pred::Receptacle => a.receptacle,
                    }
                }
            }),
            Constraint::Different(x, y) => Some(node(x)? != node(y)?),
            Constraint::Not(c) => c.eval(scene, b).map(|v| !v),
            Constraint::And(cs) => {
                let mut unknown = false;
                for c in cs {
                    match c.eval(scene, b) {
                        Some(false) => return Some(false),
                        None => unknown = true,
                        Some(true) => {}
                    }
                }
                (!unknown).then_some(true)
            }
            Constraint::Or(cs) => {
                let mut unknown = false;
                for c in cs {
                    match c.eval(scene, b) {
                        Some(true) => return Some(true),
                        None => unknown = true,
                        Some(false) => {}
                    }
                }
                (!unknown).then_some(false)
            }
        }
    }

    fn conjuncts(&self) -> Vec<&Constraint> {
        match self {
            Constraint::And(cs) => cs.iter().flat_map(|c| c.conjuncts()).collect(),
            other => vec![other],
        }
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |f: &mut fmt::Formatter<'_>, cs: &[Constraint], op: &str| {
            f.write_str("(")?;
            for (k, c) in cs.iter().enumerate() {
                if k > 0 {
                    write!(f, " {op} ")?;
                }
                write!(f, "{c}")?;
            }
            f.write_str(")")
        };
        match self {
            Constraint::Is(p, t) => write!(f, "{p:?}({t})"),
            Constraint::Different(a, b) => write!(f, "Different({a}, {b})"),
            Constraint::Not(c) => write!(f, "¬{c}"),
            Constraint::And(cs) => join(f, cs, "∧"),
            Constraint::Or(cs) => join(f, cs, "∨"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofLine {
    pub predicate: String,
    pub holds: bool,
}

/// Truth value of every top-level conjunct for one binding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintProof {
    pub lines: Vec<ProofLine>,
}

impl ConstraintProof {
    pub fn pass(&self) -> bool {
        self.lines.iter().all(|l| l.holds)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConstraintError {
    #[error("unknown object `{0}`")]
    UnknownObject(String),
    #[error("slot `{0}` is not bound")]
    UnboundSlot(String),
    #[error("constraint violated: {}", failed.join(", "))]
    Violation { failed: Vec<String>, proof: ConstraintProof },
}

pub type Bindings = BTreeMap<String, String>;

// ---------------------------------------------------------------- templates

#[derive(Debug, Clone, PartialEq)]
pub struct TaskTemplate {
    pub sub_task: SubTask,
    pub slots: Vec<String>,
    pub constraint: Constraint,
    /// Surface forms; `{S}` is the label bound to slot S and `{at:S}` renders
    /// "in the S" or "on the S" depending on whether S can be closed.
    pub text_forms: Vec<&'static str>,
    /// Imperative phrase the paraphrase styles are applied to.
    pub base_form: &'static str,
    /// Close the destination after putting the item in.
    pub close_destination: bool,
}

const SEARCH_FORMS: [&str; 4] = [
    "Could you please find the {A} in the room?",
    "Please find the {A} in the room.",
    "I can not find my {A}, could you help me look for it?",
    "Where is the {A}? Please go and find it.",
];

const GRASP_FORMS: [&str; 3] = [
    "Please pick up the {A} in the room.",
    "Could you grab the {A} for me?",
    "I can not find my {A}, could you find it and pick it up?",
];

/// Shape of one transfer leg: the item is moved to a different stationary receptacle.
fn transfer_leg(a: &str, b: &str, source_closed: Option<bool>, dest_closed: Option<bool>) -> Vec<Constraint> {
    let mut cs = vec![is(Pred::Pickupable, slot(a))];
    match source_closed {
        Some(true) => cs.push(is(Pred::Openable, parent(a))),
        Some(false) => cs.push(not(is(Pred::Openable, parent(a)))),
        None => {}
    }
    match dest_closed {
        Some(true) => cs.push(is(Pred::Openable, slot(b))),
        Some(false) => cs.push(not(is(Pred::Openable, slot(b)))),
        None => {}
    }
    if source_closed.is_none() && dest_closed.is_none() {
        // any of exposed→exposed, exposed→enclosed, enclosed→exposed
        cs.push(not(Constraint::And(vec![is(Pred::Openable, parent(a)), is(Pred::Openable, slot(b))])));
    }
    cs.push(is(Pred::Receptacle, slot(b)));
    cs.push(not(is(Pred::Pickupable, slot(b))));
    cs.push(Constraint::Different(slot(b), parent(a)));
    cs
}

fn builtin_template(sub_task: SubTask) -> TaskTemplate {
    use SubTask::*;
    let one = |c: Vec<Constraint>, forms: Vec<&'static str>, base| TaskTemplate {
        sub_task,
        slots: vec!["A".into()],
        constraint: Constraint::And(c),
        text_forms: forms,
        base_form: base,
        close_destination: false,
    };
    let two = |leg: Vec<Constraint>, forms: Vec<&'static str>| TaskTemplate {
        sub_task,
        slots: vec!["A".into(), "B".into()],
        constraint: Constraint::And(leg),
        text_forms: forms,
        base_form: "put the {A} {at:B}",
        close_destination: false,
    };
    let exposed = || vec![is(Pred::Pickupable, slot("A")), not(is(Pred::Openable, parent("A")))];
    let enclosed = || vec![is(Pred::Pickupable, slot("A")), is(Pred::Openable, parent("A"))];
    let with_first = |first: &'static str, rest: &[&'static str]| {
        let mut v = vec![first];
        v.extend_from_slice(rest);
        v
    };
    match sub_task {
        ExposedSearch => one(exposed(), SEARCH_FORMS.to_vec(), "find the {A}"),
        EnclosedSearch => one(enclosed(), SEARCH_FORMS.to_vec(), "find the {A}"),
        ExposedGrasp => one(
            exposed(),
            with_first("I want to pick up a {A} from the room, can you help me?", &GRASP_FORMS),
            "pick up the {A}",
        ),
        EnclosedGrasp => one(
            enclosed(),
            with_first("Would it be possible for you to pick up a {A} from the room?", &GRASP_FORMS),
            "pick up the {A}",
        ),
        ExposedToggle => one(
            vec![is(Pred::Toggleable, slot("A")), not(is(Pred::Openable, parent("A")))],
            vec![
                "Would you mind powering on the {A} for me?",
                "Please turn on the {A}.",
                "Could you switch on the {A}?",
                "I would like the {A} turned on, can you do that?",
            ],
            "turn on the {A}",
        ),
        Exp2ExpTransfer => two(
            transfer_leg("A", "B", Some(false), Some(false)),
            with_first("Could you please put the {A} {at:B}?", &TRANSFER_FORMS),
        ),
        Exp2EncTransfer => two(
            transfer_leg("A", "B", Some(false), Some(true)),
            with_first("Would you mind placing the {A} {at:B}, please?", &TRANSFER_FORMS),
        ),
        Enc2ExpTransfer => two(
            transfer_leg("A", "B", Some(true), Some(false)),
            with_first("Is it okay to put the {A} {at:B}?", &TRANSFER_FORMS),
        ),
        Enc2EncTransfer => two(
            transfer_leg("A", "B", Some(true), Some(true)),
            with_first("May I ask you to put the {A} {at:B}?", &TRANSFER_FORMS),
        ),
        SequentialTransfer => {
            let mut cs = transfer_leg("A1", "B1", None, None);
            cs.extend(transfer_leg("A2", "B2", None, None));
            cs.push(Constraint::Different(slot("A1"), slot("A2")));
            TaskTemplate {
                sub_task,
                slots: ["A1", "B1", "A2", "B2"].map(String::from).to_vec(),
                constraint: Constraint::And(cs),
                text_forms: vec![
                    "Could you please first place the {A1} {at:B1}, and then place the {A2} {at:B2}?",
                    "First, put the {A1} {at:B1}, then put the {A2} {at:B2}.",
                    "Please move the {A1} {at:B1} first, and after that move the {A2} {at:B2}.",
                    "I need the {A1} {at:B1} and then the {A2} {at:B2}, in that order.",
                ],
                base_form: "put the {A1} {at:B1} and then put the {A2} {at:B2}",
                close_destination: false,
            }
        }
        LongTermComplex => TaskTemplate {
            sub_task,
            slots: Vec::new(),
            constraint: Constraint::And(Vec::new()),
            text_forms: LONG_TERM_FORMS.to_vec(),
            base_form: "",
            close_destination: false,
        },
    }
}

const TRANSFER_FORMS: [&str; 3] = [
    "Please pick up the {A} in the room and place it {at:B}.",
    "Can you take the {A} and put it {at:B}?",
    "I would like the {A} moved {at:B}.",
];

/// `{1}`..`{4}` are the legs' imperative phrases.
const LONG_TERM_FORMS: [&str; 3] = [
    "First, {1}, then {2}, after that {3}, and finally {4}.",
    "Could you {1}, then {2}, then {3}, and finally {4}?",
    "Please {1}; next {2}; then {3}; and at last {4}.",
];

/// Template for a long-term task made of `parts`, in order. Leg k's slots are
/// suffixed with k (A1, B1, A2, ...), and items of different legs must differ.
pub fn long_term_template(parts: &[SubTask]) -> TaskTemplate {
    let mut slots = Vec::new();
    let mut cs = Vec::new();
    let mut items = Vec::new();
    for (k, part) in parts.iter().enumerate() {
        let t = part.template();
        let n = k + 1;
        let rename = move |s: &str| format!("{s}{n}");
        for s in &t.slots {
            slots.push(rename(s));
        }
        cs.extend(t.constraint.rename(&rename).conjuncts().into_iter().cloned());
        items.push(rename("A"));
    }
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            cs.push(Constraint::Different(slot(&items[i]), slot(&items[j])));
        }
    }
    TaskTemplate {
        sub_task: SubTask::LongTermComplex,
        slots,
        constraint: Constraint::And(cs),
        text_forms: LONG_TERM_FORMS.to_vec(),
        base_form: "",
        close_destination: false,
    }
}

fn bound(scene: &Scene, bindings: &Bindings, s: &str) -> Option<usize> {
    bindings.get(s).and_then(|id| scene.index_of(id))
}

pub fn check_constraint(
    template: &TaskTemplate,
    bindings: &Bindings,
    scene: &Scene,
) -> Result<ConstraintProof, ConstraintError> {
    let mut needed = template.slots.clone();
    template.constraint.slots(&mut needed);
    for s in &needed {
        let id = bindings.get(s).ok_or_else(|| ConstraintError::UnboundSlot(s.clone()))?;
        if scene.index_of(id).is_none() {
            return Err(ConstraintError::UnknownObject(id.clone()));
        }
    }
    let lookup = |s: &str| bound(scene, bindings, s);
    let lines: Vec<ProofLine> = template
        .constraint
        .conjuncts()
        .into_iter()
        .map(|c| ProofLine { predicate: c.to_string(), holds: c.eval(scene, &lookup) == Some(true) })
        .collect();
    let proof = ConstraintProof { lines };
    if proof.pass() {
        Ok(proof)
    } else {
        let failed = proof.lines.iter().filter(|l| !l.holds).map(|l| l.predicate.clone()).collect();
        Err(ConstraintError::Violation { failed, proof })
    }
}

/// All bindings satisfying the template, in lexicographic order of the object
/// ids taken slot by slot. Partial bindings are pruned as soon as the
/// constraint is decided false.
pub fn enumerate_bindings(template: &TaskTemplate, scene: &Scene) -> Vec<Bindings> {
    let mut order: Vec<usize> = (0..scene.len()).collect();
    order.sort_by(|&a, &b| scene.objects[a].id.cmp(&scene.objects[b].id));
    let mut out = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    enumerate_rec(template, scene, &order, &mut current, &mut out);
    out
}

fn enumerate_rec(
    template: &TaskTemplate,
    scene: &Scene,
    order: &[usize],
    current: &mut Vec<usize>,
    out: &mut Vec<Bindings>,
) {
    let depth = current.len();
    if depth == template.slots.len() {
        out.push(
            template
                .slots
                .iter()
                .zip(current.iter())
                .map(|(s, &i)| (s.clone(), scene.objects[i].id.clone()))
                .collect(),
        );
        return;
    }
    for &cand in order {
        current.push(cand);
        let lookup = |s: &str| template.slots.iter().position(|x| x == s).and_then(|k| current.get(k).copied());
        if template.constraint.eval(scene, &lookup) != Some(false) {
            enumerate_rec(template, scene, order, current, out);
        }
        current.pop();
    }
}

// ---------------------------------------------------------------- instructions

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstruction {
    pub id: String,
    pub scene_id: String,
    pub sub_task: SubTask,
    pub bindings: Bindings,
    pub text: String,
    pub goal: Vec<Goal>,
    pub proof: ConstraintProof,
    /// Leg types of a long-term task, in order; empty otherwise.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub composition: Vec<SubTask>,
    /// Paraphrase style applied to the text, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<String>,
}

impl TaskInstruction {
    pub fn category(&self) -> Category {
        self.sub_task.category()
    }

    pub fn template(&self) -> TaskTemplate {
        if self.sub_task == SubTask::LongTermComplex {
            long_term_template(&self.composition)
        } else {
            self.sub_task.template()
        }
    }

    /// Re-check the stored bindings against the scene.
    pub fn verify(&self, scene: &Scene) -> Result<ConstraintProof, ConstraintError> {
        let proof = check_constraint(&self.template(), &self.bindings, scene)?;
        if proof != self.proof {
            return Err(ConstraintError::Violation { failed: vec!["stored proof differs".into()], proof });
        }
        Ok(proof)
    }

    /// Imperative core phrase of the instruction.
    pub fn base_text(&self, scene: &Scene) -> String {
        if self.sub_task == SubTask::LongTermComplex {
            let legs = leg_phrases(scene, &self.composition, &self.bindings);
            return legs.join(", then ");
        }
        fill_slots(self.template().base_form, scene, &self.bindings, "")
    }

    pub fn check(&self, scene: &Scene, actions: &[crate::action::Action]) -> bool {
        sim::final_state_check(scene, &self.goal, actions)
    }
}

/// Substitute `{S}` and `{at:S}` (slots renamed with `suffix`).
fn fill_slots(form: &str, scene: &Scene, bindings: &Bindings, suffix: &str) -> String {
    let mut out = form.to_string();
    for (s, id) in bindings {
        let Some(base) = s.strip_suffix(suffix) else { continue };
        if base.is_empty() {
            continue;
        }
        let Some(i) = scene.index_of(id) else { continue };
        let label = scene.label(i);
        let prep = if scene.objects[i].attrs.openable { "in" } else { "on" };
        out = out.replace(&format!("{{at:{base}}}"), &format!("{prep} the {label}"));
        out = out.replace(&format!("{{{base}}}"), label);
    }
    out
}

fn leg_phrases(scene: &Scene, parts: &[SubTask], bindings: &Bindings) -> Vec<String> {
    parts
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let suffix = (k + 1).to_string();
            let leg: Bindings = bindings
                .iter()
                .filter(|(s, _)| s.strip_suffix(suffix.as_str()).is_some_and(|b| b.len() == 1))
                .map(|(s, v)| (s.clone(), v.clone()))
                .collect();
            fill_slots(p.template().base_form, scene, &leg, &suffix)
        })
        .collect()
}

fn transfer_goal(scene: &Scene, item: &str, destination: &str, close_destination: bool) -> Goal {
    let mut close: Vec<String> = Vec::new();
    if let Some(i) = scene.index_of(item) {
        let mut cur = scene.initial_parent(i);
        while let Some(p) = cur {
            if scene.objects[p].attrs.openable && scene.objects[p].id != destination {
                close.push(scene.objects[p].id.clone());
            }
            cur = scene.initial_parent(p);
        }
    }
    if close_destination {
        close.push(destination.to_string());
    }
    Goal::Transfer { item: item.to_string(), destination: destination.to_string(), close }
}

fn leg_goal(scene: &Scene, sub_task: SubTask, get: &dyn Fn(&str) -> String, close_destination: bool) -> Vec<Goal> {
    use SubTask::*;
    match sub_task {
        ExposedSearch | EnclosedSearch => vec![Goal::Find { target: get("A") }],
        ExposedGrasp | EnclosedGrasp => vec![Goal::Grasp { target: get("A") }],
        ExposedToggle => vec![Goal::Toggle { target: get("A") }],
        Exp2ExpTransfer | Exp2EncTransfer | Enc2ExpTransfer | Enc2EncTransfer => {
            vec![transfer_goal(scene, &get("A"), &get("B"), close_destination)]
        }
        SequentialTransfer => vec![
            transfer_goal(scene, &get("A1"), &get("B1"), close_destination),
            transfer_goal(scene, &get("A2"), &get("B2"), close_destination),
        ],
        LongTermComplex => unreachable!("long-term goals are built per leg"),
    }
}

/// Goals implied by a binding, in instruction order.
pub fn goals_for(scene: &Scene, template: &TaskTemplate, composition: &[SubTask], bindings: &Bindings) -> Vec<Goal> {
    if template.sub_task == SubTask::LongTermComplex {
        composition
            .iter()
            .enumerate()
            .flat_map(|(k, p)| {
                let get = |s: &str| bindings[&format!("{s}{}", k + 1)].clone();
                leg_goal(scene, *p, &get, false)
            })
            .collect()
    } else {
        let get = |s: &str| bindings[s].clone();
        leg_goal(scene, template.sub_task, &get, template.close_destination)
    }
}

/// Build an instruction from an explicit binding, rendering text form `form`.
pub fn instantiate(
    scene: &Scene,
    template: &TaskTemplate,
    composition: &[SubTask],
    bindings: Bindings,
    form: usize,
    id: String,
) -> Result<TaskInstruction, ConstraintError> {
    let proof = check_constraint(template, &bindings, scene)?;
    let raw = template.text_forms[form % template.text_forms.len()];
    let text = if template.sub_task == SubTask::LongTermComplex {
        let mut s = raw.to_string();
        for (k, leg) in leg_phrases(scene, composition, &bindings).iter().enumerate() {
            s = s.replace(&format!("{{{}}}", k + 1), leg);
        }
        s
    } else {
        fill_slots(raw, scene, &bindings, "")
    };
    let goal = goals_for(scene, template, composition, &bindings);
    Ok(TaskInstruction {
        id,
        scene_id: scene.id.clone(),
        sub_task: template.sub_task,
        bindings,
        text,
        goal,
        proof,
        composition: composition.to_vec(),
        style: None,
    })
}

/// Whether the planner's key actions for `task` succeed from reset.
pub fn feasible(scene: &Scene, task: &TaskInstruction) -> bool {
    planner::derive_key_actions(task, scene).is_ok_and(|k| task.check(scene, &k.actions))
}

/// Shortest key sequence (End excluded) a composite task may have.
pub const COMPOSITE_MIN_KEY: usize = 8;

/// Composite tasks are kept only when their key sequence succeeds, is long
/// enough, and loses success if any single action is dropped. Legs sharing a
/// container can otherwise make a close or open redundant.
pub fn composite_admissible(scene: &Scene, task: &TaskInstruction) -> bool {
    let Ok(key) = planner::derive_key_actions(task, scene) else {
        return false;
    };
    if key.actions.len() < COMPOSITE_MIN_KEY + 1 || !task.check(scene, &key.actions) {
        return false;
    }
    (0..key.actions.len()).all(|drop| {
        let mut shorter = key.actions.clone();
        shorter.remove(drop);
        !task.check(scene, &shorter)
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthIssue {
    NoValidBinding(SubTask),
    /// Fewer bindings than requested; the count actually produced.
    Short { sub_task: SubTask, requested: usize, produced: usize },
}

#[derive(Debug, Clone, Default)]
pub struct Synthesis {
    pub tasks: Vec<TaskInstruction>,
    pub issues: Vec<SynthIssue>,
}

/// Controls optional paraphrasing during synthesis.
pub struct SynthOptions<'p> {
    /// Probability that a task's text is replaced by a paraphrase of its base phrase.
    pub paraphrase_rate: f64,
    pub styles: Vec<String>,
    pub paraphraser: &'p dyn Paraphraser,
}

impl Default for SynthOptions<'static> {
    fn default() -> Self {
        SynthOptions { paraphrase_rate: 0.0, styles: Vec::new(), paraphraser: &CannedStyles }
    }
}

const LONG_TERM_ATTEMPTS: usize = 64;

/// Synthesize instructions for `scene`; deterministic in `seed`.
pub fn synthesize_tasks(scene: &Scene, mix: &BTreeMap<SubTask, usize>, seed: u64) -> Synthesis {
    synthesize_with(scene, mix, seed, &SynthOptions::default())
}

pub fn synthesize_with(
    scene: &Scene,
    mix: &BTreeMap<SubTask, usize>,
    seed: u64,
    options: &SynthOptions<'_>,
) -> Synthesis {
    let mut out = Synthesis::default();
    for (&sub_task, &count) in mix {
        if count == 0 {
            continue;
        }
        let mut rng = seed::rng(seed::derive(seed, sub_task.short_name()));
        let mut made = if sub_task == SubTask::LongTermComplex {
            synth_long_term(scene, count, &mut rng)
        } else {
            let template = sub_task.template();
            let mut all = enumerate_bindings(&template, scene);
            all.shuffle(&mut rng);
            let mut made = Vec::new();
            for b in all {
                if made.len() == count {
                    break;
                }
                let form = rng.random_range(0..template.text_forms.len());
                let id = format!("{}/{}/{}", scene.id, sub_task.short_name(), made.len());
                let task = instantiate(scene, &template, &[], b, form, id).expect("enumerated bindings pass");
                if sub_task.category() != Category::Composite || composite_admissible(scene, &task) {
                    made.push(task);
                }
            }
            made
        };
        if options.paraphrase_rate > 0.0 && !options.styles.is_empty() {
            for task in &mut made {
                if rng.random_bool(options.paraphrase_rate.clamp(0.0, 1.0)) {
                    let style = options.styles.choose(&mut rng).expect("non-empty").clone();
                    let base = task.base_text(scene);
                    if let Ok(text) = options.paraphraser.paraphrase(&base, &style) {
                        task.text = text;
                        task.style = Some(style);
                    }
                }
            }
        }
        if made.is_empty() {
            log::warn!("{}: no valid binding in scene {}", sub_task, scene.id);
            out.issues.push(SynthIssue::NoValidBinding(sub_task));
        } else if made.len() < count {
            log::warn!("{}: only {} of {} tasks in scene {}", sub_task, made.len(), count, scene.id);
            out.issues.push(SynthIssue::Short { sub_task, requested: count, produced: made.len() });
        }
        out.tasks.extend(made);
    }
    out
}

fn synth_long_term<R: Rng>(scene: &Scene, count: usize, rng: &mut R) -> Vec<TaskInstruction> {
    let per_part: BTreeMap<SubTask, Vec<Bindings>> = LONG_TERM_PARTS
        .iter()
        .map(|&p| (p, enumerate_bindings(&p.template(), scene)))
        .collect();
    let mut made: Vec<TaskInstruction> = Vec::new();
    let mut attempts = 0;
    while made.len() < count && attempts < LONG_TERM_ATTEMPTS * count {
        attempts += 1;
        let mut parts = LONG_TERM_PARTS.to_vec();
        parts.shuffle(rng);
        parts.truncate(4);
        if parts.iter().any(|p| per_part[p].is_empty()) {
            continue;
        }
        let mut bindings = Bindings::new();
        for (k, p) in parts.iter().enumerate() {
            let leg = per_part[p].choose(rng).expect("non-empty");
            for (s, id) in leg {
                bindings.insert(format!("{s}{}", k + 1), id.clone());
            }
        }
        let template = long_term_template(&parts);
        let form = rng.random_range(0..template.text_forms.len());
        let id = format!("{}/{}/{}", scene.id, SubTask::LongTermComplex.short_name(), made.len());
        let Ok(task) = instantiate(scene, &template, &parts, bindings, form, id) else {
            continue;
        };
        if made.iter().any(|t| t.bindings == task.bindings) {
            continue;
        }
        if composite_admissible(scene, &task) {
            made.push(task);
        }
    }
    made
}

/// Parse `exp2exp=3,enc2enc=5` style mixes.
pub fn parse_mix(text: &str) -> Result<BTreeMap<SubTask, usize>, String> {
    let mut mix = BTreeMap::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, count) = part.split_once('=').ok_or_else(|| format!("expected sub_task=count, got `{part}`"))?;
        let sub_task = SubTask::parse(name.trim()).ok_or_else(|| format!("unknown sub-task `{name}`"))?;
        let count: usize = count.trim().parse().map_err(|_| format!("bad count in `{part}`"))?;
        *mix.entry(sub_task).or_default() += count;
    }
    Ok(mix)
}

pub fn save_tasks(tasks: &[TaskInstruction]) -> String {
    let mut out = String::new();
    for t in tasks {
        out.push_str(&crate::canonical::to_canonical_line(t).expect("task serializes"));
        out.push('\n');
    }
    out
}

pub fn load_tasks(text: &str) -> Result<Vec<TaskInstruction>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

// ---------------------------------------------------------------- paraphrasing

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParaphraseError {
    #[error("unknown style `{0}`")]
    UnknownStyle(String),
    #[error("external paraphraser unavailable: {0}")]
    ExternalUnavailable(String),
}

pub trait Paraphraser: Send + Sync {
    fn paraphrase(&self, base: &str, style: &str) -> Result<String, ParaphraseError>;
}

/// Built-in rewrites of an imperative phrase such as "find the Apple".
#[derive(Debug, Clone, Copy, Default)]
pub struct CannedStyles;

impl CannedStyles {
    pub const STYLES: [&'static str; 5] = ["polite-request", "could-you", "need", "lost-item", "direct"];
}

fn gerund(base: &str) -> String {
    let (verb, rest) = base.split_once(' ').unwrap_or((base, ""));
    let ing = match verb {
        "put" => "putting".to_string(),
        v if v.ends_with('e') && v != "see" => format!("{}ing", &v[..v.len() - 1]),
        v => format!("{v}ing"),
    };
    if rest.is_empty() {
        ing
    } else {
        // only the leading verb changes; later verbs joined by "and then" stay bare
        format!("{ing} {rest}")
    }
}

impl Paraphraser for CannedStyles {
    fn paraphrase(&self, base: &str, style: &str) -> Result<String, ParaphraseError> {
        let base = base.trim().trim_end_matches(['.', '?']);
        Ok(match style {
            "polite-request" => format!("Would you mind {} for me?", gerund(base)),
            "could-you" => format!("Could you please {base}?"),
            "need" => format!("I need you to {base}."),
            "lost-item" => match base.strip_prefix("find the ") {
                Some(obj) => format!("I can not find my {obj}, can you help me find it?"),
                None => format!("Can you help me {base}?"),
            },
            "direct" => {
                let mut s = base.to_string();
                if let Some(c) = s.get_mut(0..1) {
                    c.make_ascii_uppercase();
                }
                format!("{s}.")
            }
            other => return Err(ParaphraseError::UnknownStyle(other.to_string())),
        })
    }
}

/// Tries `primary` and falls back to the canned styles when it fails.
pub struct FallbackParaphraser<P> {
    pub primary: P,
    pub fallback: CannedStyles,
}

impl<P: Paraphraser> FallbackParaphraser<P> {
    pub fn new(primary: P) -> Self {
        FallbackParaphraser { primary, fallback: CannedStyles }
    }
}

impl<P: Paraphraser> Paraphraser for FallbackParaphraser<P> {
    fn paraphrase(&self, base: &str, style: &str) -> Result<String, ParaphraseError> {
        match self.primary.paraphrase(base, style) {
            Ok(t) => Ok(t),
            Err(e) => {
                log::warn!("paraphraser failed ({e}); using built-in style `{style}`");
                self.fallback.paraphrase(base, style)
            }
        }
    }
}

pub fn paraphrase_hook(paraphraser: &dyn Paraphraser, text: &str, style: &str) -> Result<String, ParaphraseError> {
    paraphraser.paraphrase(text, style)
}

#[cfg(test)]
mod tests;
