//! World model: objects, receptacles, attributes and the affiliation forest.
//!
//! The forest is rooted at a synthetic room node ([`ROOT_ID`]). Depth one holds
//! navigable receptacles (anchors), depth two may hold closed containers that sit
//! on an anchor, and items live at depth two or three.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_pretty;
use crate::catalog::{Catalog, ClassEntry};
use crate::seed;

/// Id of the room node at the root of every affiliation forest.
pub const ROOT_ID: &str = "room";
pub const MAX_DEPTH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RoomType {
    Kitchen,
    LivingRoom,
    Bedroom,
    Bathroom,
}

impl RoomType {
    pub const ALL: [RoomType; 4] =
        [RoomType::Kitchen, RoomType::LivingRoom, RoomType::Bedroom, RoomType::Bathroom];

    pub fn slug(self) -> &'static str {
        match self {
            RoomType::Kitchen => "kitchen",
            RoomType::LivingRoom => "livingroom",
            RoomType::Bedroom => "bedroom",
            RoomType::Bathroom => "bathroom",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let folded = s.to_ascii_lowercase().replace(['_', '-', ' '], "");
        RoomType::ALL.into_iter().find(|r| r.slug() == folded)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectAttr {
    pub pickupable: bool,
    pub openable: bool,
    pub toggleable: bool,
    pub receptacle: bool,
    /// Large anchor the agent can navigate to.
    pub navigable: bool,
}

impl ObjectAttr {
    fn check(&self) -> Result<(), &'static str> {
        if self.openable && !self.receptacle {
            return Err("openable objects must be receptacles");
        }
        if self.navigable && !self.receptacle {
            return Err("navigable objects must be receptacles");
        }
        if self.navigable && self.pickupable {
            return Err("navigable objects cannot be pickupable");
        }
        Ok(())
    }

    /// A receptacle that can receive items and never moves.
    pub fn is_stationary_receptacle(&self) -> bool {
        self.receptacle && !self.pickupable
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectState {
    pub open: bool,
    pub toggled_on: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: String,
    pub class_name: String,
    pub attrs: ObjectAttr,
    pub state: ObjectState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffiliationGraph {
    pub root: String,
    pub nodes: BTreeSet<String>,
    /// child id → parent id. The parent is either an object id or `root`.
    pub parent: BTreeMap<String, String>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SceneError {
    #[error("scene spec infeasible: {0}")]
    SpecInfeasible(String),
    #[error("scene parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("scene invariant `{invariant}` violated: {detail}")]
    InvariantViolation { invariant: &'static str, detail: String },
    #[error("unknown object `{0}`")]
    UnknownObject(String),
}

impl SceneError {
    fn violation(invariant: &'static str, detail: impl Into<String>) -> Self {
        SceneError::InvariantViolation { invariant, detail: detail.into() }
    }
}

/// Serialized shape of a scene; only becomes a [`Scene`] after validation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDoc {
    pub id: String,
    pub room_type: RoomType,
    pub objects: Vec<SceneObject>,
    pub graph: AffiliationGraph,
    pub initially_visible: BTreeSet<String>,
    pub seed: u64,
}

/// A validated, immutable scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "SceneDoc")]
pub struct Scene {
    pub id: String,
    pub room_type: RoomType,
    pub objects: Vec<SceneObject>,
    pub graph: AffiliationGraph,
    pub initially_visible: BTreeSet<String>,
    pub seed: u64,
    #[serde(skip)]
    index: HashMap<String, usize>,
    #[serde(skip)]
    parent_idx: Vec<Option<usize>>,
    #[serde(skip)]
    labels: Vec<String>,
}

impl PartialEq for Scene {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.room_type == other.room_type
            && self.objects == other.objects
            && self.graph == other.graph
            && self.initially_visible == other.initially_visible
            && self.seed == other.seed
    }
}

impl TryFrom<SceneDoc> for Scene {
    type Error = SceneError;

    fn try_from(doc: SceneDoc) -> Result<Self, SceneError> {
        Scene::from_doc(doc)
    }
}

impl Scene {
    pub fn from_doc(doc: SceneDoc) -> Result<Self, SceneError> {
        let SceneDoc { id, room_type, objects, graph, initially_visible, seed } = doc;

        let mut index = HashMap::with_capacity(objects.len());
        for (i, o) in objects.iter().enumerate() {
            if o.id == graph.root || o.id.is_empty() || index.insert(o.id.clone(), i).is_some() {
                return Err(SceneError::violation("unique-id", format!("object id `{}`", o.id)));
            }
        }
        for o in &objects {
            o.attrs.check().map_err(|e| SceneError::violation("attrs", format!("{}: {e}", o.id)))?;
        }
        for o in &objects {
            if o.state.open && !o.attrs.openable {
                return Err(SceneError::violation("openable", format!("{} is open but not openable", o.id)));
            }
            if o.state.toggled_on && !o.attrs.toggleable {
                return Err(SceneError::violation(
                    "toggleable",
                    format!("{} is on but not toggleable", o.id),
                ));
            }
        }
        let ids: BTreeSet<String> = objects.iter().map(|o| o.id.clone()).collect();
        if graph.nodes != ids {
            return Err(SceneError::violation("nodes", "graph nodes differ from object ids"));
        }

        // forest: every object has a known parent and following parents reaches the root
        let mut parent_idx = vec![None; objects.len()];
        for (i, o) in objects.iter().enumerate() {
            let p = graph
                .parent
                .get(&o.id)
                .ok_or_else(|| SceneError::violation("forest", format!("{} has no parent", o.id)))?;
            if *p != graph.root {
                let pi = *index.get(p).ok_or_else(|| {
                    SceneError::violation("forest", format!("{} has unknown parent {p}", o.id))
                })?;
                parent_idx[i] = Some(pi);
            }
        }
        if let Some(extra) = graph.parent.keys().find(|k| !index.contains_key(*k)) {
            return Err(SceneError::violation("forest", format!("edge from unknown node {extra}")));
        }
        let mut depth = vec![0usize; objects.len()];
        for i in 0..objects.len() {
            let mut d = 1;
            let mut cur = parent_idx[i];
            while let Some(p) = cur {
                d += 1;
                if d > objects.len() + 1 {
                    return Err(SceneError::violation(
                        "forest",
                        format!("parent cycle through {}", objects[i].id),
                    ));
                }
                cur = parent_idx[p];
            }
            depth[i] = d;
        }
        for (i, o) in objects.iter().enumerate() {
            if let Some(p) = parent_idx[i] {
                if !objects[p].attrs.receptacle {
                    return Err(SceneError::violation(
                        "parent-receptacle",
                        format!("{} sits in non-receptacle {}", o.id, objects[p].id),
                    ));
                }
            }
        }
        for (i, o) in objects.iter().enumerate() {
            if o.attrs.navigable != parent_idx[i].is_none() {
                return Err(SceneError::violation(
                    "anchor",
                    format!("{}: exactly the navigable objects hang off the room", o.id),
                ));
            }
            if depth[i] > MAX_DEPTH {
                return Err(SceneError::violation("depth", format!("{} at depth {}", o.id, depth[i])));
            }
            if o.attrs.pickupable && parent_idx[i].is_none() {
                return Err(SceneError::violation("item-ancestor", format!("{} has no receptacle", o.id)));
            }
        }
        for v in &initially_visible {
            match index.get(v) {
                Some(&i) if objects[i].attrs.navigable => {}
                _ => {
                    return Err(SceneError::violation(
                        "initially-visible",
                        format!("{v} is not a navigable receptacle"),
                    ))
                }
            }
        }

        let mut class_counts: HashMap<&str, usize> = HashMap::new();
        for o in &objects {
            *class_counts.entry(o.class_name.as_str()).or_default() += 1;
        }
        let labels = objects
            .iter()
            .map(|o| if class_counts[o.class_name.as_str()] == 1 { o.class_name.clone() } else { o.id.clone() })
            .collect();

        Ok(Scene { id, room_type, objects, graph, initially_visible, seed, index, parent_idx, labels })
    }

    pub fn to_doc(&self) -> SceneDoc {
        SceneDoc {
            id: self.id.clone(),
            room_type: self.room_type,
            objects: self.objects.clone(),
            graph: self.graph.clone(),
            initially_visible: self.initially_visible.clone(),
            seed: self.seed,
        }
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn object(&self, id: &str) -> Option<&SceneObject> {
        self.index_of(id).map(|i| &self.objects[i])
    }

    /// Initial parent index (`None` means the room).
    pub fn initial_parent(&self, idx: usize) -> Option<usize> {
        self.parent_idx[idx]
    }

    /// Name used in rendered text: the class when unique in the scene, else the id.
    pub fn label(&self, idx: usize) -> &str {
        &self.labels[idx]
    }

    pub fn label_of(&self, id: &str) -> Option<&str> {
        self.index_of(id).map(|i| self.label(i))
    }

    pub fn class_of(&self, id: &str) -> Option<&str> {
        self.object(id).map(|o| o.class_name.as_str())
    }

    pub fn navigable(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.objects.len()).filter(|&i| self.objects[i].attrs.navigable)
    }

    /// Objects whose class equals `class`, exact match first then case-folded.
    pub fn by_class(&self, class: &str) -> Vec<usize> {
        let exact: Vec<usize> =
            (0..self.objects.len()).filter(|&i| self.objects[i].class_name == class).collect();
        if !exact.is_empty() {
            return exact;
        }
        (0..self.objects.len())
            .filter(|&i| self.objects[i].class_name.eq_ignore_ascii_case(class))
            .collect()
    }

    /// Resolve an id (exact, then case-folded) or label.
    pub fn resolve_id(&self, phrase: &str) -> Option<usize> {
        if let Some(i) = self.index_of(phrase) {
            return Some(i);
        }
        (0..self.objects.len()).find(|&i| {
            self.objects[i].id.eq_ignore_ascii_case(phrase) || self.labels[i].eq_ignore_ascii_case(phrase)
        })
    }

    pub fn canonical_text(&self) -> String {
        to_canonical_pretty(&self.to_doc()).expect("scene serializes")
    }
}

/// Ancestors of `object_id`, root first and immediate parent last.
pub fn ancestors(scene: &Scene, object_id: &str) -> Result<Vec<String>, SceneError> {
    if object_id == scene.graph.root {
        return Ok(Vec::new());
    }
    let idx = scene.index_of(object_id).ok_or_else(|| SceneError::UnknownObject(object_id.to_string()))?;
    let mut chain = Vec::new();
    let mut cur = scene.initial_parent(idx);
    while let Some(p) = cur {
        chain.push(scene.objects[p].id.clone());
        cur = scene.initial_parent(p);
    }
    chain.push(scene.graph.root.clone());
    chain.reverse();
    Ok(chain)
}

pub fn save_scene(scene: &Scene) -> Vec<u8> {
    scene.canonical_text().into_bytes()
}

pub fn load_scene(bytes: &[u8]) -> Result<Scene, SceneError> {
    let text = std::str::from_utf8(bytes).map_err(|e| SceneError::Parse {
        line: 0,
        column: 0,
        message: format!("invalid UTF-8: {e}"),
    })?;
    let doc: SceneDoc = serde_json::from_str(text).map_err(|e| SceneError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    Scene::from_doc(doc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub room_type: RoomType,
    pub n_receptacles: usize,
    pub n_items: usize,
    pub seed: u64,
    /// Fraction of navigable receptacles visible at reset.
    #[serde(default = "default_fraction")]
    pub visible_fraction: f64,
    /// Probability that a pickupable item is placed inside a closed container.
    #[serde(default = "default_fraction")]
    pub hidden_fraction: f64,
    /// Closed containers placed on surfaces; `None` means `n_receptacles / 3`.
    #[serde(default)]
    pub n_nested: Option<usize>,
}

fn default_fraction() -> f64 {
    0.5
}

impl SceneSpec {
    pub fn new(room_type: RoomType, n_receptacles: usize, n_items: usize, seed: u64) -> Self {
        SceneSpec {
            room_type,
            n_receptacles,
            n_items,
            seed,
            visible_fraction: 0.5,
            hidden_fraction: 0.5,
            n_nested: None,
        }
    }
}

/// Class pool where each round offers every class still under its cap, shuffled,
/// so distinct classes are chosen before duplicates.
fn draw_classes<'c, R: Rng>(
    pool: &[&'c ClassEntry],
    n: usize,
    used: &mut HashMap<String, usize>,
    rng: &mut R,
) -> Option<Vec<&'c ClassEntry>> {
    let mut out = Vec::with_capacity(n);
    let mut round = 0;
    while out.len() < n {
        let mut offer: Vec<&ClassEntry> = pool
            .iter()
            .copied()
            .filter(|e| e.max_per_scene > round && used.get(&e.name).copied().unwrap_or(0) < e.max_per_scene)
            .collect();
        if offer.is_empty() {
            return None;
        }
        offer.shuffle(rng);
        for e in offer {
            if out.len() == n {
                break;
            }
            *used.entry(e.name.clone()).or_default() += 1;
            out.push(e);
        }
        round += 1;
    }
    Some(out)
}

/// Procedurally generate a scene; a pure function of `spec` and `catalog`.
pub fn generate_scene(spec: &SceneSpec, catalog: &Catalog) -> Result<Scene, SceneError> {
    if spec.n_receptacles == 0 {
        return Err(SceneError::SpecInfeasible("items need at least one receptacle".into()));
    }
    if spec.n_items == 0 {
        return Err(SceneError::SpecInfeasible("at least one item is required".into()));
    }
    let mut rng = seed::rng(seed::derive(spec.seed, spec.room_type.slug()));
    let mut used: HashMap<String, usize> = HashMap::new();

    let anchor_pool: Vec<&ClassEntry> = catalog.anchors(spec.room_type).collect();
    let mut anchors = draw_classes(&anchor_pool, spec.n_receptacles, &mut used, &mut rng)
        .ok_or_else(|| {
            SceneError::SpecInfeasible(format!(
                "catalog cannot supply {} receptacles for {:?}",
                spec.n_receptacles, spec.room_type
            ))
        })?;
    // with two or more anchors, make sure both a closed container and an open surface exist
    if anchors.len() >= 2 {
        for want_openable in [true, false] {
            if anchors.iter().any(|e| e.openable == want_openable) {
                continue;
            }
            let swap = anchor_pool.iter().copied().find(|e| {
                e.openable == want_openable && used.get(&e.name).copied().unwrap_or(0) < e.max_per_scene
            });
            if let Some(e) = swap {
                let victim = anchors
                    .iter()
                    .rposition(|a| anchors.iter().filter(|b| b.openable == a.openable).count() > 1)
                    .unwrap_or(anchors.len() - 1);
                *used.get_mut(&anchors[victim].name).unwrap() -= 1;
                *used.entry(e.name.clone()).or_default() += 1;
                anchors[victim] = e;
            }
        }
    }

    let surfaces: Vec<usize> = (0..anchors.len()).filter(|&i| !anchors[i].openable).collect();
    let n_nested = spec.n_nested.unwrap_or(spec.n_receptacles / 3).min(surfaces.len());
    let nest_pool: Vec<&ClassEntry> = catalog.nestables(spec.room_type).collect();
    let nested = draw_classes(&nest_pool, n_nested, &mut used, &mut rng).unwrap_or_default();
    let mut nest_hosts = surfaces.clone();
    nest_hosts.shuffle(&mut rng);

    let item_pool: Vec<&ClassEntry> = catalog
        .items(spec.room_type)
        .filter(|e| e.pickupable || !surfaces.is_empty())
        .collect();
    let items = draw_classes(&item_pool, spec.n_items, &mut used, &mut rng).ok_or_else(|| {
        SceneError::SpecInfeasible(format!(
            "catalog cannot supply {} items for {:?}",
            spec.n_items, spec.room_type
        ))
    })?;

    let mut counters: HashMap<String, usize> = HashMap::new();
    let mut next_id = |class: &str| {
        let n = counters.entry(class.to_string()).or_default();
        *n += 1;
        format!("{class}_{n}")
    };

    let mut objects = Vec::new();
    let mut parent = BTreeMap::new();
    let mut anchor_ids = Vec::new();
    for e in &anchors {
        let id = next_id(&e.name);
        parent.insert(id.clone(), ROOT_ID.to_string());
        objects.push(SceneObject {
            id: id.clone(),
            class_name: e.name.clone(),
            attrs: e.attrs(true),
            state: ObjectState::default(),
        });
        anchor_ids.push(id);
    }
    let mut containers: Vec<String> =
        (0..anchors.len()).filter(|&i| anchors[i].openable).map(|i| anchor_ids[i].clone()).collect();
    for (k, e) in nested.iter().enumerate() {
        let id = next_id(&e.name);
        parent.insert(id.clone(), anchor_ids[nest_hosts[k]].clone());
        objects.push(SceneObject {
            id: id.clone(),
            class_name: e.name.clone(),
            attrs: e.attrs(false),
            state: ObjectState::default(),
        });
        containers.push(id);
    }
    let surface_ids: Vec<String> = surfaces.iter().map(|&i| anchor_ids[i].clone()).collect();
    for e in &items {
        let id = next_id(&e.name);
        let hide = e.pickupable
            && !containers.is_empty()
            && (surface_ids.is_empty() || rng.random_bool(spec.hidden_fraction.clamp(0.0, 1.0)));
        let host = if hide {
            containers[rng.random_range(0..containers.len())].clone()
        } else {
            surface_ids[rng.random_range(0..surface_ids.len())].clone()
        };
        parent.insert(id.clone(), host);
        objects.push(SceneObject {
            id,
            class_name: e.name.clone(),
            attrs: e.attrs(false),
            state: ObjectState::default(),
        });
    }

    let n_visible = ((anchor_ids.len() as f64) * spec.visible_fraction.clamp(0.0, 1.0)).ceil() as usize;
    let mut visible_pool = anchor_ids.clone();
    visible_pool.shuffle(&mut rng);
    let initially_visible = visible_pool.into_iter().take(n_visible).collect();

    let nodes = objects.iter().map(|o| o.id.clone()).collect();
    Scene::from_doc(SceneDoc {
        id: format!("{}-{}", spec.room_type.slug(), spec.seed),
        room_type: spec.room_type,
        objects,
        graph: AffiliationGraph { root: ROOT_ID.to_string(), nodes, parent },
        initially_visible,
        seed: spec.seed,
    })
}

/// Hand-assembles scenes from catalog classes; used for fixtures and exemplars.
pub struct SceneBuilder<'c> {
    catalog: &'c Catalog,
    id: String,
    room_type: RoomType,
    objects: Vec<SceneObject>,
    parent: BTreeMap<String, String>,
    visible: BTreeSet<String>,
    counters: HashMap<String, usize>,
}

impl<'c> SceneBuilder<'c> {
    pub fn new(id: &str, room_type: RoomType, catalog: &'c Catalog) -> Self {
        SceneBuilder {
            catalog,
            id: id.to_string(),
            room_type,
            objects: Vec::new(),
            parent: BTreeMap::new(),
            visible: BTreeSet::new(),
            counters: HashMap::new(),
        }
    }

    fn add(&mut self, class: &str, parent: &str, navigable: bool) -> String {
        let entry = self
            .catalog
            .get(class)
            .unwrap_or_else(|| panic!("class {class} not in catalog"));
        let n = self.counters.entry(class.to_string()).or_default();
        *n += 1;
        let id = format!("{class}_{n}");
        self.parent.insert(id.clone(), parent.to_string());
        self.objects.push(SceneObject {
            id: id.clone(),
            class_name: class.to_string(),
            attrs: entry.attrs(navigable),
            state: ObjectState::default(),
        });
        id
    }

    /// Navigable receptacle directly in the room.
    pub fn anchor(&mut self, class: &str) -> String {
        self.add(class, ROOT_ID, true)
    }

    /// Non-navigable object (container or item) placed in/on `parent`.
    pub fn place(&mut self, class: &str, parent: &str) -> String {
        self.add(class, parent, false)
    }

    pub fn visible(&mut self, id: &str) -> &mut Self {
        self.visible.insert(id.to_string());
        self
    }

    pub fn build(&self) -> Result<Scene, SceneError> {
        Scene::from_doc(SceneDoc {
            id: self.id.clone(),
            room_type: self.room_type,
            objects: self.objects.clone(),
            graph: AffiliationGraph {
                root: ROOT_ID.to_string(),
                nodes: self.objects.iter().map(|o| o.id.clone()).collect(),
                parent: self.parent.clone(),
            },
            initially_visible: self.visible.clone(),
            seed: 0,
        })
    }
}
