//! Static object catalog: class name → default attributes and placement roles.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::scene::{ObjectAttr, RoomType};

const BUNDLED: &str = include_str!("../data/catalog.json");

/// One catalog row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    pub pickupable: bool,
    pub openable: bool,
    pub toggleable: bool,
    pub receptacle: bool,
    /// May be placed as a top-level navigable receptacle.
    pub anchor: bool,
    /// May be placed as a closed container on top of an anchor.
    pub nestable: bool,
    pub rooms: Vec<RoomType>,
    pub max_per_scene: usize,
}

impl ClassEntry {
    pub fn is_item(&self) -> bool {
        !self.anchor && !self.nestable
    }

    /// Attributes for an instance of this class. `navigable` is decided by placement.
    pub fn attrs(&self, navigable: bool) -> ObjectAttr {
        ObjectAttr {
            pickupable: self.pickupable,
            openable: self.openable,
            toggleable: self.toggleable,
            receptacle: self.receptacle,
            navigable,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("catalog parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("catalog class {0} listed twice")]
    Duplicate(String),
    #[error("catalog class {class}: {problem}")]
    Invalid { class: String, problem: &'static str },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub version: String,
    classes: Vec<ClassEntry>,
    #[serde(skip)]
    by_name: BTreeMap<String, usize>,
}

impl Catalog {
    /// The catalog shipped with the crate.
    pub fn bundled() -> Self {
        Self::from_json(BUNDLED).expect("bundled catalog is valid")
    }

    /// Process-wide parsed copy of the bundled catalog.
    pub fn shared() -> &'static Catalog {
        static SHARED: std::sync::OnceLock<Catalog> = std::sync::OnceLock::new();
        SHARED.get_or_init(Catalog::bundled)
    }

    pub fn from_json(text: &str) -> Result<Self, CatalogError> {
        let mut catalog: Catalog = serde_json::from_str(text)?;
        catalog.reindex()?;
        Ok(catalog)
    }

    fn reindex(&mut self) -> Result<(), CatalogError> {
        self.by_name.clear();
        for (i, entry) in self.classes.iter().enumerate() {
            if self.by_name.insert(entry.name.clone(), i).is_some() {
                return Err(CatalogError::Duplicate(entry.name.clone()));
            }
            let invalid = |problem| CatalogError::Invalid { class: entry.name.clone(), problem };
            if entry.openable && !entry.receptacle {
                return Err(invalid("openable classes must be receptacles"));
            }
            if (entry.anchor || entry.nestable) && !entry.receptacle {
                return Err(invalid("anchors and containers must be receptacles"));
            }
            if entry.anchor && entry.pickupable {
                return Err(invalid("anchors cannot be pickupable"));
            }
            if entry.nestable && (!entry.openable || entry.pickupable) {
                return Err(invalid("nested containers must be openable and stationary"));
            }
            if entry.is_item() && !entry.pickupable && !entry.toggleable {
                return Err(invalid("items must be pickupable or toggleable"));
            }
            if entry.max_per_scene == 0 {
                return Err(invalid("max_per_scene must be positive"));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ClassEntry> {
        self.by_name.get(name).map(|&i| &self.classes[i])
    }

    /// Exact match first, then ASCII case-folded.
    pub fn normalize(&self, phrase: &str) -> Option<&str> {
        if let Some(e) = self.get(phrase) {
            return Some(&e.name);
        }
        self.classes
            .iter()
            .find(|e| e.name.eq_ignore_ascii_case(phrase))
            .map(|e| e.name.as_str())
    }

    pub fn classes(&self) -> &[ClassEntry] {
        &self.classes
    }

    pub fn anchors(&self, room: RoomType) -> impl Iterator<Item = &ClassEntry> {
        self.classes.iter().filter(move |e| e.anchor && e.rooms.contains(&room))
    }

    pub fn nestables(&self, room: RoomType) -> impl Iterator<Item = &ClassEntry> {
        self.classes.iter().filter(move |e| e.nestable && e.rooms.contains(&room))
    }

    pub fn items(&self, room: RoomType) -> impl Iterator<Item = &ClassEntry> {
        self.classes.iter().filter(move |e| e.is_item() && e.rooms.contains(&room))
    }
}

impl Default for Catalog {
    fn default() -> Self {
        Self::bundled()
    }
}
