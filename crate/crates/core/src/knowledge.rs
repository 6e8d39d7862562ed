//! Curated exploratory-testing knowledge: black-box criteria, tours and
//! mobile testing guidelines.
//!
//! The catalog is data, loaded from a TOML document with one `[[item]]` table
//! per resource (see `assets/catalog.toml`). It is immutable once loaded.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CATALOG_FORMAT_VERSION: &str = "1";

const REQUIRED_ITEMS: [&str; 8] = [
    "equivalence-partitioning",
    "boundary-value-analysis",
    "bad-neighborhood-tour",
    "network-connections",
    "geolocation",
    "bluetooth",
    "camera",
    "ui-events",
];
const MIN_OTHER_TOURS: usize = 4;

const SEED_CATALOG: &str = include_str!("../assets/catalog.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    Criteria,
    Tours,
    MobileGuidelines,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Criteria, Group::Tours, Group::MobileGuidelines];

    pub fn key(self) -> &'static str {
        match self {
            Group::Criteria => "criteria",
            Group::Tours => "tours",
            Group::MobileGuidelines => "mobile-guidelines",
        }
    }

    pub fn heading(self) -> &'static str {
        match self {
            Group::Criteria => "(i) Black-box testing criteria",
            Group::Tours => "(ii) Exploratory testing tours",
            Group::MobileGuidelines => "(iii) Mobile app testing guidelines",
        }
    }

    fn from_key(key: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.key() == key)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct KnowledgeItem {
    pub item_id: String,
    pub group: Group,
    pub title: String,
    pub body: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub follow_up_questions: Vec<String>,
}

impl KnowledgeItem {
    /// Body followed by the follow-up questions, if the item has any.
    pub fn render(&self) -> String {
        let mut out = format!("{}\n{}", self.title, self.body.trim());
        if !self.follow_up_questions.is_empty() {
            out.push_str("\nAsk yourself:");
            for q in &self.follow_up_questions {
                out.push_str("\n  - ");
                out.push_str(q);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Catalog {
    pub version: String,
    pub items: Vec<KnowledgeItem>,
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("cannot read catalog {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("catalog is not valid TOML: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("unsupported catalog version {0:?} (expected {CATALOG_FORMAT_VERSION:?})")]
    Version(String),
    #[error("item #{index} has an empty id")]
    EmptyId { index: usize },
    #[error("duplicate item id {id:?}")]
    DuplicateSlug { id: String },
    #[error("item {id:?} has unknown group {group:?} (expected criteria, tours or mobile-guidelines)")]
    UnknownGroup { id: String, group: String },
    #[error("item {id:?} has an empty {field}")]
    EmptyField { id: String, field: &'static str },
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("no resource named {key:?}")]
pub struct LookupError {
    pub key: String,
    pub nearest: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCatalog {
    version: String,
    #[serde(default, rename = "item")]
    items: Vec<RawItem>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawItem {
    id: String,
    group: String,
    title: String,
    body: String,
    #[serde(default)]
    questions: Vec<String>,
}

/// Parses and validates a catalog document.
pub fn load_catalog(source: &str) -> Result<Catalog, CatalogError> {
    let raw: RawCatalog = toml::from_str(source)?;
    if raw.version != CATALOG_FORMAT_VERSION {
        return Err(CatalogError::Version(raw.version));
    }
    let mut seen = HashSet::new();
    let mut items = Vec::with_capacity(raw.items.len());
    for (index, item) in raw.items.into_iter().enumerate() {
        let id = item.id.trim().to_owned();
        if id.is_empty() {
            return Err(CatalogError::EmptyId { index });
        }
        if !seen.insert(id.clone()) {
            return Err(CatalogError::DuplicateSlug { id });
        }
        let group = Group::from_key(item.group.trim()).ok_or_else(|| CatalogError::UnknownGroup {
            id: id.clone(),
            group: item.group.clone(),
        })?;
        if item.title.trim().is_empty() {
            return Err(CatalogError::EmptyField { id, field: "title" });
        }
        if item.body.trim().is_empty() {
            return Err(CatalogError::EmptyField { id, field: "body" });
        }
        if item.questions.iter().any(|q| q.trim().is_empty()) {
            return Err(CatalogError::EmptyField { id, field: "question" });
        }
        items.push(KnowledgeItem {
            item_id: id,
            group,
            title: item.title.trim().to_owned(),
            body: item.body.trim().to_owned(),
            follow_up_questions: item.questions,
        });
    }
    Ok(Catalog {
        version: raw.version,
        items,
    })
}

impl Catalog {
    /// The catalog shipped with the crate.
    pub fn seed() -> Catalog {
        load_catalog(SEED_CATALOG).expect("bundled catalog is valid")
    }

    pub fn seed_source() -> &'static str {
        SEED_CATALOG
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Catalog, CatalogError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CatalogError::Io {
            path: path.display().to_string(),
            source,
        })?;
        load_catalog(&text)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, item_id: &str) -> Option<&KnowledgeItem> {
        self.items.iter().find(|i| i.item_id == item_id)
    }

    pub fn in_group(&self, group: Group) -> impl Iterator<Item = &KnowledgeItem> {
        self.items.iter().filter(move |i| i.group == group)
    }

    /// Keys in the order `list_topics` displays them.
    pub fn listed_keys(&self) -> Vec<&str> {
        Group::ALL
            .into_iter()
            .flat_map(|g| self.in_group(g).map(|i| i.item_id.as_str()))
            .collect()
    }

    pub fn list_topics(&self) -> String {
        let mut out =
            String::from("Here are the testing resources I know about. Reply with one of the keys to read more:");
        for group in Group::ALL {
            let mut items = self.in_group(group).peekable();
            if items.peek().is_none() {
                continue;
            }
            out.push_str("\n\n");
            out.push_str(group.heading());
            for item in items {
                out.push_str(&format!("\n  {} - {}", item.item_id, item.title));
            }
        }
        out
    }

    /// Exact slug match first, then a case-insensitive title match.
    pub fn lookup(&self, key: &str) -> Result<&KnowledgeItem, LookupError> {
        let key = key.trim();
        if let Some(item) = self.get(key) {
            return Ok(item);
        }
        let lowered = key.to_lowercase();
        if let Some(item) = self.items.iter().find(|i| i.title.to_lowercase() == lowered) {
            return Ok(item);
        }
        Err(LookupError {
            key: key.to_owned(),
            nearest: self.nearest_keys(&lowered),
        })
    }

    /// Required topics absent from this catalog: the two black-box criteria,
    /// the bad-neighborhood tour plus at least four more tours, and the five
    /// core mobile guideline areas.
    pub fn missing_required(&self) -> Vec<String> {
        let mut missing: Vec<String> = REQUIRED_ITEMS
            .iter()
            .filter(|id| self.get(id).is_none())
            .map(|id| id.to_string())
            .collect();
        let other_tours = self
            .in_group(Group::Tours)
            .filter(|i| i.item_id != "bad-neighborhood-tour")
            .count();
        if other_tours < MIN_OTHER_TOURS {
            missing.push(format!("{} more tour(s)", MIN_OTHER_TOURS - other_tours));
        }
        missing
    }

    fn nearest_keys(&self, lowered: &str) -> Vec<String> {
        const MAX: usize = 5;
        if lowered.is_empty() {
            return Vec::new();
        }
        let keys = self.listed_keys();
        let prefixed: Vec<String> = keys
            .iter()
            .filter(|k| k.starts_with(lowered) || lowered.starts_with(*k))
            .take(MAX)
            .map(|k| k.to_string())
            .collect();
        if !prefixed.is_empty() {
            return prefixed;
        }
        let first_word = lowered
            .split(|c: char| c == '-' || c.is_whitespace())
            .next()
            .unwrap_or(lowered);
        keys.iter()
            .filter(|k| k.contains(first_word))
            .take(MAX)
            .map(|k| k.to_string())
            .collect()
    }
}
