//! Schema extraction and comparison for JSON state values.
//!
//! A [`SchemaTree`] records the hierarchical structure and leaf types of a
//! value. Two trees are compared through their canonical path sets: the set of
//! `(dotted path, leaf type)` pairs, where array nesting is rendered as the
//! literal segment `[]`.

mod pipeline;
mod table;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub use pipeline::{SchemaItem, SchemaPipeline, SchemaPipelineError, SchemaProgress};
pub use table::{Classification, SchemaRecord, SchemaTable, TableChanges, NON_JSON_SCHEMA_ID};

/// Path segment standing for "any element of this array".
pub const ARRAY_SEGMENT: &str = "[]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LeafType {
    String,
    Number,
    Boolean,
    Null,
    Mixed,
    Binary,
}

impl LeafType {
    pub fn as_str(self) -> &'static str {
        match self {
            LeafType::String => "string",
            LeafType::Number => "number",
            LeafType::Boolean => "boolean",
            LeafType::Null => "null",
            LeafType::Mixed => "mixed",
            LeafType::Binary => "binary",
        }
    }
}

impl fmt::Display for LeafType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum SchemaNode {
    Object { fields: BTreeMap<String, SchemaNode> },
    Array { items: Box<SchemaNode> },
    String,
    Number,
    Boolean,
    Null,
    Mixed,
    Binary,
}

impl SchemaNode {
    fn of_value(value: &Value) -> SchemaNode {
        match value {
            Value::Null => SchemaNode::Null,
            Value::Bool(_) => SchemaNode::Boolean,
            Value::Number(_) => SchemaNode::Number,
            Value::String(_) => SchemaNode::String,
            Value::Object(map) => SchemaNode::Object {
                fields: map.iter().map(|(k, v)| (k.clone(), SchemaNode::of_value(v))).collect(),
            },
            Value::Array(items) => {
                let merged = items
                    .iter()
                    .map(SchemaNode::of_value)
                    .reduce(SchemaNode::merge)
                    .unwrap_or(SchemaNode::Null);
                SchemaNode::Array { items: Box::new(merged) }
            }
        }
    }

    /// Combines the schemas of two array elements.
    fn merge(self, other: SchemaNode) -> SchemaNode {
        if self == other {
            return self;
        }
        match (self, other) {
            (SchemaNode::Object { mut fields }, SchemaNode::Object { fields: theirs }) => {
                for (name, node) in theirs {
                    let merged = match fields.remove(&name) {
                        Some(mine) => mine.merge(node),
                        None => node,
                    };
                    fields.insert(name, merged);
                }
                SchemaNode::Object { fields }
            }
            (SchemaNode::Array { items: a }, SchemaNode::Array { items: b }) => SchemaNode::Array {
                items: Box::new(a.merge(*b)),
            },
            _ => SchemaNode::Mixed,
        }
    }

    fn leaf_type(&self) -> Option<LeafType> {
        Some(match self {
            SchemaNode::String => LeafType::String,
            SchemaNode::Number => LeafType::Number,
            SchemaNode::Boolean => LeafType::Boolean,
            SchemaNode::Null => LeafType::Null,
            SchemaNode::Mixed => LeafType::Mixed,
            SchemaNode::Binary => LeafType::Binary,
            SchemaNode::Object { .. } | SchemaNode::Array { .. } => return None,
        })
    }

    fn collect_paths(&self, prefix: &mut Vec<String>, out: &mut BTreeSet<SchemaPath>) {
        match self {
            SchemaNode::Object { fields } => {
                for (name, node) in fields {
                    prefix.push(name.clone());
                    node.collect_paths(prefix, out);
                    prefix.pop();
                }
            }
            SchemaNode::Array { items } => {
                prefix.push(ARRAY_SEGMENT.to_string());
                items.collect_paths(prefix, out);
                prefix.pop();
            }
            leaf => {
                out.insert(SchemaPath {
                    path: prefix.join("."),
                    leaf: leaf.leaf_type().expect("leaf node"),
                });
            }
        }
    }

    fn collect_levels(&self, depth: usize, levels: &mut Vec<BTreeSet<String>>) {
        match self {
            SchemaNode::Object { fields } => {
                if !fields.is_empty() && levels.len() <= depth {
                    levels.resize_with(depth + 1, BTreeSet::new);
                }
                for (name, node) in fields {
                    levels[depth].insert(name.clone());
                    node.collect_levels(depth + 1, levels);
                }
            }
            SchemaNode::Array { items } => items.collect_levels(depth, levels),
            _ => {}
        }
    }
}

/// One entry of a canonical path set.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SchemaPath {
    pub path: String,
    pub leaf: LeafType,
}

impl fmt::Display for SchemaPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.leaf)
    }
}

/// Canonical schema of one state value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaTree {
    root: SchemaNode,
    paths: BTreeSet<SchemaPath>,
}

impl SchemaTree {
    pub fn from_root(root: SchemaNode) -> Self {
        let mut paths = BTreeSet::new();
        root.collect_paths(&mut Vec::new(), &mut paths);
        SchemaTree { root, paths }
    }

    pub fn root(&self) -> &SchemaNode {
        &self.root
    }

    pub fn canonical_paths(&self) -> &BTreeSet<SchemaPath> {
        &self.paths
    }

    /// True when the value could not be parsed as JSON.
    pub fn is_binary(&self) -> bool {
        self.root == SchemaNode::Binary
    }

    /// Maximum nesting depth of object fields; top-level fields are level 1.
    pub fn level_count(&self) -> usize {
        self.levels().len()
    }

    /// Number of distinct field names at each level, outermost first.
    pub fn props_per_level(&self) -> Vec<usize> {
        self.levels().iter().map(BTreeSet::len).collect()
    }

    fn levels(&self) -> Vec<BTreeSet<String>> {
        let mut levels = Vec::new();
        self.root.collect_levels(0, &mut levels);
        levels
    }

    /// Stable 64-bit digest of the canonical path set.
    pub fn fingerprint(&self) -> u64 {
        let mut hasher = Sha256::new();
        for p in &self.paths {
            hasher.update(p.path.as_bytes());
            hasher.update([0u8]);
            hasher.update(p.leaf.as_str().as_bytes());
            hasher.update(b"\n");
        }
        let digest = hasher.finalize();
        u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

impl Serialize for SchemaTree {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.root.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SchemaTree {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        SchemaNode::deserialize(deserializer).map(SchemaTree::from_root)
    }
}

/// Derives the schema of a raw state value. Unparseable input yields a single
/// `binary` leaf.
pub fn extract_schema(value: &str) -> SchemaTree {
    match serde_json::from_str::<Value>(value) {
        Ok(v) => extract_schema_value(&v),
        Err(_) => SchemaTree::from_root(SchemaNode::Binary),
    }
}

pub fn extract_schema_value(value: &Value) -> SchemaTree {
    SchemaTree::from_root(SchemaNode::of_value(value))
}

/// Outcome of comparing a freshly extracted schema against a stored one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CompareResult {
    /// Same canonical path set.
    Equal,
    /// The existing schema is a strict part of the extracted one.
    Contain,
    /// The extracted schema is a strict part of the existing one.
    BeContained,
    /// Neither contains the other.
    New,
}

pub fn compare(extracted: &SchemaTree, existing: &SchemaTree) -> CompareResult {
    let (x, e) = (&extracted.paths, &existing.paths);
    if x == e {
        CompareResult::Equal
    } else if e.is_subset(x) {
        CompareResult::Contain
    } else if x.is_subset(e) {
        CompareResult::BeContained
    } else {
        CompareResult::New
    }
}
