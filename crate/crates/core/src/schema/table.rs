use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use super::{compare, extract_schema, CompareResult, SchemaTree};
use crate::model::Timestamp;

/// Class assigned to values that are not JSON. It never has a record.
pub const NON_JSON_SCHEMA_ID: u64 = 0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SchemaRecord {
    pub schema_id: u64,
    pub tree: SchemaTree,
    pub level_count: usize,
    pub props_per_level: Vec<usize>,
    pub member_count: u64,
    pub created_at: Timestamp,
    pub updated_at: Timestamp,
}

impl SchemaRecord {
    fn new(schema_id: u64, tree: SchemaTree, at: Timestamp) -> Self {
        SchemaRecord {
            schema_id,
            level_count: tree.level_count(),
            props_per_level: tree.props_per_level(),
            tree,
            member_count: 0,
            created_at: at,
            updated_at: at,
        }
    }

    fn replace_tree(&mut self, tree: SchemaTree, at: Timestamp) {
        self.level_count = tree.level_count();
        self.props_per_level = tree.props_per_level();
        self.tree = tree;
        self.updated_at = at;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Classification {
    pub schema_id: u64,
    /// `None` for the non-JSON class.
    pub outcome: Option<CompareResult>,
}

/// Pending writes accumulated since the last [`SchemaTable::take_changes`].
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct TableChanges {
    pub records: Vec<SchemaRecord>,
    /// `(key, Some(id))` upserts a membership, `(key, None)` removes it.
    pub members: Vec<(String, Option<u64>)>,
    pub next_schema_id: u64,
}

impl TableChanges {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty() && self.members.is_empty()
    }
}

/// The schema table plus the key-to-schema membership map.
///
/// Lookups scan records in ascending id. Equality is resolved through the
/// fingerprint index; containment falls back to a linear scan.
#[derive(Debug, Clone, Default)]
pub struct SchemaTable {
    records: BTreeMap<u64, SchemaRecord>,
    by_fingerprint: HashMap<u64, Vec<u64>>,
    members: HashMap<String, u64>,
    next_id: u64,
    dirty_records: BTreeSet<u64>,
    dirty_members: BTreeMap<String, Option<u64>>,
}

impl SchemaTable {
    pub fn new() -> Self {
        SchemaTable {
            next_id: 1,
            ..Default::default()
        }
    }

    /// Rebuilds a table from persisted rows.
    pub fn restore(
        records: impl IntoIterator<Item = SchemaRecord>,
        members: impl IntoIterator<Item = (String, u64)>,
        next_id: u64,
    ) -> Self {
        let mut table = SchemaTable::new();
        for r in records {
            table.by_fingerprint.entry(r.tree.fingerprint()).or_default().push(r.schema_id);
            table.next_id = table.next_id.max(r.schema_id + 1);
            table.records.insert(r.schema_id, r);
        }
        for ids in table.by_fingerprint.values_mut() {
            ids.sort_unstable();
        }
        table.members = members.into_iter().collect();
        table.next_id = table.next_id.max(next_id);
        table
    }

    pub fn records(&self) -> impl Iterator<Item = &SchemaRecord> {
        self.records.values()
    }

    pub fn record(&self, id: u64) -> Option<&SchemaRecord> {
        self.records.get(&id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn member_of(&self, key: &str) -> Option<u64> {
        self.members.get(key).copied()
    }

    pub fn member_total(&self) -> usize {
        self.members.len()
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    /// Classifies `value` as the latest value of `key`, updating the table and
    /// moving the key's membership if its class changed.
    pub fn classify(&mut self, key: &str, value: &str, at: Timestamp) -> Classification {
        let tree = extract_schema(value);
        let classification = if tree.is_binary() {
            Classification {
                schema_id: NON_JSON_SCHEMA_ID,
                outcome: None,
            }
        } else {
            self.match_tree(tree, at)
        };
        self.set_member(key, Some(classification.schema_id));
        classification
    }

    /// Drops the membership of a deleted key.
    pub fn remove(&mut self, key: &str) {
        self.set_member(key, None);
    }

    fn match_tree(&mut self, tree: SchemaTree, at: Timestamp) -> Classification {
        let fp = tree.fingerprint();
        if let Some(ids) = self.by_fingerprint.get(&fp) {
            if let Some(&id) = ids.iter().find(|id| self.records[id].tree == tree) {
                return Classification {
                    schema_id: id,
                    outcome: Some(CompareResult::Equal),
                };
            }
        }

        let mut first_contained_by = None;
        for (&id, record) in &self.records {
            match compare(&tree, &record.tree) {
                CompareResult::Contain => {
                    self.replace(id, tree, at);
                    return Classification {
                        schema_id: id,
                        outcome: Some(CompareResult::Contain),
                    };
                }
                CompareResult::BeContained if first_contained_by.is_none() => first_contained_by = Some(id),
                _ => {}
            }
        }
        if let Some(id) = first_contained_by {
            return Classification {
                schema_id: id,
                outcome: Some(CompareResult::BeContained),
            };
        }

        let id = self.next_id;
        self.next_id += 1;
        self.by_fingerprint.entry(fp).or_default().push(id);
        self.records.insert(id, SchemaRecord::new(id, tree, at));
        self.dirty_records.insert(id);
        Classification {
            schema_id: id,
            outcome: Some(CompareResult::New),
        }
    }

    fn replace(&mut self, id: u64, tree: SchemaTree, at: Timestamp) {
        let record = self.records.get_mut(&id).expect("record exists");
        let old_fp = record.tree.fingerprint();
        let new_fp = tree.fingerprint();
        record.replace_tree(tree, at);
        if let Some(ids) = self.by_fingerprint.get_mut(&old_fp) {
            ids.retain(|&i| i != id);
            if ids.is_empty() {
                self.by_fingerprint.remove(&old_fp);
            }
        }
        let ids = self.by_fingerprint.entry(new_fp).or_default();
        ids.push(id);
        ids.sort_unstable();
        self.dirty_records.insert(id);
    }

    fn set_member(&mut self, key: &str, id: Option<u64>) {
        let previous = match id {
            Some(id) => self.members.insert(key.to_string(), id),
            None => self.members.remove(key),
        };
        if previous == id {
            return;
        }
        if let Some(old) = previous {
            if let Some(r) = self.records.get_mut(&old) {
                r.member_count -= 1;
                self.dirty_records.insert(old);
            }
        }
        if let Some(new) = id {
            if let Some(r) = self.records.get_mut(&new) {
                r.member_count += 1;
                self.dirty_records.insert(new);
            }
        }
        self.dirty_members.insert(key.to_string(), id);
    }

    pub fn take_changes(&mut self) -> TableChanges {
        let records = std::mem::take(&mut self.dirty_records)
            .into_iter()
            .filter_map(|id| self.records.get(&id).cloned())
            .collect();
        let members = std::mem::take(&mut self.dirty_members).into_iter().collect();
        TableChanges {
            records,
            members,
            next_schema_id: self.next_id,
        }
    }

    pub fn has_changes(&self) -> bool {
        !(self.dirty_records.is_empty() && self.dirty_members.is_empty())
    }
}
