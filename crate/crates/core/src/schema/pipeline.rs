//! The schema analysis pipeline: consumes committed writes from a bounded
//! queue, classifies each value and persists the schema table.
//!
//! Progress is tracked by a cursor over the global write order
//! `(block_num, tx_num, write_pos)` stored alongside the schema tables. On
//! start the pipeline replays any valid history entries past its cursor, so a
//! crash or a dropped queue never loses classifications; queued items at or
//! behind the cursor are skipped.

use std::time::Duration;

use crossbeam_channel::{Receiver, RecvTimeoutError};

use super::table::SchemaTable;
use crate::model::{StateVersion, Timestamp};
use crate::store::{SchemaCursor, Store, StoreError};
use crate::sync::StopSignal;

const BATCH: usize = 256;

/// One committed write or delete of a valid transaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaItem {
    pub key: String,
    pub version: StateVersion,
    pub write_pos: u64,
    /// `None` for deletes.
    pub value: Option<String>,
    pub timestamp: Timestamp,
}

impl SchemaItem {
    pub fn position(&self) -> (u64, u64, u64) {
        (self.version.block_num, self.version.tx_num, self.write_pos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchemaProgress {
    /// Items classified since the pipeline was opened.
    pub items: u64,
    pub cursor: SchemaCursor,
}

#[derive(Debug, thiserror::Error)]
#[error("schema pipeline stopped at {cursor:?}: {source}")]
pub struct SchemaPipelineError {
    #[source]
    pub source: StoreError,
    /// Last persisted position; processing resumes after it.
    pub cursor: SchemaCursor,
}

pub struct SchemaPipeline {
    store: Store,
    table: SchemaTable,
    cursor: SchemaCursor,
    items: u64,
}

impl SchemaPipeline {
    pub fn open(store: Store) -> Result<Self, StoreError> {
        let (table, cursor) = {
            let snap = store.snapshot()?;
            (snap.load_schema_table()?, snap.schema_cursor()?)
        };
        Ok(SchemaPipeline {
            store,
            table,
            cursor,
            items: 0,
        })
    }

    pub fn table(&self) -> &SchemaTable {
        &self.table
    }

    pub fn cursor(&self) -> SchemaCursor {
        self.cursor
    }

    pub fn progress(&self) -> SchemaProgress {
        SchemaProgress {
            items: self.items,
            cursor: self.cursor,
        }
    }

    /// Classifies every committed write past the cursor.
    pub fn catch_up(&mut self) -> Result<u64, SchemaPipelineError> {
        let mut total = 0;
        loop {
            let backlog = self
                .store
                .snapshot()
                .and_then(|s| s.schema_backlog(self.cursor, BATCH * 4))
                .map_err(|source| SchemaPipelineError {
                    source,
                    cursor: self.cursor,
                })?;
            if backlog.is_empty() {
                return Ok(total);
            }
            total += self.process_batch(&backlog)?;
        }
    }

    /// Classifies `items` in order and persists the result atomically.
    /// Returns the number of items that were past the cursor.
    pub fn process_batch(&mut self, items: &[SchemaItem]) -> Result<u64, SchemaPipelineError> {
        let mut classified = Vec::new();
        let mut processed = 0;
        let mut cursor = self.cursor;
        for item in items {
            if cursor.is_some_and(|c| item.position() <= c) {
                continue;
            }
            match &item.value {
                Some(value) => {
                    let c = self.table.classify(&item.key, value, item.timestamp);
                    classified.push((item.key.clone(), item.version, c.schema_id));
                }
                None => self.table.remove(&item.key),
            }
            cursor = Some(item.position());
            processed += 1;
        }
        let Some(position) = cursor.filter(|_| processed > 0) else {
            return Ok(0);
        };
        let changes = self.table.take_changes();
        let persisted = self.store.begin_schema_txn().and_then(|w| {
            w.apply_schema_changes(&changes, &classified, position)?;
            w.commit()
        });
        if let Err(source) = persisted {
            // The in-memory table ran ahead of the store; fall back to what is durable.
            if let Ok(snap) = self.store.snapshot() {
                if let (Ok(table), Ok(c)) = (snap.load_schema_table(), snap.schema_cursor()) {
                    self.table = table;
                    self.cursor = c;
                }
            }
            return Err(SchemaPipelineError {
                source,
                cursor: self.cursor,
            });
        }
        self.cursor = Some(position);
        self.items += processed;
        Ok(processed)
    }

    /// Drains `queue` until it disconnects or `stop` is triggered.
    ///
    /// `on_progress` runs after every persisted batch.
    pub fn run(
        &mut self,
        queue: &Receiver<SchemaItem>,
        stop: &StopSignal,
        mut on_progress: impl FnMut(SchemaProgress),
    ) -> Result<SchemaProgress, SchemaPipelineError> {
        if self.catch_up()? > 0 {
            on_progress(self.progress());
        }
        let mut batch = Vec::with_capacity(BATCH);
        loop {
            if stop.is_triggered() {
                break;
            }
            match queue.recv_timeout(Duration::from_millis(50)) {
                Ok(item) => batch.push(item),
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => break,
            }
            while batch.len() < BATCH {
                match queue.try_recv() {
                    Ok(item) => batch.push(item),
                    Err(_) => break,
                }
            }
            self.process_batch(&batch)?;
            batch.clear();
            on_progress(self.progress());
        }
        Ok(self.progress())
    }
}
