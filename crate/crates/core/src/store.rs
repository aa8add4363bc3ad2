//! Embedded persistent store.
//!
//! One SQLite database in WAL mode holds the block index, the transaction
//! index, the per-key history index, the world state and the schema tables.
//! There is a single writer per store; readers open their own connection and
//! read inside a snapshot, so they never observe a partially committed block.
//!
//! Directory layout: `<dir>/refiner.sqlite3` plus SQLite's `-wal`/`-shm`
//! side files.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{RecvTimeoutError, Sender};

use rusqlite::{params, Connection, ErrorCode, OpenFlags, OptionalExtension, Row, Transaction, TransactionBehavior};

use crate::model::{ReadItem, StateVersion, Timestamp, TxType, ValidationCode};
use crate::records::{
    BlockWithTransactions, HistoryEntry, ParsedBlock, ParsedTransaction, TransactionRecord, WorldStateEntry, WriteOp,
};
use crate::schema::{SchemaItem, SchemaRecord, SchemaTable, SchemaTree, TableChanges};

pub const DB_FILE: &str = "refiner.sqlite3";

const SCHEMA_SQL: &str = r#"
CREATE TABLE IF NOT EXISTS meta (
    k TEXT PRIMARY KEY,
    v INTEGER NOT NULL
) WITHOUT ROWID;

CREATE TABLE IF NOT EXISTS blocks (
    number INTEGER PRIMARY KEY,
    block_hash TEXT NOT NULL,
    previous_hash TEXT NOT NULL,
    data_hash TEXT NOT NULL,
    channel_id TEXT NOT NULL,
    tx_count INTEGER NOT NULL,
    commit_time INTEGER NOT NULL
);

CREATE TABLE IF NOT EXISTS transactions (
    block_num INTEGER NOT NULL,
    tx_num INTEGER NOT NULL,
    tx_id TEXT NOT NULL UNIQUE,
    channel_id TEXT NOT NULL,
    timestamp INTEGER NOT NULL,
    tx_type TEXT NOT NULL,
    creator_msp TEXT NOT NULL,
    creator_subject TEXT NOT NULL,
    chaincode_name TEXT NOT NULL,
    function TEXT NOT NULL,
    args TEXT NOT NULL,
    endorser_msps TEXT NOT NULL,
    validation_code INTEGER NOT NULL,
    is_valid INTEGER NOT NULL,
    read_count INTEGER NOT NULL,
    write_count INTEGER NOT NULL,
    read_set TEXT NOT NULL,
    PRIMARY KEY (block_num, tx_num)
) WITHOUT ROWID;
CREATE INDEX IF NOT EXISTS tx_by_creator ON transactions (creator_msp);
CREATE INDEX IF NOT EXISTS tx_by_function ON transactions (chaincode_name, function);
CREATE INDEX IF NOT EXISTS tx_by_channel ON transactions (channel_id);
CREATE INDEX IF NOT EXISTS tx_by_time ON transactions (timestamp);
CREATE INDEX IF NOT EXISTS tx_by_validity ON transactions (is_valid);

CREATE TABLE IF NOT EXISTS tx_endorsers (
    msp_id TEXT NOT NULL,
    block_num INTEGER NOT NULL,
    tx_num INTEGER NOT NULL,
    PRIMARY KEY (msp_id, block_num, tx_num)
) WITHOUT ROWID;

CREATE TABLE IF NOT EXISTS history (
    key TEXT NOT NULL,
    block_num INTEGER NOT NULL,
    tx_num INTEGER NOT NULL,
    write_pos INTEGER NOT NULL,
    tx_id TEXT NOT NULL,
    op TEXT NOT NULL,
    value TEXT,
    is_valid INTEGER NOT NULL,
    PRIMARY KEY (key, block_num, tx_num, write_pos)
) WITHOUT ROWID;
CREATE INDEX IF NOT EXISTS history_by_position ON history (block_num, tx_num, write_pos);

CREATE TABLE IF NOT EXISTS world_state (
    key TEXT PRIMARY KEY,
    value TEXT NOT NULL,
    block_num INTEGER NOT NULL,
    tx_num INTEGER NOT NULL
) WITHOUT ROWID;

CREATE TABLE IF NOT EXISTS schemas (
    schema_id INTEGER PRIMARY KEY,
    tree TEXT NOT NULL,
    fingerprint INTEGER NOT NULL,
    level_count INTEGER NOT NULL,
    props_per_level TEXT NOT NULL,
    member_count INTEGER NOT NULL,
    created_at INTEGER NOT NULL,
    updated_at INTEGER NOT NULL
);

-- Class of the state version (block_num, tx_num) of key. A state whose
-- current version has no row here is not yet classified.
CREATE TABLE IF NOT EXISTS schema_members (
    key TEXT PRIMARY KEY,
    schema_id INTEGER NOT NULL,
    block_num INTEGER NOT NULL,
    tx_num INTEGER NOT NULL
) WITHOUT ROWID;
CREATE INDEX IF NOT EXISTS members_by_schema ON schema_members (schema_id);
"#;

const META_HEIGHT: &str = "recorded_block_height";
const META_NEXT_SCHEMA: &str = "next_schema_id";
const META_CURSOR: [&str; 3] = ["schema_cursor_block", "schema_cursor_tx", "schema_cursor_pos"];

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("storage full")]
    StorageFull,
    #[error("store corrupted: {0}")]
    Corruption(String),
    #[error("storage error: {0}")]
    Sqlite(rusqlite::Error),
}

impl From<rusqlite::Error> for StoreError {
    fn from(e: rusqlite::Error) -> Self {
        match e.sqlite_error_code() {
            Some(ErrorCode::DiskFull) => StoreError::StorageFull,
            Some(ErrorCode::DatabaseCorrupt) | Some(ErrorCode::NotADatabase) => StoreError::Corruption(e.to_string()),
            _ => StoreError::Sqlite(e),
        }
    }
}

fn corrupt(what: impl std::fmt::Display) -> StoreError {
    StoreError::Corruption(what.to_string())
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

/// Position of the schema pipeline in the global write order.
pub type SchemaCursor = Option<(u64, u64, u64)>;

pub struct Store {
    conn: Connection,
    dir: PathBuf,
    shared: Arc<Shared>,
}

/// State common to all handles from [`Store::reopen`].
#[derive(Default)]
struct Shared {
    /// In-process writers queue here instead of in SQLite's sleeping busy
    /// handler. Writers in other processes still use the busy timeout.
    write_gate: Mutex<()>,
    /// Set while a [`Checkpointer`] runs; writers then checkpoint inline only
    /// past [`BACKSTOP_PAGES`].
    deferred_checkpoints: AtomicBool,
}

/// Page cache per connection, in KiB (negative per SQLite convention).
const CACHE_KIB: i64 = -65536;
const BACKSTOP_PAGES: i64 = 20_000;
const CHECKPOINT_INTERVAL: Duration = Duration::from_millis(250);

impl Store {
    /// Opens (creating if needed) a store for reading and writing.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir).map_err(|e| corrupt(format!("cannot create {}: {e}", dir.display())))?;
        let conn = Connection::open(dir.join(DB_FILE))?;
        conn.busy_timeout(Duration::from_secs(60))?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "NORMAL")?;
        conn.pragma_update(None, "cache_size", CACHE_KIB)?;
        conn.execute_batch(SCHEMA_SQL)?;
        Ok(Store {
            conn,
            dir,
            shared: Arc::default(),
        })
    }

    /// Opens an existing store without write access.
    pub fn open_read_only(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let file = dir.join(DB_FILE);
        if !file.exists() {
            return Err(StoreError::NotFound(format!("no store at {}", dir.display())));
        }
        let conn = Connection::open_with_flags(&file, OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX)?;
        conn.busy_timeout(Duration::from_secs(60))?;
        conn.pragma_update(None, "cache_size", CACHE_KIB)?;
        Ok(Store {
            conn,
            dir,
            shared: Arc::default(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Another connection to the same store, for a concurrent reader or the
    /// schema pipeline.
    pub fn reopen(&self) -> Result<Store> {
        let mut store = Store::open(&self.dir)?;
        store.shared = Arc::clone(&self.shared);
        if self.shared.deferred_checkpoints.load(Ordering::Relaxed) {
            store.conn.pragma_update(None, "wal_autocheckpoint", BACKSTOP_PAGES)?;
        }
        Ok(store)
    }

    /// Moves WAL checkpointing to a background thread for as long as the
    /// returned handle lives. Applies to this handle and to later
    /// [`Store::reopen`] handles, so call it before reopening.
    pub fn spawn_checkpointer(&mut self) -> Result<Checkpointer> {
        let conn = Connection::open(self.dir.join(DB_FILE))?;
        conn.busy_timeout(Duration::from_secs(60))?;
        self.conn.pragma_update(None, "wal_autocheckpoint", BACKSTOP_PAGES)?;
        self.shared.deferred_checkpoints.store(true, Ordering::Relaxed);
        let (stop, ticks) = crossbeam_channel::bounded::<()>(0);
        let handle = std::thread::Builder::new()
            .name("wal-checkpoint".into())
            .spawn(move || loop {
                let last = !matches!(ticks.recv_timeout(CHECKPOINT_INTERVAL), Err(RecvTimeoutError::Timeout));
                if let Err(e) = conn.query_row("PRAGMA wal_checkpoint(PASSIVE)", [], |_| Ok(())) {
                    log::warn!("wal checkpoint failed: {e}");
                }
                if last {
                    break;
                }
            })
            .map_err(|e| corrupt(format!("cannot spawn checkpointer: {e}")))?;
        Ok(Checkpointer {
            stop: Some(stop),
            handle: Some(handle),
            shared: Arc::clone(&self.shared),
        })
    }

    /// Starts the atomic scope in which one block is committed.
    pub fn begin_block_txn(&mut self) -> Result<WriteTxn<'_>> {
        let gate = self.shared.write_gate.lock().unwrap_or_else(|e| e.into_inner());
        Ok(WriteTxn {
            tx: self.conn.transaction_with_behavior(TransactionBehavior::Immediate)?,
            _gate: gate,
        })
    }

    /// Starts the atomic scope in which a batch of schema classifications is
    /// persisted.
    pub fn begin_schema_txn(&mut self) -> Result<WriteTxn<'_>> {
        self.begin_block_txn()
    }

    /// A read snapshot: every query through it sees one committed state.
    pub fn snapshot(&self) -> Result<Snapshot<'_>> {
        let tx = self.conn.unchecked_transaction()?;
        // Pin the snapshot now rather than at the first query.
        tx.query_row("SELECT count(*) FROM meta", [], |_| Ok(()))?;
        Ok(Snapshot { tx })
    }

    pub fn recorded_height(&self) -> Result<i64> {
        self.snapshot()?.recorded_height()
    }
}

fn get_meta(conn: &Connection, key: &str, default: i64) -> Result<i64> {
    Ok(conn
        .query_row("SELECT v FROM meta WHERE k = ?1", [key], |r| r.get(0))
        .optional()?
        .unwrap_or(default))
}

fn u(v: i64) -> u64 {
    v as u64
}

fn i(v: u64) -> i64 {
    v as i64
}

fn json_col<T: serde::de::DeserializeOwned>(text: &str) -> rusqlite::Result<T> {
    serde_json::from_str(text).map_err(|e| rusqlite::Error::FromSqlConversionFailure(0, rusqlite::types::Type::Text, Box::new(e)))
}

pub(crate) const TX_COLUMNS: &str = "tx_id, block_num, tx_num, channel_id, timestamp, tx_type, creator_msp, creator_subject, \
     chaincode_name, function, args, endorser_msps, validation_code, is_valid, read_count, write_count";

pub(crate) fn tx_from_row(r: &Row<'_>) -> rusqlite::Result<ParsedTransaction> {
    let tx_type: String = r.get(5)?;
    Ok(ParsedTransaction {
        tx_id: r.get(0)?,
        block_num: u(r.get(1)?),
        tx_num: u(r.get(2)?),
        channel_id: r.get(3)?,
        timestamp: Timestamp::from_micros(r.get(4)?),
        tx_type: TxType::parse(&tx_type).ok_or_else(|| {
            rusqlite::Error::FromSqlConversionFailure(5, rusqlite::types::Type::Text, format!("tx_type {tx_type}").into())
        })?,
        creator_msp: r.get(6)?,
        creator_subject: r.get(7)?,
        chaincode_name: r.get(8)?,
        function: r.get(9)?,
        args: json_col(&r.get::<_, String>(10)?)?,
        endorser_msps: json_col(&r.get::<_, String>(11)?)?,
        validation_code: ValidationCode(r.get::<_, i64>(12)? as u8),
        is_valid: r.get(13)?,
        read_count: u(r.get(14)?),
        write_count: u(r.get(15)?),
    })
}

pub(crate) const HISTORY_COLUMNS: &str = "key, block_num, tx_num, write_pos, tx_id, op, value, is_valid";

pub(crate) fn history_from_row(r: &Row<'_>) -> rusqlite::Result<HistoryEntry> {
    let op: String = r.get(5)?;
    Ok(HistoryEntry {
        key: r.get(0)?,
        block_num: u(r.get(1)?),
        tx_num: u(r.get(2)?),
        write_pos: u(r.get(3)?),
        tx_id: r.get(4)?,
        op: if op == "DELETE" { WriteOp::Delete } else { WriteOp::Write },
        value: r.get(6)?,
        is_valid: r.get(7)?,
    })
}

pub(crate) const STATE_COLUMNS: &str = "w.key, w.value, w.block_num, w.tx_num, m.schema_id";
/// World state joined with the class of each state's current version.
pub(crate) const STATE_SOURCE: &str = "world_state w LEFT JOIN schema_members m \
     ON m.key = w.key AND m.block_num = w.block_num AND m.tx_num = w.tx_num";
/// Current states classified under `?1`.
pub(crate) const STATES_IN_SCHEMA: &str = "schema_members m JOIN world_state w \
     ON w.key = m.key AND w.block_num = m.block_num AND w.tx_num = m.tx_num WHERE m.schema_id = ?1";

pub(crate) fn state_from_row(r: &Row<'_>) -> rusqlite::Result<WorldStateEntry> {
    Ok(WorldStateEntry {
        key: r.get(0)?,
        latest_value: r.get(1)?,
        version: StateVersion::new(u(r.get(2)?), u(r.get(3)?)),
        schema_id: r.get::<_, Option<i64>>(4)?.map(u),
    })
}

fn block_from_row(r: &Row<'_>) -> rusqlite::Result<ParsedBlock> {
    Ok(ParsedBlock {
        number: u(r.get(0)?),
        block_hash: r.get(1)?,
        previous_hash: r.get(2)?,
        data_hash: r.get(3)?,
        channel_id: r.get(4)?,
        tx_count: u(r.get(5)?),
        commit_time: Timestamp::from_micros(r.get(6)?),
    })
}

fn schema_from_row(r: &Row<'_>) -> rusqlite::Result<SchemaRecord> {
    let tree: SchemaTree = json_col(&r.get::<_, String>(1)?)?;
    Ok(SchemaRecord {
        schema_id: u(r.get(0)?),
        tree,
        level_count: r.get::<_, i64>(2)? as usize,
        props_per_level: json_col(&r.get::<_, String>(3)?)?,
        member_count: u(r.get(4)?),
        created_at: Timestamp::from_micros(r.get(5)?),
        updated_at: Timestamp::from_micros(r.get(6)?),
    })
}

/// Writes performed inside one atomic scope. Dropping without
/// [`WriteTxn::commit`] rolls back.
pub struct WriteTxn<'a> {
    // Declared first so the transaction ends before the gate opens.
    tx: Transaction<'a>,
    _gate: MutexGuard<'a, ()>,
}

/// Background WAL checkpointer; see [`Store::spawn_checkpointer`]. Dropping
/// it runs a last checkpoint and joins the thread. Handles that stay open
/// keep the raised inline threshold.
pub struct Checkpointer {
    stop: Option<Sender<()>>,
    handle: Option<JoinHandle<()>>,
    shared: Arc<Shared>,
}

impl Drop for Checkpointer {
    fn drop(&mut self) {
        self.stop.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
        self.shared.deferred_checkpoints.store(false, Ordering::Relaxed);
    }
}

impl WriteTxn<'_> {
    pub fn commit(self) -> Result<()> {
        Ok(self.tx.commit()?)
    }

    pub fn rollback(self) -> Result<()> {
        Ok(self.tx.rollback()?)
    }

    pub fn recorded_height(&self) -> Result<i64> {
        get_meta(&self.tx, META_HEIGHT, -1)
    }

    pub fn set_recorded_height(&self, height: u64) -> Result<()> {
        self.set_meta(META_HEIGHT, i(height))
    }

    fn set_meta(&self, key: &str, v: i64) -> Result<()> {
        self.tx
            .prepare_cached("INSERT INTO meta (k, v) VALUES (?1, ?2) ON CONFLICT(k) DO UPDATE SET v = excluded.v")?
            .execute(params![key, v])?;
        Ok(())
    }

    pub fn tx_id_exists(&self, tx_id: &str) -> Result<bool> {
        Ok(self
            .tx
            .prepare_cached("SELECT 1 FROM transactions WHERE tx_id = ?1")?
            .exists([tx_id])?)
    }

    pub fn insert_block(&self, b: &ParsedBlock) -> Result<()> {
        self.tx
            .prepare_cached(
                "INSERT INTO blocks (number, block_hash, previous_hash, data_hash, channel_id, tx_count, commit_time) \
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
            )?
            .execute(params![
                i(b.number),
                b.block_hash,
                b.previous_hash,
                b.data_hash,
                b.channel_id,
                i(b.tx_count),
                b.commit_time.as_micros()
            ])?;
        Ok(())
    }

    pub fn insert_transaction(&self, t: &ParsedTransaction, read_set: &[ReadItem]) -> Result<()> {
        let args = serde_json::to_string(&t.args).expect("strings serialize");
        let endorsers = serde_json::to_string(&t.endorser_msps).expect("strings serialize");
        let reads = serde_json::to_string(read_set).expect("read set serializes");
        self.tx
            .prepare_cached(&format!(
                "INSERT INTO transactions ({TX_COLUMNS}, read_set) \
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, ?12, ?13, ?14, ?15, ?16, ?17)"
            ))?
            .execute(params![
                t.tx_id,
                i(t.block_num),
                i(t.tx_num),
                t.channel_id,
                t.timestamp.as_micros(),
                t.tx_type.as_str(),
                t.creator_msp,
                t.creator_subject,
                t.chaincode_name,
                t.function,
                args,
                endorsers,
                t.validation_code.0,
                t.is_valid,
                i(t.read_count),
                i(t.write_count),
                reads
            ])?;
        let mut endorse = self
            .tx
            .prepare_cached("INSERT INTO tx_endorsers (msp_id, block_num, tx_num) VALUES (?1, ?2, ?3)")?;
        for msp in &t.endorser_msps {
            endorse.execute(params![msp, i(t.block_num), i(t.tx_num)])?;
        }
        Ok(())
    }

    pub fn insert_history(&self, h: &HistoryEntry) -> Result<()> {
        self.tx
            .prepare_cached(&format!(
                "INSERT INTO history ({HISTORY_COLUMNS}) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)"
            ))?
            .execute(params![
                h.key,
                i(h.block_num),
                i(h.tx_num),
                i(h.write_pos),
                h.tx_id,
                h.op.as_str(),
                h.value,
                h.is_valid
            ])?;
        Ok(())
    }

    /// Sets the latest value of `key`; it has no schema id until the schema
    /// pipeline classifies this version.
    pub fn put_state(&self, key: &str, value: &str, version: StateVersion) -> Result<()> {
        self.tx
            .prepare_cached(
                "INSERT INTO world_state (key, value, block_num, tx_num) VALUES (?1, ?2, ?3, ?4) \
                 ON CONFLICT(key) DO UPDATE SET value = excluded.value, block_num = excluded.block_num, \
                 tx_num = excluded.tx_num",
            )?
            .execute(params![key, value, i(version.block_num), i(version.tx_num)])?;
        Ok(())
    }

    pub fn delete_state(&self, key: &str) -> Result<()> {
        self.tx
            .prepare_cached("DELETE FROM world_state WHERE key = ?1")?
            .execute([key])?;
        Ok(())
    }

    /// Persists the schema table delta, the state classifications and the
    /// pipeline cursor.
    pub fn apply_schema_changes(
        &self,
        changes: &TableChanges,
        classified: &[(String, StateVersion, u64)],
        cursor: (u64, u64, u64),
    ) -> Result<()> {
        let mut upsert = self.tx.prepare_cached(
            "INSERT INTO schemas (schema_id, tree, fingerprint, level_count, props_per_level, member_count, created_at, updated_at) \
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8) ON CONFLICT(schema_id) DO UPDATE SET tree = excluded.tree, \
             fingerprint = excluded.fingerprint, level_count = excluded.level_count, \
             props_per_level = excluded.props_per_level, member_count = excluded.member_count, \
             updated_at = excluded.updated_at",
        )?;
        for r in &changes.records {
            upsert.execute(params![
                i(r.schema_id),
                serde_json::to_string(&r.tree).expect("tree serializes"),
                r.tree.fingerprint() as i64,
                r.level_count as i64,
                serde_json::to_string(&r.props_per_level).expect("counts serialize"),
                i(r.member_count),
                r.created_at.as_micros(),
                r.updated_at.as_micros()
            ])?;
        }
        let mut put_member = self.tx.prepare_cached(
            "INSERT INTO schema_members (key, schema_id, block_num, tx_num) VALUES (?1, ?2, ?3, ?4) \
             ON CONFLICT(key) DO UPDATE SET schema_id = excluded.schema_id, \
             block_num = excluded.block_num, tx_num = excluded.tx_num",
        )?;
        for (key, version, id) in classified {
            put_member.execute(params![key, i(*id), i(version.block_num), i(version.tx_num)])?;
        }
        let mut del_member = self.tx.prepare_cached("DELETE FROM schema_members WHERE key = ?1")?;
        for (key, _) in changes.members.iter().filter(|(_, id)| id.is_none()) {
            del_member.execute([key])?;
        }
        self.set_meta(META_NEXT_SCHEMA, i(changes.next_schema_id))?;
        for (name, v) in META_CURSOR.iter().zip([cursor.0, cursor.1, cursor.2]) {
            self.set_meta(name, i(v))?;
        }
        Ok(())
    }
}

/// Consistent read view of a store.
pub struct Snapshot<'a> {
    tx: Transaction<'a>,
}

impl Snapshot<'_> {
    pub(crate) fn conn(&self) -> &Connection {
        &self.tx
    }

    pub fn recorded_height(&self) -> Result<i64> {
        get_meta(&self.tx, META_HEIGHT, -1)
    }

    pub fn schema_cursor(&self) -> Result<SchemaCursor> {
        let b = get_meta(&self.tx, META_CURSOR[0], -1)?;
        if b < 0 {
            return Ok(None);
        }
        Ok(Some((u(b), u(get_meta(&self.tx, META_CURSOR[1], 0)?), u(get_meta(&self.tx, META_CURSOR[2], 0)?))))
    }

    pub fn block(&self, number: u64) -> Result<ParsedBlock> {
        self.tx
            .prepare_cached(
                "SELECT number, block_hash, previous_hash, data_hash, channel_id, tx_count, commit_time \
                 FROM blocks WHERE number = ?1",
            )?
            .query_row([i(number)], block_from_row)
            .optional()?
            .ok_or_else(|| StoreError::NotFound(format!("block {number}")))
    }

    pub fn get_block(&self, number: u64) -> Result<BlockWithTransactions> {
        let block = self.block(number)?;
        let transactions = self
            .tx
            .prepare_cached(&format!(
                "SELECT {TX_COLUMNS} FROM transactions WHERE block_num = ?1 ORDER BY tx_num"
            ))?
            .query_map([i(number)], tx_from_row)?
            .collect::<rusqlite::Result<Vec<_>>>()?;
        Ok(BlockWithTransactions { block, transactions })
    }

    /// Blocks with `from <= number <= to`, ascending, paginated.
    pub fn blocks(&self, from: u64, to: u64, offset: u64, limit: u64) -> Result<(Vec<ParsedBlock>, u64)> {
        let total: i64 = self.tx.query_row(
            "SELECT count(*) FROM blocks WHERE number BETWEEN ?1 AND ?2",
            params![i(from), i(to.min(i64::MAX as u64))],
            |r| r.get(0),
        )?;
        let rows = self
            .tx
            .prepare_cached(
                "SELECT number, block_hash, previous_hash, data_hash, channel_id, tx_count, commit_time \
                 FROM blocks WHERE number BETWEEN ?1 AND ?2 ORDER BY number LIMIT ?3 OFFSET ?4",
            )?
            .query_map(params![i(from), i(to.min(i64::MAX as u64)), i(limit), i(offset)], block_from_row)?
            .collect::<rusqlite::Result<Vec<_>>>()?;
        Ok((rows, u(total)))
    }

    pub fn get_transaction(&self, tx_id: &str) -> Result<TransactionRecord> {
        let found = self
            .tx
            .prepare_cached(&format!("SELECT {TX_COLUMNS}, read_set FROM transactions WHERE tx_id = ?1"))?
            .query_row([tx_id], |r| {
                let tx = tx_from_row(r)?;
                let reads: Vec<ReadItem> = json_col(&r.get::<_, String>(16)?)?;
                Ok((tx, reads))
            })
            .optional()?;
        let (tx, read_set) = found.ok_or_else(|| StoreError::NotFound(format!("transaction {tx_id}")))?;
        let block = self.block(tx.block_num)?;
        let write_set = self
            .tx
            .prepare_cached(&format!(
                "SELECT {HISTORY_COLUMNS} FROM history WHERE block_num = ?1 AND tx_num = ?2 ORDER BY write_pos"
            ))?
            .query_map(params![i(tx.block_num), i(tx.tx_num)], history_from_row)?
            .collect::<rusqlite::Result<Vec<_>>>()?;
        Ok(TransactionRecord {
            tx,
            block_hash: block.block_hash,
            commit_time: block.commit_time,
            read_set,
            write_set,
        })
    }

    pub fn all_transactions(&self) -> Result<Vec<ParsedTransaction>> {
        Ok(self
            .tx
            .prepare(&format!("SELECT {TX_COLUMNS} FROM transactions ORDER BY block_num, tx_num"))?
            .query_map([], tx_from_row)?
            .collect::<rusqlite::Result<Vec<_>>>()?)
    }

    pub fn history(&self, key: &str) -> Result<Vec<HistoryEntry>> {
        Ok(self
            .tx
            .prepare_cached(&format!(
                "SELECT {HISTORY_COLUMNS} FROM history WHERE key = ?1 ORDER BY block_num, tx_num, write_pos"
            ))?
            .query_map([key], history_from_row)?
            .collect::<rusqlite::Result<Vec<_>>>()?)
    }

    /// Valid history entries after `cursor` in global write order, each with
    /// its transaction timestamp.
    pub fn schema_backlog(&self, cursor: SchemaCursor, limit: usize) -> Result<Vec<SchemaItem>> {
        let (b, t, p) = cursor.map(|(b, t, p)| (i(b), i(t), i(p))).unwrap_or((-1, -1, -1));
        let mut stmt = self.tx.prepare_cached(
            "SELECT h.key, h.block_num, h.tx_num, h.write_pos, h.op, h.value, t.timestamp \
             FROM history h JOIN transactions t ON t.block_num = h.block_num AND t.tx_num = h.tx_num \
             WHERE h.is_valid = 1 AND (h.block_num, h.tx_num, h.write_pos) > (?1, ?2, ?3) \
             ORDER BY h.block_num, h.tx_num, h.write_pos LIMIT ?4",
        )?;
        let rows = stmt
            .query_map(params![b, t, p, limit as i64], |r| {
                let op: String = r.get(4)?;
                Ok(SchemaItem {
                    key: r.get(0)?,
                    version: StateVersion::new(u(r.get(1)?), u(r.get(2)?)),
                    write_pos: u(r.get(3)?),
                    value: if op == "DELETE" { None } else { r.get(5)? },
                    timestamp: Timestamp::from_micros(r.get(6)?),
                })
            })?
            .collect::<rusqlite::Result<Vec<_>>>()?;
        Ok(rows)
    }

    pub fn state(&self, key: &str) -> Result<WorldStateEntry> {
        self.tx
            .prepare_cached(&format!("SELECT {STATE_COLUMNS} FROM {STATE_SOURCE} WHERE w.key = ?1"))?
            .query_row([key], state_from_row)
            .optional()?
            .ok_or_else(|| StoreError::NotFound(format!("state {key}")))
    }

    pub fn world_state(&self) -> Result<Vec<WorldStateEntry>> {
        Ok(self
            .tx
            .prepare(&format!("SELECT {STATE_COLUMNS} FROM {STATE_SOURCE} ORDER BY w.key"))?
            .query_map([], state_from_row)?
            .collect::<rusqlite::Result<Vec<_>>>()?)
    }

    pub fn states_by_schema(&self, schema_id: u64, offset: u64, limit: u64) -> Result<(Vec<WorldStateEntry>, u64)> {
        let total: i64 = self
            .tx
            .query_row(&format!("SELECT count(*) FROM {STATES_IN_SCHEMA}"), [i(schema_id)], |r| r.get(0))?;
        let rows = self
            .tx
            .prepare_cached(&format!(
                "SELECT {STATE_COLUMNS} FROM {STATES_IN_SCHEMA} ORDER BY m.key LIMIT ?2 OFFSET ?3"
            ))?
            .query_map(params![i(schema_id), i(limit), i(offset)], state_from_row)?
            .collect::<rusqlite::Result<Vec<_>>>()?;
        Ok((rows, u(total)))
    }

    pub fn schemas(&self) -> Result<Vec<SchemaRecord>> {
        Ok(self
            .tx
            .prepare_cached(
                "SELECT schema_id, tree, level_count, props_per_level, member_count, created_at, updated_at \
                 FROM schemas ORDER BY schema_id",
            )?
            .query_map([], schema_from_row)?
            .collect::<rusqlite::Result<Vec<_>>>()?)
    }

    pub fn schema(&self, id: u64) -> Result<SchemaRecord> {
        self.tx
            .prepare_cached(
                "SELECT schema_id, tree, level_count, props_per_level, member_count, created_at, updated_at \
                 FROM schemas WHERE schema_id = ?1",
            )?
            .query_row([i(id)], schema_from_row)
            .optional()?
            .ok_or_else(|| StoreError::NotFound(format!("schema {id}")))
    }

    pub fn schema_members(&self) -> Result<Vec<(String, u64)>> {
        Ok(self
            .tx
            .prepare("SELECT key, schema_id FROM schema_members ORDER BY key")?
            .query_map([], |r| Ok((r.get(0)?, u(r.get(1)?))))?
            .collect::<rusqlite::Result<Vec<_>>>()?)
    }

    pub fn load_schema_table(&self) -> Result<SchemaTable> {
        let next = get_meta(&self.tx, META_NEXT_SCHEMA, 1)?;
        Ok(SchemaTable::restore(self.schemas()?, self.schema_members()?, u(next)))
    }

    pub fn count(&self, table: StoreTable) -> Result<u64> {
        let n: i64 = self
            .tx
            .query_row(&format!("SELECT count(*) FROM {}", table.name()), [], |r| r.get(0))?;
        Ok(u(n))
    }

    /// Ordered textual dump of every table, for equivalence checks between
    /// stores.
    pub fn dump(&self) -> Result<StoreDump> {
        let mut tables = Vec::new();
        for table in StoreTable::ALL {
            let mut stmt = self.tx.prepare(&format!("SELECT * FROM {}", table.name()))?;
            let columns = stmt.column_count();
            let mut rows = stmt
                .query_map([], |r| {
                    let mut cells = Vec::with_capacity(columns);
                    for c in 0..columns {
                        let v: rusqlite::types::Value = r.get(c)?;
                        cells.push(format!("{v:?}"));
                    }
                    Ok(cells.join("|"))
                })?
                .collect::<rusqlite::Result<Vec<_>>>()?;
            rows.sort();
            tables.push((table.name(), rows));
        }
        Ok(StoreDump { tables })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreTable {
    Meta,
    Blocks,
    Transactions,
    Endorsers,
    History,
    WorldState,
    Schemas,
    SchemaMembers,
}

impl StoreTable {
    pub const ALL: [StoreTable; 8] = [
        StoreTable::Meta,
        StoreTable::Blocks,
        StoreTable::Transactions,
        StoreTable::Endorsers,
        StoreTable::History,
        StoreTable::WorldState,
        StoreTable::Schemas,
        StoreTable::SchemaMembers,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StoreTable::Meta => "meta",
            StoreTable::Blocks => "blocks",
            StoreTable::Transactions => "transactions",
            StoreTable::Endorsers => "tx_endorsers",
            StoreTable::History => "history",
            StoreTable::WorldState => "world_state",
            StoreTable::Schemas => "schemas",
            StoreTable::SchemaMembers => "schema_members",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreDump {
    pub tables: Vec<(&'static str, Vec<String>)>,
}

impl StoreDump {
    pub fn table(&self, name: &str) -> &[String] {
        self.tables
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, rows)| rows.as_slice())
            .unwrap_or(&[])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(n: u64) -> ParsedBlock {
        ParsedBlock {
            number: n,
            block_hash: format!("{n:064x}"),
            previous_hash: format!("{:064x}", n.wrapping_sub(1)),
            data_hash: "ab".repeat(32),
            channel_id: "ch".into(),
            tx_count: 1,
            commit_time: Timestamp::from_micros(n as i64 * 1_000_000),
        }
    }

    fn tx(n: u64, id: &str, valid: bool) -> ParsedTransaction {
        ParsedTransaction {
            tx_id: id.into(),
            block_num: n,
            tx_num: 0,
            channel_id: "ch".into(),
            timestamp: Timestamp::from_micros(n as i64),
            tx_type: if n == 0 { TxType::Config } else { TxType::EndorserTransaction },
            creator_msp: "Org1MSP".into(),
            creator_subject: "user1".into(),
            chaincode_name: "cc".into(),
            function: "f".into(),
            args: vec!["a".into()],
            endorser_msps: vec!["Org1MSP".into(), "Org2MSP".into()],
            validation_code: if valid { ValidationCode::VALID } else { ValidationCode::MVCC_READ_CONFLICT },
            is_valid: valid,
            read_count: 0,
            write_count: 1,
        }
    }

    fn write_block(store: &mut Store, n: u64, key: &str) -> Result<()> {
        let w = store.begin_block_txn()?;
        w.insert_block(&block(n))?;
        let t = tx(n, &format!("tx{n}"), true);
        w.insert_transaction(&t, &[ReadItem { key: key.into(), version: StateVersion::new(0, 0) }])?;
        w.insert_history(&HistoryEntry {
            key: key.into(),
            block_num: n,
            tx_num: 0,
            write_pos: 0,
            tx_id: t.tx_id.clone(),
            op: WriteOp::Write,
            value: Some(format!("{{\"n\":{n}}}")),
            is_valid: true,
        })?;
        w.put_state(key, &format!("{{\"n\":{n}}}"), StateVersion::new(n, 0))?;
        w.set_recorded_height(n)?;
        w.commit()
    }

    #[test]
    fn rollback_leaves_store_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path()).unwrap();
        write_block(&mut store, 0, "k").unwrap();
        let before = store.snapshot().unwrap().dump().unwrap();
        {
            let w = store.begin_block_txn().unwrap();
            w.insert_block(&block(1)).unwrap();
            w.put_state("k2", "{}", StateVersion::new(1, 0)).unwrap();
            w.delete_state("k").unwrap();
            w.set_recorded_height(1).unwrap();
            w.rollback().unwrap();
        }
        assert_eq!(store.snapshot().unwrap().dump().unwrap(), before);
        {
            let w = store.begin_block_txn().unwrap();
            w.insert_block(&block(1)).unwrap();
            // dropped without commit
        }
        assert_eq!(store.snapshot().unwrap().dump().unwrap(), before);
    }

    #[test]
    fn committed_data_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut store = Store::open(dir.path()).unwrap();
            write_block(&mut store, 0, "k").unwrap();
            write_block(&mut store, 1, "k").unwrap();
        }
        let store = Store::open_read_only(dir.path()).unwrap();
        let snap = store.snapshot().unwrap();
        assert_eq!(snap.recorded_height().unwrap(), 1);
        assert_eq!(snap.get_block(1).unwrap().transactions.len(), 1);
        assert_eq!(snap.state("k").unwrap().version, StateVersion::new(1, 0));
        let rec = snap.get_transaction("tx1").unwrap();
        assert_eq!(rec.read_set.len(), 1);
        assert_eq!(rec.write_set.len(), 1);
        assert_eq!(rec.tx.endorser_msps, vec!["Org1MSP", "Org2MSP"]);
    }

    #[test]
    fn missing_records_are_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let snap = store.snapshot().unwrap();
        assert_eq!(snap.recorded_height().unwrap(), -1);
        assert!(matches!(snap.get_block(0), Err(StoreError::NotFound(_))));
        assert!(matches!(snap.get_transaction("nope"), Err(StoreError::NotFound(_))));
        assert!(matches!(snap.state("nope"), Err(StoreError::NotFound(_))));
        assert!(snap.history("nope").unwrap().is_empty());
        assert!(matches!(Store::open_read_only(dir.path().join("absent")), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn duplicate_tx_id_is_rejected_by_index() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path()).unwrap();
        let w = store.begin_block_txn().unwrap();
        w.insert_transaction(&tx(1, "same", true), &[]).unwrap();
        assert!(w.tx_id_exists("same").unwrap());
        let mut other = tx(1, "same", true);
        other.tx_num = 1;
        assert!(w.insert_transaction(&other, &[]).is_err());
    }

    #[test]
    fn snapshot_is_isolated_from_later_commits() {
        let dir = tempfile::tempdir().unwrap();
        let mut writer = Store::open(dir.path()).unwrap();
        write_block(&mut writer, 0, "k").unwrap();
        let reader = writer.reopen().unwrap();
        let snap = reader.snapshot().unwrap();
        write_block(&mut writer, 1, "k").unwrap();
        assert_eq!(snap.recorded_height().unwrap(), 0);
        assert_eq!(snap.count(StoreTable::Blocks).unwrap(), 1);
        drop(snap);
        assert_eq!(reader.recorded_height().unwrap(), 1);
    }
}
