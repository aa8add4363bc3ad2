//! Turns [`LedgerBlock`]s into flat block, transaction and history records,
//! and replays valid write sets into the world state.

use std::collections::HashSet;

use crossbeam_channel::Sender;

use crate::model::{LedgerBlock, RawTransaction, StateVersion, ValidationCode};
use crate::records::{HistoryEntry, ParsedBlock, ParsedTransaction, WriteOp};
use crate::schema::SchemaItem;
use crate::store::{Store, StoreError};
use crate::sync::{BlockSink, SinkError};

#[derive(Debug, thiserror::Error)]
pub enum ParseError {
    #[error("out-of-order block: expected {expected}, got {got}")]
    OutOfOrderBlock { expected: u64, got: u64 },
    #[error("duplicate tx_id {tx_id} in block {block}")]
    DuplicateTxId { tx_id: String, block: u64 },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseReport {
    pub block_num: u64,
    pub txs: u64,
    /// History entries recorded, valid and invalid alike.
    pub writes: u64,
    /// Committed writes and deletes of valid transactions, in apply order.
    pub schema_items: Vec<SchemaItem>,
}

/// Projects one raw transaction onto its flat record.
pub fn extract_tx(raw: &RawTransaction, block_num: u64, tx_num: u64, code: ValidationCode) -> ParsedTransaction {
    let mut seen = HashSet::new();
    let endorser_msps = raw
        .endorsers
        .iter()
        .filter(|e| seen.insert(e.msp_id.as_str()))
        .map(|e| e.msp_id.clone())
        .collect();
    ParsedTransaction {
        tx_id: raw.tx_id.clone(),
        block_num,
        tx_num,
        channel_id: raw.channel_id.clone(),
        timestamp: raw.timestamp,
        tx_type: raw.tx_type,
        creator_msp: raw.creator.msp_id.clone(),
        creator_subject: raw.creator.subject.clone(),
        chaincode_name: raw.chaincode_name.clone(),
        function: raw.function.clone(),
        args: raw.args.clone(),
        endorser_msps,
        validation_code: code,
        is_valid: code.is_valid(),
        read_count: raw.read_set.len() as u64,
        write_count: raw.write_set.len() as u64,
    }
}

pub fn extract_block(block: &LedgerBlock) -> ParsedBlock {
    ParsedBlock {
        number: block.header.number,
        block_hash: block.hash(),
        previous_hash: block.header.previous_hash.clone(),
        data_hash: block.header.data_hash.clone(),
        channel_id: block
            .transactions
            .first()
            .map(|t| t.channel_id.clone())
            .unwrap_or_default(),
        tx_count: block.transactions.len() as u64,
        commit_time: block.metadata.commit_time,
    }
}

/// History entries of one transaction, in write-set order.
pub fn history_entries(raw: &RawTransaction, block_num: u64, tx_num: u64, valid: bool) -> Vec<HistoryEntry> {
    raw.write_set
        .iter()
        .enumerate()
        .map(|(pos, w)| HistoryEntry {
            key: w.key.clone(),
            block_num,
            tx_num,
            write_pos: pos as u64,
            tx_id: raw.tx_id.clone(),
            op: if w.is_delete { WriteOp::Delete } else { WriteOp::Write },
            value: if w.is_delete { None } else { w.value.clone() },
            is_valid: valid,
        })
        .collect()
}

/// Commits one block atomically: block, transactions and history rows, plus
/// the world-state effect of its valid transactions and the new recorded
/// height. Nothing is written if any check fails.
pub fn parse_and_commit(block: &LedgerBlock, store: &mut Store) -> Result<ParseReport, ParseError> {
    let number = block.number();
    let txn = store.begin_block_txn()?;
    let expected = (txn.recorded_height()? + 1) as u64;
    if number != expected {
        return Err(ParseError::OutOfOrderBlock { expected, got: number });
    }

    txn.insert_block(&extract_block(block))?;
    let mut report = ParseReport {
        block_num: number,
        ..Default::default()
    };
    let mut ids_in_block = HashSet::new();
    for (tx_num, raw, code) in block.transactions_with_codes() {
        if !ids_in_block.insert(raw.tx_id.as_str()) || txn.tx_id_exists(&raw.tx_id)? {
            return Err(ParseError::DuplicateTxId {
                tx_id: raw.tx_id.clone(),
                block: number,
            });
        }
        let parsed = extract_tx(raw, number, tx_num, code);
        txn.insert_transaction(&parsed, &raw.read_set)?;
        report.txs += 1;

        let version = StateVersion::new(number, tx_num);
        for entry in history_entries(raw, number, tx_num, parsed.is_valid) {
            txn.insert_history(&entry)?;
            report.writes += 1;
            if !parsed.is_valid {
                continue;
            }
            match &entry.value {
                Some(value) => txn.put_state(&entry.key, value, version)?,
                None => txn.delete_state(&entry.key)?,
            }
            report.schema_items.push(SchemaItem {
                key: entry.key,
                version,
                write_pos: entry.write_pos,
                value: entry.value,
                timestamp: raw.timestamp,
            });
        }
    }
    txn.set_recorded_height(number)?;
    txn.commit()?;
    Ok(report)
}

/// Sink that parses each delivered block into a store and forwards committed
/// writes to the schema pipeline.
///
/// The send blocks while the queue is full, which bounds memory when the
/// schema pipeline falls behind.
pub struct StoreSink {
    store: Store,
    queue: Option<Sender<SchemaItem>>,
    totals: ParseTotals,
    on_commit: Option<Box<dyn FnMut(&ParseReport) + Send>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseTotals {
    pub blocks: u64,
    pub txs: u64,
    pub writes: u64,
}

impl StoreSink {
    pub fn new(store: Store, queue: Option<Sender<SchemaItem>>) -> Self {
        StoreSink {
            store,
            queue,
            totals: ParseTotals::default(),
            on_commit: None,
        }
    }

    /// Registers a callback run after each committed block.
    pub fn on_commit(mut self, f: impl FnMut(&ParseReport) + Send + 'static) -> Self {
        self.on_commit = Some(Box::new(f));
        self
    }

    pub fn totals(&self) -> ParseTotals {
        self.totals
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    /// Closes the schema queue so the consumer can drain and finish.
    pub fn close_queue(&mut self) {
        self.queue = None;
    }

    pub fn commit(&mut self, block: &LedgerBlock) -> Result<ParseReport, ParseError> {
        let mut report = parse_and_commit(block, &mut self.store)?;
        self.totals.blocks += 1;
        self.totals.txs += report.txs;
        self.totals.writes += report.writes;
        if let Some(f) = self.on_commit.as_mut() {
            f(&report);
        }
        if let Some(queue) = &self.queue {
            for item in report.schema_items.drain(..) {
                // A dropped consumer recovers these from history on restart.
                if queue.send(item).is_err() {
                    break;
                }
            }
        }
        Ok(report)
    }
}

impl BlockSink for StoreSink {
    fn recorded_height(&mut self) -> Result<i64, SinkError> {
        Ok(self.store.recorded_height()?)
    }

    fn deliver(&mut self, block: LedgerBlock) -> Result<(), SinkError> {
        self.commit(&block)?;
        Ok(())
    }
}
