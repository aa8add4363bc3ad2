//! Flattened records derived from blocks, as persisted and served.

use serde::{Deserialize, Serialize};

use crate::model::{ReadItem, StateVersion, Timestamp, TxType, ValidationCode};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedBlock {
    pub number: u64,
    pub block_hash: String,
    pub previous_hash: String,
    pub data_hash: String,
    pub channel_id: String,
    pub tx_count: u64,
    pub commit_time: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedTransaction {
    pub tx_id: String,
    pub block_num: u64,
    pub tx_num: u64,
    pub channel_id: String,
    pub timestamp: Timestamp,
    pub tx_type: TxType,
    pub creator_msp: String,
    pub creator_subject: String,
    pub chaincode_name: String,
    pub function: String,
    pub args: Vec<String>,
    pub endorser_msps: Vec<String>,
    pub validation_code: ValidationCode,
    pub is_valid: bool,
    pub read_count: u64,
    pub write_count: u64,
}

impl ParsedTransaction {
    pub fn version(&self) -> StateVersion {
        StateVersion::new(self.block_num, self.tx_num)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WriteOp {
    Write,
    Delete,
}

impl WriteOp {
    pub fn as_str(self) -> &'static str {
        match self {
            WriteOp::Write => "WRITE",
            WriteOp::Delete => "DELETE",
        }
    }
}

/// One operation on one state key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub key: String,
    pub block_num: u64,
    pub tx_num: u64,
    pub write_pos: u64,
    pub tx_id: String,
    pub op: WriteOp,
    pub value: Option<String>,
    pub is_valid: bool,
}

impl HistoryEntry {
    pub fn version(&self) -> StateVersion {
        StateVersion::new(self.block_num, self.tx_num)
    }

    /// Sort key: `(block_num, tx_num, write_pos)`.
    pub fn position(&self) -> (u64, u64, u64) {
        (self.block_num, self.tx_num, self.write_pos)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldStateEntry {
    pub key: String,
    pub latest_value: String,
    pub version: StateVersion,
    pub schema_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockWithTransactions {
    #[serde(flatten)]
    pub block: ParsedBlock,
    pub transactions: Vec<ParsedTransaction>,
}

/// A transaction with its block context and its read and write sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransactionRecord {
    #[serde(flatten)]
    pub tx: ParsedTransaction,
    pub block_hash: String,
    pub commit_time: Timestamp,
    pub read_set: Vec<ReadItem>,
    pub write_set: Vec<HistoryEntry>,
}
