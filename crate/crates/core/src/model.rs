//! Block interchange format and the domain types shared by every other module.
//!
//! A ledger is a sequence of [`LedgerBlock`]s serialized as JSON Lines, one
//! block per line, in ascending height order. Each block carries three
//! sections: a header linking it to its predecessor, the ordered transactions,
//! and metadata holding one validation code per transaction.

use std::fmt;

use chrono::{DateTime, SecondsFormat, TimeZone, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

/// Hex rendering of an all-zero 32-byte digest; the genesis block's parent.
pub const ZERO_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

/// Conventional file extension for a block interchange file.
pub const LEDGER_EXTENSION: &str = ".ledger.jsonl";

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("malformed block{}: {field}: {detail}", block_suffix(*.block))]
    MalformedBlock {
        block: Option<u64>,
        field: String,
        detail: String,
    },
    #[error("invariant violation in block{}: {field}: {detail}", block_suffix(*.block))]
    InvariantViolation {
        block: Option<u64>,
        field: String,
        detail: String,
    },
}

fn block_suffix(block: Option<u64>) -> String {
    block.map(|n| format!(" {n}")).unwrap_or_default()
}

impl ModelError {
    pub fn field(&self) -> &str {
        match self {
            ModelError::MalformedBlock { field, .. } | ModelError::InvariantViolation { field, .. } => field,
        }
    }

    fn invariant(block: u64, field: impl Into<String>, detail: impl Into<String>) -> Self {
        ModelError::InvariantViolation {
            block: Some(block),
            field: field.into(),
            detail: detail.into(),
        }
    }
}

/// UTC instant with microsecond resolution.
///
/// Rendered as RFC 3339 (`2020-01-01T00:00:00.000000Z`) on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(i64);

impl Timestamp {
    pub const UNIX_EPOCH: Timestamp = Timestamp(0);

    pub fn from_micros(micros: i64) -> Self {
        Timestamp(micros)
    }

    pub fn as_micros(self) -> i64 {
        self.0
    }

    pub fn now() -> Self {
        Timestamp(Utc::now().timestamp_micros())
    }

    pub fn parse_rfc3339(text: &str) -> Result<Self, chrono::ParseError> {
        let dt = DateTime::parse_from_rfc3339(text)?;
        Ok(Timestamp(dt.with_timezone(&Utc).timestamp_micros()))
    }

    pub fn to_rfc3339(self) -> String {
        match Utc.timestamp_micros(self.0).single() {
            Some(dt) => dt.to_rfc3339_opts(SecondsFormat::Micros, true),
            None => self.0.to_string(),
        }
    }

    pub fn plus_micros(self, micros: i64) -> Self {
        Timestamp(self.0 + micros)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_rfc3339())
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_rfc3339())
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        Timestamp::parse_rfc3339(&text).map_err(serde::de::Error::custom)
    }
}

/// Position of a write in the ledger: the transaction that produced it.
///
/// Ordered lexicographically by `(block_num, tx_num)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StateVersion {
    pub block_num: u64,
    pub tx_num: u64,
}

impl StateVersion {
    pub fn new(block_num: u64, tx_num: u64) -> Self {
        StateVersion { block_num, tx_num }
    }
}

impl fmt::Display for StateVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.block_num, self.tx_num)
    }
}

/// Per-transaction commit verdict. Only [`ValidationCode::VALID`] mutates world state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValidationCode(pub u8);

impl ValidationCode {
    pub const VALID: ValidationCode = ValidationCode(0);
    pub const MVCC_READ_CONFLICT: ValidationCode = ValidationCode(10);
    pub const OTHER: ValidationCode = ValidationCode(254);

    pub fn is_valid(self) -> bool {
        self == Self::VALID
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identity {
    pub msp_id: String,
    pub subject: String,
}

impl Identity {
    pub fn new(msp_id: impl Into<String>, subject: impl Into<String>) -> Self {
        Identity {
            msp_id: msp_id.into(),
            subject: subject.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TxType {
    EndorserTransaction,
    Config,
}

impl TxType {
    pub fn as_str(self) -> &'static str {
        match self {
            TxType::EndorserTransaction => "ENDORSER_TRANSACTION",
            TxType::Config => "CONFIG",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "ENDORSER_TRANSACTION" => Some(TxType::EndorserTransaction),
            "CONFIG" => Some(TxType::Config),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadItem {
    pub key: String,
    pub version: StateVersion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteItem {
    pub key: String,
    pub is_delete: bool,
    /// JSON text when the chaincode wrote JSON; kept verbatim otherwise.
    pub value: Option<String>,
}

impl WriteItem {
    pub fn put(key: impl Into<String>, value: impl Into<String>) -> Self {
        WriteItem {
            key: key.into(),
            is_delete: false,
            value: Some(value.into()),
        }
    }

    pub fn delete(key: impl Into<String>) -> Self {
        WriteItem {
            key: key.into(),
            is_delete: true,
            value: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTransaction {
    pub tx_id: String,
    pub channel_id: String,
    pub timestamp: Timestamp,
    pub tx_type: TxType,
    pub creator: Identity,
    pub chaincode_name: String,
    pub function: String,
    pub args: Vec<String>,
    pub endorsers: Vec<Identity>,
    pub read_set: Vec<ReadItem>,
    pub write_set: Vec<WriteItem>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockHeader {
    pub number: u64,
    pub previous_hash: String,
    pub data_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMetadata {
    pub commit_time: Timestamp,
    pub validation_codes: Vec<ValidationCode>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerBlock {
    pub header: BlockHeader,
    pub transactions: Vec<RawTransaction>,
    pub metadata: BlockMetadata,
}

impl LedgerBlock {
    pub fn number(&self) -> u64 {
        self.header.number
    }

    pub fn hash(&self) -> String {
        block_hash(&self.header)
    }

    /// Iterates `(tx_num, transaction, validation code)` in block order.
    pub fn transactions_with_codes(&self) -> impl Iterator<Item = (u64, &RawTransaction, ValidationCode)> {
        self.transactions
            .iter()
            .zip(self.metadata.validation_codes.iter().copied())
            .enumerate()
            .map(|(i, (tx, code))| (i as u64, tx, code))
    }

    /// Checks every structural invariant of the interchange format.
    pub fn validate(&self) -> Result<(), ModelError> {
        let n = self.header.number;
        check_digest(n, "header.previous_hash", &self.header.previous_hash)?;
        check_digest(n, "header.data_hash", &self.header.data_hash)?;
        if n == 0 && self.header.previous_hash != ZERO_HASH {
            return Err(ModelError::invariant(n, "header.previous_hash", "genesis parent must be all-zero"));
        }
        if self.transactions.is_empty() {
            return Err(ModelError::invariant(n, "transactions", "block has no transactions"));
        }
        if self.metadata.validation_codes.len() != self.transactions.len() {
            return Err(ModelError::invariant(
                n,
                "validation_codes",
                format!(
                    "{} codes for {} transactions",
                    self.metadata.validation_codes.len(),
                    self.transactions.len()
                ),
            ));
        }
        for (i, tx) in self.transactions.iter().enumerate() {
            let at = |f: &str| format!("transactions[{i}].{f}");
            if tx.tx_id.is_empty() {
                return Err(ModelError::invariant(n, at("tx_id"), "empty tx_id"));
            }
            if tx.creator.msp_id.is_empty() {
                return Err(ModelError::invariant(n, at("creator.msp_id"), "empty msp_id"));
            }
            if let Some(j) = tx.endorsers.iter().position(|e| e.msp_id.is_empty()) {
                return Err(ModelError::invariant(n, at(&format!("endorsers[{j}].msp_id")), "empty msp_id"));
            }
            if tx.tx_type == TxType::Config
                && !(tx.read_set.is_empty() && tx.write_set.is_empty() && tx.endorsers.is_empty())
            {
                return Err(ModelError::invariant(
                    n,
                    at("tx_type"),
                    "CONFIG transaction carries read/write sets or endorsers",
                ));
            }
            for (j, w) in tx.write_set.iter().enumerate() {
                match (w.is_delete, &w.value) {
                    (true, Some(_)) => {
                        return Err(ModelError::invariant(n, at(&format!("write_set[{j}].value")), "delete carries a value"))
                    }
                    (false, None) => {
                        return Err(ModelError::invariant(n, at(&format!("write_set[{j}].value")), "write without a value"))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

fn check_digest(block: u64, field: &str, digest: &str) -> Result<(), ModelError> {
    let well_formed = digest.len() == 64 && digest.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'));
    if well_formed {
        Ok(())
    } else {
        Err(ModelError::invariant(block, field, "expected 64 lowercase hex characters"))
    }
}

/// SHA-256 over `"number|previous_hash|data_hash"`, lowercase hex.
pub fn block_hash(header: &BlockHeader) -> String {
    let preimage = format!("{}|{}|{}", header.number, header.previous_hash, header.data_hash);
    hex::encode(Sha256::digest(preimage.as_bytes()))
}

/// Digest committed to by `header.data_hash`: SHA-256 of the canonical JSON of
/// the transaction list.
pub fn data_hash(transactions: &[RawTransaction]) -> String {
    let bytes = serde_json::to_vec(transactions).expect("transactions serialize");
    hex::encode(Sha256::digest(&bytes))
}

/// Parses and validates one interchange document.
pub fn parse_block_json(text: &str) -> Result<LedgerBlock, ModelError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ModelError::MalformedBlock {
        block: None,
        field: "<document>".into(),
        detail: e.to_string(),
    })?;
    let number = value.pointer("/header/number").and_then(|v| v.as_u64());
    let block: LedgerBlock = serde_path_to_error::deserialize(&value).map_err(|e| {
        let path = e.path().to_string();
        ModelError::MalformedBlock {
            block: number,
            field: if path == "." { "<document>".into() } else { path },
            detail: e.into_inner().to_string(),
        }
    })?;
    block.validate()?;
    Ok(block)
}

/// Canonical single-line rendering of a block (no trailing newline).
pub fn to_block_json(block: &LedgerBlock) -> String {
    serde_json::to_string(block).expect("blocks serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn genesis() -> LedgerBlock {
        let tx = RawTransaction {
            tx_id: "genesis".into(),
            channel_id: "mychannel".into(),
            timestamp: Timestamp::parse_rfc3339("2020-01-01T00:00:00Z").unwrap(),
            tx_type: TxType::Config,
            creator: Identity::new("OrdererMSP", "orderer.example.com"),
            chaincode_name: String::new(),
            function: String::new(),
            args: vec![],
            endorsers: vec![],
            read_set: vec![],
            write_set: vec![],
        };
        let data = data_hash(std::slice::from_ref(&tx));
        LedgerBlock {
            header: BlockHeader {
                number: 0,
                previous_hash: ZERO_HASH.into(),
                data_hash: data,
            },
            transactions: vec![tx],
            metadata: BlockMetadata {
                commit_time: Timestamp::parse_rfc3339("2020-01-01T00:00:01Z").unwrap(),
                validation_codes: vec![ValidationCode::VALID],
            },
        }
    }

    #[test]
    fn block_hash_golden() {
        // sha256("0|" + "00"*32 + "|" + "ab"*32), computed with Python hashlib.
        let header = BlockHeader {
            number: 0,
            previous_hash: "00".repeat(32),
            data_hash: "ab".repeat(32),
        };
        assert_eq!(block_hash(&header), "1850438c10fbddf5c8dd3364ae29e944840950e424f3b5be2efa0809027b66a5");
        assert_eq!(block_hash(&header), block_hash(&header));

        let other = BlockHeader {
            data_hash: "cd".repeat(32),
            ..header.clone()
        };
        assert_eq!(block_hash(&other), "e788bf615f326a29926568cdbe951cd4946e317e88b3152577b21e190c965c1b");
        assert_ne!(block_hash(&header), block_hash(&other));
    }

    #[test]
    fn genesis_round_trip() {
        let b = genesis();
        let text = to_block_json(&b);
        let parsed = parse_block_json(&text).unwrap();
        assert_eq!(parsed.number(), 0);
        assert_eq!(parsed.transactions.len(), 1);
        assert_eq!(parsed.transactions[0].tx_type, TxType::Config);
        assert_eq!(parsed, b);
        assert_eq!(to_block_json(&parsed), text);
    }

    #[test]
    fn validation_code_count_mismatch() {
        let mut b = genesis();
        b.transactions.push(b.transactions[0].clone());
        let err = parse_block_json(&to_block_json(&b)).unwrap_err();
        assert!(matches!(err, ModelError::InvariantViolation { block: Some(0), .. }));
        assert_eq!(err.field(), "validation_codes");
    }

    #[test]
    fn missing_field_names_path_and_block() {
        let mut v: serde_json::Value = serde_json::from_str(&to_block_json(&genesis())).unwrap();
        v["transactions"][0].as_object_mut().unwrap().remove("creator");
        let err = parse_block_json(&v.to_string()).unwrap_err();
        match err {
            ModelError::MalformedBlock { block, field, detail } => {
                assert_eq!(block, Some(0));
                assert_eq!(field, "transactions[0]");
                assert!(detail.contains("creator"), "{detail}");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_block_json("{not json"),
            Err(ModelError::MalformedBlock { block: None, .. })
        ));
    }

    #[test]
    fn rejects_bad_write_items_and_digests() {
        let mut b = genesis();
        b.header.data_hash = "AB".repeat(32);
        assert_eq!(b.validate().unwrap_err().field(), "header.data_hash");

        let mut b = genesis();
        b.transactions[0].tx_type = TxType::EndorserTransaction;
        b.transactions[0].write_set.push(WriteItem {
            key: "k".into(),
            is_delete: true,
            value: Some("x".into()),
        });
        assert_eq!(b.validate().unwrap_err().field(), "transactions[0].write_set[0].value");

        let mut b = genesis();
        b.transactions[0].write_set.push(WriteItem::put("k", "1"));
        assert_eq!(b.validate().unwrap_err().field(), "transactions[0].tx_type");
    }

    #[test]
    fn timestamps_normalize_to_utc_micros() {
        let t = Timestamp::parse_rfc3339("2020-01-01T02:00:00.1234567+02:00").unwrap();
        assert_eq!(t.to_rfc3339(), "2020-01-01T00:00:00.123456Z");
        assert_eq!(Timestamp::parse_rfc3339(&t.to_rfc3339()).unwrap(), t);
    }

    #[test]
    fn version_order_is_lexicographic() {
        let mut v = vec![
            StateVersion::new(2, 0),
            StateVersion::new(1, 5),
            StateVersion::new(1, 0),
            StateVersion::new(0, 9),
        ];
        v.sort();
        assert_eq!(
            v,
            vec![
                StateVersion::new(0, 9),
                StateVersion::new(1, 0),
                StateVersion::new(1, 5),
                StateVersion::new(2, 0)
            ]
        );
    }
}
