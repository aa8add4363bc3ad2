#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::seq::IndexedRandom;
use rand::Rng;
use refiner_core::model::{
    block_hash, data_hash, BlockHeader, BlockMetadata, Identity, LedgerBlock, RawTransaction, Timestamp, TxType,
    ValidationCode, WriteItem, ZERO_HASH,
};
use refiner_core::source::{BlockSource, SourceError};
use refiner_core::sync::{BlockSink, SinkError};
use serde_json::{json, Value};

/// In-memory source whose visible blocks, latency and availability the test
/// controls from outside.
#[derive(Clone, Default)]
pub struct MemSource {
    pub blocks: Arc<Mutex<Vec<LedgerBlock>>>,
    pub delay: Arc<Mutex<Duration>>,
    pub unavailable: Arc<AtomicBool>,
    /// When set, `get_block(n)` returns block `n + 1`.
    pub skip_one: Arc<AtomicBool>,
    pub fetches: Arc<AtomicUsize>,
}

impl MemSource {
    pub fn new(blocks: Vec<LedgerBlock>) -> Self {
        let s = MemSource::default();
        *s.blocks.lock().unwrap() = blocks;
        s
    }

    pub fn push(&self, block: LedgerBlock) {
        self.blocks.lock().unwrap().push(block);
    }
}

impl BlockSource for MemSource {
    fn kind(&self) -> &'static str {
        "memory"
    }

    fn max_height(&mut self) -> Result<i64, SourceError> {
        if self.unavailable.load(Ordering::SeqCst) {
            return Err(SourceError::Unavailable("offline".into()));
        }
        Ok(self.blocks.lock().unwrap().len() as i64 - 1)
    }

    fn get_block(&mut self, number: u64) -> Result<LedgerBlock, SourceError> {
        let delay = *self.delay.lock().unwrap();
        if !delay.is_zero() {
            std::thread::sleep(delay);
        }
        self.fetches.fetch_add(1, Ordering::SeqCst);
        let n = number + u64::from(self.skip_one.load(Ordering::SeqCst));
        self.blocks
            .lock()
            .unwrap()
            .get(n as usize)
            .cloned()
            .ok_or(SourceError::NoSuchBlock(number))
    }
}

/// Sink that only records which block numbers it received.
#[derive(Clone, Default)]
pub struct RecordingSink {
    pub delivered: Arc<Mutex<Vec<u64>>>,
    pub fail_at: Arc<Mutex<Option<u64>>>,
}

impl RecordingSink {
    pub fn delivered(&self) -> Vec<u64> {
        self.delivered.lock().unwrap().clone()
    }
}

impl BlockSink for RecordingSink {
    fn recorded_height(&mut self) -> Result<i64, SinkError> {
        Ok(self.delivered.lock().unwrap().last().map_or(-1, |&n| n as i64))
    }

    fn deliver(&mut self, block: LedgerBlock) -> Result<(), SinkError> {
        if *self.fail_at.lock().unwrap() == Some(block.header.number) {
            return Err("disk on fire".into());
        }
        self.delivered.lock().unwrap().push(block.header.number);
        Ok(())
    }
}

/// Sequential replay of valid write sets: the expected world state as
/// key -> (value, block_num, tx_num).
pub fn replay_world_state(blocks: &[LedgerBlock]) -> BTreeMap<String, (String, u64, u64)> {
    let mut state = BTreeMap::new();
    for b in blocks {
        for (i, tx) in b.transactions.iter().enumerate() {
            if b.metadata.validation_codes[i].0 != 0 {
                continue;
            }
            for w in &tx.write_set {
                if w.is_delete {
                    state.remove(&w.key);
                } else {
                    state.insert(
                        w.key.clone(),
                        (w.value.clone().unwrap(), b.header.number, i as u64),
                    );
                }
            }
        }
    }
    state
}

/// Every write-set occurrence per key, in ledger order, as
/// (block_num, tx_num, write_pos, is_delete, valid).
pub fn write_occurrences(blocks: &[LedgerBlock]) -> HashMap<String, Vec<(u64, u64, u64, bool, bool)>> {
    let mut out: HashMap<String, Vec<_>> = HashMap::new();
    for b in blocks {
        for (i, tx) in b.transactions.iter().enumerate() {
            let valid = b.metadata.validation_codes[i].0 == 0;
            for (j, w) in tx.write_set.iter().enumerate() {
                out.entry(w.key.clone())
                    .or_default()
                    .push((b.header.number, i as u64, j as u64, w.is_delete, valid));
            }
        }
    }
    out
}

pub fn genesis_tx() -> RawTransaction {
    RawTransaction {
        tx_id: "genesis".into(),
        channel_id: "mychannel".into(),
        timestamp: Timestamp::from_micros(1_600_000_000_000_000),
        tx_type: TxType::Config,
        creator: Identity::new("OrdererMSP", "CN=orderer"),
        chaincode_name: String::new(),
        function: String::new(),
        args: Vec::new(),
        endorsers: Vec::new(),
        read_set: Vec::new(),
        write_set: Vec::new(),
    }
}

pub fn write_tx(id: &str, writes: Vec<WriteItem>) -> RawTransaction {
    RawTransaction {
        tx_id: id.into(),
        tx_type: TxType::EndorserTransaction,
        creator: Identity::new("Org1MSP", "CN=user1"),
        chaincode_name: "fixturecc".into(),
        function: "put".into(),
        endorsers: vec![Identity::new("Org1MSP", "CN=peer0")],
        write_set: writes,
        ..genesis_tx()
    }
}

/// Chain-linked blocks: a genesis block followed by one block per entry of
/// `bodies`, each holding (transaction, validation code) pairs.
pub fn chain(bodies: Vec<Vec<(RawTransaction, u8)>>) -> Vec<LedgerBlock> {
    let mut blocks: Vec<LedgerBlock> = Vec::new();
    let all = std::iter::once(vec![(genesis_tx(), 0)]).chain(bodies);
    for (n, body) in all.enumerate() {
        let (txs, codes): (Vec<_>, Vec<_>) = body.into_iter().unzip();
        let previous_hash = blocks.last().map_or(ZERO_HASH.to_string(), |b| b.hash());
        let header = BlockHeader {
            number: n as u64,
            previous_hash,
            data_hash: data_hash(&txs),
        };
        let block = LedgerBlock {
            metadata: BlockMetadata {
                commit_time: Timestamp::from_micros(1_600_000_000_000_000 + n as i64 * 1_000_000),
                validation_codes: codes.into_iter().map(ValidationCode).collect(),
            },
            header,
            transactions: txs,
        };
        assert_eq!(block.hash(), block_hash(&block.header));
        block.validate().expect("fixture blocks are valid");
        blocks.push(block);
    }
    blocks
}

/// One valid transaction per value, each writing key `k{i:04}`.
pub fn corpus_chain(values: &[String]) -> Vec<LedgerBlock> {
    let bodies = values
        .chunks(25)
        .enumerate()
        .map(|(c, chunk)| {
            chunk
                .iter()
                .enumerate()
                .map(|(j, v)| {
                    let i = c * 25 + j;
                    (write_tx(&format!("tx{i:05}"), vec![WriteItem::put(format!("k{i:04}"), v.clone())]), 0)
                })
                .collect()
        })
        .collect();
    chain(bodies)
}

// Rich-query oracle: an expression type of our own, rendered to query text
// for the engine and evaluated here directly.

#[derive(Debug, Clone)]
pub enum OLit {
    Str(String),
    Num(f64),
    Bool(bool),
    Null,
}

#[derive(Debug, Clone)]
pub enum OExpr {
    Cmp(Vec<String>, &'static str, OLit),
    And(Box<OExpr>, Box<OExpr>),
    Or(Box<OExpr>, Box<OExpr>),
    Not(Box<OExpr>),
}

impl OExpr {
    pub fn text(&self) -> String {
        match self {
            OExpr::Cmp(path, op, lit) => {
                let lit = match lit {
                    OLit::Str(s) => serde_json::to_string(s).unwrap(),
                    OLit::Num(n) => format!("{n}"),
                    OLit::Bool(b) => if *b { "true" } else { "false" }.to_string(),
                    OLit::Null => "null".into(),
                };
                format!("{} {op} {lit}", path.join("."))
            }
            OExpr::And(a, b) => format!("({}) AND ({})", a.text(), b.text()),
            OExpr::Or(a, b) => format!("({}) OR ({})", a.text(), b.text()),
            OExpr::Not(a) => format!("NOT ({})", a.text()),
        }
    }

    pub fn eval(&self, doc: &Value) -> bool {
        match self {
            OExpr::And(a, b) => a.eval(doc) && b.eval(doc),
            OExpr::Or(a, b) => a.eval(doc) || b.eval(doc),
            OExpr::Not(a) => !a.eval(doc),
            OExpr::Cmp(path, op, lit) => {
                let mut cur = doc;
                for seg in path {
                    match cur {
                        Value::Object(m) if m.contains_key(seg) => cur = &m[seg],
                        _ => return false,
                    }
                }
                let same = |v: &Value| match (v, lit) {
                    (Value::String(a), OLit::Str(b)) => a == b,
                    (Value::Number(a), OLit::Num(b)) => a.as_f64().unwrap() == *b,
                    (Value::Bool(a), OLit::Bool(b)) => a == b,
                    (Value::Null, OLit::Null) => true,
                    _ => false,
                };
                if *op == "CONTAINS" {
                    return match (cur, lit) {
                        (Value::String(a), OLit::Str(b)) => a.contains(b.as_str()),
                        (Value::Array(items), _) => items.iter().any(same),
                        _ => false,
                    };
                }
                if cur.is_array() || cur.is_object() {
                    return false;
                }
                let ord = match (cur, lit) {
                    (Value::String(a), OLit::Str(b)) => Some(a.as_str().cmp(b.as_str())),
                    (Value::Number(a), OLit::Num(b)) => a.as_f64().unwrap().partial_cmp(b),
                    _ => None,
                };
                use std::cmp::Ordering::*;
                match *op {
                    "=" => same(cur),
                    "!=" => !same(cur),
                    "<" => ord == Some(Less),
                    "<=" => matches!(ord, Some(Less | Equal)),
                    ">" => ord == Some(Greater),
                    ">=" => matches!(ord, Some(Greater | Equal)),
                    _ => unreachable!(),
                }
            }
        }
    }
}

const NAMES: [&str; 5] = ["a", "b", "c", "name", "tags"];
const STRS: [&str; 5] = ["", "x", "xy", "David", "yz"];

fn random_scalar(rng: &mut impl Rng) -> Value {
    match rng.random_range(0..5) {
        0 => json!(STRS.choose(rng).unwrap()),
        1 => json!(rng.random_range(-3..4)),
        2 => json!(rng.random_range(-3..4) as f64 + 0.5),
        3 => json!(rng.random_bool(0.5)),
        _ => Value::Null,
    }
}

/// Random JSON document over a small vocabulary so conditions hit often.
pub fn random_doc(rng: &mut impl Rng, depth: u32) -> Value {
    let mut m = serde_json::Map::new();
    for name in NAMES {
        if !rng.random_bool(0.6) {
            continue;
        }
        let v = match rng.random_range(0..6) {
            0 if depth > 0 => random_doc(rng, depth - 1),
            1 => Value::Array((0..rng.random_range(0..4)).map(|_| random_scalar(rng)).collect()),
            _ => random_scalar(rng),
        };
        m.insert(name.to_string(), v);
    }
    Value::Object(m)
}

fn random_lit(rng: &mut impl Rng, ordering: bool) -> OLit {
    match rng.random_range(0..if ordering { 2 } else { 4 }) {
        0 => OLit::Str(STRS.choose(rng).unwrap().to_string()),
        1 => OLit::Num(rng.random_range(-3..4) as f64 + if rng.random_bool(0.3) { 0.5 } else { 0.0 }),
        2 => OLit::Bool(rng.random_bool(0.5)),
        _ => OLit::Null,
    }
}

pub fn random_expr(rng: &mut impl Rng, depth: u32) -> OExpr {
    if depth == 0 || rng.random_bool(0.4) {
        let len = rng.random_range(1..3);
        let path = (0..len).map(|_| NAMES.choose(rng).unwrap().to_string()).collect();
        let op = *["=", "!=", "<", "<=", ">", ">=", "CONTAINS"].choose(rng).unwrap();
        let ordering = matches!(op, "<" | "<=" | ">" | ">=");
        return OExpr::Cmp(path, op, random_lit(rng, ordering));
    }
    match rng.random_range(0..3) {
        0 => OExpr::And(Box::new(random_expr(rng, depth - 1)), Box::new(random_expr(rng, depth - 1))),
        1 => OExpr::Or(Box::new(random_expr(rng, depth - 1)), Box::new(random_expr(rng, depth - 1))),
        _ => OExpr::Not(Box::new(random_expr(rng, depth - 1))),
    }
}

/// Independent projection of a raw ledger for transaction-filter oracles.
#[derive(Debug, Clone)]
pub struct TxRow {
    pub tx_id: String,
    pub block_num: u64,
    pub tx_num: u64,
    pub timestamp: i64,
    pub creator: String,
    pub endorsers: Vec<String>,
    pub chaincode: String,
    pub function: String,
    pub channel: String,
    pub valid: bool,
}

pub fn tx_rows(blocks: &[LedgerBlock]) -> Vec<TxRow> {
    let mut rows = Vec::new();
    for b in blocks {
        for (i, t) in b.transactions.iter().enumerate() {
            rows.push(TxRow {
                tx_id: t.tx_id.clone(),
                block_num: b.header.number,
                tx_num: i as u64,
                timestamp: t.timestamp.as_micros(),
                creator: t.creator.msp_id.clone(),
                endorsers: t.endorsers.iter().map(|e| e.msp_id.clone()).collect(),
                chaincode: t.chaincode_name.clone(),
                function: t.function.clone(),
                channel: t.channel_id.clone(),
                valid: b.metadata.validation_codes[i].0 == 0,
            });
        }
    }
    rows
}

pub use refiner_core::query::{Page, SortOrder, TxFilter};

/// Random filter whose criteria draw from values present in `rows`, so the
/// result is non-trivial; each criterion is present with probability 0.3.
pub fn random_filter(rng: &mut impl Rng, rows: &[TxRow]) -> TxFilter {
    let pick = |rng: &mut _| rows.choose(rng).unwrap().clone();
    let mut f = TxFilter::default();
    if rng.random_bool(0.3) {
        let (a, b) = (pick(rng).block_num, pick(rng).block_num);
        f.block_range = Some((a.min(b), a.max(b)));
    }
    if rng.random_bool(0.3) {
        let (a, b) = (pick(rng).timestamp, pick(rng).timestamp);
        f.time_range = Some((Timestamp::from_micros(a.min(b)), Timestamp::from_micros(a.max(b))));
    }
    if rng.random_bool(0.05) {
        f.tx_id = Some(pick(rng).tx_id);
    }
    if rng.random_bool(0.3) {
        f.creator_msp = Some(pick(rng).creator);
    }
    if rng.random_bool(0.3) {
        f.endorser_msp = pick(rng).endorsers.first().cloned().or(Some("NoSuchMSP".into()));
    }
    if rng.random_bool(0.3) {
        f.chaincode_name = Some(pick(rng).chaincode);
    }
    if rng.random_bool(0.3) {
        f.function = Some(pick(rng).function);
    }
    if rng.random_bool(0.2) {
        f.channel_id = Some(pick(rng).channel);
    }
    f.valid_only = rng.random_bool(0.5);
    if rng.random_bool(0.3) {
        f.sort = SortOrder::Descending;
    }
    f.page = Page::new(0, 1000);
    f
}

/// Linear scan: matching tx ids in the filter's order, before pagination.
pub fn oracle_filter(f: &TxFilter, rows: &[TxRow]) -> Vec<String> {
    let mut out: Vec<&TxRow> = rows
        .iter()
        .filter(|r| {
            f.block_range.is_none_or(|(lo, hi)| lo <= r.block_num && r.block_num <= hi)
                && f.time_range
                    .is_none_or(|(lo, hi)| lo.as_micros() <= r.timestamp && r.timestamp <= hi.as_micros())
                && f.tx_id.as_ref().is_none_or(|v| *v == r.tx_id)
                && f.creator_msp.as_ref().is_none_or(|v| *v == r.creator)
                && f.endorser_msp.as_ref().is_none_or(|v| r.endorsers.contains(v))
                && f.chaincode_name.as_ref().is_none_or(|v| *v == r.chaincode)
                && f.function.as_ref().is_none_or(|v| *v == r.function)
                && f.channel_id.as_ref().is_none_or(|v| *v == r.channel)
                && (!f.valid_only || r.valid)
        })
        .collect();
    out.sort_by_key(|r| (r.block_num, r.tx_num));
    if f.sort == SortOrder::Descending {
        out.reverse();
    }
    out.into_iter().map(|r| r.tx_id.clone()).collect()
}

/// Random document over a small field universe with mostly fixed types, so
/// random pairs land in every comparison outcome.
pub fn random_shape_doc(rng: &mut impl Rng) -> Value {
    fn scalar(rng: &mut impl Rng, kind: usize) -> Value {
        // Occasionally flip the type to produce conflicts.
        let kind = if rng.random_bool(0.1) { rng.random_range(0..4) } else { kind };
        match kind {
            0 => json!("s"),
            1 => json!(rng.random_range(0..100)),
            2 => json!(rng.random_bool(0.5)),
            _ => Value::Null,
        }
    }
    let mut m = serde_json::Map::new();
    for i in 0..6 {
        if rng.random_bool(0.5) {
            m.insert(format!("f{i}"), scalar(rng, i % 4));
        }
    }
    if rng.random_bool(0.5) {
        let mut inner = serde_json::Map::new();
        for i in 0..4 {
            if rng.random_bool(0.5) {
                inner.insert(format!("g{i}"), scalar(rng, (i + 1) % 4));
            }
        }
        m.insert("o".into(), Value::Object(inner));
    }
    if rng.random_bool(0.2) {
        let items = (0..rng.random_range(0..3)).map(|_| scalar(rng, 1)).collect();
        m.insert("arr".into(), Value::Array(items));
    }
    Value::Object(m)
}

/// (path, type) pairs of an array-free document, computed directly.
pub fn flat_paths(v: &Value, prefix: &str, out: &mut Vec<(String, &'static str)>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flat_paths(child, &p, out);
            }
        }
        Value::String(_) => out.push((prefix.to_string(), "string")),
        Value::Number(_) => out.push((prefix.to_string(), "number")),
        Value::Bool(_) => out.push((prefix.to_string(), "boolean")),
        Value::Null => out.push((prefix.to_string(), "null")),
        Value::Array(_) => panic!("array-free documents only"),
    }
}

/// Multiset of states drawn from chains of nested shapes: each family
/// `fam` is a prefix-truncation of one full shape, so any two states of a
/// family are related by containment and different families never are.
pub fn chain_multiset(rng: &mut impl Rng, n: usize) -> Vec<String> {
    let catalog = refiner_core::gen::ShapeCatalog::builtin();
    let shapes: Vec<_> = catalog.names().map(|s| catalog.get(s).unwrap().clone()).collect();
    (0..n)
        .map(|_| {
            let shape = shapes.choose(rng).unwrap();
            let Value::Object(full) = shape.instantiate(rng) else { unreachable!() };
            // BTreeMap-backed maps iterate in key order, so a prefix of the
            // entries is a stable truncation.
            let keep = rng.random_range(1..=full.len());
            let truncated: serde_json::Map<_, _> = full.into_iter().take(keep).collect();
            Value::Object(truncated).to_string()
        })
        .collect()
}
