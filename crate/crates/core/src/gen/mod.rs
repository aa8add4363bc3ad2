//! Deterministic synthetic ledgers.
//!
//! A seeded generator emits a chain-linked ledger whose transactions create,
//! update and delete report states drawn from a catalog of value shapes. The
//! same configuration always produces byte-identical output.

mod shapes;

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use shapes::{FieldKind, FieldSpec, ShapeCatalog, ShapeSpec};

use crate::model::{
    data_hash, to_block_json, BlockHeader, BlockMetadata, Identity, LedgerBlock, RawTransaction, ReadItem,
    StateVersion, Timestamp, TxType, ValidationCode, WriteItem, ZERO_HASH,
};

/// Name of the pseudo-random generator behind every generated ledger.
pub const PRNG_ALGORITHM: &str = "ChaCha8 (rand_chacha 0.9, seed_from_u64)";

pub const CHAINCODE: &str = "reportcc";

/// 2021-01-01T00:00:00Z.
const EPOCH_MICROS: i64 = 1_609_459_200_000_000;
const BLOCK_SPACING_MICROS: i64 = 2_000_000;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TxsPerBlock {
    Fixed(u32),
    Range([u32; 2]),
}

impl TxsPerBlock {
    fn bounds(self) -> (u32, u32) {
        match self {
            TxsPerBlock::Fixed(n) => (n, n),
            TxsPerBlock::Range([lo, hi]) => (lo, hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    /// Total blocks including the genesis block.
    pub block_count: u64,
    pub txs_per_block: TxsPerBlock,
    /// Weight per shape name; weights sum to 1.
    pub schema_mix: BTreeMap<String, f64>,
    pub update_ratio: f64,
    pub delete_ratio: f64,
    pub invalid_ratio: f64,
    pub org_count: u32,
    pub channel_id: String,
    /// Leading data blocks that only create new keys.
    pub warmup_blocks: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 1,
            block_count: 20,
            txs_per_block: TxsPerBlock::Fixed(10),
            schema_mix: ["A", "B", "C", "D"].into_iter().map(|s| (s.to_string(), 0.25)).collect(),
            update_ratio: 0.2,
            delete_ratio: 0.05,
            invalid_ratio: 0.05,
            org_count: 3,
            channel_id: "mychannel".into(),
            warmup_blocks: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self, catalog: &ShapeCatalog) -> Result<(), GenError> {
        let bad = |m: String| Err(GenError::InvalidConfig(m));
        for (name, r) in [
            ("update_ratio", self.update_ratio),
            ("delete_ratio", self.delete_ratio),
            ("invalid_ratio", self.invalid_ratio),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} must lie in [0, 1], got {r}"));
            }
        }
        if self.update_ratio + self.delete_ratio > 1.0 + 1e-12 {
            return bad("update_ratio + delete_ratio exceeds 1".into());
        }
        if self.block_count == 0 {
            return bad("block_count must be at least 1".into());
        }
        let (lo, hi) = self.txs_per_block.bounds();
        if lo == 0 || lo > hi {
            return bad(format!("txs_per_block range {lo}..={hi} is empty or zero"));
        }
        if self.org_count == 0 {
            return bad("org_count must be at least 1".into());
        }
        if self.channel_id.is_empty() {
            return bad("channel_id must be non-empty".into());
        }
        if self.schema_mix.is_empty() {
            return bad("schema_mix is empty".into());
        }
        for (name, w) in &self.schema_mix {
            if catalog.get(name).is_none() {
                return bad(format!("unknown shape {name:?}"));
            }
            if !(w.is_finite() && *w >= 0.0) {
                return bad(format!("weight of {name} must be non-negative"));
            }
        }
        let sum: f64 = self.schema_mix.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("schema_mix weights sum to {sum}, expected 1"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, GenError> {
        toml::from_str(text).map_err(|e| GenError::InvalidConfig(e.to_string()))
    }
}

/// Live keys with O(1) uniform sampling and removal.
#[derive(Default)]
struct LiveKeys {
    keys: Vec<String>,
    index: HashMap<String, usize>,
}

impl LiveKeys {
    fn insert(&mut self, key: String) {
        if !self.index.contains_key(&key) {
            self.index.insert(key.clone(), self.keys.len());
            self.keys.push(key);
        }
    }

    fn remove(&mut self, key: &str) {
        if let Some(i) = self.index.remove(key) {
            self.keys.swap_remove(i);
            if let Some(moved) = self.keys.get(i) {
                self.index.insert(moved.clone(), i);
            }
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> Option<&String> {
        (!self.keys.is_empty()).then(|| &self.keys[rng.random_range(0..self.keys.len())])
    }
}

enum Action {
    Create,
    Update,
    Delete,
}

/// Iterator over the blocks of one generated ledger.
pub struct LedgerGenerator {
    config: GenConfig,
    rng: ChaCha8Rng,
    shapes: Vec<(ShapeSpec, f64)>,
    next_block: u64,
    previous_hash: String,
    next_key: u64,
    live: LiveKeys,
    /// Shape index and committed version of every live key.
    committed: HashMap<String, (usize, StateVersion)>,
}

impl LedgerGenerator {
    pub fn new(config: GenConfig) -> Result<Self, GenError> {
        Self::with_catalog(config, &ShapeCatalog::builtin())
    }

    pub fn with_catalog(config: GenConfig, catalog: &ShapeCatalog) -> Result<Self, GenError> {
        config.validate(catalog)?;
        let shapes = config
            .schema_mix
            .iter()
            .map(|(name, w)| (catalog.get(name).expect("validated").clone(), *w))
            .collect();
        Ok(LedgerGenerator {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            shapes,
            next_block: 0,
            previous_hash: ZERO_HASH.to_string(),
            next_key: 0,
            live: LiveKeys::default(),
            committed: HashMap::new(),
        })
    }

    pub fn config(&self) -> &GenConfig {
        &self.config
    }

    fn tx_id(&self, block: u64, tx: u64) -> String {
        hex::encode(Sha256::digest(format!("{}:{block}:{tx}", self.config.seed).as_bytes()))
    }

    fn org(&mut self) -> u32 {
        self.rng.random_range(1..=self.config.org_count)
    }

    fn pick_shape(&mut self) -> usize {
        let mut roll: f64 = self.rng.random();
        for (i, (_, w)) in self.shapes.iter().enumerate() {
            if roll < *w {
                return i;
            }
            roll -= w;
        }
        self.shapes
            .iter()
            .rposition(|(_, w)| *w > 0.0)
            .unwrap_or(self.shapes.len() - 1)
    }

    fn genesis(&mut self) -> LedgerBlock {
        let tx = RawTransaction {
            tx_id: self.tx_id(0, 0),
            channel_id: self.config.channel_id.clone(),
            timestamp: Timestamp::from_micros(EPOCH_MICROS),
            tx_type: TxType::Config,
            creator: Identity::new("OrdererMSP", "orderer.example.com"),
            chaincode_name: String::new(),
            function: String::new(),
            args: vec![],
            endorsers: vec![],
            read_set: vec![],
            write_set: vec![],
        };
        self.seal(0, vec![tx], vec![ValidationCode::VALID])
    }

    fn seal(&mut self, number: u64, transactions: Vec<RawTransaction>, codes: Vec<ValidationCode>) -> LedgerBlock {
        let header = BlockHeader {
            number,
            previous_hash: std::mem::take(&mut self.previous_hash),
            data_hash: data_hash(&transactions),
        };
        let block_time = EPOCH_MICROS + number as i64 * BLOCK_SPACING_MICROS;
        let block = LedgerBlock {
            header,
            transactions,
            metadata: BlockMetadata {
                commit_time: Timestamp::from_micros(block_time + BLOCK_SPACING_MICROS * 3 / 4),
                validation_codes: codes,
            },
        };
        self.previous_hash = block.hash();
        block
    }

    fn data_block(&mut self, number: u64) -> LedgerBlock {
        let (lo, hi) = self.config.txs_per_block.bounds();
        let count = self.rng.random_range(lo..=hi) as u64;
        let block_time = EPOCH_MICROS + number as i64 * BLOCK_SPACING_MICROS;
        let warmup = number <= self.config.warmup_blocks;
        let mut txs = Vec::with_capacity(count as usize);
        let mut codes = Vec::with_capacity(count as usize);
        for tx_num in 0..count {
            let version = StateVersion::new(number, tx_num);
            let roll: f64 = self.rng.random();
            let action = if warmup {
                Action::Create
            } else if roll < self.config.delete_ratio {
                Action::Delete
            } else if roll < self.config.delete_ratio + self.config.update_ratio {
                Action::Update
            } else {
                Action::Create
            };
            let valid = !self.rng.random_bool(self.config.invalid_ratio);
            let creator_org = self.org();
            let user = self.rng.random_range(1..=3);
            let endorser_count = self.rng.random_range(1..=3);
            let endorsers = (0..endorser_count)
                .map(|_| {
                    let o = self.org();
                    Identity::new(format!("Org{o}MSP"), format!("peer0.org{o}.example.com"))
                })
                .collect();

            let mut read_set = vec![];
            let mut write_set = vec![];
            let (function, args) = match action {
                Action::Create => {
                    let key = format!("report-{:07}", self.next_key);
                    self.next_key += 1;
                    let shape = self.pick_shape();
                    let value = self.shapes[shape].0.instantiate(&mut self.rng).to_string();
                    if valid {
                        self.live.insert(key.clone());
                        self.committed.insert(key.clone(), (shape, version));
                    }
                    write_set.push(WriteItem::put(&key, &value));
                    ("createReport", vec![key, value])
                }
                Action::Update | Action::Delete => match self.live.sample(&mut self.rng).cloned() {
                    Some(key) => {
                        let (shape, read_version) = self.committed[&key];
                        read_set.push(ReadItem {
                            key: key.clone(),
                            version: read_version,
                        });
                        if matches!(action, Action::Delete) {
                            if valid {
                                self.live.remove(&key);
                                self.committed.remove(&key);
                            }
                            write_set.push(WriteItem::delete(&key));
                            ("deleteReport", vec![key])
                        } else {
                            let value = self.shapes[shape].0.instantiate(&mut self.rng).to_string();
                            if valid {
                                self.committed.insert(key.clone(), (shape, version));
                            }
                            write_set.push(WriteItem::put(&key, &value));
                            ("updateReport", vec![key, value])
                        }
                    }
                    // Nothing to touch yet: a read-only query.
                    None => ("queryReport", vec![]),
                },
            };
            txs.push(RawTransaction {
                tx_id: self.tx_id(number, tx_num),
                channel_id: self.config.channel_id.clone(),
                timestamp: Timestamp::from_micros(block_time + tx_num as i64 * 100),
                tx_type: TxType::EndorserTransaction,
                creator: Identity::new(
                    format!("Org{creator_org}MSP"),
                    format!("User{user}@org{creator_org}.example.com"),
                ),
                chaincode_name: CHAINCODE.into(),
                function: function.into(),
                args,
                endorsers,
                read_set,
                write_set,
            });
            codes.push(if valid {
                ValidationCode::VALID
            } else {
                ValidationCode::MVCC_READ_CONFLICT
            });
        }
        self.seal(number, txs, codes)
    }
}

impl Iterator for LedgerGenerator {
    type Item = LedgerBlock;

    fn next(&mut self) -> Option<LedgerBlock> {
        if self.next_block >= self.config.block_count {
            return None;
        }
        let number = self.next_block;
        self.next_block += 1;
        Some(if number == 0 { self.genesis() } else { self.data_block(number) })
    }
}

/// Generates the whole ledger in memory.
pub fn generate(config: GenConfig) -> Result<Vec<LedgerBlock>, GenError> {
    Ok(LedgerGenerator::new(config)?.collect())
}

/// Writes a generated ledger as JSON Lines; returns the number of blocks and
/// transactions written.
pub fn write_ledger(config: GenConfig, path: &Path) -> Result<(u64, u64), GenError> {
    let file = std::fs::File::create(path).map_err(|e| GenError::Io(format!("{}: {e}", path.display())))?;
    let mut out = std::io::BufWriter::new(file);
    let (mut blocks, mut txs) = (0, 0);
    for block in LedgerGenerator::new(config)? {
        writeln!(out, "{}", to_block_json(&block)).map_err(|e| GenError::Io(e.to_string()))?;
        blocks += 1;
        txs += block.transactions.len() as u64;
    }
    out.flush().map_err(|e| GenError::Io(e.to_string()))?;
    Ok((blocks, txs))
}
