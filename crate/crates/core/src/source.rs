//! Where blocks come from.
//!
//! Sources are registered by kind name in a [`SourceRegistry`] and selected
//! at runtime from configuration (`source.kind`).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::gen::{GenConfig, GenError, LedgerGenerator};
use crate::model::{parse_block_json, LedgerBlock, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum SourceError {
    #[error("source unavailable: {0}")]
    Unavailable(String),
    #[error("block {0} not available")]
    NoSuchBlock(u64),
    #[error("line {line}: {error}")]
    Malformed { line: u64, error: ModelError },
    #[error("unknown source kind {0:?}")]
    UnknownKind(String),
    #[error("invalid source config: {0}")]
    Config(String),
    #[error(transparent)]
    Generator(#[from] GenError),
}

/// A sequential, append-only supply of blocks.
///
/// `max_height` never decreases, and `get_block(n)` returns the same block
/// for every `n <= max_height()`.
pub trait BlockSource: Send {
    fn kind(&self) -> &'static str;

    /// Height of the newest available block, or -1 when there is none.
    fn max_height(&mut self) -> Result<i64, SourceError>;

    fn get_block(&mut self, number: u64) -> Result<LedgerBlock, SourceError>;
}

/// Replays a `.ledger.jsonl` file. Line `n` holds block `n`.
///
/// In follow mode the file is rescanned on every `max_height` call and only
/// newline-terminated lines count, so a half-written append is never read.
pub struct FileReplaySource {
    path: PathBuf,
    follow: bool,
    line_starts: Vec<u64>,
    scanned_to: u64,
    pending_eof: bool,
}

impl FileReplaySource {
    pub fn new(path: impl Into<PathBuf>, follow: bool) -> Self {
        FileReplaySource {
            path: path.into(),
            follow,
            line_starts: Vec::new(),
            scanned_to: 0,
            pending_eof: false,
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn open(&self) -> Result<File, SourceError> {
        File::open(&self.path).map_err(|e| SourceError::Unavailable(format!("{}: {e}", self.path.display())))
    }

    fn scan(&mut self) -> Result<(), SourceError> {
        if self.pending_eof {
            return Ok(());
        }
        let mut file = self.open()?;
        file.seek(SeekFrom::Start(self.scanned_to))
            .map_err(|e| SourceError::Unavailable(e.to_string()))?;
        let mut reader = BufReader::new(file);
        let mut offset = self.scanned_to;
        let mut line = Vec::new();
        loop {
            line.clear();
            let n = reader
                .read_until(b'\n', &mut line)
                .map_err(|e| SourceError::Unavailable(e.to_string()))?;
            if n == 0 {
                break;
            }
            let complete = line.ends_with(b"\n");
            if !complete && self.follow {
                break;
            }
            if !line.iter().all(u8::is_ascii_whitespace) {
                self.line_starts.push(offset);
            }
            offset += n as u64;
            if !complete {
                self.pending_eof = true;
                break;
            }
        }
        self.scanned_to = offset;
        Ok(())
    }
}

impl BlockSource for FileReplaySource {
    fn kind(&self) -> &'static str {
        "file"
    }

    fn max_height(&mut self) -> Result<i64, SourceError> {
        if self.follow || self.scanned_to == 0 {
            self.scan()?;
        }
        Ok(self.line_starts.len() as i64 - 1)
    }

    fn get_block(&mut self, number: u64) -> Result<LedgerBlock, SourceError> {
        let start = *self
            .line_starts
            .get(number as usize)
            .ok_or(SourceError::NoSuchBlock(number))?;
        let mut file = self.open()?;
        file.seek(SeekFrom::Start(start))
            .map_err(|e| SourceError::Unavailable(e.to_string()))?;
        let mut line = String::new();
        BufReader::new(file.by_ref())
            .read_line(&mut line)
            .map_err(|e| SourceError::Unavailable(e.to_string()))?;
        parse_block_json(line.trim_end()).map_err(|error| SourceError::Malformed {
            line: number + 1,
            error,
        })
    }
}

/// Emits generated blocks as if a live network produced them:
/// `blocks_per_poll` more become visible on each `max_height` call.
pub struct GeneratorSource {
    generator: LedgerGenerator,
    emitted: Vec<LedgerBlock>,
    blocks_per_poll: u64,
}

impl GeneratorSource {
    pub fn new(config: GenConfig, blocks_per_poll: Option<u64>) -> Result<Self, SourceError> {
        let blocks_per_poll = blocks_per_poll.unwrap_or(u64::MAX).max(1);
        Ok(GeneratorSource {
            generator: LedgerGenerator::new(config)?,
            emitted: Vec::new(),
            blocks_per_poll,
        })
    }
}

impl BlockSource for GeneratorSource {
    fn kind(&self) -> &'static str {
        "generator"
    }

    fn max_height(&mut self) -> Result<i64, SourceError> {
        let mut produced = 0;
        while produced < self.blocks_per_poll {
            match self.generator.next() {
                Some(b) => self.emitted.push(b),
                None => break,
            }
            produced += 1;
        }
        Ok(self.emitted.len() as i64 - 1)
    }

    fn get_block(&mut self, number: u64) -> Result<LedgerBlock, SourceError> {
        self.emitted
            .get(number as usize)
            .cloned()
            .ok_or(SourceError::NoSuchBlock(number))
    }
}

/// `[source]` section of the configuration file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub kind: String,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub follow: bool,
    #[serde(default)]
    pub blocks_per_poll: Option<u64>,
    #[serde(default)]
    pub generator: Option<GenConfig>,
}

impl SourceConfig {
    pub fn file(path: impl Into<PathBuf>, follow: bool) -> Self {
        SourceConfig {
            kind: "file".into(),
            path: Some(path.into()),
            follow,
            blocks_per_poll: None,
            generator: None,
        }
    }

    pub fn generator(config: GenConfig) -> Self {
        SourceConfig {
            kind: "generator".into(),
            path: None,
            follow: false,
            blocks_per_poll: None,
            generator: Some(config),
        }
    }
}

pub type SourceFactory = Box<dyn Fn(&SourceConfig) -> Result<Box<dyn BlockSource>, SourceError> + Send + Sync>;

/// Block source constructors keyed by kind name.
pub struct SourceRegistry {
    factories: BTreeMap<String, SourceFactory>,
}

impl Default for SourceRegistry {
    fn default() -> Self {
        SourceRegistry::with_builtins()
    }
}

impl SourceRegistry {
    pub fn empty() -> Self {
        SourceRegistry {
            factories: BTreeMap::new(),
        }
    }

    /// Registry holding `file` and `generator`.
    pub fn with_builtins() -> Self {
        let mut r = SourceRegistry::empty();
        r.register("file", |cfg: &SourceConfig| {
            let path = cfg
                .path
                .clone()
                .ok_or_else(|| SourceError::Config("file source needs `path`".into()))?;
            Ok(Box::new(FileReplaySource::new(path, cfg.follow)) as Box<dyn BlockSource>)
        });
        r.register("generator", |cfg: &SourceConfig| {
            let gen = cfg
                .generator
                .clone()
                .ok_or_else(|| SourceError::Config("generator source needs a `[source.generator]` table".into()))?;
            Ok(Box::new(GeneratorSource::new(gen, cfg.blocks_per_poll)?) as Box<dyn BlockSource>)
        });
        r
    }

    pub fn register<F>(&mut self, kind: impl Into<String>, factory: F)
    where
        F: Fn(&SourceConfig) -> Result<Box<dyn BlockSource>, SourceError> + Send + Sync + 'static,
    {
        self.factories.insert(kind.into(), Box::new(factory));
    }

    pub fn kinds(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn create(&self, config: &SourceConfig) -> Result<Box<dyn BlockSource>, SourceError> {
        let factory = self
            .factories
            .get(&config.kind)
            .ok_or_else(|| SourceError::UnknownKind(config.kind.clone()))?;
        factory(config)
    }
}
