//! Incremental ledger synchronization.
//!
//! Each pass compares the source's maximum height with the recorded height
//! and delivers the missing blocks in ascending order. Passes never overlap:
//! a pass triggered while another is still running returns immediately.

use std::sync::atomic::{AtomicBool, AtomicI64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crossbeam_channel::{select, Receiver, Sender};
use serde::Serialize;

use crate::model::{LedgerBlock, ModelError, Timestamp};
use crate::source::{BlockSource, SourceError};

pub const DEFAULT_POLL_INTERVAL: Duration = Duration::from_secs(2);

pub type SinkError = Box<dyn std::error::Error + Send + Sync>;

/// Consumer of synchronized blocks. The sink owns the durable recorded
/// height, committed together with each block.
pub trait BlockSink: Send {
    fn recorded_height(&mut self) -> Result<i64, SinkError>;
    fn deliver(&mut self, block: LedgerBlock) -> Result<(), SinkError>;
}

#[derive(Debug, thiserror::Error)]
pub enum SyncError {
    #[error("source unavailable: {0}")]
    SourceUnavailable(String),
    #[error("gap detected: requested block {requested}, source returned {returned}")]
    GapDetected { requested: u64, returned: u64 },
    #[error("bad block from source: {0}")]
    BadBlock(ModelError),
    #[error("sink failed: {0}")]
    Sink(SinkError),
}

impl SyncError {
    /// Only sink failures stop the loop; everything else is retried.
    pub fn is_fatal(&self) -> bool {
        matches!(self, SyncError::Sink(_))
    }
}

impl From<SourceError> for SyncError {
    fn from(e: SourceError) -> Self {
        match e {
            SourceError::Malformed { error, .. } => SyncError::BadBlock(error),
            other => SyncError::SourceUnavailable(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SyncReport {
    pub fetched: u64,
    pub new_height: i64,
    /// True when the pass was suppressed because another was running.
    pub skipped: bool,
}

/// Shared synchronization progress, readable from other threads.
#[derive(Debug)]
pub struct SyncState {
    recorded: AtomicI64,
    source_height: AtomicI64,
    running: AtomicBool,
    last_sync_at: Mutex<Option<Timestamp>>,
    poll_interval: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SyncStatus {
    pub recorded_block_height: i64,
    pub last_sync_at: Option<Timestamp>,
    pub source_height: Option<i64>,
    pub running: bool,
}

impl SyncState {
    pub fn new(recorded: i64, poll_interval: Duration) -> Self {
        SyncState {
            recorded: AtomicI64::new(recorded),
            source_height: AtomicI64::new(i64::MIN),
            running: AtomicBool::new(false),
            last_sync_at: Mutex::new(None),
            poll_interval,
        }
    }

    pub fn recorded_block_height(&self) -> i64 {
        self.recorded.load(Ordering::SeqCst)
    }

    pub fn poll_interval(&self) -> Duration {
        self.poll_interval
    }

    pub fn is_running(&self) -> bool {
        self.running.load(Ordering::SeqCst)
    }

    pub fn status(&self) -> SyncStatus {
        let source = self.source_height.load(Ordering::SeqCst);
        SyncStatus {
            recorded_block_height: self.recorded_block_height(),
            last_sync_at: *self.last_sync_at.lock().expect("sync state lock"),
            source_height: (source != i64::MIN).then_some(source),
            running: self.is_running(),
        }
    }

    fn advance(&self, height: i64) {
        self.recorded.fetch_max(height, Ordering::SeqCst);
    }
}

struct RunningGuard<'a>(&'a AtomicBool);

impl Drop for RunningGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::SeqCst);
    }
}

/// Cooperative stop request shared by the sync loop and the pipelines.
#[derive(Clone)]
pub struct StopSignal {
    inner: Arc<StopInner>,
}

struct StopInner {
    flag: AtomicBool,
    sender: Mutex<Option<Sender<()>>>,
    receiver: Receiver<()>,
}

impl Default for StopSignal {
    fn default() -> Self {
        StopSignal::new()
    }
}

impl StopSignal {
    pub fn new() -> Self {
        let (tx, rx) = crossbeam_channel::bounded(0);
        StopSignal {
            inner: Arc::new(StopInner {
                flag: AtomicBool::new(false),
                sender: Mutex::new(Some(tx)),
                receiver: rx,
            }),
        }
    }

    pub fn trigger(&self) {
        self.inner.flag.store(true, Ordering::SeqCst);
        // Disconnecting wakes every waiter at once.
        self.inner.sender.lock().expect("stop lock").take();
    }

    pub fn is_triggered(&self) -> bool {
        self.inner.flag.load(Ordering::SeqCst)
    }

    /// Becomes ready (disconnected) once triggered.
    pub fn receiver(&self) -> &Receiver<()> {
        &self.inner.receiver
    }
}

/// Drives one source into one sink.
pub struct Synchronizer {
    state: Arc<SyncState>,
    source: Mutex<Box<dyn BlockSource>>,
    sink: Mutex<Box<dyn BlockSink>>,
}

impl Synchronizer {
    /// Reads the sink's durable height to seed the recorded height.
    pub fn new(
        source: Box<dyn BlockSource>,
        mut sink: Box<dyn BlockSink>,
        poll_interval: Duration,
    ) -> Result<Self, SyncError> {
        let recorded = sink.recorded_height().map_err(SyncError::Sink)?;
        Ok(Synchronizer {
            state: Arc::new(SyncState::new(recorded, poll_interval)),
            source: Mutex::new(source),
            sink: Mutex::new(sink),
        })
    }

    pub fn state(&self) -> Arc<SyncState> {
        Arc::clone(&self.state)
    }

    /// Runs `f` with exclusive access to the sink.
    pub fn with_sink<R>(&self, f: impl FnOnce(&mut dyn BlockSink) -> R) -> R {
        let mut sink = self.sink.lock().expect("sink lock");
        f(sink.as_mut())
    }

    /// One synchronization pass.
    pub fn sync_once(&self) -> Result<SyncReport, SyncError> {
        if self
            .state
            .running
            .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
            .is_err()
        {
            return Ok(SyncReport {
                fetched: 0,
                new_height: self.state.recorded_block_height(),
                skipped: true,
            });
        }
        let _guard = RunningGuard(&self.state.running);

        let mut source = self.source.lock().expect("source lock");
        let mut sink = self.sink.lock().expect("sink lock");
        let max_height = source.max_height()?;
        self.state.source_height.store(max_height, Ordering::SeqCst);
        let current = self.state.recorded_block_height();
        let mut fetched = 0;
        if max_height > current {
            for number in (current + 1) as u64..=max_height as u64 {
                let block = source.get_block(number)?;
                if block.number() != number {
                    return Err(SyncError::GapDetected {
                        requested: number,
                        returned: block.number(),
                    });
                }
                sink.deliver(block).map_err(SyncError::Sink)?;
                self.state.advance(number as i64);
                fetched += 1;
            }
        }
        *self.state.last_sync_at.lock().expect("sync state lock") = Some(Timestamp::now());
        Ok(SyncReport {
            fetched,
            new_height: self.state.recorded_block_height(),
            skipped: false,
        })
    }

    /// Runs a pass on every tick until `stop` triggers or `ticks` closes.
    /// Source problems are logged and retried on the next tick.
    pub fn run_sync_loop(&self, ticks: &Receiver<Instant>, stop: &StopSignal) -> Result<u64, SyncError> {
        let mut delivered = 0;
        loop {
            if stop.is_triggered() {
                break;
            }
            select! {
                recv(ticks) -> tick => if tick.is_err() { break },
                recv(stop.receiver()) -> _ => break,
            }
            if stop.is_triggered() {
                break;
            }
            match self.sync_once() {
                Ok(report) => delivered += report.fetched,
                Err(e) if e.is_fatal() => return Err(e),
                Err(e) => log::warn!("sync pass failed, retrying next tick: {e}"),
            }
        }
        Ok(delivered)
    }

    /// Loop driven by the wall clock at the configured poll interval, with an
    /// immediate first pass.
    pub fn run_polling(&self, stop: &StopSignal) -> Result<u64, SyncError> {
        let (tx, ticks) = crossbeam_channel::bounded(1);
        tx.send(Instant::now()).expect("fresh channel");
        let ticker = crossbeam_channel::tick(self.state.poll_interval());
        let forward = {
            let stop = stop.clone();
            std::thread::spawn(move || loop {
                select! {
                    recv(ticker) -> t => match t {
                        // A full buffer means a pass is still pending; drop the tick.
                        Ok(t) => { let _ = tx.try_send(t); }
                        Err(_) => break,
                    },
                    recv(stop.receiver()) -> _ => break,
                }
            })
        };
        let result = self.run_sync_loop(&ticks, stop);
        stop.trigger();
        let _ = forward.join();
        result
    }
}
