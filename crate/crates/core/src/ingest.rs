//! Wires a block source, the parser pipeline and the schema pipeline
//! together: a synchronizer feeding a [`StoreSink`] on the caller's thread,
//! and a dedicated schema thread draining the bounded queue between them.

use std::path::Path;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::Receiver;

use crate::parser::{ParseReport, StoreSink};
use crate::schema::{SchemaItem, SchemaPipeline, SchemaPipelineError, SchemaProgress};
use crate::source::BlockSource;
use crate::store::{Checkpointer, Store, StoreError};
use crate::sync::{StopSignal, SyncError, SyncReport, SyncState, Synchronizer, DEFAULT_POLL_INTERVAL};

pub const DEFAULT_QUEUE_CAPACITY: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestOptions {
    pub queue_capacity: usize,
    pub poll_interval: Duration,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            poll_interval: DEFAULT_POLL_INTERVAL,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error(transparent)]
    Schema(#[from] SchemaPipelineError),
    #[error("schema pipeline thread panicked")]
    SchemaPanicked,
}

/// Reports how many items wait in the schema queue. Reads zero once the
/// schema thread has exited.
#[derive(Clone, Default)]
pub struct QueueGauge(Arc<Mutex<Option<Receiver<SchemaItem>>>>);

impl QueueGauge {
    pub fn depth(&self) -> usize {
        self.0.lock().expect("gauge lock").as_ref().map_or(0, Receiver::len)
    }

    fn close(&self) {
        self.0.lock().expect("gauge lock").take();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestSummary {
    pub recorded_block_height: i64,
    pub schema: SchemaProgress,
}

/// A running ingestion: both pipelines over one store directory.
pub struct Ingestor {
    sync: Option<Synchronizer>,
    schema: Option<JoinHandle<Result<SchemaProgress, SchemaPipelineError>>>,
    schema_stop: StopSignal,
    gauge: QueueGauge,
    _checkpointer: Checkpointer,
}

impl Ingestor {
    pub fn start(dir: impl AsRef<Path>, source: Box<dyn BlockSource>, opts: IngestOptions) -> Result<Self, IngestError> {
        Self::start_with(dir, source, opts, |_| {})
    }

    /// Like [`Ingestor::start`], running `on_commit` after each parsed block.
    pub fn start_with(
        dir: impl AsRef<Path>,
        source: Box<dyn BlockSource>,
        opts: IngestOptions,
        on_commit: impl FnMut(&ParseReport) + Send + 'static,
    ) -> Result<Self, IngestError> {
        let mut store = Store::open(dir)?;
        let checkpointer = store.spawn_checkpointer()?;
        let mut pipeline = SchemaPipeline::open(store.reopen()?)?;
        let (tx, rx) = crossbeam_channel::bounded(opts.queue_capacity.max(1));
        let gauge = QueueGauge(Arc::new(Mutex::new(Some(rx.clone()))));
        let schema_stop = StopSignal::new();
        let schema = {
            let gauge = gauge.clone();
            let stop = schema_stop.clone();
            std::thread::Builder::new()
                .name("schema-pipeline".into())
                .spawn(move || {
                    let result = pipeline.run(&rx, &stop, |_| {});
                    if let Err(e) = &result {
                        log::error!("{e}");
                    }
                    // Unblocks a producer waiting on a full queue.
                    gauge.close();
                    drop(rx);
                    result
                })
                .map_err(|e| StoreError::Corruption(format!("cannot spawn schema thread: {e}")))?
        };
        let sink = StoreSink::new(store, Some(tx)).on_commit(on_commit);
        let sync = Synchronizer::new(source, Box::new(sink), opts.poll_interval)?;
        Ok(Ingestor {
            sync: Some(sync),
            schema: Some(schema),
            schema_stop,
            gauge,
            _checkpointer: checkpointer,
        })
    }

    pub fn sync_state(&self) -> Arc<SyncState> {
        self.synchronizer().state()
    }

    pub fn queue_gauge(&self) -> QueueGauge {
        self.gauge.clone()
    }

    pub fn synchronizer(&self) -> &Synchronizer {
        self.sync.as_ref().expect("synchronizer present until finish")
    }

    pub fn sync_once(&self) -> Result<SyncReport, SyncError> {
        self.synchronizer().sync_once()
    }

    /// Polls the source until `stop` triggers.
    pub fn run_polling(&self, stop: &StopSignal) -> Result<u64, SyncError> {
        self.synchronizer().run_polling(stop)
    }

    /// Closes the queue, lets the schema pipeline drain it and waits for it.
    pub fn finish(mut self) -> Result<IngestSummary, IngestError> {
        let sync = self.sync.take().expect("finish runs once");
        let recorded_block_height = sync.state().recorded_block_height();
        drop(sync);
        let schema = self
            .schema
            .take()
            .expect("finish runs once")
            .join()
            .map_err(|_| IngestError::SchemaPanicked)??;
        Ok(IngestSummary {
            recorded_block_height,
            schema,
        })
    }
}

impl Drop for Ingestor {
    fn drop(&mut self) {
        if let Some(handle) = self.schema.take() {
            self.schema_stop.trigger();
            self.sync.take();
            let _ = handle.join();
        }
    }
}

/// One-shot ingestion of everything the source currently holds.
pub fn ingest_all(dir: impl AsRef<Path>, source: Box<dyn BlockSource>, opts: IngestOptions) -> Result<IngestSummary, IngestError> {
    let ingestor = Ingestor::start(dir, source, opts)?;
    ingestor.sync_once()?;
    ingestor.finish()
}
