//! Throughput harness for the two concurrent pipelines.
//!
//! The ledger is generated up front and is not timed. The parser pipeline
//! runs on the calling thread and the schema pipeline on its own thread,
//! joined by the bounded queue, exactly as during ingestion. Both clocks
//! start together; each pipeline records its elapsed time when it has fully
//! processed the first `n` transactions for every checkpoint `n`.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::Serialize;

use crate::gen::{generate, GenConfig, GenError, PRNG_ALGORITHM};
use crate::ingest::IngestError;
use crate::parser::{ParseError, StoreSink};
use crate::schema::{SchemaPipeline, SchemaPipelineError};
use crate::store::{Store, StoreError};
use crate::sync::StopSignal;

/// Schema queue used by the bench. Kept short so the parser cannot bank a
/// large lead over the schema pipeline early and then stall on a full queue.
pub const BENCH_QUEUE_CAPACITY: usize = 64;

pub const PARSER_PIPELINE: &str = "parser";
pub const SCHEMA_PIPELINE: &str = "schema";

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Schema(#[from] SchemaPipelineError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("ledger has {available} transactions, checkpoint {checkpoint} unreachable")]
    CheckpointUnreachable { checkpoint: u64, available: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub pipeline: &'static str,
    pub txs: u64,
    pub elapsed_ms: f64,
    pub tps: f64,
}

/// Wall-clock window of one pipeline, in milliseconds from the common start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Window {
    pub start_ms: f64,
    pub end_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub prng: &'static str,
    pub seed: u64,
    pub total_txs: u64,
    pub rows: Vec<BenchRow>,
    pub parser_window: Window,
    pub schema_window: Window,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pipeline,txs,elapsed_ms,tps\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:.3},{:.1}", r.pipeline, r.txs, r.elapsed_ms, r.tps);
        }
        out
    }

    pub fn rows_for(&self, pipeline: &str) -> impl Iterator<Item = &BenchRow> + '_ {
        let pipeline = pipeline.to_string();
        self.rows.iter().filter(move |r| r.pipeline == pipeline)
    }

    pub fn elapsed_at(&self, pipeline: &str, txs: u64) -> Option<f64> {
        self.rows_for(pipeline).find(|r| r.txs == txs).map(|r| r.elapsed_ms)
    }

    /// `elapsed(hi) / elapsed(lo)` for one pipeline.
    pub fn ratio(&self, pipeline: &str, lo: u64, hi: u64) -> Option<f64> {
        Some(self.elapsed_at(pipeline, hi)? / self.elapsed_at(pipeline, lo)?)
    }

    /// Coefficient of determination of the least-squares line of elapsed
    /// time against transaction count.
    pub fn r_squared(&self, pipeline: &str) -> Option<f64> {
        let points: Vec<(f64, f64)> = self.rows_for(pipeline).map(|r| (r.txs as f64, r.elapsed_ms)).collect();
        r_squared(&points)
    }

    /// Whether the two pipelines were running at the same time.
    pub fn windows_overlap(&self) -> bool {
        self.parser_window.start_ms.max(self.schema_window.start_ms)
            < self.parser_window.end_ms.min(self.schema_window.end_ms)
    }
}

pub fn r_squared(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    if syy == 0.0 {
        return Some(1.0);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = points.iter().map(|p| (p.1 - (slope * p.0 + intercept)).powi(2)).sum();
    Some(1.0 - ss_res / syy)
}

fn ms(d: std::time::Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

fn row(pipeline: &'static str, txs: u64, elapsed_ms: f64) -> BenchRow {
    BenchRow {
        pipeline,
        txs,
        elapsed_ms,
        tps: if elapsed_ms > 0.0 { txs as f64 / (elapsed_ms / 1000.0) } else { 0.0 },
    }
}

/// Generates the ledger described by `config`, ingests it into a fresh store
/// under `dir` and records both pipelines at each checkpoint.
pub fn run_bench(config: &GenConfig, checkpoints: &[u64], dir: impl AsRef<Path>) -> Result<BenchReport, BenchError> {
    let blocks = generate(config.clone())?;
    // first_tx[b] is the global 0-based ordinal of block b's first transaction.
    let mut first_tx = Vec::with_capacity(blocks.len());
    let mut total_txs = 0u64;
    for b in &blocks {
        first_tx.push(total_txs);
        total_txs += b.transactions.len() as u64;
    }
    let mut checkpoints = checkpoints.to_vec();
    checkpoints.sort_unstable();
    checkpoints.dedup();
    if let Some(&max) = checkpoints.last() {
        if max > total_txs {
            return Err(BenchError::CheckpointUnreachable {
                checkpoint: max,
                available: total_txs,
            });
        }
    }

    let mut store = Store::open(dir)?;
    let _checkpointer = store.spawn_checkpointer()?;
    let mut pipeline = SchemaPipeline::open(store.reopen()?)?;
    let (tx, rx) = crossbeam_channel::bounded(BENCH_QUEUE_CAPACITY);
    let stop = StopSignal::new();
    let start = Instant::now();

    let schema_marks: Arc<Mutex<(Option<f64>, Vec<BenchRow>)>> = Arc::default();
    let schema_thread = {
        let marks = Arc::clone(&schema_marks);
        let checkpoints = checkpoints.clone();
        let first_tx = first_tx.clone();
        std::thread::spawn(move || {
            let mut next = 0;
            let result = pipeline.run(&rx, &stop, |progress| {
                let now = ms(start.elapsed());
                let mut marks = marks.lock().expect("bench marks");
                marks.0.get_or_insert(now);
                let Some((block, tx, _)) = progress.cursor else {
                    return;
                };
                // Transactions before the cursor's one are fully classified.
                let done = first_tx[block as usize] + tx;
                while next < checkpoints.len() && checkpoints[next] <= done {
                    marks.1.push(row(SCHEMA_PIPELINE, checkpoints[next], now));
                    next += 1;
                }
            });
            (result, next)
        })
    };

    let mut sink = StoreSink::new(store, Some(tx));
    let mut parser_rows = Vec::new();
    let mut parsed = 0u64;
    let mut next = 0;
    for block in &blocks {
        let report = sink.commit(block)?;
        parsed += report.txs;
        let now = ms(start.elapsed());
        while next < checkpoints.len() && checkpoints[next] <= parsed {
            parser_rows.push(row(PARSER_PIPELINE, checkpoints[next], now));
            next += 1;
        }
    }
    let parser_end = ms(start.elapsed());
    sink.close_queue();
    let (result, reached) = schema_thread.join().map_err(|_| IngestError::SchemaPanicked)?;
    result?;
    let schema_end = ms(start.elapsed());

    let (schema_start, mut schema_rows) = std::mem::take(&mut *schema_marks.lock().expect("bench marks"));
    // The final cursor sits on the last valid write; anything after it
    // completed when the pipeline drained the queue.
    for &c in &checkpoints[reached..] {
        schema_rows.push(row(SCHEMA_PIPELINE, c, schema_end));
    }
    let mut rows = parser_rows;
    rows.extend(schema_rows);
    Ok(BenchReport {
        prng: PRNG_ALGORITHM,
        seed: config.seed,
        total_txs,
        rows,
        parser_window: Window {
            start_ms: 0.0,
            end_ms: parser_end,
        },
        schema_window: Window {
            start_ms: schema_start.unwrap_or(schema_end),
            end_ms: schema_end,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::TxsPerBlock;

    #[test]
    fn r_squared_of_a_line_is_one() {
        let pts = [(1.0, 3.0), (2.0, 5.0), (4.0, 9.0)];
        assert!((r_squared(&pts).unwrap() - 1.0).abs() < 1e-12);
        // Oracle: numpy.corrcoef([1,2,3],[1,3,2])**2 = 0.25
        let r2 = r_squared(&[(1.0, 1.0), (2.0, 3.0), (3.0, 2.0)]).unwrap();
        assert!((r2 - 0.25).abs() < 1e-12);
    }

    #[test]
    fn small_bench_emits_two_rows_per_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            block_count: 21,
            txs_per_block: TxsPerBlock::Fixed(10),
            ..GenConfig::default()
        };
        let report = run_bench(&cfg, &[50, 100, 200], dir.path()).unwrap();
        assert_eq!(report.rows.len(), 6);
        assert_eq!(report.total_txs, 201);
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with("pipeline,txs,elapsed_ms,tps\n"));
        for p in [PARSER_PIPELINE, SCHEMA_PIPELINE] {
            let elapsed: Vec<f64> = report.rows_for(p).map(|r| r.elapsed_ms).collect();
            assert!(elapsed.windows(2).all(|w| w[0] <= w[1]), "{p}: {elapsed:?}");
        }
    }

    #[test]
    fn unreachable_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            block_count: 3,
            ..GenConfig::default()
        };
        assert!(matches!(
            run_bench(&cfg, &[1_000], dir.path()),
            Err(BenchError::CheckpointUnreachable { .. })
        ));
    }
}
