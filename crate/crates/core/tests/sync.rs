mod common;

use std::io::Write;
use std::sync::atomic::Ordering;
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use common::{MemSource, RecordingSink};
use proptest::prelude::*;
use refiner_core::gen::{generate, GenConfig};
use refiner_core::model::{to_block_json, LedgerBlock};
use refiner_core::parser::StoreSink;
use refiner_core::source::FileReplaySource;
use refiner_core::store::{Store, StoreTable};
use refiner_core::sync::{StopSignal, SyncError, Synchronizer};

fn ledger(blocks: u64) -> Vec<LedgerBlock> {
    generate(GenConfig {
        block_count: blocks,
        ..GenConfig::default()
    })
    .unwrap()
}

fn synchronizer(source: &MemSource, sink: &RecordingSink) -> Synchronizer {
    Synchronizer::new(Box::new(source.clone()), Box::new(sink.clone()), Duration::from_millis(10)).unwrap()
}

fn wait_until(mut cond: impl FnMut() -> bool) {
    let deadline = Instant::now() + Duration::from_secs(20);
    while !cond() {
        assert!(Instant::now() < deadline, "condition not reached");
        std::thread::sleep(Duration::from_millis(2));
    }
}

#[test]
fn initial_full_sync_then_noop() {
    let source = MemSource::new(ledger(5));
    let sink = RecordingSink::default();
    let sync = synchronizer(&source, &sink);
    assert_eq!(sync.state().recorded_block_height(), -1);
    let r = sync.sync_once().unwrap();
    assert_eq!((r.fetched, r.new_height, r.skipped), (5, 4, false));
    let r = sync.sync_once().unwrap();
    assert_eq!((r.fetched, r.new_height), (0, 4));
    assert_eq!(sink.delivered(), vec![0, 1, 2, 3, 4]);
    let status = sync.state().status();
    assert_eq!(status.source_height, Some(4));
    assert!(status.last_sync_at.is_some());
    assert!(!status.running);
}

#[test]
fn appends_against_a_real_store_match_file_line_count() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("l.ledger.jsonl");
    let blocks = ledger(8);
    let write = |bs: &[LedgerBlock]| {
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path).unwrap();
        for b in bs {
            writeln!(f, "{}", to_block_json(b)).unwrap();
        }
    };
    write(&blocks[..5]);
    let store = Store::open(dir.path().join("db")).unwrap();
    let sync = Synchronizer::new(
        Box::new(FileReplaySource::new(&path, true)),
        Box::new(StoreSink::new(store.reopen().unwrap(), None)),
        Duration::from_millis(10),
    )
    .unwrap();
    assert_eq!(sync.sync_once().unwrap().fetched, 5);
    write(&blocks[5..]);
    let r = sync.sync_once().unwrap();
    assert_eq!((r.fetched, r.new_height), (3, 7));
    let lines = std::fs::read_to_string(&path).unwrap().lines().count() as u64;
    assert_eq!(store.snapshot().unwrap().count(StoreTable::Blocks).unwrap(), lines);
    assert_eq!(store.recorded_height().unwrap(), 7);
}

#[test]
fn restart_resumes_from_persisted_height() {
    let dir = tempfile::tempdir().unwrap();
    let blocks = ledger(6);
    let source = MemSource::new(blocks[..3].to_vec());
    {
        let sink = StoreSink::new(Store::open(dir.path()).unwrap(), None);
        let sync = Synchronizer::new(Box::new(source.clone()), Box::new(sink), Duration::from_millis(10)).unwrap();
        sync.sync_once().unwrap();
    }
    for b in &blocks[3..] {
        source.push(b.clone());
    }
    let sink = StoreSink::new(Store::open(dir.path()).unwrap(), None);
    let sync = Synchronizer::new(Box::new(source.clone()), Box::new(sink), Duration::from_millis(10)).unwrap();
    assert_eq!(sync.state().recorded_block_height(), 2);
    assert_eq!(sync.sync_once().unwrap().fetched, 3);
    assert_eq!(source.fetches.load(Ordering::SeqCst), 6);
}

#[test]
fn loop_over_static_source_for_three_ticks_delivers_each_block_once() {
    let source = MemSource::new(ledger(10));
    let sink = RecordingSink::default();
    let sync = synchronizer(&source, &sink);
    let (tx, ticks) = crossbeam_channel::unbounded();
    for _ in 0..3 {
        tx.send(Instant::now()).unwrap();
    }
    drop(tx);
    let delivered = sync.run_sync_loop(&ticks, &StopSignal::new()).unwrap();
    assert_eq!(delivered, 10);
    assert_eq!(sink.delivered(), (0..10).collect::<Vec<_>>());
}

#[test]
fn stop_before_first_tick_delivers_nothing() {
    let source = MemSource::new(ledger(10));
    let sink = RecordingSink::default();
    let sync = synchronizer(&source, &sink);
    let (tx, ticks) = crossbeam_channel::unbounded();
    tx.send(Instant::now()).unwrap();
    let stop = StopSignal::new();
    stop.trigger();
    assert_eq!(sync.run_sync_loop(&ticks, &stop).unwrap(), 0);
    assert!(sink.delivered().is_empty());
}

#[test]
fn growth_between_ticks_is_delivered_on_the_next_tick() {
    let blocks = ledger(11);
    let source = MemSource::new(blocks[..10].to_vec());
    let sink = RecordingSink::default();
    let sync = Arc::new(synchronizer(&source, &sink));
    let state = sync.state();
    let (tx, ticks) = crossbeam_channel::bounded(0);
    let stop = StopSignal::new();
    let handle = {
        let sync = Arc::clone(&sync);
        let stop = stop.clone();
        std::thread::spawn(move || sync.run_sync_loop(&ticks, &stop))
    };
    tx.send(Instant::now()).unwrap();
    wait_until(|| state.recorded_block_height() == 9);
    assert_eq!(sink.delivered().len(), 10);
    source.push(blocks[10].clone());
    tx.send(Instant::now()).unwrap();
    wait_until(|| state.recorded_block_height() == 10);
    stop.trigger();
    assert_eq!(handle.join().unwrap().unwrap(), 11);
    assert_eq!(sink.delivered(), (0..11).collect::<Vec<_>>());
}

#[test]
fn stop_finishes_the_in_flight_pass() {
    let source = MemSource::new(ledger(6));
    *source.delay.lock().unwrap() = Duration::from_millis(30);
    let sink = RecordingSink::default();
    let sync = Arc::new(synchronizer(&source, &sink));
    let state = sync.state();
    let (tx, ticks) = crossbeam_channel::bounded(1);
    let stop = StopSignal::new();
    let handle = {
        let sync = Arc::clone(&sync);
        let stop = stop.clone();
        std::thread::spawn(move || sync.run_sync_loop(&ticks, &stop))
    };
    tx.send(Instant::now()).unwrap();
    wait_until(|| state.is_running());
    stop.trigger();
    assert_eq!(handle.join().unwrap().unwrap(), 6);
    assert_eq!(sink.delivered().len(), 6);
}

#[test]
fn concurrent_triggers_never_both_fetch() {
    let source = MemSource::new(ledger(5));
    *source.delay.lock().unwrap() = Duration::from_millis(40);
    let sink = RecordingSink::default();
    let sync = Arc::new(synchronizer(&source, &sink));
    let barrier = Arc::new(Barrier::new(2));
    let first = {
        let sync = Arc::clone(&sync);
        let barrier = Arc::clone(&barrier);
        std::thread::spawn(move || {
            barrier.wait();
            sync.sync_once().unwrap()
        })
    };
    barrier.wait();
    wait_until(|| sync.state().is_running());
    let second = sync.sync_once().unwrap();
    let first = first.join().unwrap();
    assert!(second.skipped);
    assert_eq!(second.fetched, 0);
    assert_eq!(first.fetched, 5);
    assert_eq!(source.fetches.load(Ordering::SeqCst), 5);
    assert_eq!(sink.delivered(), vec![0, 1, 2, 3, 4]);
}

#[test]
fn gap_aborts_the_pass_at_the_last_good_block() {
    let source = MemSource::new(ledger(5));
    let sink = RecordingSink::default();
    let sync = synchronizer(&source, &sink);
    source.skip_one.store(true, Ordering::SeqCst);
    match sync.sync_once() {
        Err(SyncError::GapDetected { requested, returned }) => assert_eq!((requested, returned), (0, 1)),
        other => panic!("expected gap, got {other:?}"),
    }
    assert_eq!(sync.state().recorded_block_height(), -1);
    assert!(!sync.state().is_running());
    source.skip_one.store(false, Ordering::SeqCst);
    assert_eq!(sync.sync_once().unwrap().fetched, 5);
}

#[test]
fn unavailable_source_leaves_state_unchanged_and_is_retried() {
    let source = MemSource::new(ledger(4));
    let sink = RecordingSink::default();
    let sync = synchronizer(&source, &sink);
    source.unavailable.store(true, Ordering::SeqCst);
    let err = sync.sync_once().unwrap_err();
    assert!(matches!(err, SyncError::SourceUnavailable(_)));
    assert!(!err.is_fatal());
    assert_eq!(sync.state().recorded_block_height(), -1);

    let sync = Arc::new(sync);
    let (tx, ticks) = crossbeam_channel::bounded(0);
    let handle = {
        let sync = Arc::clone(&sync);
        std::thread::spawn(move || sync.run_sync_loop(&ticks, &StopSignal::new()))
    };
    tx.send(Instant::now()).unwrap();
    // A rendezvous send returns only once the loop is back waiting, so the
    // first pass has failed by now.
    tx.send(Instant::now()).unwrap();
    source.unavailable.store(false, Ordering::SeqCst);
    tx.send(Instant::now()).unwrap();
    drop(tx);
    assert_eq!(handle.join().unwrap().unwrap(), 4);
    assert_eq!(sink.delivered(), vec![0, 1, 2, 3]);
}

#[test]
fn sink_failure_is_fatal_to_the_loop() {
    let source = MemSource::new(ledger(5));
    let sink = RecordingSink::default();
    *sink.fail_at.lock().unwrap() = Some(2);
    let sync = synchronizer(&source, &sink);
    let (tx, ticks) = crossbeam_channel::unbounded();
    tx.send(Instant::now()).unwrap();
    tx.send(Instant::now()).unwrap();
    let err = sync.run_sync_loop(&ticks, &StopSignal::new()).unwrap_err();
    assert!(err.is_fatal());
    assert_eq!(sync.state().recorded_block_height(), 1);
    assert_eq!(sink.delivered(), vec![0, 1]);
}

#[test]
fn polling_makes_an_immediate_first_pass() {
    let source = MemSource::new(ledger(3));
    let sink = RecordingSink::default();
    let sync = Arc::new(Synchronizer::new(Box::new(source.clone()), Box::new(sink.clone()), Duration::from_secs(3600)).unwrap());
    let stop = StopSignal::new();
    let handle = {
        let sync = Arc::clone(&sync);
        let stop = stop.clone();
        std::thread::spawn(move || sync.run_polling(&stop))
    };
    wait_until(|| sink.delivered().len() == 3);
    stop.trigger();
    assert_eq!(handle.join().unwrap().unwrap(), 3);
}

#[derive(Debug, Clone)]
enum Op {
    Append(usize),
    Sync,
}

fn ops() -> impl Strategy<Value = Vec<Op>> {
    prop::collection::vec(prop_oneof![(1usize..4).prop_map(Op::Append), Just(Op::Sync)], 1..25)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn exactly_once_and_monotone_over_any_schedule(schedule in ops()) {
        let all = ledger(60);
        let source = MemSource::new(Vec::new());
        let sink = RecordingSink::default();
        let sync = synchronizer(&source, &sink);
        let mut appended = 0usize;
        let mut last_height = -1;
        for op in schedule {
            match op {
                Op::Append(n) => {
                    for _ in 0..n {
                        if appended < all.len() {
                            source.push(all[appended].clone());
                            appended += 1;
                        }
                    }
                }
                Op::Sync => {
                    let r = sync.sync_once().unwrap();
                    prop_assert!(r.new_height >= last_height);
                    last_height = r.new_height;
                }
            }
        }
        sync.sync_once().unwrap();
        prop_assert_eq!(sink.delivered(), (0..appended as u64).collect::<Vec<_>>());
    }
}
