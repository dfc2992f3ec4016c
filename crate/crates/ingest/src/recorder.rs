//! Single-writer tasks, one per stream file, and the device-time re-sort
//! buffer that sits in front of them.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;
use std::time::Duration;

use engage_core::recording::{CsvStream, RecordingError, StreamRow};
use tokio::sync::{mpsc, watch};
use tokio::task::JoinHandle;

/// First fatal writer error, shared by every task of a session.
#[derive(Clone)]
pub(crate) struct Failure(Arc<watch::Sender<Option<String>>>);

impl Failure {
    pub fn new() -> (Self, watch::Receiver<Option<String>>) {
        let (tx, rx) = watch::channel(None);
        (Self(Arc::new(tx)), rx)
    }

    pub fn raise(&self, reason: String) {
        tracing::error!(%reason, "recording aborted");
        self.0.send_if_modified(|f| {
            if f.is_none() {
                *f = Some(reason);
                true
            } else {
                false
            }
        });
    }

    pub fn get(&self) -> Option<String> {
        self.0.borrow().clone()
    }
}

pub(crate) struct Writer<R> {
    pub tx: mpsc::Sender<R>,
    pub join: JoinHandle<Result<u64, RecordingError>>,
}

const BATCH: usize = 512;

/// Owns `stream` until every sender is dropped, then flushes and returns the
/// row count. Rows are flushed to disk at least once per second, so a crash
/// loses at most the last second plus a torn final line.
pub(crate) fn spawn_writer<R>(mut stream: CsvStream<R>, capacity: usize, failure: Failure) -> Writer<R>
where
    R: StreamRow + Send + 'static,
{
    let (tx, mut rx) = mpsc::channel::<R>(capacity);
    let join = tokio::spawn(async move {
        let mut buf = Vec::with_capacity(BATCH);
        let mut tick = tokio::time::interval(Duration::from_millis(250));
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        let result = async {
            loop {
                tokio::select! {
                    n = rx.recv_many(&mut buf, BATCH) => {
                        if n == 0 {
                            break;
                        }
                        for row in buf.drain(..) {
                            stream.append(&row)?;
                        }
                        stream.flush_if_due()?;
                    }
                    _ = tick.tick() => stream.flush_if_due()?,
                }
            }
            stream.flush()?;
            Ok(stream.rows())
        }
        .await;
        if let Err(e) = &result {
            failure.raise(format!("{}: {e}", stream.path().display()));
        }
        result
    });
    Writer { tx, join }
}

struct Held<T> {
    device_ts: f64,
    seq: u64,
    item: T,
}

impl<T> PartialEq for Held<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<T> Eq for Held<T> {}

impl<T> PartialOrd for Held<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T> Ord for Held<T> {
    // reversed: BinaryHeap is a max-heap and we pop the earliest
    fn cmp(&self, other: &Self) -> Ordering {
        other.device_ts.total_cmp(&self.device_ts).then(other.seq.cmp(&self.seq))
    }
}

/// Holds items until the newest device time seen is `hold_s` past them, then
/// releases them in device-time order. Ties keep arrival order. Nothing is
/// ever dropped: an item older than what was already released comes out on
/// the next release and is counted as late.
pub(crate) struct ResortBuffer<T> {
    hold_s: f64,
    heap: BinaryHeap<Held<T>>,
    newest: f64,
    released_up_to: f64,
    seq: u64,
    late: u64,
}

impl<T> ResortBuffer<T> {
    pub fn new(hold_s: f64) -> Self {
        Self {
            hold_s,
            heap: BinaryHeap::new(),
            newest: f64::NEG_INFINITY,
            released_up_to: f64::NEG_INFINITY,
            seq: 0,
            late: 0,
        }
    }

    pub fn push(&mut self, device_ts: f64, item: T) {
        if device_ts < self.released_up_to {
            self.late += 1;
        }
        self.newest = self.newest.max(device_ts);
        self.heap.push(Held { device_ts, seq: self.seq, item });
        self.seq += 1;
    }

    /// Pop everything at least `hold_s` older than the newest item.
    pub fn release(&mut self, out: &mut Vec<(f64, T)>) {
        let limit = self.newest - self.hold_s;
        while self.heap.peek().is_some_and(|h| h.device_ts <= limit) {
            let h = self.heap.pop().expect("peeked");
            self.released_up_to = self.released_up_to.max(h.device_ts);
            out.push((h.device_ts, h.item));
        }
    }

    pub fn drain(&mut self, out: &mut Vec<(f64, T)>) {
        while let Some(h) = self.heap.pop() {
            self.released_up_to = self.released_up_to.max(h.device_ts);
            out.push((h.device_ts, h.item));
        }
    }

    pub fn late(&self) -> u64 {
        self.late
    }
}
