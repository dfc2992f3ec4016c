//! Device-to-reference clock mapping from (device_ts, arrival_ts) pairs.

use std::collections::VecDeque;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub const DEFAULT_WINDOW: usize = 256;
/// Pairs whose residual from the window median exceeds this are ignored.
pub const OUTLIER_LIMIT_S: f64 = 0.25;
const BLOCK: usize = 32;
const MAX_BLOCKS: usize = 64;
/// Drift stays 0 until block medians span at least this long.
const MIN_DRIFT_SPAN_S: f64 = 4.0;
/// A device timestamp this far behind the last one means the device restarted.
const RESET_BACKSTEP_S: f64 = 1.0;

/// Source of reference-clock seconds.
pub trait ReferenceClock: Send + Sync {
    fn now(&self) -> f64;
}

/// Wall-clock Unix seconds.
#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl ReferenceClock for SystemClock {
    fn now(&self) -> f64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
    }
}

/// Session-relative clock running `rate` times faster than real time.
/// Used when a replay is paced faster than real time, so that latencies
/// and durations stay in session seconds.
#[derive(Debug, Clone, Copy)]
pub struct ScaledClock {
    origin: Instant,
    start: f64,
    rate: f64,
}

impl ScaledClock {
    pub fn new(start: f64, rate: f64) -> Self {
        assert!(rate > 0.0 && rate.is_finite(), "clock rate must be positive");
        Self { origin: Instant::now(), start, rate }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }
}

impl ReferenceClock for ScaledClock {
    fn now(&self) -> f64 {
        self.start + self.origin.elapsed().as_secs_f64() * self.rate
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncSummary {
    pub stream_id: String,
    pub offset: f64,
    pub drift: f64,
    pub pairs_seen: u64,
    pub outliers_excluded: u64,
    pub resets: u64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
struct BlockMedian {
    device: f64,
    diff: f64,
}

/// Sliding-window estimator of `arrival - device`.
#[derive(Debug, Clone)]
pub struct ClockSync {
    pub stream_id: String,
    /// Seconds added to a device timestamp at the window's reference point.
    pub offset: f64,
    /// Seconds per second of device time.
    pub drift: f64,
    window_len: usize,
    window: VecDeque<(f64, f64)>,
    /// Device time the offset refers to.
    anchor: f64,
    pending: Vec<(f64, f64)>,
    blocks: VecDeque<BlockMedian>,
    last_device: Option<f64>,
    last_assigned: f64,
    pairs_seen: u64,
    outliers_excluded: u64,
    resets: u64,
}

fn median(v: &mut [f64]) -> f64 {
    debug_assert!(!v.is_empty());
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl ClockSync {
    pub fn new(stream_id: impl Into<String>) -> Self {
        Self::with_window(stream_id, DEFAULT_WINDOW)
    }

    pub fn with_window(stream_id: impl Into<String>, window_len: usize) -> Self {
        assert!(window_len > 0);
        Self {
            stream_id: stream_id.into(),
            offset: 0.0,
            drift: 0.0,
            window_len,
            window: VecDeque::with_capacity(window_len),
            anchor: 0.0,
            pending: Vec::with_capacity(BLOCK),
            blocks: VecDeque::new(),
            last_device: None,
            last_assigned: f64::NEG_INFINITY,
            pairs_seen: 0,
            outliers_excluded: 0,
            resets: 0,
        }
    }

    pub fn is_converged(&self) -> bool {
        self.window.len() >= self.window_len
    }

    pub fn pairs_seen(&self) -> u64 {
        self.pairs_seen
    }

    fn reset(&mut self) {
        self.window.clear();
        self.pending.clear();
        self.blocks.clear();
        self.drift = 0.0;
        self.last_assigned = f64::NEG_INFINITY;
        self.resets += 1;
    }

    /// Add one pair. Non-finite pairs are ignored.
    pub fn update(&mut self, device_ts: f64, arrival_ts: f64) {
        if !device_ts.is_finite() || !arrival_ts.is_finite() {
            return;
        }
        if matches!(self.last_device, Some(last) if device_ts < last - RESET_BACKSTEP_S) {
            self.reset();
        }
        self.last_device = Some(device_ts);
        self.pairs_seen += 1;

        let diff = arrival_ts - device_ts;
        if !self.window.is_empty() && (diff - self.current_line(device_ts)).abs() > OUTLIER_LIMIT_S {
            self.outliers_excluded += 1;
            return;
        }
        if self.window.len() == self.window_len {
            self.window.pop_front();
        }
        self.window.push_back((device_ts, diff));

        self.pending.push((device_ts, diff));
        if self.pending.len() == BLOCK {
            let mut d: Vec<f64> = self.pending.iter().map(|p| p.0).collect();
            let mut o: Vec<f64> = self.pending.iter().map(|p| p.1).collect();
            self.blocks.push_back(BlockMedian { device: median(&mut d), diff: median(&mut o) });
            if self.blocks.len() > MAX_BLOCKS {
                self.blocks.pop_front();
            }
            self.pending.clear();
            self.drift = self.theil_sen();
        }

        // offsets are re-estimated on every pair while filling, then every 8
        if self.window.len() < self.window_len || self.pairs_seen % 8 == 0 {
            self.estimate();
        }
    }

    fn current_line(&self, device_ts: f64) -> f64 {
        self.offset + self.drift * (device_ts - self.anchor)
    }

    fn estimate(&mut self) {
        let mut devs: Vec<f64> = self.window.iter().map(|p| p.0).collect();
        self.anchor = median(&mut devs);
        // residuals about the drift line, referenced to the anchor
        let mut r: Vec<f64> = self.window.iter().map(|(d, o)| o - self.drift * (d - self.anchor)).collect();
        let m = median(&mut r);
        let mut inliers: Vec<f64> = r.iter().copied().filter(|x| (x - m).abs() <= OUTLIER_LIMIT_S).collect();
        self.offset = if inliers.is_empty() { m } else { median(&mut inliers) };
    }

    fn theil_sen(&self) -> f64 {
        let b: Vec<BlockMedian> = self.blocks.iter().copied().collect();
        if b.len() < 2 || b[b.len() - 1].device - b[0].device < MIN_DRIFT_SPAN_S {
            return 0.0;
        }
        let mut slopes = Vec::with_capacity(b.len() * (b.len() - 1) / 2);
        for i in 0..b.len() {
            for j in i + 1..b.len() {
                let dx = b[j].device - b[i].device;
                if dx > 0.0 {
                    slopes.push((b[j].diff - b[i].diff) / dx);
                }
            }
        }
        if slopes.is_empty() {
            0.0
        } else {
            median(&mut slopes)
        }
    }

    /// Drift-compensated reference time for a device timestamp.
    pub fn map(&self, device_ts: f64) -> f64 {
        device_ts + self.current_line(device_ts)
    }

    /// Like [`ClockSync::map`], but never earlier than the previous
    /// assignment, so a stream's reference times are nondecreasing.
    pub fn assign(&mut self, device_ts: f64) -> f64 {
        let t = self.map(device_ts).max(self.last_assigned);
        self.last_assigned = t;
        t
    }

    pub fn summary(&self) -> SyncSummary {
        SyncSummary {
            stream_id: self.stream_id.clone(),
            offset: self.offset,
            drift: self.drift,
            pairs_seen: self.pairs_seen,
            outliers_excluded: self.outliers_excluded,
            resets: self.resets,
            converged: self.is_converged(),
        }
    }
}

/// Functional form of [`ClockSync::update`].
pub fn update_clock_sync(mut sync: ClockSync, device_ts: f64, arrival_ts: f64) -> ClockSync {
    sync.update(device_ts, arrival_ts);
    sync
}
