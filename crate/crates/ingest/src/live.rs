//! Rolling per-participant state and the `/live` WebSocket.
//!
//! Frames are computed on a timer only while at least one client is
//! connected. Each client reads from a bounded broadcast queue; a client that
//! falls more than the queue length behind is disconnected rather than
//! slowing anything upstream.

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{CloseFrame, Message, Utf8Bytes, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::{Json, Router};
use engage_core::artifact::{flag_amplitude, flag_device, flag_gradient, QualityMask};
use engage_core::engagement::{arousal, faa_from_table};
use engage_core::session::{BaselineKind, SegmentLabel};
use engage_core::signal::{Quality, SampleFrame, Segment};
use engage_core::spectral::{segment_band_powers, Band, BandPowerTable};
use engage_core::sync::ClockSync;
use futures_util::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, watch};

use crate::config::LiveConfig;
use crate::control::{Ack, Command, CommandSender};

pub const LIVE_SCHEMA: &str = "engage.live-frame";
pub const LIVE_VERSION: u32 = 1;
/// Close code sent to a client that fell too far behind.
pub const SLOW_CONSUMER_CLOSE: u16 = 1008;
const SEND_TIMEOUT: Duration = Duration::from_secs(2);

/// One value per electrode, in electrode order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerChannel<T> {
    #[serde(rename = "TP9")]
    pub tp9: T,
    #[serde(rename = "AF7")]
    pub af7: T,
    #[serde(rename = "AF8")]
    pub af8: T,
    #[serde(rename = "TP10")]
    pub tp10: T,
}

impl<T> PerChannel<T> {
    pub fn from_fn(mut f: impl FnMut(usize) -> T) -> Self {
        Self { tp9: f(0), af7: f(1), af8: f(2), tp10: f(3) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandPowers {
    pub delta: f64,
    pub theta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SyncHealth {
    pub offset: f64,
    pub drift: f64,
    pub converged: bool,
    pub pairs_seen: u64,
    pub outliers_excluded: u64,
}

impl SyncHealth {
    pub fn of(clock: &ClockSync) -> Self {
        let s = clock.summary();
        Self { offset: s.offset, drift: s.drift, converged: s.converged, pairs_seen: s.pairs_seen, outliers_excluded: s.outliers_excluded }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    /// Reference time of the first point.
    pub t_start: f64,
    /// Spacing of the points after decimation.
    pub dt: f64,
    pub channels: PerChannel<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameType {
    Frame,
}

/// One participant's state, sent at the live rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveFrame {
    #[serde(rename = "type")]
    pub kind: FrameType,
    pub schema: String,
    pub version: u32,
    pub seq: u64,
    pub participant_id: String,
    /// Reference time of the newest sample; absent before any data.
    pub t_ref: Option<f64>,
    pub trace: Trace,
    /// Fraction of samples free of device, amplitude and gradient flags over
    /// the validity window; absent before any data.
    pub validity: PerChannel<Option<f64>>,
    pub quality: PerChannel<Quality>,
    /// Channel-mean band power (µV²) over the rolling window.
    pub band_power: Option<BandPowers>,
    pub dominant_band: Option<String>,
    pub faa: Option<f64>,
    pub arousal: Option<f64>,
    pub sync: SyncHealth,
    pub active_condition: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    #[serde(rename = "type")]
    pub kind: String,
    pub schema: String,
    pub version: u32,
    pub participants: Vec<String>,
    pub rate_hz: f64,
}

struct ParticipantLive {
    id: String,
    samples: VecDeque<(f64, [f64; 4], [Quality; 4])>,
    quality: [Quality; 4],
    sync: SyncHealth,
}

struct LiveState {
    participants: Vec<ParticipantLive>,
    active: BTreeMap<String, String>,
}

pub struct LiveHub {
    cfg: LiveConfig,
    fs: f64,
    capacity: usize,
    state: Mutex<LiveState>,
    tx: broadcast::Sender<Arc<str>>,
    seq: AtomicU64,
}

/// Updates from one datagram, applied under a single lock.
#[derive(Default)]
pub(crate) struct LiveBatch {
    pub samples: Vec<(usize, f64, [f64; 4])>,
    pub quality: Vec<(usize, [Quality; 4])>,
    pub sync: Vec<(usize, SyncHealth)>,
}

impl LiveBatch {
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty() && self.quality.is_empty() && self.sync.is_empty()
    }
}

impl LiveHub {
    pub fn new(cfg: LiveConfig, fs: f64, participants: Vec<String>) -> Self {
        let capacity = (cfg.trace_s.max(cfg.window_s).max(cfg.validity_s) * fs).ceil() as usize;
        let (tx, _) = broadcast::channel(cfg.client_queue);
        let participants = participants
            .into_iter()
            .map(|id| ParticipantLive { id, samples: VecDeque::with_capacity(capacity), quality: [Quality::Good; 4], sync: SyncHealth::default() })
            .collect();
        Self { cfg, fs, capacity, state: Mutex::new(LiveState { participants, active: BTreeMap::new() }), tx, seq: AtomicU64::new(0) }
    }

    pub fn clients(&self) -> usize {
        self.tx.receiver_count()
    }

    /// Frames computed so far; stays 0 while nobody is connected.
    pub fn frames_built(&self) -> u64 {
        self.seq.load(Ordering::Relaxed)
    }

    pub(crate) fn apply(&self, batch: &mut LiveBatch) {
        let mut st = self.state.lock().expect("live state poisoned");
        for (p, q) in batch.quality.drain(..) {
            st.participants[p].quality = q;
        }
        for (p, t, eeg) in batch.samples.drain(..) {
            let part = &mut st.participants[p];
            if part.samples.len() == self.capacity {
                part.samples.pop_front();
            }
            let q = part.quality;
            part.samples.push_back((t, eeg, q));
        }
        for (p, s) in batch.sync.drain(..) {
            st.participants[p].sync = s;
        }
    }

    pub(crate) fn set_active(&self, active: BTreeMap<String, String>) {
        self.state.lock().expect("live state poisoned").active = active;
    }

    pub fn hello(&self) -> Hello {
        let st = self.state.lock().expect("live state poisoned");
        Hello {
            kind: "hello".into(),
            schema: LIVE_SCHEMA.into(),
            version: LIVE_VERSION,
            participants: st.participants.iter().map(|p| p.id.clone()).collect(),
            rate_hz: self.cfg.rate_hz,
        }
    }

    /// Current frame of every participant.
    pub fn frames(&self) -> Vec<LiveFrame> {
        let keep = (self.cfg.validity_s * self.fs).ceil() as usize;
        let snapshots: Vec<_> = {
            let st = self.state.lock().expect("live state poisoned");
            st.participants
                .iter()
                .map(|p| {
                    let skip = p.samples.len().saturating_sub(keep);
                    let samples: Vec<_> = p.samples.iter().skip(skip).copied().collect();
                    let active = st.active.get(&p.id).or_else(|| st.active.get("")).cloned();
                    (p.id.clone(), samples, p.quality, p.sync, active)
                })
                .collect()
        };
        snapshots
            .into_iter()
            .map(|(id, samples, quality, sync, active)| {
                let seq = self.seq.fetch_add(1, Ordering::Relaxed);
                self.frame(seq, id, &samples, quality, sync, active)
            })
            .collect()
    }

    fn frame(
        &self,
        seq: u64,
        participant_id: String,
        samples: &[(f64, [f64; 4], [Quality; 4])],
        quality: [Quality; 4],
        sync: SyncHealth,
        active_condition: Option<String>,
    ) -> LiveFrame {
        let tail = |secs: f64| &samples[samples.len().saturating_sub((secs * self.fs).round() as usize)..];
        let trace = decimate(tail(self.cfg.trace_s), self.cfg.max_trace_points, self.fs);
        let validity = match segment_of(samples, self.fs) {
            Some(seg) => {
                let mask = combined_mask(&seg);
                let n = seg.len() as f64;
                PerChannel::from_fn(|c| Some(mask.channel_valid(c).iter().filter(|v| **v).count() as f64 / n))
            }
            None => PerChannel::from_fn(|_| None),
        };
        let table = segment_of(tail(self.cfg.window_s), self.fs).and_then(|seg| segment_band_powers(&seg, &combined_mask(&seg)).ok());
        let (band_power, dominant_band, faa, arousal) = match &table {
            Some(t) => indices(t),
            None => (None, None, None, None),
        };
        LiveFrame {
            kind: FrameType::Frame,
            schema: LIVE_SCHEMA.into(),
            version: LIVE_VERSION,
            seq,
            participant_id,
            t_ref: samples.last().map(|s| s.0),
            trace,
            validity,
            quality: PerChannel::from_fn(|c| quality[c]),
            band_power,
            dominant_band,
            faa,
            arousal,
            sync,
            active_condition,
        }
    }
}

fn indices(t: &BandPowerTable) -> (Option<BandPowers>, Option<String>, Option<f64>, Option<f64>) {
    let m = |b: Band| t.mean(b);
    let powers = BandPowers { delta: m(Band::Delta), theta: m(Band::Theta), alpha: m(Band::Alpha), beta: m(Band::Beta), gamma: m(Band::Gamma) };
    let dominant = Band::ALL.iter().copied().max_by(|a, b| m(*a).total_cmp(&m(*b))).map(|b| b.name().to_string());
    (Some(powers), dominant, faa_from_table(t).ok(), arousal(m(Band::Beta), m(Band::Alpha)).ok())
}

/// Block means of at most `max_points` per channel.
fn decimate(samples: &[(f64, [f64; 4], [Quality; 4])], max_points: usize, fs: f64) -> Trace {
    let factor = samples.len().div_ceil(max_points.max(1)).max(1);
    let channels = PerChannel::from_fn(|c| samples.chunks(factor).map(|b| b.iter().map(|s| s.1[c]).sum::<f64>() / b.len() as f64).collect());
    Trace { t_start: samples.first().map_or(0.0, |s| s.0), dt: factor as f64 / fs, channels }
}

/// The window as a uniformly timed segment. Reference times are dropped
/// because the live view does not care about a missing sample here or there.
fn segment_of(samples: &[(f64, [f64; 4], [Quality; 4])], fs: f64) -> Option<Segment> {
    if samples.len() < 2 {
        return None;
    }
    let frames = samples
        .iter()
        .enumerate()
        .map(|(i, s)| SampleFrame::new(i as f64 / fs, s.1, s.2, None))
        .collect::<Result<Vec<_>, _>>()
        .ok()?;
    Segment::new("live", fs, SegmentLabel::Baseline(BaselineKind::EyesOpen), frames).ok()
}

fn combined_mask(seg: &Segment) -> QualityMask {
    let mut mask = flag_device(seg);
    let extra = [Some(flag_amplitude(seg)), flag_gradient(seg).ok()];
    for m in extra.iter().flatten() {
        for i in 0..seg.len() {
            for c in 0..4 {
                let r = m.reasons(i, c);
                if !r.is_empty() {
                    mask.flag(i, c, r);
                }
            }
        }
    }
    mask
}

/// Broadcasts frames at the live rate while anyone is listening.
pub(crate) async fn run_ticker(hub: Arc<LiveHub>, mut shutdown: watch::Receiver<bool>) {
    let mut tick = tokio::time::interval(Duration::from_secs_f64(1.0 / hub.cfg.rate_hz));
    tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    loop {
        tokio::select! {
            _ = tick.tick() => {
                if hub.clients() == 0 {
                    continue;
                }
                for frame in hub.frames() {
                    match serde_json::to_string(&frame) {
                        Ok(text) => {
                            let _ = hub.tx.send(Arc::from(text));
                        }
                        Err(e) => tracing::warn!(error = %e, "live frame not serializable"),
                    }
                }
            }
            _ = shutdown.changed() => break,
        }
    }
}

#[derive(Clone)]
struct AppState {
    hub: Arc<LiveHub>,
    commands: CommandSender,
    shutdown: watch::Receiver<bool>,
}

pub(crate) fn router(hub: Arc<LiveHub>, commands: CommandSender, shutdown: watch::Receiver<bool>) -> Router {
    Router::new()
        .route("/live", get(upgrade))
        .route("/health", get(health))
        .with_state(AppState { hub, commands, shutdown })
}

async fn health(State(s): State<AppState>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "ok": true, "clients": s.hub.clients() }))
}

async fn upgrade(ws: WebSocketUpgrade, State(s): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| client(socket, s))
}

async fn client(socket: WebSocket, mut s: AppState) {
    let (mut sink, mut stream) = socket.split();
    let mut frames = s.hub.tx.subscribe();
    let send = |text: String| Message::Text(Utf8Bytes::from(text));
    let Ok(hello) = serde_json::to_string(&s.hub.hello()) else { return };
    if sink.send(send(hello)).await.is_err() {
        return;
    }
    loop {
        tokio::select! {
            frame = frames.recv() => match frame {
                Ok(text) => {
                    let sent = tokio::time::timeout(SEND_TIMEOUT, sink.send(Message::Text(Utf8Bytes::from(text.as_ref())))).await;
                    if !matches!(sent, Ok(Ok(()))) {
                        tracing::info!("dropping live client that stopped reading");
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    tracing::info!(skipped = n, "disconnecting slow live client");
                    let close = CloseFrame { code: SLOW_CONSUMER_CLOSE, reason: Utf8Bytes::from_static("slow consumer") };
                    let _ = tokio::time::timeout(SEND_TIMEOUT, sink.send(Message::Close(Some(close)))).await;
                    break;
                }
                Err(broadcast::error::RecvError::Closed) => break,
            },
            inbound = stream.next() => match inbound {
                Some(Ok(Message::Text(text))) => {
                    let ack = match serde_json::from_str::<Command>(text.as_str()) {
                        Ok(cmd) => s.commands.send(cmd).await,
                        Err(e) => {
                            let id = serde_json::from_str::<serde_json::Value>(text.as_str())
                                .ok()
                                .and_then(|v| v.get("id").and_then(|i| i.as_str()).map(str::to_string));
                            Ack::rejected(id, format!("invalid command: {e}"))
                        }
                    };
                    let Ok(reply) = serde_json::to_string(&ack) else { break };
                    if sink.send(send(reply)).await.is_err() {
                        break;
                    }
                }
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
            _ = s.shutdown.changed() => {
                let _ = sink.send(Message::Close(None)).await;
                break;
            }
        }
    }
}
