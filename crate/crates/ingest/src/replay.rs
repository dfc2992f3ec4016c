//! Paced OSC replay of synthetic or recorded sessions, standing in for the
//! headband bridges. Each datagram is delayed by a random network latency
//! drawn in session seconds, so the receiver sees realistic jitter and
//! reordering at any replay speed.

use std::net::{SocketAddr, UdpSocket};
use std::path::Path;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use engage_core::osc::{encode, AddressMap, OscBundle, OscMessage, OscPacket, OscType, TimeTag};
use engage_core::recording::{
    read_stream, AccelRow, EegRow, EventKind, EventRow, QualityRow, RecordingError, SessionManifest, StreamKind,
};
use engage_core::signal::Quality;
use engage_core::synth::{SyntheticFrame, SyntheticMarker, SyntheticSession, GRAVITY};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaze::GazePayload;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("target {target} unreachable: {source}")]
    Unreachable { target: SocketAddr, source: std::io::Error },
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("invalid replay settings: {0}")]
    Config(String),
    #[error(transparent)]
    Recording(#[from] RecordingError),
    #[error("gaze publisher: {0}")]
    Gaze(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayConfig {
    /// Replay speed as a multiple of real time.
    pub rate: f64,
    /// Bounds of the uniform per-datagram latency, in session seconds.
    pub latency_s: [f64; 2],
    pub frames_per_datagram: usize,
    /// An accelerometer message rides along every this many EEG frames.
    pub accel_every: usize,
    /// A horseshoe message is sent this often, and whenever contact changes.
    pub quality_every: usize,
    /// Prefix addresses with `/<participant>`; otherwise each participant
    /// sends from its own socket and must be bound by source address.
    pub prefix: bool,
    /// Stamp bundles with device-time timetags; otherwise send IMMEDIATE.
    pub timetags: bool,
    /// Unix seconds of device time zero; the current time when absent.
    pub device_epoch: Option<f64>,
    pub seed: u64,
    /// Gaze samples per second per participant when publishing gaze.
    pub gaze_rate_hz: f64,
    pub address_map: AddressMap,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            rate: 1.0,
            latency_s: [0.01, 0.05],
            frames_per_datagram: 4,
            accel_every: 5,
            quality_every: 26,
            prefix: true,
            timetags: true,
            device_epoch: None,
            seed: 0,
            gaze_rate_hz: 30.0,
            address_map: AddressMap::default(),
        }
    }
}

impl ReplayConfig {
    fn validate(&self) -> Result<(), ReplayError> {
        let bad = |m: &str| Err(ReplayError::Config(m.into()));
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return bad("rate must be positive");
        }
        let [lo, hi] = self.latency_s;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return bad("latency bounds must satisfy 0 <= min <= max");
        }
        if self.frames_per_datagram == 0 || self.accel_every == 0 || self.quality_every == 0 {
            return bad("frame counts must be positive");
        }
        if !(self.gaze_rate_hz.is_finite() && self.gaze_rate_hz >= 0.0) {
            return bad("gaze rate must be non-negative");
        }
        Ok(())
    }
}

/// MQTT broker to publish gaze to, on `gaze/<participant>`.
#[derive(Debug, Clone, PartialEq)]
pub struct GazeTarget {
    pub host: String,
    pub port: u16,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplaySummary {
    pub datagrams: u64,
    pub frames: u64,
    pub markers: u64,
    pub gaze_messages: u64,
    pub bytes: u64,
    pub wall_s: f64,
    /// Largest delay of a send behind its schedule, in real seconds.
    pub max_lag_s: f64,
    /// Mean injected latency, session seconds.
    pub mean_latency_s: f64,
}

enum Item {
    Frames { participant: usize, start: usize, end: usize },
    Markers { participant: usize, start: usize, end: usize },
    Gaze { participant: usize, device_ts: f64, x: f64, y: f64 },
}

pub struct Replayer {
    target: SocketAddr,
    sockets: Vec<UdpSocket>,
    sessions: Vec<SyntheticSession>,
    cfg: ReplayConfig,
}

fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> ReplayError {
    let context = context.into();
    move |source| ReplayError::Io { context, source }
}

impl Replayer {
    /// Bind and connect the sending sockets. With `prefix` off there is one
    /// socket per participant so the receiver can tell them apart.
    pub fn new(target: SocketAddr, mut sessions: Vec<SyntheticSession>, cfg: ReplayConfig) -> Result<Self, ReplayError> {
        cfg.validate()?;
        for s in &mut sessions {
            s.markers.sort_by(|a, b| a.device_ts.total_cmp(&b.device_ts));
        }
        let n = if cfg.prefix { 1 } else { sessions.len() };
        let local: SocketAddr = if target.is_ipv4() { "0.0.0.0:0".parse().expect("literal") } else { "[::]:0".parse().expect("literal") };
        let sockets = (0..n)
            .map(|_| {
                let s = UdpSocket::bind(local).map_err(io("binding replay socket"))?;
                s.connect(target).map_err(|source| ReplayError::Unreachable { target, source })?;
                Ok(s)
            })
            .collect::<Result<Vec<_>, ReplayError>>()?;
        Ok(Self { target, sockets, sessions, cfg })
    }

    /// Where each participant's datagrams come from, as the receiver sees it.
    pub fn source_addrs(&self) -> Vec<(String, SocketAddr)> {
        self.sessions
            .iter()
            .enumerate()
            .filter_map(|(i, s)| {
                let sock = &self.sockets[if self.cfg.prefix { 0 } else { i }];
                sock.local_addr().ok().map(|a| (s.participant_id.clone(), a))
            })
            .collect()
    }

    /// Send an unmapped probe and wait briefly for an ICMP rejection, so a
    /// wrong port fails before any session data goes out.
    pub fn check_reachable(&self) -> Result<(), ReplayError> {
        let probe = encode(&OscPacket::Message(OscMessage::new("/engage/probe", vec![])));
        for s in &self.sockets {
            s.send(&probe).map_err(|source| ReplayError::Unreachable { target: self.target, source })?;
        }
        std::thread::sleep(Duration::from_millis(50));
        for s in &self.sockets {
            if let Some(source) = s.take_error().map_err(io("socket status"))? {
                return Err(ReplayError::Unreachable { target: self.target, source });
            }
            if let Err(source) = s.send(&probe) {
                return Err(ReplayError::Unreachable { target: self.target, source });
            }
        }
        Ok(())
    }

    fn schedule(&self, rng: &mut ChaCha8Rng, gaze: bool) -> (Vec<(f64, Item)>, f64) {
        let [lo, hi] = self.cfg.latency_s;
        let latency = |rng: &mut ChaCha8Rng| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let mut items = Vec::new();
        let mut total_latency = 0.0;
        for (p, s) in self.sessions.iter().enumerate() {
            for start in (0..s.frames.len()).step_by(self.cfg.frames_per_datagram) {
                let end = (start + self.cfg.frames_per_datagram).min(s.frames.len());
                let l = latency(rng);
                total_latency += l;
                items.push((s.frames[end - 1].device_ts + l, Item::Frames { participant: p, start, end }));
            }
            let mut start = 0;
            while start < s.markers.len() {
                let t = s.markers[start].device_ts;
                let end = start + s.markers[start..].iter().take_while(|m| m.device_ts == t).count();
                let l = latency(rng);
                total_latency += l;
                items.push((t + l, Item::Markers { participant: p, start, end }));
                start = end;
            }
            if gaze && self.cfg.gaze_rate_hz > 0.0 {
                let (mut x, mut y) = (0.5, 0.5);
                let n = (s.duration() * self.cfg.gaze_rate_hz).floor() as usize;
                for k in 0..n {
                    let t = k as f64 / self.cfg.gaze_rate_hz;
                    x = (x + rng.random_range(-0.02..0.02f64)).clamp(0.0, 1.0);
                    y = (y + rng.random_range(-0.02..0.02f64)).clamp(0.0, 1.0);
                    items.push((t + latency(rng), Item::Gaze { participant: p, device_ts: t, x, y }));
                }
            }
        }
        items.sort_by(|a, b| a.0.total_cmp(&b.0));
        let sent = items.iter().filter(|i| !matches!(i.1, Item::Gaze { .. })).count().max(1);
        (items, total_latency / sent as f64)
    }

    fn address(&self, participant: usize, path: &str) -> String {
        let id = self.cfg.prefix.then(|| self.sessions[participant].participant_id.as_str());
        AddressMap::prefixed(id, path)
    }

    fn timetag(&self, epoch: f64, device_ts: f64) -> TimeTag {
        if self.cfg.timetags {
            TimeTag::from_unix_seconds(epoch + device_ts)
        } else {
            TimeTag::IMMEDIATE
        }
    }

    fn frames_packet(&self, p: usize, start: usize, end: usize, epoch: f64) -> OscPacket {
        let map = &self.cfg.address_map;
        let frames = &self.sessions[p].frames;
        let content = (start..end)
            .map(|i| {
                let f = &frames[i];
                let mut msgs = vec![OscPacket::Message(OscMessage::new(
                    self.address(p, &map.eeg),
                    f.eeg.iter().map(|v| OscType::Float(*v as f32)).collect(),
                ))];
                if i % self.cfg.accel_every == 0 {
                    let acc = [0.0, 0.0, f.accel_mag as f32];
                    msgs.push(OscPacket::Message(OscMessage::new(self.address(p, &map.accel), acc.map(OscType::Float).to_vec())));
                }
                let changed = i > 0 && frames[i - 1].quality != f.quality;
                if i % self.cfg.quality_every == 0 || changed {
                    let q = f.quality.map(|q| OscType::Float(if q == Quality::Good { 1.0 } else { 4.0 }));
                    msgs.push(OscPacket::Message(OscMessage::new(self.address(p, &map.quality), q.to_vec())));
                }
                OscPacket::Bundle(OscBundle { timetag: self.timetag(epoch, f.device_ts), content: msgs })
            })
            .collect();
        OscPacket::Bundle(OscBundle { timetag: self.timetag(epoch, frames[end - 1].device_ts), content })
    }

    fn markers_packet(&self, p: usize, start: usize, end: usize, epoch: f64) -> OscPacket {
        let markers = &self.sessions[p].markers[start..end];
        let content = markers
            .iter()
            .map(|m| {
                let args = vec![OscType::String(marker_kind(m.kind).into()), OscType::String(m.label.clone())];
                OscPacket::Message(OscMessage::new(self.address(p, &self.cfg.address_map.marker), args))
            })
            .collect();
        OscPacket::Bundle(OscBundle { timetag: self.timetag(epoch, markers[0].device_ts), content })
    }

    /// Send everything on schedule. Blocks for the session duration divided
    /// by the rate.
    pub fn run(self, gaze: Option<GazeTarget>) -> Result<ReplaySummary, ReplayError> {
        self.check_reachable()?;
        let epoch = self.cfg.device_epoch.unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64()));
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let (items, mean_latency_s) = self.schedule(&mut rng, gaze.is_some());
        let publisher = gaze.map(GazePublisher::connect).transpose()?;
        let mut summary = ReplaySummary { mean_latency_s, ..Default::default() };
        let origin = Instant::now();
        for (at, item) in items {
            let due = Duration::from_secs_f64(at.max(0.0) / self.cfg.rate);
            let now = origin.elapsed();
            if due > now {
                std::thread::sleep(due - now);
            } else {
                summary.max_lag_s = summary.max_lag_s.max((now - due).as_secs_f64());
            }
            let (participant, packet) = match item {
                Item::Frames { participant, start, end } => {
                    summary.frames += (end - start) as u64;
                    (participant, self.frames_packet(participant, start, end, epoch))
                }
                Item::Markers { participant, start, end } => {
                    summary.markers += (end - start) as u64;
                    (participant, self.markers_packet(participant, start, end, epoch))
                }
                Item::Gaze { participant, device_ts, x, y } => {
                    let sample = GazePayload { device_ts: epoch + device_ts, gaze_x: x, gaze_y: y, confidence: 0.9 };
                    let topic = format!("gaze/{}", self.sessions[participant].participant_id);
                    publisher.as_ref().expect("gaze items need a publisher").publish(topic, &sample)?;
                    summary.gaze_messages += 1;
                    continue;
                }
            };
            let bytes = encode(&packet);
            let sock = &self.sockets[if self.cfg.prefix { 0 } else { participant }];
            sock.send(&bytes).map_err(|source| ReplayError::Unreachable { target: self.target, source })?;
            summary.datagrams += 1;
            summary.bytes += bytes.len() as u64;
        }
        if let Some(p) = publisher {
            p.close();
        }
        summary.wall_s = origin.elapsed().as_secs_f64();
        Ok(summary)
    }
}

fn marker_kind(kind: EventKind) -> &'static str {
    match kind {
        EventKind::StartBlock => "start_block",
        EventKind::StopBlock => "stop_block",
        _ => "mark",
    }
}

struct GazePublisher {
    client: rumqttc::Client,
    pump: std::thread::JoinHandle<()>,
}

impl GazePublisher {
    fn connect(target: GazeTarget) -> Result<Self, ReplayError> {
        let id = format!("engage-replay-{}", std::process::id());
        let mut opts = rumqttc::MqttOptions::new(id, target.host, target.port);
        opts.set_keep_alive(Duration::from_secs(5));
        let (client, mut connection) = rumqttc::Client::new(opts, 256);
        let pump = std::thread::spawn(move || {
            for event in connection.iter() {
                if let Err(e) = &event {
                    tracing::warn!(error = %e, "gaze publisher connection");
                    std::thread::sleep(Duration::from_millis(100));
                }
                if matches!(event, Ok(rumqttc::Event::Outgoing(rumqttc::Outgoing::Disconnect))) {
                    break;
                }
            }
        });
        Ok(Self { client, pump })
    }

    fn publish(&self, topic: String, sample: &GazePayload) -> Result<(), ReplayError> {
        let payload = serde_json::to_vec(sample).map_err(|e| ReplayError::Gaze(e.to_string()))?;
        self.client.publish(topic, rumqttc::QoS::AtLeastOnce, false, payload).map_err(|e| ReplayError::Gaze(e.to_string()))
    }

    fn close(self) {
        // let queued publishes drain before the disconnect
        std::thread::sleep(Duration::from_millis(200));
        let _ = self.client.disconnect();
        let deadline = Instant::now() + Duration::from_secs(2);
        while !self.pump.is_finished() && Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(10));
        }
    }
}

/// Rebuild replayable sessions from a recording. Device times are rebased
/// so each participant starts at zero; contact quality and accelerometer
/// values are carried forward between their rows.
pub fn sessions_from_recording(manifest_path: &Path) -> Result<Vec<SyntheticSession>, ReplayError> {
    let manifest = SessionManifest::load(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let events = read_stream::<EventRow>(&dir.join(&manifest.events_file))?.rows;
    let mut out = Vec::new();
    for p in &manifest.participants {
        let id = &p.participant_id;
        let path = |k: StreamKind| manifest.stream(k, id).map(|s| dir.join(&s.path));
        let Some(eeg_path) = path(StreamKind::Eeg) else { continue };
        let eeg = read_stream::<EegRow>(&eeg_path)?.rows;
        if eeg.is_empty() {
            continue;
        }
        let quality = match path(StreamKind::Quality) {
            Some(q) => read_stream::<QualityRow>(&q)?.rows,
            None => Vec::new(),
        };
        let accel = match path(StreamKind::Accel) {
            Some(a) => read_stream::<AccelRow>(&a)?.rows,
            None => Vec::new(),
        };
        let t0 = eeg.iter().map(|r| r.device_ts).fold(f64::INFINITY, f64::min);
        let mut offsets: Vec<f64> = eeg.iter().map(|r| r.t_ref - r.device_ts).collect();
        offsets.sort_by(f64::total_cmp);
        let offset = offsets[offsets.len() / 2];
        let (mut qi, mut ai) = (0, 0);
        let mut q = [Quality::Good; 4];
        let mut a = GRAVITY;
        let frames = eeg
            .iter()
            .map(|r| {
                while qi < quality.len() && quality[qi].device_ts <= r.device_ts {
                    q = quality[qi].flags();
                    qi += 1;
                }
                while ai < accel.len() && accel[ai].device_ts <= r.device_ts {
                    a = accel[ai].magnitude;
                    ai += 1;
                }
                SyntheticFrame { device_ts: r.device_ts - t0, eeg: [r.tp9, r.af7, r.af8, r.tp10], accel_mag: a, quality: q }
            })
            .collect();
        let mut markers: Vec<SyntheticMarker> = events
            .iter()
            .filter(|e| e.participant == *id && matches!(e.kind, EventKind::StartBlock | EventKind::StopBlock | EventKind::Mark))
            .map(|e| SyntheticMarker {
                device_ts: (e.device_ts.unwrap_or(e.t_ref - offset) - t0).max(0.0),
                kind: e.kind,
                label: e.label.clone(),
            })
            .collect();
        markers.sort_by(|a, b| a.device_ts.total_cmp(&b.device_ts));
        out.push(SyntheticSession { participant_id: id.clone(), sample_rate: manifest.sample_rate, frames, markers, truth: Vec::new() });
    }
    Ok(out)
}
