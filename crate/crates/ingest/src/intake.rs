//! UDP OSC intake: decode, attribute to a participant, timestamp on the
//! reference clock and hand rows to the stream writers.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use engage_core::osc::{decode_frame, parse_osc_packet, AddressMap, Fragment};
use engage_core::recording::{AccelRow, EegRow, OpticsRow, QualityRow, StreamKind};
use engage_core::signal::Quality;
use engage_core::sync::{ClockSync, ReferenceClock, SyncSummary};
use serde::{Deserialize, Serialize};
use tokio::net::UdpSocket;
use tokio::sync::{mpsc, watch};

use crate::control::ControlMsg;
use crate::live::{LiveBatch, LiveHub, SyncHealth};
use crate::recorder::ResortBuffer;

/// Largest datagram accepted.
const MAX_DATAGRAM: usize = 65_536;
/// Requested kernel receive buffer; bursts queue here while writers catch up.
pub const RECV_BUFFER_BYTES: usize = 4 << 20;

/// Running totals, readable while the session records.
#[derive(Debug, Default)]
pub(crate) struct Counters {
    pub datagrams: AtomicU64,
    pub parse_errors: AtomicU64,
    pub unmapped: AtomicU64,
    pub mapping_errors: AtomicU64,
    pub unattributed: AtomicU64,
    pub late: AtomicU64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntakeStats {
    pub datagrams: u64,
    /// Datagrams that were not valid OSC.
    pub parse_errors: u64,
    /// Messages on addresses outside the address map.
    pub unmapped: u64,
    /// Mapped messages with the wrong arity or argument types.
    pub mapping_errors: u64,
    /// Messages from an unknown participant or an unbound source.
    pub unattributed: u64,
    /// Rows that arrived after later device times were already written.
    pub late: u64,
}

impl Counters {
    pub fn snapshot(&self) -> IntakeStats {
        let g = |a: &AtomicU64| a.load(Ordering::Relaxed);
        IntakeStats {
            datagrams: g(&self.datagrams),
            parse_errors: g(&self.parse_errors),
            unmapped: g(&self.unmapped),
            mapping_errors: g(&self.mapping_errors),
            unattributed: g(&self.unattributed),
            late: g(&self.late),
        }
    }
}

pub(crate) struct Sinks {
    pub eeg: mpsc::Sender<EegRow>,
    pub accel: mpsc::Sender<AccelRow>,
    pub quality: mpsc::Sender<QualityRow>,
    pub optics: mpsc::Sender<OpticsRow>,
}

pub(crate) struct ParticipantSetup {
    pub id: String,
    pub source: Option<SocketAddr>,
    pub sinks: Sinks,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Stream {
    Eeg,
    Accel,
    Quality,
    Optics,
}

const STREAMS: [Stream; 4] = [Stream::Eeg, Stream::Accel, Stream::Quality, Stream::Optics];

enum Pending {
    Eeg([f64; 4]),
    Accel([f64; 3], f64),
    Quality([Quality; 4]),
    Optics(Vec<f64>),
    Marker { kind: String, label: String, timed: bool },
}

struct Participant {
    id: String,
    sinks: Sinks,
    clocks: [ClockSync; 4],
    eeg_count: u64,
    last_eeg_device: f64,
    buffer: ResortBuffer<Pending>,
    /// Newest device time per stream in the current datagram.
    touched: [Option<f64>; 4],
    /// Something was buffered from the current datagram.
    dirty: bool,
}

pub(crate) struct Intake {
    map: AddressMap,
    fs: f64,
    clock: Arc<dyn ReferenceClock>,
    participants: Vec<Participant>,
    by_id: HashMap<String, usize>,
    by_source: HashMap<SocketAddr, usize>,
    /// Unprefixed traffic from unbound sources goes here when there is
    /// exactly one participant and no source bindings at all.
    fallback: Option<usize>,
    control: mpsc::Sender<ControlMsg>,
    hub: Arc<LiveHub>,
    counters: Arc<Counters>,
    released: Vec<(f64, Pending)>,
    batch: LiveBatch,
}

/// Writers went away, so recording cannot continue.
#[derive(Debug)]
pub(crate) struct Aborted;

pub(crate) struct IntakeOutcome {
    pub sync: Vec<SyncSummary>,
    pub aborted: bool,
}

impl Intake {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        map: AddressMap,
        fs: f64,
        hold_s: f64,
        clock: Arc<dyn ReferenceClock>,
        setups: Vec<ParticipantSetup>,
        control: mpsc::Sender<ControlMsg>,
        hub: Arc<LiveHub>,
        counters: Arc<Counters>,
    ) -> Self {
        let mut by_id = HashMap::new();
        let mut by_source = HashMap::new();
        let mut participants = Vec::new();
        for (i, s) in setups.into_iter().enumerate() {
            by_id.insert(s.id.clone(), i);
            if let Some(src) = s.source {
                by_source.insert(src, i);
            }
            let kinds = [StreamKind::Eeg, StreamKind::Accel, StreamKind::Quality, StreamKind::Optics];
            participants.push(Participant {
                clocks: kinds.map(|k| ClockSync::new(k.stream_id(&s.id))),
                id: s.id,
                sinks: s.sinks,
                eeg_count: 0,
                last_eeg_device: 0.0,
                buffer: ResortBuffer::new(hold_s),
                touched: [None; 4],
                dirty: false,
            });
        }
        let fallback = (participants.len() == 1 && by_source.is_empty()).then_some(0);
        Self {
            map,
            fs,
            clock,
            participants,
            by_id,
            by_source,
            fallback,
            control,
            hub,
            counters,
            released: Vec::new(),
            batch: LiveBatch::default(),
        }
    }

    pub async fn run(mut self, socket: UdpSocket, mut shutdown: watch::Receiver<bool>) -> IntakeOutcome {
        let mut buf = vec![0u8; MAX_DATAGRAM];
        let mut aborted = false;
        loop {
            tokio::select! {
                biased;
                r = socket.recv_from(&mut buf) => match r {
                    Ok((n, src)) => {
                        let arrival = self.clock.now();
                        if self.datagram(&buf[..n], src, arrival).await.is_err() {
                            aborted = true;
                            break;
                        }
                    }
                    Err(e) => tracing::warn!(error = %e, "udp receive failed"),
                },
                _ = shutdown.changed() => break,
            }
        }
        if !aborted {
            // take whatever the kernel already queued
            while let Ok((n, src)) = socket.try_recv_from(&mut buf) {
                let arrival = self.clock.now();
                if self.datagram(&buf[..n], src, arrival).await.is_err() {
                    aborted = true;
                    break;
                }
            }
        }
        if !aborted {
            for p in 0..self.participants.len() {
                let mut out = std::mem::take(&mut self.released);
                self.participants[p].buffer.drain(&mut out);
                self.released = out;
                if self.emit(p).await.is_err() {
                    aborted = true;
                    break;
                }
            }
            self.hub.apply(&mut self.batch);
        }
        let sync = self.participants.iter().flat_map(|p| p.clocks.iter().map(ClockSync::summary)).collect();
        IntakeOutcome { sync, aborted }
    }

    fn attribute(&self, prefix: Option<&str>, src: SocketAddr) -> Option<usize> {
        match prefix {
            Some(p) => self.by_id.get(p).copied(),
            None => self.by_source.get(&src).copied().or(self.fallback),
        }
    }

    pub async fn datagram(&mut self, bytes: &[u8], src: SocketAddr, arrival: f64) -> Result<(), Aborted> {
        self.counters.datagrams.fetch_add(1, Ordering::Relaxed);
        let messages = match parse_osc_packet(bytes, Some(src), arrival) {
            Ok(m) => m,
            Err(e) => {
                self.counters.parse_errors.fetch_add(1, Ordering::Relaxed);
                tracing::debug!(%src, error = %e, "dropping malformed datagram");
                return Ok(());
            }
        };
        let mut global_markers = Vec::new();
        for m in messages {
            let route = match decode_frame(&m.message, &self.map) {
                Ok(Some(r)) => r,
                Ok(None) => {
                    self.counters.unmapped.fetch_add(1, Ordering::Relaxed);
                    continue;
                }
                Err(e) => {
                    self.counters.mapping_errors.fetch_add(1, Ordering::Relaxed);
                    tracing::debug!(%src, error = %e, "dropping unmappable message");
                    continue;
                }
            };
            let device = m.timetag.filter(|t| !t.is_immediate()).map(|t| t.to_unix_seconds());
            let Some(pi) = self.attribute(route.participant.as_deref(), src) else {
                match route.fragment {
                    Fragment::Marker { kind, label } if route.participant.is_none() => global_markers.push((kind, label)),
                    _ => {
                        self.counters.unattributed.fetch_add(1, Ordering::Relaxed);
                    }
                }
                continue;
            };
            let fs = self.fs;
            let p = &mut self.participants[pi];
            let (stream, ts, item) = match route.fragment {
                Fragment::Eeg(v) => {
                    let ts = device.unwrap_or(p.eeg_count as f64 / fs);
                    p.eeg_count += 1;
                    p.last_eeg_device = ts;
                    (Some(Stream::Eeg), ts, Pending::Eeg(v))
                }
                Fragment::Accel { xyz, magnitude } => {
                    (Some(Stream::Accel), device.unwrap_or(p.last_eeg_device), Pending::Accel(xyz, magnitude))
                }
                Fragment::Quality(q) => (Some(Stream::Quality), device.unwrap_or(p.last_eeg_device), Pending::Quality(q)),
                Fragment::Optics(v) => (Some(Stream::Optics), device.unwrap_or(p.last_eeg_device), Pending::Optics(v)),
                Fragment::Marker { kind, label } => {
                    // a timed marker is also a clock observation for the EEG stream
                    let stream = device.map(|_| Stream::Eeg);
                    let ts = device.unwrap_or(p.last_eeg_device);
                    (stream, ts, Pending::Marker { kind, label, timed: device.is_some() })
                }
            };
            if let Some(s) = stream {
                let slot = &mut p.touched[s as usize];
                *slot = Some(slot.map_or(ts, |t: f64| t.max(ts)));
            }
            p.buffer.push(ts, item);
            p.dirty = true;
        }
        for (kind, label) in global_markers {
            let msg = ControlMsg::Marker { participant: String::new(), device_ts: None, t_ref: arrival, kind, label };
            self.control.send(msg).await.map_err(|_| Aborted)?;
        }
        for pi in 0..self.participants.len() {
            let p = &mut self.participants[pi];
            if !std::mem::take(&mut p.dirty) {
                continue;
            }
            for s in STREAMS {
                if let Some(ts) = p.touched[s as usize].take() {
                    p.clocks[s as usize].update(ts, arrival);
                }
            }
            let late_before = p.buffer.late();
            let mut out = std::mem::take(&mut self.released);
            p.buffer.release(&mut out);
            let late = p.buffer.late() - late_before;
            self.released = out;
            self.counters.late.fetch_add(late, Ordering::Relaxed);
            self.batch.sync.push((pi, SyncHealth::of(&self.participants[pi].clocks[0])));
            self.emit(pi).await?;
        }
        if !self.batch.is_empty() {
            self.hub.apply(&mut self.batch);
        }
        Ok(())
    }

    /// Write out everything in `self.released` for participant `pi`.
    async fn emit(&mut self, pi: usize) -> Result<(), Aborted> {
        let mut released = std::mem::take(&mut self.released);
        let p = &mut self.participants[pi];
        for (device_ts, item) in released.drain(..) {
            match item {
                Pending::Eeg(v) => {
                    let t_ref = p.clocks[Stream::Eeg as usize].assign(device_ts);
                    let row = EegRow { t_ref, device_ts, tp9: v[0], af7: v[1], af8: v[2], tp10: v[3] };
                    p.sinks.eeg.send(row).await.map_err(|_| Aborted)?;
                    self.batch.samples.push((pi, t_ref, v));
                }
                Pending::Accel(xyz, magnitude) => {
                    let t_ref = p.clocks[Stream::Accel as usize].assign(device_ts);
                    let row = AccelRow { t_ref, device_ts, x: xyz[0], y: xyz[1], z: xyz[2], magnitude };
                    p.sinks.accel.send(row).await.map_err(|_| Aborted)?;
                }
                Pending::Quality(q) => {
                    let t_ref = p.clocks[Stream::Quality as usize].assign(device_ts);
                    let row = QualityRow { t_ref, device_ts, tp9: q[0], af7: q[1], af8: q[2], tp10: q[3] };
                    p.sinks.quality.send(row).await.map_err(|_| Aborted)?;
                    self.batch.quality.push((pi, q));
                }
                Pending::Optics(v) => {
                    let t_ref = p.clocks[Stream::Optics as usize].assign(device_ts);
                    let values = v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
                    p.sinks.optics.send(OpticsRow { t_ref, device_ts, values }).await.map_err(|_| Aborted)?;
                }
                Pending::Marker { kind, label, timed } => {
                    let t_ref = p.clocks[Stream::Eeg as usize].map(device_ts);
                    let msg = ControlMsg::Marker {
                        participant: p.id.clone(),
                        device_ts: timed.then_some(device_ts),
                        t_ref,
                        kind,
                        label,
                    };
                    self.control.send(msg).await.map_err(|_| Aborted)?;
                }
            }
        }
        self.released = released;
        Ok(())
    }
}

/// Bind a UDP socket with an enlarged receive buffer.
pub(crate) fn bind_udp(addr: SocketAddr) -> std::io::Result<UdpSocket> {
    use socket2::{Domain, Protocol, Socket, Type};
    let socket = Socket::new(Domain::for_address(addr), Type::DGRAM, Some(Protocol::UDP))?;
    if let Err(e) = socket.set_recv_buffer_size(RECV_BUFFER_BYTES) {
        tracing::warn!(error = %e, "could not enlarge the UDP receive buffer");
    }
    socket.set_nonblocking(true)?;
    socket.bind(&addr.into())?;
    UdpSocket::from_std(socket.into())
}
