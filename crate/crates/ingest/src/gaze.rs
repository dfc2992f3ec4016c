//! Gaze intake over MQTT. Broker outages are recorded as gap and reconnect
//! events; the client keeps retrying with capped exponential backoff.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use engage_core::recording::{EventKind, GazeRow, StreamKind};
use engage_core::sync::{ClockSync, ReferenceClock, SyncSummary};
use rumqttc::{AsyncClient, Event, MqttOptions, Packet, QoS};
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, watch};

use crate::control::ControlMsg;

const BACKOFF_START: Duration = Duration::from_millis(100);
const BACKOFF_MAX: Duration = Duration::from_secs(5);

/// What a gaze publisher sends, one JSON object per sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazePayload {
    pub device_ts: f64,
    pub gaze_x: f64,
    pub gaze_y: f64,
    pub confidence: f64,
}

#[derive(Debug, Default)]
pub(crate) struct GazeCounters {
    pub messages: AtomicU64,
    pub decode_errors: AtomicU64,
    pub gaps: AtomicU64,
    pub reconnects: AtomicU64,
}

pub(crate) struct GazeTopic {
    pub topic: String,
    pub participant: String,
    pub sink: mpsc::Sender<GazeRow>,
}

struct Route {
    participant: String,
    sink: mpsc::Sender<GazeRow>,
    clock: ClockSync,
}

pub(crate) struct GazeOutcome {
    pub sync: Vec<SyncSummary>,
    pub aborted: bool,
}

#[allow(clippy::too_many_arguments)]
pub(crate) async fn run(
    host: String,
    port: u16,
    client_id: String,
    topics: Vec<GazeTopic>,
    clock: Arc<dyn ReferenceClock>,
    control: mpsc::Sender<ControlMsg>,
    counters: Arc<GazeCounters>,
    mut shutdown: watch::Receiver<bool>,
) -> GazeOutcome {
    let mut opts = MqttOptions::new(client_id, host, port);
    opts.set_keep_alive(Duration::from_secs(5)).set_clean_session(true);
    let (client, mut events) = AsyncClient::new(opts, 64);
    let mut routes: HashMap<String, Route> = topics
        .into_iter()
        .map(|t| {
            let clock = ClockSync::new(StreamKind::Gaze.stream_id(&t.participant));
            (t.topic, Route { participant: t.participant, sink: t.sink, clock })
        })
        .collect();
    let mut in_gap = false;
    let mut backoff = BACKOFF_START;
    let mut aborted = false;
    let system = |routes: &HashMap<String, Route>, kind: EventKind| -> Vec<ControlMsg> {
        routes
            .values()
            .map(|r| ControlMsg::System { participant: r.participant.clone(), kind, label: StreamKind::Gaze.stream_id(&r.participant) })
            .collect()
    };
    'outer: loop {
        let event = tokio::select! {
            e = events.poll() => e,
            _ = shutdown.changed() => break,
        };
        match event {
            Ok(Event::Incoming(Packet::ConnAck(_))) => {
                backoff = BACKOFF_START;
                for topic in routes.keys() {
                    if let Err(e) = client.try_subscribe(topic.clone(), QoS::AtLeastOnce) {
                        tracing::warn!(%topic, error = %e, "gaze subscribe failed");
                    }
                }
                if in_gap {
                    in_gap = false;
                    counters.reconnects.fetch_add(1, Ordering::Relaxed);
                    tracing::info!("gaze broker reconnected");
                    for msg in system(&routes, EventKind::Reconnect) {
                        if control.send(msg).await.is_err() {
                            aborted = true;
                            break 'outer;
                        }
                    }
                }
            }
            Ok(Event::Incoming(Packet::Publish(p))) => {
                let arrival = clock.now();
                counters.messages.fetch_add(1, Ordering::Relaxed);
                let Some(route) = routes.get_mut(&p.topic) else { continue };
                let sample = match serde_json::from_slice::<GazePayload>(&p.payload) {
                    Ok(s) if s.device_ts.is_finite() && s.gaze_x.is_finite() && s.gaze_y.is_finite() && s.confidence.is_finite() => s,
                    Ok(_) => {
                        counters.decode_errors.fetch_add(1, Ordering::Relaxed);
                        tracing::warn!(topic = %p.topic, "gaze sample with non-finite values skipped");
                        continue;
                    }
                    Err(e) => {
                        counters.decode_errors.fetch_add(1, Ordering::Relaxed);
                        tracing::warn!(topic = %p.topic, error = %e, "undecodable gaze payload skipped");
                        continue;
                    }
                };
                route.clock.update(sample.device_ts, arrival);
                let t_ref = route.clock.assign(sample.device_ts);
                let row = GazeRow { t_ref, device_ts: sample.device_ts, gaze_x: sample.gaze_x, gaze_y: sample.gaze_y, confidence: sample.confidence };
                if route.sink.send(row).await.is_err() {
                    aborted = true;
                    break;
                }
            }
            Ok(_) => {}
            Err(e) => {
                if !in_gap {
                    in_gap = true;
                    counters.gaps.fetch_add(1, Ordering::Relaxed);
                    tracing::warn!(error = %e, "gaze broker unreachable");
                    for msg in system(&routes, EventKind::Gap) {
                        if control.send(msg).await.is_err() {
                            aborted = true;
                            break 'outer;
                        }
                    }
                }
                tokio::select! {
                    _ = tokio::time::sleep(backoff) => {}
                    _ = shutdown.changed() => break,
                }
                backoff = (backoff * 2).min(BACKOFF_MAX);
            }
        }
    }
    let _ = client.try_disconnect();
    GazeOutcome { sync: routes.values().map(|r| r.clock.summary()).collect(), aborted }
}
