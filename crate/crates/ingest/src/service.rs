//! Session lifecycle: open every file, start the tasks, and finalize the
//! manifest on the way out.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use engage_core::recording::{
    AccelRow, CsvStream, EegRow, EventRow, GazeRow, OpticsRow, QualityRow, RecordingError, SessionManifest, StreamKind,
    StreamRow, MANIFEST_FILE,
};
use engage_core::session::GroupAssignment;
use engage_core::sync::{ReferenceClock, SyncSummary};
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, watch};
use tokio::task::JoinHandle;

use crate::config::IngestConfig;
use crate::control::{CommandSender, ControlMsg, Controller};
use crate::gaze::{self, GazeCounters, GazeOutcome, GazeTopic};
use crate::intake::{self, Counters, Intake, IntakeOutcome, IntakeStats, ParticipantSetup, Sinks};
use crate::live::{self, LiveHub};
use crate::recorder::{spawn_writer, Failure, Writer};
use crate::IngestError;

const CONTROL_QUEUE: usize = 1024;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GazeStats {
    pub messages: u64,
    pub decode_errors: u64,
    pub gaps: u64,
    pub reconnects: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStats {
    pub intake: IntakeStats,
    pub gaze: GazeStats,
    pub live_clients: usize,
    pub live_frames: u64,
}

/// A recording in progress. Dropping it without [`RunningSession::finish`]
/// leaves the manifest marked partial, exactly as a crash would.
pub struct RunningSession {
    dir: PathBuf,
    manifest: SessionManifest,
    udp_addr: SocketAddr,
    http_addr: Option<SocketAddr>,
    commands: CommandSender,
    control: mpsc::Sender<ControlMsg>,
    counters: Arc<Counters>,
    gaze_counters: Arc<GazeCounters>,
    hub: Arc<LiveHub>,
    shutdown: watch::Sender<bool>,
    failure: Failure,
    failure_rx: watch::Receiver<Option<String>>,
    intake: JoinHandle<IntakeOutcome>,
    gaze: Option<JoinHandle<GazeOutcome>>,
    controller: JoinHandle<Result<u64, RecordingError>>,
    writers: Vec<(String, JoinHandle<Result<u64, RecordingError>>)>,
    background: Vec<JoinHandle<()>>,
}

fn open<R: StreamRow + Send + 'static>(
    dir: &Path,
    manifest: &SessionManifest,
    kind: StreamKind,
    participant: &str,
    capacity: usize,
    failure: &Failure,
    writers: &mut Vec<(String, JoinHandle<Result<u64, RecordingError>>)>,
) -> Result<mpsc::Sender<R>, IngestError> {
    let id = kind.stream_id(participant);
    let path = dir.join(&manifest.streams[&id].path);
    let stream = CsvStream::<R>::create(path)?;
    let Writer { tx, join } = spawn_writer(stream, capacity, failure.clone());
    writers.push((id, join));
    Ok(tx)
}

/// Start recording. Every file is created, the partial manifest written and
/// both sockets bound before this returns, so a bad directory or a taken
/// port fails here with nothing running.
pub async fn start(config: IngestConfig, clock: Arc<dyn ReferenceClock>) -> Result<RunningSession, IngestError> {
    config.validate()?;
    let socket = intake::bind_udp(SocketAddr::new(config.udp_bind, config.udp_port))
        .map_err(|source| IngestError::Io { context: format!("binding UDP port {}", config.udp_port), source })?;
    let udp_addr = socket.local_addr().map_err(|source| IngestError::Io { context: "UDP address".into(), source })?;
    let listener = match config.live_port {
        Some(port) => Some(
            tokio::net::TcpListener::bind(SocketAddr::new(config.live_bind, port))
                .await
                .map_err(|source| IngestError::Io { context: format!("binding live port {port}"), source })?,
        ),
        None => None,
    };
    let http_addr = listener.as_ref().and_then(|l| l.local_addr().ok());
    let dir = config.out_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|source| IngestError::Io { context: format!("creating {}", dir.display()), source })?;
    let manifest = SessionManifest::new(config.session_id.clone(), config.sample_rate, config.manifest_participants());
    manifest.write_atomic(&dir.join(MANIFEST_FILE))?;
    let events = CsvStream::<EventRow>::create(dir.join(&manifest.events_file))?;

    let (failure, failure_rx) = Failure::new();
    let (shutdown, shutdown_rx) = watch::channel(false);
    let mut writers = Vec::new();
    let mut setups = Vec::new();
    let mut gaze_topics = Vec::new();
    let cap = config.queue_capacity;
    for p in &config.participants {
        let id = p.id.as_str();
        let sinks = Sinks {
            eeg: open::<EegRow>(&dir, &manifest, StreamKind::Eeg, id, cap, &failure, &mut writers)?,
            accel: open::<AccelRow>(&dir, &manifest, StreamKind::Accel, id, cap, &failure, &mut writers)?,
            quality: open::<QualityRow>(&dir, &manifest, StreamKind::Quality, id, cap, &failure, &mut writers)?,
            optics: open::<OpticsRow>(&dir, &manifest, StreamKind::Optics, id, cap, &failure, &mut writers)?,
        };
        let source = p.osc_source.as_deref().map(|s| s.parse().expect("validated"));
        setups.push(ParticipantSetup { id: p.id.clone(), source, sinks });
        let sink = open::<GazeRow>(&dir, &manifest, StreamKind::Gaze, id, cap, &failure, &mut writers)?;
        gaze_topics.push(GazeTopic { topic: p.gaze_topic(), participant: p.id.clone(), sink });
    }


    let hub = Arc::new(LiveHub::new(config.live.clone(), config.sample_rate, config.participants.iter().map(|p| p.id.clone()).collect()));
    let plans: HashMap<_, _> = config
        .participants
        .iter()
        .map(|p| (p.id.clone(), GroupAssignment::new(&p.id, p.group, p.order()).expect("validated").plan()))
        .collect();
    let (control, control_rx) = mpsc::channel(CONTROL_QUEUE);
    let controller = Controller::new(clock.clone(), events, plans, manifest.condition_plan.clone(), hub.clone(), failure.clone());
    let controller = tokio::spawn(controller.run(control_rx));
    let commands = CommandSender(control.clone());

    let counters = Arc::new(Counters::default());
    let intake = Intake::new(
        config.address_map.clone(),
        config.sample_rate,
        config.resort_window_s,
        clock.clone(),
        setups,
        control.clone(),
        hub.clone(),
        counters.clone(),
    );
    let intake = tokio::spawn(intake.run(socket, shutdown_rx.clone()));

    let gaze_counters = Arc::new(GazeCounters::default());
    let gaze = match config.mqtt_endpoint()? {
        Some((host, port)) => Some(tokio::spawn(gaze::run(
            host,
            port,
            format!("engage-{}", config.session_id),
            gaze_topics,
            clock.clone(),
            control.clone(),
            gaze_counters.clone(),
            shutdown_rx.clone(),
        ))),
        // no broker: the gaze files stay header-only
        None => {
            drop(gaze_topics);
            None
        }
    };

    let mut background = vec![tokio::spawn(live::run_ticker(hub.clone(), shutdown_rx.clone()))];
    if let Some(listener) = listener {
        let app = live::router(hub.clone(), commands.clone(), shutdown_rx.clone());
        let mut stop = shutdown_rx.clone();
        background.push(tokio::spawn(async move {
            let served = axum::serve(listener, app).with_graceful_shutdown(async move {
                let _ = stop.changed().await;
            });
            if let Err(e) = served.await {
                tracing::error!(error = %e, "live server failed");
            }
        }));
    }
    tracing::info!(%udp_addr, live = ?http_addr, dir = %dir.display(), "recording");

    Ok(RunningSession {
        dir,
        manifest,
        udp_addr,
        http_addr,
        commands,
        control,
        counters,
        gaze_counters,
        hub,
        shutdown,
        failure,
        failure_rx,
        intake,
        gaze,
        controller,
        writers,
        background,
    })
}

impl RunningSession {
    pub fn udp_addr(&self) -> SocketAddr {
        self.udp_addr
    }

    /// Address of the `/live` server, when enabled.
    pub fn http_addr(&self) -> Option<SocketAddr> {
        self.http_addr
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn commands(&self) -> CommandSender {
        self.commands.clone()
    }

    pub fn stats(&self) -> SessionStats {
        let g = &self.gaze_counters;
        SessionStats {
            intake: self.counters.snapshot(),
            gaze: GazeStats {
                messages: g.messages.load(Ordering::Relaxed),
                decode_errors: g.decode_errors.load(Ordering::Relaxed),
                gaps: g.gaps.load(Ordering::Relaxed),
                reconnects: g.reconnects.load(Ordering::Relaxed),
            },
            live_clients: self.hub.clients(),
            live_frames: self.hub.frames_built(),
        }
    }

    /// Resolves with the reason once a writer fails.
    pub async fn failed(&self) -> String {
        let mut rx = self.failure_rx.clone();
        let reason = rx.wait_for(Option::is_some).await.ok().and_then(|r| r.clone());
        match reason {
            Some(r) => r,
            None => std::future::pending().await,
        }
    }

    /// Stop intake, drain every queue, and write the final manifest. The
    /// manifest stays partial, with a reason, if any writer failed.
    pub async fn finish(self) -> Result<SessionManifest, IngestError> {
        let _ = self.shutdown.send(true);
        let mut sync: Vec<SyncSummary> = Vec::new();
        let mut problems = Vec::new();
        match self.intake.await {
            Ok(o) => {
                sync.extend(o.sync);
                if o.aborted {
                    problems.push("intake stopped early".to_string());
                }
            }
            Err(e) => problems.push(format!("intake task: {e}")),
        }
        if let Some(g) = self.gaze {
            match g.await {
                Ok(o) => {
                    sync.extend(o.sync);
                    if o.aborted {
                        problems.push("gaze intake stopped early".to_string());
                    }
                }
                Err(e) => problems.push(format!("gaze task: {e}")),
            }
        }
        let _ = self.control.send(ControlMsg::Stop).await;
        drop(self.control);
        drop(self.commands);
        match self.controller.await {
            Ok(Ok(_)) => {}
            Ok(Err(e)) => problems.push(e.to_string()),
            Err(e) => problems.push(format!("event task: {e}")),
        }
        let mut manifest = self.manifest;
        for (id, join) in self.writers {
            match join.await {
                Ok(Ok(rows)) => manifest.streams.get_mut(&id).expect("declared stream").rows = rows,
                Ok(Err(e)) => problems.push(e.to_string()),
                Err(e) => problems.push(format!("{id} writer: {e}")),
            }
        }
        for task in self.background {
            if tokio::time::timeout(Duration::from_secs(5), task).await.is_err() {
                tracing::warn!("live task did not stop in time");
            }
        }
        for s in sync.into_iter().filter(|s| s.pairs_seen > 0) {
            manifest.sync.insert(s.stream_id.clone(), s);
        }
        if let Some(reason) = self.failure.get() {
            problems.insert(0, reason);
        }
        if problems.is_empty() {
            if let Err(e) = manifest.validate(&self.dir) {
                problems.push(e.to_string());
            }
        }
        if problems.is_empty() {
            manifest.partial = false;
            manifest.partial_reason = None;
            manifest.finalized_at = Some(chrono::Utc::now().to_rfc3339());
        } else {
            manifest.partial = true;
            manifest.partial_reason = Some(problems.join("; "));
        }
        manifest.write_atomic(&self.dir.join(MANIFEST_FILE))?;
        Ok(manifest)
    }
}
