use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use engage_core::engagement::{read_records_csv, write_records_csv};
use engage_core::session::{analyze_session, compare_modalities, AnalysisConfig, LogEvent};
use engage_core::spectral::write_band_power_csv;
use engage_core::sync::SystemClock;
use engage_core::Group;
use engage_ingest::{start, Broker, IngestConfig, ParticipantConfig, Replayer, SimulationSpec};
use serde_json::json;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "engage", version, about = "Record, simulate and analyze wearable EEG engagement sessions")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Receive OSC and gaze, serve the live view and record a session until interrupted.
    Record(RecordArgs),
    /// Replay a synthetic or recorded session to a recorder.
    Simulate(SimulateArgs),
    /// Analyze a recorded session into engagement records and a contrast report.
    Analyze(AnalyzeArgs),
    /// Run the modality contrasts on an existing records CSV.
    Report(ReportArgs),
    /// Run a minimal MQTT broker for gaze.
    Broker(BrokerArgs),
}

#[derive(Args)]
struct RecordArgs {
    /// TOML or JSON ingest configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for this session's files.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    udp_port: Option<u16>,
    /// Broker to take gaze from, e.g. mqtt://127.0.0.1:1883.
    #[arg(long)]
    mqtt_url: Option<String>,
    /// Port of the /live WebSocket view; 0 picks a free one.
    #[arg(long)]
    live_port: Option<u16>,
    /// Disable the live view.
    #[arg(long, conflicts_with = "live_port")]
    no_live: bool,
    #[arg(long)]
    session_id: Option<String>,
    /// Add a participant as ID=GROUP (GROUP: immersive or display); repeatable.
    #[arg(long = "participant", value_parser = parse_participant)]
    participants: Vec<ParticipantConfig>,
    /// Stop by itself after this many seconds.
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON simulation spec.
    #[arg(long)]
    spec: PathBuf,
    /// Recorder UDP endpoint, host:port.
    #[arg(long)]
    target: String,
    /// Overrides the spec's broker for gaze.
    #[arg(long)]
    mqtt_url: Option<String>,
    /// Overrides the spec's replay rate.
    #[arg(long)]
    rate: Option<f64>,
    /// Write an ingest config matching the simulated participants and exit.
    #[arg(long)]
    emit_config: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// The session's manifest.json.
    manifest: PathBuf,
    /// Output directory; defaults to `analysis/` next to the manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON analysis configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ica_seed: Option<u64>,
    #[arg(long)]
    no_ica: bool,
    /// Skip participants without a usable eyes-open baseline instead of failing.
    #[arg(long)]
    skip_missing_baseline: bool,
}

#[derive(Args)]
struct ReportArgs {
    records: PathBuf,
    /// Report file; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BrokerArgs {
    #[arg(long, default_value = "127.0.0.1")]
    bind: std::net::IpAddr,
    #[arg(long, default_value_t = 1883)]
    port: u16,
}

fn parse_participant(s: &str) -> Result<ParticipantConfig, String> {
    let (id, group) = s.split_once('=').ok_or_else(|| format!("expected ID=GROUP, got {s:?}"))?;
    let group = match group.to_ascii_lowercase().as_str() {
        "immersive" | "immersivegroup" => Group::ImmersiveGroup,
        "display" | "displaygroup" => Group::DisplayGroup,
        other => return Err(format!("unknown group {other:?}; use immersive or display")),
    };
    Ok(ParticipantConfig::new(id, group))
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Record(a) => runtime().and_then(|rt| rt.block_on(record(a))),
        Cmd::Simulate(a) => simulate(a),
        Cmd::Analyze(a) => analyze(a),
        Cmd::Report(a) => report(a),
        Cmd::Broker(a) => runtime().and_then(|rt| rt.block_on(broker(a))),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().context("starting the async runtime")
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer(&mut out, v)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn record_config(a: &RecordArgs) -> Result<IngestConfig> {
    let mut cfg = match &a.config {
        Some(p) => IngestConfig::load(p)?,
        None => IngestConfig::default(),
    };
    if let Some(out) = &a.out {
        cfg.out_dir = out.clone();
    }
    if let Some(port) = a.udp_port {
        cfg.udp_port = port;
    }
    if let Some(url) = &a.mqtt_url {
        cfg.mqtt_url = Some(url.clone());
    }
    if a.no_live {
        cfg.live_port = None;
    } else if let Some(port) = a.live_port {
        cfg.live_port = Some(port);
    }
    if let Some(id) = &a.session_id {
        cfg.session_id = id.clone();
    }
    for p in &a.participants {
        if cfg.participants.iter().any(|q| q.id == p.id) {
            bail!("participant {} given twice", p.id);
        }
        cfg.participants.push(p.clone());
    }
    Ok(cfg)
}

async fn record(a: RecordArgs) -> Result<()> {
    let cfg = record_config(&a)?;
    let session = start(cfg, Arc::new(SystemClock)).await?;
    tracing::info!(dir = %session.dir().display(), udp = %session.udp_addr(), "recording");
    // one machine-readable line so scripts can find the bound ports
    print_json(&json!({
        "event": "recording",
        "dir": session.dir(),
        "udp": session.udp_addr().to_string(),
        "live": session.http_addr().map(|a| a.to_string()),
    }))?;

    let timer = async {
        match a.duration {
            Some(s) => tokio::time::sleep(Duration::from_secs_f64(s)).await,
            None => std::future::pending().await,
        }
    };
    let failure = tokio::select! {
        _ = shutdown_signal() => None,
        _ = timer => None,
        reason = session.failed() => Some(reason),
    };
    if let Some(reason) = &failure {
        tracing::error!(%reason, "recording failed; finalizing what was written");
    }
    let stats = session.stats();
    let manifest = session.finish().await?;
    print_json(&json!({
        "event": "finished",
        "partial": manifest.partial,
        "partial_reason": manifest.partial_reason,
        "streams": manifest.streams.iter().map(|(k, s)| (k.clone(), s.rows)).collect::<std::collections::BTreeMap<_, _>>(),
        "stats": stats,
    }))?;
    match failure {
        Some(reason) => Err(anyhow!(reason)),
        None if manifest.partial => Err(anyhow!("session left partial: {}", manifest.partial_reason.unwrap_or_default())),
        None => Ok(()),
    }
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => {}
                    _ = term.recv() => {}
                }
            }
            Err(_) => {
                let _ = tokio::signal::ctrl_c().await;
            }
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

fn resolve(target: &str) -> Result<SocketAddr> {
    target
        .to_socket_addrs()
        .with_context(|| format!("resolving {target}"))?
        .next()
        .ok_or_else(|| anyhow!("{target} resolves to no address"))
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut spec = SimulationSpec::load(&a.spec)?;
    if let Some(url) = a.mqtt_url {
        spec.mqtt_url = Some(url);
    }
    if let Some(rate) = a.rate {
        spec.replay.rate = rate;
    }
    let sim = spec.build()?;
    let target = resolve(&a.target)?;
    if let Some(path) = a.emit_config {
        let cfg = IngestConfig {
            udp_port: target.port(),
            mqtt_url: spec.mqtt_url.clone(),
            sample_rate: spec.sample_rate,
            participants: sim.participants,
            ..IngestConfig::default()
        };
        std::fs::write(&path, serde_json::to_string_pretty(&cfg)?).with_context(|| format!("writing {}", path.display()))?;
        return Ok(());
    }
    let replayer = Replayer::new(target, sim.sessions, sim.replay)?;
    let summary = replayer.run(sim.gaze)?;
    print_json(&summary)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<AnalysisConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => AnalysisConfig::default(),
    };
    if let Some(seed) = a.ica_seed {
        cfg.ica_seed = seed;
    }
    cfg.run_ica &= !a.no_ica;
    cfg.skip_missing_baseline |= a.skip_missing_baseline;
    let out = a.out.unwrap_or_else(|| a.manifest.parent().unwrap_or(Path::new(".")).join("analysis"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let analysis = analyze_session(&a.manifest, &cfg)?;
    for e in &analysis.log {
        if let LogEvent::RecordingIncomplete { partial_reason, truncated } = e {
            tracing::warn!(?partial_reason, ?truncated, "the recording was interrupted; results cover what was written");
        }
    }
    let mut w = create(&out.join("records.csv"))?;
    write_records_csv(&mut w, &analysis.records)?;
    w.flush()?;
    let mut w = create(&out.join("band_powers.csv"))?;
    write_band_power_csv(&mut w, &analysis.tables)?;
    w.flush()?;
    let mut w = create(&out.join("analysis_log.jsonl"))?;
    analysis.write_log(&mut w)?;
    w.flush()?;

    let report = compare_modalities(&analysis.records).context("records written, but the contrasts could not be computed")?;
    let mut w = create(&out.join("report.json"))?;
    serde_json::to_writer_pretty(&mut w, &report)?;
    writeln!(w)?;
    w.flush()?;
    print_json(&json!({
        "session_id": analysis.session_id,
        "out": out,
        "records": analysis.records.len(),
        "segments": { "total": analysis.accounting.total, "accepted": analysis.accounting.accepted, "rejected": analysis.accounting.rejected },
    }))
}

fn report(a: ReportArgs) -> Result<()> {
    let file = File::open(&a.records).with_context(|| format!("opening {}", a.records.display()))?;
    let records = read_records_csv(io::BufReader::new(file))?;
    let report = compare_modalities(&records)?;
    match a.out {
        Some(path) => {
            let mut w = create(&path)?;
            serde_json::to_writer_pretty(&mut w, &report)?;
            writeln!(w)?;
            w.flush()?;
            Ok(())
        }
        None => {
            let mut out = io::stdout().lock();
            serde_json::to_writer_pretty(&mut out, &report)?;
            writeln!(out)?;
            Ok(())
        }
    }
}

async fn broker(a: BrokerArgs) -> Result<()> {
    let broker = Broker::start(SocketAddr::new(a.bind, a.port)).await.context("starting the broker")?;
    tracing::info!(addr = %broker.local_addr(), "broker listening");
    print_json(&json!({ "event": "broker", "addr": broker.local_addr().to_string() }))?;
    shutdown_signal().await;
    broker.stop().await;
    Ok(())
}
