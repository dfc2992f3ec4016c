mod common;

use std::sync::Arc;
use std::time::Duration;

use engage_core::recording::{read_stream, EegRow, EventKind, EventRow, EventSource, GazeRow, QualityRow, SessionManifest, StreamKind, MANIFEST_FILE};
use engage_core::sync::SystemClock;
use engage_ingest::replay::{ReplayConfig, ReplayError, Replayer};
use engage_ingest::{start, IngestConfig, IngestError};

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn ten_second_two_participant_replay_is_recorded_completely() {
    let dir = tempfile::tempdir().unwrap();
    let (scripts, sessions) = common::sessions(1, 4.0, 2.0, 11);
    assert_eq!(sessions.len(), 2);
    assert!(sessions.iter().all(|s| s.frames.len() == 2560));
    let session = start(common::config(dir.path(), &scripts), Arc::new(SystemClock)).await.unwrap();

    // the manifest exists and says partial from the first moment
    let early = SessionManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert!(early.partial && early.finalized_at.is_none());

    let cfg = ReplayConfig { latency_s: [0.010, 0.050], seed: 5, ..ReplayConfig::default() };
    let replayer = Replayer::new(session.udp_addr(), sessions.clone(), cfg).unwrap();
    let summary = tokio::task::spawn_blocking(move || replayer.run(None)).await.unwrap().unwrap();
    assert_eq!(summary.frames, 2 * 2560);
    assert!(summary.wall_s > 9.5 && summary.wall_s < 12.0, "{summary:?}");
    tokio::time::sleep(Duration::from_millis(300)).await;
    let stats = session.stats();
    let manifest = session.finish().await.unwrap();

    assert!(!manifest.partial, "{:?}", manifest.partial_reason);
    assert!(manifest.finalized_at.is_some());
    assert_eq!(stats.intake.parse_errors + stats.intake.mapping_errors + stats.intake.unattributed, 0, "{stats:?}");
    let events = read_stream::<EventRow>(&dir.path().join("events.csv")).unwrap().rows;

    for (script, synthetic) in scripts.iter().zip(&sessions) {
        let id = script.participant_id.as_str();
        let eeg = read_stream::<EegRow>(&dir.path().join(&manifest.stream(StreamKind::Eeg, id).unwrap().path)).unwrap();
        let rows = eeg.rows.len() as f64;
        assert!((rows - 2560.0).abs() <= 0.02 * 2560.0, "{id}: {rows} rows");
        // manifest row counts equal what is on disk
        assert_eq!(manifest.stream(StreamKind::Eeg, id).unwrap().rows, eeg.rows.len() as u64);
        let quality = read_stream::<QualityRow>(&dir.path().join(format!("quality_{id}.csv"))).unwrap().rows;
        assert_eq!(manifest.stream(StreamKind::Quality, id).unwrap().rows, quality.len() as u64);
        // re-sorted into device order, reference time monotone
        assert!(eeg.rows.windows(2).all(|w| w[0].device_ts < w[1].device_ts && w[0].t_ref < w[1].t_ref));
        // values survive the f32 wire format
        for (row, frame) in eeg.rows.iter().zip(&synthetic.frames).step_by(97) {
            assert!((row.tp9 - frame.eeg[0]).abs() <= 1e-5 * frame.eeg[0].abs().max(1.0));
        }

        let sync = &manifest.sync[&format!("eeg/{id}")];
        assert!(sync.converged, "{id}: {sync:?}");
        assert!((0.010..=0.050).contains(&sync.offset), "{id}: offset {} outside the injected latency band", sync.offset);

        // no broker configured: the gaze file is header-only
        let gaze = read_stream::<GazeRow>(&dir.path().join(format!("gaze_{id}.csv"))).unwrap();
        assert!(gaze.rows.is_empty() && !gaze.truncated_tail);

        let mine: Vec<_> = events.iter().filter(|e| e.participant == id).collect();
        let blocks: Vec<_> = mine.iter().map(|e| (e.kind, e.label.clone())).collect();
        let mut expected = Vec::new();
        for part in &script.parts {
            expected.push((EventKind::StartBlock, part.label.to_string()));
            expected.push((EventKind::StopBlock, part.label.to_string()));
        }
        assert_eq!(blocks, expected, "{id}");
        assert!(mine.iter().all(|e| e.source == EventSource::Osc && e.device_ts.is_some()));
    }
    assert_eq!(events.len(), scripts.iter().map(|s| 2 * s.parts.len()).sum::<usize>());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn participants_are_told_apart_by_source_address() {
    let dir = tempfile::tempdir().unwrap();
    let (scripts, sessions) = common::sessions(1, 1.0, 0.5, 3);
    let mut cfg = common::config(dir.path(), &scripts);
    let replay = ReplayConfig { prefix: false, rate: 4.0, timetags: false, latency_s: [0.0, 0.0], ..ReplayConfig::default() };
    // bind the senders first so their addresses can go into the config
    let probe = tokio::net::UdpSocket::bind("127.0.0.1:0").await.unwrap();
    let target = probe.local_addr().unwrap();
    drop(probe);
    cfg.udp_port = target.port();
    let replayer = Replayer::new(target, sessions.clone(), replay).unwrap();
    for (id, addr) in replayer.source_addrs() {
        let p = cfg.participants.iter_mut().find(|p| p.id == id).unwrap();
        p.osc_source = Some(format!("127.0.0.1:{}", addr.port()));
    }
    let session = start(cfg, Arc::new(SystemClock)).await.unwrap();
    tokio::task::spawn_blocking(move || replayer.run(None)).await.unwrap().unwrap();
    tokio::time::sleep(Duration::from_millis(200)).await;
    let manifest = session.finish().await.unwrap();
    assert!(!manifest.partial, "{:?}", manifest.partial_reason);
    for s in &sessions {
        let rows = read_stream::<EegRow>(&dir.path().join(format!("eeg_{}.csv", s.participant_id))).unwrap().rows;
        assert_eq!(rows.len(), s.frames.len());
        // untimed datagrams fall back to sample counting
        assert!((rows[10].device_ts - 10.0 / 256.0).abs() < 1e-12);
        assert!((rows[10].af7 - s.frames[10].eeg[1]).abs() < 1e-4);
    }
}

#[test]
fn unreachable_target_is_reported_before_sending() {
    let (_, sessions) = common::sessions(1, 1.0, 0.5, 1);
    let port = std::net::UdpSocket::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let replayer = Replayer::new(format!("127.0.0.1:{port}").parse().unwrap(), sessions, ReplayConfig::default()).unwrap();
    match replayer.run(None) {
        Err(ReplayError::Unreachable { .. }) => {}
        other => panic!("expected unreachable, got {other:?}"),
    }
}

#[tokio::test]
async fn unwritable_directory_fails_at_start() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain-file");
    std::fs::write(&file, b"x").unwrap();
    let (scripts, _) = common::sessions(1, 1.0, 0.5, 1);
    let cfg: IngestConfig = common::config(&file.join("session"), &scripts);
    let err = start(cfg, Arc::new(SystemClock)).await.err().expect("start must fail");
    assert!(matches!(err, IngestError::Io { .. } | IngestError::Recording(_)), "{err}");
    assert!(!file.join("session").exists());
}

#[tokio::test]
async fn garbage_datagrams_are_counted_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let (scripts, _) = common::sessions(1, 1.0, 0.5, 1);
    let session = start(common::config(dir.path(), &scripts[..1]), Arc::new(SystemClock)).await.unwrap();
    let sock = tokio::net::UdpSocket::bind("127.0.0.1:0").await.unwrap();
    sock.send_to(b"not osc at all", session.udp_addr()).await.unwrap();
    let unmapped = engage_core::osc::encode(&engage_core::osc::OscPacket::Message(engage_core::osc::OscMessage::new("/muse/batt", vec![])));
    sock.send_to(&unmapped, session.udp_addr()).await.unwrap();
    let bad_arity = engage_core::osc::encode(&engage_core::osc::OscPacket::Message(engage_core::osc::OscMessage::new(
        "/P01/muse/eeg",
        vec![engage_core::osc::OscType::Float(1.0)],
    )));
    sock.send_to(&bad_arity, session.udp_addr()).await.unwrap();
    assert!(common::eventually(5.0, || session.stats().intake.datagrams == 3).await);
    let s = session.stats().intake;
    assert_eq!((s.parse_errors, s.unmapped, s.mapping_errors), (1, 1, 1));
    let manifest = session.finish().await.unwrap();
    assert!(!manifest.partial);
    assert!(manifest.streams.values().all(|s| s.rows == 0));
}
