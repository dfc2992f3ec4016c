#![allow(dead_code)]

use std::path::Path;
use std::time::Duration;

use engage_core::synth::{cohort, render_participant, CohortSpec, ParticipantScript, SyntheticSession};
use engage_ingest::{IngestConfig, ParticipantConfig};

/// `n_per_group` participants per group, sorted by id, each exactly `eo + 1 + 2*block + 1`
/// seconds long (eyes-open baseline, two condition blocks, 1 s transitions).
pub fn sessions(n_per_group: usize, eo_s: f64, block_s: f64, seed: u64) -> (Vec<ParticipantScript>, Vec<SyntheticSession>) {
    let spec = CohortSpec { n_per_group, seed, eo_s, ec_s: 0.0, block_s, transition_s: 1.0, ..CohortSpec::default() };
    let mut scripts = cohort(&spec).unwrap();
    scripts.sort_by(|a, b| a.participant_id.cmp(&b.participant_id));
    let sessions = scripts.iter().map(|s| render_participant(s, 256.0).unwrap()).collect();
    (scripts, sessions)
}

pub fn config(dir: &Path, scripts: &[ParticipantScript]) -> IngestConfig {
    IngestConfig {
        session_id: "test".into(),
        out_dir: dir.to_path_buf(),
        udp_bind: "127.0.0.1".parse().unwrap(),
        udp_port: 0,
        live_port: None,
        participants: scripts
            .iter()
            .map(|s| ParticipantConfig { order: Some(s.order.clone()), ..ParticipantConfig::new(&s.participant_id, s.group) })
            .collect(),
        ..IngestConfig::default()
    }
}

/// Poll `f` every 20 ms until it holds or `secs` pass.
pub async fn eventually(secs: f64, mut f: impl FnMut() -> bool) -> bool {
    let deadline = tokio::time::Instant::now() + Duration::from_secs_f64(secs);
    while tokio::time::Instant::now() < deadline {
        if f() {
            return true;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    f()
}
