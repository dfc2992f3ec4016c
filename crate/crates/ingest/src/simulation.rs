//! The JSON file that drives `simulate`: what to replay and how.
//!
//! Exactly one source must be given:
//!
//! ```json
//! {
//!   "sample_rate": 256,
//!   "cohort": { "n_per_group": 2, "seed": 7, "eo_s": 30, "ec_s": 0, "block_s": 30 },
//!   "replay": { "rate": 1, "latency_s": [0.01, 0.05], "seed": 3 },
//!   "mqtt_url": "mqtt://127.0.0.1:1883"
//! }
//! ```
//!
//! `cohort` generates a counterbalanced synthetic cohort; `scripts` lists
//! hand-written participant scripts instead; `recording` points at a
//! `manifest.json` whose EEG, accelerometer, quality and events are replayed.
//! Omitted fields take the defaults of the corresponding Rust types.

use std::path::{Path, PathBuf};

use engage_core::recording::{ParticipantEntry, SessionManifest};
use engage_core::synth::{cohort, render_participant, CohortSpec, ParticipantScript, SyntheticSession};
use serde::{Deserialize, Serialize};

use crate::config::{parse_mqtt_url, ParticipantConfig};
use crate::replay::{sessions_from_recording, GazeTarget, ReplayConfig, ReplayError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSpec {
    pub sample_rate: f64,
    pub cohort: Option<CohortSpec>,
    pub scripts: Vec<ParticipantScript>,
    /// Relative paths resolve against the spec file's directory.
    pub recording: Option<PathBuf>,
    pub replay: ReplayConfig,
    /// Publish gaze to this broker; no gaze is sent when absent.
    pub mqtt_url: Option<String>,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        Self {
            sample_rate: 256.0,
            cohort: None,
            scripts: Vec::new(),
            recording: None,
            replay: ReplayConfig::default(),
            mqtt_url: None,
        }
    }
}

/// Everything needed to run one replay and to configure the receiving side.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub sessions: Vec<SyntheticSession>,
    pub participants: Vec<ParticipantConfig>,
    pub replay: ReplayConfig,
    pub gaze: Option<GazeTarget>,
}

impl SimulationSpec {
    pub fn load(path: &Path) -> Result<Self, ReplayError> {
        let text = std::fs::read_to_string(path).map_err(|e| ReplayError::Config(format!("{}: {e}", path.display())))?;
        let mut spec: Self = serde_json::from_str(&text).map_err(|e| ReplayError::Config(format!("{}: {e}", path.display())))?;
        if let (Some(rec), Some(base)) = (spec.recording.as_mut(), path.parent()) {
            if rec.is_relative() {
                *rec = base.join(&*rec);
            }
        }
        Ok(spec)
    }

    pub fn build(&self) -> Result<Simulation, ReplayError> {
        let sources = self.cohort.is_some() as u8 + !self.scripts.is_empty() as u8 + self.recording.is_some() as u8;
        if sources != 1 {
            return Err(ReplayError::Config("give exactly one of cohort, scripts or recording".into()));
        }
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return Err(ReplayError::Config(format!("bad sample_rate {}", self.sample_rate)));
        }
        let gaze = match &self.mqtt_url {
            Some(url) => {
                let (host, port) = parse_mqtt_url(url).map_err(|e| ReplayError::Config(e.to_string()))?;
                Some(GazeTarget { host, port })
            }
            None => None,
        };
        let (sessions, participants) = if let Some(manifest) = &self.recording {
            let entries = SessionManifest::load(manifest)?.participants;
            (sessions_from_recording(manifest)?, entries.iter().map(from_entry).collect())
        } else {
            let mut scripts = match &self.cohort {
                Some(c) => cohort(c).map_err(|e| ReplayError::Config(e.to_string()))?,
                None => self.scripts.clone(),
            };
            scripts.sort_by(|a, b| a.participant_id.cmp(&b.participant_id));
            let sessions = scripts
                .iter()
                .map(|s| render_participant(s, self.sample_rate))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| ReplayError::Config(e.to_string()))?;
            let participants = scripts
                .iter()
                .map(|s| ParticipantConfig { order: Some(s.order.clone()), ..ParticipantConfig::new(&s.participant_id, s.group) })
                .collect();
            (sessions, participants)
        };
        Ok(Simulation { sessions, participants, replay: self.replay.clone(), gaze })
    }
}

fn from_entry(e: &ParticipantEntry) -> ParticipantConfig {
    ParticipantConfig {
        order: Some(e.order.clone()),
        gaze_topic: Some(e.gaze_topic.clone()),
        ..ParticipantConfig::new(&e.participant_id, e.group)
    }
}
