//! Service configuration, read from TOML or JSON and overridable by flags.

use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};

use engage_core::osc::AddressMap;
use engage_core::recording::ParticipantEntry;
use engage_core::session::{Group, GroupAssignment, Modality};
use serde::{Deserialize, Serialize};

use crate::IngestError;

pub const DEFAULT_UDP_PORT: u16 = 5000;
pub const DEFAULT_LIVE_PORT: u16 = 8080;
pub const DEFAULT_MQTT_PORT: u16 = 1883;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticipantConfig {
    pub id: String,
    pub group: Group,
    /// Presentation order; original artwork first when absent.
    #[serde(default)]
    pub order: Option<Vec<Modality>>,
    /// `ip:port` of this participant's OSC bridge, for sources that do not
    /// prefix addresses with `/<id>`.
    #[serde(default)]
    pub osc_source: Option<String>,
    /// Defaults to `gaze/<id>`.
    #[serde(default)]
    pub gaze_topic: Option<String>,
}

impl ParticipantConfig {
    pub fn new(id: impl Into<String>, group: Group) -> Self {
        Self { id: id.into(), group, order: None, osc_source: None, gaze_topic: None }
    }

    pub fn order(&self) -> Vec<Modality> {
        self.order.clone().unwrap_or_else(|| vec![Modality::OriginalArtwork, self.group.interpretive()])
    }

    pub fn gaze_topic(&self) -> String {
        self.gaze_topic.clone().unwrap_or_else(|| format!("gaze/{}", self.id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiveConfig {
    pub rate_hz: f64,
    /// Length of the trace window sent to clients.
    pub trace_s: f64,
    /// Window for rolling band powers, FAA and arousal.
    pub window_s: f64,
    /// Window for per-channel validity rates.
    pub validity_s: f64,
    pub max_trace_points: usize,
    /// Frames a client may fall behind before it is disconnected.
    pub client_queue: usize,
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self { rate_hz: 10.0, trace_s: 5.0, window_s: 4.0, validity_s: 10.0, max_trace_points: 512, client_queue: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub session_id: String,
    pub out_dir: PathBuf,
    pub udp_bind: IpAddr,
    pub udp_port: u16,
    pub live_bind: IpAddr,
    /// No WebSocket server when absent.
    pub live_port: Option<u16>,
    /// `mqtt://host[:port]`; gaze intake is off when absent.
    pub mqtt_url: Option<String>,
    pub sample_rate: f64,
    pub participants: Vec<ParticipantConfig>,
    pub address_map: AddressMap,
    /// Rows are held this long (device seconds) to undo reordering.
    pub resort_window_s: f64,
    /// Capacity of each recorder queue.
    pub queue_capacity: usize,
    pub live: LiveConfig,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            session_id: "session".into(),
            out_dir: PathBuf::from("recordings"),
            udp_bind: IpAddr::V4(Ipv4Addr::UNSPECIFIED),
            udp_port: DEFAULT_UDP_PORT,
            live_bind: IpAddr::V4(Ipv4Addr::LOCALHOST),
            live_port: Some(DEFAULT_LIVE_PORT),
            mqtt_url: None,
            sample_rate: engage_core::NOMINAL_SAMPLE_RATE,
            participants: Vec::new(),
            address_map: AddressMap::default(),
            resort_window_s: 0.1,
            queue_capacity: 8192,
            live: LiveConfig::default(),
        }
    }
}

impl IngestConfig {
    /// JSON when the extension is `.json`, TOML otherwise.
    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| IngestError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            serde_json::from_str(&text).map_err(|e| IngestError::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| IngestError::Config(format!("{}: {e}", path.display())))?
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let bad = |m: String| Err(IngestError::Config(m));
        if self.participants.is_empty() {
            return bad("no participants configured".into());
        }
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return bad(format!("sample rate {} must be positive", self.sample_rate));
        }
        if !(self.resort_window_s.is_finite() && self.resort_window_s >= 0.0) {
            return bad("resort window must be non-negative".into());
        }
        if self.queue_capacity == 0 || self.live.client_queue == 0 {
            return bad("queue capacities must be positive".into());
        }
        if !(self.live.rate_hz > 0.0 && self.live.trace_s > 0.0 && self.live.window_s > 0.0 && self.live.validity_s > 0.0) {
            return bad("live rates and windows must be positive".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.participants {
            if p.id.is_empty() || p.id.contains(['/', ',', '"']) {
                return bad(format!("participant id {:?} must be non-empty without '/', ',' or '\"'", p.id));
            }
            if !seen.insert(&p.id) {
                return bad(format!("participant {} listed twice", p.id));
            }
            GroupAssignment::new(&p.id, p.group, p.order()).map_err(|e| IngestError::Config(e.to_string()))?;
            if let Some(src) = &p.osc_source {
                src.parse::<SocketAddr>().map_err(|e| IngestError::Config(format!("{}: osc_source {src:?}: {e}", p.id)))?;
            }
        }
        if self.mqtt_url.is_some() {
            self.mqtt_endpoint()?;
        }
        Ok(())
    }

    pub fn manifest_participants(&self) -> Vec<ParticipantEntry> {
        self.participants
            .iter()
            .map(|p| ParticipantEntry {
                participant_id: p.id.clone(),
                group: p.group,
                order: p.order(),
                osc_source: p.osc_source.clone(),
                gaze_topic: p.gaze_topic(),
            })
            .collect()
    }

    /// Host and port of the MQTT broker, if configured.
    pub fn mqtt_endpoint(&self) -> Result<Option<(String, u16)>, IngestError> {
        self.mqtt_url.as_deref().map(parse_mqtt_url).transpose()
    }
}

/// Accepts `mqtt://host:port`, `tcp://host:port` or a bare `host[:port]`.
pub fn parse_mqtt_url(url: &str) -> Result<(String, u16), IngestError> {
    let rest = url.strip_prefix("mqtt://").or_else(|| url.strip_prefix("tcp://")).unwrap_or(url);
    let rest = rest.trim_end_matches('/');
    let (host, port) = match rest.rsplit_once(':') {
        Some((h, p)) => (h, p.parse::<u16>().map_err(|_| IngestError::Config(format!("bad MQTT port in {url:?}")))?),
        None => (rest, DEFAULT_MQTT_PORT),
    };
    if host.is_empty() || rest.contains("://") {
        return Err(IngestError::Config(format!("bad MQTT url {url:?}")));
    }
    Ok((host.to_string(), port))
}
