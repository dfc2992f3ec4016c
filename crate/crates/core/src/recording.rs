//! On-disk session layout: one CSV per stream, an events file and a JSON
//! manifest written atomically.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::{ConditionLabel, Group, Modality, SegmentLabel};
use crate::signal::Quality;
use crate::sync::SyncSummary;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EVENTS_FILE: &str = "events.csv";
pub const MANIFEST_SCHEMA: &str = "engage.session-manifest";
pub const MANIFEST_VERSION: u32 = 1;
/// Upper bound on how long a row may sit in a writer buffer.
pub const FLUSH_INTERVAL: Duration = Duration::from_secs(1);

#[derive(Debug, Error)]
pub enum RecordingError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: header {found:?} does not match {expected:?}")]
    Header { path: PathBuf, found: Vec<String>, expected: Vec<String> },
    #[error("invalid manifest: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RecordingError + '_ {
    move |source| RecordingError::Io { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> RecordingError + '_ {
    move |source| RecordingError::Csv { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Eeg,
    Accel,
    Quality,
    Optics,
    Gaze,
}

impl StreamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StreamKind::Eeg => "eeg",
            StreamKind::Accel => "accel",
            StreamKind::Quality => "quality",
            StreamKind::Optics => "optics",
            StreamKind::Gaze => "gaze",
        }
    }

    pub fn stream_id(self, participant: &str) -> String {
        format!("{}/{participant}", self.as_str())
    }

    pub fn file_name(self, participant: &str) -> String {
        format!("{}_{participant}.csv", self.as_str())
    }
}

/// A row type with a fixed CSV header.
pub trait StreamRow: Serialize + DeserializeOwned {
    const HEADER: &'static [&'static str];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EegRow {
    pub t_ref: f64,
    pub device_ts: f64,
    pub tp9: f64,
    pub af7: f64,
    pub af8: f64,
    pub tp10: f64,
}

impl StreamRow for EegRow {
    const HEADER: &'static [&'static str] = &["t_ref", "device_ts", "tp9", "af7", "af8", "tp10"];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccelRow {
    pub t_ref: f64,
    pub device_ts: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub magnitude: f64,
}

impl StreamRow for AccelRow {
    const HEADER: &'static [&'static str] = &["t_ref", "device_ts", "x", "y", "z", "magnitude"];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub t_ref: f64,
    pub device_ts: f64,
    pub tp9: Quality,
    pub af7: Quality,
    pub af8: Quality,
    pub tp10: Quality,
}

impl StreamRow for QualityRow {
    const HEADER: &'static [&'static str] = &["t_ref", "device_ts", "tp9", "af7", "af8", "tp10"];
}

impl QualityRow {
    pub fn flags(&self) -> [Quality; 4] {
        [self.tp9, self.af7, self.af8, self.tp10]
    }
}

/// Raw optical channels, passed through as `;`-separated values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpticsRow {
    pub t_ref: f64,
    pub device_ts: f64,
    pub values: String,
}

impl StreamRow for OpticsRow {
    const HEADER: &'static [&'static str] = &["t_ref", "device_ts", "values"];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeRow {
    pub t_ref: f64,
    pub device_ts: f64,
    pub gaze_x: f64,
    pub gaze_y: f64,
    pub confidence: f64,
}

impl StreamRow for GazeRow {
    const HEADER: &'static [&'static str] = &["t_ref", "device_ts", "gaze_x", "gaze_y", "confidence"];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    StartBlock,
    StopBlock,
    Mark,
    /// A stream lost its source; `label` names the stream.
    Gap,
    Reconnect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventSource {
    Operator,
    Osc,
    System,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRow {
    pub t_ref: f64,
    pub device_ts: Option<f64>,
    /// Empty when the event applies to every participant.
    pub participant: String,
    pub kind: EventKind,
    pub label: String,
    pub source: EventSource,
}

impl StreamRow for EventRow {
    const HEADER: &'static [&'static str] = &["t_ref", "device_ts", "participant", "kind", "label", "source"];
}

impl EventRow {
    pub fn applies_to(&self, participant: &str) -> bool {
        self.participant.is_empty() || self.participant == participant
    }
}

/// Single-owner appender for one stream file. The header is written on
/// creation, so a stream that never receives data is a header-only file.
pub struct CsvStream<R: StreamRow> {
    path: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
    rows: u64,
    last_flush: Instant,
    _row: PhantomData<R>,
}

impl<R: StreamRow> CsvStream<R> {
    pub fn create(path: impl Into<PathBuf>) -> Result<Self, RecordingError> {
        let path = path.into();
        let file = File::create(&path).map_err(io_err(&path))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(file));
        writer.write_record(R::HEADER).map_err(csv_err(&path))?;
        writer.flush().map_err(io_err(&path))?;
        Ok(Self { path, writer, rows: 0, last_flush: Instant::now(), _row: PhantomData })
    }

    pub fn append(&mut self, row: &R) -> Result<(), RecordingError> {
        self.writer.serialize(row).map_err(csv_err(&self.path))?;
        self.rows += 1;
        if self.last_flush.elapsed() >= FLUSH_INTERVAL {
            self.flush()?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), RecordingError> {
        self.writer.flush().map_err(io_err(&self.path))?;
        self.last_flush = Instant::now();
        Ok(())
    }

    /// Flush if the interval has elapsed; for idle streams driven by a timer.
    pub fn flush_if_due(&mut self) -> Result<(), RecordingError> {
        if self.last_flush.elapsed() >= FLUSH_INTERVAL {
            self.flush()?;
        }
        Ok(())
    }

    pub fn rows(&self) -> u64 {
        self.rows
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamContents<R> {
    pub rows: Vec<R>,
    /// A trailing unterminated line (interrupted write) was dropped.
    pub truncated_tail: bool,
}

/// Read a stream file, tolerating one torn trailing line.
pub fn read_stream<R: StreamRow>(path: &Path) -> Result<StreamContents<R>, RecordingError> {
    let mut text = fs::read_to_string(path).map_err(io_err(path))?;
    let truncated_tail = !text.is_empty() && !text.ends_with('\n');
    if truncated_tail {
        let keep = text.rfind('\n').map_or(0, |i| i + 1);
        text.truncate(keep);
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let found: Vec<String> = reader.headers().map_err(csv_err(path))?.iter().map(str::to_string).collect();
    let expected: Vec<String> = R::HEADER.iter().map(|s| s.to_string()).collect();
    if found != expected {
        // an empty file means the header itself was torn
        if !(found.is_empty() && truncated_tail) {
            return Err(RecordingError::Header { path: path.to_path_buf(), found, expected });
        }
    }
    let rows = reader.deserialize().collect::<Result<Vec<R>, _>>().map_err(csv_err(path))?;
    Ok(StreamContents { rows, truncated_tail })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantEntry {
    pub participant_id: String,
    pub group: Group,
    pub order: Vec<Modality>,
    /// OSC source endpoint ("ip:port") that identifies this participant's
    /// headband bridge, when it does not send `/<participant>`-prefixed paths.
    #[serde(default)]
    pub osc_source: Option<String>,
    pub gaze_topic: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEntry {
    pub kind: StreamKind,
    pub participant: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub rows: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub schema: String,
    pub version: u32,
    pub session_id: String,
    pub created_at: String,
    pub finalized_at: Option<String>,
    /// Set from the first write until a clean finalize; a manifest still
    /// carrying it after the recorder exits marks an interrupted session.
    pub partial: bool,
    pub partial_reason: Option<String>,
    pub sample_rate: f64,
    pub participants: Vec<ParticipantEntry>,
    pub condition_plan: Vec<ConditionLabel>,
    pub events_file: String,
    pub streams: BTreeMap<String, StreamEntry>,
    pub sync: BTreeMap<String, SyncSummary>,
}

impl SessionManifest {
    pub fn new(session_id: impl Into<String>, sample_rate: f64, participants: Vec<ParticipantEntry>) -> Self {
        let mut condition_plan: Vec<ConditionLabel> = Vec::new();
        for p in &participants {
            for (i, m) in p.order.iter().enumerate() {
                let label = ConditionLabel::new(*m, i as u8 + 1).expect("orders hold at most three modalities");
                if !condition_plan.contains(&label) {
                    condition_plan.push(label);
                }
            }
        }
        let mut streams = BTreeMap::new();
        for p in &participants {
            for kind in [StreamKind::Eeg, StreamKind::Accel, StreamKind::Quality, StreamKind::Optics, StreamKind::Gaze] {
                streams.insert(
                    kind.stream_id(&p.participant_id),
                    StreamEntry {
                        kind,
                        participant: p.participant_id.clone(),
                        path: kind.file_name(&p.participant_id),
                        rows: 0,
                    },
                );
            }
        }
        Self {
            schema: MANIFEST_SCHEMA.into(),
            version: MANIFEST_VERSION,
            session_id: session_id.into(),
            created_at: chrono::Utc::now().to_rfc3339(),
            finalized_at: None,
            partial: true,
            partial_reason: None,
            sample_rate,
            participants,
            condition_plan,
            events_file: EVENTS_FILE.into(),
            streams,
            sync: BTreeMap::new(),
        }
    }

    pub fn participant(&self, id: &str) -> Option<&ParticipantEntry> {
        self.participants.iter().find(|p| p.participant_id == id)
    }

    pub fn stream(&self, kind: StreamKind, participant: &str) -> Option<&StreamEntry> {
        self.streams.get(&kind.stream_id(participant))
    }

    pub fn load(path: &Path) -> Result<Self, RecordingError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let m: Self = serde_json::from_str(&text).map_err(|source| RecordingError::Json { path: path.to_path_buf(), source })?;
        if m.schema != MANIFEST_SCHEMA || m.version != MANIFEST_VERSION {
            return Err(RecordingError::Invalid(format!("unsupported schema {} v{}", m.schema, m.version)));
        }
        Ok(m)
    }

    /// Write to `path` through a temporary sibling and a rename, so readers
    /// never see a half-written manifest.
    pub fn write_atomic(&self, path: &Path) -> Result<(), RecordingError> {
        let tmp = path.with_extension("json.tmp");
        let json = serde_json::to_vec_pretty(self).map_err(|source| RecordingError::Json { path: tmp.clone(), source })?;
        {
            let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
            f.write_all(&json).map_err(io_err(&tmp))?;
            f.write_all(b"\n").map_err(io_err(&tmp))?;
            f.sync_all().map_err(io_err(&tmp))?;
        }
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    /// Finalize-time checks: referenced files exist and every block label
    /// in the events file is a baseline or part of the condition plan.
    pub fn validate(&self, dir: &Path) -> Result<(), RecordingError> {
        for s in self.streams.values() {
            let p = dir.join(&s.path);
            if !p.is_file() {
                return Err(RecordingError::Invalid(format!("stream file {} missing", p.display())));
            }
        }
        let events_path = dir.join(&self.events_file);
        let events = read_stream::<EventRow>(&events_path)?;
        for e in events.rows.iter().filter(|e| e.kind == EventKind::StartBlock) {
            match e.label.parse::<SegmentLabel>() {
                Ok(SegmentLabel::Baseline(_)) => {}
                Ok(SegmentLabel::Condition(c)) if self.condition_plan.contains(&c) => {}
                _ => return Err(RecordingError::Invalid(format!("event label {:?} is not in the condition plan", e.label))),
            }
        }
        Ok(())
    }
}
