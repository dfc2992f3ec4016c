use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BaselineKind, SegmentLabel};
use crate::artifact::{
    run_ica_with, screen_segment, IcaConfig, IcaError, ReasonCounts, RemovalCriterion, Validation, MIN_VALID_SAMPLES,
};
use crate::engagement::{apply_z_pass, build_engagement_record, BaselineRecord, EngagementError, EngagementRecord};
use crate::recording::{
    read_stream, AccelRow, EegRow, EventKind, EventRow, ParticipantEntry, QualityRow, RecordingError, SessionManifest,
    StreamKind,
};
use crate::signal::{preprocess_with, split_contiguous, PreprocessConfig, Quality, SampleFrame, Segment};
use crate::spectral::{segment_band_powers, BandPowerTable};

/// Segments shorter than this are rejected before any processing.
pub const MIN_SEGMENT_S: f64 = 4.0;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Recording(#[from] RecordingError),
    #[error("participant {participant}: no accepted eyes-open baseline")]
    MissingBaseline { participant: String },
    #[error("empty session: {0}")]
    EmptySession(String),
    #[error("participant {participant}: {source}")]
    Engagement { participant: String, source: EngagementError },
    #[error("writing log: {0}")]
    Log(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub ica_seed: u64,
    pub run_ica: bool,
    pub ica: IcaConfig,
    pub preprocess: PreprocessConfig,
    pub min_segment_s: f64,
    pub min_valid_samples: usize,
    /// Skip (and log) participants without a usable EO baseline instead of
    /// failing the whole session.
    pub skip_missing_baseline: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            ica_seed: 0,
            run_ica: true,
            ica: IcaConfig::default(),
            preprocess: PreprocessConfig::default(),
            min_segment_s: MIN_SEGMENT_S,
            min_valid_samples: MIN_VALID_SAMPLES,
            skip_missing_baseline: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum RejectReason {
    /// The label is neither a baseline nor a condition.
    UnknownLabel,
    NoData,
    TooShort { duration_s: f64 },
    Preprocess { error: String },
    TooFewValid { valid_samples: usize },
    Artifact { error: String },
    Spectral { error: String },
    Engagement { error: String },
    /// The participant has no accepted EO baseline.
    NoBaseline,
}

/// Structured analysis log; written as JSON lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    SegmentAccepted {
        participant: String,
        segment_id: String,
        label: String,
        samples: usize,
        valid_samples: usize,
        counts: ReasonCounts,
        movement_checked: bool,
        ica_removed: Vec<usize>,
    },
    SegmentRejected {
        participant: String,
        segment_id: String,
        label: String,
        samples: usize,
        #[serde(flatten)]
        reason: RejectReason,
        counts: Option<ReasonCounts>,
    },
    /// Samples outside the longest contiguous run of a segment were dropped.
    SegmentTrimmed { participant: String, segment_id: String, kept: usize, dropped: usize },
    IcaRemoval { participant: String, segment_id: String, component: usize, criterion: RemovalCriterion },
    IcaSkipped { participant: String, segment_id: String, error: String },
    BaselineChosen { participant: String, segment_id: String, valid_samples: usize, candidates: usize },
    ParticipantSkipped { participant: String, error: String },
    ZPassDegenerate { error: String },
    /// The recorder never finalized the manifest or a file ends mid-row.
    RecordingIncomplete { partial_reason: Option<String>, truncated: Vec<String> },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentAccounting {
    pub total: usize,
    pub accepted: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionAnalysis {
    pub session_id: String,
    pub records: Vec<EngagementRecord>,
    pub baselines: Vec<BaselineRecord>,
    pub tables: Vec<BandPowerTable>,
    pub log: Vec<LogEvent>,
    pub accounting: SegmentAccounting,
}

impl SessionAnalysis {
    pub fn write_log<W: io::Write>(&self, mut w: W) -> io::Result<()> {
        for e in &self.log {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// One participant's streams as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticipantStreams {
    pub entry: ParticipantEntry,
    pub eeg: Vec<EegRow>,
    pub accel: Vec<AccelRow>,
    pub quality: Vec<QualityRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSession {
    pub dir: PathBuf,
    pub manifest: SessionManifest,
    pub participants: Vec<ParticipantStreams>,
    pub events: Vec<EventRow>,
    /// Stream files whose last line was torn by an interrupted write.
    pub truncated: Vec<String>,
}

/// Read the manifest and every stream it references.
pub fn load_session(manifest_path: &Path) -> Result<LoadedSession, AnalysisError> {
    let manifest = SessionManifest::load(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    for s in manifest.streams.values() {
        let p = dir.join(&s.path);
        if !p.is_file() {
            return Err(RecordingError::Io {
                path: p,
                source: io::Error::new(io::ErrorKind::NotFound, "stream file referenced by the manifest is missing"),
            }
            .into());
        }
    }
    let mut truncated = Vec::new();
    let mut note = |path: &str, torn: bool| {
        if torn {
            truncated.push(path.to_string());
        }
    };
    let events = read_stream::<EventRow>(&dir.join(&manifest.events_file))?;
    note(&manifest.events_file, events.truncated_tail);

    let mut participants = Vec::new();
    for entry in &manifest.participants {
        let id = &entry.participant_id;
        let path = |kind: StreamKind| -> Result<(PathBuf, String), AnalysisError> {
            let s = manifest.stream(kind, id).ok_or_else(|| {
                RecordingError::Invalid(format!("manifest has no {} stream for {id}", kind.as_str()))
            })?;
            Ok((dir.join(&s.path), s.path.clone()))
        };
        let (p, rel) = path(StreamKind::Eeg)?;
        let eeg = read_stream::<EegRow>(&p)?;
        note(&rel, eeg.truncated_tail);
        let (p, rel) = path(StreamKind::Accel)?;
        let accel = read_stream::<AccelRow>(&p)?;
        note(&rel, accel.truncated_tail);
        let (p, rel) = path(StreamKind::Quality)?;
        let quality = read_stream::<QualityRow>(&p)?;
        note(&rel, quality.truncated_tail);
        participants.push(ParticipantStreams { entry: entry.clone(), eeg: eeg.rows, accel: accel.rows, quality: quality.rows });
    }
    Ok(LoadedSession { dir, manifest, participants, events: events.rows, truncated })
}

/// A `[start, end)` stretch of reference time carrying one label.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkedSegment {
    pub segment_id: String,
    pub label_text: String,
    pub label: Option<SegmentLabel>,
    pub t_start: f64,
    pub t_end: f64,
}

/// Pair start/stop marks for one participant. A block without a stop ends
/// at the next start or, failing that, at the end of the data.
pub fn mark_segments(events: &[EventRow], participant: &str, data_end: f64) -> Vec<MarkedSegment> {
    let mut ev: Vec<&EventRow> = events
        .iter()
        .filter(|e| e.applies_to(participant) && matches!(e.kind, EventKind::StartBlock | EventKind::StopBlock))
        .collect();
    ev.sort_by(|a, b| a.t_ref.total_cmp(&b.t_ref));
    let mut out = Vec::new();
    let mut ordinal: BTreeMap<String, usize> = BTreeMap::new();
    let mut open: Option<&EventRow> = None;
    let mut close = |start: &EventRow, end: f64, out: &mut Vec<MarkedSegment>| {
        let n = ordinal.entry(start.label.clone()).or_insert(0);
        *n += 1;
        out.push(MarkedSegment {
            segment_id: format!("{participant}:{}:{n}", start.label),
            label_text: start.label.clone(),
            label: start.label.parse().ok(),
            t_start: start.t_ref,
            t_end: end,
        });
    };
    for e in ev {
        match e.kind {
            EventKind::StartBlock => {
                if let Some(s) = open.take() {
                    close(s, e.t_ref, &mut out);
                }
                open = Some(e);
            }
            EventKind::StopBlock => {
                if let Some(s) = open.take() {
                    close(s, e.t_ref, &mut out);
                }
            }
            _ => unreachable!("filtered above"),
        }
    }
    if let Some(s) = open {
        close(s, data_end.max(s.t_ref), &mut out);
    }
    out
}

/// EEG rows joined with forward-filled accelerometer and quality state,
/// re-timed per contiguous device-clock run.
///
/// Within a run the reference time is `device_ts + median(t_ref - device_ts)`,
/// which keeps the nominal sample spacing that online offset updates perturb.
pub fn build_frames(p: &ParticipantStreams, sample_rate: f64) -> Vec<SampleFrame> {
    let mut eeg = p.eeg.clone();
    eeg.sort_by(|a, b| a.device_ts.total_cmp(&b.device_ts));
    eeg.dedup_by(|b, a| a.device_ts == b.device_ts);

    // contiguous device runs, each with its own robust offset
    let period = 1.0 / sample_rate;
    let mut retimed: Vec<(f64, &EegRow)> = Vec::with_capacity(eeg.len());
    let mut start = 0;
    while start < eeg.len() {
        let mut end = start + 1;
        while end < eeg.len() {
            let gap = eeg[end].device_ts - eeg[end - 1].device_ts;
            if ((gap - period) / period).abs() >= Segment::MAX_GAP_DEVIATION {
                break;
            }
            end += 1;
        }
        let mut offsets: Vec<f64> = eeg[start..end].iter().map(|r| r.t_ref - r.device_ts).collect();
        offsets.sort_by(f64::total_cmp);
        let offset = offsets[offsets.len() / 2];
        retimed.extend(eeg[start..end].iter().map(|r| (r.device_ts + offset, r)));
        start = end;
    }
    retimed.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut accel = p.accel.iter().peekable();
    let mut quality = p.quality.iter().peekable();
    let mut acc_now: Option<f64> = None;
    let mut q_now = [Quality::Good; 4];
    let mut frames = Vec::with_capacity(retimed.len());
    for (t, r) in retimed {
        while let Some(a) = accel.next_if(|a| a.t_ref <= t) {
            acc_now = Some(a.magnitude);
        }
        while let Some(q) = quality.next_if(|q| q.t_ref <= t) {
            q_now = q.flags();
        }
        if t < 0.0 {
            continue;
        }
        frames.push(SampleFrame { t_ref: t, eeg: [r.tp9, r.af7, r.af8, r.tp10], device_quality: q_now, accel_mag: acc_now });
    }
    frames
}

struct Accepted {
    label: SegmentLabel,
    segment_id: String,
    table: BandPowerTable,
}

fn process_segment(
    participant: &str,
    marked: &MarkedSegment,
    frames: &[SampleFrame],
    sample_rate: f64,
    cfg: &AnalysisConfig,
    log: &mut Vec<LogEvent>,
) -> Option<Accepted> {
    let reject = |log: &mut Vec<LogEvent>, samples: usize, reason: RejectReason, counts: Option<ReasonCounts>| {
        log.push(LogEvent::SegmentRejected {
            participant: participant.to_string(),
            segment_id: marked.segment_id.clone(),
            label: marked.label_text.clone(),
            samples,
            reason,
            counts,
        });
        None
    };
    let Some(label) = marked.label else {
        return reject(log, 0, RejectReason::UnknownLabel, None);
    };
    let lo = frames.partition_point(|f| f.t_ref < marked.t_start);
    let hi = frames.partition_point(|f| f.t_ref < marked.t_end);
    if lo >= hi {
        return reject(log, 0, RejectReason::NoData, None);
    }
    let runs = split_contiguous(frames[lo..hi].to_vec(), sample_rate);
    let total = hi - lo;
    let longest = runs.into_iter().max_by_key(|r| r.len()).expect("non-empty range");
    if longest.len() < total {
        log.push(LogEvent::SegmentTrimmed {
            participant: participant.to_string(),
            segment_id: marked.segment_id.clone(),
            kept: longest.len(),
            dropped: total - longest.len(),
        });
    }
    let n = longest.len();
    let duration = n as f64 / sample_rate;
    if duration < cfg.min_segment_s {
        return reject(log, n, RejectReason::TooShort { duration_s: duration }, None);
    }
    let raw = match Segment::new(marked.segment_id.clone(), sample_rate, label, longest) {
        Ok(s) => s,
        Err(e) => return reject(log, n, RejectReason::Preprocess { error: e.to_string() }, None),
    };
    let cleaned = match preprocess_with(&raw, &cfg.preprocess) {
        Ok(s) => s,
        Err(e) => return reject(log, n, RejectReason::Preprocess { error: e.to_string() }, None),
    };
    let report = match screen_segment(&raw, &cleaned, cfg.min_valid_samples) {
        Ok(r) => r,
        Err(e) => return reject(log, n, RejectReason::Artifact { error: e.to_string() }, None),
    };
    let mask = match &report.validation {
        Validation::Accepted(m) => m.clone(),
        Validation::Rejected { valid_samples, .. } => {
            return reject(log, n, RejectReason::TooFewValid { valid_samples: *valid_samples }, Some(report.counts));
        }
    };

    let mut analyzed = cleaned;
    let mut removed = Vec::new();
    if cfg.run_ica {
        let ica_cfg = IcaConfig { seed: cfg.ica_seed, ..cfg.ica };
        match run_ica_with(&analyzed, &ica_cfg) {
            Ok(res) => {
                for (component, criterion) in res.rationale() {
                    log.push(LogEvent::IcaRemoval {
                        participant: participant.to_string(),
                        segment_id: marked.segment_id.clone(),
                        component,
                        criterion,
                    });
                }
                if !res.removed.is_empty() {
                    match res.cleaned(&analyzed) {
                        Ok(s) => analyzed = s,
                        Err(e) => log.push(LogEvent::IcaSkipped {
                            participant: participant.to_string(),
                            segment_id: marked.segment_id.clone(),
                            error: e.to_string(),
                        }),
                    }
                }
                removed = res.removed.clone();
            }
            Err(e @ (IcaError::NotConverged(_) | IcaError::IllConditioned(_) | IcaError::TooShort { .. })) => {
                log.push(LogEvent::IcaSkipped {
                    participant: participant.to_string(),
                    segment_id: marked.segment_id.clone(),
                    error: e.to_string(),
                });
            }
            Err(e) => return reject(log, n, RejectReason::Artifact { error: e.to_string() }, Some(report.counts)),
        }
    }

    let table = match segment_band_powers(&analyzed, &mask) {
        Ok(t) => t,
        Err(e) => return reject(log, n, RejectReason::Spectral { error: e.to_string() }, Some(report.counts)),
    };
    log.push(LogEvent::SegmentAccepted {
        participant: participant.to_string(),
        segment_id: marked.segment_id.clone(),
        label: marked.label_text.clone(),
        samples: n,
        valid_samples: mask.valid_sample_count(),
        counts: report.counts,
        movement_checked: report.movement_checked,
        ica_removed: removed,
    });
    Some(Accepted { label, segment_id: marked.segment_id.clone(), table })
}

/// Most valid samples wins; ties go to the earliest.
fn best<'a>(candidates: &[&'a Accepted]) -> Option<&'a Accepted> {
    candidates.iter().copied().reduce(|a, b| if b.table.valid_sample_count > a.table.valid_sample_count { b } else { a })
}

/// Run the full offline pipeline on a loaded session.
pub fn analyze_loaded(session: &LoadedSession, cfg: &AnalysisConfig) -> Result<SessionAnalysis, AnalysisError> {
    let fs = session.manifest.sample_rate;
    if session.participants.iter().all(|p| p.eeg.is_empty()) {
        return Err(AnalysisError::EmptySession("no EEG rows recorded".into()));
    }
    let mut log = Vec::new();
    if session.manifest.partial || !session.truncated.is_empty() {
        log.push(LogEvent::RecordingIncomplete {
            partial_reason: session.manifest.partial.then(|| session.manifest.partial_reason.clone().unwrap_or_default()),
            truncated: session.truncated.clone(),
        });
    }
    let mut accounting = SegmentAccounting::default();
    let mut records = Vec::new();
    let mut baselines = Vec::new();
    let mut tables = Vec::new();

    for p in &session.participants {
        let id = p.entry.participant_id.as_str();
        let frames = build_frames(p, fs);
        let data_end = frames.last().map_or(0.0, |f| f.t_ref + 1.0 / fs);
        let marked = mark_segments(&session.events, id, data_end);
        accounting.total += marked.len();

        let mut accepted: Vec<Accepted> = Vec::new();
        for m in &marked {
            match process_segment(id, m, &frames, fs, cfg, &mut log) {
                Some(a) => accepted.push(a),
                None => accounting.rejected += 1,
            }
        }

        let eo_candidates: Vec<&Accepted> =
            accepted.iter().filter(|a| a.label == SegmentLabel::Baseline(BaselineKind::EyesOpen)).collect();
        let Some(eo) = best(&eo_candidates) else {
            let err = AnalysisError::MissingBaseline { participant: id.to_string() };
            if !cfg.skip_missing_baseline {
                return Err(err);
            }
            log.push(LogEvent::ParticipantSkipped { participant: id.to_string(), error: err.to_string() });
            for a in &accepted {
                log.push(LogEvent::SegmentRejected {
                    participant: id.to_string(),
                    segment_id: a.segment_id.clone(),
                    label: a.label.to_string(),
                    samples: 0,
                    reason: RejectReason::NoBaseline,
                    counts: None,
                });
            }
            accounting.rejected += accepted.len();
            continue;
        };
        log.push(LogEvent::BaselineChosen {
            participant: id.to_string(),
            segment_id: eo.segment_id.clone(),
            valid_samples: eo.table.valid_sample_count,
            candidates: eo_candidates.len(),
        });
        let ec_candidates: Vec<&Accepted> =
            accepted.iter().filter(|a| a.label == SegmentLabel::Baseline(BaselineKind::EyesClosed)).collect();
        let ec = best(&ec_candidates).map(|a| a.table.clone());
        let baseline = BaselineRecord::new(id, p.entry.group, eo.table.clone(), ec)
            .map_err(|source| AnalysisError::Engagement { participant: id.to_string(), source })?;

        for a in &accepted {
            tables.push(a.table.clone());
            let Some(condition) = a.label.condition() else {
                accounting.accepted += 1;
                continue;
            };
            match build_engagement_record(&a.table, id, &baseline, condition) {
                Ok(r) => {
                    accounting.accepted += 1;
                    records.push(r);
                }
                Err(e) => {
                    // the segment log entry already says accepted; record the reversal
                    accounting.rejected += 1;
                    log.push(LogEvent::SegmentRejected {
                        participant: id.to_string(),
                        segment_id: a.segment_id.clone(),
                        label: a.label.to_string(),
                        samples: 0,
                        reason: RejectReason::Engagement { error: e.to_string() },
                        counts: None,
                    });
                }
            }
        }
        baselines.push(baseline);
    }
    if accounting.total == 0 {
        return Err(AnalysisError::EmptySession("no marked segments".into()));
    }
    for e in apply_z_pass(&mut records) {
        log.push(LogEvent::ZPassDegenerate { error: e.to_string() });
    }
    Ok(SessionAnalysis { session_id: session.manifest.session_id.clone(), records, baselines, tables, log, accounting })
}

/// Load and analyze the session behind `manifest_path`.
pub fn analyze_session(manifest_path: &Path, cfg: &AnalysisConfig) -> Result<SessionAnalysis, AnalysisError> {
    analyze_loaded(&load_session(manifest_path)?, cfg)
}
