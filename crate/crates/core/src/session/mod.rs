//! Experiment protocol, offline analysis orchestration and modality contrasts.

mod analysis;
mod contrast;
mod protocol;

pub use analysis::{
    analyze_loaded, analyze_session, build_frames, load_session, mark_segments, AnalysisConfig, AnalysisError, LoadedSession,
    LogEvent, MarkedSegment, ParticipantStreams, RejectReason, SegmentAccounting, SessionAnalysis, MIN_SEGMENT_S,
};
pub use contrast::{
    compare_modalities, contrast_family, ContrastError, ContrastReport, ContrastResult, ContrastSpec, Family, Metric, Unit,
    ALPHA, NO_RELIABLE_MODULATION, REPORT_SCHEMA, REPORT_VERSION,
};

pub use protocol::{
    counterbalance, BaselineKind, ConditionLabel, Counterbalance, Group, GroupAssignment, Modality, Posture,
    SegmentLabel,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("invalid group assignment: {0}")]
    InvalidAssignment(String),
}
