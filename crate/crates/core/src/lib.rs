//! Wearable EEG engagement toolkit: filtering, artifact screening, band
//! powers, engagement indexes, statistics, session recording and synthesis.
//!
//! The shared data types are re-exported at the crate root.

pub mod artifact;
pub mod engagement;
pub mod osc;
pub mod recording;
pub mod session;
pub mod signal;
pub mod spectral;
pub mod stats;
pub mod sync;
pub mod synth;

pub use artifact::{ArtifactReport, QualityMask};
pub use engagement::{BaselineRecord, EngagementRecord, MotivationalTendency};
pub use recording::{EventKind, EventRow, EventSource, SessionManifest, StreamKind};
pub use session::{ConditionLabel, Group, Modality, SegmentLabel};
pub use signal::{Channel, Quality, SampleFrame, Segment, NOMINAL_SAMPLE_RATE};
pub use spectral::{Band, BandPowerTable};
pub use stats::{TestMethod, TestResult};
pub use sync::{ClockSync, ReferenceClock, SyncSummary};
