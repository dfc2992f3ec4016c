//! Sample-level artifact detection, segment validity gating, and
//! conservative ICA-based component removal.
//!
//! Every threshold uses strict inequality: a sample exactly at 100 µV, or a
//! step of exactly 50 µV, passes.

mod ica;

pub use ica::{run_ica, run_ica_with, ComponentVerdict, IcaConfig, IcaError, IcaResult, RemovalCriterion};

use bitflags::bitflags;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::{Quality, Segment};

/// Amplitude limit in µV.
pub const AMPLITUDE_LIMIT_UV: f64 = 100.0;
/// Sample-to-sample step limit in µV.
pub const GRADIENT_LIMIT_UV: f64 = 50.0;
/// Percentile of accelerometer magnitude above which a frame is movement.
pub const MOVEMENT_PERCENTILE: f64 = 95.0;
/// Segments with fewer all-channel-valid samples are rejected.
pub const MIN_VALID_SAMPLES: usize = 100;
/// Fraction of frames that must carry an accelerometer reading.
pub const MIN_ACCEL_COVERAGE: f64 = 0.9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArtifactError {
    #[error("empty segment")]
    Empty,
    #[error("accelerometer present on {present} of {total} frames, need {:.0}%", MIN_ACCEL_COVERAGE * 100.0)]
    MissingAccel { present: usize, total: usize },
    #[error("segment too short: {len} samples, need at least {min}")]
    TooShort { len: usize, min: usize },
    #[error("mask shape mismatch: {0} vs {1} samples")]
    ShapeMismatch(usize, usize),
    #[error("no masks to combine")]
    NoMasks,
}

bitflags! {
    /// Why a sample/channel was excluded.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
    pub struct Reasons: u8 {
        const DEVICE_FLAG = 1;
        const MOVEMENT = 1 << 1;
        const AMPLITUDE = 1 << 2;
        const GRADIENT = 1 << 3;
    }
}

impl Reasons {
    pub fn names(self) -> Vec<&'static str> {
        self.iter_names().map(|(n, _)| match n {
            "DEVICE_FLAG" => "device_flag",
            "MOVEMENT" => "movement",
            "AMPLITUDE" => "amplitude",
            _ => "gradient",
        })
        .collect()
    }
}

/// Per-sample, per-channel exclusion reasons. A sample/channel is valid
/// exactly when its reason set is empty.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct QualityMask {
    reasons: Vec<[Reasons; 4]>,
}

impl QualityMask {
    pub fn all_valid(len: usize) -> Self {
        Self { reasons: vec![[Reasons::empty(); 4]; len] }
    }

    pub fn len(&self) -> usize {
        self.reasons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reasons.is_empty()
    }

    pub fn flag(&mut self, sample: usize, channel: usize, why: Reasons) {
        self.reasons[sample][channel] |= why;
    }

    pub fn reasons(&self, sample: usize, channel: usize) -> Reasons {
        self.reasons[sample][channel]
    }

    pub fn is_valid(&self, sample: usize, channel: usize) -> bool {
        self.reasons[sample][channel].is_empty()
    }

    /// Valid on all four channels.
    pub fn sample_valid(&self, sample: usize) -> bool {
        self.reasons[sample].iter().all(|r| r.is_empty())
    }

    pub fn channel_valid(&self, channel: usize) -> Vec<bool> {
        self.reasons.iter().map(|r| r[channel].is_empty()).collect()
    }

    pub fn valid_sample_count(&self) -> usize {
        (0..self.len()).filter(|&i| self.sample_valid(i)).count()
    }

    pub fn flagged_count(&self) -> usize {
        self.reasons.iter().flatten().filter(|r| !r.is_empty()).count()
    }

    /// Number of sample/channel cells carrying `why`.
    pub fn count_reason(&self, why: Reasons) -> usize {
        self.reasons.iter().flatten().filter(|r| r.contains(why)).count()
    }
}

/// Outcome of segment gating.
#[derive(Debug, Clone, PartialEq)]
pub enum Validation {
    Accepted(QualityMask),
    Rejected { mask: QualityMask, valid_samples: usize },
}

impl Validation {
    pub fn mask(&self) -> &QualityMask {
        match self {
            Validation::Accepted(m) | Validation::Rejected { mask: m, .. } => m,
        }
    }

    pub fn is_accepted(&self) -> bool {
        matches!(self, Validation::Accepted(_))
    }
}

/// Flag sample/channels the device reported as poor quality.
pub fn flag_device(seg: &Segment) -> QualityMask {
    let mut mask = QualityMask::all_valid(seg.len());
    for (i, f) in seg.frames().iter().enumerate() {
        for (c, q) in f.device_quality.iter().enumerate() {
            if *q == Quality::Poor {
                mask.flag(i, c, Reasons::DEVICE_FLAG);
            }
        }
    }
    mask
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], pct: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * pct / 100.0;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// Flag every channel of frames whose accelerometer magnitude strictly
/// exceeds the segment's 95th percentile. Frames without a reading take the
/// decision of the nearest preceding frame that has one.
pub fn flag_movement(seg: &Segment) -> Result<QualityMask, ArtifactError> {
    let total = seg.len();
    let readings: Vec<f64> = seg.frames().iter().filter_map(|f| f.accel_mag).collect();
    if total == 0 || (readings.len() as f64) < MIN_ACCEL_COVERAGE * total as f64 {
        return Err(ArtifactError::MissingAccel { present: readings.len(), total });
    }
    let threshold = percentile(&readings, MOVEMENT_PERCENTILE).expect("non-empty");
    let mut mask = QualityMask::all_valid(total);
    let mut moving = false;
    for (i, f) in seg.frames().iter().enumerate() {
        if let Some(a) = f.accel_mag {
            moving = a > threshold;
        }
        if moving {
            for c in 0..4 {
                mask.flag(i, c, Reasons::MOVEMENT);
            }
        }
    }
    Ok(mask)
}

/// Flag sample/channels with |value| above [`AMPLITUDE_LIMIT_UV`].
pub fn flag_amplitude(seg: &Segment) -> QualityMask {
    let mut mask = QualityMask::all_valid(seg.len());
    for (i, f) in seg.frames().iter().enumerate() {
        for (c, v) in f.eeg.iter().enumerate() {
            if v.abs() > AMPLITUDE_LIMIT_UV {
                mask.flag(i, c, Reasons::AMPLITUDE);
            }
        }
    }
    mask
}

/// Flag sample `i` when it differs from sample `i - 1` by more than
/// [`GRADIENT_LIMIT_UV`]. Sample 0 is never gradient-flagged.
pub fn flag_gradient(seg: &Segment) -> Result<QualityMask, ArtifactError> {
    if seg.len() < 2 {
        return Err(ArtifactError::TooShort { len: seg.len(), min: 2 });
    }
    let mut mask = QualityMask::all_valid(seg.len());
    for (i, w) in seg.frames().windows(2).enumerate() {
        for c in 0..4 {
            if (w[1].eeg[c] - w[0].eeg[c]).abs() > GRADIENT_LIMIT_UV {
                mask.flag(i + 1, c, Reasons::GRADIENT);
            }
        }
    }
    Ok(mask)
}

/// Union the masks and reject when fewer than `min_valid` samples are valid
/// on all four channels.
pub fn combine_and_validate(masks: &[QualityMask], min_valid: usize) -> Result<Validation, ArtifactError> {
    let first = masks.first().ok_or(ArtifactError::NoMasks)?;
    let mut combined = first.clone();
    for m in &masks[1..] {
        if m.len() != combined.len() {
            return Err(ArtifactError::ShapeMismatch(combined.len(), m.len()));
        }
        for (dst, src) in combined.reasons.iter_mut().zip(&m.reasons) {
            for c in 0..4 {
                dst[c] |= src[c];
            }
        }
    }
    let valid_samples = combined.valid_sample_count();
    Ok(if valid_samples < min_valid {
        Validation::Rejected { mask: combined, valid_samples }
    } else {
        Validation::Accepted(combined)
    })
}

/// All four criteria; movement is skipped (and reported) when the segment
/// lacks accelerometer coverage.
#[derive(Debug, Clone)]
pub struct ArtifactReport {
    pub validation: Validation,
    pub movement_checked: bool,
    pub counts: ReasonCounts,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonCounts {
    pub device_flag: usize,
    pub movement: usize,
    pub amplitude: usize,
    pub gradient: usize,
}

/// Run every criterion on `raw` (device flags, movement) and `cleaned`
/// (amplitude, gradient), then gate the segment.
pub fn screen_segment(raw: &Segment, cleaned: &Segment, min_valid: usize) -> Result<ArtifactReport, ArtifactError> {
    if raw.is_empty() {
        return Err(ArtifactError::Empty);
    }
    let mut masks = vec![flag_device(raw), flag_amplitude(cleaned), flag_gradient(cleaned)?];
    let movement_checked = match flag_movement(raw) {
        Ok(m) => {
            masks.push(m);
            true
        }
        Err(ArtifactError::MissingAccel { .. }) => false,
        Err(e) => return Err(e),
    };
    let validation = combine_and_validate(&masks, min_valid)?;
    let mask = validation.mask();
    let counts = ReasonCounts {
        device_flag: mask.count_reason(Reasons::DEVICE_FLAG),
        movement: mask.count_reason(Reasons::MOVEMENT),
        amplitude: mask.count_reason(Reasons::AMPLITUDE),
        gradient: mask.count_reason(Reasons::GRADIENT),
    };
    Ok(ArtifactReport { validation, movement_checked, counts })
}
