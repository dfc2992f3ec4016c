//! Core time-series types and the filtering front end.

mod filter;

pub use filter::{
    apply_zero_phase, design_bandpass, design_lowpass, design_notch, preprocess, preprocess_with, FilterCoefficients,
    FilterKind, FilterSpec, PreprocessConfig, Sos,
};

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::SegmentLabel;

/// Nominal headband sample rate.
pub const NOMINAL_SAMPLE_RATE: f64 = 256.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("invalid filter spec: {0}")]
    InvalidSpec(String),
    #[error("input too short: {len} samples, need more than {min}")]
    TooShort { len: usize, min: usize },
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("invalid segment: {0}")]
    InvalidSegment(String),
}

/// Headband electrode positions, in recording order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    #[serde(rename = "TP9")]
    Tp9,
    #[serde(rename = "AF7")]
    Af7,
    #[serde(rename = "AF8")]
    Af8,
    #[serde(rename = "TP10")]
    Tp10,
}

impl Channel {
    pub const ALL: [Channel; 4] = [Channel::Tp9, Channel::Af7, Channel::Af8, Channel::Tp10];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Tp9 => "TP9",
            Channel::Af7 => "AF7",
            Channel::Af8 => "AF8",
            Channel::Tp10 => "TP10",
        }
    }

    pub fn is_frontal(self) -> bool {
        matches!(self, Channel::Af7 | Channel::Af8)
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Device-reported contact quality for one channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    #[default]
    Good,
    Poor,
}

/// One timestamped multi-channel EEG reading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFrame {
    /// Seconds on the shared reference clock.
    pub t_ref: f64,
    /// µV, ordered TP9, AF7, AF8, TP10.
    pub eeg: [f64; 4],
    pub device_quality: [Quality; 4],
    /// Accelerometer magnitude in m/s², absent without an IMU stream.
    pub accel_mag: Option<f64>,
}

impl SampleFrame {
    pub fn new(
        t_ref: f64,
        eeg: [f64; 4],
        device_quality: [Quality; 4],
        accel_mag: Option<f64>,
    ) -> Result<Self, SignalError> {
        let frame = Self { t_ref, eeg, device_quality, accel_mag };
        frame.validate()?;
        Ok(frame)
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if !self.t_ref.is_finite() || self.t_ref < 0.0 {
            return Err(SignalError::InvalidFrame(format!("t_ref {} not finite and non-negative", self.t_ref)));
        }
        if let Some(c) = self.eeg.iter().position(|v| !v.is_finite()) {
            return Err(SignalError::InvalidFrame(format!("channel {} not finite", Channel::ALL[c])));
        }
        if matches!(self.accel_mag, Some(a) if !a.is_finite()) {
            return Err(SignalError::InvalidFrame("accel_mag not finite".into()));
        }
        Ok(())
    }
}

/// A contiguous, labeled run of frames at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub id: String,
    pub sample_rate: f64,
    pub label: SegmentLabel,
    frames: Vec<SampleFrame>,
}

impl Segment {
    /// Maximum relative deviation of a frame gap from the nominal period.
    pub const MAX_GAP_DEVIATION: f64 = 0.5;

    pub fn new(
        id: impl Into<String>,
        sample_rate: f64,
        label: SegmentLabel,
        frames: Vec<SampleFrame>,
    ) -> Result<Self, SignalError> {
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(SignalError::InvalidSegment(format!("sample rate {sample_rate}")));
        }
        let period = 1.0 / sample_rate;
        for (i, w) in frames.windows(2).enumerate() {
            let gap = w[1].t_ref - w[0].t_ref;
            if gap <= 0.0 {
                return Err(SignalError::InvalidSegment(format!(
                    "t_ref not strictly increasing at frame {}",
                    i + 1
                )));
            }
            if ((gap - period) / period).abs() >= Self::MAX_GAP_DEVIATION {
                return Err(SignalError::InvalidSegment(format!(
                    "gap of {gap:.6} s at frame {} deviates from 1/fs",
                    i + 1
                )));
            }
        }
        for f in &frames {
            f.validate()?;
        }
        Ok(Self { id: id.into(), sample_rate, label, frames })
    }

    pub fn frames(&self) -> &[SampleFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.frames.len() as f64 / self.sample_rate
    }

    /// Samples of one channel in time order.
    pub fn channel(&self, ch: Channel) -> Vec<f64> {
        self.frames.iter().map(|f| f.eeg[ch.index()]).collect()
    }

    /// All four channels, channel-major.
    pub fn channels(&self) -> [Vec<f64>; 4] {
        Channel::ALL.map(|c| self.channel(c))
    }

    /// Copy of this segment with channel data replaced. Timestamps, flags and
    /// labels are kept.
    pub fn with_channels(&self, data: &[Vec<f64>; 4]) -> Result<Segment, SignalError> {
        if data.iter().any(|d| d.len() != self.frames.len()) {
            return Err(SignalError::InvalidSegment("channel length mismatch".into()));
        }
        let frames = self
            .frames
            .iter()
            .enumerate()
            .map(|(i, f)| SampleFrame {
                eeg: [data[0][i], data[1][i], data[2][i], data[3][i]],
                ..f.clone()
            })
            .collect();
        Ok(Segment { frames, ..self.clone_header() })
    }

    fn clone_header(&self) -> Segment {
        Segment {
            id: self.id.clone(),
            sample_rate: self.sample_rate,
            label: self.label,
            frames: Vec::new(),
        }
    }
}

/// Sort frames by `t_ref`; for equal timestamps the later arrival wins.
pub fn sort_and_dedup(mut frames: Vec<SampleFrame>) -> Vec<SampleFrame> {
    // stable sort keeps arrival order among equal keys
    frames.sort_by(|a, b| a.t_ref.total_cmp(&b.t_ref));
    let mut out: Vec<SampleFrame> = Vec::with_capacity(frames.len());
    for f in frames {
        match out.last_mut() {
            Some(last) if last.t_ref == f.t_ref => *last = f,
            _ => out.push(f),
        }
    }
    out
}

/// Split time-sorted frames wherever the gap deviates from the nominal
/// period by [`Segment::MAX_GAP_DEVIATION`] or more.
pub fn split_contiguous(frames: Vec<SampleFrame>, sample_rate: f64) -> Vec<Vec<SampleFrame>> {
    let period = 1.0 / sample_rate;
    let mut runs: Vec<Vec<SampleFrame>> = Vec::new();
    let mut current: Vec<SampleFrame> = Vec::new();
    for f in frames {
        if let Some(last) = current.last() {
            let gap = f.t_ref - last.t_ref;
            if gap <= 0.0 || ((gap - period) / period).abs() >= Segment::MAX_GAP_DEVIATION {
                runs.push(std::mem::take(&mut current));
            }
        }
        current.push(f);
    }
    if !current.is_empty() {
        runs.push(current);
    }
    runs
}
