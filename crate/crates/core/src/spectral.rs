//! Band-limited power per channel and band, channel averaging, and relative
//! band fractions.
//!
//! Power is the mean squared amplitude of the band-filtered signal over
//! samples that are valid and outside the filter edge. The gamma band's
//! upper edge equals the front-end cutoff, so gamma reflects 30-50 Hz only.

use std::fmt;
use std::io;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::QualityMask;
use crate::session::SegmentLabel;
use crate::signal::{apply_zero_phase, design_bandpass, Channel, FilterCoefficients, Segment, SignalError};

/// Per-pass order of the band isolation filters.
pub const BAND_FILTER_ORDER: usize = 4;
/// Minimum valid, non-edge samples for a band power estimate.
pub const MIN_VALID_SAMPLES: usize = 100;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("{valid} valid samples, need at least {min}")]
    TooFewValid { valid: usize, min: usize },
    #[error("mask length {mask} does not match signal length {signal}")]
    ShapeMismatch { signal: usize, mask: usize },
    #[error("total band power is zero")]
    ZeroTotalPower,
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("band power table: {0}")]
    Table(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Delta,
    Theta,
    Alpha,
    Beta,
    Gamma,
}

impl Band {
    pub const ALL: [Band; 5] = [Band::Delta, Band::Theta, Band::Alpha, Band::Beta, Band::Gamma];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Band::Delta => "delta",
            Band::Theta => "theta",
            Band::Alpha => "alpha",
            Band::Beta => "beta",
            Band::Gamma => "gamma",
        }
    }

    /// Capitalized form used in engagement column names.
    pub fn title(self) -> &'static str {
        match self {
            Band::Delta => "Delta",
            Band::Theta => "Theta",
            Band::Alpha => "Alpha",
            Band::Beta => "Beta",
            Band::Gamma => "Gamma",
        }
    }

    /// Canonical edges in Hz.
    pub fn definition(self) -> BandDefinition {
        let (low_hz, high_hz) = match self {
            Band::Delta => (0.5, 4.0),
            Band::Theta => (4.0, 8.0),
            Band::Alpha => (8.0, 13.0),
            Band::Beta => (13.0, 30.0),
            Band::Gamma => (30.0, 50.0),
        };
        BandDefinition { band: self, low_hz, high_hz }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Band {
    type Err = SpectralError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Band::ALL
            .into_iter()
            .find(|b| b.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| SpectralError::Table(format!("unknown band {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandDefinition {
    pub band: Band,
    pub low_hz: f64,
    pub high_hz: f64,
}

impl BandDefinition {
    pub fn center_hz(&self) -> f64 {
        (self.low_hz + self.high_hz) / 2.0
    }

    pub fn design(&self, fs: f64) -> Result<FilterCoefficients, SignalError> {
        design_bandpass(self.low_hz, self.high_hz, BAND_FILTER_ORDER, fs)
    }
}

/// Mean square of `x` filtered to `band`, over valid samples outside the
/// filter edge.
pub fn band_power(x: &[f64], band: &BandDefinition, fs: f64, valid: &[bool]) -> Result<f64, SpectralError> {
    let coeffs = band.design(fs)?;
    band_power_with(&coeffs, x, valid)
}

fn band_power_with(coeffs: &FilterCoefficients, x: &[f64], valid: &[bool]) -> Result<f64, SpectralError> {
    if valid.len() != x.len() {
        return Err(SpectralError::ShapeMismatch { signal: x.len(), mask: valid.len() });
    }
    let y = apply_zero_phase(coeffs, x)?;
    let edge = coeffs.warm_up_len();
    let n = x.len();
    let (mut sum, mut count) = (0.0, 0usize);
    for i in edge..n - edge {
        if valid[i] {
            sum += y[i] * y[i];
            count += 1;
        }
    }
    if count < MIN_VALID_SAMPLES {
        return Err(SpectralError::TooFewValid { valid: count, min: MIN_VALID_SAMPLES });
    }
    Ok(sum / count as f64)
}

/// Per-channel, per-band power (µV²) for one segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandPowerTable {
    pub segment_id: String,
    pub label: SegmentLabel,
    /// Indexed `[channel][band]`.
    pub per_channel: [[f64; 5]; 4],
    /// Mean over the four channels, indexed by band.
    pub channel_mean: [f64; 5],
    /// Samples valid on all four channels.
    pub valid_sample_count: usize,
}

impl BandPowerTable {
    /// Build from per-channel values; the channel means are derived.
    pub fn new(segment_id: impl Into<String>, label: SegmentLabel, per_channel: [[f64; 5]; 4], valid_sample_count: usize) -> Self {
        let channel_mean = std::array::from_fn(|b| per_channel.iter().map(|row| row[b]).sum::<f64>() / 4.0);
        Self { segment_id: segment_id.into(), label, per_channel, channel_mean, valid_sample_count }
    }

    pub fn power(&self, channel: Channel, band: Band) -> f64 {
        self.per_channel[channel.index()][band.index()]
    }

    pub fn mean(&self, band: Band) -> f64 {
        self.channel_mean[band.index()]
    }

    /// Fixed CSV column order: `segment_id, condition`, then the 20
    /// per-channel values channel-major (`tp9_delta .. tp10_gamma`), then
    /// `mean_delta .. mean_gamma`.
    pub fn csv_header() -> Vec<String> {
        let mut cols = vec!["segment_id".to_string(), "condition".to_string()];
        for ch in Channel::ALL {
            for b in Band::ALL {
                cols.push(format!("{}_{}", ch.name().to_lowercase(), b.name()));
            }
        }
        cols.extend(Band::ALL.iter().map(|b| format!("mean_{}", b.name())));
        cols
    }

    pub fn csv_record(&self) -> Vec<String> {
        let mut rec = vec![self.segment_id.clone(), self.label.to_string()];
        rec.extend(self.per_channel.iter().flatten().map(|v| v.to_string()));
        rec.extend(self.channel_mean.iter().map(|v| v.to_string()));
        rec
    }

    pub fn from_csv_record(rec: &csv::StringRecord) -> Result<Self, SpectralError> {
        if rec.len() != 27 {
            return Err(SpectralError::Table(format!("expected 27 columns, found {}", rec.len())));
        }
        let num = |i: usize| -> Result<f64, SpectralError> {
            rec[i].parse().map_err(|_| SpectralError::Table(format!("column {i}: not a number: {:?}", &rec[i])))
        };
        let label = rec[1].parse().map_err(|e| SpectralError::Table(format!("{e}")))?;
        let mut per_channel = [[0.0; 5]; 4];
        for (c, row) in per_channel.iter_mut().enumerate() {
            for (b, v) in row.iter_mut().enumerate() {
                *v = num(2 + c * 5 + b)?;
            }
        }
        let mut table = Self::new(&rec[0], label, per_channel, 0);
        for b in 0..5 {
            table.channel_mean[b] = num(22 + b)?;
        }
        Ok(table)
    }
}

pub fn write_band_power_csv<W: io::Write>(w: W, tables: &[BandPowerTable]) -> Result<(), SpectralError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(BandPowerTable::csv_header())?;
    for t in tables {
        wtr.write_record(t.csv_record())?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_band_power_csv<R: io::Read>(r: R) -> Result<Vec<BandPowerTable>, SpectralError> {
    let mut rdr = csv::Reader::from_reader(r);
    if rdr.headers()?.iter().ne(BandPowerTable::csv_header().iter().map(String::as_str)) {
        return Err(SpectralError::Table("unexpected header".into()));
    }
    rdr.records().map(|r| BandPowerTable::from_csv_record(&r?)).collect()
}

/// Band power for every channel and canonical band, each channel using its
/// own validity.
pub fn segment_band_powers(seg: &Segment, mask: &QualityMask) -> Result<BandPowerTable, SpectralError> {
    if mask.len() != seg.len() {
        return Err(SpectralError::ShapeMismatch { signal: seg.len(), mask: mask.len() });
    }
    let filters = Band::ALL
        .iter()
        .map(|b| b.definition().design(seg.sample_rate))
        .collect::<Result<Vec<_>, _>>()?;
    let mut per_channel = [[0.0; 5]; 4];
    for ch in Channel::ALL {
        let x = seg.channel(ch);
        let valid = mask.channel_valid(ch.index());
        for (b, coeffs) in filters.iter().enumerate() {
            per_channel[ch.index()][b] = band_power_with(coeffs, &x, &valid)?;
        }
    }
    Ok(BandPowerTable::new(seg.id.clone(), seg.label, per_channel, mask.valid_sample_count()))
}

/// `channel_mean[band]` over the sum of all five channel means.
pub fn relative_band_fraction(table: &BandPowerTable, band: Band) -> Result<f64, SpectralError> {
    let total: f64 = table.channel_mean.iter().sum();
    if total <= 0.0 {
        return Err(SpectralError::ZeroTotalPower);
    }
    Ok(table.mean(band) / total)
}
