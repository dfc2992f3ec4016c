use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{OscMessage, OscType};
use crate::signal::Quality;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MappingError {
    #[error("{address}: expected {expected} arguments, got {got}")]
    Arity { address: String, expected: String, got: usize },
    #[error("{address}: argument {index} has type '{tag}', expected {expected}")]
    ArgType { address: String, index: usize, tag: char, expected: &'static str },
    #[error("{address}: non-finite argument {index}")]
    NonFinite { address: String, index: usize },
}

/// Which OSC addresses carry which stream. Defaults follow the MindMonitor
/// smartphone bridge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AddressMap {
    pub eeg: String,
    /// Extra trailing EEG arguments (auxiliary electrodes) tolerated and dropped.
    pub eeg_extra_args: usize,
    pub accel: String,
    pub quality: String,
    /// Horseshoe values above this are poor contact (1 good, 2 ok, 4 bad).
    pub quality_poor_above: f64,
    pub optics: Option<String>,
    /// Operator or replayer event marks: `,ss` (kind, label).
    pub marker: String,
}

impl Default for AddressMap {
    fn default() -> Self {
        Self {
            eeg: "/muse/eeg".into(),
            eeg_extra_args: 2,
            accel: "/muse/acc".into(),
            quality: "/muse/elements/horseshoe".into(),
            quality_poor_above: 2.0,
            optics: Some("/muse/optics".into()),
            marker: "/engage/marker".into(),
        }
    }
}

/// The part of a sample frame (or side stream) one message carries.
#[derive(Debug, Clone, PartialEq)]
pub enum Fragment {
    /// µV, ordered TP9, AF7, AF8, TP10.
    Eeg([f64; 4]),
    Accel { xyz: [f64; 3], magnitude: f64 },
    Quality([Quality; 4]),
    Optics(Vec<f64>),
    Marker { kind: String, label: String },
}

/// A mapped message; `participant` is set when the address carried a
/// `/<participant>` prefix ahead of a mapped path.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub participant: Option<String>,
    pub fragment: Fragment,
}

impl AddressMap {
    fn classify(&self, path: &str) -> Option<Kind> {
        if path == self.eeg {
            Some(Kind::Eeg)
        } else if path == self.accel {
            Some(Kind::Accel)
        } else if path == self.quality {
            Some(Kind::Quality)
        } else if path == self.marker {
            Some(Kind::Marker)
        } else if self.optics.as_deref() == Some(path) {
            Some(Kind::Optics)
        } else {
            None
        }
    }

    /// Address for `path` under an optional participant prefix.
    pub fn prefixed(participant: Option<&str>, path: &str) -> String {
        match participant {
            Some(p) => format!("/{p}{path}"),
            None => path.to_string(),
        }
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Eeg,
    Accel,
    Quality,
    Optics,
    Marker,
}

fn numbers(msg: &OscMessage, take: usize) -> Result<Vec<f64>, MappingError> {
    msg.args[..take]
        .iter()
        .enumerate()
        .map(|(index, a)| {
            let v = a.as_f64().ok_or_else(|| MappingError::ArgType {
                address: msg.address.clone(),
                index,
                tag: a.tag(),
                expected: "int or float",
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(MappingError::NonFinite { address: msg.address.clone(), index })
            }
        })
        .collect()
}

fn arity(msg: &OscMessage, min: usize, max: usize) -> Result<(), MappingError> {
    let got = msg.args.len();
    if got < min || got > max {
        let expected = if min == max { min.to_string() } else { format!("{min}-{max}") };
        return Err(MappingError::Arity { address: msg.address.clone(), expected, got });
    }
    Ok(())
}

/// Map a message to a frame fragment. `Ok(None)` means the address is not
/// mapped and the message should be counted and ignored.
pub fn decode_frame(msg: &OscMessage, map: &AddressMap) -> Result<Option<Route>, MappingError> {
    let (participant, kind) = match map.classify(&msg.address) {
        Some(k) => (None, k),
        None => {
            // "/<participant>/<mapped path>"
            let Some(split) = msg.address[1..].find('/').map(|i| i + 1) else {
                return Ok(None);
            };
            match map.classify(&msg.address[split..]) {
                Some(k) => (Some(msg.address[1..split].to_string()), k),
                None => return Ok(None),
            }
        }
    };
    let fragment = match kind {
        Kind::Eeg => {
            arity(msg, 4, 4 + map.eeg_extra_args)?;
            let v = numbers(msg, 4)?;
            Fragment::Eeg([v[0], v[1], v[2], v[3]])
        }
        Kind::Accel => {
            arity(msg, 3, 3)?;
            let v = numbers(msg, 3)?;
            let xyz = [v[0], v[1], v[2]];
            Fragment::Accel { xyz, magnitude: xyz.iter().map(|a| a * a).sum::<f64>().sqrt() }
        }
        Kind::Quality => {
            arity(msg, 4, 4)?;
            let v = numbers(msg, 4)?;
            let q = |x: f64| if x > map.quality_poor_above { Quality::Poor } else { Quality::Good };
            Fragment::Quality([q(v[0]), q(v[1]), q(v[2]), q(v[3])])
        }
        Kind::Optics => {
            let n = msg.args.len();
            Fragment::Optics(numbers(msg, n)?)
        }
        Kind::Marker => {
            arity(msg, 2, 2)?;
            let s = |index: usize| match &msg.args[index] {
                OscType::String(s) => Ok(s.clone()),
                other => Err(MappingError::ArgType {
                    address: msg.address.clone(),
                    index,
                    tag: other.tag(),
                    expected: "string",
                }),
            };
            Fragment::Marker { kind: s(0)?, label: s(1)? }
        }
    };
    Ok(Some(Route { participant, fragment }))
}
