//! Frontal alpha asymmetry, the beta/alpha arousal index, eyes-open baseline
//! correction and per-subject Z-normalization.

use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::{ConditionLabel, Group, Modality};
use crate::signal::Channel;
use crate::spectral::{relative_band_fraction, Band, BandPowerTable, SpectralError};

#[derive(Debug, Error)]
pub enum EngagementError {
    #[error("alpha power must be positive on every channel, got {0:?}")]
    NonPositivePower([f64; 4]),
    #[error("alpha power is zero")]
    ZeroAlpha,
    #[error("subject mismatch: {task} vs baseline {baseline}")]
    SubjectMismatch { task: String, baseline: String },
    #[error("degenerate spread for subject {subject}: n = {n}")]
    DegenerateSpread { subject: String, n: usize },
    #[error("non-finite index value")]
    NonFinite,
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("records table: {0}")]
    Table(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// `ln(mean(AF8, TP10)) - ln(mean(TP9, AF7))`.
pub fn faa(alpha_tp9: f64, alpha_af7: f64, alpha_af8: f64, alpha_tp10: f64) -> Result<f64, EngagementError> {
    let p = [alpha_tp9, alpha_af7, alpha_af8, alpha_tp10];
    if !p.iter().all(|v| *v > 0.0 && v.is_finite()) {
        return Err(EngagementError::NonPositivePower(p));
    }
    let left = (alpha_tp9 + alpha_af7) / 2.0;
    let right = (alpha_af8 + alpha_tp10) / 2.0;
    Ok(right.ln() - left.ln())
}

pub fn faa_from_table(table: &BandPowerTable) -> Result<f64, EngagementError> {
    let a = |c: Channel| table.power(c, Band::Alpha);
    faa(a(Channel::Tp9), a(Channel::Af7), a(Channel::Af8), a(Channel::Tp10))
}

/// Beta over alpha; higher means higher cortical arousal.
pub fn arousal(beta_mean: f64, alpha_mean: f64) -> Result<f64, EngagementError> {
    if alpha_mean <= 0.0 {
        return Err(EngagementError::ZeroAlpha);
    }
    let r = beta_mean / alpha_mean;
    if r.is_finite() {
        Ok(r)
    } else {
        Err(EngagementError::NonFinite)
    }
}

/// Reading of the FAA sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotivationalTendency {
    /// FAA > 0: relatively greater left-frontal activation.
    Approach,
    /// FAA < 0: relatively greater right-frontal activation.
    Avoidance,
    Neutral,
}

impl MotivationalTendency {
    pub fn from_faa(faa: f64) -> Self {
        if faa > 0.0 {
            MotivationalTendency::Approach
        } else if faa < 0.0 {
            MotivationalTendency::Avoidance
        } else {
            MotivationalTendency::Neutral
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            MotivationalTendency::Approach => "relatively greater left-frontal activation (approach tendency)",
            MotivationalTendency::Avoidance => "relatively greater right-frontal activation (avoidance tendency)",
            MotivationalTendency::Neutral => "no hemispheric asymmetry",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MotivationalTendency::Approach => "approach",
            MotivationalTendency::Avoidance => "avoidance",
            MotivationalTendency::Neutral => "neutral",
        }
    }
}

/// A value tagged with the subject it was measured on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation<'a> {
    pub subject_id: &'a str,
    pub value: f64,
}

/// Task minus eyes-open baseline; both must belong to the same subject.
pub fn baseline_correct(task: Observation<'_>, eo: Observation<'_>) -> Result<f64, EngagementError> {
    if task.subject_id != eo.subject_id {
        return Err(EngagementError::SubjectMismatch { task: task.subject_id.into(), baseline: eo.subject_id.into() });
    }
    Ok(task.value - eo.value)
}

/// Per-subject standardization with the n-1 standard deviation. Output order
/// matches input order.
pub fn zscore_within_subject(values: &[Observation<'_>]) -> Result<Vec<f64>, EngagementError> {
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, o) in values.iter().enumerate() {
        by_subject.entry(o.subject_id).or_default().push(i);
    }
    let mut out = vec![0.0; values.len()];
    for (subject, idx) in by_subject {
        let n = idx.len();
        let degenerate = || EngagementError::DegenerateSpread { subject: subject.to_string(), n };
        if n < 2 {
            return Err(degenerate());
        }
        let mean = idx.iter().map(|&i| values[i].value).sum::<f64>() / n as f64;
        let var = idx.iter().map(|&i| (values[i].value - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        if !(sd > 0.0 && sd.is_finite()) {
            return Err(degenerate());
        }
        for i in idx {
            out[i] = (values[i].value - mean) / sd;
        }
    }
    Ok(out)
}

/// A subject's eyes-open reference, plus the optional eyes-closed table kept
/// for descriptive comparisons only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRecord {
    pub subject_id: String,
    pub group: Group,
    pub eo: BandPowerTable,
    pub ec: Option<BandPowerTable>,
    pub eo_faa: f64,
    pub eo_arousal: f64,
}

impl BaselineRecord {
    pub fn new(subject_id: impl Into<String>, group: Group, eo: BandPowerTable, ec: Option<BandPowerTable>) -> Result<Self, EngagementError> {
        let eo_faa = faa_from_table(&eo)?;
        let eo_arousal = arousal(eo.mean(Band::Beta), eo.mean(Band::Alpha))?;
        Ok(Self { subject_id: subject_id.into(), group, eo, ec, eo_faa, eo_arousal })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngagementRecord {
    pub subject_id: String,
    pub group: Group,
    pub segment_id: String,
    pub condition: ConditionLabel,
    pub faa: f64,
    pub faa_minus_eo: f64,
    pub arousal: f64,
    pub arousal_minus_eo: f64,
    /// Channel-mean band power, µV², by band.
    pub band_mean: [f64; 5],
    /// Task minus EO, µV², by band.
    pub band_corrected: [f64; 5],
    /// Filled by [`apply_z_pass`].
    pub band_corrected_z: Option<[f64; 5]>,
    pub alpha_fraction: f64,
    pub valid_samples: usize,
}

impl EngagementRecord {
    pub fn modality(&self) -> Modality {
        self.condition.modality()
    }

    pub fn tendency(&self) -> MotivationalTendency {
        MotivationalTendency::from_faa(self.faa)
    }
}

/// Everything except the Z columns, which need the subject's full set.
pub fn build_engagement_record(
    table: &BandPowerTable,
    subject_id: &str,
    baseline: &BaselineRecord,
    condition: ConditionLabel,
) -> Result<EngagementRecord, EngagementError> {
    let obs = |value| Observation { subject_id, value };
    let eo = |value| Observation { subject_id: &baseline.subject_id, value };
    let f = faa_from_table(table)?;
    let a = arousal(table.mean(Band::Beta), table.mean(Band::Alpha))?;
    let faa_minus_eo = baseline_correct(obs(f), eo(baseline.eo_faa))?;
    let arousal_minus_eo = baseline_correct(obs(a), eo(baseline.eo_arousal))?;
    let mut band_corrected = [0.0; 5];
    for b in Band::ALL {
        band_corrected[b.index()] = baseline_correct(obs(table.mean(b)), eo(baseline.eo.mean(b)))?;
    }
    Ok(EngagementRecord {
        subject_id: subject_id.to_string(),
        group: baseline.group,
        segment_id: table.segment_id.clone(),
        condition,
        faa: f,
        faa_minus_eo,
        arousal: a,
        arousal_minus_eo,
        band_mean: table.channel_mean,
        band_corrected,
        band_corrected_z: None,
        alpha_fraction: relative_band_fraction(table, Band::Alpha)?,
        valid_samples: table.valid_sample_count,
    })
}

/// Z-score each band's corrected power within each subject. Subjects with a
/// degenerate spread keep `None` and are returned.
pub fn apply_z_pass(records: &mut [EngagementRecord]) -> Vec<EngagementError> {
    let mut by_subject: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_subject.entry(r.subject_id.clone()).or_default().push(i);
    }
    let mut failures = Vec::new();
    for (subject, idx) in by_subject {
        let mut z = vec![[0.0; 5]; idx.len()];
        let mut ok = true;
        for b in 0..5 {
            let obs: Vec<Observation> =
                idx.iter().map(|&i| Observation { subject_id: &subject, value: records[i].band_corrected[b] }).collect();
            match zscore_within_subject(&obs) {
                Ok(v) => v.iter().enumerate().for_each(|(k, zv)| z[k][b] = *zv),
                Err(e) => {
                    failures.push(e);
                    ok = false;
                    break;
                }
            }
        }
        for (k, &i) in idx.iter().enumerate() {
            records[i].band_corrected_z = ok.then_some(z[k]);
        }
    }
    failures
}

/// Column names in file order.
pub fn records_csv_header() -> Vec<String> {
    let mut cols: Vec<String> = [
        "subject_id",
        "group",
        "segment_id",
        "condition",
        "modality",
        "block",
        "posture",
        "FAA",
        "FAA_Corrected",
        "Motivational_Tendency",
        "Arousal_Index",
        "Arousal_Index_Corrected",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for suffix in ["_Mean", "_Mean_Corrected", "_Mean_Corrected_Z"] {
        cols.extend(Band::ALL.iter().map(|b| format!("{}{suffix}", b.title())));
    }
    cols.push("Alpha_Fraction".into());
    cols.push("Valid_Samples".into());
    cols
}

fn group_name(g: Group) -> &'static str {
    match g {
        Group::ImmersiveGroup => "ImmersiveGroup",
        Group::DisplayGroup => "DisplayGroup",
    }
}

fn parse_group(s: &str) -> Result<Group, EngagementError> {
    match s {
        "ImmersiveGroup" => Ok(Group::ImmersiveGroup),
        "DisplayGroup" => Ok(Group::DisplayGroup),
        _ => Err(EngagementError::Table(format!("unknown group {s:?}"))),
    }
}

/// Shortest representation that parses back to the same `f64`.
fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_records_csv<W: io::Write>(w: W, records: &[EngagementRecord]) -> Result<(), EngagementError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(records_csv_header())?;
    for r in records {
        let mut row = vec![
            r.subject_id.clone(),
            group_name(r.group).to_string(),
            r.segment_id.clone(),
            r.condition.to_string(),
            r.condition.modality().to_string(),
            r.condition.block().to_string(),
            r.condition.posture().as_str().to_string(),
            num(r.faa),
            num(r.faa_minus_eo),
            r.tendency().as_str().to_string(),
            num(r.arousal),
            num(r.arousal_minus_eo),
        ];
        row.extend(r.band_mean.iter().map(|v| num(*v)));
        row.extend(r.band_corrected.iter().map(|v| num(*v)));
        match r.band_corrected_z {
            Some(z) => row.extend(z.iter().map(|v| num(*v))),
            None => row.extend(std::iter::repeat_n(String::new(), 5)),
        }
        row.push(num(r.alpha_fraction));
        row.push(r.valid_samples.to_string());
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_records_csv<R: io::Read>(r: R) -> Result<Vec<EngagementRecord>, EngagementError> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = records_csv_header();
    if rdr.headers()?.iter().ne(header.iter().map(String::as_str)) {
        return Err(EngagementError::Table("unexpected header".into()));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| EngagementError::Table(format!("row {}: {what}", line + 1));
        let f = |i: usize| -> Result<f64, EngagementError> { rec[i].parse().map_err(|_| bad(&header[i])) };
        let five = |start: usize| -> Result<[f64; 5], EngagementError> {
            let mut a = [0.0; 5];
            for (k, v) in a.iter_mut().enumerate() {
                *v = f(start + k)?;
            }
            Ok(a)
        };
        let condition: ConditionLabel = rec[3].parse().map_err(|_| bad("condition"))?;
        let band_corrected_z = if (22..27).all(|i| rec[i].is_empty()) { None } else { Some(five(22)?) };
        out.push(EngagementRecord {
            subject_id: rec[0].to_string(),
            group: parse_group(&rec[1])?,
            segment_id: rec[2].to_string(),
            condition,
            faa: f(7)?,
            faa_minus_eo: f(8)?,
            arousal: f(10)?,
            arousal_minus_eo: f(11)?,
            band_mean: five(12)?,
            band_corrected: five(17)?,
            band_corrected_z,
            alpha_fraction: f(27)?,
            valid_samples: rec[28].parse().map_err(|_| bad("Valid_Samples"))?,
        });
    }
    Ok(out)
}
