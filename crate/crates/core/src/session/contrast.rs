use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Group, Modality};
use crate::engagement::EngagementRecord;
use crate::spectral::Band;
use crate::stats::{mann_whitney_u, paired_t, welch_t, StatsError, TestMethod, TestResult};

pub const REPORT_SCHEMA: &str = "engage.contrast-report";
pub const REPORT_VERSION: u32 = 1;
/// Two-sided significance level for report labels.
pub const ALPHA: f64 = 0.05;
pub const NO_RELIABLE_MODULATION: &str = "no reliable modulation";
/// Below this many pairs the report notes that the paired t-test stands in
/// for a rank-based alternative.
const SMALL_PAIRED_N: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContrastError {
    #[error("contrast {contrast}: cell {cell} has {n} subject(s), need at least 2")]
    InsufficientCell { contrast: String, cell: String, n: usize },
    #[error("contrast {contrast}: {source}")]
    Stats { contrast: String, source: StatsError },
}

/// Record column a contrast is computed on; names match the records CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Faa,
    FaaCorrected,
    Arousal,
    ArousalCorrected,
    AlphaFraction,
    BandCorrected(Band),
    BandCorrectedZ(Band),
}

impl Metric {
    pub fn column(self) -> String {
        match self {
            Metric::Faa => "FAA".into(),
            Metric::FaaCorrected => "FAA_Corrected".into(),
            Metric::Arousal => "Arousal_Index".into(),
            Metric::ArousalCorrected => "Arousal_Index_Corrected".into(),
            Metric::AlphaFraction => "Alpha_Fraction".into(),
            Metric::BandCorrected(b) => format!("{}_Mean_Corrected", b.title()),
            Metric::BandCorrectedZ(b) => format!("{}_Mean_Corrected_Z", b.title()),
        }
    }

    pub fn is_faa(self) -> bool {
        matches!(self, Metric::Faa | Metric::FaaCorrected)
    }

    pub fn value(self, r: &EngagementRecord) -> Option<f64> {
        Some(match self {
            Metric::Faa => r.faa,
            Metric::FaaCorrected => r.faa_minus_eo,
            Metric::Arousal => r.arousal,
            Metric::ArousalCorrected => r.arousal_minus_eo,
            Metric::AlphaFraction => r.alpha_fraction,
            Metric::BandCorrected(b) => r.band_corrected[b.index()],
            Metric::BandCorrectedZ(b) => r.band_corrected_z?[b.index()],
        })
    }
}

impl Serialize for Metric {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.column())
    }
}

impl<'de> Deserialize<'de> for Metric {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let simple = [Metric::Faa, Metric::FaaCorrected, Metric::Arousal, Metric::ArousalCorrected, Metric::AlphaFraction];
        simple
            .into_iter()
            .chain(Band::ALL.iter().flat_map(|b| [Metric::BandCorrected(*b), Metric::BandCorrectedZ(*b)]))
            .find(|m| m.column() == s)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown metric column {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    /// Mean per subject per modality.
    Aggregate,
    /// Every block segment separately.
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Between,
    Within,
}

/// One planned comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastSpec {
    pub name: String,
    pub family: Family,
    pub metric: Metric,
    pub method: TestMethod,
    /// Between: the two groups compared on their interpretive modality.
    /// Within: the group whose interpretive modality is paired with the
    /// original artwork.
    pub groups: Vec<Group>,
}

/// The fixed contrast family of the study design.
pub fn contrast_family() -> Vec<ContrastSpec> {
    let between = |name: &str, metric, method| ContrastSpec {
        name: name.into(),
        family: Family::Between,
        metric,
        method,
        groups: vec![Group::DisplayGroup, Group::ImmersiveGroup],
    };
    let mut out = vec![
        between("arousal_display_vs_immersive", Metric::ArousalCorrected, TestMethod::Welch),
        between("arousal_raw_display_vs_immersive", Metric::Arousal, TestMethod::Welch),
        between("alpha_fraction_display_vs_immersive", Metric::AlphaFraction, TestMethod::MannWhitney),
        between("faa_display_vs_immersive", Metric::FaaCorrected, TestMethod::Welch),
    ];
    let within_metrics = [
        ("alpha_corrected", Metric::BandCorrected(Band::Alpha)),
        ("gamma_corrected", Metric::BandCorrected(Band::Gamma)),
        ("theta_z", Metric::BandCorrectedZ(Band::Theta)),
        ("alpha_z", Metric::BandCorrectedZ(Band::Alpha)),
        ("delta_z", Metric::BandCorrectedZ(Band::Delta)),
        ("faa", Metric::FaaCorrected),
    ];
    for g in [Group::ImmersiveGroup, Group::DisplayGroup] {
        let short = match g {
            Group::ImmersiveGroup => "immersive",
            Group::DisplayGroup => "display",
        };
        for (m, metric) in within_metrics {
            out.push(ContrastSpec {
                name: format!("{m}_{short}_vs_original"),
                family: Family::Within,
                metric,
                method: TestMethod::Paired,
                groups: vec![g],
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastResult {
    pub name: String,
    pub family: Family,
    pub unit: Unit,
    pub metric: Metric,
    /// Sample 1 then sample 2; the statistic is positive when sample 1 is larger.
    pub samples: [String; 2],
    pub method: TestMethod,
    pub statistic: Option<f64>,
    pub df: Option<f64>,
    pub p_two_sided: Option<f64>,
    pub n1: usize,
    pub n2: usize,
    pub exact: Option<bool>,
    pub significant: Option<bool>,
    /// "no reliable modulation" on FAA contrasts with p >= 0.05.
    pub label: Option<String>,
    /// Why the contrast could not be computed (block unit only).
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastReport {
    pub schema: String,
    pub version: u32,
    pub alpha: f64,
    pub default_unit: Unit,
    pub subjects: usize,
    pub records: usize,
    pub contrasts: Vec<ContrastResult>,
    pub block_contrasts: Vec<ContrastResult>,
    pub notes: Vec<String>,
}

impl ContrastReport {
    pub fn get(&self, name: &str) -> Option<&ContrastResult> {
        self.contrasts.iter().find(|c| c.name == name)
    }
}

fn label_for(metric: Metric, p: f64) -> Option<String> {
    (metric.is_faa() && p >= ALPHA).then(|| NO_RELIABLE_MODULATION.to_string())
}

struct Prepared {
    samples: [String; 2],
    a: Vec<f64>,
    b: Vec<f64>,
    /// Subjects per cell, for the insufficiency check.
    subjects: [usize; 2],
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Values per subject for one modality, in record order.
fn by_subject(records: &[EngagementRecord], group: Group, modality: Modality, metric: Metric) -> BTreeMap<&str, Vec<f64>> {
    let mut out: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.group == group && r.modality() == modality) {
        if let Some(v) = metric.value(r) {
            out.entry(r.subject_id.as_str()).or_default().push(v);
        }
    }
    out
}

fn prepare(spec: &ContrastSpec, records: &[EngagementRecord], unit: Unit) -> Prepared {
    match spec.family {
        Family::Between => {
            let cells: Vec<BTreeMap<&str, Vec<f64>>> = spec
                .groups
                .iter()
                .map(|g| by_subject(records, *g, g.interpretive(), spec.metric))
                .collect();
            let flat = |c: &BTreeMap<&str, Vec<f64>>| -> Vec<f64> {
                match unit {
                    Unit::Aggregate => c.values().map(|v| mean(v)).collect(),
                    Unit::Block => c.values().flatten().copied().collect(),
                }
            };
            Prepared {
                samples: [spec.groups[0].interpretive().to_string(), spec.groups[1].interpretive().to_string()],
                a: flat(&cells[0]),
                b: flat(&cells[1]),
                subjects: [cells[0].len(), cells[1].len()],
            }
        }
        Family::Within => {
            let g = spec.groups[0];
            let task = by_subject(records, g, g.interpretive(), spec.metric);
            let orig = by_subject(records, g, Modality::OriginalArtwork, spec.metric);
            let (mut a, mut b) = (Vec::new(), Vec::new());
            let mut paired_subjects = 0;
            for (s, tv) in &task {
                let Some(ov) = orig.get(s) else { continue };
                paired_subjects += 1;
                match unit {
                    Unit::Aggregate => {
                        a.push(mean(tv));
                        b.push(mean(ov));
                    }
                    Unit::Block => {
                        // k-th interpretive block pairs with the k-th original block
                        for (x, y) in tv.iter().zip(ov) {
                            a.push(*x);
                            b.push(*y);
                        }
                    }
                }
            }
            Prepared {
                samples: [g.interpretive().to_string(), Modality::OriginalArtwork.to_string()],
                a,
                b,
                subjects: [paired_subjects, paired_subjects],
            }
        }
    }
}

fn run(spec: &ContrastSpec, records: &[EngagementRecord], unit: Unit) -> Result<ContrastResult, ContrastError> {
    let p = prepare(spec, records, unit);
    for (i, n) in p.subjects.iter().enumerate() {
        if *n < 2 {
            return Err(ContrastError::InsufficientCell {
                contrast: spec.name.clone(),
                cell: p.samples[i].clone(),
                n: *n,
            });
        }
    }
    let test = match spec.method {
        TestMethod::Welch => welch_t(&p.a, &p.b),
        TestMethod::MannWhitney => mann_whitney_u(&p.a, &p.b),
        TestMethod::Paired => paired_t(&p.a, &p.b),
    };
    let t: TestResult = test.map_err(|source| ContrastError::Stats { contrast: spec.name.clone(), source })?;
    Ok(ContrastResult {
        name: spec.name.clone(),
        family: spec.family,
        unit,
        metric: spec.metric,
        samples: p.samples,
        method: t.method,
        statistic: Some(t.statistic),
        df: t.df,
        p_two_sided: Some(t.p_two_sided),
        n1: t.n1,
        n2: t.n2,
        exact: t.exact,
        significant: Some(t.p_two_sided < ALPHA),
        label: label_for(spec.metric, t.p_two_sided),
        error: None,
    })
}

fn failed(spec: &ContrastSpec, records: &[EngagementRecord], unit: Unit, e: &ContrastError) -> ContrastResult {
    let p = prepare(spec, records, unit);
    ContrastResult {
        name: spec.name.clone(),
        family: spec.family,
        unit,
        metric: spec.metric,
        samples: p.samples,
        method: spec.method,
        statistic: None,
        df: None,
        p_two_sided: None,
        n1: p.a.len(),
        n2: p.b.len(),
        exact: None,
        significant: None,
        label: None,
        error: Some(e.to_string()),
    }
}

/// Run the contrast family. Aggregate-unit contrasts are strict: the first
/// insufficient cell fails the call. Block-unit failures are recorded in
/// the report instead.
pub fn compare_modalities(records: &[EngagementRecord]) -> Result<ContrastReport, ContrastError> {
    let family = contrast_family();
    let mut contrasts = Vec::new();
    let mut block_contrasts = Vec::new();
    for spec in &family {
        match run(spec, records, Unit::Aggregate) {
            Ok(r) => contrasts.push(r),
            Err(e @ ContrastError::InsufficientCell { .. }) => return Err(e),
            // degenerate data is reported, not fatal
            Err(e) => contrasts.push(failed(spec, records, Unit::Aggregate, &e)),
        }
        block_contrasts.push(run(spec, records, Unit::Block).unwrap_or_else(|e| failed(spec, records, Unit::Block, &e)));
    }
    let mut notes = vec![
        "Paired contrasts use the paired t-test on baseline-corrected values; Wilcoxon signed-rank is not computed.".to_string(),
        "Arousal contrasts are reported on both Arousal_Index_Corrected (default) and Arousal_Index.".to_string(),
    ];
    if contrasts.iter().any(|c| c.method == TestMethod::Paired && c.n1 < SMALL_PAIRED_N) {
        notes.push(format!("Some paired contrasts have fewer than {SMALL_PAIRED_N} pairs; normality of differences is not checked."));
    }
    let subjects = records.iter().map(|r| r.subject_id.as_str()).collect::<std::collections::BTreeSet<_>>().len();
    Ok(ContrastReport {
        schema: REPORT_SCHEMA.into(),
        version: REPORT_VERSION,
        alpha: ALPHA,
        default_unit: Unit::Aggregate,
        subjects,
        records: records.len(),
        contrasts,
        block_contrasts,
        notes,
    })
}
