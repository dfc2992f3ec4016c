//! Ground-truth synthetic EEG and accelerometer generator, plus scripted
//! sessions and cohorts for end-to-end runs.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::recording::{
    AccelRow, CsvStream, EegRow, EventKind, EventRow, EventSource, GazeRow, OpticsRow, ParticipantEntry, QualityRow,
    RecordingError, SessionManifest, StreamKind, MANIFEST_FILE,
};
use crate::session::{counterbalance, BaselineKind, ConditionLabel, Group, Modality, SegmentLabel};
use crate::signal::{Channel, Quality, SampleFrame, Segment, SignalError, NOMINAL_SAMPLE_RATE};
use crate::spectral::Band;

/// Sinusoid frequency used for each band, ordered delta..gamma.
pub const BAND_CENTERS_HZ: [f64; 5] = [2.0, 6.0, 10.5, 21.5, 40.0];
pub const GRAVITY: f64 = 9.81;
/// Resting accelerometer noise, m/s².
const ACCEL_NOISE: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, SynthError> {
    Err(SynthError::InvalidSpec(msg.into()))
}

/// Sinusoid amplitudes (µV) per band.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct BandAmplitudes {
    pub delta: f64,
    pub theta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl BandAmplitudes {
    pub fn from_array(a: [f64; 5]) -> Self {
        Self { delta: a[0], theta: a[1], alpha: a[2], beta: a[3], gamma: a[4] }
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.delta, self.theta, self.alpha, self.beta, self.gamma]
    }

    pub fn get(self, band: Band) -> f64 {
        self.to_array()[band.index()]
    }

    pub fn scaled(self, k: f64) -> Self {
        Self::from_array(self.to_array().map(|a| a * k))
    }
}

/// One amplitude set for every channel, or one per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChannelBands {
    PerChannel(BTreeMap<Channel, BandAmplitudes>),
    Uniform(BandAmplitudes),
}

impl ChannelBands {
    pub fn for_channel(&self, ch: Channel) -> BandAmplitudes {
        match self {
            ChannelBands::Uniform(b) => *b,
            ChannelBands::PerChannel(m) => m.get(&ch).copied().unwrap_or_default(),
        }
    }

    fn all(&self) -> [BandAmplitudes; 4] {
        Channel::ALL.map(|c| self.for_channel(c))
    }
}

impl Default for ChannelBands {
    fn default() -> Self {
        ChannelBands::Uniform(BandAmplitudes::default())
    }
}

/// A single sample replaced by `amplitude_uv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spike {
    pub t_s: f64,
    pub amplitude_uv: f64,
    /// Every channel when absent.
    #[serde(default)]
    pub channel: Option<Channel>,
}

/// Raised-cosine frontal transient; temporal channels get 10% of it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blink {
    pub t_s: f64,
    pub amplitude_uv: f64,
    #[serde(default = "default_blink_duration")]
    pub duration_s: f64,
}

fn default_blink_duration() -> f64 {
    0.3
}

/// Head movement: an accelerometer excursion with a matching slow EEG
/// deflection of random sign per channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MovementBurst {
    pub t_s: f64,
    pub duration_s: f64,
    pub accel_amplitude: f64,
    #[serde(default)]
    pub eeg_amplitude_uv: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ArtifactSchedule {
    pub spikes: Vec<Spike>,
    pub blinks: Vec<Blink>,
    pub movement: Vec<MovementBurst>,
}

impl ArtifactSchedule {
    pub fn is_empty(&self) -> bool {
        self.spikes.is_empty() && self.blinks.is_empty() && self.movement.is_empty()
    }
}

fn default_sample_rate() -> f64 {
    NOMINAL_SAMPLE_RATE
}

fn default_true() -> bool {
    true
}

fn default_label() -> SegmentLabel {
    SegmentLabel::Baseline(BaselineKind::EyesOpen)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub duration_s: f64,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub amplitudes: ChannelBands,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub artifacts: ArtifactSchedule,
    /// Emit an accelerometer magnitude per sample.
    #[serde(default = "default_true")]
    pub accel: bool,
    /// Reference time of the first sample.
    #[serde(default)]
    pub start_s: f64,
    #[serde(default = "default_label")]
    pub label: SegmentLabel,
}

impl GeneratorSpec {
    pub fn new(duration_s: f64, amplitudes: ChannelBands, seed: u64) -> Self {
        Self {
            duration_s,
            sample_rate: NOMINAL_SAMPLE_RATE,
            seed,
            amplitudes,
            noise_std: 0.0,
            artifacts: ArtifactSchedule::default(),
            accel: true,
            start_s: 0.0,
            label: default_label(),
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return invalid(format!("duration {} must be positive", self.duration_s));
        }
        if !(self.sample_rate.is_finite() && self.sample_rate > 2.0 * BAND_CENTERS_HZ[4]) {
            return invalid(format!("sample rate {} cannot represent the gamma sinusoid", self.sample_rate));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return invalid("noise std must be finite and non-negative");
        }
        if !(self.start_s.is_finite() && self.start_s >= 0.0) {
            return invalid("start must be finite and non-negative");
        }
        for (c, b) in Channel::ALL.iter().zip(self.amplitudes.all()) {
            if b.to_array().iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
                return invalid(format!("{c} amplitudes must be finite and non-negative"));
            }
        }
        let in_range = |t: f64| t.is_finite() && (0.0..self.duration_s).contains(&t);
        let a = &self.artifacts;
        if a.spikes.iter().any(|s| !in_range(s.t_s) || !s.amplitude_uv.is_finite()) {
            return invalid("spike outside the segment or non-finite");
        }
        if a.blinks.iter().any(|b| !in_range(b.t_s) || !(b.duration_s > 0.0) || !b.amplitude_uv.is_finite()) {
            return invalid("blink outside the segment or with non-positive duration");
        }
        if a.movement.iter().any(|m| !in_range(m.t_s) || !(m.duration_s > 0.0) || !m.accel_amplitude.is_finite()) {
            return invalid("movement burst outside the segment or with non-positive duration");
        }
        if !a.movement.is_empty() && !self.accel {
            return invalid("movement bursts need the accelerometer stream");
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        (self.duration_s * self.sample_rate).round() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArtifactSample {
    pub index: usize,
    pub channel: Channel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// A²/2 per channel and band, µV².
    pub band_power: [[f64; 5]; 4],
    pub channel_mean: [f64; 5],
    /// Spike samples whose value exceeds the amplitude limit.
    pub amplitude_artifacts: Vec<ArtifactSample>,
    /// Samples whose step from the previous sample exceeds the gradient
    /// limit because of a spike.
    pub gradient_artifacts: Vec<ArtifactSample>,
    /// Half-open sample ranges touched by blinks.
    pub blink_ranges: Vec<(usize, usize)>,
    pub movement_ranges: Vec<(usize, usize)>,
}

impl GroundTruth {
    pub fn power(&self, ch: Channel, band: Band) -> f64 {
        self.band_power[ch.index()][band.index()]
    }

    pub fn mean(&self, band: Band) -> f64 {
        self.channel_mean[band.index()]
    }

    /// Whether sample `i` lies in any injected artifact.
    pub fn is_artifact(&self, i: usize, ch: Channel) -> bool {
        let hit = |a: &ArtifactSample| a.index == i && a.channel == ch;
        let in_range = |r: &(usize, usize)| (r.0..r.1).contains(&i);
        self.amplitude_artifacts.iter().any(hit)
            || self.gradient_artifacts.iter().any(hit)
            || self.blink_ranges.iter().any(in_range)
            || self.movement_ranges.iter().any(in_range)
    }
}

/// Generated samples before they are wrapped in frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Signals {
    pub eeg: [Vec<f64>; 4],
    pub accel_mag: Option<Vec<f64>>,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub segment: Segment,
    pub truth: GroundTruth,
}

fn raised_cosine(i: usize, start: usize, len: usize) -> f64 {
    if len == 0 || i < start || i >= start + len {
        return 0.0;
    }
    let x = (i - start) as f64 / len as f64;
    0.5 * (1.0 - (2.0 * PI * x).cos())
}

/// Generate the four channels and the accelerometer stream.
pub fn generate_signals(spec: &GeneratorSpec) -> Result<Signals, SynthError> {
    spec.validate()?;
    let n = spec.len();
    let fs = spec.sample_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let amps = spec.amplitudes.all();

    let mut eeg: [Vec<f64>; 4] = Default::default();
    let mut band_power = [[0.0; 5]; 4];
    for c in 0..4 {
        let a = amps[c].to_array();
        let phases: [f64; 5] = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
        let mut x = vec![0.0; n];
        for b in 0..5 {
            band_power[c][b] = a[b] * a[b] / 2.0;
            if a[b] == 0.0 {
                continue;
            }
            let w = 2.0 * PI * BAND_CENTERS_HZ[b] / fs;
            for (i, v) in x.iter_mut().enumerate() {
                *v += a[b] * (w * i as f64 + phases[b]).sin();
            }
        }
        if spec.noise_std > 0.0 {
            let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
            for v in x.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        eeg[c] = x;
    }

    let mut accel = spec.accel.then(|| {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                GRAVITY + ACCEL_NOISE * z
            })
            .collect::<Vec<f64>>()
    });

    let idx = |t: f64| ((t * fs).round() as usize).min(n.saturating_sub(1));
    let mut blink_ranges = Vec::new();
    for b in &spec.artifacts.blinks {
        let start = idx(b.t_s);
        let len = ((b.duration_s * fs).round() as usize).min(n - start);
        for (c, x) in eeg.iter_mut().enumerate() {
            let gain = if Channel::ALL[c].is_frontal() { 1.0 } else { 0.1 };
            for (i, v) in x.iter_mut().enumerate().skip(start).take(len) {
                *v += gain * b.amplitude_uv * raised_cosine(i, start, len);
            }
        }
        blink_ranges.push((start, start + len));
    }

    let mut movement_ranges = Vec::new();
    for m in &spec.artifacts.movement {
        let start = idx(m.t_s);
        let len = ((m.duration_s * fs).round() as usize).min(n - start);
        let signs: [f64; 4] = std::array::from_fn(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 });
        let acc = accel.as_mut().expect("validated: movement needs accel");
        for i in start..start + len {
            let env = raised_cosine(i, start, len);
            acc[i] += m.accel_amplitude * env;
            for c in 0..4 {
                eeg[c][i] += signs[c] * m.eeg_amplitude_uv * env;
            }
        }
        movement_ranges.push((start, start + len));
    }

    // spikes last, so the stored value is exactly the scheduled amplitude
    let mut spiked: Vec<ArtifactSample> = Vec::new();
    for s in &spec.artifacts.spikes {
        let i = idx(s.t_s);
        let channels: Vec<Channel> = s.channel.map_or(Channel::ALL.to_vec(), |c| vec![c]);
        for ch in channels {
            eeg[ch.index()][i] = s.amplitude_uv;
            spiked.push(ArtifactSample { index: i, channel: ch });
        }
    }
    spiked.sort();
    spiked.dedup();
    let amplitude_artifacts = spiked
        .iter()
        .copied()
        .filter(|a| eeg[a.channel.index()][a.index].abs() > crate::artifact::AMPLITUDE_LIMIT_UV)
        .collect();
    let mut gradient_artifacts: Vec<ArtifactSample> = Vec::new();
    for a in &spiked {
        let x = &eeg[a.channel.index()];
        for i in [a.index, a.index + 1] {
            if i >= 1 && i < n && (x[i] - x[i - 1]).abs() > crate::artifact::GRADIENT_LIMIT_UV {
                gradient_artifacts.push(ArtifactSample { index: i, channel: a.channel });
            }
        }
    }
    gradient_artifacts.sort();
    gradient_artifacts.dedup();

    let channel_mean = std::array::from_fn(|b| band_power.iter().map(|c| c[b]).sum::<f64>() / 4.0);
    Ok(Signals {
        eeg,
        accel_mag: accel,
        truth: GroundTruth {
            band_power,
            channel_mean,
            amplitude_artifacts,
            gradient_artifacts,
            blink_ranges,
            movement_ranges,
        },
    })
}

/// Generate a labeled segment with its ground truth.
pub fn generate(spec: &GeneratorSpec) -> Result<Generated, SynthError> {
    let s = generate_signals(spec)?;
    let frames = (0..spec.len())
        .map(|i| SampleFrame {
            t_ref: spec.start_s + i as f64 / spec.sample_rate,
            eeg: [s.eeg[0][i], s.eeg[1][i], s.eeg[2][i], s.eeg[3][i]],
            device_quality: [Quality::Good; 4],
            accel_mag: s.accel_mag.as_ref().map(|a| a[i]),
        })
        .collect();
    let segment = Segment::new(format!("synth-{}", spec.seed), spec.sample_rate, spec.label, frames)?;
    Ok(Generated { segment, truth: s.truth })
}

/// One labeled stretch of a scripted session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptPart {
    pub label: SegmentLabel,
    pub duration_s: f64,
    pub amplitudes: ChannelBands,
    #[serde(default)]
    pub artifacts: ArtifactSchedule,
}

/// A participant's whole session: labeled parts separated by unlabeled
/// transitions at the first part's amplitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantScript {
    pub participant_id: String,
    pub group: Group,
    pub order: Vec<Modality>,
    pub parts: Vec<ScriptPart>,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default = "default_transition")]
    pub transition_s: f64,
    #[serde(default)]
    pub seed: u64,
    /// Target beta/alpha ratio per part label, for oracle checks.
    #[serde(default)]
    pub target_arousal: BTreeMap<String, f64>,
}

fn default_transition() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticFrame {
    /// Device-clock seconds from the start of the session.
    pub device_ts: f64,
    pub eeg: [f64; 4],
    pub accel_mag: f64,
    pub quality: [Quality; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticMarker {
    pub device_ts: f64,
    pub kind: EventKind,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSession {
    pub participant_id: String,
    pub sample_rate: f64,
    pub frames: Vec<SyntheticFrame>,
    /// Sorted by device time.
    pub markers: Vec<SyntheticMarker>,
    /// Ground truth per scripted part, in script order.
    pub truth: Vec<(SegmentLabel, GroundTruth)>,
}

impl SyntheticSession {
    pub fn duration(&self) -> f64 {
        self.frames.len() as f64 / self.sample_rate
    }
}

/// Render a participant script into frames and block markers.
pub fn render_participant(script: &ParticipantScript, sample_rate: f64) -> Result<SyntheticSession, SynthError> {
    if script.parts.is_empty() {
        return invalid(format!("{}: script has no parts", script.participant_id));
    }
    if !(script.transition_s.is_finite() && script.transition_s >= 0.0) {
        return invalid("transition must be finite and non-negative");
    }
    let mut frames = Vec::new();
    let mut markers = Vec::new();
    let mut truth = Vec::new();
    let mut seed = script.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let push = |spec: &GeneratorSpec, frames: &mut Vec<SyntheticFrame>| -> Result<GroundTruth, SynthError> {
        let s = generate_signals(spec)?;
        let t0 = frames.len();
        for i in 0..spec.len() {
            frames.push(SyntheticFrame {
                device_ts: (t0 + i) as f64 / sample_rate,
                eeg: [s.eeg[0][i], s.eeg[1][i], s.eeg[2][i], s.eeg[3][i]],
                accel_mag: s.accel_mag.as_ref().map_or(GRAVITY, |a| a[i]),
                quality: [Quality::Good; 4],
            });
        }
        Ok(s.truth)
    };
    let transition = script.parts[0].amplitudes.clone();
    for (k, part) in script.parts.iter().enumerate() {
        if k > 0 && script.transition_s > 0.0 {
            seed = seed.wrapping_add(1);
            let mut spec = GeneratorSpec::new(script.transition_s, transition.clone(), seed);
            spec.sample_rate = sample_rate;
            spec.noise_std = script.noise_std;
            push(&spec, &mut frames)?;
        }
        seed = seed.wrapping_add(1);
        let mut spec = GeneratorSpec::new(part.duration_s, part.amplitudes.clone(), seed);
        spec.sample_rate = sample_rate;
        spec.noise_std = script.noise_std;
        spec.artifacts = part.artifacts.clone();
        spec.label = part.label;
        let start = frames.len() as f64 / sample_rate;
        markers.push(SyntheticMarker { device_ts: start, kind: EventKind::StartBlock, label: part.label.to_string() });
        truth.push((part.label, push(&spec, &mut frames)?));
        let end = frames.len() as f64 / sample_rate;
        markers.push(SyntheticMarker { device_ts: end, kind: EventKind::StopBlock, label: part.label.to_string() });
    }
    Ok(SyntheticSession { participant_id: script.participant_id.clone(), sample_rate, frames, markers, truth })
}

/// Parameters of a two-group cohort whose interpretive-condition arousal
/// (beta/alpha) differs between groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub n_per_group: usize,
    pub seed: u64,
    pub eo_s: f64,
    /// No eyes-closed part when 0.
    pub ec_s: f64,
    pub block_s: f64,
    pub transition_s: f64,
    pub alpha_uv: f64,
    pub delta_uv: f64,
    pub theta_uv: f64,
    pub gamma_uv: f64,
    pub noise_std: f64,
    /// Resting beta/alpha.
    pub baseline_arousal: f64,
    pub original_arousal: f64,
    pub immersive_arousal: f64,
    pub display_arousal: f64,
    /// Between-subject spread of condition arousal.
    pub arousal_sd: f64,
    /// Per-subject amplitude scale is drawn from [1 - s, 1 + s].
    pub subject_scale_spread: f64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_per_group: 10,
            seed: 0,
            eo_s: 60.0,
            ec_s: 60.0,
            block_s: 60.0,
            transition_s: 1.0,
            alpha_uv: 10.0,
            delta_uv: 6.0,
            theta_uv: 5.0,
            gamma_uv: 2.0,
            noise_std: 1.0,
            baseline_arousal: 1.0,
            original_arousal: 1.5,
            immersive_arousal: 2.0,
            display_arousal: 3.0,
            arousal_sd: 0.5,
            subject_scale_spread: 0.3,
        }
    }
}

/// Smallest arousal a draw is clamped to, keeping beta amplitude real.
const MIN_AROUSAL: f64 = 0.1;

/// Build counterbalanced participant scripts for a cohort.
pub fn cohort(spec: &CohortSpec) -> Result<Vec<ParticipantScript>, SynthError> {
    if spec.n_per_group == 0 {
        return invalid("cohort needs at least one participant per group");
    }
    if !(spec.arousal_sd.is_finite() && spec.arousal_sd >= 0.0) {
        return invalid("arousal sd must be finite and non-negative");
    }
    if !(0.0..1.0).contains(&spec.subject_scale_spread) {
        return invalid("subject scale spread must lie in [0, 1)");
    }
    let ids: Vec<String> = (1..=2 * spec.n_per_group).map(|i| format!("P{i:02}")).collect();
    let plan = counterbalance(&ids, spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xC0_4047);
    let spread = Normal::new(0.0, spec.arousal_sd).expect("validated sd");

    let mut scripts = Vec::with_capacity(ids.len());
    for a in &plan.assignments {
        let scale = 1.0 + rng.random_range(-spec.subject_scale_spread..=spec.subject_scale_spread);
        let bands = |alpha: f64, arousal: f64| {
            ChannelBands::Uniform(BandAmplitudes {
                delta: spec.delta_uv * scale,
                theta: spec.theta_uv * scale,
                alpha: alpha * scale,
                beta: alpha * scale * arousal.sqrt(),
                gamma: spec.gamma_uv * scale,
            })
        };
        let mut targets = BTreeMap::new();
        let mut parts = vec![ScriptPart {
            label: SegmentLabel::Baseline(BaselineKind::EyesOpen),
            duration_s: spec.eo_s,
            amplitudes: bands(spec.alpha_uv, spec.baseline_arousal),
            artifacts: ArtifactSchedule::default(),
        }];
        targets.insert("EO".to_string(), spec.baseline_arousal);
        if spec.ec_s > 0.0 {
            // eyes closed: alpha doubles
            parts.push(ScriptPart {
                label: SegmentLabel::Baseline(BaselineKind::EyesClosed),
                duration_s: spec.ec_s,
                amplitudes: bands(2.0 * spec.alpha_uv, spec.baseline_arousal / 4.0),
                artifacts: ArtifactSchedule::default(),
            });
            targets.insert("EC".to_string(), spec.baseline_arousal / 4.0);
        }
        for label in a.plan() {
            let mean = match label.modality() {
                Modality::OriginalArtwork => spec.original_arousal,
                Modality::ImmersiveProjection => spec.immersive_arousal,
                Modality::DisplayVideo => spec.display_arousal,
            };
            let arousal = (mean + spread.sample(&mut rng)).max(MIN_AROUSAL);
            targets.insert(label.to_string(), arousal);
            parts.push(ScriptPart {
                label: SegmentLabel::Condition(label),
                duration_s: spec.block_s,
                amplitudes: bands(spec.alpha_uv, arousal),
                artifacts: ArtifactSchedule::default(),
            });
        }
        scripts.push(ParticipantScript {
            participant_id: a.participant_id.clone(),
            group: a.group,
            order: a.order.clone(),
            parts,
            noise_std: spec.noise_std,
            transition_s: spec.transition_s,
            seed: rng.random(),
            target_arousal: targets,
        });
    }
    Ok(scripts)
}

/// Condition labels of a script, in order.
pub fn script_conditions(script: &ParticipantScript) -> Vec<ConditionLabel> {
    script.parts.iter().filter_map(|p| p.label.condition()).collect()
}

/// Write rendered sessions straight to disk in the recorder's layout, as if
/// received with a constant `offset_s` between device and reference clocks.
/// Accelerometer rows are written every `accel_every` EEG samples.
pub fn write_offline_session(
    dir: &Path,
    session_id: &str,
    scripts: &[ParticipantScript],
    sessions: &[SyntheticSession],
    offset_s: f64,
    accel_every: usize,
) -> Result<PathBuf, RecordingError> {
    assert_eq!(scripts.len(), sessions.len());
    assert!(accel_every > 0);
    let sample_rate = sessions.first().map_or(NOMINAL_SAMPLE_RATE, |s| s.sample_rate);
    let entries = scripts
        .iter()
        .map(|s| ParticipantEntry {
            participant_id: s.participant_id.clone(),
            group: s.group,
            order: s.order.clone(),
            osc_source: None,
            gaze_topic: format!("gaze/{}", s.participant_id),
        })
        .collect();
    let mut manifest = SessionManifest::new(session_id, sample_rate, entries);
    let mut events = CsvStream::<EventRow>::create(dir.join(&manifest.events_file))?;
    let mut all_markers: Vec<(f64, &str, &SyntheticMarker)> = Vec::new();
    for s in sessions {
        let id = &s.participant_id;
        let entry = |k: StreamKind| dir.join(&manifest.streams[&k.stream_id(id)].path);
        let mut eeg = CsvStream::<EegRow>::create(entry(StreamKind::Eeg))?;
        let mut acc = CsvStream::<AccelRow>::create(entry(StreamKind::Accel))?;
        let mut quality = CsvStream::<QualityRow>::create(entry(StreamKind::Quality))?;
        CsvStream::<OpticsRow>::create(entry(StreamKind::Optics))?;
        CsvStream::<GazeRow>::create(entry(StreamKind::Gaze))?;
        let mut last_q: Option<[Quality; 4]> = None;
        for (i, f) in s.frames.iter().enumerate() {
            let t_ref = f.device_ts + offset_s;
            eeg.append(&EegRow { t_ref, device_ts: f.device_ts, tp9: f.eeg[0], af7: f.eeg[1], af8: f.eeg[2], tp10: f.eeg[3] })?;
            if i % accel_every == 0 {
                acc.append(&AccelRow { t_ref, device_ts: f.device_ts, x: 0.0, y: 0.0, z: f.accel_mag, magnitude: f.accel_mag })?;
            }
            if last_q != Some(f.quality) {
                let q = f.quality;
                quality.append(&QualityRow { t_ref, device_ts: f.device_ts, tp9: q[0], af7: q[1], af8: q[2], tp10: q[3] })?;
                last_q = Some(q);
            }
        }
        for (stream, rows) in [(StreamKind::Eeg, eeg.rows()), (StreamKind::Accel, acc.rows()), (StreamKind::Quality, quality.rows())] {
            manifest.streams.get_mut(&stream.stream_id(id)).expect("declared stream").rows = rows;
        }
        eeg.flush()?;
        acc.flush()?;
        quality.flush()?;
        all_markers.extend(s.markers.iter().map(|m| (m.device_ts + offset_s, id.as_str(), m)));
    }
    all_markers.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (t_ref, id, m) in all_markers {
        events.append(&EventRow {
            t_ref,
            device_ts: Some(m.device_ts),
            participant: id.to_string(),
            kind: m.kind,
            label: m.label.clone(),
            source: EventSource::Osc,
        })?;
    }
    events.flush()?;
    manifest.partial = false;
    manifest.finalized_at = Some(manifest.created_at.clone());
    let path = dir.join(MANIFEST_FILE);
    manifest.write_atomic(&path)?;
    Ok(path)
}
