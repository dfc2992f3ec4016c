//! Butterworth and notch IIR design as second-order sections, and
//! forward-backward (zero-phase) application.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{Segment, SignalError};

/// One biquad section, `a[0] == 1`. A first-order section has `b[2] == a[2] == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sos {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Sos {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        let num = self.b[0] + z_inv * self.b[1] + z2 * self.b[2];
        let den = self.a[0] + z_inv * self.a[1] + z2 * self.a[2];
        num / den
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (self.a[0] + self.a[1] + self.a[2])
    }

    fn pole_radius(&self) -> f64 {
        let (a1, a2) = (self.a[1], self.a[2]);
        if a2 == 0.0 {
            return a1.abs();
        }
        let disc = a1 * a1 - 4.0 * a2;
        if disc < 0.0 {
            a2.sqrt()
        } else {
            let s = disc.sqrt();
            ((-a1 + s) / 2.0).abs().max(((-a1 - s) / 2.0).abs())
        }
    }

    /// Steady-state transposed-direct-form-II state for a unit step input.
    fn step_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        let z1 = self.b[2] - self.a[2] * g;
        let z0 = self.b[1] - self.a[1] * g + z1;
        [z0, z1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FilterKind {
    BandPass { low_hz: f64, high_hz: f64, order: usize },
    LowPass { cutoff_hz: f64, order: usize },
    Notch { center_hz: f64, q: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    #[serde(flatten)]
    pub kind: FilterKind,
    pub sample_rate: f64,
}

impl FilterSpec {
    pub fn validate(&self) -> Result<(), SignalError> {
        let fs = self.sample_rate;
        let nyq = fs / 2.0;
        let bad = |msg: String| Err(SignalError::InvalidSpec(msg));
        if !(fs.is_finite() && fs > 0.0) {
            return bad(format!("sample rate {fs}"));
        }
        match self.kind {
            FilterKind::BandPass { low_hz, high_hz, order } => {
                if order < 1 {
                    return bad("order must be >= 1".into());
                }
                if !(low_hz > 0.0 && low_hz < high_hz && high_hz < nyq) {
                    return bad(format!("need 0 < low ({low_hz}) < high ({high_hz}) < fs/2 ({nyq})"));
                }
            }
            FilterKind::LowPass { cutoff_hz, order } => {
                if order < 1 {
                    return bad("order must be >= 1".into());
                }
                if !(cutoff_hz > 0.0 && cutoff_hz < nyq) {
                    return bad(format!("need 0 < cutoff ({cutoff_hz}) < fs/2 ({nyq})"));
                }
            }
            FilterKind::Notch { center_hz, q } => {
                if !(center_hz > 0.0 && center_hz < nyq) {
                    return bad(format!("need 0 < center ({center_hz}) < fs/2 ({nyq})"));
                }
                if !(q > 0.0 && q.is_finite()) {
                    return bad(format!("q must be positive, got {q}"));
                }
            }
        }
        Ok(())
    }

    pub fn design(&self) -> Result<FilterCoefficients, SignalError> {
        self.validate()?;
        let fs = self.sample_rate;
        let sections = match self.kind {
            FilterKind::BandPass { low_hz, high_hz, order } => butter_bandpass(low_hz, high_hz, order, fs),
            FilterKind::LowPass { cutoff_hz, order } => butter_lowpass(cutoff_hz, order, fs),
            FilterKind::Notch { center_hz, q } => vec![notch_section(center_hz, q, fs)],
        };
        Ok(FilterCoefficients { spec: *self, sections })
    }
}

/// A designed filter as a cascade of second-order sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterCoefficients {
    pub spec: FilterSpec,
    sections: Vec<Sos>,
}

impl FilterCoefficients {
    pub fn sections(&self) -> &[Sos] {
        &self.sections
    }

    pub fn sample_rate(&self) -> f64 {
        self.spec.sample_rate
    }

    /// Single-pass complex response at `freq_hz`.
    pub fn response(&self, freq_hz: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz / self.spec.sample_rate;
        let z_inv = Complex64::from_polar(1.0, -w);
        self.sections.iter().map(|s| s.response(z_inv)).product()
    }

    /// Single-pass magnitude at `freq_hz`.
    pub fn magnitude(&self, freq_hz: f64) -> f64 {
        self.response(freq_hz).norm()
    }

    /// Edge length, `3 * (2 * sections + 1)` samples. Inputs must be longer
    /// than three times this, and this many samples at each end of a
    /// zero-phase output are treated as edge samples.
    pub fn warm_up_len(&self) -> usize {
        3 * (2 * self.sections.len() + 1)
    }

    /// Samples for the slowest pole's envelope to decay to 1%.
    pub fn settle_len(&self) -> usize {
        let r = self.sections.iter().map(Sos::pole_radius).fold(0.0_f64, f64::max);
        if r <= 0.0 {
            return 0;
        }
        if r >= 1.0 {
            return usize::MAX;
        }
        (0.01_f64.ln() / r.ln()).ceil() as usize
    }

    /// Reflection pad used by [`apply_zero_phase`] for an input of length `n`.
    pub fn pad_len(&self, n: usize) -> usize {
        self.warm_up_len()
            .max(self.settle_len())
            .min(n.saturating_sub(1))
    }

    /// Causal single pass with zero initial state.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for s in &self.sections {
            run_section(s, &mut y, [0.0, 0.0]);
        }
        y
    }

    /// Causal pass with the state initialized to the steady state for a
    /// constant input equal to `x[0]`.
    fn filter_steady(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        let mut level = x0;
        for s in &self.sections {
            let zi = s.step_state();
            run_section(s, x, [zi[0] * level, zi[1] * level]);
            level *= s.dc_gain();
        }
    }
}

fn run_section(s: &Sos, x: &mut [f64], mut z: [f64; 2]) {
    let [b0, b1, b2] = s.b;
    let [_, a1, a2] = s.a;
    for v in x.iter_mut() {
        let xi = *v;
        let yi = b0 * xi + z[0];
        z[0] = b1 * xi - a1 * yi + z[1];
        z[1] = b2 * xi - a2 * yi;
        *v = yi;
    }
}

/// Butterworth band-pass of the given order per pass.
pub fn design_bandpass(low_hz: f64, high_hz: f64, order: usize, fs: f64) -> Result<FilterCoefficients, SignalError> {
    FilterSpec { kind: FilterKind::BandPass { low_hz, high_hz, order }, sample_rate: fs }.design()
}

/// Butterworth low-pass of the given order per pass.
pub fn design_lowpass(cutoff_hz: f64, order: usize, fs: f64) -> Result<FilterCoefficients, SignalError> {
    FilterSpec { kind: FilterKind::LowPass { cutoff_hz, order }, sample_rate: fs }.design()
}

/// Second-order IIR notch; -3 dB bandwidth is `center_hz / q`.
pub fn design_notch(center_hz: f64, q: f64, fs: f64) -> Result<FilterCoefficients, SignalError> {
    FilterSpec { kind: FilterKind::Notch { center_hz, q }, sample_rate: fs }.design()
}

/// Forward-backward filtering with mirror padding. The output has the input's
/// length and the squared single-pass magnitude with zero phase.
pub fn apply_zero_phase(coeffs: &FilterCoefficients, x: &[f64]) -> Result<Vec<f64>, SignalError> {
    let min = 3 * coeffs.warm_up_len();
    if x.len() <= min {
        return Err(SignalError::TooShort { len: x.len(), min });
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(SignalError::NonFinite(i));
    }
    let n = x.len();
    let pad = coeffs.pad_len(n);

    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend(x[1..=pad].iter().rev());
    ext.extend_from_slice(x);
    ext.extend(x[n - 1 - pad..n - 1].iter().rev());

    coeffs.filter_steady(&mut ext);
    ext.reverse();
    coeffs.filter_steady(&mut ext);
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub low_hz: f64,
    pub high_hz: f64,
    pub order: usize,
    /// Notch `(center_hz, q)`; `None` disables the notch.
    pub notch: Option<(f64, f64)>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { low_hz: 0.5, high_hz: 50.0, order: 5, notch: Some((50.0, 30.0)) }
    }
}

/// Band-pass then notch each channel independently (zero-phase).
pub fn preprocess(seg: &Segment) -> Result<Segment, SignalError> {
    preprocess_with(seg, &PreprocessConfig::default())
}

pub fn preprocess_with(seg: &Segment, cfg: &PreprocessConfig) -> Result<Segment, SignalError> {
    let fs = seg.sample_rate;
    let bp = design_bandpass(cfg.low_hz, cfg.high_hz, cfg.order, fs)?;
    let notch = cfg.notch.map(|(c, q)| design_notch(c, q, fs)).transpose()?;
    let mut out: [Vec<f64>; 4] = Default::default();
    for (slot, x) in out.iter_mut().zip(seg.channels()) {
        let mut y = apply_zero_phase(&bp, &x)?;
        if let Some(n) = &notch {
            y = apply_zero_phase(n, &y)?;
        }
        *slot = y;
    }
    seg.with_channels(&out)
}

// ── design internals ──────────────────────────────────────

fn butter_prototype(order: usize) -> Vec<Complex64> {
    let n = order as f64;
    (0..order)
        .map(|k| {
            let m = -(n - 1.0) + 2.0 * k as f64;
            -Complex64::from_polar(1.0, PI * m / (2.0 * n))
        })
        .collect()
}

fn prewarp(freq_hz: f64, fs: f64) -> f64 {
    2.0 * fs * (PI * freq_hz / fs).tan()
}

fn bilinear(p: Complex64, fs: f64) -> Complex64 {
    let fs2 = 2.0 * fs;
    (fs2 + p) / (fs2 - p)
}

fn butter_bandpass(low_hz: f64, high_hz: f64, order: usize, fs: f64) -> Vec<Sos> {
    let wl = prewarp(low_hz, fs);
    let wh = prewarp(high_hz, fs);
    let bw = wh - wl;
    let w0 = (wl * wh).sqrt();
    let mut poles = Vec::with_capacity(2 * order);
    for p in butter_prototype(order) {
        let half = p * (bw / 2.0);
        let root = (half * half - w0 * w0).sqrt();
        poles.push(bilinear(half + root, fs));
        poles.push(bilinear(half - root, fs));
    }
    // each section gets one zero at z = 1 and one at z = -1
    let mut sections: Vec<Sos> = pair_poles(&poles)
        .into_iter()
        .map(|a| Sos { b: [1.0, 0.0, -1.0], a })
        .collect();
    let f0 = fs / PI * (w0 / (2.0 * fs)).atan();
    normalize_sections(&mut sections, f0, fs);
    sections
}

fn butter_lowpass(cutoff_hz: f64, order: usize, fs: f64) -> Vec<Sos> {
    let wc = prewarp(cutoff_hz, fs);
    let poles: Vec<Complex64> = butter_prototype(order).into_iter().map(|p| bilinear(p * wc, fs)).collect();
    let mut sections: Vec<Sos> = pair_poles(&poles)
        .into_iter()
        .map(|a| {
            if a[2] == 0.0 {
                Sos { b: [1.0, 1.0, 0.0], a }
            } else {
                Sos { b: [1.0, 2.0, 1.0], a }
            }
        })
        .collect();
    normalize_sections(&mut sections, 0.0, fs);
    sections
}

fn notch_section(center_hz: f64, q: f64, fs: f64) -> Sos {
    let w0 = 2.0 * PI * center_hz / fs;
    let bw = w0 / q;
    let gain = 1.0 / (1.0 + (bw / 2.0).tan());
    let c = w0.cos();
    Sos {
        b: [gain, -2.0 * gain * c, gain],
        a: [1.0, -2.0 * gain * c, 2.0 * gain - 1.0],
    }
}

/// Group digital poles into denominator polynomials. Complex poles pair with
/// their conjugates, real poles pair with each other, and a leftover real
/// pole becomes a first-order section.
fn pair_poles(poles: &[Complex64]) -> Vec<[f64; 3]> {
    const TOL: f64 = 1e-12;
    let mut out = Vec::new();
    let mut reals: Vec<f64> = Vec::new();
    for p in poles {
        if p.im > TOL {
            out.push([1.0, -2.0 * p.re, p.norm_sqr()]);
        } else if p.im.abs() <= TOL {
            reals.push(p.re);
        }
    }
    reals.sort_by(|a, b| b.total_cmp(a));
    let mut chunks = reals.chunks_exact(2);
    for pair in &mut chunks {
        out.push([1.0, -(pair[0] + pair[1]), pair[0] * pair[1]]);
    }
    if let [p] = chunks.remainder() {
        out.push([1.0, -p, 0.0]);
    }
    out
}

fn normalize_sections(sections: &mut [Sos], ref_hz: f64, fs: f64) {
    let z_inv = Complex64::from_polar(1.0, -2.0 * PI * ref_hz / fs);
    for s in sections.iter_mut() {
        let g = s.response(z_inv).norm();
        for b in s.b.iter_mut() {
            *b /= g;
        }
    }
}
