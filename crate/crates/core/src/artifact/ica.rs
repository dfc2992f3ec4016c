//! Symmetric FastICA (log-cosh contrast) over the four EEG channels with a
//! conservative two-part removal rule.

use nalgebra::{Matrix4, SymmetricEigen, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::{apply_zero_phase, design_lowpass, Channel, Segment, SignalError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IcaError {
    #[error("segment too short for ICA: {len} samples, need at least {min}")]
    TooShort { len: usize, min: usize },
    #[error("ICA did not converge within {0} iterations")]
    NotConverged(usize),
    #[error("channel covariance is ill-conditioned (condition number {0:.3e})")]
    IllConditioned(f64),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcaConfig {
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    pub min_len: usize,
    /// |excess kurtosis| must exceed this for any removal.
    pub kurtosis_threshold: f64,
    pub accel_corr_threshold: f64,
    /// Fraction of component power below `low_freq_hz`.
    pub low_freq_fraction: f64,
    pub low_freq_hz: f64,
    /// Each frontal weight must exceed this multiple of the largest temporal weight.
    pub frontal_ratio: f64,
    pub max_condition: f64,
}

impl Default for IcaConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            max_iter: 500,
            tol: 1e-6,
            min_len: 512,
            kurtosis_threshold: 8.0,
            accel_corr_threshold: 0.5,
            low_freq_fraction: 0.8,
            low_freq_hz: 4.0,
            frontal_ratio: 2.0,
            max_condition: 1e8,
        }
    }
}

/// Which branch of the removal rule fired.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "criterion", rename_all = "snake_case")]
pub enum RemovalCriterion {
    Motion { kurtosis: f64, accel_corr: f64 },
    Blink { kurtosis: f64, low_freq_fraction: f64, frontal_ratio: f64 },
}

/// Diagnostics for one component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentVerdict {
    pub index: usize,
    pub kurtosis: f64,
    /// `None` when the segment lacks accelerometer coverage.
    pub accel_corr: Option<f64>,
    pub low_freq_fraction: f64,
    /// min(|AF7|, |AF8|) / max(|TP9|, |TP10|) of the mixing column.
    pub frontal_ratio: f64,
    pub removal: Option<RemovalCriterion>,
}

#[derive(Debug, Clone)]
pub struct IcaResult {
    /// Columns are component topographies; `channels = mixing * sources + mean`.
    pub mixing: Matrix4<f64>,
    pub unmixing: Matrix4<f64>,
    pub mean: [f64; 4],
    pub sources: [Vec<f64>; 4],
    pub removed: Vec<usize>,
    pub verdicts: Vec<ComponentVerdict>,
    pub iterations: usize,
}

impl IcaResult {
    /// Channel data with the listed components zeroed.
    pub fn reconstruct(&self, removed: &[usize]) -> [Vec<f64>; 4] {
        let n = self.sources[0].len();
        let mut out: [Vec<f64>; 4] = std::array::from_fn(|c| vec![self.mean[c]; n]);
        for k in (0..4).filter(|k| !removed.contains(k)) {
            for (c, row) in out.iter_mut().enumerate() {
                let w = self.mixing[(c, k)];
                for (o, s) in row.iter_mut().zip(&self.sources[k]) {
                    *o += w * s;
                }
            }
        }
        out
    }

    /// The segment with removed components zeroed.
    pub fn cleaned(&self, seg: &Segment) -> Result<Segment, SignalError> {
        seg.with_channels(&self.reconstruct(&self.removed))
    }

    pub fn rationale(&self) -> impl Iterator<Item = (usize, RemovalCriterion)> + '_ {
        self.verdicts.iter().filter_map(|v| v.removal.map(|r| (v.index, r)))
    }
}

/// Decompose with default thresholds and the given seed.
pub fn run_ica(seg: &Segment, seed: u64) -> Result<IcaResult, IcaError> {
    run_ica_with(seg, &IcaConfig { seed, ..IcaConfig::default() })
}

pub fn run_ica_with(seg: &Segment, cfg: &IcaConfig) -> Result<IcaResult, IcaError> {
    let n = seg.len();
    if n < cfg.min_len {
        return Err(IcaError::TooShort { len: n, min: cfg.min_len });
    }
    let x = seg.channels();
    let mean: [f64; 4] = std::array::from_fn(|c| x[c].iter().sum::<f64>() / n as f64);
    let xc: [Vec<f64>; 4] = std::array::from_fn(|c| x[c].iter().map(|v| v - mean[c]).collect());

    let cov = gram(&xc, &xc) / n as f64;
    let eig = SymmetricEigen::new(cov);
    let (lo, hi) = eig.eigenvalues.iter().fold((f64::INFINITY, 0.0_f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if lo <= 0.0 || hi / lo > cfg.max_condition {
        return Err(IcaError::IllConditioned(if lo <= 0.0 { f64::INFINITY } else { hi / lo }));
    }
    let d_inv_sqrt = Matrix4::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()));
    let whitening = d_inv_sqrt * eig.eigenvectors.transpose();
    let z = apply(&whitening, &xc);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = Matrix4::from_fn(|_, _| -> f64 { StandardNormal.sample(&mut rng) });
    w = sym_decorrelate(&w);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        iterations += 1;
        let w_new = sym_decorrelate(&fastica_step(&w, &z));
        let delta = (w_new * w.transpose())
            .diagonal()
            .iter()
            .map(|d| (d.abs() - 1.0).abs())
            .fold(0.0, f64::max);
        w = w_new;
        if delta < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(IcaError::NotConverged(cfg.max_iter));
    }

    let unmixing = w * whitening;
    let mixing = unmixing.try_inverse().ok_or(IcaError::IllConditioned(f64::INFINITY))?;
    let sv = mixing.singular_values();
    let cond = sv.max() / sv.min();
    if !cond.is_finite() || cond > cfg.max_condition {
        return Err(IcaError::IllConditioned(cond));
    }
    let sources = apply(&unmixing, &xc);

    let accel = accel_series(seg);
    let lowpass = design_lowpass(cfg.low_freq_hz, 4, seg.sample_rate)?;
    let mut verdicts = Vec::with_capacity(4);
    for (k, s) in sources.iter().enumerate() {
        let kurt = excess_kurtosis(s);
        let accel_corr = accel.as_ref().map(|a| pearson(s, a));
        let low = apply_zero_phase(&lowpass, s)?;
        let low_freq_fraction = mean_square(&low) / mean_square(s);
        let col = mixing.column(k);
        let temporal = col[Channel::Tp9.index()].abs().max(col[Channel::Tp10.index()].abs());
        let frontal = col[Channel::Af7.index()].abs().min(col[Channel::Af8.index()].abs());
        let frontal_ratio = if temporal > 0.0 { frontal / temporal } else { f64::INFINITY };

        let removal = if kurt.abs() <= cfg.kurtosis_threshold {
            None
        } else if let Some(r) = accel_corr.filter(|r| r.abs() > cfg.accel_corr_threshold) {
            Some(RemovalCriterion::Motion { kurtosis: kurt, accel_corr: r })
        } else if low_freq_fraction > cfg.low_freq_fraction && frontal_ratio > cfg.frontal_ratio {
            Some(RemovalCriterion::Blink { kurtosis: kurt, low_freq_fraction, frontal_ratio })
        } else {
            None
        };
        verdicts.push(ComponentVerdict { index: k, kurtosis: kurt, accel_corr, low_freq_fraction, frontal_ratio, removal });
    }
    let removed = verdicts.iter().filter(|v| v.removal.is_some()).map(|v| v.index).collect();
    Ok(IcaResult { mixing, unmixing, mean, sources, removed, verdicts, iterations })
}

/// `W+ = E[z g(wᵀz)] - E[g'(wᵀz)] w` for every row, with `g = tanh`.
fn fastica_step(w: &Matrix4<f64>, z: &[Vec<f64>; 4]) -> Matrix4<f64> {
    let n = z[0].len();
    let mut out = Matrix4::zeros();
    for i in 0..4 {
        let mut acc = Vector4::zeros();
        let mut gp = 0.0;
        for t in 0..n {
            let zt = Vector4::new(z[0][t], z[1][t], z[2][t], z[3][t]);
            let g = w.row(i).dot(&zt.transpose()).tanh();
            acc += zt * g;
            gp += 1.0 - g * g;
        }
        let row = acc / n as f64 - w.row(i).transpose() * (gp / n as f64);
        out.set_row(i, &row.transpose());
    }
    out
}

/// `(W Wᵀ)^{-1/2} W`.
fn sym_decorrelate(w: &Matrix4<f64>) -> Matrix4<f64> {
    let eig = SymmetricEigen::new(w * w.transpose());
    let d = Matrix4::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.max(f64::MIN_POSITIVE).sqrt()));
    eig.eigenvectors * d * eig.eigenvectors.transpose() * w
}

fn gram(a: &[Vec<f64>; 4], b: &[Vec<f64>; 4]) -> Matrix4<f64> {
    Matrix4::from_fn(|i, j| a[i].iter().zip(&b[j]).map(|(x, y)| x * y).sum())
}

fn apply(m: &Matrix4<f64>, x: &[Vec<f64>; 4]) -> [Vec<f64>; 4] {
    let n = x[0].len();
    std::array::from_fn(|i| (0..n).map(|t| (0..4).map(|j| m[(i, j)] * x[j][t]).sum()).collect())
}

/// Accelerometer magnitude with gaps filled forward, or `None` when fewer
/// than 90% of frames carry a reading.
fn accel_series(seg: &Segment) -> Option<Vec<f64>> {
    let frames = seg.frames();
    let present = frames.iter().filter(|f| f.accel_mag.is_some()).count();
    if (present as f64) < super::MIN_ACCEL_COVERAGE * frames.len() as f64 {
        return None;
    }
    let first = frames.iter().find_map(|f| f.accel_mag)?;
    let mut last = first;
    Some(
        frames
            .iter()
            .map(|f| {
                if let Some(a) = f.accel_mag {
                    last = a;
                }
                last
            })
            .collect(),
    )
}

fn mean_square(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

pub(crate) fn excess_kurtosis(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let (m2, m4) = x.iter().fold((0.0, 0.0), |(m2, m4), v| {
        let d2 = (v - m) * (v - m);
        (m2 + d2, m4 + d2 * d2)
    });
    let (m2, m4) = (m2 / n, m4 / n);
    if m2 == 0.0 {
        return 0.0;
    }
    m4 / (m2 * m2) - 3.0
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}
