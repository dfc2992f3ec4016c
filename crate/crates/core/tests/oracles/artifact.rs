//! Artifact flags recomputed cell by cell from the criterion definitions.

use engage_core::session::{BaselineKind, SegmentLabel};
use engage_core::signal::{Quality, SampleFrame, Segment};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const DEVICE: u8 = 1;
pub const MOVEMENT: u8 = 1 << 1;
pub const AMPLITUDE: u8 = 1 << 2;
pub const GRADIENT: u8 = 1 << 3;

/// Random 256 Hz segment whose flag density varies with the seed: mixed-scale
/// EEG with exact threshold values sprinkled in, sparse poor-contact flags and
/// an accelerometer that sometimes drops below the coverage requirement.
pub fn random_segment(seed: u64, n: usize) -> Segment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = rng.random_range(0.2..2.0);
    let coverage = if rng.random_bool(0.1) { 0.8 } else { 0.97 };
    let narrow = Normal::new(0.0, 25.0 * scale).unwrap();
    let wide = Normal::new(0.0, 90.0 * scale).unwrap();
    let accel: Normal<f64> = Normal::new(9.81, 0.4).unwrap();
    let mut prev = [0.0f64; 4];
    let frames = (0..n)
        .map(|i| {
            let mut eeg = [0.0; 4];
            let mut quality = [Quality::Good; 4];
            for c in 0..4 {
                let u: f64 = rng.random();
                eeg[c] = if u < 0.004 {
                    if rng.random_bool(0.5) { 100.0 } else { -100.0 }
                } else if u < 0.008 {
                    prev[c] + if rng.random_bool(0.5) { 50.0 } else { -50.0 }
                } else if u < 0.05 {
                    wide.sample(&mut rng)
                } else {
                    narrow.sample(&mut rng)
                };
                if rng.random_bool(0.01) {
                    quality[c] = Quality::Poor;
                }
            }
            prev = eeg;
            let accel_mag = rng.random_bool(coverage).then(|| accel.sample(&mut rng).abs());
            SampleFrame { t_ref: i as f64 / 256.0, eeg, device_quality: quality, accel_mag }
        })
        .collect();
    Segment::new(format!("oracle-{seed}"), 256.0, SegmentLabel::Baseline(BaselineKind::EyesOpen), frames).unwrap()
}

pub struct OracleFlags {
    pub cells: Vec<[u8; 4]>,
    pub movement_checked: bool,
}

impl OracleFlags {
    pub fn valid_samples(&self) -> usize {
        self.cells.iter().filter(|row| row.iter().all(|&r| r == 0)).count()
    }
}

/// Reference flags with `raw` and `cleaned` taken as the same signal.
pub fn brute_force(seg: &Segment) -> OracleFlags {
    let f = seg.frames();
    let n = f.len();
    let readings: Vec<f64> = f.iter().filter_map(|x| x.accel_mag).collect();
    let movement_checked = n > 0 && readings.len() as f64 >= 0.9 * n as f64;
    let threshold = if movement_checked {
        let mut s = readings.clone();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pos = 0.95 * (s.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(s.len() - 1);
        s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
    } else {
        f64::INFINITY
    };
    let cells = (0..n)
        .map(|i| {
            let last_reading = (0..=i).rev().find_map(|j| f[j].accel_mag);
            let moving = movement_checked && last_reading.is_some_and(|a| a > threshold);
            std::array::from_fn(|c| {
                let mut r = 0;
                if f[i].device_quality[c] == Quality::Poor {
                    r |= DEVICE;
                }
                if moving {
                    r |= MOVEMENT;
                }
                if f[i].eeg[c].abs() > 100.0 {
                    r |= AMPLITUDE;
                }
                if i > 0 && (f[i].eeg[c] - f[i - 1].eeg[c]).abs() > 50.0 {
                    r |= GRADIENT;
                }
                r
            })
        })
        .collect();
    OracleFlags { cells, movement_checked }
}
