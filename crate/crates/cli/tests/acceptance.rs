//! Acceptance gate. Every criterion runs at its stated tolerance and prints
//! one PASS or FAIL line; the binary exits non-zero when any criterion fails.
//!
//! Positional arguments select criteria by substring:
//! `cargo test -p engage-cli --test acceptance -- wire crash`.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::f64::consts::{E, PI};
use std::fmt::Display;
use std::io::{BufRead, BufReader};
use std::panic::catch_unwind;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use engage_core::artifact::{screen_segment, QualityMask, Validation, MIN_VALID_SAMPLES};
use engage_core::engagement::{apply_z_pass, arousal, build_engagement_record, faa, BaselineRecord, EngagementRecord};
use engage_core::osc::{decode, encode, OscBundle, OscMessage, OscPacket, OscType, TimeTag};
use engage_core::recording::{
    read_stream, AccelRow, EegRow, EventRow, GazeRow, OpticsRow, QualityRow, SessionManifest, StreamKind, MANIFEST_FILE,
};
use engage_core::session::{
    analyze_session, compare_modalities, load_session, AnalysisConfig, BaselineKind, ConditionLabel, Group, LogEvent,
    Modality, SegmentLabel,
};
use engage_core::signal::{apply_zero_phase, design_bandpass, design_notch, FilterCoefficients, Quality, SampleFrame, Segment};
use engage_core::spectral::{band_power, relative_band_fraction, segment_band_powers, Band, BandPowerTable};
use engage_core::stats::{mann_whitney_u, paired_t, welch_t};
use engage_core::sync::{ReferenceClock, ScaledClock, SystemClock};
use engage_core::synth::{cohort, render_participant, CohortSpec, ParticipantScript, SyntheticSession};
use engage_ingest::{start, IngestConfig, ParticipantConfig, ReplayConfig, Replayer};
use oracles::artifact::{brute_force, random_segment};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

trait Context<T> {
    fn ctx(self, what: &str) -> Result<T, String>;
}

impl<T, E: Display> Context<T> for Result<T, E> {
    fn ctx(self, what: &str) -> Result<T, String> {
        self.map_err(|e| format!("{what}: {e}"))
    }
}

const FS: f64 = 256.0;

fn main() {
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("filter suite", filter_suite),
        ("artifact suite", artifact_suite),
        ("spectral oracle", spectral_oracle),
        ("index identities", index_identities),
        ("z-pass", z_pass),
        ("stats oracles", stats_oracles),
        ("end-to-end monte carlo", monte_carlo),
        ("wire round-trip", wire_round_trip),
        ("crash safety", crash_safety),
        ("no secondary component", no_secondary_component),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(run).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match &outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1} s]"),
            Err(why) => {
                println!("FAIL  {name}: {why} [{secs:.1} s]");
                failed.push(name);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("{} criteria failed: {}", failed.len(), failed.join(", "));
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- filters

/// Single-pass magnitude from the raw section coefficients, evaluating each
/// numerator and denominator polynomial at e^{-jw} by hand.
fn cascade_magnitude(c: &FilterCoefficients, f: f64) -> f64 {
    let w = 2.0 * PI * f / c.sample_rate();
    let poly = |k: [f64; 3]| {
        let re = k[0] + k[1] * w.cos() + k[2] * (2.0 * w).cos();
        let im = -(k[1] * w.sin() + k[2] * (2.0 * w).sin());
        re.hypot(im)
    };
    c.sections().iter().map(|s| poly(s.b) / poly(s.a)).product()
}

/// Amplitude of the `f` Hz component of `y[lo..hi]`; the window must hold
/// a whole number of periods.
fn amplitude_at(y: &[f64], f: f64, lo: usize, hi: usize) -> f64 {
    let (mut s, mut c) = (0.0, 0.0);
    for (i, v) in y.iter().enumerate().take(hi).skip(lo) {
        let ph = 2.0 * PI * f * i as f64 / FS;
        s += v * ph.sin();
        c += v * ph.cos();
    }
    let n = (hi - lo) as f64;
    2.0 * (s * s + c * c).sqrt() / n
}

fn tone(f: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (2.0 * PI * f * i as f64 / FS).sin()).collect()
}

fn filter_suite() -> Outcome {
    let t0 = Instant::now();
    let bp = design_bandpass(0.5, 50.0, 5, FS).ctx("band-pass")?;
    let notch = design_notch(50.0, 30.0, FS).ctx("notch")?;
    // 20 s of signal; a 2048-sample middle window holds 80 periods at 10 Hz and 400 at 50 Hz
    let n = 5120;
    let (lo, hi) = (1536, 3584);

    let analytic_10 = cascade_magnitude(&bp, 10.0).powi(2);
    let measured_10 = amplitude_at(&apply_zero_phase(&bp, &tone(10.0, n)).ctx("filtering")?, 10.0, lo, hi);
    ensure!((analytic_10 - 1.0).abs() <= 0.01, "10 Hz zero-phase gain {analytic_10} from coefficients");
    ensure!((measured_10 - 1.0).abs() <= 0.01, "10 Hz zero-phase gain {measured_10} measured");

    let dc = cascade_magnitude(&bp, 0.0);
    ensure!(dc <= 1e-12, "DC magnitude {dc}");
    let y = apply_zero_phase(&bp, &vec![100.0; n]).ctx("filtering")?;
    let dc_measured = y[lo..hi].iter().fold(0.0f64, |m, v| m.max(v.abs())) / 100.0;
    ensure!(dc_measured < 1e-6, "constant input leaks {dc_measured} through");

    let depth = cascade_magnitude(&notch, 50.0).powi(2);
    ensure!(depth < 1e-6, "50 Hz zero-phase depth {depth}");
    let depth_measured = amplitude_at(&apply_zero_phase(&notch, &tone(50.0, n)).ctx("filtering")?, 50.0, lo, hi);
    ensure!(depth_measured < 1e-6, "50 Hz tone keeps {depth_measured} of its amplitude");

    let mut worst_lag = 0i64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 2.0).unwrap();
        let parts: Vec<(f64, f64, f64)> =
            (0..4).map(|_| (rng.random_range(1.0..40.0), rng.random_range(1.0..40.0), rng.random_range(0.0..2.0 * PI))).collect();
        let x: Vec<f64> = (0..2048)
            .map(|i| {
                let t = i as f64 / FS;
                parts.iter().map(|(a, f, ph)| a * (2.0 * PI * f * t + ph).sin()).sum::<f64>() + noise.sample(&mut rng)
            })
            .collect();
        for c in [&bp, &notch] {
            let y = apply_zero_phase(c, &x).ctx("filtering")?;
            let xcorr = |lag: i64| -> f64 { (256..x.len() - 256).map(|i| x[i] * y[(i as i64 + lag) as usize]).sum() };
            let best = (-20i64..=20).max_by(|a, b| xcorr(*a).total_cmp(&xcorr(*b))).unwrap();
            worst_lag = if best.abs() > worst_lag.abs() { best } else { worst_lag };
        }
    }
    ensure!(worst_lag.abs() <= 1, "cross-correlation peak at lag {worst_lag}");

    let secs = t0.elapsed().as_secs_f64();
    ensure!(secs < 5.0, "took {secs:.2} s");
    Ok(format!(
        "10 Hz gain {measured_10:.5} (coefficients {analytic_10:.5}), DC {dc:.1e}, 50 Hz depth {depth:.1e} (tone {depth_measured:.1e}), worst lag {worst_lag}"
    ))
}

// ---------------------------------------------------------------- artifacts

fn artifact_suite() -> Outcome {
    let t0 = Instant::now();
    let (mut accepted, mut rejected, mut cells) = (0, 0, 0usize);
    for seed in 0..100 {
        let seg = random_segment(seed, 1000);
        let oracle = brute_force(&seg);
        let report = screen_segment(&seg, &seg, MIN_VALID_SAMPLES).ctx("screening")?;
        ensure!(report.movement_checked == oracle.movement_checked, "seed {seed}: movement coverage disagrees");
        let mask = report.validation.mask();
        for (i, row) in oracle.cells.iter().enumerate() {
            for (c, &bits) in row.iter().enumerate() {
                let got = mask.reasons(i, c).bits();
                ensure!(got == bits, "seed {seed} sample {i} channel {c}: flags {got:#06b}, oracle {bits:#06b}");
                cells += 1;
            }
        }
        let valid = oracle.valid_samples();
        match &report.validation {
            Validation::Accepted(_) if valid >= 100 => accepted += 1,
            Validation::Rejected { valid_samples, .. } if *valid_samples == valid && valid < 100 => rejected += 1,
            v => return Err(format!("seed {seed}: {} with {valid} valid samples", if v.is_accepted() { "accepted" } else { "rejected" })),
        }
    }
    ensure!(accepted > 0 && rejected > 0, "generator exercised only one outcome ({accepted} accepted, {rejected} rejected)");

    let with_valid = |valid: usize| {
        let frames = (0..1000)
            .map(|i| SampleFrame {
                t_ref: i as f64 / FS,
                eeg: [0.0; 4],
                device_quality: if i < valid { [Quality::Good; 4] } else { [Quality::Good, Quality::Poor, Quality::Good, Quality::Good] },
                accel_mag: Some(9.81),
            })
            .collect();
        Segment::new("edge", FS, SegmentLabel::Baseline(BaselineKind::EyesOpen), frames).unwrap()
    };
    let at = |valid| screen_segment(&with_valid(valid), &with_valid(valid), MIN_VALID_SAMPLES).map(|r| r.validation.is_accepted());
    ensure!(at(100).ctx("screening")?, "100 valid samples rejected");
    ensure!(!at(99).ctx("screening")?, "99 valid samples accepted");

    let secs = t0.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.2} s");
    Ok(format!("{cells} cells agree over 100 seeds ({accepted} accepted, {rejected} rejected); boundary 99 rejected, 100 accepted"))
}

// ---------------------------------------------------------------- spectral

const CENTERS: [f64; 5] = [2.0, 6.0, 10.5, 21.5, 40.0];

fn spectral_oracle() -> Outcome {
    let (mut worst_in, mut worst_leak) = (0.0f64, 0.0f64);
    let valid = vec![true; 2048];
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (k, band) in Band::ALL.into_iter().enumerate() {
            let a = rng.random_range(5.0..30.0);
            let ph = rng.random_range(0.0..2.0 * PI);
            let x: Vec<f64> = (0..2048).map(|i| a * (2.0 * PI * CENTERS[k] * i as f64 / FS + ph).sin()).collect();
            let truth = a * a / 2.0;
            for other in Band::ALL {
                let p = band_power(&x, &other.definition(), FS, &valid).ctx("band power")?;
                if other == band {
                    let err = (p - truth).abs() / truth;
                    worst_in = worst_in.max(err);
                    ensure!(err < 0.05, "seed {seed} {band}: {p} vs {truth}");
                } else {
                    let leak = p / truth;
                    worst_leak = worst_leak.max(leak);
                    ensure!(leak < 0.01, "seed {seed}: {band} tone leaks {leak} into {other}");
                }
            }
        }
    }

    let mut worst_sum = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let noise = Normal::new(0.0, rng.random_range(0.0..5.0)).unwrap();
        let amps: Vec<[f64; 5]> = (0..4).map(|_| std::array::from_fn(|_| rng.random_range(0.5..30.0))).collect();
        let frames = (0..2048)
            .map(|i| {
                let t = i as f64 / FS;
                let eeg = std::array::from_fn(|c| {
                    CENTERS.iter().zip(amps[c]).map(|(f, a)| a * (2.0 * PI * f * t).sin()).sum::<f64>() + noise.sample(&mut rng)
                });
                SampleFrame { t_ref: t, eeg, device_quality: [Quality::Good; 4], accel_mag: None }
            })
            .collect();
        let seg = Segment::new("mix", FS, SegmentLabel::Baseline(BaselineKind::EyesOpen), frames).ctx("segment")?;
        let table = segment_band_powers(&seg, &QualityMask::all_valid(seg.len())).ctx("band powers")?;
        let sum: f64 = Band::ALL.iter().map(|&b| relative_band_fraction(&table, b)).sum::<Result<f64, _>>().ctx("fraction")?;
        worst_sum = worst_sum.max((sum - 1.0).abs());
    }
    ensure!(worst_sum <= 1e-12, "relative fractions miss 1 by {worst_sum}");
    Ok(format!("in-band error {:.2}%, leakage {:.3}%, fraction sum off by {worst_sum:.1e}", 100.0 * worst_in, 100.0 * worst_leak))
}

// ---------------------------------------------------------------- indexes

fn table(id: &str, label: SegmentLabel, powers: [[f64; 5]; 4]) -> BandPowerTable {
    BandPowerTable::new(id, label, powers, 1000)
}

fn index_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut draw = || 10f64.powf(rng.random_range(-3.0..4.0));
    let (mut worst_e, mut worst_scale, mut worst_arousal) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let (a, b, l, k) = (draw(), draw(), draw(), draw());
        let sym = faa(a, b, b, a).ctx("faa")?;
        ensure!(sym == 0.0, "symmetric powers ({a}, {b}, {b}, {a}) give {sym}");
        let e_ratio = faa(l, l, E * l, E * l).ctx("faa")?;
        worst_e = worst_e.max((e_ratio - 1.0).abs());

        let p = [draw(), draw(), draw(), draw()];
        let f = faa(p[0], p[1], p[2], p[3]).ctx("faa")?;
        let swapped = faa(p[3], p[2], p[1], p[0]).ctx("faa")?;
        ensure!(swapped == -f, "swap of {p:?}: {f} vs {swapped}");
        let scaled = faa(k * p[0], k * p[1], k * p[2], k * p[3]).ctx("faa")?;
        worst_scale = worst_scale.max((scaled - f).abs());
        let right = (p[2] + p[3]) / 2.0 > (p[0] + p[1]) / 2.0;
        ensure!((f > 0.0) == right || f == 0.0, "sign of {f} for {p:?}");

        let (beta, alpha) = (draw(), draw());
        let r = arousal(beta, alpha).ctx("arousal")?;
        ensure!(r == beta / alpha, "arousal({beta}, {alpha}) = {r}");
        ensure!(arousal(alpha, alpha).ctx("arousal")? == 1.0, "beta = alpha is not 1");
        worst_arousal = worst_arousal.max((arousal(k * beta, k * alpha).ctx("arousal")? - r).abs() / r);
    }
    ensure!(worst_e <= 1e-12, "e-ratio inputs miss 1 by {worst_e}");
    ensure!(worst_scale <= 1e-12, "FAA moves {worst_scale} under scaling");
    ensure!(worst_arousal <= 1e-12, "arousal moves {worst_arousal} (relative) under scaling");
    ensure!(arousal(30.0, 10.0).ctx("arousal")? == 3.0, "arousal(30, 10) != 3");
    ensure!(arousal(1.0, 0.0).is_err(), "zero alpha accepted");
    ensure!(faa(0.0, 10.0, 10.0, 10.0).is_err(), "zero power accepted by FAA");

    // doubled alpha against the subject's baseline: corrected alpha equals
    // the baseline alpha and arousal halves
    let eo_powers = [4.0, 3.0, 10.0, 5.0, 1.0];
    let mut task_powers = eo_powers;
    task_powers[2] *= 2.0;
    let eo = SegmentLabel::Baseline(BaselineKind::EyesOpen);
    let base = BaselineRecord::new("S1", Group::DisplayGroup, table("eo", eo, [eo_powers; 4]), None).ctx("baseline")?;
    let cond = ConditionLabel::new(Modality::DisplayVideo, 1).ctx("label")?;
    let rec = build_engagement_record(&table("t", SegmentLabel::Condition(cond), [task_powers; 4]), "S1", &base, cond).ctx("record")?;
    ensure!(rec.band_corrected[2] == 10.0, "alpha corrected {}", rec.band_corrected[2]);
    ensure!(rec.arousal == base.eo_arousal / 2.0, "arousal {} vs baseline {}", rec.arousal, base.eo_arousal);
    ensure!(rec.faa_minus_eo == 0.0, "uniform doubling moved FAA by {}", rec.faa_minus_eo);
    Ok(format!(
        "10000 draws: symmetric 0 and swap exact, e-ratio off by {worst_e:.1e}, FAA scaling {worst_scale:.1e}, arousal scaling {worst_arousal:.1e}"
    ))
}

// ---------------------------------------------------------------- z-pass

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt())
}

fn z_pass() -> Outcome {
    let (mut worst_mean, mut worst_sd, mut checked) = (0.0f64, 0.0f64, 0usize);
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // power scales differ by orders of magnitude between subjects
        let subjects = rng.random_range(1..12);
        let mut records: Vec<EngagementRecord> = Vec::new();
        for s in 0..subjects {
            let id = format!("S{s:02}");
            let scale = 10f64.powf(rng.random_range(-1.0..3.0));
            let powers = |rng: &mut ChaCha8Rng| -> [[f64; 5]; 4] {
                std::array::from_fn(|_| std::array::from_fn(|_| scale * rng.random_range(0.1..10.0)))
            };
            let group = if s % 2 == 0 { Group::ImmersiveGroup } else { Group::DisplayGroup };
            let eo = SegmentLabel::Baseline(BaselineKind::EyesOpen);
            let base = BaselineRecord::new(&id, group, table("eo", eo, powers(&mut rng)), None).ctx("baseline")?;
            let blocks = rng.random_range(2..9);
            for k in 0..blocks {
                let modality = if k % 2 == 0 { Modality::OriginalArtwork } else { group.interpretive() };
                let cond = ConditionLabel::new(modality, (k % 3 + 1) as u8).ctx("label")?;
                let t = table(&format!("{id}:{k}"), SegmentLabel::Condition(cond), powers(&mut rng));
                records.push(build_engagement_record(&t, &id, &base, cond).ctx("record")?);
            }
        }
        let degenerate = apply_z_pass(&mut records);
        ensure!(degenerate.is_empty(), "seed {seed}: {degenerate:?}");
        for s in 0..subjects {
            let id = format!("S{s:02}");
            let mine: Vec<&EngagementRecord> = records.iter().filter(|r| r.subject_id == id).collect();
            for b in 0..5 {
                let raw: Vec<f64> = mine.iter().map(|r| r.band_corrected[b]).collect();
                let z: Vec<f64> = mine.iter().map(|r| r.band_corrected_z.expect("z filled")[b]).collect();
                let (m, sd) = mean_sd(&z);
                worst_mean = worst_mean.max(m.abs());
                worst_sd = worst_sd.max((sd - 1.0).abs());
                ensure!(m.abs() < 1e-10 && (sd - 1.0).abs() < 1e-10, "seed {seed} {id} band {b}: mean {m}, sd {sd}");
                // and each value is the recomputed standard score
                let (rm, rsd) = mean_sd(&raw);
                for (v, zv) in raw.iter().zip(&z) {
                    ensure!(((v - rm) / rsd - zv).abs() < 1e-9, "seed {seed} {id} band {b}: z {zv} vs {}", (v - rm) / rsd);
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} subject-band columns over 200 cohorts: max |mean| {worst_mean:.1e}, max |sd-1| {worst_sd:.1e}"))
}

// ---------------------------------------------------------------- stats

fn normal_sample(rng: &mut ChaCha8Rng, n: usize, mean: f64, sd: f64) -> Vec<f64> {
    let d = Normal::new(mean, sd).unwrap();
    (0..n).map(|_| d.sample(rng)).collect()
}

fn stats_oracles() -> Outcome {
    // exact Mann-Whitney against full enumeration, every size pair with n1 + n2 <= 12
    let pairs: Vec<(usize, usize)> = (2..=10).flat_map(|a| (2..=12 - a).map(move |b| (a, b))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst_mw = 0.0f64;
    for i in 0..500 {
        let (n1, n2) = pairs[i % pairs.len()];
        let pooled = loop {
            let v = normal_sample(&mut rng, n1 + n2, 0.0, 1.0);
            let mut s = v.clone();
            s.sort_by(f64::total_cmp);
            if s.windows(2).all(|w| w[0] < w[1]) {
                break v;
            }
        };
        let shift = rng.random_range(0.0..2.0);
        let a: Vec<f64> = pooled[..n1].iter().map(|v| v + shift).collect();
        let b = &pooled[n1..];
        let got = mann_whitney_u(&a, b).ctx("mann-whitney")?;
        let (u, p) = oracles::stats::mann_whitney_enumerated(&a, b);
        ensure!(got.exact == Some(true), "n = {n1}/{n2}: exact path not taken");
        ensure!(got.statistic == u, "n = {n1}/{n2}: U {} vs {u}", got.statistic);
        worst_mw = worst_mw.max((got.p_two_sided - p).abs());
        ensure!((got.p_two_sided - p).abs() < 1e-12, "n = {n1}/{n2}: p {} vs enumerated {p}", got.p_two_sided);
    }

    // t tests against the quadrature t distribution, with t and df recomputed here
    let mut worst_t = 0.0f64;
    for i in 0..100 {
        let (n1, n2) = (rng.random_range(3..16), rng.random_range(3..16));
        let (shift, sd1, sd2) = (rng.random_range(-1.0..1.0), rng.random_range(0.3..3.0), rng.random_range(0.3..3.0));
        let a = normal_sample(&mut rng, n1, shift, sd1);
        let b = normal_sample(&mut rng, n2, 0.0, sd2);
        let (m1, s1) = mean_sd(&a);
        let (m2, s2) = mean_sd(&b);
        let (q1, q2) = (s1 * s1 / n1 as f64, s2 * s2 / n2 as f64);
        let t = (m1 - m2) / (q1 + q2).sqrt();
        let df = (q1 + q2).powi(2) / (q1 * q1 / (n1 - 1) as f64 + q2 * q2 / (n2 - 1) as f64);
        let got = welch_t(&a, &b).ctx("welch")?;
        ensure!((got.statistic - t).abs() <= 1e-9 * t.abs().max(1.0), "case {i}: welch t {} vs {t}", got.statistic);
        ensure!((got.df.unwrap() - df).abs() <= 1e-9 * df, "case {i}: welch df {:?} vs {df}", got.df);
        let p = oracles::stats::t_two_sided(t, df);
        worst_t = worst_t.max((got.p_two_sided - p).abs());
        ensure!((got.p_two_sided - p).abs() < 1e-6, "case {i}: welch p {} vs {p} (t {t}, df {df})", got.p_two_sided);

        let n = rng.random_range(3..16);
        let x = normal_sample(&mut rng, n, 0.0, 1.0);
        let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-1.0..1.5)).collect();
        let d: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u - v).collect();
        let (md, sd) = mean_sd(&d);
        let t = md / (sd / (n as f64).sqrt());
        let got = paired_t(&x, &y).ctx("paired")?;
        ensure!((got.statistic - t).abs() <= 1e-9 * t.abs().max(1.0), "case {i}: paired t {} vs {t}", got.statistic);
        let p = oracles::stats::t_two_sided(t, (n - 1) as f64);
        worst_t = worst_t.max((got.p_two_sided - p).abs());
        ensure!((got.p_two_sided - p).abs() < 1e-6, "case {i}: paired p {} vs {p}", got.p_two_sided);
    }

    // null calibration
    let mut rejects = [0usize; 3];
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + seed);
        let sd = rng.random_range(0.5..2.0);
        let a = normal_sample(&mut rng, 10, 5.0, sd);
        let b = normal_sample(&mut rng, 10, 5.0, sd);
        for (k, r) in [welch_t(&a, &b), paired_t(&a, &b), mann_whitney_u(&a, &b)].into_iter().enumerate() {
            rejects[k] += (r.ctx("null test")?.p_two_sided < 0.05) as usize;
        }
    }
    let rates = rejects.map(|r| r as f64 / 200.0);
    for (name, rate) in ["welch", "paired", "mann-whitney"].iter().zip(rates) {
        ensure!((0.01..=0.12).contains(&rate), "{name} null reject rate {rate}");
    }
    Ok(format!(
        "500 exact Mann-Whitney cases match (max |dp| {worst_mw:.1e}); 200 t tests within {worst_t:.1e}; null reject rates welch {:.3}, paired {:.3}, mann-whitney {:.3}",
        rates[0], rates[1], rates[2]
    ))
}

// ---------------------------------------------------------------- pipeline helpers

fn sessions_for(spec: &CohortSpec) -> Result<(Vec<ParticipantScript>, Vec<SyntheticSession>), String> {
    let mut scripts = cohort(spec).ctx("cohort")?;
    scripts.sort_by(|a, b| a.participant_id.cmp(&b.participant_id));
    let sessions = scripts.iter().map(|s| render_participant(s, FS)).collect::<Result<Vec<_>, _>>().ctx("render")?;
    Ok((scripts, sessions))
}

fn ingest_config(dir: &Path, scripts: &[ParticipantScript]) -> IngestConfig {
    IngestConfig {
        session_id: "acceptance".into(),
        out_dir: dir.to_path_buf(),
        udp_bind: "127.0.0.1".parse().unwrap(),
        udp_port: 0,
        live_port: None,
        participants: scripts
            .iter()
            .map(|s| ParticipantConfig { order: Some(s.order.clone()), ..ParticipantConfig::new(&s.participant_id, s.group) })
            .collect(),
        ..IngestConfig::default()
    }
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().expect("runtime")
}

/// Replay `sessions` into a fresh in-process recorder and return the final manifest.
fn record_replay(
    rt: &tokio::runtime::Runtime,
    dir: &Path,
    scripts: &[ParticipantScript],
    sessions: Vec<SyntheticSession>,
    clock: Arc<dyn ReferenceClock>,
    replay: ReplayConfig,
) -> Result<SessionManifest, String> {
    let session = rt.block_on(start(ingest_config(dir, scripts), clock)).ctx("starting the recorder")?;
    let rate = replay.rate;
    let replayer = Replayer::new(session.udp_addr(), sessions, replay).ctx("replayer")?;
    replayer.run(None).ctx("replay")?;
    // let the re-sort window release the tail
    std::thread::sleep(Duration::from_secs_f64((0.3 / rate).max(0.05)));
    rt.block_on(session.finish()).ctx("finishing")
}

// ---------------------------------------------------------------- monte carlo

const MC_SEEDS: u64 = 100;
const MC_RATE: f64 = 20.0;

fn monte_carlo() -> Outcome {
    let t0 = Instant::now();
    let rt = runtime();
    let root = tempfile::tempdir().ctx("tempdir")?;
    let (mut hits, mut rows_lost, mut rejected) = (0u64, 0i64, 0usize);
    let mut misses = Vec::new();
    for seed in 0..MC_SEEDS {
        let spec = CohortSpec { n_per_group: 10, seed, eo_s: 6.0, ec_s: 0.0, block_s: 6.0, transition_s: 1.0, ..CohortSpec::default() };
        ensure!((spec.display_arousal - spec.immersive_arousal - 1.0).abs() < 1e-12 && spec.arousal_sd == 0.5, "cohort defaults changed: {spec:?}");
        let (scripts, sessions) = sessions_for(&spec)?;
        let expected: i64 = sessions.iter().map(|s| s.frames.len() as i64).sum();
        let dir = root.path().join(format!("seed{seed}"));
        let replay = ReplayConfig { rate: MC_RATE, device_epoch: Some(0.0), seed, ..ReplayConfig::default() };
        let clock = Arc::new(ScaledClock::new(0.0, MC_RATE));
        let manifest = record_replay(&rt, &dir, &scripts, sessions, clock, replay).map_err(|e| format!("seed {seed}: {e}"))?;
        ensure!(!manifest.partial, "seed {seed}: {:?}", manifest.partial_reason);
        let recorded: i64 = manifest.streams.values().filter(|s| s.kind == StreamKind::Eeg).map(|s| s.rows as i64).sum();
        rows_lost += expected - recorded;

        let analysis = analyze_session(&dir.join(MANIFEST_FILE), &AnalysisConfig { ica_seed: seed, ..AnalysisConfig::default() })
            .map_err(|e| format!("seed {seed}: analysis: {e}"))?;
        rejected += analysis.accounting.rejected;
        let report = compare_modalities(&analysis.records).map_err(|e| format!("seed {seed}: contrasts: {e}"))?;
        let c = report.get("arousal_display_vs_immersive").ok_or("arousal contrast missing")?;
        ensure!(c.method == engage_core::stats::TestMethod::Welch && c.n1 == 10 && c.n2 == 10, "seed {seed}: {c:?}");
        match c.p_two_sided {
            Some(p) if p < 0.05 => hits += 1,
            p => misses.push(format!("{seed}:{p:?}")),
        }
        std::fs::remove_dir_all(&dir).ctx("cleanup")?;
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure!(hits >= 95, "Welch p < 0.05 in {hits}/{MC_SEEDS} seeds; misses {misses:?}");
    ensure!(secs < 300.0, "took {secs:.0} s");
    Ok(format!(
        "Welch p < 0.05 in {hits}/{MC_SEEDS} seeds at {MC_RATE}x replay; {rows_lost} EEG rows lost, {rejected} segments rejected in total"
    ))
}

// ---------------------------------------------------------------- wire

fn random_message(rng: &mut ChaCha8Rng) -> OscMessage {
    let parts = rng.random_range(1..5);
    let address = (0..parts)
        .map(|_| {
            let len = rng.random_range(1..8);
            (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect::<String>()
        })
        .fold(String::new(), |acc, p| acc + "/" + &p);
    let args = (0..rng.random_range(0..7))
        .map(|_| match rng.random_range(0..4) {
            0 => OscType::Int(rng.random()),
            // arbitrary bit patterns, NaN payloads included
            1 => OscType::Float(f32::from_bits(rng.random())),
            2 => OscType::String((0..rng.random_range(0..14)).map(|_| rng.random_range(b' '..=b'~') as char).collect()),
            _ => OscType::Blob((0..rng.random_range(0..11)).map(|_| rng.random()).collect()),
        })
        .collect();
    OscMessage { address, args }
}

fn random_packet(rng: &mut ChaCha8Rng, depth: u32) -> OscPacket {
    if depth == 0 || rng.random_bool(0.6) {
        return OscPacket::Message(random_message(rng));
    }
    let content = (0..rng.random_range(0..5)).map(|_| random_packet(rng, depth - 1)).collect();
    let timetag = if rng.random_bool(0.2) { TimeTag::IMMEDIATE } else { TimeTag(rng.random()) };
    OscPacket::Bundle(OscBundle { timetag, content })
}

/// Structural equality with floats compared by bit pattern.
fn same(a: &OscPacket, b: &OscPacket) -> bool {
    match (a, b) {
        (OscPacket::Message(x), OscPacket::Message(y)) => {
            x.address == y.address
                && x.args.len() == y.args.len()
                && x.args.iter().zip(&y.args).all(|(p, q)| match (p, q) {
                    (OscType::Float(u), OscType::Float(v)) => u.to_bits() == v.to_bits(),
                    _ => p == q,
                })
        }
        (OscPacket::Bundle(x), OscPacket::Bundle(y)) => {
            x.timetag == y.timetag && x.content.len() == y.content.len() && x.content.iter().zip(&y.content).all(|(p, q)| same(p, q))
        }
        _ => false,
    }
}

fn wire_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut bundles = 0;
    for i in 0..10_000 {
        let p = random_packet(&mut rng, 3);
        bundles += matches!(p, OscPacket::Bundle(_)) as usize;
        let bytes = encode(&p);
        ensure!(bytes.len() % 4 == 0, "packet {i}: {} bytes", bytes.len());
        let back = decode(&bytes).map_err(|e| format!("packet {i}: {e}"))?;
        ensure!(same(&p, &back), "packet {i}: {p:?} came back as {back:?}");
        ensure!(encode(&back) == bytes, "packet {i}: re-encoding differs");
    }

    let rt = runtime();
    let dir = tempfile::tempdir().ctx("tempdir")?;
    let spec = CohortSpec { n_per_group: 1, seed: 11, eo_s: 4.0, ec_s: 0.0, block_s: 2.0, transition_s: 1.0, ..CohortSpec::default() };
    let (scripts, sessions) = sessions_for(&spec)?;
    ensure!(sessions.len() == 2 && sessions.iter().all(|s| s.frames.len() == 2560), "session is not 2 x 10 s");
    let (lo, hi) = (0.010, 0.050);
    let replay = ReplayConfig { latency_s: [lo, hi], seed: 5, ..ReplayConfig::default() };
    let manifest = record_replay(&rt, dir.path(), &scripts, sessions, Arc::new(SystemClock), replay)?;
    ensure!(!manifest.partial, "{:?}", manifest.partial_reason);
    let mut detail = Vec::new();
    for s in &scripts {
        let id = &s.participant_id;
        let entry = manifest.stream(StreamKind::Eeg, id).ok_or("no EEG stream")?;
        let rows = read_stream::<EegRow>(&dir.path().join(&entry.path)).ctx("reading EEG")?.rows.len() as f64;
        ensure!((rows - 2560.0).abs() <= 0.02 * 2560.0, "{id}: {rows} EEG rows");
        let sync = manifest.sync.get(&format!("eeg/{id}")).ok_or("no sync summary")?;
        ensure!(sync.converged, "{id}: clock sync did not converge: {sync:?}");
        ensure!((lo..=hi).contains(&sync.offset), "{id}: offset {} outside [{lo}, {hi}]", sync.offset);
        detail.push(format!("{id} {rows} rows, offset {:.1} ms", 1e3 * sync.offset));
    }
    Ok(format!("10000 packets ({bundles} bundles) round-trip; {}", detail.join("; ")))
}

// ---------------------------------------------------------------- crash safety

fn crash_safety() -> Outcome {
    let dir = tempfile::tempdir().ctx("tempdir")?;
    let spec = CohortSpec { n_per_group: 1, seed: 21, eo_s: 6.0, ec_s: 0.0, block_s: 3.0, transition_s: 1.0, ..CohortSpec::default() };
    let (scripts, sessions) = sessions_for(&spec)?;
    let config = dir.path().join("ingest.json");
    std::fs::write(&config, serde_json::to_string(&ingest_config(&dir.path().join("unused"), &scripts)).unwrap()).ctx("config")?;
    let out = dir.path().join("session");
    let mut child = Command::new(env!("CARGO_BIN_EXE_engage"))
        .args(["record", "--no-live", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .env("RUST_LOG", "warn")
        .stdout(Stdio::piped())
        .spawn()
        .ctx("spawning the recorder")?;
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).ctx("reading the recorder's first line")?;
    let ready: serde_json::Value = serde_json::from_str(&line).ctx("parsing the recorder's first line")?;
    let udp = ready["udp"].as_str().ok_or("no udp address printed")?.parse().ctx("udp address")?;

    let replayer = Replayer::new(udp, sessions, ReplayConfig::default()).ctx("replayer")?;
    let replay = std::thread::spawn(move || replayer.run(None));
    std::thread::sleep(Duration::from_millis(3500));
    child.kill().ctx("killing the recorder")?;
    child.wait().ctx("reaping the recorder")?;
    // the replayer may notice the closed port; its outcome is irrelevant here
    let _ = replay.join();

    let manifest = SessionManifest::load(&out.join(MANIFEST_FILE)).ctx("manifest after the kill")?;
    ensure!(manifest.partial && manifest.finalized_at.is_none(), "manifest does not say partial");
    let mut counts = Vec::new();
    for s in manifest.streams.values() {
        let path = out.join(&s.path);
        let n = match s.kind {
            StreamKind::Eeg => {
                let eeg = read_stream::<EegRow>(&path).ctx(&s.path)?.rows;
                ensure!(eeg.windows(2).all(|w| w[0].device_ts < w[1].device_ts), "{}: rows out of order", s.path);
                ensure!(eeg.len() >= 2 * 256, "{}: only {} rows flushed", s.path, eeg.len());
                eeg.len()
            }
            StreamKind::Accel => read_stream::<AccelRow>(&path).ctx(&s.path)?.rows.len(),
            StreamKind::Quality => read_stream::<QualityRow>(&path).ctx(&s.path)?.rows.len(),
            StreamKind::Optics => read_stream::<OpticsRow>(&path).ctx(&s.path)?.rows.len(),
            StreamKind::Gaze => read_stream::<GazeRow>(&path).ctx(&s.path)?.rows.len(),
        };
        counts.push(format!("{} {n}", s.path));
    }
    let events = read_stream::<EventRow>(&out.join(&manifest.events_file)).ctx("events")?.rows;
    ensure!(!events.is_empty(), "no events flushed before the kill");
    // the analysis side sees it too
    let loaded = load_session(&out.join(MANIFEST_FILE)).ctx("loading the interrupted session")?;
    let incomplete = engage_core::session::analyze_loaded(&loaded, &AnalysisConfig { skip_missing_baseline: true, ..Default::default() })
        .map(|a| a.log.iter().any(|e| matches!(e, LogEvent::RecordingIncomplete { .. })))
        .unwrap_or(loaded.manifest.partial);
    ensure!(incomplete, "analysis did not report the interrupted recording");
    Ok(format!("killed after 3.5 s: manifest partial, {} events, {}", events.len(), counts.iter().filter(|c| c.starts_with("eeg")).cloned().collect::<Vec<_>>().join(", ")))
}

// ---------------------------------------------------------------- scope

fn no_secondary_component() -> Outcome {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let mut stack = vec![root.clone()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).ctx("walking the workspace")? {
            let entry = entry.ctx("walking the workspace")?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if !entry.file_type().ctx("file type")?.is_dir() || name == "target" || name.starts_with('.') {
                continue;
            }
            ensure!(name != "node_modules" && name != "dist", "built front-end artefacts at {}", entry.path().display());
            stack.push(entry.path());
        }
    }
    Ok("criteria ran from the Rust workspace alone; no front-end build present".into())
}
