use std::f64::consts::PI;

use engage_core::signal::{apply_zero_phase, design_bandpass, design_notch, preprocess, Channel};
use engage_core::synth::{generate, BandAmplitudes, ChannelBands, GeneratorSpec};
use proptest::prelude::*;

fn tones(n: usize, parts: &[(f64, f64, f64)]) -> Vec<f64> {
    (0..n)
        .map(|i| parts.iter().map(|(a, f, ph)| a * (2.0 * PI * f * i as f64 / 256.0 + ph).sin()).sum())
        .collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn tone_strategy() -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
    prop::collection::vec((1.0f64..50.0, 2.0f64..40.0, 0.0f64..2.0 * PI), 1..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn zero_phase_is_linear(
        x in prop::collection::vec(-200.0f64..200.0, 600),
        y in prop::collection::vec(-200.0f64..200.0, 600),
        a in -10.0f64..10.0,
        b in -10.0f64..10.0,
    ) {
        for coeffs in [design_bandpass(0.5, 50.0, 5, 256.0).unwrap(), design_notch(50.0, 30.0, 256.0).unwrap()] {
            let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
            let lhs = apply_zero_phase(&coeffs, &mix).unwrap();
            let fx = apply_zero_phase(&coeffs, &x).unwrap();
            let fy = apply_zero_phase(&coeffs, &y).unwrap();
            let rhs: Vec<f64> = fx.iter().zip(&fy).map(|(u, v)| a * u + b * v).collect();
            let err = lhs.iter().zip(&rhs).map(|(l, r)| (l - r).powi(2)).sum::<f64>().sqrt();
            let norm = fx.iter().zip(&fy).map(|(u, v)| (a * u).powi(2) + (b * v).powi(2)).sum::<f64>().sqrt();
            prop_assert!(err <= 1e-9 * norm.max(1e-300), "{err} vs {norm}");
        }
    }

    #[test]
    fn zero_phase_cross_correlation_peaks_at_lag_zero(parts in tone_strategy()) {
        let x = tones(2048, &parts);
        let coeffs = design_bandpass(0.5, 50.0, 5, 256.0).unwrap();
        let y = apply_zero_phase(&coeffs, &x).unwrap();
        let edge = 256;
        let xcorr = |lag: i64| -> f64 {
            (edge..x.len() - edge).map(|i| x[i] * y[(i as i64 + lag) as usize]).sum()
        };
        let best = (-20i64..=20).max_by(|a, b| xcorr(*a).total_cmp(&xcorr(*b))).unwrap();
        prop_assert!(best.abs() <= 1, "peak at lag {best}");
    }
}

#[test]
fn preprocessing_twice_keeps_in_band_rms() {
    let amps = BandAmplitudes::from_array([6.0, 5.0, 10.0, 4.0, 2.0]);
    for seed in 0..10 {
        let seg = generate(&GeneratorSpec::new(10.0, ChannelBands::Uniform(amps), seed)).unwrap().segment;
        let once = preprocess(&seg).unwrap();
        let twice = preprocess(&once).unwrap();
        for ch in Channel::ALL {
            let (a, b) = (rms(&once.channel(ch)), rms(&twice.channel(ch)));
            assert!((b - a).abs() / a < 0.05, "seed {seed} {ch}: {a} -> {b}");
        }
    }
}

#[test]
fn preprocessing_is_bit_deterministic() {
    let amps = BandAmplitudes::from_array([6.0, 5.0, 10.0, 4.0, 2.0]);
    let mut spec = GeneratorSpec::new(8.0, ChannelBands::Uniform(amps), 3);
    spec.noise_std = 3.0;
    let seg = generate(&spec).unwrap().segment;
    let bits = |s: &engage_core::Segment| -> Vec<u64> {
        Channel::ALL.iter().flat_map(|&c| s.channel(c)).map(f64::to_bits).collect()
    };
    assert_eq!(bits(&preprocess(&seg).unwrap()), bits(&preprocess(&seg).unwrap()));
}
