//! Welch's t, paired t and Mann-Whitney U with two-sided p-values. Statistics
//! are signed as `a - b`.

pub mod special;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use special::{normal_sf, t_two_sided};

/// Largest `n1 + n2` that uses the exact Mann-Whitney distribution.
pub const MW_EXACT_MAX_N: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("need at least 2 observations per sample, got {n1} and {n2}")]
    TooFew { n1: usize, n2: usize },
    #[error("non-finite observation")]
    NonFinite,
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
    #[error("paired samples differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestMethod {
    Welch,
    #[serde(rename = "mannwhitney")]
    MannWhitney,
    Paired,
}

impl fmt::Display for TestMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TestMethod::Welch => "welch",
            TestMethod::MannWhitney => "mannwhitney",
            TestMethod::Paired => "paired",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub method: TestMethod,
    pub statistic: f64,
    /// Absent for Mann-Whitney.
    pub df: Option<f64>,
    pub p_two_sided: f64,
    pub n1: usize,
    pub n2: usize,
    /// Mann-Whitney only: whether the exact null distribution was used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact: Option<bool>,
}

fn check(a: &[f64], b: &[f64]) -> Result<(), StatsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(StatsError::TooFew { n1: a.len(), n2: b.len() });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    Ok(())
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0))
}

/// Welch's unequal-variance t with Welch-Satterthwaite degrees of freedom.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    check(a, b)?;
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let (m1, v1) = mean_var(a);
    let (m2, v2) = mean_var(b);
    let (s1, s2) = (v1 / n1, v2 / n2);
    if s1 + s2 == 0.0 {
        return Err(StatsError::Degenerate("both samples have zero variance"));
    }
    let t = (m1 - m2) / (s1 + s2).sqrt();
    let df = (s1 + s2).powi(2) / (s1 * s1 / (n1 - 1.0) + s2 * s2 / (n2 - 1.0));
    Ok(TestResult {
        method: TestMethod::Welch,
        statistic: t,
        df: Some(df),
        p_two_sided: t_two_sided(t, df),
        n1: a.len(),
        n2: b.len(),
        exact: None,
    })
}

/// One-sample t on `a[i] - b[i]`, df = n - 1.
pub fn paired_t(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    check(a, b)?;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let (m, v) = mean_var(&d);
    // relative guard: differences equal up to rounding have no spread
    if v.sqrt() <= 1e-12 * m.abs() || v == 0.0 {
        return Err(StatsError::Degenerate("paired differences have zero spread"));
    }
    let t = m / (v / n).sqrt();
    let df = n - 1.0;
    Ok(TestResult {
        method: TestMethod::Paired,
        statistic: t,
        df: Some(df),
        p_two_sided: t_two_sided(t, df),
        n1: a.len(),
        n2: b.len(),
        exact: None,
    })
}

/// Midranks (1-based) of the pooled sample and the tie-group sizes.
fn midranks(pooled: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..pooled.len()).collect();
    idx.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && pooled[idx[j + 1]] == pooled[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        if j > i {
            ties.push(j - i + 1);
        }
        i = j + 1;
    }
    (ranks, ties)
}

/// Counts of U = 0..=n1*n2 over all C(n1+n2, n1) rank assignments.
fn u_distribution(n1: usize, n2: usize) -> Vec<f64> {
    // f[i][j][u]: ways for i items of sample 1 and j of sample 2
    let max_u = n1 * n2;
    let mut prev: Vec<Vec<f64>> = vec![vec![0.0; max_u + 1]; n2 + 1];
    for row in prev.iter_mut() {
        row[0] = 1.0;
    }
    for i in 1..=n1 {
        let mut cur: Vec<Vec<f64>> = vec![vec![0.0; max_u + 1]; n2 + 1];
        cur[0][0] = 1.0;
        for j in 1..=n2 {
            for u in 0..=i * j {
                // largest element from sample 1 beats all j of sample 2
                let from_a = if u >= j { prev[j][u - j] } else { 0.0 };
                let from_b = cur[j - 1][u];
                cur[j][u] = from_a + from_b;
            }
        }
        prev = cur;
    }
    prev[n2].clone()
}

/// Mann-Whitney U for `a` (number of (a, b) pairs with a > b, ties half).
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    check(a, b)?;
    let (n1, n2) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let r1: f64 = ranks[..n1].iter().sum();
    let u = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
    let mu = (n1 * n2) as f64 / 2.0;

    let (p, exact) = if n1 + n2 <= MW_EXACT_MAX_N && ties.is_empty() {
        let dist = u_distribution(n1, n2);
        let total: f64 = dist.iter().sum();
        let k = u.round() as usize;
        let lower: f64 = dist[..=k].iter().sum::<f64>() / total;
        let upper: f64 = dist[k..].iter().sum::<f64>() / total;
        ((2.0 * lower.min(upper)).min(1.0), true)
    } else {
        let n = (n1 + n2) as f64;
        let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1.0));
        let var = (n1 * n2) as f64 / 12.0 * ((n + 1.0) - tie_term);
        if var <= 0.0 {
            (1.0, false)
        } else {
            let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
            ((2.0 * normal_sf(z)).min(1.0), false)
        }
    };
    Ok(TestResult {
        method: TestMethod::MannWhitney,
        statistic: u,
        df: None,
        p_two_sided: p,
        n1,
        n2,
        exact: Some(exact),
    })
}

#[cfg(test)]
#[path = "../../tests/oracles/stats.rs"]
mod oracle;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn welch_identical_samples() {
        let a = [1.0, 2.5, 3.0, 7.0];
        let r = welch_t(&a, &a).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_two_sided, 1.0);
    }

    #[test]
    fn welch_matches_oracle() {
        let r = welch_t(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert!((r.statistic + 1.0).abs() < 1e-12);
        assert!((r.df.unwrap() - 8.0).abs() < 1e-12);
        let p = oracle::t_two_sided(r.statistic, r.df.unwrap());
        assert!((r.p_two_sided - p).abs() < 1e-6, "{} vs {p}", r.p_two_sided);
    }

    #[test]
    fn welch_degenerate() {
        assert!(matches!(welch_t(&[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0]), Err(StatsError::Degenerate(_))));
        assert!(matches!(welch_t(&[1.0], &[1.0, 2.0]), Err(StatsError::TooFew { .. })));
    }

    #[test]
    fn mann_whitney_smallest_example() {
        let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.exact, Some(true));
        assert!((r.p_two_sided - 1.0 / 3.0).abs() < 1e-15);
        let (u, p) = oracle::mann_whitney_enumerated(&[1.0, 2.0], &[3.0, 4.0]);
        assert_eq!(u, 0.0);
        assert!((p - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn mann_whitney_complete_tie() {
        let r = mann_whitney_u(&[5.0; 4], &[5.0; 3]).unwrap();
        assert_eq!(r.statistic, 6.0);
        assert_eq!(r.p_two_sided, 1.0);
    }

    #[test]
    fn mann_whitney_same_multiset() {
        let a = [0.3, 1.7, 2.2, 9.0, 4.4];
        let r = mann_whitney_u(&a, &a).unwrap();
        assert!((r.p_two_sided - 1.0).abs() < 1e-9);
        let big: Vec<f64> = (0..15).map(|i| i as f64 * 0.7).collect();
        let r = mann_whitney_u(&big, &big).unwrap();
        assert_eq!(r.exact, Some(false));
        assert!((r.p_two_sided - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mann_whitney_normal_path_reference() {
        // 11 vs 11 fully separated: z = (60.5 - 0.5) / sqrt(11*11*23/12) = 3.9398...
        let a: Vec<f64> = (0..11).map(f64::from).collect();
        let b: Vec<f64> = (11..22).map(f64::from).collect();
        let r = mann_whitney_u(&a, &b).unwrap();
        assert_eq!(r.exact, Some(false));
        let z = 60.0 / (121.0 * 23.0 / 12.0_f64).sqrt();
        assert!((r.p_two_sided - 2.0 * normal_sf(z)).abs() < 1e-15);
        assert!(r.p_two_sided < 1e-4);
    }

    #[test]
    fn paired_examples() {
        assert!(matches!(paired_t(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), Err(StatsError::Degenerate(_))));
        assert!(matches!(paired_t(&[1.0, 2.0, 3.0], &[1.5, 2.5, 3.5]), Err(StatsError::Degenerate(_))));
        assert!(matches!(paired_t(&[1.0, 2.0], &[1.0, 2.0, 3.0]), Err(StatsError::LengthMismatch(2, 3))));

        let r = paired_t(&[1.0, 2.0, 3.0, 4.0], &[2.0, 2.0, 4.0, 5.0]).unwrap();
        // differences -1, 0, -1, -1: mean -0.75, sd 0.5
        let t = -0.75 / (0.5 / 2.0);
        assert!((r.statistic - t).abs() < 1e-12);
        assert_eq!(r.df, Some(3.0));
        assert!((r.p_two_sided - oracle::t_two_sided(t, 3.0)).abs() < 1e-6);
    }

    #[test]
    fn welch_p_monotone_in_separation() {
        let base = [0.1, -0.4, 0.9, 0.3, -1.2, 0.5, 0.0, 0.7];
        let mut last = 1.0;
        for k in 0..40 {
            let shift = k as f64 * 0.1;
            let b: Vec<f64> = base.iter().map(|v| v * 1.3 + shift).collect();
            let p = welch_t(&base, &b).unwrap().p_two_sided;
            assert!(p <= last + 1e-15);
            last = p;
        }
    }

    #[test]
    fn welch_null_calibration() {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let rejects = (0..200u64)
            .filter(|&seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a: Vec<f64> = (0..10).map(|_| normal.sample(&mut rng)).collect();
                let b: Vec<f64> = (0..10).map(|_| normal.sample(&mut rng)).collect();
                welch_t(&a, &b).unwrap().p_two_sided < 0.05
            })
            .count();
        let rate = rejects as f64 / 200.0;
        assert!((0.01..=0.12).contains(&rate), "{rate}");
    }

    /// Largest change in paired-t statistic or p under a shift of both samples.
    fn paired_shift(a: &[f64], b: &[f64], ac: &[f64], bc: &[f64]) -> f64 {
        let n = a.len().min(b.len());
        match (paired_t(&a[..n], &b[..n]), paired_t(&ac[..n], &bc[..n])) {
            (Ok(x), Ok(y)) => ((x.statistic - y.statistic).abs() / x.statistic.abs().max(1.0)).max((x.p_two_sided - y.p_two_sided).abs()),
            _ => 0.0,
        }
    }

    fn distinct(v: &[f64]) -> bool {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        s.windows(2).all(|w| w[0] != w[1])
    }

    proptest! {
        #[test]
        fn exact_path_equals_enumeration(
            a in proptest::collection::vec(-100.0f64..100.0, 2..7),
            b in proptest::collection::vec(-100.0f64..100.0, 2..7),
        ) {
            let pooled: Vec<f64> = a.iter().chain(&b).copied().collect();
            prop_assume!(distinct(&pooled));
            let r = mann_whitney_u(&a, &b).unwrap();
            let (u, p) = oracle::mann_whitney_enumerated(&a, &b);
            prop_assert_eq!(r.exact, Some(true));
            prop_assert_eq!(r.statistic, u);
            prop_assert!((r.p_two_sided - p).abs() < 1e-12, "{} vs {}", r.p_two_sided, p);
        }

        #[test]
        fn welch_antisymmetric_and_shift_invariant(
            a in proptest::collection::vec(-3200i32..3200, 3..12),
            b in proptest::collection::vec(-3200i32..3200, 3..12),
            c in -64_000i32..64_000,
        ) {
            // values on a 1/64 grid so adding the shift is exact
            let grid = |v: &Vec<i32>, c: i32| -> Vec<f64> { v.iter().map(|x| f64::from(x + c) / 64.0).collect() };
            let (a0, b0) = (grid(&a, 0), grid(&b, 0));
            let (Ok(ab), Ok(ba)) = (welch_t(&a0, &b0), welch_t(&b0, &a0)) else { return Ok(()) };
            prop_assert_eq!(ab.statistic, -ba.statistic);
            prop_assert!((ab.p_two_sided - ba.p_two_sided).abs() < 1e-15);
            let shifted = welch_t(&grid(&a, c), &grid(&b, c)).unwrap();
            prop_assert!((shifted.statistic - ab.statistic).abs() <= 1e-12 * ab.statistic.abs().max(1.0));
            prop_assert!((shifted.p_two_sided - ab.p_two_sided).abs() <= 1e-12);
            let ps = paired_shift(&a0, &b0, &grid(&a, c), &grid(&b, c));
            prop_assert!(ps <= 1e-12);
        }

        #[test]
        fn welch_and_paired_match_t_oracle(
            a in proptest::collection::vec(-10.0f64..10.0, 3..15),
            noise in proptest::collection::vec(-3.0f64..3.0, 15),
        ) {
            let b: Vec<f64> = a.iter().zip(&noise).map(|(x, e)| x * 0.5 + e).collect();
            if let Ok(r) = welch_t(&a, &b) {
                let p = oracle::t_two_sided(r.statistic, r.df.unwrap());
                prop_assert!((r.p_two_sided - p).abs() < 1e-6, "welch {} vs {}", r.p_two_sided, p);
            }
            if let Ok(r) = paired_t(&a, &b) {
                let p = oracle::t_two_sided(r.statistic, r.df.unwrap());
                prop_assert!((r.p_two_sided - p).abs() < 1e-6, "paired {} vs {}", r.p_two_sided, p);
            }
        }

        #[test]
        fn mann_whitney_shift_invariant(
            a in proptest::collection::vec(-50.0f64..50.0, 2..15),
            b in proptest::collection::vec(-50.0f64..50.0, 2..15),
        ) {
            let r = mann_whitney_u(&a, &b).unwrap();
            let ac: Vec<f64> = a.iter().map(|v| v * 2.0 + 1.0).collect();
            let bc: Vec<f64> = b.iter().map(|v| v * 2.0 + 1.0).collect();
            let s = mann_whitney_u(&ac, &bc).unwrap();
            prop_assert_eq!(r.statistic, s.statistic);
            prop_assert_eq!(r.p_two_sided, s.p_two_sided);
            prop_assert!((0.0..=1.0).contains(&r.p_two_sided));
        }
    }
}
