//! Reference statistics computed by brute force or quadrature.

/// Two-sided t tail from P(|T| < t) = ∫₀^θ cos^(ν-1) / ∫₀^(π/2) cos^(ν-1),
/// θ = atan(|t|/√ν), both integrals by composite Simpson.
pub fn t_two_sided(t: f64, df: f64) -> f64 {
    let theta = (t.abs() / df.sqrt()).atan();
    let f = |x: f64| x.cos().max(0.0).powf(df - 1.0);
    1.0 - simpson(f, 0.0, theta, 400_000) / simpson(f, 0.0, std::f64::consts::FRAC_PI_2, 400_000)
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Exact two-sided Mann-Whitney p by listing every way to choose which
/// pooled ranks belong to the first sample. Requires no ties.
pub fn mann_whitney_enumerated(a: &[f64], b: &[f64]) -> (f64, f64) {
    let n1 = a.len();
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let rank = |v: f64| pooled.iter().position(|p| *p == v).unwrap() as f64 + 1.0;
    let u_obs = a.iter().map(|v| rank(*v)).sum::<f64>() - (n1 * (n1 + 1)) as f64 / 2.0;
    let mu = (n1 * b.len()) as f64 / 2.0;
    let n = pooled.len();
    let (mut hits, mut total) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != n1 {
            continue;
        }
        let r: f64 = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| i as f64 + 1.0).sum();
        let u = r - (n1 * (n1 + 1)) as f64 / 2.0;
        total += 1;
        if (u - mu).abs() >= (u_obs - mu).abs() - 1e-9 {
            hits += 1;
        }
    }
    (u_obs, hits as f64 / total as f64)
}
