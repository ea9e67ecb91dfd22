#![allow(dead_code)]

use fwm_core::timetag::{Channel, GatingPlan, TimestampStream};

const TICK_NS: f64 = 0.125;

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// CDF of an exponential (mean `tau`) plus a Gaussian (sd `s`).
fn exgauss_cdf(y: f64, tau: f64, s: f64) -> f64 {
    if s == 0.0 {
        return if y <= 0.0 { 0.0 } else { -(-y / tau).exp_m1() };
    }
    normal_cdf(y / s) - (s * s / (2.0 * tau * tau) - y / tau).exp() * normal_cdf(y / s - s / tau)
}

/// Probability that a pair lands in a coincidence window `[0, window_ns)`
/// after per-detector jitter `jitter_ns` and flooring both events to ticks.
///
/// Flooring makes the tick difference `floor(d + f)` with `f` uniform on
/// one tick, so the observed delay is exponential + Gaussian + uniform.
pub fn capture_fraction(tau_ns: f64, jitter_ns: f64, window_ns: f64) -> f64 {
    let s = std::f64::consts::SQRT_2 * jitter_ns;
    let n = 400;
    let mut acc = 0.0;
    for k in 0..n {
        let u = (k as f64 + 0.5) / n as f64 * TICK_NS;
        acc += exgauss_cdf(window_ns - u, tau_ns, s) - exgauss_cdf(-u, tau_ns, s);
    }
    acc / n as f64
}

/// Double loop over all gated signals and all idlers.
pub fn brute_force_g2(
    stream: &TimestampStream,
    gating: &GatingPlan,
    bin_ticks: i64,
    lo_ticks: i64,
    n_bins: usize,
) -> Vec<u64> {
    let mut counts = vec![0u64; n_bins];
    let signals: Vec<i64> = stream
        .records
        .iter()
        .filter(|r| r.channel == Channel::Signal && gating.contains(r.tick))
        .map(|r| r.tick as i64)
        .collect();
    let idlers: Vec<i64> = stream
        .records
        .iter()
        .filter(|r| r.channel == Channel::Idler)
        .map(|r| r.tick as i64)
        .collect();
    for s in &signals {
        for i in &idlers {
            let d = i - s - lo_ticks;
            if d >= 0 && d < bin_ticks * n_bins as i64 {
                counts[(d / bin_ticks) as usize] += 1;
            }
        }
    }
    counts
}

/// One-sample Kolmogorov–Smirnov statistic against Exponential(mean `tau`).
pub fn ks_exponential(samples: &[f64], tau: f64) -> f64 {
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    x.iter()
        .enumerate()
        .map(|(k, v)| {
            let f = -(-v / tau).exp_m1();
            (f - k as f64 / n).max((k as f64 + 1.0) / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic critical value at α = 0.01.
pub fn ks_critical_001(n: usize) -> f64 {
    1.6276 / (n as f64).sqrt()
}
