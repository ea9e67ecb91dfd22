//! From raw signal/idler time tags to the source figures of merit.
//!
//! The pipeline is [`build_g2`] → [`fit_g2`] → [`pair_rate`] →
//! [`singles_and_efficiencies`] → [`car_measured`] → [`spectral_brightness`];
//! [`analyze`] runs all of it with an [`AnalysisConfig`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::{self, CovarianceScaling, FitError, LmOptions};
use crate::measure::Estimate;
use crate::timetag::{Channel, GatingError, GatingPlan, TimestampStream, TICK_SECONDS};

const NS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorrelationError {
    #[error("time tags are not sorted: record {index} precedes its predecessor")]
    Unsorted { index: usize },
    #[error("gating plan has no active time")]
    EmptyGating,
    #[error(transparent)]
    Gating(GatingError),
    #[error("invalid histogram binning: {0}")]
    Binning(String),
    #[error("window [{lo:e}, {hi:e}) s is outside the histogram range")]
    OutOfRange { lo: f64, hi: f64 },
    #[error("insufficient signal: peak excess {excess:.3} < 5·√(g_acc + 1) = {threshold:.3}")]
    InsufficientSignal { excess: f64, threshold: f64 },
    #[error("{which} denominator is not positive ({value}); dark rate exceeds measured singles")]
    NonPositiveDenominator { which: &'static str, value: f64 },
    #[error("zero denominator in CAR")]
    ZeroDenominator,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Fit(#[from] FitError),
}

impl From<GatingError> for CorrelationError {
    fn from(e: GatingError) -> Self {
        match e {
            GatingError::Empty => CorrelationError::EmptyGating,
            other => CorrelationError::Gating(other),
        }
    }
}

/// Histogram of idler-minus-signal delays.
///
/// Binning is held in integer ticks so bin assignment is exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceHistogram {
    pub bin_ticks: u64,
    pub lo_ticks: i64,
    pub counts: Vec<u64>,
    /// Gated signal events used as starts.
    pub n_start_events: u64,
    /// Active time of the gating plan, seconds.
    pub active_time: f64,
}

impl CoincidenceHistogram {
    pub fn bin_width(&self) -> f64 {
        self.bin_ticks as f64 * TICK_SECONDS
    }

    pub fn lo(&self) -> f64 {
        self.lo_ticks as f64 * TICK_SECONDS
    }

    pub fn hi(&self) -> f64 {
        self.lo() + self.counts.len() as f64 * self.bin_width()
    }

    /// Left edge of bin `k`, seconds.
    pub fn bin_start(&self, k: usize) -> f64 {
        (self.lo_ticks + (k as u64 * self.bin_ticks) as i64) as f64 * TICK_SECONDS
    }

    pub fn bin_center(&self, k: usize) -> f64 {
        self.bin_start(k) + 0.5 * self.bin_width()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Indices of bins lying entirely inside `[lo, hi)` seconds.
    pub fn bins_within(&self, lo: f64, hi: f64) -> std::ops::Range<usize> {
        let w = self.bin_width();
        let eps = 1e-6 * w;
        let first = ((lo - self.lo()) / w - eps / w).ceil().max(0.0) as usize;
        let last = ((hi - self.lo()) / w + eps / w).floor().max(0.0) as usize;
        let last = last.min(self.counts.len());
        first.min(last)..last
    }

    /// Adds another histogram with identical binning.
    pub fn merge(&mut self, other: &Self) {
        assert_eq!(self.bin_ticks, other.bin_ticks);
        assert_eq!(self.lo_ticks, other.lo_ticks);
        assert_eq!(self.counts.len(), other.counts.len());
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.n_start_events += other.n_start_events;
    }
}

/// Histogram binning in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub bin_width: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Default for Binning {
    fn default() -> Self {
        Self {
            bin_width: 1.0 * NS,
            lo: -50.0 * NS,
            hi: 200.0 * NS,
        }
    }
}

fn to_ticks(seconds: f64, name: &str) -> Result<i64, CorrelationError> {
    let t = seconds / TICK_SECONDS;
    let r = t.round();
    if !t.is_finite() || (t - r).abs() > 1e-6 * r.abs().max(1.0) {
        return Err(CorrelationError::Binning(format!(
            "{name} = {seconds:e} s is not a whole number of 125 ps ticks"
        )));
    }
    Ok(r as i64)
}

impl Binning {
    /// `(bin_ticks, lo_ticks, n_bins)`.
    fn in_ticks(&self) -> Result<(u64, i64, usize), CorrelationError> {
        if !(self.bin_width >= TICK_SECONDS * (1.0 - 1e-9)) {
            return Err(CorrelationError::Binning(format!(
                "bin width {:e} s is below the 125 ps tick",
                self.bin_width
            )));
        }
        if !(self.hi > self.lo) {
            return Err(CorrelationError::Binning("hi must exceed lo".into()));
        }
        let bin = to_ticks(self.bin_width, "bin_width")? as u64;
        let lo = to_ticks(self.lo, "lo")?;
        let hi = to_ticks(self.hi, "hi")?;
        let n = ((hi - lo) as f64 / bin as f64).round() as usize;
        if n == 0 {
            return Err(CorrelationError::Binning("range holds no bins".into()));
        }
        Ok((bin, lo, n))
    }
}

fn split_channels(stream: &TimestampStream) -> Result<(Vec<u64>, Vec<u64>), CorrelationError> {
    if let Some(index) = stream.first_unsorted() {
        return Err(CorrelationError::Unsorted { index });
    }
    let mut signal = Vec::new();
    let mut idler = Vec::new();
    for r in &stream.records {
        match r.channel {
            Channel::Signal => signal.push(r.tick),
            Channel::Idler => idler.push(r.tick),
        }
    }
    Ok((signal, idler))
}

/// Multi-stop accumulation of `starts` against `stops` into `counts`.
fn accumulate(starts: &[u64], stops: &[u64], bin: u64, lo: i64, counts: &mut [u64]) {
    let span = (counts.len() as u64 * bin) as i128;
    let mut first = 0usize;
    for &s in starts {
        let window_lo = s as i128 + lo as i128;
        while first < stops.len() && (stops[first] as i128) < window_lo {
            first += 1;
        }
        for &t in &stops[first..] {
            let offset = t as i128 - window_lo;
            if offset >= span {
                break;
            }
            counts[(offset as u64 / bin) as usize] += 1;
        }
    }
}

/// Multi-stop G² histogram: for every gated signal event, every idler event
/// with `Δt = t_idler − t_signal ∈ [lo, hi)` is counted.
///
/// Idler events are not gated. One pass with a sliding lower bound.
pub fn build_g2(
    stream: &TimestampStream,
    gating: &GatingPlan,
    binning: &Binning,
) -> Result<CoincidenceHistogram, CorrelationError> {
    let (bin, lo, n) = binning.in_ticks()?;
    let (signal, idler) = split_channels(stream)?;
    if gating.total_active_ticks() == 0 {
        return Err(CorrelationError::EmptyGating);
    }
    let mut cursor = gating.cursor();
    let starts: Vec<u64> = signal.into_iter().filter(|&t| cursor.contains(t)).collect();
    let mut counts = vec![0u64; n];
    accumulate(&starts, &idler, bin, lo, &mut counts);
    Ok(CoincidenceHistogram {
        bin_ticks: bin,
        lo_ticks: lo,
        counts,
        n_start_events: starts.len() as u64,
        active_time: gating.total_active_time(),
    })
}

/// [`build_g2`] with gate windows reduced in parallel and merged.
pub fn build_g2_parallel(
    stream: &TimestampStream,
    gating: &GatingPlan,
    binning: &Binning,
) -> Result<CoincidenceHistogram, CorrelationError> {
    let (bin, lo, n) = binning.in_ticks()?;
    let (signal, idler) = split_channels(stream)?;
    let partials: Vec<(Vec<u64>, u64)> = gating
        .windows()
        .par_iter()
        .map(|&(start, end)| {
            let a = signal.partition_point(|&t| t < start);
            let b = signal.partition_point(|&t| t < end);
            let starts = &signal[a..b];
            let mut counts = vec![0u64; n];
            if let Some(&first) = starts.first() {
                let from = (first as i128 + lo as i128).max(0) as u64;
                let k = idler.partition_point(|&t| t < from);
                accumulate(starts, &idler[k..], bin, lo, &mut counts);
            }
            (counts, starts.len() as u64)
        })
        .collect();
    let mut counts = vec![0u64; n];
    let mut n_start = 0;
    for (c, s) in partials {
        for (a, b) in counts.iter_mut().zip(c) {
            *a += b;
        }
        n_start += s;
    }
    Ok(CoincidenceHistogram {
        bin_ticks: bin,
        lo_ticks: lo,
        counts,
        n_start_events: n_start,
        active_time: gating.total_active_time(),
    })
}

/// Result of fitting `G_acc + G0·exp(−Δt/τ)·Θ(Δt)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct G2Fit {
    /// Accidental level, counts/bin, from the tail average.
    pub g_acc: Estimate,
    /// Amplitude at Δt = 0, counts/bin.
    pub g0: Estimate,
    /// Decay constant, ns.
    pub tau_ns: Estimate,
    /// Fit window, ns.
    pub fit_window_ns: (f64, f64),
    /// Tail window averaged for `g_acc`, ns.
    pub tail_window_ns: (f64, f64),
    /// Weighted residual sum of squares over the fit window.
    pub chi2: f64,
    pub dof: usize,
}

impl G2Fit {
    pub fn tau_seconds(&self) -> Estimate {
        self.tau_ns.scale(NS)
    }

    /// Model value at delay `dt_ns`.
    pub fn model(&self, dt_ns: f64) -> f64 {
        if dt_ns >= 0.0 {
            self.g_acc.value + self.g0.value * (-dt_ns / self.tau_ns.value).exp()
        } else {
            self.g_acc.value
        }
    }
}

/// Windows of a G² fit, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct G2FitWindows {
    pub tail: (f64, f64),
    /// Start of the exponential fit; `None` starts one bin after the peak bin.
    pub fit_lo: Option<f64>,
    /// End of the exponential fit; `None` ends at the tail start.
    pub fit_hi: Option<f64>,
}

impl Default for G2FitWindows {
    fn default() -> Self {
        Self {
            tail: (150.0 * NS, 200.0 * NS),
            fit_lo: None,
            fit_hi: None,
        }
    }
}

/// Delay profile for fitting: bin centers (ns) and counts per bin.
#[derive(Debug, Clone, PartialEq)]
pub struct G2Profile {
    pub centers_ns: Vec<f64>,
    pub bin_width_ns: f64,
    pub values: Vec<f64>,
}

impl From<&CoincidenceHistogram> for G2Profile {
    fn from(h: &CoincidenceHistogram) -> Self {
        Self {
            centers_ns: (0..h.counts.len()).map(|k| h.bin_center(k) / NS).collect(),
            bin_width_ns: h.bin_width() / NS,
            values: h.counts.iter().map(|&c| c as f64).collect(),
        }
    }
}

impl G2Profile {
    fn indices_within(&self, lo_ns: f64, hi_ns: f64) -> Vec<usize> {
        let half = 0.5 * self.bin_width_ns;
        let eps = 1e-6 * self.bin_width_ns;
        (0..self.centers_ns.len())
            .filter(|&k| {
                self.centers_ns[k] - half >= lo_ns - eps && self.centers_ns[k] + half <= hi_ns + eps
            })
            .collect()
    }
}

/// Fits a histogram; see [`fit_g2_profile`].
pub fn fit_g2(h: &CoincidenceHistogram, windows: &G2FitWindows) -> Result<G2Fit, CorrelationError> {
    fit_g2_profile(&G2Profile::from(h), windows)
}

/// `G_acc` is fixed to the tail mean, then `(G0, τ)` are fitted by weighted
/// least squares over the fit window. Weights are Poisson variances taken from
/// a preliminary fit (first pass: observed counts).
pub fn fit_g2_profile(
    profile: &G2Profile,
    windows: &G2FitWindows,
) -> Result<G2Fit, CorrelationError> {
    let (tail_lo, tail_hi) = (windows.tail.0 / NS, windows.tail.1 / NS);
    let tail = profile.indices_within(tail_lo, tail_hi);
    if tail.is_empty() {
        return Err(CorrelationError::OutOfRange {
            lo: windows.tail.0,
            hi: windows.tail.1,
        });
    }
    let n_tail = tail.len() as f64;
    let g_acc = tail.iter().map(|&k| profile.values[k]).sum::<f64>() / n_tail;
    let g_acc_est = Estimate::new(g_acc, (g_acc / n_tail).sqrt());

    let (peak_idx, peak) =
        profile
            .values
            .iter()
            .cloned()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |a, (k, v)| if v > a.1 { (k, v) } else { a },
            );
    let excess = peak - g_acc;
    let threshold = 5.0 * (g_acc + 1.0).sqrt();
    if !(excess >= threshold) {
        return Err(CorrelationError::InsufficientSignal { excess, threshold });
    }

    let fit_lo = match windows.fit_lo {
        Some(v) => v / NS,
        None => (profile.centers_ns[peak_idx] + 0.5 * profile.bin_width_ns).max(0.0),
    };
    let fit_hi = windows.fit_hi.map(|v| v / NS).unwrap_or(tail_lo);
    let fit: Vec<usize> = profile
        .indices_within(fit_lo, fit_hi)
        .into_iter()
        .filter(|&k| profile.centers_ns[k] >= 0.0)
        .collect();
    if fit.len() < 4 {
        return Err(FitError::TooFewPoints {
            needed: 4,
            got: fit.len(),
        }
        .into());
    }
    let xs: Vec<f64> = fit.iter().map(|&k| profile.centers_ns[k]).collect();
    let ys: Vec<f64> = fit.iter().map(|&k| profile.values[k]).collect();

    let (g0_init, tau_init) = initial_exponential(&xs, &ys, g_acc);
    let model = |p: &[f64], x: f64| g_acc + p[0] * (-x / p[1]).exp();

    let run = |sigmas: &[f64], start: &[f64]| {
        let residuals = |p: &[f64]| -> Option<Vec<f64>> {
            if !(p[1] > 0.0) {
                return None;
            }
            Some(
                xs.iter()
                    .zip(&ys)
                    .zip(sigmas)
                    .map(|((x, y), s)| (model(p, *x) - y) / s)
                    .collect(),
            )
        };
        let opts = LmOptions {
            covariance: CovarianceScaling::Absolute,
            ..LmOptions::default()
        };
        lm::minimize(residuals, start, &opts)
    };

    let first_sigmas: Vec<f64> = ys.iter().map(|y| y.max(1.0).sqrt()).collect();
    let first = run(&first_sigmas, &[g0_init, tau_init])?;
    let second_sigmas: Vec<f64> = xs
        .iter()
        .map(|x| model(&first.params, *x).max(1e-3).sqrt())
        .collect();
    let report = run(&second_sigmas, &first.params)?;

    Ok(G2Fit {
        g_acc: g_acc_est,
        g0: Estimate::new(report.params[0], report.sigmas[0]),
        tau_ns: Estimate::new(report.params[1], report.sigmas[1]),
        fit_window_ns: (fit_lo, fit_hi),
        tail_window_ns: (tail_lo, tail_hi),
        chi2: report.rss,
        dof: xs.len() - 2,
    })
}

/// Log-linear estimate of `(G0, τ)` from the points well above background.
fn initial_exponential(xs: &[f64], ys: &[f64], g_acc: f64) -> (f64, f64) {
    let peak = ys.iter().cloned().fold(0.0, f64::max) - g_acc;
    let floor = (0.05 * peak).max(3.0 * (g_acc + 1.0).sqrt());
    let pts: Vec<(f64, f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(_, y)| **y - g_acc > floor)
        .map(|(x, y)| (*x, (y - g_acc).ln(), y - g_acc))
        .collect();
    if pts.len() >= 2 {
        // Weighted by counts: var(ln y) ≈ 1/y.
        let sw: f64 = pts.iter().map(|p| p.2).sum();
        let mx = pts.iter().map(|p| p.2 * p.0).sum::<f64>() / sw;
        let my = pts.iter().map(|p| p.2 * p.1).sum::<f64>() / sw;
        let sxx: f64 = pts.iter().map(|p| p.2 * (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| p.2 * (p.0 - mx) * (p.1 - my)).sum();
        let slope = sxy / sxx;
        if slope < 0.0 && slope.is_finite() {
            let tau = -1.0 / slope;
            return ((my - slope * mx).exp(), tau);
        }
    }
    let span = xs.last().unwrap_or(&1.0) - xs.first().unwrap_or(&0.0);
    (peak.max(1.0), (span / 10.0).max(1e-3))
}

/// Coincidence window for the pair rate, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceWindow {
    pub lo: f64,
    pub hi: f64,
}

impl Default for CoincidenceWindow {
    fn default() -> Self {
        Self {
            lo: 0.0,
            hi: 30.0 * NS,
        }
    }
}

impl CoincidenceWindow {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Pair rate over a coincidence window, raw and accidental-subtracted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairRate {
    pub raw: Estimate,
    pub subtracted: Estimate,
    pub window_bins: usize,
    pub window_counts: u64,
}

impl PairRate {
    /// The default pair rate, accidental-subtracted.
    pub fn value(&self) -> Estimate {
        self.subtracted
    }
}

pub fn pair_rate(
    h: &CoincidenceHistogram,
    fit: &G2Fit,
    window: &CoincidenceWindow,
) -> Result<PairRate, CorrelationError> {
    let eps = 1e-6 * h.bin_width();
    if window.lo < h.lo() - eps || window.hi > h.hi() + eps || window.hi <= window.lo {
        return Err(CorrelationError::OutOfRange {
            lo: window.lo,
            hi: window.hi,
        });
    }
    if !(h.active_time > 0.0) {
        return Err(CorrelationError::EmptyGating);
    }
    let bins = h.bins_within(window.lo, window.hi);
    let n_bins = bins.len();
    let counts: u64 = h.counts[bins].iter().sum();
    let t = h.active_time;
    let raw = Estimate::poisson_rate(counts, t);
    let acc = fit.g_acc.scale(n_bins as f64 / t);
    Ok(PairRate {
        raw,
        subtracted: raw - acc,
        window_bins: n_bins,
        window_counts: counts,
    })
}

/// Gated singles rates and heralding efficiencies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinglesAndEfficiencies {
    pub r_s: Estimate,
    pub r_i: Estimate,
    pub eta_s: Estimate,
    pub eta_i: Estimate,
}

/// `r = gated counts / active time`, `η_s = r_p / (r_s − d_s)`,
/// `η_i = r_p / (r_i − d_i)`. Uncertainties assume independent Poisson counts.
pub fn singles_and_efficiencies(
    stream: &TimestampStream,
    gating: &GatingPlan,
    r_p: Estimate,
    dark_s: f64,
    dark_i: f64,
) -> Result<SinglesAndEfficiencies, CorrelationError> {
    if !(dark_s >= 0.0 && dark_i >= 0.0) {
        return Err(CorrelationError::InvalidInput(
            "dark rates must be >= 0".into(),
        ));
    }
    if let Some(index) = stream.first_unsorted() {
        return Err(CorrelationError::Unsorted { index });
    }
    let t = gating.total_active_time();
    if !(t > 0.0) {
        return Err(CorrelationError::EmptyGating);
    }
    let mut cursor = gating.cursor();
    let (mut n_s, mut n_i) = (0u64, 0u64);
    for r in &stream.records {
        if cursor.contains(r.tick) {
            match r.channel {
                Channel::Signal => n_s += 1,
                Channel::Idler => n_i += 1,
            }
        }
    }
    let r_s = Estimate::poisson_rate(n_s, t);
    let r_i = Estimate::poisson_rate(n_i, t);
    let (eta_s, eta_i) = heralding_efficiencies(r_p, r_s, r_i, dark_s, dark_i)?;
    Ok(SinglesAndEfficiencies {
        r_s,
        r_i,
        eta_s,
        eta_i,
    })
}

/// `(η_s, η_i)` from rates.
pub fn heralding_efficiencies(
    r_p: Estimate,
    r_s: Estimate,
    r_i: Estimate,
    dark_s: f64,
    dark_i: f64,
) -> Result<(Estimate, Estimate), CorrelationError> {
    let den_s = r_s - Estimate::exact(dark_s);
    let den_i = r_i - Estimate::exact(dark_i);
    if !(den_s.value > 0.0) {
        return Err(CorrelationError::NonPositiveDenominator {
            which: "signal",
            value: den_s.value,
        });
    }
    if !(den_i.value > 0.0) {
        return Err(CorrelationError::NonPositiveDenominator {
            which: "idler",
            value: den_i.value,
        });
    }
    Ok((r_p / den_s, r_p / den_i))
}

/// Coincidence-to-accidental ratio from measured rates,
/// `(r_i·r_s·Δt + r_p) / (r_i·r_s·Δt)`.
pub fn car_measured(r_p: f64, r_s: f64, r_i: f64, delta_t: f64) -> Result<f64, CorrelationError> {
    check_rates(&[r_p, r_s, r_i], delta_t)?;
    let acc = r_i * r_s * delta_t;
    if acc == 0.0 {
        return Err(CorrelationError::ZeroDenominator);
    }
    Ok((acc + r_p) / acc)
}

/// [`car_measured`] with first-order uncertainty propagation.
pub fn car_measured_estimate(
    r_p: Estimate,
    r_s: Estimate,
    r_i: Estimate,
    delta_t: f64,
) -> Result<Estimate, CorrelationError> {
    let car = car_measured(r_p.value.max(0.0), r_s.value, r_i.value, delta_t)?;
    // CAR − 1 = r_p / (r_s r_i Δt)
    let excess = car - 1.0;
    let rel = (r_p.sigma / r_p.value.max(f64::MIN_POSITIVE))
        .hypot(r_s.relative_sigma())
        .hypot(r_i.relative_sigma());
    let sigma = if excess > 0.0 {
        excess * rel
    } else {
        r_p.sigma / (r_s.value * r_i.value * delta_t)
    };
    Ok(Estimate::new(car, sigma))
}

/// Dark-count-aware CAR model with singles `r_p/η + d` on each arm.
pub fn car_model(
    r_p: f64,
    eta_s: f64,
    eta_i: f64,
    dark_s: f64,
    dark_i: f64,
    delta_t: f64,
) -> Result<f64, CorrelationError> {
    check_rates(&[r_p, dark_s, dark_i], delta_t)?;
    if !(eta_s > 0.0 && eta_i > 0.0) {
        return Err(CorrelationError::InvalidInput(
            "heralding efficiencies must be > 0".into(),
        ));
    }
    let acc = (r_p / eta_s + dark_s) * (r_p / eta_i + dark_i) * delta_t;
    if acc == 0.0 {
        return Err(CorrelationError::ZeroDenominator);
    }
    Ok((acc + r_p) / acc)
}

/// Maximum of [`car_model`] over the pair rate, `(r_p, CAR)`.
///
/// Golden-section search in `ln r_p` over `[1e-9, 1e12]` s⁻¹. Requires both
/// dark rates to be positive, otherwise the CAR grows without bound as
/// `r_p → 0`.
pub fn car_model_peak(
    eta_s: f64,
    eta_i: f64,
    dark_s: f64,
    dark_i: f64,
    delta_t: f64,
) -> Result<(f64, f64), CorrelationError> {
    if !(dark_s > 0.0 && dark_i > 0.0) {
        return Err(CorrelationError::InvalidInput(
            "CAR peak needs positive dark rates on both arms".into(),
        ));
    }
    let f = |x: f64| car_model(x.exp(), eta_s, eta_i, dark_s, dark_i, delta_t);
    let (mut a, mut b) = (1e-9f64.ln(), 1e12f64.ln());
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    for _ in 0..200 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d)?;
        }
        if (b - a).abs() < 1e-12 {
            break;
        }
    }
    let x = 0.5 * (a + b);
    Ok((x.exp(), f(x)?))
}

fn check_rates(rates: &[f64], delta_t: f64) -> Result<(), CorrelationError> {
    if rates.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
        return Err(CorrelationError::InvalidInput(
            "rates must be finite and >= 0".into(),
        ));
    }
    if !(delta_t > 0.0 && delta_t.is_finite()) {
        return Err(CorrelationError::InvalidInput("delta_t must be > 0".into()));
    }
    Ok(())
}

/// Dimensionless spectral brightness `2π·τ·r_p` (τ in seconds, r_p in s⁻¹).
pub fn spectral_brightness(tau: f64, r_p: f64) -> Result<f64, CorrelationError> {
    if !(tau > 0.0) {
        return Err(CorrelationError::InvalidInput("tau must be > 0".into()));
    }
    if !(r_p >= 0.0) {
        return Err(CorrelationError::InvalidInput("r_p must be >= 0".into()));
    }
    Ok(2.0 * std::f64::consts::PI * tau * r_p)
}

pub fn spectral_brightness_estimate(
    tau: Estimate,
    r_p: Estimate,
) -> Result<Estimate, CorrelationError> {
    spectral_brightness(tau.value, r_p.value.max(0.0))?;
    Ok((tau * r_p).scale(2.0 * std::f64::consts::PI))
}

/// Figures of merit of a measured source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceMetrics {
    pub r_s: Estimate,
    pub r_i: Estimate,
    /// Accidental-subtracted pair rate.
    pub r_p: Estimate,
    pub r_p_raw: Estimate,
    pub eta_s: Estimate,
    pub eta_i: Estimate,
    pub car: Estimate,
    pub tau_ns: Estimate,
    pub brightness: Estimate,
}

/// Settings of the full analysis chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub binning: Binning,
    pub fit_windows: G2FitWindows,
    pub coincidence: CoincidenceWindow,
    pub dark_s: f64,
    pub dark_i: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            binning: Binning::default(),
            fit_windows: G2FitWindows::default(),
            coincidence: CoincidenceWindow::default(),
            dark_s: 0.0,
            dark_i: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub histogram: CoincidenceHistogram,
    pub fit: G2Fit,
    pub pair_rate: PairRate,
    pub metrics: SourceMetrics,
}

/// Runs the whole chain on one stream.
pub fn analyze(
    stream: &TimestampStream,
    gating: &GatingPlan,
    config: &AnalysisConfig,
) -> Result<Analysis, CorrelationError> {
    let histogram = build_g2(stream, gating, &config.binning)?;
    let fit = fit_g2(&histogram, &config.fit_windows)?;
    let pr = pair_rate(&histogram, &fit, &config.coincidence)?;
    let r_p = pr.value();
    let se = singles_and_efficiencies(stream, gating, r_p, config.dark_s, config.dark_i)?;
    let car = car_measured_estimate(r_p, se.r_s, se.r_i, config.coincidence.width())?;
    let brightness = spectral_brightness_estimate(fit.tau_seconds(), r_p)?;
    Ok(Analysis {
        metrics: SourceMetrics {
            r_s: se.r_s,
            r_i: se.r_i,
            r_p,
            r_p_raw: pr.raw,
            eta_s: se.eta_s,
            eta_i: se.eta_i,
            car,
            tau_ns: fit.tau_ns,
            brightness,
        },
        histogram,
        fit,
        pair_rate: pr,
    })
}
