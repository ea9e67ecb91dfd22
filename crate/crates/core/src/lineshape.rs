//! Pump-noise convolution of the steady-state observables and the fit models
//! built on them.
//!
//! The combined pump-laser noise is a unit-area Gaussian in the two-photon
//! detuning. Detected singles are proportional to the convolved `ρ33`, pairs
//! to the convolved `|ρ31|²`, and the heralding efficiency is their ratio.
//! Pump powers map to Rabi frequencies through `Ω = c·√P`.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::{self, FitError, LmOptions};
use crate::measure::Estimate;
use crate::model::{steady_state_analytic, ModelError, ThreeLevelParams};
use crate::quadrature::GaussLegendre;

/// Gauss–Legendre points per panel.
pub const DEFAULT_QUADRATURE_ORDER: usize = 64;
/// Equal panels across the truncated support. A single 64-point panel is
/// not enough to resolve the sub-MHz features of `|ρ31|²` at 1e-8.
pub const DEFAULT_QUADRATURE_PANELS: usize = 8;

/// Natural-linewidth style defaults, MHz.
pub const DEFAULT_GAMMA1: f64 = 5.75;
pub const DEFAULT_GAMMA2: f64 = 0.66;

/// Ω1 = 5 MHz at 450 µW and Ω2 = 10 MHz at 15 mW.
pub const DEFAULT_RABI_CAL_780: f64 = 7.453_559_924_999_299;
pub const DEFAULT_RABI_CAL_776: f64 = 2.581_988_897_471_611;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LineshapeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("integrand is not finite at δ = {at} MHz")]
    NonFinite { at: f64 },
    #[error("invalid noise model: {0}")]
    InvalidNoise(&'static str),
    #[error("invalid scale: {0}")]
    InvalidScale(&'static str),
    #[error("singles model underflows ({value:e}); heralding efficiency undefined")]
    SinglesUnderflow { value: f64 },
    #[error(transparent)]
    Fit(#[from] FitError),
}

/// Combined Gaussian spectrum of the two pump lasers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PumpNoiseModel {
    /// Full width at half maximum, MHz.
    pub fwhm: f64,
    /// Half-width of the integration support in units of `fwhm`.
    pub truncation: f64,
}

impl Default for PumpNoiseModel {
    fn default() -> Self {
        Self {
            fwhm: 2.0,
            truncation: 5.0,
        }
    }
}

impl PumpNoiseModel {
    pub fn new(fwhm: f64, truncation: f64) -> Result<Self, LineshapeError> {
        let n = Self { fwhm, truncation };
        n.validate()?;
        Ok(n)
    }

    pub fn validate(&self) -> Result<(), LineshapeError> {
        if !(self.fwhm >= 0.0 && self.fwhm.is_finite()) {
            return Err(LineshapeError::InvalidNoise("fwhm must be finite and >= 0"));
        }
        if !(self.truncation >= 3.0 && self.truncation.is_finite()) {
            return Err(LineshapeError::InvalidNoise("truncation must be >= 3"));
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        self.fwhm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt())
    }

    /// Unit-area Gaussian density at offset `x`.
    pub fn density(&self, x: f64) -> f64 {
        let s = self.sigma();
        (-0.5 * (x / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    }
}

/// Amplitudes and power calibrations of the rate models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateModelScale {
    /// Detected singles rate per unit convolved `ρ33`, s⁻¹.
    pub amp_single: f64,
    /// Detected pair rate per unit convolved `|ρ31|²`, s⁻¹.
    pub amp_pairs: f64,
    /// `c` in `Ω1 = c·√P780`, MHz/√mW.
    pub power_to_rabi_1: f64,
    /// `c` in `Ω2 = c·√P776`, MHz/√mW.
    pub power_to_rabi_2: f64,
}

impl Default for RateModelScale {
    fn default() -> Self {
        Self {
            amp_single: 1.0e6,
            amp_pairs: 2.0e5,
            power_to_rabi_1: DEFAULT_RABI_CAL_780,
            power_to_rabi_2: DEFAULT_RABI_CAL_776,
        }
    }
}

impl RateModelScale {
    pub fn validate(&self) -> Result<(), LineshapeError> {
        let all = [
            self.amp_single,
            self.amp_pairs,
            self.power_to_rabi_1,
            self.power_to_rabi_2,
        ];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(LineshapeError::InvalidScale(
                "amplitudes and calibrations must be finite and >= 0",
            ))
        }
    }

    /// Ceiling of the heralding model, `amp_pairs / amp_single`.
    pub fn eta_ceiling(&self) -> f64 {
        self.amp_pairs / self.amp_single
    }
}

/// Experimental knobs: pump powers, detunings and the atomic widths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub p780_mw: f64,
    pub p776_mw: f64,
    pub big_delta: f64,
    pub small_delta: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl Default for OperatingPoint {
    fn default() -> Self {
        Self {
            p780_mw: 0.45,
            p776_mw: 15.0,
            big_delta: -60.0,
            small_delta: 0.0,
            gamma1: DEFAULT_GAMMA1,
            gamma2: DEFAULT_GAMMA2,
        }
    }
}

impl OperatingPoint {
    pub fn to_params(&self, scale: &RateModelScale) -> Result<ThreeLevelParams, LineshapeError> {
        if !(self.p780_mw >= 0.0 && self.p776_mw >= 0.0) {
            return Err(LineshapeError::InvalidScale("pump powers must be >= 0"));
        }
        Ok(ThreeLevelParams::new(
            scale.power_to_rabi_1.abs() * self.p780_mw.sqrt(),
            scale.power_to_rabi_2.abs() * self.p776_mw.sqrt(),
            self.big_delta,
            self.small_delta,
            self.gamma1,
            self.gamma2,
        )?)
    }
}

/// Composite Gauss–Legendre settings for the convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadrature {
    rule: GaussLegendre,
    panels: usize,
}

impl Default for Quadrature {
    fn default() -> Self {
        Self::new(DEFAULT_QUADRATURE_ORDER, DEFAULT_QUADRATURE_PANELS)
    }
}

impl Quadrature {
    pub fn new(order: usize, panels: usize) -> Self {
        Self {
            rule: GaussLegendre::new(order),
            panels: panels.max(1),
        }
    }

    pub fn order(&self) -> usize {
        self.rule.order()
    }

    pub fn panels(&self) -> usize {
        self.panels
    }

    /// Offsets and weights covering `[-half, half]`.
    fn for_each_offset<F: FnMut(f64, f64) -> Result<(), LineshapeError>>(
        &self,
        half: f64,
        mut f: F,
    ) -> Result<(), LineshapeError> {
        let width = 2.0 * half / self.panels as f64;
        for k in 0..self.panels {
            let lo = -half + width * k as f64;
            let mid = lo + 0.5 * width;
            for (x, w) in self.rule.nodes().iter().zip(self.rule.weights()) {
                f(mid + 0.5 * width * x, 0.5 * width * w)?;
            }
        }
        Ok(())
    }
}

fn default_quadrature() -> &'static Quadrature {
    static RULE: OnceLock<Quadrature> = OnceLock::new();
    RULE.get_or_init(Quadrature::default)
}

/// `∫ f(δ′)·G(center − δ′) dδ′` over the truncated support.
///
/// A zero-width noise model returns `f(center)` exactly.
pub fn convolve_with<F>(
    mut f: F,
    center: f64,
    noise: &PumpNoiseModel,
    quad: &Quadrature,
) -> Result<f64, LineshapeError>
where
    F: FnMut(f64) -> Result<f64, LineshapeError>,
{
    noise.validate()?;
    let check = |at: f64, v: f64| {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(LineshapeError::NonFinite { at })
        }
    };
    if noise.fwhm == 0.0 {
        return check(center, f(center)?);
    }
    let half = noise.truncation * noise.fwhm;
    let mut sum = 0.0;
    quad.for_each_offset(half, |u, w| {
        let x = center + u;
        let v = check(x, f(x)?)?;
        sum += w * v * noise.density(u);
        Ok(())
    })?;
    Ok(sum)
}

/// Convolution of `f` in the two-photon detuning, evaluated at `p.small_delta`,
/// with the default quadrature.
pub fn convolve_in_delta<F>(
    f: F,
    p: &ThreeLevelParams,
    noise: &PumpNoiseModel,
) -> Result<f64, LineshapeError>
where
    F: FnMut(f64) -> Result<f64, LineshapeError>,
{
    convolve_with(f, p.small_delta, noise, default_quadrature())
}

/// Convolved `(ρ33, |ρ31|²)` at `p.small_delta`, sharing one set of nodes.
pub fn convolved_observables(
    p: &ThreeLevelParams,
    noise: &PumpNoiseModel,
    quad: &Quadrature,
) -> Result<(f64, f64), LineshapeError> {
    noise.validate()?;
    if noise.fwhm == 0.0 {
        let s = steady_state_analytic(p)?;
        return Ok((s.rho33, s.rho31_sq));
    }
    let half = noise.truncation * noise.fwhm;
    let (mut c33, mut c31) = (0.0, 0.0);
    quad.for_each_offset(half, |u, w| {
        let x = p.small_delta + u;
        let s = steady_state_analytic(&p.with_small_delta(x))?;
        if !(s.rho33.is_finite() && s.rho31_sq.is_finite()) {
            return Err(LineshapeError::NonFinite { at: x });
        }
        let g = w * noise.density(u);
        c33 += g * s.rho33;
        c31 += g * s.rho31_sq;
        Ok(())
    })?;
    Ok((c33, c31))
}

/// Detected singles rate, s⁻¹.
pub fn model_single_rate(
    p: &ThreeLevelParams,
    noise: &PumpNoiseModel,
    scale: &RateModelScale,
) -> Result<f64, LineshapeError> {
    scale.validate()?;
    Ok(scale.amp_single * convolved_observables(p, noise, default_quadrature())?.0)
}

/// Detected pair rate, s⁻¹.
pub fn model_pair_rate(
    p: &ThreeLevelParams,
    noise: &PumpNoiseModel,
    scale: &RateModelScale,
) -> Result<f64, LineshapeError> {
    scale.validate()?;
    Ok(scale.amp_pairs * convolved_observables(p, noise, default_quadrature())?.1)
}

/// Heralding efficiency, `model_pair_rate / model_single_rate`.
///
/// Bounded above by [`RateModelScale::eta_ceiling`] because `|ρ31|² ≤ ρ33`
/// pointwise.
pub fn model_heralding(
    p: &ThreeLevelParams,
    noise: &PumpNoiseModel,
    scale: &RateModelScale,
) -> Result<f64, LineshapeError> {
    scale.validate()?;
    let (c33, c31) = convolved_observables(p, noise, default_quadrature())?;
    heralding_from(c33, c31, scale)
}

fn heralding_from(c33: f64, c31: f64, scale: &RateModelScale) -> Result<f64, LineshapeError> {
    let singles = scale.amp_single * c33;
    if !(singles > 1e-300) {
        return Err(LineshapeError::SinglesUnderflow { value: singles });
    }
    Ok(scale.amp_pairs * c31 / singles)
}

/// All three model outputs at one parameter point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelRates {
    pub single: f64,
    pub pairs: f64,
    pub eta: f64,
}

pub fn model_rates(
    p: &ThreeLevelParams,
    noise: &PumpNoiseModel,
    scale: &RateModelScale,
    quad: &Quadrature,
) -> Result<ModelRates, LineshapeError> {
    scale.validate()?;
    let (c33, c31) = convolved_observables(p, noise, quad)?;
    Ok(ModelRates {
        single: scale.amp_single * c33,
        pairs: scale.amp_pairs * c31,
        eta: heralding_from(c33, c31, scale)?,
    })
}

/// Independent variable of a measured curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Two-photon detuning δ, MHz.
    Delta,
    /// Pump-2 power, mW.
    P776,
    /// Pump-1 power, mW.
    P780,
}

impl SweepAxis {
    pub fn apply(&self, op: &OperatingPoint, x: f64) -> OperatingPoint {
        match self {
            SweepAxis::Delta => OperatingPoint {
                small_delta: x,
                ..*op
            },
            SweepAxis::P776 => OperatingPoint { p776_mw: x, ..*op },
            SweepAxis::P780 => OperatingPoint { p780_mw: x, ..*op },
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Delta => "delta",
            SweepAxis::P776 => "p776",
            SweepAxis::P780 => "p780",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateTarget {
    Single,
    Pairs,
    Eta,
}

/// Whether a heralding fit reuses the rate-fit amplitudes or refits their ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaAmplitudes {
    /// `amp_pairs / amp_single` held at the supplied scale.
    Shared,
    /// `amp_pairs` floated with `amp_single` held, i.e. the ceiling is fitted.
    Independent,
}

/// Quantities a rate fit may float.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreeParam {
    /// The amplitude belonging to the fitted target.
    Amplitude,
    /// Offset of the measured δ axis from the model's two-photon resonance.
    DeltaOffset,
    RabiCal780,
    RabiCal776,
    BigDelta,
    Gamma1,
    Gamma2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateFitSetup {
    pub axis: SweepAxis,
    pub target: RateTarget,
    /// Fixed knobs; the swept one is overwritten per data point.
    pub operating: OperatingPoint,
    /// Initial (or held) amplitudes and calibrations.
    pub scale: RateModelScale,
    pub delta_offset: f64,
    pub free: Vec<FreeParam>,
    pub eta_amplitudes: EtaAmplitudes,
    /// Replace the initial amplitude (and δ offset, on a δ axis) by the
    /// data-driven heuristic.
    pub heuristic_initial: bool,
    pub noise: PumpNoiseModel,
}

impl RateFitSetup {
    pub fn new(axis: SweepAxis, target: RateTarget) -> Self {
        Self {
            axis,
            target,
            operating: OperatingPoint::default(),
            scale: RateModelScale::default(),
            delta_offset: 0.0,
            free: vec![FreeParam::Amplitude],
            eta_amplitudes: EtaAmplitudes::Independent,
            heuristic_initial: true,
            noise: PumpNoiseModel::default(),
        }
    }

    fn effective_free(&self) -> Vec<FreeParam> {
        let mut out: Vec<FreeParam> = Vec::new();
        for f in &self.free {
            if out.contains(f) {
                continue;
            }
            if *f == FreeParam::Amplitude
                && self.target == RateTarget::Eta
                && self.eta_amplitudes == EtaAmplitudes::Shared
            {
                continue;
            }
            out.push(*f);
        }
        out
    }
}

/// Full state of a rate model: operating point, scale and δ offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateModelState {
    pub operating: OperatingPoint,
    pub scale: RateModelScale,
    pub delta_offset: f64,
}

impl RateModelState {
    fn get(&self, which: FreeParam, target: RateTarget) -> f64 {
        match which {
            FreeParam::Amplitude => match target {
                RateTarget::Single => self.scale.amp_single,
                RateTarget::Pairs | RateTarget::Eta => self.scale.amp_pairs,
            },
            FreeParam::DeltaOffset => self.delta_offset,
            FreeParam::RabiCal780 => self.scale.power_to_rabi_1,
            FreeParam::RabiCal776 => self.scale.power_to_rabi_2,
            FreeParam::BigDelta => self.operating.big_delta,
            FreeParam::Gamma1 => self.operating.gamma1,
            FreeParam::Gamma2 => self.operating.gamma2,
        }
    }

    fn set(&mut self, which: FreeParam, target: RateTarget, v: f64) {
        match which {
            FreeParam::Amplitude => match target {
                RateTarget::Single => self.scale.amp_single = v,
                RateTarget::Pairs | RateTarget::Eta => self.scale.amp_pairs = v,
            },
            FreeParam::DeltaOffset => self.delta_offset = v,
            FreeParam::RabiCal780 => self.scale.power_to_rabi_1 = v,
            FreeParam::RabiCal776 => self.scale.power_to_rabi_2 = v,
            FreeParam::BigDelta => self.operating.big_delta = v,
            FreeParam::Gamma1 => self.operating.gamma1 = v,
            FreeParam::Gamma2 => self.operating.gamma2 = v,
        }
    }

    /// Model value of `target` at abscissa `x` on `axis`.
    pub fn evaluate(
        &self,
        axis: SweepAxis,
        target: RateTarget,
        x: f64,
        noise: &PumpNoiseModel,
        quad: &Quadrature,
    ) -> Result<f64, LineshapeError> {
        let mut op = axis.apply(&self.operating, x);
        op.small_delta -= self.delta_offset;
        let p = op.to_params(&self.scale)?;
        let (c33, c31) = convolved_observables(&p, noise, quad)?;
        let scale = RateModelScale {
            amp_single: self.scale.amp_single.abs(),
            amp_pairs: self.scale.amp_pairs.abs(),
            ..self.scale
        };
        match target {
            RateTarget::Single => Ok(scale.amp_single * c33),
            RateTarget::Pairs => Ok(scale.amp_pairs * c31),
            RateTarget::Eta => heralding_from(c33, c31, &scale),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateFitResult {
    pub state: RateModelState,
    pub estimates: Vec<(FreeParam, Estimate)>,
    pub residuals: Vec<f64>,
    pub rss: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl RateFitResult {
    pub fn estimate(&self, which: FreeParam) -> Option<Estimate> {
        self.estimates
            .iter()
            .find(|(f, _)| *f == which)
            .map(|(_, e)| *e)
    }
}

/// Levenberg–Marquardt fit of one rate model to `(x, measured)` data.
///
/// Requires at least two more points than free parameters. Unconverged fits
/// return [`FitError::NotConverged`] wrapped in [`LineshapeError::Fit`].
pub fn fit_rate_models(
    data: &[(f64, f64)],
    setup: &RateFitSetup,
) -> Result<RateFitResult, LineshapeError> {
    setup.noise.validate()?;
    let free = setup.effective_free();
    if data.len() < free.len() + 2 {
        return Err(FitError::TooFewPoints {
            needed: free.len() + 2,
            got: data.len(),
        }
        .into());
    }
    if data.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(FitError::InvalidInput("data contain non-finite values".into()).into());
    }
    let quad = default_quadrature();
    let mut state = RateModelState {
        operating: setup.operating,
        scale: setup.scale,
        delta_offset: setup.delta_offset,
    };
    if setup.heuristic_initial {
        heuristic_initial(&mut state, data, setup, &free, quad)?;
    }

    let initial: Vec<f64> = free.iter().map(|f| state.get(*f, setup.target)).collect();
    let base = state;
    let residuals = |theta: &[f64]| -> Option<Vec<f64>> {
        let mut s = base;
        for (f, v) in free.iter().zip(theta) {
            s.set(*f, setup.target, *v);
        }
        data.iter()
            .map(|(x, y)| {
                s.evaluate(setup.axis, setup.target, *x, &setup.noise, quad)
                    .ok()
                    .map(|m| m - y)
            })
            .collect()
    };
    let report = lm::minimize(residuals, &initial, &LmOptions::default())?;

    let mut fitted = base;
    for (f, v) in free.iter().zip(&report.params) {
        fitted.set(*f, setup.target, *v);
    }
    // Only |c| and |amp| enter the model.
    for f in &free {
        if matches!(
            f,
            FreeParam::Amplitude | FreeParam::RabiCal780 | FreeParam::RabiCal776
        ) {
            let v = fitted.get(*f, setup.target).abs();
            fitted.set(*f, setup.target, v);
        }
    }
    let estimates = free
        .iter()
        .zip(report.params.iter().zip(&report.sigmas))
        .map(|(f, (_, s))| (*f, Estimate::new(fitted.get(*f, setup.target), *s)))
        .collect();
    Ok(RateFitResult {
        state: fitted,
        estimates,
        residuals: report.residuals,
        rss: report.rss,
        iterations: report.iterations,
        converged: report.converged,
    })
}

fn heuristic_initial(
    state: &mut RateModelState,
    data: &[(f64, f64)],
    setup: &RateFitSetup,
    free: &[FreeParam],
    quad: &Quadrature,
) -> Result<(), LineshapeError> {
    let argmax = |v: &[(f64, f64)]| {
        v.iter()
            .cloned()
            .fold((f64::NAN, f64::NEG_INFINITY), |acc, (x, y)| {
                if y > acc.1 {
                    (x, y)
                } else {
                    acc
                }
            })
    };
    if setup.axis == SweepAxis::Delta
        && free.contains(&FreeParam::DeltaOffset)
        && setup.target != RateTarget::Eta
    {
        let mut probe = *state;
        probe.delta_offset = 0.0;
        let model: Vec<(f64, f64)> = data
            .iter()
            .map(|(x, _)| {
                Ok((
                    *x,
                    probe.evaluate(setup.axis, setup.target, *x, &setup.noise, quad)?,
                ))
            })
            .collect::<Result<_, LineshapeError>>()?;
        state.delta_offset = argmax(data).0 - argmax(&model).0;
    }
    if free.contains(&FreeParam::Amplitude) {
        let mut unit = *state;
        unit.set(FreeParam::Amplitude, setup.target, 1.0);
        if setup.target == RateTarget::Eta {
            unit.scale.amp_single = 1.0;
        }
        let model_max = data
            .iter()
            .map(|(x, _)| unit.evaluate(setup.axis, setup.target, *x, &setup.noise, quad))
            .collect::<Result<Vec<f64>, _>>()?
            .into_iter()
            .fold(0.0, f64::max);
        let data_max = argmax(data).1;
        if model_max > 0.0 && data_max > 0.0 {
            let amp = data_max / model_max;
            if setup.target == RateTarget::Eta {
                state.scale.amp_single = 1.0;
            }
            state.set(FreeParam::Amplitude, setup.target, amp);
        }
    }
    Ok(())
}
