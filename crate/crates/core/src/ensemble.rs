//! Atom-number dependence of the source: optical depth from transmission
//! scans, the atom-number estimate and the τ(OD), η(OD) scaling laws.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::{self, CovarianceScaling, FitError, LmOptions};
use crate::measure::Estimate;

/// Half linewidth of the probed transition, MHz.
pub const DEFAULT_GAMMA_MHZ: f64 = 6.067;
/// Natural lifetime entering the τ(OD) law, ns.
pub const DEFAULT_TAU0_NS: f64 = 27.0;
/// Probe beam waist, µm.
pub const DEFAULT_BEAM_WAIST_UM: f64 = 450.0;
/// Atoms per (OD·µm²), anchored to N = 1.5e7 at OD = 7 for a 450 µm waist.
pub const DEFAULT_KAPPA: f64 = 1.5e7 / (7.0 * 450.0 * 450.0);

const T_FLOOR: f64 = 1e-12;
const T_CEILING: f64 = 1.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Fit(#[from] FitError),
}

/// One measured point `(x, y)` with an optional 1σ on `y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub x: f64,
    pub y: f64,
    pub sigma: Option<f64>,
}

impl DataPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y, sigma: None }
    }

    pub fn with_sigma(x: f64, y: f64, sigma: f64) -> Self {
        Self {
            x,
            y,
            sigma: Some(sigma),
        }
    }
}

/// Probe transmission versus detuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionScan {
    /// `(detuning in MHz, normalized transmission)`.
    pub points: Vec<(f64, f64)>,
    pub gamma: f64,
}

impl TransmissionScan {
    pub fn new(points: Vec<(f64, f64)>) -> Self {
        Self {
            points,
            gamma: DEFAULT_GAMMA_MHZ,
        }
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        if self.points.len() < 5 {
            return Err(EnsembleError::InvalidInput(format!(
                "transmission scan needs at least 5 points, got {}",
                self.points.len()
            )));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(EnsembleError::InvalidInput("gamma must be > 0".into()));
        }
        let mut d: Vec<f64> = self.points.iter().map(|p| p.0).collect();
        if d.iter()
            .chain(self.points.iter().map(|p| &p.1))
            .any(|v| !v.is_finite())
        {
            return Err(EnsembleError::InvalidInput(
                "scan contains non-finite values".into(),
            ));
        }
        d.sort_by(f64::total_cmp);
        if d.windows(2).any(|w| w[0] == w[1]) {
            return Err(EnsembleError::InvalidInput(
                "detunings must be distinct".into(),
            ));
        }
        Ok(())
    }
}

/// `exp(−OD·γ²/(Δ² + γ²))`.
pub fn transmission(od: f64, detuning: f64, gamma: f64) -> f64 {
    (-od * gamma * gamma / (detuning * detuning + gamma * gamma)).exp()
}

/// OD from a single on-resonance transmission, `−ln T(0)`.
pub fn od_on_resonance(t0: f64) -> f64 {
    -t0.clamp(T_FLOOR, T_CEILING).ln()
}

/// Least-squares fit of the transmission profile with OD the only free
/// parameter. The uncertainty is scaled by the residual scatter.
pub fn fit_od(scan: &TransmissionScan) -> Result<Estimate, EnsembleError> {
    scan.validate()?;
    // Sorted so the result does not depend on the input order.
    let mut pts: Vec<(f64, f64)> = scan
        .points
        .iter()
        .map(|&(d, t)| (d, t.clamp(T_FLOOR, T_CEILING)))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let gamma = scan.gamma;

    // Initial guess from the point nearest resonance.
    let near = pts
        .iter()
        .min_by(|a, b| a.0.abs().total_cmp(&b.0.abs()))
        .expect("validated scan is non-empty");
    let lorentz = gamma * gamma / (near.0 * near.0 + gamma * gamma);
    let initial = (-near.1.ln() / lorentz).max(1e-3);

    let residuals = |p: &[f64]| {
        Some(
            pts.iter()
                .map(|&(d, t)| transmission(p[0], d, gamma) - t)
                .collect(),
        )
    };
    let report = lm::minimize(residuals, &[initial], &LmOptions::default())?;
    Ok(Estimate::new(report.params[0], report.sigmas[0]))
}

/// `N = κ·OD·w²`, with the waist in µm. A calibrated estimate, not a
/// first-principles column density.
pub fn atom_number(od: f64, beam_waist_um: f64, kappa: f64) -> Result<f64, EnsembleError> {
    if !(od >= 0.0 && beam_waist_um > 0.0 && kappa > 0.0) {
        return Err(EnsembleError::InvalidInput(
            "atom number needs od >= 0 and positive waist and kappa".into(),
        ));
    }
    Ok(kappa * od * beam_waist_um * beam_waist_um)
}

/// Which scaling law a [`ScalingFit`] belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalingLaw {
    TauVsOd,
    EtaVsOd,
    LinearRate,
}

impl ScalingLaw {
    pub fn name(self) -> &'static str {
        match self {
            ScalingLaw::TauVsOd => "tau_vs_od",
            ScalingLaw::EtaVsOd => "eta_vs_od",
            ScalingLaw::LinearRate => "linear_rate",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tau_vs_od" | "tau" => Some(ScalingLaw::TauVsOd),
            "eta_vs_od" | "eta" => Some(ScalingLaw::EtaVsOd),
            "linear_rate" | "linear" => Some(ScalingLaw::LinearRate),
            _ => None,
        }
    }
}

/// Fitted parameters of a scaling law, named as in the law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub law: ScalingLaw,
    pub parameters: Vec<(String, Estimate)>,
    /// Fixed constants of the law, e.g. `tau0_ns`.
    pub fixed: Vec<(String, f64)>,
    pub residuals: Vec<f64>,
    pub converged: bool,
}

impl ScalingFit {
    pub fn parameter(&self, name: &str) -> Option<Estimate> {
        self.parameters
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| *e)
    }
}

/// `τ0 / (1 + μ·OD)`.
pub fn tau_vs_od(od: f64, tau0: f64, mu: f64) -> f64 {
    tau0 / (1.0 + mu * od)
}

/// `η0·(1 − exp(−OD/OD0))`.
pub fn eta_vs_od(od: f64, eta0: f64, od0: f64) -> f64 {
    eta0 * -(-od / od0).exp_m1()
}

fn check_points(data: &[DataPoint], needed: usize) -> Result<bool, EnsembleError> {
    if data.len() < needed {
        return Err(FitError::TooFewPoints {
            needed,
            got: data.len(),
        }
        .into());
    }
    let mut weighted = None;
    for p in data {
        if !(p.x.is_finite() && p.y.is_finite()) {
            return Err(EnsembleError::InvalidInput("non-finite data point".into()));
        }
        if let Some(s) = p.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(EnsembleError::InvalidInput("sigma must be > 0".into()));
            }
        }
        match weighted {
            None => weighted = Some(p.sigma.is_some()),
            Some(w) if w != p.sigma.is_some() => {
                return Err(EnsembleError::InvalidInput(
                    "either all points carry sigma or none do".into(),
                ))
            }
            _ => {}
        }
    }
    Ok(weighted.unwrap_or(false))
}

fn fit_law<M>(
    data: &[DataPoint],
    initial: &[f64],
    model: M,
) -> Result<(lm::LmReport, bool), EnsembleError>
where
    M: Fn(&[f64], f64) -> Option<f64>,
{
    let weighted = check_points(data, initial.len() + 1)?;
    let residuals = |p: &[f64]| {
        data.iter()
            .map(|d| model(p, d.x).map(|m| (m - d.y) / d.sigma.unwrap_or(1.0)))
            .collect::<Option<Vec<f64>>>()
    };
    let opts = LmOptions {
        covariance: if weighted {
            CovarianceScaling::Absolute
        } else {
            CovarianceScaling::ReducedChiSquare
        },
        ..LmOptions::default()
    };
    match lm::minimize(residuals, initial, &opts) {
        Ok(r) => Ok((r, true)),
        Err(e) => Err(e.into()),
    }
}

/// Fits μ with τ0 fixed. `x` is OD, `y` is τ in ns.
pub fn fit_tau_vs_od(data: &[DataPoint], tau0: f64) -> Result<ScalingFit, EnsembleError> {
    if !(tau0 > 0.0) {
        return Err(EnsembleError::InvalidInput("tau0 must be > 0".into()));
    }
    // μ from each point's inversion, averaged.
    let guesses: Vec<f64> = data
        .iter()
        .filter(|d| d.x > 0.0 && d.y > 0.0)
        .map(|d| (tau0 / d.y - 1.0) / d.x)
        .filter(|m| *m > 0.0)
        .collect();
    let mu0 = if guesses.is_empty() {
        0.1
    } else {
        guesses.iter().sum::<f64>() / guesses.len() as f64
    };
    let (r, converged) = fit_law(data, &[mu0], |p, od| {
        (p[0] > 0.0).then(|| tau_vs_od(od, tau0, p[0]))
    })?;
    Ok(ScalingFit {
        law: ScalingLaw::TauVsOd,
        parameters: vec![("mu".into(), Estimate::new(r.params[0], r.sigmas[0]))],
        fixed: vec![("tau0_ns".into(), tau0)],
        residuals: r.residuals,
        converged,
    })
}

/// Fits `(η0, OD0)`. `x` is OD, `y` is η.
pub fn fit_eta_vs_od(data: &[DataPoint]) -> Result<ScalingFit, EnsembleError> {
    let eta_max = data.iter().map(|d| d.y).fold(0.0, f64::max);
    let od_max = data.iter().map(|d| d.x).fold(0.0, f64::max);
    let eta0 = (1.1 * eta_max).max(1e-3);
    // OD where the data reach about 63% of the guessed ceiling.
    let od0 = data
        .iter()
        .filter(|d| d.y >= 0.63 * eta0)
        .map(|d| d.x)
        .fold(f64::INFINITY, f64::min);
    let od0 = if od0.is_finite() && od0 > 0.0 {
        od0
    } else {
        (od_max / 2.0).max(1.0)
    };
    let (r, converged) = fit_law(data, &[eta0, od0], |p, od| {
        (p[0] > 0.0 && p[1] > 0.0).then(|| eta_vs_od(od, p[0], p[1]))
    })?;
    Ok(ScalingFit {
        law: ScalingLaw::EtaVsOd,
        parameters: vec![
            ("eta0".into(), Estimate::new(r.params[0], r.sigmas[0])),
            ("od0".into(), Estimate::new(r.params[1], r.sigmas[1])),
        ],
        fixed: vec![],
        residuals: r.residuals,
        converged,
    })
}

/// Slope of `r = a·OD` through the origin, closed form.
///
/// With a single point the slope is exact and its uncertainty is undefined
/// unless the point carries a σ.
pub fn linear_rate_fit(data: &[DataPoint]) -> Result<ScalingFit, EnsembleError> {
    let weighted = check_points(data, 1)?;
    let w = |d: &DataPoint| d.sigma.map(|s| 1.0 / (s * s)).unwrap_or(1.0);
    let sxx: f64 = data.iter().map(|d| w(d) * d.x * d.x).sum();
    if !(sxx > 0.0) {
        return Err(EnsembleError::InvalidInput("all abscissae are zero".into()));
    }
    let sxy: f64 = data.iter().map(|d| w(d) * d.x * d.y).sum();
    let a = sxy / sxx;
    let residuals: Vec<f64> = data.iter().map(|d| (a * d.x - d.y) * w(d).sqrt()).collect();
    let sigma = if weighted {
        (1.0 / sxx).sqrt()
    } else if data.len() >= 2 {
        let rss: f64 = residuals.iter().map(|r| r * r).sum();
        (rss / (data.len() - 1) as f64 / sxx).sqrt()
    } else {
        f64::NAN
    };
    Ok(ScalingFit {
        law: ScalingLaw::LinearRate,
        parameters: vec![("a".into(), Estimate::new(a, sigma))],
        fixed: vec![],
        residuals,
        converged: true,
    })
}

/// Dispatches on `law`; `tau0` is used only by the τ(OD) law.
pub fn fit_scaling(
    law: ScalingLaw,
    data: &[DataPoint],
    tau0: f64,
) -> Result<ScalingFit, EnsembleError> {
    match law {
        ScalingLaw::TauVsOd => fit_tau_vs_od(data, tau0),
        ScalingLaw::EtaVsOd => fit_eta_vs_od(data),
        ScalingLaw::LinearRate => linear_rate_fit(data),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn scan(od: f64) -> TransmissionScan {
        TransmissionScan::new(
            (-20..=20)
                .map(|k| {
                    let d = k as f64 * 1.5;
                    (d, transmission(od, d, DEFAULT_GAMMA_MHZ))
                })
                .collect(),
        )
    }

    #[test]
    fn noiseless_scans_recover_od() {
        for od in [7.0, 29.0] {
            let e = fit_od(&scan(od)).unwrap();
            assert!((e.value / od - 1.0).abs() < 1e-6, "{od}: {e:?}");
        }
    }

    #[test]
    fn on_resonance_closed_form() {
        let od = 7.0;
        assert!((od_on_resonance(transmission(od, 0.0, 6.067)) - od).abs() < 1e-12);
        assert_eq!(od_on_resonance(1.0), 0.0);
    }

    #[test]
    fn scan_validation() {
        let mut s = scan(7.0);
        s.points.truncate(4);
        assert!(fit_od(&s).is_err());
        let mut s = scan(7.0);
        s.points[1].0 = s.points[0].0;
        assert!(fit_od(&s).is_err());
    }

    #[test]
    fn noisy_scan_within_three_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = scan(29.0);
        for p in s.points.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            p.1 += 0.01 * n;
        }
        let e = fit_od(&s).unwrap();
        assert!(e.pull(29.0).abs() < 3.0, "{e:?}");
    }

    #[test]
    fn atom_number_calibration() {
        let n7 = atom_number(7.0, DEFAULT_BEAM_WAIST_UM, DEFAULT_KAPPA).unwrap();
        assert!((n7 / 1.5e7 - 1.0).abs() < 1e-12);
        assert_eq!(atom_number(0.0, 450.0, DEFAULT_KAPPA).unwrap(), 0.0);
        let n29 = atom_number(29.0, DEFAULT_BEAM_WAIST_UM, DEFAULT_KAPPA).unwrap();
        assert!((n29 / 6.3e7 - 1.0).abs() < 0.03);
        assert!(atom_number(-1.0, 450.0, DEFAULT_KAPPA).is_err());
    }

    #[test]
    fn tau_law_values() {
        assert_eq!(tau_vs_od(0.0, 27.0, 0.0827), 27.0);
        assert!((tau_vs_od(29.0, 27.0, 0.0827) - 7.9).abs() < 0.05);
    }

    #[test]
    fn tau_fit_exact() {
        let data: Vec<DataPoint> = (1..=8)
            .map(|k| {
                let od = 4.0 * k as f64;
                DataPoint::new(od, tau_vs_od(od, 27.0, 0.0827))
            })
            .collect();
        let f = fit_tau_vs_od(&data, 27.0).unwrap();
        assert!((f.parameter("mu").unwrap().value / 0.0827 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn eta_law_values() {
        assert_eq!(eta_vs_od(0.0, 0.19, 9.7), 0.0);
        assert!((eta_vs_od(1e6, 0.19, 9.7) - 0.19).abs() < 1e-15);
        assert!((eta_vs_od(29.0, 0.190, 9.7) - 0.181).abs() < 1e-3);
    }

    #[test]
    fn eta_fit_exact_and_noisy() {
        let ods: Vec<f64> = (0..12).map(|k| 5.0 + 2.5 * k as f64).collect();
        let exact: Vec<DataPoint> = ods
            .iter()
            .map(|&o| DataPoint::new(o, eta_vs_od(o, 0.150, 11.3)))
            .collect();
        let f = fit_eta_vs_od(&exact).unwrap();
        assert!((f.parameter("eta0").unwrap().value / 0.150 - 1.0).abs() < 1e-6);
        assert!((f.parameter("od0").unwrap().value / 11.3 - 1.0).abs() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noisy: Vec<DataPoint> = ods
            .iter()
            .map(|&o| {
                let y = eta_vs_od(o, 0.150, 11.3);
                let n: f64 = rng.sample(StandardNormal);
                DataPoint::with_sigma(o, y * (1.0 + 0.02 * n), 0.02 * y)
            })
            .collect();
        let f = fit_eta_vs_od(&noisy).unwrap();
        assert!(
            f.parameter("eta0").unwrap().pull(0.150).abs() < 3.0,
            "{f:?}"
        );
        assert!(f.parameter("od0").unwrap().pull(11.3).abs() < 3.0, "{f:?}");
    }

    #[test]
    fn linear_fit_cases() {
        let one = linear_rate_fit(&[DataPoint::new(10.0, 1000.0)]).unwrap();
        assert_eq!(one.parameter("a").unwrap().value, 100.0);
        let line: Vec<DataPoint> = (1..6)
            .map(|k| DataPoint::new(k as f64, 350.0 * k as f64))
            .collect();
        let f = linear_rate_fit(&line).unwrap();
        assert!((f.parameter("a").unwrap().value - 350.0).abs() < 1e-10);
        assert!(f.parameter("a").unwrap().sigma < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noisy: Vec<DataPoint> = (1..=12)
            .map(|k| {
                let od = 2.5 * k as f64;
                let r = 350.0 * od;
                let n: f64 = rng.sample(StandardNormal);
                DataPoint::with_sigma(od, r * (1.0 + 0.05 * n), 0.05 * r)
            })
            .collect();
        let f = linear_rate_fit(&noisy).unwrap();
        assert!(f.parameter("a").unwrap().pull(350.0).abs() < 3.0);
    }

    #[test]
    fn mixed_sigma_rejected() {
        let data = [
            DataPoint::new(1.0, 1.0),
            DataPoint::with_sigma(2.0, 2.0, 0.1),
        ];
        assert!(linear_rate_fit(&data).is_err());
    }
}
