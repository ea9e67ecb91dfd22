//! The subcommands. Each takes its configuration and an output directory and
//! returns a short summary for the terminal.

use std::path::{Path, PathBuf};

use fwm_core::correlation::{
    analyze as run_analysis, AnalysisConfig, Binning, CoincidenceWindow, CorrelationError,
    G2FitWindows,
};
use fwm_core::ensemble::{
    atom_number, fit_od, fit_scaling, tau_vs_od, EnsembleError, ScalingLaw, TransmissionScan,
    DEFAULT_BEAM_WAIST_UM, DEFAULT_GAMMA_MHZ, DEFAULT_KAPPA, DEFAULT_TAU0_NS,
};
use fwm_core::lineshape::{
    model_rates, LineshapeError, ModelRates, OperatingPoint, PumpNoiseModel, Quadrature,
    RateModelScale, SweepAxis, DEFAULT_QUADRATURE_ORDER, DEFAULT_QUADRATURE_PANELS,
};
use fwm_core::model::ModelError;
use fwm_core::simulator::{generate, SimConfig};
use fwm_core::timetag::{
    read_gating, read_tag_file, write_gating, write_tag_file, FormatError, GatingError, GatingPlan,
};
use fwm_core::Estimate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::formats::{self, FitCurveRow, MetricsReport, OptimizeRow, METRICS_SCHEMA_VERSION};

fn lineshape_err(e: LineshapeError) -> CliError {
    match e {
        LineshapeError::Model(ModelError::InvalidParameter { .. })
        | LineshapeError::InvalidNoise(_)
        | LineshapeError::InvalidScale(_) => CliError::Config(e.to_string()),
        _ => CliError::Numerical(e.to_string()),
    }
}

fn correlation_err(e: CorrelationError) -> CliError {
    match e {
        CorrelationError::Binning(_)
        | CorrelationError::OutOfRange { .. }
        | CorrelationError::InvalidInput(_) => CliError::Config(e.to_string()),
        CorrelationError::EmptyGating
        | CorrelationError::Gating(_)
        | CorrelationError::Unsorted { .. } => CliError::Io(e.to_string()),
        _ => CliError::Numerical(e.to_string()),
    }
}

fn ensemble_err(e: EnsembleError) -> CliError {
    match e {
        EnsembleError::InvalidInput(m) => CliError::Io(format!("invalid data: {m}")),
        EnsembleError::Fit(f) => CliError::Numerical(f.to_string()),
    }
}

fn format_err(path: &Path, e: FormatError) -> CliError {
    match e {
        FormatError::Gating(GatingError::Empty) => {
            CliError::Io(format!("{}: empty gating, no active time", path.display()))
        }
        e => CliError::io(path.display(), e),
    }
}

fn required_path(cfg: &mut RunConfig, key: &str) -> Result<PathBuf> {
    cfg.take_str(key)
        .map(PathBuf::from)
        .ok_or_else(|| CliError::Config(format!("missing required key `{key}`")))
}

/// Lineshape model settings shared by `model-sweep` and `optimize`.
#[derive(Debug, Clone)]
pub struct ModelSetup {
    pub operating: OperatingPoint,
    pub scale: RateModelScale,
    pub noise: PumpNoiseModel,
    pub quadrature: Quadrature,
}

impl ModelSetup {
    pub fn from_config(cfg: &mut RunConfig) -> Result<Self> {
        let d = OperatingPoint::default();
        let operating = OperatingPoint {
            p780_mw: cfg.take_or("p780_mw", d.p780_mw)?,
            p776_mw: cfg.take_or("p776_mw", d.p776_mw)?,
            big_delta: cfg.take_or("big_delta", d.big_delta)?,
            small_delta: cfg.take_or("small_delta", d.small_delta)?,
            gamma1: cfg.take_or("gamma1", d.gamma1)?,
            gamma2: cfg.take_or("gamma2", d.gamma2)?,
        };
        let s = RateModelScale::default();
        let scale = RateModelScale {
            amp_single: cfg.take_or("amp_single", s.amp_single)?,
            amp_pairs: cfg.take_or("amp_pairs", s.amp_pairs)?,
            power_to_rabi_1: cfg.take_or("power_to_rabi_1", s.power_to_rabi_1)?,
            power_to_rabi_2: cfg.take_or("power_to_rabi_2", s.power_to_rabi_2)?,
        };
        scale.validate().map_err(lineshape_err)?;
        let n = PumpNoiseModel::default();
        let noise = PumpNoiseModel::new(
            cfg.take_or("fwhm", n.fwhm)?,
            cfg.take_or("truncation", n.truncation)?,
        )
        .map_err(lineshape_err)?;
        let order: usize = cfg.take_or("quadrature_order", DEFAULT_QUADRATURE_ORDER)?;
        let panels: usize = cfg.take_or("quadrature_panels", DEFAULT_QUADRATURE_PANELS)?;
        if order == 0 || panels == 0 {
            return Err(CliError::Config(
                "quadrature_order and quadrature_panels must be >= 1".into(),
            ));
        }
        operating.to_params(&scale).map_err(lineshape_err)?;
        Ok(Self {
            operating,
            scale,
            noise,
            quadrature: Quadrature::new(order, panels),
        })
    }

    pub fn rates(&self, op: &OperatingPoint) -> Result<ModelRates> {
        let p = op.to_params(&self.scale).map_err(lineshape_err)?;
        model_rates(&p, &self.noise, &self.scale, &self.quadrature).map_err(lineshape_err)
    }
}

fn parse_axis(s: &str) -> Result<SweepAxis> {
    match s {
        "delta" | "small_delta" => Ok(SweepAxis::Delta),
        "p776" | "p776_mw" => Ok(SweepAxis::P776),
        "p780" | "p780_mw" => Ok(SweepAxis::P780),
        _ => Err(CliError::Config(format!(
            "key `axis`: unknown axis `{s}` (delta, p776, p780)"
        ))),
    }
}

/// Model rates over a grid of one knob; writes `sweep.csv`.
pub fn model_sweep(mut cfg: RunConfig, out: &Path) -> Result<String> {
    let setup = ModelSetup::from_config(&mut cfg)?;
    let axis = parse_axis(&cfg.take_str("axis").unwrap_or_else(|| "delta".into()))?;
    let grid = cfg
        .take_grid("grid")?
        .ok_or_else(|| CliError::Config("missing required key `grid`".into()))?;
    cfg.finish()?;

    let rows: Vec<(f64, ModelRates)> = grid
        .par_iter()
        .map(|&x| {
            setup
                .rates(&axis.apply(&setup.operating, x))
                .map(|r| (x, r))
        })
        .collect::<Result<_>>()?;
    let path = out.join("sweep.csv");
    formats::write_sweep(&path, axis.name(), &rows)?;
    Ok(format!("{} rows -> {}", rows.len(), path.display()))
}

/// Reads the analysis settings; all times in ns.
pub fn analysis_config(cfg: &mut RunConfig) -> Result<AnalysisConfig> {
    let d = AnalysisConfig::default();
    let ns = 1e-9;
    let binning = Binning {
        bin_width: cfg.take_or("bin_width_ns", d.binning.bin_width / ns)? * ns,
        lo: cfg.take_or("hist_lo_ns", d.binning.lo / ns)? * ns,
        hi: cfg.take_or("hist_hi_ns", d.binning.hi / ns)? * ns,
    };
    let fit_windows = G2FitWindows {
        tail: (
            cfg.take_or("tail_lo_ns", d.fit_windows.tail.0 / ns)? * ns,
            cfg.take_or("tail_hi_ns", d.fit_windows.tail.1 / ns)? * ns,
        ),
        fit_lo: cfg.take::<f64>("fit_lo_ns")?.map(|v| v * ns),
        fit_hi: cfg.take::<f64>("fit_hi_ns")?.map(|v| v * ns),
    };
    let coincidence = CoincidenceWindow {
        lo: cfg.take_or("window_lo_ns", d.coincidence.lo / ns)? * ns,
        hi: cfg.take_or("window_hi_ns", d.coincidence.hi / ns)? * ns,
    };
    Ok(AnalysisConfig {
        binning,
        fit_windows,
        coincidence,
        dark_s: cfg.take_or("dark_s", d.dark_s)?,
        dark_i: cfg.take_or("dark_i", d.dark_i)?,
    })
}

/// Full analysis chain; writes `metrics.json`, `histogram.csv` and `fit_curve.csv`.
pub fn analyze(mut cfg: RunConfig, out: &Path) -> Result<String> {
    let tags = required_path(&mut cfg, "tags")?;
    let gating_path = cfg.take_str("gating").map(PathBuf::from);
    let ac = analysis_config(&mut cfg)?;
    cfg.finish()?;

    let stream = read_tag_file(&tags).map_err(|e| format_err(&tags, e))?;
    let gating = match &gating_path {
        Some(p) => {
            let f = std::fs::File::open(p).map_err(|e| CliError::io(p.display(), e))?;
            read_gating(f).map_err(|e| format_err(p, e))?
        }
        None => GatingPlan::always_active(&stream).map_err(|_| {
            CliError::Io(format!(
                "{}: empty gating, stream has no events",
                tags.display()
            ))
        })?,
    };
    let a = run_analysis(&stream, &gating, &ac).map_err(correlation_err)?;

    let report = MetricsReport {
        schema_version: METRICS_SCHEMA_VERSION,
        metrics: a.metrics,
        fit: a.fit,
        pair_rate: a.pair_rate,
        histogram: (&a.histogram).into(),
        config: ac,
    };
    formats::write_json(&out.join("metrics.json"), &report)?;
    formats::write_rows(
        &out.join("histogram.csv"),
        &formats::histogram_rows(&a.histogram),
    )?;
    let curve: Vec<FitCurveRow> = (0..a.histogram.counts.len())
        .map(|k| {
            let dt_ns = a.histogram.bin_center(k) * 1e9;
            FitCurveRow {
                dt_ns,
                model: a.fit.model(dt_ns),
            }
        })
        .collect();
    formats::write_rows(&out.join("fit_curve.csv"), &curve)?;
    let m = &a.metrics;
    Ok(format!(
        "tau = {:.3} ± {:.3} ns, r_p = {:.2} ± {:.2} /s, eta_s = {:.4}, eta_i = {:.4}, CAR = {:.1}",
        m.tau_ns.value,
        m.tau_ns.sigma,
        m.r_p.value,
        m.r_p.sigma,
        m.eta_s.value,
        m.eta_i.value,
        m.car.value
    ))
}

/// Contents of `truth.json` written by `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRecord {
    pub config: SimConfig,
    pub config_sha256: String,
    pub ground_truth: fwm_core::simulator::GroundTruth,
    pub tag_file: String,
    pub gating_file: String,
}

pub fn sim_config(cfg: &mut RunConfig) -> Result<SimConfig> {
    let d = SimConfig::default();
    let mut s = SimConfig {
        pair_generation_rate: cfg.take_or("pair_generation_rate", d.pair_generation_rate)?,
        tau_ns: cfg.take_or("tau_ns", d.tau_ns)?,
        det_eff_s: cfg.take_or("det_eff_s", d.det_eff_s)?,
        det_eff_i: cfg.take_or("det_eff_i", d.det_eff_i)?,
        dark_s: cfg.take_or("dark_s", d.dark_s)?,
        dark_i: cfg.take_or("dark_i", d.dark_i)?,
        jitter_ps: cfg.take_or("jitter_ps", d.jitter_ps)?,
        active_ms: cfg.take_or("active_ms", d.active_ms)?,
        period_ms: cfg.take_or("period_ms", d.period_ms)?,
        duration: d.duration,
        seed: cfg.take_or("seed", d.seed)?,
    };
    match (
        cfg.take::<f64>("duration")?,
        cfg.take::<f64>("active_time")?,
    ) {
        (Some(_), Some(_)) => {
            return Err(CliError::Config(
                "give either `duration` or `active_time`, not both".into(),
            ))
        }
        (Some(w), None) => s.duration = w,
        (None, Some(a)) => s.duration = s.duration_for_active_time(a),
        (None, None) => {}
    }
    s.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(s)
}

pub fn config_hash(cfg: &SimConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("plain struct serializes");
    Sha256::digest(&json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Synthetic run; writes the tag file, `gating.txt` and `truth.json`.
pub fn simulate(mut cfg: RunConfig, out: &Path) -> Result<String> {
    let sc = sim_config(&mut cfg)?;
    let format = cfg.take_str("format").unwrap_or_else(|| "bin".into());
    let tag_name = match format.as_str() {
        "bin" => "tags.bin",
        "csv" => "tags.csv",
        other => {
            return Err(CliError::Config(format!(
                "key `format`: unknown `{other}` (bin, csv)"
            )))
        }
    };
    cfg.finish()?;

    let sim = generate(&sc).map_err(|e| CliError::Config(e.to_string()))?;
    let tags = out.join(tag_name);
    write_tag_file(&tags, &sim.stream).map_err(|e| CliError::io(tags.display(), e))?;
    let gating = out.join("gating.txt");
    let f = std::fs::File::create(&gating).map_err(|e| CliError::io(gating.display(), e))?;
    write_gating(f, &sim.gating).map_err(|e| CliError::io(gating.display(), e))?;
    let record = SimulationRecord {
        config: sc,
        config_sha256: config_hash(&sc),
        ground_truth: sim.truth.clone(),
        tag_file: tag_name.into(),
        gating_file: "gating.txt".into(),
    };
    formats::write_json(&out.join("truth.json"), &record)?;
    Ok(format!(
        "{} events ({} pairs generated, {} detected) -> {}",
        sim.stream.len(),
        sim.truth.generated_pairs,
        sim.truth.detected_pairs,
        tags.display()
    ))
}

/// Contents of `od_fit.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdFitReport {
    pub od: Estimate,
    pub gamma_mhz: f64,
    pub n_points: usize,
    pub atom_number: f64,
    pub beam_waist_um: f64,
    pub kappa: f64,
}

/// Optical depth from a transmission scan `detuning_mhz,transmission`.
pub fn od_fit(mut cfg: RunConfig, out: &Path) -> Result<String> {
    let scan_path = required_path(&mut cfg, "scan")?;
    let gamma = cfg.take_or("gamma", DEFAULT_GAMMA_MHZ)?;
    let waist = cfg.take_or("beam_waist_um", DEFAULT_BEAM_WAIST_UM)?;
    let kappa = cfg.take_or("kappa", DEFAULT_KAPPA)?;
    cfg.finish()?;

    let points = formats::read_xy(&scan_path)?;
    let scan = TransmissionScan {
        points: points.iter().map(|p| (p.x, p.y)).collect(),
        gamma,
    };
    let od = fit_od(&scan).map_err(ensemble_err)?;
    let n = atom_number(od.value.max(0.0), waist, kappa)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let report = OdFitReport {
        od,
        gamma_mhz: gamma,
        n_points: points.len(),
        atom_number: n,
        beam_waist_um: waist,
        kappa,
    };
    formats::write_json(&out.join("od_fit.json"), &report)?;
    Ok(format!(
        "OD = {:.4} ± {:.4}, N ≈ {:.3e}",
        od.value, od.sigma, n
    ))
}

/// Fits one scaling law to `x,y[,sigma]` data; writes `scaling_fit.json`.
pub fn scaling_fit(mut cfg: RunConfig, out: &Path) -> Result<String> {
    let data_path = required_path(&mut cfg, "data")?;
    let law_name = cfg
        .take_str("law")
        .ok_or_else(|| CliError::Config("missing required key `law`".into()))?;
    let law = ScalingLaw::parse(&law_name).ok_or_else(|| {
        CliError::Config(format!(
            "key `law`: unknown law `{law_name}` (tau_vs_od, eta_vs_od, linear_rate)"
        ))
    })?;
    let tau0 = cfg.take_or("tau0_ns", DEFAULT_TAU0_NS)?;
    cfg.finish()?;

    let data = formats::read_xy(&data_path)?;
    let fit = fit_scaling(law, &data, tau0).map_err(ensemble_err)?;
    formats::write_json(&out.join("scaling_fit.json"), &fit)?;
    let params: Vec<String> = fit
        .parameters
        .iter()
        .map(|(n, e)| format!("{n} = {} ± {}", e.value, e.sigma))
        .collect();
    Ok(format!("{}: {}", law.name(), params.join(", ")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Brightness,
    Eta,
    PairRate,
}

impl Objective {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "brightness" => Ok(Objective::Brightness),
            "eta" => Ok(Objective::Eta),
            "pair_rate" => Ok(Objective::PairRate),
            _ => Err(CliError::Config(format!(
                "key `objective`: unknown `{s}` (brightness, eta, pair_rate)"
            ))),
        }
    }
}

/// How rates and τ change with optical depth. Model amplitudes are taken to
/// be calibrated at `od_ref`; singles grow linearly in OD, the heralding
/// efficiency saturates as `1 − exp(−OD/od0)` and τ follows `τ0/(1 + μ·OD)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdScaling {
    pub od_ref: f64,
    pub od0: f64,
    pub tau0_ns: f64,
    pub mu: f64,
}

impl OdScaling {
    fn apply(&self, r: ModelRates, od: f64) -> (ModelRates, f64) {
        let singles = od / self.od_ref;
        let eta = (-od / self.od0).exp_m1() / (-self.od_ref / self.od0).exp_m1();
        (
            ModelRates {
                single: r.single * singles,
                pairs: r.pairs * singles * eta,
                eta: r.eta * eta,
            },
            tau_vs_od(od, self.tau0_ns, self.mu),
        )
    }
}

/// Exhaustive grid search; writes `ranking.csv` sorted by the objective.
pub fn optimize(mut cfg: RunConfig, out: &Path) -> Result<String> {
    let setup = ModelSetup::from_config(&mut cfg)?;
    let objective = Objective::parse(
        &cfg.take_str("objective")
            .unwrap_or_else(|| "brightness".into()),
    )?;
    let grids = [
        cfg.take_grid("delta_grid")?,
        cfg.take_grid("p780_grid")?,
        cfg.take_grid("p776_grid")?,
        cfg.take_grid("od_grid")?,
    ];
    let scaling = OdScaling {
        od_ref: cfg.take_or("od_ref", 29.0)?,
        od0: cfg.take_or("od0", 9.7)?,
        tau0_ns: cfg.take_or("tau0_ns", DEFAULT_TAU0_NS)?,
        mu: cfg.take_or("mu", 0.0827)?,
    };
    let min_eta: f64 = cfg.take_or("min_eta", f64::NEG_INFINITY)?;
    let min_pair_rate: f64 = cfg.take_or("min_pair_rate", f64::NEG_INFINITY)?;
    let min_tau_ns: f64 = cfg.take_or("min_tau_ns", f64::NEG_INFINITY)?;
    cfg.finish()?;

    if grids.iter().all(Option::is_none) {
        return Err(CliError::Config(
            "optimize needs at least one of delta_grid, p780_grid, p776_grid, od_grid".into(),
        ));
    }
    if !(scaling.od_ref > 0.0 && scaling.od0 > 0.0 && scaling.tau0_ns > 0.0 && scaling.mu >= 0.0) {
        return Err(CliError::Config(
            "od_ref, od0, tau0_ns must be > 0 and mu >= 0".into(),
        ));
    }
    let op = setup.operating;
    let pick = |g: &Option<Vec<f64>>, default: f64| g.clone().unwrap_or_else(|| vec![default]);
    let deltas = pick(&grids[0], op.small_delta);
    let p780s = pick(&grids[1], op.p780_mw);
    let p776s = pick(&grids[2], op.p776_mw);
    let ods = pick(&grids[3], scaling.od_ref);
    if ods.iter().any(|o| !(*o >= 0.0)) {
        return Err(CliError::Config("od_grid values must be >= 0".into()));
    }

    let mut cells = vec![];
    for &d in &deltas {
        for &a in &p780s {
            for &b in &p776s {
                cells.push((d, a, b));
            }
        }
    }
    let rates: Vec<ModelRates> = cells
        .par_iter()
        .map(|&(d, a, b)| {
            setup.rates(&OperatingPoint {
                small_delta: d,
                p780_mw: a,
                p776_mw: b,
                ..op
            })
        })
        .collect::<Result<_>>()?;

    let mut rows = vec![];
    for (&(d, a, b), r) in cells.iter().zip(&rates) {
        for &od in &ods {
            let (r, tau_ns) = scaling.apply(*r, od);
            let brightness = 2.0 * std::f64::consts::PI * tau_ns * 1e-9 * r.pairs;
            let objective = match objective {
                Objective::Brightness => brightness,
                Objective::Eta => r.eta,
                Objective::PairRate => r.pairs,
            };
            rows.push(OptimizeRow {
                rank: 0,
                small_delta: d,
                p780_mw: a,
                p776_mw: b,
                od,
                r_single: r.single,
                r_pairs: r.pairs,
                eta: r.eta,
                tau_ns,
                brightness,
                objective,
            });
        }
    }
    let evaluated = rows.len();
    rows.retain(|r| r.eta >= min_eta && r.r_pairs >= min_pair_rate && r.tau_ns >= min_tau_ns);
    if rows.is_empty() {
        return Err(CliError::Numerical(format!(
            "infeasible constraints: none of {evaluated} grid points satisfies min_eta = {min_eta}, min_pair_rate = {min_pair_rate}, min_tau_ns = {min_tau_ns}"
        )));
    }
    // Ties go to the lower 780 nm power, then to the smaller |δ|.
    rows.sort_by(|x, y| {
        y.objective
            .total_cmp(&x.objective)
            .then(x.p780_mw.total_cmp(&y.p780_mw))
            .then(x.small_delta.abs().total_cmp(&y.small_delta.abs()))
    });
    for (k, r) in rows.iter_mut().enumerate() {
        r.rank = k + 1;
    }
    let path = out.join("ranking.csv");
    formats::write_rows(&path, &rows)?;
    let best = &rows[0];
    Ok(format!(
        "best of {} feasible / {evaluated}: δ = {}, P780 = {} mW, P776 = {} mW, OD = {}, objective = {:e} -> {}",
        rows.len(),
        best.small_delta,
        best.p780_mw,
        best.p776_mw,
        best.od,
        best.objective,
        path.display()
    ))
}
