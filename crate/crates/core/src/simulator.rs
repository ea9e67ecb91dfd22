//! Monte Carlo time-tag generator with known ground truth.
//!
//! Each cooling/generation cycle is simulated independently from its own
//! random stream: a ChaCha20 generator seeded with the run seed and switched
//! to stream number `k` for cycle `k`. The merged output therefore does not
//! depend on how cycles are scheduled across threads.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timetag::{
    Channel, GatingPlan, TimestampRecord, TimestampStream, MAX_TICK, TICK_SECONDS,
};

pub const RNG_NAME: &str = "ChaCha20 (rand_chacha), stream = cycle index";

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid simulation config: {field} = {value}: {reason}")]
pub struct ConfigError {
    pub field: &'static str,
    pub value: f64,
    pub reason: &'static str,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Pair creation rate during active windows, s⁻¹.
    pub pair_generation_rate: f64,
    /// Mean idler delay, ns.
    pub tau_ns: f64,
    pub det_eff_s: f64,
    pub det_eff_i: f64,
    /// Dark-count rates, s⁻¹, present at all times.
    pub dark_s: f64,
    pub dark_i: f64,
    /// Gaussian timing jitter per detection, ps.
    pub jitter_ps: f64,
    /// Active (pair generation) part at the end of each cycle, ms.
    pub active_ms: f64,
    pub period_ms: f64,
    /// Total wall time, s.
    pub duration: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            pair_generation_rate: 2e4,
            tau_ns: 6.52,
            det_eff_s: 0.124,
            det_eff_i: 0.173,
            dark_s: 165.0,
            dark_i: 508.0,
            jitter_ps: 340.0,
            active_ms: 1.0,
            period_ms: 17.0,
            duration: 17.0,
            seed: 1,
        }
    }
}

fn ms_to_ticks(ms: f64) -> Option<u64> {
    let t = ms * 1e-3 / TICK_SECONDS;
    let r = t.round();
    ((t - r).abs() <= 1e-6 * r.max(1.0)).then_some(r as u64)
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |field, value, reason| {
            Err(ConfigError {
                field,
                value,
                reason,
            })
        };
        for (field, v) in [("det_eff_s", self.det_eff_s), ("det_eff_i", self.det_eff_i)] {
            if !(0.0..=1.0).contains(&v) {
                return err(field, v, "must lie in [0, 1]");
            }
        }
        for (field, v) in [
            ("pair_generation_rate", self.pair_generation_rate),
            ("dark_s", self.dark_s),
            ("dark_i", self.dark_i),
            ("jitter_ps", self.jitter_ps),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(field, v, "must be finite and >= 0");
            }
        }
        if !(self.tau_ns > 0.0 && self.tau_ns.is_finite()) {
            return err("tau_ns", self.tau_ns, "must be > 0");
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return err("duration", self.duration, "must be > 0");
        }
        if !(self.period_ms > 0.0) || ms_to_ticks(self.period_ms).is_none() {
            return err(
                "period_ms",
                self.period_ms,
                "must be a positive whole number of ticks",
            );
        }
        if !(self.active_ms > 0.0 && self.active_ms <= self.period_ms)
            || ms_to_ticks(self.active_ms).is_none()
        {
            return err(
                "active_ms",
                self.active_ms,
                "must be a whole number of ticks in (0, period]",
            );
        }
        Ok(())
    }

    fn period_ticks(&self) -> u64 {
        ms_to_ticks(self.period_ms).expect("validated")
    }

    fn active_ticks(&self) -> u64 {
        ms_to_ticks(self.active_ms).expect("validated")
    }

    fn duration_ticks(&self) -> u64 {
        (self.duration / TICK_SECONDS).round() as u64
    }

    /// Active windows within the wall time, in ticks.
    pub fn gating_plan(&self) -> Result<GatingPlan, ConfigError> {
        self.validate()?;
        let (period, active, end) = (
            self.period_ticks(),
            self.active_ticks(),
            self.duration_ticks(),
        );
        let windows: Vec<(u64, u64)> = (0..end.div_ceil(period))
            .filter_map(|k| {
                let lo = k * period + period - active;
                let hi = ((k + 1) * period).min(end);
                (lo < hi).then_some((lo, hi))
            })
            .collect();
        GatingPlan::new(windows).map_err(|_| ConfigError {
            field: "duration",
            value: self.duration,
            reason: "shorter than the first active window",
        })
    }

    /// Wall time equivalent to `active` seconds of generation.
    pub fn duration_for_active_time(&self, active: f64) -> f64 {
        active * self.period_ms / self.active_ms
    }
}

/// Realized counts of one run.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub generated_pairs: u64,
    /// Pairs with both photons detected.
    pub detected_pairs: u64,
    pub signal_events: u64,
    pub idler_events: u64,
    pub dark_signal_events: u64,
    pub dark_idler_events: u64,
    pub rng: String,
    pub seed: u64,
}

impl GroundTruth {
    fn add(&mut self, o: &GroundTruth) {
        self.generated_pairs += o.generated_pairs;
        self.detected_pairs += o.detected_pairs;
        self.signal_events += o.signal_events;
        self.idler_events += o.idler_events;
        self.dark_signal_events += o.dark_signal_events;
        self.dark_idler_events += o.dark_idler_events;
    }

    pub fn write_json<W: Write>(&self, w: W) -> serde_json::Result<()> {
        serde_json::to_writer_pretty(w, self)
    }
}

/// One generated pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairRecord {
    /// Idler delay before jitter, ns.
    pub delay_ns: f64,
    pub signal_tick: Option<u64>,
    pub idler_tick: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub stream: TimestampStream,
    pub gating: GatingPlan,
    pub truth: GroundTruth,
    pub pairs: Vec<PairRecord>,
}

struct Cycle {
    records: Vec<TimestampRecord>,
    truth: GroundTruth,
    pairs: Vec<PairRecord>,
}

struct Sampler {
    jitter: Option<Normal<f64>>,
    delay: Exp<f64>,
}

impl Sampler {
    /// Tick of an event `offset` seconds after `origin`, with jitter.
    fn tick(&self, rng: &mut ChaCha20Rng, origin: u64, offset: f64) -> u64 {
        let t = offset + self.jitter.map_or(0.0, |j| j.sample(rng));
        let dt = (t / TICK_SECONDS).floor();
        let tick = origin as f64 + dt;
        if tick <= 0.0 {
            0
        } else if dt.abs() < 9e15 {
            (origin as i64 + dt as i64).clamp(0, MAX_TICK as i64) as u64
        } else {
            MAX_TICK
        }
    }
}

fn poisson(rng: &mut ChaCha20Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        0
    } else {
        Poisson::new(mean)
            .expect("positive finite mean")
            .sample(rng) as u64
    }
}

fn simulate_cycle(cfg: &SimConfig, sampler: &Sampler, k: u64) -> Cycle {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(k);
    let period = cfg.period_ticks();
    let start = k * period;
    let end = ((k + 1) * period).min(cfg.duration_ticks());
    let span = (end - start) as f64 * TICK_SECONDS;
    let mut records = Vec::new();
    let mut truth = GroundTruth::default();

    for (channel, rate) in [(Channel::Signal, cfg.dark_s), (Channel::Idler, cfg.dark_i)] {
        let n = poisson(&mut rng, rate * span);
        for _ in 0..n {
            let t = rng.random::<f64>() * span;
            records.push(TimestampRecord::new(
                sampler.tick(&mut rng, start, t),
                channel,
            ));
        }
        match channel {
            Channel::Signal => truth.dark_signal_events = n,
            Channel::Idler => truth.dark_idler_events = n,
        }
    }

    let mut pairs = Vec::new();
    let active_lo = start + period - cfg.active_ticks();
    if active_lo < end {
        let offset = (active_lo - start) as f64 * TICK_SECONDS;
        let active = (end - active_lo) as f64 * TICK_SECONDS;
        let n = poisson(&mut rng, cfg.pair_generation_rate * active);
        truth.generated_pairs = n;
        for _ in 0..n {
            let created = offset + rng.random::<f64>() * active;
            let delay = sampler.delay.sample(&mut rng);
            let signal = rng.random::<f64>() < cfg.det_eff_s;
            let idler = rng.random::<f64>() < cfg.det_eff_i;
            let signal_tick = signal.then(|| sampler.tick(&mut rng, start, created));
            let idler_tick = idler.then(|| sampler.tick(&mut rng, start, created + delay * 1e-9));
            if let Some(t) = signal_tick {
                records.push(TimestampRecord::new(t, Channel::Signal));
            }
            if let Some(t) = idler_tick {
                records.push(TimestampRecord::new(t, Channel::Idler));
            }
            if signal && idler {
                truth.detected_pairs += 1;
            }
            pairs.push(PairRecord {
                delay_ns: delay,
                signal_tick,
                idler_tick,
            });
        }
    }
    truth.signal_events = records
        .iter()
        .filter(|r| r.channel == Channel::Signal)
        .count() as u64;
    truth.idler_events = records.len() as u64 - truth.signal_events;
    Cycle {
        records,
        truth,
        pairs,
    }
}

/// Generates a sorted two-channel stream, its gating plan and ground truth.
pub fn generate(cfg: &SimConfig) -> Result<Simulation, ConfigError> {
    let gating = cfg.gating_plan()?;
    let sampler = Sampler {
        jitter: (cfg.jitter_ps > 0.0)
            .then(|| Normal::new(0.0, cfg.jitter_ps * 1e-12).expect("finite sigma")),
        delay: Exp::new(1.0 / cfg.tau_ns).expect("tau validated"),
    };
    let n_cycles = cfg.duration_ticks().div_ceil(cfg.period_ticks());
    let cycles: Vec<Cycle> = (0..n_cycles)
        .into_par_iter()
        .map(|k| simulate_cycle(cfg, &sampler, k))
        .collect();

    let mut truth = GroundTruth {
        rng: RNG_NAME.into(),
        seed: cfg.seed,
        ..GroundTruth::default()
    };
    let mut records = Vec::with_capacity(cycles.iter().map(|c| c.records.len()).sum());
    let mut pairs = Vec::new();
    for c in cycles {
        truth.add(&c.truth);
        records.extend(c.records);
        pairs.extend(c.pairs);
    }
    records.par_sort_by_key(|r| (r.tick, r.channel == Channel::Idler));
    Ok(Simulation {
        stream: TimestampStream::new(records),
        gating,
        truth,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(rate: f64, duration: f64) -> SimConfig {
        SimConfig {
            pair_generation_rate: rate,
            det_eff_s: 1.0,
            det_eff_i: 1.0,
            dark_s: 0.0,
            dark_i: 0.0,
            jitter_ps: 0.0,
            duration,
            ..SimConfig::default()
        }
    }

    #[test]
    fn lossless_limit_keeps_every_pair() {
        let sim = generate(&quiet(1e4, 1.7)).unwrap();
        let t = &sim.truth;
        assert!(t.generated_pairs > 0);
        assert_eq!(t.detected_pairs, t.generated_pairs);
        assert_eq!(t.signal_events, t.generated_pairs);
        assert_eq!(t.idler_events, t.generated_pairs);
        assert_eq!(sim.stream.len() as u64, 2 * t.generated_pairs);
    }

    #[test]
    fn idler_never_precedes_its_signal() {
        let sim = generate(&quiet(2e4, 1.7)).unwrap();
        for p in &sim.pairs {
            assert!(p.idler_tick.unwrap() >= p.signal_tick.unwrap());
        }
    }

    #[test]
    fn pure_darks_are_poisson() {
        let cfg = SimConfig {
            pair_generation_rate: 0.0,
            dark_s: 1000.0,
            duration: 10.0,
            ..quiet(0.0, 10.0)
        };
        let sim = generate(&cfg).unwrap();
        let n = sim.stream.count(Channel::Signal) as f64;
        assert!((n - 1e4).abs() < 4.0 * 100.0, "{n}");
        assert_eq!(sim.stream.count(Channel::Idler), 0);
    }

    #[test]
    fn same_seed_same_stream() {
        let cfg = SimConfig {
            duration: 3.4,
            ..SimConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.stream, b.stream);
        assert_eq!(a.truth, b.truth);
        let c = generate(&SimConfig { seed: 2, ..cfg }).unwrap();
        assert_ne!(a.stream, c.stream);
    }

    #[test]
    fn stream_is_sorted() {
        let sim = generate(&SimConfig {
            duration: 1.7,
            ..SimConfig::default()
        })
        .unwrap();
        assert!(sim.stream.is_sorted());
    }

    #[test]
    fn events_outside_windows_are_darks() {
        let cfg = SimConfig {
            dark_s: 0.0,
            dark_i: 0.0,
            jitter_ps: 0.0,
            duration: 1.7,
            ..SimConfig::default()
        };
        let sim = generate(&cfg).unwrap();
        for r in &sim.stream.records {
            if r.channel == Channel::Signal {
                assert!(sim.gating.contains(r.tick));
            }
        }
    }

    #[test]
    fn gating_plan_layout() {
        let cfg = SimConfig {
            duration: 0.04,
            ..SimConfig::default()
        };
        let g = cfg.gating_plan().unwrap();
        let ms = |t: u64| t as f64 * TICK_SECONDS * 1e3;
        let w: Vec<(f64, f64)> = g.windows().iter().map(|&(a, b)| (ms(a), ms(b))).collect();
        assert_eq!(w.len(), 2);
        assert!((w[0].0 - 16.0).abs() < 1e-9 && (w[0].1 - 17.0).abs() < 1e-9);
        assert!((w[1].0 - 33.0).abs() < 1e-9 && (w[1].1 - 34.0).abs() < 1e-9);
        assert!((cfg.duration_for_active_time(42.0) - 714.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            SimConfig {
                det_eff_s: 1.5,
                ..SimConfig::default()
            },
            SimConfig {
                tau_ns: 0.0,
                ..SimConfig::default()
            },
            SimConfig {
                dark_i: -1.0,
                ..SimConfig::default()
            },
            SimConfig {
                active_ms: 20.0,
                ..SimConfig::default()
            },
            SimConfig {
                duration: 0.001,
                ..SimConfig::default()
            },
        ];
        for c in bad {
            assert!(generate(&c).is_err(), "{c:?}");
        }
    }
}
