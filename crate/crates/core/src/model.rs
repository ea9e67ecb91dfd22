//! Steady state of the driven three-level ladder (cascade) atom.
//!
//! Levels are labelled 1 (ground), 2 (intermediate) and 3 (upper). Pump 1
//! drives 1↔2 with Rabi frequency `omega1` at single-photon detuning
//! `big_delta`; pump 2 drives 2↔3 so that the two-photon detuning from level 3
//! is `small_delta`. Level 2 decays to 1 and level 3 decays to 2.
//!
//! Two routes are provided:
//!
//! * closed-form rational expressions for `ρ33` and `|ρ31|²`
//!   ([`rho33_analytic`], [`rho31_sq_analytic`]);
//! * a direct solve of the Lindblad generator ([`steady_state_numeric`]),
//!   which is used as an independent oracle for the closed forms.
//!
//! # Conventions
//!
//! All six parameters share one unit (MHz by convention). The closed forms
//! are homogeneous of degree zero, so the unit never matters and no factor of
//! 2π is applied anywhere. The Lindblad generator that reproduces the closed
//! forms exactly is
//!
//! ```text
//! H = -Δ|2⟩⟨2| - δ|3⟩⟨3| + Ω1(|1⟩⟨2| + |2⟩⟨1|) + Ω2(|2⟩⟨3| + |3⟩⟨2|)
//! C1 = √(2Γ1)|1⟩⟨2|,  C2 = √(2Γ2)|2⟩⟨3|
//! ```
//!
//! i.e. `Ω` is the full off-diagonal matrix element of `H`, `Γ` is the
//! coherence (half-width) damping rate so populations decay at `2Γ`, and
//! detunings are laser-minus-atom (`Δ < 0` is red). Flipping the signs of
//! both detunings together leaves both observables unchanged.

use nalgebra::{Matrix3, SMatrix, SVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute floor on the common denominator `K`, evaluated in the caller's units.
pub const K_FLOOR: f64 = 1e-300;

/// Pivot ratio below which the substituted Liouvillian is treated as singular.
const RANK_TOLERANCE: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid parameter `{field}` = {value}: {reason}")]
    InvalidParameter {
        field: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("degenerate parameter point: |K| = {magnitude:e} is below the floor {K_FLOOR:e}")]
    DegenerateParameters { magnitude: f64 },
    #[error(
        "Liouvillian is rank deficient beyond the trace degeneracy (pivot ratio {pivot_ratio:e})"
    )]
    RankDeficient { pivot_ratio: f64 },
}

/// Rabi frequencies, detunings and decay widths of the cascade model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreeLevelParams {
    pub omega1: f64,
    pub omega2: f64,
    pub big_delta: f64,
    pub small_delta: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl ThreeLevelParams {
    pub fn new(
        omega1: f64,
        omega2: f64,
        big_delta: f64,
        small_delta: f64,
        gamma1: f64,
        gamma2: f64,
    ) -> Result<Self, ModelError> {
        let p = Self {
            omega1,
            omega2,
            big_delta,
            small_delta,
            gamma1,
            gamma2,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let checks: [(&'static str, f64, bool); 6] = [
            ("omega1", self.omega1, self.omega1 >= 0.0),
            ("omega2", self.omega2, self.omega2 >= 0.0),
            ("big_delta", self.big_delta, true),
            ("small_delta", self.small_delta, true),
            ("gamma1", self.gamma1, self.gamma1 > 0.0),
            ("gamma2", self.gamma2, self.gamma2 > 0.0),
        ];
        for (field, value, ok) in checks {
            if !value.is_finite() {
                return Err(ModelError::InvalidParameter {
                    field,
                    value,
                    reason: "must be finite",
                });
            }
            if !ok {
                let reason = if field.starts_with("gamma") {
                    "decay widths must be positive"
                } else {
                    "Rabi frequencies must be non-negative"
                };
                return Err(ModelError::InvalidParameter {
                    field,
                    value,
                    reason,
                });
            }
        }
        Ok(())
    }

    /// Every field multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            omega1: self.omega1 * s,
            omega2: self.omega2 * s,
            big_delta: self.big_delta * s,
            small_delta: self.small_delta * s,
            gamma1: self.gamma1 * s,
            gamma2: self.gamma2 * s,
        }
    }

    pub fn with_small_delta(&self, small_delta: f64) -> Self {
        Self {
            small_delta,
            ..*self
        }
    }

    fn max_magnitude(&self) -> f64 {
        [
            self.omega1,
            self.omega2,
            self.big_delta,
            self.small_delta,
            self.gamma1,
            self.gamma2,
        ]
        .iter()
        .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Steady-state observables. `full_matrix` is only filled by the numeric solver.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    pub rho33: f64,
    pub rho31_sq: f64,
    pub full_matrix: Option<Matrix3<Complex64>>,
}

/// Parameters divided by their largest magnitude, together with that magnitude.
struct Normalized {
    o1: f64,
    o2: f64,
    dd: f64,
    d: f64,
    g1: f64,
    g2: f64,
    scale: f64,
}

impl Normalized {
    fn from(p: &ThreeLevelParams) -> Self {
        let scale = p.max_magnitude();
        Self {
            o1: p.omega1 / scale,
            o2: p.omega2 / scale,
            dd: p.big_delta / scale,
            d: p.small_delta / scale,
            g1: p.gamma1 / scale,
            g2: p.gamma2 / scale,
            scale,
        }
    }

    fn denominator(&self) -> f64 {
        let Self {
            o1,
            o2,
            dd,
            d,
            g1,
            g2,
            ..
        } = *self;
        let (o1s, o2s) = (o1 * o1, o2 * o2);
        let (dd2, g12, g22) = (dd * dd, g1 * g1, g2 * g2);
        let gs = g1 + g2;
        let a = dd2 + g12 + 2.0 * o1s;

        let c4 = g1 * g2 * a;
        let c3 = -2.0 * dd * g1 * g2 * (a + o2s);
        let c2 = o2s
            * (dd2 * g1 * (g1 + 5.0 * g2)
                + g12 * (g12 + g1 * g2 + 2.0 * g22)
                + 2.0 * o1s * gs * gs)
            + g1 * g2 * a * (dd2 + g12 + 2.0 * g1 * g2 + 2.0 * g22 - 2.0 * o1s)
            + g1 * g2 * o2s * o2s;
        let c1 = 2.0
            * dd
            * (-g2 * o2s * (g1 * (dd2 + g12 + 4.0 * g1 * g2 + g22) + g2 * o1s)
                + g1 * g2 * (o1s - g22) * a
                - g1 * o2s * o2s * (g1 + 2.0 * g2));
        let c0 = dd2 * dd2 * g1 * g2 * g22
            + dd2
                * g2
                * (g1
                    * (g22 * (2.0 * g12 + 2.0 * g1 * g2 + g22)
                        + 2.0 * g2 * o1s * (g1 + 2.0 * g2)
                        + o1s * o1s)
                    + g2 * o2s * (g1 * (3.0 * g1 + g2) + o1s)
                    + g1 * o2s * o2s)
            + (g2 * gs + o1s + o2s)
                * (g12 * g2 + g1 * o2s + 2.0 * g2 * o1s)
                * (g1 * (g2 * gs + o1s) + o2s * gs);

        (((c4 * d + c3) * d + c2) * d + c1) * d + c0
    }

    fn checked_denominator(&self) -> Result<f64, ModelError> {
        let k = self.denominator();
        // |K| in the caller's units is |k|·scale⁸; compare in log space.
        let log_k = k.abs().ln() + 8.0 * self.scale.ln();
        if !k.is_finite() || k == 0.0 || log_k < K_FLOOR.ln() {
            let magnitude = if k == 0.0 { 0.0 } else { log_k.exp() };
            return Err(ModelError::DegenerateParameters { magnitude });
        }
        Ok(k)
    }

    fn rho33_numerator(&self) -> f64 {
        let Self {
            o1,
            o2,
            dd,
            d,
            g1,
            g2,
            ..
        } = *self;
        let gs = g1 + g2;
        let (o1s, o2s) = (o1 * o1, o2 * o2);
        o1s * o2s * (g1 * g2 * ((d - dd).powi(2) + gs * gs) + g1 * o1s * gs + o2s * gs * gs)
    }

    fn rho31_polynomial(&self) -> Complex64 {
        let Self {
            o1,
            o2,
            dd,
            d,
            g1,
            g2,
            ..
        } = *self;
        let i = Complex64::i();
        let (o1s, o2s) = (o1 * o1, o2 * o2);
        let gs = g1 + g2;
        let dm = dd - i * g1;

        let t3 = d.powi(3) * g1 * g2 * dm;
        let t2 = -d * d * g1 * g2 * (dm * (2.0 * dd + i * g2) + o1s + o2s);
        let t1 = d
            * g1
            * (g2 * dm * (dd * dd + 2.0 * i * dd * g2 + gs * gs)
                + o2s * (dd * (g1 + 3.0 * g2) - i * g1 * gs)
                + 2.0 * i * g2 * o1s * gs);
        let t0 = -i * dd.powi(3) * g1 * g2 * g2
            - dd * dd * g1 * g2 * (g1 * g2 - o1s + o2s)
            - i * dd * g1 * g2 * gs * (g2 * gs + 2.0 * o1s + o2s)
            - (g1 * g2 * gs + g1 * o2s - g2 * o1s) * (g1 * (g2 * gs + o1s) + o2s * gs);
        t3 + t2 + t1 + t0
    }
}

/// Closed-form steady-state population of level 3.
pub fn rho33_analytic(p: &ThreeLevelParams) -> Result<f64, ModelError> {
    p.validate()?;
    let n = Normalized::from(p);
    let k = n.checked_denominator()?;
    Ok(n.rho33_numerator() / k)
}

/// Closed-form squared magnitude of the steady-state 3↔1 coherence.
pub fn rho31_sq_analytic(p: &ThreeLevelParams) -> Result<f64, ModelError> {
    p.validate()?;
    let n = Normalized::from(p);
    let k = n.checked_denominator()?;
    let prefactor = n.o1 * n.o2 / k;
    Ok(prefactor * prefactor * n.rho31_polynomial().norm_sqr())
}

/// Both closed-form observables sharing one evaluation of `K`.
pub fn steady_state_analytic(p: &ThreeLevelParams) -> Result<SteadyState, ModelError> {
    p.validate()?;
    let n = Normalized::from(p);
    let k = n.checked_denominator()?;
    let prefactor = n.o1 * n.o2 / k;
    Ok(SteadyState {
        rho33: n.rho33_numerator() / k,
        rho31_sq: prefactor * prefactor * n.rho31_polynomial().norm_sqr(),
        full_matrix: None,
    })
}

type Liouvillian = SMatrix<Complex64, 9, 9>;

/// Column-stacking index of `ρ[row, col]`.
#[inline]
fn vec_index(row: usize, col: usize) -> usize {
    row + 3 * col
}

fn hamiltonian(n: &Normalized) -> Matrix3<Complex64> {
    let c = |x: f64| Complex64::new(x, 0.0);
    let mut h = Matrix3::zeros();
    h[(1, 1)] = c(-n.dd);
    h[(2, 2)] = c(-n.d);
    h[(0, 1)] = c(n.o1);
    h[(1, 0)] = c(n.o1);
    h[(1, 2)] = c(n.o2);
    h[(2, 1)] = c(n.o2);
    h
}

fn collapse_operators(n: &Normalized) -> [Matrix3<Complex64>; 2] {
    let mut c1 = Matrix3::zeros();
    c1[(0, 1)] = Complex64::new((2.0 * n.g1).sqrt(), 0.0);
    let mut c2 = Matrix3::zeros();
    c2[(1, 2)] = Complex64::new((2.0 * n.g2).sqrt(), 0.0);
    [c1, c2]
}

/// Right-hand side of the master equation applied to `rho`.
fn lindblad_rhs(
    h: &Matrix3<Complex64>,
    jumps: &[Matrix3<Complex64>],
    rho: &Matrix3<Complex64>,
) -> Matrix3<Complex64> {
    let mut out = (h * rho - rho * h) * Complex64::new(0.0, -1.0);
    for c in jumps {
        let cd = c.adjoint();
        let cdc = cd * c;
        out += c * rho * cd - (cdc * rho + rho * cdc) * Complex64::new(0.5, 0.0);
    }
    out
}

/// Superoperator matrix acting on column-stacked density matrices.
fn liouvillian(n: &Normalized) -> Liouvillian {
    let h = hamiltonian(n);
    let jumps = collapse_operators(n);
    let mut l = Liouvillian::zeros();
    for col in 0..3 {
        for row in 0..3 {
            let mut basis = Matrix3::zeros();
            basis[(row, col)] = Complex64::new(1.0, 0.0);
            let image = lindblad_rhs(&h, &jumps, &basis);
            let j = vec_index(row, col);
            for c in 0..3 {
                for r in 0..3 {
                    l[(vec_index(r, c), j)] = image[(r, c)];
                }
            }
        }
    }
    l
}

/// Numerical steady state of the Lindblad generator.
///
/// The `ρ11` row of `L·vec(ρ) = 0` is replaced by the trace condition and the
/// resulting 9×9 system is solved by LU with partial pivoting. Parameters are
/// normalized by their largest magnitude first; the steady state only depends
/// on ratios.
pub fn steady_state_numeric(p: &ThreeLevelParams) -> Result<SteadyState, ModelError> {
    p.validate()?;
    let n = Normalized::from(p);
    let mut l = liouvillian(&n);
    let trace_row = vec_index(0, 0);
    for j in 0..9 {
        l[(trace_row, j)] = Complex64::new(0.0, 0.0);
    }
    for k in 0..3 {
        l[(trace_row, vec_index(k, k))] = Complex64::new(1.0, 0.0);
    }
    let mut rhs = SVector::<Complex64, 9>::zeros();
    rhs[trace_row] = Complex64::new(1.0, 0.0);

    let lu = l.lu();
    let u = lu.u();
    let diag: Vec<f64> = (0..9).map(|k| u[(k, k)].norm()).collect();
    let max_pivot = diag.iter().cloned().fold(0.0, f64::max);
    let min_pivot = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    let pivot_ratio = if max_pivot > 0.0 {
        min_pivot / max_pivot
    } else {
        0.0
    };
    if !(pivot_ratio > RANK_TOLERANCE) {
        return Err(ModelError::RankDeficient { pivot_ratio });
    }
    let v = lu
        .solve(&rhs)
        .ok_or(ModelError::RankDeficient { pivot_ratio })?;

    let mut rho = Matrix3::<Complex64>::zeros();
    for c in 0..3 {
        for r in 0..3 {
            rho[(r, c)] = v[vec_index(r, c)];
        }
    }
    // Symmetrize away roundoff-level anti-Hermitian parts.
    let rho = (rho + rho.adjoint()) * Complex64::new(0.5, 0.0);

    Ok(SteadyState {
        rho33: rho[(2, 2)].re,
        rho31_sq: rho[(2, 0)].norm_sqr(),
        full_matrix: Some(rho),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference() -> ThreeLevelParams {
        ThreeLevelParams::new(5.0, 10.0, -60.0, 3.0, 5.75, 0.66).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn no_pump1_means_no_upper_population() {
        let p = ThreeLevelParams::new(0.0, 10.0, -60.0, 3.0, 5.75, 0.66).unwrap();
        assert_eq!(rho33_analytic(&p).unwrap(), 0.0);
        assert_eq!(rho31_sq_analytic(&p).unwrap(), 0.0);
    }

    #[test]
    fn no_pump2_means_no_coherence() {
        let p = ThreeLevelParams::new(5.0, 0.0, -60.0, 3.0, 5.75, 0.66).unwrap();
        assert_eq!(rho31_sq_analytic(&p).unwrap(), 0.0);
    }

    #[test]
    fn uniform_rescaling_by_three() {
        let p = reference();
        let q = p.scaled(3.0);
        assert!(rel(rho33_analytic(&q).unwrap(), rho33_analytic(&p).unwrap()) < 1e-12);
        assert!(
            rel(
                rho31_sq_analytic(&q).unwrap(),
                rho31_sq_analytic(&p).unwrap()
            ) < 1e-12
        );
    }

    #[test]
    fn reference_point_matches_numeric_solver() {
        let p = reference();
        let num = steady_state_numeric(&p).unwrap();
        assert!(rel(rho33_analytic(&p).unwrap(), num.rho33) < 1e-8);
        assert!(rel(rho31_sq_analytic(&p).unwrap(), num.rho31_sq) < 1e-8);
    }

    #[test]
    fn undriven_atom_sits_in_ground_state() {
        let p = ThreeLevelParams::new(0.0, 0.0, -60.0, 3.0, 5.75, 0.66).unwrap();
        let rho = steady_state_numeric(&p).unwrap().full_matrix.unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let expected = if r == 0 && c == 0 { 1.0 } else { 0.0 };
                assert!((rho[(r, c)] - Complex64::new(expected, 0.0)).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn density_matrix_axioms() {
        let rho = steady_state_numeric(&reference())
            .unwrap()
            .full_matrix
            .unwrap();
        assert!((rho.trace() - Complex64::new(1.0, 0.0)).norm() < 1e-10);
        assert!((rho - rho.adjoint()).norm() < 1e-14);
        let eig = rho.symmetric_eigenvalues();
        assert!(eig.iter().all(|&e| e >= -1e-9));
    }

    #[test]
    fn flipping_both_detunings_is_a_symmetry() {
        let p = reference();
        let q = ThreeLevelParams {
            big_delta: -p.big_delta,
            small_delta: -p.small_delta,
            ..p
        };
        assert!(rel(rho33_analytic(&q).unwrap(), rho33_analytic(&p).unwrap()) < 1e-12);
        assert!(
            rel(
                rho31_sq_analytic(&q).unwrap(),
                rho31_sq_analytic(&p).unwrap()
            ) < 1e-12
        );
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(matches!(
            ThreeLevelParams::new(1.0, 1.0, 0.0, 0.0, 0.0, 1.0),
            Err(ModelError::InvalidParameter {
                field: "gamma1",
                ..
            })
        ));
        assert!(matches!(
            ThreeLevelParams::new(-1.0, 1.0, 0.0, 0.0, 1.0, 1.0),
            Err(ModelError::InvalidParameter {
                field: "omega1",
                ..
            })
        ));
        assert!(ThreeLevelParams::new(1.0, f64::NAN, 0.0, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn tiny_units_hit_the_k_floor() {
        // K is degree 8: fields of 1e-40 give |K| ~ 1e-320.
        let p = reference().scaled(1e-40 / 60.0);
        assert!(matches!(
            rho33_analytic(&p),
            Err(ModelError::DegenerateParameters { .. })
        ));
        // Hz-scale input is fine.
        let hz = reference().scaled(1e6);
        assert!(
            rel(
                rho33_analytic(&hz).unwrap(),
                rho33_analytic(&reference()).unwrap()
            ) < 1e-12
        );
    }

    #[test]
    fn weak_drive_is_perturbative() {
        let p = ThreeLevelParams::new(0.66e-3, 0.66e-3, -60.0, 0.0, 5.75, 0.66).unwrap();
        assert!(rho33_analytic(&p).unwrap() <= 1e-4);
    }

    #[test]
    fn coherence_bounded_by_cauchy_schwarz() {
        let num = steady_state_numeric(&reference()).unwrap();
        let rho = num.full_matrix.unwrap();
        assert!(num.rho31_sq <= rho[(0, 0)].re * rho[(2, 2)].re * (1.0 + 1e-12));
    }
}
