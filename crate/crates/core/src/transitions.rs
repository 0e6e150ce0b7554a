//! Diagonalization, microwave coupling and the allowed-transition table.

use std::io::Write;

use nalgebra::{SymmetricEigen, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::constants::PhysicalConstants;
use crate::error::{Error, Result};
use crate::spin::{
    field_in_nv_frame, hermitian_deviation, hilbert_dim, mw_direction_lab, CMatrix, HamiltonianTerms,
    SpinSpace, SpinSystemConfig,
};

/// Relative tolerance on |H - H^dagger| accepted by [`diagonalize`].
pub const HERMITIAN_TOLERANCE: f64 = 1e-10;
/// Transitions weaker than this fraction of the strongest coupling are dropped.
pub const DEFAULT_RABI_FLOOR: f64 = 1e-6;
/// Minimum eigenvector overlap accepted when following a level across field steps.
pub const MIN_TRACKING_OVERLAP: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct EigenSystem {
    /// Ascending eigenvalues (MHz).
    pub energies: Vec<f64>,
    /// Eigenvectors as columns, in the order of `energies`.
    pub states: CMatrix,
}

impl EigenSystem {
    pub fn dim(&self) -> usize {
        self.energies.len()
    }

    /// Expectation value of `op` in eigenstate `k`.
    pub fn expectation(&self, op: &CMatrix, k: usize) -> f64 {
        let v = self.states.column(k);
        (v.adjoint() * op * v)[(0, 0)].re
    }

    /// <S_z> of every eigenstate, reading m_s straight off the product basis.
    pub fn electron_sz(&self) -> Result<Vec<f64>> {
        let block = self.dim() / 3;
        if block * 3 != self.dim() {
            return Err(Error::DimensionMismatch { expected: 3 * block, actual: self.dim() });
        }
        Ok((0..self.dim())
            .map(|k| {
                let col = self.states.column(k);
                (0..self.dim()).map(|b| col[b].norm_sqr() * (1.0 - (b / block) as f64)).sum()
            })
            .collect())
    }

    /// Basis index and weight of the largest component of eigenstate `k`.
    pub fn dominant_component(&self, k: usize) -> (usize, f64) {
        let col = self.states.column(k);
        col.iter()
            .enumerate()
            .map(|(b, c)| (b, c.norm_sqr()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty eigenvector")
    }
}

/// Eigen-decomposition of a Hermitian matrix with ascending eigenvalues.
pub fn diagonalize(h: &CMatrix) -> Result<EigenSystem> {
    if h.nrows() != h.ncols() {
        return Err(Error::DimensionMismatch { expected: h.nrows(), actual: h.ncols() });
    }
    let deviation = hermitian_deviation(h);
    let tolerance = HERMITIAN_TOLERANCE * h.norm().max(1.0);
    if !(deviation <= tolerance) {
        return Err(Error::NotHermitian { deviation, tolerance });
    }
    let eig = SymmetricEigen::new(h.clone());
    let mut order: Vec<usize> = (0..h.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let energies = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let states = CMatrix::from_fn(h.nrows(), h.ncols(), |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(EigenSystem { energies, states })
}

/// Microwave interaction `-gamma_e * b_mw * (n . S)` padded over the nuclear factors.
///
/// `(xi, zeta)` give the polarization direction in the frame where the operator is
/// expressed; `xi` is the angle from z, `zeta` the azimuth.
pub fn mw_coupling_operator(
    xi: f64,
    zeta: f64,
    b_mw: f64,
    n13c: usize,
    constants: &PhysicalConstants,
) -> Result<CMatrix> {
    mw_coupling_along(&mw_direction_lab(xi, zeta), b_mw, n13c, constants)
}

/// Same as [`mw_coupling_operator`] for an explicit direction vector.
pub fn mw_coupling_along(
    direction: &Vector3<f64>,
    b_mw: f64,
    n13c: usize,
    constants: &PhysicalConstants,
) -> Result<CMatrix> {
    let space = SpinSpace::new(n13c)?;
    let s = &space.electron;
    let n = direction.normalize();
    let local = &s.sx * Complex64::new(n[0], 0.0)
        + &s.sy * Complex64::new(n[1], 0.0)
        + &s.sz * Complex64::new(n[2], 0.0);
    Ok(space.on_electron(&local) * Complex64::new(-constants.gamma_e * b_mw, 0.0))
}

/// Microwave operator for `cfg`, with the lab polarization carried into its NV frame.
pub fn mw_coupling_for(cfg: &SpinSystemConfig, b_mw: f64, constants: &PhysicalConstants) -> Result<CMatrix> {
    let dir = field_in_nv_frame(mw_direction_lab(cfg.xi, cfg.zeta), cfg.orientation)?;
    mw_coupling_along(&dir, b_mw, cfg.n13c, constants)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// E_to - E_from (MHz).
    pub frequency: f64,
    /// |<to| H_mw |from>| (MHz).
    pub rabi: f64,
    /// Saturated ODMR amplitude for the configured pump/decay ratio.
    pub amplitude: f64,
    pub delta_ms: u8,
    pub from: usize,
    pub to: usize,
    pub n13c: usize,
    pub orientation: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionOptions {
    /// Ratio of microwave pumping to decay rates.
    pub alpha: f64,
    /// Relative rabi floor below which transitions are dropped.
    pub rabi_floor: f64,
}

impl Default for TransitionOptions {
    fn default() -> Self {
        Self { alpha: 1.0, rabi_floor: DEFAULT_RABI_FLOOR }
    }
}

/// Saturation amplitude `1 - cos(pi/2 * x / (1 + x))` with `x = rabi * alpha`.
pub fn saturation_amplitude(rabi: f64, alpha: f64) -> f64 {
    let x = rabi * alpha;
    if x.is_infinite() {
        return 1.0;
    }
    1.0 - (std::f64::consts::FRAC_PI_2 * x / (1.0 + x)).cos()
}

/// Microwave operator in the eigenbasis, `U^dagger M U`.
pub fn coupling_in_eigenbasis(eig: &EigenSystem, mw_op: &CMatrix) -> Result<CMatrix> {
    if mw_op.nrows() != eig.dim() || mw_op.ncols() != eig.dim() {
        return Err(Error::DimensionMismatch { expected: eig.dim(), actual: mw_op.nrows() });
    }
    Ok(eig.states.adjoint() * mw_op * &eig.states)
}

/// All transitions `i < k` between eigenstates whose coupling survives the floor.
pub fn transition_table(eig: &EigenSystem, mw_op: &CMatrix, alpha: f64) -> Result<Vec<Transition>> {
    transition_table_with(eig, mw_op, &TransitionOptions { alpha, ..Default::default() })
}

pub fn transition_table_with(
    eig: &EigenSystem,
    mw_op: &CMatrix,
    opts: &TransitionOptions,
) -> Result<Vec<Transition>> {
    let coupling = coupling_in_eigenbasis(eig, mw_op)?;
    let sz = eig.electron_sz()?;
    let n = eig.dim();
    let n13c = (n / 9).trailing_zeros() as usize;

    let mut max_rabi = 0.0f64;
    for i in 0..n {
        for k in i + 1..n {
            max_rabi = max_rabi.max(coupling[(i, k)].norm());
        }
    }
    let floor = opts.rabi_floor * max_rabi;

    let mut out = Vec::new();
    for i in 0..n {
        for k in i + 1..n {
            let rabi = coupling[(i, k)].norm();
            if rabi <= floor || rabi == 0.0 {
                continue;
            }
            out.push(Transition {
                frequency: eig.energies[k] - eig.energies[i],
                rabi,
                amplitude: saturation_amplitude(rabi, opts.alpha),
                delta_ms: ((sz[k] - sz[i]).abs().round() as u8).min(2),
                from: i,
                to: k,
                n13c,
                orientation: 0,
            });
        }
    }
    Ok(out)
}

/// Eigen-decomposition and transition table for one fully specified isotopologue.
pub fn transitions_for(
    cfg: &SpinSystemConfig,
    constants: &PhysicalConstants,
    b_mw: f64,
    opts: &TransitionOptions,
) -> Result<(EigenSystem, Vec<Transition>)> {
    let terms = HamiltonianTerms::new(cfg.n13c, constants)?;
    let eig = diagonalize(&terms.assemble(cfg)?)?;
    let mw = mw_coupling_for(cfg, b_mw, constants)?;
    let mut table = transition_table_with(&eig, &mw, opts)?;
    for t in &mut table {
        t.orientation = cfg.orientation;
    }
    Ok((eig, table))
}

/// Map every state of `reference` to the state of `other` with maximal overlap.
///
/// Near-equal overlaps are resolved in favour of the closer energy. A state whose
/// best overlap falls below [`MIN_TRACKING_OVERLAP`] yields `None`.
pub fn track_states(reference: &EigenSystem, other: &EigenSystem) -> Result<Vec<Option<usize>>> {
    if reference.dim() != other.dim() {
        return Err(Error::DimensionMismatch { expected: reference.dim(), actual: other.dim() });
    }
    let overlaps = reference.states.adjoint() * &other.states;
    let n = reference.dim();
    Ok((0..n)
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for j in 0..n {
                let o = overlaps[(i, j)].norm();
                best = match best {
                    None => Some((j, o)),
                    Some((bj, bo)) => {
                        let closer = (other.energies[j] - reference.energies[i]).abs()
                            < (other.energies[bj] - reference.energies[i]).abs();
                        if o > bo + 1e-9 || ((o - bo).abs() <= 1e-9 && closer) {
                            Some((j, o))
                        } else {
                            Some((bj, bo))
                        }
                    }
                };
            }
            best.filter(|&(_, o)| o >= MIN_TRACKING_OVERLAP).map(|(j, _)| j)
        })
        .collect())
}

fn best_overlap(reference: &EigenSystem, other: &EigenSystem, i: usize) -> f64 {
    let v = reference.states.column(i);
    (0..other.dim()).map(|j| (v.adjoint() * other.states.column(j))[(0, 0)].norm()).fold(0.0, f64::max)
}

/// Which transition a field-sensitivity query refers to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransitionSelector {
    /// Eigenstate indices at the reference field.
    Indices { from: usize, to: usize },
    /// The transition (above the rabi floor) closest to this frequency.
    Nearest { frequency: f64 },
    /// The strongest transition inside `[low, high]` MHz.
    Strongest { low: f64, high: f64 },
}

impl TransitionSelector {
    pub fn resolve(&self, table: &[Transition]) -> Result<(usize, usize)> {
        let pick = match *self {
            Self::Indices { from, to } => return Ok((from, to)),
            Self::Nearest { frequency } => table
                .iter()
                .min_by(|a, b| (a.frequency - frequency).abs().total_cmp(&(b.frequency - frequency).abs())),
            Self::Strongest { low, high } => table
                .iter()
                .filter(|t| t.frequency >= low && t.frequency <= high)
                .max_by(|a, b| a.rabi.total_cmp(&b.rabi)),
        };
        pick.map(|t| (t.from, t.to)).ok_or(Error::NoSuchTransition)
    }
}

pub const DEFAULT_FIELD_STEP: f64 = 0.1;

/// Eigen-systems at the field of `cfg` scaled by `1 - step/B`, `1`, `1 + step/B`.
///
/// The field direction is held fixed; at `B = 0` the steps run along the
/// configured direction, so the lower point is the reversed field.
pub(crate) struct FieldStencil {
    pub center: EigenSystem,
    pub minus: EigenSystem,
    pub plus: EigenSystem,
    pub step: f64,
}

impl FieldStencil {
    pub fn new(terms: &HamiltonianTerms, cfg: &SpinSystemConfig, step: f64) -> Result<Self> {
        if !(step > 0.0) || !step.is_finite() {
            return Err(crate::error::invalid("delta_b", "field step must be positive"));
        }
        cfg.validate()?;
        let unit = {
            let dir = SpinSystemConfig { b_mag: 1.0, ..cfg.clone() };
            dir.field_nv()?
        };
        let at = |b: f64| -> Result<EigenSystem> {
            let field: Vector3<f64> = unit * b;
            diagonalize(&terms.assemble_nv(cfg.d_prime, cfg.ex, cfg.ey, &field))
        };
        Ok(Self { center: at(cfg.b_mag)?, minus: at(cfg.b_mag - step)?, plus: at(cfg.b_mag + step)?, step })
    }

    /// Central-difference d f / d B for transition `from -> to` of the center system.
    pub fn derivative(&self, from: usize, to: usize) -> Result<f64> {
        let n = self.center.dim();
        for idx in [from, to] {
            if idx >= n {
                return Err(Error::IndexOutOfRange { what: "eigenstate", index: idx, max: n - 1 });
            }
        }
        let plus = track_states(&self.center, &self.plus)?;
        let minus = track_states(&self.center, &self.minus)?;
        self.derivative_tracked(from, to, &plus, &minus)
    }

    pub fn derivative_tracked(
        &self,
        from: usize,
        to: usize,
        plus: &[Option<usize>],
        minus: &[Option<usize>],
    ) -> Result<f64> {
        let get = |map: &[Option<usize>], sys: &EigenSystem, i: usize| -> Result<usize> {
            map[i].ok_or_else(|| Error::TrackingFailed {
                state: i,
                overlap: best_overlap(&self.center, sys, i),
            })
        };
        let (fp, tp) = (get(plus, &self.plus, from)?, get(plus, &self.plus, to)?);
        let (fm, tm) = (get(minus, &self.minus, from)?, get(minus, &self.minus, to)?);
        let f_plus = self.plus.energies[tp] - self.plus.energies[fp];
        let f_minus = self.minus.energies[tm] - self.minus.energies[fm];
        Ok((f_plus - f_minus) / (2.0 * self.step))
    }
}

/// d f / d B (MHz/G) of the selected transition by central finite difference in
/// the field magnitude, following both levels by eigenvector overlap.
pub fn field_sensitivity(
    cfg: &SpinSystemConfig,
    constants: &PhysicalConstants,
    selector: TransitionSelector,
    delta_b: f64,
) -> Result<f64> {
    let terms = HamiltonianTerms::new(cfg.n13c, constants)?;
    let stencil = FieldStencil::new(&terms, cfg, delta_b)?;
    let mw = mw_coupling_for(cfg, 1.0, constants)?;
    let table = transition_table(&stencil.center, &mw, 1.0)?;
    let (from, to) = selector.resolve(&table)?;
    stencil.derivative(from, to)
}

/// Field sensitivity of every transition in the table of `cfg`. Transitions whose
/// levels cannot be tracked get `None`.
pub fn transition_sensitivities(
    terms: &HamiltonianTerms,
    cfg: &SpinSystemConfig,
    mw_op: &CMatrix,
    opts: &TransitionOptions,
    delta_b: f64,
) -> Result<Vec<(Transition, Option<f64>)>> {
    if terms.dim() != hilbert_dim(cfg.n13c) {
        return Err(Error::DimensionMismatch { expected: terms.dim(), actual: hilbert_dim(cfg.n13c) });
    }
    let stencil = FieldStencil::new(terms, cfg, delta_b)?;
    let plus = track_states(&stencil.center, &stencil.plus)?;
    let minus = track_states(&stencil.center, &stencil.minus)?;
    let mut table = transition_table_with(&stencil.center, mw_op, opts)?;
    for t in &mut table {
        t.orientation = cfg.orientation;
    }
    Ok(table
        .into_iter()
        .map(|t| {
            let d = stencil.derivative_tracked(t.from, t.to, &plus, &minus).ok();
            (t, d)
        })
        .collect())
}

pub const TRANSITION_CSV_HEADER: &str = "orientation,n13c,from,to,f_mhz,rabi,amplitude,delta_ms";

/// Write transitions in the fixed CSV layout.
pub fn write_transitions_csv<W: Write>(mut w: W, transitions: &[Transition]) -> Result<()> {
    writeln!(w, "{TRANSITION_CSV_HEADER}")?;
    for t in transitions {
        writeln!(
            w,
            "{},{},{},{},{:.6},{:.9e},{:.9e},{}",
            t.orientation, t.n13c, t.from, t.to, t.frequency, t.rabi, t.amplitude, t.delta_ms
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spin::{assemble_hamiltonian, HamiltonianTerms};
    use approx::assert_relative_eq;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn diagonal_input() {
        let h = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![c(3.0), c(1.0), c(2.0)]));
        let eig = diagonalize(&h).unwrap();
        assert_eq!(eig.energies.len(), 3);
        for (got, want) in eig.energies.iter().zip([1.0, 2.0, 3.0]) {
            assert_relative_eq!(*got, want, epsilon = 1e-14);
        }
        // |U| is a permutation matrix; with ascending order it maps to e_1, e_2, e_0
        for (col, row) in [(0, 1), (1, 2), (2, 0)] {
            assert_relative_eq!(eig.states[(row, col)].norm(), 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn non_hermitian_rejected_with_norm() {
        let mut h = CMatrix::identity(3, 3);
        h[(0, 1)] = c(1.0);
        match diagonalize(&h) {
            Err(Error::NotHermitian { deviation, .. }) => assert_relative_eq!(deviation, 2f64.sqrt()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_field_zfs_only() {
        let consts = PhysicalConstants::without_nitrogen();
        let h = assemble_hamiltonian(&SpinSystemConfig::default(), &consts).unwrap();
        let eig = diagonalize(&h).unwrap();
        let want = [0.0, 0.0, 0.0, 2870.0, 2870.0, 2870.0, 2870.0, 2870.0, 2870.0];
        for (g, w) in eig.energies.iter().zip(want) {
            assert!((g - w).abs() < 1e-9);
        }
    }

    #[test]
    fn axial_field_zeeman_levels() {
        let consts = PhysicalConstants::without_nitrogen();
        let cfg = SpinSystemConfig { b_mag: 100.0, ..Default::default() };
        let eig = diagonalize(&assemble_hamiltonian(&cfg, &consts).unwrap()).unwrap();
        for k in 0..3 {
            assert!(eig.energies[k].abs() < 1e-9);
            assert!((eig.energies[3 + k] - 2590.0).abs() < 1e-9);
            assert!((eig.energies[6 + k] - 3150.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mw_operator_axial_and_eq19_forms() {
        let consts = PhysicalConstants::default();
        let space = SpinSpace::new(1).unwrap();
        let axial = mw_coupling_operator(0.0, 0.0, 1.0, 1, &consts).unwrap();
        let want = space.on_electron(&space.electron.sz) * c(-2.8);
        assert!((axial - want).norm() < 1e-12);

        let half_pi = std::f64::consts::FRAC_PI_2;
        let y = mw_coupling_operator(half_pi, half_pi, 1.0, 1, &consts).unwrap();
        // -gamma_e b (S_y sin phi + S_z cos phi) with phi = 90 degrees
        let eq19 = space.on_electron(&space.electron.sy) * c(-2.8);
        assert!((y - eq19).norm() < 1e-12);

        let tilted = mw_coupling_operator(0.3, half_pi, 1.0, 1, &consts).unwrap();
        let eq19 = (space.on_electron(&space.electron.sy) * c(0.3f64.sin())
            + space.on_electron(&space.electron.sz) * c(0.3f64.cos()))
            * c(-2.8);
        assert!((tilted - eq19).norm() < 1e-12);
    }

    #[test]
    fn saturation_limits() {
        assert_eq!(saturation_amplitude(0.0, 1.0), 0.0);
        assert_relative_eq!(saturation_amplitude(f64::INFINITY, 1.0), 1.0);
        assert_relative_eq!(saturation_amplitude(1e12, 1.0), 1.0, epsilon = 1e-9);
        let a = saturation_amplitude(1.0, 1.0);
        assert_relative_eq!(a, 1.0 - (std::f64::consts::FRAC_PI_4).cos());
    }

    #[test]
    fn zfs_selection_rule() {
        let consts = PhysicalConstants::without_nitrogen();
        let cfg = SpinSystemConfig::default();
        let (_, table) = transitions_for(&cfg, &consts, 1.0, &TransitionOptions::default()).unwrap();
        assert!(!table.is_empty());
        for t in &table {
            assert!((t.frequency - 2870.0).abs() < 1e-9, "{t:?}");
            assert_eq!(t.delta_ms, 1);
        }
    }

    #[test]
    fn table_dimension_mismatch() {
        let consts = PhysicalConstants::default();
        let eig = diagonalize(&assemble_hamiltonian(&SpinSystemConfig::default(), &consts).unwrap()).unwrap();
        let mw = mw_coupling_operator(1.0, 0.0, 1.0, 1, &consts).unwrap();
        assert!(matches!(transition_table(&eig, &mw, 1.0), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn rabi_scales_linearly_with_mw_amplitude() {
        let consts = PhysicalConstants::default();
        let cfg = SpinSystemConfig { n13c: 1, b_mag: 20.0, theta: 0.3, ..Default::default() };
        let (_, a) = transitions_for(&cfg, &consts, 1.0, &TransitionOptions::default()).unwrap();
        let (_, b) = transitions_for(&cfg, &consts, 2.5, &TransitionOptions::default()).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.frequency, y.frequency);
            assert_relative_eq!(y.rabi, 2.5 * x.rabi, max_relative = 1e-10);
        }
    }

    #[test]
    fn sensitivity_zero_at_origin_for_symmetric_pair() {
        let consts = PhysicalConstants::without_nitrogen();
        let cfg = SpinSystemConfig::default();
        // the ms = 0 -> +1 and 0 -> -1 lines move oppositely; the derivative of
        // either at exactly B = 0 from a symmetric stencil is +-gamma_e, and the
        // average over the degenerate pair vanishes
        let terms = HamiltonianTerms::new(0, &consts).unwrap();
        let mw = mw_coupling_for(&cfg, 1.0, &consts).unwrap();
        let all = transition_sensitivities(&terms, &cfg, &mw, &TransitionOptions::default(), 0.1).unwrap();
        let total: f64 = all.iter().map(|(_, d)| d.unwrap()).sum();
        assert!(total.abs() < 1e-6, "{total}");
    }

    #[test]
    fn sensitivity_rejects_bad_step() {
        let consts = PhysicalConstants::default();
        let cfg = SpinSystemConfig::default();
        assert!(
            field_sensitivity(&cfg, &consts, TransitionSelector::Nearest { frequency: 2870.0 }, 0.0).is_err()
        );
    }

    #[test]
    fn csv_layout() {
        let t = Transition {
            frequency: 2870.5,
            rabi: 1.5,
            amplitude: 0.25,
            delta_ms: 1,
            from: 0,
            to: 3,
            n13c: 0,
            orientation: 2,
        };
        let mut buf = Vec::new();
        write_transitions_csv(&mut buf, &[t]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), TRANSITION_CSV_HEADER);
        assert!(lines.next().unwrap().starts_with("2,0,0,3,2870.500000,"));
    }
}
