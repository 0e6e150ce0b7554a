//! Independent reference implementations, generators and property checks shared
//! by the integration targets.
#![allow(dead_code)]

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use odmr13c_core::spectrum::{
    binomial_weights, synthesize_spectrum, LineGroup, LineShape, LineShapeParams, SpectrumCurve,
    SynthesisOptions, TransitionSet,
};
use odmr13c_core::spin::{hermitian_deviation, HamiltonianTerms, SpinSpace};
use odmr13c_core::transitions::{
    coupling_in_eigenbasis, diagonalize, mw_coupling_for, transition_sensitivities, transition_table_with,
    transitions_for, EigenSystem, Transition, TransitionOptions,
};
use odmr13c_core::{assemble_hamiltonian, CMatrix, PhysicalConstants, SpinSystemConfig};

// ---------------------------------------------------------------------------
// Hamiltonian built element by element from ladder operators on product kets.

#[derive(Clone, Copy)]
enum Axis {
    X,
    Y,
    Z,
}

const AXES: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

/// Apply one Cartesian component of a spin (twice-spin `s2`) to the ket with
/// twice-projection `m2`; returns `(new m2, amplitude)` pairs.
fn apply(axis: Axis, s2: i32, m2: i32) -> Vec<(i32, Complex64)> {
    let s = s2 as f64 / 2.0;
    let m = m2 as f64 / 2.0;
    let raise = if m2 < s2 { (s * (s + 1.0) - m * (m + 1.0)).sqrt() } else { 0.0 };
    let lower = if m2 > -s2 { (s * (s + 1.0) - m * (m - 1.0)).sqrt() } else { 0.0 };
    let half = Complex64::new(0.5, 0.0);
    let mut out = Vec::new();
    match axis {
        Axis::Z => out.push((m2, Complex64::new(m, 0.0))),
        Axis::X => {
            if raise != 0.0 {
                out.push((m2 + 2, half * raise));
            }
            if lower != 0.0 {
                out.push((m2 - 2, half * lower));
            }
        }
        Axis::Y => {
            // S_y = (S+ - S-) / 2i
            if raise != 0.0 {
                out.push((m2 + 2, Complex64::new(0.0, -0.5 * raise)));
            }
            if lower != 0.0 {
                out.push((m2 - 2, Complex64::new(0.0, 0.5 * lower)));
            }
        }
    }
    out
}

struct Ket {
    spins2: Vec<i32>,
}

impl Ket {
    fn new(n13c: usize) -> Self {
        let mut spins2 = vec![2, 2];
        spins2.extend(std::iter::repeat_n(1, n13c));
        Self { spins2 }
    }

    fn dim(&self) -> usize {
        self.spins2.iter().map(|&s| (s + 1) as usize).product()
    }

    /// Projections (doubled) of basis state `b`, largest projection first per factor.
    fn labels(&self, mut b: usize) -> Vec<i32> {
        let mut out = vec![0; self.spins2.len()];
        for (k, &s2) in self.spins2.iter().enumerate().rev() {
            let d = (s2 + 1) as usize;
            out[k] = s2 - 2 * (b % d) as i32;
            b /= d;
        }
        out
    }

    fn index(&self, labels: &[i32]) -> usize {
        labels
            .iter()
            .zip(&self.spins2)
            .fold(0, |acc, (&m2, &s2)| acc * (s2 + 1) as usize + ((s2 - m2) / 2) as usize)
    }
}

/// `sum coeff * prod ops` where each op is `(particle, axis)`, applied right to left.
fn add_term(h: &mut CMatrix, ket: &Ket, coeff: f64, ops: &[(usize, Axis)]) {
    if coeff == 0.0 {
        return;
    }
    for b in 0..ket.dim() {
        let mut states = vec![(ket.labels(b), Complex64::new(coeff, 0.0))];
        for &(particle, axis) in ops.iter().rev() {
            let mut next = Vec::new();
            for (labels, amp) in states {
                for (m2, a) in apply(axis, ket.spins2[particle], labels[particle]) {
                    let mut l = labels.clone();
                    l[particle] = m2;
                    next.push((l, amp * a));
                }
            }
            states = next;
        }
        for (labels, amp) in states {
            h[(ket.index(&labels), b)] += amp;
        }
    }
}

/// Nearest-shell tensor of `site` from the printed rotation (rows normalized)
/// and a rotation by `site * 120` degrees about the NV axis.
pub fn oracle_site_tensor(site: usize, c: &PhysicalConstants) -> Matrix3<f64> {
    let mut r0 = Matrix3::new(1.0, 0.0, 0.0, 0.0, -0.2742, 0.9617, 0.0, -0.9617, -0.2742);
    for i in 0..3 {
        let n = r0.row(i).norm();
        r0.row_mut(i).scale_mut(1.0 / n);
    }
    let a = site as f64 * TAU / 3.0;
    let rz = Matrix3::new(a.cos(), -a.sin(), 0.0, a.sin(), a.cos(), 0.0, 0.0, 0.0, 1.0);
    let r = rz * r0;
    r * Matrix3::from_diagonal(&Vector3::from(c.a13c)) * r.transpose()
}

/// Ground-state Hamiltonian for an NV-frame field, carbons on `sites`.
pub fn oracle_hamiltonian(
    sites: &[usize],
    d_prime: f64,
    ex: f64,
    ey: f64,
    b_nv: &Vector3<f64>,
    c: &PhysicalConstants,
) -> CMatrix {
    let ket = Ket::new(sites.len());
    let n = ket.dim();
    let mut h = CMatrix::zeros(n, n);
    use Axis::*;
    add_term(&mut h, &ket, d_prime, &[(0, Z), (0, Z)]);
    add_term(&mut h, &ket, ex, &[(0, Y), (0, Y)]);
    add_term(&mut h, &ket, -ex, &[(0, X), (0, X)]);
    add_term(&mut h, &ket, ey, &[(0, X), (0, Y)]);
    add_term(&mut h, &ket, ey, &[(0, Y), (0, X)]);
    for (k, axis) in AXES.into_iter().enumerate() {
        add_term(&mut h, &ket, c.gamma_e * b_nv[k], &[(0, axis)]);
        add_term(&mut h, &ket, -c.gamma_n * b_nv[k], &[(1, axis)]);
    }
    add_term(&mut h, &ket, c.quadrupole, &[(1, Z), (1, Z)]);
    add_term(&mut h, &ket, c.a_n_par, &[(0, Z), (1, Z)]);
    add_term(&mut h, &ket, c.a_n_perp, &[(0, X), (1, X)]);
    add_term(&mut h, &ket, c.a_n_perp, &[(0, Y), (1, Y)]);
    for (slot, &site) in sites.iter().enumerate() {
        let t = oracle_site_tensor(site, c);
        for (a, sa) in AXES.into_iter().enumerate() {
            for (b, ib) in AXES.into_iter().enumerate() {
                add_term(&mut h, &ket, t[(a, b)], &[(0, sa), (2 + slot, ib)]);
            }
        }
    }
    h
}

pub fn max_abs_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Line identification helpers.

/// The n13c = 1 transition |0, 0, down> -> |+1, 0, down>, by dominant basis labels.
pub fn carbon_down_plus_one(eig: &EigenSystem, table: &[Transition]) -> Option<Transition> {
    let space = SpinSpace::new(1).ok()?;
    let label = |k: usize| space.basis_label(eig.dominant_component(k).0);
    table
        .iter()
        .filter(|t| {
            let (a, b) = (label(t.from), label(t.to));
            a.ms == 0 && a.mi == 0 && a.carbons == [-1] && b.ms == 1 && b.mi == 0 && b.carbons == [-1]
        })
        .max_by(|a, b| a.rabi.total_cmp(&b.rabi))
        .cloned()
}

/// Strongest n13c = 2 line in `window` whose |df/dB| is below `threshold`,
/// with its sensitivity, for a field of `b` gauss along the NV axis.
pub fn insensitive_pair_line(
    b: f64,
    window: (f64, f64),
    threshold: f64,
    c: &PhysicalConstants,
) -> Option<(Transition, f64)> {
    let cfg = SpinSystemConfig { b_mag: b, n13c: 2, ..Default::default() };
    let terms = HamiltonianTerms::new(2, c).ok()?;
    let mw = mw_coupling_for(&cfg, 1.0, c).ok()?;
    let sens = transition_sensitivities(&terms, &cfg, &mw, &TransitionOptions::default(), 0.1).ok()?;
    let top = sens.iter().map(|s| s.0.rabi).fold(0.0, f64::max);
    sens.into_iter()
        .filter_map(|(t, d)| d.map(|d| (t, d)))
        .filter(|(t, d)| {
            t.frequency >= window.0 && t.frequency <= window.1 && d.abs() < threshold && t.rabi >= 0.3 * top
        })
        .max_by(|a, b| a.0.rabi.total_cmp(&b.0.rabi))
}

// ---------------------------------------------------------------------------
// Generators.

pub fn spin_config() -> impl Strategy<Value = SpinSystemConfig> {
    (
        0.0..300.0f64,
        0.0..PI,
        0.0..TAU,
        -20.0..20.0f64,
        -20.0..20.0f64,
        2850.0..2890.0f64,
        0usize..=3,
        0.0..PI,
        0.0..TAU,
        0usize..4,
    )
        .prop_map(|(b_mag, theta, phi, ex, ey, d_prime, n13c, xi, zeta, orientation)| SpinSystemConfig {
            b_mag,
            theta,
            phi,
            ex,
            ey,
            d_prime,
            n13c,
            xi,
            zeta,
            orientation,
        })
}

/// Same as [`spin_config`] with at most two carbons (cheaper diagonalization).
pub fn small_spin_config() -> impl Strategy<Value = SpinSystemConfig> {
    (spin_config(), 0usize..=2).prop_map(|(mut c, n)| {
        c.n13c = n;
        c
    })
}

pub fn hermitian_matrix(max_dim: usize) -> impl Strategy<Value = CMatrix> {
    (1..=max_dim).prop_flat_map(|n| {
        prop::collection::vec((-100.0..100.0f64, -100.0..100.0f64), n * n).prop_map(move |v| {
            let a = CMatrix::from_iterator(n, n, v.into_iter().map(|(r, i)| Complex64::new(r, i)));
            (&a + a.adjoint()) * Complex64::new(0.5, 0.0)
        })
    })
}

fn line() -> impl Strategy<Value = Transition> {
    (2700.0..3050.0f64, 0.0..2.0f64, 0u8..=2).prop_map(|(frequency, rabi, delta_ms)| Transition {
        frequency,
        rabi,
        amplitude: 0.0,
        delta_ms,
        from: 0,
        to: 1,
        n13c: 0,
        orientation: 0,
    })
}

/// Random line tables for one orientation and n13c = 0, 1, 2.
pub fn line_set() -> impl Strategy<Value = TransitionSet> {
    prop::collection::vec((prop::collection::vec(line(), 1..12), prop::collection::vec(any::<bool>(), 12)), 3)
        .prop_map(|groups| {
            let mut set = TransitionSet::new();
            for (n, (lines, flags)) in groups.into_iter().enumerate() {
                let mut g = LineGroup::new(1.0, lines);
                for (slot, f) in g.narrow.iter_mut().zip(flags) {
                    *slot = f;
                }
                set.insert(0, n, g);
            }
            set
        })
}

pub fn line_shape() -> impl Strategy<Value = LineShapeParams> {
    (
        0.2..5.0f64,
        0.0..5.0f64,
        -1.0..1.0f64,
        -2.0..2.0f64,
        prop_oneof![Just(LineShape::Gaussian), Just(LineShape::GaussianStd), Just(LineShape::Lorentzian)],
    )
        .prop_map(|(sigma0, sigma_b, level, scale, shape)| LineShapeParams {
            sigma0,
            sigma_b,
            level,
            scale,
            shape,
        })
}

pub fn spectrum_curve() -> impl Strategy<Value = SpectrumCurve> {
    (
        -1e4..1e4f64,
        prop::collection::vec((1e-6..50.0f64, prop::num::f64::NORMAL | prop::num::f64::ZERO), 1..200),
    )
        .prop_map(|(start, steps)| {
            let mut f = start;
            let mut freqs = Vec::with_capacity(steps.len());
            let mut values = Vec::with_capacity(steps.len());
            for (step, v) in steps {
                freqs.push(f);
                values.push(v);
                f += step;
            }
            SpectrumCurve { freqs, values }
        })
        .prop_filter("strictly increasing grid", |c| c.freqs.windows(2).all(|w| w[1] > w[0]))
}

// ---------------------------------------------------------------------------
// Property checks, shared by the proptest suites and the acceptance run.

type Check = Result<(), TestCaseError>;

fn fail(e: impl std::fmt::Display) -> TestCaseError {
    TestCaseError::fail(e.to_string())
}

pub fn check_hermitian(cfg: &SpinSystemConfig) -> Check {
    let c = PhysicalConstants::default();
    let h = assemble_hamiltonian(cfg, &c).map_err(fail)?;
    prop_assert_eq!(h.nrows(), 9 << cfg.n13c);
    let dev = hermitian_deviation(&h);
    prop_assert!(dev < 1e-10 * h.norm(), "|H - H^dagger| = {dev:e}");
    Ok(())
}

pub fn check_eigensystem(h: &CMatrix) -> Check {
    let eig = diagonalize(h).map_err(fail)?;
    let norm = h.norm().max(1e-300);
    prop_assert!(eig.energies.windows(2).all(|w| w[0] <= w[1]));
    for k in 0..eig.dim() {
        let v = eig.states.column(k);
        let r = (h * v - v * Complex64::new(eig.energies[k], 0.0)).norm();
        prop_assert!(r < 1e-9 * norm, "residual {r:e} for state {k}");
    }
    let n = eig.dim();
    let gram = eig.states.adjoint() * &eig.states;
    let err = max_abs_diff(&gram, &CMatrix::identity(n, n));
    prop_assert!(err < 1e-10, "unitarity error {err:e}");
    let rebuilt = &eig.states
        * CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            n,
            eig.energies.iter().map(|&e| Complex64::new(e, 0.0)),
        ))
        * eig.states.adjoint();
    let err = max_abs_diff(&rebuilt, h);
    prop_assert!(err < 1e-9 * norm.max(1.0), "reconstruction error {err:e}");
    Ok(())
}

pub fn check_config_eigensystem(cfg: &SpinSystemConfig) -> Check {
    let h = assemble_hamiltonian(cfg, &PhysicalConstants::default()).map_err(fail)?;
    check_eigensystem(&h)
}

pub fn check_sum_rule(cfg: &SpinSystemConfig, b_mw: f64) -> Check {
    let c = PhysicalConstants::default();
    let eig = diagonalize(&assemble_hamiltonian(cfg, &c).map_err(fail)?).map_err(fail)?;
    let mw = mw_coupling_for(cfg, b_mw, &c).map_err(fail)?;
    let m = coupling_in_eigenbasis(&eig, &mw).map_err(fail)?;
    let m2 = eig.states.adjoint() * (&mw * &mw) * &eig.states;
    for i in 0..eig.dim() {
        let row: f64 = (0..eig.dim()).map(|k| m[(i, k)].norm_sqr()).sum();
        let want = m2[(i, i)].re;
        prop_assert!((row - want).abs() <= 1e-9 * want.abs().max(1.0), "state {i}: {row} vs {want}");
        for k in 0..eig.dim() {
            // Hermitian coupling: i -> k and k -> i have the same strength
            prop_assert!((m[(i, k)].norm() - m[(k, i)].norm()).abs() < 1e-9 * b_mw.max(1.0));
        }
    }
    Ok(())
}

pub fn check_rabi_linearity(cfg: &SpinSystemConfig, factor: f64) -> Check {
    let c = PhysicalConstants::default();
    let opts = TransitionOptions::default();
    let (eig, base) = transitions_for(cfg, &c, 1.0, &opts).map_err(fail)?;
    let mw = mw_coupling_for(cfg, factor, &c).map_err(fail)?;
    let scaled = transition_table_with(&eig, &mw, &opts).map_err(fail)?;
    prop_assert_eq!(base.len(), scaled.len());
    for (a, b) in base.iter().zip(&scaled) {
        prop_assert_eq!((a.from, a.to), (b.from, b.to));
        prop_assert_eq!(a.frequency, b.frequency);
        prop_assert!((b.rabi - factor * a.rabi).abs() <= 1e-12 * factor * a.rabi.max(1.0));
        prop_assert!((0.0..=2.0).contains(&b.amplitude));
    }
    Ok(())
}

pub fn check_spectrum_linearity(set: &TransitionSet, lines: &LineShapeParams, p: f64, factor: f64) -> Check {
    let grid: Vec<f64> = (0..300).map(|i| 2650.0 + 1.5 * i as f64).collect();
    let w = binomial_weights(p).map_err(fail)?;
    let opts = SynthesisOptions { orientations: vec![0], ..Default::default() };
    let bath = odmr13c_core::bath_shift_distribution(
        p,
        &odmr13c_core::spectrum::BathSites::from_constants(&PhysicalConstants::default()),
    )
    .map_err(fail)?;
    let base = synthesize_spectrum(set, &w, lines, Some(&bath), &grid, &opts).map_err(fail)?;
    let scaled_lines = LineShapeParams { scale: factor * lines.scale, ..*lines };
    let scaled = synthesize_spectrum(set, &w, &scaled_lines, Some(&bath), &grid, &opts).map_err(fail)?;
    let peak = base.values.iter().map(|v| (v - lines.level).abs()).fold(0.0, f64::max);
    for (s, b) in scaled.values.iter().zip(&base.values) {
        let want = lines.level + factor * (b - lines.level);
        prop_assert!((s - want).abs() <= 1e-12 * (factor.abs() * peak).max(1.0), "{s} vs {want}");
    }
    Ok(())
}

pub fn check_csv_round_trip(curve: &SpectrumCurve) -> Check {
    let mut first = Vec::new();
    curve.write_csv(&mut first).map_err(fail)?;
    let back = SpectrumCurve::read_csv(first.as_slice()).map_err(fail)?;
    prop_assert_eq!(&back, curve);
    let mut second = Vec::new();
    back.write_csv(&mut second).map_err(fail)?;
    prop_assert_eq!(first, second);
    Ok(())
}
