//! Fixtures shared by the benchmarks.

use std::f64::consts::FRAC_PI_2;

use odmr13c_core::fitting::ModelPoint;
use odmr13c_core::spectrum::{uniform_grid, SpectrumCurve};

/// Aligned 200 G ensemble at the given 13C fraction.
pub fn reference_point(p: f64) -> ModelPoint {
    ModelPoint {
        ex: 0.0,
        ey: 0.0,
        d_prime: 2870.0,
        b_mag: 200.0,
        theta: 0.0,
        phi: 0.0,
        xi: FRAC_PI_2,
        zeta: 0.0,
        alpha: 1.0,
        level: 0.0,
        scale: 1.0,
        sigma0: 1.0,
        sigma_b: 5.0,
        p,
    }
}

/// The lower resonance group of the aligned orientation.
pub fn fit_window() -> Vec<f64> {
    uniform_grid(2120.0, 2520.0, 0.2).expect("valid grid")
}

/// Deterministic pseudo-noise so the benchmarks need no RNG.
pub fn with_ripple(curve: &SpectrumCurve, amplitude: f64) -> SpectrumCurve {
    let values = curve
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| v + amplitude * ((i as f64 * 12.9898).sin() * 43758.5453).fract())
        .collect();
    SpectrumCurve::new(curve.freqs.clone(), values).expect("same grid")
}
