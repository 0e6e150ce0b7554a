//! Physical constants of the NV ground state and the auxiliary calibrations.
//!
//! Energies are in MHz, fields in gauss. Every value can be overridden through
//! serde; missing keys fall back to the defaults below.

use serde::{Deserialize, Serialize};

/// Rotation taking the principal frame of the nearest-shell 13C hyperfine tensor
/// into the NV frame for the first carbon site.
pub const CARBON_SITE_ROTATION: [[f64; 3]; 3] =
    [[1.0, 0.0, 0.0], [0.0, -0.2742, 0.9617], [0.0, -0.9617, -0.2742]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicalConstants {
    /// Zero-field splitting D (MHz).
    pub zfs: f64,
    /// Electron gyromagnetic ratio (MHz/G).
    pub gamma_e: f64,
    /// 14N gyromagnetic ratio (MHz/G).
    pub gamma_n: f64,
    /// Axial 14N hyperfine constant (MHz).
    pub a_n_par: f64,
    /// Transverse 14N hyperfine constant (MHz).
    pub a_n_perp: f64,
    /// 14N quadrupole constant (MHz).
    pub quadrupole: f64,
    /// Principal values of the nearest-shell 13C hyperfine tensor (MHz).
    pub a13c: [f64; 3],
    /// Longitudinal coupling of the six closer bath sites (MHz).
    pub bath_azz_near: f64,
    pub bath_near_sites: usize,
    /// Longitudinal coupling of the three further bath sites (MHz).
    pub bath_azz_far: f64,
    pub bath_far_sites: usize,
    /// Raman line position vs 13C fraction: nu = c0 - c1 p - c2 p^2 (cm^-1).
    pub raman_coeffs: [f64; 3],
    /// GPa of strain per cm^-1 of Raman shift.
    pub strain_raman_gpa: f64,
    /// Zero-phonon-line shift per GPa (meV/GPa).
    pub zpl_strain_mev: f64,
    /// Donor nitrogen per unit IR absorption (ppm per cm^-1).
    pub ir_nitrogen_ppm: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self {
            zfs: 2870.0,
            gamma_e: 2.8,
            gamma_n: 1.1e-3,
            a_n_par: -2.15,
            a_n_perp: -2.6,
            quadrupole: -4.95,
            a13c: [123.3, 123.3, 204.9],
            bath_azz_near: 13.7,
            bath_near_sites: 6,
            bath_azz_far: 12.8,
            bath_far_sites: 3,
            raman_coeffs: [1332.8, 34.77, 16.98],
            strain_raman_gpa: 0.34,
            zpl_strain_mev: 5.75,
            ir_nitrogen_ppm: 25.0,
        }
    }
}

impl PhysicalConstants {
    /// Same constants with every 14N term (Zeeman, quadrupole, hyperfine) switched off.
    pub fn without_nitrogen() -> Self {
        Self { gamma_n: 0.0, a_n_par: 0.0, a_n_perp: 0.0, quadrupole: 0.0, ..Self::default() }
    }
}
