//! Closed-form calculators: Raman shift and 13C fraction, strain from the ZPL
//! shift, donor nitrogen from IR absorption, ODMR contrast.

use serde::{Deserialize, Serialize};

use crate::constants::PhysicalConstants;
use crate::error::{invalid, Error, Result};

/// Raman line positions outside this window are rejected as implausible.
pub const RAMAN_WINDOW: (f64, f64) = (1200.0, 1400.0);

/// Strain corrections larger than this fraction of the isotopic shift are flagged.
pub const STRAIN_WARNING_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RamanMeasurement {
    /// Measured line position (cm^-1).
    pub nu: f64,
    /// Hydrostatic strain (GPa).
    pub strain_gpa: f64,
    /// Instrument offset (cm^-1), added to the strain-corrected line.
    pub systematic_shift: f64,
}

impl RamanMeasurement {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu > RAMAN_WINDOW.0 && self.nu < RAMAN_WINDOW.1) {
            return Err(invalid(
                "shift",
                format!("{} cm^-1 outside ({}, {})", self.nu, RAMAN_WINDOW.0, RAMAN_WINDOW.1),
            ));
        }
        if !(self.strain_gpa >= 0.0) || !self.strain_gpa.is_finite() {
            return Err(invalid("strain_gpa", "must be finite and >= 0"));
        }
        if !self.systematic_shift.is_finite() {
            return Err(Error::NonFinite("systematic_shift"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RamanConcentration {
    pub p: f64,
    /// Line position with strain and instrument offsets removed (cm^-1).
    pub corrected_shift: f64,
    /// The strain term P / (GPa per cm^-1) that was added (cm^-1).
    pub strain_correction: f64,
    /// dp / d(nu_corrected) at the solution (per cm^-1).
    pub sensitivity: f64,
    /// Set when the strain correction exceeds a quarter of the isotopic shift.
    pub strain_dominated: bool,
}

impl RamanConcentration {
    /// One-sigma uncertainty on p from independent line and strain errors.
    pub fn uncertainty(&self, sigma_nu: f64, sigma_strain_gpa: f64, c: &PhysicalConstants) -> f64 {
        let s_strain = sigma_strain_gpa / c.strain_raman_gpa;
        self.sensitivity * sigma_nu.hypot(s_strain)
    }
}

/// Invert `nu0 - a p - b p^2 = nu_corrected` for p in [0, 1].
pub fn raman_to_concentration(m: &RamanMeasurement, c: &PhysicalConstants) -> Result<RamanConcentration> {
    m.validate()?;
    let [nu0, a, b] = c.raman_coeffs;
    let strain_correction = m.strain_gpa / c.strain_raman_gpa;
    let corrected = m.nu + strain_correction + m.systematic_shift;
    let shift = nu0 - corrected;
    let disc = a * a + 4.0 * b * shift;
    if disc < 0.0 {
        return Err(Error::NoRamanRoot { corrected });
    }
    // numerically stable form of (-a + sqrt(disc)) / 2b
    let p = 2.0 * shift / (a + disc.sqrt());
    const SLACK: f64 = 1e-12;
    if !(-SLACK..=1.0 + SLACK).contains(&p) {
        return Err(Error::NoRamanRoot { corrected });
    }
    let p = p.clamp(0.0, 1.0);
    Ok(RamanConcentration {
        p,
        corrected_shift: corrected,
        strain_correction,
        sensitivity: 1.0 / (a + 2.0 * b * p),
        strain_dominated: strain_correction > STRAIN_WARNING_FRACTION * shift.abs(),
    })
}

/// Line position expected for fraction `p` under the given strain and offset.
pub fn concentration_to_raman(
    p: f64,
    strain_gpa: f64,
    systematic_shift: f64,
    c: &PhysicalConstants,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid("p", format!("13C fraction {p} outside [0, 1]")));
    }
    if !(strain_gpa >= 0.0) || !strain_gpa.is_finite() {
        return Err(invalid("strain_gpa", "must be finite and >= 0"));
    }
    let [nu0, a, b] = c.raman_coeffs;
    Ok(nu0 - a * p - b * p * p - strain_gpa / c.strain_raman_gpa - systematic_shift)
}

/// Hydrostatic strain (GPa) from the zero-phonon line shift (meV).
pub fn strain_from_zpl(zpl_shift_mev: f64, c: &PhysicalConstants) -> Result<f64> {
    if !(zpl_shift_mev >= 0.0) || !zpl_shift_mev.is_finite() {
        return Err(invalid("zpl_shift_mev", "must be finite and >= 0"));
    }
    Ok(zpl_shift_mev / c.zpl_strain_mev)
}

/// Donor nitrogen (ppm) from the 1130 cm^-1 absorption coefficient (cm^-1).
pub fn nitrogen_from_ir(mu: f64, c: &PhysicalConstants) -> Result<f64> {
    if !(mu >= 0.0) || !mu.is_finite() {
        return Err(invalid("mu", "must be finite and >= 0"));
    }
    Ok(c.ir_nitrogen_ppm * mu)
}

/// Contrast in percent, `(S - R) / (S + R) * 100`.
pub fn odmr_contrast(signal: f64, reference: f64) -> Result<f64> {
    if !signal.is_finite() || !reference.is_finite() {
        return Err(Error::NonFinite("contrast input"));
    }
    let sum = signal + reference;
    if !(sum > 0.0) {
        return Err(Error::ContrastDenominator(sum));
    }
    Ok((signal - reference) / sum * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn c() -> PhysicalConstants {
        PhysicalConstants::default()
    }

    #[test]
    fn unshifted_line_is_natural_free() {
        let m = RamanMeasurement { nu: 1332.8, strain_gpa: 0.0, systematic_shift: 0.0 };
        let r = raman_to_concentration(&m, &c()).unwrap();
        assert_eq!(r.p, 0.0);
        assert!(!r.strain_dominated);
    }

    #[test]
    fn forward_low_fraction() {
        let nu = concentration_to_raman(0.011, 0.0, 0.0, &c()).unwrap();
        assert_relative_eq!(nu, 1332.8 - 34.77 * 0.011 - 16.98 * 0.011 * 0.011, epsilon = 1e-12);
    }

    #[test]
    fn rejects_out_of_window_and_rootless() {
        let base = RamanMeasurement { nu: 1320.0, strain_gpa: 0.0, systematic_shift: 0.0 };
        assert!(raman_to_concentration(&RamanMeasurement { nu: 1100.0, ..base }, &c()).is_err());
        assert!(raman_to_concentration(&RamanMeasurement { strain_gpa: -1.0, ..base }, &c()).is_err());
        // above nu0: negative root only
        assert!(matches!(
            raman_to_concentration(&RamanMeasurement { nu: 1335.0, ..base }, &c()),
            Err(Error::NoRamanRoot { .. })
        ));
        // far below the p = 1 line
        assert!(matches!(
            raman_to_concentration(&RamanMeasurement { nu: 1250.0, ..base }, &c()),
            Err(Error::NoRamanRoot { .. })
        ));
    }

    #[test]
    fn strain_warning() {
        let m = RamanMeasurement { nu: 1331.0, strain_gpa: 0.5, systematic_shift: 0.0 };
        assert!(raman_to_concentration(&m, &c()).unwrap().strain_dominated);
    }

    #[test]
    fn zpl_and_ir() {
        assert_eq!(strain_from_zpl(0.0, &c()).unwrap(), 0.0);
        assert!(strain_from_zpl(-0.1, &c()).is_err());
        assert_eq!(nitrogen_from_ir(1.0, &c()).unwrap(), 25.0);
        assert_eq!(nitrogen_from_ir(0.0, &c()).unwrap(), 0.0);
        assert!(nitrogen_from_ir(-1.0, &c()).is_err());
    }

    #[test]
    fn contrast_cases() {
        assert_eq!(odmr_contrast(1.0, 1.0).unwrap(), 0.0);
        assert_eq!(odmr_contrast(0.0, 2.0).unwrap(), -100.0);
        assert_relative_eq!(odmr_contrast(0.98, 1.0).unwrap(), -0.02 / 1.98 * 100.0, epsilon = 1e-12);
        assert!(matches!(odmr_contrast(0.0, 0.0), Err(Error::ContrastDenominator(_))));
        assert!(odmr_contrast(-2.0, 1.0).is_err());
    }

    #[test]
    fn uncertainty_propagation() {
        let m = RamanMeasurement { nu: 1320.3, strain_gpa: 0.45, systematic_shift: 0.4 };
        let r = raman_to_concentration(&m, &c()).unwrap();
        // finite-difference slope against the analytic sensitivity
        let h = 1e-4;
        let up = raman_to_concentration(&RamanMeasurement { nu: m.nu - h, ..m }, &c()).unwrap().p;
        let dn = raman_to_concentration(&RamanMeasurement { nu: m.nu + h, ..m }, &c()).unwrap().p;
        assert_relative_eq!((up - dn) / (2.0 * h), r.sensitivity, max_relative = 1e-6);
        let u = r.uncertainty(0.0, 0.05, &c());
        assert_relative_eq!(u, r.sensitivity * 0.05 / 0.34, max_relative = 1e-12);
    }
}
