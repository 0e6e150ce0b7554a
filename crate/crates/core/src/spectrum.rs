//! Ensemble ODMR spectra: isotopologue weighting, orientation sums, line contours
//! and longitudinal broadening by the outer 13C bath.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::constants::PhysicalConstants;
use crate::error::{invalid, Error, Result};
use crate::spin::{HamiltonianTerms, SpinSystemConfig, MAX_CARBONS};
use crate::transitions::{
    mw_coupling_for, transition_sensitivities, Transition, TransitionOptions, DEFAULT_FIELD_STEP,
};

/// Probabilities of 0..=3 nearest-shell 13C for a per-site 13C fraction `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsotopologueWeights {
    pub p: f64,
    pub probs: [f64; 4],
}

impl IsotopologueWeights {
    pub fn get(&self, n13c: usize) -> f64 {
        self.probs[n13c]
    }
}

pub fn binomial_weights(p: f64) -> Result<IsotopologueWeights> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid("p", format!("13C fraction {p} outside [0, 1]")));
    }
    let q = 1.0 - p;
    Ok(IsotopologueWeights { p, probs: [q * q * q, 3.0 * p * q * q, 3.0 * p * p * q, p * p * p] })
}

/// Groups of equivalent outer bath sites as `(A_zz in MHz, site count)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BathSites {
    pub groups: Vec<(f64, usize)>,
}

impl BathSites {
    pub fn from_constants(c: &PhysicalConstants) -> Self {
        Self { groups: vec![(c.bath_azz_near, c.bath_near_sites), (c.bath_azz_far, c.bath_far_sites)] }
    }

    /// The first `n` sites of the default ordering (near group first).
    pub fn first_sites(c: &PhysicalConstants, n: usize) -> Self {
        let near = n.min(c.bath_near_sites);
        let far = (n - near).min(c.bath_far_sites);
        let groups =
            [(c.bath_azz_near, near), (c.bath_azz_far, far)].into_iter().filter(|g| g.1 > 0).collect();
        Self { groups }
    }

    pub fn site_count(&self) -> usize {
        self.groups.iter().map(|g| g.1).sum()
    }

    /// Analytic variance of the shift: sum over sites of p (A_zz / 2)^2.
    pub fn shift_variance(&self, p: f64) -> f64 {
        self.groups.iter().map(|&(a, n)| n as f64 * p * (a / 2.0).powi(2)).sum()
    }
}

/// Discrete distribution of the Delta m_s = 1 line shift produced by the bath.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BathConfigurationSet {
    /// `(shift in MHz, weight)`, sorted by shift.
    pub entries: Vec<(f64, f64)>,
}

impl BathConfigurationSet {
    pub fn empty() -> Self {
        Self { entries: vec![(0.0, 1.0)] }
    }

    pub fn total_weight(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum()
    }

    pub fn mean(&self) -> f64 {
        self.entries.iter().map(|(s, w)| s * w).sum()
    }

    pub fn second_moment(&self) -> f64 {
        self.entries.iter().map(|(s, w)| s * s * w).sum()
    }

    pub fn max_abs_shift(&self) -> f64 {
        self.entries.iter().map(|e| e.0.abs()).fold(0.0, f64::max)
    }
}

/// Shifts closer than this are merged into one entry.
const BATH_LATTICE: f64 = 0.01;

/// Enumerate occupancy and spin orientation of the bath sites.
///
/// Each site is empty with probability `1 - p`, otherwise holds a spin-1/2 that
/// shifts the line by `+-A_zz / 2` with equal weight.
pub fn bath_shift_distribution(p: f64, sites: &BathSites) -> Result<BathConfigurationSet> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid("p", format!("13C fraction {p} outside [0, 1]")));
    }
    // per group: distribution over net projection j (units of A/2), j in -n..=n
    let mut merged: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
    merged.insert(0, (0.0, 1.0));
    for &(azz, count) in &sites.groups {
        let mut dist = vec![1.0f64];
        for _ in 0..count {
            let mut next = vec![0.0; dist.len() + 2];
            for (j, w) in dist.iter().enumerate() {
                next[j] += w * p / 2.0;
                next[j + 1] += w * (1.0 - p);
                next[j + 2] += w * p / 2.0;
            }
            dist = next;
        }
        let half = count as i64;
        let mut out: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
        for &(sw, weight) in merged.values() {
            let shift = sw / weight;
            for (j, &w) in dist.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let s = shift + (j as i64 - half) as f64 * azz / 2.0;
                let key = (s / BATH_LATTICE).round() as i64;
                let e = out.entry(key).or_insert((0.0, 0.0));
                // weighted mean keeps merged shifts exact
                e.0 += s * weight * w;
                e.1 += weight * w;
            }
        }
        merged = out;
    }
    let entries = merged.into_values().filter(|&(_, w)| w > 0.0).map(|(sw, w)| (sw / w, w)).collect();
    Ok(BathConfigurationSet { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LineShape {
    /// `exp(-x^2 / s^2) / (sqrt(pi) s)`, the form used by the amplitude fits.
    #[default]
    Gaussian,
    /// Standard-deviation form `exp(-x^2 / (2 s^2)) / (sqrt(2 pi) s)`.
    GaussianStd,
    /// Lorentzian with half width at half maximum `s`.
    Lorentzian,
}

impl LineShape {
    /// Unit-area profile at offset `x` for width parameter `s`.
    pub fn eval(self, x: f64, s: f64) -> f64 {
        match self {
            Self::Gaussian => (-(x / s).powi(2)).exp() / (std::f64::consts::PI.sqrt() * s),
            Self::GaussianStd => (-0.5 * (x / s).powi(2)).exp() / ((2.0 * std::f64::consts::PI).sqrt() * s),
            Self::Lorentzian => s / (std::f64::consts::PI * (x * x + s * s)),
        }
    }

    /// Derivative of [`LineShape::eval`] with respect to `x`.
    fn slope(self, x: f64, s: f64) -> f64 {
        match self {
            Self::Gaussian => -2.0 * x / (s * s) * self.eval(x, s),
            Self::GaussianStd => -x / (s * s) * self.eval(x, s),
            Self::Lorentzian => -2.0 * x * s / (std::f64::consts::PI * (x * x + s * s).powi(2)),
        }
    }

    /// Half width beyond which the profile is negligible; `None` for heavy tails.
    fn support(self, s: f64) -> Option<f64> {
        match self {
            Self::Gaussian => Some(10.0 * s),
            Self::GaussianStd => Some(14.0 * s),
            Self::Lorentzian => None,
        }
    }
}

/// Lorentzian of the given full width at half maximum, unit area.
pub fn lorentzian_fwhm(x: f64, fwhm: f64) -> f64 {
    LineShape::Lorentzian.eval(x, fwhm / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineShapeParams {
    /// Width of Delta m_s = 0 and magneto-insensitive lines (MHz).
    pub sigma0: f64,
    /// Extra width per unit of Delta m_s (MHz).
    pub sigma_b: f64,
    pub level: f64,
    pub scale: f64,
    pub shape: LineShape,
}

impl Default for LineShapeParams {
    fn default() -> Self {
        Self { sigma0: 1.0, sigma_b: 1.0, level: 0.0, scale: 1.0, shape: LineShape::Gaussian }
    }
}

impl LineShapeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 > 0.0) || !self.sigma0.is_finite() {
            return Err(invalid("sigma0", "must be positive"));
        }
        if !(self.sigma_b >= 0.0) || !self.sigma_b.is_finite() {
            return Err(invalid("sigma_b", "must be >= 0"));
        }
        if !(self.scale >= 0.0) && !(self.scale < 0.0) {
            return Err(Error::NonFinite("scale"));
        }
        if !self.level.is_finite() {
            return Err(Error::NonFinite("level"));
        }
        Ok(())
    }

    pub fn width(&self, delta_ms: u8) -> f64 {
        self.sigma0 + delta_ms as f64 * self.sigma_b
    }
}

/// T2* (us) for a Gaussian standard deviation in MHz.
pub fn t2_star_from_sigma(sigma: f64) -> f64 {
    1.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma)
}

/// A spectrum sampled on an ascending frequency grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumCurve {
    pub freqs: Vec<f64>,
    pub values: Vec<f64>,
}

pub const SPECTRUM_CSV_HEADER: &str = "frequency_mhz,value";

impl SpectrumCurve {
    pub fn new(freqs: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if freqs.len() != values.len() {
            return Err(Error::DimensionMismatch { expected: freqs.len(), actual: values.len() });
        }
        validate_grid(&freqs)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("values"));
        }
        Ok(Self { freqs, values })
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    /// Trapezoidal integral of `values - offset`.
    pub fn integral(&self, offset: f64) -> f64 {
        self.freqs
            .windows(2)
            .zip(self.values.windows(2))
            .map(|(f, v)| 0.5 * (f[1] - f[0]) * (v[0] + v[1] - 2.0 * offset))
            .sum()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{SPECTRUM_CSV_HEADER}")?;
        for (f, v) in self.freqs.iter().zip(&self.values) {
            writeln!(w, "{f},{v}")?;
        }
        Ok(())
    }

    /// Parse `frequency_mhz,value` rows; `#` comment lines, blank lines and the
    /// header are skipped. Errors carry 1-based line numbers.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut freqs = Vec::new();
        let mut values = Vec::new();
        let mut lines_of = Vec::new();
        for (idx, line) in r.lines().enumerate() {
            let lineno = idx + 1;
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            if freqs.is_empty() && t.replace(' ', "") == SPECTRUM_CSV_HEADER {
                continue;
            }
            let cols: Vec<&str> = t.split(',').map(str::trim).collect();
            if cols.len() != 2 {
                return Err(Error::Csv {
                    line: lineno,
                    reason: format!("expected 2 columns, found {}", cols.len()),
                });
            }
            let parse = |s: &str, what: &str| -> Result<f64> {
                match s.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(Error::Csv { line: lineno, reason: format!("invalid {what} `{s}`") }),
                }
            };
            freqs.push(parse(cols[0], "frequency")?);
            values.push(parse(cols[1], "value")?);
            lines_of.push(lineno);
        }
        if freqs.is_empty() {
            return Err(Error::Csv { line: 0, reason: "no data rows".into() });
        }
        for i in 1..freqs.len() {
            if !(freqs[i] > freqs[i - 1]) {
                return Err(Error::Csv {
                    line: lines_of[i],
                    reason: "frequencies must be strictly increasing".into(),
                });
            }
        }
        Self::new(freqs, values)
    }
}

pub fn validate_grid(freqs: &[f64]) -> Result<()> {
    if freqs.is_empty() {
        return Err(invalid("grid", "frequency grid is empty"));
    }
    if freqs.iter().any(|f| !f.is_finite()) {
        return Err(Error::NonFinite("grid"));
    }
    if freqs.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("grid", "frequencies must be strictly increasing"));
    }
    Ok(())
}

/// `start, start + step, ...` up to and including `stop` (within half a step).
pub fn uniform_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(stop > start) || !start.is_finite() || !stop.is_finite() {
        return Err(invalid("grid", "need step > 0 and stop > start"));
    }
    let n = ((stop - start) / step + 0.5).floor() as usize + 1;
    Ok((0..n).map(|i| start + i as f64 * step).collect())
}

/// Per-line strength used by the ensemble sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LineWeight {
    /// Squared microwave matrix element.
    #[default]
    RabiSquared,
    /// Saturation amplitude from the pump/decay ratio.
    Saturation,
}

impl LineWeight {
    fn of(self, t: &Transition) -> f64 {
        match self {
            Self::RabiSquared => t.rabi * t.rabi,
            Self::Saturation => t.amplitude,
        }
    }
}

/// Transitions of one carbon-site assignment, with its share of the isotopologue.
#[derive(Debug, Clone, PartialEq)]
pub struct LineGroup {
    pub weight: f64,
    pub transitions: Vec<Transition>,
    /// Lines rendered with the narrow Lorentzian contour.
    pub narrow: Vec<bool>,
}

impl LineGroup {
    pub fn new(weight: f64, transitions: Vec<Transition>) -> Self {
        let narrow = vec![false; transitions.len()];
        Self { weight, transitions, narrow }
    }
}

/// Transition tables keyed by `(orientation, n13c)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransitionSet {
    groups: BTreeMap<(usize, usize), Vec<LineGroup>>,
}

impl TransitionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, orientation: usize, n13c: usize, group: LineGroup) {
        self.groups.entry((orientation, n13c)).or_default().push(group);
    }

    pub fn get(&self, orientation: usize, n13c: usize) -> Option<&[LineGroup]> {
        self.groups.get(&(orientation, n13c)).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, usize), &Vec<LineGroup>)> {
        self.groups.iter()
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.groups.values().flat_map(|g| g.iter().flat_map(|lg| lg.transitions.iter()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOptions {
    pub orientations: Vec<usize>,
    pub n13c_mask: Vec<usize>,
    pub weighting: LineWeight,
    /// FWHM (MHz) of lines flagged narrow.
    pub narrow_fwhm: f64,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            orientations: vec![0, 1, 2, 3],
            n13c_mask: vec![0, 1, 2],
            weighting: LineWeight::RabiSquared,
            narrow_fwhm: 3.0,
        }
    }
}

/// Unit-area contour of one line class, optionally smeared by the bath shifts.
enum Kernel {
    Direct { shape: LineShape, width: f64 },
    Smeared { shape: LineShape, width: f64, shifts: Vec<(f64, f64)> },
    Tabulated { x0: f64, dx: f64, values: Vec<f64>, slopes: Vec<f64> },
}

impl Kernel {
    fn build(shape: LineShape, width: f64, bath: Option<&BathConfigurationSet>, scale: f64) -> Self {
        let Some(bath) = bath.filter(|b| b.entries.len() > 1 && scale > 0.0) else {
            return Self::Direct { shape, width };
        };
        let shifts: Vec<(f64, f64)> = bath.entries.iter().map(|&(s, w)| (s * scale, w)).collect();
        let Some(support) = shape.support(width) else {
            return Self::Smeared { shape, width, shifts };
        };
        let half = bath.max_abs_shift() * scale + support;
        let dx = (width / 64.0).max(2.0 * half / 200_000.0);
        let n = (2.0 * half / dx).ceil() as usize + 1;
        let x0 = -half;
        let mut values = vec![0.0; n];
        let mut slopes = vec![0.0; n];
        for i in 0..n {
            let x = x0 + i as f64 * dx;
            for &(s, w) in &shifts {
                values[i] += w * shape.eval(x - s, width);
                slopes[i] += w * shape.slope(x - s, width);
            }
        }
        Self::Tabulated { x0, dx, values, slopes }
    }

    fn support(&self) -> Option<f64> {
        match self {
            Self::Direct { shape, width } => shape.support(*width),
            Self::Smeared { .. } => None,
            Self::Tabulated { x0, .. } => Some(-x0),
        }
    }

    fn eval(&self, x: f64) -> f64 {
        match self {
            Self::Direct { shape, width } => shape.eval(x, *width),
            Self::Smeared { shape, width, shifts } => {
                shifts.iter().map(|&(s, w)| w * shape.eval(x - s, *width)).sum()
            }
            Self::Tabulated { x0, dx, values, slopes } => {
                // cubic Hermite on exact values and slopes
                let u = (x - x0) / dx;
                if u < 0.0 || u >= (values.len() - 1) as f64 {
                    return 0.0;
                }
                let i = u.floor() as usize;
                let t = u - i as f64;
                let (t2, t3) = (t * t, t * t * t);
                (2.0 * t3 - 3.0 * t2 + 1.0) * values[i]
                    + (t3 - 2.0 * t2 + t) * dx * slopes[i]
                    + (3.0 * t2 - 2.0 * t3) * values[i + 1]
                    + (t3 - t2) * dx * slopes[i + 1]
            }
        }
    }
}

fn render(out: &mut [f64], grid: &[f64], center: f64, strength: f64, kernel: &Kernel) {
    let (lo, hi) = match kernel.support() {
        Some(s) => (grid.partition_point(|&f| f < center - s), grid.partition_point(|&f| f <= center + s)),
        None => (0, grid.len()),
    };
    for i in lo..hi {
        out[i] += strength * kernel.eval(grid[i] - center);
    }
}

/// Ensemble spectrum `level + scale * sum_o sum_n P_n sum_k w_k g(f - f_k)`.
///
/// Line strengths are averaged over the `3 * 2^n` initial nuclear states so that
/// every isotopologue carries the same total strength per NV center. With a bath
/// the contour of a Delta m_s = d line is smeared over the bath shifts scaled by d;
/// Delta m_s = 0 and narrow lines are not smeared.
pub fn synthesize_spectrum(
    set: &TransitionSet,
    weights: &IsotopologueWeights,
    lines: &LineShapeParams,
    bath: Option<&BathConfigurationSet>,
    grid: &[f64],
    opts: &SynthesisOptions,
) -> Result<SpectrumCurve> {
    validate_grid(grid)?;
    lines.validate()?;
    let mut acc = vec![0.0; grid.len()];
    if lines.scale != 0.0 {
        let kernels: Vec<Kernel> =
            (0..=2u8).map(|d| Kernel::build(lines.shape, lines.width(d), bath, d as f64)).collect();
        let narrow = Kernel::Direct { shape: LineShape::Lorentzian, width: opts.narrow_fwhm / 2.0 };
        for &o in &opts.orientations {
            for &n in &opts.n13c_mask {
                let groups = set.get(o, n).ok_or(Error::MissingTransitions { orientation: o, n13c: n })?;
                let pn = weights.get(n.min(MAX_CARBONS));
                if pn == 0.0 {
                    continue;
                }
                let norm = pn / (3 << n) as f64;
                for g in groups {
                    for (t, &is_narrow) in g.transitions.iter().zip(&g.narrow) {
                        let s = g.weight * norm * opts.weighting.of(t);
                        if s == 0.0 {
                            continue;
                        }
                        let k = if is_narrow { &narrow } else { &kernels[t.delta_ms.min(2) as usize] };
                        render(&mut acc, grid, t.frequency, s, k);
                    }
                }
            }
        }
    }
    let values = acc.iter().map(|a| lines.level + lines.scale * a).collect();
    SpectrumCurve::new(grid.to_vec(), values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NarrowLineOptions {
    /// Lines with |df/dB| strictly below this (MHz/G) are treated as narrow.
    pub threshold: f64,
    pub fwhm: f64,
    pub delta_b: f64,
    /// Lines below this frequency (nuclear transitions) are never considered.
    pub min_frequency: f64,
}

impl Default for NarrowLineOptions {
    fn default() -> Self {
        Self { threshold: 0.3, fwhm: 3.0, delta_b: DEFAULT_FIELD_STEP, min_frequency: 1000.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarrowLine {
    pub transition: Transition,
    /// df/dB (MHz/G).
    pub sensitivity: f64,
}

/// Flags for `table` marking the magneto-insensitive lines.
pub fn classify_narrow(sensitivities: &[(Transition, Option<f64>)], opts: &NarrowLineOptions) -> Vec<bool> {
    sensitivities
        .iter()
        .map(|(t, d)| t.frequency >= opts.min_frequency && d.is_some_and(|d| d.abs() < opts.threshold))
        .collect()
}

/// Magneto-insensitive lines of `cfg` rendered as Lorentzians of `opts.fwhm`.
///
/// Strengths follow the same per-center normalization as [`synthesize_spectrum`]
/// with unit isotopologue probability and unit scale, no offset.
pub fn narrow_feature_curve(
    cfg: &SpinSystemConfig,
    constants: &PhysicalConstants,
    b_mw: f64,
    topts: &TransitionOptions,
    weighting: LineWeight,
    opts: &NarrowLineOptions,
    grid: &[f64],
) -> Result<(SpectrumCurve, Vec<NarrowLine>)> {
    validate_grid(grid)?;
    let terms = HamiltonianTerms::new(cfg.n13c, constants)?;
    let mw = mw_coupling_for(cfg, b_mw, constants)?;
    let sens = transition_sensitivities(&terms, cfg, &mw, topts, opts.delta_b)?;
    let flags = classify_narrow(&sens, opts);
    let kernel = Kernel::Direct { shape: LineShape::Lorentzian, width: opts.fwhm / 2.0 };
    let norm = 1.0 / (3 << cfg.n13c) as f64;
    let mut values = vec![0.0; grid.len()];
    let mut selected = Vec::new();
    for ((t, d), flag) in sens.into_iter().zip(flags) {
        if !flag {
            continue;
        }
        render(&mut values, grid, t.frequency, norm * weighting.of(&t), &kernel);
        selected
            .push(NarrowLine { transition: t, sensitivity: d.expect("flagged lines have a sensitivity") });
    }
    Ok((SpectrumCurve::new(grid.to_vec(), values)?, selected))
}
