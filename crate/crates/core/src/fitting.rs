//! Least-squares estimation of the 13C fraction and companion parameters from
//! ODMR spectra, with the full forward model or a seven-Gaussian shortcut.

use std::sync::Arc;

use num_complex::Complex64;

use serde::{Deserialize, Serialize};

use crate::constants::PhysicalConstants;
use crate::error::{invalid, Error, Result};
use crate::lsq::{levenberg_marquardt, Bound, LsqOptions, LsqOutcome, Termination};
use crate::spectrum::{
    bath_shift_distribution, binomial_weights, classify_narrow, synthesize_spectrum, BathConfigurationSet,
    BathSites, LineGroup, LineShape, LineShapeParams, LineWeight, NarrowLineOptions, SpectrumCurve,
    SynthesisOptions, TransitionSet,
};
use crate::spin::{
    build_spin_operators, field_in_nv_frame, lab_vector, HamiltonianTerms, SpinOperators, SpinSystemConfig,
    MAX_CARBONS, ORIENTATIONS,
};
use crate::transitions::{
    diagonalize, mw_coupling_for, transition_sensitivities, transition_table_with, TransitionOptions,
};

/// Default absolute systematic uncertainty on p.
pub const P_SYSTEMATIC: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitParam {
    pub value: f64,
    pub fixed: bool,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

impl Default for FitParam {
    fn default() -> Self {
        Self::fixed(0.0)
    }
}

impl FitParam {
    pub fn free(value: f64) -> Self {
        Self { value, fixed: false, lower: None, upper: None }
    }

    pub fn fixed(value: f64) -> Self {
        Self { value, fixed: true, lower: None, upper: None }
    }

    pub fn bounded(mut self, lower: Option<f64>, upper: Option<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    fn bound(&self) -> Bound {
        Bound::new(self.lower, self.upper)
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !self.value.is_finite() {
            return Err(invalid(name, "value must be finite"));
        }
        if let (Some(l), Some(u)) = (self.lower, self.upper) {
            if !(l <= u) {
                return Err(invalid(name, format!("lower bound {l} above upper bound {u}")));
            }
        }
        if !self.bound().contains(self.value) {
            return Err(invalid(name, format!("value {} outside its bounds", self.value)));
        }
        Ok(())
    }

    /// Intersect the bounds with a hard physical range.
    fn restricted(mut self, lo: Option<f64>, hi: Option<f64>) -> Self {
        if let Some(lo) = lo {
            self.lower = Some(self.lower.map_or(lo, |l| l.max(lo)));
        }
        if let Some(hi) = hi {
            self.upper = Some(self.upper.map_or(hi, |u| u.min(hi)));
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Full,
    Gauss7,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Gauss7 => "gauss7",
        })
    }
}

/// A point in the parameter space of the full forward model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelPoint {
    pub ex: f64,
    pub ey: f64,
    pub d_prime: f64,
    pub b_mag: f64,
    pub theta: f64,
    pub phi: f64,
    pub xi: f64,
    pub zeta: f64,
    pub alpha: f64,
    pub level: f64,
    pub scale: f64,
    pub sigma0: f64,
    pub sigma_b: f64,
    pub p: f64,
}

pub const FULL_PARAM_NAMES: [&str; 14] = [
    "ex", "ey", "d_prime", "b_mag", "theta", "phi", "xi", "zeta", "alpha", "level", "scale", "sigma0",
    "sigma_b", "p",
];

/// Zero field, no strain, unit scale, natural 13C abundance.
impl Default for ModelPoint {
    fn default() -> Self {
        Self {
            ex: 0.0,
            ey: 0.0,
            d_prime: 2870.0,
            b_mag: 0.0,
            theta: 0.0,
            phi: 0.0,
            xi: std::f64::consts::FRAC_PI_2,
            zeta: 0.0,
            alpha: 1.0,
            level: 0.0,
            scale: 1.0,
            sigma0: 1.0,
            sigma_b: 0.0,
            p: 0.011,
        }
    }
}

impl ModelPoint {
    pub fn to_array(&self) -> [f64; 14] {
        [
            self.ex,
            self.ey,
            self.d_prime,
            self.b_mag,
            self.theta,
            self.phi,
            self.xi,
            self.zeta,
            self.alpha,
            self.level,
            self.scale,
            self.sigma0,
            self.sigma_b,
            self.p,
        ]
    }

    pub fn from_array(v: &[f64; 14]) -> Self {
        Self {
            ex: v[0],
            ey: v[1],
            d_prime: v[2],
            b_mag: v[3],
            theta: v[4],
            phi: v[5],
            xi: v[6],
            zeta: v[7],
            alpha: v[8],
            level: v[9],
            scale: v[10],
            sigma0: v[11],
            sigma_b: v[12],
            p: v[13],
        }
    }

    pub fn spin_config(&self, orientation: usize, n13c: usize) -> SpinSystemConfig {
        SpinSystemConfig {
            b_mag: self.b_mag,
            theta: self.theta,
            phi: self.phi,
            ex: self.ex,
            ey: self.ey,
            d_prime: self.d_prime,
            n13c,
            xi: self.xi,
            zeta: self.zeta,
            orientation,
        }
    }

    fn line_shape(&self, shape: LineShape) -> LineShapeParams {
        LineShapeParams {
            sigma0: self.sigma0,
            sigma_b: self.sigma_b,
            level: self.level,
            scale: self.scale,
            shape,
        }
    }
}

/// Fit parameters of the full model; every entry has its own free flag and bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitParams {
    pub ex: FitParam,
    pub ey: FitParam,
    pub d_prime: FitParam,
    pub b_mag: FitParam,
    pub theta: FitParam,
    pub phi: FitParam,
    pub xi: FitParam,
    pub zeta: FitParam,
    pub alpha: FitParam,
    pub level: FitParam,
    pub scale: FitParam,
    pub sigma0: FitParam,
    pub sigma_b: FitParam,
    pub p: FitParam,
}

impl Default for FitParams {
    fn default() -> Self {
        Self {
            ex: FitParam::fixed(0.0),
            ey: FitParam::fixed(0.0),
            d_prime: FitParam::fixed(2870.0),
            b_mag: FitParam::fixed(0.0),
            theta: FitParam::fixed(0.0),
            phi: FitParam::fixed(0.0),
            xi: FitParam::fixed(std::f64::consts::FRAC_PI_2),
            zeta: FitParam::fixed(0.0),
            alpha: FitParam::fixed(1.0),
            level: FitParam::free(0.0),
            scale: FitParam::free(1.0),
            sigma0: FitParam::free(1.0),
            sigma_b: FitParam::fixed(1.0),
            p: FitParam::free(0.011),
        }
    }
}

impl FitParams {
    pub fn to_vec(&self) -> Vec<FitParam> {
        vec![
            self.ex,
            self.ey,
            self.d_prime,
            self.b_mag,
            self.theta,
            self.phi,
            self.xi,
            self.zeta,
            self.alpha,
            self.level,
            self.scale,
            self.sigma0,
            self.sigma_b,
            self.p,
        ]
    }

    pub fn from_point(pt: &ModelPoint, free: &[&str]) -> Self {
        let v = pt.to_array();
        let mut out = Self::default();
        for (i, slot) in out.slots_mut().into_iter().enumerate() {
            slot.value = v[i];
            slot.fixed = !free.contains(&FULL_PARAM_NAMES[i]);
        }
        out
    }

    fn slots_mut(&mut self) -> [&mut FitParam; 14] {
        [
            &mut self.ex,
            &mut self.ey,
            &mut self.d_prime,
            &mut self.b_mag,
            &mut self.theta,
            &mut self.phi,
            &mut self.xi,
            &mut self.zeta,
            &mut self.alpha,
            &mut self.level,
            &mut self.scale,
            &mut self.sigma0,
            &mut self.sigma_b,
            &mut self.p,
        ]
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut FitParam> {
        let i = FULL_PARAM_NAMES.iter().position(|n| *n == name)?;
        Some(self.slots_mut().into_iter().nth(i).expect("index in range"))
    }

    pub fn point(&self) -> ModelPoint {
        let v: Vec<f64> = self.to_vec().iter().map(|p| p.value).collect();
        ModelPoint::from_array(&v.try_into().expect("14 parameters"))
    }

    /// Bounds including the physical ranges of each parameter.
    fn effective(&self) -> Vec<FitParam> {
        let mut v = self.to_vec();
        v[3] = v[3].restricted(Some(0.0), None);
        v[8] = v[8].restricted(Some(0.0), None);
        v[11] = v[11].restricted(Some(1e-6), None);
        v[12] = v[12].restricted(Some(0.0), None);
        v[13] = v[13].restricted(Some(0.0), Some(1.0));
        v
    }
}

/// Absolute finite-difference scales of the full-model parameters.
const FULL_SCALES: [f64; 14] = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.1, 0.1, 0.01];

/// Options of the full forward model that are not fit parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOptions {
    pub constants: PhysicalConstants,
    pub orientations: Vec<usize>,
    pub n13c_mask: Vec<usize>,
    pub weighting: LineWeight,
    pub shape: LineShape,
    pub bath: bool,
    pub bath_sites: usize,
    /// Average over the symmetry-equivalent nearest-shell site assignments.
    pub site_average: bool,
    /// Magneto-insensitive line handling; `None` renders every line alike.
    pub narrow: Option<NarrowLineOptions>,
    pub b_mw: f64,
    pub rabi_floor: f64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        let constants = PhysicalConstants::default();
        Self {
            bath_sites: constants.bath_near_sites + constants.bath_far_sites,
            constants,
            orientations: (0..ORIENTATIONS).collect(),
            n13c_mask: vec![0, 1, 2],
            weighting: LineWeight::RabiSquared,
            shape: LineShape::Gaussian,
            bath: true,
            site_average: true,
            narrow: Some(NarrowLineOptions::default()),
            b_mw: 1.0,
            rabi_floor: crate::transitions::DEFAULT_RABI_FLOOR,
        }
    }
}

impl ModelOptions {
    pub fn validate(&self) -> Result<()> {
        if self.orientations.is_empty() {
            return Err(invalid("orientations", "must not be empty"));
        }
        if self.n13c_mask.is_empty() {
            return Err(invalid("n13c_mask", "must not be empty"));
        }
        for &o in &self.orientations {
            if o >= ORIENTATIONS {
                return Err(Error::IndexOutOfRange {
                    what: "NV orientation",
                    index: o,
                    max: ORIENTATIONS - 1,
                });
            }
        }
        for &n in &self.n13c_mask {
            if n > MAX_CARBONS {
                return Err(Error::IndexOutOfRange { what: "n13c", index: n, max: MAX_CARBONS });
            }
        }
        let total = self.constants.bath_near_sites + self.constants.bath_far_sites;
        if self.bath_sites > total {
            return Err(invalid("bath_sites", format!("at most {total} bath sites are modeled")));
        }
        if !(self.b_mw > 0.0) {
            return Err(invalid("b_mw", "must be positive"));
        }
        Ok(())
    }
}

fn site_variants(n13c: usize, average: bool) -> Vec<Vec<usize>> {
    if !average {
        return vec![(0..n13c).collect()];
    }
    match n13c {
        0 => vec![vec![]],
        1 => vec![vec![0], vec![1], vec![2]],
        2 => vec![vec![0, 1], vec![0, 2], vec![1, 2]],
        _ => vec![vec![0, 1, 2]],
    }
}

const CACHE_SLOTS: usize = 8;

/// Forward model `F(f)` with memoized transition tables.
///
/// Tables depend on the Hamiltonian and microwave parameters only, so steps in the
/// line-shape parameters, level, scale and p reuse them.
pub struct FullModel {
    opts: ModelOptions,
    terms: Vec<(usize, Vec<HamiltonianTerms>)>,
    cache: Vec<([u64; 9], Arc<TransitionSet>)>,
    bath_cache: Option<(u64, Arc<BathConfigurationSet>)>,
    /// Number of transition-table rebuilds, for diagnostics.
    pub rebuilds: usize,
}

impl FullModel {
    pub fn new(opts: ModelOptions) -> Result<Self> {
        opts.validate()?;
        let mut mask = opts.n13c_mask.clone();
        mask.sort_unstable();
        mask.dedup();
        let terms = mask
            .iter()
            .map(|&n| {
                let t = site_variants(n, opts.site_average)
                    .iter()
                    .map(|s| HamiltonianTerms::on_sites(s, &opts.constants))
                    .collect::<Result<Vec<_>>>()?;
                Ok((n, t))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { opts, terms, cache: Vec::new(), bath_cache: None, rebuilds: 0 })
    }

    pub fn options(&self) -> &ModelOptions {
        &self.opts
    }

    fn physics_key(pt: &ModelPoint) -> [u64; 9] {
        [pt.ex, pt.ey, pt.d_prime, pt.b_mag, pt.theta, pt.phi, pt.xi, pt.zeta, pt.alpha].map(f64::to_bits)
    }

    /// Transition tables of every included orientation and isotopologue at `pt`.
    pub fn transition_set(&mut self, pt: &ModelPoint) -> Result<Arc<TransitionSet>> {
        let key = Self::physics_key(pt);
        if let Some((_, set)) = self.cache.iter().find(|(k, _)| *k == key) {
            return Ok(Arc::clone(set));
        }
        let topts = TransitionOptions { alpha: pt.alpha, rabi_floor: self.opts.rabi_floor };
        let mut set = TransitionSet::new();
        for &o in &self.opts.orientations {
            for (n, variants) in &self.terms {
                let cfg = pt.spin_config(o, *n);
                cfg.validate()?;
                let mw = mw_coupling_for(&cfg, self.opts.b_mw, &self.opts.constants)?;
                let weight = 1.0 / variants.len() as f64;
                for terms in variants {
                    let group = match &self.opts.narrow {
                        Some(nopts) => {
                            let sens = transition_sensitivities(terms, &cfg, &mw, &topts, nopts.delta_b)?;
                            let narrow = classify_narrow(&sens, nopts);
                            let transitions = sens.into_iter().map(|(t, _)| t).collect();
                            LineGroup { weight, transitions, narrow }
                        }
                        None => {
                            let eig = diagonalize(&terms.assemble(&cfg)?)?;
                            let mut table = transition_table_with(&eig, &mw, &topts)?;
                            for t in &mut table {
                                t.orientation = o;
                            }
                            LineGroup::new(weight, table)
                        }
                    };
                    set.insert(o, *n, group);
                }
            }
        }
        self.rebuilds += 1;
        let set = Arc::new(set);
        if self.cache.len() == CACHE_SLOTS {
            self.cache.remove(0);
        }
        self.cache.push((key, Arc::clone(&set)));
        Ok(set)
    }

    fn bath(&mut self, p: f64) -> Result<Option<Arc<BathConfigurationSet>>> {
        if !self.opts.bath {
            return Ok(None);
        }
        if let Some((k, b)) = &self.bath_cache {
            if *k == p.to_bits() {
                return Ok(Some(Arc::clone(b)));
            }
        }
        let sites = BathSites::first_sites(&self.opts.constants, self.opts.bath_sites);
        let b = Arc::new(bath_shift_distribution(p, &sites)?);
        self.bath_cache = Some((p.to_bits(), Arc::clone(&b)));
        Ok(Some(b))
    }

    pub fn evaluate(&mut self, pt: &ModelPoint, grid: &[f64]) -> Result<SpectrumCurve> {
        let set = self.transition_set(pt)?;
        let weights = binomial_weights(pt.p)?;
        let bath = self.bath(pt.p)?;
        let synth = SynthesisOptions {
            orientations: self.opts.orientations.clone(),
            n13c_mask: self.opts.n13c_mask.clone(),
            weighting: self.opts.weighting,
            narrow_fwhm: self.opts.narrow.map_or(3.0, |n| n.fwhm),
        };
        synthesize_spectrum(&set, &weights, &pt.line_shape(self.opts.shape), bath.as_deref(), grid, &synth)
    }
}

/// Outcome of a fit, covering every parameter (fixed ones carry zero sigma).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: ModelKind,
    pub names: Vec<String>,
    pub values: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub params: Vec<FitParam>,
    /// Covariance of the free parameters, in the order they appear in `names`.
    pub covariance: Vec<Vec<f64>>,
    pub free_names: Vec<String>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
    pub gradient_cosine: f64,
    pub history: Vec<f64>,
    /// Parameter combination left undetermined by the data, if any.
    pub degenerate_direction: Option<Vec<(String, f64)>>,
}

impl FitResult {
    pub fn value(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.values[i])
    }

    pub fn sigma(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.sigmas[i])
    }

    fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Statistical error on p combined in quadrature with a systematic term.
    pub fn p_total_uncertainty(&self, systematic: f64) -> Option<f64> {
        self.sigma("p").map(|s| s.hypot(systematic))
    }

    pub fn report(&self, systematic: f64) -> FitReport {
        FitReport {
            model: self.model,
            converged: self.converged,
            iterations: self.iterations,
            residual_norm: self.residual_norm,
            params: self
                .names
                .iter()
                .enumerate()
                .map(|(i, name)| ParamReport {
                    name: name.clone(),
                    value: self.values[i],
                    sigma: self.sigmas[i],
                    fixed: self.params[i].fixed,
                    lower: self.params[i].lower,
                    upper: self.params[i].upper,
                })
                .collect(),
            p_total_uncertainty: self.p_total_uncertainty(systematic),
            termination: self.termination,
            degenerate_direction: self.degenerate_direction.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub name: String,
    pub value: f64,
    pub sigma: f64,
    pub fixed: bool,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model: ModelKind,
    pub converged: bool,
    pub iterations: usize,
    pub residual_norm: f64,
    pub params: Vec<ParamReport>,
    pub p_total_uncertainty: Option<f64>,
    pub termination: Termination,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degenerate_direction: Option<Vec<(String, f64)>>,
}

/// Shared driver: free parameters are packed, the model is evaluated on the data grid.
fn run_fit<F>(
    kind: ModelKind,
    names: &[&str],
    params: &[FitParam],
    scales: &[f64],
    location: &[bool],
    data: &SpectrumCurve,
    lsq: &LsqOptions,
    mut model: F,
) -> Result<FitResult>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    for (p, name) in params.iter().zip(names) {
        p.validate(name)?;
    }
    let free: Vec<usize> = (0..params.len()).filter(|&i| !params[i].fixed).collect();
    if free.is_empty() {
        return Err(Error::FitSetup("all parameters are fixed".into()));
    }
    // Location parameters are solved for as offsets from their start so that
    // difference steps stay at the parameter scale instead of |value|.
    let origin: Vec<f64> = free.iter().map(|&i| if location[i] { params[i].value } else { 0.0 }).collect();
    let x0: Vec<f64> = free.iter().zip(&origin).map(|(&i, o)| params[i].value - o).collect();
    let bounds: Vec<Bound> = free
        .iter()
        .zip(&origin)
        .map(|(&i, &o)| {
            let b = params[i].bound();
            Bound::new(b.lower.map(|v| v - o), b.upper.map(|v| v - o))
        })
        .collect();
    let free_scales: Vec<f64> = free.iter().map(|&i| scales[i]).collect();
    let mut full: Vec<f64> = params.iter().map(|p| p.value).collect();
    let values = &data.values;
    let out: LsqOutcome = levenberg_marquardt(
        |x: &[f64]| {
            for (k, &i) in free.iter().enumerate() {
                full[i] = x[k] + origin[k];
            }
            let m = model(&full)?;
            Ok(m.iter().zip(values).map(|(m, d)| m - d).collect())
        },
        &x0,
        &bounds,
        &free_scales,
        lsq,
    )?;

    let mut all: Vec<f64> = params.iter().map(|p| p.value).collect();
    let mut sigmas = vec![0.0; params.len()];
    let sig = out.sigmas();
    for (k, &i) in free.iter().enumerate() {
        all[i] = out.x[k] + origin[k];
        sigmas[i] = sig[k];
    }
    let nf = free.len();
    let covariance = (0..nf).map(|a| (0..nf).map(|b| out.covariance[(a, b)]).collect()).collect();
    Ok(FitResult {
        model: kind,
        names: names.iter().map(|s| s.to_string()).collect(),
        values: all,
        sigmas,
        params: params.to_vec(),
        covariance,
        free_names: free.iter().map(|&i| names[i].to_string()).collect(),
        residual_norm: out.residual_norm,
        iterations: out.iterations,
        converged: out.converged,
        termination: out.termination,
        gradient_cosine: out.gradient_cosine,
        history: out.history,
        degenerate_direction: out
            .degenerate_direction
            .map(|d| free.iter().zip(d).map(|(&i, v)| (names[i].to_string(), v)).collect()),
    })
}

/// Fit the full forward model to `data`.
pub fn fit_full(
    data: &SpectrumCurve,
    init: &FitParams,
    model: &mut FullModel,
    lsq: &LsqOptions,
) -> Result<FitResult> {
    let grid = data.freqs.clone();
    run_fit(
        ModelKind::Full,
        &FULL_PARAM_NAMES,
        &init.effective(),
        &FULL_SCALES,
        &[false; 14],
        data,
        lsq,
        |v| {
            let pt = ModelPoint::from_array(v.try_into().expect("14 parameters"));
            Ok(model.evaluate(&pt, &grid)?.values)
        },
    )
}

pub const GAUSS7_PARAM_NAMES: [&str; 11] =
    ["b", "a", "sigma", "p", "f00", "f10", "f11", "f20", "f23", "offset21", "offset22"];

/// Seven-Gaussian model: one n=0 line, two n=1 lines, four n=2 lines, two of
/// which sit at fixed offsets from the n=0 line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Gauss7Params {
    pub b: FitParam,
    pub a: FitParam,
    pub sigma: FitParam,
    pub p: FitParam,
    pub f00: FitParam,
    pub f10: FitParam,
    pub f11: FitParam,
    pub f20: FitParam,
    pub f23: FitParam,
    pub offset21: FitParam,
    pub offset22: FitParam,
}

impl Default for Gauss7Params {
    fn default() -> Self {
        Self {
            b: FitParam::free(0.0),
            a: FitParam::free(1.0),
            sigma: FitParam::free(3.0),
            p: FitParam::free(0.011),
            f00: FitParam::free(0.0),
            f10: FitParam::free(0.0),
            f11: FitParam::free(0.0),
            f20: FitParam::free(0.0),
            f23: FitParam::free(0.0),
            offset21: FitParam::fixed(2.0),
            offset22: FitParam::fixed(31.0),
        }
    }
}

impl Gauss7Params {
    pub fn to_vec(&self) -> Vec<FitParam> {
        vec![
            self.b,
            self.a,
            self.sigma,
            self.p,
            self.f00,
            self.f10,
            self.f11,
            self.f20,
            self.f23,
            self.offset21,
            self.offset22,
        ]
    }

    fn effective(&self) -> Vec<FitParam> {
        let mut v = self.to_vec();
        v[2] = v[2].restricted(Some(1e-6), None);
        v[3] = v[3].restricted(Some(0.0), Some(1.0));
        v
    }
}

/// `b + A sum_n sum_k P_n / 2^(n+1) g(f - f_nk)` with the unit-area Gaussian g.
pub fn gauss7_curve(v: &[f64], freqs: &[f64]) -> Result<Vec<f64>> {
    let [b, a, sigma, p, f00, f10, f11, f20, f23, o21, o22] = v else {
        return Err(Error::DimensionMismatch { expected: 11, actual: v.len() });
    };
    let w = binomial_weights(*p)?;
    let lines = [
        (*f00, w.probs[0] / 2.0),
        (*f10, w.probs[1] / 4.0),
        (*f11, w.probs[1] / 4.0),
        (*f20, w.probs[2] / 8.0),
        (f00 + o21, w.probs[2] / 8.0),
        (f00 + o22, w.probs[2] / 8.0),
        (*f23, w.probs[2] / 8.0),
    ];
    Ok(freqs
        .iter()
        .map(|&f| {
            b + a * lines.iter().map(|&(c, h)| h * LineShape::Gaussian.eval(f - c, *sigma)).sum::<f64>()
        })
        .collect())
}

const GAUSS7_SCALES: [f64; 11] = [1.0, 1.0, 0.1, 0.01, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
const GAUSS7_LOCATION: [bool; 11] = [false, false, false, false, true, true, true, true, true, true, true];

pub fn fit_gauss7(data: &SpectrumCurve, init: &Gauss7Params, lsq: &LsqOptions) -> Result<FitResult> {
    let freqs = data.freqs.clone();
    run_fit(
        ModelKind::Gauss7,
        &GAUSS7_PARAM_NAMES,
        &init.effective(),
        &GAUSS7_SCALES,
        &GAUSS7_LOCATION,
        data,
        lsq,
        |v| gauss7_curve(v, &freqs),
    )
}

/// Seeded centers may move at most this far (MHz).
pub const CENTER_RANGE: f64 = 15.0;

impl Gauss7Params {
    /// Set the offset from the median of `data` and the amplitude from its area,
    /// given the current value of p.
    pub fn seed_levels(mut self, data: &SpectrumCurve) -> Result<Self> {
        let mut v = data.values.clone();
        v.sort_by(f64::total_cmp);
        let b = v[v.len() / 2];
        let w = binomial_weights(self.p.value)?;
        let total = 0.5 * (w.probs[0] + w.probs[1] + w.probs[2]);
        self.b.value = b;
        self.a.value = data.integral(b) / total;
        Ok(self)
    }
}

/// Seed the seven Gaussian centers from the strength-weighted line clusters of
/// one orientation. The hidden-line offsets are taken from the clusters closest
/// to the default offsets.
pub fn gauss7_seed(
    set: &TransitionSet,
    orientation: usize,
    window: (f64, f64),
    merge_gap: f64,
) -> Result<Gauss7Params> {
    let clusters = |n: usize| -> Vec<(f64, f64)> {
        let mut lines: Vec<(f64, f64)> = set
            .get(orientation, n)
            .unwrap_or(&[])
            .iter()
            .flat_map(|g| g.transitions.iter().map(move |t| (t.frequency, g.weight * t.rabi * t.rabi)))
            .filter(|(f, _)| *f >= window.0 && *f <= window.1)
            .collect();
        // weak lines would bridge otherwise separate clusters
        let top = lines.iter().map(|l| l.1).fold(0.0, f64::max);
        lines.retain(|l| l.1 >= 0.01 * top);
        lines.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out: Vec<(f64, f64, f64)> = Vec::new(); // (sum f w, sum w, last f)
        for (f, w) in lines {
            match out.last_mut() {
                Some(c) if f - c.2 <= merge_gap => {
                    c.0 += f * w;
                    c.1 += w;
                    c.2 = f;
                }
                _ => out.push((f * w, w, f)),
            }
        }
        out.into_iter().filter(|c| c.1 > 0.0).map(|c| (c.0 / c.1, c.1)).collect()
    };
    let strongest = |mut c: Vec<(f64, f64)>, k: usize| -> Vec<f64> {
        c.sort_by(|a, b| b.1.total_cmp(&a.1));
        let mut f: Vec<f64> = c.into_iter().take(k).map(|c| c.0).collect();
        f.sort_by(f64::total_cmp);
        f
    };
    let missing =
        |n| Error::FitSetup(format!("no n13c={n} lines of orientation {orientation} in the window"));
    let f0 = strongest(clusters(0), 1);
    let f00 = *f0.first().ok_or_else(|| missing(0))?;
    let f1 = strongest(clusters(1), 2);
    if f1.len() < 2 {
        return Err(missing(1));
    }
    let defaults = Gauss7Params::default();
    // the two hidden n = 2 lines are the clusters nearest the nominal offsets
    let mut n2 = clusters(2);
    n2.sort_by(|a, b| b.1.total_cmp(&a.1));
    n2.truncate(4);
    if n2.len() < 4 {
        return Err(missing(2));
    }
    let mut take_nearest = |target: f64| -> f64 {
        let k = (0..n2.len())
            .min_by(|&i, &j| (n2[i].0 - target).abs().total_cmp(&(n2[j].0 - target).abs()))
            .expect("non-empty");
        n2.remove(k).0
    };
    let f21 = take_nearest(f00 + defaults.offset21.value);
    let f22 = take_nearest(f00 + defaults.offset22.value);
    let f2 = strongest(n2, 2);
    let center = |f: f64| FitParam::free(f).bounded(Some(f - CENTER_RANGE), Some(f + CENTER_RANGE));
    Ok(Gauss7Params {
        f00: center(f00),
        f10: center(f1[0]),
        f11: center(f1[1]),
        f20: center(f2[0]),
        f23: center(f2[1]),
        offset21: FitParam::fixed(f21 - f00),
        offset22: FitParam::fixed(f22 - f00),
        ..defaults
    })
}

/// A resonance found in a measured spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub frequency: f64,
    /// Height above the baseline (positive for dips as well).
    pub height: f64,
    /// Full width at half maximum (MHz), from linear interpolation.
    pub fwhm: f64,
}

/// Local extrema standing out from the median baseline by more than
/// `min_fraction` of the largest feature. Maxima closer than `merge_width` are
/// combined into their height-weighted centroid. Dips are handled by sign.
pub fn find_peaks(curve: &SpectrumCurve, min_fraction: f64, merge_width: f64) -> Vec<Peak> {
    let n = curve.len();
    if n < 3 {
        return Vec::new();
    }
    let mut sorted = curve.values.clone();
    sorted.sort_by(f64::total_cmp);
    let baseline = sorted[n / 2];
    let up = sorted[n - 1] - baseline;
    let down = baseline - sorted[0];
    let sign = if up >= down { 1.0 } else { -1.0 };
    let y: Vec<f64> = curve.values.iter().map(|v| sign * (v - baseline)).collect();
    let top = up.max(down);
    if !(top > 0.0) {
        return Vec::new();
    }
    let f = &curve.freqs;
    let mut raw = Vec::new();
    for i in 1..n - 1 {
        if y[i] > y[i - 1] && y[i] >= y[i + 1] && y[i] > min_fraction * top {
            // parabola through the three samples
            let (a, b, c) = (y[i - 1], y[i], y[i + 1]);
            let denom = a - 2.0 * b + c;
            let shift = if denom < 0.0 { 0.5 * (a - c) / denom } else { 0.0 };
            let step = 0.5 * (f[i + 1] - f[i - 1]);
            let height = b - 0.25 * (a - c) * shift;
            let half = height / 2.0;
            let cross = |range: &mut dyn Iterator<Item = usize>| -> Option<f64> {
                let mut prev = i;
                for j in range {
                    if y[j] <= half {
                        let t = (y[prev] - half) / (y[prev] - y[j]);
                        return Some(f[prev] + t * (f[j] - f[prev]));
                    }
                    prev = j;
                }
                None
            };
            let lo = cross(&mut (0..i).rev());
            let hi = cross(&mut (i + 1..n));
            let fwhm = match (lo, hi) {
                (Some(l), Some(h)) => h - l,
                (Some(l), None) => 2.0 * (f[i] - l),
                (None, Some(h)) => 2.0 * (h - f[i]),
                (None, None) => f[n - 1] - f[0],
            };
            raw.push(Peak { frequency: f[i] + shift * step, height, fwhm });
        }
    }
    let mut merged: Vec<(f64, f64, f64, Peak)> = Vec::new();
    for p in raw {
        match merged.last_mut() {
            Some(m) if p.frequency - m.3.frequency <= merge_width => {
                m.0 += p.frequency * p.height;
                m.1 += p.height;
                if p.height > m.2 {
                    m.2 = p.height;
                }
                m.3 = Peak { frequency: p.frequency, height: m.2, fwhm: m.3.fwhm.max(p.fwhm) };
            }
            _ => merged.push((p.frequency * p.height, p.height, p.height, p)),
        }
    }
    merged.into_iter().map(|(fw, w, h, p)| Peak { frequency: fw / w, height: h, fwhm: p.fwhm }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldEstimateOptions {
    pub d_prime: f64,
    pub min_fraction: f64,
    pub merge_width: f64,
    /// A lone cluster within this distance of D' is read as zero field.
    pub zero_field_window: f64,
    pub theta_steps: usize,
    pub phi_steps: usize,
    pub b_steps: usize,
}

impl Default for FieldEstimateOptions {
    fn default() -> Self {
        Self {
            d_prime: 2870.0,
            min_fraction: 0.3,
            merge_width: 5.0,
            zero_field_window: 10.0,
            theta_steps: 19,
            phi_steps: 24,
            b_steps: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldEstimate {
    pub b_mag: f64,
    pub theta: f64,
    pub phi: f64,
    /// 1-sigma field uncertainty from the resonance width and line count (G).
    pub b_sigma: f64,
    /// RMS of the symmetric nearest-line frequency mismatch (MHz).
    pub rms_mismatch: f64,
    /// False when the spectrum does not constrain the field direction.
    pub angles_determined: bool,
    pub peaks: Vec<Peak>,
}

/// Electron-only line positions of all four orientations.
fn reference_lines(
    b: f64,
    theta: f64,
    phi: f64,
    d_prime: f64,
    consts: &PhysicalConstants,
    ops: &SpinOperators,
) -> Result<Vec<f64>> {
    let re = |v: f64| Complex64::new(v, 0.0);
    let sz2 = &ops.sz * &ops.sz;
    let mut out = Vec::with_capacity(8);
    for o in 0..ORIENTATIONS {
        let bn = field_in_nv_frame(lab_vector(b, theta, phi), o)?;
        let h = &sz2 * re(d_prime)
            + &ops.sx * re(consts.gamma_e * bn[0])
            + &ops.sy * re(consts.gamma_e * bn[1])
            + &ops.sz * re(consts.gamma_e * bn[2]);
        let eig = diagonalize(&h)?;
        // the level with least S_z^2 weight plays m_s = 0
        let zero = (0..3)
            .min_by(|&x, &y| eig.expectation(&sz2, x).total_cmp(&eig.expectation(&sz2, y)))
            .unwrap_or(0);
        for k in (0..3).filter(|&k| k != zero) {
            out.push((eig.energies[k] - eig.energies[zero]).abs());
        }
    }
    out.sort_by(f64::total_cmp);
    Ok(out)
}

fn nearest(x: f64, set: &[f64]) -> f64 {
    let i = set.partition_point(|&v| v < x);
    let mut best = f64::INFINITY;
    for j in [i.wrapping_sub(1), i] {
        if let Some(&v) = set.get(j) {
            if (v - x).abs() < best.abs() {
                best = x - v;
            }
        }
    }
    best
}

fn mismatch(observed: &[f64], predicted: &[f64]) -> Vec<f64> {
    observed
        .iter()
        .map(|&o| nearest(o, predicted))
        .chain(predicted.iter().map(|&p| nearest(p, observed)))
        .collect()
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// Coarse field magnitude and direction from a natural-abundance reference spectrum.
pub fn estimate_initial_field(
    reference: &SpectrumCurve,
    opts: &FieldEstimateOptions,
) -> Result<FieldEstimate> {
    let consts = PhysicalConstants::without_nitrogen();
    let ops = build_spin_operators(1.0)?;
    let peaks = find_peaks(reference, opts.min_fraction, opts.merge_width);
    let width = peaks.iter().map(|p| p.fwhm).fold(0.0, f64::max) / (8.0 * 2f64.ln()).sqrt();
    let observed: Vec<f64> = peaks.iter().map(|p| p.frequency).collect();
    let b_sigma = |n: usize| width / (consts.gamma_e * (n as f64).sqrt());
    match observed.len() {
        0 => return Err(Error::TooFewPeaks { found: 0 }),
        1 if (observed[0] - opts.d_prime).abs() <= opts.zero_field_window => {
            return Ok(FieldEstimate {
                b_mag: 0.0,
                theta: 0.0,
                phi: 0.0,
                b_sigma: b_sigma(1),
                rms_mismatch: (observed[0] - opts.d_prime).abs(),
                angles_determined: false,
                peaks,
            });
        }
        1 => return Err(Error::TooFewPeaks { found: 1 }),
        _ => {}
    }
    let dev = observed.iter().map(|f| (f - opts.d_prime).abs()).fold(0.0, f64::max);
    let b_nominal = dev / consts.gamma_e;
    let mut best = (f64::INFINITY, 0.0, 0.0, 0.0);
    for ib in 0..opts.b_steps {
        let b = b_nominal * (0.8 + 1.2 * ib as f64 / (opts.b_steps - 1).max(1) as f64);
        for it in 0..opts.theta_steps {
            let theta = std::f64::consts::PI * it as f64 / (opts.theta_steps - 1).max(1) as f64;
            let nphi = if it == 0 || it + 1 == opts.theta_steps { 1 } else { opts.phi_steps };
            for ip in 0..nphi {
                let phi = 2.0 * std::f64::consts::PI * ip as f64 / opts.phi_steps as f64;
                let pred = reference_lines(b, theta, phi, opts.d_prime, &consts, &ops)?;
                let r = rms(&mismatch(&observed, &pred));
                if r < best.0 {
                    best = (r, b, theta, phi);
                }
            }
        }
    }
    let x0 = [best.1, best.2, best.3];
    let refine = levenberg_marquardt(
        |x: &[f64]| Ok(mismatch(&observed, &reference_lines(x[0], x[1], x[2], opts.d_prime, &consts, &ops)?)),
        &x0,
        &[Bound::new(Some(0.0), None), Bound::default(), Bound::default()],
        &[1.0, 1.0, 1.0],
        &LsqOptions { max_iterations: 50, ..Default::default() },
    );
    let (b, theta, phi) = match refine {
        Ok(o) => {
            let r = rms(&mismatch(
                &observed,
                &reference_lines(o.x[0], o.x[1], o.x[2], opts.d_prime, &consts, &ops)?,
            ));
            if r <= best.0 {
                best.0 = r;
                (o.x[0], o.x[1], o.x[2])
            } else {
                (x0[0], x0[1], x0[2])
            }
        }
        Err(Error::FitSetup(_)) => (x0[0], x0[1], x0[2]),
        Err(e) => return Err(e),
    };
    Ok(FieldEstimate {
        b_mag: b,
        theta,
        phi,
        b_sigma: b_sigma(observed.len()),
        rms_mismatch: best.0,
        angles_determined: true,
        peaks,
    })
}
