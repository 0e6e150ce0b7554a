use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use odmr13c_core::fitting::{FitParams, ModelOptions, ModelPoint, FULL_PARAM_NAMES};
use odmr13c_core::spectrum::{uniform_grid, LineShape, NarrowLineOptions};
use odmr13c_core::spin::{SpinSystemConfig, ORIENTATIONS};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Default for Grid {
    fn default() -> Self {
        Self { start: 2600.0, stop: 3140.0, step: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    #[default]
    Full,
    Gauss7,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ParamBounds {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

/// Additive Gaussian noise on simulated spectra, std = `fraction` of the
/// peak-to-peak range of the clean curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Noise {
    pub fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Outputs {
    pub spectrum: Option<PathBuf>,
    pub transitions: Option<PathBuf>,
    pub summary: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub curve: Option<PathBuf>,
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Field magnitude (G).
    pub b_gauss: f64,
    /// Field polar and azimuthal angles in the frame of orientation 0 (rad).
    pub theta: f64,
    pub phi: f64,
    pub ex: f64,
    pub ey: f64,
    pub d_prime: f64,
    /// Microwave polarization angles in crystal coordinates (rad).
    pub xi: f64,
    pub zeta: f64,
    pub alpha: f64,
    pub p: f64,
    pub level: f64,
    pub scale: f64,
    pub sigma0: f64,
    pub sigma_b: f64,
    pub grid: Grid,
    pub model: ModelChoice,
    pub lineshape: LineShape,
    pub bath: bool,
    pub bath_sites: usize,
    pub n13c_mask: Vec<usize>,
    pub orientations: Vec<usize>,
    pub narrow_lines: bool,
    /// Free parameters of the full model; the 7-Gaussian model fits all of its own.
    pub free: Vec<String>,
    pub bounds: BTreeMap<String, ParamBounds>,
    pub noise: Option<Noise>,
    pub output: Outputs,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelOptions::default();
        Self {
            b_gauss: 0.0,
            theta: 0.0,
            phi: 0.0,
            ex: 0.0,
            ey: 0.0,
            d_prime: 2870.0,
            xi: FRAC_PI_2,
            zeta: 0.0,
            alpha: 1.0,
            p: 0.011,
            level: 0.0,
            scale: 1.0,
            sigma0: 1.0,
            sigma_b: 5.0,
            grid: Grid::default(),
            model: ModelChoice::Full,
            lineshape: LineShape::Gaussian,
            bath: true,
            bath_sites: model.bath_sites,
            n13c_mask: vec![0, 1, 2],
            orientations: (0..ORIENTATIONS).collect(),
            narrow_lines: true,
            free: ["p", "sigma_b", "scale", "level", "b_mag"].map(String::from).to_vec(),
            bounds: BTreeMap::new(),
            noise: None,
            output: Outputs::default(),
        }
    }
}

fn bad(key: impl Into<String>, reason: impl Into<String>) -> CliError {
    CliError::Input(format!("{}: {}", key.into(), reason.into()))
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let finite = [
            ("b_gauss", self.b_gauss),
            ("theta", self.theta),
            ("phi", self.phi),
            ("ex", self.ex),
            ("ey", self.ey),
            ("d_prime", self.d_prime),
            ("xi", self.xi),
            ("zeta", self.zeta),
            ("alpha", self.alpha),
            ("p", self.p),
            ("level", self.level),
            ("scale", self.scale),
            ("sigma0", self.sigma0),
            ("sigma_b", self.sigma_b),
            ("grid.start", self.grid.start),
            ("grid.stop", self.grid.stop),
            ("grid.step", self.grid.step),
        ];
        for (key, v) in finite {
            if !v.is_finite() {
                return Err(bad(key, "must be finite"));
            }
        }
        for (key, v) in [("b_gauss", self.b_gauss), ("alpha", self.alpha), ("sigma_b", self.sigma_b)] {
            if v < 0.0 {
                return Err(bad(key, format!("must be >= 0 (got {v})")));
            }
        }
        if self.sigma0 <= 0.0 {
            return Err(bad("sigma0", format!("must be > 0 (got {})", self.sigma0)));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(bad("p", format!("must lie in [0, 1] (got {})", self.p)));
        }
        if self.grid.step <= 0.0 {
            return Err(bad("grid.step", "must be > 0"));
        }
        if self.grid.stop <= self.grid.start {
            return Err(bad("grid.stop", "must exceed grid.start"));
        }
        if self.n13c_mask.is_empty() {
            return Err(bad("n13c_mask", "must not be empty"));
        }
        if let Some((i, n)) = self.n13c_mask.iter().enumerate().find(|(_, &n)| n > 3) {
            return Err(bad(format!("n13c_mask[{i}]"), format!("{n} is not in 0..=3")));
        }
        if self.orientations.is_empty() {
            return Err(bad("orientations", "must not be empty"));
        }
        if let Some((i, o)) = self.orientations.iter().enumerate().find(|(_, &o)| o >= ORIENTATIONS) {
            return Err(bad(format!("orientations[{i}]"), format!("{o} is not in 0..=3")));
        }
        for (i, name) in self.free.iter().enumerate() {
            if !FULL_PARAM_NAMES.contains(&name.as_str()) {
                return Err(bad(format!("free[{i}]"), format!("unknown parameter `{name}`")));
            }
        }
        for (name, b) in &self.bounds {
            if !FULL_PARAM_NAMES.contains(&name.as_str()) {
                return Err(bad(format!("bounds.{name}"), "unknown parameter"));
            }
            if let (Some(l), Some(u)) = (b.lower, b.upper) {
                if l > u {
                    return Err(bad(format!("bounds.{name}"), "lower exceeds upper"));
                }
            }
        }
        if let Some(n) = &self.noise {
            if !(n.fraction >= 0.0 && n.fraction.is_finite()) {
                return Err(bad("noise.fraction", "must be a finite number >= 0"));
            }
        }
        self.model_options().validate().map_err(|e| CliError::Input(e.to_string()))?;
        Ok(())
    }

    pub fn grid_points(&self) -> Result<Vec<f64>, CliError> {
        uniform_grid(self.grid.start, self.grid.stop, self.grid.step).map_err(|e| bad("grid", e.to_string()))
    }

    pub fn point(&self) -> ModelPoint {
        ModelPoint {
            ex: self.ex,
            ey: self.ey,
            d_prime: self.d_prime,
            b_mag: self.b_gauss,
            theta: self.theta,
            phi: self.phi,
            xi: self.xi,
            zeta: self.zeta,
            alpha: self.alpha,
            level: self.level,
            scale: self.scale,
            sigma0: self.sigma0,
            sigma_b: self.sigma_b,
            p: self.p,
        }
    }

    pub fn spin_config(&self, orientation: usize, n13c: usize) -> SpinSystemConfig {
        SpinSystemConfig {
            b_mag: self.b_gauss,
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

    pub fn model_options(&self) -> ModelOptions {
        ModelOptions {
            orientations: self.orientations.clone(),
            n13c_mask: self.n13c_mask.clone(),
            shape: self.lineshape,
            bath: self.bath,
            bath_sites: self.bath_sites,
            narrow: self.narrow_lines.then(NarrowLineOptions::default),
            ..ModelOptions::default()
        }
    }

    pub fn fit_params(&self) -> FitParams {
        let free: Vec<&str> = self.free.iter().map(String::as_str).collect();
        let mut params = FitParams::from_point(&self.point(), &free);
        for (name, b) in &self.bounds {
            if let Some(slot) = params.get_mut(name) {
                *slot = slot.bounded(b.lower, b.upper);
            }
        }
        params
    }
}

/// Set `key` (dot-separated for nested tables) to `value` in a JSON object.
fn set_path(doc: &mut Map<String, Value>, key: &str, value: Value) -> Result<(), CliError> {
    let mut parts = key.split('.').peekable();
    let mut node = doc;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            node.insert(part.to_string(), value);
            return Ok(());
        }
        let child = node.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
        node = child.as_object_mut().ok_or_else(|| bad(key, format!("`{part}` is not a table")))?;
    }
    Err(bad(key, "empty key"))
}

/// Parse a JSON document (empty means all defaults), apply `overrides` and validate.
pub fn parse_config(text: &str, overrides: &[(String, Value)]) -> Result<RunConfig, CliError> {
    let mut doc = if text.trim().is_empty() {
        Map::new()
    } else {
        match serde_json::from_str::<Value>(text) {
            Ok(Value::Object(m)) => m,
            Ok(_) => return Err(CliError::Input("config: top level must be a JSON object".into())),
            Err(e) => return Err(CliError::Input(format!("config: {e}"))),
        }
    };
    for (key, value) in overrides {
        set_path(&mut doc, key, value.clone())?;
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(Value::Object(doc)).map_err(|e| {
        let path = e.path().to_string();
        bad(if path == "." { "config".into() } else { path }, e.inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Read and parse a config file; `None` gives the defaults with overrides applied.
pub fn load_config(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig, CliError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
        None => String::new(),
    };
    parse_config(&text, overrides).map_err(|e| match (e, path) {
        (CliError::Input(m), Some(p)) => CliError::Input(format!("{}: {m}", p.display())),
        (e, _) => e,
    })
}
