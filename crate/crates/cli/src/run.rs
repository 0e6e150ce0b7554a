use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use odmr13c_core::fitting::{
    find_peaks, fit_full, fit_gauss7, gauss7_curve, gauss7_seed, FitReport, FullModel, ModelPoint, Peak,
    P_SYSTEMATIC,
};
use odmr13c_core::lsq::LsqOptions;
use odmr13c_core::spectrum::{classify_narrow, NarrowLineOptions, SpectrumCurve};
use odmr13c_core::spin::HamiltonianTerms;
use odmr13c_core::transitions::{
    mw_coupling_for, transition_sensitivities, write_transitions_csv, Transition, TransitionOptions,
};

use crate::config::{ModelChoice, RunConfig};
use crate::svg;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NarrowEntry {
    pub orientation: usize,
    pub n13c: usize,
    pub frequency: f64,
    pub rabi: f64,
    pub df_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub b_gauss: f64,
    pub p: f64,
    pub transition_count: usize,
    /// Counts for n13c = 0..=3 (zero where masked out).
    pub transitions_by_n13c: [usize; 4],
    pub narrow_lines: Vec<NarrowEntry>,
    pub peaks: Vec<Peak>,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub spectrum: SpectrumCurve,
    pub transitions: Vec<Transition>,
    pub summary: Summary,
}

fn core_err(e: odmr13c_core::Error) -> CliError {
    CliError::Input(e.to_string())
}

fn add_noise(curve: &mut SpectrumCurve, fraction: f64, seed: u64) {
    let (lo, hi) = curve.values.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let std = fraction * (hi - lo);
    if std <= 0.0 {
        return;
    }
    let noise = Normal::new(0.0, std).expect("positive std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in &mut curve.values {
        *v += noise.sample(&mut rng);
    }
}

/// Model spectrum, per-center transition tables and their summary; no files written.
pub fn simulate(cfg: &RunConfig) -> Result<Simulation, CliError> {
    let grid = cfg.grid_points()?;
    let mut model = FullModel::new(cfg.model_options()).map_err(core_err)?;
    let mut spectrum = model.evaluate(&cfg.point(), &grid).map_err(core_err)?;
    if let Some(n) = cfg.noise {
        add_noise(&mut spectrum, n.fraction, n.seed);
    }

    let constants = model.options().constants.clone();
    let topts = TransitionOptions { alpha: cfg.alpha, ..Default::default() };
    let nopts = NarrowLineOptions::default();
    let mut transitions = Vec::new();
    let mut by_n = [0usize; 4];
    let mut narrow_lines = Vec::new();
    for &n in &cfg.n13c_mask {
        let terms = HamiltonianTerms::new(n, &constants).map_err(core_err)?;
        for &o in &cfg.orientations {
            let spin = cfg.spin_config(o, n);
            let mw = mw_coupling_for(&spin, model.options().b_mw, &constants).map_err(core_err)?;
            let sens =
                transition_sensitivities(&terms, &spin, &mw, &topts, nopts.delta_b).map_err(core_err)?;
            for ((t, d), narrow) in sens.iter().zip(classify_narrow(&sens, &nopts)) {
                if narrow {
                    narrow_lines.push(NarrowEntry {
                        orientation: o,
                        n13c: n,
                        frequency: t.frequency,
                        rabi: t.rabi,
                        df_db: d.unwrap_or(f64::NAN),
                    });
                }
            }
            by_n[n] += sens.len();
            transitions.extend(sens.into_iter().map(|(t, _)| t));
        }
    }
    let summary = Summary {
        b_gauss: cfg.b_gauss,
        p: cfg.p,
        transition_count: transitions.len(),
        transitions_by_n13c: by_n,
        narrow_lines,
        peaks: find_peaks(&spectrum, 0.01, 5.0),
    };
    Ok(Simulation { spectrum, transitions, summary })
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn write_with<F>(path: &Path, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<(), CliError>,
{
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush().map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_with(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        writeln!(w).map_err(|e| CliError::io(path, e))
    })
}

fn write_curve(path: &Path, curve: &SpectrumCurve) -> Result<(), CliError> {
    write_with(path, |w| curve.write_csv(w).map_err(|e| CliError::Input(format!("{}: {e}", path.display()))))
}

/// `simulate`: writes whichever outputs the config names.
pub fn run_simulate(cfg: &RunConfig) -> Result<Simulation, CliError> {
    let sim = simulate(cfg)?;
    let out = &cfg.output;
    if let Some(p) = &out.spectrum {
        write_curve(p, &sim.spectrum)?;
    }
    if let Some(p) = &out.transitions {
        write_with(p, |w| {
            write_transitions_csv(w, &sim.transitions)
                .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))
        })?;
    }
    if let Some(p) = &out.summary {
        write_json(p, &sim.summary)?;
    }
    if let Some(p) = &out.svg {
        let sticks: Vec<(f64, f64)> =
            sim.transitions.iter().map(|t| (t.frequency, t.rabi * t.rabi)).collect();
        let doc = svg::plot(&[(&sim.spectrum, "#1f4e79")], &sticks);
        write_with(p, |w| w.write_all(doc.as_bytes()).map_err(|e| CliError::io(p, e)))?;
    }
    Ok(sim)
}

pub fn read_spectrum(path: &Path) -> Result<SpectrumCurve, CliError> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    SpectrumCurve::read_csv(BufReader::new(f))
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub report: FitReport,
    pub curve: SpectrumCurve,
}

/// Fit the configured model to the part of `data` inside the grid window.
pub fn fit(cfg: &RunConfig, data: &SpectrumCurve) -> Result<FitOutcome, CliError> {
    let (lo, hi) = (cfg.grid.start, cfg.grid.stop);
    let (freqs, values): (Vec<f64>, Vec<f64>) = data
        .freqs
        .iter()
        .zip(&data.values)
        .filter(|(f, _)| **f >= lo && **f <= hi)
        .map(|(f, v)| (*f, *v))
        .unzip();
    if freqs.len() < 16 {
        return Err(CliError::Input(format!(
            "data: only {} points inside the grid window {lo}..{hi} MHz",
            freqs.len()
        )));
    }
    let window = SpectrumCurve::new(freqs, values).map_err(core_err)?;
    let mut model = FullModel::new(cfg.model_options()).map_err(core_err)?;
    let lsq = LsqOptions::default();
    let (result, curve) = match cfg.model {
        ModelChoice::Full => {
            let r = fit_full(&window, &cfg.fit_params(), &mut model, &lsq).map_err(core_err)?;
            let best = ModelPoint::from_array(&r.values.clone().try_into().expect("14 parameters"));
            let curve = model.evaluate(&best, &window.freqs).map_err(core_err)?;
            (r, curve)
        }
        ModelChoice::Gauss7 => {
            let set = model.transition_set(&cfg.point()).map_err(core_err)?;
            let mut init = gauss7_seed(&set, cfg.orientations[0], (lo, hi), 5.0).map_err(core_err)?;
            init.p.value = cfg.p;
            let init = init.seed_levels(&window).map_err(core_err)?;
            let r = fit_gauss7(&window, &init, &lsq).map_err(core_err)?;
            let values = gauss7_curve(&r.values, &window.freqs).map_err(core_err)?;
            let curve = SpectrumCurve::new(window.freqs.clone(), values).map_err(core_err)?;
            (r, curve)
        }
    };
    Ok(FitOutcome { report: result.report(P_SYSTEMATIC), curve })
}

/// `fit`: reads `data`, writes the report and best-fit curve. Non-convergence is
/// reported by the caller after the outputs are written.
pub fn run_fit(cfg: &RunConfig, data: &Path) -> Result<FitOutcome, CliError> {
    let spectrum = read_spectrum(data)?;
    let out = fit(cfg, &spectrum)?;
    if let Some(p) = &cfg.output.report {
        write_json(p, &out.report)?;
    }
    if let Some(p) = &cfg.output.curve {
        write_curve(p, &out.curve)?;
    }
    if let Some(p) = &cfg.output.svg {
        let doc = svg::plot(&[(&spectrum, "#777777"), (&out.curve, "#b22222")], &[]);
        write_with(p, |w| w.write_all(doc.as_bytes()).map_err(|e| CliError::io(p, e)))?;
    }
    Ok(out)
}
