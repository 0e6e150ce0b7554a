use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use odmr13c_cli::{load_config, run_fit, run_simulate, CliError};
use odmr13c_core::concentration::{
    nitrogen_from_ir, odmr_contrast, raman_to_concentration, strain_from_zpl, RamanMeasurement,
};
use odmr13c_core::PhysicalConstants;

#[derive(Parser)]
#[command(name = "odmr13c", version, about = "NV-13C ODMR spectrum simulation and 13C concentration fits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Model spectrum, transition table and summary for a configuration.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Spectrum CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        transitions: Option<PathBuf>,
        /// Summary JSON.
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long)]
        svg: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Fit the full or 7-Gaussian model to a spectrum CSV.
    Fit {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        model: Option<Model>,
        /// Report JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Best-fit curve CSV.
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long)]
        svg: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// 13C fraction from the Raman line position.
    Raman {
        /// Measured line position (cm^-1).
        #[arg(long, allow_negative_numbers = true)]
        shift: f64,
        /// Hydrostatic strain (GPa).
        #[arg(long, conflicts_with = "zpl_shift_mev", allow_negative_numbers = true)]
        strain_gpa: Option<f64>,
        /// ZPL shift (meV), converted to strain.
        #[arg(long, allow_negative_numbers = true)]
        zpl_shift_mev: Option<f64>,
        /// Instrumental offset (cm^-1).
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        systematic: f64,
    },
    /// Substitutional nitrogen (ppm) from the IR absorption coefficient.
    Nitrogen {
        /// Absorption coefficient at 1344 cm^-1 (cm^-1).
        #[arg(long, allow_negative_numbers = true)]
        mu: f64,
    },
    /// ODMR contrast (S - R) / (S + R) in percent.
    Contrast {
        #[arg(long, allow_negative_numbers = true)]
        signal: f64,
        #[arg(long, allow_negative_numbers = true)]
        reference: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Full,
    Gauss7,
}

/// Flags that override the config file; names follow the config keys.
#[derive(Args)]
struct Overrides {
    #[arg(long, allow_negative_numbers = true)]
    b_gauss: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    theta: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    phi: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    p: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    ex: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    ey: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    d_prime: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    sigma0: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    sigma_b: Option<f64>,
    /// Comma-separated, e.g. 0,1,2,3.
    #[arg(long, value_delimiter = ',')]
    n13c_mask: Option<Vec<usize>>,
    #[arg(long)]
    no_bath: bool,
    /// Any config key, dot-separated for nested keys: `--set grid.step=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn pairs(&self) -> Result<Vec<(String, Value)>, CliError> {
        let mut out: Vec<(String, Value)> = [
            ("b_gauss", self.b_gauss),
            ("theta", self.theta),
            ("phi", self.phi),
            ("p", self.p),
            ("ex", self.ex),
            ("ey", self.ey),
            ("d_prime", self.d_prime),
            ("sigma0", self.sigma0),
            ("sigma_b", self.sigma_b),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k.to_string(), json!(v))))
        .collect();
        if let Some(mask) = &self.n13c_mask {
            out.push(("n13c_mask".into(), json!(mask)));
        }
        if self.no_bath {
            out.push(("bath".into(), json!(false)));
        }
        for s in &self.set {
            let (k, v) =
                s.split_once('=').ok_or_else(|| CliError::Input(format!("--set {s}: expected KEY=VALUE")))?;
            // bare words are taken as strings
            let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            out.push((k.to_string(), v));
        }
        Ok(out)
    }
}

fn put(overrides: &mut Vec<(String, Value)>, key: &str, path: &Option<PathBuf>) {
    if let Some(p) = path {
        overrides.push((key.to_string(), json!(p)));
    }
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("JSON value"));
}

fn core(e: odmr13c_core::Error) -> CliError {
    CliError::Input(e.to_string())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let c = PhysicalConstants::default();
    match cli.command {
        Command::Simulate { config, out, transitions, summary, svg, overrides } => {
            let mut o = overrides.pairs()?;
            put(&mut o, "output.spectrum", &out);
            put(&mut o, "output.transitions", &transitions);
            put(&mut o, "output.summary", &summary);
            put(&mut o, "output.svg", &svg);
            let cfg = load_config(config.as_deref(), &o)?;
            let sim = run_simulate(&cfg)?;
            eprintln!(
                "{} transitions, {} narrow lines, {} peaks",
                sim.summary.transition_count,
                sim.summary.narrow_lines.len(),
                sim.summary.peaks.len()
            );
            if cfg.output.summary.is_none() {
                print_json(&serde_json::to_value(&sim.summary).expect("summary"));
            }
        }
        Command::Fit { config, data, model, out, curve, svg, overrides } => {
            let mut o = overrides.pairs()?;
            if let Some(m) = model {
                let name = match m {
                    Model::Full => "full",
                    Model::Gauss7 => "gauss7",
                };
                o.push(("model".into(), json!(name)));
            }
            put(&mut o, "output.report", &out);
            put(&mut o, "output.curve", &curve);
            put(&mut o, "output.svg", &svg);
            let cfg = load_config(config.as_deref(), &o)?;
            let fit = run_fit(&cfg, &data)?;
            if cfg.output.report.is_none() {
                print_json(&serde_json::to_value(&fit.report).expect("report"));
            }
            if !fit.report.converged {
                return Err(CliError::NotConverged(format!("{:?}", fit.report.termination)));
            }
            if let Some(p) = fit.report.params.iter().find(|p| p.name == "p") {
                eprintln!("p = {:.5} +- {:.5}", p.value, p.sigma);
            }
        }
        Command::Raman { shift, strain_gpa, zpl_shift_mev, systematic } => {
            let strain = match (strain_gpa, zpl_shift_mev) {
                (Some(s), _) => s,
                (None, Some(e)) => strain_from_zpl(e, &c).map_err(core)?,
                (None, None) => 0.0,
            };
            let m = RamanMeasurement { nu: shift, strain_gpa: strain, systematic_shift: systematic };
            let r = raman_to_concentration(&m, &c).map_err(core)?;
            print_json(&json!({
                "p": r.p,
                "strain_gpa": strain,
                "corrected_shift": r.corrected_shift,
                "strain_correction": r.strain_correction,
                "sensitivity": r.sensitivity,
                "strain_dominated": r.strain_dominated,
            }));
        }
        Command::Nitrogen { mu } => {
            print_json(&json!({ "nitrogen_ppm": nitrogen_from_ir(mu, &c).map_err(core)? }));
        }
        Command::Contrast { signal, reference } => {
            print_json(&json!({ "contrast_percent": odmr_contrast(signal, reference).map_err(core)? }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
