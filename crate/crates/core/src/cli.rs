//! The `noisespec` command-line tool.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forward::{decay_rate_asymptotic, predict_dd_performance};
use crate::inversion::{
    bootstrap_band, default_grid, extrapolation_mask, fit_auto_terms, fit_lorentzian_model, percentile,
    zeroth_order_spectrum, FitBounds, FitOptions, DEFAULT_MAX_AUTO_TERMS,
};
use crate::io::{self, num};
use crate::scaling::{fit_quadratic_scaling, gyromagnetic_ratio, lopsidedness, StarSystem};
use crate::sequence::{filter_function_sq, modulation_profile, parse_duration, PulseSequence, SequenceFamily};
use crate::simulator::{extract_t2, simulate_sequence, SimulationOptions};
use crate::spectral::{LorentzianTerm, SpectralDensity};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const DEFAULT_SEED: u64 = 0x5EED;
pub const OUT_DIR_ENV: &str = "NOISESPEC_OUT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_CONVERGENCE: i32 = 3;
pub const EXIT_ORACLE: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TauUnit {
    S,
    Ms,
}

impl TauUnit {
    fn scale(self) -> f64 {
        match self {
            TauUnit::S => 1.0,
            TauUnit::Ms => 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreqUnit {
    Hz,
    Rads,
}

impl FreqUnit {
    /// Converts a command-line frequency to rad/s.
    fn to_omega(self, v: f64) -> f64 {
        match self {
            FreqUnit::Hz => 2.0 * std::f64::consts::PI * v,
            FreqUnit::Rads => v,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "noisespec",
    version,
    about = "Noise spectroscopy from dynamical-decoupling decay data"
)]
pub struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for every stochastic step.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Unit of bare tau / cycle values.
    #[arg(long, global = true, value_enum)]
    pub tau_unit: Option<TauUnit>,
    /// Unit of frequency arguments.
    #[arg(long, global = true, value_enum)]
    pub freq_unit: Option<FreqUnit>,
    /// TOML config file; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $NOISESPEC_OUT, else the working directory).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Zeroth-order spectrum estimate, written to points.csv.
    Estimate { input: PathBuf },
    /// Multi-Lorentzian fit with bootstrap band.
    Fit {
        input: PathBuf,
        /// Number of Lorentzian terms, or `auto`.
        #[arg(long)]
        terms: Option<String>,
        #[arg(long)]
        max_terms: Option<usize>,
        #[arg(long)]
        restarts: Option<usize>,
        /// Bootstrap refits; 0 disables the band.
        #[arg(long)]
        n_boot: Option<usize>,
        /// Band percentiles as `low,high`.
        #[arg(long)]
        percentiles: Option<String>,
        #[arg(long)]
        grid_points: Option<usize>,
        /// Sequence family of the tau column.
        #[arg(long)]
        family: Option<String>,
        /// Center bounds `low,high` in the frequency unit.
        #[arg(long)]
        center_bounds: Option<String>,
        /// Width bounds `low,high` in the frequency unit.
        #[arg(long)]
        width_bounds: Option<String>,
    },
    /// Decay rates of a sequence family over a cycle grid.
    Predict {
        spectrum: PathBuf,
        #[arg(long)]
        family: String,
        /// `start:stop:count`, log-spaced.
        #[arg(long, conflicts_with = "cycles")]
        grid: Option<String>,
        /// Comma-separated cycle (or CPMG tau) values.
        #[arg(long)]
        cycles: Option<String>,
        /// Bootstrap spectra for a rate band.
        #[arg(long)]
        bootstrap: Option<PathBuf>,
        #[arg(long)]
        percentiles: Option<String>,
        #[arg(long, default_value_t = crate::sequence::DEFAULT_K_MAX)]
        k_max: usize,
    },
    /// Monte-Carlo T2 for a sequence under a spectrum.
    Simulate {
        spectrum: PathBuf,
        #[arg(long)]
        sequence: String,
        #[arg(long)]
        cycles: Option<usize>,
        #[arg(long)]
        trajectories: Option<usize>,
        /// Also write trace.csv.
        #[arg(long)]
        trace: bool,
    },
    /// Quadratic scaling fit and lopsidedness table.
    Scaling {
        input: Option<PathBuf>,
        /// Spin count for a lopsidedness table.
        #[arg(long)]
        spins: Option<usize>,
        #[arg(long, default_value = "31P")]
        central: String,
        #[arg(long, default_value = "1H")]
        satellite: String,
    },
    /// |F(omega)|^2 table for a sequence.
    Filterfn {
        #[arg(long)]
        sequence: String,
        #[arg(long, default_value_t = 1)]
        cycles: usize,
        /// Highest frequency in the frequency unit (default: 20 harmonics).
        #[arg(long)]
        max_freq: Option<f64>,
        #[arg(long, default_value_t = 2000)]
        points: usize,
    },
}

/// Config file schema. Every key is optional and overridden by its flag.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub tau_unit: Option<TauUnit>,
    pub freq_unit: Option<FreqUnit>,
    pub out_dir: Option<PathBuf>,
    pub terms: Option<toml::Value>,
    pub max_terms: Option<usize>,
    pub restarts: Option<usize>,
    pub n_boot: Option<usize>,
    pub percentiles: Option<[f64; 2]>,
    pub grid_points: Option<usize>,
    pub family: Option<String>,
    pub center_bounds: Option<[f64; 2]>,
    pub width_bounds: Option<[f64; 2]>,
    pub cycles: Option<usize>,
    pub trajectories: Option<usize>,
}

struct Context {
    seed: u64,
    tau_unit: TauUnit,
    freq_unit: FreqUnit,
    out_dir: PathBuf,
    config: ConfigFile,
    /// Canonical `key=value` lines hashed into the output headers.
    digest_lines: Vec<String>,
}

impl Context {
    fn note(&mut self, key: &str, value: impl std::fmt::Display) {
        self.digest_lines.push(format!("{key}={value}"));
    }

    fn note_file(&mut self, key: &str, path: &Path) -> Result<()> {
        let bytes = fs::read(path)?;
        let h = Sha256::digest(&bytes);
        self.note(key, hex(&h));
        Ok(())
    }

    fn header(&self, stochastic: bool) -> Vec<String> {
        let mut h = Sha256::new();
        for l in &self.digest_lines {
            h.update(l.as_bytes());
            h.update(b"\n");
        }
        let mut out = vec![
            format!("noisespec {VERSION}"),
            format!("config sha256 {}", hex(&h.finalize())),
        ];
        if stochastic {
            out.push(format!("seed {}", self.seed));
        }
        out
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out_dir)?;
        let p = self.out_dir.join(name);
        fs::write(&p, contents)?;
        Ok(p)
    }

    fn time(&self, text: &str) -> Result<f64> {
        let t = text.trim();
        if t.parse::<f64>().is_ok() {
            Ok(t.parse::<f64>().unwrap() * self.tau_unit.scale())
        } else {
            parse_duration(t)
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn pair(text: &str, what: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => {
            let a: f64 = a
                .parse()
                .map_err(|_| Error::Parse(format!("{what}: bad number '{a}'")))?;
            let b: f64 = b
                .parse()
                .map_err(|_| Error::Parse(format!("{what}: bad number '{b}'")))?;
            Ok((a, b))
        }
        _ => Err(Error::Parse(format!("{what}: expected `low,high`, got '{text}'"))),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::QuadratureNotConverged { .. } | Error::BandUnreliable { .. } => EXIT_CONVERGENCE,
        Error::DecayFit(_) => EXIT_ORACLE,
        _ => EXIT_INPUT,
    }
}

/// Runs the tool on `args` (including the program name) and returns the exit
/// status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cli: Cli) -> Result<i32> {
    let config = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            toml::from_str::<ConfigFile>(&text).map_err(|e| Error::Parse(format!("{}: {e}", p.display())))?
        }
        None => ConfigFile::default(),
    };
    let out_dir = cli
        .out_dir
        .clone()
        .or_else(|| config.out_dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    let mut ctx = Context {
        seed: cli.seed.or(config.seed).unwrap_or(DEFAULT_SEED),
        tau_unit: cli.tau_unit.or(config.tau_unit).unwrap_or(TauUnit::S),
        freq_unit: cli.freq_unit.or(config.freq_unit).unwrap_or(FreqUnit::Hz),
        out_dir,
        config,
        digest_lines: Vec::new(),
    };
    let work = move || -> Result<i32> {
        match cli.command {
            Command::Estimate { input } => cmd_estimate(&mut ctx, &input),
            Command::Fit {
                input,
                terms,
                max_terms,
                restarts,
                n_boot,
                percentiles,
                grid_points,
                family,
                center_bounds,
                width_bounds,
            } => {
                let args = FitArgs {
                    terms,
                    max_terms,
                    restarts,
                    n_boot,
                    percentiles,
                    grid_points,
                    family,
                    center_bounds,
                    width_bounds,
                };
                cmd_fit(&mut ctx, &input, args)
            }
            Command::Predict {
                spectrum,
                family,
                grid,
                cycles,
                bootstrap,
                percentiles,
                k_max,
            } => cmd_predict(
                &mut ctx,
                &spectrum,
                &family,
                grid,
                cycles,
                bootstrap,
                percentiles,
                k_max,
            ),
            Command::Simulate {
                spectrum,
                sequence,
                cycles,
                trajectories,
                trace,
            } => cmd_simulate(&mut ctx, &spectrum, &sequence, cycles, trajectories, trace),
            Command::Scaling {
                input,
                spins,
                central,
                satellite,
            } => cmd_scaling(&mut ctx, input.as_deref(), spins, &central, &satellite),
            Command::Filterfn {
                sequence,
                cycles,
                max_freq,
                points,
            } => cmd_filterfn(&mut ctx, &sequence, cycles, max_freq, points),
        }
    };
    match cli.threads {
        Some(n) if n > 0 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
            pool.install(work)
        }
        Some(_) => Err(Error::InvalidParameter("--threads must be positive".into())),
        None => work(),
    }
}

fn cmd_estimate(ctx: &mut Context, input: &Path) -> Result<i32> {
    let data = io::read_measurements(input, ctx.tau_unit.scale())?;
    ctx.note("command", "estimate");
    ctx.note("tau_unit_scale", ctx.tau_unit.scale());
    ctx.note_file("input", input)?;
    let pts = zeroth_order_spectrum(&data)?;
    let rows: Vec<Vec<String>> = pts
        .iter()
        .map(|p| {
            vec![
                num(p.omega),
                num(p.omega / (2.0 * std::f64::consts::PI)),
                num(p.s),
                num(p.s_err),
            ]
        })
        .collect();
    let mut header = ctx.header(false);
    header.push("omega in rad/s, freq in Hz, S and S_err in s^-1".into());
    let path = ctx.write(
        "points.csv",
        &io::format_table(&header, &["omega_rad_s", "freq_hz", "s", "s_err"], &rows),
    )?;
    println!("{} zeroth-order points written to {}", pts.len(), path.display());
    Ok(EXIT_OK)
}

struct FitArgs {
    terms: Option<String>,
    max_terms: Option<usize>,
    restarts: Option<usize>,
    n_boot: Option<usize>,
    percentiles: Option<String>,
    grid_points: Option<usize>,
    family: Option<String>,
    center_bounds: Option<String>,
    width_bounds: Option<String>,
}

fn cmd_fit(ctx: &mut Context, input: &Path, a: FitArgs) -> Result<i32> {
    let data = io::read_measurements(input, ctx.tau_unit.scale())?;
    let cfg = &ctx.config;
    let terms = match (&a.terms, &cfg.terms) {
        (Some(t), _) => t.clone(),
        (None, Some(toml::Value::Integer(n))) => n.to_string(),
        (None, Some(toml::Value::String(s))) => s.clone(),
        (None, Some(v)) => return Err(Error::Parse(format!("config: bad terms value {v}"))),
        (None, None) => "auto".into(),
    };
    let auto = terms.trim().eq_ignore_ascii_case("auto");
    let n_terms = if auto {
        0
    } else {
        terms
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Parse(format!("--terms must be a count or `auto`, got '{terms}'")))?
    };
    let max_terms = a.max_terms.or(cfg.max_terms).unwrap_or(DEFAULT_MAX_AUTO_TERMS);
    let defaults = FitOptions::default();
    let restarts = a.restarts.or(cfg.restarts).unwrap_or(defaults.restarts);
    let n_boot = a.n_boot.or(cfg.n_boot).unwrap_or(200);
    let percentiles = match &a.percentiles {
        Some(p) => pair(p, "--percentiles")?,
        None => cfg.percentiles.map(|p| (p[0], p[1])).unwrap_or((16.0, 84.0)),
    };
    let grid_points = a.grid_points.or(cfg.grid_points).unwrap_or(200);
    let family: SequenceFamily = a
        .family
        .clone()
        .or_else(|| cfg.family.clone())
        .unwrap_or_else(|| "cpmg".into())
        .parse()?;
    let fu = ctx.freq_unit;
    let to_pair = |flag: &Option<String>, conf: Option<[f64; 2]>, what: &str| -> Result<Option<(f64, f64)>> {
        Ok(match flag {
            Some(s) => Some(pair(s, what)?),
            None => conf.map(|p| (p[0], p[1])),
        }
        .map(|(x, y)| (fu.to_omega(x), fu.to_omega(y))))
    };
    let cb = to_pair(&a.center_bounds, cfg.center_bounds, "--center-bounds")?;
    let wb = to_pair(&a.width_bounds, cfg.width_bounds, "--width-bounds")?;
    let bounds = if cb.is_some() || wb.is_some() {
        let d = FitBounds::from_data(&data)?;
        Some(FitBounds {
            center: cb.unwrap_or(d.center),
            width: wb.unwrap_or(d.width),
        })
    } else {
        None
    };
    let opts = FitOptions {
        restarts,
        seed: ctx.seed,
        bounds,
        family: family.clone(),
        ..defaults
    };

    ctx.note("command", "fit");
    ctx.note("tau_unit_scale", ctx.tau_unit.scale());
    ctx.note("terms", if auto { "auto".to_string() } else { n_terms.to_string() });
    ctx.note("max_terms", max_terms);
    ctx.note("restarts", restarts);
    ctx.note("seed", ctx.seed);
    ctx.note("n_boot", n_boot);
    ctx.note("percentiles", format!("{},{}", percentiles.0, percentiles.1));
    ctx.note("grid_points", grid_points);
    ctx.note("family", &family);
    ctx.note("bounds", format!("{bounds:?}"));
    ctx.note_file("input", input)?;

    let (fit, selection) = if auto {
        let (f, t) = fit_auto_terms(&data, max_terms, &opts)?;
        (f, Some(t))
    } else {
        (fit_lorentzian_model(&data, n_terms, &opts)?, None)
    };
    let header = ctx.header(true);
    let grid = default_grid(&data, grid_points)?;
    let mask = extrapolation_mask(&data, &grid)?;

    let mut report = String::new();
    for h in &header {
        let _ = writeln!(report, "# {h}");
    }
    let _ = writeln!(report, "terms = {}", fit.spectrum.len());
    let _ = writeln!(report, "chi2 = {}", num(fit.residual));
    let _ = writeln!(report, "dof = {}", fit.dof);
    let _ = writeln!(report, "chi2_per_dof = {}", num(fit.reduced_chi2()));
    let _ = writeln!(report, "converged = {}", fit.converged);
    if let Some(t) = &selection {
        for row in t {
            let _ = writeln!(
                report,
                "selection L={} chi2_per_dof = {}",
                row.n_terms,
                num(row.reduced_chi2)
            );
        }
    }
    for (i, t) in fit.spectrum.terms().iter().enumerate() {
        let _ = writeln!(
            report,
            "term {i}: center_hz = {} width_hz = {} weight = {}",
            num(t.center_hz()),
            num(t.width_hz()),
            num(t.weight)
        );
    }
    ctx.write("spectrum.toml", &io::format_spectrum(&fit.spectrum, &header))?;

    let boot = if n_boot > 0 {
        match bootstrap_band(&data, &fit, n_boot, percentiles, ctx.seed, &grid, &opts) {
            Ok(b) => Some(b),
            Err(e) => {
                let _ = writeln!(report, "band = unavailable ({e})");
                ctx.write("fit_report.txt", &report)?;
                return Err(e);
            }
        }
    } else {
        None
    };
    let fitted: Vec<f64> = grid
        .iter()
        .map(|&w| crate::spectral::eval_spectrum(&fit.spectrum, w))
        .collect();
    let (lo, hi) = match &boot {
        Some(b) => (b.band.low.clone(), b.band.high.clone()),
        None => (fitted.clone(), fitted.clone()),
    };
    let rows: Vec<Vec<String>> = (0..grid.len())
        .map(|i| {
            vec![
                num(grid[i]),
                num(grid[i] / (2.0 * std::f64::consts::PI)),
                num(fitted[i]),
                num(lo[i]),
                num(hi[i]),
                u8::from(mask[i]).to_string(),
            ]
        })
        .collect();
    let mut band_header = header.clone();
    band_header.push(format!(
        "band percentiles {},{} from {} bootstrap refits; extrapolated = 1 outside the sampled band",
        percentiles.0, percentiles.1, n_boot
    ));
    ctx.write(
        "band.csv",
        &io::format_table(
            &band_header,
            &["omega_rad_s", "freq_hz", "s_fit", "s_lo", "s_hi", "extrapolated"],
            &rows,
        ),
    )?;
    if let Some(b) = &boot {
        ctx.write("bootstrap.toml", &io::format_bootstrap(&b.spectra, &header))?;
        let _ = writeln!(report, "bootstrap_refits = {}", b.spectra.len());
        let _ = writeln!(report, "bootstrap_failures = {}", b.band.failures);
    }
    ctx.write("fit_report.txt", &report)?;
    print!("{report}");
    if fit.converged {
        Ok(EXIT_OK)
    } else {
        eprintln!("warning: optimizer did not converge; best-so-far fit written");
        Ok(EXIT_CONVERGENCE)
    }
}

fn zero_placeholder() -> SpectralDensity {
    SpectralDensity::symmetric(vec![LorentzianTerm::new(0.0, 1.0, 1.0).unwrap()]).unwrap()
}

#[allow(clippy::too_many_arguments)]
fn cmd_predict(
    ctx: &mut Context,
    spectrum: &Path,
    family: &str,
    grid: Option<String>,
    cycles: Option<String>,
    bootstrap: Option<PathBuf>,
    percentiles: Option<String>,
    k_max: usize,
) -> Result<i32> {
    let family: SequenceFamily = family.parse()?;
    let s = io::read_spectrum(spectrum)?;
    let values: Vec<f64> = match (grid, cycles) {
        (Some(g), _) => {
            let parts: Vec<&str> = g.split(':').collect();
            let [a, b, n] = parts.as_slice() else {
                return Err(Error::Parse(format!("--grid must be start:stop:count, got '{g}'")));
            };
            let (a, b) = (ctx.time(a)?, ctx.time(b)?);
            let n: usize = n
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("--grid count '{n}' is not an integer")))?;
            if !(a > 0.0 && b > 0.0) || n == 0 {
                return Err(Error::InvalidParameter("--grid needs positive bounds and count".into()));
            }
            if n == 1 {
                vec![a]
            } else {
                (0..n).map(|i| a * (b / a).powf(i as f64 / (n - 1) as f64)).collect()
            }
        }
        (None, Some(c)) => c.split(',').map(|v| ctx.time(v)).collect::<Result<_>>()?,
        (None, None) => return Err(Error::InvalidParameter("give --grid or --cycles".into())),
    };
    let pct = match &percentiles {
        Some(p) => pair(p, "--percentiles")?,
        None => (16.0, 84.0),
    };
    ctx.note("command", "predict");
    ctx.note("family", &family);
    ctx.note("k_max", k_max);
    ctx.note("grid", values.iter().map(|v| num(*v)).collect::<Vec<_>>().join(";"));
    ctx.note_file("spectrum", spectrum)?;
    let boot = match &bootstrap {
        Some(p) => {
            ctx.note_file("bootstrap", p)?;
            ctx.note("percentiles", format!("{},{}", pct.0, pct.1));
            Some(io::read_bootstrap(p)?)
        }
        None => None,
    };
    let rates: Vec<f64> = match &s {
        Some(s) => predict_dd_performance(s, &family, &values, k_max)?
            .iter()
            .map(|p| p.1.rate)
            .collect(),
        None => {
            for &v in &values {
                family.instantiate(v)?;
            }
            vec![0.0; values.len()]
        }
    };
    let band: Option<Vec<(f64, f64)>> = match &boot {
        Some(spectra) if !spectra.is_empty() => {
            let per: Vec<Vec<f64>> = spectra
                .iter()
                .map(|b| {
                    values
                        .iter()
                        .map(|&v| Ok(decay_rate_asymptotic(b, &family.instantiate(v)?, k_max)?.rate))
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<_>>()?;
            Some(
                (0..values.len())
                    .map(|i| {
                        let mut col: Vec<f64> = per.iter().map(|r| r[i]).collect();
                        col.sort_by(f64::total_cmp);
                        (percentile(&col, pct.0), percentile(&col, pct.1))
                    })
                    .collect(),
            )
        }
        _ => None,
    };
    let t2 = |r: f64| if r > 0.0 { num(1.0 / r) } else { "inf".to_string() };
    let rows: Vec<Vec<String>> = (0..values.len())
        .map(|i| {
            let mut row = vec![num(values[i]), num(rates[i]), t2(rates[i])];
            if let Some(b) = &band {
                row.push(num(b[i].0));
                row.push(num(b[i].1));
            }
            row
        })
        .collect();
    let mut header = ctx.header(false);
    header.push(format!(
        "family {family}; cycle in s (tau for cpmg); rate in s^-1; t2 in s"
    ));
    let cols: Vec<&str> = if band.is_some() {
        vec!["cycle", "rate", "t2", "rate_lo", "rate_hi"]
    } else {
        vec!["cycle", "rate", "t2"]
    };
    let path = ctx.write("prediction.csv", &io::format_table(&header, &cols, &rows))?;
    println!("{} predictions written to {}", rows.len(), path.display());
    Ok(EXIT_OK)
}

fn cmd_simulate(
    ctx: &mut Context,
    spectrum: &Path,
    sequence: &str,
    cycles: Option<usize>,
    trajectories: Option<usize>,
    write_trace: bool,
) -> Result<i32> {
    let seq: PulseSequence = sequence.parse()?;
    let s = io::read_spectrum(spectrum)?;
    let n_cycles = cycles.or(ctx.config.cycles).unwrap_or(64);
    let n_traj = trajectories.or(ctx.config.trajectories).unwrap_or(10_000);
    ctx.note("command", "simulate");
    ctx.note("sequence", format!("{:?}", seq.pulse_times()));
    ctx.note("cycle", num(seq.cycle()));
    ctx.note("cycles", n_cycles);
    ctx.note("trajectories", n_traj);
    ctx.note("seed", ctx.seed);
    ctx.note_file("spectrum", spectrum)?;
    let opts = SimulationOptions {
        n_trajectories: n_traj,
        master_seed: ctx.seed,
        power_scale: if s.is_some() { 1.0 } else { 0.0 },
        ..Default::default()
    };
    let density = s.unwrap_or_else(zero_placeholder);
    let trace = simulate_sequence(&density, &seq, n_cycles, &opts)?;
    let header = ctx.header(true);
    if write_trace {
        let rows: Vec<Vec<String>> = (0..trace.times.len())
            .map(|i| vec![num(trace.times[i]), num(trace.coherence[i]), num(trace.stderr[i])])
            .collect();
        let mut h = header.clone();
        h.push(format!("{} trajectories; time in s", trace.n_trajectories));
        ctx.write(
            "trace.csv",
            &io::format_table(&h, &["time_s", "coherence", "stderr"], &rows),
        )?;
    }
    let mut report = String::new();
    for h in &header {
        let _ = writeln!(report, "# {h}");
    }
    let code = match extract_t2(&trace) {
        Ok((t2, err)) => {
            let _ = writeln!(report, "T2 = {} ± {} s", num(t2), num(err));
            let _ = writeln!(report, "t2_s = {}", num(t2));
            let _ = writeln!(report, "t2_err_s = {}", num(err));
            let _ = writeln!(report, "max_imaginary_z = {}", num(trace.max_imaginary_z()));
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(report, "no decay observed: {e}");
            EXIT_ORACLE
        }
    };
    ctx.write("simulation.txt", &report)?;
    print!("{report}");
    Ok(code)
}

fn cmd_scaling(
    ctx: &mut Context,
    input: Option<&Path>,
    spins: Option<usize>,
    central: &str,
    satellite: &str,
) -> Result<i32> {
    if input.is_none() && spins.is_none() {
        return Err(Error::InvalidParameter("give a scaling CSV and/or --spins".into()));
    }
    ctx.note("command", "scaling");
    let mut report = String::new();
    if let Some(n) = spins {
        let sys = StarSystem::new(n, gyromagnetic_ratio(central)?, gyromagnetic_ratio(satellite)?)?;
        ctx.note("star", format!("{n},{central},{satellite}"));
        let rows: Vec<Vec<String>> = (0..n)
            .map(|k| Ok(vec![k.to_string(), num(lopsidedness(&sys, k)?)]))
            .collect::<Result<_>>()?;
        let mut h = ctx.header(false);
        h.push(format!("{n} spins, central {central}, satellites {satellite}"));
        ctx.write("lopsidedness.csv", &io::format_table(&h, &["k", "l"], &rows))?;
        let (lo, hi) = sys.bounds();
        let _ = writeln!(report, "l_min = {}", num(lo));
        let _ = writeln!(report, "l_max = {}", num(hi));
    }
    if let Some(p) = input {
        ctx.note_file("input", p)?;
        let pts = io::read_scaling_points(p)?;
        let f = fit_quadratic_scaling(&pts)?;
        let _ = writeln!(report, "points = {}", pts.len());
        let _ = writeln!(report, "c2 = {}", num(f.c2));
        let _ = writeln!(report, "c2_err = {}", num(f.c2_err));
        let _ = writeln!(report, "c0 = {}", num(f.c0));
        let _ = writeln!(report, "c0_err = {}", num(f.c0_err));
    }
    let mut text = String::new();
    for h in ctx.header(false) {
        let _ = writeln!(text, "# {h}");
    }
    text.push_str(&report);
    ctx.write("scaling_report.txt", &text)?;
    print!("{text}");
    Ok(EXIT_OK)
}

fn cmd_filterfn(ctx: &mut Context, sequence: &str, cycles: usize, max_freq: Option<f64>, points: usize) -> Result<i32> {
    let seq: PulseSequence = sequence.parse()?;
    if cycles == 0 || points < 2 {
        return Err(Error::InvalidParameter("need cycles >= 1 and points >= 2".into()));
    }
    let w1 = 2.0 * std::f64::consts::PI / modulation_profile(&seq).period();
    let w_max = match max_freq {
        Some(f) if f > 0.0 => ctx.freq_unit.to_omega(f),
        Some(f) => return Err(Error::InvalidParameter(format!("--max-freq must be positive, got {f}"))),
        None => 20.0 * w1,
    };
    ctx.note("command", "filterfn");
    ctx.note("sequence", format!("{:?}", seq.pulse_times()));
    ctx.note("cycle", num(seq.cycle()));
    ctx.note("cycles", cycles);
    ctx.note("max_omega", num(w_max));
    ctx.note("points", points);
    let rows: Vec<Vec<String>> = (0..points)
        .map(|i| {
            let w = w_max * i as f64 / (points - 1) as f64;
            vec![
                num(w),
                num(w / (2.0 * std::f64::consts::PI)),
                num(filter_function_sq(&seq, w, cycles)),
            ]
        })
        .collect();
    let mut h = ctx.header(false);
    h.push(format!("|F|^2 in s^2 over {cycles} cycles"));
    let path = ctx.write(
        "filter.csv",
        &io::format_table(&h, &["omega_rad_s", "freq_hz", "filter_sq"], &rows),
    )?;
    println!("{points} rows written to {}", path.display());
    Ok(EXIT_OK)
}
