//! Command-line front end: `collect`, `run`, `compare`, `audit`, `sweep`.
//!
//! Exit codes: 0 success, 1 audit or closed-loop failure, 2 configuration or
//! I/O error, 3 initial infeasibility.

pub mod config;
pub mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use crate::analysis::{audit_run, closed_loop_metrics, verify_cost_bound, verify_sprocedure_constraints, AuditReport, ClosedLoopMetrics};
use crate::consistency::ConsistencySet;
use crate::controller::{run_closed_loop, RunLog, Scheme};
use crate::error::{Error, Result};
use crate::numerics::SymMatrix;
use crate::plant::{derive_seed, DataRecord, LtiPlant, NoiseSampler};
pub use config::{Experiment, ExperimentConfig};
use plot::{line_chart, Series};

/// Environment variable consulted when neither `--out` nor `output.dir` is given.
pub const OUT_ENV: &str = "DDMPC_OUT";
/// Output directory of last resort.
pub const DEFAULT_OUT: &str = "ddmpc-out";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;

/// Samples and horizon of the cost-bound audit.
const AUDIT_SAMPLES: usize = 100;
const AUDIT_HORIZON: usize = 500;
const BOUNDARY_SAMPLES: usize = 200;

#[derive(Debug, Parser)]
#[command(name = "ddmpc", version, about = "Data-driven min-max MPC experiments")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default, Clone)]
pub struct CommonArgs {
    /// Experiment configuration (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: output.dir, then $DDMPC_OUT, then ./ddmpc-out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// robust, adaptive or static_from_t0.
    #[arg(long, global = true)]
    pub scheme: Option<String>,
    #[arg(long, global = true)]
    pub c: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the offline experiment and write the data record.
    Collect,
    /// Run the closed loop on an offline record.
    Run {
        /// Offline record; collected into the output directory when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run several schemes on the same data and noise.
    Compare {
        #[arg(long, value_delimiter = ',', default_value = "static_from_t0,robust,adaptive")]
        schemes: Vec<String>,
    },
    /// Audit the artifacts of a previous `run`.
    Audit {
        /// Run directory (default: the output directory).
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Locate the largest noise bound G^(-1/2)·I the controller handles.
    Sweep {
        #[arg(long, default_value_t = 1e-4)]
        from: f64,
        #[arg(long, default_value_t = 1.0)]
        to: f64,
    },
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InitialInfeasible { .. } => EXIT_INFEASIBLE,
        Error::ConfigError(_)
        | Error::Io(_)
        | Error::Parse(_)
        | Error::DimError(_)
        | Error::InvalidMatrix(_)
        | Error::NotPsd { .. } => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cli: &Cli) -> Result<i32> {
    let cfg = load_config(&cli.common)?;
    let out = output_dir(&cli.common, &cfg);
    match &cli.command {
        Command::Collect => {
            let exp = cfg.resolve()?;
            let path = cmd_collect(&exp, &out)?;
            println!("wrote {}", path.display());
            Ok(EXIT_OK)
        }
        Command::Run { data } => {
            let exp = cfg.resolve()?;
            let record = match data {
                Some(p) => read_record(p, &exp)?,
                None => {
                    cmd_collect(&exp, &out)?;
                    read_record(&out.join("data.csv"), &exp)?
                }
            };
            let (_, metrics) = cmd_run(&cfg, &exp, &record, &out)?;
            println!("{}", summary_text(&exp, &metrics));
            Ok(EXIT_OK)
        }
        Command::Compare { schemes } => {
            let exp = cfg.resolve()?;
            let schemes = schemes.iter().map(|s| s.parse()).collect::<Result<Vec<Scheme>>>()?;
            let rows = cmd_compare(&exp, &schemes, &out)?;
            print!("{}", compare_text(&rows));
            Ok(EXIT_OK)
        }
        Command::Audit { run } => {
            let dir = run.clone().unwrap_or(out);
            let report = cmd_audit(&dir)?;
            print!("{}", report.to_text());
            Ok(if report.passed() { EXIT_OK } else { EXIT_FAILURE })
        }
        Command::Sweep { from, to } => {
            let exp = cfg.resolve()?;
            let sweep = cmd_sweep(&exp, *from, *to, &out)?;
            match sweep.boundary {
                Some(b) => println!("largest handled noise bound G^(-1/2) ≈ {b:.2e}"),
                None => println!("no noise bound in [{from:e}, {to:e}] was handled"),
            }
            Ok(EXIT_OK)
        }
    }
}

/// Reads `--config` (or defaults) and applies the command-line overrides.
pub fn load_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.scenario.seed = seed;
    }
    if let Some(s) = &args.scheme {
        cfg.mpc.scheme = s.clone();
    }
    if let Some(c) = args.c {
        cfg.mpc.c = Some(c);
    }
    if let Some(out) = &args.out {
        cfg.output.dir = Some(out.clone());
    }
    Ok(cfg)
}

pub fn output_dir(args: &CommonArgs, cfg: &ExperimentConfig) -> PathBuf {
    args.out
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn read_record(path: &Path, exp: &Experiment) -> Result<DataRecord> {
    let rec = DataRecord::read_csv(open(path)?, exp.scenario.plant.g.clone())?;
    if rec.n() != exp.scenario.plant.n() || rec.m() != exp.scenario.plant.m() {
        return Err(Error::DimError(format!(
            "{} holds {} states / {} inputs, the scenario has {} / {}",
            path.display(),
            rec.n(),
            rec.m(),
            exp.scenario.plant.n(),
            exp.scenario.plant.m()
        )));
    }
    Ok(rec)
}

/// Offline record for an experiment (deterministic in the seed).
pub fn collect(exp: &Experiment) -> Result<DataRecord> {
    exp.scenario.collect_offline(exp.scenario.t_f, exp.seed, exp.noise)
}

/// Writes `data.csv` and the `data.meta.toml` sidecar.
pub fn cmd_collect(exp: &Experiment, out: &Path) -> Result<PathBuf> {
    let record = collect(exp)?;
    create_dir(out)?;
    let path = out.join("data.csv");
    record.write_csv(create(&path)?)?;
    let meta = toml::toml! {
        seed = (exp.seed as i64)
        t_f = (exp.scenario.t_f as i64)
        noise = (format!("{:?}", exp.noise))
        plant_hash = (format!("{:016x}", exp.scenario.plant.fingerprint()))
        g = (config::rows_of(exp.scenario.plant.g.as_matrix()))
    };
    write_file(&out.join("data.meta.toml"), meta.to_string())?;
    Ok(path)
}

/// Noise of the closed-loop run, independent of the offline noise stream.
pub fn closed_loop_noise(exp: &Experiment) -> Result<NoiseSampler> {
    NoiseSampler::new(exp.scenario.plant.g.clone(), derive_seed(exp.seed, 3), exp.noise)
}

/// Runs `scheme` on `record` with the experiment's closed-loop noise.
pub fn run_scheme(exp: &Experiment, record: &DataRecord, scheme: Scheme) -> Result<RunLog> {
    let set = ConsistencySet::build_offline(record, exp.mpc.multiplier_mode)?;
    let mut noise = closed_loop_noise(exp)?;
    run_closed_loop(&exp.scenario.plant, set, &exp.mpc, scheme, &exp.scenario.x0, exp.scenario.steps, &mut noise)
}

/// Runs the configured scheme and writes `config.toml`, `runlog.csv`,
/// `certificates.csv`, `summary.txt` and, if enabled, SVG plots.
pub fn cmd_run(cfg: &ExperimentConfig, exp: &Experiment, record: &DataRecord, out: &Path) -> Result<(RunLog, ClosedLoopMetrics)> {
    create_dir(out)?;
    let mut stored = cfg.clone();
    stored.output.dir = None;
    write_file(&out.join("config.toml"), stored.to_toml()?)?;
    if !out.join("data.csv").exists() {
        record.write_csv(create(&out.join("data.csv"))?)?;
    }
    let log = run_scheme(exp, record, exp.scheme)?;
    let log_path = out.join("runlog.csv");
    log.write_csv(create(&log_path)?)?;
    log.write_certificates_csv(create(&out.join("certificates.csv"))?)?;
    if let Some(x) = &log.final_state {
        let line: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        write_file(&out.join("final_state.csv"), line.join(",") + "\n")?;
    }
    let metrics = closed_loop_metrics(&log)?;
    write_file(&out.join("summary.txt"), summary_text(exp, &metrics) + "\n")?;
    if cfg.output.plots {
        let from_disk = RunLog::read_csv(open(&log_path)?)?;
        write_plots(&from_disk, &out.join("plots"))?;
    }
    Ok((log, metrics))
}

pub fn summary_text(exp: &Experiment, m: &ClosedLoopMetrics) -> String {
    format!(
        "scheme {} | c {:e} | total cost {:.6} | mean solve {:.2} ms | RPI entry {} | worst margin {:.4e}",
        exp.scheme,
        exp.c(),
        m.total_cost,
        m.mean_solve_ms,
        m.rpi_entry_step.map(|t| t.to_string()).unwrap_or_else(|| "none".into()),
        m.worst_margin
    )
}

/// State, input, cumulative cost and γ* charts, built from a parsed log.
pub fn write_plots(log: &RunLog, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let t = |r: &crate::controller::RunRow| r.t as f64;
    let states: Vec<Series> = (0..log.n())
        .map(|j| Series { label: format!("x_{j}"), points: log.rows.iter().map(|r| (t(r), r.x[j])).collect() })
        .collect();
    let inputs: Vec<Series> = (0..log.m())
        .map(|j| Series { label: format!("u_{j}"), points: log.rows.iter().map(|r| (t(r), r.u[j])).collect() })
        .collect();
    let mut acc = 0.0;
    let cost = Series {
        label: "cumulative".into(),
        points: log.rows.iter().map(|r| (t(r), { acc += r.stage_cost; acc })).collect(),
    };
    let gamma = Series {
        label: "gamma".into(),
        points: log.rows.iter().filter_map(|r| r.gamma.map(|g| (t(r), g))).collect(),
    };
    write_file(&dir.join("states.svg"), line_chart("State trajectory", "step", &states))?;
    write_file(&dir.join("input.svg"), line_chart("Input", "step", &inputs))?;
    write_file(&dir.join("cost.svg"), line_chart("Cumulative stage cost", "step", &[cost]))?;
    write_file(&dir.join("gamma.svg"), line_chart("Cost bound gamma", "step", &[gamma]))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub scheme: Scheme,
    pub metrics: ClosedLoopMetrics,
}

/// Runs every scheme on one offline record and one noise seed.
pub fn compare(exp: &Experiment, record: &DataRecord, schemes: &[Scheme]) -> Result<Vec<CompareRow>> {
    if schemes.len() < 2 {
        return Err(Error::ConfigError("compare needs at least two schemes".into()));
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = schemes
            .iter()
            .map(|&scheme| scope.spawn(move || run_scheme(exp, record, scheme).and_then(|log| closed_loop_metrics(&log))))
            .collect();
        schemes
            .iter()
            .zip(handles)
            .map(|(&scheme, h)| Ok(CompareRow { scheme, metrics: h.join().expect("scheme run panicked")? }))
            .collect()
    })
}

/// Writes `compare.csv` and `compare.txt`.
pub fn cmd_compare(exp: &Experiment, schemes: &[Scheme], out: &Path) -> Result<Vec<CompareRow>> {
    let record = collect(exp)?;
    let rows = compare(exp, &record, schemes)?;
    create_dir(out)?;
    let mut wtr = csv::Writer::from_writer(create(&out.join("compare.csv"))?);
    wtr.write_record(["scheme", "total_cost", "mean_solve_ms", "rpi_entry_step", "worst_margin"])?;
    for r in &rows {
        wtr.write_record([
            r.scheme.to_string(),
            r.metrics.total_cost.to_string(),
            r.metrics.mean_solve_ms.to_string(),
            r.metrics.rpi_entry_step.map(|t| t.to_string()).unwrap_or_default(),
            r.metrics.worst_margin.to_string(),
        ])?;
    }
    wtr.flush()?;
    write_file(&out.join("compare.txt"), compare_text(&rows))?;
    Ok(rows)
}

pub fn compare_text(rows: &[CompareRow]) -> String {
    let mut s = format!("{:<16} {:>14} {:>14} {:>10}\n", "scheme", "total cost", "mean solve ms", "RPI entry");
    for r in rows {
        s += &format!(
            "{:<16} {:>14.4} {:>14.2} {:>10}\n",
            r.scheme.to_string(),
            r.metrics.total_cost,
            r.metrics.mean_solve_ms,
            r.metrics.rpi_entry_step.map(|t| t.to_string()).unwrap_or_else(|| "-".into())
        );
    }
    s
}

/// Audits a run directory written by `run`; writes `audit.txt` and `audit.csv`.
pub fn cmd_audit(dir: &Path) -> Result<AuditReport> {
    let need = |name: &str| -> Result<PathBuf> {
        let p = dir.join(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::Io(format!("missing run artifact {}", p.display())))
        }
    };
    let cfg = ExperimentConfig::load(&need("config.toml")?)?;
    let exp = cfg.resolve()?;
    let record = read_record(&need("data.csv")?, &exp)?;
    let mut log = RunLog::read_csv(open(&need("runlog.csv")?)?)?;
    log.read_certificates_csv(open(&need("certificates.csv")?)?)?;
    if let Ok(p) = need("final_state.csv") {
        let text = fs::read_to_string(&p)?;
        let v = text
            .trim()
            .split(',')
            .map(|s| s.parse::<f64>().map_err(|e| Error::Parse(format!("{}: {e}", p.display()))))
            .collect::<Result<Vec<_>>>()?;
        log.final_state = Some(DVector::from_vec(v));
    }
    let report = audit_artifacts(&exp, &record, &log)?;
    write_file(&dir.join("audit.txt"), report.to_text())?;
    report.write_csv(create(&dir.join("audit.csv"))?)?;
    Ok(report)
}

/// Closed-loop audits plus the cost-bound and constraint audits of the
/// initial and frozen certificates.
pub fn audit_artifacts(exp: &Experiment, record: &DataRecord, log: &RunLog) -> Result<AuditReport> {
    let mut report = audit_run(log, &exp.mpc)?;
    let set = ConsistencySet::build_offline(record, exp.mpc.multiplier_mode)?;
    let seed = derive_seed(exp.seed, 4);
    if let (Some(row), Some(Some(cert))) = (log.rows.first(), log.certificates.first()) {
        report.merge(verify_cost_bound(cert, &set, &exp.mpc.weights, &row.x, AUDIT_SAMPLES, AUDIT_HORIZON, seed)?);
        report.merge(verify_sprocedure_constraints(cert, &exp.mpc.constraints, BOUNDARY_SAMPLES, seed)?);
    }
    if let Some(frozen) = &log.frozen {
        let mut frozen_report = verify_sprocedure_constraints(frozen, &exp.mpc.constraints, BOUNDARY_SAMPLES, seed)?;
        for c in &mut frozen_report.checks {
            c.name = format!("frozen_{}", c.name);
        }
        report.merge(frozen_report);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    /// `G^(-1/2)`: noise radius per component.
    pub sigma: f64,
    pub handled: bool,
    pub rpi_entry_step: Option<usize>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    /// Largest handled noise bound to 2 significant figures.
    pub boundary: Option<f64>,
}

/// The experiment with noise bound `G = σ⁻²·I`.
pub fn with_noise_radius(exp: &Experiment, sigma: f64) -> Result<Experiment> {
    let n = exp.scenario.plant.n();
    let g = SymMatrix::scaled_identity(n, 1.0 / (sigma * sigma));
    let mut e = exp.clone();
    e.scenario.plant = LtiPlant::new(exp.scenario.plant.a.clone(), exp.scenario.plant.b.clone(), g.clone())?;
    e.mpc.g = g;
    Ok(e)
}

/// A noise bound is handled when the run completes within its constraints
/// and reaches the RPI set.
pub fn sweep_point(exp: &Experiment, sigma: f64) -> Result<SweepPoint> {
    let e = with_noise_radius(exp, sigma)?;
    let record = collect(&e)?;
    let outcome = run_scheme(&e, &record, e.scheme).and_then(|log| closed_loop_metrics(&log));
    Ok(match outcome {
        Ok(m) => {
            let handled = m.rpi_entry_step.is_some() && m.worst_margin >= -crate::analysis::AUDIT_TOL;
            let detail = if handled { "ok".into() } else { format!("rpi entry {:?}, worst margin {:e}", m.rpi_entry_step, m.worst_margin) };
            SweepPoint { sigma, handled, rpi_entry_step: m.rpi_entry_step, detail }
        }
        Err(err @ (Error::ConfigError(_) | Error::Io(_) | Error::DimError(_))) => return Err(err),
        Err(err) => SweepPoint { sigma, handled: false, rpi_entry_step: None, detail: err.to_string() },
    })
}

fn two_sig(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    let e = v.abs().log10().floor() - 1.0;
    let p = 10f64.powf(e);
    (v / p).round() * p
}

/// Doubles `σ` from `from` until the first unhandled bound (or `to`), then
/// bisects geometrically until both ends agree to 2 significant figures.
pub fn sweep(exp: &Experiment, from: f64, to: f64) -> Result<SweepResult> {
    if !(from > 0.0 && to >= from && to.is_finite()) {
        return Err(Error::ConfigError(format!("invalid sweep range [{from:e}, {to:e}]")));
    }
    let mut points = Vec::new();
    let mut lo: Option<f64> = None;
    let mut hi: Option<f64> = None;
    let mut sigma = from;
    loop {
        let p = sweep_point(exp, sigma)?;
        log::info!("sweep σ = {sigma:e}: {}", p.detail);
        let ok = p.handled;
        points.push(p);
        if !ok {
            hi = Some(sigma);
            break;
        }
        lo = Some(sigma);
        if sigma >= to {
            break;
        }
        sigma = (sigma * 2.0).min(to);
    }
    if let (Some(mut a), Some(mut b)) = (lo, hi) {
        for _ in 0..40 {
            if two_sig(a) == two_sig(b) {
                break;
            }
            let mid = (a * b).sqrt();
            let p = sweep_point(exp, mid)?;
            log::info!("sweep σ = {mid:e}: {}", p.detail);
            if p.handled {
                a = mid;
            } else {
                b = mid;
            }
            points.push(p);
        }
        lo = Some(a);
    }
    points.sort_by(|x, y| x.sigma.total_cmp(&y.sigma));
    Ok(SweepResult { points, boundary: lo.map(two_sig) })
}

/// Runs [`sweep`] and writes `sweep.csv`.
pub fn cmd_sweep(exp: &Experiment, from: f64, to: f64, out: &Path) -> Result<SweepResult> {
    let res = sweep(exp, from, to)?;
    create_dir(out)?;
    let mut wtr = csv::Writer::from_writer(create(&out.join("sweep.csv"))?);
    wtr.write_record(["sigma", "handled", "rpi_entry_step", "detail"])?;
    for p in &res.points {
        wtr.write_record([
            p.sigma.to_string(),
            p.handled.to_string(),
            p.rpi_entry_step.map(|t| t.to_string()).unwrap_or_default(),
            p.detail.clone(),
        ])?;
    }
    wtr.flush()?;
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_significant_figures() {
        assert_eq!(two_sig(0.068_43), 0.068);
        assert_eq!(two_sig(1234.0), 1200.0);
        assert_eq!(two_sig(0.0), 0.0);
    }

    #[test]
    fn error_codes_are_stable() {
        assert_eq!(exit_code(&Error::InitialInfeasible { c: 1.0 }), 3);
        assert_eq!(exit_code(&Error::ConfigError("x".into())), 2);
        assert_eq!(exit_code(&Error::Io("x".into())), 2);
        assert_eq!(exit_code(&Error::SolverFailed { step: 2, detail: String::new() }), 1);
    }

    #[test]
    fn out_flag_beats_config_and_environment() {
        let mut cfg = ExperimentConfig::default();
        cfg.output.dir = Some("from-config".into());
        let args = CommonArgs { out: Some("from-flag".into()), ..Default::default() };
        assert_eq!(output_dir(&args, &cfg), PathBuf::from("from-flag"));
        assert_eq!(output_dir(&CommonArgs::default(), &cfg), PathBuf::from("from-config"));
    }

    #[test]
    fn compare_needs_two_schemes() {
        let mut cfg = ExperimentConfig::default();
        cfg.scenario.name = "scalar".into();
        let exp = cfg.resolve().unwrap();
        let record = collect(&exp).unwrap();
        assert!(matches!(compare(&exp, &record, &[Scheme::Robust]), Err(Error::ConfigError(_))));
    }
}
