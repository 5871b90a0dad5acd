//! Command-line driver: argument parsing, run orchestration and file output.
//!
//! Exit codes: 0 on success, 2 for usage and configuration errors, 3 when a
//! run aborts (missing input, solver failure, Δt underflow, I/O). Failures
//! are reported on stderr as `error[category]: message`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pensemble_core::config::{parse_config, ConfigError, Experiment, MeshSource, Profile, SimulationConfig};
use pensemble_core::ensemble::{CflForm, EnsembleError};
use pensemble_core::experiments::{
    run_convergence_study, run_cylinder_study, run_forced_flow_study, ExperimentError, PerturbationMode,
};
use pensemble_core::linalg::LinalgError;
use pensemble_core::mesh::{generate_unit_square, read_gmsh, MeshError};
use pensemble_core::output::{
    self, diagnostics_csv, history_csv, DiagnosticsRow, DtSummary, LedgerSummary, OutputError, RunMetadata,
};
use pensemble_core::sampling::Magnitudes;
use pensemble_core::space::DiscreteField;
use pensemble_core::assembly::AssemblyError;

/// Environment variable holding the worker-thread count.
pub const THREADS_ENV: &str = "PENSEMBLE_THREADS";

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_ABORT: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "pensemble", about = "Ensemble penalty solver for 2D incompressible flow")]
struct Cli {
    /// Worker threads for assembly and the ensemble map (default: the
    /// PENSEMBLE_THREADS variable, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Taylor-Green convergence study on uniform meshes.
    Converge(ConvergeArgs),
    /// Flow between offset cylinders driven by a rotating body force.
    Cylinder(CylinderArgs),
    /// Run whatever a configuration file describes.
    Run {
        config: PathBuf,
        /// Override the output directory of the file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Read a gmsh file and print its size and quality.
    CheckMesh { file: PathBuf },
    /// Print the version string.
    Version,
}

#[derive(Args, Debug, Clone)]
struct Common {
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    #[arg(long)]
    t_final: Option<f64>,
    #[arg(long)]
    nu: Option<f64>,
    /// Penalty ε (default: Δt).
    #[arg(long)]
    eps: Option<f64>,
    /// Comma-separated δ_j, one per member.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    deltas: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    cfl_form: Option<CflFormArg>,
    #[arg(long)]
    cfl_constant: Option<f64>,
    #[arg(long)]
    dt_min: Option<f64>,
    /// Skip the energy-ledger bookkeeping.
    #[arg(long)]
    no_energy: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ConvergeArgs {
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Δt = dt_factor·h.
    #[arg(long)]
    dt_factor: Option<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct CylinderArgs {
    #[arg(long)]
    mesh: Option<PathBuf>,
    /// Nominal mesh size of the file.
    #[arg(long)]
    lc: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    regrow: bool,
    /// VTK snapshot every N accepted steps.
    #[arg(long)]
    snapshot_every: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ProfileArg {
    Ci,
    Full,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum CflFormArg {
    Theoretical,
    Experimental,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ModeArg {
    Ic,
    #[value(name = "ic+forcing")]
    IcForcing,
}

#[derive(thiserror::Error, Debug)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Output(#[from] OutputError),
    #[error("thread pool: {0}")]
    Threads(String),
}

impl CliError {
    /// Machine-readable category and exit code.
    pub fn category(&self) -> (&'static str, i32) {
        match self {
            CliError::Config(_) => ("config", EXIT_USAGE),
            CliError::Read { source, .. } => io_category(source),
            CliError::Output(_) => ("io", EXIT_ABORT),
            CliError::Threads(_) => ("usage", EXIT_USAGE),
            CliError::Experiment(e) => experiment_category(e),
        }
    }
}

fn io_category(e: &std::io::Error) -> (&'static str, i32) {
    if e.kind() == std::io::ErrorKind::NotFound {
        ("file-not-found", EXIT_ABORT)
    } else {
        ("io", EXIT_ABORT)
    }
}

fn experiment_category(e: &ExperimentError) -> (&'static str, i32) {
    match e {
        ExperimentError::Mesh(MeshError::Io { source, .. }) => io_category(source),
        ExperimentError::Mesh(_) => ("mesh", EXIT_ABORT),
        ExperimentError::Ensemble(EnsembleError::DtUnderflow { .. }) => ("dt-underflow", EXIT_ABORT),
        ExperimentError::Ensemble(EnsembleError::Linalg(l))
        | ExperimentError::Ensemble(EnsembleError::Assembly(AssemblyError::Linalg(l))) => match l {
            LinalgError::Singular { .. } => ("singular-matrix", EXIT_ABORT),
            _ => ("solver", EXIT_ABORT),
        },
        ExperimentError::Ensemble(_) => ("solver", EXIT_ABORT),
        ExperimentError::ForcingGate { .. } => ("forcing-gate", EXIT_ABORT),
        ExperimentError::Output(_) => ("io", EXIT_ABORT),
        ExperimentError::InvalidArgument(_) | ExperimentError::Sampling(_) => ("invalid-argument", EXIT_ABORT),
    }
}

/// Parses `argv` (including the program name), runs, and returns the exit
/// code. Diagnostics go to stderr, summaries to stdout.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            let (cat, code) = e.category();
            eprintln!("error[{cat}]: {e}");
            code
        }
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    if let Some(n) = flag {
        return if n == 0 {
            Err(CliError::Threads("--threads must be at least 1".into()))
        } else {
            Ok(Some(n))
        };
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Threads(format!("{THREADS_ENV}={v} is not a positive integer"))),
        },
        Err(_) => Ok(None),
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let threads = thread_count(cli.threads)?;
    let cfg = match cli.command {
        Command::Version => {
            println!("pensemble {}", output::version_string());
            return Ok(());
        }
        Command::CheckMesh { file } => return check_mesh(&file),
        Command::Converge(a) => converge_config(a)?,
        Command::Cylinder(a) => cylinder_config(a)?,
        Command::Run { config, out } => {
            let text = std::fs::read_to_string(&config).map_err(|source| CliError::Read {
                path: config.clone(),
                source,
            })?;
            let mut cfg = parse_config(&text)?;
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            cfg
        }
    };
    let command = std::env::args().collect::<Vec<_>>().join(" ");
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Threads(e.to_string()))?;
    let used = pool.current_num_threads();
    pool.install(|| run_config(&cfg, used, command))
}

fn check_mesh(file: &Path) -> Result<(), CliError> {
    let mesh = read_gmsh(file).map_err(ExperimentError::from)?;
    let q = mesh.quality();
    println!("file: {}", file.display());
    println!("vertices: {}", mesh.num_nodes());
    println!("triangles: {}", mesh.num_triangles());
    println!("edges: {}", mesh.num_edges());
    println!("boundary edges: {}", mesh.boundary_tags().len());
    println!("area: {:.6}", mesh.area());
    println!("h_max: {:.6}", q.h_max);
    println!("min angle: {:.3} deg", q.min_angle);
    Ok(())
}

fn apply_common(cfg: &mut SimulationConfig, c: Common) {
    if let Some(p) = c.profile {
        cfg.profile = match p {
            ProfileArg::Ci => Profile::Ci,
            ProfileArg::Full => Profile::Full,
        };
    }
    if let Some(t) = c.t_final {
        cfg.t_final = t;
    }
    if let Some(nu) = c.nu {
        cfg.nu = nu;
    }
    if c.eps.is_some() {
        cfg.eps = c.eps;
    }
    if let Some(d) = c.deltas {
        cfg.members = d.len();
        cfg.perturbation.magnitudes = Magnitudes::List(d);
    }
    if let Some(s) = c.seed {
        cfg.perturbation.seed = s;
    }
    if c.cfl_form.is_some() || c.cfl_constant.is_some() {
        let (theo, k) = match cfg.cfl {
            CflForm::Theoretical { c } => (true, c),
            CflForm::Experimental { c } => (false, c),
        };
        let theo = c.cfl_form.map_or(theo, |f| matches!(f, CflFormArg::Theoretical));
        let k = c.cfl_constant.unwrap_or(k);
        cfg.cfl = if theo {
            CflForm::Theoretical { c: k }
        } else {
            CflForm::Experimental { c: k }
        };
    }
    if c.dt_min.is_some() {
        cfg.dt_min = c.dt_min;
    }
    if c.no_energy {
        cfg.track_energy = false;
    }
    if let Some(o) = c.out {
        cfg.output_dir = o;
    }
}

fn converge_config(a: ConvergeArgs) -> Result<SimulationConfig, CliError> {
    let mut cfg = SimulationConfig::defaults(Experiment::Converge);
    if let Some(levels) = a.levels {
        cfg.mesh = MeshSource::Generated { levels };
    }
    if let Some(m) = a.mode {
        cfg.mode = match m {
            ModeArg::Ic => PerturbationMode::IcOnly,
            ModeArg::IcForcing => PerturbationMode::IcAndForcing,
        };
    }
    if let Some(f) = a.dt_factor {
        cfg.dt_factor = f;
    }
    apply_common(&mut cfg, a.common);
    cfg.validate()?;
    Ok(cfg)
}

fn cylinder_config(a: CylinderArgs) -> Result<SimulationConfig, CliError> {
    let mut cfg = SimulationConfig::defaults(Experiment::Cylinder);
    if let MeshSource::File { path, lc } = &mut cfg.mesh {
        if let Some(m) = a.mesh {
            *path = m;
        }
        if let Some(l) = a.lc {
            *lc = l;
        }
    }
    cfg.dt = a.dt;
    cfg.regrow = a.regrow;
    if let Some(k) = a.snapshot_every {
        cfg.snapshot_every = k;
    }
    apply_common(&mut cfg, a.common);
    cfg.validate()?;
    Ok(cfg)
}

/// Runs a validated configuration and writes its outputs.
pub fn run_config(cfg: &SimulationConfig, threads: usize, command: String) -> Result<(), CliError> {
    let start = Instant::now();
    let dir = &cfg.output_dir;
    let mut outputs = Vec::new();
    let write = |outputs: &mut Vec<String>, name: &str, text: &str| -> Result<(), CliError> {
        output::write_text(&dir.join(name), text)?;
        outputs.push(name.to_string());
        Ok(())
    };
    let deltas = cfg.deltas().map_err(ExperimentError::from)?;
    let (dt, max_pen, ledger_holds) = match cfg.experiment {
        Experiment::Converge => {
            let opts = cfg.convergence_options().map_err(ExperimentError::from)?;
            let report = run_convergence_study(&opts)?;
            write(&mut outputs, "convergence.csv", &output::convergence_csv(&report.rows))?;
            let mut diag = Vec::new();
            let mut dt = DtSummary::default();
            let mut holds = cfg.track_energy.then_some(true);
            for l in &report.levels {
                write(&mut outputs, &format!("history_m{}.csv", l.m), &history_csv(&l.history))?;
                dt.merge(&DtSummary::from_history(&l.history));
                if let (Some(h), Some(led)) = (holds.as_mut(), l.ledger.as_ref()) {
                    *h &= led.holds();
                }
                diag.push(DiagnosticsRow {
                    run: format!("m{}", l.m),
                    steps: l.steps,
                    max_penalty_residual: l.max_penalty_residual,
                    ledger: l.ledger.as_ref().map(LedgerSummary::of),
                });
            }
            write(&mut outputs, "diagnostics.csv", &diagnostics_csv(&diag))?;
            for r in &report.rows {
                println!(
                    "member {} m={:>3} err_L2max={:.4e} rate_L2={} err_H1int={:.4e} rate_H1={}",
                    r.member,
                    r.m,
                    r.err_l2_max,
                    fmt_rate(r.rate_l2),
                    r.err_h1_int,
                    fmt_rate(r.rate_h1)
                );
            }
            let pen = report.levels.iter().map(|l| l.max_penalty_residual).fold(0.0, f64::max);
            (dt, pen, holds)
        }
        Experiment::Cylinder | Experiment::Custom => {
            let opts = cfg.cylinder_options().map_err(ExperimentError::from)?;
            let mesh = match &cfg.mesh {
                MeshSource::File { path, .. } => read_gmsh(path).map_err(ExperimentError::from)?,
                MeshSource::Generated { levels } => {
                    generate_unit_square(levels[0]).map_err(ExperimentError::from)?
                }
            };
            let every = cfg.snapshot_every;
            let mut accepted = 0usize;
            let mut snapshots = Vec::new();
            let mut hook = |state: &pensemble_core::EnsembleState, _: &DiscreteField| -> Result<(), ExperimentError> {
                accepted += 1;
                if every > 0 && accepted % every == 0 {
                    for (j, m) in state.members().iter().enumerate() {
                        let name = format!("snapshot_{:06}_member{}.vtk", state.step_index, j + 1);
                        let title = format!("member {} t={:.16e}", j + 1, state.t);
                        output::write_vtk(&dir.join(&name), &m.velocity, &m.pressure, &title)?;
                        snapshots.push(name);
                    }
                }
                Ok(())
            };
            let report = if cfg.experiment == Experiment::Cylinder {
                run_cylinder_study(mesh, &opts, &mut hook)?
            } else {
                run_forced_flow_study(mesh, &opts, &mut hook)?
            };
            outputs.extend(snapshots);
            write(&mut outputs, "stats.csv", &output::stats_csv(&report.stats))?;
            write(&mut outputs, "spread.csv", &output::spread_csv(&report.spread))?;
            write(&mut outputs, "history.csv", &history_csv(&report.history))?;
            let mut diag = vec![DiagnosticsRow {
                run: "ensemble".into(),
                steps: report.accepted,
                max_penalty_residual: report.max_penalty_residual,
                ledger: report.ledger.as_ref().map(LedgerSummary::of),
            }];
            if let Some(r) = &report.reference_ledger {
                diag.push(DiagnosticsRow {
                    run: "ref".into(),
                    steps: report.accepted,
                    max_penalty_residual: report.max_penalty_residual,
                    ledger: Some(LedgerSummary::of(r)),
                });
            }
            write(&mut outputs, "diagnostics.csv", &diagnostics_csv(&diag))?;
            println!(
                "accepted {} steps, {} halvings, t = {}",
                report.accepted, report.halvings, report.final_state.t
            );
            let holds = match (&report.ledger, &report.reference_ledger) {
                (Some(a), Some(b)) => Some(a.holds() && b.holds()),
                (Some(a), None) => Some(a.holds()),
                _ => None,
            };
            (DtSummary::from_history(&report.history), report.max_penalty_residual, holds)
        }
    };
    let meta = RunMetadata {
        version: output::version_string(),
        command,
        config: cfg.serialize(),
        seed: cfg.perturbation.seed,
        deltas,
        threads,
        wall_time_s: start.elapsed().as_secs_f64(),
        dt,
        max_penalty_residual: max_pen,
        energy_ledger_holds: ledger_holds,
        outputs,
    };
    output::write_run_metadata(&dir.join("run.json"), &meta)?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn fmt_rate(r: Option<f64>) -> String {
    r.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}
