//! CSV, VTK and run-metadata emission.
//!
//! Floats are written with 17 significant digits so every value reads back
//! bit-for-bit. Missing values (a rate on the coarsest level) are empty
//! fields.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use crate::ensemble::{DtDecision, EnergyLedger};
use crate::experiments::{ConvergenceRow, SpreadRow, StatsRow};
use crate::space::{DiscreteField, FieldKind};

#[derive(thiserror::Error, Debug)]
pub enum OutputError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("run metadata: {0}")]
    Json(#[from] serde_json::Error),
}

pub const CONVERGENCE_HEADER: &str = "member,m,h,dt,eps,err_L2max,rate_L2,err_H1int,rate_H1,err_tau_weighted";
pub const STATS_HEADER: &str = "t,dt,series,ke,enstrophy,angmom";
pub const SPREAD_HEADER: &str = "t,series,rel_err";
pub const HISTORY_HEADER: &str = "step,t,dt,decision,indicator";
pub const DIAGNOSTICS_HEADER: &str = "run,steps,max_penalty_residual,ledger_steps,ledger_violations,ledger_min_margin";

fn num(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:.16e}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn convergence_csv(rows: &[ConvergenceRow]) -> String {
    let mut s = format!("{CONVERGENCE_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.member,
            r.m,
            num(r.h),
            num(r.dt),
            num(r.eps),
            num(r.err_l2_max),
            opt(r.rate_l2),
            num(r.err_h1_int),
            opt(r.rate_h1),
            num(r.err_tau_weighted)
        );
    }
    s
}

pub fn stats_csv(rows: &[StatsRow]) -> String {
    let mut s = format!("{STATS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            num(r.t),
            num(r.dt),
            r.series,
            num(r.stats.ke),
            num(r.stats.enstrophy),
            num(r.stats.angmom)
        );
    }
    s
}

pub fn spread_csv(rows: &[SpreadRow]) -> String {
    let mut s = format!("{SPREAD_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", num(r.t), r.series, num(r.rel_err));
    }
    s
}

/// One line per timestep decision. `t` is the time reached by an accepted
/// step, or the time at which a step was rejected; `dt` is the step taken
/// or rejected.
pub fn history_csv(history: &[DtDecision]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for d in history {
        let (step, t, dt, what, ind) = match *d {
            DtDecision::Accepted { step, t, dt, indicator } => (step, t, dt, "accepted", indicator),
            DtDecision::Halved {
                step,
                t,
                rejected_dt,
                indicator,
            } => (step, t, rejected_dt, "halved", indicator),
        };
        let _ = writeln!(s, "{step},{},{},{what},{}", num(t), num(dt), num(ind));
    }
    s
}

/// Per-run solver health: the penalty-identity residual and the energy
/// ledger outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsRow {
    pub run: String,
    pub steps: u64,
    pub max_penalty_residual: f64,
    pub ledger: Option<LedgerSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LedgerSummary {
    pub steps: u64,
    pub violations: usize,
    pub min_margin: f64,
}

impl LedgerSummary {
    pub fn of(ledger: &EnergyLedger) -> Self {
        LedgerSummary {
            steps: ledger.steps,
            violations: ledger.violations.len(),
            min_margin: ledger.min_margin,
        }
    }
}

pub fn diagnostics_csv(rows: &[DiagnosticsRow]) -> String {
    let mut s = format!("{DIAGNOSTICS_HEADER}\n");
    for r in rows {
        let (ls, lv, lm) = match &r.ledger {
            Some(l) => (l.steps.to_string(), l.violations.to_string(), num(l.min_margin)),
            None => Default::default(),
        };
        let _ = writeln!(s, "{},{},{},{ls},{lv},{lm}", r.run, r.steps, num(r.max_penalty_residual));
    }
    s
}

/// Legacy ASCII VTK of a velocity/pressure pair on quadratic triangles.
/// Pressure at edge nodes is the mean of the two endpoint values, which is
/// exact for the P1 field.
pub fn vtk_snapshot(velocity: &DiscreteField, pressure: &DiscreteField, title: &str) -> Result<String, OutputError> {
    if velocity.kind() != FieldKind::Velocity || pressure.kind() != FieldKind::Pressure {
        return Err(OutputError::InvalidArgument("expected a velocity and a pressure field".into()));
    }
    if !Arc::ptr_eq(velocity.space(), pressure.space()) {
        return Err(OutputError::InvalidArgument("fields live on different spaces".into()));
    }
    if title.contains('\n') {
        return Err(OutputError::InvalidArgument("title must be a single line".into()));
    }
    let space = velocity.space();
    let mesh = space.mesh();
    let nv = mesh.num_nodes();
    let nodes = space.nodes();
    let u = velocity.coefficients();
    let p = pressure.coefficients();

    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0");
    let _ = writeln!(s, "{title}");
    let _ = writeln!(s, "ASCII");
    let _ = writeln!(s, "DATASET UNSTRUCTURED_GRID");
    let _ = writeln!(s, "POINTS {} double", nodes.len());
    for x in nodes {
        let _ = writeln!(s, "{} {} {}", num(x[0]), num(x[1]), num(0.0));
    }
    let ne = space.num_elements();
    let _ = writeln!(s, "CELLS {ne} {}", 7 * ne);
    for el in space.elements() {
        let _ = writeln!(s, "6 {} {} {} {} {} {}", el[0], el[1], el[2], el[3], el[4], el[5]);
    }
    let _ = writeln!(s, "CELL_TYPES {ne}");
    for _ in 0..ne {
        let _ = writeln!(s, "22");
    }
    let _ = writeln!(s, "POINT_DATA {}", nodes.len());
    let _ = writeln!(s, "VECTORS velocity double");
    for k in 0..nodes.len() {
        let _ = writeln!(s, "{} {} {}", num(u[2 * k]), num(u[2 * k + 1]), num(0.0));
    }
    let _ = writeln!(s, "SCALARS pressure double 1");
    let _ = writeln!(s, "LOOKUP_TABLE default");
    for v in p.iter().take(nv) {
        let _ = writeln!(s, "{}", num(*v));
    }
    for [a, b] in mesh.edges() {
        let _ = writeln!(s, "{}", num(0.5 * (p[*a] + p[*b])));
    }
    Ok(s)
}

pub fn write_text(path: &Path, contents: &str) -> Result<(), OutputError> {
    let io = |source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    fs::write(path, contents).map_err(io)
}

pub fn write_convergence_csv(path: &Path, rows: &[ConvergenceRow]) -> Result<(), OutputError> {
    write_text(path, &convergence_csv(rows))
}

pub fn write_stats_csv(path: &Path, rows: &[StatsRow]) -> Result<(), OutputError> {
    write_text(path, &stats_csv(rows))
}

pub fn write_spread_csv(path: &Path, rows: &[SpreadRow]) -> Result<(), OutputError> {
    write_text(path, &spread_csv(rows))
}

pub fn write_vtk(path: &Path, velocity: &DiscreteField, pressure: &DiscreteField, title: &str) -> Result<(), OutputError> {
    write_text(path, &vtk_snapshot(velocity, pressure, title)?)
}

/// Version string in the style of `git describe`.
pub fn version_string() -> String {
    match option_env!("PENSEMBLE_GIT_DESCRIBE") {
        Some(d) if !d.is_empty() => d.to_string(),
        _ => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DtSummary {
    pub accepted: u64,
    pub halvings: u64,
    pub dt_first: Option<f64>,
    pub dt_last: Option<f64>,
    pub dt_smallest: Option<f64>,
}

impl DtSummary {
    pub fn from_history(history: &[DtDecision]) -> Self {
        let mut s = DtSummary::default();
        for d in history {
            match *d {
                DtDecision::Accepted { dt, .. } => {
                    s.accepted += 1;
                    s.dt_first.get_or_insert(dt);
                    s.dt_last = Some(dt);
                    s.dt_smallest = Some(s.dt_smallest.map_or(dt, |m| m.min(dt)));
                }
                DtDecision::Halved { .. } => s.halvings += 1,
            }
        }
        s
    }

    /// Adds another run's counts; first/last/smallest widen accordingly.
    pub fn merge(&mut self, other: &DtSummary) {
        self.accepted += other.accepted;
        self.halvings += other.halvings;
        if self.dt_first.is_none() {
            self.dt_first = other.dt_first;
        }
        if other.dt_last.is_some() {
            self.dt_last = other.dt_last;
        }
        self.dt_smallest = match (self.dt_smallest, other.dt_smallest) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
    }
}

/// Contents of `run.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunMetadata {
    pub version: String,
    pub command: String,
    pub config: String,
    pub seed: u64,
    pub deltas: Vec<f64>,
    pub threads: usize,
    pub wall_time_s: f64,
    pub dt: DtSummary,
    pub max_penalty_residual: f64,
    pub energy_ledger_holds: Option<bool>,
    pub outputs: Vec<String>,
}

pub fn write_run_metadata(path: &Path, meta: &RunMetadata) -> Result<(), OutputError> {
    let mut text = serde_json::to_string_pretty(meta)?;
    text.push('\n');
    write_text(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{FlowStats, Series};
    use crate::mesh::generate_unit_square;
    use crate::space::TaylorHoodSpace;

    #[test]
    fn empty_series_is_header_only() {
        assert_eq!(convergence_csv(&[]), format!("{CONVERGENCE_HEADER}\n"));
        assert_eq!(stats_csv(&[]), format!("{STATS_HEADER}\n"));
        assert_eq!(spread_csv(&[]), "t,series,rel_err\n");
    }

    #[test]
    fn one_row_reads_back_exactly() {
        let row = StatsRow {
            t: 0.1 + 0.2,
            dt: 1.0 / 3.0,
            series: Series::Member(2),
            stats: FlowStats {
                ke: std::f64::consts::PI * 1e-7,
                enstrophy: 2.0f64.sqrt(),
                angmom: 1e300,
            },
        };
        let text = stats_csv(&[row]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let f: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(f[2], "2");
        let back: Vec<f64> = [0, 1, 3, 4, 5].iter().map(|&i| f[i].parse().unwrap()).collect();
        assert_eq!(
            back,
            vec![row.t, row.dt, row.stats.ke, row.stats.enstrophy, row.stats.angmom]
        );
    }

    #[test]
    fn missing_rate_is_empty_field() {
        let row = ConvergenceRow {
            member: 1,
            m: 27,
            h: 1.0 / 27.0,
            dt: 1.0 / 270.0,
            eps: 1.0 / 270.0,
            err_l2_max: 1e-4,
            rate_l2: None,
            err_h1_int: 2e-3,
            rate_h1: Some(1.0),
            err_tau_weighted: 3e-3,
        };
        let line = convergence_csv(&[row]).lines().nth(1).unwrap().to_string();
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 10);
        assert_eq!(f[6], "");
        assert_eq!(f[8].parse::<f64>().unwrap(), 1.0);
    }

    #[test]
    fn zero_field_vtk_matches_fixture() {
        let space = TaylorHoodSpace::new(generate_unit_square(1).unwrap());
        let u = DiscreteField::zeros(&space, FieldKind::Velocity);
        let p = DiscreteField::zeros(&space, FieldKind::Pressure);
        let text = vtk_snapshot(&u, &p, "zero").unwrap();
        assert_eq!(text, include_str!("../tests/fixtures/zero_m1.vtk"));
    }

    #[test]
    fn vtk_rejects_swapped_fields() {
        let space = TaylorHoodSpace::new(generate_unit_square(1).unwrap());
        let u = DiscreteField::zeros(&space, FieldKind::Velocity);
        let p = DiscreteField::zeros(&space, FieldKind::Pressure);
        assert!(vtk_snapshot(&p, &u, "x").is_err());
    }

    #[test]
    fn dt_summary_counts_decisions() {
        let h = [
            DtDecision::Halved {
                step: 0,
                t: 0.0,
                rejected_dt: 0.2,
                indicator: 2.0,
            },
            DtDecision::Accepted {
                step: 0,
                t: 0.1,
                dt: 0.1,
                indicator: 0.5,
            },
            DtDecision::Accepted {
                step: 1,
                t: 0.2,
                dt: 0.1,
                indicator: 0.5,
            },
        ];
        let s = DtSummary::from_history(&h);
        assert_eq!((s.accepted, s.halvings), (2, 1));
        assert_eq!((s.dt_first, s.dt_last, s.dt_smallest), (Some(0.1), Some(0.1), Some(0.1)));
    }
}
