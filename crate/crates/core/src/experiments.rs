//! The two reference experiments: a Taylor-Green convergence study on the
//! unit square and the rotating flow between offset cylinders.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{assemble_forcing, assemble_static, DirichletValues, OperatorSet};
use crate::ensemble::{
    ensemble_mean, run_adaptive, AdaptiveOptions, CflForm, DtDecision, EnergyLedger, EnsembleError,
    EnsembleProblem, EnsembleState, Member, Stepper,
};
use crate::mesh::{generate_unit_square, Mesh, MeshError, Point};
use crate::sampling::{bump_initial, perturb_multiplicative, SamplingError};
use crate::space::{DiscreteField, FieldKind, TaylorHoodSpace};

#[derive(thiserror::Error, Debug)]
pub enum ExperimentError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Output(#[from] crate::output::OutputError),
    #[error("manufactured forcing residual {residual:e} exceeds {tolerance:e} at ({x}, {y}, {t})")]
    ForcingGate { residual: f64, tolerance: f64, x: f64, y: f64, t: f64 },
}

/// Taylor-Green vortex `s·u`, `s²·p` with time factor `sin t`.
///
/// With `S = sin t`, `C = cos t` the forcing that makes it an exact solution
/// of the momentum equation is
///
/// ```text
/// f₁ = −s cos x sin y (C + 2νS) − s² sin 2x S²
/// f₂ =  s sin x cos y (C + 2νS) − s² sin 2y S²
/// ```
///
/// The linear part is `u_t − νΔu`; the quadratic part combines
/// `u·∇u = −½ s² S² (sin 2x, sin 2y)` and `∇p`, which contributes the same again.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaylorGreen {
    pub nu: f64,
    pub scale: f64,
}

impl TaylorGreen {
    pub fn new(nu: f64) -> Self {
        TaylorGreen { nu, scale: 1.0 }
    }

    pub fn scaled(nu: f64, scale: f64) -> Self {
        TaylorGreen { nu, scale }
    }

    pub fn velocity(&self, p: Point, t: f64) -> [f64; 2] {
        let (x, y) = (p[0], p[1]);
        let s = self.scale * t.sin();
        [-x.cos() * y.sin() * s, x.sin() * y.cos() * s]
    }

    /// `g[c][d] = ∂u_c/∂x_d`
    pub fn gradient(&self, p: Point, t: f64) -> [[f64; 2]; 2] {
        let (x, y) = (p[0], p[1]);
        let s = self.scale * t.sin();
        [
            [x.sin() * y.sin() * s, -x.cos() * y.cos() * s],
            [x.cos() * y.cos() * s, -x.sin() * y.sin() * s],
        ]
    }

    pub fn pressure(&self, p: Point, t: f64) -> f64 {
        let s = self.scale * t.sin();
        0.25 * ((2.0 * p[0]).cos() + (2.0 * p[1]).cos()) * s * s
    }

    pub fn forcing(&self, p: Point, t: f64) -> [f64; 2] {
        let (x, y) = (p[0], p[1]);
        let (sn, cs) = t.sin_cos();
        let lin = self.scale * (cs + 2.0 * self.nu * sn);
        let quad = self.scale * self.scale * sn * sn;
        [
            -x.cos() * y.sin() * lin - (2.0 * x).sin() * quad,
            x.sin() * y.cos() * lin - (2.0 * y).sin() * quad,
        ]
    }
}

/// `(u, v, p)` of the unit Taylor-Green vortex.
pub fn taylor_green_exact(x: f64, y: f64, t: f64) -> [f64; 3] {
    let tg = TaylorGreen::new(1.0);
    let u = tg.velocity([x, y], t);
    [u[0], u[1], tg.pressure([x, y], t)]
}

pub fn taylor_green_forcing(x: f64, y: f64, t: f64, nu: f64) -> [f64; 2] {
    TaylorGreen::new(nu).forcing([x, y], t)
}

/// Euclidean norm of `u_t + u·∇u − νΔu + ∇p − f` with every derivative of
/// the exact solution replaced by a central difference of step `h`.
pub fn forcing_residual(tg: &TaylorGreen, p: Point, t: f64, h: f64) -> f64 {
    let u = |x: f64, y: f64, s: f64| tg.velocity([x, y], s);
    let (x, y) = (p[0], p[1]);
    let u0 = u(x, y, t);
    let (uxp, uxm) = (u(x + h, y, t), u(x - h, y, t));
    let (uyp, uym) = (u(x, y + h, t), u(x, y - h, t));
    let (utp, utm) = (u(x, y, t + h), u(x, y, t - h));
    let px = (tg.pressure([x + h, y], t) - tg.pressure([x - h, y], t)) / (2.0 * h);
    let py = (tg.pressure([x, y + h], t) - tg.pressure([x, y - h], t)) / (2.0 * h);
    let grad_p = [px, py];
    let f = tg.forcing(p, t);
    let mut r2 = 0.0;
    for c in 0..2 {
        let ut = (utp[c] - utm[c]) / (2.0 * h);
        let ux = (uxp[c] - uxm[c]) / (2.0 * h);
        let uy = (uyp[c] - uym[c]) / (2.0 * h);
        let lap = (uxp[c] + uxm[c] + uyp[c] + uym[c] - 4.0 * u0[c]) / (h * h);
        let r = ut + u0[0] * ux + u0[1] * uy - tg.nu * lap + grad_p[c] - f[c];
        r2 += r * r;
    }
    r2.sqrt()
}

pub const FORCING_GATE_TOLERANCE: f64 = 1e-6;

/// Checks the manufactured forcing at `n` seeded random points of
/// `[0,1]² × [0,1]`; returns the largest residual.
pub fn verify_manufactured_forcing(tg: &TaylorGreen, n: usize, seed: u64) -> Result<f64, ExperimentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let (x, y, t) = (rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
        let r = forcing_residual(tg, [x, y], t, 1e-4);
        if !(r <= FORCING_GATE_TOLERANCE) {
            return Err(ExperimentError::ForcingGate {
                residual: r,
                tolerance: FORCING_GATE_TOLERANCE,
                x,
                y,
                t,
            });
        }
        worst = worst.max(r);
    }
    Ok(worst)
}

/// L2 and H1-seminorm errors of a velocity field against an exact solution
/// evaluated at the quadrature points.
pub fn field_errors(
    field: &DiscreteField,
    exact: impl Fn(Point) -> ([f64; 2], [[f64; 2]; 2]) + Sync,
) -> (f64, f64) {
    let space = field.space();
    let rule = space.rule();
    let tables = space.tables();
    let coef = field.coefficients();
    let (l2, h1) = space
        .elements()
        .par_iter()
        .zip(space.geometry().par_iter())
        .map(|(el, geo)| {
            let (mut l2, mut h1) = (0.0, 0.0);
            for (q, &wq) in rule.weights.iter().enumerate() {
                let w = wq * geo.det;
                let mut v = [0.0; 2];
                let mut g = [[0.0; 2]; 2];
                for a in 0..6 {
                    let d = geo.physical_gradient(tables.p2_gradients[q][a]);
                    for c in 0..2 {
                        let k = coef[2 * el[a] + c];
                        v[c] += k * tables.p2_values[q][a];
                        g[c][0] += k * d[0];
                        g[c][1] += k * d[1];
                    }
                }
                let (ue, ge) = exact(geo.map(rule.points[q]));
                for c in 0..2 {
                    l2 += w * (v[c] - ue[c]).powi(2);
                    h1 += w * ((g[c][0] - ge[c][0]).powi(2) + (g[c][1] - ge[c][1]).powi(2));
                }
            }
            (l2, h1)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    (l2.sqrt(), h1.sqrt())
}

/// Errors at one time level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorSample {
    pub t: f64,
    pub l2: f64,
    pub h1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorMetrics {
    /// `max_n ‖e(t_n)‖`
    pub l2_max: f64,
    /// `Σ_n (t_{n+1} − t_n)‖∇e(t_n)‖` (left endpoints)
    pub h1_integrated: f64,
    /// `sup_{n≥1} min(t_n, 1)‖∇e(t_n)‖`
    pub tau_weighted: f64,
}

pub fn tau(t: f64) -> f64 {
    t.min(1.0)
}

/// Reduces a time series of errors (sorted by time, starting at `t₀`).
pub fn error_metrics(samples: &[ErrorSample]) -> ErrorMetrics {
    let mut m = ErrorMetrics::default();
    for (k, s) in samples.iter().enumerate() {
        m.l2_max = m.l2_max.max(s.l2);
        if let Some(next) = samples.get(k + 1) {
            m.h1_integrated += (next.t - s.t) * s.h1;
        }
        if k > 0 {
            m.tau_weighted = m.tau_weighted.max(tau(s.t) * s.h1);
        }
    }
    m
}

/// `ln(e₁/e₂) / ln(h₁/h₂)`
pub fn convergence_rate(e1: f64, e2: f64, h1: f64, h2: f64) -> f64 {
    (e1 / e2).ln() / (h1 / h2).ln()
}

/// How the two convergence-study members differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PerturbationMode {
    /// `u⁰_j = (1+δ_j)u⁰` only. The Taylor-Green initial state is zero, so
    /// the members coincide.
    IcOnly,
    /// Member `j` also follows the manufactured solution scaled by `1+δ_j`
    /// (forcing, boundary data and reference solution).
    IcAndForcing,
}

impl fmt::Display for PerturbationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PerturbationMode::IcOnly => "ic",
            PerturbationMode::IcAndForcing => "ic+forcing",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceOptions {
    pub levels: Vec<usize>,
    pub t_final: f64,
    pub nu: f64,
    pub deltas: Vec<f64>,
    pub mode: PerturbationMode,
    /// `Δt = dt_factor · h`
    pub dt_factor: f64,
    /// Penalty; `None` means `ε = Δt`.
    pub eps: Option<f64>,
    pub cfl: CflForm,
    pub track_energy: bool,
}

impl Default for ConvergenceOptions {
    fn default() -> Self {
        ConvergenceOptions {
            levels: vec![27, 41, 61],
            t_final: 1.0,
            nu: 1.0,
            deltas: vec![1e-3, -1e-3],
            mode: PerturbationMode::IcAndForcing,
            dt_factor: 0.1,
            eps: None,
            cfl: CflForm::Theoretical { c: 1.0 },
            track_energy: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    /// 1-based member id.
    pub member: usize,
    pub m: usize,
    pub h: f64,
    pub dt: f64,
    pub eps: f64,
    pub err_l2_max: f64,
    pub rate_l2: Option<f64>,
    pub err_h1_int: f64,
    pub rate_h1: Option<f64>,
    pub err_tau_weighted: f64,
}

/// Everything measured on one refinement level.
#[derive(Debug, Clone)]
pub struct LevelReport {
    pub m: usize,
    pub h: f64,
    pub dt: f64,
    pub eps: f64,
    pub metrics: Vec<ErrorMetrics>,
    /// Errors of the interpolated exact solution over the same time levels.
    pub baseline: Vec<ErrorMetrics>,
    pub ledger: Option<EnergyLedger>,
    pub history: Vec<DtDecision>,
    pub max_penalty_residual: f64,
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    pub levels: Vec<LevelReport>,
    pub forcing_gate_residual: f64,
}

struct TaylorGreenProblem {
    space: Arc<TaylorHoodSpace>,
    solutions: Vec<TaylorGreen>,
}

impl EnsembleProblem for TaylorGreenProblem {
    fn load(&self, member: usize, t: f64) -> Vec<f64> {
        let tg = self.solutions[member];
        assemble_forcing(&self.space, |p, s| tg.forcing(p, s), t)
    }

    fn boundary(&self, member: usize, t: f64) -> DirichletValues {
        let tg = self.solutions[member];
        DirichletValues::from_fn(&self.space, |p| tg.velocity(p, t))
    }
}

fn run_level(m: usize, opts: &ConvergenceOptions) -> Result<LevelReport, ExperimentError> {
    let mesh = generate_unit_square(m)?;
    let h = mesh.h_char();
    let space = TaylorHoodSpace::new(mesh);
    let ops = Arc::new(assemble_static(&space));
    let dt = opts.dt_factor * h;
    let eps = opts.eps.unwrap_or(dt);
    let base = TaylorGreen::new(opts.nu);
    let solutions: Vec<TaylorGreen> = opts
        .deltas
        .iter()
        .map(|d| match opts.mode {
            PerturbationMode::IcOnly => base,
            PerturbationMode::IcAndForcing => TaylorGreen::scaled(opts.nu, 1.0 + d),
        })
        .collect();
    let u0 = DiscreteField::interpolate_velocity(&space, |p| base.velocity(p, 0.0));
    let members = opts
        .deltas
        .iter()
        .map(|&d| Ok(Member::from_velocity(perturb_multiplicative(&u0, d)?)?))
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    let state = EnsembleState::new(members, 0.0, dt, eps)?;
    let problem = TaylorGreenProblem {
        space: Arc::clone(&space),
        solutions: solutions.clone(),
    };

    let sample = |st: &EnsembleState| -> (Vec<ErrorSample>, Vec<ErrorSample>) {
        let t = st.t;
        st.members()
            .iter()
            .zip(&solutions)
            .map(|(mem, tg)| {
                let exact = |p: Point| (tg.velocity(p, t), tg.gradient(p, t));
                let (l2, h1) = field_errors(&mem.velocity, exact);
                let interp = DiscreteField::interpolate_velocity(&space, |p| tg.velocity(p, t));
                let (bl2, bh1) = field_errors(&interp, exact);
                (ErrorSample { t, l2, h1 }, ErrorSample { t, l2: bl2, h1: bh1 })
            })
            .unzip()
    };
    let j = opts.deltas.len();
    let mut series: Vec<Vec<ErrorSample>> = vec![Vec::new(); j];
    let mut baseline: Vec<Vec<ErrorSample>> = vec![Vec::new(); j];
    let push = |series: &mut Vec<Vec<ErrorSample>>, baseline: &mut Vec<Vec<ErrorSample>>, st: &EnsembleState| {
        let (e, b) = sample(st);
        for k in 0..j {
            series[k].push(e[k]);
            baseline[k].push(b[k]);
        }
    };
    push(&mut series, &mut baseline, &state);

    let mut stepper = Stepper::new(Arc::clone(&space), Arc::clone(&ops), opts.nu)?;
    let mut aopts = AdaptiveOptions::new(opts.t_final, h, opts.cfl, dt);
    aopts.track_energy = opts.track_energy;
    let run = run_adaptive(&mut stepper, state, &problem, &aopts, &mut |acc| {
        push(&mut series, &mut baseline, acc.current);
        Ok(())
    })?;
    Ok(LevelReport {
        m,
        h,
        dt,
        eps,
        metrics: series.iter().map(|s| error_metrics(s)).collect(),
        baseline: baseline.iter().map(|s| error_metrics(s)).collect(),
        ledger: run.ledger,
        history: run.history,
        max_penalty_residual: run.max_penalty_residual,
        steps: run.accepted,
    })
}

/// Runs every level (in parallel), then fills in the rates between
/// consecutive levels. The manufactured forcing is checked first.
pub fn run_convergence_study(opts: &ConvergenceOptions) -> Result<ConvergenceReport, ExperimentError> {
    if opts.levels.is_empty() || opts.levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ExperimentError::InvalidArgument(
            "levels must be nonempty and strictly increasing".into(),
        ));
    }
    if opts.deltas.is_empty() {
        return Err(ExperimentError::InvalidArgument("at least one member is required".into()));
    }
    let gate = opts
        .deltas
        .iter()
        .map(|d| verify_manufactured_forcing(&TaylorGreen::scaled(opts.nu, 1.0 + d), 1000, 0x7a11_0f00))
        .try_fold(0.0f64, |acc, r| r.map(|v| acc.max(v)))?;
    let levels: Vec<LevelReport> = opts
        .levels
        .par_iter()
        .map(|&m| run_level(m, opts))
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    for member in 0..opts.deltas.len() {
        for (k, lv) in levels.iter().enumerate() {
            let e = lv.metrics[member];
            let (rate_l2, rate_h1) = match k.checked_sub(1).map(|p| &levels[p]) {
                Some(prev) => {
                    let pe = prev.metrics[member];
                    (
                        Some(convergence_rate(pe.l2_max, e.l2_max, prev.h, lv.h)),
                        Some(convergence_rate(pe.h1_integrated, e.h1_integrated, prev.h, lv.h)),
                    )
                }
                None => (None, None),
            };
            rows.push(ConvergenceRow {
                member: member + 1,
                m: lv.m,
                h: lv.h,
                dt: lv.dt,
                eps: lv.eps,
                err_l2_max: e.l2_max,
                rate_l2,
                err_h1_int: e.h1_integrated,
                rate_h1,
                err_tau_weighted: e.tau_weighted,
            });
        }
    }
    Ok(ConvergenceReport {
        rows,
        levels,
        forcing_gate_residual: gate,
    })
}

/// Counterclockwise rotational forcing `(−4y(1−r²), 4x(1−r²))`.
pub fn offset_cylinder_forcing(x: f64, y: f64) -> [f64; 2] {
    let w = 4.0 * (1.0 - x * x - y * y);
    [-y * w, x * w]
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FlowStats {
    /// `½‖u‖²`
    pub ke: f64,
    /// `½ν‖∇×u‖²`
    pub enstrophy: f64,
    /// `|∫ x·v − y·u|`
    pub angmom: f64,
}

/// Kinetic energy, enstrophy and absolute angular momentum by quadrature.
pub fn flow_statistics(field: &DiscreteField, nu: f64) -> FlowStats {
    let space = field.space();
    let rule = space.rule();
    let tables = space.tables();
    let coef = field.coefficients();
    let parts: Vec<[f64; 3]> = space
        .elements()
        .par_iter()
        .zip(space.geometry().par_iter())
        .map(|(el, geo)| {
            let mut acc = [0.0; 3];
            for (q, &wq) in rule.weights.iter().enumerate() {
                let w = wq * geo.det;
                let mut v = [0.0; 2];
                let mut curl = 0.0;
                for a in 0..6 {
                    let d = geo.physical_gradient(tables.p2_gradients[q][a]);
                    let (cu, cv) = (coef[2 * el[a]], coef[2 * el[a] + 1]);
                    v[0] += cu * tables.p2_values[q][a];
                    v[1] += cv * tables.p2_values[q][a];
                    curl += cv * d[0] - cu * d[1];
                }
                let x = geo.map(rule.points[q]);
                acc[0] += w * (v[0] * v[0] + v[1] * v[1]);
                acc[1] += w * curl * curl;
                acc[2] += w * (x[0] * v[1] - x[1] * v[0]);
            }
            acc
        })
        .collect();
    let s = parts
        .iter()
        .fold([0.0; 3], |a, b| [a[0] + b[0], a[1] + b[1], a[2] + b[2]]);
    FlowStats {
        ke: 0.5 * s[0],
        enstrophy: 0.5 * nu * s[1],
        angmom: s[2].abs(),
    }
}

/// `‖u − u_ref‖ / ‖u_ref‖` in the mass-matrix norm; NaN when `u_ref = 0`.
pub fn relative_difference(u: &DiscreteField, reference: &DiscreteField, ops: &OperatorSet) -> f64 {
    let r = reference.coefficients();
    let d: Vec<f64> = u.coefficients().iter().zip(r).map(|(a, b)| a - b).collect();
    let den = ops.mass.bilinear(r, r).max(0.0).sqrt();
    if den == 0.0 {
        return f64::NAN;
    }
    ops.mass.bilinear(&d, &d).max(0.0).sqrt() / den
}

/// Relative distances of each member and of the mean from the reference:
/// returns `(members, mean)`.
pub fn spread_curves(
    members: &[DiscreteField],
    mean: &DiscreteField,
    reference: &DiscreteField,
    ops: &OperatorSet,
) -> (Vec<f64>, f64) {
    (
        members.iter().map(|u| relative_difference(u, reference, ops)).collect(),
        relative_difference(mean, reference, ops),
    )
}

/// Which series a statistics row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Series {
    /// 1-based member id.
    Member(usize),
    Mean,
    Reference,
}

impl fmt::Display for Series {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Series::Member(j) => write!(f, "{j}"),
            Series::Mean => f.write_str("mean"),
            Series::Reference => f.write_str("ref"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatsRow {
    pub t: f64,
    pub dt: f64,
    pub series: Series,
    pub stats: FlowStats,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpreadRow {
    pub t: f64,
    pub series: Series,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct CylinderOptions {
    /// Target mesh size of the input mesh; `Δt = lc/10` unless overridden.
    pub lc: f64,
    pub t_final: f64,
    pub nu: f64,
    pub deltas: Vec<f64>,
    pub dt: Option<f64>,
    /// Penalty; `None` means `ε = Δt`.
    pub eps: Option<f64>,
    pub cfl: CflForm,
    pub dt_min: Option<f64>,
    pub regrow: bool,
    pub track_energy: bool,
}

impl Default for CylinderOptions {
    fn default() -> Self {
        CylinderOptions {
            lc: 0.1,
            t_final: 10.0,
            nu: 1.0 / 150.0,
            deltas: vec![0.1, -0.1],
            dt: None,
            eps: None,
            cfl: CflForm::Experimental { c: 1200.0 },
            dt_min: None,
            regrow: false,
            track_energy: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CylinderReport {
    pub stats: Vec<StatsRow>,
    pub spread: Vec<SpreadRow>,
    pub history: Vec<DtDecision>,
    pub ledger: Option<EnergyLedger>,
    pub reference_ledger: Option<EnergyLedger>,
    pub max_penalty_residual: f64,
    pub accepted: u64,
    pub halvings: u64,
    pub final_state: EnsembleState,
}

pub const OUTER_WALL: i32 = 1;
pub const INNER_WALL: i32 = 2;
const WALL_TOLERANCE: f64 = 1e-6;

pub fn on_outer_wall(p: Point) -> bool {
    ((p[0] * p[0] + p[1] * p[1]).sqrt() - 1.0).abs() < WALL_TOLERANCE
}

pub fn on_inner_wall(p: Point) -> bool {
    (((p[0] - 0.5).powi(2) + p[1] * p[1]).sqrt() - 0.5).abs() < WALL_TOLERANCE
}

/// Tags the two walls of the offset-cylinder domain geometrically and
/// checks that every boundary edge lies on one of them.
pub fn tag_cylinder_walls(mesh: &mut Mesh) -> Result<(), ExperimentError> {
    mesh.classify_boundary(&[(OUTER_WALL, &on_outer_wall), (INNER_WALL, &on_inner_wall)]);
    if let Some((&e, _)) = mesh
        .boundary_tags()
        .iter()
        .find(|(_, &t)| t != OUTER_WALL && t != INNER_WALL)
    {
        let [a, b] = mesh.edges()[e];
        return Err(ExperimentError::InvalidArgument(format!(
            "boundary edge {e} ({:?} - {:?}) is on neither cylinder wall",
            mesh.nodes()[a],
            mesh.nodes()[b]
        )));
    }
    Ok(())
}

struct CylinderProblem {
    space: Arc<TaylorHoodSpace>,
    load: Vec<f64>,
}

impl EnsembleProblem for CylinderProblem {
    fn load(&self, _member: usize, _t: f64) -> Vec<f64> {
        self.load.clone()
    }

    fn boundary(&self, _member: usize, _t: f64) -> DirichletValues {
        DirichletValues::homogeneous(&self.space)
    }
}

fn stats_rows(st: &EnsembleState, mean: &DiscreteField, reference: &DiscreteField, dt: f64, nu: f64) -> Vec<StatsRow> {
    let mut fields: Vec<(Series, &DiscreteField)> = st
        .members()
        .iter()
        .enumerate()
        .map(|(k, m)| (Series::Member(k + 1), &m.velocity))
        .collect();
    fields.push((Series::Mean, mean));
    fields.push((Series::Reference, reference));
    fields
        .into_iter()
        .map(|(series, f)| StatsRow {
            t: st.t,
            dt,
            series,
            stats: flow_statistics(f, nu),
        })
        .collect()
}

fn spread_rows(st: &EnsembleState, mean: &DiscreteField, reference: &DiscreteField, ops: &OperatorSet) -> Vec<SpreadRow> {
    let vel: Vec<DiscreteField> = st.members().iter().map(|m| m.velocity.clone()).collect();
    let (members, mean_err) = spread_curves(&vel, mean, reference, ops);
    members
        .into_iter()
        .enumerate()
        .map(|(k, e)| SpreadRow {
            t: st.t,
            series: Series::Member(k + 1),
            rel_err: e,
        })
        .chain(std::iter::once(SpreadRow {
            t: st.t,
            series: Series::Mean,
            rel_err: mean_err,
        }))
        .collect()
}

/// Runs the perturbed ensemble with adaptive timestepping and, in lockstep
/// on the accepted timesteps, an unperturbed single-member reference.
/// `hook` sees every accepted ensemble state and the reference velocity.
pub fn run_cylinder_study(
    mut mesh: Mesh,
    opts: &CylinderOptions,
    hook: &mut dyn FnMut(&EnsembleState, &DiscreteField) -> Result<(), ExperimentError>,
) -> Result<CylinderReport, ExperimentError> {
    if !(opts.lc > 0.0 && opts.t_final > 0.0) {
        return Err(ExperimentError::InvalidArgument("lc and t_final must be positive".into()));
    }
    if opts.deltas.is_empty() {
        return Err(ExperimentError::InvalidArgument("at least one member is required".into()));
    }
    tag_cylinder_walls(&mut mesh)?;
    run_forced_flow_study(mesh, opts, hook)
}

/// The cylinder study on an arbitrary mesh: no-slip on every boundary edge,
/// the rotating body force, bump perturbations of a fluid at rest.
pub fn run_forced_flow_study(
    mesh: Mesh,
    opts: &CylinderOptions,
    hook: &mut dyn FnMut(&EnsembleState, &DiscreteField) -> Result<(), ExperimentError>,
) -> Result<CylinderReport, ExperimentError> {
    if !(opts.lc > 0.0 && opts.t_final > 0.0) {
        return Err(ExperimentError::InvalidArgument("lc and t_final must be positive".into()));
    }
    if opts.deltas.is_empty() {
        return Err(ExperimentError::InvalidArgument("at least one member is required".into()));
    }
    let mesh = mesh.with_h_char(opts.lc);
    let h = mesh.h_char();
    let space = TaylorHoodSpace::new(mesh);
    let ops = Arc::new(assemble_static(&space));
    let dt = opts.dt.unwrap_or(opts.lc / 10.0);
    let eps = opts.eps.unwrap_or(dt);
    let problem = CylinderProblem {
        space: Arc::clone(&space),
        load: assemble_forcing(&space, |p, _| offset_cylinder_forcing(p[0], p[1]), 0.0),
    };
    let members = opts
        .deltas
        .iter()
        .map(|&d| Member::from_velocity(bump_initial(&space, d)))
        .collect::<Result<Vec<_>, _>>()?;
    let state = EnsembleState::new(members, 0.0, dt, eps)?;
    let mut reference = EnsembleState::new(vec![Member::zeros(&space)], 0.0, dt, eps)?;
    let mut ref_stepper = Stepper::new(Arc::clone(&space), Arc::clone(&ops), opts.nu)?;
    let mut ref_ledger = opts.track_energy.then(|| EnergyLedger::new(&reference, &ops, opts.nu));
    let dual = if opts.track_energy {
        Some(crate::ensemble::velocity_dual_norm(&space, &ops)?)
    } else {
        None
    };

    let mean0 = ensemble_mean(&state)?;
    let mut stats = stats_rows(&state, &mean0, &reference.members()[0].velocity, dt, opts.nu);
    let mut spread = spread_rows(&state, &mean0, &reference.members()[0].velocity, &ops);
    let mut ref_penalty: f64 = 0.0;

    let mut stepper = Stepper::new(Arc::clone(&space), Arc::clone(&ops), opts.nu)?;
    let mut aopts = AdaptiveOptions::new(opts.t_final, h, opts.cfl, dt);
    aopts.track_energy = opts.track_energy;
    aopts.regrow = opts.regrow;
    if let Some(m) = opts.dt_min {
        aopts.dt_min = m;
    }
    let mut hook_error = None;
    let run = run_adaptive(&mut stepper, state, &problem, &aopts, &mut |acc| {
        reference.dt = acc.previous.dt;
        let (next_ref, rep) = ref_stepper.step(&reference, &problem)?;
        ref_penalty = rep.penalty_residuals.iter().copied().fold(ref_penalty, f64::max);
        if let (Some(l), Some(d)) = (ref_ledger.as_mut(), dual.as_ref()) {
            l.record(&reference, &next_ref, &rep.loads, &ops, opts.nu, d)?;
        }
        reference = next_ref;
        let u_ref = &reference.members()[0].velocity;
        let mean = ensemble_mean(acc.current)?;
        stats.extend(stats_rows(acc.current, &mean, u_ref, acc.previous.dt, opts.nu));
        spread.extend(spread_rows(acc.current, &mean, u_ref, &ops));
        if let Err(e) = hook(acc.current, u_ref) {
            let msg = e.to_string();
            hook_error = Some(e);
            return Err(EnsembleError::Observer(msg));
        }
        Ok(())
    });
    let run = match (run, hook_error) {
        (_, Some(e)) => return Err(e),
        (r, None) => r?,
    };
    Ok(CylinderReport {
        stats,
        spread,
        history: run.history,
        ledger: run.ledger,
        reference_ledger: ref_ledger,
        max_penalty_residual: run.max_penalty_residual.max(ref_penalty),
        accepted: run.accepted,
        halvings: run.halvings,
        final_state: run.state,
    })
}

/// `|x(t_end) − x(t_end − fraction·span)| / |x(t_end)|` for a time series.
pub fn relative_change_over_tail(series: &[(f64, f64)], fraction: f64) -> f64 {
    let Some(&(t_end, x_end)) = series.last() else {
        return f64::NAN;
    };
    let t0 = series[0].0;
    let cut = t_end - fraction * (t_end - t0);
    let start = series
        .iter()
        .rev()
        .find(|(t, _)| *t <= cut)
        .copied()
        .unwrap_or(series[0]);
    (x_end - start.1).abs() / x_end.abs()
}

/// The zero velocity field of a space.
pub fn zero_velocity(space: &Arc<TaylorHoodSpace>) -> DiscreteField {
    DiscreteField::zeros(space, FieldKind::Velocity)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_solution_values() {
        assert_eq!(taylor_green_exact(0.3, 0.7, 0.0), [0.0, 0.0, 0.0]);
        let v = taylor_green_exact(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        assert!(v[0].abs() < 1e-15 && v[1].abs() < 1e-15 && (v[2] - 0.5).abs() < 1e-15);
        let tg = TaylorGreen::new(1.0);
        for p in [[0.1, 0.2], [0.9, 0.4], [0.5, 0.5]] {
            let g = tg.gradient(p, 0.8);
            assert!((g[0][0] + g[1][1]).abs() < 1e-15);
        }
    }

    #[test]
    fn forcing_at_time_zero() {
        for p in [[0.1, 0.2], [0.9, 0.4]] {
            let f = taylor_green_forcing(p[0], p[1], 0.0, 0.37);
            let expect = [-p[0].cos() * p[1].sin(), p[0].sin() * p[1].cos()];
            assert!((f[0] - expect[0]).abs() < 1e-15 && (f[1] - expect[1]).abs() < 1e-15);
        }
        for t in [0.0, 0.4, 1.3] {
            let f = taylor_green_forcing(0.0, 0.0, t, 1.0);
            assert!(f[0].abs() <= 1e-12 && f[1].abs() <= 1e-12);
        }
    }

    #[test]
    fn forcing_gate_passes_and_detects_errors() {
        assert!(verify_manufactured_forcing(&TaylorGreen::new(1.0), 200, 3).unwrap() < 1e-6);
        assert!(verify_manufactured_forcing(&TaylorGreen::scaled(0.01, 1.2), 200, 4).unwrap() < 1e-6);
        // Forcing for ν = 1 applied to a ν = 2 solution is wrong.
        let tg = TaylorGreen::new(2.0);
        let wrong = |p: Point, t: f64| TaylorGreen::new(1.0).forcing(p, t);
        let r = forcing_residual(&tg, [0.3, 0.4], 0.7, 1e-4);
        let f_ok = tg.forcing([0.3, 0.4], 0.7);
        let f_bad = wrong([0.3, 0.4], 0.7);
        assert!(r < 1e-6 && (f_ok[0] - f_bad[0]).abs() > 1e-3);
    }

    #[test]
    fn rate_formula() {
        assert!((convergence_rate(4.0, 2.0, 2.0, 1.0) - 1.0).abs() < 1e-15);
        assert!((convergence_rate(8.0, 1.0, 2.0, 1.0) - 3.0).abs() < 1e-14);
    }

    #[test]
    fn metrics_weights() {
        let s = [
            ErrorSample { t: 0.0, l2: 0.0, h1: 0.0 },
            ErrorSample { t: 0.5, l2: 1.0, h1: 2.0 },
            ErrorSample { t: 2.0, l2: 0.5, h1: 1.5 },
        ];
        let m = error_metrics(&s);
        assert_eq!(m.l2_max, 1.0);
        assert!((m.h1_integrated - 1.5 * 2.0).abs() < 1e-15);
        assert!((m.tau_weighted - 1.5).abs() < 1e-15);
        assert_eq!(tau(0.5), 0.5);
        assert_eq!(tau(2.0), 1.0);
        assert_eq!(error_metrics(&[]), ErrorMetrics::default());
    }

    #[test]
    fn cylinder_forcing_values() {
        assert_eq!(offset_cylinder_forcing(0.0, 0.0), [0.0, 0.0]);
        let f = offset_cylinder_forcing(0.5, 0.0);
        assert!(f[0].abs() == 0.0 && (f[1] - 1.5).abs() < 1e-15);
        let a: f64 = 0.7;
        let f = offset_cylinder_forcing(a.cos(), a.sin());
        assert!(f[0].abs() < 1e-15 && f[1].abs() < 1e-15);
    }

    #[test]
    fn flow_statistics_of_rigid_rotation() {
        let s = TaylorHoodSpace::new(generate_unit_square(4).unwrap());
        let u = DiscreteField::interpolate_velocity(&s, |p| [-p[1], p[0]]);
        let nu = 1.0 / 150.0;
        let st = flow_statistics(&u, nu);
        assert!((st.enstrophy - 1.0 / 75.0).abs() < 1e-12);
        assert!((st.angmom - 2.0 / 3.0).abs() < 1e-12);
        let one = DiscreteField::interpolate_velocity(&s, |_| [1.0, 0.0]);
        let st = flow_statistics(&one, nu);
        assert!((st.ke - 0.5).abs() < 1e-12 && st.enstrophy.abs() < 1e-20 && (st.angmom - 0.5).abs() < 1e-12);
        assert_eq!(flow_statistics(&zero_velocity(&s), nu), FlowStats::default());
    }

    #[test]
    fn spread_definitions() {
        let s = TaylorHoodSpace::new(generate_unit_square(3).unwrap());
        let ops = assemble_static(&s);
        let r = DiscreteField::interpolate_velocity(&s, |p| [p[1].sin(), p[0]]);
        let (m, mean) = spread_curves(&[r.clone(), r.scaled(1.1)], &r.scaled(1.05), &r, &ops);
        assert_eq!(m[0], 0.0);
        assert!((m[1] - 0.1).abs() < 1e-14 && (mean - 0.05).abs() < 1e-14);
        let zero = zero_velocity(&s);
        assert!(relative_difference(&r, &zero, &ops).is_nan());
    }

    #[test]
    fn tail_change() {
        let s: Vec<(f64, f64)> = (0..=10).map(|k| (k as f64, 1.0 + 0.01 * k as f64)).collect();
        assert!((relative_change_over_tail(&s, 0.1) - 0.01 / 1.1).abs() < 1e-14);
    }

    #[test]
    fn interpolation_error_is_third_order() {
        let t = std::f64::consts::FRAC_PI_2;
        let tg = TaylorGreen::new(1.0);
        let err = |m: usize| {
            let s = TaylorHoodSpace::new(generate_unit_square(m).unwrap());
            let u = DiscreteField::interpolate_velocity(&s, |p| tg.velocity(p, t));
            field_errors(&u, |p| (tg.velocity(p, t), tg.gradient(p, t))).0
        };
        let ratio = err(41) / err(27);
        assert!((ratio - (27.0f64 / 41.0).powi(3)).abs() < 0.03, "{ratio}");
    }
}
