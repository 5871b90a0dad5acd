//! Ensemble state, the shared-matrix timestep, adaptive CFL control and the
//! discrete energy ledger.

use std::io::{Read, Write};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{
    assemble_fluctuation_rhs, build_step_matrix, AssemblyError, DirichletValues, OperatorSet, StepMatrix,
};
use crate::linalg::{combined_matvec_compensated, norm2, DualNorm, Factorization, Factorizer, LinalgError, SparseMatrix};
use crate::space::{DiscreteField, FieldKind, SpaceError, TaylorHoodSpace};

#[derive(thiserror::Error, Debug)]
pub enum EnsembleError {
    #[error("ensemble has no members")]
    Empty,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{what}: got {got} entries, expected {expected}")]
    LengthMismatch { what: &'static str, got: usize, expected: usize },
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("timestep underflow at t = {t}: dt = {dt:e} fell below dt_min = {dt_min:e}")]
    DtUnderflow { t: f64, dt: f64, dt_min: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("observer aborted the run: {0}")]
    Observer(String),
}

/// Velocity and pressure of one realization.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub velocity: DiscreteField,
    pub pressure: DiscreteField,
}

impl Member {
    pub fn new(velocity: DiscreteField, pressure: DiscreteField) -> Result<Self, EnsembleError> {
        if velocity.kind() != FieldKind::Velocity || pressure.kind() != FieldKind::Pressure {
            return Err(EnsembleError::InvalidArgument("member fields have the wrong kind".into()));
        }
        if !Arc::ptr_eq(velocity.space(), pressure.space()) {
            return Err(SpaceError::SpaceMismatch.into());
        }
        Ok(Member { velocity, pressure })
    }

    /// Zero velocity and pressure.
    pub fn zeros(space: &Arc<TaylorHoodSpace>) -> Self {
        Member {
            velocity: DiscreteField::zeros(space, FieldKind::Velocity),
            pressure: DiscreteField::zeros(space, FieldKind::Pressure),
        }
    }

    /// The given velocity with zero pressure.
    pub fn from_velocity(velocity: DiscreteField) -> Result<Self, EnsembleError> {
        let pressure = DiscreteField::zeros(velocity.space(), FieldKind::Pressure);
        Member::new(velocity, pressure)
    }
}

/// J realizations advanced together with one timestep and one penalty
/// parameter. `eps` is a single scalar so every member sees the same matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    members: Vec<Member>,
    pub t: f64,
    pub dt: f64,
    eps: f64,
    pub step_index: u64,
}

impl EnsembleState {
    pub fn new(members: Vec<Member>, t: f64, dt: f64, eps: f64) -> Result<Self, EnsembleError> {
        let first = members.first().ok_or(EnsembleError::Empty)?;
        for m in &members {
            if !Arc::ptr_eq(m.velocity.space(), first.velocity.space()) {
                return Err(SpaceError::SpaceMismatch.into());
            }
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(EnsembleError::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(EnsembleError::InvalidArgument(format!("eps must be positive, got {eps}")));
        }
        Ok(EnsembleState {
            members,
            t,
            dt,
            eps,
            step_index: 0,
        })
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn space(&self) -> &Arc<TaylorHoodSpace> {
        self.members[0].velocity.space()
    }

    /// Same state with the members reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        EnsembleState {
            members: order.iter().map(|&i| self.members[i].clone()).collect(),
            ..self.clone()
        }
    }
}

/// Coefficientwise average of the member velocities.
pub fn ensemble_mean(state: &EnsembleState) -> Result<DiscreteField, EnsembleError> {
    mean_of(state.members().iter().map(|m| &m.velocity))
}

fn mean_of<'a>(mut fields: impl ExactSizeIterator<Item = &'a DiscreteField>) -> Result<DiscreteField, EnsembleError> {
    let j = fields.len();
    let first = fields.next().ok_or(EnsembleError::Empty)?;
    let mut acc = first.coefficients().to_vec();
    for f in fields {
        first.ensure_compatible(f)?;
        acc.iter_mut().zip(f.coefficients()).for_each(|(a, b)| *a += b);
    }
    let inv = 1.0 / j as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(DiscreteField::from_coefficients(first.space(), first.kind(), acc)?)
}

/// `u_j − <u>` for every member.
pub fn fluctuations(state: &EnsembleState) -> Result<Vec<DiscreteField>, EnsembleError> {
    let mean = ensemble_mean(state)?;
    state
        .members()
        .iter()
        .map(|m| Ok(m.velocity.difference(&mean)?))
        .collect()
}

/// Per-member data of a timestep: loads and boundary values at `t + dt`.
pub trait EnsembleProblem: Sync {
    /// Load vector `(f_j(t), φ_i)` of member `j`.
    fn load(&self, member: usize, t: f64) -> Vec<f64>;
    /// Dirichlet values of member `j` at time `t`.
    fn boundary(&self, member: usize, t: f64) -> DirichletValues;
}

/// Zero forcing and homogeneous no-slip boundaries.
pub struct Unforced {
    pub space: Arc<TaylorHoodSpace>,
}

impl EnsembleProblem for Unforced {
    fn load(&self, _member: usize, _t: f64) -> Vec<f64> {
        vec![0.0; self.space.num_velocity_dofs()]
    }

    fn boundary(&self, _member: usize, _t: f64) -> DirichletValues {
        DirichletValues::homogeneous(&self.space)
    }
}

/// How the J coupled systems of a step are solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SolveStrategy {
    /// One factorization, J solves.
    #[default]
    Shared,
    /// Rebuild and refactorize the same matrix for every member.
    PerMember,
}

/// Diagnostics of one timestep.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub fingerprint: u64,
    pub factorizations: usize,
    /// `‖εMp·p + B·u‖ / (‖εMp·p‖ + ‖B·u‖)` per member (zero when both vanish).
    pub penalty_residuals: Vec<f64>,
    /// The load vectors used at the new time level.
    pub loads: Vec<Vec<f64>>,
}

/// Advances ensembles with a fixed space and viscosity.
pub struct Stepper {
    space: Arc<TaylorHoodSpace>,
    ops: Arc<OperatorSet>,
    nu: f64,
    pub strategy: SolveStrategy,
    factorizer: Factorizer,
}

impl Stepper {
    pub fn new(space: Arc<TaylorHoodSpace>, ops: Arc<OperatorSet>, nu: f64) -> Result<Self, EnsembleError> {
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(EnsembleError::InvalidArgument(format!("nu must be positive, got {nu}")));
        }
        Ok(Stepper {
            space,
            ops,
            nu,
            strategy: SolveStrategy::Shared,
            factorizer: Factorizer::new(),
        })
    }

    pub fn with_strategy(mut self, strategy: SolveStrategy) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn space(&self) -> &Arc<TaylorHoodSpace> {
        &self.space
    }

    pub fn operators(&self) -> &OperatorSet {
        &self.ops
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    /// The shared coefficient matrix for the current state.
    pub fn step_matrix(&self, state: &EnsembleState) -> Result<StepMatrix, EnsembleError> {
        let mean = ensemble_mean(state)?;
        Ok(build_step_matrix(&self.ops, &self.space, &mean, state.dt, self.nu, state.eps)?)
    }

    /// One step with loads and boundary values taken from `problem` at `t + dt`.
    pub fn step(
        &mut self,
        state: &EnsembleState,
        problem: &dyn EnsembleProblem,
    ) -> Result<(EnsembleState, StepReport), EnsembleError> {
        let t_new = state.t + state.dt;
        let j = state.len();
        let loads: Vec<Vec<f64>> = (0..j).into_par_iter().map(|k| problem.load(k, t_new)).collect();
        let bcs: Vec<DirichletValues> = (0..j).map(|k| problem.boundary(k, t_new)).collect();
        self.step_with(state, loads, &bcs)
    }

    /// One step with explicit per-member load vectors and boundary values.
    pub fn step_with(
        &mut self,
        state: &EnsembleState,
        loads: Vec<Vec<f64>>,
        bcs: &[DirichletValues],
    ) -> Result<(EnsembleState, StepReport), EnsembleError> {
        let j = state.len();
        if loads.len() != j {
            return Err(EnsembleError::LengthMismatch {
                what: "forcing list",
                got: loads.len(),
                expected: j,
            });
        }
        if bcs.len() != j {
            return Err(EnsembleError::LengthMismatch {
                what: "boundary list",
                got: bcs.len(),
                expected: j,
            });
        }
        if !Arc::ptr_eq(state.space(), &self.space) {
            return Err(SpaceError::SpaceMismatch.into());
        }
        let nv = self.space.num_velocity_dofs();
        for l in &loads {
            if l.len() != nv {
                return Err(EnsembleError::LengthMismatch {
                    what: "load vector",
                    got: l.len(),
                    expected: nv,
                });
            }
        }
        let mean = ensemble_mean(state)?;
        let matrix = build_step_matrix(&self.ops, &self.space, &mean, state.dt, self.nu, state.eps)?;

        let rhs: Vec<Vec<f64>> = state
            .members()
            .par_iter()
            .zip(loads.par_iter())
            .zip(bcs.par_iter())
            .map(|((m, load), bc)| self.member_rhs(state, &mean, m, load, &matrix, bc))
            .collect::<Result<_, _>>()?;

        let (solutions, factorizations) = match self.strategy {
            SolveStrategy::Shared => {
                let lu: Factorization = self.factorizer.factorize(&matrix.system.matrix)?;
                let x = lu.solve_multi(&rhs)?;
                let refined = x
                    .into_par_iter()
                    .zip(rhs.par_iter())
                    .map(|(x, b)| refine(&matrix.system.matrix, &lu, b, x))
                    .collect::<Result<Vec<_>, _>>()?;
                (refined, 1)
            }
            SolveStrategy::PerMember => {
                let mut out = Vec::with_capacity(j);
                for b in &rhs {
                    let own = build_step_matrix(&self.ops, &self.space, &mean, state.dt, self.nu, state.eps)?;
                    let lu = crate::linalg::factorize(&own.system.matrix)?;
                    let x = lu.solve(b)?;
                    out.push(refine(&own.system.matrix, &lu, b, x)?);
                }
                (out, j)
            }
        };

        let mut members = Vec::with_capacity(j);
        let mut penalty_residuals = Vec::with_capacity(j);
        for mut x in solutions {
            let p = x.split_off(nv);
            penalty_residuals.push(self.penalty_residual(&x, &p, state.eps)?);
            members.push(Member {
                velocity: DiscreteField::from_coefficients(&self.space, FieldKind::Velocity, x)?,
                pressure: DiscreteField::from_coefficients(&self.space, FieldKind::Pressure, p)?,
            });
        }
        let next = EnsembleState {
            members,
            t: state.t + state.dt,
            dt: state.dt,
            eps: state.eps,
            step_index: state.step_index + 1,
        };
        let report = StepReport {
            fingerprint: matrix.fingerprint,
            factorizations,
            penalty_residuals,
            loads,
        };
        Ok((next, report))
    }

    fn member_rhs(
        &self,
        state: &EnsembleState,
        mean: &DiscreteField,
        m: &Member,
        load: &[f64],
        matrix: &StepMatrix,
        bc: &DirichletValues,
    ) -> Result<Vec<f64>, EnsembleError> {
        let fluct = m.velocity.difference(mean)?;
        let g = assemble_fluctuation_rhs(&self.space, &fluct, &m.velocity)?;
        let mu = self.ops.mass.matvec(m.velocity.coefficients());
        let inv_dt = 1.0 / state.dt;
        let mut rhs = vec![0.0; self.space.num_dofs()];
        for i in 0..mu.len() {
            rhs[i] = inv_dt * mu[i] - g[i] + load[i];
        }
        matrix.system.constrain_rhs(&mut rhs, bc)?;
        Ok(rhs)
    }

    /// Relative residual of the pressure rows. The two terms cancel to many
    /// digits, so the sum is accumulated with compensation.
    fn penalty_residual(&self, u: &[f64], p: &[f64], eps: f64) -> Result<f64, EnsembleError> {
        let mp: Vec<f64> = self.ops.pressure_mass.matvec(p).iter().map(|v| eps * v).collect();
        let bu = self.ops.divergence.matvec(u);
        let r = combined_matvec_compensated(&[(eps, &self.ops.pressure_mass, p), (1.0, &self.ops.divergence, u)])?;
        let scale = norm2(&mp) + norm2(&bu);
        Ok(if scale == 0.0 { 0.0 } else { norm2(&r) / scale })
    }
}

/// Two steps of iterative refinement with compensated residuals. The
/// pressure rows `B·u + εMp·p` cancel almost completely, so a plain residual
/// would stall well above roundoff relative to their size.
fn refine(a: &SparseMatrix, lu: &Factorization, b: &[f64], mut x: Vec<f64>) -> Result<Vec<f64>, LinalgError> {
    for _ in 0..2 {
        let r = a.residual_compensated(b, &x);
        let dx = lu.solve(&r)?;
        x.iter_mut().zip(&dx).for_each(|(x, d)| *x += d);
    }
    Ok(x)
}

/// Which CFL restriction is enforced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CflForm {
    /// `C·Δt/(ν h)·max_j ‖∇U_j‖² ≤ 1`.
    Theoretical { c: f64 },
    /// `Δt/h·max_j ‖∇U_j‖² ≤ C/Re = C·ν`.
    Experimental { c: f64 },
}

impl CflForm {
    /// `(indicator, threshold)` for a given squared fluctuation gradient.
    pub fn evaluate(&self, dt: f64, h: f64, nu: f64, grad_sq: f64) -> (f64, f64) {
        match *self {
            CflForm::Theoretical { c } => (c * dt / (nu * h) * grad_sq, 1.0),
            CflForm::Experimental { c } => (dt / h * grad_sq, c * nu),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CflReport {
    /// `‖∇(u_j − <u>)‖²` per member.
    pub grad_sq: Vec<f64>,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Evaluates the CFL restriction on the current state and timestep.
pub fn cfl_indicator(
    state: &EnsembleState,
    ops: &OperatorSet,
    h: f64,
    nu: f64,
    form: CflForm,
) -> Result<CflReport, EnsembleError> {
    if !(h > 0.0) {
        return Err(EnsembleError::InvalidArgument(format!("h must be positive, got {h}")));
    }
    let grad_sq: Vec<f64> = fluctuations(state)?
        .iter()
        .map(|u| ops.stiffness.bilinear(u.coefficients(), u.coefficients()).max(0.0))
        .collect();
    let max = grad_sq.iter().copied().fold(0.0, f64::max);
    let (value, threshold) = form.evaluate(state.dt, h, nu, max);
    Ok(CflReport {
        grad_sq,
        value,
        threshold,
        pass: value <= threshold,
    })
}

/// Running terms of the discrete energy inequality for one member.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LedgerTerms {
    /// `½‖u^N‖²`
    pub kinetic: f64,
    /// `¼ Σ ‖u^{n+1} − u^n‖²`
    pub increments: f64,
    /// `(νΔt/4)‖∇u^N‖²` with the last timestep.
    pub gradient_final: f64,
    /// `Σ (νΔt_n/4)‖∇u^{n+1}‖²`
    pub gradient_sum: f64,
    /// `Σ (Δt_n/ε)‖P(∇·u^{n+1})‖² = Σ Δt_n ε pᵀMp p`
    pub projection: f64,
    /// `Σ (Δt_n/2ν)‖f^{n+1}‖²₋₁`
    pub forcing: f64,
    /// `½‖u⁰‖²`
    pub initial_kinetic: f64,
    /// `(νΔt₀/4)‖∇u⁰‖²`
    pub initial_gradient: f64,
}

impl LedgerTerms {
    pub fn lhs(&self) -> f64 {
        self.kinetic + self.increments + self.gradient_final + self.gradient_sum + self.projection
    }

    pub fn rhs(&self) -> f64 {
        self.forcing + self.initial_kinetic + self.initial_gradient
    }

    /// `lhs ≤ rhs` up to a relative slack.
    pub fn holds(&self, rel_slack: f64) -> bool {
        self.lhs() <= self.rhs() * (1.0 + rel_slack)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LedgerViolation {
    pub member: usize,
    pub step: u64,
    pub t: f64,
    pub lhs: f64,
    pub rhs: f64,
}

/// Energy inequality bookkeeping across accepted steps.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyLedger {
    pub members: Vec<LedgerTerms>,
    pub violations: Vec<LedgerViolation>,
    pub steps: u64,
    pub rel_slack: f64,
    /// Smallest `rhs − lhs` relative to `rhs` seen over all checks.
    pub min_margin: f64,
}

pub const LEDGER_SLACK: f64 = 1e-9;

impl EnergyLedger {
    /// Initial terms from the starting state.
    pub fn new(initial: &EnsembleState, ops: &OperatorSet, nu: f64) -> Self {
        let members = initial
            .members()
            .iter()
            .map(|m| {
                let u = m.velocity.coefficients();
                let kin = 0.5 * ops.mass.bilinear(u, u);
                LedgerTerms {
                    kinetic: kin,
                    gradient_final: 0.25 * nu * initial.dt * ops.stiffness.bilinear(u, u),
                    initial_kinetic: kin,
                    initial_gradient: 0.25 * nu * initial.dt * ops.stiffness.bilinear(u, u),
                    ..Default::default()
                }
            })
            .collect();
        EnergyLedger {
            members,
            violations: Vec::new(),
            steps: 0,
            rel_slack: LEDGER_SLACK,
            min_margin: f64::INFINITY,
        }
    }

    /// Adds one accepted step from `prev` to `next` with the loads used.
    pub fn record(
        &mut self,
        prev: &EnsembleState,
        next: &EnsembleState,
        loads: &[Vec<f64>],
        ops: &OperatorSet,
        nu: f64,
        dual: &DualNorm,
    ) -> Result<(), EnsembleError> {
        let dt = prev.dt;
        let eps = prev.eps;
        let terms: Vec<(f64, f64, f64, f64, f64)> = prev
            .members()
            .par_iter()
            .zip(next.members().par_iter())
            .zip(loads.par_iter())
            .map(|((a, b), f)| {
                let u0 = a.velocity.coefficients();
                let u1 = b.velocity.coefficients();
                let p1 = b.pressure.coefficients();
                let du: Vec<f64> = u1.iter().zip(u0).map(|(x, y)| x - y).collect();
                let fneg = dual.norm(f)?;
                Ok((
                    0.5 * ops.mass.bilinear(u1, u1),
                    0.25 * ops.mass.bilinear(&du, &du),
                    ops.stiffness.bilinear(u1, u1),
                    eps * ops.pressure_mass.bilinear(p1, p1),
                    fneg * fneg,
                ))
            })
            .collect::<Result<_, LinalgError>>()?;
        self.steps += 1;
        for (k, (l, (kin, inc, grad, proj, f2))) in self.members.iter_mut().zip(terms).enumerate() {
            l.kinetic = kin;
            l.increments += inc;
            l.gradient_final = 0.25 * nu * dt * grad;
            l.gradient_sum += 0.25 * nu * dt * grad;
            l.projection += dt * proj;
            l.forcing += dt / (2.0 * nu) * f2;
            let (lhs, rhs) = (l.lhs(), l.rhs());
            if rhs > 0.0 {
                self.min_margin = self.min_margin.min((rhs - lhs) / rhs);
            }
            if !l.holds(self.rel_slack) {
                self.violations.push(LedgerViolation {
                    member: k,
                    step: next.step_index,
                    t: next.t,
                    lhs,
                    rhs,
                });
            }
        }
        Ok(())
    }

    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Rebuilds the ledger from a stored trajectory and the loads of each step.
pub fn record_energy_ledger(
    history: &[EnsembleState],
    loads: &[Vec<Vec<f64>>],
    ops: &OperatorSet,
    nu: f64,
    dual: &DualNorm,
) -> Result<EnergyLedger, EnsembleError> {
    let first = history.first().ok_or(EnsembleError::Empty)?;
    if loads.len() + 1 != history.len() {
        return Err(EnsembleError::LengthMismatch {
            what: "load history",
            got: loads.len(),
            expected: history.len().saturating_sub(1),
        });
    }
    let mut ledger = EnergyLedger::new(first, ops, nu);
    for (w, l) in history.windows(2).zip(loads) {
        ledger.record(&w[0], &w[1], l, ops, nu, dual)?;
    }
    Ok(ledger)
}

/// Dual norm on the velocity dofs that are free of Dirichlet constraints.
pub fn velocity_dual_norm(space: &TaylorHoodSpace, ops: &OperatorSet) -> Result<DualNorm, EnsembleError> {
    let mask = space.dirichlet_mask();
    let free: Vec<usize> = (0..space.num_velocity_dofs()).filter(|&i| !mask[i]).collect();
    Ok(DualNorm::new(&ops.stiffness, free)?)
}

/// One entry of the timestep history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DtDecision {
    Accepted { step: u64, t: f64, dt: f64, indicator: f64 },
    Halved { step: u64, t: f64, rejected_dt: f64, indicator: f64 },
}

#[derive(Debug, Clone)]
pub struct AdaptiveOptions {
    pub t_final: f64,
    /// Mesh size entering the CFL indicator.
    pub h: f64,
    pub cfl: CflForm,
    pub dt_min: f64,
    /// Double Δt (up to the initial value) after a step whose indicator is
    /// below a quarter of the threshold.
    pub regrow: bool,
    pub track_energy: bool,
}

impl AdaptiveOptions {
    /// Defaults: `dt_min = dt0·2⁻²⁰`, no regrowth, energy tracking on.
    pub fn new(t_final: f64, h: f64, cfl: CflForm, dt0: f64) -> Self {
        AdaptiveOptions {
            t_final,
            h,
            cfl,
            dt_min: dt0 * 2f64.powi(-20),
            regrow: false,
            track_energy: true,
        }
    }
}

/// Everything an observer sees about an accepted step.
pub struct AcceptedStep<'a> {
    pub previous: &'a EnsembleState,
    pub current: &'a EnsembleState,
    pub report: &'a StepReport,
    pub cfl: &'a CflReport,
}

#[derive(Debug, Clone)]
pub struct AdaptiveRun {
    pub state: EnsembleState,
    pub history: Vec<DtDecision>,
    pub ledger: Option<EnergyLedger>,
    pub accepted: u64,
    pub halvings: u64,
    /// Largest relative penalty-row residual over every solve, discarded
    /// steps included.
    pub max_penalty_residual: f64,
}

const END_TOLERANCE: f64 = 1e-9;

/// Steps until `t_final`: each step is checked a posteriori against the CFL
/// restriction; a failing step is discarded and retried from the same state
/// with half the timestep.
pub fn run_adaptive(
    stepper: &mut Stepper,
    initial: EnsembleState,
    problem: &dyn EnsembleProblem,
    opts: &AdaptiveOptions,
    observer: &mut dyn FnMut(&AcceptedStep) -> Result<(), EnsembleError>,
) -> Result<AdaptiveRun, EnsembleError> {
    if !(opts.t_final > initial.t) {
        return Err(EnsembleError::InvalidArgument(format!(
            "final time {} must exceed the start time {}",
            opts.t_final, initial.t
        )));
    }
    let dt_max = initial.dt;
    let ops = Arc::clone(&stepper.ops);
    let nu = stepper.nu;
    let (mut ledger, dual) = if opts.track_energy {
        (
            Some(EnergyLedger::new(&initial, &ops, nu)),
            Some(velocity_dual_norm(&stepper.space, &ops)?),
        )
    } else {
        (None, None)
    };
    let mut state = initial;
    let mut history = Vec::new();
    let (mut accepted, mut halvings) = (0, 0);
    let mut max_penalty_residual: f64 = 0.0;
    while state.t < opts.t_final - END_TOLERANCE * state.dt {
        let (next, report) = stepper.step(&state, problem)?;
        max_penalty_residual = report.penalty_residuals.iter().copied().fold(max_penalty_residual, f64::max);
        let cfl = cfl_indicator(&next, &ops, opts.h, nu, opts.cfl)?;
        if !cfl.pass {
            history.push(DtDecision::Halved {
                step: state.step_index,
                t: state.t,
                rejected_dt: state.dt,
                indicator: cfl.value,
            });
            halvings += 1;
            let dt = 0.5 * state.dt;
            if dt < opts.dt_min {
                return Err(EnsembleError::DtUnderflow {
                    t: state.t,
                    dt,
                    dt_min: opts.dt_min,
                });
            }
            state.dt = dt;
            continue;
        }
        history.push(DtDecision::Accepted {
            step: next.step_index,
            t: next.t,
            dt: state.dt,
            indicator: cfl.value,
        });
        accepted += 1;
        if let (Some(l), Some(d)) = (ledger.as_mut(), dual.as_ref()) {
            l.record(&state, &next, &report.loads, &ops, nu, d)?;
        }
        observer(&AcceptedStep {
            previous: &state,
            current: &next,
            report: &report,
            cfl: &cfl,
        })?;
        state = next;
        if opts.regrow && cfl.value < 0.25 * cfl.threshold && state.dt < dt_max {
            state.dt = (2.0 * state.dt).min(dt_max);
        }
    }
    Ok(AdaptiveRun {
        state,
        history,
        ledger,
        accepted,
        halvings,
        max_penalty_residual,
    })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PENSCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes a restartable binary snapshot (little-endian).
pub fn write_checkpoint(state: &EnsembleState, mut w: impl Write) -> Result<(), EnsembleError> {
    let space = state.space();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(state.len() as u32).to_le_bytes())?;
    w.write_all(&(space.num_velocity_dofs() as u64).to_le_bytes())?;
    w.write_all(&(space.num_pressure_dofs() as u64).to_le_bytes())?;
    for v in [state.t, state.dt, state.eps] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&state.step_index.to_le_bytes())?;
    for m in state.members() {
        for v in m.velocity.coefficients().iter().chain(m.pressure.coefficients()) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a snapshot written by [`write_checkpoint`] onto a matching space.
pub fn read_checkpoint(space: &Arc<TaylorHoodSpace>, mut r: impl Read) -> Result<EnsembleState, EnsembleError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(EnsembleError::Checkpoint("not a checkpoint file".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    let mut u32_ = |r: &mut dyn Read| -> std::io::Result<u32> {
        r.read_exact(&mut b4)?;
        Ok(u32::from_le_bytes(b4))
    };
    let version = u32_(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(EnsembleError::Checkpoint(format!("unsupported version {version}")));
    }
    let j = u32_(&mut r)? as usize;
    let mut next8 = |r: &mut dyn Read| -> std::io::Result<[u8; 8]> {
        r.read_exact(&mut b8)?;
        Ok(b8)
    };
    let nv = u64::from_le_bytes(next8(&mut r)?) as usize;
    let np = u64::from_le_bytes(next8(&mut r)?) as usize;
    if nv != space.num_velocity_dofs() || np != space.num_pressure_dofs() {
        return Err(EnsembleError::Checkpoint(format!(
            "dof counts ({nv}, {np}) do not match the space ({}, {})",
            space.num_velocity_dofs(),
            space.num_pressure_dofs()
        )));
    }
    let t = f64::from_le_bytes(next8(&mut r)?);
    let dt = f64::from_le_bytes(next8(&mut r)?);
    let eps = f64::from_le_bytes(next8(&mut r)?);
    let step_index = u64::from_le_bytes(next8(&mut r)?);
    let mut read_vec = |r: &mut dyn Read, n: usize| -> std::io::Result<Vec<f64>> {
        (0..n).map(|_| next8(r).map(f64::from_le_bytes)).collect()
    };
    let mut members = Vec::with_capacity(j);
    for _ in 0..j {
        let u = read_vec(&mut r, nv)?;
        let p = read_vec(&mut r, np)?;
        members.push(Member {
            velocity: DiscreteField::from_coefficients(space, FieldKind::Velocity, u)?,
            pressure: DiscreteField::from_coefficients(space, FieldKind::Pressure, p)?,
        });
    }
    let mut state = EnsembleState::new(members, t, dt, eps)?;
    state.step_index = step_index;
    Ok(state)
}
