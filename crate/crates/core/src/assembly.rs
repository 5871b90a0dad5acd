//! Sparse operators and right-hand sides of the ensemble penalty scheme.
//!
//! For member `j` one step solves, for all `(v, q)`,
//!
//! ```text
//! (u' - u, v)/Δt + b*(<u>, u', v) + b*(u - <u>, u, v) + ν(∇u', ∇v)
//!     - (p', ∇·v) + (q, ∇·u') + ε(p', q) = (f', v)
//! ```
//!
//! with `b*(u, v, w) = ½(u·∇v, w) − ½(u·∇w, v)`. In block form
//! `[[M/Δt + νK + N(<u>), −Bᵀ], [B, εMp]]`, where `B` has pressure rows and
//! velocity columns. Element loops run in parallel and are scattered in
//! element order, so every assembled matrix is bitwise independent of the
//! thread count.

use std::collections::BTreeSet;
use std::sync::Arc;

use rayon::prelude::*;

use crate::linalg::{LinalgError, SparseMatrix};
use crate::mesh::Point;
use crate::space::{DiscreteField, ElementGeometry, FieldKind, SpaceError, TaylorHoodSpace};

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum AssemblyError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("missing boundary value for dof {0}")]
    MissingBoundaryValue(usize),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Mass, stiffness, divergence and pressure-mass matrices of a space.
#[derive(Debug, Clone)]
pub struct OperatorSet {
    /// Velocity mass matrix `M`.
    pub mass: SparseMatrix,
    /// Vector Laplacian `K` (without ν).
    pub stiffness: SparseMatrix,
    /// `B_ij = (ψ_i, ∇·φ_j)`: pressure rows, velocity columns.
    pub divergence: SparseMatrix,
    /// `−Bᵀ`, the pressure-gradient block of the momentum rows.
    pub neg_divergence_t: SparseMatrix,
    /// Pressure mass matrix `Mp`.
    pub pressure_mass: SparseMatrix,
}

/// Physical gradients of the six P2 basis functions at every quadrature point.
fn element_gradients(space: &TaylorHoodSpace, geo: &ElementGeometry) -> Vec<[[f64; 2]; 6]> {
    space
        .tables()
        .p2_gradients
        .iter()
        .map(|g| {
            let mut out = [[0.0; 2]; 6];
            for a in 0..6 {
                out[a] = geo.physical_gradient(g[a]);
            }
            out
        })
        .collect()
}

/// Velocity-velocity pattern: both components of every pair of P2 nodes
/// sharing an element, with components kept separate.
fn velocity_pattern(space: &TaylorHoodSpace) -> SparseMatrix {
    let n_nodes = space.nodes().len();
    let mut rows = vec![BTreeSet::new(); n_nodes];
    for el in space.elements() {
        for &a in el {
            rows[a].extend(el.iter().copied());
        }
    }
    let vrows: Vec<BTreeSet<usize>> = (0..2 * n_nodes)
        .map(|r| rows[r / 2].iter().map(|&b| 2 * b + r % 2).collect())
        .collect();
    SparseMatrix::from_pattern(2 * n_nodes, &vrows)
}

fn scatter_velocity(target: &mut SparseMatrix, el: &[usize; 6], local: &[[f64; 6]; 6]) {
    for a in 0..6 {
        for b in 0..6 {
            for c in 0..2 {
                target.add(2 * el[a] + c, 2 * el[b] + c, local[a][b]);
            }
        }
    }
}

struct StaticLocal {
    mass: [[f64; 6]; 6],
    stiffness: [[f64; 6]; 6],
    divergence: [[[f64; 2]; 6]; 3],
    pressure_mass: [[f64; 3]; 3],
}

/// Assembles `M`, `K`, `B` and `Mp`.
pub fn assemble_static(space: &TaylorHoodSpace) -> OperatorSet {
    let rule = space.rule();
    let tables = space.tables();
    let locals: Vec<StaticLocal> = space
        .geometry()
        .par_iter()
        .map(|geo| {
            let grads = element_gradients(space, geo);
            let mut l = StaticLocal {
                mass: [[0.0; 6]; 6],
                stiffness: [[0.0; 6]; 6],
                divergence: [[[0.0; 2]; 6]; 3],
                pressure_mass: [[0.0; 3]; 3],
            };
            for (q, &wq) in rule.weights.iter().enumerate() {
                let w = wq * geo.det;
                let phi = &tables.p2_values[q];
                let psi = &tables.p1_values[q];
                let g = &grads[q];
                for a in 0..6 {
                    for b in 0..6 {
                        l.mass[a][b] += w * phi[a] * phi[b];
                        l.stiffness[a][b] += w * (g[a][0] * g[b][0] + g[a][1] * g[b][1]);
                    }
                }
                for i in 0..3 {
                    for a in 0..6 {
                        for c in 0..2 {
                            l.divergence[i][a][c] += w * psi[i] * g[a][c];
                        }
                    }
                    for j in 0..3 {
                        l.pressure_mass[i][j] += w * psi[i] * psi[j];
                    }
                }
            }
            l
        })
        .collect();

    let mut mass = velocity_pattern(space);
    let mut stiffness = mass.clone();
    let np = space.num_pressure_dofs();
    let mut prow = vec![BTreeSet::new(); np];
    let mut brow = vec![BTreeSet::new(); np];
    for el in space.elements() {
        for &i in &el[..3] {
            prow[i].extend(el[..3].iter().copied());
            brow[i].extend(el.iter().flat_map(|&a| [2 * a, 2 * a + 1]));
        }
    }
    let mut pressure_mass = SparseMatrix::from_pattern(np, &prow);
    let mut divergence = SparseMatrix::from_pattern(space.num_velocity_dofs(), &brow);
    for (el, l) in space.elements().iter().zip(&locals) {
        scatter_velocity(&mut mass, el, &l.mass);
        scatter_velocity(&mut stiffness, el, &l.stiffness);
        for i in 0..3 {
            for a in 0..6 {
                for c in 0..2 {
                    divergence.add(el[i], 2 * el[a] + c, l.divergence[i][a][c]);
                }
            }
            for j in 0..3 {
                pressure_mass.add(el[i], el[j], l.pressure_mass[i][j]);
            }
        }
    }
    let mut neg_divergence_t = divergence.transpose();
    neg_divergence_t.values_mut().iter_mut().for_each(|v| *v = -*v);
    OperatorSet {
        mass,
        stiffness,
        divergence,
        neg_divergence_t,
        pressure_mass,
    }
}

fn check_velocity(space: &Arc<TaylorHoodSpace>, f: &DiscreteField) -> Result<(), AssemblyError> {
    if !Arc::ptr_eq(space, f.space()) || f.kind() != FieldKind::Velocity {
        return Err(SpaceError::SpaceMismatch.into());
    }
    Ok(())
}

/// Velocity value at every quadrature point of an element.
fn values_at_quadrature(space: &TaylorHoodSpace, coef: &[f64], el: &[usize; 6]) -> Vec<[f64; 2]> {
    space
        .tables()
        .p2_values
        .iter()
        .map(|phi| {
            let mut v = [0.0; 2];
            for a in 0..6 {
                v[0] += coef[2 * el[a]] * phi[a];
                v[1] += coef[2 * el[a] + 1] * phi[a];
            }
            v
        })
        .collect()
}

/// Skew convection matrix `N(w)` with `v₂ᵀ N(w) v₁ = b*(w, v₁, v₂)`.
pub fn assemble_convection(space: &Arc<TaylorHoodSpace>, w: &DiscreteField) -> Result<SparseMatrix, AssemblyError> {
    check_velocity(space, w)?;
    let mut n = velocity_pattern(space);
    add_convection(space, w.coefficients(), 1.0, &mut n);
    Ok(n)
}

/// Adds `scale * N(w)` into a matrix with the velocity pattern (or the
/// coupled-system pattern, whose leading block has the same entries).
fn add_convection(space: &TaylorHoodSpace, w: &[f64], scale: f64, target: &mut SparseMatrix) {
    let rule = space.rule();
    let tables = space.tables();
    let locals: Vec<[[f64; 6]; 6]> = space
        .elements()
        .par_iter()
        .zip(space.geometry().par_iter())
        .map(|(el, geo)| {
            let grads = element_gradients(space, geo);
            let wq = values_at_quadrature(space, w, el);
            let mut l = [[0.0; 6]; 6];
            for (q, &weight) in rule.weights.iter().enumerate() {
                let s = 0.5 * weight * geo.det * scale;
                let phi = &tables.p2_values[q];
                let adv: [f64; 6] = std::array::from_fn(|a| wq[q][0] * grads[q][a][0] + wq[q][1] * grads[q][a][1]);
                for a in 0..6 {
                    for b in 0..6 {
                        l[a][b] += s * (adv[b] * phi[a] - adv[a] * phi[b]);
                    }
                }
            }
            l
        })
        .collect();
    for (el, l) in space.elements().iter().zip(&locals) {
        scatter_velocity(target, el, l);
    }
}

/// Explicit fluctuation term: entry `i` is `b*(fluct, u_old, φ_i)`.
pub fn assemble_fluctuation_rhs(
    space: &Arc<TaylorHoodSpace>,
    fluct: &DiscreteField,
    u_old: &DiscreteField,
) -> Result<Vec<f64>, AssemblyError> {
    check_velocity(space, fluct)?;
    check_velocity(space, u_old)?;
    let rule = space.rule();
    let tables = space.tables();
    let (fc, uc) = (fluct.coefficients(), u_old.coefficients());
    let locals: Vec<[[f64; 2]; 6]> = space
        .elements()
        .par_iter()
        .zip(space.geometry().par_iter())
        .map(|(el, geo)| {
            let grads = element_gradients(space, geo);
            let mut l = [[0.0; 2]; 6];
            for (q, &weight) in rule.weights.iter().enumerate() {
                let s = 0.5 * weight * geo.det;
                let phi = &tables.p2_values[q];
                let g = &grads[q];
                let mut wv = [0.0; 2];
                let mut uv = [0.0; 2];
                let mut du = [[0.0; 2]; 2];
                for a in 0..6 {
                    for c in 0..2 {
                        wv[c] += fc[2 * el[a] + c] * phi[a];
                        uv[c] += uc[2 * el[a] + c] * phi[a];
                        du[c][0] += uc[2 * el[a] + c] * g[a][0];
                        du[c][1] += uc[2 * el[a] + c] * g[a][1];
                    }
                }
                for a in 0..6 {
                    let w_grad_phi = wv[0] * g[a][0] + wv[1] * g[a][1];
                    for c in 0..2 {
                        let w_grad_u = wv[0] * du[c][0] + wv[1] * du[c][1];
                        l[a][c] += s * (w_grad_u * phi[a] - w_grad_phi * uv[c]);
                    }
                }
            }
            l
        })
        .collect();
    let mut out = vec![0.0; space.num_velocity_dofs()];
    for (el, l) in space.elements().iter().zip(&locals) {
        for a in 0..6 {
            out[2 * el[a]] += l[a][0];
            out[2 * el[a] + 1] += l[a][1];
        }
    }
    Ok(out)
}

/// Load vector `(f(·, t), φ_i)`.
pub fn assemble_forcing(space: &TaylorHoodSpace, f: impl Fn(Point, f64) -> [f64; 2] + Sync, t: f64) -> Vec<f64> {
    let rule = space.rule();
    let tables = space.tables();
    let locals: Vec<[[f64; 2]; 6]> = space
        .geometry()
        .par_iter()
        .map(|geo| {
            let mut l = [[0.0; 2]; 6];
            for (q, &weight) in rule.weights.iter().enumerate() {
                let w = weight * geo.det;
                let fx = f(geo.map(rule.points[q]), t);
                let phi = &tables.p2_values[q];
                for a in 0..6 {
                    l[a][0] += w * fx[0] * phi[a];
                    l[a][1] += w * fx[1] * phi[a];
                }
            }
            l
        })
        .collect();
    let mut out = vec![0.0; space.num_velocity_dofs()];
    for (el, l) in space.elements().iter().zip(&locals) {
        for a in 0..6 {
            out[2 * el[a]] += l[a][0];
            out[2 * el[a] + 1] += l[a][1];
        }
    }
    out
}

/// Dirichlet values aligned with [`TaylorHoodSpace::dirichlet_dofs`].
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletValues {
    dofs: Vec<usize>,
    values: Vec<f64>,
}

impl DirichletValues {
    pub fn homogeneous(space: &TaylorHoodSpace) -> Self {
        let dofs = space.dirichlet_dofs();
        let values = vec![0.0; dofs.len()];
        DirichletValues { dofs, values }
    }

    /// Samples a velocity function at the boundary nodes.
    pub fn from_fn(space: &TaylorHoodSpace, f: impl Fn(Point) -> [f64; 2]) -> Self {
        let dofs = space.dirichlet_dofs();
        let values = dofs.iter().map(|&d| f(space.nodes()[d / 2])[d % 2]).collect();
        DirichletValues { dofs, values }
    }

    /// Values given as `(dof, value)` pairs; every Dirichlet dof must appear.
    pub fn from_pairs(space: &TaylorHoodSpace, pairs: &[(usize, f64)]) -> Result<Self, AssemblyError> {
        let dofs = space.dirichlet_dofs();
        let lookup: std::collections::HashMap<usize, f64> = pairs.iter().copied().collect();
        let values = dofs
            .iter()
            .map(|d| lookup.get(d).copied().ok_or(AssemblyError::MissingBoundaryValue(*d)))
            .collect::<Result<_, _>>()?;
        Ok(DirichletValues { dofs, values })
    }

    pub fn dofs(&self) -> &[usize] {
        &self.dofs
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn scaled(&self, factor: f64) -> Self {
        DirichletValues {
            dofs: self.dofs.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

/// A square system with Dirichlet rows replaced by identity rows and the
/// matching columns eliminated symmetrically.
#[derive(Debug, Clone)]
pub struct ConstrainedSystem {
    pub matrix: SparseMatrix,
    constrained: Vec<usize>,
    /// Entries `(row, col, value)` removed from free rows; moved to the RHS.
    eliminated: Vec<(usize, usize, f64)>,
}

impl ConstrainedSystem {
    pub fn constrained_dofs(&self) -> &[usize] {
        &self.constrained
    }

    /// Applies the boundary values to a right-hand side in place.
    pub fn constrain_rhs(&self, rhs: &mut [f64], bc: &DirichletValues) -> Result<(), AssemblyError> {
        if bc.dofs != self.constrained {
            let missing = self
                .constrained
                .iter()
                .find(|d| !bc.dofs.contains(d))
                .copied()
                .unwrap_or(0);
            return Err(AssemblyError::MissingBoundaryValue(missing));
        }
        if rhs.len() != self.matrix.nrows() {
            return Err(LinalgError::DimensionMismatch(format!(
                "right-hand side has length {}, expected {}",
                rhs.len(),
                self.matrix.nrows()
            ))
            .into());
        }
        let mut value_of = vec![0.0; self.matrix.ncols()];
        for (&d, &v) in self.constrained.iter().zip(&bc.values) {
            value_of[d] = v;
        }
        for &(i, j, a) in &self.eliminated {
            rhs[i] -= a * value_of[j];
        }
        for (&d, &v) in self.constrained.iter().zip(&bc.values) {
            rhs[d] = v;
        }
        Ok(())
    }
}

/// Replaces the rows of `dofs` by identity rows and eliminates their columns.
/// Diagonal entries of constrained rows must be in the pattern.
pub fn apply_dirichlet(mut matrix: SparseMatrix, dofs: &[usize]) -> ConstrainedSystem {
    let n = matrix.nrows();
    let mut is_constrained = vec![false; n];
    for &d in dofs {
        is_constrained[d] = true;
    }
    let mut eliminated = Vec::new();
    let row_ptr = matrix.row_ptr().to_vec();
    let col_idx = matrix.col_idx().to_vec();
    let values = matrix.values_mut();
    for i in 0..n {
        for k in row_ptr[i]..row_ptr[i + 1] {
            let j = col_idx[k];
            if is_constrained[i] {
                values[k] = if i == j { 1.0 } else { 0.0 };
            } else if j < n && is_constrained[j] {
                if values[k] != 0.0 {
                    eliminated.push((i, j, values[k]));
                }
                values[k] = 0.0;
            }
        }
    }
    ConstrainedSystem {
        matrix,
        constrained: dofs.to_vec(),
        eliminated,
    }
}

/// The shared coefficient matrix of one timestep.
#[derive(Debug, Clone)]
pub struct StepMatrix {
    pub system: ConstrainedSystem,
    pub dt: f64,
    pub nu: f64,
    pub eps: f64,
    /// FNV-1a hash of the mean-field coefficients and parameters.
    pub fingerprint: u64,
}

fn fingerprint(mean: &[f64], params: [f64; 3]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in mean.iter().chain(params.iter()) {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Builds `[[M/Δt + νK + N(mean), −Bᵀ], [B, εMp]]` with the Dirichlet
/// constraints of the space applied.
pub fn build_step_matrix(
    ops: &OperatorSet,
    space: &Arc<TaylorHoodSpace>,
    mean: &DiscreteField,
    dt: f64,
    nu: f64,
    eps: f64,
) -> Result<StepMatrix, AssemblyError> {
    for (name, v) in [("dt", dt), ("nu", nu), ("eps", eps)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(AssemblyError::InvalidArgument(format!("{name} must be positive, got {v}")));
        }
    }
    check_velocity(space, mean)?;
    let mut velocity = SparseMatrix::linear_combination(&[(1.0 / dt, &ops.mass), (nu, &ops.stiffness)])?;
    add_convection(space, mean.coefficients(), 1.0, &mut velocity);
    let mut penalty = ops.pressure_mass.clone();
    penalty.values_mut().iter_mut().for_each(|v| *v *= eps);
    let full = SparseMatrix::block2x2(&velocity, &ops.neg_divergence_t, &ops.divergence, &penalty);
    let system = apply_dirichlet(full, &space.dirichlet_dofs());
    Ok(StepMatrix {
        system,
        dt,
        nu,
        eps,
        fingerprint: fingerprint(mean.coefficients(), [dt, nu, eps]),
    })
}

/// `b*(u, v, w)` evaluated directly by quadrature.
pub fn skew_trilinear(u: &DiscreteField, v: &DiscreteField, w: &DiscreteField) -> Result<f64, AssemblyError> {
    u.ensure_compatible(v)?;
    u.ensure_compatible(w)?;
    let space = u.space();
    let rule = space.rule();
    let mut total = 0.0;
    for e in 0..space.num_elements() {
        let det = space.geometry()[e].det;
        for (q, &l) in rule.points.iter().enumerate() {
            let su = u.eval_barycentric(e, l);
            let sv = v.eval_barycentric(e, l);
            let sw = w.eval_barycentric(e, l);
            let mut term = 0.0;
            for c in 0..2 {
                let u_grad_v = su.value[0] * sv.gradient[c][0] + su.value[1] * sv.gradient[c][1];
                let u_grad_w = su.value[0] * sw.gradient[c][0] + su.value[1] * sw.gradient[c][1];
                term += u_grad_v * sw.value[c] - u_grad_w * sv.value[c];
            }
            total += 0.5 * rule.weights[q] * det * term;
        }
    }
    Ok(total)
}
