//! Perturbed initial data and seeded Monte Carlo draws.
//!
//! Every member gets its own ChaCha8 stream (`set_stream(member)`), so the
//! value drawn for member `j` does not depend on `J` or on evaluation order.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::linalg::SparseMatrix;
use crate::space::{DiscreteField, FieldKind, SpaceError, TaylorHoodSpace};

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum SamplingError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PerturbationKind {
    /// `u⁰_j = (1 + δ_j) u⁰`
    Multiplicative,
    /// `u⁰_j = δ_j (b, b)` with the cylinder bump `b`.
    Bump,
    /// `f_j = (1 + δ_j) f`
    ForcingScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Magnitudes {
    /// Explicit `δ_j`, one per member.
    List(Vec<f64>),
    /// Uniform on `[−δ, δ]`.
    Uniform { delta: f64 },
    /// Normal with mean 0 and standard deviation `sigma`.
    Normal { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub magnitudes: Magnitudes,
    pub seed: u64,
}

/// One `δ_j` per member.
pub fn monte_carlo_draws(spec: &PerturbationSpec, j: usize) -> Result<Vec<f64>, SamplingError> {
    if j == 0 {
        return Err(SamplingError::InvalidArgument("ensemble size must be at least 1".into()));
    }
    let draws = match &spec.magnitudes {
        Magnitudes::List(v) => {
            if v.len() != j {
                return Err(SamplingError::InvalidArgument(format!(
                    "{} magnitudes given for {j} members",
                    v.len()
                )));
            }
            v.clone()
        }
        &Magnitudes::Uniform { delta } => {
            if !(delta >= 0.0 && delta.is_finite()) {
                return Err(SamplingError::InvalidArgument(format!("uniform half-width {delta}")));
            }
            (0..j)
                .map(|k| delta * (2.0 * member_rng(spec.seed, k).random::<f64>() - 1.0))
                .collect()
        }
        &Magnitudes::Normal { sigma } => {
            let normal = Normal::new(0.0, sigma)
                .ok()
                .filter(|_| sigma >= 0.0)
                .ok_or_else(|| SamplingError::InvalidArgument(format!("normal sigma {sigma}")))?;
            (0..j).map(|k| normal.sample(&mut member_rng(spec.seed, k))).collect()
        }
    };
    if spec.kind == PerturbationKind::Multiplicative {
        if let Some(d) = draws.iter().find(|d| d.abs() >= 1.0) {
            return Err(SamplingError::InvalidArgument(format!(
                "multiplicative perturbation needs |δ| < 1, got {d}"
            )));
        }
    }
    Ok(draws)
}

fn member_rng(seed: u64, member: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(member as u64);
    rng
}

/// Scales every coefficient by `1 + δ`.
pub fn perturb_multiplicative(u0: &DiscreteField, delta: f64) -> Result<DiscreteField, SamplingError> {
    if !(delta.abs() < 1.0) {
        return Err(SamplingError::InvalidArgument(format!(
            "multiplicative perturbation needs |δ| < 1, got {delta}"
        )));
    }
    Ok(u0.scaled(1.0 + delta))
}

/// `(1 − x² − y²)(0.25 − (x − 0.5)² − y²)`: zero on both cylinder walls.
pub fn cylinder_bump(p: [f64; 2]) -> f64 {
    let (x, y) = (p[0], p[1]);
    (1.0 - x * x - y * y) * (0.25 - (x - 0.5) * (x - 0.5) - y * y)
}

/// `δ·(b, b)` interpolated, with every Dirichlet dof set to zero (edge
/// midpoints of curved walls sit slightly inside the domain).
pub fn bump_initial(space: &Arc<TaylorHoodSpace>, delta: f64) -> DiscreteField {
    let mut f = DiscreteField::interpolate_velocity(space, |p| {
        let b = delta * cylinder_bump(p);
        [b, b]
    });
    for d in space.dirichlet_dofs() {
        f.coefficients_mut()[d] = 0.0;
    }
    f
}

#[derive(Debug, Clone)]
pub struct EnsembleStatistics {
    pub mean: DiscreteField,
    /// Unbiased per-dof sample variance (zero for a single member).
    pub variance: DiscreteField,
    /// `max_j ‖u_j − <u>‖` in L2.
    pub spread: f64,
}

/// Mean, variance and L2 spread of a set of fields; `mass` defines the norm.
pub fn ensemble_statistics(fields: &[DiscreteField], mass: &SparseMatrix) -> Result<EnsembleStatistics, SamplingError> {
    let first = fields
        .first()
        .ok_or_else(|| SamplingError::InvalidArgument("no fields".into()))?;
    for f in fields {
        first.ensure_compatible(f)?;
    }
    let n = first.coefficients().len();
    let j = fields.len() as f64;
    let mut mean = vec![0.0; n];
    for f in fields {
        mean.iter_mut().zip(f.coefficients()).for_each(|(m, c)| *m += c);
    }
    mean.iter_mut().for_each(|m| *m /= j);
    let mut variance = vec![0.0; n];
    let mut spread: f64 = 0.0;
    for f in fields {
        let d: Vec<f64> = f.coefficients().iter().zip(&mean).map(|(c, m)| c - m).collect();
        variance.iter_mut().zip(&d).for_each(|(v, x)| *v += x * x);
        if first.kind() == FieldKind::Velocity && mass.nrows() == n {
            spread = spread.max(mass.bilinear(&d, &d).max(0.0).sqrt());
        }
    }
    if fields.len() > 1 {
        variance.iter_mut().for_each(|v| *v /= j - 1.0);
    } else {
        variance.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(EnsembleStatistics {
        mean: DiscreteField::from_coefficients(first.space(), first.kind(), mean)?,
        variance: DiscreteField::from_coefficients(first.space(), first.kind(), variance)?,
        spread,
    })
}
