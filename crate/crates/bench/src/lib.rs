//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use pensemble_core::assembly::{assemble_static, build_step_matrix, OperatorSet, StepMatrix};
use pensemble_core::mesh::generate_unit_square;
use pensemble_core::space::{DiscreteField, TaylorHoodSpace};

pub struct Fixture {
    pub space: Arc<TaylorHoodSpace>,
    pub ops: OperatorSet,
    pub mean: DiscreteField,
    pub step: StepMatrix,
}

/// Unit-square problem with a smooth convecting field and `Δt = ε = h/10`.
pub fn fixture(m: usize) -> Fixture {
    let space = TaylorHoodSpace::new(generate_unit_square(m).expect("valid m"));
    let ops = assemble_static(&space);
    let mean = DiscreteField::interpolate_velocity(&space, |p| {
        let (x, y) = (p[0] * std::f64::consts::PI, p[1] * std::f64::consts::PI);
        [-x.cos() * y.sin(), x.sin() * y.cos()]
    });
    let dt = 0.1 / m as f64;
    let step = build_step_matrix(&ops, &space, &mean, dt, 1.0, dt).expect("step matrix");
    Fixture { space, ops, mean, step }
}

/// `j` distinct right-hand sides of the system size.
pub fn right_hand_sides(n: usize, j: usize) -> Vec<Vec<f64>> {
    (0..j)
        .map(|k| (0..n).map(|i| ((i * (k + 3)) % 17) as f64 / 17.0 - 0.5).collect())
        .collect()
}
