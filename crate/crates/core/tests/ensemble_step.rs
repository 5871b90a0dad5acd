use std::sync::Arc;

use pensemble_core::assembly::{assemble_forcing, assemble_static, DirichletValues};
use pensemble_core::ensemble::{
    read_checkpoint, write_checkpoint, EnsembleProblem, EnsembleState, Member, SolveStrategy, Stepper, Unforced,
};
use pensemble_core::experiments::TaylorGreen;
use pensemble_core::mesh::generate_unit_square;
use pensemble_core::space::{DiscreteField, TaylorHoodSpace};

struct Perturbed {
    space: Arc<TaylorHoodSpace>,
    members: Vec<TaylorGreen>,
}

impl EnsembleProblem for Perturbed {
    fn load(&self, member: usize, t: f64) -> Vec<f64> {
        let tg = self.members[member];
        assemble_forcing(&self.space, move |p, s| tg.forcing(p, s), t)
    }

    fn boundary(&self, member: usize, t: f64) -> DirichletValues {
        let tg = self.members[member];
        DirichletValues::from_fn(&self.space, |p| tg.velocity(p, t))
    }
}

fn perturbed(space: &Arc<TaylorHoodSpace>, deltas: &[f64]) -> Perturbed {
    Perturbed {
        space: Arc::clone(space),
        members: deltas.iter().map(|d| TaylorGreen::scaled(1.0, 1.0 + d)).collect(),
    }
}

fn tg_state(space: &Arc<TaylorHoodSpace>, problem: &Perturbed, dt: f64) -> EnsembleState {
    let members = problem
        .members
        .iter()
        .map(|tg| Member::from_velocity(DiscreteField::interpolate_velocity(space, |p| tg.velocity(p, 0.0))).unwrap())
        .collect();
    EnsembleState::new(members, 0.0, dt, dt).unwrap()
}

fn swirl(space: &Arc<TaylorHoodSpace>) -> DiscreteField {
    let pi = std::f64::consts::PI;
    DiscreteField::interpolate_velocity(space, |p| {
        let (sx, cx) = (pi * p[0]).sin_cos();
        let (sy, cy) = (pi * p[1]).sin_cos();
        [2.0 * pi * sx * sx * sy * cy, -2.0 * pi * sx * cx * sy * sy]
    })
}

#[test]
fn penalty_identity_holds_after_one_step() {
    let space = TaylorHoodSpace::new(generate_unit_square(27).unwrap());
    let ops = Arc::new(assemble_static(&space));
    let problem = perturbed(&space, &[1e-3, -1e-3]);
    let state = tg_state(&space, &problem, 0.1 / 27.0);
    let mut stepper = Stepper::new(Arc::clone(&space), ops, 1.0).unwrap();
    let (_, report) = stepper.step(&state, &problem).unwrap();
    assert_eq!(report.factorizations, 1);
    for r in report.penalty_residuals {
        assert!(r <= 1e-10, "penalty residual {r:e}");
    }
}

#[test]
fn quiescent_single_member_stays_at_rest() {
    let space = TaylorHoodSpace::new(generate_unit_square(6).unwrap());
    let ops = Arc::new(assemble_static(&space));
    let mut state = EnsembleState::new(vec![Member::zeros(&space)], 0.0, 0.05, 0.05).unwrap();
    let mut stepper = Stepper::new(Arc::clone(&space), ops, 0.1).unwrap();
    let problem = Unforced { space: Arc::clone(&space) };
    for _ in 0..5 {
        state = stepper.step(&state, &problem).unwrap().0;
    }
    let m = &state.members()[0];
    assert!(m.velocity.coefficients().iter().all(|&v| v == 0.0));
    assert!(m.pressure.coefficients().iter().all(|&v| v == 0.0));
}

#[test]
fn identical_members_remain_identical() {
    let space = TaylorHoodSpace::new(generate_unit_square(8).unwrap());
    let ops = Arc::new(assemble_static(&space));
    let u = swirl(&space);
    let members = (0..3).map(|_| Member::from_velocity(u.clone()).unwrap()).collect();
    let mut state = EnsembleState::new(members, 0.0, 0.02, 0.02).unwrap();
    let mut stepper = Stepper::new(Arc::clone(&space), ops, 0.05).unwrap();
    let problem = Unforced { space: Arc::clone(&space) };
    for _ in 0..4 {
        state = stepper.step(&state, &problem).unwrap().0;
    }
    let first = &state.members()[0];
    for m in &state.members()[1..] {
        assert_eq!(m, first);
    }
}

#[test]
fn member_order_does_not_matter() {
    let space = TaylorHoodSpace::new(generate_unit_square(8).unwrap());
    let ops = Arc::new(assemble_static(&space));
    let base = swirl(&space);
    let members = [1.0, 0.9, 1.2]
        .iter()
        .map(|&s| Member::from_velocity(base.scaled(s)).unwrap())
        .collect();
    let state = EnsembleState::new(members, 0.0, 0.02, 0.02).unwrap();
    let unforced = Unforced { space: Arc::clone(&space) };
    let mut stepper = Stepper::new(Arc::clone(&space), ops, 0.05).unwrap();
    let forward = stepper.step(&state, &unforced).unwrap().0;
    let order = [2, 0, 1];
    let permuted = stepper.step(&state.permuted(&order), &unforced).unwrap().0;
    for (k, &j) in order.iter().enumerate() {
        let (a, b) = (&permuted.members()[k], &forward.members()[j]);
        let diff = a
            .velocity
            .coefficients()
            .iter()
            .zip(b.velocity.coefficients())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-13, "member {j}: {diff:e}");
    }
}

#[test]
fn shared_and_per_member_solves_agree() {
    let space = TaylorHoodSpace::new(generate_unit_square(10).unwrap());
    let ops = Arc::new(assemble_static(&space));
    let problem = perturbed(&space, &[1e-3, -1e-3, 5e-4]);
    let mut a = tg_state(&space, &problem, 0.01);
    let mut b = a.clone();
    let mut shared = Stepper::new(Arc::clone(&space), Arc::clone(&ops), 1.0).unwrap();
    let mut per = Stepper::new(Arc::clone(&space), ops, 1.0)
        .unwrap()
        .with_strategy(SolveStrategy::PerMember);
    for _ in 0..3 {
        let (na, ra) = shared.step(&a, &problem).unwrap();
        let (nb, rb) = per.step(&b, &problem).unwrap();
        assert_eq!(ra.factorizations, 1);
        assert_eq!(rb.factorizations, 3);
        assert_eq!(ra.fingerprint, rb.fingerprint);
        a = na;
        b = nb;
    }
    for (x, y) in a.members().iter().zip(b.members()) {
        for (p, q) in x.velocity.coefficients().iter().zip(y.velocity.coefficients()) {
            assert!((p - q).abs() <= 1e-12);
        }
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let space = TaylorHoodSpace::new(generate_unit_square(4).unwrap());
    let members = vec![Member::from_velocity(swirl(&space)).unwrap(), Member::zeros(&space)];
    let mut state = EnsembleState::new(members, 0.25, 0.01, 0.02).unwrap();
    state.step_index = 7;
    let mut buf = Vec::new();
    write_checkpoint(&state, &mut buf).unwrap();
    let back = read_checkpoint(&space, buf.as_slice()).unwrap();
    assert_eq!(back, state);
}
