use pensemble_core::experiments::flow_statistics;
use pensemble_core::mesh::generate_unit_square;
use pensemble_core::space::{DiscreteField, TaylorHoodSpace};

#[test]
fn rigid_rotation_statistics_are_exact() {
    let nu = 0.7;
    for m in [3, 9] {
        let space = TaylorHoodSpace::new(generate_unit_square(m).unwrap());
        let u = DiscreteField::interpolate_velocity(&space, |p| [-p[1], p[0]]);
        let s = flow_statistics(&u, nu);
        // |u|² = x² + y², curl = 2.
        assert!((s.ke - 1.0 / 3.0).abs() < 1e-13, "ke {}", s.ke);
        assert!((s.enstrophy - 2.0 * nu).abs() < 1e-13, "enstrophy {}", s.enstrophy);
        assert!((s.angmom - 2.0 / 3.0).abs() < 1e-13, "angmom {}", s.angmom);
    }
}

#[test]
fn uniform_flow_has_no_enstrophy() {
    let space = TaylorHoodSpace::new(generate_unit_square(4).unwrap());
    let u = DiscreteField::interpolate_velocity(&space, |_| [2.0, -1.0]);
    let s = flow_statistics(&u, 1.0);
    assert!((s.ke - 2.5).abs() < 1e-13);
    assert!(s.enstrophy.abs() < 1e-13);
    // ∫ x·(-1) − y·2 = -1/2 − 1.
    assert!((s.angmom - 1.5).abs() < 1e-13);
}
