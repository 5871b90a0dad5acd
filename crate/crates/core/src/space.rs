//! Taylor-Hood P2/P1 spaces on triangles.
//!
//! Velocity unknowns live on the P2 nodes (mesh vertices, then edge
//! midpoints) with the two components interleaved: dof `2 * node + c`.
//! Pressure unknowns live on the vertices. In the coupled system the
//! pressure block follows the velocity block.

use std::sync::Arc;

use crate::mesh::{BoundaryDofs, Mesh, Point};

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum SpaceError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("element {0} out of range")]
    ElementOutOfRange(usize),
    #[error("coefficient vector has length {got}, expected {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("fields live on different spaces or have different kinds")]
    SpaceMismatch,
}

/// Quadrature on the reference triangle `{(ξ, η): ξ, η ≥ 0, ξ + η ≤ 1}`.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    /// Barycentric coordinates `(λ0, λ1, λ2)`; reference coordinates are `(λ1, λ2)`.
    pub points: Vec<[f64; 3]>,
    /// Weights summing to the reference area 1/2.
    pub weights: Vec<f64>,
    pub degree: usize,
}

impl QuadratureRule {
    /// Seven-point rule exact for polynomials of degree 5.
    pub fn degree5() -> Self {
        let s = 15f64.sqrt();
        let a1 = (6.0 - s) / 21.0;
        let a2 = (6.0 + s) / 21.0;
        let w1 = (155.0 - s) / 1200.0;
        let w2 = (155.0 + s) / 1200.0;
        let mut points = vec![[1.0 / 3.0; 3]];
        let mut weights = vec![9.0 / 40.0];
        for (a, w) in [(a1, w1), (a2, w2)] {
            let b = 1.0 - 2.0 * a;
            points.extend([[b, a, a], [a, b, a], [a, a, b]]);
            weights.extend([w; 3]);
        }
        weights.iter_mut().for_each(|w| *w *= 0.5);
        QuadratureRule {
            points,
            weights,
            degree: 5,
        }
    }

    /// Three-point edge-midpoint rule, exact for degree 2.
    pub fn degree2() -> Self {
        QuadratureRule {
            points: vec![[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]],
            weights: vec![1.0 / 6.0; 3],
            degree: 2,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Values and reference-coordinate gradients of the local basis at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisEval {
    pub values: Vec<f64>,
    pub gradients: Vec<[f64; 2]>,
}

const GRAD_LAMBDA: [[f64; 2]; 3] = [[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]];

fn p2_values(l: [f64; 3]) -> [f64; 6] {
    [
        l[0] * (2.0 * l[0] - 1.0),
        l[1] * (2.0 * l[1] - 1.0),
        l[2] * (2.0 * l[2] - 1.0),
        4.0 * l[0] * l[1],
        4.0 * l[1] * l[2],
        4.0 * l[2] * l[0],
    ]
}

fn p2_gradients(l: [f64; 3]) -> [[f64; 2]; 6] {
    let g = GRAD_LAMBDA;
    let mut out = [[0.0; 2]; 6];
    for i in 0..3 {
        for d in 0..2 {
            out[i][d] = (4.0 * l[i] - 1.0) * g[i][d];
        }
    }
    for (k, (i, j)) in [(0, 1), (1, 2), (2, 0)].into_iter().enumerate() {
        for d in 0..2 {
            out[3 + k][d] = 4.0 * (l[j] * g[i][d] + l[i] * g[j][d]);
        }
    }
    out
}

/// Evaluates the Lagrange basis of degree 1 or 2 at a barycentric point.
///
/// Local ordering: vertices 0, 1, 2, then (P2 only) the midpoints of edges
/// (0,1), (1,2), (2,0).
pub fn eval_reference_basis(degree: usize, bary: [f64; 3]) -> Result<BasisEval, SpaceError> {
    let sum: f64 = bary.iter().sum();
    if (sum - 1.0).abs() > 1e-12 || bary.iter().any(|&l| !(-1e-12..=1.0 + 1e-12).contains(&l)) {
        return Err(SpaceError::InvalidArgument(format!(
            "{bary:?} is not a barycentric point of the triangle"
        )));
    }
    match degree {
        1 => Ok(BasisEval {
            values: bary.to_vec(),
            gradients: GRAD_LAMBDA.to_vec(),
        }),
        2 => Ok(BasisEval {
            values: p2_values(bary).to_vec(),
            gradients: p2_gradients(bary).to_vec(),
        }),
        _ => Err(SpaceError::InvalidArgument(format!("degree {degree} not in {{1, 2}}"))),
    }
}

/// Affine map from the reference triangle onto a mesh triangle.
#[derive(Debug, Clone, Copy)]
pub struct ElementGeometry {
    pub origin: Point,
    /// Columns are the edge vectors `x1 - x0`, `x2 - x0`.
    pub jacobian: [[f64; 2]; 2],
    /// `J^{-T}`: maps reference gradients to physical gradients.
    pub inv_transpose: [[f64; 2]; 2],
    /// `det J`, twice the element area (positive for counterclockwise triangles).
    pub det: f64,
}

impl ElementGeometry {
    fn new(p0: Point, p1: Point, p2: Point) -> Self {
        let j = [[p1[0] - p0[0], p2[0] - p0[0]], [p1[1] - p0[1], p2[1] - p0[1]]];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        let inv_transpose = [[j[1][1] / det, -j[1][0] / det], [-j[0][1] / det, j[0][0] / det]];
        ElementGeometry {
            origin: p0,
            jacobian: j,
            inv_transpose,
            det,
        }
    }

    #[inline]
    pub fn physical_gradient(&self, g: [f64; 2]) -> [f64; 2] {
        let m = &self.inv_transpose;
        [m[0][0] * g[0] + m[0][1] * g[1], m[1][0] * g[0] + m[1][1] * g[1]]
    }

    #[inline]
    pub fn map(&self, bary: [f64; 3]) -> Point {
        let j = &self.jacobian;
        [
            self.origin[0] + j[0][0] * bary[1] + j[0][1] * bary[2],
            self.origin[1] + j[1][0] * bary[1] + j[1][1] * bary[2],
        ]
    }

    /// Barycentric coordinates of a physical point.
    pub fn barycentric(&self, p: Point) -> [f64; 3] {
        let d = [p[0] - self.origin[0], p[1] - self.origin[1]];
        let j = &self.jacobian;
        let xi = (j[1][1] * d[0] - j[0][1] * d[1]) / self.det;
        let eta = (-j[1][0] * d[0] + j[0][0] * d[1]) / self.det;
        [1.0 - xi - eta, xi, eta]
    }
}

/// Basis tables at the quadrature points of a rule.
#[derive(Debug, Clone)]
pub struct BasisTables {
    pub p2_values: Vec<[f64; 6]>,
    pub p2_gradients: Vec<[[f64; 2]; 6]>,
    pub p1_values: Vec<[f64; 3]>,
}

impl BasisTables {
    pub fn new(rule: &QuadratureRule) -> Self {
        BasisTables {
            p2_values: rule.points.iter().map(|&l| p2_values(l)).collect(),
            p2_gradients: rule.points.iter().map(|&l| p2_gradients(l)).collect(),
            p1_values: rule.points.clone(),
        }
    }
}

#[derive(Debug)]
pub struct TaylorHoodSpace {
    mesh: Mesh,
    nodes: Vec<Point>,
    elements: Vec<[usize; 6]>,
    geometry: Vec<ElementGeometry>,
    boundary: BoundaryDofs,
    dirichlet_mask: Vec<bool>,
    rule: QuadratureRule,
    tables: BasisTables,
}

impl TaylorHoodSpace {
    /// Builds the P2/P1 space on a mesh. Numbering depends only on the mesh.
    pub fn new(mesh: Mesh) -> Arc<Self> {
        let nv = mesh.num_nodes();
        let nodes: Vec<Point> = mesh
            .nodes()
            .iter()
            .copied()
            .chain((0..mesh.num_edges()).map(|e| mesh.edge_midpoint(e)))
            .collect();
        let elements = mesh
            .triangles()
            .iter()
            .zip(mesh.triangle_edges())
            .map(|(t, e)| [t[0], t[1], t[2], nv + e[0], nv + e[1], nv + e[2]])
            .collect();
        let geometry = mesh
            .triangles()
            .iter()
            .map(|t| {
                let p = mesh.nodes();
                ElementGeometry::new(p[t[0]], p[t[1]], p[t[2]])
            })
            .collect();
        let boundary = mesh.boundary_dofs();
        let mut dirichlet_mask = vec![false; 2 * nodes.len()];
        for node in boundary.p2_nodes(nv) {
            dirichlet_mask[2 * node] = true;
            dirichlet_mask[2 * node + 1] = true;
        }
        let rule = QuadratureRule::degree5();
        let tables = BasisTables::new(&rule);
        Arc::new(TaylorHoodSpace {
            mesh,
            nodes,
            elements,
            geometry,
            boundary,
            dirichlet_mask,
            rule,
            tables,
        })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    /// P2 node coordinates: vertices, then edge midpoints.
    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    /// P2 node ids of each element.
    pub fn elements(&self) -> &[[usize; 6]] {
        &self.elements
    }

    pub fn geometry(&self) -> &[ElementGeometry] {
        &self.geometry
    }

    pub fn boundary(&self) -> &BoundaryDofs {
        &self.boundary
    }

    pub fn rule(&self) -> &QuadratureRule {
        &self.rule
    }

    pub fn tables(&self) -> &BasisTables {
        &self.tables
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn num_velocity_dofs(&self) -> usize {
        2 * self.nodes.len()
    }

    pub fn num_pressure_dofs(&self) -> usize {
        self.mesh.num_nodes()
    }

    /// Size of the coupled velocity-pressure system.
    pub fn num_dofs(&self) -> usize {
        self.num_velocity_dofs() + self.num_pressure_dofs()
    }

    /// True on velocity dofs located on the boundary.
    pub fn dirichlet_mask(&self) -> &[bool] {
        &self.dirichlet_mask
    }

    /// Sorted velocity dofs carrying a Dirichlet condition.
    pub fn dirichlet_dofs(&self) -> Vec<usize> {
        (0..self.dirichlet_mask.len()).filter(|&i| self.dirichlet_mask[i]).collect()
    }

    /// Vertex ids of an element (its pressure dofs).
    pub fn pressure_element(&self, e: usize) -> [usize; 3] {
        let el = &self.elements[e];
        [el[0], el[1], el[2]]
    }

    /// Locates the element containing `p` by brute force.
    pub fn locate(&self, p: Point) -> Option<(usize, [f64; 3])> {
        self.geometry.iter().enumerate().find_map(|(e, g)| {
            let l = g.barycentric(p);
            l.iter().all(|&v| v >= -1e-12).then_some((e, l))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Velocity,
    Pressure,
}

/// Value and gradient of a field at a point. For pressure fields only
/// `value[0]` and `gradient[0]` are meaningful; for velocity
/// `gradient[c][d] = ∂u_c/∂x_d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub value: [f64; 2],
    pub gradient: [[f64; 2]; 2],
}

#[derive(Debug, Clone)]
pub struct DiscreteField {
    space: Arc<TaylorHoodSpace>,
    kind: FieldKind,
    coefficients: Vec<f64>,
}

impl PartialEq for DiscreteField {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.space, &other.space)
            && self.kind == other.kind
            && self.coefficients == other.coefficients
    }
}

impl DiscreteField {
    pub fn zeros(space: &Arc<TaylorHoodSpace>, kind: FieldKind) -> Self {
        let n = match kind {
            FieldKind::Velocity => space.num_velocity_dofs(),
            FieldKind::Pressure => space.num_pressure_dofs(),
        };
        DiscreteField {
            space: Arc::clone(space),
            kind,
            coefficients: vec![0.0; n],
        }
    }

    pub fn from_coefficients(
        space: &Arc<TaylorHoodSpace>,
        kind: FieldKind,
        coefficients: Vec<f64>,
    ) -> Result<Self, SpaceError> {
        let expected = Self::zeros(space, kind).coefficients.len();
        if coefficients.len() != expected {
            return Err(SpaceError::LengthMismatch {
                got: coefficients.len(),
                expected,
            });
        }
        Ok(DiscreteField {
            space: Arc::clone(space),
            kind,
            coefficients,
        })
    }

    /// Nodal interpolant of a vector function in the P2 velocity space.
    pub fn interpolate_velocity(space: &Arc<TaylorHoodSpace>, f: impl Fn(Point) -> [f64; 2]) -> Self {
        let coefficients = space.nodes().iter().flat_map(|&p| f(p)).collect();
        DiscreteField {
            space: Arc::clone(space),
            kind: FieldKind::Velocity,
            coefficients,
        }
    }

    /// Nodal interpolant of a scalar function in the P1 pressure space.
    pub fn interpolate_pressure(space: &Arc<TaylorHoodSpace>, f: impl Fn(Point) -> f64) -> Self {
        let coefficients = space.mesh().nodes().iter().map(|&p| f(p)).collect();
        DiscreteField {
            space: Arc::clone(space),
            kind: FieldKind::Pressure,
            coefficients,
        }
    }

    pub fn space(&self) -> &Arc<TaylorHoodSpace> {
        &self.space
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn coefficients_mut(&mut self) -> &mut [f64] {
        &mut self.coefficients
    }

    pub fn into_coefficients(self) -> Vec<f64> {
        self.coefficients
    }

    pub fn is_compatible(&self, other: &DiscreteField) -> bool {
        Arc::ptr_eq(&self.space, &other.space) && self.kind == other.kind
    }

    pub fn ensure_compatible(&self, other: &DiscreteField) -> Result<(), SpaceError> {
        if self.is_compatible(other) {
            Ok(())
        } else {
            Err(SpaceError::SpaceMismatch)
        }
    }

    /// `self - other`.
    pub fn difference(&self, other: &DiscreteField) -> Result<DiscreteField, SpaceError> {
        self.ensure_compatible(other)?;
        let coefficients = self
            .coefficients
            .iter()
            .zip(&other.coefficients)
            .map(|(a, b)| a - b)
            .collect();
        Ok(DiscreteField {
            coefficients,
            ..self.clone()
        })
    }

    pub fn scaled(&self, factor: f64) -> DiscreteField {
        DiscreteField {
            coefficients: self.coefficients.iter().map(|c| factor * c).collect(),
            ..self.clone()
        }
    }

    /// Value and gradient at a physical point of the given element.
    pub fn eval(&self, element: usize, p: Point) -> Result<FieldSample, SpaceError> {
        let geo = self
            .space
            .geometry
            .get(element)
            .ok_or(SpaceError::ElementOutOfRange(element))?;
        let l = geo.barycentric(p);
        Ok(self.eval_barycentric(element, l))
    }

    /// Value and gradient at barycentric coordinates of an element.
    pub fn eval_barycentric(&self, element: usize, l: [f64; 3]) -> FieldSample {
        let geo = &self.space.geometry[element];
        let el = &self.space.elements[element];
        let mut value = [0.0; 2];
        let mut gradient = [[0.0; 2]; 2];
        match self.kind {
            FieldKind::Velocity => {
                let phi = p2_values(l);
                let dphi = p2_gradients(l);
                for a in 0..6 {
                    let g = geo.physical_gradient(dphi[a]);
                    for c in 0..2 {
                        let coef = self.coefficients[2 * el[a] + c];
                        value[c] += coef * phi[a];
                        gradient[c][0] += coef * g[0];
                        gradient[c][1] += coef * g[1];
                    }
                }
            }
            FieldKind::Pressure => {
                for a in 0..3 {
                    let coef = self.coefficients[el[a]];
                    let g = geo.physical_gradient(GRAD_LAMBDA[a]);
                    value[0] += coef * l[a];
                    gradient[0][0] += coef * g[0];
                    gradient[0][1] += coef * g[1];
                }
            }
        }
        FieldSample { value, gradient }
    }
}
