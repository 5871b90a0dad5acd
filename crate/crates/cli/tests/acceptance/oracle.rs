//! A deliberately plain single-realization IMEX solver used as an oracle.
//!
//! It shares nothing with the library's assembly: its own P2/P1 basis, a
//! collapsed Gauss-Legendre rule, row-replacement Dirichlet conditions and a
//! monolithic triplet assembly. Only the dof numbering (taken from the space)
//! and the sparse LU are common.

use std::sync::Arc;

use pensemble_core::linalg::{factorize, SparseMatrix};
use pensemble_core::space::TaylorHoodSpace;

const GL_X: [f64; 4] = [
    -0.861_136_311_594_052_6,
    -0.339_981_043_584_856_3,
    0.339_981_043_584_856_3,
    0.861_136_311_594_052_6,
];
const GL_W: [f64; 4] = [
    0.347_854_845_137_453_9,
    0.652_145_154_862_546_1,
    0.652_145_154_862_546_1,
    0.347_854_845_137_453_9,
];

/// 16-point rule on the reference triangle via the Duffy map; exact for
/// degree 6. Returns barycentric points and weights summing to 1/2.
fn duffy_rule() -> Vec<([f64; 3], f64)> {
    let mut out = Vec::new();
    for i in 0..4 {
        for j in 0..4 {
            let a = 0.5 * (GL_X[i] + 1.0);
            let b = 0.5 * (GL_X[j] + 1.0);
            let xi = a;
            let eta = b * (1.0 - a);
            let w = 0.25 * GL_W[i] * GL_W[j] * (1.0 - a);
            out.push(([1.0 - xi - eta, xi, eta], w));
        }
    }
    out
}

fn p2(l: [f64; 3], gl: [[f64; 2]; 3]) -> ([f64; 6], [[f64; 2]; 6]) {
    let v = [
        l[0] * (2.0 * l[0] - 1.0),
        l[1] * (2.0 * l[1] - 1.0),
        l[2] * (2.0 * l[2] - 1.0),
        4.0 * l[0] * l[1],
        4.0 * l[1] * l[2],
        4.0 * l[2] * l[0],
    ];
    let mut g = [[0.0; 2]; 6];
    for d in 0..2 {
        for i in 0..3 {
            g[i][d] = (4.0 * l[i] - 1.0) * gl[i][d];
        }
        g[3][d] = 4.0 * (l[1] * gl[0][d] + l[0] * gl[1][d]);
        g[4][d] = 4.0 * (l[2] * gl[1][d] + l[1] * gl[2][d]);
        g[5][d] = 4.0 * (l[0] * gl[2][d] + l[2] * gl[0][d]);
    }
    (v, g)
}

pub struct NaiveImex {
    space: Arc<TaylorHoodSpace>,
    pub nu: f64,
    pub dt: f64,
    pub eps: f64,
}

impl NaiveImex {
    pub fn new(space: Arc<TaylorHoodSpace>, nu: f64, dt: f64, eps: f64) -> Self {
        NaiveImex { space, nu, dt, eps }
    }

    /// One unforced step with homogeneous no-slip data. `u` holds the P2
    /// velocity coefficients; returns `(u, p)` at the new level.
    pub fn step(&self, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let s = &*self.space;
        let nu_dofs = s.num_velocity_dofs();
        let n = s.num_dofs();
        let rule = duffy_rule();
        let mut trip: Vec<(usize, usize, f64)> = Vec::new();
        let mut rhs = vec![0.0; n];

        for el in s.elements() {
            let x: Vec<[f64; 2]> = (0..3).map(|k| s.nodes()[el[k]]).collect();
            let det = (x[1][0] - x[0][0]) * (x[2][1] - x[0][1]) - (x[2][0] - x[0][0]) * (x[1][1] - x[0][1]);
            let gl = [
                [(x[1][1] - x[2][1]) / det, (x[2][0] - x[1][0]) / det],
                [(x[2][1] - x[0][1]) / det, (x[0][0] - x[2][0]) / det],
                [(x[0][1] - x[1][1]) / det, (x[1][0] - x[0][0]) / det],
            ];
            let mut m = [[0.0; 6]; 6];
            let mut k = [[0.0; 6]; 6];
            let mut conv = [[0.0; 6]; 6];
            let mut b = [[[0.0; 2]; 6]; 3];
            let mut mp = [[0.0; 3]; 3];
            for &(l, w) in &rule {
                let (phi, dphi) = p2(l, gl);
                let jw = w * det;
                let mut wv = [0.0; 2];
                for a in 0..6 {
                    for c in 0..2 {
                        wv[c] += u[2 * el[a] + c] * phi[a];
                    }
                }
                for a in 0..6 {
                    let wa = wv[0] * dphi[a][0] + wv[1] * dphi[a][1];
                    for bb in 0..6 {
                        let wb = wv[0] * dphi[bb][0] + wv[1] * dphi[bb][1];
                        m[a][bb] += jw * phi[a] * phi[bb];
                        k[a][bb] += jw * (dphi[a][0] * dphi[bb][0] + dphi[a][1] * dphi[bb][1]);
                        // test a, trial b: ½(w·∇φ_b)φ_a − ½(w·∇φ_a)φ_b
                        conv[a][bb] += jw * 0.5 * (wb * phi[a] - wa * phi[bb]);
                    }
                }
                for q in 0..3 {
                    for a in 0..6 {
                        for c in 0..2 {
                            b[q][a][c] += jw * l[q] * dphi[a][c];
                        }
                    }
                    for r in 0..3 {
                        mp[q][r] += jw * l[q] * l[r];
                    }
                }
            }
            for a in 0..6 {
                for c in 0..2 {
                    let row = 2 * el[a] + c;
                    for bb in 0..6 {
                        let col = 2 * el[bb] + c;
                        let v = m[a][bb] / self.dt + self.nu * k[a][bb] + conv[a][bb];
                        trip.push((row, col, v));
                        rhs[row] += m[a][bb] / self.dt * u[col];
                    }
                    for q in 0..3 {
                        trip.push((row, nu_dofs + el[q], -b[q][a][c]));
                        trip.push((nu_dofs + el[q], row, b[q][a][c]));
                    }
                }
            }
            for q in 0..3 {
                for r in 0..3 {
                    trip.push((nu_dofs + el[q], nu_dofs + el[r], self.eps * mp[q][r]));
                }
            }
        }

        let mask = s.dirichlet_mask();
        trip.retain(|&(r, _, _)| r >= nu_dofs || !mask[r]);
        for (d, &fixed) in mask.iter().enumerate() {
            if fixed {
                trip.push((d, d, 1.0));
                rhs[d] = 0.0;
            }
        }
        let a = SparseMatrix::from_triplets(n, n, &trip);
        let lu = factorize(&a).expect("oracle system is nonsingular");
        let mut x = lu.solve(&rhs).expect("solve");
        for _ in 0..2 {
            let r = a.residual_compensated(&rhs, &x);
            let dx = lu.solve(&r).expect("solve");
            x.iter_mut().zip(&dx).for_each(|(xi, di)| *xi += di);
        }
        let p = x.split_off(nu_dofs);
        (x, p)
    }
}
