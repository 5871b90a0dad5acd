//! CSR matrices, a reusable sparse LU, and discrete norms.
//!
//! The LU is backed by faer's supernodal sparse LU with a COLAMD fill-reducing
//! ordering. The symbolic analysis depends only on the sparsity pattern, so
//! a [`Factorizer`] keeps it and reuses it for every matrix with the same
//! pattern. All numeric work runs sequentially so results are bitwise
//! reproducible.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::perm::PermRef;
use faer::sparse::linalg::lu::{simplicial, LuRef, NumericLu, SymbolicLu};
use faer::sparse::linalg::LuError;
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Conj, MatMut, Par};
use rayon::prelude::*;

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is singular (pivot {pivot})")]
    Singular { pivot: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix must be square, got {0}x{1}")]
    NotSquare(usize, usize),
    #[error("sparsity pattern differs from the analysed one")]
    PatternMismatch,
    #[error("sparse factorization failed: {0}")]
    Backend(String),
}

/// Compressed sparse row matrix with sorted, unique column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Zero matrix with the given per-row column sets.
    pub fn from_pattern(ncols: usize, rows: &[BTreeSet<usize>]) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0);
        let mut col_idx = Vec::with_capacity(rows.iter().map(BTreeSet::len).sum());
        for r in rows {
            col_idx.extend(r.iter().copied());
            row_ptr.push(col_idx.len());
        }
        let nnz = col_idx.len();
        SparseMatrix {
            nrows: rows.len(),
            ncols,
            row_ptr,
            col_idx,
            values: vec![0.0; nnz],
        }
    }

    /// Builds a matrix from `(row, col, value)` triplets, summing duplicates
    /// in input order.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut rows = vec![BTreeSet::new(); nrows];
        for &(r, c, _) in triplets {
            rows[r].insert(c);
        }
        let mut m = Self::from_pattern(ncols, &rows);
        for &(r, c, v) in triplets {
            m.add(r, c, v);
        }
        m
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let ncols = rows.first().map_or(0, Vec::len);
        let triplets: Vec<_> = rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().enumerate().filter(|(_, v)| **v != 0.0).map(move |(j, v)| (i, j, *v)))
            .collect();
        Self::from_triplets(rows.len(), ncols, &triplets)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    /// Position of `(i, j)` in the value array, if it is in the pattern.
    #[inline]
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let start = self.row_ptr[i];
        self.col_idx[start..self.row_ptr[i + 1]]
            .binary_search(&j)
            .ok()
            .map(|k| start + k)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.position(i, j).map_or(0.0, |k| self.values[k])
    }

    /// Adds `v` to entry `(i, j)`.
    ///
    /// Panics if the entry is outside the pattern.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self
            .position(i, j)
            .unwrap_or_else(|| panic!("entry ({i}, {j}) outside the sparsity pattern"));
        self.values[k] += v;
    }

    pub fn same_pattern(&self, other: &SparseMatrix) -> bool {
        self.nrows == other.nrows
            && self.ncols == other.ncols
            && self.row_ptr == other.row_ptr
            && self.col_idx == other.col_idx
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols, "matvec dimension mismatch");
        (0..self.nrows)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    /// `xᵀ A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        assert_eq!(x.len(), self.nrows);
        assert_eq!(y.len(), self.ncols);
        (0..self.nrows)
            .map(|i| x[i] * self.row(i).map(|(j, v)| v * y[j]).sum::<f64>())
            .sum()
    }

    /// `b − A x` evaluated with error-free transformations (TwoSum and an
    /// FMA-based TwoProduct), as accurate as twice the working precision.
    /// Meant for iterative refinement when rows cancel heavily.
    pub fn residual_compensated(&self, b: &[f64], x: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.nrows);
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|i| {
                let mut acc = CompensatedSum::new(b[i]);
                for (j, a) in self.row(i) {
                    acc.add_product(-a, x[j]);
                }
                acc.value()
            })
            .collect()
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut counts = vec![0usize; self.ncols + 1];
        for &j in &self.col_idx {
            counts[j + 1] += 1;
        }
        for j in 0..self.ncols {
            counts[j + 1] += counts[j];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut col_idx = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                let k = next[j];
                col_idx[k] = i;
                values[k] = v;
                next[j] += 1;
            }
        }
        SparseMatrix {
            nrows: self.ncols,
            ncols: self.nrows,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Entrywise `Σ coeffs[k] * mats[k]` over matrices sharing one pattern.
    pub fn linear_combination(terms: &[(f64, &SparseMatrix)]) -> Result<SparseMatrix, LinalgError> {
        let (_, first) = terms
            .first()
            .ok_or_else(|| LinalgError::DimensionMismatch("empty combination".into()))?;
        if terms.iter().any(|(_, m)| !m.same_pattern(first)) {
            return Err(LinalgError::PatternMismatch);
        }
        let mut out = (*first).clone();
        for (k, v) in out.values.iter_mut().enumerate() {
            *v = terms.iter().map(|(c, m)| c * m.values[k]).sum();
        }
        Ok(out)
    }

    /// Assembles the 2x2 block matrix `[[a, b], [c, d]]`.
    pub fn block2x2(a: &SparseMatrix, b: &SparseMatrix, c: &SparseMatrix, d: &SparseMatrix) -> SparseMatrix {
        assert!(a.nrows == b.nrows && c.nrows == d.nrows);
        assert!(a.ncols == c.ncols && b.ncols == d.ncols);
        let nrows = a.nrows + c.nrows;
        let ncols = a.ncols + b.ncols;
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        row_ptr.push(0);
        let nnz = a.nnz() + b.nnz() + c.nnz() + d.nnz();
        let mut col_idx = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        for (left, right) in [(a, b), (c, d)] {
            for i in 0..left.nrows {
                for (j, v) in left.row(i) {
                    col_idx.push(j);
                    values.push(v);
                }
                for (j, v) in right.row(i) {
                    col_idx.push(left.ncols + j);
                    values.push(v);
                }
                row_ptr.push(col_idx.len());
            }
        }
        SparseMatrix {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Submatrix on the given sorted row and column index sets.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> SparseMatrix {
        let mut map = vec![usize::MAX; self.ncols];
        for (k, &c) in cols.iter().enumerate() {
            map[c] = k;
        }
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for &i in rows {
            for (j, v) in self.row(i) {
                if map[j] != usize::MAX {
                    col_idx.push(map[j]);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        SparseMatrix {
            nrows: rows.len(),
            ncols: cols.len(),
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest `|a_ij - a_ji|` relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        let mut worst = 0.0_f64;
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst / scale
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for (i, row) in d.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] += v;
            }
        }
        d
    }

    /// Matrix Market coordinate format (1-based, general, real).
    pub fn to_matrix_market(&self) -> String {
        let mut s = String::with_capacity(32 * self.nnz() + 64);
        s.push_str("%%MatrixMarket matrix coordinate real general\n");
        let _ = writeln!(s, "{} {} {}", self.nrows, self.ncols, self.nnz());
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                let _ = writeln!(s, "{} {} {:.16e}", i + 1, j + 1, v);
            }
        }
        s
    }

    pub fn write_matrix_market(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_matrix_market().as_bytes())?;
        f.flush()
    }
}

static FACTORIZATION_STAMP: AtomicU64 = AtomicU64::new(0);

struct Analysis {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    symbolic: SymbolicLu<usize>,
}

/// LU factors of a square sparse matrix, ready for repeated solves.
///
/// Immutable once built; concurrent solves from several threads are fine.
pub struct Factorization {
    analysis: Arc<Analysis>,
    numeric: NumericLu<usize, f64>,
    stamp: u64,
}

impl std::fmt::Debug for Factorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Factorization")
            .field("n", &self.analysis.n)
            .field("stamp", &self.stamp)
            .finish()
    }
}

/// Caches the symbolic analysis of one sparsity pattern.
#[derive(Default)]
pub struct Factorizer {
    analysis: Option<Arc<Analysis>>,
}

fn check_square(a: &SparseMatrix) -> Result<(), LinalgError> {
    if a.nrows != a.ncols {
        return Err(LinalgError::NotSquare(a.nrows, a.ncols));
    }
    Ok(())
}

/// The CSR arrays of `A` are the CSC arrays of `Aᵀ`; the factors computed here
/// are those of `Aᵀ`, and solves go through the transposed solve.
fn transposed_view(a: &SparseMatrix) -> SparseColMatRef<'_, usize, f64> {
    SparseColMatRef::new(
        SymbolicSparseColMatRef::new_checked(a.nrows, a.ncols, &a.row_ptr, None, &a.col_idx),
        &a.values,
    )
}

fn map_lu_error(e: LuError) -> LinalgError {
    match e {
        LuError::SymbolicSingular { index } => LinalgError::Singular { pivot: index },
        LuError::Generic(g) => LinalgError::Backend(format!("{g:?}")),
    }
}

impl Factorizer {
    pub fn new() -> Self {
        Self::default()
    }

    fn analysis_for(&mut self, a: &SparseMatrix) -> Result<Arc<Analysis>, LinalgError> {
        if let Some(an) = &self.analysis {
            if an.n == a.nrows && an.row_ptr == a.row_ptr && an.col_idx == a.col_idx {
                return Ok(Arc::clone(an));
            }
        }
        let view = transposed_view(a);
        let symbolic = faer::sparse::linalg::lu::factorize_symbolic_lu(view.symbolic(), Default::default())
            .map_err(|e| LinalgError::Backend(format!("{e:?}")))?;
        let an = Arc::new(Analysis {
            n: a.nrows,
            row_ptr: a.row_ptr.clone(),
            col_idx: a.col_idx.clone(),
            symbolic,
        });
        self.analysis = Some(Arc::clone(&an));
        Ok(an)
    }

    /// Factorizes `a`, reusing the symbolic analysis when the pattern matches
    /// the previous call.
    pub fn factorize(&mut self, a: &SparseMatrix) -> Result<Factorization, LinalgError> {
        check_square(a)?;
        if let Some(pivot) = empty_line(a) {
            return Err(LinalgError::Singular { pivot });
        }
        let analysis = self.analysis_for(a)?;
        let mut numeric = NumericLu::new();
        {
            let sym = &analysis.symbolic;
            let mut mem = MemBuffer::new(sym.factorize_numeric_lu_scratch::<f64>(Par::Seq, Default::default()));
            sym.factorize_numeric_lu(
                &mut numeric,
                transposed_view(a),
                Par::Seq,
                MemStack::new(&mut mem),
                Default::default(),
            )
            .map_err(map_lu_error)?;
        }
        let fact = Factorization {
            analysis,
            numeric,
            stamp: FACTORIZATION_STAMP.fetch_add(1, Ordering::Relaxed),
        };
        // Partial pivoting never fails on a zero column once the pattern is
        // structurally nonsingular; a zero pivot shows up as a non-finite solve.
        let ones = vec![1.0; a.nrows];
        let probe = fact.solve(&ones)?;
        let residual = norm2(&a.matvec(&probe).iter().zip(&ones).map(|(x, y)| x - y).collect::<Vec<_>>());
        if probe.iter().any(|v| !v.is_finite()) || residual > 1e-6 * norm2(&ones) {
            return Err(LinalgError::Singular {
                pivot: locate_zero_pivot(a).unwrap_or(0),
            });
        }
        Ok(fact)
    }
}

/// Index of a row or column with no nonzero value.
fn empty_line(a: &SparseMatrix) -> Option<usize> {
    let mut col_seen = vec![false; a.ncols];
    let mut first_row = None;
    for i in 0..a.nrows {
        let mut any = false;
        for (j, v) in a.row(i) {
            if v != 0.0 {
                any = true;
                col_seen[j] = true;
            }
        }
        if !any && first_row.is_none() {
            first_row = Some(i);
        }
    }
    let first_col = col_seen.iter().position(|s| !s);
    match (first_row, first_col) {
        (Some(r), Some(c)) => Some(r.min(c)),
        (r, c) => r.or(c),
    }
}

/// Runs a simplicial LU in natural order and returns the first step whose
/// pivot is negligible.
fn locate_zero_pivot(a: &SparseMatrix) -> Option<usize> {
    let n = a.nrows;
    let mut row_perm = vec![0usize; n];
    let mut row_perm_inv = vec![0usize; n];
    let ident: Vec<usize> = (0..n).collect();
    let col_perm = PermRef::new_checked(&ident, &ident, n);
    let mut lu = simplicial::SimplicialLu::<usize, f64>::new();
    let mut mem = MemBuffer::new(simplicial::factorize_simplicial_numeric_lu_scratch::<usize, f64>(n, n));
    if let Err(LuError::SymbolicSingular { index }) = simplicial::factorize_simplicial_numeric_lu(
        &mut row_perm,
        &mut row_perm_inv,
        &mut lu,
        transposed_view(a),
        col_perm,
        MemStack::new(&mut mem),
    ) {
        return Some(index);
    }
    let scale = a.max_abs();
    let u = lu.u_factor_unsorted();
    let (ptr, rows, vals) = (u.col_ptr(), u.row_idx(), u.val());
    (0..n).find(|&j| {
        (ptr[j]..ptr[j + 1])
            .find(|&k| rows[k] == j)
            .is_none_or(|k| vals[k].abs() <= 1e-14 * scale || !vals[k].is_finite())
    })
}

/// One-shot factorization without symbolic reuse.
pub fn factorize(a: &SparseMatrix) -> Result<Factorization, LinalgError> {
    Factorizer::new().factorize(a)
}

impl Factorization {
    pub fn dim(&self) -> usize {
        self.analysis.n
    }

    /// Monotone counter identifying when the factorization was created.
    pub fn stamp(&self) -> u64 {
        self.stamp
    }

    fn lu(&self) -> LuRef<'_, usize, f64> {
        LuRef::new_unchecked(&self.analysis.symbolic, &self.numeric)
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let n = self.dim();
        if rhs.len() != n {
            return Err(LinalgError::DimensionMismatch(format!(
                "right-hand side has length {}, expected {n}",
                rhs.len()
            )));
        }
        let mut x = rhs.to_vec();
        let mut mem = MemBuffer::new(self.analysis.symbolic.solve_transpose_in_place_scratch::<f64>(1, Par::Seq));
        self.lu().solve_transpose_in_place_with_conj(
            Conj::No,
            MatMut::from_column_major_slice_mut(&mut x, n, 1),
            Par::Seq,
            MemStack::new(&mut mem),
        );
        Ok(x)
    }

    /// Solves for every right-hand side; each output depends only on its own
    /// input, so results do not depend on list order or thread count.
    pub fn solve_multi(&self, rhs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, LinalgError> {
        rhs.par_iter().map(|b| self.solve(b)).collect()
    }
}

/// Discrete H⁻¹ norm of a load vector: `sqrt(fᵀ K⁻¹ f)` on the free dofs,
/// where `K` is the stiffness restricted to the free rows and columns and
/// `free` lists the free dofs of `f`.
pub struct DualNorm {
    free: Vec<usize>,
    factor: Factorization,
}

impl DualNorm {
    pub fn new(stiffness: &SparseMatrix, free: Vec<usize>) -> Result<Self, LinalgError> {
        let k = stiffness.submatrix(&free, &free);
        let factor = factorize(&k)?;
        Ok(DualNorm { free, factor })
    }

    pub fn norm(&self, f: &[f64]) -> Result<f64, LinalgError> {
        let fr: Vec<f64> = self.free.iter().map(|&i| f[i]).collect();
        let z = self.factor.solve(&fr)?;
        let q: f64 = fr.iter().zip(&z).map(|(a, b)| a * b).sum();
        Ok(q.max(0.0).sqrt())
    }
}

/// `sqrt(fᵀ z)` with `K z = f` on the free dofs (see [`DualNorm`]).
pub fn discrete_dual_norm(f: &[f64], stiffness: &SparseMatrix, free: &[usize]) -> Result<f64, LinalgError> {
    DualNorm::new(stiffness, free.to_vec())?.norm(f)
}

/// Row-wise `Σ_k s_k·A_k·x_k` with compensated accumulation. Useful when
/// the terms nearly cancel and a plain sum would bury the result in roundoff.
pub fn combined_matvec_compensated(terms: &[(f64, &SparseMatrix, &[f64])]) -> Result<Vec<f64>, LinalgError> {
    let Some((_, first, _)) = terms.first() else {
        return Ok(Vec::new());
    };
    let n = first.nrows;
    for (_, a, x) in terms {
        if a.nrows != n || a.ncols != x.len() {
            return Err(LinalgError::DimensionMismatch(format!(
                "combined matvec term is {}x{} with vector of length {}, expected {} rows",
                a.nrows,
                a.ncols,
                x.len(),
                n
            )));
        }
    }
    Ok((0..n)
        .map(|i| {
            let mut acc = CompensatedSum::new(0.0);
            for (scale, a, x) in terms {
                for (j, v) in a.row(i) {
                    acc.add_product(scale * v, x[j]);
                }
            }
            acc.value()
        })
        .collect())
}

/// Kahan-Babuska style accumulator with exact products via FMA.
struct CompensatedSum {
    s: f64,
    c: f64,
}

impl CompensatedSum {
    fn new(s: f64) -> Self {
        CompensatedSum { s, c: 0.0 }
    }

    fn add_product(&mut self, a: f64, b: f64) {
        let p = a * b;
        let perr = a.mul_add(b, -p);
        let t = self.s + p;
        let z = t - self.s;
        self.c += (self.s - (t - z)) + (p - z) + perr;
        self.s = t;
    }

    fn value(&self) -> f64 {
        self.s + self.c
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_solve_returns_rhs() {
        let f = factorize(&SparseMatrix::identity(5)).unwrap();
        let b = vec![1.0, -2.0, 3.5, 0.0, 7.0];
        assert_eq!(f.solve(&b).unwrap(), b);
    }

    #[test]
    fn zero_matrix_is_singular() {
        let z = SparseMatrix::from_triplets(2, 2, &[(0, 0, 0.0), (0, 1, 0.0), (1, 0, 0.0), (1, 1, 0.0)]);
        assert!(matches!(factorize(&z), Err(LinalgError::Singular { .. })));
        let empty = SparseMatrix::from_triplets(2, 2, &[]);
        assert!(matches!(factorize(&empty), Err(LinalgError::Singular { pivot: 0 })));
    }

    #[test]
    fn numerically_singular_pivot_reported() {
        // Rows 1 and 2 are equal; elimination in natural order breaks down at step 2.
        let a = SparseMatrix::from_dense(&[
            vec![4.0, 1.0, 0.0],
            vec![1.0, 2.0, 1.0],
            vec![1.0, 2.0, 1.0],
        ]);
        match factorize(&a) {
            Err(LinalgError::Singular { pivot }) => assert_eq!(pivot, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn not_square_rejected() {
        let a = SparseMatrix::from_triplets(2, 3, &[(0, 0, 1.0)]);
        assert!(matches!(factorize(&a), Err(LinalgError::NotSquare(2, 3))));
    }

    #[test]
    fn nonsymmetric_solve() {
        let a = SparseMatrix::from_dense(&[
            vec![2.0, 1.0, 0.0, 0.0],
            vec![-1.0, 3.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0, 5.0],
            vec![1.0, 0.0, -2.0, 4.0],
        ]);
        let x = vec![1.0, 2.0, -1.0, 0.5];
        let b = a.matvec(&x);
        let got = factorize(&a).unwrap().solve(&b).unwrap();
        for (g, e) in got.iter().zip(&x) {
            assert!((g - e).abs() < 1e-13);
        }
    }

    #[test]
    fn solve_multi_contracts() {
        let a = SparseMatrix::from_dense(&[vec![3.0, 1.0], vec![-1.0, 2.0]]);
        let f = factorize(&a).unwrap();
        let b1 = vec![1.0, 0.0];
        let b2 = vec![0.3, -4.0];
        assert_eq!(f.solve_multi(&[b1.clone()]).unwrap()[0], f.solve(&b1).unwrap());
        let same = f.solve_multi(&[b1.clone(), b1.clone()]).unwrap();
        assert_eq!(same[0], same[1]);
        let fwd = f.solve_multi(&[b1.clone(), b2.clone()]).unwrap();
        let rev = f.solve_multi(&[b2, b1]).unwrap();
        assert_eq!(fwd[0], rev[1]);
        assert_eq!(fwd[1], rev[0]);
        assert!(matches!(
            f.solve_multi(&[vec![1.0; 3]]),
            Err(LinalgError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn transpose_and_blocks() {
        let a = SparseMatrix::from_dense(&[vec![1.0, 2.0, 0.0], vec![0.0, 3.0, 4.0]]);
        let t = a.transpose();
        assert_eq!(t.to_dense(), vec![vec![1.0, 0.0], vec![2.0, 3.0], vec![0.0, 4.0]]);
        let i2 = SparseMatrix::identity(2);
        let i3 = SparseMatrix::identity(3);
        let blk = SparseMatrix::block2x2(&i3, &t, &a, &i2);
        assert_eq!(blk.nrows(), 5);
        assert_eq!(blk.get(0, 3), 1.0);
        assert_eq!(blk.get(4, 2), 4.0);
        assert_eq!(blk.get(4, 4), 1.0);
    }

    #[test]
    fn matrix_market_header() {
        let mm = SparseMatrix::identity(2).to_matrix_market();
        assert!(mm.starts_with("%%MatrixMarket matrix coordinate real general\n2 2 2\n1 1 "));
    }

    #[test]
    fn symbolic_analysis_reused() {
        let a = SparseMatrix::from_dense(&[vec![3.0, 1.0], vec![-1.0, 2.0]]);
        let mut b = a.clone();
        b.values_mut()[0] = 5.0;
        let mut fz = Factorizer::new();
        let fa = fz.factorize(&a).unwrap();
        let fb = fz.factorize(&b).unwrap();
        assert!(Arc::ptr_eq(&fa.analysis, &fb.analysis));
        assert!(fb.stamp() > fa.stamp());
        let x = fb.solve(&[5.0, -1.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && x[1].abs() < 1e-14);
    }
}
