//! Sparse matrices, the κ-dependent system `F(κ) = S − κ²M − iκE(κ)` and
//! direct solvers for it: a complex symmetric `LDLᵀ` (default) and the
//! general sparse LU of `faer`.
//!
//! Matrices are stored row-compressed. `F` has a structurally symmetric
//! pattern, so its CSR arrays are the CSC arrays of `Fᵀ`; the LU is
//! therefore of `Fᵀ` and solves with `F` go through the transposed solve.

use crate::dtn::{materialize_de, materialize_e, BoundaryBlock, DtnError, DtnHandle};
use crate::C64;
use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMat};
use faer::Mat;
use std::io::Write;
use std::sync::{Arc, OnceLock};
use thiserror::Error;

mod ldlt;
pub use ldlt::{SymmetricFactor, SymmetricSymbolic};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is numerically singular")]
    Singular,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("sparse factorization failed: {0}")]
    Backend(String),
    #[error(transparent)]
    Dtn(#[from] DtnError),
}

/// Compressed sparse row pattern shared by several value arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrPattern {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
}

impl CsrPattern {
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    /// Position of `(i, j)` in the value array.
    pub fn find(&self, i: usize, j: usize) -> Option<usize> {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        self.col_idx[lo..hi].binary_search(&j).ok().map(|k| lo + k)
    }

    /// Build a pattern from `(row, col)` keys and, for every key, the
    /// position it lands on. Duplicate keys share a position.
    pub(crate) fn from_keys(nrows: usize, ncols: usize, keys: &[(usize, usize)]) -> (Self, Vec<usize>) {
        let mut order: Vec<usize> = (0..keys.len()).collect();
        order.sort_by_key(|&k| keys[k]);
        let mut row_ptr = vec![0usize; nrows + 1];
        let mut col_idx = Vec::with_capacity(keys.len());
        let mut slot = vec![0usize; keys.len()];
        let mut last: Option<(usize, usize)> = None;
        for &k in &order {
            let key = keys[k];
            assert!(key.0 < nrows && key.1 < ncols, "entry {key:?} out of bounds");
            if last != Some(key) {
                col_idx.push(key.1);
                row_ptr[key.0 + 1] += 1;
                last = Some(key);
            }
            slot[k] = col_idx.len() - 1;
        }
        for i in 0..nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        (
            CsrPattern {
                nrows,
                ncols,
                row_ptr,
                col_idx,
            },
            slot,
        )
    }
}

macro_rules! sparse_common {
    ($t:ty, $zero:expr) => {
        /// Sum duplicate entries. Contributions to one position are added
        /// in input order, so the result does not depend on how the input
        /// was produced as long as its order is fixed.
        pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, $t)]) -> Self {
            let keys: Vec<(usize, usize)> = triplets.iter().map(|t| (t.0, t.1)).collect();
            let (pattern, slot) = CsrPattern::from_keys(nrows, ncols, &keys);
            let mut values = vec![$zero; pattern.nnz()];
            for (k, t) in triplets.iter().enumerate() {
                values[slot[k]] += t.2;
            }
            Self {
                pattern: Arc::new(pattern),
                values,
            }
        }

        pub fn nrows(&self) -> usize {
            self.pattern.nrows
        }

        pub fn ncols(&self) -> usize {
            self.pattern.ncols
        }

        pub fn nnz(&self) -> usize {
            self.pattern.nnz()
        }

        pub fn get(&self, i: usize, j: usize) -> $t {
            self.pattern.find(i, j).map(|k| self.values[k]).unwrap_or($zero)
        }

        /// Iterate `(row, col, value)` in storage order.
        pub fn iter(&self) -> impl Iterator<Item = (usize, usize, $t)> + '_ {
            (0..self.pattern.nrows).flat_map(move |i| {
                (self.pattern.row_ptr[i]..self.pattern.row_ptr[i + 1])
                    .map(move |k| (i, self.pattern.col_idx[k], self.values[k]))
            })
        }

        pub fn transpose(&self) -> Self {
            let t: Vec<_> = self.iter().map(|(i, j, v)| (j, i, v)).collect();
            Self::from_triplets(self.ncols(), self.nrows(), &t)
        }
    };
}

/// Real sparse matrix (stiffness, mass).
#[derive(Debug, Clone, PartialEq)]
pub struct RealSparseMatrix {
    pub pattern: Arc<CsrPattern>,
    pub values: Vec<f64>,
}

impl RealSparseMatrix {
    sparse_common!(f64, 0.0);

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols());
        let p = &self.pattern;
        (0..p.nrows)
            .map(|i| {
                (p.row_ptr[i]..p.row_ptr[i + 1])
                    .map(|k| self.values[k] * x[p.col_idx[k]])
                    .sum()
            })
            .collect()
    }

    pub fn mul_vec_c(&self, x: &[C64]) -> Vec<C64> {
        assert_eq!(x.len(), self.ncols());
        let p = &self.pattern;
        (0..p.nrows)
            .map(|i| {
                (p.row_ptr[i]..p.row_ptr[i + 1])
                    .map(|k| x[p.col_idx[k]] * self.values[k])
                    .sum()
            })
            .collect()
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        let p = &self.pattern;
        (0..p.nrows)
            .map(|i| (p.row_ptr[i]..p.row_ptr[i + 1]).map(|k| self.values[k].abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Exact (bitwise) symmetry.
    pub fn is_symmetric(&self) -> bool {
        self.iter().all(|(i, j, v)| self.get(j, i) == v)
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.mul_vec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }
}

/// Complex sparse matrix (`F(κ)`, `F'(κ)`).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSparseMatrix {
    pub pattern: Arc<CsrPattern>,
    pub values: Vec<C64>,
}

impl ComplexSparseMatrix {
    sparse_common!(C64, C64::new(0.0, 0.0));

    pub fn mul_vec(&self, x: &[C64]) -> Vec<C64> {
        assert_eq!(x.len(), self.ncols());
        let p = &self.pattern;
        (0..p.nrows)
            .map(|i| {
                (p.row_ptr[i]..p.row_ptr[i + 1])
                    .map(|k| self.values[k] * x[p.col_idx[k]])
                    .sum()
            })
            .collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `‖F − Fᵀ‖_F`.
    pub fn asymmetry(&self) -> f64 {
        self.iter()
            .map(|(i, j, v)| (v - self.get(j, i)).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_dense(&self) -> Mat<C64> {
        let mut m = Mat::<C64>::zeros(self.nrows(), self.ncols());
        for (i, j, v) in self.iter() {
            m[(i, j)] += v;
        }
        m
    }

    /// Text dump, one `i j re im` line per stored entry.
    pub fn write_triplets<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (i, j, v) in self.iter() {
            writeln!(w, "{i} {j} {:.16e} {:.16e}", v.re, v.im)?;
        }
        Ok(())
    }
}

/// Factors of a square complex sparse matrix.
pub struct Factorization {
    /// Dimension of the system the caller solves.
    n: usize,
    /// Dimension of the factored matrix; larger than `n` for a bordered
    /// system whose trailing unknowns are auxiliary.
    full: usize,
    inner: Factors,
}

enum Factors {
    /// LU of the transpose (see module docs).
    Lu(Lu<usize, C64>),
    /// Symmetric factors plus the factored matrix, kept for one step of
    /// iterative refinement.
    Ldlt {
        fac: SymmetricFactor,
        pattern: Arc<CsrPattern>,
        values: Vec<C64>,
    },
}

impl std::fmt::Debug for Factorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Factorization").field("n", &self.n).finish()
    }
}

fn symbolic_of(pattern: &CsrPattern) -> SymbolicSparseColMat<usize> {
    SymbolicSparseColMat::new_checked(
        pattern.ncols,
        pattern.nrows,
        pattern.row_ptr.clone(),
        None,
        pattern.col_idx.clone(),
    )
}

/// Reusable symbolic analysis (ordering and elimination structure) for
/// every matrix on one pattern.
#[derive(Clone)]
pub struct SymbolicFactor {
    pattern: Arc<CsrPattern>,
    structure: SymbolicSparseColMat<usize>,
    lu: SymbolicLu<usize>,
}

impl SymbolicFactor {
    pub fn new(pattern: Arc<CsrPattern>) -> Result<Self, LinalgError> {
        assert_eq!(pattern.nrows, pattern.ncols, "factorization needs a square matrix");
        let structure = symbolic_of(&pattern);
        let lu = SymbolicLu::try_new(structure.as_ref()).map_err(|e| LinalgError::Backend(format!("{e:?}")))?;
        Ok(SymbolicFactor {
            pattern,
            structure,
            lu,
        })
    }

    pub fn factorize(&self, values: &[C64]) -> Result<Factorization, LinalgError> {
        if values.len() != self.pattern.nnz() {
            return Err(LinalgError::DimensionMismatch {
                expected: self.pattern.nnz(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::Singular);
        }
        let mat = SparseColMatRef::new(self.structure.as_ref(), values);
        let lu = Lu::try_new_with_symbolic(self.lu.clone(), mat).map_err(|e| match e {
            faer::sparse::linalg::LuError::SymbolicSingular { .. } => LinalgError::Singular,
            other => LinalgError::Backend(format!("{other:?}")),
        })?;
        Ok(Factorization {
            n: self.pattern.nrows,
            full: self.pattern.nrows,
            inner: Factors::Lu(lu),
        })
    }
}

/// Direct sparse LU with a fill-reducing column ordering.
pub fn factorize(f: &ComplexSparseMatrix) -> Result<Factorization, LinalgError> {
    SymbolicFactor::new(f.pattern.clone())?.factorize(&f.values)
}

impl Factorization {
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solve `F x = b`. A non-finite solution means a zero pivot.
    pub fn solve(&self, b: &[C64]) -> Result<Vec<C64>, LinalgError> {
        if b.len() != self.n {
            return Err(LinalgError::DimensionMismatch {
                expected: self.n,
                got: b.len(),
            });
        }
        let mut rhs = Mat::<C64>::from_fn(self.n, 1, |i, _| b[i]);
        self.solve_many(&mut rhs)?;
        Ok((0..self.n).map(|i| rhs[(i, 0)]).collect())
    }

    /// Solve for every column of `b` in place.
    pub fn solve_many(&self, b: &mut Mat<C64>) -> Result<(), LinalgError> {
        if b.nrows() != self.n {
            return Err(LinalgError::DimensionMismatch {
                expected: self.n,
                got: b.nrows(),
            });
        }
        if self.full == self.n {
            self.solve_full(b);
        } else {
            let mut ext = Mat::<C64>::from_fn(self.full, b.ncols(), |i, j| {
                if i < self.n {
                    b[(i, j)]
                } else {
                    C64::new(0.0, 0.0)
                }
            });
            self.solve_full(&mut ext);
            for j in 0..b.ncols() {
                for i in 0..self.n {
                    b[(i, j)] = ext[(i, j)];
                }
            }
        }
        for j in 0..b.ncols() {
            for i in 0..self.n {
                if !b[(i, j)].is_finite() {
                    return Err(LinalgError::Singular);
                }
            }
        }
        Ok(())
    }
}

impl Factorization {
    fn solve_full(&self, b: &mut Mat<C64>) {
        match &self.inner {
            Factors::Lu(lu) => lu.solve_transpose_in_place(b.as_mut()),
            Factors::Ldlt { fac, pattern, values } => {
                let rhs = b.clone();
                fac.solve_in_place(b);
                // r = rhs − A·x, then x += A⁻¹r
                let mut r = rhs;
                for j in 0..b.ncols() {
                    for i in 0..pattern.nrows {
                        let mut acc = C64::new(0.0, 0.0);
                        for k in pattern.row_ptr[i]..pattern.row_ptr[i + 1] {
                            acc += values[k] * b[(pattern.col_idx[k], j)];
                        }
                        r[(i, j)] -= acc;
                    }
                }
                fac.solve_in_place(&mut r);
                for j in 0..b.ncols() {
                    for i in 0..pattern.nrows {
                        b[(i, j)] += r[(i, j)];
                    }
                }
            }
        }
    }
}

/// Complex symmetric `LDLᵀ` of a matrix with symmetric values.
pub fn factorize_symmetric(f: &ComplexSparseMatrix) -> Result<Factorization, LinalgError> {
    let sym = Arc::new(SymmetricSymbolic::new(f.pattern.clone())?);
    factor_symmetric_with(&sym, f.pattern.clone(), f.values.clone())
}

fn factor_symmetric_with(
    sym: &Arc<SymmetricSymbolic>,
    pattern: Arc<CsrPattern>,
    values: Vec<C64>,
) -> Result<Factorization, LinalgError> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::Singular);
    }
    let fac = sym.factorize(&values)?;
    Ok(Factorization {
        n: pattern.nrows,
        full: pattern.nrows,
        inner: Factors::Ldlt { fac, pattern, values },
    })
}

/// Sparsity of `F(κ)`: the stiffness/mass pattern united with a dense block
/// over the GammaR-supported DOFs, plus the scatter maps that refill values
/// for a new κ without touching indices.
#[derive(Debug, Clone)]
pub struct SplicedPattern {
    pub pattern: Arc<CsrPattern>,
    /// F position of every S/M entry.
    sm_pos: Vec<usize>,
    /// F position of block entry `(a, b)` at `a·n_support + b`.
    block_pos: Vec<usize>,
    n_support: usize,
}

impl SplicedPattern {
    pub fn new(sm: &CsrPattern, support: &[usize]) -> Self {
        let ns = support.len();
        let mut keys: Vec<(usize, usize)> = Vec::with_capacity(sm.nnz() + ns * ns);
        for i in 0..sm.nrows {
            for k in sm.row_ptr[i]..sm.row_ptr[i + 1] {
                keys.push((i, sm.col_idx[k]));
            }
        }
        for &a in support {
            for &b in support {
                keys.push((a, b));
            }
        }
        let (pattern, slot) = CsrPattern::from_keys(sm.nrows, sm.ncols, &keys);
        let (sm_pos, block_pos) = slot.split_at(sm.nnz());
        SplicedPattern {
            pattern: Arc::new(pattern),
            sm_pos: sm_pos.to_vec(),
            block_pos: block_pos.to_vec(),
            n_support: ns,
        }
    }

    /// Values of `a·S + b·M + c·E` on this pattern.
    pub fn combine(
        &self,
        s: &RealSparseMatrix,
        m: &RealSparseMatrix,
        coef: (C64, C64, C64),
        block: Option<&BoundaryBlock>,
    ) -> Vec<C64> {
        let (a, b, c) = coef;
        let mut vals = vec![C64::new(0.0, 0.0); self.pattern.nnz()];
        for (k, &pos) in self.sm_pos.iter().enumerate() {
            vals[pos] += a * s.values[k] + b * m.values[k];
        }
        if let Some(block) = block {
            let ns = self.n_support;
            assert_eq!(block.values.nrows(), ns);
            for ia in 0..ns {
                for ib in 0..ns {
                    vals[self.block_pos[ia * ns + ib]] += c * block.values[(ia, ib)];
                }
            }
        }
        vals
    }
}

/// Bordered form of `F(κ)` with one auxiliary unknown per harmonic row:
///
/// ```text
/// [ S − κ²M    Qᴴ·diag(−iκc) ] [x]   [b]
/// [ Q          −R²·I         ] [y] = [0]
/// ```
///
/// Eliminating `y` gives back `F(κ) x = b`, and the bordered matrix is
/// singular exactly when `F(κ)` is, so no invertibility of `S − κ²M` is
/// needed. Its border has `2N(N+2)·n_support` entries instead of the
/// `n_support²` of the dense block, which makes the LU much cheaper once
/// the boundary carries more DOFs than there are harmonics.
#[derive(Debug, Clone)]
pub struct BorderedPattern {
    pub pattern: Arc<CsrPattern>,
    n_rows: usize,
    n_support: usize,
    sm_pos: Vec<usize>,
    /// `(support a, row r)` at `a·n_rows + r`.
    upper_pos: Vec<usize>,
    /// `(row r, support a)` at `r·n_support + a`.
    lower_pos: Vec<usize>,
    diag_pos: Vec<usize>,
}

impl BorderedPattern {
    pub fn new(sm: &CsrPattern, support: &[usize], n_rows: usize) -> Self {
        let n = sm.nrows;
        let ns = support.len();
        let mut keys: Vec<(usize, usize)> = Vec::with_capacity(sm.nnz() + 2 * ns * n_rows + n_rows);
        for i in 0..n {
            for k in sm.row_ptr[i]..sm.row_ptr[i + 1] {
                keys.push((i, sm.col_idx[k]));
            }
        }
        for &a in support {
            for r in 0..n_rows {
                keys.push((a, n + r));
            }
        }
        for r in 0..n_rows {
            for &a in support {
                keys.push((n + r, a));
            }
        }
        for r in 0..n_rows {
            keys.push((n + r, n + r));
        }
        let (pattern, slot) = CsrPattern::from_keys(n + n_rows, n + n_rows, &keys);
        let mut it = slot.into_iter();
        let sm_pos: Vec<usize> = it.by_ref().take(sm.nnz()).collect();
        let upper_pos: Vec<usize> = it.by_ref().take(ns * n_rows).collect();
        let lower_pos: Vec<usize> = it.by_ref().take(ns * n_rows).collect();
        let diag_pos: Vec<usize> = it.collect();
        BorderedPattern {
            pattern: Arc::new(pattern),
            n_rows,
            n_support: ns,
            sm_pos,
            upper_pos,
            lower_pos,
            diag_pos,
        }
    }

    pub fn values(
        &self,
        s: &RealSparseMatrix,
        m: &RealSparseMatrix,
        dtn: &DtnHandle,
        kappa: C64,
    ) -> Result<Vec<C64>, LinalgError> {
        let coeffs = crate::dtn::dtn_coeffs(dtn, kappa)?;
        let trace = &dtn.trace;
        let mut vals = vec![C64::new(0.0, 0.0); self.pattern.nnz()];
        let k2 = kappa * kappa;
        for (k, &pos) in self.sm_pos.iter().enumerate() {
            vals[pos] = s.values[k] - k2 * m.values[k];
        }
        let scale: Vec<C64> = trace
            .rows
            .iter()
            .map(|idx| {
                let c = match idx.family {
                    crate::dtn::Family::U => coeffs.c_u[idx.n - 1],
                    crate::dtn::Family::V => coeffs.c_v[idx.n - 1],
                };
                -crate::I * kappa * c
            })
            .collect();
        let (nr, ns) = (self.n_rows, self.n_support);
        for a in 0..ns {
            for r in 0..nr {
                let q = trace.values[(r, a)];
                vals[self.upper_pos[a * nr + r]] = q.conj() * scale[r];
                vals[self.lower_pos[r * ns + a]] = q;
            }
        }
        let r2 = trace.radius * trace.radius;
        for &pos in &self.diag_pos {
            vals[pos] = C64::new(-r2, 0.0);
        }
        Ok(vals)
    }
}

impl BorderedPattern {
    /// Symmetric variant on the same pattern, using the real trace rows
    /// `Q_r` of [`crate::dtn::TraceMatrix::real_form`]:
    ///
    /// ```text
    /// [ S − κ²M    Q_rᵀ  ] [x]   [b]
    /// [ Q_r       −G⁻¹   ] [y] = [0],   G = diag(−iκc)/R²
    /// ```
    ///
    /// A vanishing `G` entry gives an infinite value, reported as singular
    /// so the caller moves the node.
    pub fn symmetric_values(
        &self,
        s: &RealSparseMatrix,
        m: &RealSparseMatrix,
        dtn: &DtnHandle,
        q_real: &Mat<f64>,
        kappa: C64,
    ) -> Result<Vec<C64>, LinalgError> {
        let coeffs = crate::dtn::dtn_coeffs(dtn, kappa)?;
        let trace = &dtn.trace;
        let mut vals = vec![C64::new(0.0, 0.0); self.pattern.nnz()];
        let k2 = kappa * kappa;
        for (k, &pos) in self.sm_pos.iter().enumerate() {
            vals[pos] = s.values[k] - k2 * m.values[k];
        }
        let (nr, ns) = (self.n_rows, self.n_support);
        for a in 0..ns {
            for r in 0..nr {
                let q = C64::new(q_real[(r, a)], 0.0);
                vals[self.upper_pos[a * nr + r]] = q;
                vals[self.lower_pos[r * ns + a]] = q;
            }
        }
        let r2 = trace.radius * trace.radius;
        for (r, idx) in trace.rows.iter().enumerate() {
            let c = match idx.family {
                crate::dtn::Family::U => coeffs.c_u[idx.n - 1],
                crate::dtn::Family::V => coeffs.c_v[idx.n - 1],
            };
            let g = -crate::I * kappa * c / r2;
            let v = -g.inv();
            if !v.is_finite() {
                return Err(LinalgError::Singular);
            }
            vals[self.diag_pos[r]] = v;
        }
        Ok(vals)
    }
}

/// How [`SystemBuilder::factorize`] presents `F(κ)` to a sparse solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FactorMode {
    /// LU with the dense boundary block spliced into the sparse pattern.
    Spliced,
    /// LU of the bordered system of [`BorderedPattern`].
    Bordered,
    /// Complex symmetric `LDLᵀ` of the symmetric bordered system. Falls
    /// back to [`FactorMode::Bordered`] when the trace rows lack the
    /// conjugate `±m` structure.
    #[default]
    Symmetric,
}

/// Everything needed to evaluate `F(κ)` and `F'(κ)` repeatedly: `S`, `M`
/// (sharing one pattern), the DtN handle, the spliced pattern and a lazily
/// computed symbolic factorization reused across κ.
pub struct SystemBuilder {
    pub s: RealSparseMatrix,
    pub m: RealSparseMatrix,
    pub dtn: DtnHandle,
    pub mode: FactorMode,
    spliced: SplicedPattern,
    bordered: OnceLock<BorderedPattern>,
    symbolic: OnceLock<Result<SymbolicFactor, LinalgError>>,
    q_real: OnceLock<Option<Mat<f64>>>,
    symmetric: OnceLock<Result<Arc<SymmetricSymbolic>, LinalgError>>,
}

impl SystemBuilder {
    pub fn new(s: RealSparseMatrix, m: RealSparseMatrix, dtn: DtnHandle) -> Self {
        assert!(Arc::ptr_eq(&s.pattern, &m.pattern) || s.pattern == m.pattern, "S and M must share a pattern");
        assert_eq!(s.nrows(), s.ncols());
        let spliced = SplicedPattern::new(&s.pattern, &dtn.trace.support);
        SystemBuilder {
            s,
            m,
            dtn,
            mode: FactorMode::default(),
            spliced,
            bordered: OnceLock::new(),
            symbolic: OnceLock::new(),
            q_real: OnceLock::new(),
            symmetric: OnceLock::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.s.nrows()
    }

    pub fn pattern(&self) -> &Arc<CsrPattern> {
        &self.spliced.pattern
    }

    /// `F(κ) = S − κ²M − iκE(κ)`.
    pub fn build_f(&self, kappa: C64) -> Result<ComplexSparseMatrix, LinalgError> {
        let e = materialize_e(&self.dtn, kappa)?;
        let one = C64::new(1.0, 0.0);
        let vals = self
            .spliced
            .combine(&self.s, &self.m, (one, -kappa * kappa, -crate::I * kappa), Some(&e));
        Ok(ComplexSparseMatrix {
            pattern: self.spliced.pattern.clone(),
            values: vals,
        })
    }

    /// `F'(κ) = −2κM − iE(κ) − iκE'(κ)`.
    pub fn build_df(&self, kappa: C64) -> Result<ComplexSparseMatrix, LinalgError> {
        let e = materialize_e(&self.dtn, kappa)?;
        let de = materialize_de(&self.dtn, kappa)?;
        let i = crate::I;
        let mut vals = self.spliced.combine(
            &self.s,
            &self.m,
            (C64::new(0.0, 0.0), -2.0 * kappa, -i),
            Some(&e),
        );
        let extra = self.spliced.combine(
            &self.s,
            &self.m,
            (C64::new(0.0, 0.0), C64::new(0.0, 0.0), -i * kappa),
            Some(&de),
        );
        for (v, x) in vals.iter_mut().zip(extra) {
            *v += x;
        }
        Ok(ComplexSparseMatrix {
            pattern: self.spliced.pattern.clone(),
            values: vals,
        })
    }

    pub fn with_mode(mut self, mode: FactorMode) -> Self {
        self.mode = mode;
        self.symbolic = OnceLock::new();
        self.symmetric = OnceLock::new();
        self
    }

    fn bordered(&self) -> &BorderedPattern {
        self.bordered
            .get_or_init(|| BorderedPattern::new(&self.s.pattern, &self.dtn.trace.support, self.dtn.trace.rows.len()))
    }

    fn symbolic(&self) -> Result<&SymbolicFactor, LinalgError> {
        self.symbolic
            .get_or_init(|| {
                let pattern = match self.mode {
                    FactorMode::Spliced => self.spliced.pattern.clone(),
                    FactorMode::Bordered | FactorMode::Symmetric => self.bordered().pattern.clone(),
                };
                SymbolicFactor::new(pattern)
            })
            .as_ref()
            .map_err(|e| e.clone())
    }

    /// Real trace rows, or `None` when the `±m` rows are not conjugate.
    fn q_real(&self) -> Option<&Mat<f64>> {
        self.q_real
            .get_or_init(|| {
                let t = &self.dtn.trace;
                let scale = t.values.norm_max().max(f64::MIN_POSITIVE);
                (t.conjugation_defect() <= 1e-12 * scale).then(|| t.real_form())
            })
            .as_ref()
    }

    /// The mode actually used by [`Self::factorize`].
    pub fn effective_mode(&self) -> FactorMode {
        match self.mode {
            FactorMode::Symmetric if self.q_real().is_none() => FactorMode::Bordered,
            m => m,
        }
    }

    fn symmetric(&self) -> Result<&Arc<SymmetricSymbolic>, LinalgError> {
        self.symmetric
            .get_or_init(|| SymmetricSymbolic::new(self.bordered().pattern.clone()).map(Arc::new))
            .as_ref()
            .map_err(|e| e.clone())
    }

    /// Factor `F(κ)`; solves take and return vectors of length [`Self::dim`]
    /// in every mode.
    pub fn factorize(&self, kappa: C64) -> Result<Factorization, LinalgError> {
        match self.effective_mode() {
            FactorMode::Spliced => {
                let f = self.build_f(kappa)?;
                self.symbolic()?.factorize(&f.values)
            }
            FactorMode::Bordered => {
                let vals = self.bordered().values(&self.s, &self.m, &self.dtn, kappa)?;
                let mut fac = self.symbolic()?.factorize(&vals)?;
                fac.n = self.dim();
                Ok(fac)
            }
            FactorMode::Symmetric => {
                let q = self.q_real().expect("checked by effective_mode");
                let bp = self.bordered();
                let vals = bp.symmetric_values(&self.s, &self.m, &self.dtn, q, kappa)?;
                let mut fac = factor_symmetric_with(self.symmetric()?, bp.pattern.clone(), vals)?;
                fac.n = self.dim();
                Ok(fac)
            }
        }
    }
}

/// `F(κ)` from its parts (one-off; [`SystemBuilder`] caches the pattern).
pub fn build_f(
    s: &RealSparseMatrix,
    m: &RealSparseMatrix,
    dtn: &DtnHandle,
    kappa: C64,
) -> Result<ComplexSparseMatrix, LinalgError> {
    let spliced = SplicedPattern::new(&s.pattern, &dtn.trace.support);
    let e = materialize_e(dtn, kappa)?;
    let vals = spliced.combine(
        s,
        m,
        (C64::new(1.0, 0.0), -kappa * kappa, -crate::I * kappa),
        Some(&e),
    );
    Ok(ComplexSparseMatrix {
        pattern: spliced.pattern,
        values: vals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn identity_solve() {
        let n = 5;
        let t: Vec<_> = (0..n).map(|i| (i, i, c(1.0, 0.0))).collect();
        let a = ComplexSparseMatrix::from_triplets(n, n, &t);
        let f = factorize(&a).unwrap();
        let mut b = vec![c(0.0, 0.0); n];
        b[0] = c(1.0, 0.0);
        assert_eq!(f.solve(&b).unwrap(), b);
    }

    #[test]
    fn swap_matrix_solve() {
        let a = ComplexSparseMatrix::from_triplets(2, 2, &[(0, 1, c(1.0, 0.0)), (1, 0, c(1.0, 0.0))]);
        let x = factorize(&a).unwrap().solve(&[c(1.0, 0.0), c(0.0, 2.0)]).unwrap();
        assert!((x[0] - c(0.0, 2.0)).norm() < 1e-15);
        assert!((x[1] - c(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn nonsymmetric_solve_is_not_transposed() {
        // guards the CSR/CSC transpose trick
        let a = ComplexSparseMatrix::from_triplets(
            2,
            2,
            &[(0, 0, c(2.0, 0.0)), (0, 1, c(1.0, 1.0)), (1, 1, c(3.0, 0.0))],
        );
        let x = factorize(&a).unwrap().solve(&[c(1.0, 0.0), c(1.0, 0.0)]).unwrap();
        let r = a.mul_vec(&x);
        assert!((r[0] - c(1.0, 0.0)).norm() < 1e-15 && (r[1] - c(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn singular_reported() {
        let a = ComplexSparseMatrix::from_triplets(
            2,
            2,
            &[(0, 0, c(1.0, 0.0)), (0, 1, c(1.0, 0.0)), (1, 0, c(1.0, 0.0)), (1, 1, c(1.0, 0.0))],
        );
        let res = factorize(&a).and_then(|f| f.solve(&[c(1.0, 0.0), c(0.0, 0.0)]));
        assert_eq!(res, Err(LinalgError::Singular));
    }

    fn random_symmetric(n: usize, seed: u64) -> ComplexSparseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, c(4.0 + rng.gen::<f64>(), rng.gen::<f64>() - 0.5)));
            for _ in 0..3 {
                let j = rng.gen_range(0..n);
                if j != i {
                    let v = c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
                    t.push((i, j, v));
                    t.push((j, i, v));
                }
            }
        }
        ComplexSparseMatrix::from_triplets(n, n, &t)
    }

    #[test]
    fn random_symmetric_matches_dense() {
        let n = 200;
        let a = random_symmetric(n, 11);
        assert_eq!(a.asymmetry(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b: Vec<C64> = (0..n).map(|_| c(rng.gen(), rng.gen())).collect();
        let x = factorize(&a).unwrap().solve(&b).unwrap();
        let r = a.mul_vec(&x);
        let res: f64 = r.iter().zip(&b).map(|(p, q)| (p - q).norm_sqr()).sum::<f64>().sqrt();
        let bn: f64 = b.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        assert!(res / bn <= 1e-10);
        // dense oracle
        let dense = a.to_dense();
        let rhs = Mat::<C64>::from_fn(n, 1, |i, _| b[i]);
        let xd = dense.partial_piv_lu().solve(&rhs);
        for i in 0..n {
            assert!((xd[(i, 0)] - x[i]).norm() <= 1e-10 * (1.0 + x[i].norm()));
        }
    }

    #[test]
    fn solves_are_deterministic() {
        let a = random_symmetric(150, 3);
        let b: Vec<C64> = (0..150).map(|i| c(i as f64, 1.0)).collect();
        let x1 = factorize(&a).unwrap().solve(&b).unwrap();
        let x2 = factorize(&a).unwrap().solve(&b).unwrap();
        assert_eq!(x1, x2);
    }

    #[test]
    fn triplets_sum_duplicates() {
        let m = RealSparseMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (1, 1, 2.0), (0, 0, 0.5), (0, 1, 0.0)]);
        assert_eq!(m.nnz(), 3, "explicit zeros are kept");
        assert_eq!(m.get(0, 0), 1.5);
        assert_eq!(m.mul_vec(&[1.0, 1.0]), vec![1.5, 2.0]);
    }

    #[test]
    fn triplet_dump_format() {
        let m = ComplexSparseMatrix::from_triplets(1, 1, &[(0, 0, c(0.5, -1.0))]);
        let mut out = Vec::new();
        m.write_triplets(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "0 0 5.0000000000000000e-1 -1.0000000000000000e0\n");
    }
}
