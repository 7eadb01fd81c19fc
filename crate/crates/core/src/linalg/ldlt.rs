//! Supernodal `LDLᵀ` for complex symmetric (not Hermitian) matrices.
//!
//! The ordering and supernode structure come from `faer`'s symbolic
//! Cholesky analysis; the numeric phase is a left-looking supernodal
//! factorization without conjugation and without pivoting. Callers guard
//! against pivot growth with iterative refinement.

use super::{CsrPattern, LinalgError};
use crate::C64;
use faer::linalg::matmul::matmul;
use faer::linalg::triangular_solve::solve_unit_lower_triangular_in_place;
use faer::sparse::linalg::cholesky::{
    factorize_symbolic_cholesky, CholeskySymbolicParams, SymbolicCholeskyRaw, SymmetricOrdering,
};
use faer::sparse::linalg::SupernodalThreshold;
use faer::sparse::SymbolicSparseColMat;
use faer::reborrow::{Reborrow, ReborrowMut};
use faer::{Accum, Mat, MatMut, MatRef, Par, Side};
use std::sync::Arc;

const ZERO: C64 = C64::new(0.0, 0.0);

/// Ordering, supernodes and the value scatter map for one symmetric pattern.
#[derive(Debug)]
pub struct SymmetricSymbolic {
    n: usize,
    pattern: Arc<CsrPattern>,
    /// Old index of new position `i`.
    perm_fwd: Vec<usize>,
    /// New position of old index `i`.
    perm_inv: Vec<usize>,
    /// Lower triangle of `PAPᵀ` by column: `(row, source slot)` pairs.
    col_ptr: Vec<usize>,
    entries: Vec<(usize, usize)>,
    /// Supernode `s` owns columns `begin[s]..begin[s + 1]`.
    begin: Vec<usize>,
    /// Off-diagonal row pattern of each supernode, ascending.
    row_ptr: Vec<usize>,
    rows: Vec<usize>,
    /// Start of each supernode's column-major block in the value array.
    val_ptr: Vec<usize>,
    /// Supernodes that update `s`, ascending.
    desc_ptr: Vec<usize>,
    desc: Vec<usize>,
}

impl SymmetricSymbolic {
    /// `pattern` must be structurally symmetric with every diagonal entry
    /// stored.
    pub fn new(pattern: Arc<CsrPattern>) -> Result<Self, LinalgError> {
        let n = pattern.nrows;
        assert_eq!(n, pattern.ncols, "factorization needs a square matrix");
        let structure = SymbolicSparseColMat::new_checked(
            n,
            n,
            pattern.row_ptr.clone(),
            None,
            pattern.col_idx.clone(),
        );
        let params = CholeskySymbolicParams {
            supernodal_flop_ratio_threshold: SupernodalThreshold::FORCE_SUPERNODAL,
            ..Default::default()
        };
        let sym = factorize_symbolic_cholesky(structure.as_ref(), Side::Lower, SymmetricOrdering::Amd, params)
            .map_err(|e| LinalgError::Backend(format!("{e:?}")))?;
        let (perm_fwd, perm_inv): (Vec<usize>, Vec<usize>) = match sym.perm() {
            Some(p) => {
                let (f, i) = p.arrays();
                (f.to_vec(), i.to_vec())
            }
            None => ((0..n).collect(), (0..n).collect()),
        };
        let mut begin: Vec<usize>;
        let mut row_ptr: Vec<usize>;
        let mut rows = Vec::new();
        match sym.raw() {
            SymbolicCholeskyRaw::Supernodal(sn) => {
                let ns = sn.n_supernodes();
                begin = sn.supernode_begin().to_vec();
                begin.push(if ns > 0 { sn.supernode_end()[ns - 1] } else { 0 });
                let nnz_per = sn.nnz_per_super();
                let crow = sn.col_ptr_for_row_idx();
                row_ptr = vec![0usize; ns + 1];
                for s in 0..ns {
                    rows.extend_from_slice(&sn.row_idx()[crow[s]..crow[s] + nnz_per[s]]);
                    row_ptr[s + 1] = rows.len();
                }
            }
            // tiny problems come back simplicial: one column per supernode
            SymbolicCholeskyRaw::Simplicial(sc) => {
                begin = (0..=n).collect();
                row_ptr = vec![0usize; n + 1];
                let (cp, ri) = (sc.col_ptr(), sc.row_idx());
                for j in 0..n {
                    let mut c: Vec<usize> = ri[cp[j]..cp[j + 1]].iter().copied().filter(|&r| r > j).collect();
                    c.sort_unstable();
                    rows.extend(c);
                    row_ptr[j + 1] = rows.len();
                }
            }
        }
        let ns = begin.len() - 1;
        let mut val_ptr = vec![0usize; ns + 1];
        for s in 0..ns {
            let nc = begin[s + 1] - begin[s];
            let nr = nc + row_ptr[s + 1] - row_ptr[s];
            val_ptr[s + 1] = val_ptr[s] + nr * nc;
        }

        let mut owner = vec![0usize; n];
        for s in 0..ns {
            owner[begin[s]..begin[s + 1]].fill(s);
        }
        let mut lists: Vec<Vec<usize>> = vec![Vec::new(); ns];
        for d in 0..ns {
            let mut last = usize::MAX;
            for &r in &rows[row_ptr[d]..row_ptr[d + 1]] {
                let s = owner[r];
                if s != last {
                    lists[s].push(d);
                    last = s;
                }
            }
        }
        let mut desc_ptr = vec![0usize; ns + 1];
        let mut desc = Vec::new();
        for (s, l) in lists.iter().enumerate() {
            desc.extend_from_slice(l);
            desc_ptr[s + 1] = desc.len();
        }

        let mut cols: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for i in 0..n {
            for k in pattern.row_ptr[i]..pattern.row_ptr[i + 1] {
                let (ni, nj) = (perm_inv[i], perm_inv[pattern.col_idx[k]]);
                if ni >= nj {
                    cols[nj].push((ni, k));
                }
            }
        }
        let mut col_ptr = vec![0usize; n + 1];
        let mut entries = Vec::new();
        for (j, mut c) in cols.into_iter().enumerate() {
            c.sort_unstable();
            entries.extend(c);
            col_ptr[j + 1] = entries.len();
        }
        Ok(SymmetricSymbolic {
            n,
            pattern,
            perm_fwd,
            perm_inv,
            col_ptr,
            entries,
            begin,
            row_ptr,
            rows,
            val_ptr,
            desc_ptr,
            desc,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Stored entries of the factor.
    pub fn factor_nnz(&self) -> usize {
        *self.val_ptr.last().unwrap_or(&0)
    }

    fn n_supernodes(&self) -> usize {
        self.begin.len() - 1
    }

    /// Numeric factorization of the matrix with values `values` on the
    /// pattern given to [`Self::new`]. Only the lower triangle (after
    /// ordering) is read, so the values must be symmetric.
    pub fn factorize(self: &Arc<Self>, values: &[C64]) -> Result<SymmetricFactor, LinalgError> {
        if values.len() != self.pattern.nnz() {
            return Err(LinalgError::DimensionMismatch {
                expected: self.pattern.nnz(),
                got: values.len(),
            });
        }
        let mut l = vec![ZERO; self.factor_nnz()];
        let mut g2l = vec![usize::MAX; self.n];
        let mut tmp: Vec<C64> = Vec::new();
        let mut w: Vec<C64> = Vec::new();
        for s in 0..self.n_supernodes() {
            let (s0, s1) = (self.begin[s], self.begin[s + 1]);
            let nc = s1 - s0;
            let pat = &self.rows[self.row_ptr[s]..self.row_ptr[s + 1]];
            let nr = nc + pat.len();
            for (p, &r) in pat.iter().enumerate() {
                g2l[r] = nc + p;
            }
            let (head, tail) = l.split_at_mut(self.val_ptr[s]);
            let ls = &mut tail[..nr * nc];
            for j in s0..s1 {
                let jl = j - s0;
                for &(i, k) in &self.entries[self.col_ptr[j]..self.col_ptr[j + 1]] {
                    let il = if i < s1 { i - s0 } else { g2l[i] };
                    ls[jl * nr + il] += values[k];
                }
            }
            for &d in &self.desc[self.desc_ptr[s]..self.desc_ptr[s + 1]] {
                self.update_from(head, d, s, ls, nr, &g2l, &mut tmp, &mut w);
            }
            let block = MatMut::from_column_major_slice_mut(ls, nr, nc);
            dense_ldlt(block).map_err(|_| LinalgError::Singular)?;
            for &r in pat {
                g2l[r] = usize::MAX;
            }
        }
        Ok(SymmetricFactor {
            symbolic: self.clone(),
            values: l,
        })
    }

    /// Subtract the contribution of descendant `d` from the block of `s`.
    #[allow(clippy::too_many_arguments)]
    fn update_from(
        &self,
        head: &[C64],
        d: usize,
        s: usize,
        ls: &mut [C64],
        nr: usize,
        g2l: &[usize],
        tmp: &mut Vec<C64>,
        w: &mut Vec<C64>,
    ) {
        let (s0, s1) = (self.begin[s], self.begin[s + 1]);
        let dnc = self.begin[d + 1] - self.begin[d];
        let dpat = &self.rows[self.row_ptr[d]..self.row_ptr[d + 1]];
        let dnr = dnc + dpat.len();
        let ld = &head[self.val_ptr[d]..self.val_ptr[d + 1]];
        let p0 = dpat.partition_point(|&r| r < s0);
        let p1 = p0 + dpat[p0..].partition_point(|&r| r < s1);
        let nbot = dpat.len() - p0;
        let nmid = p1 - p0;
        // W = L_mid·D, one row per target column of s
        w.clear();
        w.resize(nmid * dnc, ZERO);
        for k in 0..dnc {
            let dk = ld[k * dnr + k];
            for jj in 0..nmid {
                w[k * nmid + jj] = ld[k * dnr + dnc + p0 + jj] * dk;
            }
        }
        let rl: Vec<usize> = dpat[p0..]
            .iter()
            .map(|&r| if r < s1 { r - s0 } else { g2l[r] })
            .collect();
        if nbot * nmid * dnc >= 1 << 12 {
            tmp.clear();
            tmp.resize(nbot * nmid, ZERO);
            let lbot = MatRef::from_column_major_slice_with_stride(&ld[dnc + p0..], nbot, dnc, dnr);
            let wm = MatRef::from_column_major_slice(w, nmid, dnc);
            let t = MatMut::from_column_major_slice_mut(tmp, nbot, nmid);
            matmul(t, Accum::Replace, lbot, wm.transpose(), C64::new(1.0, 0.0), Par::Seq);
            for jj in 0..nmid {
                let dst = &mut ls[(dpat[p0 + jj] - s0) * nr..];
                for (t, &r) in tmp[jj * nbot + jj..(jj + 1) * nbot].iter().zip(&rl[jj..]) {
                    dst[r] -= *t;
                }
            }
        } else {
            for jj in 0..nmid {
                let dst = &mut ls[(dpat[p0 + jj] - s0) * nr..];
                for k in 0..dnc {
                    let wk = w[k * nmid + jj];
                    let col = &ld[k * dnr + dnc + p0 + jj..k * dnr + dnr];
                    for (x, &r) in col.iter().zip(&rl[jj..]) {
                        dst[r] -= *x * wk;
                    }
                }
            }
        }
    }
}

struct ZeroPivot;

/// In-place `LDLᵀ` of the leading square of a tall column-major block: the
/// first `ncols` rows become unit-lower `L` with `D` on the diagonal and the
/// rows below become `L` as well. The strict upper triangle is left as
/// scratch.
fn dense_ldlt(mut a: MatMut<'_, C64>) -> Result<(), ZeroPivot> {
    const NB: usize = 48;
    let nr = a.nrows();
    let nc = a.ncols();
    let mut k = 0;
    while k < nc {
        let kb = NB.min(nc - k);
        for j in k..k + kb {
            let d = a[(j, j)];
            if d == ZERO || !d.is_finite() {
                return Err(ZeroPivot);
            }
            let inv = d.inv();
            for i in j + 1..k + kb {
                a[(i, j)] *= inv;
            }
            for jp in j + 1..k + kb {
                let f = a[(jp, j)] * d;
                for i in jp..k + kb {
                    let lij = a[(i, j)];
                    a[(i, jp)] -= lij * f;
                }
            }
        }
        if k + kb < nr {
            // rows below the diagonal block: X·L_dᵀ = A_below, then scale by D⁻¹
            let (top, bottom) = a.rb_mut().split_at_row_mut(k + kb);
            let ld = top.rb().submatrix(k, k, kb, kb);
            let mut below = bottom.submatrix_mut(0, k, nr - k - kb, kb);
            solve_unit_lower_triangular_in_place(ld, below.rb_mut().transpose_mut(), Par::Seq);
            for j in 0..kb {
                let inv = ld[(j, j)].inv();
                for i in 0..below.nrows() {
                    below[(i, j)] *= inv;
                }
            }
        }
        let rest = k + kb;
        if rest < nc {
            let w = Mat::<C64>::from_fn(nc - rest, kb, |i, j| a[(rest + i, k + j)] * a[(k + j, k + j)]);
            let lpanel = a.rb().submatrix(rest, k, nr - rest, kb).to_owned();
            let trail = a.rb_mut().submatrix_mut(rest, rest, nr - rest, nc - rest);
            matmul(trail, Accum::Add, lpanel.as_ref(), w.as_ref().transpose(), C64::new(-1.0, 0.0), Par::Seq);
        }
        k = rest;
    }
    Ok(())
}

/// Numeric `LDLᵀ` factors; solves are exact up to pivot growth.
pub struct SymmetricFactor {
    symbolic: Arc<SymmetricSymbolic>,
    values: Vec<C64>,
}

impl SymmetricFactor {
    pub fn dim(&self) -> usize {
        self.symbolic.n
    }

    /// Overwrite every column of `b` with `A⁻¹b`.
    pub fn solve_in_place(&self, b: &mut Mat<C64>) {
        let sy = &*self.symbolic;
        let n = sy.n;
        assert_eq!(b.nrows(), n);
        let mut x = vec![ZERO; n];
        for col in 0..b.ncols() {
            for i in 0..n {
                x[i] = b[(sy.perm_fwd[i], col)];
            }
            self.solve_permuted(&mut x);
            for i in 0..n {
                b[(i, col)] = x[sy.perm_inv[i]];
            }
        }
    }

    fn solve_permuted(&self, x: &mut [C64]) {
        let sy = &*self.symbolic;
        let ns = sy.n_supernodes();
        for s in 0..ns {
            let (s0, s1) = (sy.begin[s], sy.begin[s + 1]);
            let nc = s1 - s0;
            let pat = &sy.rows[sy.row_ptr[s]..sy.row_ptr[s + 1]];
            let nr = nc + pat.len();
            let ls = &self.values[sy.val_ptr[s]..sy.val_ptr[s + 1]];
            for j in 0..nc {
                let xj = x[s0 + j];
                if xj == ZERO {
                    continue;
                }
                let col = &ls[j * nr..(j + 1) * nr];
                for i in j + 1..nc {
                    x[s0 + i] -= col[i] * xj;
                }
                for (p, &r) in pat.iter().enumerate() {
                    x[r] -= col[nc + p] * xj;
                }
            }
        }
        for s in 0..ns {
            let (s0, s1) = (sy.begin[s], sy.begin[s + 1]);
            let nr = s1 - s0 + sy.row_ptr[s + 1] - sy.row_ptr[s];
            let ls = &self.values[sy.val_ptr[s]..sy.val_ptr[s + 1]];
            for j in 0..s1 - s0 {
                x[s0 + j] /= ls[j * nr + j];
            }
        }
        for s in (0..ns).rev() {
            let (s0, s1) = (sy.begin[s], sy.begin[s + 1]);
            let nc = s1 - s0;
            let pat = &sy.rows[sy.row_ptr[s]..sy.row_ptr[s + 1]];
            let nr = nc + pat.len();
            let ls = &self.values[sy.val_ptr[s]..sy.val_ptr[s + 1]];
            for j in (0..nc).rev() {
                let col = &ls[j * nr..(j + 1) * nr];
                let mut acc = x[s0 + j];
                for (p, &r) in pat.iter().enumerate() {
                    acc -= col[nc + p] * x[r];
                }
                for i in j + 1..nc {
                    acc -= col[i] * x[s0 + i];
                }
                x[s0 + j] = acc;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::ComplexSparseMatrix;
    use faer::linalg::solvers::Solve;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, extra: usize, seed: u64) -> ComplexSparseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, C64::new(4.0 + rng.gen_range(0.0..1.0), rng.gen_range(-1.0..1.0))));
        }
        for _ in 0..extra {
            let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..n));
            if i != j {
                let v = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                t.push((i, j, v));
                t.push((j, i, v));
            }
        }
        ComplexSparseMatrix::from_triplets(n, n, &t)
    }

    fn check(a: &ComplexSparseMatrix, seed: u64) {
        let n = a.pattern.nrows;
        let sym = Arc::new(SymmetricSymbolic::new(a.pattern.clone()).unwrap());
        let fac = sym.factorize(&a.values).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<C64> = (0..n).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let mut x = Mat::from_fn(n, 2, |i, j| if j == 0 { b[i] } else { b[i] * 2.0 });
        fac.solve_in_place(&mut x);
        let x0: Vec<C64> = (0..n).map(|i| x[(i, 0)]).collect();
        let r = a.mul_vec(&x0);
        let err: f64 = r.iter().zip(&b).map(|(u, v)| (u - v).norm_sqr()).sum::<f64>().sqrt();
        let xn: f64 = x0.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        assert!(err <= 1e-13 * a.frobenius_norm() * xn, "residual {err}");
        for i in 0..n {
            assert!((x[(i, 1)] - 2.0 * x[(i, 0)]).norm() <= 1e-12 * (1.0 + x[(i, 0)].norm()));
        }
    }

    #[test]
    fn solves_random_symmetric_systems() {
        check(&random_symmetric(1, 0, 1), 1);
        check(&random_symmetric(7, 10, 2), 2);
        check(&random_symmetric(300, 900, 3), 3);
        // dense enough for the blocked kernels
        check(&random_symmetric(400, 30000, 4), 4);
    }

    #[test]
    fn matches_dense_solve_without_diagonal_dominance() {
        // complex symmetric, indefinite real part
        let n = 60;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, C64::new(rng.gen_range(-2.0..2.0), rng.gen_range(-0.5..0.5))));
            for j in 0..i {
                if rng.gen_range(0.0..1.0) < 0.2 {
                    let v = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                    t.push((i, j, v));
                    t.push((j, i, v));
                }
            }
        }
        let a = ComplexSparseMatrix::from_triplets(n, n, &t);
        let sym = Arc::new(SymmetricSymbolic::new(a.pattern.clone()).unwrap());
        let fac = sym.factorize(&a.values).unwrap();
        let dense = a.to_dense();
        let b = Mat::<C64>::from_fn(n, 1, |i, _| C64::new(i as f64, 1.0));
        let want = dense.partial_piv_lu().solve(&b);
        let mut got = b.clone();
        fac.solve_in_place(&mut got);
        let scale = want.norm_l2();
        assert!((&got - &want).norm_l2() <= 1e-9 * scale);
    }

    #[test]
    fn zero_pivot_is_singular() {
        let t = vec![(0, 0, ZERO), (0, 1, C64::new(1.0, 0.0)), (1, 0, C64::new(1.0, 0.0)), (1, 1, ZERO)];
        let a = ComplexSparseMatrix::from_triplets(2, 2, &t);
        let sym = Arc::new(SymmetricSymbolic::new(a.pattern.clone()).unwrap());
        // no pivoting: a zero leading pivot fails even though A is invertible
        assert!(matches!(sym.factorize(&a.values), Err(LinalgError::Singular)));
    }
}
