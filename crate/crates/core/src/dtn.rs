//! Truncated DtN operator as a κ-dependent low-rank block
//! `E(κ) = R⁻²·Qᴴ diag(c(κ)) Q` over the DOFs supported on the outer sphere.

use crate::specfun::{dtn_ratio, harmonic_count, harmonic_index, SpecFunError};
use crate::C64;
use faer::Mat;
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    U,
    V,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::U => "U",
            Family::V => "V",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HarmonicIndex {
    pub family: Family,
    pub n: usize,
    pub m: i64,
}

/// Which factor of a coefficient vanished.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoleFactor {
    /// `δₙ = 0`, i.e. `zₙ(κR) = 0`; `c_U` blows up.
    Delta,
    /// `hₙ(κR) = 0`; `c_V` blows up.
    Hankel,
    /// `κ = 0`.
    Origin,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DtnError {
    #[error("coefficient pole at order {n} ({factor:?} vanishes) for kappa = {kappa}")]
    Pole { n: usize, factor: PoleFactor, kappa: C64 },
    #[error("harmonic order {n} exceeds truncation order {order}")]
    OutOfRange { n: usize, order: usize },
    #[error("no DOFs are supported on the outer boundary")]
    NoBoundary,
    #[error(transparent)]
    SpecFun(#[from] SpecFunError),
}

/// Fourier coefficients of the tangential traces of the boundary basis
/// functions. Row `(W, n, m)`, column `j`:
/// `∫_{Γ_R} φ_{j,T} · conj(Wₙᵐ(x/|x|)) dS`.
#[derive(Debug, Clone)]
pub struct TraceMatrix {
    /// U block in `(n, m)` order, then the V block.
    pub rows: Vec<HarmonicIndex>,
    pub values: Mat<C64>,
    /// Column → free DOF.
    pub support: Arc<[usize]>,
    pub order: usize,
    pub radius: f64,
}

impl TraceMatrix {
    pub fn row_layout(order: usize) -> Vec<HarmonicIndex> {
        let mut rows = Vec::with_capacity(2 * harmonic_count(order));
        for family in [Family::U, Family::V] {
            for n in 1..=order {
                for m in -(n as i64)..=(n as i64) {
                    rows.push(HarmonicIndex { family, n, m });
                }
            }
        }
        rows
    }

    pub fn row_of(&self, idx: HarmonicIndex) -> usize {
        let base = match idx.family {
            Family::U => 0,
            Family::V => harmonic_count(self.order),
        };
        base + harmonic_index(idx.n, idx.m)
    }

    /// Largest deviation of row `(W,n,−m)` from `conj(row (W,n,m))`.
    pub fn conjugation_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for (r, idx) in self.rows.iter().enumerate() {
            if idx.m <= 0 {
                continue;
            }
            let mirror = self.row_of(HarmonicIndex { m: -idx.m, ..*idx });
            for c in 0..self.values.ncols() {
                worst = worst.max((self.values[(mirror, c)] - self.values[(r, c)].conj()).norm());
            }
        }
        worst
    }

    /// Real rows spanning the same space: `√2·Re` and `√2·Im` of each `m > 0`
    /// row in the `+m` and `−m` slots, the real part for `m = 0`. With
    /// conjugate `±m` rows this is a unitary change of basis inside each
    /// `(W, n)` group, so `Qᴴ diag(c) Q = Q_rᵀ diag(c) Q_r`.
    pub fn real_form(&self) -> Mat<f64> {
        let s2 = std::f64::consts::SQRT_2;
        Mat::from_fn(self.values.nrows(), self.values.ncols(), |r, c| {
            let idx = self.rows[r];
            match idx.m.cmp(&0) {
                std::cmp::Ordering::Equal => self.values[(r, c)].re,
                std::cmp::Ordering::Greater => s2 * self.values[(r, c)].re,
                std::cmp::Ordering::Less => {
                    let mirror = self.row_of(HarmonicIndex { m: -idx.m, ..idx });
                    s2 * self.values[(mirror, c)].im
                }
            }
        })
    }
}

/// Dense block over the supported DOFs.
#[derive(Debug, Clone)]
pub struct BoundaryBlock {
    pub values: Mat<C64>,
    pub support: Arc<[usize]>,
}

/// Per-order coefficients `c_U,n` and `c_V,n`, `n = 1..=N` at index `n−1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DtnCoeffs {
    pub c_u: Vec<C64>,
    pub c_v: Vec<C64>,
}

#[derive(Debug, Clone)]
pub struct DtnHandle {
    pub trace: TraceMatrix,
}

impl DtnHandle {
    pub fn new(trace: TraceMatrix) -> Result<Self, DtnError> {
        if trace.support.is_empty() {
            return Err(DtnError::NoBoundary);
        }
        Ok(DtnHandle { trace })
    }

    pub fn order(&self) -> usize {
        self.trace.order
    }

    pub fn radius(&self) -> f64 {
        self.trace.radius
    }
}

fn ratio_checked(n: usize, kappa: C64, radius: f64) -> Result<crate::specfun::DtnRatio, DtnError> {
    match dtn_ratio(n, kappa, radius) {
        Ok(r) => {
            let nf = n as f64;
            if r.delta.norm() <= 1e-12 * nf.max((r.delta + nf).norm()) {
                return Err(DtnError::Pole {
                    n,
                    factor: PoleFactor::Delta,
                    kappa,
                });
            }
            Ok(r)
        }
        Err(SpecFunError::HankelZero { .. }) => Err(DtnError::Pole {
            n,
            factor: PoleFactor::Hankel,
            kappa,
        }),
        Err(SpecFunError::ZeroArgument) => Err(DtnError::Pole {
            n,
            factor: PoleFactor::Origin,
            kappa,
        }),
        Err(e) => Err(e.into()),
    }
}

/// `c_U,n = iκR/δₙ(κ)` and `c_V,n = δₙ(κ)/(iκR)` for `n = 1..=order`.
pub fn dtn_coeffs_raw(order: usize, radius: f64, kappa: C64) -> Result<DtnCoeffs, DtnError> {
    let ikr = crate::I * kappa * radius;
    let mut c_u = Vec::with_capacity(order);
    let mut c_v = Vec::with_capacity(order);
    for n in 1..=order {
        let r = ratio_checked(n, kappa, radius)?;
        c_u.push(ikr / r.delta);
        c_v.push(r.delta / ikr);
    }
    Ok(DtnCoeffs { c_u, c_v })
}

/// κ-derivatives of the coefficients.
pub fn dtn_coeffs_derivative_raw(order: usize, radius: f64, kappa: C64) -> Result<DtnCoeffs, DtnError> {
    let i = crate::I;
    let ikr = i * kappa * radius;
    let mut c_u = Vec::with_capacity(order);
    let mut c_v = Vec::with_capacity(order);
    for n in 1..=order {
        let r = ratio_checked(n, kappa, radius)?;
        let (d, dp) = (r.delta, r.delta_prime);
        c_u.push(i * radius / d - ikr * dp / (d * d));
        c_v.push(dp / ikr - d / (ikr * kappa));
    }
    Ok(DtnCoeffs { c_u, c_v })
}

pub fn dtn_coeffs(handle: &DtnHandle, kappa: C64) -> Result<DtnCoeffs, DtnError> {
    dtn_coeffs_raw(handle.order(), handle.radius(), kappa)
}

pub fn dtn_coeffs_derivative(handle: &DtnHandle, kappa: C64) -> Result<DtnCoeffs, DtnError> {
    dtn_coeffs_derivative_raw(handle.order(), handle.radius(), kappa)
}

/// Diagonal action of `T^N(κ)` on a single harmonic.
pub fn apply_t_to_harmonic(
    handle: &DtnHandle,
    kappa: C64,
    family: Family,
    n: usize,
    m: i64,
) -> Result<C64, DtnError> {
    if n == 0 || n > handle.order() || m.unsigned_abs() as usize > n {
        return Err(DtnError::OutOfRange { n, order: handle.order() });
    }
    let r = ratio_checked(n, kappa, handle.radius())?;
    let ikr = crate::I * kappa * handle.radius();
    Ok(match family {
        Family::U => ikr / r.delta,
        Family::V => r.delta / ikr,
    })
}

/// `R⁻²·Qᴴ diag(c) Q`.
fn low_rank_block(trace: &TraceMatrix, coeffs: &DtnCoeffs) -> BoundaryBlock {
    let nh = harmonic_count(trace.order);
    let scale = 1.0 / (trace.radius * trace.radius);
    let q = &trace.values;
    let cq = Mat::<C64>::from_fn(q.nrows(), q.ncols(), |r, j| {
        let idx = trace.rows[r];
        let c = match idx.family {
            Family::U => coeffs.c_u[idx.n - 1],
            Family::V => coeffs.c_v[idx.n - 1],
        };
        debug_assert!(r < 2 * nh);
        c * q[(r, j)] * scale
    });
    let values = q.adjoint() * &cq;
    BoundaryBlock {
        values,
        support: trace.support.clone(),
    }
}

pub fn materialize_e(handle: &DtnHandle, kappa: C64) -> Result<BoundaryBlock, DtnError> {
    Ok(low_rank_block(&handle.trace, &dtn_coeffs(handle, kappa)?))
}

pub fn materialize_de(handle: &DtnHandle, kappa: C64) -> Result<BoundaryBlock, DtnError> {
    Ok(low_rank_block(&handle.trace, &dtn_coeffs_derivative(handle, kappa)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specfun::z1_sph;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn delta_pole_reported() {
        let k = c(3f64.sqrt() / 2.0, -0.5);
        match dtn_coeffs_raw(3, 1.0, k) {
            Err(DtnError::Pole { n: 1, factor: PoleFactor::Delta, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn hankel_pole_reported() {
        // h₁(z) vanishes at z = −i
        match dtn_coeffs_raw(2, 1.0, c(0.0, -1.0)) {
            Err(DtnError::Pole { n: 1, factor: PoleFactor::Hankel, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn coefficients_at_i_are_real() {
        let co = dtn_coeffs_raw(30, 1.0, c(0.0, 1.0)).unwrap();
        for (n, v) in co.c_v.iter().enumerate() {
            assert!(v.im.abs() <= 1e-12 * v.norm(), "n={}", n + 1);
            // δ < 0 divided by i·i = −1
            assert!(v.re > 0.0);
        }
    }

    #[test]
    fn high_order_asymptotic() {
        let k = c(1.0, -0.5);
        let r = 1.3;
        let co = dtn_coeffs_raw(40, r, k).unwrap();
        let z = k * r;
        let approx = (c(-40.0, 0.0) + z * z / 79.0) / (crate::I * z);
        assert!((co.c_v[39] - approx).norm() <= 0.02 * approx.norm());
    }

    #[test]
    fn delta_matches_bessel_definition() {
        // δₙ = κR zₙ'/zₙ … checked through z₁/h₁ at a generic point
        let k = c(0.7, -0.3);
        let co = dtn_coeffs_raw(1, 1.0, k).unwrap();
        let ikr = crate::I * k;
        let delta = co.c_v[0] * ikr;
        let h = crate::specfun::hankel1_sph(1, k).unwrap().h;
        let zz = z1_sph(1, k).unwrap();
        assert!((delta - zz / h).norm() < 1e-12);
    }

    #[test]
    fn derivative_matches_central_difference() {
        for &(k, r) in &[(c(0.9, -0.6), 1.3), (c(2.1, -0.2), 1.0), (c(0.3, 0.4), 2.0)] {
            let d = dtn_coeffs_derivative_raw(8, r, k).unwrap();
            let h = 1e-5;
            let p = dtn_coeffs_raw(8, r, k + h).unwrap();
            let m = dtn_coeffs_raw(8, r, k - h).unwrap();
            for n in 0..8 {
                let fu = (p.c_u[n] - m.c_u[n]) / (2.0 * h);
                let fv = (p.c_v[n] - m.c_v[n]) / (2.0 * h);
                assert!((fu - d.c_u[n]).norm() <= 1e-7 * (1.0 + d.c_u[n].norm()));
                assert!((fv - d.c_v[n]).norm() <= 1e-7 * (1.0 + d.c_v[n].norm()));
            }
        }
    }

    #[test]
    fn derivative_near_real_axis_is_continuous() {
        let a = dtn_coeffs_derivative_raw(1, 1.0, c(1.0, 1e-9)).unwrap();
        let b = dtn_coeffs_derivative_raw(1, 1.0, c(1.0, -1e-9)).unwrap();
        assert!(a.c_u[0].is_finite() && a.c_v[0].is_finite());
        assert!((a.c_u[0] - b.c_u[0]).norm() < 1e-6);
        assert!((a.c_v[0] - b.c_v[0]).norm() < 1e-6);
    }

    fn toy_trace(order: usize) -> TraceMatrix {
        // Rows with exact conjugate symmetry built from arbitrary data.
        let rows = TraceMatrix::row_layout(order);
        let ncols = 5;
        let mut values = Mat::<C64>::zeros(rows.len(), ncols);
        let nh = harmonic_count(order);
        for (r, idx) in rows.iter().enumerate() {
            if idx.m < 0 {
                continue;
            }
            for j in 0..ncols {
                let a = (r * 7 + j * 3) as f64;
                let v = if idx.m == 0 { c(a.sin(), 0.0) } else { c(a.sin(), a.cos()) };
                values[(r, j)] = v;
                let base = if idx.family == Family::U { 0 } else { nh };
                values[(base + harmonic_index(idx.n, -idx.m), j)] = v.conj();
            }
        }
        TraceMatrix {
            rows,
            values,
            support: (0..ncols).collect::<Vec<_>>().into(),
            order,
            radius: 1.3,
        }
    }

    #[test]
    fn row_layout_counts() {
        assert_eq!(TraceMatrix::row_layout(10).len(), 240);
        let rows = TraceMatrix::row_layout(2);
        assert_eq!(rows[0], HarmonicIndex { family: Family::U, n: 1, m: -1 });
        assert_eq!(rows[8], HarmonicIndex { family: Family::V, n: 1, m: -1 });
    }

    #[test]
    fn block_is_complex_symmetric_and_low_rank() {
        let t = toy_trace(1);
        assert_eq!(t.conjugation_defect(), 0.0);
        let h = DtnHandle::new(t).unwrap();
        let e = materialize_e(&h, c(0.9, -0.6)).unwrap().values;
        let asym = (&e - e.transpose()).norm_l2();
        assert!(asym <= 1e-12 * e.norm_l2());
        let sv = e.singular_values().unwrap();
        let rank = sv.iter().filter(|&&s| s > 1e-10 * sv[0]).count();
        assert!(rank <= 2 * harmonic_count(1));
    }

    #[test]
    fn real_form_reproduces_block() {
        let t = toy_trace(3);
        let qr = t.real_form();
        let h = DtnHandle::new(t).unwrap();
        let k = c(1.1, -0.3);
        let coeffs = dtn_coeffs(&h, k).unwrap();
        let e = materialize_e(&h, k).unwrap().values;
        let r2 = h.radius() * h.radius();
        let n = qr.ncols();
        let mut err = 0.0f64;
        for a in 0..n {
            for b in 0..n {
                let mut v = c(0.0, 0.0);
                for (r, idx) in h.trace.rows.iter().enumerate() {
                    let cr = match idx.family {
                        Family::U => coeffs.c_u[idx.n - 1],
                        Family::V => coeffs.c_v[idx.n - 1],
                    };
                    v += cr * qr[(r, a)] * qr[(r, b)];
                }
                err = err.max((v / r2 - e[(a, b)]).norm());
            }
        }
        assert!(err <= 1e-12 * e.norm_max(), "{err}");
    }

    #[test]
    fn de_matches_difference_of_e() {
        let h = DtnHandle::new(toy_trace(2)).unwrap();
        let k = c(0.9, -0.6);
        let de = materialize_de(&h, k).unwrap().values;
        let mut errs = Vec::new();
        for step in [1e-3, 1e-4] {
            let p = materialize_e(&h, k + step).unwrap().values;
            let m = materialize_e(&h, k - step).unwrap().values;
            let fd = (&p - &m) * faer::Scale(C64::new(0.5 / step, 0.0));
            errs.push((&fd - &de).norm_l2());
        }
        let order = (errs[0] / errs[1]).log10();
        assert!((order - 2.0).abs() < 0.2, "observed order {order}");
    }

    #[test]
    fn harmonic_multiplier() {
        let h = DtnHandle::new(toy_trace(3)).unwrap();
        let k = c(1.0, -1.0);
        let v = apply_t_to_harmonic(&h, k, Family::V, 1, 0).unwrap();
        let r = dtn_ratio(1, k, 1.3).unwrap();
        assert!((v - r.delta / (crate::I * k * 1.3)).norm() < 1e-15);
        let u0 = apply_t_to_harmonic(&h, k, Family::U, 2, 0).unwrap();
        let u2 = apply_t_to_harmonic(&h, k, Family::U, 2, -2).unwrap();
        assert_eq!(u0, u2);
        assert!(matches!(
            apply_t_to_harmonic(&h, k, Family::U, 4, 0),
            Err(DtnError::OutOfRange { .. })
        ));
    }
}
