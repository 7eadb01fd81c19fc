//! Spherical Hankel functions of the first kind, the DtN ratio
//! `δₙ(κ) = zₙ(κR)/hₙ(κR)` with `zₙ(z) = hₙ(z) + z hₙ'(z)`, and scalar/vector
//! spherical harmonics on the unit sphere.
//!
//! Harmonics are fully orthonormal and carry no Condon–Shortley phase, so
//! `conj(Yₙᵐ) = Yₙ⁻ᵐ` holds literally (and likewise for `Uₙᵐ`, `Vₙᵐ`). Negative
//! orders are produced by conjugating the positive ones, which makes the
//! identity exact in floating point.

use crate::{C64, I};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecFunError {
    #[error("spherical Hankel function evaluated at z = 0")]
    ZeroArgument,
    #[error("h_{order}(z) overflowed at z = {z}")]
    Overflow { order: usize, z: C64 },
    #[error("h_{order}(z) vanishes at z = {z} (pole of the DtN coefficient)")]
    HankelZero { order: usize, z: C64 },
    #[error("direction is not a unit vector (|x| = {norm})")]
    NotUnit { norm: f64 },
    #[error("invalid harmonic index n = {n}, m = {m}")]
    InvalidIndex { n: usize, m: i64 },
}

/// `hₙ⁽¹⁾(z)` together with its derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HankelPair {
    pub n: usize,
    pub z: C64,
    pub h: C64,
    pub hp: C64,
}

/// `δₙ(κ)` and `dδₙ/dκ` at fixed radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtnRatio {
    pub n: usize,
    pub kr: C64,
    pub delta: C64,
    pub delta_prime: C64,
}

/// Values `h₀(z), …, h_{n_max}(z)` by upward recurrence from the closed forms
/// `h₀ = −i e^{iz}/z`, `h₁ = −e^{iz}(z+i)/z²`.
pub fn hankel1_sph_seq(n_max: usize, z: C64) -> Result<Vec<C64>, SpecFunError> {
    if z == C64::new(0.0, 0.0) {
        return Err(SpecFunError::ZeroArgument);
    }
    let e = (I * z).exp();
    let h0 = -I * e / z;
    let mut out = Vec::with_capacity(n_max + 1);
    out.push(h0);
    if !h0.is_finite() {
        return Err(SpecFunError::Overflow { order: 0, z });
    }
    if n_max == 0 {
        return Ok(out);
    }
    let h1 = -e * (z + I) / (z * z);
    if !h1.is_finite() {
        return Err(SpecFunError::Overflow { order: 1, z });
    }
    out.push(h1);
    for k in 1..n_max {
        let next = out[k] * ((2 * k + 1) as f64) / z - out[k - 1];
        if !next.is_finite() {
            return Err(SpecFunError::Overflow { order: k + 1, z });
        }
        out.push(next);
    }
    Ok(out)
}

/// `hₙ⁽¹⁾(z)` and `hₙ⁽¹⁾'(z) = hₙ₋₁(z) − (n+1)/z · hₙ(z)`.
pub fn hankel1_sph(n: usize, z: C64) -> Result<HankelPair, SpecFunError> {
    let seq = hankel1_sph_seq(n.max(1), z)?;
    let h = seq[n];
    let hp = if n == 0 {
        -seq[1]
    } else {
        seq[n - 1] - h * ((n + 1) as f64) / z
    };
    Ok(HankelPair { n, z, h, hp })
}

/// `zₙ⁽¹⁾(z) = hₙ(z) + z hₙ'(z)`, evaluated as `−n hₙ(z) + z hₙ₋₁(z)`.
pub fn z1_sph(n: usize, z: C64) -> Result<C64, SpecFunError> {
    let seq = hankel1_sph_seq(n.max(1), z)?;
    Ok(if n == 0 {
        seq[0] - z * seq[1]
    } else {
        -(n as f64) * seq[n] + z * seq[n - 1]
    })
}

/// Derivative `zₙ⁽¹⁾'(z) = n(n+1)/z · hₙ − (2n−1) hₙ₋₁ + z hₙ₋₂`, valid for n ≥ 1
/// with `h₋₁(z) = e^{iz}/z`.
pub fn z1_sph_prime(n: usize, z: C64) -> Result<C64, SpecFunError> {
    if n == 0 {
        // z₀ = h₀ − z h₁  ⇒  z₀' = h₀' − h₁ − z h₁'
        let p0 = hankel1_sph(0, z)?;
        let p1 = hankel1_sph(1, z)?;
        return Ok(p0.hp - p1.h - z * p1.hp);
    }
    let seq = hankel1_sph_seq(n, z)?;
    let hm2 = if n >= 2 {
        seq[n - 2]
    } else {
        (I * z).exp() / z
    };
    let nf = n as f64;
    Ok(seq[n] * (nf * (nf + 1.0)) / z - seq[n - 1] * (2.0 * nf - 1.0) + z * hm2)
}

/// Ratio `hₙ₋₁(z)/hₙ(z)` by the forward continued-fraction recurrence
/// `ρ₁ = iz/(z+i)`, `ρ_{k+1} = 1/((2k+1)/z − ρ_k)`. Never overflows, so it
/// serves orders far beyond the range of the raw recurrence.
pub fn hankel_ratio(n: usize, z: C64) -> Result<C64, SpecFunError> {
    assert!(n >= 1, "hankel_ratio needs n >= 1");
    if z == C64::new(0.0, 0.0) {
        return Err(SpecFunError::ZeroArgument);
    }
    // h₁/h₀ = (z+i)/(iz)
    let mut den = (z + I) / (I * z);
    let mut scale = 1.0 + 1.0 / z.norm();
    let mut rho = C64::new(0.0, 0.0);
    for k in 1..=n {
        if k > 1 {
            let lead = ((2 * k - 1) as f64) / z;
            den = lead - rho;
            scale = lead.norm().max(rho.norm());
        }
        if k == n && den.norm() <= 1e-14 * scale {
            return Err(SpecFunError::HankelZero { order: n, z });
        }
        rho = den.inv();
    }
    if !rho.is_finite() {
        return Err(SpecFunError::HankelZero { order: n, z });
    }
    Ok(rho)
}

/// `δₙ(κ) = zₙ(κR)/hₙ(κR) = −n + κR·hₙ₋₁/hₙ` and its κ-derivative.
///
/// With `g = hₙ'/hₙ`, the spherical Bessel equation gives
/// `dδₙ/dz = −g − z − z g² + n(n+1)/z`.
pub fn dtn_ratio(n: usize, kappa: C64, radius: f64) -> Result<DtnRatio, SpecFunError> {
    assert!(n >= 1, "dtn_ratio needs n >= 1");
    let z = kappa * radius;
    let rho = hankel_ratio(n, z)?;
    let nf = n as f64;
    let delta = z * rho - nf;
    let g = rho - (nf + 1.0) / z;
    let ddz = -g - z - z * g * g + nf * (nf + 1.0) / z;
    Ok(DtnRatio {
        n,
        kr: z,
        delta,
        delta_prime: ddz * radius,
    })
}

/// Index of `(n, m)` in lexicographic order starting at `(1, −1)`.
#[inline]
pub fn harmonic_index(n: usize, m: i64) -> usize {
    ((n * (n + 1)) as i64 + m - 1) as usize
}

/// Number of `(n, m)` pairs with `1 ≤ n ≤ order`.
#[inline]
pub fn harmonic_count(order: usize) -> usize {
    order * (order + 2)
}

/// One evaluation of `Yₙᵐ`, `Uₙᵐ` and `Vₙᵐ` at a unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VecHarmonicSample {
    pub n: usize,
    pub m: i64,
    pub dir: [f64; 3],
    pub y: C64,
    pub u: [C64; 3],
    pub v: [C64; 3],
}

/// All harmonics with `1 ≤ n ≤ order` at a single direction.
#[derive(Debug, Clone)]
pub struct HarmonicTable {
    pub order: usize,
    pub dir: [f64; 3],
    pub y: Vec<C64>,
    pub u: Vec<[C64; 3]>,
    pub v: Vec<[C64; 3]>,
}

impl HarmonicTable {
    pub fn get(&self, n: usize, m: i64) -> VecHarmonicSample {
        let k = harmonic_index(n, m);
        VecHarmonicSample {
            n,
            m,
            dir: self.dir,
            y: self.y[k],
            u: self.u[k],
            v: self.v[k],
        }
    }
}

fn check_unit(dir: [f64; 3]) -> Result<(), SpecFunError> {
    let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    if (norm - 1.0).abs() > 1e-12 {
        return Err(SpecFunError::NotUnit { norm });
    }
    Ok(())
}

fn cross_c(a: [f64; 3], b: [C64; 3]) -> [C64; 3] {
    [
        b[2] * a[1] - b[1] * a[2],
        b[0] * a[2] - b[2] * a[0],
        b[1] * a[0] - b[0] * a[1],
    ]
}

/// Evaluate every harmonic up to `order` at `dir`.
///
/// Normalized associated Legendre values are propagated as `P̄ₙᵐ/sinθ` for
/// `m ≥ 1`, which stays regular at the poles, so both `∂θ P̄ₙᵐ` and
/// `m P̄ₙᵐ / sinθ` come out as their analytic limits there.
pub fn harmonic_table(order: usize, dir: [f64; 3]) -> Result<HarmonicTable, SpecFunError> {
    check_unit(dir)?;
    let count = harmonic_count(order);
    let zero = C64::new(0.0, 0.0);
    let mut y = vec![zero; count];
    let mut u = vec![[zero; 3]; count];
    let mut v = vec![[zero; 3]; count];

    let x = dir[2].clamp(-1.0, 1.0);
    let s = dir[0].hypot(dir[1]);
    let (cphi, sphi) = if s > 1e-300 {
        (dir[0] / s, dir[1] / s)
    } else {
        (1.0, 0.0)
    };
    let e_theta = [x * cphi, x * sphi, -s];
    let e_phi = [-sphi, cphi, 0.0];

    // m = 0 column: P̄ₙ⁰
    let mut p0 = vec![0.0; order + 1];
    p0[0] = 1.0 / (4.0 * PI).sqrt();
    if order >= 1 {
        p0[1] = 3f64.sqrt() * x * p0[0];
    }
    for n in 2..=order {
        let nf = n as f64;
        let a = ((4.0 * nf * nf - 1.0) / (nf * nf)).sqrt();
        let b = (((nf - 1.0) * (nf - 1.0)) / (4.0 * (nf - 1.0) * (nf - 1.0) - 1.0)).sqrt();
        p0[n] = a * (x * p0[n - 1] - b * p0[n - 2]);
    }

    // q[m][n] = P̄ₙᵐ / sinθ for m ≥ 1
    let mut q = vec![vec![0.0; order + 1]; order + 1];
    let mut qmm = (3.0 / (8.0 * PI)).sqrt();
    for m in 1..=order {
        if m > 1 {
            let mf = m as f64;
            qmm *= ((2.0 * mf + 1.0) / (2.0 * mf)).sqrt() * s;
        }
        q[m][m] = qmm;
        if m + 1 <= order {
            q[m][m + 1] = (2.0 * m as f64 + 3.0).sqrt() * x * qmm;
        }
        let mf = m as f64;
        for n in (m + 2)..=order {
            let nf = n as f64;
            let a = ((4.0 * nf * nf - 1.0) / (nf * nf - mf * mf)).sqrt();
            let b = (((nf - 1.0) * (nf - 1.0) - mf * mf) / (4.0 * (nf - 1.0) * (nf - 1.0) - 1.0))
                .sqrt();
            q[m][n] = a * (x * q[m][n - 1] - b * q[m][n - 2]);
        }
    }

    for n in 1..=order {
        let nf = n as f64;
        let inv_norm = 1.0 / (nf * (nf + 1.0)).sqrt();
        for m in 0..=n {
            let mf = m as f64;
            let (p, dp, m_over_s) = if m == 0 {
                let dp = -(nf * (nf + 1.0)).sqrt() * s * q[1][n];
                (p0[n], dp, 0.0)
            } else {
                let prev = if n > m { q[m][n - 1] } else { 0.0 };
                let ratio = ((2.0 * nf + 1.0) * (nf + mf) * (nf - mf) / (2.0 * nf - 1.0)).sqrt();
                let dp = nf * x * q[m][n] - ratio * prev;
                (s * q[m][n], dp, mf * q[m][n])
            };
            let eimphi = cis_m(m, cphi, sphi);
            let yv = eimphi * p;
            let mut uv = [zero; 3];
            for c in 0..3 {
                uv[c] = eimphi * C64::new(dp * e_theta[c], m_over_s * e_phi[c]) * inv_norm;
            }
            let vv = cross_c(dir, uv);
            let k = harmonic_index(n, m as i64);
            y[k] = yv;
            u[k] = uv;
            v[k] = vv;
            if m > 0 {
                let kn = harmonic_index(n, -(m as i64));
                y[kn] = yv.conj();
                u[kn] = [uv[0].conj(), uv[1].conj(), uv[2].conj()];
                v[kn] = [vv[0].conj(), vv[1].conj(), vv[2].conj()];
            }
        }
    }
    Ok(HarmonicTable {
        order,
        dir,
        y,
        u,
        v,
    })
}

/// `e^{imφ}` from `cos φ`, `sin φ` by repeated complex multiplication.
fn cis_m(m: usize, cphi: f64, sphi: f64) -> C64 {
    let base = C64::new(cphi, sphi);
    let mut out = C64::new(1.0, 0.0);
    for _ in 0..m {
        out *= base;
    }
    out
}

/// `Yₙᵐ`, `Uₙᵐ = ∇Yₙᵐ/√(n(n+1))` and `Vₙᵐ = x̂ × Uₙᵐ` at a unit direction.
pub fn vec_sph_harm(n: usize, m: i64, dir: [f64; 3]) -> Result<VecHarmonicSample, SpecFunError> {
    if n == 0 || m.unsigned_abs() as usize > n {
        return Err(SpecFunError::InvalidIndex { n, m });
    }
    Ok(harmonic_table(n, dir)?.get(n, m))
}

/// Scalar harmonic `Yₙᵐ(x̂)` (n ≥ 0).
pub fn sph_harm(n: usize, m: i64, dir: [f64; 3]) -> Result<C64, SpecFunError> {
    if m.unsigned_abs() as usize > n {
        return Err(SpecFunError::InvalidIndex { n, m });
    }
    if n == 0 {
        check_unit(dir)?;
        return Ok(C64::new(1.0 / (4.0 * PI).sqrt(), 0.0));
    }
    Ok(harmonic_table(n, dir)?.get(n, m).y)
}
