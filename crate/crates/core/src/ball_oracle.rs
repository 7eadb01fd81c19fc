//! Exact resonances of the unit ball and convergence-order arithmetic.
//!
//! The resonances are the zeros of `hₙ(κ)` and of `zₙ(κ) = hₙ(κ) + κhₙ'(κ)`.
//! With `hₙ(z) = (−i)ⁿ⁺¹ e^{iz} z⁻ⁿ⁻¹ Pₙ(z)` and
//! `Pₙ(z) = Σₖ (n+k)!/(k!(n−k)!)·(i/2)ᵏ·zⁿ⁻ᵏ`, both factors reduce to
//! polynomials: `Pₙ` and `i z Pₙ + z Pₙ' − n Pₙ`. Zeros inside a rectangle
//! are counted by the argument principle, isolated by quadrisection and
//! polished by Newton.

use crate::sim::SearchRegion;
use crate::C64;
use rayon::prelude::*;
use std::f64::consts::PI;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RootKind {
    /// Zero of `hₙ`.
    HZero,
    /// Zero of `zₙ`.
    ZZero,
}

impl RootKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RootKind::HZero => "H-zero",
            RootKind::ZZero => "Z-zero",
        }
    }
}

impl fmt::Display for RootKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleRoot {
    pub n: usize,
    pub kind: RootKind,
    pub kappa: C64,
    pub multiplicity: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("n_max must be at least 1")]
    ZeroOrder,
    #[error("a zero lies on the contour near {0}")]
    OnContour(C64),
    #[error("winding number {0} is not close to an integer")]
    NonIntegral(f64),
    #[error("could not isolate {count} root(s) in a box of size {size:e}")]
    Isolation { count: i64, size: f64 },
}

/// Ascending coefficients of `Pₙ`.
pub fn hankel_polynomial(n: usize) -> Vec<C64> {
    let mut p = vec![C64::new(0.0, 0.0); n + 1];
    let half_i = C64::new(0.0, 0.5);
    for k in 0..=n {
        // (n+k)!/(k!(n−k)!) = (n−k+1)···(n+k) / k!
        let num: f64 = ((n - k + 1)..=(n + k)).map(|j| j as f64).product();
        let den: f64 = (1..=k).map(|j| j as f64).product();
        p[n - k] = half_i.powu(k as u32) * (num / den);
    }
    p
}

/// Ascending coefficients of `i z Pₙ + z Pₙ' − n Pₙ`.
pub fn z_polynomial(n: usize) -> Vec<C64> {
    let p = hankel_polynomial(n);
    let mut q = vec![C64::new(0.0, 0.0); n + 2];
    let i = crate::I;
    for (j, &c) in p.iter().enumerate() {
        q[j + 1] += i * c;
        q[j] += c * (j as f64 - n as f64);
    }
    q
}

fn eval(p: &[C64], z: C64) -> (C64, C64) {
    let mut v = C64::new(0.0, 0.0);
    let mut d = C64::new(0.0, 0.0);
    for &c in p.iter().rev() {
        d = d * z + v;
        v = v * z + c;
    }
    (v, d)
}

fn magnitude(p: &[C64], z: C64) -> f64 {
    let r = z.norm();
    p.iter().rev().fold(0.0, |acc, c| acc * r + c.norm())
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Rect {
    fn size(&self) -> f64 {
        (self.x1 - self.x0).max(self.y1 - self.y0)
    }

    fn center(&self) -> C64 {
        C64::new(0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    fn contains(&self, z: C64) -> bool {
        z.re >= self.x0 && z.re <= self.x1 && z.im >= self.y0 && z.im <= self.y1
    }
}

/// Change of argument along one segment, bisecting wherever consecutive
/// samples turn by more than half a radian.
fn edge_phase(p: &[C64], a: C64, b: C64) -> Result<f64, OracleError> {
    let value = |z: C64| -> Result<C64, OracleError> {
        let v = eval(p, z).0;
        if v.norm() <= 1e-13 * magnitude(p, z) {
            Err(OracleError::OnContour(z))
        } else {
            Ok(v)
        }
    };
    let mut total = 0.0;
    let n0 = 32;
    let mut stack = Vec::new();
    for k in (0..n0).rev() {
        let za = a + (b - a) * (k as f64 / n0 as f64);
        let zb = a + (b - a) * ((k + 1) as f64 / n0 as f64);
        stack.push((za, zb, 0usize));
    }
    let mut cache = value(a)?;
    while let Some((za, zb, depth)) = stack.pop() {
        let vb = value(zb)?;
        let step = (vb / cache).arg();
        if step.abs() > 0.5 {
            if depth >= 48 {
                return Err(OracleError::OnContour(za));
            }
            let zm = 0.5 * (za + zb);
            stack.push((zm, zb, depth + 1));
            stack.push((za, zm, depth + 1));
            continue;
        }
        total += step;
        cache = vb;
    }
    Ok(total)
}

fn winding(p: &[C64], r: &Rect) -> Result<i64, OracleError> {
    let c = [
        C64::new(r.x0, r.y0),
        C64::new(r.x1, r.y0),
        C64::new(r.x1, r.y1),
        C64::new(r.x0, r.y1),
    ];
    let mut total = 0.0;
    for k in 0..4 {
        total += edge_phase(p, c[k], c[(k + 1) % 4])?;
    }
    let w = total / (2.0 * PI);
    let rounded = w.round();
    if (w - rounded).abs() > 0.05 {
        return Err(OracleError::NonIntegral(w));
    }
    Ok(rounded as i64)
}

fn newton(p: &[C64], z0: C64) -> Option<C64> {
    let mut z = z0;
    for _ in 0..50 {
        let (v, d) = eval(p, z);
        if d.norm() == 0.0 {
            return None;
        }
        let step = v / d;
        z -= step;
        if step.norm() <= 1e-15 * (1.0 + z.norm()) {
            break;
        }
    }
    let (v, _) = eval(p, z);
    (v.norm() <= 1e-12 * magnitude(p, z)).then_some(z)
}

/// Split at a slightly off-centre line so a root sitting exactly on the
/// midline does not land on a sub-contour.
fn quadrants(r: &Rect, shift: f64) -> [Rect; 4] {
    let xm = r.x0 + (0.5 + shift) * (r.x1 - r.x0);
    let ym = r.y0 + (0.5 - 0.7 * shift) * (r.y1 - r.y0);
    [
        Rect { x1: xm, y1: ym, ..*r },
        Rect { x0: xm, y1: ym, ..*r },
        Rect { x1: xm, y0: ym, ..*r },
        Rect { x0: xm, y0: ym, ..*r },
    ]
}

fn isolate(p: &[C64], r: Rect, count: i64, depth: usize, out: &mut Vec<C64>) -> Result<(), OracleError> {
    if count <= 0 {
        return Ok(());
    }
    if count == 1 {
        if let Some(z) = newton(p, r.center()) {
            if r.contains(z) {
                out.push(z);
                return Ok(());
            }
        }
    }
    if depth == 0 || r.size() < 1e-13 {
        return Err(OracleError::Isolation { count, size: r.size() });
    }
    for shift in [0.0123, -0.0217, 0.0371] {
        let subs = quadrants(&r, shift);
        let counts: Result<Vec<i64>, _> = subs.iter().map(|s| winding(p, s)).collect();
        if let Ok(counts) = counts {
            if counts.iter().sum::<i64>() == count {
                for (s, c) in subs.iter().zip(counts) {
                    isolate(p, *s, c, depth - 1, out)?;
                }
                return Ok(());
            }
        }
    }
    Err(OracleError::Isolation { count, size: r.size() })
}

/// Zeros of a polynomial in the closed rectangle, counted on a slightly
/// enlarged contour so edge roots are seen.
fn zeros_in(p: &[C64], region: &SearchRegion) -> Result<Vec<C64>, OracleError> {
    let span = (region.a_max - region.a_min).max(region.b_max - region.b_min);
    let mut last = None;
    for margin in [1e-3, 3.7e-3, 1.1e-2] {
        let m = margin * span;
        let r = Rect {
            x0: region.a_min - m,
            x1: region.a_max + m,
            y0: region.b_min - m,
            y1: region.b_max + m,
        };
        match winding(p, &r) {
            Ok(count) => {
                let mut out = Vec::new();
                isolate(p, r, count, 60, &mut out)?;
                return Ok(out);
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap())
}

fn snap(v: f64, bound: f64) -> f64 {
    if (v - bound).abs() <= 1e-12 * (1.0 + bound.abs()) {
        bound
    } else {
        v
    }
}

/// Unit-ball resonances in `region` for `1 ≤ n ≤ n_max`, half-open
/// membership, ordered by `n`, kind, real part, imaginary part.
pub fn exact_ball_resonances(region: &SearchRegion, n_max: usize) -> Result<Vec<OracleRoot>, OracleError> {
    if n_max == 0 {
        return Err(OracleError::ZeroOrder);
    }
    let jobs: Vec<(usize, RootKind)> = (1..=n_max)
        .flat_map(|n| [(n, RootKind::HZero), (n, RootKind::ZZero)])
        .collect();
    let found: Vec<Result<Vec<OracleRoot>, OracleError>> = jobs
        .par_iter()
        .map(|&(n, kind)| {
            let poly = match kind {
                RootKind::HZero => hankel_polynomial(n),
                RootKind::ZZero => z_polynomial(n),
            };
            let mut roots: Vec<OracleRoot> = zeros_in(&poly, region)?
                .into_iter()
                .map(|z| {
                    let re = snap(snap(z.re, region.a_min), region.a_max);
                    let im = snap(snap(z.im, region.b_min), region.b_max);
                    C64::new(re, im)
                })
                .filter(|&z| region.contains(z))
                .map(|kappa| OracleRoot {
                    n,
                    kind,
                    kappa,
                    multiplicity: 2 * n + 1,
                })
                .collect();
            roots.sort_by(|a, b| a.kappa.re.total_cmp(&b.kappa.re).then(a.kappa.im.total_cmp(&b.kappa.im)));
            Ok(roots)
        })
        .collect();
    let mut out = Vec::new();
    for f in found {
        out.extend(f?);
    }
    Ok(out)
}

/// Convergence orders from `(N_l, κ_l)` rows. With a reference value:
/// `r_l = −log(|κ_l − κ|/|κ_{l−1} − κ|) / log((N_l/N_{l−1})^{1/3})`, defined
/// from the second row. Without one, successive differences replace the
/// errors and orders start at the third row. Undefined entries (first rows,
/// zero denominators) are `None`.
pub fn convergence_orders(rows: &[(f64, C64)], reference: Option<C64>) -> Vec<Option<f64>> {
    let n = rows.len();
    let mut out = vec![None; n];
    let ratio = |l: usize, num: f64, den: f64| -> Option<f64> {
        let h = ((rows[l].0 / rows[l - 1].0).cbrt()).ln();
        (num > 0.0 && den > 0.0 && h != 0.0).then(|| -(num / den).ln() / h)
    };
    match reference {
        Some(k) => {
            for l in 1..n {
                out[l] = ratio(l, (rows[l].1 - k).norm(), (rows[l - 1].1 - k).norm());
            }
        }
        None => {
            for l in 2..n {
                out[l] = ratio(
                    l,
                    (rows[l].1 - rows[l - 1].1).norm(),
                    (rows[l - 1].1 - rows[l - 2].1).norm(),
                );
            }
        }
    }
    out
}

/// Least-squares slope of `−log|κ_l − κ|` against `log N_l^{1/3}`.
pub fn least_squares_order(rows: &[(f64, C64)], reference: C64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|&(n, k)| {
            let e = (k - reference).norm();
            (e > 0.0).then(|| (n.cbrt().ln(), e.ln()))
        })
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| -sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specfun::{hankel1_sph, z1_sph};

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn polynomials_match_closed_forms() {
        // P₁ = z + i, P₂ = z² + 3iz − 3
        let p1 = hankel_polynomial(1);
        assert_eq!(p1, vec![c(0.0, 1.0), c(1.0, 0.0)]);
        let p2 = hankel_polynomial(2);
        assert!((p2[0] - c(-3.0, 0.0)).norm() < 1e-15 && (p2[1] - c(0.0, 3.0)).norm() < 1e-15);
        // Z₁ ∝ z² + iz − 1
        let z1 = z_polynomial(1);
        let lead = z1[2];
        assert!((z1[1] / lead - c(0.0, 1.0)).norm() < 1e-15);
        assert!((z1[0] / lead - c(-1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn polynomials_vanish_with_special_functions() {
        for n in 1..=6 {
            let z = c(0.7, -0.4);
            let (hp, _) = eval(&hankel_polynomial(n), z);
            let (zp, _) = eval(&z_polynomial(n), z);
            // hₙ = (−i)^{n+1} e^{iz} z^{−n−1} Pₙ, zₙ has the same prefactor
            let pref = (-crate::I).powu(n as u32 + 1) * (crate::I * z).exp() / z.powu(n as u32 + 1);
            assert!((hankel1_sph(n, z).unwrap().h - pref * hp).norm() < 1e-11 * hp.norm().max(1.0) * pref.norm());
            assert!((z1_sph(n, z).unwrap() - pref * zp).norm() < 1e-11 * zp.norm().max(1.0) * pref.norm());
        }
    }

    #[test]
    fn closed_form_roots() {
        let theta = SearchRegion::theta();
        let roots = exact_ball_resonances(&theta, 2).unwrap();
        let has = |k: C64, kind: RootKind, n: usize| {
            roots
                .iter()
                .any(|r| r.kind == kind && r.n == n && (r.kappa - k).norm() <= 1e-10)
        };
        assert!(has(c(3f64.sqrt() / 2.0, -0.5), RootKind::ZZero, 1));
        assert!(has(c(3f64.sqrt() / 2.0, -1.5), RootKind::HZero, 2));
        assert!(has(c(0.0, -1.0), RootKind::HZero, 1));
        let n1: Vec<_> = exact_ball_resonances(&theta, 1).unwrap();
        assert_eq!(n1.len(), 2, "{n1:?}");
        assert!(n1.iter().all(|r| r.multiplicity == 3));
    }

    #[test]
    fn count_matches_companion_roots() {
        // every polynomial root in Θ (by direct eigenvalues) is found once
        let theta = SearchRegion::theta();
        let roots = exact_ball_resonances(&theta, 6).unwrap();
        for n in 1..=6 {
            for (kind, poly) in [(RootKind::HZero, hankel_polynomial(n)), (RootKind::ZZero, z_polynomial(n))] {
                let deg = poly.len() - 1;
                let lead = poly[deg];
                let comp = faer::Mat::<C64>::from_fn(deg, deg, |i, j| {
                    if i == 0 {
                        -poly[deg - 1 - j] / lead
                    } else if i == j + 1 {
                        c(1.0, 0.0)
                    } else {
                        c(0.0, 0.0)
                    }
                });
                let eig = comp.eigenvalues().unwrap();
                let inside: Vec<C64> = eig
                    .iter()
                    .map(|z| c(snap(z.re, 0.0), z.im))
                    .filter(|z| z.re >= -1e-9 && z.re < 2.0 && z.im > -2.0 && z.im < 0.0)
                    .collect();
                let ours: Vec<_> = roots.iter().filter(|r| r.n == n && r.kind == kind).collect();
                assert_eq!(ours.len(), inside.len(), "n={n} {kind}");
                for z in inside {
                    assert!(ours.iter().any(|r| (r.kappa - z).norm() < 1e-8));
                }
                for r in ours {
                    let (v, _) = eval(&poly, r.kappa);
                    assert!(v.norm() <= 1e-12 * magnitude(&poly, r.kappa));
                }
            }
        }
    }

    #[test]
    fn theta_has_six_locations_and_table_limits() {
        let roots = exact_ball_resonances(&SearchRegion::theta(), 6).unwrap();
        let mut locs: Vec<C64> = Vec::new();
        for r in &roots {
            if !locs.iter().any(|l| (l - r.kappa).norm() < 1e-6) {
                locs.push(r.kappa);
            }
        }
        assert!(locs.len() >= 6);
        let nearest = |t: C64| roots.iter().map(|r| (r.kappa - t).norm()).fold(f64::INFINITY, f64::min);
        assert!(nearest(c(0.867132, -0.500057)) <= 2e-3);
        // the finest tabulated second value sits 2.42e-3 from (√3 − 3i)/2
        let d2 = nearest(c(0.866770, -1.502301));
        assert!((d2 - 2.419e-3).abs() < 1e-5, "{d2}");
    }

    #[test]
    fn empty_and_degenerate() {
        assert_eq!(exact_ball_resonances(&SearchRegion::theta(), 0), Err(OracleError::ZeroOrder));
        let far = SearchRegion::new(10.0, 11.0, -0.1, 0.0).unwrap();
        // far from every low-order zero
        assert!(exact_ball_resonances(&far, 2).unwrap().is_empty());
    }

    #[test]
    fn order_examples() {
        let k = c(3f64.sqrt() / 2.0, -0.5);
        let rows = [(2703.0, c(0.875950, -0.502153)), (5484.0, c(0.873037, -0.501016))];
        let r = convergence_orders(&rows, Some(k));
        assert_eq!(r[0], None);
        assert!((r[1].unwrap() - 1.53).abs() < 0.01, "{r:?}");
        let cube = [
            (16366.0, c(1.302799, -0.703003)),
            (32976.0, c(1.309138, -0.709054)),
            (65712.0, c(1.313384, -0.712724)),
        ];
        let r = convergence_orders(&cube, None);
        assert!((r[2].unwrap() - 1.94).abs() < 0.01, "{r:?}");
        // error halving while N doubles: order 3
        let synth = [(1.0, c(1.0, 0.0)), (2.0, c(0.5, 0.0))];
        assert!((convergence_orders(&synth, Some(c(0.0, 0.0)))[1].unwrap() - 3.0).abs() < 1e-12);
        let flat = [(1.0, c(1.0, 0.0)), (2.0, c(1.0, 0.0)), (4.0, c(1.0, 0.0))];
        assert_eq!(convergence_orders(&flat, None)[2], None);
        assert!((least_squares_order(&synth, c(0.0, 0.0)).unwrap() - 3.0).abs() < 1e-12);
    }
}
