//! Spectral indicator search for eigenvalues of a holomorphic matrix
//! function `F(z)` inside a rectangle, followed by nonlinear inverse
//! iteration, a contour rank probe and single-linkage clustering.
//!
//! The indicator of a box is the norm of the trapezoid approximation of
//! `(1/2πi)∮ F(z)⁻¹ f dz` over the box's circumscribed circle: of order one
//! when an eigenvalue is inside, geometrically small otherwise.

use crate::C64;
use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::f64::consts::PI;
use thiserror::Error;

/// Failure of a single evaluation of `F(z)`.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    /// A coefficient of `F` has a pole at `z`.
    #[error("coefficient pole: {0}")]
    Pole(String),
    /// `F(z)` is numerically singular.
    #[error("singular matrix")]
    Singular,
    #[error("{0}")]
    Failed(String),
}

impl EvalError {
    /// Pole and singular nodes are moved slightly and retried.
    pub fn is_jitterable(&self) -> bool {
        !matches!(self, EvalError::Failed(_))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid search region: {0}")]
    InvalidRegion(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("evaluation failed at z = {z}: {source}")]
    Eval { z: C64, source: EvalError },
}

/// Factors of `F(z)` at one point.
pub trait Resolvent: Send + Sync {
    /// Overwrite every column of `rhs` with `F(z)⁻¹·rhs`.
    fn solve_many(&self, rhs: &mut Mat<C64>) -> Result<(), EvalError>;

    fn solve(&self, b: &[C64]) -> Result<Vec<C64>, EvalError> {
        let mut m = Mat::from_fn(b.len(), 1, |i, _| b[i]);
        self.solve_many(&mut m)?;
        Ok((0..b.len()).map(|i| m[(i, 0)]).collect())
    }
}

/// A holomorphic matrix function the search can factor and apply.
pub trait NonlinearMatrix: Sync {
    fn dim(&self) -> usize;
    fn factor(&self, z: C64) -> Result<Box<dyn Resolvent + '_>, EvalError>;
    fn apply(&self, z: C64, x: &[C64]) -> Result<Vec<C64>, EvalError>;
    fn apply_derivative(&self, z: C64, x: &[C64]) -> Result<Vec<C64>, EvalError>;
}

/// Rectangle `[a_min, a_max) × (b_min, b_max)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchRegion {
    pub a_min: f64,
    pub a_max: f64,
    pub b_min: f64,
    pub b_max: f64,
}

impl SearchRegion {
    pub fn new(a_min: f64, a_max: f64, b_min: f64, b_max: f64) -> Result<Self, SimError> {
        if ![a_min, a_max, b_min, b_max].iter().all(|v| v.is_finite()) {
            return Err(SimError::InvalidRegion("non-finite bound".into()));
        }
        if !(a_min < a_max && b_min < b_max) {
            return Err(SimError::InvalidRegion(format!(
                "empty rectangle [{a_min}, {a_max}) x ({b_min}, {b_max})"
            )));
        }
        if b_max > 0.0 {
            return Err(SimError::InvalidRegion("region must lie in the closed lower half-plane".into()));
        }
        Ok(SearchRegion { a_min, a_max, b_min, b_max })
    }

    /// `[0, 2) × (−2, 0)`.
    pub fn theta() -> Self {
        SearchRegion {
            a_min: 0.0,
            a_max: 2.0,
            b_min: -2.0,
            b_max: 0.0,
        }
    }

    /// Half-open membership.
    pub fn contains(&self, z: C64) -> bool {
        z.re >= self.a_min && z.re < self.a_max && z.im > self.b_min && z.im < self.b_max
    }

    pub fn grid(&self, nx: usize, ny: usize) -> Vec<SearchBox> {
        let hw = (self.a_max - self.a_min) / (2 * nx) as f64;
        let hh = (self.b_max - self.b_min) / (2 * ny) as f64;
        let mut out = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                out.push(SearchBox {
                    center: C64::new(
                        self.a_min + (2 * i + 1) as f64 * hw,
                        self.b_min + (2 * j + 1) as f64 * hh,
                    ),
                    half_w: hw,
                    half_h: hh,
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchBox {
    pub center: C64,
    pub half_w: f64,
    pub half_h: f64,
}

impl SearchBox {
    pub fn square(center: C64, half: f64) -> Self {
        SearchBox {
            center,
            half_w: half,
            half_h: half,
        }
    }

    /// Circumradius; the indicator contour.
    pub fn radius(&self) -> f64 {
        self.half_w.hypot(self.half_h)
    }

    pub fn half_width(&self) -> f64 {
        self.half_w.max(self.half_h)
    }

    pub fn contains(&self, z: C64) -> bool {
        (z.re - self.center.re).abs() <= self.half_w && (z.im - self.center.im).abs() <= self.half_h
    }

    pub fn children(&self) -> [SearchBox; 4] {
        let (w, h) = (0.5 * self.half_w, 0.5 * self.half_h);
        let c = self.center;
        [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)].map(|(sx, sy)| SearchBox {
            center: C64::new(c.re + sx * w, c.im + sy * h),
            half_w: w,
            half_h: h,
        })
    }

    /// Largest distance from the origin to a point of the box.
    fn far_from_origin(&self) -> f64 {
        (self.center.re.abs() + self.half_w).hypot(self.center.im.abs() + self.half_h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimParams {
    /// Trapezoid nodes on each indicator circle (even).
    pub quad_points: usize,
    pub max_depth: usize,
    /// Final box half-width.
    pub box_tol: f64,
    pub tau_abs: f64,
    pub tau_rel: f64,
    /// Probe columns for the rank count.
    pub probes: usize,
    pub count_quad_points: usize,
    pub newton_max: usize,
    pub newton_tol: f64,
    /// Residual below which a refined eigenvalue is accepted.
    pub accept_residual: f64,
    pub cluster_radius: f64,
    pub grid: (usize, usize),
    pub seed: u64,
    /// Run the rank probe around every cluster.
    pub count_probe: bool,
    /// Discard boxes lying entirely inside this disk around `z = 0`.
    pub exclude_radius: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            quad_points: 16,
            max_depth: 24,
            box_tol: 1e-4,
            tau_abs: 1e-3,
            tau_rel: 10.0,
            probes: 8,
            count_quad_points: 32,
            newton_max: 20,
            newton_tol: 1e-10,
            accept_residual: 1e-8,
            cluster_radius: 0.02,
            grid: (8, 8),
            seed: 7,
            count_probe: true,
            exclude_radius: 0.0,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidParams(m.to_string()));
        if self.quad_points < 2 || self.quad_points % 2 != 0 {
            return bad("quad_points must be even and at least 2");
        }
        if self.count_quad_points < 2 || self.count_quad_points % 2 != 0 {
            return bad("count_quad_points must be even and at least 2");
        }
        if self.max_depth == 0 || self.probes == 0 || self.newton_max == 0 {
            return bad("max_depth, probes and newton_max must be positive");
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return bad("grid must have at least one box per direction");
        }
        for (name, v) in [
            ("box_tol", self.box_tol),
            ("tau_abs", self.tau_abs),
            ("tau_rel", self.tau_rel),
            ("newton_tol", self.newton_tol),
            ("accept_residual", self.accept_residual),
            ("cluster_radius", self.cluster_radius),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive"));
            }
        }
        if !(self.exclude_radius >= 0.0) {
            return bad("exclude_radius must be non-negative");
        }
        Ok(())
    }
}

/// Deterministic unit probe vector.
pub fn probe_vector(n: usize, seed: u64) -> Vec<C64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<C64> = (0..n)
        .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    let nrm = norm(&v);
    v.into_iter().map(|x| x / nrm).collect()
}

fn probe_block(n: usize, ell: usize, seed: u64) -> Mat<C64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mat::from_fn(n, ell, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
}

fn norm(v: &[C64]) -> f64 {
    v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

const JITTER: f64 = 1e-6;
const JITTER_TRIES: usize = 3;

/// `F(z)⁻¹·rhs` at a circle node, moving the node radially outward by
/// `r·10⁻⁶` on a pole or singular factorization. Returns the node actually
/// used, or `None` when every attempt failed.
fn node_solve<F: NonlinearMatrix + ?Sized>(
    f: &F,
    z0: C64,
    r: f64,
    theta: f64,
    rhs: &Mat<C64>,
) -> Result<Option<(C64, Mat<C64>)>, SimError> {
    let dir = C64::from_polar(1.0, theta);
    for j in 0..=JITTER_TRIES {
        let z = z0 + dir * (r * (1.0 + j as f64 * JITTER));
        let attempt = f.factor(z).and_then(|fac| {
            let mut x = rhs.clone();
            fac.solve_many(&mut x)?;
            Ok(x)
        });
        match attempt {
            Ok(x) => return Ok(Some((z, x))),
            Err(e) if e.is_jitterable() => continue,
            Err(e) => return Err(SimError::Eval { z, source: e }),
        }
    }
    Ok(None)
}

/// Contour moment `(1/M)Σ (z_q − z₀)·F(z_q)⁻¹·rhs` for several boxes at
/// once. Nodes run in parallel; sums are formed in node order.
fn moments<F: NonlinearMatrix + ?Sized>(
    f: &F,
    boxes: &[SearchBox],
    rhs: &Mat<C64>,
    m: usize,
) -> Result<Vec<Moment>, SimError> {
    let jobs: Vec<(usize, usize)> = (0..boxes.len()).flat_map(|b| (0..m).map(move |q| (b, q))).collect();
    let results: Vec<Result<Option<(C64, Mat<C64>)>, SimError>> = jobs
        .par_iter()
        .map(|&(b, q)| {
            let bx = &boxes[b];
            node_solve(f, bx.center, bx.radius(), 2.0 * PI * q as f64 / m as f64, rhs)
        })
        .collect();
    let mut out: Vec<Moment> = boxes
        .iter()
        .map(|_| Moment {
            value: Mat::zeros(rhs.nrows(), rhs.ncols()),
            first: Mat::zeros(rhs.nrows(), rhs.ncols()),
            reference: 0.0,
            suspect: false,
        })
        .collect();
    for (&(b, _), res) in jobs.iter().zip(results) {
        match res? {
            Some((z, x)) => {
                let dz = z - boxes[b].center;
                let w = dz / m as f64;
                let mo = &mut out[b];
                let mut node_norm = 0.0;
                for j in 0..x.ncols() {
                    for i in 0..x.nrows() {
                        let t = x[(i, j)] * w;
                        mo.value[(i, j)] += t;
                        mo.first[(i, j)] += t * dz;
                        node_norm += t.norm_sqr();
                    }
                }
                mo.reference = mo.reference.max(node_norm.sqrt() * m as f64);
            }
            None => out[b].suspect = true,
        }
    }
    Ok(out)
}

struct Moment {
    value: Mat<C64>,
    /// Same sum with one more factor `(z_q − z₀)`.
    first: Mat<C64>,
    /// Largest single-node term `‖(z_q − z₀)F(z_q)⁻¹·rhs‖_F`.
    reference: f64,
    suspect: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndicatorValue {
    pub delta: f64,
    /// A node failed even after jittering.
    pub suspect: bool,
}

/// Spectral indicator of one box for a unit probe `f`.
pub fn indicator<F: NonlinearMatrix + ?Sized>(
    f: &F,
    bx: &SearchBox,
    probe: &[C64],
    m: usize,
) -> Result<IndicatorValue, SimError> {
    let rhs = Mat::from_fn(probe.len(), 1, |i, _| probe[i]);
    let mo = moments(f, std::slice::from_ref(bx), &rhs, m)?.pop().unwrap();
    Ok(IndicatorValue {
        delta: mo.value.norm_l2(),
        suspect: mo.suspect,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelStats {
    pub level: usize,
    pub boxes: usize,
    pub kept: usize,
    pub median: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalBox {
    pub sbox: SearchBox,
    pub delta: f64,
    pub suspect: bool,
    pub level: usize,
    /// `z₀ + ⟨A₀, A₁⟩/⟨A₀, A₀⟩` from the zeroth and first contour moments of
    /// the probe: exact for one simple eigenvalue inside the circle, a
    /// weighted mean for several.
    pub estimate: C64,
    /// `A₀`, the probe filtered through the contour: close to an
    /// eigenvector when the circle holds one eigenvalue.
    pub moment: Vec<C64>,
}

impl Moment {
    fn estimate(&self, z0: C64) -> C64 {
        let (mut num, mut den) = (C64::new(0.0, 0.0), 0.0);
        for i in 0..self.value.nrows() {
            num += self.value[(i, 0)].conj() * self.first[(i, 0)];
            den += self.value[(i, 0)].norm_sqr();
        }
        if den > 0.0 && num.is_finite() {
            z0 + num / den
        } else {
            z0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub final_boxes: Vec<FinalBox>,
    pub trail: Vec<LevelStats>,
    /// Every box kept at every level, for soundness checks.
    pub kept_by_level: Vec<Vec<SearchBox>>,
}

impl SimOutcome {
    pub fn candidates(&self) -> Vec<C64> {
        self.final_boxes.iter().map(|b| b.sbox.center).collect()
    }
}

fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Recursive box subdivision driven by the indicator.
///
/// A box is kept when `δ ≥ max(τ_abs, τ_rel·median)`, where the median runs
/// over every indicator value computed so far in this search. At level 0
/// that is the level's own median; afterwards the root-free boxes of earlier
/// levels keep the reference low, so a level whose boxes mostly contain
/// eigenvalues (a tight cluster) is not thrown away wholesale. Suspect boxes
/// are always kept.
pub fn sim_search<F: NonlinearMatrix + ?Sized>(
    f: &F,
    region: &SearchRegion,
    params: &SimParams,
) -> Result<SimOutcome, SimError> {
    params.validate()?;
    let probe = probe_vector(f.dim(), params.seed);
    let rhs = Mat::from_fn(probe.len(), 1, |i, _| probe[i]);
    let mut level_boxes = region.grid(params.grid.0, params.grid.1);
    let mut history: Vec<f64> = Vec::new();
    let mut trail = Vec::new();
    let mut kept_by_level = Vec::new();
    let mut final_boxes = Vec::new();
    for level in 0..=params.max_depth {
        if params.exclude_radius > 0.0 {
            level_boxes.retain(|b| b.far_from_origin() > params.exclude_radius);
        }
        if level_boxes.is_empty() {
            break;
        }
        let mos = moments(f, &level_boxes, &rhs, params.quad_points)?;
        let deltas: Vec<f64> = mos.iter().map(|m| m.value.norm_l2()).collect();
        history.extend_from_slice(&deltas);
        let med = median(&history);
        let threshold = params.tau_abs.max(params.tau_rel * med);
        let mut kept = Vec::new();
        let mut next = Vec::new();
        for ((bx, mo), &d) in level_boxes.iter().zip(&mos).zip(&deltas) {
            if d >= threshold || mo.suspect {
                kept.push(*bx);
                if bx.half_width() <= params.box_tol || level == params.max_depth {
                    final_boxes.push(FinalBox {
                        sbox: *bx,
                        delta: d,
                        suspect: mo.suspect,
                        level,
                        estimate: mo.estimate(bx.center),
                        moment: (0..mo.value.nrows()).map(|i| mo.value[(i, 0)]).collect(),
                    });
                } else {
                    next.extend(bx.children());
                }
            }
        }
        trail.push(LevelStats {
            level,
            boxes: level_boxes.len(),
            kept: kept.len(),
            median: med,
            threshold,
        });
        kept_by_level.push(kept);
        level_boxes = next;
    }
    Ok(SimOutcome {
        final_boxes,
        trail,
        kept_by_level,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub kappa: C64,
    pub vector: Vec<C64>,
    /// `‖F(κ)v‖/‖v‖`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn factor_jittered<F: NonlinearMatrix + ?Sized>(
    f: &F,
    z: C64,
) -> Result<(C64, Box<dyn Resolvent + '_>), SimError> {
    let mut last = EvalError::Singular;
    for j in 0..=JITTER_TRIES {
        let zj = z + C64::new(j as f64 * 1e-12 * (1.0 + z.norm()), 0.0);
        match f.factor(zj) {
            Ok(fac) => return Ok((zj, fac)),
            Err(e) if e.is_jitterable() => last = e,
            Err(e) => return Err(SimError::Eval { z: zj, source: e }),
        }
    }
    Err(SimError::Eval { z, source: last })
}

fn bilinear(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Nonlinear inverse iteration with the complex-symmetric Rayleigh
/// functional:
/// `v ← F(κ)⁻¹F'(κ)v`, `κ ← κ − vᵀF(κ)v / vᵀF'(κ)v`.
/// The start vector is one inverse-iteration step from `start`.
pub fn refine_eigenpair<F: NonlinearMatrix + ?Sized>(
    f: &F,
    kappa0: C64,
    start: &[C64],
    newton_max: usize,
    tol: f64,
) -> Result<Refined, SimError> {
    let eval = |z: C64| move |e: EvalError| SimError::Eval { z, source: e };
    let (mut kappa, fac) = factor_jittered(f, kappa0)?;
    let mut fac = Some(fac);
    let mut v = fac.as_ref().unwrap().solve(start).map_err(eval(kappa))?;
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut best: Option<Refined> = None;
    for it in 0..=newton_max {
        let r = f.apply(kappa, &v).map_err(eval(kappa))?;
        let residual = norm(&r);
        if best.as_ref().is_none_or(|b| residual < b.residual) {
            best = Some(Refined {
                kappa,
                vector: v.clone(),
                residual,
                iterations: it,
                converged: false,
            });
        }
        if residual <= tol {
            let mut b = best.unwrap();
            b.converged = true;
            return Ok(b);
        }
        if it == newton_max || !residual.is_finite() {
            break;
        }
        let fk = match fac.take() {
            Some(x) => x,
            None => match factor_jittered(f, kappa) {
                Ok((_, x)) => x,
                Err(_) => break,
            },
        };
        let dv = f.apply_derivative(kappa, &v).map_err(eval(kappa))?;
        let den = bilinear(&v, &dv);
        if den.norm() == 0.0 {
            break;
        }
        let step = bilinear(&v, &r) / den;
        let mut w = fk.solve(&dv).map_err(eval(kappa))?;
        let nw = norm(&w);
        if !(nw > 0.0 && nw.is_finite()) {
            break;
        }
        w.iter_mut().for_each(|x| *x /= nw);
        v = w;
        kappa -= step;
    }
    Ok(best.unwrap())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountResult {
    pub count: usize,
    /// `count == ℓ`: the box may hold more eigenvalues than probes.
    pub saturated: bool,
    pub singular_values: Vec<f64>,
    pub suspect: bool,
}

/// Numerical rank of `A₀ = (1/M)Σ (z_q − z₀)F(z_q)⁻¹V` for `ℓ` seeded random
/// probes. A singular value counts when it is at least `10⁻⁸·σ_max` and at
/// least `10⁻⁶` times the largest single node term, the second test
/// rejecting the geometrically small leakage of eigenvalues outside the
/// circle.
pub fn count_in_box<F: NonlinearMatrix + ?Sized>(
    f: &F,
    bx: &SearchBox,
    ell: usize,
    m: usize,
    seed: u64,
) -> Result<CountResult, SimError> {
    let v = probe_block(f.dim(), ell, seed);
    let mo = moments(f, std::slice::from_ref(bx), &v, m)?.pop().unwrap();
    let sv = mo
        .value
        .singular_values()
        .map_err(|e| SimError::Eval {
            z: bx.center,
            source: EvalError::Failed(format!("{e:?}")),
        })?;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let cut = (1e-8 * smax).max(1e-6 * mo.reference);
    let count = sv.iter().filter(|&&s| s > 0.0 && s >= cut).count();
    Ok(CountResult {
        count,
        saturated: count == ell,
        singular_values: sv,
        suspect: mo.suspect,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub id: usize,
    /// Indices into the input.
    pub members: Vec<usize>,
    pub mean: C64,
}

impl Cluster {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

/// Single-linkage clusters at `radius` with their arithmetic means. Cluster
/// ids follow the smallest member index.
pub fn cluster_and_average(points: &[C64], radius: f64) -> Vec<Cluster> {
    let n = points.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            if (points[i] - points[j]).norm() <= radius {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut clusters: Vec<Cluster> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let root = find(&mut parent, i);
        if slot[root] == usize::MAX {
            slot[root] = clusters.len();
            clusters.push(Cluster {
                id: clusters.len(),
                members: Vec::new(),
                mean: C64::new(0.0, 0.0),
            });
        }
        clusters[slot[root]].members.push(i);
    }
    for c in &mut clusters {
        let s: C64 = c.members.iter().map(|&i| points[i]).sum();
        c.mean = s / c.members.len() as f64;
    }
    clusters
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resonance {
    pub kappa: C64,
    pub residual: f64,
    pub iterations: usize,
    pub cluster_id: usize,
    pub final_box: SearchBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterReport {
    pub id: usize,
    pub mean: C64,
    pub size: usize,
    pub count: Option<CountResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResonanceReport {
    /// Sorted by real part, then imaginary part.
    pub eigenvalues: Vec<Resonance>,
    pub clusters: Vec<ClusterReport>,
    pub trail: Vec<LevelStats>,
    pub final_boxes: usize,
    /// Refinements that did not converge or left their box's circle.
    pub rejected: usize,
}

/// Search, refine every final box from its moment estimate and filtered
/// probe, drop unconverged or escaped iterates,
/// merge duplicates, cluster, and probe each cluster's multiplicity.
pub fn find_resonances<F: NonlinearMatrix + ?Sized>(
    f: &F,
    region: &SearchRegion,
    params: &SimParams,
) -> Result<ResonanceReport, SimError> {
    let outcome = sim_search(f, region, params)?;
    let probe = probe_vector(f.dim(), params.seed);
    let refined: Vec<Result<Refined, SimError>> = outcome
        .final_boxes
        .par_iter()
        .map(|fb| {
            let inside = (fb.estimate - fb.sbox.center).norm() <= fb.sbox.radius();
            let z0 = if inside { fb.estimate } else { fb.sbox.center };
            let mn = norm(&fb.moment);
            let start = if mn > 0.0 && mn.is_finite() { &fb.moment[..] } else { &probe[..] };
            refine_eigenpair(f, z0, start, params.newton_max, params.newton_tol)
        })
        .collect();
    let mut accepted: Vec<Resonance> = Vec::new();
    let mut rejected = 0;
    for (fb, r) in outcome.final_boxes.iter().zip(refined) {
        let r = r?;
        let inside = (r.kappa - fb.sbox.center).norm() <= fb.sbox.radius() * (1.0 + 1e-9);
        let excluded = r.kappa.norm() <= params.exclude_radius;
        if r.converged && r.residual <= params.accept_residual && inside && !excluded {
            accepted.push(Resonance {
                kappa: r.kappa,
                residual: r.residual,
                iterations: r.iterations,
                cluster_id: 0,
                final_box: fb.sbox,
            });
        } else {
            rejected += 1;
        }
    }
    accepted.sort_by(|a, b| a.kappa.re.total_cmp(&b.kappa.re).then(a.kappa.im.total_cmp(&b.kappa.im)));
    let mut unique: Vec<Resonance> = Vec::new();
    for r in accepted {
        let tol = 1e-8 * (1.0 + r.kappa.norm());
        match unique.iter_mut().find(|u| (u.kappa - r.kappa).norm() <= tol) {
            Some(u) => {
                if r.residual < u.residual {
                    *u = Resonance { final_box: u.final_box, ..r };
                }
            }
            None => unique.push(r),
        }
    }
    let points: Vec<C64> = unique.iter().map(|r| r.kappa).collect();
    let clusters = cluster_and_average(&points, params.cluster_radius);
    for c in &clusters {
        for &i in &c.members {
            unique[i].cluster_id = c.id;
        }
    }
    let counts: Vec<Option<CountResult>> = if params.count_probe {
        clusters
            .iter()
            .map(|c| {
                let spread = c.members.iter().map(|&i| (points[i] - c.mean).norm()).fold(0.0, f64::max);
                let half = (2.0 * spread).max(0.25 * params.cluster_radius);
                count_in_box(
                    f,
                    &SearchBox::square(c.mean, half),
                    params.probes,
                    params.count_quad_points,
                    params.seed,
                )
                .map(Some)
            })
            .collect::<Result<_, _>>()?
    } else {
        vec![None; clusters.len()]
    };
    let clusters = clusters
        .into_iter()
        .zip(counts)
        .map(|(c, count)| ClusterReport {
            id: c.id,
            mean: c.mean,
            size: c.size(),
            count,
        })
        .collect();
    Ok(ResonanceReport {
        eigenvalues: unique,
        clusters,
        trail: outcome.trail,
        final_boxes: outcome.final_boxes.len(),
        rejected,
    })
}

/// `F(z) = Qᵀ·diag(z − λ_k)·Q` with a real orthogonal `Q`: planted
/// eigenvalues `λ_k` (repeats give multiplicity), complex symmetric, and
/// exactly invertible in closed form.
#[derive(Debug, Clone)]
pub struct PlantedProblem {
    pub roots: Vec<C64>,
    pub mixing: Option<Mat<f64>>,
    /// Global factor `α` in `α·F(z)`.
    pub scale: C64,
}

impl PlantedProblem {
    pub fn diagonal(roots: Vec<C64>) -> Self {
        PlantedProblem {
            roots,
            mixing: None,
            scale: C64::new(1.0, 0.0),
        }
    }

    /// Roots mixed by a seeded random orthogonal matrix.
    pub fn mixed(roots: Vec<C64>, seed: u64) -> Self {
        let n = roots.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Mat::<f64>::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let q = a.qr().compute_Q();
        PlantedProblem {
            roots,
            mixing: Some(q),
            scale: C64::new(1.0, 0.0),
        }
    }

    fn to_basis(&self, x: &[C64]) -> Vec<C64> {
        match &self.mixing {
            None => x.to_vec(),
            Some(q) => (0..x.len())
                .map(|i| (0..x.len()).map(|j| x[j] * q[(j, i)]).sum())
                .collect(),
        }
    }

    fn from_basis(&self, y: &[C64]) -> Vec<C64> {
        match &self.mixing {
            None => y.to_vec(),
            Some(q) => (0..y.len())
                .map(|i| (0..y.len()).map(|j| y[j] * q[(i, j)]).sum())
                .collect(),
        }
    }
}

struct PlantedResolvent<'a> {
    problem: &'a PlantedProblem,
    z: C64,
}

impl Resolvent for PlantedResolvent<'_> {
    fn solve_many(&self, rhs: &mut Mat<C64>) -> Result<(), EvalError> {
        for j in 0..rhs.ncols() {
            let col: Vec<C64> = (0..rhs.nrows()).map(|i| rhs[(i, j)]).collect();
            // F = QᵀDQ with Q stored column-orthonormal: F⁻¹ = QᵀD⁻¹Q
            let y = self.problem.from_basis(&col);
            let y: Vec<C64> = y
                .iter()
                .zip(&self.problem.roots)
                .map(|(v, l)| v / ((self.z - l) * self.problem.scale))
                .collect();
            let x = self.problem.to_basis(&y);
            for i in 0..rhs.nrows() {
                rhs[(i, j)] = x[i];
            }
        }
        Ok(())
    }
}

impl NonlinearMatrix for PlantedProblem {
    fn dim(&self) -> usize {
        self.roots.len()
    }

    fn factor(&self, z: C64) -> Result<Box<dyn Resolvent + '_>, EvalError> {
        if self.roots.iter().any(|&l| l == z) {
            return Err(EvalError::Singular);
        }
        Ok(Box::new(PlantedResolvent { problem: self, z }))
    }

    fn apply(&self, z: C64, x: &[C64]) -> Result<Vec<C64>, EvalError> {
        let y = self.from_basis(x);
        let y: Vec<C64> = y
            .iter()
            .zip(&self.roots)
            .map(|(v, l)| v * (z - l) * self.scale)
            .collect();
        Ok(self.to_basis(&y))
    }

    fn apply_derivative(&self, _z: C64, x: &[C64]) -> Result<Vec<C64>, EvalError> {
        Ok(x.iter().map(|v| v * self.scale).collect())
    }
}
