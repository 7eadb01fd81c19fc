//! Lowest-order Nédélec edge elements: DOF numbering with PEC elimination,
//! stiffness and mass assembly, and the Fourier trace matrix on GammaR.
//!
//! Edge `(lo, hi)` is oriented from the smaller to the larger global vertex
//! index. Its basis function on a tet is `λ_lo ∇λ_hi − λ_hi ∇λ_lo`, whose
//! tangential integral along the edge is one.

use crate::dtn::{HarmonicIndex, TraceMatrix};
use crate::linalg::{CsrPattern, RealSparseMatrix};
use crate::mesh::{cross, dot, norm, sub, BoundaryTag, TetMesh, TET_EDGES};
use crate::specfun::{harmonic_count, harmonic_table, SpecFunError};
use crate::C64;
use faer::Mat;
use rayon::prelude::*;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FemError {
    #[error("tet {tet} is degenerate (volume {volume:e})")]
    DegenerateTet { tet: usize, volume: f64 },
    #[error("boundary face {face} is degenerate")]
    DegenerateFace { face: usize },
    #[error("mesh has no GammaR faces")]
    NoGammaR,
    #[error("truncation order must be at least 1")]
    ZeroOrder,
    #[error("face {face} references edge ({a}, {b}) absent from the tets")]
    OrphanFace { face: usize, a: usize, b: usize },
    #[error(transparent)]
    SpecFun(#[from] SpecFunError),
}

#[derive(Debug, Clone)]
pub struct EdgeDofMap {
    /// Sorted `(lo, hi)` pairs.
    pub edges: Vec<[usize; 2]>,
    pub tet_edges: Vec<[usize; 6]>,
    /// `+1` when local edge `TET_EDGES[k]` runs lo → hi.
    pub tet_signs: Vec<[f64; 6]>,
    pub pec: Vec<bool>,
    pub gamma_r: Vec<bool>,
    pub free_index: Vec<Option<usize>>,
    /// Inverse of `free_index`.
    pub free_edges: Vec<usize>,
}

impl EdgeDofMap {
    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn n_free(&self) -> usize {
        self.free_edges.len()
    }

    pub fn n_pec(&self) -> usize {
        self.pec.iter().filter(|&&p| p).count()
    }

    pub fn edge_id(&self, a: usize, b: usize) -> Option<usize> {
        self.edges.binary_search(&[a.min(b), a.max(b)]).ok()
    }

    /// Free DOFs on GammaR edges, ascending.
    pub fn gamma_r_dofs(&self) -> Vec<usize> {
        self.free_edges
            .iter()
            .enumerate()
            .filter(|(_, &e)| self.gamma_r[e])
            .map(|(d, _)| d)
            .collect()
    }
}

pub fn build_dof_map(mesh: &TetMesh) -> EdgeDofMap {
    let edges = mesh.edges();
    let find = |a: usize, b: usize| edges.binary_search(&[a.min(b), a.max(b)]).ok();
    let mut tet_edges = Vec::with_capacity(mesh.tets.len());
    let mut tet_signs = Vec::with_capacity(mesh.tets.len());
    for t in &mesh.tets {
        let mut ids = [0usize; 6];
        let mut signs = [0f64; 6];
        for (k, e) in TET_EDGES.iter().enumerate() {
            let (a, b) = (t[e[0]], t[e[1]]);
            ids[k] = find(a, b).expect("tet edge is in the edge list");
            signs[k] = if a < b { 1.0 } else { -1.0 };
        }
        tet_edges.push(ids);
        tet_signs.push(signs);
    }
    let mut pec = vec![false; edges.len()];
    let mut gamma_r = vec![false; edges.len()];
    for f in &mesh.boundary_faces {
        let v = f.vertices;
        for (a, b) in [(v[0], v[1]), (v[0], v[2]), (v[1], v[2])] {
            // a tagged face whose edge is not a tet edge is a mesh defect caught by validation
            if let Some(e) = find(a, b) {
                match f.tag {
                    BoundaryTag::GammaD => pec[e] = true,
                    BoundaryTag::GammaR => gamma_r[e] = true,
                }
            }
        }
    }
    let mut free_index = vec![None; edges.len()];
    let mut free_edges = Vec::new();
    for e in 0..edges.len() {
        if !pec[e] {
            free_index[e] = Some(free_edges.len());
            free_edges.push(e);
        }
    }
    EdgeDofMap {
        edges,
        tet_edges,
        tet_signs,
        pec,
        gamma_r,
        free_index,
        free_edges,
    }
}

/// Barycentric gradients and volume of a positively oriented tet.
fn barycentric_gradients(p: [[f64; 3]; 4]) -> ([[f64; 3]; 4], f64) {
    let e1 = sub(p[1], p[0]);
    let e2 = sub(p[2], p[0]);
    let e3 = sub(p[3], p[0]);
    let det = dot(e1, cross(e2, e3));
    // rows of the inverse Jacobian
    let g1 = cross(e2, e3).map(|x| x / det);
    let g2 = cross(e3, e1).map(|x| x / det);
    let g3 = cross(e1, e2).map(|x| x / det);
    let g0 = [-(g1[0] + g2[0] + g3[0]), -(g1[1] + g2[1] + g3[1]), -(g1[2] + g2[2] + g3[2])];
    ([g0, g1, g2, g3], det / 6.0)
}

/// Element stiffness and mass for the six local edges in `TET_EDGES` order,
/// oriented by local vertex order. Both are symmetric bit for bit.
pub fn element_matrices(p: [[f64; 3]; 4]) -> ([[f64; 6]; 6], [[f64; 6]; 6], f64) {
    let (g, vol) = barycentric_gradients(p);
    let curls: Vec<[f64; 3]> = TET_EDGES
        .iter()
        .map(|e| cross(g[e[0]], g[e[1]]).map(|x| 2.0 * x))
        .collect();
    let ii = |a: usize, b: usize| if a == b { vol / 10.0 } else { vol / 20.0 };
    let gg = |a: usize, b: usize| dot(g[a], g[b]);
    let mut k = [[0.0; 6]; 6];
    let mut m = [[0.0; 6]; 6];
    for i in 0..6 {
        for j in i..6 {
            let [a, b] = TET_EDGES[i];
            let [c, d] = TET_EDGES[j];
            k[i][j] = vol * dot(curls[i], curls[j]);
            m[i][j] = ii(a, c) * gg(b, d) - ii(a, d) * gg(b, c) - ii(b, c) * gg(a, d) + ii(b, d) * gg(a, c);
            k[j][i] = k[i][j];
            m[j][i] = m[i][j];
        }
    }
    (k, m, vol)
}

fn tet_points(mesh: &TetMesh, t: usize) -> [[f64; 3]; 4] {
    mesh.tets[t].map(|i| mesh.vertices[i])
}

type ElementData = ([[f64; 6]; 6], [[f64; 6]; 6]);

fn element_data(mesh: &TetMesh) -> Result<Vec<ElementData>, FemError> {
    (0..mesh.tets.len())
        .into_par_iter()
        .map(|t| {
            let p = tet_points(mesh, t);
            let h = TET_EDGES
                .iter()
                .map(|e| norm(sub(p[e[0]], p[e[1]])))
                .fold(0.0, f64::max);
            let (k, m, vol) = element_matrices(p);
            if !(vol > 1e-12 * h * h * h) {
                return Err(FemError::DegenerateTet { tet: t, volume: vol });
            }
            Ok((k, m))
        })
        .collect()
}

/// Stiffness `(curl φ_j, curl φ_i)` and mass `(φ_j, φ_i)` over the free DOFs,
/// sharing a single sparsity pattern (explicit zeros are kept). Element
/// matrices are computed in parallel; the scatter runs in tet order, so the
/// result does not depend on the thread count.
pub fn assemble_stiffness_mass(
    mesh: &TetMesh,
    dofs: &EdgeDofMap,
) -> Result<(RealSparseMatrix, RealSparseMatrix), FemError> {
    let data = element_data(mesh)?;
    let mut keys = Vec::with_capacity(36 * data.len());
    let mut kv = Vec::with_capacity(36 * data.len());
    let mut mv = Vec::with_capacity(36 * data.len());
    for (t, (k, m)) in data.iter().enumerate() {
        let ids = dofs.tet_edges[t];
        let sg = dofs.tet_signs[t];
        for i in 0..6 {
            let Some(fi) = dofs.free_index[ids[i]] else { continue };
            for j in 0..6 {
                let Some(fj) = dofs.free_index[ids[j]] else { continue };
                let s = sg[i] * sg[j];
                keys.push((fi, fj));
                kv.push(s * k[i][j]);
                mv.push(s * m[i][j]);
            }
        }
    }
    let n = dofs.n_free();
    let (pattern, slot) = CsrPattern::from_keys(n, n, &keys);
    let mut sval = vec![0.0; pattern.nnz()];
    let mut mval = vec![0.0; pattern.nnz()];
    for (q, &pos) in slot.iter().enumerate() {
        sval[pos] += kv[q];
        mval[pos] += mv[q];
    }
    let pattern = Arc::new(pattern);
    Ok((
        RealSparseMatrix {
            pattern: pattern.clone(),
            values: sval,
        },
        RealSparseMatrix {
            pattern,
            values: mval,
        },
    ))
}

pub fn assemble_stiffness(mesh: &TetMesh, dofs: &EdgeDofMap) -> Result<RealSparseMatrix, FemError> {
    Ok(assemble_stiffness_mass(mesh, dofs)?.0)
}

pub fn assemble_mass(mesh: &TetMesh, dofs: &EdgeDofMap) -> Result<RealSparseMatrix, FemError> {
    Ok(assemble_stiffness_mass(mesh, dofs)?.1)
}

/// Degree-5 seven-point rule on the triangle: barycentric points and
/// weights summing to one.
pub fn dunavant7() -> [([f64; 3], f64); 7] {
    let s15 = 15f64.sqrt();
    let a = (6.0 - s15) / 21.0;
    let b = (6.0 + s15) / 21.0;
    let wa = (155.0 - s15) / 1200.0;
    let wb = (155.0 + s15) / 1200.0;
    let third = 1.0 / 3.0;
    [
        ([third, third, third], 9.0 / 40.0),
        ([a, a, 1.0 - 2.0 * a], wa),
        ([a, 1.0 - 2.0 * a, a], wa),
        ([1.0 - 2.0 * a, a, a], wa),
        ([b, b, 1.0 - 2.0 * b], wb),
        ([b, 1.0 - 2.0 * b, b], wb),
        ([1.0 - 2.0 * b, b, b], wb),
    ]
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TraceOptions {
    /// Weight flat-triangle quadrature by `R²/|x|²·|x̂·n̂|`, the Jacobian of
    /// the radial projection onto the sphere.
    pub spherical_correction: bool,
}

/// Fourier coefficients of the tangential traces on GammaR, one row per
/// `(W, n, m)` with `n ≤ order`, one column per free DOF on a GammaR edge.
pub fn assemble_trace_matrix(
    mesh: &TetMesh,
    dofs: &EdgeDofMap,
    order: usize,
    radius: f64,
    opts: TraceOptions,
) -> Result<TraceMatrix, FemError> {
    if order == 0 {
        return Err(FemError::ZeroOrder);
    }
    let faces: Vec<(usize, [usize; 3])> = mesh
        .boundary_faces
        .iter()
        .enumerate()
        .filter(|(_, f)| f.tag == BoundaryTag::GammaR)
        .map(|(i, f)| (i, f.vertices))
        .collect();
    if faces.is_empty() {
        return Err(FemError::NoGammaR);
    }
    let support = dofs.gamma_r_dofs();
    let mut column = vec![usize::MAX; dofs.n_free()];
    for (c, &d) in support.iter().enumerate() {
        column[d] = c;
    }
    let nh = harmonic_count(order);
    let rule = dunavant7();

    // Per face: the three columns and their 2·nh coefficients.
    type FaceBlock = Vec<(usize, Vec<C64>)>;
    let blocks: Vec<FaceBlock> = faces
        .par_iter()
        .map(|&(fi, v)| -> Result<FaceBlock, FemError> {
            let p = v.map(|i| mesh.vertices[i]);
            let nrm = cross(sub(p[1], p[0]), sub(p[2], p[0]));
            let n2 = dot(nrm, nrm);
            if !(n2 > 0.0) {
                return Err(FemError::DegenerateFace { face: fi });
            }
            let area = 0.5 * n2.sqrt();
            let unit_n = nrm.map(|x| x / n2.sqrt());
            let grads = [
                cross(nrm, sub(p[2], p[1])).map(|x| x / n2),
                cross(nrm, sub(p[0], p[2])).map(|x| x / n2),
                cross(nrm, sub(p[1], p[0])).map(|x| x / n2),
            ];
            let mut out: FaceBlock = Vec::with_capacity(3);
            let mut local = Vec::with_capacity(3);
            for (la, lb) in [(0usize, 1usize), (0, 2), (1, 2)] {
                let (lo, hi) = if v[la] < v[lb] { (la, lb) } else { (lb, la) };
                let e = dofs.edge_id(v[la], v[lb]).ok_or(FemError::OrphanFace {
                    face: fi,
                    a: v[la],
                    b: v[lb],
                })?;
                if let Some(d) = dofs.free_index[e] {
                    local.push((lo, hi));
                    out.push((column[d], vec![C64::new(0.0, 0.0); 2 * nh]));
                }
            }
            if out.is_empty() {
                return Ok(out);
            }
            for &(bary, w) in &rule {
                let x = [0, 1, 2].map(|c| bary[0] * p[0][c] + bary[1] * p[1][c] + bary[2] * p[2][c]);
                let r = norm(x);
                let dir = x.map(|c| c / r);
                let mut weight = w * area;
                if opts.spherical_correction {
                    weight *= radius * radius / (r * r) * dot(dir, unit_n).abs();
                }
                let table = harmonic_table(order, dir)?;
                for (slot, &(lo, hi)) in local.iter().enumerate() {
                    let phi = [0, 1, 2].map(|c| bary[lo] * grads[hi][c] - bary[hi] * grads[lo][c]);
                    let vals = &mut out[slot].1;
                    for k in 0..nh {
                        let (u, vv) = (table.u[k], table.v[k]);
                        let pu = u[0].conj() * phi[0] + u[1].conj() * phi[1] + u[2].conj() * phi[2];
                        let pv = vv[0].conj() * phi[0] + vv[1].conj() * phi[1] + vv[2].conj() * phi[2];
                        vals[k] += pu * weight;
                        vals[nh + k] += pv * weight;
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_, _>>()?;

    let mut values = Mat::<C64>::zeros(2 * nh, support.len());
    for block in &blocks {
        for (col, vals) in block {
            for (r, v) in vals.iter().enumerate() {
                values[(r, *col)] += *v;
            }
        }
    }
    let rows: Vec<HarmonicIndex> = TraceMatrix::row_layout(order);
    Ok(TraceMatrix {
        rows,
        values,
        support: support.into(),
        order,
        radius,
    })
}

/// Edge interpolant `∫_e u·t ds` of a vector field over the free DOFs
/// (three-point Gauss rule along each edge).
pub fn edge_interpolant<F>(mesh: &TetMesh, dofs: &EdgeDofMap, field: F) -> Vec<C64>
where
    F: Fn([f64; 3]) -> [C64; 3] + Sync,
{
    let s = (0.6f64).sqrt();
    let gauss = [(0.5 * (1.0 - s), 5.0 / 18.0), (0.5, 8.0 / 18.0), (0.5 * (1.0 + s), 5.0 / 18.0)];
    dofs.free_edges
        .par_iter()
        .map(|&e| {
            let [a, b] = dofs.edges[e];
            let pa = mesh.vertices[a];
            let t = sub(mesh.vertices[b], pa);
            let mut acc = C64::new(0.0, 0.0);
            for &(s, w) in &gauss {
                let x = [0, 1, 2].map(|c| pa[c] + s * t[c]);
                let f = field(x);
                acc += (f[0] * t[0] + f[1] * t[1] + f[2] * t[2]) * w;
            }
            acc
        })
        .collect()
}

/// Discrete gradient of the hat function at vertex `v`, on the free DOFs.
pub fn gradient_interpolant(dofs: &EdgeDofMap, v: usize) -> Vec<f64> {
    dofs.free_edges
        .iter()
        .map(|&e| {
            let [lo, hi] = dofs.edges[e];
            if hi == v {
                1.0
            } else if lo == v {
                -1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Everything the κ-dependent system needs from one mesh.
#[derive(Debug, Clone)]
pub struct AssembledSystem {
    pub dofs: EdgeDofMap,
    pub s: RealSparseMatrix,
    pub m: RealSparseMatrix,
    pub q: TraceMatrix,
    pub n_free: usize,
}

pub fn assemble_system(
    mesh: &TetMesh,
    order: usize,
    radius: f64,
    opts: TraceOptions,
) -> Result<AssembledSystem, FemError> {
    let dofs = build_dof_map(mesh);
    let (s, m) = assemble_stiffness_mass(mesh, &dofs)?;
    let q = assemble_trace_matrix(mesh, &dofs, order, radius, opts)?;
    let n_free = dofs.n_free();
    Ok(AssembledSystem { dofs, s, m, q, n_free })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_ball_shell, BoundaryFace, TET_FACES};
    use crate::specfun::vec_sph_harm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ref_tet(tag: Option<BoundaryTag>) -> TetMesh {
        let verts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let faces = match tag {
            Some(tag) => TET_FACES.iter().map(|f| BoundaryFace { vertices: *f, tag }).collect(),
            None => vec![],
        };
        TetMesh::new(verts, vec![[0, 1, 2, 3]], faces)
    }

    #[test]
    fn single_tet_dof_counts() {
        let d = build_dof_map(&ref_tet(Some(BoundaryTag::GammaD)));
        assert_eq!((d.n_edges(), d.n_pec(), d.n_free()), (6, 6, 0));
        let d = build_dof_map(&ref_tet(None));
        assert_eq!((d.n_edges(), d.n_free()), (6, 6));
    }

    #[test]
    fn shell_free_count_is_edges_minus_inner_sphere_edges() {
        let mesh = build_ball_shell(1, 1, 1.3);
        let d = build_dof_map(&mesh);
        let mut inner: Vec<[usize; 2]> = mesh
            .faces_with_tag(BoundaryTag::GammaD)
            .flat_map(|f| {
                let v = f.vertices;
                [[v[0], v[1]], [v[0], v[2]], [v[1], v[2]]].map(|[a, b]| [a.min(b), a.max(b)])
            })
            .collect();
        inner.sort_unstable();
        inner.dedup();
        // cube surface with one cell per side: 12 edges + 6 diagonals
        assert_eq!(inner.len(), 18);
        assert_eq!(d.n_free(), mesh.edges().len() - inner.len());
        // orientation consistency: every incidence points lo→hi after sign
        for (t, tet) in mesh.tets.iter().enumerate() {
            for (k, e) in TET_EDGES.iter().enumerate() {
                let [lo, hi] = d.edges[d.tet_edges[t][k]];
                let (a, b) = (tet[e[0]], tet[e[1]]);
                if d.tet_signs[t][k] > 0.0 {
                    assert_eq!((a, b), (lo, hi));
                } else {
                    assert_eq!((a, b), (hi, lo));
                }
            }
            let mut ids = d.tet_edges[t].to_vec();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), 6);
        }
        let free: Vec<_> = d.free_index.iter().flatten().copied().collect();
        assert_eq!(free, (0..d.n_free()).collect::<Vec<_>>());
    }

    // Four-point degree-2 rule on a tet, independent of the closed-form mass.
    fn tet_quadrature(p: [[f64; 3]; 4]) -> Vec<([f64; 4], f64)> {
        let a = 0.585_410_196_624_968_5;
        let b = 0.138_196_601_125_010_5;
        let (_, vol) = barycentric_gradients(p);
        (0..4)
            .map(|i| {
                let mut l = [b; 4];
                l[i] = a;
                (l, vol / 4.0)
            })
            .collect()
    }

    #[test]
    fn reference_element_against_quadrature() {
        let p = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let (k, m, vol) = element_matrices(p);
        assert!((vol - 1.0 / 6.0).abs() < 1e-15);
        let (g, _) = barycentric_gradients(p);
        let c01 = cross(g[0], g[1]);
        assert!((k[0][0] - 4.0 * dot(c01, c01) * vol).abs() < 1e-14);
        let basis = |l: [f64; 4], e: usize| {
            let [a, b] = TET_EDGES[e];
            [0, 1, 2].map(|c| l[a] * g[b][c] - l[b] * g[a][c])
        };
        for i in 0..6 {
            for j in 0..6 {
                let q: f64 = tet_quadrature(p)
                    .iter()
                    .map(|&(l, w)| w * dot(basis(l, i), basis(l, j)))
                    .sum();
                assert!((q - m[i][j]).abs() < 1e-14, "mass ({i},{j})");
                assert_eq!(k[i][j], k[j][i]);
                assert_eq!(m[i][j], m[j][i]);
            }
        }
        // reference tet, edge 01: ∫|λ0∇λ1 − λ1∇λ0|² = vol·(|∇λ1|²/10 − 2∇λ0·∇λ1/20 + |∇λ0|²/10)
        let expect = vol * (dot(g[1], g[1]) / 10.0 - dot(g[0], g[1]) / 10.0 + dot(g[0], g[0]) / 10.0);
        assert!((m[0][0] - expect).abs() < 1e-15);
    }

    #[test]
    fn basis_has_unit_tangential_integral() {
        let p = [[0.1, 0.0, 0.2], [1.0, 0.3, 0.0], [0.0, 1.2, 0.1], [0.2, 0.1, 0.9]];
        let (g, _) = barycentric_gradients(p);
        for (e, [a, b]) in TET_EDGES.iter().enumerate() {
            let t = sub(p[*b], p[*a]);
            // along the edge λ_a = 1−s, λ_b = s; the integrand is constant
            let phi = [0, 1, 2].map(|c| 0.5 * g[*b][c] - 0.5 * g[*a][c]);
            assert!((dot(phi, t) - 1.0).abs() < 1e-13, "edge {e}");
        }
    }

    #[test]
    fn assembled_matrices_symmetric_and_spd() {
        let mesh = build_ball_shell(2, 1, 1.3);
        let d = build_dof_map(&mesh);
        let (s, m) = assemble_stiffness_mass(&mesh, &d).unwrap();
        assert!(s.is_symmetric() && m.is_symmetric());
        assert!(Arc::ptr_eq(&s.pattern, &m.pattern));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let x: Vec<f64> = (0..d.n_free()).map(|_| rng.gen::<f64>() - 0.5).collect();
            assert!(m.quad_form(&x) > 0.0);
            assert!(s.quad_form(&x) >= -1e-12);
        }
    }

    #[test]
    fn small_mesh_mass_smallest_eigenvalue_positive() {
        let mesh = build_ball_shell(1, 1, 1.3);
        assert!(mesh.tets.len() <= 40);
        let d = build_dof_map(&mesh);
        let m = assemble_mass(&mesh, &d).unwrap();
        let n = d.n_free();
        let dense = Mat::<f64>::from_fn(n, n, |i, j| m.get(i, j));
        let ev = dense.self_adjoint_eigenvalues(faer::Side::Lower).unwrap();
        assert!(ev.iter().cloned().fold(f64::INFINITY, f64::min) > 0.0);
    }

    #[test]
    fn stiffness_kills_discrete_gradients() {
        let mesh = build_ball_shell(2, 2, 1.3);
        let d = build_dof_map(&mesh);
        let s = assemble_stiffness(&mesh, &d).unwrap();
        let on_pec: std::collections::HashSet<usize> =
            mesh.faces_with_tag(BoundaryTag::GammaD).flat_map(|f| f.vertices).collect();
        let sn = s.norm_inf();
        for v in (0..mesh.vertices.len()).filter(|v| !on_pec.contains(v)).step_by(7) {
            let g = gradient_interpolant(&d, v);
            let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            let r = s.mul_vec(&g);
            let rn = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(rn <= 1e-10 * sn * gn, "vertex {v}");
        }
    }

    #[test]
    fn matrix_norms_scale_with_h() {
        // curl φ ~ h⁻², φ ~ h⁻¹ and vol ~ h³, so ‖S‖ ~ h⁻¹ and ‖M‖ ~ h
        let norms: Vec<(f64, f64)> = [(2, 1), (4, 2)]
            .iter()
            .map(|&(a, b)| {
                let mesh = build_ball_shell(a, b, 1.3);
                let (s, m) = assemble_stiffness_mass(&mesh, &build_dof_map(&mesh)).unwrap();
                (s.norm_inf(), m.norm_inf())
            })
            .collect();
        let s_ratio = norms[1].0 / norms[0].0;
        let m_ratio = norms[1].1 / norms[0].1;
        assert!((1.5..3.0).contains(&s_ratio), "{norms:?}");
        assert!((0.33..0.67).contains(&m_ratio), "{norms:?}");
    }

    fn without_pec(mesh: &TetMesh) -> TetMesh {
        let mut m = mesh.clone();
        m.boundary_faces.retain(|f| f.tag == BoundaryTag::GammaR);
        m
    }

    #[test]
    fn constant_field_mass_gives_volume() {
        let r = 1.3;
        let exact = 4.0 * std::f64::consts::PI / 3.0 * (r * r * r - 1.0);
        let mut errs = Vec::new();
        for (nt, nr) in [(2, 1), (4, 2)] {
            let mesh = without_pec(&build_ball_shell(nt, nr, r));
            let d = build_dof_map(&mesh);
            let m = assemble_mass(&mesh, &d).unwrap();
            let one = C64::new(1.0, 0.0);
            let zero = C64::new(0.0, 0.0);
            let x: Vec<f64> = edge_interpolant(&mesh, &d, |_| [one, zero, zero]).iter().map(|v| v.re).collect();
            // constants are reproduced exactly, so this is the meshed volume
            let vol: f64 = (0..mesh.tets.len()).map(|t| mesh.signed_volume(t)).sum();
            assert!((m.quad_form(&x) - vol).abs() < 1e-12 * vol);
            errs.push((vol - exact).abs() / exact);
        }
        assert!(errs[1] < errs[0] / 2.5, "{errs:?}");
    }

    #[test]
    fn permuted_vertices_give_permuted_matrices() {
        let mesh = build_ball_shell(2, 1, 1.3);
        let mut perm: Vec<usize> = (0..mesh.vertices.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let pm = mesh.relabel_vertices(&perm);
        let (d1, d2) = (build_dof_map(&mesh), build_dof_map(&pm));
        let (s1, m1) = assemble_stiffness_mass(&mesh, &d1).unwrap();
        let (s2, m2) = assemble_stiffness_mass(&pm, &d2).unwrap();
        // DOF k of mesh 1 ↦ DOF of mesh 2 with sign from the edge direction flip
        let map: Vec<(usize, f64)> = d1
            .free_edges
            .iter()
            .map(|&e| {
                let [a, b] = d1.edges[e];
                let (pa, pb) = (perm[a], perm[b]);
                let e2 = d2.edge_id(pa, pb).unwrap();
                (d2.free_index[e2].unwrap(), if pa < pb { 1.0 } else { -1.0 })
            })
            .collect();
        for (i, j, v) in s1.iter() {
            let (pi, si) = map[i];
            let (pj, sj) = map[j];
            assert!((s2.get(pi, pj) * si * sj - v).abs() <= 1e-12 * (1.0 + v.abs()));
            assert!((m2.get(pi, pj) * si * sj - m1.get(i, j)).abs() <= 1e-12);
        }
    }

    #[test]
    fn trace_shape_and_conjugate_rows() {
        let mesh = build_ball_shell(2, 1, 1.3);
        let d = build_dof_map(&mesh);
        let q = assemble_trace_matrix(&mesh, &d, 10, 1.3, TraceOptions::default()).unwrap();
        assert_eq!(q.values.nrows(), 240);
        assert_eq!(q.values.ncols(), d.gamma_r_dofs().len());
        assert!(q.conjugation_defect() <= 1e-12);
        // every stored column really is on GammaR
        for &dof in q.support.iter() {
            assert!(d.gamma_r[d.free_edges[dof]]);
        }
    }

    #[test]
    fn trace_needs_gamma_r() {
        let mesh = ref_tet(Some(BoundaryTag::GammaD));
        let d = build_dof_map(&mesh);
        assert_eq!(
            assemble_trace_matrix(&mesh, &d, 2, 1.0, TraceOptions::default()).unwrap_err(),
            FemError::NoGammaR
        );
    }

    #[test]
    fn degenerate_tet_named() {
        let verts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]];
        let mesh = TetMesh {
            vertices: verts,
            tets: vec![[0, 1, 2, 3]],
            boundary_faces: vec![],
        };
        let d = build_dof_map(&mesh);
        assert!(matches!(
            assemble_stiffness(&mesh, &d),
            Err(FemError::DegenerateTet { tet: 0, .. })
        ));
    }

    fn v10_dominance(n_tan: usize, n_rad: usize) -> f64 {
        let r = 1.3;
        let mesh = build_ball_shell(n_tan, n_rad, r);
        let d = build_dof_map(&mesh);
        let q = assemble_trace_matrix(&mesh, &d, 4, r, TraceOptions::default()).unwrap();
        let x = edge_interpolant(&mesh, &d, |p| {
            let rr = norm(p);
            vec_sph_harm(1, 0, p.map(|c| c / rr)).unwrap().v
        });
        let coeff: Vec<C64> = (0..q.values.nrows())
            .map(|row| (0..q.support.len()).map(|c| q.values[(row, c)] * x[q.support[c]]).sum())
            .collect();
        let target = q.row_of(HarmonicIndex { family: crate::dtn::Family::V, n: 1, m: 0 });
        // coefficient of a unit harmonic on the sphere of radius R is R²
        assert!((coeff[target].norm() - r * r).abs() < 0.2 * r * r);
        let others = coeff
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != target)
            .map(|(_, v)| v.norm())
            .fold(0.0, f64::max);
        coeff[target].norm() / others
    }

    #[test]
    fn v10_trace_coefficient_dominates_under_refinement() {
        let coarse = v10_dominance(2, 1);
        let fine = v10_dominance(4, 1);
        assert!(coarse > 1.0 && fine > 2.0 * coarse, "{coarse} {fine}");
    }
}
