//! Tetrahedral meshes with tagged boundary triangles.
//!
//! Three sources: the built-in cubed-sphere shell mesher (and its cube-core
//! variant), Gmsh MSH 2.2/4.1 ASCII files, and a small native text format
//! that round-trips bit-exactly.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::FRAC_PI_4;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BoundaryTag {
    /// Obstacle surface (PEC).
    GammaD,
    /// Artificial truncation sphere.
    GammaR,
}

impl BoundaryTag {
    pub fn as_str(self) -> &'static str {
        match self {
            BoundaryTag::GammaD => "GammaD",
            BoundaryTag::GammaR => "GammaR",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "GammaD" => Some(BoundaryTag::GammaD),
            "GammaR" => Some(BoundaryTag::GammaR),
            _ => None,
        }
    }
}

impl fmt::Display for BoundaryTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryFace {
    pub vertices: [usize; 3],
    pub tag: BoundaryTag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TetMesh {
    pub vertices: Vec<[f64; 3]>,
    pub tets: Vec<[usize; 4]>,
    pub boundary_faces: Vec<BoundaryFace>,
}

/// One violated mesh invariant, naming the offending entity.
#[derive(Debug, Clone, PartialEq)]
pub enum MeshDefect {
    IndexOutOfRange { tet: usize },
    RepeatedVertex { tet: usize },
    NonPositiveVolume { tet: usize, volume: f64 },
    FaceOvershared { face: [usize; 3], count: usize },
    TaggedFaceNotOnBoundary { face: [usize; 3] },
    DuplicateTaggedFace { face: [usize; 3] },
    OpenGammaR { edge: [usize; 2], count: usize },
    OffSphere { vertex: usize, radius: f64 },
    Euler { chi_volume: i64, chi_boundary: i64 },
    Empty,
}

impl fmt::Display for MeshDefect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MeshDefect::IndexOutOfRange { tet } => write!(f, "tet {tet} references a missing vertex"),
            MeshDefect::RepeatedVertex { tet } => write!(f, "tet {tet} repeats a vertex"),
            MeshDefect::NonPositiveVolume { tet, volume } => {
                write!(f, "tet {tet} has non-positive signed volume {volume:e} (orientation)")
            }
            MeshDefect::FaceOvershared { face, count } => {
                write!(f, "face {face:?} is shared by {count} tets")
            }
            MeshDefect::TaggedFaceNotOnBoundary { face } => {
                write!(f, "tagged face {face:?} is not a boundary face of exactly one tet")
            }
            MeshDefect::DuplicateTaggedFace { face } => write!(f, "face {face:?} is tagged twice"),
            MeshDefect::OpenGammaR { edge, count } => {
                write!(f, "GammaR edge {edge:?} borders {count} GammaR faces (surface not closed)")
            }
            MeshDefect::OffSphere { vertex, radius } => {
                write!(f, "GammaR vertex {vertex} lies at radius {radius}")
            }
            MeshDefect::Euler {
                chi_volume,
                chi_boundary,
            } => write!(
                f,
                "Euler characteristic {chi_volume} does not equal half the boundary's {chi_boundary}"
            ),
            MeshDefect::Empty => write!(f, "mesh has no tetrahedra"),
        }
    }
}

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported mesh format version {0}")]
    UnknownVersion(String),
    #[error("boundary triangles carry physical tags absent from the tag map: {0:?}")]
    UnknownTags(Vec<i64>),
    #[error("invalid mesh: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<MeshDefect>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshQualityReport {
    pub min_dihedral_deg: f64,
    pub max_dihedral_deg: f64,
    pub min_volume: f64,
    /// Longest edge.
    pub h: f64,
    pub n_vertices: usize,
    pub n_edges: usize,
    pub n_faces: usize,
    pub n_tets: usize,
    pub n_gamma_d: usize,
    pub n_gamma_r: usize,
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn sorted3(f: [usize; 3]) -> [usize; 3] {
    let mut f = f;
    f.sort_unstable();
    f
}

pub(crate) const TET_FACES: [[usize; 3]; 4] = [[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]];
pub(crate) const TET_EDGES: [[usize; 2]; 6] = [[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]];

impl TetMesh {
    pub fn new(vertices: Vec<[f64; 3]>, tets: Vec<[usize; 4]>, boundary_faces: Vec<BoundaryFace>) -> Self {
        let mut mesh = TetMesh {
            vertices,
            tets,
            boundary_faces,
        };
        mesh.orient();
        mesh
    }

    pub fn signed_volume(&self, t: usize) -> f64 {
        let [a, b, c, d] = self.tets[t].map(|i| self.vertices[i]);
        dot(sub(b, a), cross(sub(c, a), sub(d, a))) / 6.0
    }

    /// Swap two vertices of every negatively oriented tet.
    pub fn orient(&mut self) {
        for t in 0..self.tets.len() {
            if self.tets[t].iter().all(|&i| i < self.vertices.len()) && self.signed_volume(t) < 0.0 {
                self.tets[t].swap(2, 3);
            }
        }
    }

    pub fn faces_with_tag(&self, tag: BoundaryTag) -> impl Iterator<Item = &BoundaryFace> {
        self.boundary_faces.iter().filter(move |f| f.tag == tag)
    }

    /// Rename vertex `i` to `perm[i]`; tets are reoriented afterwards.
    pub fn relabel_vertices(&self, perm: &[usize]) -> TetMesh {
        assert_eq!(perm.len(), self.vertices.len());
        let mut vertices = vec![[0.0; 3]; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            vertices[p] = self.vertices[i];
        }
        let tets = self.tets.iter().map(|t| t.map(|i| perm[i])).collect();
        let faces = self
            .boundary_faces
            .iter()
            .map(|f| BoundaryFace {
                vertices: f.vertices.map(|i| perm[i]),
                tag: f.tag,
            })
            .collect();
        TetMesh::new(vertices, tets, faces)
    }

    /// Sorted unique edges.
    pub fn edges(&self) -> Vec<[usize; 2]> {
        let mut edges: Vec<[usize; 2]> = self
            .tets
            .iter()
            .flat_map(|t| {
                TET_EDGES.iter().map(move |e| {
                    let (a, b) = (t[e[0]], t[e[1]]);
                    [a.min(b), a.max(b)]
                })
            })
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    /// Faces with the number of tets containing each.
    fn face_counts(&self) -> HashMap<[usize; 3], usize> {
        let mut counts = HashMap::with_capacity(self.tets.len() * 2);
        for t in &self.tets {
            for f in TET_FACES {
                *counts.entry(sorted3([t[f[0]], t[f[1]], t[f[2]]])).or_insert(0) += 1;
            }
        }
        counts
    }
}

/// Check conformity, orientation, tagged-face placement and closedness of
/// the GammaR surface. Faces of a single tet that carry no tag are allowed
/// (natural boundary condition).
pub fn validate(mesh: &TetMesh) -> Result<MeshQualityReport, MeshError> {
    validate_inner(mesh, None)
}

/// [`validate`] plus the requirement that every GammaR vertex lies on the
/// sphere of radius `radius` within `1e-8·radius`.
pub fn validate_sphere(mesh: &TetMesh, radius: f64) -> Result<MeshQualityReport, MeshError> {
    validate_inner(mesh, Some(radius))
}

fn validate_inner(mesh: &TetMesh, radius: Option<f64>) -> Result<MeshQualityReport, MeshError> {
    let mut defects = Vec::new();
    if mesh.tets.is_empty() {
        return Err(MeshError::Invalid(vec![MeshDefect::Empty]));
    }
    let nv = mesh.vertices.len();
    for (t, tet) in mesh.tets.iter().enumerate() {
        if tet.iter().any(|&i| i >= nv) {
            defects.push(MeshDefect::IndexOutOfRange { tet: t });
            continue;
        }
        let mut s = *tet;
        s.sort_unstable();
        if s.windows(2).any(|w| w[0] == w[1]) {
            defects.push(MeshDefect::RepeatedVertex { tet: t });
            continue;
        }
        let vol = mesh.signed_volume(t);
        if !(vol > 0.0) {
            defects.push(MeshDefect::NonPositiveVolume { tet: t, volume: vol });
        }
    }
    if !defects.is_empty() {
        return Err(MeshError::Invalid(defects));
    }

    let counts = mesh.face_counts();
    let mut over: Vec<_> = counts.iter().filter(|(_, &c)| c > 2).map(|(f, &c)| (*f, c)).collect();
    over.sort_unstable();
    for (face, count) in over {
        defects.push(MeshDefect::FaceOvershared { face, count });
    }

    let mut tagged: HashMap<[usize; 3], BoundaryTag> = HashMap::new();
    for f in &mesh.boundary_faces {
        let key = sorted3(f.vertices);
        if f.vertices.iter().any(|&i| i >= nv) || counts.get(&key) != Some(&1) {
            defects.push(MeshDefect::TaggedFaceNotOnBoundary { face: f.vertices });
        }
        if tagged.insert(key, f.tag).is_some() {
            defects.push(MeshDefect::DuplicateTaggedFace { face: f.vertices });
        }
    }

    let mut r_edges: BTreeMap<[usize; 2], usize> = BTreeMap::new();
    for f in mesh.faces_with_tag(BoundaryTag::GammaR) {
        let v = f.vertices;
        for (a, b) in [(v[0], v[1]), (v[1], v[2]), (v[2], v[0])] {
            *r_edges.entry([a.min(b), a.max(b)]).or_insert(0) += 1;
        }
    }
    for (edge, count) in &r_edges {
        if *count != 2 {
            defects.push(MeshDefect::OpenGammaR {
                edge: *edge,
                count: *count,
            });
        }
    }

    if let Some(r) = radius {
        let mut seen = vec![false; nv];
        for f in mesh.faces_with_tag(BoundaryTag::GammaR) {
            for &i in &f.vertices {
                if i < nv && !seen[i] {
                    seen[i] = true;
                    let ri = norm(mesh.vertices[i]);
                    if (ri - r).abs() > 1e-8 * r {
                        defects.push(MeshDefect::OffSphere { vertex: i, radius: ri });
                    }
                }
            }
        }
    }

    // Topology counts and Euler consistency χ(Ω) = χ(∂Ω)/2.
    let edges = mesh.edges();
    let mut used = vec![false; nv];
    for t in &mesh.tets {
        for &i in t {
            used[i] = true;
        }
    }
    let n_used = used.iter().filter(|&&u| u).count();
    let n_faces = counts.len();
    let chi_volume = n_used as i64 - edges.len() as i64 + n_faces as i64 - mesh.tets.len() as i64;
    let bfaces: Vec<[usize; 3]> = counts.iter().filter(|(_, &c)| c == 1).map(|(f, _)| *f).collect();
    let mut bverts: Vec<usize> = bfaces.iter().flatten().copied().collect();
    bverts.sort_unstable();
    bverts.dedup();
    let mut bedges: Vec<[usize; 2]> = bfaces
        .iter()
        .flat_map(|f| [[f[0], f[1]], [f[0], f[2]], [f[1], f[2]]])
        .collect();
    bedges.sort_unstable();
    bedges.dedup();
    let chi_boundary = bverts.len() as i64 - bedges.len() as i64 + bfaces.len() as i64;
    if 2 * chi_volume != chi_boundary {
        defects.push(MeshDefect::Euler {
            chi_volume,
            chi_boundary,
        });
    }

    if !defects.is_empty() {
        return Err(MeshError::Invalid(defects));
    }

    let mut min_dihedral: f64 = 180.0;
    let mut max_dihedral: f64 = 0.0;
    let mut min_volume = f64::INFINITY;
    for (t, tet) in mesh.tets.iter().enumerate() {
        min_volume = min_volume.min(mesh.signed_volume(t));
        let p = tet.map(|i| mesh.vertices[i]);
        for (k, e) in TET_EDGES.iter().enumerate() {
            let others = TET_EDGES[5 - k];
            let axis = sub(p[e[1]], p[e[0]]);
            let n1 = cross(axis, sub(p[others[0]], p[e[0]]));
            let n2 = cross(axis, sub(p[others[1]], p[e[0]]));
            let c = (dot(n1, n2) / (norm(n1) * norm(n2))).clamp(-1.0, 1.0);
            let ang = c.acos().to_degrees();
            min_dihedral = min_dihedral.min(ang);
            max_dihedral = max_dihedral.max(ang);
        }
    }
    let h = edges
        .iter()
        .map(|e| norm(sub(mesh.vertices[e[0]], mesh.vertices[e[1]])))
        .fold(0.0, f64::max);

    Ok(MeshQualityReport {
        min_dihedral_deg: min_dihedral,
        max_dihedral_deg: max_dihedral,
        min_volume,
        h,
        n_vertices: n_used,
        n_edges: edges.len(),
        n_faces,
        n_tets: mesh.tets.len(),
        n_gamma_d: mesh.faces_with_tag(BoundaryTag::GammaD).count(),
        n_gamma_r: mesh.faces_with_tag(BoundaryTag::GammaR).count(),
    })
}

/// Lattice points on the surface of the cube `[0, n]³`, in lexicographic
/// order, with a lookup from lattice coordinates to index.
struct CubeSurface {
    points: Vec<[usize; 3]>,
    /// Quads as four lattice indices in cyclic order.
    quads: Vec<[usize; 4]>,
}

impl CubeSurface {
    fn new(n: usize) -> Self {
        let mut points = Vec::new();
        let mut index = HashMap::new();
        for i in 0..=n {
            for j in 0..=n {
                for k in 0..=n {
                    if [i, j, k].iter().any(|&c| c == 0 || c == n) {
                        index.insert([i, j, k], points.len());
                        points.push([i, j, k]);
                    }
                }
            }
        }
        let mut quads = Vec::with_capacity(6 * n * n);
        for axis in 0..3 {
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            for side in [0, n] {
                for a in 0..n {
                    for b in 0..n {
                        let corner = |da: usize, db: usize| {
                            let mut p = [0; 3];
                            p[axis] = side;
                            p[u] = a + da;
                            p[v] = b + db;
                            index[&p]
                        };
                        quads.push([corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)]);
                    }
                }
            }
        }
        CubeSurface { points, quads }
    }

    /// Two triangles per quad, split along the diagonal through the quad's
    /// lowest-index corner. Shared edges between quads are grid lines, so
    /// any per-quad diagonal choice is conforming.
    fn triangles(&self) -> Vec<[usize; 3]> {
        let mut tris = Vec::with_capacity(2 * self.quads.len());
        for q in &self.quads {
            let k = (0..4).min_by_key(|&i| q[i]).unwrap();
            let c = |o: usize| q[(k + o) % 4];
            tris.push([c(0), c(1), c(2)]);
            tris.push([c(0), c(2), c(3)]);
        }
        tris
    }
}

/// Extrude a triangulated closed surface through `n_layers` layers. Layer
/// `l` holds vertex `layer_point(l, s)` at index `l·n_surf + s`. Each prism
/// is cut into three tets by a staircase rule keyed on surface index, which
/// makes the diagonal of every shared quad face depend only on the face's
/// own vertices, hence conformity.
fn extrude(
    n_surf: usize,
    tris: &[[usize; 3]],
    n_layers: usize,
    layer_point: impl Fn(usize, usize) -> [f64; 3],
) -> TetMesh {
    let mut vertices = Vec::with_capacity(n_surf * (n_layers + 1));
    for l in 0..=n_layers {
        for s in 0..n_surf {
            vertices.push(layer_point(l, s));
        }
    }
    let mut tets = Vec::with_capacity(3 * tris.len() * n_layers);
    for l in 0..n_layers {
        for tri in tris {
            let [s0, s1, s2] = sorted3(*tri);
            let lo = |s: usize| l * n_surf + s;
            let up = |s: usize| (l + 1) * n_surf + s;
            tets.push([lo(s0), lo(s1), lo(s2), up(s2)]);
            tets.push([lo(s0), lo(s1), up(s1), up(s2)]);
            tets.push([lo(s0), up(s0), up(s1), up(s2)]);
        }
    }
    let mut faces = Vec::with_capacity(2 * tris.len());
    for tri in tris {
        faces.push(BoundaryFace {
            vertices: *tri,
            tag: BoundaryTag::GammaD,
        });
    }
    for tri in tris {
        faces.push(BoundaryFace {
            vertices: tri.map(|s| n_layers * n_surf + s),
            tag: BoundaryTag::GammaR,
        });
    }
    TetMesh::new(vertices, tets, faces)
}

/// Equiangular cubed-sphere direction for lattice point `p` of `[0, n]³`.
fn cubed_sphere_dir(p: [usize; 3], n: usize) -> [f64; 3] {
    let c = p.map(|i| (FRAC_PI_4 * (2.0 * i as f64 / n as f64 - 1.0)).tan());
    let r = norm(c);
    c.map(|x| x / r)
}

/// Spherical shell `1 ≤ |x| ≤ r_outer` from a cubed-sphere surface grid with
/// `n_tan` divisions per cube face and `n_rad` uniform radial layers. Inner
/// sphere is GammaD, outer sphere GammaR.
///
/// Counts: `(6·n_tan² + 2)(n_rad + 1)` vertices, `36·n_tan²·n_rad` tets and
/// `12·n_tan²` faces on each sphere.
pub fn build_ball_shell(n_tan: usize, n_rad: usize, r_outer: f64) -> TetMesh {
    assert!(n_tan >= 1 && n_rad >= 1 && r_outer > 1.0);
    let surf = CubeSurface::new(n_tan);
    let dirs: Vec<[f64; 3]> = surf.points.iter().map(|&p| cubed_sphere_dir(p, n_tan)).collect();
    extrude(surf.points.len(), &surf.triangles(), n_rad, |l, s| {
        let r = if l == n_rad {
            r_outer
        } else {
            1.0 + (r_outer - 1.0) * l as f64 / n_rad as f64
        };
        dirs[s].map(|x| x * r)
    })
}

/// Region between the cube `[−a, a]³` (GammaD) and the sphere of radius
/// `r_outer` (GammaR). Layer points interpolate linearly between a cube
/// surface point and its radial projection to the sphere.
pub fn build_cube_in_ball(half_side: f64, n_tan: usize, n_rad: usize, r_outer: f64) -> TetMesh {
    assert!(n_tan >= 1 && n_rad >= 1 && r_outer > half_side * 3f64.sqrt());
    let surf = CubeSurface::new(n_tan);
    let inner: Vec<[f64; 3]> = surf
        .points
        .iter()
        .map(|p| p.map(|i| half_side * (2.0 * i as f64 / n_tan as f64 - 1.0)))
        .collect();
    let outer: Vec<[f64; 3]> = surf
        .points
        .iter()
        .map(|&p| cubed_sphere_dir(p, n_tan).map(|x| x * r_outer))
        .collect();
    extrude(surf.points.len(), &surf.triangles(), n_rad, |l, s| {
        if l == n_rad {
            return outer[s];
        }
        let t = l as f64 / n_rad as f64;
        [0, 1, 2].map(|c| (1.0 - t) * inner[s][c] + t * outer[s][c])
    })
}

// ---------------------------------------------------------------- native I/O

/// Serialize to `meshtxt v1`; floats carry 17 significant digits.
pub fn write_native(mesh: &TetMesh) -> String {
    use std::fmt::Write;
    let mut out = String::with_capacity(64 * (mesh.vertices.len() + mesh.tets.len()));
    out.push_str("meshtxt v1\n");
    for v in &mesh.vertices {
        let _ = writeln!(out, "v {:.16e} {:.16e} {:.16e}", v[0], v[1], v[2]);
    }
    for t in &mesh.tets {
        let _ = writeln!(out, "t {} {} {} {}", t[0], t[1], t[2], t[3]);
    }
    for f in &mesh.boundary_faces {
        let v = f.vertices;
        let _ = writeln!(out, "f {} {} {} {}", v[0], v[1], v[2], f.tag);
    }
    out
}

fn perr(line: usize, msg: impl Into<String>) -> MeshError {
    MeshError::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_num<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T, MeshError> {
    let tok = tok.ok_or_else(|| perr(line, format!("missing {what}")))?;
    tok.parse()
        .map_err(|_| perr(line, format!("cannot parse {what} from {tok:?}")))
}

/// Parse `meshtxt v1`. Vertex order and tet orientation are preserved as
/// written; the result is validated.
pub fn read_native(text: &str) -> Result<TetMesh, MeshError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "meshtxt v1" => {}
        Some((_, h)) => return Err(MeshError::UnknownVersion(h.trim().to_string())),
        None => return Err(perr(1, "empty file")),
    }
    let mut mesh = TetMesh {
        vertices: Vec::new(),
        tets: Vec::new(),
        boundary_faces: Vec::new(),
    };
    for (i, line) in lines {
        let ln = i + 1;
        let mut tok = line.split_whitespace();
        match tok.next() {
            None => continue,
            Some("v") => {
                let p = [
                    parse_num(tok.next(), ln, "x")?,
                    parse_num(tok.next(), ln, "y")?,
                    parse_num(tok.next(), ln, "z")?,
                ];
                mesh.vertices.push(p);
            }
            Some("t") => {
                let mut t = [0usize; 4];
                for slot in &mut t {
                    *slot = parse_num(tok.next(), ln, "vertex index")?;
                }
                mesh.tets.push(t);
            }
            Some("f") => {
                let mut v = [0usize; 3];
                for slot in &mut v {
                    *slot = parse_num(tok.next(), ln, "vertex index")?;
                }
                let name = tok.next().ok_or_else(|| perr(ln, "missing tag"))?;
                let tag = BoundaryTag::parse(name).ok_or_else(|| perr(ln, format!("unknown tag {name:?}")))?;
                mesh.boundary_faces.push(BoundaryFace { vertices: v, tag });
            }
            Some(other) => return Err(perr(ln, format!("unknown record {other:?}"))),
        }
    }
    validate(&mesh)?;
    Ok(mesh)
}

// ---------------------------------------------------------------- Gmsh

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Lines {
            inner: text.lines().enumerate(),
            last: 0,
        }
    }

    fn next_line(&mut self) -> Option<(usize, &'a str)> {
        for (i, l) in self.inner.by_ref() {
            let t = l.trim();
            if !t.is_empty() {
                self.last = i + 1;
                return Some((i + 1, t));
            }
        }
        None
    }

    fn expect_line(&mut self, what: &str) -> Result<(usize, &'a str), MeshError> {
        let last = self.last;
        self.next_line()
            .ok_or_else(|| perr(last + 1, format!("unexpected end of file, expected {what}")))
    }

    fn skip_section(&mut self, name: &str) -> Result<(), MeshError> {
        let end = format!("$End{name}");
        loop {
            let (_, l) = self.expect_line(&end)?;
            if l == end {
                return Ok(());
            }
        }
    }

    fn expect_end(&mut self, name: &str) -> Result<(), MeshError> {
        let (ln, l) = self.expect_line(name)?;
        if l != format!("$End{name}") {
            return Err(perr(ln, format!("expected $End{name}, found {l:?}")));
        }
        Ok(())
    }
}

struct RawMsh {
    nodes: Vec<(u64, [f64; 3])>,
    tets: Vec<[u64; 4]>,
    /// Triangle nodes with the physical tags attached to it.
    tris: Vec<([u64; 3], Vec<i64>)>,
}

fn check_element_type(ty: u32, ln: usize) -> Result<(), MeshError> {
    match ty {
        1 | 2 | 4 | 15 => Ok(()),
        _ => Err(perr(ln, format!("unsupported element type {ty} (only linear tets and triangles)"))),
    }
}

fn read_msh2(lines: &mut Lines, raw: &mut RawMsh) -> Result<(), MeshError> {
    while let Some((ln, l)) = lines.next_line() {
        match l {
            "$Nodes" => {
                let (ln, l) = lines.expect_line("node count")?;
                let n: usize = parse_num(Some(l), ln, "node count")?;
                for _ in 0..n {
                    let (ln, l) = lines.expect_line("node")?;
                    let mut t = l.split_whitespace();
                    let id = parse_num(t.next(), ln, "node id")?;
                    let p = [
                        parse_num(t.next(), ln, "x")?,
                        parse_num(t.next(), ln, "y")?,
                        parse_num(t.next(), ln, "z")?,
                    ];
                    raw.nodes.push((id, p));
                }
                lines.expect_end("Nodes")?;
            }
            "$Elements" => {
                let (ln, l) = lines.expect_line("element count")?;
                let n: usize = parse_num(Some(l), ln, "element count")?;
                for _ in 0..n {
                    let (ln, l) = lines.expect_line("element")?;
                    let mut t = l.split_whitespace();
                    let _id: u64 = parse_num(t.next(), ln, "element id")?;
                    let ty: u32 = parse_num(t.next(), ln, "element type")?;
                    check_element_type(ty, ln)?;
                    let ntags: usize = parse_num(t.next(), ln, "tag count")?;
                    let mut tags = Vec::with_capacity(ntags);
                    for _ in 0..ntags {
                        tags.push(parse_num::<i64>(t.next(), ln, "tag")?);
                    }
                    let nodes: Vec<u64> = t
                        .map(|s| parse_num(Some(s), ln, "element node"))
                        .collect::<Result<_, _>>()?;
                    match ty {
                        4 => {
                            let n4: [u64; 4] = nodes
                                .try_into()
                                .map_err(|_| perr(ln, "tetrahedron needs 4 nodes"))?;
                            raw.tets.push(n4);
                        }
                        2 => {
                            let n3: [u64; 3] = nodes
                                .try_into()
                                .map_err(|_| perr(ln, "triangle needs 3 nodes"))?;
                            // first tag is the physical group; 0 means none
                            let phys = tags.first().copied().filter(|&p| p != 0).into_iter().collect();
                            raw.tris.push((n3, phys));
                        }
                        _ => {}
                    }
                }
                lines.expect_end("Elements")?;
            }
            "$MeshFormat" => return Err(perr(ln, "duplicate $MeshFormat")),
            s if s.starts_with('$') && !s.starts_with("$End") => {
                lines.skip_section(&s[1..])?;
            }
            other => return Err(perr(ln, format!("unexpected line {other:?}"))),
        }
    }
    Ok(())
}

fn read_msh4(lines: &mut Lines, raw: &mut RawMsh) -> Result<(), MeshError> {
    // physical tags of surface entities
    let mut surface_phys: HashMap<i64, Vec<i64>> = HashMap::new();
    while let Some((ln, l)) = lines.next_line() {
        match l {
            "$Entities" => {
                let (ln, l) = lines.expect_line("entity counts")?;
                let mut t = l.split_whitespace();
                let mut counts = [0usize; 4];
                for c in &mut counts {
                    *c = parse_num(t.next(), ln, "entity count")?;
                }
                for (dim, &count) in counts.iter().enumerate() {
                    for _ in 0..count {
                        let (ln, l) = lines.expect_line("entity")?;
                        let mut t = l.split_whitespace();
                        let tag: i64 = parse_num(t.next(), ln, "entity tag")?;
                        let n_coords = if dim == 0 { 3 } else { 6 };
                        for _ in 0..n_coords {
                            let _: f64 = parse_num(t.next(), ln, "bounding box")?;
                        }
                        let nphys: usize = parse_num(t.next(), ln, "physical tag count")?;
                        let mut phys = Vec::with_capacity(nphys);
                        for _ in 0..nphys {
                            phys.push(parse_num::<i64>(t.next(), ln, "physical tag")?);
                        }
                        if dim == 2 {
                            surface_phys.insert(tag, phys);
                        }
                    }
                }
                lines.expect_end("Entities")?;
            }
            "$Nodes" => {
                let (ln, l) = lines.expect_line("node header")?;
                let mut t = l.split_whitespace();
                let blocks: usize = parse_num(t.next(), ln, "block count")?;
                for _ in 0..blocks {
                    let (ln, l) = lines.expect_line("node block")?;
                    let mut t = l.split_whitespace();
                    let _dim: i32 = parse_num(t.next(), ln, "entity dim")?;
                    let _tag: i64 = parse_num(t.next(), ln, "entity tag")?;
                    let parametric: i32 = parse_num(t.next(), ln, "parametric flag")?;
                    if parametric != 0 {
                        return Err(perr(ln, "parametric nodes are not supported"));
                    }
                    let n: usize = parse_num(t.next(), ln, "block size")?;
                    let mut ids = Vec::with_capacity(n);
                    for _ in 0..n {
                        let (ln, l) = lines.expect_line("node tag")?;
                        ids.push(parse_num::<u64>(Some(l), ln, "node tag")?);
                    }
                    for id in ids {
                        let (ln, l) = lines.expect_line("node coordinates")?;
                        let mut t = l.split_whitespace();
                        let p = [
                            parse_num(t.next(), ln, "x")?,
                            parse_num(t.next(), ln, "y")?,
                            parse_num(t.next(), ln, "z")?,
                        ];
                        raw.nodes.push((id, p));
                    }
                }
                lines.expect_end("Nodes")?;
            }
            "$Elements" => {
                let (ln, l) = lines.expect_line("element header")?;
                let mut t = l.split_whitespace();
                let blocks: usize = parse_num(t.next(), ln, "block count")?;
                for _ in 0..blocks {
                    let (ln, l) = lines.expect_line("element block")?;
                    let mut t = l.split_whitespace();
                    let dim: i32 = parse_num(t.next(), ln, "entity dim")?;
                    let etag: i64 = parse_num(t.next(), ln, "entity tag")?;
                    let ty: u32 = parse_num(t.next(), ln, "element type")?;
                    check_element_type(ty, ln)?;
                    let n: usize = parse_num(t.next(), ln, "block size")?;
                    let phys = if dim == 2 {
                        surface_phys.get(&etag).cloned().unwrap_or_default()
                    } else {
                        Vec::new()
                    };
                    for _ in 0..n {
                        let (ln, l) = lines.expect_line("element")?;
                        let nodes: Vec<u64> = l
                            .split_whitespace()
                            .skip(1)
                            .map(|s| parse_num(Some(s), ln, "element node"))
                            .collect::<Result<_, _>>()?;
                        match ty {
                            4 => raw.tets.push(
                                nodes
                                    .try_into()
                                    .map_err(|_| perr(ln, "tetrahedron needs 4 nodes"))?,
                            ),
                            2 => raw.tris.push((
                                nodes
                                    .try_into()
                                    .map_err(|_| perr(ln, "triangle needs 3 nodes"))?,
                                phys.clone(),
                            )),
                            _ => {}
                        }
                    }
                }
                lines.expect_end("Elements")?;
            }
            s if s.starts_with('$') && !s.starts_with("$End") => {
                lines.skip_section(&s[1..])?;
            }
            other => return Err(perr(ln, format!("unexpected line {other:?}"))),
        }
    }
    Ok(())
}

/// Read an ASCII Gmsh file (format 2.2 or 4.1). Linear tets become the mesh;
/// triangles whose physical group is in `tag_map` become tagged boundary
/// faces, triangles without a physical group are ignored, and a physical
/// group missing from the map is an error. Nodes not used by any tet are
/// dropped, keeping the file's node order for the rest.
pub fn load_msh(bytes: &[u8], tag_map: &HashMap<i64, BoundaryTag>) -> Result<TetMesh, MeshError> {
    let text = std::str::from_utf8(bytes).map_err(|e| perr(0, format!("not UTF-8 text: {e}")))?;
    let mut lines = Lines::new(text);
    let (ln, l) = lines.expect_line("$MeshFormat")?;
    if l != "$MeshFormat" {
        return Err(perr(ln, format!("expected $MeshFormat, found {l:?}")));
    }
    let (ln, l) = lines.expect_line("format line")?;
    let mut t = l.split_whitespace();
    let version = t.next().unwrap_or("").to_string();
    let file_type: i32 = parse_num(t.next(), ln, "file type")?;
    if file_type != 0 {
        return Err(perr(ln, "binary MSH files are not supported"));
    }
    lines.expect_end("MeshFormat")?;

    let mut raw = RawMsh {
        nodes: Vec::new(),
        tets: Vec::new(),
        tris: Vec::new(),
    };
    match version.as_str() {
        "2.2" | "2.1" | "2" => read_msh2(&mut lines, &mut raw)?,
        "4.1" => read_msh4(&mut lines, &mut raw)?,
        _ => return Err(MeshError::UnknownVersion(version)),
    }

    let node_pos: HashMap<u64, usize> = raw.nodes.iter().enumerate().map(|(i, (id, _))| (*id, i)).collect();
    let lookup = |id: u64| {
        node_pos
            .get(&id)
            .copied()
            .ok_or_else(|| perr(0, format!("element references undefined node {id}")))
    };

    // stable renumbering of nodes referenced by tets
    let mut used = vec![false; raw.nodes.len()];
    let mut tets_old = Vec::with_capacity(raw.tets.len());
    for t in &raw.tets {
        let idx = [lookup(t[0])?, lookup(t[1])?, lookup(t[2])?, lookup(t[3])?];
        for &i in &idx {
            used[i] = true;
        }
        tets_old.push(idx);
    }
    let mut new_index = vec![usize::MAX; raw.nodes.len()];
    let mut vertices = Vec::new();
    for (i, (_, p)) in raw.nodes.iter().enumerate() {
        if used[i] {
            new_index[i] = vertices.len();
            vertices.push(*p);
        }
    }
    let tets: Vec<[usize; 4]> = tets_old.iter().map(|t| t.map(|i| new_index[i])).collect();

    let mut unknown: Vec<i64> = Vec::new();
    let mut faces = Vec::new();
    for (nodes, phys) in &raw.tris {
        if phys.is_empty() {
            continue;
        }
        let tag = phys.iter().find_map(|p| tag_map.get(p).copied());
        match tag {
            Some(tag) => {
                let idx = [lookup(nodes[0])?, lookup(nodes[1])?, lookup(nodes[2])?].map(|i| new_index[i]);
                if idx.contains(&usize::MAX) {
                    return Err(MeshError::Invalid(vec![MeshDefect::TaggedFaceNotOnBoundary {
                        face: [0; 3],
                    }]));
                }
                faces.push(BoundaryFace { vertices: idx, tag });
            }
            None => unknown.extend(phys.iter().copied()),
        }
    }
    if !unknown.is_empty() {
        unknown.sort_unstable();
        unknown.dedup();
        return Err(MeshError::UnknownTags(unknown));
    }

    let mesh = TetMesh::new(vertices, tets, faces);
    validate(&mesh)?;
    Ok(mesh)
}
