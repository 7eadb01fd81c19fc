//! Scattering poles of perfectly conducting obstacles.
//!
//! The exterior Maxwell problem is truncated on a sphere of radius `R` with a
//! truncated Calderón (DtN) operator, discretized with lowest-order Nédélec
//! edge elements, and the resulting nonlinear eigenvalue problem
//!
//! ```text
//! F(κ) u = (S − κ² M − iκ E(κ)) u = 0
//! ```
//!
//! is searched with a contour-integral spectral indicator over a rectangle in
//! the lower half plane.
//!
//! Module map:
//! - [`specfun`]: spherical Hankel functions, DtN ratios, vector spherical harmonics
//! - [`mesh`]: tetrahedral meshes, the built-in spherical-shell mesher, Gmsh and native I/O
//! - [`edge_fem`]: edge DOFs, stiffness/mass assembly, the boundary trace matrix
//! - [`dtn`]: the low-rank DtN block `E(κ)` and its derivative
//! - [`linalg`]: complex sparse matrices, `F(κ)`, direct factorization
//! - [`sim`]: spectral indicator search, eigenpair refinement, counting, clustering
//! - [`ball_oracle`]: exact unit-ball resonances and convergence orders
//! - [`problem`]: ties the pieces together into a searchable operator

pub mod ball_oracle;
pub mod dtn;
pub mod edge_fem;
pub mod linalg;
pub mod mesh;
pub mod problem;
pub mod sim;
pub mod specfun;

pub use num_complex::Complex64 as C64;

pub use ball_oracle::{convergence_orders, exact_ball_resonances, OracleRoot, RootKind};
pub use dtn::{DtnHandle, Family, HarmonicIndex, TraceMatrix};
pub use edge_fem::{AssembledSystem, EdgeDofMap};
pub use linalg::{ComplexSparseMatrix, Factorization, RealSparseMatrix};
pub use mesh::{BoundaryTag, MeshQualityReport, TetMesh};
pub use problem::{FemOperator, ResonanceProblem};
pub use sim::{
    cluster_and_average, count_in_box, indicator, refine_eigenpair, sim_search, Cluster,
    NonlinearMatrix, ResonanceReport, SearchBox, SearchRegion, SimParams,
};

/// The imaginary unit.
pub const I: C64 = C64::new(0.0, 1.0);
