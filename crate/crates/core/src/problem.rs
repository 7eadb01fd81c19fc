//! The discrete resonance problem of one mesh as a [`NonlinearMatrix`].

use crate::dtn::{dtn_coeffs, dtn_coeffs_derivative, DtnCoeffs, DtnError, DtnHandle, Family};
use crate::edge_fem::{assemble_system, AssembledSystem, FemError, TraceOptions};
use crate::linalg::{Factorization, FactorMode, LinalgError, SystemBuilder};
use crate::mesh::{norm, validate_sphere, BoundaryTag, MeshError, MeshQualityReport, TetMesh};
use crate::sim::{
    find_resonances, EvalError, NonlinearMatrix, Resolvent, ResonanceReport, SearchRegion, SimError, SimParams,
};
use crate::C64;
use faer::Mat;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("mesh: {0}")]
    Mesh(#[from] MeshError),
    #[error("assembly: {0}")]
    Fem(#[from] FemError),
    #[error("dtn: {0}")]
    Dtn(#[from] DtnError),
    #[error("search: {0}")]
    Sim(#[from] SimError),
}

impl From<LinalgError> for EvalError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::Singular => EvalError::Singular,
            LinalgError::Dtn(d @ DtnError::Pole { .. }) => EvalError::Pole(d.to_string()),
            other => EvalError::Failed(other.to_string()),
        }
    }
}

impl Resolvent for Factorization {
    fn solve_many(&self, rhs: &mut Mat<C64>) -> Result<(), EvalError> {
        Factorization::solve_many(self, rhs).map_err(EvalError::from)
    }
}

/// `F(κ) = S − κ²M − iκE(κ)`; products with `E` use the low-rank form.
pub struct FemOperator {
    pub builder: SystemBuilder,
}

impl FemOperator {
    pub fn new(sys: &AssembledSystem) -> Result<Self, DtnError> {
        let dtn = DtnHandle::new(sys.q.clone())?;
        Ok(FemOperator {
            builder: SystemBuilder::new(sys.s.clone(), sys.m.clone(), dtn),
        })
    }

    pub fn with_mode(self, mode: FactorMode) -> Self {
        FemOperator {
            builder: self.builder.with_mode(mode),
        }
    }

    /// `R⁻²·Qᴴ diag(c) Q x` scattered to the full DOF vector.
    fn low_rank(&self, coeffs: &DtnCoeffs, x: &[C64]) -> Vec<C64> {
        let trace = &self.builder.dtn.trace;
        let q = &trace.values;
        let scale = 1.0 / (trace.radius * trace.radius);
        let mut y = vec![C64::new(0.0, 0.0); q.nrows()];
        for (c, &dof) in trace.support.iter().enumerate() {
            let xv = x[dof];
            for (r, yr) in y.iter_mut().enumerate() {
                *yr += q[(r, c)] * xv;
            }
        }
        for (r, idx) in trace.rows.iter().enumerate() {
            let c = match idx.family {
                Family::U => coeffs.c_u[idx.n - 1],
                Family::V => coeffs.c_v[idx.n - 1],
            };
            y[r] *= c * scale;
        }
        let mut out = vec![C64::new(0.0, 0.0); x.len()];
        for (c, &dof) in trace.support.iter().enumerate() {
            out[dof] = (0..q.nrows()).map(|r| q[(r, c)].conj() * y[r]).sum();
        }
        out
    }
}

fn pole(e: DtnError) -> EvalError {
    match e {
        DtnError::Pole { .. } => EvalError::Pole(e.to_string()),
        other => EvalError::Failed(other.to_string()),
    }
}

impl NonlinearMatrix for FemOperator {
    fn dim(&self) -> usize {
        self.builder.dim()
    }

    fn factor(&self, z: C64) -> Result<Box<dyn Resolvent + '_>, EvalError> {
        Ok(Box::new(self.builder.factorize(z)?))
    }

    fn apply(&self, z: C64, x: &[C64]) -> Result<Vec<C64>, EvalError> {
        let coeffs = dtn_coeffs(&self.builder.dtn, z).map_err(pole)?;
        let sx = self.builder.s.mul_vec_c(x);
        let mx = self.builder.m.mul_vec_c(x);
        let ex = self.low_rank(&coeffs, x);
        let ik = crate::I * z;
        Ok((0..x.len()).map(|i| sx[i] - z * z * mx[i] - ik * ex[i]).collect())
    }

    fn apply_derivative(&self, z: C64, x: &[C64]) -> Result<Vec<C64>, EvalError> {
        let coeffs = dtn_coeffs(&self.builder.dtn, z).map_err(pole)?;
        let dcoeffs = dtn_coeffs_derivative(&self.builder.dtn, z).map_err(pole)?;
        let mx = self.builder.m.mul_vec_c(x);
        let ex = self.low_rank(&coeffs, x);
        let dex = self.low_rank(&dcoeffs, x);
        let i = crate::I;
        Ok((0..x.len()).map(|k| -2.0 * z * mx[k] - i * ex[k] - i * z * dex[k]).collect())
    }
}

/// One mesh, assembled and ready to search.
pub struct ResonanceProblem {
    pub mesh: TetMesh,
    pub radius: f64,
    pub order: usize,
    pub quality: MeshQualityReport,
    pub system: AssembledSystem,
    pub operator: FemOperator,
}

impl ResonanceProblem {
    pub fn new(mesh: TetMesh, radius: f64, order: usize, opts: TraceOptions) -> Result<Self, ProblemError> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(ProblemError::Config(format!("radius must be positive, got {radius}")));
        }
        if order == 0 {
            return Err(ProblemError::Config("truncation order must be at least 1".into()));
        }
        let obstacle = mesh
            .faces_with_tag(BoundaryTag::GammaD)
            .flat_map(|f| f.vertices)
            .map(|v| norm(mesh.vertices[v]))
            .fold(0.0, f64::max);
        if radius <= obstacle {
            return Err(ProblemError::Config(format!(
                "outer radius {radius} does not enclose the obstacle (circumradius {obstacle})"
            )));
        }
        let quality = validate_sphere(&mesh, radius)?;
        let system = assemble_system(&mesh, order, radius, opts)?;
        let operator = FemOperator::new(&system)?;
        Ok(ResonanceProblem {
            mesh,
            radius,
            order,
            quality,
            system,
            operator,
        })
    }

    pub fn n_free(&self) -> usize {
        self.system.n_free
    }

    pub fn solve(&self, region: &SearchRegion, params: &SimParams) -> Result<ResonanceReport, ProblemError> {
        Ok(find_resonances(&self.operator, region, params)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_ball_shell;
    use crate::sim::probe_vector;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn small() -> ResonanceProblem {
        ResonanceProblem::new(build_ball_shell(2, 1, 1.3), 1.3, 4, TraceOptions::default()).unwrap()
    }

    #[test]
    fn apply_matches_assembled_matrix() {
        let p = small();
        let x = probe_vector(p.n_free(), 3);
        for z in [c(0.8, -0.5), c(1.7, -1.2)] {
            let f = p.operator.builder.build_f(z).unwrap();
            let df = p.operator.builder.build_df(z).unwrap();
            let a = p.operator.apply(z, &x).unwrap();
            let b = f.mul_vec(&x);
            let da = p.operator.apply_derivative(z, &x).unwrap();
            let db = df.mul_vec(&x);
            let scale = f.frobenius_norm();
            for i in 0..x.len() {
                assert!((a[i] - b[i]).norm() <= 1e-12 * scale);
                assert!((da[i] - db[i]).norm() <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn factor_modes_agree() {
        let p = small();
        let z = c(0.9, -0.6);
        let b = probe_vector(p.n_free(), 1);
        let x1 = p.operator.factor(z).unwrap().solve(&b).unwrap();
        assert_eq!(p.operator.builder.effective_mode(), FactorMode::Symmetric);
        let f = p.operator.builder.build_f(z).unwrap();
        let r = f.mul_vec(&x1);
        let res: f64 = r.iter().zip(&b).map(|(u, v)| (u - v).norm_sqr()).sum::<f64>().sqrt();
        assert!(res <= 1e-10);
        for mode in [FactorMode::Spliced, FactorMode::Bordered] {
            let other = FemOperator::new(&p.system).unwrap().with_mode(mode);
            let x2 = other.factor(z).unwrap().solve(&b).unwrap();
            for (u, v) in x1.iter().zip(&x2) {
                assert!((u - v).norm() <= 1e-9 * (1.0 + v.norm()), "{mode:?}");
            }
        }
    }

    #[test]
    fn derivative_matches_difference() {
        let p = small();
        let x = probe_vector(p.n_free(), 2);
        let z = c(1.1, -0.4);
        let h = 1e-5;
        let fp = p.operator.apply(z + h, &x).unwrap();
        let fm = p.operator.apply(z - h, &x).unwrap();
        let d = p.operator.apply_derivative(z, &x).unwrap();
        let err: f64 = (0..x.len())
            .map(|i| ((fp[i] - fm[i]) / (2.0 * h) - d[i]).norm_sqr())
            .sum::<f64>()
            .sqrt();
        let dn: f64 = d.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        assert!(err <= 1e-7 * dn);
    }

    #[test]
    fn radius_inside_obstacle_rejected() {
        let err = ResonanceProblem::new(build_ball_shell(1, 1, 1.3), 0.5, 4, TraceOptions::default());
        assert!(matches!(err, Err(ProblemError::Config(_))));
    }

    #[test]
    fn interior_rows_are_sparse_part_only() {
        let p = small();
        let z = c(0.8, -0.5);
        let f = p.operator.builder.build_f(z).unwrap();
        let support: std::collections::HashSet<usize> = p.system.q.support.iter().copied().collect();
        for (i, j, v) in f.iter() {
            if !support.contains(&i) {
                let sm = p.system.s.get(i, j) - z * z * p.system.m.get(i, j);
                assert!((v - sm).norm() <= 1e-15 * (1.0 + v.norm()));
            }
        }
    }
}
