//! Shared inputs for the solver benchmarks.

use dtnpole_core::edge_fem::TraceOptions;
use dtnpole_core::linalg::FactorMode;
use dtnpole_core::mesh::build_ball_shell;
use dtnpole_core::{FemOperator, ResonanceProblem, TetMesh, C64};

pub const RADIUS: f64 = 1.3;
pub const ORDER: usize = 10;

/// A point near the lowest ball resonance, where the solver spends its time.
pub const KAPPA: C64 = C64::new(0.9, -0.55);

pub fn ball_mesh(n_tan: usize, n_rad: usize) -> TetMesh {
    build_ball_shell(n_tan, n_rad, RADIUS)
}

pub fn ball_problem(n_tan: usize, n_rad: usize) -> ResonanceProblem {
    ResonanceProblem::new(ball_mesh(n_tan, n_rad), RADIUS, ORDER, TraceOptions::default()).expect("ball problem")
}

/// Operator with an explicit factorization path.
pub fn operator(p: &ResonanceProblem, mode: FactorMode) -> FemOperator {
    FemOperator::new(&p.system).expect("operator").with_mode(mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dtnpole_core::NonlinearMatrix;

    #[test]
    fn inputs_build() {
        let p = ball_problem(1, 1);
        for mode in [FactorMode::Symmetric, FactorMode::Bordered] {
            assert!(operator(&p, mode).factor(KAPPA).is_ok());
        }
    }
}
