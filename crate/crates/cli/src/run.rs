//! The three commands, as library functions returning in-memory results.

use crate::config::{Geometry, RunConfig};
use anyhow::{anyhow, bail, Context, Result};
use dtnpole_core::ball_oracle::least_squares_order;
use dtnpole_core::edge_fem::TraceOptions;
use dtnpole_core::mesh::{build_ball_shell, build_cube_in_ball, load_msh, read_native};
use dtnpole_core::sim::ClusterReport;
use dtnpole_core::{
    convergence_orders, exact_ball_resonances, OracleRoot, ResonanceProblem, ResonanceReport, SearchRegion,
    TetMesh, C64,
};
use std::collections::HashMap;
use std::fmt;
use std::time::Instant;

/// A failure tagged with the pipeline stage it came from.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub source: anyhow::Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} stage failed: {:#}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {}

fn stage<T, E: Into<anyhow::Error>>(name: &'static str, r: Result<T, E>) -> Result<T, StageError> {
    r.map_err(|e| StageError {
        stage: name,
        source: e.into(),
    })
}

/// Wall time per stage in seconds, in execution order.
pub type StageTimes = Vec<(&'static str, f64)>;

pub fn build_mesh(geometry: &Geometry, radius: f64) -> Result<TetMesh> {
    Ok(match geometry {
        Geometry::BallShell { n_tan, n_rad } => {
            if !(radius > 1.0) {
                bail!("radius {radius} does not enclose the unit ball");
            }
            build_ball_shell(*n_tan, *n_rad, radius)
        }
        Geometry::CubeInBall { half_side, n_tan, n_rad } => {
            let circ = half_side * 3f64.sqrt();
            if !(radius > circ) {
                bail!("radius {radius} does not enclose the cube (circumradius {circ})");
            }
            build_cube_in_ball(*half_side, *n_tan, *n_rad, radius)
        }
        Geometry::Msh { path, tag_map } => {
            let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let map: HashMap<_, _> = tag_map.iter().map(|(k, v)| (*k, *v)).collect();
            load_msh(&bytes, &map).with_context(|| format!("parsing {}", path.display()))?
        }
        Geometry::Native { path } => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            read_native(&text).with_context(|| format!("parsing {}", path.display()))?
        }
    })
}

/// Mesh, assemble, and return the problem ready to search.
pub fn prepare(cfg: &RunConfig, times: &mut StageTimes) -> Result<ResonanceProblem, StageError> {
    let t = Instant::now();
    let mesh = stage("mesh", build_mesh(&cfg.geometry, cfg.radius))?;
    times.push(("mesh", t.elapsed().as_secs_f64()));
    let t = Instant::now();
    let opts = TraceOptions {
        spherical_correction: cfg.spherical_correction,
    };
    let problem = stage("assembly", ResonanceProblem::new(mesh, cfg.radius, cfg.order, opts))?;
    times.push(("assembly", t.elapsed().as_secs_f64()));
    Ok(problem)
}

pub struct SolveOutput {
    pub config_hash: String,
    pub dofs: usize,
    pub report: ResonanceReport,
    pub times: StageTimes,
}

impl SolveOutput {
    pub fn cluster(&self, id: usize) -> &ClusterReport {
        &self.report.clusters[id]
    }

    /// Cluster whose mean is nearest `z`.
    pub fn nearest_cluster(&self, z: C64) -> Option<&ClusterReport> {
        self.report
            .clusters
            .iter()
            .min_by(|a, b| (a.mean - z).norm().total_cmp(&(b.mean - z).norm()))
    }
}

pub fn solve(cfg: &RunConfig) -> Result<SolveOutput, StageError> {
    let start = Instant::now();
    let mut times = StageTimes::new();
    let problem = prepare(cfg, &mut times)?;
    let t = Instant::now();
    let report = stage("search", problem.solve(&cfg.region, &cfg.sim))?;
    times.push(("search", t.elapsed().as_secs_f64()));
    times.push(("total", start.elapsed().as_secs_f64()));
    Ok(SolveOutput {
        config_hash: cfg.hash(),
        dofs: problem.n_free(),
        report,
        times,
    })
}

pub struct OracleOutput {
    pub config_hash: String,
    pub roots: Vec<OracleRoot>,
    pub times: StageTimes,
}

pub fn oracle(cfg: &RunConfig) -> Result<OracleOutput, StageError> {
    let t = Instant::now();
    let roots = stage("oracle", exact_ball_resonances(&cfg.region, cfg.oracle_n_max))?;
    Ok(OracleOutput {
        config_hash: cfg.hash(),
        roots,
        times: vec![("oracle", t.elapsed().as_secs_f64())],
    })
}

/// Expand `converge.shells` into one config per level.
pub fn expand_levels(cfg: &RunConfig) -> Result<Vec<RunConfig>> {
    cfg.converge
        .shells
        .iter()
        .map(|&(t, r)| {
            let mut c = cfg.clone();
            c.geometry = match &cfg.geometry {
                Geometry::BallShell { .. } => Geometry::BallShell { n_tan: t, n_rad: r },
                Geometry::CubeInBall { half_side, .. } => Geometry::CubeInBall {
                    half_side: *half_side,
                    n_tan: t,
                    n_rad: r,
                },
                g => bail!("converge.shells needs a built-in geometry, got {}", g.kind()),
            };
            Ok(c)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackRow {
    pub level: usize,
    pub dofs: usize,
    pub kappa: C64,
    pub error: Option<f64>,
    pub order: Option<f64>,
    /// `ambiguous` when two clusters sit within `cluster_radius` of the
    /// predecessor.
    pub flag: Option<&'static str>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: usize,
    pub reference: Option<C64>,
    pub rows: Vec<TrackRow>,
    /// Least-squares order over all rows, when a reference exists.
    pub fitted_order: Option<f64>,
}

pub struct ConvergeOutput {
    pub levels: Vec<SolveOutput>,
    pub tracks: Vec<Track>,
}

/// Follow clusters from level to level by nearest neighbour, starting from
/// every cluster of the first level (or the one nearest `target`).
pub fn match_tracks(
    levels: &[(usize, Vec<C64>)],
    target: Option<C64>,
    match_radius: f64,
    cluster_radius: f64,
) -> Vec<Vec<(usize, C64, Option<&'static str>)>> {
    let nearest = |pts: &[C64], z: C64| {
        pts.iter()
            .copied()
            .min_by(|a, b| (a - z).norm().total_cmp(&(b - z).norm()))
    };
    let Some((_, first)) = levels.first() else {
        return Vec::new();
    };
    let starts: Vec<C64> = match target {
        Some(t) => nearest(first, t)
            .filter(|z| (z - t).norm() <= match_radius)
            .into_iter()
            .collect(),
        None => first.clone(),
    };
    starts
        .into_iter()
        .map(|z0| {
            let mut rows = vec![(0, z0, None)];
            let mut prev = z0;
            for (l, (_, pts)) in levels.iter().enumerate().skip(1) {
                let Some(z) = nearest(pts, prev).filter(|z| (z - prev).norm() <= match_radius) else {
                    break;
                };
                let close = pts.iter().filter(|p| (*p - prev).norm() <= cluster_radius).count();
                rows.push((l, z, (close >= 2).then_some("ambiguous")));
                prev = z;
            }
            rows
        })
        .collect()
}

/// Nearest exact unit-ball resonance to `z`, searched in a small window.
pub fn ball_reference(z: C64, n_max: usize) -> Option<C64> {
    let h = 0.25;
    let region = SearchRegion::new(z.re - h, z.re + h, z.im - h, (z.im + h).min(0.0)).ok()?;
    exact_ball_resonances(&region, n_max)
        .ok()?
        .into_iter()
        .map(|r| r.kappa)
        .min_by(|a, b| (a - z).norm().total_cmp(&(b - z).norm()))
}

pub fn converge(cfgs: &[RunConfig]) -> Result<ConvergeOutput, StageError> {
    stage("config", check_sequence(cfgs))?;
    let mut levels = Vec::with_capacity(cfgs.len());
    for c in cfgs {
        levels.push(solve(c)?);
    }
    stage(
        "config",
        if levels.windows(2).all(|w| w[0].dofs < w[1].dofs) {
            Ok(())
        } else {
            Err(anyhow!(
                "levels must have increasing DOF counts, got {:?}",
                levels.iter().map(|l| l.dofs).collect::<Vec<_>>()
            ))
        },
    )?;
    let base = &cfgs[0];
    let points: Vec<(usize, Vec<C64>)> = levels
        .iter()
        .map(|l| (l.dofs, l.report.clusters.iter().map(|c| c.mean).collect()))
        .collect();
    let matched = match_tracks(
        &points,
        base.converge.target,
        base.converge.match_radius,
        base.sim.cluster_radius,
    );
    let tracks = matched
        .into_iter()
        .enumerate()
        .map(|(id, rows)| {
            let last = rows.last().unwrap().1;
            let reference = if base.geometry.is_unit_ball() {
                ball_reference(last, base.oracle_n_max)
            } else {
                None
            };
            let series: Vec<(f64, C64)> = rows.iter().map(|&(l, z, _)| (levels[l].dofs as f64, z)).collect();
            let orders = convergence_orders(&series, reference);
            let fitted_order = reference.and_then(|r| least_squares_order(&series, r));
            let rows = rows
                .iter()
                .zip(orders)
                .map(|(&(l, z, flag), order)| TrackRow {
                    level: l,
                    dofs: levels[l].dofs,
                    kappa: z,
                    error: reference.map(|r| (z - r).norm()),
                    order,
                    flag,
                })
                .collect();
            Track {
                id,
                reference,
                rows,
                fitted_order,
            }
        })
        .collect();
    Ok(ConvergeOutput { levels, tracks })
}

fn check_sequence(cfgs: &[RunConfig]) -> Result<()> {
    if cfgs.len() < 3 {
        bail!("a convergence study needs at least 3 meshes, got {}", cfgs.len());
    }
    let first = &cfgs[0];
    for (i, c) in cfgs.iter().enumerate().skip(1) {
        let same_shape = match (&first.geometry, &c.geometry) {
            (Geometry::CubeInBall { half_side: a, .. }, Geometry::CubeInBall { half_side: b, .. }) => a == b,
            (a, b) => a.kind() == b.kind(),
        };
        if !same_shape || c.radius != first.radius || c.order != first.order {
            bail!(
                "level {i} ({} geometry, R = {}, N = {}) does not match level 0 ({} geometry, R = {}, N = {})",
                c.geometry.kind(),
                c.radius,
                c.order,
                first.geometry.kind(),
                first.radius,
                first.order
            );
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn tracks_follow_nearest_neighbour() {
        let levels = vec![
            (10, vec![c(0.8, -0.5), c(1.5, -1.0)]),
            (80, vec![c(1.52, -1.01), c(0.85, -0.5)]),
            (640, vec![c(0.86, -0.5), c(1.7, -1.0)]),
        ];
        let t = match_tracks(&levels, None, 0.1, 0.02);
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].len(), 3);
        assert_eq!(t[0][2].1, c(0.86, -0.5));
        // 1.52 → 1.7 is too far: the track stops
        assert_eq!(t[1].len(), 2);
        let only = match_tracks(&levels, Some(c(0.87, -0.5)), 0.1, 0.02);
        assert_eq!(only.len(), 1);
        assert_eq!(only[0][0].1, c(0.8, -0.5));
    }

    #[test]
    fn ambiguous_match_is_flagged() {
        let levels = vec![
            (10, vec![c(0.8, -0.5)]),
            (80, vec![c(0.805, -0.5), c(0.795, -0.5)]),
            (640, vec![c(0.81, -0.5)]),
        ];
        let t = match_tracks(&levels, None, 0.1, 0.02);
        assert_eq!(t[0][1].2, Some("ambiguous"));
        assert_eq!(t[0][2].2, None);
    }

    #[test]
    fn ball_reference_finds_closed_form_root() {
        let r = ball_reference(c(0.85, -0.49), 6).unwrap();
        assert!((r - c(3f64.sqrt() / 2.0, -0.5)).norm() < 1e-10);
    }
}
