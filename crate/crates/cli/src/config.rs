//! Flat `key = value` run configuration.
//!
//! Layers, lowest precedence first: built-in defaults, the config file,
//! `MP_*` environment variables, command-line flags. Every layer writes into
//! the same string map; [`RunConfig::from_layers`] parses and validates the
//! result once.

use anyhow::{anyhow, bail, Context, Result};
use dtnpole_core::mesh::BoundaryTag;
use dtnpole_core::{SearchRegion, SimParams, C64};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Every recognised key with its default (empty means unset).
pub const KEYS: &[(&str, &str)] = &[
    ("geometry", "ball_shell"),
    ("mesh.n_tan", "4"),
    ("mesh.n_rad", "2"),
    ("mesh.half_side", "0.5"),
    ("mesh.path", ""),
    ("mesh.tag_map", "1=GammaD,2=GammaR"),
    ("radius", "1.3"),
    ("order", "10"),
    ("trace.spherical_correction", "false"),
    ("region.a_min", "0"),
    ("region.a_max", "2"),
    ("region.b_min", "-2"),
    ("region.b_max", "0"),
    ("sim.quad_points", "16"),
    ("sim.max_depth", "24"),
    ("sim.box_tol", "1e-4"),
    ("sim.tau_abs", "1e-3"),
    ("sim.tau_rel", "10"),
    ("sim.probes", "8"),
    ("sim.count_quad_points", "32"),
    ("sim.newton_max", "20"),
    ("sim.newton_tol", "1e-10"),
    ("sim.accept_residual", "1e-8"),
    ("sim.cluster_radius", "0.02"),
    ("sim.grid_x", "8"),
    ("sim.grid_y", "8"),
    ("sim.count_probe", "true"),
    ("sim.exclude_radius", "0"),
    ("seed", "7"),
    ("threads", "0"),
    ("oracle.n_max", "6"),
    ("converge.shells", ""),
    ("converge.target", ""),
    ("converge.match_radius", "0.1"),
    ("output.csv", ""),
    ("output.summary", ""),
];

/// Raw layered key/value store.
#[derive(Debug, Clone)]
pub struct Layers {
    values: BTreeMap<String, String>,
}

impl Default for Layers {
    fn default() -> Self {
        Layers {
            values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Layers {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => bail!("unknown config key {key:?}"),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    /// Parse file text; `#` starts a comment. A relative `mesh.path` is taken
    /// relative to `base`.
    pub fn apply_text(&mut self, text: &str, base: Option<&Path>) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value, found {raw:?}", i + 1))?;
            let (k, mut v) = (k.trim(), v.trim().to_string());
            if k == "mesh.path" && !v.is_empty() {
                if let Some(b) = base {
                    let p = Path::new(&v);
                    if p.is_relative() {
                        v = b.join(p).to_string_lossy().into_owned();
                    }
                }
            }
            self.set(k, &v).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        self.apply_text(&text, path.parent())
            .with_context(|| format!("in {}", path.display()))
    }

    /// `MP_SIM_BOX_TOL` overrides `sim.box_tol`, and so on for every key.
    pub fn apply_env<F: Fn(&str) -> Option<String>>(&mut self, lookup: F) -> Result<()> {
        for (k, _) in KEYS {
            if let Some(v) = lookup(&env_name(k)) {
                self.set(k, &v).with_context(|| format!("from {}", env_name(k)))?;
            }
        }
        Ok(())
    }

    /// `key=value` pairs, as given to `--set`.
    pub fn apply_pairs<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<()> {
        for p in pairs {
            let (k, v) = p
                .as_ref()
                .split_once('=')
                .ok_or_else(|| anyhow!("expected key=value, found {:?}", p.as_ref()))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }
}

pub fn env_name(key: &str) -> String {
    format!("MP_{}", key.replace('.', "_").to_uppercase())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Geometry {
    BallShell { n_tan: usize, n_rad: usize },
    CubeInBall { half_side: f64, n_tan: usize, n_rad: usize },
    /// Gmsh file; physical group ids map to boundary tags.
    Msh { path: PathBuf, tag_map: BTreeMap<i64, BoundaryTag> },
    /// `meshtxt v1` file.
    Native { path: PathBuf },
}

impl Geometry {
    pub fn kind(&self) -> &'static str {
        match self {
            Geometry::BallShell { .. } => "ball_shell",
            Geometry::CubeInBall { .. } => "cube_in_ball",
            Geometry::Msh { .. } => "msh",
            Geometry::Native { .. } => "native",
        }
    }

    pub fn is_unit_ball(&self) -> bool {
        matches!(self, Geometry::BallShell { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergeConfig {
    /// `(n_tan, n_rad)` per level for the built-in mesher.
    pub shells: Vec<(usize, usize)>,
    /// Track only the cluster nearest this point.
    pub target: Option<C64>,
    pub match_radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub geometry: Geometry,
    pub radius: f64,
    pub order: usize,
    pub spherical_correction: bool,
    pub region: SearchRegion,
    pub sim: SimParams,
    pub oracle_n_max: usize,
    pub converge: ConvergeConfig,
    pub threads: usize,
    pub csv: Option<PathBuf>,
    pub summary: Option<PathBuf>,
}

fn parse<T: std::str::FromStr>(l: &Layers, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let v = l.get(key);
    v.parse::<T>().map_err(|e| anyhow!("{key} = {v:?}: {e}"))
}

fn parse_complex(key: &str, v: &str) -> Result<C64> {
    let (a, b) = v
        .split_once(',')
        .ok_or_else(|| anyhow!("{key} = {v:?}: expected re,im"))?;
    let re = a.trim().parse::<f64>().map_err(|e| anyhow!("{key}: {e}"))?;
    let im = b.trim().parse::<f64>().map_err(|e| anyhow!("{key}: {e}"))?;
    Ok(C64::new(re, im))
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    pub fn from_layers(l: &Layers) -> Result<Self> {
        let geometry = match l.get("geometry") {
            "ball_shell" => Geometry::BallShell {
                n_tan: parse(l, "mesh.n_tan")?,
                n_rad: parse(l, "mesh.n_rad")?,
            },
            "cube_in_ball" => Geometry::CubeInBall {
                half_side: parse(l, "mesh.half_side")?,
                n_tan: parse(l, "mesh.n_tan")?,
                n_rad: parse(l, "mesh.n_rad")?,
            },
            "msh" => {
                let path = opt_path(l.get("mesh.path")).ok_or_else(|| anyhow!("geometry = msh needs mesh.path"))?;
                let mut tag_map = BTreeMap::new();
                for item in l.get("mesh.tag_map").split(',').filter(|s| !s.trim().is_empty()) {
                    let (id, tag) = item
                        .split_once('=')
                        .ok_or_else(|| anyhow!("mesh.tag_map entry {item:?}: expected id=Tag"))?;
                    let id: i64 = id.trim().parse().map_err(|e| anyhow!("mesh.tag_map id {id:?}: {e}"))?;
                    let tag = BoundaryTag::parse(tag.trim())
                        .ok_or_else(|| anyhow!("mesh.tag_map tag {tag:?}: expected GammaD or GammaR"))?;
                    tag_map.insert(id, tag);
                }
                Geometry::Msh { path, tag_map }
            }
            "native" => Geometry::Native {
                path: opt_path(l.get("mesh.path")).ok_or_else(|| anyhow!("geometry = native needs mesh.path"))?,
            },
            other => bail!("unknown geometry {other:?} (ball_shell, cube_in_ball, msh, native)"),
        };
        if let Geometry::BallShell { n_tan, n_rad } | Geometry::CubeInBall { n_tan, n_rad, .. } = geometry {
            if n_tan == 0 || n_rad == 0 {
                bail!("mesh.n_tan and mesh.n_rad must be positive");
            }
        }
        if let Geometry::CubeInBall { half_side, .. } = geometry {
            if !(half_side > 0.0 && half_side.is_finite()) {
                bail!("mesh.half_side must be positive");
            }
        }
        let radius: f64 = parse(l, "radius")?;
        if !(radius > 0.0 && radius.is_finite()) {
            bail!("radius must be positive, got {radius}");
        }
        let order: usize = parse(l, "order")?;
        if order == 0 {
            bail!("order must be at least 1");
        }
        let region = SearchRegion::new(
            parse(l, "region.a_min")?,
            parse(l, "region.a_max")?,
            parse(l, "region.b_min")?,
            parse(l, "region.b_max")?,
        )?;
        let sim = SimParams {
            quad_points: parse(l, "sim.quad_points")?,
            max_depth: parse(l, "sim.max_depth")?,
            box_tol: parse(l, "sim.box_tol")?,
            tau_abs: parse(l, "sim.tau_abs")?,
            tau_rel: parse(l, "sim.tau_rel")?,
            probes: parse(l, "sim.probes")?,
            count_quad_points: parse(l, "sim.count_quad_points")?,
            newton_max: parse(l, "sim.newton_max")?,
            newton_tol: parse(l, "sim.newton_tol")?,
            accept_residual: parse(l, "sim.accept_residual")?,
            cluster_radius: parse(l, "sim.cluster_radius")?,
            grid: (parse(l, "sim.grid_x")?, parse(l, "sim.grid_y")?),
            seed: parse(l, "seed")?,
            count_probe: parse(l, "sim.count_probe")?,
            exclude_radius: parse(l, "sim.exclude_radius")?,
        };
        sim.validate()?;
        let oracle_n_max: usize = parse(l, "oracle.n_max")?;
        if oracle_n_max == 0 {
            bail!("oracle.n_max must be at least 1");
        }
        let mut shells = Vec::new();
        for item in l.get("converge.shells").split(',').filter(|s| !s.trim().is_empty()) {
            let (a, b) = item
                .trim()
                .split_once('x')
                .ok_or_else(|| anyhow!("converge.shells entry {item:?}: expected NTANxNRAD"))?;
            let pair = (
                a.parse().map_err(|e| anyhow!("converge.shells {item:?}: {e}"))?,
                b.parse().map_err(|e| anyhow!("converge.shells {item:?}: {e}"))?,
            );
            if pair.0 == 0 || pair.1 == 0 {
                bail!("converge.shells entry {item:?} must be positive");
            }
            shells.push(pair);
        }
        let target = match l.get("converge.target") {
            "" => None,
            v => Some(parse_complex("converge.target", v)?),
        };
        let match_radius: f64 = parse(l, "converge.match_radius")?;
        if !(match_radius > 0.0) {
            bail!("converge.match_radius must be positive");
        }
        Ok(RunConfig {
            geometry,
            radius,
            order,
            spherical_correction: parse(l, "trace.spherical_correction")?,
            region,
            sim,
            oracle_n_max,
            converge: ConvergeConfig {
                shells,
                target,
                match_radius,
            },
            threads: parse(l, "threads")?,
            csv: opt_path(l.get("output.csv")),
            summary: opt_path(l.get("output.summary")),
        })
    }

    /// Typed values of every field that can change a result, one
    /// `key=value` per line. Fields of inactive geometries, thread count and
    /// output paths are left out.
    pub fn canonical(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        put("geometry", self.geometry.kind().to_string());
        match &self.geometry {
            Geometry::BallShell { n_tan, n_rad } => {
                put("mesh.n_tan", n_tan.to_string());
                put("mesh.n_rad", n_rad.to_string());
            }
            Geometry::CubeInBall { half_side, n_tan, n_rad } => {
                put("mesh.half_side", format!("{half_side:?}"));
                put("mesh.n_tan", n_tan.to_string());
                put("mesh.n_rad", n_rad.to_string());
            }
            Geometry::Msh { path, tag_map } => {
                put("mesh.path", path.display().to_string());
                let tags: Vec<String> = tag_map.iter().map(|(k, v)| format!("{k}={v}")).collect();
                put("mesh.tag_map", tags.join(","));
            }
            Geometry::Native { path } => put("mesh.path", path.display().to_string()),
        }
        put("radius", format!("{:?}", self.radius));
        put("order", self.order.to_string());
        put("trace.spherical_correction", self.spherical_correction.to_string());
        let r = &self.region;
        put("region.a_min", format!("{:?}", r.a_min));
        put("region.a_max", format!("{:?}", r.a_max));
        put("region.b_min", format!("{:?}", r.b_min));
        put("region.b_max", format!("{:?}", r.b_max));
        let s = &self.sim;
        put("sim.quad_points", s.quad_points.to_string());
        put("sim.max_depth", s.max_depth.to_string());
        put("sim.box_tol", format!("{:?}", s.box_tol));
        put("sim.tau_abs", format!("{:?}", s.tau_abs));
        put("sim.tau_rel", format!("{:?}", s.tau_rel));
        put("sim.probes", s.probes.to_string());
        put("sim.count_quad_points", s.count_quad_points.to_string());
        put("sim.newton_max", s.newton_max.to_string());
        put("sim.newton_tol", format!("{:?}", s.newton_tol));
        put("sim.accept_residual", format!("{:?}", s.accept_residual));
        put("sim.cluster_radius", format!("{:?}", s.cluster_radius));
        put("sim.grid_x", s.grid.0.to_string());
        put("sim.grid_y", s.grid.1.to_string());
        put("sim.count_probe", s.count_probe.to_string());
        put("sim.exclude_radius", format!("{:?}", s.exclude_radius));
        put("seed", s.seed.to_string());
        put("oracle.n_max", self.oracle_n_max.to_string());
        let shells: Vec<String> = self.converge.shells.iter().map(|(a, b)| format!("{a}x{b}")).collect();
        put("converge.shells", shells.join(","));
        put(
            "converge.target",
            self.converge.target.map(|z| format!("{:?},{:?}", z.re, z.im)).unwrap_or_default(),
        );
        put("converge.match_radius", format!("{:?}", self.converge.match_radius));
        out
    }

    /// SHA-256 of [`Self::canonical`], hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.canonical() {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(pairs: &[&str]) -> RunConfig {
        let mut l = Layers::default();
        l.apply_pairs(pairs).unwrap();
        RunConfig::from_layers(&l).unwrap()
    }

    #[test]
    fn defaults_parse() {
        let c = cfg(&[]);
        assert_eq!(c.geometry, Geometry::BallShell { n_tan: 4, n_rad: 2 });
        assert_eq!(c.order, 10);
        assert_eq!(c.region, SearchRegion::theta());
        assert_eq!(c.sim, SimParams::default());
    }

    #[test]
    fn file_comments_and_unknown_keys() {
        let mut l = Layers::default();
        l.apply_text("# run\nradius = 1.5  # outer\n\nsim.quad_points=8\n", None).unwrap();
        let c = RunConfig::from_layers(&l).unwrap();
        assert_eq!(c.radius, 1.5);
        assert_eq!(c.sim.quad_points, 8);
        let err = l.apply_text("sim.quadpoints = 8", None).unwrap_err();
        assert!(format!("{err:#}").contains("unknown config key"));
        assert!(l.apply_text("radius 1.5", None).is_err());
    }

    #[test]
    fn env_names_and_precedence() {
        assert_eq!(env_name("sim.box_tol"), "MP_SIM_BOX_TOL");
        let mut l = Layers::default();
        l.apply_text("seed = 3\nradius = 2", None).unwrap();
        l.apply_env(|k| (k == "MP_SEED").then(|| "11".to_string())).unwrap();
        assert_eq!(l.get("seed"), "11");
        l.apply_pairs(&["seed=12"]).unwrap();
        let c = RunConfig::from_layers(&l).unwrap();
        assert_eq!(c.sim.seed, 12);
        assert_eq!(c.radius, 2.0);
    }

    #[test]
    fn relative_mesh_path_follows_file() {
        let mut l = Layers::default();
        l.apply_text("geometry = native\nmesh.path = m.txt", Some(Path::new("/fix"))).unwrap();
        let c = RunConfig::from_layers(&l).unwrap();
        assert_eq!(c.geometry, Geometry::Native { path: "/fix/m.txt".into() });
    }

    #[test]
    fn invalid_values_rejected() {
        for bad in [
            "radius=-1",
            "order=0",
            "region.a_max=0",
            "sim.quad_points=7",
            "geometry=torus",
            "converge.shells=2x",
            "converge.target=1",
            "mesh.n_tan=0",
        ] {
            let mut l = Layers::default();
            l.apply_pairs(&[bad]).unwrap();
            assert!(RunConfig::from_layers(&l).is_err(), "{bad}");
        }
        let mut l = Layers::default();
        l.apply_pairs(&["geometry=msh", "mesh.path=a.msh", "mesh.tag_map=1=GammaX"]).unwrap();
        assert!(RunConfig::from_layers(&l).is_err());
    }

    #[test]
    fn hash_tracks_meaningful_fields_only() {
        let base = cfg(&[]).hash();
        assert_eq!(base, cfg(&["radius=1.30"]).hash());
        assert_eq!(base, cfg(&["threads=3", "output.csv=x.csv"]).hash());
        assert_eq!(base, cfg(&["mesh.half_side=0.7"]).hash());
        for change in ["radius=1.31", "seed=8", "sim.box_tol=1e-3", "mesh.n_tan=5", "region.b_max=-0.1"] {
            assert_ne!(base, cfg(&[change]).hash(), "{change}");
        }
        assert_eq!(base.len(), 64);
    }
}
