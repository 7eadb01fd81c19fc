use dtnpole_cli::output::{csv_body, parse_csv, ResultTable, SOLVE_HEADER};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dtnpole(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dtnpole"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn dtnpole")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn failed_in(out: &Output, stage: &str) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(err.contains(&format!("{stage} stage failed")), "{err}");
    err
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn table(path: &Path) -> ResultTable {
    parse_csv(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Small shell, search window around the lowest resonance.
const SMALL: &str = "\
geometry = ball_shell
mesh.n_tan = 2
mesh.n_rad = 2
radius = 1.3
region.a_min = 0.6
region.a_max = 1.1
region.b_min = -0.8
region.b_max = -0.2
sim.quad_points = 8
sim.grid_x = 4
sim.grid_y = 4
sim.box_tol = 0.02
sim.count_quad_points = 16
";

#[test]
fn oracle_theta_lists_closed_form_roots() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("oracle.csv");
    let out = dtnpole(&["oracle", "--out", csv.to_str().unwrap()], &[]);
    ok(&out);
    let t = table(&csv);
    let re = t.f64s("re").unwrap();
    let im = t.f64s("im").unwrap();
    let s3 = 3f64.sqrt();
    for (a, b) in [(s3 / 2.0, -0.5), (s3 / 2.0, -1.5)] {
        assert!(re.iter().zip(&im).any(|(x, y)| (x - a).hypot(y - b) < 1e-10));
    }
    assert!(t.rows.len() >= 6);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(csv.with_extension("json")).unwrap()).unwrap();
    assert_eq!(json["command"], "oracle");
    assert_eq!(json["roots"], t.rows.len());
}

#[test]
fn oracle_first_order_only() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("o.csv");
    let out = dtnpole(&["oracle", "--set", "oracle.n_max=1", "--out", csv.to_str().unwrap()], &[]);
    ok(&out);
    let t = table(&csv);
    assert_eq!(t.rows.len(), 2);
    let mut kinds: Vec<&str> = t.rows.iter().map(|r| r[t.column("kind").unwrap()].as_str()).collect();
    kinds.sort();
    assert_eq!(kinds, ["H-zero", "Z-zero"]);
    assert!(t.rows.iter().all(|r| r[t.column("multiplicity").unwrap()] == "3"));
}

#[test]
fn oracle_to_stdout_without_out() {
    let out = dtnpole(&["oracle", "--set", "oracle.n_max=1"], &[]);
    ok(&out);
    let t = parse_csv(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(t.rows.len(), 2);
}

#[test]
fn degenerate_region_is_config_error() {
    let out = dtnpole(&["oracle", "--set", "region.a_max=0"], &[]);
    let err = failed_in(&out, "config");
    assert!(err.contains("empty rectangle"), "{err}");
}

#[test]
fn radius_inside_obstacle_is_rejected() {
    let out = dtnpole(&["solve", "--set", "radius=0.5"], &[]);
    failed_in(&out, "mesh");
}

#[test]
fn unknown_key_and_bad_env_are_rejected() {
    let out = dtnpole(&["solve", "--set", "sim.bogus=1"], &[]);
    failed_in(&out, "config");
    let out = dtnpole(&["oracle"], &[("MP_ORACLE_N_MAX", "zero")]);
    let err = failed_in(&out, "config");
    assert!(err.contains("oracle.n_max"), "{err}");
}

#[test]
fn missing_mesh_file_names_the_mesh_stage() {
    let out = dtnpole(
        &["solve", "--set", "geometry=msh", "--set", "mesh.path=/nonexistent/x.msh"],
        &[],
    );
    failed_in(&out, "mesh");
}

#[test]
fn flags_override_env_override_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "o.cfg", "oracle.n_max = 1\nseed = 3\n");
    let csv = dir.path().join("o.csv");
    let run = |envs: &[(&str, &str)], extra: &[&str]| {
        let mut args = vec!["oracle", "--config", cfg.to_str().unwrap(), "--out", csv.to_str().unwrap()];
        args.extend_from_slice(extra);
        ok(&dtnpole(&args, envs));
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(csv.with_extension("json")).unwrap()).unwrap();
        json["config"]["seed"].as_str().unwrap().to_string()
    };
    assert_eq!(run(&[], &[]), "3");
    assert_eq!(run(&[("MP_SEED", "5")], &[]), "5");
    assert_eq!(run(&[("MP_SEED", "5")], &["--seed", "9"]), "9");
}

#[test]
fn solve_small_shell_finds_lowest_resonance_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.cfg", SMALL);
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    ok(&dtnpole(
        &["solve", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap(), "--threads", "1"],
        &[],
    ));
    ok(&dtnpole(
        &["solve", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--threads", "2"],
        &[],
    ));
    let ta = std::fs::read_to_string(&a).unwrap();
    let tb = std::fs::read_to_string(&b).unwrap();
    assert_eq!(csv_body(&ta), csv_body(&tb));

    let t = parse_csv(&ta).unwrap();
    assert_eq!(t.columns.join(","), SOLVE_HEADER);
    assert_eq!(t.metadata["command"], "solve");
    assert_eq!(t.metadata["config_hash"].len(), 64);
    let dofs: usize = t.metadata["dofs"].parse().unwrap();
    assert!(dofs > 100);
    let re = t.f64s("re").unwrap();
    let im = t.f64s("im").unwrap();
    let res = t.f64s("residual").unwrap();
    assert!(res.iter().all(|&r| r <= 1e-8));
    let target = (3f64.sqrt() / 2.0, -0.5);
    let best = re
        .iter()
        .zip(&im)
        .map(|(x, y)| (x - target.0).hypot(y - target.1))
        .fold(f64::INFINITY, f64::min);
    assert!(best < 0.1, "nearest eigenvalue {best} from (√3−i)/2");

    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.with_extension("json")).unwrap()).unwrap();
    assert_eq!(json["dofs"], dofs);
    for stage in ["mesh", "assembly", "search", "total"] {
        assert!(json["wall_seconds"][stage].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn converge_rejects_short_or_mixed_sequences() {
    let dir = tempfile::tempdir().unwrap();
    let ball = write(dir.path(), "b.cfg", "geometry = ball_shell\n");
    let cube = write(dir.path(), "c.cfg", "geometry = cube_in_ball\nradius = 1.3\n");
    let (b, c) = (ball.to_str().unwrap(), cube.to_str().unwrap());
    let err = failed_in(&dtnpole(&["converge", "--config", b, "--config", c], &[]), "config");
    assert!(err.contains("at least 3"), "{err}");
    let err = failed_in(
        &dtnpole(&["converge", "--config", b, "--config", c, "--config", b], &[]),
        "config",
    );
    assert!(err.contains("does not match"), "{err}");
    failed_in(&dtnpole(&["converge"], &[]), "config");
}
