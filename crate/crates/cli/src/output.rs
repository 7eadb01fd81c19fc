//! Result files: CSV with a `# key: value` metadata block, plus a JSON
//! summary.

use crate::config::RunConfig;
use crate::run::{ConvergeOutput, OracleOutput, SolveOutput, StageTimes};
use anyhow::{anyhow, bail, Result};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::fmt::Write;

pub const SOLVE_HEADER: &str = "re,im,residual,cluster_id,cluster_size,count_probe";
pub const ORACLE_HEADER: &str = "re,im,n,kind,multiplicity";
pub const CONVERGE_HEADER: &str = "track,level,dofs,re,im,error,order,flag";

/// 17 significant digits.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn metadata(out: &mut String, command: &str, entries: &[(&str, String)]) {
    let _ = writeln!(out, "# command: {command}");
    let _ = writeln!(out, "# version: {}", env!("CARGO_PKG_VERSION"));
    for (k, v) in entries {
        let _ = writeln!(out, "# {k}: {v}");
    }
}

pub fn solve_csv(cfg: &RunConfig, s: &SolveOutput) -> String {
    let mut out = String::new();
    metadata(
        &mut out,
        "solve",
        &[
            ("config_hash", s.config_hash.clone()),
            ("geometry", cfg.geometry.kind().to_string()),
            ("dofs", s.dofs.to_string()),
            ("radius", num(cfg.radius)),
            ("order", cfg.order.to_string()),
            ("clusters", s.report.clusters.len().to_string()),
        ],
    );
    out.push_str(SOLVE_HEADER);
    out.push('\n');
    for e in &s.report.eigenvalues {
        let c = s.cluster(e.cluster_id);
        let count = c.count.as_ref().map(|c| c.count.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            num(e.kappa.re),
            num(e.kappa.im),
            num(e.residual),
            e.cluster_id,
            c.size,
            count
        );
    }
    out
}

pub fn oracle_csv(cfg: &RunConfig, o: &OracleOutput) -> String {
    let mut out = String::new();
    let r = &cfg.region;
    metadata(
        &mut out,
        "oracle",
        &[
            ("config_hash", o.config_hash.clone()),
            ("n_max", cfg.oracle_n_max.to_string()),
            ("region", format!("[{}, {}) x ({}, {})", r.a_min, r.a_max, r.b_min, r.b_max)),
        ],
    );
    out.push_str(ORACLE_HEADER);
    out.push('\n');
    for root in &o.roots {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            num(root.kappa.re),
            num(root.kappa.im),
            root.n,
            root.kind,
            root.multiplicity
        );
    }
    out
}

pub fn converge_csv(cfgs: &[RunConfig], c: &ConvergeOutput) -> String {
    let mut out = String::new();
    let dofs: Vec<String> = c.levels.iter().map(|l| l.dofs.to_string()).collect();
    let hashes: Vec<&str> = c.levels.iter().map(|l| l.config_hash.as_str()).collect();
    metadata(
        &mut out,
        "converge",
        &[
            ("config_hash", hashes.join(",")),
            ("geometry", cfgs[0].geometry.kind().to_string()),
            ("dofs", dofs.join(",")),
        ],
    );
    for t in &c.tracks {
        let reference = t
            .reference
            .map(|z| format!("{},{}", num(z.re), num(z.im)))
            .unwrap_or_else(|| "none".into());
        let _ = writeln!(out, "# track {}: reference {reference}; fitted_order {}", t.id, opt_num(t.fitted_order));
    }
    out.push_str(CONVERGE_HEADER);
    out.push('\n');
    for t in &c.tracks {
        for r in &t.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                t.id,
                r.level,
                r.dofs,
                num(r.kappa.re),
                num(r.kappa.im),
                opt_num(r.error),
                opt_num(r.order),
                r.flag.unwrap_or("")
            );
        }
    }
    out
}

/// Parsed result file: metadata, column names, raw cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub metadata: BTreeMap<String, String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl ResultTable {
    pub fn column(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| anyhow!("no column {name:?}"))
    }

    pub fn f64s(&self, name: &str) -> Result<Vec<f64>> {
        let j = self.column(name)?;
        self.rows
            .iter()
            .map(|r| r[j].parse::<f64>().map_err(|e| anyhow!("{name}: {e}")))
            .collect()
    }
}

pub fn parse_csv(text: &str) -> Result<ResultTable> {
    let mut metadata = BTreeMap::new();
    let mut columns: Option<Vec<String>> = None;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(m) = line.strip_prefix("# ") {
            if let Some((k, v)) = m.split_once(": ") {
                metadata.insert(k.to_string(), v.to_string());
            }
            continue;
        }
        let cells: Vec<String> = line.split(',').map(str::to_string).collect();
        match &columns {
            None => columns = Some(cells),
            Some(c) => {
                if cells.len() != c.len() {
                    bail!("line {}: {} cells, header has {}", i + 1, cells.len(), c.len());
                }
                rows.push(cells);
            }
        }
    }
    Ok(ResultTable {
        metadata,
        columns: columns.ok_or_else(|| anyhow!("missing header row"))?,
        rows,
    })
}

/// The body: everything after the metadata block.
pub fn csv_body(text: &str) -> String {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect()
}

fn times_json(t: &StageTimes) -> Value {
    Value::Object(t.iter().map(|(k, v)| (k.to_string(), json!(v))).collect())
}

fn config_json(cfg: &RunConfig) -> Value {
    Value::Object(cfg.canonical().into_iter().map(|(k, v)| (k, Value::String(v))).collect())
}

fn solve_level_json(s: &SolveOutput) -> Value {
    let clusters: Vec<Value> = s
        .report
        .clusters
        .iter()
        .map(|c| {
            json!({
                "id": c.id,
                "re": c.mean.re,
                "im": c.mean.im,
                "size": c.size,
                "count": c.count.as_ref().map(|x| x.count),
                "count_saturated": c.count.as_ref().map(|x| x.saturated),
            })
        })
        .collect();
    json!({
        "config_hash": s.config_hash,
        "dofs": s.dofs,
        "eigenvalues": s.report.eigenvalues.len(),
        "final_boxes": s.report.final_boxes,
        "rejected": s.report.rejected,
        "clusters": clusters,
        "wall_seconds": times_json(&s.times),
    })
}

pub fn solve_summary(cfg: &RunConfig, s: &SolveOutput) -> Value {
    let mut v = solve_level_json(s);
    v["command"] = json!("solve");
    v["config"] = config_json(cfg);
    v
}

pub fn oracle_summary(cfg: &RunConfig, o: &OracleOutput) -> Value {
    json!({
        "command": "oracle",
        "config": config_json(cfg),
        "config_hash": o.config_hash,
        "roots": o.roots.len(),
        "wall_seconds": times_json(&o.times),
    })
}

pub fn converge_summary(cfgs: &[RunConfig], c: &ConvergeOutput) -> Value {
    let tracks: Vec<Value> = c
        .tracks
        .iter()
        .map(|t| {
            json!({
                "id": t.id,
                "reference": t.reference.map(|z| [z.re, z.im]),
                "fitted_order": t.fitted_order,
                "rows": t.rows.iter().map(|r| json!({
                    "level": r.level,
                    "dofs": r.dofs,
                    "re": r.kappa.re,
                    "im": r.kappa.im,
                    "error": r.error,
                    "order": r.order,
                    "flag": r.flag,
                })).collect::<Vec<_>>(),
            })
        })
        .collect();
    json!({
        "command": "converge",
        "config": cfgs.iter().map(config_json).collect::<Vec<_>>(),
        "levels": c.levels.iter().map(solve_level_json).collect::<Vec<_>>(),
        "tracks": tracks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_roundtrip() {
        let text = "# command: solve\n# dofs: 12\nre,im\n1.0000000000000000e0,-5.0000000000000000e-1\n";
        let t = parse_csv(text).unwrap();
        assert_eq!(t.metadata["dofs"], "12");
        assert_eq!(t.f64s("im").unwrap(), vec![-0.5]);
        assert_eq!(csv_body(text), "re,im\n1.0000000000000000e0,-5.0000000000000000e-1\n");
        assert!(parse_csv("a,b\n1\n").is_err());
        assert!(parse_csv("# x: y\n").is_err());
    }

    #[test]
    fn seventeen_digits() {
        let x = 0.1 + 0.2;
        assert_eq!(num(x).parse::<f64>().unwrap(), x);
        assert_eq!(num(-0.5), "-5.0000000000000000e-1");
    }
}
