//! Cartesian parameter sweeps over dotted configuration keys.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

use crate::config::{apply_override_str, parse_value, set_path, ExperimentConfig};
use crate::experiment::run_and_write;

/// One swept key with its candidate values, parsed from `key=v1,v2,...`.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

impl Axis {
    pub fn parse(spec: &str) -> Result<Self> {
        let (key, values) = spec
            .split_once('=')
            .with_context(|| format!("sweep axis {spec:?} must look like key=v1,v2"))?;
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
        if key.trim().is_empty() || values.iter().any(String::is_empty) {
            bail!("sweep axis {spec:?} has an empty key or value");
        }
        Ok(Self {
            key: key.trim().to_string(),
            values,
        })
    }
}

/// Every combination of axis values, first axis varying slowest.
pub fn grid_points(axes: &[Axis]) -> Vec<Vec<(String, String)>> {
    let mut points = vec![vec![]];
    for axis in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((axis.key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
}

fn point_dir_name(point: &[(String, String)]) -> String {
    let name: Vec<String> = point
        .iter()
        .map(|(k, v)| format!("{}={}", k.replace('.', "_"), v))
        .collect();
    name.join("__")
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "=_-.".contains(c) { c } else { '_' })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub point: Vec<(String, String)>,
    pub variant: String,
    pub final_mean: f64,
    pub final_sd: f64,
}

/// Runs one experiment per grid point under `base_dir/<point>` and writes
/// `base_dir/sweep.csv`.
pub fn run_sweep(base: &toml::Table, overrides: &[String], axes: &[Axis], base_dir: &Path) -> Result<Vec<SweepRow>> {
    let mut rows = vec![];
    for point in grid_points(axes) {
        let mut table = base.clone();
        for o in overrides {
            apply_override_str(&mut table, o)?;
        }
        for (k, v) in &point {
            set_path(&mut table, k, parse_value(v))?;
        }
        let dir = base_dir.join(point_dir_name(&point));
        set_path(&mut table, "output_dir", toml::Value::String(dir.display().to_string()))?;
        let cfg = ExperimentConfig::from_table(table)?;
        let result = run_and_write(&cfg).with_context(|| format!("sweep point {point:?}"))?;
        for vr in &result.variants {
            let (mean, sd) = vr.final_reward();
            rows.push(SweepRow {
                point: point.clone(),
                variant: vr.variant.to_string(),
                final_mean: mean,
                final_sd: sd,
            });
        }
    }
    fs::create_dir_all(base_dir)?;
    let mut w = csv::Writer::from_path(base_dir.join("sweep.csv"))?;
    let mut header: Vec<String> = axes.iter().map(|a| a.key.clone()).collect();
    header.extend(["variant", "final_running_avg_mean", "final_running_avg_sd"].map(String::from));
    w.write_record(&header)?;
    for r in &rows {
        let mut rec: Vec<String> = r.point.iter().map(|(_, v)| v.clone()).collect();
        rec.extend([r.variant.clone(), r.final_mean.to_string(), r.final_sd.to_string()]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(rows)
}
