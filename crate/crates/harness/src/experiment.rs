//! Runs every `(variant, seed)` job of an experiment and writes the CSV
//! outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cac_core::algorithm::{MetricsRecord, Variant};
use cac_core::montecarlo::{map_items, mean_sd};

use crate::config::ExperimentConfig;
use crate::model::{Model, RunPlan, SeedRun};
use crate::preflight::{preflight, PreflightFailed, PreflightReport};

pub const BASE_METRICS: [&str; 5] = [
    "instant_reward",
    "running_avg_reward",
    "consensus_theta",
    "consensus_omega",
    "consensus_lambda",
];

pub const ORACLE_METRICS: [&str; 6] = [
    "critic_gap",
    "reward_gap",
    "grad_shared",
    "grad_personal",
    "eps_app",
    "tv_mismatch",
];

/// Metric columns in output order.
pub fn metric_names(oracle: bool) -> Vec<&'static str> {
    let mut names = BASE_METRICS.to_vec();
    if oracle {
        names.extend(ORACLE_METRICS);
    }
    names
}

/// Metric values of a record, aligned with [`metric_names`].
pub fn metric_values(r: &MetricsRecord, oracle: bool) -> Result<Vec<f64>> {
    let mut v = vec![
        r.instant_reward,
        r.running_avg_reward,
        r.consensus_theta,
        r.consensus_omega,
        r.consensus_lambda,
    ];
    if oracle {
        let extra = [
            r.critic_gap,
            r.reward_gap,
            r.grad_shared,
            r.grad_personal,
            r.eps_app,
            r.tv_mismatch,
        ];
        for (name, x) in ORACLE_METRICS.iter().zip(extra) {
            v.push(x.with_context(|| format!("oracle metric {name} missing at iteration {}", r.iteration))?);
        }
    }
    Ok(v)
}

/// File-system safe name of a variant (`mdac:4` becomes `mdac-4`).
pub fn variant_slug(v: Variant) -> String {
    v.to_string().replace(':', "-")
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: Variant,
    pub runs: Vec<SeedRun>,
}

impl VariantResult {
    /// Mean and sample sd over seeds of the reward averaged over the horizon.
    pub fn final_reward(&self) -> (f64, f64) {
        let v: Vec<f64> = self.runs.iter().map(|r| r.final_running_avg).collect();
        mean_sd(&v)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub preflight: PreflightReport,
    pub variants: Vec<VariantResult>,
}

impl ExperimentResult {
    pub fn variant(&self, v: Variant) -> Option<&VariantResult> {
        self.variants.iter().find(|r| r.variant == v)
    }
}

/// Builds the model, runs preflight and then every job. Fails with
/// [`PreflightFailed`] before doing any work when an assumption is violated.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let model = Model::build(cfg)?;
    let plan = RunPlan::new(cfg, &model)?;
    let report = preflight(cfg, &model, &plan);
    if !report.passed() {
        return Err(PreflightFailed(report).into());
    }
    let variants = cfg.variants();
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results = map_items(&jobs, |&(v, s)| {
        model
            .run(cfg, &plan, v, s)
            .with_context(|| format!("variant {v}, seed {s}"))
    });
    let mut runs = results.into_iter();
    let mut out = Vec::with_capacity(variants.len());
    for &variant in &variants {
        let per: Result<Vec<SeedRun>> = runs.by_ref().take(cfg.seeds.len()).collect();
        out.push(VariantResult { variant, runs: per? });
    }
    Ok(ExperimentResult {
        preflight: report,
        variants: out,
    })
}

/// Runs the experiment and writes every output file under
/// `cfg.output_dir`.
pub fn run_and_write(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let result = run_experiment(cfg)?;
    write_outputs(cfg, &result, &cfg.output_dir)?;
    Ok(result)
}

pub fn write_outputs(cfg: &ExperimentConfig, result: &ExperimentResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
    fs::write(dir.join("preflight.txt"), format!("{}\n", result.preflight))?;
    for vr in &result.variants {
        let vdir = dir.join(variant_slug(vr.variant));
        fs::create_dir_all(&vdir)?;
        for run in &vr.runs {
            write_seed_csv(&vdir.join(format!("seed_{}.csv", run.seed)), &run.records, cfg.oracle)?;
        }
    }
    let table = aggregate(result, cfg.oracle)?;
    write_aggregate(&dir.join("aggregate.csv"), &table)?;
    write_plot(&dir.join("plot.csv"), &table)?;
    fs::write(dir.join("summary.txt"), summary(result))?;
    Ok(())
}

pub fn seed_csv_path(dir: &Path, variant: Variant, seed: u64) -> PathBuf {
    dir.join(variant_slug(variant)).join(format!("seed_{seed}.csv"))
}

pub fn write_seed_csv(path: &Path, records: &[MetricsRecord], oracle: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    let mut header = vec!["iteration"];
    header.extend(metric_names(oracle));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.iteration.to_string()];
        row.extend(metric_values(r, oracle)?.iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-seed CSV read back as `(header, rows)`.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header = r.headers()?.iter().map(str::to_owned).collect();
    let mut rows = vec![];
    for rec in r.records() {
        let rec = rec?;
        let row: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        rows.push(row.with_context(|| format!("non-numeric field in {}", path.display()))?);
    }
    Ok((header, rows))
}

/// Cross-seed mean and sd of each metric at each recorded iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateTable {
    pub metrics: Vec<String>,
    /// One entry per variant, in configuration order.
    pub variants: Vec<VariantAggregate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantAggregate {
    pub variant: String,
    pub iterations: Vec<usize>,
    /// `[row][metric] = (mean, sd)`
    pub stats: Vec<Vec<(f64, f64)>>,
}

pub fn aggregate(result: &ExperimentResult, oracle: bool) -> Result<AggregateTable> {
    let metrics: Vec<String> = metric_names(oracle).into_iter().map(String::from).collect();
    let mut variants = vec![];
    for vr in &result.variants {
        let Some(first) = vr.runs.first() else {
            bail!("variant {} has no runs", vr.variant);
        };
        let iterations: Vec<usize> = first.records.iter().map(|r| r.iteration).collect();
        for run in &vr.runs {
            let its: Vec<usize> = run.records.iter().map(|r| r.iteration).collect();
            if its != iterations {
                bail!("seed {} of {} recorded different iterations", run.seed, vr.variant);
            }
        }
        let per_seed: Vec<Vec<Vec<f64>>> = vr
            .runs
            .iter()
            .map(|run| run.records.iter().map(|r| metric_values(r, oracle)).collect())
            .collect::<Result<_>>()?;
        let stats = (0..iterations.len())
            .map(|row| {
                (0..metrics.len())
                    .map(|m| {
                        let xs: Vec<f64> = per_seed.iter().map(|s| s[row][m]).collect();
                        mean_sd(&xs)
                    })
                    .collect()
            })
            .collect();
        variants.push(VariantAggregate {
            variant: vr.variant.to_string(),
            iterations,
            stats,
        });
    }
    Ok(AggregateTable { metrics, variants })
}

pub fn write_aggregate(path: &Path, table: &AggregateTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["variant".to_string(), "iteration".to_string()];
    for m in &table.metrics {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_sd"));
    }
    w.write_record(&header)?;
    for va in &table.variants {
        for (it, row) in va.iterations.iter().zip(&va.stats) {
            let mut rec = vec![va.variant.clone(), it.to_string()];
            for (mean, sd) in row {
                rec.push(mean.to_string());
                rec.push(sd.to_string());
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Long-format plotting table: `iteration, variant, metric, mean, sd`,
/// ordered by iteration, then variant, then metric.
pub fn write_plot(path: &Path, table: &AggregateTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "variant", "metric", "mean", "sd"])?;
    let mut by_iteration: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (vi, va) in table.variants.iter().enumerate() {
        for (row, &it) in va.iterations.iter().enumerate() {
            by_iteration.entry(it).or_default().push((vi, row));
        }
    }
    for (it, entries) in by_iteration {
        for (vi, row) in entries {
            let va = &table.variants[vi];
            for (m, (mean, sd)) in table.metrics.iter().zip(&va.stats[row]) {
                w.write_record([it.to_string(), va.variant.clone(), m.clone(), mean.to_string(), sd.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Parses a plotting table back. Every `(variant, iteration)` must carry
/// every metric in `metrics`.
pub fn read_plot(path: &Path, metrics: &[String]) -> Result<AggregateTable> {
    let mut r = csv::Reader::from_path(path)?;
    let expected = ["iteration", "variant", "metric", "mean", "sd"];
    if r.headers()?.iter().ne(expected) {
        bail!("plot table header must be {expected:?}");
    }
    let mut order: Vec<String> = vec![];
    let mut cells: BTreeMap<(String, usize), BTreeMap<String, (f64, f64)>> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let it: usize = rec[0].parse()?;
        let variant = rec[1].to_string();
        if !order.contains(&variant) {
            order.push(variant.clone());
        }
        let metric = rec[2].to_string();
        if !metrics.contains(&metric) {
            bail!("unknown metric {metric} in plot table");
        }
        let stats = (rec[3].parse()?, rec[4].parse()?);
        cells.entry((variant, it)).or_default().insert(metric, stats);
    }
    let mut variants = vec![];
    for v in order {
        let mut iterations = vec![];
        let mut stats = vec![];
        for ((_, it), row) in cells.range((v.clone(), 0)..=(v.clone(), usize::MAX)) {
            let mut out = vec![];
            for m in metrics {
                let s = row
                    .get(m)
                    .with_context(|| format!("metric {m} missing for {v} at iteration {it}"))?;
                out.push(*s);
            }
            iterations.push(*it);
            stats.push(out);
        }
        variants.push(VariantAggregate {
            variant: v,
            iterations,
            stats,
        });
    }
    Ok(AggregateTable {
        metrics: metrics.to_vec(),
        variants,
    })
}

pub fn summary(result: &ExperimentResult) -> String {
    let mut s = String::new();
    for vr in &result.variants {
        let (mean, sd) = vr.final_reward();
        s.push_str(&format!(
            "{}: seeds={} final_running_avg_reward mean={mean} sd={sd}\n",
            vr.variant,
            vr.runs.len()
        ));
    }
    s
}
