//! Run artifacts: per-device round CSV, per-round summary CSV, JSON run
//! manifest, and comparison tables aligned across schedulers and seeds.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::config::RunConfig;
use crate::sim::{RoundLog, SchedulerKind};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("no completed runs found under {0}")]
    NoRuns(PathBuf),
    #[error("runs are incomparable: {0}")]
    Incomparable(String),
}

pub const ROUNDS_CSV: &str = "rounds.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const MANIFEST_JSON: &str = "manifest.json";

const ROUNDS_HEADER: [&str; 15] = [
    "round",
    "device",
    "feasible",
    "scheduled",
    "transmitted",
    "importance",
    "score",
    "queue_before",
    "queue_after",
    "cpu_freq",
    "gain_sq",
    "t_cmp",
    "t_tr",
    "e_cmp",
    "e_tr",
];

const SUMMARY_HEADER: [&str; 9] = [
    "round",
    "n_feasible",
    "n_scheduled",
    "n_transmitted",
    "max_queue",
    "cum_mean_energy_per_device",
    "test_loss",
    "test_accuracy",
    "train_loss",
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per device per round.
pub fn write_rounds_csv<W: Write>(out: W, logs: &[RoundLog]) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ROUNDS_HEADER)?;
    for log in logs {
        for (d, row) in log.devices.iter().enumerate() {
            w.write_record([
                log.round.to_string(),
                d.to_string(),
                u8::from(row.feasible).to_string(),
                u8::from(row.scheduled).to_string(),
                u8::from(row.transmitted).to_string(),
                row.importance.to_string(),
                row.score.to_string(),
                row.queue_before.to_string(),
                row.queue_after.to_string(),
                row.cpu_freq.to_string(),
                row.gain_sq.to_string(),
                row.t_cmp.to_string(),
                row.t_tr.to_string(),
                row.e_cmp.to_string(),
                row.e_tr.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One row per round; loss/accuracy cells are empty outside evaluation
/// checkpoints.
pub fn write_summary_csv<W: Write>(out: W, logs: &[RoundLog]) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for log in logs {
        let max_queue = log
            .devices
            .iter()
            .map(|r| r.queue_after)
            .fold(0.0f64, f64::max);
        w.write_record([
            log.round.to_string(),
            log.feasible.len().to_string(),
            log.scheduled.len().to_string(),
            log.transmitted.len().to_string(),
            max_queue.to_string(),
            log.cum_mean_energy.to_string(),
            fmt_opt(log.test_loss),
            fmt_opt(log.test_accuracy),
            fmt_opt(log.train_loss),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Config echo plus provenance for one run cell.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub version: String,
    pub scheduler: String,
    pub seed: u64,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(cfg: &RunConfig, kind: SchedulerKind) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            scheduler: kind.label().to_string(),
            seed: cfg.system.seed,
            config: cfg.clone(),
        }
    }
}

/// Writes `manifest.json`, `rounds.csv`, and `summary.csv` into `dir`,
/// creating it if needed.
pub fn write_run_dir(
    dir: &Path,
    cfg: &RunConfig,
    kind: SchedulerKind,
    logs: &[RoundLog],
) -> Result<(), ReportError> {
    std::fs::create_dir_all(dir)?;
    let manifest = RunManifest::new(cfg, kind);
    let mut f = std::fs::File::create(dir.join(MANIFEST_JSON))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    write_rounds_csv(std::fs::File::create(dir.join(ROUNDS_CSV))?, logs)?;
    write_summary_csv(std::fs::File::create(dir.join(SUMMARY_CSV))?, logs)?;
    Ok(())
}

/// One row of the combined per-cell summary an experiment grid emits.
#[derive(Debug, Clone)]
pub struct CellSummary {
    pub dir: String,
    pub scheduler: String,
    pub seed: u64,
    pub rounds: usize,
    pub time_avg_energy_per_device: f64,
    pub final_test_accuracy: Option<f64>,
}

/// Writes the combined summary table for a set of completed cells.
pub fn write_cells_csv<W: Write>(out: W, cells: &[CellSummary]) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "dir",
        "scheduler",
        "seed",
        "rounds",
        "time_avg_energy_per_device",
        "final_test_accuracy",
    ])?;
    for c in cells {
        w.write_record([
            c.dir.clone(),
            c.scheduler.clone(),
            c.seed.to_string(),
            c.rounds.to_string(),
            c.time_avg_energy_per_device.to_string(),
            fmt_opt(c.final_test_accuracy),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// A per-round metric series read back from a run's summary CSV.
#[derive(Debug, Clone, Default)]
struct SummarySeries {
    rounds: Vec<usize>,
    energy: Vec<f64>,
    test_loss: Vec<(usize, f64)>,
    test_accuracy: Vec<(usize, f64)>,
}

fn read_summary(path: &Path) -> Result<SummarySeries, ReportError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(c_round), Some(c_energy), Some(c_loss), Some(c_acc)) = (
        col("round"),
        col("cum_mean_energy_per_device"),
        col("test_loss"),
        col("test_accuracy"),
    ) else {
        return Err(ReportError::Incomparable(format!(
            "{} is missing expected summary columns",
            path.display()
        )));
    };
    let mut series = SummarySeries::default();
    for record in rdr.records() {
        let record = record?;
        let round: usize = record[c_round].parse().map_err(|e| {
            ReportError::Incomparable(format!("bad round in {}: {e}", path.display()))
        })?;
        series.rounds.push(round);
        series.energy.push(record[c_energy].parse().unwrap_or(f64::NAN));
        if !record[c_loss].is_empty() {
            series
                .test_loss
                .push((round, record[c_loss].parse().unwrap_or(f64::NAN)));
        }
        if !record[c_acc].is_empty() {
            series
                .test_accuracy
                .push((round, record[c_acc].parse().unwrap_or(f64::NAN)));
        }
    }
    Ok(series)
}

/// Seed-mean and seed-spread of one metric, aligned by round across
/// schedulers.
#[derive(Debug, Clone)]
pub struct MetricTable {
    pub schedulers: Vec<String>,
    pub rounds: Vec<usize>,
    /// `means[sched][row]`
    pub means: Vec<Vec<f64>>,
    /// Sample standard deviation across seeds; zero with a single seed.
    pub stds: Vec<Vec<f64>>,
}

impl MetricTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ReportError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["round".to_string()];
        for s in &self.schedulers {
            header.push(format!("{s}_mean"));
            header.push(format!("{s}_std"));
        }
        w.write_record(&header)?;
        for (i, round) in self.rounds.iter().enumerate() {
            let mut rec = vec![round.to_string()];
            for s in 0..self.schedulers.len() {
                rec.push(self.means[s][i].to_string());
                rec.push(self.stds[s][i].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Paired comparison tables for a directory of completed runs.
#[derive(Debug, Clone)]
pub struct CompareReport {
    pub accuracy: MetricTable,
    pub loss: MetricTable,
    pub energy: MetricTable,
}

impl CompareReport {
    /// Writes `accuracy_vs_round.csv`, `loss_vs_round.csv`, and
    /// `energy_vs_round.csv` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), ReportError> {
        self.accuracy
            .write_csv(std::fs::File::create(dir.join("accuracy_vs_round.csv"))?)?;
        self.loss
            .write_csv(std::fs::File::create(dir.join("loss_vs_round.csv"))?)?;
        self.energy
            .write_csv(std::fs::File::create(dir.join("energy_vs_round.csv"))?)?;
        Ok(())
    }
}

/// Recursively reports the first differing path between two JSON values.
fn first_difference(a: &serde_json::Value, b: &serde_json::Value, path: &str) -> Option<String> {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(ma), Value::Object(mb)) => {
            let keys: std::collections::BTreeSet<_> = ma.keys().chain(mb.keys()).collect();
            for k in keys {
                match (ma.get(k), mb.get(k)) {
                    (Some(va), Some(vb)) => {
                        if let Some(d) = first_difference(va, vb, &format!("{path}.{k}")) {
                            return Some(d);
                        }
                    }
                    _ => return Some(format!("{path}.{k}")),
                }
            }
            None
        }
        _ => (a != b).then(|| format!("{path}: {a} vs {b}")),
    }
}

/// Scans `dir` for run subdirectories and builds comparison tables.
///
/// Runs must share the same config apart from scheduler and seed.
pub fn compare_runs(dir: &Path) -> Result<CompareReport, ReportError> {
    let mut run_dirs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_JSON).is_file())
        .collect();
    run_dirs.sort();
    if run_dirs.is_empty() {
        return Err(ReportError::NoRuns(dir.to_path_buf()));
    }

    let mut reference: Option<(PathBuf, serde_json::Value)> = None;
    // scheduler -> per-seed series
    let mut groups: BTreeMap<String, Vec<SummarySeries>> = BTreeMap::new();
    for run in &run_dirs {
        let manifest: serde_json::Value =
            serde_json::from_slice(&std::fs::read(run.join(MANIFEST_JSON))?)?;
        let scheduler = manifest["scheduler"]
            .as_str()
            .ok_or_else(|| ReportError::Incomparable(format!("{}: manifest lacks scheduler", run.display())))?
            .to_string();
        let mut config = manifest["config"].clone();
        if let Some(system) = config.get_mut("system").and_then(|s| s.as_object_mut()) {
            system.remove("seed");
        }
        match &reference {
            None => reference = Some((run.clone(), config)),
            Some((first, expect)) => {
                if let Some(diff) = first_difference(expect, &config, "config") {
                    return Err(ReportError::Incomparable(format!(
                        "{} and {} differ at {diff}",
                        first.display(),
                        run.display()
                    )));
                }
            }
        }
        groups
            .entry(scheduler)
            .or_default()
            .push(read_summary(&run.join(SUMMARY_CSV))?);
    }

    let schedulers: Vec<String> = groups.keys().cloned().collect();
    let energy = build_table(&schedulers, &groups, |s| {
        s.rounds.iter().copied().zip(s.energy.iter().copied()).collect()
    })?;
    let accuracy = build_table(&schedulers, &groups, |s| s.test_accuracy.clone())?;
    let loss = build_table(&schedulers, &groups, |s| s.test_loss.clone())?;
    Ok(CompareReport {
        accuracy,
        loss,
        energy,
    })
}

fn build_table(
    schedulers: &[String],
    groups: &BTreeMap<String, Vec<SummarySeries>>,
    extract: impl Fn(&SummarySeries) -> Vec<(usize, f64)>,
) -> Result<MetricTable, ReportError> {
    let mut rounds: Option<Vec<usize>> = None;
    let mut means = Vec::new();
    let mut stds = Vec::new();
    for sched in schedulers {
        let seeds = &groups[sched];
        let per_seed: Vec<Vec<(usize, f64)>> = seeds.iter().map(&extract).collect();
        let r0: Vec<usize> = per_seed[0].iter().map(|&(r, _)| r).collect();
        for series in &per_seed {
            let r: Vec<usize> = series.iter().map(|&(x, _)| x).collect();
            if r != r0 {
                return Err(ReportError::Incomparable(format!(
                    "scheduler `{sched}` has runs with mismatched evaluation rounds"
                )));
            }
        }
        match &rounds {
            None => rounds = Some(r0.clone()),
            Some(existing) => {
                if *existing != r0 {
                    return Err(ReportError::Incomparable(
                        "schedulers report different evaluation rounds".into(),
                    ));
                }
            }
        }
        let n = per_seed.len() as f64;
        let mut mean_row = Vec::with_capacity(r0.len());
        let mut std_row = Vec::with_capacity(r0.len());
        for i in 0..r0.len() {
            let vals: Vec<f64> = per_seed.iter().map(|s| s[i].1).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let std = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            mean_row.push(mean);
            std_row.push(std);
        }
        means.push(mean_row);
        stds.push(std_row);
    }
    Ok(MetricTable {
        schedulers: schedulers.to_vec(),
        rounds: rounds.unwrap_or_default(),
        means,
        stds,
    })
}
