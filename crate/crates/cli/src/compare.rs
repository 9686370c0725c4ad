use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use mapoca_core::stats::{mean, summarize};
use mapoca_core::trainer::{final_window_reward, read_metrics, steps_to_threshold, MetricsRow};
use serde::Serialize;

use crate::output::Metadata;
use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub env: String,
    pub algorithm: String,
    pub runs: usize,
    pub final_mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Set when a single run makes the interval meaningless.
    pub single_run: bool,
    pub reached_threshold: usize,
    pub mean_steps_to_threshold: Option<f64>,
}

pub struct TrainRun {
    pub env: String,
    pub algorithm: String,
    pub rows: Vec<MetricsRow>,
}

fn find_runs(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            find_runs(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "metadata.json") && p.with_file_name("metrics.csv").exists() {
            out.push(p);
        }
    }
    Ok(())
}

/// Every completed training run below `dirs`.
pub fn load_runs(dirs: &[PathBuf]) -> Result<Vec<TrainRun>, Failure> {
    let mut found = Vec::new();
    for d in dirs {
        find_runs(d, &mut found).map_err(Failure::io)?;
    }
    let mut runs = Vec::new();
    for meta_path in found {
        let meta = Metadata::read(&meta_path).map_err(Failure::io)?;
        if meta.command != "train" || meta.status != "ok" {
            continue;
        }
        let rows = read_metrics(File::open(meta_path.with_file_name("metrics.csv")).map_err(Failure::io)?)
            .map_err(|e| Failure::io(e.into()))?;
        let get = |k: &str| meta.config.get(k).cloned().unwrap_or_default();
        runs.push(TrainRun {
            env: get("env"),
            algorithm: get("algorithm"),
            rows,
        });
    }
    Ok(runs)
}

pub fn compare(runs: &[TrainRun], window: f64, threshold: Option<f64>) -> Result<Vec<CompareRow>, Failure> {
    if runs.is_empty() {
        return Err(Failure::Config("no completed training runs found".into()));
    }
    let mut groups: BTreeMap<(String, String), Vec<&TrainRun>> = BTreeMap::new();
    for r in runs {
        groups.entry((r.env.clone(), r.algorithm.clone())).or_default().push(r);
    }
    let mut out = Vec::new();
    for ((env, algorithm), members) in groups {
        let finals: Vec<f64> = members
            .iter()
            .filter_map(|r| final_window_reward(&r.rows, window))
            .collect();
        let Some(s) = summarize(&finals) else { continue };
        let reached: Vec<f64> = threshold
            .map(|t| {
                members
                    .iter()
                    .filter_map(|r| steps_to_threshold(&r.rows, t))
                    .map(|s| s as f64)
                    .collect()
            })
            .unwrap_or_default();
        out.push(CompareRow {
            env,
            algorithm,
            runs: s.n,
            final_mean: s.mean,
            ci_low: s.low(),
            ci_high: s.high(),
            single_run: s.degenerate(),
            reached_threshold: reached.len(),
            mean_steps_to_threshold: (!reached.is_empty()).then(|| mean(&reached)),
        });
    }
    Ok(out)
}

pub fn write_table<W: std::io::Write>(out: W, rows: &[CompareRow]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Failure::io(e.into()))?;
    }
    w.flush().map_err(Failure::io)
}
