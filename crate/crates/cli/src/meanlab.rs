use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use mapoca_core::meanlab::{train_run, Curve, MeanTask, MeanlabConfig, ModelKind, StudyRun};
use mapoca_core::stats::summarize;
use serde::{Deserialize, Serialize};

use crate::output::run_parallel;
use crate::Failure;

/// Padding values of the absorbing-state ablation.
pub const ABLATION_ABS: [f64; 4] = [0.0, 1.0, -1.0, 0.4];

/// The main grid, plus the fully connected ablations when asked: every
/// ablation padding value and the fixed-count variant, per range.
pub fn plan(cfg: &MeanlabConfig, ablations: bool) -> Vec<StudyRun> {
    let mut runs = cfg.runs();
    if ablations {
        let mut extra = Vec::new();
        for &range in &cfg.ranges {
            let base = cfg.task(range);
            for o_abs in ABLATION_ABS {
                // 0.4 is the deliberate partially observable case
                extra.push(MeanTask {
                    o_abs,
                    allow_ambiguous_abs: true,
                    ..base
                });
            }
            extra.push(MeanTask {
                fixed_count: true,
                ..base
            });
        }
        for task in extra {
            for seed in 0..cfg.seeds as u64 {
                let r = StudyRun {
                    model: ModelKind::Fc,
                    task,
                    seed,
                };
                if !runs.iter().any(|x| x.label() == r.label() && x.seed == seed) {
                    runs.push(r);
                }
            }
        }
    }
    runs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub config: String,
    pub step: usize,
    pub n: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub fn run_path(dir: &Path, run: &StudyRun) -> PathBuf {
    dir.join(format!("{}_seed{}.csv", run.label(), run.seed))
}

/// Runs every planned run, writing one CSV each and the aggregate.
pub fn execute(
    cfg: &MeanlabConfig,
    runs: &[StudyRun],
    dir: &Path,
    jobs: usize,
    quiet: bool,
) -> Result<Vec<(StudyRun, Curve)>, Failure> {
    std::fs::create_dir_all(dir).map_err(Failure::io)?;
    let results = run_parallel(runs, jobs, |run| -> Result<Curve, Failure> {
        let curve = train_run(run, cfg).map_err(|e| Failure::Config(e.to_string()))?;
        if curve.iter().any(|(_, m)| !m.is_finite()) {
            return Err(Failure::Numerical(format!("{} seed {}: non-finite mse", run.label(), run.seed)));
        }
        let mut w = csv::Writer::from_writer(File::create(run_path(dir, run)).map_err(Failure::io)?);
        for &(step, mse) in &curve {
            w.serialize(CurveRow { step, mse }).map_err(|e| Failure::io(e.into()))?;
        }
        w.flush().map_err(Failure::io)?;
        if !quiet {
            let last = curve.last().map_or(f64::NAN, |c| c.1);
            eprintln!("{} seed {} final mse {last:.6}", run.label(), run.seed);
        }
        Ok(curve)
    });
    let mut out = Vec::with_capacity(runs.len());
    for (run, r) in runs.iter().zip(results) {
        out.push((*run, r?));
    }
    let agg = aggregate(&out);
    let mut w = csv::Writer::from_writer(File::create(dir.join("aggregate.csv")).map_err(Failure::io)?);
    for row in &agg {
        w.serialize(row).map_err(|e| Failure::io(e.into()))?;
    }
    w.flush().map_err(Failure::io)?;
    Ok(out)
}

/// Mean and 95% interval across seeds for every (configuration, step).
pub fn aggregate(results: &[(StudyRun, Curve)]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for (run, curve) in results {
        for &(step, mse) in curve {
            groups.entry((run.label(), step)).or_default().push(mse);
        }
    }
    groups
        .into_iter()
        .filter_map(|((config, step), xs)| {
            summarize(&xs).map(|s| AggregateRow {
                config,
                step,
                n: s.n,
                mean: s.mean,
                ci_low: s.low(),
                ci_high: s.high(),
            })
        })
        .collect()
}
