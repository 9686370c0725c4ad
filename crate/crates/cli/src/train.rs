use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mapoca_core::config::{Resolved, RunConfig};
use mapoca_core::trainer::{MetricsRow, TrainError, Trainer, METRICS_HEADER};

use crate::output::{code_version, Metadata};
use crate::Failure;

pub fn run_dir(root: &Path, cfg: &RunConfig) -> PathBuf {
    root.join(format!("{}_{}_seed{}", cfg.algorithm.name(), cfg.env.name(), cfg.seed))
}

/// Trains one configuration, streaming metrics to `<dir>/metrics.csv`.
pub fn train_one(resolved: &Resolved, root: &Path, quiet: bool) -> Result<PathBuf, Failure> {
    let cfg = &resolved.config;
    let dir = run_dir(root, cfg);
    std::fs::create_dir_all(&dir).map_err(Failure::io)?;
    let started = Instant::now();
    let csv_path = dir.join("metrics.csv");
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(File::create(&csv_path).map_err(Failure::io)?);
    writer
        .write_record(METRICS_HEADER)
        .map_err(|e| Failure::io(e.into()))?;
    writer.flush().map_err(Failure::io)?;

    let tag = format!("{}/{}/seed{}", cfg.algorithm.name(), cfg.env.name(), cfg.seed);
    let mut sink_err = None;
    let outcome = Trainer::<f64>::new(cfg.setup(), cfg.env.build()).and_then(|mut t| {
        t.run(|row: &MetricsRow| {
            if sink_err.is_none() {
                let res = writer.serialize(row).and_then(|_| writer.flush().map_err(Into::into));
                if let Err(e) = res {
                    sink_err = Some(e);
                }
            }
            if !quiet {
                eprintln!(
                    "{tag} step {} episodes {} reward {:.4} entropy {:.3}",
                    row.step, row.episodes, row.mean_episode_reward, row.entropy
                );
            }
        })
    });
    if let Some(e) = sink_err {
        return Err(Failure::io(e.into()));
    }
    let status = match &outcome {
        Ok(_) => "ok".to_string(),
        Err(e) => format!("error: {e}"),
    };
    let meta = Metadata {
        command: "train".into(),
        seed: cfg.seed,
        config: cfg.to_entries().into_iter().collect(),
        provenance: resolved
            .provenance
            .iter()
            .map(|(k, v)| (k.clone(), v.as_str().to_string()))
            .collect(),
        wall_time_secs: started.elapsed().as_secs_f64(),
        code_version: code_version(),
        status,
    };
    meta.write(&dir.join("metadata.json")).map_err(Failure::io)?;
    match outcome {
        Ok(_) => Ok(csv_path),
        Err(e @ TrainError::NonFinite { .. }) => Err(Failure::Numerical(format!("{tag}: {e}"))),
        Err(e) => Err(Failure::Environment(format!("{tag}: {e}"))),
    }
}


pub fn print_paths(paths: &[PathBuf]) {
    let mut out = std::io::stdout().lock();
    for p in paths {
        let _ = writeln!(out, "{}", p.display());
    }
}
