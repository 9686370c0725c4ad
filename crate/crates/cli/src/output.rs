use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

pub const OUTPUT_ENV: &str = "MAPOCA_OUTPUT_DIR";

/// `--out`, then the config's `output_dir`, then `$MAPOCA_OUTPUT_DIR`,
/// then `./runs`.
pub fn output_root(flag: Option<&Path>, configured: Option<&str>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| configured.map(PathBuf::from))
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Written next to every run's CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub command: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    /// `default` or `user` per key.
    pub provenance: BTreeMap<String, String>,
    pub wall_time_secs: f64,
    pub code_version: String,
    pub status: String,
}

impl Metadata {
    pub fn read(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text + "\n")
    }
}

pub fn code_version() -> String {
    format!("mapoca {}", env!("CARGO_PKG_VERSION"))
}

/// Runs `task` over `items` on up to `jobs` threads. Results come back in
/// input order.
pub fn run_parallel<T: Sync, R: Send>(items: &[T], jobs: usize, task: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = task(&items[i]);
                results.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every item ran"))
        .collect()
}
