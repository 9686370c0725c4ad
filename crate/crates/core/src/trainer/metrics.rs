use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

pub const METRICS_HEADER: [&str; 9] = [
    "step",
    "episodes",
    "mean_episode_reward",
    "mean_episode_length",
    "value_loss",
    "baseline_loss",
    "policy_loss",
    "entropy",
    "mean_active_agents",
];

/// One row per update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Environment steps so far.
    pub step: u64,
    /// Completed episodes so far.
    pub episodes: u64,
    /// Over episodes finished in this update's collection; carried forward
    /// when none finished.
    pub mean_episode_reward: f64,
    pub mean_episode_length: f64,
    pub value_loss: f64,
    pub baseline_loss: f64,
    pub policy_loss: f64,
    pub entropy: f64,
    pub mean_active_agents: f64,
}

impl MetricsRow {
    pub fn named_values(&self) -> [(&'static str, f64); 7] {
        [
            ("mean_episode_reward", self.mean_episode_reward),
            ("mean_episode_length", self.mean_episode_length),
            ("value_loss", self.value_loss),
            ("baseline_loss", self.baseline_loss),
            ("policy_loss", self.policy_loss),
            ("entropy", self.entropy),
            ("mean_active_agents", self.mean_active_agents),
        ]
    }
}

pub fn write_metrics<W: Write>(out: W, rows: &[MetricsRow]) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics<R: Read>(input: R) -> csv::Result<Vec<MetricsRow>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

/// Mean episode reward over rows with `from < step <= to`.
pub fn reward_between(rows: &[MetricsRow], from: u64, to: u64) -> Option<f64> {
    let xs: Vec<f64> = rows
        .iter()
        .filter(|r| r.step > from && r.step <= to)
        .map(|r| r.mean_episode_reward)
        .collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Mean episode reward over the last `fraction` of training, measured in
/// steps; the final row alone when the window holds no rows.
pub fn final_window_reward(rows: &[MetricsRow], fraction: f64) -> Option<f64> {
    let last = rows.last()?.step;
    let from = (last as f64 * (1.0 - fraction)).floor() as u64;
    reward_between(rows, from, last)
}

/// First step at which the mean episode reward reached `threshold`.
pub fn steps_to_threshold(rows: &[MetricsRow], threshold: f64) -> Option<u64> {
    rows.iter().find(|r| r.mean_episode_reward >= threshold).map(|r| r.step)
}
