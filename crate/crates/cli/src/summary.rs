//! Run summary: derived from the logs, reproducible by `report`.

use serde::{Deserialize, Serialize};

use sparseloco::config::RunConfig;
use sparseloco::swarm::RoundLog;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub rounds: u64,
    pub stalled_rounds: u64,
    pub final_train_loss: f64,
    pub mean_active_peers: f64,
    pub mean_contributing_peers: f64,
    pub mean_utilization: f64,
    pub total_payload_bytes_up: u64,
    pub measured_compression_ratio: f64,
    pub seed: u64,
    pub config_digest: String,
}

/// Rebuilds the summary from round logs plus the run configuration; the
/// logs alone carry everything except the dense baseline (element count and
/// bits per value), which the config pins.
pub fn from_logs(logs: &[RoundLog], cfg: &RunConfig) -> Summary {
    let n = logs.len().max(1) as f64;
    let elements = task_element_count(cfg);
    let total_up: u64 = logs.iter().map(|l| l.payload_bytes_up).sum();
    let total_submissions: u64 = logs.iter().map(|l| l.submissions as u64).sum();
    let dense_bits = total_submissions as f64 * elements as f64 * cfg.geometry.dense_bits as f64;
    let measured_ratio = if total_up > 0 {
        dense_bits / (total_up as f64 * 8.0)
    } else {
        0.0
    };
    Summary {
        rounds: logs.len() as u64,
        stalled_rounds: logs.iter().filter(|l| l.stalled).count() as u64,
        final_train_loss: logs.last().map_or(f64::NAN, |l| l.train_loss),
        mean_active_peers: logs.iter().map(|l| l.active_peers as f64).sum::<f64>() / n,
        mean_contributing_peers: logs
            .iter()
            .map(|l| l.contributing_peers as f64)
            .sum::<f64>()
            / n,
        mean_utilization: logs.iter().map(|l| l.utilization).sum::<f64>() / n,
        total_payload_bytes_up: total_up,
        measured_compression_ratio: measured_ratio,
        seed: cfg.run.seed,
        config_digest: cfg.digest_hex(),
    }
}

fn task_element_count(cfg: &RunConfig) -> usize {
    sparseloco::tasks::Task::new(cfg.task.clone(), cfg.run.seed)
        .map(|t| t.layout().element_count())
        .unwrap_or(0)
}
