//! Training quality under churn: a run with ~20% combined per-round churn
//! (departures plus transient upload failures, with replacement joins) must
//! land within 15% of the zero-churn run's final loss.

use sparseloco::config::RunConfig;
use sparseloco::optimizer::LrSchedule;
use sparseloco::swarm::Swarm;
use sparseloco::tasks::TaskKind;

fn config(churned: bool) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.run.seed = 21;
    cfg.task.kind = TaskKind::Logistic;
    cfg.task.dim = 64;
    cfg.task.examples_per_shard = 256;
    cfg.peers.initial = 12;
    cfg.peers.batch_size = 16;
    cfg.optimizer.h = 30;
    cfg.gauntlet.cap = 12;
    cfg.schedule = LrSchedule {
        warmup_steps: 200,
        peak: 1e-2,
        floor: 5e-4,
        flatten_start: 3000,
        flatten_len: 600,
        total_steps: 6000,
        anneal: None,
    };
    cfg.run.rounds = 200;
    if churned {
        cfg.churn.p_leave = 0.05;
        cfg.churn.join_rate = 0.6; // stationary mean matches the roster size
        cfg.churn.miss_rate = 0.15;
    } else {
        cfg.churn.p_leave = 0.0;
        cfg.churn.join_rate = 0.0;
        cfg.churn.miss_rate = 0.0;
    }
    cfg
}

fn final_loss(cfg: RunConfig) -> f64 {
    let mut swarm = Swarm::new(cfg).unwrap();
    let mut last = f64::NAN;
    for _ in 0..200 {
        swarm.churn_step().unwrap();
        let (log, _) = swarm.run_round().unwrap();
        last = log.train_loss;
    }
    last
}

#[test]
fn churned_run_stays_within_15_percent_of_stable_run() {
    let stable = final_loss(config(false));
    let churned = final_loss(config(true));
    let ratio = churned / stable;
    assert!(
        (1.0 / 1.15..=1.15).contains(&ratio),
        "churned {churned:.5} vs stable {stable:.5} (ratio {ratio:.3})"
    );
}
