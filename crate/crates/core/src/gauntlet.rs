//! The validator: scores submissions, runs fast checks, maintains a
//! persistent skill rating per peer, and selects each round's contributors.
//!
//! The main signal is the loss improvement a submission produces on the
//! peer's assigned data versus on data it was never assigned; improving
//! unassigned data more is the copier signature and vetoes the peer for the
//! round. A persistent (mu, sigma) rating smooths per-round randomness, and
//! selection takes the highest conservative scores `mu - 2 sigma` up to the
//! contributor cap.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::codec::{decode_delta, ChunkPlan, CompressedDelta};
use crate::error::{Error, Result};
use crate::params::{ParamVector, PeerId};
use crate::tasks::{Batch, Task};

/// Fast per-submission checks; a failed flag vetoes selection for the round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FastCheck {
    /// No submission arrived inside the round window.
    Liveness,
    /// Wrong base round or layout digest (or an unparseable payload).
    Sync,
    /// Non-finite decoded values.
    Finite,
    /// Decoded norm more than `norm_factor` times the median of recent norms.
    NormSane,
}

pub type FailedChecks = BTreeSet<FastCheck>;

/// Persistent skill rating: location and uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub mu: f64,
    pub sigma: f64,
}

impl Rating {
    /// Score used for selection; prefers proven contributors under
    /// uncertainty.
    pub fn conservative(&self) -> f64 {
        self.mu - 2.0 * self.sigma
    }
}

/// Per-peer evaluation record for one round plus the persistent rating.
#[derive(Debug, Clone)]
pub struct ScoreCard {
    pub peer: PeerId,
    pub loss_score_assigned: Option<f64>,
    pub loss_score_random: Option<f64>,
    pub failed_checks: FailedChecks,
    pub rating: Rating,
    pub last_evaluated_round: Option<u64>,
}

impl ScoreCard {
    pub fn new(peer: PeerId, cfg: &GauntletConfig) -> Self {
        ScoreCard {
            peer,
            loss_score_assigned: None,
            loss_score_random: None,
            failed_checks: FailedChecks::new(),
            rating: Rating {
                mu: cfg.initial_mu,
                sigma: cfg.initial_sigma,
            },
            last_evaluated_round: None,
        }
    }

    /// Clears the per-round fields; the rating persists.
    pub fn reset_round(&mut self) {
        self.loss_score_assigned = None;
        self.loss_score_random = None;
        self.failed_checks.clear();
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GauntletConfig {
    /// Max contributors aggregated per round.
    pub cap: usize,
    /// Fraction of active peers evaluated per round.
    pub eval_fraction: f64,
    /// Batches per evaluation side (assigned and random).
    pub eval_batches: usize,
    pub eval_batch_size: usize,
    pub initial_mu: f64,
    pub initial_sigma: f64,
    pub sigma_min: f64,
    /// Multiplicative shrink applied to sigma on each observation.
    pub sigma_shrink: f64,
    /// Additive growth per unevaluated round, capped at `sigma_max`.
    pub sigma_growth: f64,
    pub sigma_max: f64,
    /// Gain scale: mu moves by `sigma^2 / (sigma^2 + gain_noise^2)` of the
    /// gap to the rank target.
    pub gain_noise: f64,
    /// Spread of the rank-target ladder around the field's mean mu.
    pub rank_spread: f64,
    /// Rolling window of submission norms kept for the norm-sane check.
    pub norm_window: usize,
    /// Norm-sane threshold: decoded norm > factor * median of recent norms.
    pub norm_factor: f64,
}

impl Default for GauntletConfig {
    fn default() -> Self {
        GauntletConfig {
            cap: 20,
            eval_fraction: 0.5,
            eval_batches: 2,
            eval_batch_size: 512,
            initial_mu: 25.0,
            initial_sigma: 25.0 / 3.0,
            sigma_min: 0.5,
            sigma_shrink: 0.9,
            sigma_growth: 0.02,
            sigma_max: 25.0 / 3.0,
            gain_noise: 25.0 / 6.0,
            rank_spread: 25.0 / 3.0,
            norm_window: 100,
            norm_factor: 10.0,
        }
    }
}

impl GauntletConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cap == 0 {
            return Err(Error::Config("gauntlet.cap: must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eval_fraction) {
            return Err(Error::Config(format!(
                "gauntlet.eval_fraction: must be in [0, 1], got {}",
                self.eval_fraction
            )));
        }
        if self.eval_batches == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config(
                "gauntlet.eval_batches / eval_batch_size: must be >= 1".into(),
            ));
        }
        if self.sigma_min <= 0.0 || self.initial_sigma < self.sigma_min {
            return Err(Error::Config(
                "gauntlet: require 0 < sigma_min <= initial_sigma".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.sigma_shrink) {
            return Err(Error::Config(
                "gauntlet.sigma_shrink: must be in [0, 1)".into(),
            ));
        }
        if self.norm_factor <= 1.0 {
            return Err(Error::Config("gauntlet.norm_factor: must be > 1".into()));
        }
        Ok(())
    }
}

/// Loss improvement from applying one submission:
/// `L(theta) - L(theta - alpha * decode(submission))`. Positive means the
/// contribution helps on this batch.
pub fn loss_score(
    task: &Task,
    global: &ParamVector,
    submission: &CompressedDelta,
    plan: &ChunkPlan,
    batch: &Batch,
    alpha: f64,
) -> Result<f64> {
    let decoded = decode_delta(submission, plan)
        .map_err(|e| Error::InvalidData(format!("invalid submission: {e}")))?;
    let before = task.loss(global, batch)?;
    let mut stepped = global.clone();
    for (p, d) in stepped.values_mut().iter_mut().zip(&decoded) {
        *p -= alpha * d;
    }
    let after = task.loss(&stepped, batch)?;
    Ok(before - after)
}

/// Copier check: fail when the submission improved random data strictly more
/// than assigned data. `None` when the peer was not evaluated this round.
pub fn assigned_vs_random_check(card: &ScoreCard) -> Option<bool> {
    match (card.loss_score_assigned, card.loss_score_random) {
        (Some(assigned), Some(random)) => Some(random <= assigned),
        _ => None,
    }
}

/// Inputs the fast checks need about one peer's submission this round.
pub struct FastCheckInput<'a> {
    /// None when no submission arrived in the round window.
    pub submission: Option<&'a CompressedDelta>,
    /// Dense decode of the submission, when it parsed.
    pub decoded: Option<&'a [f64]>,
    /// True when the payload failed to parse at all.
    pub parse_failed: bool,
}

/// Runs the liveness / sync / finite / norm-sane checks; returns the set of
/// FAILED flags (empty = all good).
pub fn fast_checks(
    input: &FastCheckInput<'_>,
    current_round: u64,
    expected_layout_digest: [u8; 32],
    norm_history: &[f64],
    cfg: &GauntletConfig,
) -> FailedChecks {
    let mut failed = FailedChecks::new();
    let Some(submission) = input.submission else {
        failed.insert(FastCheck::Liveness);
        return failed;
    };
    if input.parse_failed {
        // Garbage bytes count as desynchronized with the run.
        failed.insert(FastCheck::Sync);
        return failed;
    }
    if submission.base_round != current_round || submission.layout_digest != expected_layout_digest
    {
        failed.insert(FastCheck::Sync);
    }
    if let Some(decoded) = input.decoded {
        if decoded.iter().any(|v| !v.is_finite()) {
            failed.insert(FastCheck::Finite);
        } else if !norm_history.is_empty() {
            let mut sorted = norm_history.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = sorted[(sorted.len() - 1) / 2];
            let norm = libm::sqrt(decoded.iter().map(|v| v * v).sum());
            if norm > cfg.norm_factor * median {
                failed.insert(FastCheck::NormSane);
            }
        }
    }
    failed
}

/// Ordinal rating update over this round's evaluated peers.
///
/// Peers are ranked by assigned loss score descending; each rating moves
/// toward a rank-ladder target with a gain proportional to sigma^2, sigma
/// shrinks multiplicatively per observation (floored at sigma_min), and
/// every unevaluated card's sigma grows additively (capped at sigma_max).
pub fn rating_update(
    cards: &mut BTreeMap<PeerId, ScoreCard>,
    evaluated: &[PeerId],
    cfg: &GauntletConfig,
    round: u64,
) {
    let evaluated: Vec<PeerId> = evaluated
        .iter()
        .copied()
        .filter(|p| {
            cards
                .get(p)
                .is_some_and(|c| c.loss_score_assigned.is_some())
        })
        .collect();
    if evaluated.len() >= 2 {
        let mut ranked = evaluated.clone();
        ranked.sort_by(|a, b| {
            let sa = cards[a].loss_score_assigned.unwrap();
            let sb = cards[b].loss_score_assigned.unwrap();
            sb.partial_cmp(&sa).unwrap().then(a.cmp(b))
        });
        let mean_mu: f64 =
            ranked.iter().map(|p| cards[p].rating.mu).sum::<f64>() / ranked.len() as f64;
        let n = ranked.len() as f64;
        for (rank, peer) in ranked.iter().enumerate() {
            // Rank ladder in [-1, 1]: best rank maps to +1.
            let z = if ranked.len() == 1 {
                0.0
            } else {
                ((n - 1.0) / 2.0 - rank as f64) / ((n - 1.0) / 2.0)
            };
            let target = mean_mu + cfg.rank_spread * z;
            let card = cards.get_mut(peer).unwrap();
            let var = card.rating.sigma * card.rating.sigma;
            let gain = var / (var + cfg.gain_noise * cfg.gain_noise);
            card.rating.mu += gain * (target - card.rating.mu);
            card.rating.sigma = (card.rating.sigma * cfg.sigma_shrink).max(cfg.sigma_min);
            card.last_evaluated_round = Some(round);
        }
    }
    for card in cards.values_mut() {
        if card.last_evaluated_round != Some(round) {
            card.rating.sigma = (card.rating.sigma + cfg.sigma_growth).min(cfg.sigma_max);
        }
    }
}

/// Picks up to `cap` contributors: highest conservative rating first, with
/// any peer failing a fast check or the assigned-vs-random check excluded
/// outright. Ties break by peer id.
pub fn select_contributors(cards: &BTreeMap<PeerId, ScoreCard>, cap: usize) -> Vec<PeerId> {
    let mut eligible: Vec<&ScoreCard> = cards
        .values()
        .filter(|c| c.failed_checks.is_empty() && assigned_vs_random_check(c) != Some(false))
        .collect();
    eligible.sort_by(|a, b| {
        b.rating
            .conservative()
            .partial_cmp(&a.rating.conservative())
            .unwrap()
            .then(a.peer.cmp(&b.peer))
    });
    eligible.iter().take(cap).map(|c| c.peer).collect()
}

/// One line of the validator's JSONL stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidatorRecord {
    pub round: u64,
    pub evaluated: Vec<String>,
    pub scores: Vec<PeerScore>,
    pub failed: Vec<PeerFlags>,
    pub selected: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeerScore {
    pub peer: String,
    pub assigned: f64,
    pub random: f64,
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeerFlags {
    pub peer: String,
    pub flags: Vec<FastCheck>,
}
