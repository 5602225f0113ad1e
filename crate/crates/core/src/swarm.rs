//! Deterministic multi-peer round simulator.
//!
//! Each round: every active peer runs H inner steps from the shared model,
//! compresses its pseudo-gradient with error feedback, and uploads the
//! serialized bytes to a shared blob store; the validator parses, checks, and
//! scores submissions, then selects up to the cap; every peer independently
//! downloads the selected set, median-normalizes, aggregates, and applies the
//! outer step, landing on a bitwise-identical model. Churn (joins/leaves) and
//! a logical timing model round out the picture.

use std::collections::{BTreeMap, VecDeque};
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::codec::{decode_delta, deserialize, serialize, ChunkPlan, CompressedDelta};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gauntlet::{
    fast_checks, loss_score, rating_update, select_contributors, FastCheckInput, PeerFlags,
    PeerScore, ScoreCard, ValidatorRecord,
};
use crate::optimizer::{
    compress_with_ef, inner_lr_at, inner_step, mean_dense, median_normalize, outer_step,
    pseudo_gradient, ErrorFeedback, InnerOptState,
};
use crate::params::{digest_hex, ParamVector, PeerId};
use crate::rng::Stream;
use crate::tasks::{assign_shards, Batch, Shard, Task, VALIDATOR_SHARD_BASE};

// ---------------------------------------------------------------------------
// Timing
// ---------------------------------------------------------------------------

/// Logical per-round timing: fixed compute window plus a bandwidth model for
/// the communication phase.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TimingModel {
    pub t_compute_s: f64,
    pub uplink_bps: f64,
    pub downlink_bps: f64,
    pub fixed_overhead_s: f64,
}

impl TimingModel {
    pub fn from_section(s: &crate::config::TimingSection) -> Self {
        TimingModel {
            t_compute_s: s.t_compute_s,
            uplink_bps: s.uplink_mbps * 1e6,
            downlink_bps: s.downlink_mbps * 1e6,
            fixed_overhead_s: s.fixed_overhead_s,
        }
    }
}

/// Communication time and compute utilization for one round's payloads.
///
/// `t_comm = up*8/uplink + down*8/downlink + overhead`;
/// `utilization = t_compute / (t_compute + t_comm)`.
pub fn simulate_timing(
    payload_bytes_up: f64,
    payload_bytes_down: f64,
    model: &TimingModel,
) -> (f64, f64) {
    let t_comm = payload_bytes_up * 8.0 / model.uplink_bps
        + payload_bytes_down * 8.0 / model.downlink_bps
        + model.fixed_overhead_s;
    let utilization = model.t_compute_s / (model.t_compute_s + t_comm);
    (t_comm, utilization)
}

/// Reference timing presets for the published comparison points. Observed
/// communication times are carried as fixed overhead because the underlying
/// runs report t_comm directly rather than payload arithmetic.
pub fn timing_preset(name: &str) -> Option<(TimingModel, f64, f64)> {
    let model = |t_compute_s: f64, t_comm_s: f64| TimingModel {
        t_compute_s,
        uplink_bps: 110e6,
        downlink_bps: 500e6,
        fixed_overhead_s: t_comm_s,
    };
    match name {
        // 20-minute compute window, 70 s average communication.
        "default" | "72b" => Some((model(1200.0, 70.0), 0.0, 0.0)),
        // 38-minute compute window, 8.3-minute synchronization.
        "intellect1" => Some((model(38.0 * 60.0, 8.3 * 60.0), 0.0, 0.0)),
        // 4.5-minute compute window, 12 s communication.
        "sparseloco-8b" => Some((model(4.5 * 60.0, 12.0), 0.0, 0.0)),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Blob store
// ---------------------------------------------------------------------------

/// Object keys: one submission per (round, peer), one checkpoint per round,
/// plus hosted data shards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ObjectKey {
    Submission { round: u64, peer: PeerId },
    Checkpoint { round: u64 },
    Shard { id: u64 },
}

impl ObjectKey {
    /// Stable string form; doubles as the relative file path for the
    /// directory backend.
    pub fn to_path(&self) -> String {
        match self {
            ObjectKey::Submission { round, peer } => {
                format!("r{round:08}/sub-{}", peer.to_hex())
            }
            ObjectKey::Checkpoint { round } => format!("r{round:08}/checkpoint"),
            ObjectKey::Shard { id } => format!("shards/{id:016x}"),
        }
    }
}

enum Backend {
    Memory(BTreeMap<ObjectKey, Vec<u8>>),
    Dir(PathBuf),
}

/// Write-once object store with byte counters; objects are immutable and
/// reads return exactly the written bytes.
pub struct BlobStore {
    backend: Backend,
    keys: std::collections::BTreeSet<ObjectKey>,
    bytes_written: u64,
    bytes_read: u64,
}

impl BlobStore {
    pub fn in_memory() -> Self {
        BlobStore {
            backend: Backend::Memory(BTreeMap::new()),
            keys: Default::default(),
            bytes_written: 0,
            bytes_read: 0,
        }
    }

    pub fn in_dir(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        std::fs::create_dir_all(&path)?;
        Ok(BlobStore {
            backend: Backend::Dir(path),
            keys: Default::default(),
            bytes_written: 0,
            bytes_read: 0,
        })
    }

    pub fn put(&mut self, key: ObjectKey, bytes: Vec<u8>) -> Result<()> {
        if self.keys.contains(&key) {
            return Err(Error::AlreadyExists(key.to_path()));
        }
        self.bytes_written += bytes.len() as u64;
        match &mut self.backend {
            Backend::Memory(map) => {
                map.insert(key, bytes);
            }
            Backend::Dir(root) => {
                let path = root.join(key.to_path());
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                std::fs::write(path, bytes)?;
            }
        }
        self.keys.insert(key);
        Ok(())
    }

    pub fn get(&mut self, key: ObjectKey) -> Result<Vec<u8>> {
        if !self.keys.contains(&key) {
            return Err(Error::NotFound(key.to_path()));
        }
        let bytes = match &self.backend {
            Backend::Memory(map) => map[&key].clone(),
            Backend::Dir(root) => std::fs::read(root.join(key.to_path()))?,
        };
        self.bytes_read += bytes.len() as u64;
        Ok(bytes)
    }

    pub fn contains(&self, key: ObjectKey) -> bool {
        self.keys.contains(&key)
    }

    /// Keys of one round, in order.
    pub fn list_round(&self, round: u64) -> Vec<ObjectKey> {
        self.keys
            .iter()
            .filter(|k| matches!(k, ObjectKey::Submission { round: r, .. } | ObjectKey::Checkpoint { round: r } if *r == round))
            .copied()
            .collect()
    }

    pub fn bytes_written(&self) -> u64 {
        self.bytes_written
    }

    pub fn bytes_read(&self) -> u64 {
        self.bytes_read
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: [u8; 4] = *b"SLCK";

/// Checkpoint record: round index, config digest, and the full parameter
/// state, CRC-protected.
pub fn encode_checkpoint(round: u64, config_digest: [u8; 32], params: &ParamVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(85 + params.len() * 8);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.push(1);
    out.extend_from_slice(&round.to_be_bytes());
    out.extend_from_slice(&config_digest);
    out.extend_from_slice(&params.layout().digest());
    out.extend_from_slice(&(params.len() as u64).to_be_bytes());
    for v in params.values() {
        out.extend_from_slice(&v.to_bits().to_be_bytes());
    }
    let crc = crate::codec::crc32(&out);
    out.extend_from_slice(&crc.to_be_bytes());
    out
}

pub fn decode_checkpoint(
    bytes: &[u8],
    layout: &Arc<crate::params::Layout>,
) -> Result<(u64, [u8; 32], ParamVector)> {
    if bytes.len() < 89 || bytes[..4] != CHECKPOINT_MAGIC || bytes[4] != 1 {
        return Err(Error::Format("bad checkpoint header".into()));
    }
    let body = &bytes[..bytes.len() - 4];
    let crc = u32::from_be_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crate::codec::crc32(body) != crc {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }
    let round = u64::from_be_bytes(bytes[5..13].try_into().unwrap());
    let config_digest: [u8; 32] = bytes[13..45].try_into().unwrap();
    let layout_digest: [u8; 32] = bytes[45..77].try_into().unwrap();
    if layout_digest != layout.digest() {
        return Err(Error::InvalidData("checkpoint layout mismatch".into()));
    }
    let count = u64::from_be_bytes(bytes[77..85].try_into().unwrap()) as usize;
    if count != layout.element_count() || bytes.len() != 89 + count * 8 {
        return Err(Error::Format("checkpoint length mismatch".into()));
    }
    let values: Vec<f64> = bytes[85..bytes.len() - 4]
        .chunks_exact(8)
        .map(|c| f64::from_bits(u64::from_be_bytes(c.try_into().unwrap())))
        .collect();
    Ok((
        round,
        config_digest,
        ParamVector::new(values, layout.clone())?,
    ))
}

// ---------------------------------------------------------------------------
// Peers
// ---------------------------------------------------------------------------

/// What a peer does with its honestly computed submission.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Behavior {
    Honest,
    /// Adds Gaussian noise of this sigma to the pseudo-gradient.
    Noisy(f64),
    /// Re-uploads another peer's submission under its own id.
    Copier,
    /// Skips the upload with this probability each round.
    Dropout(f64),
}

pub struct Peer {
    pub id: PeerId,
    pub ordinal: u64,
    pub params: ParamVector,
    inner: InnerOptState,
    ef: ErrorFeedback,
    pub shard_ids: Vec<u64>,
    shards: Vec<Arc<Shard>>,
    pub behavior: Behavior,
    pub joined_round: u64,
    pending: Option<CompressedDelta>,
    compute_error: Option<String>,
}

/// Per-round record emitted to the round log (JSONL).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: u64,
    pub active_peers: usize,
    pub contributing_peers: usize,
    pub selected_ids: Vec<String>,
    pub submissions: usize,
    pub payload_bytes_up: u64,
    pub payload_bytes_down: u64,
    pub t_comm_s: f64,
    pub utilization: f64,
    pub train_loss: f64,
    pub global_param_digest: String,
    pub stalled: bool,
}

struct Validator {
    cards: BTreeMap<PeerId, ScoreCard>,
    norm_history: VecDeque<f64>,
    pool: Vec<Arc<Shard>>,
    train_eval_batch: Batch,
}

// ---------------------------------------------------------------------------
// Swarm
// ---------------------------------------------------------------------------

pub struct Swarm {
    cfg: RunConfig,
    task: Task,
    plan: Arc<ChunkPlan>,
    timing: TimingModel,
    global: ParamVector,
    peers: Vec<Peer>,
    validator: Validator,
    store: BlobStore,
    round: u64,
    next_ordinal: u64,
    latest_checkpoint: u64,
}

impl Swarm {
    pub fn new(cfg: RunConfig) -> Result<Swarm> {
        Self::with_store(cfg, BlobStore::in_memory())
    }

    pub fn with_store(cfg: RunConfig, mut store: BlobStore) -> Result<Swarm> {
        cfg.validate()?;
        let seed = cfg.run.seed;
        let task = Task::new(cfg.task.clone(), seed)?;
        let plan = Arc::new(ChunkPlan::new(task.layout(), cfg.geometry.geometry()?)?);
        let timing = TimingModel::from_section(&cfg.timing);
        let global = task.initial_params();

        let mut pool_stream = Stream::new(seed, "validator-pool");
        let pool: Vec<Arc<Shard>> = (0..16)
            .map(|i| Arc::new(task.shard(VALIDATOR_SHARD_BASE + i)))
            .collect();
        let train_eval_batch = task.draw_batch(&pool, 256, &mut pool_stream);

        // Initial checkpoint so joiners always find state to download.
        store.put(
            ObjectKey::Checkpoint { round: 0 },
            encode_checkpoint(0, digest32(&cfg.digest_hex()), &global),
        )?;

        let mut swarm = Swarm {
            validator: Validator {
                cards: BTreeMap::new(),
                norm_history: VecDeque::new(),
                pool,
                train_eval_batch,
            },
            store,
            global: global.clone(),
            plan,
            timing,
            task,
            cfg,
            peers: Vec::new(),
            round: 0,
            next_ordinal: 0,
            latest_checkpoint: 0,
        };

        let roster = swarm.cfg.peers;
        for i in 0..roster.initial {
            let behavior = if i < roster.copiers {
                Behavior::Copier
            } else if i < roster.copiers + roster.noisy {
                Behavior::Noisy(roster.noisy_sigma)
            } else if i < roster.copiers + roster.noisy + roster.dropout {
                Behavior::Dropout(roster.dropout_p)
            } else {
                Behavior::Honest
            };
            swarm.spawn_peer(behavior, global.clone())?;
        }
        Ok(swarm)
    }

    fn spawn_peer(&mut self, behavior: Behavior, params: ParamVector) -> Result<()> {
        let ordinal = self.next_ordinal;
        self.next_ordinal += 1;
        let id = PeerId::from_ordinal(self.cfg.run.seed, ordinal);
        let shard_ids = assign_shards(
            &self.cfg.task,
            self.cfg.run.seed,
            ordinal,
            self.cfg.peers.shards_per_peer,
        );
        let shards = shard_ids
            .iter()
            .map(|&sid| Arc::new(self.task.shard(sid)))
            .collect();
        let ef = ErrorFeedback::new(&params, self.cfg.optimizer.ef_beta);
        let inner = InnerOptState::new(params.len(), self.cfg.optimizer.inner_hyper());
        let peer = Peer {
            id,
            ordinal,
            params,
            inner,
            ef,
            shard_ids,
            shards,
            behavior,
            joined_round: self.round,
            pending: None,
            compute_error: None,
        };
        let pos = self
            .peers
            .binary_search_by_key(&peer.id, |p| p.id)
            .expect_err("peer ids are unique");
        self.peers.insert(pos, peer);
        Ok(())
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn global_params(&self) -> &ParamVector {
        &self.global
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn plan(&self) -> &ChunkPlan {
        &self.plan
    }

    pub fn store(&self) -> &BlobStore {
        &self.store
    }

    pub fn active_peers(&self) -> usize {
        self.peers.len()
    }

    pub fn peer_ids(&self) -> Vec<PeerId> {
        self.peers.iter().map(|p| p.id).collect()
    }

    /// Content digests of every active peer's model, in peer-id order.
    pub fn peer_param_digests(&self) -> Vec<[u8; 32]> {
        self.peers
            .iter()
            .map(|p| p.params.content_digest())
            .collect()
    }

    /// Join/leave dynamics applied between rounds. Joiners bootstrap from the
    /// latest published checkpoint and start with zero error feedback.
    pub fn churn_step(&mut self) -> Result<()> {
        let churn = self.cfg.churn;
        if churn.p_leave > 0.0 {
            let leave = Stream::new(self.cfg.run.seed, "churn-leave").with(self.round);
            self.peers
                .retain(|p| leave.with(p.ordinal).next_f64() >= churn.p_leave);
        }
        if churn.join_rate > 0.0 {
            let mut join = Stream::new(self.cfg.run.seed, "churn-join").with(self.round);
            let arrivals = join.next_poisson(churn.join_rate);
            if arrivals > 0 {
                let bytes = self.store.get(ObjectKey::Checkpoint {
                    round: self.latest_checkpoint,
                })?;
                let (_, _, params) = decode_checkpoint(&bytes, self.task.layout())?;
                for _ in 0..arrivals {
                    self.spawn_peer(Behavior::Honest, params.clone())?;
                }
            }
        }
        Ok(())
    }

    /// One full round. Returns the round log and the validator's record.
    pub fn run_round(&mut self) -> Result<(RoundLog, ValidatorRecord)> {
        let round = self.round;
        if self.peers.is_empty() {
            let log = self.stalled_log(round, 0, 0)?;
            let record = ValidatorRecord {
                round,
                evaluated: vec![],
                scores: vec![],
                failed: vec![],
                selected: vec![],
            };
            self.publish_checkpoint()?;
            self.round += 1;
            return Ok((log, record));
        }

        // Rollback point: a round with zero contributors must leave theta and
        // every EF buffer (and inner moments) untouched.
        let snapshots: Vec<(InnerOptState, ErrorFeedback)> = self
            .peers
            .iter()
            .map(|p| (p.inner.clone(), p.ef.clone()))
            .collect();

        self.compute_phase()?;
        self.apply_miss_and_dropout();
        self.apply_copiers();

        // Upload in peer-id order.
        let mut submission_bytes: BTreeMap<PeerId, usize> = BTreeMap::new();
        for peer in &self.peers {
            if let Some(delta) = &peer.pending {
                let bytes = serialize(delta)?;
                submission_bytes.insert(peer.id, bytes.len());
                self.store.put(
                    ObjectKey::Submission {
                        round,
                        peer: peer.id,
                    },
                    bytes,
                )?;
            }
        }
        let payload_bytes_up: u64 = submission_bytes.values().map(|&b| b as u64).sum();

        let record = self.validate_round(round)?;
        let selected: Vec<PeerId> = record
            .selected
            .iter()
            .map(|hex| parse_peer_hex(hex))
            .collect();

        if selected.is_empty() {
            for (peer, (inner, ef)) in self.peers.iter_mut().zip(snapshots) {
                peer.inner = inner;
                peer.ef = ef;
                peer.pending = None;
            }
            let log = self.stalled_log(round, self.peers.len(), payload_bytes_up)?;
            self.publish_checkpoint()?;
            self.round += 1;
            return Ok((log, record));
        }

        // Every replica (validator included) downloads the selected set,
        // normalizes, aggregates, and steps; the results must agree bitwise.
        let alpha = self.cfg.optimizer.alpha;
        let mut reference: Option<[u8; 32]> = None;
        let mut payload_bytes_down = 0u64;

        let validator_dense = self.decode_selected(round, &selected, None)?;
        let mut validator_theta = self.global.clone();
        apply_aggregate(&mut validator_theta, validator_dense, alpha)?;
        let validator_digest = validator_theta.content_digest();

        for i in 0..self.peers.len() {
            let own = self.peers[i].id;
            let mut down = 0u64;
            for &sel in &selected {
                if sel != own {
                    down += submission_bytes.get(&sel).copied().unwrap_or(0) as u64;
                }
            }
            payload_bytes_down += down;

            let dense = self.decode_selected(round, &selected, Some(own))?;
            let peer = &mut self.peers[i];
            apply_aggregate(&mut peer.params, dense, alpha)?;
            let digest = peer.params.content_digest();
            match reference {
                None => reference = Some(digest),
                Some(r) if r == digest => {}
                Some(_) => {
                    return Err(Error::Consensus(format!(
                        "peer {own} diverged from the shared model at round {round}"
                    )))
                }
            }
        }
        if reference != Some(validator_digest) {
            return Err(Error::Consensus(format!(
                "validator model diverged at round {round}"
            )));
        }
        self.global = validator_theta;
        for peer in &mut self.peers {
            peer.pending = None;
        }

        let train_loss = self
            .task
            .loss(&self.global, &self.validator.train_eval_batch)?;
        let n = self.peers.len() as f64;
        let mean_up = payload_bytes_up as f64 / n;
        let mean_down = payload_bytes_down as f64 / n;
        let (t_comm_s, utilization) = simulate_timing(mean_up, mean_down, &self.timing);

        let log = RoundLog {
            round,
            active_peers: self.peers.len(),
            contributing_peers: selected.len(),
            selected_ids: selected.iter().map(|p| p.to_hex()).collect(),
            submissions: submission_bytes.len(),
            payload_bytes_up,
            payload_bytes_down,
            t_comm_s,
            utilization,
            train_loss,
            global_param_digest: digest_hex(&self.global.content_digest()),
            stalled: false,
        };
        self.publish_checkpoint()?;
        self.round += 1;
        Ok((log, record))
    }

    /// H inner steps plus compression, independently per peer; parallel
    /// across `run.workers` threads with bitwise-identical results.
    fn compute_phase(&mut self) -> Result<()> {
        let ctx = ComputeCtx {
            task: &self.task,
            plan: &self.plan,
            schedule: &self.cfg.schedule,
            seed: self.cfg.run.seed,
            round: self.round,
            h: self.cfg.optimizer.h,
            batch_size: self.cfg.peers.batch_size,
            coding: self.cfg.geometry.value_coding,
        };
        let workers = self.cfg.run.workers.min(self.peers.len().max(1));
        if workers <= 1 {
            for peer in &mut self.peers {
                compute_one(peer, &ctx);
            }
        } else {
            let chunk = self.peers.len().div_ceil(workers);
            std::thread::scope(|scope| {
                for slice in self.peers.chunks_mut(chunk) {
                    let ctx = &ctx;
                    scope.spawn(move || {
                        for peer in slice {
                            compute_one(peer, ctx);
                        }
                    });
                }
            });
        }
        for peer in &self.peers {
            if let Some(err) = &peer.compute_error {
                return Err(Error::InvalidData(format!(
                    "peer {} failed its compute phase: {err}",
                    peer.id
                )));
            }
        }
        Ok(())
    }

    fn apply_miss_and_dropout(&mut self) {
        let seed = self.cfg.run.seed;
        let miss_rate = self.cfg.churn.miss_rate;
        let round = self.round;
        for peer in &mut self.peers {
            let mut stream = Stream::new(seed, "miss").with(round).with(peer.ordinal);
            let chronic = match peer.behavior {
                Behavior::Dropout(p) => stream.next_f64() < p,
                _ => false,
            };
            let transient = miss_rate > 0.0 && stream.next_f64() < miss_rate;
            if chronic || transient {
                peer.pending = None;
            }
        }
    }

    /// Copiers replace their upload with the first other peer's submission
    /// (in id order), restamped under their own id.
    fn apply_copiers(&mut self) {
        let copier_indices: Vec<usize> = self
            .peers
            .iter()
            .enumerate()
            .filter(|(_, p)| p.behavior == Behavior::Copier && p.pending.is_some())
            .map(|(i, _)| i)
            .collect();
        for i in copier_indices {
            let own = self.peers[i].id;
            let victim = self
                .peers
                .iter()
                .find(|p| p.id != own && p.behavior != Behavior::Copier && p.pending.is_some())
                .map(|p| p.pending.clone().unwrap());
            if let Some(mut stolen) = victim {
                stolen.peer = own;
                self.peers[i].pending = Some(stolen);
            }
        }
    }

    /// Parse, fast-check, score, rate, and select.
    fn validate_round(&mut self, round: u64) -> Result<ValidatorRecord> {
        struct Parsed {
            delta: Option<CompressedDelta>,
            dense: Option<Vec<f64>>,
            parse_failed: bool,
        }
        let mut parsed: BTreeMap<PeerId, Parsed> = BTreeMap::new();
        let mut current_norms = Vec::new();
        for peer in &self.peers {
            let entry = if self.store.contains(ObjectKey::Submission {
                round,
                peer: peer.id,
            }) {
                let bytes = self.store.get(ObjectKey::Submission {
                    round,
                    peer: peer.id,
                })?;
                match deserialize(&bytes, &self.plan) {
                    Ok(delta) => {
                        let dense = decode_delta(&delta, &self.plan).ok();
                        if let Some(d) = &dense {
                            if d.iter().all(|v| v.is_finite()) {
                                current_norms.push(libm::sqrt(d.iter().map(|v| v * v).sum()));
                            }
                        }
                        Parsed {
                            delta: Some(delta),
                            dense,
                            parse_failed: false,
                        }
                    }
                    Err(_) => Parsed {
                        delta: None,
                        dense: None,
                        parse_failed: true,
                    },
                }
            } else {
                Parsed {
                    delta: None,
                    dense: None,
                    parse_failed: false,
                }
            };
            parsed.insert(peer.id, entry);
        }

        // Norm-sane median basis: rolling history plus this round's norms.
        let gcfg = self.cfg.gauntlet.clone();
        let mut norm_basis: Vec<f64> = self.validator.norm_history.iter().copied().collect();
        norm_basis.extend(&current_norms);

        let mut flags_out = Vec::new();
        for peer in &self.peers {
            let p = &parsed[&peer.id];
            let failed = fast_checks(
                &FastCheckInput {
                    submission: p.delta.as_ref(),
                    decoded: p.dense.as_deref(),
                    parse_failed: p.parse_failed,
                },
                round,
                self.plan.layout_digest,
                &norm_basis,
                &gcfg,
            );
            let card = self
                .validator
                .cards
                .entry(peer.id)
                .or_insert_with(|| ScoreCard::new(peer.id, &gcfg));
            card.reset_round();
            card.failed_checks = failed.clone();
            if !failed.is_empty() {
                flags_out.push(PeerFlags {
                    peer: peer.id.to_hex(),
                    flags: failed.into_iter().collect(),
                });
            }
        }
        for n in current_norms {
            self.validator.norm_history.push_back(n);
            while self.validator.norm_history.len() > gcfg.norm_window {
                self.validator.norm_history.pop_front();
            }
        }

        // Evaluation subsample over peers with a parseable submission.
        let eval_pick = Stream::new(self.cfg.run.seed, "eval-pick").with(round);
        let mut evaluated = Vec::new();
        let mut scores_out = Vec::new();
        let alpha = self.cfg.optimizer.alpha;
        for peer in &self.peers {
            let p = &parsed[&peer.id];
            let Some(delta) = &p.delta else { continue };
            if eval_pick.with(peer.ordinal).next_f64() >= gcfg.eval_fraction {
                continue;
            }
            let mut assigned_stream = Stream::new(self.cfg.run.seed, "eval-assigned")
                .with(round)
                .with(peer.ordinal);
            let mut random_stream = Stream::new(self.cfg.run.seed, "eval-random")
                .with(round)
                .with(peer.ordinal);
            let mut assigned_total = 0.0;
            let mut random_total = 0.0;
            for _ in 0..gcfg.eval_batches {
                let assigned_batch =
                    self.task
                        .draw_batch(&peer.shards, gcfg.eval_batch_size, &mut assigned_stream);
                let random_batch = self.task.draw_batch(
                    &self.validator.pool,
                    gcfg.eval_batch_size,
                    &mut random_stream,
                );
                assigned_total += loss_score(
                    &self.task,
                    &self.global,
                    delta,
                    &self.plan,
                    &assigned_batch,
                    alpha,
                )?;
                random_total += loss_score(
                    &self.task,
                    &self.global,
                    delta,
                    &self.plan,
                    &random_batch,
                    alpha,
                )?;
            }
            let card = self.validator.cards.get_mut(&peer.id).unwrap();
            card.loss_score_assigned = Some(assigned_total / gcfg.eval_batches as f64);
            card.loss_score_random = Some(random_total / gcfg.eval_batches as f64);
            evaluated.push(peer.id);
            scores_out.push(PeerScore {
                peer: peer.id.to_hex(),
                assigned: card.loss_score_assigned.unwrap(),
                random: card.loss_score_random.unwrap(),
                mu: card.rating.mu,
                sigma: card.rating.sigma,
            });
        }

        rating_update(&mut self.validator.cards, &evaluated, &gcfg, round);

        // Selection considers this round's active roster only; non-submitters
        // carry a liveness flag and are vetoed inside the selector.
        let selectable: BTreeMap<PeerId, ScoreCard> = self
            .peers
            .iter()
            .map(|p| (p.id, self.validator.cards[&p.id].clone()))
            .collect();
        let selected = select_contributors(&selectable, gcfg.cap);

        Ok(ValidatorRecord {
            round,
            evaluated: evaluated.iter().map(|p| p.to_hex()).collect(),
            scores: scores_out,
            failed: flags_out,
            selected: selected.iter().map(|p| p.to_hex()).collect(),
        })
    }

    /// Dense decodes of the selected submissions in ascending peer order.
    /// `own` marks the replica's own submission, which it holds locally
    /// instead of downloading.
    fn decode_selected(
        &mut self,
        round: u64,
        selected: &[PeerId],
        own: Option<PeerId>,
    ) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(selected.len());
        for &sel in selected {
            if Some(sel) == own {
                let peer = self
                    .peers
                    .iter()
                    .find(|p| p.id == sel)
                    .expect("own id is active");
                let delta = peer.pending.as_ref().expect("selected peers submitted");
                out.push(decode_delta(delta, &self.plan)?);
            } else {
                let bytes = self.store.get(ObjectKey::Submission { round, peer: sel })?;
                let delta = deserialize(&bytes, &self.plan)?;
                out.push(decode_delta(&delta, &self.plan)?);
            }
        }
        Ok(out)
    }

    fn stalled_log(&self, round: u64, active: usize, payload_up: u64) -> Result<RoundLog> {
        let train_loss = self
            .task
            .loss(&self.global, &self.validator.train_eval_batch)?;
        let (t_comm_s, utilization) =
            simulate_timing(payload_up as f64 / active.max(1) as f64, 0.0, &self.timing);
        Ok(RoundLog {
            round,
            active_peers: active,
            contributing_peers: 0,
            selected_ids: vec![],
            submissions: 0,
            payload_bytes_up: payload_up,
            payload_bytes_down: 0,
            t_comm_s,
            utilization,
            train_loss,
            global_param_digest: digest_hex(&self.global.content_digest()),
            stalled: true,
        })
    }

    fn publish_checkpoint(&mut self) -> Result<()> {
        let next = self.round + 1;
        self.store.put(
            ObjectKey::Checkpoint { round: next },
            encode_checkpoint(next, digest32(&self.cfg.digest_hex()), &self.global),
        )?;
        self.latest_checkpoint = next;
        Ok(())
    }
}

/// Selected dense deltas -> median normalize -> mean -> outer step.
fn apply_aggregate(theta: &mut ParamVector, mut dense: Vec<Vec<f64>>, alpha: f64) -> Result<()> {
    median_normalize(&mut dense);
    let aggregate = mean_dense(&dense);
    outer_step(theta, &aggregate, alpha)
}

struct ComputeCtx<'a> {
    task: &'a Task,
    plan: &'a ChunkPlan,
    schedule: &'a crate::optimizer::LrSchedule,
    seed: u64,
    round: u64,
    h: u64,
    batch_size: usize,
    coding: crate::codec::ValueCoding,
}

/// One peer's compute phase: H inner steps from the shared model, then
/// pseudo-gradient formation and compression. Behavior distortion (noise)
/// applies to the pseudo-gradient before compression.
fn compute_one(peer: &mut Peer, ctx: &ComputeCtx<'_>) {
    peer.pending = None;
    peer.compute_error = None;
    let result = (|| -> Result<CompressedDelta> {
        let mut local = peer.params.clone();
        let mut batch_stream = Stream::new(ctx.seed, "batch")
            .with(ctx.round)
            .with(peer.ordinal);
        for h in 0..ctx.h {
            let lr = inner_lr_at(ctx.round * ctx.h + h, ctx.schedule)?;
            let batch = ctx
                .task
                .draw_batch(&peer.shards, ctx.batch_size, &mut batch_stream);
            let grad = ctx.task.gradient(&local, &batch)?;
            inner_step(&mut local, &mut peer.inner, &grad, lr)?;
        }
        let mut delta = pseudo_gradient(&peer.params, &local)?;
        if let Behavior::Noisy(sigma) = peer.behavior {
            let mut noise = Stream::new(ctx.seed, "noise")
                .with(ctx.round)
                .with(peer.ordinal);
            for v in delta.values_mut() {
                *v += sigma * noise.next_gaussian();
            }
        }
        let out = compress_with_ef(
            &delta,
            &mut peer.ef,
            ctx.plan,
            ctx.coding,
            ctx.round,
            peer.id,
        )?;
        Ok(out.delta)
    })();
    match result {
        Ok(delta) => peer.pending = Some(delta),
        Err(e) => peer.compute_error = Some(e.to_string()),
    }
}

fn parse_peer_hex(hex: &str) -> PeerId {
    let mut bytes = [0u8; 16];
    for (i, b) in bytes.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).unwrap_or(0);
    }
    PeerId(bytes)
}

fn digest32(hex: &str) -> [u8; 32] {
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).unwrap_or(0);
    }
    out
}
