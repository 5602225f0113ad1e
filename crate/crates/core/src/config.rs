//! Run configuration: one canonical, fully-validated record of every knob.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chunk::ChunkGeometry;
use crate::codec::ValueCoding;
use crate::error::{Error, Result};
use crate::gauntlet::GauntletConfig;
use crate::optimizer::{InnerHyper, LrSchedule, OuterConfig};
use crate::tasks::TaskConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub rounds: u64,
    pub out: String,
    pub checkpoint_interval: u64,
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 42,
            rounds: 100,
            out: "out".into(),
            checkpoint_interval: 50,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySection {
    pub chunk_2d: usize,
    pub chunk_1d: usize,
    pub k: usize,
    pub value_coding: ValueCoding,
    /// Dense bits per value of the uncompressed baseline, for ratio math.
    pub dense_bits: u32,
}

impl Default for GeometrySection {
    fn default() -> Self {
        GeometrySection {
            chunk_2d: 64,
            chunk_1d: 4096,
            k: 64,
            value_coding: ValueCoding::TwoBit,
            dense_bits: 32,
        }
    }
}

impl GeometrySection {
    pub fn geometry(&self) -> Result<ChunkGeometry> {
        ChunkGeometry::new(self.chunk_2d, self.chunk_1d, self.k)
            .map_err(|e| Error::Config(format!("geometry.k/chunk: {e}")))
    }

    /// Index bits + value bits per selected element.
    pub fn wire_bits_per_selected(&self) -> u32 {
        12 + self.value_coding.bits_per_value()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub h: u64,
    pub alpha: f64,
    pub ef_beta: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            h: 30,
            alpha: 1.0,
            ef_beta: 0.95,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerSection {
    pub fn inner_hyper(&self) -> InnerHyper {
        InnerHyper {
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChurnSection {
    /// Per-round departure probability per active peer.
    pub p_leave: f64,
    /// Poisson arrival rate of new peers per round.
    pub join_rate: f64,
    /// Per-round probability a peer fails to upload (transient).
    pub miss_rate: f64,
}

impl Default for ChurnSection {
    fn default() -> Self {
        // Calibrated so the stationary active count sits near 24 with the
        // contributor cap at 20.
        ChurnSection {
            p_leave: 0.05,
            join_rate: 1.22,
            miss_rate: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeerSection {
    pub initial: usize,
    pub batch_size: usize,
    pub shards_per_peer: usize,
    /// Leading peers of the roster get adversarial behaviors, in order:
    /// copiers, then noisy, then chronic-dropout; the rest are honest.
    pub copiers: usize,
    pub noisy: usize,
    pub noisy_sigma: f64,
    pub dropout: usize,
    pub dropout_p: f64,
}

impl Default for PeerSection {
    fn default() -> Self {
        PeerSection {
            initial: 8,
            batch_size: 32,
            shards_per_peer: 4,
            copiers: 0,
            noisy: 0,
            noisy_sigma: 0.1,
            dropout: 0,
            dropout_p: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingSection {
    pub t_compute_s: f64,
    pub uplink_mbps: f64,
    pub downlink_mbps: f64,
    pub fixed_overhead_s: f64,
}

impl Default for TimingSection {
    fn default() -> Self {
        TimingSection {
            t_compute_s: 1200.0,
            uplink_mbps: 110.0,
            downlink_mbps: 500.0,
            fixed_overhead_s: 2.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub task: TaskConfig,
    pub geometry: GeometrySection,
    pub optimizer: OptimizerSection,
    pub schedule: LrSchedule,
    pub gauntlet: GauntletConfig,
    pub churn: ChurnSection,
    pub peers: PeerSection,
    pub timing: TimingSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn digest_hex(&self) -> String {
        let hash: [u8; 32] = Sha256::digest(self.to_toml().as_bytes()).into();
        crate::params::digest_hex(&hash)
    }

    pub fn outer(&self) -> OuterConfig {
        OuterConfig {
            alpha: self.optimizer.alpha,
            h: self.optimizer.h,
            r_cap: self.gauntlet.cap,
        }
    }

    /// Full-field validation; error messages name the offending field path.
    pub fn validate(&self) -> Result<()> {
        if self.run.rounds == 0 {
            return Err(Error::Config("run.rounds: must be >= 1".into()));
        }
        if self.run.workers == 0 {
            return Err(Error::Config("run.workers: must be >= 1".into()));
        }
        self.task.validate()?;
        if self.geometry.k > self.geometry.chunk_1d {
            return Err(Error::Config(format!(
                "geometry.k: must be <= geometry.chunk_1d ({}), got {}",
                self.geometry.chunk_1d, self.geometry.k
            )));
        }
        self.geometry.geometry()?;
        if self.geometry.dense_bits == 0 {
            return Err(Error::Config("geometry.dense_bits: must be >= 1".into()));
        }
        self.outer().validate()?;
        if !(0.0..1.0).contains(&self.optimizer.ef_beta) {
            return Err(Error::Config(format!(
                "optimizer.ef_beta: must be in [0, 1), got {}",
                self.optimizer.ef_beta
            )));
        }
        self.schedule.validate()?;
        let needed = self.run.rounds * self.optimizer.h;
        if needed > self.schedule.horizon() {
            return Err(Error::Config(format!(
                "schedule.total_steps: run needs {needed} inner steps but the schedule ends at {}",
                self.schedule.horizon()
            )));
        }
        self.gauntlet.validate()?;
        for (name, p) in [
            ("churn.p_leave", self.churn.p_leave),
            ("churn.miss_rate", self.churn.miss_rate),
            ("peers.dropout_p", self.peers.dropout_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name}: must be in [0, 1], got {p}")));
            }
        }
        if self.churn.join_rate < 0.0 {
            return Err(Error::Config("churn.join_rate: must be >= 0".into()));
        }
        if self.peers.initial == 0 {
            return Err(Error::Config("peers.initial: must be >= 1".into()));
        }
        if self.peers.copiers + self.peers.noisy + self.peers.dropout > self.peers.initial {
            return Err(Error::Config(
                "peers.initial: fewer peers than assigned behaviors".into(),
            ));
        }
        if self.peers.batch_size == 0 || self.peers.shards_per_peer == 0 {
            return Err(Error::Config(
                "peers.batch_size / peers.shards_per_peer: must be >= 1".into(),
            ));
        }
        if self.peers.noisy_sigma < 0.0 {
            return Err(Error::Config("peers.noisy_sigma: must be >= 0".into()));
        }
        for (name, v) in [
            ("timing.t_compute_s", self.timing.t_compute_s),
            ("timing.uplink_mbps", self.timing.uplink_mbps),
            ("timing.downlink_mbps", self.timing.downlink_mbps),
        ] {
            if v <= 0.0 {
                return Err(Error::Config(format!("{name}: must be > 0, got {v}")));
            }
        }
        if self.timing.fixed_overhead_s < 0.0 {
            return Err(Error::Config(
                "timing.fixed_overhead_s: must be >= 0".into(),
            ));
        }
        Ok(())
    }
}
