//! Desk-scale differentiable tasks with analytic gradients.
//!
//! Three task kinds drive the swarm: a least-squares quadratic, logistic
//! regression with planted labels, and a one-hidden-layer tanh MLP with a
//! softmax head. Data is synthetic and sharded; each shard carries its own
//! feature-mean shift and a tilted copy of the planted parameters as its
//! labeling rule, so training on a shard measurably helps that shard more
//! than others - the signal behind the validator's assigned-vs-random check.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Layout, ParamVector, TensorSpec};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "quadratic")]
    Quadratic,
    #[serde(rename = "logistic-regression")]
    Logistic,
    #[serde(rename = "mlp-1hidden")]
    Mlp,
}

/// MLP dimensions are fixed small; the other kinds use `dim`.
pub const MLP_IN: usize = 16;
pub const MLP_HIDDEN: usize = 64;
pub const MLP_OUT: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Feature dimension (quadratic, logistic).
    pub dim: usize,
    pub examples_per_shard: usize,
    /// Shard universe size used when assignments overlap.
    pub n_shards: u64,
    /// Requested pairwise overlap between peer assignments, in [0, 1).
    pub overlap: f64,
    /// Scale of the per-shard feature-mean shift.
    pub shard_shift: f64,
    /// Relative scale of the per-shard tilt applied to the planted
    /// parameters; shards are non-IID in their labeling rule, which is what
    /// gives locally trained updates a measurable assigned-data edge.
    pub shard_tilt: f64,
    /// Label noise for the quadratic targets.
    pub noise: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::Logistic,
            dim: 256,
            examples_per_shard: 512,
            n_shards: 64,
            overlap: 0.0,
            shard_shift: 1.5,
            shard_tilt: 1.5,
            noise: 0.01,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 && self.kind != TaskKind::Mlp {
            return Err(Error::Config("task.dim: must be >= 1".into()));
        }
        if self.examples_per_shard == 0 {
            return Err(Error::Config(
                "task.examples_per_shard: must be >= 1".into(),
            ));
        }
        if self.n_shards == 0 {
            return Err(Error::Config("task.n_shards: must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!(
                "task.overlap: must be in [0, 1), got {}",
                self.overlap
            )));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        match self.kind {
            TaskKind::Mlp => MLP_IN,
            _ => self.dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabelKind {
    Real,
    Class,
}

/// A batch of examples in row-major feature layout.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Vec<f64>,
    pub labels: Vec<f64>,
    pub n: usize,
    pub dim: usize,
}

impl Batch {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Deterministic synthetic shard; content is a pure function of
/// `(run seed, shard id)`.
#[derive(Debug, Clone)]
pub struct Shard {
    pub id: u64,
    pub data: Batch,
}

/// One task instance: kind, parameter layout, and the planted ground truth.
#[derive(Debug, Clone)]
pub struct Task {
    cfg: TaskConfig,
    layout: Arc<Layout>,
    planted: Vec<f64>,
    seed: u64,
}

impl Task {
    pub fn new(cfg: TaskConfig, seed: u64) -> Result<Task> {
        cfg.validate()?;
        let layout = Arc::new(match cfg.kind {
            TaskKind::Quadratic | TaskKind::Logistic => {
                Layout::new(vec![TensorSpec::new("w", &[cfg.dim])?])?
            }
            TaskKind::Mlp => Layout::new(vec![
                TensorSpec::new("w1", &[MLP_HIDDEN, MLP_IN])?,
                TensorSpec::new("b1", &[MLP_HIDDEN])?,
                TensorSpec::new("w2", &[MLP_OUT, MLP_HIDDEN])?,
                TensorSpec::new("b2", &[MLP_OUT])?,
            ])?,
        });
        let mut stream = Stream::new(seed, "task-plant");
        let planted: Vec<f64> = (0..layout.element_count())
            .map(|_| stream.next_gaussian())
            .collect();
        Ok(Task {
            cfg,
            layout,
            planted,
            seed,
        })
    }

    pub fn kind(&self) -> TaskKind {
        self.cfg.kind
    }

    pub fn config(&self) -> &TaskConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn label_kind(&self) -> LabelKind {
        match self.cfg.kind {
            TaskKind::Mlp | TaskKind::Logistic => LabelKind::Class,
            TaskKind::Quadratic => LabelKind::Real,
        }
    }

    /// Initial model parameters for a run.
    pub fn initial_params(&self) -> ParamVector {
        let mut stream = Stream::new(self.seed, "task-init");
        let values = match self.cfg.kind {
            // All coordinates start well away from zero so early updates are
            // small relative to the parameter scale; float cancellation in
            // the pseudo-gradient chain then stays exact.
            TaskKind::Quadratic => (0..self.layout.element_count())
                .map(|_| 3.0 + 0.5 * stream.next_gaussian())
                .collect(),
            _ => (0..self.layout.element_count())
                .map(|_| 0.1 * stream.next_gaussian())
                .collect(),
        };
        ParamVector::new(values, self.layout.clone()).expect("finite by construction")
    }

    /// Materializes a shard. Shards are heterogeneous on two axes: a
    /// feature-mean shift, and a tilted copy of the planted parameters that
    /// defines this shard's labeling rule (its own local optimum).
    pub fn shard(&self, shard_id: u64) -> Shard {
        let mut stream = Stream::new(self.seed, "shard").with(shard_id);
        let d = self.cfg.feature_dim();
        let n = self.cfg.examples_per_shard;
        let shift: Vec<f64> = (0..d)
            .map(|_| self.cfg.shard_shift * stream.next_gaussian() / libm::sqrt(d as f64))
            .collect();
        let local_rule: Vec<f64> = self
            .planted
            .iter()
            .map(|p| p + self.cfg.shard_tilt * stream.next_gaussian())
            .collect();
        let mut features = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let start = features.len();
            for s in &shift {
                features.push(s + stream.next_gaussian());
            }
            let x = &features[start..];
            labels.push(self.plant_label(x, &local_rule, &mut stream));
        }
        Shard {
            id: shard_id,
            data: Batch {
                features,
                labels,
                n,
                dim: d,
            },
        }
    }

    fn plant_label(&self, x: &[f64], rule: &[f64], stream: &mut Stream) -> f64 {
        match self.cfg.kind {
            TaskKind::Quadratic => {
                let clean: f64 = rule.iter().zip(x).map(|(w, xi)| w * xi).sum();
                clean + self.cfg.noise * stream.next_gaussian()
            }
            TaskKind::Logistic => {
                let z: f64 = rule.iter().zip(x).map(|(w, xi)| w * xi).sum();
                let p = 1.0 / (1.0 + libm::exp(-z));
                f64::from(stream.next_f64() < p)
            }
            TaskKind::Mlp => {
                let logits = mlp_logits(rule, x);
                let mut best = 0;
                for (i, l) in logits.iter().enumerate() {
                    if *l > logits[best] {
                        best = i;
                    }
                }
                best as f64
            }
        }
    }

    /// Draws a batch by sampling rows of the given shards.
    pub fn draw_batch(&self, shards: &[Arc<Shard>], size: usize, stream: &mut Stream) -> Batch {
        assert!(!shards.is_empty() && size > 0);
        let d = self.cfg.feature_dim();
        let mut features = Vec::with_capacity(size * d);
        let mut labels = Vec::with_capacity(size);
        for _ in 0..size {
            let shard = &shards[stream.next_range(shards.len() as u64) as usize];
            let row = stream.next_range(shard.data.n as u64) as usize;
            features.extend_from_slice(shard.data.row(row));
            labels.push(shard.data.labels[row]);
        }
        Batch {
            features,
            labels,
            n: size,
            dim: d,
        }
    }

    pub fn loss(&self, params: &ParamVector, batch: &Batch) -> Result<f64> {
        self.check_shapes(params, batch)?;
        Ok(match self.cfg.kind {
            TaskKind::Quadratic => quadratic_loss(params.values(), batch),
            TaskKind::Logistic => logistic_loss(params.values(), batch),
            TaskKind::Mlp => mlp_loss(params.values(), batch),
        })
    }

    pub fn gradient(&self, params: &ParamVector, batch: &Batch) -> Result<ParamVector> {
        self.check_shapes(params, batch)?;
        let g = match self.cfg.kind {
            TaskKind::Quadratic => quadratic_gradient(params.values(), batch),
            TaskKind::Logistic => logistic_gradient(params.values(), batch),
            TaskKind::Mlp => mlp_gradient(params.values(), batch),
        };
        ParamVector::new(g, self.layout.clone())
    }

    fn check_shapes(&self, params: &ParamVector, batch: &Batch) -> Result<()> {
        if params.layout().digest() != self.layout.digest() {
            return Err(Error::InvalidArgument(
                "params have a foreign layout".into(),
            ));
        }
        if batch.dim != self.cfg.feature_dim() || batch.n == 0 {
            return Err(Error::InvalidArgument(format!(
                "batch dim {} does not match task dim {}",
                batch.dim,
                self.cfg.feature_dim()
            )));
        }
        if params.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite parameters".into()));
        }
        Ok(())
    }
}

/// Mean squared residual: `1/(2n) * sum (a_i . x - b_i)^2`.
fn quadratic_loss(w: &[f64], batch: &Batch) -> f64 {
    let mut total = 0.0;
    for i in 0..batch.n {
        let r: f64 = batch.row(i).iter().zip(w).map(|(a, x)| a * x).sum::<f64>() - batch.labels[i];
        total += r * r;
    }
    total / (2.0 * batch.n as f64)
}

fn quadratic_gradient(w: &[f64], batch: &Batch) -> Vec<f64> {
    let mut g = vec![0.0; w.len()];
    for i in 0..batch.n {
        let r: f64 = batch.row(i).iter().zip(w).map(|(a, x)| a * x).sum::<f64>() - batch.labels[i];
        for (gj, aj) in g.iter_mut().zip(batch.row(i)) {
            *gj += r * aj;
        }
    }
    for gj in &mut g {
        *gj /= batch.n as f64;
    }
    g
}

/// Mean cross-entropy in nats with labels in {0, 1}.
fn logistic_loss(w: &[f64], batch: &Batch) -> f64 {
    let mut total = 0.0;
    for i in 0..batch.n {
        let z: f64 = batch.row(i).iter().zip(w).map(|(a, x)| a * x).sum();
        // log(1 + e^-|z|) form avoids overflow on both tails.
        let log1p_exp = libm::log1p(libm::exp(-z.abs())) + z.max(0.0);
        total += log1p_exp - batch.labels[i] * z;
    }
    total / batch.n as f64
}

fn logistic_gradient(w: &[f64], batch: &Batch) -> Vec<f64> {
    let mut g = vec![0.0; w.len()];
    for i in 0..batch.n {
        let z: f64 = batch.row(i).iter().zip(w).map(|(a, x)| a * x).sum();
        let p = 1.0 / (1.0 + libm::exp(-z));
        let err = p - batch.labels[i];
        for (gj, aj) in g.iter_mut().zip(batch.row(i)) {
            *gj += err * aj;
        }
    }
    for gj in &mut g {
        *gj /= batch.n as f64;
    }
    g
}

// Parameter slicing for the MLP layout: w1 | b1 | w2 | b2.
const W1_END: usize = MLP_HIDDEN * MLP_IN;
const B1_END: usize = W1_END + MLP_HIDDEN;
const W2_END: usize = B1_END + MLP_OUT * MLP_HIDDEN;

fn mlp_logits(params: &[f64], x: &[f64]) -> [f64; MLP_OUT] {
    let (w1, rest) = params.split_at(W1_END);
    let (b1, rest) = rest.split_at(MLP_HIDDEN);
    let (w2, b2) = rest.split_at(MLP_OUT * MLP_HIDDEN);
    let mut hidden = [0.0f64; MLP_HIDDEN];
    for (h, (row, b)) in hidden.iter_mut().zip(w1.chunks_exact(MLP_IN).zip(b1)) {
        let z: f64 = row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b;
        *h = libm::tanh(z);
    }
    let mut logits = [0.0f64; MLP_OUT];
    for (l, (row, b)) in logits.iter_mut().zip(w2.chunks_exact(MLP_HIDDEN).zip(b2)) {
        *l = row.iter().zip(hidden).map(|(w, h)| w * h).sum::<f64>() + b;
    }
    logits
}

fn softmax(logits: &[f64; MLP_OUT]) -> [f64; MLP_OUT] {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut out = [0.0f64; MLP_OUT];
    let mut sum = 0.0;
    for (o, l) in out.iter_mut().zip(logits) {
        *o = libm::exp(l - max);
        sum += *o;
    }
    for o in &mut out {
        *o /= sum;
    }
    out
}

fn mlp_loss(params: &[f64], batch: &Batch) -> f64 {
    let mut total = 0.0;
    for i in 0..batch.n {
        let p = softmax(&mlp_logits(params, batch.row(i)));
        let y = batch.labels[i] as usize;
        total -= libm::log(p[y].max(1e-300));
    }
    total / batch.n as f64
}

/// Hand-derived backprop through tanh hidden layer and softmax head.
fn mlp_gradient(params: &[f64], batch: &Batch) -> Vec<f64> {
    let (w1, rest) = params.split_at(W1_END);
    let (b1, rest) = rest.split_at(MLP_HIDDEN);
    let (w2, _b2) = rest.split_at(MLP_OUT * MLP_HIDDEN);
    let mut grad = vec![0.0f64; params.len()];
    for i in 0..batch.n {
        let x = batch.row(i);
        let mut hidden = [0.0f64; MLP_HIDDEN];
        for (h, (row, b)) in hidden.iter_mut().zip(w1.chunks_exact(MLP_IN).zip(b1)) {
            let z: f64 = row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b;
            *h = libm::tanh(z);
        }
        let mut logits = [0.0f64; MLP_OUT];
        for (l, (row, b)) in logits
            .iter_mut()
            .zip(w2.chunks_exact(MLP_HIDDEN).zip(&params[W2_END..]))
        {
            *l = row.iter().zip(hidden).map(|(w, h)| w * h).sum::<f64>() + b;
        }
        let mut dz2 = softmax(&logits);
        dz2[batch.labels[i] as usize] -= 1.0;

        // dW2, db2.
        for o in 0..MLP_OUT {
            for (g, h) in grad[B1_END + o * MLP_HIDDEN..B1_END + (o + 1) * MLP_HIDDEN]
                .iter_mut()
                .zip(hidden)
            {
                *g += dz2[o] * h;
            }
            grad[W2_END + o] += dz2[o];
        }
        // dz1 = (W2^T dz2) * (1 - h^2), then dW1, db1.
        for j in 0..MLP_HIDDEN {
            let dh: f64 = (0..MLP_OUT).map(|o| w2[o * MLP_HIDDEN + j] * dz2[o]).sum();
            let dz1 = dh * (1.0 - hidden[j] * hidden[j]);
            for (g, xi) in grad[j * MLP_IN..(j + 1) * MLP_IN].iter_mut().zip(x) {
                *g += dz1 * xi;
            }
            grad[W1_END + j] += dz1;
        }
    }
    for g in &mut grad {
        *g /= batch.n as f64;
    }
    grad
}

/// Assignment of shard ids to a peer.
///
/// With zero overlap each peer owns a disjoint consecutive block of the
/// unbounded shard space. With overlap rho, peers draw
/// `round(rho * n_shards)` distinct shards from a shared universe of
/// `n_shards`, giving expected pairwise overlap rho.
pub fn assign_shards(
    cfg: &TaskConfig,
    seed: u64,
    peer_ordinal: u64,
    shards_per_peer: usize,
) -> Vec<u64> {
    if cfg.overlap == 0.0 {
        let base = peer_ordinal * shards_per_peer as u64;
        (base..base + shards_per_peer as u64).collect()
    } else {
        let count =
            ((cfg.overlap * cfg.n_shards as f64).round() as usize).clamp(1, cfg.n_shards as usize);
        let mut stream = Stream::new(seed, "assign").with(peer_ordinal);
        stream.sample_distinct(cfg.n_shards, count)
    }
}

/// Shard ids reserved for the validator's unassigned ("random") evaluation
/// data; peer assignments never reach this range.
pub const VALIDATOR_SHARD_BASE: u64 = 1 << 56;

/// Length-prefixed binary record for hosting shards in the blob store:
/// `magic "SHRD" | shard_id u64 | n u32 | dim u32 | label_kind u8 |
/// features f64 x (n*dim) | labels f64 x n | crc32`, big-endian throughout.
pub fn shard_to_bytes(shard: &Shard, label_kind: LabelKind) -> Vec<u8> {
    let b = &shard.data;
    let mut out = Vec::with_capacity(21 + 8 * (b.features.len() + b.labels.len()) + 4);
    out.extend_from_slice(b"SHRD");
    out.extend_from_slice(&shard.id.to_be_bytes());
    out.extend_from_slice(&(b.n as u32).to_be_bytes());
    out.extend_from_slice(&(b.dim as u32).to_be_bytes());
    out.push(match label_kind {
        LabelKind::Real => 0,
        LabelKind::Class => 1,
    });
    for v in b.features.iter().chain(&b.labels) {
        out.extend_from_slice(&v.to_bits().to_be_bytes());
    }
    let crc = crate::codec::crc32(&out);
    out.extend_from_slice(&crc.to_be_bytes());
    out
}

pub fn shard_from_bytes(bytes: &[u8]) -> Result<(Shard, LabelKind)> {
    if bytes.len() < 25 || &bytes[..4] != b"SHRD" {
        return Err(Error::Format("bad shard record".into()));
    }
    let body = &bytes[..bytes.len() - 4];
    let crc = u32::from_be_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crate::codec::crc32(body) != crc {
        return Err(Error::Format("shard checksum mismatch".into()));
    }
    let id = u64::from_be_bytes(bytes[4..12].try_into().unwrap());
    let n = u32::from_be_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let dim = u32::from_be_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let expected = 21 + 8 * (n * dim + n) + 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "shard record is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let label_kind = match bytes[20] {
        0 => LabelKind::Real,
        1 => LabelKind::Class,
        other => return Err(Error::Format(format!("unknown label kind {other}"))),
    };
    let mut values = bytes[21..bytes.len() - 4]
        .chunks_exact(8)
        .map(|c| f64::from_bits(u64::from_be_bytes(c.try_into().unwrap())));
    let features: Vec<f64> = values.by_ref().take(n * dim).collect();
    let labels: Vec<f64> = values.collect();
    Ok((
        Shard {
            id,
            data: Batch {
                features,
                labels,
                n,
                dim,
            },
        },
        label_kind,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(kind: TaskKind, dim: usize) -> Task {
        Task::new(
            TaskConfig {
                kind,
                dim,
                examples_per_shard: 64,
                ..TaskConfig::default()
            },
            7,
        )
        .unwrap()
    }

    #[test]
    fn quadratic_identity_case() {
        // A = I, b = 0, x = 0 -> loss 0, gradient 0.
        let t = task(TaskKind::Quadratic, 3);
        let batch = Batch {
            features: vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            labels: vec![0.0, 0.0, 0.0],
            n: 3,
            dim: 3,
        };
        let x = ParamVector::zeros(t.layout().clone());
        assert_eq!(t.loss(&x, &batch).unwrap(), 0.0);
        assert!(t
            .gradient(&x, &batch)
            .unwrap()
            .values()
            .iter()
            .all(|&g| g == 0.0));
    }

    #[test]
    fn logistic_zero_weights_is_ln2() {
        let t = task(TaskKind::Logistic, 8);
        let shard = Arc::new(t.shard(0));
        let w = ParamVector::zeros(t.layout().clone());
        let loss = t.loss(&w, &shard.data).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12, "{loss}");
    }

    fn finite_diff_check(t: &Task, coords: usize) {
        let mut stream = Stream::new(99, "fd").with(t.kind() as u64);
        let shard = Arc::new(t.shard(1));
        for _ in 0..20 {
            let params = ParamVector::new(
                (0..t.layout().element_count())
                    .map(|_| 0.5 * stream.next_gaussian())
                    .collect(),
                t.layout().clone(),
            )
            .unwrap();
            let batch = t.draw_batch(std::slice::from_ref(&shard), 16, &mut stream);
            let grad = t.gradient(&params, &batch).unwrap();
            let h = 1e-6;
            let mut err_num = 0.0;
            let mut err_den = 0.0;
            for _ in 0..coords {
                let j = stream.next_range(params.len() as u64) as usize;
                let mut plus = params.clone();
                plus.values_mut()[j] += h;
                let mut minus = params.clone();
                minus.values_mut()[j] -= h;
                let fd =
                    (t.loss(&plus, &batch).unwrap() - t.loss(&minus, &batch).unwrap()) / (2.0 * h);
                err_num += (grad.values()[j] - fd).powi(2);
                err_den += fd.powi(2).max(grad.values()[j].powi(2));
            }
            let rel = (err_num / err_den.max(1e-300)).sqrt();
            assert!(rel < 1e-5, "relative fd error {rel}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        finite_diff_check(&task(TaskKind::Quadratic, 12), 12);
        finite_diff_check(&task(TaskKind::Logistic, 12), 12);
        finite_diff_check(&task(TaskKind::Mlp, 0), 24);
    }

    #[test]
    fn full_batch_descent_decreases_convex_losses() {
        for kind in [TaskKind::Quadratic, TaskKind::Logistic] {
            let t = task(kind, 10);
            let shard = Arc::new(t.shard(2));
            let mut params = t.initial_params();
            let mut prev = t.loss(&params, &shard.data).unwrap();
            for _ in 0..50 {
                let g = t.gradient(&params, &shard.data).unwrap();
                params.add_scaled(&g, -0.05).unwrap();
                let cur = t.loss(&params, &shard.data).unwrap();
                assert!(cur <= prev + 1e-12, "{kind:?}: {prev} -> {cur}");
                prev = cur;
            }
        }
    }

    #[test]
    fn shards_are_deterministic() {
        let t = task(TaskKind::Logistic, 16);
        let a = t.shard(5);
        let b = t.shard(5);
        assert_eq!(a.data.features, b.data.features);
        assert_eq!(a.data.labels, b.data.labels);
        let c = t.shard(6);
        assert_ne!(a.data.features, c.data.features);
    }

    #[test]
    fn disjoint_assignment_when_overlap_zero() {
        let cfg = TaskConfig {
            overlap: 0.0,
            ..TaskConfig::default()
        };
        let a = assign_shards(&cfg, 1, 0, 4);
        let b = assign_shards(&cfg, 1, 1, 4);
        assert_eq!(a, vec![0, 1, 2, 3]);
        assert_eq!(b, vec![4, 5, 6, 7]);
        assert!(a.iter().all(|s| !b.contains(s)));
    }

    #[test]
    fn half_overlap_assignment_statistics() {
        let cfg = TaskConfig {
            overlap: 0.5,
            n_shards: 128,
            ..TaskConfig::default()
        };
        let a = assign_shards(&cfg, 2, 0, 0);
        let b = assign_shards(&cfg, 2, 1, 0);
        assert_eq!(a.len(), 64);
        let inter = a.iter().filter(|s| b.contains(s)).count() as f64 / a.len() as f64;
        assert!((0.4..=0.6).contains(&inter), "overlap {inter}");
    }

    #[test]
    fn assignments_never_touch_validator_range() {
        let cfg = TaskConfig::default();
        for ordinal in 0..200 {
            for s in assign_shards(&cfg, 3, ordinal, 8) {
                assert!(s < VALIDATOR_SHARD_BASE);
            }
        }
    }

    #[test]
    fn shard_record_roundtrip() {
        let t = task(TaskKind::Quadratic, 6);
        let shard = t.shard(9);
        let bytes = shard_to_bytes(&shard, t.label_kind());
        let (back, kind) = shard_from_bytes(&bytes).unwrap();
        assert_eq!(kind, LabelKind::Real);
        assert_eq!(back.id, shard.id);
        assert_eq!(back.data.features, shard.data.features);
        assert_eq!(back.data.labels, shard.data.labels);
        let mut corrupt = bytes;
        corrupt[30] ^= 0xFF;
        assert!(shard_from_bytes(&corrupt).is_err());
    }

    #[test]
    fn mlp_labels_cover_classes() {
        let t = task(TaskKind::Mlp, 0);
        let shard = t.shard(0);
        let mut seen = [false; MLP_OUT];
        for &l in &shard.data.labels {
            seen[l as usize] = true;
        }
        assert!(seen.iter().filter(|s| **s).count() >= 2);
    }
}
