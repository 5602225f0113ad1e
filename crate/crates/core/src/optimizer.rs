//! The sparse local-update optimization loop.
//!
//! Each peer runs H inner AdamW steps from the shared model, forms the
//! pseudo-gradient `global - local`, folds in its decayed error-feedback
//! buffer, and compresses the result chunk-wise. Replicas average the decoded
//! submissions (optionally median-normalized) and apply the outer step
//! `theta - alpha * mean`, which leaves every replica on the same model.

use serde::{Deserialize, Serialize};

use crate::chunk::effective_k;
use crate::codec::{
    decode_delta, quantize_chunk, topk_select, ChunkPlan, ChunkValues, CompressedChunk,
    CompressedDelta, ValueCoding,
};
use crate::error::{Error, Result};
use crate::params::{ParamVector, PeerId};

/// Inner AdamW hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InnerHyper {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for InnerHyper {
    fn default() -> Self {
        InnerHyper {
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            epsilon: 1e-8,
        }
    }
}

/// Per-peer AdamW moments.
#[derive(Debug, Clone)]
pub struct InnerOptState {
    m: Vec<f64>,
    v: Vec<f64>,
    step_count: u64,
    pub hyper: InnerHyper,
}

impl InnerOptState {
    pub fn new(param_len: usize, hyper: InnerHyper) -> Self {
        InnerOptState {
            m: vec![0.0; param_len],
            v: vec![0.0; param_len],
            step_count: 0,
            hyper,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// One AdamW step with decoupled weight decay:
/// `params -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * params)`.
pub fn inner_step(
    params: &mut ParamVector,
    state: &mut InnerOptState,
    grad: &ParamVector,
    lr: f64,
) -> Result<()> {
    if !params.same_layout(grad) || state.m.len() != params.len() {
        return Err(Error::InvalidArgument(
            "shapes disagree between params, state, and gradient".into(),
        ));
    }
    if lr < 0.0 {
        return Err(Error::InvalidArgument(format!("negative lr {lr}")));
    }
    if grad.values().iter().any(|g| !g.is_finite()) {
        return Err(Error::InvalidData("non-finite gradient".into()));
    }
    state.step_count += 1;
    let h = state.hyper;
    let bias1 = 1.0 - libm::pow(h.beta1, state.step_count as f64);
    let bias2 = 1.0 - libm::pow(h.beta2, state.step_count as f64);
    for ((p, g), (m, v)) in params
        .values_mut()
        .iter_mut()
        .zip(grad.values())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = h.beta1 * *m + (1.0 - h.beta1) * g;
        *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= lr * (m_hat / (libm::sqrt(v_hat) + h.epsilon) + h.weight_decay * *p);
    }
    Ok(())
}

/// `global - local`, elementwise.
pub fn pseudo_gradient(global: &ParamVector, local: &ParamVector) -> Result<ParamVector> {
    if !global.same_layout(local) {
        return Err(Error::InvalidArgument("layout mismatch".into()));
    }
    let values = global
        .values()
        .iter()
        .zip(local.values())
        .map(|(g, l)| g - l)
        .collect();
    ParamVector::new(values, global.layout().clone())
}

/// Decayed residual of everything not yet transmitted.
#[derive(Debug, Clone)]
pub struct ErrorFeedback {
    e: ParamVector,
    pub beta: f64,
}

impl ErrorFeedback {
    /// Zero buffer; this is the round-0 state.
    pub fn new(template: &ParamVector, beta: f64) -> Self {
        ErrorFeedback {
            e: ParamVector::zeros(template.layout().clone()),
            beta,
        }
    }

    pub fn buffer(&self) -> &ParamVector {
        &self.e
    }
}

/// Output of one compression pass.
pub struct Compressed {
    pub delta: CompressedDelta,
    /// Dense decode of `delta`; what the rest of the swarm will see.
    pub decoded: Vec<f64>,
}

/// Compresses `beta * e + delta` chunk-wise and advances the error-feedback
/// buffer to exactly `buffer - decoded`.
pub fn compress_with_ef(
    delta: &ParamVector,
    ef: &mut ErrorFeedback,
    plan: &ChunkPlan,
    coding: ValueCoding,
    base_round: u64,
    peer: PeerId,
) -> Result<Compressed> {
    if !delta.same_layout(&ef.e) {
        return Err(Error::InvalidArgument(
            "delta and error feedback disagree on layout".into(),
        ));
    }
    if delta.layout().digest() != plan.layout_digest {
        return Err(Error::InvalidArgument(
            "chunk plan belongs to a different layout".into(),
        ));
    }
    let beta = ef.beta;
    let buffer: Vec<f64> =
        ef.e.values()
            .iter()
            .zip(delta.values())
            .map(|(e, d)| beta * e + d)
            .collect();

    let mut chunks = Vec::with_capacity(plan.descriptors.len());
    let mut decoded = vec![0.0f64; buffer.len()];
    let mut scratch = Vec::with_capacity(plan.geometry.chunk_1d());
    for desc in &plan.descriptors {
        scratch.clear();
        scratch.extend(desc.positions().map(|p| buffer[p]));
        let k = effective_k(desc.len, &plan.geometry);
        let (indices, values) = topk_select(&scratch, k)?;
        let chunk_values = match coding {
            ValueCoding::TwoBit => quantize_chunk(&values),
            ValueCoding::Raw => ChunkValues::Raw { values },
        };
        let chunk = CompressedChunk {
            indices,
            values: chunk_values,
        };
        for (&rel, value) in chunk.indices.iter().zip(chunk.decode_values()) {
            decoded[desc.position(usize::from(rel))] = value;
        }
        chunks.push(chunk);
    }

    for ((e, b), d) in ef.e.values_mut().iter_mut().zip(&buffer).zip(&decoded) {
        *e = b - d;
    }

    Ok(Compressed {
        delta: CompressedDelta {
            base_round,
            peer,
            layout_digest: plan.layout_digest,
            chunks,
            coding,
        },
        decoded,
    })
}

/// Decodes submissions in ascending peer order so the averaging order (and
/// therefore the result) is bitwise deterministic.
pub fn decode_sorted(
    deltas: &[&CompressedDelta],
    plan: &ChunkPlan,
) -> Result<Vec<(PeerId, Vec<f64>)>> {
    let mut sorted: Vec<&CompressedDelta> = deltas.to_vec();
    sorted.sort_by_key(|d| d.peer);
    sorted
        .iter()
        .map(|d| Ok((d.peer, decode_delta(d, plan)?)))
        .collect()
}

/// Mean of the decoded submissions, summed in ascending peer order.
pub fn aggregate(deltas: &[&CompressedDelta], plan: &ChunkPlan) -> Result<Vec<f64>> {
    if deltas.is_empty() {
        return Err(Error::InvalidArgument("no deltas to aggregate".into()));
    }
    let base = deltas[0].base_round;
    for d in deltas {
        if d.base_round != base {
            return Err(Error::StaleSubmission(format!(
                "delta from peer {} builds on round {}, expected {base}",
                d.peer, d.base_round
            )));
        }
        if d.layout_digest != plan.layout_digest {
            return Err(Error::InvalidData("layout digest mismatch".into()));
        }
    }
    let decoded = decode_sorted(deltas, plan)?;
    Ok(mean_dense(
        &decoded.iter().map(|(_, v)| v.clone()).collect::<Vec<_>>(),
    ))
}

/// Elementwise mean of already-decoded vectors, in the given order.
pub fn mean_dense(vectors: &[Vec<f64>]) -> Vec<f64> {
    assert!(!vectors.is_empty());
    let mut sum = vec![0.0f64; vectors[0].len()];
    for v in vectors {
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    let r = vectors.len() as f64;
    for s in &mut sum {
        *s /= r;
    }
    sum
}

/// Outer step: `theta -= alpha * aggregate`.
pub fn outer_step(global: &mut ParamVector, aggregate: &[f64], alpha: f64) -> Result<()> {
    if global.len() != aggregate.len() {
        return Err(Error::InvalidArgument("shapes disagree".into()));
    }
    for (p, a) in global.values_mut().iter_mut().zip(aggregate) {
        *p -= alpha * a;
    }
    Ok(())
}

/// Rescales every nonzero vector to the median L2 norm (lower median for
/// even counts) so no single contribution can dominate the mean.
pub fn median_normalize(vectors: &mut [Vec<f64>]) {
    if vectors.is_empty() {
        return;
    }
    let norms: Vec<f64> = vectors
        .iter()
        .map(|v| libm::sqrt(v.iter().map(|x| x * x).sum()))
        .collect();
    let mut sorted = norms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[(sorted.len() - 1) / 2];
    for (v, norm) in vectors.iter_mut().zip(&norms) {
        if *norm > 0.0 {
            let factor = median / norm;
            for x in v.iter_mut() {
                *x *= factor;
            }
        }
    }
}

/// Outer-loop configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OuterConfig {
    /// Outer learning rate (alpha).
    pub alpha: f64,
    /// Inner steps per round (H).
    pub h: u64,
    /// Max contributors aggregated per round.
    pub r_cap: usize,
}

impl Default for OuterConfig {
    fn default() -> Self {
        OuterConfig {
            alpha: 1.0,
            h: 30,
            r_cap: 20,
        }
    }
}

impl OuterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 {
            return Err(Error::Config(format!(
                "optimizer.alpha: must be > 0, got {}",
                self.alpha
            )));
        }
        if self.h == 0 {
            return Err(Error::Config("optimizer.h: must be >= 1".into()));
        }
        if self.r_cap == 0 {
            return Err(Error::Config("gauntlet.cap: must be >= 1".into()));
        }
        Ok(())
    }
}

/// Optional re-warm-then-decay tail appended after the main cosine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSegment {
    pub warmup_steps: u64,
    pub decay_steps: u64,
    pub peak: f64,
}

/// Inner learning-rate schedule: linear warmup, cosine decay with a flatten
/// window, optional anneal tail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub warmup_steps: u64,
    pub peak: f64,
    pub floor: f64,
    pub flatten_start: u64,
    pub flatten_len: u64,
    pub total_steps: u64,
    pub anneal: Option<AnnealSegment>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            warmup_steps: 1_500,
            peak: 1.2e-4,
            floor: 1.2e-5,
            flatten_start: 80_000,
            flatten_len: 13_500,
            total_steps: 170_000,
            anneal: None,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_steps < self.flatten_start && self.flatten_start < self.total_steps) {
            return Err(Error::Config(
                "schedule: require warmup_steps < flatten_start < total_steps".into(),
            ));
        }
        if self.flatten_start + self.flatten_len > self.total_steps {
            return Err(Error::Config(
                "schedule: flatten window must end before total_steps".into(),
            ));
        }
        if self.floor >= self.peak || self.floor <= 0.0 {
            return Err(Error::Config("schedule: require 0 < floor < peak".into()));
        }
        Ok(())
    }

    /// Last valid step index, including the anneal tail.
    pub fn horizon(&self) -> u64 {
        self.total_steps + self.anneal.map_or(0, |a| a.warmup_steps + a.decay_steps)
    }
}

/// Cosine from peak to floor over an effective duration shortened by the
/// flatten window; the window freezes the value it reached, and afterwards
/// the same curve continues phase-shifted so it still lands on the floor at
/// `total_steps`.
fn cosine_at(schedule: &LrSchedule, u: u64) -> f64 {
    let duration = schedule.total_steps - schedule.warmup_steps - schedule.flatten_len;
    let frac = (u as f64 / duration as f64).clamp(0.0, 1.0);
    schedule.floor
        + 0.5 * (schedule.peak - schedule.floor) * (1.0 + libm::cos(std::f64::consts::PI * frac))
}

pub fn inner_lr_at(step: u64, schedule: &LrSchedule) -> Result<f64> {
    if step > schedule.horizon() {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond schedule horizon {}",
            schedule.horizon()
        )));
    }
    if step < schedule.warmup_steps {
        return Ok(schedule.peak * step as f64 / schedule.warmup_steps as f64);
    }
    if step <= schedule.total_steps {
        let flat_end = schedule.flatten_start + schedule.flatten_len;
        let u = if step < schedule.flatten_start {
            step - schedule.warmup_steps
        } else if step < flat_end {
            schedule.flatten_start - schedule.warmup_steps
        } else {
            step - schedule.warmup_steps - schedule.flatten_len
        };
        return Ok(cosine_at(schedule, u));
    }
    // Anneal tail: linear re-warm from the floor, then linear decay back.
    let anneal = schedule
        .anneal
        .expect("horizon() bounds the step within the anneal tail");
    let into = step - schedule.total_steps;
    if into <= anneal.warmup_steps {
        let frac = into as f64 / anneal.warmup_steps.max(1) as f64;
        return Ok(schedule.floor + (anneal.peak - schedule.floor) * frac);
    }
    let frac = (into - anneal.warmup_steps) as f64 / anneal.decay_steps.max(1) as f64;
    Ok(anneal.peak - (anneal.peak - schedule.floor) * frac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunk::ChunkGeometry;
    use crate::params::{Layout, TensorSpec};
    use std::sync::Arc;

    fn layout(n: usize) -> Arc<Layout> {
        Arc::new(Layout::new(vec![TensorSpec::new("x", &[n]).unwrap()]).unwrap())
    }

    fn vector(vals: &[f64]) -> ParamVector {
        ParamVector::new(vals.to_vec(), layout(vals.len())).unwrap()
    }

    #[test]
    fn zero_grad_zero_wd_leaves_params() {
        let mut p = vector(&[1.0, -2.0, 3.0]);
        let mut st = InnerOptState::new(
            3,
            InnerHyper {
                weight_decay: 0.0,
                ..InnerHyper::default()
            },
        );
        let g = vector(&[0.0, 0.0, 0.0]);
        inner_step(&mut p, &mut st, &g, 0.1).unwrap();
        assert_eq!(p.values(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_has_unit_normalized_magnitude() {
        // f(x) = x^2 at x0 = 1: grad 2. Bias-corrected AdamW step 1 moves by
        // lr * g/(|g| + eps) ~= lr.
        let mut p = vector(&[1.0]);
        let mut st = InnerOptState::new(
            1,
            InnerHyper {
                weight_decay: 0.0,
                ..InnerHyper::default()
            },
        );
        let g = vector(&[2.0]);
        inner_step(&mut p, &mut st, &g, 0.1).unwrap();
        assert!((p.values()[0] - 0.9).abs() < 1e-6, "{}", p.values()[0]);
    }

    /// Reference scalar AdamW on f(x) = x^2, written independently of
    /// `inner_step`.
    fn reference_adamw(x0: f64, lr: f64, steps: usize) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.95f64, 1e-8);
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        for t in 1..=steps as i32 {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh: f64 = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        x
    }

    #[test]
    fn quadratic_converges_and_matches_reference() {
        let mut p = vector(&[1.0]);
        let mut st = InnerOptState::new(
            1,
            InnerHyper {
                weight_decay: 0.0,
                ..InnerHyper::default()
            },
        );
        for _ in 0..200 {
            let g = vector(&[2.0 * p.values()[0]]);
            inner_step(&mut p, &mut st, &g, 0.05).unwrap();
        }
        assert!(p.values()[0].abs() < 1e-3, "{}", p.values()[0]);
        let reference = reference_adamw(1.0, 0.05, 200);
        assert!((p.values()[0] - reference).abs() < 1e-12);
    }

    #[test]
    fn inner_step_rejects_nonfinite_grad() {
        let mut p = vector(&[1.0]);
        let mut st = InnerOptState::new(1, InnerHyper::default());
        let mut g = vector(&[0.0]);
        g.values_mut()[0] = f64::NAN;
        assert!(inner_step(&mut p, &mut st, &g, 0.1).is_err());
    }

    #[test]
    fn pseudo_gradient_examples() {
        let g = vector(&[1.0, 2.0]);
        let l = vector(&[0.0, 4.0]);
        assert_eq!(pseudo_gradient(&g, &l).unwrap().values(), &[1.0, -2.0]);
        assert_eq!(pseudo_gradient(&g, &g).unwrap().values(), &[0.0, 0.0]);
        let other = vector(&[1.0, 2.0, 3.0]);
        assert!(pseudo_gradient(&g, &other).is_err());
    }

    #[test]
    fn pseudo_gradient_aligns_with_mean_step_direction() {
        // H inner steps on a quadratic; the pseudo-gradient must have a
        // non-negative inner product with the mean per-step movement.
        let start = vector(&[2.0, -1.5, 3.0]);
        let mut local = start.clone();
        let mut st = InnerOptState::new(3, InnerHyper::default());
        let mut mean_step = vec![0.0f64; 3];
        for _ in 0..30 {
            let g = vector(&[
                2.0 * local.values()[0],
                2.0 * local.values()[1],
                2.0 * local.values()[2],
            ]);
            let before = local.clone();
            inner_step(&mut local, &mut st, &g, 0.02).unwrap();
            for (m, (b, a)) in mean_step
                .iter_mut()
                .zip(before.values().iter().zip(local.values()))
            {
                *m += (b - a) / 30.0;
            }
        }
        let delta = pseudo_gradient(&start, &local).unwrap();
        let dot: f64 = delta
            .values()
            .iter()
            .zip(&mean_step)
            .map(|(d, m)| d * m)
            .sum();
        assert!(dot >= 0.0, "inner product {dot} negative");
    }

    fn plan(n: usize, geometry: ChunkGeometry) -> (Arc<Layout>, ChunkPlan) {
        let l = layout(n);
        let p = ChunkPlan::new(&l, geometry).unwrap();
        (l, p)
    }

    #[test]
    fn lossless_compression_zeroes_error_feedback() {
        let (l, p) = plan(100, ChunkGeometry::lossless());
        let delta = ParamVector::new((0..100).map(|i| i as f64 - 50.0).collect(), l).unwrap();
        let mut ef = ErrorFeedback::new(&delta, 0.95);
        let out =
            compress_with_ef(&delta, &mut ef, &p, ValueCoding::Raw, 0, PeerId([1; 16])).unwrap();
        assert_eq!(out.decoded, delta.values());
        assert!(ef.buffer().values().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn dominant_coordinate_always_transmitted() {
        let (l, p) = plan(100, ChunkGeometry::standard()); // k_eff = 1
        let mut vals = vec![0.01; 100];
        vals[37] = 5.0;
        let delta = ParamVector::new(vals, l).unwrap();
        let mut ef = ErrorFeedback::new(&delta, 0.95);
        let out =
            compress_with_ef(&delta, &mut ef, &p, ValueCoding::TwoBit, 0, PeerId([1; 16])).unwrap();
        assert_eq!(out.delta.chunks[0].indices, vec![37]);
        assert!(out.decoded[37] != 0.0);
    }

    #[test]
    fn repeated_rounds_shrink_residual() {
        // beta = 0: two rounds with the same delta; the second round's
        // residual must not exceed the first's.
        let (l, p) = plan(64, ChunkGeometry::standard());
        let vals: Vec<f64> = (0..64).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
        let delta = ParamVector::new(vals, l).unwrap();
        let mut ef = ErrorFeedback::new(&delta, 0.0);
        let r1 =
            compress_with_ef(&delta, &mut ef, &p, ValueCoding::TwoBit, 0, PeerId([1; 16])).unwrap();
        let norm1 = ef.buffer().l2_norm();
        let first: std::collections::BTreeSet<u16> =
            r1.delta.chunks[0].indices.iter().copied().collect();
        let r2 =
            compress_with_ef(&delta, &mut ef, &p, ValueCoding::TwoBit, 1, PeerId([1; 16])).unwrap();
        let norm2 = ef.buffer().l2_norm();
        let second: std::collections::BTreeSet<u16> =
            r2.delta.chunks[0].indices.iter().copied().collect();
        assert!(norm2 <= norm1 + 1e-12, "{norm1} -> {norm2}");
        assert!(!second.is_empty() && !first.is_empty());
    }

    #[test]
    fn ef_identity_holds_per_round() {
        let (l, p) = plan(500, ChunkGeometry::standard());
        let mut stream = crate::rng::Stream::new(3, "ef");
        let delta = ParamVector::new(
            (0..500).map(|_| stream.next_gaussian()).collect(),
            l.clone(),
        )
        .unwrap();
        let mut ef = ErrorFeedback::new(&delta, 0.95);
        // Seed the buffer with one round, then check the identity on round 2.
        compress_with_ef(&delta, &mut ef, &p, ValueCoding::TwoBit, 0, PeerId([1; 16])).unwrap();
        let old_e: Vec<f64> = ef.buffer().values().to_vec();
        let out =
            compress_with_ef(&delta, &mut ef, &p, ValueCoding::TwoBit, 1, PeerId([1; 16])).unwrap();
        for (i, (&new_e, &decoded)) in ef.buffer().values().iter().zip(&out.decoded).enumerate() {
            let lhs = new_e + decoded;
            let rhs = 0.95 * old_e[i] + delta.values()[i];
            assert!(
                (lhs - rhs).abs() <= 4.0 * ulp(rhs.abs().max(lhs.abs()).max(decoded.abs())),
                "element {i}: lhs {lhs} rhs {rhs}"
            );
        }
    }

    fn ulp(x: f64) -> f64 {
        if x == 0.0 {
            return f64::MIN_POSITIVE;
        }
        let bits = x.abs().to_bits();
        f64::from_bits(bits + 1) - f64::from_bits(bits)
    }

    #[test]
    fn aggregate_examples() {
        let (l, p) = plan(2, ChunkGeometry::lossless());
        let make = |peer: u8, vals: [f64; 2]| {
            let d = ParamVector::new(vals.to_vec(), l.clone()).unwrap();
            let mut ef = ErrorFeedback::new(&d, 0.0);
            compress_with_ef(&d, &mut ef, &p, ValueCoding::Raw, 0, PeerId([peer; 16]))
                .unwrap()
                .delta
        };
        let a = make(1, [2.0, 0.0]);
        let b = make(2, [0.0, 2.0]);
        assert_eq!(aggregate(&[&a], &p).unwrap(), vec![2.0, 0.0]);
        assert_eq!(aggregate(&[&a, &b], &p).unwrap(), vec![1.0, 1.0]);
        // Permutation does not change the result bitwise.
        assert_eq!(
            aggregate(&[&a, &b], &p).unwrap(),
            aggregate(&[&b, &a], &p).unwrap()
        );
        assert!(aggregate(&[], &p).is_err());
        let mut stale = make(3, [1.0, 1.0]);
        stale.base_round = 7;
        assert!(matches!(
            aggregate(&[&a, &stale], &p),
            Err(Error::StaleSubmission(_))
        ));
    }

    #[test]
    fn outer_step_examples() {
        let mut g = vector(&[1.0, 2.0]);
        outer_step(&mut g, &[5.0, 5.0], 0.0).unwrap();
        assert_eq!(g.values(), &[1.0, 2.0]);
        outer_step(&mut g, &[1.0, 1.0], 0.65).unwrap();
        assert_eq!(g.values(), &[0.35, 1.35]);
    }

    #[test]
    fn outer_step_inverts_pseudo_gradient_at_alpha_one() {
        let global = vector(&[3.0, -1.0, 0.5]);
        let local = vector(&[2.5, -1.5, 0.75]);
        let delta = pseudo_gradient(&global, &local).unwrap();
        let mut theta = global.clone();
        outer_step(&mut theta, delta.values(), 1.0).unwrap();
        assert_eq!(theta.values(), local.values());
    }

    #[test]
    fn median_normalize_examples() {
        // Norms 1, 2, 4 -> everything lands on norm 2.
        let mut vecs = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![4.0, 0.0]];
        median_normalize(&mut vecs);
        for v in &vecs {
            let n = libm::sqrt(v.iter().map(|x| x * x).sum());
            assert!((n - 2.0).abs() < 1e-12, "{n}");
        }
        // Equal norms: unchanged.
        let mut same = vec![vec![3.0, 0.0], vec![0.0, 3.0]];
        let before = same.clone();
        median_normalize(&mut same);
        assert_eq!(same, before);
        // Zero vectors pass through.
        let mut with_zero = vec![vec![0.0, 0.0], vec![5.0, 0.0], vec![0.0, 1.0]];
        median_normalize(&mut with_zero);
        assert_eq!(with_zero[0], vec![0.0, 0.0]);
    }

    #[test]
    fn median_normalize_bounds_adversary() {
        let honest: Vec<Vec<f64>> = (0..9)
            .map(|i| vec![1.0 + 0.01 * i as f64, 0.0, 0.0])
            .collect();
        let mut all = honest.clone();
        all.push(vec![1e6, 1e6, 1e6]);
        median_normalize(&mut all);
        let median = 1.04; // lower median of the ten norms
        let adv_norm: f64 = libm::sqrt(all[9].iter().map(|x| x * x).sum());
        assert!((adv_norm - median).abs() < 1e-9, "{adv_norm}");
    }

    #[test]
    fn median_normalize_even_count_uses_lower_median() {
        let mut vecs = vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0]];
        median_normalize(&mut vecs);
        for v in &vecs {
            assert!((v[0].abs() - 2.0).abs() < 1e-12);
        }
    }

    fn schedule() -> LrSchedule {
        LrSchedule::default()
    }

    #[test]
    fn schedule_warmup_endpoints() {
        let s = schedule();
        assert_eq!(inner_lr_at(0, &s).unwrap(), 0.0);
        assert!((inner_lr_at(1_500, &s).unwrap() - 1.2e-4).abs() < 1e-18);
        assert!((inner_lr_at(s.total_steps, &s).unwrap() - 1.2e-5).abs() < 1e-18);
    }

    #[test]
    fn schedule_flatten_window_is_flat() {
        let s = schedule();
        let v = inner_lr_at(s.flatten_start, &s).unwrap();
        for step in [
            s.flatten_start,
            s.flatten_start + 1,
            s.flatten_start + s.flatten_len / 2,
            s.flatten_start + s.flatten_len - 1,
        ] {
            assert_eq!(inner_lr_at(step, &s).unwrap(), v);
        }
        // The step after the window continues the same curve.
        let resumed = inner_lr_at(s.flatten_start + s.flatten_len, &s).unwrap();
        assert!((resumed - v).abs() < 1e-8);
    }

    #[test]
    fn schedule_is_continuous() {
        let s = schedule();
        let mut prev = inner_lr_at(0, &s).unwrap();
        for step in 1..=s.total_steps {
            let cur = inner_lr_at(step, &s).unwrap();
            assert!(
                (cur - prev).abs() < 1e-6,
                "jump at step {step}: {prev} -> {cur}"
            );
            prev = cur;
        }
    }

    #[test]
    fn schedule_anneal_tail() {
        let mut s = schedule();
        s.anneal = Some(AnnealSegment {
            warmup_steps: 100,
            decay_steps: 400,
            peak: 6.0e-5,
        });
        assert!((inner_lr_at(s.total_steps + 100, &s).unwrap() - 6.0e-5).abs() < 1e-18);
        assert!((inner_lr_at(s.horizon(), &s).unwrap() - s.floor).abs() < 1e-18);
        assert!(inner_lr_at(s.horizon() + 1, &s).is_err());
    }

    #[test]
    fn schedule_out_of_range() {
        let s = schedule();
        assert!(inner_lr_at(s.total_steps + 1, &s).is_err());
    }
}
