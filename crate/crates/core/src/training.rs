//! Supervision from simulated sweeps and optimization of the occupancy model.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, ScanTrajectory, TrajectoryKind};
use crate::linalg::Vec3;
use crate::network::{Dense, Gradients, OccupancyModel, Workspace};
use crate::phantom::{AcousticProperties, PhantomSpec};
use crate::real::Real;
use crate::transmittance::{transmittance_along, transmittance_at, TransmittanceParams};

/// One labelled point on a scanline.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticSample<T> {
    pub x: Vec3<T>,
    pub theta: AcousticProperties<T>,
    pub label: u8,
    pub transmittance: T,
    pub sweep: TrajectoryKind,
    /// Unique across the whole dataset.
    pub frame_id: u32,
    pub scanline_id: u32,
    pub depth: T,
}

/// How occupied points lying in acoustic shadow are labelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShadowLabeling {
    /// Dropped: nobody can annotate what the beam never reached.
    #[default]
    Exclude,
    /// Labelled background, as a segmentation of the B-mode frame would be.
    Annotator,
    /// Ground-truth label kept.
    Truth,
}

/// One sample per (frame, scanline, depth) node inside the unit cube.
///
/// `theta` comes from the phantom field, the label from its occupancy and the
/// transmittance from integrating the same field along the scanline.
pub fn build_dataset<T: Real>(
    trajectories: &[ScanTrajectory<T>],
    phantom: &PhantomSpec,
    params: &TransmittanceParams,
    labeling: ShadowLabeling,
    rng_seed: u64,
) -> Result<Vec<AcousticSample<T>>> {
    if trajectories.is_empty() {
        return Err(Error::invalid("no trajectories to sample"));
    }
    params.validate()?;
    let cube = Aabb::<T>::unit();
    let field = |p: Vec3<T>| phantom.features_at(p.map(|c| c.max(T::zero()).min(T::one())), rng_seed);
    let threshold = T::lit(params.shadow_threshold);
    let mut out = Vec::new();
    let mut frame_base = 0u32;
    for traj in trajectories {
        let depths = traj.sample_depths();
        for frame in 0..traj.frames.len() {
            let frame_id = frame_base + frame as u32;
            for (scanline, ray) in traj.frame_rays(frame)?.iter().enumerate() {
                let profile = transmittance_along(ray, field, params)?;
                for &depth in &depths {
                    let x = ray.at(depth);
                    if !cube.contains(x) {
                        continue;
                    }
                    let transmittance = transmittance_at(depth, &profile)?;
                    let mut label = phantom.occupancy_at(x);
                    if label == 1 && transmittance < threshold {
                        match labeling {
                            ShadowLabeling::Exclude => continue,
                            ShadowLabeling::Annotator => label = 0,
                            ShadowLabeling::Truth => {}
                        }
                    }
                    out.push(AcousticSample {
                        x,
                        theta: phantom.features_at(x, rng_seed),
                        label,
                        transmittance,
                        sweep: traj.kind,
                        frame_id,
                        scanline_id: scanline as u32,
                        depth,
                    });
                }
            }
        }
        frame_base += traj.frames.len() as u32;
    }
    Ok(out)
}

/// Keeps `round(fraction · n)` samples of every frame, drawn uniformly without
/// replacement. Original order is preserved.
pub fn subsample<T: Real>(samples: &[AcousticSample<T>], fraction: f64, rng_seed: u64) -> Result<Vec<AcousticSample<T>>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("supervision fraction must lie in (0, 1]"));
    }
    if fraction == 1.0 {
        return Ok(samples.to_vec());
    }
    let mut frames: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        frames.entry(s.frame_id).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut keep = vec![false; samples.len()];
    for members in frames.values() {
        let k = (fraction * members.len() as f64).round() as usize;
        for j in index::sample(&mut rng, members.len(), k.min(members.len())) {
            keep[members[j]] = true;
        }
    }
    Ok(samples.iter().zip(keep).filter(|(_, k)| *k).map(|(s, _)| s.clone()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Cross-entropy against `T(x) · p`.
    #[default]
    AttenuationCompensated,
    /// Cross-entropy against `p`.
    PlainBce,
}

#[inline]
fn effective_transmittance<T: Real>(t: T, kind: LossKind) -> T {
    match kind {
        LossKind::AttenuationCompensated => t,
        LossKind::PlainBce => T::one(),
    }
}

/// `-[y·log(q) + (1-y)·log(1-q)]` with `q = clamp(t·p, eps, 1-eps)`.
pub fn loss<T: Real>(prob: T, label: u8, t: T, clamp_epsilon: T, kind: LossKind) -> T {
    let t = effective_transmittance(t, kind);
    let q = t * prob;
    if q.is_nan() {
        return q;
    }
    let q = q.max(clamp_epsilon).min(T::one() - clamp_epsilon);
    if label == 1 {
        -q.ln()
    } else {
        -(T::one() - q).ln()
    }
}

/// `dL/dp`; exactly zero wherever the clamp is active.
pub fn loss_grad<T: Real>(prob: T, label: u8, t: T, clamp_epsilon: T, kind: LossKind) -> T {
    let t = effective_transmittance(t, kind);
    let q = t * prob;
    if !(q > clamp_epsilon && q < T::one() - clamp_epsilon) {
        return T::zero();
    }
    if label == 1 {
        -t / q
    } else {
        t / (T::one() - q)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay_rate: f64,
    pub decay_steps: f64,
    pub supervision_fraction: f64,
    pub loss_kind: LossKind,
    pub clamp_epsilon: f64,
    /// Trace resolution in steps.
    pub log_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 50_000,
            batch_size: 256,
            learning_rate: 1e-4,
            decay_rate: 0.1,
            decay_steps: 250_000.0,
            supervision_fraction: 1.0,
            loss_kind: LossKind::AttenuationCompensated,
            clamp_epsilon: 1e-6,
            log_every: 100,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |f: &str, m: &str| Err(Error::config(format!("train.{f}"), m));
        if self.batch_size == 0 {
            return fail("batch_size", "must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate", "must be > 0");
        }
        if !(self.decay_rate > 0.0) {
            return fail("decay_rate", "must be > 0");
        }
        if !(self.decay_steps > 0.0) {
            return fail("decay_steps", "must be > 0");
        }
        if !(self.supervision_fraction > 0.0 && self.supervision_fraction <= 1.0) {
            return fail("supervision_fraction", "must lie in (0, 1]");
        }
        if !(self.clamp_epsilon > 0.0 && self.clamp_epsilon < 0.5) {
            return fail("clamp_epsilon", "must lie in (0, 0.5)");
        }
        if self.log_every == 0 {
            return fail("log_every", "must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1", "Adam betas must lie in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return fail("adam_epsilon", "must be > 0");
        }
        Ok(())
    }

    /// Step size after `step` updates: `lr · decay_rate^(step / decay_steps)`.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        self.learning_rate * self.decay_rate.powf(step as f64 / self.decay_steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub entries: Vec<TraceEntry>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,lr\n");
        for e in &self.entries {
            let _ = writeln!(s, "{},{:e},{:e}", e.step, e.loss, e.lr);
        }
        s
    }
}

/// Adam with bias-corrected moments. Frozen layers are skipped entirely.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    beta1: T,
    beta2: T,
    epsilon: T,
    step: i32,
    m: Vec<Dense<T>>,
    v: Vec<Dense<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(model: &OccupancyModel<T>, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros = Gradients::zeros_like(model).layers;
        Self { beta1: T::lit(beta1), beta2: T::lit(beta2), epsilon: T::lit(epsilon), step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update(&mut self, model: &mut OccupancyModel<T>, grads: &Gradients<T>, lr: T) {
        self.step += 1;
        let c1 = T::one() - self.beta1.powi(self.step);
        let c2 = T::one() - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        for li in 0..model.layers.len() {
            if model.is_layer_frozen(li) {
                continue;
            }
            let params = model.layers[li].params_mut();
            let g = grads.layers[li].params();
            let m = self.m[li].params_mut();
            let v = self.v[li].params_mut();
            for (((w, &g), m), v) in params.zip(g).zip(m).zip(v) {
                *m = flush(b1 * *m + (T::one() - b1) * g);
                *v = flush(b2 * *v + (T::one() - b2) * g * g);
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Zeroes subnormal values, which are pathologically slow on most CPUs.
fn flush<T: Real>(v: T) -> T {
    if v.abs() < T::min_positive_value() {
        T::zero()
    } else {
        v
    }
}

/// Encoded inputs and targets, ready for batching.
#[derive(Debug, Clone)]
pub struct TrainingSet<T> {
    pub dim: usize,
    pub inputs: Vec<T>,
    pub labels: Vec<u8>,
    pub transmittance: Vec<T>,
}

impl<T: Real> TrainingSet<T> {
    pub fn encode(model: &OccupancyModel<T>, samples: &[AcousticSample<T>]) -> Self {
        let dim = model.encoded_dim();
        let mut inputs = Vec::with_capacity(samples.len() * dim);
        for s in samples {
            model.encode_into(s.x, &s.theta, &mut inputs);
        }
        Self {
            dim,
            inputs,
            labels: samples.iter().map(|s| s.label).collect(),
            transmittance: samples.iter().map(|s| s.transmittance).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Runs `cfg.iterations` Adam steps on uniformly drawn mini-batches.
///
/// The trace stores the mean batch loss every `cfg.log_every` steps and at
/// the final step. Single-threaded and deterministic for a given seed.
pub fn train<T: Real>(
    mut model: OccupancyModel<T>,
    set: &TrainingSet<T>,
    cfg: &TrainConfig,
    rng_seed: u64,
) -> Result<(OccupancyModel<T>, LossTrace)> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if set.dim != model.encoded_dim() {
        return Err(Error::invalid("training set encoding does not match the model"));
    }
    let mut trace = LossTrace::default();
    if cfg.iterations == 0 {
        return Ok((model, trace));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut adam = Adam::new(&model, cfg.beta1, cfg.beta2, cfg.adam_epsilon);
    let mut ws = Workspace::default();
    let mut grads = Gradients::zeros_like(&model);
    // A batch at least as large as the set is plain full-batch descent.
    let full = cfg.batch_size >= set.len();
    let batch = if full { set.len() } else { cfg.batch_size };
    let eps = T::lit(cfg.clamp_epsilon);
    let inv_batch = T::one() / T::lit(batch as f64);
    let tiny = T::min_positive_value().sqrt();
    let mut inputs = Vec::with_capacity(batch * set.dim);
    let mut picks = Vec::with_capacity(batch);
    let mut upstream = Vec::with_capacity(batch);

    for step in 0..cfg.iterations {
        picks.clear();
        inputs.clear();
        for b in 0..batch {
            let i = if full { b } else { rng.gen_range(0..set.len()) };
            picks.push(i);
            inputs.extend_from_slice(&set.inputs[i * set.dim..(i + 1) * set.dim]);
        }
        let probs = model.forward_batch(&inputs, &mut ws)?;
        let mut total = T::zero();
        upstream.clear();
        for (&p, &i) in probs.iter().zip(&picks) {
            let (y, t) = (set.labels[i], set.transmittance[i]);
            total += loss(p, y, t, eps, cfg.loss_kind);
            let g = loss_grad(p, y, t, eps, cfg.loss_kind) * inv_batch;
            // Logit gradients this small cannot move an Adam step past its
            // epsilon; dropping them keeps subnormals out of the backward pass.
            upstream.push(if (g * p * (T::one() - p)).abs() < tiny { T::zero() } else { g });
        }
        let mean = total * inv_batch;
        let lr = cfg.learning_rate_at(step);
        if !mean.is_finite() || upstream.iter().any(|g| !g.is_finite()) {
            let finite_probs = probs.iter().filter(|p| p.is_finite()).count();
            return Err(Error::NonFiniteLoss {
                step,
                state: format!(
                    "lr={lr:e} batch_loss={mean} finite_probs={finite_probs}/{batch} params_finite={}",
                    model.is_finite()
                ),
            });
        }
        grads.clear();
        model.backward_batch(&mut ws, &upstream, &mut grads)?;
        adam.update(&mut model, &grads, T::lit(lr));
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.iterations {
            trace.entries.push(TraceEntry { step: step + 1, loss: mean.as_f64(), lr });
        }
    }
    Ok((model, trace))
}

/// Adapts `model` to a new phantom: freezes the last two layers, keeps
/// `fraction` of the labels per frame and trains for `iterations` steps.
pub fn finetune<T: Real>(
    model: OccupancyModel<T>,
    samples: &[AcousticSample<T>],
    fraction: f64,
    iterations: usize,
    cfg: &TrainConfig,
    rng_seed: u64,
) -> Result<(OccupancyModel<T>, LossTrace)> {
    let model = model.freeze_suffix(2)?;
    let subset = subsample(samples, fraction, rng_seed)?;
    let set = TrainingSet::encode(&model, &subset);
    let cfg = TrainConfig { iterations, supervision_fraction: fraction, ..cfg.clone() };
    train(model, &set, &cfg, rng_seed.wrapping_add(1))
}

const DATASET_MAGIC: &[u8; 8] = b"SONOCCDS";
const DATASET_VERSION: u32 = 1;
const RECORD_BYTES: usize = 1 + 4 + 4 + 1 + 8 * 8;

/// Writes samples in the little-endian binary dataset layout (see README).
pub fn write_dataset<T: Real>(path: &Path, samples: &[AcousticSample<T>]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(DATASET_MAGIC)?;
    put(&DATASET_VERSION.to_le_bytes())?;
    put(&(samples.len() as u64).to_le_bytes())?;
    for s in samples {
        put(&[s.sweep.code()])?;
        put(&s.frame_id.to_le_bytes())?;
        put(&s.scanline_id.to_le_bytes())?;
        put(&[s.label])?;
        for v in [s.depth, s.x.x, s.x.y, s.x.z, s.theta.alpha, s.theta.beta, s.theta.phi, s.transmittance] {
            put(&v.as_f64().to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset<T: Real>(path: &Path) -> Result<Vec<AcousticSample<T>>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m);
    if bytes.len() < 20 || &bytes[..8] != DATASET_MAGIC {
        return Err(bad("not a sonocc dataset"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(bad("unsupported dataset version"));
    }
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() != count * RECORD_BYTES {
        return Err(bad("record count does not match file length"));
    }
    body.chunks_exact(RECORD_BYTES)
        .map(|r| {
            let sweep = TrajectoryKind::from_code(r[0]).ok_or_else(|| bad("unknown sweep code"))?;
            let f = |i: usize| T::lit(f64::from_le_bytes(r[10 + 8 * i..18 + 8 * i].try_into().unwrap()));
            if r[9] > 1 {
                return Err(bad("label must be 0 or 1"));
            }
            Ok(AcousticSample {
                sweep,
                frame_id: u32::from_le_bytes(r[1..5].try_into().unwrap()),
                scanline_id: u32::from_le_bytes(r[5..9].try_into().unwrap()),
                label: r[9],
                depth: f(0),
                x: Vec3::new(f(1), f(2), f(3)),
                theta: AcousticProperties::new(f(4), f(5), f(6)),
                transmittance: f(7),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_trajectory, TrajectorySpec};
    use crate::network::{EncodingConfig, InputKind, NetworkConfig};
    use crate::phantom::presets;

    const EPS: f64 = 1e-6;

    fn spec(kind: TrajectoryKind, frames: usize, scanlines: usize, samples: usize) -> TrajectorySpec {
        TrajectorySpec { kind, frames, extent: Aabb::unit(), scanlines_per_frame: scanlines, samples_per_scanline: samples }
    }

    fn empty_phantom() -> PhantomSpec {
        let mut p = presets::sphere([0.5, 0.5, 0.5], 0.2);
        p.solids.clear();
        p
    }

    #[test]
    fn empty_phantom_yields_background_labels() {
        let t = spec(TrajectoryKind::Row, 1, 1, 32).build::<f64>().unwrap();
        let d = build_dataset(&[t], &empty_phantom(), &TransmittanceParams::default(), ShadowLabeling::Truth, 0).unwrap();
        assert_eq!(d.len(), 32);
        assert!(d.iter().all(|s| s.label == 0));
    }

    #[test]
    fn sphere_labels_form_one_run() {
        let (c, r) = (0.5, 0.2);
        let phantom = presets::sphere([c, c, c], r);
        let t = spec(TrajectoryKind::Row, 1, 1, 100).build::<f64>().unwrap();
        let d = build_dataset(&[t], &phantom, &TransmittanceParams::default(), ShadowLabeling::Truth, 0).unwrap();
        let labels: Vec<u8> = d.iter().map(|s| s.label).collect();
        let first = labels.iter().position(|&l| l == 1).unwrap();
        let last = labels.iter().rposition(|&l| l == 1).unwrap();
        assert!(labels[first..=last].iter().all(|&l| l == 1));
        // central ray: entry at c - r, exit at c + r
        assert!((d[first].depth - (c - r)).abs() <= 0.01);
        assert!((d[last].depth - (c + r)).abs() <= 0.01);
    }

    #[test]
    fn sample_count_is_product_of_grid() {
        let t = spec(TrajectoryKind::Column, 3, 5, 16).build::<f64>().unwrap();
        let d = build_dataset(&[t], &empty_phantom(), &TransmittanceParams::default(), ShadowLabeling::Truth, 0).unwrap();
        assert_eq!(d.len(), 3 * 5 * 16);
    }

    #[test]
    fn samples_match_their_profiles() {
        let phantom = presets::vertebra(0);
        let params = TransmittanceParams::default();
        let t = spec(TrajectoryKind::Row, 2, 4, 64).build::<f64>().unwrap();
        let d = build_dataset(std::slice::from_ref(&t), &phantom, &params, ShadowLabeling::Truth, 3).unwrap();
        let field = |p: Vec3<f64>| phantom.features_at(p, 3);
        for s in d.iter().step_by(17) {
            let ray = t.frame_rays(s.frame_id as usize).unwrap()[s.scanline_id as usize];
            let prof = transmittance_along(&ray, field, &params).unwrap();
            assert!((transmittance_at(s.depth, &prof).unwrap() - s.transmittance).abs() < 1e-6);
        }
    }

    #[test]
    fn shadow_labeling_modes() {
        let phantom = presets::vertebra(0);
        let params = TransmittanceParams::default();
        let t = spec(TrajectoryKind::Row, 3, 16, 64).build::<f64>().unwrap();
        let build = |mode| build_dataset(std::slice::from_ref(&t), &phantom, &params, mode, 1).unwrap();
        let truth = build(ShadowLabeling::Truth);
        let shadowed_bone = truth.iter().filter(|s| s.label == 1 && s.transmittance < 0.05).count();
        assert!(shadowed_bone > 0);
        let excluded = build(ShadowLabeling::Exclude);
        assert_eq!(excluded.len(), truth.len() - shadowed_bone);
        let annot = build(ShadowLabeling::Annotator);
        assert_eq!(annot.len(), truth.len());
        let ones = |d: &[AcousticSample<f64>]| d.iter().filter(|s| s.label == 1).count();
        assert_eq!(ones(&annot), ones(&truth) - shadowed_bone);
    }

    #[test]
    fn no_trajectories_is_an_error() {
        let r = build_dataset::<f64>(&[], &empty_phantom(), &TransmittanceParams::default(), ShadowLabeling::Truth, 0);
        assert!(r.is_err());
    }

    fn frames_of(n_frames: u32, per: usize) -> Vec<AcousticSample<f64>> {
        (0..n_frames)
            .flat_map(|f| {
                (0..per).map(move |i| AcousticSample {
                    x: Vec3::splat(0.5),
                    theta: AcousticProperties::new(i as f64, 0.0, 0.0),
                    label: 0,
                    transmittance: 1.0,
                    sweep: TrajectoryKind::Row,
                    frame_id: f,
                    scanline_id: i as u32,
                    depth: 0.1,
                })
            })
            .collect()
    }

    #[test]
    fn subsample_full_fraction_is_identity() {
        let s = frames_of(3, 50);
        assert_eq!(subsample(&s, 1.0, 5).unwrap(), s);
    }

    #[test]
    fn subsample_per_frame_counts() {
        let s = frames_of(4, 1000);
        let sub = subsample(&s, 0.1, 5).unwrap();
        for f in 0..4 {
            assert_eq!(sub.iter().filter(|x| x.frame_id == f).count(), 100);
        }
        assert_eq!(sub, subsample(&s, 0.1, 5).unwrap());
        assert!(subsample(&s, 0.0, 5).is_err());
        assert!(subsample(&s, 1.5, 5).is_err());
    }

    #[test]
    fn different_seeds_pick_different_subsets() {
        // Two independent 100-of-1000 draws coincide with probability 1/C(1000,100).
        let s = frames_of(1, 1000);
        let ids = |seed| subsample(&s, 0.1, seed).unwrap().iter().map(|x| x.scanline_id).collect::<Vec<_>>();
        let mut distinct = 0;
        for seed in 0..20 {
            if ids(seed) != ids(seed + 100) {
                distinct += 1;
            }
        }
        assert_eq!(distinct, 20);
    }

    #[test]
    fn loss_examples() {
        let near_one = loss(1.0 - EPS, 1, 1.0, EPS, LossKind::AttenuationCompensated);
        assert!((near_one - (-(1.0f64 - EPS).ln())).abs() < 1e-15);
        let occluded = loss(0.73, 0, 0.0, EPS, LossKind::AttenuationCompensated);
        assert!((occluded - (-(1.0f64 - EPS).ln())).abs() < 1e-15);
        let half = loss(0.5, 0, 1.0, EPS, LossKind::AttenuationCompensated);
        assert!((half - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn occlusion_neutral_gradient() {
        for p in [1e-3, 0.2, 0.5, 0.999] {
            assert_eq!(loss_grad(p, 0, 0.0, EPS, LossKind::AttenuationCompensated), 0.0);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let h = 1e-7;
        for &(p, y, t) in &[(0.3, 1u8, 0.8), (0.7, 0, 0.9), (0.5, 1, 1.0), (0.05, 0, 0.4), (0.9, 1, 0.3)] {
            for kind in [LossKind::AttenuationCompensated, LossKind::PlainBce] {
                let fd = (loss(p + h, y, t, EPS, kind) - loss(p - h, y, t, EPS, kind)) / (2.0 * h);
                let an = loss_grad(p, y, t, EPS, kind);
                assert!(((fd - an) / an).abs() < 1e-5, "p={p} y={y} t={t}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig { learning_rate: 1e-3, decay_rate: 0.1, decay_steps: 1000.0, ..Default::default() };
        assert_eq!(cfg.learning_rate_at(0), 1e-3);
        assert!((cfg.learning_rate_at(1000) - 1e-4).abs() < 1e-18);
    }

    fn tiny(seed: u64) -> OccupancyModel<f64> {
        let cfg = NetworkConfig {
            input_kind: InputKind::AcousticFeatures,
            encoding: EncodingConfig { num_frequencies: 0, include_input: true },
            hidden_layers: 2,
            hidden_width: 8,
            skip_at: None,
            input_scale: [1.0; 3],
        };
        OccupancyModel::new(cfg, seed).unwrap()
    }

    fn separable(n: usize) -> TrainingSet<f64> {
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let a = i as f64 / n as f64;
            inputs.extend_from_slice(&[a, 1.0 - a, 0.5]);
            labels.push(u8::from(a > 0.5));
        }
        TrainingSet { dim: 3, inputs, labels, transmittance: vec![1.0; n] }
    }

    #[test]
    fn zero_iterations_leave_model_unchanged() {
        let m = tiny(1);
        let cfg = TrainConfig { iterations: 0, ..Default::default() };
        let (out, trace) = train(m.clone(), &separable(16), &cfg, 0).unwrap();
        assert_eq!(out, m);
        assert!(trace.entries.is_empty());
    }

    #[test]
    fn converges_on_separable_batch() {
        let set = separable(32);
        let cfg = TrainConfig {
            iterations: 500,
            batch_size: 32,
            learning_rate: 1e-2,
            decay_steps: 1e9,
            log_every: 1,
            ..Default::default()
        };
        let (_, trace) = train(tiny(2), &set, &cfg, 7).unwrap();
        let losses: Vec<f64> = trace.entries.iter().map(|e| e.loss).collect();
        let smooth: Vec<f64> = losses.windows(50).map(|w| w.iter().sum::<f64>() / 50.0).collect();
        assert!(smooth.windows(2).all(|w| w[1] <= w[0]), "smoothed loss not monotone");
        assert!(smooth.last().unwrap() < &(0.5 * smooth[0]));
    }

    #[test]
    fn training_is_deterministic() {
        let set = separable(40);
        let cfg = TrainConfig { iterations: 50, batch_size: 8, learning_rate: 1e-2, log_every: 5, ..Default::default() };
        let a = train(tiny(3), &set, &cfg, 11).unwrap();
        let b = train(tiny(3), &set, &cfg, 11).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn frozen_layers_stay_fixed() {
        let set = separable(40);
        let cfg = TrainConfig { iterations: 20, batch_size: 8, learning_rate: 1e-2, ..Default::default() };
        let m = tiny(4);
        let total = m.layers.len();
        let (out, _) = train(m.clone().freeze_suffix(2).unwrap(), &set, &cfg, 1).unwrap();
        assert_eq!(out.layers[total - 2..], m.layers[total - 2..]);
        assert_ne!(out.layers[0], m.layers[0]);
        let (all, _) = train(m.clone().freeze_suffix(total).unwrap(), &set, &cfg, 1).unwrap();
        assert_eq!(all.layers, m.layers);
        let (none, _) = train(m.clone().freeze_suffix(0).unwrap(), &set, &cfg, 1).unwrap();
        assert_ne!(none.layers[total - 1], m.layers[total - 1]);
    }

    #[test]
    fn nan_loss_aborts_with_state() {
        let mut m = tiny(5);
        m.layers[0].weights[0] = f64::NAN;
        let cfg = TrainConfig { iterations: 3, batch_size: 4, ..Default::default() };
        match train(m, &separable(8), &cfg, 0) {
            Err(Error::NonFiniteLoss { step, state }) => {
                assert_eq!(step, 0);
                assert!(state.contains("params_finite=false"));
            }
            other => panic!("expected NaN abort, got {other:?}"),
        }
    }

    #[test]
    fn dataset_file_roundtrip() {
        let t = make_trajectory::<f64>(TrajectoryKind::TiltedPlus10, 2, Aabb::unit()).unwrap();
        let d = build_dataset(&[t], &presets::vertebra(0), &TransmittanceParams::default(), ShadowLabeling::Exclude, 2).unwrap();
        let path = std::env::temp_dir().join(format!("sonocc-ds-{}.bin", std::process::id()));
        write_dataset(&path, &d).unwrap();
        let back: Vec<AcousticSample<f64>> = read_dataset(&path).unwrap();
        assert_eq!(back, d);
        std::fs::write(&path, b"garbage").unwrap();
        assert!(matches!(read_dataset::<f64>(&path), Err(Error::Format { .. })));
        std::fs::remove_file(&path).ok();
    }
}
