//! Metric-learning training loop: Adam, batch-hard triplet mining, the
//! triplet margin loss, and the dynamic batch sizing rule.
//!
//! Mining runs on descriptor values (no gradients) and picks, per anchor,
//! the most distant positive and the closest negative. The loss subgraph is
//! then built over row gathers of the descriptor node, so gradients flow
//! only through the selected triplets, and only anchors that have at least
//! one positive and one negative participate.

use std::ops::Range;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::{StemMaps, SvtNet};
use crate::params::{Binder, ParamStore};
use crate::rng;
use crate::scalar::Scalar;
use crate::sparse::{PointCloud, SparseVoxelGrid, VoxelBatch};
use std::sync::Arc;

/// Adam hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are allocated per store entry;
/// parameters whose gradient is absent in a step keep their moments.
pub struct Adam<S: Scalar> {
    config: AdamConfig,
    t: u64,
    m: Vec<Array2<S>>,
    v: Vec<Array2<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, config: AdamConfig) -> Self {
        let m = store
            .iter()
            .map(|(_, e)| Array2::zeros(e.value.dim()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Self { config, t: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one update with learning rate `lr` using `grads`, indexed by
    /// store position (as produced by [`collect_grads`]). A non-finite
    /// gradient aborts before any parameter is touched.
    pub fn step(
        &mut self,
        store: &mut ParamStore<S>,
        grads: &[Option<Array2<S>>],
        lr: f64,
    ) -> Result<()> {
        assert_eq!(grads.len(), store.len(), "gradient list misaligned");
        for id in store.ids() {
            if let Some(g) = grads[id.index()].as_ref() {
                if g.iter().any(|v| !v.to_f64_value().is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of {}",
                        store.name(id)
                    )));
                }
            }
        }
        self.t += 1;
        let b1 = S::of(self.config.beta1);
        let b2 = S::of(self.config.beta2);
        let one = S::one();
        let eps = S::of(self.config.eps);
        let corr1 = S::of(1.0 - self.config.beta1.powi(self.t as i32));
        let corr2 = S::of(1.0 - self.config.beta2.powi(self.t as i32));
        let lr = S::of(lr);
        for id in store.ids().collect::<Vec<_>>() {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads[id.index()].as_ref() else {
                continue;
            };
            let i = id.index();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = b1 * *m + (one - b1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = b2 * *v + (one - b2) * g * g;
            });
            let value = store.value_mut(id);
            ndarray::Zip::from(value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let m_hat = m / corr1;
                    let v_hat = v / corr2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

/// Copies the gradients of every bound parameter out of a backpropagated
/// tape, indexed by store position.
pub fn collect_grads<S: Scalar>(
    tape: &Tape<S>,
    binder: &Binder,
    store_len: usize,
) -> Vec<Option<Array2<S>>> {
    let mut grads = vec![None; store_len];
    for (pid, node) in binder.bound() {
        if let Some(g) = tape.grad(node) {
            grads[pid.index()] = Some(g.clone());
        }
    }
    grads
}

/// Cloud augmentation: four independent corruptions, each applied with its
/// own probability.
#[derive(Debug, Clone)]
pub struct AugmentConfig {
    pub jitter_prob: f64,
    /// Per-point gaussian jitter, clipped per coordinate.
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
    pub translation_prob: f64,
    /// Global translation, uniform per axis in ±range.
    pub translation_range: f64,
    pub removal_prob: f64,
    /// At most this fraction of points is dropped.
    pub removal_max_fraction: f64,
    pub erase_prob: f64,
    /// The erased cuboid's volume is at most this fraction of the cloud's
    /// bounding box.
    pub erase_max_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            jitter_prob: 0.5,
            jitter_sigma: 0.001,
            jitter_clip: 0.002,
            translation_prob: 0.5,
            translation_range: 0.01,
            removal_prob: 0.5,
            removal_max_fraction: 0.1,
            erase_prob: 0.5,
            erase_max_fraction: 0.1,
        }
    }
}

impl AugmentConfig {
    /// All probabilities zero: `augment` becomes the identity.
    pub fn disabled() -> Self {
        Self {
            jitter_prob: 0.0,
            translation_prob: 0.0,
            removal_prob: 0.0,
            erase_prob: 0.0,
            ..Self::default()
        }
    }
}

/// Applies the configured corruptions. The cloud never ends up empty: a
/// removal or erase that would delete every point is skipped.
pub fn augment<R: rand::Rng>(
    points: &[[f64; 3]],
    r: &mut R,
    config: &AugmentConfig,
) -> Vec<[f64; 3]> {
    use rand_distr::{Distribution, Normal};
    let mut pts = points.to_vec();

    if r.gen::<f64>() < config.jitter_prob {
        let noise = Normal::new(0.0, config.jitter_sigma).expect("sigma is finite");
        for p in &mut pts {
            for v in p.iter_mut() {
                *v += noise
                    .sample(r)
                    .clamp(-config.jitter_clip, config.jitter_clip);
            }
        }
    }

    if r.gen::<f64>() < config.translation_prob {
        let range = config.translation_range;
        let t = [
            r.gen_range(-range..=range),
            r.gen_range(-range..=range),
            r.gen_range(-range..=range),
        ];
        for p in &mut pts {
            for (v, d) in p.iter_mut().zip(t) {
                *v += d;
            }
        }
    }

    if r.gen::<f64>() < config.removal_prob {
        let max_drop = ((pts.len() as f64) * config.removal_max_fraction).floor() as usize;
        let drop = r.gen_range(0..=max_drop).min(pts.len().saturating_sub(1));
        for _ in 0..drop {
            let j = r.gen_range(0..pts.len());
            pts.swap_remove(j);
        }
    }

    if r.gen::<f64>() < config.erase_prob {
        let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
        for p in &pts {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        // Per-axis side fraction: the cube root of the volume fraction.
        let side = r.gen_range(0.0..=config.erase_max_fraction).cbrt();
        let mut c_lo = [0.0; 3];
        let mut c_hi = [0.0; 3];
        for a in 0..3 {
            let extent = hi[a] - lo[a];
            let len = extent * side;
            let start = lo[a] + r.gen::<f64>() * (extent - len);
            c_lo[a] = start;
            c_hi[a] = start + len;
        }
        let inside = |p: &[f64; 3]| (0..3).all(|a| p[a] >= c_lo[a] && p[a] <= c_hi[a]);
        if pts.iter().any(|p| !inside(p)) {
            pts.retain(|p| !inside(p));
        }
    }

    pts
}

/// How per-anchor hinge terms combine into the scalar loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossReduction {
    /// Mean over participating anchors.
    Mean,
    /// Plain sum.
    Sum,
}

#[derive(Debug, Clone)]
pub struct TripletConfig {
    pub margin: f64,
    pub reduction: LossReduction,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            reduction: LossReduction::Mean,
        }
    }
}

/// Indices of mined triplets; the three lists are parallel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinedTriplets {
    pub anchors: Vec<u32>,
    pub positives: Vec<u32>,
    pub negatives: Vec<u32>,
}

impl MinedTriplets {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

fn sq_distance<S: Scalar>(a: ArrayView1<S>, b: ArrayView1<S>) -> S {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

/// Batch-hard mining: per anchor, the farthest positive and the nearest
/// negative by descriptor distance. Ties resolve to the lowest index. An
/// anchor without both a positive and a negative is skipped.
pub fn mine_batch_hard<S: Scalar>(
    descriptors: &Array2<S>,
    positive: &Array2<bool>,
    negative: &Array2<bool>,
) -> MinedTriplets {
    let n = descriptors.nrows();
    debug_assert_eq!(positive.dim(), (n, n));
    debug_assert_eq!(negative.dim(), (n, n));
    let mut mined = MinedTriplets {
        anchors: Vec::new(),
        positives: Vec::new(),
        negatives: Vec::new(),
    };
    for a in 0..n {
        let mut best_pos: Option<(usize, S)> = None;
        let mut best_neg: Option<(usize, S)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            if positive[[a, j]] {
                let d = sq_distance(descriptors.row(a), descriptors.row(j));
                // Strict comparison keeps the first (lowest-index) maximum.
                if best_pos.map(|(_, bd)| d > bd).unwrap_or(true) {
                    best_pos = Some((j, d));
                }
            }
            if negative[[a, j]] {
                let d = sq_distance(descriptors.row(a), descriptors.row(j));
                if best_neg.map(|(_, bd)| d < bd).unwrap_or(true) {
                    best_neg = Some((j, d));
                }
            }
        }
        if let (Some((p, _)), Some((g, _))) = (best_pos, best_neg) {
            mined.anchors.push(a as u32);
            mined.positives.push(p as u32);
            mined.negatives.push(g as u32);
        }
    }
    mined
}

/// Outcome of one loss construction.
#[derive(Debug)]
pub struct TripletLoss {
    pub loss: NodeId,
    /// Hinge terms before reduction, one row per anchor.
    pub hinges: NodeId,
    /// Anchors with a strictly positive hinge.
    pub active: usize,
    /// Anchors participating at all.
    pub total: usize,
}

/// Builds the margin loss over mined triplets on top of a descriptor node:
/// `max(d(a, p) - d(a, n) + margin, 0)` per anchor, reduced per config.
/// Fails with a degenerate-batch error when nothing was mined.
pub fn triplet_loss_graph<S: Scalar>(
    tape: &mut Tape<S>,
    descriptors: NodeId,
    mined: &MinedTriplets,
    config: &TripletConfig,
) -> Result<TripletLoss> {
    if mined.is_empty() {
        return Err(Error::DegenerateBatch);
    }
    let dim = tape.shape(descriptors).1;
    let anchors = tape.gather_rows(descriptors, Arc::new(mined.anchors.clone()))?;
    let positives = tape.gather_rows(descriptors, Arc::new(mined.positives.clone()))?;
    let negatives = tape.gather_rows(descriptors, Arc::new(mined.negatives.clone()))?;
    let ones = tape.constant(Array2::from_elem((dim, 1), S::one()));
    let distance_to = |other: NodeId, tape: &mut Tape<S>| -> Result<NodeId> {
        let diff = tape.sub(anchors, other)?;
        let sq = tape.mul(diff, diff)?;
        let sums = tape.matmul(sq, ones)?;
        Ok(tape.sqrt(sums))
    };
    let d_pos = distance_to(positives, tape)?;
    let d_neg = distance_to(negatives, tape)?;
    let gap = tape.sub(d_pos, d_neg)?;
    let shifted = tape.add_scalar(gap, S::of(config.margin));
    let hinges = tape.relu(shifted);
    let active = tape
        .value(hinges)
        .iter()
        .filter(|v| **v > S::zero())
        .count();
    let loss = match config.reduction {
        LossReduction::Mean => tape.mean_rows(hinges),
        LossReduction::Sum => tape.sum_all(hinges),
    };
    Ok(TripletLoss {
        loss,
        hinges,
        active,
        total: mined.len(),
    })
}

/// Dynamic batch sizing: when the fraction of active triplets drops below
/// the threshold, the batch grows by the growth factor (floored), up to the
/// cap.
#[derive(Debug, Clone)]
pub struct BatchSizer {
    size: usize,
    threshold: f64,
    growth: f64,
    cap: usize,
}

impl BatchSizer {
    pub fn new(initial: usize, threshold: f64, growth: f64, cap: usize) -> Self {
        assert!(initial >= 1 && cap >= initial && growth >= 1.0);
        Self {
            size: initial,
            threshold,
            growth,
            cap,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Feeds one observation of (active, total) triplet counts; returns
    /// true when the batch size grew.
    pub fn observe(&mut self, active: usize, total: usize) -> bool {
        if total == 0 {
            return false;
        }
        let ratio = active as f64 / total as f64;
        if ratio >= self.threshold || self.size >= self.cap {
            return false;
        }
        // The epsilon absorbs binary representation error in the product
        // (85 * 1.4 evaluates just below 119) without changing true floors.
        let grown = (self.size as f64 * self.growth + 1e-9).floor() as usize;
        self.size = grown.min(self.cap);
        true
    }
}

/// One training example: a voxelized cloud with its precomputed kernel map
/// pyramid and its world position (used for positive/negative selection).
/// Items built from raw points keep them so augmentation can re-voxelize.
#[derive(Debug, Clone)]
pub struct TrainItem<S: Scalar> {
    pub grid: SparseVoxelGrid<S>,
    pub maps: StemMaps,
    pub position: [f64; 3],
    pub points: Option<Vec<[f64; 3]>>,
}

impl<S: Scalar> TrainItem<S> {
    pub fn new(grid: SparseVoxelGrid<S>, position: [f64; 3]) -> Self {
        let maps = StemMaps::build(&[grid.coords().to_vec()], grid.stride());
        Self {
            grid,
            maps,
            position,
            points: None,
        }
    }

    /// Voxelizes `points` and keeps them for per-epoch augmentation.
    pub fn with_points(points: Vec<[f64; 3]>, quant_step: f64, position: [f64; 3]) -> Result<Self> {
        let cloud = PointCloud::new(points.clone())?;
        let grid = crate::sparse::voxelize(&cloud, quant_step)?;
        let mut item = Self::new(grid, position);
        item.points = Some(points);
        Ok(item)
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Epoch index (0-based) at which the learning rate is multiplied by
    /// `lr_drop_factor`.
    pub lr_drop_epoch: Option<usize>,
    pub lr_drop_factor: f64,
    pub initial_batch: usize,
    pub batch_threshold: f64,
    pub batch_growth: f64,
    pub batch_cap: usize,
    pub triplet: TripletConfig,
    /// Clouds within this distance are positives.
    pub positive_radius: f64,
    /// Clouds beyond this distance are negatives.
    pub negative_radius: f64,
    pub adam: AdamConfig,
    /// When set, items that carry raw points are re-augmented and
    /// re-voxelized every time they enter a batch.
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
    /// Hard stop on optimizer steps across all epochs.
    pub max_iterations: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: 1e-3,
            lr_drop_epoch: Some(30),
            lr_drop_factor: 0.1,
            initial_batch: 32,
            batch_threshold: 0.7,
            batch_growth: 1.4,
            batch_cap: 256,
            triplet: TripletConfig::default(),
            positive_radius: 10.0,
            negative_radius: 50.0,
            adam: AdamConfig::default(),
            augment: None,
            seed: 0,
            max_iterations: None,
        }
    }
}

/// Per-epoch training statistics.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub active_ratio: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
}

fn planar_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Positive/negative masks for a batch given world positions.
pub fn relation_masks(
    positions: &[[f64; 3]],
    positive_radius: f64,
    negative_radius: f64,
) -> (Array2<bool>, Array2<bool>) {
    let n = positions.len();
    let mut pos = Array2::from_elem((n, n), false);
    let mut neg = Array2::from_elem((n, n), false);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = planar_distance(positions[i], positions[j]);
            if d <= positive_radius {
                pos[[i, j]] = true;
            } else if d >= negative_radius {
                neg[[i, j]] = true;
            }
        }
    }
    (pos, neg)
}

/// Voxelized inputs for one batch. Without augmentation this reuses each
/// item's cached grid and kernel maps; with it, every appearance of an
/// item redraws its corruptions from the `("augment", epoch << 32 | item)`
/// substream and re-voxelizes.
fn batch_inputs<S: Scalar>(
    items: &[TrainItem<S>],
    chunk: &[usize],
    config: &TrainConfig,
    quant_step: f64,
    epoch: usize,
) -> Result<(VoxelBatch<S>, StemMaps)> {
    let mut grids = Vec::with_capacity(chunk.len());
    let mut maps = Vec::with_capacity(chunk.len());
    for &i in chunk {
        let item = &items[i];
        match (&config.augment, &item.points) {
            (Some(aug), Some(points)) => {
                let key = ((epoch as u64) << 32) | i as u64;
                let mut r = rng::indexed_stream(config.seed, "augment", key);
                let pts = augment(points, &mut r, aug);
                let cloud = PointCloud::new(pts)?;
                let grid: SparseVoxelGrid<S> = crate::sparse::voxelize(&cloud, quant_step)?;
                maps.push(StemMaps::build(&[grid.coords().to_vec()], grid.stride()));
                grids.push(grid);
            }
            _ => {
                grids.push(item.grid.clone());
                maps.push(item.maps.clone());
            }
        }
    }
    let batch = VoxelBatch::from_grids(&grids)?;
    let refs: Vec<&StemMaps> = maps.iter().collect();
    Ok((batch, StemMaps::merge(&refs)))
}

/// Runs the full training loop, mutating the store in place. Returns the
/// per-epoch statistics; batches that mine no valid triplet are skipped.
pub fn train<S: Scalar>(
    model: &SvtNet,
    store: &mut ParamStore<S>,
    items: &[TrainItem<S>],
    config: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    train_with_hook(model, store, items, config, |_, _| Ok(()))
}

/// [`train`] with a callback invoked after every completed epoch, in hand
/// with the store at that point (for per-epoch checkpoints).
pub fn train_with_hook<S: Scalar>(
    model: &SvtNet,
    store: &mut ParamStore<S>,
    items: &[TrainItem<S>],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &ParamStore<S>) -> Result<()>,
) -> Result<Vec<EpochStats>> {
    assert!(!items.is_empty(), "training set is empty");
    let mut optimizer = Adam::new(store, config.adam.clone());
    let mut sizer = BatchSizer::new(
        config.initial_batch,
        config.batch_threshold,
        config.batch_growth,
        config.batch_cap,
    );
    let mut history = Vec::new();
    let mut iterations = 0usize;
    'epochs: for epoch in 0..config.epochs {
        let lr = match config.lr_drop_epoch {
            Some(drop) if epoch >= drop => config.lr * config.lr_drop_factor,
            _ => config.lr,
        };
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng::indexed_stream(config.seed, "batch", epoch as u64));
        let batch_size = sizer.size().min(items.len()).max(2);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        let mut epoch_active = 0usize;
        let mut epoch_total = 0usize;
        for chunk in order.chunks(batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let positions: Vec<[f64; 3]> = chunk.iter().map(|&i| items[i].position).collect();
            let (pos_mask, neg_mask) =
                relation_masks(&positions, config.positive_radius, config.negative_radius);
            let (batch, maps) =
                batch_inputs(items, chunk, config, model.config().quant_step, epoch)?;
            let mut tape = Tape::new();
            let mut binder = Binder::new(store);
            let out = model.forward(store, &mut binder, &mut tape, &batch, &maps, true)?;
            let descriptors = tape.value(out.descriptors).clone();
            let mined = mine_batch_hard(&descriptors, &pos_mask, &neg_mask);
            if mined.is_empty() {
                log::warn!("batch of {} clouds mined no triplets, skipping", chunk.len());
                continue;
            }
            let result = triplet_loss_graph(&mut tape, out.descriptors, &mined, &config.triplet)?;
            let loss_value = tape.value(result.loss)[[0, 0]].to_f64_value();
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch} iteration {iterations}"
                )));
            }
            tape.backward(result.loss)?;
            let grads = collect_grads(&tape, &binder, store.len());
            drop(tape);
            optimizer.step(store, &grads, lr)?;
            model.constrain(store);
            epoch_loss += loss_value;
            epoch_batches += 1;
            epoch_active += result.active;
            epoch_total += result.total;
            iterations += 1;
            if let Some(cap) = config.max_iterations {
                if iterations >= cap {
                    let stats = EpochStats {
                        epoch,
                        mean_loss: epoch_loss / epoch_batches as f64,
                        active_ratio: epoch_active as f64 / epoch_total.max(1) as f64,
                        batch_size,
                        iterations,
                        lr,
                    };
                    on_epoch(&stats, store)?;
                    history.push(stats);
                    break 'epochs;
                }
            }
        }
        if epoch_batches == 0 {
            return Err(Error::DegenerateBatch);
        }
        let stats = EpochStats {
            epoch,
            mean_loss: epoch_loss / epoch_batches as f64,
            active_ratio: epoch_active as f64 / epoch_total.max(1) as f64,
            batch_size,
            iterations,
            lr,
        };
        log::info!(
            "epoch {:>3}: loss {:.5} active {:.2} batch {} lr {:.1e}",
            stats.epoch,
            stats.mean_loss,
            stats.active_ratio,
            stats.batch_size,
            stats.lr
        );
        sizer.observe(epoch_active, epoch_total);
        on_epoch(&stats, store)?;
        history.push(stats);
    }
    Ok(history)
}

/// Contiguous index ranges splitting `total` items into batches.
pub fn batch_ranges(total: usize, batch: usize) -> Vec<Range<usize>> {
    (0..total)
        .step_by(batch.max(1))
        .map(|start| start..(start + batch).min(total))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adam_first_step_matches_closed_form() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let w = store.register("w", array![[0.0]]);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let grads = vec![Some(array![[1.0]])];
        adam.step(&mut store, &grads, 1e-3).unwrap();
        // m_hat = 1, v_hat = 1: step = -lr / (1 + eps).
        let expect = -1e-3 / (1.0 + 1e-8);
        assert!((store.value(w)[[0, 0]] - expect).abs() < 1e-18);
    }

    #[test]
    fn adam_skips_buffers_and_missing_grads() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let w = store.register("w", array![[1.0]]);
        let b = store.register_buffer("b", array![[5.0]]);
        let u = store.register("unused", array![[2.0]]);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let grads = vec![Some(array![[1.0]]), Some(array![[1.0]]), None];
        adam.step(&mut store, &grads, 0.1).unwrap();
        assert!(store.value(w)[[0, 0]] < 1.0);
        assert_eq!(store.value(b)[[0, 0]], 5.0);
        assert_eq!(store.value(u)[[0, 0]], 2.0);
    }

    #[test]
    fn adam_two_steps_track_reference_formula() {
        // Independent recomputation of two Adam updates for a fixed
        // gradient sequence.
        let mut store: ParamStore<f64> = ParamStore::new();
        let w = store.register("w", array![[0.5]]);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let gs = [0.3, -0.7];
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 1e-2);
        let (mut m, mut v, mut x) = (0.0, 0.0, 0.5);
        for (t, &g) in gs.iter().enumerate() {
            adam.step(&mut store, &[Some(array![[g]])], lr).unwrap();
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let t = (t + 1) as i32;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat: f64 = v / (1.0 - b2.powi(t));
            x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        assert!((store.value(w)[[0, 0]] - x).abs() < 1e-15);
    }

    fn descriptors_for_mining() -> Array2<f64> {
        array![
            [0.0, 0.0],
            [1.0, 0.0],
            [3.0, 0.0],
            [0.0, 4.0],
            [0.0, 4.5],
        ]
    }

    fn masks_for_mining() -> (Array2<bool>, Array2<bool>) {
        // Rows 0..3 are one place, rows 3..5 another.
        let positions = [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [100.0, 0.0, 0.0],
            [101.0, 0.0, 0.0],
        ];
        relation_masks(&positions, 10.0, 50.0)
    }

    #[test]
    fn mining_picks_hardest_positive_and_negative() {
        let (pos, neg) = masks_for_mining();
        let mined = mine_batch_hard(&descriptors_for_mining(), &pos, &neg);
        // Anchor 0: positives {1, 2}, farthest is 2; negatives {3, 4},
        // nearest is 3.
        let a0 = mined.anchors.iter().position(|&a| a == 0).unwrap();
        assert_eq!(mined.positives[a0], 2);
        assert_eq!(mined.negatives[a0], 3);
        assert_eq!(mined.len(), 5);
    }

    #[test]
    fn mining_matches_exhaustive_oracle() {
        let mut r = rng::stream(3, "mining-test");
        use rand::Rng;
        for case in 0..10 {
            let n = 6 + case % 5;
            let desc = Array2::from_shape_fn((n, 4), |_| r.gen_range(-1.0..1.0));
            let positions: Vec<[f64; 3]> = (0..n)
                .map(|_| [r.gen_range(0.0..3.0) * 60.0, 0.0, 0.0])
                .collect();
            let (pos, neg) = relation_masks(&positions, 10.0, 50.0);
            let mined = mine_batch_hard(&desc, &pos, &neg);
            // Oracle: scan all pairs with explicit Euclidean distances.
            let dist = |i: usize, j: usize| {
                desc.row(i)
                    .iter()
                    .zip(desc.row(j).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            };
            let mut want = MinedTriplets {
                anchors: vec![],
                positives: vec![],
                negatives: vec![],
            };
            for a in 0..n {
                let mut bp: Option<usize> = None;
                let mut bn: Option<usize> = None;
                for j in 0..n {
                    if j == a {
                        continue;
                    }
                    if pos[[a, j]] && bp.map(|b| dist(a, j) > dist(a, b)).unwrap_or(true) {
                        bp = Some(j);
                    }
                    if neg[[a, j]] && bn.map(|b| dist(a, j) < dist(a, b)).unwrap_or(true) {
                        bn = Some(j);
                    }
                }
                if let (Some(p), Some(g)) = (bp, bn) {
                    want.anchors.push(a as u32);
                    want.positives.push(p as u32);
                    want.negatives.push(g as u32);
                }
            }
            assert_eq!(mined, want, "case {case}");
        }
    }

    #[test]
    fn mining_tie_breaks_to_lowest_index() {
        // Two positives at identical distance; two negatives likewise.
        let desc = array![
            [0.0, 0.0],
            [1.0, 0.0],
            [-1.0, 0.0],
            [0.0, 3.0],
            [0.0, -3.0],
        ];
        let positions = [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [90.0, 0.0, 0.0],
            [90.0, 1.0, 0.0],
        ];
        let (pos, neg) = relation_masks(&positions, 10.0, 50.0);
        let mined = mine_batch_hard(&desc, &pos, &neg);
        let a0 = mined.anchors.iter().position(|&a| a == 0).unwrap();
        assert_eq!(mined.positives[a0], 1);
        assert_eq!(mined.negatives[a0], 3);
    }

    #[test]
    fn triplet_loss_known_value_and_active_count() {
        let desc = descriptors_for_mining();
        let (pos, neg) = masks_for_mining();
        let mined = mine_batch_hard(&desc, &pos, &neg);
        let mut tape: Tape<f64> = Tape::new();
        let d = tape.leaf(desc);
        let config = TripletConfig {
            margin: 0.2,
            reduction: LossReduction::Mean,
        };
        let out = triplet_loss_graph(&mut tape, d, &mined, &config).unwrap();
        // Anchor 0: d_p = 3, d_n = 4, hinge = 0 (inactive).
        let hinges = tape.value(out.hinges).clone();
        assert_eq!(out.total, 5);
        assert!((hinges[[0, 0]]).abs() < 1e-12);
        // Anchor 3: positive 4 at 0.5, nearest negative 0 at 4:
        // hinge = 0.5 - 4 + 0.2 = 0 clipped.
        // Anchor 2: positive 0 at 3, negative 3 at 5: clipped too.
        let manual_mean: f64 = hinges.iter().sum::<f64>() / 5.0;
        assert!((tape.value(out.loss)[[0, 0]] - manual_mean).abs() < 1e-12);
        assert_eq!(
            out.active,
            hinges.iter().filter(|v| **v > 0.0).count()
        );
    }

    #[test]
    fn triplet_loss_sum_reduction() {
        let desc = descriptors_for_mining();
        let (pos, neg) = masks_for_mining();
        let mined = mine_batch_hard(&desc, &pos, &neg);
        let mut tape: Tape<f64> = Tape::new();
        let d = tape.leaf(desc);
        let mean = triplet_loss_graph(
            &mut tape,
            d,
            &mined,
            &TripletConfig {
                margin: 0.2,
                reduction: LossReduction::Mean,
            },
        )
        .unwrap();
        let sum = triplet_loss_graph(
            &mut tape,
            d,
            &mined,
            &TripletConfig {
                margin: 0.2,
                reduction: LossReduction::Sum,
            },
        )
        .unwrap();
        let m = tape.value(mean.loss)[[0, 0]];
        let s = tape.value(sum.loss)[[0, 0]];
        assert!((s - m * mined.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn triplet_loss_rejects_empty_mining() {
        let mut tape: Tape<f64> = Tape::new();
        let d = tape.leaf(array![[0.0, 0.0], [1.0, 1.0]]);
        let mined = MinedTriplets {
            anchors: vec![],
            positives: vec![],
            negatives: vec![],
        };
        let err = triplet_loss_graph(&mut tape, d, &mined, &TripletConfig::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateBatch));
        assert!(err.to_string().starts_with("degenerate batch"));
    }

    #[test]
    fn triplet_gradients_match_finite_differences() {
        use crate::autodiff::grad_check;
        let desc = descriptors_for_mining();
        let (pos, neg) = masks_for_mining();
        let mined = mine_batch_hard(&desc, &pos, &neg);
        let config = TripletConfig {
            margin: 1.5,
            reduction: LossReduction::Mean,
        };
        let report = grad_check(
            move |tape, ids| {
                let out = triplet_loss_graph(tape, ids[0], &mined, &config)?;
                Ok(out.loss)
            },
            &[desc],
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn batch_sizer_follows_expansion_sequence() {
        let mut sizer = BatchSizer::new(32, 0.7, 1.4, 256);
        let mut seen = vec![sizer.size()];
        for _ in 0..10 {
            sizer.observe(0, 10);
            seen.push(sizer.size());
        }
        assert_eq!(
            &seen[..9],
            &[32, 44, 61, 85, 119, 166, 232, 256, 256],
            "growth sequence"
        );
    }

    #[test]
    fn batch_sizer_holds_when_active_enough() {
        let mut sizer = BatchSizer::new(32, 0.7, 1.4, 256);
        assert!(!sizer.observe(8, 10));
        assert_eq!(sizer.size(), 32);
        assert!(!sizer.observe(7, 10));
        assert_eq!(sizer.size(), 32);
        assert!(sizer.observe(6, 10));
        assert_eq!(sizer.size(), 44);
    }

    #[test]
    fn relation_masks_respect_radii() {
        let positions = [
            [0.0, 0.0, 0.0],
            [9.0, 0.0, 0.0],
            [30.0, 0.0, 0.0],
            [60.0, 0.0, 0.0],
        ];
        let (pos, neg) = relation_masks(&positions, 10.0, 50.0);
        assert!(pos[[0, 1]]);
        assert!(!pos[[0, 2]]);
        assert!(!neg[[0, 2]], "30 m is neither positive nor negative");
        assert!(neg[[0, 3]]);
        assert!(!pos[[0, 0]], "self is excluded");
    }

    #[test]
    fn batch_ranges_cover_everything() {
        assert_eq!(batch_ranges(10, 4), vec![0..4, 4..8, 8..10]);
        assert_eq!(batch_ranges(3, 8), vec![0..3]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient_naming_the_parameter() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.register("stem.w", array![[1.0]]);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let err = adam
            .step(&mut store, &[Some(array![[f64::NAN]])], 1e-3)
            .unwrap_err();
        assert!(err.to_string().contains("stem.w"), "{err}");
        assert_eq!(adam.step_count(), 0, "failed step must not advance time");
    }

    fn test_cloud(n: usize) -> Vec<[f64; 3]> {
        let mut r = rng::stream(9, "augment-cloud");
        use rand::Rng;
        (0..n)
            .map(|_| [r.gen_range(-0.2..0.2), r.gen_range(-0.2..0.2), r.gen_range(-0.2..0.2)])
            .collect()
    }

    #[test]
    fn augment_with_zero_probabilities_is_identity() {
        let pts = test_cloud(200);
        let mut r = rng::stream(1, "augment");
        let out = augment(&pts, &mut r, &AugmentConfig::disabled());
        assert_eq!(out, pts);
    }

    #[test]
    fn augment_is_deterministic_per_stream() {
        let pts = test_cloud(200);
        let config = AugmentConfig::default();
        let a = augment(&pts, &mut rng::indexed_stream(4, "augment", 11), &config);
        let b = augment(&pts, &mut rng::indexed_stream(4, "augment", 11), &config);
        assert_eq!(a, b);
        let c = augment(&pts, &mut rng::indexed_stream(4, "augment", 12), &config);
        assert_ne!(a, c);
    }

    #[test]
    fn jitter_displacement_respects_the_clip_bound() {
        let pts = test_cloud(100_000);
        let config = AugmentConfig {
            jitter_prob: 1.0,
            translation_prob: 0.0,
            removal_prob: 0.0,
            erase_prob: 0.0,
            ..AugmentConfig::default()
        };
        let out = augment(&pts, &mut rng::stream(2, "augment"), &config);
        assert_eq!(out.len(), pts.len());
        let mut max_d: f64 = 0.0;
        for (a, b) in pts.iter().zip(&out) {
            for axis in 0..3 {
                max_d = max_d.max((a[axis] - b[axis]).abs());
            }
        }
        assert!(max_d <= 0.002 + 1e-15, "displacement {max_d}");
        assert!(max_d > 0.0);
    }

    #[test]
    fn removal_keeps_at_least_ninety_percent() {
        let pts = test_cloud(1000);
        let config = AugmentConfig {
            jitter_prob: 0.0,
            translation_prob: 0.0,
            removal_prob: 1.0,
            erase_prob: 0.0,
            ..AugmentConfig::default()
        };
        let mut saw_removal = false;
        for i in 0..20 {
            let out = augment(&pts, &mut rng::indexed_stream(3, "augment", i), &config);
            assert!(out.len() >= 900, "kept {}", out.len());
            assert!(!out.is_empty());
            saw_removal |= out.len() < pts.len();
        }
        assert!(saw_removal);
    }

    #[test]
    fn erase_removes_a_contiguous_cuboid_only() {
        let pts = test_cloud(2000);
        let config = AugmentConfig {
            jitter_prob: 0.0,
            translation_prob: 0.0,
            removal_prob: 0.0,
            erase_prob: 1.0,
            ..AugmentConfig::default()
        };
        for i in 0..10 {
            let out = augment(&pts, &mut rng::indexed_stream(8, "augment", i), &config);
            assert!(!out.is_empty());
            assert!(out.len() <= pts.len());
            // Survivors are a subset of the input.
            for p in &out {
                assert!(pts.contains(p));
            }
        }
    }

    #[test]
    fn single_point_cloud_survives_every_corruption() {
        let pts = vec![[0.1, 0.2, 0.3]];
        let config = AugmentConfig {
            jitter_prob: 1.0,
            translation_prob: 1.0,
            removal_prob: 1.0,
            erase_prob: 1.0,
            ..AugmentConfig::default()
        };
        for i in 0..50 {
            let out = augment(&pts, &mut rng::indexed_stream(5, "augment", i), &config);
            assert_eq!(out.len(), 1);
        }
    }
}
