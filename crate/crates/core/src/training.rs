//! Dataset loading, dihedral augmentation, and the Adam training loop.
//!
//! Everything here is deterministic given the seed: epoch shuffles, the
//! stratified split, and augmentation sampling all come from dedicated
//! [`Stream`]s, and batch gradients are reduced in a fixed item order so the
//! result is independent of how many worker threads rayon happens to use.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::{DatasetManifest, Realization};
use crate::models::{
    forward_graph, EpochStats, ModelSpec, NormConstants, Params, TrainSummary, TrainedModel,
};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, WeightEntry};
use crate::{Error, Result};

/// The eight symmetries of a square grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dihedral {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    FlipH,
    FlipV,
    Transpose,
    AntiTranspose,
}

impl Dihedral {
    pub const ALL: [Dihedral; 8] = [
        Dihedral::Identity,
        Dihedral::Rot90,
        Dihedral::Rot180,
        Dihedral::Rot270,
        Dihedral::FlipH,
        Dihedral::FlipV,
        Dihedral::Transpose,
        Dihedral::AntiTranspose,
    ];

    /// The seven non-identity transforms, the augmentation pool.
    pub const NON_IDENTITY: [Dihedral; 7] = [
        Dihedral::Rot90,
        Dihedral::Rot180,
        Dihedral::Rot270,
        Dihedral::FlipH,
        Dihedral::FlipV,
        Dihedral::Transpose,
        Dihedral::AntiTranspose,
    ];

    /// Source cell `(x, y)` whose value lands at `(ix, iy)` under `self`.
    fn source(self, ix: usize, iy: usize, side: usize) -> (usize, usize) {
        let m = side - 1;
        match self {
            Dihedral::Identity => (ix, iy),
            Dihedral::Rot90 => (iy, m - ix),
            Dihedral::Rot180 => (m - ix, m - iy),
            Dihedral::Rot270 => (m - iy, ix),
            Dihedral::FlipH => (m - ix, iy),
            Dihedral::FlipV => (ix, m - iy),
            Dihedral::Transpose => (iy, ix),
            Dihedral::AntiTranspose => (m - iy, m - ix),
        }
    }

    /// Applies the transform to a row-major square image.
    pub fn apply(self, values: &[f32], side: usize) -> Result<Vec<f32>> {
        if values.len() != side * side {
            return Err(Error::invalid(format!(
                "dihedral transform needs a square image: {} values for side {side}",
                values.len()
            )));
        }
        let mut out = vec![0.0f32; values.len()];
        for iy in 0..side {
            for ix in 0..side {
                let (sx, sy) = self.source(ix, iy, side);
                out[iy * side + ix] = values[sy * side + sx];
            }
        }
        Ok(out)
    }

    /// Applies the transform to a realization on a square grid. The label is
    /// copied unchanged: flips and rotations leave an isotropic variogram's
    /// range, trend proportion, and stationarity class intact.
    pub fn apply_realization(self, r: &Realization) -> Result<Realization> {
        if r.grid.nx != r.grid.ny {
            return Err(Error::invalid(format!(
                "dihedral transform needs a square grid, got {}x{}",
                r.grid.nx, r.grid.ny
            )));
        }
        let values = self.apply(&r.values, r.grid.nx)?;
        Realization::new(r.grid, values, r.label)
    }
}

/// Grows `items` to `target_count` by sampling (item, non-identity transform)
/// pairs without repetition.
///
/// The originals are kept in order at the front. Extras are allocated in
/// rounds — each round visits every item once in a seeded order and applies
/// the next unused transform from that item's seeded 7-permutation — so
/// per-item copy counts never differ by more than one and a pair can only
/// repeat once all seven transforms of the item are exhausted.
pub fn augment(items: &[Realization], target_count: usize, seed: u64) -> Result<Vec<Realization>> {
    if target_count < items.len() {
        return Err(Error::invalid(format!(
            "augmentation target {target_count} is below the source count {}",
            items.len()
        )));
    }
    if target_count > 8 * items.len() {
        return Err(Error::invalid(format!(
            "augmentation target {target_count} exceeds the dihedral pool of {} ({} items x 8)",
            8 * items.len(),
            items.len()
        )));
    }
    let mut out: Vec<Realization> = items.to_vec();
    out.reserve(target_count - items.len());

    let transform_orders: Vec<[Dihedral; 7]> = (0..items.len())
        .map(|i| {
            let mut order = Dihedral::NON_IDENTITY;
            order.shuffle(&mut stream_rng(derive_seed(seed, 0, i as u64), Stream::Augment));
            order
        })
        .collect();

    let mut round = 0usize;
    while out.len() < target_count {
        let mut visit: Vec<usize> = (0..items.len()).collect();
        visit.shuffle(&mut stream_rng(
            derive_seed(seed, round as u64 + 1, 0),
            Stream::Augment,
        ));
        for i in visit {
            if out.len() == target_count {
                break;
            }
            out.push(transform_orders[i][round].apply_realization(&items[i])?);
        }
        round += 1;
    }
    Ok(out)
}

/// Training hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Upper bound on epochs; early stopping may end the run sooner.
    pub epochs: usize,
    /// Consecutive epochs without a validation improvement before stopping.
    pub patience: usize,
    /// Total training-set size after augmentation; `None` trains on the
    /// split as-is. Must be at least the split size and at most 8x it.
    pub augment_target: Option<usize>,
    /// Fraction of each label group held out for validation, in `(0, 0.5]`.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 200,
            patience: 10,
            augment_target: None,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epoch budget must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::invalid("early-stop patience must be at least 1"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction <= 0.5) {
            return Err(Error::invalid(format!(
                "validation fraction must lie in (0, 0.5], got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// Reads a dataset manifest and every realization it references, in manifest
/// order. File paths are resolved relative to the manifest's directory.
pub fn load_dataset(manifest_path: &Path) -> Result<(DatasetManifest, Vec<Realization>)> {
    let manifest = DatasetManifest::read_file(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let items: Vec<Realization> = manifest
        .items
        .par_iter()
        .map(|entry| {
            let r = Realization::read_file(&dir.join(&entry.file))?;
            if r.grid != manifest.grid {
                return Err(Error::invalid(format!(
                    "{}: grid {}x{} does not match the manifest grid {}x{}",
                    entry.file, r.grid.nx, r.grid.ny, manifest.grid.nx, manifest.grid.ny
                )));
            }
            if r.label != entry.label() {
                return Err(Error::invalid(format!(
                    "{}: file label does not match the manifest entry",
                    entry.file
                )));
            }
            Ok(r)
        })
        .collect::<Result<_>>()?;
    Ok((manifest, items))
}

/// Splits item indices into (train, validation) stratified by range label,
/// so every label that has at least two items appears in validation.
fn stratified_split(items: &[Realization], val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut groups: Vec<(u64, Vec<usize>)> = Vec::new();
    for (i, r) in items.iter().enumerate() {
        let key = r.label.range_m.to_bits();
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(i),
            None => groups.push((key, vec![i])),
        }
    }
    groups.sort_by(|a, b| f64::from_bits(a.0).total_cmp(&f64::from_bits(b.0)));

    let mut train = Vec::new();
    let mut val = Vec::new();
    for (g, (_, mut members)) in groups.into_iter().enumerate() {
        members.shuffle(&mut stream_rng(derive_seed(seed, 0, g as u64), Stream::Shuffle));
        let n_val = if members.len() < 2 {
            0
        } else {
            ((val_fraction * members.len() as f64).round() as usize)
                .max(1)
                .min(members.len() - 1)
        };
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Label normalization constants measured on the training split.
fn measure_norm(items: &[Realization], train_idx: &[usize]) -> NormConstants {
    let mut range_min = f64::INFINITY;
    let mut range_max = f64::NEG_INFINITY;
    for &i in train_idx {
        range_min = range_min.min(items[i].label.range_m);
        range_max = range_max.max(items[i].label.range_m);
    }
    NormConstants {
        range_min,
        // A single-label training set still needs a non-empty span for the
        // affine map; one meter keeps the label at exactly 0.
        range_max: if range_max > range_min { range_max } else { range_min + 1.0 },
    }
}

struct Prepared {
    x_std: Vec<f32>,
    y_norm: f32,
}

/// Per-item loss and per-weight gradients at the given weights.
fn item_grads(
    spec: &ModelSpec,
    weights: &[WeightEntry],
    item: &Prepared,
    side: usize,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let tape: Tape<f32> = Tape::new();
    let params = Params::bind(&tape, weights)?;
    let x = tape.leaf(&[side, side], item.x_std.clone(), false)?;
    let out = forward_graph(spec, &params, &x)?;
    let target = tape.constant(&[1, 1], vec![item.y_norm])?;
    let loss = out.mse_loss(&target)?;
    let loss_val = loss.item()? as f64;
    let grads = loss.backward()?;
    let per_weight = params
        .tensors()
        .map(|(_, t)| grads.get(t).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    Ok((loss_val, per_weight))
}

/// Squared error of one item at the given weights, without recording.
fn item_loss(
    spec: &ModelSpec,
    weights: &[WeightEntry],
    item: &Prepared,
    side: usize,
) -> Result<f64> {
    let tape: Tape<f32> = Tape::new();
    tape.set_recording(false);
    let params = Params::bind(&tape, weights)?;
    let x = tape.leaf(&[side, side], item.x_std.clone(), false)?;
    let out = forward_graph(spec, &params, &x)?;
    let d = out.item()? as f64 - item.y_norm as f64;
    Ok(d * d)
}

fn mean_loss(
    spec: &ModelSpec,
    weights: &[WeightEntry],
    items: &[Prepared],
    side: usize,
) -> Result<f64> {
    if items.is_empty() {
        return Ok(f64::NAN);
    }
    let total: f64 = items
        .par_iter()
        .map(|item| item_loss(spec, weights, item, side))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(total / items.len() as f64)
}

/// Trains a regressor on labeled realizations.
///
/// The items are split into train/validation strata by label, the training
/// split is optionally augmented with dihedral copies, inputs are
/// standardized and labels mapped to `[0, 1]` with constants measured on the
/// training split, and the model is fit by Adam on the mean squared error.
/// The returned model carries the weights of the best validation epoch and
/// the full loss history. Two calls with identical inputs produce
/// bit-identical checkpoints, regardless of rayon's thread count.
pub fn train(spec: &ModelSpec, items: &[Realization], cfg: &TrainConfig) -> Result<TrainedModel> {
    spec.validate()?;
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::invalid("training needs at least one labeled item"));
    }
    let side = spec.input_side();
    for (i, r) in items.iter().enumerate() {
        if r.grid.nx != side || r.grid.ny != side {
            return Err(Error::invalid(format!(
                "item {i} grid {}x{} does not match the model input {side}x{side}",
                r.grid.nx, r.grid.ny
            )));
        }
    }

    let (train_idx, val_idx) = stratified_split(items, cfg.val_fraction, cfg.seed);
    let train_items: Vec<Realization> = train_idx.iter().map(|&i| items[i].clone()).collect();
    let norm = measure_norm(items, &train_idx);

    let train_items = match cfg.augment_target {
        Some(target) => augment(&train_items, target, cfg.seed)?,
        None => train_items,
    };

    let mut model = TrainedModel::new(spec.clone(), cfg.seed)?;
    model.set_norm(norm)?;

    let prepare = |r: &Realization| Prepared {
        x_std: model.standardize(&r.values),
        y_norm: norm.normalize_range(r.label.range_m) as f32,
    };
    let train_set: Vec<Prepared> = train_items.iter().map(prepare).collect();
    let val_set: Vec<Prepared> = val_idx.iter().map(|&i| prepare(&items[i])).collect();

    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut states: Vec<AdamState<f32>> =
        model.weights().iter().map(|w| AdamState::new(w.data.len())).collect();

    let mut history = TrainSummary { epochs: Vec::new(), best_epoch: None, seed: cfg.seed };
    let mut best_val = f64::INFINITY;
    let mut best_weights: Option<Vec<WeightEntry>> = None;
    let mut epochs_since_best = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut stream_rng(
            derive_seed(cfg.seed, epoch as u64 + 1, 0),
            Stream::Shuffle,
        ));

        let mut loss_sum = 0.0f64;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<(f64, Vec<Vec<f32>>)> = batch
                .par_iter()
                .map(|&i| item_grads(spec, model.weights(), &train_set[i], side))
                .collect::<Result<_>>()?;

            let batch_loss: f64 =
                results.iter().map(|(l, _)| l).sum::<f64>() / batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at epoch {epoch}, batch {batch_no}"
                )));
            }
            loss_sum += batch_loss * batch.len() as f64;

            let mut acc: Vec<Vec<f64>> =
                model.weights().iter().map(|w| vec![0.0; w.data.len()]).collect();
            for (_, per_weight) in &results {
                for (a, g) in acc.iter_mut().zip(per_weight) {
                    for (s, &v) in a.iter_mut().zip(g) {
                        *s += v as f64;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for ((entry, state), sums) in
                model.weights_mut().iter_mut().zip(&mut states).zip(&acc)
            {
                let grad: Vec<f32> = sums.iter().map(|&s| (s * scale) as f32).collect();
                adam_step(&mut entry.data, &grad, state, &adam)?;
            }
        }
        let train_loss = loss_sum / train_set.len() as f64;

        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            mean_loss(spec, model.weights(), &val_set, side)?
        };
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }
        history.epochs.push(EpochStats { epoch, train_loss, val_loss });

        if val_loss < best_val {
            best_val = val_loss;
            best_weights = Some(model.weights().to_vec());
            history.best_epoch = Some(epoch);
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= cfg.patience {
                break;
            }
        }
    }

    if let Some(best) = best_weights {
        model.weights_mut().clone_from_slice(&best);
    }
    model.set_history(history);
    Ok(model)
}

/// Runs the model over every item, returning `(true range, predicted range)`
/// pairs in input order. Equivalent to calling
/// [`TrainedModel::predict_range`] item by item.
pub fn evaluate_split(model: &TrainedModel, items: &[Realization]) -> Result<Vec<(f64, f64)>> {
    items
        .par_iter()
        .map(|r| Ok((r.label.range_m, model.predict_range(r)?)))
        .collect()
}
