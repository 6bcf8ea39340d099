//! The three parameter-budget-matched regressors mapping one realization
//! image to a predicted variogram range: a small CNN, a patch transformer
//! with global self-attention, and a shifted-window transformer.
//!
//! A [`TrainedModel`] owns its weights as plain named arrays; every forward
//! pass binds them onto a fresh tape, so prediction is side-effect free and
//! models can be shared across threads.

mod cnn;
mod swin;
mod vit;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Realization;
use crate::rng::{stream_rng, Stream};
use crate::tensor::{load_weights, save_weights, Element, Tape, Tensor, WeightEntry};

/// Parameter-count targets for the full-scale (224-cell) configurations.
pub const CNN_PARAM_TARGET: usize = 240_000;
pub const VIT_PARAM_TARGET: usize = 226_000;
pub const SWIN_PARAM_TARGET: usize = 233_000;

/// Relative half-width of the allowed band around a parameter target.
pub const PARAM_TOLERANCE: f64 = 0.15;

/// Input side of the full-scale configurations.
pub const FULL_SIDE: usize = 224;
/// Input side of the reduced desk-scale configurations used for fast runs.
pub const DESK_SIDE: usize = 64;

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Cnn,
    Vit,
    Swin,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 3] = [ModelFamily::Cnn, ModelFamily::Vit, ModelFamily::Swin];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelFamily::Cnn => "cnn",
            ModelFamily::Vit => "vit",
            ModelFamily::Swin => "swin",
        }
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(ModelFamily::Cnn),
            "vit" => Ok(ModelFamily::Vit),
            "swin" => Ok(ModelFamily::Swin),
            other => Err(Error::invalid(format!("unknown model family `{other}`"))),
        }
    }
}

/// Architecture hyper-parameters for one regressor.
///
/// `budget`, when set, is a parameter-count target enforced at build time
/// to within [`PARAM_TOLERANCE`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ModelSpec {
    Cnn {
        input_side: usize,
        /// Output channels of the four convolution layers.
        channels: [usize; 4],
        budget: Option<usize>,
    },
    Vit {
        input_side: usize,
        patch: usize,
        depth: usize,
        d_model: usize,
        heads: usize,
        mlp_ratio: usize,
        budget: Option<usize>,
    },
    Swin {
        input_side: usize,
        patch: usize,
        /// Channel width per stage.
        dims: [usize; 4],
        /// Attention heads per stage.
        heads: [usize; 4],
        /// W-MSA / SW-MSA block pairs per stage.
        pairs: [usize; 4],
        window: usize,
        mlp_ratio: usize,
        budget: Option<usize>,
    },
}

impl ModelSpec {
    pub fn cnn(input_side: usize, channels: [usize; 4], budget: Option<usize>) -> Result<Self> {
        let spec = ModelSpec::Cnn {
            input_side,
            channels,
            budget,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn vit(
        input_side: usize,
        patch: usize,
        depth: usize,
        d_model: usize,
        heads: usize,
        mlp_ratio: usize,
        budget: Option<usize>,
    ) -> Result<Self> {
        let spec = ModelSpec::Vit {
            input_side,
            patch,
            depth,
            d_model,
            heads,
            mlp_ratio,
            budget,
        };
        spec.validate()?;
        Ok(spec)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn swin(
        input_side: usize,
        patch: usize,
        dims: [usize; 4],
        heads: [usize; 4],
        pairs: [usize; 4],
        window: usize,
        mlp_ratio: usize,
        budget: Option<usize>,
    ) -> Result<Self> {
        let spec = ModelSpec::Swin {
            input_side,
            patch,
            dims,
            heads,
            pairs,
            window,
            mlp_ratio,
            budget,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Full-scale configuration for `family`, budgeted against the
    /// published parameter target.
    pub fn full(family: ModelFamily) -> Self {
        match family {
            ModelFamily::Cnn => {
                Self::cnn(FULL_SIDE, [16, 32, 32, 64], Some(CNN_PARAM_TARGET))
            }
            ModelFamily::Vit => {
                Self::vit(FULL_SIDE, 28, 6, 60, 6, 2, Some(VIT_PARAM_TARGET))
            }
            ModelFamily::Swin => Self::swin(
                FULL_SIDE,
                4,
                [12, 24, 48, 96],
                [2, 4, 8, 16],
                [1, 1, 1, 1],
                7,
                2,
                Some(SWIN_PARAM_TARGET),
            ),
        }
        .expect("built-in full-scale specs are valid")
    }

    /// Desk-scale configuration: same architecture shrunk to 64-cell
    /// inputs for fast end-to-end runs. No parameter budget is enforced.
    pub fn desk(family: ModelFamily) -> Self {
        match family {
            ModelFamily::Cnn => Self::cnn(DESK_SIDE, [16, 32, 32, 64], None),
            ModelFamily::Vit => Self::vit(DESK_SIDE, 8, 6, 60, 6, 2, None),
            ModelFamily::Swin => Self::swin(
                DESK_SIDE,
                2,
                [12, 24, 48, 96],
                [2, 4, 8, 16],
                [1, 1, 1, 1],
                4,
                2,
                None,
            ),
        }
        .expect("built-in desk-scale specs are valid")
    }

    pub fn family(&self) -> ModelFamily {
        match self {
            ModelSpec::Cnn { .. } => ModelFamily::Cnn,
            ModelSpec::Vit { .. } => ModelFamily::Vit,
            ModelSpec::Swin { .. } => ModelFamily::Swin,
        }
    }

    pub fn input_side(&self) -> usize {
        match *self {
            ModelSpec::Cnn { input_side, .. }
            | ModelSpec::Vit { input_side, .. }
            | ModelSpec::Swin { input_side, .. } => input_side,
        }
    }

    pub fn budget(&self) -> Option<usize> {
        match *self {
            ModelSpec::Cnn { budget, .. }
            | ModelSpec::Vit { budget, .. }
            | ModelSpec::Swin { budget, .. } => budget,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ModelSpec::Cnn {
                input_side,
                channels,
                ..
            } => {
                if input_side < 4 || input_side % 4 != 0 {
                    return Err(Error::invalid(format!(
                        "cnn input side {input_side} must be a positive multiple of 4 \
                         for the two 2x2 pooling layers"
                    )));
                }
                if channels.contains(&0) {
                    return Err(Error::invalid("cnn channel widths must be >= 1"));
                }
            }
            ModelSpec::Vit {
                input_side,
                patch,
                d_model,
                heads,
                mlp_ratio,
                ..
            } => {
                if input_side == 0 || patch == 0 || patch > input_side {
                    return Err(Error::invalid(format!(
                        "vit patch {patch} must be in 1..={input_side}"
                    )));
                }
                if heads == 0 || d_model % heads != 0 {
                    return Err(Error::invalid(format!(
                        "vit embedding dim {d_model} must divide into {heads} heads"
                    )));
                }
                if d_model < 2 || d_model % 2 != 0 {
                    return Err(Error::invalid(format!(
                        "vit embedding dim {d_model} must be even for the position encoding"
                    )));
                }
                if mlp_ratio == 0 {
                    return Err(Error::invalid("vit mlp ratio must be >= 1"));
                }
            }
            ModelSpec::Swin {
                input_side,
                patch,
                dims,
                heads,
                pairs,
                window,
                mlp_ratio,
                ..
            } => {
                if input_side == 0 || patch == 0 || patch > input_side {
                    return Err(Error::invalid(format!(
                        "swin patch {patch} must be in 1..={input_side}"
                    )));
                }
                let s0 = input_side.div_ceil(patch);
                if s0 % 8 != 0 {
                    return Err(Error::invalid(format!(
                        "swin token side {s0} must be a multiple of 8 so all three \
                         patch-merging steps see even sides"
                    )));
                }
                if window == 0 {
                    return Err(Error::invalid("swin window must be >= 1"));
                }
                for (i, (&c, &h)) in dims.iter().zip(&heads).enumerate() {
                    if h == 0 || c == 0 || c % h != 0 {
                        return Err(Error::invalid(format!(
                            "swin stage {i} width {c} must divide into {h} heads"
                        )));
                    }
                    let side = s0 >> i;
                    let eff = window.min(side);
                    if side % eff != 0 {
                        return Err(Error::invalid(format!(
                            "swin stage {i} side {side} is not divisible into \
                             {eff}-cell windows"
                        )));
                    }
                }
                if pairs.contains(&0) {
                    return Err(Error::invalid("swin needs at least one block pair per stage"));
                }
                if mlp_ratio == 0 {
                    return Err(Error::invalid("swin mlp ratio must be >= 1"));
                }
            }
        }
        Ok(())
    }

    /// Names and shapes of every weight tensor, in binding order.
    pub fn expected_weights(&self) -> Vec<(String, Vec<usize>)> {
        match self {
            ModelSpec::Cnn { .. } => cnn::expected_weights(self),
            ModelSpec::Vit { .. } => vit::expected_weights(self),
            ModelSpec::Swin { .. } => swin::expected_weights(self),
        }
    }

    /// Total trainable parameter count of the built model.
    pub fn param_count(&self) -> usize {
        self.expected_weights()
            .iter()
            .map(|(_, s)| crate::tensor::numel(s))
            .sum()
    }
}

/// Label normalization constants fixed from the training split and stored
/// with the model. Inputs are standardized per image instead (the field's
/// level and spread carry no range information), so no input statistics
/// need to be carried.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormConstants {
    pub range_min: f64,
    pub range_max: f64,
}

impl Default for NormConstants {
    fn default() -> Self {
        NormConstants { range_min: 0.0, range_max: 1.0 }
    }
}

impl NormConstants {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("range_min", self.range_min), ("range_max", self.range_max)] {
            if !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite, got {v}")));
            }
        }
        if self.range_max <= self.range_min {
            return Err(Error::invalid(format!(
                "label range [{}, {}] is empty",
                self.range_min, self.range_max
            )));
        }
        Ok(())
    }

    /// Map a range in meters onto the unit training interval.
    pub fn normalize_range(&self, range_m: f64) -> f64 {
        (range_m - self.range_min) / (self.range_max - self.range_min)
    }

    /// Inverse of [`NormConstants::normalize_range`]; deliberately not
    /// clamped so out-of-distribution predictions stay visible.
    pub fn denormalize_range(&self, y: f64) -> f64 {
        self.range_min + y * (self.range_max - self.range_min)
    }
}

/// Loss curve of one training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: Option<usize>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Named parameter tensors bound onto one tape for a forward pass.
pub(crate) struct Params<T: Element> {
    items: Vec<(String, Tensor<T>)>,
}

impl<T: Element> Params<T> {
    /// Bind stored weights as trainable leaves on `tape`.
    pub(crate) fn bind(tape: &Tape<T>, entries: &[WeightEntry]) -> Result<Self> {
        let mut items = Vec::with_capacity(entries.len());
        for e in entries {
            let data: Vec<T> = e.data.iter().map(|&v| T::from_f64(v as f64)).collect();
            items.push((e.name.clone(), tape.leaf(&e.shape, data, true)?));
        }
        Ok(Params { items })
    }

    /// Wrap already-created leaves (used by the gradient checks, which own
    /// the leaf tensors).
    pub(crate) fn from_tensors(names: &[String], tensors: &[Tensor<T>]) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::invalid(format!(
                "{} parameter names for {} tensors",
                names.len(),
                tensors.len()
            )));
        }
        Ok(Params {
            items: names
                .iter()
                .cloned()
                .zip(tensors.iter().cloned())
                .collect(),
        })
    }

    pub(crate) fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.items
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::WeightMismatch(format!("missing weight `{name}`")))
    }

    pub(crate) fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.items.iter().map(|(n, t)| (n.as_str(), t))
    }
}

/// Seeded initial weights for `spec`, drawn in binding order: He fan-in
/// scaling for convolution and activation-fed linear weights, symmetric
/// fan-average scaling for attention and merge projections, 0.02-sigma
/// noise for relative-position tables, ones for norm gains, zeros for
/// biases, norm shifts, and the convolutional regression head (the conv
/// stack carries no normalization, so the flattened features reach the
/// head at uncontrolled scale; a zero start lets the head calibrate
/// against them before the stack moves).
pub fn init_weights(spec: &ModelSpec, seed: u64) -> Vec<WeightEntry> {
    let mut rng = stream_rng(seed, Stream::Init);
    let mut entries = Vec::new();
    for (name, shape) in spec.expected_weights() {
        let n = crate::tensor::numel(&shape);
        let data: Vec<f32> = if name.ends_with(".gamma") {
            vec![1.0; n]
        } else if name.ends_with(".beta") || name.ends_with(".bias") || name == "fc.weight" {
            vec![0.0; n]
        } else {
            let std = if name.ends_with(".rel_bias") {
                0.02
            } else if name.contains(".attn.") || name.contains("merge.reduce") {
                let (fan_in, fan_out) = (shape[0] as f64, shape[1] as f64);
                (2.0 / (fan_in + fan_out)).sqrt()
            } else if shape.len() == 4 {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                (2.0 / fan_in).sqrt()
            } else {
                (2.0 / shape[0] as f64).sqrt()
            };
            (0..n)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    (z * std) as f32
                })
                .collect()
        };
        entries.push(WeightEntry { name, shape, data });
    }
    entries
}

/// Finite-difference check of the end-to-end loss gradient for a model.
///
/// Builds seeded weights and a deterministic input at the spec's side,
/// differentiates the squared error against a fixed target with respect to
/// the input and every weight, and returns the worst relative disagreement
/// between the analytic and central-difference gradients (64-bit).
pub fn model_gradient_check(spec: &ModelSpec, step: f64, seed: u64) -> Result<f64> {
    spec.validate()?;
    let entries = init_weights(spec, seed);
    let names: Vec<String> = entries.iter().map(|e| e.name.clone()).collect();
    let side = spec.input_side();
    let mut inputs: Vec<(Vec<usize>, Vec<f64>)> = vec![(
        vec![side, side],
        (0..side * side)
            .map(|i| ((i * 37 % (side * side)) as f64 / (side * side) as f64) - 0.5)
            .collect(),
    )];
    for e in &entries {
        inputs.push((e.shape.clone(), e.data.iter().map(|&v| v as f64).collect()));
    }
    crate::tensor::gradient_check_with_step(&inputs, step, move |tape, xs| {
        let params = Params::from_tensors(&names, &xs[1..])?;
        let out = forward_graph(spec, &params, &xs[0])?;
        let target = tape.constant(&[1, 1], vec![0.35])?;
        out.mse_loss(&target)
    })
}

fn check_budget(spec: &ModelSpec) -> Result<()> {
    if let Some(target) = spec.budget() {
        let actual = spec.param_count();
        let lo = (target as f64 * (1.0 - PARAM_TOLERANCE)).ceil() as usize;
        let hi = (target as f64 * (1.0 + PARAM_TOLERANCE)).floor() as usize;
        if actual < lo || actual > hi {
            return Err(Error::ParameterBudget {
                family: spec.family().to_string(),
                actual,
                lo,
                hi,
            });
        }
    }
    Ok(())
}

/// Build the forward graph of `spec` from bound parameters. The input is a
/// `[side, side]` image (CNN also accepts a `[b, side, side]` batch) and
/// the output is a `[rows, 1]` normalized range prediction.
pub(crate) fn forward_graph<T: Element>(
    spec: &ModelSpec,
    params: &Params<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    match spec {
        ModelSpec::Cnn { .. } => cnn::forward(spec, params, x),
        ModelSpec::Vit { .. } => vit::forward(spec, params, x),
        ModelSpec::Swin { .. } => swin::forward(spec, params, x),
    }
}

/// Mean over the rows of an `[n, c]` token matrix, as a `[1, c]` tensor.
pub(crate) fn token_mean<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape().len() != 2 {
        return Err(Error::invalid(format!(
            "token_mean expects [n, c], got {:?}",
            x.shape()
        )));
    }
    let n = x.shape()[0];
    let ones = x
        .tape
        .constant(&[1, n], vec![T::from_f64(1.0 / n as f64); n])?;
    ones.matmul(x)
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    spec: ModelSpec,
    norm: NormConstants,
    history: TrainSummary,
}

/// File name of the weight archive inside a checkpoint directory.
pub const WEIGHTS_FILE: &str = "weights.nta";
/// File name of the spec / normalization / history document.
pub const META_FILE: &str = "model.json";

/// A regressor with its weights, normalization constants, and training
/// history. Immutable during prediction; safe to share across threads.
#[derive(Clone)]
pub struct TrainedModel {
    spec: ModelSpec,
    weights: Vec<WeightEntry>,
    norm: NormConstants,
    history: TrainSummary,
}

impl TrainedModel {
    /// Freshly initialized model with seeded weights.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        check_budget(&spec)?;
        let weights = init_weights(&spec, seed);
        Ok(TrainedModel {
            spec,
            weights,
            norm: NormConstants::default(),
            history: TrainSummary {
                seed,
                ..TrainSummary::default()
            },
        })
    }

    /// Assemble a model from externally supplied weights, validating every
    /// name and shape against the spec.
    pub fn with_weights(
        spec: ModelSpec,
        mut entries: Vec<WeightEntry>,
        norm: NormConstants,
        history: TrainSummary,
    ) -> Result<Self> {
        spec.validate()?;
        check_budget(&spec)?;
        norm.validate()?;
        let expected = spec.expected_weights();
        if entries.len() != expected.len() {
            return Err(Error::WeightMismatch(format!(
                "archive has {} weights, the {} spec needs {}",
                entries.len(),
                spec.family(),
                expected.len()
            )));
        }
        let mut ordered = Vec::with_capacity(expected.len());
        for (name, shape) in &expected {
            let pos = entries
                .iter()
                .position(|e| &e.name == name)
                .ok_or_else(|| {
                    Error::WeightMismatch(format!("archive is missing weight `{name}`"))
                })?;
            let entry = entries.swap_remove(pos);
            if &entry.shape != shape {
                return Err(Error::WeightMismatch(format!(
                    "weight `{name}` has shape {:?}, the spec needs {:?}",
                    entry.shape, shape
                )));
            }
            ordered.push(entry);
        }
        Ok(TrainedModel {
            spec,
            weights: ordered,
            norm,
            history,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn family(&self) -> ModelFamily {
        self.spec.family()
    }

    pub fn norm(&self) -> &NormConstants {
        &self.norm
    }

    pub fn history(&self) -> &TrainSummary {
        &self.history
    }

    pub fn weights(&self) -> &[WeightEntry] {
        &self.weights
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|e| e.data.len()).sum()
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [WeightEntry] {
        &mut self.weights
    }

    pub(crate) fn set_norm(&mut self, norm: NormConstants) -> Result<()> {
        norm.validate()?;
        self.norm = norm;
        Ok(())
    }

    pub(crate) fn set_history(&mut self, history: TrainSummary) {
        self.history = history;
    }

    /// Standardize one image to zero mean and unit variance over its own
    /// cells (constant images are only centered). The spatial length scale
    /// the model estimates is untouched by this per-image affine map, while
    /// realization-to-realization level and spread fluctuations — pure
    /// nuisance for the label — are removed.
    pub(crate) fn standardize(&self, values: &[f32]) -> Vec<f32> {
        let n = values.len().max(1) as f64;
        let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        values.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect()
    }

    /// Forward pass on a raw (unstandardized) square image, returning the
    /// normalized scalar prediction.
    pub(crate) fn forward_normalized(&self, values: &[f32], side: usize) -> Result<f64> {
        let tape: Tape<f32> = Tape::new();
        tape.set_recording(false);
        let params = Params::bind(&tape, &self.weights)?;
        let x = tape.leaf(&[side, side], self.standardize(values), false)?;
        let out = forward_graph(&self.spec, &params, &x)?;
        Ok(out.item()? as f64)
    }

    /// Predict the variogram range in meters for one realization.
    pub fn predict_range(&self, r: &Realization) -> Result<f64> {
        let side = self.spec.input_side();
        if r.grid.nx != side || r.grid.ny != side {
            return Err(Error::invalid(format!(
                "realization grid {}x{} does not match the model input {side}x{side}",
                r.grid.nx, r.grid.ny
            )));
        }
        let y = self.forward_normalized(&r.values, side)?;
        Ok(self.norm.denormalize_range(y))
    }

    /// Write the checkpoint: a weight archive plus a JSON document holding
    /// the spec, normalization constants, and training history.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        save_weights(&dir.join(WEIGHTS_FILE), &self.weights)?;
        let meta = CheckpointMeta {
            spec: self.spec.clone(),
            norm: self.norm,
            history: self.history.clone(),
        };
        let path = dir.join(META_FILE);
        let p = path.display().to_string();
        let mut text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&p, e))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&p, e))
    }

    /// Load a checkpoint written by [`TrainedModel::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        Self::load_files(&dir.join(WEIGHTS_FILE), &dir.join(META_FILE))
    }

    /// Load a checkpoint from explicitly named weight and metadata files.
    pub fn load_files(weights: &Path, meta: &Path) -> Result<Self> {
        let p = meta.display().to_string();
        let text = std::fs::read_to_string(meta).map_err(|e| Error::io(&p, e))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&text).map_err(|e| Error::json(&p, e))?;
        let entries = load_weights(weights)?;
        Self::with_weights(meta.spec, entries, meta.norm, meta.history)
    }
}
