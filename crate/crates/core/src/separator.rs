//! Toy differentiable mask-based separators and their trainer.
//!
//! Both architectures work frame by frame on log-compressed STFT magnitudes
//! `ln(1 + |X|)` and emit one sigmoid mask per source:
//!
//! * `mask-mlp`: one hidden sigmoid layer (64 units by default), then one
//!   affine head per source;
//! * `mask-linear`: one affine map per source.
//!
//! Source `i` is estimated as `istft(M_i * X)`. The whole forward pass is
//! recorded on a [`Tape`], so gradients flow to the parameters (training) or
//! to the input samples (perturbation).
//!
//! # Checkpoint format
//!
//! A checkpoint is a JSON object:
//!
//! ```text
//! {
//!   "format": "amicable-separator",
//!   "version": 1,
//!   "arch": "mask-mlp" | "mask-linear",
//!   "geometry": { "window_size": 512, "hop": 256, "window": "hann" },
//!   "n_sources": 2,
//!   "hidden": 64,
//!   "params": [ { "name": "hidden.weight", "shape": [257, 64], "data": [...] }, ... ]
//! }
//! ```
//!
//! Parameter data is row-major and written with round-trip float formatting,
//! so a saved model reloads bit-identically.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::SynthTrack;
use crate::dsp::{DspError, IstftMap, StftGeometry, StftMap, StftPlan, WaveBuffer};
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const CHECKPOINT_FORMAT: &str = "amicable-separator";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const DEFAULT_HIDDEN: usize = 64;

/// Added under the square root of the magnitude so its derivative stays finite.
const MAGNITUDE_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SeparatorError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: String, detail: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    MaskMlp,
    MaskLinear,
}

impl std::str::FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mask-mlp" => Ok(Arch::MaskMlp),
            "mask-linear" => Ok(Arch::MaskLinear),
            other => Err(format!("unknown architecture {other:?} (expected mask-mlp or mask-linear)")),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::MaskMlp => "mask-mlp",
            Arch::MaskLinear => "mask-linear",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedParam {
    fn tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.clone()).expect("validated parameter")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparatorModel {
    pub format: String,
    pub version: u32,
    pub arch: Arch,
    pub geometry: StftGeometry,
    pub n_sources: usize,
    pub hidden: usize,
    pub params: Vec<NamedParam>,
}

fn param_layout(arch: Arch, bins: usize, hidden: usize, n_sources: usize) -> Vec<(String, Vec<usize>)> {
    let mut layout = Vec::new();
    let head_in = match arch {
        Arch::MaskMlp => {
            layout.push(("hidden.weight".to_string(), vec![bins, hidden]));
            layout.push(("hidden.bias".to_string(), vec![hidden]));
            hidden
        }
        Arch::MaskLinear => bins,
    };
    for i in 0..n_sources {
        layout.push((format!("mask{i}.weight"), vec![head_in, bins]));
        layout.push((format!("mask{i}.bias"), vec![bins]));
    }
    layout
}

impl SeparatorModel {
    /// Randomly initialized model (Glorot-uniform weights, zero biases).
    pub fn new(arch: Arch, geometry: StftGeometry, n_sources: usize, seed: u64) -> Result<Self, SeparatorError> {
        Self::with_hidden(arch, geometry, n_sources, DEFAULT_HIDDEN, seed)
    }

    pub fn with_hidden(
        arch: Arch,
        geometry: StftGeometry,
        n_sources: usize,
        hidden: usize,
        seed: u64,
    ) -> Result<Self, SeparatorError> {
        let mut model = Self::zeros(arch, geometry, n_sources, hidden)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut model.params {
            if p.shape.len() == 2 {
                let limit = (6.0 / (p.shape[0] + p.shape[1]) as f64).sqrt();
                p.data.iter_mut().for_each(|v| *v = rng.random_range(-limit..limit));
            }
        }
        Ok(model)
    }

    /// Model with every parameter zero: all masks are exactly 0.5.
    pub fn zeros(arch: Arch, geometry: StftGeometry, n_sources: usize, hidden: usize) -> Result<Self, SeparatorError> {
        geometry.validate()?;
        if n_sources == 0 {
            return Err(SeparatorError::Invalid("n_sources must be positive".into()));
        }
        if arch == Arch::MaskMlp && hidden == 0 {
            return Err(SeparatorError::Invalid("hidden width must be positive".into()));
        }
        let hidden = if arch == Arch::MaskMlp { hidden } else { 0 };
        let params = param_layout(arch, geometry.bins(), hidden, n_sources)
            .into_iter()
            .map(|(name, shape)| NamedParam {
                data: vec![0.0; shape.iter().product()],
                name,
                shape,
            })
            .collect();
        Ok(Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            arch,
            geometry,
            n_sources,
            hidden,
            params,
        })
    }

    fn validate(&self) -> Result<(), SeparatorError> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(SeparatorError::Invalid(format!(
                "unsupported checkpoint {:?} v{}",
                self.format, self.version
            )));
        }
        self.geometry.validate()?;
        let layout = param_layout(self.arch, self.geometry.bins(), self.hidden, self.n_sources);
        if layout.len() != self.params.len() {
            return Err(SeparatorError::Invalid(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                self.params.len()
            )));
        }
        for ((name, shape), p) in layout.iter().zip(&self.params) {
            if *name != p.name || *shape != p.shape || p.data.len() != shape.iter().product::<usize>() {
                return Err(SeparatorError::Invalid(format!(
                    "parameter {:?} does not match expected {name:?} {shape:?}",
                    p.name
                )));
            }
            if p.data.iter().any(|v| !v.is_finite()) {
                return Err(SeparatorError::Invalid(format!("parameter {name:?} is not finite")));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Euclidean distance between the flattened parameters of two models of
    /// identical layout.
    pub fn param_distance(&self, other: &SeparatorModel) -> Option<f64> {
        if self.params.len() != other.params.len() {
            return None;
        }
        let mut acc = 0.0;
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.shape != b.shape {
                return None;
            }
            acc += a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
        Some(acc.sqrt())
    }

    /// Registers all parameters on `tape`, tracked or not.
    pub fn register_params(&self, tape: &mut Tape, tracked: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if tracked {
                    tape.leaf(p.tensor())
                } else {
                    tape.constant(p.tensor())
                }
            })
            .collect()
    }

    /// Records the STFT and the log-magnitude features. Returns the
    /// `[2, frames, bins]` spectrum and the `[frames, bins]` features.
    fn features_on_tape(&self, tape: &mut Tape, x: Var, stft_map: StftMap) -> Result<(Var, Var), SeparatorError> {
        let frames = stft_map.frames();
        let bins = self.geometry.bins();
        let spec = tape.linear(x, Arc::new(stft_map))?;
        let re = tape.slice(spec, 0, 1)?;
        let re = tape.reshape(re, &[frames, bins])?;
        let im = tape.slice(spec, 1, 2)?;
        let im = tape.reshape(im, &[frames, bins])?;
        let re2 = tape.square(re)?;
        let im2 = tape.square(im)?;
        let power = tape.add(re2, im2)?;
        let power = tape.add_scalar(power, MAGNITUDE_FLOOR)?;
        let mag = tape.sqrt(power)?;
        let feat = tape.add_scalar(mag, 1.0)?;
        Ok((spec, tape.ln(feat)?))
    }

    /// One `[frames, bins]` sigmoid mask per source.
    fn masks_on_tape(&self, tape: &mut Tape, feat: Var, params: &[Var]) -> Result<Vec<Var>, SeparatorError> {
        let (head_in, heads) = match self.arch {
            Arch::MaskMlp => {
                let h = tape.matmul(feat, params[0])?;
                let h = tape.add_row_bias(h, params[1])?;
                (tape.sigmoid(h)?, &params[2..])
            }
            Arch::MaskLinear => (feat, params),
        };
        heads
            .chunks_exact(2)
            .map(|head| {
                let logits = tape.matmul(head_in, head[0])?;
                let logits = tape.add_row_bias(logits, head[1])?;
                Ok(tape.sigmoid(logits)?)
            })
            .collect()
    }

    fn check_input(&self, tape: &Tape, x: Var, params: &[Var]) -> Result<usize, SeparatorError> {
        let x_shape = tape.value(x).shape();
        if x_shape.len() != 1 {
            return Err(SeparatorError::Invalid(format!("input must be 1-D, got {x_shape:?}")));
        }
        if params.len() != self.params.len() {
            return Err(SeparatorError::Invalid("parameter count mismatch".into()));
        }
        Ok(x_shape[0])
    }

    /// Records the forward pass for signal `x` (shape `[len]`) and returns one
    /// estimate per source, each `[len]`.
    pub fn forward_on_tape(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Vec<Var>, SeparatorError> {
        let len = self.check_input(tape, x, params)?;
        let plan = StftPlan::new(self.geometry)?;
        let stft_map = StftMap::new(plan.clone(), len)?;
        let frames = stft_map.frames();
        let bins = self.geometry.bins();
        let istft_map = Arc::new(IstftMap::new(plan, frames, len)?);

        let (spec, feat) = self.features_on_tape(tape, x, stft_map)?;
        let masks = self.masks_on_tape(tape, feat, params)?;
        let mut estimates = Vec::with_capacity(self.n_sources);
        for mask in masks {
            let mask = tape.concat(&[mask, mask])?;
            let mask = tape.reshape(mask, &[2, frames, bins])?;
            let masked = tape.mul(mask, spec)?;
            estimates.push(tape.linear(masked, istft_map.clone())?);
        }
        Ok(estimates)
    }

    /// Separates `x` into `n_sources` estimates of the same length.
    pub fn forward(&self, x: &WaveBuffer) -> Result<Vec<WaveBuffer>, SeparatorError> {
        let mut tape = Tape::new();
        let params = self.register_params(&mut tape, false);
        let xv = tape.constant(Tensor::from_vec(x.samples().to_vec()));
        let est = self.forward_on_tape(&mut tape, xv, &params)?;
        est.into_iter()
            .map(|v| Ok(WaveBuffer::new(tape.value(v).data().to_vec(), x.sample_rate())?))
            .collect()
    }

    /// Frame-major `[frames * bins]` mask values per source.
    pub fn masks(&self, x: &WaveBuffer) -> Result<Vec<Vec<f64>>, SeparatorError> {
        let mut tape = Tape::new();
        let params = self.register_params(&mut tape, false);
        let xv = tape.constant(Tensor::from_vec(x.samples().to_vec()));
        let len = self.check_input(&tape, xv, &params)?;
        let stft_map = StftMap::new(StftPlan::new(self.geometry)?, len)?;
        let (_, feat) = self.features_on_tape(&mut tape, xv, stft_map)?;
        let masks = self.masks_on_tape(&mut tape, feat, &params)?;
        Ok(masks.into_iter().map(|m| tape.value(m).data().to_vec()).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SeparatorError> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| SeparatorError::Checkpoint {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        fs::write(path, text + "\n").map_err(|e| SeparatorError::Checkpoint {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SeparatorError> {
        let path = path.as_ref();
        let err = |detail: String| SeparatorError::Checkpoint {
            path: path.display().to_string(),
            detail,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let model: SeparatorModel = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        model.validate().map_err(|e| err(e.to_string()))?;
        Ok(model)
    }
}

/// Squared error summed over sources and samples, divided by the total number
/// of source samples (`n_sources * len`).
pub fn separation_distance(tape: &mut Tape, estimates: &[Var], targets: &[&[f64]]) -> Result<Var, SeparatorError> {
    if estimates.len() != targets.len() || estimates.is_empty() {
        return Err(SeparatorError::Invalid(format!(
            "{} estimates for {} targets",
            estimates.len(),
            targets.len()
        )));
    }
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for (&est, target) in estimates.iter().zip(targets) {
        let t = tape.constant(Tensor::from_vec(target.to_vec()));
        let diff = tape.sub(est, t)?;
        let sq = tape.square(diff)?;
        let s = tape.sum(sq)?;
        count += target.len();
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    Ok(tape.scale(total.expect("non-empty"), 1.0 / count as f64)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            learning_rate: 1000.0,
            batch_size: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: SeparatorModel,
    /// Mean batch loss per epoch.
    pub loss_curve: Vec<f64>,
}

fn check_dataset(model: &SeparatorModel, dataset: &[SynthTrack]) -> Result<(), SeparatorError> {
    if dataset.is_empty() {
        return Err(SeparatorError::Dataset("dataset is empty".into()));
    }
    for t in dataset {
        if t.sources.len() != model.n_sources {
            return Err(SeparatorError::Dataset(format!(
                "{} has {} sources, model expects {}",
                t.id,
                t.sources.len(),
                model.n_sources
            )));
        }
        let worst = (0..t.mixture.len())
            .map(|i| (t.mixture.samples()[i] - t.sources.iter().map(|s| s.samples()[i]).sum::<f64>()).abs())
            .fold(0.0f64, f64::max);
        if worst > 1e-6 {
            return Err(SeparatorError::Dataset(format!(
                "{}: sources do not sum to the mixture (max deviation {worst:e})",
                t.id
            )));
        }
    }
    Ok(())
}

/// Loss of one batch and its parameter gradients.
fn batch_loss(model: &SeparatorModel, batch: &[&SynthTrack]) -> Result<(f64, Vec<Tensor>), SeparatorError> {
    let mut tape = Tape::new();
    let params = model.register_params(&mut tape, true);
    let mut total: Option<Var> = None;
    for item in batch {
        let x = tape.constant(Tensor::from_vec(item.mixture.samples().to_vec()));
        let est = model.forward_on_tape(&mut tape, x, &params)?;
        let targets: Vec<&[f64]> = item.sources.iter().map(|s| s.samples()).collect();
        let d = separation_distance(&mut tape, &est, &targets)?;
        total = Some(match total {
            None => d,
            Some(acc) => tape.add(acc, d)?,
        });
    }
    let loss = tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
    let value = tape.value(loss).item().expect("scalar");
    let grads = tape.backward(loss)?;
    Ok((
        value,
        params.iter().map(|p| grads.get(*p).expect("tracked").clone()).collect(),
    ))
}

/// Minibatch gradient descent with a fixed learning rate on the mean
/// separation distance. Batches are reshuffled every epoch from `cfg.seed`.
pub fn train(model: &SeparatorModel, dataset: &[SynthTrack], cfg: &TrainConfig) -> Result<TrainOutcome, SeparatorError> {
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(SeparatorError::Invalid(
            "batch size and learning rate must be positive".into(),
        ));
    }
    check_dataset(model, dataset)?;
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SynthTrack> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (loss, grads) = match batch_loss(&model, &batch) {
                Ok(r) => r,
                Err(SeparatorError::Tensor(TensorError::NonFinite { .. })) => {
                    return Err(SeparatorError::Diverged { epoch, loss: f64::NAN })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(SeparatorError::Diverged { epoch, loss });
            }
            for (p, g) in model.params.iter_mut().zip(&grads) {
                for (v, gv) in p.data.iter_mut().zip(g.data()) {
                    *v -= cfg.learning_rate * gv;
                }
            }
            epoch_loss += loss;
            batches += 1;
        }
        let mean = epoch_loss / batches as f64;
        log::debug!("epoch {epoch}: loss {mean:.6e}");
        loss_curve.push(mean);
    }
    if model.params.iter().any(|p| p.data.iter().any(|v| !v.is_finite())) {
        return Err(SeparatorError::Diverged {
            epoch: cfg.epochs.saturating_sub(1),
            loss: f64::NAN,
        });
    }
    Ok(TrainOutcome { model, loss_curve })
}

/// Mean separation distance of `model` over `dataset` (no gradients).
pub fn evaluate_loss(model: &SeparatorModel, dataset: &[SynthTrack]) -> Result<f64, SeparatorError> {
    check_dataset(model, dataset)?;
    let mut total = 0.0;
    for item in dataset {
        let mut tape = Tape::new();
        let params = model.register_params(&mut tape, false);
        let x = tape.constant(Tensor::from_vec(item.mixture.samples().to_vec()));
        let est = model.forward_on_tape(&mut tape, x, &params)?;
        let targets: Vec<&[f64]> = item.sources.iter().map(|s| s.samples()).collect();
        let d = separation_distance(&mut tape, &est, &targets)?;
        total += tape.value(d).item().expect("scalar");
    }
    Ok(total / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::gen_track;
    use crate::dsp::{stft, WindowKind};
    use crate::tensor::grad_check;

    fn small_geometry() -> StftGeometry {
        StftGeometry::new(64, 32, WindowKind::Hann).unwrap()
    }

    #[test]
    fn zero_parameters_halve_the_input() {
        let t = gen_track(5, 1.0, 8000).unwrap();
        let model = SeparatorModel::zeros(Arch::MaskMlp, StftGeometry::default(), 2, 64).unwrap();
        for est in model.forward(&t.mixture).unwrap() {
            assert_eq!(est.len(), t.mixture.len());
            for (e, x) in est.samples().iter().zip(t.mixture.samples()) {
                assert!((e - 0.5 * x).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_estimates() {
        let model = SeparatorModel::new(Arch::MaskMlp, StftGeometry::default(), 2, 3).unwrap();
        let x = WaveBuffer::new(vec![0.0; 2000], 8000).unwrap();
        for est in model.forward(&x).unwrap() {
            assert!(est.samples().iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn short_input_is_rejected() {
        let model = SeparatorModel::new(Arch::MaskLinear, StftGeometry::default(), 2, 3).unwrap();
        let x = WaveBuffer::new(vec![0.1; 100], 8000).unwrap();
        assert!(model.forward(&x).is_err());
    }

    #[test]
    fn estimate_magnitudes_are_bounded_by_the_mixture() {
        let t = gen_track(9, 1.0, 8000).unwrap();
        for arch in [Arch::MaskMlp, Arch::MaskLinear] {
            let model = SeparatorModel::new(arch, StftGeometry::default(), 2, 11).unwrap();
            let masks = model.masks(&t.mixture).unwrap();
            let mix = stft(&t.mixture, &model.geometry).unwrap();
            for m in &masks {
                assert!(m.iter().all(|v| *v > 0.0 && *v < 1.0));
                // Masked spectrum never exceeds the mixture bin magnitude.
                for (mv, c) in m.iter().zip(mix.data()) {
                    assert!(mv * c.norm() <= c.norm());
                }
            }
        }
    }

    #[test]
    fn training_gradient_passes_grad_check() {
        let geometry = small_geometry();
        let t = gen_track(21, 1.0, 8000).unwrap();
        let x: Vec<f64> = t.mixture.samples()[..256].to_vec();
        let ys: Vec<Vec<f64>> = t.sources.iter().map(|s| s.samples()[..256].to_vec()).collect();
        let model = SeparatorModel::with_hidden(Arch::MaskMlp, geometry, 2, 4, 1).unwrap();
        // Check the gradient w.r.t. the first head's bias; other parameters frozen.
        let target_index = 3;
        let point = model.params[target_index].tensor();
        let err = grad_check(
            |tape, p| {
                let mut params = model.register_params(tape, false);
                params[target_index] = p;
                let xv = tape.constant(Tensor::from_vec(x.clone()));
                let est = model
                    .forward_on_tape(tape, xv, &params)
                    .map_err(|e| match e {
                        SeparatorError::Tensor(t) => t,
                        other => panic!("{other}"),
                    })?;
                let targets: Vec<&[f64]> = ys.iter().map(|v| v.as_slice()).collect();
                separation_distance(tape, &est, &targets).map_err(|e| match e {
                    SeparatorError::Tensor(t) => t,
                    other => panic!("{other}"),
                })
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let data = vec![gen_track(1, 1.0, 8000).unwrap()];
        let model = SeparatorModel::new(Arch::MaskLinear, StftGeometry::default(), 2, 4).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(&model, &data, &cfg).unwrap();
        assert_eq!(out.model, model);
        assert!(out.loss_curve.is_empty());
    }

    #[test]
    fn single_item_overfits() {
        let data = vec![gen_track(77, 1.0, 8000).unwrap()];
        let model = SeparatorModel::new(Arch::MaskMlp, StftGeometry::default(), 2, 5).unwrap();
        let cfg = TrainConfig {
            epochs: 150,
            learning_rate: 1000.0,
            batch_size: 1,
            seed: 1,
        };
        let out = train(&model, &data, &cfg).unwrap();
        let first = out.loss_curve[0];
        let last = *out.loss_curve.last().unwrap();
        assert!(last * 10.0 <= first, "{first:e} -> {last:e}");
    }

    #[test]
    fn training_is_deterministic_and_seed_sensitive() {
        let data = vec![gen_track(3, 1.0, 8000).unwrap(), gen_track(4, 1.0, 8000).unwrap()];
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 5.0,
            batch_size: 1,
            seed: 9,
        };
        let m1 = SeparatorModel::new(Arch::MaskMlp, StftGeometry::default(), 2, 1).unwrap();
        let a = train(&m1, &data, &cfg).unwrap();
        let b = train(&m1, &data, &cfg).unwrap();
        assert_eq!(a.loss_curve, b.loss_curve);
        assert_eq!(a.model, b.model);
        let m2 = SeparatorModel::new(Arch::MaskMlp, StftGeometry::default(), 2, 2).unwrap();
        let c = train(&m2, &data, &cfg).unwrap();
        assert!(a.model.param_distance(&c.model).unwrap() > 0.0);
    }

    #[test]
    fn dataset_contract() {
        let model = SeparatorModel::new(Arch::MaskMlp, StftGeometry::default(), 2, 1).unwrap();
        assert!(matches!(
            train(&model, &[], &TrainConfig::default()),
            Err(SeparatorError::Dataset(_))
        ));
        let mut t = gen_track(1, 1.0, 8000).unwrap();
        t.mixture = WaveBuffer::new(vec![0.5; t.mixture.len()], 8000).unwrap();
        assert!(matches!(
            train(&model, &[t], &TrainConfig::default()),
            Err(SeparatorError::Dataset(_))
        ));
    }

    #[test]
    fn divergence_names_the_epoch() {
        let t = gen_track(1, 1.0, 8000).unwrap();
        let huge: Vec<WaveBuffer> = t
            .sources
            .iter()
            .map(|s| WaveBuffer::new(s.samples().iter().map(|v| v * 1e200).collect(), 8000).unwrap())
            .collect();
        let data = vec![SynthTrack::from_sources(t.id, t.seed, huge).unwrap()];
        let model = SeparatorModel::new(Arch::MaskLinear, StftGeometry::default(), 2, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            learning_rate: 1.0,
            batch_size: 1,
            seed: 0,
        };
        match train(&model, &data, &cfg) {
            Err(SeparatorError::Diverged { epoch, .. }) => assert!(epoch < 50),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let model = SeparatorModel::new(Arch::MaskMlp, StftGeometry::default(), 2, 8).unwrap();
        model.save(&path).unwrap();
        assert_eq!(SeparatorModel::load(&path).unwrap(), model);

        let mut broken = model.clone();
        broken.params.pop();
        broken.save(&path).unwrap();
        assert!(matches!(
            SeparatorModel::load(&path),
            Err(SeparatorError::Checkpoint { .. })
        ));
    }
}
