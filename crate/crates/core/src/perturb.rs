//! Amicable and adversarial perturbations of a mixture.
//!
//! The perturbation `nu` minimizes
//!
//! ```text
//! L(nu) = sum_i alpha_i * d(f_i(x + nu), y) + lambda * C(nu)
//! ```
//!
//! where `d` is the mean squared separation error ([`separation_distance`]),
//! `C` is the short-term power ratio ([`stpr`]) and the signed weights
//! `alpha_i` make the perturbation amicable (`alpha_i > 0`) or adversarial
//! (`alpha_i < 0`) for each model. A single model with `alpha = [1]` is the
//! plain amicable loss.
//!
//! `nu` starts as uniform noise in `[-epsilon, epsilon]` and is updated with
//! Adam for a fixed number of iterations. There is no projection step: the
//! size of `nu` is controlled only by `lambda`.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{self, BitDepth, DspError, WaveBuffer};
use crate::metrics::{self, MetricsError};
use crate::separator::{separation_distance, SeparatorError, SeparatorModel};
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const DEFAULT_PATCH_LEN: usize = 256;
pub const DEFAULT_EPSILON: f64 = 0.01;
pub const DEFAULT_ITERATIONS: usize = 300;
/// The separation term is a per-sample mean while STPR sums one ratio per
/// patch, so useful `lambda` values are small.
pub const DEFAULT_LAMBDA: f64 = 5e-7;
pub const DEFAULT_LAMBDA_GRID: [f64; 5] = [2e-7, 5e-7, 1e-6, 2e-6, 5e-6];

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("invalid perturbation job: {0}")]
    Invalid(String),
    #[error("model {index}: {source}")]
    Model {
        index: usize,
        #[source]
        source: SeparatorError,
    },
    #[error("non-finite loss at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("silent mixture patch {patch} with the STPR floor disabled")]
    SilentPatch { patch: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
}

/// Guard added to each mixture patch norm in the STPR denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StprFloor {
    /// `1e-8 * RMS(x) * sqrt(l)`.
    #[default]
    Relative,
    Fixed(f64),
    /// No guard; a silent mixture patch is an error.
    Disabled,
}

/// Per-patch denominators `||x_n||_2 + floor`. The last patch is zero-padded
/// when `l` does not divide the length.
pub fn stpr_denominators(x: &[f64], patch_len: usize, floor: StprFloor) -> Result<Vec<f64>, PerturbError> {
    if patch_len == 0 || x.is_empty() {
        return Err(PerturbError::Invalid("patch length and signal must be non-empty".into()));
    }
    let floor = match floor {
        StprFloor::Relative => {
            let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
            1e-8 * rms * (patch_len as f64).sqrt()
        }
        StprFloor::Fixed(v) => v,
        StprFloor::Disabled => 0.0,
    };
    x.chunks(patch_len)
        .enumerate()
        .map(|(n, patch)| {
            let d = patch.iter().map(|v| v * v).sum::<f64>().sqrt() + floor;
            if d > 0.0 {
                Ok(d)
            } else {
                Err(PerturbError::SilentPatch { patch: n })
            }
        })
        .collect()
}

/// Short-term power ratio `sum_n ||nu_n|| / (||x_n|| + floor)`.
pub fn stpr(nu: &[f64], x: &[f64], patch_len: usize, floor: StprFloor) -> Result<f64, PerturbError> {
    if nu.len() != x.len() {
        return Err(PerturbError::Invalid(format!(
            "perturbation has {} samples, mixture {}",
            nu.len(),
            x.len()
        )));
    }
    let den = stpr_denominators(x, patch_len, floor)?;
    Ok(nu
        .chunks(patch_len)
        .zip(&den)
        .map(|(p, d)| p.iter().map(|v| v * v).sum::<f64>().sqrt() / d)
        .sum())
}

/// [`stpr`] recorded on a tape, differentiable in `nu`.
pub fn stpr_on_tape(tape: &mut Tape, nu: Var, x: &[f64], patch_len: usize, floor: StprFloor) -> Result<Var, PerturbError> {
    let len = tape.value(nu).len();
    if len != x.len() {
        return Err(PerturbError::Invalid(format!(
            "perturbation has {len} samples, mixture {}",
            x.len()
        )));
    }
    let den = stpr_denominators(x, patch_len, floor)?;
    let patches = den.len();
    let padded = if patches * patch_len > len {
        let zeros = tape.constant(Tensor::zeros(&[patches * patch_len - len]));
        tape.concat(&[nu, zeros])?
    } else {
        nu
    };
    let rows = tape.reshape(padded, &[patches, patch_len])?;
    let norms = tape.row_norms(rows)?;
    let inv = tape.constant(Tensor::from_vec(den.iter().map(|d| 1.0 / d).collect()));
    let ratios = tape.mul(norms, inv)?;
    Ok(tape.sum(ratios)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// Updates the moments with `grad` and returns the bias-corrected step
    /// `-lr * m_hat / (sqrt(v_hat) + eps)` to add to the parameters.
    pub fn step(&mut self, grad: &[f64], cfg: &AdamConfig) -> Result<Vec<f64>, PerturbError> {
        if grad.len() != self.m.len() {
            return Err(PerturbError::Invalid(format!(
                "gradient has {} entries, state {}",
                grad.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        Ok(grad
            .iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|(&g, (m, v))| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                -cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps)
            })
            .collect())
    }
}

/// Everything about a perturbation run except the models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    /// Signed weight per model.
    pub alphas: Vec<f64>,
    pub lambda: f64,
    pub epsilon: f64,
    pub iterations: usize,
    pub patch_len: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    #[serde(default)]
    pub floor: StprFloor,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            alphas: vec![1.0],
            lambda: DEFAULT_LAMBDA,
            epsilon: DEFAULT_EPSILON,
            iterations: DEFAULT_ITERATIONS,
            patch_len: DEFAULT_PATCH_LEN,
            seed: 0,
            adam: AdamConfig::default(),
            floor: StprFloor::Relative,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PerturbJob {
    pub models: Vec<Arc<SeparatorModel>>,
    pub config: PerturbConfig,
}

impl PerturbJob {
    pub fn new(models: Vec<Arc<SeparatorModel>>, config: PerturbConfig) -> Self {
        Self { models, config }
    }

    /// Models the perturbation should help (`alpha > 0`).
    pub fn amicable_targets(&self) -> Vec<usize> {
        (0..self.config.alphas.len()).filter(|&i| self.config.alphas[i] > 0.0).collect()
    }

    /// Models the perturbation should hurt (`alpha < 0`).
    pub fn adversarial_targets(&self) -> Vec<usize> {
        (0..self.config.alphas.len()).filter(|&i| self.config.alphas[i] < 0.0).collect()
    }

    pub fn validate(&self, signal_len: usize) -> Result<(), PerturbError> {
        let c = &self.config;
        if self.models.is_empty() || self.models.len() != c.alphas.len() {
            return Err(PerturbError::Invalid(format!(
                "{} models but {} weights",
                self.models.len(),
                c.alphas.len()
            )));
        }
        if c.iterations == 0 {
            return Err(PerturbError::Invalid("iterations must be positive".into()));
        }
        if c.patch_len == 0 || c.patch_len > signal_len {
            return Err(PerturbError::Invalid(format!(
                "patch length {} must be in 1..={signal_len}",
                c.patch_len
            )));
        }
        if !(c.lambda >= 0.0) || !c.lambda.is_finite() {
            return Err(PerturbError::Invalid(format!("lambda must be >= 0, got {}", c.lambda)));
        }
        if !(c.epsilon >= 0.0) || c.alphas.iter().any(|a| !a.is_finite()) {
            return Err(PerturbError::Invalid("epsilon and weights must be finite".into()));
        }
        Ok(())
    }
}

/// Handles to the pieces of a recorded loss.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    /// Unweighted separation distance per model.
    pub separation: Vec<Var>,
    pub stpr: Var,
}

fn check_signals(x: &WaveBuffer, y: &[WaveBuffer]) -> Result<(), PerturbError> {
    if y.iter().any(|s| s.len() != x.len()) {
        return Err(PerturbError::Invalid("sources and mixture differ in length".into()));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn weighted_loss(
    tape: &mut Tape,
    models: &[&SeparatorModel],
    alphas: &[f64],
    x: &WaveBuffer,
    y: &[WaveBuffer],
    nu: Var,
    lambda: f64,
    patch_len: usize,
    floor: StprFloor,
) -> Result<LossTerms, PerturbError> {
    if models.len() != alphas.len() || models.is_empty() {
        return Err(PerturbError::Invalid(format!(
            "{} models but {} weights",
            models.len(),
            alphas.len()
        )));
    }
    check_signals(x, y)?;
    let xv = tape.constant(Tensor::from_vec(x.samples().to_vec()));
    let input = tape.add(xv, nu)?;
    let targets: Vec<&[f64]> = y.iter().map(|s| s.samples()).collect();
    let mut separation = Vec::with_capacity(models.len());
    let mut total: Option<Var> = None;
    for (index, (model, &alpha)) in models.iter().zip(alphas).enumerate() {
        let wrap = |source| PerturbError::Model { index, source };
        let params = model.register_params(tape, false);
        let est = model.forward_on_tape(tape, input, &params).map_err(wrap)?;
        let d = separation_distance(tape, &est, &targets).map_err(wrap)?;
        let weighted = tape.scale(d, alpha)?;
        separation.push(d);
        total = Some(match total {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }
    let c = stpr_on_tape(tape, nu, x.samples(), patch_len, floor)?;
    let reg = tape.scale(c, lambda)?;
    let total = tape.add(total.expect("at least one model"), reg)?;
    Ok(LossTerms {
        total,
        separation,
        stpr: c,
    })
}

/// Single-model loss `d(f(x + nu), y) + lambda * C(nu)`.
pub fn amicable_loss(
    tape: &mut Tape,
    model: &SeparatorModel,
    x: &WaveBuffer,
    y: &[WaveBuffer],
    nu: Var,
    lambda: f64,
    patch_len: usize,
) -> Result<LossTerms, PerturbError> {
    weighted_loss(tape, &[model], &[1.0], x, y, nu, lambda, patch_len, StprFloor::Relative)
}

/// Multi-model loss `sum_i alpha_i d(f_i(x + nu), y) + lambda * C(nu)`.
pub fn mmpl_loss(
    tape: &mut Tape,
    job: &PerturbJob,
    x: &WaveBuffer,
    y: &[WaveBuffer],
    nu: Var,
) -> Result<LossTerms, PerturbError> {
    let models: Vec<&SeparatorModel> = job.models.iter().map(|m| m.as_ref()).collect();
    let c = &job.config;
    weighted_loss(tape, &models, &c.alphas, x, y, nu, c.lambda, c.patch_len, c.floor)
}

/// Value of the job loss at `nu` without gradients.
pub fn loss_value(job: &PerturbJob, x: &WaveBuffer, y: &[WaveBuffer], nu: &[f64]) -> Result<f64, PerturbError> {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::from_vec(nu.to_vec()));
    let terms = mmpl_loss(&mut tape, job, x, y, v)?;
    Ok(tape.value(terms.total).item().expect("scalar"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbResult {
    pub nu: WaveBuffer,
    /// Loss at the start of every iteration, before its update.
    pub loss_trace: Vec<f64>,
    /// Loss after the last update.
    pub final_loss: f64,
    pub stpr: f64,
    pub di_sdr: f64,
    /// `final_loss <= loss_trace[0]`.
    pub converged: bool,
}

fn is_non_finite(e: &PerturbError) -> bool {
    matches!(
        e,
        PerturbError::Tensor(TensorError::NonFinite { .. })
            | PerturbError::Model {
                source: SeparatorError::Tensor(TensorError::NonFinite { .. }),
                ..
            }
    )
}

/// Runs Adam on the job loss and returns the optimized perturbation.
pub fn optimize(job: &PerturbJob, x: &WaveBuffer, y: &[WaveBuffer]) -> Result<PerturbResult, PerturbError> {
    job.validate(x.len())?;
    check_signals(x, y)?;
    let c = &job.config;
    let worst = (0..x.len())
        .map(|i| (x.samples()[i] - y.iter().map(|s| s.samples()[i]).sum::<f64>()).abs())
        .fold(0.0f64, f64::max);
    if worst > 1e-6 {
        log::warn!("mixture differs from the sum of sources by up to {worst:e}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut nu: Vec<f64> = (0..x.len())
        .map(|_| if c.epsilon > 0.0 { rng.random_range(-c.epsilon..=c.epsilon) } else { 0.0 })
        .collect();
    let mut adam = AdamState::new(x.len());
    let mut loss_trace = Vec::with_capacity(c.iterations);

    for iteration in 0..c.iterations {
        let mut tape = Tape::new();
        let nv = tape.leaf(Tensor::from_vec(nu.clone()));
        let terms = mmpl_loss(&mut tape, job, x, y, nv).map_err(|e| {
            if is_non_finite(&e) {
                PerturbError::NonFinite { iteration }
            } else {
                e
            }
        })?;
        let loss = tape.value(terms.total).item().expect("scalar");
        if !loss.is_finite() {
            return Err(PerturbError::NonFinite { iteration });
        }
        loss_trace.push(loss);
        let grads = tape.backward(terms.total).map_err(|e| match e {
            TensorError::NonFinite { .. } => PerturbError::NonFinite { iteration },
            other => other.into(),
        })?;
        let delta = adam.step(grads.get(nv).expect("leaf").data(), &c.adam)?;
        nu.iter_mut().zip(&delta).for_each(|(n, d)| *n += d);
        if iteration % 50 == 0 {
            log::debug!("iteration {iteration}: loss {loss:.6e}");
        }
    }

    let final_loss = loss_value(job, x, y, &nu).map_err(|e| {
        if is_non_finite(&e) {
            PerturbError::NonFinite {
                iteration: c.iterations,
            }
        } else {
            e
        }
    })?;
    let stpr_value = stpr(&nu, x.samples(), c.patch_len, c.floor)?;
    let di = metrics::di_sdr_samples(x.samples(), &nu)?;
    Ok(PerturbResult {
        nu: WaveBuffer::new(nu, x.sample_rate())?,
        converged: final_loss <= loss_trace[0],
        loss_trace,
        final_loss,
        stpr: stpr_value,
        di_sdr: di,
    })
}

/// JSON sidecar written next to the perturbation WAV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbSidecar {
    pub track_id: String,
    pub loss_trace: Vec<f64>,
    pub final_loss: f64,
    pub stpr: f64,
    pub di_sdr: f64,
    pub converged: bool,
    pub job_config: PerturbConfig,
    pub seed: u64,
    /// SHA-256 of each model checkpoint, when known.
    #[serde(default)]
    pub model_sha256: Vec<String>,
}

impl PerturbResult {
    pub fn sidecar(&self, track_id: &str, config: &PerturbConfig) -> PerturbSidecar {
        PerturbSidecar {
            track_id: track_id.to_string(),
            loss_trace: self.loss_trace.clone(),
            final_loss: self.final_loss,
            stpr: self.stpr,
            di_sdr: self.di_sdr,
            converged: self.converged,
            job_config: config.clone(),
            seed: config.seed,
            model_sha256: Vec::new(),
        }
    }

    /// Rounds `nu` to float-32 precision, the precision it is stored with,
    /// and recomputes the STPR and DI-SDR of the rounded signal.
    pub fn round_to_f32(&mut self, x: &WaveBuffer, config: &PerturbConfig) -> Result<(), PerturbError> {
        self.nu = self.nu.to_f32_precision();
        self.stpr = stpr(self.nu.samples(), x.samples(), config.patch_len, config.floor)?;
        self.di_sdr = metrics::di_sdr(x, &self.nu)?;
        Ok(())
    }

    /// Writes `<stem>.wav` (float-32) and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str, sidecar: &PerturbSidecar) -> Result<(), PerturbError> {
        dsp::wav_write(dir.join(format!("{stem}.wav")), &self.nu, BitDepth::Float32)?;
        let path = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
        fs::write(&path, text + "\n").map_err(|e| PerturbError::Io {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }
}
