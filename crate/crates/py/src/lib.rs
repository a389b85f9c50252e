//! Python bindings for `amicable-core`.
//!
//! Signals cross the boundary as plain lists of floats. Models wrap
//! [`SeparatorModel`] and can be trained, saved, loaded and used as
//! perturbation targets:
//!
//! ```python
//! import amicable_py as am
//! track = am.gen_track(1_000_000, duration_secs=2.0)
//! model = am.Separator("mask-linear", window_size=256)
//! model.train([track], epochs=5)
//! result = am.perturb([model], track.mixture, track.sources, iterations=20)
//! print(result.di_sdr, am.sdr(track.sources[0], model.separate(track.mixture)[0]))
//! ```

use std::sync::Arc;

use amicable::datagen::{self, SynthTrack};
use amicable::dsp::{StftGeometry, WaveBuffer, WindowKind};
use amicable::metrics;
use amicable::perturb::{self as pt, PerturbConfig, PerturbJob, StprFloor};
use amicable::robustness::{self, CompressionProxy};
use amicable::separator::{self, Arch, SeparatorModel, TrainConfig};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn wave(samples: Vec<f64>, sample_rate: u32) -> PyResult<WaveBuffer> {
    WaveBuffer::new(samples, sample_rate).map_err(value_err)
}

fn waves(signals: Vec<Vec<f64>>, sample_rate: u32) -> PyResult<Vec<WaveBuffer>> {
    signals.into_iter().map(|s| wave(s, sample_rate)).collect()
}

fn to_lists(w: &[WaveBuffer]) -> Vec<Vec<f64>> {
    w.iter().map(|b| b.samples().to_vec()).collect()
}

/// One synthetic track: sources and their sum.
#[pyclass(module = "amicable_py", frozen)]
struct Track {
    inner: SynthTrack,
}

#[pymethods]
impl Track {
    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn sample_rate(&self) -> u32 {
        self.inner.sample_rate()
    }

    #[getter]
    fn mixture(&self) -> Vec<f64> {
        self.inner.mixture.samples().to_vec()
    }

    #[getter]
    fn sources(&self) -> Vec<Vec<f64>> {
        to_lists(&self.inner.sources)
    }

    fn __repr__(&self) -> String {
        format!(
            "Track(id={:?}, sources={}, duration_secs={})",
            self.inner.id,
            self.inner.sources.len(),
            self.inner.duration_secs()
        )
    }
}

/// Generates the synthetic track for `seed`.
#[pyfunction]
#[pyo3(signature = (seed, duration_secs = 5.0, sample_rate = 8000, n_sources = 2))]
fn gen_track(seed: u64, duration_secs: f64, sample_rate: u32, n_sources: usize) -> PyResult<Track> {
    let cfg = datagen::SynthConfig {
        duration_secs,
        sample_rate,
        n_sources,
    };
    let inner = datagen::gen_track_with(seed, &cfg).map_err(value_err)?;
    Ok(Track { inner })
}

/// Mask-based separator. Training replaces the wrapped model.
#[pyclass(module = "amicable_py")]
struct Separator {
    model: Arc<SeparatorModel>,
}

#[pymethods]
impl Separator {
    #[new]
    #[pyo3(signature = (arch = "mask-mlp", window_size = 512, hop = None, n_sources = 2, hidden = separator::DEFAULT_HIDDEN, seed = 0))]
    fn new(arch: &str, window_size: usize, hop: Option<usize>, n_sources: usize, hidden: usize, seed: u64) -> PyResult<Self> {
        let arch: Arch = arch.parse().map_err(value_err)?;
        let geometry = StftGeometry::new(window_size, hop.unwrap_or(window_size / 2), WindowKind::Hann).map_err(value_err)?;
        let model = SeparatorModel::with_hidden(arch, geometry, n_sources, hidden, seed).map_err(value_err)?;
        Ok(Self { model: Arc::new(model) })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let model = SeparatorModel::load(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self { model: Arc::new(model) })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.model.save(path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn arch(&self) -> String {
        self.model.arch.to_string()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.model.param_count()
    }

    /// Source estimates for `mixture`.
    #[pyo3(signature = (mixture, sample_rate = 8000))]
    fn separate(&self, mixture: Vec<f64>, sample_rate: u32) -> PyResult<Vec<Vec<f64>>> {
        let x = wave(mixture, sample_rate)?;
        Ok(to_lists(&self.model.forward(&x).map_err(runtime_err)?))
    }

    /// Trains on `tracks` and returns the per-epoch loss curve.
    #[pyo3(signature = (tracks, epochs = None, learning_rate = None, batch_size = None, seed = 0))]
    fn train(
        &mut self,
        py: Python<'_>,
        tracks: Vec<PyRef<'_, Track>>,
        epochs: Option<usize>,
        learning_rate: Option<f64>,
        batch_size: Option<usize>,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let data: Vec<SynthTrack> = tracks.iter().map(|t| t.inner.clone()).collect();
        let defaults = TrainConfig::default();
        let cfg = TrainConfig {
            epochs: epochs.unwrap_or(defaults.epochs),
            learning_rate: learning_rate.unwrap_or(defaults.learning_rate),
            batch_size: batch_size.unwrap_or(defaults.batch_size),
            seed,
        };
        let model = self.model.clone();
        let outcome = py.detach(move || separator::train(&model, &data, &cfg)).map_err(runtime_err)?;
        self.model = Arc::new(outcome.model);
        Ok(outcome.loss_curve)
    }

    fn __repr__(&self) -> String {
        format!(
            "Separator(arch={:?}, window_size={}, params={})",
            self.model.arch.to_string(),
            self.model.geometry.window_size,
            self.model.param_count()
        )
    }
}

/// Outcome of [`perturb`]. `nu` is rounded to 32-bit float precision.
#[pyclass(module = "amicable_py", frozen, get_all)]
struct Perturbation {
    nu: Vec<f64>,
    loss_trace: Vec<f64>,
    final_loss: f64,
    stpr: f64,
    di_sdr: f64,
    converged: bool,
}

/// Optimizes a perturbation of `mixture` for the weighted models.
#[pyfunction]
#[pyo3(signature = (
    models, mixture, sources, alphas = None, lam = pt::DEFAULT_LAMBDA,
    iterations = pt::DEFAULT_ITERATIONS, epsilon = pt::DEFAULT_EPSILON,
    patch_len = pt::DEFAULT_PATCH_LEN, adam_lr = None, seed = 0, sample_rate = 8000
))]
#[allow(clippy::too_many_arguments)]
fn perturb(
    py: Python<'_>,
    models: Vec<PyRef<'_, Separator>>,
    mixture: Vec<f64>,
    sources: Vec<Vec<f64>>,
    alphas: Option<Vec<f64>>,
    lam: f64,
    iterations: usize,
    epsilon: f64,
    patch_len: usize,
    adam_lr: Option<f64>,
    seed: u64,
    sample_rate: u32,
) -> PyResult<Perturbation> {
    let x = wave(mixture, sample_rate)?;
    let y = waves(sources, sample_rate)?;
    let mut config = PerturbConfig {
        alphas: alphas.unwrap_or_else(|| vec![1.0; models.len()]),
        lambda: lam,
        iterations,
        epsilon,
        patch_len,
        seed,
        ..PerturbConfig::default()
    };
    if let Some(lr) = adam_lr {
        config.adam.lr = lr;
    }
    let job = PerturbJob::new(models.iter().map(|m| m.model.clone()).collect(), config);
    let result = py
        .detach(move || {
            let mut r = pt::optimize(&job, &x, &y)?;
            r.round_to_f32(&x, &job.config)?;
            Ok::<_, pt::PerturbError>(r)
        })
        .map_err(runtime_err)?;
    Ok(Perturbation {
        nu: result.nu.samples().to_vec(),
        loss_trace: result.loss_trace,
        final_loss: result.final_loss,
        stpr: result.stpr,
        di_sdr: result.di_sdr,
        converged: result.converged,
    })
}

/// Signal-to-distortion ratio in dB.
#[pyfunction]
fn sdr(reference: Vec<f64>, estimate: Vec<f64>) -> PyResult<f64> {
    metrics::sdr_samples(&reference, &estimate).map_err(value_err)
}

/// SDR of the perturbed mixture against the clean one.
#[pyfunction]
fn di_sdr(mixture: Vec<f64>, nu: Vec<f64>) -> PyResult<f64> {
    metrics::di_sdr_samples(&mixture, &nu).map_err(value_err)
}

/// Short-term power ratio of `nu` against `mixture`.
#[pyfunction]
#[pyo3(signature = (nu, mixture, patch_len = pt::DEFAULT_PATCH_LEN))]
fn stpr(nu: Vec<f64>, mixture: Vec<f64>, patch_len: usize) -> PyResult<f64> {
    pt::stpr(&nu, &mixture, patch_len, StprFloor::Relative).map_err(value_err)
}

/// Applies a compression proxy such as `"quantize:8"` or `"mdct:0.25"`.
#[pyfunction]
#[pyo3(signature = (samples, proxy, sample_rate = 8000))]
fn compress(samples: Vec<f64>, proxy: &str, sample_rate: u32) -> PyResult<Vec<f64>> {
    let proxy: CompressionProxy = proxy.parse().map_err(value_err)?;
    let w = wave(samples, sample_rate)?;
    Ok(robustness::compress(&w, proxy).map_err(value_err)?.samples().to_vec())
}

#[pymodule]
fn amicable_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Track>()?;
    m.add_class::<Separator>()?;
    m.add_class::<Perturbation>()?;
    m.add_function(wrap_pyfunction!(gen_track, m)?)?;
    m.add_function(wrap_pyfunction!(perturb, m)?)?;
    m.add_function(wrap_pyfunction!(sdr, m)?)?;
    m.add_function(wrap_pyfunction!(di_sdr, m)?)?;
    m.add_function(wrap_pyfunction!(stpr, m)?)?;
    m.add_function(wrap_pyfunction!(compress, m)?)?;
    m.add("DEFAULT_LAMBDA", pt::DEFAULT_LAMBDA)?;
    Ok(())
}
