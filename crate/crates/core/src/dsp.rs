//! Framing, windowed STFT/ISTFT and mono WAV I/O.
//!
//! Framing is centered: the signal is preceded by `window_size / 2` zeros and
//! zero-padded at the tail to a whole number of frames, so every input sample
//! falls in the interior of at least one window. Synthesis is weighted
//! overlap-add normalized by the per-sample sum of squared windows, which
//! makes `istft(stft(x)) == x` for any hop that divides the window.
//!
//! The analysis and synthesis operators are also exposed as
//! [`LinearMap`]s ([`StftMap`], [`IstftMap`]) so they can sit on a gradient
//! tape; their adjoints are evaluated with the same FFTs as the forward path.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::LinearMap;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("signal of {len} samples is shorter than the window ({window})")]
    TooShort { len: usize, window: usize },
    #[error("invalid STFT geometry: {0}")]
    Geometry(String),
    #[error("invalid buffer: {0}")]
    Buffer(String),
    #[error("{path}: {detail}")]
    Wav { path: String, detail: String },
}

/// Mono sampled signal.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl WaveBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, DspError> {
        if samples.is_empty() {
            return Err(DspError::Buffer("empty buffer".into()));
        }
        if sample_rate == 0 {
            return Err(DspError::Buffer("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(DspError::Buffer(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        (self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Rounds every sample to the nearest `f32`, the precision of float WAV files.
    pub fn to_f32_precision(&self) -> Self {
        Self {
            samples: self.samples.iter().map(|&v| v as f32 as f64).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Sample-wise sum; lengths and rates must agree.
    pub fn add(&self, other: &WaveBuffer) -> Result<Self, DspError> {
        if self.len() != other.len() || self.sample_rate != other.sample_rate {
            return Err(DspError::Buffer(format!(
                "cannot add buffers of {} samples @ {} Hz and {} samples @ {} Hz",
                self.len(),
                self.sample_rate,
                other.len(),
                other.sample_rate
            )));
        }
        Ok(Self {
            samples: self.samples.iter().zip(&other.samples).map(|(a, b)| a + b).collect(),
            sample_rate: self.sample_rate,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowKind {
    /// Periodic Hann.
    Hann,
    Rectangular,
}

impl WindowKind {
    pub fn coefficients(self, size: usize) -> Vec<f64> {
        match self {
            WindowKind::Hann => (0..size)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / size as f64).cos())
                .collect(),
            WindowKind::Rectangular => vec![1.0; size],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftGeometry {
    pub window_size: usize,
    pub hop: usize,
    pub window: WindowKind,
}

impl Default for StftGeometry {
    fn default() -> Self {
        Self {
            window_size: 512,
            hop: 256,
            window: WindowKind::Hann,
        }
    }
}

impl StftGeometry {
    pub fn new(window_size: usize, hop: usize, window: WindowKind) -> Result<Self, DspError> {
        let g = Self {
            window_size,
            hop,
            window,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), DspError> {
        if self.window_size < 2 || !self.window_size.is_power_of_two() {
            return Err(DspError::Geometry(format!(
                "window size {} is not a power of two",
                self.window_size
            )));
        }
        if self.hop == 0 || !self.window_size.is_multiple_of(self.hop) {
            return Err(DspError::Geometry(format!(
                "hop {} does not divide window size {}",
                self.hop, self.window_size
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    /// Zeros inserted before the first sample.
    pub fn front_pad(&self) -> usize {
        self.window_size / 2
    }

    pub fn n_frames(&self, signal_len: usize) -> usize {
        signal_len.div_ceil(self.hop) + 1
    }

    fn padded_len(&self, n_frames: usize) -> usize {
        (n_frames - 1) * self.hop + self.window_size
    }
}

/// Frames x bins complex spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    frames: usize,
    bins: usize,
    data: Vec<Complex64>,
    geometry: StftGeometry,
    sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn new(
        frames: usize,
        data: Vec<Complex64>,
        geometry: StftGeometry,
        sample_rate: u32,
    ) -> Result<Self, DspError> {
        geometry.validate()?;
        let bins = geometry.bins();
        if data.len() != frames * bins || frames == 0 {
            return Err(DspError::Geometry(format!(
                "{} values do not form {frames} frames of {bins} bins",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            bins,
            data,
            geometry,
            sample_rate,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn geometry(&self) -> &StftGeometry {
        &self.geometry
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn frame(&self, f: usize) -> &[Complex64] {
        &self.data[f * self.bins..(f + 1) * self.bins]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut s = self.clone();
        s.data.iter_mut().for_each(|c| *c *= factor);
        s
    }
}

/// Precomputed window and FFT plans for one geometry.
#[derive(Clone)]
pub struct StftPlan {
    geometry: StftGeometry,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl StftPlan {
    pub fn new(geometry: StftGeometry) -> Result<Self, DspError> {
        geometry.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            window: geometry.window.coefficients(geometry.window_size),
            forward: planner.plan_fft_forward(geometry.window_size),
            inverse: planner.plan_fft_inverse(geometry.window_size),
            geometry,
        })
    }

    pub fn geometry(&self) -> &StftGeometry {
        &self.geometry
    }

    /// Forward transform into separate real and imaginary planes, each
    /// `n_frames * bins` long and frame-major.
    pub fn analyze(&self, signal: &[f64]) -> (Vec<f64>, Vec<f64>, usize) {
        let g = &self.geometry;
        let (w, bins) = (g.window_size, g.bins());
        let n_frames = g.n_frames(signal.len());
        let mut padded = vec![0.0; g.padded_len(n_frames)];
        padded[g.front_pad()..g.front_pad() + signal.len()].copy_from_slice(signal);
        let mut re = vec![0.0; n_frames * bins];
        let mut im = vec![0.0; n_frames * bins];
        let mut buf = vec![Complex64::new(0.0, 0.0); w];
        let mut scratch = self.scratch();
        for f in 0..n_frames {
            let start = f * g.hop;
            for (n, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(self.window[n] * padded[start + n], 0.0);
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..bins {
                re[f * bins + k] = buf[k].re;
                im[f * bins + k] = buf[k].im;
            }
        }
        (re, im, n_frames)
    }

    /// Adjoint of [`StftPlan::analyze`]: maps cotangents of the real and
    /// imaginary planes back to the signal.
    pub fn analyze_adjoint(&self, g_re: &[f64], g_im: &[f64], signal_len: usize) -> Vec<f64> {
        let g = &self.geometry;
        let (w, bins) = (g.window_size, g.bins());
        let n_frames = g.n_frames(signal_len);
        let mut padded = vec![0.0; g.padded_len(n_frames)];
        let mut buf = vec![Complex64::new(0.0, 0.0); w];
        let mut scratch = self.scratch();
        for f in 0..n_frames {
            buf.fill(Complex64::new(0.0, 0.0));
            for k in 0..bins {
                buf[k] = Complex64::new(g_re[f * bins + k], g_im[f * bins + k]);
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let start = f * g.hop;
            for n in 0..w {
                padded[start + n] += self.window[n] * buf[n].re;
            }
        }
        padded[g.front_pad()..g.front_pad() + signal_len].to_vec()
    }

    fn overlap_norm(&self, n_frames: usize) -> Vec<f64> {
        let g = &self.geometry;
        let mut norm = vec![0.0; g.padded_len(n_frames)];
        for f in 0..n_frames {
            for n in 0..g.window_size {
                norm[f * g.hop + n] += self.window[n] * self.window[n];
            }
        }
        norm
    }

    fn check_synthesis(&self, n_frames: usize, out_len: usize) -> Result<(), DspError> {
        let g = &self.geometry;
        if n_frames == 0 || out_len == 0 || g.front_pad() + out_len > g.padded_len(n_frames) {
            return Err(DspError::Geometry(format!(
                "{n_frames} frames cannot synthesize {out_len} samples with hop {}",
                g.hop
            )));
        }
        Ok(())
    }

    fn scratch(&self) -> Vec<Complex64> {
        let len = self
            .forward
            .get_inplace_scratch_len()
            .max(self.inverse.get_inplace_scratch_len());
        vec![Complex64::new(0.0, 0.0); len]
    }

    /// Weighted overlap-add synthesis of `n_frames` half spectra.
    /// Imaginary parts of the DC and Nyquist bins are ignored.
    pub fn synthesize(&self, re: &[f64], im: &[f64], n_frames: usize, out_len: usize) -> Vec<f64> {
        let g = &self.geometry;
        let (w, bins) = (g.window_size, g.bins());
        let mut out = vec![0.0; g.padded_len(n_frames)];
        let mut buf = vec![Complex64::new(0.0, 0.0); w];
        let mut scratch = self.scratch();
        let scale = 1.0 / w as f64;
        for f in 0..n_frames {
            for k in 0..bins {
                buf[k] = Complex64::new(re[f * bins + k], im[f * bins + k]);
            }
            buf[0].im = 0.0;
            buf[w / 2].im = 0.0;
            for k in 1..w / 2 {
                buf[w - k] = buf[k].conj();
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let start = f * g.hop;
            for n in 0..w {
                out[start + n] += self.window[n] * buf[n].re * scale;
            }
        }
        let norm = self.overlap_norm(n_frames);
        let pad = g.front_pad();
        (0..out_len)
            .map(|t| {
                let d = norm[pad + t];
                if d > 1e-12 {
                    out[pad + t] / d
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Adjoint of [`StftPlan::synthesize`].
    pub fn synthesize_adjoint(&self, g_out: &[f64], n_frames: usize) -> (Vec<f64>, Vec<f64>) {
        let g = &self.geometry;
        let (w, bins) = (g.window_size, g.bins());
        let norm = self.overlap_norm(n_frames);
        let pad = g.front_pad();
        let mut gp = vec![0.0; g.padded_len(n_frames)];
        for (t, v) in g_out.iter().enumerate() {
            let d = norm[pad + t];
            if d > 1e-12 {
                gp[pad + t] = v / d;
            }
        }
        let mut re = vec![0.0; n_frames * bins];
        let mut im = vec![0.0; n_frames * bins];
        let mut buf = vec![Complex64::new(0.0, 0.0); w];
        let mut scratch = self.scratch();
        let scale = 1.0 / w as f64;
        for f in 0..n_frames {
            let start = f * g.hop;
            for n in 0..w {
                buf[n] = Complex64::new(self.window[n] * gp[start + n], 0.0);
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..bins {
                let c = if k == 0 || k == w / 2 { scale } else { 2.0 * scale };
                re[f * bins + k] = c * buf[k].re;
                im[f * bins + k] = if k == 0 || k == w / 2 { 0.0 } else { c * buf[k].im };
            }
        }
        (re, im)
    }
}

pub fn stft(w: &WaveBuffer, geometry: &StftGeometry) -> Result<ComplexSpectrogram, DspError> {
    let plan = StftPlan::new(*geometry)?;
    if w.len() < geometry.window_size {
        return Err(DspError::TooShort {
            len: w.len(),
            window: geometry.window_size,
        });
    }
    let (re, im, frames) = plan.analyze(w.samples());
    let data = re.into_iter().zip(im).map(|(r, i)| Complex64::new(r, i)).collect();
    ComplexSpectrogram::new(frames, data, *geometry, w.sample_rate())
}

pub fn istft(s: &ComplexSpectrogram, out_len: usize) -> Result<WaveBuffer, DspError> {
    let plan = StftPlan::new(s.geometry)?;
    plan.check_synthesis(s.frames, out_len)?;
    let re: Vec<f64> = s.data.iter().map(|c| c.re).collect();
    let im: Vec<f64> = s.data.iter().map(|c| c.im).collect();
    WaveBuffer::new(plan.synthesize(&re, &im, s.frames, out_len), s.sample_rate)
}

/// STFT as a tape operator: `[len]` signal to `[2, frames, bins]`
/// (real plane, then imaginary plane).
pub struct StftMap {
    plan: StftPlan,
    signal_len: usize,
    input_shape: [usize; 1],
    output_shape: [usize; 3],
}

impl StftMap {
    pub fn new(plan: StftPlan, signal_len: usize) -> Result<Self, DspError> {
        let g = *plan.geometry();
        if signal_len < g.window_size {
            return Err(DspError::TooShort {
                len: signal_len,
                window: g.window_size,
            });
        }
        let frames = g.n_frames(signal_len);
        Ok(Self {
            plan,
            signal_len,
            input_shape: [signal_len],
            output_shape: [2, frames, g.bins()],
        })
    }

    pub fn frames(&self) -> usize {
        self.output_shape[1]
    }
}

impl LinearMap for StftMap {
    fn name(&self) -> &'static str {
        "stft"
    }

    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    fn apply(&self, input: &[f64]) -> Vec<f64> {
        let (mut re, im, _) = self.plan.analyze(input);
        re.extend(im);
        re
    }

    fn adjoint(&self, cotangent: &[f64]) -> Vec<f64> {
        let half = cotangent.len() / 2;
        self.plan.analyze_adjoint(&cotangent[..half], &cotangent[half..], self.signal_len)
    }
}

/// Overlap-add synthesis as a tape operator: `[2, frames, bins]` to `[out_len]`.
pub struct IstftMap {
    plan: StftPlan,
    frames: usize,
    input_shape: [usize; 3],
    output_shape: [usize; 1],
}

impl IstftMap {
    pub fn new(plan: StftPlan, frames: usize, out_len: usize) -> Result<Self, DspError> {
        plan.check_synthesis(frames, out_len)?;
        let bins = plan.geometry().bins();
        Ok(Self {
            plan,
            frames,
            input_shape: [2, frames, bins],
            output_shape: [out_len],
        })
    }
}

impl LinearMap for IstftMap {
    fn name(&self) -> &'static str {
        "istft"
    }

    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    fn apply(&self, input: &[f64]) -> Vec<f64> {
        let half = input.len() / 2;
        self.plan
            .synthesize(&input[..half], &input[half..], self.frames, self.output_shape[0])
    }

    fn adjoint(&self, cotangent: &[f64]) -> Vec<f64> {
        let (mut re, im) = self.plan.synthesize_adjoint(cotangent, self.frames);
        re.extend(im);
        re
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BitDepth {
    Pcm16,
    Float32,
}

fn wav_err(path: &Path, detail: impl ToString) -> DspError {
    DspError::Wav {
        path: path.display().to_string(),
        detail: detail.to_string(),
    }
}

pub fn wav_read(path: impl AsRef<Path>) -> Result<WaveBuffer, DspError> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(wav_err(
            path,
            format!("mono required, file has {} channels", spec.channels),
        ));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (fmt, bits) => {
            return Err(wav_err(
                path,
                format!("unsupported sample format {fmt:?} at {bits} bits (PCM-16 or float-32 required)"),
            ))
        }
    };
    WaveBuffer::new(samples, spec.sample_rate).map_err(|e| wav_err(path, e))
}

/// Writes a mono WAV. PCM-16 output is rounded to the nearest step without
/// dither and clipped to the representable range.
pub fn wav_write(path: impl AsRef<Path>, w: &WaveBuffer, depth: BitDepth) -> Result<(), DspError> {
    let path = path.as_ref();
    let (bits, format) = match depth {
        BitDepth::Pcm16 => (16, hound::SampleFormat::Int),
        BitDepth::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: bits,
        sample_format: format,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &v in w.samples() {
        let r = match depth {
            BitDepth::Pcm16 => writer.write_sample((v * 32768.0).round().clamp(-32768.0, 32767.0) as i16),
            BitDepth::Float32 => writer.write_sample(v as f32),
        };
        r.map_err(|e| wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}
