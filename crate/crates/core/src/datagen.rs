//! Deterministic synthetic corpus.
//!
//! Every track has a harmonic "vocal-like" source (note sequence, 3 to 5
//! partials, f0 in 110..440 Hz) and a "percussive-like" source made of
//! band-passed noise bursts. Extra sources, when requested, alternate between
//! the two kinds in higher registers.
//!
//! Seed ranges: the training split uses seeds starting at
//! [`TRAIN_BASE_SEED`], the evaluation split seeds starting at
//! [`EVAL_BASE_SEED`]. Splits of fewer than `EVAL_BASE_SEED - TRAIN_BASE_SEED`
//! tracks never overlap.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{self, BitDepth, DspError, WaveBuffer};

pub const TRAIN_BASE_SEED: u64 = 1_000;
pub const EVAL_BASE_SEED: u64 = 1_000_000;
pub const DEFAULT_SAMPLE_RATE: u32 = 8000;
pub const TRAIN_DURATION_SECS: f64 = 5.0;
pub const EVAL_DURATION_SECS: f64 = 10.0;

const TARGET_PEAK: f64 = 0.7;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid synthesis request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub duration_secs: f64,
    pub sample_rate: u32,
    pub n_sources: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            duration_secs: EVAL_DURATION_SECS,
            sample_rate: DEFAULT_SAMPLE_RATE,
            n_sources: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthTrack {
    pub id: String,
    pub seed: u64,
    pub sources: Vec<WaveBuffer>,
    pub mixture: WaveBuffer,
}

impl SynthTrack {
    /// Builds a track from its sources; the mixture is their sample-wise sum
    /// accumulated in source order.
    pub fn from_sources(id: String, seed: u64, sources: Vec<WaveBuffer>) -> Result<Self, DatagenError> {
        let first = sources
            .first()
            .ok_or_else(|| DatagenError::Invalid("track needs at least one source".into()))?;
        let mut mix = vec![0.0; first.len()];
        for s in &sources {
            if s.len() != first.len() || s.sample_rate() != first.sample_rate() {
                return Err(DatagenError::Invalid("sources differ in length or rate".into()));
            }
            for (m, v) in mix.iter_mut().zip(s.samples()) {
                *m += v;
            }
        }
        let mixture = WaveBuffer::new(mix, first.sample_rate())?;
        Ok(Self {
            id,
            seed,
            sources,
            mixture,
        })
    }

    pub fn sample_rate(&self) -> u32 {
        self.mixture.sample_rate()
    }

    pub fn duration_secs(&self) -> f64 {
        self.mixture.duration_secs()
    }
}

pub fn track_id(seed: u64) -> String {
    format!("track-{seed:07}")
}

fn harmonic_voice(rng: &mut ChaCha8Rng, len: usize, sr: f64, register: f64) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let nyquist_guard = 0.45 * sr;
    let mut start = 0usize;
    while start < len {
        let note_len = ((rng.random_range(0.3..0.9) * sr) as usize).max(1);
        let end = (start + note_len).min(len);
        // Log-uniform pitch in [110, 440] Hz times the register.
        let f0 = register * 110.0 * 4f64.powf(rng.random_range(0.0..1.0));
        let n_harm = rng.random_range(3..=5);
        let amps: Vec<f64> = (1..=n_harm)
            .map(|h| rng.random_range(0.5..1.0) / h as f64)
            .collect();
        let phases: Vec<f64> = (0..n_harm).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let decay = rng.random_range(0.5..3.0);
        let level = rng.random_range(0.6..1.0);
        let attack = 0.02 * sr;
        let release = 0.03 * sr;
        let span = (end - start) as f64;
        for (i, o) in out[start..end].iter_mut().enumerate() {
            let t = i as f64;
            let env = (t / attack).min(1.0) * ((span - t) / release).min(1.0) * (-decay * t / sr).exp();
            let mut v = 0.0;
            for (h, (a, p)) in amps.iter().zip(&phases).enumerate() {
                let f = f0 * (h + 1) as f64;
                if f < nyquist_guard {
                    v += a * (2.0 * PI * f * t / sr + p).sin();
                }
            }
            *o = level * env * v;
        }
        start = end;
    }
    out
}

/// Two cascaded RBJ band-pass biquads (0 dB peak gain).
fn bandpass(signal: &mut [f64], center: f64, q: f64, sr: f64) {
    let w0 = 2.0 * PI * center / sr;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    for _ in 0..2 {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        for s in signal.iter_mut() {
            let x0 = *s;
            let y0 = b0 * x0 + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = x0;
            y2 = y1;
            y1 = y0;
            *s = y0;
        }
    }
}

fn noise_bursts(rng: &mut ChaCha8Rng, len: usize, sr: f64, band_shift: f64) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let mut onset = (rng.random_range(0.0..0.3) * sr) as usize;
    while onset < len {
        let tau = rng.random_range(0.03..0.12) * sr;
        let burst_len = ((6.0 * tau) as usize).min(len - onset);
        let gain = rng.random_range(0.5..1.0);
        let center = band_shift * rng.random_range(1500.0..3000.0);
        let mut burst: Vec<f64> = (0..burst_len)
            .map(|i| rng.random_range(-1.0..1.0) * (-(i as f64) / tau).exp())
            .collect();
        bandpass(&mut burst, center.min(0.45 * sr), 1.5, sr);
        for (o, b) in out[onset..onset + burst_len].iter_mut().zip(&burst) {
            *o += gain * b;
        }
        onset += (rng.random_range(0.15..0.6) * sr) as usize;
    }
    out
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|a| a * a).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

/// Generates one track with the default two sources.
pub fn gen_track(seed: u64, duration_secs: f64, sample_rate: u32) -> Result<SynthTrack, DatagenError> {
    gen_track_with(
        seed,
        &SynthConfig {
            duration_secs,
            sample_rate,
            n_sources: 2,
        },
    )
}

pub fn gen_track_with(seed: u64, cfg: &SynthConfig) -> Result<SynthTrack, DatagenError> {
    if !(cfg.duration_secs >= 1.0) {
        return Err(DatagenError::Invalid(format!(
            "duration must be at least 1 s, got {}",
            cfg.duration_secs
        )));
    }
    if cfg.sample_rate < 4000 {
        return Err(DatagenError::Invalid(format!(
            "sample rate {} Hz is too low for the synthetic sources",
            cfg.sample_rate
        )));
    }
    if cfg.n_sources < 2 {
        return Err(DatagenError::Invalid("at least two sources are required".into()));
    }
    let sr = cfg.sample_rate as f64;
    let len = (cfg.duration_secs * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut raw: Vec<Vec<f64>> = (0..cfg.n_sources)
        .map(|i| {
            let octave = 2f64.powi((i / 2) as i32);
            if i % 2 == 0 {
                harmonic_voice(&mut rng, len, sr, octave)
            } else {
                noise_bursts(&mut rng, len, sr, octave)
            }
        })
        .collect();
    for (i, s) in raw.iter_mut().enumerate() {
        let r = rms(s);
        let gain = if i == 0 { 1.0 } else { rng.random_range(0.5..1.0) };
        if r > 0.0 {
            s.iter_mut().for_each(|v| *v *= gain / r);
        }
    }

    let mix: Vec<f64> = (0..len).map(|t| raw.iter().map(|s| s[t]).sum()).collect();
    let peak = raw
        .iter()
        .chain(std::iter::once(&mix))
        .flat_map(|s| s.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { TARGET_PEAK / peak } else { 1.0 };

    // Sources are rounded to f32 so float WAV files store them exactly.
    let sources = raw
        .into_iter()
        .map(|s| WaveBuffer::new(s.into_iter().map(|v| (v * scale) as f32 as f64).collect(), cfg.sample_rate))
        .collect::<Result<Vec<_>, _>>()?;
    SynthTrack::from_sources(track_id(seed), seed, sources)
}

/// Tracks for seeds `base_seed .. base_seed + n_tracks`.
pub fn gen_corpus(n_tracks: usize, base_seed: u64, cfg: &SynthConfig) -> Result<Vec<SynthTrack>, DatagenError> {
    if n_tracks == 0 {
        return Err(DatagenError::Invalid("corpus needs at least one track".into()));
    }
    (0..n_tracks as u64).map(|i| gen_track_with(base_seed + i, cfg)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestTrack {
    pub id: String,
    pub seed: u64,
    pub duration_secs: f64,
    /// Paths relative to the manifest directory.
    pub mixture: String,
    pub sources: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSplit {
    pub base_seed: u64,
    pub tracks: Vec<ManifestTrack>,
}

/// `manifest.json` describing a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub sample_rate: u32,
    pub n_sources: usize,
    pub train: ManifestSplit,
    pub eval: ManifestSplit,
}

pub const MANIFEST_FORMAT: &str = "amicable-corpus";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatagenError + '_ {
    move |source| DatagenError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_split(root: &Path, split: Split, base_seed: u64, tracks: &[SynthTrack]) -> Result<ManifestSplit, DatagenError> {
    let dir = root.join(split.dir());
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut entries = Vec::with_capacity(tracks.len());
    for t in tracks {
        let mix_rel = format!("{}/{}_mixture.wav", split.dir(), t.id);
        dsp::wav_write(root.join(&mix_rel), &t.mixture, BitDepth::Float32)?;
        let mut sources = Vec::new();
        for (i, s) in t.sources.iter().enumerate() {
            let rel = format!("{}/{}_source{}.wav", split.dir(), t.id, i);
            dsp::wav_write(root.join(&rel), s, BitDepth::Float32)?;
            sources.push(rel);
        }
        entries.push(ManifestTrack {
            id: t.id.clone(),
            seed: t.seed,
            duration_secs: t.duration_secs(),
            mixture: mix_rel,
            sources,
        });
    }
    Ok(ManifestSplit {
        base_seed,
        tracks: entries,
    })
}

/// Writes both splits as float-32 WAV files plus `manifest.json` under `root`.
pub fn write_corpus(
    root: &Path,
    train: (u64, &[SynthTrack]),
    eval: (u64, &[SynthTrack]),
) -> Result<Manifest, DatagenError> {
    let first = train
        .1
        .first()
        .or(eval.1.first())
        .ok_or_else(|| DatagenError::Invalid("empty corpus".into()))?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: 1,
        sample_rate: first.sample_rate(),
        n_sources: first.sources.len(),
        train: write_split(root, Split::Train, train.0, train.1)?,
        eval: write_split(root, Split::Eval, eval.0, eval.1)?,
    };
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, DatagenError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| DatagenError::Manifest {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    if m.format != MANIFEST_FORMAT {
        return Err(DatagenError::Manifest {
            path: path.to_path_buf(),
            detail: format!("unexpected format tag {:?}", m.format),
        });
    }
    Ok(m)
}

/// Loads one split of a corpus. The mixture is rebuilt from the source files
/// and checked against the stored mixture.
pub fn load_split(manifest_path: &Path, split: Split) -> Result<Vec<SynthTrack>, DatagenError> {
    let manifest = read_manifest(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let entries = match split {
        Split::Train => &manifest.train.tracks,
        Split::Eval => &manifest.eval.tracks,
    };
    entries
        .iter()
        .map(|e| {
            let sources = e
                .sources
                .iter()
                .map(|p| dsp::wav_read(root.join(p)))
                .collect::<Result<Vec<_>, _>>()?;
            let track = SynthTrack::from_sources(e.id.clone(), e.seed, sources)?;
            let stored = dsp::wav_read(root.join(&e.mixture))?;
            let drift = stored
                .samples()
                .iter()
                .zip(track.mixture.samples())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            if stored.len() != track.mixture.len() || drift > 1e-6 {
                return Err(DatagenError::Manifest {
                    path: root.join(&e.mixture),
                    detail: "mixture does not match the sum of its sources".into(),
                });
            }
            Ok(track)
        })
        .collect()
}
