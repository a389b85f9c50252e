//! Command-line driver for every experiment.
//!
//! Each subcommand reads a resolved [`RunConfig`] (TOML file given with
//! `--config`, then flag overrides), writes its outputs into a staging
//! directory next to `--out` and renames it into place when done. Reports
//! are described in [`crate::report`].
//!
//! Exit codes: 0 on success, 1 on any other error, 2 for a missing input
//! path (and for command-line usage errors), 3 when the perturbation loss
//! becomes non-finite.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{self, DatagenError, Split, SynthConfig, SynthTrack};
use crate::dsp::{self, DspError, StftGeometry, WaveBuffer, WindowKind};
use crate::metrics;
use crate::perturb::{self, AdamConfig, PerturbConfig, PerturbError, PerturbJob, PerturbSidecar, StprFloor};
use crate::report::{self, EvalReport, ReportError, ReportRow, Stanza};
use crate::robustness::{self, CompressionProxy, RobustnessError};
use crate::separator::{self, Arch, SeparatorError, SeparatorModel, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_MISSING: i32 = 2;
pub const EXIT_NON_FINITE: i32 = 3;

/// Environment variable holding the log filter, e.g. `AMICABLE_LOG=debug`.
pub const LOG_ENV: &str = "AMICABLE_LOG";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing input: {}", path.display())]
    Missing { path: PathBuf },
    #[error("non-finite loss on {track} at iteration {iteration}")]
    NonFinite { track: String, iteration: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("output directory {} already exists (pass --force to replace it)", .0.display())]
    OutExists(PathBuf),
    #[error("{path}: {detail}")]
    Io { path: PathBuf, detail: String },
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Separator(#[from] SeparatorError),
    #[error(transparent)]
    Perturb(PerturbError),
    #[error(transparent)]
    Robustness(#[from] RobustnessError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Missing { .. } => EXIT_MISSING,
            CliError::NonFinite { .. } => EXIT_NON_FINITE,
            _ => EXIT_FAILURE,
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            detail: e.to_string(),
        }
    }

    fn perturb(track: &str, e: PerturbError) -> Self {
        match e {
            PerturbError::NonFinite { iteration } => CliError::NonFinite {
                track: track.to_string(),
                iteration,
            },
            other => CliError::Perturb(other),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSection {
    pub train_tracks: usize,
    pub eval_tracks: usize,
    pub train_duration_secs: f64,
    pub eval_duration_secs: f64,
    pub sample_rate: u32,
    pub n_sources: usize,
    pub train_base_seed: u64,
    pub eval_base_seed: u64,
}

impl Default for GenSection {
    fn default() -> Self {
        Self {
            train_tracks: 8,
            eval_tracks: 10,
            train_duration_secs: datagen::TRAIN_DURATION_SECS,
            eval_duration_secs: datagen::EVAL_DURATION_SECS,
            sample_rate: datagen::DEFAULT_SAMPLE_RATE,
            n_sources: 2,
            train_base_seed: datagen::TRAIN_BASE_SEED,
            eval_base_seed: datagen::EVAL_BASE_SEED,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub arch: Arch,
    pub window_size: usize,
    /// Defaults to half the window.
    pub hop: Option<usize>,
    pub window: WindowKind,
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            arch: Arch::MaskMlp,
            window_size: 512,
            hop: None,
            window: WindowKind::Hann,
            hidden: separator::DEFAULT_HIDDEN,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbSection {
    pub lambda: f64,
    pub alphas: Vec<f64>,
    pub iterations: usize,
    pub patch_len: usize,
    pub epsilon: f64,
    pub adam: AdamConfig,
    pub floor: StprFloor,
}

impl Default for PerturbSection {
    fn default() -> Self {
        let p = PerturbConfig::default();
        Self {
            lambda: p.lambda,
            alphas: p.alphas,
            iterations: p.iterations,
            patch_len: p.patch_len,
            epsilon: p.epsilon,
            adam: p.adam,
            floor: p.floor,
        }
    }
}

/// Resolved configuration of one run. Every field has a default, so an
/// empty TOML file is valid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Corpus directory or its `manifest.json`.
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub jobs: usize,
    /// Use only the first `n` eval tracks (by id).
    pub tracks: Option<usize>,
    pub models: Vec<PathBuf>,
    /// Output directory of an earlier `perturb` run whose perturbations
    /// should be reused.
    pub perturbations: Option<PathBuf>,
    pub gen: GenSection,
    pub train: TrainSection,
    pub perturb: PerturbSection,
    pub lambda_grid: Vec<f64>,
    pub proxies: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            out: None,
            seed: 0,
            jobs: 1,
            tracks: None,
            models: Vec::new(),
            perturbations: None,
            gen: GenSection::default(),
            train: TrainSection::default(),
            perturb: PerturbSection::default(),
            lambda_grid: perturb::DEFAULT_LAMBDA_GRID.to_vec(),
            proxies: ["quantize:16", "quantize:12", "quantize:8", "quantize:4", "mdct:0.5", "mdct:0.25"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    fn load(path: &Path) -> Result<Self> {
        require(path)?;
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Canonical JSON of the configuration; its hash goes in the stanza.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    fn perturb_config(&self, seed: u64) -> PerturbConfig {
        let p = &self.perturb;
        PerturbConfig {
            alphas: p.alphas.clone(),
            lambda: p.lambda,
            epsilon: p.epsilon,
            iterations: p.iterations,
            patch_len: p.patch_len,
            seed,
            adam: p.adam,
            floor: p.floor,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "amicable", version, about = "Amicable perturbations for informed source separation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for per-track work.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Replace the output directory if it exists.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct CorpusArgs {
    /// Corpus directory (or its manifest.json).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Use only the first N eval tracks.
    #[arg(long)]
    pub tracks: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// Model checkpoint; repeat for several models.
    #[arg(long = "model")]
    pub models: Vec<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct PerturbArgs {
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Comma-separated model weights, e.g. `1,-1`.
    #[arg(long, allow_hyphen_values = true)]
    pub alphas: Option<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub patch_len: Option<usize>,
    /// Bound of the uniform initial noise.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub adam_lr: Option<f64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic train and eval corpus.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train_tracks: Option<usize>,
        #[arg(long)]
        eval_tracks: Option<usize>,
    },
    /// Train a separator on the train split.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        arch: Option<Arch>,
        #[arg(long)]
        window_size: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Optimize one perturbation per eval track.
    Perturb {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        perturb: PerturbArgs,
    },
    /// Score models on the eval split, optionally with stored perturbations.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        perturbations: Option<PathBuf>,
    },
    /// Perturb every eval track once per lambda value.
    SweepLambda {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        perturb: PerturbArgs,
        /// Comma-separated lambda values.
        #[arg(long)]
        lambda_grid: Option<String>,
    },
    /// Perturb for the first model and score every model.
    Selectivity {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        perturb: PerturbArgs,
        #[arg(long)]
        perturbations: Option<PathBuf>,
    },
    /// Multi-model perturbation with signed weights.
    Mmpl {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        perturb: PerturbArgs,
    },
    /// Score perturbations after lossy compression proxies.
    Robustness {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        perturb: PerturbArgs,
        /// Proxy such as `quantize:12` or `mdct:0.5`; repeatable.
        #[arg(long = "proxy")]
        proxies: Vec<String>,
        #[arg(long)]
        perturbations: Option<PathBuf>,
    },
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("bad {what} value {v:?}")))
        })
        .collect()
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing {
            path: path.to_path_buf(),
        })
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen { .. } => "gen",
            Command::Train { .. } => "train",
            Command::Perturb { .. } => "perturb",
            Command::Eval { .. } => "eval",
            Command::SweepLambda { .. } => "sweep-lambda",
            Command::Selectivity { .. } => "selectivity",
            Command::Mmpl { .. } => "mmpl",
            Command::Robustness { .. } => "robustness",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Gen { common, .. }
            | Command::Train { common, .. }
            | Command::Perturb { common, .. }
            | Command::Eval { common, .. }
            | Command::SweepLambda { common, .. }
            | Command::Selectivity { common, .. }
            | Command::Mmpl { common, .. }
            | Command::Robustness { common, .. } => common,
        }
    }

    /// Loads `--config` and applies every flag on top of it.
    pub fn resolve(&self) -> Result<RunConfig> {
        let common = self.common();
        let mut cfg = match &common.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &common.out {
            cfg.out = Some(v.clone());
        }
        if let Some(v) = common.seed {
            cfg.seed = v;
        }
        if let Some(v) = common.jobs {
            cfg.jobs = v;
        }
        let apply_corpus = |cfg: &mut RunConfig, c: &CorpusArgs| {
            if let Some(v) = &c.corpus {
                cfg.corpus = Some(v.clone());
            }
            if let Some(v) = c.tracks {
                cfg.tracks = Some(v);
            }
        };
        let apply_models = |cfg: &mut RunConfig, m: &ModelArgs| {
            if !m.models.is_empty() {
                cfg.models = m.models.clone();
            }
        };
        let apply_perturb = |cfg: &mut RunConfig, p: &PerturbArgs| -> Result<()> {
            if let Some(v) = p.lambda {
                cfg.perturb.lambda = v;
            }
            if let Some(v) = &p.alphas {
                cfg.perturb.alphas = parse_list(v, "alpha")?;
            }
            if let Some(v) = p.iterations {
                cfg.perturb.iterations = v;
            }
            if let Some(v) = p.patch_len {
                cfg.perturb.patch_len = v;
            }
            if let Some(v) = p.epsilon {
                cfg.perturb.epsilon = v;
            }
            if let Some(v) = p.adam_lr {
                cfg.perturb.adam.lr = v;
            }
            Ok(())
        };
        match self {
            Command::Gen {
                train_tracks,
                eval_tracks,
                ..
            } => {
                if let Some(v) = train_tracks {
                    cfg.gen.train_tracks = *v;
                }
                if let Some(v) = eval_tracks {
                    cfg.gen.eval_tracks = *v;
                }
            }
            Command::Train {
                corpus,
                arch,
                window_size,
                hidden,
                epochs,
                learning_rate,
                ..
            } => {
                apply_corpus(&mut cfg, corpus);
                if let Some(v) = arch {
                    cfg.train.arch = *v;
                }
                if let Some(v) = window_size {
                    cfg.train.window_size = *v;
                }
                if let Some(v) = hidden {
                    cfg.train.hidden = *v;
                }
                if let Some(v) = epochs {
                    cfg.train.epochs = *v;
                }
                if let Some(v) = learning_rate {
                    cfg.train.learning_rate = *v;
                }
            }
            Command::Perturb {
                corpus, models, perturb, ..
            }
            | Command::Mmpl {
                corpus, models, perturb, ..
            } => {
                apply_corpus(&mut cfg, corpus);
                apply_models(&mut cfg, models);
                apply_perturb(&mut cfg, perturb)?;
            }
            Command::Eval {
                corpus,
                models,
                perturbations,
                ..
            } => {
                apply_corpus(&mut cfg, corpus);
                apply_models(&mut cfg, models);
                if let Some(v) = perturbations {
                    cfg.perturbations = Some(v.clone());
                }
            }
            Command::SweepLambda {
                corpus,
                models,
                perturb,
                lambda_grid,
                ..
            } => {
                apply_corpus(&mut cfg, corpus);
                apply_models(&mut cfg, models);
                apply_perturb(&mut cfg, perturb)?;
                if let Some(v) = lambda_grid {
                    cfg.lambda_grid = parse_list(v, "lambda")?;
                }
            }
            Command::Selectivity {
                corpus,
                models,
                perturb,
                perturbations,
                ..
            } => {
                apply_corpus(&mut cfg, corpus);
                apply_models(&mut cfg, models);
                apply_perturb(&mut cfg, perturb)?;
                if let Some(v) = perturbations {
                    cfg.perturbations = Some(v.clone());
                }
            }
            Command::Robustness {
                corpus,
                models,
                perturb,
                proxies,
                perturbations,
                ..
            } => {
                apply_corpus(&mut cfg, corpus);
                apply_models(&mut cfg, models);
                apply_perturb(&mut cfg, perturb)?;
                if !proxies.is_empty() {
                    cfg.proxies = proxies.clone();
                }
                if let Some(v) = perturbations {
                    cfg.perturbations = Some(v.clone());
                }
            }
        }
        Ok(cfg)
    }
}

/// Staging directory renamed onto the final output path on success.
struct Output {
    staging: PathBuf,
    target: PathBuf,
}

impl Output {
    fn create(target: &Path, force: bool) -> Result<Self> {
        if target.exists() && !force {
            let empty = target.is_dir()
                && fs::read_dir(target)
                    .map_err(|e| CliError::io(target, e))?
                    .next()
                    .is_none();
            if !empty {
                return Err(CliError::OutExists(target.to_path_buf()));
            }
        }
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| CliError::io(&parent, e))?;
        let name = target
            .file_name()
            .ok_or_else(|| CliError::Config(format!("bad output path {}", target.display())))?
            .to_string_lossy();
        let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| CliError::io(&staging, e))?;
        }
        fs::create_dir_all(&staging).map_err(|e| CliError::io(&staging, e))?;
        Ok(Self {
            staging,
            target: target.to_path_buf(),
        })
    }

    fn path(&self) -> &Path {
        &self.staging
    }

    fn subdir(&self, name: &str) -> Result<PathBuf> {
        let dir = self.staging.join(name);
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(dir)
    }

    fn commit(self) -> Result<PathBuf> {
        if self.target.exists() {
            let remove = if self.target.is_dir() {
                fs::remove_dir_all(&self.target)
            } else {
                fs::remove_file(&self.target)
            };
            remove.map_err(|e| CliError::io(&self.target, e))?;
        }
        fs::rename(&self.staging, &self.target).map_err(|e| CliError::io(&self.target, e))?;
        Ok(self.target.clone())
    }
}

impl Drop for Output {
    fn drop(&mut self) {
        if self.staging.exists() {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

fn manifest_path(cfg: &RunConfig) -> Result<PathBuf> {
    let corpus = cfg
        .corpus
        .as_ref()
        .ok_or_else(|| CliError::Config("--corpus is required".into()))?;
    let path = if corpus.is_dir() || corpus.extension().is_none() {
        corpus.join(datagen::MANIFEST_FILE)
    } else {
        corpus.clone()
    };
    require(&path)?;
    Ok(path)
}

fn load_eval(cfg: &RunConfig) -> Result<Vec<SynthTrack>> {
    let mut tracks = datagen::load_split(&manifest_path(cfg)?, Split::Eval)?;
    tracks.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(n) = cfg.tracks {
        tracks.truncate(n);
    }
    if tracks.is_empty() {
        return Err(CliError::Config("no eval tracks selected".into()));
    }
    Ok(tracks)
}

struct LoadedModel {
    label: String,
    sha256: String,
    model: Arc<SeparatorModel>,
}

fn load_models(cfg: &RunConfig, stanza: &mut Stanza) -> Result<Vec<LoadedModel>> {
    if cfg.models.is_empty() {
        return Err(CliError::Config("at least one --model is required".into()));
    }
    for path in &cfg.models {
        require(path)?;
    }
    cfg.models
        .iter()
        .enumerate()
        .map(|(i, path)| {
            let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
            let sha256 = report::sha256_hex(&bytes);
            let model = SeparatorModel::load(path)?;
            stanza.models.insert(path.display().to_string(), sha256.clone());
            Ok(LoadedModel {
                label: format!("m{i}:{}", model.arch),
                sha256,
                model: Arc::new(model),
            })
        })
        .collect()
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

/// Seed of the perturbation noise for one track.
pub fn track_seed(run_seed: u64, track_seed: u64) -> u64 {
    run_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(track_seed)
}

fn sdr_all(model: &SeparatorModel, input: &WaveBuffer, sources: &[WaveBuffer]) -> Result<Vec<f64>> {
    let est = model.forward(input)?;
    est.iter()
        .zip(sources)
        .map(|(e, r)| metrics::sdr(r, e).map_err(Into::into))
        .collect()
}

fn rows_for(
    setting: &str,
    model: &LoadedModel,
    proxy: &str,
    track: &SynthTrack,
    clean: &[f64],
    perturbed: Option<&[f64]>,
    di_sdr: Option<f64>,
) -> Vec<ReportRow> {
    clean
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let p = perturbed.map(|p| p[i]);
            ReportRow {
                setting: setting.to_string(),
                model: model.label.clone(),
                proxy: proxy.to_string(),
                track_id: track.id.clone(),
                source: i,
                sdr_clean: c,
                sdr_perturbed: p,
                delta_sdr: p.map(|p| p - c),
                di_sdr,
            }
        })
        .collect()
}

/// Perturbation of one track, rounded to storage precision.
struct TrackPerturbation {
    track: usize,
    result: perturb::PerturbResult,
    sidecar: PerturbSidecar,
}

fn optimize_tracks(
    cfg: &RunConfig,
    models: &[&LoadedModel],
    alphas: &[f64],
    lambda: f64,
    tracks: &[SynthTrack],
) -> Result<Vec<TrackPerturbation>> {
    let pool = pool(cfg.jobs)?;
    pool.install(|| {
        tracks
            .par_iter()
            .enumerate()
            .map(|(i, t)| {
                let mut pc = cfg.perturb_config(track_seed(cfg.seed, t.seed));
                pc.alphas = alphas.to_vec();
                pc.lambda = lambda;
                let job = PerturbJob::new(models.iter().map(|m| m.model.clone()).collect(), pc.clone());
                log::info!("optimizing {} (lambda {lambda:e})", t.id);
                let mut result = perturb::optimize(&job, &t.mixture, &t.sources).map_err(|e| CliError::perturb(&t.id, e))?;
                result.round_to_f32(&t.mixture, &pc).map_err(|e| CliError::perturb(&t.id, e))?;
                if !result.converged {
                    log::warn!("{}: final loss above initial loss", t.id);
                }
                let mut sidecar = result.sidecar(&t.id, &pc);
                sidecar.model_sha256 = models.iter().map(|m| m.sha256.clone()).collect();
                Ok(TrackPerturbation {
                    track: i,
                    result,
                    sidecar,
                })
            })
            .collect()
    })
}

fn save_perturbations(dir: &Path, perts: &[TrackPerturbation], tracks: &[SynthTrack]) -> Result<()> {
    for p in perts {
        p.result
            .save(dir, &tracks[p.track].id, &p.sidecar)
            .map_err(|e| CliError::perturb(&tracks[p.track].id, e))?;
    }
    Ok(())
}

/// Reads `nu/<track>.wav` from an earlier perturb run.
fn load_perturbations(dir: &Path, tracks: &[SynthTrack], expect_model: Option<&str>) -> Result<Vec<WaveBuffer>> {
    let nu_dir = dir.join("nu");
    require(&nu_dir)?;
    tracks
        .iter()
        .map(|t| {
            let wav = nu_dir.join(format!("{}.wav", t.id));
            require(&wav)?;
            let nu = dsp::wav_read(&wav)?;
            if nu.len() != t.mixture.len() {
                return Err(CliError::Config(format!(
                    "{}: {} samples, mixture has {}",
                    wav.display(),
                    nu.len(),
                    t.mixture.len()
                )));
            }
            if let Some(sha) = expect_model {
                let side = nu_dir.join(format!("{}.json", t.id));
                if let Ok(text) = fs::read_to_string(&side) {
                    let sidecar: PerturbSidecar =
                        serde_json::from_str(&text).map_err(|e| CliError::io(&side, e))?;
                    if !sidecar.model_sha256.is_empty() && sidecar.model_sha256.first().map(String::as_str) != Some(sha) {
                        log::warn!("{}: perturbation was optimized for a different model", t.id);
                    }
                }
            }
            Ok(nu)
        })
        .collect()
}

/// Scores every model on clean and perturbed mixtures.
fn score_perturbations(
    cfg: &RunConfig,
    setting: &str,
    models: &[LoadedModel],
    tracks: &[SynthTrack],
    nus: &[&WaveBuffer],
) -> Result<Vec<ReportRow>> {
    let pool = pool(cfg.jobs)?;
    let per_track: Vec<Vec<ReportRow>> = pool.install(|| {
        tracks
            .par_iter()
            .zip(nus.par_iter())
            .map(|(t, nu)| {
                let di = metrics::di_sdr(&t.mixture, nu)?;
                let perturbed = t.mixture.add(nu)?;
                let mut rows = Vec::new();
                for m in models {
                    let clean = sdr_all(&m.model, &t.mixture, &t.sources)?;
                    let pert = sdr_all(&m.model, &perturbed, &t.sources)?;
                    rows.push((m, clean, pert));
                }
                Ok(rows
                    .into_iter()
                    .flat_map(|(m, c, p)| rows_for(setting, m, "none", t, &c, Some(&p), Some(di)))
                    .collect())
            })
            .collect::<Result<_>>()
    })?;
    Ok(order_rows(per_track.into_iter().flatten().collect(), models))
}

/// Sorts rows by model, then track id, then source, keeping setting and
/// proxy in their original order.
fn order_rows(mut rows: Vec<ReportRow>, models: &[LoadedModel]) -> Vec<ReportRow> {
    let model_rank = |label: &str| models.iter().position(|m| m.label == label).unwrap_or(usize::MAX);
    let mut settings: Vec<String> = Vec::new();
    let mut proxies: Vec<String> = Vec::new();
    for r in &rows {
        if !settings.contains(&r.setting) {
            settings.push(r.setting.clone());
        }
        if !proxies.contains(&r.proxy) {
            proxies.push(r.proxy.clone());
        }
    }
    let rank = |v: &[String], s: &str| v.iter().position(|x| x == s).unwrap_or(usize::MAX);
    rows.sort_by(|a, b| {
        rank(&settings, &a.setting)
            .cmp(&rank(&settings, &b.setting))
            .then(model_rank(&a.model).cmp(&model_rank(&b.model)))
            .then(rank(&proxies, &a.proxy).cmp(&rank(&proxies, &b.proxy)))
            .then(a.track_id.cmp(&b.track_id))
            .then(a.source.cmp(&b.source))
    });
    rows
}

fn stanza_for(name: &str, cfg: &RunConfig) -> Stanza {
    let mut stanza = Stanza::new(name, &cfg.canonical_json());
    stanza.seeds.insert("seed".into(), cfg.seed);
    stanza
}

fn write_report(out: &Output, stanza: Stanza, rows: Vec<ReportRow>, extra: serde_json::Value) -> Result<EvalReport> {
    let report = EvalReport::new(stanza, rows, extra)?;
    report.write(out.path())?;
    Ok(report)
}

fn write_config(out: &Output, cfg: &RunConfig) -> Result<()> {
    let path = out.path().join("config.toml");
    let text = toml::to_string(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

fn cmd_gen(cfg: &RunConfig, out: &Output) -> Result<()> {
    let g = &cfg.gen;
    let synth = |duration_secs| SynthConfig {
        duration_secs,
        sample_rate: g.sample_rate,
        n_sources: g.n_sources,
    };
    let pool = pool(cfg.jobs)?;
    let make = |n: usize, base: u64, sc: SynthConfig| -> Result<Vec<SynthTrack>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        pool.install(|| {
            (0..n as u64)
                .into_par_iter()
                .map(|i| datagen::gen_track_with(base + i, &sc).map_err(Into::into))
                .collect()
        })
    };
    let train = make(g.train_tracks, g.train_base_seed, synth(g.train_duration_secs))?;
    let eval = make(g.eval_tracks, g.eval_base_seed, synth(g.eval_duration_secs))?;
    // Disjoint seed ranges keep the splits independent.
    let train_range = g.train_base_seed..g.train_base_seed + g.train_tracks as u64;
    let eval_range = g.eval_base_seed..g.eval_base_seed + g.eval_tracks as u64;
    if !train.is_empty() && !eval.is_empty() && train_range.start < eval_range.end && eval_range.start < train_range.end {
        return Err(CliError::Config("train and eval seed ranges overlap".into()));
    }
    datagen::write_corpus(out.path(), (g.train_base_seed, &train), (g.eval_base_seed, &eval))?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["split", "track_id", "seed", "duration_secs", "mixture_rms", "mixture_peak"])
        .expect("in-memory writer");
    for (split, tracks) in [("train", &train), ("eval", &eval)] {
        for t in tracks.iter() {
            w.write_record([
                split.to_string(),
                t.id.clone(),
                t.seed.to_string(),
                t.duration_secs().to_string(),
                t.mixture.rms().to_string(),
                t.mixture.peak().to_string(),
            ])
            .expect("in-memory writer");
        }
    }
    let path = out.path().join("tracks.csv");
    fs::write(&path, w.into_inner().expect("in-memory writer")).map_err(|e| CliError::io(&path, e))?;

    let mut stanza = stanza_for("gen", cfg);
    stanza.seeds.insert("train_base_seed".into(), g.train_base_seed);
    stanza.seeds.insert("eval_base_seed".into(), g.eval_base_seed);
    write_report(
        out,
        stanza,
        Vec::new(),
        serde_json::json!({
            "train_tracks": train.iter().map(|t| &t.id).collect::<Vec<_>>(),
            "eval_tracks": eval.iter().map(|t| &t.id).collect::<Vec<_>>(),
        }),
    )?;
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: &Output) -> Result<()> {
    let manifest = manifest_path(cfg)?;
    let mut train_set = datagen::load_split(&manifest, Split::Train)?;
    train_set.sort_by(|a, b| a.id.cmp(&b.id));
    let n_sources = train_set
        .first()
        .map(|t| t.sources.len())
        .ok_or_else(|| CliError::Config("corpus has no train tracks".into()))?;
    let t = &cfg.train;
    let geometry = StftGeometry::new(t.window_size, t.hop.unwrap_or(t.window_size / 2), t.window)?;
    let init = SeparatorModel::with_hidden(t.arch, geometry, n_sources, t.hidden, cfg.seed)?;
    let train_cfg = TrainConfig {
        epochs: t.epochs,
        learning_rate: t.learning_rate,
        batch_size: t.batch_size,
        seed: cfg.seed,
    };
    log::info!("training {} with {} parameters on {} tracks", t.arch, init.param_count(), train_set.len());
    let outcome = separator::train(&init, &train_set, &train_cfg)?;
    outcome.model.save(out.path().join("model.json"))?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "loss"]).expect("in-memory writer");
    for (e, l) in outcome.loss_curve.iter().enumerate() {
        w.write_record([e.to_string(), l.to_string()]).expect("in-memory writer");
    }
    let path = out.path().join("loss_curve.csv");
    fs::write(&path, w.into_inner().expect("in-memory writer")).map_err(|e| CliError::io(&path, e))?;

    // Score the trained model on the eval split as a sanity check.
    let mut eval = datagen::load_split(&manifest, Split::Eval)?;
    eval.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(n) = cfg.tracks {
        eval.truncate(n);
    }
    let bytes = fs::read(out.path().join("model.json")).map_err(|e| CliError::io(out.path(), e))?;
    let trained = LoadedModel {
        label: format!("m0:{}", t.arch),
        sha256: report::sha256_hex(&bytes),
        model: Arc::new(outcome.model),
    };
    let pool = pool(cfg.jobs)?;
    let per_track: Vec<Vec<ReportRow>> = pool.install(|| {
        eval.par_iter()
            .map(|tr| Ok(rows_for("", &trained, "none", tr, &sdr_all(&trained.model, &tr.mixture, &tr.sources)?, None, None)))
            .collect::<Result<_>>()
    })?;
    let mut stanza = stanza_for("train", cfg);
    stanza.seeds.insert("init".into(), cfg.seed);
    stanza.seeds.insert("shuffle".into(), cfg.seed);
    stanza.models.insert("model.json".into(), trained.sha256.clone());
    write_report(
        out,
        stanza,
        per_track.into_iter().flatten().collect(),
        serde_json::json!({
            "param_count": trained.model.param_count(),
            "loss_curve": outcome.loss_curve,
        }),
    )?;
    Ok(())
}

fn check_alphas(cfg: &RunConfig, n_models: usize) -> Result<Vec<f64>> {
    let a = &cfg.perturb.alphas;
    if a.len() == n_models {
        Ok(a.clone())
    } else if a == &[1.0] {
        Ok(vec![1.0; n_models])
    } else {
        Err(CliError::Config(format!("{} models but {} alphas", n_models, a.len())))
    }
}

fn seed_stanza(stanza: &mut Stanza, cfg: &RunConfig, tracks: &[SynthTrack]) {
    for t in tracks {
        stanza.seeds.insert(format!("nu:{}", t.id), track_seed(cfg.seed, t.seed));
    }
}

fn perturb_extra(perts: &[TrackPerturbation], tracks: &[SynthTrack]) -> serde_json::Value {
    serde_json::json!(perts
        .iter()
        .map(|p| serde_json::json!({
            "track_id": tracks[p.track].id,
            "final_loss": p.result.final_loss,
            "initial_loss": p.result.loss_trace[0],
            "stpr": p.result.stpr,
            "di_sdr": p.result.di_sdr,
            "converged": p.result.converged,
        }))
        .collect::<Vec<_>>())
}

fn cmd_perturb(cfg: &RunConfig, out: &Output, name: &str) -> Result<()> {
    let tracks = load_eval(cfg)?;
    let mut stanza = stanza_for(name, cfg);
    let models = load_models(cfg, &mut stanza)?;
    let alphas = check_alphas(cfg, models.len())?;
    let refs: Vec<&LoadedModel> = models.iter().collect();
    let perts = optimize_tracks(cfg, &refs, &alphas, cfg.perturb.lambda, &tracks)?;
    save_perturbations(&out.subdir("nu")?, &perts, &tracks)?;
    let nus: Vec<&WaveBuffer> = perts.iter().map(|p| &p.result.nu).collect();
    let rows = score_perturbations(cfg, "", &models, &tracks, &nus)?;
    seed_stanza(&mut stanza, cfg, &tracks);
    let extra = serde_json::json!({
        "alphas": alphas,
        "lambda": cfg.perturb.lambda,
        "tracks": perturb_extra(&perts, &tracks),
    });
    write_report(out, stanza, rows, extra)?;
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, out: &Output) -> Result<()> {
    let tracks = load_eval(cfg)?;
    let mut stanza = stanza_for("eval", cfg);
    let models = load_models(cfg, &mut stanza)?;
    let rows = match &cfg.perturbations {
        Some(dir) => {
            let nus = load_perturbations(dir, &tracks, None)?;
            score_perturbations(cfg, "", &models, &tracks, &nus.iter().collect::<Vec<_>>())?
        }
        None => {
            let pool = pool(cfg.jobs)?;
            let per_track: Vec<Vec<ReportRow>> = pool.install(|| {
                tracks
                    .par_iter()
                    .map(|t| {
                        let mut rows = Vec::new();
                        for m in &models {
                            rows.extend(rows_for("", m, "none", t, &sdr_all(&m.model, &t.mixture, &t.sources)?, None, None));
                        }
                        Ok(rows)
                    })
                    .collect::<Result<_>>()
            })?;
            order_rows(per_track.into_iter().flatten().collect(), &models)
        }
    };
    write_report(out, stanza, rows, serde_json::Value::Null)?;
    Ok(())
}

fn lambda_setting(lambda: f64) -> String {
    format!("lambda={lambda:e}")
}

fn cmd_sweep_lambda(cfg: &RunConfig, out: &Output) -> Result<()> {
    if cfg.lambda_grid.is_empty() {
        return Err(CliError::Config("empty lambda grid".into()));
    }
    let tracks = load_eval(cfg)?;
    let mut stanza = stanza_for("sweep-lambda", cfg);
    let models = load_models(cfg, &mut stanza)?;
    let alphas = check_alphas(cfg, models.len())?;
    let refs: Vec<&LoadedModel> = models.iter().collect();
    let nu_root = out.subdir("nu")?;
    let mut rows = Vec::new();
    let mut points = Vec::new();
    for &lambda in &cfg.lambda_grid {
        let setting = lambda_setting(lambda);
        let perts = optimize_tracks(cfg, &refs, &alphas, lambda, &tracks)?;
        let dir = nu_root.join(&setting);
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        save_perturbations(&dir, &perts, &tracks)?;
        let nus: Vec<&WaveBuffer> = perts.iter().map(|p| &p.result.nu).collect();
        rows.extend(score_perturbations(cfg, &setting, &models, &tracks, &nus)?);
        points.push(serde_json::json!({ "lambda": lambda, "setting": setting }));
    }
    seed_stanza(&mut stanza, cfg, &tracks);
    write_report(out, stanza, rows, serde_json::json!({ "alphas": alphas, "grid": points }))?;
    Ok(())
}

fn cmd_selectivity(cfg: &RunConfig, out: &Output) -> Result<()> {
    let tracks = load_eval(cfg)?;
    let mut stanza = stanza_for("selectivity", cfg);
    let models = load_models(cfg, &mut stanza)?;
    if models.len() < 2 {
        return Err(CliError::Config("selectivity needs a targeted and at least one other model".into()));
    }
    let owned: Vec<WaveBuffer>;
    let nus: Vec<&WaveBuffer> = match &cfg.perturbations {
        Some(dir) => {
            owned = load_perturbations(dir, &tracks, Some(&models[0].sha256))?;
            owned.iter().collect()
        }
        None => {
            let perts = optimize_tracks(cfg, &[&models[0]], &[1.0], cfg.perturb.lambda, &tracks)?;
            save_perturbations(&out.subdir("nu")?, &perts, &tracks)?;
            owned = perts.into_iter().map(|p| p.result.nu).collect();
            owned.iter().collect()
        }
    };
    let rows = score_perturbations(cfg, "", &models, &tracks, &nus)?;
    seed_stanza(&mut stanza, cfg, &tracks);
    let report = EvalReport::new(stanza.clone(), rows.clone(), serde_json::Value::Null)?;
    let delta_of = |label: &str| {
        report
            .group(None, Some(label), None)
            .and_then(|g| g.delta.as_ref())
            .map(|d| d.avg)
    };
    let target = delta_of(&models[0].label);
    let others: Vec<serde_json::Value> = models[1..]
        .iter()
        .map(|m| {
            let d = delta_of(&m.label);
            serde_json::json!({
                "model": m.label,
                "median_delta_sdr": d,
                "targeted_minus_untargeted": target.zip(d).map(|(a, b)| a - b),
            })
        })
        .collect();
    let extra = serde_json::json!({
        "targeted": models[0].label,
        "targeted_median_delta_sdr": target,
        "untargeted": others,
    });
    write_report(out, stanza, rows, extra)?;
    Ok(())
}

fn cmd_robustness(cfg: &RunConfig, out: &Output) -> Result<()> {
    let proxies: Vec<CompressionProxy> = cfg
        .proxies
        .iter()
        .map(|p| p.parse())
        .collect::<std::result::Result<_, RobustnessError>>()?;
    if proxies.is_empty() {
        return Err(RobustnessError::NoProxies.into());
    }
    let tracks = load_eval(cfg)?;
    let mut stanza = stanza_for("robustness", cfg);
    let models = load_models(cfg, &mut stanza)?;
    let target = &models[0];
    let owned: Vec<WaveBuffer> = match &cfg.perturbations {
        Some(dir) => load_perturbations(dir, &tracks, Some(&target.sha256))?,
        None => {
            let perts = optimize_tracks(cfg, &[target], &[1.0], cfg.perturb.lambda, &tracks)?;
            save_perturbations(&out.subdir("nu")?, &perts, &tracks)?;
            perts.into_iter().map(|p| p.result.nu).collect()
        }
    };
    let pool = pool(cfg.jobs)?;
    let per_track: Vec<Vec<ReportRow>> = pool.install(|| {
        tracks
            .par_iter()
            .zip(owned.par_iter())
            .map(|(t, nu)| {
                let di = metrics::di_sdr(&t.mixture, nu)?;
                let perturbed = t.mixture.add(nu)?;
                let mut rows = rows_for(
                    "",
                    target,
                    "none",
                    t,
                    &sdr_all(&target.model, &t.mixture, &t.sources)?,
                    Some(&sdr_all(&target.model, &perturbed, &t.sources)?),
                    Some(di),
                );
                for o in robustness::robustness_sweep(&target.model, &t.mixture, &t.sources, nu, &proxies)? {
                    rows.extend(rows_for(
                        "",
                        target,
                        &o.proxy.to_string(),
                        t,
                        &o.sdr_clean,
                        Some(&o.sdr_perturbed),
                        Some(di),
                    ));
                }
                Ok(rows)
            })
            .collect::<Result<_>>()
    })?;
    let rows = order_rows(per_track.into_iter().flatten().collect(), &models);
    seed_stanza(&mut stanza, cfg, &tracks);
    let extra = serde_json::json!({ "proxies": proxies.iter().map(|p| p.to_string()).collect::<Vec<_>>() });
    write_report(out, stanza, rows, extra)?;
    Ok(())
}

/// Runs a parsed command and returns the output directory.
pub fn execute(cli: &Cli) -> Result<PathBuf> {
    let cmd = &cli.command;
    let cfg = cmd.resolve()?;
    if cfg.jobs == 0 {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    // Validate every input path before creating any output.
    if !matches!(cmd, Command::Gen { .. }) {
        manifest_path(&cfg)?;
    }
    for m in &cfg.models {
        require(m)?;
    }
    if let Some(p) = &cfg.perturbations {
        require(p)?;
    }
    let target = cfg
        .out
        .clone()
        .ok_or_else(|| CliError::Config("--out is required".into()))?;
    let out = Output::create(&target, cmd.common().force)?;
    write_config(&out, &cfg)?;
    match cmd {
        Command::Gen { .. } => cmd_gen(&cfg, &out)?,
        Command::Train { .. } => cmd_train(&cfg, &out)?,
        Command::Perturb { .. } => cmd_perturb(&cfg, &out, "perturb")?,
        Command::Mmpl { .. } => cmd_perturb(&cfg, &out, "mmpl")?,
        Command::Eval { .. } => cmd_eval(&cfg, &out)?,
        Command::SweepLambda { .. } => cmd_sweep_lambda(&cfg, &out)?,
        Command::Selectivity { .. } => cmd_selectivity(&cfg, &out)?,
        Command::Robustness { .. } => cmd_robustness(&cfg, &out)?,
    }
    log::info!("{} finished", cmd.name());
    out.commit()
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors are printed to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Entry point of the `amicable` binary.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn"))
        .format_timestamp(None)
        .init();
    run(std::env::args_os())
}
