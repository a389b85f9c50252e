//! Signal-to-distortion ratios and median aggregation.
//!
//! `sdr` is the plain energy ratio `10 log10(sum ref^2 / sum (ref - est)^2)`
//! over the whole clip. It is *not* the BSS-eval / museval SDR: there is no
//! framewise windowing and no distortion filter, so absolute values are not
//! comparable with published museval numbers. Only differences and orderings
//! between runs on the same clips are meaningful. Values are capped to
//! `[-120, 120]` dB.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::WaveBuffer;

pub const SDR_CAP_DB: f64 = 120.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("reference signal is all zeros")]
    SilentReference,
    #[error("length mismatch: reference {reference}, estimate {estimate}")]
    LengthMismatch { reference: usize, estimate: usize },
    #[error("cannot aggregate an empty score list")]
    Empty,
    #[error("track {track} has {got} sources, expected {expected}")]
    SourceCount { track: String, got: usize, expected: usize },
}

pub fn sdr_samples(reference: &[f64], estimate: &[f64]) -> Result<f64, MetricsError> {
    if reference.len() != estimate.len() {
        return Err(MetricsError::LengthMismatch {
            reference: reference.len(),
            estimate: estimate.len(),
        });
    }
    let signal: f64 = reference.iter().map(|v| v * v).sum();
    if signal == 0.0 {
        return Err(MetricsError::SilentReference);
    }
    let error: f64 = reference.iter().zip(estimate).map(|(r, e)| (r - e) * (r - e)).sum();
    if error == 0.0 {
        return Ok(SDR_CAP_DB);
    }
    Ok((10.0 * (signal / error).log10()).clamp(-SDR_CAP_DB, SDR_CAP_DB))
}

pub fn sdr(reference: &WaveBuffer, estimate: &WaveBuffer) -> Result<f64, MetricsError> {
    sdr_samples(reference.samples(), estimate.samples())
}

/// Degradation of input: SDR of the perturbed mixture against the clean one.
pub fn di_sdr(x: &WaveBuffer, nu: &WaveBuffer) -> Result<f64, MetricsError> {
    di_sdr_samples(x.samples(), nu.samples())
}

pub fn di_sdr_samples(x: &[f64], nu: &[f64]) -> Result<f64, MetricsError> {
    if x.len() != nu.len() {
        return Err(MetricsError::LengthMismatch {
            reference: x.len(),
            estimate: nu.len(),
        });
    }
    let perturbed: Vec<f64> = x.iter().zip(nu).map(|(a, b)| a + b).collect();
    sdr_samples(x, &perturbed)
}

/// Median with the midpoint convention for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackScores {
    pub track_id: String,
    /// Per-source SDR in dB, index-aligned with the sources.
    pub sdr: Vec<f64>,
    pub di_sdr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub tracks: usize,
    pub median_per_source: Vec<f64>,
    /// Mean of the per-source medians.
    pub avg: f64,
    pub median_di_sdr: Option<f64>,
}

/// Median over tracks for every source, plus the mean of those medians.
pub fn aggregate(scores: &[TrackScores]) -> Result<Aggregate, MetricsError> {
    let first = scores.first().ok_or(MetricsError::Empty)?;
    let n_sources = first.sdr.len();
    for s in scores {
        if s.sdr.len() != n_sources {
            return Err(MetricsError::SourceCount {
                track: s.track_id.clone(),
                got: s.sdr.len(),
                expected: n_sources,
            });
        }
    }
    let median_per_source: Vec<f64> = (0..n_sources)
        .map(|i| median(&scores.iter().map(|s| s.sdr[i]).collect::<Vec<_>>()).unwrap_or(0.0))
        .collect();
    let avg = mean(&median_per_source).unwrap_or(0.0);
    let di: Vec<f64> = scores.iter().filter_map(|s| s.di_sdr).collect();
    Ok(Aggregate {
        tracks: scores.len(),
        median_per_source,
        avg,
        median_di_sdr: median(&di),
    })
}
