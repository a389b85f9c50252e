//! Lossy compression proxies and the robustness sweep.
//!
//! Two stand-ins for a perceptual codec:
//!
//! * `quantize:<bits>` rounds every sample to a uniform mid-tread grid with
//!   step `2^-(bits-1)` over `[-1, 1)`.
//! * `mdct:<fraction>` keeps the largest-magnitude fraction of MDCT
//!   coefficients in each frame (256-sample sine window, hop 128) and zeroes
//!   the rest before the inverse transform.
//!
//! The sweep compresses both the clean and the perturbed mixture and reports
//! how much of the perturbation's SDR gain survives.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{DspError, WaveBuffer};
use crate::metrics::{self, MetricsError};
use crate::separator::{SeparatorError, SeparatorModel};

pub const MDCT_FRAME: usize = 256;

#[derive(Debug, Error)]
pub enum RobustnessError {
    #[error("invalid proxy `{0}`: expected quantize:<4..16> or mdct:<(0,1]>")]
    Parse(String),
    #[error("proxy strength out of range: {0}")]
    Strength(String),
    #[error("no proxies given")]
    NoProxies,
    #[error(transparent)]
    Separator(#[from] SeparatorError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "strength", rename_all = "kebab-case")]
pub enum CompressionProxy {
    QuantizeBits(u32),
    MdctTopK(f64),
}

impl CompressionProxy {
    pub fn validate(&self) -> Result<(), RobustnessError> {
        match *self {
            CompressionProxy::QuantizeBits(b) if !(4..=16).contains(&b) => {
                Err(RobustnessError::Strength(format!("{b} bits")))
            }
            CompressionProxy::MdctTopK(f) if !(f > 0.0 && f <= 1.0) => {
                Err(RobustnessError::Strength(format!("fraction {f}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for CompressionProxy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompressionProxy::QuantizeBits(b) => write!(f, "quantize:{b}"),
            CompressionProxy::MdctTopK(k) => write!(f, "mdct:{k}"),
        }
    }
}

impl FromStr for CompressionProxy {
    type Err = RobustnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || RobustnessError::Parse(s.to_string());
        let (kind, value) = s.split_once(':').ok_or_else(err)?;
        let proxy = match kind.trim() {
            "quantize" => CompressionProxy::QuantizeBits(value.trim().parse().map_err(|_| err())?),
            "mdct" => CompressionProxy::MdctTopK(value.trim().parse().map_err(|_| err())?),
            _ => return Err(err()),
        };
        proxy.validate()?;
        Ok(proxy)
    }
}

/// Mid-tread uniform quantizer over `[-1, 1 - step]`.
pub fn quantize(samples: &[f64], bits: u32) -> Vec<f64> {
    let step = 2f64.powi(1 - bits as i32);
    let top = 1.0 - step;
    samples
        .iter()
        .map(|&v| ((v / step).round() * step).clamp(-1.0, top))
        .collect()
}

/// Frame-wise MDCT with a sine window and 50% overlap.
///
/// The signal is padded with one hop of zeros in front and enough zeros at
/// the end to cover the last sample with two frames, so every output sample
/// is reconstructed by time-domain alias cancellation.
struct Mdct {
    hop: usize,
    window: Vec<f64>,
    /// `cos[k * frame + n]`.
    cos: Vec<f64>,
}

impl Mdct {
    fn new(frame: usize) -> Self {
        let hop = frame / 2;
        let window = (0..frame)
            .map(|n| (std::f64::consts::PI * (n as f64 + 0.5) / frame as f64).sin())
            .collect();
        let mut cos = Vec::with_capacity(hop * frame);
        for k in 0..hop {
            for n in 0..frame {
                let phase = std::f64::consts::PI / hop as f64
                    * (n as f64 + 0.5 + hop as f64 / 2.0)
                    * (k as f64 + 0.5);
                cos.push(phase.cos());
            }
        }
        Self { hop, window, cos }
    }

    fn frame(&self) -> usize {
        2 * self.hop
    }

    /// Applies `edit` to each frame's coefficients, then resynthesizes.
    fn process(&self, x: &[f64], mut edit: impl FnMut(&mut [f64])) -> Vec<f64> {
        let (m, n) = (self.hop, self.frame());
        let blocks = x.len().div_ceil(m) + 1;
        let mut padded = vec![0.0; (blocks + 1) * m];
        padded[m..m + x.len()].copy_from_slice(x);
        let mut out = vec![0.0; padded.len()];
        let mut windowed = vec![0.0; n];
        let mut coeffs = vec![0.0; m];
        for b in 0..blocks {
            let seg = &padded[b * m..b * m + n];
            for i in 0..n {
                windowed[i] = seg[i] * self.window[i];
            }
            for (k, c) in coeffs.iter_mut().enumerate() {
                let row = &self.cos[k * n..(k + 1) * n];
                *c = row.iter().zip(&windowed).map(|(a, b)| a * b).sum();
            }
            edit(&mut coeffs);
            let dst = &mut out[b * m..b * m + n];
            for i in 0..n {
                let s: f64 = coeffs.iter().enumerate().map(|(k, c)| c * self.cos[k * n + i]).sum();
                dst[i] += s * self.window[i] * 2.0 / m as f64;
            }
        }
        out[m..m + x.len()].to_vec()
    }
}

fn top_k(coeffs: &mut [f64], keep: usize) {
    if keep >= coeffs.len() {
        return;
    }
    let mut order: Vec<usize> = (0..coeffs.len()).collect();
    order.sort_by(|&a, &b| coeffs[b].abs().total_cmp(&coeffs[a].abs()).then(a.cmp(&b)));
    for &i in &order[keep..] {
        coeffs[i] = 0.0;
    }
}

pub fn compress(w: &WaveBuffer, proxy: CompressionProxy) -> Result<WaveBuffer, RobustnessError> {
    proxy.validate()?;
    let samples = match proxy {
        CompressionProxy::QuantizeBits(bits) => quantize(w.samples(), bits),
        CompressionProxy::MdctTopK(fraction) => {
            let mdct = Mdct::new(MDCT_FRAME);
            let keep = ((fraction * mdct.hop as f64).ceil() as usize).clamp(1, mdct.hop);
            mdct.process(w.samples(), |c| top_k(c, keep))
        }
    };
    Ok(WaveBuffer::new(samples, w.sample_rate())?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyOutcome {
    pub proxy: CompressionProxy,
    /// Per-source SDR of the separated `compress(x)`.
    pub sdr_clean: Vec<f64>,
    /// Per-source SDR of the separated `compress(x + nu)`.
    pub sdr_perturbed: Vec<f64>,
}

impl ProxyOutcome {
    pub fn delta(&self) -> Vec<f64> {
        self.sdr_perturbed.iter().zip(&self.sdr_clean).map(|(p, c)| p - c).collect()
    }

    pub fn mean_delta(&self) -> f64 {
        metrics::mean(&self.delta()).unwrap_or(0.0)
    }
}

fn separate_scores(model: &SeparatorModel, input: &WaveBuffer, y: &[WaveBuffer]) -> Result<Vec<f64>, RobustnessError> {
    let est = model.forward(input)?;
    est.iter()
        .zip(y)
        .map(|(e, r)| metrics::sdr(r, e).map_err(Into::into))
        .collect()
}

/// Separates `compress(x)` and `compress(x + nu)` with `model` for every
/// proxy and scores both against the true sources.
pub fn robustness_sweep(
    model: &SeparatorModel,
    x: &WaveBuffer,
    y: &[WaveBuffer],
    nu: &WaveBuffer,
    proxies: &[CompressionProxy],
) -> Result<Vec<ProxyOutcome>, RobustnessError> {
    if proxies.is_empty() {
        return Err(RobustnessError::NoProxies);
    }
    let perturbed = x.add(nu)?;
    proxies
        .iter()
        .map(|&proxy| {
            Ok(ProxyOutcome {
                proxy,
                sdr_clean: separate_scores(model, &compress(x, proxy)?, y)?,
                sdr_perturbed: separate_scores(model, &compress(&perturbed, proxy)?, y)?,
            })
        })
        .collect()
}
