//! Log-space depth bins, ordinal targets, and the hard/soft decoders that
//! turn ordinal probabilities back into metric depth.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

/// Default number of depth bins for full-size experiments.
pub const DEFAULT_BINS: usize = 80;

#[derive(Debug, Error, PartialEq)]
pub enum DiscretizationError {
    #[error("invalid discretization parameter: {0}")]
    Param(String),
    #[error("depth {0} is not strictly positive")]
    Domain(f64),
    #[error("contract violated: {0}")]
    Contract(String),
}

/// Parameters as stored in configs, checkpoints and reports.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscretizationParams {
    pub d_min: f64,
    pub d_max: f64,
    #[serde(rename = "K")]
    pub bins: usize,
}

impl Default for DiscretizationParams {
    fn default() -> Self {
        Self {
            d_min: 0.5,
            d_max: 10.0,
            bins: 16,
        }
    }
}

/// `K` log-uniform bins over `[d_min, d_max]` with `K + 1` edges.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthDiscretization {
    d_min: f64,
    d_max: f64,
    bins: usize,
    edges: Vec<f64>,
}

impl DepthDiscretization {
    pub fn new(d_min: f64, d_max: f64, bins: usize) -> Result<Self, DiscretizationError> {
        if !(d_min > 0.0 && d_min.is_finite()) {
            return Err(DiscretizationError::Param(format!(
                "d_min must be > 0, got {d_min}"
            )));
        }
        if !(d_max > d_min && d_max.is_finite()) {
            return Err(DiscretizationError::Param(format!(
                "d_max must exceed d_min ({d_min}), got {d_max}"
            )));
        }
        if bins < 2 {
            return Err(DiscretizationError::Param(format!(
                "need at least 2 bins, got {bins}"
            )));
        }
        let (lo, hi) = (d_min.ln(), d_max.ln());
        let step = (hi - lo) / bins as f64;
        let mut edges: Vec<f64> = (0..=bins).map(|k| (lo + k as f64 * step).exp()).collect();
        // pin the endpoints exactly
        edges[0] = d_min;
        edges[bins] = d_max;
        Ok(Self {
            d_min,
            d_max,
            bins,
            edges,
        })
    }

    pub fn from_params(p: DiscretizationParams) -> Result<Self, DiscretizationError> {
        Self::new(p.d_min, p.d_max, p.bins)
    }

    pub fn params(&self) -> DiscretizationParams {
        DiscretizationParams {
            d_min: self.d_min,
            d_max: self.d_max,
            bins: self.bins,
        }
    }

    pub fn d_min(&self) -> f64 {
        self.d_min
    }

    pub fn d_max(&self) -> f64 {
        self.d_max
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// Width of one bin in natural-log units.
    pub fn log_bin_width(&self) -> f64 {
        (self.d_max.ln() - self.d_min.ln()) / self.bins as f64
    }

    /// Midpoint `(t^l + t^{l+1}) / 2` with `l` clamped into `[0, K−1]`.
    pub fn midpoint(&self, label: usize) -> f64 {
        let l = label.min(self.bins - 1);
        0.5 * (self.edges[l] + self.edges[l + 1])
    }

    /// Bin label of a ground-truth depth. Depths outside `[d_min, d_max]`
    /// land in the boundary bins.
    pub fn quantize(&self, depth: f64) -> Result<usize, DiscretizationError> {
        if !(depth > 0.0) {
            return Err(DiscretizationError::Domain(depth));
        }
        let (lo, hi) = (self.d_min.ln(), self.d_max.ln());
        let raw = ((depth.ln() - lo) / (hi - lo) * self.bins as f64).floor();
        Ok(raw.clamp(0.0, (self.bins - 1) as f64) as usize)
    }
}

/// Ordinal target: bit `k` is set iff `k < label`.
///
/// `label == K` (all ones) is accepted so the encoding can serve as an oracle
/// input for the decoders.
pub fn ordinal_encode(label: usize, bins: usize) -> Result<Vec<f64>, DiscretizationError> {
    if label > bins {
        return Err(DiscretizationError::Param(format!(
            "label {label} outside [0, {bins}]"
        )));
    }
    Ok((0..bins)
        .map(|k| if k < label { 1.0 } else { 0.0 })
        .collect())
}

/// `P(l > k) = σ(y_{2k+1} − y_{2k})`, evaluated without overflow.
pub fn ordinal_probability(y_low: f64, y_high: f64) -> f64 {
    sigmoid(y_high - y_low)
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-pixel ordinal probabilities `P_i^k`, stored `N × K` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct OrdinalOutput {
    probs: Vec<f64>,
    pixels: usize,
    bins: usize,
}

impl OrdinalOutput {
    pub fn from_probs(
        pixels: usize,
        bins: usize,
        probs: Vec<f64>,
    ) -> Result<Self, DiscretizationError> {
        if probs.len() != pixels * bins {
            return Err(DiscretizationError::Contract(format!(
                "expected {} probabilities, got {}",
                pixels * bins,
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(DiscretizationError::Contract(format!(
                "probability {p} outside [0, 1]"
            )));
        }
        Ok(Self {
            probs,
            pixels,
            bins,
        })
    }

    /// From an `N × 2K` logit matrix laid out as pairs `(y_{2k}, y_{2k+1})`.
    pub fn from_logit_rows(logits: &Tensor) -> Result<Self, DiscretizationError> {
        let &[pixels, width] = logits.shape() else {
            return Err(DiscretizationError::Contract(format!(
                "logits must be N×2K, got {:?}",
                logits.shape()
            )));
        };
        if width % 2 != 0 {
            return Err(DiscretizationError::Contract(format!(
                "odd logit width {width}"
            )));
        }
        let probs = logits
            .data()
            .chunks_exact(2)
            .map(|p| ordinal_probability(p[0], p[1]))
            .collect();
        Ok(Self {
            probs,
            pixels,
            bins: width / 2,
        })
    }

    /// From a network output map `[2K, h, w]`: channel `2k` is `y_{2k}`.
    pub fn from_logit_map(map: &Tensor) -> Result<Self, DiscretizationError> {
        let &[ch, h, w] = map.shape() else {
            return Err(DiscretizationError::Contract(format!(
                "logit map must be 2K×h×w, got {:?}",
                map.shape()
            )));
        };
        if ch % 2 != 0 {
            return Err(DiscretizationError::Contract(format!(
                "odd channel count {ch}"
            )));
        }
        let bins = ch / 2;
        let plane = h * w;
        let d = map.data();
        let mut probs = vec![0.0; plane * bins];
        for i in 0..plane {
            for k in 0..bins {
                probs[i * bins + k] =
                    ordinal_probability(d[2 * k * plane + i], d[(2 * k + 1) * plane + i]);
            }
        }
        Ok(Self {
            probs,
            pixels: plane,
            bins,
        })
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn row(&self, pixel: usize) -> &[f64] {
        &self.probs[pixel * self.bins..(pixel + 1) * self.bins]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Decoded depth for one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelInference {
    pub label: usize,
    /// Area under the probability curve, `Σ_k P^k`.
    pub mass: f64,
    pub fraction: f64,
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceResult {
    pub pixels: Vec<PixelInference>,
}

impl InferenceResult {
    pub fn depths(&self) -> Vec<f64> {
        self.pixels.iter().map(|p| p.depth).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.pixels.iter().map(|p| p.label).collect()
    }
}

fn check_bins(out: &OrdinalOutput, disc: &DepthDiscretization) {
    assert_eq!(
        out.bins(),
        disc.bins(),
        "ordinal output has {} bins, discretization {}",
        out.bins(),
        disc.bins()
    );
}

/// Thresholded decoding: `l = Σ_k [P^k ≥ 0.5]`, depth at the midpoint of bin `l`.
pub fn hard_infer(out: &OrdinalOutput, disc: &DepthDiscretization) -> InferenceResult {
    check_bins(out, disc);
    let pixels = (0..out.pixels())
        .map(|i| {
            let row = out.row(i);
            let label = row.iter().filter(|&&p| p >= 0.5).count();
            PixelInference {
                label,
                mass: row.iter().sum(),
                fraction: 0.0,
                depth: disc.midpoint(label),
            }
        })
        .collect();
    InferenceResult { pixels }
}

/// Area-based decoding: interpolates between the midpoints of bins
/// `⌊s⌋` and `⌊s⌋ + 1`, where `s = Σ_k P^k`.
pub fn soft_infer(out: &OrdinalOutput, disc: &DepthDiscretization) -> InferenceResult {
    check_bins(out, disc);
    let pixels = (0..out.pixels())
        .map(|i| {
            let mass: f64 = out
                .row(i)
                .iter()
                .sum::<f64>()
                .clamp(0.0, disc.bins() as f64);
            let label = mass.floor() as usize;
            let fraction = mass - label as f64;
            let lower = disc.midpoint(label);
            let depth = if fraction == 0.0 {
                lower
            } else {
                lower * (1.0 - fraction) + disc.midpoint(label + 1) * fraction
            };
            PixelInference {
                label,
                mass,
                fraction,
                depth,
            }
        })
        .collect();
    InferenceResult { pixels }
}

/// Expected midpoint under a per-pixel categorical distribution (`N × K`).
pub fn ce_soft_infer(
    class_probs: &Tensor,
    disc: &DepthDiscretization,
) -> Result<Vec<f64>, DiscretizationError> {
    let &[_, bins] = class_probs.shape() else {
        return Err(DiscretizationError::Contract(format!(
            "class probabilities must be N×K, got {:?}",
            class_probs.shape()
        )));
    };
    if bins != disc.bins() {
        return Err(DiscretizationError::Contract(format!(
            "{bins} classes but {} bins",
            disc.bins()
        )));
    }
    class_probs
        .data()
        .chunks_exact(bins)
        .enumerate()
        .map(|(i, row)| {
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
                return Err(DiscretizationError::Contract(format!(
                    "row {i} is not a distribution (sums to {total})"
                )));
            }
            Ok(row
                .iter()
                .enumerate()
                .map(|(k, p)| p * disc.midpoint(k))
                .sum())
        })
        .collect()
}

/// Depth at the midpoint of the most probable class (`N × K` input).
pub fn ce_hard_infer(class_scores: &Tensor, disc: &DepthDiscretization) -> Vec<usize> {
    let bins = disc.bins();
    class_scores
        .data()
        .chunks_exact(bins)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &v)| {
                    if v > best.1 {
                        (k, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}
