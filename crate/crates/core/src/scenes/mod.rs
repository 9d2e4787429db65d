//! Synthetic piecewise-smooth scenes and their on-disk formats.
//!
//! A scene is a log-depth background ramp with a handful of rectangular and
//! elliptical objects pasted in front of it, each on its own tilted plane.
//! The RGB rendering is a depth-driven shading times a per-object tint, plus
//! a high-frequency stripe texture that carries no depth information.

mod manifest;
mod pnm;

pub use manifest::{generate_dataset, DatasetManifest, ManifestEntry, Split};
pub use pnm::{
    decode_depth, encode_depth, read_depth, read_ppm, read_sample, sidecar_path, write_depth,
    write_depth_visual, write_pgm16, write_ppm, write_sample, DepthSidecar, SamplePaths,
    DEPTH_MAXVAL,
};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid generator config: {0}")]
    Param(String),
    #[error("malformed header in {path}: {reason}")]
    Header { path: String, reason: String },
    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: String,
        expected: usize,
        found: usize,
    },
    #[error("depth range sidecar missing: {0}")]
    MissingSidecar(String),
    #[error("depth PGM {path} has maxval {found}, expected {expected}")]
    Maxval {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("sidecar {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = SceneError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Amplitude of the depth-independent stripe texture added to RGB.
    pub texture_amplitude: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            height: 48,
            width: 48,
            d_min: 0.5,
            d_max: 10.0,
            min_objects: 2,
            max_objects: 6,
            texture_amplitude: 0.25,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SceneError::Param(m));
        if self.height < 8 || self.width < 8 {
            return fail(format!("size {}x{} below 8x8", self.height, self.width));
        }
        if !(self.d_min > 0.0 && self.d_max > self.d_min && self.d_max.is_finite()) {
            return fail(format!("depth range [{}, {}]", self.d_min, self.d_max));
        }
        if self.min_objects == 0 || self.max_objects < self.min_objects {
            return fail(format!(
                "object count {}..={}",
                self.min_objects, self.max_objects
            ));
        }
        if !(self.texture_amplitude >= 0.0 && self.texture_amplitude.is_finite()) {
            return fail(format!("texture amplitude {}", self.texture_amplitude));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rect,
    Ellipse,
}

/// One pasted object: footprint plus a log-depth plane
/// `ln d = log_depth + slope_x·(x − cx) + slope_y·(y − cy)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub cx: f64,
    pub cy: f64,
    pub half_w: f64,
    pub half_h: f64,
    pub log_depth: f64,
    pub slope_x: f64,
    pub slope_y: f64,
    pub tint: [f64; 3],
    pub stripe: [f64; 3],
}

impl SceneObject {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let u = (x - self.cx) / self.half_w;
        let v = (y - self.cy) / self.half_h;
        match self.shape {
            Shape::Rect => u.abs() <= 1.0 && v.abs() <= 1.0,
            Shape::Ellipse => u * u + v * v <= 1.0,
        }
    }

    fn log_depth_at(&self, x: f64, y: f64) -> f64 {
        self.log_depth + self.slope_x * (x - self.cx) + self.slope_y * (y - self.cy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub seed: u64,
    pub config: GeneratorConfig,
    pub log_far: f64,
    pub log_near: f64,
    /// Painter's order: later objects occlude earlier ones.
    pub objects: Vec<SceneObject>,
}

impl SceneMeta {
    /// Index of the topmost object covering pixel `(x, y)`, or `None` for
    /// background.
    pub fn region_at(&self, x: usize, y: usize) -> Option<usize> {
        self.objects
            .iter()
            .rposition(|o| o.contains(x as f64, y as f64))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub height: usize,
    pub width: usize,
    /// Interleaved `H × W × 3`, values in `[0, 1]`.
    pub rgb: Vec<f64>,
    /// Metres, row-major `H × W`.
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
    pub meta: Option<SceneMeta>,
}

impl SceneSample {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Planar `[3, H, W]` copy of the RGB image.
    pub fn rgb_planar(&self) -> Vec<f64> {
        let n = self.pixels();
        let mut out = vec![0.0; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                out[c * n + i] = self.rgb[3 * i + c];
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Self {
        let (h, w) = (self.height, self.width);
        let mut out = self.clone();
        for y in 0..h {
            for x in 0..w {
                let (dst, src) = (y * w + x, y * w + (w - 1 - x));
                out.depth[dst] = self.depth[src];
                out.valid[dst] = self.valid[src];
                out.rgb[3 * dst..3 * dst + 3].copy_from_slice(&self.rgb[3 * src..3 * src + 3]);
            }
        }
        out.meta = None;
        out
    }
}

/// Strictly decreasing map from depth to gray level in `[0.1, 0.9]`.
pub fn shade(depth: f64, d_min: f64, d_max: f64) -> f64 {
    let t = (depth.ln() - d_min.ln()) / (d_max.ln() - d_min.ln());
    0.9 - 0.8 * t.clamp(0.0, 1.0)
}

fn tint(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let a: f64 = rng.gen_range(-0.1..0.1);
    let b: f64 = rng.gen_range(-0.1..0.1);
    let c = -(a + b);
    [1.0 + a, 1.0 + b, 1.0 + c]
}

/// Random high-frequency stripe: angle, period in pixels, phase.
fn stripe(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.gen_range(0.0..std::f64::consts::PI),
        rng.gen_range(2.0..4.0),
        rng.gen_range(0.0..std::f64::consts::TAU),
    ]
}

fn stripe_value(s: &[f64; 3], x: f64, y: f64) -> f64 {
    let (theta, period, phase) = (s[0], s[1], s[2]);
    let u = x * theta.cos() + y * theta.sin();
    (std::f64::consts::TAU * u / period + phase).sin()
}

pub fn generate_scene(seed: u64, cfg: &GeneratorConfig) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let (lo, hi) = (cfg.d_min.ln(), cfg.d_max.ln());
    let span = hi - lo;

    let log_far = hi - rng.gen_range(0.0..0.15) * span;
    let log_near = lo + rng.gen_range(0.0..0.3) * span;
    let bg_tint = tint(&mut rng);
    let bg_stripe = stripe(&mut rng);
    let background = |y: f64| log_far + (log_near - log_far) * y / (h - 1) as f64;

    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let short = h.min(w) as f64;
    let mut objects: Vec<SceneObject> = (0..count)
        .map(|_| {
            let shape = if rng.gen_bool(0.5) {
                Shape::Rect
            } else {
                Shape::Ellipse
            };
            let half_w = rng.gen_range(0.12..0.3) * short;
            let half_h = rng.gen_range(0.12..0.3) * short;
            let cx = rng.gen_range(0.0..(w - 1) as f64);
            let cy = rng.gen_range(0.0..(h - 1) as f64);
            let behind = background(cy);
            let log_depth = lo + rng.gen_range(0.05..0.9) * (behind - lo).max(0.0);
            let max_slope = 0.15 * span / short;
            SceneObject {
                shape,
                cx,
                cy,
                half_w,
                half_h,
                log_depth,
                slope_x: rng.gen_range(-max_slope..max_slope),
                slope_y: rng.gen_range(-max_slope..max_slope),
                tint: tint(&mut rng),
                stripe: stripe(&mut rng),
            }
        })
        .collect();
    objects.sort_by(|a, b| b.log_depth.total_cmp(&a.log_depth));

    let meta = SceneMeta {
        seed,
        config: cfg.clone(),
        log_far,
        log_near,
        objects,
    };
    let mut depth = vec![0.0; h * w];
    let mut rgb = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64, y as f64);
            let (log_d, tint, stripe) = match meta.region_at(x, y) {
                Some(k) => {
                    let o = &meta.objects[k];
                    (o.log_depth_at(fx, fy), o.tint, o.stripe)
                }
                None => (background(fy), bg_tint, bg_stripe),
            };
            let d = log_d.exp().clamp(cfg.d_min, cfg.d_max);
            let i = y * w + x;
            depth[i] = d;
            let g = shade(d, cfg.d_min, cfg.d_max);
            let t = cfg.texture_amplitude * stripe_value(&stripe, fx, fy);
            for c in 0..3 {
                rgb[3 * i + c] = (g * tint[c] + t).clamp(0.0, 1.0);
            }
        }
    }
    Ok(SceneSample {
        height: h,
        width: w,
        rgb,
        depth,
        valid: vec![true; h * w],
        meta: Some(meta),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparsePattern {
    Rows,
    Random,
}

/// Invalidate pixels so that roughly `keep_fraction` of the image remains.
///
/// `Random` keeps exactly `round(fraction·H·W)` positions; `Rows` keeps
/// `⌈fraction·H⌉` evenly spaced scanlines. Pixels already invalid stay
/// invalid.
pub fn sparsify_mask(
    sample: &SceneSample,
    keep_fraction: f64,
    pattern: SparsePattern,
    seed: u64,
) -> SceneSample {
    assert!(
        keep_fraction > 0.0 && keep_fraction <= 1.0,
        "keep fraction {keep_fraction} outside (0, 1]"
    );
    let (h, w) = (sample.height, sample.width);
    let mut keep = vec![false; h * w];
    match pattern {
        SparsePattern::Random => {
            let mut order: Vec<usize> = (0..h * w).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let n = ((keep_fraction * (h * w) as f64).round() as usize).min(h * w);
            for &i in &order[..n] {
                keep[i] = true;
            }
        }
        SparsePattern::Rows => {
            let rows = ((keep_fraction * h as f64).ceil() as usize).clamp(1, h);
            for j in 0..rows {
                let y = j * h / rows;
                keep[y * w..(y + 1) * w].fill(true);
            }
        }
    }
    let mut out = sample.clone();
    for (v, k) in out.valid.iter_mut().zip(keep) {
        *v &= k;
    }
    out
}

/// Fraction of 4-neighbour pairs (both valid) whose log-depth jump exceeds
/// `threshold`.
pub fn jump_fraction(sample: &SceneSample, threshold: f64) -> f64 {
    let (h, w) = (sample.height, sample.width);
    let (mut pairs, mut jumps) = (0usize, 0usize);
    let mut visit = |a: usize, b: usize| {
        if sample.valid[a] && sample.valid[b] {
            pairs += 1;
            if (sample.depth[a].ln() - sample.depth[b].ln()).abs() > threshold {
                jumps += 1;
            }
        }
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                visit(i, i + 1);
            }
            if y + 1 < h {
                visit(i, i + w);
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        jumps as f64 / pairs as f64
    }
}
