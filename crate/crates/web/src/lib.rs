//! WebAssembly bindings for the static demo page in `www/`.

use acan::discretization::{hard_infer, soft_infer, DepthDiscretization, OrdinalOutput};
use acan::losses::gt_attention_weights;
use acan::model::{downsample_targets, OUTPUT_STRIDE};
use acan::scenes::{generate_scene, shade, GeneratorConfig, SceneSample};
use acan::trainer::ATTENTION_DMAX_MARGIN;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// One generated scene plus its 1/8-resolution cell targets.
#[wasm_bindgen]
pub struct Scene {
    sample: SceneSample,
    disc: DepthDiscretization,
    cell_depth: Vec<f64>,
    cell_valid: Vec<bool>,
    grid: (usize, usize),
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, texture_amplitude: f64, bins: usize) -> Result<Scene, JsError> {
        let cfg = GeneratorConfig {
            texture_amplitude,
            ..Default::default()
        };
        let sample = generate_scene(seed, &cfg).map_err(js_err)?;
        let disc = DepthDiscretization::new(cfg.d_min, cfg.d_max, bins).map_err(js_err)?;
        let cells = downsample_targets(
            &sample.depth,
            &sample.valid,
            sample.height,
            sample.width,
            OUTPUT_STRIDE,
            &disc,
        );
        let grid = (sample.height / OUTPUT_STRIDE, sample.width / OUTPUT_STRIDE);
        Ok(Scene {
            sample,
            disc,
            cell_depth: cells.depth,
            cell_valid: cells.valid,
            grid,
        })
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.sample.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.sample.height
    }

    #[wasm_bindgen(getter)]
    pub fn grid_width(&self) -> usize {
        self.grid.1
    }

    #[wasm_bindgen(getter)]
    pub fn grid_height(&self) -> usize {
        self.grid.0
    }

    /// RGBA bytes for an `ImageData`.
    pub fn rgba(&self) -> Vec<u8> {
        self.sample
            .rgb
            .chunks_exact(3)
            .flat_map(|p| {
                let c = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                [c(p[0]), c(p[1]), c(p[2]), 255]
            })
            .collect()
    }

    /// Depth as grey RGBA, near bright.
    pub fn depth_rgba(&self) -> Vec<u8> {
        let (lo, hi) = (self.disc.d_min(), self.disc.d_max());
        self.sample
            .depth
            .iter()
            .flat_map(|&d| {
                let g = (shade(d, lo, hi) * 255.0).round() as u8;
                [g, g, g, 255]
            })
            .collect()
    }

    pub fn depth_at(&self, x: usize, y: usize) -> f64 {
        self.sample.depth[y * self.sample.width + x]
    }

    /// Ground-truth attention row of the output cell under pixel `(x, y)`,
    /// over all `grid_height × grid_width` cells.
    pub fn attention_at(&self, x: usize, y: usize) -> Result<Vec<f64>, JsError> {
        if x >= self.sample.width || y >= self.sample.height {
            return Err(JsError::new("pixel outside the image"));
        }
        let cell = (y / OUTPUT_STRIDE) * self.grid.1 + x / OUTPUT_STRIDE;
        let target = gt_attention_weights(
            &self.cell_depth,
            self.disc.d_max() * ATTENTION_DMAX_MARGIN,
            Some(&self.cell_valid),
        )
        .map_err(js_err)?;
        let n = self.cell_depth.len();
        Ok(target.weights.data()[cell * n..(cell + 1) * n].to_vec())
    }
}

/// Ordinal curve of a pixel whose continuous label is `position` with
/// logistic spread `spread`, and both decodings of it.
#[wasm_bindgen]
pub struct CurveDecoding {
    curve: Vec<f64>,
    hard: f64,
    soft: f64,
    true_depth: f64,
}

#[wasm_bindgen]
impl CurveDecoding {
    pub fn curve(&self) -> Vec<f64> {
        self.curve.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn hard(&self) -> f64 {
        self.hard
    }

    #[wasm_bindgen(getter)]
    pub fn soft(&self) -> f64 {
        self.soft
    }

    #[wasm_bindgen(getter)]
    pub fn true_depth(&self) -> f64 {
        self.true_depth
    }
}

/// `P^k = σ((position − k − 1) / spread)`, so a sharp curve at
/// `position = b + 0.5` sits in the middle of bin `b`.
#[wasm_bindgen]
pub fn decode_curve(
    position: f64,
    spread: f64,
    bins: usize,
    d_min: f64,
    d_max: f64,
) -> Result<CurveDecoding, JsError> {
    let disc = DepthDiscretization::new(d_min, d_max, bins).map_err(js_err)?;
    if !(spread > 0.0) {
        return Err(JsError::new("spread must be positive"));
    }
    let curve: Vec<f64> = (0..bins)
        .map(|k| 1.0 / (1.0 + (-(position - k as f64 - 1.0) / spread).exp()))
        .collect();
    let out = OrdinalOutput::from_probs(1, bins, curve.clone()).map_err(js_err)?;
    let t = (position / bins as f64).clamp(0.0, 1.0);
    Ok(CurveDecoding {
        hard: hard_infer(&out, &disc).depths()[0],
        soft: soft_infer(&out, &disc).depths()[0],
        true_depth: (d_min.ln() + t * (d_max.ln() - d_min.ln())).exp(),
        curve,
    })
}
