//! Single-image inference to depth and attention images.

use std::fs;
use std::path::{Path, PathBuf};

use super::{predict, InferenceKind, Prediction, Result, TrainError};
use crate::attention::CamOptions;
use crate::discretization::DepthDiscretization;
use crate::model::Checkpoint;
use crate::scenes::{
    read_ppm, write_depth, write_depth_visual, write_pgm16, DepthSidecar, SceneSample, DEPTH_MAXVAL,
};

impl InferenceKind {
    pub fn is_soft(self) -> bool {
        matches!(self, Self::Soft | Self::CeSoft)
    }
}

#[derive(Clone, Debug)]
pub struct InferRequest {
    pub inference: InferenceKind,
    pub options: CamOptions,
    /// Output-grid cells whose attention rows are written out.
    pub query_cells: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct InferOutput {
    pub prediction: Prediction,
    /// Full-resolution depth, row-major.
    pub depth: Vec<f64>,
    pub depth_path: PathBuf,
    pub preview_path: PathBuf,
    pub attention_paths: Vec<PathBuf>,
}

/// Centre cell of an `h × w` grid.
pub fn centre_cell(grid: (usize, usize)) -> usize {
    (grid.0 / 2) * grid.1 + grid.1 / 2
}

/// Writes `depth.pgm` (+ sidecar), `depth_preview.pgm`, and one
/// `attention_<cell>.pgm` per query cell into `out_dir`.
pub fn infer_image(
    ckpt: &Checkpoint,
    rgb_path: &Path,
    out_dir: &Path,
    request: &InferRequest,
) -> Result<InferOutput> {
    let (width, height, rgb) = read_ppm(rgb_path)?;
    ckpt.config.check_input(height, width)?;
    let disc = DepthDiscretization::from_params(ckpt.discretization)?;
    let sample = SceneSample {
        height,
        width,
        rgb,
        depth: vec![disc.d_min(); height * width],
        valid: vec![false; height * width],
        meta: None,
    };
    let prediction = predict(
        &ckpt.config,
        &ckpt.store,
        &disc,
        std::slice::from_ref(&sample),
        request.options,
    )?
    .pop()
    .expect("one prediction per image");
    let (gh, gw) = prediction.grid;
    if let Some(&bad) = request.query_cells.iter().find(|&&c| c >= gh * gw) {
        return Err(TrainError::Config(format!(
            "query cell {bad} outside the {gh}x{gw} output grid"
        )));
    }

    fs::create_dir_all(out_dir).map_err(|e| TrainError::Io(out_dir.display().to_string(), e))?;
    let depth = prediction.upsampled(request.inference.is_soft(), height, width);
    let sidecar = DepthSidecar {
        d_min: disc.d_min(),
        d_max: disc.d_max(),
        maxval: DEPTH_MAXVAL,
        invalid_code: 0,
        meta: None,
    };
    let depth_path = out_dir.join("depth.pgm");
    write_depth(
        &depth_path,
        width,
        height,
        &depth,
        &vec![true; depth.len()],
        &sidecar,
    )?;
    let preview_path = out_dir.join("depth_preview.pgm");
    write_depth_visual(
        &preview_path,
        width,
        height,
        &depth,
        disc.d_min(),
        disc.d_max(),
    )?;
    let mut attention_paths = Vec::new();
    for &cell in &request.query_cells {
        let path = out_dir.join(format!("attention_{cell}.pgm"));
        write_pgm16(&path, gw, gh, &prediction.attention.row_image_u16(cell))?;
        attention_paths.push(path);
    }
    Ok(InferOutput {
        prediction,
        depth,
        depth_path,
        preview_path,
        attention_paths,
    })
}
