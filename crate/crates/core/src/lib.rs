//! Attention-based context aggregation for monocular depth estimation,
//! built on a small reverse-mode tensor engine.

pub mod attention;
pub mod checks;
pub mod discretization;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod report;
pub mod scenes;
pub mod tensor;
pub mod trainer;
