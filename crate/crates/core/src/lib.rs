//! Deformable Gaussian splatting with a distilled semantic feature field.

pub mod checkpoint;
pub mod dataset;
pub mod deformation;
pub mod gaussians;
pub mod gradcheck;
pub mod hexplane;
pub mod linalg;
pub mod metrics;
pub mod numerics;
pub mod rasterizer;
pub mod semantic;
pub mod synth;
pub mod training;
