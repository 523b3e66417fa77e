//! Printable voxel reconstruction toolkit.
//!
//! The pipeline fits a view-independent, anisotropic RGBA voxel grid to posed
//! photographs by differentiable volume rendering, separates the fitted colors
//! into six printer materials (cyan, magenta, yellow, black, white, clear) and
//! slices the result into per-layer indexed rasters for photopolymer jetting.
//!
//! Module map:
//!
//! - [`dataset`]: camera model, dataset manifests, ray generation.
//! - [`voxgrid`]: anisotropic RGBA grid, trilinear sampling and its adjoint,
//!   background pruning, the `POXV1` dump format.
//! - [`render`]: emission-absorption compositing, analytic backward pass,
//!   preview images.
//! - [`optim`]: regional averaging, losses, RMSProp training loop.
//! - [`colorsep`]: gamut mapping, 3D error-diffusion halftoning, `POXM1` format.
//! - [`slicer`]: layer stacks, indexed PNG export and import.
//! - [`synthetic`]: analytic test scenes used to generate ground truth views.
//!
//! Scene units are millimetres throughout.

pub mod colorsep;
pub mod dataset;
mod error;
mod srgb;
pub mod optim;
pub mod render;
pub mod slicer;
pub mod synthetic;
pub mod voxgrid;

pub use error::{Error, Result};

/// 3-vector in scene units (mm).
pub type Vec3 = nalgebra::Vector3<f64>;

/// Linear RGB triple.
pub type Rgb = [f64; 3];

/// Linear RGB plus opacity.
pub type Rgba = [f64; 4];

/// Writes through a sibling temporary file so readers never see a partial file.
pub(crate) fn write_file_atomic(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
