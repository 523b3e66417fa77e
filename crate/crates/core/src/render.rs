//! View-independent emission-absorption renderer over a [`VoxelGrid`].
//!
//! Rays are clipped to the grid box and sampled at the midpoints of equal
//! steps. Each sample's trilinear RGBA is composited front to back with the
//! stored alpha used directly as per-sample opacity:
//!
//! ```text
//! T_0 = 1,  w_k = T_k a_k,  T_{k+1} = T_k (1 - a_k)
//! rgb = sum_k w_k c_k + T_K * background
//! ```
//!
//! Ray direction only determines where samples land; colors carry no
//! directional terms.

use std::path::Path;

use rayon::prelude::*;

use crate::dataset::{generate_ray, CameraIntrinsics, Pose, Ray};
use crate::voxgrid::{GridSpec, VoxelGrid};
use crate::{srgb, Error, Result, Rgb, Rgba};

/// Marching stops once transmittance falls below this. Colors and background
/// lie in `[0, 1]`, so the skipped tail changes no channel by more than this.
pub const EARLY_STOP_TRANSMITTANCE: f64 = 1e-6;

pub const WHITE: Rgb = [1.0, 1.0, 1.0];

/// Half the finest pitch.
pub fn default_step(spec: &GridSpec) -> f64 {
    0.5 * spec.min_pitch()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySample {
    pub t: f64,
    pub rgba: Rgba,
    pub weight: f64,
    pub transmittance_before: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderResult {
    pub rgb: Rgb,
    /// `1 - final_transmittance`.
    pub opacity: f64,
    pub final_transmittance: f64,
    /// Per-sample records, kept only when requested.
    pub samples: Option<Vec<RaySample>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Evaluate every sample.
    Exact,
    /// Stop once transmittance drops below [`EARLY_STOP_TRANSMITTANCE`].
    Early,
}

/// Composites `ray` through `grid` with early termination.
pub fn integrate_ray(grid: &VoxelGrid, ray: &Ray, step: f64, background: Rgb) -> Result<RenderResult> {
    check_step(step)?;
    Ok(march(grid, ray, step, background, Termination::Early, None))
}

/// Like [`integrate_ray`] but keeps per-sample records for [`backprop_ray`].
pub fn integrate_ray_recorded(
    grid: &VoxelGrid,
    ray: &Ray,
    step: f64,
    background: Rgb,
    termination: Termination,
) -> Result<RenderResult> {
    check_step(step)?;
    let mut samples = Vec::new();
    let mut r = march(grid, ray, step, background, termination, Some(&mut samples));
    r.samples = Some(samples);
    Ok(r)
}

fn check_step(step: f64) -> Result<()> {
    if step > 0.0 && step.is_finite() {
        Ok(())
    } else {
        Err(Error::Step(step))
    }
}

/// Sample parameters `t_k` of `ray` inside the grid box.
pub fn sample_positions(spec: &GridSpec, ray: &Ray, step: f64) -> impl Iterator<Item = f64> {
    let (t0, count) = match spec.bounds().clip(ray) {
        Some((t0, t1)) => (t0, ((t1 - t0) / step).ceil() as usize),
        None => (0.0, 0),
    };
    (0..count).map(move |k| t0 + (k as f64 + 0.5) * step)
}

/// How samples read the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sampling {
    #[default]
    Trilinear,
    /// Value of the voxel containing the sample; for discrete material grids.
    Nearest,
}

pub(crate) fn march(
    grid: &VoxelGrid,
    ray: &Ray,
    step: f64,
    background: Rgb,
    termination: Termination,
    records: Option<&mut Vec<RaySample>>,
) -> RenderResult {
    march_sampled(grid, ray, step, background, termination, Sampling::Trilinear, records)
}

fn march_sampled(
    grid: &VoxelGrid,
    ray: &Ray,
    step: f64,
    background: Rgb,
    termination: Termination,
    sampling: Sampling,
    mut records: Option<&mut Vec<RaySample>>,
) -> RenderResult {
    if let Some(r) = records.as_deref_mut() {
        r.clear();
    }
    let mut rgb = [0.0; 3];
    let mut transmittance = 1.0;
    for t in sample_positions(grid.spec(), ray, step) {
        if termination == Termination::Early && transmittance < EARLY_STOP_TRANSMITTANCE {
            break;
        }
        let rgba = match sampling {
            Sampling::Trilinear => grid.sample_trilinear(&ray.at(t)),
            Sampling::Nearest => grid.sample_nearest(&ray.at(t)),
        };
        let weight = transmittance * rgba[3];
        for c in 0..3 {
            rgb[c] += weight * rgba[c];
        }
        if let Some(r) = records.as_deref_mut() {
            r.push(RaySample {
                t,
                rgba,
                weight,
                transmittance_before: transmittance,
            });
        }
        transmittance *= 1.0 - rgba[3];
    }
    for c in 0..3 {
        rgb[c] += transmittance * background[c];
    }
    RenderResult {
        rgb,
        opacity: 1.0 - transmittance,
        final_transmittance: transmittance,
        samples: None,
    }
}

/// Gradients of the composited color with respect to each recorded sample's
/// RGBA, given the upstream gradient `d_rgb`.
///
/// With `R_k` the color seen from just in front of sample `k` when
/// transmittance is reset to one (`R_K = background`,
/// `R_k = a_k c_k + (1 - a_k) R_{k+1}`):
///
/// ```text
/// d rgb / d c_k = w_k
/// d rgb / d a_k = T_k (c_k - R_{k+1})
/// ```
pub fn backprop_ray(result: &RenderResult, background: Rgb, d_rgb: Rgb) -> Result<Vec<Rgba>> {
    let samples = result.samples.as_deref().ok_or(Error::MissingRecords)?;
    let mut out = vec![[0.0; 4]; samples.len()];
    backprop_samples(samples, background, &d_rgb, &mut out);
    Ok(out)
}

pub(crate) fn backprop_samples(samples: &[RaySample], background: Rgb, d_rgb: &Rgb, out: &mut [Rgba]) {
    let mut behind = background;
    for (s, g) in samples.iter().zip(out.iter_mut()).rev() {
        let a = s.rgba[3];
        let mut d_alpha = 0.0;
        for c in 0..3 {
            g[c] = s.weight * d_rgb[c];
            d_alpha += s.transmittance_before * (s.rgba[c] - behind[c]) * d_rgb[c];
            behind[c] = a * s.rgba[c] + (1.0 - a) * behind[c];
        }
        g[3] = d_alpha;
    }
}

/// Linear RGB image plus per-pixel opacity, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<Rgb>,
    pub opacity: Vec<f64>,
}

impl RenderedImage {
    pub fn pixel(&self, px: u32, py: u32) -> Rgb {
        self.rgb[(py * self.width + px) as usize]
    }

    /// Box-filters `factor x factor` pixel blocks.
    pub fn downsample(&self, factor: u32) -> RenderedImage {
        if factor <= 1 {
            return self.clone();
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let n = (factor * factor) as f64;
        let mut rgb = Vec::with_capacity((w * h) as usize);
        let mut opacity = Vec::with_capacity((w * h) as usize);
        for y in 0..h {
            for x in 0..w {
                let mut c = [0.0; 3];
                let mut o = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        let i = ((y * factor + dy) * self.width + x * factor + dx) as usize;
                        for k in 0..3 {
                            c[k] += self.rgb[i][k];
                        }
                        o += self.opacity[i];
                    }
                }
                rgb.push(c.map(|v| v / n));
                opacity.push(o / n);
            }
        }
        RenderedImage {
            width: w,
            height: h,
            rgb,
            opacity,
        }
    }

    /// 8-bit sRGB PNG.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let data: Vec<u8> = self.rgb.iter().flatten().map(|&v| srgb::encode_u8(v)).collect();
        write_png8(path, self.width, self.height, png::ColorType::Rgb, &data)
    }

    /// 8-bit grayscale PNG of the opacity channel.
    pub fn write_opacity_png(&self, path: &Path) -> Result<()> {
        let data: Vec<u8> = self
            .opacity
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        write_png8(path, self.width, self.height, png::ColorType::Grayscale, &data)
    }
}

fn write_png8(path: &Path, width: u32, height: u32, color: png::ColorType, data: &[u8]) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, width, height);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(data)?;
        writer.finish()?;
    }
    crate::write_file_atomic(path, &buf)
}

/// Renders one ray per pixel centre.
pub fn render_image(
    grid: &VoxelGrid,
    intrinsics: &CameraIntrinsics,
    pose: &Pose,
    step: f64,
    background: Rgb,
) -> Result<RenderedImage> {
    render_image_with(grid, intrinsics, pose, step, background, Sampling::Trilinear)
}

pub fn render_image_with(
    grid: &VoxelGrid,
    intrinsics: &CameraIntrinsics,
    pose: &Pose,
    step: f64,
    background: Rgb,
    sampling: Sampling,
) -> Result<RenderedImage> {
    check_step(step)?;
    intrinsics.validate()?;
    let (w, h) = (intrinsics.width, intrinsics.height);
    let rows: Vec<Vec<RenderResult>> = (0..h)
        .into_par_iter()
        .map(|py| {
            (0..w)
                .map(|px| {
                    let ray = generate_ray(intrinsics, pose, px, py)?;
                    Ok(march_sampled(grid, &ray, step, background, Termination::Early, sampling, None))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let (rgb, opacity) = rows.into_iter().flatten().map(|r| (r.rgb, r.opacity)).unzip();
    Ok(RenderedImage {
        width: w,
        height: h,
        rgb,
        opacity,
    })
}
