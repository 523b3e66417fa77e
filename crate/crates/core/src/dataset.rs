//! Calibrated multi-view datasets and pinhole ray generation.
//!
//! Cameras follow the common synthetic-dataset convention: poses are
//! camera-to-world rigid transforms, the camera looks down its local `-z`
//! axis with `+y` up, and image rows grow downwards. Pixels are sampled at
//! their centres (`px + 0.5`, `py + 0.5`).

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4};
use serde::{Deserialize, Serialize};

use crate::{srgb, Error, Result, Vec3};

const RIGID_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(width: u32, height: u32, fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = CameraIntrinsics {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
        };
        k.validate()?;
        Ok(k)
    }

    /// Centred principal point and a horizontal field of view in radians.
    pub fn from_fov_x(width: u32, height: u32, fov_x: f64) -> Result<Self> {
        if !(fov_x > 0.0 && fov_x < std::f64::consts::PI) {
            return Err(Error::Intrinsics(format!("horizontal fov {fov_x} rad")));
        }
        let f = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self::new(width, height, f, f, 0.5 * width as f64, 0.5 * height as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Intrinsics(format!(
                "image size {}x{}",
                self.width, self.height
            )));
        }
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::Intrinsics(format!(
                "focal lengths ({}, {})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(Error::Intrinsics(format!("cx {} outside image", self.cx)));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::Intrinsics(format!("cy {} outside image", self.cy)));
        }
        Ok(())
    }

    /// Same field of view at `factor` times the resolution.
    pub fn scaled(&self, factor: u32) -> Self {
        let s = factor as f64;
        CameraIntrinsics {
            width: self.width * factor,
            height: self.height * factor,
            fx: self.fx * s,
            fy: self.fy * s,
            cx: self.cx * s,
            cy: self.cy * s,
        }
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    camera_to_world: Matrix4<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            camera_to_world: Matrix4::identity(),
        }
    }

    /// Checks that the upper-left block is a proper rotation and the last
    /// row is `[0, 0, 0, 1]`.
    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonRigidPose("non-finite entries".into()));
        }
        let last = m.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(Error::NonRigidPose(format!(
                "last row is [{}, {}, {}, {}]",
                last[0], last[1], last[2], last[3]
            )));
        }
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let err = (r.transpose() * r - Matrix3::identity()).amax();
        if err > RIGID_TOLERANCE {
            return Err(Error::NonRigidPose(format!(
                "rotation not orthonormal (|RtR - I| = {err:.3e})"
            )));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > RIGID_TOLERANCE {
            return Err(Error::NonRigidPose(format!("rotation determinant {det}")));
        }
        Ok(Pose { camera_to_world: m })
    }

    /// Row-major nested arrays, as stored in manifests.
    pub fn from_rows(rows: [[f64; 4]; 4]) -> Result<Self> {
        Self::from_matrix(Matrix4::from_fn(|r, c| rows[r][c]))
    }

    pub fn from_rotation_translation(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self::from_matrix(m)
    }

    /// Camera at `eye` looking at `target`; `up` picks the roll.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let back = eye - target;
        if back.norm() == 0.0 {
            return Err(Error::NonRigidPose("eye coincides with target".into()));
        }
        let z = back.normalize();
        let mut x = up.cross(&z);
        if x.norm() < 1e-9 {
            // up parallel to the view axis; pick any perpendicular
            let alt = if z.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
            x = alt.cross(&z);
        }
        let x = x.normalize();
        let y = z.cross(&x);
        Self::from_rotation_translation(Matrix3::from_columns(&[x, y, z]), eye)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.camera_to_world
    }

    pub fn rows(&self) -> [[f64; 4]; 4] {
        let m = &self.camera_to_world;
        std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.camera_to_world.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vec3 {
        self.camera_to_world.fixed_view::<3, 1>(0, 3).into_owned()
    }
}

/// A calibrated view. Pixels are linear RGBA in row-major order; alpha is
/// the foreground mask (1 where the image carried no alpha channel).
#[derive(Debug, Clone)]
pub struct PosedImage {
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
    pixels: Vec<[f32; 4]>,
}

impl PosedImage {
    pub fn new(intrinsics: CameraIntrinsics, pose: Pose, pixels: Vec<[f32; 4]>) -> Result<Self> {
        intrinsics.validate()?;
        let expected = intrinsics.width as usize * intrinsics.height as usize;
        if pixels.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for a {}x{} image",
                pixels.len(),
                intrinsics.width,
                intrinsics.height
            )));
        }
        if let Some(bad) = pixels
            .iter()
            .flatten()
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::OutOfRange(format!("pixel channel {bad}")));
        }
        Ok(PosedImage {
            intrinsics,
            pose,
            pixels,
        })
    }

    pub fn width(&self) -> u32 {
        self.intrinsics.width
    }

    pub fn height(&self) -> u32 {
        self.intrinsics.height
    }

    pub fn pixels(&self) -> &[[f32; 4]] {
        &self.pixels
    }

    pub fn pixel(&self, px: u32, py: u32) -> [f32; 4] {
        self.pixels[py as usize * self.intrinsics.width as usize + px as usize]
    }

    /// Pixel color composited over `background` using the alpha mask.
    pub fn target_rgb(&self, px: u32, py: u32, background: [f64; 3]) -> [f64; 3] {
        let p = self.pixel(px, py);
        let a = p[3] as f64;
        std::array::from_fn(|c| p[c] as f64 * a + background[c] * (1.0 - a))
    }

    pub fn ray(&self, px: u32, py: u32) -> Result<Ray> {
        generate_ray(&self.intrinsics, &self.pose, px, py)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    /// Normalizes `direction`; the parameter range is `[0, inf)`.
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Ray {
            origin,
            direction: direction.normalize(),
            t_near: 0.0,
            t_far: f64::INFINITY,
        }
    }

    pub fn with_range(mut self, t_near: f64, t_far: f64) -> Self {
        self.t_near = t_near;
        self.t_far = t_far;
        self
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Axis-aligned box in scene units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn center(&self) -> Vec3 {
        Vec3::from_fn(|i, _| 0.5 * (self.min[i] + self.max[i]))
    }

    pub fn extent(&self) -> Vec3 {
        Vec3::from_fn(|i, _| self.max[i] - self.min[i])
    }

    /// Slab test. Returns the parameter interval of `ray` inside the box,
    /// intersected with the ray's own range, or `None` when it misses.
    pub fn clip(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t0 = ray.t_near;
        let mut t1 = ray.t_far;
        for axis in 0..3 {
            let o = ray.origin[axis];
            let d = ray.direction[axis];
            if d == 0.0 {
                if o < self.min[axis] || o > self.max[axis] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let (mut a, mut b) = ((self.min[axis] - o) * inv, (self.max[axis] - o) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t0 < t1).then_some((t0, t1))
    }
}

/// Ray through the centre of pixel `(px, py)`.
pub fn generate_ray(intrinsics: &CameraIntrinsics, pose: &Pose, px: u32, py: u32) -> Result<Ray> {
    if px >= intrinsics.width || py >= intrinsics.height {
        return Err(Error::PixelOutOfBounds {
            px,
            py,
            width: intrinsics.width,
            height: intrinsics.height,
        });
    }
    let local = Vec3::new(
        (px as f64 + 0.5 - intrinsics.cx) / intrinsics.fx,
        -(py as f64 + 0.5 - intrinsics.cy) / intrinsics.fy,
        -1.0,
    );
    let m = pose.matrix();
    let dir = m.fixed_view::<3, 3>(0, 0) * local;
    Ok(Ray::new(pose.translation(), dir))
}

/// Continuous pixel coordinates of a world point, or `None` behind the camera.
pub fn project(intrinsics: &CameraIntrinsics, pose: &Pose, point: Vec3) -> Option<(f64, f64)> {
    let cam = pose.rotation().transpose() * (point - pose.translation());
    if cam.z >= 0.0 {
        return None;
    }
    let depth = -cam.z;
    Some((
        intrinsics.cx + intrinsics.fx * cam.x / depth,
        intrinsics.cy - intrinsics.fy * cam.y / depth,
    ))
}

#[derive(Debug, Clone)]
pub struct ViewSplit<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub warning: Option<String>,
}

/// Sends every `holdout_every`-th frame (indices `holdout_every - 1`,
/// `2 * holdout_every - 1`, ...) to validation, preserving order.
pub fn split_views<T>(frames: Vec<T>, holdout_every: usize) -> Result<ViewSplit<T>> {
    if holdout_every < 2 {
        return Err(Error::Config(format!(
            "holdout_every must be at least 2, got {holdout_every}"
        )));
    }
    let count = frames.len();
    let (mut train, mut validation) = (Vec::new(), Vec::new());
    for (i, frame) in frames.into_iter().enumerate() {
        if (i + 1) % holdout_every == 0 {
            validation.push(frame);
        } else {
            train.push(frame);
        }
    }
    let warning = validation.is_empty().then(|| {
        let msg = format!(
            "holdout_every={holdout_every} exceeds the {count} available frames; validation set is empty"
        );
        log::warn!("{msg}");
        msg
    });
    Ok(ViewSplit {
        train,
        validation,
        warning,
    })
}

/// On-disk dataset manifest.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_angle_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fl_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fl_y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<u32>,
    /// Optional scene bounds in mm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aabb: Option<Aabb>,
    #[serde(default)]
    pub frames: Vec<ManifestFrame>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub file_path: String,
    pub transform_matrix: [[f64; 4]; 4],
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<PosedImage>,
    pub bounds: Aabb,
}

impl Manifest {
    fn intrinsics_for(&self, path: &Path, width: u32, height: u32) -> Result<CameraIntrinsics> {
        let bad = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            message,
        };
        match (self.fl_x, self.camera_angle_x) {
            (Some(fl_x), _) => CameraIntrinsics::new(
                width,
                height,
                fl_x,
                self.fl_y.unwrap_or(fl_x),
                self.cx.unwrap_or(0.5 * width as f64),
                self.cy.unwrap_or(0.5 * height as f64),
            ),
            (None, Some(angle)) => CameraIntrinsics::from_fov_x(width, height, angle),
            (None, None) => Err(bad("needs camera_angle_x or fl_x".into())),
        }
    }
}

/// Loads a manifest and every image it references.
///
/// Frame paths are resolved relative to the manifest's directory; a path
/// without extension gets `.png` appended. When the manifest carries no
/// `aabb`, the bounds are the box spanned by the camera centres.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if manifest.frames.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut images = Vec::with_capacity(manifest.frames.len());
    for (i, frame) in manifest.frames.iter().enumerate() {
        let pose = Pose::from_rows(frame.transform_matrix).map_err(|e| match e {
            Error::NonRigidPose(msg) => Error::NonRigidPose(format!("frame {i}: {msg}")),
            other => other,
        })?;
        let image_path = resolve_image_path(base, &frame.file_path);
        let (width, height, pixels) = read_rgba_png(&image_path)?;
        if let (Some(w), Some(h)) = (manifest.w, manifest.h) {
            if (w, h) != (width, height) {
                return Err(Error::ImageSize {
                    path: image_path,
                    width: w,
                    height: h,
                    actual_width: width,
                    actual_height: height,
                });
            }
        }
        let intrinsics = manifest.intrinsics_for(path, width, height)?;
        if images
            .first()
            .is_some_and(|first: &PosedImage| first.intrinsics != intrinsics)
        {
            let first = &images[0].intrinsics;
            return Err(Error::ImageSize {
                path: image_path,
                width: first.width,
                height: first.height,
                actual_width: width,
                actual_height: height,
            });
        }
        images.push(PosedImage::new(intrinsics, pose, pixels)?);
    }
    let bounds = manifest.aabb.unwrap_or_else(|| camera_bounds(&images));
    Ok(Dataset { images, bounds })
}

fn resolve_image_path(base: &Path, file_path: &str) -> PathBuf {
    let p = base.join(file_path);
    if p.extension().is_none() {
        p.with_extension("png")
    } else {
        p
    }
}

fn camera_bounds(images: &[PosedImage]) -> Aabb {
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for img in images {
        let t = img.pose.translation();
        for a in 0..3 {
            min[a] = min[a].min(t[a]);
            max[a] = max[a].max(t[a]);
        }
    }
    Aabb { min, max }
}

/// Decodes an 8- or 16-bit gray/RGB/RGBA (or palette) PNG into linear RGBA.
pub fn read_rgba_png(path: &Path) -> Result<(u32, u32, Vec<[f32; 4]>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let image_err = |message: String| Error::Image {
        path: path.to_path_buf(),
        message,
    };
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| image_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| image_err(e.to_string()))?;
    let (width, height) = (info.width, info.height);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(image_err("palette not expanded".into())),
    };
    let sample = |bytes: &[u8], idx: usize| -> f64 {
        match info.bit_depth {
            png::BitDepth::Sixteen => {
                u16::from_be_bytes([bytes[2 * idx], bytes[2 * idx + 1]]) as f64 / 65535.0
            }
            _ => bytes[idx] as f64 / 255.0,
        }
    };
    if !matches!(info.bit_depth, png::BitDepth::Eight | png::BitDepth::Sixteen) {
        return Err(image_err(format!("bit depth {:?}", info.bit_depth)));
    }
    let mut pixels = Vec::with_capacity(width as usize * height as usize);
    for row in buf[..info.buffer_size()].chunks_exact(info.line_size) {
        for x in 0..width as usize {
            let base = x * channels;
            let px: [f64; 4] = match channels {
                1 => {
                    let g = sample(row, base);
                    [g, g, g, 1.0]
                }
                2 => {
                    let g = sample(row, base);
                    [g, g, g, sample(row, base + 1)]
                }
                3 => [
                    sample(row, base),
                    sample(row, base + 1),
                    sample(row, base + 2),
                    1.0,
                ],
                _ => [
                    sample(row, base),
                    sample(row, base + 1),
                    sample(row, base + 2),
                    sample(row, base + 3),
                ],
            };
            pixels.push([
                srgb::decode(px[0]) as f32,
                srgb::decode(px[1]) as f32,
                srgb::decode(px[2]) as f32,
                px[3] as f32,
            ]);
        }
    }
    Ok((width, height, pixels))
}
