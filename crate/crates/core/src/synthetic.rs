//! Analytic scenes for generating ground-truth views.
//!
//! [`CubeScene`] is an axis-aligned Lambertian cube whose opposite faces share
//! one of three albedos, lit by a directional light plus ambient term. Its
//! radiance depends only on the face normal, so it is representable by a
//! view-independent grid.

use std::path::Path;

use crate::dataset::{generate_ray, Aabb, CameraIntrinsics, Manifest, ManifestFrame, Pose, PosedImage, Ray};
use crate::{srgb, Error, Result, Rgb, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CubeScene {
    pub center: Vec3,
    pub half_size: f64,
    /// Albedo of the x, y and z face pairs.
    pub albedo: [Rgb; 3],
    /// Unit direction towards the light.
    pub light: Vec3,
    pub ambient: f64,
}

impl Default for CubeScene {
    fn default() -> Self {
        CubeScene {
            center: Vec3::zeros(),
            half_size: 1.0,
            albedo: [[0.85, 0.2, 0.15], [0.2, 0.75, 0.3], [0.15, 0.3, 0.9]],
            light: Vec3::new(0.3, 0.5, 0.8).normalize(),
            ambient: 0.35,
        }
    }
}

impl CubeScene {
    pub fn bounds(&self) -> Aabb {
        let h = self.half_size;
        Aabb {
            min: [self.center.x - h, self.center.y - h, self.center.z - h],
            max: [self.center.x + h, self.center.y + h, self.center.z + h],
        }
    }

    /// Radiance leaving a face with outward normal along `axis` (sign `sign`).
    pub fn face_radiance(&self, axis: usize, sign: f64) -> Rgb {
        let lambert = (sign * self.light[axis]).max(0.0);
        let shade = self.ambient + (1.0 - self.ambient) * lambert;
        self.albedo[axis].map(|a| a * shade)
    }

    /// Radiance where `ray` first hits the cube, or `None` on a miss.
    pub fn trace(&self, ray: &Ray) -> Option<Rgb> {
        let b = self.bounds();
        let (t0, _) = b.clip(ray)?;
        let p = ray.at(t0);
        // the entry face is the axis whose slab boundary we are closest to
        let mut best = (f64::INFINITY, 0usize, 1.0);
        for axis in 0..3 {
            let d = (p[axis] - self.center[axis]).abs();
            let gap = (d - self.half_size).abs();
            if gap < best.0 {
                let sign = if p[axis] >= self.center[axis] { 1.0 } else { -1.0 };
                best = (gap, axis, sign);
            }
        }
        Some(self.face_radiance(best.1, best.2))
    }

    /// Ground-truth view from `supersample`² rays per pixel: alpha is the
    /// fraction of rays that hit the cube and RGB their mean radiance, so
    /// compositing over a background gives the pixel's area average.
    pub fn render_view(&self, intrinsics: &CameraIntrinsics, pose: &Pose, supersample: u32) -> Result<PosedImage> {
        let s = supersample.max(1);
        let fine = intrinsics.scaled(s);
        let mut pixels = Vec::with_capacity((intrinsics.width * intrinsics.height) as usize);
        for py in 0..intrinsics.height {
            for px in 0..intrinsics.width {
                let mut sum = [0.0; 3];
                let mut hits = 0u32;
                for sy in 0..s {
                    for sx in 0..s {
                        let ray = generate_ray(&fine, pose, px * s + sx, py * s + sy)?;
                        if let Some(c) = self.trace(&ray) {
                            (0..3).for_each(|k| sum[k] += c[k]);
                            hits += 1;
                        }
                    }
                }
                pixels.push(if hits == 0 {
                    [0.0; 4]
                } else {
                    let h = hits as f64;
                    [
                        (sum[0] / h) as f32,
                        (sum[1] / h) as f32,
                        (sum[2] / h) as f32,
                        (h / (s * s) as f64) as f32,
                    ]
                });
            }
        }
        PosedImage::new(*intrinsics, *pose, pixels)
    }
}

/// `count` camera positions spread over a sphere (Fibonacci lattice), all
/// looking at `target`.
pub fn orbit_poses(count: usize, radius: f64, target: Vec3) -> Result<Vec<Pose>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) * 2.0 / count as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            let eye = target + radius * Vec3::new(r * phi.cos(), r * phi.sin(), z);
            Pose::look_at(eye, target, Vec3::z())
        })
        .collect()
}

/// Renders `poses` of `scene` with shared intrinsics.
pub fn render_views(
    scene: &CubeScene,
    intrinsics: &CameraIntrinsics,
    poses: &[Pose],
    supersample: u32,
) -> Result<Vec<PosedImage>> {
    poses.iter().map(|p| scene.render_view(intrinsics, p, supersample)).collect()
}

/// Writes `views` as 8-bit sRGB RGBA PNGs plus a `transforms.json`
/// manifest into `dir`. Returns the manifest path.
pub fn write_dataset(dir: &Path, views: &[PosedImage], bounds: Option<Aabb>) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let first = views.first().ok_or(Error::EmptyDataset)?;
    let k = first.intrinsics;
    let mut frames = Vec::with_capacity(views.len());
    for (i, view) in views.iter().enumerate() {
        let name = format!("view_{i:03}.png");
        let data: Vec<u8> = view
            .pixels()
            .iter()
            .flat_map(|p| {
                [
                    srgb::encode_u8(p[0] as f64),
                    srgb::encode_u8(p[1] as f64),
                    srgb::encode_u8(p[2] as f64),
                    (p[3].clamp(0.0, 1.0) * 255.0).round() as u8,
                ]
            })
            .collect();
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, view.width(), view.height());
            enc.set_color(png::ColorType::Rgba);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header()?;
            w.write_image_data(&data)?;
            w.finish()?;
        }
        let path = dir.join(&name);
        std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        frames.push(ManifestFrame {
            file_path: name,
            transform_matrix: view.pose.rows(),
        });
    }
    let manifest = Manifest {
        fl_x: Some(k.fx),
        fl_y: Some(k.fy),
        cx: Some(k.cx),
        cy: Some(k.cy),
        w: Some(k.width),
        h: Some(k.height),
        aabb: bounds,
        frames,
        ..Manifest::default()
    };
    let path = dir.join("transforms.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn opposite_faces_share_albedo_but_not_shading() {
        let s = CubeScene::default();
        let top = s.face_radiance(2, 1.0);
        let bottom = s.face_radiance(2, -1.0);
        assert!(top[2] > bottom[2]);
        assert_eq!(bottom, s.albedo[2].map(|a| a * s.ambient));
    }

    #[test]
    fn trace_hits_the_facing_side() {
        let s = CubeScene::default();
        let ray = Ray::new(Vec3::new(0.2, 0.1, 5.0), Vec3::new(0.0, 0.0, -1.0));
        assert_eq!(s.trace(&ray), Some(s.face_radiance(2, 1.0)));
        let ray = Ray::new(Vec3::new(-5.0, 0.3, -0.2), Vec3::x());
        assert_eq!(s.trace(&ray), Some(s.face_radiance(0, -1.0)));
        let miss = Ray::new(Vec3::new(3.0, 3.0, 5.0), Vec3::new(0.0, 0.0, -1.0));
        assert_eq!(s.trace(&miss), None);
    }

    #[test]
    fn supersampled_edge_pixels_are_partial() {
        let s = CubeScene::default();
        let k = CameraIntrinsics::from_fov_x(33, 33, 0.8).unwrap();
        let pose = Pose::look_at(Vec3::new(0.0, 0.0, 5.0), Vec3::zeros(), Vec3::y()).unwrap();
        let hard = s.render_view(&k, &pose, 1).unwrap();
        let soft = s.render_view(&k, &pose, 4).unwrap();
        assert!(hard.pixels().iter().all(|p| p[3] == 0.0 || p[3] == 1.0));
        let partial = soft.pixels().iter().filter(|p| p[3] > 0.0 && p[3] < 1.0).count();
        assert!(partial > 0);
        // centre pixel is fully covered either way
        assert_eq!(soft.pixel(16, 16), hard.pixel(16, 16));
        let coverage = |img: &PosedImage| img.pixels().iter().map(|p| p[3] as f64).sum::<f64>();
        // the two differ only where a pixel is partly covered
        assert!((coverage(&hard) - coverage(&soft)).abs() <= partial as f64);
    }

    #[test]
    fn orbit_cameras_look_at_target() {
        let poses = orbit_poses(20, 4.0, Vec3::zeros()).unwrap();
        assert_eq!(poses.len(), 20);
        let k = CameraIntrinsics::from_fov_x(9, 9, 0.8).unwrap();
        for p in &poses {
            assert!((p.translation().norm() - 4.0).abs() < 1e-9);
            let ray = generate_ray(&k, p, 4, 4).unwrap();
            let to_target = (-p.translation()).normalize();
            assert!((ray.direction - to_target).norm() < 1e-9);
        }
    }
}
