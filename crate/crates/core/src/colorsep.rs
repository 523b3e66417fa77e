//! Color separation into printer materials.
//!
//! A fitted RGBA grid becomes a [`MaterialGrid`] in three passes: alpha
//! thresholding decides which voxels receive a droplet, a depth pass splits
//! solid voxels into an optional clear coat, a colored shell and a white
//! core, and the shell is halftoned by 3D vector error diffusion over the
//! opaque inks after projecting colors into the ink gamut.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CameraIntrinsics, Pose};
use crate::render::{render_image_with, RenderedImage, Sampling};
use crate::voxgrid::{read_magic, read_spec_header, write_spec_header, GridSpec, VoxelGrid};
use crate::{Error, Result, Rgb, Vec3};

pub(crate) const MATERIAL_MAGIC: &[u8; 5] = b"POXM1";

/// Per-voxel material. The discriminant is the on-disk index.
///
/// | index | material |
/// |-------|----------|
/// | 0 | Empty (no droplet) |
/// | 1 | Cyan |
/// | 2 | Magenta |
/// | 3 | Yellow |
/// | 4 | Black |
/// | 5 | White |
/// | 6 | Clear |
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum Material {
    Empty = 0,
    Cyan = 1,
    Magenta = 2,
    Yellow = 3,
    Black = 4,
    White = 5,
    Clear = 6,
}

impl Material {
    pub const INKS: [Material; 6] = [
        Material::Cyan,
        Material::Magenta,
        Material::Yellow,
        Material::Black,
        Material::White,
        Material::Clear,
    ];

    pub const ALL: [Material; 7] = [
        Material::Empty,
        Material::Cyan,
        Material::Magenta,
        Material::Yellow,
        Material::Black,
        Material::White,
        Material::Clear,
    ];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn from_index(i: u8) -> Option<Self> {
        Self::ALL.get(i as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Material::Empty => "empty",
            Material::Cyan => "cyan",
            Material::Magenta => "magenta",
            Material::Yellow => "yellow",
            Material::Black => "black",
            Material::White => "white",
            Material::Clear => "clear",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InkAppearance {
    /// Linear RGB stand-in for the cured ink's color.
    pub rgb: Rgb,
    pub opaque: bool,
}

/// Appearance proxies of the six inks.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialPalette {
    inks: [InkAppearance; 6],
}

const PROXY_SCALE: f64 = 0.9;

impl Default for MaterialPalette {
    fn default() -> Self {
        let s = PROXY_SCALE;
        let opaque = |rgb| InkAppearance { rgb, opaque: true };
        MaterialPalette {
            inks: [
                opaque([0.0, s, s]),
                opaque([s, 0.0, s]),
                opaque([s, s, 0.0]),
                opaque([0.05, 0.05, 0.05]),
                opaque([0.95, 0.95, 0.95]),
                InkAppearance {
                    rgb: [1.0, 1.0, 1.0],
                    opaque: false,
                },
            ],
        }
    }
}

impl MaterialPalette {
    /// Entries in [`Material::INKS`] order.
    pub fn new(inks: [InkAppearance; 6]) -> Result<Self> {
        let p = MaterialPalette { inks };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        for (m, ink) in Material::INKS.iter().zip(&self.inks) {
            if ink.rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Palette(format!("{} proxy {:?} outside [0, 1]", m.name(), ink.rgb)));
            }
            let should_be_opaque = *m != Material::Clear;
            if ink.opaque != should_be_opaque {
                return Err(Error::Palette(format!(
                    "{} must be {}",
                    m.name(),
                    if should_be_opaque { "opaque" } else { "transparent" }
                )));
            }
        }
        for i in 0..6 {
            for j in i + 1..6 {
                if self.inks[i].rgb == self.inks[j].rgb {
                    return Err(Error::Palette(format!(
                        "{} and {} share a proxy",
                        Material::INKS[i].name(),
                        Material::INKS[j].name()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Appearance of an ink; `None` for [`Material::Empty`].
    pub fn appearance(&self, m: Material) -> Option<&InkAppearance> {
        match m {
            Material::Empty => None,
            m => Some(&self.inks[m as usize - 1]),
        }
    }

    pub fn rgb(&self, m: Material) -> Option<Rgb> {
        self.appearance(m).map(|a| a.rgb)
    }

    /// Opaque inks with their proxies.
    pub fn opaque_inks(&self) -> impl Iterator<Item = (Material, Rgb)> + '_ {
        Material::INKS
            .iter()
            .zip(&self.inks)
            .filter(|(_, ink)| ink.opaque)
            .map(|(m, ink)| (*m, ink.rgb))
    }

    /// Palette file: a JSON object mapping ink name to
    /// `{"rgb": [r, g, b], "opaque": bool}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, InkAppearance> = serde_json::from_str(text)?;
        let mut inks = [InkAppearance {
            rgb: [0.0; 3],
            opaque: true,
        }; 6];
        let mut seen = [false; 6];
        for (name, ink) in map {
            let m = Material::from_name(&name)
                .filter(|m| *m != Material::Empty)
                .ok_or_else(|| Error::Palette(format!("unknown material {name:?}")))?;
            inks[m as usize - 1] = ink;
            seen[m as usize - 1] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Palette(format!("missing {}", Material::INKS[i].name())));
        }
        Self::new(inks)
    }

    pub fn to_json(&self) -> Result<String> {
        let map: BTreeMap<&str, InkAppearance> = Material::INKS
            .iter()
            .zip(&self.inks)
            .map(|(m, ink)| (m.name(), *ink))
            .collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// One face (vertex, edge, triangle or tetrahedron) of the candidate
/// simplices spanned by the opaque proxies, with a precomputed solver for
/// barycentric coordinates.
#[derive(Debug, Clone)]
struct Simplex {
    base: Vec3,
    edges: Vec<Vec3>,
    /// Rows map `x - base` to the non-base barycentric weights.
    solve: Vec<Vec3>,
}

impl Simplex {
    fn new(points: &[Vec3]) -> Option<Self> {
        let base = points[0];
        let edges: Vec<Vec3> = points[1..].iter().map(|p| p - base).collect();
        let k = edges.len();
        if k == 0 {
            return Some(Simplex {
                base,
                edges,
                solve: Vec::new(),
            });
        }
        // pseudo-inverse (E^T E)^-1 E^T
        let mut gram = Matrix3::zeros();
        for i in 0..k {
            for j in 0..k {
                gram[(i, j)] = edges[i].dot(&edges[j]);
            }
        }
        for i in k..3 {
            gram[(i, i)] = 1.0;
        }
        let scale = gram.amax().max(1e-300);
        if gram.determinant().abs() < 1e-12 * scale.powi(k as i32) {
            return None;
        }
        let inv = gram.try_inverse()?;
        let solve = (0..k)
            .map(|i| (0..k).fold(Vec3::zeros(), |acc, j| acc + edges[j] * inv[(i, j)]))
            .collect();
        Some(Simplex { base, edges, solve })
    }

    /// Closest point of the simplex's affine hull and whether it lies
    /// inside the simplex.
    fn project(&self, x: &Vec3) -> (Vec3, bool) {
        let d = x - self.base;
        let mut p = self.base;
        let mut rest = 1.0;
        let mut inside = true;
        for (row, e) in self.solve.iter().zip(&self.edges) {
            let l = row.dot(&d);
            inside &= l >= -1e-12;
            rest -= l;
            p += e * l;
        }
        (p, inside && rest >= -1e-12)
    }
}

/// Convex hull of the opaque ink proxies, with nearest-point projection.
///
/// Every point of the hull of `n` points in 3D lies in some tetrahedron of
/// those points, and the nearest hull point to an outside query lies in
/// some lower-dimensional face, so enumerating all subsets of at most four
/// proxies gives the exact projection.
#[derive(Debug, Clone)]
pub struct GamutHull {
    solids: Vec<Simplex>,
    faces: Vec<Simplex>,
}

impl GamutHull {
    pub fn new(palette: &MaterialPalette) -> Self {
        let pts: Vec<Vec3> = palette.opaque_inks().map(|(_, c)| Vec3::from(c)).collect();
        let n = pts.len();
        let mut solids = Vec::new();
        let mut faces = Vec::new();
        for mask in 1u32..(1 << n) {
            let subset: Vec<Vec3> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| pts[i]).collect();
            if subset.len() > 4 {
                continue;
            }
            if let Some(s) = Simplex::new(&subset) {
                if subset.len() == 4 {
                    solids.push(s);
                } else {
                    faces.push(s);
                }
            }
        }
        GamutHull { solids, faces }
    }

    pub fn contains(&self, rgb: &Rgb) -> bool {
        let x = Vec3::from(*rgb);
        self.solids.iter().any(|s| s.project(&x).1)
    }

    /// Nearest hull point; points already inside come back unchanged.
    pub fn project(&self, rgb: &Rgb) -> Rgb {
        if self.contains(rgb) {
            return *rgb;
        }
        let x = Vec3::from(*rgb);
        let mut best = (f64::INFINITY, x);
        for f in &self.faces {
            let (p, inside) = f.project(&x);
            if inside {
                let d = (p - x).norm_squared();
                if d < best.0 {
                    best = (d, p);
                }
            }
        }
        [best.1.x, best.1.y, best.1.z]
    }
}

/// Nearest point of the palette's opaque gamut to `rgb` (Euclidean, linear
/// RGB).
pub fn map_gamut(palette: &MaterialPalette, rgb: Rgb) -> Rgb {
    GamutHull::new(palette).project(&rgb)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaterialGrid {
    spec: GridSpec,
    materials: Vec<Material>,
}

impl MaterialGrid {
    pub fn new(spec: GridSpec, materials: Vec<Material>) -> Result<Self> {
        spec.validate()?;
        if materials.len() != spec.voxel_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} materials for dims {:?}",
                materials.len(),
                spec.dims
            )));
        }
        Ok(MaterialGrid { spec, materials })
    }

    pub fn filled(spec: GridSpec, m: Material) -> Result<Self> {
        Self::new(spec, vec![m; spec.voxel_count()])
    }

    pub fn from_indices(spec: GridSpec, indices: &[u8]) -> Result<Self> {
        let materials = indices
            .iter()
            .map(|&i| {
                Material::from_index(i).ok_or_else(|| Error::Corrupt {
                    what: "material grid",
                    detail: format!("material index {i}"),
                })
            })
            .collect::<Result<_>>()?;
        Self::new(spec, materials)
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn materials(&self) -> &[Material] {
        &self.materials
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> Material {
        self.materials[self.spec.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, m: Material) {
        let i = self.spec.index(x, y, z);
        self.materials[i] = m;
    }

    pub fn count(&self, m: Material) -> usize {
        self.materials.iter().filter(|&&v| v == m).count()
    }

    /// RGBA grid of ink proxies: opaque inks at alpha 1, clear at 0.1
    /// (90% transmission per sample), empty fully transparent.
    pub fn appearance_grid(&self, palette: &MaterialPalette) -> VoxelGrid {
        let voxels = self
            .materials
            .iter()
            .map(|&m| match palette.appearance(m) {
                None => [0.0; 4],
                Some(ink) => {
                    let a = if ink.opaque { 1.0 } else { CLEAR_PREVIEW_ALPHA };
                    [ink.rgb[0] as f32, ink.rgb[1] as f32, ink.rgb[2] as f32, a]
                }
            })
            .collect();
        VoxelGrid::from_voxels(self.spec, voxels).expect("palette proxies lie in [0, 1]")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(65 + self.materials.len());
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        crate::write_file_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// `POXM1` layout: the `POXV1` header with magic `POXM1`, then one
    /// material index byte per voxel, x-fastest.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MATERIAL_MAGIC)?;
        write_spec_header(w, &self.spec)?;
        let bytes: Vec<u8> = self.materials.iter().map(|m| m.index()).collect();
        w.write_all(&bytes)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        read_magic(r, MATERIAL_MAGIC, "POXM1")?;
        let spec = read_spec_header(r, "POXM1 grid")?;
        let mut raw = Vec::new();
        r.read_to_end(&mut raw).map_err(|e| Error::Corrupt {
            what: "POXM1 grid",
            detail: e.to_string(),
        })?;
        if raw.len() != spec.voxel_count() {
            return Err(Error::Corrupt {
                what: "POXM1 grid",
                detail: format!("{} payload bytes, expected {}", raw.len(), spec.voxel_count()),
            });
        }
        Self::from_indices(spec, &raw)
    }
}

const CLEAR_PREVIEW_ALPHA: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscretizeOptions {
    /// Voxels with alpha below this stay empty.
    pub alpha_threshold: f64,
    /// Colored shell thickness in voxels, counted along the axes.
    pub shell_depth: usize,
    /// Clear coat thickness in voxels over the shell; 0 disables it.
    pub clear_coat: usize,
    /// When set, error diffusion stays inside z-slabs of this many layers and
    /// slabs are halftoned in parallel.
    pub slab_layers: Option<usize>,
}

impl Default for DiscretizeOptions {
    fn default() -> Self {
        DiscretizeOptions {
            alpha_threshold: 0.5,
            shell_depth: 2,
            clear_coat: 0,
            slab_layers: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Empty,
    Coat,
    Shell,
    Core,
}

/// Error diffusion kernel as `(dx along scan, dy, dz, weight / 32)`.
/// Half the error stays in the layer (Floyd-Steinberg), half goes one layer up.
const KERNEL: [(i64, i64, i64, f64); 9] = [
    (1, 0, 0, 7.0),
    (-1, 1, 0, 3.0),
    (0, 1, 0, 5.0),
    (1, 1, 0, 1.0),
    (0, 0, 1, 8.0),
    (1, 0, 1, 2.0),
    (-1, 0, 1, 2.0),
    (0, 1, 1, 2.0),
    (0, -1, 1, 2.0),
];

/// Separates `grid` into materials. See the module docs for the passes.
///
/// Scanning is serpentine: layers bottom to top, rows by ascending y, and
/// the x direction flips on every row.
pub fn discretize(grid: &VoxelGrid, palette: &MaterialPalette, options: &DiscretizeOptions) -> Result<MaterialGrid> {
    if !(0.0..=1.0).contains(&options.alpha_threshold) {
        return Err(Error::OutOfRange(format!("alpha threshold {}", options.alpha_threshold)));
    }
    if options.slab_layers == Some(0) {
        return Err(Error::Config("slab_layers must be positive".into()));
    }
    let spec = *grid.spec();
    let roles = assign_roles(grid, options);
    let hull = GamutHull::new(palette);
    let inks: Vec<(Material, Rgb)> = palette.opaque_inks().collect();

    let nz = spec.dims[2];
    let slab = options.slab_layers.unwrap_or(nz).min(nz);
    let slabs: Vec<(usize, usize)> = (0..nz).step_by(slab).map(|z0| (z0, (z0 + slab).min(nz))).collect();
    let layer = spec.dims[0] * spec.dims[1];
    let halftone = |&(z0, z1): &(usize, usize)| halftone_slab(grid, &roles, &hull, &inks, z0, z1);
    let parts: Vec<Vec<Material>> = if slabs.len() > 1 {
        slabs.par_iter().map(halftone).collect()
    } else {
        slabs.iter().map(halftone).collect()
    };

    let mut materials = Vec::with_capacity(spec.voxel_count());
    for part in parts {
        materials.extend(part);
    }
    debug_assert_eq!(materials.len(), layer * nz);
    for (m, role) in materials.iter_mut().zip(&roles) {
        *m = match role {
            Role::Empty => Material::Empty,
            Role::Coat => Material::Clear,
            Role::Core => Material::White,
            Role::Shell => *m,
        };
    }
    MaterialGrid::new(spec, materials)
}

fn assign_roles(grid: &VoxelGrid, options: &DiscretizeOptions) -> Vec<Role> {
    let spec = grid.spec();
    let [nx, ny, nz] = spec.dims;
    let solid: Vec<bool> = grid.voxels().iter().map(|v| v[3] as f64 >= options.alpha_threshold).collect();
    let cap = options.clear_coat + options.shell_depth;
    let is_solid = |x: i64, y: i64, z: i64| {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < nx
            && (y as usize) < ny
            && (z as usize) < nz
            && solid[spec.index(x as usize, y as usize, z as usize)]
    };
    const DIRS: [(i64, i64, i64); 6] = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
    (0..spec.voxel_count())
        .map(|i| {
            if !solid[i] {
                return Role::Empty;
            }
            let [x, y, z] = spec.coords(i).map(|v| v as i64);
            // steps to the nearest non-solid voxel along any axis
            let depth = (1..=cap as i64)
                .find(|&k| DIRS.iter().any(|&(dx, dy, dz)| !is_solid(x + k * dx, y + k * dy, z + k * dz)))
                .map_or(usize::MAX, |k| k as usize);
            if depth <= options.clear_coat {
                Role::Coat
            } else if depth <= cap {
                Role::Shell
            } else {
                Role::Core
            }
        })
        .collect()
}

fn nearest_ink(inks: &[(Material, Rgb)], c: &Rgb) -> (Material, Rgb) {
    let dist = |p: &Rgb| (0..3).map(|k| (p[k] - c[k]).powi(2)).sum::<f64>();
    *inks
        .iter()
        .min_by(|a, b| dist(&a.1).total_cmp(&dist(&b.1)))
        .expect("palette has opaque inks")
}

fn halftone_slab(
    grid: &VoxelGrid,
    roles: &[Role],
    hull: &GamutHull,
    inks: &[(Material, Rgb)],
    z0: usize,
    z1: usize,
) -> Vec<Material> {
    let spec = grid.spec();
    let [nx, ny, _] = spec.dims;
    let layer = nx * ny;
    let base = z0 * layer;
    let mut out = vec![Material::Empty; (z1 - z0) * layer];
    let mut error = vec![[0.0f64; 3]; (z1 - z0) * layer];
    let mut visited = vec![false; (z1 - z0) * layer];
    let voxels = grid.voxels();
    let mut targets: Vec<(usize, f64)> = Vec::with_capacity(KERNEL.len());

    for z in z0..z1 {
        for y in 0..ny {
            let forward = (y + z) % 2 == 0;
            let dir: i64 = if forward { 1 } else { -1 };
            for step in 0..nx {
                let x = if forward { step } else { nx - 1 - step };
                let i = spec.index(x, y, z);
                let local = i - base;
                if roles[i] != Role::Shell {
                    continue;
                }
                visited[local] = true;
                let v = voxels[i];
                let wanted: Rgb = std::array::from_fn(|c| v[c] as f64 + error[local][c]);
                let wanted = hull.project(&wanted);
                let (ink, proxy) = nearest_ink(inks, &wanted);
                out[local] = ink;
                let err: Rgb = std::array::from_fn(|c| wanted[c] - proxy[c]);

                targets.clear();
                for &(dx, dy, dz, w) in &KERNEL {
                    let (tx, ty, tz) = (x as i64 + dx * dir, y as i64 + dy, z as i64 + dz);
                    if tx < 0 || ty < 0 || tx >= nx as i64 || ty >= ny as i64 || tz >= z1 as i64 {
                        continue;
                    }
                    let j = spec.index(tx as usize, ty as usize, tz as usize);
                    if roles[j] == Role::Shell && !visited[j - base] {
                        targets.push((j - base, w));
                    }
                }
                let total: f64 = targets.iter().map(|t| t.1).sum();
                for &(j, w) in &targets {
                    for c in 0..3 {
                        error[j][c] += err[c] * w / total;
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreviewOptions {
    pub step: Option<f64>,
    pub background: Rgb,
    /// Rays per pixel along each axis; the image is box-filtered down.
    pub supersample: u32,
}

impl Default for PreviewOptions {
    fn default() -> Self {
        PreviewOptions {
            step: None,
            background: crate::render::WHITE,
            supersample: 1,
        }
    }
}

/// Renders a material grid with ink proxies, nearest-voxel sampled.
pub fn preview_material_grid(
    mgrid: &MaterialGrid,
    palette: &MaterialPalette,
    intrinsics: &CameraIntrinsics,
    pose: &Pose,
    options: &PreviewOptions,
) -> Result<RenderedImage> {
    let grid = mgrid.appearance_grid(palette);
    let step = options.step.unwrap_or_else(|| crate::render::default_step(&mgrid.spec));
    let factor = options.supersample.max(1);
    let img = render_image_with(
        &grid,
        &intrinsics.scaled(factor),
        pose,
        step,
        options.background,
        Sampling::Nearest,
    )?;
    Ok(img.downsample(factor))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize) -> GridSpec {
        GridSpec::new([n, n, n], [1.0; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn palette_json_round_trip_and_validation() {
        let p = MaterialPalette::default();
        assert_eq!(MaterialPalette::from_json(&p.to_json().unwrap()).unwrap(), p);
        let mut broken: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
        broken.as_object_mut().unwrap().remove("black");
        assert!(MaterialPalette::from_json(&broken.to_string()).is_err());
        let mut dup = p.inks;
        dup[1].rgb = dup[0].rgb;
        assert!(MaterialPalette::new(dup).is_err());
        let mut clear_opaque = p.inks;
        clear_opaque[5].opaque = true;
        assert!(MaterialPalette::new(clear_opaque).is_err());
    }

    #[test]
    fn hull_vertices_and_midpoints_are_fixed() {
        let p = MaterialPalette::default();
        let w = p.rgb(Material::White).unwrap();
        assert_eq!(map_gamut(&p, w), w);
        let c = p.rgb(Material::Cyan).unwrap();
        let m = p.rgb(Material::Magenta).unwrap();
        let mid = std::array::from_fn(|k| 0.5 * (c[k] + m[k]));
        assert_eq!(map_gamut(&p, mid), mid);
    }

    #[test]
    fn projection_is_idempotent() {
        let p = MaterialPalette::default();
        let hull = GamutHull::new(&p);
        for rgb in [[1.2, -0.1, 0.5], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0], [-1.0, 2.0, 0.3]] {
            let once = hull.project(&rgb);
            assert_eq!(hull.project(&once), once);
        }
    }

    #[test]
    fn transparent_grid_is_all_empty() {
        let g = VoxelGrid::new(spec(4), [0.3; 3], 0.1).unwrap();
        let m = discretize(&g, &MaterialPalette::default(), &DiscretizeOptions::default()).unwrap();
        assert_eq!(m.count(Material::Empty), 64);
    }

    #[test]
    fn white_block_stays_white() {
        let p = MaterialPalette::default();
        let g = VoxelGrid::new(spec(8), p.rgb(Material::White).unwrap(), 1.0).unwrap();
        let m = discretize(&g, &p, &DiscretizeOptions::default()).unwrap();
        assert_eq!(m.count(Material::White), 512);
    }

    #[test]
    fn roles_by_depth() {
        let g = VoxelGrid::new(spec(9), [0.5; 3], 1.0).unwrap();
        let opts = DiscretizeOptions {
            clear_coat: 1,
            shell_depth: 2,
            ..DiscretizeOptions::default()
        };
        let roles = assign_roles(&g, &opts);
        let s = spec(9);
        assert_eq!(roles[s.index(0, 4, 4)], Role::Coat);
        assert_eq!(roles[s.index(1, 4, 4)], Role::Shell);
        assert_eq!(roles[s.index(2, 4, 4)], Role::Shell);
        assert_eq!(roles[s.index(3, 4, 4)], Role::Core);
        assert_eq!(roles[s.index(4, 4, 4)], Role::Core);
        let m = discretize(&g, &MaterialPalette::default(), &opts).unwrap();
        assert_eq!(m.count(Material::Clear), 9 * 9 * 9 - 7 * 7 * 7);
        assert!(m.count(Material::White) >= 3 * 3 * 3);
    }

    #[test]
    fn no_solid_voxel_left_empty_and_no_empty_filled() {
        let mut g = VoxelGrid::empty(spec(6)).unwrap();
        for i in 0..6 {
            g.set(i, i, i, [0.8, 0.1, 0.4, 0.9]).unwrap();
            g.set(i, 5 - i, 2, [0.1, 0.5, 0.4, 0.6]).unwrap();
        }
        let m = discretize(&g, &MaterialPalette::default(), &DiscretizeOptions::default()).unwrap();
        for (v, mat) in g.voxels().iter().zip(m.materials()) {
            assert_eq!(v[3] >= 0.5, *mat != Material::Empty);
        }
    }

    #[test]
    fn slab_mode_is_deterministic() {
        let mut g = VoxelGrid::empty(spec(12)).unwrap();
        for (i, v) in g.voxels_mut().iter_mut().enumerate() {
            *v = [(i % 7) as f32 / 7.0, (i % 5) as f32 / 5.0, (i % 3) as f32 / 3.0, 1.0];
        }
        let opts = DiscretizeOptions {
            slab_layers: Some(4),
            ..DiscretizeOptions::default()
        };
        let a = discretize(&g, &MaterialPalette::default(), &opts).unwrap();
        let b = discretize(&g, &MaterialPalette::default(), &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_indices_and_magic_rejected() {
        assert!(MaterialGrid::from_indices(spec(1), &[7]).is_err());
        assert!(matches!(
            MaterialGrid::read_from(&mut &b"POXV1...."[..]),
            Err(Error::BadMagic("POXM1"))
        ));
    }

    #[test]
    fn poxm_round_trip() {
        let mut m = MaterialGrid::filled(spec(3), Material::Empty).unwrap();
        m.set(1, 2, 0, Material::Cyan);
        m.set(2, 2, 2, Material::Clear);
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..5], b"POXM1");
        assert_eq!(buf.len(), 5 + 12 + 48 + 27);
        assert_eq!(MaterialGrid::read_from(&mut buf.as_slice()).unwrap(), m);
    }

    fn proxies(p: &MaterialPalette) -> Vec<Rgb> {
        p.opaque_inks().map(|(_, c)| c).collect()
    }

    /// Convex combinations of the proxies on a barycentric lattice.
    fn hull_samples(p: &MaterialPalette, steps: usize) -> Vec<Rgb> {
        let v = proxies(p);
        let mut out = Vec::new();
        let mut w = vec![0usize; v.len()];
        fn rec(k: usize, left: usize, w: &mut Vec<usize>, v: &[Rgb], steps: usize, out: &mut Vec<Rgb>) {
            if k == v.len() - 1 {
                w[k] = left;
                let mut c = [0.0; 3];
                for (wi, vi) in w.iter().zip(v) {
                    for a in 0..3 {
                        c[a] += *wi as f64 / steps as f64 * vi[a];
                    }
                }
                out.push(c);
                return;
            }
            for take in 0..=left {
                w[k] = take;
                rec(k + 1, left - take, w, v, steps, out);
            }
        }
        rec(0, steps, &mut w, &v, steps, &mut out);
        out
    }

    #[test]
    fn projection_matches_brute_force_hull_sampling() {
        let p = MaterialPalette::default();
        let hull = GamutHull::new(&p);
        let samples = hull_samples(&p, 24);
        let dist = |a: &Rgb, b: &Rgb| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt();
        for q in [[1.2, -0.1, 0.5], [1.0, 1.0, 1.0], [0.0, 0.0, 0.9], [0.5, 0.5, -0.3], [0.02, 0.9, 0.02]] {
            let proj = hull.project(&q);
            let brute = samples.iter().map(|s| dist(s, &q)).fold(f64::INFINITY, f64::min);
            let d = dist(&proj, &q);
            // lattice spacing bounds how far the sampled optimum can trail
            assert!(d <= brute + 1e-9, "{q:?}: {d} vs {brute}");
            assert!(d >= brute - 0.05, "{q:?}: {d} vs {brute}");
            assert!(hull.contains(&proj) || samples.iter().any(|s| dist(s, &proj) < 0.05));
        }
    }

    #[test]
    fn half_cyan_half_magenta_block_splits_evenly() {
        let p = MaterialPalette::default();
        let (c, m) = (p.rgb(Material::Cyan).unwrap(), p.rgb(Material::Magenta).unwrap());
        let mix = std::array::from_fn(|k| 0.5 * (c[k] + m[k]));
        let g = VoxelGrid::new(spec(12), mix, 1.0).unwrap();
        let out = discretize(&g, &p, &DiscretizeOptions::default()).unwrap();
        let (nc, nm) = (out.count(Material::Cyan) as f64, out.count(Material::Magenta) as f64);
        assert!((nc - nm).abs() <= 0.1 * nc.max(nm), "{nc} cyan vs {nm} magenta");
        assert_eq!(out.count(Material::White), 8 * 8 * 8);
    }

    fn shell_mean(out: &MaterialGrid, p: &MaterialPalette) -> Rgb {
        let mut sum = [0.0; 3];
        let mut n = 0.0;
        let [nx, ny, nz] = out.spec().dims;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let depth = [x, nx - 1 - x, y, ny - 1 - y, z, nz - 1 - z].into_iter().min().unwrap();
                    if depth < 2 {
                        let c = p.rgb(out.get(x, y, z)).unwrap();
                        (0..3).for_each(|k| sum[k] += c[k]);
                        n += 1.0;
                    }
                }
            }
        }
        sum.map(|s| s / n)
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn in_gamut_block_mean_is_preserved(w in proptest::collection::vec(0.0f64..1.0, 5)) {
            let p = MaterialPalette::default();
            let total: f64 = w.iter().sum::<f64>().max(1e-9);
            let v = proxies(&p);
            let color: Rgb = std::array::from_fn(|k| w.iter().zip(&v).map(|(wi, vi)| wi * vi[k]).sum::<f64>() / total);
            let g = VoxelGrid::new(spec(12), color, 1.0).unwrap();
            let out = discretize(&g, &p, &DiscretizeOptions::default()).unwrap();
            let mean = shell_mean(&out, &p);
            for k in 0..3 {
                proptest::prop_assert!((mean[k] - color[k] as f32 as f64).abs() <= 0.1, "{:?} vs {:?}", mean, color);
            }
        }
    }
}
