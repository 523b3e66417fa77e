//! Anisotropic dense RGBA voxel grid.
//!
//! Voxels are stored x-fastest, then y, then z. Voxel `(i, j, k)` is centred
//! at `origin + ((i, j, k) + 0.5) * pitch`, so continuous grid coordinates
//! place voxel centres on integers.
//!
//! Sampling is trilinear between voxel centres. Inside the grid box but
//! beyond the outermost centres the nearest edge voxels are used; outside the
//! box every sample is transparent black.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Aabb;
use crate::{Error, Result, Rgb, Rgba, Vec3};

/// 600 dpi droplet pitch along x.
pub const PITCH_X_MM: f64 = 25.4 / 600.0;
/// 300 dpi droplet pitch along y.
pub const PITCH_Y_MM: f64 = 25.4 / 300.0;
/// Layer thickness along z.
pub const PITCH_Z_MM: f64 = 0.014;

pub const DEFAULT_PITCH_MM: [f64; 3] = [PITCH_X_MM, PITCH_Y_MM, PITCH_Z_MM];

pub(crate) const GRID_MAGIC: &[u8; 5] = b"POXV1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Voxel counts `[nx, ny, nz]`.
    pub dims: [usize; 3],
    /// Physical voxel size per axis in mm.
    pub pitch: [f64; 3],
    /// Minimum corner in mm.
    pub origin: [f64; 3],
}

impl GridSpec {
    pub fn new(dims: [usize; 3], pitch: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let spec = GridSpec {
            dims,
            pitch,
            origin,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Printer-native pitches: 600 x 300 dpi with 14 µm layers.
    pub fn with_default_pitch(dims: [usize; 3], origin: [f64; 3]) -> Result<Self> {
        Self::new(dims, DEFAULT_PITCH_MM, origin)
    }

    /// Grid of `dims` voxels centred on `center`.
    pub fn centered(dims: [usize; 3], pitch: [f64; 3], center: Vec3) -> Result<Self> {
        let origin = std::array::from_fn(|a| center[a] - 0.5 * dims[a] as f64 * pitch[a]);
        Self::new(dims, pitch, origin)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::GridSpec(format!(
                "voxel counts must be positive, got {:?}",
                self.dims
            )));
        }
        if self.dims.iter().any(|&n| n > u32::MAX as usize) {
            return Err(Error::GridSpec(format!("voxel counts {:?} too large", self.dims)));
        }
        if self.pitch.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::GridSpec(format!(
                "pitches must be positive, got {:?}",
                self.pitch
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::GridSpec(format!("origin {:?}", self.origin)));
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    /// Physical size `dims * pitch` in mm.
    pub fn extent(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.dims[a] as f64 * self.pitch[a])
    }

    pub fn bounds(&self) -> Aabb {
        let e = self.extent();
        Aabb {
            min: self.origin,
            max: std::array::from_fn(|a| self.origin[a] + e[a]),
        }
    }

    pub fn min_pitch(&self) -> f64 {
        self.pitch.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let c = [x, y, z];
        Vec3::from_fn(|a, _| self.origin[a] + (c[a] as f64 + 0.5) * self.pitch[a])
    }
}

/// Continuous grid coordinates of a point; voxel centres sit on integers.
#[inline]
pub fn world_to_grid(spec: &GridSpec, p: &Vec3) -> [f64; 3] {
    std::array::from_fn(|a| (p[a] - spec.origin[a]) / spec.pitch[a] - 0.5)
}

/// The eight voxels and weights that trilinear sampling at a point touches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub indices: [usize; 8],
    pub weights: [f64; 8],
}

#[inline]
fn axis_weights(g: f64, n: usize) -> (usize, usize, f64) {
    let g = g.clamp(0.0, (n - 1) as f64);
    let i0 = (g.floor() as usize).min(n.saturating_sub(2));
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, g - i0 as f64)
}

/// Trilinear stencil at `p`, or `None` outside the grid box.
#[inline]
pub fn trilinear_stencil(spec: &GridSpec, p: &Vec3) -> Option<Stencil> {
    let g = world_to_grid(spec, p);
    for a in 0..3 {
        let upper = spec.dims[a] as f64 - 0.5;
        if !(g[a] >= -0.5 && g[a] <= upper) {
            return None;
        }
    }
    let (x0, x1, fx) = axis_weights(g[0], spec.dims[0]);
    let (y0, y1, fy) = axis_weights(g[1], spec.dims[1]);
    let (z0, z1, fz) = axis_weights(g[2], spec.dims[2]);
    let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
    Some(Stencil {
        indices: [
            spec.index(x0, y0, z0),
            spec.index(x1, y0, z0),
            spec.index(x0, y1, z0),
            spec.index(x1, y1, z0),
            spec.index(x0, y0, z1),
            spec.index(x1, y0, z1),
            spec.index(x0, y1, z1),
            spec.index(x1, y1, z1),
        ],
        weights: [
            gx * gy * gz,
            fx * gy * gz,
            gx * fy * gz,
            fx * fy * gz,
            gx * gy * fz,
            fx * gy * fz,
            gx * fy * fz,
            fx * fy * fz,
        ],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    spec: GridSpec,
    voxels: Vec<[f32; 4]>,
}

fn check_unit(what: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::OutOfRange(format!("{what} = {v}, expected [0, 1]")))
    }
}

impl VoxelGrid {
    /// Grid with every voxel set to `(init_rgb, init_alpha)`.
    pub fn new(spec: GridSpec, init_rgb: Rgb, init_alpha: f64) -> Result<Self> {
        spec.validate()?;
        for (c, v) in init_rgb.iter().enumerate() {
            check_unit(&format!("init rgb[{c}]"), *v)?;
        }
        check_unit("init alpha", init_alpha)?;
        let v = [
            init_rgb[0] as f32,
            init_rgb[1] as f32,
            init_rgb[2] as f32,
            init_alpha as f32,
        ];
        Ok(VoxelGrid {
            spec,
            voxels: vec![v; spec.voxel_count()],
        })
    }

    /// Fully transparent black grid.
    pub fn empty(spec: GridSpec) -> Result<Self> {
        Self::new(spec, [0.0; 3], 0.0)
    }

    pub fn from_voxels(spec: GridSpec, voxels: Vec<[f32; 4]>) -> Result<Self> {
        spec.validate()?;
        if voxels.len() != spec.voxel_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} voxels for dims {:?}",
                voxels.len(),
                spec.dims
            )));
        }
        if let Some((i, v)) = voxels
            .iter()
            .enumerate()
            .find(|(_, v)| v.iter().any(|c| !(0.0..=1.0).contains(c)))
        {
            return Err(Error::OutOfRange(format!("voxel {i} = {v:?}")));
        }
        Ok(VoxelGrid { spec, voxels })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn voxels(&self) -> &[[f32; 4]] {
        &self.voxels
    }

    /// Mutable voxel access for in-crate passes that keep values in `[0, 1]`.
    pub(crate) fn voxels_mut(&mut self) -> &mut [[f32; 4]] {
        &mut self.voxels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> [f32; 4] {
        self.voxels[self.spec.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, rgba: [f32; 4]) -> Result<()> {
        if rgba.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::OutOfRange(format!("voxel value {rgba:?}")));
        }
        let i = self.spec.index(x, y, z);
        self.voxels[i] = rgba;
        Ok(())
    }

    /// Trilinear RGBA at `p`; transparent black outside the grid box.
    #[inline]
    pub fn sample_trilinear(&self, p: &Vec3) -> Rgba {
        match trilinear_stencil(&self.spec, p) {
            Some(st) => self.sample_stencil(&st),
            None => [0.0; 4],
        }
    }

    #[inline]
    pub fn sample_stencil(&self, st: &Stencil) -> Rgba {
        let mut out = [0.0; 4];
        for (&i, &w) in st.indices.iter().zip(&st.weights) {
            let v = &self.voxels[i];
            for c in 0..4 {
                out[c] += w * v[c] as f64;
            }
        }
        out
    }

    /// RGBA of the voxel containing `p`; transparent black outside.
    pub fn sample_nearest(&self, p: &Vec3) -> Rgba {
        let g = world_to_grid(&self.spec, p);
        let mut c = [0usize; 3];
        for a in 0..3 {
            let i = (g[a] + 0.5).floor();
            if !(i >= 0.0 && i < self.spec.dims[a] as f64) {
                return [0.0; 4];
            }
            c[a] = i as usize;
        }
        let v = self.get(c[0], c[1], c[2]);
        v.map(|x| x as f64)
    }

    /// Channel-wise mean over all voxels.
    pub fn mean(&self) -> Rgba {
        let mut sum = [0.0f64; 4];
        for v in &self.voxels {
            for c in 0..4 {
                sum[c] += v[c] as f64;
            }
        }
        sum.map(|s| s / self.voxels.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(53 + 16 * self.voxels.len());
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        crate::write_file_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// `POXV1` layout: magic, three u32 counts, three f64 pitches, three f64
    /// origin coordinates, then RGBA as f32, all little-endian, x-fastest.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(GRID_MAGIC)?;
        write_spec_header(w, &self.spec)?;
        for v in &self.voxels {
            for c in v {
                w.write_all(&c.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        read_magic(r, GRID_MAGIC, "POXV1")?;
        let spec = read_spec_header(r, "POXV1 grid")?;
        let mut raw = Vec::new();
        r.read_to_end(&mut raw).map_err(|e| corrupt("POXV1 grid", e))?;
        let expected = spec.voxel_count() * 16;
        if raw.len() != expected {
            return Err(Error::Corrupt {
                what: "POXV1 grid",
                detail: format!("{} payload bytes, expected {expected}", raw.len()),
            });
        }
        let voxels = raw
            .chunks_exact(16)
            .map(|c| std::array::from_fn(|k| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().unwrap())))
            .collect();
        Self::from_voxels(spec, voxels)
    }
}

fn corrupt(what: &'static str, e: impl std::fmt::Display) -> Error {
    Error::Corrupt {
        what,
        detail: e.to_string(),
    }
}

pub(crate) fn read_magic<R: Read>(r: &mut R, magic: &[u8; 5], name: &'static str) -> Result<()> {
    let mut got = [0u8; 5];
    match r.read_exact(&mut got) {
        Ok(()) if &got == magic => Ok(()),
        _ => Err(Error::BadMagic(name)),
    }
}

pub(crate) fn write_spec_header<W: Write>(w: &mut W, spec: &GridSpec) -> std::io::Result<()> {
    for n in spec.dims {
        w.write_all(&(n as u32).to_le_bytes())?;
    }
    for p in spec.pitch.iter().chain(&spec.origin) {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_spec_header<R: Read>(r: &mut R, what: &'static str) -> Result<GridSpec> {
    let mut head = [0u8; 12 + 48];
    r.read_exact(&mut head).map_err(|e| corrupt(what, e))?;
    let dims = std::array::from_fn(|a| {
        u32::from_le_bytes(head[4 * a..4 * a + 4].try_into().unwrap()) as usize
    });
    let f = |k: usize| f64::from_le_bytes(head[12 + 8 * k..20 + 8 * k].try_into().unwrap());
    let spec = GridSpec {
        dims,
        pitch: [f(0), f(1), f(2)],
        origin: [f(3), f(4), f(5)],
    };
    spec.validate().map_err(|e| corrupt(what, e))?;
    Ok(spec)
}

/// Dense per-voxel RGBA gradient accumulator.
///
/// Tracks which voxels were touched so that merging and clearing cost is
/// proportional to the touched set rather than the grid size.
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    grads: Vec<[f64; 4]>,
    touched: Vec<u32>,
    marked: Vec<bool>,
}

impl GradAccumulator {
    pub fn new(voxel_count: usize) -> Self {
        GradAccumulator {
            grads: vec![[0.0; 4]; voxel_count],
            touched: Vec::new(),
            marked: vec![false; voxel_count],
        }
    }

    pub fn grads(&self) -> &[[f64; 4]] {
        &self.grads
    }

    #[inline]
    pub fn add(&mut self, index: usize, g: &[f64; 4], weight: f64) {
        if !self.marked[index] {
            self.marked[index] = true;
            self.touched.push(index as u32);
        }
        let slot = &mut self.grads[index];
        for c in 0..4 {
            slot[c] += weight * g[c];
        }
    }

    /// Adds the touched entries into `total` in first-touch order and
    /// resets this accumulator.
    pub fn drain_into(&mut self, total: &mut [[f64; 4]]) {
        for &i in &self.touched {
            let i = i as usize;
            for c in 0..4 {
                total[i][c] += self.grads[i][c];
            }
            self.grads[i] = [0.0; 4];
            self.marked[i] = false;
        }
        self.touched.clear();
    }

    pub fn clear(&mut self) {
        for &i in &self.touched {
            self.grads[i as usize] = [0.0; 4];
            self.marked[i as usize] = false;
        }
        self.touched.clear();
    }
}

/// Adjoint of [`VoxelGrid::sample_trilinear`]: adds `upstream` to the eight
/// neighbours of `p` with the sampling weights.
#[inline]
pub fn scatter_gradient(acc: &mut GradAccumulator, spec: &GridSpec, p: &Vec3, upstream: &Rgba) {
    if let Some(st) = trilinear_stencil(spec, p) {
        scatter_stencil(acc, &st, upstream);
    }
}

#[inline]
pub fn scatter_stencil(acc: &mut GradAccumulator, st: &Stencil, upstream: &Rgba) {
    for (&i, &w) in st.indices.iter().zip(&st.weights) {
        if w != 0.0 {
            acc.add(i, upstream, w);
        }
    }
}

/// Clears voxels with alpha below `alpha_threshold`, then everything outside
/// the largest 26-connected component of the survivors.
pub fn prune_background(grid: &VoxelGrid, alpha_threshold: f64) -> Result<VoxelGrid> {
    check_unit("alpha threshold", alpha_threshold)?;
    let spec = grid.spec;
    let n = spec.voxel_count();
    let alive: Vec<bool> = grid
        .voxels
        .iter()
        .map(|v| v[3] as f64 >= alpha_threshold)
        .collect();

    let mut label = vec![u32::MAX; n];
    let mut best: Option<(u32, usize)> = None;
    let mut queue = VecDeque::new();
    let mut next = 0u32;
    for seed in 0..n {
        if !alive[seed] || label[seed] != u32::MAX {
            continue;
        }
        let id = next;
        next += 1;
        label[seed] = id;
        queue.push_back(seed);
        let mut size = 0usize;
        while let Some(i) = queue.pop_front() {
            size += 1;
            for j in neighbours26(&spec, i) {
                if alive[j] && label[j] == u32::MAX {
                    label[j] = id;
                    queue.push_back(j);
                }
            }
        }
        // ties go to the component found first in storage order
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((id, size));
        }
    }

    let keep = best.map(|(id, _)| id);
    let voxels = grid
        .voxels
        .iter()
        .zip(&label)
        .map(|(v, &l)| if Some(l) == keep { *v } else { [0.0; 4] })
        .collect();
    Ok(VoxelGrid { spec, voxels })
}

fn neighbours26(spec: &GridSpec, index: usize) -> impl Iterator<Item = usize> + '_ {
    let [x, y, z] = spec.coords(index);
    let [nx, ny, nz] = spec.dims;
    (-1i64..=1)
        .flat_map(|dz| (-1i64..=1).flat_map(move |dy| (-1i64..=1).map(move |dx| (dx, dy, dz))))
        .filter(|&d| d != (0, 0, 0))
        .filter_map(move |(dx, dy, dz)| {
            let (a, b, c) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
            (a >= 0 && b >= 0 && c >= 0 && a < nx as i64 && b < ny as i64 && c < nz as i64)
                .then(|| spec.index(a as usize, b as usize, c as usize))
        })
}
