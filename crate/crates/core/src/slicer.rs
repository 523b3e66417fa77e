//! Layer rasters for multi-material jetting.
//!
//! A [`MaterialGrid`] is cut along z into one raster per layer, bottom to
//! top. Raster rows run along y and columns along x, both ascending, so a
//! layer's row-major data is exactly the grid's x-fastest z plane.
//!
//! On disk a stack is a directory of 8-bit indexed PNGs named
//! `layer_00000.png`, `layer_00001.png`, ... whose pixel values are material
//! indices, plus a `manifest.json`:
//!
//! ```json
//! {
//!   "dims": [nx, ny, nz],
//!   "pitch_mm": [px, py, pz],
//!   "origin_mm": [ox, oy, oz],
//!   "dimensions_mm": [nx*px, ny*py, nz*pz],
//!   "layer_count": nz,
//!   "layer_height_mm": pz,
//!   "layer_file_pattern": "layer_%05d.png",
//!   "raster_order": "row = y ascending, column = x ascending",
//!   "materials": [{"index": 0, "name": "empty", "rgb": null, "opaque": false, "display_rgba": [0, 0, 0, 0]}, ...]
//! }
//! ```

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::colorsep::{Material, MaterialGrid, MaterialPalette};
use crate::voxgrid::GridSpec;
use crate::{srgb, Error, Result, Rgb};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LAYER_FILE_PATTERN: &str = "layer_%05d.png";
const RASTER_ORDER: &str = "row = y ascending, column = x ascending";
const CLEAR_DISPLAY_ALPHA: u8 = 64;

pub fn layer_file_name(k: usize) -> String {
    format!("layer_{k:05}.png")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialEntry {
    pub index: u8,
    pub name: String,
    /// Linear RGB appearance proxy; absent for empty.
    pub rgb: Option<Rgb>,
    pub opaque: bool,
    /// sRGB color and alpha written to the PNG palette.
    pub display_rgba: [u8; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceManifest {
    pub dims: [usize; 3],
    pub pitch_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub dimensions_mm: [f64; 3],
    pub layer_count: usize,
    pub layer_height_mm: f64,
    pub layer_file_pattern: String,
    pub raster_order: String,
    pub materials: Vec<MaterialEntry>,
}

impl SliceManifest {
    pub fn new(spec: &GridSpec, palette: &MaterialPalette) -> Self {
        let materials = Material::ALL
            .iter()
            .map(|&m| {
                let ink = palette.appearance(m);
                let display_rgba = match ink {
                    None => [0; 4],
                    Some(ink) => {
                        let [r, g, b] = ink.rgb.map(srgb::encode_u8);
                        [r, g, b, if ink.opaque { 255 } else { CLEAR_DISPLAY_ALPHA }]
                    }
                };
                MaterialEntry {
                    index: m.index(),
                    name: m.name().to_string(),
                    rgb: ink.map(|i| i.rgb),
                    opaque: ink.is_some_and(|i| i.opaque),
                    display_rgba,
                }
            })
            .collect();
        SliceManifest {
            dims: spec.dims,
            pitch_mm: spec.pitch,
            origin_mm: spec.origin,
            dimensions_mm: spec.extent(),
            layer_count: spec.dims[2],
            layer_height_mm: spec.pitch[2],
            layer_file_pattern: LAYER_FILE_PATTERN.to_string(),
            raster_order: RASTER_ORDER.to_string(),
            materials,
        }
    }

    pub fn spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.dims, self.pitch_mm, self.origin_mm)
    }

    fn validate(&self) -> Result<()> {
        let spec = self.spec()?;
        let bad = |m: String| Err(Error::Stack(m));
        if self.layer_count != self.dims[2] {
            return bad(format!("layer_count {} but nz {}", self.layer_count, self.dims[2]));
        }
        if self.layer_height_mm != self.pitch_mm[2] {
            return bad(format!("layer height {} but pitch_z {}", self.layer_height_mm, self.pitch_mm[2]));
        }
        let extent = spec.extent();
        if (0..3).any(|a| (extent[a] - self.dimensions_mm[a]).abs() > 1e-9) {
            return bad(format!("dimensions {:?} but dims x pitch {:?}", self.dimensions_mm, extent));
        }
        if self.materials.len() != Material::ALL.len() {
            return bad(format!("{} material entries", self.materials.len()));
        }
        for (i, (e, m)) in self.materials.iter().zip(Material::ALL).enumerate() {
            if e.index as usize != i || e.name != m.name() {
                return bad(format!("material entry {i} is {:?} ({})", e.name, e.index));
            }
        }
        Ok(())
    }

    /// PNG palette and transparency chunks, one entry per material index.
    fn png_palette(&self) -> (Vec<u8>, Vec<u8>) {
        let plte = self.materials.iter().flat_map(|e| e.display_rgba[..3].to_vec()).collect();
        let trns = self.materials.iter().map(|e| e.display_rgba[3]).collect();
        (plte, trns)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack {
    /// Bottom to top; each layer holds `ny` rows of `nx` materials.
    pub layers: Vec<Vec<Material>>,
    pub manifest: SliceManifest,
}

impl SliceStack {
    /// Material at row `row` (y), column `col` (x) of layer `k`.
    pub fn at(&self, k: usize, row: usize, col: usize) -> Material {
        self.layers[k][row * self.manifest.dims[0] + col]
    }
}

/// Slices with the default palette's display colors.
pub fn slice(mgrid: &MaterialGrid) -> SliceStack {
    slice_with_palette(mgrid, &MaterialPalette::default())
}

pub fn slice_with_palette(mgrid: &MaterialGrid, palette: &MaterialPalette) -> SliceStack {
    let spec = mgrid.spec();
    let layer = spec.dims[0] * spec.dims[1];
    let layers = if layer == 0 {
        vec![Vec::new(); spec.dims[2]]
    } else {
        mgrid.materials().chunks_exact(layer).map(<[Material]>::to_vec).collect()
    };
    SliceStack {
        layers,
        manifest: SliceManifest::new(spec, palette),
    }
}

pub fn unslice(stack: &SliceStack) -> Result<MaterialGrid> {
    stack.manifest.validate()?;
    let spec = stack.manifest.spec()?;
    let layer = spec.dims[0] * spec.dims[1];
    if stack.layers.len() != spec.dims[2] {
        return Err(Error::Stack(format!("{} layers for nz {}", stack.layers.len(), spec.dims[2])));
    }
    if let Some(k) = stack.layers.iter().position(|l| l.len() != layer) {
        return Err(Error::Stack(format!(
            "layer {k} has {} cells, expected {}x{}",
            stack.layers[k].len(),
            spec.dims[0],
            spec.dims[1]
        )));
    }
    MaterialGrid::new(spec, stack.layers.concat())
}

/// Writes the stack into `dir`, creating it if needed. Layer files left over
/// from a taller stack are removed.
pub fn export_stack(stack: &SliceStack, dir: &Path) -> Result<()> {
    stack.manifest.validate()?;
    let [nx, ny, nz] = stack.manifest.dims;
    if stack.layers.len() != nz || stack.layers.iter().any(|l| l.len() != nx * ny) {
        return Err(Error::Stack("layer shapes do not match the manifest".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (plte, trns) = stack.manifest.png_palette();
    stack
        .layers
        .par_iter()
        .enumerate()
        .try_for_each(|(k, layer)| {
            let data: Vec<u8> = layer.iter().map(|m| m.index()).collect();
            let bytes = encode_indexed(nx as u32, ny as u32, &plte, &trns, &data)?;
            crate::write_file_atomic(&dir.join(layer_file_name(k)), &bytes)
        })?;
    remove_stale_layers(dir, nz)?;
    let text = serde_json::to_string_pretty(&stack.manifest)?;
    crate::write_file_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
}

fn remove_stale_layers(dir: &Path, count: usize) -> Result<()> {
    let mut k = count;
    loop {
        let path = dir.join(layer_file_name(k));
        match std::fs::remove_file(&path) {
            Ok(()) => k += 1,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(Error::io(&path, e)),
        }
    }
}

fn encode_indexed(width: u32, height: u32, plte: &[u8], trns: &[u8], data: &[u8]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let mut enc = png::Encoder::new(&mut buf, width.max(1), height.max(1));
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(plte);
    enc.set_trns(trns);
    enc.set_compression(png::Compression::Balanced);
    let mut w = enc.write_header()?;
    if width == 0 || height == 0 {
        // PNG cannot be empty; degenerate layers are stored as one empty cell
        w.write_image_data(&[Material::Empty.index()])?;
    } else {
        w.write_image_data(data)?;
    }
    w.finish()?;
    Ok(buf)
}

/// Reads a stack written by [`export_stack`].
pub fn import_stack(dir: &Path) -> Result<SliceStack> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: SliceManifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: manifest_path.clone(),
        message: e.to_string(),
    })?;
    manifest.validate()?;
    let [nx, ny, nz] = manifest.dims;
    let layers = (0..nz)
        .into_par_iter()
        .map(|k| read_layer(&dir.join(layer_file_name(k)), nx, ny))
        .collect::<Result<Vec<_>>>()?;
    Ok(SliceStack { layers, manifest })
}

fn read_layer(path: &PathBuf, nx: usize, ny: usize) -> Result<Vec<Material>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let image_err = |message: String| Error::Image {
        path: path.clone(),
        message,
    };
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| image_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(e.to_string()))?;
    if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
        return Err(image_err(format!(
            "expected 8-bit indexed, found {:?} {:?}",
            info.bit_depth, info.color_type
        )));
    }
    if nx == 0 || ny == 0 {
        return Ok(Vec::new());
    }
    if (info.width as usize, info.height as usize) != (nx, ny) {
        return Err(Error::ImageSize {
            path: path.clone(),
            width: nx as u32,
            height: ny as u32,
            actual_width: info.width,
            actual_height: info.height,
        });
    }
    buf[..info.buffer_size()]
        .chunks_exact(info.line_size)
        .flat_map(|row| &row[..nx])
        .map(|&i| Material::from_index(i).ok_or_else(|| image_err(format!("material index {i}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(dims: [usize; 3]) -> MaterialGrid {
        MaterialGrid::filled(GridSpec::with_default_pitch(dims, [0.0; 3]).unwrap(), Material::Empty).unwrap()
    }

    #[test]
    fn layer_count_and_shape() {
        let s = slice(&grid([4, 4, 3]));
        assert_eq!(s.layers.len(), 3);
        assert!(s.layers.iter().all(|l| l.len() == 16 && l.iter().all(|&m| m == Material::Empty)));
    }

    #[test]
    fn voxel_lands_at_row_y_column_x() {
        let mut g = grid([3, 4, 2]);
        g.set(1, 2, 0, Material::Cyan);
        let s = slice(&g);
        assert_eq!(s.at(0, 2, 1), Material::Cyan);
        let others = s.layers.iter().flatten().filter(|&&m| m != Material::Empty).count();
        assert_eq!(others, 1);
        assert_eq!(unslice(&s).unwrap(), g);
    }

    #[test]
    fn mismatched_layer_rejected() {
        let mut s = slice(&grid([2, 2, 2]));
        s.layers[1].pop();
        assert!(matches!(unslice(&s), Err(Error::Stack(_))));
        let mut s = slice(&grid([2, 2, 2]));
        s.layers.pop();
        assert!(unslice(&s).is_err());
    }

    #[test]
    fn default_pitch_dimensions() {
        let m = SliceManifest::new(
            &GridSpec::with_default_pitch([100; 3], [0.0; 3]).unwrap(),
            &MaterialPalette::default(),
        );
        let want = [100.0 * 25.4 / 600.0, 100.0 * 25.4 / 300.0, 100.0 * 0.014];
        for a in 0..3 {
            assert!((m.dimensions_mm[a] - want[a]).abs() < 1e-9);
        }
        assert!((m.dimensions_mm[0] - 4.2333).abs() < 5e-5);
        assert!((m.dimensions_mm[1] - 8.4667).abs() < 5e-5);
        assert!((m.dimensions_mm[2] - 1.4).abs() < 1e-9);
        assert_eq!(m.layer_height_mm, 0.014);
    }

    #[test]
    fn export_import_and_reexport() {
        let mut g = grid([5, 3, 3]);
        for (i, m) in Material::ALL.iter().enumerate() {
            g.set(i % 5, i % 3, i % 3, *m);
        }
        let s = slice(&g);
        let dir = tempfile::tempdir().unwrap();
        export_stack(&s, dir.path()).unwrap();
        let names: Vec<_> = (0..3).map(layer_file_name).collect();
        assert_eq!(names, ["layer_00000.png", "layer_00001.png", "layer_00002.png"]);
        let first = std::fs::read(dir.path().join(&names[0])).unwrap();
        let back = import_stack(dir.path()).unwrap();
        assert_eq!(back, s);
        assert_eq!(unslice(&back).unwrap(), g);
        export_stack(&s, dir.path()).unwrap();
        assert_eq!(std::fs::read(dir.path().join(&names[0])).unwrap(), first);
    }

    #[test]
    fn shorter_reexport_drops_old_layers() {
        let dir = tempfile::tempdir().unwrap();
        export_stack(&slice(&grid([2, 2, 4])), dir.path()).unwrap();
        export_stack(&slice(&grid([2, 2, 2])), dir.path()).unwrap();
        assert!(!dir.path().join(layer_file_name(2)).exists());
        assert_eq!(import_stack(dir.path()).unwrap().layers.len(), 2);
    }
}
