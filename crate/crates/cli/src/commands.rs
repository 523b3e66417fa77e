use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use voxprint::colorsep::{discretize as separate, preview_material_grid, MaterialGrid, MaterialPalette, PreviewOptions};
use voxprint::dataset::{load_manifest, split_views, CameraIntrinsics, Pose};
use voxprint::optim::fit_with;
use voxprint::render::{default_step, render_image, WHITE};
use voxprint::slicer::{export_stack, slice_with_palette};
use voxprint::voxgrid::{GridSpec, VoxelGrid};
use voxprint::Vec3;

use crate::config::PipelineConfig;
use crate::{DiscretizeArgs, PreviewArgs, ReconstructArgs, SliceArgs, UsageError};

pub const GRID_FILE: &str = "grid.poxv";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

fn triple<T: Copy>(v: &[T]) -> [T; 3] {
    [v[0], v[1], v[2]]
}

pub fn reconstruct(a: ReconstructArgs) -> Result<()> {
    let mut cfg = PipelineConfig::load_or_default(a.config.as_deref())?;
    if a.dataset.is_some() {
        cfg.dataset = a.dataset;
    }
    if a.out_dir.is_some() {
        cfg.output_dir = a.out_dir;
    }
    if let Some(d) = a.dims {
        cfg.grid.dims = triple(&d);
    }
    if let Some(p) = a.pitch {
        cfg.grid.pitch = Some(triple(&p));
    }
    if let Some(v) = a.iterations {
        cfg.train.iterations = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = a.rays_per_batch {
        cfg.train.rays_per_batch = v;
    }
    if a.seed.is_some() {
        cfg.rng_seed = a.seed;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = a.holdout_every {
        cfg.holdout_every = v;
    }
    cfg.validate_for_reconstruct()?;
    let dataset_path = cfg.dataset.clone().expect("validated");
    let out_dir = cfg.output_dir.clone().expect("validated");

    let dataset = load_manifest(&dataset_path).with_context(|| format!("loading dataset {}", dataset_path.display()))?;
    let split = split_views(dataset.images, cfg.holdout_every)?;
    if let Some(w) = &split.warning {
        log::warn!("{w}");
    }
    let spec = cfg.grid.spec(dataset.bounds.center())?;
    let train = cfg.train_config();
    log::info!(
        "fitting {:?} voxels to {} views ({} held out), {} iterations",
        spec.dims,
        split.train.len(),
        split.validation.len(),
        train.iterations
    );

    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let ckpt_dir = out_dir.join(CHECKPOINT_DIR);
    if cfg.checkpoint_every > 0 {
        std::fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    }
    std::fs::write(out_dir.join(CONFIG_FILE), serde_json::to_string_pretty(&cfg)?)?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log_file =
        BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);

    let every = cfg.checkpoint_every;
    let out = fit_with(&split.train, &split.validation, spec, &train, |report, grid| {
        let io = |e| voxprint::Error::Io {
            path: log_path.clone(),
            source: e,
        };
        serde_json::to_writer(&mut log_file, report)?;
        writeln!(log_file).map_err(io)?;
        if every > 0 && report.iteration % every == 0 {
            grid.save(&ckpt_dir.join(format!("iter_{:06}.poxv", report.iteration)))?;
        }
        Ok(())
    })?;
    log_file.flush()?;

    let grid_path = out_dir.join(GRID_FILE);
    out.grid.save(&grid_path)?;
    if let Some(psnr) = out.reports.last().and_then(|r| r.validation_psnr) {
        log::info!("held-out PSNR {psnr:.2} dB");
    }
    log::info!("wrote {}", grid_path.display());
    Ok(())
}

fn load_palette(flag: Option<&Path>, cfg: &PipelineConfig) -> Result<MaterialPalette> {
    match flag {
        Some(p) => MaterialPalette::load(p).with_context(|| format!("loading palette {}", p.display())),
        None => cfg.palette(),
    }
}

pub fn discretize(a: DiscretizeArgs) -> Result<()> {
    let cfg = PipelineConfig::load_or_default(a.config.as_deref())?;
    let palette = load_palette(a.palette.as_deref(), &cfg)?;
    let mut opts = cfg.discretize;
    if let Some(v) = a.alpha_threshold {
        opts.alpha_threshold = v;
    }
    if let Some(v) = a.shell_depth {
        opts.shell_depth = v;
    }
    if let Some(v) = a.clear_coat {
        opts.clear_coat = v;
    }
    if a.slab_layers.is_some() {
        opts.slab_layers = a.slab_layers;
    }
    let grid = VoxelGrid::load(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let mgrid = separate(&grid, &palette, &opts)?;
    mgrid.save(&a.out)?;
    log::info!("wrote {}", a.out.display());
    Ok(())
}

pub fn slice(a: SliceArgs) -> Result<()> {
    let palette = match &a.palette {
        Some(p) => MaterialPalette::load(p).with_context(|| format!("loading palette {}", p.display()))?,
        None => MaterialPalette::default(),
    };
    let mgrid = MaterialGrid::load(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let stack = slice_with_palette(&mgrid, &palette);
    export_stack(&stack, &a.out_dir)?;
    let d = stack.manifest.dimensions_mm;
    log::info!(
        "wrote {} layers ({:.4} x {:.4} x {:.4} mm) to {}",
        stack.layers.len(),
        d[0],
        d[1],
        d[2],
        a.out_dir.display()
    );
    Ok(())
}

enum GridFile {
    Rgba(VoxelGrid),
    Materials(MaterialGrid),
}

fn read_any_grid(path: &Path) -> Result<GridFile> {
    let mut magic = [0u8; 5];
    File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .with_context(|| format!("reading {}", path.display()))?;
    let ctx = || format!("reading {}", path.display());
    match &magic {
        b"POXV1" => Ok(GridFile::Rgba(VoxelGrid::load(path).with_context(ctx)?)),
        b"POXM1" => Ok(GridFile::Materials(MaterialGrid::load(path).with_context(ctx)?)),
        _ => bail!(UsageError(format!("{}: not a POXV1 or POXM1 file", path.display()))),
    }
}

/// Orbit camera around the grid centre; the default distance frames the
/// grid's bounding sphere.
fn orbit_camera(spec: &GridSpec, a: &PreviewArgs) -> Result<(CameraIntrinsics, Pose)> {
    if !(a.fov > 0.0 && a.fov < 180.0) {
        bail!(UsageError(format!("fov {} must lie in (0, 180) degrees", a.fov)));
    }
    let k = CameraIntrinsics::from_fov_x(a.width, a.height, a.fov.to_radians())?;
    let bounds = spec.bounds();
    let center = bounds.center();
    let radius = 0.5 * bounds.extent().norm();
    let fov_min = 2.0 * (0.5 * a.width.min(a.height) as f64 / k.fx).atan();
    let distance = a.distance.unwrap_or(1.05 * radius / (0.5 * fov_min).sin());
    if !(distance > 0.0 && distance.is_finite()) {
        bail!(UsageError(format!("camera distance {distance}")));
    }
    let (az, el) = (a.azimuth.to_radians(), a.elevation.to_radians());
    let dir = Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
    let up = if el.cos().abs() < 1e-6 { Vec3::y() } else { Vec3::z() };
    Ok((k, Pose::look_at(center + distance * dir, center, up)?))
}

pub fn preview(a: PreviewArgs) -> Result<()> {
    let background = a.background.as_deref().map_or(WHITE, triple);
    let supersample = a.supersample.max(1);
    let image = match read_any_grid(&a.input)? {
        GridFile::Rgba(grid) => {
            let (k, pose) = orbit_camera(grid.spec(), &a)?;
            render_image(&grid, &k.scaled(supersample), &pose, default_step(grid.spec()), background)?
                .downsample(supersample)
        }
        GridFile::Materials(mgrid) => {
            let palette = match &a.palette {
                Some(p) => MaterialPalette::load(p)?,
                None => MaterialPalette::default(),
            };
            let (k, pose) = orbit_camera(mgrid.spec(), &a)?;
            let opts = PreviewOptions {
                background,
                supersample,
                ..PreviewOptions::default()
            };
            preview_material_grid(&mgrid, &palette, &k, &pose, &opts)?
        }
    };
    image.write_png(&a.out)?;
    log::info!("wrote {}", a.out.display());
    Ok(())
}
