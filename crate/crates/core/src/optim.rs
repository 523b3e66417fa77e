//! Fitting a voxel grid to posed images.
//!
//! The objective is `photometric + lambda_struct * structural`, minimized with
//! a per-parameter RMSProp step followed by clamping every channel to
//! `[0, 1]`. Block averaging ([`regional_average`]) is applied on a schedule
//! late in training and once at the end; the final grid is pruned of
//! background and floaters.
//!
//! Gradient reduction is deterministic: a batch is split into a fixed number
//! of contiguous ray lanes (a function of batch and grid size, never of the
//! thread count), each lane accumulates sequentially, and lanes are merged in
//! index order.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{PosedImage, Ray};
use crate::render::{self, backprop_samples, march, RaySample, Termination};
use crate::voxgrid::{prune_background, trilinear_stencil, GradAccumulator, GridSpec, VoxelGrid};
use crate::{Error, Result, Rgb, Rgba};

/// Averaging block. `rx`, `ry`, `rz` count voxels along x, y and z.
///
/// The default `1 x 2 x 6` (y, x, z) block spans one 300 dpi column, two
/// 600 dpi columns and six 14 µm layers, about 85 µm along every axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionShape {
    pub ry: usize,
    pub rx: usize,
    pub rz: usize,
}

impl Default for RegionShape {
    fn default() -> Self {
        RegionShape { ry: 1, rx: 2, rz: 6 }
    }
}

impl RegionShape {
    pub fn new(ry: usize, rx: usize, rz: usize) -> Result<Self> {
        if ry == 0 || rx == 0 || rz == 0 {
            return Err(Error::Config(format!("region ({ry}, {rx}, {rz}) must be positive")));
        }
        Ok(RegionShape { ry, rx, rz })
    }

    /// Voxels per block.
    pub fn len(&self) -> usize {
        self.ry * self.rx * self.rz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Block size in storage axis order `[x, y, z]`.
    pub fn block(&self) -> [usize; 3] {
        [self.rx, self.ry, self.rz]
    }

    /// True when some edge block is smaller than the full region.
    pub fn has_partial_blocks(&self, spec: &GridSpec) -> bool {
        spec.dims.iter().zip(self.block()).any(|(n, b)| n % b != 0)
    }
}

/// Replaces every voxel by the channel-wise mean of its block. Edge blocks
/// that do not fit average over the voxels they actually contain.
pub fn regional_average(grid: &VoxelGrid, region: RegionShape) -> Result<VoxelGrid> {
    if region.is_empty() {
        return Err(Error::Config("empty averaging region".into()));
    }
    let spec = *grid.spec();
    if region.has_partial_blocks(&spec) {
        log::warn!(
            "grid {:?} not divisible by region {:?}; edge blocks average fewer voxels",
            spec.dims,
            region.block()
        );
    }
    let [bx, by, bz] = region.block();
    let [nx, ny, nz] = spec.dims;
    let src = grid.voxels();
    let mut out = grid.clone();
    let dst = out.voxels_mut();
    for z0 in (0..nz).step_by(bz) {
        for y0 in (0..ny).step_by(by) {
            for x0 in (0..nx).step_by(bx) {
                let (x1, y1, z1) = ((x0 + bx).min(nx), (y0 + by).min(ny), (z0 + bz).min(nz));
                let mut sum = [0.0f64; 4];
                for z in z0..z1 {
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let v = src[spec.index(x, y, z)];
                            for c in 0..4 {
                                sum[c] += v[c] as f64;
                            }
                        }
                    }
                }
                let count = ((x1 - x0) * (y1 - y0) * (z1 - z0)) as f64;
                let mean = sum.map(|s| ((s / count) as f32).clamp(0.0, 1.0));
                for z in z0..z1 {
                    for y in y0..y1 {
                        for x in x0..x1 {
                            dst[spec.index(x, y, z)] = mean;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Mean squared error over rays and channels, with its gradient with
/// respect to `rendered`.
pub fn photometric_loss(rendered: &[Rgb], target: &[Rgb]) -> Result<(f64, Vec<Rgb>)> {
    if rendered.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rendered vs {} target colors",
            rendered.len(),
            target.len()
        )));
    }
    if rendered.is_empty() {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }
    let count = 3.0 * rendered.len() as f64;
    let mut loss = 0.0;
    let grad = rendered
        .iter()
        .zip(target)
        .map(|(r, t)| {
            std::array::from_fn(|c| {
                let d = r[c] - t[c];
                loss += d * d;
                2.0 * d / count
            })
        })
        .collect();
    Ok((loss / count, grad))
}

fn pair_count(spec: &GridSpec) -> usize {
    let [nx, ny, nz] = spec.dims;
    (nx - 1) * ny * nz + nx * (ny - 1) * nz + nx * ny * (nz - 1)
}

/// Pitch-weighted total variation: the squared RGBA difference of every
/// axis-neighbour pair divided by that axis' pitch, averaged over all pairs.
pub fn structural_loss(grid: &VoxelGrid) -> (f64, Vec<Rgba>) {
    let spec = *grid.spec();
    let pairs = pair_count(&spec);
    let mut grad = vec![[0.0; 4]; spec.voxel_count()];
    if pairs == 0 {
        return (0.0, grad);
    }
    let loss = structural_into(grid, 1.0, &mut grad);
    (loss, grad)
}

/// Adds `scale` times the structural gradient into `grad` and returns the
/// loss. Slices are processed in parallel and summed in z order.
fn structural_into(grid: &VoxelGrid, scale: f64, grad: &mut [[f64; 4]]) -> f64 {
    let spec = *grid.spec();
    let pairs = pair_count(&spec);
    if pairs == 0 {
        return 0.0;
    }
    let [nx, ny, nz] = spec.dims;
    let inv_pitch = spec.pitch.map(|p| 1.0 / p);
    let norm = 1.0 / pairs as f64;
    let v = grid.voxels();
    let slice_len = nx * ny;
    let partial: Vec<f64> = grad
        .par_chunks_mut(slice_len)
        .enumerate()
        .map(|(z, out)| {
            let mut sum = 0.0;
            for y in 0..ny {
                for x in 0..nx {
                    let i = spec.index(x, y, z);
                    let here = v[i];
                    let g = &mut out[x + nx * y];
                    let neighbours = [
                        (x > 0).then(|| (i - 1, 0)),
                        (x + 1 < nx).then(|| (i + 1, 0)),
                        (y > 0).then(|| (i - nx, 1)),
                        (y + 1 < ny).then(|| (i + nx, 1)),
                        (z > 0).then(|| (i - slice_len, 2)),
                        (z + 1 < nz).then(|| (i + slice_len, 2)),
                    ];
                    for (j, axis) in neighbours.into_iter().flatten() {
                        let w = inv_pitch[axis] * norm;
                        let there = v[j];
                        for c in 0..4 {
                            let d = here[c] as f64 - there[c] as f64;
                            g[c] += scale * 2.0 * w * d;
                            // each pair counted once, from its lower voxel
                            if j > i {
                                sum += w * d * d;
                            }
                        }
                    }
                }
            }
            sum
        })
        .collect();
    partial.iter().sum()
}

/// When block averaging runs during [`fit`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AveragingSchedule {
    /// Period in iterations; 0 disables periodic averaging.
    pub every: usize,
    /// Periodic averaging starts at this fraction of the run.
    pub start_fraction: f64,
    pub at_end: bool,
}

impl Default for AveragingSchedule {
    fn default() -> Self {
        AveragingSchedule {
            every: 250,
            start_fraction: 2.0 / 3.0,
            at_end: true,
        }
    }
}

impl AveragingSchedule {
    pub fn never() -> Self {
        AveragingSchedule {
            every: 0,
            start_fraction: 1.0,
            at_end: false,
        }
    }

    /// Periodic averaging after `iteration` (1-based) of `total`.
    pub fn periodic_at(&self, iteration: usize, total: usize) -> bool {
        if self.every == 0 || iteration >= total {
            return false;
        }
        let start = (self.start_fraction * total as f64).ceil() as usize;
        iteration >= start && iteration.is_multiple_of(self.every)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Learning rate on the last iteration relative to the first; the rate
    /// decays geometrically in between.
    pub final_lr_ratio: f64,
    pub lambda_struct: f64,
    pub rays_per_batch: usize,
    pub region: RegionShape,
    pub averaging: AveragingSchedule,
    pub alpha_prune_threshold: f64,
    pub rng_seed: u64,
    /// RMSProp squared-gradient decay.
    pub rms_decay: f64,
    /// Sampling step in mm; `None` uses half the finest pitch.
    pub step: Option<f64>,
    pub background: Rgb,
    pub init_rgb: Rgb,
    pub init_alpha: f64,
    /// Validation period in iterations; the final iteration is always
    /// validated. 0 validates only at the end.
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3000,
            learning_rate: 0.02,
            final_lr_ratio: 1.0,
            lambda_struct: 1e-3,
            rays_per_batch: 4096,
            region: RegionShape::default(),
            averaging: AveragingSchedule::default(),
            alpha_prune_threshold: 0.01,
            rng_seed: 0,
            rms_decay: 0.9,
            step: None,
            background: render::WHITE,
            init_rgb: [0.5; 3],
            init_alpha: 0.02,
            validate_every: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate for 1-based `iteration`.
    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        if self.iterations <= 1 || self.final_lr_ratio == 1.0 {
            return self.learning_rate;
        }
        let f = (iteration.clamp(1, self.iterations) - 1) as f64 / (self.iterations - 1) as f64;
        self.learning_rate * self.final_lr_ratio.powf(f)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations < 1 {
            return bad("iterations must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {}", self.learning_rate));
        }
        if !(self.final_lr_ratio > 0.0 && self.final_lr_ratio <= 1.0) {
            return bad(format!("final_lr_ratio {}", self.final_lr_ratio));
        }
        if !(self.lambda_struct >= 0.0 && self.lambda_struct.is_finite()) {
            return bad(format!("lambda_struct {}", self.lambda_struct));
        }
        if self.rays_per_batch < 1 {
            return bad("rays_per_batch must be at least 1".into());
        }
        if self.region.is_empty() {
            return bad(format!("region {:?}", self.region));
        }
        if !(0.0..=1.0).contains(&self.alpha_prune_threshold) {
            return bad(format!("alpha_prune_threshold {}", self.alpha_prune_threshold));
        }
        if !(0.0..1.0).contains(&self.rms_decay) {
            return bad(format!("rms_decay {}", self.rms_decay));
        }
        if let Some(s) = self.step {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("step {s}"));
            }
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !self.background.iter().chain(&self.init_rgb).all(|&v| unit(v)) || !unit(self.init_alpha) {
            return bad("background and init values must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn step_for(&self, spec: &GridSpec) -> f64 {
        self.step.unwrap_or_else(|| render::default_step(spec))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: usize,
    pub photometric: f64,
    pub structural: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_psnr: Option<f64>,
}

/// A supervised ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayTarget {
    pub ray: Ray,
    pub target: Rgb,
}

/// RMSProp state, one squared-gradient average per parameter.
#[derive(Debug, Clone)]
pub struct RmsProp {
    mean_square: Vec<[f64; 4]>,
    decay: f64,
    epsilon: f64,
}

impl RmsProp {
    pub fn new(voxel_count: usize, decay: f64) -> Self {
        RmsProp {
            mean_square: vec![[0.0; 4]; voxel_count],
            decay,
            epsilon: 1e-8,
        }
    }

    /// One step on every voxel, then projection onto `[0, 1]`.
    pub fn apply(&mut self, grid: &mut VoxelGrid, grads: &[[f64; 4]], learning_rate: f64) {
        let (decay, eps) = (self.decay, self.epsilon);
        grid.voxels_mut()
            .par_chunks_mut(4096)
            .zip(self.mean_square.par_chunks_mut(4096))
            .zip(grads.par_chunks(4096))
            .for_each(|((vox, ms), g)| {
                for ((v, m), g) in vox.iter_mut().zip(ms.iter_mut()).zip(g) {
                    for c in 0..4 {
                        if g[c] == 0.0 && m[c] == 0.0 {
                            continue;
                        }
                        m[c] = decay * m[c] + (1.0 - decay) * g[c] * g[c];
                        let next = v[c] as f64 - learning_rate * g[c] / (m[c].sqrt() + eps);
                        v[c] = (next as f32).clamp(0.0, 1.0);
                    }
                }
            });
    }
}

/// Upper bound on lane accumulator memory.
const LANE_BUDGET_BYTES: usize = 192 << 20;
const MAX_LANES: usize = 16;
const MIN_RAYS_PER_LANE: usize = 64;

fn lane_count(batch: usize, voxel_count: usize) -> usize {
    let per_lane = voxel_count * (std::mem::size_of::<[f64; 4]>() + 1);
    let by_memory = (LANE_BUDGET_BYTES / per_lane.max(1)).max(1);
    let by_batch = batch.div_ceil(MIN_RAYS_PER_LANE).max(1);
    by_memory.min(by_batch).min(MAX_LANES)
}

/// Optimizer state plus reusable gradient buffers.
pub struct Trainer {
    config: TrainConfig,
    step: f64,
    rms: RmsProp,
    lanes: Vec<GradAccumulator>,
    total: Vec<[f64; 4]>,
    iteration: usize,
}

impl Trainer {
    pub fn new(spec: &GridSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        let n = spec.voxel_count();
        Ok(Trainer {
            step: config.step_for(spec),
            rms: RmsProp::new(n, config.rms_decay),
            lanes: Vec::new(),
            total: vec![[0.0; 4]; n],
            iteration: 0,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, grid: &mut VoxelGrid, batch: &[RayTarget]) -> Result<LossReport> {
        let (photometric, structural) = self.evaluate(grid, batch)?;
        self.iteration += 1;
        let total = photometric + self.config.lambda_struct * structural;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                photometric,
                structural,
            });
        }
        let lr = self.config.learning_rate_at(self.iteration);
        self.rms.apply(grid, &self.total, lr);
        Ok(LossReport {
            iteration: self.iteration,
            photometric,
            structural,
            total,
            validation_psnr: None,
        })
    }

    /// Photometric and structural loss on `batch`, leaving the gradient of
    /// `photometric + lambda_struct * structural` in [`Trainer::gradient`].
    /// The grid is not modified.
    pub fn evaluate(&mut self, grid: &VoxelGrid, batch: &[RayTarget]) -> Result<(f64, f64)> {
        if batch.is_empty() {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        let spec = *grid.spec();
        if self.total.len() != spec.voxel_count() {
            return Err(Error::ShapeMismatch("grid does not match trainer".into()));
        }

        let lanes = lane_count(batch.len(), spec.voxel_count());
        while self.lanes.len() < lanes {
            self.lanes.push(GradAccumulator::new(spec.voxel_count()));
        }
        let per_lane = batch.len().div_ceil(lanes);
        let count = 3.0 * batch.len() as f64;
        let (step, background) = (self.step, self.config.background);
        let frozen: &VoxelGrid = grid;
        let rendered: Vec<Vec<Rgb>> = self.lanes[..lanes]
            .par_iter_mut()
            .zip(batch.par_chunks(per_lane))
            .map(|(acc, rays)| {
                let mut records: Vec<RaySample> = Vec::new();
                let mut sample_grads: Vec<Rgba> = Vec::new();
                rays.iter()
                    .map(|rt| {
                        let r = march(frozen, &rt.ray, step, background, Termination::Early, Some(&mut records));
                        let d_rgb: Rgb = std::array::from_fn(|c| 2.0 * (r.rgb[c] - rt.target[c]) / count);
                        sample_grads.clear();
                        sample_grads.resize(records.len(), [0.0; 4]);
                        backprop_samples(&records, background, &d_rgb, &mut sample_grads);
                        for (s, g) in records.iter().zip(&sample_grads) {
                            if let Some(st) = trilinear_stencil(&spec, &rt.ray.at(s.t)) {
                                crate::voxgrid::scatter_stencil(acc, &st, g);
                            }
                        }
                        r.rgb
                    })
                    .collect()
            })
            .collect();

        let rendered: Vec<Rgb> = rendered.into_iter().flatten().collect();
        let targets: Vec<Rgb> = batch.iter().map(|b| b.target).collect();
        let (photometric, _) = photometric_loss(&rendered, &targets)?;

        self.total.iter_mut().for_each(|g| *g = [0.0; 4]);
        for acc in &mut self.lanes[..lanes] {
            acc.drain_into(&mut self.total);
        }
        let lambda = self.config.lambda_struct;
        let structural = if lambda > 0.0 {
            structural_into(grid, lambda, &mut self.total)
        } else {
            structural_loss_value(grid)
        };
        Ok((photometric, structural))
    }

    /// Gradient from the last [`Trainer::evaluate`] or [`Trainer::train_step`].
    pub fn gradient(&self) -> &[[f64; 4]] {
        &self.total
    }
}

fn structural_loss_value(grid: &VoxelGrid) -> f64 {
    structural_loss(grid).0
}

/// Peak signal-to-noise ratio for signals in `[0, 1]`.
pub fn psnr(mse: f64) -> f64 {
    -10.0 * mse.log10()
}

/// Mean squared error of `grid` against `views` (composited on `background`).
pub fn view_mse(grid: &VoxelGrid, views: &[PosedImage], step: f64, background: Rgb) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for view in views {
        let img = render::render_image(grid, &view.intrinsics, &view.pose, step, background)?;
        for py in 0..view.height() {
            for px in 0..view.width() {
                let t = view.target_rgb(px, py, background);
                let r = img.pixel(px, py);
                for c in 0..3 {
                    sum += (r[c] - t[c]).powi(2);
                }
                count += 3;
            }
        }
    }
    Ok(sum / count.max(1) as f64)
}

pub struct FitOutput {
    pub grid: VoxelGrid,
    pub reports: Vec<LossReport>,
}

/// [`fit_with`] without an observer.
pub fn fit(train: &[PosedImage], validation: &[PosedImage], spec: GridSpec, config: &TrainConfig) -> Result<FitOutput> {
    fit_with(train, validation, spec, config, |_, _| Ok(()))
}

/// Full training run. `observer` sees every report together with the grid
/// it describes (after any averaging or pruning for that iteration).
pub fn fit_with<F>(
    train: &[PosedImage],
    validation: &[PosedImage],
    spec: GridSpec,
    config: &TrainConfig,
    mut observer: F,
) -> Result<FitOutput>
where
    F: FnMut(&LossReport, &VoxelGrid) -> Result<()>,
{
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut trainer = Trainer::new(&spec, config.clone())?;
    let mut grid = VoxelGrid::new(spec, config.init_rgb, config.init_alpha)?;
    let step = config.step_for(&spec);

    let mut pool: Vec<(u32, u32)> = train
        .iter()
        .enumerate()
        .flat_map(|(v, img)| (0..img.width() * img.height()).map(move |p| (v as u32, p)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    pool.shuffle(&mut rng);
    let mut cursor = 0usize;
    let batch_len = config.rays_per_batch.min(pool.len());
    let mut batch = Vec::with_capacity(batch_len);
    let mut reports = Vec::with_capacity(config.iterations);

    for it in 1..=config.iterations {
        batch.clear();
        while batch.len() < batch_len {
            if cursor == pool.len() {
                pool.shuffle(&mut rng);
                cursor = 0;
            }
            let (v, p) = pool[cursor];
            cursor += 1;
            let img = &train[v as usize];
            let (px, py) = (p % img.width(), p / img.width());
            batch.push(RayTarget {
                ray: img.ray(px, py)?,
                target: img.target_rgb(px, py, config.background),
            });
        }
        let mut report = trainer.train_step(&mut grid, &batch)?;

        let last = it == config.iterations;
        if config.averaging.periodic_at(it, config.iterations) {
            grid = regional_average(&grid, config.region)?;
        }
        if last {
            if config.averaging.at_end {
                grid = regional_average(&grid, config.region)?;
            }
            grid = prune_background(&grid, config.alpha_prune_threshold)?;
        }
        let validate = last || (config.validate_every > 0 && it % config.validate_every == 0);
        if validate && !validation.is_empty() {
            let mse = view_mse(&grid, validation, step, config.background)?;
            report.validation_psnr = Some(psnr(mse));
            log::info!("iteration {it}: validation PSNR {:.2} dB", psnr(mse));
        }
        log::debug!(
            "iteration {it}: photometric {:.6} structural {:.6}",
            report.photometric,
            report.structural
        );
        observer(&report, &grid)?;
        reports.push(report);
    }
    Ok(FitOutput { grid, reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Vec3;
    use rand::Rng;

    fn random_grid(dims: [usize; 3], pitch: [f64; 3], seed: u64) -> VoxelGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = GridSpec::new(dims, pitch, [0.0; 3]).unwrap();
        let v = (0..spec.voxel_count()).map(|_| [rng.gen(), rng.gen(), rng.gen(), rng.gen()]).collect();
        VoxelGrid::from_voxels(spec, v).unwrap()
    }

    #[test]
    fn constant_grid_unchanged_by_averaging() {
        let spec = GridSpec::new([4, 3, 12], [1.0; 3], [0.0; 3]).unwrap();
        let g = VoxelGrid::new(spec, [0.3, 0.6, 0.9], 0.4).unwrap();
        assert_eq!(regional_average(&g, RegionShape::default()).unwrap(), g);
    }

    #[test]
    fn single_block_mean_of_twelve() {
        // default region on a 2 x 1 x 6 grid (x, y, z) is one block
        let spec = GridSpec::with_default_pitch([2, 1, 6], [0.0; 3]).unwrap();
        let v = (1..=12).map(|i| [0.0, 0.0, 0.0, i as f32 / 12.0]).collect();
        let g = VoxelGrid::from_voxels(spec, v).unwrap();
        let avg = regional_average(&g, RegionShape::default()).unwrap();
        for v in avg.voxels() {
            assert!((v[3] as f64 - 6.5 / 12.0).abs() < 1e-7);
        }
    }

    #[test]
    fn partial_edge_blocks_use_member_count() {
        let spec = GridSpec::new([3, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let v = vec![[0.0, 0.0, 0.0, 0.2], [0.0, 0.0, 0.0, 0.4], [0.0, 0.0, 0.0, 0.9]];
        let g = VoxelGrid::from_voxels(spec, v).unwrap();
        let region = RegionShape::new(1, 2, 1).unwrap();
        assert!(region.has_partial_blocks(&spec));
        let avg = regional_average(&g, region).unwrap();
        assert!((avg.voxels()[0][3] - 0.3).abs() < 1e-7);
        assert!((avg.voxels()[1][3] - 0.3).abs() < 1e-7);
        assert_eq!(avg.voxels()[2][3], 0.9);
    }

    #[test]
    fn averaging_twice_equals_once() {
        let g = random_grid([4, 2, 12], [1.0; 3], 1);
        let once = regional_average(&g, RegionShape::default()).unwrap();
        assert_eq!(regional_average(&once, RegionShape::default()).unwrap(), once);
    }

    #[test]
    fn photometric_values() {
        let (l, g) = photometric_loss(&[[0.2, 0.4, 0.6]], &[[0.2, 0.4, 0.6]]).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![[0.0; 3]]);
        let (l, _) = photometric_loss(&[[1.0, 0.0, 0.0]], &[[0.0; 3]]).unwrap();
        assert!((l - 1.0 / 3.0).abs() < 1e-15);
        assert!(photometric_loss(&[[0.0; 3]], &[]).is_err());
    }

    #[test]
    fn photometric_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r: Vec<Rgb> = (0..5).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let t: Vec<Rgb> = (0..5).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let (_, g) = photometric_loss(&r, &t).unwrap();
        let h = 1e-5;
        for i in 0..5 {
            for c in 0..3 {
                let (mut rp, mut rm) = (r.clone(), r.clone());
                rp[i][c] += h;
                rm[i][c] -= h;
                let fd = (photometric_loss(&rp, &t).unwrap().0 - photometric_loss(&rm, &t).unwrap().0) / (2.0 * h);
                assert!((fd - g[i][c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn structural_constant_and_single_pair() {
        let spec = GridSpec::new([3, 3, 3], [0.5, 1.0, 2.0], [0.0; 3]).unwrap();
        let g = VoxelGrid::new(spec, [0.4; 3], 0.7).unwrap();
        let (l, grad) = structural_loss(&g);
        assert_eq!(l, 0.0);
        assert!(grad.iter().flatten().all(|v| *v == 0.0));

        let spec = GridSpec::new([2, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let g = VoxelGrid::from_voxels(spec, vec![[0.0; 4], [0.0, 0.0, 0.0, 1.0]]).unwrap();
        let (l, grad) = structural_loss(&g);
        assert_eq!(l, 1.0);
        assert_eq!(grad[0], [0.0, 0.0, 0.0, -2.0]);
        assert_eq!(grad[1], [0.0, 0.0, 0.0, 2.0]);

        let single = VoxelGrid::new(GridSpec::new([1, 1, 1], [1.0; 3], [0.0; 3]).unwrap(), [0.2; 3], 0.5).unwrap();
        assert_eq!(structural_loss(&single).0, 0.0);
    }

    #[test]
    fn structural_gradient_matches_differences() {
        let g = random_grid([4, 4, 4], [0.5, 1.0, 0.25], 9);
        let (_, grad) = structural_loss(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..40 {
            let i = rng.gen_range(0..64);
            let c = rng.gen_range(0..4);
            let eval = |delta: f64| {
                let mut v = g.voxels().to_vec();
                let x = (v[i][c] as f64 + delta) as f32;
                let applied = x as f64 - v[i][c] as f64;
                v[i][c] = x;
                // out-of-range values are fine for the loss itself
                let spec = *g.spec();
                let mut grid = VoxelGrid::empty(spec).unwrap();
                grid.voxels_mut().copy_from_slice(&v);
                (structural_loss(&grid).0, applied)
            };
            let (lp, hp) = eval(1e-3);
            let (lm, hm) = eval(-1e-3);
            let fd = (lp - lm) / (hp - hm);
            let rel = (fd - grad[i][c]).abs() / grad[i][c].abs().max(1e-6);
            assert!(rel < 1e-4, "voxel {i} channel {c}: fd {fd} analytic {}", grad[i][c]);
        }
    }

    #[test]
    fn fitted_grid_does_not_move() {
        let spec = GridSpec::new([4, 4, 4], [1.0; 3], [0.0; 3]).unwrap();
        let mut grid = VoxelGrid::new(spec, [0.25, 0.5, 0.75], 1.0).unwrap();
        let before = grid.clone();
        let ray = Ray::new(Vec3::new(2.0, 2.0, 10.0), Vec3::new(0.0, 0.0, -1.0));
        let batch = [RayTarget {
            ray,
            target: [0.25f32 as f64, 0.5, 0.75],
        }];
        let config = TrainConfig {
            lambda_struct: 0.0,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(&spec, config).unwrap();
        let report = trainer.train_step(&mut grid, &batch).unwrap();
        assert_eq!(report.photometric, 0.0);
        assert_eq!(grid, before);
    }

    #[test]
    fn non_finite_config_rejected() {
        let c = TrainConfig {
            learning_rate: f64::NAN,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn lane_count_ignores_threads_and_respects_budget() {
        assert_eq!(lane_count(1, 100), 1);
        assert_eq!(lane_count(4096, 64 * 64 * 64), 16);
        assert_eq!(lane_count(4096, 256 * 256 * 256), 1);
    }

    #[test]
    fn schedule_runs_late_and_skips_final() {
        let s = AveragingSchedule::default();
        assert!(!s.periodic_at(250, 3000));
        assert!(s.periodic_at(2250, 3000));
        assert!(!s.periodic_at(3000, 3000));
        assert!(!AveragingSchedule::never().periodic_at(2250, 3000));
    }
}
