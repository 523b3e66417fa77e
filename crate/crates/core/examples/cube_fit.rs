//! Fits a 64^3 grid to the synthetic three-color cube and reports PSNR.
//!
//! `cargo run --release -p voxprint --example cube_fit -- [iterations] [lr] [batch]`

use std::time::Instant;

use voxprint::dataset::{split_views, CameraIntrinsics};
use voxprint::optim::{fit_with, AveragingSchedule, TrainConfig};
use voxprint::synthetic::{orbit_poses, render_views, CubeScene};
use voxprint::render::render_image;
use voxprint::voxgrid::GridSpec;

fn main() -> voxprint::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let iterations = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let learning_rate = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.02);
    let rays_per_batch = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(4096);
    let lambda_struct = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let rms_decay = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.9);
    let alpha_prune_threshold = args.get(9).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let final_lr_ratio = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let averaging = match args.get(6).map(String::as_str) {
        Some("none") => AveragingSchedule::never(),
        _ => AveragingSchedule::default(),
    };

    let scene = CubeScene::default();
    let intrinsics = CameraIntrinsics::from_fov_x(128, 128, 0.8)?;
    let views = render_views(&scene, &intrinsics, &orbit_poses(20, 5.0, scene.center)?, 4)?;
    let split = split_views(views, 5)?;
    let spec = if args.get(8).map(String::as_str) == Some("aligned") {
        // cube faces on averaging-block boundaries: 48 voxels across,
        // starting at voxel (8, 8, 12)
        let p = 2.0 * scene.half_size / 48.0;
        let origin = [8.0, 8.0, 12.0].map(|o| -scene.half_size - o * p);
        GridSpec::new([64, 64, 64], [p; 3], origin)?
    } else {
        GridSpec::centered([64, 64, 64], [3.0 / 64.0; 3], scene.center)?
    };
    let config = TrainConfig {
        iterations,
        learning_rate,
        rays_per_batch,
        lambda_struct,
        rms_decay,
        averaging,
        final_lr_ratio,
        alpha_prune_threshold,
        validate_every: 250,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = fit_with(&split.train, &split.validation, spec, &config, |r, _| {
        if r.iteration % 100 == 0 || r.validation_psnr.is_some() {
            println!(
                "{:6} photo {:.5} struct {:.5} psnr {:?} t={:.1}s",
                r.iteration,
                r.photometric,
                r.structural,
                r.validation_psnr,
                start.elapsed().as_secs_f64()
            );
        }
        Ok(())
    })?;
    // error split by ground-truth pixel class
    let step = config.step_for(&spec);
    let mut sums = [(0.0, 0usize); 3];
    for view in &split.validation {
        let img = render_image(&out.grid, &view.intrinsics, &view.pose, step, config.background)?;
        let (w, h) = (view.width(), view.height());
        for py in 0..h {
            for px in 0..w {
                let a = view.pixel(px, py)[3];
                let mut mixed = false;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (x, y) = (px as i64 + dx, py as i64 + dy);
                        if x >= 0 && y >= 0 && x < w as i64 && y < h as i64 && view.pixel(x as u32, y as u32)[3] != a {
                            mixed = true;
                        }
                    }
                }
                let class = if mixed { 0 } else if a > 0.5 { 1 } else { 2 };
                let t = view.target_rgb(px, py, config.background);
                let r = img.pixel(px, py);
                let e: f64 = (0..3).map(|c| (r[c] - t[c]).powi(2)).sum::<f64>() / 3.0;
                sums[class].0 += e;
                sums[class].1 += 1;
            }
        }
    }
    let total: usize = sums.iter().map(|s| s.1).sum();
    for (name, (e, n)) in ["edge", "cube", "background"].iter().zip(sums) {
        println!("{name:>10}: {n:6} px, mean sq err {:.5}, share of MSE {:.5}", e / n.max(1) as f64, e / total as f64);
    }
    let last = out.reports.last().unwrap();
    println!("final PSNR {:?} in {:.1}s", last.validation_psnr, start.elapsed().as_secs_f64());
    Ok(())
}
