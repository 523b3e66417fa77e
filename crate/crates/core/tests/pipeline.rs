use voxprint::colorsep::{discretize, DiscretizeOptions, Material, MaterialPalette};
use voxprint::dataset::{load_manifest, split_views, CameraIntrinsics};
use voxprint::optim::{fit, view_mse, TrainConfig};
use voxprint::render::WHITE;
use voxprint::slicer::{export_stack, import_stack, slice, unslice};
use voxprint::synthetic::{orbit_poses, render_views, write_dataset, CubeScene};
use voxprint::voxgrid::{GridSpec, VoxelGrid};

#[test]
fn written_dataset_loads_back() {
    let scene = CubeScene::default();
    let k = CameraIntrinsics::from_fov_x(24, 20, 0.7).unwrap();
    let views = render_views(&scene, &k, &orbit_poses(5, 4.0, scene.center).unwrap(), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), &views, Some(scene.bounds())).unwrap();
    let ds = load_manifest(&manifest).unwrap();
    assert_eq!(ds.images.len(), 5);
    assert_eq!(ds.bounds, scene.bounds());
    for (a, b) in ds.images.iter().zip(&views) {
        assert_eq!(a.intrinsics, b.intrinsics);
        assert!((a.pose.matrix() - b.pose.matrix()).amax() < 1e-12);
        for (p, q) in a.pixels().iter().zip(b.pixels()) {
            // 8-bit sRGB quantization; worst in the darkest linear values
            for c in 0..3 {
                assert!((p[c] - q[c]).abs() < 0.01, "{p:?} vs {q:?}");
            }
            assert!((p[3] - q[3]).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}

#[test]
fn short_fit_beats_initial_grid_and_survives_export() {
    let scene = CubeScene::default();
    let k = CameraIntrinsics::from_fov_x(32, 32, 0.8).unwrap();
    let views = render_views(&scene, &k, &orbit_poses(10, 5.0, scene.center).unwrap(), 2).unwrap();
    let split = split_views(views, 5).unwrap();
    let spec = GridSpec::centered([16, 16, 16], [0.15; 3], scene.center).unwrap();
    let config = TrainConfig {
        iterations: 150,
        rays_per_batch: 1024,
        learning_rate: 0.02,
        ..TrainConfig::default()
    };
    let step = config.step_for(&spec);
    let init = VoxelGrid::new(spec, config.init_rgb, config.init_alpha).unwrap();
    let before = view_mse(&init, &split.validation, step, WHITE).unwrap();
    let out = fit(&split.train, &split.validation, spec, &config).unwrap();
    assert_eq!(out.reports.len(), 150);
    let after = view_mse(&out.grid, &split.validation, step, WHITE).unwrap();
    assert!(after < 0.5 * before, "{before} -> {after}");
    assert!(out.reports.iter().all(|r| r.total.is_finite() && r.photometric >= 0.0));

    let mgrid = discretize(&out.grid, &MaterialPalette::default(), &DiscretizeOptions::default()).unwrap();
    assert!(mgrid.count(Material::Empty) < spec.voxel_count());
    let dir = tempfile::tempdir().unwrap();
    mgrid.save(&dir.path().join("m.poxm")).unwrap();
    export_stack(&slice(&mgrid), &dir.path().join("layers")).unwrap();
    let back = unslice(&import_stack(&dir.path().join("layers")).unwrap()).unwrap();
    assert_eq!(back, mgrid);
    assert_eq!(voxprint::colorsep::MaterialGrid::load(&dir.path().join("m.poxm")).unwrap(), mgrid);
}

#[test]
fn fit_is_reproducible() {
    let scene = CubeScene::default();
    let k = CameraIntrinsics::from_fov_x(16, 16, 0.8).unwrap();
    let views = render_views(&scene, &k, &orbit_poses(4, 5.0, scene.center).unwrap(), 1).unwrap();
    let spec = GridSpec::centered([8, 8, 8], [0.3; 3], scene.center).unwrap();
    let config = TrainConfig {
        iterations: 20,
        rays_per_batch: 300,
        rng_seed: 3,
        ..TrainConfig::default()
    };
    let a = fit(&views, &[], spec, &config).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let b = pool.install(|| fit(&views, &[], spec, &config).unwrap());
    assert_eq!(a.grid, b.grid);
    assert_eq!(a.reports, b.reports);
}
