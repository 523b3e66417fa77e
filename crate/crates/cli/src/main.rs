//! `voxprint` command-line front end.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "voxprint", version, about = "Printable voxel reconstruction, color separation and slicing")]
struct Cli {
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true, env = "VOXPRINT_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit an RGBA voxel grid to posed images.
    Reconstruct(ReconstructArgs),
    /// Separate an RGBA grid into printer materials.
    Discretize(DiscretizeArgs),
    /// Cut a material grid into layer rasters and a manifest.
    Slice(SliceArgs),
    /// Render an RGBA or material grid to a PNG.
    Preview(PreviewArgs),
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    /// Pipeline config (JSON); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest (transforms.json).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory for the grid, log and checkpoints.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Voxel counts NX NY NZ.
    #[arg(long, num_args = 3, value_names = ["NX", "NY", "NZ"])]
    dims: Option<Vec<usize>>,
    /// Voxel pitch in mm, PX PY PZ.
    #[arg(long, num_args = 3, value_names = ["PX", "PY", "PZ"])]
    pitch: Option<Vec<f64>>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    rays_per_batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    holdout_every: Option<usize>,
}

#[derive(Debug, Args)]
struct DiscretizeArgs {
    /// RGBA grid (POXV1).
    #[arg(long)]
    input: PathBuf,
    /// Material grid to write (POXM1).
    #[arg(long)]
    out: PathBuf,
    /// Pipeline config whose `palette` and `discretize` sections apply.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Palette JSON.
    #[arg(long)]
    palette: Option<PathBuf>,
    #[arg(long)]
    alpha_threshold: Option<f64>,
    #[arg(long)]
    shell_depth: Option<usize>,
    #[arg(long)]
    clear_coat: Option<usize>,
    /// Confine error diffusion to z-slabs of this many layers and run them in parallel.
    #[arg(long)]
    slab_layers: Option<usize>,
}

#[derive(Debug, Args)]
struct SliceArgs {
    /// Material grid (POXM1).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Palette JSON for layer display colors.
    #[arg(long)]
    palette: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PreviewArgs {
    /// POXV1 or POXM1 file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    width: u32,
    #[arg(long, default_value_t = 256)]
    height: u32,
    /// Degrees around +z, from +x.
    #[arg(long, default_value_t = 30.0, allow_negative_numbers = true)]
    azimuth: f64,
    /// Degrees above the xy plane.
    #[arg(long, default_value_t = 25.0, allow_negative_numbers = true)]
    elevation: f64,
    /// Camera distance from the grid centre; defaults to framing the grid.
    #[arg(long)]
    distance: Option<f64>,
    /// Horizontal field of view in degrees.
    #[arg(long, default_value_t = 40.0)]
    fov: f64,
    /// Rays per pixel along each axis.
    #[arg(long, default_value_t = 1)]
    supersample: u32,
    /// Linear RGB background.
    #[arg(long, num_args = 3, value_names = ["R", "G", "B"])]
    background: Option<Vec<f64>>,
    /// Palette JSON for material grids.
    #[arg(long)]
    palette: Option<PathBuf>,
}

/// Bad invocation or input that the user can fix.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .any(|e| e.downcast_ref::<voxprint::Error>().is_some_and(voxprint::Error::is_numerical));
    if numerical {
        3
    } else {
        2
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Reconstruct(a) => commands::reconstruct(a),
        Command::Discretize(a) => commands::discretize(a),
        Command::Slice(a) => commands::slice(a),
        Command::Preview(a) => commands::preview(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VOXPRINT_LOG", "info")).init();
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    let result = pool
        .build()
        .map_err(anyhow::Error::from)
        .and_then(|pool| pool.install(|| run(cli)));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
