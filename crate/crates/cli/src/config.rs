//! JSON pipeline configuration.
//!
//! ```json
//! {
//!   "dataset": "scene/transforms.json",
//!   "grid": { "dims": [64, 64, 64], "pitch": [0.05, 0.05, 0.05], "origin": null },
//!   "train": { "iterations": 3000, "learning_rate": 0.02 },
//!   "holdout_every": 8,
//!   "checkpoint_every": 0,
//!   "palette": null,
//!   "output_dir": "out",
//!   "rng_seed": 0,
//!   "discretize": { "alpha_threshold": 0.5, "shell_depth": 2 }
//! }
//! ```
//!
//! Relative paths resolve against the config file's directory. Every field
//! is optional; command-line flags override the file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use voxprint::colorsep::{DiscretizeOptions, MaterialPalette};
use voxprint::optim::TrainConfig;
use voxprint::voxgrid::{GridSpec, DEFAULT_PITCH_MM};
use voxprint::Vec3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub dims: [usize; 3],
    /// mm per voxel; defaults to the printer's native pitch.
    pub pitch: Option<[f64; 3]>,
    /// Minimum corner; defaults to centring the grid on the dataset bounds.
    pub origin: Option<[f64; 3]>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            dims: [64, 64, 64],
            pitch: None,
            origin: None,
        }
    }
}

impl GridConfig {
    pub fn spec(&self, center: Vec3) -> voxprint::Result<GridSpec> {
        let pitch = self.pitch.unwrap_or(DEFAULT_PITCH_MM);
        match self.origin {
            Some(origin) => GridSpec::new(self.dims, pitch, origin),
            None => GridSpec::centered(self.dims, pitch, center),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: Option<PathBuf>,
    pub grid: GridConfig,
    pub train: TrainConfig,
    /// Every n-th view is held out for validation.
    pub holdout_every: usize,
    /// Write a grid checkpoint every n iterations; 0 disables.
    pub checkpoint_every: usize,
    pub palette: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Overrides `train.rng_seed` when set.
    pub rng_seed: Option<u64>,
    pub discretize: DiscretizeOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dataset: None,
            grid: GridConfig::default(),
            train: TrainConfig::default(),
            holdout_every: 8,
            checkpoint_every: 0,
            palette: None,
            output_dir: None,
            rng_seed: None,
            discretize: DiscretizeOptions::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.dataset, &mut cfg.palette, &mut cfg.output_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Seed override folded into the training config.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if let Some(seed) = self.rng_seed {
            t.rng_seed = seed;
        }
        t
    }

    pub fn palette(&self) -> anyhow::Result<MaterialPalette> {
        match &self.palette {
            None => Ok(MaterialPalette::default()),
            Some(p) => Ok(MaterialPalette::load(p)?),
        }
    }

    /// Checks everything a reconstruction needs before any work starts.
    pub fn validate_for_reconstruct(&self) -> anyhow::Result<()> {
        match &self.dataset {
            None => bail!(crate::UsageError("no dataset given".into())),
            Some(p) if !p.exists() => {
                bail!(crate::UsageError(format!("dataset {} does not exist", p.display())))
            }
            Some(_) => {}
        }
        if self.output_dir.is_none() {
            bail!(crate::UsageError("no output directory given".into()));
        }
        if let Some(p) = &self.palette {
            if !p.exists() {
                bail!(crate::UsageError(format!("palette {} does not exist", p.display())));
            }
        }
        if self.holdout_every < 2 {
            bail!(crate::UsageError(format!("holdout_every must be at least 2, got {}", self.holdout_every)));
        }
        self.train_config().validate()?;
        self.grid.spec(Vec3::zeros())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        let c: PipelineConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, PipelineConfig::default());
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"datset": "x"}"#).is_err());
    }

    #[test]
    fn relative_paths_follow_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"dataset": "d/transforms.json", "output_dir": "/abs/out", "rng_seed": 7}"#).unwrap();
        let c = PipelineConfig::load(&path).unwrap();
        assert_eq!(c.dataset.unwrap(), dir.path().join("d/transforms.json"));
        assert_eq!(c.output_dir.unwrap(), PathBuf::from("/abs/out"));
        assert_eq!(PipelineConfig::load(&path).unwrap().train_config().rng_seed, 7);
    }

    #[test]
    fn default_grid_uses_printer_pitch() {
        let spec = GridConfig::default().spec(Vec3::zeros()).unwrap();
        assert_eq!(spec.pitch, DEFAULT_PITCH_MM);
        assert!((spec.origin[2] + 32.0 * 0.014).abs() < 1e-12);
    }
}
