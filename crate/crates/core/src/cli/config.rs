use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Layout;
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, MeshMode};
use crate::field::FieldConfig;
use crate::slam::SlamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Relative paths resolve against the config file's directory.
    pub path: PathBuf,
    pub layout: Layout,
    /// Use only the first `max_frames` frames.
    pub max_frames: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::from("data"),
            layout: Layout::SyntheticDump,
            max_frames: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshOptions {
    pub resolution: usize,
    pub mode: MeshMode,
    /// Remove geometry no training camera observed before mesh metrics.
    pub cull: bool,
    /// How far behind the observed depth a vertex still counts as seen, m.
    pub cull_margin: f64,
    pub metric_samples: usize,
    pub threshold_cm: f64,
}

impl Default for MeshOptions {
    fn default() -> Self {
        Self {
            resolution: 64,
            mode: MeshMode::PerClass,
            cull: true,
            cull_margin: 0.05,
            metric_samples: 200_000,
            threshold_cm: 5.0,
        }
    }
}

/// Everything a run needs. Precedence: built-in defaults, then the config
/// file, then command-line flags. The top-level `seed` is copied into the
/// field, SLAM and evaluation seeds when the config is resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub dataset: DatasetConfig,
    pub field: FieldConfig,
    pub slam: SlamConfig,
    pub eval: EvalConfig,
    pub mesh: MeshOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: PathBuf::from("out"),
            dataset: DatasetConfig::default(),
            field: FieldConfig::default(),
            slam: SlamConfig::default(),
            eval: EvalConfig::default(),
            mesh: MeshOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads, resolves and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if cfg.dataset.path.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.dataset.path = base.join(&cfg.dataset.path);
        }
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Propagates the master seed.
    pub fn resolve(&mut self) {
        self.field.seed = self.seed;
        self.slam.seed = self.seed;
        self.eval.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        self.slam.validate()?;
        self.eval.validate()?;
        if self.mesh.resolution < 2 || self.mesh.metric_samples == 0 || !(self.mesh.threshold_cm > 0.0) {
            return Err(Error::Config("mesh needs resolution >= 2, samples >= 1, threshold > 0".into()));
        }
        if self.dataset.max_frames == Some(0) {
            return Err(Error::Config("dataset.max_frames must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Configuration for the bundled synthetic scene.
    pub fn toy(dataset: PathBuf) -> Self {
        let mut cfg = Self {
            dataset: DatasetConfig {
                path: dataset,
                layout: Layout::SyntheticDump,
                max_frames: None,
            },
            slam: SlamConfig::toy(),
            ..Self::default()
        };
        cfg.eval.stride = 5;
        cfg.resolve();
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_unknown_keys() {
        let cfg = RunConfig::toy(PathBuf::from("d"));
        let back = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert!(RunConfig::parse("nonsense = 3").is_err());
        assert!(RunConfig::parse("[slam]\ntrack_iterz = 3").is_err());
        let partial = RunConfig::parse("seed = 7\n[slam]\nmap_iters = 3\n").unwrap();
        assert_eq!(partial.slam.map_iters, 3);
        assert_eq!(partial.slam.track_iters, SlamConfig::default().track_iters);
    }

    #[test]
    fn load_resolves_paths_and_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 11\n[dataset]\npath = \"frames\"\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.dataset.path, dir.path().join("frames"));
        assert_eq!((cfg.field.seed, cfg.slam.seed, cfg.eval.seed), (11, 11, 11));
        std::fs::write(&path, "[slam]\nwindow = 1\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
        assert!(matches!(RunConfig::load(&dir.path().join("missing.toml")), Err(Error::Config(_))));
    }
}
