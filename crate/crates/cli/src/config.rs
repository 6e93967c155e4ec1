//! Optional project configuration file. Command-line flags take precedence.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RdeSettings {
    pub iou_threshold: Option<f64>,
    pub min_count: Option<usize>,
    pub min_conf: Option<f64>,
    pub require_consecutive: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    pub dataset: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub detector: Option<String>,
    pub seed: Option<u64>,
    pub threshold: Option<f64>,
    #[serde(default)]
    pub rde: RdeSettings,
    pub region_map: Option<PathBuf>,
    pub media_root: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    pub parallelism: Option<usize>,
}

impl ProjectConfig {
    /// Load a config file. Relative paths inside it are taken relative to
    /// the file's own directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: ProjectConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.dataset,
            &mut cfg.detections,
            &mut cfg.region_map,
            &mut cfg.media_root,
            &mut cfg.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(t) = cfg.threshold {
            crate::check_unit(t, "threshold").map_err(CliError::Usage)?;
        }
        Ok(cfg)
    }

    /// `flag`, else the configured value, else `output_dir/default_name`.
    pub fn output(&self, flag: Option<PathBuf>, default_name: &str, what: &str) -> Result<PathBuf, CliError> {
        flag.or_else(|| self.output_dir.as_ref().map(|d| d.join(default_name)))
            .ok_or_else(|| CliError::Usage(format!("no {what} path: pass a flag or set output_dir in --config")))
    }

    pub fn optional_output(&self, flag: Option<PathBuf>, default_name: &str) -> Option<PathBuf> {
        flag.or_else(|| self.output_dir.as_ref().map(|d| d.join(default_name)))
    }
}

pub fn required(flag: Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| configured.clone())
        .ok_or_else(|| CliError::Usage(format!("missing {what}: pass --{what} or set it in --config")))
}
