//! `key = value` pipeline configuration files.
//!
//! ```text
//! # comment
//! windows = -900:0, 0:300
//! coarse_shape = 64, 64, 64
//! fine_patch = 32
//! roi_margin_voxels = 2
//! threshold = 0.5
//! views = axial, coronal, sagittal
//! fusion = union
//! coarse_model = coarse.unw
//! model = fine_a.unw
//! model = fine_b.unw
//! analytic = 1, 1, 0.75
//! fixpoint_iterations = 2
//! fixpoint_expand_voxels = 5
//! fixpoint_connectivity = 26
//! ```
//!
//! `model` may repeat; every other key may appear once. Relative model
//! paths resolve against the directory holding the config file.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use paseg_core::pipeline::Fusion;
use paseg_core::{AnalyticBackend, SegConfig};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config line {line}: {message}")]
    Syntax { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineConfigFile {
    pub seg: SegConfig,
    pub coarse_model: Option<PathBuf>,
    pub models: Vec<PathBuf>,
    pub analytic: AnalyticBackend,
}

fn list<T: FromStr>(value: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(|v| v.trim().parse::<T>().map_err(|e| format!("'{}': {e}", v.trim()))).collect()
}

fn scalar<T: FromStr>(value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("'{value}': {e}"))
}

/// One value for a cube or three comma-separated values.
pub fn parse_shape(value: &str) -> Result<[usize; 3], String> {
    match list::<usize>(value)?.as_slice() {
        [n] => Ok([*n; 3]),
        [x, y, z] => Ok([*x, *y, *z]),
        _ => Err(format!("shape '{value}' needs 1 or 3 values")),
    }
}

impl PipelineConfigFile {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| ConfigError::Syntax { line: i + 1, message };
            let (key, value) =
                line.split_once('=').ok_or_else(|| err(format!("expected key = value, got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            if key != "model" && !seen.insert(key.to_owned()) {
                return Err(err(format!("duplicate key '{key}'")));
            }
            cfg.apply(key, value, base_dir).map_err(err)?;
        }
        cfg.seg.validate().map_err(|e| ConfigError::Syntax { line: 0, message: e.to_string() })?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str, base_dir: &Path) -> Result<(), String> {
        let seg = &mut self.seg;
        match key {
            "windows" => seg.windows = list(value)?,
            "coarse_shape" => seg.coarse_shape = parse_shape(value)?,
            "fine_patch" => seg.fine_patch = parse_shape(value)?,
            "roi_margin_voxels" => seg.roi_margin_voxels = scalar(value)?,
            "threshold" => seg.threshold = scalar(value)?,
            "views" => seg.views = list(value)?,
            "fusion" => {
                seg.fusion = match value.to_ascii_lowercase().as_str() {
                    "union" => Fusion::Union,
                    other => return Err(format!("unknown fusion '{other}'")),
                }
            }
            "coarse_model" => self.coarse_model = Some(base_dir.join(value)),
            "model" => self.models.push(base_dir.join(value)),
            "analytic" => match list::<f64>(value)?.as_slice() {
                [w0, w1, t] => self.analytic = AnalyticBackend::new(*w0, *w1, *t),
                _ => return Err("analytic needs three values: w0, w1, t".into()),
            },
            "fixpoint_iterations" => seg.fixpoint.iterations = scalar(value)?,
            "fixpoint_expand_voxels" => seg.fixpoint.expand_voxels = scalar(value)?,
            "fixpoint_connectivity" => seg.fixpoint.connectivity = scalar(value)?,
            other => return Err(format!("unknown key '{other}'")),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use paseg_core::{Connectivity, ViewAxis, WindowSpec};

    #[test]
    fn defaults_when_empty() {
        let cfg = PipelineConfigFile::parse("# nothing\n\n", Path::new("/cfg")).unwrap();
        assert_eq!(cfg, PipelineConfigFile::default());
    }

    #[test]
    fn every_key() {
        let text = "windows = -900:0, 0:300 # trailing comment\n\
                    coarse_shape = 32, 48, 64\nfine_patch = 16\nroi_margin_voxels = 3\n\
                    threshold = 0.4\nviews = axial, sagittal\nfusion = union\n\
                    coarse_model = c.unw\nmodel = a.unw\nmodel = /abs/b.unw\n\
                    analytic = 1, 2, -2.25\nfixpoint_iterations = 1\n\
                    fixpoint_expand_voxels = 4\nfixpoint_connectivity = 6\n";
        let cfg = PipelineConfigFile::parse(text, Path::new("/cfg")).unwrap();
        assert_eq!(cfg.seg.windows, vec![WindowSpec::LUNG, WindowSpec::TRUNK]);
        assert_eq!(cfg.seg.coarse_shape, [32, 48, 64]);
        assert_eq!(cfg.seg.fine_patch, [16; 3]);
        assert_eq!(cfg.seg.roi_margin_voxels, 3);
        assert_eq!(cfg.seg.threshold, 0.4);
        assert_eq!(cfg.seg.views, vec![ViewAxis::Axial, ViewAxis::Sagittal]);
        assert_eq!(cfg.coarse_model, Some(PathBuf::from("/cfg/c.unw")));
        assert_eq!(cfg.models, vec![PathBuf::from("/cfg/a.unw"), PathBuf::from("/abs/b.unw")]);
        assert_eq!(cfg.analytic, AnalyticBackend::new(1.0, 2.0, -2.25));
        assert_eq!(cfg.seg.fixpoint.iterations, 1);
        assert_eq!(cfg.seg.fixpoint.expand_voxels, 4);
        assert_eq!(cfg.seg.fixpoint.connectivity, Connectivity::Six);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "unknown = 1",
            "threshold",
            "threshold = 0.5\nthreshold = 0.6",
            "coarse_shape = 1, 2",
            "windows = 0:-10",
            "views = top",
            "threshold = 2",
            "fusion = mean",
            "analytic = 1, 2",
        ] {
            assert!(PipelineConfigFile::parse(text, Path::new(".")).is_err(), "{text}");
        }
    }
}
