//! Run configuration files.
//!
//! Paths inside a config are resolved against the directory holding it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureId, FeatureParams};
use crate::spatial::PixelGridFrame;

fn default_width() -> usize {
    320
}
fn default_height() -> usize {
    240
}
fn default_pitch() -> f64 {
    360.0
}

/// Corrected pixel grid dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_height")]
    pub height: usize,
    #[serde(default = "default_pitch")]
    pub pitch_um: f64,
    /// Pixel whose lower corner is the plate center; the frame center when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_pixel: Option<[usize; 2]>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            width: default_width(),
            height: default_height(),
            pitch_um: default_pitch(),
            origin_pixel: None,
        }
    }
}

impl GridSpec {
    pub fn frame(&self) -> Result<PixelGridFrame> {
        let origin = self.origin_pixel.map_or((self.width / 2, self.height / 2), |[x, y]| (x, y));
        PixelGridFrame::new(self.pitch_um, origin, self.width, self.height)
            .map_err(|e| Error::Config(format!("grid: {e}")))
    }
}

/// Half-open layer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerRange {
    pub start: usize,
    pub end: usize,
}

impl LayerRange {
    /// Parses `a..b` (half-open), `a..=b` (inclusive) or a single layer `a`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad layer range {s:?}; expected a..b, a..=b or a"));
        let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
        let r = if let Some((a, b)) = s.split_once("..=") {
            LayerRange {
                start: num(a)?,
                end: num(b)? + 1,
            }
        } else if let Some((a, b)) = s.split_once("..") {
            LayerRange {
                start: num(a)?,
                end: num(b)?,
            }
        } else {
            let a = num(s)?;
            LayerRange { start: a, end: a + 1 }
        };
        if r.start >= r.end {
            return Err(bad());
        }
        Ok(r)
    }

    pub fn layers(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    pub fn clamp_to(&self, count: usize) -> Self {
        LayerRange {
            start: self.start.min(count),
            end: self.end.min(count),
        }
    }
}

impl std::fmt::Display for LayerRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Simulation spec rendered in memory instead of reading frames.
    pub simulation: Option<PathBuf>,
    /// Directory of per-layer frame stack files.
    pub frames_dir: Option<PathBuf>,
    #[serde(default)]
    pub stl: Vec<PathBuf>,
    pub voxel_cache: Option<PathBuf>,
    pub correspondences: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Replaces the simulation spec's seed when set.
    pub seed: Option<u64>,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    pub layers: Option<String>,
    pub features: Option<Vec<String>>,
    #[serde(default)]
    pub paths: PathsConfig,
    pub grid: Option<GridSpec>,
    /// Voxel height for STL input, µm.
    pub layer_thickness_um: Option<f64>,
    #[serde(default)]
    pub extraction: FeatureParams,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_jobs() -> usize {
    1
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            jobs: 1,
            layers: None,
            features: None,
            paths: PathsConfig::default(),
            grid: None,
            layer_thickness_um: None,
            extraction: FeatureParams::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml(&text, dir).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        self.layer_range()?;
        self.selected_features()?;
        self.extraction.validate()?;
        if let Some(t) = self.layer_thickness_um {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::Config(format!("layer_thickness_um must be positive, got {t}")));
            }
        }
        if self.paths.simulation.is_some() && self.paths.frames_dir.is_some() {
            return Err(Error::Config("set either paths.simulation or paths.frames_dir, not both".into()));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn layer_range(&self) -> Result<Option<LayerRange>> {
        self.layers.as_deref().map(LayerRange::parse).transpose()
    }

    /// Requested features, all of them when none are listed.
    pub fn selected_features(&self) -> Result<Vec<FeatureId>> {
        match &self.features {
            None => Ok(FeatureId::ALL.to_vec()),
            Some(names) => {
                let mut ids = names.iter().map(|n| n.parse()).collect::<Result<Vec<FeatureId>>>()?;
                if ids.is_empty() {
                    return Err(Error::Config("feature list is empty".into()));
                }
                ids.sort();
                ids.dedup();
                Ok(ids)
            }
        }
    }
}
