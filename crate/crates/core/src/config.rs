//! The single JSON run configuration shared by all command-line entry points.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_json;
use crate::phantom::{OffsetRange, PhantomSpec};
use crate::pipeline::dataset::DatasetConfig;
use crate::pipeline::train::TrainConfig;
use crate::volume::RayIntegralConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Corpus layout; also carries the imaging geometry, views, phantom
    /// template and case offsets.
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    /// Ray step for rendering; the volume's default when absent.
    pub ray_step_mm: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = read_json(path).map_err(|e| match e {
            Error::Json(j) => Error::validation("config", j.to_string()),
            other => other,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every nested invariant; the error names the offending field.
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        if self.train.network.depth > 0 {
            let m = 1usize << self.train.network.depth;
            let [w, h] = self.dataset.geometry.det_px;
            if w % m != 0 || h % m != 0 {
                return Err(Error::validation(
                    "geometry.det_px",
                    format!("must be multiples of {m} for network depth {}", self.train.network.depth),
                ));
            }
        }
        if let Some(s) = self.ray_step_mm {
            RayIntegralConfig { step_mm: s }
                .validate()
                .map_err(|_| Error::validation("ray_step_mm", "must be finite and > 0"))?;
        }
        Ok(())
    }

    pub fn phantom(&self) -> &PhantomSpec {
        &self.dataset.phantom
    }

    pub fn offsets(&self) -> &OffsetRange {
        &self.dataset.offsets
    }
}
