//! Pipeline configuration: one JSON document supplies the viewport geometry,
//! fixation parameters, model parameterizations, loss weights, and the root
//! seed every random choice flows from.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gazeproc::FixationParams;
use crate::grid::ViewportSpec;
use crate::salmodels::SalModelConfig;
use crate::vqsal::VQLossWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Root seed; every stochastic stage derives its stream from it.
    pub seed: u64,
    pub viewport: ViewportSpec,
    pub fixation: FixationParams,
    pub salmodels: SalModelConfig,
    pub vq: VQLossWeights,
    /// Gaussian width for ground-truth densities, degrees of visual angle.
    pub density_sigma_deg: f64,
    /// Cross-validation fold count.
    pub folds: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            viewport: ViewportSpec::default(),
            fixation: FixationParams::default(),
            salmodels: SalModelConfig::default(),
            vq: VQLossWeights::default(),
            density_sigma_deg: crate::gazeproc::DEFAULT_SIGMA_DEG,
            folds: 5,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<PipelineConfig> {
        let cfg: PipelineConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.viewport.validate()?;
        self.fixation.validate()?;
        self.vq.validate()?;
        if self.folds < 2 {
            return Err(crate::error::Error::invalid("folds must be at least 2"));
        }
        Ok(())
    }

    /// Canonical JSON used for the reproducibility hash.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
