//! Classical bottom-up saliency predictors used as the base model of the
//! fusion benchmarks. Three representatives are implemented: the
//! center-surround pyramid model (IT), spectral residual (SR), and the
//! phase-only Fourier transform (PFT).
//!
//! All parameterizations live in [`SalModelConfig`] so benchmark runs are
//! reproducible; every predictor is pure, deterministic, and returns a
//! min-max-normalized map matching the input dimensions.

mod itti;
mod spectral;

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::grid::{SaliencyDensity, ViewportImage};

pub use itti::IttiKoch;
pub use spectral::{PhaseFourier, SpectralResidual};

/// Identifier of a built-in classical model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelId {
    /// Center-surround pyramid model.
    IT,
    /// Spectral residual.
    SR,
    /// Phase-only Fourier transform.
    PFT,
}

impl ModelId {
    pub const ALL: [ModelId; 3] = [ModelId::IT, ModelId::SR, ModelId::PFT];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelId::IT => "IT",
            ModelId::SR => "SR",
            ModelId::PFT => "PFT",
        }
    }
}

impl FromStr for ModelId {
    type Err = Error;
    fn from_str(s: &str) -> Result<ModelId> {
        match s.to_ascii_uppercase().as_str() {
            "IT" => Ok(ModelId::IT),
            "SR" => Ok(ModelId::SR),
            "PFT" => Ok(ModelId::PFT),
            other => Err(Error::invalid(format!("unknown model id `{other}`"))),
        }
    }
}

impl std::fmt::Display for ModelId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Spectral-domain model parameters (shared by SR and PFT).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectralConfig {
    /// Working width the image is resized to before the FFT.
    pub work_width: usize,
    /// Gaussian blur applied to the squared reconstruction magnitude.
    pub blur_sigma: f64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        SpectralConfig {
            work_width: 64,
            blur_sigma: 2.5,
        }
    }
}

/// Center-surround pyramid model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IttiConfig {
    /// Inputs with a shorter side are upscaled before processing.
    pub min_short_side: usize,
    /// Pyramid depth (level 0 is the working image).
    pub levels: usize,
    /// Pyramid level the conspicuity maps are accumulated at.
    pub common_scale: usize,
    /// Gabor kernel size (odd).
    pub gabor_size: usize,
    pub gabor_sigma: f64,
    pub gabor_wavelength: f64,
    /// Intensity floor (fraction of the level maximum) below which color
    /// opponency is zeroed.
    pub luminance_floor: f64,
}

impl Default for IttiConfig {
    fn default() -> Self {
        IttiConfig {
            min_short_side: 256,
            levels: 9,
            common_scale: 4,
            gabor_size: 9,
            gabor_sigma: 2.4,
            gabor_wavelength: 5.6,
            luminance_floor: 0.1,
        }
    }
}

/// Locked parameterization of every classical model.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SalModelConfig {
    pub spectral: SpectralConfig,
    pub itti: IttiConfig,
}

/// A saliency predictor: a name and a pure image-to-density map.
pub trait SaliencyPredictor: Send + Sync {
    fn name(&self) -> &str;
    fn predict(&self, img: &ViewportImage) -> Result<SaliencyDensity>;
}

/// Name-indexed predictor registry; rejects unknown ids, extensible with
/// user predictors through [`Registry::register`].
pub struct Registry {
    predictors: BTreeMap<String, Box<dyn SaliencyPredictor>>,
}

impl Registry {
    pub fn empty() -> Registry {
        Registry {
            predictors: BTreeMap::new(),
        }
    }

    /// Registry holding the three built-in models.
    pub fn builtin(config: &SalModelConfig) -> Registry {
        let mut r = Registry::empty();
        r.register(Box::new(IttiKoch::new(config.itti)));
        r.register(Box::new(SpectralResidual::new(config.spectral)));
        r.register(Box::new(PhaseFourier::new(config.spectral)));
        r
    }

    pub fn register(&mut self, p: Box<dyn SaliencyPredictor>) {
        self.predictors.insert(p.name().to_string(), p);
    }

    pub fn get(&self, name: &str) -> Result<&dyn SaliencyPredictor> {
        self.predictors
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::invalid(format!("no predictor registered under `{name}`")))
    }

    pub fn names(&self) -> Vec<&str> {
        self.predictors.keys().map(|s| s.as_str()).collect()
    }
}

/// Predicts a batch of images, in parallel when the `parallel` feature is on.
pub fn predict_batch(
    predictor: &dyn SaliencyPredictor,
    images: &[ViewportImage],
) -> Result<Vec<SaliencyDensity>> {
    exec::map_batch(images, |img| predictor.predict(img))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn model_id_parsing() {
        assert_eq!("sr".parse::<ModelId>().unwrap(), ModelId::SR);
        assert_eq!("IT".parse::<ModelId>().unwrap(), ModelId::IT);
        assert!("GBVS".parse::<ModelId>().is_err());
    }

    #[test]
    fn registry_rejects_unknown_ids() {
        let r = Registry::builtin(&SalModelConfig::default());
        assert!(r.get("SR").is_ok());
        assert!(r.get("AIM").is_err());
        assert_eq!(r.names(), vec!["IT", "PFT", "SR"]);
    }

    #[test]
    fn predictors_are_deterministic() {
        let r = Registry::builtin(&SalModelConfig::default());
        let img = fixtures::popout_image(64, 64, 24, 24, 4);
        for name in ["SR", "PFT"] {
            let p = r.get(name).unwrap();
            let a = p.predict(&img).unwrap();
            let b = p.predict(&img).unwrap();
            assert_eq!(a.grid.as_slice(), b.grid.as_slice(), "{name} not bit-stable");
        }
    }

    #[test]
    fn batch_matches_single() {
        let r = Registry::builtin(&SalModelConfig::default());
        let p = r.get("SR").unwrap();
        let imgs = vec![
            fixtures::popout_image(32, 32, 10, 10, 4),
            fixtures::popout_image(32, 32, 20, 6, 4),
        ];
        let batch = predict_batch(p, &imgs).unwrap();
        for (img, out) in imgs.iter().zip(&batch) {
            assert_eq!(out.grid.as_slice(), p.predict(img).unwrap().grid.as_slice());
        }
    }
}
