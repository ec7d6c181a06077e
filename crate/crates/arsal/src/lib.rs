//! Augmented-reality viewport saliency toolkit.
//!
//! The crate covers the full pipeline for studying visual attention on
//! superimposed (AR-over-background) viewport imagery:
//!
//! 1. **compositor** – rectilinear viewport extraction from equirectangular
//!    backgrounds, AR padding, and alpha superimposition.
//! 2. **gazeproc** – tracker logs to fixations to ground-truth densities.
//! 3. **salmodels** – classical bottom-up predictors (IT, SR, PFT).
//! 4. **vqsal** – a desk-scale vector-quantized saliency network with a
//!    hand-rolled reverse-mode tape, codebook losses, frozen-encoder
//!    transfer, and a three-decoder fusion head.
//! 5. **fusion** – the Type I/II/III benchmark constructions.
//! 6. **metrics** – AUC, sAUC, CC, NSS, SIM, KL, IG.
//! 7. **analysis** – subject-consistency curves, cross-mixing correlation,
//!    leakage-audited 5-fold evaluation.
//!
//! Batch stages run data-parallel under the default `parallel` feature and
//! fall back to sequential execution without it.

pub mod analysis;
pub mod compositor;
pub mod config;
pub mod error;
pub mod exec;
pub mod fixtures;
pub mod fusion;
pub mod gazeproc;
pub mod grid;
pub mod imgops;
pub mod io;
pub mod metrics;
pub mod projection;
pub mod salmodels;
pub mod vqsal;

pub use error::{Error, Result};
pub use grid::{
    ArCategory, FixationMap, Grid, MixingLevel, NormalizationState, NormalizeMode, SaliencyDensity,
    ScenarioRecord, ViewportImage, ViewportSpec,
};
