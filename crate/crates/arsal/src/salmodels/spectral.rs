//! Spectral-domain saliency: the log-amplitude residual model (SR) and its
//! phase-only variant (PFT).
//!
//! Both share the same frame: grayscale, resize to a small working width,
//! 2D FFT, manipulate the spectrum, invert, square the magnitude, blur,
//! upsample, min-max.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{SaliencyPredictor, SpectralConfig};
use crate::error::Result;
use crate::grid::{minmax_grid, Grid, SaliencyDensity, ViewportImage};
use crate::imgops;

pub struct SpectralResidual {
    cfg: SpectralConfig,
}

impl SpectralResidual {
    pub fn new(cfg: SpectralConfig) -> Self {
        SpectralResidual { cfg }
    }
}

impl SaliencyPredictor for SpectralResidual {
    fn name(&self) -> &str {
        "SR"
    }

    fn predict(&self, img: &ViewportImage) -> Result<SaliencyDensity> {
        Ok(spectral_saliency(img, self.cfg, SpectrumMode::Residual))
    }
}

pub struct PhaseFourier {
    cfg: SpectralConfig,
}

impl PhaseFourier {
    pub fn new(cfg: SpectralConfig) -> Self {
        PhaseFourier { cfg }
    }
}

impl SaliencyPredictor for PhaseFourier {
    fn name(&self) -> &str {
        "PFT"
    }

    fn predict(&self, img: &ViewportImage) -> Result<SaliencyDensity> {
        Ok(spectral_saliency(img, self.cfg, SpectrumMode::PhaseOnly))
    }
}

#[derive(Clone, Copy)]
enum SpectrumMode {
    /// Keep exp(log-amplitude minus its 3x3 box average), keep phase.
    Residual,
    /// Unit amplitude, keep phase.
    PhaseOnly,
}

fn spectral_saliency(img: &ViewportImage, cfg: SpectralConfig, mode: SpectrumMode) -> SaliencyDensity {
    let gray = img.intensity();
    if gray.is_constant() {
        // degenerate input: flat map by definition
        return SaliencyDensity::raw(Grid::zeros(img.width(), img.height()));
    }
    let ww = cfg.work_width.min(gray.width()).max(2);
    let wh = ((gray.height() as f64 * ww as f64 / gray.width() as f64).round() as usize).max(2);
    let small = imgops::resize_bilinear(&gray, ww, wh);

    let mut spec = fft2(&small, false);
    match mode {
        SpectrumMode::Residual => {
            let log_amp = Grid::from_vec(
                ww,
                wh,
                spec.iter().map(|c| (c.norm() + 1e-12).ln()).collect(),
            )
            .expect("fft grid");
            let smooth = imgops::box3(&log_amp);
            for (i, c) in spec.iter_mut().enumerate() {
                let residual = log_amp.as_slice()[i] - smooth.as_slice()[i];
                let phase = c.arg();
                *c = Complex::from_polar(residual.exp(), phase);
            }
        }
        SpectrumMode::PhaseOnly => {
            for c in spec.iter_mut() {
                let n = c.norm();
                *c = if n > 1e-12 { *c / n } else { Complex::new(0.0, 0.0) };
            }
        }
    }
    let back = ifft2(&mut spec, ww, wh);
    let energy = Grid::from_vec(ww, wh, back.iter().map(|c| c.norm_sqr()).collect()).expect("fft grid");
    let blurred = imgops::gaussian_blur(&energy, cfg.blur_sigma);
    let full = imgops::resize_bilinear(&blurred, img.width(), img.height());
    SaliencyDensity::raw(minmax_grid(&full))
}

/// Row-column 2D FFT; `inverse` selects direction (unnormalized).
fn fft2(src: &Grid, inverse: bool) -> Vec<Complex<f64>> {
    let (w, h) = (src.width(), src.height());
    let mut data: Vec<Complex<f64>> = src.as_slice().iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2_in_place(&mut data, w, h, inverse);
    data
}

fn ifft2(data: &mut Vec<Complex<f64>>, w: usize, h: usize) -> Vec<Complex<f64>> {
    fft2_in_place(data, w, h, true);
    data.clone()
}

fn fft2_in_place(data: &mut [Complex<f64>], w: usize, h: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for row in data.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::salmodels::SalModelConfig;

    fn predictors() -> (SpectralResidual, PhaseFourier) {
        let cfg = SalModelConfig::default().spectral;
        (SpectralResidual::new(cfg), PhaseFourier::new(cfg))
    }

    #[test]
    fn constant_image_gives_flat_map() {
        let img = ViewportImage::constant(48, 32, [0.5, 0.5, 0.5]).unwrap();
        let (sr, pft) = predictors();
        for p in [&sr as &dyn SaliencyPredictor, &pft] {
            let d = p.predict(&img).unwrap();
            assert!(d.grid.is_constant(), "{} not flat", p.name());
            assert_eq!((d.width(), d.height()), (48, 32));
        }
    }

    #[test]
    fn popout_patch_attracts_argmax() {
        // bright 4x4 patch on black; both models must peak inside it
        let img = fixtures::popout_image(64, 64, 24, 30, 4);
        let (sr, pft) = predictors();
        let mut argmaxes = Vec::new();
        for p in [&sr as &dyn SaliencyPredictor, &pft] {
            let d = p.predict(&img).unwrap();
            assert!((d.grid.min() - 0.0).abs() < 1e-12 && (d.grid.max() - 1.0).abs() < 1e-12);
            let (ax, ay) = d.grid.argmax();
            assert!(
                (24..28).contains(&ax) && (30..34).contains(&ay),
                "{}: argmax ({ax},{ay}) outside patch",
                p.name()
            );
            argmaxes.push((ax, ay));
        }
        // SR and PFT agree on the pop-out argmax
        assert_eq!(argmaxes[0], argmaxes[1]);
    }

    #[test]
    fn brightness_scaling_preserves_argmax() {
        let img = fixtures::popout_image(64, 64, 10, 40, 4);
        let dim = {
            let scale = |g: &Grid| g.map(|v| v * 0.5);
            ViewportImage::new(
                [scale(img.channel(0)), scale(img.channel(1)), scale(img.channel(2))],
                img.alpha().clone(),
            )
            .unwrap()
        };
        let (sr, _) = predictors();
        let a = sr.predict(&img).unwrap();
        let b = sr.predict(&dim).unwrap();
        assert_eq!(a.grid.argmax(), b.grid.argmax());
    }

    #[test]
    fn output_matches_input_dimensions() {
        let img = fixtures::popout_image(50, 70, 20, 30, 4);
        let (sr, pft) = predictors();
        for p in [&sr as &dyn SaliencyPredictor, &pft] {
            let d = p.predict(&img).unwrap();
            assert_eq!((d.width(), d.height()), (50, 70));
            assert!(d.grid.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
