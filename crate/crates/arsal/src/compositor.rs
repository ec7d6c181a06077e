//! Builds superimposed perceptual viewport images from AR content, an
//! omnidirectional background, and a mixing value.
//!
//! The per-pixel blend is `I_S = a*I_AR + (1 - a)*I_BG` with `a = alpha *
//! I_alpha`, computed in linear [0,1] space; quantization happens only at
//! export.

use crate::error::{Error, Result};
use crate::grid::{ArCategory, Grid, MixingLevel, ScenarioRecord, ViewportImage, ViewportSpec};
use crate::projection::ViewportProjection;

/// Where the AR image sits inside the viewport. Offsets are the top-left
/// margin in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Placement {
    #[default]
    Centered,
    Offset {
        left: usize,
        top: usize,
    },
}

/// Extracts the rectilinear viewport of an equirectangular background.
///
/// Bilinear sampling with horizontal wrap and vertical clamp; the output
/// transparency matrix is all-ones.
pub fn extract_viewport(bg_equirect: &ViewportImage, spec: &ViewportSpec) -> Result<ViewportImage> {
    let we = bg_equirect.width();
    let he = bg_equirect.height();
    if we.abs_diff(2 * he) > 1 {
        return Err(Error::invalid(format!(
            "equirect must be 2:1 (got {we}x{he}); width must equal 2*height within 1 px"
        )));
    }
    let proj = ViewportProjection::new(spec)?;
    let (w, h) = (spec.width_px, spec.height_px);
    let mut channels = [Grid::zeros(w, h), Grid::zeros(w, h), Grid::zeros(w, h)];
    for y in 0..h {
        for x in 0..w {
            let (lat, long) = proj.pixel_to_latlong(x, y);
            let rgb = sample_equirect(bg_equirect, lat, long);
            for c in 0..3 {
                channels[c].set(x, y, rgb[c]);
            }
        }
    }
    ViewportImage::new(channels, Grid::constant(w, h, 1.0))
}

/// Bilinear equirect lookup at a sphere point.
fn sample_equirect(img: &ViewportImage, lat_deg: f64, long_deg: f64) -> [f64; 3] {
    let we = img.width() as f64;
    let he = img.height() as f64;
    let xe = (long_deg + 180.0) / 360.0 * we - 0.5;
    let ye = ((90.0 - lat_deg) / 180.0 * he - 0.5).clamp(0.0, he - 1.0);

    let x0 = xe.floor();
    let fx = xe - x0;
    let y0 = ye.floor();
    let fy = ye - y0;

    let wrap = |x: i64| -> usize {
        let w = img.width() as i64;
        (((x % w) + w) % w) as usize
    };
    let xi0 = wrap(x0 as i64);
    let xi1 = wrap(x0 as i64 + 1);
    let yi0 = y0 as usize;
    let yi1 = (yi0 + 1).min(img.height() - 1);

    let mut out = [0.0f64; 3];
    for c in 0..3 {
        let g = img.channel(c);
        let v00 = g.get(xi0, yi0);
        let v10 = g.get(xi1, yi0);
        let v01 = g.get(xi0, yi1);
        let v11 = g.get(xi1, yi1);
        out[c] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11);
    }
    out
}

/// Pads an AR image to the viewport size. The padded region carries zeros in
/// both the color and the transparency planes; original pixels are preserved.
/// Centering uses floor rounding for odd margins.
pub fn pad_ar(ar: &ViewportImage, spec: &ViewportSpec, placement: Placement) -> Result<ViewportImage> {
    spec.validate()?;
    let (aw, ah) = (ar.width(), ar.height());
    let (vw, vh) = (spec.width_px, spec.height_px);
    if aw > vw || ah > vh {
        return Err(Error::invalid(format!(
            "AR image {aw}x{ah} exceeds viewport {vw}x{vh}"
        )));
    }
    let (left, top) = match placement {
        Placement::Centered => ((vw - aw) / 2, (vh - ah) / 2),
        Placement::Offset { left, top } => {
            if left + aw > vw || top + ah > vh {
                return Err(Error::invalid("AR placement offset pushes image out of viewport"));
            }
            (left, top)
        }
    };
    let mut channels = [Grid::zeros(vw, vh), Grid::zeros(vw, vh), Grid::zeros(vw, vh)];
    let mut alpha = Grid::zeros(vw, vh);
    for y in 0..ah {
        for x in 0..aw {
            for c in 0..3 {
                channels[c].set(left + x, top + y, ar.channel(c).get(x, y));
            }
            alpha.set(left + x, top + y, ar.alpha().get(x, y));
        }
    }
    ViewportImage::new(channels, alpha)
}

/// Blends the padded AR image over the background viewport.
///
/// Per pixel and channel: `I_S = alpha*I_a*I_AR + (1 - alpha*I_a)*I_BG`.
/// The output transparency matrix is all-ones.
pub fn composite(
    ar_padded: &ViewportImage,
    bg_viewport: &ViewportImage,
    alpha: MixingLevel,
) -> Result<ViewportImage> {
    if !ar_padded.same_dims(bg_viewport) {
        return Err(Error::dims(
            format!("{}x{}", ar_padded.width(), ar_padded.height()),
            format!("{}x{}", bg_viewport.width(), bg_viewport.height()),
        ));
    }
    let (w, h) = (ar_padded.width(), ar_padded.height());
    let a = alpha.value();
    let mut channels = [Grid::zeros(w, h), Grid::zeros(w, h), Grid::zeros(w, h)];
    for c in 0..3 {
        let ar = ar_padded.channel(c).as_slice();
        let bg = bg_viewport.channel(c).as_slice();
        let ia = ar_padded.alpha().as_slice();
        let out = channels[c].as_mut_slice();
        for i in 0..out.len() {
            let m = a * ia[i];
            out[i] = m * ar[i] + (1.0 - m) * bg[i];
        }
    }
    ViewportImage::new(channels, Grid::constant(w, h, 1.0))
}

/// Assembles a full scenario record; `superimposed` is derived with this
/// module's own operations.
pub fn build_scenario(
    scenario_id: impl Into<String>,
    ar_category: ArCategory,
    ar_image: ViewportImage,
    bg_equirect: ViewportImage,
    mixing: MixingLevel,
    spec: &ViewportSpec,
) -> Result<ScenarioRecord> {
    let bg_view = extract_viewport(&bg_equirect, spec)?;
    let padded = pad_ar(&ar_image, spec, Placement::Centered)?;
    let superimposed = composite(&padded, &bg_view, mixing)?;
    Ok(ScenarioRecord {
        scenario_id: scenario_id.into(),
        ar_category,
        ar_image,
        bg_equirect,
        mixing,
        superimposed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(w: usize, h: usize, fov: f64) -> ViewportSpec {
        ViewportSpec {
            width_px: w,
            height_px: h,
            fov_h_deg: fov,
            fov_v_deg: fov,
            center_lat_deg: 0.0,
            center_long_deg: 0.0,
        }
    }

    #[test]
    fn constant_equirect_gives_constant_viewport() {
        let bg = ViewportImage::constant(64, 32, [0.3, 0.6, 0.9]).unwrap();
        let vp = extract_viewport(&bg, &spec(16, 16, 100.0)).unwrap();
        for c in 0..3 {
            let g = vp.channel(c);
            let spread = g.max() - g.min();
            assert!(spread < 1e-12, "channel {c} spread {spread}");
        }
        assert!((vp.channel(2).get(7, 7) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn bright_pixel_at_equirect_center_peaks_at_viewport_center() {
        let (we, he) = (129, 65); // odd so the sphere point (0,0) has a center pixel
        let mut g = Grid::zeros(we, he);
        g.set(64, 32, 1.0);
        let bg = ViewportImage::new([g.clone(), g.clone(), g], Grid::constant(we, he, 1.0));
        // 129 vs 2*65 = 130 is within the 1 px aspect tolerance
        let bg = bg.unwrap();
        let vp = extract_viewport(&bg, &spec(33, 33, 90.0)).unwrap();
        let (ax, ay) = vp.channel(0).argmax();
        assert!(ax.abs_diff(16) <= 1, "argmax x {ax}");
        assert!(ay.abs_diff(16) <= 1, "argmax y {ay}");
    }

    #[test]
    fn malformed_equirect_rejected() {
        let bg = ViewportImage::constant(64, 40, [0.1, 0.1, 0.1]).unwrap();
        assert!(extract_viewport(&bg, &spec(8, 8, 90.0)).is_err());
    }

    #[test]
    fn pad_centers_with_floor_rounding() {
        let ar = ViewportImage::constant(2, 2, [1.0, 1.0, 1.0]).unwrap();
        let padded = pad_ar(&ar, &spec(4, 4, 90.0), Placement::Centered).unwrap();
        assert_eq!(padded.alpha().get(0, 0), 0.0);
        assert_eq!(padded.channel(0).get(0, 0), 0.0);
        assert_eq!(padded.alpha().get(1, 1), 1.0);
        assert_eq!(padded.channel(0).get(2, 2), 1.0);
        assert_eq!(padded.alpha().get(3, 3), 0.0);

        // 3 into 4: top-left margin 0, bottom-right margin 1
        let ar3 = ViewportImage::constant(3, 3, [1.0, 0.0, 0.0]).unwrap();
        let padded3 = pad_ar(&ar3, &spec(4, 4, 90.0), Placement::Centered).unwrap();
        assert_eq!(padded3.alpha().get(0, 0), 1.0);
        assert_eq!(padded3.alpha().get(3, 3), 0.0);
        assert_eq!(padded3.alpha().get(2, 2), 1.0);
    }

    #[test]
    fn pad_identity_when_sizes_match() {
        let ar = ViewportImage::constant(4, 4, [0.2, 0.4, 0.6]).unwrap();
        let padded = pad_ar(&ar, &spec(4, 4, 90.0), Placement::Centered).unwrap();
        assert_eq!(&padded, &ar);
    }

    #[test]
    fn pad_rejects_oversized_ar() {
        let ar = ViewportImage::constant(5, 2, [0.0, 0.0, 0.0]).unwrap();
        assert!(pad_ar(&ar, &spec(4, 4, 90.0), Placement::Centered).is_err());
    }

    #[test]
    fn composite_matches_direct_substitution() {
        let ar = ViewportImage::constant(2, 2, [0.8, 0.8, 0.8]).unwrap();
        let bg = ViewportImage::constant(2, 2, [0.4, 0.4, 0.4]).unwrap();
        let out = composite(&ar, &bg, MixingLevel::new(0.25).unwrap()).unwrap();
        assert!((out.channel(0).get(0, 0) - 0.5).abs() < 1e-15);

        let ar = ViewportImage::constant(2, 2, [1.0, 1.0, 1.0]).unwrap();
        let bg = ViewportImage::constant(2, 2, [0.0, 0.0, 0.0]).unwrap();
        let out = composite(&ar, &bg, MixingLevel::new(0.75).unwrap()).unwrap();
        assert!((out.channel(1).get(1, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn transparent_region_passes_background_through() {
        let rgb = [
            Grid::constant(2, 1, 0.9),
            Grid::constant(2, 1, 0.9),
            Grid::constant(2, 1, 0.9),
        ];
        let mut alpha = Grid::constant(2, 1, 1.0);
        alpha.set(0, 0, 0.0);
        let ar = ViewportImage::new(rgb, alpha).unwrap();
        let bg = ViewportImage::constant(2, 1, [0.37, 0.37, 0.37]).unwrap();
        let out = composite(&ar, &bg, MixingLevel::new(0.5).unwrap()).unwrap();
        assert_eq!(out.channel(0).get(0, 0), 0.37); // exact: m = 0
        assert!((out.channel(0).get(1, 0) - (0.5 * 0.9 + 0.5 * 0.37)).abs() < 1e-15);
    }

    #[test]
    fn composite_dimension_mismatch_rejected() {
        let ar = ViewportImage::constant(2, 2, [0.0; 3]).unwrap();
        let bg = ViewportImage::constant(3, 2, [0.0; 3]).unwrap();
        assert!(composite(&ar, &bg, MixingLevel::new(0.5).unwrap()).is_err());
    }

    #[test]
    fn blend_symmetry_under_alpha_complement() {
        let ar = ViewportImage::constant(2, 2, [0.8, 0.1, 0.5]).unwrap();
        let bg = ViewportImage::constant(2, 2, [0.2, 0.9, 0.4]).unwrap();
        let a = composite(&ar, &bg, MixingLevel::new(0.25).unwrap()).unwrap();
        let b = composite(&bg, &ar, MixingLevel::new(0.75).unwrap()).unwrap();
        for c in 0..3 {
            for (x, y) in (0..2).flat_map(|x| (0..2).map(move |y| (x, y))) {
                assert!((a.channel(c).get(x, y) - b.channel(c).get(x, y)).abs() < 1e-15);
            }
        }
    }
}
