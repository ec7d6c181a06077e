//! Shared domain types: scalar grids, saliency densities, fixation maps,
//! viewport images, and the deterministic normalization conventions used by
//! every other module.
//!
//! Conventions pinned here and relied on throughout the crate:
//! * pixel values are linear reals in [0,1]; 8-bit I/O converts via `v/255`
//!   in and `round(v*255)` out,
//! * image origin is top-left, x grows rightward, y grows downward,
//! * every standard deviation is the population one,
//! * all types are immutable values after construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major 2D grid of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(width: usize, height: usize) -> Grid {
        Grid {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Grid {
        Grid {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Grid> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("grid dimensions must be positive"));
        }
        if data.len() != width * height {
            return Err(Error::dims(
                format!("{} values ({width}x{height})", width * height),
                data.len().to_string(),
            ));
        }
        Ok(Grid {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Grid {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Grid {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_dims(&self, other: &Grid) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Population standard deviation.
    pub fn std_pop(&self) -> f64 {
        let m = self.mean();
        let var = self.data.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64;
        var.sqrt()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the largest value (first occurrence), as (x, y).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0usize;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    /// True when every value equals every other bit-for-bit.
    pub fn is_constant(&self) -> bool {
        self.data.windows(2).all(|w| w[0] == w[1])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Which normalization invariant a [`SaliencyDensity`] currently satisfies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationState {
    Raw,
    SumToOne,
    ZScored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizeMode {
    SumToOne,
    ZScored,
    MinMax,
}

/// A continuous saliency map plus the normalization it is in.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyDensity {
    pub grid: Grid,
    pub state: NormalizationState,
}

impl SaliencyDensity {
    pub fn raw(grid: Grid) -> SaliencyDensity {
        SaliencyDensity {
            grid,
            state: NormalizationState::Raw,
        }
    }

    pub fn width(&self) -> usize {
        self.grid.width()
    }

    pub fn height(&self) -> usize {
        self.grid.height()
    }

    /// All-zero density, used when a scenario has no usable fixations.
    pub fn is_empty_map(&self) -> bool {
        self.grid.as_slice().iter().all(|&v| v == 0.0)
    }

    /// Checks the invariant promised by `state` (1e-9 tolerances).
    pub fn validate(&self) -> Result<()> {
        if !self.grid.all_finite() {
            return Err(Error::invalid("density contains non-finite values"));
        }
        match self.state {
            NormalizationState::Raw => Ok(()),
            NormalizationState::SumToOne => {
                let s = self.grid.sum();
                if self.is_empty_map() || (s - 1.0).abs() < 1e-9 {
                    Ok(())
                } else {
                    Err(Error::invalid(format!("sum-to-one grid sums to {s}")))
                }
            }
            NormalizationState::ZScored => {
                if self.is_empty_map() {
                    return Ok(()); // constant input convention
                }
                let m = self.grid.mean();
                let s = self.grid.std_pop();
                if m.abs() < 1e-9 && (s - 1.0).abs() < 1e-9 {
                    Ok(())
                } else {
                    Err(Error::invalid(format!("z-scored grid has mean {m}, std {s}")))
                }
            }
        }
    }
}

/// Normalizes a density into the requested mode.
///
/// * sum-to-one: divides by the total; an all-zero grid stays raw,
/// * z-scored: population statistics; a constant grid becomes all-zero
///   (flagged by callers, never an abort),
/// * min-max: maps min to 0 and max to 1; a constant grid is clamped to
///   [0,1] and otherwise left unchanged.
pub fn normalize(density: &SaliencyDensity, mode: NormalizeMode) -> Result<SaliencyDensity> {
    let g = &density.grid;
    if !g.all_finite() {
        return Err(Error::invalid("normalize: grid contains non-finite values"));
    }
    match mode {
        NormalizeMode::SumToOne => {
            let s = g.sum();
            if s == 0.0 {
                return Ok(SaliencyDensity::raw(g.clone()));
            }
            if s < 0.0 {
                return Err(Error::invalid("normalize: negative total mass"));
            }
            Ok(SaliencyDensity {
                grid: g.map(|v| v / s),
                state: NormalizationState::SumToOne,
            })
        }
        NormalizeMode::ZScored => {
            if g.is_constant() {
                return Ok(SaliencyDensity {
                    grid: Grid::zeros(g.width(), g.height()),
                    state: NormalizationState::ZScored,
                });
            }
            let m = g.mean();
            let s = g.std_pop();
            Ok(SaliencyDensity {
                grid: g.map(|v| (v - m) / s),
                state: NormalizationState::ZScored,
            })
        }
        NormalizeMode::MinMax => {
            if g.is_constant() {
                return Ok(SaliencyDensity::raw(g.map(|v| v.clamp(0.0, 1.0))));
            }
            let lo = g.min();
            let hi = g.max();
            let span = hi - lo;
            Ok(SaliencyDensity::raw(g.map(|v| (v - lo) / span)))
        }
    }
}

/// Min-max convenience on a bare grid.
pub fn minmax_grid(g: &Grid) -> Grid {
    if g.is_constant() {
        return g.map(|v| v.clamp(0.0, 1.0));
    }
    let lo = g.min();
    let hi = g.max();
    let span = hi - lo;
    g.map(|v| (v - lo) / span)
}

/// Discrete fixation locations: a per-pixel count grid plus the underlying
/// continuous viewport coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FixationMap {
    counts: Vec<u32>,
    width: usize,
    height: usize,
    points: Vec<(f64, f64)>,
}

impl FixationMap {
    pub fn new(width: usize, height: usize) -> FixationMap {
        FixationMap {
            counts: vec![0; width * height],
            width,
            height,
            points: Vec::new(),
        }
    }

    /// Adds a fixation at continuous viewport coordinates. `x` may equal
    /// `width` (the right edge) and `y` may equal `height`; edge points bin
    /// into the last row/column.
    pub fn push(&mut self, x: f64, y: f64) -> Result<()> {
        if !(x.is_finite() && y.is_finite()) || x < 0.0 || y < 0.0 || x > self.width as f64 || y > self.height as f64
        {
            return Err(Error::invalid(format!(
                "fixation ({x}, {y}) outside {}x{} viewport",
                self.width, self.height
            )));
        }
        let cx = (x.floor() as usize).min(self.width - 1);
        let cy = (y.floor() as usize).min(self.height - 1);
        self.counts[cy * self.width + cx] += 1;
        self.points.push((x, y));
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn count_at(&self, x: usize, y: usize) -> u32 {
        self.counts[y * self.width + x]
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn total(&self) -> u32 {
        self.points.len() as u32
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Global opacity applied to AR content, in (0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct MixingLevel(f64);

/// The three levels used by the viewport-layout datasets.
pub const SARD_MIXING_LEVELS: [f64; 3] = [0.25, 0.5, 0.75];

impl MixingLevel {
    pub fn new(alpha: f64) -> Result<MixingLevel> {
        if !alpha.is_finite() || alpha <= 0.0 || alpha > 1.0 {
            return Err(Error::invalid(format!("mixing level {alpha} outside (0, 1]")));
        }
        Ok(MixingLevel(alpha))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_standard_level(self) -> bool {
        SARD_MIXING_LEVELS.iter().any(|&l| l == self.0)
    }
}

impl TryFrom<f64> for MixingLevel {
    type Error = Error;
    fn try_from(v: f64) -> Result<MixingLevel> {
        MixingLevel::new(v)
    }
}

impl From<MixingLevel> for f64 {
    fn from(m: MixingLevel) -> f64 {
        m.0
    }
}

/// Geometry of the perceptual viewport: pixel dimensions, field of view and
/// the sphere direction its center looks at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewportSpec {
    pub width_px: usize,
    pub height_px: usize,
    pub fov_h_deg: f64,
    /// Vertical field of view. The default is derived from the horizontal FOV
    /// assuming square pixels under the rectilinear projection; treat it as
    /// configuration, not ground truth.
    pub fov_v_deg: f64,
    pub center_lat_deg: f64,
    pub center_long_deg: f64,
}

impl ViewportSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width_px == 0 || self.height_px == 0 {
            return Err(Error::invalid("viewport dimensions must be positive"));
        }
        for (name, v) in [("fov_h_deg", self.fov_h_deg), ("fov_v_deg", self.fov_v_deg)] {
            if !(v > 0.0 && v <= 180.0) {
                return Err(Error::invalid(format!("{name} = {v} outside (0, 180]")));
            }
        }
        if !self.center_lat_deg.is_finite() || !self.center_long_deg.is_finite() {
            return Err(Error::invalid("viewport center must be finite"));
        }
        Ok(())
    }

    /// Horizontal pixels per degree of visual angle, the scale used for
    /// fixation blurring.
    pub fn px_per_degree(&self) -> f64 {
        self.width_px as f64 / self.fov_h_deg
    }
}

impl Default for ViewportSpec {
    fn default() -> ViewportSpec {
        let (w, h, fov_h) = (1440usize, 1600usize, 110.0f64);
        let tan_half_v = (h as f64 / w as f64) * (fov_h.to_radians() / 2.0).tan();
        ViewportSpec {
            width_px: w,
            height_px: h,
            fov_h_deg: fov_h,
            fov_v_deg: 2.0 * tan_half_v.atan().to_degrees(),
            center_lat_deg: 0.0,
            center_long_deg: 0.0,
        }
    }
}

/// RGB image with a per-pixel transparency matrix (1 = opaque content).
#[derive(Debug, Clone, PartialEq)]
pub struct ViewportImage {
    rgb: [Grid; 3],
    alpha: Grid,
}

impl ViewportImage {
    pub fn new(rgb: [Grid; 3], alpha: Grid) -> Result<ViewportImage> {
        let w = rgb[0].width();
        let h = rgb[0].height();
        if w == 0 || h == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        for g in rgb.iter().chain(std::iter::once(&alpha)) {
            if g.width() != w || g.height() != h {
                return Err(Error::dims(format!("{w}x{h}"), format!("{}x{}", g.width(), g.height())));
            }
            if g.as_slice().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::invalid("channel values must lie in [0,1]"));
            }
        }
        Ok(ViewportImage { rgb, alpha })
    }

    /// Fully opaque constant-color image.
    pub fn constant(width: usize, height: usize, color: [f64; 3]) -> Result<ViewportImage> {
        ViewportImage::new(
            [
                Grid::constant(width, height, color[0]),
                Grid::constant(width, height, color[1]),
                Grid::constant(width, height, color[2]),
            ],
            Grid::constant(width, height, 1.0),
        )
    }

    pub fn width(&self) -> usize {
        self.rgb[0].width()
    }

    pub fn height(&self) -> usize {
        self.rgb[0].height()
    }

    pub fn channel(&self, c: usize) -> &Grid {
        &self.rgb[c]
    }

    pub fn alpha(&self) -> &Grid {
        &self.alpha
    }

    pub fn same_dims(&self, other: &ViewportImage) -> bool {
        self.width() == other.width() && self.height() == other.height()
    }

    /// Mean of the three channels, the grayscale convention shared by the
    /// classical models.
    pub fn intensity(&self) -> Grid {
        let mut g = Grid::zeros(self.width(), self.height());
        let n = g.len();
        let out = g.as_mut_slice();
        for i in 0..n {
            out[i] = (self.rgb[0].as_slice()[i] + self.rgb[1].as_slice()[i] + self.rgb[2].as_slice()[i]) / 3.0;
        }
        g
    }
}

/// Stimulus category of an AR image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArCategory {
    Graphic,
    Natural,
    Webpage,
}

impl ArCategory {
    pub const ALL: [ArCategory; 3] = [ArCategory::Graphic, ArCategory::Natural, ArCategory::Webpage];

    pub fn as_str(&self) -> &'static str {
        match self {
            ArCategory::Graphic => "graphic",
            ArCategory::Natural => "natural",
            ArCategory::Webpage => "webpage",
        }
    }
}

impl std::str::FromStr for ArCategory {
    type Err = Error;
    fn from_str(s: &str) -> Result<ArCategory> {
        match s.to_ascii_lowercase().as_str() {
            "graphic" => Ok(ArCategory::Graphic),
            "natural" => Ok(ArCategory::Natural),
            "webpage" => Ok(ArCategory::Webpage),
            other => Err(Error::invalid(format!("unknown AR category `{other}`"))),
        }
    }
}

impl std::fmt::Display for ArCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One (AR, BG, α) stimulus with its derived superimposed viewport.
/// Built by [`crate::compositor::build_scenario`], which guarantees that
/// `superimposed` equals `composite(pad_ar(ar), extract_viewport(bg), α)`
/// bit-for-bit under this library's own operations.
#[derive(Debug, Clone)]
pub struct ScenarioRecord {
    pub scenario_id: String,
    pub ar_category: ArCategory,
    pub ar_image: ViewportImage,
    pub bg_equirect: ViewportImage,
    pub mixing: MixingLevel,
    pub superimposed: ViewportImage,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn density(w: usize, h: usize, vals: &[f64]) -> SaliencyDensity {
        SaliencyDensity::raw(Grid::from_vec(w, h, vals.to_vec()).unwrap())
    }

    #[test]
    fn minmax_forces_endpoints() {
        let d = density(2, 1, &[1.0, 3.0]);
        let n = normalize(&d, NormalizeMode::MinMax).unwrap();
        assert_eq!(n.grid.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn sum_to_one_uniform() {
        let d = density(2, 2, &[2.0, 2.0, 2.0, 2.0]);
        let n = normalize(&d, NormalizeMode::SumToOne).unwrap();
        assert_eq!(n.grid.as_slice(), &[0.25, 0.25, 0.25, 0.25]);
        assert_eq!(n.state, NormalizationState::SumToOne);
    }

    #[test]
    fn zscore_matches_direct_arithmetic() {
        // population mean 0.25, population std sqrt(0.1875)
        let d = density(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        let n = normalize(&d, NormalizeMode::ZScored).unwrap();
        let s = 0.1875f64.sqrt();
        let expect = [-0.25 / s, -0.25 / s, -0.25 / s, 0.75 / s];
        for (got, want) in n.grid.as_slice().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert!((n.grid.as_slice()[3] - 1.732_050_807_568_877_2).abs() < 1e-3);
        n.validate().unwrap();
    }

    #[test]
    fn zscore_constant_grid_is_all_zero() {
        let d = density(2, 2, &[0.7; 4]);
        let n = normalize(&d, NormalizeMode::ZScored).unwrap();
        assert!(n.is_empty_map());
        assert_eq!(n.state, NormalizationState::ZScored);
        n.validate().unwrap();
    }

    #[test]
    fn normalize_idempotent_per_mode() {
        let d = density(3, 1, &[0.1, 0.9, 0.4]);
        for mode in [NormalizeMode::SumToOne, NormalizeMode::ZScored, NormalizeMode::MinMax] {
            let once = normalize(&d, mode).unwrap();
            let twice = normalize(&once, mode).unwrap();
            for (a, b) in once.grid.as_slice().iter().zip(twice.grid.as_slice()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn minmax_constant_grid_clamps_only() {
        let d = density(2, 1, &[7.0, 7.0]);
        let n = normalize(&d, NormalizeMode::MinMax).unwrap();
        assert_eq!(n.grid.as_slice(), &[1.0, 1.0]);
        let d = density(2, 1, &[0.5, 0.5]);
        let n = normalize(&d, NormalizeMode::MinMax).unwrap();
        assert_eq!(n.grid.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn mixing_level_bounds() {
        assert!(MixingLevel::new(0.0).is_err());
        assert!(MixingLevel::new(1.0 + 1e-9).is_err());
        assert!(MixingLevel::new(f64::NAN).is_err());
        assert!(MixingLevel::new(0.25).unwrap().is_standard_level());
        assert!(!MixingLevel::new(0.3).unwrap().is_standard_level());
    }

    #[test]
    fn fixation_map_counts_match_points() {
        let mut fm = FixationMap::new(4, 4);
        fm.push(0.5, 0.5).unwrap();
        fm.push(3.9, 3.9).unwrap();
        fm.push(4.0, 4.0).unwrap(); // right/bottom edge bins into last cell
        assert_eq!(fm.total(), 3);
        assert_eq!(fm.counts().iter().sum::<u32>(), 3);
        assert_eq!(fm.count_at(3, 3), 2);
        assert!(fm.push(4.1, 0.0).is_err());
        assert!(fm.push(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn viewport_image_validation() {
        assert!(ViewportImage::constant(2, 2, [0.1, 0.5, 1.0]).is_ok());
        assert!(ViewportImage::constant(2, 2, [1.1, 0.0, 0.0]).is_err());
        let rgb = [Grid::zeros(2, 2), Grid::zeros(2, 2), Grid::zeros(2, 2)];
        assert!(ViewportImage::new(rgb, Grid::zeros(3, 2)).is_err());
    }

    #[test]
    fn default_viewport_spec_is_apparatus_geometry() {
        let s = ViewportSpec::default();
        assert_eq!((s.width_px, s.height_px), (1440, 1600));
        assert_eq!(s.fov_h_deg, 110.0);
        assert!(s.fov_v_deg > 110.0 && s.fov_v_deg < 125.0);
        s.validate().unwrap();
    }
}
