//! Center-surround pyramid saliency (intensity, color opponency, and
//! orientation channels with peak-promoting normalization).
//!
//! Structure: a 9-level dyadic Gaussian pyramid; center scales {2,3,4} and
//! surround offsets {3,4}; per-map normalization `N(m) = minmax(m) * (1 -
//! mean_of_other_local_maxima)^2`; channel conspicuities are sums of
//! normalized maps accumulated at one common scale, and the final map is the
//! mean of the normalized conspicuities.

use super::{IttiConfig, SaliencyPredictor};
use crate::error::Result;
use crate::grid::{minmax_grid, Grid, SaliencyDensity, ViewportImage};
use crate::imgops;

pub struct IttiKoch {
    cfg: IttiConfig,
    gabors: Vec<Grid>,
}

impl IttiKoch {
    pub fn new(cfg: IttiConfig) -> Self {
        let gabors = [0.0f64, 45.0, 90.0, 135.0]
            .iter()
            .map(|&deg| odd_gabor(cfg.gabor_size, cfg.gabor_sigma, cfg.gabor_wavelength, deg.to_radians()))
            .collect();
        IttiKoch { cfg, gabors }
    }

    fn center_surround_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for c in [2usize, 3, 4] {
            for delta in [3usize, 4] {
                let s = c + delta;
                if s < self.cfg.levels {
                    pairs.push((c, s));
                }
            }
        }
        pairs
    }
}

impl SaliencyPredictor for IttiKoch {
    fn name(&self) -> &str {
        "IT"
    }

    fn predict(&self, img: &ViewportImage) -> Result<SaliencyDensity> {
        let (in_w, in_h) = (img.width(), img.height());
        if img.intensity().is_constant() {
            return Ok(SaliencyDensity::raw(Grid::zeros(in_w, in_h)));
        }

        // upscale small inputs so the deep pyramid levels stay meaningful
        let short = in_w.min(in_h);
        let (w, h) = if short < self.cfg.min_short_side {
            let f = self.cfg.min_short_side as f64 / short as f64;
            (
                (in_w as f64 * f).round() as usize,
                (in_h as f64 * f).round() as usize,
            )
        } else {
            (in_w, in_h)
        };
        let planes: Vec<Grid> = (0..3)
            .map(|c| imgops::resize_bilinear(img.channel(c), w, h))
            .collect();

        let intensity0 = Grid::from_fn(w, h, |x, y| {
            (planes[0].get(x, y) + planes[1].get(x, y) + planes[2].get(x, y)) / 3.0
        });
        let i_pyr = imgops::gaussian_pyramid(&intensity0, self.cfg.levels);
        let r_pyr = imgops::gaussian_pyramid(&planes[0], self.cfg.levels);
        let g_pyr = imgops::gaussian_pyramid(&planes[1], self.cfg.levels);
        let b_pyr = imgops::gaussian_pyramid(&planes[2], self.cfg.levels);
        let depth = i_pyr.len();

        // broadly tuned opponency planes per level
        let mut rg_pyr = Vec::with_capacity(depth);
        let mut by_pyr = Vec::with_capacity(depth);
        for l in 0..depth {
            let (rg, by) = opponency(&r_pyr[l], &g_pyr[l], &b_pyr[l], &i_pyr[l], self.cfg.luminance_floor);
            rg_pyr.push(rg);
            by_pyr.push(by);
        }

        // rectified odd-Gabor responses per level and orientation
        let mut orient_pyrs: Vec<Vec<Grid>> = vec![Vec::with_capacity(depth); self.gabors.len()];
        for l in 0..depth {
            for (oi, kernel) in self.gabors.iter().enumerate() {
                if l >= 2 {
                    let resp = imgops::conv2d_small(&i_pyr[l], kernel).map(f64::abs);
                    orient_pyrs[oi].push(resp);
                } else {
                    orient_pyrs[oi].push(Grid::zeros(i_pyr[l].width(), i_pyr[l].height()));
                }
            }
        }

        let common = self.cfg.common_scale.min(depth - 1);
        let (cw, ch) = (i_pyr[common].width(), i_pyr[common].height());
        let mut accum = |maps: &mut Grid, m: &Grid| {
            let resized = imgops::resize_bilinear(&normalize_map(m), cw, ch);
            for (a, b) in maps.as_mut_slice().iter_mut().zip(resized.as_slice()) {
                *a += b;
            }
        };

        let mut consp_i = Grid::zeros(cw, ch);
        let mut consp_c = Grid::zeros(cw, ch);
        let mut consp_o = Grid::zeros(cw, ch);
        for (c, s) in self.center_surround_pairs() {
            if s >= depth {
                continue;
            }
            accum(&mut consp_i, &imgops::abs_diff_upsampled(&i_pyr[c], &i_pyr[s]));
            // cross-scale opponency: |(R-G)_c + (R-G)_s| etc.
            accum(&mut consp_c, &cross_opponency(&rg_pyr[c], &rg_pyr[s]));
            accum(&mut consp_c, &cross_opponency(&by_pyr[c], &by_pyr[s]));
            for pyr in &orient_pyrs {
                accum(&mut consp_o, &imgops::abs_diff_upsampled(&pyr[c], &pyr[s]));
            }
        }

        let mut final_map = Grid::zeros(cw, ch);
        for consp in [&consp_i, &consp_c, &consp_o] {
            let n = normalize_map(consp);
            for (a, b) in final_map.as_mut_slice().iter_mut().zip(n.as_slice()) {
                *a += b / 3.0;
            }
        }

        let full = imgops::resize_bilinear(&final_map, in_w, in_h);
        Ok(SaliencyDensity::raw(minmax_grid(&full)))
    }
}

/// Red-green and blue-yellow opponency from raw channels, luminance-gated.
fn opponency(r: &Grid, g: &Grid, b: &Grid, i: &Grid, floor_frac: f64) -> (Grid, Grid) {
    let (w, h) = (r.width(), r.height());
    let floor = floor_frac * i.max();
    let mut rg = Grid::zeros(w, h);
    let mut by = Grid::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let lum = i.get(x, y);
            if lum <= floor || lum <= 0.0 {
                continue;
            }
            let (rn, gn, bn) = (r.get(x, y) / lum, g.get(x, y) / lum, b.get(x, y) / lum);
            let red = (rn - (gn + bn) / 2.0).max(0.0);
            let green = (gn - (rn + bn) / 2.0).max(0.0);
            let blue = (bn - (rn + gn) / 2.0).max(0.0);
            let yellow = ((rn + gn) / 2.0 - (rn - gn).abs() / 2.0 - bn).max(0.0);
            rg.set(x, y, red - green);
            by.set(x, y, blue - yellow);
        }
    }
    (rg, by)
}

/// Across-scale opponent difference `|d_c - (-d_s)| = |d_c + up(d_s)|`.
fn cross_opponency(center: &Grid, surround: &Grid) -> Grid {
    let up = imgops::resize_bilinear(surround, center.width(), center.height());
    Grid::from_fn(center.width(), center.height(), |x, y| {
        (center.get(x, y) + up.get(x, y)).abs()
    })
}

/// Map normalization: scale to [0,1], then multiply by
/// `(1 - mean_of_local_maxima)^2` where the local maxima exclude the global
/// peak. Promotes maps with one strong peak over maps with many.
fn normalize_map(m: &Grid) -> Grid {
    let scaled = minmax_grid(m);
    if scaled.is_constant() {
        return scaled;
    }
    let (w, h) = (scaled.width(), scaled.height());
    let mut maxima_sum = 0.0;
    let mut maxima_n = 0usize;
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let v = scaled.get(x, y);
            if v >= 1.0 - 1e-12 {
                continue; // global peak site
            }
            let mut is_max = true;
            'nb: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    if scaled.get((x as i64 + dx) as usize, (y as i64 + dy) as usize) >= v {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                maxima_sum += v;
                maxima_n += 1;
            }
        }
    }
    let mean_other = if maxima_n > 0 { maxima_sum / maxima_n as f64 } else { 0.0 };
    let factor = (1.0 - mean_other) * (1.0 - mean_other);
    scaled.map(|v| v * factor)
}

/// Odd (sine-phase) Gabor kernel at the given orientation.
fn odd_gabor(size: usize, sigma: f64, wavelength: f64, theta: f64) -> Grid {
    let r = size as i64 / 2;
    Grid::from_fn(size, size, |x, y| {
        let dx = x as f64 - r as f64;
        let dy = y as f64 - r as f64;
        let xr = dx * theta.cos() + dy * theta.sin();
        let yr = -dx * theta.sin() + dy * theta.cos();
        (-(xr * xr + yr * yr) / (2.0 * sigma * sigma)).exp()
            * (2.0 * std::f64::consts::PI * xr / wavelength).sin()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::salmodels::SalModelConfig;

    fn model() -> IttiKoch {
        IttiKoch::new(SalModelConfig::default().itti)
    }

    #[test]
    fn constant_image_is_flat() {
        let img = ViewportImage::constant(64, 64, [0.2, 0.6, 0.4]).unwrap();
        let d = model().predict(&img).unwrap();
        assert!(d.grid.is_constant());
    }

    #[test]
    fn red_square_on_green_field_pops() {
        let img = fixtures::red_square_on_green(128, 128, 80, 30, 16);
        let d = model().predict(&img).unwrap();
        let (ax, ay) = d.grid.argmax();
        assert!(
            (74..=102).contains(&ax) && (24..=52).contains(&ay),
            "argmax ({ax},{ay}) outside the red square neighborhood"
        );
    }

    #[test]
    fn odd_oriented_bar_pops() {
        let img = fixtures::odd_bar_grid(128, 128);
        let d = model().predict(&img).unwrap();
        let (ax, ay) = d.grid.argmax();
        let (ox, oy) = fixtures::ODD_BAR_CENTER;
        assert!(
            ax.abs_diff(ox) <= 14 && ay.abs_diff(oy) <= 14,
            "argmax ({ax},{ay}) not on the odd bar at ({ox},{oy})"
        );
    }

    #[test]
    fn rotation_moves_argmax_with_the_image() {
        let img = fixtures::popout_image(96, 96, 20, 60, 6);
        let m = model();
        let d = m.predict(&img).unwrap();
        let rotated = fixtures::rotate90(&img);
        let dr = m.predict(&rotated).unwrap();
        let (ax, ay) = d.grid.argmax();
        let (rx, ry) = dr.grid.argmax();
        // (x, y) -> (H-1-y, x) under the 90-degree rotation used by the fixture
        let ex = img.height() - 1 - ay;
        let ey = ax;
        assert!(
            rx.abs_diff(ex) <= 2 && ry.abs_diff(ey) <= 2,
            "rotated argmax ({rx},{ry}) vs expected ({ex},{ey})"
        );
    }

    #[test]
    fn output_range_and_dims() {
        let img = fixtures::popout_image(70, 50, 30, 20, 5);
        let d = model().predict(&img).unwrap();
        assert_eq!((d.width(), d.height()), (70, 50));
        assert!(d.grid.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
