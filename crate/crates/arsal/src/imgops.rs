//! Grid-level raster operations shared by the saliency models and the
//! compositing pipeline: bilinear resize, Gaussian/box filtering, small
//! kernel convolution, and dyadic pyramid reduction.

use crate::grid::Grid;

/// Bilinear resample to a new size. Sampling positions are pixel centers;
/// borders clamp.
pub fn resize_bilinear(src: &Grid, new_w: usize, new_h: usize) -> Grid {
    assert!(new_w > 0 && new_h > 0);
    if new_w == src.width() && new_h == src.height() {
        return src.clone();
    }
    let sx = src.width() as f64 / new_w as f64;
    let sy = src.height() as f64 / new_h as f64;
    Grid::from_fn(new_w, new_h, |x, y| {
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, src.width() as f64 - 1.0);
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, src.height() as f64 - 1.0);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(src.width() - 1);
        let y1 = (y0 + 1).min(src.height() - 1);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        (1.0 - ty) * ((1.0 - tx) * src.get(x0, y0) + tx * src.get(x1, y0))
            + ty * ((1.0 - tx) * src.get(x0, y1) + tx * src.get(x1, y1))
    })
}

/// Separable convolution with a normalized 1D kernel, clamped borders.
fn separable(src: &Grid, kernel: &[f64]) -> Grid {
    let r = kernel.len() / 2;
    let (w, h) = (src.width(), src.height());
    let mut tmp = Grid::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let xi = (x as i64 + k as i64 - r as i64).clamp(0, w as i64 - 1) as usize;
                acc += kv * src.get(xi, y);
            }
            tmp.set(x, y, acc);
        }
    }
    let mut out = Grid::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let yi = (y as i64 + k as i64 - r as i64).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp.get(x, yi);
            }
            out.set(x, y, acc);
        }
    }
    out
}

/// Gaussian blur with kernel radius `ceil(3*sigma)`.
pub fn gaussian_blur(src: &Grid, sigma: f64) -> Grid {
    assert!(sigma > 0.0);
    let r = (3.0 * sigma).ceil() as usize;
    let mut kernel = Vec::with_capacity(2 * r + 1);
    for i in 0..=2 * r {
        let d = i as f64 - r as f64;
        kernel.push((-d * d / (2.0 * sigma * sigma)).exp());
    }
    let s: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= s;
    }
    separable(src, &kernel)
}

/// 3x3 box average with clamped borders.
pub fn box3(src: &Grid) -> Grid {
    separable(src, &[1.0 / 3.0; 3])
}

/// Full 2D convolution with a small odd-sized kernel, clamped borders.
pub fn conv2d_small(src: &Grid, kernel: &Grid) -> Grid {
    let (kw, kh) = (kernel.width(), kernel.height());
    assert!(kw % 2 == 1 && kh % 2 == 1);
    let (rx, ry) = (kw as i64 / 2, kh as i64 / 2);
    let (w, h) = (src.width(), src.height());
    Grid::from_fn(w, h, |x, y| {
        let mut acc = 0.0;
        for ky in 0..kh {
            let yi = (y as i64 + ky as i64 - ry).clamp(0, h as i64 - 1) as usize;
            for kx in 0..kw {
                let xi = (x as i64 + kx as i64 - rx).clamp(0, w as i64 - 1) as usize;
                acc += kernel.get(kx, ky) * src.get(xi, yi);
            }
        }
        acc
    })
}

/// One dyadic pyramid reduction: 5-tap binomial blur then decimation by two.
pub fn pyr_down(src: &Grid) -> Grid {
    let blurred = separable(src, &[1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0]);
    let nw = src.width().div_ceil(2);
    let nh = src.height().div_ceil(2);
    Grid::from_fn(nw, nh, |x, y| blurred.get(2 * x, 2 * y))
}

/// Gaussian pyramid with `levels` entries; level 0 is the input. Stops early
/// if a level would collapse below one pixel.
pub fn gaussian_pyramid(src: &Grid, levels: usize) -> Vec<Grid> {
    let mut pyr = Vec::with_capacity(levels);
    pyr.push(src.clone());
    while pyr.len() < levels {
        let last = pyr.last().unwrap();
        if last.width() == 1 && last.height() == 1 {
            break;
        }
        pyr.push(pyr_down(last));
    }
    pyr
}

/// Elementwise absolute difference of `a` and `b` upsampled to `a`'s size.
pub fn abs_diff_upsampled(a: &Grid, b: &Grid) -> Grid {
    let up = resize_bilinear(b, a.width(), a.height());
    Grid::from_fn(a.width(), a.height(), |x, y| (a.get(x, y) - up.get(x, y)).abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_constant() {
        let g = Grid::from_fn(5, 4, |x, y| (x * 7 + y) as f64);
        assert_eq!(resize_bilinear(&g, 5, 4), g);
        let c = Grid::constant(6, 6, 0.4);
        let r = resize_bilinear(&c, 13, 3);
        assert!(r.as_slice().iter().all(|&v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn blur_preserves_mean_of_constant() {
        let c = Grid::constant(8, 8, 0.7);
        let b = gaussian_blur(&c, 2.5);
        assert!(b.as_slice().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn box3_of_impulse() {
        let mut g = Grid::zeros(5, 5);
        g.set(2, 2, 9.0);
        let b = box3(&g);
        assert!((b.get(2, 2) - 1.0).abs() < 1e-12);
        assert!((b.get(1, 1) - 1.0).abs() < 1e-12);
        assert!((b.get(0, 0) - 0.0).abs() < 1e-12);
    }

    #[test]
    fn pyramid_halves_dimensions() {
        let g = Grid::constant(64, 48, 1.0);
        let pyr = gaussian_pyramid(&g, 4);
        assert_eq!(pyr.len(), 4);
        assert_eq!((pyr[1].width(), pyr[1].height()), (32, 24));
        assert_eq!((pyr[3].width(), pyr[3].height()), (8, 6));
        assert!((pyr[3].get(2, 2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pyramid_stops_at_one_pixel() {
        let g = Grid::constant(2, 2, 1.0);
        let pyr = gaussian_pyramid(&g, 9);
        assert!(pyr.len() < 9);
        let last = pyr.last().unwrap();
        assert_eq!((last.width(), last.height()), (1, 1));
    }
}
