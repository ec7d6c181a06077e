//! Deterministic synthetic stimuli: pop-out patches, color/orientation
//! singleton scenes, toy image sets, gaze traces with planted fixations, and
//! small scenario bundles. Used by the test suites, the benchmark harness,
//! and the CLI smoke flows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid::{ArCategory, Grid, SaliencyDensity, ViewportImage};

/// Bright square patch on a black field (fully opaque).
pub fn popout_image(w: usize, h: usize, px: usize, py: usize, patch: usize) -> ViewportImage {
    let plane = Grid::from_fn(w, h, |x, y| {
        if x >= px && x < px + patch && y >= py && y < py + patch {
            1.0
        } else {
            0.0
        }
    });
    ViewportImage::new([plane.clone(), plane.clone(), plane], Grid::constant(w, h, 1.0)).expect("fixture")
}

/// Red square on a green field: a pure color-opponency singleton.
pub fn red_square_on_green(w: usize, h: usize, sx: usize, sy: usize, size: usize) -> ViewportImage {
    let inside = |x: usize, y: usize| x >= sx && x < sx + size && y >= sy && y < sy + size;
    let r = Grid::from_fn(w, h, |x, y| if inside(x, y) { 0.8 } else { 0.0 });
    let g = Grid::from_fn(w, h, |x, y| if inside(x, y) { 0.0 } else { 0.6 });
    let b = Grid::zeros(w, h);
    ViewportImage::new([r, g, b], Grid::constant(w, h, 1.0)).expect("fixture")
}

/// Center of the odd bar drawn by [`odd_bar_grid`] (for 128x128 inputs).
pub const ODD_BAR_CENTER: (usize, usize) = (70, 70);

/// A grid of horizontal bars with a single vertical bar: an orientation
/// singleton at [`ODD_BAR_CENTER`].
pub fn odd_bar_grid(w: usize, h: usize) -> ViewportImage {
    let bar_len = 17usize;
    let bar_thickness = 3usize;
    let spacing = 28usize;
    let mut plane = Grid::zeros(w, h);
    let mut draw_bar = |cx: usize, cy: usize, vertical: bool| {
        for t in 0..bar_len {
            for u in 0..bar_thickness {
                let (x, y) = if vertical {
                    (cx + u, cy + t)
                } else {
                    (cx + t, cy + u)
                };
                let (x, y) = (
                    x.saturating_sub(if vertical { bar_thickness / 2 } else { bar_len / 2 }),
                    y.saturating_sub(if vertical { bar_len / 2 } else { bar_thickness / 2 }),
                );
                if x < w && y < h {
                    plane.set(x, y, 0.9);
                }
            }
        }
    };
    let mut cy = spacing / 2;
    while cy < h {
        let mut cx = spacing / 2;
        while cx < w {
            let vertical = (cx, cy) == ODD_BAR_CENTER;
            draw_bar(cx, cy, vertical);
            cx += spacing;
        }
        cy += spacing;
    }
    ViewportImage::new([plane.clone(), plane.clone(), plane], Grid::constant(w, h, 1.0)).expect("fixture")
}

/// Rotates an image 90 degrees counterclockwise: (x, y) -> (y, W-1-x), so a
/// source pixel (x, y) lands at (H-1-y, x) in the W'xH' = HxW output.
pub fn rotate90(img: &ViewportImage) -> ViewportImage {
    let (w, h) = (img.width(), img.height());
    let rot = |g: &Grid| Grid::from_fn(h, w, |x, y| g.get(y, h - 1 - x));
    ViewportImage::new(
        [rot(img.channel(0)), rot(img.channel(1)), rot(img.channel(2))],
        rot(img.alpha()),
    )
    .expect("fixture")
}

/// Smooth random blob image for toy network training; deterministic per seed.
pub fn blob_image(w: usize, h: usize, seed: u64) -> ViewportImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_blobs = rng.gen_range(2..5);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            (
                rng.gen_range(0.0..w as f64),
                rng.gen_range(0.0..h as f64),
                rng.gen_range(w as f64 / 10.0..w as f64 / 3.0),
                rng.gen_range(0.3..1.0),
            )
        })
        .collect();
    let plane = |phase: f64| {
        Grid::from_fn(w, h, |x, y| {
            let mut v: f64 = 0.05;
            for (i, &(bx, by, s, a)) in blobs.iter().enumerate() {
                let dx = x as f64 - bx;
                let dy = y as f64 - by;
                let g = a * (-(dx * dx + dy * dy) / (2.0 * s * s)).exp();
                v += g * (0.4 + 0.6 * ((i as f64 + 1.0) * phase).sin().abs());
            }
            v.clamp(0.0, 1.0)
        })
    };
    ViewportImage::new([plane(1.0), plane(2.0), plane(3.0)], Grid::constant(w, h, 1.0)).expect("fixture")
}

/// Deterministic toy image set.
pub fn blob_images(n: usize, w: usize, h: usize, seed: u64) -> Vec<ViewportImage> {
    (0..n).map(|i| blob_image(w, h, seed.wrapping_add(i as u64))).collect()
}

/// A random nonnegative density (raw state), deterministic per seed.
pub fn random_density(w: usize, h: usize, seed: u64) -> SaliencyDensity {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SaliencyDensity::raw(Grid::from_fn(w, h, |_, _| rng.gen_range(0.0..1.0)))
}

/// A unimodal Gaussian density centered at (cx, cy), raw state.
pub fn gaussian_density(w: usize, h: usize, cx: f64, cy: f64, sigma: f64) -> SaliencyDensity {
    SaliencyDensity::raw(Grid::from_fn(w, h, |x, y| {
        let dx = x as f64 + 0.5 - cx;
        let dy = y as f64 + 0.5 - cy;
        (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
    }))
}

/// An equirectangular background with smooth structure and a bright marker,
/// 2:1 aspect, deterministic per seed.
pub fn equirect_background(width: usize, seed: u64) -> ViewportImage {
    let h = width / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (mx, my) = (rng.gen_range(width / 4..3 * width / 4), rng.gen_range(h / 4..3 * h / 4));
    let plane = |k: f64| {
        Grid::from_fn(width, h, |x, y| {
            let u = x as f64 / width as f64 * std::f64::consts::TAU;
            let v = y as f64 / h as f64 * std::f64::consts::PI;
            let base = 0.4 + 0.25 * (k * u + phase).sin() * (v + phase).cos();
            let dx = x as f64 - mx as f64;
            let dy = y as f64 - my as f64;
            let marker = 0.5 * (-(dx * dx + dy * dy) / 30.0).exp();
            (base + marker).clamp(0.0, 1.0)
        })
    };
    ViewportImage::new([plane(1.0), plane(2.0), plane(3.0)], Grid::constant(width, h, 1.0)).expect("fixture")
}

/// An AR image of the given category with category-appropriate transparency
/// (graphic images carry transparent margins, others are fully opaque).
pub fn ar_image(category: ArCategory, w: usize, h: usize, seed: u64) -> ViewportImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match category {
        ArCategory::Graphic => {
            let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
            let radius = w.min(h) as f64 * rng.gen_range(0.25..0.4);
            let color: [f64; 3] = [rng.gen_range(0.5..1.0), rng.gen_range(0.0..0.5), rng.gen_range(0.2..0.9)];
            let inside = move |x: usize, y: usize| {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                dx * dx + dy * dy <= radius * radius
            };
            let plane = |c: f64| Grid::from_fn(w, h, |x, y| if inside(x, y) { c } else { 0.0 });
            let alpha = Grid::from_fn(w, h, |x, y| if inside(x, y) { 1.0 } else { 0.0 });
            ViewportImage::new([plane(color[0]), plane(color[1]), plane(color[2])], alpha).expect("fixture")
        }
        ArCategory::Natural => blob_image(w, h, seed),
        ArCategory::Webpage => {
            // text-like horizontal stripes on a light page
            let stripe = rng.gen_range(3..6);
            let plane = |c: f64| {
                Grid::from_fn(w, h, |_, y| {
                    if (y / stripe) % 2 == 0 {
                        0.9 * c
                    } else {
                        0.25 * c
                    }
                })
            };
            ViewportImage::new([plane(1.0), plane(0.95), plane(0.9)], Grid::constant(w, h, 1.0)).expect("fixture")
        }
    }
}

/// A planted-fixation gaze script: dwell locations with durations, rendered
/// to a 90 Hz trace of raw Euler samples.
#[derive(Debug, Clone)]
pub struct PlantedTrace {
    pub samples: Vec<crate::gazeproc::GazeSample>,
    /// (lat, long) of each planted dwell, in order.
    pub dwells: Vec<(f64, f64)>,
}

/// Builds a trace of `n_dwells` stable dwells (each `dwell_ms` long with
/// sub-threshold jitter) separated by single-sample saccade jumps.
pub fn planted_trace(n_dwells: usize, dwell_ms: f64, jitter_deg: f64, seed: u64) -> PlantedTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = 1000.0 / 90.0;
    let samples_per_dwell = (dwell_ms / dt).round() as usize;
    let mut samples = Vec::new();
    let mut dwells = Vec::new();
    let mut t = 0.0;
    let mut last_long: f64 = -999.0;
    for _ in 0..n_dwells {
        let lat: f64 = rng.gen_range(-50.0..50.0);
        let mut long: f64 = rng.gen_range(-150.0..150.0);
        // keep dwell points well separated so the saccade between them is fast
        while (long - last_long).abs() < 40.0 {
            long = rng.gen_range(-150.0..150.0);
        }
        last_long = long;
        dwells.push((lat, long));
        for _ in 0..samples_per_dwell {
            samples.push(crate::gazeproc::GazeSample {
                timestamp_ms: t,
                pitch_deg: lat + rng.gen_range(-jitter_deg..=jitter_deg),
                yaw_deg: long + rng.gen_range(-jitter_deg..=jitter_deg),
                roll_deg: 0.0,
            });
            t += dt;
        }
    }
    PlantedTrace { samples, dwells }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_deterministic() {
        let a = blob_image(16, 16, 3);
        let b = blob_image(16, 16, 3);
        assert_eq!(a.channel(0).as_slice(), b.channel(0).as_slice());
        let c = blob_image(16, 16, 4);
        assert_ne!(a.channel(0).as_slice(), c.channel(0).as_slice());
    }

    #[test]
    fn equirect_is_two_to_one() {
        let bg = equirect_background(64, 1);
        assert_eq!(bg.width(), 2 * bg.height());
    }

    #[test]
    fn graphic_ar_has_transparent_margins() {
        let ar = ar_image(ArCategory::Graphic, 32, 32, 9);
        assert_eq!(ar.alpha().get(0, 0), 0.0);
        assert_eq!(ar.alpha().get(16, 16), 1.0);
    }

    #[test]
    fn rotate90_moves_pixels_as_documented() {
        let img = popout_image(8, 4, 1, 2, 1);
        let r = rotate90(&img);
        assert_eq!((r.width(), r.height()), (4, 8));
        // source (1,2) -> (H-1-2, 1) = (1, 1)
        assert_eq!(r.channel(0).get(1, 1), 1.0);
    }

    #[test]
    fn planted_trace_timing() {
        let t = planted_trace(2, 300.0, 0.01, 5);
        assert_eq!(t.dwells.len(), 2);
        assert_eq!(t.samples.len(), 2 * 27);
        assert!(t.samples.windows(2).all(|w| w[1].timestamp_ms > w[0].timestamp_ms));
    }
}
