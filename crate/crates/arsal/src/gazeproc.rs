//! Converts raw head/eye tracker logs into fixations and ground-truth
//! saliency densities.
//!
//! Pipeline: Euler angles -> latitude/longitude -> inter-sample angular
//! velocity -> sliding-window mean-absolute-deviation labeling -> fixation
//! events (duration floor, spherical centroid) -> viewport projection ->
//! Gaussian density.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FixationMap, Grid, NormalizationState, SaliencyDensity, ViewportSpec};
use crate::projection::{self, great_circle_deg, ViewportProjection};

/// One raw tracker record: timestamp plus head/eye Euler angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeSample {
    pub timestamp_ms: f64,
    pub pitch_deg: f64,
    pub yaw_deg: f64,
    pub roll_deg: f64,
}

/// A gaze direction on the viewing sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazePointLL {
    pub timestamp_ms: f64,
    pub lat_deg: f64,
    pub long_deg: f64,
}

/// A detected stable-gaze event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fixation {
    pub lat_deg: f64,
    pub long_deg: f64,
    pub onset_ms: f64,
    pub duration_ms: f64,
}

/// Which quantity the sliding-window MAD is computed over. The threshold is
/// stated in deg/s, so the velocity reading is the default; the position
/// variant measures dispersion from the window centroid in degrees and
/// compares it to the same threshold value literally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MadSource {
    #[default]
    Velocity,
    Position,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixationParams {
    pub window_samples: usize,
    pub mad_threshold_deg_per_s: f64,
    pub min_duration_ms: f64,
    pub sample_rate_hz: f64,
    pub mad_source: MadSource,
}

impl Default for FixationParams {
    fn default() -> FixationParams {
        FixationParams {
            window_samples: 7,
            mad_threshold_deg_per_s: 50.0,
            min_duration_ms: 100.0,
            sample_rate_hz: 90.0,
            mad_source: MadSource::Velocity,
        }
    }
}

impl FixationParams {
    pub fn validate(&self) -> Result<()> {
        if self.window_samples == 0 || self.window_samples % 2 == 0 {
            return Err(Error::invalid("window_samples must be odd and positive"));
        }
        for (name, v) in [
            ("mad_threshold_deg_per_s", self.mad_threshold_deg_per_s),
            ("min_duration_ms", self.min_duration_ms),
            ("sample_rate_hz", self.sample_rate_hz),
        ] {
            if !(v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive (got {v})")));
            }
        }
        Ok(())
    }
}

/// Converts a raw Euler sample to latitude/longitude. Latitude is the pitch
/// (clamped into [-90, 90]), longitude the yaw wrapped into (-180, 180];
/// roll does not change the gaze direction.
pub fn euler_to_latlong(s: &GazeSample) -> Result<GazePointLL> {
    if !(s.pitch_deg.is_finite() && s.yaw_deg.is_finite() && s.roll_deg.is_finite()) {
        return Err(Error::invalid("gaze sample contains non-finite angles"));
    }
    Ok(GazePointLL {
        timestamp_ms: s.timestamp_ms,
        lat_deg: s.pitch_deg.clamp(-90.0, 90.0),
        long_deg: projection::wrap_long_deg(s.yaw_deg),
    })
}

/// Great-circle velocity between consecutive gaze points, deg/s. Output
/// length is input length minus one.
pub fn angular_velocity(trace: &[GazePointLL]) -> Result<Vec<f64>> {
    if trace.len() < 2 {
        return Err(Error::invalid("angular_velocity needs at least 2 samples"));
    }
    let mut out = Vec::with_capacity(trace.len() - 1);
    for pair in trace.windows(2) {
        let dt_ms = pair[1].timestamp_ms - pair[0].timestamp_ms;
        if dt_ms <= 0.0 {
            return Err(Error::invalid(format!(
                "timestamps must be strictly increasing (got {} then {})",
                pair[0].timestamp_ms, pair[1].timestamp_ms
            )));
        }
        let deg = great_circle_deg(pair[0].lat_deg, pair[0].long_deg, pair[1].lat_deg, pair[1].long_deg);
        out.push(deg / (dt_ms / 1000.0));
    }
    Ok(out)
}

fn mean_abs_deviation(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - m).abs()).sum::<f64>() / xs.len() as f64
}

/// Normalized mean of the member unit vectors; robust to longitude wrap.
fn spherical_centroid(points: &[GazePointLL]) -> (f64, f64) {
    let mut acc = projection::Vec3 { x: 0.0, y: 0.0, z: 0.0 };
    for p in points {
        let d = projection::dir_from_latlong(p.lat_deg, p.long_deg);
        acc.x += d.x;
        acc.y += d.y;
        acc.z += d.z;
    }
    projection::latlong_from_dir(acc)
}

/// Detects fixations in a trace.
///
/// Velocity mode: a seven-velocity window (by default) is slid along the
/// inter-sample velocity sequence; a window with mean absolute deviation
/// under the threshold marks its center velocity as stable, the first/last
/// half-window velocities take the nearest valid window's label, and maximal
/// stable runs become events spanning their member samples. Position mode
/// labels samples by angular dispersion about the window centroid instead.
///
/// Events shorter than `min_duration_ms` are dropped. A trace too short to
/// fill one window yields an empty result (with a warning), never an abort.
pub fn detect_fixations(trace: &[GazePointLL], params: &FixationParams) -> Result<Vec<Fixation>> {
    params.validate()?;
    let n = trace.len();
    let runs: Vec<(usize, usize)> = match params.mad_source {
        MadSource::Velocity => {
            if n < params.window_samples + 1 {
                log::warn!("trace of {n} samples is shorter than the {}-velocity window; no fixations", params.window_samples);
                return Ok(Vec::new());
            }
            let vel = angular_velocity(trace)?;
            let stable = window_labels(&vel, params.window_samples, |w| {
                mean_abs_deviation(w) < params.mad_threshold_deg_per_s
            });
            // a run of stable velocities [a, b] covers samples [a, b+1]
            runs_of(&stable).into_iter().map(|(a, b)| (a, b + 1)).collect()
        }
        MadSource::Position => {
            if n < params.window_samples {
                log::warn!("trace of {n} samples is shorter than the {}-sample window; no fixations", params.window_samples);
                return Ok(Vec::new());
            }
            // verify monotone timestamps here too (velocity mode does it inside)
            for pair in trace.windows(2) {
                if pair[1].timestamp_ms <= pair[0].timestamp_ms {
                    return Err(Error::invalid("timestamps must be strictly increasing"));
                }
            }
            let stable = window_labels(trace, params.window_samples, |w| {
                let (clat, clong) = spherical_centroid(w);
                let disp = w
                    .iter()
                    .map(|p| great_circle_deg(p.lat_deg, p.long_deg, clat, clong))
                    .sum::<f64>()
                    / w.len() as f64;
                disp < params.mad_threshold_deg_per_s
            });
            runs_of(&stable)
        }
    };

    let mut fixations = Vec::new();
    for (a, b) in runs {
        let onset = trace[a].timestamp_ms;
        let duration = trace[b].timestamp_ms - onset;
        if duration < params.min_duration_ms {
            continue;
        }
        let (lat, long) = spherical_centroid(&trace[a..=b]);
        fixations.push(Fixation {
            lat_deg: lat,
            long_deg: long,
            onset_ms: onset,
            duration_ms: duration,
        });
    }
    Ok(fixations)
}

/// Labels every element of `xs` by a predicate over the window centered on
/// it; the first/last half-window elements reuse the nearest valid window.
fn window_labels<T>(xs: &[T], window: usize, pred: impl Fn(&[T]) -> bool) -> Vec<bool> {
    let m = xs.len();
    let half = window / 2;
    debug_assert!(m >= window);
    let mut labels = vec![false; m];
    let mut center_label = vec![false; m];
    for j in half..m - half {
        center_label[j] = pred(&xs[j - half..=j + half]);
    }
    for (j, l) in labels.iter_mut().enumerate() {
        *l = center_label[j.clamp(half, m - 1 - half)];
    }
    labels
}

fn runs_of(stable: &[bool]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &s) in stable.iter().enumerate() {
        match (s, start) {
            (true, None) => start = Some(i),
            (false, Some(a)) => {
                runs.push((a, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(a) = start {
        runs.push((a, stable.len() - 1));
    }
    runs
}

/// Projects a sphere point into the viewport, consistent with
/// [`crate::compositor::extract_viewport`]. Points outside the field of view
/// are reported as out-of-viewport, never clamped.
pub fn latlong_to_viewport_px(p: &GazePointLL, spec: &ViewportSpec) -> Result<Option<(f64, f64)>> {
    let proj = ViewportProjection::new(spec)?;
    Ok(proj.latlong_to_px(p.lat_deg, p.long_deg))
}

/// Result of binning fixations into the viewport.
#[derive(Debug, Clone)]
pub struct ViewportFixations {
    pub map: FixationMap,
    /// Fraction of input fixations that landed inside the viewport.
    pub coverage: f64,
}

/// Bins fixation centroids into a viewport fixation map; out-of-viewport
/// fixations are excluded but reflected in the coverage statistic.
pub fn fixations_to_viewport(fixations: &[Fixation], spec: &ViewportSpec) -> Result<ViewportFixations> {
    let proj = ViewportProjection::new(spec)?;
    let mut map = FixationMap::new(spec.width_px, spec.height_px);
    let mut inside = 0usize;
    for f in fixations {
        if let Some((x, y)) = proj.latlong_to_px(f.lat_deg, f.long_deg) {
            map.push(x, y)?;
            inside += 1;
        }
    }
    let coverage = if fixations.is_empty() {
        1.0
    } else {
        inside as f64 / fixations.len() as f64
    };
    Ok(ViewportFixations { map, coverage })
}

/// Default Gaussian width, in degrees of visual angle.
pub const DEFAULT_SIGMA_DEG: f64 = 3.34;

/// Builds the ground-truth density by splatting an isotropic 2D Gaussian at
/// every fixation and normalizing to unit mass.
///
/// `sigma_px = sigma_deg * width_px / fov_h_deg` (horizontal pixels per
/// degree, applied on both axes); the kernel is truncated at four sigma.
/// Zero fixations yield an all-zero raw grid, which callers flag as empty.
pub fn density_from_fixations(fm: &FixationMap, spec: &ViewportSpec, sigma_deg: f64) -> Result<SaliencyDensity> {
    if !(sigma_deg > 0.0) {
        return Err(Error::invalid("sigma_deg must be positive"));
    }
    if fm.width() != spec.width_px || fm.height() != spec.height_px {
        return Err(Error::dims(
            format!("{}x{}", spec.width_px, spec.height_px),
            format!("{}x{}", fm.width(), fm.height()),
        ));
    }
    let (w, h) = (fm.width(), fm.height());
    if fm.is_empty() {
        return Ok(SaliencyDensity::raw(Grid::zeros(w, h)));
    }
    let sigma_px = sigma_deg * spec.px_per_degree();
    let radius = (4.0 * sigma_px).ceil() as i64;
    let inv_two_sigma2 = 1.0 / (2.0 * sigma_px * sigma_px);
    let mut grid = Grid::zeros(w, h);
    for &(fx, fy) in fm.points() {
        let x0 = ((fx - radius as f64).floor() as i64).max(0);
        let x1 = ((fx + radius as f64).ceil() as i64).min(w as i64 - 1);
        let y0 = ((fy - radius as f64).floor() as i64).max(0);
        let y1 = ((fy + radius as f64).ceil() as i64).min(h as i64 - 1);
        for y in y0..=y1 {
            let dy = (y as f64 + 0.5) - fy;
            for x in x0..=x1 {
                let dx = (x as f64 + 0.5) - fx;
                let r2 = dx * dx + dy * dy;
                if r2 <= (radius * radius) as f64 {
                    let v = grid.get(x as usize, y as usize) + (-r2 * inv_two_sigma2).exp();
                    grid.set(x as usize, y as usize, v);
                }
            }
        }
    }
    let total = grid.sum();
    Ok(SaliencyDensity {
        grid: grid.map(|v| v / total),
        state: NormalizationState::SumToOne,
    })
}

/// `gaze-process` convenience: full trace-to-fixations conversion.
pub fn process_trace(samples: &[GazeSample], params: &FixationParams) -> Result<Vec<Fixation>> {
    let trace: Vec<GazePointLL> = samples.iter().map(euler_to_latlong).collect::<Result<_>>()?;
    detect_fixations(&trace, params)
}
