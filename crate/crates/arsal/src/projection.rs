//! Rectilinear (gnomonic) projection between the viewing sphere and the
//! perceptual viewport, shared by viewport extraction and gaze mapping so the
//! two stay numerically consistent.
//!
//! World frame: +X toward (lat 0°, long 0°), +Y toward long +90°, +Z toward
//! the north pole. Viewport x grows with longitude, y grows downward (so +v
//! on the tangent plane is up).

use crate::error::Result;
use crate::grid::ViewportSpec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        Vec3 {
            x: self.x / n,
            y: self.y / n,
            z: self.z / n,
        }
    }
}

/// Unit direction for a latitude/longitude pair (degrees).
pub fn dir_from_latlong(lat_deg: f64, long_deg: f64) -> Vec3 {
    let lat = lat_deg.to_radians();
    let long = long_deg.to_radians();
    Vec3 {
        x: lat.cos() * long.cos(),
        y: lat.cos() * long.sin(),
        z: lat.sin(),
    }
}

/// Latitude/longitude (degrees) of a direction; longitude in (-180, 180].
pub fn latlong_from_dir(d: Vec3) -> (f64, f64) {
    let n = d.normalized();
    let lat = n.z.clamp(-1.0, 1.0).asin().to_degrees();
    let mut long = n.y.atan2(n.x).to_degrees();
    if long <= -180.0 {
        long += 360.0;
    }
    (lat, long)
}

/// Normalizes an angle in degrees into (-180, 180].
pub fn wrap_long_deg(long: f64) -> f64 {
    let mut l = long % 360.0;
    if l <= -180.0 {
        l += 360.0;
    } else if l > 180.0 {
        l -= 360.0;
    }
    l
}

/// Great-circle separation of two gaze points, in degrees.
///
/// Spherical law of cosines with a haversine fallback where the former loses
/// precision (small separations).
pub fn great_circle_deg(lat1: f64, long1: f64, lat2: f64, long2: f64) -> f64 {
    let (p1, l1) = (lat1.to_radians(), long1.to_radians());
    let (p2, l2) = (lat2.to_radians(), long2.to_radians());
    let cos_c = (p1.sin() * p2.sin() + p1.cos() * p2.cos() * (l2 - l1).cos()).clamp(-1.0, 1.0);
    let c = cos_c.acos();
    if c < 1e-2 {
        // haversine
        let sdlat = ((p2 - p1) / 2.0).sin();
        let sdlong = ((l2 - l1) / 2.0).sin();
        let h = sdlat * sdlat + p1.cos() * p2.cos() * sdlong * sdlong;
        return 2.0 * h.sqrt().clamp(-1.0, 1.0).asin().to_degrees();
    }
    c.to_degrees()
}

/// Forward/inverse gnomonic mapping for one viewport specification.
#[derive(Debug, Clone, Copy)]
pub struct ViewportProjection {
    width: f64,
    height: f64,
    tan_half_h: f64,
    tan_half_v: f64,
    forward_axis: Vec3,
    right_axis: Vec3,
    up_axis: Vec3,
}

impl ViewportProjection {
    pub fn new(spec: &ViewportSpec) -> Result<ViewportProjection> {
        spec.validate()?;
        let lat0 = spec.center_lat_deg.to_radians();
        let long0 = spec.center_long_deg.to_radians();
        Ok(ViewportProjection {
            width: spec.width_px as f64,
            height: spec.height_px as f64,
            tan_half_h: (spec.fov_h_deg.to_radians() / 2.0).tan(),
            tan_half_v: (spec.fov_v_deg.to_radians() / 2.0).tan(),
            forward_axis: Vec3 {
                x: lat0.cos() * long0.cos(),
                y: lat0.cos() * long0.sin(),
                z: lat0.sin(),
            },
            right_axis: Vec3 {
                x: -long0.sin(),
                y: long0.cos(),
                z: 0.0,
            },
            up_axis: Vec3 {
                x: -lat0.sin() * long0.cos(),
                y: -lat0.sin() * long0.sin(),
                z: lat0.cos(),
            },
        })
    }

    /// Sphere direction sampled by the center of output pixel (x, y).
    pub fn pixel_to_latlong(&self, x: usize, y: usize) -> (f64, f64) {
        let u = self.tan_half_h * (2.0 * (x as f64 + 0.5) / self.width - 1.0);
        let v = self.tan_half_v * (1.0 - 2.0 * (y as f64 + 0.5) / self.height);
        let d = Vec3 {
            x: self.forward_axis.x + u * self.right_axis.x + v * self.up_axis.x,
            y: self.forward_axis.y + u * self.right_axis.y + v * self.up_axis.y,
            z: self.forward_axis.z + u * self.right_axis.z + v * self.up_axis.z,
        };
        latlong_from_dir(d)
    }

    /// Continuous viewport coordinates of a sphere point, or `None` when the
    /// point falls outside the field of view (never clamped). The right/bottom
    /// edges are inclusive: `x` ranges over [0, width], `y` over [0, height].
    pub fn latlong_to_px(&self, lat_deg: f64, long_deg: f64) -> Option<(f64, f64)> {
        let p = dir_from_latlong(lat_deg, long_deg);
        let cos_c = p.dot(self.forward_axis);
        if cos_c <= 1e-12 {
            return None; // at or behind the tangent plane
        }
        let u = p.dot(self.right_axis) / cos_c;
        let v = p.dot(self.up_axis) / cos_c;
        let tol = 1.0 + 1e-12;
        if u.abs() > self.tan_half_h * tol || v.abs() > self.tan_half_v * tol {
            return None;
        }
        let x = (self.width * (u / self.tan_half_h + 1.0) / 2.0).clamp(0.0, self.width);
        let y = (self.height * (1.0 - v / self.tan_half_v) / 2.0).clamp(0.0, self.height);
        Some((x, y))
    }
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
    fn center_maps_to_center() {
        let p = ViewportProjection::new(&spec(100, 80, 110.0)).unwrap();
        let (x, y) = p.latlong_to_px(0.0, 0.0).unwrap();
        assert!((x - 50.0).abs() < 1e-12);
        assert!((y - 40.0).abs() < 1e-12);
    }

    #[test]
    fn half_fov_longitude_hits_right_edge() {
        // x = W/2 * (1 + tan(delta_long)/tan(fov/2))
        let p = ViewportProjection::new(&spec(100, 100, 90.0)).unwrap();
        let (x, y) = p.latlong_to_px(0.0, 45.0).unwrap();
        assert!((x - 100.0).abs() < 1e-9, "x = {x}");
        assert!((y - 50.0).abs() < 1e-9);
    }

    #[test]
    fn outside_fov_is_rejected() {
        let p = ViewportProjection::new(&spec(100, 100, 110.0)).unwrap();
        assert!(p.latlong_to_px(0.0, 170.0).is_none());
        assert!(p.latlong_to_px(0.0, 180.0).is_none()); // antipodal
        assert!(p.latlong_to_px(89.0, 0.0).is_none());
    }

    #[test]
    fn forward_inverse_consistency() {
        let s = spec(64, 48, 100.0);
        let p = ViewportProjection::new(&s).unwrap();
        for (px, py) in [(0usize, 0usize), (31, 23), (63, 47), (10, 40)] {
            let (lat, long) = p.pixel_to_latlong(px, py);
            let (x, y) = p.latlong_to_px(lat, long).unwrap();
            assert!((x - (px as f64 + 0.5)).abs() < 1e-9, "{x} vs {px}");
            assert!((y - (py as f64 + 0.5)).abs() < 1e-9, "{y} vs {py}");
        }
    }

    #[test]
    fn off_center_viewport_round_trips() {
        let s = ViewportSpec {
            width_px: 64,
            height_px: 64,
            fov_h_deg: 90.0,
            fov_v_deg: 90.0,
            center_lat_deg: 25.0,
            center_long_deg: -140.0,
        };
        let p = ViewportProjection::new(&s).unwrap();
        let (lat, long) = p.pixel_to_latlong(20, 41);
        let (x, y) = p.latlong_to_px(lat, long).unwrap();
        assert!((x - 20.5).abs() < 1e-9 && (y - 41.5).abs() < 1e-9);
    }

    #[test]
    fn great_circle_basics() {
        assert!(great_circle_deg(0.0, 0.0, 0.0, 0.0) == 0.0);
        assert!((great_circle_deg(0.0, 0.0, 0.0, 1.0) - 1.0).abs() < 1e-9);
        assert!((great_circle_deg(0.0, 0.0, 90.0, 0.0) - 90.0).abs() < 1e-9);
        // tiny separations keep precision through the haversine branch
        let d = great_circle_deg(0.0, 0.0, 0.0, 1e-5);
        assert!((d - 1e-5).abs() < 1e-12);
    }

    #[test]
    fn wrap_longitude_convention() {
        assert_eq!(wrap_long_deg(270.0), -90.0);
        assert_eq!(wrap_long_deg(180.0), 180.0);
        assert_eq!(wrap_long_deg(-180.0), 180.0);
        assert_eq!(wrap_long_deg(540.0), 180.0);
        assert_eq!(wrap_long_deg(0.0), 0.0);
    }
}
