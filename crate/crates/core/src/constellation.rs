//! Random satellite constellations on a circular-orbit shell above the
//! scenario origin.

use std::f64::consts::{FRAC_PI_2, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{AngleTuple, GeometryError, OrientationFrame, Point3, Vec3};

/// Mean Earth radius (m).
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
/// Earth gravitational parameter (m³/s²).
pub const GM_EARTH: f64 = 3.986004418e14;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConstellationError {
    #[error("invalid altitude {0} m (must be > 0)")]
    InvalidAltitude(f64),
    #[error("invalid elevation mask {0} rad (must be in [0, π/2))")]
    InvalidMask(f64),
    #[error("constellation must contain at least one satellite")]
    InvalidCount,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Center of the Earth in the local frame.
pub fn earth_center() -> Point3 {
    Point3::new(0.0, 0.0, -EARTH_RADIUS_M)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SatelliteState {
    pub position: Point3,
    pub velocity: Vec3,
    pub array_rows: usize,
    pub array_cols: usize,
    /// Boresight (local z) points at the scenario origin.
    pub array_orientation: OrientationFrame,
}

impl SatelliteState {
    pub fn n_antennas(&self) -> usize {
        self.array_rows * self.array_cols
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstellationSpec {
    pub count: usize,
    pub altitude_m: f64,
    pub elevation_mask_rad: f64,
    pub rng_seed: u64,
    pub array_rows: usize,
    pub array_cols: usize,
}

impl ConstellationSpec {
    pub fn new(count: usize, altitude_m: f64, elevation_mask_rad: f64, rng_seed: u64) -> Self {
        Self {
            count,
            altitude_m,
            elevation_mask_rad,
            rng_seed,
            array_rows: 8,
            array_cols: 8,
        }
    }

    pub fn validate(&self) -> Result<(), ConstellationError> {
        if self.count == 0 || self.array_rows == 0 || self.array_cols == 0 {
            return Err(ConstellationError::InvalidCount);
        }
        if !(self.altitude_m > 0.0) || !self.altitude_m.is_finite() {
            return Err(ConstellationError::InvalidAltitude(self.altitude_m));
        }
        let m = self.elevation_mask_rad;
        if !(0.0..FRAC_PI_2).contains(&m) {
            return Err(ConstellationError::InvalidMask(m));
        }
        Ok(())
    }
}

/// Speed of a circular orbit at altitude `h`.
pub fn circular_orbital_speed(h: f64) -> Result<f64, ConstellationError> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(ConstellationError::InvalidAltitude(h));
    }
    Ok((GM_EARTH / (EARTH_RADIUS_M + h)).sqrt())
}

/// Distance from the origin to the altitude-`h` shell along elevation `el`.
pub fn slant_range(h: f64, el: f64) -> f64 {
    let re = EARTH_RADIUS_M;
    let s = re * el.sin();
    -s + (s * s + h * h + 2.0 * re * h).sqrt()
}

/// Elevation of `sat_pos` above the local horizontal plane at `ground`.
pub fn elevation_angle(sat_pos: &Point3, ground: &Point3) -> Result<f64, ConstellationError> {
    let u = crate::geometry::los_direction(ground, sat_pos)?;
    Ok(u.z.atan2(u.x.hypot(u.y)))
}

/// Draws `spec.count` satellites: azimuth uniform on [0, 2π), elevation
/// uniform in [mask, π/2] as seen from the origin, circular-orbit velocity in
/// a uniformly random tangent direction. Satellite `k` of a draw does not
/// depend on `spec.count`, so smaller draws are prefixes of larger ones.
pub fn draw_constellation(spec: &ConstellationSpec) -> Result<Vec<SatelliteState>, ConstellationError> {
    spec.validate()?;
    let speed = circular_orbital_speed(spec.altitude_m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let center = earth_center();
    let mut sats = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let az = rng.random_range(0.0..TAU);
        let el = rng.random_range(spec.elevation_mask_rad..=FRAC_PI_2);
        let psi = rng.random_range(0.0..TAU);

        let dir = AngleTuple::new(az, el).to_unit();
        let position = Point3::from(dir * slant_range(spec.altitude_m, el));
        let radial = (position - center).normalize();
        let mut e1 = Vec3::z().cross(&radial);
        if e1.norm() < 1e-9 {
            e1 = Vec3::x();
        }
        let e1 = e1.normalize();
        let e2 = radial.cross(&e1);
        let velocity = (e1 * psi.cos() + e2 * psi.sin()) * speed;
        let array_orientation =
            OrientationFrame::from_boresight(&(Point3::origin() - position), &Vec3::y())?;
        sats.push(SatelliteState {
            position,
            velocity,
            array_rows: spec.array_rows,
            array_cols: spec.array_cols,
            array_orientation,
        });
    }
    Ok(sats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_invariants(sat: &SatelliteState, h: f64) {
        let r = (sat.position - earth_center()).norm();
        assert!((r - (EARTH_RADIUS_M + h)).abs() < 1.0, "radius off by {}", r - EARTH_RADIUS_M - h);
        let v = circular_orbital_speed(h).unwrap();
        assert!((sat.velocity.norm() - v).abs() / v < 1e-6);
        let radial = (sat.position - earth_center()).normalize();
        assert!(sat.velocity.normalize().dot(&radial).abs() < 1e-9);
    }

    #[test]
    fn orbital_speeds() {
        let leo = circular_orbital_speed(600e3).unwrap();
        assert!((leo - 7561.8).abs() < 0.1, "{leo}");
        let meo = circular_orbital_speed(10_000e3).unwrap();
        assert!((meo - 4934.4).abs() < 0.1, "{meo}");
        let mut prev = f64::INFINITY;
        for k in 1..200 {
            let v = circular_orbital_speed(k as f64 * 1e5).unwrap();
            assert!(v < prev);
            prev = v;
        }
        assert_eq!(circular_orbital_speed(0.0), Err(ConstellationError::InvalidAltitude(0.0)));
        assert!(circular_orbital_speed(-5.0).is_err());
    }

    #[test]
    fn spec_validation() {
        let ok = ConstellationSpec::new(3, 600e3, 10f64.to_radians(), 1);
        assert!(ok.validate().is_ok());
        let mut s = ok.clone();
        s.altitude_m = -1.0;
        assert!(matches!(draw_constellation(&s), Err(ConstellationError::InvalidAltitude(_))));
        let mut s = ok.clone();
        s.elevation_mask_rad = FRAC_PI_2;
        assert!(matches!(draw_constellation(&s), Err(ConstellationError::InvalidMask(_))));
        let mut s = ok.clone();
        s.elevation_mask_rad = -0.1;
        assert!(matches!(draw_constellation(&s), Err(ConstellationError::InvalidMask(_))));
        let mut s = ok;
        s.count = 0;
        assert_eq!(draw_constellation(&s), Err(ConstellationError::InvalidCount));
    }

    #[test]
    fn near_zenith_with_tight_mask() {
        let spec = ConstellationSpec::new(1, 600e3, 89.9f64.to_radians(), 7);
        let sats = draw_constellation(&spec).unwrap();
        let el = elevation_angle(&sats[0].position, &Point3::origin()).unwrap();
        assert!(FRAC_PI_2 - el < 0.2f64.to_radians());
    }

    #[test]
    fn deterministic_and_nested() {
        let spec = ConstellationSpec::new(12, 600e3, 10f64.to_radians(), 42);
        let a = draw_constellation(&spec).unwrap();
        let b = draw_constellation(&spec).unwrap();
        assert_eq!(a, b);
        let small = draw_constellation(&ConstellationSpec { count: 5, ..spec.clone() }).unwrap();
        assert_eq!(&a[..5], &small[..]);
        let other = draw_constellation(&ConstellationSpec { rng_seed: 43, ..spec }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn mask_respected_and_invariants_hold() {
        let mask = 10f64.to_radians();
        for (h, seeds) in [(600e3, 0..10_000u64), (10_000e3, 0..2_000u64)] {
            let mut min_el = f64::INFINITY;
            for seed in seeds {
                let sats = draw_constellation(&ConstellationSpec::new(1, h, mask, seed)).unwrap();
                for s in &sats {
                    check_invariants(s, h);
                    let el = elevation_angle(&s.position, &Point3::origin()).unwrap();
                    min_el = min_el.min(el);
                }
            }
            assert!(min_el >= mask - 1e-12, "min elevation {min_el}");
        }
    }

    #[test]
    fn boresight_points_at_origin() {
        let sats = draw_constellation(&ConstellationSpec::new(6, 600e3, 0.2, 9)).unwrap();
        for s in &sats {
            let to_origin = (Point3::origin() - s.position).normalize();
            assert!((s.array_orientation.boresight() - to_origin).norm() < 1e-12);
        }
    }

    #[test]
    fn azimuth_histogram_is_uniform() {
        const BINS: usize = 20;
        // chi-square 0.99 quantile, 19 degrees of freedom
        const CRITICAL: f64 = 36.191;
        let n = 10_000;
        let mut hist = [0usize; BINS];
        for seed in 0..n {
            let s = &draw_constellation(&ConstellationSpec::new(1, 600e3, 0.0, seed)).unwrap()[0];
            let az = s.position.y.atan2(s.position.x).rem_euclid(TAU);
            hist[((az / TAU) * BINS as f64) as usize % BINS] += 1;
        }
        let expected = n as f64 / BINS as f64;
        let chi2: f64 = hist.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < CRITICAL, "chi2 = {chi2}");
    }

    #[test]
    fn elevation_angle_cases() {
        let g = Point3::new(3.0, -2.0, 1.0);
        let zen = elevation_angle(&Point3::new(3.0, -2.0, 600e3), &g).unwrap();
        assert!((zen - FRAC_PI_2).abs() < 1e-15);
        let hor = elevation_angle(&Point3::new(1e6, -2.0, 1.0), &g).unwrap();
        assert!(hor.abs() < 1e-15);
        let p = Point3::new(1e5, 2e5, 3e5);
        let u = (p - g).normalize();
        assert!((elevation_angle(&p, &g).unwrap() - u.z.asin()).abs() < 1e-12);
        assert!(elevation_angle(&g, &g).is_err());
    }
}
