//! Local east-north-up geometry: directions, delays, Doppler, departure
//! angles and their analytic derivatives with respect to the user position.
//!
//! All positions are meters in a local ENU frame whose origin sits on the
//! ground at the scenario center. Satellites are placed on a sphere of radius
//! `R_e + h` centered at `(0, 0, -R_e)`.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use thiserror::Error;

use crate::channel::RisPanel;
use crate::constellation::SatelliteState;

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Coincident-point threshold (m).
pub const MIN_SEPARATION_M: f64 = 1e-9;

/// Elevation margin from ±π/2 inside which azimuth is flagged as ill-defined.
pub const GIMBAL_MARGIN_RAD: f64 = 1e-6;

pub type Point3 = nalgebra::Point3<f64>;
pub type Vec3 = Vector3<f64>;
pub type Direction3 = Unit<Vec3>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("degenerate geometry: points closer than {MIN_SEPARATION_M} m")]
    DegenerateGeometry,
    #[error("invalid orientation frame: {0}")]
    InvalidFrame(String),
}

/// Azimuth in (−π, π], elevation in [−π/2, π/2].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleTuple {
    pub azimuth: f64,
    pub elevation: f64,
}

impl AngleTuple {
    pub fn new(azimuth: f64, elevation: f64) -> Self {
        Self { azimuth, elevation }
    }

    /// Angles of a (local-frame) unit vector. Azimuth is 0 on the poles.
    pub fn from_unit(w: &Vec3) -> Self {
        let rho = w.x.hypot(w.y);
        // atan2 keeps precision near the poles where asin(z) does not.
        let elevation = w.z.atan2(rho);
        let mut azimuth = if rho == 0.0 { 0.0 } else { w.y.atan2(w.x) };
        if azimuth <= -std::f64::consts::PI {
            azimuth = std::f64::consts::PI;
        }
        Self { azimuth, elevation }
    }

    pub fn to_unit(&self) -> Vec3 {
        let (sa, ca) = self.azimuth.sin_cos();
        let (se, ce) = self.elevation.sin_cos();
        Vec3::new(ce * ca, ce * sa, se)
    }

    pub fn near_gimbal(&self) -> bool {
        self.elevation.abs() > std::f64::consts::FRAC_PI_2 - GIMBAL_MARGIN_RAD
    }
}

/// Orientation of an array face. Columns of the rotation are the local
/// x/y/z axes expressed in the global frame; local z is the boresight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientationFrame(Rotation3<f64>);

impl OrientationFrame {
    pub fn identity() -> Self {
        Self(Rotation3::identity())
    }

    pub fn from_axes(x: Vec3, y: Vec3, z: Vec3) -> Result<Self, GeometryError> {
        let m = Matrix3::from_columns(&[x, y, z]);
        let ortho = (m.transpose() * m - Matrix3::identity()).amax();
        if ortho > 1e-10 {
            return Err(GeometryError::InvalidFrame(format!(
                "axes not orthonormal (deviation {ortho:.3e})"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > 1e-10 {
            return Err(GeometryError::InvalidFrame(format!(
                "determinant {det} is not +1"
            )));
        }
        Ok(Self(Rotation3::from_matrix_unchecked(m)))
    }

    /// Frame whose z axis is `boresight`; local x is horizontal-ish, built
    /// from `reference × boresight` (falls back to another axis if parallel).
    pub fn from_boresight(boresight: &Vec3, reference: &Vec3) -> Result<Self, GeometryError> {
        let z = boresight
            .try_normalize(MIN_SEPARATION_M)
            .ok_or(GeometryError::DegenerateGeometry)?;
        let mut x = reference.cross(&z);
        if x.norm() < 1e-9 {
            let alt = if z.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
            x = alt.cross(&z);
        }
        let x = x.normalize();
        let y = z.cross(&x);
        Self::from_axes(x, y, z)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        self.0.matrix()
    }

    pub fn boresight(&self) -> Vec3 {
        self.0.matrix().column(2).into_owned()
    }

    pub fn to_local(&self, v: &Vec3) -> Vec3 {
        self.0.inverse_transform_vector(v)
    }

    pub fn to_global(&self, v: &Vec3) -> Vec3 {
        self.0.transform_vector(v)
    }
}

pub fn los_direction(from: &Point3, to: &Point3) -> Result<Direction3, GeometryError> {
    let d = to - from;
    let n = d.norm();
    if !(n >= MIN_SEPARATION_M) {
        return Err(GeometryError::DegenerateGeometry);
    }
    Ok(Unit::new_unchecked(d / n))
}

fn separation(a: &Point3, b: &Point3) -> Result<f64, GeometryError> {
    let n = (b - a).norm();
    if !(n >= MIN_SEPARATION_M) {
        return Err(GeometryError::DegenerateGeometry);
    }
    Ok(n)
}

/// One-way propagation delay in seconds.
pub fn propagation_delay(a: &Point3, b: &Point3) -> Result<f64, GeometryError> {
    Ok(separation(a, b)? / SPEED_OF_LIGHT)
}

/// Doppler shift seen at `target`. Positive when the satellite approaches.
pub fn doppler_shift(
    sat_pos: &Point3,
    sat_vel: &Vec3,
    target: &Point3,
    fc: f64,
) -> Result<f64, GeometryError> {
    let u = los_direction(sat_pos, target)?;
    Ok(sat_vel.dot(&u) * fc / SPEED_OF_LIGHT)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepartureAngles {
    pub angles: AngleTuple,
    pub gimbal_warning: bool,
}

pub fn departure_angles(
    src: &Point3,
    src_frame: &OrientationFrame,
    dst: &Point3,
) -> Result<DepartureAngles, GeometryError> {
    let u = los_direction(src, dst)?;
    let angles = AngleTuple::from_unit(&src_frame.to_local(&u));
    Ok(DepartureAngles {
        angles,
        gimbal_warning: angles.near_gimbal(),
    })
}

/// Gradients of (azimuth, elevation) with respect to a local unit vector.
/// Both are orthogonal to `w`.
pub(crate) fn angle_gradients_local(w: &Vec3) -> (Vec3, Vec3) {
    let rho2 = w.x * w.x + w.y * w.y;
    let rho = rho2.sqrt();
    if rho == 0.0 {
        return (Vec3::zeros(), Vec3::zeros());
    }
    let d_az = Vec3::new(-w.y / rho2, w.x / rho2, 0.0);
    let d_el = Vec3::new(-w.z * w.x / rho, -w.z * w.y / rho, rho);
    (d_az, d_el)
}

/// Derivative of the unit vector `(dst - src)/‖dst - src‖` w.r.t. `dst`.
pub(crate) fn unit_vector_jacobian(u: &Vec3, distance: f64) -> Matrix3<f64> {
    (Matrix3::identity() - u * u.transpose()) / distance
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathKind {
    Los,
    ViaRis,
}

/// Position derivatives (as 3-vectors) of every geometric observable.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObservableJacobians {
    pub delay: Vec3,
    pub sat_azimuth: Vec3,
    pub sat_elevation: Vec3,
    pub ris_azimuth: Vec3,
    pub ris_elevation: Vec3,
    pub doppler: Vec3,
}

/// Geometry of one resolved path at a given user position.
#[derive(Debug, Clone, PartialEq)]
pub struct PathGeometry {
    pub kind: PathKind,
    pub delay_s: f64,
    pub sat_aod: AngleTuple,
    pub ris_aod: Option<AngleTuple>,
    /// Doppler is carried only by line-of-sight paths.
    pub doppler_hz: Option<f64>,
    pub jacobians: ObservableJacobians,
    pub gimbal_warning: bool,
    /// Departure direction at the satellite, satellite frame.
    pub sat_dir_local: Vec3,
    /// Departure direction at the RIS toward the user, RIS frame.
    pub ris_dir_local: Option<Vec3>,
    /// Direction from the RIS toward the satellite, RIS frame.
    pub ris_incident_local: Option<Vec3>,
    /// d(position-dependent local departure direction)/d(user position).
    pub dir_jacobian: Matrix3<f64>,
}

impl PathGeometry {
    pub fn los(
        sat_pos: &Point3,
        sat_vel: &Vec3,
        sat_frame: &OrientationFrame,
        user: &Point3,
        fc: f64,
    ) -> Result<Self, GeometryError> {
        let dist = separation(sat_pos, user)?;
        let u = (user - sat_pos) / dist;
        let w = sat_frame.to_local(&u);
        let sat_aod = AngleTuple::from_unit(&w);
        let (g_az, g_el) = angle_gradients_local(&w);
        let r = sat_frame.matrix();
        let jac_u = unit_vector_jacobian(&u, dist);
        let jacobians = ObservableJacobians {
            delay: u / SPEED_OF_LIGHT,
            sat_azimuth: r * g_az / dist,
            sat_elevation: r * g_el / dist,
            doppler: jac_u * sat_vel * (fc / SPEED_OF_LIGHT),
            ..Default::default()
        };
        Ok(Self {
            kind: PathKind::Los,
            delay_s: dist / SPEED_OF_LIGHT,
            sat_aod,
            ris_aod: None,
            doppler_hz: Some(sat_vel.dot(&u) * fc / SPEED_OF_LIGHT),
            jacobians,
            gimbal_warning: sat_aod.near_gimbal(),
            sat_dir_local: w,
            ris_dir_local: None,
            ris_incident_local: None,
            dir_jacobian: r.transpose() * jac_u,
        })
    }

    pub fn via_ris(
        sat_pos: &Point3,
        sat_frame: &OrientationFrame,
        ris_pos: &Point3,
        ris_frame: &OrientationFrame,
        user: &Point3,
    ) -> Result<Self, GeometryError> {
        let d1 = separation(sat_pos, ris_pos)?;
        let d2 = separation(ris_pos, user)?;
        let u1 = (ris_pos - sat_pos) / d1;
        let u2 = (user - ris_pos) / d2;
        let w_sat = sat_frame.to_local(&u1);
        let w_ris = ris_frame.to_local(&u2);
        let sat_aod = AngleTuple::from_unit(&w_sat);
        let ris_aod = AngleTuple::from_unit(&w_ris);
        let (g_az, g_el) = angle_gradients_local(&w_ris);
        let r = ris_frame.matrix();
        let jacobians = ObservableJacobians {
            delay: u2 / SPEED_OF_LIGHT,
            ris_azimuth: r * g_az / d2,
            ris_elevation: r * g_el / d2,
            ..Default::default()
        };
        Ok(Self {
            kind: PathKind::ViaRis,
            delay_s: (d1 + d2) / SPEED_OF_LIGHT,
            sat_aod,
            ris_aod: Some(ris_aod),
            doppler_hz: None,
            jacobians,
            gimbal_warning: sat_aod.near_gimbal() || ris_aod.near_gimbal(),
            sat_dir_local: w_sat,
            ris_dir_local: Some(w_ris),
            ris_incident_local: Some(ris_frame.to_local(&(-u1))),
            dir_jacobian: r.transpose() * unit_vector_jacobian(&u2, d2),
        })
    }
}

/// Observables and analytic position Jacobians for a LoS path (`ris = None`)
/// or a satellite → RIS → user path.
pub fn position_jacobians(
    sat: &SatelliteState,
    ris: Option<&RisPanel>,
    user: &Point3,
    fc: f64,
) -> Result<PathGeometry, GeometryError> {
    match ris {
        None => PathGeometry::los(
            &sat.position,
            &sat.velocity,
            &sat.array_orientation,
            user,
            fc,
        ),
        Some(panel) => PathGeometry::via_ris(
            &sat.position,
            &sat.array_orientation,
            &panel.position,
            &panel.orientation,
            user,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
        loop {
            let v = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                return v / n;
            }
        }
    }

    fn random_frame(rng: &mut ChaCha8Rng) -> OrientationFrame {
        let b = random_unit(rng);
        OrientationFrame::from_boresight(&b, &Vec3::z()).unwrap()
    }

    #[test]
    fn los_direction_axis_aligned() {
        let d = los_direction(&Point3::origin(), &Point3::new(5.0, 0.0, 0.0)).unwrap();
        assert_eq!(d.into_inner(), Vec3::new(1.0, 0.0, 0.0));
        let d = los_direction(&Point3::new(1.0, 1.0, 1.0), &Point3::new(1.0, 1.0, 2.0)).unwrap();
        assert_eq!(d.into_inner(), Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn los_direction_unit_norm_and_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let a = Point3::from(random_unit(&mut rng) * rng.random_range(0.0..1e7));
            let b = Point3::from(random_unit(&mut rng) * rng.random_range(0.0..1e7));
            let d = los_direction(&a, &b).unwrap();
            assert!((d.norm() - 1.0).abs() < 1e-12);
        }
        let p = Point3::new(3.0, 4.0, 5.0);
        assert_eq!(los_direction(&p, &p), Err(GeometryError::DegenerateGeometry));
        assert_eq!(
            propagation_delay(&p, &Point3::new(3.0, 4.0, 5.0 + 1e-10)),
            Err(GeometryError::DegenerateGeometry)
        );
    }

    #[test]
    fn delay_values() {
        let o = Point3::origin();
        let t = propagation_delay(&o, &Point3::new(SPEED_OF_LIGHT, 0.0, 0.0)).unwrap();
        assert_eq!(t, 1.0);
        let t = propagation_delay(&o, &Point3::new(0.0, 0.0, 600e3)).unwrap();
        assert!((t - 2.0014e-3).abs() < 1e-7, "{t}");
        let a = Point3::new(1.0, -2.0, 3.5);
        let b = Point3::new(-7.0, 2.0, 1e5);
        assert_eq!(
            propagation_delay(&a, &b).unwrap(),
            propagation_delay(&b, &a).unwrap()
        );
    }

    #[test]
    fn doppler_values() {
        let sat = Point3::new(0.0, 0.0, 600e3);
        let user = Point3::origin();
        // orthogonal velocity
        let nu = doppler_shift(&sat, &Vec3::new(7561.8, 0.0, 0.0), &user, 28e9).unwrap();
        assert!(nu.abs() < 1e-9);
        // moving straight at the user
        let nu = doppler_shift(&sat, &Vec3::new(0.0, 0.0, -7561.8), &user, 28e9).unwrap();
        assert!((nu - 7.062e5).abs() < 1e2, "{nu}");
        let nu = doppler_shift(&sat, &Vec3::new(0.0, 0.0, 7561.8), &user, 28e9).unwrap();
        assert!(nu < 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let s = Point3::from(random_unit(&mut rng) * 1e6);
            let v = random_unit(&mut rng) * rng.random_range(0.0..8000.0);
            let t = Point3::from(random_unit(&mut rng) * 50.0);
            let nu = doppler_shift(&s, &v, &t, 28e9).unwrap();
            assert!(nu.abs() <= v.norm() * 28e9 / SPEED_OF_LIGHT * (1.0 + 1e-15));
        }
    }

    #[test]
    fn departure_angle_conventions() {
        let f = OrientationFrame::identity();
        let a = departure_angles(&Point3::origin(), &f, &Point3::new(10.0, 0.0, 0.0)).unwrap();
        assert_eq!(a.angles, AngleTuple::new(0.0, 0.0));
        assert!(!a.gimbal_warning);
        let a = departure_angles(&Point3::origin(), &f, &Point3::new(0.0, 0.0, 3.0)).unwrap();
        assert_eq!(a.angles.azimuth, 0.0);
        assert!((a.angles.elevation - FRAC_PI_2).abs() < 1e-15);
        assert!(a.gimbal_warning);
        let a = departure_angles(&Point3::origin(), &f, &Point3::new(-1.0, -0.0, 0.0)).unwrap();
        assert_eq!(a.angles.azimuth, PI);
    }

    #[test]
    fn angle_round_trip_and_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100_000 {
            let w = random_unit(&mut rng);
            let a = AngleTuple::from_unit(&w);
            assert!(a.azimuth > -PI && a.azimuth <= PI);
            assert!(a.elevation >= -FRAC_PI_2 && a.elevation <= FRAC_PI_2);
            if !a.near_gimbal() {
                assert!((a.to_unit() - w).norm() < 1e-12);
            }
        }
        // through a rotated frame
        for _ in 0..1000 {
            let frame = random_frame(&mut rng);
            let src = Point3::from(random_unit(&mut rng) * 100.0);
            let dst = Point3::from(random_unit(&mut rng) * 1e3);
            let u = los_direction(&src, &dst).unwrap().into_inner();
            let a = departure_angles(&src, &frame, &dst).unwrap();
            let back = frame.to_global(&a.angles.to_unit());
            assert!((back - u).norm() < 1e-12);
        }
    }

    #[test]
    fn frame_validation() {
        assert!(OrientationFrame::from_axes(Vec3::x(), Vec3::y(), -Vec3::z()).is_err());
        assert!(OrientationFrame::from_axes(Vec3::x(), Vec3::x(), Vec3::z()).is_err());
        let f = OrientationFrame::from_boresight(&Vec3::new(0.3, -0.2, -1.0), &Vec3::y()).unwrap();
        let m = f.matrix();
        assert!((m.determinant() - 1.0).abs() < 1e-10);
        assert!((m.transpose() * m - Matrix3::identity()).amax() < 1e-10);
        // parallel reference falls back
        let f = OrientationFrame::from_boresight(&Vec3::y(), &Vec3::y()).unwrap();
        assert!((f.boresight() - Vec3::y()).norm() < 1e-15);
    }

    #[test]
    fn collinear_los_delay_gradient() {
        let d = 600e3;
        let g = PathGeometry::los(
            &Point3::new(d, 0.0, 0.0),
            &Vec3::new(0.0, 7000.0, 0.0),
            &OrientationFrame::from_boresight(&-Vec3::x(), &Vec3::z()).unwrap(),
            &Point3::origin(),
            28e9,
        )
        .unwrap();
        let expected = Vec3::new(-1.0 / SPEED_OF_LIGHT, 0.0, 0.0);
        assert!((g.jacobians.delay - expected).norm() < 1e-24);
    }

    fn rel_err(a: &Vec3, b: &Vec3) -> f64 {
        let scale = a.norm().max(b.norm());
        if scale == 0.0 {
            0.0
        } else {
            (a - b).norm() / scale
        }
    }

    /// Central differences with 1 mm step against every analytic Jacobian.
    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-3;
        let fc = 28e9;
        for _ in 0..100 {
            let sat_pos = Point3::new(
                rng.random_range(-1.5e6..1.5e6),
                rng.random_range(-1.5e6..1.5e6),
                rng.random_range(4e5..1e6),
            );
            let sat_vel = random_unit(&mut rng) * 7500.0;
            let sat_frame =
                OrientationFrame::from_boresight(&(Point3::origin() - sat_pos), &Vec3::y()).unwrap();
            let ris_pos = Point3::new(
                rng.random_range(-40.0..40.0),
                rng.random_range(-40.0..40.0),
                rng.random_range(2.0..10.0),
            );
            let ris_frame = random_frame(&mut rng);
            let user = Point3::new(
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(0.0..5.0),
            );
            if (user - Point3::origin()).xy().norm() < 5.0 || (user - ris_pos).norm() < 2.0 {
                continue;
            }
            let los = PathGeometry::los(&sat_pos, &sat_vel, &sat_frame, &user, fc).unwrap();
            let ris = PathGeometry::via_ris(&sat_pos, &sat_frame, &ris_pos, &ris_frame, &user)
                .unwrap();
            if ris.ris_aod.unwrap().near_gimbal() {
                continue;
            }
            let mut fd = [Vec3::zeros(); 7];
            for k in 0..3 {
                let mut e = Vec3::zeros();
                e[k] = h;
                let lp = PathGeometry::los(&sat_pos, &sat_vel, &sat_frame, &(user + e), fc).unwrap();
                let lm = PathGeometry::los(&sat_pos, &sat_vel, &sat_frame, &(user - e), fc).unwrap();
                let rp = PathGeometry::via_ris(&sat_pos, &sat_frame, &ris_pos, &ris_frame, &(user + e))
                    .unwrap();
                let rm = PathGeometry::via_ris(&sat_pos, &sat_frame, &ris_pos, &ris_frame, &(user - e))
                    .unwrap();
                let c = |a: f64, b: f64| (a - b) / (2.0 * h);
                fd[0][k] = c(lp.delay_s, lm.delay_s);
                fd[1][k] = c(lp.sat_aod.azimuth, lm.sat_aod.azimuth);
                fd[2][k] = c(lp.sat_aod.elevation, lm.sat_aod.elevation);
                fd[3][k] = c(lp.doppler_hz.unwrap(), lm.doppler_hz.unwrap());
                fd[4][k] = c(rp.delay_s, rm.delay_s);
                fd[5][k] = c(rp.ris_aod.unwrap().azimuth, rm.ris_aod.unwrap().azimuth);
                fd[6][k] = c(rp.ris_aod.unwrap().elevation, rm.ris_aod.unwrap().elevation);
            }
            let analytic = [
                los.jacobians.delay,
                los.jacobians.sat_azimuth,
                los.jacobians.sat_elevation,
                los.jacobians.doppler,
                ris.jacobians.delay,
                ris.jacobians.ris_azimuth,
                ris.jacobians.ris_elevation,
            ];
            for (i, (a, f)) in analytic.iter().zip(fd.iter()).enumerate() {
                let e = rel_err(a, f);
                assert!(e < 1e-6, "observable {i}: rel err {e:.3e} ({a:?} vs {f:?})");
            }
            assert_eq!(ris.jacobians.doppler, Vec3::zeros());
            assert!(ris.doppler_hz.is_none());
        }
    }

    #[test]
    fn pure_functions_are_bitwise_reproducible() {
        let s = Point3::new(1.2e5, -3.3e5, 6.1e5);
        let f = OrientationFrame::from_boresight(&(Point3::origin() - s), &Vec3::y()).unwrap();
        let u = Point3::new(3.0, 7.0, 1.5);
        let a = PathGeometry::los(&s, &Vec3::new(1.0, 7000.0, 3.0), &f, &u, 28e9).unwrap();
        let b = PathGeometry::los(&s, &Vec3::new(1.0, 7000.0, 3.0), &f, &u, 28e9).unwrap();
        assert_eq!(a, b);
    }
}
