//! Circular-orbit LEO constellation.
//!
//! Satellites follow ideal Keplerian circular orbits around a spherical,
//! non-rotating Earth. The serving cluster is the `L` visible satellites
//! closest to the centre of the coverage area; a change of membership between
//! two epochs is a handover.

use std::f64::consts::{PI, TAU};

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
/// Standard gravitational parameter of the Earth, m^3/s^2.
pub const EARTH_MU: f64 = 3.986e14;
/// Minimum elevation (30 deg) for a satellite to count as visible.
pub const MIN_ELEVATION_RAD: f64 = PI / 6.0;

/// One orbital shell: `count` satellites spread over `planes` planes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShellSpec {
    pub count: usize,
    pub altitude_km: f64,
    pub inclination_deg: f64,
    pub planes: usize,
}

impl ShellSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("shell count must be positive".into()));
        }
        if self.planes == 0 || self.planes > self.count {
            return Err(Error::Config(format!("shell planes must be in 1..={} (got {})", self.count, self.planes)));
        }
        if !(self.altitude_km > 300.0 && self.altitude_km < 1500.0) {
            return Err(Error::Config(format!("shell altitude {} km outside (300, 1500) km", self.altitude_km)));
        }
        if !self.inclination_deg.is_finite() || !(0.0..=180.0).contains(&self.inclination_deg) {
            return Err(Error::Config(format!("shell inclination {} deg outside [0, 180]", self.inclination_deg)));
        }
        Ok(())
    }
}

/// Four shells approximating the public Starlink layout, 4236 satellites total.
pub fn starlink_like_shells() -> Vec<ShellSpec> {
    vec![
        ShellSpec { count: 1584, altitude_km: 550.0, inclination_deg: 53.0, planes: 72 },
        ShellSpec { count: 1584, altitude_km: 540.0, inclination_deg: 53.2, planes: 72 },
        ShellSpec { count: 720, altitude_km: 570.0, inclination_deg: 70.0, planes: 36 },
        ShellSpec { count: 348, altitude_km: 560.0, inclination_deg: 97.6, planes: 6 },
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SatelliteState {
    pub id: usize,
    pub shell: usize,
    /// Altitude above the spherical Earth, m.
    pub altitude: f64,
    pub inclination: f64,
    pub raan: f64,
    /// Argument of latitude (in-plane anomaly), rad in `[0, 2pi)`.
    pub phase: f64,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

impl SatelliteState {
    pub fn new(id: usize, shell: usize, altitude: f64, inclination: f64, raan: f64, phase: f64) -> Self {
        let phase = phase.rem_euclid(TAU);
        let (position, velocity) = orbit_kinematics(altitude, inclination, raan, phase);
        Self { id, shell, altitude, inclination, raan, phase, position, velocity }
    }

    pub fn radius(&self) -> f64 {
        EARTH_RADIUS_M + self.altitude
    }

    /// Mean motion sqrt(mu / r^3), rad/s.
    pub fn angular_rate(&self) -> f64 {
        (EARTH_MU / self.radius().powi(3)).sqrt()
    }

    pub fn period(&self) -> f64 {
        TAU / self.angular_rate()
    }

    /// Advances the satellite along its orbit by `dt` seconds.
    pub fn propagate(&self, dt: f64) -> SatelliteState {
        if dt == 0.0 {
            return self.clone();
        }
        let phase = self.phase + self.angular_rate() * dt;
        SatelliteState::new(self.id, self.shell, self.altitude, self.inclination, self.raan, phase)
    }
}

/// Circular orbital speed sqrt(mu / r) at the given altitude.
pub fn circular_speed(altitude: f64) -> f64 {
    (EARTH_MU / (EARTH_RADIUS_M + altitude)).sqrt()
}

fn orbit_kinematics(altitude: f64, incl: f64, raan: f64, u: f64) -> (Vector3<f64>, Vector3<f64>) {
    let r = EARTH_RADIUS_M + altitude;
    let speed = circular_speed(altitude);
    let (so, co) = raan.sin_cos();
    let (si, ci) = incl.sin_cos();
    let (su, cu) = u.sin_cos();
    let position = Vector3::new(co * cu - so * su * ci, so * cu + co * su * ci, su * si) * r;
    let velocity = Vector3::new(-co * su - so * cu * ci, -so * su + co * cu * ci, cu * si) * speed;
    (position, velocity)
}

/// Lays out every shell over evenly spaced planes and in-plane phases.
pub fn build_constellation(shells: &[ShellSpec]) -> Result<Vec<SatelliteState>> {
    if shells.is_empty() {
        return Err(Error::Config("constellation needs at least one shell".into()));
    }
    let mut sats = Vec::with_capacity(shells.iter().map(|s| s.count).sum());
    for (shell_idx, spec) in shells.iter().enumerate() {
        spec.validate()?;
        let altitude = spec.altitude_km * 1e3;
        let inclination = spec.inclination_deg.to_radians();
        let base = spec.count / spec.planes;
        let extra = spec.count % spec.planes;
        for plane in 0..spec.planes {
            let in_plane = base + usize::from(plane < extra);
            let raan = TAU * plane as f64 / spec.planes as f64;
            // Walker-style inter-plane phasing with factor 1.
            let offset = TAU * plane as f64 / spec.count as f64;
            for j in 0..in_plane {
                let phase = TAU * j as f64 / in_plane as f64 + offset;
                let id = sats.len();
                sats.push(SatelliteState::new(id, shell_idx, altitude, inclination, raan, phase));
            }
        }
    }
    Ok(sats)
}

/// Point on the Earth's surface from geodetic-style latitude/longitude (spherical Earth).
pub fn ground_point(lat_deg: f64, lon_deg: f64) -> Vector3<f64> {
    let (slat, clat) = lat_deg.to_radians().sin_cos();
    let (slon, clon) = lon_deg.to_radians().sin_cos();
    Vector3::new(clat * clon, clat * slon, slat) * EARTH_RADIUS_M
}

/// Elevation of `sat` above the local horizon plane of `ground`, in `[-pi/2, pi/2]`.
pub fn elevation_angle(sat: &SatelliteState, ground: &Vector3<f64>) -> f64 {
    elevation_of(&sat.position, ground)
}

pub(crate) fn elevation_of(target: &Vector3<f64>, ground: &Vector3<f64>) -> f64 {
    let up = ground.normalize();
    let los = target - ground;
    (los.dot(&up) / los.norm()).clamp(-1.0, 1.0).asin()
}

/// Great-circle distance between two surface points, m.
pub fn great_circle_distance(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let cross = a.cross(b).norm();
    EARTH_RADIUS_M * cross.atan2(a.dot(b))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cluster {
    pub epoch: u64,
    /// Member ids in ascending distance to the coverage centre.
    pub members: Vec<usize>,
}

/// Picks the `l` visible satellites closest to `center`; ties go to the lower id.
pub fn select_cluster(sats: &[SatelliteState], center: &Vector3<f64>, l: usize, epoch: u64) -> Result<Cluster> {
    let mut visible: Vec<(f64, usize)> = sats
        .iter()
        .filter(|s| elevation_angle(s, center) >= MIN_ELEVATION_RAD)
        .map(|s| ((s.position - center).norm(), s.id))
        .collect();
    if visible.len() < l {
        return Err(Error::CoverageGap { epoch, visible: visible.len(), required: l });
    }
    visible.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(Cluster { epoch, members: visible.into_iter().take(l).map(|(_, id)| id).collect() })
}

pub fn count_visible(sats: &[SatelliteState], center: &Vector3<f64>) -> usize {
    sats.iter().filter(|s| elevation_angle(s, center) >= MIN_ELEVATION_RAD).count()
}

/// Slant range at which a satellite at `altitude` sits at the minimum elevation.
pub fn max_visible_range(altitude: f64) -> f64 {
    let s = MIN_ELEVATION_RAD.sin();
    let r = EARTH_RADIUS_M;
    -r * s + (r * r * s * s + 2.0 * r * altitude + altitude * altitude).sqrt()
}

/// Constellation evaluated at absolute time since its epoch-0 layout.
///
/// Cluster selection only scans satellites that can reach the visibility
/// cone within the current candidate window; the result is identical to
/// [`select_cluster`] over the full set.
#[derive(Debug, Clone)]
pub struct Constellation {
    initial: Vec<SatelliteState>,
    center: Vector3<f64>,
    reach: f64,
    window: f64,
    candidates: Vec<usize>,
    window_start: f64,
}

impl Constellation {
    const WINDOW_S: f64 = 10.0;

    pub fn new(initial: Vec<SatelliteState>, center: Vector3<f64>) -> Self {
        let max_alt = initial.iter().map(|s| s.altitude).fold(0.0, f64::max);
        let max_speed = initial.iter().map(|s| circular_speed(s.altitude)).fold(0.0, f64::max);
        let window = Self::WINDOW_S;
        let reach = max_visible_range(max_alt) + 1.1 * max_speed * window + 1e3;
        Self { initial, center, reach, window, candidates: Vec::new(), window_start: f64::NAN }
    }

    pub fn len(&self) -> usize {
        self.initial.len()
    }

    pub fn is_empty(&self) -> bool {
        self.initial.is_empty()
    }

    pub fn center(&self) -> &Vector3<f64> {
        &self.center
    }

    pub fn state_at(&self, id: usize, t: f64) -> SatelliteState {
        self.initial[id].propagate(t)
    }

    pub fn satellites_at(&self, t: f64) -> Vec<SatelliteState> {
        self.initial.iter().map(|s| s.propagate(t)).collect()
    }

    fn refresh(&mut self, t: f64) {
        self.candidates = self
            .initial
            .iter()
            .map(|s| s.propagate(t))
            .filter(|s| (s.position - self.center).norm() <= self.reach)
            .map(|s| s.id)
            .collect();
        self.window_start = t;
    }

    pub fn select(&mut self, t: f64, l: usize, epoch: u64) -> Result<Cluster> {
        if !(t >= self.window_start && t <= self.window_start + self.window) {
            self.refresh(t);
        }
        let states: Vec<SatelliteState> = self.candidates.iter().map(|&id| self.initial[id].propagate(t)).collect();
        select_cluster(&states, &self.center, l, epoch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HandoverEvent {
    pub left: usize,
    pub joined: usize,
}

/// Pairs departing members (in `prev` order) with joining members (in `next` order).
pub fn detect_handover(prev: &Cluster, next: &Cluster) -> Vec<HandoverEvent> {
    let left = prev.members.iter().filter(|id| !next.members.contains(id));
    let joined = next.members.iter().filter(|id| !prev.members.contains(id));
    left.zip(joined).map(|(&left, &joined)| HandoverEvent { left, joined }).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserState {
    pub id: usize,
    pub position: Vector3<f64>,
    /// Surface-tangent velocity, m/s.
    pub velocity: Vector3<f64>,
}

/// Ground users confined to a disc around the coverage centre.
#[derive(Debug, Clone)]
pub struct CoverageArea {
    pub center: Vector3<f64>,
    pub radius_m: f64,
    pub max_speed: f64,
}

impl CoverageArea {
    pub fn new(lat_deg: f64, lon_deg: f64, radius_m: f64, max_speed: f64) -> Self {
        Self { center: ground_point(lat_deg, lon_deg), radius_m, max_speed }
    }

    /// Orthonormal (north, east) tangent basis at a surface point.
    fn tangent_basis(p: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let up = p.normalize();
        let z = Vector3::z();
        let east = z.cross(&up);
        let east = if east.norm() < 1e-12 { Vector3::y() } else { east.normalize() };
        let north = up.cross(&east);
        (north, east)
    }

    /// Users uniformly placed in the disc, each with a random heading and a
    /// constant speed drawn from `[0, max_speed]`.
    pub fn spawn_users<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<UserState> {
        let c_hat = self.center.normalize();
        let (north, east) = Self::tangent_basis(&self.center);
        (0..k)
            .map(|id| {
                let dist = self.radius_m * rng.gen::<f64>().sqrt();
                let bearing = rng.gen::<f64>() * TAU;
                let dir = north * bearing.cos() + east * bearing.sin();
                let ang = dist / EARTH_RADIUS_M;
                let position = (c_hat * ang.cos() + dir * ang.sin()) * EARTH_RADIUS_M;
                let (n, e) = Self::tangent_basis(&position);
                let heading = rng.gen::<f64>() * TAU;
                let speed = rng.gen::<f64>() * self.max_speed;
                let velocity = (n * heading.cos() + e * heading.sin()) * speed;
                UserState { id, position, velocity }
            })
            .collect()
    }

    /// Moves a user for `dt` seconds, reflecting off the disc boundary.
    pub fn step_user(&self, user: &UserState, dt: f64) -> UserState {
        let speed = user.velocity.norm();
        if speed == 0.0 || dt == 0.0 {
            return user.clone();
        }
        let moved = (user.position + user.velocity * dt).normalize() * EARTH_RADIUS_M;
        if great_circle_distance(&moved, &self.center) <= self.radius_m {
            let up = moved.normalize();
            let tangent = user.velocity - up * user.velocity.dot(&up);
            return UserState { id: user.id, position: moved, velocity: tangent.normalize() * speed };
        }
        // Outward tangent direction at the user, pointing away from the centre.
        let up = user.position.normalize();
        let to_center = self.center.normalize();
        let inward = to_center - up * to_center.dot(&up);
        let mut velocity = user.velocity;
        if inward.norm() > 0.0 {
            let outward = -inward.normalize();
            let radial = velocity.dot(&outward);
            if radial > 0.0 {
                velocity -= outward * (2.0 * radial);
            }
        } else {
            velocity = -velocity;
        }
        UserState { id: user.id, position: user.position, velocity }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn starlink_layout_totals_4236() {
        let sats = build_constellation(&starlink_like_shells()).unwrap();
        assert_eq!(sats.len(), 4236);
        assert!(sats.iter().enumerate().all(|(i, s)| s.id == i));
    }

    #[test]
    fn single_satellite_shell_sits_at_phase_zero() {
        let spec = ShellSpec { count: 1, altitude_km: 550.0, inclination_deg: 53.0, planes: 1 };
        let sats = build_constellation(&[spec]).unwrap();
        assert_eq!(sats.len(), 1);
        assert_eq!(sats[0].phase, 0.0);
    }

    #[test]
    fn circular_speed_per_altitude() {
        let shells = [
            ShellSpec { count: 1, altitude_km: 550.0, inclination_deg: 53.0, planes: 1 },
            ShellSpec { count: 1, altitude_km: 1100.0, inclination_deg: 53.0, planes: 1 },
        ];
        let sats = build_constellation(&shells).unwrap();
        // vis-viva with a = r for a circular orbit
        for (sat, alt) in sats.iter().zip([550e3, 1100e3]) {
            let r: f64 = 6_371_000.0 + alt;
            let expected = (3.986e14 * (2.0 / r - 1.0 / r)).sqrt();
            assert!(rel(sat.velocity.norm(), expected) < 1e-12);
        }
        assert!(sats[0].velocity.norm() > sats[1].velocity.norm());
    }

    #[test]
    fn invalid_shells_are_rejected() {
        let bad = [
            ShellSpec { count: 0, altitude_km: 550.0, inclination_deg: 53.0, planes: 1 },
            ShellSpec { count: 10, altitude_km: 200.0, inclination_deg: 53.0, planes: 1 },
            ShellSpec { count: 10, altitude_km: 1600.0, inclination_deg: 53.0, planes: 1 },
            ShellSpec { count: 10, altitude_km: 550.0, inclination_deg: 53.0, planes: 11 },
        ];
        for spec in bad {
            assert!(matches!(build_constellation(&[spec]), Err(Error::Config(_))));
        }
        assert!(build_constellation(&[]).is_err());
    }

    #[test]
    fn speed_at_550km_is_about_7_59_km_s() {
        // hand oracle: sqrt(3.986e14 / 6.921e6) = 7588.9 m/s
        let v = circular_speed(550e3);
        assert!((v - 7588.9).abs() < 0.5, "{v}");
    }

    #[test]
    fn propagation_is_periodic_and_identity_at_zero() {
        let sat = SatelliteState::new(0, 0, 550e3, 0.9, 0.3, 1.1);
        assert_eq!(sat.propagate(0.0), sat);
        let back = sat.propagate(sat.period());
        assert!((back.position - sat.position).norm() / sat.position.norm() < 1e-6);
    }

    #[test]
    fn propagation_keeps_orbit_invariants() {
        let mut sat = SatelliteState::new(3, 0, 570e3, 1.2, 2.0, 0.0);
        for _ in 0..1000 {
            sat = sat.propagate(0.731);
            assert!(rel(sat.position.norm(), EARTH_RADIUS_M + 570e3) < 1e-6);
            assert!(rel(sat.velocity.norm(), circular_speed(570e3)) < 1e-6);
            assert!(sat.position.dot(&sat.velocity).abs() / (sat.position.norm() * sat.velocity.norm()) < 1e-9);
        }
    }

    #[test]
    fn propagation_is_deterministic() {
        let sat = SatelliteState::new(0, 0, 550e3, 0.9, 0.3, 1.1);
        let a = sat.propagate(12.5).propagate(0.001);
        let b = sat.propagate(12.5).propagate(0.001);
        assert_eq!(a.position.as_slice(), b.position.as_slice());
    }

    #[test]
    fn elevation_zenith_and_horizon() {
        let ground = ground_point(10.0, 20.0);
        let up = ground.normalize();
        let zenith =
            SatelliteState { position: ground + up * 550e3, ..SatelliteState::new(0, 0, 550e3, 0.0, 0.0, 0.0) };
        assert!((elevation_angle(&zenith, &ground) - PI / 2.0).abs() < 1e-12);
        let (north, _) = CoverageArea::tangent_basis(&ground);
        let horizon = SatelliteState { position: ground + north * 1e6, ..zenith.clone() };
        assert!(elevation_angle(&horizon, &ground).abs() < 1e-12);
    }

    #[test]
    fn elevation_matches_geometric_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let ground = ground_point(rng.gen_range(-80.0..80.0), rng.gen_range(-180.0..180.0));
            let pos = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * 8e6;
            let sat = SatelliteState { position: pos, ..SatelliteState::new(0, 0, 550e3, 0.0, 0.0, 0.0) };
            // complement of the angle between the local vertical and the line of sight
            let los = pos - ground;
            let cos_zenith = los.dot(&ground) / (los.norm() * ground.norm());
            let oracle = PI / 2.0 - cos_zenith.clamp(-1.0, 1.0).acos();
            assert!((elevation_angle(&sat, &ground) - oracle).abs() < 1e-12);
        }
    }

    fn sat_at(id: usize, pos: Vector3<f64>) -> SatelliteState {
        SatelliteState { id, position: pos, ..SatelliteState::new(id, 0, 550e3, 0.0, 0.0, 0.0) }
    }

    #[test]
    fn cluster_ties_prefer_lower_id() {
        let center = ground_point(0.0, 0.0);
        let up = center.normalize();
        let (n, e) = CoverageArea::tangent_basis(&center);
        let sats = vec![
            sat_at(5, center + up * 600e3 + n * 10e3),
            sat_at(2, center + up * 600e3 - n * 10e3),
            sat_at(9, center + up * 600e3 + e * 50e3),
        ];
        let cluster = select_cluster(&sats, &center, 2, 0).unwrap();
        assert_eq!(cluster.members, vec![2, 5]);
        let all = select_cluster(&sats, &center, 3, 0).unwrap();
        assert_eq!(all.members, vec![2, 5, 9]);
        match select_cluster(&sats, &center, 4, 3) {
            Err(Error::CoverageGap { epoch: 3, visible: 3, required: 4 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cluster_from_coverage_centre_has_dozens_visible() {
        let sats = build_constellation(&starlink_like_shells()).unwrap();
        let center = ground_point(54.526, -3.3);
        let visible = count_visible(&sats, &center);
        assert!(visible >= 4, "{visible}");
        let cluster = select_cluster(&sats, &center, 4, 0).unwrap();
        assert_eq!(cluster.members.len(), 4);
        let dist = |id: usize| (sats[id].position - center).norm();
        for w in cluster.members.windows(2) {
            assert!(dist(w[0]) <= dist(w[1]));
        }
    }

    #[test]
    fn visible_range_matches_elevation() {
        let ground = ground_point(0.0, 0.0);
        let range = max_visible_range(550e3);
        // place a satellite at that slant range along a 30 deg elevation ray
        let (north, _) = CoverageArea::tangent_basis(&ground);
        let ray = ground.normalize() * MIN_ELEVATION_RAD.sin() + north * MIN_ELEVATION_RAD.cos();
        let pos = ground + ray * range;
        assert!(rel(pos.norm(), EARTH_RADIUS_M + 550e3) < 1e-12);
    }

    #[test]
    fn cached_selection_matches_full_scan() {
        let center = ground_point(54.526, -3.3);
        let mut con = Constellation::new(build_constellation(&starlink_like_shells()).unwrap(), center);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = 0.0;
        for epoch in 0..60 {
            t += rng.gen_range(0.0..4.0);
            let fast = con.select(t, 6, epoch).unwrap();
            let full = select_cluster(&con.satellites_at(t), &center, 6, epoch).unwrap();
            assert_eq!(fast, full);
        }
    }

    #[test]
    fn handover_detection() {
        let a = Cluster { epoch: 0, members: vec![1, 2, 3, 4] };
        let b = Cluster { epoch: 1, members: vec![2, 1, 3, 4] };
        assert!(detect_handover(&a, &b).is_empty());
        let c = Cluster { epoch: 2, members: vec![1, 7, 3, 4] };
        assert_eq!(detect_handover(&a, &c), vec![HandoverEvent { left: 2, joined: 7 }]);
    }

    #[test]
    fn users_stay_in_disc_and_under_speed_limit() {
        let area = CoverageArea::new(54.526, -3.3, 50e3, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut users = area.spawn_users(6, &mut rng);
        // exaggerated step to force boundary hits
        for _ in 0..2000 {
            users = users.iter().map(|u| area.step_user(u, 50.0)).collect();
            for u in &users {
                assert!(u.velocity.norm() <= 3.0 + 1e-9);
                assert!(great_circle_distance(&u.position, &area.center) <= 50e3 + 1e-6);
                assert!(rel(u.position.norm(), EARTH_RADIUS_M) < 1e-12);
                assert!(u.velocity.dot(&u.position.normalize()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn distance_ranking_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d: Vec<f64> = (0..40).map(|_| rng.gen_range(5e5..2e6)).collect();
        let rank = |xs: &[f64]| {
            let mut idx: Vec<usize> = (0..xs.len()).collect();
            idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]).then(a.cmp(&b)));
            idx.truncate(4);
            idx
        };
        let scaled: Vec<f64> = d.iter().map(|x| x * 3.7).collect();
        assert_eq!(rank(&d), rank(&scaled));
    }
}
