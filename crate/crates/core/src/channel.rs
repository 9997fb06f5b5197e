//! Line-of-sight dominant satellite-to-user channel and the constant-delay
//! CSI observation model.
//!
//! A channel vector is free-space amplitude x UPA steering phase x carrier
//! phase x per-element Rician small-scale term. It is regenerated from
//! geometry at every epoch, so orbital and user motion age the CSI that an
//! agent sees `T_d` steps late.

use std::f64::consts::{PI, TAU};
use std::io::Write;

use nalgebra::{DMatrix, DVector, Vector3};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::constellation::{elevation_of, SatelliteState, UserState};
use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const BOLTZMANN: f64 = 1.380_649e-23;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadioConfig {
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    pub mx: usize,
    pub my: usize,
    /// System noise temperature; noise power is k_B * T_sys * BW.
    pub noise_temp_k: f64,
    /// Per-satellite transmit power budget P_l, W.
    pub per_sat_power_w: f64,
    /// Rician K factor in dB; `inf` gives a pure line-of-sight channel.
    pub rician_k_db: f64,
    pub tx_gain_dbi: f64,
    pub rx_gain_dbi: f64,
}

impl Default for RadioConfig {
    fn default() -> Self {
        let carrier_hz = 2e9;
        Self {
            carrier_hz,
            bandwidth_hz: 0.02 * carrier_hz,
            mx: 3,
            my: 3,
            noise_temp_k: 290.0,
            per_sat_power_w: 10.0,
            rician_k_db: 10.0,
            tx_gain_dbi: 30.0,
            rx_gain_dbi: 0.0,
        }
    }
}

impl RadioConfig {
    pub fn antennas(&self) -> usize {
        self.mx * self.my
    }

    pub fn noise_power(&self) -> f64 {
        BOLTZMANN * self.noise_temp_k * self.bandwidth_hz
    }

    pub fn rician_k(&self) -> f64 {
        10f64.powf(self.rician_k_db / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("carrier_hz", self.carrier_hz),
            ("bandwidth_hz", self.bandwidth_hz),
            ("noise_temp_k", self.noise_temp_k),
            ("per_sat_power_w", self.per_sat_power_w),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::Config(format!("radio.{name} must be positive and finite (got {value})")));
            }
        }
        if self.mx == 0 || self.my == 0 {
            return Err(Error::Config("radio.mx and radio.my must be positive".into()));
        }
        if self.rician_k_db.is_nan() || !self.tx_gain_dbi.is_finite() || !self.rx_gain_dbi.is_finite() {
            return Err(Error::Config("radio gains and rician_k_db must be numbers".into()));
        }
        Ok(())
    }
}

/// Per-satellite CSI for all users: column `k` is user `k`'s channel to this
/// satellite's `M` antennas.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelObservation {
    pub sat_id: usize,
    pub epoch: u64,
    pub h: DMatrix<Complex64>,
}

/// UPA response with half-wavelength spacing. `direction` is a unit vector in
/// the satellite body frame; element `(m_x, m_y)` sits at index `m_y * M_x + m_x`.
pub fn steering_vector(config: &RadioConfig, direction: &Vector3<f64>) -> DVector<Complex64> {
    let (u, v) = (direction.x, direction.y);
    DVector::from_fn(config.antennas(), |idx, _| {
        let (mx, my) = ((idx % config.mx) as f64, (idx / config.mx) as f64);
        Complex64::from_polar(1.0, -PI * (mx * u + my * v))
    })
}

/// Nadir-pointing body frame: x along track, z toward the Earth's centre.
pub fn body_frame(sat: &SatelliteState) -> [Vector3<f64>; 3] {
    let z = -sat.position.normalize();
    let along = sat.velocity - z * sat.velocity.dot(&z);
    let x = along.normalize();
    let y = z.cross(&x);
    [x, y, z]
}

pub fn fspl_db(distance: f64, carrier_hz: f64) -> f64 {
    20.0 * (4.0 * PI * distance * carrier_hz / SPEED_OF_LIGHT).log10()
}

/// Mixes the stream key so every (seed, satellite, user, epoch) draw is independent.
fn stream_key(seed: u64, sat_id: usize, user_id: usize, epoch: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    let mut h = splitmix(seed);
    for word in [sat_id as u64, user_id as u64, epoch] {
        h = splitmix(h ^ word);
    }
    h
}

/// Channel vector between one satellite and one user at `epoch`.
pub fn generate_channel(
    sat: &SatelliteState,
    user: &UserState,
    config: &RadioConfig,
    epoch: u64,
    seed: u64,
) -> Result<DVector<Complex64>> {
    let elevation = elevation_of(&sat.position, &user.position);
    if elevation <= 0.0 {
        return Err(Error::NotVisible { sat_id: sat.id, user_id: user.id, elevation_deg: elevation.to_degrees() });
    }
    let los = user.position - sat.position;
    let d = los.norm();
    let dir = los / d;
    let [bx, by, bz] = body_frame(sat);
    let local = Vector3::new(dir.dot(&bx), dir.dot(&by), dir.dot(&bz));

    let gain = 10f64.powf((config.tx_gain_dbi + config.rx_gain_dbi) / 20.0);
    let amplitude = gain * SPEED_OF_LIGHT / (4.0 * PI * d * config.carrier_hz);
    let cycles = d * config.carrier_hz / SPEED_OF_LIGHT;
    let carrier = Complex64::from_polar(amplitude, -TAU * cycles.fract());

    let k = config.rician_k();
    let steering = steering_vector(config, &local);
    if k.is_infinite() {
        return Ok(steering * carrier);
    }
    let los_part = (k / (k + 1.0)).sqrt();
    let nlos_part = (1.0 / (k + 1.0) / 2.0).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_key(seed, sat.id, user.id, epoch));
    Ok(steering.map(|a| {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        a * carrier * Complex64::new(los_part + nlos_part * re, nlos_part * im)
    }))
}

/// M x K CSI of one satellite toward every user.
pub fn observe(
    sat: &SatelliteState,
    users: &[UserState],
    config: &RadioConfig,
    epoch: u64,
    seed: u64,
) -> Result<ChannelObservation> {
    let mut h = DMatrix::zeros(config.antennas(), users.len());
    for (k, user) in users.iter().enumerate() {
        h.set_column(k, &generate_channel(sat, user, config, epoch, seed)?);
    }
    Ok(ChannelObservation { sat_id: sat.id, epoch, h })
}

pub fn propagation_delay(distance: f64) -> f64 {
    distance / SPEED_OF_LIGHT
}

/// Number of whole steps of length `step` needed to cover `delay` (ceiling).
pub fn discretize_delay(delay: f64, step: f64) -> u64 {
    let q = delay / step;
    let nearest = q.round();
    // exact multiples must not be bumped up by rounding noise in the division
    if (q - nearest).abs() <= 1e-9 * nearest.abs().max(1.0) {
        nearest.max(0.0) as u64
    } else {
        q.ceil().max(0.0) as u64
    }
}

/// Cluster delay: the largest per-(user, satellite) discrete delay.
pub fn cluster_delay(delays: &[Vec<u64>]) -> Result<u64> {
    delays
        .iter()
        .flatten()
        .copied()
        .max()
        .ok_or_else(|| Error::Dimension("cluster_delay needs a non-empty delay matrix".into()))
}

/// Ring buffer of per-epoch observation sets serving CSI `T_d` epochs late.
#[derive(Debug, Clone)]
pub struct DelayBuffer {
    slots: Vec<Option<(u64, Vec<ChannelObservation>)>>,
    warmup: Option<Vec<ChannelObservation>>,
}

impl DelayBuffer {
    pub fn new(delay: usize) -> Self {
        Self { slots: vec![None; delay + 1], warmup: None }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn push(&mut self, epoch: u64, set: Vec<ChannelObservation>) {
        if epoch == 0 {
            self.warmup = Some(set.clone());
        }
        let idx = (epoch % self.slots.len() as u64) as usize;
        self.slots[idx] = Some((epoch, set));
    }

    /// Observations stamped `t - delay`; the epoch-0 snapshot while `t < delay`.
    pub fn delayed(&self, t: u64, delay: u64) -> Result<&[ChannelObservation]> {
        if t < delay {
            return self.warmup.as_deref().ok_or(Error::MissingEpoch(0));
        }
        let target = t - delay;
        let idx = (target % self.slots.len() as u64) as usize;
        match &self.slots[idx] {
            Some((stamp, set)) if *stamp == target => Ok(set),
            _ => Err(Error::MissingEpoch(target)),
        }
    }
}

/// Appends one step of CSI as little-endian f64, interleaved re/im, row-major
/// M x K per satellite in the given order.
pub fn write_channel_dump<W: Write>(out: &mut W, set: &[ChannelObservation]) -> std::io::Result<()> {
    for obs in set {
        for m in 0..obs.h.nrows() {
            for k in 0..obs.h.ncols() {
                let z = obs.h[(m, k)];
                out.write_all(&z.re.to_le_bytes())?;
                out.write_all(&z.im.to_le_bytes())?;
            }
        }
    }
    Ok(())
}
