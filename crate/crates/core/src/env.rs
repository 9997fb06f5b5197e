//! Multi-agent delayed-CSI environment.
//!
//! Agents are indexed by cluster slot. When a satellite leaves the cluster the
//! joining satellite takes over its slot, so per-slot learners, CSI history
//! and trend memory persist across handovers. Orbital time is continuous
//! across episodes; only the reward-trend memory resets at an episode start.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::Vector3;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{
    cluster_delay, discretize_delay, observe, propagation_delay, ChannelObservation, DelayBuffer, RadioConfig,
};
use crate::constellation::{
    build_constellation, starlink_like_shells, Cluster, Constellation, CoverageArea, HandoverEvent, ShellSpec,
    UserState,
};
use crate::error::{Error, Result};
use crate::precoding::{project_power, singular_values, sum_rate, trace_power, CMatrix, GlobalTpm, Tpm};

/// Floor applied to the cluster sum-rate before taking its logarithm, Mbps.
pub const RATE_FLOOR_MBPS: f64 = 1e-6;

/// Sum-rate thresholds of the quantized stage-1 reward, Mbps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardThresholds {
    pub xi: [f64; 5],
}

impl Default for RewardThresholds {
    fn default() -> Self {
        Self { xi: [120.0, 150.0, 210.0, 270.0, 360.0] }
    }
}

impl RewardThresholds {
    pub fn validate(&self) -> Result<()> {
        let ok = self.xi.iter().all(|x| x.is_finite()) && self.xi.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::Config(format!("env.thresholds.xi must be strictly increasing (got {:?})", self.xi)));
        }
        Ok(())
    }
}

/// Where the cluster serves and how users move.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub shells: Vec<ShellSpec>,
    pub center_lat_deg: f64,
    pub center_lon_deg: f64,
    pub radius_km: f64,
    pub max_user_speed: f64,
    /// Orbital time at epoch 0, s.
    pub start_time_s: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            shells: starlink_like_shells(),
            center_lat_deg: 54.526,
            center_lon_deg: -3.3,
            radius_km: 50.0,
            max_user_speed: 3.0,
            start_time_s: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Cluster size L.
    pub l: usize,
    /// Number of users K.
    pub k: usize,
    /// CSI delay in steps; `None` derives it from the initial cluster geometry.
    pub td: Option<u64>,
    /// Pilot / decision interval, s.
    pub dt_s: f64,
    /// Environment steps per episode (rollout length).
    pub steps_per_episode: usize,
    pub thresholds: RewardThresholds,
    /// Stage-1 state carries every own final TPM since the delayed snapshot
    /// instead of only the most recent one.
    pub action_history: bool,
    /// Freeze satellites, users and small-scale fading (debugging aid).
    pub frozen: bool,
    /// Multiplier on raw policy outputs before decoding; unit-variance
    /// entries then carry `action_gain^2 * P` before projection.
    pub action_gain: f64,
    pub radio: RadioConfig,
    pub scenario: ScenarioConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            l: 4,
            k: 2,
            td: Some(3),
            dt_s: 1e-3,
            steps_per_episode: 512,
            thresholds: RewardThresholds::default(),
            action_history: false,
            frozen: false,
            action_gain: 1.0,
            radio: RadioConfig::default(),
            scenario: ScenarioConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l == 0 || self.k == 0 {
            return Err(Error::Config("env.l and env.k must be positive".into()));
        }
        if !(self.dt_s.is_finite() && self.dt_s > 0.0) {
            return Err(Error::Config(format!("env.dt_s must be positive (got {})", self.dt_s)));
        }
        if !(self.action_gain.is_finite() && self.action_gain > 0.0) {
            return Err(Error::Config(format!("env.action_gain must be positive (got {})", self.action_gain)));
        }
        if self.steps_per_episode == 0 {
            return Err(Error::Config("env.steps_per_episode must be positive".into()));
        }
        let s = &self.scenario;
        if !(s.radius_km > 0.0 && s.radius_km < 1000.0) || !(s.max_user_speed >= 0.0) {
            return Err(Error::Config("env.scenario radius_km must be in (0, 1000) and max_user_speed >= 0".into()));
        }
        if !(-90.0..=90.0).contains(&s.center_lat_deg) || !s.start_time_s.is_finite() {
            return Err(Error::Config("env.scenario center_lat_deg must be in [-90, 90]".into()));
        }
        if s.shells.is_empty() {
            return Err(Error::Config("env.scenario.shells must not be empty".into()));
        }
        for shell in &s.shells {
            shell.validate()?;
        }
        self.thresholds.validate()?;
        self.radio.validate()
    }

    pub fn m(&self) -> usize {
        self.radio.antennas()
    }

    pub fn budget(&self) -> f64 {
        self.radio.per_sat_power_w
    }

    /// Number of singular values one agent shares.
    pub fn rank(&self) -> usize {
        self.m().min(self.k)
    }

    pub fn lambda_len(&self) -> usize {
        (self.l - 1) * self.rank()
    }
}

/// Quantized sum-rate term f(c).
pub fn rate_level(c: f64, th: &RewardThresholds) -> f64 {
    let [x1, x2, x3, x4, x5] = th.xi;
    if c <= x1 {
        -2.0
    } else if c <= x2 {
        -1.0
    } else if c <= x3 {
        0.0
    } else if c <= x4 {
        1.0
    } else if c <= x5 {
        2.0
    } else {
        2.0 + c.ceil() - x5
    }
}

/// Trend term g(c, c_prev) with sign(0) = 0.
pub fn trend(c: f64, c_prev: f64) -> f64 {
    let s = if c > c_prev {
        1.0
    } else if c < c_prev {
        -1.0
    } else {
        0.0
    };
    s * 1.5 - 0.5
}

/// Power-deviation penalty p_l.
pub fn power_penalty(v: &CMatrix, budget: f64) -> f64 {
    0.3 * (trace_power(v) - budget).abs()
}

pub fn stage1_reward(c: f64, c_prev: f64, v: &CMatrix, th: &RewardThresholds, budget: f64) -> f64 {
    rate_level(c, th) + trend(c, c_prev) - power_penalty(v, budget)
}

pub fn stage2_reward(c: f64, c_prev: f64, v: &CMatrix, budget: f64) -> f64 {
    let bonus = if c_prev < c { 1.0 } else { -1.0 };
    c.max(RATE_FLOOR_MBPS).ln() - power_penalty(v, budget) + bonus
}

/// Appends `v` as interleaved (re, im) pairs in row-major order.
pub fn push_complex(out: &mut Vec<f64>, v: &CMatrix, scale: f64) {
    for i in 0..v.nrows() {
        for j in 0..v.ncols() {
            let z = v[(i, j)];
            out.push(z.re * scale);
            out.push(z.im * scale);
        }
    }
}

/// Raw policy output -> unprojected M x K TPM. Unit-variance actions map to
/// entries of power `budget / (M K)` per real component.
pub fn decode_action(raw: &[f64], m: usize, k: usize, budget: f64) -> Result<CMatrix> {
    if raw.len() != 2 * m * k {
        return Err(Error::Dimension(format!("action has {} reals, expected {}", raw.len(), 2 * m * k)));
    }
    let scale = (budget / (m * k) as f64).sqrt();
    Ok(CMatrix::from_fn(m, k, |i, j| {
        let at = 2 * (i * k + j);
        Complex64::new(raw[at], raw[at + 1]) * scale
    }))
}

/// Projected TPM for a raw action.
pub fn action_to_tpm(raw: &[f64], sat_id: usize, m: usize, k: usize, budget: f64) -> Result<Tpm> {
    let v = decode_action(raw, m, k, budget)?;
    Ok(Tpm { sat_id, v: project_power(&v, budget.sqrt()), budget })
}

/// Stage-1 observation of one agent: its delayed CSI and own past TPM(s).
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1State {
    pub h_delayed: CMatrix,
    /// Most recent first; one matrix unless action history is enabled.
    pub v_prev: Vec<CMatrix>,
    pub budget: f64,
}

impl Stage1State {
    /// H is scaled to unit mean entry power, TPMs by sqrt(MK / P_l).
    pub fn encode(&self) -> Vec<f64> {
        let mk = (self.h_delayed.nrows() * self.h_delayed.ncols()) as f64;
        let mut out = Vec::with_capacity(2 * self.h_delayed.len() * (1 + self.v_prev.len()));
        let norm = self.h_delayed.norm();
        let h_scale = if norm > 0.0 { mk.sqrt() / norm } else { 0.0 };
        // The common carrier phase of a user column carries no usable
        // information and changes every step; rotate each column so its first
        // entry is real and non-negative.
        let mut h = self.h_delayed.clone();
        for mut col in h.column_iter_mut() {
            let r = col[0].norm();
            if r > 0.0 {
                let rot = col[0].conj() / r;
                col.iter_mut().for_each(|x| *x *= rot);
            }
        }
        push_complex(&mut out, &h, h_scale);
        let v_scale = (mk / self.budget).sqrt();
        for v in &self.v_prev {
            push_complex(&mut out, v, v_scale);
        }
        out
    }
}

/// Stage-2 observation: own stage-1 TPM and the others' singular values.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2State {
    pub v_stage1: CMatrix,
    pub lambda: Vec<f64>,
    pub budget: f64,
}

impl Stage2State {
    pub fn encode(&self) -> Vec<f64> {
        let mk = self.v_stage1.len() as f64;
        let mut out = Vec::with_capacity(2 * self.v_stage1.len() + self.lambda.len());
        push_complex(&mut out, &self.v_stage1, (mk / self.budget).sqrt());
        let s = 1.0 / self.budget.sqrt();
        out.extend(self.lambda.iter().map(|x| x * s));
        out
    }
}

/// Shared singular values seen by agent `slot`: every other slot's block in
/// slot order, each block descending.
pub fn build_lambda(slot: usize, singular: &[Vec<f64>]) -> Vec<f64> {
    singular.iter().enumerate().filter(|(j, _)| *j != slot).flat_map(|(_, s)| s.iter().copied()).collect()
}

pub fn build_stage2_state(slot: usize, stage1: &[Tpm]) -> Result<Stage2State> {
    let own = stage1.get(slot).ok_or_else(|| Error::Dimension(format!("no stage-1 TPM for slot {slot}")))?;
    let singular = stage1.iter().map(|t| singular_values(&t.v)).collect::<Result<Vec<_>>>()?;
    Ok(Stage2State { v_stage1: own.v.clone(), lambda: build_lambda(slot, &singular), budget: own.budget })
}

/// Both stages' (projected) TPMs for every slot.
#[derive(Debug, Clone, PartialEq)]
pub struct JointAction {
    pub stage1: Vec<Tpm>,
    pub stage2: Vec<Tpm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub episode: usize,
    pub step: usize,
    pub epoch: u64,
    /// Satellite ids by slot at this epoch.
    pub members: Vec<usize>,
    pub stage1: Vec<Tpm>,
    pub stage2: Vec<Tpm>,
    pub r1: Vec<f64>,
    pub r2: Vec<f64>,
    /// Cluster sum-rate on the true current channel, Mbps.
    pub cluster_rate: f64,
    /// Per-slot solo sum-rate on delayed CSI, Mbps.
    pub individual_rates: Vec<f64>,
    /// The cluster changed membership going into this epoch.
    pub handover: bool,
}

/// Stream identifiers for the environment's independent random sources.
const USER_STREAM: u64 = 1;
const CHANNEL_STREAM: u64 = 2;

pub struct Environment {
    cfg: EnvConfig,
    constellation: Constellation,
    area: CoverageArea,
    users: Vec<UserState>,
    channel_seed: u64,
    epoch: u64,
    delay: u64,
    /// Satellite id per slot.
    slots: Vec<usize>,
    last_cluster: Cluster,
    buffer: DelayBuffer,
    current: Vec<ChannelObservation>,
    /// Final TPMs per slot, most recent epoch at the front.
    history: VecDeque<Vec<CMatrix>>,
    prev_individual: Option<Vec<f64>>,
    prev_cluster: Option<f64>,
    pending_handover: bool,
    handovers: Vec<(u64, HandoverEvent)>,
    episode: usize,
    step_in_episode: usize,
}

impl Environment {
    /// Positions the constellation, places users, selects the first cluster
    /// and warm-fills the delay buffer with epoch-0 CSI.
    pub fn reset(cfg: &EnvConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let s = &cfg.scenario;
        let area = CoverageArea::new(s.center_lat_deg, s.center_lon_deg, s.radius_km * 1e3, s.max_user_speed);
        let mut constellation = Constellation::new(build_constellation(&s.shells)?, area.center);
        let mut user_rng = ChaCha8Rng::seed_from_u64(seed);
        user_rng.set_stream(USER_STREAM);
        let users = area.spawn_users(cfg.k, &mut user_rng);
        let mut channel_rng = ChaCha8Rng::seed_from_u64(seed);
        channel_rng.set_stream(CHANNEL_STREAM);
        let channel_seed = rand::Rng::gen(&mut channel_rng);

        let cluster = constellation.select(s.start_time_s, cfg.l, 0)?;
        let delay = match cfg.td {
            Some(td) => td,
            None => {
                let delays: Vec<Vec<u64>> = cluster
                    .members
                    .iter()
                    .map(|&id| {
                        let sat = constellation.state_at(id, s.start_time_s);
                        users
                            .iter()
                            .map(|u| discretize_delay(propagation_delay((sat.position - u.position).norm()), cfg.dt_s))
                            .collect()
                    })
                    .collect();
                cluster_delay(&delays)?
            }
        };
        let mut env = Self {
            cfg: cfg.clone(),
            constellation,
            area,
            users,
            channel_seed,
            epoch: 0,
            delay,
            slots: cluster.members.clone(),
            last_cluster: cluster,
            buffer: DelayBuffer::new(delay as usize),
            current: Vec::new(),
            history: VecDeque::new(),
            prev_individual: None,
            prev_cluster: None,
            pending_handover: false,
            handovers: Vec::new(),
            episode: 0,
            step_in_episode: 0,
        };
        env.current = env.observe_slots()?;
        env.buffer.push(0, env.current.clone());
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn delay(&self) -> u64 {
        self.delay
    }

    pub fn time(&self) -> f64 {
        if self.cfg.frozen {
            self.cfg.scenario.start_time_s
        } else {
            self.cfg.scenario.start_time_s + self.epoch as f64 * self.cfg.dt_s
        }
    }

    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    pub fn cluster(&self) -> &Cluster {
        &self.last_cluster
    }

    pub fn users(&self) -> &[UserState] {
        &self.users
    }

    pub fn center(&self) -> Vector3<f64> {
        self.area.center
    }

    pub fn handovers(&self) -> &[(u64, HandoverEvent)] {
        &self.handovers
    }

    /// True CSI of every slot at the current epoch.
    pub fn current_csi(&self) -> &[ChannelObservation] {
        &self.current
    }

    /// CSI every slot sees at the current epoch (stamped `epoch - T_d`).
    pub fn delayed_csi(&self) -> Result<&[ChannelObservation]> {
        self.buffer.delayed(self.epoch, self.delay)
    }

    /// Starts a new episode: reward-trend memory is cleared, geometry kept.
    pub fn begin_episode(&mut self, episode: usize) {
        self.episode = episode;
        self.step_in_episode = 0;
        self.prev_individual = None;
        self.prev_cluster = None;
    }

    fn observe_slots(&self) -> Result<Vec<ChannelObservation>> {
        let t = self.time();
        let key = if self.cfg.frozen { 0 } else { self.epoch };
        self.slots
            .iter()
            .map(|&id| {
                let sat = self.constellation.state_at(id, t);
                let mut obs = observe(&sat, &self.users, &self.cfg.radio, key, self.channel_seed)?;
                obs.epoch = self.epoch;
                Ok(obs)
            })
            .collect()
    }

    /// Own final TPMs an agent knows about when acting at the current epoch.
    fn past_tpms(&self, slot: usize) -> Vec<CMatrix> {
        let (m, k) = (self.cfg.m(), self.cfg.k);
        let lag = self.delay.max(1) as usize;
        let pick = |age: usize| -> CMatrix {
            // history[0] holds the TPMs of epoch - 1
            self.history.get(age - 1).map(|set| set[slot].clone()).unwrap_or_else(|| CMatrix::zeros(m, k))
        };
        if self.cfg.action_history {
            (1..=lag).map(pick).collect()
        } else {
            vec![pick(lag)]
        }
    }

    pub fn stage1_states(&self) -> Result<Vec<Stage1State>> {
        let delayed = self.delayed_csi()?;
        Ok((0..self.cfg.l)
            .map(|slot| Stage1State {
                h_delayed: delayed[slot].h.clone(),
                v_prev: self.past_tpms(slot),
                budget: self.cfg.budget(),
            })
            .collect())
    }

    pub fn stage1_dim(&self) -> usize {
        let mk = self.cfg.m() * self.cfg.k;
        let tpms = if self.cfg.action_history { self.delay.max(1) as usize } else { 1 };
        2 * mk * (1 + tpms)
    }

    /// Solo sum-rate of `slot` with TPM `v` on its delayed CSI, Mbps.
    pub fn individual_rate(&self, slot: usize, v: &CMatrix) -> Result<f64> {
        let delayed = self.delayed_csi()?;
        sum_rate(&delayed[slot].h, v, self.cfg.radio.noise_power(), self.cfg.radio.bandwidth_hz)
    }

    /// Cluster sum-rate of the stacked TPMs on the true current channel, Mbps.
    pub fn cluster_rate(&self, tpms: &[Tpm]) -> Result<f64> {
        let h = crate::precoding::stack_rows(self.current.iter().map(|o| &o.h))?;
        let v = GlobalTpm::stack(tpms)?;
        sum_rate(&h, &v.v, self.cfg.radio.noise_power(), self.cfg.radio.bandwidth_hz)
    }

    fn check_action(&self, tpms: &[Tpm]) -> Result<()> {
        if tpms.len() != self.cfg.l {
            return Err(Error::Dimension(format!("{} TPMs for a cluster of {}", tpms.len(), self.cfg.l)));
        }
        let (m, k) = (self.cfg.m(), self.cfg.k);
        if let Some(bad) = tpms.iter().find(|t| t.v.nrows() != m || t.v.ncols() != k) {
            return Err(Error::Dimension(format!("TPM is {}x{}, expected {m}x{k}", bad.v.nrows(), bad.v.ncols())));
        }
        Ok(())
    }

    /// Applies one joint action: computes rates and rewards for the current
    /// epoch, then advances time, motion, CSI and the cluster.
    pub fn step(&mut self, action: JointAction) -> Result<(Vec<Stage1State>, StepRecord)> {
        self.check_action(&action.stage1)?;
        self.check_action(&action.stage2)?;
        let budget = self.cfg.budget();

        let individual = (0..self.cfg.l)
            .map(|slot| self.individual_rate(slot, &action.stage1[slot].v))
            .collect::<Result<Vec<_>>>()?;
        let prev_individual = self.prev_individual.clone().unwrap_or_else(|| individual.clone());
        let r1: Vec<f64> = individual
            .iter()
            .zip(&prev_individual)
            .zip(&action.stage1)
            .map(|((&c, &c_prev), t)| stage1_reward(c, c_prev, &t.v, &self.cfg.thresholds, budget))
            .collect();

        let cluster_rate = self.cluster_rate(&action.stage2)?;
        let prev_cluster = self.prev_cluster.unwrap_or(cluster_rate);
        let r2: Vec<f64> =
            action.stage2.iter().map(|t| stage2_reward(cluster_rate, prev_cluster, &t.v, budget)).collect();

        let record = StepRecord {
            episode: self.episode,
            step: self.step_in_episode,
            epoch: self.epoch,
            members: self.slots.clone(),
            stage1: action.stage1,
            stage2: action.stage2.clone(),
            r1,
            r2,
            cluster_rate,
            individual_rates: individual.clone(),
            handover: self.pending_handover,
        };
        self.prev_individual = Some(individual);
        self.prev_cluster = Some(cluster_rate);
        self.step_in_episode += 1;

        self.history.push_front(action.stage2.into_iter().map(|t| t.v).collect());
        self.history.truncate(self.delay.max(1) as usize);
        self.advance()?;
        Ok((self.stage1_states()?, record))
    }

    fn advance(&mut self) -> Result<()> {
        self.epoch += 1;
        if !self.cfg.frozen {
            let dt = self.cfg.dt_s;
            self.users = self.users.iter().map(|u| self.area.step_user(u, dt)).collect();
        }
        let cluster = self.constellation.select(self.time(), self.cfg.l, self.epoch)?;
        let events = crate::constellation::detect_handover(&self.last_cluster, &cluster);
        self.pending_handover = !events.is_empty();
        for ev in &events {
            if let Some(slot) = self.slots.iter().position(|&id| id == ev.left) {
                self.slots[slot] = ev.joined;
            }
            self.handovers.push((self.epoch, *ev));
        }
        self.last_cluster = cluster;
        self.current = self.observe_slots()?;
        self.buffer.push(self.epoch, self.current.clone());
        Ok(())
    }
}

/// Header of the per-step CSV log for a cluster of `l`.
pub fn step_log_header(l: usize) -> Vec<String> {
    let mut cols = vec!["episode".to_string(), "step".into(), "cluster_rate".into()];
    cols.extend((1..=l).map(|i| format!("c{i}")));
    cols.extend((1..=l).map(|i| format!("r1_{i}")));
    cols.extend((1..=l).map(|i| format!("r2_{i}")));
    cols.push("handover".into());
    cols
}

pub fn write_step_row<W: Write>(out: &mut csv::Writer<W>, rec: &StepRecord) -> Result<()> {
    let mut row = vec![rec.episode.to_string(), rec.step.to_string(), format!("{}", rec.cluster_rate)];
    row.extend(rec.individual_rates.iter().map(|x| format!("{x}")));
    row.extend(rec.r1.iter().map(|x| format!("{x}")));
    row.extend(rec.r2.iter().map(|x| format!("{x}")));
    row.push(u8::from(rec.handover).to_string());
    out.write_record(&row)?;
    Ok(())
}
