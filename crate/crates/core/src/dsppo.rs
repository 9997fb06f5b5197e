//! Training driver: the per-step dual-stage pipeline across the cluster, the
//! independent-PPO baseline, fixed-policy baselines and run artifacts.
//!
//! Per step each agent maps its delayed observation to a stage-1 TPM, the
//! singular values of every projected stage-1 TPM are shared, and each agent
//! refines its own TPM from (own stage-1 TPM, others' singular values). After
//! `T` steps both stages of every agent run a PPO update.

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Mode, Stage2Action};
use crate::env::{
    action_to_tpm, build_lambda, decode_action, step_log_header, write_step_row, Environment, JointAction, Stage1State,
    Stage2State, StepRecord,
};
use crate::error::{Error, Result};
use crate::io::{write_atomic, write_csv_atomic, PendingFile};
use crate::ppo::{train_iteration, ActorCritic, Checkpoint, Learner, PpoHyperParams, RolloutBuffer, TrainStats};
use crate::precoding::{project_power, singular_values, trace_power, CMatrix, Tpm};

const ACTION_STREAM: u64 = 3;
const INIT_STREAM: u64 = 4;
const BASELINE_STREAM: u64 = 5;

/// Both learners of one cluster slot.
#[derive(Debug, Clone)]
pub struct AgentBundle {
    pub slot: usize,
    pub stage1: Learner,
    pub buf1: RolloutBuffer,
    /// Absent in IPPO mode.
    pub stage2: Option<Learner>,
    pub buf2: Option<RolloutBuffer>,
}

/// Per-episode summary row of `episodic_rate.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: usize,
    pub mean_rate: f64,
    pub std_rate: f64,
    pub handover_count: usize,
}

pub const EPISODE_HEADER: [&str; 4] = ["episode", "mean_rate", "std_rate", "handover_count"];

pub const STATS_HEADER: [&str; 10] = [
    "iter",
    "mean_reward",
    "policy_loss",
    "value_loss",
    "entropy",
    "approx_kl",
    "clip_fraction",
    "surrogate_before",
    "surrogate_after",
    "slot",
];

fn summarize(episode: usize, records: &[StepRecord]) -> EpisodeRow {
    let n = records.len().max(1) as f64;
    let mean = records.iter().map(|r| r.cluster_rate).sum::<f64>() / n;
    let var = records.iter().map(|r| (r.cluster_rate - mean).powi(2)).sum::<f64>() / n;
    EpisodeRow {
        episode,
        mean_rate: mean,
        std_rate: var.sqrt(),
        handover_count: records.iter().filter(|r| r.handover).count(),
    }
}

/// Mean of per-episode mean rates over the final `fraction` of episodes.
pub fn final_mean(rows: &[EpisodeRow], fraction: f64) -> f64 {
    if rows.is_empty() {
        return f64::NAN;
    }
    let n = ((rows.len() as f64 * fraction).ceil() as usize).clamp(1, rows.len());
    rows[rows.len() - n..].iter().map(|r| r.mean_rate).sum::<f64>() / n as f64
}

pub fn episode_rows_csv(rows: &[EpisodeRow]) -> Vec<[String; 4]> {
    rows.iter()
        .map(|r| {
            [r.episode.to_string(), format!("{}", r.mean_rate), format!("{}", r.std_rate), r.handover_count.to_string()]
        })
        .collect()
}

/// Drives the environment and the 2L (DS-PPO) or L (IPPO) learners.
pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub hp1: PpoHyperParams,
    pub hp2: PpoHyperParams,
    pub env: Environment,
    pub agents: Vec<AgentBundle>,
    rng: ChaCha8Rng,
    states: Vec<Stage1State>,
}

/// Output of one pass through the per-step pipeline.
struct Decision {
    enc1: Vec<Vec<f64>>,
    a1: Vec<Vec<f64>>,
    lp1: Vec<f64>,
    v1: Vec<f64>,
    enc2: Vec<Vec<f64>>,
    a2: Vec<Vec<f64>>,
    lp2: Vec<f64>,
    v2: Vec<f64>,
    action: JointAction,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.train.seed;
        let env = Environment::reset(&cfg.env, seed)?;
        let (m, k, l) = (cfg.env.m(), cfg.env.k, cfg.env.l);
        let act_dim = 2 * m * k;
        let obs1 = env.stage1_dim();
        let obs2 = act_dim + cfg.env.lambda_len();
        let hp1 = cfg.stage1_hp();
        let hp2 = cfg.stage2_hp();
        let t = &cfg.train;
        let mut init = stream_rng(seed, INIT_STREAM);
        let mut agents = Vec::with_capacity(l);
        for slot in 0..l {
            let net =
                ActorCritic::with_init(obs1, act_dim, &t.actor_hidden, &t.critic_hidden, t.policy_init, &mut init)?;
            let stage1 = Learner::new(net, hp1.learning_rate, init.gen());
            let (stage2, buf2) = match t.mode {
                Mode::Dsppo => {
                    let net = ActorCritic::with_init(
                        obs2,
                        act_dim,
                        &t.actor_hidden,
                        &t.critic_hidden,
                        t.policy_init,
                        &mut init,
                    )?;
                    (Some(Learner::new(net, hp2.learning_rate, init.gen())), Some(RolloutBuffer::new(obs2, act_dim)))
                }
                Mode::Ippo => (None, None),
            };
            agents.push(AgentBundle { slot, stage1, buf1: RolloutBuffer::new(obs1, act_dim), stage2, buf2 });
        }
        let states = env.stage1_states()?;
        Ok(Self { cfg: cfg.clone(), hp1, hp2, env, agents, rng: stream_rng(seed, ACTION_STREAM), states })
    }

    pub fn mode(&self) -> Mode {
        self.cfg.train.mode
    }

    pub fn stage2_input_dim(&self) -> usize {
        2 * self.cfg.env.m() * self.cfg.env.k + self.cfg.env.lambda_len()
    }

    fn act(learner: &Learner, state: &[f64], rng: &mut ChaCha8Rng, deterministic: bool) -> Result<(Vec<f64>, f64)> {
        let policy = &learner.net.policy;
        if deterministic {
            let mu = policy.mean_action(state)?;
            let lp = policy.log_prob(state, &mu)?;
            Ok((mu, lp))
        } else {
            policy.sample(state, rng)
        }
    }

    fn gained(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().map(|x| x * self.cfg.env.action_gain).collect()
    }

    fn to_tpm(&self, raw: &[f64], slot: usize) -> Result<Tpm> {
        let e = &self.cfg.env;
        action_to_tpm(&self.gained(raw), self.env.slots()[slot], e.m(), e.k, e.budget())
    }

    /// Final TPM from a stage-2 action.
    pub fn stage2_tpm(&self, raw: &[f64], stage1: &Tpm) -> Result<Tpm> {
        let e = &self.cfg.env;
        match self.cfg.train.stage2_action {
            Stage2Action::Direct => action_to_tpm(&self.gained(raw), stage1.sat_id, e.m(), e.k, e.budget()),
            Stage2Action::Residual => {
                let g = self.cfg.train.residual_gain;
                let scaled: Vec<f64> = self.gained(raw).iter().map(|x| x * g).collect();
                let delta = decode_action(&scaled, e.m(), e.k, e.budget())?;
                let v = project_power(&(&stage1.v + delta), e.budget().sqrt());
                Ok(Tpm { sat_id: stage1.sat_id, v, budget: e.budget() })
            }
        }
    }

    /// Stage-2 input of `slot` given every slot's stage-1 TPM.
    pub fn stage2_state(&self, slot: usize, stage1: &[Tpm], singular: &[Vec<f64>]) -> Stage2State {
        Stage2State {
            v_stage1: stage1[slot].v.clone(),
            lambda: build_lambda(slot, singular),
            budget: stage1[slot].budget,
        }
    }

    fn decide(&mut self, deterministic: bool) -> Result<Decision> {
        let l = self.cfg.env.l;
        let mut d = Decision {
            enc1: Vec::with_capacity(l),
            a1: Vec::with_capacity(l),
            lp1: Vec::with_capacity(l),
            v1: Vec::with_capacity(l),
            enc2: Vec::new(),
            a2: Vec::new(),
            lp2: Vec::new(),
            v2: Vec::new(),
            action: JointAction { stage1: Vec::with_capacity(l), stage2: Vec::with_capacity(l) },
        };
        for slot in 0..l {
            let enc = self.states[slot].encode();
            let learner = &self.agents[slot].stage1;
            let (a, lp) = Self::act(learner, &enc, &mut self.rng, deterministic)?;
            d.v1.push(learner.net.value(&enc)?);
            d.action.stage1.push(self.to_tpm(&a, slot)?);
            d.enc1.push(enc);
            d.a1.push(a);
            d.lp1.push(lp);
        }
        match self.mode() {
            Mode::Ippo => d.action.stage2 = d.action.stage1.clone(),
            Mode::Dsppo => {
                let singular = d.action.stage1.iter().map(|t| singular_values(&t.v)).collect::<Result<Vec<_>>>()?;
                for slot in 0..l {
                    let enc = self.stage2_state(slot, &d.action.stage1, &singular).encode();
                    let learner = self.agents[slot].stage2.as_ref().expect("stage-2 learner in dsppo mode");
                    let (a, lp) = Self::act(learner, &enc, &mut self.rng, deterministic)?;
                    d.v2.push(learner.net.value(&enc)?);
                    d.action.stage2.push(self.stage2_tpm(&a, &d.action.stage1[slot])?);
                    d.enc2.push(enc);
                    d.a2.push(a);
                    d.lp2.push(lp);
                }
            }
        }
        Ok(d)
    }

    /// One synchronized step of every agent; appends to the buffers when `learn`.
    pub fn step(&mut self, deterministic: bool, learn: bool) -> Result<StepRecord> {
        let d = self.decide(deterministic)?;
        let (next, rec) = self.env.step(d.action)?;
        if !rec.cluster_rate.is_finite() || rec.r1.iter().chain(&rec.r2).any(|r| !r.is_finite()) {
            return Err(Error::Divergence(format!("non-finite rate or reward at epoch {}", rec.epoch)));
        }
        if learn {
            let mode = self.mode();
            for (slot, agent) in self.agents.iter_mut().enumerate() {
                let r1 = match mode {
                    Mode::Dsppo => rec.r1[slot],
                    Mode::Ippo => rec.r2[slot],
                };
                agent.buf1.push(&d.enc1[slot], &d.a1[slot], d.lp1[slot], d.v1[slot], r1, false)?;
                if let Some(buf2) = agent.buf2.as_mut() {
                    buf2.push(&d.enc2[slot], &d.a2[slot], d.lp2[slot], d.v2[slot], rec.r2[slot], false)?;
                }
            }
        }
        self.states = next;
        Ok(rec)
    }

    /// Critic values of the states following the last stored step; the
    /// stage-2 bootstrap state uses mean stage-1 actions.
    fn bootstrap_values(&mut self) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut v1 = Vec::new();
        for (slot, agent) in self.agents.iter().enumerate() {
            v1.push(agent.stage1.net.value(&self.states[slot].encode())?);
        }
        if self.mode() == Mode::Ippo {
            return Ok((v1, Vec::new()));
        }
        let d = self.decide(true)?;
        Ok((v1, d.v2))
    }

    /// Finalizes the buffers and runs one PPO update per learner.
    pub fn train(&mut self) -> Result<Vec<(usize, u8, TrainStats)>> {
        let (boot1, boot2) = self.bootstrap_values()?;
        let mut out = Vec::new();
        let (hp1, hp2) = (self.hp1.clone(), self.hp2.clone());
        for (slot, agent) in self.agents.iter_mut().enumerate() {
            agent.buf1.finalize(boot1[slot], hp1.gamma, hp1.gae_lambda);
            let stats = train_iteration(&agent.buf1, &mut agent.stage1, &hp1)?;
            out.push((slot, 1, stats));
            agent.buf1.clear();
            if let (Some(learner), Some(buf2)) = (agent.stage2.as_mut(), agent.buf2.as_mut()) {
                buf2.finalize(boot2[slot], hp2.gamma, hp2.gae_lambda);
                let stats = train_iteration(buf2, learner, &hp2)?;
                out.push((slot, 2, stats));
                buf2.clear();
            }
        }
        Ok(out)
    }

    /// Rolls one episode of `T` steps.
    pub fn rollout(
        &mut self,
        episode: usize,
        deterministic: bool,
        learn: bool,
        mut log: Option<&mut csv::Writer<&mut dyn std::io::Write>>,
    ) -> Result<(EpisodeRow, Vec<StepRecord>)> {
        self.env.begin_episode(episode);
        let mut records = Vec::with_capacity(self.cfg.env.steps_per_episode);
        for _ in 0..self.cfg.env.steps_per_episode {
            let rec = self.step(deterministic, learn)?;
            if let Some(w) = log.as_deref_mut() {
                write_step_row(w, &rec)?;
            }
            records.push(rec);
        }
        Ok((summarize(episode, &records), records))
    }

    pub fn learner_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for a in &self.agents {
            names.push(format!("slot{}/stage1", a.slot));
            if a.stage2.is_some() {
                names.push(format!("slot{}/stage2", a.slot));
            }
        }
        names
    }

    pub fn checkpoint(&self, episode: u64) -> Checkpoint {
        let mut learners = Vec::new();
        for a in &self.agents {
            learners.push((format!("slot{}/stage1", a.slot), a.stage1.clone()));
            if let Some(s2) = &a.stage2 {
                learners.push((format!("slot{}/stage2", a.slot), s2.clone()));
            }
        }
        Checkpoint { episode, learners, rng: self.rng.clone() }
    }

    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let names = self.learner_names();
        let got: Vec<&String> = ck.learners.iter().map(|(n, _)| n).collect();
        if got.len() != names.len() || got.iter().zip(&names).any(|(a, b)| *a != b) {
            return Err(Error::Checkpoint(format!("checkpoint holds {got:?}, run expects {names:?}")));
        }
        let mut it = ck.learners.iter().map(|(_, l)| l.clone());
        for a in &mut self.agents {
            let s1 = it.next().unwrap();
            if s1.net.policy.mean.input_dim() != a.buf1.obs_dim || s1.net.policy.act_dim() != a.buf1.act_dim {
                return Err(Error::Checkpoint("stage-1 network shape does not match the config".into()));
            }
            a.stage1 = s1;
            if a.stage2.is_some() {
                let s2 = it.next().unwrap();
                if s2.net.policy.mean.input_dim() != self_stage2_dim(&self.cfg) {
                    return Err(Error::Checkpoint("stage-2 network shape does not match the config".into()));
                }
                a.stage2 = Some(s2);
            }
        }
        self.rng = ck.rng.clone();
        Ok(())
    }
}

fn self_stage2_dim(cfg: &ExperimentConfig) -> usize {
    2 * cfg.env.m() * cfg.env.k + cfg.env.lambda_len()
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub rows: Vec<EpisodeRow>,
    /// Mean sum-rate over the final 20% of episodes, Mbps.
    pub final_mean: f64,
}

fn checkpoint_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("checkpoints").join(name)
}

fn write_checkpoint(dir: &Path, name: &str, ck: &Checkpoint) -> Result<PathBuf> {
    let path = checkpoint_path(dir, name);
    write_atomic(&path, &ck.to_bytes())?;
    Ok(path)
}

fn write_stats(dir: &Path, names: &[String], stats: &[Vec<[String; 10]>]) -> Result<()> {
    for (name, rows) in names.iter().zip(stats) {
        let file = format!("stats_{}.csv", name.replace('/', "_"));
        write_csv_atomic(&dir.join(file), &STATS_HEADER, rows.iter())?;
    }
    Ok(())
}

fn stats_row(iter: usize, slot: usize, s: &TrainStats) -> [String; 10] {
    [
        iter.to_string(),
        format!("{}", s.mean_reward),
        format!("{}", s.policy_loss),
        format!("{}", s.value_loss),
        format!("{}", s.entropy),
        format!("{}", s.approx_kl),
        format!("{}", s.clip_fraction),
        format!("{}", s.surrogate_before),
        format!("{}", s.surrogate_after),
        slot.to_string(),
    ]
}

fn write_handovers(dir: &Path, env: &Environment) -> Result<()> {
    let rows =
        env.handovers().iter().map(|(epoch, ev)| [epoch.to_string(), ev.left.to_string(), ev.joined.to_string()]);
    write_csv_atomic(&dir.join("handovers.csv"), &["epoch", "left", "joined"], rows)
}

/// Trains for `cfg.train.episodes` episodes, writing artifacts under `dir`:
/// `config.toml`, `episodic_rate.csv`, `stats_*.csv`, `handovers.csv`,
/// optional `steps.csv` and `checkpoints/`.
///
/// On divergence the last healthy learners are saved as
/// `checkpoints/last_healthy.bin` and an [`Error::Divergence`] is returned.
pub fn run_training(cfg: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    write_atomic(&dir.join("config.toml"), cfg.resolved().to_toml().as_bytes())?;
    let mut trainer = Trainer::new(cfg)?;
    let names = trainer.learner_names();
    let mut healthy = trainer.checkpoint(0);
    write_checkpoint(dir, "ep_000000.bin", &healthy)?;

    let mut rows: Vec<EpisodeRow> = Vec::new();
    let mut stats: Vec<Vec<[String; 10]>> = vec![Vec::new(); names.len()];
    write_csv_atomic(&dir.join("episodic_rate.csv"), &EPISODE_HEADER, episode_rows_csv(&rows))?;
    write_stats(dir, &names, &stats)?;

    let mut step_log = if cfg.train.step_log {
        let header = step_log_header(cfg.env.l);
        let mut file = PendingFile::create(&dir.join("steps.csv"))?;
        csv::Writer::from_writer(file.writer() as &mut dyn std::io::Write).write_record(&header)?;
        Some(file)
    } else {
        None
    };

    for ep in 0..cfg.train.episodes {
        let outcome = (|| -> Result<(EpisodeRow, Vec<(usize, u8, TrainStats)>)> {
            let (row, _) = match step_log.as_mut() {
                Some(file) => {
                    let w: &mut dyn std::io::Write = file.writer();
                    let mut csv_w = csv::WriterBuilder::new().has_headers(false).from_writer(w);
                    let out = trainer.rollout(ep, false, true, Some(&mut csv_w))?;
                    csv_w.flush()?;
                    out
                }
                None => trainer.rollout(ep, false, true, None)?,
            };
            let st = trainer.train()?;
            Ok((row, st))
        })();
        let (row, st) = match outcome {
            Ok(v) => v,
            Err(e @ (Error::Numerical(_) | Error::Divergence(_))) => {
                let path = write_checkpoint(dir, "last_healthy.bin", &healthy)?;
                if let Some(file) = step_log.take() {
                    file.finish()?;
                }
                return Err(Error::Divergence(format!(
                    "episode {ep}: {e}; last healthy checkpoint written to {}",
                    path.display()
                )));
            }
            Err(e) => return Err(e),
        };
        tracing::info!(episode = ep, mean_rate = row.mean_rate, handovers = row.handover_count, "episode done");
        rows.push(row);
        for (i, (slot, _, s)) in st.iter().enumerate() {
            stats[i].push(stats_row(ep, *slot, s));
        }
        healthy = trainer.checkpoint(ep as u64 + 1);
        write_csv_atomic(&dir.join("episodic_rate.csv"), &EPISODE_HEADER, episode_rows_csv(&rows))?;
        write_stats(dir, &names, &stats)?;
        write_handovers(dir, &trainer.env)?;
        let every = cfg.train.checkpoint_every;
        if every > 0 && (ep + 1) % every == 0 {
            write_checkpoint(dir, &format!("ep_{:06}.bin", ep + 1), &healthy)?;
        }
    }
    write_checkpoint(dir, "final.bin", &healthy)?;
    if let Some(file) = step_log {
        file.finish()?;
    }
    Ok(RunSummary { dir: dir.to_path_buf(), final_mean: final_mean(&rows, 0.2), rows })
}

/// IPPO entry point: `run_training` with the mode forced to independent PPO.
pub fn run_ippo(cfg: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    let mut cfg = cfg.clone();
    cfg.train.mode = Mode::Ippo;
    run_training(&cfg, dir)
}

/// Rolls `episodes` deterministic episodes with the learners of `ck` on a
/// freshly reset environment; no learning.
pub fn evaluate(cfg: &ExperimentConfig, ck: &Checkpoint, episodes: usize) -> Result<Vec<EpisodeRow>> {
    let mut trainer = Trainer::new(cfg)?;
    trainer.restore(ck)?;
    (0..episodes).map(|ep| Ok(trainer.rollout(ep, true, false, None)?.0)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    /// i.i.d. Gaussian raw actions through the same decoding as the policies.
    Random,
    /// Each satellite transmits its delayed CSI, scaled to full power.
    MatchedFilter,
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Baseline::Random),
            "matched-filter" | "mf" => Ok(Baseline::MatchedFilter),
            other => Err(Error::Config(format!("unknown baseline {other:?} (expected random or matched-filter)"))),
        }
    }
}

fn matched_filter(h: &CMatrix, budget: f64) -> CMatrix {
    let p = trace_power(h);
    if p == 0.0 {
        return h.clone();
    }
    h * Complex64::new((budget / p).sqrt(), 0.0)
}

/// Runs a fixed policy on the configured scenario for `episodes` episodes.
pub fn run_baseline(cfg: &ExperimentConfig, kind: Baseline, episodes: usize) -> Result<Vec<EpisodeRow>> {
    cfg.validate()?;
    let e = &cfg.env;
    let mut env = Environment::reset(e, cfg.train.seed)?;
    let mut rng = stream_rng(cfg.train.seed, BASELINE_STREAM);
    let (m, k, p) = (e.m(), e.k, e.budget());
    let mut rows = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        env.begin_episode(ep);
        let mut records = Vec::with_capacity(e.steps_per_episode);
        for _ in 0..e.steps_per_episode {
            let slots = env.slots().to_vec();
            let tpms: Vec<Tpm> = match kind {
                Baseline::Random => slots
                    .iter()
                    .map(|&sat| {
                        let raw: Vec<f64> = (0..2 * m * k).map(|_| rng.sample(StandardNormal)).collect();
                        action_to_tpm(&raw, sat, m, k, p)
                    })
                    .collect::<Result<_>>()?,
                Baseline::MatchedFilter => env
                    .delayed_csi()?
                    .iter()
                    .zip(&slots)
                    .map(|(obs, &sat)| Tpm { sat_id: sat, v: matched_filter(&obs.h, p), budget: p })
                    .collect(),
            };
            let (_, rec) = env.step(JointAction { stage1: tpms.clone(), stage2: tpms })?;
            records.push(rec);
        }
        rows.push(summarize(ep, &records));
    }
    Ok(rows)
}
