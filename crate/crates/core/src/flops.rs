//! Analytical floating-point operation counts for one DS-PPO training run.
//!
//! A dense layer costs `2 * d_in * d_out` per sample; biases, activations and
//! Gaussian sampling are not counted. A backward pass costs twice a forward
//! pass, so one training pass over a sample costs three forward passes.

use serde::Serialize;

use crate::error::{Error, Result};

/// Forward FLOPS of a dense MLP for a single sample.
pub fn mlp_flops(d_in: usize, hiddens: &[usize], d_out: usize) -> u64 {
    let mut dims = Vec::with_capacity(hiddens.len() + 2);
    dims.push(d_in as u64);
    dims.extend(hiddens.iter().map(|&h| h as u64));
    dims.push(d_out as u64);
    2 * dims.windows(2).map(|w| w[0] * w[1]).sum::<u64>()
}

/// SVD of a complex M x K matrix.
pub fn svd_flops(m: usize, k: usize) -> u64 {
    8 * m as u64 * (k as u64).pow(2)
}

/// Network shapes of both stages for a given (M, K, L).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArchSpec {
    pub m: usize,
    pub k: usize,
    pub l: usize,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
}

impl ArchSpec {
    pub fn new(m: usize, k: usize, l: usize) -> Result<Self> {
        Self::with_hidden(m, k, l, vec![64, 64, 64], vec![128, 64, 64])
    }

    pub fn with_hidden(
        m: usize,
        k: usize,
        l: usize,
        actor_hidden: Vec<usize>,
        critic_hidden: Vec<usize>,
    ) -> Result<Self> {
        if m == 0 || k == 0 || l == 0 {
            return Err(Error::Config(format!("FLOPS model needs positive M, K, L (got {m}, {k}, {l})")));
        }
        if actor_hidden.contains(&0) || critic_hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(Self { m, k, l, actor_hidden, critic_hidden })
    }

    /// Delayed CSI and the previous TPM, real and imaginary parts.
    pub fn stage1_in(&self) -> usize {
        4 * self.m * self.k
    }

    /// Own stage-1 TPM plus the other members' singular values.
    pub fn stage2_in(&self) -> usize {
        2 * self.m * self.k + (self.l - 1) * self.k
    }

    pub fn action_dim(&self) -> usize {
        2 * self.m * self.k
    }
}

/// Per-step and per-episode counts with their breakdown.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsReport {
    pub actor1: u64,
    pub critic1: u64,
    pub svd: u64,
    pub actor2: u64,
    pub critic2: u64,
    /// One satellite, one step, forward only.
    pub step: u64,
    /// Forward passes of every satellite over the episode.
    pub rollout: u64,
    pub training_stage1: u64,
    pub training_stage2: u64,
    pub episode: u64,
}

impl FlopsReport {
    pub fn training(&self) -> u64 {
        self.training_stage1 + self.training_stage2
    }

    pub fn training_share(&self) -> f64 {
        self.training() as f64 / self.episode as f64
    }

    /// Share of the episode spent in SVDs during rollout.
    pub fn svd_share(&self) -> f64 {
        self.svd_episode() as f64 / self.episode as f64
    }

    /// Share of the episode spent in network passes, rollout and training.
    pub fn neural_share(&self) -> f64 {
        1.0 - self.svd_share()
    }

    pub fn svd_episode(&self) -> u64 {
        self.rollout / self.step * self.svd
    }
}

/// Rollout plus `E1` / `E2` training epochs over `T` samples per satellite.
pub fn episode_flops(arch: &ArchSpec, t: usize, e1: usize, e2: usize) -> FlopsReport {
    let act = arch.action_dim();
    let actor1 = mlp_flops(arch.stage1_in(), &arch.actor_hidden, act);
    let critic1 = mlp_flops(arch.stage1_in(), &arch.critic_hidden, 1);
    let actor2 = mlp_flops(arch.stage2_in(), &arch.actor_hidden, act);
    let critic2 = mlp_flops(arch.stage2_in(), &arch.critic_hidden, 1);
    let svd = svd_flops(arch.m, arch.k);
    let step = actor1 + critic1 + svd + actor2 + critic2;
    let samples = t as u64 * arch.l as u64;
    let rollout = samples * step;
    let training_stage1 = 3 * samples * e1 as u64 * (actor1 + critic1);
    let training_stage2 = 3 * samples * e2 as u64 * (actor2 + critic2);
    FlopsReport {
        actor1,
        critic1,
        svd,
        actor2,
        critic2,
        step,
        rollout,
        training_stage1,
        training_stage2,
        episode: rollout + training_stage1 + training_stage2,
    }
}

pub fn total_flops(arch: &ArchSpec, t: usize, e1: usize, e2: usize, episodes: usize) -> u64 {
    episodes as u64 * episode_flops(arch, t, e1, e2).episode
}

/// Published per-episode GFLOPS for M = 9, T = 512, 389 episodes.
pub const PUBLISHED: [(usize, usize, f64, f64); 7] = [
    (4, 2, 1.7, 0.66),
    (4, 4, 2.9, 1.13),
    (4, 6, 4.3, 1.67),
    (6, 2, 2.6, 1.01),
    (6, 4, 4.5, 1.75),
    (6, 6, 6.7, 2.61),
    (20, 30, 368.0, 143.2),
];

pub const PUBLISHED_EPISODES: usize = 389;

/// One row of the reproduced table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub l: usize,
    pub k: usize,
    pub gflops_episode: f64,
    pub tflops_total: f64,
    pub published_gflops: f64,
    pub published_tflops: f64,
    pub training_share: f64,
    pub svd_share: f64,
}

impl TableRow {
    /// Reproduced over published per-episode cost.
    pub fn ratio(&self) -> f64 {
        self.gflops_episode / self.published_gflops
    }
}

pub fn reproduce_table(m: usize, t: usize, e1: usize, e2: usize, episodes: usize) -> Result<Vec<TableRow>> {
    PUBLISHED
        .iter()
        .map(|&(l, k, pg, pt)| {
            let arch = ArchSpec::new(m, k, l)?;
            let rep = episode_flops(&arch, t, e1, e2);
            Ok(TableRow {
                l,
                k,
                gflops_episode: rep.episode as f64 / 1e9,
                tflops_total: (rep.episode * episodes as u64) as f64 / 1e12,
                published_gflops: pg,
                published_tflops: pt,
                training_share: rep.training_share(),
                svd_share: rep.svd_share(),
            })
        })
        .collect()
}

pub fn render_table(rows: &[TableRow]) -> String {
    let mut out =
        String::from("   L    K   GFLOPS/ep  published   ratio   TFLOPS total  published  training%     SVD%\n");
    for r in rows {
        out.push_str(&format!(
            "{:>4} {:>4} {:>11.3} {:>10.1} {:>7.2} {:>14.3} {:>10.2} {:>10.3} {:>8.4}\n",
            r.l,
            r.k,
            r.gflops_episode,
            r.published_gflops,
            r.ratio(),
            r.tflops_total,
            r.published_tflops,
            100.0 * r.training_share,
            100.0 * r.svd_share
        ));
    }
    out
}

pub const TABLE_HEADER: [&str; 8] =
    ["L", "K", "gflops_episode", "tflops_total", "published_gflops", "published_tflops", "training_share", "svd_share"];

pub fn table_csv_rows(rows: &[TableRow]) -> Vec<[String; 8]> {
    rows.iter()
        .map(|r| {
            [
                r.l.to_string(),
                r.k.to_string(),
                format!("{}", r.gflops_episode),
                format!("{}", r.tflops_total),
                format!("{}", r.published_gflops),
                format!("{}", r.published_tflops),
                format!("{}", r.training_share),
                format!("{}", r.svd_share),
            ]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_and_svd_counts() {
        assert_eq!(mlp_flops(1, &[], 1), 2);
        assert_eq!(mlp_flops(72, &[64, 64, 64], 36), 30_208);
        assert_eq!(svd_flops(9, 2), 288);
        assert_eq!(svd_flops(9, 6), 2592);
        assert_eq!(svd_flops(7, 1), 56);
    }

    #[test]
    fn dims_follow_system_size() {
        let a = ArchSpec::new(9, 2, 4).unwrap();
        assert_eq!((a.stage1_in(), a.stage2_in(), a.action_dim()), (72, 42, 36));
        assert!(ArchSpec::new(9, 0, 4).is_err());
    }

    #[test]
    fn zero_epochs_is_rollout_only() {
        let a = ArchSpec::new(9, 2, 4).unwrap();
        let r = episode_flops(&a, 512, 0, 0);
        assert_eq!(r.episode, 512 * 4 * r.step);
        assert_eq!(r.training(), 0);
    }

    #[test]
    fn breakdown_sums_to_totals() {
        let a = ArchSpec::new(9, 4, 6).unwrap();
        let r = episode_flops(&a, 512, 30, 10);
        assert_eq!(r.step, r.actor1 + r.critic1 + r.svd + r.actor2 + r.critic2);
        assert_eq!(r.episode, r.rollout + r.training_stage1 + r.training_stage2);
        assert_eq!(total_flops(&a, 512, 30, 10, 1), r.episode);
        assert_eq!(total_flops(&a, 512, 30, 10, 389), 389 * r.episode);
    }
}
