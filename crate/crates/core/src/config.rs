//! Experiment configuration: one TOML document with a versioned schema.
//! Unknown keys are rejected; every omitted key takes its documented default.

use serde::{Deserialize, Serialize};

use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::ppo::{PolicyInit, PpoHyperParams};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Dsppo,
    Ippo,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dsppo" => Ok(Mode::Dsppo),
            "ippo" => Ok(Mode::Ippo),
            other => Err(Error::Config(format!("unknown mode {other:?} (expected dsppo or ippo)"))),
        }
    }
}

/// How a stage-2 action becomes the final TPM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage2Action {
    /// The action is the TPM itself.
    Direct,
    /// The action is added to the stage-1 TPM before projection.
    Residual,
}

/// Partial PPO settings layered over a stage's defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoOverrides {
    pub gamma: Option<f64>,
    pub gae_lambda: Option<f64>,
    pub learning_rate: Option<f64>,
    pub minibatches: Option<usize>,
    pub clip_eps: Option<f64>,
    pub max_grad_norm: Option<f64>,
    pub vf_coef: Option<f64>,
    pub ent_coef: Option<f64>,
    pub epochs: Option<usize>,
    pub normalize_advantages: Option<bool>,
}

impl PpoOverrides {
    pub fn apply(&self, mut hp: PpoHyperParams) -> PpoHyperParams {
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { hp.$f = v; } )* };
        }
        take!(
            gamma,
            gae_lambda,
            learning_rate,
            minibatches,
            clip_eps,
            max_grad_norm,
            vf_coef,
            ent_coef,
            epochs,
            normalize_advantages
        );
        hp
    }

    fn resolved(hp: &PpoHyperParams) -> Self {
        Self {
            gamma: Some(hp.gamma),
            gae_lambda: Some(hp.gae_lambda),
            learning_rate: Some(hp.learning_rate),
            minibatches: Some(hp.minibatches),
            clip_eps: Some(hp.clip_eps),
            max_grad_norm: Some(hp.max_grad_norm),
            vf_coef: Some(hp.vf_coef),
            ent_coef: Some(hp.ent_coef),
            epochs: Some(hp.epochs),
            normalize_advantages: Some(hp.normalize_advantages),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub episodes: usize,
    pub seed: u64,
    /// Write a checkpoint every this many episodes (0 = only first and last).
    pub checkpoint_every: usize,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub stage2_action: Stage2Action,
    /// Scale of a residual stage-2 action relative to a direct one.
    pub residual_gain: f64,
    pub policy_init: PolicyInit,
    /// Per-step CSV log (large: one row per environment step).
    pub step_log: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Dsppo,
            episodes: 150,
            seed: 1,
            checkpoint_every: 25,
            actor_hidden: vec![64, 64, 64],
            critic_hidden: vec![128, 64, 64],
            stage2_action: Stage2Action::Direct,
            residual_gain: 1.0,
            policy_init: PolicyInit::default(),
            step_log: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub stage1: PpoOverrides,
    pub stage2: PpoOverrides,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            env: EnvConfig::default(),
            train: TrainConfig::default(),
            stage1: PpoOverrides::default(),
            stage2: PpoOverrides::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn stage1_hp(&self) -> PpoHyperParams {
        let mut hp = self.stage1.apply(PpoHyperParams::stage1());
        hp.rollout_len = self.env.steps_per_episode;
        hp
    }

    pub fn stage2_hp(&self) -> PpoHyperParams {
        let mut hp = self.stage2.apply(PpoHyperParams::stage2());
        hp.rollout_len = self.env.steps_per_episode;
        hp
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.env.validate()?;
        self.stage1_hp().validate("stage1")?;
        self.stage2_hp().validate("stage2")?;
        let t = &self.train;
        if t.actor_hidden.is_empty() || t.actor_hidden.contains(&0) || t.critic_hidden.contains(&0) {
            return Err(Error::Config("train.actor_hidden / critic_hidden need positive widths".into()));
        }
        Ok(())
    }

    /// Config with every stage default written out, for run snapshots.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        out.stage1 = PpoOverrides::resolved(&self.stage1_hp());
        out.stage2 = PpoOverrides::resolved(&self.stage2_hp());
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable as TOML")
    }
}
