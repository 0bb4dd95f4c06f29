//! Experiment configuration: a sectioned TOML file whose defaults describe
//! the point-mass toy run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::critics::CriticConfig;
use crate::diffusion::{DenoiserTraining, ScheduleKind};
use crate::env::{PointMassBehavior, PointMassConfig};
use crate::error::{Error, Result};
use crate::mlp::AdamConfig;
use crate::policy::Variance;
use crate::safe_adapt::{
    BetaSchedule, ExtractionMode, HarnessConfig, SlackBand, SlackMode, TrainConfig,
};

pub const SEED_ENV: &str = "DRCORL_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    PointMass,
    Tabular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub kind: EnvKind,
    /// CMDP text file, required when `kind = "tabular"`.
    pub tabular_file: Option<PathBuf>,
    /// Tabular behaviour: epsilon-greedy around the reward-optimal policy,
    /// mixed with the cost-minimising policy with weight `safe_mix`.
    pub tabular_epsilon: f64,
    pub tabular_safe_mix: f64,
    pub point_mass: PointMassConfig,
    pub behavior: PointMassBehavior,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            kind: EnvKind::PointMass,
            tabular_file: None,
            tabular_epsilon: 0.2,
            tabular_safe_mix: 0.5,
            point_mass: PointMassConfig::default(),
            behavior: PointMassBehavior::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub episodes: usize,
    pub horizon: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            episodes: 100,
            horizon: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    pub schedule: ScheduleKind,
    pub steps: usize,
    pub hidden: Vec<usize>,
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub final_lr_fraction: f64,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            schedule: ScheduleKind::Linear,
            steps: 20,
            hidden: vec![64, 64],
            train_steps: 6000,
            batch_size: 256,
            lr: 1e-3,
            final_lr_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticsSection {
    pub ensemble_size: usize,
    pub ucb_k: f64,
    pub pessimism: f64,
    pub expectile_tau: f64,
    pub soft_update_tau: f64,
    pub gamma: f64,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub pretrain_steps: usize,
    pub batch_size: usize,
}

impl Default for CriticsSection {
    fn default() -> Self {
        Self {
            ensemble_size: 4,
            ucb_k: 2.0,
            pessimism: 0.05,
            expectile_tau: 0.7,
            soft_update_tau: 0.1,
            gamma: 0.95,
            hidden: vec![32, 32],
            lr: 1e-3,
            pretrain_steps: 3000,
            batch_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub hidden: Vec<usize>,
    pub variance: Variance,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            variance: Variance::Constant { std: 0.1 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub actor_final_lr_fraction: f64,
    pub beta: BetaSchedule,
    pub h_plus: f64,
    pub h_minus: f64,
    pub slack_decay: bool,
    /// Episodic cost limit.
    pub cost_limit: f64,
    pub update_critics: bool,
    pub critic_lr: f64,
    pub eval_interval: usize,
    pub cost_eps: f64,
    pub mode: ExtractionMode,
    /// Pretrain missing diffusion/critic checkpoints inside `train`.
    pub pretrain_inline: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 256,
            actor_lr: 6e-4,
            actor_final_lr_fraction: 0.1,
            beta: BetaSchedule::default(),
            h_plus: 0.2,
            h_minus: 0.2,
            slack_decay: true,
            cost_limit: 10.0,
            update_critics: true,
            critic_lr: 1e-3,
            eval_interval: 250,
            cost_eps: 0.1,
            mode: ExtractionMode::Drcorl,
            pretrain_inline: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { episodes: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoremSection {
    /// CMDP text file; when absent a random CMDP is generated.
    pub cmdp_file: Option<PathBuf>,
    pub random_states: usize,
    pub random_actions: usize,
    pub random_gamma: f64,
    /// Place the limit of a generated CMDP halfway between the costs of the
    /// reward-greedy and cost-greedy policies; otherwise leave it unbounded.
    pub constrained: bool,
    pub iterations: Vec<usize>,
    pub eta0: f64,
    pub h_plus: f64,
    pub h_minus: f64,
    pub auto_slack: bool,
}

impl Default for TheoremSection {
    fn default() -> Self {
        Self {
            cmdp_file: None,
            random_states: 4,
            random_actions: 2,
            random_gamma: 0.9,
            constrained: true,
            iterations: vec![50, 200, 800],
            eta0: 1.0,
            h_plus: 0.05,
            h_minus: 0.05,
            auto_slack: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub env: EnvSection,
    pub data: DataSection,
    pub diffusion: DiffusionSection,
    pub critics: CriticsSection,
    pub policy: PolicySection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub theorem: TheoremSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            env: EnvSection::default(),
            data: DataSection::default(),
            diffusion: DiffusionSection::default(),
            critics: CriticsSection::default(),
            policy: PolicySection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            theorem: TheoremSection::default(),
        }
    }
}

fn prefixed(section: &str, e: Error) -> Error {
    match e {
        Error::Config { key, reason } => Error::config(format!("{section}.{key}"), reason),
        other => other,
    }
}

fn positive(key: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(Error::config(key, "must be at least 1"))
    } else {
        Ok(())
    }
}

fn positive_f(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(key, "must be a positive number"))
    }
}

fn hidden(key: &str, h: &[usize]) -> Result<()> {
    if h.contains(&0) {
        Err(Error::config(key, "layer widths must be positive"))
    } else {
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            context: "config".into(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; relative paths inside it resolve
    /// against the working directory.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// Canonical serialisation; parsing it yields an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Applies `DRCORL_SEED` if it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| {
                Error::config(SEED_ENV, format!("`{v}` is not an unsigned integer"))
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.env;
        if e.kind == EnvKind::Tabular {
            match &e.tabular_file {
                None => {
                    return Err(Error::config(
                        "env.tabular_file",
                        "required when env.kind = \"tabular\"",
                    ))
                }
                Some(p) if !p.exists() => {
                    return Err(Error::config(
                        "env.tabular_file",
                        format!("{} does not exist", p.display()),
                    ))
                }
                _ => {}
            }
        }
        if !(0.0..=1.0).contains(&e.tabular_epsilon) {
            return Err(Error::config("env.tabular_epsilon", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&e.tabular_safe_mix) {
            return Err(Error::config("env.tabular_safe_mix", "must lie in [0, 1]"));
        }
        let b = &e.behavior;
        if !(0.0..=1.0).contains(&b.safe_ratio) {
            return Err(Error::config(
                "env.behavior.safe_ratio",
                "must lie in [0, 1]",
            ));
        }
        if !(0.0..=1.0).contains(&b.epsilon) {
            return Err(Error::config("env.behavior.epsilon", "must lie in [0, 1]"));
        }
        if !(b.noise_std >= 0.0) {
            return Err(Error::config(
                "env.behavior.noise_std",
                "must be non-negative",
            ));
        }
        let pm = &e.point_mass;
        positive_f("env.point_mass.dt", pm.dt)?;
        positive_f("env.point_mass.bound", pm.bound)?;
        if !(pm.noise_std >= 0.0) {
            return Err(Error::config(
                "env.point_mass.noise_std",
                "must be non-negative",
            ));
        }
        if !(pm.init_half_width >= 0.0 && pm.init_half_width <= pm.bound) {
            return Err(Error::config(
                "env.point_mass.init_half_width",
                "must lie in [0, bound]",
            ));
        }

        positive("data.episodes", self.data.episodes)?;
        positive("data.horizon", self.data.horizon)?;

        let d = &self.diffusion;
        positive("diffusion.steps", d.steps)?;
        positive("diffusion.train_steps", d.train_steps)?;
        positive("diffusion.batch_size", d.batch_size)?;
        positive_f("diffusion.lr", d.lr)?;
        hidden("diffusion.hidden", &d.hidden)?;
        if !(d.final_lr_fraction > 0.0 && d.final_lr_fraction <= 1.0) {
            return Err(Error::config(
                "diffusion.final_lr_fraction",
                "must lie in (0, 1]",
            ));
        }

        self.critic_config()
            .validate()
            .map_err(|e| prefixed("critics", e))?;
        positive("critics.pretrain_steps", self.critics.pretrain_steps)?;
        positive("critics.batch_size", self.critics.batch_size)?;
        positive_f("critics.lr", self.critics.lr)?;
        hidden("critics.hidden", &self.critics.hidden)?;

        hidden("policy.hidden", &self.policy.hidden)?;
        if let Variance::Constant { std } = self.policy.variance {
            positive_f("policy.variance.std", std)?;
        }

        positive("eval.episodes", self.eval.episodes)?;
        self.train_config()
            .validate()
            .map_err(|e| prefixed("train", e))?;

        let t = &self.theorem;
        if let Some(p) = &t.cmdp_file {
            if !p.exists() {
                return Err(Error::config(
                    "theorem.cmdp_file",
                    format!("{} does not exist", p.display()),
                ));
            }
        }
        positive("theorem.random_states", t.random_states)?;
        positive("theorem.random_actions", t.random_actions)?;
        if !(t.random_gamma >= 0.0 && t.random_gamma < 1.0) {
            return Err(Error::config("theorem.random_gamma", "must lie in [0, 1)"));
        }
        if t.iterations.is_empty() || t.iterations.contains(&0) {
            return Err(Error::config(
                "theorem.iterations",
                "must be a non-empty list of positive counts",
            ));
        }
        positive_f("theorem.eta0", t.eta0)?;
        if !(t.h_plus >= 0.0) {
            return Err(Error::config("theorem.h_plus", "must be non-negative"));
        }
        if !(t.h_minus >= 0.0) {
            return Err(Error::config("theorem.h_minus", "must be non-negative"));
        }
        Ok(())
    }

    pub fn critic_config(&self) -> CriticConfig {
        let c = &self.critics;
        CriticConfig {
            ensemble_size: c.ensemble_size,
            ucb_k: c.ucb_k,
            pessimism: c.pessimism,
            expectile_tau: c.expectile_tau,
            soft_update_tau: c.soft_update_tau,
            gamma: c.gamma,
            hidden: c.hidden.clone(),
            adam: AdamConfig::with_lr(c.lr),
        }
    }

    pub fn denoiser_training(&self) -> DenoiserTraining {
        let d = &self.diffusion;
        DenoiserTraining {
            steps: d.train_steps,
            batch_size: d.batch_size,
            adam: AdamConfig::with_lr(d.lr),
            final_lr_fraction: d.final_lr_fraction,
            seed: self.seed.wrapping_add(1),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            actor_adam: AdamConfig::with_lr(t.actor_lr),
            actor_final_lr_fraction: t.actor_final_lr_fraction,
            beta: t.beta,
            slack: SlackBand {
                h_plus: t.h_plus,
                h_minus: t.h_minus,
                decay: t.slack_decay,
            },
            cost_limit: t.cost_limit,
            horizon: self.data.horizon,
            update_critics: t.update_critics,
            critic_lr: t.critic_lr,
            eval_interval: t.eval_interval,
            eval_episodes: self.eval.episodes,
            cost_eps: t.cost_eps,
            mode: t.mode,
            seed: self.seed.wrapping_add(3),
        }
    }

    pub fn harness_config(&self) -> HarnessConfig {
        let t = &self.theorem;
        HarnessConfig {
            iterations: t.iterations.clone(),
            eta0: t.eta0,
            slack: if t.auto_slack {
                SlackMode::Auto
            } else {
                SlackMode::Fixed {
                    h_plus: t.h_plus,
                    h_minus: t.h_minus,
                }
            },
        }
    }
}
