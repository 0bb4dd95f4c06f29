//! Policy extraction: critic-guided, diffusion-regularised updates of a
//! Gaussian policy with the region switch on the estimated episodic cost.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::critics::{Batch, CriticEnsemble};
use crate::dataset::{evaluate, normalized_cost, normalized_return, Dataset, EpisodeStats};
use crate::diffusion::Denoiser;
use crate::env::{Environment, SimRng};
use crate::error::{check_dim, Error, Result};
use crate::mlp::{stack_rows, Adam, AdamConfig};
use crate::policy::{GaussianPolicy, MeanActor};

use super::region::{safe_adaptation, RegionLog};
use super::schedule::{BetaSchedule, SlackBand};

/// `Drcorl` uses critics and the diffusion score; `BehaviorCloning` keeps only
/// the score term (critics treated as zero), the ablation baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMode {
    Drcorl,
    BehaviorCloning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub actor_adam: AdamConfig,
    /// Actor learning rate decays linearly to `actor_adam.lr * actor_final_lr_fraction`.
    pub actor_final_lr_fraction: f64,
    pub beta: BetaSchedule,
    pub slack: SlackBand,
    /// Episodic cost limit `l`.
    pub cost_limit: f64,
    /// Episode length used for the episodic cost estimate and evaluation.
    pub horizon: usize,
    /// Keep training critics during extraction.
    pub update_critics: bool,
    pub critic_lr: f64,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// `eps` in the normalised cost denominator `l + eps`.
    pub cost_eps: f64,
    pub mode: ExtractionMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 256,
            actor_adam: AdamConfig::default(),
            actor_final_lr_fraction: 1.0,
            beta: BetaSchedule::default(),
            slack: SlackBand::default(),
            cost_limit: 10.0,
            horizon: 200,
            update_critics: true,
            critic_lr: 3e-4,
            eval_interval: 250,
            eval_episodes: 20,
            cost_eps: 0.1,
            mode: ExtractionMode::Drcorl,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.actor_adam.lr > 0.0) {
            return Err(Error::config("actor_lr", "must be positive"));
        }
        if !(self.actor_final_lr_fraction > 0.0 && self.actor_final_lr_fraction <= 1.0) {
            return Err(Error::config(
                "actor_final_lr_fraction",
                "must lie in (0, 1]",
            ));
        }
        if !(self.critic_lr > 0.0) {
            return Err(Error::config("critic_lr", "must be positive"));
        }
        if self.cost_limit.is_nan() {
            return Err(Error::config("cost_limit", "must be a number"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("eval_interval", "must be at least 1"));
        }
        if self.eval_episodes == 0 {
            return Err(Error::config("eval_episodes", "must be at least 1"));
        }
        if !(self.cost_eps >= 0.0) {
            return Err(Error::config("cost_eps", "must be non-negative"));
        }
        self.beta.validate()?;
        self.slack.validate()
    }
}

/// Reward and cost ascent directions for one batch with frozen noise `z`:
/// `g_r = mean[(grad_a Q_r + score / beta) da/dtheta] + grad 1/2 log det / beta`,
/// `g_c` the same with `-grad_a Q_c^UCB`. The score is the denoiser's at its
/// first noise level, `-eps(a, 1 | s) / sqrt(beta_bar_1)`.
pub fn policy_gradients(
    policy: &GaussianPolicy,
    critics: Option<&CriticEnsemble>,
    denoiser: Option<&Denoiser>,
    states: ArrayView2<'_, f64>,
    z: ArrayView2<'_, f64>,
    beta: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if states.nrows() == 0 {
        return Err(Error::Empty("state batch"));
    }
    check_dim("noise rows", states.nrows(), z.nrows())?;
    let n = states.nrows() as f64;
    let actions = policy.actions_for(states, z)?;
    let mut up_r = Array2::zeros(actions.dim());
    let mut up_c = Array2::zeros(actions.dim());
    if let Some(c) = critics {
        up_r = c.reward_action_grad(states, actions.view())?;
        up_c = -c.ucb_action_grad(states, actions.view())?;
    }
    let mut ld = vec![0.0; policy.n_params()];
    if let Some(d) = denoiser {
        let score = d.score(actions.view(), 1, states)? / beta;
        up_r += &score;
        up_c += &score;
        ld = policy.logdet_grad(states)?;
    }
    let finish = |up: Array2<f64>| -> Result<Vec<f64>> {
        let g = policy.reparam_backward(states, z, up.view())?;
        Ok(g.iter().zip(&ld).map(|(g, l)| (g + l / beta) / n).collect())
    };
    Ok((finish(up_r)?, finish(up_c)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: usize,
    pub normalized_return: f64,
    pub normalized_cost: f64,
    pub region: &'static str,
    pub beta: f64,
    pub h_plus: f64,
    pub h_minus: f64,
}

pub fn write_metrics(rows: &[MetricRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Episode-level normalisation constants taken from the dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub r_min: f64,
    pub r_max: f64,
    pub c_min: f64,
    pub limit: f64,
    pub eps: f64,
}

impl Normalizer {
    pub fn from_dataset(d: &Dataset, limit: f64, eps: f64) -> Result<Self> {
        let (r_min, r_max) = d.return_range()?;
        Ok(Self {
            r_min,
            r_max,
            c_min: 0.0,
            limit,
            eps,
        })
    }

    /// Mean normalised `(return, cost)` over episodes.
    pub fn summarize(&self, stats: &[EpisodeStats]) -> Result<(f64, f64)> {
        if stats.is_empty() {
            return Err(Error::Empty("episode statistics"));
        }
        let n = stats.len() as f64;
        let mut r = 0.0;
        let mut c = 0.0;
        for s in stats {
            r += normalized_return(s.episodic_return, self.r_min, self.r_max)?;
            c += normalized_cost(s.episodic_cost, self.c_min, self.limit, self.eps)?;
        }
        Ok((r / n, c / n))
    }
}

/// Mean normalised return and cost of the policy mean over `episodes`
/// episodes, from a fixed evaluation seed.
pub fn evaluate_policy<E: Environment + Clone>(
    env: &E,
    policy: &GaussianPolicy,
    norm: &Normalizer,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut env = env.clone();
    let mut rng = SimRng::seed_from_u64(seed);
    let stats = evaluate(
        &mut env,
        &mut MeanActor(policy),
        episodes,
        horizon,
        &mut rng,
    );
    norm.summarize(&stats)
}

pub struct TrainOutput {
    pub policy: GaussianPolicy,
    pub critics: Option<CriticEnsemble>,
    pub region_log: RegionLog,
    pub metrics: Vec<MetricRow>,
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut SimRng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

fn clamp_actions(a: &mut Array2<f64>, bounds: Option<(f64, f64)>) {
    if let Some((lo, hi)) = bounds {
        a.mapv_inplace(|x| x.clamp(lo, hi));
    }
}

/// Runs the extraction loop. `critics` is required in `Drcorl` mode and
/// ignored otherwise.
pub fn train<E: Environment + Clone>(
    dataset: &Dataset,
    env: &E,
    denoiser: &Denoiser,
    critics: Option<CriticEnsemble>,
    mut policy: GaussianPolicy,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    check_dim(
        "policy state width",
        dataset.state_dim(),
        policy.state_dim(),
    )?;
    check_dim(
        "policy action width",
        dataset.action_dim(),
        policy.action_dim(),
    )?;
    let mut critics = match cfg.mode {
        ExtractionMode::Drcorl => {
            Some(critics.ok_or(Error::invalid("critics", "required for DRCORL extraction"))?)
        }
        ExtractionMode::BehaviorCloning => None,
    };
    if let Some(c) = critics.as_mut() {
        c.set_lr(cfg.critic_lr);
    }
    let norm = Normalizer::from_dataset(dataset, cfg.cost_limit, cfg.cost_eps)?;
    let data = Batch::from_dataset(dataset)?;
    let starts = stack_rows(&dataset.initial_states(), dataset.state_dim())?;
    let bounds = env.action_bounds();
    let d = policy.action_dim();
    let mut rng = SimRng::seed_from_u64(cfg.seed);
    let eval_seed = cfg.seed.wrapping_add(0x5eed);
    let mut opt = Adam::new(cfg.actor_adam, policy.n_params());
    let mut log = RegionLog::default();
    let mut metrics = Vec::new();

    for step in 0..cfg.steps {
        let beta = cfg.beta.at(step, cfg.steps);
        let (h_plus, h_minus) = cfg.slack.at(step, cfg.steps);
        let frac = step as f64 / cfg.steps as f64;
        opt.set_lr(cfg.actor_adam.lr * (1.0 - frac * (1.0 - cfg.actor_final_lr_fraction)));
        let b = data.sample(cfg.batch_size, &mut rng);

        if let (Some(c), true) = (critics.as_mut(), cfg.update_critics) {
            c.train_reward_step(&b)?;
            let (mut next, _) = policy.sample(b.next_states.view(), &mut rng)?;
            let (mut here, _) = policy.sample(b.states.view(), &mut rng)?;
            clamp_actions(&mut next, bounds);
            clamp_actions(&mut here, bounds);
            c.train_cost_step(&b, next.view(), here.view())?;
        }

        let (estimate, reward_value) = match critics.as_ref() {
            Some(c) => {
                let (mut a0, _) = policy.sample(starts.view(), &mut rng)?;
                clamp_actions(&mut a0, bounds);
                let (_, episodic) =
                    c.estimate_episodic_cost(starts.view(), a0.view(), cfg.horizon)?;
                let v = c.reward_value(starts.view())?.mean().unwrap_or(0.0);
                (episodic, v)
            }
            None => (0.0, 0.0),
        };

        let z = gaussian_matrix(b.len(), d, &mut rng);
        let (g_r, g_c) = policy_gradients(
            &policy,
            critics.as_ref(),
            Some(denoiser),
            b.states.view(),
            z.view(),
            beta,
        )?;
        let adapted = safe_adaptation(&g_r, &g_c, estimate, cfg.cost_limit, h_plus, h_minus)?;
        log.push(step, &adapted, estimate, reward_value);
        // ascent: Adam minimises, so feed the negated direction
        let descent: Vec<f64> = adapted.direction.iter().map(|g| -g).collect();
        opt.step(policy.net.params_mut(), &descent);

        if (step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.steps {
            let (r, c) = evaluate_policy(
                env,
                &policy,
                &norm,
                cfg.eval_episodes,
                cfg.horizon,
                eval_seed,
            )?;
            metrics.push(MetricRow {
                step: step + 1,
                normalized_return: r,
                normalized_cost: c,
                region: adapted.region.as_str(),
                beta,
                h_plus,
                h_minus,
            });
        }
    }
    Ok(TrainOutput {
        policy,
        critics,
        region_log: log,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critics::CriticConfig;
    use crate::dataset::rollout;
    use crate::diffusion::{NoiseSchedule, ScheduleKind};
    use crate::env::{PointMass, PointMassBehavior, PointMassBehaviorActor, PointMassConfig};
    use crate::grad_manip::combine;
    use crate::mlp::Mlp;
    use crate::policy::Variance;
    use crate::safe_adapt::Region;

    fn rng(seed: u64) -> SimRng {
        SimRng::seed_from_u64(seed)
    }

    fn policy(seed: u64) -> GaussianPolicy {
        GaussianPolicy::new(1, 1, &[8], Variance::Constant { std: 0.3 }, &mut rng(seed)).unwrap()
    }

    fn denoiser(net: Mlp) -> Denoiser {
        Denoiser::from_net(
            net,
            NoiseSchedule::new(ScheduleKind::Linear, 10).unwrap(),
            1,
            1,
        )
        .unwrap()
    }

    fn random_denoiser(seed: u64) -> Denoiser {
        let width = Denoiser::new(
            1,
            1,
            &[8],
            NoiseSchedule::new(ScheduleKind::Linear, 10).unwrap(),
            &mut rng(0),
        )
        .unwrap()
        .net
        .input_dim();
        denoiser(Mlp::new(&[width, 8, 1], &mut rng(seed)).unwrap())
    }

    fn critic_cfg() -> CriticConfig {
        CriticConfig {
            hidden: vec![6],
            ensemble_size: 3,
            ..Default::default()
        }
    }

    fn zero_critics() -> CriticEnsemble {
        let mut c = CriticEnsemble::new(critic_cfg(), 1, 1, 0).unwrap();
        let z = Mlp::zeros(&[2, 6, 1]).unwrap();
        c.set_reward_members(&[z.clone(), z.clone()]).unwrap();
        c.set_cost_members(&[z.clone(), z.clone(), z]).unwrap();
        c
    }

    /// Every cost member predicts `value` everywhere.
    fn constant_cost_critics(value: f64) -> CriticEnsemble {
        let mut c = zero_critics();
        let mut net = Mlp::zeros(&[2, 6, 1]).unwrap();
        *net.params_mut().last_mut().unwrap() = value;
        c.set_cost_members(&[net.clone(), net.clone(), net])
            .unwrap();
        c
    }

    fn batch(n: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
        let mut r = rng(seed);
        (gaussian_matrix(n, 1, &mut r), gaussian_matrix(n, 1, &mut r))
    }

    #[test]
    fn zero_critics_and_zero_score_give_zero_gradients() {
        let (s, z) = batch(16, 1);
        let den = denoiser(Mlp::zeros(&[random_denoiser(0).net.input_dim(), 8, 1]).unwrap());
        let (g_r, g_c) = policy_gradients(
            &policy(2),
            Some(&zero_critics()),
            Some(&den),
            s.view(),
            z.view(),
            0.5,
        )
        .unwrap();
        assert!(g_r.iter().chain(&g_c).all(|&g| g == 0.0));
    }

    #[test]
    fn score_only_gradients_coincide_and_combine_to_themselves() {
        let (s, z) = batch(16, 3);
        let den = random_denoiser(4);
        let (g_r, g_c) =
            policy_gradients(&policy(5), None, Some(&den), s.view(), z.view(), 0.3).unwrap();
        assert_eq!(g_r, g_c);
        assert!(g_r.iter().any(|&g| g != 0.0));
        assert_eq!(combine(&g_r, &g_c).unwrap().direction, g_r);
    }

    /// Central differences of `objective` with respect to every policy parameter.
    fn finite_difference(
        pi: &GaussianPolicy,
        objective: &dyn Fn(&GaussianPolicy) -> f64,
    ) -> Vec<f64> {
        let h = 1e-6;
        (0..pi.n_params())
            .map(|j| {
                let mut up = pi.clone();
                up.net.params_mut()[j] += h;
                let mut down = pi.clone();
                down.net.params_mut()[j] -= h;
                (objective(&up) - objective(&down)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64]) {
        let scale = b.iter().map(|x| x.abs()).fold(0.0, f64::max);
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-3 * scale, "{x} vs {y} (scale {scale})");
        }
    }

    #[test]
    fn weak_regularisation_reduces_to_critic_ascent() {
        let (s, z) = batch(32, 6);
        let mut c = CriticEnsemble::new(critic_cfg(), 1, 1, 7).unwrap();
        // identical members so the min is smooth
        let q = Mlp::new(&[2, 6, 1], &mut rng(8)).unwrap();
        c.set_reward_members(&[q.clone(), q]).unwrap();
        let costs: Vec<Mlp> = (0..3)
            .map(|i| Mlp::new(&[2, 6, 1], &mut rng(20 + i)).unwrap())
            .collect();
        c.set_cost_members(&costs).unwrap();
        let pi = policy(9);
        let den = random_denoiser(10);
        let (g_r, g_c) =
            policy_gradients(&pi, Some(&c), Some(&den), s.view(), z.view(), 1e12).unwrap();

        let reward = |p: &GaussianPolicy| {
            let a = p.actions_for(s.view(), z.view()).unwrap();
            c.reward_q(s.view(), a.view()).unwrap().mean().unwrap()
        };
        let cost = |p: &GaussianPolicy| {
            let a = p.actions_for(s.view(), z.view()).unwrap();
            -c.ucb_cost(s.view(), a.view()).unwrap().mean().unwrap()
        };
        assert_close(&g_r, &finite_difference(&pi, &reward));
        assert_close(&g_c, &finite_difference(&pi, &cost));
    }

    fn toy() -> (Dataset, PointMass) {
        let env = PointMass::new(PointMassConfig::default());
        let mut actor = PointMassBehaviorActor::new(PointMassBehavior::default());
        let (d, _) = rollout(&mut env.clone(), &mut actor, 6, 30, 11).unwrap();
        (d, env)
    }

    fn short_cfg(limit: f64, mode: ExtractionMode) -> TrainConfig {
        TrainConfig {
            steps: 12,
            batch_size: 16,
            cost_limit: limit,
            horizon: 30,
            eval_interval: 5,
            eval_episodes: 2,
            update_critics: false,
            mode,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn infinite_limit_stays_in_the_reward_branch() {
        let (d, env) = toy();
        let cfg = short_cfg(f64::INFINITY, ExtractionMode::Drcorl);
        let out = train(
            &d,
            &env,
            &random_denoiser(1),
            Some(constant_cost_critics(50.0)),
            policy(2),
            &cfg,
        )
        .unwrap();
        assert_eq!(out.region_log.counts(), [12, 0, 0, 0]);
    }

    #[test]
    fn zero_limit_and_band_with_positive_estimate_is_all_unsafe() {
        let (d, env) = toy();
        let mut cfg = short_cfg(0.0, ExtractionMode::Drcorl);
        cfg.slack = SlackBand::fixed(0.0, 0.0);
        let out = train(
            &d,
            &env,
            &random_denoiser(1),
            Some(constant_cost_critics(0.5)),
            policy(2),
            &cfg,
        )
        .unwrap();
        assert_eq!(out.region_log.counts(), [0, 12, 0, 0]);
        assert!(out
            .region_log
            .records
            .iter()
            .all(|r| r.region == Region::Unsafe && r.cost_estimate > 0.0));
    }

    #[test]
    fn behaviour_cloning_ignores_critics() {
        let (d, env) = toy();
        let cfg = short_cfg(10.0, ExtractionMode::BehaviorCloning);
        let out = train(&d, &env, &random_denoiser(1), None, policy(2), &cfg).unwrap();
        assert_eq!(out.region_log.counts(), [12, 0, 0, 0]);
        assert!(out.critics.is_none());
    }

    #[test]
    fn drcorl_requires_critics() {
        let (d, env) = toy();
        let cfg = short_cfg(10.0, ExtractionMode::Drcorl);
        assert!(train(&d, &env, &random_denoiser(1), None, policy(2), &cfg).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let (d, env) = toy();
        let mut cfg = short_cfg(10.0, ExtractionMode::Drcorl);
        cfg.update_critics = true;
        let critics = CriticEnsemble::new(critic_cfg(), 1, 1, 4).unwrap();
        let run = || {
            train(
                &d,
                &env,
                &random_denoiser(1),
                Some(critics.clone()),
                policy(2),
                &cfg,
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.policy.net.params(), b.policy.net.params());
        assert_eq!(a.region_log.records, b.region_log.records);
        assert_eq!(
            a.metrics.iter().map(|m| m.step).collect::<Vec<_>>(),
            vec![5, 10, 12]
        );
    }

    #[test]
    fn invalid_settings_name_their_key() {
        let bad = |f: &dyn Fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            f(&mut c);
            c.validate().unwrap_err().to_string()
        };
        assert!(bad(&|c| c.steps = 0).contains("steps"));
        assert!(bad(&|c| c.actor_final_lr_fraction = 0.0).contains("actor_final_lr_fraction"));
        assert!(bad(&|c| c.critic_lr = -1.0).contains("critic_lr"));
        assert!(bad(&|c| c.cost_eps = f64::NAN).contains("cost_eps"));
    }
}
