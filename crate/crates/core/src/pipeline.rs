//! Stage functions behind the command-line tool. Each reads its inputs from
//! and writes its outputs to the configured output directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use serde::Serialize;

use crate::cmdp::{Signal, TabularCmdp, TabularPolicy};
use crate::config::{EnvKind, ExperimentConfig};
use crate::critics::{Batch, CriticConfig, CriticEnsemble};
use crate::dataset::{evaluate, rollout, Dataset, EpisodeStats};
use crate::diffusion::{train_denoiser, Denoiser, NoiseSchedule};
use crate::env::{Actor, PointMass, PointMassBehaviorActor, SimRng, TabularEnv};
use crate::error::{Error, Result};
use crate::policy::{GaussianPolicy, MeanActor};
use crate::safe_adapt::{
    tabular_theorem_harness, train, write_metrics, ExtractionMode, HarnessReport, Normalizer,
    TrainOutput,
};

/// File layout under the output directory.
#[derive(Debug, Clone)]
pub struct Paths {
    pub dir: PathBuf,
}

impl Paths {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
        }
    }

    fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn suffix(mode: ExtractionMode) -> &'static str {
        match mode {
            ExtractionMode::Drcorl => "",
            ExtractionMode::BehaviorCloning => "_bc",
        }
    }

    pub fn dataset(&self) -> PathBuf {
        self.file("dataset.csv")
    }

    pub fn denoiser(&self) -> PathBuf {
        self.file("denoiser.json")
    }

    pub fn diffusion_loss(&self) -> PathBuf {
        self.file("diffusion_loss.csv")
    }

    pub fn critics(&self) -> PathBuf {
        self.file("critics.json")
    }

    pub fn policy(&self, mode: ExtractionMode) -> PathBuf {
        self.file(&format!("policy{}.json", Self::suffix(mode)))
    }

    pub fn metrics(&self, mode: ExtractionMode) -> PathBuf {
        self.file(&format!("metrics{}.csv", Self::suffix(mode)))
    }

    pub fn metrics_plot(&self, mode: ExtractionMode) -> PathBuf {
        self.file(&format!("metrics{}.plot.json", Self::suffix(mode)))
    }

    pub fn regions(&self, mode: ExtractionMode) -> PathBuf {
        self.file(&format!("regions{}.csv", Self::suffix(mode)))
    }

    pub fn eval(&self, tag: &str) -> PathBuf {
        self.file(&format!("eval_{tag}.csv"))
    }

    pub fn theorem_csv(&self) -> PathBuf {
        self.file("theorem.csv")
    }

    pub fn theorem_table(&self) -> PathBuf {
        self.file("theorem.txt")
    }

    pub fn theorem_plot(&self) -> PathBuf {
        self.file("theorem.plot.json")
    }
}

fn paths(cfg: &ExperimentConfig) -> Result<Paths> {
    fs::create_dir_all(&cfg.out_dir)?;
    Ok(Paths::new(&cfg.out_dir))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}

fn point_mass(cfg: &ExperimentConfig, stage: &str) -> Result<PointMass> {
    match cfg.env.kind {
        EnvKind::PointMass => Ok(PointMass::new(cfg.env.point_mass)),
        EnvKind::Tabular => Err(Error::config(
            "env.kind",
            format!("`{stage}` needs the continuous point-mass environment"),
        )),
    }
}

fn tabular_cmdp(cfg: &ExperimentConfig) -> Result<TabularCmdp> {
    let path =
        cfg.env.tabular_file.as_ref().ok_or_else(|| {
            Error::config("env.tabular_file", "required when env.kind = \"tabular\"")
        })?;
    TabularCmdp::load(path)
}

/// `(1 - mix) * [(1 - eps) * reward-greedy + eps * uniform] + mix * cost-greedy`.
pub fn tabular_behavior(cmdp: &TabularCmdp, epsilon: f64, safe_mix: f64) -> Result<TabularPolicy> {
    let (s, a) = (cmdp.n_states(), cmdp.n_actions());
    let (_, greedy) = cmdp.optimal_policy(Signal::Reward, 1e-10);
    let frugal = cheapest_policy(cmdp);
    let explore = TabularPolicy::mixture(
        &[greedy, TabularPolicy::uniform(s, a)],
        &[1.0 - epsilon, epsilon],
    )?;
    TabularPolicy::mixture(&[explore, frugal], &[1.0 - safe_mix, safe_mix])
}

/// Deterministic policy minimising the discounted cost, by value iteration
/// on the negated cost.
pub fn cheapest_policy(cmdp: &TabularCmdp) -> TabularPolicy {
    let (s_n, a_n, g) = (cmdp.n_states(), cmdp.n_actions(), cmdp.gamma());
    let mut v = vec![0.0; s_n];
    let q = |v: &[f64], s: usize, a: usize| {
        cmdp.cost(s, a)
            + g * cmdp
                .transition_row(s, a)
                .iter()
                .zip(v)
                .map(|(p, x)| p * x)
                .sum::<f64>()
    };
    for _ in 0..100_000 {
        let next: Vec<f64> = (0..s_n)
            .map(|s| (0..a_n).map(|a| q(&v, s, a)).fold(f64::INFINITY, f64::min))
            .collect();
        let diff = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        if diff < 1e-12 {
            break;
        }
    }
    let actions: Vec<usize> = (0..s_n)
        .map(|s| {
            (0..a_n)
                .min_by(|&x, &y| q(&v, s, x).total_cmp(&q(&v, s, y)))
                .unwrap_or(0)
        })
        .collect();
    TabularPolicy::deterministic(a_n, &actions)
}

/// Rolls out the configured behaviour policy and writes the dataset.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let p = paths(cfg)?;
    let (episodes, horizon, seed) = (cfg.data.episodes, cfg.data.horizon, cfg.seed);
    let (data, _) = match cfg.env.kind {
        EnvKind::PointMass => {
            let mut env = PointMass::new(cfg.env.point_mass);
            let mut actor = PointMassBehaviorActor::new(cfg.env.behavior);
            rollout(&mut env, &mut actor, episodes, horizon, seed)?
        }
        EnvKind::Tabular => {
            let cmdp = tabular_cmdp(cfg)?;
            let mut pi =
                tabular_behavior(&cmdp, cfg.env.tabular_epsilon, cfg.env.tabular_safe_mix)?;
            rollout(&mut TabularEnv::new(cmdp), &mut pi, episodes, horizon, seed)?
        }
    };
    data.write_csv(&p.dataset())?;
    Ok(p.dataset())
}

fn load_dataset(p: &Paths) -> Result<Dataset> {
    require(&p.dataset())?;
    Dataset::read_csv(&p.dataset())
}

fn fit_denoiser(cfg: &ExperimentConfig, data: &Dataset) -> Result<(Denoiser, Vec<f64>)> {
    let d = &cfg.diffusion;
    let schedule = NoiseSchedule::new(d.schedule, d.steps)?;
    let mut rng = SimRng::seed_from_u64(cfg.seed.wrapping_add(11));
    let mut den = Denoiser::new(
        data.state_dim(),
        data.action_dim(),
        &d.hidden,
        schedule,
        &mut rng,
    )?;
    let (s, a) = (data.state_matrix(), data.action_matrix());
    let losses = train_denoiser(
        &mut den,
        s.view(),
        a.view(),
        &cfg.denoiser_training(),
        &|_| 1.0,
    )?;
    Ok((den, losses))
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

pub fn cmd_pretrain_diffusion(cfg: &ExperimentConfig) -> Result<PathBuf> {
    point_mass(cfg, "pretrain-diffusion")?;
    let p = paths(cfg)?;
    let data = load_dataset(&p)?;
    let (den, losses) = fit_denoiser(cfg, &data)?;
    den.save(&p.denoiser())?;
    let mut w = csv::Writer::from_path(p.diffusion_loss())?;
    for (step, loss) in losses.into_iter().enumerate() {
        w.serialize(LossRow { step, loss })?;
    }
    w.flush()?;
    Ok(p.denoiser())
}

/// Fits reward and cost critics to the behaviour policy. Behaviour actions at
/// states and next states are drawn once from the diffusion model.
pub fn pretrain_critics(
    data: &Dataset,
    denoiser: &Denoiser,
    critic_cfg: CriticConfig,
    steps: usize,
    batch_size: usize,
    bounds: Option<(f64, f64)>,
    seed: u64,
) -> Result<CriticEnsemble> {
    let mut rng = SimRng::seed_from_u64(seed);
    let batch = Batch::from_dataset(data)?;
    let mut critics = CriticEnsemble::new(critic_cfg, data.state_dim(), data.action_dim(), seed)?;
    let next = denoiser.sample(batch.next_states.view(), &mut rng, bounds)?;
    let here = denoiser.sample(batch.states.view(), &mut rng, bounds)?;
    for _ in 0..steps {
        let idx = batch.sample_indices(batch_size, &mut rng);
        let b = batch.select(&idx);
        critics.train_reward_step(&b)?;
        let (an, ah): (Array2<f64>, Array2<f64>) =
            (next.select(Axis(0), &idx), here.select(Axis(0), &idx));
        critics.train_cost_step(&b, an.view(), ah.view())?;
    }
    Ok(critics)
}

fn fit_critics(
    cfg: &ExperimentConfig,
    data: &Dataset,
    den: &Denoiser,
    env: &PointMass,
) -> Result<CriticEnsemble> {
    use crate::env::Environment;
    pretrain_critics(
        data,
        den,
        cfg.critic_config(),
        cfg.critics.pretrain_steps,
        cfg.critics.batch_size,
        env.action_bounds(),
        cfg.seed.wrapping_add(2),
    )
}

pub fn cmd_pretrain_critics(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let env = point_mass(cfg, "pretrain-critics")?;
    let p = paths(cfg)?;
    let data = load_dataset(&p)?;
    require(&p.denoiser())?;
    let den = Denoiser::load(&p.denoiser())?;
    fit_critics(cfg, &data, &den, &env)?.save(&p.critics())?;
    Ok(p.critics())
}

/// Final metrics of a training run.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub policy: PathBuf,
    pub metrics: PathBuf,
    pub normalized_return: f64,
    pub normalized_cost: f64,
    pub region_counts: [usize; 4],
}

const PLOT_SIDECAR: &str = r#"{
  "kind": "line",
  "data": "{data}",
  "x": "step",
  "series": [
    { "y": "normalized_return", "label": "normalized return" },
    { "y": "normalized_cost", "label": "normalized cost", "reference": 1.0 }
  ],
  "annotations": { "column": "region", "values": ["safe", "unsafe", "align", "conflict"] }
}
"#;

fn write_plot_sidecar(path: &Path, data: &Path) -> Result<()> {
    let name = data
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    fs::write(path, PLOT_SIDECAR.replace("{data}", &name))?;
    Ok(())
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let env = point_mass(cfg, "train")?;
    let p = paths(cfg)?;
    let data = load_dataset(&p)?;
    let mode = cfg.train.mode;
    let inline = cfg.train.pretrain_inline;

    let den = if p.denoiser().exists() {
        Denoiser::load(&p.denoiser())?
    } else if inline {
        let (den, _) = fit_denoiser(cfg, &data)?;
        den.save(&p.denoiser())?;
        den
    } else {
        return Err(Error::MissingFile(p.denoiser()));
    };
    let critics = match mode {
        ExtractionMode::BehaviorCloning => None,
        ExtractionMode::Drcorl if p.critics().exists() => Some(CriticEnsemble::load(&p.critics())?),
        ExtractionMode::Drcorl if inline => {
            let c = fit_critics(cfg, &data, &den, &env)?;
            c.save(&p.critics())?;
            Some(c)
        }
        ExtractionMode::Drcorl => return Err(Error::MissingFile(p.critics())),
    };

    let mut rng = SimRng::seed_from_u64(cfg.seed.wrapping_add(5));
    let policy = GaussianPolicy::new(
        data.state_dim(),
        data.action_dim(),
        &cfg.policy.hidden,
        cfg.policy.variance,
        &mut rng,
    )?;
    let TrainOutput {
        policy,
        region_log,
        metrics,
        ..
    } = train(&data, &env, &den, critics, policy, &cfg.train_config())?;
    policy.save(&p.policy(mode))?;
    write_metrics(&metrics, &p.metrics(mode))?;
    region_log.write_csv(&p.regions(mode))?;
    write_plot_sidecar(&p.metrics_plot(mode), &p.metrics(mode))?;
    let last = metrics.last().ok_or(Error::Empty("metric rows"))?;
    Ok(TrainSummary {
        policy: p.policy(mode),
        metrics: p.metrics(mode),
        normalized_return: last.normalized_return,
        normalized_cost: last.normalized_cost,
        region_counts: region_log.counts(),
    })
}

/// Which policy `eval` runs.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalTarget {
    /// The configured behaviour policy.
    Behavior,
    /// The trained policy of the given mode, from the output directory.
    Trained(ExtractionMode),
    /// A policy checkpoint at an explicit path.
    Checkpoint(PathBuf),
}

impl EvalTarget {
    fn tag(&self) -> String {
        match self {
            EvalTarget::Behavior => "behavior".into(),
            EvalTarget::Trained(ExtractionMode::Drcorl) => "policy".into(),
            EvalTarget::Trained(ExtractionMode::BehaviorCloning) => "policy_bc".into(),
            EvalTarget::Checkpoint(p) => p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "checkpoint".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub episode: usize,
    pub episodic_return: f64,
    pub episodic_cost: f64,
    pub normalized_return: f64,
    pub normalized_cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub normalized_return: f64,
    pub normalized_return_se: f64,
    pub normalized_cost: f64,
    pub normalized_cost_se: f64,
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

impl EvalReport {
    pub fn from_stats(stats: &[EpisodeStats], norm: &Normalizer) -> Result<Self> {
        let rows = stats
            .iter()
            .enumerate()
            .map(|(episode, s)| {
                let (r, c) = norm.summarize(std::slice::from_ref(s))?;
                Ok(EvalRow {
                    episode,
                    episodic_return: s.episodic_return,
                    episodic_cost: s.episodic_cost,
                    normalized_return: r,
                    normalized_cost: c,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Err(Error::Empty("evaluation episodes"));
        }
        let r: Vec<f64> = rows.iter().map(|x| x.normalized_return).collect();
        let c: Vec<f64> = rows.iter().map(|x| x.normalized_cost).collect();
        let (normalized_return, normalized_return_se) = mean_se(&r);
        let (normalized_cost, normalized_cost_se) = mean_se(&c);
        Ok(Self {
            rows,
            normalized_return,
            normalized_return_se,
            normalized_cost,
            normalized_cost_se,
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "episodes {}  normalized return {:.4} ± {:.4}  normalized cost {:.4} ± {:.4}",
            self.rows.len(),
            self.normalized_return,
            self.normalized_return_se,
            self.normalized_cost,
            self.normalized_cost_se
        )
    }
}

/// Evaluates a policy for `eval.episodes` episodes. Returns are normalised by
/// the dataset's episode return range, costs by `train.cost_limit`.
pub fn cmd_eval(cfg: &ExperimentConfig, target: &EvalTarget) -> Result<EvalReport> {
    let p = paths(cfg)?;
    let data = load_dataset(&p)?;
    let norm = Normalizer::from_dataset(&data, cfg.train.cost_limit, cfg.train.cost_eps)?;
    let (n, horizon) = (cfg.eval.episodes, cfg.data.horizon);
    let mut rng = SimRng::seed_from_u64(cfg.seed.wrapping_add(4));
    let stats = match cfg.env.kind {
        EnvKind::Tabular => {
            let cmdp = tabular_cmdp(cfg)?;
            let mut actor: Box<dyn Actor> = match target {
                EvalTarget::Behavior => Box::new(tabular_behavior(
                    &cmdp,
                    cfg.env.tabular_epsilon,
                    cfg.env.tabular_safe_mix,
                )?),
                _ => {
                    return Err(Error::config(
                        "env.kind",
                        "tabular environments only evaluate the behaviour policy",
                    ))
                }
            };
            evaluate(
                &mut TabularEnv::new(cmdp),
                actor.as_mut(),
                n,
                horizon,
                &mut rng,
            )
        }
        EnvKind::PointMass => {
            let mut env = PointMass::new(cfg.env.point_mass);
            let policy_path = match target {
                EvalTarget::Behavior => None,
                EvalTarget::Trained(mode) => Some(p.policy(*mode)),
                EvalTarget::Checkpoint(path) => Some(path.clone()),
            };
            match policy_path {
                None => {
                    let mut actor = PointMassBehaviorActor::new(cfg.env.behavior);
                    evaluate(&mut env, &mut actor, n, horizon, &mut rng)
                }
                Some(path) => {
                    require(&path)?;
                    let policy = GaussianPolicy::load(&path)?;
                    evaluate(&mut env, &mut MeanActor(&policy), n, horizon, &mut rng)
                }
            }
        }
    };
    let report = EvalReport::from_stats(&stats, &norm)?;
    let mut w = csv::Writer::from_path(p.eval(&target.tag()))?;
    for row in &report.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(report)
}

/// CMDP used by the theorem harness: the configured file, or a random one
/// with its limit placed between the cheapest and the reward-greedy costs.
pub fn theorem_cmdp(cfg: &ExperimentConfig) -> Result<TabularCmdp> {
    let t = &cfg.theorem;
    if let Some(path) = &t.cmdp_file {
        return TabularCmdp::load(path);
    }
    let mut rng = SimRng::seed_from_u64(cfg.seed);
    let cmdp = TabularCmdp::random(&mut rng, t.random_states, t.random_actions, t.random_gamma);
    if !t.constrained {
        return Ok(cmdp.with_cost_limit(f64::INFINITY));
    }
    let (_, greedy) = cmdp.optimal_policy(Signal::Reward, 1e-12);
    let hi = cmdp.value(&greedy, Signal::Cost)?;
    let lo = cmdp.value(&cheapest_policy(&cmdp), Signal::Cost)?;
    Ok(cmdp.with_cost_limit(0.5 * (lo + hi)))
}

pub fn cmd_theorem(cfg: &ExperimentConfig) -> Result<HarnessReport> {
    let p = paths(cfg)?;
    let cmdp = theorem_cmdp(cfg)?;
    let report = tabular_theorem_harness(&cmdp, &cfg.harness_config())?;
    report.write_csv(&p.theorem_csv())?;
    fs::write(p.theorem_table(), report.to_table())?;
    fs::write(
        p.theorem_plot(),
        r#"{
  "kind": "line",
  "data": "theorem.csv",
  "x": "iterations",
  "log_x": true,
  "series": [
    { "y": "gap_weighted", "label": "optimality gap (weighted policy)" },
    { "y": "violation_weighted", "label": "constraint violation (weighted policy)" }
  ]
}
"#,
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cheapest_policy_matches_exhaustive_search() {
        let mut rng = SimRng::seed_from_u64(4);
        let cmdp = TabularCmdp::random(&mut rng, 3, 2, 0.8);
        let best = cmdp.value(&cheapest_policy(&cmdp), Signal::Cost).unwrap();
        for code in 0..8usize {
            let actions: Vec<usize> = (0..3).map(|s| (code >> s) & 1).collect();
            let v = cmdp
                .value(&TabularPolicy::deterministic(2, &actions), Signal::Cost)
                .unwrap();
            assert!(best <= v + 1e-9);
        }
    }

    #[test]
    fn tabular_behavior_is_a_distribution_with_full_support() {
        let mut rng = SimRng::seed_from_u64(1);
        let cmdp = TabularCmdp::random(&mut rng, 4, 3, 0.9);
        let pi = tabular_behavior(&cmdp, 0.2, 0.5).unwrap();
        assert!(pi.probs().iter().all(|&p| p > 0.0));
    }

    #[test]
    fn stage_errors_name_missing_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            out_dir: dir.path().to_path_buf(),
            ..Default::default()
        };
        let err = cmd_pretrain_diffusion(&cfg).unwrap_err();
        assert!(err.to_string().contains("dataset.csv"), "{err}");
    }
}
