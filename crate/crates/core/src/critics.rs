//! Reward critics trained by expectile regression, pessimistic cost critics,
//! and the upper-confidence cost estimate built from the cost ensemble.
//!
//! Every critic network takes `[s | a]` and returns a scalar. Episode ends in
//! the datasets are time-limit truncations, so targets always bootstrap.

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::mlp::{self, concat_cols, soft_update, Adam, AdamConfig, Mlp};

/// `|tau - 1[u < 0]| u^2`
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    let w = if u < 0.0 { 1.0 - tau } else { tau };
    w * u * u
}

/// `mean + k * std` with the population standard deviation.
pub fn ucb(values: &[f64], k: f64) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    mean + k * var.sqrt()
}

/// `Q * (1 - gamma) * L`: a discounted per-start value rescaled to an
/// undiscounted episode total over horizon `L`.
pub fn episodic_from_value(q: f64, gamma: f64, horizon: usize) -> f64 {
    q * (1.0 - gamma) * horizon as f64
}

pub fn one_hot(index: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[index] = 1.0;
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub ensemble_size: usize,
    pub ucb_k: f64,
    pub pessimism: f64,
    pub expectile_tau: f64,
    pub soft_update_tau: f64,
    pub gamma: f64,
    pub hidden: Vec<usize>,
    pub adam: AdamConfig,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 4,
            ucb_k: 2.0,
            pessimism: 0.2,
            expectile_tau: 0.7,
            soft_update_tau: 0.005,
            gamma: 0.99,
            hidden: vec![64, 64],
            adam: AdamConfig::default(),
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, r: &str| Err(Error::config(k, r));
        if self.ensemble_size < 2 {
            return bad("ensemble_size", "need at least 2 cost critics");
        }
        if !(self.ucb_k >= 0.0) {
            return bad("ucb_k", "must be non-negative");
        }
        if !(self.pessimism >= 0.0) {
            return bad("pessimism", "must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.expectile_tau) {
            return bad("expectile_tau", "must lie in [0, 1]");
        }
        if !(self.soft_update_tau > 0.0 && self.soft_update_tau < 1.0) {
            return bad("soft_update_tau", "must lie in (0, 1)");
        }
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return bad("gamma", "must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Column views of a dataset, for mini-batch sampling.
#[derive(Debug, Clone)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub costs: Array1<f64>,
    pub next_states: Array2<f64>,
}

impl Batch {
    pub fn from_dataset(d: &Dataset) -> Result<Self> {
        if d.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        Ok(Self {
            states: d.state_matrix(),
            actions: d.action_matrix(),
            rewards: d.transitions().iter().map(|t| t.reward).collect(),
            costs: d.transitions().iter().map(|t| t.cost).collect(),
            next_states: d.next_state_matrix(),
        })
    }

    /// Index-encoded tabular transitions re-encoded as one-hot states and actions.
    pub fn one_hot(d: &Dataset, n_states: usize, n_actions: usize) -> Result<Self> {
        if d.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let rows =
            |f: &dyn Fn(&crate::dataset::Transition) -> usize, n: usize| -> Result<Array2<f64>> {
                let mut m = Array2::zeros((d.len(), n));
                for (i, t) in d.transitions().iter().enumerate() {
                    let k = f(t);
                    if k >= n {
                        return Err(Error::invalid("tabular index", format!("{k} >= {n}")));
                    }
                    m[[i, k]] = 1.0;
                }
                Ok(m)
            };
        Ok(Self {
            states: rows(&|t| t.state[0] as usize, n_states)?,
            actions: rows(&|t| t.action[0] as usize, n_actions)?,
            rewards: d.transitions().iter().map(|t| t.reward).collect(),
            costs: d.transitions().iter().map(|t| t.cost).collect(),
            next_states: rows(&|t| t.next_state[0] as usize, n_states)?,
        })
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            states: self.states.select(Axis(0), idx),
            actions: self.actions.select(Axis(0), idx),
            rewards: self.rewards.select(Axis(0), idx),
            costs: self.costs.select(Axis(0), idx),
            next_states: self.next_states.select(Axis(0), idx),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Batch {
        self.select(&self.sample_indices(size, rng))
    }

    /// Uniform row indices with replacement, as used by [`Batch::sample`].
    pub fn sample_indices<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Vec<usize> {
        (0..size).map(|_| rng.random_range(0..self.len())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Member {
    net: mlp::Checkpoint,
    target: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EnsembleCheckpoint {
    format: String,
    version: u32,
    config: CriticConfig,
    state_dim: usize,
    action_dim: usize,
    reward_q: Vec<Member>,
    reward_v: mlp::Checkpoint,
    cost: Vec<Member>,
}

#[derive(Debug, Clone)]
struct Trained {
    net: Mlp,
    target: Mlp,
    opt: Adam,
}

impl Trained {
    fn new(net: Mlp, adam: AdamConfig) -> Self {
        let n = net.n_params();
        Self {
            target: net.clone(),
            net,
            opt: Adam::new(adam, n),
        }
    }

    fn update_target(&mut self, tau: f64) {
        soft_update(self.target.params_mut(), self.net.params(), tau);
    }
}

/// Losses from one critic update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticLosses {
    pub value: f64,
    pub q: f64,
}

#[derive(Debug, Clone)]
pub struct CriticEnsemble {
    cfg: CriticConfig,
    state_dim: usize,
    action_dim: usize,
    reward_q: [Trained; 2],
    reward_v: Trained,
    cost: Vec<Trained>,
}

fn column_vec(m: Array2<f64>) -> Array1<f64> {
    m.column(0).to_owned()
}

impl CriticEnsemble {
    /// Each network gets its own initialisation stream derived from `seed`.
    pub fn new(cfg: CriticConfig, state_dim: usize, action_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![state_dim + action_dim];
        widths.extend_from_slice(&cfg.hidden);
        widths.push(1);
        let mut v_widths = vec![state_dim];
        v_widths.extend_from_slice(&cfg.hidden);
        v_widths.push(1);
        let q1 = Trained::new(Mlp::new(&widths, &mut rng)?, cfg.adam);
        let q2 = Trained::new(Mlp::new(&widths, &mut rng)?, cfg.adam);
        let v = Trained::new(Mlp::new(&v_widths, &mut rng)?, cfg.adam);
        let cost = (0..cfg.ensemble_size)
            .map(|_| Ok(Trained::new(Mlp::new(&widths, &mut rng)?, cfg.adam)))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            state_dim,
            action_dim,
            reward_q: [q1, q2],
            reward_v: v,
            cost,
        })
    }

    pub fn config(&self) -> &CriticConfig {
        &self.cfg
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn set_lr(&mut self, lr: f64) {
        for t in self
            .reward_q
            .iter_mut()
            .chain([&mut self.reward_v])
            .chain(self.cost.iter_mut())
        {
            t.opt.set_lr(lr);
        }
    }

    fn sa(&self, s: ArrayView2<'_, f64>, a: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim("critic states", self.state_dim, s.ncols())?;
        check_dim("critic actions", self.action_dim, a.ncols())?;
        check_dim("critic batch rows", s.nrows(), a.nrows())?;
        Ok(concat_cols(s, a))
    }

    /// `min(Q_r1, Q_r2)` per row.
    pub fn reward_q(&self, s: ArrayView2<'_, f64>, a: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let x = self.sa(s, a)?;
        let q1 = column_vec(self.reward_q[0].net.forward(x.view())?);
        let q2 = column_vec(self.reward_q[1].net.forward(x.view())?);
        Ok(q1.iter().zip(&q2).map(|(a, b)| a.min(*b)).collect())
    }

    pub fn reward_value(&self, s: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        Ok(column_vec(self.reward_v.net.forward(s)?))
    }

    /// `(rows, members)` matrix of cost predictions.
    pub fn cost_members(
        &self,
        s: ArrayView2<'_, f64>,
        a: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        let x = self.sa(s, a)?;
        let mut out = Array2::zeros((s.nrows(), self.cost.len()));
        for (i, m) in self.cost.iter().enumerate() {
            out.column_mut(i)
                .assign(&m.net.forward(x.view())?.column(0));
        }
        Ok(out)
    }

    pub fn ucb_cost(&self, s: ArrayView2<'_, f64>, a: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let m = self.cost_members(s, a)?;
        Ok(m.rows()
            .into_iter()
            .map(|r| ucb(r.as_slice().unwrap(), self.cfg.ucb_k))
            .collect())
    }

    fn action_grad(&self, net: &Mlp, x: &Array2<f64>) -> Result<Array2<f64>> {
        let trace = net.forward_trace(x.view())?;
        let ones = Array2::ones((x.nrows(), 1));
        let (_, gi) = net.backward(&trace, ones.view())?;
        Ok(gi.slice(s![.., self.state_dim..]).to_owned())
    }

    /// `grad_a min(Q_r1, Q_r2)(s, a)` per row, following the smaller member.
    pub fn reward_action_grad(
        &self,
        s: ArrayView2<'_, f64>,
        a: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        let x = self.sa(s, a)?;
        let q1 = self.reward_q[0].net.forward(x.view())?;
        let q2 = self.reward_q[1].net.forward(x.view())?;
        let g1 = self.action_grad(&self.reward_q[0].net, &x)?;
        let g2 = self.action_grad(&self.reward_q[1].net, &x)?;
        let mut g = g1;
        for i in 0..x.nrows() {
            if q2[[i, 0]] < q1[[i, 0]] {
                g.row_mut(i).assign(&g2.row(i));
            }
        }
        Ok(g)
    }

    /// `grad_a (mean + k std)` of the cost ensemble per row.
    pub fn ucb_action_grad(
        &self,
        s: ArrayView2<'_, f64>,
        a: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        let x = self.sa(s, a)?;
        let vals = self.cost_members(s, a)?;
        let grads: Vec<Array2<f64>> = self
            .cost
            .iter()
            .map(|m| self.action_grad(&m.net, &x))
            .collect::<Result<_>>()?;
        let e = self.cost.len() as f64;
        let mut out = Array2::zeros((x.nrows(), self.action_dim));
        for i in 0..x.nrows() {
            let row = vals.row(i);
            let mean = row.sum() / e;
            let std = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / e).sqrt();
            for (j, g) in grads.iter().enumerate() {
                let mut w = 1.0 / e;
                if std > 0.0 {
                    w += self.cfg.ucb_k * (row[j] - mean) / (e * std);
                }
                out.row_mut(i).scaled_add(w, &g.row(i));
            }
        }
        Ok(out)
    }

    /// One expectile value step then one TD step for both reward Q networks.
    pub fn train_reward_step(&mut self, b: &Batch) -> Result<CriticLosses> {
        let n = b.len() as f64;
        let x = self.sa(b.states.view(), b.actions.view())?;
        let tq1 = self.reward_q[0].target.forward(x.view())?;
        let tq2 = self.reward_q[1].target.forward(x.view())?;
        let tau = self.cfg.expectile_tau;

        let v_trace = self.reward_v.net.forward_trace(b.states.view())?;
        let mut up = Array2::zeros((b.len(), 1));
        let mut v_loss = 0.0;
        for i in 0..b.len() {
            let u = tq1[[i, 0]].min(tq2[[i, 0]]) - v_trace.output()[[i, 0]];
            v_loss += expectile_loss(u, tau);
            let w = if u < 0.0 { 1.0 - tau } else { tau };
            up[[i, 0]] = -2.0 * w * u / n;
        }
        let (g, _) = self.reward_v.net.backward(&v_trace, up.view())?;
        self.reward_v.opt.step(self.reward_v.net.params_mut(), &g);

        let v_next = self.reward_v.net.forward(b.next_states.view())?;
        let y: Array1<f64> = &b.rewards + &(v_next.column(0).to_owned() * self.cfg.gamma);
        let mut q_loss = 0.0;
        for q in self.reward_q.iter_mut() {
            let trace = q.net.forward_trace(x.view())?;
            let r = &trace.output().column(0) - &y;
            q_loss += r.iter().map(|v| v * v).sum::<f64>() / n;
            let up = r.mapv(|v| 2.0 * v / n).insert_axis(Axis(1));
            let (g, _) = q.net.backward(&trace, up.view())?;
            q.opt.step(q.net.params_mut(), &g);
            q.update_target(self.cfg.soft_update_tau);
        }
        Ok(CriticLosses {
            value: v_loss / n,
            q: q_loss / 2.0,
        })
    }

    /// One step for every cost member: squared TD error against its own target
    /// at `(s', next_actions)`, minus `pessimism * mean Q(s, policy_actions)`.
    pub fn train_cost_step(
        &mut self,
        b: &Batch,
        next_actions: ArrayView2<'_, f64>,
        policy_actions: ArrayView2<'_, f64>,
    ) -> Result<f64> {
        let n = b.len() as f64;
        let x = self.sa(b.states.view(), b.actions.view())?;
        let xn = self.sa(b.next_states.view(), next_actions)?;
        let xp = self.sa(b.states.view(), policy_actions)?;
        let (gamma, alpha, tau) = (self.cfg.gamma, self.cfg.pessimism, self.cfg.soft_update_tau);
        let mut total = 0.0;
        for m in self.cost.iter_mut() {
            let next = m.target.forward(xn.view())?;
            let y: Array1<f64> = &b.costs + &(next.column(0).to_owned() * gamma);
            let trace = m.net.forward_trace(x.view())?;
            let r = &trace.output().column(0) - &y;
            total += r.iter().map(|v| v * v).sum::<f64>() / n;
            let up = r.mapv(|v| 2.0 * v / n).insert_axis(Axis(1));
            let (mut g, _) = m.net.backward(&trace, up.view())?;
            if alpha > 0.0 {
                let tp = m.net.forward_trace(xp.view())?;
                total -= alpha * tp.output().sum() / n;
                let up = Array2::from_elem((b.len(), 1), -alpha / n);
                let (gp, _) = m.net.backward(&tp, up.view())?;
                g.iter_mut().zip(&gp).for_each(|(a, b)| *a += b);
            }
            m.opt.step(m.net.params_mut(), &g);
            m.update_target(tau);
        }
        Ok(total / self.cost.len() as f64)
    }

    /// Mean UCB cost over `states` with actions from the policy; returns the
    /// discounted estimate and its episodic rescaling over `horizon`.
    pub fn estimate_episodic_cost(
        &self,
        states: ArrayView2<'_, f64>,
        actions: ArrayView2<'_, f64>,
        horizon: usize,
    ) -> Result<(f64, f64)> {
        if states.nrows() == 0 {
            return Err(Error::Empty("state batch"));
        }
        let q = self.ucb_cost(states, actions)?.mean().unwrap();
        Ok((q, episodic_from_value(q, self.cfg.gamma, horizon)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let member = |t: &Trained| Member {
            net: t.net.to_checkpoint(),
            target: t.target.params().to_vec(),
        };
        let ckpt = EnsembleCheckpoint {
            format: "drcorl-critics".into(),
            version: 1,
            config: self.cfg.clone(),
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            reward_q: self.reward_q.iter().map(member).collect(),
            reward_v: self.reward_v.net.to_checkpoint(),
            cost: self.cost.iter().map(member).collect(),
        };
        fs::write(path, serde_json::to_string(&ckpt)?)?;
        Ok(())
    }

    /// Optimiser state is not stored; a loaded ensemble restarts Adam moments.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let ckpt: EnsembleCheckpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        if ckpt.format != "drcorl-critics" || ckpt.version != 1 || ckpt.reward_q.len() != 2 {
            return Err(Error::Parse {
                context: path.display().to_string(),
                reason: "not a version-1 critic checkpoint".into(),
            });
        }
        ckpt.config.validate()?;
        let adam = ckpt.config.adam;
        let restore = |m: Member| -> Result<Trained> {
            let net = Mlp::from_checkpoint(m.net)?;
            check_dim("critic target", net.n_params(), m.target.len())?;
            let mut t = Trained::new(net, adam);
            t.target.set_params(&m.target)?;
            Ok(t)
        };
        let mut q = ckpt.reward_q.into_iter().map(restore);
        let reward_q = [q.next().unwrap()?, q.next().unwrap()?];
        let cost = ckpt
            .cost
            .into_iter()
            .map(restore)
            .collect::<Result<Vec<_>>>()?;
        if cost.len() != ckpt.config.ensemble_size {
            return Err(Error::config(
                "ensemble_size",
                "does not match stored members",
            ));
        }
        Ok(Self {
            state_dim: ckpt.state_dim,
            action_dim: ckpt.action_dim,
            reward_q,
            reward_v: Trained::new(Mlp::from_checkpoint(ckpt.reward_v)?, adam),
            cost,
            cfg: ckpt.config,
        })
    }

    /// Overwrites every cost member (online and target) with `net`. Used to
    /// build known critics in tests and examples.
    pub fn set_cost_members(&mut self, nets: &[Mlp]) -> Result<()> {
        check_dim("cost members", self.cost.len(), nets.len())?;
        for (m, n) in self.cost.iter_mut().zip(nets) {
            check_dim("cost member params", m.net.n_params(), n.n_params())?;
            m.net = n.clone();
            m.target = n.clone();
        }
        Ok(())
    }

    /// Same as [`set_cost_members`](Self::set_cost_members) for the two reward Q networks.
    pub fn set_reward_members(&mut self, nets: &[Mlp; 2]) -> Result<()> {
        for (m, n) in self.reward_q.iter_mut().zip(nets) {
            check_dim("reward member params", m.net.n_params(), n.n_params())?;
            m.net = n.clone();
            m.target = n.clone();
        }
        Ok(())
    }

    pub fn cost_target_distance(&self, member: usize) -> f64 {
        let m = &self.cost[member];
        m.target
            .params()
            .iter()
            .zip(m.net.params())
            .map(|(t, o)| (t - o).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn cost_member_params(&self, member: usize) -> &[f64] {
        self.cost[member].net.params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expectile_examples() {
        assert_eq!(expectile_loss(2.0, 0.5), 2.0);
        assert!((expectile_loss(-1.0, 0.9) - 0.1).abs() < 1e-15);
        assert_eq!(expectile_loss(1.0, 0.9), 0.9);
    }

    #[test]
    fn ucb_examples() {
        assert_eq!(ucb(&[1.0, 1.0, 1.0, 1.0], 2.0), 1.0);
        assert_eq!(ucb(&[0.0, 2.0], 2.0), 3.0);
        assert_eq!(ucb(&[0.0, 2.0, 4.0], 0.0), 2.0);
    }

    #[test]
    fn episodic_rescaling() {
        assert!((episodic_from_value(1.0, 0.99, 1000) - 10.0).abs() < 1e-9);
    }

    #[test]
    fn config_validation_names_the_key() {
        let cfg = CriticConfig {
            ensemble_size: 1,
            ..Default::default()
        };
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("ensemble_size"));
        let cfg = CriticConfig {
            soft_update_tau: 1.0,
            ..Default::default()
        };
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("soft_update_tau"));
    }

    fn constant_net(widths: &[usize], c: f64) -> Mlp {
        let mut m = Mlp::zeros(widths).unwrap();
        let n = m.n_params();
        m.params_mut()[n - 1] = c;
        m
    }

    #[test]
    fn constant_critic_estimate() {
        let cfg = CriticConfig {
            hidden: vec![4],
            ..Default::default()
        };
        let mut c = CriticEnsemble::new(cfg, 2, 1, 0).unwrap();
        let nets: Vec<Mlp> = (0..4).map(|_| constant_net(&[3, 4, 1], 1.5)).collect();
        c.set_cost_members(&nets).unwrap();
        let s = Array2::from_shape_vec((3, 2), vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let a = Array2::zeros((3, 1));
        let (q, ep) = c.estimate_episodic_cost(s.view(), a.view(), 200).unwrap();
        assert!((q - 1.5).abs() < 1e-12);
        assert!((ep - 1.5 * 0.01 * 200.0).abs() < 1e-9);
        assert!(c
            .estimate_episodic_cost(
                Array2::zeros((0, 2)).view(),
                Array2::zeros((0, 1)).view(),
                1
            )
            .is_err());
    }

    #[test]
    fn ucb_dominates_mean_and_action_grad_matches_differences() {
        let cfg = CriticConfig {
            hidden: vec![6],
            ..Default::default()
        };
        let c = CriticEnsemble::new(cfg, 1, 2, 3).unwrap();
        let s = Array2::from_shape_vec((2, 1), vec![0.3, -0.8]).unwrap();
        let a = Array2::from_shape_vec((2, 2), vec![0.1, -0.2, 0.7, 0.4]).unwrap();
        let u = c.ucb_cost(s.view(), a.view()).unwrap();
        let m = c.cost_members(s.view(), a.view()).unwrap();
        for i in 0..2 {
            assert!(u[i] >= m.row(i).mean().unwrap());
        }
        let g = c.ucb_action_grad(s.view(), a.view()).unwrap();
        let gr = c.reward_action_grad(s.view(), a.view()).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            for k in 0..2 {
                let mut ap = a.clone();
                ap[[i, k]] += h;
                let mut am = a.clone();
                am[[i, k]] -= h;
                let fd = (c.ucb_cost(s.view(), ap.view()).unwrap()[i]
                    - c.ucb_cost(s.view(), am.view()).unwrap()[i])
                    / (2.0 * h);
                assert!((g[[i, k]] - fd).abs() < 1e-6);
                let fr = (c.reward_q(s.view(), ap.view()).unwrap()[i]
                    - c.reward_q(s.view(), am.view()).unwrap()[i])
                    / (2.0 * h);
                assert!((gr[[i, k]] - fr).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn target_tracks_frozen_online_monotonically() {
        let cfg = CriticConfig {
            hidden: vec![4],
            ..Default::default()
        };
        let mut c = CriticEnsemble::new(cfg, 1, 1, 0).unwrap();
        let b = Batch {
            states: Array2::zeros((4, 1)),
            actions: Array2::zeros((4, 1)),
            rewards: Array1::ones(4),
            costs: Array1::ones(4),
            next_states: Array2::zeros((4, 1)),
        };
        c.train_cost_step(&b, b.actions.view(), b.actions.view())
            .unwrap();
        let n = c.cost_member_params(0).len();
        // freeze online weights and keep averaging
        let online = c.cost_member_params(0).to_vec();
        let mut last = c.cost_target_distance(0);
        assert!(last > 0.0);
        for _ in 0..10 {
            let m = &mut c.cost[0];
            soft_update(m.target.params_mut(), &online, 0.005);
            let d = c.cost_target_distance(0);
            assert!(d < last);
            last = d;
        }
        assert_eq!(c.cost[0].target.n_params(), n);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = CriticConfig {
            hidden: vec![5],
            ensemble_size: 3,
            ..Default::default()
        };
        let c = CriticEnsemble::new(cfg, 2, 1, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        c.save(&p).unwrap();
        let d = CriticEnsemble::load(&p).unwrap();
        let s = Array2::from_shape_vec((1, 2), vec![0.2, 0.1]).unwrap();
        let a = Array2::from_elem((1, 1), 0.4);
        assert_eq!(
            c.cost_members(s.view(), a.view()).unwrap(),
            d.cost_members(s.view(), a.view()).unwrap()
        );
        assert_eq!(
            c.reward_q(s.view(), a.view()).unwrap(),
            d.reward_q(s.view(), a.view()).unwrap()
        );
    }
}
