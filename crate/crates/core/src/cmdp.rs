//! Finite constrained MDPs with exact policy evaluation.
//!
//! Everything here is solved with dense LU factorisations, which is exact up
//! to rounding for the state counts we care about (at most a few hundred).
//!
//! # Text format
//!
//! ```text
//! # comments and blank lines are ignored
//! <states> <actions> <gamma> <cost_limit>
//! <P(.|s,a)>      one line of `states` numbers per (s, a), s-major
//! <r(s,.)>        one line of `actions` numbers per state
//! <c(s,.)>        one line of `actions` numbers per state
//! <rho>           one line of `states` numbers
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};

const ROW_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Signal {
    Reward,
    Cost,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularCmdp {
    n_states: usize,
    n_actions: usize,
    /// `transition[(s * A + a) * S + s']`
    transition: Vec<f64>,
    reward: Vec<f64>,
    cost: Vec<f64>,
    gamma: f64,
    initial_dist: Vec<f64>,
    cost_limit: f64,
}

impl TabularCmdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        cost: Vec<f64>,
        gamma: f64,
        initial_dist: Vec<f64>,
        cost_limit: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::invalid(
                "cmdp",
                "needs at least one state and one action",
            ));
        }
        let sa = n_states * n_actions;
        if transition.len() != sa * n_states
            || reward.len() != sa
            || cost.len() != sa
            || initial_dist.len() != n_states
        {
            return Err(Error::invalid(
                "cmdp",
                "array sizes disagree with state/action counts",
            ));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::invalid("gamma", format!("{gamma} not in [0, 1)")));
        }
        if !(cost_limit >= 0.0) {
            return Err(Error::invalid("cost_limit", format!("{cost_limit} < 0")));
        }
        for row in 0..sa {
            check_distribution(
                &transition[row * n_states..(row + 1) * n_states],
                &format!("P(.|s={},a={})", row / n_actions, row % n_actions),
            )?;
        }
        check_distribution(&initial_dist, "initial distribution")?;
        if reward.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::invalid(
                "reward",
                "entries must be finite and non-negative",
            ));
        }
        if cost.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::invalid(
                "cost",
                "entries must be finite and non-negative",
            ));
        }
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            cost,
            gamma,
            initial_dist,
            cost_limit,
        })
    }

    /// A random CMDP with Dirichlet-like transition rows and rewards/costs in [0, 1].
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        n_states: usize,
        n_actions: usize,
        gamma: f64,
    ) -> Self {
        let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            let row: Vec<f64> = (0..n_states)
                .map(|_| -rng.random_range(1e-12f64..1.0).ln())
                .collect();
            let z: f64 = row.iter().sum();
            transition.extend(row.iter().map(|p| p / z));
        }
        let reward = (0..n_states * n_actions).map(|_| rng.random()).collect();
        let cost = (0..n_states * n_actions).map(|_| rng.random()).collect();
        let mut rho: Vec<f64> = (0..n_states).map(|_| rng.random_range(0.1..1.0)).collect();
        let z: f64 = rho.iter().sum();
        rho.iter_mut().for_each(|p| *p /= z);
        Self::new(
            n_states, n_actions, transition, reward, cost, gamma, rho, 0.0,
        )
        .expect("generated CMDP is valid")
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn cost_limit(&self) -> f64 {
        self.cost_limit
    }

    pub fn with_cost_limit(mut self, limit: f64) -> Self {
        self.cost_limit = limit;
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::invalid("gamma", format!("{gamma} not in [0, 1)")));
        }
        self.gamma = gamma;
        Ok(self)
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let i = (s * self.n_actions + a) * self.n_states;
        &self.transition[i..i + self.n_states]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn cost(&self, s: usize, a: usize) -> f64 {
        self.cost[s * self.n_actions + a]
    }

    pub fn signal(&self, signal: Signal, s: usize, a: usize) -> f64 {
        match signal {
            Signal::Reward => self.reward(s, a),
            Signal::Cost => self.cost(s, a),
        }
    }

    /// Largest per-step reward, `M` in the tabular bounds.
    pub fn reward_max(&self) -> f64 {
        self.reward.iter().cloned().fold(0.0, f64::max)
    }

    pub fn cost_max(&self) -> f64 {
        self.cost.iter().cloned().fold(0.0, f64::max)
    }

    fn check_policy(&self, policy: &TabularPolicy) -> Result<()> {
        if policy.n_states != self.n_states || policy.n_actions != self.n_actions {
            return Err(Error::invalid(
                "policy",
                format!(
                    "shape {}x{} does not match cmdp {}x{}",
                    policy.n_states, policy.n_actions, self.n_states, self.n_actions
                ),
            ));
        }
        Ok(())
    }

    /// `P^pi` as a dense `S x S` matrix.
    fn policy_transition(&self, policy: &TabularPolicy) -> DMatrix<f64> {
        let s_n = self.n_states;
        DMatrix::from_fn(s_n, s_n, |s, next| {
            (0..self.n_actions)
                .map(|a| policy.prob(s, a) * self.transition_row(s, a)[next])
                .sum()
        })
    }

    /// Solves `(I - gamma P^pi) V = signal^pi` directly.
    pub fn evaluate_values(&self, policy: &TabularPolicy, signal: Signal) -> Result<Vec<f64>> {
        self.check_policy(policy)?;
        let s_n = self.n_states;
        let lhs = DMatrix::identity(s_n, s_n) - self.policy_transition(policy) * self.gamma;
        let rhs = DVector::from_fn(s_n, |s, _| {
            (0..self.n_actions)
                .map(|a| policy.prob(s, a) * self.signal(signal, s, a))
                .sum()
        });
        let v = lhs
            .lu()
            .solve(&rhs)
            .ok_or(Error::Singular("policy evaluation"))?;
        Ok(v.iter().copied().collect())
    }

    /// `V^pi(rho)`.
    pub fn value(&self, policy: &TabularPolicy, signal: Signal) -> Result<f64> {
        let v = self.evaluate_values(policy, signal)?;
        Ok(dot(&v, &self.initial_dist))
    }

    fn q_from_values(&self, values: &[f64], signal: Signal) -> Vec<f64> {
        let mut q = vec![0.0; self.n_states * self.n_actions];
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                q[s * self.n_actions + a] =
                    self.signal(signal, s, a) + self.gamma * dot(self.transition_row(s, a), values);
            }
        }
        q
    }

    /// `Q^pi(s, a)`, row-major over states.
    pub fn evaluate_q(&self, policy: &TabularPolicy, signal: Signal) -> Result<Vec<f64>> {
        let v = self.evaluate_values(policy, signal)?;
        Ok(self.q_from_values(&v, signal))
    }

    /// `A^pi(s, a) = Q^pi(s, a) - V^pi(s)`.
    pub fn advantage(&self, policy: &TabularPolicy, signal: Signal) -> Result<Vec<f64>> {
        let v = self.evaluate_values(policy, signal)?;
        let mut q = self.q_from_values(&v, signal);
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                q[s * self.n_actions + a] -= v[s];
            }
        }
        Ok(q)
    }

    /// `d^pi_rho = (1 - gamma) rho^T (I - gamma P^pi)^{-1}`.
    pub fn discounted_stationary_dist(&self, policy: &TabularPolicy) -> Result<Vec<f64>> {
        self.check_policy(policy)?;
        let s_n = self.n_states;
        let lhs = DMatrix::identity(s_n, s_n) - self.policy_transition(policy) * self.gamma;
        // solve (I - gamma P^pi)^T x = rho
        let rho = DVector::from_column_slice(&self.initial_dist);
        let x = lhs
            .transpose()
            .lu()
            .solve(&rho)
            .ok_or(Error::Singular("stationary distribution"))?;
        Ok(x.iter().map(|v| v * (1.0 - self.gamma)).collect())
    }

    /// Normalised discounted occupancy `d^pi(s) pi(a|s)`.
    pub fn occupancy(&self, policy: &TabularPolicy) -> Result<Vec<f64>> {
        let d = self.discounted_stationary_dist(policy)?;
        let mut occ = vec![0.0; self.n_states * self.n_actions];
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                occ[s * self.n_actions + a] = d[s] * policy.prob(s, a);
            }
        }
        Ok(occ)
    }

    fn occupancy_value(&self, occ: &[f64], signal: Signal) -> f64 {
        let table = match signal {
            Signal::Reward => &self.reward,
            Signal::Cost => &self.cost,
        };
        dot(occ, table) / (1.0 - self.gamma)
    }

    /// Optimal values for one signal by value iteration, with the greedy
    /// deterministic policy. Maximises rewards and minimises costs.
    pub fn optimal_policy(&self, signal: Signal, tol: f64) -> (Vec<f64>, TabularPolicy) {
        let better = |x: f64, y: f64| match signal {
            Signal::Reward => x > y,
            Signal::Cost => x < y,
        };
        let mut v = vec![0.0; self.n_states];
        let mut greedy = vec![0usize; self.n_states];
        loop {
            let q = self.q_from_values(&v, signal);
            let mut delta = 0.0f64;
            let mut next = vec![0.0; self.n_states];
            for s in 0..self.n_states {
                let row = &q[s * self.n_actions..(s + 1) * self.n_actions];
                let mut best = 0;
                for a in 1..self.n_actions {
                    if better(row[a], row[best]) {
                        best = a;
                    }
                }
                greedy[s] = best;
                next[s] = row[best];
                delta = delta.max((next[s] - v[s]).abs());
            }
            v = next;
            if delta < tol * (1.0 - self.gamma) {
                break;
            }
        }
        let policy = TabularPolicy::deterministic(self.n_actions, &greedy);
        // report the exact values of the greedy policy
        let exact = self.evaluate_values(&policy, signal).unwrap_or(v);
        (exact, policy)
    }

    /// Exact optimum of the constrained problem `max V_r(rho) s.t. V_c(rho) <= l`.
    ///
    /// The occupancy-measure LP has deterministic policies as vertices and a
    /// single side constraint, so an optimum lies on a segment between two
    /// vertices. Enumerating all pairs is exact but exponential in the state
    /// count; it is intended for the small instances used in convergence
    /// checks (`A^S` up to a few thousand).
    pub fn constrained_optimum(&self) -> Result<Option<ConstrainedOptimum>> {
        let n_det = (self.n_actions as f64).powi(self.n_states as i32);
        if n_det > 4096.0 {
            return Err(Error::invalid(
                "constrained optimum",
                format!("{n_det} deterministic policies is too many to enumerate"),
            ));
        }
        let n_det = n_det as usize;
        let mut vertices = Vec::with_capacity(n_det);
        for idx in 0..n_det {
            let mut actions = vec![0; self.n_states];
            let mut rest = idx;
            for a in actions.iter_mut() {
                *a = rest % self.n_actions;
                rest /= self.n_actions;
            }
            let pol = TabularPolicy::deterministic(self.n_actions, &actions);
            let occ = self.occupancy(&pol)?;
            let r = self.occupancy_value(&occ, Signal::Reward);
            let c = self.occupancy_value(&occ, Signal::Cost);
            vertices.push((occ, r, c));
        }
        let limit = self.cost_limit;
        let mut best: Option<(f64, f64, Vec<f64>)> = None;
        let mut consider = |r: f64, c: f64, occ: Vec<f64>| {
            if best.as_ref().is_none_or(|b| r > b.0 + 1e-12) {
                best = Some((r, c, occ));
            }
        };
        for (occ, r, c) in &vertices {
            if *c <= limit {
                consider(*r, *c, occ.clone());
            }
        }
        for i in 0..vertices.len() {
            for j in 0..vertices.len() {
                let (oi, ri, ci) = &vertices[i];
                let (oj, rj, cj) = &vertices[j];
                // feasible i, infeasible j: push toward j until the constraint binds
                if *ci <= limit && *cj > limit && rj > ri {
                    let lam = (limit - ci) / (cj - ci);
                    let occ: Vec<f64> = oi
                        .iter()
                        .zip(oj)
                        .map(|(a, b)| (1.0 - lam) * a + lam * b)
                        .collect();
                    consider((1.0 - lam) * ri + lam * rj, limit, occ);
                }
            }
        }
        Ok(
            best.map(|(reward_value, cost_value, occ)| ConstrainedOptimum {
                reward_value,
                cost_value,
                policy: self.policy_from_occupancy(&occ),
            }),
        )
    }

    fn policy_from_occupancy(&self, occ: &[f64]) -> TabularPolicy {
        let a_n = self.n_actions;
        let mut probs = vec![0.0; self.n_states * a_n];
        for s in 0..self.n_states {
            let row = &occ[s * a_n..(s + 1) * a_n];
            let z: f64 = row.iter().sum();
            for a in 0..a_n {
                probs[s * a_n + a] = if z > 0.0 {
                    row[a] / z
                } else {
                    1.0 / a_n as f64
                };
            }
        }
        TabularPolicy::new(self.n_states, a_n, probs).expect("normalised rows")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} {} {} {}",
            self.n_states, self.n_actions, self.gamma, self.cost_limit
        );
        let line = |out: &mut String, xs: &[f64]| {
            let parts: Vec<String> = xs.iter().map(|x| x.to_string()).collect();
            let _ = writeln!(out, "{}", parts.join(" "));
        };
        for sa in 0..self.n_states * self.n_actions {
            line(
                &mut out,
                &self.transition[sa * self.n_states..(sa + 1) * self.n_states],
            );
        }
        for s in 0..self.n_states {
            line(
                &mut out,
                &self.reward[s * self.n_actions..(s + 1) * self.n_actions],
            );
        }
        for s in 0..self.n_states {
            line(
                &mut out,
                &self.cost[s * self.n_actions..(s + 1) * self.n_actions],
            );
        }
        line(&mut out, &self.initial_dist);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let parse_err = |reason: String| Error::Parse {
            context: "cmdp file".into(),
            reason,
        };
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| parse_err("missing header".into()))?
            .split_whitespace()
            .collect();
        if header.len() != 4 {
            return Err(parse_err(
                "header must be `states actions gamma cost_limit`".into(),
            ));
        }
        let n_states: usize = header[0]
            .parse()
            .map_err(|_| parse_err(format!("bad state count `{}`", header[0])))?;
        let n_actions: usize = header[1]
            .parse()
            .map_err(|_| parse_err(format!("bad action count `{}`", header[1])))?;
        let gamma: f64 = header[2]
            .parse()
            .map_err(|_| parse_err(format!("bad gamma `{}`", header[2])))?;
        let cost_limit: f64 = header[3]
            .parse()
            .map_err(|_| parse_err(format!("bad cost limit `{}`", header[3])))?;
        let mut read_rows = |rows: usize, width: usize, what: &str| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(rows * width);
            for i in 0..rows {
                let l = lines
                    .next()
                    .ok_or_else(|| parse_err(format!("{what}: missing row {i}")))?;
                let vals: std::result::Result<Vec<f64>, _> =
                    l.split_whitespace().map(str::parse::<f64>).collect();
                let vals = vals.map_err(|e| parse_err(format!("{what} row {i}: {e}")))?;
                if vals.len() != width {
                    return Err(parse_err(format!(
                        "{what} row {i}: expected {width} values, got {}",
                        vals.len()
                    )));
                }
                out.extend(vals);
            }
            Ok(out)
        };
        let transition = read_rows(n_states * n_actions, n_states, "transition")?;
        let reward = read_rows(n_states, n_actions, "reward")?;
        let cost = read_rows(n_states, n_actions, "cost")?;
        let rho = read_rows(1, n_states, "initial distribution")?;
        Self::new(
            n_states, n_actions, transition, reward, cost, gamma, rho, cost_limit,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_text(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Solution of the constrained problem returned by [`TabularCmdp::constrained_optimum`].
#[derive(Debug, Clone)]
pub struct ConstrainedOptimum {
    pub reward_value: f64,
    pub cost_value: f64,
    pub policy: TabularPolicy,
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::invalid(
            what,
            "entries must be finite and non-negative",
        ));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > ROW_TOL {
        return Err(Error::invalid(what, format!("sums to {total}, not 1")));
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Stochastic policy table `pi(a|s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::invalid(
                "policy",
                "probability table has the wrong size",
            ));
        }
        for s in 0..n_states {
            check_distribution(&probs[s * n_actions..(s + 1) * n_actions], "policy row")?;
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Self {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        Self {
            n_states: actions.len(),
            n_actions,
            probs,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, p) in self.row(s).iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        // rounding: fall back to the last action with positive mass
        self.row(s).iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    /// Convex mixture `sum_i w_i pi_i / sum_i w_i`.
    pub fn mixture(policies: &[TabularPolicy], weights: &[f64]) -> Result<Self> {
        let first = policies.first().ok_or(Error::Empty("policy mixture"))?;
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::invalid(
                "mixture weights",
                "must be non-negative with positive sum",
            ));
        }
        let mut probs = vec![0.0; first.probs.len()];
        for (p, &w) in policies.iter().zip(weights) {
            for (acc, v) in probs.iter_mut().zip(&p.probs) {
                *acc += w * v / total;
            }
        }
        // renormalise rows against drift
        let a_n = first.n_actions;
        for s in 0..first.n_states {
            let z: f64 = probs[s * a_n..(s + 1) * a_n].iter().sum();
            probs[s * a_n..(s + 1) * a_n]
                .iter_mut()
                .for_each(|p| *p /= z);
        }
        Ok(Self {
            n_states: first.n_states,
            n_actions: a_n,
            probs,
        })
    }
}

/// `KL(p || q)` for one pair of distributions, with `0 log(0/q) = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Option<f64> {
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return None;
            }
            total += pi * (pi / qi).ln();
        }
    }
    Some(total.max(0.0))
}

/// `max_s max(KL(p_s || q_s), KL(q_s || p_s))`.
pub fn max_symmetric_kl(p: &TabularPolicy, q: &TabularPolicy) -> Result<f64> {
    let mut worst = 0.0f64;
    for s in 0..p.n_states {
        for (x, y) in [(p, q), (q, p)] {
            let kl = kl_divergence(x.row(s), y.row(s)).ok_or_else(|| {
                let action = (0..x.n_actions)
                    .find(|&a| x.prob(s, a) > 0.0 && y.prob(s, a) <= 0.0)
                    .unwrap_or(0);
                Error::InfiniteKl { state: s, action }
            })?;
            worst = worst.max(kl);
        }
    }
    Ok(worst)
}

/// Terms of the cost upper bound for a learned policy near the behaviour policy.
#[derive(Debug, Clone, Copy)]
pub struct CostBound {
    pub learned_cost: f64,
    pub behavior_cost: f64,
    pub eps_dist: f64,
    pub eps_adv: f64,
    /// `(c_max + gamma eps_adv) sqrt(2 eps_dist) / (1 - gamma)^2`
    pub slack: f64,
}

impl CostBound {
    pub fn holds(&self) -> bool {
        self.learned_cost - self.behavior_cost <= self.slack
    }
}

/// Evaluates `V_c^learned(rho) <= V_c^behavior(rho) + slack` with
/// `eps_dist` the worst per-state KL in either direction and
/// `eps_adv = max_s E_{a~behavior}[A_c^learned(s, a)]`.
pub fn cost_upper_bound(
    cmdp: &TabularCmdp,
    learned: &TabularPolicy,
    behavior: &TabularPolicy,
) -> Result<CostBound> {
    let eps_dist = max_symmetric_kl(learned, behavior)?;
    let adv = cmdp.advantage(learned, Signal::Cost)?;
    let a_n = cmdp.n_actions();
    let eps_adv = (0..cmdp.n_states())
        .map(|s| {
            (0..a_n)
                .map(|a| behavior.prob(s, a) * adv[s * a_n + a])
                .sum::<f64>()
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let g = cmdp.gamma();
    Ok(CostBound {
        learned_cost: cmdp.value(learned, Signal::Cost)?,
        behavior_cost: cmdp.value(behavior, Signal::Cost)?,
        eps_dist,
        eps_adv,
        slack: (cmdp.cost_max() + g * eps_adv) * (2.0 * eps_dist).sqrt() / (1.0 - g).powi(2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_state(r: f64, gamma: f64) -> TabularCmdp {
        TabularCmdp::new(1, 1, vec![1.0], vec![r], vec![0.0], gamma, vec![1.0], 0.0).unwrap()
    }

    /// s1 -> s2 -> s2 ..., reward only in s2, two identical actions.
    fn chain(gamma: f64) -> TabularCmdp {
        TabularCmdp::new(
            2,
            2,
            vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
            vec![0.0, 0.0, 1.0, 1.0],
            vec![0.0; 4],
            gamma,
            vec![1.0, 0.0],
            0.0,
        )
        .unwrap()
    }

    fn iterative_values(m: &TabularCmdp, pi: &TabularPolicy, signal: Signal) -> Vec<f64> {
        let mut v = vec![0.0; m.n_states()];
        for _ in 0..10_000 {
            v = (0..m.n_states())
                .map(|s| {
                    (0..m.n_actions())
                        .map(|a| {
                            pi.prob(s, a)
                                * (m.signal(signal, s, a)
                                    + m.gamma() * dot(m.transition_row(s, a), &v))
                        })
                        .sum()
                })
                .collect();
        }
        v
    }

    fn random_policy(rng: &mut ChaCha8Rng, s_n: usize, a_n: usize) -> TabularPolicy {
        let mut probs = Vec::new();
        for _ in 0..s_n {
            let row: Vec<f64> = (0..a_n).map(|_| rng.random_range(0.05..1.0)).collect();
            let z: f64 = row.iter().sum();
            probs.extend(row.iter().map(|p| p / z));
        }
        TabularPolicy::new(s_n, a_n, probs).unwrap()
    }

    #[test]
    fn geometric_series_value() {
        let m = one_state(1.0, 0.9);
        let pi = TabularPolicy::uniform(1, 1);
        let v = m.evaluate_values(&pi, Signal::Reward).unwrap();
        assert!((v[0] - 10.0).abs() < 1e-12);
        let q = m.evaluate_q(&pi, Signal::Reward).unwrap();
        assert!((q[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn zero_reward_gives_zero_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = TabularCmdp::random(&mut rng, 5, 3, 0.9);
        let zero = TabularCmdp::new(
            5,
            3,
            m.transition.clone(),
            vec![0.0; 15],
            m.cost.clone(),
            0.9,
            m.initial_dist.clone(),
            0.0,
        )
        .unwrap();
        let v = zero
            .evaluate_values(&TabularPolicy::uniform(5, 3), Signal::Reward)
            .unwrap();
        assert!(v.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn chain_values_q_and_occupancy() {
        // V(s2) = 1/(1-0.5) = 2, V(s1) = 0 + 0.5 * 2 = 1
        let m = chain(0.5);
        let pi = TabularPolicy::uniform(2, 2);
        let v = m.evaluate_values(&pi, Signal::Reward).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-12 && (v[1] - 2.0).abs() < 1e-12);
        let q = m.evaluate_q(&pi, Signal::Reward).unwrap();
        assert!((q[0] - 1.0).abs() < 1e-12 && (q[1] - 1.0).abs() < 1e-12);
        // d = (1-g) rho^T (I - gP)^-1; row for s1 of the inverse is [1, g/(1-g)] = [1, 1]
        let d = m.discounted_stationary_dist(&pi).unwrap();
        assert!((d[0] - 0.5).abs() < 1e-12 && (d[1] - 0.5).abs() < 1e-12);
        let adv = m.advantage(&pi, Signal::Reward).unwrap();
        assert!(adv.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn gamma_zero_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = TabularCmdp::random(&mut rng, 4, 2, 0.5)
            .with_gamma(1e-12)
            .unwrap();
        let pi = random_policy(&mut rng, 4, 2);
        let q = m.evaluate_q(&pi, Signal::Cost).unwrap();
        for s in 0..4 {
            for a in 0..2 {
                assert!((q[s * 2 + a] - m.cost(s, a)).abs() < 1e-9);
            }
        }
        let d = m.discounted_stationary_dist(&pi).unwrap();
        for s in 0..4 {
            assert!((d[s] - m.initial_dist()[s]).abs() < 1e-9);
        }
    }

    #[test]
    fn single_state_occupancy_is_one() {
        let m = one_state(0.3, 0.7);
        assert_eq!(
            m.discounted_stationary_dist(&TabularPolicy::uniform(1, 1))
                .unwrap(),
            vec![1.0]
        );
    }

    #[test]
    fn deterministic_policy_has_zero_advantage_on_its_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = TabularCmdp::random(&mut rng, 6, 3, 0.9);
        let pi = TabularPolicy::deterministic(3, &[0, 2, 1, 1, 0, 2]);
        let adv = m.advantage(&pi, Signal::Reward).unwrap();
        for (s, a) in [0, 2, 1, 1, 0, 2].iter().enumerate() {
            assert!(adv[s * 3 + a].abs() < 1e-10);
        }
    }

    #[test]
    fn matches_iterative_evaluation_and_pdl() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let s_n = rng.random_range(1..=10);
            let a_n = rng.random_range(1..=4);
            let m = TabularCmdp::random(&mut rng, s_n, a_n, 0.9);
            let pi = random_policy(&mut rng, s_n, a_n);
            let exact = m.evaluate_values(&pi, Signal::Cost).unwrap();
            let iter = iterative_values(&m, &pi, Signal::Cost);
            for (x, y) in exact.iter().zip(&iter) {
                assert!((x - y).abs() < 1e-7);
            }
            let d = m.discounted_stationary_dist(&pi).unwrap();
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-8);
            let adv_sum: f64 = (0..s_n)
                .map(|s| {
                    (0..a_n)
                        .map(|a| {
                            pi.prob(s, a) * m.advantage(&pi, Signal::Cost).unwrap()[s * a_n + a]
                        })
                        .sum::<f64>()
                })
                .sum();
            assert!(adv_sum.abs() < 1e-9);

            // performance difference between pi_b and pi
            let pi_b = random_policy(&mut rng, s_n, a_n);
            let lhs = m.value(&pi_b, Signal::Cost).unwrap() - m.value(&pi, Signal::Cost).unwrap();
            let adv = m.advantage(&pi, Signal::Cost).unwrap();
            let d_b = m.discounted_stationary_dist(&pi_b).unwrap();
            let rhs: f64 = (0..s_n)
                .map(|s| {
                    d_b[s]
                        * (0..a_n)
                            .map(|a| pi_b.prob(s, a) * adv[s * a_n + a])
                            .sum::<f64>()
                })
                .sum::<f64>()
                / (1.0 - m.gamma());
            assert!((lhs - rhs).abs() < 1e-7, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn cost_bound_holds_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..30 {
            let m = TabularCmdp::random(&mut rng, 5, 3, 0.8);
            let b = random_policy(&mut rng, 5, 3);
            let p = random_policy(&mut rng, 5, 3);
            assert!(cost_upper_bound(&m, &p, &b).unwrap().holds());
        }
    }

    #[test]
    fn infinite_kl_is_rejected() {
        let p = TabularPolicy::deterministic(2, &[0]);
        let q = TabularPolicy::deterministic(2, &[1]);
        assert!(matches!(
            max_symmetric_kl(&p, &q),
            Err(Error::InfiniteKl {
                state: 0,
                action: 0
            })
        ));
        assert_eq!(kl_divergence(&[0.0, 1.0], &[0.5, 0.5]), Some(2f64.ln()));
    }

    #[test]
    fn invalid_rows_are_rejected() {
        let bad = TabularCmdp::new(1, 1, vec![0.9], vec![1.0], vec![0.0], 0.9, vec![1.0], 0.0);
        assert!(bad.is_err());
        let neg_cost =
            TabularCmdp::new(1, 1, vec![1.0], vec![1.0], vec![-0.1], 0.9, vec![1.0], 0.0);
        assert!(neg_cost.is_err());
    }

    #[test]
    fn text_format_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = TabularCmdp::random(&mut rng, 3, 2, 0.95).with_cost_limit(1.5);
        let parsed = TabularCmdp::from_text(&format!("# header comment\n{}", m.to_text())).unwrap();
        assert_eq!(parsed, m);
        assert!(TabularCmdp::from_text("2 2 0.9").is_err());
    }

    #[test]
    fn constrained_optimum_respects_limit_and_beats_feasible_vertices() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = TabularCmdp::random(&mut rng, 3, 2, 0.9);
        let free = m
            .clone()
            .with_cost_limit(1e9)
            .constrained_optimum()
            .unwrap()
            .unwrap();
        let (v_star, _) = m.optimal_policy(Signal::Reward, 1e-12);
        let v_rho = dot(&v_star, m.initial_dist());
        assert!((free.reward_value - v_rho).abs() < 1e-8);

        let (c_min, _) = m.optimal_policy(Signal::Cost, 1e-12);
        let c_lo = dot(&c_min, m.initial_dist());
        let limit = c_lo + 0.5 * (free.cost_value - c_lo);
        let m = m.with_cost_limit(limit);
        let opt = m.constrained_optimum().unwrap().unwrap();
        let r = m.value(&opt.policy, Signal::Reward).unwrap();
        let c = m.value(&opt.policy, Signal::Cost).unwrap();
        assert!((r - opt.reward_value).abs() < 1e-8);
        assert!(c <= limit + 1e-8);
        // no random feasible policy does better
        for _ in 0..2000 {
            let p = random_policy(&mut rng, 3, 2);
            if m.value(&p, Signal::Cost).unwrap() <= limit {
                assert!(m.value(&p, Signal::Reward).unwrap() <= opt.reward_value + 1e-9);
            }
        }
    }
}
