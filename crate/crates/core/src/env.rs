//! Simulators used to synthesise offline data and to evaluate learned policies.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cmdp::{TabularCmdp, TabularPolicy};

pub type SimRng = ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
}

pub trait Environment {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Inclusive per-dimension action box, if actions are continuous.
    fn action_bounds(&self) -> Option<(f64, f64)> {
        None
    }
    fn reset(&mut self, rng: &mut SimRng) -> Vec<f64>;
    fn step(&mut self, action: &[f64], rng: &mut SimRng) -> Step;
}

/// Anything that picks actions: behaviour policies, learned policies.
pub trait Actor {
    /// Called at the start of every episode.
    fn begin_episode(&mut self, _rng: &mut SimRng) {}
    fn act(&mut self, state: &[f64], rng: &mut SimRng) -> Vec<f64>;
}

impl<F> Actor for F
where
    F: FnMut(&[f64], &mut SimRng) -> Vec<f64>,
{
    fn act(&mut self, state: &[f64], rng: &mut SimRng) -> Vec<f64> {
        self(state, rng)
    }
}

/// A tabular CMDP driven as a simulator. States and actions are encoded as a
/// single real component holding the index.
#[derive(Debug, Clone)]
pub struct TabularEnv {
    cmdp: TabularCmdp,
    state: usize,
}

impl TabularEnv {
    pub fn new(cmdp: TabularCmdp) -> Self {
        Self { cmdp, state: 0 }
    }

    pub fn cmdp(&self) -> &TabularCmdp {
        &self.cmdp
    }
}

fn sample_index(probs: &[f64], rng: &mut SimRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

impl Environment for TabularEnv {
    fn state_dim(&self) -> usize {
        1
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn reset(&mut self, rng: &mut SimRng) -> Vec<f64> {
        self.state = sample_index(self.cmdp.initial_dist(), rng);
        vec![self.state as f64]
    }

    fn step(&mut self, action: &[f64], rng: &mut SimRng) -> Step {
        let a = action[0] as usize;
        let s = self.state;
        let reward = self.cmdp.reward(s, a);
        let cost = self.cmdp.cost(s, a);
        self.state = sample_index(self.cmdp.transition_row(s, a), rng);
        Step {
            next_state: vec![self.state as f64],
            reward,
            cost,
        }
    }
}

impl Actor for TabularPolicy {
    fn act(&mut self, state: &[f64], rng: &mut SimRng) -> Vec<f64> {
        vec![self.sample(state[0] as usize, rng) as f64]
    }
}

/// One-dimensional point mass. The agent sets a velocity in `[-1, 1]`;
/// reward is a concave quadratic peaked at `goal`, and every step that ends
/// with `|x| > threshold` costs 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointMassConfig {
    pub dt: f64,
    pub goal: f64,
    pub threshold: f64,
    pub noise_std: f64,
    pub bound: f64,
    pub init_half_width: f64,
}

impl Default for PointMassConfig {
    fn default() -> Self {
        Self {
            dt: 0.2,
            goal: 1.5,
            threshold: 1.0,
            noise_std: 0.05,
            bound: 2.0,
            init_half_width: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PointMass {
    pub cfg: PointMassConfig,
    x: f64,
}

impl PointMass {
    pub fn new(cfg: PointMassConfig) -> Self {
        Self { cfg, x: 0.0 }
    }

    pub fn reward_at(&self, x: f64) -> f64 {
        1.0 - (x - self.cfg.goal).powi(2)
    }
}

impl Environment for PointMass {
    fn state_dim(&self) -> usize {
        1
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn action_bounds(&self) -> Option<(f64, f64)> {
        Some((-1.0, 1.0))
    }

    fn reset(&mut self, rng: &mut SimRng) -> Vec<f64> {
        let w = self.cfg.init_half_width;
        self.x = if w > 0.0 {
            rng.random_range(-w..w)
        } else {
            0.0
        };
        vec![self.x]
    }

    fn step(&mut self, action: &[f64], rng: &mut SimRng) -> Step {
        let a = action[0].clamp(-1.0, 1.0);
        let z: f64 = StandardNormal.sample(rng);
        let b = self.cfg.bound;
        self.x = (self.x + self.cfg.dt * a + self.cfg.noise_std * z).clamp(-b, b);
        Step {
            next_state: vec![self.x],
            reward: self.reward_at(self.x),
            cost: if self.x.abs() > self.cfg.threshold {
                1.0
            } else {
                0.0
            },
        }
    }
}

/// Mixed-quality behaviour for the point mass. Each episode follows either a
/// conservative controller (steers to `safe_target`, with probability
/// `safe_ratio`) or an aggressive one (steers to the reward peak); on every
/// step a uniformly random action replaces the controller with probability
/// `epsilon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointMassBehavior {
    pub safe_ratio: f64,
    pub epsilon: f64,
    pub safe_target: f64,
    pub aggressive_target: f64,
    pub gain: f64,
    pub noise_std: f64,
}

impl Default for PointMassBehavior {
    fn default() -> Self {
        Self {
            safe_ratio: 0.7,
            epsilon: 0.2,
            safe_target: 0.3,
            aggressive_target: 1.5,
            gain: 1.0,
            noise_std: 0.3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PointMassBehaviorActor {
    cfg: PointMassBehavior,
    target: f64,
}

impl PointMassBehaviorActor {
    pub fn new(cfg: PointMassBehavior) -> Self {
        Self {
            cfg,
            target: cfg.safe_target,
        }
    }
}

impl Actor for PointMassBehaviorActor {
    fn begin_episode(&mut self, rng: &mut SimRng) {
        self.target = if rng.random::<f64>() < self.cfg.safe_ratio {
            self.cfg.safe_target
        } else {
            self.cfg.aggressive_target
        };
    }

    fn act(&mut self, state: &[f64], rng: &mut SimRng) -> Vec<f64> {
        let a = if rng.random::<f64>() < self.cfg.epsilon {
            rng.random_range(-1.0..1.0)
        } else {
            let z: f64 = StandardNormal.sample(rng);
            self.cfg.gain * (self.target - state[0]) + self.cfg.noise_std * z
        };
        vec![a.clamp(-1.0, 1.0)]
    }
}
