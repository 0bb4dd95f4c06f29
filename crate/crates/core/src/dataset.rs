//! Offline transition datasets and the normalised episode metrics.
//!
//! # File format
//!
//! CSV with header `state,action,reward,next_state,cost,done`. Vector-valued
//! fields join their components with `;`. `done` is `1` on the last
//! transition of an episode and `0` elsewhere. Floats are written in their
//! shortest round-trip form, so reading a written file reproduces it exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;

use crate::env::{Actor, Environment, SimRng};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub cost: f64,
    /// Last transition of its episode (time-limit truncation; the next state
    /// is still a valid state to bootstrap from).
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStats {
    pub episodic_return: f64,
    pub episodic_cost: f64,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    transitions: Vec<Transition>,
}

impl Dataset {
    pub fn new(transitions: Vec<Transition>) -> Result<Self> {
        for (i, t) in transitions.iter().enumerate() {
            if !t.reward.is_finite() || !t.cost.is_finite() {
                return Err(Error::invalid(
                    "transition",
                    format!("row {i} has a non-finite reward or cost"),
                ));
            }
        }
        if let (Some(first), Some(last)) = (transitions.first(), transitions.last()) {
            if !last.done {
                return Err(Error::invalid(
                    "dataset",
                    "last transition must close its episode",
                ));
            }
            let (sd, ad) = (first.state.len(), first.action.len());
            if transitions
                .iter()
                .any(|t| t.state.len() != sd || t.next_state.len() != sd || t.action.len() != ad)
            {
                return Err(Error::invalid(
                    "dataset",
                    "inconsistent state or action dimension",
                ));
            }
        }
        Ok(Self { transitions })
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.transitions.first().map_or(0, |t| t.state.len())
    }

    pub fn action_dim(&self) -> usize {
        self.transitions.first().map_or(0, |t| t.action.len())
    }

    pub fn state_matrix(&self) -> Array2<f64> {
        self.matrix(self.state_dim(), |t| &t.state)
    }

    pub fn action_matrix(&self) -> Array2<f64> {
        self.matrix(self.action_dim(), |t| &t.action)
    }

    pub fn next_state_matrix(&self) -> Array2<f64> {
        self.matrix(self.state_dim(), |t| &t.next_state)
    }

    fn matrix(&self, width: usize, field: impl Fn(&Transition) -> &Vec<f64>) -> Array2<f64> {
        let mut m = Array2::zeros((self.len(), width));
        for (mut row, t) in m.rows_mut().into_iter().zip(&self.transitions) {
            row.assign(&ndarray::ArrayView1::from(field(t).as_slice()));
        }
        m
    }

    /// Episodes as contiguous slices delimited by `done`.
    pub fn episodes(&self) -> impl Iterator<Item = &[Transition]> {
        self.transitions.split_inclusive(|t| t.done)
    }

    pub fn episode_stats(&self) -> Vec<EpisodeStats> {
        self.episodes()
            .map(|ep| EpisodeStats {
                episodic_return: ep.iter().map(|t| t.reward).sum(),
                episodic_cost: ep.iter().map(|t| t.cost).sum(),
                length: ep.len(),
            })
            .collect()
    }

    pub fn initial_states(&self) -> Vec<Vec<f64>> {
        self.episodes().map(|ep| ep[0].state.clone()).collect()
    }

    /// Episode-level `(R_min, R_max)`.
    pub fn return_range(&self) -> Result<(f64, f64)> {
        let stats = self.episode_stats();
        if stats.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let lo = stats
            .iter()
            .map(|s| s.episodic_return)
            .fold(f64::INFINITY, f64::min);
        let hi = stats
            .iter()
            .map(|s| s.episodic_return)
            .fold(f64::NEG_INFINITY, f64::max);
        Ok((lo, hi))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        w.write_record(["state", "action", "reward", "next_state", "cost", "done"])?;
        for t in &self.transitions {
            w.write_record([
                join(&t.state),
                join(&t.action),
                t.reward.to_string(),
                join(&t.next_state),
                t.cost.to_string(),
                if t.done { "1".into() } else { "0".into() },
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != ["state", "action", "reward", "next_state", "cost", "done"] {
            return Err(Error::Parse {
                context: path.display().to_string(),
                reason: format!("unexpected header {header:?}"),
            });
        }
        let mut out = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let err = |what: &str| Error::Parse {
                context: format!("{} row {}", path.display(), i + 1),
                reason: format!("bad {what}"),
            };
            let scalar = |j: usize, what: &str| rec[j].trim().parse::<f64>().map_err(|_| err(what));
            out.push(Transition {
                state: split(&rec[0]).ok_or_else(|| err("state"))?,
                action: split(&rec[1]).ok_or_else(|| err("action"))?,
                reward: scalar(2, "reward")?,
                next_state: split(&rec[3]).ok_or_else(|| err("next_state"))?,
                cost: scalar(4, "cost")?,
                done: match rec[5].trim() {
                    "1" | "true" => true,
                    "0" | "false" => false,
                    _ => return Err(err("done")),
                },
            });
        }
        Self::new(out)
    }
}

fn join(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

fn split(s: &str) -> Option<Vec<f64>> {
    s.split(';').map(|p| p.trim().parse().ok()).collect()
}

/// Runs `n_episodes` episodes of `horizon` steps each. The same seed always
/// produces the same dataset.
pub fn rollout<E: Environment, A: Actor + ?Sized>(
    env: &mut E,
    actor: &mut A,
    n_episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<(Dataset, Vec<EpisodeStats>)> {
    if n_episodes == 0 {
        return Err(Error::invalid("n_episodes", "must be at least 1"));
    }
    if horizon == 0 {
        return Err(Error::invalid("horizon", "must be at least 1"));
    }
    let mut rng = SimRng::seed_from_u64(seed);
    let mut transitions = Vec::with_capacity(n_episodes * horizon);
    let mut stats = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let mut state = env.reset(&mut rng);
        actor.begin_episode(&mut rng);
        let mut ep = EpisodeStats {
            episodic_return: 0.0,
            episodic_cost: 0.0,
            length: 0,
        };
        for t in 0..horizon {
            let action = actor.act(&state, &mut rng);
            let step = env.step(&action, &mut rng);
            ep.episodic_return += step.reward;
            ep.episodic_cost += step.cost;
            ep.length += 1;
            transitions.push(Transition {
                state: std::mem::replace(&mut state, step.next_state.clone()),
                action,
                reward: step.reward,
                next_state: step.next_state,
                cost: step.cost,
                done: t + 1 == horizon,
            });
        }
        stats.push(ep);
    }
    Ok((Dataset::new(transitions)?, stats))
}

/// Evaluation-only rollouts: episode statistics without storing transitions.
pub fn evaluate<E: Environment, A: Actor + ?Sized>(
    env: &mut E,
    actor: &mut A,
    n_episodes: usize,
    horizon: usize,
    rng: &mut SimRng,
) -> Vec<EpisodeStats> {
    (0..n_episodes)
        .map(|_| {
            let mut state = env.reset(rng);
            actor.begin_episode(rng);
            let mut ep = EpisodeStats {
                episodic_return: 0.0,
                episodic_cost: 0.0,
                length: horizon,
            };
            for _ in 0..horizon {
                let action = actor.act(&state, rng);
                let step = env.step(&action, rng);
                ep.episodic_return += step.reward;
                ep.episodic_cost += step.cost;
                state = step.next_state;
            }
            ep
        })
        .collect()
}

/// `(R - R_min) / (R_max - R_min)`.
pub fn normalized_return(ret: f64, r_min: f64, r_max: f64) -> Result<f64> {
    if !(r_max > r_min) {
        return Err(Error::invalid(
            "return range",
            format!("R_max ({r_max}) must exceed R_min ({r_min})"),
        ));
    }
    Ok((ret - r_min) / (r_max - r_min))
}

/// `(C - C_min) / (l + eps)`; at most 1 means the episode was safe.
pub fn normalized_cost(cost: f64, c_min: f64, limit: f64, eps: f64) -> Result<f64> {
    if !(limit + eps > 0.0) {
        return Err(Error::invalid(
            "cost limit",
            format!("l + eps = {} must be positive", limit + eps),
        ));
    }
    Ok((cost - c_min) / (limit + eps))
}
