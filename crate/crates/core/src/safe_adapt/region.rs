//! Region switch between reward ascent, gradient combination and cost descent,
//! and the per-iteration log with the mixture weights used in the analysis.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::grad_manip::{combine, norm_sq, Relation};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Reward,
    Combine,
    Cost,
}

/// `estimate <= l - h-` picks reward ascent, `<= l + h+` the combination,
/// anything above the cost step. Both boundaries are inclusive.
pub fn select_branch(estimate: f64, limit: f64, h_plus: f64, h_minus: f64) -> Branch {
    if estimate <= limit - h_minus {
        Branch::Reward
    } else if estimate <= limit + h_plus {
        Branch::Combine
    } else {
        Branch::Cost
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Safe,
    Unsafe,
    Align,
    Conflict,
}

impl Region {
    pub fn as_str(self) -> &'static str {
        match self {
            Region::Safe => "safe",
            Region::Unsafe => "unsafe",
            Region::Align => "align",
            Region::Conflict => "conflict",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Mixture weight of an iterate: 1 (safe), 0 (unsafe), 1/2 (align),
/// `1/2 - <g_r, g_c>/|g_r|^2` (conflict).
pub fn mixture_weight(region: Region, inner: f64, reward_norm_sq: f64) -> f64 {
    match region {
        Region::Safe => 1.0,
        Region::Unsafe => 0.0,
        Region::Align => 0.5,
        Region::Conflict => {
            if reward_norm_sq > 0.0 {
                0.5 - inner / reward_norm_sq
            } else {
                0.5
            }
        }
    }
}

/// Output of one adaptation step.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapted {
    pub direction: Vec<f64>,
    pub region: Region,
    pub inner: f64,
    pub reward_norm_sq: f64,
    pub cost_norm_sq: f64,
}

/// Chooses the update direction from the reward and cost ascent directions
/// given the current cost estimate.
pub fn safe_adaptation(
    g_r: &[f64],
    g_c: &[f64],
    estimate: f64,
    limit: f64,
    h_plus: f64,
    h_minus: f64,
) -> Result<Adapted> {
    let (nr, nc) = (norm_sq(g_r), norm_sq(g_c));
    let inner = crate::grad_manip::dot(g_r, g_c);
    let (direction, region) = match select_branch(estimate, limit, h_plus, h_minus) {
        Branch::Reward => (g_r.to_vec(), Region::Safe),
        Branch::Cost => (g_c.to_vec(), Region::Unsafe),
        Branch::Combine => {
            let c = combine(g_r, g_c)?;
            let region = match c.relation {
                Relation::Aligned => Region::Align,
                Relation::Conflicting => Region::Conflict,
            };
            (c.direction, region)
        }
    };
    Ok(Adapted {
        direction,
        region,
        inner,
        reward_norm_sq: nr,
        cost_norm_sq: nc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionRecord {
    pub step: usize,
    pub region: Region,
    /// Mixture weight of this iterate.
    pub weight: f64,
    /// `1/2 - <g_r, g_c> / (2 |g_r|^2)` and its cost-side analogue, logged in
    /// the conflict region (1/2 in align, 1 or 0 otherwise).
    pub reward_coef: f64,
    pub cost_coef: f64,
    pub inner: f64,
    pub cost_estimate: f64,
    pub reward_value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegionLog {
    pub records: Vec<RegionRecord>,
}

impl RegionLog {
    pub fn push(&mut self, step: usize, a: &Adapted, cost_estimate: f64, reward_value: f64) {
        let half = |n: f64| {
            if n > 0.0 {
                0.5 - a.inner / (2.0 * n)
            } else {
                0.5
            }
        };
        let (reward_coef, cost_coef) = match a.region {
            Region::Safe => (1.0, 0.0),
            Region::Unsafe => (0.0, 1.0),
            Region::Align => (0.5, 0.5),
            Region::Conflict => (half(a.reward_norm_sq), half(a.cost_norm_sq)),
        };
        self.records.push(RegionRecord {
            step,
            region: a.region,
            weight: mixture_weight(a.region, a.inner, a.reward_norm_sq),
            reward_coef,
            cost_coef,
            inner: a.inner,
            cost_estimate,
            reward_value,
        });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Counts in the order safe, unsafe, align, conflict.
    pub fn counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for r in &self.records {
            c[r.region.index()] += 1;
        }
        c
    }

    pub fn weights(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.weight).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}
