//! Slack band and temperature schedules over training progress.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn progress(step: usize, total: usize) -> f64 {
    if total == 0 {
        1.0
    } else {
        (step as f64 / total as f64).min(1.0)
    }
}

/// `(h+, h-)` around the cost limit, optionally decayed linearly to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlackBand {
    pub h_plus: f64,
    pub h_minus: f64,
    pub decay: bool,
}

impl Default for SlackBand {
    fn default() -> Self {
        Self {
            h_plus: 0.2,
            h_minus: 0.2,
            decay: true,
        }
    }
}

impl SlackBand {
    pub fn fixed(h_plus: f64, h_minus: f64) -> Self {
        Self {
            h_plus,
            h_minus,
            decay: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h_plus >= 0.0) {
            return Err(Error::config("h_plus", "must be non-negative"));
        }
        if !(self.h_minus >= 0.0) {
            return Err(Error::config("h_minus", "must be non-negative"));
        }
        Ok(())
    }

    /// `max(0, h0 (1 - step/total))` when decaying, else the initial values.
    pub fn at(&self, step: usize, total: usize) -> (f64, f64) {
        if !self.decay {
            return (self.h_plus, self.h_minus);
        }
        let k = (1.0 - progress(step, total)).max(0.0);
        ((self.h_plus * k).max(0.0), (self.h_minus * k).max(0.0))
    }
}

/// Temperature of the KL regulariser; the regulariser weight is `1/beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BetaSchedule {
    Constant { value: f64 },
    Linear { start: f64, end: f64 },
    Sqrt { start: f64, end: f64 },
}

impl Default for BetaSchedule {
    fn default() -> Self {
        BetaSchedule::Linear {
            start: 0.04,
            end: 1.0,
        }
    }
}

impl BetaSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            BetaSchedule::Constant { value } => value > 0.0,
            BetaSchedule::Linear { start, end } | BetaSchedule::Sqrt { start, end } => {
                start > 0.0 && end > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config("beta", "temperatures must be positive"))
        }
    }

    pub fn at(&self, step: usize, total: usize) -> f64 {
        let p = progress(step, total);
        match *self {
            BetaSchedule::Constant { value } => value,
            BetaSchedule::Linear { start, end } => start + (end - start) * p,
            BetaSchedule::Sqrt { start, end } => start + (end - start) * p.sqrt(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slack_decays_linearly_and_stays_non_negative() {
        let band = SlackBand::default();
        assert_eq!(band.at(0, 100), (0.2, 0.2));
        let (hp, hm) = band.at(50, 100);
        assert!((hp - 0.1).abs() < 1e-15 && (hm - 0.1).abs() < 1e-15);
        assert_eq!(band.at(100, 100), (0.0, 0.0));
        assert_eq!(band.at(150, 100), (0.0, 0.0));
        assert_eq!(SlackBand::fixed(0.3, 0.1).at(99, 100), (0.3, 0.1));
    }

    #[test]
    fn beta_schedules() {
        let lin = BetaSchedule::default();
        assert_eq!(lin.at(0, 10), 0.04);
        assert!((lin.at(10, 10) - 1.0).abs() < 1e-15);
        assert!((lin.at(5, 10) - 0.52).abs() < 1e-15);
        let sq = BetaSchedule::Sqrt {
            start: 0.0 + 1e-3,
            end: 1.0,
        };
        assert!(sq.at(1, 4) > lin.at(1, 4));
        assert_eq!(BetaSchedule::Constant { value: 0.3 }.at(7, 10), 0.3);
        assert!(BetaSchedule::Constant { value: 0.0 }.validate().is_err());
    }
}
