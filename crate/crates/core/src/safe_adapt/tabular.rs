//! Softmax natural policy gradient on tabular CMDPs with the region switch,
//! used to check the convergence and safety bounds with exact critics.

use serde::Serialize;

use crate::cmdp::{kl_divergence, Signal, TabularCmdp, TabularPolicy};
use crate::error::{Error, Result};

use super::region::{safe_adaptation, RegionLog};

/// Logit table `theta(s, a)` with `pi(a|s)` the row softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxTabularPolicy {
    n_states: usize,
    n_actions: usize,
    logits: Vec<f64>,
}

impl SoftmaxTabularPolicy {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            logits: vec![0.0; n_states * n_actions],
        }
    }

    pub fn from_logits(n_states: usize, n_actions: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != n_states * n_actions || n_actions == 0 {
            return Err(Error::invalid("logits", "table has the wrong size"));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("logits", "entries must be finite"));
        }
        Ok(Self {
            n_states,
            n_actions,
            logits,
        })
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn policy(&self) -> TabularPolicy {
        let a_n = self.n_actions;
        let mut probs = Vec::with_capacity(self.logits.len());
        for row in self.logits.chunks(a_n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            probs.extend(e.iter().map(|x| x / z));
        }
        TabularPolicy::new(self.n_states, a_n, probs).expect("softmax rows are distributions")
    }

    /// `theta <- theta + eta * q / (1 - gamma)`, i.e.
    /// `pi' ∝ pi * exp(eta * q / (1 - gamma))` row by row.
    pub fn npg_update(&mut self, q: &[f64], eta: f64, gamma: f64) -> Result<()> {
        crate::error::check_dim("q table", self.logits.len(), q.len())?;
        if q.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("q table", "entries must be finite"));
        }
        let k = eta / (1.0 - gamma);
        for (row_t, row_q) in self
            .logits
            .chunks_mut(self.n_actions)
            .zip(q.chunks(self.n_actions))
        {
            for (t, v) in row_t.iter_mut().zip(row_q) {
                *t += k * v;
            }
            // keep logits bounded; the softmax is shift invariant
            let m = row_t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row_t.iter_mut().for_each(|t| *t -= m);
        }
        Ok(())
    }
}

/// Result of one NPG run with region switching.
#[derive(Debug, Clone)]
pub struct TabularRun {
    pub log: RegionLog,
    pub iterates: Vec<TabularPolicy>,
    pub final_policy: TabularPolicy,
    /// `None` when every iterate has zero weight.
    pub weighted: Option<TabularPolicy>,
}

/// Runs `iterations` NPG steps from `init`. Reward and cost directions in
/// logit space are the advantages `A_r/(1-gamma)` and `-A_c/(1-gamma)`; the
/// region test uses the exact discounted cost value from the initial
/// distribution.
pub fn run_tabular(
    cmdp: &TabularCmdp,
    init: &SoftmaxTabularPolicy,
    iterations: usize,
    eta: f64,
    h_plus: f64,
    h_minus: f64,
) -> Result<TabularRun> {
    let gamma = cmdp.gamma();
    let scale = 1.0 / (1.0 - gamma);
    let mut current = init.clone();
    let mut log = RegionLog::default();
    let mut iterates = Vec::with_capacity(iterations);
    for t in 0..iterations {
        let pi = current.policy();
        let g_r: Vec<f64> = cmdp
            .advantage(&pi, Signal::Reward)?
            .iter()
            .map(|a| a * scale)
            .collect();
        let g_c: Vec<f64> = cmdp
            .advantage(&pi, Signal::Cost)?
            .iter()
            .map(|a| -a * scale)
            .collect();
        let v_c = cmdp.value(&pi, Signal::Cost)?;
        let v_r = cmdp.value(&pi, Signal::Reward)?;
        let adapted = safe_adaptation(&g_r, &g_c, v_c, cmdp.cost_limit(), h_plus, h_minus)?;
        log.push(t, &adapted, v_c, v_r);
        // direction already carries the 1/(1-gamma) factor
        current.npg_update(&adapted.direction, eta, 0.0)?;
        iterates.push(pi);
    }
    let weights = log.weights();
    let weighted = if weights.iter().sum::<f64>() > 0.0 {
        Some(TabularPolicy::mixture(&iterates, &weights)?)
    } else {
        None
    };
    Ok(TabularRun {
        log,
        iterates,
        final_policy: current.policy(),
        weighted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SlackMode {
    Fixed {
        h_plus: f64,
        h_minus: f64,
    },
    /// `h+ = 2 sqrt(|S||A| / ((1-gamma)^3 T)) (eps_dist + 4M^2 + 6M)`, `h- = 0`.
    Auto,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessConfig {
    pub iterations: Vec<usize>,
    /// Step size is `eta0 / sqrt(T)`.
    pub eta0: f64,
    pub slack: SlackMode,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            iterations: vec![50, 200, 800],
            eta0: 1.0,
            slack: SlackMode::Fixed {
                h_plus: 0.05,
                h_minus: 0.05,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HarnessRow {
    pub iterations: usize,
    pub eta: f64,
    pub h_plus: f64,
    pub h_minus: f64,
    /// Gap and violation of the weighted policy; `None` when degenerate.
    pub gap_weighted: Option<f64>,
    pub violation_weighted: Option<f64>,
    pub gap_final: f64,
    pub violation_final: f64,
    pub degenerate: bool,
    pub safe: usize,
    pub unsafe_: usize,
    pub align: usize,
    pub conflict: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HarnessReport {
    pub optimum_reward: f64,
    pub optimum_cost: f64,
    pub cost_limit: f64,
    pub rows: Vec<HarnessRow>,
}

impl HarnessReport {
    pub fn to_table(&self) -> String {
        let fmt = |x: Option<f64>| x.map_or("degenerate".to_string(), |v| format!("{v:.6}"));
        let mut out = format!(
            "optimum V_r = {:.6}, V_c = {:.6}, limit = {:.6}\n{:>6} {:>9} {:>9} {:>12} {:>12} {:>12} {:>12}  regions s/u/a/c\n",
            self.optimum_reward, self.optimum_cost, self.cost_limit, "T", "eta", "h_plus", "gap_mix", "viol_mix", "gap_last", "viol_last"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:>6} {:>9.5} {:>9.5} {:>12} {:>12} {:>12.6} {:>12.6}  {}/{}/{}/{}\n",
                r.iterations,
                r.eta,
                r.h_plus,
                fmt(r.gap_weighted),
                fmt(r.violation_weighted),
                r.gap_final,
                r.violation_final,
                r.safe,
                r.unsafe_,
                r.align,
                r.conflict
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `max_s KL(pi*(.|s) || pi0(.|s))`, finite whenever `pi0` has full support.
pub fn distribution_shift(optimum: &TabularPolicy, init: &TabularPolicy) -> Result<f64> {
    let mut worst = 0.0f64;
    for s in 0..optimum.n_states() {
        let kl = kl_divergence(optimum.row(s), init.row(s))
            .ok_or_else(|| Error::invalid("initial policy", "must have full support"))?;
        worst = worst.max(kl);
    }
    Ok(worst)
}

pub fn auto_slack(cmdp: &TabularCmdp, iterations: usize, eps_dist: f64) -> f64 {
    let g = 1.0 - cmdp.gamma();
    let m = cmdp.reward_max().max(cmdp.cost_max());
    let size = (cmdp.n_states() * cmdp.n_actions()) as f64;
    2.0 * (size / (g.powi(3) * iterations as f64)).sqrt() * (eps_dist + 4.0 * m * m + 6.0 * m)
}

/// Runs the NPG loop from the uniform policy for each horizon in
/// `cfg.iterations` and compares against the exact constrained optimum.
pub fn tabular_theorem_harness(cmdp: &TabularCmdp, cfg: &HarnessConfig) -> Result<HarnessReport> {
    if cfg.iterations.is_empty() || cfg.iterations.contains(&0) {
        return Err(Error::config(
            "iterations",
            "must be a non-empty list of positive counts",
        ));
    }
    if !(cfg.eta0 > 0.0) {
        return Err(Error::config("eta0", "must be positive"));
    }
    let optimum = cmdp
        .constrained_optimum()?
        .ok_or_else(|| Error::invalid("cmdp", "constraint is infeasible"))?;
    let init = SoftmaxTabularPolicy::uniform(cmdp.n_states(), cmdp.n_actions());
    let eps_dist = distribution_shift(&optimum.policy, &init.policy())?;
    let limit = cmdp.cost_limit();
    let mut rows = Vec::new();
    for &t in &cfg.iterations {
        let eta = cfg.eta0 / (t as f64).sqrt();
        let (h_plus, h_minus) = match cfg.slack {
            SlackMode::Fixed { h_plus, h_minus } => (h_plus, h_minus),
            SlackMode::Auto => (auto_slack(cmdp, t, eps_dist), 0.0),
        };
        let run = run_tabular(cmdp, &init, t, eta, h_plus, h_minus)?;
        let (gap_weighted, violation_weighted) = match &run.weighted {
            Some(p) => (
                Some(optimum.reward_value - cmdp.value(p, Signal::Reward)?),
                Some(cmdp.value(p, Signal::Cost)? - limit),
            ),
            None => (None, None),
        };
        let [safe, unsafe_, align, conflict] = run.log.counts();
        rows.push(HarnessRow {
            iterations: t,
            eta,
            h_plus,
            h_minus,
            gap_weighted,
            violation_weighted,
            gap_final: optimum.reward_value - cmdp.value(&run.final_policy, Signal::Reward)?,
            violation_final: cmdp.value(&run.final_policy, Signal::Cost)? - limit,
            degenerate: run.weighted.is_none(),
            safe,
            unsafe_,
            align,
            conflict,
        });
    }
    Ok(HarnessReport {
        optimum_reward: optimum.reward_value,
        optimum_cost: optimum.cost_value,
        cost_limit: limit,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn npg_closed_form_single_state() {
        let mut p = SoftmaxTabularPolicy::uniform(1, 2);
        p.npg_update(&[1.0, 0.0], 0.5, 0.5).unwrap();
        let e = std::f64::consts::E;
        assert!((p.policy().prob(0, 0) - e / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn npg_invariances() {
        let mut p =
            SoftmaxTabularPolicy::from_logits(2, 3, vec![0.1, -0.4, 0.9, 0.0, 1.0, 2.0]).unwrap();
        let before = p.policy();
        p.npg_update(&[3.0, 3.0, 3.0, -1.0, -1.0, -1.0], 0.7, 0.9)
            .unwrap();
        let after = p.policy();
        for (a, b) in before.probs().iter().zip(after.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
        p.npg_update(&[1.0, 5.0, -2.0, 0.3, 0.2, 0.1], 0.0, 0.9)
            .unwrap();
        assert_eq!(p.policy(), after);
        assert!(p.npg_update(&[f64::NAN; 6], 0.1, 0.9).is_err());
    }

    #[test]
    fn reward_steps_never_decrease_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let cmdp = TabularCmdp::random(&mut rng, 5, 3, 0.9);
            let mut p = SoftmaxTabularPolicy::uniform(5, 3);
            let mut v = cmdp.value(&p.policy(), Signal::Reward).unwrap();
            for _ in 0..30 {
                let q = cmdp.evaluate_q(&p.policy(), Signal::Reward).unwrap();
                p.npg_update(&q, 0.05, cmdp.gamma()).unwrap();
                let v2 = cmdp.value(&p.policy(), Signal::Reward).unwrap();
                assert!(v2 >= v - 1e-12, "{v2} < {v}");
                v = v2;
            }
        }
    }

    #[test]
    fn infinite_limit_is_all_safe_and_zero_limit_all_unsafe() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cmdp = TabularCmdp::random(&mut rng, 4, 2, 0.9);
        let init = SoftmaxTabularPolicy::uniform(4, 2);
        let run = run_tabular(
            &cmdp.clone().with_cost_limit(f64::INFINITY),
            &init,
            20,
            0.1,
            0.0,
            0.0,
        )
        .unwrap();
        assert_eq!(run.log.counts(), [20, 0, 0, 0]);
        assert!(run.weighted.is_some());
        let run = run_tabular(&cmdp.with_cost_limit(0.0), &init, 20, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(run.log.counts(), [0, 20, 0, 0]);
        assert!(run.weighted.is_none());
    }
}
