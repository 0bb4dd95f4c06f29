//! Diagonal Gaussian policies and the reverse-KL gradient against a
//! score-only behaviour model.
//!
//! Actions are reparameterised as `a = m(s) + sqrt(var(s)) * z`. With a
//! state-dependent variance the network emits `2d` values: the mean, then the
//! pre-activations of `var = softplus(raw) + 1e-6`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{Actor, SimRng};
use crate::error::{check_dim, Error, Result};
use crate::mlp::{self, Mlp};

pub const MIN_VARIANCE: f64 = 1e-6;
pub const DIRAC_STD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Variance {
    /// Network-predicted diagonal.
    State,
    /// Fixed `std^2 I`, not learned.
    Constant { std: f64 },
}

impl Variance {
    pub fn near_dirac() -> Self {
        Variance::Constant { std: DIRAC_STD }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub net: Mlp,
    variance: Variance,
    action_dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PolicyCheckpoint {
    format: String,
    version: u32,
    variance: Variance,
    action_dim: usize,
    net: mlp::Checkpoint,
}

/// Reverse-KL gradient estimate with per-coordinate Monte-Carlo standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct KlGradient {
    pub grad: Vec<f64>,
    pub std_err: Vec<f64>,
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        variance: Variance,
        rng: &mut R,
    ) -> Result<Self> {
        let mut widths = vec![state_dim];
        widths.extend_from_slice(hidden);
        widths.push(Self::out_dim(variance, action_dim));
        Self::from_net(Mlp::new(&widths, rng)?, variance, action_dim)
    }

    fn out_dim(variance: Variance, action_dim: usize) -> usize {
        match variance {
            Variance::State => 2 * action_dim,
            Variance::Constant { .. } => action_dim,
        }
    }

    pub fn from_net(net: Mlp, variance: Variance, action_dim: usize) -> Result<Self> {
        if let Variance::Constant { std } = variance {
            if !(std * std >= MIN_VARIANCE) || !std.is_finite() {
                return Err(Error::invalid(
                    "policy std",
                    format!("{std} gives variance below {MIN_VARIANCE}"),
                ));
            }
        }
        check_dim(
            "policy output",
            Self::out_dim(variance, action_dim),
            net.output_dim(),
        )?;
        Ok(Self {
            net,
            variance,
            action_dim,
        })
    }

    pub fn variance_kind(&self) -> Variance {
        self.variance
    }

    pub fn state_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn n_params(&self) -> usize {
        self.net.n_params()
    }

    /// Row-wise mean and diagonal variance.
    pub fn distribution(&self, states: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let out = self.net.forward(states)?;
        Ok(self.split(&out))
    }

    fn split(&self, out: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let d = self.action_dim;
        let mean = out.slice(s![.., ..d]).to_owned();
        let var = match self.variance {
            Variance::State => out.slice(s![.., d..]).mapv(|r| softplus(r) + MIN_VARIANCE),
            Variance::Constant { std } => Array2::from_elem(mean.dim(), std * std),
        };
        (mean, var)
    }

    pub fn mean_one(&self, state: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.net.forward_one(state)?;
        out.truncate(self.action_dim);
        Ok(out)
    }

    /// `1/2 log det Sigma + d/2 log 2pi + d/2` per row.
    pub fn entropy(&self, states: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let (_, var) = self.distribution(states)?;
        let d = self.action_dim as f64;
        Ok(var
            .rows()
            .into_iter()
            .map(|v| {
                0.5 * v.iter().map(|x| x.ln()).sum::<f64>() + 0.5 * d * (2.0 * PI).ln() + 0.5 * d
            })
            .collect())
    }

    pub fn log_prob(
        &self,
        states: ArrayView2<'_, f64>,
        actions: ArrayView2<'_, f64>,
    ) -> Result<Vec<f64>> {
        check_dim("actions", self.action_dim, actions.ncols())?;
        check_dim("batch rows", states.nrows(), actions.nrows())?;
        let (mean, var) = self.distribution(states)?;
        Ok((0..states.nrows())
            .map(|i| {
                (0..self.action_dim)
                    .map(|k| {
                        let v = var[[i, k]];
                        -0.5 * ((actions[[i, k]] - mean[[i, k]]).powi(2) / v
                            + v.ln()
                            + (2.0 * PI).ln())
                    })
                    .sum()
            })
            .collect())
    }

    /// Reparameterised samples; returns `(actions, z)`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        states: ArrayView2<'_, f64>,
        rng: &mut R,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let (mean, var) = self.distribution(states)?;
        let z = Array2::from_shape_fn(mean.dim(), |_| StandardNormal.sample(rng));
        Ok((self.reparam(&mean, &var, &z), z))
    }

    fn reparam(&self, mean: &Array2<f64>, var: &Array2<f64>, z: &Array2<f64>) -> Array2<f64> {
        mean + &(var.mapv(f64::sqrt) * z)
    }

    /// Actions for fixed noise `z`, i.e. `m(s) + sqrt(var(s)) z`.
    pub fn actions_for(
        &self,
        states: ArrayView2<'_, f64>,
        z: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        let (mean, var) = self.distribution(states)?;
        check_dim("noise", mean.len(), z.len())?;
        Ok(self.reparam(&mean, &var, &z.to_owned()))
    }

    /// Parameter gradient of `sum_i <upstream_i, a_i>` where `a_i` is the
    /// reparameterised action for state row `i` and noise `z_i`.
    pub fn reparam_backward(
        &self,
        states: ArrayView2<'_, f64>,
        z: ArrayView2<'_, f64>,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<Vec<f64>> {
        check_dim("noise rows", states.nrows(), z.nrows())?;
        check_dim("upstream rows", states.nrows(), upstream.nrows())?;
        check_dim("upstream width", self.action_dim, upstream.ncols())?;
        let trace = self.net.forward_trace(states)?;
        let d = self.action_dim;
        let mut up = Array2::zeros(trace.output().dim());
        up.slice_mut(s![.., ..d]).assign(&upstream);
        if self.variance == Variance::State {
            let raw = trace.output().slice(s![.., d..]).to_owned();
            for i in 0..states.nrows() {
                for k in 0..d {
                    let std = (softplus(raw[[i, k]]) + MIN_VARIANCE).sqrt();
                    up[[i, d + k]] =
                        upstream[[i, k]] * z[[i, k]] * sigmoid(raw[[i, k]]) / (2.0 * std);
                }
            }
        }
        Ok(self.net.backward(&trace, up.view())?.0)
    }

    /// Gradient of `sum_i 1/2 log det Sigma(s_i)`; zero for fixed variance.
    pub fn logdet_grad(&self, states: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        if let Variance::Constant { .. } = self.variance {
            return Ok(vec![0.0; self.n_params()]);
        }
        let trace = self.net.forward_trace(states)?;
        let d = self.action_dim;
        let out = trace.output();
        let mut up = Array2::zeros(out.dim());
        for i in 0..states.nrows() {
            for k in 0..d {
                let raw = out[[i, d + k]];
                up[[i, d + k]] = 0.5 * sigmoid(raw) / (softplus(raw) + MIN_VARIANCE);
            }
        }
        Ok(self.net.backward(&trace, up.view())?.0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = PolicyCheckpoint {
            format: "drcorl-policy".into(),
            version: 1,
            variance: self.variance,
            action_dim: self.action_dim,
            net: self.net.to_checkpoint(),
        };
        fs::write(path, serde_json::to_string(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let ckpt: PolicyCheckpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        if ckpt.format != "drcorl-policy" || ckpt.version != 1 {
            return Err(Error::Parse {
                context: path.display().to_string(),
                reason: "not a version-1 policy checkpoint".into(),
            });
        }
        Self::from_net(
            Mlp::from_checkpoint(ckpt.net)?,
            ckpt.variance,
            ckpt.action_dim,
        )
    }
}

/// Monte-Carlo estimate of the gradient of `KL(pi || mu)` summed over the
/// given states, where only the score `grad_a log mu(a | s)` is available:
/// `E_z[-score(a) . da/dtheta] - 1/2 grad log det Sigma`.
pub fn reverse_kl_grad<R: Rng + ?Sized>(
    policy: &GaussianPolicy,
    score: &dyn Fn(ArrayView2<'_, f64>, ArrayView2<'_, f64>) -> Result<Array2<f64>>,
    states: ArrayView2<'_, f64>,
    n_mc: usize,
    rng: &mut R,
) -> Result<KlGradient> {
    if n_mc == 0 {
        return Err(Error::invalid("n_mc", "must be at least 1"));
    }
    let n = policy.n_params();
    let mut sum = vec![0.0; n];
    let mut sum_sq = vec![0.0; n];
    for _ in 0..n_mc {
        let (a, z) = policy.sample(states, rng)?;
        let up = -score(a.view(), states)?;
        let g = policy.reparam_backward(states, z.view(), up.view())?;
        for j in 0..n {
            sum[j] += g[j];
            sum_sq[j] += g[j] * g[j];
        }
    }
    let m = n_mc as f64;
    let ld = policy.logdet_grad(states)?;
    let grad = (0..n).map(|j| sum[j] / m - ld[j]).collect();
    let std_err = (0..n)
        .map(|j| {
            let mean = sum[j] / m;
            let var = (sum_sq[j] / m - mean * mean).max(0.0) * m / (m - 1.0).max(1.0);
            (var / m).sqrt()
        })
        .collect();
    Ok(KlGradient { grad, std_err })
}

/// Acts with the policy mean (deterministic evaluation).
pub struct MeanActor<'a>(pub &'a GaussianPolicy);

impl Actor for MeanActor<'_> {
    fn act(&mut self, state: &[f64], _rng: &mut SimRng) -> Vec<f64> {
        self.0
            .mean_one(state)
            .expect("state dimension matches the policy")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// One-parameter policy with mean equal to its single bias.
    fn mean_only(m: f64, std: f64) -> GaussianPolicy {
        let net = Mlp::from_params(&[1, 1], vec![0.0, m]).unwrap();
        GaussianPolicy::from_net(net, Variance::Constant { std }, 1).unwrap()
    }

    #[test]
    fn entropy_values() {
        let s = Array2::zeros((1, 1));
        let e1 = mean_only(0.0, 1.0).entropy(s.view()).unwrap()[0];
        assert!((e1 - 1.418939).abs() < 5e-7);
        let e2 = mean_only(0.0, 2.0).entropy(s.view()).unwrap()[0];
        assert!((e2 - e1 - 2f64.ln()).abs() < 1e-12);
        let net = Mlp::from_params(&[1, 2], vec![0.0; 4]).unwrap();
        let p = GaussianPolicy::from_net(net, Variance::Constant { std: 1.0 }, 2).unwrap();
        assert!((p.entropy(s.view()).unwrap()[0] - 2.837877).abs() < 5e-7);
    }

    #[test]
    fn log_prob_at_mean_and_normalisation() {
        let p = mean_only(0.3, 1.0);
        let s = Array2::zeros((1, 1));
        let lp = p
            .log_prob(s.view(), Array2::from_elem((1, 1), 0.3).view())
            .unwrap()[0];
        assert!((lp + 0.918939).abs() < 5e-7);
        // trapezoid quadrature over +-10 sd
        let p = mean_only(0.3, 0.7);
        let n = 4001;
        let grid: Vec<f64> = (0..n)
            .map(|i| 0.3 - 7.0 + 14.0 * i as f64 / (n - 1) as f64)
            .collect();
        let a = Array2::from_shape_vec((n, 1), grid).unwrap();
        let lps = p.log_prob(Array2::zeros((n, 1)).view(), a.view()).unwrap();
        let h = 14.0 / (n - 1) as f64;
        let mass: f64 = lps.iter().map(|l| l.exp()).sum::<f64>() * h;
        assert!((mass - 1.0).abs() < 0.01);
    }

    #[test]
    fn sample_mean_matches() {
        let p = mean_only(0.8, 1.0);
        let (a, _) = p
            .sample(Array2::zeros((10_000, 1)).view(), &mut rng(1))
            .unwrap();
        assert!((a.mean().unwrap() - 0.8).abs() < 0.05);
        let (b, _) = p
            .sample(Array2::zeros((10_000, 1)).view(), &mut rng(1))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn state_variance_is_bounded_below() {
        let net = Mlp::from_params(&[1, 2], vec![0.0, 0.0, 0.0, -1e3]).unwrap();
        let p = GaussianPolicy::from_net(net, Variance::State, 1).unwrap();
        let (_, v) = p.distribution(Array2::zeros((1, 1)).view()).unwrap();
        assert!(v[[0, 0]] >= MIN_VARIANCE);
        assert!(GaussianPolicy::from_net(
            Mlp::zeros(&[1, 1]).unwrap(),
            Variance::Constant { std: 0.0 },
            1
        )
        .is_err());
    }

    #[test]
    fn logdet_grad_matches_entropy_differences() {
        let p = GaussianPolicy::new(2, 2, &[5], Variance::State, &mut rng(3)).unwrap();
        let s = Array2::from_shape_vec((3, 2), vec![0.1, -0.4, 1.0, 0.3, -0.7, 0.2]).unwrap();
        let g = p.logdet_grad(s.view()).unwrap();
        let h = 1e-6;
        for j in 0..p.n_params() {
            let mut q = p.clone();
            q.net.params_mut()[j] += h;
            let up: f64 = q.entropy(s.view()).unwrap().iter().sum();
            q.net.params_mut()[j] -= 2.0 * h;
            let down: f64 = q.entropy(s.view()).unwrap().iter().sum();
            assert!((g[j] - (up - down) / (2.0 * h)).abs() < 1e-6, "param {j}");
        }
        // fixed variance contributes nothing
        let c =
            GaussianPolicy::new(2, 2, &[5], Variance::Constant { std: 0.5 }, &mut rng(3)).unwrap();
        assert!(c.logdet_grad(s.view()).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn reparam_backward_matches_finite_differences() {
        let p = GaussianPolicy::new(1, 2, &[4], Variance::State, &mut rng(4)).unwrap();
        let s = Array2::from_shape_vec((2, 1), vec![0.5, -1.0]).unwrap();
        let z = Array2::from_shape_vec((2, 2), vec![0.3, -1.2, 0.8, 0.1]).unwrap();
        let up = Array2::from_shape_vec((2, 2), vec![1.0, -0.5, 0.25, 2.0]).unwrap();
        let g = p.reparam_backward(s.view(), z.view(), up.view()).unwrap();
        let f = |q: &GaussianPolicy| (q.actions_for(s.view(), z.view()).unwrap() * &up).sum();
        for j in 0..p.n_params() {
            let mut q = p.clone();
            q.net.params_mut()[j] += 1e-6;
            let a = f(&q);
            q.net.params_mut()[j] -= 2e-6;
            let b = f(&q);
            assert!((g[j] - (a - b) / 2e-6).abs() < 1e-6);
        }
    }

    #[test]
    fn kl_gradient_for_standard_normal_target() {
        let score = |a: ArrayView2<'_, f64>, _s: ArrayView2<'_, f64>| Ok(-a.to_owned());
        let s = Array2::zeros((1, 1));
        for m in [0.0, 0.5] {
            let p = mean_only(m, 1.0);
            let g = reverse_kl_grad(&p, &score, s.view(), 1024, &mut rng(5)).unwrap();
            // bias gradient is d/dm KL = m
            assert!((g.grad[1] - m).abs() < 0.05, "m={m} grad {}", g.grad[1]);
        }
        assert!(reverse_kl_grad(&mean_only(0.0, 1.0), &score, s.view(), 0, &mut rng(5)).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = GaussianPolicy::new(3, 1, &[6], Variance::State, &mut rng(6)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        p.save(&path).unwrap();
        assert_eq!(GaussianPolicy::load(&path).unwrap(), p);
    }
}
