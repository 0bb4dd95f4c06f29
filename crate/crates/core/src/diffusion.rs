//! Variance-preserving discrete diffusion over actions, conditioned on state.
//!
//! Timesteps are 1-based: `t = 1` is the least noisy level, `t = T` the most.
//! The denoiser sees `[a_t | t/T, sin(pi t/T), cos(pi t/T) | s]`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::mlp::{self, Adam, AdamConfig, Mlp};

pub const EMBED_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// `beta_t = 0.02`
    Constant,
    /// `beta_t = 0.01 sqrt(t)`
    Sqrt,
    /// `beta_t = 0.01 t + 0.04`
    Linear,
}

impl ScheduleKind {
    pub fn beta(self, t: usize) -> f64 {
        let t = t as f64;
        let b = match self {
            ScheduleKind::Constant => 0.02,
            ScheduleKind::Sqrt => 0.01 * t.sqrt(),
            ScheduleKind::Linear => 0.01 * t + 0.04,
        };
        b.clamp(1e-6, 0.999)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        Self::from_betas((1..=steps).map(|t| kind.beta(t)).collect())
    }

    /// Any per-step noise levels in `[0, 1)`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Empty("noise schedule"));
        }
        if let Some(b) = beta.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(Error::invalid(
                "noise schedule",
                format!("beta {b} outside [0, 1)"),
            ));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let beta_bar = alpha_bar.iter().map(|a| 1.0 - a).collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            beta_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Timestep {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn beta_bar(&self, t: usize) -> f64 {
        self.beta_bar[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn embed(&self, t: usize) -> [f64; EMBED_DIM] {
        let u = t as f64 / self.steps() as f64;
        [u, (PI * u).sin(), (PI * u).cos()]
    }
}

fn normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `a_t = sqrt(abar_t) a0 + sqrt(1 - abar_t) eps`; returns `(a_t, eps)`.
pub fn noise_action<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    a0: &[f64],
    t: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    schedule.check_t(t)?;
    let eps = normal_vec(a0.len(), rng);
    let (ka, ke) = (schedule.alpha_bar(t).sqrt(), schedule.beta_bar(t).sqrt());
    let at = a0.iter().zip(&eps).map(|(a, e)| ka * a + ke * e).collect();
    Ok((at, eps))
}

/// Noise-prediction network `eps(a_t, t | s)` bundled with its schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub net: Mlp,
    pub schedule: NoiseSchedule,
    state_dim: usize,
    action_dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DenoiserCheckpoint {
    format: String,
    version: u32,
    state_dim: usize,
    action_dim: usize,
    betas: Vec<f64>,
    net: mlp::Checkpoint,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        schedule: NoiseSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        let mut widths = vec![action_dim + EMBED_DIM + state_dim];
        widths.extend_from_slice(hidden);
        widths.push(action_dim);
        Self::from_net(Mlp::new(&widths, rng)?, schedule, state_dim, action_dim)
    }

    pub fn from_net(
        net: Mlp,
        schedule: NoiseSchedule,
        state_dim: usize,
        action_dim: usize,
    ) -> Result<Self> {
        check_dim(
            "denoiser input",
            action_dim + EMBED_DIM + state_dim,
            net.input_dim(),
        )?;
        check_dim("denoiser output", action_dim, net.output_dim())?;
        Ok(Self {
            net,
            schedule,
            state_dim,
            action_dim,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn input(
        &self,
        a_t: ArrayView2<'_, f64>,
        t: &[usize],
        s: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        check_dim("noised actions", self.action_dim, a_t.ncols())?;
        check_dim("states", self.state_dim, s.ncols())?;
        check_dim("batch rows", a_t.nrows(), s.nrows())?;
        check_dim("timesteps", a_t.nrows(), t.len())?;
        let (d, n) = (self.action_dim, a_t.nrows());
        let mut x = Array2::zeros((n, d + EMBED_DIM + self.state_dim));
        x.slice_mut(s![.., ..d]).assign(&a_t);
        for (i, &ti) in t.iter().enumerate() {
            self.schedule.check_t(ti)?;
            let e = self.schedule.embed(ti);
            for k in 0..EMBED_DIM {
                x[[i, d + k]] = e[k];
            }
        }
        x.slice_mut(s![.., d + EMBED_DIM..]).assign(&s);
        Ok(x)
    }

    /// Predicted noise for a batch.
    pub fn predict(
        &self,
        a_t: ArrayView2<'_, f64>,
        t: &[usize],
        s: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        self.net.forward(self.input(a_t, t, s)?.view())
    }

    pub fn predict_one(&self, a_t: &[f64], t: usize, s: &[f64]) -> Result<Vec<f64>> {
        let a = ArrayView2::from_shape((1, a_t.len()), a_t).unwrap();
        let st = ArrayView2::from_shape((1, s.len()), s).unwrap();
        Ok(self.predict(a, &[t], st)?.into_raw_vec_and_offset().0)
    }

    /// `-eps(a, t | s) / sqrt(1 - abar_t)` row-wise.
    pub fn score(
        &self,
        a: ArrayView2<'_, f64>,
        t: usize,
        s: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        self.schedule.check_t(t)?;
        let bb = self.schedule.beta_bar(t);
        if bb <= 0.0 {
            return Err(Error::ZeroNoise(t));
        }
        let eps = self.predict(a, &vec![t; a.nrows()], s)?;
        Ok(eps * (-1.0 / bb.sqrt()))
    }

    pub fn score_one(&self, a: &[f64], t: usize, s: &[f64]) -> Result<Vec<f64>> {
        let av = ArrayView2::from_shape((1, a.len()), a).unwrap();
        let sv = ArrayView2::from_shape((1, s.len()), s).unwrap();
        Ok(self.score(av, t, sv)?.into_raw_vec_and_offset().0)
    }

    /// Ancestral sampling from `x_T ~ N(0, I)`, one chain per state row.
    /// No noise is added on the final step. Results are clipped to `clip`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        s: ArrayView2<'_, f64>,
        rng: &mut R,
        clip: Option<(f64, f64)>,
    ) -> Result<Array2<f64>> {
        check_dim("states", self.state_dim, s.ncols())?;
        let (n, d) = (s.nrows(), self.action_dim);
        let mut x = Array2::from_shape_vec((n, d), normal_vec(n * d, rng)).unwrap();
        for t in (1..=self.schedule.steps()).rev() {
            let eps = self.predict(x.view(), &vec![t; n], s)?;
            let sch = &self.schedule;
            let coef = sch.beta(t) / sch.beta_bar(t).sqrt();
            let inv = 1.0 / sch.alpha(t).sqrt();
            x = (x - eps * coef) * inv;
            if t > 1 {
                let sd = sch.beta(t).sqrt();
                x.iter_mut().for_each(|v| {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += sd * z
                });
            }
        }
        if let Some((lo, hi)) = clip {
            x.mapv_inplace(|v| v.clamp(lo, hi));
        }
        Ok(x)
    }

    pub fn sample_one<R: Rng + ?Sized>(
        &self,
        s: &[f64],
        rng: &mut R,
        clip: Option<(f64, f64)>,
    ) -> Result<Vec<f64>> {
        let sv = ArrayView2::from_shape((1, s.len()), s).unwrap();
        Ok(self.sample(sv, rng, clip)?.into_raw_vec_and_offset().0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = DenoiserCheckpoint {
            format: "drcorl-denoiser".into(),
            version: 1,
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            betas: self.schedule.betas().to_vec(),
            net: self.net.to_checkpoint(),
        };
        fs::write(path, serde_json::to_string(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let ckpt: DenoiserCheckpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        if ckpt.format != "drcorl-denoiser" || ckpt.version != 1 {
            return Err(Error::Parse {
                context: path.display().to_string(),
                reason: "not a version-1 denoiser checkpoint".into(),
            });
        }
        Self::from_net(
            Mlp::from_checkpoint(ckpt.net)?,
            NoiseSchedule::from_betas(ckpt.betas)?,
            ckpt.state_dim,
            ckpt.action_dim,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Learning rate decays linearly to `adam.lr * final_lr_fraction`.
    pub final_lr_fraction: f64,
    pub seed: u64,
}

impl Default for DenoiserTraining {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 256,
            adam: AdamConfig::default(),
            final_lr_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Minimises `E[w(t) |eps(a_t, t | s) - eps|^2]` over uniformly drawn rows and
/// timesteps. Returns the mini-batch loss of every step.
pub fn train_denoiser(
    denoiser: &mut Denoiser,
    states: ArrayView2<'_, f64>,
    actions: ArrayView2<'_, f64>,
    cfg: &DenoiserTraining,
    weight: &dyn Fn(usize) -> f64,
) -> Result<Vec<f64>> {
    if states.nrows() == 0 {
        return Err(Error::Empty("dataset"));
    }
    check_dim("dataset rows", states.nrows(), actions.nrows())?;
    check_dim("dataset actions", denoiser.action_dim, actions.ncols())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam, denoiser.net.n_params());
    let (b, d, n) = (cfg.batch_size.max(1), denoiser.action_dim, states.nrows());
    let big_t = denoiser.schedule.steps();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let frac = step as f64 / cfg.steps as f64;
        adam.set_lr(cfg.adam.lr * (1.0 - frac * (1.0 - cfg.final_lr_fraction)));
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
        let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=big_t)).collect();
        let s_b = states.select(Axis(0), &idx);
        let a0 = actions.select(Axis(0), &idx);
        let eps = Array2::from_shape_vec((b, d), normal_vec(b * d, &mut rng)).unwrap();
        let mut a_t = Array2::zeros((b, d));
        for i in 0..b {
            let sch = &denoiser.schedule;
            let (ka, ke) = (sch.alpha_bar(ts[i]).sqrt(), sch.beta_bar(ts[i]).sqrt());
            for k in 0..d {
                a_t[[i, k]] = ka * a0[[i, k]] + ke * eps[[i, k]];
            }
        }
        let x = denoiser.input(a_t.view(), &ts, s_b.view())?;
        let trace = denoiser.net.forward_trace(x.view())?;
        let mut up = trace.output() - &eps;
        let mut loss = 0.0;
        for (i, mut row) in up.rows_mut().into_iter().enumerate() {
            let w = weight(ts[i]);
            loss += w * row.iter().map(|r| r * r).sum::<f64>();
            row.mapv_inplace(|r| 2.0 * w * r / b as f64);
        }
        losses.push(loss / b as f64);
        let (grad, _) = denoiser.net.backward(&trace, up.view())?;
        adam.step(denoiser.net.params_mut(), &grad);
    }
    Ok(losses)
}

/// 1-D first-order Wasserstein distance between two equal-size samples.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim("wasserstein samples", a.len(), b.len())?;
    if a.is_empty() {
        return Err(Error::Empty("wasserstein samples"));
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    Ok(x.iter().zip(&y).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn schedule_identities() {
        for kind in [
            ScheduleKind::Constant,
            ScheduleKind::Sqrt,
            ScheduleKind::Linear,
        ] {
            let s = NoiseSchedule::new(kind, 20).unwrap();
            for t in 1..=20 {
                assert!((s.alpha_bar(t) + s.beta_bar(t) - 1.0).abs() < 1e-12);
                let prev = if t == 1 { 1.0 } else { s.alpha_bar(t - 1) };
                assert!((s.alpha_bar(t) - prev * s.alpha(t)).abs() < 1e-12);
                assert!(s.alpha_bar(t) < prev);
            }
        }
        let c = NoiseSchedule::new(ScheduleKind::Constant, 20).unwrap();
        assert!((c.alpha_bar(20) - 0.98f64.powi(20)).abs() < 1e-12);
        let l = NoiseSchedule::new(ScheduleKind::Linear, 20).unwrap();
        assert!((l.beta(3) - 0.07).abs() < 1e-15);
    }

    #[test]
    fn zero_first_beta_keeps_action() {
        let s = NoiseSchedule::from_betas(vec![0.0, 0.5]).unwrap();
        let (at, _) = noise_action(&s, &[0.3, -1.2], 1, &mut rng(0)).unwrap();
        assert_eq!(at, vec![0.3, -1.2]);
        assert!(matches!(
            noise_action(&s, &[0.0], 3, &mut rng(0)),
            Err(Error::Timestep { .. })
        ));
        assert!(matches!(
            noise_action(&s, &[0.0], 0, &mut rng(0)),
            Err(Error::Timestep { .. })
        ));
    }

    #[test]
    fn fully_noised_variance_is_one() {
        let s = NoiseSchedule::from_betas(vec![0.5; 40]).unwrap();
        let mut r = rng(9);
        let xs: Vec<f64> = (0..10_000)
            .map(|_| noise_action(&s, &[3.0], 40, &mut r).unwrap().0[0])
            .collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!((v - 1.0).abs() < 0.05, "variance {v}");
    }

    #[test]
    fn zero_network_gives_zero_score() {
        let sch = NoiseSchedule::new(ScheduleKind::Linear, 20).unwrap();
        let d =
            Denoiser::from_net(Mlp::zeros(&[1 + EMBED_DIM + 2, 8, 1]).unwrap(), sch, 2, 1).unwrap();
        assert_eq!(d.score_one(&[0.7], 5, &[1.0, 2.0]).unwrap(), vec![0.0]);
        let zero = NoiseSchedule::from_betas(vec![0.0, 0.1]).unwrap();
        let d =
            Denoiser::from_net(Mlp::zeros(&[1 + EMBED_DIM + 2, 1]).unwrap(), zero, 2, 1).unwrap();
        assert!(matches!(
            d.score_one(&[0.7], 1, &[1.0, 2.0]),
            Err(Error::ZeroNoise(1))
        ));
    }

    #[test]
    fn reverse_step_preserves_standard_normal() {
        // With the exact predictor for N(0,1) data, eps = sqrt(1-abar_t) x_t, the
        // step mean is x sqrt(1-beta) and variance (1-beta) + beta = 1.
        let sch = NoiseSchedule::new(ScheduleKind::Constant, 20).unwrap();
        for t in 2..=20 {
            let k = (1.0 - sch.beta(t) / sch.beta_bar(t).sqrt() * sch.beta_bar(t).sqrt())
                / sch.alpha(t).sqrt();
            assert!((k * k + sch.beta(t) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weight_leaves_params_unchanged() {
        let sch = NoiseSchedule::new(ScheduleKind::Linear, 20).unwrap();
        let mut d = Denoiser::new(1, 1, &[16], sch, &mut rng(1)).unwrap();
        let before = d.net.params().to_vec();
        let s = Array2::zeros((10, 1));
        let a = Array2::ones((10, 1));
        let cfg = DenoiserTraining {
            steps: 20,
            batch_size: 4,
            ..Default::default()
        };
        let losses = train_denoiser(&mut d, s.view(), a.view(), &cfg, &|_| 0.0).unwrap();
        assert_eq!(losses.len(), 20);
        assert_eq!(d.net.params(), before.as_slice());
        let empty = Array2::zeros((0, 1));
        assert!(train_denoiser(&mut d, empty.view(), empty.view(), &cfg, &|_| 1.0).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let sch = NoiseSchedule::new(ScheduleKind::Linear, 20).unwrap();
        let d = Denoiser::new(1, 2, &[8], sch, &mut rng(2)).unwrap();
        let s = Array2::zeros((5, 1));
        assert_eq!(
            d.sample(s.view(), &mut rng(3), None).unwrap(),
            d.sample(s.view(), &mut rng(3), None).unwrap()
        );
        let clipped = d.sample(s.view(), &mut rng(3), Some((-0.1, 0.1))).unwrap();
        assert!(clipped.iter().all(|v| v.abs() <= 0.1));
    }

    #[test]
    fn checkpoint_round_trip() {
        let sch = NoiseSchedule::new(ScheduleKind::Sqrt, 20).unwrap();
        let d = Denoiser::new(2, 1, &[8, 8], sch, &mut rng(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("den.json");
        d.save(&p).unwrap();
        assert_eq!(Denoiser::load(&p).unwrap(), d);
    }

    #[test]
    fn wasserstein_of_shift() {
        assert!((wasserstein1(&[0.0, 1.0, 2.0], &[2.5, 0.5, 1.5]).unwrap() - 0.5).abs() < 1e-15);
    }
}
