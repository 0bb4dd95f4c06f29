//! Small fully connected networks with hand-written reverse mode.
//!
//! Parameters live in one flat buffer so that optimizers, target-network
//! averaging, gradient manipulation and checkpoints all work on plain
//! `&[f64]` slices. Layer `l` stores its weight as an `in x out` row-major
//! block followed by its `out` biases. Hidden layers use `tanh`; the output
//! layer is the identity.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

const CHECKPOINT_FORMAT: &str = "drcorl-mlp";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward_trace`], consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    /// `layers[0]` is the input; `layers[l]` is the output of layer `l`.
    layers: Vec<Array2<f64>>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        self.layers.last().expect("trace always holds the input")
    }
}

impl Mlp {
    /// Uniform fan-in initialisation: every weight and bias of a layer with
    /// fan-in `n` is drawn from `U(-1/sqrt(n), 1/sqrt(n))`.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        for l in 0..net.n_layers() {
            let bound = 1.0 / (widths[l] as f64).sqrt();
            let (start, end) = net.layer_range(l);
            for p in &mut net.params[start..end] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::invalid(
                "widths",
                "need at least input and output width",
            ));
        }
        if widths.contains(&0) {
            return Err(Error::invalid("widths", "zero-width layer"));
        }
        let n = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            widths: widths.to_vec(),
            params: vec![0.0; n],
        })
    }

    pub fn from_params(widths: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        check_dim("mlp parameters", net.params.len(), params.len())?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("mlp parameters", "non-finite entry"));
        }
        net.params = params;
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim("mlp parameters", self.params.len(), params.len())?;
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn layer_range(&self, layer: usize) -> (usize, usize) {
        let start: usize = self.widths[..=layer]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        let (i, o) = (self.widths[layer], self.widths[layer + 1]);
        (start, start + i * o + o)
    }

    fn layer(&self, layer: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (start, end) = self.layer_range(layer);
        let (i, o) = (self.widths[layer], self.widths[layer + 1]);
        let w = ArrayView2::from_shape((i, o), &self.params[start..start + i * o]).unwrap();
        let b = ArrayView1::from(&self.params[start + i * o..end]);
        (w, b)
    }

    /// Batched forward pass; rows are samples.
    pub fn forward(&self, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim("mlp input", self.input_dim(), input.ncols())?;
        let mut x = input.to_owned();
        for l in 0..self.n_layers() {
            let (w, b) = self.layer(l);
            x = x.dot(&w) + b;
            if l + 1 < self.n_layers() {
                x.mapv_inplace(f64::tanh);
            }
        }
        Ok(x)
    }

    pub fn forward_one(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input).unwrap();
        Ok(self.forward(x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_trace(&self, input: ArrayView2<'_, f64>) -> Result<Trace> {
        check_dim("mlp input", self.input_dim(), input.ncols())?;
        let mut layers = Vec::with_capacity(self.widths.len());
        layers.push(input.to_owned());
        for l in 0..self.n_layers() {
            let (w, b) = self.layer(l);
            let mut x = layers[l].dot(&w) + b;
            if l + 1 < self.n_layers() {
                x.mapv_inplace(f64::tanh);
            }
            layers.push(x);
        }
        Ok(Trace { layers })
    }

    /// Reverse pass. `upstream` holds dL/d(output) per row; the returned
    /// parameter gradient sums over rows. Also returns dL/d(input).
    pub fn backward(
        &self,
        trace: &Trace,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        let out = trace.output();
        if upstream.dim() != out.dim() {
            return Err(Error::Dimension {
                context: "mlp upstream gradient",
                expected: out.len(),
                actual: upstream.len(),
            });
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut delta = upstream.to_owned();
        for l in (0..self.n_layers()).rev() {
            let (start, end) = self.layer_range(l);
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            let input = &trace.layers[l];
            {
                let mut gw =
                    ArrayViewMut2::from_shape((i, o), &mut grad[start..start + i * o]).unwrap();
                gw.assign(&input.t().dot(&delta));
            }
            let gb = delta.sum_axis(Axis(0));
            grad[start + i * o..end].copy_from_slice(gb.as_slice().unwrap());
            let (w, _) = self.layer(l);
            let mut prev = delta.dot(&w.t());
            if l > 0 {
                prev.zip_mut_with(input, |d, &a| *d *= 1.0 - a * a);
            }
            delta = prev;
        }
        Ok((grad, delta))
    }

    /// Gradient of `<upstream, f(input)>` with respect to the parameters.
    pub fn grad_params(&self, input: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let (g, _) = self.grad_single(input, upstream)?;
        Ok(g)
    }

    /// Gradient of `<upstream, f(input)>` with respect to the input.
    pub fn grad_input(&self, input: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let (_, g) = self.grad_single(input, upstream)?;
        Ok(g.into_raw_vec_and_offset().0)
    }

    fn grad_single(&self, input: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Array2<f64>)> {
        check_dim("mlp upstream gradient", self.output_dim(), upstream.len())?;
        let x = ArrayView2::from_shape((1, input.len()), input).unwrap();
        let trace = self.forward_trace(x)?;
        let up = ArrayView2::from_shape((1, upstream.len()), upstream).unwrap();
        self.backward(&trace, up)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            activation: "tanh".to_string(),
            widths: self.widths.clone(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse {
                context: "mlp checkpoint".into(),
                reason: format!("unknown format `{}`", ckpt.format),
            });
        }
        if ckpt.version != CHECKPOINT_VERSION || ckpt.activation != "tanh" {
            return Err(Error::Parse {
                context: "mlp checkpoint".into(),
                reason: format!(
                    "unsupported version {} / activation {}",
                    ckpt.version, ckpt.activation
                ),
            });
        }
        Self::from_params(&ckpt.widths, ckpt.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_checkpoint(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// On-disk network layout: layer widths plus the flat parameter buffer in the
/// order documented at the top of this module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub activation: String,
    pub widths: Vec<usize>,
    pub params: Vec<f64>,
}

/// Polyak averaging `target <- tau * online + (1 - tau) * target`.
pub fn soft_update(target: &mut [f64], online: &[f64], tau: f64) {
    for (t, &o) in target.iter_mut().zip(online) {
        *t = tau * o + (1.0 - tau) * *t;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 6e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam on a flat parameter buffer. `step` descends along `grad`.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n_params: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
}

/// Plain gradient descent.
#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step(&self, params: &mut [f64], grad: &[f64]) {
        for (p, g) in params.iter_mut().zip(grad) {
            *p -= self.lr * g;
        }
    }
}

/// Stack row vectors into a batch matrix.
pub fn stack_rows(rows: &[Vec<f64>], width: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((rows.len(), width));
    for (i, r) in rows.iter().enumerate() {
        check_dim("batch row", width, r.len())?;
        out.row_mut(i).assign(&ArrayView1::from(r.as_slice()));
    }
    Ok(out)
}

/// Horizontal concatenation `[a | b]`.
pub fn concat_cols(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[a, b]).expect("row counts agree")
}

pub fn column(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((values.len(), 1), values.to_vec()).unwrap()
}

pub fn to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn mean_rows(m: &Array2<f64>) -> Array1<f64> {
    m.mean_axis(Axis(0))
        .unwrap_or_else(|| Array1::zeros(m.ncols()))
}
