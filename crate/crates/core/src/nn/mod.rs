//! Dense feed-forward networks with hand-written backpropagation.
//!
//! Everything is `f64` and row-major; a batch is a matrix with one row per
//! example. Forward passes return a cache that the matching backward pass
//! consumes.

mod vae;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

pub use vae::{Vae, VaeForward, VaeGrad};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;
pub type Vector = Array1<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Elu,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Elu => "elu",
            Activation::Identity => "identity",
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Identity => x,
        }
    }

    /// Derivative given the pre-activation `x` and the output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-limit..limit))
}

/// Row-wise affine map `x W + b` followed by an activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `in x out`.
    pub w: Matrix,
    pub b: Vector,
    pub act: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrad {
    pub dw: Matrix,
    pub db: Vector,
}

impl Dense {
    pub fn new(fan_in: usize, fan_out: usize, act: Activation, rng: &mut impl Rng) -> Self {
        Dense {
            w: glorot(fan_in, fan_out, rng),
            b: Array1::zeros(fan_out),
            act,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.ncols()
    }

    /// `x W + b` accumulated one row at a time. Much faster than the general
    /// product for a handful of rows, which repacks all of `W` per call.
    pub fn affine_rowwise(&self, x: &Matrix) -> Matrix {
        let mut out = Array2::zeros((x.nrows(), self.out_dim()));
        for (xr, mut o) in x.rows().into_iter().zip(out.rows_mut()) {
            o.assign(&self.b);
            for (&xk, wk) in xr.iter().zip(self.w.rows()) {
                if xk != 0.0 {
                    o.scaled_add(xk, &wk);
                }
            }
        }
        out
    }

    /// Returns `(pre_activation, output)`.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        self.check_input(x)?;
        Ok(self.activate(x.dot(&self.w) + &self.b))
    }

    /// Like [`Dense::forward`] but using [`Dense::affine_rowwise`].
    pub fn forward_rowwise(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        self.check_input(x)?;
        Ok(self.activate(self.affine_rowwise(x)))
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.ncols() != self.in_dim() {
            return Err(Error::shape(format!(
                "layer expects {} inputs, got {}",
                self.in_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    fn activate(&self, pre: Matrix) -> (Matrix, Matrix) {
        let act = self.act;
        let out = if act == Activation::Identity {
            pre.clone()
        } else {
            pre.mapv(|v| act.apply(v))
        };
        (pre, out)
    }

    /// Given the layer input, cached activations and `dL/d(output)`, returns
    /// the parameter gradient and `dL/d(input)`.
    pub fn backward(
        &self,
        input: &Matrix,
        pre: &Matrix,
        out: &Matrix,
        grad_out: &Matrix,
    ) -> (DenseGrad, Matrix) {
        let delta = if self.act == Activation::Identity {
            grad_out.clone()
        } else {
            let act = self.act;
            let mut d = grad_out.clone();
            ndarray::Zip::from(&mut d)
                .and(pre)
                .and(out)
                .for_each(|g, &x, &y| *g *= act.derivative(x, y));
            d
        };
        let dw = input.t().dot(&delta);
        let db = delta.sum_axis(Axis(0));
        let dx = delta.dot(&self.w.t());
        (DenseGrad { dw, db }, dx)
    }

    fn zero_grad(&self) -> DenseGrad {
        DenseGrad {
            dw: Array2::zeros(self.w.raw_dim()),
            db: Array1::zeros(self.b.raw_dim()),
        }
    }
}

/// A feed-forward network.
#[derive(Clone, Debug, PartialEq)]
pub struct Fnn {
    pub layers: Vec<Dense>,
}

/// Per-layer inputs, pre-activations and outputs from a forward pass.
#[derive(Clone, Debug)]
pub struct FnnCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    outputs: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FnnGrad {
    pub layers: Vec<DenseGrad>,
}

impl Fnn {
    /// `dims = [input, hidden..., output]`.
    pub fn new(dims: &[usize], hidden: Activation, output: Activation, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an FNN needs input and output dimensions");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let act = if l + 1 == n { output } else { hidden };
                Dense::new(dims[l], dims[l + 1], act, rng)
            })
            .collect();
        Fnn { layers }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("an FNN needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(format!(
                    "layer output {} does not feed layer input {}",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Fnn { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// Layer widths `[input, hidden..., output]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.in_dim())
            .chain(self.layers.iter().map(Dense::out_dim))
            .collect()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, FnnCache)> {
        let mut cache = FnnCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            outputs: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.clone();
        for layer in &self.layers {
            let (pre, out) = layer.forward(&h)?;
            cache.inputs.push(h);
            cache.pre.push(pre);
            h = out.clone();
            cache.outputs.push(out);
        }
        Ok((h, cache))
    }

    /// Forward pass without keeping a cache.
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.to_owned();
        for layer in &self.layers {
            h = layer.forward(&h)?.1;
        }
        Ok(h)
    }

    pub fn backward(&self, cache: &FnnCache, grad_out: &Matrix) -> Result<(FnnGrad, Matrix)> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::shape("forward cache does not match network depth"));
        }
        let last = cache.outputs.last().unwrap();
        if grad_out.raw_dim() != last.raw_dim() {
            return Err(Error::shape(format!(
                "output gradient {:?} does not match output {:?}",
                grad_out.dim(),
                last.dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (dg, dx) = layer.backward(&cache.inputs[l], &cache.pre[l], &cache.outputs[l], &g);
            grads.push(dg);
            g = dx;
        }
        grads.reverse();
        Ok((FnnGrad { layers: grads }, g))
    }

    pub fn zero_grad(&self) -> FnnGrad {
        FnnGrad {
            layers: self.layers.iter().map(Dense::zero_grad).collect(),
        }
    }
}

/// Weights plus biases of a dense network with widths `[input, hidden..., output]`.
pub fn fnn_param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Flat, ordered views of all trainable tensors. Models and their gradient
/// mirrors list tensors in the same order, which is what [`sgd_step`],
/// serialization and gradient checks rely on.
pub trait Params {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

pub(crate) fn slice(m: &Matrix) -> &[f64] {
    m.as_slice().expect("standard layout")
}

pub(crate) fn slice_mut(m: &mut Matrix) -> &mut [f64] {
    m.as_slice_mut().expect("standard layout")
}

impl Params for Dense {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![slice(&self.w), self.b.as_slice().unwrap()]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![slice_mut(&mut self.w), self.b.as_slice_mut().unwrap()]
    }
}

impl Params for DenseGrad {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![slice(&self.dw), self.db.as_slice().unwrap()]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![slice_mut(&mut self.dw), self.db.as_slice_mut().unwrap()]
    }
}

impl Params for Fnn {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

impl Params for FnnGrad {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

/// Adds `scale * other` into `acc`, tensor by tensor.
pub fn accumulate<P: Params + ?Sized, Q: Params + ?Sized>(acc: &mut P, other: &Q, scale: f64) -> Result<()> {
    let src = other.tensors();
    let mut dst = acc.tensors_mut();
    if src.len() != dst.len() {
        return Err(Error::shape("gradient tensor count mismatch"));
    }
    for (d, s) in dst.iter_mut().zip(src) {
        if d.len() != s.len() {
            return Err(Error::shape("gradient tensor length mismatch"));
        }
        for (a, b) in d.iter_mut().zip(s) {
            *a += scale * b;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    /// Per-epoch decay `gamma` in `lr / (1 + gamma * epoch)`.
    pub decay: f64,
    pub batch_size: usize,
}

impl SgdConfig {
    pub fn new(learning_rate: f64, decay: f64, batch_size: usize) -> Result<Self> {
        if !(learning_rate > 0.0) || !(decay >= 0.0) || batch_size == 0 {
            return Err(Error::config(format!(
                "invalid SGD settings lr={learning_rate} decay={decay} batch={batch_size}"
            )));
        }
        Ok(SgdConfig {
            learning_rate,
            decay,
            batch_size,
        })
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate / (1.0 + self.decay * epoch as f64)
    }
}

/// Plain SGD: `p <- p - lr(epoch) * g`.
pub fn sgd_step<P: Params + ?Sized, G: Params + ?Sized>(
    params: &mut P,
    grads: &G,
    cfg: &SgdConfig,
    epoch: usize,
) -> Result<()> {
    accumulate(params, grads, -cfg.lr_at(epoch))
}

fn check_msle_inputs(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::shape(format!(
            "msle over {} predictions and {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::arg("msle of an empty batch"));
    }
    if pred.iter().chain(target).any(|v| !(*v >= 0.0)) {
        return Err(Error::arg("msle requires non-negative values"));
    }
    Ok(())
}

/// Mean of `(ln(1 + p) - ln(1 + c))^2`.
pub fn msle(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_msle_inputs(pred, target)?;
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, c)| (p.ln_1p() - c.ln_1p()).powi(2))
        .sum();
    Ok(s / pred.len() as f64)
}

/// Gradient of [`msle`] with respect to the predictions.
pub fn msle_grad(pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    check_msle_inputs(pred, target)?;
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, c)| 2.0 * (p.ln_1p() - c.ln_1p()) / ((1.0 + p) * n))
        .collect())
}
