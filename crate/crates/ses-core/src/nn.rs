//! Trainable layers the network is assembled from: linear maps, batch
//! normalization with running statistics, and functional wrappers for the
//! activation / pooling / loss primitives.

use std::cell::RefCell;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::ops::{bn_norm, channel_scale_shift, linear_axis1, BnStats};
use crate::tensor::Tensor;

/// Forward-pass mode: training uses batch statistics and draws noise; eval
/// is a pure function of parameters and running statistics.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Affine map `y = x W^T + b` with weight `[out, in]`.
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl LinearLayer {
    /// Initializes weight and bias from U(-1/sqrt(in), 1/sqrt(in)).
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, with_bias: bool, rng: &mut R) -> Self {
        assert!(in_dim > 0 && out_dim > 0, "linear dims must be positive");
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = Tensor::rand_uniform(&[out_dim, in_dim], -bound, bound, rng);
        let weight = Tensor::param(weight.to_vec(), &[out_dim, in_dim]).expect("weight shape");
        let bias = with_bias.then(|| {
            let b = Tensor::rand_uniform(&[out_dim], -bound, bound, rng);
            Tensor::param(b.to_vec(), &[out_dim]).expect("bias shape")
        });
        LinearLayer { weight, bias }
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::shape(format!(
                "linear weight must be rank 2, got {:?}",
                weight.shape()
            )));
        }
        if let Some(b) = &bias {
            if b.numel() != weight.shape()[0] {
                return Err(Error::shape(format!(
                    "bias length {} does not match out dim {}",
                    b.numel(),
                    weight.shape()[0]
                )));
            }
        }
        Ok(LinearLayer { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Applies the map over the trailing feature axis: `[..., in] -> [..., out]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let in_dim = self.in_dim();
        let s = x.shape();
        if *s.last().unwrap() != in_dim {
            return Err(Error::shape(format!(
                "linear expects trailing feature axis {in_dim}, got shape {s:?}"
            )));
        }
        let rows = x.numel() / in_dim;
        let flat = x.reshape(&[rows, in_dim])?;
        let out = linear_axis1(&flat, &self.weight, self.bias.as_ref())?;
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = self.out_dim();
        out.reshape(&shape)
    }

    /// Applies the map over the channel axis (axis 1) of a batched feature
    /// map `[N, in, ...] -> [N, out, ...]`, independently at every position.
    pub fn forward_channels(&self, x: &Tensor) -> Result<Tensor> {
        linear_axis1(x, &self.weight, self.bias.as_ref())
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }
}

/// Batch normalization over the channel axis with exponential-moving-average
/// running statistics. The batch variance is the biased (1/M) estimator and
/// is clamped at zero before `eps` is added, so a degenerate single-element
/// batch normalizes to zero rather than NaN.
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: RefCell<Vec<f64>>,
    pub running_var: RefCell<Vec<f64>>,
    pub momentum: f64,
    pub eps: f64,
}

pub const BN_MOMENTUM_DEFAULT: f64 = 0.1;
pub const BN_EPS_DEFAULT: f64 = 1e-5;

impl BatchNormLayer {
    pub fn new(channels: usize) -> Self {
        Self::with_options(channels, BN_MOMENTUM_DEFAULT, BN_EPS_DEFAULT)
    }

    pub fn with_options(channels: usize, momentum: f64, eps: f64) -> Self {
        assert!(channels > 0, "batch norm needs at least one channel");
        assert!(momentum > 0.0 && momentum <= 1.0, "momentum must lie in (0, 1]");
        assert!(eps > 0.0, "eps must be positive");
        BatchNormLayer {
            gamma: Tensor::param(vec![1.0; channels], &[channels]).expect("gamma"),
            beta: Tensor::param(vec![0.0; channels], &[channels]).expect("beta"),
            running_mean: RefCell::new(vec![0.0; channels]),
            running_var: RefCell::new(vec![1.0; channels]),
            momentum,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() < 2 || x.shape()[1] != self.channels() {
            return Err(Error::shape(format!(
                "batch norm over {} channels got input shape {:?}",
                self.channels(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// Train mode normalizes with batch statistics and updates the running
    /// estimates; eval mode is a deterministic affine map from the running
    /// statistics. The affine (gamma, beta) applies last in both modes.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(x)?;
        match mode {
            Mode::Train => {
                let (xhat, stats) = bn_norm(x, self.eps)?;
                self.update_running(&stats);
                channel_scale_shift(&xhat, &self.gamma, &self.beta)
            }
            Mode::Eval => {
                let rm = self.running_mean.borrow();
                let rv = self.running_var.borrow();
                let scale: Vec<f64> = rv.iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect();
                let shift: Vec<f64> = rm.iter().zip(&scale).map(|(&m, &s)| -m * s).collect();
                drop(rm);
                drop(rv);
                let c = self.channels();
                let xn = channel_scale_shift(
                    x,
                    &Tensor::from_vec(scale, &[c])?,
                    &Tensor::from_vec(shift, &[c])?,
                )?;
                channel_scale_shift(&xn, &self.gamma, &self.beta)
            }
        }
    }

    fn update_running(&self, stats: &BnStats) {
        let m = self.momentum;
        let mut rm = self.running_mean.borrow_mut();
        let mut rv = self.running_var.borrow_mut();
        for (r, &b) in rm.iter_mut().zip(&stats.mean) {
            *r += m * (b - *r);
        }
        for (r, &b) in rv.iter_mut().zip(&stats.var) {
            *r += m * (b - *r);
        }
    }

    pub fn set_running(&self, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        if mean.len() != self.channels() || var.len() != self.channels() {
            return Err(Error::shape("running stats length mismatch"));
        }
        if var.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("running variance must be non-negative"));
        }
        *self.running_mean.borrow_mut() = mean;
        *self.running_var.borrow_mut() = var;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.gamma.numel() + self.beta.numel()
    }
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    x.relu()
}

pub fn maxpool2(x: &Tensor) -> Result<Tensor> {
    x.maxpool2()
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    logits.cross_entropy(labels)
}
