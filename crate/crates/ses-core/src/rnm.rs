//! Randomized normalization module: a batch-norm variant that emits a clean
//! branch and a noise-perturbed, re-standardized branch during training.
//!
//! The perturbed branch adds zero-mean gaussian noise of variance `r` to the
//! input and normalizes with the statistics of the perturbed tensor, so the
//! output distribution does not shift with `r`. Running statistics track the
//! clean branch only; at eval time both branches reduce to plain batch norm,
//! bit for bit.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNormLayer, Mode};
use crate::tensor::ops::{bn_norm, channel_scale_shift};
use crate::tensor::Tensor;

/// Which self-attention inputs receive the perturbed branch.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Routing {
    pub q: bool,
    pub k: bool,
    pub v: bool,
}

impl Routing {
    pub const NONE: Routing = Routing { q: false, k: false, v: false };
    /// The recommended default: perturb query and key, keep value clean.
    pub const QK: Routing = Routing { q: true, k: true, v: false };

    pub fn parse(s: &str) -> Result<Routing> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Routing::NONE),
            "q" => Ok(Routing { q: true, k: false, v: false }),
            "k" => Ok(Routing { q: false, k: true, v: false }),
            "v" => Ok(Routing { q: false, k: false, v: true }),
            "qk" => Ok(Routing::QK),
            "qv" => Ok(Routing { q: true, k: false, v: true }),
            "kv" => Ok(Routing { q: false, k: true, v: true }),
            "qkv" => Ok(Routing { q: true, k: true, v: true }),
            other => Err(Error::Config(format!(
                "unknown rnm routing '{other}' (expected one of none|q|k|v|qk|qv|kv|qkv)"
            ))),
        }
    }
}

impl std::fmt::Display for Routing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if !(self.q || self.k || self.v) {
            return write!(f, "none");
        }
        if self.q {
            write!(f, "q")?;
        }
        if self.k {
            write!(f, "k")?;
        }
        if self.v {
            write!(f, "v")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RnmConfig {
    /// Noise variance; the drawn noise has standard deviation sqrt(r).
    pub r: f64,
    pub routing: Routing,
}

impl Default for RnmConfig {
    fn default() -> Self {
        RnmConfig { r: 0.005, routing: Routing::QK }
    }
}

impl RnmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r < 0.0 || !self.r.is_finite() {
            return Err(Error::invalid(format!(
                "rnm noise variance must be a non-negative real, got {}",
                self.r
            )));
        }
        Ok(())
    }
}

/// Dual-output batch normalization. Returns `(x_clean, x_perturbed)`.
///
/// Train mode: `x_clean` is standard batch norm of `x` (running statistics
/// updated); `x_perturbed` is batch norm of `x + eta`, `eta ~ N(0, r)`,
/// normalized by the perturbed batch's own statistics, with shared affine
/// parameters and no running-statistics update. One fresh noise tensor of
/// the input's full shape is drawn per call.
///
/// Eval mode: both outputs are the same tensor as plain eval batch norm; no
/// noise is drawn.
pub fn rnm_forward<R: Rng>(
    layer: &BatchNormLayer,
    x: &Tensor,
    cfg: &RnmConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    match mode {
        Mode::Eval => {
            let y = layer.forward(x, Mode::Eval)?;
            Ok((y.clone(), y))
        }
        Mode::Train => {
            let clean = layer.forward(x, Mode::Train)?;
            if cfg.r == 0.0 {
                return Ok((clean.clone(), clean));
            }
            let normal = Normal::new(0.0, cfg.r.sqrt())
                .map_err(|e| Error::Numeric(format!("noise distribution: {e}")))?;
            let noise: Vec<f64> = (0..x.numel()).map(|_| normal.sample(rng)).collect();
            let noise = Tensor::from_vec(noise, x.shape())?;
            let perturbed_in = x.add(&noise)?;
            let (xhat, _stats) = bn_norm(&perturbed_in, layer.eps)?;
            let perturbed = channel_scale_shift(&xhat, &layer.gamma, &layer.beta)?;
            Ok((clean, perturbed))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn routing_parse_round_trip() {
        for s in ["none", "q", "k", "v", "qk", "qv", "kv", "qkv"] {
            let r = Routing::parse(s).unwrap();
            assert_eq!(r.to_string(), s);
        }
        assert!(Routing::parse("xyz").is_err());
    }

    #[test]
    fn eval_mode_is_bitwise_batch_norm() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let bn = BatchNormLayer::new(3);
        bn.set_running(vec![0.1, -0.4, 2.0], vec![0.5, 1.5, 0.01]).unwrap();
        let cfg = RnmConfig { r: 0.25, routing: Routing::QK };
        let x = Tensor::rand_uniform(&[2, 3, 4, 4], -2.0, 2.0, &mut rng);
        let (clean, pert) = rnm_forward(&bn, &x, &cfg, Mode::Eval, &mut rng).unwrap();
        let plain = bn.forward(&x, Mode::Eval).unwrap();
        let (c, p, q) = (clean.to_vec(), pert.to_vec(), plain.to_vec());
        for i in 0..c.len() {
            assert_eq!(c[i].to_bits(), q[i].to_bits());
            assert_eq!(p[i].to_bits(), q[i].to_bits());
        }
    }

    #[test]
    fn zero_variance_noise_degenerates_to_clean() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let bn = BatchNormLayer::new(2);
        let cfg = RnmConfig { r: 0.0, routing: Routing::QK };
        let x = Tensor::rand_uniform(&[4, 2, 3, 3], -1.0, 1.0, &mut rng);
        let (clean, pert) = rnm_forward(&bn, &x, &cfg, Mode::Train, &mut rng).unwrap();
        assert_eq!(clean.to_vec(), pert.to_vec());
    }

    #[test]
    fn negative_variance_rejected() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let bn = BatchNormLayer::new(2);
        let cfg = RnmConfig { r: -0.1, routing: Routing::QK };
        let x = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(rnm_forward(&bn, &x, &cfg, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn perturbed_branch_restandardizes_constant_input() {
        // Constant input plus noise: the clean branch is exactly beta, and
        // the perturbed branch has per-channel sample mean beta within a
        // 5-sigma binomial-style bound over >= 10^4 elements.
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let (n, c, h, w) = (4usize, 2usize, 40usize, 40usize);
        let m = (n * h * w) as f64; // elements per channel
        assert!(m >= 1e4 / c as f64);
        let bn = BatchNormLayer::new(c);
        bn.beta.update_data(|b| b.copy_from_slice(&[0.7, -1.3]));
        let cfg = RnmConfig { r: 0.01, routing: Routing::QK };
        let x = Tensor::full(&[n, c, h, w], 3.0);
        let (clean, pert) = rnm_forward(&bn, &x, &cfg, Mode::Train, &mut rng).unwrap();
        for (i, v) in clean.to_vec().iter().enumerate() {
            let ci = (i / (h * w)) % c;
            assert!((v - [0.7, -1.3][ci]).abs() < 1e-12);
        }
        let pd = pert.to_vec();
        for ci in 0..c {
            let mut sum = 0.0;
            let mut sq = 0.0;
            let mut count = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                for t in 0..h * w {
                    sum += pd[base + t];
                    sq += pd[base + t] * pd[base + t];
                    count += 1.0;
                }
            }
            let mean = sum / count;
            let var = sq / count - mean * mean;
            // Normalized by the perturbed batch's own stats: mean is beta to
            // rounding, variance is gamma^2 = 1 up to the estimator itself.
            let five_sigma = 5.0 / count.sqrt();
            assert!(
                (mean - [0.7, -1.3][ci]).abs() < five_sigma,
                "channel {ci} mean {mean}"
            );
            assert!((var - 1.0).abs() < 0.05, "channel {ci} var {var}");
        }
    }

    #[test]
    fn running_stats_track_clean_branch_only() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let bn_rnm = BatchNormLayer::new(2);
        let bn_plain = BatchNormLayer::new(2);
        let cfg = RnmConfig { r: 0.5, routing: Routing::QK };
        let x = Tensor::rand_uniform(&[8, 2, 4, 4], -3.0, 3.0, &mut rng);
        rnm_forward(&bn_rnm, &x, &cfg, Mode::Train, &mut rng).unwrap();
        bn_plain.forward(&x, Mode::Train).unwrap();
        assert_eq!(
            bn_rnm.running_mean.borrow().clone(),
            bn_plain.running_mean.borrow().clone()
        );
        assert_eq!(
            bn_rnm.running_var.borrow().clone(),
            bn_plain.running_var.borrow().clone()
        );
    }
}
