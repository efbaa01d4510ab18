//! Sampling-equivariant self-attention layer.
//!
//! The layer regresses a softmax mask over every k x k footprint from
//! query/key differences, aggregates values under those masks (each mask
//! channel shared by `r3` consecutive value channels), and embeds the mask
//! itself back into the aggregated feature through a shared affine map. No
//! positional encoding enters the mask regressor, which is what makes the
//! sampling masks translation equivariant; an ablation flag can restore a
//! positional signal and bypass the embedding for comparison runs.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNormLayer, LinearLayer, Mode};
use crate::tensor::ops::{aggregate as aggregate_op, append_footprint_coords, pairwise_diff, zeta_embed};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SesLayerConfig {
    pub c_in: usize,
    pub c_out: usize,
    /// Odd footprint size.
    pub k: usize,
    /// Value bottleneck reduction: c_v = c_in / r1.
    pub r1: usize,
    /// Query/key bottleneck reduction: c_qk = c_in / r2.
    pub r2: usize,
    /// Mask sharing factor: c_w = c_v / r3 mask channels.
    pub r3: usize,
    /// Ablation: concatenate fixed normalized footprint offsets to the mask
    /// regressor input.
    #[serde(default)]
    pub positional_encoding: bool,
    /// Ablation: skip the transformation embedding, passing aggregated
    /// features straight through.
    #[serde(default)]
    pub zeta_passthrough: bool,
}

impl SesLayerConfig {
    pub fn new(c_in: usize, c_out: usize, k: usize, r1: usize, r2: usize, r3: usize) -> Self {
        SesLayerConfig {
            c_in,
            c_out,
            k,
            r1,
            r2,
            r3,
            positional_encoding: false,
            zeta_passthrough: false,
        }
    }

    pub fn c_v(&self) -> usize {
        self.c_in / self.r1
    }

    pub fn c_qk(&self) -> usize {
        self.c_in / self.r2
    }

    pub fn c_w(&self) -> usize {
        self.c_v() / self.r3
    }

    /// Mask-regressor input channels (query/key bottleneck plus the two
    /// coordinate channels when the positional-encoding ablation is on).
    pub fn c_gamma_in(&self) -> usize {
        self.c_qk() + if self.positional_encoding { 2 } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.k == 0 || self.k % 2 == 0 {
            return Err(Error::invalid(format!("kernel size must be odd, got {}", self.k)));
        }
        if self.r1 == 0 || self.c_in % self.r1 != 0 {
            return Err(Error::invalid(format!(
                "r1 = {} must divide c_in = {}",
                self.r1, self.c_in
            )));
        }
        if self.r2 == 0 || self.c_in % self.r2 != 0 {
            return Err(Error::invalid(format!(
                "r2 = {} must divide c_in = {}",
                self.r2, self.c_in
            )));
        }
        if self.r3 == 0 || self.c_v() % self.r3 != 0 {
            return Err(Error::invalid(format!(
                "r3 = {} must divide c_v = {}",
                self.r3,
                self.c_v()
            )));
        }
        Ok(())
    }
}

/// Mask and value activations captured during a probed forward pass.
pub struct SesCapture {
    /// Softmaxed masks, row-major `[N, c_w, k*k, H, W]`.
    pub masks: Vec<f64>,
    pub mask_shape: [usize; 5],
    /// Value projection `[N, c_v, H, W]`.
    pub values: Vec<f64>,
    pub value_shape: [usize; 4],
}

pub struct SesLayer {
    pub cfg: SesLayerConfig,
    pub lin_v: LinearLayer,
    pub lin_q: LinearLayer,
    pub lin_k: LinearLayer,
    pub gamma_bn1: BatchNormLayer,
    pub gamma_lin1: LinearLayer,
    pub gamma_bn2: BatchNormLayer,
    pub gamma_lin2: LinearLayer,
    /// Shared transformation embedding, arity (1 + k*k) -> 1. Absent under
    /// the pass-through ablation.
    pub zeta: Option<LinearLayer>,
    pub lin_out: LinearLayer,
}

impl SesLayer {
    pub fn new<R: Rng>(cfg: SesLayerConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (c_v, c_qk, c_w) = (cfg.c_v(), cfg.c_qk(), cfg.c_w());
        let cg = cfg.c_gamma_in();
        Ok(SesLayer {
            cfg,
            lin_v: LinearLayer::new(cfg.c_in, c_v, true, rng),
            lin_q: LinearLayer::new(cfg.c_in, c_qk, true, rng),
            lin_k: LinearLayer::new(cfg.c_in, c_qk, true, rng),
            gamma_bn1: BatchNormLayer::new(cg),
            gamma_lin1: LinearLayer::new(cg, c_qk, false, rng),
            gamma_bn2: BatchNormLayer::new(c_qk),
            gamma_lin2: LinearLayer::new(c_qk, c_w, true, rng),
            zeta: (!cfg.zeta_passthrough).then(|| LinearLayer::new(1 + cfg.k * cfg.k, 1, true, rng)),
            lin_out: LinearLayer::new(c_v, cfg.c_out, true, rng),
        })
    }

    fn check_input(&self, x: &Tensor, what: &str) -> Result<()> {
        if x.rank() != 4 || x.shape()[1] != self.cfg.c_in {
            return Err(Error::shape(format!(
                "{what} must be [N, {}, H, W], got {:?}",
                self.cfg.c_in,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Regresses softmax sampling masks `[N, c_w, k*k, H, W]` from spatially
    /// aligned query and key sources. Every footprint distribution sums to 1.
    pub fn regress_masks_batch(&self, q_src: &Tensor, k_src: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(q_src, "q_src")?;
        self.check_input(k_src, "k_src")?;
        if q_src.shape() != k_src.shape() {
            return Err(Error::shape(format!(
                "q/k sources must be spatially aligned, got {:?} and {:?}",
                q_src.shape(),
                k_src.shape()
            )));
        }
        let q = self.lin_q.forward_channels(q_src)?;
        let k = self.lin_k.forward_channels(k_src)?;
        let mut rel = pairwise_diff(&q, &k, self.cfg.k)?;
        if self.cfg.positional_encoding {
            rel = append_footprint_coords(&rel, self.cfg.k)?;
        }
        // Mask regressor [BN, ReLU, Linear, BN, ReLU, Linear] over the
        // feature axis; footprint and spatial positions act as the batch.
        let x = self.gamma_bn1.forward(&rel, mode)?.relu()?;
        let x = self.gamma_lin1.forward_channels(&x)?;
        let x = self.gamma_bn2.forward(&x, mode)?.relu()?;
        let logits = self.gamma_lin2.forward_channels(&x)?;
        logits.softmax(&[2])
    }

    /// Full layer: value projection, mask-weighted aggregation,
    /// transformation embedding, output projection. The value source and the
    /// query/key sources may differ (randomized-normalization routing); in
    /// eval mode they coincide.
    pub fn forward_batch(
        &self,
        v_src: &Tensor,
        q_src: &Tensor,
        k_src: &Tensor,
        mode: Mode,
    ) -> Result<Tensor> {
        self.forward_inner(v_src, q_src, k_src, mode, None)
    }

    /// Forward pass that also captures the masks and value activations.
    pub fn forward_probed(
        &self,
        v_src: &Tensor,
        q_src: &Tensor,
        k_src: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, SesCapture)> {
        let mut cap = None;
        let out = self.forward_inner(v_src, q_src, k_src, mode, Some(&mut cap))?;
        Ok((out, cap.expect("probe requested")))
    }

    fn forward_inner(
        &self,
        v_src: &Tensor,
        q_src: &Tensor,
        k_src: &Tensor,
        mode: Mode,
        capture: Option<&mut Option<SesCapture>>,
    ) -> Result<Tensor> {
        self.check_input(v_src, "v_src")?;
        let v = self.lin_v.forward_channels(v_src)?;
        let masks = self.regress_masks_batch(q_src, k_src, mode)?;
        if let Some(slot) = capture {
            let ms = masks.shape();
            let vs = v.shape();
            *slot = Some(SesCapture {
                masks: masks.to_vec(),
                mask_shape: [ms[0], ms[1], ms[2], ms[3], ms[4]],
                values: v.to_vec(),
                value_shape: [vs[0], vs[1], vs[2], vs[3]],
            });
        }
        let aggregated = aggregate_op(&v, &masks, self.cfg.k, self.cfg.r3)?;
        let embedded = match &self.zeta {
            Some(z) => {
                let bias = z.bias.as_ref().expect("zeta is affine");
                zeta_embed(&aggregated, &masks, &z.weight, bias, self.cfg.k, self.cfg.r3)?
            }
            None => aggregated,
        };
        self.lin_out.forward_channels(&embedded)
    }

    pub fn param_count(&self) -> usize {
        self.lin_v.param_count()
            + self.lin_q.param_count()
            + self.lin_k.param_count()
            + self.gamma_bn1.param_count()
            + self.gamma_lin1.param_count()
            + self.gamma_bn2.param_count()
            + self.gamma_lin2.param_count()
            + self.zeta.as_ref().map_or(0, LinearLayer::param_count)
            + self.lin_out.param_count()
    }
}

/// Parameters of a dense k x k convolution with bias at the same widths,
/// for capacity comparisons.
pub fn conv2d_param_count(k: usize, c_in: usize, c_out: usize) -> usize {
    k * k * c_in * c_out + c_out
}

/// Spec-shaped single-image entry point: `[c_in, H, W]` sources.
pub fn regress_masks(layer: &SesLayer, q_src: &Tensor, k_src: &Tensor, mode: Mode) -> Result<Tensor> {
    let (q4, k4) = (unsqueeze_chw(q_src)?, unsqueeze_chw(k_src)?);
    let m = layer.regress_masks_batch(&q4, &k4, mode)?;
    let s = m.shape().to_vec();
    m.reshape(&s[1..])
}

/// Mask-weighted aggregation over a single image (`v` is `[c_v, H, W]`,
/// `masks` `[c_w, k*k, H, W]`).
pub fn aggregate(v: &Tensor, masks: &Tensor, k: usize, r3: usize) -> Result<Tensor> {
    let v4 = unsqueeze_chw(v)?;
    let mut ms = masks.shape().to_vec();
    ms.insert(0, 1);
    let m5 = masks.reshape(&ms)?;
    let out = aggregate_op(&v4, &m5, k, r3)?;
    let s = out.shape().to_vec();
    out.reshape(&s[1..])
}

/// Shared transformation embedding over a single image.
pub fn embed_transformation(
    v_prime: &Tensor,
    masks: &Tensor,
    zeta: &LinearLayer,
    k: usize,
    r3: usize,
) -> Result<Tensor> {
    let v4 = unsqueeze_chw(v_prime)?;
    let mut ms = masks.shape().to_vec();
    ms.insert(0, 1);
    let m5 = masks.reshape(&ms)?;
    let bias = zeta
        .bias
        .as_ref()
        .ok_or_else(|| Error::invalid("transformation embedding requires an affine map with bias"))?;
    let out = zeta_embed(&v4, &m5, &zeta.weight, bias, k, r3)?;
    let s = out.shape().to_vec();
    out.reshape(&s[1..])
}

/// Spec-shaped single-image forward: the clean branch feeds the value path
/// and the (possibly perturbed) branch feeds both query and key.
pub fn ses_forward(layer: &SesLayer, v_src: &Tensor, qk_src: &Tensor, mode: Mode) -> Result<Tensor> {
    let v4 = unsqueeze_chw(v_src)?;
    let qk4 = unsqueeze_chw(qk_src)?;
    let out = layer.forward_batch(&v4, &qk4, &qk4, mode)?;
    let s = out.shape().to_vec();
    out.reshape(&s[1..])
}

fn unsqueeze_chw(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::shape(format!(
            "expected a [C, H, W] tensor, got {:?}",
            x.shape()
        )));
    }
    let mut s = x.shape().to_vec();
    s.insert(0, 1);
    x.reshape(&s)
}
