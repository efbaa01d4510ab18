//! Numerical self-checks: central finite-difference gradient verification
//! for every differentiable op and for a full self-attention block.
//!
//! The checker only ever calls forward passes, so it is independent of the
//! backward rules it validates. Both the CLI `gradcheck` command and the
//! acceptance suite run [`gradcheck_suite`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNormLayer, LinearLayer, Mode};
use crate::ses::{SesLayer, SesLayerConfig};
use crate::tensor::ops::{
    aggregate, append_footprint_coords, bn_norm, channel_scale_shift, linear_axis1, pairwise_diff,
    zeta_embed,
};
use crate::tensor::{no_grad, Tensor};

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckItem {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

impl GradCheckItem {
    pub fn passed(&self) -> bool {
        self.max_rel_err < FD_TOL
    }
}

/// Central finite differences of `forward` against the analytic gradients at
/// every coordinate of every leaf. Returns (max relative error, coordinate
/// count). Relative error is |ga - gn| / max(1, |ga|, |gn|).
pub fn fd_max_rel_err(
    leaves: &[&Tensor],
    forward: &dyn Fn() -> Result<Tensor>,
) -> Result<(f64, usize)> {
    for leaf in leaves {
        leaf.zero_grad();
    }
    let loss = forward()?;
    if loss.numel() != 1 {
        return Err(Error::invalid("gradcheck forward must produce a scalar"));
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad_vec().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let _guard = no_grad();
    let mut max_rel = 0.0f64;
    let mut count = 0usize;
    for (li, leaf) in leaves.iter().enumerate() {
        for i in 0..leaf.numel() {
            let orig = leaf.data()[i];
            leaf.update_data(|d| d[i] = orig + FD_STEP);
            let lp = forward()?.item();
            leaf.update_data(|d| d[i] = orig - FD_STEP);
            let lm = forward()?.item();
            leaf.update_data(|d| d[i] = orig);
            let gn = (lp - lm) / (2.0 * FD_STEP);
            let ga = analytic[li][i];
            if !gn.is_finite() || !ga.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at leaf {li} coord {i}: analytic {ga}, numeric {gn}"
                )));
            }
            let rel = (ga - gn).abs() / ga.abs().max(gn.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
            count += 1;
        }
    }
    Ok((max_rel, count))
}

fn param(rng: &mut ChaCha12Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let data = Tensor::rand_uniform(shape, lo, hi, rng).to_vec();
    Tensor::param(data, shape).expect("param shape")
}

/// Values with pairwise gaps of at least ~0.2, for kink-free max pooling.
fn distinct_param(rng: &mut ChaCha12Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let data: Vec<f64> = order
        .iter()
        .map(|&r| r as f64 * 0.37 + rng.random_range(-0.05..0.05))
        .collect();
    Tensor::param(data, shape).expect("param shape")
}

/// ReLU-safe values: magnitudes bounded away from the kink at zero.
fn margin_param(rng: &mut ChaCha12Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.2..1.5);
            if rng.random_range(0..2) == 0 {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::param(data, shape).expect("param shape")
}

fn projected_loss(out: &Tensor, proj: &Tensor) -> Result<Tensor> {
    out.mul(proj)?.sum_all()
}

fn run_item(
    name: &'static str,
    seeds: std::ops::Range<u64>,
    build: impl Fn(&mut ChaCha12Rng) -> Result<(Vec<Tensor>, Box<dyn Fn() -> Result<Tensor>>)>,
) -> Result<GradCheckItem> {
    let mut worst = 0.0f64;
    let mut total = 0usize;
    for seed in seeds {
        let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(seed));
        let (leaves, forward) = build(&mut rng)?;
        let refs: Vec<&Tensor> = leaves.iter().collect();
        let (rel, n) = fd_max_rel_err(&refs, forward.as_ref())?;
        worst = worst.max(rel);
        total += n;
    }
    Ok(GradCheckItem {
        name,
        max_rel_err: worst,
        coords_checked: total,
    })
}

/// Finite-difference checks for every differentiable op and a full
/// self-attention block, each over the given seeds.
pub fn gradcheck_suite(seeds: std::ops::Range<u64>) -> Result<Vec<GradCheckItem>> {
    let mut items = Vec::new();

    items.push(run_item("elementwise-add-broadcast", seeds.clone(), |rng| {
        let a = param(rng, &[3, 4], -2.0, 2.0);
        let b = param(rng, &[4], -2.0, 2.0);
        let p = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, rng);
        Ok((
            vec![a.clone(), b.clone()],
            Box::new(move || projected_loss(&a.add(&b)?, &p)),
        ))
    })?);

    items.push(run_item("elementwise-sub", seeds.clone(), |rng| {
        let a = param(rng, &[2, 3, 2], -2.0, 2.0);
        let b = param(rng, &[2, 3, 2], -2.0, 2.0);
        let p = Tensor::rand_uniform(&[2, 3, 2], -1.0, 1.0, rng);
        Ok((
            vec![a.clone(), b.clone()],
            Box::new(move || projected_loss(&a.sub(&b)?, &p)),
        ))
    })?);

    items.push(run_item("elementwise-mul-broadcast", seeds.clone(), |rng| {
        let a = param(rng, &[3, 4], -2.0, 2.0);
        let b = param(rng, &[4], -2.0, 2.0);
        let p = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, rng);
        Ok((
            vec![a.clone(), b.clone()],
            Box::new(move || projected_loss(&a.mul(&b)?, &p)),
        ))
    })?);

    items.push(run_item("matmul-4x5-5x3", seeds.clone(), |rng| {
        let a = param(rng, &[4, 5], -1.5, 1.5);
        let b = param(rng, &[5, 3], -1.5, 1.5);
        let p = Tensor::rand_uniform(&[4, 3], -1.0, 1.0, rng);
        Ok((
            vec![a.clone(), b.clone()],
            Box::new(move || projected_loss(&a.matmul(&b)?, &p)),
        ))
    })?);

    items.push(run_item("transpose2", seeds.clone(), |rng| {
        let a = param(rng, &[3, 5], -1.5, 1.5);
        let p = Tensor::rand_uniform(&[5, 3], -1.0, 1.0, rng);
        Ok((
            vec![a.clone()],
            Box::new(move || projected_loss(&a.transpose2()?, &p)),
        ))
    })?);

    items.push(run_item("softmax-axis1", seeds.clone(), |rng| {
        let a = param(rng, &[2, 7, 3], -3.0, 3.0);
        let p = Tensor::rand_uniform(&[2, 7, 3], -1.0, 1.0, rng);
        Ok((
            vec![a.clone()],
            Box::new(move || projected_loss(&a.softmax(&[1])?, &p)),
        ))
    })?);

    items.push(run_item("softmax-multi-axis", seeds.clone(), |rng| {
        let a = param(rng, &[2, 3, 4], -3.0, 3.0);
        let p = Tensor::rand_uniform(&[2, 3, 4], -1.0, 1.0, rng);
        Ok((
            vec![a.clone()],
            Box::new(move || projected_loss(&a.softmax(&[1, 2])?, &p)),
        ))
    })?);

    items.push(run_item("unfold-k3", seeds.clone(), |rng| {
        let a = param(rng, &[2, 4, 5], -2.0, 2.0);
        let p = Tensor::rand_uniform(&[2, 9, 4, 5], -1.0, 1.0, rng);
        Ok((
            vec![a.clone()],
            Box::new(move || projected_loss(&a.unfold(3)?, &p)),
        ))
    })?);

    items.push(run_item("pairwise-diff-k3", seeds.clone(), |rng| {
        let q = param(rng, &[1, 2, 4, 4], -2.0, 2.0);
        let k = param(rng, &[1, 2, 4, 4], -2.0, 2.0);
        let p = Tensor::rand_uniform(&[1, 2, 9, 4, 4], -1.0, 1.0, rng);
        Ok((
            vec![q.clone(), k.clone()],
            Box::new(move || projected_loss(&pairwise_diff(&q, &k, 3)?, &p)),
        ))
    })?);

    items.push(run_item("aggregate-k3-r2", seeds.clone(), |rng| {
        let v = param(rng, &[1, 4, 4, 4], -2.0, 2.0);
        let m = param(rng, &[1, 2, 9, 4, 4], 0.01, 1.0);
        let p = Tensor::rand_uniform(&[1, 4, 4, 4], -1.0, 1.0, rng);
        Ok((
            vec![v.clone(), m.clone()],
            Box::new(move || projected_loss(&aggregate(&v, &m, 3, 2)?, &p)),
        ))
    })?);

    items.push(run_item("zeta-embed", seeds.clone(), |rng| {
        let vp = param(rng, &[1, 4, 3, 3], -2.0, 2.0);
        let m = param(rng, &[1, 2, 9, 3, 3], 0.01, 1.0);
        let zw = param(rng, &[1, 10], -0.5, 0.5);
        let zb = param(rng, &[1], -0.5, 0.5);
        let p = Tensor::rand_uniform(&[1, 4, 3, 3], -1.0, 1.0, rng);
        Ok((
            vec![vp.clone(), m.clone(), zw.clone(), zb.clone()],
            Box::new(move || projected_loss(&zeta_embed(&vp, &m, &zw, &zb, 3, 2)?, &p)),
        ))
    })?);

    items.push(run_item("append-coords", seeds.clone(), |rng| {
        let rel = param(rng, &[1, 2, 9, 3, 3], -2.0, 2.0);
        let p = Tensor::rand_uniform(&[1, 4, 9, 3, 3], -1.0, 1.0, rng);
        Ok((
            vec![rel.clone()],
            Box::new(move || projected_loss(&append_footprint_coords(&rel, 3)?, &p)),
        ))
    })?);

    items.push(run_item("linear-axis1", seeds.clone(), |rng| {
        let x = param(rng, &[2, 3, 2, 2], -2.0, 2.0);
        let w = param(rng, &[4, 3], -1.0, 1.0);
        let b = param(rng, &[4], -1.0, 1.0);
        let p = Tensor::rand_uniform(&[2, 4, 2, 2], -1.0, 1.0, rng);
        Ok((
            vec![x.clone(), w.clone(), b.clone()],
            Box::new(move || projected_loss(&linear_axis1(&x, &w, Some(&b))?, &p)),
        ))
    })?);

    items.push(run_item("channel-scale-shift", seeds.clone(), |rng| {
        let x = param(rng, &[2, 3, 4], -2.0, 2.0);
        let s = param(rng, &[3], 0.2, 2.0);
        let h = param(rng, &[3], -1.0, 1.0);
        let p = Tensor::rand_uniform(&[2, 3, 4], -1.0, 1.0, rng);
        Ok((
            vec![x.clone(), s.clone(), h.clone()],
            Box::new(move || projected_loss(&channel_scale_shift(&x, &s, &h)?, &p)),
        ))
    })?);

    items.push(run_item("bn-norm", seeds.clone(), |rng| {
        let x = param(rng, &[4, 3, 2, 2], -2.0, 2.0);
        let p = Tensor::rand_uniform(&[4, 3, 2, 2], -1.0, 1.0, rng);
        Ok((
            vec![x.clone()],
            Box::new(move || projected_loss(&bn_norm(&x, 1e-5)?.0, &p)),
        ))
    })?);

    items.push(run_item("batchnorm-train", seeds.clone(), |rng| {
        let bn = std::rc::Rc::new(BatchNormLayer::new(3));
        bn.gamma.update_data(|g| {
            for v in g.iter_mut() {
                *v = rng.random_range(0.5..1.5);
            }
        });
        bn.beta.update_data(|b| {
            for v in b.iter_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        });
        let x = param(rng, &[4, 3, 2, 2], -2.0, 2.0);
        let p = Tensor::rand_uniform(&[4, 3, 2, 2], -1.0, 1.0, rng);
        let leaves = vec![x.clone(), bn.gamma.clone(), bn.beta.clone()];
        Ok((
            leaves,
            Box::new(move || projected_loss(&bn.forward(&x, Mode::Train)?, &p)),
        ))
    })?);

    items.push(run_item("linear-layer", seeds.clone(), |rng| {
        let layer = std::rc::Rc::new(LinearLayer::new(5, 3, true, rng));
        let x = param(rng, &[4, 5], -2.0, 2.0);
        let p = Tensor::rand_uniform(&[4, 3], -1.0, 1.0, rng);
        let leaves = vec![
            x.clone(),
            layer.weight.clone(),
            layer.bias.as_ref().unwrap().clone(),
        ];
        Ok((leaves, Box::new(move || projected_loss(&layer.forward(&x)?, &p))))
    })?);

    items.push(run_item("relu", seeds.clone(), |rng| {
        let x = margin_param(rng, &[3, 5]);
        let p = Tensor::rand_uniform(&[3, 5], -1.0, 1.0, rng);
        Ok((vec![x.clone()], Box::new(move || projected_loss(&x.relu()?, &p))))
    })?);

    items.push(run_item("maxpool2", seeds.clone(), |rng| {
        let x = distinct_param(rng, &[2, 5, 5]);
        let p = Tensor::rand_uniform(&[2, 3, 3], -1.0, 1.0, rng);
        Ok((
            vec![x.clone()],
            Box::new(move || projected_loss(&x.maxpool2()?, &p)),
        ))
    })?);

    items.push(run_item("global-avg-pool", seeds.clone(), |rng| {
        let x = param(rng, &[2, 3, 4, 4], -2.0, 2.0);
        let p = Tensor::rand_uniform(&[2, 3], -1.0, 1.0, rng);
        Ok((
            vec![x.clone()],
            Box::new(move || projected_loss(&x.global_avg_pool()?, &p)),
        ))
    })?);

    items.push(run_item("cross-entropy", seeds.clone(), |rng| {
        let x = param(rng, &[4, 5], -2.0, 2.0);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        Ok((
            vec![x.clone()],
            Box::new(move || x.cross_entropy(&labels)),
        ))
    })?);

    items.push(run_item("ses-block-k7", seeds, |rng| {
        build_ses_block_check(rng, false)
    })?);

    Ok(items)
}

/// Full self-attention block under finite differences: every parameter plus
/// the input, train-mode normalization, projected scalar loss.
pub fn build_ses_block_check(
    rng: &mut ChaCha12Rng,
    ablation: bool,
) -> Result<(Vec<Tensor>, Box<dyn Fn() -> Result<Tensor>>)> {
    let mut cfg = SesLayerConfig::new(16, 16, 7, 1, 4, 4);
    cfg.positional_encoding = ablation;
    cfg.zeta_passthrough = ablation;
    let layer = std::rc::Rc::new(SesLayer::new(cfg, rng)?);
    let x = param(rng, &[1, 16, 6, 6], -1.5, 1.5);
    let p = Tensor::rand_uniform(&[1, 16, 6, 6], -1.0, 1.0, rng);
    let mut leaves = vec![x.clone()];
    collect_ses_params(&layer, &mut leaves);
    let l2 = std::rc::Rc::clone(&layer);
    Ok((
        leaves,
        Box::new(move || projected_loss(&l2.forward_batch(&x, &x, &x, Mode::Train)?, &p)),
    ))
}

fn collect_ses_params(layer: &SesLayer, out: &mut Vec<Tensor>) {
    let mut push_linear = |l: &LinearLayer| {
        out.push(l.weight.clone());
        if let Some(b) = &l.bias {
            out.push(b.clone());
        }
    };
    push_linear(&layer.lin_v);
    push_linear(&layer.lin_q);
    push_linear(&layer.lin_k);
    push_linear(&layer.gamma_lin1);
    push_linear(&layer.gamma_lin2);
    if let Some(z) = &layer.zeta {
        push_linear(z);
    }
    push_linear(&layer.lin_out);
    out.push(layer.gamma_bn1.gamma.clone());
    out.push(layer.gamma_bn1.beta.clone());
    out.push(layer.gamma_bn2.gamma.clone());
    out.push(layer.gamma_bn2.beta.clone());
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_two_seeds() {
        for item in gradcheck_suite(0..2).unwrap() {
            assert!(
                item.passed(),
                "{}: max rel err {} over {} coords",
                item.name,
                item.max_rel_err,
                item.coords_checked
            );
        }
    }
}
