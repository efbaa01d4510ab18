//! Tensor operations and their backward rules.
//!
//! Every op validates shapes up front, computes its result into a fresh
//! buffer, and (when tracking is enabled) records a [`Node`] carrying the
//! saved state its backward rule needs. Footprint-indexed ops (unfold,
//! pairwise difference, mask aggregation, transformation embedding) share
//! the row-major k x k offset enumeration from [`footprint_offsets`].

use crate::error::{Error, Result};
use crate::tensor::{grad_enabled, Node, Tensor};

/// Row-major footprint offsets for an odd kernel: j = r*k + c maps to
/// (dy, dx) = (r - pad, c - pad) with pad = (k - 1) / 2.
pub(crate) fn footprint_offsets(k: usize) -> Vec<(isize, isize)> {
    let pad = (k / 2) as isize;
    let mut out = Vec::with_capacity(k * k);
    for r in 0..k as isize {
        for c in 0..k as isize {
            out.push((r - pad, c - pad));
        }
    }
    out
}

fn check_odd_kernel(k: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::invalid(format!("kernel size must be odd, got {k}")));
    }
    Ok(())
}

/// Batch-normalization batch statistics, reported per channel.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum EwKind {
    Add,
    Sub,
    Mul,
}

pub(crate) enum Op {
    Elementwise { kind: EwKind, tile: usize },
    AddScalar,
    MulScalar(f64),
    Matmul,
    Transpose2,
    Reshape,
    Softmax { axes: Vec<usize> },
    Unfold { k: usize },
    PairwiseDiff { k: usize },
    Aggregate { k: usize, r3: usize },
    ZetaEmbed { k: usize, r3: usize },
    AppendCoords { k: usize },
    LinearAxis1,
    ChannelScaleShift,
    BnNorm { inv_std: Vec<f64> },
    Relu,
    MaxPool2 { argmax: Vec<usize> },
    GlobalAvgPool,
    SumAll,
    CrossEntropy { labels: Vec<usize>, lse: Vec<f64> },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Elementwise { kind: EwKind::Add, .. } => "add",
            Op::Elementwise { kind: EwKind::Sub, .. } => "sub",
            Op::Elementwise { kind: EwKind::Mul, .. } => "mul",
            Op::AddScalar => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::Matmul => "matmul",
            Op::Transpose2 => "transpose2",
            Op::Reshape => "reshape",
            Op::Softmax { .. } => "softmax",
            Op::Unfold { .. } => "unfold",
            Op::PairwiseDiff { .. } => "pairwise_diff",
            Op::Aggregate { .. } => "aggregate",
            Op::ZetaEmbed { .. } => "zeta_embed",
            Op::AppendCoords { .. } => "append_coords",
            Op::LinearAxis1 => "linear_axis1",
            Op::ChannelScaleShift => "channel_scale_shift",
            Op::BnNorm { .. } => "bn_norm",
            Op::Relu => "relu",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::SumAll => "sum_all",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

fn make(op: Op, inputs: Vec<Tensor>, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    let tracked = grad_enabled() && inputs.iter().any(Tensor::is_tracked);
    let node = tracked.then(|| Node { op, inputs });
    Tensor::from_op(shape, data, node)
}

fn axpy(factor: f64, src: &[f64], dst: &mut [f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = s.mul_add(factor, *d);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators so the FMA chain pipelines.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] = a[i * 4 + l].mul_add(b[i * 4 + l], acc[l]);
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s = a[i].mul_add(b[i], s);
    }
    s
}

/// Fast branch-free exp for softmax rows, where inputs are shifted to lie in
/// (-inf, 0]. Cephes-style: 2^k * poly(r) with x = k ln2 + r. Inputs below
/// -700 flush to zero (their softmax mass is far beyond representable);
/// accuracy on [-700, 0] is ~1 ulp.
#[inline]
pub(crate) fn exp_fast(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let xc = x.clamp(-700.0, 700.0);
    let k = (xc * LOG2E).round();
    let r = (-k).mul_add(LN2_LO, (-k).mul_add(LN2_HI, xc));
    // exp(r) on [-ln2/2, ln2/2], degree-11 Horner form.
    let mut p: f64 = 1.0 / 39_916_800.0;
    for &c in &[
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p.mul_add(r, c);
    }
    // 2^k via exponent bits; k in [-1010, 1010] after the clamp.
    let scale = f64::from_bits(((k as i64 + 1023) as u64) << 52);
    let v = p * scale;
    // Flush the clamped-underflow region to zero without a branch.
    if x < -700.0 {
        0.0
    } else {
        v
    }
}

/// View helper: interprets a shape as [A, C, B] with the channel axis at
/// position 1 and all trailing axes flattened into B.
fn axis1_view(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(format!(
            "channel-axis op needs rank >= 2, got shape {shape:?}"
        )));
    }
    let a = shape[0];
    let c = shape[1];
    let b = shape[2..].iter().product::<usize>().max(1);
    Ok((a, c, b))
}

fn trailing_hw(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(format!(
            "spatial op needs rank >= 2, got shape {shape:?}"
        )));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    let lead = shape[..shape.len() - 2].iter().product::<usize>().max(1);
    Ok((lead, h, w))
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

impl Tensor {
    fn elementwise(&self, other: &Tensor, kind: EwKind) -> Result<Tensor> {
        let (ashape, bshape) = (self.shape(), other.shape());
        if bshape.len() > ashape.len() || bshape != &ashape[ashape.len() - bshape.len()..] {
            return Err(Error::shape(format!(
                "elementwise operands {ashape:?} and {bshape:?}: second must equal the first or a trailing suffix of it"
            )));
        }
        let tile = other.numel();
        let a = self.data();
        let b = other.data();
        let mut out = Vec::with_capacity(a.len());
        for chunk in a.chunks_exact(tile) {
            match kind {
                EwKind::Add => out.extend(chunk.iter().zip(b.iter()).map(|(x, y)| x + y)),
                EwKind::Sub => out.extend(chunk.iter().zip(b.iter()).map(|(x, y)| x - y)),
                EwKind::Mul => out.extend(chunk.iter().zip(b.iter()).map(|(x, y)| x * y)),
            }
        }
        drop(a);
        drop(b);
        let shape = self.shape().to_vec();
        Ok(make(
            Op::Elementwise { kind, tile },
            vec![self.clone(), other.clone()],
            shape,
            out,
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, EwKind::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, EwKind::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, EwKind::Mul)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|v| v + s).collect();
        make(Op::AddScalar, vec![self.clone()], self.shape().to_vec(), data)
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * s).collect();
        make(Op::MulScalar(s), vec![self.clone()], self.shape().to_vec(), data)
    }
}

// ---------------------------------------------------------------------------
// matmul / transpose / reshape
// ---------------------------------------------------------------------------

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], crow);
        }
    }
    c
}

impl Tensor {
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape(format!(
                "matmul needs rank-2 operands, got {sa:?} x {sb:?}"
            )));
        }
        if sa[1] != sb[0] {
            return Err(Error::shape(format!(
                "matmul inner dimensions disagree: {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(&self.data(), &other.data(), m, k, n);
        Ok(make(
            Op::Matmul,
            vec![self.clone(), other.clone()],
            vec![m, n],
            out,
        ))
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape(format!(
                "transpose2 needs a rank-2 tensor, got {s:?}"
            )));
        }
        let (m, n) = (s[0], s[1]);
        let a = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        drop(a);
        Ok(make(Op::Transpose2, vec![self.clone()], vec![n, m], out))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || numel != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} values) to {shape:?}",
                self.shape(),
                self.numel()
            )));
        }
        let tracked = grad_enabled() && self.is_tracked();
        let node = tracked.then(|| Node {
            op: Op::Reshape,
            inputs: vec![self.clone()],
        });
        // Shares the underlying buffer; reshape is metadata-only.
        Ok(Tensor::from_shared(shape.to_vec(), self.data_rc(), node))
    }
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

fn validate_axes(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    if axes.is_empty() {
        return Err(Error::invalid("softmax axes set must be non-empty"));
    }
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if let Some(&bad) = sorted.iter().find(|&&a| a >= shape.len()) {
        return Err(Error::invalid(format!(
            "softmax axis {bad} out of range for shape {shape:?}"
        )));
    }
    Ok(sorted)
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// Flat offsets of every multi-index over `dims` with the given strides.
fn enumerate_offsets(dims: &[usize], strides: &[usize]) -> Vec<usize> {
    let count: usize = dims.iter().product::<usize>().max(1);
    let mut out = Vec::with_capacity(count);
    let mut idx = vec![0usize; dims.len()];
    for _ in 0..count {
        out.push(idx.iter().zip(strides).map(|(i, s)| i * s).sum());
        for d in (0..dims.len()).rev() {
            idx[d] += 1;
            if idx[d] < dims[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn softmax_groups(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let strides = strides_of(shape);
    let sel_dims: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let sel_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let outer: Vec<usize> = (0..shape.len()).filter(|d| !axes.contains(d)).collect();
    let outer_dims: Vec<usize> = outer.iter().map(|&d| shape[d]).collect();
    let outer_strides: Vec<usize> = outer.iter().map(|&d| strides[d]).collect();
    (
        enumerate_offsets(&outer_dims, &outer_strides),
        enumerate_offsets(&sel_dims, &sel_strides),
    )
}

impl Tensor {
    /// Numerically stabilized softmax over the flattened set of `axes`:
    /// for every index of the unselected axes, the selected entries are
    /// non-negative and sum to 1.
    pub fn softmax(&self, axes: &[usize]) -> Result<Tensor> {
        let axes = validate_axes(self.shape(), axes)?;
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        if axes.len() == 1 {
            let ax = axes[0];
            let shape = self.shape();
            let outer: usize = shape[..ax].iter().product::<usize>().max(1);
            let rep = shape[ax];
            let inner: usize = shape[ax + 1..].iter().product::<usize>().max(1);
            softmax_fwd_single(&x, &mut out, outer, rep, inner);
        } else {
            let (outer_offsets, sel_offsets) = softmax_groups(self.shape(), &axes);
            for &base in &outer_offsets {
                let mut mx = f64::NEG_INFINITY;
                for &s in &sel_offsets {
                    mx = mx.max(x[base + s]);
                }
                let mut sum = 0.0;
                for &s in &sel_offsets {
                    let e = exp_fast(x[base + s] - mx);
                    out[base + s] = e;
                    sum += e;
                }
                for &s in &sel_offsets {
                    out[base + s] /= sum;
                }
            }
        }
        drop(x);
        Ok(make(
            Op::Softmax { axes },
            vec![self.clone()],
            self.shape().to_vec(),
            out,
        ))
    }
}

fn softmax_fwd_single(x: &[f64], out: &mut [f64], outer: usize, rep: usize, inner: usize) {
    if inner == 1 {
        for o in 0..outer {
            let row = &x[o * rep..(o + 1) * rep];
            let orow = &mut out[o * rep..(o + 1) * rep];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (dst, &v) in orow.iter_mut().zip(row) {
                let e = exp_fast(v - mx);
                *dst = e;
                sum += e;
            }
            for dst in orow.iter_mut() {
                *dst /= sum;
            }
        }
        return;
    }
    let mut mx = vec![0.0; inner];
    let mut sum = vec![0.0; inner];
    for o in 0..outer {
        let base = o * rep * inner;
        mx.fill(f64::NEG_INFINITY);
        sum.fill(0.0);
        for r in 0..rep {
            let row = &x[base + r * inner..base + (r + 1) * inner];
            for (m, &v) in mx.iter_mut().zip(row) {
                if v > *m {
                    *m = v;
                }
            }
        }
        for r in 0..rep {
            let row = &x[base + r * inner..base + (r + 1) * inner];
            let orow = &mut out[base + r * inner..base + (r + 1) * inner];
            for t in 0..inner {
                let e = exp_fast(row[t] - mx[t]);
                orow[t] = e;
                sum[t] += e;
            }
        }
        for r in 0..rep {
            let orow = &mut out[base + r * inner..base + (r + 1) * inner];
            for t in 0..inner {
                orow[t] /= sum[t];
            }
        }
    }
}

fn softmax_bwd(
    y: &[f64],
    g: &[f64],
    shape: &[usize],
    axes: &[usize],
) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    if axes.len() == 1 {
        let ax = axes[0];
        let outer: usize = shape[..ax].iter().product::<usize>().max(1);
        let rep = shape[ax];
        let inner: usize = shape[ax + 1..].iter().product::<usize>().max(1);
        let mut s = vec![0.0; inner];
        for o in 0..outer {
            let base = o * rep * inner;
            s.fill(0.0);
            for r in 0..rep {
                let off = base + r * inner;
                for t in 0..inner {
                    s[t] += g[off + t] * y[off + t];
                }
            }
            for r in 0..rep {
                let off = base + r * inner;
                for t in 0..inner {
                    dx[off + t] = y[off + t] * (g[off + t] - s[t]);
                }
            }
        }
    } else {
        let (outer_offsets, sel_offsets) = softmax_groups(shape, axes);
        for &base in &outer_offsets {
            let mut s = 0.0;
            for &off in &sel_offsets {
                s += g[base + off] * y[base + off];
            }
            for &off in &sel_offsets {
                dx[base + off] = y[base + off] * (g[base + off] - s);
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// unfold and footprint-indexed ops
// ---------------------------------------------------------------------------

impl Tensor {
    /// Sliding-window extraction over the trailing two axes with zero
    /// padding: `[..., H, W] -> [..., k*k, H, W]`, entry `[.., j, h, w] =
    /// x[.., h + dy(j) - pad, w + dx(j) - pad]`.
    pub fn unfold(&self, k: usize) -> Result<Tensor> {
        check_odd_kernel(k)?;
        let (lead, h, w) = trailing_hw(self.shape())?;
        let offs = footprint_offsets(k);
        let k2 = k * k;
        let x = self.data();
        let mut out = vec![0.0; lead * k2 * h * w];
        for l in 0..lead {
            let xin = &x[l * h * w..(l + 1) * h * w];
            for (j, &(dy, dx)) in offs.iter().enumerate() {
                let obase = (l * k2 + j) * h * w;
                for r in 0..h {
                    let sr = r as isize + dy;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let (c0, c1) = col_range(w, dx);
                    if c0 >= c1 {
                        continue;
                    }
                    let src = &xin[sr as usize * w + (c0 as isize + dx) as usize..];
                    out[obase + r * w + c0..obase + r * w + c1]
                        .copy_from_slice(&src[..c1 - c0]);
                }
            }
        }
        drop(x);
        let mut shape = self.shape().to_vec();
        shape.insert(shape.len() - 2, k2);
        Ok(make(Op::Unfold { k }, vec![self.clone()], shape, out))
    }
}

/// Valid destination column range [c0, c1) such that c + dx stays in [0, w).
fn col_range(w: usize, dx: isize) -> (usize, usize) {
    let c0 = if dx < 0 { (-dx) as usize } else { 0 };
    let c1 = if dx > 0 { w.saturating_sub(dx as usize) } else { w };
    (c0.min(w), c1)
}

fn unfold_bwd(g: &[f64], shape_in: &[usize], k: usize) -> Vec<f64> {
    let (lead, h, w) = trailing_hw(shape_in).expect("validated in forward");
    let offs = footprint_offsets(k);
    let k2 = k * k;
    let mut dx = vec![0.0; lead * h * w];
    for l in 0..lead {
        let dxin = &mut dx[l * h * w..(l + 1) * h * w];
        for (j, &(dy, dxo)) in offs.iter().enumerate() {
            let gbase = (l * k2 + j) * h * w;
            for r in 0..h {
                let sr = r as isize + dy;
                if sr < 0 || sr >= h as isize {
                    continue;
                }
                let (c0, c1) = col_range(w, dxo);
                if c0 >= c1 {
                    continue;
                }
                let dst0 = sr as usize * w + (c0 as isize + dxo) as usize;
                let grow = &g[gbase + r * w + c0..gbase + r * w + c1];
                for (t, gv) in grow.iter().enumerate() {
                    dxin[dst0 + t] += gv;
                }
            }
        }
    }
    dx
}

/// Pairwise relation tensor: center query minus unfolded key, with zero
/// padding outside the map. Inputs are [N, C, H, W]; output [N, C, k*k, H, W].
pub fn pairwise_diff(q: &Tensor, key: &Tensor, k: usize) -> Result<Tensor> {
    check_odd_kernel(k)?;
    if q.shape() != key.shape() || q.rank() != 4 {
        return Err(Error::shape(format!(
            "pairwise_diff needs two aligned [N,C,H,W] tensors, got {:?} and {:?}",
            q.shape(),
            key.shape()
        )));
    }
    let (n, c, h, w) = (q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]);
    let lead = n * c;
    let offs = footprint_offsets(k);
    let k2 = k * k;
    let qd = q.data();
    let kd = key.data();
    let mut out = vec![0.0; lead * k2 * h * w];
    for l in 0..lead {
        let qin = &qd[l * h * w..(l + 1) * h * w];
        let kin = &kd[l * h * w..(l + 1) * h * w];
        for (j, &(dy, dx)) in offs.iter().enumerate() {
            let obase = (l * k2 + j) * h * w;
            for r in 0..h {
                let orow = &mut out[obase + r * w..obase + (r + 1) * w];
                orow.copy_from_slice(&qin[r * w..(r + 1) * w]);
                let sr = r as isize + dy;
                if sr < 0 || sr >= h as isize {
                    continue;
                }
                let (c0, c1) = col_range(w, dx);
                if c0 >= c1 {
                    continue;
                }
                let src = &kin[sr as usize * w + (c0 as isize + dx) as usize..];
                for (t, dst) in orow[c0..c1].iter_mut().enumerate() {
                    *dst -= src[t];
                }
            }
        }
    }
    drop(qd);
    drop(kd);
    Ok(make(
        Op::PairwiseDiff { k },
        vec![q.clone(), key.clone()],
        vec![n, c, k2, h, w],
        out,
    ))
}

fn pairwise_diff_bwd(
    g: &[f64],
    shape_in: &[usize],
    k: usize,
    want_q: bool,
    want_k: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (n, c, h, w) = (shape_in[0], shape_in[1], shape_in[2], shape_in[3]);
    let lead = n * c;
    let offs = footprint_offsets(k);
    let k2 = k * k;
    let mut dq = want_q.then(|| vec![0.0; lead * h * w]);
    let mut dk = want_k.then(|| vec![0.0; lead * h * w]);
    for l in 0..lead {
        for (j, &(dy, dx)) in offs.iter().enumerate() {
            let gbase = (l * k2 + j) * h * w;
            for r in 0..h {
                let grow = &g[gbase + r * w..gbase + (r + 1) * w];
                if let Some(dq) = dq.as_mut() {
                    let qrow = &mut dq[l * h * w + r * w..l * h * w + (r + 1) * w];
                    for (d, gv) in qrow.iter_mut().zip(grow) {
                        *d += gv;
                    }
                }
                if let Some(dk) = dk.as_mut() {
                    let sr = r as isize + dy;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let (c0, c1) = col_range(w, dx);
                    if c0 >= c1 {
                        continue;
                    }
                    let dst0 = l * h * w + sr as usize * w + (c0 as isize + dx) as usize;
                    for (t, gv) in grow[c0..c1].iter().enumerate() {
                        dk[dst0 + t] -= gv;
                    }
                }
            }
        }
    }
    (dq, dk)
}

/// Mask-weighted aggregation: each group of `r3` consecutive value channels
/// shares one mask channel. `v` is [N, C, H, W], `masks` [N, C/r3, k*k, H, W];
/// output [N, C, H, W] with
/// `out[n,c,h,w] = sum_j masks[n, c/r3, j, h, w] * v[n, c, h+dy(j)-pad, w+dx(j)-pad]`.
pub fn aggregate(v: &Tensor, masks: &Tensor, k: usize, r3: usize) -> Result<Tensor> {
    check_odd_kernel(k)?;
    let k2 = k * k;
    if v.rank() != 4 || masks.rank() != 5 {
        return Err(Error::shape(format!(
            "aggregate needs v [N,C,H,W] and masks [N,Cw,k2,H,W], got {:?} and {:?}",
            v.shape(),
            masks.shape()
        )));
    }
    let (n, c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
    if r3 == 0 || c % r3 != 0 {
        return Err(Error::invalid(format!(
            "mask sharing factor {r3} must divide the value channel count {c}"
        )));
    }
    let cw = c / r3;
    if masks.shape() != [n, cw, k2, h, w] {
        return Err(Error::shape(format!(
            "mask shape {:?} does not match [{n}, {cw}, {k2}, {h}, {w}]",
            masks.shape()
        )));
    }
    let offs = footprint_offsets(k);
    let vd = v.data();
    let md = masks.data();
    let mut out = vec![0.0; n * c * h * w];
    for ni in 0..n {
        for ci in 0..c {
            let m = ci / r3;
            let vin = &vd[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            let obase = (ni * c + ci) * h * w;
            for (j, &(dy, dx)) in offs.iter().enumerate() {
                let mbase = ((ni * cw + m) * k2 + j) * h * w;
                for r in 0..h {
                    let sr = r as isize + dy;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let (c0, c1) = col_range(w, dx);
                    if c0 >= c1 {
                        continue;
                    }
                    let src = &vin[sr as usize * w + (c0 as isize + dx) as usize..];
                    let mrow = &md[mbase + r * w + c0..mbase + r * w + c1];
                    let orow = &mut out[obase + r * w + c0..obase + r * w + c1];
                    for t in 0..c1 - c0 {
                        orow[t] = mrow[t].mul_add(src[t], orow[t]);
                    }
                }
            }
        }
    }
    drop(vd);
    drop(md);
    Ok(make(
        Op::Aggregate { k, r3 },
        vec![v.clone(), masks.clone()],
        vec![n, c, h, w],
        out,
    ))
}

#[allow(clippy::too_many_arguments)]
fn aggregate_bwd(
    g: &[f64],
    vd: &[f64],
    md: &[f64],
    vshape: &[usize],
    k: usize,
    r3: usize,
    want_v: bool,
    want_m: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (n, c, h, w) = (vshape[0], vshape[1], vshape[2], vshape[3]);
    let cw = c / r3;
    let k2 = k * k;
    let offs = footprint_offsets(k);
    let mut dv = want_v.then(|| vec![0.0; n * c * h * w]);
    let mut dm = want_m.then(|| vec![0.0; n * cw * k2 * h * w]);
    for ni in 0..n {
        for ci in 0..c {
            let m = ci / r3;
            let plane = (ni * c + ci) * h * w;
            let vin = &vd[plane..plane + h * w];
            for (j, &(dy, dx)) in offs.iter().enumerate() {
                let mbase = ((ni * cw + m) * k2 + j) * h * w;
                for r in 0..h {
                    let sr = r as isize + dy;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let (c0, c1) = col_range(w, dx);
                    if c0 >= c1 {
                        continue;
                    }
                    let shifted0 = sr as usize * w + (c0 as isize + dx) as usize;
                    let grow = &g[plane + r * w + c0..plane + r * w + c1];
                    let mrow = &md[mbase + r * w + c0..mbase + r * w + c1];
                    if let Some(dv) = dv.as_mut() {
                        let dst = &mut dv[plane + shifted0..plane + shifted0 + (c1 - c0)];
                        for t in 0..c1 - c0 {
                            dst[t] = grow[t].mul_add(mrow[t], dst[t]);
                        }
                    }
                    if let Some(dm) = dm.as_mut() {
                        let src = &vin[shifted0..shifted0 + (c1 - c0)];
                        let dst = &mut dm[mbase + r * w + c0..mbase + r * w + c1];
                        for t in 0..c1 - c0 {
                            dst[t] = grow[t].mul_add(src[t], dst[t]);
                        }
                    }
                }
            }
        }
    }
    (dv, dm)
}

/// Shared-weight transformation embedding: at every channel and position the
/// same affine map sends the aggregated feature scalar plus its k*k mask to
/// one output scalar. `weight` has 1 + k*k coefficients, `bias` one.
pub fn zeta_embed(
    v_prime: &Tensor,
    masks: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    k: usize,
    r3: usize,
) -> Result<Tensor> {
    check_odd_kernel(k)?;
    let k2 = k * k;
    if v_prime.rank() != 4 || masks.rank() != 5 {
        return Err(Error::shape(format!(
            "zeta_embed needs v' [N,C,H,W] and masks [N,Cw,k2,H,W], got {:?} and {:?}",
            v_prime.shape(),
            masks.shape()
        )));
    }
    let (n, c, h, w) = (
        v_prime.shape()[0],
        v_prime.shape()[1],
        v_prime.shape()[2],
        v_prime.shape()[3],
    );
    if r3 == 0 || c % r3 != 0 {
        return Err(Error::invalid(format!(
            "mask sharing factor {r3} must divide the channel count {c}"
        )));
    }
    let cw = c / r3;
    if masks.shape() != [n, cw, k2, h, w] {
        return Err(Error::shape(format!(
            "mask shape {:?} does not match [{n}, {cw}, {k2}, {h}, {w}]",
            masks.shape()
        )));
    }
    if weight.numel() != 1 + k2 || bias.numel() != 1 {
        return Err(Error::shape(format!(
            "zeta arity mismatch: weight needs {} values and bias 1, got {} and {}",
            1 + k2,
            weight.numel(),
            bias.numel()
        )));
    }
    let vp = v_prime.data();
    let md = masks.data();
    let zw = weight.data();
    let zb = bias.data()[0];
    let hw = h * w;
    let mut out = vec![0.0; n * c * hw];
    for ni in 0..n {
        for ci in 0..c {
            let m = ci / r3;
            let plane = (ni * c + ci) * hw;
            let orow = &mut out[plane..plane + hw];
            let vrow = &vp[plane..plane + hw];
            for t in 0..hw {
                orow[t] = zw[0].mul_add(vrow[t], zb);
            }
            for j in 0..k2 {
                let mbase = ((ni * cw + m) * k2 + j) * hw;
                axpy(zw[1 + j], &md[mbase..mbase + hw], orow);
            }
        }
    }
    drop(vp);
    drop(md);
    drop(zw);
    Ok(make(
        Op::ZetaEmbed { k, r3 },
        vec![v_prime.clone(), masks.clone(), weight.clone(), bias.clone()],
        vec![n, c, h, w],
        out,
    ))
}

fn zeta_bwd(
    g: &[f64],
    inputs: &[Tensor],
    k: usize,
    r3: usize,
    wants: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let v_prime = &inputs[0];
    let masks = &inputs[1];
    let weight = &inputs[2];
    let (n, c, h, w) = (
        v_prime.shape()[0],
        v_prime.shape()[1],
        v_prime.shape()[2],
        v_prime.shape()[3],
    );
    let cw = c / r3;
    let k2 = k * k;
    let hw = h * w;
    let vp = v_prime.data();
    let md = masks.data();
    let zw = weight.data();

    let mut dvp = wants[0].then(|| vec![0.0; n * c * hw]);
    let mut dm = wants[1].then(|| vec![0.0; n * cw * k2 * hw]);
    let mut dzw = wants[2].then(|| vec![0.0; 1 + k2]);
    let mut dzb = wants[3].then(|| vec![0.0; 1]);

    // Group-summed upstream gradient, reused by the mask and weight paths.
    let mut gsum = vec![0.0; n * cw * hw];
    for ni in 0..n {
        for ci in 0..c {
            let m = ci / r3;
            let src = &g[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            let dst = &mut gsum[(ni * cw + m) * hw..(ni * cw + m + 1) * hw];
            for t in 0..hw {
                dst[t] += src[t];
            }
        }
    }

    if let Some(dvp) = dvp.as_mut() {
        for (d, gv) in dvp.iter_mut().zip(g) {
            *d = zw[0] * gv;
        }
    }
    if let Some(dm) = dm.as_mut() {
        for ni in 0..n {
            for m in 0..cw {
                let grow = &gsum[(ni * cw + m) * hw..(ni * cw + m + 1) * hw];
                for j in 0..k2 {
                    let mbase = ((ni * cw + m) * k2 + j) * hw;
                    axpy(zw[1 + j], grow, &mut dm[mbase..mbase + hw]);
                }
            }
        }
    }
    if let Some(dzw) = dzw.as_mut() {
        dzw[0] = dot(g, &vp);
        for ni in 0..n {
            for m in 0..cw {
                let grow = &gsum[(ni * cw + m) * hw..(ni * cw + m + 1) * hw];
                for j in 0..k2 {
                    let mbase = ((ni * cw + m) * k2 + j) * hw;
                    dzw[1 + j] += dot(grow, &md[mbase..mbase + hw]);
                }
            }
        }
    }
    if let Some(dzb) = dzb.as_mut() {
        dzb[0] = g.iter().sum();
    }
    vec![dvp, dm, dzw, dzb]
}

/// Appends two fixed channels of normalized footprint offsets (dy/pad,
/// dx/pad) to a relation tensor [N, C, k*k, H, W]. Used by the ablation that
/// restores positional encoding in front of the mask regressor.
pub fn append_footprint_coords(rel: &Tensor, k: usize) -> Result<Tensor> {
    check_odd_kernel(k)?;
    let k2 = k * k;
    if rel.rank() != 5 || rel.shape()[2] != k2 {
        return Err(Error::shape(format!(
            "append_footprint_coords needs [N,C,{k2},H,W], got {:?}",
            rel.shape()
        )));
    }
    let (n, c, h, w) = (rel.shape()[0], rel.shape()[1], rel.shape()[3], rel.shape()[4]);
    let hw = h * w;
    let pad = (k / 2) as f64;
    let offs = footprint_offsets(k);
    let x = rel.data();
    let mut out = vec![0.0; n * (c + 2) * k2 * hw];
    for ni in 0..n {
        let src = &x[ni * c * k2 * hw..(ni + 1) * c * k2 * hw];
        let dst0 = ni * (c + 2) * k2 * hw;
        out[dst0..dst0 + c * k2 * hw].copy_from_slice(src);
        for (j, &(dy, dx)) in offs.iter().enumerate() {
            let ynorm = if pad > 0.0 { dy as f64 / pad } else { 0.0 };
            let xnorm = if pad > 0.0 { dx as f64 / pad } else { 0.0 };
            let ybase = dst0 + (c * k2 + j) * hw;
            let xbase = dst0 + ((c + 1) * k2 + j) * hw;
            out[ybase..ybase + hw].fill(ynorm);
            out[xbase..xbase + hw].fill(xnorm);
        }
    }
    drop(x);
    Ok(make(
        Op::AppendCoords { k },
        vec![rel.clone()],
        vec![n, c + 2, k2, h, w],
        out,
    ))
}

// ---------------------------------------------------------------------------
// linear over the channel axis
// ---------------------------------------------------------------------------

const LIN_CHUNK: usize = 4096;

/// Affine map over axis 1: x viewed as [A, C, B] -> [A, O, B] with
/// `out[a,o,b] = sum_c w[o,c] x[a,c,b] + bias[o]`. Rank-2 inputs reduce to a
/// standard linear layer over the trailing feature axis.
pub fn linear_axis1(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (a, c, b) = axis1_view(x.shape())?;
    if weight.rank() != 2 || weight.shape()[1] != c {
        return Err(Error::shape(format!(
            "linear weight {:?} does not match input channels {c}",
            weight.shape()
        )));
    }
    let o = weight.shape()[0];
    if let Some(bt) = bias {
        if bt.numel() != o {
            return Err(Error::shape(format!(
                "linear bias length {} does not match output channels {o}",
                bt.numel()
            )));
        }
    }
    let xd = x.data();
    let wd = weight.data();
    let mut out = vec![0.0; a * o * b];
    for ai in 0..a {
        let xa = &xd[ai * c * b..(ai + 1) * c * b];
        let oa = &mut out[ai * o * b..(ai + 1) * o * b];
        if let Some(bt) = bias {
            let bd = bt.data();
            for oi in 0..o {
                oa[oi * b..(oi + 1) * b].fill(bd[oi]);
            }
        }
        let mut bs = 0;
        while bs < b {
            let be = (bs + LIN_CHUNK).min(b);
            // Two output rows per pass so each input chunk is read half as
            // often; rows are adjacent in `oa`, so split_at_mut works.
            let mut oi = 0;
            while oi + 2 <= o {
                let (r0, r1) = oa[oi * b..(oi + 2) * b].split_at_mut(b);
                let (r0, r1) = (&mut r0[bs..be], &mut r1[bs..be]);
                for ci in 0..c {
                    let (w0, w1) = (wd[oi * c + ci], wd[(oi + 1) * c + ci]);
                    let src = &xa[ci * b + bs..ci * b + be];
                    for t in 0..src.len() {
                        r0[t] = src[t].mul_add(w0, r0[t]);
                        r1[t] = src[t].mul_add(w1, r1[t]);
                    }
                }
                oi += 2;
            }
            if oi < o {
                let orow = &mut oa[oi * b + bs..oi * b + be];
                for ci in 0..c {
                    axpy(wd[oi * c + ci], &xa[ci * b + bs..ci * b + be], orow);
                }
            }
            bs = be;
        }
    }
    drop(xd);
    drop(wd);
    let mut shape = x.shape().to_vec();
    shape[1] = o;
    let mut inputs = vec![x.clone(), weight.clone()];
    if let Some(bt) = bias {
        inputs.push(bt.clone());
    }
    Ok(make(Op::LinearAxis1, inputs, shape, out))
}

fn linear_axis1_bwd(g: &[f64], inputs: &[Tensor], wants: &[bool]) -> Vec<Option<Vec<f64>>> {
    let x = &inputs[0];
    let weight = &inputs[1];
    let (a, c, b) = axis1_view(x.shape()).expect("validated in forward");
    let o = weight.shape()[0];
    let xd = x.data();
    let wd = weight.data();

    let mut dx = wants[0].then(|| vec![0.0; a * c * b]);
    let mut dw = wants[1].then(|| vec![0.0; o * c]);
    let mut db = (wants.len() > 2 && wants[2]).then(|| vec![0.0; o]);

    for ai in 0..a {
        let ga = &g[ai * o * b..(ai + 1) * o * b];
        if let Some(dx) = dx.as_mut() {
            let dxa = &mut dx[ai * c * b..(ai + 1) * c * b];
            let mut bs = 0;
            while bs < b {
                let be = (bs + LIN_CHUNK).min(b);
                for ci in 0..c {
                    let drow = &mut dxa[ci * b + bs..ci * b + be];
                    for oi in 0..o {
                        axpy(wd[oi * c + ci], &ga[oi * b + bs..oi * b + be], drow);
                    }
                }
                bs = be;
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xa = &xd[ai * c * b..(ai + 1) * c * b];
            for oi in 0..o {
                let grow = &ga[oi * b..(oi + 1) * b];
                for ci in 0..c {
                    dw[oi * c + ci] += dot(grow, &xa[ci * b..(ci + 1) * b]);
                }
            }
        }
        if let Some(db) = db.as_mut() {
            for oi in 0..o {
                db[oi] += ga[oi * b..(oi + 1) * b].iter().sum::<f64>();
            }
        }
    }
    let mut res = vec![dx, dw];
    if inputs.len() > 2 {
        res.push(db);
    }
    res
}

// ---------------------------------------------------------------------------
// channel scale/shift and batch-norm normalization
// ---------------------------------------------------------------------------

/// Per-channel affine over axis 1: `out[a,c,b] = x[a,c,b] * scale[c] + shift[c]`.
pub fn channel_scale_shift(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let (a, c, b) = axis1_view(x.shape())?;
    if scale.numel() != c || shift.numel() != c {
        return Err(Error::shape(format!(
            "scale/shift of lengths {}/{} do not match channel count {c}",
            scale.numel(),
            shift.numel()
        )));
    }
    let xd = x.data();
    let sd = scale.data();
    let hd = shift.data();
    let mut out = vec![0.0; a * c * b];
    for ai in 0..a {
        for ci in 0..c {
            let base = (ai * c + ci) * b;
            let (s, h) = (sd[ci], hd[ci]);
            for t in 0..b {
                out[base + t] = xd[base + t].mul_add(s, h);
            }
        }
    }
    drop(xd);
    drop(sd);
    drop(hd);
    Ok(make(
        Op::ChannelScaleShift,
        vec![x.clone(), scale.clone(), shift.clone()],
        x.shape().to_vec(),
        out,
    ))
}

fn channel_scale_shift_bwd(g: &[f64], inputs: &[Tensor], wants: &[bool]) -> Vec<Option<Vec<f64>>> {
    let x = &inputs[0];
    let scale = &inputs[1];
    let (a, c, b) = axis1_view(x.shape()).expect("validated in forward");
    let xd = x.data();
    let sd = scale.data();
    let mut dx = wants[0].then(|| vec![0.0; a * c * b]);
    let mut ds = wants[1].then(|| vec![0.0; c]);
    let mut dh = wants[2].then(|| vec![0.0; c]);
    for ai in 0..a {
        for ci in 0..c {
            let base = (ai * c + ci) * b;
            let grow = &g[base..base + b];
            if let Some(dx) = dx.as_mut() {
                let s = sd[ci];
                for t in 0..b {
                    dx[base + t] = grow[t] * s;
                }
            }
            if let Some(ds) = ds.as_mut() {
                ds[ci] += dot(grow, &xd[base..base + b]);
            }
            if let Some(dh) = dh.as_mut() {
                dh[ci] += grow.iter().sum::<f64>();
            }
        }
    }
    vec![dx, ds, dh]
}

/// Normalizes per channel (axis 1) with batch statistics over every other
/// axis: `out = (x - mean_c) / sqrt(max(var_c, 0) + eps)`. Returns the batch
/// statistics so callers can maintain running estimates. Variance is the
/// biased (1/M) estimator.
pub fn bn_norm(x: &Tensor, eps: f64) -> Result<(Tensor, BnStats)> {
    if eps <= 0.0 {
        return Err(Error::invalid(format!("bn eps must be positive, got {eps}")));
    }
    let (a, c, b) = axis1_view(x.shape())?;
    let m = (a * b) as f64;
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ai in 0..a {
        for ci in 0..c {
            let base = (ai * c + ci) * b;
            mean[ci] += xd[base..base + b].iter().sum::<f64>();
        }
    }
    for mv in mean.iter_mut() {
        *mv /= m;
    }
    for ai in 0..a {
        for ci in 0..c {
            let base = (ai * c + ci) * b;
            let mu = mean[ci];
            var[ci] += xd[base..base + b].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
    }
    for vv in var.iter_mut() {
        *vv = (*vv / m).max(0.0);
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0; a * c * b];
    for ai in 0..a {
        for ci in 0..c {
            let base = (ai * c + ci) * b;
            let (mu, is) = (mean[ci], inv_std[ci]);
            for t in 0..b {
                out[base + t] = (xd[base + t] - mu) * is;
            }
        }
    }
    drop(xd);
    let stats = BnStats { mean, var };
    let t = make(
        Op::BnNorm {
            inv_std: inv_std.clone(),
        },
        vec![x.clone()],
        x.shape().to_vec(),
        out,
    );
    Ok((t, stats))
}

fn bn_norm_bwd(g: &[f64], y: &[f64], shape: &[usize], inv_std: &[f64]) -> Vec<f64> {
    let (a, c, b) = axis1_view(shape).expect("validated in forward");
    let m = (a * b) as f64;
    let mut s1 = vec![0.0; c];
    let mut s2 = vec![0.0; c];
    for ai in 0..a {
        for ci in 0..c {
            let base = (ai * c + ci) * b;
            for t in 0..b {
                s1[ci] += g[base + t];
                s2[ci] += g[base + t] * y[base + t];
            }
        }
    }
    let mut dx = vec![0.0; g.len()];
    for ai in 0..a {
        for ci in 0..c {
            let base = (ai * c + ci) * b;
            let (is, m1, m2) = (inv_std[ci], s1[ci] / m, s2[ci] / m);
            for t in 0..b {
                dx[base + t] = is * (g[base + t] - m1 - y[base + t] * m2);
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// activations / pooling / reductions / loss
// ---------------------------------------------------------------------------

impl Tensor {
    pub fn relu(&self) -> Result<Tensor> {
        let out = self.data().iter().map(|&v| v.max(0.0)).collect();
        Ok(make(
            Op::Relu,
            vec![self.clone()],
            self.shape().to_vec(),
            out,
        ))
    }

    /// 2x2 max pooling with stride 2 over the trailing two axes; boundary
    /// windows truncate, so output extents are ceil(H/2) x ceil(W/2). Ties
    /// resolve to the first maximal element in row-major order.
    pub fn maxpool2(&self) -> Result<Tensor> {
        let (lead, h, w) = trailing_hw(self.shape())?;
        let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
        let x = self.data();
        let mut out = vec![0.0; lead * h2 * w2];
        let mut argmax = vec![0usize; lead * h2 * w2];
        for l in 0..lead {
            let xin = &x[l * h * w..(l + 1) * h * w];
            for r2 in 0..h2 {
                for c2 in 0..w2 {
                    let mut best = f64::NEG_INFINITY;
                    let mut besti = 0usize;
                    for r in r2 * 2..(r2 * 2 + 2).min(h) {
                        for c in c2 * 2..(c2 * 2 + 2).min(w) {
                            let v = xin[r * w + c];
                            if v > best {
                                best = v;
                                besti = r * w + c;
                            }
                        }
                    }
                    let oi = (l * h2 + r2) * w2 + c2;
                    out[oi] = best;
                    argmax[oi] = l * h * w + besti;
                }
            }
        }
        drop(x);
        let mut shape = self.shape().to_vec();
        let rank = shape.len();
        shape[rank - 2] = h2;
        shape[rank - 1] = w2;
        Ok(make(Op::MaxPool2 { argmax }, vec![self.clone()], shape, out))
    }

    /// Mean over the trailing two (spatial) axes: [.., H, W] -> [..].
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        if self.rank() < 3 {
            return Err(Error::shape(format!(
                "global_avg_pool needs rank >= 3, got {:?}",
                self.shape()
            )));
        }
        let (lead, h, w) = trailing_hw(self.shape())?;
        let hw = (h * w) as f64;
        let x = self.data();
        let out: Vec<f64> = (0..lead)
            .map(|l| x[l * h * w..(l + 1) * h * w].iter().sum::<f64>() / hw)
            .collect();
        drop(x);
        let shape = self.shape()[..self.rank() - 2].to_vec();
        Ok(make(Op::GlobalAvgPool, vec![self.clone()], shape, out))
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        Ok(make(Op::SumAll, vec![self.clone()], vec![1], vec![s]))
    }

    /// Mean cross-entropy of logits [N, L] against integer labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape(format!(
                "cross_entropy needs logits [N, L], got {s:?}"
            )));
        }
        let (n, l) = (s[0], s[1]);
        if labels.len() != n {
            return Err(Error::shape(format!(
                "{} labels for {n} logit rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&lab| lab >= l) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {l} classes"
            )));
        }
        let x = self.data();
        let mut lse = vec![0.0; n];
        let mut total = 0.0;
        for i in 0..n {
            let row = &x[i * l..(i + 1) * l];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            lse[i] = mx + s.ln();
            total += lse[i] - row[labels[i]];
        }
        drop(x);
        Ok(make(
            Op::CrossEntropy {
                labels: labels.to_vec(),
                lse,
            },
            vec![self.clone()],
            vec![1],
            vec![total / n as f64],
        ))
    }
}

// ---------------------------------------------------------------------------
// backward dispatch
// ---------------------------------------------------------------------------

impl Op {
    pub(crate) fn backward(
        &self,
        inputs: &[Tensor],
        output: &Tensor,
        gout: &[f64],
        wants: &[bool],
    ) -> Result<Vec<Option<Vec<f64>>>> {
        match self {
            Op::Elementwise { kind, tile } => {
                let tile = *tile;
                let da = wants[0].then(|| match kind {
                    EwKind::Add | EwKind::Sub => gout.to_vec(),
                    EwKind::Mul => {
                        let b = inputs[1].data();
                        gout.iter()
                            .enumerate()
                            .map(|(i, g)| g * b[i % tile])
                            .collect()
                    }
                });
                let db = wants[1].then(|| {
                    let mut db = vec![0.0; tile];
                    match kind {
                        EwKind::Add => {
                            for (i, g) in gout.iter().enumerate() {
                                db[i % tile] += g;
                            }
                        }
                        EwKind::Sub => {
                            for (i, g) in gout.iter().enumerate() {
                                db[i % tile] -= g;
                            }
                        }
                        EwKind::Mul => {
                            let a = inputs[0].data();
                            for (i, g) in gout.iter().enumerate() {
                                db[i % tile] += g * a[i];
                            }
                        }
                    }
                    db
                });
                Ok(vec![da, db])
            }
            Op::AddScalar => Ok(vec![wants[0].then(|| gout.to_vec())]),
            Op::MulScalar(s) => {
                Ok(vec![wants[0].then(|| gout.iter().map(|g| g * s).collect())])
            }
            Op::Matmul => {
                let (sa, sb) = (inputs[0].shape(), inputs[1].shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let da = wants[0].then(|| {
                    let b = inputs[1].data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            da[i * k + p] = dot(&gout[i * n..(i + 1) * n], &b[p * n..(p + 1) * n]);
                        }
                    }
                    da
                });
                let db = wants[1].then(|| {
                    let a = inputs[0].data();
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            axpy(a[i * k + p], &gout[i * n..(i + 1) * n], &mut db[p * n..(p + 1) * n]);
                        }
                    }
                    db
                });
                Ok(vec![da, db])
            }
            Op::Transpose2 => {
                let s = inputs[0].shape();
                let (m, n) = (s[0], s[1]);
                Ok(vec![wants[0].then(|| {
                    let mut dx = vec![0.0; m * n];
                    for j in 0..n {
                        for i in 0..m {
                            dx[i * n + j] = gout[j * m + i];
                        }
                    }
                    dx
                })])
            }
            Op::Reshape => Ok(vec![wants[0].then(|| gout.to_vec())]),
            Op::Softmax { axes } => Ok(vec![wants[0].then(|| {
                softmax_bwd(&output.data(), gout, output.shape(), axes)
            })]),
            Op::Unfold { k } => {
                Ok(vec![wants[0].then(|| unfold_bwd(gout, inputs[0].shape(), *k))])
            }
            Op::PairwiseDiff { k } => {
                let (dq, dk) = pairwise_diff_bwd(gout, inputs[0].shape(), *k, wants[0], wants[1]);
                Ok(vec![dq, dk])
            }
            Op::Aggregate { k, r3 } => {
                let (dv, dm) = aggregate_bwd(
                    gout,
                    &inputs[0].data(),
                    &inputs[1].data(),
                    inputs[0].shape(),
                    *k,
                    *r3,
                    wants[0],
                    wants[1],
                );
                Ok(vec![dv, dm])
            }
            Op::ZetaEmbed { k, r3 } => Ok(zeta_bwd(gout, inputs, *k, *r3, wants)),
            Op::AppendCoords { k } => {
                let s = inputs[0].shape();
                let (n, c, h, w) = (s[0], s[1], s[3], s[4]);
                let k2 = k * k;
                let hw = h * w;
                Ok(vec![wants[0].then(|| {
                    let mut dx = vec![0.0; n * c * k2 * hw];
                    for ni in 0..n {
                        let src0 = ni * (c + 2) * k2 * hw;
                        dx[ni * c * k2 * hw..(ni + 1) * c * k2 * hw]
                            .copy_from_slice(&gout[src0..src0 + c * k2 * hw]);
                    }
                    dx
                })])
            }
            Op::LinearAxis1 => Ok(linear_axis1_bwd(gout, inputs, wants)),
            Op::ChannelScaleShift => Ok(channel_scale_shift_bwd(gout, inputs, wants)),
            Op::BnNorm { inv_std } => Ok(vec![wants[0].then(|| {
                bn_norm_bwd(gout, &output.data(), output.shape(), inv_std)
            })]),
            Op::Relu => Ok(vec![wants[0].then(|| {
                let x = inputs[0].data();
                gout.iter()
                    .zip(x.iter())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect()
            })]),
            Op::MaxPool2 { argmax } => Ok(vec![wants[0].then(|| {
                let mut dx = vec![0.0; inputs[0].numel()];
                for (i, &src) in argmax.iter().enumerate() {
                    dx[src] += gout[i];
                }
                dx
            })]),
            Op::GlobalAvgPool => {
                let (lead, h, w) = trailing_hw(inputs[0].shape())?;
                let hw = (h * w) as f64;
                Ok(vec![wants[0].then(|| {
                    let mut dx = vec![0.0; lead * h * w];
                    for l in 0..lead {
                        let gv = gout[l] / hw;
                        dx[l * h * w..(l + 1) * h * w].fill(gv);
                    }
                    dx
                })])
            }
            Op::SumAll => Ok(vec![wants[0].then(|| vec![gout[0]; inputs[0].numel()])]),
            Op::CrossEntropy { labels, lse } => {
                let s = inputs[0].shape();
                let (n, l) = (s[0], s[1]);
                Ok(vec![wants[0].then(|| {
                    let x = inputs[0].data();
                    let scale = gout[0] / n as f64;
                    let mut dx = vec![0.0; n * l];
                    for i in 0..n {
                        for j in 0..l {
                            let p = (x[i * l + j] - lse[i]).exp();
                            let ind = if j == labels[i] { 1.0 } else { 0.0 };
                            dx[i * l + j] = (p - ind) * scale;
                        }
                    }
                    dx
                })])
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn elementwise_basics() {
        let a = t(&[1.0, 2.0], &[2]);
        let b = t(&[3.0, 4.0], &[2]);
        assert_eq!(a.mul(&b).unwrap().to_vec(), vec![3.0, 8.0]);
        let z = Tensor::zeros(&[2]);
        assert_eq!(a.add(&z).unwrap().to_vec(), a.to_vec());
        assert_eq!(a.sub(&b).unwrap().to_vec(), vec![-2.0, -2.0]);
    }

    #[test]
    fn elementwise_suffix_broadcast() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[10.0, 20.0], &[2]);
        assert_eq!(a.add(&b).unwrap().to_vec(), vec![11.0, 22.0, 13.0, 24.0]);
        // Mismatched suffix is rejected.
        let bad = t(&[1.0, 2.0, 3.0], &[3]);
        assert!(a.add(&bad).is_err());
    }

    #[test]
    fn elementwise_mul_gradients() {
        let a = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let b = Tensor::param(vec![3.0, 4.0], &[2]).unwrap();
        a.mul(&b).unwrap().sum_all().unwrap().backward().unwrap();
        assert_eq!(a.grad_vec().unwrap(), vec![3.0, 4.0]);
        assert_eq!(b.grad_vec().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn matmul_identity_and_small_case() {
        let eye = t(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]);
        let b = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
        assert_eq!(eye.matmul(&b).unwrap().to_vec(), b.to_vec());

        let a = t(&[1.0, 2.0], &[1, 2]);
        let c = t(&[3.0, 4.0], &[2, 1]);
        assert_eq!(a.matmul(&c).unwrap().to_vec(), vec![11.0]);

        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn softmax_constant_is_uniform() {
        let x = Tensor::full(&[1, 49], 3.25);
        let y = x.softmax(&[1]).unwrap();
        for v in y.to_vec() {
            assert!((v - 1.0 / 49.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_saturates_on_dominant_logit() {
        let mut data = vec![0.0; 8];
        data[3] = 1000.0;
        let y = t(&data, &[8]).softmax(&[0]).unwrap().to_vec();
        assert!((y[3] - 1.0).abs() < 1e-12);
        let rest: f64 = y.iter().enumerate().filter(|&(i, _)| i != 3).map(|(_, v)| v).sum();
        assert!(rest < 1e-12);
    }

    #[test]
    fn softmax_multi_axis_normalizes_jointly() {
        let x = t(&(0..12).map(|v| v as f64 * 0.1).collect::<Vec<_>>(), &[2, 3, 2]);
        let y = x.softmax(&[1, 2]).unwrap();
        let d = y.to_vec();
        for o in 0..2 {
            let s: f64 = d[o * 6..(o + 1) * 6].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(x.softmax(&[]).is_err());
        assert!(x.softmax(&[3]).is_err());
    }

    #[test]
    fn unfold_k1_is_identity_with_singleton_axis() {
        let x = t(&(0..9).map(f64::from).collect::<Vec<_>>(), &[1, 3, 3]);
        let y = x.unfold(1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn unfold_center_footprint_reproduces_input() {
        let x = t(&(1..=9).map(f64::from).collect::<Vec<_>>(), &[1, 3, 3]);
        let y = x.unfold(3).unwrap();
        assert_eq!(y.shape(), &[1, 9, 3, 3]);
        let d = y.to_vec();
        // Footprint of the center cell (1,1) enumerates the whole input.
        for j in 0..9 {
            let (dy, dx) = footprint_offsets(3)[j];
            let v = d[j * 9 + 4];
            let expect = x.to_vec()[((1 + dy) * 3 + (1 + dx)) as usize];
            assert_eq!(v, expect);
        }
        // Corner (0,0): 5 of 9 footprint entries fall in the zero padding.
        let zeros = (0..9).filter(|&j| d[j * 9] == 0.0).count();
        assert_eq!(zeros, 5);
    }

    #[test]
    fn unfold_rejects_even_kernel() {
        let x = t(&[0.0; 16], &[1, 4, 4]);
        assert!(x.unfold(2).is_err());
    }

    #[test]
    fn backward_sum_and_quadratic() {
        let a = Tensor::param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        a.sum_all().unwrap().backward().unwrap();
        assert_eq!(a.grad_vec().unwrap(), vec![1.0, 1.0, 1.0]);

        let b = Tensor::param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let loss = b.mul(&b).unwrap().sum_all().unwrap().mul_scalar(0.5);
        loss.backward().unwrap();
        assert_eq!(b.grad_vec().unwrap(), vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn relu_and_maxpool_semantics() {
        let x = t(&[-1.0, 0.0, 2.0], &[3]);
        assert_eq!(x.relu().unwrap().to_vec(), vec![0.0, 0.0, 2.0]);

        let p = t(&[1.0, 2.0, 3.0, 4.0], &[1, 2, 2]).maxpool2().unwrap();
        assert_eq!(p.shape(), &[1, 1, 1]);
        assert_eq!(p.to_vec(), vec![4.0]);

        // Odd extents: ceil semantics.
        let q = t(&(0..9).map(f64::from).collect::<Vec<_>>(), &[1, 3, 3])
            .maxpool2()
            .unwrap();
        assert_eq!(q.shape(), &[1, 2, 2]);
        assert_eq!(q.to_vec(), vec![4.0, 5.0, 7.0, 8.0]);
    }

    #[test]
    fn maxpool_tie_routes_to_first() {
        let x = Tensor::param(vec![7.0, 7.0, 7.0, 7.0], &[1, 2, 2]).unwrap();
        let y = x.maxpool2().unwrap();
        y.sum_all().unwrap().backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::zeros(&[2, 4]);
        let loss = logits.cross_entropy(&[0, 3]).unwrap();
        assert!((loss.item() - 4.0_f64.ln()).abs() < 1e-12);
        assert!(logits.cross_entropy(&[0, 4]).is_err());
        assert!(logits.cross_entropy(&[0]).is_err());
    }

    #[test]
    fn cross_entropy_saturated_margin() {
        let logits = t(&[100.0, 0.0, 0.0, 0.0], &[1, 4]);
        let loss = logits.cross_entropy(&[0]).unwrap();
        assert!(loss.item() >= 0.0);
        assert!(loss.item() < 1e-10);
    }

    #[test]
    fn aggregate_one_hot_center_is_identity() {
        let k = 3;
        let (h, w) = (4, 5);
        let v = t(
            &(0..h * w).map(|i| i as f64 * 0.37 - 2.0).collect::<Vec<_>>(),
            &[1, 1, h, w],
        );
        let mut mask = vec![0.0; 9 * h * w];
        let center_j = 4;
        mask[center_j * h * w..(center_j + 1) * h * w].fill(1.0);
        let m = t(&mask, &[1, 1, 9, h, w]);
        let out = aggregate(&v, &m, k, 1).unwrap();
        assert_eq!(out.to_vec(), v.to_vec());
    }

    #[test]
    fn aggregate_uniform_mask_is_box_filter() {
        let (h, w) = (3, 3);
        let v = t(&vec![1.0; h * w], &[1, 1, h, w]);
        let m = t(&vec![1.0 / 9.0; 9 * h * w], &[1, 1, 9, h, w]);
        let out = aggregate(&v, &m, 3, 1).unwrap().to_vec();
        // Center sees all nine ones; corner sees four.
        assert!((out[4] - 1.0).abs() < 1e-12);
        assert!((out[0] - 4.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_matches_naive_loop_with_shared_mask() {
        // r3 = c_v: a single mask channel shared by all value channels.
        let (c, h, w, k) = (4usize, 5usize, 4usize, 3usize);
        let vdata: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.618).sin()).collect();
        let mdata: Vec<f64> = (0..9 * h * w).map(|i| (i as f64 * 0.271).cos().abs() + 0.1).collect();
        let v = t(&vdata, &[1, c, h, w]);
        let m = t(&mdata, &[1, 1, 9, h, w]);
        let got = aggregate(&v, &m, k, c).unwrap().to_vec();

        let offs = footprint_offsets(k);
        for ci in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let mut expect = 0.0;
                    for (j, &(dy, dx)) in offs.iter().enumerate() {
                        let (sr, sc) = (r as isize + dy, col as isize + dx);
                        if sr < 0 || sr >= h as isize || sc < 0 || sc >= w as isize {
                            continue;
                        }
                        expect += mdata[(j * h + r) * w + col]
                            * vdata[(ci * h + sr as usize) * w + sc as usize];
                    }
                    let got_v = got[(ci * h + r) * w + col];
                    assert!((got_v - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn aggregate_rejects_divisibility_violation() {
        let v = t(&vec![0.0; 3 * 4], &[1, 3, 2, 2]);
        let m = t(&vec![0.0; 2 * 9 * 4], &[1, 2, 9, 2, 2]);
        assert!(aggregate(&v, &m, 3, 2).is_err());
    }

    #[test]
    fn zeta_projection_and_mask_sum_cases() {
        let (h, w, k) = (3usize, 3usize, 3usize);
        let vp = t(&(0..h * w).map(|i| i as f64).collect::<Vec<_>>(), &[1, 1, h, w]);
        // Normalized masks: uniform 1/9.
        let m = t(&vec![1.0 / 9.0; 9 * h * w], &[1, 1, 9, h, w]);

        // zeta = [1, 0...0], bias 0: output equals v'.
        let mut wdata = vec![0.0; 10];
        wdata[0] = 1.0;
        let zw = t(&wdata, &[1, 10]);
        let zb = Tensor::zeros(&[1]);
        let out = zeta_embed(&vp, &m, &zw, &zb, k, 1).unwrap();
        assert_eq!(out.to_vec(), vp.to_vec());

        // zeta = [0, 1...1], bias 0: output is the mask sum, i.e. 1 everywhere.
        let mut wdata = vec![1.0; 10];
        wdata[0] = 0.0;
        let zw = t(&wdata, &[1, 10]);
        let out = zeta_embed(&vp, &m, &zw, &zb, k, 1).unwrap();
        for v in out.to_vec() {
            assert!((v - 1.0).abs() < 1e-12);
        }

        // Arity mismatch rejected.
        let bad = t(&vec![0.0; 9], &[1, 9]);
        assert!(zeta_embed(&vp, &m, &bad, &zb, k, 1).is_err());
    }

    #[test]
    fn zeta_is_affine_in_the_feature_slot() {
        let (h, w, k) = (2usize, 2usize, 3usize);
        let m = t(&vec![1.0 / 9.0; 9 * h * w], &[1, 1, 9, h, w]);
        let zw = t(
            &(0..10).map(|i| 0.1 * i as f64 - 0.3).collect::<Vec<_>>(),
            &[1, 10],
        );
        let zb = t(&[0.0], &[1]);
        let a = t(&[1.0, -2.0, 0.5, 3.0], &[1, 1, h, w]);
        let b = t(&[0.25, 1.5, -1.0, 2.0], &[1, 1, h, w]);
        let fa = zeta_embed(&a, &m, &zw, &zb, k, 1).unwrap().to_vec();
        let fb = zeta_embed(&b, &m, &zw, &zb, k, 1).unwrap().to_vec();
        let fab = zeta_embed(&a.add(&b).unwrap(), &m, &zw, &zb, k, 1)
            .unwrap()
            .to_vec();
        for i in 0..4 {
            // Additivity up to one double-counted bias and mask term.
            let linear_part = fab[i] - (fa[i] + fb[i]);
            let mask_term: f64 = (1..10).map(|j| zw.to_vec()[j] / 9.0).sum::<f64>();
            assert!((linear_part + mask_term).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_axis1_rank2_and_rank4() {
        // Rank 2: plain linear over features.
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let w = t(&[1.0, 0.0, 0.0, 1.0, 1.0, 1.0], &[3, 2]);
        let b = t(&[0.0, 0.0, 10.0], &[3]);
        let y = linear_axis1(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 13.0, 3.0, 4.0, 17.0]);

        // Rank 4: per-position channel mixing.
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], &[1, 2, 2, 2]);
        let w = t(&[0.0, 1.0], &[1, 2]);
        let y = linear_axis1(&x, &w, None).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.to_vec(), vec![5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn bn_norm_standardizes_per_channel() {
        let x = t(&[1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0], &[4, 2]);
        let (y, stats) = bn_norm(&x, 1e-5).unwrap();
        assert!((stats.mean[0] - 2.5).abs() < 1e-12);
        assert!((stats.mean[1] - 25.0).abs() < 1e-12);
        let d = y.to_vec();
        for c in 0..2 {
            let vals: Vec<f64> = (0..4).map(|i| d[i * 2 + c]).collect();
            let mean: f64 = vals.iter().sum::<f64>() / 4.0;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn reshape_shares_values_and_routes_gradients() {
        let a = Tensor::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = a.reshape(&[4]).unwrap();
        assert_eq!(b.to_vec(), a.to_vec());
        b.mul(&b).unwrap().sum_all().unwrap().mul_scalar(0.5).backward().unwrap();
        assert_eq!(a.grad_vec().unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert!(a.reshape(&[3]).is_err());
    }

    #[test]
    fn global_avg_pool_means_spatial() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0], &[1, 2, 2, 2]);
        let y = x.global_avg_pool().unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert_eq!(y.to_vec(), vec![2.5, 25.0]);
    }

    #[cfg(debug_assertions)]
    #[test]
    #[should_panic(expected = "non-finite")]
    fn non_finite_op_output_panics_in_debug() {
        let a = Tensor::param(vec![1e308], &[1]).unwrap();
        let _ = a.mul(&a); // overflows to +inf
    }
}
