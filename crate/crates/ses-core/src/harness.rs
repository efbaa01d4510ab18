//! Sampling-equivariance measurement: lifts sampling masks (or static
//! sampling locations) into sampling graphs in input-pixel coordinates,
//! builds ideally transformed counterparts, and aggregates earth mover's
//! distances into the AEMD score.
//!
//! For each probed image a transform is drawn, the image is warped, one
//! stride is drawn, and for every mask layer at that stride one valid center
//! is chosen. The probe in the warped image reads the feature cell nearest
//! to the transformed center; the residual sub-cell offset is added back to
//! the ideal graph so cell quantization does not bias the metric. Centers
//! whose footprints touch the zero padding are excluded on both sides.

use serde::{Deserialize, Serialize};

use crate::emd::{emd, SamplingGraph};
use crate::error::{Error, Result};
use crate::geometry::{
    make_transform, sample_transform, warp_image, Affine2D, ImageGrid, TransformKind, TransformSpec,
};
use crate::tensor::ops::footprint_offsets;

/// Softmax masks of one layer over a feature map: row-major
/// `[c_w, k*k, height, width]`, every footprint summing to 1.
#[derive(Clone, Debug)]
pub struct MaskMap {
    /// Global index of the producing layer in its network (or 0 for
    /// synthetic samplers).
    pub layer: usize,
    /// Input pixels per feature cell.
    pub stride: usize,
    pub k: usize,
    pub c_w: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl MaskMap {
    pub fn pad(&self) -> usize {
        self.k / 2
    }

    /// Centers whose full footprint avoids the zero padding.
    pub fn interior(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let pad = self.pad();
        (pad..self.height.saturating_sub(pad))
            .flat_map(move |r| (pad..self.width.saturating_sub(pad)).map(move |c| (r, c)))
    }

    pub fn mask_at(&self, channel: usize, center: (usize, usize), j: usize) -> f64 {
        let (cy, cx) = center;
        self.data[((channel * self.k * self.k + j) * self.height + cy) * self.width + cx]
    }
}

/// Anything that can produce softmax mask maps at its strides.
pub trait MaskProbe {
    fn strides(&self) -> Vec<usize>;
    fn probe(&self, img: &ImageGrid, stride: usize) -> Result<Vec<MaskMap>>;
}

/// Lifts the mask at (center, channel) to a sampling graph over input-pixel
/// coordinates: footprint cell (cy+dy, cx+dx) becomes the point
/// `stride * (cell + 0.5)` carrying the mask weight.
pub fn extract_graph(map: &MaskMap, center: (usize, usize), channel: usize) -> Result<SamplingGraph> {
    if channel >= map.c_w {
        return Err(Error::invalid(format!(
            "mask channel {channel} out of range (c_w = {})",
            map.c_w
        )));
    }
    let pad = map.pad();
    let (cy, cx) = center;
    if cy < pad || cx < pad || cy + pad >= map.height || cx + pad >= map.width {
        return Err(Error::invalid(format!(
            "center ({cy}, {cx}) too close to the border for footprint {}",
            map.k
        )));
    }
    let offs = footprint_offsets(map.k);
    let d = map.stride as f64;
    let mut points = Vec::with_capacity(offs.len());
    let mut weights = Vec::with_capacity(offs.len());
    for (j, &(dy, dx)) in offs.iter().enumerate() {
        let cell_r = cy as f64 + dy as f64;
        let cell_c = cx as f64 + dx as f64;
        points.push((d * (cell_c + 0.5), d * (cell_r + 0.5)));
        weights.push(map.mask_at(channel, center, j));
    }
    SamplingGraph::new(points, weights)
}

/// Ideally equivariant counterpart: support points mapped by the transform,
/// weights unchanged, no rasterization.
pub fn ideal_graph(g: &SamplingGraph, t: &Affine2D) -> SamplingGraph {
    g.transformed(t)
}

// ---------------------------------------------------------------------------
// synthetic samplers
// ---------------------------------------------------------------------------

/// Convolution-like sampler: a fixed uniform k x k mask at every position.
pub struct ConstantMaskSampler {
    pub k: usize,
    pub strides: Vec<usize>,
}

impl MaskProbe for ConstantMaskSampler {
    fn strides(&self) -> Vec<usize> {
        self.strides.clone()
    }

    fn probe(&self, img: &ImageGrid, stride: usize) -> Result<Vec<MaskMap>> {
        let (h, w) = (img.height / stride, img.width / stride);
        let k2 = self.k * self.k;
        Ok(vec![MaskMap {
            layer: 0,
            stride,
            k: self.k,
            c_w: 1,
            height: h,
            width: w,
            data: vec![1.0 / k2 as f64; k2 * h * w],
        }])
    }
}

/// Perfectly content-driven sampler: the mask is the normalized average
/// intensity of each footprint cell (plus a tiny floor so fully dark
/// footprints stay defined). Equivariant by construction up to image
/// resampling.
pub struct ContentMaskSampler {
    pub k: usize,
    pub strides: Vec<usize>,
}

const CONTENT_FLOOR: f64 = 1e-6;

impl MaskProbe for ContentMaskSampler {
    fn strides(&self) -> Vec<usize> {
        self.strides.clone()
    }

    fn probe(&self, img: &ImageGrid, stride: usize) -> Result<Vec<MaskMap>> {
        let (h, w) = (img.height / stride, img.width / stride);
        if h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "stride {stride} exceeds image extent {}x{}",
                img.height, img.width
            )));
        }
        // Channel-averaged box pooling to feature resolution.
        let mut pooled = vec![0.0; h * w];
        let norm = (stride * stride * img.channels) as f64;
        for c in 0..img.channels {
            for r in 0..h * stride {
                for col in 0..w * stride {
                    pooled[(r / stride) * w + col / stride] += img.get(c, r, col) / norm;
                }
            }
        }
        let offs = footprint_offsets(self.k);
        let k2 = self.k * self.k;
        let mut data = vec![0.0; k2 * h * w];
        for r in 0..h {
            for col in 0..w {
                let mut total = 0.0;
                let mut vals = vec![0.0; k2];
                for (j, &(dy, dx)) in offs.iter().enumerate() {
                    let (rr, cc) = (r as isize + dy, col as isize + dx);
                    let v = if rr < 0 || rr >= h as isize || cc < 0 || cc >= w as isize {
                        0.0
                    } else {
                        pooled[rr as usize * w + cc as usize]
                    } + CONTENT_FLOOR;
                    vals[j] = v;
                    total += v;
                }
                for (j, v) in vals.iter().enumerate() {
                    data[(j * h + r) * w + col] = v / total;
                }
            }
        }
        Ok(vec![MaskMap {
            layer: 0,
            stride,
            k: self.k,
            c_w: 1,
            height: h,
            width: w,
            data,
        }])
    }
}

/// Location-mode sampler (deformable-convolution style): a static set of
/// fractional feature-cell offsets with per-location weights.
pub struct StaticLocationSampler {
    pub strides: Vec<usize>,
    /// (dy, dx, weight) in feature cells relative to the probed center;
    /// weights must sum to 1.
    pub locations: Vec<(f64, f64, f64)>,
    /// Border margin (in cells) used for center validity, matching a mask
    /// footprint of size 2*margin + 1.
    pub margin: usize,
}

impl StaticLocationSampler {
    /// The regular 3x3 convolution grid with uniform weights.
    pub fn conv_grid(strides: Vec<usize>) -> StaticLocationSampler {
        let mut locations = Vec::with_capacity(9);
        for dy in -1..=1 {
            for dx in -1..=1 {
                locations.push((dy as f64, dx as f64, 1.0 / 9.0));
            }
        }
        StaticLocationSampler {
            strides,
            locations,
            margin: 2,
        }
    }

    /// Each location's mass splats over its four bilinear neighbor cells;
    /// cells lift to pixel coordinates like mask footprint cells do.
    pub fn graph_at(&self, stride: usize, center: (usize, usize)) -> Result<SamplingGraph> {
        let d = stride as f64;
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for &(dy, dx, wgt) in &self.locations {
            let loc_r = center.0 as f64 + dy;
            let loc_c = center.1 as f64 + dx;
            let (r0, c0) = (loc_r.floor(), loc_c.floor());
            let (fr, fc) = (loc_r - r0, loc_c - c0);
            for (cell_r, cell_c, bw) in [
                (r0, c0, (1.0 - fr) * (1.0 - fc)),
                (r0, c0 + 1.0, (1.0 - fr) * fc),
                (r0 + 1.0, c0, fr * (1.0 - fc)),
                (r0 + 1.0, c0 + 1.0, fr * fc),
            ] {
                if bw > 0.0 {
                    points.push((d * (cell_c + 0.5), d * (cell_r + 0.5)));
                    weights.push(wgt * bw);
                }
            }
        }
        SamplingGraph::new(points, weights)
    }
}

// ---------------------------------------------------------------------------
// AEMD evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct AemdOptions {
    pub kind: TransformKind,
    /// Fixed transform parameters for reproducible runs; otherwise drawn per
    /// image from the declared ranges.
    pub fixed: Option<TransformSpec>,
    pub n: usize,
    pub seed: u64,
    /// Transform redraw attempts when no valid center exists.
    pub max_retries: usize,
}

impl AemdOptions {
    pub fn new(kind: TransformKind, n: usize, seed: u64) -> AemdOptions {
        AemdOptions {
            kind,
            fixed: None,
            n,
            seed,
            max_retries: 32,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer: usize,
    /// Center (row, col) in the original feature map.
    pub center: [usize; 2],
    /// Nearest feature cell to the transformed center in the warped image.
    pub probe_center: [usize; 2],
    /// Residual continuous offset (x, y) added to the ideal graph, in pixels.
    pub offset: [f64; 2],
    /// One EMD per mask channel at this center.
    pub emds: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image: usize,
    pub stride: usize,
    pub transform: TransformSpec,
    /// The 2x3 matrix actually applied.
    pub matrix: [f64; 6],
    pub layers: Vec<LayerRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AemdReport {
    pub format: String,
    pub transform: String,
    pub side: usize,
    pub alpha: f64,
    pub n: usize,
    pub seed: u64,
    pub aggregate: f64,
    pub records: Vec<ImageRecord>,
}

/// The nested mean of Eq-style aggregation: per image, average over layers
/// of the average over mask channels; then the image average scaled by
/// alpha. Reports store exactly this value.
pub fn recompute_aggregate(records: &[ImageRecord], alpha: f64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for rec in records {
        let mut layer_mean = 0.0;
        for layer in &rec.layers {
            let channel_mean: f64 =
                layer.emds.iter().sum::<f64>() / layer.emds.len() as f64;
            layer_mean += channel_mean;
        }
        total += layer_mean / rec.layers.len() as f64;
    }
    alpha * total / records.len() as f64
}

fn image_seed(seed: u64, index: usize) -> u64 {
    // SplitMix-style mix so per-image streams are independent of the
    // worker that processes them.
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Evaluates AEMD over the first `opts.n` images with a single probe.
pub fn evaluate_aemd(
    probe: &dyn MaskProbe,
    images: &[ImageGrid],
    opts: &AemdOptions,
) -> Result<AemdReport> {
    if opts.n == 0 || opts.n > images.len() {
        return Err(Error::invalid(format!(
            "need 1..={} evaluation images, asked for {}",
            images.len(),
            opts.n
        )));
    }
    let side = check_sides(&images[..opts.n])?;
    let mut records = Vec::with_capacity(opts.n);
    for (i, img) in images[..opts.n].iter().enumerate() {
        records.push(evaluate_one(probe, img, i, opts)?);
    }
    let alpha = 2.0 / side as f64;
    Ok(AemdReport {
        format: "aemd-report-v1".into(),
        transform: opts.kind.name().into(),
        side,
        alpha,
        n: opts.n,
        seed: opts.seed,
        aggregate: recompute_aggregate(&records, alpha),
        records,
    })
}

fn check_sides(images: &[ImageGrid]) -> Result<usize> {
    let side = images[0].height;
    for img in images {
        if img.height != side || img.width != side {
            return Err(Error::invalid(
                "aemd evaluation expects square images of one size",
            ));
        }
    }
    Ok(side)
}

/// One image: draw the transform (unless fixed), warp, draw a stride, pick a
/// valid center per layer, and compute per-channel distances.
pub fn evaluate_one(
    probe: &dyn MaskProbe,
    img: &ImageGrid,
    index: usize,
    opts: &AemdOptions,
) -> Result<ImageRecord> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(image_seed(opts.seed, index));
    let strides = probe.strides();
    if strides.is_empty() {
        return Err(Error::invalid("probe exposes no strides"));
    }
    let center_px = img.center();

    let mut stride: Option<usize> = None;
    let mut maps_orig: Option<Vec<MaskMap>> = None;
    for _attempt in 0..opts.max_retries {
        let spec = match opts.fixed {
            Some(s) => s,
            None => sample_transform(opts.kind, &mut rng),
        };
        let t = make_transform(&spec, center_px)?;
        let d = match stride {
            Some(d) => d,
            None => {
                let d = strides[rng.random_range(0..strides.len())];
                stride = Some(d);
                d
            }
        };
        if maps_orig.is_none() {
            maps_orig = Some(probe.probe(img, d)?);
        }
        let orig = maps_orig.as_ref().unwrap();
        if orig.is_empty() {
            return Err(Error::invalid(format!("probe yields no layers at stride {d}")));
        }

        // Candidate centers per layer: footprint interior on both sides.
        let mut chosen: Vec<(usize, usize, usize, usize)> = Vec::new(); // (cy, cx, py, px)
        let mut ok = true;
        for map in orig {
            let mut cands: Vec<(usize, usize, usize, usize)> = Vec::new();
            let pad = map.pad();
            for (cy, cx) in map.interior() {
                let p = (d as f64 * (cx as f64 + 0.5), d as f64 * (cy as f64 + 0.5));
                let q = t.apply(p);
                let pr = (q.1 / d as f64 - 0.5).round();
                let pc = (q.0 / d as f64 - 0.5).round();
                if pr < pad as f64
                    || pc < pad as f64
                    || pr > (map.height - 1 - pad) as f64
                    || pc > (map.width - 1 - pad) as f64
                {
                    continue;
                }
                cands.push((cy, cx, pr as usize, pc as usize));
            }
            if cands.is_empty() {
                ok = false;
                break;
            }
            chosen.push(cands[rng.random_range(0..cands.len())]);
        }
        if !ok {
            if opts.fixed.is_some() {
                return Err(Error::invalid(
                    "no valid probe center exists for the fixed transform",
                ));
            }
            continue; // resample the transform
        }

        let warped = warp_image(img, &t)?;
        let maps_warp = probe.probe(&warped, d)?;
        let mut layers = Vec::with_capacity(orig.len());
        for (map, warp_map, &(cy, cx, py, px)) in orig
            .iter()
            .zip(&maps_warp)
            .zip(&chosen)
            .map(|((a, b), c)| (a, b, c))
        {
            let p = (d as f64 * (cx as f64 + 0.5), d as f64 * (cy as f64 + 0.5));
            let q = t.apply(p);
            let probe_px = (d as f64 * (px as f64 + 0.5), d as f64 * (py as f64 + 0.5));
            let offset = (probe_px.0 - q.0, probe_px.1 - q.1);
            let mut emds = Vec::with_capacity(map.c_w);
            for ch in 0..map.c_w {
                let g = extract_graph(map, (cy, cx), ch)?;
                let observed = extract_graph(warp_map, (py, px), ch)?;
                let ideal = ideal_graph(&g, &t).translated(offset);
                emds.push(emd(&ideal, &observed)?);
            }
            layers.push(LayerRecord {
                layer: map.layer,
                center: [cy, cx],
                probe_center: [py, px],
                offset: [offset.0, offset.1],
                emds,
            });
        }
        return Ok(ImageRecord {
            image: index,
            stride: d,
            transform: spec,
            matrix: t.m,
            layers,
        });
    }
    Err(Error::Numeric(format!(
        "no valid transform found for image {index} after {} attempts",
        opts.max_retries
    )))
}

/// Shards images across up to `threads` workers, each with its own probe
/// instance; per-image seeding keeps the report identical for any worker
/// count. Records are assembled in image order.
pub fn evaluate_aemd_parallel<F>(
    make_probe: F,
    images: &[ImageGrid],
    opts: &AemdOptions,
    threads: usize,
) -> Result<AemdReport>
where
    F: Fn() -> Result<Box<dyn MaskProbe>> + Sync,
{
    if threads <= 1 || opts.n <= 1 {
        let probe = make_probe()?;
        return evaluate_aemd(probe.as_ref(), images, opts);
    }
    if opts.n == 0 || opts.n > images.len() {
        return Err(Error::invalid(format!(
            "need 1..={} evaluation images, asked for {}",
            images.len(),
            opts.n
        )));
    }
    let side = check_sides(&images[..opts.n])?;
    let workers = threads.min(opts.n);
    let results: Vec<Result<Vec<(usize, ImageRecord)>>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for w in 0..workers {
            let make_probe = &make_probe;
            let images = &images[..opts.n];
            let opts_ref = opts;
            handles.push(scope.spawn(move || -> Result<Vec<(usize, ImageRecord)>> {
                let probe = make_probe()?;
                let mut out = Vec::new();
                let mut i = w;
                while i < opts_ref.n {
                    out.push((i, evaluate_one(probe.as_ref(), &images[i], i, opts_ref)?));
                    i += workers;
                }
                Ok(out)
            }));
        }
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut indexed: Vec<(usize, ImageRecord)> = Vec::with_capacity(opts.n);
    for r in results {
        indexed.extend(r?);
    }
    indexed.sort_by_key(|(i, _)| *i);
    let records: Vec<ImageRecord> = indexed.into_iter().map(|(_, r)| r).collect();
    let alpha = 2.0 / side as f64;
    Ok(AemdReport {
        format: "aemd-report-v1".into(),
        transform: opts.kind.name().into(),
        side,
        alpha,
        n: opts.n,
        seed: opts.seed,
        aggregate: recompute_aggregate(&records, alpha),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_map(k: usize, stride: usize, h: usize, w: usize) -> MaskMap {
        let k2 = k * k;
        MaskMap {
            layer: 0,
            stride,
            k,
            c_w: 1,
            height: h,
            width: w,
            data: vec![1.0 / k2 as f64; k2 * h * w],
        }
    }

    #[test]
    fn uniform_mask_lifts_to_spaced_grid() {
        let map = uniform_map(3, 4, 16, 16);
        let g = extract_graph(&map, (8, 8), 0).unwrap();
        assert_eq!(g.len(), 9);
        // 3x3 grid spaced 4 pixels, centered at pixel (34, 34).
        let mut xs: Vec<f64> = g.points().iter().map(|p| p.0).collect();
        xs.sort_by(f64::total_cmp);
        assert_eq!(xs.first().copied().unwrap(), 30.0);
        assert_eq!(xs.last().copied().unwrap(), 38.0);
        let (mx, my) = g.mean();
        assert!((mx - 34.0).abs() < 1e-12 && (my - 34.0).abs() < 1e-12);
        for &w in g.weights() {
            assert!((w - 1.0 / 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_mask_gives_single_support() {
        let (k, h, w) = (3usize, 10usize, 10usize);
        let mut map = uniform_map(k, 2, h, w);
        map.data.fill(0.0);
        // All mass at footprint cell j = 0 for every center.
        for r in 0..h {
            for c in 0..w {
                map.data[r * w + c] = 1.0;
            }
        }
        let g = extract_graph(&map, (5, 5), 0).unwrap();
        assert_eq!(g.len(), 1);
        assert!((g.weights()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn border_center_rejected() {
        let map = uniform_map(5, 2, 8, 8);
        assert!(extract_graph(&map, (1, 4), 0).is_err());
        assert!(extract_graph(&map, (4, 6), 0).is_err());
        assert!(extract_graph(&map, (4, 4), 1).is_err()); // channel range
    }

    #[test]
    fn ideal_graph_preserves_weights_and_rotates_points() {
        let g = SamplingGraph::new(
            vec![(1.0, 0.0), (0.0, 1.0), (2.0, 2.0)],
            vec![0.5, 0.25, 0.25],
        )
        .unwrap();
        let t = make_transform(&TransformSpec::Rotation { degrees: 90.0 }, (0.0, 0.0)).unwrap();
        let out = ideal_graph(&g, &t);
        assert_eq!(out.weights(), g.weights());
        let p = out.points();
        assert!((p[0].0 - 0.0).abs() < 1e-12 && (p[0].1 - 1.0).abs() < 1e-12);
        let sum: f64 = out.weights().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        let id = ideal_graph(&g, &Affine2D::IDENTITY);
        assert_eq!(id.points(), g.points());
    }

    #[test]
    fn location_sampler_exact_cell_center_degenerates() {
        let s = StaticLocationSampler {
            strides: vec![4],
            locations: vec![(0.0, 0.0, 1.0)],
            margin: 1,
        };
        let g = s.graph_at(4, (3, 3)).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.points()[0], (14.0, 14.0));

        let frac = StaticLocationSampler {
            strides: vec![4],
            locations: vec![(0.5, 0.25, 1.0)],
            margin: 1,
        };
        let g = frac.graph_at(4, (3, 3)).unwrap();
        assert_eq!(g.len(), 4);
        let sum: f64 = g.weights().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_transform_scores_zero() {
        // A content-driven sampler on a structured image: the identity
        // transform must give exactly matching graphs, so AEMD is 0.
        let side = 32;
        let mut data = vec![0.0; side * side];
        for r in 0..side {
            for c in 0..side {
                data[r * side + c] = ((r * 7 + c * 13) % 29) as f64 / 29.0;
            }
        }
        let img = ImageGrid::new(1, side, side, data).unwrap();
        let probe = ContentMaskSampler { k: 3, strides: vec![4] };
        let opts = AemdOptions {
            fixed: Some(TransformSpec::Identity),
            ..AemdOptions::new(TransformKind::Identity, 1, 7)
        };
        let report = evaluate_aemd(&probe, &[img], &opts).unwrap();
        assert!(report.aggregate.abs() < 1e-9, "aggregate {}", report.aggregate);
        assert_eq!(report.records.len(), 1);
    }

    #[test]
    fn aggregate_matches_recomputation_and_range() {
        let side = 32;
        let mut data = vec![0.0; side * side];
        for (i, v) in data.iter_mut().enumerate() {
            *v = ((i * 31 + 7) % 97) as f64 / 97.0;
        }
        let img = ImageGrid::new(1, side, side, data).unwrap();
        let images = vec![img.clone(), img.clone(), img];
        let probe = ConstantMaskSampler { k: 3, strides: vec![4, 8] };
        let opts = AemdOptions::new(TransformKind::Rotation, 3, 123);
        let report = evaluate_aemd(&probe, &images, &opts).unwrap();
        let re = recompute_aggregate(&report.records, report.alpha);
        assert_eq!(report.aggregate.to_bits(), re.to_bits());
        assert!(report.aggregate >= 0.0 && report.aggregate <= 1.0);
    }

    #[test]
    fn fixed_seed_reproduces_report() {
        let side = 32;
        let mut data = vec![0.0; side * side];
        for (i, v) in data.iter_mut().enumerate() {
            *v = ((i * 17 + 3) % 89) as f64 / 89.0;
        }
        let img = ImageGrid::new(1, side, side, data).unwrap();
        let images = vec![img.clone(), img];
        let probe = ContentMaskSampler { k: 3, strides: vec![4] };
        let opts = AemdOptions::new(TransformKind::Skew, 2, 99);
        let a = evaluate_aemd(&probe, &images, &opts).unwrap();
        let b = evaluate_aemd(&probe, &images, &opts).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn parallel_evaluation_matches_serial() {
        let side = 32;
        let mut imgs = Vec::new();
        for s in 0..5 {
            let mut data = vec![0.0; side * side];
            for (i, v) in data.iter_mut().enumerate() {
                *v = ((i * (13 + s) + 5) % 71) as f64 / 71.0;
            }
            imgs.push(ImageGrid::new(1, side, side, data).unwrap());
        }
        let opts = AemdOptions::new(TransformKind::Scale, 5, 2024);
        let serial = {
            let probe = ContentMaskSampler { k: 3, strides: vec![4, 8] };
            evaluate_aemd(&probe, &imgs, &opts).unwrap()
        };
        let parallel = evaluate_aemd_parallel(
            || Ok(Box::new(ContentMaskSampler { k: 3, strides: vec![4, 8] }) as Box<dyn MaskProbe>),
            &imgs,
            &opts,
            2,
        )
        .unwrap();
        assert_eq!(
            serde_json::to_string(&serial).unwrap(),
            serde_json::to_string(&parallel).unwrap()
        );
    }
}
