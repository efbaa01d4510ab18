//! 2-D affine transform algebra and inverse-mapped bilinear image warping.
//!
//! Coordinate convention: pixel (row i, col j) sits at the continuous point
//! (x, y) = (j + 0.5, i + 0.5); transforms act on (x, y) with y increasing
//! downward. Evaluation transforms are built about the image center.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MIN_DET: f64 = 1e-9;

/// 2x3 affine map: `x' = a x + b y + c`, `y' = d x + e y + f`,
/// stored row-major as `[a, b, c, d, e, f]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine2D {
    pub m: [f64; 6],
}

impl Affine2D {
    pub const IDENTITY: Affine2D = Affine2D {
        m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
    };

    pub fn new(m: [f64; 6]) -> Result<Affine2D> {
        let t = Affine2D { m };
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite affine coefficients"));
        }
        if t.det().abs() <= MIN_DET {
            return Err(Error::invalid(format!(
                "affine map is singular (|det| = {} <= {MIN_DET})",
                t.det().abs()
            )));
        }
        Ok(t)
    }

    pub fn translation(dx: f64, dy: f64) -> Affine2D {
        Affine2D {
            m: [1.0, 0.0, dx, 0.0, 1.0, dy],
        }
    }

    pub fn det(&self) -> f64 {
        self.m[0] * self.m[4] - self.m[1] * self.m[3]
    }

    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let (x, y) = p;
        (
            self.m[0] * x + self.m[1] * y + self.m[2],
            self.m[3] * x + self.m[4] * y + self.m[5],
        )
    }

    /// `self` after `inner`: (self ∘ inner)(p) = self(inner(p)).
    pub fn compose(&self, inner: &Affine2D) -> Affine2D {
        let a = &self.m;
        let b = &inner.m;
        Affine2D {
            m: [
                a[0] * b[0] + a[1] * b[3],
                a[0] * b[1] + a[1] * b[4],
                a[0] * b[2] + a[1] * b[5] + a[2],
                a[3] * b[0] + a[4] * b[3],
                a[3] * b[1] + a[4] * b[4],
                a[3] * b[2] + a[4] * b[5] + a[5],
            ],
        }
    }

    pub fn inverse(&self) -> Result<Affine2D> {
        let det = self.det();
        if det.abs() <= MIN_DET {
            return Err(Error::Numeric("cannot invert a singular affine map".into()));
        }
        let [a, b, c, d, e, f] = self.m;
        let (ia, ib, id, ie) = (e / det, -b / det, -d / det, a / det);
        Ok(Affine2D {
            m: [ia, ib, -(ia * c + ib * f), id, ie, -(id * c + ie * f)],
        })
    }
}

/// Reflection / skew axis selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis2 {
    Horizontal,
    Vertical,
}

/// The evaluation transform families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Identity,
    Rotation,
    Reflection,
    Skew,
    Scale,
}

impl TransformKind {
    pub fn parse(s: &str) -> Result<TransformKind> {
        match s.to_ascii_lowercase().as_str() {
            "identity" => Ok(TransformKind::Identity),
            "rotation" => Ok(TransformKind::Rotation),
            "reflection" => Ok(TransformKind::Reflection),
            "skew" => Ok(TransformKind::Skew),
            "scale" => Ok(TransformKind::Scale),
            other => Err(Error::Config(format!(
                "unknown transform '{other}' (expected identity|rotation|reflection|skew|scale)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TransformKind::Identity => "identity",
            TransformKind::Rotation => "rotation",
            TransformKind::Reflection => "reflection",
            TransformKind::Skew => "skew",
            TransformKind::Scale => "scale",
        }
    }
}

/// A concrete parameterization of one transform family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TransformSpec {
    Identity,
    Rotation { degrees: f64 },
    Reflection { axis: Axis2 },
    Skew { shear: f64, axis: Axis2 },
    Scale { factor: f64 },
}

pub const ROTATION_RANGE_DEG: (f64, f64) = (-180.0, 180.0);
pub const SHEAR_RANGE: (f64, f64) = (-0.3, 0.3);
pub const SCALE_RANGE: (f64, f64) = (0.5, 2.0);

impl TransformSpec {
    pub fn kind(&self) -> TransformKind {
        match self {
            TransformSpec::Identity => TransformKind::Identity,
            TransformSpec::Rotation { .. } => TransformKind::Rotation,
            TransformSpec::Reflection { .. } => TransformKind::Reflection,
            TransformSpec::Skew { .. } => TransformKind::Skew,
            TransformSpec::Scale { .. } => TransformKind::Scale,
        }
    }
}

/// Draws random parameters for one transform family: rotation angle uniform
/// over [-180, 180) degrees, reflection axis uniform, shear uniform over
/// [-0.3, 0.3], scale uniform over [0.5, 2.0].
pub fn sample_transform<R: Rng>(kind: TransformKind, rng: &mut R) -> TransformSpec {
    match kind {
        TransformKind::Identity => TransformSpec::Identity,
        TransformKind::Rotation => TransformSpec::Rotation {
            degrees: rng.random_range(ROTATION_RANGE_DEG.0..ROTATION_RANGE_DEG.1),
        },
        TransformKind::Reflection => TransformSpec::Reflection {
            axis: if rng.random_range(0..2) == 0 {
                Axis2::Horizontal
            } else {
                Axis2::Vertical
            },
        },
        TransformKind::Skew => TransformSpec::Skew {
            shear: rng.random_range(SHEAR_RANGE.0..=SHEAR_RANGE.1),
            axis: if rng.random_range(0..2) == 0 {
                Axis2::Horizontal
            } else {
                Axis2::Vertical
            },
        },
        TransformKind::Scale => TransformSpec::Scale {
            factor: rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
        },
    }
}

/// Builds the affine map for a transform about the given center point.
/// Parameters outside the declared ranges are rejected.
pub fn make_transform(spec: &TransformSpec, center: (f64, f64)) -> Result<Affine2D> {
    let (cx, cy) = center;
    let linear = match *spec {
        TransformSpec::Identity => [1.0, 0.0, 0.0, 1.0],
        TransformSpec::Rotation { degrees } => {
            if !degrees.is_finite() || !(ROTATION_RANGE_DEG.0..=ROTATION_RANGE_DEG.1).contains(&degrees)
            {
                return Err(Error::invalid(format!(
                    "rotation angle {degrees} outside [{}, {}] degrees",
                    ROTATION_RANGE_DEG.0, ROTATION_RANGE_DEG.1
                )));
            }
            let t = degrees.to_radians();
            [t.cos(), -t.sin(), t.sin(), t.cos()]
        }
        TransformSpec::Reflection { axis } => match axis {
            // Vertical mirror axis flips x; horizontal flips y.
            Axis2::Vertical => [-1.0, 0.0, 0.0, 1.0],
            Axis2::Horizontal => [1.0, 0.0, 0.0, -1.0],
        },
        TransformSpec::Skew { shear, axis } => {
            if !shear.is_finite() || !(SHEAR_RANGE.0..=SHEAR_RANGE.1).contains(&shear) {
                return Err(Error::invalid(format!(
                    "shear {shear} outside [{}, {}]",
                    SHEAR_RANGE.0, SHEAR_RANGE.1
                )));
            }
            match axis {
                Axis2::Horizontal => [1.0, shear, 0.0, 1.0],
                Axis2::Vertical => [1.0, 0.0, shear, 1.0],
            }
        }
        TransformSpec::Scale { factor } => {
            if !factor.is_finite() || !(SCALE_RANGE.0..=SCALE_RANGE.1).contains(&factor) {
                return Err(Error::invalid(format!(
                    "scale factor {factor} outside [{}, {}]",
                    SCALE_RANGE.0, SCALE_RANGE.1
                )));
            }
            [factor, 0.0, 0.0, factor]
        }
    };
    let [a, b, d, e] = linear;
    Affine2D::new([
        a,
        b,
        cx - a * cx - b * cy,
        d,
        e,
        cy - d * cx - e * cy,
    ])
}

/// Dense multi-channel raster with f64 intensities.
#[derive(Clone, Debug)]
pub struct ImageGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<ImageGrid> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("image extents must be positive"));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "image data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite pixel value".into()));
        }
        Ok(ImageGrid {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> ImageGrid {
        ImageGrid {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[(c * self.height + row) * self.width + col]
    }

    /// Continuous center of the image in pixel coordinates.
    pub fn center(&self) -> (f64, f64) {
        (self.width as f64 / 2.0, self.height as f64 / 2.0)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.data.clone(), &[self.channels, self.height, self.width])
            .expect("image shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<ImageGrid> {
        if t.rank() != 3 {
            return Err(Error::shape(format!(
                "expected [C, H, W] tensor, got {:?}",
                t.shape()
            )));
        }
        ImageGrid::new(t.shape()[0], t.shape()[1], t.shape()[2], t.to_vec())
    }

    /// Bilinear sample at continuous pixel coordinates; reads outside the
    /// image are zero. Samples that land exactly on a pixel center return
    /// that pixel bit for bit.
    pub fn bilinear(&self, c: usize, x: f64, y: f64) -> f64 {
        let (h, w) = (self.height as isize, self.width as isize);
        let u = x - 0.5;
        let v = y - 0.5;
        let x0 = u.floor();
        let y0 = v.floor();
        let fx = u - x0;
        let fy = v - y0;
        let (xi, yi) = (x0 as isize, y0 as isize);
        let at = |r: isize, col: isize| -> f64 {
            if r < 0 || r >= h || col < 0 || col >= w {
                0.0
            } else {
                self.get(c, r as usize, col as usize)
            }
        };
        if fx == 0.0 && fy == 0.0 {
            return at(yi, xi);
        }
        at(yi, xi) * (1.0 - fx) * (1.0 - fy)
            + at(yi, xi + 1) * fx * (1.0 - fy)
            + at(yi + 1, xi) * (1.0 - fx) * fy
            + at(yi + 1, xi + 1) * fx * fy
    }
}

/// Warps an image by `t` using inverse mapping with bilinear interpolation;
/// output extents equal the input's, out-of-bounds source reads are zero.
pub fn warp_image(img: &ImageGrid, t: &Affine2D) -> Result<ImageGrid> {
    let inv = t.inverse()?;
    let mut out = ImageGrid::zeros(img.channels, img.height, img.width);
    for c in 0..img.channels {
        for row in 0..img.height {
            for col in 0..img.width {
                let p = (col as f64 + 0.5, row as f64 + 0.5);
                let (sx, sy) = inv.apply(p);
                out.data[(c * img.height + row) * img.width + col] = img.bilinear(c, sx, sy);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn rotation_zero_is_identity() {
        let t = make_transform(&TransformSpec::Rotation { degrees: 0.0 }, (3.0, 7.0)).unwrap();
        assert_eq!(t.m, Affine2D::IDENTITY.m);
    }

    #[test]
    fn reflection_is_involution() {
        let t = make_transform(
            &TransformSpec::Reflection { axis: Axis2::Vertical },
            (4.0, 4.0),
        )
        .unwrap();
        let id = t.compose(&t);
        for (got, want) in id.m.iter().zip(Affine2D::IDENTITY.m) {
            assert!(close(*got, want, 1e-12));
        }
    }

    #[test]
    fn rotation_quarter_turn_about_origin() {
        let t = make_transform(&TransformSpec::Rotation { degrees: 90.0 }, (0.0, 0.0)).unwrap();
        let (x, y) = t.apply((1.0, 0.0));
        assert!(close(x, 0.0, 1e-12) && close(y, 1.0, 1e-12));
    }

    #[test]
    fn scale_about_center_closed_form() {
        let t = make_transform(&TransformSpec::Scale { factor: 2.0 }, (10.0, 10.0)).unwrap();
        let (x, y) = t.apply((11.0, 10.0));
        assert!(close(x, 12.0, 1e-12) && close(y, 10.0, 1e-12));
    }

    #[test]
    fn compose_matches_sequential_application() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..50 {
            let t1 = make_transform(
                &sample_transform(TransformKind::Rotation, &mut rng),
                (8.0, 8.0),
            )
            .unwrap();
            let t2 = make_transform(
                &sample_transform(TransformKind::Skew, &mut rng),
                (8.0, 8.0),
            )
            .unwrap();
            let p = (rng.random_range(-5.0..20.0), rng.random_range(-5.0..20.0));
            let (x1, y1) = t2.compose(&t1).apply(p);
            let (x2, y2) = t2.apply(t1.apply(p));
            assert!(close(x1, x2, 1e-12) && close(y1, y2, 1e-12));
        }
    }

    #[test]
    fn inverse_composes_to_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for kind in [
            TransformKind::Rotation,
            TransformKind::Reflection,
            TransformKind::Skew,
            TransformKind::Scale,
        ] {
            for _ in 0..20 {
                let t = make_transform(&sample_transform(kind, &mut rng), (32.0, 32.0)).unwrap();
                let id = t.compose(&t.inverse().unwrap());
                for (got, want) in id.m.iter().zip(Affine2D::IDENTITY.m) {
                    assert!(close(*got, want, 1e-12));
                }
            }
        }
    }

    #[test]
    fn centered_transforms_fix_the_center() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let center = (32.0, 32.0);
        for kind in [
            TransformKind::Rotation,
            TransformKind::Reflection,
            TransformKind::Skew,
            TransformKind::Scale,
        ] {
            for _ in 0..20 {
                let t = make_transform(&sample_transform(kind, &mut rng), center).unwrap();
                let (x, y) = t.apply(center);
                assert!(close(x, center.0, 1e-12) && close(y, center.1, 1e-12));
            }
        }
    }

    #[test]
    fn out_of_range_params_rejected() {
        assert!(make_transform(&TransformSpec::Rotation { degrees: 181.0 }, (0.0, 0.0)).is_err());
        assert!(make_transform(&TransformSpec::Skew { shear: 0.31, axis: Axis2::Horizontal }, (0.0, 0.0)).is_err());
        assert!(make_transform(&TransformSpec::Scale { factor: 0.4 }, (0.0, 0.0)).is_err());
        assert!(make_transform(&TransformSpec::Scale { factor: 2.5 }, (0.0, 0.0)).is_err());
    }

    #[test]
    fn identity_warp_is_bit_identical() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let img = ImageGrid::new(1, 8, 8, data.clone()).unwrap();
        let out = warp_image(&img, &Affine2D::IDENTITY).unwrap();
        for (a, b) in out.data.iter().zip(&data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn quarter_rotation_moves_marker_pixels_exactly() {
        // 8x8 card with an asymmetric 2-pixel marker at (row 1, cols 2..=3).
        let mut img = ImageGrid::zeros(1, 8, 8);
        img.data[8 + 2] = 1.0;
        img.data[8 + 3] = 0.5;
        let t = make_transform(&TransformSpec::Rotation { degrees: 90.0 }, (4.0, 4.0)).unwrap();
        let out = warp_image(&img, &t).unwrap();
        // Pixel centers map to pixel centers: (2.5, 1.5) -> (6.5, 2.5) and
        // (3.5, 1.5) -> (6.5, 3.5).
        for (row, col, want) in [(2usize, 6usize, 1.0), (3, 6, 0.5)] {
            assert!(
                close(out.get(0, row, col), want, 1e-12),
                "marker at ({row},{col})"
            );
        }
        let total: f64 = out.data.iter().sum();
        assert!(close(total, 1.5, 1e-12));
    }

    #[test]
    fn warp_round_trip_recovers_interior() {
        // Smooth low-frequency image; warp + inverse warp loses only
        // interpolation accuracy away from the borders.
        let side = 32usize;
        let mut data = vec![0.0; side * side];
        for r in 0..side {
            for c in 0..side {
                let (x, y) = (c as f64 / side as f64, r as f64 / side as f64);
                data[r * side + c] =
                    0.5 + 0.25 * (2.0 * std::f64::consts::PI * x).sin() * (2.0 * std::f64::consts::PI * y).cos();
            }
        }
        let img = ImageGrid::new(1, side, side, data).unwrap();
        let spec = TransformSpec::Rotation { degrees: 33.0 };
        let t = make_transform(&spec, img.center()).unwrap();
        let there = warp_image(&img, &t).unwrap();
        let back = warp_image(&there, &t.inverse().unwrap()).unwrap();
        let margin = 10;
        let mut linf = 0.0f64;
        for r in margin..side - margin {
            for c in margin..side - margin {
                linf = linf.max((back.get(0, r, c) - img.get(0, r, c)).abs());
            }
        }
        assert!(linf < 0.02, "interior round-trip error {linf}");
    }

    #[test]
    fn warp_is_linear_in_intensities() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let d1: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..1.0)).collect();
        let d2: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..1.0)).collect();
        let (a, b) = (0.7, -0.3);
        let mix: Vec<f64> = d1.iter().zip(&d2).map(|(x, y)| a * x + b * y).collect();
        let t = make_transform(&TransformSpec::Rotation { degrees: 25.0 }, (5.0, 5.0)).unwrap();
        let w1 = warp_image(&ImageGrid::new(1, 10, 10, d1).unwrap(), &t).unwrap();
        let w2 = warp_image(&ImageGrid::new(1, 10, 10, d2).unwrap(), &t).unwrap();
        let wm = warp_image(&ImageGrid::new(1, 10, 10, mix).unwrap(), &t).unwrap();
        for i in 0..100 {
            assert!(close(wm.data[i], a * w1.data[i] + b * w2.data[i], 1e-12));
        }
    }

    #[test]
    fn singular_transform_rejected() {
        assert!(Affine2D::new([1.0, 2.0, 0.0, 2.0, 4.0, 0.0]).is_err());
    }
}
