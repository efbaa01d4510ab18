//! Synthetic shapes dataset: grayscale renderings of four shape classes
//! (square, disk, triangle, cross) with random rotation, scale, and position
//! jitter, written as binary PGM files plus a CSV manifest.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ImageGrid;
use crate::pnm::{read_pgm, write_pgm, GrayImage};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeClass {
    Square,
    Disk,
    Triangle,
    Cross,
}

pub const CLASSES: [ShapeClass; 4] = [
    ShapeClass::Square,
    ShapeClass::Disk,
    ShapeClass::Triangle,
    ShapeClass::Cross,
];

impl ShapeClass {
    pub fn index(self) -> usize {
        match self {
            ShapeClass::Square => 0,
            ShapeClass::Disk => 1,
            ShapeClass::Triangle => 2,
            ShapeClass::Cross => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Square => "square",
            ShapeClass::Disk => "disk",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Cross => "cross",
        }
    }
}

// Shape extents as fractions of the image side at scale 1.
pub const SQUARE_HALF_FRAC: f64 = 0.28;
pub const DISK_RADIUS_FRAC: f64 = 0.28;
pub const TRIANGLE_RADIUS_FRAC: f64 = 0.34;
pub const CROSS_ARM_HALF_LEN_FRAC: f64 = 0.32;
pub const CROSS_ARM_HALF_WIDTH_FRAC: f64 = 0.10;
pub const JITTER_FRAC: f64 = 0.08;
pub const SCALE_RANGE: (f64, f64) = (0.5, 1.0);

const SUPERSAMPLE: usize = 4;

/// Renders one shape, anti-aliased by 4x4 supersampling, into a row-major
/// side*side buffer of coverage values in [0, 1].
pub fn render_shape(
    class: ShapeClass,
    side: usize,
    rotation_deg: f64,
    scale: f64,
    jitter: (f64, f64),
) -> Vec<f64> {
    let center = (
        side as f64 / 2.0 + jitter.0,
        side as f64 / 2.0 + jitter.1,
    );
    let theta = rotation_deg.to_radians();
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    let s = side as f64 * scale;
    let inside = |px: f64, py: f64| -> bool {
        // Rotate the sample into the shape frame.
        let (dx, dy) = (px - center.0, py - center.1);
        let qx = cos_t * dx + sin_t * dy;
        let qy = -sin_t * dx + cos_t * dy;
        match class {
            ShapeClass::Square => {
                let h = SQUARE_HALF_FRAC * s;
                qx.abs() <= h && qy.abs() <= h
            }
            ShapeClass::Disk => {
                let r = DISK_RADIUS_FRAC * s;
                qx * qx + qy * qy <= r * r
            }
            ShapeClass::Triangle => {
                let r = TRIANGLE_RADIUS_FRAC * s;
                // Equilateral triangle, one vertex pointing up (-y).
                let verts = [
                    (0.0, -r),
                    (r * (std::f64::consts::PI / 6.0).cos(), r * (std::f64::consts::PI / 6.0).sin()),
                    (-r * (std::f64::consts::PI / 6.0).cos(), r * (std::f64::consts::PI / 6.0).sin()),
                ];
                let mut sign = 0.0f64;
                for i in 0..3 {
                    let (ax, ay) = verts[i];
                    let (bx, by) = verts[(i + 1) % 3];
                    let cross = (bx - ax) * (qy - ay) - (by - ay) * (qx - ax);
                    if i == 0 {
                        sign = cross;
                    } else if cross * sign < 0.0 {
                        return false;
                    }
                }
                true
            }
            ShapeClass::Cross => {
                let len = CROSS_ARM_HALF_LEN_FRAC * s;
                let wid = CROSS_ARM_HALF_WIDTH_FRAC * s;
                (qx.abs() <= wid && qy.abs() <= len) || (qy.abs() <= wid && qx.abs() <= len)
            }
        }
    };
    let mut out = vec![0.0; side * side];
    let step = 1.0 / SUPERSAMPLE as f64;
    for r in 0..side {
        for c in 0..side {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = c as f64 + (sx as f64 + 0.5) * step;
                    let py = r as f64 + (sy as f64 + 0.5) * step;
                    if inside(px, py) {
                        hits += 1;
                    }
                }
            }
            out[r * side + c] = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Data(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ManifestRow {
    pub path: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Copy, Debug)]
pub struct DatasetSpec {
    pub n_per_class: usize,
    pub side: usize,
    pub seed: u64,
}

pub const TRAIN_FRACTION: f64 = 0.8;

/// Generates the dataset on disk: one PGM per image plus `manifest.csv`
/// with `path,label,split` rows. Deterministic for a fixed spec.
pub fn generate_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Vec<ManifestRow>> {
    if spec.side < 32 {
        return Err(Error::invalid(format!(
            "dataset side must be at least 32 pixels, got {}",
            spec.side
        )));
    }
    if spec.n_per_class == 0 {
        return Err(Error::invalid("need at least one image per class"));
    }
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let mut rows = Vec::with_capacity(4 * spec.n_per_class);
    let train_cut = (spec.n_per_class as f64 * TRAIN_FRACTION).floor() as usize;
    let jit = JITTER_FRAC * spec.side as f64;
    for class in CLASSES {
        for idx in 0..spec.n_per_class {
            let rotation = rng.random_range(0.0..360.0);
            let scale = rng.random_range(SCALE_RANGE.0..SCALE_RANGE.1);
            let jitter = (rng.random_range(-jit..jit), rng.random_range(-jit..jit));
            let pixels = render_shape(class, spec.side, rotation, scale, jitter);
            let bytes: Vec<u8> = pixels.iter().map(|v| (v * 255.0).round() as u8).collect();
            let name = format!("{}_{idx:04}.pgm", class.name());
            write_pgm(
                &dir.join(&name),
                &GrayImage {
                    width: spec.side,
                    height: spec.side,
                    pixels: bytes,
                },
            )?;
            rows.push(ManifestRow {
                path: name,
                label: class.index(),
                split: if idx < train_cut { Split::Train } else { Split::Val },
            });
        }
    }
    save_manifest(&rows, &dir.join("manifest.csv"))?;
    Ok(rows)
}

pub fn save_manifest(rows: &[ManifestRow], path: &Path) -> Result<()> {
    let mut out = String::from("path,label,split\n");
    for row in rows {
        out.push_str(&format!("{},{},{}\n", row.path, row.label, row.split.name()));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
    let mut lines = raw.lines();
    match lines.next() {
        Some("path,label,split") => {}
        other => {
            return Err(Error::Data(format!(
                "bad manifest header {:?}, expected 'path,label,split'",
                other.unwrap_or("")
            )))
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Data(format!("manifest line {}: '{line}'", lineno + 2)));
        }
        rows.push(ManifestRow {
            path: parts[0].to_string(),
            label: parts[1]
                .parse()
                .map_err(|_| Error::Data(format!("bad label '{}'", parts[1])))?,
            split: Split::parse(parts[2])?,
        });
    }
    Ok(rows)
}

/// One split of the dataset held in memory as 8-bit images.
pub struct Dataset {
    pub side: usize,
    pub images: Vec<Vec<u8>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn load(dir: &Path, split: Split) -> Result<Dataset> {
        let rows = load_manifest(&dir.join("manifest.csv"))?;
        Dataset::from_rows(dir, &rows, split)
    }

    pub fn from_rows(dir: &Path, rows: &[ManifestRow], split: Split) -> Result<Dataset> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut side = 0usize;
        for row in rows.iter().filter(|r| r.split == split) {
            let img = read_pgm(&dir.join(&row.path))?;
            if img.width != img.height {
                return Err(Error::Data(format!("non-square image '{}'", row.path)));
            }
            if side == 0 {
                side = img.width;
            } else if side != img.width {
                return Err(Error::Data(format!(
                    "image '{}' side {} differs from {}",
                    row.path, img.width, side
                )));
            }
            images.push(img.pixels);
            labels.push(row.label);
        }
        if images.is_empty() {
            return Err(Error::Data(format!("no images in split '{}'", split.name())));
        }
        Ok(Dataset {
            side,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stacks the chosen images into an [N, 1, side, side] tensor of
    /// intensities in [0, 1].
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let hw = self.side * self.side;
        let mut data = Vec::with_capacity(indices.len() * hw);
        for &i in indices {
            data.extend(self.images[i].iter().map(|&b| b as f64 / 255.0));
        }
        Tensor::from_vec(data, &[indices.len(), 1, self.side, self.side]).expect("batch shape")
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn image_grid(&self, index: usize) -> ImageGrid {
        let data: Vec<f64> = self.images[index].iter().map(|&b| b as f64 / 255.0).collect();
        ImageGrid::new(1, self.side, self.side, data).expect("dataset image")
    }
}
