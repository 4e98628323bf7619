//! ShapesWorld: a procedurally generated segmentation task, plus mIoU.
//!
//! Every sample is a pure function of `(spec, split, index)`. Shapes are drawn
//! in painter's order, so later shapes occlude earlier ones in both the image
//! and the label map.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

pub const BACKGROUND: u32 = 0;
pub const CLASS_NAMES: [&str; 6] = ["background", "circle", "rectangle", "stripe", "triangle", "noise_blob"];

const BASE_COLORS: [[f64; 3]; 5] = [
    [0.85, 0.25, 0.2],
    [0.2, 0.7, 0.3],
    [0.25, 0.35, 0.85],
    [0.85, 0.8, 0.25],
    [0.7, 0.3, 0.7],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub seed: u64,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub pixel_noise: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 128,
            num_classes: 6,
            train_count: 64,
            val_count: 32,
            test_count: 32,
            seed: 7,
            min_shapes: 2,
            max_shapes: 6,
            pixel_noise: 0.02,
        }
    }
}

impl DatasetSpec {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Val => self.val_count,
            Split::Test => self.test_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field, msg: &str| Err(Error::InvalidConfig { field, msg: msg.into() });
        if self.height == 0 || self.width == 0 {
            return bad("dataset.height", "image dimensions must be positive");
        }
        if self.num_classes < 2 || self.num_classes > CLASS_NAMES.len() {
            return bad("dataset.num_classes", "must be between 2 and 6");
        }
        if self.min_shapes > self.max_shapes {
            return bad("dataset.min_shapes", "exceeds max_shapes");
        }
        if !(self.pixel_noise >= 0.0 && self.pixel_noise.is_finite()) {
            return bad("dataset.pixel_noise", "must be a finite non-negative number");
        }
        Ok(())
    }

    /// Seeds of different splits live in disjoint ranges.
    fn sample_seed(&self, split: Split, index: usize) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9) ^ (split.tag() << 56) ^ index as u64
    }
}

/// One image `[1 x 3 x H x W]` with per-pixel labels in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor4,
    pub labels: Vec<u32>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape().h
    }

    pub fn width(&self) -> usize {
        self.image.shape().w
    }
}

/// Generates sample `index` of `split`.
pub fn generate(spec: &DatasetSpec, split: Split, index: usize) -> Result<Sample> {
    let len = spec.count(split);
    if index >= len {
        return Err(Error::IndexOutOfRange { index, len });
    }
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.sample_seed(split, index));

    let mut img = vec![0.0; 3 * h * w];
    let mut labels = vec![BACKGROUND; h * w];

    // Background: a gray linear gradient with a slight tint.
    let base: f64 = rng.gen_range(0.3..0.6);
    let tint: [f64; 3] = [
        rng.gen_range(-0.05..0.05),
        rng.gen_range(-0.05..0.05),
        rng.gen_range(-0.05..0.05),
    ];
    let (gy, gx): (f64, f64) = (rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15));
    for y in 0..h {
        for x in 0..w {
            let v = base + gy * (y as f64 / h as f64 - 0.5) + gx * (x as f64 / w as f64 - 0.5);
            for c in 0..3 {
                img[(c * h + y) * w + x] = v + tint[c];
            }
        }
    }

    let shapes = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    let scale = h.min(w) as f64;
    for _ in 0..shapes {
        let class = rng.gen_range(1..spec.num_classes as u32);
        let jitter: [f64; 3] = [
            rng.gen_range(-0.15..0.15),
            rng.gen_range(-0.15..0.15),
            rng.gen_range(-0.15..0.15),
        ];
        let color: Vec<f64> = BASE_COLORS[(class as usize - 1) % BASE_COLORS.len()]
            .iter()
            .zip(jitter)
            .map(|(b, j)| b + j)
            .collect();
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let shape = ShapeGeom::sample(class, cy, cx, scale, &mut rng);
        let textured = class == 5;
        for y in 0..h {
            for x in 0..w {
                if !shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    continue;
                }
                labels[y * w + x] = class;
                for c in 0..3 {
                    let v = if textured {
                        color[c] + rng.gen_range(-0.25..0.25)
                    } else {
                        color[c]
                    };
                    img[(c * h + y) * w + x] = v;
                }
            }
        }
    }

    if spec.pixel_noise > 0.0 {
        let noise = Normal::new(0.0, spec.pixel_noise).expect("finite sigma");
        for v in img.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(Sample {
        image: Tensor4::from_vec(Shape4::new(1, 3, h, w), img)?,
        labels,
    })
}

enum ShapeGeom {
    Circle {
        cy: f64,
        cx: f64,
        r: f64,
    },
    Rect {
        y0: f64,
        x0: f64,
        y1: f64,
        x1: f64,
    },
    Stripe {
        cy: f64,
        cx: f64,
        dy: f64,
        dx: f64,
        half_len: f64,
        half_thick: f64,
    },
    Triangle {
        pts: [(f64, f64); 3],
    },
    Blob {
        cy: f64,
        cx: f64,
        r: f64,
        lobes: f64,
        phase: f64,
        amp: f64,
    },
}

impl ShapeGeom {
    fn sample(class: u32, cy: f64, cx: f64, s: f64, rng: &mut ChaCha8Rng) -> Self {
        match class {
            1 => ShapeGeom::Circle {
                cy,
                cx,
                r: rng.gen_range(0.18..0.38) * s,
            },
            2 => {
                let hh = rng.gen_range(0.15..0.4) * s;
                let hw = rng.gen_range(0.2..0.6) * s;
                ShapeGeom::Rect {
                    y0: cy - hh,
                    x0: cx - hw,
                    y1: cy + hh,
                    x1: cx + hw,
                }
            }
            3 => {
                let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                ShapeGeom::Stripe {
                    cy,
                    cx,
                    dy: angle.sin(),
                    dx: angle.cos(),
                    half_len: rng.gen_range(0.6..1.4) * s,
                    half_thick: rng.gen_range(0.08..0.16) * s,
                }
            }
            4 => {
                let size = rng.gen_range(0.35..0.7) * s;
                let rot: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let pts = [0.0, 1.0, 2.0].map(|k| {
                    let a = rot + k * std::f64::consts::TAU / 3.0;
                    (cy + size * a.sin(), cx + size * a.cos())
                });
                ShapeGeom::Triangle { pts }
            }
            _ => ShapeGeom::Blob {
                cy,
                cx,
                r: rng.gen_range(0.18..0.32) * s,
                lobes: rng.gen_range(3..6) as f64,
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                amp: rng.gen_range(0.1..0.3),
            },
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            ShapeGeom::Circle { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            ShapeGeom::Rect { y0, x0, y1, x1 } => y >= y0 && y <= y1 && x >= x0 && x <= x1,
            ShapeGeom::Stripe {
                cy,
                cx,
                dy,
                dx,
                half_len,
                half_thick,
            } => {
                let (py, px) = (y - cy, x - cx);
                let along = py * dy + px * dx;
                let across = py * dx - px * dy;
                along.abs() <= half_len && across.abs() <= half_thick
            }
            ShapeGeom::Triangle { pts } => {
                let sign = |a: (f64, f64), b: (f64, f64)| (x - b.1) * (a.0 - b.0) - (a.1 - b.1) * (y - b.0);
                let d1 = sign(pts[0], pts[1]);
                let d2 = sign(pts[1], pts[2]);
                let d3 = sign(pts[2], pts[0]);
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
            ShapeGeom::Blob {
                cy,
                cx,
                r,
                lobes,
                phase,
                amp,
            } => {
                let (py, px) = (y - cy, x - cx);
                let theta = py.atan2(px);
                let radius = r * (1.0 + amp * (lobes * theta + phase).sin());
                py * py + px * px <= radius * radius
            }
        }
    }
}

/// Horizontal mirror of image and labels.
pub fn flip_horizontal(sample: &Sample) -> Sample {
    let s = sample.image.shape();
    let (h, w) = (s.h, s.w);
    let src = sample.image.data();
    let mut img = vec![0.0; src.len()];
    let mut labels = vec![0; sample.labels.len()];
    for y in 0..h {
        for x in 0..w {
            labels[y * w + (w - 1 - x)] = sample.labels[y * w + x];
            for c in 0..s.n * s.c {
                img[(c * h + y) * w + (w - 1 - x)] = src[(c * h + y) * w + x];
            }
        }
    }
    Sample {
        image: Tensor4::from_vec(s, img).expect("same shape"),
        labels,
    }
}

/// Random horizontal flip with probability one half.
pub fn augment(sample: &Sample, rng: &mut impl Rng) -> Sample {
    if rng.gen_bool(0.5) {
        flip_horizontal(sample)
    } else {
        sample.clone()
    }
}

/// Accumulated class confusion for dataset-level mIoU.
#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    classes: usize,
    /// `counts[truth * classes + pred]`.
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &[u32], truth: &[u32]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::invalid(
                "miou",
                format!("prediction has {} pixels, truth has {}", pred.len(), truth.len()),
            ));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            for v in [p, t] {
                if v as usize >= self.classes {
                    return Err(Error::LabelOutOfRange {
                        label: v,
                        classes: self.classes,
                    });
                }
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Mean IoU over classes present in truth or prediction; 1.0 when empty.
    pub fn miou(&self) -> f64 {
        let k = self.classes;
        let mut total = 0.0;
        let mut present = 0;
        for c in 0..k {
            let tp = self.counts[c * k + c];
            let truth: u64 = self.counts[c * k..(c + 1) * k].iter().sum();
            let pred: u64 = (0..k).map(|t| self.counts[t * k + c]).sum();
            let union = truth + pred - tp;
            if union > 0 {
                total += tp as f64 / union as f64;
                present += 1;
            }
        }
        if present == 0 {
            1.0
        } else {
            total / present as f64
        }
    }
}

/// Mean intersection-over-union of one prediction.
pub fn miou(pred: &[u32], truth: &[u32], classes: usize) -> Result<f64> {
    let mut c = Confusion::new(classes);
    c.add(pred, truth)?;
    Ok(c.miou())
}

/// Stacks samples into a batch image `[B x 3 x H x W]` and shared labels.
pub fn collate(samples: &[Sample]) -> Result<(Tensor4, Arc<[u32]>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("collate", "empty batch"))?
        .image
        .shape();
    let mut data = Vec::with_capacity(samples.len() * first.numel());
    let mut labels = Vec::with_capacity(samples.len() * first.plane());
    for s in samples {
        if s.image.shape() != first {
            return Err(Error::ShapeMismatch {
                op: "collate",
                lhs: first,
                rhs: s.image.shape(),
            });
        }
        data.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.labels);
    }
    let shape = Shape4::new(samples.len(), first.c, first.h, first.w);
    Ok((Tensor4::from_vec(shape, data)?, labels.into()))
}

/// Materializes a whole split.
pub fn load_split(spec: &DatasetSpec, split: Split) -> Result<Vec<Sample>> {
    (0..spec.count(split)).map(|i| generate(spec, split, i)).collect()
}

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct DumpManifest {
    version: u32,
    spec: DatasetSpec,
    split: Split,
    count: usize,
    image_layout: String,
    label_layout: String,
}

/// Writes a split as `NNNNN.img` (f64 little-endian, CHW) and `NNNNN.lbl`
/// (one byte per pixel) plus `manifest.json`.
pub fn dump_split(spec: &DatasetSpec, split: Split, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let count = spec.count(split);
    for i in 0..count {
        let s = generate(spec, split, i)?;
        let bytes: Vec<u8> = s.image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join(format!("{i:05}.img")), bytes)?;
        let lbl: Vec<u8> = s.labels.iter().map(|&l| l as u8).collect();
        fs::write(dir.join(format!("{i:05}.lbl")), lbl)?;
    }
    let manifest = DumpManifest {
        version: DATASET_VERSION,
        spec: spec.clone(),
        split,
        count,
        image_layout: "f64-le CHW 3xHxW".into(),
        label_layout: "u8 HxW".into(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dump(dir: &Path) -> Result<(DatasetSpec, Vec<Sample>)> {
    let manifest: DumpManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::SchemaVersion {
            kind: "dataset",
            found: manifest.version,
            expected: DATASET_VERSION,
        });
    }
    let (h, w) = (manifest.spec.height, manifest.spec.width);
    let mut out = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let raw = fs::read(dir.join(format!("{i:05}.img")))?;
        if raw.len() != 3 * h * w * 8 {
            return Err(Error::Malformed {
                kind: "dataset image",
                msg: format!("{i:05}.img has {} bytes", raw.len()),
            });
        }
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let labels: Vec<u32> = fs::read(dir.join(format!("{i:05}.lbl")))?
            .into_iter()
            .map(u32::from)
            .collect();
        if labels.len() != h * w {
            return Err(Error::Malformed {
                kind: "dataset labels",
                msg: format!("{i:05}.lbl has {} pixels", labels.len()),
            });
        }
        out.push(Sample {
            image: Tensor4::from_vec(Shape4::new(1, 3, h, w), data)?,
            labels,
        });
    }
    Ok((manifest.spec, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_pure() {
        let spec = DatasetSpec::default();
        let a = generate(&spec, Split::Train, 3).unwrap();
        let b = generate(&spec, Split::Train, 3).unwrap();
        assert_eq!(a, b);
        let c = generate(&spec, Split::Val, 3).unwrap();
        assert_ne!(a.labels, c.labels);
    }

    #[test]
    fn zero_shapes_is_all_background() {
        let spec = DatasetSpec {
            min_shapes: 0,
            max_shapes: 0,
            ..Default::default()
        };
        let s = generate(&spec, Split::Test, 0).unwrap();
        assert!(s.labels.iter().all(|&l| l == BACKGROUND));
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn index_out_of_range() {
        let spec = DatasetSpec::default();
        assert!(matches!(
            generate(&spec, Split::Val, spec.val_count),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn miou_examples() {
        let t = [0, 0, 1, 1];
        assert_eq!(miou(&t, &t, 2).unwrap(), 1.0);
        assert_eq!(miou(&[1, 1, 0, 0], &t, 2).unwrap(), 0.0);
        // IoU0 = 1/2, IoU1 = 2/3
        let v = miou(&[0, 1, 1, 1], &t, 2).unwrap();
        assert!((v - 7.0 / 12.0).abs() < 1e-15);
        assert!(miou(&[0, 1], &t, 2).is_err());
    }

    #[test]
    fn flip_is_an_involution() {
        let s = generate(&DatasetSpec::default(), Split::Train, 0).unwrap();
        assert_eq!(flip_horizontal(&flip_horizontal(&s)), s);
        let f = flip_horizontal(&s);
        let w = s.width();
        for (r, c) in [(0, 0), (5, 17), (63, 127)] {
            assert_eq!(f.labels[r * w + (w - 1 - c)], s.labels[r * w + c]);
            assert_eq!(f.image.at(0, 1, r, w - 1 - c), s.image.at(0, 1, r, c));
        }
    }

    #[test]
    fn dump_round_trip() {
        let spec = DatasetSpec {
            height: 8,
            width: 16,
            val_count: 3,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        dump_split(&spec, Split::Val, dir.path()).unwrap();
        let (back, samples) = load_dump(dir.path()).unwrap();
        assert_eq!(back, spec);
        assert_eq!(samples, load_split(&spec, Split::Val).unwrap());
    }
}
