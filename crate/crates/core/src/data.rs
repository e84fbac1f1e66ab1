//! Synthetic glyph classification tasks and IDX interchange.
//!
//! Every sample is drawn from its own RNG stream keyed by `(seed, split,
//! index)`, and the label is `index % C`, so datasets are reproducible,
//! balanced, and can be generated in any order.

use std::f64::consts::PI;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;

use nt_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_SIDE: usize = 28;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const PIXEL_NOISE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Difficulty {
    Source,
    Easy,
    Hard,
}

impl Difficulty {
    pub fn num_classes(self) -> usize {
        match self {
            Difficulty::Source | Difficulty::Hard => 10,
            Difficulty::Easy => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Source => "source",
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        }
    }
}

impl std::str::FromStr for Difficulty {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Difficulty::Source),
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            other => Err(Error::Config(format!("unknown difficulty {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N x 1 x H x W`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub provenance: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.images.gather_outer(indices)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Labels in range, pixels in `[0, 1]`, at least `min_per_class` samples
    /// of every class.
    pub fn validate(&self, min_per_class: usize) -> Result<()> {
        if self.images.rank() != 4
            || self.images.shape()[0] != self.labels.len()
            || self.images.shape()[1] != 1
        {
            return Err(Error::Dataset(format!(
                "images {:?} do not match {} labels",
                self.images.shape(),
                self.labels.len()
            )));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::Dataset(format!(
                "label {y} outside {} classes",
                self.num_classes
            )));
        }
        if self.images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Dataset("pixel outside [0, 1]".into()));
        }
        if let Some((c, n)) = self
            .class_counts()
            .into_iter()
            .enumerate()
            .find(|&(_, n)| n < min_per_class)
        {
            return Err(Error::Dataset(format!(
                "class {c} has {n} samples, need {min_per_class}"
            )));
        }
        Ok(())
    }

    /// Digest of labels and exact pixel bits.
    pub fn digest(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.labels.hash(&mut h);
        for v in self.images.data() {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub test: Dataset,
}

/// Renders a synthetic task. Sizes must give at least 10 samples per class
/// in both splits.
pub fn gen_task(
    difficulty: Difficulty,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<TaskData> {
    let c = difficulty.num_classes();
    if n_train < 10 * c || n_test < 10 * c {
        return Err(Error::Dataset(format!(
            "{} needs at least {} samples per split, got {n_train}/{n_test}",
            difficulty.name(),
            10 * c
        )));
    }
    let make = |split: Split, n: usize| -> Result<Dataset> {
        let pixels: Vec<f64> = (0..n)
            .into_par_iter()
            .flat_map_iter(|i| {
                render_sample(
                    difficulty,
                    i % c,
                    &mut sample_rng(seed, difficulty, split, i),
                )
            })
            .collect();
        let ds = Dataset {
            images: Tensor::new(vec![n, 1, IMAGE_SIDE, IMAGE_SIDE], pixels)?,
            labels: (0..n).map(|i| i % c).collect(),
            num_classes: c,
            split,
            provenance: format!(
                "gen_task difficulty={} n={n} seed={seed}",
                difficulty.name()
            ),
        };
        ds.validate(10)?;
        Ok(ds)
    };
    Ok(TaskData {
        train: make(Split::Train, n_train)?,
        test: make(Split::Test, n_test)?,
    })
}

fn sample_rng(seed: u64, difficulty: Difficulty, split: Split, index: usize) -> ChaCha8Rng {
    let tag = (difficulty as u64) << 1 | split as u64;
    let key = splitmix(splitmix(seed ^ splitmix(tag)) ^ index as u64);
    ChaCha8Rng::seed_from_u64(key)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

type Pt = (f64, f64);

/// Glyph strokes in a `[-1, 1]` canvas.
fn glyph(difficulty: Difficulty, class: usize, rng: &mut ChaCha8Rng) -> Vec<(Pt, Pt)> {
    match difficulty {
        Difficulty::Source => source_glyph(class),
        Difficulty::Easy => easy_glyph(class),
        Difficulty::Hard => hard_glyph(class, rng),
    }
}

fn polyline(pts: &[Pt], closed: bool) -> Vec<(Pt, Pt)> {
    let mut segs: Vec<(Pt, Pt)> = pts.windows(2).map(|w| (w[0], w[1])).collect();
    if closed && pts.len() > 2 {
        segs.push((pts[pts.len() - 1], pts[0]));
    }
    segs
}

fn arc(radius: f64, start: f64, sweep: f64, center: Pt, steps: usize) -> Vec<Pt> {
    (0..=steps)
        .map(|s| {
            let t = start + sweep * s as f64 / steps as f64;
            (center.0 + radius * t.cos(), center.1 + radius * t.sin())
        })
        .collect()
}

fn regular_polygon(n: usize, radius: f64, phase: f64) -> Vec<Pt> {
    (0..n)
        .map(|i| {
            let t = phase + 2.0 * PI * i as f64 / n as f64;
            (radius * t.cos(), radius * t.sin())
        })
        .collect()
}

fn source_glyph(class: usize) -> Vec<(Pt, Pt)> {
    let s = 0.6;
    match class {
        0 => vec![((-s, 0.0), (s, 0.0))],
        1 => polyline(&regular_polygon(5, 0.65, PI / 2.0), true),
        2 => polyline(&regular_polygon(6, 0.65, 0.0), true),
        3 => vec![((-s, 0.0), (s, 0.0)), ((0.0, -s), (0.0, s))],
        4 => vec![((-s, -s), (s, s)), ((-s, s), (s, -s))],
        5 => polyline(&[(-s, -s), (s, -s), (s, s), (-s, s)], true),
        6 => polyline(&regular_polygon(3, 0.7, PI / 2.0), true),
        7 => polyline(&arc(0.6, 0.0, 2.0 * PI, (0.0, 0.0), 24), true),
        8 => polyline(&[(-s, -s), (-s, s), (s, s)], false),
        _ => polyline(&arc(0.6, 0.0, PI, (0.0, -0.3), 16), false),
    }
}

fn easy_glyph(class: usize) -> Vec<(Pt, Pt)> {
    match class {
        0 => polyline(&arc(0.6, 0.0, 2.0 * PI, (0.0, 0.0), 24), true),
        _ => vec![((-0.7, -0.35), (0.7, -0.35)), ((-0.7, 0.35), (0.7, 0.35))],
    }
}

/// Regular polygons with 3..=8 vertices and open arcs of four curvatures,
/// with per-vertex jitter.
fn hard_glyph(class: usize, rng: &mut ChaCha8Rng) -> Vec<(Pt, Pt)> {
    let jitter = 0.08;
    if class < 6 {
        let mut pts = regular_polygon(class + 3, 0.65, PI / 2.0);
        for p in &mut pts {
            p.0 += rng.gen_range(-jitter..jitter);
            p.1 += rng.gen_range(-jitter..jitter);
        }
        polyline(&pts, true)
    } else {
        // equal arc length, radius shrinking with class, opening downwards
        let radius = [1.6, 0.9, 0.6, 0.45][class - 6];
        let sweep = 1.9 / radius;
        let start = PI / 2.0 - sweep / 2.0;
        let center = (0.0, 0.3 - radius);
        polyline(&arc(radius, start, sweep, center, 16), false)
    }
}

struct Warp {
    scale: f64,
    cos: f64,
    sin: f64,
    shift: Pt,
}

fn render_sample(difficulty: Difficulty, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let strokes = glyph(difficulty, class, rng);
    // the source covers the hard task's pose range
    let (scale_jitter, shift) = match difficulty {
        Difficulty::Hard | Difficulty::Source => (0.2, 0.25),
        _ => (0.1, 0.1),
    };
    let angle = rng.gen_range(-15.0f64..15.0).to_radians();
    let w = Warp {
        scale: 1.0 + rng.gen_range(-scale_jitter..scale_jitter),
        cos: angle.cos(),
        sin: angle.sin(),
        shift: (rng.gen_range(-shift..shift), rng.gen_range(-shift..shift)),
    };
    let map = |(x, y): Pt| {
        let (x, y) = (x * w.scale, y * w.scale);
        (
            x * w.cos - y * w.sin + w.shift.0,
            x * w.sin + y * w.cos + w.shift.1,
        )
    };
    let strokes: Vec<(Pt, Pt)> = strokes.into_iter().map(|(a, b)| (map(a), map(b))).collect();
    let half_width = 1.5 / IMAGE_SIDE as f64;
    let soft = 1.5 / IMAGE_SIDE as f64;
    let mut px = Vec::with_capacity(IMAGE_SIDE * IMAGE_SIDE);
    for r in 0..IMAGE_SIDE {
        for c in 0..IMAGE_SIDE {
            let p = (
                (c as f64 + 0.5) / IMAGE_SIDE as f64 * 2.0 - 1.0,
                1.0 - (r as f64 + 0.5) / IMAGE_SIDE as f64 * 2.0,
            );
            let d = strokes
                .iter()
                .map(|&(a, b)| segment_distance(p, a, b))
                .fold(f64::INFINITY, f64::min);
            let ink = (1.0 - (d - half_width).max(0.0) / soft).clamp(0.0, 1.0);
            let noise = rng.gen_range(-PIXEL_NOISE..PIXEL_NOISE);
            px.push((ink + noise).clamp(0.0, 1.0));
        }
    }
    px
}

fn segment_distance(p: Pt, a: Pt, b: Pt) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

fn idx_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Idx {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn parse_idx(path: &Path, magic: u32, rank: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(idx_err(
            path,
            format!("header needs {header} bytes, file has {}", bytes.len()),
        ));
    }
    let word = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let found = word(0);
    if found != magic {
        return Err(idx_err(
            path,
            format!("bad magic {found:#010x}, expected {magic:#010x}"),
        ));
    }
    let dims: Vec<usize> = (0..rank).map(|d| word(4 + 4 * d) as usize).collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(idx_err(
            path,
            format!(
                "expected {expected} bytes for dims {dims:?}, found {}",
                bytes.len()
            ),
        ));
    }
    Ok((dims, bytes[header..].to_vec()))
}

/// Reads an unsigned-byte IDX image/label pair, scaling pixels to `[0, 1]`.
/// The class count is one more than the largest label.
pub fn read_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (idims, pixels) = parse_idx(images, IDX_IMAGES_MAGIC, 3)?;
    let (ldims, raw_labels) = parse_idx(labels, IDX_LABELS_MAGIC, 1)?;
    if idims[0] != ldims[0] {
        return Err(idx_err(
            labels,
            format!(
                "{} labels for {} images in {}",
                ldims[0],
                idims[0],
                images.display()
            ),
        ));
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut h = std::collections::hash_map::DefaultHasher::new();
    pixels.hash(&mut h);
    raw_labels.hash(&mut h);
    Ok(Dataset {
        images: Tensor::new(
            vec![idims[0], 1, idims[1], idims[2]],
            pixels.iter().map(|&b| b as f64 / 255.0).collect(),
        )?,
        labels,
        num_classes,
        split: Split::Train,
        provenance: format!("idx {} digest={:016x}", images.display(), h.finish()),
    })
}

/// Writes `ds` as an IDX pair, quantizing pixels to bytes.
pub fn write_idx(ds: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let shape = ds.images.shape();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::Dataset(format!(
            "cannot write images of shape {shape:?} as IDX"
        )));
    }
    if let Some(&y) = ds.labels.iter().find(|&&y| y > 255) {
        return Err(Error::Dataset(format!("label {y} does not fit in a byte")));
    }
    let mut out = Vec::with_capacity(16 + ds.images.numel());
    out.extend(IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [shape[0], shape[2], shape[3]] {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend(
        ds.images
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(images, out)?;
    let mut out = Vec::with_capacity(8 + ds.len());
    out.extend(IDX_LABELS_MAGIC.to_be_bytes());
    out.extend((ds.len() as u32).to_be_bytes());
    out.extend(ds.labels.iter().map(|&y| y as u8));
    fs::write(labels, out)?;
    Ok(())
}

/// Test accuracy of multinomial logistic regression on raw pixels, trained
/// by minibatch SGD. Used as a difficulty oracle.
pub fn linear_probe(train: &Dataset, test: &Dataset, epochs: usize, lr: f64, seed: u64) -> f64 {
    let d = train.images.numel() / train.len().max(1);
    let c = train.num_classes.max(test.num_classes);
    let mut w = vec![0.0; c * (d + 1)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let x = train.images.data();
    let scores = |w: &[f64], px: &[f64], out: &mut [f64]| {
        for (k, o) in out.iter_mut().enumerate() {
            let row = &w[k * (d + 1)..(k + 1) * (d + 1)];
            *o = row[d] + row[..d].iter().zip(px).map(|(a, b)| a * b).sum::<f64>();
        }
    };
    let mut s = vec![0.0; c];
    let batch = 32;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut grad = vec![0.0; w.len()];
            for &i in chunk {
                let px = &x[i * d..(i + 1) * d];
                scores(&w, px, &mut s);
                let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
                for k in 0..c {
                    let p = (s[k] - m).exp() / z - f64::from(u8::from(k == train.labels[i]));
                    let g = &mut grad[k * (d + 1)..(k + 1) * (d + 1)];
                    for (gj, xj) in g[..d].iter_mut().zip(px) {
                        *gj += p * xj;
                    }
                    g[d] += p;
                }
            }
            let step = lr / chunk.len() as f64;
            w.iter_mut()
                .zip(&grad)
                .for_each(|(wi, gi)| *wi -= step * gi);
        }
    }
    let xt = test.images.data();
    let correct = (0..test.len())
        .filter(|&i| {
            scores(&w, &xt[i * d..(i + 1) * d], &mut s);
            argmax(&s) == test.labels[i]
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_distance_cases() {
        assert_eq!(segment_distance((0.0, 1.0), (-1.0, 0.0), (1.0, 0.0)), 1.0);
        assert_eq!(segment_distance((3.0, 0.0), (-1.0, 0.0), (1.0, 0.0)), 2.0);
        assert_eq!(
            segment_distance((0.0, 0.0), (0.5, 0.5), (0.5, 0.5)),
            0.5f64.hypot(0.5)
        );
    }

    #[test]
    fn rejects_small_sizes() {
        assert!(gen_task(Difficulty::Hard, 99, 100, 0).is_err());
        assert!(gen_task(Difficulty::Easy, 20, 20, 0).is_ok());
    }

    #[test]
    fn per_sample_streams_are_independent_of_size() {
        let a = gen_task(Difficulty::Source, 100, 100, 7).unwrap();
        let b = gen_task(Difficulty::Source, 200, 100, 7).unwrap();
        let n = 100 * IMAGE_SIDE * IMAGE_SIDE;
        assert_eq!(&a.train.images.data()[..n], &b.train.images.data()[..n]);
    }
}
