//! Procedural shape-classification datasets and their on-disk format.
//!
//! Two tiers: `easy` draws one of 4 high-contrast shapes, centred, with mild
//! noise; `hard` draws one of 10 shapes at a random position and scale, among
//! distractor clutter, with heavy noise. Images are 3x32x32. Labels cycle
//! through the classes, so any `n` that is a multiple of the class count is
//! exactly balanced.
//!
//! Files, all integers little-endian:
//!
//! ```text
//! <prefix>.images   "PDAT" | u32 version | u32 tier | u64 seed | u32 n
//!                   | u32 c | u32 h | u32 w | u32 classes
//!                   | classes x (u32 len | utf-8 name) | n*c*h*w f32
//! <prefix>.labels   "PLBL" | u32 version | u32 n | n x u32
//! ```

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const IMAGE_SIZE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;
const VERSION: u32 = 1;

const SHAPES: [&str; 10] = [
    "circle", "square", "triangle", "cross", "ring", "diamond", "x", "hbar", "vbar", "frame",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tier {
    Easy,
    Hard,
}

impl Tier {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "easy" => Some(Tier::Easy),
            "hard" => Some(Tier::Hard),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tier::Easy => "easy",
            Tier::Hard => "hard",
        }
    }

    pub fn class_count(self) -> usize {
        match self {
            Tier::Easy => 4,
            Tier::Hard => 10,
        }
    }

    fn code(self) -> u32 {
        match self {
            Tier::Easy => 0,
            Tier::Hard => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Per-item `(channels, height, width)`.
    pub item_shape: (usize, usize, usize),
    /// Items back to back, NCHW.
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub tier: Tier,
    pub seed: u64,
}

/// Whether the point `(dx, dy)`, relative to the shape centre, lies inside
/// shape `class` of half-extent `s`.
fn inside(class: usize, dx: f64, dy: f64, s: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    let r = (dx * dx + dy * dy).sqrt();
    let bar = s / 3.0;
    match class {
        0 => r <= s,
        1 => ax.max(ay) <= 0.85 * s,
        2 => {
            // Upward triangle, apex at -s, base at +0.8s.
            dy >= -s && dy <= 0.8 * s && ax <= 0.6 * (dy + s)
        }
        3 => (ax <= bar && ay <= s) || (ay <= bar && ax <= s),
        4 => r <= s && r >= 0.55 * s,
        5 => ax + ay <= s,
        6 => ax <= s && ay <= s && ((dx - dy).abs() <= bar || (dx + dy).abs() <= bar),
        7 => ay <= bar && ax <= s,
        8 => ax <= bar && ay <= s,
        9 => ax.max(ay) <= 0.9 * s && ax.max(ay) >= 0.55 * s,
        _ => unreachable!("class index below 10"),
    }
}

/// Fraction of a pixel covered, by 3x3 supersampling.
fn coverage(f: impl Fn(f64, f64) -> bool, px: usize, py: usize) -> f64 {
    let mut hits = 0;
    for sy in 0..3 {
        for sx in 0..3 {
            let x = px as f64 + (sx as f64 + 0.5) / 3.0;
            let y = py as f64 + (sy as f64 + 0.5) / 3.0;
            if f(x, y) {
                hits += 1;
            }
        }
    }
    hits as f64 / 9.0
}

fn paint(img: &mut [f64], color: [f64; 3], f: impl Fn(f64, f64) -> bool) {
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    for py in 0..IMAGE_SIZE {
        for px in 0..IMAGE_SIZE {
            let a = coverage(&f, px, py);
            if a > 0.0 {
                for (c, &col) in color.iter().enumerate() {
                    let v = &mut img[c * plane + py * IMAGE_SIZE + px];
                    *v += a * (col - *v);
                }
            }
        }
    }
}

fn render(tier: Tier, class: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut img = vec![0.0f64; IMAGE_CHANNELS * plane];
    let mid = IMAGE_SIZE as f64 / 2.0;
    let (noise, fg, cx, cy, s) = match tier {
        Tier::Easy => {
            let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.2));
            for c in 0..IMAGE_CHANNELS {
                img[c * plane..(c + 1) * plane].fill(bg[c]);
            }
            let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.8..1.0));
            let s = rng.random_range(9.0..11.0);
            let cx = mid + rng.random_range(-1.0..1.0);
            let cy = mid + rng.random_range(-1.0..1.0);
            (0.03, fg, cx, cy, s)
        }
        Tier::Hard => {
            let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.6));
            for c in 0..IMAGE_CHANNELS {
                img[c * plane..(c + 1) * plane].fill(bg[c]);
            }
            // Clutter: small blobs and strokes in random colours.
            let clutter = rng.random_range(3..7);
            for _ in 0..clutter {
                let col: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
                let x0 = rng.random_range(0.0..IMAGE_SIZE as f64);
                let y0 = rng.random_range(0.0..IMAGE_SIZE as f64);
                if rng.random_bool(0.5) {
                    let r = rng.random_range(1.0..2.5);
                    paint(&mut img, col, |x, y| (x - x0).powi(2) + (y - y0).powi(2) <= r * r);
                } else {
                    let ang: f64 = rng.random_range(0.0..std::f64::consts::PI);
                    let len = rng.random_range(3.0..8.0);
                    let (ux, uy) = (ang.cos(), ang.sin());
                    paint(&mut img, col, |x, y| {
                        let (px, py) = (x - x0, y - y0);
                        let t = px * ux + py * uy;
                        let d = (px * uy - py * ux).abs();
                        t.abs() <= len / 2.0 && d <= 0.6
                    });
                }
            }
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let contrast = rng.random_range(0.3..0.5);
            let fg: [f64; 3] = std::array::from_fn(|c| (bg[c] + sign * contrast).clamp(0.0, 1.0));
            let s = rng.random_range(5.0..10.0);
            let cx = rng.random_range(s + 1.0..IMAGE_SIZE as f64 - s - 1.0);
            let cy = rng.random_range(s + 1.0..IMAGE_SIZE as f64 - s - 1.0);
            (0.2, fg, cx, cy, s)
        }
    };
    paint(&mut img, fg, |x, y| inside(class, x - cx, y - cy, s));
    let dist = Normal::new(0.0, noise).expect("positive std");
    img.iter().map(|&v| (v + dist.sample(rng)) as f32).collect()
}

impl Dataset {
    /// Deterministic dataset of `n` items; fails unless every class appears.
    pub fn generate(tier: Tier, n: usize, seed: u64) -> Result<Self> {
        let classes = tier.class_count();
        if n < classes {
            return Err(Error::usage(format!(
                "{} tier has {classes} classes; need at least that many items, got {n}",
                tier.name()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::with_capacity(n * IMAGE_CHANNELS * IMAGE_SIZE * IMAGE_SIZE);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % classes;
            images.extend(render(tier, class, &mut rng));
            labels.push(class);
        }
        Ok(Dataset {
            item_shape: (IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE),
            images,
            labels,
            class_names: SHAPES[..classes].iter().map(|s| s.to_string()).collect(),
            tier,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    fn item_len(&self) -> usize {
        let (c, h, w) = self.item_shape;
        c * h * w
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let l = self.item_len();
        &self.images[i * l..(i + 1) * l]
    }

    /// Stacks the given items into a batch tensor plus their labels.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let (c, h, w) = self.item_shape;
        let mut data = Vec::with_capacity(indices.len() * self.item_len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::from_f64(v as f64)));
        }
        let t = Tensor::from_vec(Shape::new(indices.len(), c, h, w), data).expect("batch size");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Batches covering the whole dataset in order.
    pub fn batches<T: Scalar>(&self, size: usize) -> impl Iterator<Item = (Tensor<T>, Vec<usize>)> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        let chunks: Vec<Vec<usize>> = idx.chunks(size.max(1)).map(|c| c.to_vec()).collect();
        chunks.into_iter().map(move |c| self.batch(&c))
    }

    /// Items of the listed classes only, relabelled `0..classes.len()` in
    /// the given order.
    pub fn subset_classes(&self, classes: &[usize]) -> Result<Self> {
        if let Some(&bad) = classes.iter().find(|&&c| c >= self.class_count()) {
            return Err(Error::usage(format!("class {bad} not in dataset")));
        }
        let mut out = Dataset {
            item_shape: self.item_shape,
            images: Vec::new(),
            labels: Vec::new(),
            class_names: classes.iter().map(|&c| self.class_names[c].clone()).collect(),
            tier: self.tier,
            seed: self.seed,
        };
        for i in 0..self.len() {
            if let Some(new) = classes.iter().position(|&c| c == self.labels[i]) {
                out.images.extend_from_slice(self.image(i));
                out.labels.push(new);
            }
        }
        Ok(out)
    }

    pub fn paths(prefix: &Path) -> (PathBuf, PathBuf) {
        let with = |ext: &str| {
            let mut s = prefix.as_os_str().to_owned();
            s.push(ext);
            PathBuf::from(s)
        };
        (with(".images"), with(".labels"))
    }

    pub fn to_bytes(&self) -> (Vec<u8>, Vec<u8>) {
        let (c, h, w) = self.item_shape;
        let mut img = Vec::with_capacity(64 + self.images.len() * 4);
        img.extend_from_slice(b"PDAT");
        for v in [VERSION, self.tier.code()] {
            img.extend_from_slice(&v.to_le_bytes());
        }
        img.extend_from_slice(&self.seed.to_le_bytes());
        for v in [self.len(), c, h, w, self.class_count()] {
            img.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for name in &self.class_names {
            img.extend_from_slice(&(name.len() as u32).to_le_bytes());
            img.extend_from_slice(name.as_bytes());
        }
        for &v in &self.images {
            img.extend_from_slice(&v.to_le_bytes());
        }
        let mut lab = Vec::with_capacity(12 + self.len() * 4);
        lab.extend_from_slice(b"PLBL");
        lab.extend_from_slice(&VERSION.to_le_bytes());
        lab.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for &l in &self.labels {
            lab.extend_from_slice(&(l as u32).to_le_bytes());
        }
        (img, lab)
    }

    /// Writes `<prefix>.images` and `<prefix>.labels`.
    pub fn save(&self, prefix: &Path) -> Result<()> {
        let (ip, lp) = Self::paths(prefix);
        let (img, lab) = self.to_bytes();
        std::fs::write(&ip, img).map_err(|e| Error::io(&ip, e))?;
        std::fs::write(&lp, lab).map_err(|e| Error::io(&lp, e))?;
        Ok(())
    }

    pub fn load(prefix: &Path) -> Result<Self> {
        let (ip, lp) = Self::paths(prefix);
        let img = std::fs::read(&ip).map_err(|e| Error::io(&ip, e))?;
        let lab = std::fs::read(&lp).map_err(|e| Error::io(&lp, e))?;
        Self::from_bytes(&img, &lab)
    }

    pub fn from_bytes(img: &[u8], lab: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes: img, at: 0, file: "images" };
        r.magic(b"PDAT")?;
        r.version()?;
        let tier = match r.u32("tier")? {
            0 => Tier::Easy,
            1 => Tier::Hard,
            t => return Err(r.err(format!("unknown tier code {t}"))),
        };
        let seed = r.u64("seed")?;
        let n = r.u32("item count")? as usize;
        let c = r.u32("channels")? as usize;
        let h = r.u32("height")? as usize;
        let w = r.u32("width")? as usize;
        let classes = r.u32("class count")? as usize;
        let mut class_names = Vec::with_capacity(classes);
        for _ in 0..classes {
            let len = r.u32("class name length")? as usize;
            let raw = r.take(len, "class name")?;
            class_names.push(String::from_utf8(raw.to_vec()).map_err(|_| r.err("class name is not UTF-8"))?);
        }
        let count = n * c * h * w;
        let raw = r.take(count * 4, "pixel data")?;
        let images = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        r.finish()?;

        let mut r = Reader { bytes: lab, at: 0, file: "labels" };
        r.magic(b"PLBL")?;
        r.version()?;
        let ln = r.u32("label count")? as usize;
        if ln != n {
            return Err(Error::Data(format!("{ln} labels for {n} images")));
        }
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let l = r.u32("label")? as usize;
            if l >= classes {
                return Err(Error::Data(format!("label {l} out of range for {classes} classes")));
            }
            labels.push(l);
        }
        r.finish()?;
        Ok(Dataset {
            item_shape: (c, h, w),
            images,
            labels,
            class_names,
            tier,
            seed,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    file: &'static str,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.at as u64,
            message: format!("{} file: {}", self.file, message.into()),
        }
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.at..self.at + len)
            .ok_or_else(|| self.err(format!("truncated inside {what}")))?;
        self.at += len;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn magic(&mut self, m: &[u8; 4]) -> Result<()> {
        if self.take(4, "magic")? != m {
            self.at = 0;
            return Err(self.err("bad magic"));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32("version")?;
        if v != VERSION {
            return Err(self.err(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(self.err(format!("{} trailing bytes", self.bytes.len() - self.at)));
        }
        Ok(())
    }
}
