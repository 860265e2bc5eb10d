//! Two-class textured toy images with pixel ground truth.
//!
//! Every image is a smooth correlated-noise background with one to a few
//! non-overlapping elliptical blobs. Blobs of class 0 carry oriented stripes,
//! blobs of class 1 a dot lattice. Both textures are zero-mean with equal
//! variance, so the class is carried by spatial structure only.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::BinaryMask;
use crate::pnm::{dequantize, quantize, Raster};
use crate::tensor::Tensor;

const CHANNELS: usize = 3;
const PLACEMENT_RETRIES: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split `{other}`"))),
        }
    }
}

/// Image with its class label and, for evaluation only, the foreground mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `C×H×W` values in `[0, 1]`, already on the 8-bit grid.
    pub pixels: Tensor,
    pub label: usize,
    pub gt_mask: BinaryMask,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[LabeledImage] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<LabeledImage> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Inclusive range of blobs per image.
    pub blob_count: (usize, usize),
    /// Range of the foreground fraction drawn per image.
    pub fg_fraction: (f64, f64),
    /// Smallest minor/major axis ratio of a blob.
    pub min_aspect: f64,
    /// Stripe wavelength in pixels (class 0).
    pub stripe_period: f64,
    /// Dot lattice spacing in pixels (class 1).
    pub dot_period: f64,
    /// Peak-to-mean amplitude of the blob texture.
    pub texture_amplitude: f64,
    /// Uniform intensity offset of every blob, whatever its class.
    pub fg_offset: f64,
    /// Standard deviation of the background noise field.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            classes: 2,
            height: 64,
            width: 64,
            train_per_class: 200,
            val_per_class: 50,
            test_per_class: 100,
            blob_count: (1, 3),
            fg_fraction: (0.15, 0.4),
            min_aspect: 0.6,
            stripe_period: 6.0,
            dot_period: 6.0,
            texture_amplitude: 0.18,
            fg_offset: -0.12,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

/// Background color, a desaturated pink.
const BASE_COLOR: [f64; CHANNELS] = [0.80, 0.62, 0.74];
/// Per-channel gain of the blob texture and offset, a purple tint.
const FG_GAIN: [f64; CHANNELS] = [1.0, 1.2, 0.8];

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes != 2 {
            return bad(format!("gen.classes must be 2 (two textures), got {}", self.classes));
        }
        if self.height < 8 || self.width < 8 {
            return bad(format!("gen image size {}×{} too small", self.height, self.width));
        }
        let (lo, hi) = self.fg_fraction;
        if !(lo > 0.05 && hi < 0.6 && lo <= hi) {
            return bad(format!("gen.fg_fraction ({lo}, {hi}) must lie within (0.05, 0.6)"));
        }
        let (bmin, bmax) = self.blob_count;
        if bmin == 0 || bmin > bmax {
            return bad(format!("gen.blob_count ({bmin}, {bmax}) must satisfy 1 ≤ min ≤ max"));
        }
        if !(self.min_aspect > 0.0 && self.min_aspect <= 1.0) {
            return bad(format!("gen.min_aspect must be in (0, 1], got {}", self.min_aspect));
        }
        for (name, v) in [
            ("gen.stripe_period", self.stripe_period),
            ("gen.dot_period", self.dot_period),
        ] {
            if !(v >= 2.0) || !v.is_finite() {
                return bad(format!("{name} must be ≥ 2 pixels, got {v}"));
            }
        }
        for (name, v) in [
            ("gen.texture_amplitude", self.texture_amplitude),
            ("gen.noise_std", self.noise_std),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be ≥ 0, got {v}"));
            }
        }
        if !self.fg_offset.is_finite() {
            return bad("gen.fg_offset must be finite".into());
        }
        Ok(())
    }

    pub fn per_class(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_class,
            Split::Val => self.val_per_class,
            Split::Test => self.test_per_class,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64, grow: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        let (a, b) = (self.a + grow, self.b + grow);
        (u / a).powi(2) + (v / b).powi(2) <= 1.0
    }
}

fn image_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn stream_id(split: Split, class: usize, index: usize) -> u64 {
    ((split as u64) << 48) | ((class as u64) << 40) | index as u64
}

/// Box blur applied three times along each axis, with edge clamping.
fn smooth(field: &mut [f64], h: usize, w: usize, radius: usize) {
    let mut tmp = vec![0.0; field.len()];
    let r = radius as isize;
    for _ in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for d in -r..=r {
                    let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                    acc += field[y * w + xx];
                }
                tmp[y * w + x] = acc / (2 * radius + 1) as f64;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for d in -r..=r {
                    let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                    acc += tmp[yy * w + x];
                }
                field[y * w + x] = acc / (2 * radius + 1) as f64;
            }
        }
    }
}

/// Zero-mean field with standard deviation `std`.
fn noise_field(rng: &mut ChaCha8Rng, h: usize, w: usize, std: f64) -> Vec<f64> {
    let mut f: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
    smooth(&mut f, h, w, 2);
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let k = if sd > 0.0 { std / sd } else { 0.0 };
    f.iter().map(|v| (v - mean) * k).collect()
}

/// Dot profile at squared lattice distance, `exp(−d²/2s²)` with `s = period/5`.
fn dot_profile(d2: f64, period: f64) -> f64 {
    let s = period / 5.0;
    (-d2 / (2.0 * s * s)).exp()
}

/// Mean and standard deviation of the dot profile over one lattice cell.
fn dot_moments(period: f64) -> (f64, f64) {
    let n = 64;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for i in 0..n {
        for j in 0..n {
            let u = ((i as f64 + 0.5) / n as f64 - 0.5) * period;
            let v = ((j as f64 + 0.5) / n as f64 - 0.5) * period;
            let p = dot_profile(u * u + v * v, period);
            sum += p;
            sq += p * p;
        }
    }
    let m = sum / (n * n) as f64;
    (m, (sq / (n * n) as f64 - m * m).sqrt())
}

/// Class texture with zero mean and standard deviation `1/√2`, the moments of
/// a unit sine.
struct Texture {
    class: usize,
    period: f64,
    theta: f64,
    phase_y: f64,
    phase_x: f64,
    dot_mean: f64,
    dot_scale: f64,
}

impl Texture {
    fn draw(rng: &mut ChaCha8Rng, class: usize, cfg: &GenConfig) -> Texture {
        let period = if class == 0 {
            cfg.stripe_period
        } else {
            cfg.dot_period
        };
        let (dot_mean, dot_sd) = dot_moments(cfg.dot_period);
        Texture {
            class,
            period,
            theta: rng.random_range(0.0..PI),
            phase_y: rng.random_range(0.0..period),
            phase_x: rng.random_range(0.0..period),
            dot_mean,
            dot_scale: std::f64::consts::FRAC_1_SQRT_2 / dot_sd,
        }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        if self.class == 0 {
            let (s, c) = self.theta.sin_cos();
            (2.0 * PI * (x * c + y * s + self.phase_x) / self.period).sin()
        } else {
            let wrap = |t: f64| {
                let r = t.rem_euclid(self.period);
                r.min(self.period - r)
            };
            let du = wrap(x + self.phase_x);
            let dv = wrap(y + self.phase_y);
            (dot_profile(du * du + dv * dv, self.period) - self.dot_mean) * self.dot_scale
        }
    }
}

fn place_blobs(
    rng: &mut ChaCha8Rng,
    cfg: &GenConfig,
    target: f64,
    count: usize,
) -> Option<(Vec<Ellipse>, BinaryMask)> {
    let (h, w) = (cfg.height, cfg.width);
    let total_area = target * (h * w) as f64;
    let weights: Vec<f64> = (0..count).map(|_| rng.random_range(0.6..1.4)).collect();
    let wsum: f64 = weights.iter().sum();
    let mut blobs: Vec<Ellipse> = Vec::with_capacity(count);
    for wi in weights {
        let area = total_area * wi / wsum;
        let aspect = rng.random_range(cfg.min_aspect..=1.0);
        let a = (area / (PI * aspect)).sqrt();
        let b = a * aspect;
        let theta = rng.random_range(0.0..PI);
        // axis-aligned half extents of the rotated ellipse
        let ey = ((a * theta.sin()).powi(2) + (b * theta.cos()).powi(2)).sqrt();
        let ex = ((a * theta.cos()).powi(2) + (b * theta.sin()).powi(2)).sqrt();
        if 2.0 * ey + 2.0 > h as f64 || 2.0 * ex + 2.0 > w as f64 {
            return None;
        }
        let mut placed = false;
        for _ in 0..50 {
            let e = Ellipse {
                cy: rng.random_range(ey + 1.0..=h as f64 - ey - 1.0),
                cx: rng.random_range(ex + 1.0..=w as f64 - ex - 1.0),
                a,
                b,
                theta,
            };
            let clear = blobs.iter().all(|o| {
                let d = ((e.cy - o.cy).powi(2) + (e.cx - o.cx).powi(2)).sqrt();
                d > e.a + o.a + 2.0
            });
            if clear {
                blobs.push(e);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    let mut mask = BinaryMask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            mask.bits_mut()[y * w + x] = blobs.iter().any(|e| e.contains(py, px, 0.0));
        }
    }
    Some((blobs, mask))
}

fn compose(
    rng: &mut ChaCha8Rng,
    cfg: &GenConfig,
    label: usize,
    mask: &BinaryMask,
) -> Tensor {
    let (h, w) = (cfg.height, cfg.width);
    let noise = noise_field(rng, h, w, cfg.noise_std);
    let texture = Texture::draw(rng, label, cfg);
    let mut data = vec![0.0; CHANNELS * h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let fg = if mask.bits()[i] {
                cfg.fg_offset + cfg.texture_amplitude * texture.at(y as f64, x as f64)
            } else {
                0.0
            };
            for c in 0..CHANNELS {
                let v = BASE_COLOR[c] + noise[i] + FG_GAIN[c] * fg;
                data[c * h * w + i] = dequantize(quantize(v));
            }
        }
    }
    Tensor::new(vec![CHANNELS, h, w], data).expect("sized above")
}

fn generate_one(cfg: &GenConfig, label: usize, stream: u64, target: Option<f64>) -> Result<LabeledImage> {
    let mut rng = image_rng(cfg.seed, stream);
    let (lo, hi) = cfg.fg_fraction;
    for attempt in 0..PLACEMENT_RETRIES {
        let v = target.unwrap_or_else(|| rng.random_range(lo..=hi));
        let (bmin, bmax) = cfg.blob_count;
        // later attempts fall back to fewer, rounder blobs
        let bmax = bmax.saturating_sub(attempt / 100).max(bmin);
        let count = rng.random_range(bmin..=bmax);
        let Some((_, mask)) = place_blobs(&mut rng, cfg, v, count) else {
            continue;
        };
        let f = mask.fraction();
        let ok_range = target.is_some() || (lo..=hi).contains(&f);
        if ok_range && (f - v).abs() <= 0.03 {
            let pixels = compose(&mut rng, cfg, label, &mask);
            return Ok(LabeledImage {
                pixels,
                label,
                gt_mask: mask,
            });
        }
    }
    Err(Error::Config(format!(
        "could not place blobs for image stream {stream:#x} after {PLACEMENT_RETRIES} attempts"
    )))
}

fn generate_split(cfg: &GenConfig, split: Split, target: Option<f64>) -> Result<Vec<LabeledImage>> {
    let n = cfg.per_class(split);
    let mut out = Vec::with_capacity(n * cfg.classes);
    // classes interleaved so any prefix is balanced
    for i in 0..n {
        for label in 0..cfg.classes {
            out.push(generate_one(cfg, label, stream_id(split, label, i), target)?);
        }
    }
    Ok(out)
}

/// Builds the train/val/test splits.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut ds = Dataset::default();
    for split in Split::ALL {
        *ds.split_mut(split) = generate_split(cfg, split, None)?;
    }
    Ok(ds)
}

/// Like [`generate`], but every image targets foreground fraction `v`.
pub fn generate_with_fraction(cfg: &GenConfig, v: f64) -> Result<Dataset> {
    cfg.validate()?;
    if !(v > 0.05 && v < 0.6) {
        return Err(Error::Config(format!("forced foreground fraction {v} outside (0.05, 0.6)")));
    }
    let mut ds = Dataset::default();
    for split in Split::ALL {
        *ds.split_mut(split) = generate_split(cfg, split, Some(v))?;
    }
    Ok(ds)
}

/// `n` blob-free images: background noise only, empty ground truth, labels
/// alternating over the classes. Uses a random stream disjoint from the
/// regular splits.
pub fn generate_background_only(cfg: &GenConfig, n: usize) -> Result<Vec<LabeledImage>> {
    cfg.validate()?;
    let empty = BinaryMask::empty(cfg.height, cfg.width);
    (0..n)
        .map(|i| {
            let label = i % cfg.classes;
            let mut rng = image_rng(cfg.seed, (3u64 << 48) | i as u64);
            let pixels = compose(&mut rng, cfg, label, &empty);
            Ok(LabeledImage {
                pixels,
                label,
                gt_mask: empty.clone(),
            })
        })
        .collect()
}

/// Mean pixel intensity over all channels.
pub fn mean_intensity(img: &LabeledImage) -> f64 {
    img.pixels.sum() / img.pixels.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub path: String,
    pub label: usize,
    pub split: Split,
}

pub const MANIFEST: &str = "manifest.jsonl";

fn mask_path_for(image: &str) -> String {
    let stem = image
        .strip_prefix("images/")
        .unwrap_or(image)
        .trim_end_matches(".ppm");
    format!("masks/{stem}.pgm")
}

/// Writes `images/*.ppm`, `masks/*.pgm` and `manifest.jsonl` under `dir`.
pub fn save(ds: &Dataset, dir: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let manifest_path = dir.join(MANIFEST);
    let mut manifest = Vec::new();
    for split in Split::ALL {
        for (i, img) in ds.split(split).iter().enumerate() {
            let rel = format!("images/{split}_{i:05}.ppm");
            let s = img.pixels.shape();
            Raster::from_planar(img.pixels.data(), s[0], s[1], s[2]).write(&dir.join(&rel))?;
            img.gt_mask.to_raster().write(&dir.join(mask_path_for(&rel)))?;
            let row = ManifestRow {
                path: rel,
                label: img.label,
                split,
            };
            serde_json::to_writer(&mut manifest, &row).expect("plain struct");
            manifest.push(b'\n');
        }
    }
    let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    f.write_all(&manifest).map_err(|e| Error::io(&manifest_path, e))
}

/// Reads a dataset written by [`save`].
pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST);
    let file = fs::File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut ds = Dataset::default();
    let mut seen = HashSet::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = format!("{}:{}", manifest_path.display(), n + 1);
        let row: ManifestRow = serde_json::from_str(&line)
            .map_err(|e| Error::corrupt(&record, format!("bad manifest row: {e}")))?;
        if !seen.insert(row.path.clone()) {
            return Err(Error::corrupt(&record, format!("duplicate path `{}`", row.path)));
        }
        let image = Raster::read(&dir.join(&row.path))?;
        if image.channels != CHANNELS {
            return Err(Error::corrupt(&row.path, "image must be RGB"));
        }
        let mask_rel = mask_path_for(&row.path);
        let mask = BinaryMask::from_raster(&Raster::read(&dir.join(&mask_rel))?, &mask_rel)?;
        if (mask.height(), mask.width()) != (image.height, image.width) {
            return Err(Error::corrupt(&mask_rel, "mask size differs from its image"));
        }
        let pixels = Tensor::new(
            vec![CHANNELS, image.height, image.width],
            image.to_planar(),
        )?;
        ds.split_mut(row.split).push(LabeledImage {
            pixels,
            label: row.label,
            gt_mask: mask,
        });
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            train_per_class: 12,
            val_per_class: 4,
            test_per_class: 4,
            ..GenConfig::default()
        }
    }

    #[test]
    fn split_sizes_and_balance() {
        let ds = generate(&small()).unwrap();
        assert_eq!(ds.train.len(), 24);
        assert_eq!(ds.val.len(), 8);
        assert_eq!(ds.test.len(), 8);
        let ones = ds.train.iter().filter(|i| i.label == 1).count();
        assert_eq!(ones, 12);
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = GenConfig {
            seed: 1,
            ..small()
        };
        assert_ne!(generate(&small()).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn fractions_inside_configured_range() {
        let cfg = small();
        let ds = generate(&cfg).unwrap();
        for split in Split::ALL {
            for img in ds.split(split) {
                let f = img.gt_mask.fraction();
                assert!(f >= cfg.fg_fraction.0 && f <= cfg.fg_fraction.1, "{f}");
            }
        }
    }

    #[test]
    fn forced_fraction() {
        for v in [0.1, 0.3, 0.5] {
            let ds = generate_with_fraction(&small(), v).unwrap();
            for img in ds.split(Split::Train) {
                assert!((img.gt_mask.fraction() - v).abs() <= 0.05);
            }
        }
    }

    #[test]
    fn pixels_on_8bit_grid_and_in_range() {
        let ds = generate(&small()).unwrap();
        for img in &ds.train {
            for &v in img.pixels.data() {
                assert!((0.0..=1.0).contains(&v));
                assert_eq!(dequantize(quantize(v)), v);
            }
        }
    }

    #[test]
    fn textures_are_zero_mean_with_matched_spread() {
        let cfg = GenConfig::default();
        let mut rng = image_rng(5, 0);
        for class in 0..2 {
            let mut sum = 0.0;
            let mut sq = 0.0;
            let n = 400;
            for _ in 0..20 {
                let t = Texture::draw(&mut rng, class, &cfg);
                for i in 0..n {
                    let v = t.at((i / 20) as f64 * 0.37, (i % 20) as f64 * 0.53);
                    sum += v;
                    sq += v * v;
                }
            }
            let m = sum / (20 * n) as f64;
            let sd = (sq / (20 * n) as f64 - m * m).sqrt();
            assert!(m.abs() < 0.05, "class {class} mean {m}");
            assert!((sd - 0.5f64.sqrt()).abs() < 0.05, "class {class} sd {sd}");
        }
    }

    #[test]
    fn background_only_has_empty_truth() {
        let bg = generate_background_only(&small(), 6).unwrap();
        assert_eq!(bg.len(), 6);
        assert!(bg.iter().all(|i| i.gt_mask.count() == 0));
        assert_eq!(bg, generate_background_only(&small(), 6).unwrap());
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            GenConfig { fg_fraction: (0.01, 0.3), ..small() },
            GenConfig { fg_fraction: (0.2, 0.7), ..small() },
            GenConfig { blob_count: (0, 2), ..small() },
            GenConfig { classes: 3, ..small() },
            GenConfig { noise_std: -1.0, ..small() },
        ] {
            assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn save_load_round_trip() {
        let ds = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&ds, dir.path()).unwrap();
        let rows = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert_eq!(rows.lines().count(), ds.len());
        assert_eq!(load(dir.path()).unwrap(), ds);
    }

    #[test]
    fn load_names_missing_record() {
        let ds = generate(&GenConfig {
            train_per_class: 2,
            val_per_class: 1,
            test_per_class: 1,
            ..GenConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&ds, dir.path()).unwrap();
        fs::remove_file(dir.path().join("images/val_00001.ppm")).unwrap();
        let err = load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("val_00001.ppm"), "{err}");

        fs::write(dir.path().join("images/val_00001.ppm"), b"P6\n64 64\n255\n").unwrap();
        let err = load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("val_00001.ppm"), "{err}");
    }
}
