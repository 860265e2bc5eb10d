//! Mask construction: CAM fusion, pseudo-binarization, complement, Hadamard
//! application, region sizes and corner-aligned bilinear upsampling.
//!
//! These are the value-level routines used at evaluation time and as
//! references for the graph versions used during training.

use std::path::Path;

use crate::autodiff::kernels;
use crate::error::{Error, Result};
use crate::nets::CamStack;
use crate::pnm::{quantize, Raster};
use crate::prob::Posterior;
use crate::tensor::Tensor;

/// Per-pixel values in `[0, 1]` over an `H×W` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    values: Tensor,
}

impl SoftMask {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::Shape(format!(
                "mask must be H×W, got {:?}",
                values.shape()
            )));
        }
        if let Some(v) = values.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("mask value {v} outside [0, 1]")));
        }
        Ok(SoftMask { values })
    }

    pub fn full(height: usize, width: usize, value: f64) -> Result<Self> {
        SoftMask::new(Tensor::full(&[height, width], value))
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Pixels with value ≥ `threshold` are foreground.
    pub fn binarize(&self, threshold: f64) -> BinaryMask {
        BinaryMask {
            height: self.height(),
            width: self.width(),
            bits: self.values.data().iter().map(|&v| v >= threshold).collect(),
        }
    }

    /// 8-bit grayscale with `round(255 · m)`, halves rounded up.
    pub fn to_raster(&self) -> Raster {
        Raster {
            width: self.width(),
            height: self.height(),
            channels: 1,
            samples: self.values.data().iter().map(|&v| quantize(v)).collect(),
        }
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        self.to_raster().write(path)
    }
}

/// Foreground indicator over an `H×W` grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "{} bits for a {height}×{width} mask",
                bits.len()
            )));
        }
        Ok(BinaryMask { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Foreground pixel count over `H·W`.
    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.bits.len().max(1) as f64
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// Foreground as 255, background as 0.
    pub fn to_raster(&self) -> Raster {
        Raster {
            width: self.width,
            height: self.height,
            channels: 1,
            samples: self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
    }

    /// Samples ≥ 128 are foreground.
    pub fn from_raster(r: &Raster, record: &str) -> Result<Self> {
        if r.channels != 1 {
            return Err(Error::corrupt(record, "mask must be single-channel"));
        }
        Ok(BinaryMask {
            height: r.height,
            width: r.width,
            bits: r.samples.iter().map(|&s| s >= 128).collect(),
        })
    }
}

/// Image multiplied pixelwise by a mask, `C×H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedImage {
    pub pixels: Tensor,
}

/// Posterior-weighted sum of the per-class CAMs (modalities averaged first),
/// min-max normalized to `[0, 1]`; a constant map becomes all `0.5`.
pub fn fuse_cams(cams: &CamStack, p_hat: &Posterior) -> Result<Tensor> {
    if cams.classes() != p_hat.classes() {
        return Err(Error::Shape(format!(
            "{} class maps but posterior has {} classes",
            cams.classes(),
            p_hat.classes()
        )));
    }
    let per_class = cams.class_maps();
    let (h, w) = (cams.height(), cams.width());
    let mut raw = vec![0.0; h * w];
    for (plane, &p) in per_class.data().chunks(h * w).zip(p_hat.probs()) {
        for (r, v) in raw.iter_mut().zip(plane) {
            *r += p * v;
        }
    }
    let (lo, hi) = kernels::argmin_argmax(&raw);
    let (min, range) = (raw[lo], raw[hi] - raw[lo]);
    let normalized = if range > 0.0 {
        raw.iter().map(|v| (v - min) / range).collect()
    } else {
        vec![0.5; h * w]
    };
    Tensor::new(vec![h, w], normalized)
}

pub(crate) fn check_binarize_params(omega: f64, sigma: f64) -> Result<()> {
    if !(omega > 0.0) || !omega.is_finite() {
        return Err(Error::Config(format!("omega must be > 0, got {omega}")));
    }
    if !(sigma > 0.0 && sigma < 1.0) {
        return Err(Error::Config(format!("sigma must lie in (0, 1), got {sigma}")));
    }
    Ok(())
}

/// Scaled sigmoid `1 / (1 + exp(−ω (raw − σ)))`, elementwise.
pub fn pseudo_binarize(raw: &Tensor, omega: f64, sigma: f64) -> Result<SoftMask> {
    check_binarize_params(omega, sigma)?;
    SoftMask::new(raw.map(|v| 1.0 / (1.0 + (-omega * (v - sigma)).exp())))
}

/// Pixelwise `1 − m`.
pub fn complement(m: &SoftMask) -> SoftMask {
    SoftMask {
        values: m.values.map(|v| 1.0 - v),
    }
}

/// `x ⊙ m` with the mask broadcast over channels.
pub fn apply_mask(x: &Tensor, m: &SoftMask) -> Result<MaskedImage> {
    if x.rank() != 3 || x.shape()[1..] != *m.values.shape() {
        return Err(Error::Shape(format!(
            "image {:?} does not match mask {:?}",
            x.shape(),
            m.values.shape()
        )));
    }
    let hw = m.height() * m.width();
    let mut pixels = x.clone();
    for plane in pixels.data_mut().chunks_mut(hw) {
        for (p, mv) in plane.iter_mut().zip(m.values.data()) {
            *p *= mv;
        }
    }
    Ok(MaskedImage { pixels })
}

/// Region size `Σ_z m(z)` in pixels.
pub fn mask_size(m: &SoftMask) -> f64 {
    m.values.sum()
}

/// Corner-aligned bilinear upsampling of an `h×w` map to `height×width`.
pub fn upsample_bilinear(map: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    if map.rank() != 2 {
        return Err(Error::Shape(format!("expected h×w map, got {:?}", map.shape())));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    if height < h || width < w {
        return Err(Error::InvalidInput(format!(
            "target {height}×{width} smaller than source {h}×{w}"
        )));
    }
    Tensor::new(
        vec![height, width],
        kernels::bilinear(map.data(), h, w, height, width),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::finite_diff_check;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn grid(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        Tensor::new(
            vec![h, w],
            (0..h * w).map(|i| f(i / w, i % w)).collect(),
        )
        .unwrap()
    }

    fn stack(maps: Vec<Tensor>) -> CamStack {
        let (h, w) = (maps[0].shape()[0], maps[0].shape()[1]);
        let c = maps.len();
        let data = maps.into_iter().flat_map(Tensor::into_data).collect();
        CamStack::new(Tensor::new(vec![c, h, w], data).unwrap(), c, 1, 1).unwrap()
    }

    fn min_max(t: &Tensor) -> Vec<f64> {
        let lo = t.data().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        t.data().iter().map(|v| (v - lo) / (hi - lo)).collect()
    }

    #[test]
    fn fuse_cams_examples() {
        let cam0 = grid(3, 4, |y, x| (y * 4 + x) as f64 * 0.7 - 2.0);
        let cam1 = grid(3, 4, |y, x| ((y + 2 * x) % 5) as f64);
        let cams = stack(vec![cam0.clone(), cam1]);
        let fused = fuse_cams(&cams, &Posterior::new(vec![1.0, 0.0]).unwrap()).unwrap();
        for (a, b) in fused.data().iter().zip(min_max(&cam0)) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }

        let same = stack(vec![cam0.clone(), cam0.clone()]);
        let fused = fuse_cams(&same, &Posterior::new(vec![0.5, 0.5]).unwrap()).unwrap();
        for (a, b) in fused.data().iter().zip(min_max(&cam0)) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }

        let flat = stack(vec![Tensor::zeros(&[3, 4]), Tensor::full(&[3, 4], 1.0)]);
        let fused = fuse_cams(&flat, &Posterior::new(vec![0.25, 0.75]).unwrap()).unwrap();
        assert_eq!(fused.data(), &[0.5; 12]);
    }

    #[test]
    fn fuse_cams_averages_modalities() {
        // two classes, two modalities each
        let data: Vec<f64> = [0.0, 2.0, 4.0, 6.0]
            .iter()
            .flat_map(|&base| (0..4).map(move |i| base + i as f64 * (1.0 + base)))
            .collect();
        let cams = CamStack::new(Tensor::new(vec![4, 2, 2], data.clone()).unwrap(), 2, 2, 1).unwrap();
        let fused = fuse_cams(&cams, &Posterior::new(vec![1.0, 0.0]).unwrap()).unwrap();
        let avg: Vec<f64> = (0..4).map(|i| 0.5 * (data[i] + data[4 + i])).collect();
        let want = min_max(&Tensor::new(vec![2, 2], avg).unwrap());
        for (a, b) in fused.data().iter().zip(want) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn fuse_cams_rejects_mismatch() {
        let cams = stack(vec![Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 2])]);
        assert!(fuse_cams(&cams, &Posterior::uniform(3).unwrap()).is_err());
    }

    #[test]
    fn pseudo_binarize_examples() {
        let raw = Tensor::from_vec(vec![0.15, 1.0, 0.0]).reshape(vec![1, 3]).unwrap();
        let m = pseudo_binarize(&raw, 5.0, 0.15).unwrap();
        let v = m.values().data();
        assert_abs_diff_eq!(v[0], 0.5, epsilon = 1e-15);
        // 1 / (1 + e^{-4.25})
        assert_abs_diff_eq!(v[1], 0.985936, epsilon = 1e-6);
        assert_abs_diff_eq!(v[2], 0.320821, epsilon = 1e-6);
        assert!(pseudo_binarize(&raw, 0.0, 0.15).is_err());
        assert!(pseudo_binarize(&raw, 5.0, 1.0).is_err());
        assert!(pseudo_binarize(&raw, 5.0, 0.0).is_err());
    }

    #[test]
    fn pseudo_binarize_slope_at_midpoint() {
        let r = finite_diff_check(
            |g, x| {
                let m = g.scaled_sigmoid(x, 5.0, 0.15);
                Ok(g.sum(m))
            },
            &Tensor::scalar(0.15),
            1e-5,
        )
        .unwrap();
        assert_abs_diff_eq!(r.analytic, 1.25, epsilon = 1e-12);
        assert!(r.max_rel_error <= 1e-6);
    }

    #[test]
    fn complement_examples() {
        let m = SoftMask::full(2, 2, 0.3).unwrap();
        assert_abs_diff_eq!(complement(&m).values().data()[0], 0.7, epsilon = 1e-15);
        let ones = SoftMask::full(2, 3, 1.0).unwrap();
        assert_eq!(complement(&ones).values().data(), &[0.0; 6]);
        let m = SoftMask::new(grid(3, 3, |y, x| (y * 3 + x) as f64 / 9.0)).unwrap();
        assert!(complement(&complement(&m)).values().max_abs_diff(m.values()) <= 1e-15);
    }

    #[test]
    fn apply_mask_examples() {
        let x = Tensor::new(vec![2, 2, 2], (0..8).map(|i| i as f64 / 8.0).collect()).unwrap();
        let ones = SoftMask::full(2, 2, 1.0).unwrap();
        assert_eq!(apply_mask(&x, &ones).unwrap().pixels, x);
        let zeros = SoftMask::full(2, 2, 0.0).unwrap();
        assert_eq!(apply_mask(&x, &zeros).unwrap().pixels.data(), &[0.0; 8]);
        let x = Tensor::full(&[1, 1, 1], 0.8);
        let half = SoftMask::full(1, 1, 0.5).unwrap();
        assert_abs_diff_eq!(apply_mask(&x, &half).unwrap().pixels.data()[0], 0.4);
        let wrong = SoftMask::full(3, 1, 0.5).unwrap();
        assert!(apply_mask(&x, &wrong).is_err());
    }

    #[test]
    fn mask_size_examples() {
        assert_eq!(mask_size(&SoftMask::full(4, 4, 1.0).unwrap()), 16.0);
        assert_eq!(mask_size(&SoftMask::full(4, 4, 0.5).unwrap()), 8.0);
        let m = SoftMask::new(grid(10, 10, |y, x| ((y * 7 + x * 3) % 10) as f64 / 9.0)).unwrap();
        assert_abs_diff_eq!(mask_size(&m) + mask_size(&complement(&m)), 100.0, epsilon = 1e-12);
    }

    #[test]
    fn upsample_examples() {
        let c = Tensor::full(&[3, 2], 0.7);
        let up = upsample_bilinear(&c, 7, 5).unwrap();
        assert!(up.data().iter().all(|v| (v - 0.7).abs() < 1e-15));

        let line = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(upsample_bilinear(&line, 1, 3).unwrap().data(), &[0.0, 0.5, 1.0]);

        let corners = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let up = upsample_bilinear(&corners, 5, 5).unwrap();
        let d = up.data();
        assert_eq!([d[0], d[4], d[20], d[24]], [1.0, 0.0, 0.0, 1.0]);

        assert!(upsample_bilinear(&corners, 1, 4).is_err());
    }

    #[test]
    fn pgm_export_is_round_half_up() {
        let m = SoftMask::new(Tensor::new(vec![1, 3], vec![0.5, 0.3, 1.0]).unwrap()).unwrap();
        assert_eq!(m.to_raster().samples, vec![128, 77, 255]);
    }

    proptest! {
        #[test]
        fn complementary_sizes_cover_domain(vals in prop::collection::vec(0.0f64..=1.0, 1..64)) {
            let n = vals.len();
            let m = SoftMask::new(Tensor::new(vec![1, n], vals).unwrap()).unwrap();
            let total = mask_size(&m) + mask_size(&complement(&m));
            prop_assert!((total - n as f64).abs() <= 1e-9 * n as f64);
        }

        #[test]
        fn pseudo_binarize_is_monotone(a in prop::collection::vec(0.0f64..=1.0, 1..32), bumps in prop::collection::vec(0.0f64..0.5, 32)) {
            let n = a.len();
            let b: Vec<f64> = a.iter().zip(&bumps).map(|(x, d)| (x + d).min(1.0)).collect();
            let ma = pseudo_binarize(&Tensor::new(vec![1, n], a).unwrap(), 5.0, 0.15).unwrap();
            let mb = pseudo_binarize(&Tensor::new(vec![1, n], b).unwrap(), 5.0, 0.15).unwrap();
            for (x, y) in ma.values().data().iter().zip(mb.values().data()) {
                prop_assert!(x <= y);
            }
        }

        #[test]
        fn fusion_ignores_common_offset(offset in -50.0f64..50.0, p0 in 0.0f64..=1.0) {
            let cam0 = grid(3, 3, |y, x| (y as f64 - 1.0) * (x as f64 + 0.5));
            let cam1 = grid(3, 3, |y, x| ((y * 5 + x * 2) % 7) as f64 * 0.3);
            let p = Posterior::new(vec![p0, 1.0 - p0]).unwrap();
            let base = fuse_cams(&stack(vec![cam0.clone(), cam1.clone()]), &p).unwrap();
            let shifted = fuse_cams(
                &stack(vec![cam0.map(|v| v + offset), cam1.map(|v| v + offset)]),
                &p,
            ).unwrap();
            prop_assert!(base.max_abs_diff(&shifted) <= 1e-9);
        }
    }
}
