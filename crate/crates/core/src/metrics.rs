//! Image and geometry metrics plus the weighted composite loss.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Vec3;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Value written to CSV in place of an infinite PSNR.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const L1_MIX: f64 = 0.8;
pub const DSSIM_MIX: f64 = 0.2;
pub const METRICS_CSV_HEADER: &str = "# hoikit metrics v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("image shapes differ: {a:?} vs {b:?}")]
    ShapeMismatch { a: [usize; 3], b: [usize; 3] },
    #[error("image {width}x{height} smaller than the {window}px SSIM window")]
    ImageTooSmall { width: usize, height: usize, window: usize },
    #[error("empty point set")]
    EmptyPointSet,
    #[error("non-finite value in {0}")]
    NonFiniteValue(&'static str),
    #[error("image data length {found} does not match {expected}")]
    BadLength { expected: usize, found: usize },
}

/// Row-major image, channels interleaved, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self, MetricsError> {
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(MetricsError::BadLength {
                expected,
                found: data.len(),
            });
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.width, self.height, self.channels]
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }
}

/// Binary pixel mask, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn full(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }
}

fn same_shape(a: &Image, b: &Image) -> Result<(), MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::ShapeMismatch {
            a: a.shape(),
            b: b.shape(),
        });
    }
    Ok(())
}

fn check_mask(a: &Image, mask: &Mask) -> Result<(), MetricsError> {
    if mask.width != a.width || mask.height != a.height {
        return Err(MetricsError::ShapeMismatch {
            a: a.shape(),
            b: [mask.width, mask.height, 1],
        });
    }
    Ok(())
}

pub fn l1_image(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    same_shape(a, b)?;
    if a.data.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum();
    Ok(s / a.data.len() as f64)
}

/// Mean absolute difference over masked pixels only; 0 for an empty mask.
pub fn l1_masked(a: &Image, b: &Image, mask: &Mask) -> Result<f64, MetricsError> {
    same_shape(a, b)?;
    check_mask(a, mask)?;
    let mut s = 0.0;
    let mut n = 0usize;
    for y in 0..a.height {
        for x in 0..a.width {
            if mask.get(x, y) {
                for c in 0..a.channels {
                    s += (a.get(x, y, c) - b.get(x, y, c)).abs();
                }
                n += a.channels;
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { s / n as f64 })
}

pub fn mse(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    same_shape(a, b)?;
    if a.data.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.data.len() as f64)
}

/// `10·log10(1/MSE)`; `+∞` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / m).log10())
}

/// PSNR with infinity replaced by [`PSNR_CAP_DB`].
pub fn psnr_capped(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    Ok(psnr(a, b)?.min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Per-position SSIM over valid window placements, averaged over channels.
/// Entry `(x, y)` is the window whose top-left corner is `(x, y)`.
fn ssim_map(a: &Image, b: &Image) -> Result<(usize, usize, Vec<f64>), MetricsError> {
    same_shape(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(MetricsError::ImageTooSmall {
            width: a.width,
            height: a.height,
            window: SSIM_WINDOW,
        });
    }
    let g = gaussian_window();
    let ow = a.width - SSIM_WINDOW + 1;
    let oh = a.height - SSIM_WINDOW + 1;
    let mut out = vec![0.0; ow * oh];
    for c in 0..a.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (wy, gy) in g.iter().enumerate() {
                    for (wx, gx) in g.iter().enumerate() {
                        let w = gy * gx;
                        let va = a.get(ox + wx, oy + wy, c);
                        let vb = b.get(ox + wx, oy + wy, c);
                        ma += w * va;
                        mb += w * vb;
                        saa += w * va * va;
                        sbb += w * vb * vb;
                        sab += w * va * vb;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                let s = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                out[oy * ow + ox] += s / a.channels as f64;
            }
        }
    }
    Ok((ow, oh, out))
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    let (_, _, m) = ssim_map(a, b)?;
    Ok(m.iter().sum::<f64>() / m.len() as f64)
}

/// `(1 − SSIM)/2`, clamped to `[0, 1]`.
pub fn dssim(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    Ok(((1.0 - ssim(a, b)?) / 2.0).clamp(0.0, 1.0))
}

/// D-SSIM averaged over windows whose centre pixel lies in the mask.
pub fn dssim_masked(a: &Image, b: &Image, mask: &Mask) -> Result<f64, MetricsError> {
    check_mask(a, mask)?;
    let (ow, oh, m) = ssim_map(a, b)?;
    let r = SSIM_WINDOW / 2;
    let mut s = 0.0;
    let mut n = 0usize;
    for oy in 0..oh {
        for ox in 0..ow {
            if mask.get(ox + r, oy + r) {
                s += m[oy * ow + ox];
                n += 1;
            }
        }
    }
    if n == 0 {
        return Ok(0.0);
    }
    Ok(((1.0 - s / n as f64) / 2.0).clamp(0.0, 1.0))
}

pub fn photometric_mix(l1: f64, dssim: f64) -> f64 {
    L1_MIX * l1 + DSSIM_MIX * dssim
}

/// `0.8·L1 + 0.2·DSSIM` over the whole image or a masked region.
pub fn photometric_loss(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<f64, MetricsError> {
    match mask {
        Some(m) => Ok(photometric_mix(l1_masked(a, b, m)?, dssim_masked(a, b, m)?)),
        None => Ok(photometric_mix(l1_image(a, b)?, dssim(a, b)?)),
    }
}

/// Mean absolute depth error over pixels valid (≥ 0) in both images.
pub fn depth_l1(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    same_shape(a, b)?;
    let mut s = 0.0;
    let mut n = 0usize;
    for (x, y) in a.data.iter().zip(&b.data) {
        if *x >= 0.0 && *y >= 0.0 {
            s += (x - y).abs();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { s / n as f64 })
}

fn directed_mean_min(a: &[Vec3], b: &[Vec3]) -> f64 {
    let mut s = 0.0;
    for p in a {
        let mut best = f64::INFINITY;
        for q in b {
            let d = (p - q).norm_squared();
            if d < best {
                best = d;
            }
        }
        s += best;
    }
    s / a.len() as f64
}

/// `½(mean_o min_h ‖o−h‖² + mean_h min_o ‖h−o‖²)`.
pub fn chamfer(o: &[Vec3], h: &[Vec3]) -> Result<f64, MetricsError> {
    if o.is_empty() || h.is_empty() {
        return Err(MetricsError::EmptyPointSet);
    }
    Ok(0.5 * (directed_mean_min(o, h) + directed_mean_min(h, o)))
}

/// Chamfer to the better-matching hand.
pub fn cd_best(o: &[Vec3], left: &[Vec3], right: &[Vec3]) -> Result<f64, MetricsError> {
    Ok(chamfer(o, left)?.min(chamfer(o, right)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub human: f64,
    pub object: f64,
    pub scene: f64,
    pub depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            human: 0.5,
            object: 1.0,
            scene: 0.25,
            depth: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), MetricsError> {
        for v in [self.human, self.object, self.scene, self.depth] {
            if !v.is_finite() || v < 0.0 {
                return Err(MetricsError::NonFiniteValue("loss weights"));
            }
        }
        Ok(())
    }
}

/// Per-term scalar losses, already reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub human: f64,
    pub object: f64,
    pub scene: f64,
    pub depth: f64,
}

pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64, MetricsError> {
    w.validate()?;
    for v in [parts.human, parts.object, parts.scene, parts.depth] {
        if !v.is_finite() {
            return Err(MetricsError::NonFiniteValue("loss parts"));
        }
    }
    Ok(w.human * parts.human + w.object * parts.object + w.scene * parts.scene + w.depth * parts.depth)
}

/// One evaluation row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scene_id: String,
    pub frame: usize,
    pub phase: String,
    pub psnr: f64,
    pub dssim: f64,
    pub l1: f64,
    pub chamfer: f64,
    pub cd_best: f64,
}

/// Writes the versioned header comment followed by a CSV table.
/// Infinite PSNR values are written as [`PSNR_CAP_DB`].
pub fn write_metrics_csv<W: Write>(mut out: W, rows: &[MetricsRow]) -> Result<(), csv::Error> {
    writeln!(out, "{METRICS_CSV_HEADER}")?;
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        let mut r = r.clone();
        r.psnr = r.psnr.min(PSNR_CAP_DB);
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize, c: usize, k: f64) -> Image {
        let mut im = Image::filled(w, h, c, 0.0);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    im.set(x, y, ch, ((x * 7 + y * 3 + ch) as f64 * k).sin() * 0.5 + 0.5);
                }
            }
        }
        im
    }

    #[test]
    fn l1_examples() {
        let a = Image::filled(4, 4, 3, 0.0);
        let b = Image::filled(4, 4, 3, 1.0);
        assert_eq!(l1_image(&a, &a).unwrap(), 0.0);
        assert_eq!(l1_image(&a, &b).unwrap(), 1.0);
        let mut c = a.clone();
        for v in c.data.iter_mut().step_by(2) {
            *v = 0.5;
        }
        assert_eq!(l1_image(&a, &c).unwrap(), 0.25);
        let d = Image::filled(3, 4, 3, 0.0);
        assert!(matches!(l1_image(&a, &d), Err(MetricsError::ShapeMismatch { .. })));
    }

    #[test]
    fn psnr_examples() {
        let a = Image::filled(8, 8, 1, 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(psnr_capped(&a, &a).unwrap(), PSNR_CAP_DB);
        let b = Image::filled(8, 8, 1, 0.4);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn dssim_identity_symmetry_and_range() {
        let a = ramp(16, 14, 3, 0.1);
        let b = ramp(16, 14, 3, 0.23);
        assert_eq!(dssim(&a, &a).unwrap(), 0.0);
        let d1 = dssim(&a, &b).unwrap();
        let d2 = dssim(&b, &a).unwrap();
        assert!((d1 - d2).abs() < 1e-15);
        assert!((0.0..=1.0).contains(&d1) && d1 > 0.0);
        let small = Image::filled(10, 20, 1, 0.0);
        assert!(matches!(dssim(&small, &small), Err(MetricsError::ImageTooSmall { .. })));
    }

    #[test]
    fn dssim_constant_offset_matches_closed_form() {
        // Constant images: variances and covariance vanish, so SSIM reduces
        // to the luminance term.
        let a = Image::filled(12, 12, 1, 0.2);
        let b = Image::filled(12, 12, 1, 0.7);
        let (ma, mb) = (0.2f64, 0.7f64);
        let s = (2.0 * ma * mb + 1e-4) / (ma * ma + mb * mb + 1e-4);
        assert!((dssim(&a, &b).unwrap() - (1.0 - s) / 2.0).abs() < 1e-6);
    }

    #[test]
    fn masked_losses_ignore_outside_pixels() {
        let a = ramp(12, 12, 1, 0.3);
        let mut b = a.clone();
        let mut mask = Mask::full(12, 12);
        for y in 0..12 {
            for x in 6..12 {
                b.set(x, y, 0, 0.0);
                mask.data[y * 12 + x] = false;
            }
        }
        assert_eq!(l1_masked(&a, &b, &mask).unwrap(), 0.0);
        assert!(dssim_masked(&a, &b, &mask).unwrap() < dssim(&a, &b).unwrap());
        assert!(photometric_loss(&a, &b, Some(&mask)).unwrap() < photometric_loss(&a, &b, None).unwrap());
    }

    #[test]
    fn depth_l1_skips_sentinel() {
        let a = Image::from_data(2, 1, 1, vec![1.0, -1.0]).unwrap();
        let b = Image::from_data(2, 1, 1, vec![1.5, 3.0]).unwrap();
        assert_eq!(depth_l1(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn chamfer_examples() {
        let a = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 2.0, 0.0)];
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        let p = [Vec3::zeros()];
        let q = [Vec3::new(0.0, 3.0, 0.0)];
        assert_eq!(chamfer(&p, &q).unwrap(), 9.0);
        assert_eq!(chamfer(&[], &q), Err(MetricsError::EmptyPointSet));
    }

    #[test]
    fn cd_best_takes_min() {
        let o = [Vec3::zeros()];
        let l = [Vec3::new(1.0, 0.0, 0.0)];
        let r = [Vec3::new(2.0, 0.0, 0.0)];
        assert_eq!(cd_best(&o, &l, &r).unwrap(), 1.0);
        assert_eq!(cd_best(&o, &r, &l).unwrap(), 1.0);
        assert_eq!(cd_best(&o, &o, &r).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossParts::default(), &w).unwrap(), 0.0);
        let ones = LossParts {
            human: 1.0,
            object: 1.0,
            scene: 1.0,
            depth: 1.0,
        };
        assert_eq!(total_loss(&ones, &w).unwrap(), 2.75);
        let obj = LossParts {
            object: photometric_mix(1.0, 0.0),
            ..Default::default()
        };
        assert_eq!(total_loss(&obj, &w).unwrap(), 0.8);
        let bad = LossParts {
            depth: f64::NAN,
            ..Default::default()
        };
        assert!(matches!(total_loss(&bad, &w), Err(MetricsError::NonFiniteValue(_))));
    }

    #[test]
    fn csv_has_header_and_caps_psnr() {
        let rows = vec![MetricsRow {
            scene_id: "s".into(),
            frame: 3,
            phase: "baseline".into(),
            psnr: f64::INFINITY,
            dssim: 0.0,
            l1: 0.0,
            chamfer: 0.5,
            cd_best: 0.25,
        }];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], METRICS_CSV_HEADER);
        assert_eq!(lines[1], "scene_id,frame,phase,psnr,dssim,l1,chamfer,cd_best");
        assert_eq!(lines[2], "s,3,baseline,100.0,0.0,0.0,0.5,0.25");
    }
}
