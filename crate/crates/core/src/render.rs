//! Forward-only isotropic splat renderer and PPM/PGM writers.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geom::{CameraPose, UnitRotation, Vec3};
use crate::metrics::Image;

pub const DEPTH_SENTINEL: f64 = -1.0;
/// Footprints are truncated at this many standard deviations.
const CUTOFF_SIGMAS: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splat {
    pub id: u64,
    pub position: Vec3,
    pub rotation: UnitRotation,
    pub scale: Vec3,
    pub opacity: f64,
    pub color: [f64; 3],
}

impl Splat {
    pub fn isotropic(id: u64, position: Vec3, radius: f64, opacity: f64, color: [f64; 3]) -> Self {
        Splat {
            id,
            position,
            rotation: UnitRotation::IDENTITY,
            scale: Vec3::repeat(radius),
            opacity,
            color,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub background: [f64; 3],
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions { background: [0.0; 3] }
    }
}

struct Projected {
    u: f64,
    v: f64,
    depth: f64,
    sigma: f64,
    opacity: f64,
    color: [f64; 3],
}

pub fn render_splats(splats: &[Splat], cam: &CameraPose, w: usize, h: usize) -> (Image, Image) {
    render_splats_with(splats, cam, w, h, &RenderOptions::default())
}

/// Projects, sorts back to front by `(depth, id)` and alpha-composites.
/// Pixel `(x, y)` samples the image plane at `(x, y)`. The depth image
/// holds the alpha-weighted mean depth, or [`DEPTH_SENTINEL`] where
/// nothing was drawn.
pub fn render_splats_with(splats: &[Splat], cam: &CameraPose, w: usize, h: usize, opts: &RenderOptions) -> (Image, Image) {
    let focal = 0.5 * (cam.intrinsics.fx + cam.intrinsics.fy);
    let mut order: Vec<(f64, u64, Projected)> = splats
        .iter()
        .filter_map(|s| {
            let (u, v, depth) = cam.project(&s.position)?;
            let sigma = s.scale.mean() * focal / depth;
            if !(sigma > 0.0 && sigma.is_finite()) {
                return None;
            }
            Some((
                depth,
                s.id,
                Projected {
                    u,
                    v,
                    depth,
                    sigma,
                    opacity: s.opacity.clamp(0.0, 1.0),
                    color: s.color,
                },
            ))
        })
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let proj: Vec<Projected> = order.into_iter().map(|(_, _, p)| p).collect();

    let mut rgb = vec![0.0; w * h * 3];
    let mut depth = vec![0.0; w * h];
    rgb.par_chunks_mut(w * 3)
        .zip(depth.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (row, drow))| {
            let py = y as f64;
            for x in 0..w {
                let px = x as f64;
                let mut c = opts.background;
                let mut acc_alpha = 0.0;
                let mut acc_depth = 0.0;
                for p in &proj {
                    let dx = px - p.u;
                    let dy = py - p.v;
                    let r2 = (dx * dx + dy * dy) / (p.sigma * p.sigma);
                    if r2 > CUTOFF_SIGMAS * CUTOFF_SIGMAS {
                        continue;
                    }
                    let a = p.opacity * (-0.5 * r2).exp();
                    for k in 0..3 {
                        c[k] = a * p.color[k] + (1.0 - a) * c[k];
                    }
                    acc_depth = a * p.depth + (1.0 - a) * acc_depth;
                    acc_alpha = a + (1.0 - a) * acc_alpha;
                }
                row[3 * x..3 * x + 3].copy_from_slice(&c);
                drow[x] = if acc_alpha > 0.0 {
                    acc_depth / acc_alpha
                } else {
                    DEPTH_SENTINEL
                };
            }
        });
    (
        Image {
            width: w,
            height: h,
            channels: 3,
            data: rgb,
        },
        Image {
            width: w,
            height: h,
            channels: 1,
            data: depth,
        },
    )
}

/// Binary P6, 8 bits per channel.
pub fn write_ppm<W: Write>(mut out: W, img: &Image) -> io::Result<()> {
    if img.channels != 3 {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "PPM needs 3 channels"));
    }
    write!(out, "P6\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    out.write_all(&bytes)
}

/// Binary P5, 16-bit big-endian. Depths are divided by the image maximum;
/// sentinel pixels become 0.
pub fn write_depth_pgm<W: Write>(mut out: W, depth: &Image) -> io::Result<()> {
    if depth.channels != 1 {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "depth PGM needs 1 channel"));
    }
    let max = depth.data.iter().cloned().fold(0.0, f64::max);
    write!(out, "P5\n{} {}\n65535\n", depth.width, depth.height)?;
    let mut bytes = Vec::with_capacity(depth.data.len() * 2);
    for d in &depth.data {
        let q = if *d < 0.0 || max <= 0.0 {
            0u16
        } else {
            (d / max * 65535.0).round() as u16
        };
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    out.write_all(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Intrinsics;

    fn cam() -> CameraPose {
        let intr = Intrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 16.0,
            cy: 16.0,
        };
        CameraPose::look_at(Vec3::new(0.0, 0.0, -3.0), Vec3::zeros(), Vec3::new(0.0, 1.0, 0.0), intr).unwrap()
    }

    #[test]
    fn empty_scene_is_background() {
        let opts = RenderOptions { background: [0.2, 0.3, 0.4] };
        let (rgb, d) = render_splats_with(&[], &cam(), 8, 6, &opts);
        for y in 0..6 {
            for x in 0..8 {
                assert_eq!(rgb.pixel(x, y), &[0.2, 0.3, 0.4]);
                assert_eq!(d.get(x, y, 0), DEPTH_SENTINEL);
            }
        }
    }

    #[test]
    fn single_splat_peaks_at_projection() {
        let c = cam();
        let s = Splat::isotropic(0, Vec3::zeros(), 0.05, 1.0, [1.0, 0.5, 0.25]);
        let (u, v, z) = c.project(&s.position).unwrap();
        let (rgb, d) = render_splats(&[s], &c, 32, 32);
        let (ux, vy) = (u.round() as usize, v.round() as usize);
        assert_eq!(rgb.pixel(ux, vy), &[1.0, 0.5, 0.25]);
        assert!((d.get(ux, vy, 0) - z).abs() < 1e-12);
        let peak = rgb.get(ux, vy, 0);
        assert!(rgb.data.iter().step_by(3).all(|v| *v <= peak));
    }

    #[test]
    fn opaque_front_hides_back() {
        let c = cam();
        let front = Splat::isotropic(0, Vec3::zeros(), 0.05, 1.0, [1.0, 0.0, 0.0]);
        let back = Splat::isotropic(1, Vec3::new(0.0, 0.0, 1.0), 0.05, 1.0, [0.0, 1.0, 0.0]);
        let (u, v, z) = c.project(&front.position).unwrap();
        let (rgb, d) = render_splats(&[front, back], &c, 32, 32);
        let (ux, vy) = (u.round() as usize, v.round() as usize);
        assert_eq!(rgb.pixel(ux, vy), &[1.0, 0.0, 0.0]);
        assert_eq!(d.get(ux, vy, 0), z);
    }

    #[test]
    fn alpha_and_permutation_invariance() {
        let c = cam();
        let splats: Vec<Splat> = (0..6)
            .map(|i| {
                let x = (i % 3) as f64 * 0.1;
                Splat::isotropic(i, Vec3::new(x, 0.0, 0.0), 0.1, 0.6, [i as f64 / 6.0, 0.5, 1.0])
            })
            .collect();
        let (a, da) = render_splats(&splats, &c, 24, 24);
        let mut rev = splats.clone();
        rev.reverse();
        let (b, db) = render_splats(&rev, &c, 24, 24);
        assert_eq!(a, b);
        assert_eq!(da, db);
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn writers_emit_headers() {
        let img = Image::filled(2, 1, 3, 1.0);
        let mut buf = Vec::new();
        write_ppm(&mut buf, &img).unwrap();
        assert_eq!(&buf[..11], b"P6\n2 1\n255\n");
        assert_eq!(buf.len(), 11 + 6);
        let d = Image::from_data(2, 1, 1, vec![2.0, DEPTH_SENTINEL]).unwrap();
        let mut buf = Vec::new();
        write_depth_pgm(&mut buf, &d).unwrap();
        assert_eq!(&buf[buf.len() - 4..], &[0xff, 0xff, 0, 0]);
    }
}
