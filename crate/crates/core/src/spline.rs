//! Keyframed cubic Hermite trajectories for rigid object Gaussians.
//!
//! Each Gaussian carries keyframe positions `m_k` and free velocity
//! tangents `τ_k`. Frame time `t` is mapped to a segment `k` and a local
//! parameter `t_r ∈ [0, 1]`; the position is the Hermite blend of
//! `(m_k, τ_k, m_{k+1}, τ_{k+1})`. Tangents are expressed per unit of
//! segment-local time, so `τ_k` is the derivative of the curve with
//! respect to `t_r` at keyframe `k`.
//!
//! Rotation follows SLERP between keyframe quaternions, opacity is
//! linearly interpolated and scale is shared by all keyframes.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{slerp, UnitRotation, Vec3};
use crate::nn::Tensor;

/// Default number of frames between keyframes.
pub const DEFAULT_KEY_STRIDE: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("time {t} outside [0, {max}]")]
    OutOfRangeTime { t: f64, max: f64 },
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("track inconsistent with grid: {0}")]
    InconsistentTrack(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct TimeGrid {
    n_frames: usize,
    n_keys: usize,
}

#[derive(Serialize, Deserialize)]
struct GridRepr {
    n_frames: usize,
    n_keys: usize,
    #[serde(default, skip_deserializing)]
    key_stride: Option<usize>,
}

impl TryFrom<GridRepr> for TimeGrid {
    type Error = SplineError;
    fn try_from(r: GridRepr) -> Result<Self, SplineError> {
        TimeGrid::new(r.n_frames, r.n_keys)
    }
}

impl From<TimeGrid> for GridRepr {
    fn from(g: TimeGrid) -> Self {
        GridRepr {
            n_frames: g.n_frames,
            n_keys: g.n_keys,
            key_stride: g.key_stride(),
        }
    }
}

impl TimeGrid {
    pub fn new(n_frames: usize, n_keys: usize) -> Result<Self, SplineError> {
        if n_keys < 2 {
            return Err(SplineError::InvalidGrid(format!("need at least 2 keys, got {n_keys}")));
        }
        if n_frames < n_keys {
            return Err(SplineError::InvalidGrid(format!(
                "{n_frames} frames cannot hold {n_keys} keys"
            )));
        }
        Ok(TimeGrid { n_frames, n_keys })
    }

    /// Keyframes every `stride` frames; `n_frames − 1` must be a multiple.
    pub fn with_stride(n_frames: usize, stride: usize) -> Result<Self, SplineError> {
        if stride == 0 || n_frames < 2 || (n_frames - 1) % stride != 0 {
            return Err(SplineError::InvalidGrid(format!(
                "{n_frames} frames are not spanned by stride {stride}"
            )));
        }
        Self::new(n_frames, (n_frames - 1) / stride + 1)
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_keys(&self) -> usize {
        self.n_keys
    }

    /// Integer frame spacing between keys, if uniform.
    pub fn key_stride(&self) -> Option<usize> {
        let span = self.n_frames - 1;
        let segs = self.n_keys - 1;
        (span % segs == 0).then_some(span / segs)
    }

    pub fn last_frame(&self) -> f64 {
        (self.n_frames - 1) as f64
    }

    /// Frame time of keyframe `k`.
    pub fn key_frame(&self, k: usize) -> f64 {
        (k * (self.n_frames - 1)) as f64 / (self.n_keys - 1) as f64
    }

    /// `t_n = t / (N_f − 1)`.
    pub fn normalized(&self, t: f64) -> f64 {
        t / self.last_frame()
    }

    /// Segment index and local parameter for frame time `t`.
    ///
    /// `t_s = t·(N_key − 1)/(N_f − 1)`, `k = ⌊t_s⌋` clamped to
    /// `N_key − 2`, `t_r = t_s − k`; the last frame maps to `(N_key−2, 1)`.
    pub fn normalize_time(&self, t: f64) -> Result<(usize, f64), SplineError> {
        if !(t >= 0.0 && t <= self.last_frame()) {
            return Err(SplineError::OutOfRangeTime {
                t,
                max: self.last_frame(),
            });
        }
        // numerator first so exact keyframe times give integral t_s
        let ts = t * (self.n_keys - 1) as f64 / self.last_frame();
        let k = (ts.floor() as usize).min(self.n_keys - 2);
        Ok((k, ts - k as f64))
    }

    /// Derivative of `t_r` with respect to frame time.
    pub fn segment_rate(&self) -> f64 {
        (self.n_keys - 1) as f64 / self.last_frame()
    }
}

/// `[h00, h10, h01, h11]` at `t_r`.
pub fn hermite_basis(tr: f64) -> [f64; 4] {
    let t2 = tr * tr;
    let t3 = t2 * tr;
    [
        2.0 * t3 - 3.0 * t2 + 1.0,
        t3 - 2.0 * t2 + tr,
        -2.0 * t3 + 3.0 * t2,
        t3 - t2,
    ]
}

/// Derivatives of [`hermite_basis`] with respect to `t_r`.
pub fn hermite_basis_derivative(tr: f64) -> [f64; 4] {
    let t2 = tr * tr;
    [
        6.0 * t2 - 6.0 * tr,
        3.0 * t2 - 4.0 * tr + 1.0,
        -6.0 * t2 + 6.0 * tr,
        3.0 * t2 - 2.0 * tr,
    ]
}

/// Keyframe state of one object Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChsTrack {
    #[serde(rename = "m")]
    pub positions: Vec<Vec3>,
    #[serde(rename = "tau")]
    pub velocities: Vec<Vec3>,
    /// Keyframe quaternions, serialised as `[w, x, y, z]`.
    pub rotations: Vec<UnitRotation>,
    pub opacities: Vec<f64>,
    pub scale: Vec3,
    pub color: Vec3,
}

/// Interpolated Gaussian state at one time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianSnapshot {
    pub position: Vec3,
    pub rotation: UnitRotation,
    pub opacity: f64,
    pub scale: Vec3,
    pub color: Vec3,
}

impl ChsTrack {
    /// Static track: every key at `position`, zero velocity, identity
    /// rotation, full opacity.
    pub fn stationary(n_keys: usize, position: Vec3) -> Self {
        ChsTrack {
            positions: vec![position; n_keys],
            velocities: vec![Vec3::zeros(); n_keys],
            rotations: vec![UnitRotation::IDENTITY; n_keys],
            opacities: vec![1.0; n_keys],
            scale: Vec3::repeat(0.02),
            color: Vec3::repeat(0.5),
        }
    }

    pub fn n_keys(&self) -> usize {
        self.positions.len()
    }

    pub fn validate(&self, grid: &TimeGrid) -> Result<(), SplineError> {
        let n = grid.n_keys();
        for (what, len) in [
            ("m", self.positions.len()),
            ("tau", self.velocities.len()),
            ("rotations", self.rotations.len()),
            ("opacities", self.opacities.len()),
        ] {
            if len != n {
                return Err(SplineError::InconsistentTrack(format!(
                    "{what} has {len} keys, grid has {n}"
                )));
            }
        }
        if self.opacities.iter().any(|o| !(0.0..=1.0).contains(o)) {
            return Err(SplineError::InconsistentTrack("opacity outside [0, 1]".into()));
        }
        if self.scale.iter().any(|s| !(*s > 0.0)) {
            return Err(SplineError::InconsistentTrack("scale must be positive".into()));
        }
        Ok(())
    }

    fn segment(&self, t: f64, grid: &TimeGrid) -> Result<(usize, f64), SplineError> {
        if self.positions.len() != grid.n_keys() || self.velocities.len() != grid.n_keys() {
            return Err(SplineError::InconsistentTrack(format!(
                "track has {} keys, grid has {}",
                self.positions.len(),
                grid.n_keys()
            )));
        }
        grid.normalize_time(t)
    }

    fn blend(&self, k: usize, b: [f64; 4]) -> Vec3 {
        b[0] * self.positions[k]
            + b[1] * self.velocities[k]
            + b[2] * self.positions[k + 1]
            + b[3] * self.velocities[k + 1]
    }
}

/// Position at frame time `t`.
pub fn chs_eval(track: &ChsTrack, t: f64, grid: &TimeGrid) -> Result<Vec3, SplineError> {
    let (k, tr) = track.segment(t, grid)?;
    Ok(track.blend(k, hermite_basis(tr)))
}

/// `d/dt_r` of the position at frame time `t`.
pub fn chs_derivative(track: &ChsTrack, t: f64, grid: &TimeGrid) -> Result<Vec3, SplineError> {
    let (k, tr) = track.segment(t, grid)?;
    Ok(track.blend(k, hermite_basis_derivative(tr)))
}

/// Full Gaussian state at frame time `t`.
pub fn track_state(track: &ChsTrack, t: f64, grid: &TimeGrid) -> Result<GaussianSnapshot, SplineError> {
    let (k, tr) = track.segment(t, grid)?;
    if track.rotations.len() != grid.n_keys() || track.opacities.len() != grid.n_keys() {
        return Err(SplineError::InconsistentTrack("rotation/opacity key count".into()));
    }
    let (o0, o1) = (track.opacities[k], track.opacities[k + 1]);
    Ok(GaussianSnapshot {
        position: track.blend(k, hermite_basis(tr)),
        rotation: slerp(&track.rotations[k], &track.rotations[k + 1], tr),
        opacity: (o0 + (o1 - o0) * tr).clamp(0.0, 1.0),
        scale: track.scale,
        color: track.color,
    })
}

/// Positions of many tracks at one time; partition-independent.
pub fn eval_many(tracks: &[ChsTrack], t: f64, grid: &TimeGrid) -> Result<Vec<Vec3>, SplineError> {
    tracks.par_iter().map(|tr| chs_eval(tr, t, grid)).collect()
}

/// Per-frame basis rows so that positions at `frames` equal
/// `H_m · M + H_τ · T` for stacked keyframe matrices `M`, `T`
/// (`N_key × cols`). Row `i` of `H_m` holds `h00, h01` at keys `k, k+1`.
pub fn basis_matrices(grid: &TimeGrid, frames: &[f64]) -> Result<(Tensor, Tensor), SplineError> {
    basis_rows(grid, frames, hermite_basis)
}

/// As [`basis_matrices`] for the `t_r` derivative.
pub fn derivative_basis_matrices(grid: &TimeGrid, frames: &[f64]) -> Result<(Tensor, Tensor), SplineError> {
    basis_rows(grid, frames, hermite_basis_derivative)
}

fn basis_rows(
    grid: &TimeGrid,
    frames: &[f64],
    basis: fn(f64) -> [f64; 4],
) -> Result<(Tensor, Tensor), SplineError> {
    let n = grid.n_keys();
    let mut hm = Tensor::zeros(frames.len(), n);
    let mut ht = Tensor::zeros(frames.len(), n);
    for (i, &t) in frames.iter().enumerate() {
        let (k, tr) = grid.normalize_time(t)?;
        let b = basis(tr);
        hm.set(i, k, b[0]);
        hm.set(i, k + 1, b[2]);
        ht.set(i, k, b[1]);
        ht.set(i, k + 1, b[3]);
    }
    Ok((hm, ht))
}

/// JSON container for a set of object tracks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackFile {
    pub grid: TimeGrid,
    pub tracks: Vec<ChsTrack>,
}

pub const TRAJECTORY_CSV_HEADER: &str = "# hoikit trajectory csv v1";

/// One row per `(gaussian_id, frame, x, y, z)` for every integer frame.
pub fn write_trajectory_csv<W: Write>(out: W, tracks: &[ChsTrack], grid: &TimeGrid) -> std::io::Result<()> {
    let mut out = out;
    writeln!(out, "{TRAJECTORY_CSV_HEADER}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["gaussian_id", "frame", "x", "y", "z"])?;
    for (g, tr) in tracks.iter().enumerate() {
        for f in 0..grid.n_frames() {
            let p = chs_eval(tr, f as f64, grid).map_err(std::io::Error::other)?;
            w.write_record(&[
                g.to_string(),
                f.to_string(),
                p.x.to_string(),
                p.y.to_string(),
                p.z.to_string(),
            ])?;
        }
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn grid() -> TimeGrid {
        TimeGrid::with_stride(9, 4).unwrap()
    }

    fn two_key_track() -> ChsTrack {
        let mut t = ChsTrack::stationary(3, Vec3::zeros());
        t.positions = vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(1.0, 2.0, 0.0)];
        t
    }

    #[test]
    fn normalize_time_examples() {
        let g = grid();
        assert_eq!(g.n_keys(), 3);
        assert_eq!(g.normalize_time(0.0).unwrap(), (0, 0.0));
        assert_eq!(g.normalized(4.0), 0.5);
        assert_eq!(g.normalize_time(4.0).unwrap(), (1, 0.0));
        assert_eq!(g.normalize_time(8.0).unwrap(), (1, 1.0));
        assert!(matches!(g.normalize_time(8.5), Err(SplineError::OutOfRangeTime { .. })));
        assert!(g.normalize_time(-0.1).is_err());
        assert!(g.normalize_time(f64::NAN).is_err());
    }

    #[test]
    fn keyframe_times_are_exact_for_default_grid() {
        let g = TimeGrid::with_stride(33, DEFAULT_KEY_STRIDE).unwrap();
        assert_eq!(g.n_keys(), 9);
        for k in 0..9 {
            let (seg, tr) = g.normalize_time((4 * k) as f64).unwrap();
            if k < 8 {
                assert_eq!((seg, tr), (k, 0.0));
            } else {
                assert_eq!((seg, tr), (7, 1.0));
            }
        }
    }

    #[test]
    fn eval_hits_keys_and_midpoint() {
        let g = grid();
        let t = two_key_track();
        assert_eq!(chs_eval(&t, 0.0, &g).unwrap(), t.positions[0]);
        assert_eq!(chs_eval(&t, 4.0, &g).unwrap(), t.positions[1]);
        assert_eq!(chs_eval(&t, 8.0, &g).unwrap(), t.positions[2]);
        assert_eq!(chs_eval(&t, 2.0, &g).unwrap(), Vec3::new(0.5, 0.0, 0.0));
    }

    #[test]
    fn derivative_end_conditions() {
        let g = grid();
        let mut t = two_key_track();
        t.velocities = vec![Vec3::new(0.1, 0.2, 0.3), Vec3::new(-1.0, 0.5, 2.0), Vec3::new(3.0, 0.0, -1.0)];
        assert_eq!(chs_derivative(&t, 0.0, &g).unwrap(), t.velocities[0]);
        assert_eq!(chs_derivative(&t, 8.0, &g).unwrap(), t.velocities[2]);
        assert_eq!(chs_derivative(&t, 4.0, &g).unwrap(), t.velocities[1]);
    }

    #[test]
    fn state_interpolates_rotation_and_opacity() {
        let g = grid();
        let mut t = two_key_track();
        t.rotations[1] = UnitRotation::rot_z(FRAC_PI_2);
        t.opacities = vec![0.0, 1.0, 1.0];
        let s = track_state(&t, 2.0, &g).unwrap();
        assert_eq!(s.opacity, 0.5);
        let e = UnitRotation::rot_z(FRAC_PI_4);
        for (a, b) in s.rotation.wxyz().iter().zip(e.wxyz()) {
            assert!((a - b).abs() < 1e-9);
        }
        let k = track_state(&t, 4.0, &g).unwrap();
        assert_eq!(k.position, t.positions[1]);
        assert_eq!(k.rotation, t.rotations[1]);
        assert_eq!(k.opacity, 1.0);
        assert_eq!(k.scale, t.scale);
        assert_eq!(k.color, t.color);
    }

    #[test]
    fn inconsistent_track_rejected() {
        let g = grid();
        let t = ChsTrack::stationary(4, Vec3::zeros());
        assert!(matches!(chs_eval(&t, 0.0, &g), Err(SplineError::InconsistentTrack(_))));
        assert!(t.validate(&g).is_err());
    }

    #[test]
    fn basis_matrices_reproduce_eval() {
        let g = TimeGrid::with_stride(13, 4).unwrap();
        let mut t = ChsTrack::stationary(4, Vec3::zeros());
        for k in 0..4 {
            t.positions[k] = Vec3::new(k as f64, (k * k) as f64, -0.5 * k as f64);
            t.velocities[k] = Vec3::new(0.3, -0.1 * k as f64, 1.0);
        }
        let frames: Vec<f64> = (0..13).map(|f| f as f64).collect();
        let (hm, ht) = basis_matrices(&g, &frames).unwrap();
        let m = Tensor::from_fn(4, 3, |k, c| t.positions[k][c]);
        let tau = Tensor::from_fn(4, 3, |k, c| t.velocities[k][c]);
        let mut p = hm.matmul(&m).unwrap();
        p.add_assign(&ht.matmul(&tau).unwrap());
        for f in 0..13 {
            let e = chs_eval(&t, f as f64, &g).unwrap();
            for c in 0..3 {
                assert!((p.get(f, c) - e[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn json_field_names() {
        let t = ChsTrack::stationary(2, Vec3::new(1.0, 2.0, 3.0));
        let v = serde_json::to_value(&t).unwrap();
        assert!(v.get("m").is_some() && v.get("tau").is_some());
        assert_eq!(v["rotations"][0], serde_json::json!([1.0, 0.0, 0.0, 0.0]));
        let g = serde_json::to_value(grid()).unwrap();
        assert_eq!(g["key_stride"], 4);
    }

    #[test]
    fn csv_has_row_per_gaussian_frame() {
        let g = grid();
        let tracks = vec![two_key_track(), ChsTrack::stationary(3, Vec3::zeros())];
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &tracks, &g).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], TRAJECTORY_CSV_HEADER);
        assert_eq!(lines[1], "gaussian_id,frame,x,y,z");
        assert_eq!(lines.len(), 2 + 2 * 9);
        assert_eq!(lines[4], "0,2,0.5,0,0");
    }
}
