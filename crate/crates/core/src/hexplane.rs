//! Six-plane factorised feature field over `(x, y, z, t)` and the
//! part-averaged feature tokens built from it.
//!
//! Each plane covers one coordinate pair in the order
//! `xy, xz, yz, xt, yt, zt`, stores `r × r` cells of `C` channels and is
//! sampled bilinearly. The six samples are concatenated into a `6·C`
//! feature. Coordinates outside the domain clamp to the boundary.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Vec3;
use crate::nn::{NnError, SparseMatrix, Tape, Tensor, Var};

/// Coordinate pairs sampled by each plane (0=x, 1=y, 2=z, 3=t).
pub const PLANE_AXES: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];
pub const DEFAULT_RESOLUTION: usize = 32;
pub const DEFAULT_CHANNELS: usize = 16;
pub const DEFAULT_PARTS: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HexPlaneError {
    #[error("part {0} has no vertices")]
    EmptyPart(usize),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HexPlaneGrid {
    pub resolution: usize,
    pub channels: usize,
    /// Lower domain bound per axis `(x, y, z, t)`.
    pub bounds_min: [f64; 4],
    pub bounds_max: [f64; 4],
    /// Six `r² × C` tables; cell `(i, j)` of the plane's two axes is row
    /// `i·r + j`.
    pub planes: Vec<Tensor>,
}

impl HexPlaneGrid {
    /// Planes filled with uniform values in `±0.1`.
    pub fn random(resolution: usize, channels: usize, bounds_min: [f64; 4], bounds_max: [f64; 4], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let planes = (0..6)
            .map(|_| Tensor::from_fn(resolution * resolution, channels, |_, _| rng.random_range(-0.1..=0.1)))
            .collect();
        HexPlaneGrid {
            resolution,
            channels,
            bounds_min,
            bounds_max,
            planes,
        }
    }

    pub fn constant(resolution: usize, channels: usize, value: f64) -> Self {
        HexPlaneGrid {
            resolution,
            channels,
            bounds_min: [0.0; 4],
            bounds_max: [1.0; 4],
            planes: vec![Tensor::filled(resolution * resolution, channels, value); 6],
        }
    }

    /// Spatial bounds from the box around `points` padded by 10% per side,
    /// time over `[0, 1]`.
    pub fn for_points(points: &[Vec3], resolution: usize, channels: usize, seed: u64) -> Self {
        let mut lo = [f64::INFINITY; 4];
        let mut hi = [f64::NEG_INFINITY; 4];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        for a in 0..3 {
            if !lo[a].is_finite() {
                lo[a] = -1.0;
                hi[a] = 1.0;
            }
            let pad = 0.1 * (hi[a] - lo[a]).max(1e-3);
            lo[a] -= pad;
            hi[a] += pad;
        }
        lo[3] = 0.0;
        hi[3] = 1.0;
        Self::random(resolution, channels, lo, hi, seed)
    }

    pub fn feature_dim(&self) -> usize {
        6 * self.channels
    }

    pub fn validate(&self) -> Result<(), HexPlaneError> {
        if self.resolution < 2 || self.channels == 0 {
            return Err(HexPlaneError::InvalidGrid("resolution >= 2 and channels >= 1 required".into()));
        }
        if self.planes.len() != 6 {
            return Err(HexPlaneError::InvalidGrid(format!("{} planes", self.planes.len())));
        }
        let want = [self.resolution * self.resolution, self.channels];
        if self.planes.iter().any(|p| p.shape() != want) {
            return Err(HexPlaneError::InvalidGrid("plane shape".into()));
        }
        if (0..4).any(|a| !(self.bounds_max[a] > self.bounds_min[a])) {
            return Err(HexPlaneError::InvalidGrid("empty bounds".into()));
        }
        Ok(())
    }

    /// Continuous cell coordinate along `axis`, clamped to the grid.
    fn cell_coord(&self, axis: usize, v: f64) -> (usize, f64) {
        let (lo, hi) = (self.bounds_min[axis], self.bounds_max[axis]);
        let r = self.resolution;
        let u = ((v - lo) / (hi - lo)).clamp(0.0, 1.0) * (r - 1) as f64;
        let i = (u.floor() as usize).min(r - 2);
        (i, u - i as f64)
    }

    /// Bilinear weights for each plane at `(x, y, z, t)`.
    pub fn query_weights(&self, coords: [f64; 4]) -> [Vec<(usize, f64)>; 6] {
        let r = self.resolution;
        std::array::from_fn(|p| {
            let (a, b) = PLANE_AXES[p];
            let (i, fa) = self.cell_coord(a, coords[a]);
            let (j, fb) = self.cell_coord(b, coords[b]);
            vec![
                (i * r + j, (1.0 - fa) * (1.0 - fb)),
                (i * r + j + 1, (1.0 - fa) * fb),
                ((i + 1) * r + j, fa * (1.0 - fb)),
                ((i + 1) * r + j + 1, fa * fb),
            ]
        })
    }
}

/// Concatenated plane features at `(x, y, z, t)`; `t` is normalised time.
pub fn plane_query(grid: &HexPlaneGrid, x: f64, y: f64, z: f64, t: f64) -> Vec<f64> {
    let c = grid.channels;
    let mut out = vec![0.0; 6 * c];
    for (p, w) in grid.query_weights([x, y, z, t]).iter().enumerate() {
        let dst = &mut out[p * c..(p + 1) * c];
        for &(cell, wt) in w {
            for (o, v) in dst.iter_mut().zip(grid.planes[p].row_slice(cell)) {
                *o += wt * v;
            }
        }
    }
    out
}

/// Disjoint, covering, non-empty groups of avatar vertices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartPartition {
    pub parts: Vec<Vec<usize>>,
}

impl PartPartition {
    /// Splits `order` into `n_parts` consecutive groups of near-equal size.
    pub fn contiguous(order: &[usize], n_parts: usize) -> Result<Self, HexPlaneError> {
        if n_parts == 0 || order.len() < n_parts {
            return Err(HexPlaneError::InvalidPartition(format!(
                "{} vertices cannot fill {n_parts} parts",
                order.len()
            )));
        }
        let parts = (0..n_parts)
            .map(|p| {
                let (s, e) = (p * order.len() / n_parts, (p + 1) * order.len() / n_parts);
                order[s..e].to_vec()
            })
            .collect();
        Ok(PartPartition { parts })
    }

    pub fn n_parts(&self) -> usize {
        self.parts.len()
    }

    pub fn validate(&self, n_vertices: usize) -> Result<(), HexPlaneError> {
        let mut seen = vec![false; n_vertices];
        for (p, part) in self.parts.iter().enumerate() {
            if part.is_empty() {
                return Err(HexPlaneError::EmptyPart(p));
            }
            for &v in part {
                if v >= n_vertices || seen[v] {
                    return Err(HexPlaneError::InvalidPartition(format!(
                        "vertex {v} out of range or in two parts"
                    )));
                }
                seen[v] = true;
            }
        }
        if let Some(v) = seen.iter().position(|s| !s) {
            return Err(HexPlaneError::InvalidPartition(format!("vertex {v} in no part")));
        }
        Ok(())
    }
}

/// Per-plane sparse maps taking plane tables to part-averaged features
/// for points at normalised time `t`.
pub fn part_feature_maps(
    grid: &HexPlaneGrid,
    points: &[Vec3],
    partition: &PartPartition,
    t: f64,
) -> Result<[Rc<SparseMatrix>; 6], HexPlaneError> {
    partition.validate(points.len())?;
    let weights: Vec<[Vec<(usize, f64)>; 6]> = points
        .iter()
        .map(|p| grid.query_weights([p.x, p.y, p.z, t]))
        .collect();
    let cells = grid.resolution * grid.resolution;
    Ok(std::array::from_fn(|plane| {
        let rows = partition
            .parts
            .iter()
            .map(|part| {
                let inv = 1.0 / part.len() as f64;
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(4 * part.len());
                for &v in part {
                    for &(cell, w) in &weights[v][plane] {
                        row.push((cell, w * inv));
                    }
                }
                row
            })
            .collect();
        Rc::new(SparseMatrix::new(cells, rows))
    }))
}

/// `P × 6C` matrix whose row `p` is the mean plane query over part `p`.
pub fn part_features(
    grid: &HexPlaneGrid,
    points: &[Vec3],
    partition: &PartPartition,
    t: f64,
) -> Result<Tensor, HexPlaneError> {
    let maps = part_feature_maps(grid, points, partition, t)?;
    let c = grid.channels;
    let mut out = Tensor::zeros(partition.n_parts(), 6 * c);
    for (p, m) in maps.iter().enumerate() {
        let f = m.mul_dense(&grid.planes[p]);
        for i in 0..out.rows() {
            out.row_slice_mut(i)[p * c..(p + 1) * c].copy_from_slice(f.row_slice(i));
        }
    }
    Ok(out)
}

/// Tape version of [`part_features`] given bound plane nodes.
pub fn part_features_tape(tape: &mut Tape, planes: &[Var], maps: &[Rc<SparseMatrix>; 6]) -> Result<Var, HexPlaneError> {
    let mut cols = Vec::with_capacity(6);
    for (m, &p) in maps.iter().zip(planes) {
        cols.push(tape.sparse_matmul(m.clone(), p)?);
    }
    Ok(tape.concat_cols(&cols)?)
}
