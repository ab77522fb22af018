//! Interaction refinement: object motion tokens, the pelvis-distance
//! mask, mutual cross-attention between human part tokens and object
//! tokens, and the residual heads that correct pose and object positions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Vec3;
use crate::hexplane::HexPlaneError;
use crate::nn::{Mlp, NnError, Tape, Tensor, Var};
use crate::skeleton::{lbs_deform, AvatarRig, PoseParams, Skeleton, SkeletonError};
use crate::spline::{basis_matrices, chs_eval, ChsTrack, SplineError, TimeGrid};

pub const EMBED_DIM: usize = 29;
/// `[τ; e]` width per keyframe.
pub const KEY_FEATURE_DIM: usize = 3 + EMBED_DIM;
/// Object MLP input: `[τ(t); e(t); t]`.
pub const OBJECT_INPUT_DIM: usize = KEY_FEATURE_DIM + 1;
pub const OBJECT_FEATURE_DIM: usize = 32;
pub const ATTENTION_DIM: usize = 32;
pub const HEAD_HIDDEN: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HoiError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("pose partition mismatch: head emits {head} values, skeleton partition needs {needed}")]
    PartitionMismatch { head: usize, needed: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    HexPlane(#[from] HexPlaneError),
}

/// Which entity supplies the values each attention branch aggregates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ValueSource {
    /// Each branch aggregates its own values: human rows mix `V_h` via
    /// `A_h A_o` (M × M), object rows mix `V_o` via `A_o A_h` (N × N).
    /// A fully masked query row yields a zero output.
    #[default]
    OwnEntity,
    /// Standard cross-attention: the human branch aggregates `V_o`, the
    /// object branch `V_h`.
    Conventional,
}

/// Per-keyframe learnable embeddings for every object token and the
/// shallow MLP turning interpolated `[τ; e; t]` into a token feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectFeatureTrack {
    /// `N_key × (G·29)`: token `g` owns columns `29g..29g+29`.
    pub embeddings: Tensor,
    pub mlp: Mlp,
}

pub struct ObjectFeatureVars {
    pub embeddings: Var,
    pub mlp: Vec<Var>,
}

impl ObjectFeatureTrack {
    pub fn new(n_keys: usize, n_tokens: usize, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ObjectFeatureTrack {
            embeddings: Tensor::from_fn(n_keys, n_tokens * EMBED_DIM, |_, _| rng.random_range(-0.1..=0.1)),
            mlp: Mlp::new(&[OBJECT_INPUT_DIM, HEAD_HIDDEN, OBJECT_FEATURE_DIM], seed.wrapping_add(1)),
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.embeddings.cols() / EMBED_DIM
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.embeddings];
        v.extend(self.mlp.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.embeddings];
        v.extend(self.mlp.tensors_mut());
        v
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ObjectFeatureVars {
        let mk = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        ObjectFeatureVars {
            embeddings: mk(tape, &self.embeddings),
            mlp: self.mlp.tensors().into_iter().map(|t| mk(tape, t)).collect(),
        }
    }

    /// `G × 32` token features at frame time `t`.
    ///
    /// `[τ_k; e_k]` is interpolated with zero Hermite tangents, i.e.
    /// `h00(t_r)·x_k + h01(t_r)·x_{k+1}`, then `t_n` is appended.
    pub fn features_tape(
        &self,
        tape: &mut Tape,
        vars: &ObjectFeatureVars,
        velocities: &Tensor,
        t: f64,
        grid: &TimeGrid,
    ) -> Result<Var, HoiError> {
        let g = self.n_tokens();
        if velocities.shape() != [grid.n_keys(), 3 * g] || self.embeddings.rows() != grid.n_keys() {
            return Err(HoiError::ShapeMismatch(format!(
                "velocities {:?}, embeddings {:?}, {} keys, {g} tokens",
                velocities.shape(),
                self.embeddings.shape(),
                grid.n_keys()
            )));
        }
        let (hm, _) = basis_matrices(grid, &[t])?;
        let w = tape.constant(hm.clone());
        let tau_row = Tensor::from_vec(1, 3 * g, hm.matmul(velocities)?.into_data())?;
        let tau = tape.constant(tau_row.reshaped(g, 3)?);
        let e_row = tape.matmul(w, vars.embeddings)?;
        let e = tape.reshape(e_row, g, EMBED_DIM)?;
        let tn = tape.constant(Tensor::filled(g, 1, grid.normalized(t)));
        let x = tape.concat_cols(&[tau, e, tn])?;
        Ok(self.mlp.forward_tape(tape, &vars.mlp, x)?)
    }

    /// Plain version of [`ObjectFeatureTrack::features_tape`].
    pub fn object_feature(&self, tracks: &[ChsTrack], t: f64, grid: &TimeGrid) -> Result<Tensor, HoiError> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let vel = velocity_stack(tracks, grid)?;
        let f = self.features_tape(&mut tape, &vars, &vel, t, grid)?;
        Ok(tape.value(f).clone())
    }
}

/// `N_key × 3G` matrix of keyframe velocities, token `g` in columns
/// `3g..3g+3`.
pub fn velocity_stack(tracks: &[ChsTrack], grid: &TimeGrid) -> Result<Tensor, HoiError> {
    for tr in tracks {
        if tr.velocities.len() != grid.n_keys() {
            return Err(SplineError::InconsistentTrack("velocity key count".into()).into());
        }
    }
    Ok(Tensor::from_fn(grid.n_keys(), 3 * tracks.len(), |k, c| tracks[c / 3].velocities[k][c % 3]))
}

/// `M × N` additive bias: column `j` is `-∞` when object centre `j` is at
/// least `d_th` from the pelvis, `0` otherwise.
pub fn distance_mask(object_centers: &[Vec3], pelvis: &Vec3, d_th: f64, m: usize) -> Tensor {
    let cols: Vec<f64> = object_centers
        .iter()
        .map(|c| {
            if (c - pelvis).norm() >= d_th {
                f64::NEG_INFINITY
            } else {
                0.0
            }
        })
        .collect();
    Tensor::from_fn(m, cols.len(), |_, j| cols[j])
}

/// Projections and residual heads of the interaction module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoiModule {
    pub w_hq: Tensor,
    pub w_hk: Tensor,
    pub w_hv: Tensor,
    pub w_oq: Tensor,
    pub w_ok: Tensor,
    pub w_ov: Tensor,
    /// Flattened human tokens to the pose-correction vector.
    pub mlp_hum: Mlp,
    /// Object token to a 3D position offset.
    pub mlp_obj: Mlp,
    pub d_th: f64,
    #[serde(default)]
    pub values: ValueSource,
}

pub struct HoiVars {
    pub proj: [Var; 6],
    pub hum: Vec<Var>,
    pub obj: Vec<Var>,
}

/// Attention outputs together with the row-stochastic weight matrices.
pub struct AttentionVars {
    pub human: Var,
    pub object: Var,
    pub human_weights: Var,
    pub object_weights: Var,
}

impl HoiModule {
    /// Random projections and hidden layers; residual output layers start
    /// at zero so corrections are initially exactly zero.
    pub fn new(human_dim: usize, n_human_tokens: usize, n_pose_values: usize, d_th: f64, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut proj = |rows: usize| {
            let b = 1.0 / (rows as f64).sqrt();
            Tensor::from_fn(rows, ATTENTION_DIM, |_, _| rng.random_range(-b..=b))
        };
        HoiModule {
            w_hq: proj(human_dim),
            w_hk: proj(human_dim),
            w_hv: proj(human_dim),
            w_oq: proj(OBJECT_FEATURE_DIM),
            w_ok: proj(OBJECT_FEATURE_DIM),
            w_ov: proj(OBJECT_FEATURE_DIM),
            mlp_hum: Mlp::new(&[n_human_tokens * ATTENTION_DIM, HEAD_HIDDEN, n_pose_values], seed.wrapping_add(1))
                .zero_last_layer(),
            mlp_obj: Mlp::new(&[ATTENTION_DIM, HEAD_HIDDEN, 3], seed.wrapping_add(2)).zero_last_layer(),
            d_th,
            values: ValueSource::OwnEntity,
        }
    }

    pub fn with_values(mut self, values: ValueSource) -> Self {
        self.values = values;
        self
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.w_hq, &self.w_hk, &self.w_hv, &self.w_oq, &self.w_ok, &self.w_ov];
        v.extend(self.mlp_hum.tensors());
        v.extend(self.mlp_obj.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.w_hq,
            &mut self.w_hk,
            &mut self.w_hv,
            &mut self.w_oq,
            &mut self.w_ok,
            &mut self.w_ov,
        ];
        v.extend(self.mlp_hum.tensors_mut());
        v.extend(self.mlp_obj.tensors_mut());
        v
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> HoiVars {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let nh = self.mlp_hum.tensors().len();
        HoiVars {
            proj: std::array::from_fn(|i| vars[i]),
            hum: vars[6..6 + nh].to_vec(),
            obj: vars[6 + nh..].to_vec(),
        }
    }

    /// Masked mutual attention between `F_h (M × D_h)` and `F_o (N × 32)`.
    pub fn attend_tape(
        &self,
        tape: &mut Tape,
        vars: &HoiVars,
        human: Var,
        object: Var,
        bias: &Tensor,
    ) -> Result<AttentionVars, HoiError> {
        let [m, dh] = tape.shape(human);
        let [n, dobj] = tape.shape(object);
        if dh != self.w_hq.rows() || dobj != self.w_oq.rows() || bias.shape() != [m, n] {
            return Err(HoiError::ShapeMismatch(format!(
                "human {:?}, object {:?}, bias {:?}",
                [m, dh],
                [n, dobj],
                bias.shape()
            )));
        }
        let [hq, hk, hv, oq, ok, ov] = vars.proj;
        let q_h = tape.matmul(human, hq)?;
        let k_h = tape.matmul(human, hk)?;
        let v_h = tape.matmul(human, hv)?;
        let q_o = tape.matmul(object, oq)?;
        let k_o = tape.matmul(object, ok)?;
        let v_o = tape.matmul(object, ov)?;
        let inv_sqrt_d = 1.0 / (ATTENTION_DIM as f64).sqrt();

        let k_ot = tape.transpose(k_o);
        let logits_h = tape.matmul(q_h, k_ot)?;
        let logits_h = tape.scale(logits_h, inv_sqrt_d);
        let a_h = tape.masked_softmax(logits_h, bias)?;

        let k_ht = tape.transpose(k_h);
        let logits_o = tape.matmul(q_o, k_ht)?;
        let logits_o = tape.scale(logits_o, inv_sqrt_d);
        let a_o = tape.masked_softmax(logits_o, &bias.transpose())?;

        let (fh, fo) = match self.values {
            // Own values routed through the opposite attention so shapes
            // agree for M != N: F'_h = A_h (A_o V_h), F'_o = A_o (A_h V_o).
            ValueSource::OwnEntity => {
                let via_o = tape.matmul(a_o, v_h)?;
                let via_h = tape.matmul(a_h, v_o)?;
                (tape.matmul(a_h, via_o)?, tape.matmul(a_o, via_h)?)
            }
            ValueSource::Conventional => (tape.matmul(a_h, v_o)?, tape.matmul(a_o, v_h)?),
        };
        Ok(AttentionVars {
            human: fh,
            object: fo,
            human_weights: a_h,
            object_weights: a_o,
        })
    }

    /// `(Δθ: 1 × P, ΔG: N × 3)` from attended features.
    pub fn residuals_tape(
        &self,
        tape: &mut Tape,
        vars: &HoiVars,
        human: Var,
        object: Var,
    ) -> Result<(Var, Var), HoiError> {
        let [m, d] = tape.shape(human);
        if m * d != self.mlp_hum.in_width() {
            return Err(HoiError::ShapeMismatch(format!(
                "{m}×{d} human tokens for a head taking {}",
                self.mlp_hum.in_width()
            )));
        }
        let flat = tape.reshape(human, 1, m * d)?;
        let dtheta = self.mlp_hum.forward_tape(tape, &vars.hum, flat)?;
        let dg = self.mlp_obj.forward_tape(tape, &vars.obj, object)?;
        Ok((dtheta, dg))
    }
}

/// Plain mutual attention, returning `(F'_h, F'_o)`.
pub fn mutual_attention(
    human: &Tensor,
    object: &Tensor,
    bias: &Tensor,
    module: &HoiModule,
) -> Result<(Tensor, Tensor), HoiError> {
    let (fh, fo, _, _) = mutual_attention_with_weights(human, object, bias, module)?;
    Ok((fh, fo))
}

/// As [`mutual_attention`], also returning both weight matrices.
pub fn mutual_attention_with_weights(
    human: &Tensor,
    object: &Tensor,
    bias: &Tensor,
    module: &HoiModule,
) -> Result<(Tensor, Tensor, Tensor, Tensor), HoiError> {
    let mut tape = Tape::new();
    let vars = module.bind(&mut tape, false);
    let h = tape.constant(human.clone());
    let o = tape.constant(object.clone());
    let a = module.attend_tape(&mut tape, &vars, h, o, bias)?;
    Ok((
        tape.value(a.human).clone(),
        tape.value(a.object).clone(),
        tape.value(a.human_weights).clone(),
        tape.value(a.object_weights).clone(),
    ))
}

/// Corrected pose and geometry at one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct HoiOutput {
    pub delta_theta: Vec<f64>,
    pub delta_g: Vec<Vec3>,
    pub theta_final: PoseParams,
    pub human_points: Vec<Vec3>,
    pub object_points: Vec<Vec3>,
}

/// Regresses `Δθ`, `ΔG` from attended features and applies them:
/// `θ_final = θ + Δθ` on the partition joints, human points by skinning
/// with `θ_final`, object positions `M(t) + ΔG`.
#[allow(clippy::too_many_arguments)]
pub fn regress_and_apply(
    attended_human: &Tensor,
    attended_object: &Tensor,
    module: &HoiModule,
    rig: &AvatarRig,
    skel: &Skeleton,
    pose: &PoseParams,
    tracks: &[ChsTrack],
    t: f64,
    grid: &TimeGrid,
) -> Result<HoiOutput, HoiError> {
    let needed = 3 * skel.partition.len();
    if module.mlp_hum.out_width() != needed {
        return Err(HoiError::PartitionMismatch {
            head: module.mlp_hum.out_width(),
            needed,
        });
    }
    if attended_object.rows() != tracks.len() {
        return Err(HoiError::ShapeMismatch(format!(
            "{} object tokens for {} tracks",
            attended_object.rows(),
            tracks.len()
        )));
    }
    let flat = attended_human.clone().reshaped(1, attended_human.len())?;
    let dtheta = module.mlp_hum.forward(&flat)?;
    let dg = module.mlp_obj.forward(attended_object)?;

    let theta_final = pose.add_partitioned(&skel.partition, dtheta.data())?;
    let human_points = lbs_deform(rig, skel, &theta_final)?;
    let delta_g: Vec<Vec3> = (0..dg.rows())
        .map(|i| Vec3::new(dg.get(i, 0), dg.get(i, 1), dg.get(i, 2)))
        .collect();
    let object_points = tracks
        .iter()
        .zip(&delta_g)
        .map(|(tr, d)| chs_eval(tr, t, grid).map(|p| p + d))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(HoiOutput {
        delta_theta: dtheta.into_data(),
        delta_g,
        theta_final,
        human_points,
        object_points,
    })
}
