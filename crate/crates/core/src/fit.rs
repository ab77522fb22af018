//! Optimisation loops: CHS fitting of object points, per-frame pose
//! fitting of the avatar, and joint training of the interaction module on
//! top of the frozen baselines.

use std::io::Write;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Vec3;
use crate::hexplane::{part_feature_maps, part_features, part_features_tape, HexPlaneError, HexPlaneGrid};
use crate::hexplane::{DEFAULT_CHANNELS, DEFAULT_RESOLUTION};
use crate::hoi::{
    distance_mask, mutual_attention, regress_and_apply, velocity_stack, HoiError, HoiModule, HoiOutput, HoiVars,
    ObjectFeatureTrack, ValueSource,
};
use crate::metrics::{cd_best, LossWeights, MetricsError};
use crate::nn::{Adam, AdamConfig, NnError, Optimizer, SparseMatrix, Tape, Tensor, Var};
use crate::skeleton::{forward_kinematics, lbs_deform, lbs_tape, AvatarRig, PoseParams, SkeletonError};
use crate::spline::{basis_matrices, chs_eval, ChsTrack, SplineError, TimeGrid};
use crate::synth::SyntheticScene;

pub const TRACE_CSV_HEADER: &str = "# hoikit trace csv v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("loss became non-finite in {phase} at iteration {iter}")]
    DivergedLoss { phase: &'static str, iter: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Hoi(#[from] HoiError),
    #[error(transparent)]
    HexPlane(#[from] HexPlaneError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub phase: String,
    pub iter: usize,
    pub loss: f64,
    /// Running minimum of `loss`.
    pub best: f64,
}

fn push_trace(trace: &mut Vec<TraceRow>, phase: &str, iter: usize, loss: f64) {
    let best = trace
        .iter()
        .rev()
        .take_while(|r| r.phase == phase)
        .map(|r| r.best)
        .next()
        .map_or(loss, |b: f64| b.min(loss));
    trace.push(TraceRow {
        phase: phase.to_string(),
        iter,
        loss,
        best,
    });
}

pub fn write_trace_csv<W: Write>(mut out: W, trace: &[TraceRow]) -> Result<(), csv::Error> {
    writeln!(out, "{TRACE_CSV_HEADER}")?;
    let mut w = csv::Writer::from_writer(out);
    for r in trace {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Geometric learning-rate decay from `lr` to `lr_final`.
fn decayed(lr: f64, lr_final: f64, iter: usize, iters: usize) -> f64 {
    if iters <= 1 {
        return lr;
    }
    lr * (lr_final / lr).powf(iter as f64 / (iters - 1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectFitOptions {
    pub iters: usize,
    pub lr: f64,
    pub lr_final: f64,
    /// Frames used for fitting; all frames when `None`.
    pub train_frames: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for ObjectFitOptions {
    fn default() -> Self {
        ObjectFitOptions {
            iters: 2000,
            lr: 1e-2,
            lr_final: 1e-4,
            train_frames: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectFit {
    pub tracks: Vec<ChsTrack>,
    pub trace: Vec<TraceRow>,
}

/// Frames with `f % 4 == 2`, never keyframes at the default stride.
pub fn held_out_frames(n_frames: usize) -> Vec<usize> {
    (0..n_frames).filter(|f| f % 4 == 2).collect()
}

pub fn training_frames(n_frames: usize) -> Vec<usize> {
    (0..n_frames).filter(|f| f % 4 != 2).collect()
}

/// `m_k` from the training frame nearest keyframe `k`; `τ_k` as the
/// central difference of neighbouring `m` (one-sided at the ends).
pub fn init_tracks(observations: &[Vec<Vec3>], grid: &TimeGrid, frames: &[usize]) -> Vec<ChsTrack> {
    let n_keys = grid.n_keys();
    let g = observations[frames[0]].len();
    let nearest = |k: usize| {
        let kf = grid.key_frame(k);
        *frames
            .iter()
            .min_by(|a, b| ((**a as f64) - kf).abs().total_cmp(&((**b as f64) - kf).abs()))
            .expect("non-empty frames")
    };
    let key_obs: Vec<usize> = (0..n_keys).map(nearest).collect();
    (0..g)
        .map(|i| {
            let m: Vec<Vec3> = key_obs.iter().map(|&f| observations[f][i]).collect();
            let tau = (0..n_keys)
                .map(|k| match k {
                    0 => m[1] - m[0],
                    k if k == n_keys - 1 => m[k] - m[k - 1],
                    k => (m[k + 1] - m[k - 1]) * 0.5,
                })
                .collect();
            ChsTrack {
                positions: m,
                velocities: tau,
                ..ChsTrack::stationary(n_keys, Vec3::zeros())
            }
        })
        .collect()
}

/// Fits one CHS track per observed point by Adam on the mean squared
/// 3D error over the training frames.
///
/// `observations` is frame-major: `observations[f][g]`.
pub fn fit_object_track(
    observations: &[Vec<Vec3>],
    grid: &TimeGrid,
    opts: &ObjectFitOptions,
) -> Result<ObjectFit, FitError> {
    if observations.len() != grid.n_frames() {
        return Err(FitError::InsufficientData(format!(
            "{} observed frames for a {}-frame grid",
            observations.len(),
            grid.n_frames()
        )));
    }
    let frames: Vec<usize> = match &opts.train_frames {
        Some(f) => f.clone(),
        None => (0..grid.n_frames()).collect(),
    };
    if frames.len() < grid.n_keys() || frames.iter().any(|&f| f >= grid.n_frames()) {
        return Err(FitError::InsufficientData(format!(
            "{} training frames for {} keyframes",
            frames.len(),
            grid.n_keys()
        )));
    }
    let g = observations[frames[0]].len();
    if g == 0 || frames.iter().any(|&f| observations[f].len() != g) {
        return Err(FitError::InsufficientData("inconsistent point counts".into()));
    }

    let mut tracks = init_tracks(observations, grid, &frames);
    let n_keys = grid.n_keys();
    let stack = |get: &dyn Fn(&ChsTrack, usize) -> Vec3, tracks: &[ChsTrack]| {
        Tensor::from_fn(n_keys, 3 * g, |k, c| get(&tracks[c / 3], k)[c % 3])
    };
    let mut m = stack(&|t, k| t.positions[k], &tracks);
    let mut tau = stack(&|t, k| t.velocities[k], &tracks);
    let times: Vec<f64> = frames.iter().map(|&f| f as f64).collect();
    let (hm, ht) = basis_matrices(grid, &times)?;
    let obs = Tensor::from_fn(frames.len(), 3 * g, |r, c| observations[frames[r]][c / 3][c % 3]);
    let inv = 1.0 / (frames.len() * g) as f64;

    let mut adam = Adam::new(AdamConfig {
        lr: opts.lr,
        ..Default::default()
    });
    let mut trace = Vec::with_capacity(opts.iters);
    for iter in 0..opts.iters {
        let mut tape = Tape::new();
        let mv = tape.param(m.clone());
        let tv = tape.param(tau.clone());
        let hmv = tape.constant(hm.clone());
        let htv = tape.constant(ht.clone());
        let a = tape.matmul(hmv, mv)?;
        let b = tape.matmul(htv, tv)?;
        let p = tape.add(a, b)?;
        let o = tape.constant(obs.clone());
        let d = tape.sub(p, o)?;
        let sq = tape.square(d);
        let s = tape.sum(sq);
        let loss = tape.scale(s, inv);
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Err(FitError::DivergedLoss {
                phase: "object",
                iter,
            });
        }
        push_trace(&mut trace, "object", iter, lv);
        let grads = tape.backward(loss)?.params();
        adam.set_lr(decayed(opts.lr, opts.lr_final, iter, opts.iters));
        adam.step(&mut [&mut m, &mut tau], &grads);
    }
    for (i, tr) in tracks.iter_mut().enumerate() {
        for k in 0..n_keys {
            tr.positions[k] = Vec3::new(m.get(k, 3 * i), m.get(k, 3 * i + 1), m.get(k, 3 * i + 2));
            tr.velocities[k] = Vec3::new(tau.get(k, 3 * i), tau.get(k, 3 * i + 1), tau.get(k, 3 * i + 2));
        }
    }
    Ok(ObjectFit { tracks, trace })
}

/// Root mean squared point error of `tracks` against per-frame targets.
pub fn track_rmse(tracks: &[ChsTrack], grid: &TimeGrid, targets: &[Vec<Vec3>], frames: &[usize]) -> Result<f64, FitError> {
    let mut s = 0.0;
    let mut n = 0usize;
    for &f in frames {
        for (tr, q) in tracks.iter().zip(&targets[f]) {
            s += (chs_eval(tr, f as f64, grid)? - q).norm_squared();
            n += 1;
        }
    }
    Ok((s / n.max(1) as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseFitOptions {
    pub iters: usize,
    pub lr: f64,
    pub lr_final: f64,
}

impl Default for PoseFitOptions {
    fn default() -> Self {
        PoseFitOptions {
            iters: 800,
            lr: 0.1,
            lr_final: 1e-2,
        }
    }
}

/// Per-frame `θ` and a shared `α` fitted to observed avatar points,
/// starting from the rest pose and `α = 1`.
pub fn fit_poses(
    scene: &SyntheticScene,
    opts: &PoseFitOptions,
    trace: &mut Vec<TraceRow>,
) -> Result<(Vec<PoseParams>, f64), FitError> {
    let skel = &scene.skeleton;
    let rig = &scene.rig;
    rig.validate(skel)?;
    let n_f = scene.n_frames();
    if scene.observations.human.len() != n_f || scene.observations.human.iter().any(|o| o.len() != rig.n_points()) {
        return Err(FitError::InsufficientData("human observations do not match the rig".into()));
    }
    let rest = skel.rest_positions()?;
    let points = rig.point_tensor();
    let weights = rig.weight_tensor();
    let obs: Vec<Tensor> = scene
        .observations
        .human
        .iter()
        .map(|o| Tensor::from_fn(o.len(), 3, |i, c| o[i][c]))
        .collect();
    let mut thetas: Vec<Tensor> = vec![Tensor::zeros(skel.n_joints(), 3); n_f];
    let mut alpha = Tensor::scalar(1.0);
    let inv = 1.0 / (n_f * rig.n_points()) as f64;
    let mut adam = Adam::new(AdamConfig {
        lr: opts.lr,
        ..Default::default()
    });
    for iter in 0..opts.iters {
        let mut tape = Tape::new();
        let th: Vec<Var> = thetas.iter().map(|t| tape.param(t.clone())).collect();
        let av = tape.param(alpha.clone());
        let pv = tape.constant(points.clone());
        let mut total: Option<Var> = None;
        for f in 0..n_f {
            let (posed, _) = lbs_tape(&mut tape, skel, &rest, pv, &weights, th[f], av)?;
            let o = tape.constant(obs[f].clone());
            let d = tape.sub(posed, o)?;
            let sq = tape.square(d);
            let s = tape.sum(sq);
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
        }
        let Some(total) = total else { break };
        let loss = tape.scale(total, inv);
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Err(FitError::DivergedLoss { phase: "pose", iter });
        }
        push_trace(trace, "pose", iter, lv);
        let grads = tape.backward(loss)?.params();
        adam.set_lr(decayed(opts.lr, opts.lr_final, iter, opts.iters));
        let mut params: Vec<&mut Tensor> = thetas.iter_mut().collect();
        params.push(&mut alpha);
        adam.step(&mut params, &grads);
    }
    Ok((thetas.iter().map(PoseParams::from_tensor).collect(), alpha.item()))
}

/// Entity-specific deformations before interaction refinement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub poses: Vec<PoseParams>,
    pub alpha: f64,
    pub tracks: Vec<ChsTrack>,
}

impl Baseline {
    pub fn rig(&self, scene: &SyntheticScene) -> AvatarRig {
        AvatarRig {
            alpha: self.alpha,
            ..scene.rig.clone()
        }
    }

    pub fn human_points(&self, scene: &SyntheticScene, frame: usize) -> Result<Vec<Vec3>, FitError> {
        Ok(lbs_deform(&self.rig(scene), &scene.skeleton, &self.poses[frame])?)
    }

    pub fn object_points(&self, scene: &SyntheticScene, frame: usize) -> Result<Vec<Vec3>, FitError> {
        Ok(self
            .tracks
            .iter()
            .map(|t| chs_eval(t, frame as f64, &scene.grid))
            .collect::<Result<_, _>>()?)
    }

    fn pelvis(&self, scene: &SyntheticScene, frame: usize) -> Result<Vec3, FitError> {
        Ok(forward_kinematics(&scene.skeleton, &self.poses[frame])?[0].translation * self.alpha)
    }
}

/// Learnable interaction state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoiModel {
    pub module: HoiModule,
    pub features: ObjectFeatureTrack,
    pub hexplane: HexPlaneGrid,
}

impl HoiModel {
    pub fn new(scene: &SyntheticScene, baseline: &Baseline, opts: &JointFitOptions) -> Result<Self, FitError> {
        let mut all = Vec::new();
        for f in 0..scene.n_frames() {
            all.extend(baseline.human_points(scene, f)?);
        }
        let hexplane = HexPlaneGrid::for_points(&all, opts.hexplane_resolution, opts.hexplane_channels, opts.seed);
        let d_th = scene.skeleton.arm_length("right_hand")?;
        let module = HoiModule::new(
            hexplane.feature_dim(),
            scene.parts.n_parts(),
            3 * scene.skeleton.partition.len(),
            d_th,
            opts.seed.wrapping_add(11),
        )
        .with_values(opts.values);
        let features = ObjectFeatureTrack::new(scene.grid.n_keys(), baseline.tracks.len(), opts.seed.wrapping_add(23));
        Ok(HoiModel {
            module,
            features,
            hexplane,
        })
    }
}

/// Baseline-then-HOI output at one frame through the plain code paths.
pub fn predict_frame(
    scene: &SyntheticScene,
    baseline: &Baseline,
    model: &HoiModel,
    frame: usize,
) -> Result<HoiOutput, FitError> {
    let t = frame as f64;
    let rig = baseline.rig(scene);
    let human = lbs_deform(&rig, &scene.skeleton, &baseline.poses[frame])?;
    let fh = part_features(&model.hexplane, &human, &scene.parts, scene.grid.normalized(t))?;
    let fo = model.features.object_feature(&baseline.tracks, t, &scene.grid)?;
    let centers = baseline.object_points(scene, frame)?;
    let bias = distance_mask(&centers, &baseline.pelvis(scene, frame)?, model.module.d_th, fh.rows());
    let (ah, ao) = mutual_attention(&fh, &fo, &bias, &model.module)?;
    Ok(regress_and_apply(
        &ah,
        &ao,
        &model.module,
        &rig,
        &scene.skeleton,
        &baseline.poses[frame],
        &baseline.tracks,
        t,
        &scene.grid,
    )?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointFitOptions {
    pub pose: PoseFitOptions,
    pub object: ObjectFitOptions,
    pub hoi_iters: usize,
    pub hoi_lr: f64,
    pub hoi_lr_final: f64,
    pub weights: LossWeights,
    /// Skip phase 2 entirely.
    pub no_hoi: bool,
    pub values: ValueSource,
    /// When false the residual heads stay at their zero initialisation.
    pub train_heads: bool,
    pub hexplane_resolution: usize,
    pub hexplane_channels: usize,
    pub seed: u64,
}

impl Default for JointFitOptions {
    fn default() -> Self {
        JointFitOptions {
            pose: PoseFitOptions::default(),
            object: ObjectFitOptions {
                iters: 600,
                ..Default::default()
            },
            hoi_iters: 150,
            hoi_lr: 2e-3,
            hoi_lr_final: 2e-4,
            weights: LossWeights::default(),
            no_hoi: false,
            values: ValueSource::OwnEntity,
            train_heads: true,
            hexplane_resolution: DEFAULT_RESOLUTION,
            hexplane_channels: DEFAULT_CHANNELS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    /// Mean `CD^best` over annotated contact frames.
    pub contact_cd_best: f64,
    pub human_rmse: f64,
    pub object_rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub scene_id: String,
    pub options: JointFitOptions,
    pub baseline: PhaseMetrics,
    pub hoi: Option<PhaseMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointFit {
    pub baseline: Baseline,
    pub model: Option<HoiModel>,
    pub report: FitReport,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

/// Final human and object points per frame, from the model when present.
pub fn final_points(
    scene: &SyntheticScene,
    baseline: &Baseline,
    model: Option<&HoiModel>,
    frame: usize,
) -> Result<(Vec<Vec3>, Vec<Vec3>), FitError> {
    match model {
        Some(m) => {
            let out = predict_frame(scene, baseline, m, frame)?;
            Ok((out.human_points, out.object_points))
        }
        None => Ok((baseline.human_points(scene, frame)?, baseline.object_points(scene, frame)?)),
    }
}

pub fn phase_metrics(scene: &SyntheticScene, baseline: &Baseline, model: Option<&HoiModel>) -> Result<PhaseMetrics, FitError> {
    let (left, right) = scene.hand_indices()?;
    let mut cd = 0.0;
    let mut n_contact = 0usize;
    let (mut hs, mut hn, mut os, mut on) = (0.0, 0usize, 0.0, 0usize);
    for f in 0..scene.n_frames() {
        let (human, object) = final_points(scene, baseline, model, f)?;
        if scene.contacts[f] {
            let hl: Vec<Vec3> = left.iter().map(|&i| human[i]).collect();
            let hr: Vec<Vec3> = right.iter().map(|&i| human[i]).collect();
            cd += cd_best(&object, &hl, &hr)?;
            n_contact += 1;
        }
        for (p, q) in human.iter().zip(scene.gt_human_points(f)?) {
            hs += (p - q).norm_squared();
            hn += 1;
        }
        for (p, q) in object.iter().zip(scene.gt_object_points(f)) {
            os += (p - q).norm_squared();
            on += 1;
        }
    }
    Ok(PhaseMetrics {
        contact_cd_best: if n_contact == 0 { 0.0 } else { cd / n_contact as f64 },
        human_rmse: (hs / hn.max(1) as f64).sqrt(),
        object_rmse: (os / on.max(1) as f64).sqrt(),
    })
}

/// Constants of one frame for the phase-2 tape.
struct FrameCtx {
    t: f64,
    maps: [Rc<SparseMatrix>; 6],
    bias: Tensor,
    theta: Tensor,
    object_base: Tensor,
    obs_human: Tensor,
    obs_object: Tensor,
    obs_depth: Tensor,
    depth_axis: Tensor,
    depth_offset: f64,
    contact: bool,
}

fn points_tensor(p: &[Vec3]) -> Tensor {
    Tensor::from_fn(p.len(), 3, |i, c| p[i][c])
}

/// Binds model tensors in the order of [`model_tensors_mut`].
struct ModelVars {
    hoi: HoiVars,
    features: crate::hoi::ObjectFeatureVars,
    planes: Vec<Var>,
}

fn bind_model(tape: &mut Tape, model: &HoiModel, train_heads: bool) -> ModelVars {
    let m = &model.module;
    let proj = [&m.w_hq, &m.w_hk, &m.w_hv, &m.w_oq, &m.w_ok, &m.w_ov].map(|t| tape.param(t.clone()));
    let head = |tape: &mut Tape, mlp: &crate::nn::Mlp| {
        if train_heads {
            mlp.bind(tape)
        } else {
            mlp.bind_frozen(tape)
        }
    };
    let hum = head(tape, &m.mlp_hum);
    let obj = head(tape, &m.mlp_obj);
    let features = model.features.bind(tape, true);
    let planes = model.hexplane.planes.iter().map(|p| tape.param(p.clone())).collect();
    ModelVars {
        hoi: HoiVars { proj, hum, obj },
        features,
        planes,
    }
}

fn model_tensors_mut(model: &mut HoiModel, train_heads: bool) -> Vec<&mut Tensor> {
    let m = &mut model.module;
    let mut v: Vec<&mut Tensor> = vec![&mut m.w_hq, &mut m.w_hk, &mut m.w_hv, &mut m.w_oq, &mut m.w_ok, &mut m.w_ov];
    if train_heads {
        v.extend(m.mlp_hum.tensors_mut());
        v.extend(m.mlp_obj.tensors_mut());
    }
    v.extend(model.features.tensors_mut());
    v.extend(model.hexplane.planes.iter_mut());
    v
}

fn chamfer_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var, NnError> {
    let d = tape.pairwise_sq_dist(a, b)?;
    let ab = tape.min_rows(d);
    let ab = tape.mean(ab);
    let dt = tape.transpose(d);
    let ba = tape.min_rows(dt);
    let ba = tape.mean(ba);
    let s = tape.add(ab, ba)?;
    Ok(tape.scale(s, 0.5))
}

#[allow(clippy::too_many_arguments)]
fn frame_loss(
    tape: &mut Tape,
    scene: &SyntheticScene,
    model: &HoiModel,
    vars: &ModelVars,
    ctx: &FrameCtx,
    velocities: &Tensor,
    static_parts: &StaticParts,
    w: &LossWeights,
) -> Result<Var, FitError> {
    let module = &model.module;
    let fh = part_features_tape(tape, &vars.planes, &ctx.maps)?;
    let fo = model
        .features
        .features_tape(tape, &vars.features, velocities, ctx.t, &scene.grid)?;
    let att = module.attend_tape(tape, &vars.hoi, fh, fo, &ctx.bias)?;
    let (dtheta, dg) = module.residuals_tape(tape, &vars.hoi, att.human, att.object)?;

    let joints = scene.skeleton.partition.joints();
    let dtheta = tape.reshape(dtheta, joints.len(), 3)?;
    let dtheta = tape.scatter_rows(dtheta, &joints, scene.skeleton.n_joints())?;
    let base = tape.constant(ctx.theta.clone());
    let theta = tape.add(base, dtheta)?;
    let (human, _) = lbs_tape(
        tape,
        &scene.skeleton,
        &static_parts.rest,
        static_parts.points,
        &static_parts.weights,
        theta,
        static_parts.alpha,
    )?;
    let ob = tape.constant(ctx.object_base.clone());
    let object = tape.add(ob, dg)?;

    let mse = |tape: &mut Tape, a: Var, target: &Tensor| -> Result<Var, NnError> {
        let o = tape.constant(target.clone());
        let d = tape.sub(a, o)?;
        let sq = tape.square(d);
        let s = tape.sum(sq);
        Ok(tape.scale(s, 1.0 / target.rows() as f64))
    };
    let l_h = mse(tape, human, &ctx.obs_human)?;
    let l_o = mse(tape, object, &ctx.obs_object)?;
    let mut loss = tape.scale(l_h, w.human);
    let lo = tape.scale(l_o, w.object);
    loss = tape.add(loss, lo)?;

    if ctx.contact {
        let hl = tape.gather_rows(human, &static_parts.left)?;
        let hr = tape.gather_rows(human, &static_parts.right)?;
        let cl = chamfer_tape(tape, object, hl)?;
        let cr = chamfer_tape(tape, object, hr)?;
        let c = if tape.value(cl).item() <= tape.value(cr).item() { cl } else { cr };
        let c = tape.scale(c, w.scene);
        loss = tape.add(loss, c)?;
    }

    let all = tape.concat_rows(&[human, object])?;
    let axis = tape.constant(ctx.depth_axis.clone());
    let depth = tape.matmul(all, axis)?;
    let depth = tape.offset(depth, ctx.depth_offset);
    let od = tape.constant(ctx.obs_depth.clone());
    let dd = tape.sub(depth, od)?;
    let dd = tape.abs(dd);
    let dd = tape.mean(dd);
    let dd = tape.scale(dd, w.depth);
    Ok(tape.add(loss, dd)?)
}

struct StaticParts {
    rest: Vec<Vec3>,
    points: Var,
    weights: Tensor,
    alpha: Var,
    left: Vec<usize>,
    right: Vec<usize>,
}

fn frame_contexts(scene: &SyntheticScene, baseline: &Baseline, model: &HoiModel) -> Result<Vec<FrameCtx>, FitError> {
    (0..scene.n_frames())
        .map(|f| {
            let t = f as f64;
            let human = baseline.human_points(scene, f)?;
            let maps = part_feature_maps(&model.hexplane, &human, &scene.parts, scene.grid.normalized(t))?;
            let centers = baseline.object_points(scene, f)?;
            let bias = distance_mask(&centers, &baseline.pelvis(scene, f)?, model.module.d_th, scene.parts.n_parts());
            let cam = &scene.cameras[f];
            let r = cam.rotation.row(2);
            let depth_of = |p: &Vec3| cam.world_to_camera(p).z;
            let obs_h = &scene.observations.human[f];
            let obs_o = &scene.observations.object[f];
            let obs_depth: Vec<f64> = obs_h.iter().chain(obs_o).map(depth_of).collect();
            Ok(FrameCtx {
                t,
                maps,
                bias,
                theta: baseline.poses[f].to_tensor(),
                object_base: points_tensor(&centers),
                obs_human: points_tensor(obs_h),
                obs_object: points_tensor(obs_o),
                obs_depth: Tensor::from_vec(obs_depth.len(), 1, obs_depth)?,
                depth_axis: Tensor::from_vec(3, 1, vec![r[0], r[1], r[2]])?,
                depth_offset: cam.translation.z,
                contact: scene.contacts[f],
            })
        })
        .collect()
}

/// Phase 2: trains the interaction model on top of a frozen baseline.
pub fn train_hoi(
    scene: &SyntheticScene,
    baseline: &Baseline,
    model: &mut HoiModel,
    opts: &JointFitOptions,
    trace: &mut Vec<TraceRow>,
) -> Result<(), FitError> {
    opts.weights.validate()?;
    let ctxs = frame_contexts(scene, baseline, model)?;
    let velocities = velocity_stack(&baseline.tracks, &scene.grid)?;
    let (left, right) = scene.hand_indices()?;
    let rest = scene.skeleton.rest_positions()?;
    let rig = baseline.rig(scene);
    let mut adam = Adam::new(AdamConfig {
        lr: opts.hoi_lr,
        ..Default::default()
    });
    let inv = 1.0 / ctxs.len() as f64;
    for iter in 0..opts.hoi_iters {
        let mut tape = Tape::new();
        let vars = bind_model(&mut tape, model, opts.train_heads);
        let sp = StaticParts {
            rest: rest.clone(),
            points: tape.constant(rig.point_tensor()),
            weights: rig.weight_tensor(),
            alpha: tape.constant(Tensor::scalar(rig.alpha)),
            left: left.clone(),
            right: right.clone(),
        };
        let mut total: Option<Var> = None;
        for ctx in &ctxs {
            let l = frame_loss(&mut tape, scene, model, &vars, ctx, &velocities, &sp, &opts.weights)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        let Some(total) = total else { break };
        let loss = tape.scale(total, inv);
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Err(FitError::DivergedLoss { phase: "hoi", iter });
        }
        push_trace(trace, "hoi", iter, lv);
        let grads = tape.backward(loss)?.params();
        adam.set_lr(decayed(opts.hoi_lr, opts.hoi_lr_final, iter, opts.hoi_iters));
        let mut params = model_tensors_mut(model, opts.train_heads);
        adam.step(&mut params, &grads);
    }
    Ok(())
}

/// Phase 1 fits baselines; phase 2 (unless disabled) trains the
/// interaction model against 3D supervision with the baselines frozen.
pub fn fit_joint_hoi(scene: &SyntheticScene, opts: &JointFitOptions) -> Result<JointFit, FitError> {
    let mut trace = Vec::new();
    let (poses, alpha) = fit_poses(scene, &opts.pose, &mut trace)?;
    let obj = fit_object_track(&scene.observations.object, &scene.grid, &opts.object)?;
    trace.extend(obj.trace);
    let baseline = Baseline {
        poses,
        alpha,
        tracks: obj.tracks,
    };
    let base_metrics = phase_metrics(scene, &baseline, None)?;
    let (model, hoi_metrics) = if opts.no_hoi {
        (None, None)
    } else {
        let mut model = HoiModel::new(scene, &baseline, opts)?;
        train_hoi(scene, &baseline, &mut model, opts, &mut trace)?;
        let m = phase_metrics(scene, &baseline, Some(&model))?;
        (Some(model), Some(m))
    };
    Ok(JointFit {
        report: FitReport {
            scene_id: scene.id.clone(),
            options: opts.clone(),
            baseline: base_metrics,
            hoi: hoi_metrics,
        },
        baseline,
        model,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, SynthConfig};

    fn known_track(grid: &TimeGrid, seed: u64) -> ChsTrack {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut v = |r: f64| Vec3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r));
        let n = grid.n_keys();
        ChsTrack {
            positions: (0..n).map(|_| v(1.0)).collect(),
            velocities: (0..n).map(|_| v(0.3)).collect(),
            ..ChsTrack::stationary(n, Vec3::zeros())
        }
    }

    #[test]
    fn zero_iterations_returns_initialisation() {
        let grid = TimeGrid::with_stride(33, 4).unwrap();
        let tr = known_track(&grid, 1);
        let obs: Vec<Vec<Vec3>> = (0..33).map(|f| vec![chs_eval(&tr, f as f64, &grid).unwrap()]).collect();
        let opts = ObjectFitOptions {
            iters: 0,
            ..Default::default()
        };
        let fit = fit_object_track(&obs, &grid, &opts).unwrap();
        let frames: Vec<usize> = (0..33).collect();
        assert_eq!(fit.tracks, init_tracks(&obs, &grid, &frames));
        assert!(fit.trace.is_empty());
    }

    #[test]
    fn noiseless_track_recovered() {
        let grid = TimeGrid::with_stride(33, 4).unwrap();
        let tr = known_track(&grid, 2);
        let obs: Vec<Vec<Vec3>> = (0..33).map(|f| vec![chs_eval(&tr, f as f64, &grid).unwrap()]).collect();
        let fit = fit_object_track(&obs, &grid, &ObjectFitOptions::default()).unwrap();
        let all: Vec<usize> = (0..33).collect();
        let rmse = track_rmse(&fit.tracks, &grid, &obs, &all).unwrap();
        assert!(rmse < 1e-3, "{rmse}");
        let t = &fit.trace;
        assert!(t.windows(2).all(|w| w[1].best <= w[0].best));
    }

    #[test]
    fn insufficient_frames_rejected() {
        let grid = TimeGrid::with_stride(33, 4).unwrap();
        let obs = vec![vec![Vec3::zeros()]; 33];
        let opts = ObjectFitOptions {
            train_frames: Some(vec![0, 1, 2]),
            ..Default::default()
        };
        assert!(matches!(
            fit_object_track(&obs, &grid, &opts),
            Err(FitError::InsufficientData(_))
        ));
        assert!(matches!(
            fit_object_track(&obs[..10], &grid, &ObjectFitOptions::default()),
            Err(FitError::InsufficientData(_))
        ));
    }

    #[test]
    fn diverging_fit_reported() {
        let grid = TimeGrid::with_stride(33, 4).unwrap();
        let mut obs = vec![vec![Vec3::zeros()]; 33];
        obs[5][0].x = f64::NAN;
        assert!(matches!(
            fit_object_track(&obs, &grid, &ObjectFitOptions::default()),
            Err(FitError::DivergedLoss { .. })
        ));
    }

    #[test]
    fn pose_fit_tracks_noiseless_scene() {
        let scene = generate_scene(
            &SynthConfig {
                noise: 0.0,
                n_frames: 9,
                ..Default::default()
            },
            4,
        )
        .unwrap();
        let mut trace = Vec::new();
        let (poses, alpha) = fit_poses(&scene, &PoseFitOptions::default(), &mut trace).unwrap();
        let b = Baseline {
            poses,
            alpha,
            tracks: Vec::new(),
        };
        let mut worst: f64 = 0.0;
        for f in 0..scene.n_frames() {
            for (p, q) in b.human_points(&scene, f).unwrap().iter().zip(scene.gt_human_points(f).unwrap()) {
                worst = worst.max((p - q).norm());
            }
        }
        assert!(worst < 1e-2, "{worst}");
    }

    fn quick_opts() -> JointFitOptions {
        JointFitOptions {
            pose: PoseFitOptions {
                iters: 60,
                ..Default::default()
            },
            object: ObjectFitOptions {
                iters: 60,
                ..Default::default()
            },
            hoi_iters: 3,
            hexplane_resolution: 8,
            hexplane_channels: 4,
            ..Default::default()
        }
    }

    fn small_scene(seed: u64) -> SyntheticScene {
        generate_scene(
            &SynthConfig {
                n_frames: 9,
                ..Default::default()
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn frozen_zero_heads_reproduce_baseline() {
        let scene = small_scene(5);
        let opts = JointFitOptions {
            train_heads: false,
            ..quick_opts()
        };
        let fit = fit_joint_hoi(&scene, &opts).unwrap();
        assert_eq!(fit.report.hoi.as_ref(), Some(&fit.report.baseline));
        let model = fit.model.as_ref().unwrap();
        for f in 0..scene.n_frames() {
            let out = predict_frame(&scene, &fit.baseline, model, f).unwrap();
            assert_eq!(out.human_points, fit.baseline.human_points(&scene, f).unwrap());
            assert_eq!(out.object_points, fit.baseline.object_points(&scene, f).unwrap());
        }
    }

    #[test]
    fn joint_fit_is_deterministic() {
        let scene = small_scene(6);
        let a = fit_joint_hoi(&scene, &quick_opts()).unwrap();
        let b = fit_joint_hoi(&scene, &quick_opts()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn no_hoi_skips_phase_two() {
        let scene = small_scene(7);
        let fit = fit_joint_hoi(
            &scene,
            &JointFitOptions {
                no_hoi: true,
                ..quick_opts()
            },
        )
        .unwrap();
        assert!(fit.model.is_none() && fit.report.hoi.is_none());
        assert!(fit.trace.iter().all(|r| r.phase != "hoi"));
    }

    #[test]
    fn masked_scene_has_zero_residuals_at_init() {
        let mut scene = small_scene(8);
        for f in 0..scene.n_frames() {
            for p in scene.observations.object[f].iter_mut() {
                p.z += 5.0;
            }
        }
        let mut trace = Vec::new();
        let (poses, alpha) = fit_poses(&scene, &PoseFitOptions { iters: 5, ..Default::default() }, &mut trace).unwrap();
        let obj = fit_object_track(
            &scene.observations.object,
            &scene.grid,
            &ObjectFitOptions {
                iters: 5,
                ..Default::default()
            },
        )
        .unwrap();
        let b = Baseline {
            poses,
            alpha,
            tracks: obj.tracks,
        };
        let model = HoiModel::new(&scene, &b, &quick_opts()).unwrap();
        for f in 0..scene.n_frames() {
            let out = predict_frame(&scene, &b, &model, f).unwrap();
            assert!(out.delta_g.iter().all(|d| d.norm() < 1e-6));
            assert_eq!(out.theta_final, b.poses[f]);
        }
    }
}
