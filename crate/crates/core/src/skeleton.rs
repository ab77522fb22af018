//! Articulated avatar: joint tree, forward kinematics, linear blend
//! skinning and the per-point attribute head.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{UnitRotation, Vec3};
use crate::nn::{rodrigues, Mlp, NnError, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SkeletonError {
    #[error("malformed skeleton: {0}")]
    MalformedSkeleton(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unknown joint {0:?}")]
    UnknownJoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Joints receiving pose corrections, split into body and hand groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PosePartition {
    pub body: Vec<usize>,
    pub lhand: Vec<usize>,
    pub rhand: Vec<usize>,
}

impl PosePartition {
    /// Joint indices in `body, lhand, rhand` order.
    pub fn joints(&self) -> Vec<usize> {
        self.body
            .iter()
            .chain(&self.lhand)
            .chain(&self.rhand)
            .copied()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.body.len() + self.lhand.len() + self.rhand.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub names: Vec<String>,
    /// `None` only for the root (joint 0).
    pub parents: Vec<Option<usize>>,
    /// Joint position relative to its parent in the rest pose; the root
    /// offset is its world position.
    pub rest_offsets: Vec<Vec3>,
    pub partition: PosePartition,
}

/// World-from-joint rigid transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl JointTransform {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }
}

impl Skeleton {
    pub fn new(
        names: Vec<String>,
        parents: Vec<Option<usize>>,
        rest_offsets: Vec<Vec3>,
        partition: PosePartition,
    ) -> Result<Self, SkeletonError> {
        let s = Skeleton {
            names,
            parents,
            rest_offsets,
            partition,
        };
        s.validate()?;
        Ok(s)
    }

    /// Pelvis root with a shoulder, elbow and hand on each side, arms
    /// along ±x in the rest pose.
    pub fn upper_body() -> Self {
        let names = [
            "pelvis",
            "left_shoulder",
            "left_elbow",
            "left_hand",
            "right_shoulder",
            "right_elbow",
            "right_hand",
        ];
        Skeleton::new(
            names.iter().map(|s| s.to_string()).collect(),
            vec![None, Some(0), Some(1), Some(2), Some(0), Some(4), Some(5)],
            vec![
                Vec3::new(0.0, 0.9, 0.0),
                Vec3::new(0.18, 0.45, 0.0),
                Vec3::new(0.28, 0.0, 0.0),
                Vec3::new(0.25, 0.0, 0.0),
                Vec3::new(-0.18, 0.45, 0.0),
                Vec3::new(-0.28, 0.0, 0.0),
                Vec3::new(-0.25, 0.0, 0.0),
            ],
            PosePartition {
                body: vec![1, 2, 4, 5],
                lhand: vec![3],
                rhand: vec![6],
            },
        )
        .expect("built-in skeleton is valid")
    }

    pub fn n_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn joint_index(&self, name: &str) -> Result<usize, SkeletonError> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| SkeletonError::UnknownJoint(name.to_string()))
    }

    pub fn validate(&self) -> Result<(), SkeletonError> {
        let j = self.parents.len();
        let bad = |m: String| Err(SkeletonError::MalformedSkeleton(m));
        if j == 0 {
            return bad("no joints".into());
        }
        if self.names.len() != j || self.rest_offsets.len() != j {
            return bad(format!(
                "{} parents, {} names, {} offsets",
                j,
                self.names.len(),
                self.rest_offsets.len()
            ));
        }
        if self.parents[0].is_some() {
            return bad("joint 0 must be the root".into());
        }
        for (i, p) in self.parents.iter().enumerate().skip(1) {
            match p {
                None => return bad(format!("joint {i} has no parent")),
                Some(p) if *p >= j || *p == i => return bad(format!("joint {i} has bad parent {p}")),
                _ => {}
            }
        }
        self.topological_order()?;
        for name in ["pelvis", "left_hand", "right_hand"] {
            self.joint_index(name)
                .map_err(|_| SkeletonError::MalformedSkeleton(format!("missing joint {name:?}")))?;
        }
        let mut seen = vec![false; j];
        for &i in &self.partition.joints() {
            if i == 0 || i >= j || seen[i] {
                return bad(format!("pose partition entry {i} is the root, out of range or repeated"));
            }
            seen[i] = true;
        }
        if seen.iter().skip(1).any(|s| !s) {
            return bad("pose partition must cover every non-root joint".into());
        }
        Ok(())
    }

    /// Joints ordered so every parent precedes its children.
    pub fn topological_order(&self) -> Result<Vec<usize>, SkeletonError> {
        let j = self.parents.len();
        let mut depth = vec![usize::MAX; j];
        for start in 0..j {
            let mut chain = Vec::new();
            let mut cur = start;
            while depth[cur] == usize::MAX {
                if chain.len() > j {
                    return Err(SkeletonError::MalformedSkeleton("parent cycle".into()));
                }
                chain.push(cur);
                match self.parents.get(cur).copied().flatten() {
                    Some(p) if p < j => cur = p,
                    Some(p) => {
                        return Err(SkeletonError::MalformedSkeleton(format!("bad parent {p}")));
                    }
                    None => {
                        if cur != 0 {
                            return Err(SkeletonError::MalformedSkeleton(format!("joint {cur} has no parent")));
                        }
                        depth[0] = 0;
                        chain.pop();
                        break;
                    }
                }
            }
            let mut d = depth[cur];
            for &c in chain.iter().rev() {
                d += 1;
                depth[c] = d;
            }
        }
        let mut order: Vec<usize> = (0..j).collect();
        order.sort_by_key(|&i| (depth[i], i));
        Ok(order)
    }

    /// Rest-pose world position of every joint.
    pub fn rest_positions(&self) -> Result<Vec<Vec3>, SkeletonError> {
        let mut pos = vec![Vec3::zeros(); self.n_joints()];
        for i in self.topological_order()? {
            pos[i] = match self.parents[i] {
                Some(p) => pos[p] + self.rest_offsets[i],
                None => self.rest_offsets[i],
            };
        }
        Ok(pos)
    }

    /// Summed bone lengths from the hand up to (excluding) the joint that
    /// hangs off the root.
    pub fn arm_length(&self, hand: &str) -> Result<f64, SkeletonError> {
        let mut cur = self.joint_index(hand)?;
        let mut len = 0.0;
        while let Some(p) = self.parents[cur] {
            if self.parents[p].is_none() {
                break;
            }
            len += self.rest_offsets[cur].norm();
            cur = p;
        }
        Ok(len)
    }
}

/// Axis-angle rotation per joint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub theta: Vec<Vec3>,
}

impl PoseParams {
    pub fn zeros(n_joints: usize) -> Self {
        PoseParams {
            theta: vec![Vec3::zeros(); n_joints],
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(self.theta.len(), 3, |j, c| self.theta[j][c])
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        PoseParams {
            theta: (0..t.rows())
                .map(|j| Vec3::new(t.get(j, 0), t.get(j, 1), t.get(j, 2)))
                .collect(),
        }
    }

    /// Values of the body / left-hand / right-hand groups, flattened.
    pub fn partitioned(&self, partition: &PosePartition) -> Vec<f64> {
        partition
            .joints()
            .iter()
            .flat_map(|&j| [self.theta[j].x, self.theta[j].y, self.theta[j].z])
            .collect()
    }

    /// `θ + Δθ` where `delta` lists 3 values per partition joint in
    /// `body, lhand, rhand` order.
    pub fn add_partitioned(&self, partition: &PosePartition, delta: &[f64]) -> Result<PoseParams, SkeletonError> {
        let joints = partition.joints();
        if delta.len() != 3 * joints.len() {
            return Err(SkeletonError::DimensionMismatch(format!(
                "pose delta has {} values, partition needs {}",
                delta.len(),
                3 * joints.len()
            )));
        }
        let mut out = self.clone();
        for (i, &j) in joints.iter().enumerate() {
            out.theta[j] += Vec3::new(delta[3 * i], delta[3 * i + 1], delta[3 * i + 2]);
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Per-point appearance produced by the attribute head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointAttributes {
    pub color: Vec<Vec3>,
    pub opacity: Vec<f64>,
    pub offsets: Vec<Vec3>,
    pub rotation: Vec<UnitRotation>,
    pub scale: Vec<Vec3>,
    /// `V × J`, rows sum to one.
    pub weights: Vec<Vec<f64>>,
}

/// Canonical points, skinning weights and global scale of an avatar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvatarRig {
    pub canonical: Vec<Vec3>,
    /// Per-point canonical offsets `ΔP_c`.
    pub offsets: Vec<Vec3>,
    /// Dense `V × J` skinning weights.
    pub weights: Vec<Vec<f64>>,
    pub alpha: f64,
    #[serde(default)]
    pub colors: Vec<Vec3>,
}

impl AvatarRig {
    pub fn n_points(&self) -> usize {
        self.canonical.len()
    }

    pub fn validate(&self, skel: &Skeleton) -> Result<(), SkeletonError> {
        let v = self.canonical.len();
        let j = skel.n_joints();
        if self.offsets.len() != v || self.weights.len() != v {
            return Err(SkeletonError::DimensionMismatch(format!(
                "{v} points, {} offsets, {} weight rows",
                self.offsets.len(),
                self.weights.len()
            )));
        }
        if let Some(r) = self.weights.iter().find(|r| r.len() != j) {
            return Err(SkeletonError::DimensionMismatch(format!(
                "weight row has {} entries for {j} joints",
                r.len()
            )));
        }
        for (i, r) in self.weights.iter().enumerate() {
            let s: f64 = r.iter().sum();
            if (s - 1.0).abs() > 1e-9 || r.iter().any(|w| *w < 0.0) {
                return Err(SkeletonError::DimensionMismatch(format!(
                    "weight row {i} is not a distribution (sum {s})"
                )));
            }
        }
        if !(self.alpha > 0.0) {
            return Err(SkeletonError::DimensionMismatch("alpha must be positive".into()));
        }
        Ok(())
    }

    pub fn weight_tensor(&self) -> Tensor {
        let j = self.weights.first().map_or(0, Vec::len);
        Tensor::from_fn(self.weights.len(), j, |i, k| self.weights[i][k])
    }

    /// `P_c + ΔP_c` as a `V × 3` tensor.
    pub fn point_tensor(&self) -> Tensor {
        Tensor::from_fn(self.canonical.len(), 3, |i, c| self.canonical[i][c] + self.offsets[i][c])
    }

    /// Index of the joint each point is most strongly bound to.
    pub fn dominant_joint(&self) -> Vec<usize> {
        self.weights
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::MIN), |b, (k, &w)| if w > b.1 { (k, w) } else { b })
                    .0
            })
            .collect()
    }
}

/// Per-joint world-from-joint transforms for pose `θ`.
pub fn forward_kinematics(skel: &Skeleton, pose: &PoseParams) -> Result<Vec<JointTransform>, SkeletonError> {
    let order = skel.topological_order()?;
    if pose.theta.len() != skel.n_joints() {
        return Err(SkeletonError::DimensionMismatch(format!(
            "pose has {} joints, skeleton {}",
            pose.theta.len(),
            skel.n_joints()
        )));
    }
    let mut out = vec![
        JointTransform {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        };
        skel.n_joints()
    ];
    for j in order {
        let t = pose.theta[j];
        let r = rodrigues([t.x, t.y, t.z]);
        let local = Matrix3::from_row_slice(&r);
        let (pr, pt) = match skel.parents[j] {
            Some(p) => (out[p].rotation, out[p].translation),
            None => (Matrix3::identity(), Vec3::zeros()),
        };
        out[j] = JointTransform {
            rotation: pr * local,
            translation: pr * skel.rest_offsets[j] + pt,
        };
    }
    Ok(out)
}

/// Joint rotations (`3 × 3`) and positions (`1 × 3`) recorded on a tape.
pub struct TapeJoints {
    pub rotations: Vec<Var>,
    pub positions: Vec<Var>,
}

/// Forward kinematics on the tape from a `J × 3` pose node.
pub fn forward_kinematics_tape(tape: &mut Tape, skel: &Skeleton, theta: Var) -> Result<TapeJoints, SkeletonError> {
    let order = skel.topological_order()?;
    let j = skel.n_joints();
    if tape.shape(theta) != [j, 3] {
        return Err(SkeletonError::DimensionMismatch(format!(
            "pose node {:?} for {j} joints",
            tape.shape(theta)
        )));
    }
    let rots = tape.axis_angle(theta)?;
    let mut rotations: Vec<Option<Var>> = vec![None; j];
    let mut positions: Vec<Option<Var>> = vec![None; j];
    for i in order {
        let row = tape.gather_rows(rots, &[i])?;
        let local = tape.reshape(row, 3, 3)?;
        let off = tape.constant(Tensor::row(skel.rest_offsets[i].iter().copied().collect()));
        match skel.parents[i] {
            None => {
                rotations[i] = Some(local);
                positions[i] = Some(off);
            }
            Some(p) => {
                let (pr, pt) = (rotations[p].expect("parent first"), positions[p].expect("parent first"));
                rotations[i] = Some(tape.matmul(pr, local)?);
                let prt = tape.transpose(pr);
                let moved = tape.matmul(off, prt)?;
                positions[i] = Some(tape.add(moved, pt)?);
            }
        }
    }
    Ok(TapeJoints {
        rotations: rotations.into_iter().map(|v| v.expect("all joints visited")).collect(),
        positions: positions.into_iter().map(|v| v.expect("all joints visited")).collect(),
    })
}

/// `α · Σ_j W_ij · T_j T̄_j⁻¹ x_i` on the tape.
///
/// `points` is `V × 3` (canonical points plus offsets), `weights` is the
/// constant `V × J` skinning matrix and `alpha` a `1 × 1` node.
pub fn lbs_tape(
    tape: &mut Tape,
    skel: &Skeleton,
    rest: &[Vec3],
    points: Var,
    weights: &Tensor,
    theta: Var,
    alpha: Var,
) -> Result<(Var, TapeJoints), SkeletonError> {
    let [v, _] = tape.shape(points);
    if weights.rows() != v || weights.cols() != skel.n_joints() {
        return Err(SkeletonError::DimensionMismatch(format!(
            "weights {:?} for {v} points and {} joints",
            weights.shape(),
            skel.n_joints()
        )));
    }
    let joints = forward_kinematics_tape(tape, skel, theta)?;
    // Blend displacements x + Σ_j W_ij [(R_j − I)(x − r_j) + (t_j − r_j)],
    // equal to Σ_j W_ij (R_j (x − r_j) + t_j) for row-stochastic W and
    // exactly x in the rest pose.
    let eye = tape.constant(Tensor::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.0 }));
    let mut acc: Option<Var> = None;
    for k in 0..skel.n_joints() {
        let col = Tensor::from_fn(v, 1, |i, _| weights.get(i, k));
        if col.data().iter().all(|w| *w == 0.0) {
            continue;
        }
        let col = tape.constant(col);
        let rest_row = Tensor::row(rest[k].iter().copied().collect());
        let neg_rest = tape.constant(rest_row.map(|x| -x));
        let rest_row = tape.constant(rest_row);
        let local = tape.add_row(points, neg_rest)?;
        let bend = tape.sub(joints.rotations[k], eye)?;
        let bend_t = tape.transpose(bend);
        let turned = tape.matmul(local, bend_t)?;
        let shift = tape.sub(joints.positions[k], rest_row)?;
        let disp = tape.add_row(turned, shift)?;
        let weighted = tape.mul_col(disp, col)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, weighted)?,
            None => weighted,
        });
    }
    let posed = match acc {
        Some(a) => tape.add(points, a)?,
        None => points,
    };
    Ok((tape.mul_scalar(posed, alpha)?, joints))
}

/// Deformed avatar points for pose `θ`.
pub fn lbs_deform(rig: &AvatarRig, skel: &Skeleton, pose: &PoseParams) -> Result<Vec<Vec3>, SkeletonError> {
    rig.validate(skel)?;
    if pose.theta.len() != skel.n_joints() {
        return Err(SkeletonError::DimensionMismatch(format!(
            "pose has {} joints, skeleton {}",
            pose.theta.len(),
            skel.n_joints()
        )));
    }
    let rest = skel.rest_positions()?;
    let mut tape = Tape::new();
    let pts = tape.constant(rig.point_tensor());
    let theta = tape.constant(pose.to_tensor());
    let alpha = tape.constant(Tensor::scalar(rig.alpha));
    let (out, _) = lbs_tape(&mut tape, skel, &rest, pts, &rig.weight_tensor(), theta, alpha)?;
    let t = tape.value(out);
    Ok((0..t.rows()).map(|i| Vec3::new(t.get(i, 0), t.get(i, 1), t.get(i, 2))).collect())
}

/// Output width of an attribute head for `n_joints` joints.
pub fn attribute_width(n_joints: usize) -> usize {
    3 + 1 + 3 + 4 + 3 + n_joints
}

/// Decodes per-point attributes from head outputs: sigmoid colour and
/// opacity, raw offsets, identity-centred unit quaternion, exponential
/// scale and softmax skinning weights.
pub fn avatar_attributes(head: &Mlp, features: &Tensor, n_joints: usize) -> Result<PointAttributes, SkeletonError> {
    if head.out_width() != attribute_width(n_joints) {
        return Err(SkeletonError::DimensionMismatch(format!(
            "head outputs {} values, need {}",
            head.out_width(),
            attribute_width(n_joints)
        )));
    }
    let raw = head.forward(features)?;
    let sig = crate::nn::sigmoid;
    let mut attrs = PointAttributes {
        color: Vec::new(),
        opacity: Vec::new(),
        offsets: Vec::new(),
        rotation: Vec::new(),
        scale: Vec::new(),
        weights: Vec::new(),
    };
    for i in 0..raw.rows() {
        let r = raw.row_slice(i);
        attrs.color.push(Vec3::new(sig(r[0]), sig(r[1]), sig(r[2])));
        attrs.opacity.push(sig(r[3]));
        attrs.offsets.push(Vec3::new(r[4], r[5], r[6]));
        attrs.rotation.push(UnitRotation::new(1.0 + r[7], r[8], r[9], r[10]));
        attrs.scale.push(Vec3::new(r[11].exp(), r[12].exp(), r[13].exp()));
        let logits = &r[14..];
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let s: f64 = e.iter().sum();
        attrs.weights.push(e.iter().map(|x| x / s).collect());
    }
    Ok(attrs)
}
