//! Seeded ground-truth scenes: an upper-body avatar manipulating a rigid
//! box, with per-frame cameras, contact annotations and noisy point
//! observations.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{CameraPose, Intrinsics, UnitRotation, Vec3};
use crate::hexplane::{PartPartition, DEFAULT_PARTS};
use crate::skeleton::{forward_kinematics, lbs_deform, AvatarRig, PoseParams, Skeleton, SkeletonError};
use crate::spline::{TimeGrid, DEFAULT_KEY_STRIDE};

pub const IMAGE_SIZE: usize = 128;
pub const FOCAL: f64 = 200.0;
/// Half extents of the manipulated box.
pub const BOX_HALF: [f64; 3] = [0.06, 0.04, 0.05];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Template {
    /// Pick up a resting box, move it, put it down.
    Carry,
    /// Start holding the box, set it down, withdraw the hand.
    Place,
    /// Hold the box throughout while the arm swings.
    Swing,
}

impl Template {
    pub fn name(self) -> &'static str {
        match self {
            Template::Carry => "carry",
            Template::Place => "place",
            Template::Swing => "swing",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub template: Template,
    pub n_frames: usize,
    pub key_stride: usize,
    pub n_points: usize,
    pub n_parts: usize,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            template: Template::Carry,
            n_frames: 33,
            key_stride: DEFAULT_KEY_STRIDE,
            n_points: 60,
            n_parts: DEFAULT_PARTS,
            noise: 0.01,
        }
    }
}

impl SynthConfig {
    pub fn with_template(template: Template) -> Self {
        SynthConfig {
            template,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.key_stride == 0 || self.n_frames < 2 * self.key_stride {
            return Err(SynthError::InvalidConfig(format!(
                "{} frames with key stride {}",
                self.n_frames, self.key_stride
            )));
        }
        if (self.n_frames - 1) % self.key_stride != 0 {
            return Err(SynthError::InvalidConfig(format!(
                "n_frames - 1 = {} is not a multiple of the key stride {}",
                self.n_frames - 1,
                self.key_stride
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(SynthError::InvalidConfig(format!("noise {}", self.noise)));
        }
        if self.n_parts == 0 || self.n_points < self.n_parts {
            return Err(SynthError::InvalidConfig(format!(
                "{} points cannot fill {} parts",
                self.n_points, self.n_parts
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectPose {
    pub position: Vec3,
    pub rotation: UnitRotation,
}

/// Noisy per-frame point observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observations {
    /// `N_f × V` avatar points.
    pub human: Vec<Vec<Vec3>>,
    /// `N_f × G` object points.
    pub object: Vec<Vec<Vec3>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub id: String,
    pub config: SynthConfig,
    pub grid: TimeGrid,
    pub skeleton: Skeleton,
    pub rig: AvatarRig,
    pub parts: PartPartition,
    pub gt_poses: Vec<PoseParams>,
    pub gt_object: Vec<ObjectPose>,
    /// Object points in the object frame.
    pub object_points: Vec<Vec3>,
    /// World-space offset from the right hand to the object centre while
    /// in contact.
    pub grip_offset: Vec3,
    pub cameras: Vec<CameraPose>,
    pub image_size: [usize; 2],
    pub contacts: Vec<bool>,
    pub observations: Observations,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticScene {
    pub fn n_frames(&self) -> usize {
        self.grid.n_frames()
    }

    pub fn gt_object_points(&self, frame: usize) -> Vec<Vec3> {
        let p = &self.gt_object[frame];
        self.object_points.iter().map(|q| p.position + p.rotation.rotate(q)).collect()
    }

    pub fn gt_human_points(&self, frame: usize) -> Result<Vec<Vec3>, SkeletonError> {
        lbs_deform(&self.rig, &self.skeleton, &self.gt_poses[frame])
    }

    pub fn contact_frames(&self) -> Vec<usize> {
        (0..self.contacts.len()).filter(|&f| self.contacts[f]).collect()
    }

    /// Avatar points bound mostly to each hand: `(left, right)`.
    pub fn hand_indices(&self) -> Result<(Vec<usize>, Vec<usize>), SkeletonError> {
        let l = self.skeleton.joint_index("left_hand")?;
        let r = self.skeleton.joint_index("right_hand")?;
        let dom = self.rig.dominant_joint();
        Ok((
            (0..dom.len()).filter(|&i| dom[i] == l).collect(),
            (0..dom.len()).filter(|&i| dom[i] == r).collect(),
        ))
    }
}

/// 8 box corners followed by 6 face centres.
pub fn box_points(half: [f64; 3]) -> Vec<Vec3> {
    let [a, b, c] = half;
    let mut pts = Vec::with_capacity(14);
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                pts.push(Vec3::new(sx * a, sy * b, sz * c));
            }
        }
    }
    for (i, h) in [a, b, c].into_iter().enumerate() {
        for s in [-1.0, 1.0] {
            let mut p = Vec3::zeros();
            p[i] = s * h;
            pts.push(p);
        }
    }
    pts
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Right-arm and root state: root yaw, shoulder (z, y), elbow y.
#[derive(Clone, Copy)]
struct ArmKey {
    yaw: f64,
    shoulder_z: f64,
    shoulder_y: f64,
    elbow_y: f64,
}

impl ArmKey {
    fn lerp(&self, o: &ArmKey, u: f64) -> ArmKey {
        let l = |a: f64, b: f64| a + (b - a) * u;
        ArmKey {
            yaw: l(self.yaw, o.yaw),
            shoulder_z: l(self.shoulder_z, o.shoulder_z),
            shoulder_y: l(self.shoulder_y, o.shoulder_y),
            elbow_y: l(self.elbow_y, o.elbow_y),
        }
    }
}

/// Piecewise smoothstep blend through `(s, key)` knots; zero velocity at
/// every knot, so the motion is C1.
fn eased(knots: &[(f64, ArmKey)], s: f64) -> ArmKey {
    if s <= knots[0].0 {
        return knots[0].1;
    }
    for w in knots.windows(2) {
        let (s0, k0) = w[0];
        let (s1, k1) = w[1];
        if s <= s1 {
            return k0.lerp(&k1, smoothstep((s - s0) / (s1 - s0)));
        }
    }
    knots[knots.len() - 1].1
}

struct Motion {
    knots: Vec<(f64, ArmKey)>,
    swing: f64,
    contact: (f64, f64),
}

fn motion(template: Template, jitter: [f64; 4]) -> Motion {
    let rest = ArmKey {
        yaw: 0.0,
        shoulder_z: 1.35,
        shoulder_y: 0.2,
        elbow_y: 0.4,
    };
    let hold = ArmKey {
        yaw: 0.05 + jitter[0],
        shoulder_z: 1.25 + jitter[1],
        shoulder_y: 0.35,
        elbow_y: 1.35 + jitter[2],
    };
    let lifted = ArmKey {
        yaw: -0.1 + jitter[3],
        shoulder_z: 1.0 + jitter[2],
        shoulder_y: 0.1 + jitter[0],
        elbow_y: 1.55 + jitter[1],
    };
    match template {
        Template::Carry => Motion {
            knots: vec![(0.0, rest), (0.25, hold), (0.75, lifted), (1.0, rest)],
            swing: 0.0,
            contact: (0.25, 0.75),
        },
        Template::Place => Motion {
            knots: vec![(0.0, lifted), (0.5, hold), (1.0, rest)],
            swing: 0.0,
            contact: (0.0, 0.5),
        },
        Template::Swing => Motion {
            knots: vec![(0.0, hold), (1.0, hold)],
            swing: 0.15 + jitter[3].abs(),
            contact: (0.0, 1.0),
        },
    }
}

fn pose_at(skel: &Skeleton, m: &Motion, s: f64, left_phase: f64) -> Result<PoseParams, SkeletonError> {
    let k = eased(&m.knots, s);
    let mut pose = PoseParams::zeros(skel.n_joints());
    pose.theta[0] = Vec3::new(0.0, k.yaw, 0.0);
    let rs = skel.joint_index("right_shoulder")?;
    let re = skel.joint_index("right_elbow")?;
    let ls = skel.joint_index("left_shoulder")?;
    let le = skel.joint_index("left_elbow")?;
    let swing = m.swing * (2.0 * PI * s).sin();
    pose.theta[rs] = Vec3::new(0.0, k.shoulder_y + swing, k.shoulder_z);
    pose.theta[re] = Vec3::new(0.0, k.elbow_y, 0.0);
    let a = 2.0 * PI * s + left_phase;
    pose.theta[ls] = Vec3::new(0.0, -0.2 + 0.1 * a.sin(), -1.3 + 0.08 * a.cos());
    pose.theta[le] = Vec3::new(0.0, -0.5 - 0.1 * a.sin(), 0.0);
    Ok(pose)
}

/// Samples `n` avatar points along the bones with skinning weights that
/// blend from a bone's parent joint into its child.
fn build_rig(skel: &Skeleton, n: usize, rng: &mut ChaCha8Rng) -> Result<AvatarRig, SkeletonError> {
    let rest = skel.rest_positions()?;
    let j = skel.n_joints();
    let idx = |name: &str| skel.joint_index(name);
    let (ls, le, lh) = (idx("left_shoulder")?, idx("left_elbow")?, idx("left_hand")?);
    let (rs, re, rh) = (idx("right_shoulder")?, idx("right_elbow")?, idx("right_hand")?);
    // (joint, child, segment kind) in a repeating 30-slot pattern.
    #[derive(Clone, Copy)]
    enum Seg {
        Torso,
        Bone(usize, usize),
        Hand(usize, usize),
    }
    let mut pattern = vec![Seg::Torso; 8];
    for (s, e, h) in [(ls, le, lh), (rs, re, rh)] {
        pattern.extend([Seg::Bone(s, e); 4]);
        pattern.extend([Seg::Bone(e, h); 4]);
        pattern.extend([Seg::Hand(h, e); 3]);
    }
    let colors = [Vec3::new(0.8, 0.6, 0.5), Vec3::new(0.3, 0.4, 0.8), Vec3::new(0.9, 0.8, 0.6)];
    let mut canonical = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut point_colors = Vec::with_capacity(n);
    let jitter = |rng: &mut ChaCha8Rng, r: f64| {
        Vec3::new(rng.random_range(-r..=r), rng.random_range(-r..=r), rng.random_range(-r..=r))
    };
    for i in 0..n {
        let mut w = vec![0.0; j];
        let (p, c) = match pattern[i % pattern.len()] {
            Seg::Torso => {
                let s: f64 = rng.random_range(0.0..=1.0);
                let x: f64 = rng.random_range(-0.15..=0.15);
                w[0] = 1.0;
                (rest[0] + Vec3::new(x, 0.45 * s, 0.0) + jitter(rng, 0.04), colors[0])
            }
            Seg::Bone(a, b) => {
                let s: f64 = rng.random_range(0.0..=1.0);
                let blend = 0.5 * s * s;
                w[a] = 1.0 - blend;
                w[b] = blend;
                (rest[a] + (rest[b] - rest[a]) * s + jitter(rng, 0.05), colors[1])
            }
            Seg::Hand(h, e) => {
                let dir = (rest[h] - rest[e]).normalize();
                let s: f64 = rng.random_range(0.0..=0.08);
                w[h] = 1.0;
                (rest[h] + dir * s + jitter(rng, 0.035), colors[2])
            }
        };
        canonical.push(p);
        weights.push(w);
        point_colors.push(c);
    }
    Ok(AvatarRig {
        offsets: vec![Vec3::zeros(); n],
        canonical,
        weights,
        alpha: 1.0,
        colors: point_colors,
    })
}

/// Deterministic in `(config, seed)`.
pub fn generate_scene(config: &SynthConfig, seed: u64) -> Result<SyntheticScene, SynthError> {
    config.validate()?;
    let grid = TimeGrid::with_stride(config.n_frames, config.key_stride)
        .map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let skel = Skeleton::upper_body();
    let rig = build_rig(&skel, config.n_points, &mut rng)?;

    let jitter: [f64; 4] = std::array::from_fn(|_| rng.random_range(-0.08..=0.08));
    let left_phase = rng.random_range(0.0..2.0 * PI);
    let m = motion(config.template, jitter);
    let grip_offset = Vec3::new(0.0, -0.02, 0.07);
    let object_rotation = UnitRotation::rot_y(rng.random_range(-0.4..=0.4));
    let rh = skel.joint_index("right_hand")?;

    let n_f = config.n_frames;
    let s_of = |f: usize| f as f64 / (n_f - 1) as f64;
    let gt_poses = (0..n_f)
        .map(|f| pose_at(&skel, &m, s_of(f), left_phase))
        .collect::<Result<Vec<_>, _>>()?;
    let hand_at = |s: f64| -> Result<Vec3, SkeletonError> {
        let pose = pose_at(&skel, &m, s, left_phase)?;
        Ok(forward_kinematics(&skel, &pose)?[rh].translation)
    };
    let (c0, c1) = m.contact;
    let span = (n_f - 1) as f64;
    let contacts: Vec<bool> = (0..n_f)
        .map(|f| f as f64 >= c0 * span && f as f64 <= c1 * span)
        .collect();
    let gt_object = (0..n_f)
        .map(|f| {
            let s = s_of(f).clamp(c0, c1);
            Ok(ObjectPose {
                position: hand_at(s)? + grip_offset,
                rotation: object_rotation,
            })
        })
        .collect::<Result<Vec<_>, SkeletonError>>()?;

    let parts = {
        let dom = rig.dominant_joint();
        let mut order: Vec<usize> = (0..rig.n_points()).collect();
        order.sort_by_key(|&i| (dom[i], i));
        PartPartition::contiguous(&order, config.n_parts).map_err(|e| SynthError::InvalidConfig(e.to_string()))?
    };

    let half = IMAGE_SIZE as f64 / 2.0;
    let intr = Intrinsics {
        fx: FOCAL,
        fy: FOCAL,
        cx: half,
        cy: half,
    };
    let orbit = rng.random_range(-0.3..=0.3);
    let cameras = (0..n_f)
        .map(|f| {
            let a = orbit + 0.2 * (s_of(f) - 0.5);
            let eye = Vec3::new(3.0 * a.sin(), 1.3, 3.0 * a.cos());
            CameraPose::look_at(eye, Vec3::new(0.0, 1.1, 0.0), Vec3::new(0.0, 1.0, 0.0), intr)
                .map_err(|e| SynthError::InvalidConfig(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let object_points = box_points(BOX_HALF);
    let mut scene = SyntheticScene {
        id: format!("{}-{seed}", config.template.name()),
        config: config.clone(),
        grid,
        skeleton: skel,
        rig,
        parts,
        gt_poses,
        gt_object,
        object_points,
        grip_offset,
        cameras,
        image_size: [IMAGE_SIZE, IMAGE_SIZE],
        contacts,
        observations: Observations {
            human: Vec::new(),
            object: Vec::new(),
        },
        noise: config.noise,
        seed,
    };

    let normal = Normal::new(0.0, config.noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let noisy = |p: Vec3, rng: &mut ChaCha8Rng| {
        if config.noise == 0.0 {
            p
        } else {
            p + Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng))
        }
    };
    for f in 0..n_f {
        let h = scene.gt_human_points(f)?;
        let o = scene.gt_object_points(f);
        scene.observations.human.push(h.into_iter().map(|p| noisy(p, &mut rng)).collect());
        scene.observations.object.push(o.into_iter().map(|p| noisy(p, &mut rng)).collect());
    }
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let c = SynthConfig::default();
        let a = generate_scene(&c, 7).unwrap();
        let b = generate_scene(&c, 7).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let d = generate_scene(&c, 8).unwrap();
        assert_ne!(a.observations, d.observations);
    }

    #[test]
    fn noiseless_place_observes_ground_truth() {
        let c = SynthConfig {
            noise: 0.0,
            ..SynthConfig::with_template(Template::Place)
        };
        let s = generate_scene(&c, 1).unwrap();
        for f in 0..s.n_frames() {
            assert_eq!(s.observations.object[f], s.gt_object_points(f));
            assert_eq!(s.observations.human[f], s.gt_human_points(f).unwrap());
        }
    }

    #[test]
    fn carry_contact_frames_hold_grip_offset() {
        let s = generate_scene(&SynthConfig::default(), 3).unwrap();
        let rh = s.skeleton.joint_index("right_hand").unwrap();
        let contact = s.contact_frames();
        assert_eq!(contact.first(), Some(&8));
        assert_eq!(contact.last(), Some(&24));
        for f in contact {
            let hand = forward_kinematics(&s.skeleton, &s.gt_poses[f]).unwrap()[rh].translation;
            let d = (s.gt_object[f].position - hand).norm();
            assert!((d - s.grip_offset.norm()).abs() < 1e-12, "{d}");
        }
    }

    #[test]
    fn contact_object_stays_within_arm_reach_of_pelvis() {
        for t in [Template::Carry, Template::Place, Template::Swing] {
            for seed in 0..5 {
                let s = generate_scene(&SynthConfig::with_template(t), seed).unwrap();
                let d_th = s.skeleton.arm_length("right_hand").unwrap();
                for f in s.contact_frames() {
                    let pelvis = forward_kinematics(&s.skeleton, &s.gt_poses[f]).unwrap()[0].translation;
                    assert!((s.gt_object[f].position - pelvis).norm() < d_th, "{t:?} {seed} {f}");
                }
            }
        }
    }

    #[test]
    fn object_motion_is_c1() {
        // Central second differences stay bounded by the smooth motion.
        let c = SynthConfig {
            n_frames: 257,
            noise: 0.0,
            ..Default::default()
        };
        let s = generate_scene(&c, 2).unwrap();
        let h = 1.0 / 256.0;
        let mut max_jump: f64 = 0.0;
        for f in 1..256 {
            let v0 = (s.gt_object[f].position - s.gt_object[f - 1].position) / h;
            let v1 = (s.gt_object[f + 1].position - s.gt_object[f].position) / h;
            max_jump = max_jump.max((v1 - v0).norm());
        }
        assert!(max_jump < 0.2, "{max_jump}");
    }

    #[test]
    fn rig_and_partition_valid() {
        let s = generate_scene(&SynthConfig::default(), 0).unwrap();
        s.rig.validate(&s.skeleton).unwrap();
        s.parts.validate(s.rig.n_points()).unwrap();
        assert_eq!(s.parts.n_parts(), 16);
        assert_eq!(s.object_points.len(), 14);
        let (l, r) = s.hand_indices().unwrap();
        assert_eq!((l.len(), r.len()), (6, 6));
        for cam in &s.cameras {
            for p in s.gt_object_points(0) {
                let (u, v, _) = cam.project(&p).unwrap();
                assert!((0.0..128.0).contains(&u) && (0.0..128.0).contains(&v));
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        for c in [
            SynthConfig {
                n_frames: 5,
                ..Default::default()
            },
            SynthConfig {
                n_frames: 34,
                ..Default::default()
            },
            SynthConfig {
                noise: -1.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(generate_scene(&c, 0), Err(SynthError::InvalidConfig(_))));
        }
    }
}
