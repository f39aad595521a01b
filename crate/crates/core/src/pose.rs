//! 3D skeletal keypoints: pinhole projection, an analytic pose prior,
//! lifting from 2D detections and head orientation.
//!
//! World frame: z up, metres. Camera frame: x right, y down, z forward.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::numerics::{Graph, Tensor, Var};

pub const NUM_JOINTS: usize = 33;
pub const KEYPOINT_DIM: usize = 3 * NUM_JOINTS;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "nose",
    "left_eye_inner",
    "left_eye",
    "left_eye_outer",
    "right_eye_inner",
    "right_eye",
    "right_eye_outer",
    "left_ear",
    "right_ear",
    "mouth_left",
    "mouth_right",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_pinky",
    "right_pinky",
    "left_index",
    "right_index",
    "left_thumb",
    "right_thumb",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
    "left_heel",
    "right_heel",
    "left_foot_index",
    "right_foot_index",
];

pub const NOSE: usize = 0;
pub const LEFT_EYE: usize = 2;
pub const RIGHT_EYE: usize = 5;
pub const LEFT_EAR: usize = 7;
pub const RIGHT_EAR: usize = 8;
pub const LEFT_SHOULDER: usize = 11;
pub const RIGHT_SHOULDER: usize = 12;
pub const LEFT_ELBOW: usize = 13;
pub const RIGHT_ELBOW: usize = 14;
pub const LEFT_WRIST: usize = 15;
pub const RIGHT_WRIST: usize = 16;
pub const LEFT_HIP: usize = 23;
pub const RIGHT_HIP: usize = 24;
pub const LEFT_KNEE: usize = 25;
pub const RIGHT_KNEE: usize = 26;
pub const LEFT_ANKLE: usize = 27;
pub const RIGHT_ANKLE: usize = 28;

/// Edges over which bone lengths are compared with the reference. Besides
/// the usual limb and face segments this includes ear-shoulder links and
/// torso diagonals so the head and torso are held rigid.
pub const BONES: [(usize, usize); 42] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 7),
    (0, 4),
    (4, 5),
    (5, 6),
    (6, 8),
    (9, 10),
    (0, 9),
    (0, 10),
    (7, 8),
    (7, 11),
    (8, 12),
    (11, 12),
    (11, 23),
    (12, 24),
    (23, 24),
    (11, 24),
    (12, 23),
    (11, 13),
    (13, 15),
    (15, 17),
    (15, 19),
    (15, 21),
    (17, 19),
    (12, 14),
    (14, 16),
    (16, 18),
    (16, 20),
    (16, 22),
    (18, 20),
    (23, 25),
    (25, 27),
    (27, 29),
    (29, 31),
    (27, 31),
    (24, 26),
    (26, 28),
    (28, 30),
    (30, 32),
    (28, 32),
];

/// 33 joints in metres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Skeleton3D {
    pub joints: [[f64; 3]; NUM_JOINTS],
}

impl Skeleton3D {
    pub fn new(joints: [[f64; 3]; NUM_JOINTS]) -> Result<Self> {
        if joints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Skeleton3D::new"));
        }
        Ok(Skeleton3D { joints })
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() != KEYPOINT_DIM {
            return Err(Error::shape("Skeleton3D::from_flat", &[KEYPOINT_DIM], &[flat.len()]));
        }
        let mut joints = [[0.0; 3]; NUM_JOINTS];
        for (j, c) in flat.chunks(3).enumerate() {
            joints[j] = [c[0], c[1], c[2]];
        }
        Self::new(joints)
    }

    pub fn to_flat(&self) -> [f64; KEYPOINT_DIM] {
        let mut out = [0.0; KEYPOINT_DIM];
        for (j, p) in self.joints.iter().enumerate() {
            out[3 * j..3 * j + 3].copy_from_slice(p);
        }
        out
    }

    /// Standing neutral pose facing +x with the feet on z = 0.
    pub fn reference() -> Self {
        let mut j = [[0.0; 3]; NUM_JOINTS];
        let mirrored: [(usize, usize, [f64; 3]); 16] = [
            (1, 4, [0.085, 0.015, 1.66]),
            (2, 5, [0.08, 0.032, 1.665]),
            (3, 6, [0.075, 0.045, 1.665]),
            (7, 8, [0.0, 0.075, 1.64]),
            (9, 10, [0.09, 0.025, 1.58]),
            (11, 12, [0.0, 0.19, 1.45]),
            (13, 14, [0.0, 0.21, 1.17]),
            (15, 16, [0.0, 0.22, 0.92]),
            (17, 18, [0.01, 0.24, 0.84]),
            (19, 20, [0.03, 0.225, 0.83]),
            (21, 22, [0.04, 0.20, 0.87]),
            (23, 24, [0.0, 0.11, 0.95]),
            (25, 26, [0.01, 0.11, 0.52]),
            (27, 28, [0.0, 0.11, 0.09]),
            (29, 30, [-0.05, 0.11, 0.04]),
            (31, 32, [0.15, 0.11, 0.01]),
        ];
        j[NOSE] = [0.10, 0.0, 1.62];
        for (l, r, p) in mirrored {
            j[l] = p;
            j[r] = [p[0], -p[1], p[2]];
        }
        Skeleton3D { joints: j }
    }

    pub fn map(&self, mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> Self {
        let mut joints = self.joints;
        for p in &mut joints {
            *p = f(*p);
        }
        Skeleton3D { joints }
    }

    /// Rotation by `angle` about the world z axis through the origin.
    pub fn rotated_z(&self, angle: f64) -> Self {
        let (s, c) = (math::sin(angle), math::cos(angle));
        self.map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]])
    }

    pub fn translated(&self, d: [f64; 3]) -> Self {
        self.map(|p| [p[0] + d[0], p[1] + d[1], p[2] + d[2]])
    }

    pub fn scaled(&self, k: f64) -> Self {
        self.map(|p| [k * p[0], k * p[1], k * p[2]])
    }

    pub fn bone_length(&self, a: usize, b: usize) -> f64 {
        let (p, q) = (self.joints[a], self.joints[b]);
        let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
        math::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
    }
}

fn midpoint(p: [f64; 3], q: [f64; 3]) -> [f64; 3] {
    [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1]), 0.5 * (p[2] + q[2])]
}

/// Planar yaw of the vector from between the ears to between the eyes.
pub fn head_orientation(k: &Skeleton3D) -> Result<f64> {
    let eyes = midpoint(k.joints[LEFT_EYE], k.joints[RIGHT_EYE]);
    let ears = midpoint(k.joints[LEFT_EAR], k.joints[RIGHT_EAR]);
    let (dx, dy) = (eyes[0] - ears[0], eyes[1] - ears[1]);
    let norm = math::hypot(dx, dy);
    if !(norm >= 1e-6) {
        return Err(Error::DegenerateHead(norm));
    }
    Ok(math::wrap_angle(math::atan2(dy, dx)))
}

/// Pinhole camera with camera-from-world extrinsics `p_cam = R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

pub const MIN_DEPTH: f64 = 0.05;

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || ![cx, cy].iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("camera intrinsics must be finite with positive focal lengths".into()));
        }
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..3).map(|i| rotation[a][i] * rotation[b][i]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                if !((dot - want).abs() <= 1e-9) {
                    return Err(Error::InvalidArgument(alloc::format!(
                        "camera rotation is not orthonormal (row {a} . row {b} = {dot})"
                    )));
                }
            }
        }
        Ok(Camera {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
        })
    }

    /// Camera at `eye` looking at `target` with world z up.
    pub fn looking_at(eye: [f64; 3], target: [f64; 3], fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
        let cross = |a: [f64; 3], b: [f64; 3]| [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
        let unit = |a: [f64; 3]| {
            let n = math::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
            [a[0] / n, a[1] / n, a[2] / n]
        };
        let forward = unit(sub(target, eye));
        let right = cross(forward, [0.0, 0.0, 1.0]);
        if math::hypot(right[0], math::hypot(right[1], right[2])) < 1e-9 {
            return Err(Error::InvalidArgument("camera cannot look straight up or down".into()));
        }
        let right = unit(right);
        let down = cross(forward, right);
        let r = [right, down, forward];
        let t = [
            -(r[0][0] * eye[0] + r[0][1] * eye[1] + r[0][2] * eye[2]),
            -(r[1][0] * eye[0] + r[1][1] * eye[1] + r[1][2] * eye[2]),
            -(r[2][0] * eye[0] + r[2][1] * eye[1] + r[2][2] * eye[2]),
        ];
        Camera::new(fx, fy, cx, cy, r, t)
    }

    pub fn point_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let mut out = self.translation;
        for (i, o) in out.iter_mut().enumerate() {
            *o += r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2];
        }
        out
    }

    pub fn point_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let d = [p[0] - self.translation[0], p[1] - self.translation[1], p[2] - self.translation[2]];
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    pub fn project_point(&self, p_cam: [f64; 3]) -> [f64; 2] {
        [self.fx * p_cam[0] / p_cam[2] + self.cx, self.fy * p_cam[1] / p_cam[2] + self.cy]
    }
}

pub fn to_camera(cam: &Camera, k_world: &Skeleton3D) -> Skeleton3D {
    k_world.map(|p| cam.point_to_camera(p))
}

pub fn to_world(cam: &Camera, k_cam: &Skeleton3D) -> Skeleton3D {
    k_cam.map(|p| cam.point_to_world(p))
}

/// Projects world-frame joints to pixels. Fails on the first joint closer
/// than [`MIN_DEPTH`] to the camera plane.
pub fn project(cam: &Camera, k: &Skeleton3D) -> Result<[[f64; 2]; NUM_JOINTS]> {
    let mut out = [[0.0; 2]; NUM_JOINTS];
    for (j, p) in k.joints.iter().enumerate() {
        let c = cam.point_to_camera(*p);
        if !(c[2] > MIN_DEPTH) {
            return Err(Error::BehindCamera {
                joint: j,
                name: JOINT_NAMES[j],
                z: c[2],
            });
        }
        out[j] = cam.project_point(c);
    }
    Ok(out)
}

/// Detected 2D joints in pixels with per-joint confidence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoints2D {
    pub uv: [[f64; 2]; NUM_JOINTS],
    pub confidence: [f64; NUM_JOINTS],
}

impl Keypoints2D {
    pub fn new(uv: [[f64; 2]; NUM_JOINTS], confidence: [f64; NUM_JOINTS]) -> Result<Self> {
        if uv.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Keypoints2D::new"));
        }
        if let Some(c) = confidence.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::InvalidArgument(alloc::format!("keypoint confidence {c} outside [0, 1]")));
        }
        Ok(Keypoints2D { uv, confidence })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosePrior {
    /// `(joint_a, joint_b, reference_length_m)`.
    pub bones: Vec<(usize, usize, f64)>,
    pub bone_weight: f64,
    pub joint_weight: f64,
    /// Trade-off between reprojection error and the prior.
    pub lambda: f64,
}

impl Default for PosePrior {
    fn default() -> Self {
        Self::from_skeleton(&Skeleton3D::reference())
    }
}

impl PosePrior {
    /// Reference lengths measured on `k` over [`BONES`].
    pub fn from_skeleton(k: &Skeleton3D) -> Self {
        PosePrior {
            bones: BONES.iter().map(|&(a, b)| (a, b, k.bone_length(a, b))).collect(),
            bone_weight: 1.0,
            joint_weight: 1.0,
            lambda: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.bones.iter().find(|b| !(b.2 > 0.0) || b.0 >= NUM_JOINTS || b.1 >= NUM_JOINTS) {
            return Err(Error::InvalidArgument(alloc::format!("bad bone {b:?}")));
        }
        if !(self.bone_weight >= 0.0 && self.joint_weight >= 0.0 && self.lambda >= 0.0) {
            return Err(Error::InvalidArgument("prior weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Small constant inside planar norms so the prior stays differentiable.
const NORM_EPS: f64 = 1e-12;

/// Bone-length deviation plus a hinge on the head facing away from the
/// torso. The hinge is `max(0, -cos(angle))^2` between the planar head
/// direction (ears to eyes) and the planar torso normal, so it is zero up
/// to 90 degrees of head turn and grows quadratically beyond.
pub fn prior_penalty(k: &Skeleton3D, prior: &PosePrior) -> f64 {
    let bones: f64 = prior
        .bones
        .iter()
        .map(|&(a, b, r)| {
            let e = k.bone_length(a, b) - r;
            prior.bone_weight * e * e
        })
        .sum();
    let eyes = midpoint(k.joints[LEFT_EYE], k.joints[RIGHT_EYE]);
    let ears = midpoint(k.joints[LEFT_EAR], k.joints[RIGHT_EAR]);
    let head = [eyes[0] - ears[0], eyes[1] - ears[1]];
    let (l, r) = (k.joints[LEFT_SHOULDER], k.joints[RIGHT_SHOULDER]);
    let torso = [l[1] - r[1], -(l[0] - r[0])];
    let cos = (head[0] * torso[0] + head[1] * torso[1])
        / (math::sqrt(head[0] * head[0] + head[1] * head[1] + NORM_EPS)
            * math::sqrt(torso[0] * torso[0] + torso[1] * torso[1] + NORM_EPS));
    let bend = (-cos).max(0.0);
    bones + prior.joint_weight * bend * bend
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitOptions {
    pub confidence_threshold: f64,
    pub min_joints: usize,
    pub max_iterations: usize,
    /// Stop once an accepted step lowers the objective by less than this.
    pub tolerance: f64,
    /// Scale each joint's gradient by the inverse of a 3x3 curvature
    /// estimate (Gauss-Newton block of the reprojection term plus the
    /// prior's isotropic bound) before the line search.
    pub preconditioned: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            confidence_threshold: 0.3,
            min_joints: 8,
            max_iterations: 500,
            tolerance: 1e-8,
            preconditioned: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseFit {
    pub skeleton: Skeleton3D,
    pub objective: f64,
    pub iterations: usize,
    /// False if the iteration cap was reached.
    pub converged: bool,
    pub gradient_norm: f64,
    /// Objective before the first step and after every accepted step.
    pub history: Vec<f64>,
}

/// Evaluates the lifting objective on the tape for the joint variable
/// `k` of shape `[33, 3]`: confidence-weighted squared reprojection error
/// over joints above the threshold plus `lambda * prior`.
pub fn objective_graph(
    g: &mut Graph,
    k: Var,
    k2: &Keypoints2D,
    cam: &Camera,
    prior: &PosePrior,
    threshold: f64,
) -> Result<Var> {
    let r = &cam.rotation;
    let rt = g.constant(Tensor::new(
        &[3, 3],
        vec![r[0][0], r[1][0], r[2][0], r[0][1], r[1][1], r[2][1], r[0][2], r[1][2], r[2][2]],
    )?)?;
    let t = g.constant(Tensor::new(&[3], cam.translation.to_vec())?)?;
    let rotated = g.matmul(k, rt)?;
    let pc = g.add(rotated, t)?;
    let xy = g.narrow(pc, 1, 0, 2)?;
    let z = g.narrow(pc, 1, 2, 1)?;
    let ratio = g.div(xy, z)?;
    let f = g.constant(Tensor::new(&[2], vec![cam.fx, cam.fy])?)?;
    let scaled = g.mul(ratio, f)?;
    let mut target = Vec::with_capacity(2 * NUM_JOINTS);
    let mut weight = Vec::with_capacity(2 * NUM_JOINTS);
    for j in 0..NUM_JOINTS {
        let c = k2.confidence[j];
        let w = if c >= threshold { c } else { 0.0 };
        target.extend_from_slice(&[k2.uv[j][0] - cam.cx, k2.uv[j][1] - cam.cy]);
        weight.extend_from_slice(&[w, w]);
    }
    let target = g.constant(Tensor::new(&[NUM_JOINTS, 2], target)?)?;
    let weight = g.constant(Tensor::new(&[NUM_JOINTS, 2], weight)?)?;
    let resid = g.sub(scaled, target)?;
    let sq = g.square(resid)?;
    let weighted = g.mul(sq, weight)?;
    let reprojection = g.sum(weighted)?;
    if prior.lambda == 0.0 {
        return Ok(reprojection);
    }
    let p = prior_graph(g, k, prior)?;
    let p = g.scale(p, prior.lambda)?;
    g.add(reprojection, p)
}

/// [`prior_penalty`] on the tape.
pub fn prior_graph(g: &mut Graph, k: Var, prior: &PosePrior) -> Result<Var> {
    let a: Vec<usize> = prior.bones.iter().map(|b| b.0).collect();
    let b: Vec<usize> = prior.bones.iter().map(|b| b.1).collect();
    let ka = g.index_select(k, 0, &a)?;
    let kb = g.index_select(k, 0, &b)?;
    let d = g.sub(ka, kb)?;
    let d2 = g.square(d)?;
    let len2 = g.sum_axis(d2, 1)?;
    let len = g.sqrt(len2)?;
    let refs = g.constant(Tensor::from_vec(prior.bones.iter().map(|b| b.2).collect()))?;
    let dev = g.sub(len, refs)?;
    let dev2 = g.square(dev)?;
    let bones = g.sum(dev2)?;
    let bones = g.scale(bones, prior.bone_weight)?;

    // planar head direction and torso normal
    let pick = |g: &mut Graph, i: usize, j: usize| -> Result<Var> {
        let s = g.index_select(k, 0, &[i, j])?;
        let s = g.narrow(s, 1, 0, 2)?;
        let s = g.sum_axis(s, 0)?;
        g.scale(s, 0.5)
    };
    let eyes = pick(g, LEFT_EYE, RIGHT_EYE)?;
    let ears = pick(g, LEFT_EAR, RIGHT_EAR)?;
    let head = g.sub(eyes, ears)?;
    let shoulders = g.index_select(k, 0, &[LEFT_SHOULDER, RIGHT_SHOULDER])?;
    let shoulders = g.narrow(shoulders, 1, 0, 2)?;
    let diff = g.constant(Tensor::new(&[1, 2], vec![1.0, -1.0])?)?;
    let across = g.matmul(diff, shoulders)?;
    let across = g.reshape(across, &[2])?;
    // torso normal (l_y - r_y, -(l_x - r_x))
    let normal_map = g.constant(Tensor::new(&[2, 2], vec![0.0, -1.0, 1.0, 0.0])?)?;
    let across = g.reshape(across, &[1, 2])?;
    let torso = g.matmul(across, normal_map)?;
    let torso = g.reshape(torso, &[2])?;
    let dot = g.mul(head, torso)?;
    let dot = g.sum(dot)?;
    let hn = g.square(head)?;
    let hn = g.sum(hn)?;
    let hn = g.add_scalar(hn, NORM_EPS)?;
    let tn = g.square(torso)?;
    let tn = g.sum(tn)?;
    let tn = g.add_scalar(tn, NORM_EPS)?;
    let norms = g.mul(hn, tn)?;
    let norms = g.sqrt(norms)?;
    let cos = g.div(dot, norms)?;
    let neg = g.neg(cos)?;
    let hinge = g.relu(neg)?;
    let hinge = g.square(hinge)?;
    let hinge = g.scale(hinge, prior.joint_weight)?;
    g.add(bones, hinge)
}

fn objective_value(k: &Skeleton3D, k2: &Keypoints2D, cam: &Camera, prior: &PosePrior, threshold: f64) -> Result<f64> {
    let mut g = Graph::inference();
    let kv = g.constant(Tensor::new(&[NUM_JOINTS, 3], k.to_flat().to_vec())?)?;
    let e = objective_graph(&mut g, kv, k2, cam, prior, threshold)?;
    Ok(g.value(e).item())
}

fn objective_and_gradient(
    k: &Skeleton3D,
    k2: &Keypoints2D,
    cam: &Camera,
    prior: &PosePrior,
    threshold: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let kv = g.variable(Tensor::new(&[NUM_JOINTS, 3], k.to_flat().to_vec())?)?;
    let e = objective_graph(&mut g, kv, k2, cam, prior, threshold)?;
    let grads = g.backward(e)?;
    let grad = grads.get(kv).map_or_else(|| vec![0.0; KEYPOINT_DIM], <[f64]>::to_vec);
    Ok((g.value(e).item(), grad))
}

/// Solves a symmetric positive definite 3x3 system.
fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> [f64; 3] {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(a);
    let mut x = [0.0; 3];
    for (c, xc) in x.iter_mut().enumerate() {
        let mut m = a;
        for r in 0..3 {
            m[r][c] = b[r];
        }
        *xc = det(m) / d;
    }
    x
}

/// Per-joint descent direction `-P_j^{-1} g_j`.
fn preconditioned_direction(
    k: &Skeleton3D,
    grad: &[f64],
    k2: &Keypoints2D,
    cam: &Camera,
    prior: &PosePrior,
    threshold: f64,
) -> Vec<f64> {
    let mut degree = [0usize; NUM_JOINTS];
    for &(a, b, _) in &prior.bones {
        degree[a] += 1;
        degree[b] += 1;
    }
    let r = &cam.rotation;
    let mut dir = vec![0.0; KEYPOINT_DIM];
    for j in 0..NUM_JOINTS {
        let damping = 2.0 * prior.lambda * (prior.bone_weight * degree[j] as f64 + prior.joint_weight) + 1e-9;
        let mut p = [[0.0; 3]; 3];
        for (i, row) in p.iter_mut().enumerate() {
            row[i] = damping;
        }
        let c = k2.confidence[j];
        if c >= threshold {
            let q = cam.point_to_camera(k.joints[j]);
            let z = q[2];
            // rows of d(u, v)/d(world point)
            let du = [cam.fx / z, 0.0, -cam.fx * q[0] / (z * z)];
            let dv = [0.0, cam.fy / z, -cam.fy * q[1] / (z * z)];
            let to_world = |d: [f64; 3]| {
                [
                    d[0] * r[0][0] + d[1] * r[1][0] + d[2] * r[2][0],
                    d[0] * r[0][1] + d[1] * r[1][1] + d[2] * r[2][1],
                    d[0] * r[0][2] + d[1] * r[1][2] + d[2] * r[2][2],
                ]
            };
            for jac in [to_world(du), to_world(dv)] {
                for a in 0..3 {
                    for b in 0..3 {
                        p[a][b] += 2.0 * c * jac[a] * jac[b];
                    }
                }
            }
        }
        let x = solve3(p, [grad[3 * j], grad[3 * j + 1], grad[3 * j + 2]]);
        for i in 0..3 {
            dir[3 * j + i] = -x[i];
        }
    }
    dir
}

const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1e-14;
const DIVERGENCE_STREAK: usize = 10;

/// Lifts 2D keypoints to 3D world joints by descent with backtracking from
/// `init`. Only accepted steps change the skeleton, so the recorded
/// objective history never increases.
pub fn fit_pose(
    k2: &Keypoints2D,
    cam: &Camera,
    prior: &PosePrior,
    init: &Skeleton3D,
    opts: &FitOptions,
) -> Result<PoseFit> {
    prior.validate()?;
    let confident = k2.confidence.iter().filter(|&&c| c >= opts.confidence_threshold).count();
    if confident < opts.min_joints {
        return Err(Error::InsufficientJoints {
            found: confident,
            needed: opts.min_joints,
            threshold: opts.confidence_threshold,
        });
    }
    project(cam, init)?;
    let thr = opts.confidence_threshold;
    let mut k = *init;
    let (mut e, mut grad) = objective_and_gradient(&k, k2, cam, prior, thr)?;
    let mut history = vec![e];
    let mut increases = 0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        let dir = if opts.preconditioned {
            preconditioned_direction(&k, &grad, k2, cam, prior, thr)
        } else {
            grad.iter().map(|g| -g).collect()
        };
        let slope: f64 = dir.iter().zip(&grad).map(|(d, g)| d * g).sum();
        if !(slope < 0.0) {
            converged = true;
            break;
        }
        let flat = k.to_flat();
        let mut step = if opts.preconditioned {
            1.0
        } else {
            // scale the first trial so it moves joints by about a centimetre
            let n = math::sqrt(dir.iter().map(|d| d * d).sum::<f64>());
            (0.01 / n).max(MIN_STEP)
        };
        let mut accepted = None;
        while step >= MIN_STEP {
            let trial: Vec<f64> = flat.iter().zip(&dir).map(|(x, d)| x + step * d).collect();
            let cand = Skeleton3D::from_flat(&trial)?;
            // trial points that cross the camera plane are rejected like any bad step
            if project(cam, &cand).is_ok() {
                let e_new = objective_value(&cand, k2, cam, prior, thr)?;
                if e_new <= e + ARMIJO * step * slope {
                    accepted = Some((cand, e_new));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((cand, e_new)) = accepted else {
            converged = true;
            break;
        };
        iterations += 1;
        increases = if e_new > e { increases + 1 } else { 0 };
        if increases >= DIVERGENCE_STREAK {
            return Err(Error::Diverged(increases));
        }
        let decrease = e - e_new;
        k = cand;
        let (e2, g2) = objective_and_gradient(&k, k2, cam, prior, thr)?;
        e = e2;
        grad = g2;
        history.push(e);
        if decrease < opts.tolerance {
            converged = true;
            break;
        }
    }
    let gradient_norm = math::sqrt(grad.iter().map(|g| g * g).sum::<f64>());
    Ok(PoseFit {
        skeleton: k,
        objective: e,
        iterations,
        converged,
        gradient_norm,
        history,
    })
}

/// Reprojection error in pixels of each joint.
pub fn reprojection_errors(cam: &Camera, k: &Skeleton3D, k2: &Keypoints2D) -> Result<[f64; NUM_JOINTS]> {
    let uv = project(cam, k)?;
    let mut out = [0.0; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        out[j] = math::hypot(uv[j][0] - k2.uv[j][0], uv[j][1] - k2.uv[j][1]);
    }
    Ok(out)
}
