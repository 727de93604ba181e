//! Serial revolute chains: forward kinematics, the geometric Jacobian,
//! reachable-pose sampling and link-length perturbation.
//!
//! Joint `k` first applies its fixed frame rotation, then rotates by `q_k`
//! about its axis (expressed in that frame) and finally translates along its
//! link offset to reach the next joint's origin. The base sits at the origin
//! and the end-effector is the point reached after the last offset.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Quaternion, Unit, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{IkError, Result};
use crate::numerics::Tensor;

pub type JointAngles = Vec<f64>;

/// End-effector position in meters. Planar chains keep `z = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
}

impl Pose {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Pose {
            position: Vector3::new(x, y, z),
        }
    }

    pub fn from_array(p: [f64; 3]) -> Self {
        Pose::new(p[0], p[1], p[2])
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.position.x, self.position.y, self.position.z]
    }

    pub fn distance(&self, other: &Pose) -> f64 {
        (self.position - other.position).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub axis: [f64; 3],
    pub offset: [f64; 3],
    /// Fixed frame rotation as a `[w, x, y, z]` quaternion.
    pub rotation: [f64; 4],
    pub limits: [f64; 2],
}

/// On-disk chain description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub name: String,
    pub joints: Vec<JointSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub axis: Unit<Vector3<f64>>,
    pub offset: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub lo: f64,
    pub hi: f64,
}

impl Joint {
    pub fn range(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn half_range(&self) -> f64 {
        0.5 * (self.hi - self.lo)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicChain {
    pub name: String,
    joints: Vec<Joint>,
}

/// Built-in chains, shipped as JSON files.
pub const PRESETS: &[(&str, &str)] = &[
    ("planar2", include_str!("../chains/planar2.json")),
    ("planar4", include_str!("../chains/planar4.json")),
    ("digit4-synth", include_str!("../chains/digit4_synth.json")),
];

/// Position and world-frame axis of one joint at a configuration.
#[derive(Debug, Clone, Copy)]
pub struct JointFrame {
    pub origin: Vector3<f64>,
    pub axis: Vector3<f64>,
}

impl KinematicChain {
    pub fn from_spec(spec: &ChainSpec) -> Result<Self> {
        if spec.joints.is_empty() {
            return Err(IkError::InvalidChain("chain has no joints".into()));
        }
        let mut joints = Vec::with_capacity(spec.joints.len());
        for (k, j) in spec.joints.iter().enumerate() {
            let axis = Vector3::from(j.axis);
            if ((axis.norm() - 1.0).abs()) > 1e-9 {
                return Err(IkError::InvalidChain(format!(
                    "joint {k} axis is not unit-norm (|a| = {})",
                    axis.norm()
                )));
            }
            let [lo, hi] = j.limits;
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(IkError::InvalidChain(format!(
                    "joint {k} limits must satisfy lo < hi, got [{lo}, {hi}]"
                )));
            }
            let [w, x, y, z] = j.rotation;
            let q = Quaternion::new(w, x, y, z);
            if (q.norm() - 1.0).abs() > 1e-9 {
                return Err(IkError::InvalidChain(format!(
                    "joint {k} rotation is not a unit quaternion"
                )));
            }
            let offset = Vector3::from(j.offset);
            if !offset.iter().all(|v| v.is_finite()) {
                return Err(IkError::InvalidChain(format!("joint {k} offset is not finite")));
            }
            joints.push(Joint {
                axis: Unit::new_unchecked(axis),
                offset,
                rotation: UnitQuaternion::new_unchecked(q),
                lo,
                hi,
            });
        }
        let chain = KinematicChain {
            name: spec.name.clone(),
            joints,
        };
        let reach = chain.reach();
        if !(reach > 0.0) || !reach.is_finite() {
            return Err(IkError::InvalidChain(format!("total reach must be positive, got {reach}")));
        }
        Ok(chain)
    }

    pub fn to_spec(&self) -> ChainSpec {
        ChainSpec {
            name: self.name.clone(),
            joints: self
                .joints
                .iter()
                .map(|j| JointSpec {
                    axis: [j.axis.x, j.axis.y, j.axis.z],
                    offset: [j.offset.x, j.offset.y, j.offset.z],
                    rotation: [j.rotation.w, j.rotation.i, j.rotation.j, j.rotation.k],
                    limits: [j.lo, j.hi],
                })
                .collect(),
        }
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let spec: ChainSpec = serde_json::from_str(json)?;
        KinematicChain::from_spec(&spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_spec()).expect("chain spec serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        KinematicChain::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn preset(name: &str) -> Result<Self> {
        PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, json)| KinematicChain::from_json(json))
            .unwrap_or_else(|| {
                Err(IkError::UnknownPreset {
                    name: name.to_string(),
                    available: PRESETS.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", "),
                })
            })
    }

    /// Stable content hash of the chain geometry.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(&self.to_spec()).expect("chain spec serializes");
        let digest = Sha256::digest(json.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn link_lengths(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.offset.norm()).collect()
    }

    pub fn reach(&self) -> f64 {
        self.link_lengths().iter().sum()
    }

    pub fn check_angles(&self, angles: &[f64]) -> Result<()> {
        if angles.len() != self.dof() {
            return Err(IkError::JointCount {
                expected: self.dof(),
                got: angles.len(),
            });
        }
        for (k, (j, &a)) in self.joints.iter().zip(angles).enumerate() {
            if !(a >= j.lo && a <= j.hi) {
                return Err(IkError::JointLimit {
                    joint: k,
                    angle: a,
                    lo: j.lo,
                    hi: j.hi,
                });
            }
        }
        Ok(())
    }

    pub fn clamp(&self, angles: &mut [f64]) {
        for (a, j) in angles.iter_mut().zip(&self.joints) {
            *a = a.clamp(j.lo, j.hi);
        }
    }

    pub fn forward_kinematics(&self, angles: &[f64]) -> Result<Pose> {
        self.check_angles(angles)?;
        Ok(self.fk_unchecked(angles))
    }

    /// Forward kinematics without the limit check. Angles must have length N.
    pub fn fk_unchecked(&self, angles: &[f64]) -> Pose {
        let mut rot = UnitQuaternion::identity();
        let mut pos = Vector3::zeros();
        for (j, &q) in self.joints.iter().zip(angles) {
            rot = rot * j.rotation * UnitQuaternion::from_axis_angle(&j.axis, q);
            pos += rot * j.offset;
        }
        Pose { position: pos }
    }

    /// World-frame joint origins and axes, plus the end-effector position.
    pub fn joint_frames(&self, angles: &[f64]) -> (Vec<JointFrame>, Vector3<f64>) {
        let mut rot = UnitQuaternion::identity();
        let mut pos = Vector3::zeros();
        let mut frames = Vec::with_capacity(self.dof());
        for (j, &q) in self.joints.iter().zip(angles) {
            let pre = rot * j.rotation;
            frames.push(JointFrame {
                origin: pos,
                axis: pre * j.axis.into_inner(),
            });
            rot = pre * UnitQuaternion::from_axis_angle(&j.axis, q);
            pos += rot * j.offset;
        }
        (frames, pos)
    }

    /// Positional geometric Jacobian as a `3×N` tensor.
    pub fn geometric_jacobian(&self, angles: &[f64]) -> Result<Tensor> {
        self.check_angles(angles)?;
        Ok(self.jacobian_unchecked(angles))
    }

    pub fn jacobian_unchecked(&self, angles: &[f64]) -> Tensor {
        let n = self.dof();
        let (frames, ee) = self.joint_frames(angles);
        let mut data = vec![0.0; 3 * n];
        for (k, f) in frames.iter().enumerate() {
            let col = f.axis.cross(&(ee - f.origin));
            for r in 0..3 {
                data[r * n + k] = col[r];
            }
        }
        Tensor::matrix(3, n, data).expect("jacobian shape")
    }

    pub fn sample_angles<R: Rng + ?Sized>(&self, rng: &mut R) -> JointAngles {
        self.joints
            .iter()
            .map(|j| rng.gen_range(j.lo..=j.hi))
            .collect()
    }

    /// Uniform angles within limits and their forward-kinematics pose.
    pub fn sample_reachable<R: Rng + ?Sized>(&self, rng: &mut R) -> (JointAngles, Pose) {
        let y = self.sample_angles(rng);
        let x = self.fk_unchecked(&y);
        (y, x)
    }

    /// Scales each link offset by an independent factor drawn from
    /// `[1 - max_fraction, 1 + max_fraction]`.
    pub fn perturb<R: Rng + ?Sized>(&self, max_fraction: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..1.0).contains(&max_fraction) {
            return Err(IkError::Config(format!(
                "max_fraction must be in [0, 1), got {max_fraction}"
            )));
        }
        let mut out = self.clone();
        if max_fraction == 0.0 {
            return Ok(out);
        }
        for j in &mut out.joints {
            let factor = rng.gen_range(1.0 - max_fraction..=1.0 + max_fraction);
            j.offset *= factor;
        }
        out.name = format!("{}-perturbed", self.name);
        Ok(out)
    }

    /// Maps an angle to `[-1, 1]` across joint `k`'s limits.
    pub fn normalize_angle(&self, k: usize, y: f64) -> f64 {
        let j = &self.joints[k];
        (y - j.mid()) / j.half_range()
    }

    pub fn denormalize_angle(&self, k: usize, u: f64) -> f64 {
        let j = &self.joints[k];
        j.mid() + u * j.half_range()
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Closed-form inverse kinematics of a planar two-link arm with both joints
/// about `z` and links along `x`. Returns elbow-down/elbow-up solutions with
/// joint one wrapped into `(-π, π]`, filtered by `limits` when given.
pub fn planar2_analytic_ik(
    l1: f64,
    l2: f64,
    target: [f64; 2],
    limits: Option<[(f64, f64); 2]>,
) -> Vec<[f64; 2]> {
    let [x, y] = target;
    let d2 = x * x + y * y;
    let c2 = (d2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
    if !(c2.abs() <= 1.0 + 1e-12) {
        return Vec::new();
    }
    let c2 = c2.clamp(-1.0, 1.0);
    let base = y.atan2(x);
    let mut out: Vec<[f64; 2]> = Vec::with_capacity(2);
    for sign in [1.0, -1.0] {
        let q2 = sign * c2.acos();
        let q1 = wrap_angle(base - (l2 * q2.sin()).atan2(l1 + l2 * q2.cos()));
        let sol = [q1, q2];
        let dup = out
            .iter()
            .any(|s| (s[0] - sol[0]).abs() < 1e-12 && (s[1] - sol[1]).abs() < 1e-12);
        if dup {
            continue;
        }
        let ok = limits.map_or(true, |lim| {
            sol.iter()
                .zip(lim.iter())
                .all(|(a, (lo, hi))| *a >= *lo && *a <= *hi)
        });
        if ok {
            out.push(sol);
        }
    }
    out
}
