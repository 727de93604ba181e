//! The hypernetwork IK model.
//!
//! A trunk of fully-connected layers (each followed by ReLU and batch norm)
//! maps a normalized end-effector position to a shared embedding. One linear
//! projection head per joint turns that embedding into the flat parameter
//! vector `θ_k` of a small primary network. Primary `k` reads the previously
//! chosen joint angles (normalized to `[-1, 1]` by their limits; a constant
//! `1` for the first joint) and emits the raw `3m` mixture parameters for
//! joint `k`, expressed in normalized angle units.

pub mod checkpoint;
pub mod layout;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IkError, Result};
use crate::gmm::{self, GmmParams, Mixture};
use crate::kinematics::{JointAngles, KinematicChain, Pose};
use crate::numerics::{BatchNorm, BatchStats, Linear, Mode, Tape, Tensor, Var};

pub use layout::{LayerSlice, PrimaryLayout, PrimaryNet, PrimaryWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Published sizes: trunk 4×1024, primaries 3 layers of 256, m = 50.
    Paper,
    /// Sizes that train on a single CPU core in minutes.
    Desk,
    Custom,
}

/// What the trunk sees of a pose, after dividing by `pose_scale`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseFeatures {
    /// `x, y, z` only.
    Cartesian,
    /// `x, y, z`, the distance from the base and the unit direction. Angles
    /// of the base joints are close to linear in the direction, which makes
    /// the trunk's job much easier than recovering them from raw coordinates.
    #[default]
    Polar,
}

impl PoseFeatures {
    pub fn width(self) -> usize {
        match self {
            PoseFeatures::Cartesian => 3,
            PoseFeatures::Polar => 7,
        }
    }

    pub fn encode(self, pose: &Pose, scale: f64, out: &mut Vec<f64>) {
        let a = pose.to_array().map(|v| v / scale);
        out.extend(a);
        if self == PoseFeatures::Polar {
            let r = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
            let inv = if r > 1e-12 { 1.0 / r } else { 0.0 };
            out.extend([r, a[0] * inv, a[1] * inv, a[2] * inv]);
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = IkError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            "custom" => Ok(Preset::Custom),
            other => Err(IkError::Config(format!("unknown model preset '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub joints: usize,
    pub components: usize,
    pub hyper_width: usize,
    pub hyper_depth: usize,
    pub primary_hidden: usize,
    pub primary_depth: usize,
    /// Poses are divided by this before entering the trunk (total reach).
    pub pose_scale: f64,
    #[serde(default)]
    pub pose_features: PoseFeatures,
    /// `[lo, hi]` per joint; angles are normalized to `[-1, 1]` across them.
    pub joint_limits: Vec<[f64; 2]>,
    /// Mixture variance floor in rad².
    pub var_floor: f64,
    pub preset: Preset,
}

impl ModelConfig {
    pub fn for_chain(chain: &KinematicChain, preset: Preset) -> Self {
        let (width, depth, hidden, pdepth, m) = match preset {
            Preset::Paper => (1024, 4, 256, 3, 50),
            Preset::Desk | Preset::Custom => (256, 4, 16, 3, 10),
        };
        ModelConfig {
            joints: chain.dof(),
            components: m,
            hyper_width: width,
            hyper_depth: depth,
            primary_hidden: hidden,
            primary_depth: pdepth,
            pose_scale: chain.reach(),
            pose_features: PoseFeatures::default(),
            joint_limits: chain.joints().iter().map(|j| [j.lo, j.hi]).collect(),
            var_floor: gmm::DEFAULT_VAR_FLOOR,
            preset,
        }
    }

    /// Small configuration for gradient checks and quick tests.
    pub fn tiny(chain: &KinematicChain, components: usize, width: usize) -> Self {
        ModelConfig {
            components,
            hyper_width: width,
            hyper_depth: 2,
            primary_hidden: width,
            primary_depth: 2,
            preset: Preset::Custom,
            ..ModelConfig::for_chain(chain, Preset::Custom)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(IkError::Config(msg.to_string()));
        if self.joints == 0 {
            return bad("joints must be >= 1");
        }
        if self.components == 0 {
            return bad("components must be >= 1");
        }
        if self.hyper_depth < 2 || self.primary_depth < 2 {
            return bad("network depths must be >= 2");
        }
        if self.hyper_width == 0 || self.primary_hidden == 0 {
            return bad("widths must be >= 1");
        }
        if self.joint_limits.len() != self.joints {
            return bad("joint_limits must have one entry per joint");
        }
        if self.joint_limits.iter().any(|[lo, hi]| !(lo < hi)) {
            return bad("joint limits must satisfy lo < hi");
        }
        if !(self.pose_scale > 0.0) || !(self.var_floor > 0.0) {
            return bad("pose_scale and var_floor must be > 0");
        }
        Ok(())
    }

    pub fn layouts(&self) -> Vec<PrimaryLayout> {
        (0..self.joints)
            .map(|k| {
                PrimaryLayout::new(
                    k,
                    self.primary_hidden,
                    self.primary_depth,
                    3 * self.components,
                )
            })
            .collect()
    }

    fn mid(&self, k: usize) -> f64 {
        0.5 * (self.joint_limits[k][0] + self.joint_limits[k][1])
    }

    fn half(&self, k: usize) -> f64 {
        0.5 * (self.joint_limits[k][1] - self.joint_limits[k][0])
    }

    pub fn normalize_angle(&self, k: usize, y: f64) -> f64 {
        (y - self.mid(k)) / self.half(k)
    }

    pub fn denormalize_angle(&self, k: usize, u: f64) -> f64 {
        self.mid(k) + u * self.half(k)
    }

    pub fn clamp_angle(&self, k: usize, y: f64) -> f64 {
        y.clamp(self.joint_limits[k][0], self.joint_limits[k][1])
    }

    /// Variance floor for joint `k` in normalized units.
    fn normalized_floor(&self, k: usize) -> f64 {
        self.var_floor / (self.half(k) * self.half(k))
    }
}

/// A trunk layer: linear, ReLU, batch norm.
#[derive(Debug, Clone)]
pub struct TrunkLayer {
    pub linear: Linear,
    pub norm: BatchNorm,
}

#[derive(Debug, Clone)]
pub struct IkModel {
    pub config: ModelConfig,
    pub trunk: Vec<TrunkLayer>,
    pub heads: Vec<Linear>,
    layouts: Vec<PrimaryLayout>,
}

/// Hypernetwork outputs for a batch of poses: one `[batch × P_k]` tensor per
/// joint.
#[derive(Debug, Clone)]
pub struct Thetas {
    pub per_joint: Vec<Tensor>,
}

impl Thetas {
    pub fn batch(&self) -> usize {
        self.per_joint.first().map_or(0, Tensor::rows)
    }

    pub fn row(&self, joint: usize, index: usize) -> &[f64] {
        self.per_joint[joint].row(index)
    }
}

/// Scale of the projection heads relative to the trunk initialization.
const HEAD_INIT_SCALE: f64 = 0.01;

impl IkModel {
    /// Fresh model. Trunk layers use He-uniform init; projection heads are
    /// scaled down so the initial primaries are close to the head biases,
    /// which hold a fan-in-scaled primary network whose mixture means are
    /// spread evenly over the joint range.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let he = 6f64.sqrt();
        let mut trunk = Vec::with_capacity(config.hyper_depth);
        let mut fan_in = config.pose_features.width();
        for _ in 0..config.hyper_depth {
            trunk.push(TrunkLayer {
                linear: Linear::init(fan_in, config.hyper_width, he, &mut rng),
                norm: BatchNorm::new(config.hyper_width),
            });
            fan_in = config.hyper_width;
        }
        let layouts = config.layouts();
        let heads = layouts
            .iter()
            .map(|layout| {
                let mut head = Linear::init(
                    config.hyper_width,
                    layout.param_count,
                    he * HEAD_INIT_SCALE,
                    &mut rng,
                );
                init_primary_bias(layout, config.components, head.bias.data_mut(), &mut rng);
                head
            })
            .collect();
        Ok(IkModel {
            config,
            trunk,
            heads,
            layouts,
        })
    }

    pub fn layouts(&self) -> &[PrimaryLayout] {
        &self.layouts
    }

    pub fn joints(&self) -> usize {
        self.config.joints
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Trainable tensors in a fixed order: trunk (weight, bias, gamma, beta)
    /// per layer, then heads (weight, bias).
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.trunk {
            out.extend(l.linear.params());
            out.extend(l.norm.params());
        }
        for h in &self.heads {
            out.extend(h.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.trunk {
            out.extend(l.linear.params_mut());
            out.extend(l.norm.params_mut());
        }
        for h in &mut self.heads {
            out.extend(h.params_mut());
        }
        out
    }

    fn pose_matrix(&self, poses: &[Pose]) -> Result<Tensor> {
        let features = self.config.pose_features;
        let mut data = Vec::with_capacity(poses.len() * features.width());
        for (i, p) in poses.iter().enumerate() {
            if !p.is_finite() {
                return Err(IkError::NonFiniteInput(format!("pose {i}")));
            }
            features.encode(p, self.config.pose_scale, &mut data);
        }
        Tensor::matrix(poses.len(), features.width(), data)
    }

    /// Trunk activations (the embedding before the projection heads).
    pub fn trunk_forward(&self, poses: &[Pose], mode: Mode) -> Result<Tensor> {
        let mut h = self.pose_matrix(poses)?;
        for layer in &self.trunk {
            h = crate::numerics::relu(&layer.linear.forward(&h)?);
            h = match mode {
                Mode::Infer => layer.norm.forward_infer(&h)?,
                Mode::Train => layer.norm.forward_train(&h)?.0,
            };
        }
        Ok(h)
    }

    /// `θ_1 … θ_N` for each pose. Train mode normalizes with batch
    /// statistics but leaves the running averages alone.
    pub fn hyper_forward(&self, poses: &[Pose], mode: Mode) -> Result<Thetas> {
        let h = self.trunk_forward(poses, mode)?;
        let per_joint = self
            .heads
            .iter()
            .map(|head| head.forward(&h))
            .collect::<Result<_>>()?;
        Ok(Thetas { per_joint })
    }

    /// Raw mixture parameters (normalized units) for joint `k` given its
    /// primary weights and the preceding angles in radians.
    pub fn primary_forward(&self, k: usize, theta: &[f64], prev: &[f64]) -> Result<GmmParams> {
        if prev.len() != k {
            return Err(IkError::PrimaryInput {
                joint: k,
                expected: k,
                got: prev.len(),
            });
        }
        let net = PrimaryNet::new(&self.layouts[k], theta)?;
        let input = self.primary_input(k, prev);
        let raw = net.forward(&input, 1);
        GmmParams::from_raw(&raw, self.config.normalized_floor(k))
    }

    fn primary_input(&self, k: usize, prev: &[f64]) -> Vec<f64> {
        if k == 0 {
            vec![1.0]
        } else {
            prev.iter()
                .enumerate()
                .map(|(j, &y)| self.config.normalize_angle(j, y))
                .collect()
        }
    }

    /// Converts a normalized-unit mixture for joint `k` to radians.
    pub fn to_radians(&self, k: usize, params: &GmmParams) -> Mixture {
        params
            .mixture()
            .affine(self.config.half(k), self.config.mid(k))
    }

    /// Mixture over joint `k` in radians.
    pub fn joint_mixture(&self, k: usize, theta: &[f64], prev: &[f64]) -> Result<Mixture> {
        Ok(self.to_radians(k, &self.primary_forward(k, theta, prev)?))
    }

    /// Mixtures for joint `k` of many partial solutions that share one pose.
    pub fn joint_mixtures_batch(
        &self,
        k: usize,
        theta: &[f64],
        prev: &[Vec<f64>],
    ) -> Result<Vec<Mixture>> {
        let layout = &self.layouts[k];
        let net = PrimaryNet::new(layout, theta)?;
        let batch = prev.len();
        let mut inputs = Vec::with_capacity(batch * layout.input_width);
        for p in prev {
            if p.len() < k {
                return Err(IkError::PrimaryInput {
                    joint: k,
                    expected: k,
                    got: p.len(),
                });
            }
            inputs.extend(self.primary_input(k, &p[..k]));
        }
        let raw = net.forward(&inputs, batch);
        let width = layout.output_width();
        let floor = self.config.normalized_floor(k);
        raw.chunks(width)
            .map(|r| Ok(self.to_radians(k, &GmmParams::from_raw(r, floor)?)))
            .collect()
    }

    /// Ancestral sampling of `count` solutions for one pose: each joint is
    /// drawn from its mixture conditioned on the joints already drawn, then
    /// clamped to its limits.
    pub fn sample_solutions_with_theta<R: Rng + ?Sized>(
        &self,
        thetas: &Thetas,
        index: usize,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<JointAngles>> {
        let n = self.joints();
        let mut sols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); count];
        for k in 0..n {
            let mixtures = self.joint_mixtures_batch(k, thetas.row(k, index), &sols)?;
            for (sol, mix) in sols.iter_mut().zip(&mixtures) {
                let y = mix.sample(rng);
                sol.push(self.config.clamp_angle(k, y));
            }
        }
        Ok(sols)
    }

    pub fn sample_solutions<R: Rng + ?Sized>(
        &self,
        pose: &Pose,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<JointAngles>> {
        let thetas = self.hyper_forward(std::slice::from_ref(pose), Mode::Infer)?;
        self.sample_solutions_with_theta(&thetas, 0, count, rng)
    }

    pub fn sample_solution<R: Rng + ?Sized>(&self, pose: &Pose, rng: &mut R) -> Result<JointAngles> {
        Ok(self.sample_solutions(pose, 1, rng)?.remove(0))
    }

    /// `Σ_k log p(y_k | y_<k)` in radians, with `y` itself as conditioning.
    pub fn solution_log_likelihood(&self, pose: &Pose, angles: &[f64]) -> Result<f64> {
        let thetas = self.hyper_forward(std::slice::from_ref(pose), Mode::Infer)?;
        self.log_likelihood_with_theta(&thetas, 0, angles)
    }

    pub fn log_likelihood_with_theta(
        &self,
        thetas: &Thetas,
        index: usize,
        angles: &[f64],
    ) -> Result<f64> {
        if angles.len() != self.joints() {
            return Err(IkError::JointCount {
                expected: self.joints(),
                got: angles.len(),
            });
        }
        let mut total = 0.0;
        for k in 0..self.joints() {
            let params = self.primary_forward(k, thetas.row(k, index), &angles[..k])?;
            let u = self.config.normalize_angle(k, angles[k]);
            total += params.log_prob(u) - self.config.half(k).ln();
        }
        Ok(total)
    }

    /// Mean teacher-forced negative log-likelihood over a batch. Consumes no
    /// randomness. Infer mode uses running batch-norm statistics; train mode
    /// uses the batch's own.
    pub fn nll_loss(&self, poses: &[Pose], angles: &[JointAngles], mode: Mode) -> Result<f64> {
        check_batch(poses, angles, self.joints())?;
        match mode {
            Mode::Train => {
                let mut tape = Tape::new();
                let rec = self.record_loss(&mut tape, poses, angles)?;
                Ok(tape.value(rec.loss).data()[0])
            }
            Mode::Infer => {
                let thetas = self.hyper_forward(poses, Mode::Infer)?;
                let mut total = 0.0;
                for (i, y) in angles.iter().enumerate() {
                    let ll = self.log_likelihood_with_theta(&thetas, i, y)?;
                    if !ll.is_finite() {
                        return Err(IkError::NonFiniteLoss { index: i });
                    }
                    total -= ll;
                }
                Ok(total / poses.len() as f64)
            }
        }
    }

    /// Records the train-mode loss on `tape`.
    pub fn record_loss(
        &self,
        tape: &mut Tape,
        poses: &[Pose],
        angles: &[JointAngles],
    ) -> Result<LossRecord> {
        check_batch(poses, angles, self.joints())?;
        let batch = poses.len();
        let mut params = Vec::new();
        let mut stats = Vec::with_capacity(self.trunk.len());

        let x = tape.constant(self.pose_matrix(poses)?);
        let mut h = x;
        for layer in &self.trunk {
            let lin = layer.linear.record(tape, h, &mut params)?;
            let act = tape.relu(lin);
            let (bn, s) = layer.norm.record_train(tape, act, &mut params)?;
            stats.push(s);
            h = bn;
        }

        let mut head_vars = Vec::with_capacity(self.joints());
        for head in &self.heads {
            head_vars.push(head.record(tape, h, &mut params)?);
        }

        let mut total: Option<Var> = None;
        for (k, theta) in head_vars.into_iter().enumerate() {
            let layout = &self.layouts[k];
            let input: Vec<f64> = angles
                .iter()
                .flat_map(|y| self.primary_input(k, &y[..k]))
                .collect();
            let mut a = tape.constant(Tensor::matrix(batch, layout.input_width, input)?);
            let last = layout.layers.len() - 1;
            for (li, s) in layout.layers.iter().enumerate() {
                let w = tape.slice_cols(theta, s.weight_offset, s.weight_len())?;
                let b = tape.slice_cols(theta, s.bias_offset, s.rows)?;
                let wx = tape.batched_matvec(w, a, s.rows, s.cols)?;
                a = tape.add(wx, b)?;
                if li != last {
                    a = tape.relu(a);
                }
            }
            let floor = self.config.normalized_floor(k);
            let log_half = self.config.half(k).ln();
            let targets: Vec<f64> = angles
                .iter()
                .map(|y| self.config.normalize_angle(k, y[k]))
                .collect();
            let nll = tape.row_scalar(a, |i, raw| {
                let (lp, g) = gmm::raw_log_prob_with_grad(raw, floor, targets[i]);
                (log_half - lp, g.into_iter().map(|v| -v).collect())
            })?;
            total = Some(match total {
                None => nll,
                Some(t) => tape.add(t, nll)?,
            });
        }
        let per_sample = total.expect("at least one joint");
        if let Some(i) = tape
            .value(per_sample)
            .data()
            .iter()
            .position(|v| !v.is_finite())
        {
            return Err(IkError::NonFiniteLoss { index: i });
        }
        let loss = tape.mean(per_sample);
        Ok(LossRecord {
            loss,
            per_sample,
            params,
            batch_stats: stats,
        })
    }

    /// Train-mode loss and gradients for every parameter (in
    /// [`IkModel::params`] order), plus the trunk batch statistics.
    pub fn loss_and_grads(
        &self,
        poses: &[Pose],
        angles: &[JointAngles],
    ) -> Result<(f64, Vec<Tensor>, Vec<BatchStats>)> {
        let mut tape = Tape::new();
        let rec = self.record_loss(&mut tape, poses, angles)?;
        let loss = tape.value(rec.loss).data()[0];
        let mut grads = tape.backward(rec.loss);
        let g = rec
            .params
            .iter()
            .map(|&v| {
                let shape = tape.value(v).shape().to_vec();
                grads.take(v).unwrap_or_else(|| Tensor::zeros(&shape))
            })
            .collect();
        Ok((loss, g, rec.batch_stats))
    }

    /// Replaces the running batch-norm statistics with exact population
    /// statistics over `poses`, layer by layer. Sharp mixtures are sensitive
    /// to small shifts of the embedding, and moving averages lag the weights.
    pub fn recalibrate_norms(&mut self, poses: &[Pose]) -> Result<()> {
        if poses.len() < 2 {
            return Ok(());
        }
        let mut h = self.pose_matrix(poses)?;
        let n = poses.len() as f64;
        for layer in &mut self.trunk {
            let a = crate::numerics::relu(&layer.linear.forward(&h)?);
            let dim = layer.norm.dim();
            let mut mean = vec![0.0; dim];
            for row in a.data().chunks(dim) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![0.0; dim];
            for row in a.data().chunks(dim) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= n);
            layer.norm.running_mean = mean;
            layer.norm.running_var = var;
            h = layer.norm.forward_infer(&a)?;
        }
        Ok(())
    }

    pub fn apply_batch_stats(&mut self, stats: &[BatchStats], batch: usize) {
        for (layer, s) in self.trunk.iter_mut().zip(stats) {
            layer.norm.update_running(s, batch);
        }
    }
}

/// Vars produced by [`IkModel::record_loss`].
#[derive(Debug)]
pub struct LossRecord {
    pub loss: Var,
    pub per_sample: Var,
    pub params: Vec<Var>,
    pub batch_stats: Vec<BatchStats>,
}

fn check_batch(poses: &[Pose], angles: &[JointAngles], n: usize) -> Result<()> {
    if poses.is_empty() {
        return Err(IkError::Empty);
    }
    if poses.len() != angles.len() {
        return Err(IkError::shape("batch", &[poses.len()], &[angles.len()]));
    }
    if let Some(y) = angles.iter().find(|y| y.len() != n) {
        return Err(IkError::JointCount {
            expected: n,
            got: y.len(),
        });
    }
    Ok(())
}

/// Writes a default primary network into a head bias: fan-in-scaled uniform
/// weights, and an output bias whose mixture means are spread over `[-1, 1]`
/// with equal raw priors and zero raw scales.
fn init_primary_bias<R: Rng>(layout: &PrimaryLayout, m: usize, bias: &mut [f64], rng: &mut R) {
    let last = layout.layers.len() - 1;
    for (li, s) in layout.layers.iter().enumerate() {
        let bound = (6.0 / s.cols as f64).sqrt() * if li == last { 0.1 } else { 1.0 };
        for v in &mut bias[s.weight_offset..s.bias_offset] {
            *v = rng.gen_range(-bound..=bound);
        }
        if li == last {
            let out = &mut bias[s.bias_offset..s.bias_offset + s.rows];
            for (j, v) in out[..m].iter_mut().enumerate() {
                *v = if m == 1 {
                    0.0
                } else {
                    -0.9 + 1.8 * j as f64 / (m - 1) as f64
                };
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> IkModel {
        let chain = KinematicChain::preset("planar2").unwrap();
        IkModel::new(ModelConfig::tiny(&chain, 2, 8), 1).unwrap()
    }

    #[test]
    fn theta_lengths_follow_layout() {
        let model = tiny();
        let poses = [Pose::new(1.0, 0.5, 0.0), Pose::new(-0.3, 1.0, 0.0)];
        let th = model.hyper_forward(&poses, Mode::Infer).unwrap();
        for (k, t) in th.per_joint.iter().enumerate() {
            assert_eq!(t.shape(), &[2, model.layouts()[k].param_count]);
        }
    }

    #[test]
    fn infer_is_deterministic() {
        let model = tiny();
        let poses = [Pose::new(1.0, 0.5, 0.0)];
        let a = model.hyper_forward(&poses, Mode::Infer).unwrap();
        let b = model.hyper_forward(&poses, Mode::Infer).unwrap();
        assert_eq!(a.per_joint, b.per_joint);
    }

    #[test]
    fn non_finite_pose_rejected() {
        let model = tiny();
        let poses = [Pose::new(f64::NAN, 0.0, 0.0)];
        assert!(matches!(
            model.hyper_forward(&poses, Mode::Infer),
            Err(IkError::NonFiniteInput(_))
        ));
    }

    #[test]
    fn primary_rejects_wrong_prev_length() {
        let model = tiny();
        let th = model.hyper_forward(&[Pose::new(1.0, 0.0, 0.0)], Mode::Infer).unwrap();
        let err = model.primary_forward(1, th.row(1, 0), &[]).unwrap_err();
        assert!(matches!(err, IkError::PrimaryInput { joint: 1, .. }));
    }

    #[test]
    fn samples_respect_limits() {
        let model = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sols = model
            .sample_solutions(&Pose::new(0.5, 0.5, 0.0), 50, &mut rng)
            .unwrap();
        for s in sols {
            assert_eq!(s.len(), 2);
            for (k, y) in s.iter().enumerate() {
                let [lo, hi] = model.config.joint_limits[k];
                assert!(*y >= lo && *y <= hi);
            }
        }
    }

    #[test]
    fn batch_of_one_loss_is_negated_likelihood() {
        let model = tiny();
        let pose = Pose::new(0.4, 1.1, 0.0);
        let y = vec![0.3, -1.2];
        let ll = model.solution_log_likelihood(&pose, &y).unwrap();
        let loss = model.nll_loss(&[pose], &[y], Mode::Infer).unwrap();
        assert!((ll + loss).abs() < 1e-12);
    }

    #[test]
    fn train_mode_batch_of_one_errors() {
        let model = tiny();
        let err = model
            .nll_loss(&[Pose::new(0.4, 1.1, 0.0)], &[vec![0.3, -1.2]], Mode::Train)
            .unwrap_err();
        assert!(matches!(err, IkError::BatchTooSmall(1)));
    }

    #[test]
    fn recalibrated_inference_matches_batch_statistics() {
        let mut model = tiny();
        let poses: Vec<Pose> = (0..16)
            .map(|i| Pose::new((i as f64 * 0.37).cos(), (i as f64 * 0.61).sin(), 0.0))
            .collect();
        model.recalibrate_norms(&poses).unwrap();
        let a = model.trunk_forward(&poses, Mode::Train).unwrap();
        let b = model.trunk_forward(&poses, Mode::Infer).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn polar_features_are_scale_free_directions() {
        let mut out = Vec::new();
        PoseFeatures::Polar.encode(&Pose::new(0.0, 3.0, 4.0), 10.0, &mut out);
        assert_eq!(out, vec![0.0, 0.3, 0.4, 0.5, 0.0, 0.6, 0.8]);
        out.clear();
        PoseFeatures::Polar.encode(&Pose::new(0.0, 0.0, 0.0), 1.0, &mut out);
        assert_eq!(out, vec![0.0; 7]);
    }
}
