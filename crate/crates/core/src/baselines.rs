//! Reference solvers: damped-least-squares Jacobian IK with random restarts,
//! and a direct MLP regressor from pose to joint angles.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{IkError, Result};
use crate::exec::{derive_seed, Exec};
use crate::kinematics::{wrap_angle, JointAngles, KinematicChain, Pose};
use crate::model::PoseFeatures;
use crate::numerics::{relu, Adam, AdamConfig, Linear, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DlsConfig {
    pub damping: f64,
    pub max_iters: usize,
    /// Stop once an accepted step moves every joint by less than this.
    pub step_tol: f64,
    pub restarts: usize,
}

impl Default for DlsConfig {
    fn default() -> Self {
        DlsConfig {
            damping: 0.1,
            max_iters: 200,
            step_tol: 1e-8,
            restarts: 16,
        }
    }
}

impl DlsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0) {
            return Err(IkError::Config("DLS damping must be > 0".into()));
        }
        if self.max_iters == 0 {
            return Err(IkError::Config("DLS needs at least one iteration".into()));
        }
        if self.restarts == 0 {
            return Err(IkError::Config("DLS needs at least one restart".into()));
        }
        Ok(())
    }
}

/// Rejected steps tried per iteration before the solver gives up.
const MAX_ESCALATIONS: usize = 8;

/// Smallest damping reached by shrinking after accepted steps, relative to
/// `DlsConfig::damping`.
const MIN_DAMPING_RATIO: f64 = 1e-4;

/// Damped least squares from `init`: `Δy = Jᵀ(JJᵀ + λ²I)⁻¹e`. A step that
/// would raise the residual is retried with λ×10, so the residual never
/// increases; an accepted step lets λ shrink by 10 down to a floor, which
/// keeps convergence fast near singular targets. Joints whose limits span a
/// full turn are wrapped rather than clamped, since clamping them leaves a
/// false wall at ±π. Returns the final angles and residual in meters.
pub fn dls_solve(
    chain: &KinematicChain,
    target: &Pose,
    init: &[f64],
    cfg: &DlsConfig,
) -> Result<(JointAngles, f64)> {
    cfg.validate()?;
    chain.check_angles(init)?;
    if !target.is_finite() {
        return Err(IkError::NonFiniteInput("DLS target".into()));
    }
    let n = chain.dof();
    let goal = target.position;
    let mut y = init.to_vec();
    let mut err = goal - chain.fk_unchecked(&y).position;
    let mut residual = err.norm();
    let min_lambda = cfg.damping * MIN_DAMPING_RATIO;
    let mut lambda = cfg.damping;

    for _ in 0..cfg.max_iters {
        if residual == 0.0 {
            break;
        }
        let j = chain.jacobian_unchecked(&y);
        let j = DMatrix::from_row_slice(3, n, j.data());
        let jjt: Matrix3<f64> = (&j * j.transpose()).fixed_view::<3, 3>(0, 0).into();

        let mut accepted = None;
        for _ in 0..MAX_ESCALATIONS {
            let Some(solved) = (jjt + Matrix3::identity() * lambda * lambda)
                .cholesky()
                .map(|c| c.solve(&err))
            else {
                lambda *= 10.0;
                continue;
            };
            let dy = j.transpose() * DMatrix::from_column_slice(3, 1, solved.as_slice());
            let mut cand: Vec<f64> = y.iter().zip(dy.iter()).map(|(a, d)| a + d).collect();
            project_to_limits(chain, &mut cand);
            let cand_err: Vector3<f64> = goal - chain.fk_unchecked(&cand).position;
            let cand_res = cand_err.norm();
            if cand_res.is_finite() && cand_res <= residual {
                accepted = Some((cand, cand_err, cand_res));
                break;
            }
            lambda *= 10.0;
        }
        let Some((cand, cand_err, cand_res)) = accepted else {
            break;
        };
        lambda = (lambda / 10.0).max(min_lambda);
        let moved = y
            .iter()
            .zip(&cand)
            .fold(0.0f64, |m, (a, b)| m.max(wrap_angle(a - b).abs()));
        y = cand;
        err = cand_err;
        residual = cand_res;
        if moved < cfg.step_tol {
            break;
        }
    }
    Ok((y, residual))
}

fn project_to_limits(chain: &KinematicChain, q: &mut [f64]) {
    for (a, joint) in q.iter_mut().zip(chain.joints()) {
        let (lo, hi) = (joint.lo, joint.hi);
        if hi - lo >= TAU - 1e-9 {
            *a = lo + (*a - lo).rem_euclid(TAU);
        } else {
            *a = a.clamp(lo, hi);
        }
    }
}

/// `cfg.restarts` solves from uniform random inits (restart `i` uses the
/// stream `(seed, i)`). Solutions within 1e-3 rad in max-norm of a better
/// one are dropped; the rest are sorted by `(residual, restart index)`.
pub fn dls_multi_restart(
    chain: &KinematicChain,
    target: &Pose,
    cfg: &DlsConfig,
    seed: u64,
    exec: Exec,
) -> Result<Vec<(JointAngles, f64)>> {
    cfg.validate()?;
    let runs = exec.map(cfg.restarts, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let init = chain.sample_angles(&mut rng);
        dls_solve(chain, target, &init, cfg).map(|(y, r)| (y, r, i))
    });
    let mut runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    runs.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.2.cmp(&b.2)));

    let mut kept: Vec<(JointAngles, f64)> = Vec::new();
    for (y, r, _) in runs {
        let dup = kept.iter().any(|(k, _)| {
            k.iter()
                .zip(&y)
                .all(|(a, b)| (a - b).abs() < DEDUP_TOL)
        });
        if !dup {
            kept.push((y, r));
        }
    }
    Ok(kept)
}

pub const DEDUP_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub width: usize,
    /// Number of linear layers.
    pub depth: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl MlpConfig {
    /// Laptop-sized default; the full-size regressor is 3 layers of 1024.
    pub fn desk() -> Self {
        MlpConfig {
            width: 256,
            depth: 3,
            epochs: 60,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
        }
    }

    pub fn paper() -> Self {
        MlpConfig {
            width: 1024,
            ..MlpConfig::desk()
        }
    }
}

/// Direct regressor: normalized pose in, all normalized joint angles out.
#[derive(Debug, Clone)]
pub struct MlpBaseline {
    pub layers: Vec<Linear>,
    pub pose_scale: f64,
    /// Same input encoding as the hypernetwork trunk.
    pub pose_features: PoseFeatures,
    /// `(mid, half range)` per joint.
    pub joint_limits: Vec<(f64, f64)>,
}

impl MlpBaseline {
    pub fn new(chain: &KinematicChain, cfg: &MlpConfig) -> Result<Self> {
        if cfg.depth < 2 || cfg.width == 0 {
            return Err(IkError::Config("MLP needs depth >= 2 and width >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n = chain.dof();
        let pose_features = PoseFeatures::default();
        let mut dims = vec![pose_features.width()];
        dims.extend(std::iter::repeat(cfg.width).take(cfg.depth - 1));
        dims.push(n);
        let layers = dims
            .windows(2)
            .map(|d| Linear::init(d[0], d[1], 6f64.sqrt(), &mut rng))
            .collect();
        Ok(MlpBaseline {
            layers,
            pose_scale: chain.reach().max(f64::EPSILON),
            pose_features,
            joint_limits: chain.joints().iter().map(|j| (j.mid(), j.half_range())).collect(),
        })
    }

    fn inputs(&self, poses: &[Pose]) -> Tensor {
        let mut data = Vec::with_capacity(poses.len() * self.pose_features.width());
        for p in poses {
            self.pose_features.encode(p, self.pose_scale, &mut data);
        }
        Tensor::matrix(poses.len(), self.pose_features.width(), data).expect("pose batch shape")
    }

    fn targets(&self, angles: &[JointAngles]) -> Tensor {
        let n = self.joint_limits.len();
        let data = angles
            .iter()
            .flat_map(|y| y.iter().zip(&self.joint_limits).map(|(v, (m, h))| (v - m) / h))
            .collect();
        Tensor::matrix(angles.len(), n, data).expect("angle batch shape")
    }

    fn forward(&self, poses: &[Pose]) -> Result<Tensor> {
        let mut h = self.inputs(poses);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = relu(&h);
            }
        }
        Ok(h)
    }

    pub fn solve_batch(&self, poses: &[Pose]) -> Result<Vec<JointAngles>> {
        let out = self.forward(poses)?;
        Ok((0..poses.len())
            .map(|r| {
                out.row(r)
                    .iter()
                    .zip(&self.joint_limits)
                    .map(|(u, (m, h))| (m + u * h).clamp(m - h, m + h))
                    .collect()
            })
            .collect())
    }

    pub fn solve(&self, pose: &Pose) -> Result<JointAngles> {
        Ok(self.solve_batch(std::slice::from_ref(pose))?.remove(0))
    }

    /// Mean squared error in normalized joint units.
    pub fn mse(&self, data: &Dataset) -> Result<f64> {
        let pred = self.forward(&data.poses)?;
        let target = self.targets(&data.angles);
        Ok(pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / pred.len() as f64)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn loss_and_grads(&self, poses: &[Pose], angles: &[JointAngles]) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let mut params = Vec::new();
        let mut h = tape.constant(self.inputs(poses));
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.record(&mut tape, h, &mut params)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        let loss = tape.mse(h, &self.targets(angles))?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(IkError::NonFiniteLoss { index: 0 });
        }
        let mut grads = tape.backward(loss);
        let grads = params
            .iter()
            .map(|&p| {
                let shape = tape.value(p).shape().to_vec();
                grads.take(p).unwrap_or_else(|| Tensor::zeros(&shape))
            })
            .collect();
        Ok((value, grads))
    }
}

/// MSE regression of angles on poses with Adam.
pub fn mlp_baseline_train(
    chain: &KinematicChain,
    data: &Dataset,
    cfg: &MlpConfig,
) -> Result<MlpBaseline> {
    if data.joints != chain.dof() {
        return Err(IkError::JointCount {
            expected: chain.dof(),
            got: data.joints,
        });
    }
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(IkError::Empty);
    }
    let mut model = MlpBaseline::new(chain, cfg)?;
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let poses: Vec<Pose> = chunk.iter().map(|&i| data.poses[i]).collect();
            let angles: Vec<JointAngles> = chunk.iter().map(|&i| data.angles[i].clone()).collect();
            let (_, grads) = model.loss_and_grads(&poses, &angles)?;
            opt.step(&mut model.params_mut(), &grads)?;
        }
    }
    Ok(model)
}

pub fn mlp_baseline_solve(model: &MlpBaseline, pose: &Pose) -> Result<JointAngles> {
    model.solve(pose)
}
