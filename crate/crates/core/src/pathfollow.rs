//! Online path following: every joint is sampled from its mixture restricted
//! to a window of radius `r` around its value at the previous step, so the
//! joint trajectory stays smooth while still choosing among solution
//! branches.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{IkError, Result};
use crate::exec::{derive_seed, kahan_sum, Exec};
use crate::gmm::Neighborhood;
use crate::kinematics::{JointAngles, KinematicChain, Pose};
use crate::model::IkModel;
use crate::numerics::Mode;

pub const DEFAULT_RADIUS: f64 = 0.1;
/// Per-step joint delta bound of [`generate_smooth_path`].
pub const PATH_MAX_STEP: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
    pub joints: Vec<JointAngles>,
    /// `|FK(joints[t]) − poses[t]|` in meters.
    pub fk_errors: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn mean_error(&self) -> f64 {
        kahan_sum(self.fk_errors.iter().copied()) / self.fk_errors.len().max(1) as f64
    }

    /// Largest per-step change of any joint.
    pub fn max_joint_step(&self) -> f64 {
        self.joints
            .windows(2)
            .flat_map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    }

    /// Max-norm distance between two joint paths of equal length.
    pub fn joint_distance(&self, other: &Trajectory) -> f64 {
        self.joints
            .iter()
            .zip(&other.joints)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// CSV with columns `t,x,y,z,<joint columns>,fk_error_m`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let n = self.joints.first().map_or(0, Vec::len);
        let mut header = vec!["t".to_string(), "x".into(), "y".into(), "z".into()];
        header.extend((0..n).map(|k| format!("q{k}")));
        header.push("fk_error_m".into());
        out.write_record(&header)?;
        for (t, ((x, y), e)) in self
            .poses
            .iter()
            .zip(&self.joints)
            .zip(&self.fk_errors)
            .enumerate()
        {
            let mut rec = vec![t.to_string()];
            rec.extend(x.to_array().iter().map(f64::to_string));
            rec.extend(y.iter().map(f64::to_string));
            rec.push(e.to_string());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Incremental follower: each call consumes one target pose and the joint
/// state left by the previous call.
#[derive(Debug, Clone)]
pub struct PathFollower<'a> {
    model: &'a IkModel,
    chain: &'a KinematicChain,
    radius: f64,
    state: JointAngles,
}

impl<'a> PathFollower<'a> {
    pub fn new(
        model: &'a IkModel,
        chain: &'a KinematicChain,
        y0: &[f64],
        radius: f64,
    ) -> Result<Self> {
        if model.joints() != chain.dof() {
            return Err(IkError::JointCount {
                expected: model.joints(),
                got: chain.dof(),
            });
        }
        chain.check_angles(y0)?;
        // fails on r <= 0
        Neighborhood::new(0.0, radius)?;
        Ok(PathFollower {
            model,
            chain,
            radius,
            state: y0.to_vec(),
        })
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    /// Samples the joints for `target`, each within `radius` of its previous
    /// value, and returns them with their FK error.
    pub fn step<R: rand::Rng + ?Sized>(&mut self, target: &Pose, rng: &mut R) -> Result<(JointAngles, f64)> {
        let thetas = self.model.hyper_forward(std::slice::from_ref(target), Mode::Infer)?;
        let mut y: JointAngles = Vec::with_capacity(self.state.len());
        for k in 0..self.state.len() {
            let mix = self.model.joint_mixture(k, thetas.row(k, 0), &y)?;
            let nb = Neighborhood::new(self.state[k], self.radius)?;
            let v = mix.sample_truncated(nb, rng);
            y.push(self.model.config.clamp_angle(k, v));
        }
        let err = self.chain.fk_unchecked(&y).distance(target);
        self.state.clone_from(&y);
        Ok((y, err))
    }
}

/// Runs one trajectory over `poses` starting from `y0`.
pub fn follow_path<R: rand::Rng + ?Sized>(
    model: &IkModel,
    chain: &KinematicChain,
    poses: &[Pose],
    y0: &[f64],
    radius: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    let mut follower = PathFollower::new(model, chain, y0, radius)?;
    let mut joints = Vec::with_capacity(poses.len());
    let mut fk_errors = Vec::with_capacity(poses.len());
    for x in poses {
        let (y, e) = follower.step(x, rng)?;
        joints.push(y);
        fk_errors.push(e);
    }
    Ok(Trajectory {
        poses: poses.to_vec(),
        joints,
        fk_errors,
    })
}

/// `count` independent runs, run `i` on the stream `(seed, i)`. Returns the
/// index of the run with the lowest mean FK error (ties to the lower index)
/// and all runs.
pub fn follow_path_best_of(
    model: &IkModel,
    chain: &KinematicChain,
    poses: &[Pose],
    y0: &[f64],
    radius: f64,
    count: usize,
    seed: u64,
    exec: Exec,
) -> Result<(usize, Vec<Trajectory>)> {
    if count == 0 {
        return Err(IkError::Config("best-of count must be >= 1".into()));
    }
    let runs = exec.map(count, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        follow_path(model, chain, poses, y0, radius, &mut rng)
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let best = runs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.mean_error().total_cmp(&b.1.mean_error()).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .expect("count >= 1");
    Ok((best, runs))
}

/// A smooth random joint trajectory and its poses. Joint velocities are a
/// low-pass-filtered Gaussian walk capped at [`PATH_MAX_STEP`] and bounced
/// off the limits.
pub fn generate_smooth_path(
    chain: &KinematicChain,
    steps: usize,
    seed: u64,
) -> Result<(Vec<Pose>, Vec<JointAngles>)> {
    if steps < 2 {
        return Err(IkError::Config("a path needs at least 2 steps".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, PATH_MAX_STEP).expect("valid sigma");
    let n = chain.dof();
    // start away from the limits so the first steps are not all bounces
    let mut y: Vec<f64> = chain
        .joints()
        .iter()
        .map(|j| {
            let u: f64 = rand::Rng::gen_range(&mut rng, -0.8..=0.8);
            j.mid() + u * j.half_range()
        })
        .collect();
    let mut vel = vec![0.0; n];
    let mut joints = Vec::with_capacity(steps);
    joints.push(y.clone());
    for _ in 1..steps {
        for k in 0..n {
            let j = &chain.joints()[k];
            vel[k] = (0.8 * vel[k] + 0.4 * noise.sample(&mut rng)).clamp(-PATH_MAX_STEP, PATH_MAX_STEP);
            let next = y[k] + vel[k];
            if next < j.lo || next > j.hi {
                vel[k] = -vel[k];
            }
            y[k] = (y[k] + vel[k]).clamp(j.lo, j.hi);
        }
        joints.push(y.clone());
    }
    let poses = joints.iter().map(|q| chain.fk_unchecked(q)).collect();
    Ok((poses, joints))
}
