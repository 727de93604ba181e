//! End-to-end presets: generate data, train, evaluate against the baselines
//! and write every artifact to an output directory.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::baselines::{dls_multi_restart, mlp_baseline_train, DlsConfig, MlpBaseline, MlpConfig};
use crate::dataset::Dataset;
use crate::error::{IkError, Result};
use crate::eval::{evaluate_model, evaluate_solver, save_records, EvalReport, SampleRecord};
use crate::exec::{derive_seed, Exec};
use crate::kinematics::{JointAngles, KinematicChain, Pose};
use crate::model::{checkpoint, IkModel, ModelConfig, Preset};
use crate::numerics::Mode;
use crate::pathfollow::{follow_path_best_of, generate_smooth_path, Trajectory, DEFAULT_RADIUS};
use crate::training::{save_history, train, EpochRecord, TrainConfig};

pub const PRESETS: &[&str] = &["planar2", "planar4", "digit4-synth", "pathfollow-planar4"];

/// Stream indices under the experiment seed.
mod stream {
    pub const TRAIN_DATA: u64 = 10;
    pub const TEST_DATA: u64 = 11;
    pub const INIT: u64 = 12;
    pub const TRAIN: u64 = 13;
    pub const EVAL: u64 = 14;
    pub const MLP: u64 = 15;
    pub const DLS: u64 = 16;
    pub const PATHS: u64 = 17;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathSettings {
    pub count: usize,
    pub steps: usize,
    pub best_of: usize,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentPreset {
    pub name: String,
    pub chain: String,
    pub train_size: usize,
    pub test_size: usize,
    pub samples_per_pose: usize,
    pub threshold_cm: f64,
    pub model: ModelSizes,
    pub train: TrainConfig,
    /// `None` skips the MLP baseline.
    pub mlp: Option<MlpConfig>,
    /// `None` skips the DLS baseline.
    pub dls: Option<DlsConfig>,
    pub paths: Option<PathSettings>,
}

/// The size knobs of a [`ModelConfig`]; the rest comes from the chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelSizes {
    pub components: usize,
    pub hyper_width: usize,
    pub hyper_depth: usize,
    pub primary_hidden: usize,
    pub primary_depth: usize,
}

impl ModelSizes {
    pub fn of(cfg: &ModelConfig) -> Self {
        ModelSizes {
            components: cfg.components,
            hyper_width: cfg.hyper_width,
            hyper_depth: cfg.hyper_depth,
            primary_hidden: cfg.primary_hidden,
            primary_depth: cfg.primary_depth,
        }
    }

    pub fn config_for(&self, chain: &KinematicChain) -> ModelConfig {
        ModelConfig {
            components: self.components,
            hyper_width: self.hyper_width,
            hyper_depth: self.hyper_depth,
            primary_hidden: self.primary_hidden,
            primary_depth: self.primary_depth,
            ..ModelConfig::for_chain(chain, Preset::Desk)
        }
    }
}

impl ExperimentPreset {
    pub fn named(name: &str) -> Result<Self> {
        let desk = |chain: &str| -> Result<ModelSizes> {
            Ok(ModelSizes::of(&ModelConfig::for_chain(
                &KinematicChain::preset(chain)?,
                Preset::Desk,
            )))
        };
        let base = |chain: &str, train_size: usize| -> Result<ExperimentPreset> {
            Ok(ExperimentPreset {
                name: name.to_string(),
                chain: chain.to_string(),
                train_size,
                test_size: 1000,
                samples_per_pose: 100,
                threshold_cm: 2.0,
                model: desk(chain)?,
                train: TrainConfig::desk(),
                mlp: Some(MlpConfig::desk()),
                dls: Some(DlsConfig::default()),
                paths: None,
            })
        };
        match name {
            "planar2" => base("planar2", 20_000),
            "planar4" => base("planar4", 20_000),
            // five times the data, so a fifth of the epochs
            "digit4-synth" => Ok(ExperimentPreset {
                threshold_cm: 10.0,
                train: TrainConfig {
                    epochs: 30,
                    lr_decay: 0.9,
                    patience: 5,
                    ..TrainConfig::desk()
                },
                ..base("digit4-synth", 100_000)?
            }),
            "pathfollow-planar4" => Ok(ExperimentPreset {
                mlp: None,
                dls: None,
                paths: Some(PathSettings {
                    count: 20,
                    steps: 50,
                    best_of: 100,
                    radius: DEFAULT_RADIUS,
                }),
                ..base("planar4", 20_000)?
            }),
            other => Err(IkError::UnknownPreset {
                name: other.to_string(),
                available: PRESETS.join(", "),
            }),
        }
    }
}

/// Summary of one path's best-of-K following.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathSummary {
    pub path: usize,
    pub best_index: usize,
    pub best_error_m: f64,
    /// Mean over the K runs of each run's mean FK error.
    pub mean_run_error_m: f64,
    pub max_joint_step: f64,
    /// Largest max-norm joint-space distance between any two runs.
    pub max_pairwise_distance: f64,
}

impl PathSummary {
    pub fn from_runs(path: usize, best_index: usize, runs: &[Trajectory]) -> Self {
        let mut max_pair = 0.0f64;
        for i in 0..runs.len() {
            for j in i + 1..runs.len() {
                max_pair = max_pair.max(runs[i].joint_distance(&runs[j]));
            }
        }
        PathSummary {
            path,
            best_index,
            best_error_m: runs[best_index].mean_error(),
            mean_run_error_m: runs.iter().map(Trajectory::mean_error).sum::<f64>() / runs.len() as f64,
            max_joint_step: runs.iter().map(Trajectory::max_joint_step).fold(0.0, f64::max),
            max_pairwise_distance: max_pair,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub preset: ExperimentPreset,
    pub chain: KinematicChain,
    pub model: IkModel,
    pub history: Vec<EpochRecord>,
    pub train: Dataset,
    pub test: Dataset,
    /// IKNet first, then the baselines that ran.
    pub reports: Vec<EvalReport>,
    pub records: Vec<SampleRecord>,
    /// `samples_per_pose` IKNet solutions per test pose.
    pub solutions: Vec<Vec<JointAngles>>,
    pub mlp: Option<MlpBaseline>,
    pub paths: Vec<PathSummary>,
}

impl ExperimentOutcome {
    pub fn report(&self, method: &str) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.method == method)
    }
}

/// Runs `preset` with `seed`; writes artifacts into `out` when given.
pub fn run_experiment(
    preset: &ExperimentPreset,
    seed: u64,
    out: Option<&Path>,
    exec: Exec,
) -> Result<ExperimentOutcome> {
    let chain = KinematicChain::preset(&preset.chain)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let train_set = Dataset::generate(&chain, preset.train_size, derive_seed(seed, stream::TRAIN_DATA), exec)?;
    let test = Dataset::generate(&chain, preset.test_size, derive_seed(seed, stream::TEST_DATA), exec)?;

    log::info!("{}: training IKNet on {} samples", preset.name, train_set.len());
    let model = IkModel::new(preset.model.config_for(&chain), derive_seed(seed, stream::INIT))?;
    let tc = TrainConfig {
        seed: derive_seed(seed, stream::TRAIN),
        ..preset.train.clone()
    };
    let trained = train(model, &train_set, &tc)?;
    if let Some(epoch) = trained.diverged_at {
        return Err(IkError::Diverged { epoch });
    }
    let model = trained.model;

    let (report, records, solutions) = evaluate_model(
        &model,
        &chain,
        &test.poses,
        preset.samples_per_pose,
        preset.threshold_cm,
        derive_seed(seed, stream::EVAL),
        exec,
    )?;
    let mut reports = vec![report];

    let mlp = match &preset.mlp {
        Some(cfg) => {
            log::info!("{}: training MLP baseline", preset.name);
            let cfg = MlpConfig {
                seed: derive_seed(seed, stream::MLP),
                ..cfg.clone()
            };
            let mlp = mlp_baseline_train(&chain, &train_set, &cfg)?;
            let (r, _) = evaluate_solver("mlp", &chain, &test.poses, preset.threshold_cm, exec, |_, x| {
                mlp.solve(x)
            })?;
            reports.push(r);
            Some(mlp)
        }
        None => None,
    };

    if let Some(cfg) = &preset.dls {
        log::info!("{}: DLS best-of-{}", preset.name, cfg.restarts);
        let dls_seed = derive_seed(seed, stream::DLS);
        let (r, _) = evaluate_solver("dls", &chain, &test.poses, preset.threshold_cm, exec, |i, x| {
            let sols = dls_multi_restart(&chain, x, cfg, derive_seed(dls_seed, i as u64), Exec::Sequential)?;
            Ok(sols.into_iter().next().expect("restarts >= 1").0)
        })?;
        reports.push(r);
    }

    let mut paths = Vec::new();
    if let Some(ps) = &preset.paths {
        let path_seed = derive_seed(seed, stream::PATHS);
        for p in 0..ps.count {
            let (poses, truth) = generate_smooth_path(&chain, ps.steps, derive_seed(path_seed, 2 * p as u64))?;
            let (best, runs) = follow_path_best_of(
                &model,
                &chain,
                &poses,
                &truth[0],
                ps.radius,
                ps.best_of,
                derive_seed(path_seed, 2 * p as u64 + 1),
                exec,
            )?;
            if let Some(dir) = out {
                runs[best].save_csv(dir.join(format!("path{p:02}_best.csv")))?;
            }
            paths.push(PathSummary::from_runs(p, best, &runs));
        }
    }

    if let Some(dir) = out {
        checkpoint::save(&model, dir.join("model.iknt"))?;
        save_history(&trained.history, dir.join("loss.csv"))?;
        save_records(&records, dir.join("iknet_samples.csv"))?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&reports)? + "\n")?;
        write_gmm_probe(&model, &test.poses[0], dir)?;
        if !paths.is_empty() {
            std::fs::write(dir.join("paths.json"), serde_json::to_string_pretty(&paths)? + "\n")?;
        }
    }

    Ok(ExperimentOutcome {
        preset: preset.clone(),
        chain,
        model,
        history: trained.history,
        train: train_set,
        test,
        reports,
        records,
        solutions,
        mlp,
        paths,
    })
}

/// Per-joint mixtures for `pose` along the greedy path (each joint
/// conditioned on the dominant means before it): `gmm_params.csv` holds the
/// components, `gmm_density.csv` a 401-point density grid over the limits.
pub fn write_gmm_probe(model: &IkModel, pose: &Pose, dir: &Path) -> Result<()> {
    let thetas = model.hyper_forward(std::slice::from_ref(pose), Mode::Infer)?;
    let mut params = csv::Writer::from_path(dir.join("gmm_params.csv"))?;
    params.write_record(["joint", "component", "mean_rad", "variance_rad2", "prior"])?;
    let mut density = csv::Writer::from_path(dir.join("gmm_density.csv"))?;
    density.write_record(["joint", "angle_rad", "density"])?;
    let mut prev = Vec::new();
    for k in 0..model.joints() {
        let mix = model.joint_mixture(k, thetas.row(k, 0), &prev)?;
        for c in 0..mix.means.len() {
            params.write_record([
                k.to_string(),
                c.to_string(),
                mix.means[c].to_string(),
                mix.variances[c].to_string(),
                mix.priors[c].to_string(),
            ])?;
        }
        let [lo, hi] = model.config.joint_limits[k];
        for i in 0..=400 {
            let y = lo + (hi - lo) * i as f64 / 400.0;
            density.write_record([k.to_string(), y.to_string(), mix.log_prob(y).exp().to_string()])?;
        }
        prev.push(model.config.clamp_angle(k, mix.means[mix.dominant()]));
    }
    params.flush()?;
    density.flush()?;
    Ok(())
}

/// Random reachable test poses for ad-hoc evaluation.
pub fn random_targets(chain: &KinematicChain, n: usize, seed: u64) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| chain.sample_reachable(&mut rng).1).collect()
}
