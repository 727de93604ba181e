use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use iknet::baselines::{dls_multi_restart, mlp_baseline_train, DlsConfig, MlpConfig};
use iknet::dataset::Dataset;
use iknet::eval::{evaluate_model, evaluate_solver, export_embedding, save_records, write_matrix_csv, EvalReport};
use iknet::exec::derive_seed;
use iknet::experiment::{random_targets, run_experiment, ExperimentPreset};
use iknet::model::{checkpoint, Preset};
use iknet::pathfollow::{follow_path_best_of, generate_smooth_path, DEFAULT_RADIUS};
use iknet::training::{save_history, train, TrainConfig};
use iknet::{Exec, IkError, IkModel, KinematicChain, ModelConfig, Pose};

#[derive(Parser)]
#[command(name = "iknet", version, about = "Neural inverse kinematics with hypernetwork mixtures")]
struct Cli {
    /// Run single-threaded.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample joint configurations and write an IKDS dataset.
    GenData {
        #[command(flatten)]
        chain: ChainArg,
        #[arg(long, default_value_t = 20_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model (or fine-tune one) on a dataset.
    Train {
        #[command(flatten)]
        chain: ChainArg,
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint instead of a fresh model.
        #[arg(long)]
        from_checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PresetArg::Desk)]
        preset: PresetArg,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint path; the loss history goes next to it as `.loss.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw solutions for one target position.
    Sample {
        #[arg(long)]
        model: PathBuf,
        /// Target position `x,y,z` in meters.
        #[arg(long, value_parser = parse_pose, allow_hyphen_values = true)]
        target: Pose,
        #[arg(long, default_value_t = 10)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a model on test poses.
    Eval {
        #[command(flatten)]
        chain: ChainArg,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        targets: TargetArgs,
        /// Solutions sampled per test pose.
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 2.0)]
        threshold_cm: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report path; per-sample records go next to it as `.samples.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a reference solver on test poses.
    Baseline {
        #[arg(value_enum)]
        method: BaselineMethod,
        #[command(flatten)]
        chain: ChainArg,
        #[command(flatten)]
        targets: TargetArgs,
        /// Training data for the MLP.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PresetArg::Desk)]
        preset: PresetArg,
        #[arg(long, default_value_t = 2.0)]
        threshold_cm: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Follow a random smooth path with restricted sampling.
    FollowPath {
        #[command(flatten)]
        chain: ChainArg,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        /// Independent runs; the one with the lowest mean error is written.
        #[arg(long = "samples", default_value_t = 100)]
        best_of: usize,
        #[arg(long, default_value_t = DEFAULT_RADIUS)]
        radius: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export trunk activations for the poses of a dataset.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a named end-to-end experiment.
    Experiment {
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ChainArg {
    /// Chain JSON file, or the name of a built-in chain.
    #[arg(long = "chain")]
    chain: String,
}

impl ChainArg {
    fn load(&self) -> anyhow::Result<KinematicChain> {
        if Path::new(&self.chain).exists() {
            Ok(KinematicChain::load(&self.chain)?)
        } else {
            Ok(KinematicChain::preset(&self.chain)?)
        }
    }
}

#[derive(Args)]
struct TargetArgs {
    /// Test dataset; without it `--test-count` random reachable poses are used.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    test_count: usize,
}

impl TargetArgs {
    fn poses(&self, chain: &KinematicChain, seed: u64) -> anyhow::Result<Vec<Pose>> {
        match &self.test {
            Some(path) => {
                let ds = Dataset::load(path)?;
                check_hash(chain, &ds)?;
                Ok(ds.poses)
            }
            None => Ok(random_targets(chain, self.test_count, derive_seed(seed, 11))),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Paper,
    Desk,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Paper => Preset::Paper,
            PresetArg::Desk => Preset::Desk,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineMethod {
    Dls,
    Mlp,
}

fn parse_pose(s: &str) -> Result<Pose, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v.as_slice() {
        [x, y, z] if v.iter().all(|c| c.is_finite()) => Ok(Pose::new(*x, *y, *z)),
        _ => Err("expected three finite numbers x,y,z".into()),
    }
}

fn check_hash(chain: &KinematicChain, ds: &Dataset) -> anyhow::Result<()> {
    if ds.chain_hash != chain.hash() {
        bail!(IkError::Config(format!(
            "dataset was generated for a different chain (hash {:016x}, chain {:016x})",
            ds.chain_hash,
            chain.hash()
        )));
    }
    Ok(())
}

fn check_model(chain: &KinematicChain, model: &IkModel) -> anyhow::Result<()> {
    if model.joints() != chain.dof() {
        bail!(IkError::JointCount {
            expected: chain.dof(),
            got: model.joints(),
        });
    }
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_stem().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match cli.command {
        Command::GenData { chain, samples, seed, out } => {
            let chain = chain.load()?;
            Dataset::generate(&chain, samples, seed, exec)?.save(&out)?;
        }
        Command::Train {
            chain,
            data,
            from_checkpoint,
            preset,
            epochs,
            batch_size,
            lr,
            seed,
            out,
        } => {
            let chain = chain.load()?;
            let ds = Dataset::load(&data)?;
            check_hash(&chain, &ds)?;
            let model = match &from_checkpoint {
                Some(path) => checkpoint::load(path)?,
                None => IkModel::new(ModelConfig::for_chain(&chain, preset.into()), seed)?,
            };
            check_model(&chain, &model)?;
            let mut cfg = TrainConfig::desk();
            cfg.seed = seed;
            cfg.preset = preset.into();
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(b) = batch_size {
                cfg.batch_size = b;
            }
            if let Some(l) = lr {
                cfg.lr = l;
            }
            let outcome = train(model, &ds, &cfg)?;
            checkpoint::save(&outcome.model, &out)?;
            save_history(&outcome.history, sibling(&out, ".loss.csv"))?;
            if let Some(epoch) = outcome.diverged_at {
                bail!(IkError::Diverged { epoch });
            }
            eprintln!(
                "best validation NLL {:.4} at epoch {}",
                outcome.best_val, outcome.best_epoch
            );
        }
        Command::Sample { model, target, samples, seed, out } => {
            let model = checkpoint::load(&model)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sols = model.sample_solutions(&target, samples, &mut rng)?;
            let mut text = (0..model.joints())
                .map(|k| format!("q{k}"))
                .collect::<Vec<_>>()
                .join(",");
            text.push('\n');
            for s in sols {
                let row: Vec<String> = s.iter().map(f64::to_string).collect();
                text.push_str(&row.join(","));
                text.push('\n');
            }
            match out {
                Some(p) => std::fs::write(p, text)?,
                None => print!("{text}"),
            }
        }
        Command::Eval {
            chain,
            model,
            targets,
            samples,
            threshold_cm,
            seed,
            out,
        } => {
            let chain = chain.load()?;
            let model = checkpoint::load(&model)?;
            check_model(&chain, &model)?;
            let poses = targets.poses(&chain, seed)?;
            let (report, records, _) =
                evaluate_model(&model, &chain, &poses, samples, threshold_cm, seed, exec)?;
            report.save(&out)?;
            save_records(&records, sibling(&out, ".samples.csv"))?;
            println!("{}", report.to_json());
        }
        Command::Baseline {
            method,
            chain,
            targets,
            data,
            preset,
            threshold_cm,
            seed,
            out,
        } => {
            let chain = chain.load()?;
            let poses = targets.poses(&chain, seed)?;
            let (report, records): (EvalReport, _) = match method {
                BaselineMethod::Dls => {
                    let cfg = DlsConfig::default();
                    evaluate_solver("dls", &chain, &poses, threshold_cm, exec, |i, x| {
                        let sols = dls_multi_restart(&chain, x, &cfg, derive_seed(seed, i as u64), Exec::Sequential)?;
                        Ok(sols.into_iter().next().expect("restarts >= 1").0)
                    })?
                }
                BaselineMethod::Mlp => {
                    let data = data.ok_or_else(|| anyhow!(IkError::Config("mlp needs --data".into())))?;
                    let ds = Dataset::load(&data)?;
                    check_hash(&chain, &ds)?;
                    let mut cfg = match preset {
                        PresetArg::Paper => MlpConfig::paper(),
                        PresetArg::Desk => MlpConfig::desk(),
                    };
                    cfg.seed = seed;
                    let mlp = mlp_baseline_train(&chain, &ds, &cfg)?;
                    evaluate_solver("mlp", &chain, &poses, threshold_cm, exec, |_, x| mlp.solve(x))?
                }
            };
            report.save(&out)?;
            save_records(&records, sibling(&out, ".samples.csv"))?;
            println!("{}", report.to_json());
        }
        Command::FollowPath {
            chain,
            model,
            steps,
            best_of,
            radius,
            seed,
            out,
        } => {
            let chain = chain.load()?;
            let model = checkpoint::load(&model)?;
            check_model(&chain, &model)?;
            let (poses, truth) = generate_smooth_path(&chain, steps, derive_seed(seed, 0))?;
            let (best, runs) = follow_path_best_of(
                &model,
                &chain,
                &poses,
                &truth[0],
                radius,
                best_of,
                derive_seed(seed, 1),
                exec,
            )?;
            runs[best].save_csv(&out)?;
            eprintln!(
                "best of {best_of}: mean FK error {:.3} cm",
                runs[best].mean_error() * 100.0
            );
        }
        Command::Embed { model, data, out } => {
            let model = checkpoint::load(&model)?;
            let ds = Dataset::load(&data)?;
            let emb = export_embedding(&model, &ds.poses)?;
            write_matrix_csv(&emb, std::fs::File::create(&out)?)?;
        }
        Command::Experiment { name, seed, out } => {
            let preset = ExperimentPreset::named(&name)?;
            let outcome = run_experiment(&preset, seed, Some(&out), exec)
                .with_context(|| format!("experiment {name}"))?;
            for r in &outcome.reports {
                println!(
                    "{:<6} {:8.3} ± {:7.3} cm   acc@{}cm {:5.1}%",
                    r.method,
                    r.mean_distance_cm,
                    r.std_cm,
                    r.threshold_cm,
                    100.0 * r.accuracy
                );
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<IkError>()) {
        Some(e) if e.is_numerical() => 3,
        Some(IkError::Io(_)) => 1,
        Some(_) => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
