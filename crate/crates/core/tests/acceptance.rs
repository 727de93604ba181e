//! Acceptance run. Trains the experiment presets at desk size and prints one
//! PASS/FAIL line per criterion with the measured numbers. A FAIL is reported,
//! not hidden; with `IKNET_ACCEPTANCE_STRICT=1` any FAIL also makes the
//! process exit non-zero.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use iknet::baselines::{dls_multi_restart, DlsConfig};
use iknet::dataset::Dataset;
use iknet::eval::evaluate_model;
use iknet::experiment::{random_targets, run_experiment, ExperimentOutcome, ExperimentPreset, PathSummary};
use iknet::kinematics::{planar2_analytic_ik, wrap_angle};
use iknet::model::{IkModel, ModelConfig, Preset};
use iknet::pathfollow::{follow_path_best_of, generate_smooth_path};
use iknet::training::{train, TrainConfig};
use iknet::exec::derive_seed;
use iknet::{Exec, KinematicChain};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 0;

// pinned tolerances
const C1_MEAN_CM: f64 = 1.5;
const C1_ACC: f64 = 0.90;
const C2_MEAN_CM: f64 = 2.0;
const C2_ACC: f64 = 0.85;
const C3_TARGETS: usize = 100;
const C3_CENTER_RAD: f64 = 0.15;
const C3_FRACTION: f64 = 0.90;
const C4_RATIO: f64 = 3.0;
const C5_TARGETS: usize = 100;
const C5_GAP: f64 = 1e-3;
const C5_RESIDUAL: f64 = 1e-4;
const C6_PATHS: usize = 20;
const C6_STEPS: usize = 50;
const C6_BEST_OF: usize = 100;
const C6_RADIUS: f64 = 0.1;
const C6_BEST_RATIO: f64 = 0.75;
const C7_PERTURB: f64 = 0.2;
const C7_SAMPLES: usize = 1000;
const C7_EPOCHS: usize = 100;
const C7_RATIO: f64 = 0.5;
const C8_LIMIT: Duration = Duration::from_secs(120);
const C9_ACC_MARGIN: f64 = 0.30;
const C9_DLS_RATIO: f64 = 1.5;

struct Verdicts(Vec<String>, usize);

impl Verdicts {
    fn record(&mut self, id: &str, pass: bool, detail: String) {
        let line = format!("{} {id}: {detail}", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        self.0.push(line);
        if !pass {
            self.1 += 1;
        }
    }
}

fn artifacts(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name)
}

fn experiment(name: &str) -> ExperimentOutcome {
    let preset = ExperimentPreset::named(name).expect("known preset");
    let dir = artifacts(name);
    std::fs::create_dir_all(&dir).expect("artifact dir");
    let t = Instant::now();
    let out = run_experiment(&preset, SEED, Some(&dir), Exec::default()).expect("experiment runs");
    let trained = out.history.len() - 1;
    println!(
        "-- {name}: {} train / {} test, {trained} epochs, {:.0}s total (artifacts in {})",
        out.train.len(),
        out.test.len(),
        t.elapsed().as_secs_f64(),
        dir.display()
    );
    out
}

fn angle_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| wrap_angle(x - y).abs()).fold(0.0, f64::max)
}

fn circular_mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = values.fold((0.0, 0.0), |(s, c), v| (s + v.sin(), c + v.cos()));
    s.atan2(c)
}

fn analytic(chain: &KinematicChain, x: &iknet::Pose) -> Vec<[f64; 2]> {
    let l = chain.link_lengths();
    planar2_analytic_ik(l[0], l[1], [x.position.x, x.position.y], None)
}

/// Both analytic branches get samples, and each branch's circular mean lies
/// within the tolerance of its analytic solution.
fn criterion_3(v: &mut Verdicts, p2: &ExperimentOutcome) {
    let mut good = 0;
    for (x, sols) in p2.test.poses.iter().zip(&p2.solutions).take(C3_TARGETS) {
        let branches = analytic(&p2.chain, x);
        if branches.len() < 2 {
            continue;
        }
        let mut members: Vec<Vec<&Vec<f64>>> = vec![Vec::new(); branches.len()];
        for y in sols {
            let nearest = (0..branches.len())
                .min_by(|&a, &b| angle_gap(y, &branches[a]).total_cmp(&angle_gap(y, &branches[b])))
                .expect("two branches");
            members[nearest].push(y);
        }
        let ok = members.iter().zip(&branches).all(|(m, b)| {
            !m.is_empty()
                && (0..2).all(|k| {
                    let c = circular_mean(m.iter().map(|y| y[k]));
                    wrap_angle(c - b[k]).abs() <= C3_CENTER_RAD
                })
        });
        good += ok as usize;
    }
    let frac = good as f64 / C3_TARGETS as f64;
    v.record(
        "C3 planar2 both branches recovered",
        frac >= C3_FRACTION,
        format!("{good}/{C3_TARGETS} targets with both clusters within {C3_CENTER_RAD} rad (need >= {:.0}%)", 100.0 * C3_FRACTION),
    );
}

fn criterion_5(v: &mut Verdicts, chain: &KinematicChain) {
    let targets = random_targets(chain, C5_TARGETS, derive_seed(SEED, 500));
    let cfg = DlsConfig::default();
    let mut complete = 0;
    let mut worst_gap = 0.0f64;
    for (i, x) in targets.iter().enumerate() {
        let found = dls_multi_restart(chain, x, &cfg, derive_seed(SEED, 501 + i as u64), Exec::default())
            .expect("dls runs");
        let all = analytic(chain, x).iter().all(|b| {
            let gap = found
                .iter()
                .filter(|(_, r)| *r < C5_RESIDUAL)
                .map(|(q, _)| angle_gap(q, b))
                .fold(f64::INFINITY, f64::min);
            worst_gap = worst_gap.max(gap);
            gap < C5_GAP
        });
        complete += all as usize;
    }
    v.record(
        "C5 DLS multi-restart finds every analytic solution",
        complete == C5_TARGETS,
        format!(
            "{complete}/{C5_TARGETS} targets complete with {} restarts, worst gap {worst_gap:.2e} rad (need < {C5_GAP:.0e}, residual < {C5_RESIDUAL:.0e} m)",
            cfg.restarts
        ),
    );
}

fn perturbed(chain: &KinematicChain, seed: u64) -> KinematicChain {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = chain.to_spec();
    for j in &mut spec.joints {
        let f = 1.0 + rng.gen_range(-C7_PERTURB..=C7_PERTURB);
        j.offset = j.offset.map(|o| o * f);
    }
    spec.name = format!("{}-perturbed", spec.name);
    KinematicChain::from_spec(&spec).expect("perturbed chain is valid")
}

fn criterion_7(v: &mut Verdicts, p2: &ExperimentOutcome) {
    let chain = perturbed(&p2.chain, derive_seed(SEED, 700));
    let data = Dataset::generate(&chain, C7_SAMPLES, derive_seed(SEED, 701), Exec::default()).unwrap();
    let targets = random_targets(&chain, 500, derive_seed(SEED, 702));
    let cfg = TrainConfig {
        epochs: C7_EPOCHS,
        seed: derive_seed(SEED, 703),
        ..TrainConfig::desk()
    };
    let score = |m: &IkModel| {
        evaluate_model(m, &chain, &targets, 20, 2.0, derive_seed(SEED, 704), Exec::default())
            .expect("evaluation runs")
            .0
            .mean_distance_cm
    };
    let tuned = train(p2.model.clone(), &data, &cfg).expect("fine-tuning runs").model;
    let fresh = IkModel::new(ModelConfig::for_chain(&chain, Preset::Desk), derive_seed(SEED, 705)).unwrap();
    let scratch = train(fresh, &data, &cfg).expect("training runs").model;
    let (ft, sc) = (score(&tuned), score(&scratch));
    v.record(
        "C7 fine-tuning on a perturbed chain",
        ft <= C7_RATIO * sc,
        format!(
            "fine-tuned {ft:.2} cm vs from scratch {sc:.2} cm on {C7_SAMPLES} samples, ratio {:.2} (need <= {C7_RATIO})",
            ft / sc
        ),
    );
}

fn criterion_6(v: &mut Verdicts, p4: &ExperimentOutcome) {
    let mut summaries = Vec::new();
    for p in 0..C6_PATHS {
        let (poses, joints) =
            generate_smooth_path(&p4.chain, C6_STEPS, derive_seed(SEED, 600 + 2 * p as u64)).unwrap();
        let (best, runs) = follow_path_best_of(
            &p4.model,
            &p4.chain,
            &poses,
            &joints[0],
            C6_RADIUS,
            C6_BEST_OF,
            derive_seed(SEED, 601 + 2 * p as u64),
            Exec::default(),
        )
        .expect("path following runs");
        summaries.push(PathSummary::from_runs(p, best, &runs));
    }
    let max_step = summaries.iter().map(|s| s.max_joint_step).fold(0.0, f64::max);
    let best: f64 = summaries.iter().map(|s| s.best_error_m).sum::<f64>() / C6_PATHS as f64;
    let single: f64 = summaries.iter().map(|s| s.mean_run_error_m).sum::<f64>() / C6_PATHS as f64;
    let diverse = summaries
        .iter()
        .filter(|s| s.max_pairwise_distance > 2.0 * C6_RADIUS)
        .count();
    v.record(
        "C6a path steps stay inside the neighborhood",
        max_step <= C6_RADIUS + 1e-12,
        format!("largest joint step {max_step:.4} rad over {C6_PATHS}x{C6_BEST_OF} runs (need <= {C6_RADIUS})"),
    );
    v.record(
        "C6b best-of-K beats a single run",
        best <= C6_BEST_RATIO * single,
        format!(
            "best-of-{C6_BEST_OF} {:.2} cm vs single-run average {:.2} cm, ratio {:.2} (need <= {C6_BEST_RATIO})",
            100.0 * best,
            100.0 * single,
            best / single
        ),
    );
    v.record(
        "C6c distinct trajectories per path",
        diverse == C6_PATHS,
        format!("{diverse}/{C6_PATHS} paths have two runs more than {} rad apart", 2.0 * C6_RADIUS),
    );
}

/// Runs the property-test binary built next to this one and times it.
fn criterion_8(v: &mut Verdicts) {
    let dir = std::env::current_exe().unwrap().parent().unwrap().to_path_buf();
    let newest = std::fs::read_dir(&dir)
        .into_iter()
        .flatten()
        .flatten()
        .filter(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.starts_with("properties-") && !name.contains('.')
        })
        .max_by_key(|e| e.metadata().and_then(|m| m.modified()).ok());
    let Some(bin) = newest else {
        v.record("C8 property suite runtime", false, "properties test binary not built".into());
        return;
    };
    let t = Instant::now();
    let status = std::process::Command::new(bin.path()).arg("-q").output();
    let elapsed = t.elapsed();
    let ok = matches!(&status, Ok(o) if o.status.success());
    v.record(
        "C8 property suite runtime",
        ok && elapsed < C8_LIMIT,
        format!(
            "{} in {:.1}s (need < {}s)",
            if ok { "passed" } else { "failed" },
            elapsed.as_secs_f64(),
            C8_LIMIT.as_secs()
        ),
    );
}

fn main() -> ExitCode {
    let mut v = Verdicts(Vec::new(), 0);
    let start = Instant::now();

    let p2 = experiment("planar2");
    let iknet = p2.report("iknet").unwrap();
    v.record(
        "C1 planar2 accuracy",
        iknet.mean_distance_cm <= C1_MEAN_CM && iknet.accuracy >= C1_ACC,
        format!(
            "mean {:.2} cm (need <= {C1_MEAN_CM}), acc@{}cm {:.1}% (need >= {:.0}%)",
            iknet.mean_distance_cm,
            iknet.threshold_cm,
            100.0 * iknet.accuracy,
            100.0 * C1_ACC
        ),
    );
    criterion_3(&mut v, &p2);
    let mlp = p2.report("mlp").unwrap();
    v.record(
        "C4 MLP baseline is far worse",
        mlp.mean_distance_cm >= C4_RATIO * iknet.mean_distance_cm,
        format!(
            "MLP {:.2} cm vs IKNet {:.2} cm, ratio {:.2} (need >= {C4_RATIO})",
            mlp.mean_distance_cm,
            iknet.mean_distance_cm,
            mlp.mean_distance_cm / iknet.mean_distance_cm
        ),
    );
    criterion_5(&mut v, &p2.chain);
    criterion_7(&mut v, &p2);
    drop(p2);

    let p4 = experiment("planar4");
    let iknet = p4.report("iknet").unwrap();
    v.record(
        "C2 planar4 accuracy",
        iknet.mean_distance_cm <= C2_MEAN_CM && iknet.accuracy >= C2_ACC,
        format!(
            "mean {:.2} cm (need <= {C2_MEAN_CM}), acc@{}cm {:.1}% (need >= {:.0}%)",
            iknet.mean_distance_cm,
            iknet.threshold_cm,
            100.0 * iknet.accuracy,
            100.0 * C2_ACC
        ),
    );
    criterion_6(&mut v, &p4);
    drop(p4);

    criterion_8(&mut v);

    let d4 = experiment("digit4-synth");
    let (iknet, mlp, dls) = (
        d4.report("iknet").unwrap(),
        d4.report("mlp").unwrap(),
        d4.report("dls").unwrap(),
    );
    v.record(
        "C9a digit4 IKNet vs MLP accuracy",
        iknet.accuracy >= mlp.accuracy + C9_ACC_MARGIN,
        format!(
            "acc@{}cm IKNet {:.1}% vs MLP {:.1}% (need a lead of >= {:.0} points)",
            iknet.threshold_cm,
            100.0 * iknet.accuracy,
            100.0 * mlp.accuracy,
            100.0 * C9_ACC_MARGIN
        ),
    );
    v.record(
        "C9b digit4 IKNet vs DLS best-of-16",
        iknet.mean_distance_cm <= C9_DLS_RATIO * dls.mean_distance_cm,
        format!(
            "IKNet {:.2} cm vs DLS {:.2} cm, ratio {:.2} (need <= {C9_DLS_RATIO})",
            iknet.mean_distance_cm,
            dls.mean_distance_cm,
            iknet.mean_distance_cm / dls.mean_distance_cm.max(f64::MIN_POSITIVE)
        ),
    );

    println!("\n== acceptance summary ({:.0}s) ==", start.elapsed().as_secs_f64());
    for line in &v.0 {
        println!("{line}");
    }
    println!("{} of {} criteria failed", v.1, v.0.len());
    let strict = std::env::var("IKNET_ACCEPTANCE_STRICT").is_ok_and(|s| s == "1");
    if strict && v.1 > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
