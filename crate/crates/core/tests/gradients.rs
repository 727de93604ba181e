//! Analytic gradients against central finite differences.

use iknet::gmm::{self, GmmParams};
use iknet::kinematics::{KinematicChain, Pose};
use iknet::model::{IkModel, ModelConfig};
use iknet::numerics::{Mode, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Relative error with an absolute floor so near-zero gradients compare sanely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()).max(1e-6))
}

/// Checks d(f)/d(inputs[which]) where `build` records a scalar on a tape.
fn check<F>(inputs: &[Tensor], which: usize, tol: f64, build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let run = |vals: &[Tensor]| -> (f64, Option<Tensor>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let g = tape.backward(out);
        (tape.value(out).data()[0], g.get(vars[which]).cloned())
    };
    let (_, analytic) = run(inputs);
    let analytic = analytic.unwrap_or_else(|| Tensor::zeros(inputs[which].shape()));
    for i in 0..inputs[which].len() {
        let mut plus = inputs.to_vec();
        plus[which].data_mut()[i] += H;
        let mut minus = inputs.to_vec();
        minus[which].data_mut()[i] -= H;
        let numeric = (run(&plus).0 - run(&minus).0) / (2.0 * H);
        let a = analytic.data()[i];
        assert!(
            rel_err(a, numeric) < tol,
            "input {which} elem {i}: analytic {a} vs numeric {numeric}"
        );
    }
}

#[test]
fn matmul_sum_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_tensor(&mut rng, &[3, 3], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[3, 3], -1.0, 1.0);
    for which in 0..2 {
        check(&[a.clone(), b.clone()], which, 1e-6, |t, v| {
            let p = t.matmul(v[0], v[1]).unwrap();
            t.sum(p)
        });
    }
}

#[test]
fn relu_gradient_away_from_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut x = random_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    for v in x.data_mut() {
        if v.abs() < 0.1 {
            *v += 0.2f64.copysign(*v);
        }
    }
    let w = random_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    check(&[x, w], 0, 1e-6, |t, v| {
        let r = t.relu(v[0]);
        // weight the outputs so each element's gradient differs
        let s = t.slice_cols(r, 0, 5).unwrap();
        let prod = t.batched_matvec(v[1], s, 1, 5).unwrap();
        t.sum(prod)
    });
}

#[test]
fn relu_forward_cases() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    let s = tape.sum(r);
    let g = tape.backward(s);
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn batch_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, &[6, 4], -2.0, 2.0);
    let gamma = random_tensor(&mut rng, &[4], 0.5, 1.5);
    let beta = random_tensor(&mut rng, &[4], -0.5, 0.5);
    let w = random_tensor(&mut rng, &[6, 4], -1.0, 1.0);
    for which in 0..3 {
        check(
            &[x.clone(), gamma.clone(), beta.clone(), w.clone()],
            which,
            1e-4,
            |t, v| {
                let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5).unwrap();
                let p = t.batched_matvec(v[3], y, 1, 4).unwrap();
                t.sum(p)
            },
        );
    }
}

#[test]
fn batch_norm_normalizes_columns() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor(&mut rng, &[50, 3], 1.0, 5.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::filled(&[3], 1.0));
    let b = tape.constant(Tensor::zeros(&[3]));
    let (y, _) = tape.batch_norm(xv, g, b, 1e-5).unwrap();
    let y = tape.value(y);
    for j in 0..3 {
        let col: Vec<f64> = (0..50).map(|r| y.get(r, j)).collect();
        let mean = col.iter().sum::<f64>() / 50.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn batched_matvec_slice_add_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let theta = random_tensor(&mut rng, &[3, 12 + 4], -1.0, 1.0);
    let x = random_tensor(&mut rng, &[3, 3], -1.0, 1.0);
    for which in 0..2 {
        check(&[theta.clone(), x.clone()], which, 1e-6, |t, v| {
            let w = t.slice_cols(v[0], 0, 12).unwrap();
            let b = t.slice_cols(v[0], 12, 4).unwrap();
            let wx = t.batched_matvec(w, v[1], 4, 3).unwrap();
            let y = t.add(wx, b).unwrap();
            let sq = t.mse(y, &Tensor::zeros(&[3, 4])).unwrap();
            t.scale(sq, 3.0)
        });
    }
}

#[test]
fn mixture_log_prob_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..100 {
        let m = 1 + trial % 5;
        let raw: Vec<f64> = (0..3 * m).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let y = rng.gen_range(-1.0..1.0);
        let params = GmmParams::from_raw(&raw, 1e-3).unwrap();
        let (_, g) = params.log_prob_with_grad(y);
        let support: Vec<bool> = params.priors().iter().map(|p| *p > 0.0).collect();
        for i in 0..3 * m {
            let lp = |delta: f64| {
                let mut r = raw.clone();
                r[i] += delta;
                GmmParams::from_raw(&r, 1e-3).unwrap().log_prob(y)
            };
            let numeric = (lp(H) - lp(-H)) / (2.0 * H);
            // finite differences can cross a support boundary of sparsemax;
            // skip prior coordinates sitting within H of one
            let priors_plus = {
                let mut r = raw.clone();
                r[i] += H;
                GmmParams::from_raw(&r, 1e-3).unwrap().priors()
            };
            let same_support = priors_plus
                .iter()
                .zip(&support)
                .all(|(p, s)| (*p > 0.0) == *s);
            if !same_support {
                continue;
            }
            assert!(
                rel_err(g[i], numeric) < 1e-4,
                "trial {trial} coord {i}: {} vs {numeric}",
                g[i]
            );
        }
    }
}

#[test]
fn composite_mlp_matches_chain_rule() {
    // 3-layer MLP: gradients through the whole graph against finite
    // differences on every weight.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_tensor(&mut rng, &[5, 3], -1.0, 1.0);
    let ws = [
        random_tensor(&mut rng, &[3, 6], -1.0, 1.0),
        random_tensor(&mut rng, &[6], -0.2, 0.2),
        random_tensor(&mut rng, &[6, 6], -1.0, 1.0),
        random_tensor(&mut rng, &[6], -0.2, 0.2),
        random_tensor(&mut rng, &[6, 2], -1.0, 1.0),
        random_tensor(&mut rng, &[2], -0.2, 0.2),
    ];
    let target = random_tensor(&mut rng, &[5, 2], -1.0, 1.0);
    let mut inputs = ws.to_vec();
    inputs.push(x);
    for which in 0..6 {
        check(&inputs, which, 1e-4, |t, v| {
            let mut h = v[6];
            for l in 0..3 {
                let z = t.matmul(h, v[2 * l]).unwrap();
                h = t.add_bias(z, v[2 * l + 1]).unwrap();
                if l < 2 {
                    h = t.relu(h);
                }
            }
            t.mse(h, &target).unwrap()
        });
    }
}

#[test]
fn model_loss_gradient_end_to_end() {
    let chain = KinematicChain::preset("planar2").unwrap();
    let cfg = ModelConfig::tiny(&chain, 2, 8);
    let mut model = IkModel::new(cfg, 3).unwrap();
    // move the heads away from their tiny init so every path carries signal
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let poses: Vec<Pose> = (0..4)
        .map(|_| chain.sample_reachable(&mut rng).1)
        .collect();
    let angles: Vec<Vec<f64>> = poses
        .iter()
        .enumerate()
        .map(|(i, _)| vec![-1.0 + 0.5 * i as f64, 0.3 * i as f64 - 0.4])
        .collect();

    let (_, grads, _) = model.loss_and_grads(&poses, &angles).unwrap();
    let n_params = model.params().len();
    let mut checked = 0;
    for pi in 0..n_params {
        let len = model.params()[pi].len();
        for e in 0..len {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params_mut()[pi].data_mut()[e] += delta;
                m.nll_loss(&poses, &angles, Mode::Train).unwrap()
            };
            let numeric = (eval(H) - eval(-H)) / (2.0 * H);
            let a = grads[pi].data()[e];
            // ReLU kinks and sparsemax support changes make a handful of
            // coordinates non-differentiable at the probe point; detect them
            // by one-sided disagreement and skip.
            let fwd = (eval(H) - eval(0.0)) / H;
            let bwd = (eval(0.0) - eval(-H)) / H;
            if rel_err(fwd, bwd) > 1e-2 {
                continue;
            }
            assert!(
                rel_err(a, numeric) < 1e-4,
                "param {pi} elem {e}: analytic {a} vs numeric {numeric}"
            );
            checked += 1;
        }
    }
    assert!(checked > 100, "only {checked} coordinates checked");
}

#[test]
fn mixture_density_integrates_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let m = rng.gen_range(1..5);
        let raw: Vec<f64> = (0..3 * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mix = GmmParams::from_raw(&raw, gmm::DEFAULT_VAR_FLOOR).unwrap().mixture();
        let sd_max = mix
            .variances
            .iter()
            .fold(0.0f64, |a, &v| a.max(v.sqrt()));
        let lo = mix.means.iter().cloned().fold(f64::INFINITY, f64::min) - 10.0 * sd_max;
        let hi = mix.means.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 10.0 * sd_max;
        let n = 200_000;
        let step = (hi - lo) / n as f64;
        let mut integral = 0.0;
        for i in 0..=n {
            let y = lo + i as f64 * step;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            integral += w * mix.log_prob(y).exp();
        }
        integral *= step;
        assert!((integral - 1.0).abs() < 1e-3, "integral {integral}");
    }
}
