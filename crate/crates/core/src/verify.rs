//! Fast self-checks of every component, runnable from a release binary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{compute_rtg, normalize_states, sample_subsequence, Dataset, Trajectory};
use crate::env::{
    generate_chain_dataset, generate_stitch_dataset, value_iteration, ChainDatasetSpec, DenseChainEnv, Environment,
    GridStitchEnv, StitchDatasetSpec,
};
use crate::error::Result;
use crate::mixer::{mix, MixerConfig, MixerKind, MixerWeights};
use crate::model::{count_parameters, DecisionModel, ModelConfig, ModelInput, Variant};
use crate::numkernel::{check_gradients, Activation, Tensor};
use crate::rollout::{normalized_score, random_baseline, Context};
use crate::ssm::{
    lti_apply, lti_kernel, scan_with, selective_forward_with, zoh_coefficients, LtiSystem, ScanMode,
    SelectiveSSMParams, SelectiveVars,
};
use crate::train::{loss_dmm, lr_schedule, masked_mse, train, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

type Outcome = Result<(bool, String)>;

struct Suite {
    name: &'static str,
    checks: Vec<Check>,
}

impl Suite {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            checks: Vec::new(),
        }
    }

    fn run(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        let (passed, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            detail,
        });
    }

    fn done(self) -> SuiteReport {
        SuiteReport {
            suite: self.name,
            checks: self.checks,
        }
    }
}

fn below(value: f64, tol: f64) -> (bool, String) {
    (value <= tol, format!("{value:.3e} (tol {tol:.0e})"))
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn tiny_model(variant: Variant, scan: ScanMode) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d: 4,
        n_state: 2,
        expand: 2,
        context_k: 3,
        state_dim: 2,
        action_dim: 2,
        dropout: 0.0,
        variant,
        scan,
        ..ModelConfig::default()
    }
}

fn model_input(b: usize, k: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ModelInput {
    ModelInput {
        rtg: random(&[b, k, 1], rng),
        states: random(&[b, k, cfg.state_dim], rng),
        actions: random(&[b, k, cfg.action_dim], rng),
    }
}

/// Runs every suite with randomness derived from `seed`.
pub fn run_all(seed: u64) -> Vec<SuiteReport> {
    vec![
        numkernel(seed),
        ssm(seed),
        mixer(seed),
        model(seed),
        data(seed),
        train_suite(seed),
        env(seed),
        rollout(seed),
    ]
}

fn numkernel(seed: u64) -> SuiteReport {
    let mut s = Suite::new("numkernel");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&[3, 4], &mut rng);
    let w = random(&[5, 4], &mut rng);
    let b = random(&[5], &mut rng);
    s.run("linear gradient", || {
        let errs = check_gradients(
            |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum(y2))
            },
            &[x.clone(), w.clone(), b.clone()],
            1e-5,
        )?;
        Ok(below(errs.into_iter().fold(0.0, f64::max), 1e-6))
    });
    let g = random(&[4], &mut rng);
    let beta = random(&[4], &mut rng);
    s.run("layer norm gradient", || {
        let errs = check_gradients(
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            },
            &[x.clone(), g.clone(), beta.clone()],
            1e-5,
        )?;
        Ok(below(errs.into_iter().fold(0.0, f64::max), 1e-6))
    });
    for act in [Activation::Silu, Activation::Gelu] {
        s.run(&format!("{act} gradient"), || {
            let errs = check_gradients(
                |t, v| {
                    let y = t.activation(v[0], act);
                    let y = t.softplus(y);
                    Ok(t.mean(y))
                },
                std::slice::from_ref(&x),
                1e-5,
            )?;
            Ok(below(errs[0], 1e-6))
        });
    }
    s.done()
}

fn ssm(seed: u64) -> SuiteReport {
    let mut s = Suite::new("ssm");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let params = SelectiveSSMParams::init(6, 4, &mut rng);
    let u = random(&[37, 6], &mut rng);
    s.run("sequential equals parallel scan", || {
        let a = selective_forward_with(&u, &params, ScanMode::Sequential)?;
        let mut worst: f64 = 0.0;
        for lanes in [1, 3] {
            let b = selective_forward_with(&u, &params, ScanMode::Parallel { lanes })?;
            worst = worst.max(a.max_abs_diff(&b));
        }
        Ok(below(worst, 1e-10))
    });
    s.run("zoh small-step limit", || {
        let mut worst: f64 = 0.0;
        for &(delta, a) in &[(1e-9, -1.0), (1e-3, -2.0), (0.5, -1e-12)] {
            let (abar, f) = zoh_coefficients(delta, a);
            let exact_abar = (delta * a).exp();
            let exact_f = (delta * a).exp_m1() / a;
            worst = worst
                .max((abar - exact_abar).abs())
                .max(((f - exact_f) / exact_f).abs());
        }
        Ok(below(worst, 1e-12))
    });
    s.run("time-invariant kernel equals recurrence", || {
        let sys = LtiSystem {
            a: vec![-0.5, -1.5, -3.0],
            b: vec![1.0, 0.5, -0.25],
            c: vec![0.3, -0.7, 1.1],
            delta: 0.1,
        };
        let l = 50;
        let input = random(&[l, 1], &mut rng);
        let conv = lti_apply(&lti_kernel(&sys, l)?, &input.clone().reshape(&[l])?)?;
        let n = sys.a.len();
        let mut abar = vec![0.0; l * n];
        let mut bbar = vec![0.0; l * n];
        for t in 0..l {
            for k in 0..n {
                let (ab, f) = zoh_coefficients(sys.delta, sys.a[k]);
                abar[t * n + k] = ab;
                bbar[t * n + k] = f * sys.b[k];
            }
        }
        let c = Tensor::from_fn(&[l, n], |i| sys.c[i % n]);
        let rec = scan_with(
            &Tensor::new(&[l, 1, n], abar)?,
            &Tensor::new(&[l, 1, n], bbar)?,
            &c,
            &Tensor::zeros(&[1]),
            &input,
            ScanMode::Sequential,
        )?;
        Ok(below(conv.max_abs_diff(&rec.reshape(&[l])?), 1e-12))
    });
    for mode in [ScanMode::Sequential, ScanMode::Parallel { lanes: 2 }] {
        let p = SelectiveSSMParams::init(3, 2, &mut rng);
        let x = random(&[2, 5, 3], &mut rng);
        s.run(&format!("selective {mode} gradient"), || {
            let mut inputs = vec![x.clone()];
            inputs.extend(p.tensors().into_iter().cloned());
            let errs = check_gradients(
                |t, v| {
                    let vars = SelectiveVars {
                        a_log: v[1],
                        w_delta: v[2],
                        delta_bias: v[3],
                        w_b: v[4],
                        w_c: v[5],
                        d: v[6],
                    };
                    let y = crate::ssm::selective_ssm(t, v[0], &vars, mode)?;
                    let y = t.tanh(y);
                    Ok(t.sum(y))
                },
                &inputs,
                1e-5,
            )?;
            Ok(below(errs.into_iter().fold(0.0, f64::max), 1e-6))
        });
    }
    s.done()
}

fn mixer(seed: u64) -> SuiteReport {
    let mut s = Suite::new("mixer");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
    for kind in [MixerKind::MmConv, MixerKind::MmLinear] {
        let cfg = MixerConfig { kind, window: 6, d: 4 };
        let w = MixerWeights::init(&cfg, &mut rng);
        let seq = random(&[15, 4], &mut rng);
        s.run(&format!("{kind} causal"), || {
            let base = mix(&seq, &w, &cfg)?;
            for p in 0..15 {
                let mut moved = seq.clone();
                for v in &mut moved.data_mut()[p * 4..(p + 1) * 4] {
                    *v += 1.0;
                }
                let out = mix(&moved, &w, &cfg)?;
                if out.data()[..p * 4] != base.data()[..p * 4] {
                    return Ok((false, format!("position {p} leaks into the past")));
                }
            }
            Ok((true, "no leaks".into()))
        });
        s.run(&format!("{kind} modalities separate"), || {
            let mut cut = w.clone();
            let per = cut.kernel.numel() / 3;
            cut.kernel.data_mut()[per..2 * per].fill(0.0);
            let (a, b) = (mix(&seq, &w, &cfg)?, mix(&seq, &cut, &cfg)?);
            for p in 0..15 {
                let (ra, rb) = (&a.data()[p * 4..(p + 1) * 4], &b.data()[p * 4..(p + 1) * 4]);
                let expect_bias = &w.bias.data()[4..8];
                let ok = if p % 3 == 1 { rb == expect_bias } else { ra == rb };
                if !ok {
                    return Ok((false, format!("position {p} mixes modalities")));
                }
            }
            Ok((true, "per-modality kernels independent".into()))
        });
    }
    s.done()
}

fn model(seed: u64) -> SuiteReport {
    let mut s = Suite::new("model");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
    for variant in [Variant::Single, Variant::Double] {
        let cfg = tiny_model(variant, ScanMode::default());
        s.run(&format!("{variant} parameter count"), || {
            let m = DecisionModel::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
            let (a, b) = (m.num_parameters(), count_parameters(&cfg));
            Ok((a == b, format!("store {a}, closed form {b}")))
        });
    }
    let cfg = tiny_model(Variant::Double, ScanMode::default());
    let m = match DecisionModel::new(cfg.clone(), &mut rng) {
        Ok(m) => m,
        Err(e) => {
            s.run("construct", || Err(e));
            return s.done();
        }
    };
    let inp = model_input(2, 3, &cfg, &mut rng);
    s.run("causal over steps", || {
        let base = m.predict(&inp)?;
        let a = cfg.action_dim;
        for step in 0..3 {
            let mut moved = inp.clone();
            for b in 0..2 {
                moved.rtg.data_mut()[b * 3 + step] += 1.0;
                moved.states.data_mut()[(b * 3 + step) * 2] += 1.0;
                moved.actions.data_mut()[(b * 3 + step) * 2 + 1] += 1.0;
            }
            let out = m.predict(&moved)?;
            for b in 0..2 {
                let range = b * 3 * a..(b * 3 + step) * a;
                if out.data()[range.clone()] != base.data()[range] {
                    return Ok((false, format!("step {step} changes earlier predictions")));
                }
            }
        }
        Ok((true, "earlier predictions unchanged".into()))
    });
    s.run("action at a step does not feed its own prediction", || {
        let base = m.predict(&inp)?;
        let mut moved = inp.clone();
        moved.actions.data_mut()[4] += 5.0;
        let out = m.predict(&moved)?;
        let same = out.data()[..6] == base.data()[..6];
        Ok((
            same,
            format!("prediction at step 2 {}", if same { "unchanged" } else { "changed" }),
        ))
    });
    s.run("double with zeroed inner mixers equals single", || {
        let mut double = m.clone();
        double.zero_mixers(true);
        let mut single = DecisionModel::new(tiny_model(Variant::Single, ScanMode::default()), &mut rng)?;
        let ids: Vec<_> = single.params().ids().collect();
        for id in ids {
            let name = single.params().name(id).to_string();
            let Some(src) = double.params().find(&name) else {
                return Ok((false, format!("{name} missing from the double model")));
            };
            let t = double.params().get(src).clone();
            *single.params_mut().get_mut(id) = t;
        }
        let diff = double.predict(&inp)?.max_abs_diff(&single.predict(&inp)?);
        Ok(below(diff, 1e-12))
    });
    s.run("model gradient", || {
        let small = DecisionModel::new(
            ModelConfig {
                n_layers: 1,
                d: 3,
                n_state: 2,
                expand: 1,
                context_k: 2,
                ..tiny_model(Variant::Double, ScanMode::Sequential)
            },
            &mut rng,
        )?;
        let inp = model_input(1, 2, small.config(), &mut rng);
        let target = random(&[1, 2, 2], &mut rng);
        let mask = Tensor::full(&[1, 2], 1.0);
        let xs: Vec<Tensor> = small.params().iter().map(|(_, t)| t.clone()).collect();
        let errs = check_gradients(
            |t, v| {
                let pred = small.forward_on(t, v, &inp, None)?;
                masked_mse(t, pred, &target, &mask)
            },
            &xs,
            1e-5,
        )?;
        Ok(below(errs.into_iter().fold(0.0, f64::max), 1e-5))
    });
    s.done()
}

fn data(seed: u64) -> SuiteReport {
    let mut s = Suite::new("data");
    s.run("returns-to-go", || {
        let r = Tensor::new(&[4], vec![1.0, -2.0, 0.5, 3.0])?;
        let g = compute_rtg(&r)?;
        Ok((g.data() == [2.5, 1.5, 3.5, 3.0], format!("{:?}", g.data())))
    });
    s.run("front padding", || {
        let traj = Trajectory::from_rows(&[vec![1.0], vec![2.0]], &[vec![0.1], vec![0.2]], &[1.0, 1.0])?;
        let w = sample_subsequence(&traj, 1, 4)?;
        let ok = w.mask.data() == [0.0, 0.0, 1.0, 1.0]
            && w.rtg.data() == [0.0, 0.0, 2.0, 1.0]
            && w.states.data() == [0.0, 0.0, 1.0, 2.0];
        Ok((ok, format!("mask {:?}", w.mask.data())))
    });
    s.run("normalization", || {
        let ds = generate_chain_dataset(
            &DenseChainEnv::default(),
            &ChainDatasetSpec {
                seed,
                ..ChainDatasetSpec::default()
            },
        )?;
        let norm = normalize_states(&ds)?;
        let mut z = Vec::new();
        for t in ds.trajectories() {
            for i in 0..t.len() {
                z.extend(norm.transform(t.state(i)));
            }
        }
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(below(mean.abs().max((var - 1.0).abs()), 1e-9))
    });
    s.run("jsonl round trip", || {
        let ds = Dataset::new(vec![Trajectory::from_rows(
            &[vec![0.25, -1.0], vec![0.5, 0.1]],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[-1.0, 10.0],
        )?])?;
        let mut buf = Vec::new();
        ds.write_jsonl(&mut buf)?;
        let back = Dataset::read_jsonl(buf.as_slice())?;
        let same = back.trajectories()[0].states() == ds.trajectories()[0].states()
            && back.trajectories()[0].rtg() == ds.trajectories()[0].rtg();
        Ok((same, "states and returns preserved".into()))
    });
    s.done()
}

fn train_suite(seed: u64) -> SuiteReport {
    let mut s = Suite::new("train");
    s.run("warmup schedule", || {
        let cfg = TrainConfig {
            lr: 1e-3,
            warmup_steps: 10,
            ..TrainConfig::default()
        };
        let (a, b, c) = (lr_schedule(0, &cfg), lr_schedule(4, &cfg), lr_schedule(50, &cfg));
        let ok = (a - 1e-4).abs() < 1e-18 && (b - 5e-4).abs() < 1e-18 && c == 1e-3;
        Ok((ok, format!("{a:e} {b:e} {c:e}")))
    });
    s.run("masked loss ignores padding", || {
        let pred = Tensor::new(&[1, 2, 1], vec![100.0, 1.0])?;
        let target = Tensor::new(&[1, 2, 1], vec![0.0, 3.0])?;
        let mask = Tensor::new(&[1, 2], vec![0.0, 1.0])?;
        let l = loss_dmm(&pred, &target, &mask)?;
        Ok((l == 4.0, format!("loss {l}")))
    });
    s.run("short run is reproducible and learns", || {
        let env = DenseChainEnv::default();
        let ds = generate_chain_dataset(
            &env,
            &ChainDatasetSpec {
                n_trajectories: 10,
                seed,
                ..ChainDatasetSpec::default()
            },
        )?;
        let cfg = TrainConfig {
            batch_size: 4,
            total_updates: 60,
            lr: 3e-3,
            warmup_steps: 5,
            log_every: 10,
            ..TrainConfig::default()
        };
        let model_cfg = ModelConfig {
            state_dim: 1,
            action_dim: 1,
            ..tiny_model(Variant::Single, ScanMode::Sequential)
        };
        let mut runs = Vec::new();
        for _ in 0..2 {
            let mut m = DecisionModel::new(model_cfg.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
            let mut csv = Vec::new();
            let rep = train(&mut m, &ds, None, &cfg, seed, Some(&mut csv))?;
            runs.push((rep, csv));
        }
        let (rep, csv) = &runs[0];
        let ok = csv == &runs[1].1 && rep.tail_loss < rep.first_loss;
        Ok((ok, format!("loss {:.4} -> {:.4}", rep.first_loss, rep.tail_loss)))
    });
    s.done()
}

fn env(seed: u64) -> SuiteReport {
    let mut s = Suite::new("env");
    let grid = GridStitchEnv::default();
    s.run("grid optimum", || {
        let table = value_iteration(&grid);
        let (ret, steps, _) = table.greedy_rollout(&grid);
        Ok((ret == 5.0 && steps == 6, format!("return {ret} in {steps} steps")))
    });
    s.run("stitch data is suboptimal", || {
        let ds = generate_stitch_dataset(
            &grid,
            &StitchDatasetSpec {
                seed,
                ..StitchDatasetSpec::default()
            },
        )?;
        let best = ds.max_return().unwrap_or(f64::NAN);
        Ok((best < 5.0, format!("best logged return {best}")))
    });
    s.run("chain rewards telescope", || {
        let mut chain = DenseChainEnv::default();
        chain.reset();
        let mut total = 0.0;
        loop {
            let out = chain.step(&[1.0])?;
            total += out.reward;
            if out.done {
                break;
            }
        }
        Ok(below((total - chain.length).abs(), 1e-12))
    });
    s.done()
}

fn rollout(seed: u64) -> SuiteReport {
    let mut s = Suite::new("rollout");
    s.run("context window", || {
        let mut c = Context::new(2);
        for i in 0..4 {
            c.push(i as f64, vec![i as f64], 1);
            c.set_last_action(vec![i as f64]);
        }
        let inp = c.to_input(1, 1)?;
        Ok((inp.rtg.data() == [2.0, 3.0], format!("{:?}", inp.rtg.data())))
    });
    s.run("score endpoints", || {
        let (a, b) = (normalized_score(5.0, -20.0, 5.0)?, normalized_score(-20.0, -20.0, 5.0)?);
        Ok((a == 100.0 && b == 0.0, format!("{a} {b}")))
    });
    s.run("random baseline is reproducible", || {
        let mut env = GridStitchEnv::default();
        let a = random_baseline(&mut env, 20, seed)?;
        let b = random_baseline(&mut env, 20, seed)?;
        Ok((a == b && a.is_finite(), format!("{a}")))
    });
    s.done()
}
