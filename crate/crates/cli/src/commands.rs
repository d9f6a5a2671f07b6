use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use rand::{Rng, RngCore};

use dmm_core::data::{normalize_states, Dataset};
use dmm_core::env::{
    generate_chain_dataset, generate_stitch_dataset, value_iteration, ChainDatasetSpec, DenseChainEnv, GridStitchEnv,
    StitchDatasetSpec,
};
use dmm_core::model::{
    count_parameters, load_checkpoint, mixer_stage_parameters, save_checkpoint, Checkpoint, DecisionModel, Variant,
};
use dmm_core::numkernel::Tensor;
use dmm_core::rng::{stream, Stream};
use dmm_core::rollout::{evaluate, random_baseline, rollout};
use dmm_core::ssm::{discretize_zoh, scan_with, ScanMode};
use dmm_core::train::train_with_checkpoints;
use dmm_core::verify;

use crate::config::{EnvKind, RtgTarget, RunConfig};
use crate::manifest::write_manifest;

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))
}

fn core<T>(r: dmm_core::Result<T>) -> Result<T> {
    r.map_err(|e| anyhow!("{e}"))
}

/// Loads `data.path` or generates the environment's dataset from the seed.
pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    if let Some(path) = &cfg.data.path {
        let ds = core(Dataset::load(path)).with_context(|| format!("loading dataset {}", path.display()))?;
        let (s, a) = (cfg.model.state_dim, cfg.model.action_dim);
        if ds.state_dim() != Some(s) || ds.action_dim() != Some(a) {
            bail!(
                "dataset {} has state/action dims {:?}/{:?}, env {} needs {s}/{a}",
                path.display(),
                ds.state_dim(),
                ds.action_dim(),
                cfg.env
            );
        }
        return Ok(ds);
    }
    let seed = stream(cfg.seed, Stream::Env).next_u64();
    core(match cfg.env {
        EnvKind::Grid => generate_stitch_dataset(
            &GridStitchEnv::default(),
            &StitchDatasetSpec {
                n_per_family: cfg.data.n_per_family,
                noise: cfg.data.grid_noise,
                seed,
                ..StitchDatasetSpec::default()
            },
        ),
        EnvKind::Chain => generate_chain_dataset(
            &DenseChainEnv::default(),
            &ChainDatasetSpec {
                n_trajectories: cfg.data.n_trajectories,
                noise: cfg.data.chain_noise,
                seed,
            },
        ),
    })
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    prepare_out(cfg)?;
    let ds = build_dataset(cfg)?;
    core(ds.save(&cfg.out.join("dataset.jsonl")))?;
    write_manifest(cfg, "gen-data", &["dataset.jsonl"])?;
    println!(
        "wrote {} trajectories ({} steps, max return {}) to {}",
        ds.len(),
        ds.total_steps(),
        ds.max_return().unwrap_or(f64::NAN),
        cfg.out.join("dataset.jsonl").display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    prepare_out(cfg)?;
    let ds = build_dataset(cfg)?;
    let mut artifacts = vec![];
    if cfg.data.path.is_none() {
        core(ds.save(&cfg.out.join("dataset.jsonl")))?;
        artifacts.push("dataset.jsonl".to_string());
    }
    let norm = if cfg.data.normalize_states {
        Some(core(normalize_states(&ds))?)
    } else {
        None
    };
    let mut model = core(DecisionModel::new(
        cfg.model.clone(),
        &mut stream(cfg.seed, Stream::Init),
    ))?;
    let metrics_path = cfg.out.join("metrics.csv");
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    let out = cfg.out.clone();
    let mut saved = vec![];
    let mut hook = |step: u64, m: &DecisionModel| -> dmm_core::Result<()> {
        let name = format!("ckpt_{step}.ckpt");
        let mut ck = Checkpoint::from_model(m, norm.clone());
        ck.extra.push(("step".into(), step.to_string()));
        save_checkpoint(&out.join(&name), &ck, cfg.precision)?;
        saved.push(name);
        Ok(())
    };
    let started = Instant::now();
    let report = core(train_with_checkpoints(
        &mut model,
        &ds,
        norm.as_ref(),
        &cfg.train,
        cfg.seed,
        Some(&mut metrics),
        cfg.checkpoint_every,
        Some(&mut hook),
    ))?;
    metrics.flush()?;
    drop(metrics);
    let mut ck = Checkpoint::from_model(&model, norm.clone());
    ck.extra.push(("step".into(), report.steps.to_string()));
    core(save_checkpoint(&cfg.out.join("model.ckpt"), &ck, cfg.precision))?;
    artifacts.extend(saved);
    artifacts.push("metrics.csv".into());
    artifacts.push("model.ckpt".into());
    let names: Vec<&str> = artifacts.iter().map(String::as_str).collect();
    write_manifest(cfg, "train", &names)?;
    println!(
        "trained {} updates in {:.1}s: first loss {:.6}, final loss {:.6}, last-100 mean {:.6}",
        report.steps,
        started.elapsed().as_secs_f64(),
        report.first_loss,
        report.final_loss,
        report.tail_loss
    );
    Ok(())
}

/// Oracle-optimal return of the configured environment.
pub fn expert_return(env: EnvKind) -> f64 {
    match env {
        EnvKind::Grid => {
            let g = GridStitchEnv::default();
            value_iteration(&g).optimal_return(&g)
        }
        // dense progress rewards sum to the distance covered
        EnvKind::Chain => DenseChainEnv::default().length,
    }
}

pub fn initial_rtg(cfg: &RunConfig) -> Result<f64> {
    Ok(match (cfg.eval.initial_rtg, cfg.env) {
        (RtgTarget::Fixed(v), _) => v,
        (RtgTarget::Auto, EnvKind::Grid) => expert_return(EnvKind::Grid),
        (RtgTarget::Auto, EnvKind::Chain) => {
            let ds = build_dataset(cfg)?;
            1.1 * ds.max_return().ok_or_else(|| anyhow!("empty dataset"))?
        }
    })
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    prepare_out(cfg)?;
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out.join("model.ckpt"));
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    let ck = core(load_checkpoint(&path)).with_context(|| format!("loading {}", path.display()))?;
    let model = core(ck.to_model())?;
    let mc = model.config();
    let probe = cfg.env.make();
    if (mc.state_dim, mc.action_dim, mc.discrete_actions) != (probe.state_dim(), probe.action_dim(), probe.discrete()) {
        bail!("checkpoint {} was not trained for env {}", path.display(), cfg.env);
    }
    let rtg = initial_rtg(cfg)?;
    let expert = expert_return(cfg.env);
    let random = core(random_baseline(
        cfg.env.make().as_mut(),
        cfg.eval.random_episodes,
        stream(cfg.seed, Stream::Eval).next_u64(),
    ))?;
    let kind = cfg.env;
    let make = move || kind.make();
    let report = core(evaluate(
        &model,
        &make,
        ck.norm.as_ref(),
        cfg.eval.episodes,
        rtg,
        random,
        expert,
    ))?;
    let text = format!(
        "checkpoint {}\nrandom_return {random}\n{}",
        path.display(),
        report.to_text()
    );
    fs::write(cfg.out.join("eval.txt"), &text)?;
    let mut artifacts = vec!["eval.txt"];
    if cfg.eval.trace {
        let r = core(rollout(&model, cfg.env.make().as_mut(), ck.norm.as_ref(), rtg))?;
        fs::write(cfg.out.join("trace.csv"), r.trace_csv())?;
        artifacts.push("trace.csv");
    }
    write_manifest(cfg, "eval", &artifacts)?;
    print!("{text}");
    Ok(())
}

pub fn verify(cfg: &RunConfig) -> Result<()> {
    let reports = verify::run_all(cfg.seed);
    println!("{:<12} {:>6} {:>6}  result", "suite", "checks", "failed");
    let mut failed_suites = 0;
    for r in &reports {
        let failed = r.checks.iter().filter(|c| !c.passed).count();
        println!(
            "{:<12} {:>6} {:>6}  {}",
            r.suite,
            r.checks.len(),
            failed,
            if failed == 0 { "pass" } else { "FAIL" }
        );
        for c in r.checks.iter().filter(|c| !c.passed) {
            println!("    {}: {}", c.name, c.detail);
        }
        failed_suites += usize::from(failed > 0);
    }
    if failed_suites > 0 {
        bail!("{failed_suites} of {} suites failed", reports.len());
    }
    Ok(())
}

pub fn count_params(cfg: &RunConfig) -> Result<()> {
    let mut rng = stream(cfg.seed, Stream::Init);
    let model = core(DecisionModel::new(cfg.model.clone(), &mut rng))?;
    let mut groups: BTreeMap<String, usize> = BTreeMap::new();
    for (name, t) in model.params().iter() {
        let parts: Vec<&str> = name.split('.').collect();
        let key = if parts[0] == "blocks" {
            format!("blocks.*.{}", parts[2])
        } else {
            parts[0].to_string()
        };
        *groups.entry(key).or_default() += t.numel();
    }
    println!("{:<24} {:>12}", "component", "params");
    for (k, v) in &groups {
        println!("{k:<24} {v:>12}");
    }
    let enumerated = model.num_parameters();
    let closed = count_parameters(&cfg.model);
    let single = count_parameters(&dmm_core::model::ModelConfig {
        variant: Variant::Single,
        ..cfg.model.clone()
    });
    let double = count_parameters(&dmm_core::model::ModelConfig {
        variant: Variant::Double,
        ..cfg.model.clone()
    });
    let inner = cfg.model.n_layers * mixer_stage_parameters(&cfg.model.inner_mixer_config());
    println!("{:<24} {:>12}", "total (enumerated)", enumerated);
    println!("{:<24} {:>12}", "total (closed form)", closed);
    println!("{:<24} {:>12}", "single", single);
    println!("{:<24} {:>12}", "double", double);
    println!("{:<24} {:>12}", "double - single", double - single);
    println!("{:<24} {:>12}", "inner mixer stages", inner);
    if enumerated != closed || double - single != inner {
        bail!("parameter accounting mismatch");
    }
    Ok(())
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

pub fn bench_scan(cfg: &RunConfig) -> Result<()> {
    prepare_out(cfg)?;
    let b = &cfg.bench;
    let mut rng = stream(cfg.seed, Stream::Eval);
    let mut csv = String::from("L,variant,lanes,ms_per_call\n");
    let mut variants = vec![("sequential", ScanMode::Sequential, 1)];
    variants.push(("parallel", ScanMode::Parallel { lanes: 1 }, 1));
    if b.lanes > 1 {
        variants.push(("parallel", ScanMode::Parallel { lanes: b.lanes }, b.lanes));
    }
    for &l in &b.lengths {
        let a = random_tensor(&[b.d_inner, b.n_state], -2.0, -0.1, &mut rng);
        let bt = random_tensor(&[l, b.n_state], -1.0, 1.0, &mut rng);
        let ct = random_tensor(&[l, b.n_state], -1.0, 1.0, &mut rng);
        let dt = random_tensor(&[l, b.d_inner], 0.001, 0.1, &mut rng);
        let d = random_tensor(&[b.d_inner], -1.0, 1.0, &mut rng);
        let u = random_tensor(&[l, b.d_inner], -1.0, 1.0, &mut rng);
        let (abar, bbar) = core(discretize_zoh(&a, &bt, &dt))?;
        let mut reference: Option<Tensor> = None;
        for &(name, mode, lanes) in &variants {
            let mut best = f64::INFINITY;
            let mut y = None;
            for _ in 0..b.repeats {
                let t0 = Instant::now();
                let out = core(scan_with(&abar, &bbar, &ct, &d, &u, mode))?;
                best = best.min(t0.elapsed().as_secs_f64() * 1e3);
                y = Some(out);
            }
            let y = y.expect("at least one repeat");
            if let Some(r) = &reference {
                let dev = r
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(p, q)| (p - q).abs() / p.abs().max(1e-12))
                    .fold(0.0, f64::max);
                if dev > 1e-5 {
                    bail!("{name} scan deviates from sequential by {dev:e} at L={l}");
                }
            } else {
                reference = Some(y);
            }
            csv.push_str(&format!("{l},{name},{lanes},{best:.4}\n"));
        }
    }
    fs::write(cfg.out.join("bench_scan.csv"), &csv)?;
    write_manifest(cfg, "bench-scan", &["bench_scan.csv"])?;
    print!("{csv}");
    Ok(())
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("config {}", p.display()))
        }
        None => Ok(RunConfig::default()),
    }
}

pub fn apply_overrides(cfg: &mut RunConfig, out: Option<PathBuf>, seed: Option<u64>) {
    if let Some(o) = out {
        cfg.out = o;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
}
