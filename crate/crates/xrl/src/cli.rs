//! Command-line orchestration: subcommands, config assembly, checkpointing,
//! and report emission.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime failure. All
//! subcommands are deterministic given identical config and seed; output
//! CSVs carry no timestamps.

use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::attack::{explanation_attack, pgd_attack, ExplAttackConfig, PgdConfig, PgdObjective};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{load_dataset, synth_blobs, DataFormat, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate_robustness, select_pairs, write_report_csv, PairSet};
use crate::explain::{saliency, ExplKind, ExplMethod, SaliencyMap};
use crate::landscape::{
    default_gammas, probe_classification_landscape, probe_explanation_landscape,
};
use crate::nn::{ModelSpec, ParamSet};
use crate::seeds::subseed;
use crate::train::{default_learning_rate, train, AdamConfig, Regime, TrainConfig};

const USAGE: &str = "usage: xrl <subcommand> [--config PATH] [--seed N] [--out DIR] [--KEY VALUE ...]
subcommands:
  train          train a model; writes checkpoint.json and history.csv
  attack-cls     PGD accuracy of a checkpoint; writes attack_cls.csv
  attack-expl    per-pair explanation attacks; writes attack_expl.csv
  cluster-pairs  build a representative pair set; writes pairs.json
  eval           the four robustness metrics; writes eval.csv
  landscape      loss-landscape sweep; writes landscape.csv
  report         merge eval CSVs into one comparison table; writes report.csv
overrides use flat dotted config keys, e.g. --train.lambda 50000";

/// Cap rayon's worker count from the XRL_THREADS environment variable.
/// Call once at process start.
pub fn init_threads() {
    if let Ok(v) = std::env::var("XRL_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

/// Parse argv (without the program name) and run. Returns the exit status.
pub fn run_command(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            match e {
                Error::Config(_) => {
                    eprintln!("{}", USAGE);
                    1
                }
                _ => 2,
            }
        }
    }
}

fn parse_args(args: &[String]) -> Result<(String, RunConfig)> {
    let sub = args
        .first()
        .ok_or_else(|| Error::Config("no subcommand given".into()))?
        .clone();
    let known = [
        "train",
        "attack-cls",
        "attack-expl",
        "cluster-pairs",
        "eval",
        "landscape",
        "report",
    ];
    if !known.contains(&sub.as_str()) {
        return Err(Error::Config(format!("unknown subcommand '{}'", sub)));
    }
    // --config is applied first so explicit flags override the file
    let mut flags: Vec<(String, String)> = Vec::new();
    let mut config_path: Option<PathBuf> = None;
    let mut i = 1;
    while i < args.len() {
        let flag = &args[i];
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected a --flag, got '{}'", flag)))?;
        let value = args
            .get(i + 1)
            .ok_or_else(|| Error::Config(format!("flag '--{}' needs a value", key)))?;
        if key == "config" {
            config_path = Some(PathBuf::from(value));
        } else {
            flags.push((key.to_string(), value.clone()));
        }
        i += 2;
    }
    let mut cfg = match config_path {
        Some(p) => RunConfig::from_file(&p)?,
        None => RunConfig::empty(),
    };
    for (k, v) in flags {
        cfg.set(&k, &v)?;
    }
    Ok((sub, cfg))
}

fn dispatch(args: &[String]) -> Result<()> {
    let (sub, cfg) = parse_args(args)?;
    let out = PathBuf::from(cfg.str_or("out", "."));
    std::fs::create_dir_all(&out)?;
    match sub.as_str() {
        "train" => cmd_train(&cfg, &out),
        "attack-cls" => cmd_attack_cls(&cfg, &out),
        "attack-expl" => cmd_attack_expl(&cfg, &out),
        "cluster-pairs" => cmd_cluster_pairs(&cfg, &out),
        "eval" => cmd_eval(&cfg, &out),
        "landscape" => cmd_landscape(&cfg, &out),
        "report" => cmd_report(&cfg, &out),
        _ => unreachable!("subcommand validated in parse_args"),
    }
}

fn global_seed(cfg: &RunConfig) -> Result<u64> {
    cfg.u64_or("seed", 0)
}

fn build_dataset(cfg: &RunConfig, test: bool) -> Result<Dataset> {
    let kind = cfg.str_or("dataset.kind", "synth");
    let limit_key = if test { "dataset.test_limit" } else { "dataset.limit" };
    let limit = cfg.usize_of(limit_key)?;
    match kind {
        "synth" => {
            let classes = cfg.usize_or("dataset.classes", 3)?;
            let per_class = cfg.usize_or("dataset.per_class", 20)?;
            let side = cfg.usize_or("dataset.image_side", 8)?;
            let noise = cfg.f64_or("dataset.noise", 0.08)?;
            let label = if test { "data_test" } else { "data" };
            let ds = synth_blobs(
                classes,
                per_class,
                side,
                noise,
                subseed(global_seed(cfg)?, label),
            );
            Ok(match limit {
                Some(n) => ds.limit(n),
                None => ds,
            })
        }
        "idx" => {
            let (ik, lk) = if test {
                ("dataset.test_images", "dataset.test_labels")
            } else {
                ("dataset.images", "dataset.labels")
            };
            let images = cfg.path_of(ik)?;
            let labels = cfg.path_of(lk)?;
            let classes = cfg.usize_or("dataset.classes", 10)?;
            load_dataset(DataFormat::Idx, &[&images, &labels], classes, limit)
        }
        "cifar" => {
            let paths: Vec<PathBuf> = cfg
                .require("dataset.paths")?
                .split(',')
                .map(|s| PathBuf::from(s.trim()))
                .collect();
            let refs: Vec<&Path> = paths.iter().map(|p| p.as_path()).collect();
            load_dataset(DataFormat::CifarBinary, &refs, 10, limit)
        }
        other => Err(Error::Config(format!("unknown dataset.kind '{}'", other))),
    }
}

fn build_spec(cfg: &RunConfig, ds: &Dataset) -> Result<ModelSpec> {
    let beta = cfg.f64_or("model.beta", 5.0)?;
    let input = ds.image_shape();
    match cfg.str_or("model.arch", "conv_net") {
        "conv_net" => Ok(ModelSpec::conv_net(input, ds.classes, beta)),
        "small_resnet" => Ok(ModelSpec::small_resnet(input, ds.classes, beta)),
        "linear" => Ok(ModelSpec::linear(input, ds.classes)),
        other => Err(Error::Config(format!("unknown model.arch '{}'", other))),
    }
}

/// ε convention: 0.3 for single-channel (grayscale) inputs, 8/255 for RGB.
fn default_epsilon(ds: &Dataset) -> f64 {
    if ds.image_shape().0 == 1 {
        0.3
    } else {
        8.0 / 255.0
    }
}

fn build_pgd(cfg: &RunConfig, ds: &Dataset) -> Result<PgdConfig> {
    let epsilon = cfg.f64_or("pgd.epsilon", default_epsilon(ds))?;
    let steps = cfg.usize_or("pgd.steps", 10)?;
    let step_size = cfg.f64_or("pgd.step_size", PgdConfig::default_step_size(epsilon, steps))?;
    let random_start = cfg.bool_or("pgd.random_start", true)?;
    let objective = match cfg.str_or("pgd.objective", "cross_entropy") {
        "cross_entropy" => PgdObjective::CrossEntropy,
        "kl_from_clean" => PgdObjective::KLFromClean,
        other => return Err(Error::Config(format!("unknown pgd.objective '{}'", other))),
    };
    let pgd = PgdConfig {
        epsilon,
        steps,
        step_size,
        random_start,
        objective,
    };
    pgd.validate()?;
    Ok(pgd)
}

fn build_expl_method(cfg: &RunConfig) -> Result<ExplMethod> {
    let kind = match cfg.str_or("expl.method", "gradient") {
        "gradient" => ExplKind::Gradient,
        "gradient_x_input" => ExplKind::GradientTimesInput,
        "guided_backprop" => ExplKind::GuidedBackprop,
        "integrated_gradients" => ExplKind::IntegratedGradients,
        other => return Err(Error::Config(format!("unknown expl.method '{}'", other))),
    };
    let mut m = ExplMethod::new(kind);
    m.ig_steps = cfg.usize_or("expl.ig_steps", m.ig_steps)?;
    m.validate()?;
    Ok(m)
}

fn build_expl_attack(cfg: &RunConfig, ds: &Dataset) -> Result<ExplAttackConfig> {
    let c = ExplAttackConfig {
        epsilon: cfg.f64_or("attack.epsilon", default_epsilon(ds))?,
        iterations: cfg.usize_or("attack.iterations", 200)?,
        learning_rate: cfg.f64_of("attack.learning_rate")?,
        gamma_c: cfg.f64_of("attack.gamma_c")?,
    };
    c.validate()?;
    Ok(c)
}

fn build_train_cfg(cfg: &RunConfig, spec: &ModelSpec, ds: &Dataset) -> Result<TrainConfig> {
    let regime = Regime::parse(cfg.require("train.regime")?)?;
    let mut pgd = build_pgd(cfg, ds)?;
    if regime == Regime::Trades && cfg.get("pgd.objective").is_none() {
        pgd.objective = PgdObjective::KLFromClean;
    }
    let tc = TrainConfig {
        regime,
        epochs: cfg.usize_or("train.epochs", 25)?,
        batch_size: cfg.usize_or("train.batch_size", 64)?,
        adam: AdamConfig::new(cfg.f64_or("train.lr", default_learning_rate(spec))?),
        alpha: cfg.f64_or("train.alpha", 1.0)?,
        lambda: cfg.f64_or("train.lambda", 0.0)?,
        sigma_zeta: cfg.f64_or("train.sigma_zeta", 1.0)?,
        pgd,
        expl_method: build_expl_method(cfg)?,
        seed: global_seed(cfg)?,
    };
    tc.validate()?;
    Ok(tc)
}

fn train_digest(tc: &TrainConfig) -> String {
    let mut h = Sha256::new();
    h.update(format!("{:?}", tc).as_bytes());
    h.finalize()
        .iter()
        .map(|b| format!("{:02x}", b))
        .collect()
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = build_dataset(cfg, false)?;
    let spec = build_spec(cfg, &ds)?;
    let tc = build_train_cfg(cfg, &spec, &ds)?;
    let (params, history) = train(&spec, &ds, &tc)?;
    save_checkpoint(&params, &spec, &train_digest(&tc), &out.join("checkpoint.json"))?;
    history.write_csv(&out.join("history.csv"))?;
    println!(
        "trained {} for {} epochs; checkpoint {}",
        tc.regime.name(),
        tc.epochs,
        out.join("checkpoint.json").display()
    );
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<(ParamSet, ModelSpec)> {
    load_checkpoint(&cfg.path_of("checkpoint")?)
}

fn cmd_attack_cls(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (params, spec) = load_model(cfg)?;
    let test = build_dataset(cfg, true)?;
    let pgd = build_pgd(cfg, &test)?;
    let seed = global_seed(cfg)?;
    let mut rng = crate::seeds::rng_for(seed, "eval_attack");
    let n = test.len();
    let mut clean_correct = 0.0;
    let mut adv_correct = 0.0;
    let mut i = 0;
    while i < n {
        let end = (i + 64).min(n);
        let idx: Vec<usize> = (i..end).collect();
        let (batch, labels) = test.batch(&idx);
        let clean = crate::nn::forward_tensors(&spec, &params, &batch)?;
        clean_correct += crate::nn::accuracy(&clean, &labels) * (end - i) as f64;
        let adv = pgd_attack(&spec, &params, &batch, &labels, &pgd, &mut rng)?;
        let advl = crate::nn::forward_tensors(&spec, &params, &adv)?;
        adv_correct += crate::nn::accuracy(&advl, &labels) * (end - i) as f64;
        i = end;
    }
    let mut f = std::fs::File::create(out.join("attack_cls.csv"))?;
    writeln!(f, "clean_acc,adv_acc")?;
    writeln!(
        f,
        "{:e},{:e}",
        clean_correct / n as f64,
        adv_correct / n as f64
    )?;
    Ok(())
}

fn cmd_cluster_pairs(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (params, spec) = load_model(cfg)?;
    let ds = build_dataset(cfg, false)?;
    let k = cfg.usize_or("eval.k", 10)?;
    let per_cluster = cfg.usize_or("eval.per_cluster", 3)?;
    let ps = select_pairs(&ds, &spec, &params, k, per_cluster, global_seed(cfg)?)?;
    ps.save_json(&out.join("pairs.json"))?;
    println!("{} images, {} ordered pairs", ps.items.len(), ps.pairs.len());
    Ok(())
}

fn load_pairs(cfg: &RunConfig) -> Result<PairSet> {
    PairSet::load_json(&cfg.path_of("pairs")?)
}

fn cmd_attack_expl(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (params, spec) = load_model(cfg)?;
    let ps = load_pairs(cfg)?;
    let method = build_expl_method(cfg)?;
    let sample = ps.items[0].image();
    let sample_ds = Dataset {
        images: sample.reshaped({
            let mut s = vec![1];
            s.extend_from_slice(sample.shape());
            s
        })?,
        labels: vec![0],
        classes: 1,
        source: "pairset".into(),
    };
    let expl_cfg = build_expl_attack(cfg, &sample_ds)?;
    let maps: Vec<SaliencyMap> = ps
        .items
        .iter()
        .map(|it| saliency(method, &spec, &params, &it.image(), None))
        .collect::<Result<_>>()?;
    let mut f = std::fs::File::create(out.join("attack_expl.csv"))?;
    writeln!(f, "victim,target,loss_at_start,loss_at_end,preserved")?;
    for &(v, t) in &ps.pairs {
        let res = explanation_attack(&spec, &params, &ps.items[v].image(), &maps[t], method, &expl_cfg)?;
        writeln!(
            f,
            "{},{},{:e},{:e},{}",
            v, t, res.loss_at_start, res.loss_at_end, res.prediction_preserved
        )?;
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (params, spec) = load_model(cfg)?;
    let ps = load_pairs(cfg)?;
    let test = build_dataset(cfg, true)?;
    let method = build_expl_method(cfg)?;
    let pgd = build_pgd(cfg, &test)?;
    let expl_cfg = build_expl_attack(cfg, &test)?;
    let label = cfg
        .get("eval.method_label")
        .or_else(|| cfg.get("train.regime"))
        .unwrap_or("model")
        .to_string();
    let report = evaluate_robustness(
        &spec,
        &params,
        &ps,
        &test,
        &label,
        method,
        &pgd,
        &expl_cfg,
        global_seed(cfg)?,
    )?;
    write_report_csv(&[report], &out.join("eval.csv"))?;
    Ok(())
}

fn cmd_landscape(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (params, spec) = load_model(cfg)?;
    let gammas = cfg
        .f64_list("landscape.gammas")?
        .unwrap_or_else(default_gammas);
    let directions = cfg.usize_or("landscape.directions", 5)?;
    let seed = global_seed(cfg)?;
    let curve = match cfg.str_or("landscape.kind", "explanation") {
        "explanation" => {
            let ps = load_pairs(cfg)?;
            let method = build_expl_method(cfg)?;
            probe_explanation_landscape(&spec, &params, &ps, method, &gammas, directions, seed)?
        }
        "classification" => {
            let ds = build_dataset(cfg, true)?;
            let idx: Vec<usize> = (0..ds.len()).collect();
            let (batch, labels) = ds.batch(&idx);
            probe_classification_landscape(&spec, &params, &batch, &labels, &gammas, directions, seed)?
        }
        other => {
            return Err(Error::Config(format!(
                "unknown landscape.kind '{}'",
                other
            )))
        }
    };
    curve.write_csv(&out.join("landscape.csv"), &params.digest())?;
    Ok(())
}

/// Merge eval CSVs into one table ordered Normal, MAT, SEP_pos, SEP_neg,
/// then any other rows in input order.
fn cmd_report(cfg: &RunConfig, out: &Path) -> Result<()> {
    let inputs: Vec<PathBuf> = cfg
        .require("report.inputs")?
        .split(',')
        .map(|s| PathBuf::from(s.trim()))
        .collect();
    let header = "method,expl_at_start,expl_at_end,clean_acc,adv_acc";
    let mut rows: Vec<(String, String)> = Vec::new();
    for p in &inputs {
        let text = std::fs::read_to_string(p)?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == header => {}
            _ => {
                return Err(Error::Parse {
                    offset: 0,
                    detail: format!("{}: not an eval CSV (bad header)", p.display()),
                })
            }
        }
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let method = line.split(',').next().unwrap_or("").to_string();
            rows.push((method, line.to_string()));
        }
    }
    let order = ["normal", "mat", "sep_pos", "sep_neg"];
    rows.sort_by_key(|(m, _)| {
        order
            .iter()
            .position(|o| o == m)
            .unwrap_or(order.len())
    });
    let mut f = std::fs::File::create(out.join("report.csv"))?;
    writeln!(f, "{}", header)?;
    for (_, line) in rows {
        writeln!(f, "{}", line)?;
    }
    Ok(())
}
