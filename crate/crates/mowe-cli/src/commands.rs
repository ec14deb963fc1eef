//! Command implementations and run-directory plumbing. Every command
//! that writes files puts them under one directory together with the
//! effective config echo and a manifest, so a run can be reproduced
//! from its own artifacts.

use std::fs;
use std::path::Path;

use serde::Serialize;

use mowe_core::checkpoint::{load_checkpoint, save_checkpoint};
use mowe_core::error::{MoweError, Result};
use mowe_core::model::{EncoderDims, ModelConfig, MoweModel, RouterSetup};
use mowe_core::numerics::rng::Rng;
use mowe_core::numerics::tensor::Tensor;
use mowe_core::numerics::{builtin_op_checks, check_gradients, max_rel_err, OpCheck};
use mowe_core::pipeline::{AdapterSpec, DecoderSpec};
use mowe_core::routing::RoutingConfig;
use mowe_core::synthdata::{self, Dataset};
use mowe_core::trainer::{self, EvalReport, Regime};

use crate::config::FileConfig;
use crate::{
    AblateArgs, Cli, Command, ConfigAction, EvalArgs, GenDataArgs, GradCheckArgs, RouteReportArgs,
    TrainArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = FileConfig::resolve(cli.global.config.as_deref())?;
    if let Some(seed) = cli.global.seed {
        cfg.trainer.seed = seed;
    }
    if let Some(threads) = cli.global.threads {
        cfg.trainer.threads = threads;
    }
    match cli.command {
        Command::GenData(args) => gen_data(cfg, &args),
        Command::Train(args) => train(cfg, &args),
        Command::Eval(args) => eval(cfg, &args),
        Command::Ablate(args) => ablate(cfg, &args),
        Command::RouteReport(args) => route_report(cfg, &args),
        Command::GradCheck(args) => grad_check(cfg, &args),
        Command::Config(args) => match args.action {
            ConfigAction::ShowDefaults => {
                print!("{}", FileConfig::default().to_toml());
                Ok(())
            }
        },
    }
}

// ── shared plumbing ─────────────────────────────────────────────────

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MoweError::io(format!("creating {}", dir.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| MoweError::io(format!("writing {}", path.display()), e))
}

fn to_json<T: Serialize>(value: &T, what: &str) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| MoweError::format(what, e.to_string()))
}

#[derive(Serialize)]
struct RunManifest {
    command: &'static str,
    argv: Vec<String>,
    seed: u64,
    files: Vec<String>,
}

/// Write the text artifacts plus `config.toml` and `manifest.json` into
/// `dir`. `binary_files` already exist there and only get listed.
fn finish_run_dir(
    dir: &Path,
    command: &'static str,
    cfg: &FileConfig,
    text_files: &[(&str, String)],
    binary_files: &[&str],
) -> Result<()> {
    for (name, content) in text_files {
        write_text(&dir.join(name), content)?;
    }
    write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    let mut names: Vec<String> = binary_files.iter().map(|s| s.to_string()).collect();
    names.extend(text_files.iter().map(|(n, _)| n.to_string()));
    names.push("config.toml".to_string());
    let manifest = RunManifest {
        command,
        argv: std::env::args().collect(),
        seed: cfg.trainer.seed,
        files: names,
    };
    write_text(&dir.join("manifest.json"), &to_json(&manifest, "manifest.json")?)
}

fn check_data_shape(data: &Dataset, d_in: usize, seq_len: usize, what: &str) -> Result<()> {
    if data.d_in != d_in || data.seq_len != seq_len {
        return Err(MoweError::config(format!(
            "dataset has d_in {} and seq_len {} but {what} expects d_in {d_in} and \
             seq_len {seq_len}; regenerate the data or adjust the config",
            data.d_in, data.seq_len
        )));
    }
    Ok(())
}

fn check_vocab(data: &Dataset, vocab: usize) -> Result<()> {
    let max_tok = data
        .samples
        .iter()
        .flat_map(|s| s.instruction.iter().chain(s.target.iter()))
        .copied()
        .max()
        .unwrap_or(0) as usize;
    if max_tok >= vocab {
        return Err(MoweError::config(format!(
            "dataset uses token id {max_tok} but the decoder vocab is {vocab}; raise \
             [pipeline.decoder] vocab to at least {}",
            max_tok + 1
        )));
    }
    Ok(())
}

// ── commands ────────────────────────────────────────────────────────

fn gen_data(mut cfg: FileConfig, args: &GenDataArgs) -> Result<()> {
    if let Some(n) = args.n_per_task {
        cfg.data.n_per_task = n;
    }
    let tasks = cfg.tasks()?;
    let data = synthdata::generate(&tasks, cfg.data.seq_len, cfg.data.n_per_task, cfg.trainer.seed)?;
    data.save(&args.out)?;
    finish_run_dir(&args.out, "gen-data", &cfg, &[], &["dataset.json", "features.bin"])?;
    println!(
        "wrote {} samples across {} tasks to {}",
        data.len(),
        data.tasks.len(),
        args.out.display()
    );
    Ok(())
}

fn train(mut cfg: FileConfig, args: &TrainArgs) -> Result<()> {
    if let Some(epochs) = args.epochs {
        cfg.trainer.epochs = epochs;
    }
    if let Some(batch) = args.batch_size {
        cfg.trainer.batch_size = batch;
    }
    if let Some(lr) = args.lr {
        cfg.trainer.peak_lr = lr;
    }
    if args.two_stage {
        cfg.trainer.regime = Regime::TwoStage;
    }

    let data = Dataset::load(&args.data)?;
    check_data_shape(&data, cfg.data.d_in, cfg.data.seq_len, "the [data] section")?;
    check_vocab(&data, cfg.pipeline.decoder.vocab)?;
    let (train_split, eval_split) = data.split(cfg.data.train_fraction, cfg.trainer.seed)?;

    let model = MoweModel::new(cfg.model_config())?;
    let mut store = model.init_params(cfg.trainer.seed);
    let params = model.param_report(&store);
    println!(
        "training setup {} ({} params, {} trainable) on {} samples, holding out {}",
        model.config.routers,
        params.total,
        params.trainable,
        train_split.len(),
        eval_split.len()
    );

    let report = match cfg.trainer.regime {
        Regime::SingleStage => {
            trainer::train(&model, &mut store, &train_split, &eval_split, &cfg.trainer)?
        }
        Regime::TwoStage => {
            trainer::train_two_stage(&model, &mut store, &train_split, &eval_split, &cfg.trainer)?
        }
    };

    for e in &report.epochs {
        println!(
            "stage {} epoch {}: train {:.4}, eval {:.4}, token accuracy {:.3}",
            e.stage, e.epoch, e.train_loss, e.eval_loss, e.eval_token_accuracy
        );
    }
    println!(
        "final eval: loss {:.4}, token accuracy {:.3} ({:.1}s)",
        report.final_eval.loss_total, report.final_eval.token_accuracy, report.wall_clock_secs
    );

    ensure_dir(&args.out)?;
    save_checkpoint(&args.out.join("checkpoint.ckpt"), &model.config, &store)?;
    finish_run_dir(
        &args.out,
        "train",
        &cfg,
        &[
            ("report.json", to_json(&report, "report.json")?),
            ("steps.csv", report.steps_csv()),
        ],
        &["checkpoint.ckpt"],
    )?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn eval(mut cfg: FileConfig, args: &EvalArgs) -> Result<()> {
    if let Some(batch) = args.batch_size {
        cfg.trainer.batch_size = batch;
    }
    let (model_config, store) = load_checkpoint(&args.checkpoint)?;
    let model = MoweModel::new(model_config)?;
    let data = Dataset::load(&args.data)?;
    check_data_shape(&data, model.config.d_in, model.config.seq_len, "the checkpoint")?;
    check_vocab(&data, model.config.decoder.vocab)?;
    let (_, eval_split) = data.split(cfg.data.train_fraction, cfg.trainer.seed)?;
    let metrics = trainer::evaluate(&model, &store, &eval_split, &cfg.trainer)?;
    let json = to_json(&metrics, "metrics.json")?;
    println!("{json}");
    if let Some(out) = &args.out {
        ensure_dir(out)?;
        finish_run_dir(out, "eval", &cfg, &[("metrics.json", json)], &[])?;
    }
    Ok(())
}

fn ablate(mut cfg: FileConfig, args: &AblateArgs) -> Result<()> {
    if let Some(epochs) = args.epochs {
        cfg.trainer.epochs = epochs;
    }
    let data = Dataset::load(&args.data)?;
    check_data_shape(&data, cfg.data.d_in, cfg.data.seq_len, "the [data] section")?;
    check_vocab(&data, cfg.pipeline.decoder.vocab)?;
    let (train_split, eval_split) = data.split(cfg.data.train_fraction, cfg.trainer.seed)?;
    let report =
        trainer::run_ablation_matrix(&cfg.model_config(), &cfg.trainer, &train_split, &eval_split)?;
    let csv = report.to_csv();
    print!("{csv}");
    ensure_dir(&args.out)?;
    finish_run_dir(
        &args.out,
        "ablate",
        &cfg,
        &[
            ("ablation.csv", csv),
            ("ablation.json", to_json(&report, "ablation.json")?),
        ],
        &[],
    )?;
    Ok(())
}

fn route_report(cfg: FileConfig, args: &RouteReportArgs) -> Result<()> {
    let (model_config, store) = load_checkpoint(&args.checkpoint)?;
    let model = MoweModel::new(model_config)?;
    let data = Dataset::load(&args.data)?;
    check_data_shape(&data, model.config.d_in, model.config.seq_len, "the checkpoint")?;
    check_vocab(&data, model.config.decoder.vocab)?;
    let (_, eval_split) = data.split(cfg.data.train_fraction, cfg.trainer.seed)?;
    let metrics = trainer::evaluate(&model, &store, &eval_split, &cfg.trainer)?;
    let csv = routing_csv(&metrics, &eval_split);
    let summary = routing_summary(&metrics, &eval_split);
    print!("{csv}");
    println!();
    print!("{summary}");
    if let Some(out) = &args.out {
        ensure_dir(out)?;
        finish_run_dir(
            out,
            "route-report",
            &cfg,
            &[("route_report.csv", csv), ("summary.txt", summary)],
            &[],
        )?;
    }
    Ok(())
}

fn pool_width(metrics: &EvalReport) -> usize {
    metrics
        .routing
        .first()
        .and_then(|r| r.proportions.first())
        .map_or(0, |row| row.len())
}

fn routing_csv(metrics: &EvalReport, data: &Dataset) -> String {
    let m = pool_width(metrics);
    let mut out = String::from("router,task,task_name");
    for k in 0..m {
        out.push_str(&format!(",encoder_{k}"));
    }
    out.push('\n');
    for router in &metrics.routing {
        for (t, row) in router.proportions.iter().enumerate() {
            out.push_str(&format!("{},{},{}", router.kind, t, data.task_name(t)));
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    out
}

fn routing_summary(metrics: &EvalReport, data: &Dataset) -> String {
    let mut out = String::new();
    if metrics.routing.is_empty() {
        out.push_str("no routers in this checkpoint\n");
        return out;
    }
    let m = pool_width(metrics);
    for router in &metrics.routing {
        let used = (0..m)
            .filter(|&k| router.counts.iter().any(|row| row[k] > 0))
            .count();
        out.push_str(&format!(
            "router {}: {used} of {m} encoders in use\n",
            router.kind
        ));
        for (t, row) in router.proportions.iter().enumerate() {
            let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
            out.push_str(&format!(
                "  {}: encoder {best} ({:.1}%)\n",
                data.task_name(t),
                row[best] * 100.0
            ));
        }
    }
    out.push_str(&format!(
        "token accuracy {:.3}, mean active params {:.0}, weak evaluations per sample {:.2}\n",
        metrics.token_accuracy, metrics.active_params_mean, metrics.weak_evals_per_sample
    ));
    out
}

// ── gradient check ──────────────────────────────────────────────────

#[derive(Serialize)]
struct EndToEndCheck {
    max_rel_err: f64,
    tolerance: f64,
    pass: bool,
    elements: usize,
    worst_param: String,
}

#[derive(Serialize)]
struct GradCheckReport {
    ops: Vec<OpCheck>,
    end_to_end: EndToEndCheck,
    pass: bool,
}

fn grad_check(cfg: FileConfig, args: &GradCheckArgs) -> Result<()> {
    let seed = cfg.trainer.seed;
    let ops = builtin_op_checks(seed)?;
    let end_to_end = end_to_end_check(seed)?;
    let pass = ops.iter().all(|c| c.pass) && end_to_end.pass;
    let report = GradCheckReport { ops, end_to_end, pass };
    let json = to_json(&report, "grad_check.json")?;
    println!("{json}");
    if let Some(out) = &args.out {
        ensure_dir(out)?;
        finish_run_dir(out, "grad-check", &cfg, &[("grad_check.json", json)], &[])?;
    }
    if !report.pass {
        let mut bad: Vec<&str> = report
            .ops
            .iter()
            .filter(|c| !c.pass)
            .map(|c| c.op.as_str())
            .collect();
        if !report.end_to_end.pass {
            bad.push("end-to-end");
        }
        return Err(MoweError::invalid(format!(
            "gradient check failed: {}",
            bad.join(", ")
        )));
    }
    Ok(())
}

/// Full-loss check on a deliberately tiny model: two samples, every
/// trainable element against central differences.
fn end_to_end_check(seed: u64) -> Result<EndToEndCheck> {
    let config = ModelConfig {
        d_in: 16,
        seq_len: 8,
        base: EncoderDims {
            d_out: 12,
            hidden: 24,
            layers: 1,
        },
        weak: EncoderDims {
            d_out: 4,
            hidden: 4,
            layers: 1,
        },
        pool_size: None,
        routers: RouterSetup::IndepDep,
        routing: RoutingConfig::default(),
        adapter: AdapterSpec::grouped(2, 6),
        decoder: DecoderSpec {
            vocab: 144,
            d_model: 12,
            layers: 1,
            heads: 2,
            lora_rank: 2,
            lora_alpha: 4.0,
            max_seq: 10,
        },
    };
    let model = MoweModel::new(config)?;
    let mut store = model.init_params(seed);
    // Low-rank B factors start at zero; nudge them so gradient reaches A.
    // Router weights start on a selection tie; nudge off it so the
    // finite-difference probe stays on one side of the argmax.
    let mut rng = Rng::new(seed, "gradcheck.nudge");
    for name in store.trainable_names() {
        if name.ends_with("lora_b") || name.starts_with("route.") {
            let t = store.tensor_mut(&name)?;
            let shape = t.shape().to_vec();
            *t = Tensor::randn(shape, 0.05, &mut rng);
        }
    }
    let tasks = synthdata::default_tasks(16)?;
    let data = synthdata::generate(&tasks, 8, 1, seed)?;
    let reports = check_gradients(&mut store, 1e-5, |sess| {
        let refs: Vec<_> = data.samples.iter().take(2).collect();
        let out = model.forward_batch(sess, &refs, true, 0.1)?;
        Ok(out.total)
    })?;
    let worst = max_rel_err(&reports);
    let elements = reports.iter().map(|r| r.elements).sum();
    let worst_param = reports
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .map(|r| r.param.clone())
        .unwrap_or_default();
    Ok(EndToEndCheck {
        max_rel_err: worst,
        tolerance: 1e-3,
        pass: worst < 1e-3,
        elements,
        worst_param,
    })
}
