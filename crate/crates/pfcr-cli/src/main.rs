//! `pfcr`: train a toy-ViT baseline, quantize it with reconstruction, and
//! inspect the artifacts.
//!
//! Exit codes: 0 success, 2 configuration/input error, 3 numerical failure.

use clap::{Args, Parser, Subcommand};
use pfcr_core::harness::{
    evaluate_top1, load_checkpoint, load_dataset, quantize_run, run_ablation_suite, save_checkpoint,
    train_baseline, write_ablation_csv, write_curves_csv, Arm, HarnessError, RunConfig,
};
use pfcr_core::pos::Method;
use pfcr_core::quant::{Granularity, Scheme};
use pfcr_core::vit::ModelState;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "pfcr", version, about = "Post-training quantization for small vision transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-precision baseline and save its checkpoint.
    TrainBaseline(TrainArgs),
    /// Quantize a trained baseline with the configured method.
    Quantize(QuantizeArgs),
    /// Report top-1 accuracy of a checkpoint on the configured eval split.
    Evaluate(EvaluateArgs),
    /// Run the ablation arms over several seeds and tabulate accuracies.
    Ablate(AblateArgs),
    /// Print the tensors and quantizers inside a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "pfcr_run")]
    out: PathBuf,
    /// Override the baseline training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "pfcr_run")]
    out: PathBuf,
    /// Joint weight/activation bit-width.
    #[arg(long)]
    bits: Option<u32>,
    /// Weight bit-width override (advanced, asymmetric).
    #[arg(long)]
    weight_bits: Option<u32>,
    /// Activation bit-width override (advanced, asymmetric).
    #[arg(long)]
    act_bits: Option<u32>,
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    /// Disable the activation-first stage (single-stage pipeline).
    #[arg(long)]
    one_stage: bool,
    /// Base iteration budget per unit.
    #[arg(long)]
    iters: Option<usize>,
    /// Base learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Sampling and optimization seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint path base (without `.manifest.json`).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "pfcr_run")]
    out: PathBuf,
    /// Comma-separated subset of blockwise,pfcr_only,pos_only,pfcr_pos,fp_baseline.
    #[arg(long, default_value = "blockwise,pfcr_only,pos_only,pfcr_pos,fp_baseline")]
    arms: String,
    /// Comma-separated seed list.
    #[arg(long, default_value = "1,2,3,4,5")]
    seeds: String,
    /// Worker threads for arm-seed runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct InspectArgs {
    /// Checkpoint path base (without `.manifest.json`).
    checkpoint: PathBuf,
    #[arg(long)]
    json: bool,
}

fn parse_method(s: &str) -> Result<Method, String> {
    match s {
        "pfcr-pos" => Ok(Method::PfcrPos),
        "pfcr" => Ok(Method::Pfcr),
        "blockwise" => Ok(Method::Blockwise),
        other => Err(format!("unknown method {other:?} (expected pfcr-pos, pfcr, or blockwise)")),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = if err.downcast_ref::<NumericalFailure>().is_some() {
                3
            } else {
                err.downcast_ref::<HarnessError>().map(HarnessError::exit_code).unwrap_or(2)
            };
            ExitCode::from(code as u8)
        }
    }
}

#[derive(Debug)]
struct NumericalFailure(String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for NumericalFailure {}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::TrainBaseline(args) => cmd_train(args),
        Command::Quantize(args) => cmd_quantize(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Inspect(args) => cmd_inspect(args),
    }
}

fn read_config(path: &Path) -> Result<RunConfig, HarnessError> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    let cfg: RunConfig = serde_json::from_slice(&bytes)?;
    cfg.model.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(cfg)
}

fn ensure_out(dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = read_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.baseline.seed = seed;
    }
    ensure_out(&args.out)?;
    let data = load_dataset(&cfg.dataset, &cfg.model)?;
    let (model, accuracy) = train_baseline(
        &cfg.model,
        &data.train,
        &data.eval,
        cfg.baseline.epochs,
        cfg.baseline.lr,
        cfg.baseline.batch,
        cfg.baseline.seed,
    )?;
    let base = args.out.join("baseline");
    save_checkpoint(&model, &base)?;
    cfg.baseline.checkpoint = Some(base.clone());
    let echo_path = args.out.join("config.json");
    std::fs::write(&echo_path, serde_json::to_vec_pretty(&cfg).map_err(HarnessError::from)?)
        .map_err(|e| HarnessError::io(&echo_path, e))?;
    let metrics = serde_json::json!({ "baseline_accuracy": accuracy, "checkpoint": base });
    let mpath = args.out.join("baseline_metrics.json");
    std::fs::write(&mpath, serde_json::to_vec_pretty(&metrics).map_err(HarnessError::from)?)
        .map_err(|e| HarnessError::io(&mpath, e))?;
    println!("baseline top-1 {accuracy:.4}, checkpoint at {}", base.display());
    Ok(())
}

fn load_baseline(cfg: &RunConfig) -> Result<ModelState<f32>, HarnessError> {
    let Some(base) = &cfg.baseline.checkpoint else {
        return Err(HarnessError::Config("config.baseline.checkpoint is not set; run train-baseline first".into()));
    };
    let manifest = PathBuf::from(format!("{}.manifest.json", base.display()));
    if !manifest.exists() {
        return Err(HarnessError::Config(format!("baseline checkpoint not found at {}", manifest.display())));
    }
    load_checkpoint(base)
}

fn cmd_quantize(args: QuantizeArgs) -> anyhow::Result<()> {
    let mut cfg = read_config(&args.config)?;
    let mut overrides = Vec::new();
    if let Some(bits) = args.bits {
        cfg.quant.bits = bits;
        overrides.push(format!("--bits {bits}"));
    }
    if let Some(bits) = args.weight_bits {
        cfg.quant.weight_bits = Some(bits);
        overrides.push(format!("--weight-bits {bits}"));
    }
    if let Some(bits) = args.act_bits {
        cfg.quant.act_bits = Some(bits);
        overrides.push(format!("--act-bits {bits}"));
    }
    if let Some(method) = args.method {
        cfg.method = method;
        overrides.push(format!("--method {method}"));
    }
    if args.one_stage {
        cfg.quant.stage1_enabled = false;
        overrides.push("--one-stage".into());
    }
    if let Some(iters) = args.iters {
        cfg.quant.iter0 = Some(iters);
        overrides.push(format!("--iters {iters}"));
    }
    if let Some(lr) = args.lr {
        cfg.quant.lr0 = lr;
        overrides.push(format!("--lr {lr}"));
    }
    if let Some(seed) = args.seed {
        cfg.quant.seed = seed;
        cfg.sampling.seed = seed;
        overrides.push(format!("--seed {seed}"));
    }

    ensure_out(&args.out)?;
    let baseline = load_baseline(&cfg)?;
    let data = load_dataset(&cfg.dataset, &cfg.model)?;
    let outcome = quantize_run(&cfg, &baseline, &data, overrides)?;

    let echo_path = args.out.join("config.json");
    std::fs::write(&echo_path, serde_json::to_vec_pretty(&cfg).map_err(HarnessError::from)?)
        .map_err(|e| HarnessError::io(&echo_path, e))?;
    outcome.report.save(&args.out.join("report.json"))?;
    write_curves_csv(&args.out.join("curves.csv"), &outcome.report.stages)?;

    if let Some(model) = &outcome.model {
        save_checkpoint(model, &args.out.join("quantized"))?;
    }
    match (&outcome.report.failed_stage, outcome.report.quantized_accuracy) {
        (Some(stage), _) => {
            let msg = outcome.report.error.clone().unwrap_or_default();
            Err(anyhow::Error::new(NumericalFailure(format!("{stage} failed: {msg}"))))
        }
        (None, Some(acc)) => {
            println!(
                "method {} at {} bits: baseline {:.4} -> quantized {:.4}",
                cfg.method, cfg.quant.bits, outcome.report.baseline_accuracy, acc
            );
            Ok(())
        }
        (None, None) => unreachable!("successful run always carries an accuracy"),
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let cfg = read_config(&args.config)?;
    let model = load_checkpoint(&args.checkpoint)?;
    let data = load_dataset(&cfg.dataset, &model.config)?;
    let accuracy = evaluate_top1(&model, &data.eval);
    if args.json {
        println!("{}", serde_json::json!({ "checkpoint": args.checkpoint, "top1": accuracy }));
    } else {
        println!("top-1 {accuracy:.4} on {} eval samples", data.eval.len());
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> anyhow::Result<()> {
    let cfg = read_config(&args.config)?;
    let arms = args
        .arms
        .split(',')
        .filter(|s| !s.is_empty())
        .map(Arm::parse)
        .collect::<Result<Vec<_>, _>>()?;
    let seeds = args
        .seeds
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.trim().parse::<u64>().map_err(|e| HarnessError::Config(format!("bad seed {s:?}: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    if arms.is_empty() || seeds.is_empty() {
        return Err(HarnessError::Config("need at least one arm and one seed".into()).into());
    }
    ensure_out(&args.out)?;
    let baseline = load_baseline(&cfg)?;
    let data = load_dataset(&cfg.dataset, &cfg.model)?;
    let table = run_ablation_suite(&cfg, &baseline, &data, &arms, &seeds, args.jobs.max(1));
    write_ablation_csv(&args.out.join("ablation.csv"), &table)?;
    for row in &table.rows {
        let seed = row.seed.map(|s| s.to_string()).unwrap_or_else(|| "median".into());
        let acc = row.accuracy.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
        println!("{:<12} {:>7} {:>8} {}", row.arm, seed, acc, row.status);
    }
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> anyhow::Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    if args.json {
        let tensors: Vec<serde_json::Value> = model
            .params()
            .map(|(name, p)| {
                serde_json::json!({
                    "name": name,
                    "shape": p.tensor.shape,
                    "quantizer": p.quant.as_ref().map(quant_summary),
                })
            })
            .collect();
        let acts: Vec<serde_json::Value> = model
            .act_quantizers()
            .map(|(point, q)| serde_json::json!({ "point": point, "quantizer": quant_summary(q) }))
            .collect();
        let doc = serde_json::json!({
            "config": model.config,
            "weight_quant_enabled": model.weight_quant_enabled,
            "act_quant_enabled": model.act_quant_enabled,
            "tensors": tensors,
            "act_quantizers": acts,
        });
        println!("{}", serde_json::to_string_pretty(&doc).map_err(HarnessError::from)?);
        return Ok(());
    }

    println!("checkpoint {}", args.checkpoint.display());
    println!(
        "depth {} embed {} heads {} patch {} image {} classes {}",
        model.config.depth,
        model.config.embed_dim,
        model.config.heads,
        model.config.patch_size,
        model.config.image_size,
        model.config.num_classes
    );
    println!(
        "mode flags: weight_quant {}, act_quant {}",
        model.weight_quant_enabled, model.act_quant_enabled
    );
    let mut total = 0usize;
    for (name, p) in model.params() {
        total += p.tensor.numel();
        match &p.quant {
            Some(q) => {
                let stats = scale_stats(&q.params.scale);
                println!(
                    "  {name:<24} {:>12} {}-bit {} scale[min {:.3e}, max {:.3e}]",
                    format!("{:?}", p.tensor.shape),
                    q.spec.bits,
                    scheme_name(q.spec.scheme, q.spec.granularity),
                    stats.0,
                    stats.1
                );
            }
            None => println!("  {name:<24} {:>12} fp32", format!("{:?}", p.tensor.shape)),
        }
    }
    println!("total parameters: {total}");
    let n_act = model.act_quantizers().count();
    println!("activation quantizers: {n_act}");
    for (point, q) in model.act_quantizers() {
        println!(
            "  {point:<28} {}-bit {} scale {:.4e}",
            q.spec.bits,
            scheme_name(q.spec.scheme, q.spec.granularity),
            q.params.scale[0]
        );
    }
    Ok(())
}

fn scheme_name(scheme: Scheme, granularity: Granularity) -> &'static str {
    match (scheme, granularity) {
        (Scheme::Uniform, Granularity::PerChannel { .. }) => "uniform/per-channel",
        (Scheme::Uniform, Granularity::PerLayer) => "uniform/per-layer",
        (Scheme::Log2, _) => "log2/per-layer",
    }
}

fn scale_stats(scale: &[f32]) -> (f32, f32) {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &s in scale {
        lo = lo.min(s);
        hi = hi.max(s);
    }
    (lo, hi)
}

fn quant_summary(q: &pfcr_core::quant::Quantizer<f32>) -> serde_json::Value {
    serde_json::json!({
        "scheme": q.spec.scheme,
        "bits": q.spec.bits,
        "granularity": q.spec.granularity,
        "scale": q.params.scale,
        "zero_point": q.params.zero_point,
    })
}
