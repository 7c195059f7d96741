//! `tinysed`: featurize audio, train and distill classifiers, calibrate and
//! quantize them to int8, run inference and estimate deployment cost.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use tinysed::cost::{estimate, feasibility, platform, platforms, CostReport, Verdict};
use tinysed::data::{load_dataset, save_dataset, Dataset};
use tinysed::distill::{
    curve_csv, distill, sgd_train, two_stage_distill, LossWeights, Strategy, SynthConfig, TrainConfig, TrainReport,
};
use tinysed::exec::forward;
use tinysed::mel::{load_pcm, log_mel_patches, MelConfig};
use tinysed::model::{fold_batchnorm, load_model, preset, save_model, Model, ModelArch, Preset};
use tinysed::qexec::{compare_models, infer_int8};
use tinysed::quant::{
    calibrate, collect_stats, export_c_header, load_quantized, quantize_with_plan, save_quantized, QuantPlan, Scheme,
};
use tinysed::tensorfile::{find_f32, load_tensors, save_tensors, NamedTensor};
use tinysed::Tensor;

#[derive(Parser, Debug)]
#[command(name = "tinysed", version, about = "Compact sound-event classifiers for microcontrollers")]
struct Cli {
    /// Seed for every random choice (initialization, shuffling, sampling).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Print machine-readable JSON instead of tables.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert a WAV clip into log-mel patches.
    Featurize(FeaturizeArgs),
    /// Train a model from scratch, optionally against a teacher.
    Train(TrainArgs),
    /// Distill a teacher into a freshly initialized student.
    Distill(DistillArgs),
    /// Distill through an intermediate model.
    Distill2(Distill2Args),
    /// Select Q-formats from calibration data and write the plan.
    Calibrate(CalibrateArgs),
    /// Convert a float model to int8.
    Quantize(QuantizeArgs),
    /// Classify one clip with a float and/or an int8 model.
    Infer(InferArgs),
    /// Float versus int8 accuracy on a labeled split.
    Compare(CompareArgs),
    /// Per-layer parameters, operations and buffer plan.
    Estimate(ArchArgs),
    /// Check whether a model fits the target platforms.
    Feasibility(FeasibilityArgs),
    /// Write an int8 model as a C header.
    Export(ExportArgs),
    /// Generate the synthetic stripe dataset.
    SynthData(SynthArgs),
}

#[derive(Args, Debug)]
struct FeaturizeArgs {
    /// Input WAV file.
    wav: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    /// Resample when the file rate differs from 16 kHz.
    #[arg(long)]
    resample: bool,
}

#[derive(Args, Debug)]
struct ArchArgs {
    /// Preset name or path to an architecture JSON file.
    #[arg(long, alias = "preset")]
    arch: String,
}

#[derive(Args, Debug, Clone)]
struct TrainOpts {
    /// JSON training configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Early-stopping patience in epochs; 0 disables.
    #[arg(long)]
    patience: Option<usize>,
    /// Per-layer gradient norm bound; 0 disables.
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Named loss weights.
    #[arg(long, value_parser = parse_strategy, conflicts_with_all = ["alpha_h", "alpha_s", "alpha_e"])]
    strategy: Option<Strategy>,
    #[arg(long)]
    alpha_h: Option<f64>,
    #[arg(long)]
    alpha_s: Option<f64>,
    #[arg(long)]
    alpha_e: Option<f64>,
    /// Learning curve CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    /// Teacher model, needed when the soft or embedding weight is positive.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args, Debug)]
struct DistillArgs {
    #[arg(long)]
    teacher: PathBuf,
    /// Student preset or architecture JSON.
    #[arg(long)]
    student: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args, Debug)]
struct Distill2Args {
    #[arg(long)]
    teacher: PathBuf,
    /// Intermediate preset or architecture JSON.
    #[arg(long)]
    intermediate: String,
    #[arg(long)]
    student: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    /// Where to keep the intermediate model.
    #[arg(long)]
    intermediate_out: Option<PathBuf>,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SchemeName {
    Sqnr,
    Overload,
}

#[derive(Args, Debug)]
struct SchemeArgs {
    #[arg(long, value_enum, default_value_t = SchemeName::Sqnr)]
    scheme: SchemeName,
    /// Overload probability threshold.
    #[arg(long, default_value_t = tinysed::quant::DEFAULT_P_THRESHOLD)]
    p_th: f64,
}

impl SchemeArgs {
    fn scheme(&self) -> Result<Scheme> {
        match self.scheme {
            SchemeName::Sqnr => Ok(Scheme::Sqnr),
            SchemeName::Overload if (0.0..1.0).contains(&self.p_th) => Ok(Scheme::Overload { p_threshold: self.p_th }),
            SchemeName::Overload => Err(usage(format!("--p-th must lie in [0, 1), got {}", self.p_th))),
        }
    }
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    #[command(flatten)]
    scheme: SchemeArgs,
    /// Output plan JSON.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Plan from `calibrate`.
    #[arg(long, conflicts_with = "data")]
    plan: Option<PathBuf>,
    /// Calibration data, used when no plan is given.
    #[arg(long, required_unless_present = "plan")]
    data: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    split: String,
    #[command(flatten)]
    scheme: SchemeArgs,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("engine").required(true).multiple(true).args(["float", "int8"]))]
struct InferArgs {
    /// WAV clip or patch file from `featurize`.
    input: PathBuf,
    /// Float model.
    #[arg(long)]
    float: Option<PathBuf>,
    /// Int8 model.
    #[arg(long)]
    int8: Option<PathBuf>,
    #[arg(long)]
    resample: bool,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    qmodel: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args, Debug)]
struct FeasibilityArgs {
    #[command(flatten)]
    arch: ArchArgs,
    /// Platform name or `all`.
    #[arg(long, default_value = "all")]
    platform: String,
    /// Maximum acceptable power draw in mW.
    #[arg(long)]
    power_budget: Option<f64>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    qmodel: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long)]
    noise: Option<f64>,
    /// Displacement of every class stripe, in pixels.
    #[arg(long, default_value_t = 0.0)]
    offset: f64,
}

/// Raised for flag combinations clap cannot express.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: tinysed::Error| e.to_string())
}

fn resolve_arch(spec: &str) -> Result<ModelArch> {
    if Preset::parse(spec).is_ok() {
        return Ok(preset(spec)?);
    }
    let path = Path::new(spec);
    if !path.exists() {
        let names: Vec<&str> = Preset::ALL.iter().map(|p| p.id()).collect();
        bail!(usage(format!("`{spec}` is neither a preset ({}) nor a file", names.join(", "))));
    }
    let arch: ModelArch =
        serde_json::from_str(&fs::read_to_string(path)?).with_context(|| format!("reading {spec}"))?;
    arch.validate()?;
    Ok(arch)
}

fn train_config(opts: &TrainOpts, seed: u64) -> Result<(TrainConfig, LossWeights)> {
    let mut cfg: TrainConfig = match &opts.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("reading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    cfg.seed = seed;
    if let Some(v) = opts.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = opts.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = opts.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = opts.patience {
        cfg.patience = v;
    }
    if let Some(v) = opts.clip_norm {
        cfg.clip_norm = (v > 0.0).then_some(v);
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let w = match opts.strategy {
        Some(s) => s.weights(),
        None if opts.alpha_h.is_none() && opts.alpha_s.is_none() && opts.alpha_e.is_none() => Strategy::Th.weights(),
        None => LossWeights::new(opts.alpha_h.unwrap_or(0.0), opts.alpha_s.unwrap_or(0.0), opts.alpha_e.unwrap_or(0.0))
            .map_err(|e| usage(e.to_string()))?,
    };
    Ok((cfg, w))
}

fn write_curves(path: Option<&Path>, stages: &[&TrainReport]) -> Result<()> {
    let Some(path) = path else { return Ok(()) };
    if stages.len() == 1 {
        fs::write(path, curve_csv(&stages[0].curve))?;
    } else {
        let mut csv = String::from("stage,");
        for (i, r) in stages.iter().enumerate() {
            for (j, line) in curve_csv(&r.curve).lines().enumerate() {
                match (i, j) {
                    (0, 0) => csv.push_str(line),
                    (_, 0) => continue,
                    _ => csv.push_str(&format!("{},{line}", i + 1)),
                }
                csv.push('\n');
            }
        }
        fs::write(path, csv)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    model: String,
    test_accuracy: Option<f64>,
    stages: Vec<&'a TrainReport>,
}

fn report_training(cli: &Cli, model: &Model<f32>, data: &Dataset, out: &Path, stages: &[&TrainReport]) -> Result<()> {
    let test_accuracy = if data.test.is_empty() { None } else { Some(tinysed::distill::accuracy(model, &data.test)?) };
    let summary = TrainSummary { model: out.display().to_string(), test_accuracy, stages: stages.to_vec() };
    if cli.json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
        return Ok(());
    }
    for (i, r) in stages.iter().enumerate() {
        println!(
            "stage {}: {} epochs, best epoch {}, loss {:.4}{}",
            i + 1,
            r.curve.len(),
            r.best_epoch,
            r.final_loss,
            if r.stopped_early { " (stopped early)" } else { "" }
        );
    }
    if let Some(a) = test_accuracy {
        println!("test accuracy {:.2}%", a * 100.0);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn clips(data: &Dataset, split: &str) -> Result<Vec<Vec<Tensor<f32>>>> {
    let examples = data.split(split).map_err(|e| usage(e.to_string()))?;
    if examples.is_empty() {
        bail!("split `{split}` is empty");
    }
    Ok(examples.iter().map(|e| e.patches.clone()).collect())
}

fn calibrated_plan(
    model: &Model<f32>,
    data: &Path,
    split: &str,
    scheme: Scheme,
    seed: u64,
) -> Result<tinysed::quant::CalibrationReport> {
    let data = load_dataset(data)?;
    let stats = collect_stats(model, &clips(&data, split)?, seed)?;
    Ok(calibrate(&model.arch, &stats, scheme)?)
}

fn read_patches(path: &Path, resample: bool) -> Result<Vec<Tensor<f32>>> {
    let is_wav = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    if is_wav {
        let cfg = MelConfig::default();
        return Ok(log_mel_patches(&load_pcm(path, &cfg, resample)?, &cfg)?);
    }
    let tensors = load_tensors(path)?;
    let stack = find_f32(&tensors, "patches")?;
    let shape = stack.shape();
    if shape.len() != 4 {
        bail!("`patches` must be [P, H, W, C], found {shape:?}");
    }
    let per = shape[1..].iter().product::<usize>();
    stack.data().chunks(per).map(|c| Ok(Tensor::new(shape[1..].to_vec(), c.to_vec())?)).collect()
}

fn print_estimate(r: &CostReport) {
    println!("{}: input {}", r.model, r.input);
    println!("{:<10} {:>14} {:>10} {:>12}", "layer", "output", "params", "kop");
    for l in &r.layers {
        println!("{:<10} {:>14} {:>10} {:>12}", l.name, l.output.to_string(), l.params, kops(l.ops));
    }
    println!("{:<10} {:>14} {:>10} {:>12}", "total", "", r.total_params, kops(r.total_ops));
    let b = &r.buffer_plan;
    println!("buffers: A {} B + B {} B + scratch {} B = {} B", b.buffer_a, b.buffer_b, b.scratch, b.total);
}

/// Thousands of operations, truncated to two decimals.
fn kops(ops: u64) -> String {
    format!("{}.{:02}", ops / 1000, ops % 1000 / 10)
}

fn run(cli: &Cli) -> Result<()> {
    let seed = cli.seed;
    match &cli.command {
        Command::Featurize(a) => {
            let cfg = MelConfig::default();
            let patches = log_mel_patches(&load_pcm(&a.wav, &cfg, a.resample)?, &cfg)?;
            let shape = [vec![patches.len()], patches[0].shape().to_vec()].concat();
            let data: Vec<f32> = patches.iter().flat_map(|p| p.data().iter().copied()).collect();
            save_tensors(&a.out, &[NamedTensor::f32("patches", Tensor::new(shape.clone(), data)?)])?;
            if cli.json {
                println!("{}", serde_json::json!({ "out": a.out, "shape": shape }));
            } else {
                println!("wrote {} patches of {:?} to {}", shape[0], &shape[1..], a.out.display());
            }
        }
        Command::Train(a) => {
            let (cfg, w) = train_config(&a.opts, seed)?;
            let data = load_dataset(&a.data)?;
            let teacher = a.teacher.as_ref().map(load_model).transpose()?;
            if w.needs_teacher() && teacher.is_none() {
                bail!(usage("soft-label and embedding weights need --teacher"));
            }
            let init = Model::<f32>::init(resolve_arch(&a.arch.arch)?, seed)?;
            let (model, report) = sgd_train(&init, &data, teacher.as_ref(), w, &cfg)?;
            save_model(&model, &a.out)?;
            write_curves(a.opts.curve.as_deref(), &[&report])?;
            report_training(cli, &model, &data, &a.out, &[&report])?;
        }
        Command::Distill(a) => {
            let (cfg, w) = train_config(&a.opts, seed)?;
            let data = load_dataset(&a.data)?;
            let teacher = load_model(&a.teacher)?;
            let d = distill(&teacher, &resolve_arch(&a.student)?, &data, w, &cfg)?;
            save_model(&d.student, &a.out)?;
            let stages: Vec<&TrainReport> = d.stages.iter().collect();
            write_curves(a.opts.curve.as_deref(), &stages)?;
            report_training(cli, &d.student, &data, &a.out, &stages)?;
        }
        Command::Distill2(a) => {
            let (cfg, w) = train_config(&a.opts, seed)?;
            let data = load_dataset(&a.data)?;
            let teacher = load_model(&a.teacher)?;
            let two = two_stage_distill(
                &teacher,
                &resolve_arch(&a.intermediate)?,
                &resolve_arch(&a.student)?,
                &data,
                w,
                &cfg,
            )?;
            if let Some(p) = &a.intermediate_out {
                save_model(&two.intermediate.student, p)?;
            }
            save_model(&two.student.student, &a.out)?;
            let stages: Vec<&TrainReport> = two.intermediate.stages.iter().chain(&two.student.stages).collect();
            write_curves(a.opts.curve.as_deref(), &stages)?;
            report_training(cli, &two.student.student, &data, &a.out, &stages)?;
        }
        Command::Calibrate(a) => {
            let model = fold_batchnorm(&load_model(&a.model)?)?;
            let report = calibrated_plan(&model, &a.data, &a.split, a.scheme.scheme()?, seed)?;
            fs::write(&a.out, serde_json::to_string_pretty(&report.plan)?)?;
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!("{:<24} {:>8} {:>10} {:>10} {:>10}", "tensor", "format", "SQNR dB", "overload", "max |x|");
                for t in &report.tensors {
                    let db = t.sqnr_db.map_or("-".into(), |v| format!("{v:.1}"));
                    println!(
                        "{:<24} {:>8} {db:>10} {:>10.2e} {:>10.3}",
                        t.name,
                        t.format.to_string(),
                        t.overload_fraction,
                        t.max_abs
                    );
                }
                if let Some(db) = report.overall_sqnr_db {
                    println!("overall SQNR {db:.1} dB");
                }
                for w in &report.plan.warnings {
                    eprintln!("warning: {w}");
                }
                println!("wrote {}", a.out.display());
            }
        }
        Command::Quantize(a) => {
            let model = fold_batchnorm(&load_model(&a.model)?)?;
            let plan: QuantPlan = match (&a.plan, &a.data) {
                (Some(p), _) => {
                    serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("reading {}", p.display()))?
                }
                (None, Some(d)) => calibrated_plan(&model, d, &a.split, a.scheme.scheme()?, seed)?.plan,
                (None, None) => bail!(usage("give --plan or --data")),
            };
            let qm = quantize_with_plan(&model, plan)?;
            save_quantized(&qm, &a.out)?;
            if cli.json {
                println!(
                    "{}",
                    serde_json::json!({ "out": a.out, "param_bytes": qm.param_bytes(), "ram_bytes": qm.buffer_plan.total })
                );
            } else {
                println!(
                    "wrote {} ({} B weights, {} B activations)",
                    a.out.display(),
                    qm.param_bytes(),
                    qm.buffer_plan.total
                );
            }
        }
        Command::Infer(a) => {
            let patches = read_patches(&a.input, a.resample)?;
            let mut out = serde_json::Map::new();
            let mut float_logits = None;
            if let Some(p) = &a.float {
                let tr = forward(&load_model(p)?, &patches)?;
                let logits: Vec<f64> = tr.logits.iter().map(|&v| v as f64).collect();
                out.insert("float".into(), serde_json::json!({ "predicted": tr.predicted(), "logits": logits }));
                float_logits = Some(logits);
            }
            if let Some(p) = &a.int8 {
                let r = infer_int8(&load_quantized(p)?, &patches)?;
                let logits = r.dequantized_logits();
                out.insert(
                    "int8".into(),
                    serde_json::json!({ "predicted": r.predicted, "logits": logits, "codes": r.logits }),
                );
                if let Some(f) = &float_logits {
                    if f.len() != logits.len() {
                        bail!("float and int8 models have different class counts");
                    }
                    let gap = f.iter().zip(&logits).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                    out.insert("max_logit_gap".into(), gap.into());
                }
            }
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&out)?);
            } else {
                for key in ["float", "int8"] {
                    if let Some(v) = out.get(key) {
                        println!("{key:<5} predicted class {}", v["predicted"]);
                    }
                }
                if let Some(g) = out.get("max_logit_gap") {
                    println!("max logit gap {:.4}", g.as_f64().unwrap_or(f64::NAN));
                }
            }
        }
        Command::Compare(a) => {
            let model = load_model(&a.model)?;
            let qm = load_quantized(&a.qmodel)?;
            let data = load_dataset(&a.data)?;
            let examples = data.split(&a.split).map_err(|e| usage(e.to_string()))?;
            let r = compare_models(&model, &qm, examples)?;
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&r)?);
            } else {
                println!("{} examples", r.samples);
                println!("float accuracy {:.2}%", r.accuracy_float * 100.0);
                println!("int8 accuracy  {:.2}%", r.accuracy_int8 * 100.0);
                println!("gap {:+.2} points, agreement {:.2}%", r.gap * 100.0, r.agreement * 100.0);
            }
        }
        Command::Estimate(a) => {
            let r = estimate(&resolve_arch(&a.arch)?)?;
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&r)?);
            } else {
                print_estimate(&r);
            }
        }
        Command::Feasibility(a) => {
            if a.power_budget.is_some_and(|b| !(b.is_finite() && b > 0.0)) {
                bail!(usage("--power-budget must be positive"));
            }
            let r = estimate(&resolve_arch(&a.arch.arch)?)?;
            let targets = if a.platform.eq_ignore_ascii_case("all") {
                platforms()
            } else {
                vec![platform(&a.platform).map_err(|e| usage(e.to_string()))?]
            };
            let verdicts: Vec<Verdict> = targets.iter().map(|p| feasibility(&r, p, a.power_budget)).collect();
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&verdicts)?);
            } else {
                println!("{}: {} params, {} ops, {} B RAM", r.model, r.total_params, r.total_ops, r.buffer_plan.total);
                for v in &verdicts {
                    let why: Vec<String> = v.reasons.iter().map(ToString::to_string).collect();
                    println!("{:<20} {}  {}", v.platform, if v.passes { "pass" } else { "FAIL" }, why.join("; "));
                }
            }
        }
        Command::Export(a) => {
            let qm = load_quantized(&a.qmodel)?;
            fs::write(&a.out, export_c_header(&qm))?;
            if !cli.json {
                println!("wrote {}", a.out.display());
            } else {
                println!("{}", serde_json::json!({ "out": a.out }));
            }
        }
        Command::SynthData(a) => {
            let mut cfg = SynthConfig {
                classes: a.classes,
                per_class: a.per_class,
                offset: a.offset,
                seed,
                ..SynthConfig::default()
            };
            if let Some(n) = a.noise {
                cfg.noise = n;
            }
            let ds = tinysed::distill::synth_dataset(&cfg)?;
            save_dataset(&ds, &a.out)?;
            let counts = [ds.train.len(), ds.val.len(), ds.test.len()];
            if cli.json {
                println!(
                    "{}",
                    serde_json::json!({ "out": a.out, "train": counts[0], "val": counts[1], "test": counts[2] })
                );
            } else {
                println!("wrote {}: {} train, {} val, {} test", a.out.display(), counts[0], counts[1], counts[2]);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            let mut cmd = Cli::command();
            eprintln!("error: {e}\n\n{}", cmd.render_usage());
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
