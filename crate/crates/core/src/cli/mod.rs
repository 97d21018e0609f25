//! The `drkf` command-line front end.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage or configuration error,
//! 3 numerical failure.

mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub use config::{Overrides, RunConfig};

use crate::dataio::{gen_synthetic, load_fixture, write_fixture, Dataset, FeatureRecord, SyntheticSpec};
use crate::error::{Error, Result};
use crate::numcore::Fault;
use crate::train::{
    evaluate, export_embeddings, gradcheck, load_checkpoint, save_checkpoint, AdamW, DrkfModel, Evaluation,
    GradcheckOptions, LossBreakdown, Trainer,
};

pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "drkf", version, about = "Decoupled representation learning and knowledge fusion for speech/text emotion recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on a fixture; writes loss_log.csv, checkpoint.drkf, config.json and metrics.json.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a fixture.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of every loss.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic fixture.
    GenData(GenDataArgs),
    /// Write fused vectors of every record as CSV.
    ExportEmbeddings(EvalArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: Overrides,
    /// Continue from a checkpoint; its step counter picks up the schedule.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: Overrides,
    /// Checkpoint to load.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Fixture to evaluate (defaults to val_data, then train_data).
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub run: Overrides,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// JSON file with synthetic-data settings (keys as the flags below).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output JSONL path; metadata goes to `<out>.meta.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub d_z: Option<usize>,
    #[arg(long)]
    pub records: Option<usize>,
    /// Speech tokens per record.
    #[arg(long)]
    pub speech_len: Option<usize>,
    /// Text tokens per record.
    #[arg(long)]
    pub text_len: Option<usize>,
    /// Standard deviation of class centroids (token noise is unit).
    #[arg(long)]
    pub separation: Option<f64>,
    /// Probability that a record's text comes from another class.
    #[arg(long)]
    pub inconsistency: Option<f64>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

pub fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::GenData(a) => cmd_gen_data(&a),
        Command::ExportEmbeddings(a) => cmd_export(&a),
    }
}

fn load_checked(path: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let data = load_fixture(path)?;
    if data.meta.d_z != cfg.d_z {
        return Err(Error::Config(format!(
            "{}: features have width {}, config has d_z = {}",
            path.display(),
            data.meta.d_z,
            cfg.d_z
        )));
    }
    if data.meta.classes != cfg.classes {
        return Err(Error::Config(format!(
            "{}: {} classes, config has {}",
            path.display(),
            data.meta.classes,
            cfg.classes
        )));
    }
    Ok(data)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn log_row(out: &mut String, step: u64, l: &LossBreakdown) {
    write!(out, "{step}").expect("write to string");
    for v in l.values() {
        write!(out, ",{v}").expect("write to string");
    }
    out.push('\n');
}

fn print_eval(label: &str, e: &Evaluation) {
    println!("== {label} ==");
    println!("{}", e.metrics);
    println!("ED pair accuracy {:.4} over {} pairs", e.ed_pair_accuracy, e.ed_pairs);
}

fn cmd_train(a: &TrainArgs) -> Result<u8> {
    let cfg = a.run.resolve(RunConfig::default())?;
    let train_path = cfg
        .train_data
        .clone()
        .ok_or_else(|| Error::Config("no training data: set train_data or --train-data".into()))?;
    let train = load_checked(&train_path, &cfg)?;
    let val = cfg.val_data.as_ref().map(|p| load_checked(p, &cfg)).transpose()?;

    let model = DrkfModel::new(cfg.model(), cfg.seed)?;
    let mut t = Trainer::new(model, cfg.optimizer(), cfg.weights(), cfg.batch_size, cfg.seed)?;
    if let Some(ckpt) = &a.resume {
        load_checkpoint(ckpt, &mut t.model, &mut t.optim)?;
        t.optim.config = cfg.optimizer();
    }
    let per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let steps = cfg.steps.unwrap_or(cfg.epochs * per_epoch);

    create_dir(&cfg.out_dir)?;
    let mut log = String::from("step");
    for n in LossBreakdown::NAMES {
        write!(log, ",{n}").expect("write to string");
    }
    log.push('\n');
    for _ in 0..steps {
        let step = t.steps_done();
        let l = t.step(&train)?;
        log_row(&mut log, step, &l);
    }
    write_file(&cfg.out_dir.join("loss_log.csv"), &log)?;
    save_checkpoint(cfg.out_dir.join("checkpoint.drkf"), &t.model, &t.optim)?;
    write_file(&cfg.out_dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;

    let train_eval = evaluate(&t.model, &train, cfg.batch_size, cfg.eval_threads)?;
    let val_eval = val.as_ref().map(|v| evaluate(&t.model, v, cfg.batch_size, cfg.eval_threads)).transpose()?;
    let doc = serde_json::json!({
        "steps": t.steps_done(),
        "train": train_eval,
        "validation": val_eval,
    });
    write_file(&cfg.out_dir.join("metrics.json"), serde_json::to_string_pretty(&doc)?)?;
    println!("trained {steps} steps (total {})", t.steps_done());
    print_eval("train", &train_eval);
    if let Some(v) = &val_eval {
        print_eval("validation", v);
    }
    Ok(0)
}

fn model_from_checkpoint(a: &EvalArgs) -> Result<(RunConfig, DrkfModel, Dataset)> {
    let cfg = a.run.resolve(RunConfig::default())?;
    let path = a
        .data
        .clone()
        .or_else(|| cfg.val_data.clone())
        .or_else(|| cfg.train_data.clone())
        .ok_or_else(|| Error::Config("no dataset: pass --data".into()))?;
    let data = load_checked(&path, &cfg)?;
    let mut model = DrkfModel::new(cfg.model(), cfg.seed)?;
    let mut optim = AdamW::new(cfg.optimizer(), &model.store);
    load_checkpoint(&a.checkpoint, &mut model, &mut optim)?;
    Ok((cfg, model, data))
}

fn cmd_eval(a: &EvalArgs) -> Result<u8> {
    let (cfg, model, data) = model_from_checkpoint(a)?;
    let e = evaluate(&model, &data, cfg.batch_size, cfg.eval_threads)?;
    let json = serde_json::to_string_pretty(&e)?;
    if a.run.out.is_some() {
        create_dir(&cfg.out_dir)?;
        write_file(&cfg.out_dir.join("eval_metrics.json"), &json)?;
    }
    println!("{json}");
    print_eval("evaluation", &e);
    Ok(0)
}

fn cmd_export(a: &EvalArgs) -> Result<u8> {
    let (cfg, model, data) = model_from_checkpoint(a)?;
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("embeddings.csv");
    export_embeddings(&model, &data, &path)?;
    println!("wrote {} rows to {}", data.len(), path.display());
    Ok(0)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<u8> {
    let cfg = a.run.resolve(RunConfig::gradcheck_defaults())?;
    if cfg.d_z > 16 || cfg.batch_size > 2 {
        return Err(Error::Config(format!(
            "gradcheck is limited to d_z <= 16 and M <= 2 (got d_z = {}, M = {})",
            cfg.d_z, cfg.batch_size
        )));
    }
    let records: Vec<FeatureRecord> = match &cfg.train_data {
        Some(p) => load_checked(p, &cfg)?.records.into_iter().take(cfg.batch_size).collect(),
        None => {
            gen_synthetic(&SyntheticSpec {
                classes: cfg.classes,
                d_z: cfg.d_z,
                records: cfg.batch_size,
                m: 3,
                n: 2,
                seed: cfg.seed,
                ..SyntheticSpec::default()
            })?
            .dataset
            .records
        }
    };
    let refs: Vec<&FeatureRecord> = records.iter().collect();
    let model = DrkfModel::new(cfg.model(), cfg.seed)?;
    let opts = GradcheckOptions {
        h: a.step,
        tolerance: a.tolerance,
        fault: if a.inject_fault { Fault::SiluBackward } else { Fault::None },
        ..GradcheckOptions::default()
    };
    let report = gradcheck(&model, &refs, &cfg.weights(), &opts)?;
    println!("{} parameters, tolerance {:e}", report.parameters, report.tolerance);
    println!("{:<11} {:>12}  {:<6} worst coordinate", "component", "max rel err", "status");
    for c in &report.components {
        println!(
            "{:<11} {:>12.3e}  {:<6} {}[{}]",
            c.name,
            c.max_rel_error,
            if c.passed { "ok" } else { "FAIL" },
            c.worst_param,
            c.worst_index
        );
        if !c.passed {
            let shown: Vec<&str> = c.offenders.iter().take(6).map(String::as_str).collect();
            let more = c.offenders.len() - shown.len();
            let tail = if more > 0 { format!(" and {more} more") } else { String::new() };
            println!("    offending parameters: {}{tail}", shown.join(", "));
        }
    }
    Ok(if report.passed() { 0 } else { EXIT_CHECK_FAILED })
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<u8> {
    let mut spec = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<SyntheticSpec>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => { $(if let Some(v) = a.$flag { spec.$field = v; })* };
    }
    set!(seed => seed, classes => classes, d_z => d_z, records => records, speech_len => m,
        text_len => n, separation => separation, inconsistency => inconsistency_rate);
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    let data = gen_synthetic(&spec)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_fixture(&data.dataset, &a.out)?;
    println!("wrote {} records to {}", data.dataset.len(), a.out.display());
    println!("class histogram:");
    for (k, n) in data.class_histogram().iter().enumerate() {
        println!("  {k}: {n}");
    }
    println!("inconsistent records: {}", data.inconsistent_count());
    Ok(0)
}
