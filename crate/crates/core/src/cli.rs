//! Command-line front end.
//!
//! Exit codes: 0 success, 1 invalid input or arguments, 2 failure while running.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::audit::{run_suite, Precision};
use crate::data::{read_image, synth_generate, DataConfig, Dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{confusion_csv, evaluate, pooled_curve, write_pr_csv, write_pr_svg, EvalConfig, EvalReport};
use crate::inference::{evaluate_model, images_from_records, infer_image, load_detector, read_detection_records};
use crate::train::{train, Checkpoint, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "scb-detr", version, about = "Train and evaluate a small deformable detection transformer on CPU")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset: PPM images plus annotations.json
    Synth(SynthArgs),
    /// Check every analytic gradient against central finite differences
    Gradcheck(GradcheckArgs),
    /// Train from a JSON config
    Train(TrainArgs),
    /// Score a checkpoint, or a detections file, against a dataset
    Eval(EvalArgs),
    /// Detect objects in one image
    Infer(InferArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub images: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Image side in pixels
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 1)]
    pub min_objects: usize,
    #[arg(long, default_value_t = 5)]
    pub max_objects: usize,
    /// Probability that an object is placed over an earlier one
    #[arg(long, default_value_t = 0.25)]
    pub occlusion: f64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Relative-error tolerance (default 1e-3, or 1e-5 with --double)
    #[arg(long)]
    pub tol: Option<f64>,
    /// Take analytic gradients in f64 instead of f32
    #[arg(long)]
    pub double: bool,
    /// Number of random seeds per case
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Print every case, not only failures
    #[arg(long, short)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, required_unless_present = "dump_config")]
    pub config: Option<PathBuf>,
    #[arg(long, required_unless_present = "dump_config")]
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint that carries optimizer state
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Print the effective configuration (all defaults when no --config) and exit
    #[arg(long)]
    pub dump_config: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "detections", conflicts_with = "detections")]
    pub ckpt: Option<PathBuf>,
    /// COCO-style results list of {image_id, category_id, bbox [x,y,w,h], score}
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// Dataset directory holding annotations.json
    #[arg(long)]
    pub data: PathBuf,
    /// Restrict to images of this split
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub report: PathBuf,
    /// Precision-recall curve at IoU 0.5, all classes pooled
    #[arg(long)]
    pub pr_csv: PathBuf,
    #[arg(long)]
    pub pr_svg: Option<PathBuf>,
    /// Confusion matrix CSV (rows ground truth, columns predicted)
    #[arg(long)]
    pub confusion: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// PNG (8-bit RGB) or binary PPM
    #[arg(long)]
    pub image: PathBuf,
    /// Output JSON list of detections
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub score_thresh: f64,
}

/// Parses `argv` and runs the selected command.
pub fn main_with<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

pub fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Infer(a) => infer_cmd(a),
    }
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let cfg = SynthConfig {
        images: a.images,
        size: a.size,
        classes: a.classes,
        min_objects: a.min_objects,
        max_objects: a.max_objects,
        occlusion: a.occlusion,
        seed: a.seed,
    };
    let file = synth_generate(&cfg, &a.out)?;
    println!("wrote {} images, {} objects to {}", file.images.len(), file.annotations.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let precision = if a.double { Precision::Double } else { Precision::Single };
    if let Some(t) = a.tol {
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::Validation(format!("--tol must be positive, got {t}")));
        }
    }
    if a.seeds == 0 {
        return Err(Error::Validation("--seeds must be >= 1".into()));
    }
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let start = std::time::Instant::now();
    let results = run_suite(precision, &seeds, a.tol, |r| {
        if a.verbose || !r.report.passed() {
            let status = if r.report.passed() { "ok" } else { "FAILED" };
            println!("{:<28} seed {}  {} coords  max rel-err {:.3e}  {status}", r.name, r.seed, r.report.checks.len(), r.report.max_rel_err());
        }
    })?;
    let failed = results.iter().filter(|r| !r.report.passed()).count();
    let worst = results.iter().map(|r| r.report.max_rel_err()).fold(0.0, f64::max);
    let tol = results.first().map_or(0.0, |r| r.report.tolerance);
    println!(
        "{} precision: {} checks, {failed} failed, worst rel-err {worst:.3e} (tol {tol:.0e}), {:.1}s",
        if a.double { "double" } else { "single" },
        results.len(),
        start.elapsed().as_secs_f64()
    );
    // a failed audit is a finding about the code, not bad input
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn train_cmd(a: TrainArgs) -> Result<ExitCode> {
    let cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if a.dump_config {
        // ignore a closed pipe, as in `--dump-config | head`
        let _ = writeln!(std::io::stdout().lock(), "{}", cfg.to_json());
        return Ok(ExitCode::SUCCESS);
    }
    let out = a.out.as_deref().expect("clap requires --out");
    let summary = train(&cfg, out, a.resume.as_deref(), |r| {
        if r.step == 1 || r.step % 50 == 0 || r.step == cfg.steps {
            println!(
                "step {:6}  loss {:.4}  cls {:.4}  l1 {:.4}  giou {:.4}  lr {:.2e}  |g| {:.3}",
                r.step, r.total, r.cls, r.l1, r.giou, r.lr, r.grad_norm
            );
        }
    })?;
    if let Some(e) = &summary.last_eval {
        println!("eval  mAP {:.4}  AP50 {:.4}  AR100 {:.4}", e.map, e.ap50, e.ar100);
    }
    println!("checkpoint {}", summary.final_checkpoint.display());
    Ok(ExitCode::SUCCESS)
}

fn eval_cmd(a: EvalArgs) -> Result<ExitCode> {
    let cfg = EvalConfig::default();
    let (report, images, names) = match (&a.ckpt, &a.detections) {
        (Some(ck), _) => {
            let ck = Checkpoint::load(ck)?;
            let data = DataConfig { dir: a.data.clone(), split: a.split.clone(), ..ck.config.data.clone() };
            let ds = Dataset::open(&data)?;
            if ds.class_names() != ck.class_names.as_slice() {
                return Err(Error::Validation(format!(
                    "checkpoint classes {:?} differ from dataset classes {:?}",
                    ck.class_names,
                    ds.class_names()
                )));
            }
            let (model, store) = load_detector(&ck)?;
            let (report, images) = evaluate_model(&model, &store, &ds, &cfg)?;
            (report, images, ds.class_names().to_vec())
        }
        (None, Some(path)) => {
            let data = DataConfig { dir: a.data.clone(), split: a.split.clone(), ..DataConfig::default() };
            let ds = Dataset::open(&data)?;
            let images = images_from_records(&ds, &read_detection_records(path)?)?;
            (evaluate(&images, ds.class_names(), &cfg)?, images, ds.class_names().to_vec())
        }
        (None, None) => unreachable!("clap requires --ckpt or --detections"),
    };
    write_json(&a.report, &report)?;
    let curve = pooled_curve(&images, names.len(), 0.5, cfg.max_dets);
    write_pr_csv(&curve, &a.pr_csv)?;
    if let Some(p) = &a.pr_svg {
        write_pr_svg(&curve, &format!("PR @ IoU 0.5 (AP50 {:.3})", report.ap50), p)?;
    }
    if let Some(p) = &a.confusion {
        std::fs::write(p, confusion_csv(&report.confusion, &names)).map_err(|e| Error::io(p, e))?;
    }
    print_report(&report);
    Ok(ExitCode::SUCCESS)
}

fn print_report(r: &EvalReport) {
    println!("mAP {:.4}  AP50 {:.4}  AP75 {:.4}  AR100 {:.4}  ({} images)", r.map, r.ap50, r.ap75, r.ar100, r.images);
    for c in &r.per_class {
        match c.ap_mean {
            Some(ap) => println!("  {:<16} {:4} gt  AP {:.4}", c.name, c.gt_count, ap),
            None => println!("  {:<16} {:4} gt  AP -", c.name, c.gt_count),
        }
    }
}

fn infer_cmd(a: InferArgs) -> Result<ExitCode> {
    if !(0.0..=1.0).contains(&a.score_thresh) {
        return Err(Error::Validation(format!("--score-thresh must lie in [0, 1], got {}", a.score_thresh)));
    }
    let ck = Checkpoint::load(&a.ckpt)?;
    let (model, store) = load_detector(&ck)?;
    let img = read_image(&a.image)?;
    let dets = infer_image(&model, &store, &img, &ck.config.data, &ck.class_names, a.score_thresh)?;
    write_json(&a.out, &dets)?;
    println!("{} detections written to {}", dets.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data serialises");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
