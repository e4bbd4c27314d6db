use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use candle_core::Device;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use detseg::checkpoint::Checkpoint;
use detseg::config::RunConfig;
use detseg::data::{check_layout, collate, synth_shapes, write_layout, SampleRecord};
use detseg::metrics::MetricReport;
use detseg::model::Model;
use detseg::segmenter::ImageRecord;
use detseg::trainer::{dataset_for, evaluate, parse_log, train};
use detseg::{render, report, Error};

/// Environment variable naming the default output root.
const OUTPUT_ROOT_VAR: &str = "DETSEG_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "detseg", version, about = "Detector-prompted instance segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset or validate an existing layout.
    PrepareData(PrepareArgs),
    /// Train detector and segmenter jointly.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Segment an image or a directory of images.
    Infer(InferArgs),
    /// Tables and plots from logs and metric files.
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Run config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set lr=0.0002`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct PrepareArgs {
    /// Dataset root.
    #[arg(long)]
    root: PathBuf,
    /// Generate `N` synthetic images from `SEED`, written as `SEED/N`.
    #[arg(long, value_name = "SEED/N", conflicts_with = "layout_check")]
    synthetic: Option<String>,
    /// Synthetic image side in pixels.
    #[arg(long, default_value_t = 128)]
    size: u32,
    /// Synthetic shape classes (1 to 4).
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Validate the layout under `--root` and report frame counts.
    #[arg(long)]
    layout_check: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Overrides applied to the checkpoint's config (data and threshold keys).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// `train` or `test`.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image file or directory of PNG images.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    score_threshold: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Training log (`train_log.jsonl`).
    #[arg(long)]
    log: Option<PathBuf>,
    /// One or two metric files written by `eval`.
    #[arg(long, num_args = 1..=2)]
    metrics: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Config(_) => Failure::Usage(e.to_string()),
            Error::Data(_) | Error::Io { .. } | Error::Image { .. } | Error::Json(_) | Error::VersionMismatch { .. } => {
                Failure::Data(e.to_string())
            }
            Error::Tensor(_) | Error::NonFiniteLoss { .. } => Failure::Runtime(e.to_string()),
        }
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::PrepareData(a) => prepare_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Report(a) => report_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn output_dir(explicit: Option<PathBuf>, command: &str) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let root = std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| "runs".into());
        root.join(command)
    })
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> CliResult {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    args: Vec<String>,
    code_version: &'a str,
    config: Option<String>,
    unix_ms: u64,
}

fn write_manifest(dir: &Path, command: &str, config: Option<&RunConfig>) -> CliResult {
    create_dir(dir)?;
    let m = RunManifest {
        command,
        args: std::env::args().skip(1).collect(),
        code_version: detseg::VERSION,
        config: config.map(RunConfig::to_toml),
        unix_ms: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0),
    };
    let text = serde_json::to_string_pretty(&m).map_err(|e| Failure::Runtime(e.to_string()))?;
    write_file(&dir.join("run_manifest.json"), text)
}

fn resolve_config(a: &ConfigArgs) -> Result<RunConfig, Failure> {
    let base = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(base.with_overrides(&a.overrides)?)
}

fn prepare_data(a: PrepareArgs) -> CliResult {
    if a.layout_check {
        let r = check_layout(&a.root)?;
        for (k, n) in &r.sequences {
            println!("seq_{k}: {n} frames");
        }
        if r.is_valid() {
            println!("layout ok");
            return Ok(());
        }
        for p in &r.problems {
            println!("problem: {p}");
        }
        return Err(Failure::Data(format!("{} layout problems", r.problems.len())));
    }
    let Some(seed_n) = a.synthetic else {
        return Err(Failure::Usage("prepare-data needs --synthetic SEED/N or --layout-check".into()));
    };
    let (seed, n) = seed_n
        .split_once('/')
        .and_then(|(s, n)| Some((s.trim().parse::<u64>().ok()?, n.trim().parse::<usize>().ok()?)))
        .ok_or_else(|| Failure::Usage(format!("--synthetic expects SEED/N, got {seed_n:?}")))?;
    if n == 0 {
        return Err(Failure::Usage("--synthetic needs at least one image".into()));
    }
    let d = synth_shapes(seed, n, a.size, a.classes)?;
    write_layout(&d, &a.root, 1)?;
    write_manifest(&a.root, "prepare-data", None)?;
    println!("wrote {n} images to {}", a.root.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let cfg = resolve_config(&a.config)?;
    cfg.validate()?;
    if a.dry_run {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let out = output_dir(a.out, "train");
    write_manifest(&out, "train", Some(&cfg))?;
    let train_set = dataset_for(&cfg, false)?;
    let model = Model::new(&cfg, train_set.catalog.clone(), &Device::Cpu)?;
    let started = Instant::now();
    let outcome = train(model, &train_set, None, Some(&out))?;
    println!(
        "trained {} steps in {:.1}s{}; checkpoint {}",
        outcome.steps_run,
        started.elapsed().as_secs_f64(),
        if outcome.stopped_early { " (targets reached)" } else { "" },
        outcome.final_checkpoint.as_deref().unwrap_or(Path::new("-")).display()
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> CliResult {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cfg = ck.config.with_overrides(&a.overrides)?;
    let test = match a.split.as_str() {
        "test" => true,
        "train" => false,
        other => return Err(Failure::Usage(format!("--split must be train or test, got {other:?}"))),
    };
    let out = output_dir(a.out, "eval");
    write_manifest(&out, "eval", Some(&cfg))?;
    let dataset = dataset_for(&cfg, test)?;
    if dataset.catalog != ck.catalog {
        return Err(Failure::Data("dataset classes differ from the checkpoint's".into()));
    }
    let model = ck.to_model(&Device::Cpu)?;
    let r = evaluate(&model, &dataset, cfg.score_threshold, cfg.batch_size)?;
    write_file(&out.join("metrics.json"), r.to_json()?)?;
    write_file(&out.join("metrics.csv"), r.to_csv())?;
    write_file(&out.join("per_class.csv"), r.per_class_csv())?;
    print!("{}", r.to_csv());
    Ok(())
}

fn image_inputs(input: &Path) -> Result<Vec<PathBuf>, Failure> {
    if input.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(input)
            .map_err(|e| io_err(input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        v.sort();
        Ok(v)
    } else if input.is_file() {
        Ok(vec![input.to_path_buf()])
    } else {
        Err(Failure::Data(format!("{} does not exist", input.display())))
    }
}

fn infer_cmd(a: InferArgs) -> CliResult {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let threshold = a.score_threshold.unwrap_or(ck.config.score_threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Failure::Usage(format!("--score-threshold must be in [0, 1], got {threshold}")));
    }
    let out = output_dir(a.out, "infer");
    write_manifest(&out, "infer", Some(&ck.config))?;
    let model = ck.to_model(&Device::Cpu)?;
    let cfg = model.config().clone();
    let inputs = image_inputs(&a.input)?;
    let mut done = 0;
    for path in &inputs {
        let img = match image::open(path) {
            Ok(i) => i.to_rgb8(),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        let t0 = Instant::now();
        let sample = SampleRecord::unlabeled(stem.clone(), img);
        let batch = collate(&[&sample], cfg.image_size, model.size_multiple(), &cfg.normalization(), model.device())?;
        let pred = model.predict(&batch, threshold)?.remove(0);
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        println!("frame {stem}: {ms:.1} ms, {} instances", pred.instances.len());
        let name = path.file_name().and_then(|s| s.to_str()).unwrap_or(&stem).to_string();
        let record = ImageRecord::new(name, pred.size, &pred.instances);
        let json = serde_json::to_string_pretty(&record).map_err(|e| Failure::Runtime(e.to_string()))?;
        write_file(&out.join(format!("{stem}.json")), json + "\n")?;
        let overlay = render::overlay(&sample.image, &pred.instances);
        let op = out.join(format!("{stem}_overlay.png"));
        overlay.save(&op).map_err(|e| Failure::Data(format!("{}: {e}", op.display())))?;
        done += 1;
    }
    if done == 0 {
        return Err(Failure::Data(format!("no readable images under {}", a.input.display())));
    }
    Ok(())
}

fn read_text(p: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(p).map_err(|e| io_err(p, e))
}

fn report_cmd(a: ReportArgs) -> CliResult {
    if a.log.is_none() && a.metrics.is_empty() {
        return Err(Failure::Usage("report needs --log and/or --metrics".into()));
    }
    let out = output_dir(a.out, "report");
    write_manifest(&out, "report", None)?;
    if let Some(log_path) = &a.log {
        let entries = parse_log(&read_text(log_path)?).map_err(|e| Failure::Data(format!("{}: {e}", log_path.display())))?;
        write_file(&out.join("loss_table.csv"), report::loss_table(&entries)?)?;
        let img = report::loss_curve(&entries, 640, 400);
        let p = out.join("loss_curve.png");
        img.save(&p).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?;
    }
    let reports = a
        .metrics
        .iter()
        .map(|p| {
            let r = MetricReport::from_json(&read_text(p)?).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?;
            let name = p
                .parent()
                .and_then(|d| d.file_name())
                .or_else(|| p.file_stem())
                .and_then(|s| s.to_str())
                .unwrap_or("run")
                .to_string();
            Ok((name, r))
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    match reports.as_slice() {
        [] => {}
        [(_, r)] => write_file(&out.join("metrics_table.csv"), report::metric_table(r))?,
        [(an, ar), (bn, br)] => {
            let (an, bn) = if an == bn { ("a".to_string(), "b".to_string()) } else { (an.clone(), bn.clone()) };
            write_file(&out.join("comparison.csv"), report::comparison_table(&an, ar, &bn, br))?
        }
        _ => unreachable!("clap limits --metrics to two files"),
    }
    println!("report written to {}", out.display());
    Ok(())
}
