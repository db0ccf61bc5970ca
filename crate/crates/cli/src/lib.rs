//! `sympie` command-line front end. Every subcommand delegates to the core
//! library; errors are printed as one JSON line on stderr.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use sympie::checkpoint::{load_classifier, load_enhancer, save_classifier};
use sympie::corruptions::{corrupt_dataset, CorruptionKind};
use sympie::evaluation::{
    bench_throughput, estimate_flops_with, evaluate_manifest, evaluate_mixed, iteration_stats, EvalReport,
};
use sympie::imaging::{load_image, save_image};
use sympie::nem::{iterate_enhance, EnhancerState, FixedEnhancer, ImageEnhancer, NemConfig};
use sympie::training::{
    load_dataset, make_synthetic_dataset, save_dataset, train_loop, train_upstream, ClassifierConfig,
    LoopOptions, TrainConfig, UpstreamConfig,
};

#[derive(Debug, Parser)]
#[command(name = "sympie", version, about = "Train and apply a parametric image enhancer")]
pub struct Cli {
    /// Seed for all randomness; overrides a config file value [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic shape × color dataset as class folders of PNGs
    Synth(SynthArgs),
    /// Write every kind × severity copy of a dataset plus a manifest
    Corrupt(CorruptArgs),
    /// Train the frozen upstream classifier on clean images
    TrainUpstream(TrainUpstreamArgs),
    /// Train the enhancer through a frozen classifier
    Train(TrainArgs),
    /// Enhance one PNG or every PNG under a directory
    Enhance(EnhanceArgs),
    /// Feed the enhancer its own output repeatedly
    Iterate(IterateArgs),
    /// Accuracy report on a corrupted dataset, optionally against an enhancer
    Eval(EvalArgs),
    /// Measure warp-only and full-pipeline throughput
    Bench(BenchArgs),
    /// Analytic FLOP count of one enhancement
    Flops(FlopsArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Images per class
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    /// Image side in pixels
    #[arg(long, default_value_t = 32)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct CorruptArgs {
    /// Clean dataset directory
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated corruption names, or "all"
    #[arg(long, default_value = "all")]
    pub kinds: String,
    /// Severities as "a..b" or a comma list
    #[arg(long, default_value = "1..5")]
    pub severities: String,
}

#[derive(Debug, Args)]
pub struct TrainUpstreamArgs {
    /// Clean dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Classifier checkpoint to write
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated conv widths
    #[arg(long, default_value = "16,32,64")]
    pub widths: String,
    #[arg(long, default_value_t = 20)]
    /// Passes over the data
    pub epochs: usize,
    /// Batch size
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Peak learning rate
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Clean training dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Frozen classifier checkpoint
    #[arg(long)]
    pub classifier: PathBuf,
    /// Directory for checkpoints, metrics and the final enhancer
    #[arg(long)]
    pub out_dir: PathBuf,
    /// TOML file with training config fields [default: built-in defaults]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training checkpoint to continue from [default: start fresh]
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Override total_steps [default: from config]
    #[arg(long)]
    pub steps: Option<u64>,
    /// Override batch_size [default: from config]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Stop after this many steps without finishing the schedule [default: run to the end]
    #[arg(long)]
    pub stop_after: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    /// Enhancer or training checkpoint
    #[arg(long)]
    pub enhancer: PathBuf,
    /// Input PNG or directory
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output PNG or directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IterateArgs {
    /// Enhancer checkpoint [default: identity enhancer]
    #[arg(long)]
    pub enhancer: Option<PathBuf>,
    /// Input PNG
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Number of self-applications
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    /// Output directory [default: the input's directory]
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Classifier checkpoint
    #[arg(long)]
    pub classifier: PathBuf,
    /// Corrupted dataset directory containing a manifest
    #[arg(long)]
    pub data: PathBuf,
    /// Enhancer checkpoint to compare against the baseline [default: baseline only]
    #[arg(long)]
    pub enhancer: Option<PathBuf>,
    /// Directory for the JSON reports
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Also score mixed corruptions of the clean source images
    #[arg(long, default_value_t = false)]
    pub mixed: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Enhancer checkpoint [default: fixed 5x5 box filter, identity color map]
    #[arg(long)]
    pub enhancer: Option<PathBuf>,
    /// Image height
    #[arg(long, default_value_t = 1080)]
    pub height: usize,
    /// Image width
    #[arg(long, default_value_t = 1920)]
    pub width: usize,
    /// Timed iterations (at least 10)
    #[arg(long, default_value_t = 10)]
    pub iterations: usize,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    /// Read the estimator config from this enhancer checkpoint [default: use --widths]
    #[arg(long)]
    pub enhancer: Option<PathBuf>,
    /// Estimator widths
    #[arg(long, default_value = "64,128,256,512")]
    pub widths: String,
    /// Estimator input side
    #[arg(long, default_value_t = 224)]
    pub nem_size: usize,
    /// Warp height
    #[arg(long, default_value_t = 1080)]
    pub dwm_height: usize,
    /// Warp width
    #[arg(long, default_value_t = 1920)]
    pub dwm_width: usize,
    /// FLOPs per multiply-accumulate
    #[arg(long, default_value_t = 2.0)]
    pub flops_per_mac: f64,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    MissingInput(String),
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::MissingInput(_) => 3,
            Self::Config(_) => 4,
            Self::Runtime(_) => 5,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::MissingInput(_) => "missing_input",
            Self::Config(_) => "config",
            Self::Runtime(_) => "runtime",
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::MissingInput(m) | Self::Config(m) | Self::Runtime(m) => m,
        }
    }

    /// Single-line JSON rendering.
    pub fn line(&self) -> String {
        json!({"error": self.kind(), "code": self.code(), "message": self.message()}).to_string()
    }
}

type CliResult<T> = Result<T, CliError>;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn require(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput(format!("{} does not exist", path.display())))
    }
}

fn log_config(command: &str, seed: u64, threads: usize, config: serde_json::Value) {
    eprintln!("{}", json!({"command": command, "seed": seed, "threads": threads, "config": config}));
}

fn artifact(path: &Path) {
    println!("{}", path.display());
}

pub fn parse_usize_list(s: &str) -> CliResult<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| CliError::Usage(format!("bad integer {p:?} in {s:?}"))))
        .collect()
}

pub fn parse_kinds(s: &str) -> CliResult<Vec<CorruptionKind>> {
    if s == "all" {
        return Ok(CorruptionKind::ALL.to_vec());
    }
    s.split(',').map(|p| p.trim().parse().map_err(|e| CliError::Usage(format!("{e}")))).collect()
}

pub fn parse_severities(s: &str) -> CliResult<Vec<u8>> {
    let bad = || CliError::Usage(format!("bad severities {s:?}"));
    let out: Vec<u8> = match s.split_once("..") {
        Some((a, b)) => {
            let (a, b): (u8, u8) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
            (a..=b).collect()
        }
        None => s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?,
    };
    if out.is_empty() || out.iter().any(|v| !(1..=5).contains(v)) {
        return Err(bad());
    }
    Ok(out)
}

fn load_enhancer_or_identity(path: Option<&Path>) -> CliResult<Box<dyn ImageEnhancer>> {
    match path {
        Some(p) => {
            require(p)?;
            Ok(Box::new(load_enhancer::<f32>(p).map_err(runtime)?))
        }
        None => Ok(Box::new(FixedEnhancer::identity())),
    }
}

fn cmd_synth(a: &SynthArgs, seed: u64, threads: usize) -> CliResult<()> {
    log_config("synth", seed, threads, json!({"out": a.out, "per_class": a.per_class, "size": a.size}));
    if a.per_class == 0 || a.size < 8 {
        return Err(CliError::Usage("--per-class must be positive and --size at least 8".into()));
    }
    let data = make_synthetic_dataset(a.per_class, a.size, seed);
    save_dataset(&data, &a.out).map_err(runtime)?;
    artifact(&a.out);
    Ok(())
}

fn cmd_corrupt(a: &CorruptArgs, seed: u64, threads: usize) -> CliResult<()> {
    let kinds = parse_kinds(&a.kinds)?;
    let severities = parse_severities(&a.severities)?;
    log_config(
        "corrupt",
        seed,
        threads,
        json!({"in": a.input, "out": a.out, "kinds": kinds, "severities": severities}),
    );
    require(&a.input)?;
    let m = corrupt_dataset(&a.input, &a.out, &kinds, &severities, seed).map_err(runtime)?;
    eprintln!("{}", json!({"records": m.records.len()}));
    artifact(&a.out);
    Ok(())
}

fn cmd_train_upstream(a: &TrainUpstreamArgs, seed: u64, threads: usize) -> CliResult<()> {
    let cfg = UpstreamConfig {
        arch: ClassifierConfig {
            widths: parse_usize_list(&a.widths)?,
            ..ClassifierConfig::default()
        },
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed,
    };
    log_config("train-upstream", seed, threads, json!({"data": a.data, "out": a.out, "upstream": cfg}));
    require(&a.data)?;
    let (classes, data) = load_dataset(&a.data).map_err(runtime)?;
    let mut cfg = cfg;
    cfg.arch.num_classes = classes.len();
    let clf = train_upstream::<f32>(&data, classes, &cfg).map_err(runtime)?;
    let acc = sympie::training::accuracy(&clf, &data).map_err(runtime)?;
    eprintln!("{}", json!({"train_accuracy": acc}));
    save_classifier(&a.out, &clf).map_err(runtime)?;
    artifact(&a.out);
    Ok(())
}

fn resolve_train_config(a: &TrainArgs, seed: Option<u64>) -> CliResult<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            require(p)?;
            let text = std::fs::read_to_string(p).map_err(runtime)?;
            TrainConfig::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.total_steps = s;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs, seed: Option<u64>, threads: usize) -> CliResult<()> {
    let cfg = resolve_train_config(a, seed)?;
    log_config(
        "train",
        cfg.seed,
        threads,
        json!({"data": a.data, "classifier": a.classifier, "out_dir": a.out_dir, "resume": a.resume,
               "stop_after": a.stop_after, "train": cfg}),
    );
    require(&a.data)?;
    require(&a.classifier)?;
    if let Some(r) = &a.resume {
        require(r)?;
    }
    let clf = load_classifier::<f32>(&a.classifier).map_err(runtime)?;
    let (_, data) = load_dataset(&a.data).map_err(runtime)?;
    let opts = LoopOptions {
        out_dir: Some(a.out_dir.clone()),
        resume_from: a.resume.clone(),
        stop_after: a.stop_after,
    };
    let out = train_loop(&cfg, &data, &clf, &opts).map_err(runtime)?;
    if let Some(last) = out.reports.last() {
        eprintln!("{}", serde_json::to_string(last).map_err(runtime)?);
    }
    let final_path = a.out_dir.join(sympie::training::FINAL_ENHANCER);
    if final_path.exists() {
        artifact(&final_path);
    }
    artifact(&sympie::training::checkpoint_path(&a.out_dir, out.state.live.nem.step));
    Ok(())
}

/// PNG files under `dir`, relative and sorted.
fn pngs_under(dir: &Path) -> CliResult<Vec<PathBuf>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                out.push(path.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out).map_err(runtime)?;
    out.sort();
    Ok(out)
}

fn cmd_enhance(a: &EnhanceArgs, seed: u64, threads: usize) -> CliResult<()> {
    log_config("enhance", seed, threads, json!({"enhancer": a.enhancer, "in": a.input, "out": a.out}));
    require(&a.input)?;
    let enh: EnhancerState<f32> = {
        require(&a.enhancer)?;
        load_enhancer(&a.enhancer).map_err(runtime)?
    };
    let jobs: Vec<(PathBuf, PathBuf)> = if a.input.is_dir() {
        pngs_under(&a.input)?
            .into_iter()
            .map(|rel| (a.input.join(&rel), a.out.join(&rel)))
            .collect()
    } else {
        vec![(a.input.clone(), a.out.clone())]
    };
    for (src, dst) in &jobs {
        let img = load_image(src).map_err(runtime)?;
        let out = enh.enhance_one(&img).map_err(runtime)?;
        if let Some(parent) = dst.parent() {
            std::fs::create_dir_all(parent).map_err(runtime)?;
        }
        save_image(&out, dst).map_err(runtime)?;
    }
    artifact(&a.out);
    Ok(())
}

fn cmd_iterate(a: &IterateArgs, seed: u64, threads: usize) -> CliResult<()> {
    log_config(
        "iterate",
        seed,
        threads,
        json!({"enhancer": a.enhancer, "in": a.input, "n": a.n, "out_dir": a.out_dir}),
    );
    require(&a.input)?;
    let enh = load_enhancer_or_identity(a.enhancer.as_deref())?;
    let img = load_image(&a.input).map_err(runtime)?;
    let its = iterate_enhance(enh.as_ref(), &img, a.n).map_err(runtime)?;
    let dir = match &a.out_dir {
        Some(d) => d.clone(),
        None => a.input.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    std::fs::create_dir_all(&dir).map_err(runtime)?;
    let stem = a.input.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    for (i, it) in its.iter().enumerate() {
        let path = dir.join(format!("{stem}_{}.png", i + 1));
        save_image(it, &path).map_err(runtime)?;
        artifact(&path);
    }
    let (stds, changes) = iteration_stats(&img, &its);
    eprintln!("{}", json!({"pixel_std": stds, "rms_change": changes}));
    Ok(())
}

fn write_json(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, format!("{text}\n")).map_err(runtime)?;
    artifact(path);
    Ok(())
}

fn cmd_eval(a: &EvalArgs, seed: u64, threads: usize) -> CliResult<()> {
    log_config(
        "eval",
        seed,
        threads,
        json!({"classifier": a.classifier, "data": a.data, "enhancer": a.enhancer, "out_dir": a.out_dir, "mixed": a.mixed}),
    );
    require(&a.classifier)?;
    require(&a.data)?;
    let clf = load_classifier::<f32>(&a.classifier).map_err(runtime)?;
    let enh = match &a.enhancer {
        Some(p) => {
            require(p)?;
            Some(load_enhancer::<f32>(p).map_err(runtime)?)
        }
        None => None,
    };
    std::fs::create_dir_all(&a.out_dir).map_err(runtime)?;
    let base = evaluate_manifest("baseline", &clf, None, &a.data).map_err(runtime)?;
    write_json(&a.out_dir.join("baseline.json"), &base.to_json())?;
    let mixed_source = || -> CliResult<Vec<sympie::training::LabeledSample>> {
        let m = sympie::corruptions::read_manifest(a.data.join(sympie::corruptions::MANIFEST_FILE)).map_err(runtime)?;
        Ok(load_dataset(m.source_dir(&a.data)).map_err(runtime)?.1)
    };
    let mut summary = json!({
        "baseline": {"clean": base.clean, "corruption_average": base.corruption_average},
    });
    let clean = if a.mixed { Some(mixed_source()?) } else { None };
    if let Some(clean) = &clean {
        summary["baseline"]["mixed"] = json!(evaluate_mixed(&clf, None, clean, seed).map_err(runtime)?);
    }
    if let Some(enh) = &enh {
        let mut ours: EvalReport = evaluate_manifest("enhanced", &clf, Some(enh), &a.data).map_err(runtime)?;
        ours.compare_to(&base);
        write_json(&a.out_dir.join("enhanced.json"), &ours.to_json())?;
        let cmp = ours.comparison.clone().expect("comparison set");
        summary["enhanced"] = json!({"clean": ours.clean, "corruption_average": ours.corruption_average});
        summary["delta"] = json!(cmp.delta);
        summary["pct_delta"] = json!(cmp.pct_delta);
        summary["clean_delta"] = json!(cmp.clean_delta);
        if let Some(clean) = &clean {
            let m = evaluate_mixed(&clf, Some(enh), clean, seed).map_err(runtime)?;
            summary["enhanced"]["mixed"] = json!(m);
        }
    }
    let text = serde_json::to_string_pretty(&summary).map_err(runtime)?;
    write_json(&a.out_dir.join("summary.json"), &text)?;
    Ok(())
}

fn cmd_bench(a: &BenchArgs, seed: u64, threads: usize) -> CliResult<()> {
    log_config(
        "bench",
        seed,
        threads,
        json!({"enhancer": a.enhancer, "height": a.height, "width": a.width, "iterations": a.iterations}),
    );
    let enh: Box<dyn ImageEnhancer> = match &a.enhancer {
        Some(p) => load_enhancer_or_identity(Some(p))?,
        None => Box::new(FixedEnhancer::box_filter(5)),
    };
    let r = bench_throughput(enh.as_ref(), [a.height, a.width], a.iterations, threads).map_err(runtime)?;
    println!("{}", serde_json::to_string_pretty(&r).map_err(runtime)?);
    Ok(())
}

fn cmd_flops(a: &FlopsArgs, seed: u64, threads: usize) -> CliResult<()> {
    let cfg = match &a.enhancer {
        Some(p) => {
            require(p)?;
            load_enhancer::<f32>(p).map_err(runtime)?.config
        }
        None => {
            let w = parse_usize_list(&a.widths)?;
            let widths: [usize; 4] = w
                .try_into()
                .map_err(|_| CliError::Usage("--widths needs exactly four values".into()))?;
            NemConfig {
                widths,
                ..NemConfig::default()
            }
        }
    };
    log_config(
        "flops",
        seed,
        threads,
        json!({"nem": cfg, "nem_size": a.nem_size, "dwm": [a.dwm_height, a.dwm_width], "flops_per_mac": a.flops_per_mac}),
    );
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let r = estimate_flops_with(&cfg, [a.nem_size, a.nem_size], [a.dwm_height, a.dwm_width], a.flops_per_mac);
    println!("{}", serde_json::to_string_pretty(&r).map_err(runtime)?);
    Ok(())
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    let seed = cli.seed.unwrap_or(0);
    let t = cli.threads;
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, seed, t),
        Command::Corrupt(a) => cmd_corrupt(a, seed, t),
        Command::TrainUpstream(a) => cmd_train_upstream(a, seed, t),
        Command::Train(a) => cmd_train(a, cli.seed, t),
        Command::Enhance(a) => cmd_enhance(a, seed, t),
        Command::Iterate(a) => cmd_iterate(a, seed, t),
        Command::Eval(a) => cmd_eval(a, seed, t),
        Command::Bench(a) => cmd_bench(a, seed, t),
        Command::Flops(a) => cmd_flops(a, seed, t),
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            let err = CliError::Usage(first);
            eprintln!("{}", err.line());
            return err.code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.code()
        }
    }
}
