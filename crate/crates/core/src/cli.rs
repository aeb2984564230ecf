//! Command-line front end. Structured output goes to stdout as JSON; the
//! resolved configuration and logs go to stderr.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cbcp::{balance_dataset, compute_stats, BalanceConfig};
use crate::dataset::{load_dataset, sample_kshot, sample_random_images, save_dataset, DetectionDataset};
use crate::error::Error;
use crate::features::{read_feature_dump, DEFAULT_GRID, NUM_LEVELS};
use crate::loss::{i2da_loss, ClassifierHead, LossConfig, SimilarityForm};
use crate::metrics::{evaluate_dataset, Detection};
use crate::schedule::compose_schedule;
use crate::selftest::run_selftest;

const EXIT_DATA: i32 = 1;
const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "fsda", version, about = "Few-shot domain adaptive detection toolkit")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON file with settings for the chosen subcommand. Flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-class object counts and the sparse/dense split.
    Stats(StatsArgs),
    /// Class-balance a source set by cut-paste and write the augmented set.
    Balance(BalanceArgs),
    /// Draw a k-shot or fixed-size random subset.
    Sample(SampleArgs),
    /// Emit a batch schedule as JSON lines.
    Compose(ComposeArgs),
    /// Evaluate the alignment losses on a feature dump.
    LossEval(LossEvalArgs),
    /// Score detections against a ground-truth manifest.
    Metrics(MetricsArgs),
    /// Run the built-in invariant suite on synthetic fixtures.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
struct StatsArgs {
    /// Dataset manifest (manifest.json).
    #[arg(long)]
    manifest: PathBuf,
    /// Images with fewer objects than this are sparse and receive pastes.
    #[arg(long)]
    r: Option<usize>,
}

#[derive(Debug, Args)]
struct BalanceArgs {
    /// Dataset manifest (manifest.json).
    #[arg(long)]
    manifest: PathBuf,
    /// Few-shot target-domain manifest.
    #[arg(long)]
    target: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Seed for every random choice.
    #[arg(long)]
    seed: Option<u64>,
    /// Images with fewer objects than this are sparse and receive pastes.
    #[arg(long)]
    r: Option<usize>,
    /// Each class is raised to at least beta times the largest class count.
    #[arg(long)]
    beta: Option<f64>,
    /// Most pastes any one image receives.
    #[arg(long)]
    cap_per_image: Option<usize>,
    /// Step in pixels between candidate paste locations.
    #[arg(long)]
    stride: Option<u32>,
    /// Placement attempts per paste before it is reported as failed.
    #[arg(long)]
    max_tries: Option<usize>,
    /// Paste target cells without visual augmentation.
    #[arg(long)]
    no_target_augment: bool,
}

#[derive(Debug, Args)]
struct SampleArgs {
    /// Dataset manifest (manifest.json).
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Images per class.
    #[arg(long, conflicts_with = "count")]
    k: Option<usize>,
    /// Number of images drawn uniformly.
    #[arg(long)]
    count: Option<usize>,
    /// Seed for every random choice.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ComposeArgs {
    /// Real source-domain manifest.
    #[arg(long)]
    source: PathBuf,
    /// Class-balanced source manifest written by `balance`.
    #[arg(long)]
    augmented: PathBuf,
    /// Few-shot target-domain manifest.
    #[arg(long)]
    target: PathBuf,
    /// Write JSON lines here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Images per batch, one of them from the target set.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Number of batches.
    #[arg(long)]
    epoch_len: Option<usize>,
    /// Seed for every random choice.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct LossEvalArgs {
    /// Feature dump file.
    #[arg(long)]
    features: PathBuf,
    /// Weight of the similarity term.
    #[arg(long)]
    lambda1: Option<f64>,
    /// Weight of the dissimilarity term.
    #[arg(long)]
    lambda2: Option<f64>,
    /// Weight of the classification term.
    #[arg(long)]
    lambda3: Option<f64>,
    /// Cosine margin of the dissimilarity hinge.
    #[arg(long, allow_hyphen_values = true)]
    margin: Option<f64>,
    /// Pooling grid size S.
    #[arg(long)]
    size: Option<usize>,
    /// JSON array of three classifier heads; zero-initialised when absent.
    #[arg(long)]
    heads: Option<PathBuf>,
    /// Classes for zero-initialised heads (default: largest class id + 1).
    #[arg(long)]
    num_classes: Option<usize>,
    /// Use the raw cosine similarity instead of 1 - cosine.
    #[arg(long)]
    cosine_similarity: bool,
    /// Include gradients in the report.
    #[arg(long)]
    gradients: bool,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    /// Detections, one JSON object per line.
    #[arg(long)]
    dets: PathBuf,
    /// Ground-truth manifest.
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Debug, Args)]
struct SelftestArgs {
    /// Seed for every random choice.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct StatsConfig {
    r: usize,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            r: BalanceConfig::default().r,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SampleConfig {
    k: Option<usize>,
    count: Option<usize>,
    seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ComposeConfig {
    batch_size: usize,
    epoch_len: usize,
    seed: u64,
}

impl Default for ComposeConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            epoch_len: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LossEvalConfig {
    lambda1: f64,
    lambda2: f64,
    lambda3: f64,
    margin: f64,
    similarity_form: SimilarityForm,
    require_target: bool,
    #[serde(rename = "S", alias = "size")]
    size: usize,
    heads_path: Option<PathBuf>,
    num_classes: Option<usize>,
    gradients: bool,
}

impl Default for LossEvalConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        Self {
            lambda1: loss.lambda1,
            lambda2: loss.lambda2,
            lambda3: loss.lambda3,
            margin: loss.margin,
            similarity_form: loss.similarity_form,
            require_target: loss.require_target,
            size: DEFAULT_GRID,
            heads_path: None,
            num_classes: None,
            gradients: false,
        }
    }
}

impl LossEvalConfig {
    fn loss(&self) -> LossConfig {
        LossConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            margin: self.margin,
            similarity_form: self.similarity_form,
            require_target: self.require_target,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SelftestConfig {
    seed: u64,
}

/// Failure of a run, split by exit code.
enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type RunResult = std::result::Result<(), Failure>;

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> std::result::Result<T, Failure> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text =
        fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))
}

fn require_file(path: &Path) -> RunResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Data(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        )))
    }
}

fn echo_config(subcommand: &str, inputs: Value, config: &impl Serialize) {
    let resolved = json!({ "subcommand": subcommand, "inputs": inputs, "config": config });
    eprintln!("{resolved}");
}

fn print_json(value: &impl Serialize) {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    println!("{text}");
}

fn write_file(path: &Path, bytes: &[u8]) -> RunResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn cmd_stats(args: StatsArgs, config: Option<&Path>) -> RunResult {
    let mut cfg: StatsConfig = read_config(config)?;
    if let Some(r) = args.r {
        cfg.r = r;
    }
    require_file(&args.manifest)?;
    echo_config("stats", json!({ "manifest": args.manifest }), &cfg);
    let ds = load_dataset(&args.manifest)?;
    let stats = compute_stats(&ds, cfg.r)?;
    let per_class: Vec<Value> = ds
        .classes
        .iter()
        .enumerate()
        .map(|(c, name)| {
            json!({
                "class_id": c,
                "name": name,
                "count": stats.per_class_count[c],
                "images": stats.class_presence[c].len(),
            })
        })
        .collect();
    print_json(&json!({
        "r": stats.r,
        "images": ds.len(),
        "sparse_images": stats.sparse_images.len(),
        "dense_images": stats.dense_images.len(),
        "max_count": stats.max_count(),
        "per_class": per_class,
    }));
    Ok(())
}

fn cmd_balance(args: BalanceArgs, config: Option<&Path>) -> RunResult {
    let mut cfg: BalanceConfig = read_config(config)?;
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.r {
        cfg.r = v;
    }
    if let Some(v) = args.beta {
        cfg.beta = v;
    }
    if let Some(v) = args.cap_per_image {
        cfg.cap_per_image = v;
    }
    if let Some(v) = args.stride {
        cfg.stride = v;
    }
    if let Some(v) = args.max_tries {
        cfg.max_tries = v;
    }
    if args.no_target_augment {
        cfg.augment_target_cell = false;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    require_file(&args.manifest)?;
    require_file(&args.target)?;
    if args.out.is_file() {
        return Err(Failure::Data(Error::io(
            &args.out,
            std::io::Error::new(std::io::ErrorKind::AlreadyExists, "output path is a file"),
        )));
    }
    echo_config(
        "balance",
        json!({ "manifest": args.manifest, "target": args.target, "out": args.out }),
        &cfg,
    );
    let source = load_dataset(&args.manifest)?;
    let target = load_dataset(&args.target)?;
    let outcome = balance_dataset(&source, &target, &cfg)?;
    let manifest = save_dataset(&outcome.dataset, &args.out)?;
    let report = serde_json::to_string_pretty(&outcome.report).expect("report serializes");
    write_file(&args.out.join("balance_report.json"), format!("{report}\n").as_bytes())?;
    info!("wrote {}", manifest.display());
    println!("{report}");
    Ok(())
}

fn cmd_sample(args: SampleArgs, config: Option<&Path>) -> RunResult {
    let mut cfg: SampleConfig = read_config(config)?;
    if args.k.is_some() || args.count.is_some() {
        cfg.k = args.k;
        cfg.count = args.count;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    match (cfg.k, cfg.count) {
        (Some(0), _) | (_, Some(0)) => return Err(Failure::Usage("k and count must be positive".into())),
        (Some(_), Some(_)) => return Err(Failure::Usage("give either k or count, not both".into())),
        (None, None) => return Err(Failure::Usage("one of --k or --count is required".into())),
        _ => {}
    }
    require_file(&args.manifest)?;
    echo_config("sample", json!({ "manifest": args.manifest, "out": args.out }), &cfg);
    let ds = load_dataset(&args.manifest)?;
    let subset = match (cfg.k, cfg.count) {
        (Some(k), _) => sample_kshot(&ds, k, cfg.seed)?,
        (_, Some(count)) => sample_random_images(&ds, count, cfg.seed)?,
        _ => unreachable!("checked above"),
    };
    let manifest = save_dataset(&subset, &args.out)?;
    let ids: Vec<&str> = subset.images.iter().map(|im| im.image_id.as_str()).collect();
    print_json(&json!({
        "manifest": manifest,
        "images": ids,
        "class_counts": subset.class_counts(),
    }));
    Ok(())
}

fn cmd_compose(args: ComposeArgs, config: Option<&Path>) -> RunResult {
    let mut cfg: ComposeConfig = read_config(config)?;
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.epoch_len {
        cfg.epoch_len = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    for p in [&args.source, &args.augmented, &args.target] {
        require_file(p)?;
    }
    echo_config(
        "compose",
        json!({
            "source": args.source,
            "augmented": args.augmented,
            "target": args.target,
            "out": args.out,
        }),
        &cfg,
    );
    let load = |p: &Path| -> std::result::Result<DetectionDataset, Failure> { Ok(load_dataset(p)?) };
    let (source, augmented, target) = (load(&args.source)?, load(&args.augmented)?, load(&args.target)?);
    let schedule = compose_schedule(&source, &augmented, &target, cfg.batch_size, cfg.epoch_len, cfg.seed)?;
    let lines = schedule.to_json_lines();
    match &args.out {
        Some(path) => {
            write_file(path, lines.as_bytes())?;
            print_json(&schedule.meta);
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(lines.as_bytes())
                .map_err(|e| Error::io("<stdout>", e))?;
            eprintln!("{}", serde_json::to_string(&schedule.meta).expect("meta serializes"));
        }
    }
    Ok(())
}

fn load_heads(path: &Path) -> std::result::Result<Vec<ClassifierHead>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let heads: Vec<ClassifierHead> =
        serde_json::from_str(&text).map_err(|e| Error::Loss(format!("invalid heads file {}: {e}", path.display())))?;
    if heads.len() != NUM_LEVELS {
        return Err(Error::Loss(format!(
            "heads file {} holds {} heads, expected {NUM_LEVELS}",
            path.display(),
            heads.len()
        ))
        .into());
    }
    Ok(heads)
}

fn cmd_loss_eval(args: LossEvalArgs, config: Option<&Path>) -> RunResult {
    let mut cfg: LossEvalConfig = read_config(config)?;
    if let Some(v) = args.lambda1 {
        cfg.lambda1 = v;
    }
    if let Some(v) = args.lambda2 {
        cfg.lambda2 = v;
    }
    if let Some(v) = args.lambda3 {
        cfg.lambda3 = v;
    }
    if let Some(v) = args.margin {
        cfg.margin = v;
    }
    if let Some(v) = args.size {
        cfg.size = v;
    }
    if args.heads.is_some() {
        cfg.heads_path = args.heads;
    }
    if args.num_classes.is_some() {
        cfg.num_classes = args.num_classes;
    }
    if args.cosine_similarity {
        cfg.similarity_form = SimilarityForm::Cosine;
    }
    cfg.gradients |= args.gradients;
    cfg.loss().validate().map_err(|e| Failure::Usage(e.to_string()))?;
    if cfg.size == 0 {
        return Err(Failure::Usage("S must be positive".into()));
    }
    require_file(&args.features)?;
    if let Some(p) = &cfg.heads_path {
        require_file(p)?;
    }
    echo_config("loss-eval", json!({ "features": args.features }), &cfg);

    let records = read_feature_dump(&args.features)?;
    let heads = match &cfg.heads_path {
        Some(p) => load_heads(p)?,
        None => {
            let first = records
                .first()
                .ok_or_else(|| Error::Loss("feature dump holds no records".into()))?;
            let max_class = records.iter().flat_map(|r| &r.gt).map(|g| g.class_id).max();
            let n = cfg.num_classes.unwrap_or(max_class.map_or(1, |c| c + 1));
            first
                .levels
                .iter()
                .map(|l| ClassifierHead::zeros(n, l.channels()))
                .collect()
        }
    };
    let report = i2da_loss(&records, &heads, &cfg.loss(), cfg.size)?;
    let mut value = serde_json::to_value(&report).expect("report serializes");
    if !cfg.gradients {
        if let Value::Object(map) = &mut value {
            for key in ["grad_instances", "grad_head", "level_gradients"] {
                map.remove(key);
            }
        }
    }
    print_json(&value);
    Ok(())
}

fn read_detections(path: &Path) -> std::result::Result<Vec<Detection>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut dets = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let det: Detection = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        dets.push(det);
    }
    Ok(dets)
}

fn cmd_metrics(args: MetricsArgs, config: Option<&Path>) -> RunResult {
    if config.is_some() {
        return Err(Failure::Usage("metrics takes no config file".into()));
    }
    require_file(&args.dets)?;
    require_file(&args.manifest)?;
    echo_config(
        "metrics",
        json!({ "dets": args.dets, "manifest": args.manifest }),
        &json!({ "iou_thresholds": crate::metrics::coco_thresholds() }),
    );
    let dets = read_detections(&args.dets)?;
    let ds = load_dataset(&args.manifest)?;
    print_json(&evaluate_dataset(&dets, &ds)?);
    Ok(())
}

fn cmd_selftest(args: SelftestArgs, config: Option<&Path>) -> RunResult {
    let mut cfg: SelftestConfig = read_config(config)?;
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    echo_config("selftest", json!({}), &cfg);
    let report = run_selftest(cfg.seed);
    print_json(&report);
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        Err(Failure::Data(Error::Validation(format!(
            "selftest failed: {}",
            failed.join(", ")
        ))))
    }
}

fn dispatch(cli: Cli) -> RunResult {
    let config = cli.config.as_deref();
    if let Some(p) = config {
        if !p.is_file() {
            return Err(Failure::Usage(format!("config file {} not found", p.display())));
        }
    }
    match cli.command {
        Command::Stats(a) => cmd_stats(a, config),
        Command::Balance(a) => cmd_balance(a, config),
        Command::Sample(a) => cmd_sample(a, config),
        Command::Compose(a) => cmd_compose(a, config),
        Command::LossEval(a) => cmd_loss_eval(a, config),
        Command::Metrics(a) => cmd_metrics(a, config),
        Command::Selftest(a) => cmd_selftest(a, config),
    }
}

fn report_failure(kind: &str, message: &str) {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
}

/// Parse `argv` (program name first), run the subcommand and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .try_init();

    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let pool = match cli.threads {
        Some(0) => {
            report_failure("usage", "--threads must be positive");
            return EXIT_USAGE;
        }
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    };
    let pool = match pool {
        Ok(p) => p,
        Err(e) => {
            report_failure("usage", &e.to_string());
            return EXIT_USAGE;
        }
    };
    match pool.install(|| dispatch(cli)) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            report_failure("usage", &msg);
            EXIT_USAGE
        }
        Err(Failure::Data(e)) => {
            report_failure("data", &e.to_string());
            EXIT_DATA
        }
    }
}
