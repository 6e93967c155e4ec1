use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use camtrap_core::canonical::{self, to_canonical_string};
use camtrap_core::coco_ct::{self, convert_foldered_labels_with, Dataset, FolderConvention};
use camtrap_core::crops::{self, CropOptions};
use camtrap_core::detection::{self, DetectionsFile};
use camtrap_core::detectors::{Detector, ExecDetector, OracleDetector, OracleNoise, StubDetector};
use camtrap_core::evaluation::{parse_region_map, per_region_report};
use camtrap_core::filtering::{filter_empty, threshold_sweep, DEFAULT_THRESHOLD};
use camtrap_core::orchestrator::{
    plan_shards_with_granularity, resume_batch, run_batch, BatchError, BatchOptions, ShardStrategy,
};
use camtrap_core::rde::{self, apply_suppression, find_suspicious_clusters, ClusterList, RdeConfig};
use camtrap_core::review::ConfidenceBands;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

mod config;
mod pixels;

use config::{required, ProjectConfig};

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation; exit status 2.
    Usage(String),
    /// The inputs were understood but the operation failed; exit status 1.
    Domain(String),
}

impl CliError {
    fn domain(e: impl std::fmt::Display) -> Self {
        CliError::Domain(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

pub fn check_unit(v: f64, what: &str) -> Result<f64, String> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{what} must be in [0, 1], got {v}"))
    }
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    check_unit(v, "value")
}

fn unit_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(|t| unit_interval(t.trim())).collect()
}

#[derive(Parser)]
#[command(name = "camtrap", about = "Camera-trap image pipeline", disable_version_flag = true)]
struct Cli {
    /// Project configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a dataset from species-foldered images or a path listing.
    Ingest(IngestArgs),
    /// Run a detector over a dataset in resumable shards.
    Detect(DetectArgs),
    /// Split results into images with and without confident detections.
    Filter(FilterArgs),
    /// Find and suppress repeated detections at fixed positions.
    Rde(RdeArgs),
    /// Build a classifier-training crop manifest.
    Crop(CropArgs),
    /// Per-region average precision against species labels.
    Eval(EvalArgs),
    /// Serve the review API.
    Serve(ServeArgs),
    /// Print the version.
    Version,
}

#[derive(Args)]
struct IngestArgs {
    /// Root of a `species/.../image` directory tree.
    #[arg(long, conflicts_with = "listing", required_unless_present = "listing")]
    folders: Option<PathBuf>,
    /// File with one relative `species/.../image` path per line.
    #[arg(long)]
    listing: Option<PathBuf>,
    /// Directory segment (counting from 0 at the species folder) naming the location.
    #[arg(long, default_value_t = 1)]
    location_segment: usize,
    /// Where to look up image sizes for `--listing` paths.
    #[arg(long)]
    media_root: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Contiguous,
    RoundRobin,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `stub`, `oracle` or `exec:<program>`.
    #[arg(long)]
    detector: Option<String>,
    /// Required for the stub and oracle detectors.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = unit_interval, default_value_t = 0.0)]
    flip_prob: f64,
    #[arg(long, value_parser = unit_interval, default_value_t = 0.0)]
    conf_spread: f64,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value_t = 1)]
    shards_per_worker: usize,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long, value_enum, default_value_t = StrategyArg::Contiguous)]
    strategy: StrategyArg,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Continue from the checkpoint instead of starting over.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    max_retries: Option<u32>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long, value_parser = unit_interval)]
    threshold: Option<f64>,
    /// Comma-separated ascending thresholds; prints one report per value.
    #[arg(long, value_parser = unit_list)]
    sweep: Option<Vec<f64>>,
    #[arg(long)]
    out_kept: Option<PathBuf>,
    #[arg(long)]
    out_eliminated: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct RdeArgs {
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_parser = unit_interval)]
    iou: Option<f64>,
    #[arg(long)]
    min_count: Option<usize>,
    #[arg(long, value_parser = unit_interval)]
    min_conf: Option<f64>,
    #[arg(long)]
    require_consecutive: bool,
    /// Cluster ids to leave untouched, one per line.
    #[arg(long)]
    allowlist: Option<PathBuf>,
    #[arg(long)]
    clusters_out: Option<PathBuf>,
    /// Write results with suppressed detections removed.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the removed detections for audit.
    #[arg(long)]
    suppressed_out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct CropArgs {
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_parser = unit_interval)]
    threshold: Option<f64>,
    #[arg(long)]
    padding: Option<f64>,
    #[arg(long, overrides_with = "no_square")]
    square: bool,
    #[arg(long)]
    no_square: bool,
    #[arg(long)]
    manifest_out: Option<PathBuf>,
    /// Also cut the crops out of the source images into this directory.
    #[arg(long)]
    emit_pixels: Option<PathBuf>,
    #[arg(long)]
    media_root: Option<PathBuf>,
    /// Recorded in the manifest for downstream train/validation splitting.
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Two-column `location region` table; without it all images form one region.
    #[arg(long)]
    region_map: Option<PathBuf>,
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long)]
    clusters: Option<PathBuf>,
    #[arg(long)]
    verdict_log: Option<PathBuf>,
    #[arg(long)]
    allowlist: Option<PathBuf>,
    #[arg(long)]
    media_root: Option<PathBuf>,
    /// Built review UI to serve at `/`.
    #[arg(long)]
    static_dir: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Comma-separated ascending band boundaries.
    #[arg(long, value_parser = unit_list)]
    bands: Option<Vec<f64>>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = ProjectConfig::load_optional(cli.config.as_deref()).and_then(|cfg| run(cli.command, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Domain(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

impl ProjectConfig {
    fn load_optional(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(ProjectConfig::default()), ProjectConfig::load)
    }
}

fn run(command: Command, cfg: &ProjectConfig) -> CliResult {
    match command {
        Command::Ingest(a) => ingest(a, cfg),
        Command::Detect(a) => detect(a, cfg),
        Command::Filter(a) => filter(a, cfg),
        Command::Rde(a) => rde_cmd(a, cfg),
        Command::Crop(a) => crop(a, cfg),
        Command::Eval(a) => eval(a, cfg),
        Command::Serve(a) => serve(a, cfg),
        Command::Version => {
            println!("camtrap {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Domain(format!("{}: {e}", dir.display())))?;
    }
    canonical::write_atomic(path, text.as_bytes()).map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))
}

fn write_canonical<T: Serialize>(path: &Path, value: &T) -> CliResult {
    write(path, &to_canonical_string(value).map_err(CliError::domain)?)
}

/// Write to `path`, or print to stdout when no path is given.
fn emit<T: Serialize>(path: Option<&Path>, value: &T) -> CliResult {
    match path {
        Some(p) => write_canonical(p, value),
        None => {
            print!("{}", to_canonical_string(value).map_err(CliError::domain)?);
            Ok(())
        }
    }
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    coco_ct::parse_dataset(&read(path)?).map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))
}

fn load_detections(path: &Path) -> Result<DetectionsFile, CliError> {
    detection::parse_detections(&read(path)?).map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))
}

fn ingest(a: IngestArgs, cfg: &ProjectConfig) -> CliResult {
    let out = cfg.output(a.out, "dataset.json", "output")?;
    let (listing, root) = match (&a.folders, &a.listing) {
        (Some(root), _) => (pixels::list_tree(root)?, Some(root.clone())),
        (None, Some(listing)) => {
            let text = read(listing)?;
            let paths = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect();
            (paths, a.media_root.clone().or_else(|| cfg.media_root.clone()))
        }
        (None, None) => unreachable!("clap requires one of the inputs"),
    };
    let convention = FolderConvention {
        location_segment: a.location_segment,
        ..FolderConvention::default()
    };
    let mut fallback = 0usize;
    let outcome = convert_foldered_labels_with(&listing, &convention, |p| {
        let dims = root.as_ref().and_then(|r| image::image_dimensions(r.join(p)).ok());
        fallback += usize::from(dims.is_none());
        dims
    })
    .map_err(CliError::domain)?;
    if outcome.skipped > 0 {
        log::warn!("skipped {} paths without an image extension", outcome.skipped);
    }
    if fallback > 0 {
        log::warn!("{fallback} images had unreadable headers; recorded with the fallback size");
    }
    write(&out, &coco_ct::serialize_dataset(&outcome.dataset))?;
    log::info!(
        "wrote {} images in {} categories to {}",
        outcome.dataset.images.len(),
        outcome.dataset.categories.len(),
        out.display()
    );
    Ok(())
}

fn make_detector(a: &DetectArgs, cfg: &ProjectConfig, dataset: &Dataset) -> Result<Box<dyn Detector>, CliError> {
    let spec = a
        .detector
        .clone()
        .or_else(|| cfg.detector.clone())
        .ok_or_else(|| CliError::Usage("missing --detector (stub, oracle or exec:<program>)".into()))?;
    let seed = || {
        a.seed
            .or(cfg.seed)
            .ok_or_else(|| CliError::Usage(format!("--seed is required for the {spec} detector")))
    };
    Ok(match spec.as_str() {
        "stub" => Box::new(StubDetector::new(seed()?)),
        "oracle" => {
            let noise = OracleNoise {
                flip_prob: a.flip_prob,
                conf_spread: a.conf_spread,
            };
            Box::new(OracleDetector::new(dataset, noise, seed()?))
        }
        other => match other.strip_prefix("exec:") {
            Some(program) if !program.is_empty() => Box::new(ExecDetector::new(program)),
            _ => return Err(CliError::Usage(format!("unknown detector {other:?}"))),
        },
    })
}

fn detect(a: DetectArgs, cfg: &ProjectConfig) -> CliResult {
    let dataset = load_dataset(&required(a.dataset.clone(), &cfg.dataset, "dataset")?)?;
    let out = cfg.output(a.out.clone(), "detections.json", "output")?;
    let detector = make_detector(&a, cfg, &dataset)?;
    let workers = a.workers.or(cfg.workers).unwrap_or(1);
    let parallelism = a.parallelism.or(cfg.parallelism).unwrap_or(workers);
    if workers == 0 || parallelism == 0 || a.shards_per_worker == 0 {
        return Err(CliError::Usage("--workers, --parallelism and --shards-per-worker must be positive".into()));
    }
    let strategy = match a.strategy {
        StrategyArg::Contiguous => ShardStrategy::Contiguous,
        StrategyArg::RoundRobin => ShardStrategy::RoundRobin,
    };
    let plan = plan_shards_with_granularity(&dataset, workers, a.shards_per_worker, strategy).map_err(CliError::domain)?;
    let checkpoint = a.checkpoint_dir.clone().unwrap_or_else(|| {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".checkpoint");
        out.with_file_name(name)
    });
    let mut opts = BatchOptions::new(parallelism, &checkpoint);
    if let Some(r) = a.max_retries {
        opts.max_retries = r;
    }
    let outcome = if a.resume {
        resume_batch(&plan, &dataset, detector.as_ref(), &opts)
    } else {
        run_batch(&plan, &dataset, detector.as_ref(), &opts)
    };
    let report_path = cfg.optional_output(a.report, "detect_report.json");
    match outcome {
        Ok((merged, report)) => {
            write(&out, &detection::serialize_detections(&merged))?;
            if let Some(p) = &report_path {
                write_canonical(p, &report)?;
            }
            log::info!(
                "{} images in {} shards ({} executed, {} retries) in {:.2}s",
                report.images_processed,
                report.shards_total,
                report.shards_executed,
                report.retries,
                report.wall_time_seconds
            );
            Ok(())
        }
        Err(BatchError::PartialBatch { failed, report }) => {
            if let Some(p) = &report_path {
                write_canonical(p, &report)?;
            }
            Err(CliError::Domain(format!(
                "shards {failed:?} failed; fix the cause and rerun with --resume (checkpoint in {})",
                checkpoint.display()
            )))
        }
        Err(e) => Err(CliError::domain(e)),
    }
}

fn filter(a: FilterArgs, cfg: &ProjectConfig) -> CliResult {
    let results = load_detections(&required(a.detections, &cfg.detections, "detections")?)?;
    if let Some(sweep) = a.sweep {
        let reports = threshold_sweep(&results, &sweep).map_err(|e| CliError::Usage(e.to_string()))?;
        return emit(a.report.as_deref(), &reports);
    }
    let threshold = a.threshold.or(cfg.threshold).unwrap_or(DEFAULT_THRESHOLD);
    let out = filter_empty(&results, threshold).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(p) = cfg.optional_output(a.out_kept, "kept.json") {
        write(&p, &detection::serialize_detections(&out.kept))?;
    }
    if let Some(p) = cfg.optional_output(a.out_eliminated, "eliminated.json") {
        write(&p, &detection::serialize_detections(&out.eliminated))?;
    }
    emit(cfg.optional_output(a.report, "filter_report.json").as_deref(), &out.report)
}

fn rde_cmd(a: RdeArgs, cfg: &ProjectConfig) -> CliResult {
    let results = load_detections(&required(a.detections, &cfg.detections, "detections")?)?;
    let dataset = load_dataset(&required(a.dataset, &cfg.dataset, "dataset")?)?;
    let defaults = RdeConfig::default();
    let config = RdeConfig {
        iou_threshold: a.iou.or(cfg.rde.iou_threshold).unwrap_or(defaults.iou_threshold),
        min_count: a.min_count.or(cfg.rde.min_count).unwrap_or(defaults.min_count),
        min_conf: a.min_conf.or(cfg.rde.min_conf).unwrap_or(defaults.min_conf),
        require_consecutive: a.require_consecutive || cfg.rde.require_consecutive.unwrap_or(defaults.require_consecutive),
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let clusters = find_suspicious_clusters(&results, &dataset, &config).map_err(CliError::domain)?;
    log::info!("{} suspicious clusters", clusters.len());

    let list = ClusterList { config, clusters };
    match cfg.optional_output(a.clusters_out, "clusters.json") {
        Some(p) => write(&p, &rde::serialize_clusters(&list))?,
        None if a.out.is_none() => print!("{}", rde::serialize_clusters(&list)),
        None => {}
    }
    let Some(out) = a.out else { return Ok(()) };
    let allowlist = match &a.allowlist {
        Some(p) => rde::parse_allowlist(&read(p)?),
        None => BTreeSet::new(),
    };
    let outcome = apply_suppression(&results, &list.clusters, &allowlist).map_err(CliError::domain)?;
    write(&out, &detection::serialize_detections(&outcome.results))?;
    if let Some(p) = a.suppressed_out {
        write(&p, &detection::serialize_detections(&outcome.suppressed))?;
    }
    if let Some(p) = a.report {
        write_canonical(&p, &outcome.report)?;
    }
    log::info!(
        "suppressed {} detections in {} images",
        outcome.report.suppressed_detections,
        outcome.report.affected_images
    );
    Ok(())
}

fn crop(a: CropArgs, cfg: &ProjectConfig) -> CliResult {
    let results = load_detections(&required(a.detections, &cfg.detections, "detections")?)?;
    let dataset = load_dataset(&required(a.dataset, &cfg.dataset, "dataset")?)?;
    let defaults = CropOptions::default();
    let padding = a.padding.unwrap_or(defaults.padding_scale);
    if !(padding >= 1.0) {
        return Err(CliError::Usage(format!("--padding must be at least 1, got {padding}")));
    }
    let opts = CropOptions {
        conf_threshold: a.threshold.or(cfg.threshold).unwrap_or(defaults.conf_threshold),
        padding_scale: padding,
        square: if a.no_square { false } else { a.square || defaults.square },
    };
    let mut manifest = crops::build_classifier_manifest(&results, &dataset, &opts).map_err(CliError::domain)?;
    manifest.provenance.split_seed = a.split_seed;
    let out = cfg.output(a.manifest_out, "crops.json", "--manifest-out")?;
    write(&out, &crops::serialize_manifest(&manifest))?;
    log::info!(
        "{} crops; skipped {} unlabeled and {} multi-species images",
        manifest.entries.len(),
        manifest.provenance.skipped_unlabeled,
        manifest.provenance.skipped_multi_species
    );
    if let Some(dir) = a.emit_pixels {
        let root = a
            .media_root
            .or_else(|| cfg.media_root.clone())
            .ok_or_else(|| CliError::Usage("--emit-pixels needs --media-root".into()))?;
        let written = pixels::emit_crops(&manifest, &root, &dir)?;
        log::info!("wrote {written} crop images to {}", dir.display());
    }
    Ok(())
}

fn eval(a: EvalArgs, cfg: &ProjectConfig) -> CliResult {
    let results = load_detections(&required(a.detections, &cfg.detections, "detections")?)?;
    let dataset = load_dataset(&required(a.dataset, &cfg.dataset, "dataset")?)?;
    let regions: BTreeMap<String, String> = match a.region_map.or_else(|| cfg.region_map.clone()) {
        Some(p) => parse_region_map(&read(&p)?).map_err(|e| CliError::Domain(format!("{}: {e}", p.display())))?,
        None => dataset.images.iter().map(|i| (i.location.clone(), "all".to_string())).collect(),
    };
    let report = per_region_report(&results, &dataset, &regions).map_err(CliError::domain)?;
    for (region, r) in &report.regions {
        match r.ap {
            Some(ap) => log::info!("{region}: AP {ap:.4} ({} positives of {})", r.positives, r.total),
            None => log::info!("{region}: no positives among {} images", r.total),
        }
    }
    emit(cfg.optional_output(a.report_out, "eval_report.json").as_deref(), &report)
}

fn serve(a: ServeArgs, cfg: &ProjectConfig) -> CliResult {
    let dataset = load_dataset(&required(a.dataset, &cfg.dataset, "dataset")?)?;
    let results = load_detections(&required(a.detections, &cfg.detections, "detections")?)?;
    let clusters = match a.clusters.or_else(|| cfg.optional_output(None, "clusters.json").filter(|p| p.exists())) {
        Some(p) => rde::parse_clusters(&read(&p)?).map_err(CliError::domain)?.clusters,
        None => Vec::new(),
    };
    let bands = match a.bands {
        Some(b) => ConfidenceBands::new(b).map_err(|e| CliError::Usage(e.to_string()))?,
        None => ConfidenceBands::default(),
    };
    let server = camtrap_review_server::ServerConfig {
        dataset,
        results,
        clusters,
        verdict_log: cfg.output(a.verdict_log, "verdicts.jsonl", "--verdict-log")?,
        allowlist: cfg.output(a.allowlist, "allowlist.txt", "--allowlist")?,
        media_root: a.media_root.or_else(|| cfg.media_root.clone()),
        static_dir: a.static_dir,
        bands,
        crop: CropOptions {
            conf_threshold: cfg.threshold.unwrap_or(CropOptions::default().conf_threshold),
            ..CropOptions::default()
        },
    };
    let runtime = tokio::runtime::Runtime::new().map_err(CliError::domain)?;
    runtime
        .block_on(camtrap_review_server::serve(server, a.addr))
        .map_err(CliError::domain)
}
