//! Sharded batch detection with checkpointing.
//!
//! A [`ShardPlan`] splits a corpus into disjoint shards. [`run_batch`] runs
//! the shards on a pool of worker threads; each finished shard is handed to
//! the calling thread, which is the only writer of the checkpoint directory:
//!
//! ```text
//! <checkpoint>/plan.digest              sha-256 of the canonical plan
//! <checkpoint>/parts/shard_<id>.detections
//! <checkpoint>/manifest                 "<id>\t<digest>\t<status>" per shard
//! ```
//!
//! Every file is replaced atomically, so an interrupted batch can be picked up
//! with [`resume_batch`]. Shard outputs are canonical documents and the final
//! merge is order independent, which makes the merged bytes independent of
//! parallelism, completion order and interruptions.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical;
use crate::coco_ct::{Dataset, ImageRecord};
use crate::detection::{self, DetectionError, DetectionsFile};
use crate::detectors::Detector;

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("worker count must be at least 1")]
    NoWorkers,
    #[error("parallelism must be at least 1")]
    NoParallelism,
    #[error("plan references image {0:?} which is not in the dataset")]
    UnknownImage(String),
    #[error("no checkpoint found in {0}")]
    MissingCheckpoint(PathBuf),
    #[error("checkpoint was written for plan {found}, current plan is {expected}")]
    StaleCheckpoint { expected: String, found: String },
    #[error("corrupt checkpoint manifest: {0}")]
    CorruptManifest(String),
    #[error("batch incomplete, shards {failed:?} did not finish")]
    PartialBatch { failed: Vec<usize>, report: BatchReport },
    #[error("batch interrupted after {} of {} shards", .report.shards_completed, .report.shards_total)]
    Interrupted { report: BatchReport },
    #[error("merging shard parts: {0}")]
    Merge(#[from] DetectionError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShardStrategy {
    /// Consecutive runs of the corpus order.
    #[default]
    Contiguous,
    /// Image `i` goes to shard `i mod n`.
    RoundRobin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shard {
    pub shard_id: usize,
    pub image_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub strategy: ShardStrategy,
    pub shards: Vec<Shard>,
}

impl ShardPlan {
    /// Split `ids` (in the given order) into `shard_count` shards. Shard
    /// sizes differ by at most one under either strategy.
    pub fn from_ids(
        ids: Vec<String>,
        shard_count: usize,
        strategy: ShardStrategy,
    ) -> Result<Self, BatchError> {
        if shard_count == 0 {
            return Err(BatchError::NoWorkers);
        }
        let mut shards: Vec<Shard> = (0..shard_count)
            .map(|shard_id| Shard {
                shard_id,
                image_ids: Vec::new(),
            })
            .collect();
        match strategy {
            ShardStrategy::RoundRobin => {
                for (i, id) in ids.into_iter().enumerate() {
                    shards[i % shard_count].image_ids.push(id);
                }
            }
            ShardStrategy::Contiguous => {
                let base = ids.len() / shard_count;
                let extra = ids.len() % shard_count;
                let mut it = ids.into_iter();
                for (i, shard) in shards.iter_mut().enumerate() {
                    let take = base + usize::from(i < extra);
                    shard.image_ids.extend(it.by_ref().take(take));
                }
            }
        }
        Ok(ShardPlan { strategy, shards })
    }

    pub fn image_count(&self) -> usize {
        self.shards.iter().map(|s| s.image_ids.len()).sum()
    }

    /// Content digest identifying this plan in a checkpoint directory.
    pub fn digest(&self) -> String {
        let text = canonical::to_canonical_line(self).expect("plans are always representable");
        canonical::sha256_hex(text.as_bytes())
    }
}

/// One shard per worker over the dataset's canonical image order.
pub fn plan_shards(
    dataset: &Dataset,
    worker_count: usize,
    strategy: ShardStrategy,
) -> Result<ShardPlan, BatchError> {
    plan_shards_with_granularity(dataset, worker_count, 1, strategy)
}

/// Like [`plan_shards`] with `shards_per_worker` shards per worker, trading
/// scheduling overhead for cheaper retries and resumes.
pub fn plan_shards_with_granularity(
    dataset: &Dataset,
    worker_count: usize,
    shards_per_worker: usize,
    strategy: ShardStrategy,
) -> Result<ShardPlan, BatchError> {
    if worker_count == 0 || shards_per_worker == 0 {
        return Err(BatchError::NoWorkers);
    }
    let ids = dataset.images.iter().map(|i| i.id.clone()).collect();
    ShardPlan::from_ids(ids, worker_count * shards_per_worker, strategy)
}

/// Cooperative stop signal. Workers finish the shard they are on and do not
/// pick up new ones once it is set.
#[derive(Debug, Clone, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone)]
pub struct BatchOptions {
    pub parallelism: usize,
    pub checkpoint_dir: PathBuf,
    /// Retries after the first failed attempt of a shard.
    pub max_retries: u32,
    /// Delay before the first retry; doubled for each further one.
    pub backoff: Duration,
    pub cancel: CancelToken,
}

impl BatchOptions {
    pub fn new(parallelism: usize, checkpoint_dir: impl Into<PathBuf>) -> Self {
        BatchOptions {
            parallelism,
            checkpoint_dir: checkpoint_dir.into(),
            max_retries: 2,
            backoff: Duration::from_millis(100),
            cancel: CancelToken::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardTiming {
    pub shard_id: usize,
    pub images: usize,
    pub attempts: u32,
    pub seconds: f64,
    pub succeeded: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub images_processed: usize,
    pub shards_total: usize,
    pub shards_completed: usize,
    pub shards_failed: usize,
    /// Shards run during this invocation (the rest came from the checkpoint).
    pub shards_executed: usize,
    pub retries: u32,
    pub failed_shard_ids: Vec<usize>,
    pub wall_time_seconds: f64,
    pub shard_timings: Vec<ShardTiming>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShardStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ManifestEntry {
    digest: Option<String>,
    status: ShardStatus,
}

/// In-memory view of the checkpoint manifest.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Checkpoint {
    entries: BTreeMap<usize, ManifestEntry>,
}

impl Checkpoint {
    pub fn completed_shard_ids(&self) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|(_, e)| e.status == ShardStatus::Completed)
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn part_digest(&self, shard_id: usize) -> Option<&str> {
        self.entries.get(&shard_id).and_then(|e| e.digest.as_deref())
    }

    fn render(&self) -> String {
        let mut out = String::new();
        for (id, e) in &self.entries {
            let status = match e.status {
                ShardStatus::Completed => "completed",
                ShardStatus::Failed => "failed",
            };
            out.push_str(&format!("{id}\t{}\t{status}\n", e.digest.as_deref().unwrap_or("-")));
        }
        out
    }

    fn parse(text: &str) -> Result<Self, BatchError> {
        let mut entries = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split('\t').collect();
            let [id, digest, status] = cols[..] else {
                return Err(BatchError::CorruptManifest(line.to_string()));
            };
            let id: usize = id
                .parse()
                .map_err(|_| BatchError::CorruptManifest(line.to_string()))?;
            let status = match status {
                "completed" => ShardStatus::Completed,
                "failed" => ShardStatus::Failed,
                _ => return Err(BatchError::CorruptManifest(line.to_string())),
            };
            let digest = (digest != "-").then(|| digest.to_string());
            if status == ShardStatus::Completed && digest.is_none() {
                return Err(BatchError::CorruptManifest(line.to_string()));
            }
            entries.insert(id, ManifestEntry { digest, status });
        }
        Ok(Checkpoint { entries })
    }

    /// Read the manifest of a checkpoint directory.
    pub fn load(dir: &Path) -> Result<Self, BatchError> {
        match fs::read_to_string(dir.join(MANIFEST)) {
            Ok(text) => Checkpoint::parse(&text),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Checkpoint::default()),
            Err(e) => Err(e.into()),
        }
    }
}

const PLAN_DIGEST: &str = "plan.digest";
const MANIFEST: &str = "manifest";

pub fn part_path(dir: &Path, shard_id: usize) -> PathBuf {
    dir.join("parts").join(format!("shard_{shard_id}.detections"))
}

/// Run every shard of `plan` from scratch, discarding any previous
/// checkpoint state in the directory.
pub fn run_batch(
    plan: &ShardPlan,
    dataset: &Dataset,
    detector: &dyn Detector,
    opts: &BatchOptions,
) -> Result<(DetectionsFile, BatchReport), BatchError> {
    if opts.parallelism == 0 {
        return Err(BatchError::NoParallelism);
    }
    let dir = &opts.checkpoint_dir;
    let parts = dir.join("parts");
    if parts.exists() {
        fs::remove_dir_all(&parts)?;
    }
    fs::create_dir_all(&parts)?;
    canonical::write_atomic(&dir.join(PLAN_DIGEST), format!("{}\n", plan.digest()).as_bytes())?;
    let checkpoint = Checkpoint::default();
    canonical::write_atomic(&dir.join(MANIFEST), checkpoint.render().as_bytes())?;
    let pending = plan.shards.iter().map(|s| s.shard_id).collect();
    execute(plan, dataset, detector, opts, checkpoint, pending)
}

/// Continue a batch from its checkpoint. Shards whose part is present and
/// matches the recorded digest are reused; everything else is run again.
pub fn resume_batch(
    plan: &ShardPlan,
    dataset: &Dataset,
    detector: &dyn Detector,
    opts: &BatchOptions,
) -> Result<(DetectionsFile, BatchReport), BatchError> {
    if opts.parallelism == 0 {
        return Err(BatchError::NoParallelism);
    }
    let dir = &opts.checkpoint_dir;
    let found = match fs::read_to_string(dir.join(PLAN_DIGEST)) {
        Ok(s) => s.trim().to_string(),
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(BatchError::MissingCheckpoint(dir.clone()))
        }
        Err(e) => return Err(e.into()),
    };
    let expected = plan.digest();
    if found != expected {
        return Err(BatchError::StaleCheckpoint { expected, found });
    }
    fs::create_dir_all(dir.join("parts"))?;

    let mut checkpoint = Checkpoint::load(dir)?;
    let mut pending = Vec::new();
    for shard in &plan.shards {
        let reusable = match checkpoint.entries.get(&shard.shard_id) {
            Some(ManifestEntry {
                digest: Some(d),
                status: ShardStatus::Completed,
            }) => match fs::read(part_path(dir, shard.shard_id)) {
                Ok(bytes) if canonical::sha256_hex(&bytes) == *d => true,
                Ok(_) => {
                    log::warn!("shard {} part does not match its digest, re-running", shard.shard_id);
                    false
                }
                Err(_) => {
                    log::warn!("shard {} part is missing, re-running", shard.shard_id);
                    false
                }
            },
            _ => false,
        };
        if !reusable {
            checkpoint.entries.remove(&shard.shard_id);
            pending.push(shard.shard_id);
        }
    }
    // Entries for shards that are not part of the plan are dropped.
    checkpoint
        .entries
        .retain(|id, _| plan.shards.iter().any(|s| s.shard_id == *id));
    canonical::write_atomic(&dir.join(MANIFEST), checkpoint.render().as_bytes())?;
    execute(plan, dataset, detector, opts, checkpoint, pending)
}

struct ShardOutcome {
    shard_id: usize,
    result: Result<Vec<u8>, String>,
    attempts: u32,
    seconds: f64,
}

fn run_shard(
    detector: &dyn Detector,
    images: &[&ImageRecord],
    opts: &BatchOptions,
) -> (Result<Vec<u8>, String>, u32) {
    let mut attempt = 0;
    loop {
        attempt += 1;
        let result = detector
            .detect_shard(images)
            .map_err(|e| e.to_string())
            .and_then(|dets| {
                DetectionsFile::new(detector.info(), detector.categories(), dets)
                    .map_err(|e| e.to_string())
            })
            .map(|part| detection::serialize_detections(&part).into_bytes());
        match result {
            Ok(bytes) => return (Ok(bytes), attempt),
            Err(e) if attempt > opts.max_retries => return (Err(e), attempt),
            Err(e) => {
                log::warn!("shard attempt {attempt} failed: {e}");
                thread::sleep(opts.backoff * 2u32.saturating_pow(attempt - 1));
            }
        }
    }
}

fn execute(
    plan: &ShardPlan,
    dataset: &Dataset,
    detector: &dyn Detector,
    opts: &BatchOptions,
    mut checkpoint: Checkpoint,
    pending: Vec<usize>,
) -> Result<(DetectionsFile, BatchReport), BatchError> {
    let started = Instant::now();
    let dir = &opts.checkpoint_dir;

    let by_id: HashMap<&str, &ImageRecord> =
        dataset.images.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut shard_images: HashMap<usize, Vec<&ImageRecord>> = HashMap::new();
    for shard in &plan.shards {
        let imgs = shard
            .image_ids
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| BatchError::UnknownImage(id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        shard_images.insert(shard.shard_id, imgs);
    }

    let mut report = BatchReport {
        shards_total: plan.shards.len(),
        ..Default::default()
    };
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<ShardOutcome>();
    let workers = opts.parallelism.min(pending.len()).max(1);

    let write_result: Result<(), BatchError> = thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, pending, shard_images) = (&next, &pending, &shard_images);
            scope.spawn(move || loop {
                if opts.cancel.is_cancelled() {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&shard_id) = pending.get(i) else { break };
                let t = Instant::now();
                let (result, attempts) = run_shard(detector, &shard_images[&shard_id], opts);
                let outcome = ShardOutcome {
                    shard_id,
                    result,
                    attempts,
                    seconds: t.elapsed().as_secs_f64(),
                };
                if tx.send(outcome).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        // Single writer: only this thread touches the checkpoint directory.
        for outcome in rx {
            let images = shard_images[&outcome.shard_id].len();
            report.shards_executed += 1;
            report.retries += outcome.attempts.saturating_sub(1);
            let succeeded = outcome.result.is_ok();
            match outcome.result {
                Ok(bytes) => {
                    canonical::write_atomic(&part_path(dir, outcome.shard_id), &bytes)?;
                    checkpoint.entries.insert(
                        outcome.shard_id,
                        ManifestEntry {
                            digest: Some(canonical::sha256_hex(&bytes)),
                            status: ShardStatus::Completed,
                        },
                    );
                }
                Err(e) => {
                    log::error!(
                        "shard {} failed after {} attempts: {e}",
                        outcome.shard_id,
                        outcome.attempts
                    );
                    checkpoint.entries.insert(
                        outcome.shard_id,
                        ManifestEntry {
                            digest: None,
                            status: ShardStatus::Failed,
                        },
                    );
                }
            }
            canonical::write_atomic(&dir.join(MANIFEST), checkpoint.render().as_bytes())?;
            report.shard_timings.push(ShardTiming {
                shard_id: outcome.shard_id,
                images,
                attempts: outcome.attempts,
                seconds: outcome.seconds,
                succeeded,
            });
        }
        Ok(())
    });
    write_result?;

    report.shard_timings.sort_by_key(|t| t.shard_id);
    let completed = checkpoint.completed_shard_ids();
    report.shards_completed = completed.len();
    report.images_processed = completed.iter().map(|id| shard_images[id].len()).sum();
    report.failed_shard_ids = plan
        .shards
        .iter()
        .map(|s| s.shard_id)
        .filter(|id| {
            matches!(
                checkpoint.entries.get(id),
                Some(ManifestEntry {
                    status: ShardStatus::Failed,
                    ..
                })
            )
        })
        .collect();
    report.shards_failed = report.failed_shard_ids.len();
    report.wall_time_seconds = started.elapsed().as_secs_f64();

    if report.shards_completed < report.shards_total {
        if report.shards_failed == 0 && opts.cancel.is_cancelled() {
            return Err(BatchError::Interrupted { report });
        }
        let failed = plan
            .shards
            .iter()
            .map(|s| s.shard_id)
            .filter(|id| !completed.contains(id))
            .collect();
        return Err(BatchError::PartialBatch { failed, report });
    }

    let parts = plan
        .shards
        .iter()
        .map(|s| {
            let text = fs::read_to_string(part_path(dir, s.shard_id))?;
            Ok(detection::parse_detections(&text)?)
        })
        .collect::<Result<Vec<_>, BatchError>>()?;
    let merged = if parts.is_empty() {
        DetectionsFile::new(detector.info(), detector.categories(), Vec::new())?
    } else {
        detection::merge_results(&parts)?
    };
    Ok((merged, report))
}
