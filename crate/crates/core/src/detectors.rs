//! The detector contract and the built-in implementations.
//!
//! Real neural detectors run outside this crate and are reached through
//! [`ExecDetector`]. [`StubDetector`] and [`OracleDetector`] are
//! deterministic stand-ins used for testing and for pipeline dry runs.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::PathBuf;
use std::process::Command;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::coco_ct::{Dataset, DatasetIndex, ImageRecord};
use crate::detection::{
    self, default_categories, BBox, Detection, DetectionsFile, DetectorInfo, ImageDetections,
};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("image {0:?} is not part of the ground-truth dataset")]
    UnknownImage(String),
    #[error("detector failed: {0}")]
    Failed(String),
    #[error("detector i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Anything that can turn images into detections.
///
/// Implementations must be deterministic for a fixed configuration: resume
/// and merge guarantees rely on re-running a shard producing the same bytes.
/// They are shared across worker threads.
pub trait Detector: Send + Sync {
    fn info(&self) -> DetectorInfo;

    fn categories(&self) -> BTreeMap<u32, String> {
        default_categories()
    }

    fn detect(&self, image: &ImageRecord) -> Result<Vec<Detection>, DetectorError>;

    /// Run over a whole shard. The default calls [`Detector::detect`] per
    /// image; adapters with per-invocation overhead override it.
    fn detect_shard(&self, images: &[&ImageRecord]) -> Result<Vec<ImageDetections>, DetectorError> {
        images
            .iter()
            .map(|img| Ok(ImageDetections::new(img.file_name.clone(), self.detect(img)?)))
            .collect()
    }
}

impl<T: Detector + ?Sized> Detector for Arc<T> {
    fn info(&self) -> DetectorInfo {
        (**self).info()
    }
    fn categories(&self) -> BTreeMap<u32, String> {
        (**self).categories()
    }
    fn detect(&self, image: &ImageRecord) -> Result<Vec<Detection>, DetectorError> {
        (**self).detect(image)
    }
    fn detect_shard(&self, images: &[&ImageRecord]) -> Result<Vec<ImageDetections>, DetectorError> {
        (**self).detect_shard(images)
    }
}

/// Per-image RNG keyed by (purpose, seed, image id).
fn image_rng(purpose: &str, seed: u64, image_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(purpose.as_bytes());
    h.update([0]);
    h.update(seed.to_le_bytes());
    h.update(image_id.as_bytes());
    let mut key = [0u8; 32];
    key.copy_from_slice(&h.finalize());
    ChaCha8Rng::from_seed(key)
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.random_range(0.05..0.5);
    let h = rng.random_range(0.05..0.5);
    let x = rng.random_range(0.0..=1.0 - w);
    let y = rng.random_range(0.0..=1.0 - h);
    BBox { x, y, w, h }
}

/// Zero to three pseudo-random detections derived from `(seed, image.id)`.
pub fn stub_detect(image: &ImageRecord, seed: u64) -> Vec<Detection> {
    let mut rng = image_rng("stub", seed, &image.id);
    let count = rng.random_range(0..=3);
    (0..count)
        .map(|_| {
            let conf = rng.random_range(0.0..=1.0);
            let bbox = random_box(&mut rng);
            Detection::animal(conf, bbox).expect("generated detections are in range")
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct StubDetector {
    pub seed: u64,
    /// Busy-spin this long per image to emulate inference cost.
    pub burn: Option<Duration>,
}

impl StubDetector {
    pub fn new(seed: u64) -> Self {
        StubDetector { seed, burn: None }
    }

    pub fn burning(seed: u64, per_image: Duration) -> Self {
        StubDetector {
            seed,
            burn: Some(per_image),
        }
    }
}

fn spin_block(x: u64) -> u64 {
    let mut x = x;
    for _ in 0..256 {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
    }
    std::hint::black_box(x)
}

/// Spin blocks per millisecond on an uncontended core, measured once.
fn blocks_per_ms() -> f64 {
    static RATE: OnceLock<f64> = OnceLock::new();
    *RATE.get_or_init(|| {
        let start = Instant::now();
        let mut x = 0x9E37_79B9_7F4A_7C15;
        let mut blocks = 0u64;
        while start.elapsed() < Duration::from_millis(50) {
            for _ in 0..1024 {
                x = spin_block(x);
            }
            blocks += 1024;
        }
        blocks as f64 / (start.elapsed().as_secs_f64() * 1e3)
    })
}

/// Do a fixed amount of CPU work that takes about `d` on an idle core.
/// The work is counted rather than timed, so oversubscribed threads take
/// proportionally longer.
pub fn burn_cpu(d: Duration) {
    let blocks = (blocks_per_ms() * d.as_secs_f64() * 1e3).round() as u64;
    let mut x = 0x9E37_79B9_7F4A_7C15;
    for _ in 0..blocks {
        x = spin_block(x);
    }
}

impl Detector for StubDetector {
    fn info(&self) -> DetectorInfo {
        DetectorInfo::named("stub", format!("seed-{}", self.seed))
    }

    fn detect(&self, image: &ImageRecord) -> Result<Vec<Detection>, DetectorError> {
        if let Some(d) = self.burn {
            burn_cpu(d);
        }
        Ok(stub_detect(image, self.seed))
    }
}

/// Error model for the ground-truth oracle.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OracleNoise {
    /// Probability that an image's presence is inverted.
    pub flip_prob: f64,
    /// Width of the confidence band: true detections get `[1 - spread, 1]`,
    /// spurious ones `[0, spread]`.
    pub conf_spread: f64,
}

/// Emit detections that follow the ground-truth labels, with seeded noise.
pub fn oracle_detect(
    image: &ImageRecord,
    truth: &DatasetIndex<'_>,
    noise: OracleNoise,
    seed: u64,
) -> Result<Vec<Detection>, DetectorError> {
    if truth.image(&image.id).is_none() {
        return Err(DetectorError::UnknownImage(image.id.clone()));
    }
    Ok(oracle_for(!truth.is_empty_labeled(&image.id), &image.id, noise, seed))
}

fn oracle_for(positive: bool, image_id: &str, noise: OracleNoise, seed: u64) -> Vec<Detection> {
    let mut rng = image_rng("oracle", seed, image_id);
    let flipped = noise.flip_prob > 0.0 && rng.random_bool(noise.flip_prob.clamp(0.0, 1.0));
    let spread = noise.conf_spread.clamp(0.0, 1.0);
    let bbox = random_box(&mut rng);
    let u: f64 = rng.random_range(0.0..=1.0);
    match (positive, flipped) {
        (true, false) => vec![Detection::animal(1.0 - spread * u, bbox).expect("in range")],
        (false, true) => vec![Detection::animal(spread * u, bbox).expect("in range")],
        _ => Vec::new(),
    }
}

/// Ground-truth oracle as a [`Detector`].
#[derive(Debug, Clone)]
pub struct OracleDetector {
    positives: Arc<HashMap<String, bool>>,
    pub noise: OracleNoise,
    pub seed: u64,
}

impl OracleDetector {
    pub fn new(truth: &Dataset, noise: OracleNoise, seed: u64) -> Self {
        let idx = truth.index();
        let positives = truth
            .images
            .iter()
            .map(|i| (i.id.clone(), !idx.is_empty_labeled(&i.id)))
            .collect();
        OracleDetector {
            positives: Arc::new(positives),
            noise,
            seed,
        }
    }
}

impl Detector for OracleDetector {
    fn info(&self) -> DetectorInfo {
        DetectorInfo::named(
            "oracle",
            format!(
                "seed-{}-flip-{}-spread-{}",
                self.seed, self.noise.flip_prob, self.noise.conf_spread
            ),
        )
    }

    fn detect(&self, image: &ImageRecord) -> Result<Vec<Detection>, DetectorError> {
        let positive = *self
            .positives
            .get(&image.id)
            .ok_or_else(|| DetectorError::UnknownImage(image.id.clone()))?;
        Ok(oracle_for(positive, &image.id, self.noise, self.seed))
    }
}

/// Adapter for an external detector executable.
///
/// The program is called once per shard as `program <manifest> <output>`,
/// where the manifest lists one image file name per line and the output is
/// a detections document covering exactly those files. Exit code 0 means
/// success.
#[derive(Debug, Clone)]
pub struct ExecDetector {
    pub program: PathBuf,
    pub categories: BTreeMap<u32, String>,
}

impl ExecDetector {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        ExecDetector {
            program: program.into(),
            categories: default_categories(),
        }
    }
}

impl Detector for ExecDetector {
    fn info(&self) -> DetectorInfo {
        DetectorInfo::named("exec", self.program.display().to_string())
    }

    fn categories(&self) -> BTreeMap<u32, String> {
        self.categories.clone()
    }

    fn detect(&self, image: &ImageRecord) -> Result<Vec<Detection>, DetectorError> {
        let mut out = self.detect_shard(&[image])?;
        Ok(out.pop().map(|d| d.into_parts().1).unwrap_or_default())
    }

    fn detect_shard(&self, images: &[&ImageRecord]) -> Result<Vec<ImageDetections>, DetectorError> {
        let work = tempfile::tempdir()?;
        let manifest = work.path().join("shard.manifest");
        let output = work.path().join("shard.detections");
        let mut listing = String::new();
        for img in images {
            listing.push_str(&img.file_name);
            listing.push('\n');
        }
        fs::write(&manifest, listing)?;

        let status = Command::new(&self.program).arg(&manifest).arg(&output).status()?;
        if !status.success() {
            return Err(DetectorError::Failed(format!(
                "{} exited with {status}",
                self.program.display()
            )));
        }
        let text = fs::read_to_string(&output)?;
        let part = detection::parse_detections(&text).map_err(|e| DetectorError::Failed(e.to_string()))?;
        if part.detection_categories() != &self.categories {
            return Err(DetectorError::Failed("detector returned an unexpected category map".into()));
        }
        let mut by_file: HashMap<String, ImageDetections> = part
            .into_images()
            .into_iter()
            .map(|d| (d.file().to_string(), d))
            .collect();
        let results = images
            .iter()
            .map(|img| {
                by_file
                    .remove(&img.file_name)
                    .ok_or_else(|| DetectorError::Failed(format!("no result for {:?}", img.file_name)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(extra) = by_file.keys().next() {
            return Err(DetectorError::Failed(format!("unrequested result for {extra:?}")));
        }
        Ok(results)
    }
}

/// Convenience: run a detector sequentially over every image of a dataset.
pub fn detect_all(
    dataset: &Dataset,
    detector: &dyn Detector,
) -> Result<DetectionsFile, DetectorError> {
    let refs: Vec<&ImageRecord> = dataset.images.iter().collect();
    let images = detector.detect_shard(&refs)?;
    DetectionsFile::new(detector.info(), detector.categories(), images)
        .map_err(|e| DetectorError::Failed(e.to_string()))
}
