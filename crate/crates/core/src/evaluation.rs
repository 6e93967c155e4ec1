//! Image-level average precision of animal presence.
//!
//! Ground truth is the species labels: an image is positive when it carries
//! at least one non-empty annotation. Its score is the maximum detection
//! confidence, or 0 if the detector never reported on it.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coco_ct::Dataset;
use crate::detection::DetectionsFile;

/// Name recorded in reports for the AP definition used here.
pub const AP_VARIANT: &str = "unsmoothed-retrieval";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("average precision is undefined without positives")]
    NoPositives,
    #[error("location {0:?} has no region mapping")]
    UnmappedLocation(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredImage {
    pub image_id: String,
    pub score: f64,
    pub positive: bool,
}

impl ScoredImage {
    pub fn new(image_id: impl Into<String>, score: f64, positive: bool) -> Self {
        ScoredImage {
            image_id: image_id.into(),
            score,
            positive,
        }
    }
}

/// Score every dataset image. Result entries for files unknown to the
/// dataset are ignored.
pub fn image_level_scores(results: &DetectionsFile, dataset: &Dataset) -> Vec<ScoredImage> {
    let index = dataset.index();
    dataset
        .images
        .iter()
        .map(|img| {
            let score = results
                .get(&img.file_name)
                .map(|d| d.max_detection_conf())
                .unwrap_or(0.0);
            ScoredImage::new(img.id.clone(), score, !index.is_empty_labeled(&img.id))
        })
        .collect()
}

/// Descending score, ties by ascending image id.
fn rank_order(a: &ScoredImage, b: &ScoredImage) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.image_id.cmp(&b.image_id))
}

/// Mean over positives of the precision at each positive's rank.
pub fn average_precision(scored: &[ScoredImage]) -> Result<f64, EvalError> {
    let mut ranked: Vec<&ScoredImage> = scored.iter().collect();
    ranked.sort_by(|a, b| rank_order(a, b));
    let positives = ranked.iter().filter(|s| s.positive).count();
    if positives == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, s) in ranked.iter().enumerate() {
        if s.positive {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionResult {
    /// Absent when the region has no positives.
    pub ap: Option<f64>,
    pub positives: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap_variant: String,
    pub regions: BTreeMap<String, RegionResult>,
    pub overall: RegionResult,
}

fn summarize(scored: &[ScoredImage]) -> RegionResult {
    RegionResult {
        ap: average_precision(scored).ok(),
        positives: scored.iter().filter(|s| s.positive).count(),
        total: scored.len(),
    }
}

/// AP per region plus overall AP across all regions.
pub fn per_region_report(
    results: &DetectionsFile,
    dataset: &Dataset,
    region_of: &BTreeMap<String, String>,
) -> Result<EvalReport, EvalError> {
    let scores = image_level_scores(results, dataset);
    let mut grouped: BTreeMap<&str, Vec<ScoredImage>> = BTreeMap::new();
    for (img, s) in dataset.images.iter().zip(scores.iter()) {
        let region = region_of
            .get(&img.location)
            .ok_or_else(|| EvalError::UnmappedLocation(img.location.clone()))?;
        grouped.entry(region.as_str()).or_default().push(s.clone());
    }
    Ok(EvalReport {
        ap_variant: AP_VARIANT.to_string(),
        regions: grouped
            .into_iter()
            .map(|(r, s)| (r.to_string(), summarize(&s)))
            .collect(),
        overall: summarize(&scores),
    })
}

/// Parse a two-column `location region` table. Columns may be separated by
/// a tab, a comma or spaces; blank lines and `#` comments are skipped.
pub fn parse_region_map(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (loc, region) = line
            .split_once('\t')
            .or_else(|| line.split_once(','))
            .or_else(|| line.split_once(' '))
            .ok_or_else(|| format!("line {}: expected two columns", n + 1))?;
        map.insert(loc.trim().to_string(), region.trim().to_string());
    }
    Ok(map)
}
