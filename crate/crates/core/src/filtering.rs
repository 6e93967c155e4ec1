//! Confidence-threshold elimination of empty images.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{DetectionsFile, ImageDetections};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("threshold {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("thresholds must be ascending, {prev} is followed by {next}")]
    NotAscending { prev: f64, next: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub threshold: f64,
    pub total: usize,
    pub kept: usize,
    pub eliminated: usize,
    pub eliminated_fraction: f64,
}

impl FilterReport {
    fn new(threshold: f64, total: usize, eliminated: usize) -> Self {
        FilterReport {
            threshold,
            total,
            kept: total - eliminated,
            eliminated,
            eliminated_fraction: if total == 0 {
                0.0
            } else {
                eliminated as f64 / total as f64
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub kept: DetectionsFile,
    pub eliminated: DetectionsFile,
    pub report: FilterReport,
}

fn check_threshold(t: f64) -> Result<(), FilterError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(FilterError::OutOfRange(t))
    }
}

/// Ranking key for filtering: the maximum confidence, or -1 for an image
/// with no detections so that it is eliminated even at threshold 0.
fn filter_key(img: &ImageDetections) -> f64 {
    if img.detections().is_empty() {
        -1.0
    } else {
        img.max_detection_conf()
    }
}

/// Keep an image iff it has a detection with confidence at least
/// `threshold`.
pub fn filter_empty(results: &DetectionsFile, threshold: f64) -> Result<FilterOutcome, FilterError> {
    check_threshold(threshold)?;
    let (kept, eliminated): (Vec<_>, Vec<_>) = results
        .images()
        .iter()
        .cloned()
        .partition(|img| filter_key(img) >= threshold);
    let report = FilterReport::new(threshold, results.images().len(), eliminated.len());
    Ok(FilterOutcome {
        kept: results.with_images(kept),
        eliminated: results.with_images(eliminated),
        report,
    })
}

/// Reports for each threshold without materializing the split files.
pub fn threshold_sweep(
    results: &DetectionsFile,
    thresholds: &[f64],
) -> Result<Vec<FilterReport>, FilterError> {
    for &t in thresholds {
        check_threshold(t)?;
    }
    for w in thresholds.windows(2) {
        if w[1] < w[0] {
            return Err(FilterError::NotAscending {
                prev: w[0],
                next: w[1],
            });
        }
    }
    let mut maxima: Vec<f64> = results.images().iter().map(filter_key).collect();
    maxima.sort_by(f64::total_cmp);
    Ok(thresholds
        .iter()
        .map(|&t| {
            let eliminated = maxima.partition_point(|&c| c < t);
            FilterReport::new(t, maxima.len(), eliminated)
        })
        .collect())
}
