//! Classifier training manifests: crop rectangles around confident
//! detections, labeled with the image-level species.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical;
use crate::coco_ct::Dataset;
use crate::detection::{BBox, DetectionsFile, DetectorInfo};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CropError {
    #[error("box {0:?} has zero area")]
    ZeroArea([f64; 4]),
    #[error("box {0:?} lies outside the image")]
    OutsideImage([f64; 4]),
    #[error("image dimensions must be positive")]
    BadDimensions,
    #[error("padding scale {0} must be at least 1")]
    BadPadding(f64),
    #[error("results file {0:?} is not in the dataset")]
    UnresolvedFile(String),
    #[error("malformed manifest: {0}")]
    Structural(String),
}

/// Pixel rectangle inside the source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub left: u32,
    pub top: u32,
    pub width: u32,
    pub height: u32,
}

/// Denormalize `bbox`, grow it about its center by `padding_scale` (then to
/// a square of the longer side if `square`), and clip to the image.
pub fn compute_crop_rect(
    bbox: &BBox,
    image_w: u32,
    image_h: u32,
    padding_scale: f64,
    square: bool,
) -> Result<CropRect, CropError> {
    if image_w == 0 || image_h == 0 {
        return Err(CropError::BadDimensions);
    }
    if !(padding_scale >= 1.0) {
        return Err(CropError::BadPadding(padding_scale));
    }
    if !(bbox.w > 0.0 && bbox.h > 0.0) {
        return Err(CropError::ZeroArea(bbox.to_array()));
    }
    let (iw, ih) = (image_w as f64, image_h as f64);
    let (bw, bh) = (bbox.w * iw, bbox.h * ih);
    let (mut cw, mut ch) = (bw * padding_scale, bh * padding_scale);
    if square {
        let side = cw.max(ch);
        cw = side;
        ch = side;
    }
    // Expand symmetrically from the denormalized corner so that an unpadded
    // box maps exactly onto its own pixels.
    let left = bbox.x * iw - (cw - bw) / 2.0;
    let top = bbox.y * ih - (ch - bh) / 2.0;
    let clip = |v: f64, hi: f64| v.round().clamp(0.0, hi) as u32;
    let (l, r) = (clip(left, iw), clip(left + cw, iw));
    let (t, b) = (clip(top, ih), clip(top + ch, ih));
    if r <= l || b <= t {
        return Err(CropError::OutsideImage(bbox.to_array()));
    }
    Ok(CropRect {
        left: l,
        top: t,
        width: r - l,
        height: b - t,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropOptions {
    pub conf_threshold: f64,
    pub padding_scale: f64,
    pub square: bool,
}

impl Default for CropOptions {
    fn default() -> Self {
        CropOptions {
            conf_threshold: 0.5,
            padding_scale: 1.1,
            square: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub file: String,
    pub detection_index: usize,
    pub crop: CropRect,
    pub species: String,
    pub source_conf: f64,
}

impl ManifestEntry {
    /// File name used when crops are written out as images.
    pub fn crop_file_name(&self) -> String {
        let stem: String = self
            .image_id
            .chars()
            .map(|c| if c == '/' || c == '\\' { '_' } else { c })
            .collect();
        format!("{stem}_{}.png", self.detection_index)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestProvenance {
    pub detector: DetectorInfo,
    pub conf_threshold: f64,
    pub padding_scale: f64,
    pub square: bool,
    /// Images with a confident detection but no species label.
    pub skipped_unlabeled: usize,
    /// Images with a confident detection and more than one species label.
    pub skipped_multi_species: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
    /// Set when entries come from reviewer verdicts rather than raw
    /// detections.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifierManifest {
    pub provenance: ManifestProvenance,
    pub entries: Vec<ManifestEntry>,
}

impl ClassifierManifest {
    pub fn species_counts(&self) -> BTreeMap<&str, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.species.as_str()).or_insert(0) += 1;
        }
        counts
    }
}

pub fn serialize_manifest(m: &ClassifierManifest) -> String {
    canonical::to_canonical_string(m).expect("manifests are always representable")
}

pub fn parse_manifest(text: &str) -> Result<ClassifierManifest, CropError> {
    serde_json::from_str(text).map_err(|e| CropError::Structural(e.to_string()))
}

/// Pair confident detections with image-level species labels.
///
/// Only images with exactly one distinct non-empty species contribute; the
/// label can not be attributed to individual boxes otherwise.
pub fn build_classifier_manifest(
    results: &DetectionsFile,
    dataset: &Dataset,
    opts: &CropOptions,
) -> Result<ClassifierManifest, CropError> {
    if !(opts.padding_scale >= 1.0) {
        return Err(CropError::BadPadding(opts.padding_scale));
    }
    let index = dataset.index();
    let mut provenance = ManifestProvenance {
        detector: results.info.clone(),
        conf_threshold: opts.conf_threshold,
        padding_scale: opts.padding_scale,
        square: opts.square,
        ..Default::default()
    };
    let mut entries = Vec::new();
    for img in results.images() {
        let record = index
            .image_by_file(img.file())
            .ok_or_else(|| CropError::UnresolvedFile(img.file().to_string()))?;
        let confident: Vec<_> = img
            .detections()
            .iter()
            .enumerate()
            .filter(|(_, d)| d.conf >= opts.conf_threshold)
            .collect();
        if confident.is_empty() {
            continue;
        }
        let species = index.species(&record.id);
        let name = match species.len() {
            1 => *species.first().expect("one element"),
            0 => {
                provenance.skipped_unlabeled += 1;
                continue;
            }
            _ => {
                provenance.skipped_multi_species += 1;
                continue;
            }
        };
        for (i, det) in confident {
            let crop = match compute_crop_rect(
                &det.bbox,
                record.width,
                record.height,
                opts.padding_scale,
                opts.square,
            ) {
                Ok(c) => c,
                Err(e) => {
                    log::warn!("skipping detection {i} of {}: {e}", img.file());
                    continue;
                }
            };
            entries.push(ManifestEntry {
                image_id: record.id.clone(),
                file: img.file().to_string(),
                detection_index: i,
                crop,
                species: name.to_string(),
                source_conf: det.conf,
            });
        }
    }
    Ok(ClassifierManifest {
        provenance,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coco_ct::{AnnotationRecord, Category, ImageRecord, Info};
    use crate::detection::{default_categories, Detection, ImageDetections};
    use proptest::prelude::*;

    fn bb(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox { x, y, w, h }
    }

    #[test]
    fn direct_denormalization() {
        let r = compute_crop_rect(&bb(0.25, 0.25, 0.5, 0.5), 1000, 1000, 1.0, false).unwrap();
        assert_eq!(r, CropRect { left: 250, top: 250, width: 500, height: 500 });
    }

    #[test]
    fn padded_about_center() {
        let r = compute_crop_rect(&bb(0.25, 0.25, 0.5, 0.5), 1000, 1000, 1.1, false).unwrap();
        assert_eq!(r, CropRect { left: 225, top: 225, width: 550, height: 550 });
    }

    #[test]
    fn clipped_at_border() {
        let r = compute_crop_rect(&bb(0.9, 0.9, 0.2, 0.2), 100, 100, 1.0, false).unwrap();
        assert_eq!(r, CropRect { left: 90, top: 90, width: 10, height: 10 });
    }

    #[test]
    fn square_uses_longer_side() {
        let r = compute_crop_rect(&bb(0.4, 0.2, 0.2, 0.4), 100, 100, 1.0, true).unwrap();
        assert_eq!(r, CropRect { left: 30, top: 20, width: 40, height: 40 });
    }

    #[test]
    fn degenerate_boxes() {
        assert!(matches!(compute_crop_rect(&bb(0.1, 0.1, 0.0, 0.2), 10, 10, 1.0, false), Err(CropError::ZeroArea(_))));
        assert!(matches!(compute_crop_rect(&bb(0.1, 0.1, 0.1, 0.1), 0, 10, 1.0, false), Err(CropError::BadDimensions)));
        assert!(matches!(compute_crop_rect(&bb(0.1, 0.1, 0.1, 0.1), 10, 10, 0.9, false), Err(CropError::BadPadding(_))));
        // Rounds to nothing on a tiny image.
        assert!(matches!(compute_crop_rect(&bb(0.999, 0.0, 0.001, 0.5), 10, 10, 1.0, false), Err(CropError::OutsideImage(_))));
    }

    proptest! {
        #[test]
        fn rect_within_bounds(
            x in 0.0..1.0f64, y in 0.0..1.0f64, w in 0.001..1.0f64, h in 0.001..1.0f64,
            iw in 1u32..5000, ih in 1u32..5000, pad in 1.0..3.0f64, square: bool,
        ) {
            let b = bb(x, y, w.min(1.0 - x).max(1e-3), h.min(1.0 - y).max(1e-3));
            if let Ok(r) = compute_crop_rect(&b, iw, ih, pad, square) {
                prop_assert!(r.width >= 1 && r.height >= 1);
                prop_assert!(r.left + r.width <= iw);
                prop_assert!(r.top + r.height <= ih);
            }
        }

        #[test]
        fn unpadded_area_matches_rounded_box(
            x in 0.0..0.5f64, y in 0.0..0.5f64, w in 0.05..0.5f64, h in 0.05..0.5f64,
            iw in 100u32..4000, ih in 100u32..4000,
        ) {
            let b = bb(x, y, w, h);
            let r = compute_crop_rect(&b, iw, ih, 1.0, false).unwrap();
            let (fw, fh) = (iw as f64, ih as f64);
            let ew = ((x * fw + w * fw).round() - (x * fw).round()) as u32;
            let eh = ((y * fh + h * fh).round() - (y * fh).round()) as u32;
            prop_assert_eq!((r.width, r.height), (ew, eh));
        }
    }

    fn fixture() -> (Dataset, DetectionsFile) {
        let images = ["deer.jpg", "empty.jpg", "mixed.jpg", "none.jpg"]
            .iter()
            .map(|f| ImageRecord::new(*f, *f, 1000, 1000, "L"))
            .collect();
        let anns = vec![
            AnnotationRecord::new("a1", "deer.jpg", 1),
            AnnotationRecord::new("a2", "empty.jpg", 0),
            AnnotationRecord::new("a3", "mixed.jpg", 1),
            AnnotationRecord::new("a4", "mixed.jpg", 2),
        ];
        let cats = vec![Category::empty(), Category::new(1, "deer"), Category::new(2, "elk")];
        let ds = Dataset::new(Info::default(), images, anns, cats).unwrap();
        let b = BBox::new(0.2, 0.2, 0.3, 0.3).unwrap();
        let dets = |c: f64| vec![Detection::animal(c, b).unwrap()];
        let res = DetectionsFile::new(
            DetectorInfo::named("stub", "1"),
            default_categories(),
            vec![
                ImageDetections::new("deer.jpg", dets(0.95)),
                ImageDetections::new("empty.jpg", dets(0.9)),
                ImageDetections::new("mixed.jpg", dets(0.9)),
                ImageDetections::new("none.jpg", dets(0.1)),
            ],
        )
        .unwrap();
        (ds, res)
    }

    #[test]
    fn manifest_rules() {
        let (ds, res) = fixture();
        let opts = CropOptions { conf_threshold: 0.8, ..Default::default() };
        let m = build_classifier_manifest(&res, &ds, &opts).unwrap();
        assert_eq!(m.entries.len(), 1);
        assert_eq!(m.entries[0].species, "deer");
        assert_eq!(m.entries[0].source_conf, 0.95);
        assert_eq!(m.provenance.skipped_unlabeled, 1);
        assert_eq!(m.provenance.skipped_multi_species, 1);
        assert_eq!(parse_manifest(&serialize_manifest(&m)).unwrap(), m);
        assert_eq!(m.entries[0].crop_file_name(), "deer.jpg_0.png");
    }

    #[test]
    fn unresolved_file() {
        let (ds, _) = fixture();
        let res = DetectionsFile::new(DetectorInfo::default(), default_categories(), vec![ImageDetections::new("x.jpg", vec![])]).unwrap();
        assert_eq!(
            build_classifier_manifest(&res, &ds, &CropOptions::default()),
            Err(CropError::UnresolvedFile("x.jpg".into()))
        );
    }
}
