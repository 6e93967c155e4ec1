//! Detector output model: normalized boxes, per-image detection lists and
//! the batch-level results document.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::canonical;

/// Slack allowed when checking that a box stays inside the frame.
pub const BBOX_EPS: f64 = 1e-9;

pub const ANIMAL_CATEGORY: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetectionError {
    #[error("malformed detections document: {0}")]
    Structural(String),
    #[error("invalid box {0:?}")]
    InvalidBox([f64; 4]),
    #[error("confidence {0} outside [0, 1]")]
    InvalidConfidence(f64),
    #[error("duplicate image file {0:?}")]
    DuplicateFile(String),
    #[error("image {file:?} uses unmapped detection category {code}")]
    UnmappedCategory { file: String, code: u32 },
    #[error("image {file:?}: max_detection_conf {stated} does not match detections ({actual})")]
    InconsistentMax { file: String, stated: f64, actual: f64 },
    #[error("detection category maps differ between parts")]
    CategoryMapMismatch,
    #[error("no parts to merge")]
    NothingToMerge,
}

/// Normalized `[x, y, w, h]` box with a top-left origin.
///
/// Fields are public so geometry helpers can work on boxes that spill past
/// the frame; use [`BBox::new`] or [`BBox::is_valid`] where the invariant
/// matters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, DetectionError> {
        let b = BBox { x, y, w, h };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(DetectionError::InvalidBox(b.to_array()))
        }
    }

    pub fn is_valid(&self) -> bool {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        in_unit(self.x)
            && in_unit(self.y)
            && self.w >= 0.0
            && self.h >= 0.0
            && self.x + self.w <= 1.0 + BBOX_EPS
            && self.y + self.h <= 1.0 + BBOX_EPS
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [x, y, w, h] = <[f64; 4]>::deserialize(d)?;
        BBox::new(x, y, w, h).map_err(serde::de::Error::custom)
    }
}

/// Intersection over union of two boxes; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(with = "category_code")]
    pub category: u32,
    pub conf: f64,
    pub bbox: BBox,
}

impl Detection {
    /// Build a detection, rounding the confidence to its stored precision.
    pub fn new(category: u32, conf: f64, bbox: BBox) -> Result<Self, DetectionError> {
        if !(0.0..=1.0).contains(&conf) {
            return Err(DetectionError::InvalidConfidence(conf));
        }
        Ok(Detection {
            category,
            conf: canonical::round_conf(conf),
            bbox,
        })
    }

    pub fn animal(conf: f64, bbox: BBox) -> Result<Self, DetectionError> {
        Detection::new(ANIMAL_CATEGORY, conf, bbox)
    }
}

mod category_code {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(code: &u32, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&code.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u32, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// Detections for one image. The maximum confidence is derived on
/// construction and can not drift from the detection list.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageDetections {
    file: String,
    max_detection_conf: f64,
    detections: Vec<Detection>,
}

impl ImageDetections {
    pub fn new(file: impl Into<String>, detections: Vec<Detection>) -> Self {
        let max_detection_conf = max_conf(&detections);
        ImageDetections {
            file: file.into(),
            max_detection_conf,
            detections,
        }
    }

    pub fn file(&self) -> &str {
        &self.file
    }

    pub fn max_detection_conf(&self) -> f64 {
        self.max_detection_conf
    }

    pub fn detections(&self) -> &[Detection] {
        &self.detections
    }

    pub fn into_parts(self) -> (String, Vec<Detection>) {
        (self.file, self.detections)
    }

    /// Replace the detection list, recomputing the maximum.
    pub fn with_detections(self, detections: Vec<Detection>) -> Self {
        ImageDetections::new(self.file, detections)
    }
}

fn max_conf(dets: &[Detection]) -> f64 {
    dets.iter().map(|d| d.conf).fold(0.0, f64::max)
}

#[derive(Deserialize)]
struct RawImageDetections {
    file: String,
    max_detection_conf: f64,
    #[serde(default)]
    detections: Vec<Detection>,
}

impl<'de> Deserialize<'de> for ImageDetections {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let mut raw = RawImageDetections::deserialize(d)?;
        for det in &mut raw.detections {
            if !(0.0..=1.0).contains(&det.conf) {
                return Err(serde::de::Error::custom(DetectionError::InvalidConfidence(det.conf)));
            }
            det.conf = canonical::round_conf(det.conf);
        }
        let actual = max_conf(&raw.detections);
        if (actual - canonical::round_conf(raw.max_detection_conf)).abs() > 1e-9 {
            return Err(serde::de::Error::custom(DetectionError::InconsistentMax {
                file: raw.file,
                stated: raw.max_detection_conf,
                actual,
            }));
        }
        Ok(ImageDetections::new(raw.file, raw.detections))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectorInfo {
    pub detector: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector_version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_time: Option<String>,
    /// Number of shard parts folded into this file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merged_parts: Option<usize>,
    /// Repeat-detection clusters already removed from this file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suppressed_clusters: Option<Vec<String>>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl DetectorInfo {
    pub fn named(detector: impl Into<String>, version: impl Into<String>) -> Self {
        DetectorInfo {
            detector: detector.into(),
            detector_version: Some(version.into()),
            ..Default::default()
        }
    }
}

pub fn default_categories() -> BTreeMap<u32, String> {
    BTreeMap::from([(ANIMAL_CATEGORY, "animal".to_string())])
}

/// A results document for one detection run. Images are kept sorted by file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionsFile {
    pub info: DetectorInfo,
    detection_categories: BTreeMap<u32, String>,
    images: Vec<ImageDetections>,
}

#[derive(Deserialize)]
struct RawDetectionsFile {
    #[serde(default)]
    info: DetectorInfo,
    detection_categories: BTreeMap<u32, String>,
    images: Vec<ImageDetections>,
}

impl<'de> Deserialize<'de> for DetectionsFile {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawDetectionsFile::deserialize(d)?;
        DetectionsFile::new(raw.info, raw.detection_categories, raw.images)
            .map_err(serde::de::Error::custom)
    }
}

impl DetectionsFile {
    pub fn new(
        info: DetectorInfo,
        detection_categories: BTreeMap<u32, String>,
        mut images: Vec<ImageDetections>,
    ) -> Result<Self, DetectionError> {
        images.sort_by(|a, b| a.file.cmp(&b.file));
        for pair in images.windows(2) {
            if pair[0].file == pair[1].file {
                return Err(DetectionError::DuplicateFile(pair[0].file.clone()));
            }
        }
        for img in &images {
            for det in &img.detections {
                if !detection_categories.contains_key(&det.category) {
                    return Err(DetectionError::UnmappedCategory {
                        file: img.file.clone(),
                        code: det.category,
                    });
                }
            }
        }
        Ok(DetectionsFile {
            info,
            detection_categories,
            images,
        })
    }

    pub fn images(&self) -> &[ImageDetections] {
        &self.images
    }

    pub fn detection_categories(&self) -> &BTreeMap<u32, String> {
        &self.detection_categories
    }

    pub fn into_images(self) -> Vec<ImageDetections> {
        self.images
    }

    pub fn get(&self, file: &str) -> Option<&ImageDetections> {
        self.images
            .binary_search_by(|i| i.file.as_str().cmp(file))
            .ok()
            .map(|i| &self.images[i])
    }

    /// A file with the same header and a different (already validated) image
    /// list. Used by transformations that only drop or thin out images.
    pub(crate) fn with_images(&self, images: Vec<ImageDetections>) -> Self {
        debug_assert!(images.windows(2).all(|p| p[0].file < p[1].file));
        DetectionsFile {
            info: self.info.clone(),
            detection_categories: self.detection_categories.clone(),
            images,
        }
    }

    pub fn detection_count(&self) -> usize {
        self.images.iter().map(|i| i.detections.len()).sum()
    }
}

pub fn parse_detections(text: &str) -> Result<DetectionsFile, DetectionError> {
    serde_json::from_str(text).map_err(|e| DetectionError::Structural(e.to_string()))
}

pub fn serialize_detections(file: &DetectionsFile) -> String {
    canonical::to_canonical_string(file).expect("detections are always representable")
}

/// Combine shard parts into one results file sorted by image file name.
///
/// The result does not depend on the order of `parts`.
pub fn merge_results(parts: &[DetectionsFile]) -> Result<DetectionsFile, DetectionError> {
    let first = parts.first().ok_or(DetectionError::NothingToMerge)?;
    if parts
        .iter()
        .any(|p| p.detection_categories != first.detection_categories)
    {
        return Err(DetectionError::CategoryMapMismatch);
    }

    let base = parts
        .iter()
        .map(|p| &p.info)
        .min_by(|a, b| {
            (&a.detector, &a.detector_version).cmp(&(&b.detector, &b.detector_version))
        })
        .expect("non-empty");
    let mut info = DetectorInfo {
        detector: base.detector.clone(),
        detector_version: base.detector_version.clone(),
        completion_time: parts.iter().filter_map(|p| p.info.completion_time.clone()).max(),
        merged_parts: Some(parts.iter().map(|p| p.info.merged_parts.unwrap_or(1)).sum()),
        suppressed_clusters: None,
        extra: base.extra.clone(),
    };
    let suppressed: BTreeSet<&String> = parts
        .iter()
        .filter_map(|p| p.info.suppressed_clusters.as_ref())
        .flatten()
        .collect();
    if !suppressed.is_empty() {
        info.suppressed_clusters = Some(suppressed.into_iter().cloned().collect());
    }

    let images = parts.iter().flat_map(|p| p.images.iter().cloned()).collect();
    DetectionsFile::new(info, first.detection_categories.clone(), images)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = b(0.1, 0.1, 0.3, 0.3);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(0.6, 0.6, 0.2, 0.2)), 0.0);
    }

    #[test]
    fn iou_partial_overlap() {
        // intersection 0.1 * 0.1, union 0.04 + 0.04 - 0.01
        let v = iou(&b(0.0, 0.0, 0.2, 0.2), &b(0.1, 0.1, 0.2, 0.2));
        assert!((v - 0.01 / 0.07).abs() < 1e-12);
        assert!((v - 0.142_857).abs() < 1e-6);
    }

    #[test]
    fn iou_degenerate_union() {
        let z = b(0.5, 0.5, 0.0, 0.0);
        assert_eq!(iou(&z, &z), 0.0);
    }

    #[test]
    fn box_validation() {
        assert!(BBox::new(0.5, 0.5, 0.5, 0.5).is_ok());
        assert!(BBox::new(0.9, 0.9, 0.2, 0.2).is_err());
        assert!(BBox::new(-0.1, 0.0, 0.1, 0.1).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0 + 1e-10, 1.0).is_ok());
    }

    #[test]
    fn max_conf_tracks_detections() {
        let d = ImageDetections::new(
            "a.jpg",
            vec![
                Detection::animal(0.3, b(0., 0., 0.1, 0.1)).unwrap(),
                Detection::animal(0.87654, b(0., 0., 0.1, 0.1)).unwrap(),
            ],
        );
        assert_eq!(d.max_detection_conf(), 0.8765);
        assert_eq!(ImageDetections::new("e.jpg", vec![]).max_detection_conf(), 0.0);
    }

    #[test]
    fn inconsistent_max_rejected() {
        let text = r#"{"info": {"detector": "x"}, "detection_categories": {"1": "animal"}, "images": [{"file": "a.jpg", "max_detection_conf": 0.5, "detections": []}]}"#;
        assert!(matches!(parse_detections(text), Err(DetectionError::Structural(m)) if m.contains("does not match")));
    }

    #[test]
    fn unmapped_category_rejected() {
        let img = ImageDetections::new("a.jpg", vec![Detection::new(3, 0.5, b(0., 0., 0.1, 0.1)).unwrap()]);
        assert!(matches!(
            DetectionsFile::new(DetectorInfo::default(), default_categories(), vec![img]),
            Err(DetectionError::UnmappedCategory { code: 3, .. })
        ));
    }

    fn part(files: &[&str]) -> DetectionsFile {
        let images = files
            .iter()
            .map(|f| ImageDetections::new(*f, vec![Detection::animal(0.5, b(0.1, 0.1, 0.2, 0.2)).unwrap()]))
            .collect();
        DetectionsFile::new(DetectorInfo::named("stub", "1"), default_categories(), images).unwrap()
    }

    #[test]
    fn merge_single_part_sorts() {
        let m = merge_results(&[part(&["c.jpg", "a.jpg", "b.jpg"])]).unwrap();
        let files: Vec<_> = m.images().iter().map(|i| i.file()).collect();
        assert_eq!(files, ["a.jpg", "b.jpg", "c.jpg"]);
    }

    #[test]
    fn merge_is_order_independent() {
        let (p, q, r) = (part(&["b.jpg"]), part(&["a.jpg", "d.jpg"]), part(&["c.jpg"]));
        let one = merge_results(&[p.clone(), q.clone(), r.clone()]).unwrap();
        let two = merge_results(&[r.clone(), p.clone(), q.clone()]).unwrap();
        assert_eq!(serialize_detections(&one), serialize_detections(&two));
        let nested = merge_results(&[merge_results(&[p, q]).unwrap(), r]).unwrap();
        assert_eq!(serialize_detections(&one), serialize_detections(&nested));
    }

    #[test]
    fn merge_duplicate_file_named() {
        let err = merge_results(&[part(&["a.jpg"]), part(&["a.jpg"])]).unwrap_err();
        assert_eq!(err, DetectionError::DuplicateFile("a.jpg".into()));
        assert!(err.to_string().contains("a.jpg"));
    }

    #[test]
    fn merge_category_mismatch() {
        let mut other = part(&["z.jpg"]);
        other.detection_categories.insert(2, "person".into());
        assert_eq!(
            merge_results(&[part(&["a.jpg"]), other]).unwrap_err(),
            DetectionError::CategoryMapMismatch
        );
    }

    #[test]
    fn serialized_shape() {
        let text = serialize_detections(&part(&["a.jpg"]));
        let v: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["detection_categories"]["1"], "animal");
        assert_eq!(v["images"][0]["detections"][0]["category"], "1");
        assert_eq!(v["images"][0]["detections"][0]["bbox"].as_array().unwrap().len(), 4);
        assert_eq!(parse_detections(&text).unwrap(), part(&["a.jpg"]));
    }
}
