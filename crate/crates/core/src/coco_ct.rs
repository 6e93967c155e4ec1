//! COCO Camera Traps dataset documents.
//!
//! A [`Dataset`] is always held in canonical order (images and annotations
//! by id, categories by id) and is only handed out after validation, so a
//! value of this type satisfies every referential invariant of the format.
//! Fields this crate does not model are kept in `extra` maps and written
//! back unchanged.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::canonical;

/// Category id reserved for "no animal present".
pub const EMPTY_CATEGORY_ID: u32 = 0;
pub const EMPTY_CATEGORY_NAME: &str = "empty";

const IMAGE_EXTENSIONS: &[&str] = &["jpg", "jpeg", "png", "tif", "tiff", "bmp", "gif", "webp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Image,
    FileName,
    Annotation,
    Category,
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RecordKind::Image => "image",
            RecordKind::FileName => "image file_name",
            RecordKind::Annotation => "annotation",
            RecordKind::Category => "category",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DatasetError {
    #[error("malformed document: {0}")]
    Structural(String),
    #[error("duplicate {kind} id {id:?}")]
    DuplicateId { kind: RecordKind, id: String },
    #[error("annotation {annotation:?} references missing {kind} {id:?}")]
    DanglingReference {
        annotation: String,
        kind: RecordKind,
        id: String,
    },
    #[error("{kind} {id:?}: invalid {field}: {reason}")]
    InvalidField {
        kind: RecordKind,
        id: String,
        field: &'static str,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConvertError {
    #[error("folder listing is empty")]
    EmptyListing,
    #[error("path {0:?} needs at least a species folder and a file name")]
    TooShallow(String),
    #[error("path {path:?} has no directory segment {index} to use as location")]
    NoLocationSegment { path: String, index: usize },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Info {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contributor: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date_created: Option<String>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub location: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub datetime: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_num: Option<u64>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl ImageRecord {
    pub fn new(
        id: impl Into<String>,
        file_name: impl Into<String>,
        width: u32,
        height: u32,
        location: impl Into<String>,
    ) -> Self {
        ImageRecord {
            id: id.into(),
            file_name: file_name.into(),
            width,
            height,
            location: location.into(),
            datetime: None,
            seq_id: None,
            frame_num: None,
            extra: BTreeMap::new(),
        }
    }

    /// Parsed capture time, if present and recognizable.
    pub fn capture_time(&self) -> Option<NaiveDateTime> {
        self.datetime.as_deref().and_then(parse_timestamp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub image_id: String,
    pub category_id: u32,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl AnnotationRecord {
    pub fn new(id: impl Into<String>, image_id: impl Into<String>, category_id: u32) -> Self {
        AnnotationRecord {
            id: id.into(),
            image_id: image_id.into(),
            category_id,
            extra: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    pub name: String,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl Category {
    pub fn new(id: u32, name: impl Into<String>) -> Self {
        Category {
            id,
            name: name.into(),
            extra: BTreeMap::new(),
        }
    }

    pub fn empty() -> Self {
        Category::new(EMPTY_CATEGORY_ID, EMPTY_CATEGORY_NAME)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    #[serde(default)]
    pub info: Info,
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
    pub categories: Vec<Category>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl Dataset {
    /// Validate the parts and return them as a canonical dataset.
    pub fn new(
        info: Info,
        images: Vec<ImageRecord>,
        annotations: Vec<AnnotationRecord>,
        categories: Vec<Category>,
    ) -> Result<Self, DatasetError> {
        Dataset {
            info,
            images,
            annotations,
            categories,
            extra: BTreeMap::new(),
        }
        .into_canonical()
    }

    /// Validate and sort in place.
    pub fn into_canonical(mut self) -> Result<Self, DatasetError> {
        self.validate()?;
        self.images.sort_by(|a, b| a.id.cmp(&b.id));
        self.annotations.sort_by(|a, b| a.id.cmp(&b.id));
        self.categories.sort_by_key(|c| c.id);
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut categories = BTreeSet::new();
        for c in &self.categories {
            if !categories.insert(c.id) {
                return Err(DatasetError::DuplicateId {
                    kind: RecordKind::Category,
                    id: c.id.to_string(),
                });
            }
            if c.name.is_empty() {
                return Err(invalid(RecordKind::Category, c.id.to_string(), "name", "must not be empty"));
            }
            if c.id == EMPTY_CATEGORY_ID && c.name != EMPTY_CATEGORY_NAME {
                return Err(invalid(
                    RecordKind::Category,
                    c.id.to_string(),
                    "name",
                    format!("id 0 is reserved for {EMPTY_CATEGORY_NAME:?}"),
                ));
            }
        }

        let mut images = BTreeSet::new();
        let mut files = BTreeSet::new();
        for img in &self.images {
            if !images.insert(img.id.as_str()) {
                return Err(DatasetError::DuplicateId {
                    kind: RecordKind::Image,
                    id: img.id.clone(),
                });
            }
            if !files.insert(img.file_name.as_str()) {
                return Err(DatasetError::DuplicateId {
                    kind: RecordKind::FileName,
                    id: img.file_name.clone(),
                });
            }
            validate_image(img)?;
        }

        let mut annotations = BTreeSet::new();
        for ann in &self.annotations {
            if !annotations.insert(ann.id.as_str()) {
                return Err(DatasetError::DuplicateId {
                    kind: RecordKind::Annotation,
                    id: ann.id.clone(),
                });
            }
            if !images.contains(ann.image_id.as_str()) {
                return Err(DatasetError::DanglingReference {
                    annotation: ann.id.clone(),
                    kind: RecordKind::Image,
                    id: ann.image_id.clone(),
                });
            }
            if !categories.contains(&ann.category_id) {
                return Err(DatasetError::DanglingReference {
                    annotation: ann.id.clone(),
                    kind: RecordKind::Category,
                    id: ann.category_id.to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn index(&self) -> DatasetIndex<'_> {
        DatasetIndex::new(self)
    }

    /// Fraction of images carrying at least one annotation.
    pub fn labeled_fraction(&self) -> f64 {
        if self.images.is_empty() {
            return 0.0;
        }
        let labeled: BTreeSet<&str> = self.annotations.iter().map(|a| a.image_id.as_str()).collect();
        labeled.len() as f64 / self.images.len() as f64
    }

    pub fn category_names(&self) -> BTreeSet<&str> {
        self.categories.iter().map(|c| c.name.as_str()).collect()
    }
}

fn invalid(kind: RecordKind, id: String, field: &'static str, reason: impl Into<String>) -> DatasetError {
    DatasetError::InvalidField {
        kind,
        id,
        field,
        reason: reason.into(),
    }
}

fn validate_image(img: &ImageRecord) -> Result<(), DatasetError> {
    if img.id.is_empty() {
        return Err(invalid(RecordKind::Image, img.id.clone(), "id", "must not be empty"));
    }
    if img.width == 0 {
        return Err(invalid(RecordKind::Image, img.id.clone(), "width", "must be positive"));
    }
    if img.height == 0 {
        return Err(invalid(RecordKind::Image, img.id.clone(), "height", "must be positive"));
    }
    if img.frame_num.is_some() && img.seq_id.is_none() {
        return Err(invalid(
            RecordKind::Image,
            img.id.clone(),
            "frame_num",
            "requires seq_id",
        ));
    }
    if let Some(dt) = &img.datetime {
        if parse_timestamp(dt).is_none() {
            return Err(invalid(
                RecordKind::Image,
                img.id.clone(),
                "datetime",
                format!("{dt:?} is not an ISO-8601 timestamp"),
            ));
        }
    }
    Ok(())
}

/// Accepts RFC 3339 and the zone-less `YYYY-MM-DD[T ]HH:MM:SS` forms common in
/// camera-trap exports.
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_utc());
    }
    ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(s, fmt).ok())
}

/// Lookup tables over a dataset.
pub struct DatasetIndex<'a> {
    by_id: HashMap<&'a str, &'a ImageRecord>,
    by_file: HashMap<&'a str, &'a ImageRecord>,
    labels: HashMap<&'a str, BTreeSet<u32>>,
    names: HashMap<u32, &'a str>,
}

impl<'a> DatasetIndex<'a> {
    fn new(d: &'a Dataset) -> Self {
        let mut labels: HashMap<&str, BTreeSet<u32>> = HashMap::new();
        for a in &d.annotations {
            labels.entry(a.image_id.as_str()).or_default().insert(a.category_id);
        }
        DatasetIndex {
            by_id: d.images.iter().map(|i| (i.id.as_str(), i)).collect(),
            by_file: d.images.iter().map(|i| (i.file_name.as_str(), i)).collect(),
            labels,
            names: d.categories.iter().map(|c| (c.id, c.name.as_str())).collect(),
        }
    }

    pub fn image(&self, id: &str) -> Option<&'a ImageRecord> {
        self.by_id.get(id).copied()
    }

    pub fn image_by_file(&self, file: &str) -> Option<&'a ImageRecord> {
        self.by_file.get(file).copied()
    }

    pub fn category_name(&self, id: u32) -> Option<&'a str> {
        self.names.get(&id).copied()
    }

    pub fn has_category_name(&self, name: &str) -> bool {
        self.names.values().any(|n| *n == name)
    }

    /// Distinct non-empty species names annotated on an image.
    pub fn species(&self, image_id: &str) -> BTreeSet<&'a str> {
        self.labels
            .get(image_id)
            .into_iter()
            .flatten()
            .filter(|&&c| c != EMPTY_CATEGORY_ID)
            .filter_map(|c| self.names.get(c).copied())
            .collect()
    }

    /// True when every annotation on the image is "empty", or it has none.
    pub fn is_empty_labeled(&self, image_id: &str) -> bool {
        self.labels
            .get(image_id)
            .is_none_or(|cats| cats.iter().all(|&c| c == EMPTY_CATEGORY_ID))
    }
}

/// Parse and validate a COCO-CT document.
pub fn parse_dataset(text: &str) -> Result<Dataset, DatasetError> {
    let d: Dataset =
        serde_json::from_str(text).map_err(|e| DatasetError::Structural(e.to_string()))?;
    d.into_canonical()
}

/// Canonical text of a dataset. The dataset is re-sorted first so callers
/// that built one by hand still get canonical bytes.
pub fn serialize_dataset(d: &Dataset) -> String {
    let mut sorted = d.clone();
    sorted.images.sort_by(|a, b| a.id.cmp(&b.id));
    sorted.annotations.sort_by(|a, b| a.id.cmp(&b.id));
    sorted.categories.sort_by_key(|c| c.id);
    canonical::to_canonical_string(&sorted).expect("dataset values are always representable")
}

/// How to derive an image's location from its relative path.
#[derive(Debug, Clone)]
pub struct FolderConvention {
    /// Index into the path's directory segments. Segment 0 is the species
    /// folder.
    pub location_segment: usize,
    /// Dimensions recorded when the caller cannot supply real ones.
    pub fallback_size: (u32, u32),
}

impl Default for FolderConvention {
    fn default() -> Self {
        FolderConvention {
            location_segment: 1,
            fallback_size: (1920, 1080),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvertOutcome {
    pub dataset: Dataset,
    /// Paths skipped because they do not look like images.
    pub skipped: usize,
}

/// Build a dataset from a `species/.../file` listing. Category ids are
/// assigned in lexicographic folder order starting at 1; a folder named
/// `empty` maps to the reserved id 0.
pub fn convert_foldered_labels<S: AsRef<str>>(
    listing: &[S],
    convention: &FolderConvention,
) -> Result<ConvertOutcome, ConvertError> {
    convert_foldered_labels_with(listing, convention, |_| None)
}

/// Same as [`convert_foldered_labels`], asking `dimensions` for each image's
/// pixel size and falling back to the convention's default when it returns
/// `None`.
pub fn convert_foldered_labels_with<S, F>(
    listing: &[S],
    convention: &FolderConvention,
    mut dimensions: F,
) -> Result<ConvertOutcome, ConvertError>
where
    S: AsRef<str>,
    F: FnMut(&str) -> Option<(u32, u32)>,
{
    if listing.is_empty() {
        return Err(ConvertError::EmptyListing);
    }
    let mut skipped = 0;
    let mut rows = Vec::new();
    for raw in listing {
        let path = raw.as_ref().replace('\\', "/");
        let path = path.trim_start_matches("./").trim_start_matches('/').to_string();
        let segments: Vec<&str> = path.split('/').filter(|s| !s.is_empty()).collect();
        if segments.len() < 2 {
            return Err(ConvertError::TooShallow(path));
        }
        if !has_image_extension(segments[segments.len() - 1]) {
            skipped += 1;
            continue;
        }
        let dirs = &segments[..segments.len() - 1];
        let location = dirs
            .get(convention.location_segment)
            .ok_or_else(|| ConvertError::NoLocationSegment {
                path: path.clone(),
                index: convention.location_segment,
            })?
            .to_string();
        let species = dirs[0].to_string();
        let normalized = segments.join("/");
        rows.push((normalized, species, location));
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} non-image paths");
    }

    let species: BTreeSet<&str> = rows
        .iter()
        .map(|(_, s, _)| s.as_str())
        .filter(|s| *s != EMPTY_CATEGORY_NAME)
        .collect();
    let mut categories = vec![Category::empty()];
    let mut ids = HashMap::new();
    ids.insert(EMPTY_CATEGORY_NAME, EMPTY_CATEGORY_ID);
    for (i, name) in species.iter().enumerate() {
        let id = i as u32 + 1;
        categories.push(Category::new(id, *name));
        ids.insert(*name, id);
    }

    let mut images = Vec::with_capacity(rows.len());
    let mut annotations = Vec::with_capacity(rows.len());
    for (path, species, location) in &rows {
        let (w, h) = dimensions(path).unwrap_or(convention.fallback_size);
        images.push(ImageRecord::new(path.clone(), path.clone(), w, h, location.clone()));
        annotations.push(AnnotationRecord::new(
            format!("{path}#0"),
            path.clone(),
            ids[species.as_str()],
        ));
    }

    let dataset = Dataset::new(Info::default(), images, annotations, categories)?;
    Ok(ConvertOutcome { dataset, skipped })
}

fn has_image_extension(name: &str) -> bool {
    name.rsplit_once('.')
        .map(|(_, ext)| IMAGE_EXTENSIONS.contains(&ext.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_image_doc() -> &'static str {
        r#"{"info": {"version": "1"}, "images": [{"id": "i1", "file_name": "a.jpg", "width": 10, "height": 8, "location": "L1"}], "annotations": [], "categories": [{"id": 0, "name": "empty"}]}"#
    }

    #[test]
    fn minimal_document() {
        let d = parse_dataset(one_image_doc()).unwrap();
        assert_eq!(d.images.len(), 1);
        assert!(d.index().is_empty_labeled("i1"));
    }

    #[test]
    fn dangling_image_reference_names_id() {
        let doc = r#"{"images": [], "annotations": [{"id": "a1", "image_id": "x9", "category_id": 0}], "categories": [{"id": 0, "name": "empty"}]}"#;
        let err = parse_dataset(doc).unwrap_err();
        assert!(matches!(&err, DatasetError::DanglingReference { id, kind: RecordKind::Image, .. } if id == "x9"));
        assert!(err.to_string().contains("x9"));
    }

    #[test]
    fn dangling_category_reference() {
        let doc = r#"{"images": [{"id": "i1", "file_name": "a.jpg", "width": 1, "height": 1, "location": "L"}], "annotations": [{"id": "a1", "image_id": "i1", "category_id": 4}], "categories": []}"#;
        assert!(matches!(
            parse_dataset(doc),
            Err(DatasetError::DanglingReference { kind: RecordKind::Category, .. })
        ));
    }

    #[test]
    fn malformed_document_is_structural() {
        assert!(matches!(parse_dataset("{\"images\": ["), Err(DatasetError::Structural(_))));
        assert!(matches!(parse_dataset("[]"), Err(DatasetError::Structural(_))));
    }

    #[test]
    fn frame_num_requires_seq_id() {
        let mut img = ImageRecord::new("i", "i.jpg", 1, 1, "L");
        img.frame_num = Some(2);
        let err = Dataset::new(Info::default(), vec![img], vec![], vec![]).unwrap_err();
        assert!(matches!(err, DatasetError::InvalidField { field: "frame_num", .. }));
    }

    #[test]
    fn reserved_category_name() {
        let err = Dataset::new(Info::default(), vec![], vec![], vec![Category::new(0, "deer")]).unwrap_err();
        assert!(matches!(err, DatasetError::InvalidField { field: "name", .. }));
    }

    #[test]
    fn bad_datetime_rejected_good_forms_accepted() {
        for ok in ["2018-06-01T12:00:00Z", "2018-06-01 12:00:00", "2018-06-01T12:00:00.5"] {
            assert!(parse_timestamp(ok).is_some(), "{ok}");
        }
        let mut img = ImageRecord::new("i", "i.jpg", 1, 1, "L");
        img.datetime = Some("yesterday".into());
        assert!(Dataset::new(Info::default(), vec![img], vec![], vec![]).is_err());
    }

    #[test]
    fn unknown_fields_round_trip() {
        let doc = r#"{"licenses": [1], "info": {"year": 2019}, "images": [{"id": "i1", "file_name": "a.jpg", "width": 10, "height": 8, "location": "L1", "corrupt": false}], "annotations": [{"id": "a", "image_id": "i1", "category_id": 0, "sequence_level_annotation": true}], "categories": [{"id": 0, "name": "empty"}]}"#;
        let d = parse_dataset(doc).unwrap();
        assert_eq!(d.extra["licenses"], serde_json::json!([1]));
        assert_eq!(d.images[0].extra["corrupt"], serde_json::json!(false));
        let text = serialize_dataset(&d);
        assert!(text.contains("sequence_level_annotation"));
        assert_eq!(parse_dataset(&text).unwrap(), d);
    }

    #[test]
    fn empty_dataset_canonical_text() {
        let text = serialize_dataset(&Dataset::default());
        assert_eq!(
            text,
            "{\n  \"annotations\": [],\n  \"categories\": [],\n  \"images\": [],\n  \"info\": {}\n}\n"
        );
    }

    #[test]
    fn single_folder_file() {
        let out = convert_foldered_labels(&["deer/a.jpg"], &FolderConvention { location_segment: 0, ..Default::default() }).unwrap();
        let d = out.dataset;
        assert_eq!(d.images.len(), 1);
        assert_eq!(d.annotations.len(), 1);
        let idx = d.index();
        assert_eq!(idx.category_name(d.annotations[0].category_id), Some("deer"));
    }

    #[test]
    fn empty_folder_maps_to_reserved_id() {
        let out = convert_foldered_labels(&["empty/b.jpg"], &FolderConvention { location_segment: 0, ..Default::default() }).unwrap();
        assert_eq!(out.dataset.annotations[0].category_id, EMPTY_CATEGORY_ID);
        assert!(out.dataset.index().is_empty_labeled("empty/b.jpg"));
    }

    #[test]
    fn conversion_errors_and_skips() {
        let conv = FolderConvention::default();
        let none: [&str; 0] = [];
        assert_eq!(convert_foldered_labels(&none, &conv), Err(ConvertError::EmptyListing));
        assert!(matches!(convert_foldered_labels(&["a.jpg"], &conv), Err(ConvertError::TooShallow(_))));
        assert!(matches!(
            convert_foldered_labels(&["deer/a.jpg"], &conv),
            Err(ConvertError::NoLocationSegment { .. })
        ));
        let out = convert_foldered_labels(&["deer/site1/a.JPG", "deer/site1/notes.txt"], &conv).unwrap();
        assert_eq!(out.skipped, 1);
        assert_eq!(out.dataset.images[0].location, "site1");
    }

    #[test]
    fn dimensions_callback_used() {
        let out = convert_foldered_labels_with(&["elk/s/a.jpg"], &FolderConvention::default(), |_| Some((640, 480))).unwrap();
        assert_eq!((out.dataset.images[0].width, out.dataset.images[0].height), (640, 480));
    }
}
