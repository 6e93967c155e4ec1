//! Review queues and the verdict log.
//!
//! Reviewer decisions are stored as an append-only log of [`Verdict`]s, one
//! JSON object per line. All derived state (which images have been
//! reviewed, the final decision on each detection) is a left fold over that
//! log, so restarting a service is just replaying the file.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coco_ct::{Dataset, EMPTY_CATEGORY_NAME};
use crate::crops::{compute_crop_rect, ClassifierManifest, CropOptions, ManifestEntry, ManifestProvenance};
use crate::detection::{Detection, DetectionsFile};

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("band boundaries must be strictly ascending within [0, 1] with at least two values")]
    BadBands,
    #[error("unknown image {0:?}")]
    UnknownImage(String),
    #[error("image {image_id:?} has no detection {index}")]
    BadDetectionIndex { image_id: String, index: usize },
    #[error("species {0:?} is not a project category")]
    UnknownSpecies(String),
    #[error("verdict log line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error("verdict log i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueueOrder {
    Asc,
    #[default]
    Desc,
}

/// Confidence bands `[b0, b1), [b1, b2), ..., [bn-1, bn]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceBands {
    bounds: Vec<f64>,
}

impl ConfidenceBands {
    pub fn new(bounds: Vec<f64>) -> Result<Self, ReviewError> {
        let ok = bounds.len() >= 2
            && bounds.iter().all(|b| (0.0..=1.0).contains(b))
            && bounds.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(ConfidenceBands { bounds })
        } else {
            Err(ReviewError::BadBands)
        }
    }

    pub fn band_of(&self, conf: f64) -> Option<Band> {
        let last = self.bounds.len() - 2;
        (0..=last).find_map(|i| {
            let (lo, hi) = (self.bounds[i], self.bounds[i + 1]);
            let inside = conf >= lo && (conf < hi || (i == last && conf <= hi));
            inside.then_some(Band { index: i, lo, hi })
        })
    }
}

impl Default for ConfidenceBands {
    fn default() -> Self {
        ConfidenceBands {
            bounds: vec![0.0, 0.2, 0.5, 0.8, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub index: usize,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReviewStatus {
    #[default]
    Pending,
    Reviewed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub image_id: String,
    pub file: String,
    pub max_detection_conf: f64,
    pub detections: Vec<Detection>,
    pub band: Band,
    pub status: ReviewStatus,
}

/// Queue over every image of `results`, keyed by file name.
pub fn build_queue(
    results: &DetectionsFile,
    bands: &ConfidenceBands,
    order: QueueOrder,
) -> Vec<ReviewItem> {
    queue_with_ids(results, bands, order, |f| Some(f.to_string()))
}

/// Queue whose items carry dataset image ids. Images unknown to the dataset
/// are left out.
pub fn build_dataset_queue(
    results: &DetectionsFile,
    dataset: &Dataset,
    bands: &ConfidenceBands,
    order: QueueOrder,
) -> Vec<ReviewItem> {
    let index = dataset.index();
    queue_with_ids(results, bands, order, |f| index.image_by_file(f).map(|r| r.id.clone()))
}

fn queue_with_ids(
    results: &DetectionsFile,
    bands: &ConfidenceBands,
    order: QueueOrder,
    id_of: impl Fn(&str) -> Option<String>,
) -> Vec<ReviewItem> {
    let mut items: Vec<ReviewItem> = results
        .images()
        .iter()
        .filter_map(|img| {
            let band = bands.band_of(img.max_detection_conf())?;
            Some(ReviewItem {
                image_id: id_of(img.file())?,
                file: img.file().to_string(),
                max_detection_conf: img.max_detection_conf(),
                detections: img.detections().to_vec(),
                band,
                status: ReviewStatus::Pending,
            })
        })
        .collect();
    items.sort_by(|a, b| {
        let by_conf = a.max_detection_conf.total_cmp(&b.max_detection_conf);
        let by_conf = match order {
            QueueOrder::Asc => by_conf,
            QueueOrder::Desc => by_conf.reverse(),
        };
        by_conf.then_with(|| a.image_id.cmp(&b.image_id))
    });
    items
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "lowercase")]
pub enum Decision {
    Confirm,
    Reject,
    Relabel { species: String },
}

/// A verdict as submitted, before the log assigns its id and time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRequest {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection_index: Option<usize>,
    #[serde(flatten)]
    pub decision: Decision,
    pub reviewer: String,
}

/// Field order here is the on-disk field order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub verdict_id: u64,
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection_index: Option<usize>,
    #[serde(flatten)]
    pub decision: Decision,
    pub reviewer: String,
    pub at: String,
}

/// What a verdict may refer to.
#[derive(Debug, Clone, Default)]
pub struct ReviewContext {
    species: BTreeSet<String>,
    detection_counts: HashMap<String, usize>,
}

impl ReviewContext {
    pub fn new(results: &DetectionsFile, dataset: &Dataset) -> Self {
        let index = dataset.index();
        let detection_counts = results
            .images()
            .iter()
            .filter_map(|img| {
                index
                    .image_by_file(img.file())
                    .map(|r| (r.id.clone(), img.detections().len()))
            })
            .collect();
        ReviewContext {
            species: dataset.categories.iter().map(|c| c.name.clone()).collect(),
            detection_counts,
        }
    }

    pub fn validate(&self, req: &VerdictRequest) -> Result<(), ReviewError> {
        let count = *self
            .detection_counts
            .get(&req.image_id)
            .ok_or_else(|| ReviewError::UnknownImage(req.image_id.clone()))?;
        if let Some(i) = req.detection_index {
            if i >= count {
                return Err(ReviewError::BadDetectionIndex {
                    image_id: req.image_id.clone(),
                    index: i,
                });
            }
        }
        if let Decision::Relabel { species } = &req.decision {
            if !self.species.contains(species) {
                return Err(ReviewError::UnknownSpecies(species.clone()));
            }
        }
        Ok(())
    }
}

/// Derived review state: the latest verdict per (image, detection) target.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReviewState {
    latest: BTreeMap<(String, Option<usize>), Verdict>,
    reviewed: BTreeSet<String>,
    last_id: u64,
    applied: usize,
}

impl ReviewState {
    pub fn apply(&mut self, v: &Verdict) {
        self.reviewed.insert(v.image_id.clone());
        self.latest
            .insert((v.image_id.clone(), v.detection_index), v.clone());
        self.last_id = self.last_id.max(v.verdict_id);
        self.applied += 1;
    }

    pub fn status(&self, image_id: &str) -> ReviewStatus {
        if self.reviewed.contains(image_id) {
            ReviewStatus::Reviewed
        } else {
            ReviewStatus::Pending
        }
    }

    /// Final decision for one detection: its own latest verdict, else the
    /// latest image-level verdict.
    pub fn decision_for(&self, image_id: &str, detection_index: usize) -> Option<&Decision> {
        self.latest
            .get(&(image_id.to_string(), Some(detection_index)))
            .or_else(|| self.latest.get(&(image_id.to_string(), None)))
            .map(|v| &v.decision)
    }

    pub fn image_verdicts(&self, image_id: &str) -> Vec<&Verdict> {
        self.latest
            .range((image_id.to_string(), None)..)
            .take_while(|((id, _), _)| id == image_id)
            .map(|(_, v)| v)
            .collect()
    }

    pub fn last_id(&self) -> u64 {
        self.last_id
    }

    pub fn verdicts_applied(&self) -> usize {
        self.applied
    }

    pub fn reviewed_count(&self) -> usize {
        self.reviewed.len()
    }

    pub fn mark(&self, items: &mut [ReviewItem]) {
        for item in items {
            item.status = self.status(&item.image_id);
        }
    }
}

/// In-memory verdict log.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VerdictLog {
    verdicts: Vec<Verdict>,
}

impl VerdictLog {
    pub fn verdicts(&self) -> &[Verdict] {
        &self.verdicts
    }

    pub fn len(&self) -> usize {
        self.verdicts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.verdicts.is_empty()
    }

    pub fn fold(&self) -> ReviewState {
        let mut state = ReviewState::default();
        for v in &self.verdicts {
            state.apply(v);
        }
        state
    }

    fn next_id(&self) -> u64 {
        self.verdicts.last().map_or(1, |v| v.verdict_id + 1)
    }

    /// Validate and append. On error the log is unchanged.
    pub fn record(
        &mut self,
        ctx: &ReviewContext,
        req: VerdictRequest,
        at: impl Into<String>,
    ) -> Result<&Verdict, ReviewError> {
        ctx.validate(&req)?;
        let v = stamp(req, self.next_id(), at.into());
        self.verdicts.push(v);
        Ok(self.verdicts.last().expect("just pushed"))
    }

    fn push_replayed(&mut self, v: Verdict, line: usize) -> Result<(), ReviewError> {
        if v.verdict_id < self.next_id() {
            return Err(ReviewError::CorruptLog {
                line,
                reason: format!("verdict id {} is not increasing", v.verdict_id),
            });
        }
        self.verdicts.push(v);
        Ok(())
    }
}

fn stamp(req: VerdictRequest, verdict_id: u64, at: String) -> Verdict {
    Verdict {
        verdict_id,
        image_id: req.image_id,
        detection_index: req.detection_index,
        decision: req.decision,
        reviewer: req.reviewer,
        at,
    }
}

pub fn verdict_line(v: &Verdict) -> String {
    serde_json::to_string(v).expect("verdicts are always representable")
}

/// Read a verdict log. A final line without its terminating newline is an
/// interrupted append and is ignored; any other unreadable line is an error.
/// Returns the log and the byte length of its intact prefix.
pub fn replay(path: &Path) -> Result<(VerdictLog, u64), ReviewError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok((VerdictLog::default(), 0)),
        Err(e) => return Err(e.into()),
    };
    let mut reader = BufReader::new(file);
    let mut log = VerdictLog::default();
    let mut good = 0u64;
    let mut buf = String::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if !buf.ends_with('\n') {
            log::warn!("ignoring torn trailing verdict record at line {line_no}");
            break;
        }
        let v: Verdict = serde_json::from_str(buf.trim_end()).map_err(|e| ReviewError::CorruptLog {
            line: line_no,
            reason: e.to_string(),
        })?;
        log.push_replayed(v, line_no)?;
        good += n as u64;
    }
    Ok((log, good))
}

/// File-backed verdict log with incrementally maintained state.
///
/// `record` returns only after the line has been written and synced, so an
/// acknowledged verdict survives a crash.
pub struct VerdictStore {
    path: PathBuf,
    file: File,
    log: VerdictLog,
    state: ReviewState,
}

impl VerdictStore {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, ReviewError> {
        let path = path.into();
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let (log, good) = replay(&path)?;
        let mut file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .read(true)
            .write(true)
            .open(&path)?;
        // Drop a torn tail so new records start on a fresh line.
        if file.metadata()?.len() != good {
            file.set_len(good)?;
            file.sync_all()?;
        }
        file.seek(SeekFrom::End(0))?;
        let state = log.fold();
        Ok(VerdictStore {
            path,
            file,
            log,
            state,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn log(&self) -> &VerdictLog {
        &self.log
    }

    pub fn state(&self) -> &ReviewState {
        &self.state
    }

    pub fn record(&mut self, ctx: &ReviewContext, req: VerdictRequest) -> Result<Verdict, ReviewError> {
        let at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
        self.record_at(ctx, req, at)
    }

    pub fn record_at(
        &mut self,
        ctx: &ReviewContext,
        req: VerdictRequest,
        at: String,
    ) -> Result<Verdict, ReviewError> {
        ctx.validate(&req)?;
        let v = stamp(req, self.log.next_id(), at);
        let mut line = verdict_line(&v);
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        self.file.sync_data()?;
        self.state.apply(&v);
        self.log.verdicts.push(v.clone());
        Ok(v)
    }
}

/// Manifest of crops whose final reviewed decision is confirm or relabel.
/// A relabel replaces the image-level species.
pub fn export_verified(
    state: &ReviewState,
    results: &DetectionsFile,
    dataset: &Dataset,
    opts: &CropOptions,
) -> ClassifierManifest {
    let index = dataset.index();
    let mut provenance = ManifestProvenance {
        detector: results.info.clone(),
        conf_threshold: opts.conf_threshold,
        padding_scale: opts.padding_scale,
        square: opts.square,
        source: Some("verified".to_string()),
        ..Default::default()
    };
    let mut entries = Vec::new();
    for img in results.images() {
        let Some(record) = index.image_by_file(img.file()) else {
            continue;
        };
        let labels = index.species(&record.id);
        for (i, det) in img.detections().iter().enumerate() {
            if det.conf < opts.conf_threshold {
                continue;
            }
            let species = match state.decision_for(&record.id, i) {
                Some(Decision::Relabel { species }) => species.clone(),
                Some(Decision::Confirm) => match labels.len() {
                    1 => labels.first().expect("one label").to_string(),
                    0 => {
                        provenance.skipped_unlabeled += 1;
                        continue;
                    }
                    _ => {
                        provenance.skipped_multi_species += 1;
                        continue;
                    }
                },
                Some(Decision::Reject) | None => continue,
            };
            if species == EMPTY_CATEGORY_NAME {
                continue;
            }
            let Ok(crop) = compute_crop_rect(
                &det.bbox,
                record.width,
                record.height,
                opts.padding_scale,
                opts.square,
            ) else {
                continue;
            };
            entries.push(ManifestEntry {
                image_id: record.id.clone(),
                file: img.file().to_string(),
                detection_index: i,
                crop,
                species,
                source_conf: det.conf,
            });
        }
    }
    ClassifierManifest {
        provenance,
        entries,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coco_ct::{AnnotationRecord, Category, ImageRecord, Info};
    use crate::detection::{default_categories, BBox, DetectorInfo, ImageDetections};

    fn results(confs: &[(&str, &[f64])]) -> DetectionsFile {
        let images = confs
            .iter()
            .map(|(f, cs)| {
                ImageDetections::new(
                    *f,
                    cs.iter().map(|c| Detection::animal(*c, BBox::new(0.1, 0.1, 0.3, 0.3).unwrap()).unwrap()).collect(),
                )
            })
            .collect();
        DetectionsFile::new(DetectorInfo::named("stub", "1"), default_categories(), images).unwrap()
    }

    fn fixture() -> (Dataset, DetectionsFile) {
        let ds = Dataset::new(
            Info::default(),
            vec![ImageRecord::new("d1", "d1.jpg", 100, 100, "L"), ImageRecord::new("d2", "d2.jpg", 100, 100, "L")],
            vec![AnnotationRecord::new("a", "d1", 1), AnnotationRecord::new("b", "d2", 1)],
            vec![Category::empty(), Category::new(1, "deer"), Category::new(2, "elk")],
        )
        .unwrap();
        (ds, results(&[("d1.jpg", &[0.9, 0.4]), ("d2.jpg", &[0.7])]))
    }

    fn req(image: &str, idx: Option<usize>, decision: Decision) -> VerdictRequest {
        VerdictRequest { image_id: image.into(), detection_index: idx, decision, reviewer: "r".into() }
    }

    #[test]
    fn half_open_bands() {
        let bands = ConfidenceBands::new(vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(bands.band_of(0.5).unwrap().index, 1);
        assert_eq!(bands.band_of(0.49).unwrap().index, 0);
        assert_eq!(bands.band_of(1.0).unwrap().index, 1);
        assert!(ConfidenceBands::new(vec![0.5, 0.2]).is_err());
        assert!(ConfidenceBands::new(vec![0.5]).is_err());
        let partial = ConfidenceBands::new(vec![0.2, 0.6]).unwrap();
        assert!(partial.band_of(0.1).is_none());
    }

    #[test]
    fn queue_order_and_ties() {
        let r = results(&[("b.jpg", &[0.5]), ("a.jpg", &[0.5]), ("c.jpg", &[0.9]), ("e.jpg", &[])]);
        let q = build_queue(&r, &ConfidenceBands::default(), QueueOrder::Desc);
        let files: Vec<&str> = q.iter().map(|i| i.file.as_str()).collect();
        assert_eq!(files, ["c.jpg", "a.jpg", "b.jpg", "e.jpg"]);
        let q = build_queue(&r, &ConfidenceBands::default(), QueueOrder::Asc);
        let files: Vec<&str> = q.iter().map(|i| i.file.as_str()).collect();
        assert_eq!(files, ["e.jpg", "a.jpg", "b.jpg", "c.jpg"]);
    }

    #[test]
    fn confirm_marks_reviewed() {
        let (ds, res) = fixture();
        let ctx = ReviewContext::new(&res, &ds);
        let mut log = VerdictLog::default();
        log.record(&ctx, req("d1", Some(0), Decision::Confirm), "t").unwrap();
        let state = log.fold();
        assert_eq!(state.status("d1"), ReviewStatus::Reviewed);
        assert_eq!(state.status("d2"), ReviewStatus::Pending);
        let mut q = build_dataset_queue(&res, &ds, &ConfidenceBands::default(), QueueOrder::Desc);
        state.mark(&mut q);
        assert_eq!(q[0].status, ReviewStatus::Reviewed);
    }

    #[test]
    fn last_verdict_wins() {
        let (ds, res) = fixture();
        let ctx = ReviewContext::new(&res, &ds);
        let mut log = VerdictLog::default();
        log.record(&ctx, req("d1", Some(0), Decision::Reject), "t1").unwrap();
        log.record(&ctx, req("d1", Some(0), Decision::Relabel { species: "elk".into() }), "t2").unwrap();
        assert_eq!(
            log.fold().decision_for("d1", 0),
            Some(&Decision::Relabel { species: "elk".into() })
        );
        assert_eq!(log.verdicts()[1].verdict_id, 2);
    }

    #[test]
    fn invalid_verdicts_leave_log_unchanged() {
        let (ds, res) = fixture();
        let ctx = ReviewContext::new(&res, &ds);
        let mut log = VerdictLog::default();
        assert!(matches!(
            log.record(&ctx, req("d1", None, Decision::Relabel { species: "unicorn".into() }), "t"),
            Err(ReviewError::UnknownSpecies(_))
        ));
        assert!(matches!(
            log.record(&ctx, req("d1", Some(5), Decision::Confirm), "t"),
            Err(ReviewError::BadDetectionIndex { index: 5, .. })
        ));
        assert!(matches!(log.record(&ctx, req("zz", None, Decision::Confirm), "t"), Err(ReviewError::UnknownImage(_))));
        assert!(log.is_empty());
    }

    #[test]
    fn line_format() {
        let v = stamp(req("d1", Some(0), Decision::Relabel { species: "elk".into() }), 3, "2024-01-01T00:00:00Z".into());
        assert_eq!(
            verdict_line(&v),
            r#"{"verdict_id":3,"image_id":"d1","detection_index":0,"decision":"relabel","species":"elk","reviewer":"r","at":"2024-01-01T00:00:00Z"}"#
        );
        let back: Verdict = serde_json::from_str(&verdict_line(&v)).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn store_survives_reopen_and_torn_tail() {
        let (ds, res) = fixture();
        let ctx = ReviewContext::new(&res, &ds);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("verdicts.log");
        {
            let mut store = VerdictStore::open(&path).unwrap();
            store.record(&ctx, req("d1", Some(0), Decision::Confirm)).unwrap();
            store.record(&ctx, req("d2", None, Decision::Reject)).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(br#"{"verdict_id":3,"image_id":"d1""#).unwrap();
        drop(f);

        let mut store = VerdictStore::open(&path).unwrap();
        assert_eq!(store.log().len(), 2);
        let v = store.record(&ctx, req("d1", Some(1), Decision::Reject)).unwrap();
        assert_eq!(v.verdict_id, 3);
        let (log, _) = replay(&path).unwrap();
        assert_eq!(log.fold(), *store.state());
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.log");
        std::fs::write(&path, "not json\n").unwrap();
        assert!(matches!(replay(&path), Err(ReviewError::CorruptLog { line: 1, .. })));
    }

    #[test]
    fn export_rules() {
        let (ds, res) = fixture();
        let ctx = ReviewContext::new(&res, &ds);
        let opts = CropOptions { conf_threshold: 0.0, ..Default::default() };
        assert!(export_verified(&ReviewState::default(), &res, &ds, &opts).entries.is_empty());

        let mut log = VerdictLog::default();
        log.record(&ctx, req("d1", Some(0), Decision::Confirm), "t").unwrap();
        let m = export_verified(&log.fold(), &res, &ds, &opts);
        assert_eq!(m.entries.len(), 1);
        assert_eq!(m.entries[0].species, "deer");

        log.record(&ctx, req("d1", Some(0), Decision::Relabel { species: "elk".into() }), "t").unwrap();
        log.record(&ctx, req("d2", None, Decision::Reject), "t").unwrap();
        let m = export_verified(&log.fold(), &res, &ds, &opts);
        assert_eq!(m.entries.len(), 1);
        assert_eq!(m.entries[0].species, "elk");
    }

    #[test]
    fn image_level_verdict_covers_detections() {
        let (ds, res) = fixture();
        let ctx = ReviewContext::new(&res, &ds);
        let mut log = VerdictLog::default();
        log.record(&ctx, req("d1", None, Decision::Confirm), "t").unwrap();
        log.record(&ctx, req("d1", Some(1), Decision::Reject), "t").unwrap();
        let state = log.fold();
        assert_eq!(state.decision_for("d1", 0), Some(&Decision::Confirm));
        assert_eq!(state.decision_for("d1", 1), Some(&Decision::Reject));
        assert_eq!(state.image_verdicts("d1").len(), 2);
        let opts = CropOptions { conf_threshold: 0.5, ..Default::default() };
        assert_eq!(export_verified(&state, &res, &ds, &opts).entries.len(), 1);
    }
}
