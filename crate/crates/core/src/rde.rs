//! Repeat-detection elimination.
//!
//! Rocks, branches and similar static objects are often detected as animals
//! in frame after frame at the same camera. Such detections pile up at nearly
//! the same normalized position, which is what this module looks for:
//! detections are grouped per location and clustered greedily against
//! cluster representatives, and clusters spanning many images are reported
//! as suspicious. Suppression then removes them, except for clusters a
//! reviewer has allowlisted.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical;
use crate::coco_ct::{Dataset, ImageRecord};
use crate::detection::{iou, BBox, DetectionsFile, ImageDetections};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RdeError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("results file {0:?} is not in the dataset")]
    UnresolvedFile(String),
    #[error("cluster {cluster_id:?} member {file:?}#{index} does not match the results")]
    StaleRef {
        cluster_id: String,
        file: String,
        index: usize,
    },
    #[error("malformed cluster document: {0}")]
    Structural(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdeConfig {
    pub iou_threshold: f64,
    pub min_count: usize,
    pub min_conf: f64,
    pub require_consecutive: bool,
}

impl Default for RdeConfig {
    fn default() -> Self {
        RdeConfig {
            iou_threshold: 0.85,
            min_count: 10,
            min_conf: 0.1,
            require_consecutive: false,
        }
    }
}

impl RdeConfig {
    pub fn validate(&self) -> Result<(), RdeError> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(RdeError::InvalidConfig(format!(
                "iou threshold {} outside (0, 1]",
                self.iou_threshold
            )));
        }
        if self.min_count < 2 {
            return Err(RdeError::InvalidConfig(format!(
                "min count {} below 2",
                self.min_count
            )));
        }
        if !(0.0..=1.0).contains(&self.min_conf) {
            return Err(RdeError::InvalidConfig(format!(
                "min confidence {} outside [0, 1]",
                self.min_conf
            )));
        }
        Ok(())
    }
}

/// A detection inside a cluster. Confidence and box are recorded so a stale
/// reference can be told apart from a valid one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRef {
    pub file: String,
    pub detection_index: usize,
    pub conf: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuspiciousCluster {
    pub cluster_id: String,
    pub location: String,
    pub representative_bbox: BBox,
    pub members: Vec<MemberRef>,
    pub distinct_image_count: usize,
    /// Member images form one unbroken run in the location's frame order.
    pub consecutive: bool,
}

/// Document written by the `rde` command and read by the review service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterList {
    pub config: RdeConfig,
    pub clusters: Vec<SuspiciousCluster>,
}

pub fn serialize_clusters(list: &ClusterList) -> String {
    canonical::to_canonical_string(list).expect("clusters are always representable")
}

pub fn parse_clusters(text: &str) -> Result<ClusterList, RdeError> {
    serde_json::from_str(text).map_err(|e| RdeError::Structural(e.to_string()))
}

const GRID: usize = 16;

fn cell_span(lo: f64, len: f64) -> (usize, usize) {
    let to_cell = |v: f64| ((v * GRID as f64).floor().max(0.0) as usize).min(GRID - 1);
    (to_cell(lo), to_cell(lo + len.max(0.0)))
}

/// Uniform grid over the unit square holding the indices of cluster
/// representatives touching each cell. Two boxes with a positive-area
/// intersection always share a cell.
struct RepGrid {
    cells: Vec<Vec<usize>>,
}

impl RepGrid {
    fn new() -> Self {
        RepGrid {
            cells: vec![Vec::new(); GRID * GRID],
        }
    }

    fn for_cells(b: &BBox, mut f: impl FnMut(usize)) {
        let (x0, x1) = cell_span(b.x, b.w);
        let (y0, y1) = cell_span(b.y, b.h);
        for cy in y0..=y1 {
            for cx in x0..=x1 {
                f(cy * GRID + cx);
            }
        }
    }

    fn insert(&mut self, b: &BBox, cluster: usize) {
        Self::for_cells(b, |c| self.cells[c].push(cluster));
    }

    fn candidates(&self, b: &BBox, out: &mut Vec<usize>) {
        out.clear();
        Self::for_cells(b, |c| out.extend_from_slice(&self.cells[c]));
        out.sort_unstable();
        out.dedup();
    }
}

struct OpenCluster {
    rep: BBox,
    members: Vec<(usize, usize)>,
}

fn location_tag(location: &str) -> String {
    let clean: String = location
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    let hash = canonical::sha256_hex(location.as_bytes());
    format!("{clean}-{}", &hash[..6])
}

/// Frame order of a location's images: capture time when every image has
/// one, file name otherwise.
fn frame_order(images: &[(&ImageDetections, &ImageRecord)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..images.len()).collect();
    let times: Option<Vec<_>> = images.iter().map(|(_, r)| r.capture_time()).collect();
    match times {
        Some(t) => order.sort_by(|&a, &b| (t[a], images[a].0.file()).cmp(&(t[b], images[b].0.file()))),
        None => order.sort_by(|&a, &b| images[a].0.file().cmp(images[b].0.file())),
    }
    order
}

/// Find groups of near-identical boxes that recur across many images at the
/// same location.
pub fn find_suspicious_clusters(
    results: &DetectionsFile,
    dataset: &Dataset,
    config: &RdeConfig,
) -> Result<Vec<SuspiciousCluster>, RdeError> {
    config.validate()?;
    let index = dataset.index();
    let mut by_location: BTreeMap<&str, Vec<(&ImageDetections, &ImageRecord)>> = BTreeMap::new();
    for img in results.images() {
        let record = index
            .image_by_file(img.file())
            .ok_or_else(|| RdeError::UnresolvedFile(img.file().to_string()))?;
        by_location.entry(record.location.as_str()).or_default().push((img, record));
    }

    let mut found = Vec::new();
    let mut candidates = Vec::new();
    for (location, images) in by_location {
        // `images` is in file order because results are.
        let mut clusters: Vec<OpenCluster> = Vec::new();
        let mut grid = RepGrid::new();
        for (img_pos, (img, _)) in images.iter().enumerate() {
            for (det_idx, det) in img.detections().iter().enumerate() {
                if det.conf < config.min_conf {
                    continue;
                }
                grid.candidates(&det.bbox, &mut candidates);
                let hit = candidates
                    .iter()
                    .copied()
                    .find(|&c| iou(&clusters[c].rep, &det.bbox) >= config.iou_threshold);
                match hit {
                    Some(c) => clusters[c].members.push((img_pos, det_idx)),
                    None => {
                        grid.insert(&det.bbox, clusters.len());
                        clusters.push(OpenCluster {
                            rep: det.bbox,
                            members: vec![(img_pos, det_idx)],
                        });
                    }
                }
            }
        }

        let order = frame_order(&images);
        let mut rank = vec![0; images.len()];
        for (r, &i) in order.iter().enumerate() {
            rank[i] = r;
        }
        let tag = location_tag(location);
        for (n, cluster) in clusters.into_iter().enumerate() {
            let distinct: BTreeSet<usize> = cluster.members.iter().map(|&(i, _)| i).collect();
            if distinct.len() < config.min_count {
                continue;
            }
            let ranks: BTreeSet<usize> = distinct.iter().map(|&i| rank[i]).collect();
            let consecutive = match (ranks.first(), ranks.last()) {
                (Some(lo), Some(hi)) => hi - lo + 1 == ranks.len(),
                _ => false,
            };
            if config.require_consecutive && !consecutive {
                continue;
            }
            let members = cluster
                .members
                .iter()
                .map(|&(i, d)| {
                    let det = &images[i].0.detections()[d];
                    MemberRef {
                        file: images[i].0.file().to_string(),
                        detection_index: d,
                        conf: det.conf,
                        bbox: det.bbox,
                    }
                })
                .collect();
            found.push(SuspiciousCluster {
                cluster_id: format!("{tag}-{n:05}"),
                location: location.to_string(),
                representative_bbox: cluster.rep,
                members,
                distinct_image_count: distinct.len(),
                consecutive,
            });
        }
    }
    Ok(found)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SuppressionReport {
    pub clusters_applied: usize,
    pub clusters_allowlisted: usize,
    /// Clusters recorded as already suppressed in the input.
    pub clusters_already_applied: usize,
    pub suppressed_detections: usize,
    pub affected_images: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuppressionOutcome {
    pub results: DetectionsFile,
    /// The removed detections, per image, for audit.
    pub suppressed: DetectionsFile,
    pub report: SuppressionReport,
}

/// Allowlist file: one cluster id per line, `#` comments and blank lines
/// ignored.
pub fn parse_allowlist(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

pub fn render_allowlist(ids: &BTreeSet<String>) -> String {
    ids.iter().map(|id| format!("{id}\n")).collect()
}

/// Remove every detection belonging to a cluster that is not allowlisted.
///
/// Applied cluster ids are recorded in the output's info block and skipped
/// on later calls, so applying the same clusters twice is a no-op the
/// second time.
pub fn apply_suppression(
    results: &DetectionsFile,
    clusters: &[SuspiciousCluster],
    allowlist: &BTreeSet<String>,
) -> Result<SuppressionOutcome, RdeError> {
    let already: BTreeSet<String> = results
        .info
        .suppressed_clusters
        .iter()
        .flatten()
        .cloned()
        .collect();
    let mut report = SuppressionReport::default();
    let mut removals: HashMap<&str, BTreeSet<usize>> = HashMap::new();
    let mut applied = already.clone();

    for cluster in clusters {
        if allowlist.contains(&cluster.cluster_id) {
            report.clusters_allowlisted += 1;
            continue;
        }
        if already.contains(&cluster.cluster_id) {
            report.clusters_already_applied += 1;
            continue;
        }
        for m in &cluster.members {
            let stale = || RdeError::StaleRef {
                cluster_id: cluster.cluster_id.clone(),
                file: m.file.clone(),
                index: m.detection_index,
            };
            let img = results.get(&m.file).ok_or_else(stale)?;
            let det = img.detections().get(m.detection_index).ok_or_else(stale)?;
            if det.conf != m.conf || det.bbox != m.bbox {
                return Err(stale());
            }
            removals.entry(img.file()).or_default().insert(m.detection_index);
        }
        report.clusters_applied += 1;
        applied.insert(cluster.cluster_id.clone());
    }

    let mut kept_images = Vec::with_capacity(results.images().len());
    let mut removed_images = Vec::new();
    for img in results.images() {
        match removals.get(img.file()) {
            None => kept_images.push(img.clone()),
            Some(drop) => {
                let (mut keep, mut gone) = (Vec::new(), Vec::new());
                for (i, det) in img.detections().iter().enumerate() {
                    if drop.contains(&i) {
                        gone.push(det.clone());
                    } else {
                        keep.push(det.clone());
                    }
                }
                report.suppressed_detections += gone.len();
                report.affected_images += 1;
                kept_images.push(ImageDetections::new(img.file(), keep));
                removed_images.push(ImageDetections::new(img.file(), gone));
            }
        }
    }

    let mut out = results.with_images(kept_images);
    if applied.len() > already.len() {
        out.info.suppressed_clusters = Some(applied.into_iter().collect());
    }
    let suppressed = results.with_images(removed_images);
    Ok(SuppressionOutcome {
        results: out,
        suppressed,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coco_ct::Info;
    use crate::detection::{default_categories, Detection, DetectorInfo};

    fn dataset(files: &[(&str, &str)]) -> Dataset {
        let images = files
            .iter()
            .map(|(f, loc)| ImageRecord::new(*f, *f, 100, 100, *loc))
            .collect();
        Dataset::new(Info::default(), images, vec![], vec![]).unwrap()
    }

    fn results(rows: Vec<(String, Vec<BBox>)>) -> DetectionsFile {
        let images = rows
            .into_iter()
            .map(|(f, boxes)| {
                ImageDetections::new(f, boxes.into_iter().map(|b| Detection::animal(0.8, b).unwrap()).collect())
            })
            .collect();
        DetectionsFile::new(DetectorInfo::default(), default_categories(), images).unwrap()
    }

    fn static_box() -> BBox {
        BBox::new(0.3, 0.4, 0.1, 0.1).unwrap()
    }

    #[test]
    fn planted_box_forms_one_cluster() {
        let files: Vec<String> = (0..20).map(|i| format!("L1/{i:02}.jpg")).collect();
        let ds = dataset(&files.iter().map(|f| (f.as_str(), "L1")).collect::<Vec<_>>());
        let res = results(files.iter().map(|f| (f.clone(), vec![static_box()])).collect());
        let clusters = find_suspicious_clusters(&res, &ds, &RdeConfig::default()).unwrap();
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].members.len(), 20);
        assert_eq!(clusters[0].distinct_image_count, 20);
        assert!(clusters[0].consecutive);
    }

    #[test]
    fn locations_never_mix() {
        let files: Vec<(String, &str)> = (0..40)
            .map(|i| (format!("{i:02}.jpg"), if i % 2 == 0 { "A" } else { "B" }))
            .collect();
        let ds = dataset(&files.iter().map(|(f, l)| (f.as_str(), *l)).collect::<Vec<_>>());
        let res = results(files.iter().map(|(f, _)| (f.clone(), vec![static_box()])).collect());
        let cfg = RdeConfig { min_count: 25, ..Default::default() };
        assert!(find_suspicious_clusters(&res, &ds, &cfg).unwrap().is_empty());
        let cfg = RdeConfig { min_count: 20, ..Default::default() };
        assert_eq!(find_suspicious_clusters(&res, &ds, &cfg).unwrap().len(), 2);
    }

    #[test]
    fn drifting_box_is_not_static() {
        // Consecutive frames shifted by 0.05 with w = 0.1: IoU = 0.05/0.15 = 1/3.
        let a = BBox::new(0.0, 0.5, 0.1, 0.1).unwrap();
        let b = BBox::new(0.05, 0.5, 0.1, 0.1).unwrap();
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        let files: Vec<String> = (0..18).map(|i| format!("{i:02}.jpg")).collect();
        let ds = dataset(&files.iter().map(|f| (f.as_str(), "L")).collect::<Vec<_>>());
        let res = results(
            files
                .iter()
                .enumerate()
                .map(|(i, f)| (f.clone(), vec![BBox::new(0.05 * i as f64, 0.5, 0.1, 0.1).unwrap()]))
                .collect(),
        );
        assert!(find_suspicious_clusters(&res, &ds, &RdeConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn low_confidence_ignored() {
        let files: Vec<String> = (0..12).map(|i| format!("{i:02}.jpg")).collect();
        let ds = dataset(&files.iter().map(|f| (f.as_str(), "L")).collect::<Vec<_>>());
        let images = files
            .iter()
            .map(|f| ImageDetections::new(f.clone(), vec![Detection::animal(0.05, static_box()).unwrap()]))
            .collect();
        let res = DetectionsFile::new(DetectorInfo::default(), default_categories(), images).unwrap();
        assert!(find_suspicious_clusters(&res, &ds, &RdeConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn consecutive_requirement() {
        // Static box in frames 0..10 and 15..20, a gap in between.
        let files: Vec<String> = (0..20).map(|i| format!("{i:02}.jpg")).collect();
        let ds = dataset(&files.iter().map(|f| (f.as_str(), "L")).collect::<Vec<_>>());
        let res = results(
            files
                .iter()
                .enumerate()
                .map(|(i, f)| (f.clone(), if (10..15).contains(&i) { vec![] } else { vec![static_box()] }))
                .collect(),
        );
        let loose = find_suspicious_clusters(&res, &ds, &RdeConfig::default()).unwrap();
        assert_eq!(loose.len(), 1);
        assert!(!loose[0].consecutive);
        let strict = RdeConfig { require_consecutive: true, ..Default::default() };
        assert!(find_suspicious_clusters(&res, &ds, &strict).unwrap().is_empty());
    }

    #[test]
    fn datetime_orders_frames() {
        // File names interleave two bursts; timestamps put them back in order.
        let mut images = Vec::new();
        for i in 0..12 {
            let mut r = ImageRecord::new(format!("{i:02}.jpg"), format!("{i:02}.jpg"), 10, 10, "L");
            let minute = if i % 2 == 0 { i / 2 } else { 30 + i / 2 };
            r.datetime = Some(format!("2019-05-01 10:{minute:02}:00"));
            images.push(r);
        }
        let ds = Dataset::new(Info::default(), images, vec![], vec![]).unwrap();
        let res = results(
            (0..12)
                .map(|i| (format!("{i:02}.jpg"), if i % 2 == 0 { vec![static_box()] } else { vec![] }))
                .collect(),
        );
        let cfg = RdeConfig { min_count: 6, require_consecutive: true, ..Default::default() };
        assert_eq!(find_suspicious_clusters(&res, &ds, &cfg).unwrap().len(), 1);
    }

    #[test]
    fn unresolvable_file() {
        let ds = dataset(&[("a.jpg", "L")]);
        let res = results(vec![("b.jpg".into(), vec![])]);
        assert_eq!(
            find_suspicious_clusters(&res, &ds, &RdeConfig::default()),
            Err(RdeError::UnresolvedFile("b.jpg".into()))
        );
    }

    #[test]
    fn config_validation() {
        for bad in [
            RdeConfig { iou_threshold: 0.0, ..Default::default() },
            RdeConfig { iou_threshold: 1.1, ..Default::default() },
            RdeConfig { min_count: 1, ..Default::default() },
            RdeConfig { min_conf: 2.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    fn fixture() -> (DetectionsFile, Vec<SuspiciousCluster>) {
        let files: Vec<String> = (0..20).map(|i| format!("{i:02}.jpg")).collect();
        let ds = dataset(&files.iter().map(|f| (f.as_str(), "L")).collect::<Vec<_>>());
        let animal = |i: usize| Detection::new(1, 0.6, BBox::new(0.6, 0.05 * (i % 10) as f64, 0.1, 0.1).unwrap()).unwrap();
        let images = files
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let mut dets = vec![Detection::animal(0.9, static_box()).unwrap()];
                if i % 3 == 0 {
                    dets.push(animal(i));
                }
                ImageDetections::new(f.clone(), dets)
            })
            .collect();
        let res = DetectionsFile::new(DetectorInfo::default(), default_categories(), images).unwrap();
        let clusters = find_suspicious_clusters(&res, &ds, &RdeConfig::default()).unwrap();
        (res, clusters)
    }

    #[test]
    fn suppression_recomputes_maxima() {
        let (res, clusters) = fixture();
        assert_eq!(clusters.len(), 1);
        let out = apply_suppression(&res, &clusters, &BTreeSet::new()).unwrap();
        assert_eq!(out.report.suppressed_detections, 20);
        assert_eq!(out.report.affected_images, 20);
        for (i, img) in out.results.images().iter().enumerate() {
            let expected = if i % 3 == 0 { 0.6 } else { 0.0 };
            assert_eq!(img.max_detection_conf(), expected);
        }
        assert_eq!(out.suppressed.detection_count(), 20);
    }

    #[test]
    fn empty_cluster_list_is_identity() {
        let (res, _) = fixture();
        let out = apply_suppression(&res, &[], &BTreeSet::new()).unwrap();
        assert_eq!(out.results, res);
        assert_eq!(out.suppressed.images().len(), 0);
    }

    #[test]
    fn allowlist_file_round_trip() {
        let ids = parse_allowlist("# reviewed\nb-1\n\n  a-2  \nb-1\n");
        assert_eq!(ids.iter().map(String::as_str).collect::<Vec<_>>(), ["a-2", "b-1"]);
        assert_eq!(parse_allowlist(&render_allowlist(&ids)), ids);
    }

    #[test]
    fn allowlisted_cluster_untouched() {
        let (res, clusters) = fixture();
        let allow = BTreeSet::from([clusters[0].cluster_id.clone()]);
        let out = apply_suppression(&res, &clusters, &allow).unwrap();
        assert_eq!(out.results, res);
        assert_eq!(out.report.clusters_allowlisted, 1);
    }

    #[test]
    fn suppression_is_idempotent() {
        let (res, clusters) = fixture();
        let once = apply_suppression(&res, &clusters, &BTreeSet::new()).unwrap().results;
        let twice = apply_suppression(&once, &clusters, &BTreeSet::new()).unwrap();
        assert_eq!(twice.results, once);
        assert_eq!(twice.report.clusters_already_applied, 1);
        assert_eq!(twice.report.suppressed_detections, 0);
    }

    #[test]
    fn stale_reference_rejected() {
        let (res, mut clusters) = fixture();
        clusters[0].members[0].detection_index = 7;
        assert!(matches!(
            apply_suppression(&res, &clusters, &BTreeSet::new()),
            Err(RdeError::StaleRef { index: 7, .. })
        ));
    }

    #[test]
    fn cluster_document_round_trip() {
        let (_, clusters) = fixture();
        let list = ClusterList { config: RdeConfig::default(), clusters };
        assert_eq!(parse_clusters(&serialize_clusters(&list)).unwrap(), list);
    }
}
