//! Synthetic corpora shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use camtrap_core::coco_ct::{AnnotationRecord, Category, Dataset, ImageRecord, Info};
use camtrap_core::detection::{default_categories, BBox, Detection, DetectionsFile, DetectorInfo, ImageDetections};
use camtrap_core::evaluation::ScoredImage;

pub const SPECIES: [&str; 3] = ["deer", "elk", "moose"];

/// `n` images spread round-robin over `locations`; exactly
/// `round(n * empty_fraction)` are empty-labeled, scattered through the
/// corpus by a fixed stride permutation. Labeled images get one species.
pub fn synthetic_dataset(n: usize, empty_fraction: f64, locations: &[&str]) -> Dataset {
    let n_empty = (n as f64 * empty_fraction).round() as usize;
    let stride = coprime_stride(n);
    let mut images = Vec::with_capacity(n);
    let mut annotations = Vec::with_capacity(n);
    for i in 0..n {
        let loc = locations[i % locations.len()];
        let id = format!("img{i:06}");
        images.push(ImageRecord::new(id.clone(), format!("{loc}/{id}.jpg"), 1920, 1080, loc));
        let empty = n > 0 && (i * stride) % n < n_empty;
        let cat = if empty { 0 } else { 1 + (i % SPECIES.len()) as u32 };
        annotations.push(AnnotationRecord::new(format!("ann{i:06}"), id, cat));
    }
    let mut categories = vec![Category::empty()];
    categories.extend(SPECIES.iter().enumerate().map(|(i, s)| Category::new(i as u32 + 1, *s)));
    Dataset::new(Info::default(), images, annotations, categories).unwrap()
}

fn coprime_stride(n: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 { a } else { gcd(b, a % b) }
    }
    [7919, 104_729, 1_299_709]
        .into_iter()
        .find(|&p| n == 0 || gcd(p, n) == 1)
        .unwrap_or(1)
}

pub fn locations(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("site{i:02}")).collect()
}

pub fn as_strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

/// Each location maps to region `R<location index mod regions>`.
pub fn region_map(locations: &[String], regions: usize) -> BTreeMap<String, String> {
    locations
        .iter()
        .enumerate()
        .map(|(i, l)| (l.clone(), format!("R{}", i % regions)))
        .collect()
}

pub fn detections_file(images: Vec<ImageDetections>) -> DetectionsFile {
    DetectionsFile::new(DetectorInfo::named("fixture", "1"), default_categories(), images).unwrap()
}

pub fn animal(conf: f64, x: f64, y: f64, w: f64, h: f64) -> Detection {
    Detection::animal(conf, BBox::new(x, y, w, h).unwrap()).unwrap()
}

/// Independent AP reference: insertion sort by (score desc, id asc), then
/// precision at k recounted from scratch for every positive rank.
pub fn brute_force_ap(scored: &[ScoredImage]) -> Option<f64> {
    let mut ranked: Vec<&ScoredImage> = Vec::new();
    for s in scored {
        let pos = ranked
            .iter()
            .position(|r| s.score > r.score || (s.score == r.score && s.image_id < r.image_id))
            .unwrap_or(ranked.len());
        ranked.insert(pos, s);
    }
    let total_pos = ranked.iter().filter(|s| s.positive).count();
    if total_pos == 0 {
        return None;
    }
    let mut sum = 0.0;
    for k in 1..=ranked.len() {
        if ranked[k - 1].positive {
            let tp = ranked[..k].iter().filter(|s| s.positive).count();
            sum += tp as f64 / k as f64;
        }
    }
    Some(sum / total_pos as f64)
}

pub const STATIC_BOX: (f64, f64, f64, f64) = (0.05, 0.3, 0.15, 0.15);
pub const TRACK_W: f64 = 0.1;
pub const TRACK_STEP: f64 = 0.026;
pub const TRACK_LEN: usize = 20;

/// Planted-artifact corpus. Every location has one static box present in
/// each of its `frames` images (jittered by at most 0.0005 per coordinate),
/// plus `tracks` animals that walk right along their own lane, one frame
/// per step, starting at frame `k * TRACK_LEN` for track `k`.
pub fn rde_fixture(n_locations: usize, frames: usize, tracks: usize, seed: u64) -> (Dataset, DetectionsFile) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    let mut results = Vec::new();
    for l in 0..n_locations {
        let loc = format!("loc{l:03}");
        let mut per_frame: Vec<Vec<Detection>> = vec![Vec::new(); frames];
        let (sx, sy, sw, sh) = STATIC_BOX;
        for dets in per_frame.iter_mut() {
            let mut j = || rng.random_range(-0.0005..=0.0005);
            dets.push(Detection::animal(0.6, BBox::new(sx + j(), sy + j(), sw, sh).unwrap()).unwrap());
        }
        for k in 0..tracks {
            let lane_y = 0.02 + 0.095 * k as f64;
            for i in 0..TRACK_LEN {
                let frame = (k * TRACK_LEN + i) % frames;
                let x = 0.4 + TRACK_STEP * i as f64;
                per_frame[frame].push(Detection::animal(0.9, BBox::new(x, lane_y, TRACK_W, 0.05).unwrap()).unwrap());
            }
        }
        for (j, dets) in per_frame.into_iter().enumerate() {
            let file = format!("{loc}/{j:05}.jpg");
            images.push(ImageRecord::new(format!("{loc}-{j:05}"), file.clone(), 1920, 1080, loc.clone()));
            results.push(ImageDetections::new(file, dets));
        }
    }
    let ds = Dataset::new(Info::default(), images, vec![], vec![Category::empty()]).unwrap();
    (ds, detections_file(results))
}

/// Track detections are the only ones right of the static box.
pub fn is_track_box(b: &BBox) -> bool {
    b.x >= 0.39
}

/// Seeded stream of valid verdict requests against `results`: a mix of
/// image-level and per-detection confirm, reject and relabel decisions.
pub fn random_requests(
    results: &DetectionsFile,
    dataset: &Dataset,
    n: usize,
    seed: u64,
) -> Vec<camtrap_core::review::VerdictRequest> {
    use camtrap_core::review::{Decision, VerdictRequest};
    use rand::{Rng, SeedableRng};
    let idx = dataset.index();
    let targets: Vec<(String, usize)> = results
        .images()
        .iter()
        .filter_map(|img| idx.image_by_file(img.file()).map(|r| (r.id.clone(), img.detections().len())))
        .collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (image_id, count) = &targets[rng.random_range(0..targets.len())];
            let detection_index = if *count > 0 && rng.random_bool(0.5) {
                Some(rng.random_range(0..*count))
            } else {
                None
            };
            let decision = match rng.random_range(0..3) {
                0 => Decision::Confirm,
                1 => Decision::Reject,
                _ => Decision::Relabel { species: SPECIES[rng.random_range(0..SPECIES.len())].to_string() },
            };
            VerdictRequest {
                image_id: image_id.clone(),
                detection_index,
                decision,
                reviewer: format!("r{}", rng.random_range(0..4)),
            }
        })
        .collect()
}
