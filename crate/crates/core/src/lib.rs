//! Camera-trap image pipeline.
//!
//! The stages, in the order a project runs them:
//!
//! - [`coco_ct`]: ingest labels into COCO Camera Traps datasets.
//! - [`detectors`] and [`orchestrator`]: run an animal detector over the
//!   corpus in checkpointed shards, producing a [`detection::DetectionsFile`].
//! - [`filtering`] and [`rde`]: drop images without confident detections and
//!   suppress detections that repeat at a fixed position.
//! - [`crops`], [`evaluation`] and [`review`]: build classifier training
//!   manifests, score the detector against image-level labels, and keep the
//!   human review log.
//!
//! Every document this crate writes uses the canonical form in
//! [`canonical`], so identical inputs always produce identical bytes.

pub mod canonical;
pub mod coco_ct;
pub mod crops;
pub mod detection;
pub mod detectors;
pub mod evaluation;
pub mod filtering;
pub mod orchestrator;
pub mod rde;
pub mod review;

pub use coco_ct::{parse_dataset, serialize_dataset, Dataset, ImageRecord};
pub use detection::{iou, merge_results, BBox, Detection, DetectionsFile, ImageDetections};
pub use detectors::{Detector, OracleDetector, OracleNoise, StubDetector};
