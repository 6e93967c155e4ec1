//! File-system side of ingest and crop: walking image trees and cutting
//! crops out of source images.

use std::fs;
use std::path::Path;

use camtrap_core::crops::ClassifierManifest;
use walkdir::WalkDir;

use crate::CliError;

/// Relative `/`-separated paths of every file below `root`, sorted.
pub fn list_tree(root: &Path) -> Result<Vec<String>, CliError> {
    let mut paths = Vec::new();
    for entry in WalkDir::new(root).follow_links(true).sort_by_file_name() {
        let entry = entry.map_err(|e| CliError::Domain(format!("{}: {e}", root.display())))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(root).expect("walkdir yields paths under its root");
        let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
        paths.push(parts.join("/"));
    }
    if paths.is_empty() {
        return Err(CliError::Domain(format!("no files under {}", root.display())));
    }
    Ok(paths)
}

/// Save each manifest entry's crop as a PNG in `out_dir`. Returns the number
/// of crops written.
pub fn emit_crops(manifest: &ClassifierManifest, media_root: &Path, out_dir: &Path) -> Result<usize, CliError> {
    fs::create_dir_all(out_dir).map_err(|e| CliError::Domain(format!("{}: {e}", out_dir.display())))?;
    let mut current: Option<(&str, image::DynamicImage)> = None;
    for entry in &manifest.entries {
        if current.as_ref().map(|(f, _)| *f) != Some(entry.file.as_str()) {
            let path = media_root.join(&entry.file);
            let img = image::open(&path).map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))?;
            current = Some((entry.file.as_str(), img));
        }
        let (_, img) = current.as_ref().expect("loaded above");
        let c = entry.crop;
        if c.left + c.width > img.width() || c.top + c.height > img.height() {
            return Err(CliError::Domain(format!(
                "{}: crop {}x{}+{}+{} exceeds the {}x{} image; dataset dimensions are stale",
                entry.file,
                c.width,
                c.height,
                c.left,
                c.top,
                img.width(),
                img.height()
            )));
        }
        let out = out_dir.join(entry.crop_file_name());
        img.crop_imm(c.left, c.top, c.width, c.height)
            .save(&out)
            .map_err(|e| CliError::Domain(format!("{}: {e}", out.display())))?;
    }
    Ok(manifest.entries.len())
}
