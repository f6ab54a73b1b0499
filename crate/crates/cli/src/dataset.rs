//! On-disk dataset layout shared by the commands.
//!
//! ```text
//! <root>/labels.csv            entity_id,view,identity
//! <root>/view_<m>/<id>.gmpe    encoded entities
//! ```
//!
//! Raw inputs for `build-vocab` and `encode` use the same `view_<m>/`
//! directories; each entry is one entity, either a single file (image or
//! `.gmpf` feature field) or a directory of such files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gmp::encoding::{read_entity, AppearanceMap};
use gmp::imaging::{hsv_patch_features, ingest_feature_field, load_image, rgb_to_hsv, FeatureField};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const LABELS_FILE: &str = "labels.csv";

pub fn view_dir(root: &Path, view: usize) -> PathBuf {
    root.join(format!("view_{view}"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub entity_id: String,
    pub view: usize,
    pub identity: u64,
}

pub fn write_labels(path: &Path, rows: &[LabelRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRow>, CliError> {
    if !path.is_file() {
        return Err(CliError::usage(format!("labels file {} not found", path.display())));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let rows = r
        .deserialize()
        .collect::<Result<Vec<LabelRow>, _>>()
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let mut seen = std::collections::BTreeSet::new();
    for row in &rows {
        if !seen.insert((row.view, row.entity_id.clone())) {
            return Err(CliError::data(format!(
                "{}: entity {} listed twice in view {}",
                path.display(),
                row.entity_id,
                row.view
            )));
        }
    }
    Ok(rows)
}

/// Encoded entities of one view, in labels-file order.
pub struct ViewData {
    pub entity_ids: Vec<String>,
    pub identities: Vec<u64>,
    pub maps: Vec<AppearanceMap<f64>>,
}

pub struct Dataset {
    pub views: Vec<ViewData>,
}

/// Load `views` views (all listed views when `None`).
pub fn load_dataset(root: &Path, views: Option<usize>) -> Result<Dataset, CliError> {
    let rows = read_labels(&root.join(LABELS_FILE))?;
    let listed = rows.iter().map(|r| r.view + 1).max().unwrap_or(0);
    let n = views.unwrap_or(listed);
    if n > listed {
        return Err(CliError::usage(format!("requested {n} views, labels list {listed}")));
    }
    let mut out = Vec::with_capacity(n);
    for m in 0..n {
        let mut v = ViewData {
            entity_ids: Vec::new(),
            identities: Vec::new(),
            maps: Vec::new(),
        };
        for r in rows.iter().filter(|r| r.view == m) {
            let path = view_dir(root, m).join(format!("{}.gmpe", r.entity_id));
            v.maps.push(read_entity(&path)?);
            v.entity_ids.push(r.entity_id.clone());
            v.identities.push(r.identity);
        }
        out.push(v);
    }
    Ok(Dataset { views: out })
}

/// Entities of one raw input view: `(entity_id, image or feature files)`.
pub fn list_raw_entities(root: &Path, view: usize) -> Result<Vec<(String, Vec<PathBuf>)>, CliError> {
    let dir = view_dir(root, view);
    let mut out = Vec::new();
    for entry in sorted_entries(&dir)? {
        let name = entry
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| CliError::data(format!("non UTF-8 file name in {}", dir.display())))?
            .to_string();
        if entry.is_dir() {
            let files: Vec<PathBuf> = sorted_entries(&entry)?.into_iter().filter(|p| p.is_file()).collect();
            if files.is_empty() {
                return Err(CliError::usage(format!("entity directory {} is empty", entry.display())));
            }
            out.push((name, files));
        } else {
            let stem = entry
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or(&name)
                .to_string();
            out.push((stem, vec![entry]));
        }
    }
    if out.is_empty() {
        return Err(CliError::usage(format!("{} holds no inputs", dir.display())));
    }
    Ok(out)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let rd = std::fs::read_dir(dir).map_err(|e| CliError::usage(format!("cannot read {}: {e}", dir.display())))?;
    let mut v = rd
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    v.retain(|p| !p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.')));
    v.sort();
    Ok(v)
}

/// Image preprocessing for raw inputs.
#[derive(Debug, Clone, Copy)]
pub struct ImagePrep {
    pub width: usize,
    pub height: usize,
    pub patch: usize,
}

/// Features of one input file: `.gmpf` files are read as-is, anything else
/// is decoded as an image, resized, converted to HSV and patch-sampled.
pub fn load_features(path: &Path, prep: ImagePrep) -> Result<FeatureField, CliError> {
    if path.extension().is_some_and(|e| e == "gmpf") {
        return Ok(ingest_feature_field(path)?);
    }
    let img = load_image(path, (prep.width, prep.height))?;
    let img = if img.channels() == 3 {
        img
    } else {
        // grey images: replicate into three equal channels
        let vals: Vec<f32> = img.values().iter().flat_map(|&v| [v, v, v]).collect();
        gmp::imaging::ImageGrid::new(img.width(), img.height(), 3, vals)?
    };
    Ok(hsv_patch_features(&rgb_to_hsv(&img)?, (prep.patch, prep.patch))?)
}

/// Count the `view_<m>` directories directly under `root`.
pub fn count_views(root: &Path) -> Result<usize, CliError> {
    let mut n = 0;
    while view_dir(root, n).is_dir() {
        n += 1;
    }
    if n == 0 {
        return Err(CliError::usage(format!("no view_0 directory under {}", root.display())));
    }
    Ok(n)
}

/// SHA-256 of each file, keyed by its path relative to `root`.
pub fn digest_tree(root: &Path, files: &[PathBuf]) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for f in files {
        let bytes = std::fs::read(f).map_err(|e| CliError::data(format!("{}: {e}", f.display())))?;
        let rel = f.strip_prefix(root).unwrap_or(f).to_string_lossy().replace('\\', "/");
        out.insert(rel, gmp::model::sha256_hex(&bytes));
    }
    Ok(out)
}
