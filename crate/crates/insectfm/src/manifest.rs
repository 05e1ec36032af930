//! Manifest files: an optional header line, then one record per line.

use std::path::{Path, PathBuf};

use insectfm_core::dataset::{ImageRef, Manifest, ManifestIssue, TaxonomicRecord, MANIFEST_VERSION};
use insectfm_core::image::Image;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagestore;
use crate::jsonl::{read_text, write_atomic};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    manifest_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

pub fn parse_manifest(path: &Path, text: &str) -> Result<Manifest> {
    let mut header: Option<Header> = None;
    let mut records = Vec::new();
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        };
        if records.is_empty() && header.is_none() && raw.contains("\"manifest_version\"") {
            header = Some(serde_json::from_str(raw).map_err(parse_err)?);
            continue;
        }
        let rec: TaxonomicRecord = serde_json::from_str(raw).map_err(parse_err)?;
        records.push(rec);
        lines.push(line);
    }
    let (version, seed) = header.map_or((MANIFEST_VERSION.to_string(), None), |h| (h.manifest_version, h.seed));
    let at = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    Manifest::new(version, seed, records).map_err(|issue| match issue {
        ManifestIssue::Record { index, issue } => at(lines[index], issue.to_string()),
        ManifestIssue::DuplicateId { image_id, first, second } => at(
            lines[second],
            format!("duplicate image_id {image_id:?} (first on line {})", lines[first]),
        ),
        ManifestIssue::InconsistentSpecies { species, first, second } => at(
            lines[second],
            format!(
                "species {species:?} has a different parent chain than on line {}",
                lines[first]
            ),
        ),
    })
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    parse_manifest(path, &read_text(path)?)
}

/// Canonical text: header line, then one compact record per line.
pub fn manifest_to_string(m: &Manifest) -> String {
    let header = Header {
        manifest_version: m.version.clone(),
        seed: m.seed,
    };
    let mut out = serde_json::to_string(&header).expect("serialisable");
    out.push('\n');
    for r in m.records() {
        out.push_str(&serde_json::to_string(r).expect("serialisable"));
        out.push('\n');
    }
    out
}

pub fn save_manifest(path: &Path, m: &Manifest) -> Result<()> {
    write_atomic(path, manifest_to_string(m).as_bytes())
}

/// Resolve a record's pixels; relative paths are taken from `base`.
pub fn load_record_image(base: &Path, rec: &TaxonomicRecord) -> Result<Image> {
    match &rec.image_ref {
        ImageRef::Inline(img) => Ok(img.clone()),
        ImageRef::Path(p) => {
            let p = PathBuf::from(p);
            imagestore::read_image(&if p.is_absolute() { p } else { base.join(p) })
        }
    }
}

/// Manifest plus every image, with paths relative to the manifest's
/// directory.
pub fn load_dataset(path: &Path) -> Result<(Manifest, Vec<Image>)> {
    let m = load_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let images = m
        .records()
        .iter()
        .map(|r| load_record_image(base, r))
        .collect::<Result<Vec<_>>>()?;
    Ok((m, images))
}
